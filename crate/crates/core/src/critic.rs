//! Expectile-regression critic (double Q, soft-updated targets, V by
//! expectile loss) and the weight formulations built on it.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph};
use crate::denoiser::batch_hash;
use crate::error::{Error, Result};
use crate::nn::{Activation, Architecture, FinalInit, Network};
use crate::optim::AdamState;
use crate::rng::SeededRng;
use crate::tensor::{check_cols, Tensor};
use crate::toy::Transition;

/// `|τ − 1{u<0}| u²`
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    expectile_weight(u, tau) * u * u
}

fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

/// The τ-expectile of a sample: the root of
/// `τ Σ (x_i − m)₊ = (1 − τ) Σ (m − x_i)₊`, found by bisection.
pub fn sample_expectile(xs: &[f64], tau: f64) -> Result<f64> {
    if xs.is_empty() || !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Invalid("expectile needs a sample and τ in (0, 1)".into()));
    }
    let f = |m: f64| {
        xs.iter()
            .map(|&x| {
                let u = x - m;
                expectile_weight(u, tau) * u
            })
            .sum::<f64>()
    };
    let mut lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi.abs().max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_tau")]
    pub tau: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_batch")]
    pub batch: usize,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_width")]
    pub width: usize,
    #[serde(default = "d_depth")]
    pub depth: usize,
    #[serde(default = "d_log")]
    pub log_every: usize,
}

fn d_gamma() -> f64 {
    0.99
}
fn d_tau() -> f64 {
    0.7
}
fn d_lambda() -> f64 {
    0.005
}
fn d_lr() -> f64 {
    3e-4
}
fn d_batch() -> usize {
    256
}
fn d_width() -> usize {
    256
}
fn d_depth() -> usize {
    2
}
fn d_log() -> usize {
    100
}

impl CriticConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            gamma: d_gamma(),
            tau: d_tau(),
            lambda: d_lambda(),
            lr: d_lr(),
            batch: d_batch(),
            steps,
            seed: 0,
            width: d_width(),
            depth: d_depth(),
            log_every: d_log(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Invalid(format!("expectile τ = {} must lie in (0, 1)", self.tau)));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Invalid(format!("soft-update rate {} must lie in (0, 1]", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Invalid(format!("discount {} must lie in [0, 1]", self.gamma)));
        }
        if self.batch == 0 || self.log_every == 0 || self.width == 0 {
            return Err(Error::Invalid("batch, width and log_every must be ≥ 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be ≥ 0", self.lr)));
        }
        Ok(())
    }

    fn arch(&self) -> Architecture {
        Architecture::Mlp {
            depth: self.depth,
            width: self.width,
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticState {
    pub q1: Network,
    pub q2: Network,
    pub q1_target: Network,
    pub q2_target: Network,
    pub v: Network,
    pub adam_q1: AdamState,
    pub adam_q2: AdamState,
    pub adam_v: AdamState,
    pub state_dim: usize,
    pub action_dim: usize,
    pub step: usize,
}

impl CriticState {
    pub fn new(cfg: &CriticConfig, state_dim: usize, action_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(cfg.seed, 1);
        let q1 = Network::new(cfg.arch(), state_dim + action_dim, 1, FinalInit::He, &mut rng)?;
        let q2 = Network::new(cfg.arch(), state_dim + action_dim, 1, FinalInit::He, &mut rng)?;
        let v = Network::new(cfg.arch(), state_dim, 1, FinalInit::He, &mut rng)?;
        Ok(Self {
            adam_q1: AdamState::new(&q1.params.values, cfg.lr),
            adam_q2: AdamState::new(&q2.params.values, cfg.lr),
            adam_v: AdamState::new(&v.params.values, cfg.lr),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            v,
            state_dim,
            action_dim,
            step: 0,
        })
    }

    fn sa(&self, s: &Tensor, a: &Tensor) -> Result<Tensor> {
        check_cols(s, self.state_dim, "critic state input")?;
        check_cols(a, self.action_dim, "critic action input")?;
        Tensor::concat_cols(&[s, a])
    }

    /// `min(Q1, Q2)(s, a)` per row.
    pub fn q_min(&self, s: &Tensor, a: &Tensor) -> Result<Vec<f64>> {
        let x = self.sa(s, a)?;
        let (q1, q2) = (self.q1.eval(&x)?, self.q2.eval(&x)?);
        Ok(q1.data().iter().zip(q2.data()).map(|(a, b)| a.min(*b)).collect())
    }

    pub fn value(&self, s: &Tensor) -> Result<Vec<f64>> {
        check_cols(s, self.state_dim, "critic state input")?;
        Ok(self.v.eval(s)?.into_data())
    }

    /// `A(s, a) = min(Q1, Q2)(s, a) − V(s)` per row.
    pub fn advantage(&self, s: &Tensor, a: &Tensor) -> Result<Vec<f64>> {
        let q = self.q_min(s, a)?;
        let v = self.value(s)?;
        Ok(q.iter().zip(&v).map(|(q, v)| q - v).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticLossRecord {
    pub step: usize,
    pub v_loss: f64,
    pub q_loss: f64,
}

/// Transitions as column blocks.
struct Table {
    s: Tensor,
    a: Tensor,
    r: Vec<f64>,
    s_next: Tensor,
    done: Vec<f64>,
}

impl Table {
    fn new(ts: &[Transition]) -> Result<Self> {
        let s = Tensor::from_rows(&ts.iter().map(|t| t.s.clone()).collect::<Vec<_>>())?;
        let a = Tensor::from_rows(&ts.iter().map(|t| t.a.clone()).collect::<Vec<_>>())?;
        let s_next = Tensor::from_rows(&ts.iter().map(|t| t.s_next.clone()).collect::<Vec<_>>())?;
        let r: Vec<f64> = ts.iter().map(|t| t.r).collect();
        if !(s.is_finite() && a.is_finite() && s_next.is_finite() && r.iter().all(|v| v.is_finite())) {
            return Err(Error::Invalid("transition table contains non-finite values".into()));
        }
        Ok(Self {
            s,
            a,
            r,
            s_next,
            done: ts.iter().map(|t| if t.done { 1.0 } else { 0.0 }).collect(),
        })
    }
}

/// One gradient step on `mean(c ⊙ (net(x) − y)²)`, where `c` is computed
/// from the residuals `net(x) − y` by `coef`.
fn regress(
    net: &mut Network,
    adam: &mut AdamState,
    x: Tensor,
    y: Tensor,
    coef: impl Fn(f64) -> f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = net.params.bind(&mut g, true);
    let xi = g.constant(x);
    let out = net.forward(&mut g, &p, xi, None)?;
    let yi = g.constant(y);
    let diff = g.sub(out, yi)?;
    let c = g.value(diff).map(&coef);
    let sq = g.square(diff);
    let wsq = g.mul_const(sq, c)?;
    let loss_node = g.mean(wsq);
    let loss = g.value(loss_node).data()[0];
    if !loss.is_finite() {
        return Err(Error::Invalid("non-finite loss".into()));
    }
    let mut grads = g.backward_scalar(loss_node)?;
    let grads: Vec<Tensor> = p
        .iter()
        .zip(&net.params.values)
        .map(|(&id, v)| grads.take(id).unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();
    drop(g);
    adam.step(&mut net.params.values, &grads, &net.params.names)?;
    Ok(loss)
}

/// Alternates the V expectile update against `min(Q1ᵗ, Q2ᵗ)` and the Q
/// regression onto `r + γ (1 − done) V(s')`, then soft-updates the targets.
pub fn train_critic(ts: &[Transition], cfg: &CriticConfig) -> Result<(CriticState, Vec<CriticLossRecord>)> {
    let first = ts.first().ok_or_else(|| Error::Invalid("empty transition table".into()))?;
    let mut st = CriticState::new(cfg, first.s.len(), first.a.len())?;
    let trace = continue_critic(&mut st, ts, cfg)?;
    Ok((st, trace))
}

/// Trains an existing state up to `cfg.steps` total steps.
pub fn continue_critic(st: &mut CriticState, ts: &[Transition], cfg: &CriticConfig) -> Result<Vec<CriticLossRecord>> {
    cfg.validate()?;
    let tab = Table::new(ts)?;
    let n = ts.len();
    let mut rng = SeededRng::new(cfg.seed, 2);
    for _ in 0..st.step {
        for _ in 0..cfg.batch {
            rng.index(n);
        }
    }
    let mut trace = Vec::new();
    for step in st.step..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.index(n)).collect();
        let diverged = |_| Error::TrainingDiverged {
            step,
            batch_hash: batch_hash(&idx, &[]),
        };
        let s = tab.s.gather_rows(&idx);
        let a = tab.a.gather_rows(&idx);
        let sn = tab.s_next.gather_rows(&idx);
        let sa = Tensor::concat_cols(&[&s, &a])?;

        let qt1 = st.q1_target.eval(&sa)?;
        let qt2 = st.q2_target.eval(&sa)?;
        let qt = qt1.zip_map(&qt2, "q target", f64::min)?;
        let tau = cfg.tau;
        // residual is V − target, so u = target − V = −residual
        let v_loss = regress(&mut st.v, &mut st.adam_v, s, qt, |d| expectile_weight(-d, tau)).map_err(diverged)?;

        let vn = st.v.eval(&sn)?;
        let y: Vec<f64> = idx
            .iter()
            .zip(vn.data())
            .map(|(&i, v)| tab.r[i] + cfg.gamma * (1.0 - tab.done[i]) * v)
            .collect();
        let y = Tensor::new(vec![idx.len(), 1], y)?;
        let l1 = regress(&mut st.q1, &mut st.adam_q1, sa.clone(), y.clone(), |_| 1.0).map_err(diverged)?;
        let l2 = regress(&mut st.q2, &mut st.adam_q2, sa, y, |_| 1.0).map_err(diverged)?;

        st.q1_target.params.soft_update_from(&st.q1.params, cfg.lambda)?;
        st.q2_target.params.soft_update_from(&st.q2.params, cfg.lambda)?;
        st.step = step + 1;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            trace.push(CriticLossRecord {
                step,
                v_loss,
                q_loss: 0.5 * (l1 + l2),
            });
        }
    }
    Ok(trace)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightSpec {
    /// `σ(A) τ + (1 − σ(A)) (1 − τ)`
    SmoothExpectile { tau: f64 },
    /// `min(e^{βA}, clip_hi)`, floored at the smallest positive double.
    Exponential {
        beta: f64,
        #[serde(default = "d_clip")]
        clip_hi: f64,
    },
    /// `α |e^{α(Q−V)} − 1| / |Q − V|`, equal to `α²` at `Q = V`.
    Linex { alpha: f64 },
    /// `|τ − 1{Q < V}|`. Diagnostic only.
    TwoValuedExpectile { tau: f64 },
}

fn d_clip() -> f64 {
    80.0
}

/// Weight of one `(Q, V)` pair.
pub fn weight_eval(spec: &WeightSpec, q: f64, v: f64) -> f64 {
    let adv = q - v;
    match *spec {
        WeightSpec::SmoothExpectile { tau } => {
            let s = sigmoid(adv);
            s * tau + (1.0 - s) * (1.0 - tau)
        }
        WeightSpec::Exponential { beta, clip_hi } => (beta * adv).exp().min(clip_hi).max(f64::MIN_POSITIVE),
        WeightSpec::Linex { alpha } => {
            if adv == 0.0 {
                alpha * alpha
            } else {
                alpha * (alpha * adv).exp_m1().abs() / adv.abs()
            }
        }
        WeightSpec::TwoValuedExpectile { tau } => {
            if q < v {
                1.0 - tau
            } else {
                tau
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{bandit_reward, make_bandit_dataset, BanditConfig};

    #[test]
    fn expectile_loss_examples() {
        assert!((expectile_loss(2.0, 0.7) - 2.8).abs() < 1e-15);
        assert!((expectile_loss(-2.0, 0.7) - 1.2).abs() < 1e-15);
        for u in [0.3, 1.0, 4.0] {
            assert_eq!(expectile_loss(u, 0.5), expectile_loss(-u, 0.5));
            assert_eq!(expectile_loss(u, 0.5), 0.5 * u * u);
        }
    }

    #[test]
    fn sample_expectile_at_half_is_mean() {
        let xs = [1.0, 2.0, 4.0, 9.0];
        assert!((sample_expectile(&xs, 0.5).unwrap() - 4.0).abs() < 1e-12);
        let hi = sample_expectile(&xs, 0.9).unwrap();
        assert!(hi > 4.0 && hi < 9.0);
        // first-order condition
        let g: f64 = xs.iter().map(|&x| expectile_weight(x - hi, 0.9) * (x - hi)).sum();
        assert!(g.abs() < 1e-10);
    }

    #[test]
    fn weight_examples() {
        let se = WeightSpec::SmoothExpectile { tau: 0.7 };
        for tau in [0.1, 0.7, 0.9] {
            assert_eq!(weight_eval(&WeightSpec::SmoothExpectile { tau }, 1.0, 1.0), 0.5);
        }
        assert!((weight_eval(&se, 3f64.ln(), 0.0) - 0.6).abs() < 1e-15);
        let ex = WeightSpec::Exponential { beta: 3.0, clip_hi: 80.0 };
        assert_eq!(weight_eval(&ex, 0.0, 0.0), 1.0);
        assert_eq!(weight_eval(&ex, 50.0, 0.0), 80.0);
        assert!(weight_eval(&ex, -1e6, 0.0) > 0.0);
        let lx = WeightSpec::Linex { alpha: 1.0 };
        assert!((weight_eval(&lx, 1.0, 0.0) - (std::f64::consts::E - 1.0)).abs() < 1e-15);
        assert_eq!(weight_eval(&lx, 0.4, 0.4), 1.0);
        let lx2 = WeightSpec::Linex { alpha: 2.5 };
        assert_eq!(weight_eval(&lx2, 0.0, 0.0), 6.25);
        assert!((weight_eval(&lx2, 1e-9, 0.0) - 6.25).abs() < 1e-7);
        let two = WeightSpec::TwoValuedExpectile { tau: 0.7 };
        assert_eq!(weight_eval(&two, 0.0, 1.0), 0.30000000000000004);
        assert_eq!(weight_eval(&two, 1.0, 0.0), 0.7);
    }

    fn bandit(n: usize, seed: u64) -> Vec<Transition> {
        make_bandit_dataset(&BanditConfig { n, noise: 0.3, seed }).unwrap()
    }

    #[test]
    fn deterministic_given_seed_and_resumable() {
        let ts = bandit(500, 0);
        let mut cfg = CriticConfig::with_steps(6);
        cfg.width = 16;
        cfg.batch = 32;
        let (a, ta) = train_critic(&ts, &cfg).unwrap();
        let (b, tb) = train_critic(&ts, &cfg).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a, b);
        let mut part = CriticState::new(&cfg, 2, 2).unwrap();
        continue_critic(&mut part, &ts, &CriticConfig { steps: 3, ..cfg.clone() }).unwrap();
        continue_critic(&mut part, &ts, &cfg).unwrap();
        assert_eq!(part, a);
    }

    #[test]
    fn full_soft_update_copies_online_q() {
        let ts = bandit(200, 1);
        let mut cfg = CriticConfig::with_steps(3);
        cfg.width = 8;
        cfg.batch = 16;
        cfg.lambda = 1.0;
        let (st, _) = train_critic(&ts, &cfg).unwrap();
        assert_eq!(st.q1_target.params, st.q1.params);
        assert_eq!(st.q2_target.params, st.q2.params);
    }

    #[test]
    fn advantage_is_difference_of_heads() {
        let ts = bandit(200, 2);
        let mut cfg = CriticConfig::with_steps(2);
        cfg.width = 8;
        let (st, _) = train_critic(&ts, &cfg).unwrap();
        let s = Tensor::from_rows(&[[0.1, -0.2], [0.5, 0.5]]).unwrap();
        let a = Tensor::from_rows(&[[0.0, 0.0], [0.4, 0.7]]).unwrap();
        let adv = st.advantage(&s, &a).unwrap();
        let q = st.q_min(&s, &a).unwrap();
        let v = st.value(&s).unwrap();
        for i in 0..2 {
            assert_eq!(adv[i], q[i] - v[i]);
            // a shared shift of both heads cancels
            assert!(((q[i] + 3.0) - (v[i] + 3.0) - adv[i]).abs() < 1e-12);
        }
        assert!(st.advantage(&a, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(train_critic(&[], &CriticConfig::with_steps(1)).is_err());
        let mut cfg = CriticConfig::with_steps(1);
        cfg.tau = 1.0;
        assert!(train_critic(&bandit(10, 0), &cfg).is_err());
        let mut ts = bandit(10, 0);
        ts[3].r = f64::NAN;
        assert!(train_critic(&ts, &CriticConfig::with_steps(1)).is_err());
        assert_eq!(bandit_reward(&[1.0, 1.0], &[1.0, 1.0]), 0.0);
    }
}
