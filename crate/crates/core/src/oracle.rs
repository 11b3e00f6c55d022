//! Closed-form references: the exact denoiser of a finite dataset, a
//! quadrature estimate of `∇ log E[w | z_k]`, and importance resampling.

use rand::distributions::WeightedIndex;
use rayon::prelude::*;

use crate::denoiser::{Cond, EpsModel};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// The minimizer of the denoising loss for an empirical distribution: the
/// posterior over dataset points given `z_k` is a softmax.
#[derive(Clone, Debug)]
pub struct EmpiricalDenoiser {
    data: Tensor,
    schedule: NoiseSchedule,
    weight_in_likelihood: bool,
}

impl EmpiricalDenoiser {
    /// `data` rows are augmented samples `[a, w]` with positive `w`.
    pub fn new(data: Tensor, schedule: NoiseSchedule) -> Result<Self> {
        if data.rows() == 0 || data.is_empty() {
            return Err(Error::Invalid("empirical denoiser needs at least one point".into()));
        }
        if data.cols() < 2 {
            return Err(Error::Invalid("augmented samples need width ≥ 2".into()));
        }
        let wc = data.cols() - 1;
        let bad: Vec<usize> = (0..data.rows()).filter(|&i| !(data[(i, wc)] > 0.0)).collect();
        if !bad.is_empty() {
            return Err(Error::NonPositiveWeights { indices: bad });
        }
        Ok(Self {
            data,
            schedule,
            weight_in_likelihood: true,
        })
    }

    /// With `false`, posterior weights use only the data coordinates and the
    /// weight channel acts as a label carried along with each point.
    pub fn with_weight_in_likelihood(mut self, on: bool) -> Self {
        self.weight_in_likelihood = on;
        self
    }

    fn likelihood_width(&self) -> usize {
        if self.weight_in_likelihood {
            self.data.cols()
        } else {
            self.data.cols() - 1
        }
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    fn step_coeffs(&self, k: usize) -> Result<(f64, f64)> {
        if k == 0 || k > self.schedule.steps() {
            return Err(Error::Invalid(format!("oracle step {k} outside 1..={}", self.schedule.steps())));
        }
        Ok((self.schedule.alpha(k), self.schedule.sigma(k)))
    }

    /// Softmax posterior weights `r_i` for one query row.
    pub fn posterior_weights(&self, z: &[f64], k: usize) -> Result<Vec<f64>> {
        let (a, s) = self.step_coeffs(k)?;
        Ok(self.weights_row(z, a, s))
    }

    fn weights_row(&self, z: &[f64], a: f64, s: f64) -> Vec<f64> {
        let inv = 1.0 / (2.0 * s * s);
        let mut logits: Vec<f64> = (0..self.data.rows())
            .map(|i| {
                -inv * self
                    .data
                    .row_slice(i)
                    .iter()
                    .zip(z)
                    .take(self.likelihood_width())
                    .map(|(zi, q)| (q - a * zi).powi(2))
                    .sum::<f64>()
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in &mut logits {
            *l = (*l - max).exp();
            total += *l;
        }
        for l in &mut logits {
            *l /= total;
        }
        logits
    }

    fn mean_row(&self, r: &[f64]) -> Vec<f64> {
        let mut m = vec![0.0; self.data.cols()];
        for (i, ri) in r.iter().enumerate() {
            for (mj, zj) in m.iter_mut().zip(self.data.row_slice(i)) {
                *mj += ri * zj;
            }
        }
        m
    }

    /// `E[z0 | z_k]` for every row of `zk`.
    pub fn exact_posterior_mean(&self, zk: &Tensor, k: usize) -> Result<Tensor> {
        let (a, s) = self.step_coeffs(k)?;
        self.check_width(zk)?;
        let rows: Vec<Vec<f64>> = (0..zk.rows())
            .into_par_iter()
            .map(|i| self.mean_row(&self.weights_row(zk.row_slice(i), a, s)))
            .collect();
        Tensor::from_rows(&rows)
    }

    /// `ε* = (z_k − α_k E[z0 | z_k]) / σ_k`.
    pub fn exact_eps(&self, zk: &Tensor, k: usize) -> Result<Tensor> {
        let (a, s) = self.step_coeffs(k)?;
        let m = self.exact_posterior_mean(zk, k)?;
        zk.zip_map(&m, "exact_eps", |z, mu| (z - a * mu) / s)
    }

    /// `E[w | z_k] = Σ r_i w_i` computed from the posterior weights directly.
    pub fn posterior_weight_mean(&self, z: &[f64], k: usize) -> Result<f64> {
        let r = self.posterior_weights(z, k)?;
        let wc = self.data.cols() - 1;
        Ok(r.iter().enumerate().map(|(i, ri)| ri * self.data[(i, wc)]).sum())
    }

    fn check_width(&self, zk: &Tensor) -> Result<()> {
        if zk.cols() != self.data.cols() {
            return Err(Error::Shape {
                op: "empirical denoiser".into(),
                detail: format!("query width {} vs data width {}", zk.cols(), self.data.cols()),
            });
        }
        Ok(())
    }
}

impl EpsModel for EmpiricalDenoiser {
    fn width(&self) -> usize {
        self.data.cols()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict_eps(&self, zk: &Tensor, k: usize, cond: &Cond) -> Result<Tensor> {
        no_cond(cond)?;
        self.exact_eps(zk, k)
    }

    /// `∂ε*/∂z_k = (I − (α²/σ²) C P) / σ` with `C` the posterior covariance
    /// and `P` the projection onto the likelihood coordinates.
    fn predict_eps_vjp(&self, zk: &Tensor, k: usize, cond: &Cond, cotangent: &Tensor) -> Result<(Tensor, Tensor)> {
        no_cond(cond)?;
        let (a, s) = self.step_coeffs(k)?;
        self.check_width(zk)?;
        zk.expect_same(cotangent, "empirical vjp")?;
        let w = zk.cols();
        let lik = self.likelihood_width();
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..zk.rows())
            .into_par_iter()
            .map(|i| {
                let z = zk.row_slice(i);
                let c = cotangent.row_slice(i);
                let r = self.weights_row(z, a, s);
                let m = self.mean_row(&r);
                let eps: Vec<f64> = z.iter().zip(&m).map(|(zj, mj)| (zj - a * mj) / s).collect();
                // C c = Σ r_i (z_i − m) ((z_i − m)·c)
                let mut cc = vec![0.0; w];
                for (idx, ri) in r.iter().enumerate() {
                    if *ri == 0.0 {
                        continue;
                    }
                    let zi = self.data.row_slice(idx);
                    let proj: f64 = zi.iter().zip(&m).zip(c).map(|((x, mu), cj)| (x - mu) * cj).sum();
                    for ((o, x), mu) in cc.iter_mut().zip(zi).zip(&m).take(lik) {
                        *o += ri * (x - mu) * proj;
                    }
                }
                let ratio = a * a / (s * s);
                let grad: Vec<f64> = c.iter().zip(&cc).map(|(cj, ccj)| (cj - ratio * ccj) / s).collect();
                (eps, grad)
            })
            .collect();
        let (eps, grad): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        Ok((Tensor::from_rows(&eps)?, Tensor::from_rows(&grad)?))
    }
}

fn no_cond(cond: &Cond) -> Result<()> {
    if *cond != Cond::None {
        return Err(Error::Conditioning("the empirical denoiser takes no conditioning".into()));
    }
    Ok(())
}

/// The clean distribution seen by [`GridOracle`].
pub enum GridSource<'a> {
    /// Density over actions in `[lo, hi]^d` and the weight function; `z` is
    /// `[a, w(a)]`.
    Density {
        q0: &'a (dyn Fn(&[f64]) -> f64 + Sync),
        w: &'a (dyn Fn(&[f64]) -> f64 + Sync),
    },
    /// Point masses `(z_i, mass)` with `z_i = [a_i, w_i]`; every `a_i` must
    /// sit on a node of the coarsest grid, so quadrature reduces to a sum.
    PointMasses(&'a [(Vec<f64>, f64)]),
}

/// Quadrature estimate of `∇_{z_k} log E[w | z_k]` on a tensor-product
/// Simpson grid over `[lo, hi]^d`, `d ≤ 2`.
#[derive(Clone, Debug)]
pub struct GridOracle {
    pub lo: f64,
    pub hi: f64,
    /// Nodes per axis on the first pass; must be odd.
    pub nodes: usize,
    /// Refinement stops once the largest node count reaches this.
    pub max_nodes: usize,
    /// Relative stability demanded of `E[w | z_k]` between refinements.
    pub tol: f64,
    /// Whether the likelihood of `z_k` includes the weight coordinate.
    pub weight_in_likelihood: bool,
}

impl Default for GridOracle {
    fn default() -> Self {
        Self {
            lo: -4.0,
            hi: 4.0,
            nodes: 257,
            max_nodes: 2049,
            tol: 1e-6,
            weight_in_likelihood: true,
        }
    }
}

/// Result of one grid evaluation.
#[derive(Clone, Debug)]
pub struct GridScore {
    pub score: Vec<f64>,
    pub expected_w: f64,
    /// Nodes per axis used for the accepted estimate.
    pub nodes: usize,
}

impl GridOracle {
    /// `log E[w | z]` at a fixed resolution.
    fn log_expected_w(&self, src: &GridSource<'_>, z: &[f64], a: f64, s: f64, nodes: usize, d: usize) -> Result<f64> {
        let inv = 1.0 / (2.0 * s * s);
        let loglik = |zi: &[f64]| -> f64 {
            let m = if self.weight_in_likelihood { zi.len() } else { d };
            -inv * (0..m).map(|j| (z[j] - a * zi[j]).powi(2)).sum::<f64>()
        };
        // log Σ exp(terms) accumulated in two passes: numerator and denominator
        let mut num = LogSum::default();
        let mut den = LogSum::default();
        match src {
            GridSource::PointMasses(points) => {
                let h = (self.hi - self.lo) / (self.nodes - 1) as f64;
                for (zi, mass) in points.iter() {
                    if zi.len() != d + 1 {
                        return Err(Error::Invalid("point mass width differs from query width".into()));
                    }
                    for &x in &zi[..d] {
                        let t = (x - self.lo) / h;
                        if (t - t.round()).abs() > 1e-9 || t < -1e-9 || t > (self.nodes - 1) as f64 + 1e-9 {
                            return Err(Error::GridTooCoarse(format!("point coordinate {x} is not a grid node")));
                        }
                    }
                    let w = zi[d];
                    if !(w > 0.0) || !(*mass > 0.0) {
                        return Err(Error::NonPositiveWeights { indices: vec![] });
                    }
                    let l = mass.ln() + loglik(zi);
                    den.add(l);
                    num.add(l + w.ln());
                }
            }
            GridSource::Density { q0, w } => {
                let h = (self.hi - self.lo) / (nodes - 1) as f64;
                let coord = |i: usize| self.lo + h * i as f64;
                let sw = |i: usize| simpson_weight(i, nodes) * h / 3.0;
                let mut zi = vec![0.0; d + 1];
                let mut visit = |idx: &[usize], zi: &mut Vec<f64>| {
                    let mut wt = 1.0;
                    for (j, &i) in idx.iter().enumerate() {
                        zi[j] = coord(i);
                        wt *= sw(i);
                    }
                    let q = q0(&zi[..d]);
                    if q <= 0.0 {
                        return;
                    }
                    let wv = w(&zi[..d]);
                    zi[d] = wv;
                    let l = (wt * q).ln() + loglik(zi);
                    den.add(l);
                    num.add(l + wv.ln());
                };
                match d {
                    1 => (0..nodes).for_each(|i| visit(&[i], &mut zi)),
                    2 => {
                        for i in 0..nodes {
                            for j in 0..nodes {
                                visit(&[i, j], &mut zi);
                            }
                        }
                    }
                    _ => return Err(Error::Invalid("grid oracle supports 1-D and 2-D actions".into())),
                }
            }
        }
        if den.is_empty() {
            return Err(Error::GridTooCoarse("no grid mass".into()));
        }
        Ok(num.value() - den.value())
    }

    /// `∇_{z_k} log E[w | z_k]` by central differences (step `1e-4·σ_k`) of
    /// the quadrature value, after refining until `E[w | z_k]` is stable.
    pub fn intractable_score(&self, src: &GridSource<'_>, schedule: &NoiseSchedule, z: &[f64], k: usize) -> Result<GridScore> {
        if self.nodes.is_multiple_of(2) || self.nodes < 3 {
            return Err(Error::Invalid("Simpson grids need an odd node count ≥ 3".into()));
        }
        if k == 0 || k > schedule.steps() {
            return Err(Error::Invalid(format!("step {k} outside 1..={}", schedule.steps())));
        }
        let d = z.len() - 1;
        let (a, s) = (schedule.alpha(k), schedule.sigma(k));
        let mut nodes = self.nodes;
        let mut prev = self.log_expected_w(src, z, a, s, nodes, d)?;
        if !matches!(src, GridSource::PointMasses(_)) {
            loop {
                let finer = 2 * nodes - 1;
                if finer > self.max_nodes {
                    return Err(Error::GridTooCoarse(format!(
                        "E[w|z] not stable to {:e} at {nodes} nodes per axis",
                        self.tol
                    )));
                }
                let next = self.log_expected_w(src, z, a, s, finer, d)?;
                nodes = finer;
                let stable = (next.exp() - prev.exp()).abs() <= self.tol * prev.exp().max(f64::MIN_POSITIVE);
                prev = next;
                if stable {
                    break;
                }
            }
        }
        let h = 1e-4 * s;
        let mut score = vec![0.0; z.len()];
        for (j, sc) in score.iter_mut().enumerate() {
            if j == d && !self.weight_in_likelihood {
                continue;
            }
            let mut zp = z.to_vec();
            zp[j] += h;
            let mut zm = z.to_vec();
            zm[j] -= h;
            let fp = self.log_expected_w(src, &zp, a, s, nodes, d)?;
            let fm = self.log_expected_w(src, &zm, a, s, nodes, d)?;
            *sc = (fp - fm) / (2.0 * h);
        }
        Ok(GridScore {
            score,
            expected_w: prev.exp(),
            nodes,
        })
    }
}

fn simpson_weight(i: usize, nodes: usize) -> f64 {
    if i == 0 || i == nodes - 1 {
        1.0
    } else if i % 2 == 1 {
        4.0
    } else {
        2.0
    }
}

/// Streaming log-sum-exp.
#[derive(Default)]
struct LogSum {
    max: Option<f64>,
    acc: f64,
}

impl LogSum {
    fn add(&mut self, l: f64) {
        match self.max {
            None => {
                self.max = Some(l);
                self.acc = 1.0;
            }
            Some(m) if l <= m => self.acc += (l - m).exp(),
            Some(m) => {
                self.acc = self.acc * (m - l).exp() + 1.0;
                self.max = Some(l);
            }
        }
    }

    fn is_empty(&self) -> bool {
        self.max.is_none()
    }

    fn value(&self) -> f64 {
        self.max.map_or(f64::NEG_INFINITY, |m| m + self.acc.ln())
    }
}

/// Self-normalized categorical resampling of `pool` with probabilities `∝ w`.
pub fn importance_resample_target(pool: &[Vec<f64>], weights: &[f64], m: usize, rng: &mut SeededRng) -> Result<Vec<Vec<f64>>> {
    if pool.len() != weights.len() {
        return Err(Error::Invalid(format!(
            "{} pool points but {} weights",
            pool.len(),
            weights.len()
        )));
    }
    if pool.len() < m {
        return Err(Error::Invalid(format!("pool of {} is smaller than m = {m}", pool.len())));
    }
    let dist = WeightedIndex::new(weights)
        .map_err(|e| Error::Invalid(format!("resampling weights unusable: {e}")))?;
    Ok((0..m).map(|_| pool[rng.sample(&dist)].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point() -> EmpiricalDenoiser {
        let s = NoiseSchedule::cosine(100).unwrap();
        EmpiricalDenoiser::new(Tensor::from_rows(&[[-1.0, 1.0], [1.0, 3.0]]).unwrap(), s).unwrap()
    }

    /// A schedule whose step 1 has α = 0.5, σ² = 0.75.
    fn half_schedule() -> NoiseSchedule {
        serde_json::from_value(serde_json::json!({
            "kind": "cosine",
            "alpha": [1.0, 0.5],
            "sigma": [0.0, 0.75f64.sqrt()],
        }))
        .unwrap()
    }

    #[test]
    fn posterior_mean_by_hand() {
        let d = EmpiricalDenoiser::new(Tensor::from_rows(&[[-1.0, 1.0], [1.0, 3.0]]).unwrap(), half_schedule()).unwrap();
        let r = d.posterior_weights(&[0.0, 0.0], 1).unwrap();
        let r1 = 1.0 / (1.0 + (-4.0f64 / 3.0).exp());
        assert!((r[0] - r1).abs() < 1e-15);
        assert!((r1 - 0.7914).abs() < 1e-4);
        let m = d.exact_posterior_mean(&Tensor::row(&[0.0, 0.0]), 1).unwrap();
        assert!((m.data()[0] - (1.0 - 2.0 * r1)).abs() < 1e-15);
        assert!((m.data()[0] + 0.5828).abs() < 1e-4);
        assert!((m.data()[1] - 1.4172).abs() < 1e-4);
        let eps = d.exact_eps(&Tensor::row(&[0.0, 0.0]), 1).unwrap();
        let back = d.schedule().data_prediction(&Tensor::row(&[0.0, 0.0]), &eps, 1).unwrap();
        assert!(back.max_abs_diff(&m).unwrap() < 1e-12);
    }

    #[test]
    fn single_point_posterior() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let d = EmpiricalDenoiser::new(Tensor::row(&[0.4, 2.0]), s.clone()).unwrap();
        let mut rng = SeededRng::new(0, 0);
        let z = rng.gaussian(&[5, 2]);
        for k in [1, 25, 50] {
            let m = d.exact_posterior_mean(&z, k).unwrap();
            for i in 0..5 {
                assert_eq!(m.row_slice(i), &[0.4, 2.0]);
            }
            let e = d.exact_eps(&z, k).unwrap();
            let (a, sg) = (s.alpha(k), s.sigma(k));
            assert!((e[(0, 0)] - (z[(0, 0)] - a * 0.4) / sg).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_posterior_limit() {
        let sched: NoiseSchedule = serde_json::from_value(serde_json::json!({
            "kind": "cosine", "alpha": [1.0, 0.5], "sigma": [0.0, 1e4],
        }))
        .unwrap();
        let d = EmpiricalDenoiser::new(Tensor::from_rows(&[[-1.0, 1.0], [1.0, 3.0], [2.0, 2.0]]).unwrap(), sched).unwrap();
        let m = d.exact_posterior_mean(&Tensor::row(&[5.0, -3.0]), 1).unwrap();
        assert!((m.data()[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((m.data()[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn small_sigma_does_not_underflow() {
        let d = two_point();
        let m = d.exact_posterior_mean(&Tensor::row(&[30.0, 30.0]), 1).unwrap();
        assert!(m.is_finite());
        assert_eq!(m.data(), &[1.0, 3.0]);
    }

    #[test]
    fn swap_under_linearity() {
        let d = two_point();
        let mut rng = SeededRng::new(1, 0);
        for k in [1, 10, 50, 100] {
            let z = rng.gaussian(&[1, 2]);
            let m = d.exact_posterior_mean(&z, k).unwrap();
            let direct = d.posterior_weight_mean(z.row_slice(0), k).unwrap();
            assert!((m.data()[1] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let data = Tensor::from_rows(&[[-1.0, 0.5, 1.0], [1.0, -0.3, 3.0], [0.2, 1.1, 0.5]]).unwrap();
        for lik in [true, false] {
            let d = EmpiricalDenoiser::new(data.clone(), s.clone()).unwrap().with_weight_in_likelihood(lik);
            vjp_check(&d);
        }
    }

    fn vjp_check(d: &EmpiricalDenoiser) {
        let mut rng = SeededRng::new(2, 0);
        for k in [5, 50, 100] {
            let z = rng.gaussian(&[2, 3]);
            let c = rng.gaussian(&[2, 3]);
            let (_, g) = d.predict_eps_vjp(&z, k, &Cond::None, &c).unwrap();
            let h = 1e-6;
            let dot = |t: &Tensor| t.data().iter().zip(c.data()).map(|(a, b)| a * b).sum::<f64>();
            for i in 0..z.len() {
                let mut p = z.clone();
                p.data_mut()[i] += h;
                let mut q = z.clone();
                q.data_mut()[i] -= h;
                let fd = (dot(&d.exact_eps(&p, k).unwrap()) - dot(&d.exact_eps(&q, k).unwrap())) / (2.0 * h);
                assert!((fd - g.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()), "k={k} i={i}: {fd} vs {}", g.data()[i]);
            }
        }
    }

    #[test]
    fn rejects_non_positive_weights_and_conditioning() {
        let s = NoiseSchedule::cosine(10).unwrap();
        let err = EmpiricalDenoiser::new(Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap(), s).unwrap_err();
        assert!(matches!(err, Error::NonPositiveWeights { ref indices } if indices == &[1]));
        let d = two_point();
        assert!(d.predict_eps(&Tensor::row(&[0.0, 0.0]), 1, &Cond::beta(1.0)).is_err());
        assert!(d.predict_eps(&Tensor::row(&[0.0, 0.0]), 0, &Cond::None).is_err());
    }

    #[test]
    fn grid_constant_weight_has_zero_score() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let q0 = |a: &[f64]| (-0.5 * a[0] * a[0] / 0.25).exp();
        let w = |_: &[f64]| 2.0;
        let g = GridOracle::default();
        let out = g
            .intractable_score(&GridSource::Density { q0: &q0, w: &w }, &s, &[0.3, 1.0], 50)
            .unwrap();
        assert!(out.score.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-6);
        assert!((out.expected_w - 2.0).abs() < 1e-9);
    }

    #[test]
    fn grid_matches_gaussian_closed_form() {
        // q = N(0, s²), w = exp(c a): ∂/∂z log E[w | z] = c α s² / (α² s² + σ²)
        let sched = NoiseSchedule::cosine(100).unwrap();
        let (sd, c) = (0.5, 1.0);
        let q0 = move |a: &[f64]| (-0.5 * a[0] * a[0] / (sd * sd)).exp();
        let w = move |a: &[f64]| (c * a[0]).exp();
        let g = GridOracle {
            weight_in_likelihood: false,
            ..GridOracle::default()
        };
        for k in [1, 10, 50, 100] {
            let (a, s) = (sched.alpha(k), sched.sigma(k));
            let want = c * a * sd * sd / (a * a * sd * sd + s * s);
            let out = g
                .intractable_score(&GridSource::Density { q0: &q0, w: &w }, &sched, &[0.2, 0.0], k)
                .unwrap();
            assert!((out.score[0] - want).abs() < 1e-4 * want.abs().max(1.0), "k={k}: {} vs {want}", out.score[0]);
            assert_eq!(out.score[1], 0.0);
        }
    }

    #[test]
    fn grid_rejects_off_node_points() {
        let s = NoiseSchedule::cosine(10).unwrap();
        let pts = vec![(vec![0.01, 1.0], 1.0)];
        let err = GridOracle::default()
            .intractable_score(&GridSource::PointMasses(&pts), &s, &[0.0, 1.0], 5)
            .unwrap_err();
        assert!(matches!(err, Error::GridTooCoarse(_)));
    }

    #[test]
    fn grid_too_coarse_is_reported() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let q0 = |a: &[f64]| (-0.5 * (a[0] - 0.3).powi(2) / 0.04).exp();
        let w = |a: &[f64]| (5.0 * a[0]).exp();
        let g = GridOracle {
            nodes: 5,
            max_nodes: 17,
            weight_in_likelihood: false,
            ..GridOracle::default()
        };
        let err = g
            .intractable_score(&GridSource::Density { q0: &q0, w: &w }, &s, &[0.0, 1.0], 50)
            .unwrap_err();
        assert!(matches!(err, Error::GridTooCoarse(_)));
    }

    #[test]
    fn resampling_frequencies() {
        let pool = vec![vec![0.0], vec![1.0]];
        let mut rng = SeededRng::new(3, 0);
        let out = importance_resample_target(&pool, &[1.0, 3.0], 2, &mut rng).unwrap();
        assert_eq!(out.len(), 2);
        let big: Vec<Vec<f64>> = (0..10_000).map(|i| vec![(i % 2) as f64]).collect();
        let w: Vec<f64> = (0..10_000).map(|i| if i % 2 == 0 { 1.0 } else { 3.0 }).collect();
        let out = importance_resample_target(&big, &w, 10_000, &mut rng).unwrap();
        let f1 = out.iter().filter(|v| v[0] == 1.0).count() as f64 / 1e4;
        assert!((f1 - 0.75).abs() < 0.02, "{f1}");
        assert!(importance_resample_target(&pool, &[0.0, 0.0], 1, &mut rng).is_err());
        assert!(importance_resample_target(&pool, &[1.0, 1.0], 3, &mut rng).is_err());
    }

    #[test]
    fn uniform_weights_resample_uniformly() {
        let pool: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        let mut rng = SeededRng::new(4, 0);
        let mut counts = [0usize; 4];
        for _ in 0..2000 {
            let v = importance_resample_target(&pool, &[1.0; 4], 4, &mut rng).unwrap();
            for x in v {
                counts[x[0] as usize] += 1;
            }
        }
        for c in counts {
            assert!((c as f64 / 8000.0 - 0.25).abs() < 0.015);
        }
    }
}
