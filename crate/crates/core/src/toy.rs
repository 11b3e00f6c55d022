//! Synthetic data: 2-D toy distributions with energy-based weights, and a
//! one-step contextual bandit for critic training.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Every generated point is clamped into `[-BOX, BOX]²`.
pub const BOX: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    Spiral,
    EightGaussians,
    SwissRoll,
    Rings,
    Moons,
    Checkerboard,
}

impl ToyKind {
    pub const ALL: [ToyKind; 6] = [
        ToyKind::Spiral,
        ToyKind::EightGaussians,
        ToyKind::SwissRoll,
        ToyKind::Rings,
        ToyKind::Moons,
        ToyKind::Checkerboard,
    ];

    pub fn default_noise(self) -> f64 {
        match self {
            ToyKind::Spiral => 0.1,
            ToyKind::EightGaussians => 0.15,
            ToyKind::SwissRoll => 0.1,
            ToyKind::Rings => 0.08,
            ToyKind::Moons => 0.1,
            ToyKind::Checkerboard => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDistribution {
    pub kind: ToyKind,
    /// Isotropic Gaussian noise added to the clean generator (standard
    /// deviation of each mixture component for `eight_gaussians`).
    pub noise: f64,
}

impl ToyDistribution {
    pub fn new(kind: ToyKind) -> Self {
        Self {
            kind,
            noise: kind.default_noise(),
        }
    }
}

const SPIRAL_TURNS: f64 = 3.0 * PI;
const SPIRAL_RADIUS: f64 = 3.5;

/// Radius of the clean spiral at angle `θ`: `r = 3.5 θ / 3π`.
pub fn spiral_radius(theta: f64) -> f64 {
    SPIRAL_RADIUS * theta / SPIRAL_TURNS
}

pub fn eight_gaussian_means() -> Vec<[f64; 2]> {
    (0..8)
        .map(|i| {
            let t = i as f64 * PI / 4.0;
            [2.0 * t.cos(), 2.0 * t.sin()]
        })
        .collect()
}

const RING_RADII: [f64; 4] = [0.75, 1.5, 2.25, 3.0];

fn clean_point(kind: ToyKind, rng: &mut SeededRng) -> [f64; 2] {
    match kind {
        ToyKind::Spiral => {
            let t = SPIRAL_TURNS * rng.uniform().sqrt();
            let r = spiral_radius(t);
            [r * t.cos(), r * t.sin()]
        }
        ToyKind::EightGaussians => eight_gaussian_means()[rng.index(8)],
        ToyKind::SwissRoll => {
            let t = 1.5 * PI * (1.0 + 2.0 * rng.uniform());
            [t * t.cos() / 5.0, t * t.sin() / 5.0]
        }
        ToyKind::Rings => {
            let r = RING_RADII[rng.index(4)];
            let t = 2.0 * PI * rng.uniform();
            [r * t.cos(), r * t.sin()]
        }
        ToyKind::Moons => moon_point(rng.index(2), PI * rng.uniform()),
        ToyKind::Checkerboard => {
            let x1 = rng.uniform_range(-2.0, 2.0);
            let x2 = rng.uniform() - 2.0 * rng.index(2) as f64 + (x1.floor() as i64).rem_euclid(2) as f64;
            [2.0 * x1, 2.0 * x2]
        }
    }
}

fn moon_point(which: usize, t: f64) -> [f64; 2] {
    let (x, y) = if which == 0 {
        (t.cos(), t.sin())
    } else {
        (1.0 - t.cos(), 0.5 - t.sin())
    };
    [2.0 * (x - 0.5), 2.0 * (y - 0.25)]
}

/// `n` i.i.d. draws, clamped into the box.
pub fn sample_toy(dist: &ToyDistribution, n: usize, rng: &mut SeededRng) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::Invalid("sample_toy needs n ≥ 1".into()));
    }
    if !(dist.noise >= 0.0 && dist.noise.is_finite()) {
        return Err(Error::Invalid(format!("noise {} must be ≥ 0", dist.noise)));
    }
    Ok((0..n)
        .map(|_| {
            let p = clean_point(dist.kind, rng);
            let (e1, e2) = rng.normal_pair();
            vec![
                (p[0] + dist.noise * e1).clamp(-BOX, BOX),
                (p[1] + dist.noise * e2).clamp(-BOX, BOX),
            ]
        })
        .collect())
}

/// Points tracing the noise-free support of a distribution, used as its mode
/// set. Curves are densely discretized.
pub fn mode_set(kind: ToyKind) -> Vec<[f64; 2]> {
    const M: usize = 2000;
    let grid = |lo: f64, hi: f64| (0..M).map(move |i| lo + (hi - lo) * i as f64 / (M - 1) as f64);
    match kind {
        ToyKind::Spiral => grid(0.0, SPIRAL_TURNS)
            .map(|t| {
                let r = spiral_radius(t);
                [r * t.cos(), r * t.sin()]
            })
            .collect(),
        ToyKind::EightGaussians => eight_gaussian_means(),
        ToyKind::SwissRoll => grid(1.5 * PI, 4.5 * PI).map(|t| [t * t.cos() / 5.0, t * t.sin() / 5.0]).collect(),
        ToyKind::Rings => RING_RADII
            .iter()
            .flat_map(|&r| grid(0.0, 2.0 * PI).map(move |t| [r * t.cos(), r * t.sin()]))
            .collect(),
        ToyKind::Moons => (0..2).flat_map(|w| grid(0.0, PI).map(move |t| moon_point(w, t))).collect(),
        ToyKind::Checkerboard => {
            let mut c = Vec::new();
            for i in -2..2i64 {
                for j in -2..2i64 {
                    if (i + j).rem_euclid(2) == 0 {
                        c.push([2.0 * (i as f64 + 0.5), 2.0 * (j as f64 + 0.5)]);
                    }
                }
            }
            c
        }
    }
}

fn nearest_sq(a: &[f64], set: &[[f64; 2]]) -> f64 {
    set.iter()
        .map(|m| (a[0] - m[0]).powi(2) + (a[1] - m[1]).powi(2))
        .fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Energy {
    /// `‖a‖²`
    SquaredNorm,
    /// Squared distance to the nearest point of the distribution's mode set.
    ModeDistance { toy: ToyKind },
    /// `(4 − a₁)/8`, a linear ramp across the box in `[0, 1]`.
    Tilt,
}

impl Energy {
    pub fn eval(&self, a: &[f64]) -> f64 {
        match self {
            Energy::SquaredNorm => a.iter().map(|v| v * v).sum(),
            Energy::ModeDistance { toy } => nearest_sq(a, &mode_set(*toy)),
            Energy::Tilt => (BOX - a[0]) / (2.0 * BOX),
        }
    }

    /// Evaluates many points against one mode set.
    pub fn eval_many(&self, pts: &[Vec<f64>]) -> Vec<f64> {
        match self {
            Energy::ModeDistance { toy } => {
                let set = mode_set(*toy);
                pts.iter().map(|a| nearest_sq(a, &set)).collect()
            }
            e => pts.iter().map(|a| e.eval(a)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergySpec {
    pub energy: Energy,
    pub beta: f64,
}

/// `w(a) = exp(−β ξ(a))`
pub fn weight_from_energy(a: &[f64], spec: &EnergySpec) -> f64 {
    (-spec.beta * spec.energy.eval(a)).exp()
}

/// Index of the nearest mode for every point.
pub fn nearest_mode(points: &[Vec<f64>], modes: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for (j, m) in modes.iter().enumerate() {
                let d: f64 = p.iter().zip(m).map(|(x, y)| (x - y).powi(2)).sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect()
}

/// `c(β) = mean_i exp(−β ξ_i)` on `grid`, for per-β weight normalization of
/// a β-conditioned dataset.
pub fn per_beta_scales(xis: &[f64], grid: &[f64]) -> Vec<f64> {
    let n = xis.len() as f64;
    grid.iter()
        .map(|&b| xis.iter().map(|x| (-b * x).exp()).sum::<f64>() / n)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanditConfig {
    pub n: usize,
    /// Standard deviation of the behavior policy around `a = s`.
    pub noise: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

pub fn bandit_reward(s: &[f64], a: &[f64]) -> f64 {
    -s.iter().zip(a).map(|(x, y)| (y - x).powi(2)).sum::<f64>()
}

/// `s ~ U[−1,1]²`, `a = s + N(0, noise²)`, `r = −‖a − s‖²`, terminal.
pub fn make_bandit_dataset(cfg: &BanditConfig) -> Result<Vec<Transition>> {
    if cfg.n == 0 {
        return Err(Error::Invalid("bandit dataset needs n ≥ 1".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Invalid(format!("behavior noise {} must be ≥ 0", cfg.noise)));
    }
    let mut rng = SeededRng::new(cfg.seed, 0);
    Ok((0..cfg.n)
        .map(|_| {
            let s = vec![rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)];
            let (e1, e2) = rng.normal_pair();
            let a = vec![s[0] + cfg.noise * e1, s[1] + cfg.noise * e2];
            Transition {
                r: bandit_reward(&s, &a),
                s_next: s.clone(),
                s,
                a,
                done: true,
            }
        })
        .collect())
}

pub fn write_transitions(path: &Path, ts: &[Transition]) -> Result<()> {
    let first = ts.first().ok_or_else(|| Error::Invalid("no transitions to write".into()))?;
    let (ds, da) = (first.s.len(), first.a.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (1..=ds).map(|j| format!("s_{j}")).collect();
    header.extend((1..=da).map(|j| format!("a_{j}")));
    header.push("r".into());
    header.extend((1..=ds).map(|j| format!("s'_{j}")));
    header.push("done".into());
    w.write_record(&header)?;
    for t in ts {
        let mut rec: Vec<String> = t.s.iter().chain(&t.a).map(|v| v.to_string()).collect();
        rec.push(t.r.to_string());
        rec.extend(t.s_next.iter().map(|v| v.to_string()));
        rec.push(if t.done { "1" } else { "0" }.into());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_transitions(path: &Path) -> Result<Vec<Transition>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let ds = headers.iter().filter(|h| h.starts_with("s_")).count();
    let da = headers.iter().filter(|h| h.starts_with("a_")).count();
    if ds == 0 || da == 0 || headers.len() != 2 * ds + da + 2 {
        return Err(Error::Invalid(format!("unexpected transition columns: {headers:?}")));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let v: Vec<f64> = rec
            .iter()
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Invalid(format!("transition row {}: {e}", line + 1)))?;
        out.push(Transition {
            s: v[..ds].to_vec(),
            a: v[ds..ds + da].to_vec(),
            r: v[ds + da],
            s_next: v[ds + da + 1..2 * ds + da + 1].to_vec(),
            done: v[2 * ds + da + 1] != 0.0,
        });
    }
    if out.is_empty() {
        return Err(Error::Invalid(format!("{} has no transitions", path.display())));
    }
    Ok(out)
}

/// Rows of an action dataset file, with optional weight and β columns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActionTable {
    pub actions: Vec<Vec<f64>>,
    pub weights: Option<Vec<f64>>,
    pub betas: Option<Vec<f64>>,
}

pub fn write_actions(path: &Path, t: &ActionTable) -> Result<()> {
    let d = t.actions.first().map_or(0, |a| a.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (1..=d).map(|j| format!("a_{j}")).collect();
    if t.weights.is_some() {
        header.push("w".into());
    }
    if t.betas.is_some() {
        header.push("beta".into());
    }
    w.write_record(&header)?;
    for (i, a) in t.actions.iter().enumerate() {
        let mut rec: Vec<String> = a.iter().map(|v| v.to_string()).collect();
        if let Some(ws) = &t.weights {
            rec.push(ws[i].to_string());
        }
        if let Some(bs) = &t.betas {
            rec.push(bs[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_actions(path: &Path) -> Result<ActionTable> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let acols: Vec<usize> = headers.iter().enumerate().filter(|(_, h)| h.starts_with("a_")).map(|(i, _)| i).collect();
    let d = acols.len();
    let wcol = headers.iter().position(|h| h == "w");
    let bcol = headers.iter().position(|h| h == "beta");
    if d == 0 {
        return Err(Error::Invalid(format!("no action columns in {}", path.display())));
    }
    let mut t = ActionTable {
        weights: wcol.map(|_| Vec::new()),
        betas: bcol.map(|_| Vec::new()),
        ..Default::default()
    };
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let v: Vec<f64> = rec
            .iter()
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Invalid(format!("dataset row {}: {e}", line + 1)))?;
        t.actions.push(acols.iter().map(|&c| v[c]).collect());
        if let (Some(c), Some(ws)) = (wcol, t.weights.as_mut()) {
            ws.push(v[c]);
        }
        if let (Some(c), Some(bs)) = (bcol, t.betas.as_mut()) {
            bs.push(v[c]);
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_gaussian_modes_are_balanced() {
        let n = 80_000;
        let pts = sample_toy(&ToyDistribution::new(ToyKind::EightGaussians), n, &mut SeededRng::new(0, 0)).unwrap();
        let modes: Vec<Vec<f64>> = eight_gaussian_means().iter().map(|m| m.to_vec()).collect();
        let mut counts = [0usize; 8];
        for j in nearest_mode(&pts, &modes) {
            counts[j] += 1;
        }
        for c in counts {
            assert!((c as f64 - n as f64 / 8.0).abs() <= 0.03 * n as f64 / 8.0, "{counts:?}");
        }
    }

    #[test]
    fn noiseless_spiral_is_on_the_curve() {
        let d = ToyDistribution {
            kind: ToyKind::Spiral,
            noise: 0.0,
        };
        for p in sample_toy(&d, 1000, &mut SeededRng::new(1, 0)).unwrap() {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let t = r * SPIRAL_TURNS / SPIRAL_RADIUS;
            assert!((p[0] - spiral_radius(t) * t.cos()).abs() < 1e-12);
            assert!((p[1] - spiral_radius(t) * t.sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn generators_are_seeded_and_boxed() {
        for kind in ToyKind::ALL {
            let d = ToyDistribution::new(kind);
            let a = sample_toy(&d, 2000, &mut SeededRng::new(7, 0)).unwrap();
            let b = sample_toy(&d, 2000, &mut SeededRng::new(7, 0)).unwrap();
            assert_eq!(a, b);
            assert!(a.iter().flatten().all(|v| v.abs() <= BOX), "{kind:?}");
        }
        assert!(sample_toy(&ToyDistribution::new(ToyKind::Moons), 0, &mut SeededRng::new(0, 0)).is_err());
    }

    #[test]
    fn clean_generators_sit_on_their_mode_sets() {
        let mut rng = SeededRng::new(3, 0);
        for kind in ToyKind::ALL {
            if kind == ToyKind::Checkerboard || kind == ToyKind::EightGaussians {
                continue;
            }
            let set = mode_set(kind);
            for _ in 0..200 {
                let p = clean_point(kind, &mut rng);
                assert!(nearest_sq(&p, &set) < 1e-4, "{kind:?}");
            }
        }
        let set = mode_set(ToyKind::Checkerboard);
        for _ in 0..500 {
            let p = clean_point(ToyKind::Checkerboard, &mut rng);
            assert!(nearest_sq(&p, &set) <= 2.0 + 1e-12);
        }
    }

    #[test]
    fn weight_examples() {
        let sq = |beta| EnergySpec {
            energy: Energy::SquaredNorm,
            beta,
        };
        assert_eq!(weight_from_energy(&[1.3, -2.0], &sq(0.0)), 1.0);
        assert_eq!(weight_from_energy(&[0.0, 0.0], &sq(5.0)), 1.0);
        assert!((weight_from_energy(&[1.0, 0.0], &sq(2.0)) - 0.1353352832366127).abs() < 1e-15);
        let tilt = EnergySpec {
            energy: Energy::Tilt,
            beta: 8.0,
        };
        assert!((weight_from_energy(&[4.0, 0.0], &tilt) - 1.0).abs() < 1e-15);
        assert!((weight_from_energy(&[-4.0, 0.0], &tilt) - (-8.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn weights_positive_on_generated_data() {
        for kind in ToyKind::ALL {
            let pts = sample_toy(&ToyDistribution::new(kind), 500, &mut SeededRng::new(2, 0)).unwrap();
            let spec = EnergySpec {
                energy: Energy::ModeDistance { toy: kind },
                beta: 20.0,
            };
            assert!(pts.iter().all(|a| weight_from_energy(a, &spec) > 0.0));
        }
    }

    #[test]
    fn bandit_examples() {
        let zero = make_bandit_dataset(&BanditConfig {
            n: 100,
            noise: 0.0,
            seed: 0,
        })
        .unwrap();
        assert_eq!(zero.len(), 100);
        assert!(zero.iter().all(|t| t.r == 0.0 && t.done));
        let sb = 0.3;
        let ts = make_bandit_dataset(&BanditConfig {
            n: 200_000,
            noise: sb,
            seed: 1,
        })
        .unwrap();
        let mean = ts.iter().map(|t| t.r).sum::<f64>() / ts.len() as f64;
        // sd of r is 2√2 σ², so the standard error here is about 6e-4
        assert!((mean + 2.0 * sb * sb).abs() < 3e-3, "{mean}");
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ts = make_bandit_dataset(&BanditConfig {
            n: 5,
            noise: 0.2,
            seed: 4,
        })
        .unwrap();
        let p = dir.path().join("t.csv");
        write_transitions(&p, &ts).unwrap();
        assert_eq!(read_transitions(&p).unwrap(), ts);
        let header = std::fs::read_to_string(&p).unwrap();
        assert!(header.starts_with("s_1,s_2,a_1,a_2,r,s'_1,s'_2,done"));

        let t = ActionTable {
            actions: vec![vec![0.5, -1.0], vec![2.0, 3.25]],
            weights: Some(vec![1.0, 0.25]),
            betas: Some(vec![0.0, 8.0]),
        };
        let q = dir.path().join("a.csv");
        write_actions(&q, &t).unwrap();
        assert_eq!(read_actions(&q).unwrap(), t);
    }

    #[test]
    fn per_beta_scales_at_zero_are_one() {
        let s = per_beta_scales(&[0.2, 1.0, 3.0], &[0.0, 1.0]);
        assert_eq!(s[0], 1.0);
        assert!((s[1] - ((-0.2f64).exp() + (-1.0f64).exp() + (-3.0f64).exp()) / 3.0).abs() < 1e-15);
    }
}
