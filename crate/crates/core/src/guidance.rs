//! Self-weighted guidance: the guidance term is read off the model's own
//! prediction of the weight coordinate.

use std::path::Path;
use std::time::Instant;

use rand::distributions::WeightedIndex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Cond, EpsModel, Normalizer};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::schedule::SamplerKind;
use crate::tensor::Tensor;

/// Chains advanced together through one network call.
pub const CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_clamp")]
    pub clamp_eps: f64,
    #[serde(default)]
    pub sampler: SamplerKind,
    /// Optional per-coordinate box for `ẑ0` before each reverse step.
    #[serde(default)]
    pub clip: Option<ClipBox>,
    /// Guide only at `k ≤ max_step`; unset guides every step.
    #[serde(default)]
    pub max_step: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

fn default_rho() -> f64 {
    1.0
}

fn default_clamp() -> f64 {
    1e-6
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            clamp_eps: 1e-6,
            sampler: SamplerKind::Ddpm,
            clip: None,
            max_step: None,
        }
    }
}

impl GuidanceConfig {
    pub fn guides_at(&self, k: usize) -> bool {
        self.rho != 0.0 && self.max_step.is_none_or(|m| k <= m)
    }

    pub fn with_rho(rho: f64) -> Self {
        Self {
            rho,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::Invalid(format!("guidance scale {} must be ≥ 0", self.rho)));
        }
        if !(self.clamp_eps > 0.0) {
            return Err(Error::Invalid(format!("clamp_eps {} must be > 0", self.clamp_eps)));
        }
        if let Some(c) = &self.clip {
            if c.lo.len() != c.hi.len() || c.lo.iter().zip(&c.hi).any(|(l, h)| !(l <= h)) {
                return Err(Error::Invalid("clip box needs lo ≤ hi per coordinate".into()));
            }
        }
        Ok(())
    }
}

/// Last coordinate of an augmented vector.
pub fn extract_w(z: &[f64]) -> Result<f64> {
    if z.len() < 2 {
        return Err(Error::Invalid(format!("extract_w needs width ≥ 2, got {}", z.len())));
    }
    Ok(z[z.len() - 1])
}

/// Per-row guidance: `∇_{z_k} log max(ŵ0, clamp)`.
#[derive(Clone, Debug)]
pub struct GuidanceTerms {
    pub eps: Tensor,
    pub grad: Tensor,
    pub w_hat: Vec<f64>,
    pub clamped: Vec<bool>,
}

/// `ŵ0 = φ_w((z_k − σ_k ε_θ)/α_k)` and its log-gradient for every row,
/// through one VJP of the model. Clamped rows get a zero gradient.
pub fn guidance_terms<M: EpsModel + ?Sized>(model: &M, zk: &Tensor, k: usize, cond: &Cond, clamp_eps: f64) -> Result<GuidanceTerms> {
    let sched = model.schedule();
    if k == 0 || k > sched.steps() {
        return Err(Error::Invalid(format!("guidance step {k} outside 1..={}", sched.steps())));
    }
    let a = sched.alpha_guarded(k)?;
    let s = sched.sigma(k);
    let w = model.width();
    if w < 2 || zk.cols() != w {
        return Err(Error::Shape {
            op: "self_guidance_grad".into(),
            detail: format!("z_k has {} columns, model width {w}", zk.cols()),
        });
    }
    let n = zk.rows();
    let mut cot = Tensor::zeros(&[n, w]);
    for i in 0..n {
        cot[(i, w - 1)] = 1.0;
    }
    let (eps, jw) = model.predict_eps_vjp(zk, k, cond, &cot)?;
    let mut grad = Tensor::zeros(&[n, w]);
    let mut w_hat = Vec::with_capacity(n);
    let mut clamped = Vec::with_capacity(n);
    for i in 0..n {
        let wh = (zk[(i, w - 1)] - s * eps[(i, w - 1)]) / a;
        w_hat.push(wh);
        let hit = !(wh >= clamp_eps);
        clamped.push(hit);
        if hit {
            continue;
        }
        let row = grad.row_slice_mut(i);
        for (j, (g, jv)) in row.iter_mut().zip(jw.row_slice(i)).enumerate() {
            let e = if j == w - 1 { 1.0 } else { 0.0 };
            *g = (e - s * jv) / (a * wh);
        }
    }
    Ok(GuidanceTerms {
        eps,
        grad,
        w_hat,
        clamped,
    })
}

/// `∇_{z_k} log max(φ_w(ẑ0), clamp_eps)` for every row of `zk`.
pub fn self_guidance_grad<M: EpsModel + ?Sized>(model: &M, zk: &Tensor, k: usize, cond: &Cond, clamp_eps: f64) -> Result<Tensor> {
    let t = guidance_terms(model, zk, k, cond, clamp_eps)?;
    for i in 0..zk.rows() {
        if t.grad.row_slice(i).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGuidance { k, w_hat: t.w_hat[i] });
        }
    }
    Ok(t.grad)
}

/// `ε̂ = ε_θ − ρ σ_k ∇ log φ_w(ẑ0)`; with `ρ = 0` this is `ε_θ` exactly.
pub fn guided_eps<M: EpsModel + ?Sized>(model: &M, zk: &Tensor, k: usize, cond: &Cond, g: &GuidanceConfig) -> Result<Tensor> {
    g.validate()?;
    if !g.guides_at(k) {
        return model.predict_eps(zk, k, cond);
    }
    let t = guidance_terms(model, zk, k, cond, g.clamp_eps)?;
    let s = model.schedule().sigma(k);
    let mut out = t.eps;
    for i in 0..zk.rows() {
        if t.grad.row_slice(i).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGuidance { k, w_hat: t.w_hat[i] });
        }
    }
    out.axpy(-g.rho * s, &t.grad)?;
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SamplerOutput {
    /// One row `[a, ŵ]` per chain, de-normalized when a normalizer was given.
    /// Rows of diverged chains are NaN.
    pub samples: Tensor,
    pub clamp_hits: Vec<u32>,
    pub diverged: Vec<usize>,
    pub steps: usize,
    pub wall_time_s: f64,
}

impl SamplerOutput {
    /// Fraction of (chain, step) pairs where `ŵ0` hit the clamp floor.
    pub fn clamp_rate(&self) -> f64 {
        let total = (self.clamp_hits.len() * self.steps).max(1) as f64;
        self.clamp_hits.iter().map(|&c| c as f64).sum::<f64>() / total
    }

    /// Finite rows only.
    pub fn finite_rows(&self) -> Vec<Vec<f64>> {
        self.samples
            .to_rows()
            .into_iter()
            .filter(|r| r.iter().all(|v| v.is_finite()))
            .collect()
    }

    /// `chain_id, a_1..a_d, w_hat, clamp_hits`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let d = self.samples.cols() - 1;
        let mut header = vec!["chain_id".to_string()];
        header.extend((1..=d).map(|j| format!("a_{j}")));
        header.push("w_hat".into());
        header.push("clamp_hits".into());
        w.write_record(&header)?;
        for i in 0..self.samples.rows() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.samples.row_slice(i).iter().map(|v| v.to_string()));
            rec.push(self.clamp_hits[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// State of one chunk of chains.
struct Chunk {
    ids: Vec<usize>,
    rngs: Vec<SeededRng>,
    z: Tensor,
    alive: Vec<bool>,
    hits: Vec<u32>,
}

fn start_chunk(ids: Vec<usize>, base: &SeededRng, w: usize) -> Chunk {
    let mut rngs: Vec<SeededRng> = ids.iter().map(|&c| base.derive(c as u64)).collect();
    let mut z = Tensor::zeros(&[ids.len(), w]);
    for (i, r) in rngs.iter_mut().enumerate() {
        r.fill_normal(z.row_slice_mut(i));
    }
    let n = ids.len();
    Chunk {
        ids,
        rngs,
        z,
        alive: vec![true; n],
        hits: vec![0; n],
    }
}

/// Algorithm 2 for `n` chains. Chain `c` draws all of its noise from
/// `rng.derive(c)`, so results do not depend on chunking or thread count.
pub fn sample<M: EpsModel + ?Sized>(
    model: &M,
    n: usize,
    cond: &Cond,
    g: &GuidanceConfig,
    rng: &SeededRng,
    normalizer: Option<&Normalizer>,
) -> Result<SamplerOutput> {
    g.validate()?;
    let ids: Vec<usize> = (0..n).collect();
    run_chains(model, &ids, cond, g, rng, normalizer)
}

fn run_chains<M: EpsModel + ?Sized>(
    model: &M,
    ids: &[usize],
    cond: &Cond,
    g: &GuidanceConfig,
    rng: &SeededRng,
    normalizer: Option<&Normalizer>,
) -> Result<SamplerOutput> {
    let t0 = Instant::now();
    let w = model.width();
    if let Some(c) = &g.clip {
        if c.lo.len() != w {
            return Err(Error::Invalid(format!("clip box has {} coordinates, model width {w}", c.lo.len())));
        }
    }
    if let Cond::Beta(b) = cond {
        if b.len() != 1 && b.len() != ids.len() {
            return Err(Error::Conditioning(format!("{} β values for {} chains", b.len(), ids.len())));
        }
    }
    let steps = model.schedule().steps();
    let chunks: Vec<(usize, Vec<usize>)> = ids
        .chunks(CHUNK)
        .enumerate()
        .map(|(j, c)| (j * CHUNK, c.to_vec()))
        .collect();
    let done: Vec<Result<Chunk>> = chunks
        .into_par_iter()
        .map(|(offset, ids)| {
            let mut ch = start_chunk(ids, rng, w);
            let idx: Vec<usize> = (offset..offset + ch.ids.len()).collect();
            let ccond = cond.gather(&idx);
            for k in (1..=steps).rev() {
                step_chunk(model, &mut ch, k, &ccond, g)?;
            }
            Ok(ch)
        })
        .collect();
    let mut samples = Tensor::zeros(&[ids.len(), w]);
    let mut clamp_hits = vec![0; ids.len()];
    let mut diverged = Vec::new();
    let mut row = 0;
    for ch in done {
        let ch = ch?;
        for i in 0..ch.ids.len() {
            let out = samples.row_slice_mut(row);
            if ch.alive[i] {
                let z = ch.z.row_slice(i);
                match normalizer {
                    Some(nz) => out.copy_from_slice(&nz.denormalize(z, cond.beta_at(row))),
                    None => out.copy_from_slice(z),
                }
            } else {
                out.fill(f64::NAN);
                diverged.push(ch.ids[i]);
            }
            clamp_hits[row] = ch.hits[i];
            row += 1;
        }
    }
    Ok(SamplerOutput {
        samples,
        clamp_hits,
        diverged,
        steps,
        wall_time_s: t0.elapsed().as_secs_f64(),
    })
}

fn step_chunk<M: EpsModel + ?Sized>(model: &M, ch: &mut Chunk, k: usize, cond: &Cond, g: &GuidanceConfig) -> Result<()> {
    let sched = model.schedule();
    let (a, s) = (sched.alpha_guarded(k)?, sched.sigma(k));
    let (cz, c0, var) = sched.posterior_coefficients(k, g.sampler)?;
    let sd = var.sqrt();
    let w = model.width();

    let eps = if !g.guides_at(k) {
        model.predict_eps(&ch.z, k, cond)?
    } else {
        let t = guidance_terms(model, &ch.z, k, cond, g.clamp_eps)?;
        let mut eps = t.eps;
        for i in 0..ch.ids.len() {
            if t.clamped[i] && ch.alive[i] {
                ch.hits[i] += 1;
            }
            let gi = t.grad.row_slice(i);
            if gi.iter().any(|v| !v.is_finite()) {
                ch.alive[i] = false;
                continue;
            }
            for (e, gv) in eps.row_slice_mut(i).iter_mut().zip(gi) {
                *e -= g.rho * s * gv;
            }
        }
        eps
    };

    let mut noise = vec![0.0; w];
    for i in 0..ch.ids.len() {
        if !ch.alive[i] {
            continue;
        }
        let zr = ch.z.row_slice_mut(i);
        let er = eps.row_slice(i);
        for (j, (zv, ev)) in zr.iter_mut().zip(er).enumerate() {
            let mut x0 = (*zv - s * ev) / a;
            if let Some(c) = &g.clip {
                x0 = x0.clamp(c.lo[j], c.hi[j]);
            }
            *zv = cz * *zv + c0 * x0;
        }
        if var > 0.0 {
            ch.rngs[i].fill_normal(&mut noise);
            for (zv, nv) in zr.iter_mut().zip(&noise) {
                *zv += sd * nv;
            }
        }
        if zr.iter().any(|v| !v.is_finite()) {
            ch.alive[i] = false;
        }
    }
    Ok(())
}

/// Plain ancestral sampling of the model without any guidance machinery.
/// Uses the same per-chain streams and chunking as [`sample`].
pub fn ancestral_sample<M: EpsModel + ?Sized>(model: &M, n: usize, cond: &Cond, sampler: SamplerKind, rng: &SeededRng) -> Result<Tensor> {
    let w = model.width();
    let sched = model.schedule();
    let mut out = Tensor::zeros(&[n, w]);
    let ids: Vec<usize> = (0..n).collect();
    for (j, chunk) in ids.chunks(CHUNK).enumerate() {
        let mut rngs: Vec<SeededRng> = chunk.iter().map(|&c| rng.derive(c as u64)).collect();
        let mut z = Tensor::zeros(&[chunk.len(), w]);
        for (i, r) in rngs.iter_mut().enumerate() {
            r.fill_normal(z.row_slice_mut(i));
        }
        let idx: Vec<usize> = (j * CHUNK..j * CHUNK + chunk.len()).collect();
        let ccond = cond.gather(&idx);
        for k in (1..=sched.steps()).rev() {
            let eps = model.predict_eps(&z, k, &ccond)?;
            let x0 = sched.data_prediction(&z, &eps, k)?;
            let mut next = Tensor::zeros(&[chunk.len(), w]);
            for i in 0..chunk.len() {
                let zi = Tensor::row(z.row_slice(i));
                let xi = Tensor::row(x0.row_slice(i));
                let step = sched.posterior_step(&zi, &xi, k, sampler, &mut rngs[i])?;
                next.row_slice_mut(i).copy_from_slice(step.data());
            }
            z = next;
        }
        for i in 0..chunk.len() {
            out.row_slice_mut(j * CHUNK + i).copy_from_slice(z.row_slice(i));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Highest weight; ties go to the lowest candidate index.
    #[default]
    Argmax,
    /// Categorical draw with probabilities proportional to weight.
    Categorical,
}

/// Outcome of SWG-R for one conditioning value.
#[derive(Clone, Debug)]
pub struct Resampled {
    pub action: Vec<f64>,
    pub index: usize,
    pub weights: Vec<f64>,
    pub candidates: SamplerOutput,
}

/// Draws `m` guided candidates and keeps the one the external weight
/// function rates highest. `weight_fn` sees data-space actions (without the
/// `ŵ` column); diverged candidates are never selected.
#[allow(clippy::too_many_arguments)]
pub fn sample_swg_r<M: EpsModel + ?Sized>(
    model: &M,
    weight_fn: &dyn Fn(&[f64]) -> f64,
    m: usize,
    cond: &Cond,
    g: &GuidanceConfig,
    selection: Selection,
    rng: &SeededRng,
    normalizer: Option<&Normalizer>,
) -> Result<Resampled> {
    if m == 0 {
        return Err(Error::Invalid("SWG-R needs M ≥ 1 candidates".into()));
    }
    let out = sample(model, m, cond, g, rng, normalizer)?;
    let d = out.samples.cols() - 1;
    let weights: Vec<f64> = (0..m)
        .map(|i| {
            let row = out.samples.row_slice(i);
            if row.iter().all(|v| v.is_finite()) {
                weight_fn(&row[..d])
            } else {
                f64::NAN
            }
        })
        .collect();
    let usable: Vec<f64> = weights.iter().map(|&v| if v.is_finite() && v >= 0.0 { v } else { 0.0 }).collect();
    let index = match selection {
        Selection::Argmax => {
            let mut best: Option<usize> = None;
            for (i, &v) in weights.iter().enumerate() {
                if v.is_finite() && best.is_none_or(|b| v > weights[b]) {
                    best = Some(i);
                }
            }
            best.ok_or(Error::ChainDiverged { chain: 0, k: 0 })?
        }
        Selection::Categorical => {
            let dist = WeightedIndex::new(&usable)
                .map_err(|e| Error::Invalid(format!("candidate weights unusable: {e}")))?;
            rng.derive(u64::MAX).sample(&dist)
        }
    };
    Ok(Resampled {
        action: out.samples.row_slice(index)[..d].to_vec(),
        index,
        weights,
        candidates: out,
    })
}
