/// Width of the sinusoidal embeddings.
pub const EMBED_DIM: usize = 64;
const HALF: usize = EMBED_DIM / 2;
const MAX_FREQ: f64 = 32.0;
/// β values are scaled by this before embedding, so the trained range maps to
/// `[0, 1]` like `k/K`.
pub const BETA_RANGE: f64 = 20.0;

/// `[sin(ω_i x)…, cos(ω_i x)…]` with `ω_i = 32^{i/31}`, `i < 32`.
pub fn sinusoidal(x: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), EMBED_DIM);
    for i in 0..HALF {
        let w = MAX_FREQ.powf(i as f64 / (HALF - 1) as f64);
        out[i] = (w * x).sin();
        out[HALF + i] = (w * x).cos();
    }
}

pub fn time_embed(k: usize, steps: usize) -> Vec<f64> {
    let mut v = vec![0.0; EMBED_DIM];
    sinusoidal(k as f64 / steps as f64, &mut v);
    v
}

pub fn beta_embed(beta: f64) -> Vec<f64> {
    let mut v = vec![0.0; EMBED_DIM];
    sinusoidal(beta / BETA_RANGE, &mut v);
    v
}
