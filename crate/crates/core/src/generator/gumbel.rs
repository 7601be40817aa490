//! Gumbel-max sampling, its softmax relaxation, and the temperature schedule.

use rand::Rng;

use crate::error::{contract_err, Result};
use crate::tensor::{Tensor, Var};

/// Tolerance on `Σπ = 1` for [`gumbel_sample_hard`].
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// One standard Gumbel draw, `−log(−log u)` with `u ∈ (0, 1)`.
pub fn gumbel_noise(rng: &mut impl Rng) -> f64 {
    let u: f64 = loop {
        let u = rng.random::<f64>();
        if u > 0.0 {
            break u;
        }
    };
    -(-u.ln()).ln()
}

/// Index of `argmax_i (g_i + log π_i)`. Zero entries never win.
pub fn gumbel_argmax(log_probs: &[f64], noise: &[f64]) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, (&lp, &g)) in log_probs.iter().zip(noise).enumerate() {
        let v = lp + g;
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Draws a category from `π` via the Gumbel-max trick.
pub fn gumbel_sample_index(pi: &[f64], rng: &mut impl Rng) -> Result<usize> {
    if pi.is_empty() {
        return contract_err("empty probability vector");
    }
    if pi.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return contract_err("probabilities must be finite and non-negative");
    }
    let total: f64 = pi.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return contract_err(format!("probabilities sum to {total}, not 1"));
    }
    let log_pi: Vec<f64> = pi.iter().map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY }).collect();
    let noise: Vec<f64> = (0..pi.len()).map(|_| gumbel_noise(rng)).collect();
    Ok(gumbel_argmax(&log_pi, &noise))
}

/// One-hot vector of a Gumbel-max draw from `π`.
pub fn gumbel_sample_hard(pi: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
    let i = gumbel_sample_index(pi, rng)?;
    let mut out = vec![0.0; pi.len()];
    out[i] = 1.0;
    Ok(out)
}

/// `softmax((log_softmax(logits) + g) / τ)` row-wise, for `[N×V]` logits and
/// fixed noise of the same shape.
pub fn gumbel_softmax<'t>(logits: Var<'t>, noise: &Tensor, tau: f64) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return contract_err(format!("temperature must be positive, got {tau}"));
    }
    let g = logits.tape().constant(noise.clone());
    logits.log_softmax(1)?.add(g)?.scale(1.0 / tau)?.softmax(1)
}

/// Relaxed sample of a single row of logits with fresh noise.
pub fn gumbel_sample_soft<'t>(logits: Var<'t>, tau: f64, rng: &mut impl Rng) -> Result<Var<'t>> {
    let shape = logits.shape();
    let noise = Tensor::new(shape.clone(), (0..shape.iter().product()).map(|_| gumbel_noise(rng)).collect())?;
    let row = if shape.len() == 1 { logits.reshape(&[1, shape[0]])? } else { logits };
    let y = gumbel_softmax(row, &noise.reshaped(row.shape())?, tau)?;
    y.reshape(&shape)
}

/// `τ = τ_min^(n/N)`, equivalently `1/τ = (1/τ_min)^(n/N)`.
pub fn schedule_tau(n: u64, total: u64, tau_min: f64) -> f64 {
    if total == 0 {
        return tau_min;
    }
    let frac = n.min(total) as f64 / total as f64;
    tau_min.powf(frac)
}
