//! Argmax over Gumbel-perturbed logits with a per-scale noise level.

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Noise level per scale falling linearly from 1 at the first scale to 0 at
/// the last.
pub fn linear_sigmas(scales: usize) -> Vec<f32> {
    if scales <= 1 {
        return vec![1.0; scales];
    }
    (0..scales)
        .map(|s| 1.0 - s as f32 / (scales - 1) as f32)
        .collect()
}

pub fn check_sigmas(sigmas: &[f32], scales: usize) -> Result<()> {
    if sigmas.len() < scales {
        return Err(Error::Sampler(format!(
            "{} noise levels for {scales} scales",
            sigmas.len()
        )));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::Sampler(format!("noise level {s} is negative")));
    }
    Ok(())
}

pub fn gumbel(rng: &mut Rng) -> f64 {
    // Inverse CDF on (0, 1); 1 - u avoids ln(0).
    let u = 1.0 - rng::uniform_f64(rng);
    -(-u.ln()).ln()
}

/// One token per row of `logits` (`n × V`, row-major).
pub fn gumbel_tokens(logits: &[f32], vocab: usize, sigma: f32, rng: &mut Rng) -> Result<Vec<u32>> {
    if !(sigma >= 0.0) {
        return Err(Error::Sampler(format!("noise level {sigma} is negative")));
    }
    Ok(logits
        .chunks(vocab)
        .map(|row| {
            let mut best = (f64::NEG_INFINITY, 0);
            for (k, &z) in row.iter().enumerate() {
                let v = if sigma > 0.0 {
                    z as f64 + sigma as f64 * gumbel(rng)
                } else {
                    z as f64
                };
                if v > best.0 {
                    best = (v, k);
                }
            }
            best.1 as u32
        })
        .collect())
}
