use crate::error::{Error, Result};
use crate::numeric::softmax;
use crate::rng::{self, Rng};

/// Candidate tokens left after top-k then top-p filtering, with their
/// renormalized probabilities, in descending-logit order.
pub fn filtered_distribution(
    logits: &[f32],
    k: usize,
    p: f32,
    temperature: f32,
) -> Result<Vec<(usize, f64)>> {
    if k < 1 {
        return Err(Error::Sampler(format!("k must be at least 1, got {k}")));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Sampler(format!("p must be in (0, 1], got {p}")));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Sampler(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Sampler("logits must be finite and non-empty".into()));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // Stable: equal logits keep ascending index order.
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    order.truncate(k.min(logits.len()));
    let scaled: Vec<f64> = order
        .iter()
        .map(|&i| logits[i] as f64 / temperature as f64)
        .collect();
    let probs = softmax(&scaled);
    let mut cum = 0.0;
    let mut keep = probs.len();
    for (n, &q) in probs.iter().enumerate() {
        cum += q;
        if cum >= p as f64 {
            keep = n + 1;
            break;
        }
    }
    let total: f64 = probs[..keep].iter().sum();
    Ok(order[..keep]
        .iter()
        .zip(&probs[..keep])
        .map(|(&i, &q)| (i, q / total))
        .collect())
}

pub fn sample_from(dist: &[(usize, f64)], rng: &mut Rng) -> usize {
    let mut u = rng::uniform_f64(rng);
    for &(i, q) in dist {
        if u < q {
            return i;
        }
        u -= q;
    }
    dist.last().expect("non-empty distribution").0
}

/// Draws one token after top-k, then top-p filtering.
pub fn top_k_top_p(
    logits: &[f32],
    k: usize,
    p: f32,
    temperature: f32,
    rng: &mut Rng,
) -> Result<usize> {
    let dist = filtered_distribution(logits, k, p, temperature)?;
    Ok(sample_from(&dist, rng))
}

/// Full-softmax probability of `token` at the given temperature.
pub fn confidence(logits: &[f32], token: usize, temperature: f32) -> f64 {
    let scaled: Vec<f64> = logits
        .iter()
        .map(|&v| v as f64 / temperature as f64)
        .collect();
    softmax(&scaled)[token]
}
