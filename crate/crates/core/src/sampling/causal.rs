//! Multi-step sampling of one scale driven by a mask head.
//!
//! Provisional tokens are drawn in parallel, the most confident share is
//! kept, and the rest are filled by the mask head over a fixed number of
//! iterations, unmasking its most confident predictions on a cosine
//! schedule.

use super::mask_head::MaskPredictor;
use super::topk::{confidence, top_k_top_p};
use crate::error::{Error, Result};
use crate::numeric::softmax;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CausalParams {
    pub k: usize,
    pub p: f32,
    pub temperature: f32,
    pub keep_ratio: f32,
    pub steps: usize,
}

/// Number of positions still masked after iteration `t` of `steps`.
pub fn still_masked(initial: usize, t: usize, steps: usize) -> usize {
    if t >= steps {
        return 0;
    }
    let frac = (std::f64::consts::FRAC_PI_2 * t as f64 / steps as f64).cos();
    ((initial as f64 * frac).floor() as usize).min(initial)
}

/// Indices of the `count` highest-confidence entries; ties favour the
/// earlier position.
pub fn most_confident(conf: &[f64], candidates: &[usize], count: usize) -> Vec<usize> {
    let mut order = candidates.to_vec();
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]));
    order.truncate(count);
    order
}

/// Provisional tokens and full-softmax confidences for every row.
pub fn provisional(
    logits: &[f32],
    vocab: usize,
    params: &CausalParams,
    rng: &mut Rng,
) -> Result<(Vec<u32>, Vec<f64>)> {
    let mut tokens = Vec::with_capacity(logits.len() / vocab);
    let mut conf = Vec::with_capacity(logits.len() / vocab);
    for row in logits.chunks(vocab) {
        let t = top_k_top_p(row, params.k, params.p, params.temperature, rng)?;
        tokens.push(t as u32);
        conf.push(confidence(row, t, params.temperature));
    }
    Ok((tokens, conf))
}

pub struct CausalResult {
    pub tokens: Vec<u32>,
    pub confidence: Vec<f64>,
    pub iterations: usize,
}

/// Samples one `h × w` scale. `logits` is `n × V` backbone output and `phi`
/// the matching feature rows.
#[allow(clippy::too_many_arguments)]
pub fn causal_stable_sample(
    logits: &[f32],
    phi: &[f32],
    h: usize,
    w: usize,
    head: &dyn MaskPredictor,
    params: &CausalParams,
    rng: &mut Rng,
) -> Result<CausalResult> {
    if !head.is_trained() {
        return Err(Error::UntrainedMaskHead);
    }
    if params.steps < 1 {
        return Err(Error::Sampler(
            "causal sampling needs at least one step".into(),
        ));
    }
    if !(0.0..=1.0).contains(&params.keep_ratio) {
        return Err(Error::Sampler(format!(
            "keep ratio {} outside [0, 1]",
            params.keep_ratio
        )));
    }
    let vocab = head.vocab();
    let n = h * w;
    if logits.len() != n * vocab {
        return Err(Error::shape(
            "causal_sample",
            format!("{} logits for {n} positions of {vocab}", logits.len()),
        ));
    }
    let (tokens, conf) = provisional(logits, vocab, params, rng)?;
    let keep = ((params.keep_ratio as f64 * n as f64).ceil() as usize).min(n);
    let all: Vec<usize> = (0..n).collect();
    let kept = most_confident(&conf, &all, keep);
    let mut known: Vec<Option<u32>> = vec![None; n];
    let mut final_conf = vec![0.0; n];
    for &k in &kept {
        known[k] = Some(tokens[k]);
        final_conf[k] = conf[k];
    }
    let initial = n - keep;
    if initial == 0 {
        return Ok(CausalResult {
            tokens,
            confidence: conf,
            iterations: 0,
        });
    }
    for t in 1..=params.steps {
        let masked: Vec<usize> = (0..n).filter(|&k| known[k].is_none()).collect();
        if masked.is_empty() {
            break;
        }
        let pred = head.predict(&known, phi, h, w)?;
        let mut guess = vec![0u32; n];
        let mut gconf = vec![0.0f64; n];
        for &k in &masked {
            let row: Vec<f64> = pred[k * vocab..(k + 1) * vocab]
                .iter()
                .map(|&v| v as f64)
                .collect();
            let probs = softmax(&row);
            let mut best = 0;
            for (v, &q) in probs.iter().enumerate() {
                if q > probs[best] {
                    best = v;
                }
            }
            guess[k] = best as u32;
            gconf[k] = probs[best];
        }
        let fix = masked.len() - still_masked(initial, t, params.steps).min(masked.len());
        for k in most_confident(&gconf, &masked, fix) {
            known[k] = Some(guess[k]);
            final_conf[k] = gconf[k];
        }
    }
    Ok(CausalResult {
        tokens: known
            .into_iter()
            .map(|t| t.expect("every position fixed"))
            .collect(),
        confidence: final_conf,
        iterations: params.steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Predicts `(known neighbour + 1) mod V` with high confidence.
    struct Shift {
        vocab: usize,
    }

    impl MaskPredictor for Shift {
        fn vocab(&self) -> usize {
            self.vocab
        }
        fn is_trained(&self) -> bool {
            true
        }
        fn predict(
            &self,
            known: &[Option<u32>],
            _phi: &[f32],
            _h: usize,
            _w: usize,
        ) -> Result<Vec<f32>> {
            let n = known.len();
            let anchor = known.iter().flatten().next().copied().unwrap_or(0);
            let mut out = vec![0.0f32; n * self.vocab];
            for k in 0..n {
                out[k * self.vocab + ((anchor as usize + k + 1) % self.vocab)] = 5.0;
            }
            Ok(out)
        }
    }

    fn params(keep: f32, steps: usize) -> CausalParams {
        CausalParams {
            k: 4,
            p: 1.0,
            temperature: 1.0,
            keep_ratio: keep,
            steps,
        }
    }

    #[test]
    fn schedule_ends_at_zero() {
        for steps in 1..6 {
            assert_eq!(still_masked(10, steps, steps), 0);
            for t in 1..steps {
                assert!(still_masked(10, t, steps) >= still_masked(10, t + 1, steps));
            }
        }
        assert_eq!(still_masked(10, 0, 4), 10);
    }

    #[test]
    fn full_retention_is_the_baseline() {
        let mut r = rng::seeded(1);
        let logits = rng::normal_vec(&mut r, 6 * 4, 1.0);
        let head = Shift { vocab: 4 };
        let got = causal_stable_sample(
            &logits,
            &[],
            2,
            3,
            &head,
            &params(1.0, 3),
            &mut rng::seeded(5),
        )
        .unwrap();
        let mut r2 = rng::seeded(5);
        let base: Vec<u32> = logits
            .chunks(4)
            .map(|row| top_k_top_p(row, 4, 1.0, 1.0, &mut r2).unwrap() as u32)
            .collect();
        assert_eq!(got.tokens, base);
    }

    #[test]
    fn one_step_no_retention_is_head_argmax() {
        let logits = vec![0.0f32; 4 * 5];
        let head = Shift { vocab: 5 };
        let got = causal_stable_sample(
            &logits,
            &[],
            2,
            2,
            &head,
            &params(0.0, 1),
            &mut rng::seeded(2),
        )
        .unwrap();
        assert_eq!(got.tokens, vec![1, 2, 3, 4]);
    }

    #[test]
    fn retention_sets_are_nested() {
        let mut r = rng::seeded(3);
        let conf: Vec<f64> = (0..20)
            .map(|k| {
                if k % 5 == 0 {
                    0.5
                } else {
                    rng::uniform_f64(&mut r)
                }
            })
            .collect();
        let all: Vec<usize> = (0..20).collect();
        for a in 0..20 {
            let small = most_confident(&conf, &all, a);
            let big = most_confident(&conf, &all, a + 1);
            assert!(small.iter().all(|k| big.contains(k)));
        }
    }

    #[test]
    fn rejects_untrained_or_zero_steps() {
        struct Untrained;
        impl MaskPredictor for Untrained {
            fn vocab(&self) -> usize {
                2
            }
            fn is_trained(&self) -> bool {
                false
            }
            fn predict(
                &self,
                _: &[Option<u32>],
                _: &[f32],
                _: usize,
                _: usize,
            ) -> Result<Vec<f32>> {
                unreachable!()
            }
        }
        let r = &mut rng::seeded(0);
        assert!(matches!(
            causal_stable_sample(&[0.0; 2], &[], 1, 1, &Untrained, &params(0.5, 1), r),
            Err(Error::UntrainedMaskHead)
        ));
        assert!(causal_stable_sample(
            &[0.0; 2],
            &[],
            1,
            1,
            &Shift { vocab: 2 },
            &params(0.5, 0),
            r
        )
        .is_err());
    }
}
