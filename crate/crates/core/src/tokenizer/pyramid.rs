//! Multi-scale residual quantization.

use super::codebook::{fit_codebook, Codebook};
use super::features::{extract_features, reconstruct_image, Projection};
use super::resample::{area_down, area_up, FeatureMap};
use super::schedule::Schedule;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

/// Token maps `r_1..r_S`, each row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenPyramid {
    pub scales: Vec<Vec<u32>>,
}

impl TokenPyramid {
    pub fn check(&self, schedule: &Schedule, vocab: usize) -> Result<()> {
        if self.scales.len() != schedule.len() {
            return Err(Error::Schedule(format!(
                "pyramid has {} scales, schedule {}",
                self.scales.len(),
                schedule.len()
            )));
        }
        for (s, r) in self.scales.iter().enumerate() {
            if r.len() != schedule.tokens(s) {
                return Err(Error::Schedule(format!(
                    "scale {s} has {} tokens, expected {}",
                    r.len(),
                    schedule.tokens(s)
                )));
            }
            if let Some(&t) = r.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::TokenOutOfRange {
                    token: t as usize,
                    vocab,
                });
            }
        }
        Ok(())
    }

    pub fn flat(&self) -> impl Iterator<Item = u32> + '_ {
        self.scales.iter().flatten().copied()
    }
}

#[derive(Clone, Debug)]
pub struct Encoding {
    pub pyramid: TokenPyramid,
    /// What the pyramid fails to explain: `features − decode(pyramid)`.
    pub residual: FeatureMap,
    /// Residual L2 norm before any scale, then after each scale.
    pub norms: Vec<f64>,
}

pub fn dequantize(tokens: &[u32], h: usize, w: usize, codebook: &Codebook) -> Result<FeatureMap> {
    let (v, d) = (codebook.size(), codebook.d);
    let mut out = FeatureMap::zeros(h, w, d);
    for (k, &t) in tokens.iter().enumerate() {
        if t as usize >= v {
            return Err(Error::TokenOutOfRange {
                token: t as usize,
                vocab: v,
            });
        }
        out.data[k * d..(k + 1) * d].copy_from_slice(codebook.vector(t as usize));
    }
    Ok(out)
}

fn add_assign(acc: &mut FeatureMap, x: &FeatureMap) {
    for (a, &b) in acc.data.iter_mut().zip(&x.data) {
        *a += b;
    }
}

fn encode_inner(
    features: &FeatureMap,
    codebook: &Codebook,
    schedule: &Schedule,
    mut sink: Option<&mut Vec<f32>>,
) -> Result<Encoding> {
    if codebook.size() == 0 {
        return Err(Error::EmptyCodebook);
    }
    let (h, w) = schedule.last();
    if (features.h, features.w, features.d) != (h, w, codebook.d) {
        return Err(Error::shape(
            "encode",
            format!(
                "features {}x{}x{} for latent {h}x{w}x{}",
                features.h, features.w, features.d, codebook.d
            ),
        ));
    }
    let mut recon = FeatureMap::zeros(h, w, codebook.d);
    let mut residual = features.clone();
    let mut norms = vec![residual.sq_norm().sqrt()];
    let mut scales = Vec::with_capacity(schedule.len());
    for &(hs, ws) in schedule.sides() {
        let z = area_down(&residual, hs, ws);
        if let Some(sink) = sink.as_deref_mut() {
            sink.extend_from_slice(&z.data);
        }
        let tokens: Vec<u32> = z
            .data
            .chunks(codebook.d)
            .map(|c| codebook.nearest(c) as u32)
            .collect();
        let q = dequantize(&tokens, hs, ws, codebook)?;
        add_assign(&mut recon, &area_up(&q, h, w));
        for ((r, &f), &c) in residual
            .data
            .iter_mut()
            .zip(&features.data)
            .zip(&recon.data)
        {
            *r = f - c;
        }
        norms.push(residual.sq_norm().sqrt());
        scales.push(tokens);
    }
    Ok(Encoding {
        pyramid: TokenPyramid { scales },
        residual,
        norms,
    })
}

/// Scale by scale: area-downsample the residual, quantize each cell to its
/// nearest codebook vector, and subtract the upsampled result.
pub fn encode(features: &FeatureMap, codebook: &Codebook, schedule: &Schedule) -> Result<Encoding> {
    encode_inner(features, codebook, schedule, None)
}

/// Sum of the upsampled dequantized maps of the first `upto` scales.
fn partial_decode(
    pyramid: &TokenPyramid,
    codebook: &Codebook,
    schedule: &Schedule,
    upto: usize,
) -> Result<FeatureMap> {
    let (h, w) = schedule.last();
    let mut recon = FeatureMap::zeros(h, w, codebook.d);
    for (s, tokens) in pyramid.scales.iter().take(upto).enumerate() {
        let (hs, ws) = schedule.side(s);
        if tokens.len() != hs * ws {
            return Err(Error::Schedule(format!(
                "scale {s} has {} tokens, expected {}",
                tokens.len(),
                hs * ws
            )));
        }
        let q = dequantize(tokens, hs, ws, codebook)?;
        add_assign(&mut recon, &area_up(&q, h, w));
    }
    Ok(recon)
}

pub fn decode(
    pyramid: &TokenPyramid,
    codebook: &Codebook,
    schedule: &Schedule,
) -> Result<FeatureMap> {
    if pyramid.scales.len() != schedule.len() {
        return Err(Error::Schedule(format!(
            "pyramid has {} scales, schedule {}",
            pyramid.scales.len(),
            schedule.len()
        )));
    }
    partial_decode(pyramid, codebook, schedule, schedule.len())
}

/// Input features for predicting scale `s` (0-based, `1 ≤ s < S`): the
/// reconstruction from scales `< s`, resampled to scale `s`'s grid. Only the
/// first `s` maps of `prefix` are read.
pub fn next_scale_input(
    prefix: &TokenPyramid,
    codebook: &Codebook,
    schedule: &Schedule,
    s: usize,
) -> Result<FeatureMap> {
    if s == 0 || s >= schedule.len() {
        return Err(Error::ScaleOutOfRange {
            scale: s,
            scales: schedule.len(),
        });
    }
    if prefix.scales.len() < s {
        return Err(Error::Schedule(format!(
            "prefix has {} scales, need {s}",
            prefix.scales.len()
        )));
    }
    let recon = partial_decode(prefix, codebook, schedule, s)?;
    let (hs, ws) = schedule.side(s);
    Ok(area_down(&recon, hs, ws))
}

/// Next-scale inputs for every scale `1..S` in one incremental pass.
pub fn all_next_scale_inputs(
    pyramid: &TokenPyramid,
    codebook: &Codebook,
    schedule: &Schedule,
) -> Result<Vec<FeatureMap>> {
    let (h, w) = schedule.last();
    let mut recon = FeatureMap::zeros(h, w, codebook.d);
    let mut out = Vec::with_capacity(schedule.len().saturating_sub(1));
    for s in 0..schedule.len() - 1 {
        let (hs, ws) = schedule.side(s);
        let q = dequantize(&pyramid.scales[s], hs, ws, codebook)?;
        add_assign(&mut recon, &area_up(&q, h, w));
        let (hn, wn) = schedule.side(s + 1);
        out.push(area_down(&recon, hn, wn));
    }
    Ok(out)
}

pub const FIT_MAX_SAMPLES: usize = 20_000;
pub const FIT_ROUNDS: usize = 2;

/// Feature projection plus a codebook shared by every schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    pub projection: Projection,
    pub codebook: Codebook,
}

impl Tokenizer {
    /// Reserves token 0 for the zero vector and fits the remaining `v − 1`
    /// vectors by k-means on residuals collected scale by scale, alternating
    /// encode and refit. Every `(images, schedule)` set contributes samples.
    pub fn fit(sets: &[(&[Image], &Schedule)], v: usize, d: usize, seed: u64) -> Result<Self> {
        if v < 2 {
            return Err(Error::Config(
                "tokenizer needs a vocabulary of at least 2".into(),
            ));
        }
        let projection = Projection::seeded(d, rng::derive(seed, 1));
        let mut feats = Vec::new();
        for &(images, schedule) in sets {
            for img in images {
                feats.push((
                    extract_features(img, &projection, schedule.last().0)?,
                    schedule,
                ));
            }
        }
        let mut codebook = Codebook::new(d, vec![0.0; d])?;
        for round in 0..FIT_ROUNDS {
            let mut samples = Vec::new();
            for (f, schedule) in &feats {
                encode_inner(f, &codebook, schedule, Some(&mut samples))?;
            }
            let samples = subsample(
                &samples,
                d,
                FIT_MAX_SAMPLES,
                rng::derive(seed, 10 + round as u64),
            );
            let fitted = fit_codebook(&samples, d, v - 1, rng::derive(seed, 20 + round as u64))?;
            let mut vectors = vec![0.0; d];
            vectors.extend_from_slice(&fitted.vectors);
            codebook = Codebook::new(d, vectors)?;
        }
        Ok(Tokenizer {
            projection,
            codebook,
        })
    }

    pub fn vocab(&self) -> usize {
        self.codebook.size()
    }

    pub fn features(&self, image: &Image, schedule: &Schedule) -> Result<FeatureMap> {
        extract_features(image, &self.projection, schedule.last().0)
    }

    pub fn encode_image(&self, image: &Image, schedule: &Schedule) -> Result<Encoding> {
        encode(&self.features(image, schedule)?, &self.codebook, schedule)
    }

    pub fn decode_image(
        &self,
        pyramid: &TokenPyramid,
        schedule: &Schedule,
        resolution: usize,
    ) -> Result<Image> {
        let f = decode(pyramid, &self.codebook, schedule)?;
        reconstruct_image(&f, &self.projection, resolution)
    }
}

/// Deterministic subset of at most `max` vectors, kept in original order.
fn subsample(samples: &[f32], d: usize, max: usize, seed: u64) -> Vec<f32> {
    let n = samples.len() / d;
    if n <= max {
        return samples.to_vec();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng::seeded(seed);
    for i in 0..max {
        let j = i + rng::below(&mut r, n - i);
        idx.swap(i, j);
    }
    let mut keep = idx[..max].to_vec();
    keep.sort_unstable();
    keep.iter()
        .flat_map(|&i| samples[i * d..(i + 1) * d].iter().copied())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_map(seed: u64, h: usize, d: usize) -> FeatureMap {
        let mut r = rng::seeded(seed);
        FeatureMap::new(h, h, d, rng::normal_vec(&mut r, h * h * d, 1.0)).unwrap()
    }

    fn random_codebook(seed: u64, v: usize, d: usize) -> Codebook {
        let mut r = rng::seeded(seed);
        let mut vectors = vec![0.0; d];
        vectors.extend(rng::normal_vec(&mut r, (v - 1) * d, 0.8));
        Codebook::new(d, vectors).unwrap()
    }

    #[test]
    fn one_dimensional_example() {
        let cb = Codebook::new(1, vec![-1.0, 0.0, 1.0]).unwrap();
        let sched = Schedule::square(&[1]).unwrap();
        let f = FeatureMap::new(1, 1, 1, vec![0.7]).unwrap();
        let enc = encode(&f, &cb, &sched).unwrap();
        assert_eq!(enc.pyramid.scales, vec![vec![2]]);
        assert!((enc.residual.data[0] - (-0.3)).abs() < 1e-6);
    }

    #[test]
    fn zero_features_stay_zero() {
        let cb = random_codebook(1, 8, 4);
        let sched = Schedule::square(&[1, 2, 4]).unwrap();
        let enc = encode(&FeatureMap::zeros(4, 4, 4), &cb, &sched).unwrap();
        assert!(enc.pyramid.flat().all(|t| t == 0));
        assert!(enc.norms.iter().all(|&n| n == 0.0));
    }

    #[test]
    fn decode_residual_is_exact_and_norms_shrink() {
        let sched = Schedule::square(&[1, 2, 3, 4]).unwrap();
        let cb = random_codebook(2, 32, 4);
        for seed in 0..50 {
            let f = random_map(seed, 4, 4);
            let enc = encode(&f, &cb, &sched).unwrap();
            let recon = decode(&enc.pyramid, &cb, &sched).unwrap();
            for ((&a, &b), &r) in f.data.iter().zip(&recon.data).zip(&enc.residual.data) {
                assert_eq!(a - b, r);
            }
            for w in enc.norms.windows(2) {
                assert!(w[1] <= w[0], "{:?}", enc.norms);
            }
        }
    }

    #[test]
    fn two_by_two_two_scales_monotone() {
        let sched = Schedule::square(&[1, 2]).unwrap();
        let cb = random_codebook(3, 16, 3);
        for seed in 0..100 {
            let enc = encode(&random_map(100 + seed, 2, 3), &cb, &sched).unwrap();
            assert!(enc.norms[2] <= enc.norms[1] && enc.norms[1] <= enc.norms[0]);
        }
    }

    #[test]
    fn single_scale_exact_hit_reconstructs() {
        let cb = random_codebook(4, 8, 2);
        let sched = Schedule::square(&[1]).unwrap();
        let f = FeatureMap::new(1, 1, 2, cb.vector(6).to_vec()).unwrap();
        let enc = encode(&f, &cb, &sched).unwrap();
        assert_eq!(enc.pyramid.scales, vec![vec![6]]);
        assert_eq!(decode(&enc.pyramid, &cb, &sched).unwrap(), f);
        assert!(enc.residual.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mse_decreases_with_more_scales() {
        let cb = random_codebook(5, 64, 2);
        let full = Schedule::square(&[1, 2, 4, 8]).unwrap();
        let f = random_map(6, 8, 2);
        let enc = encode(&f, &cb, &full).unwrap();
        // Prefix reconstructions carry strictly less error as scales are added.
        let mut last = f64::INFINITY;
        for k in 1..=full.len() {
            let mut prefix = enc.pyramid.clone();
            for s in k..full.len() {
                prefix.scales[s] = vec![0; full.tokens(s)];
            }
            let recon = decode(&prefix, &cb, &full).unwrap();
            let mse: f64 = f
                .data
                .iter()
                .zip(&recon.data)
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum();
            assert!(mse < last, "prefix {k}: {mse} !< {last}");
            last = mse;
        }
    }

    #[test]
    fn decode_rejects_bad_token() {
        let cb = random_codebook(6, 4, 2);
        let sched = Schedule::square(&[1]).unwrap();
        let p = TokenPyramid {
            scales: vec![vec![4]],
        };
        assert!(matches!(
            decode(&p, &cb, &sched),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn next_scale_input_cases() {
        let cb = random_codebook(7, 8, 3);
        let sched = Schedule::square(&[1, 2, 4]).unwrap();
        let zero = TokenPyramid {
            scales: vec![vec![0], vec![0; 4], vec![0; 16]],
        };
        let x = next_scale_input(&zero, &cb, &sched, 1).unwrap();
        assert_eq!((x.h, x.w), (2, 2));
        assert!(x.data.iter().all(|&v| v == 0.0));
        let enc = encode(&random_map(8, 4, 3), &cb, &sched).unwrap();
        let x = next_scale_input(&enc.pyramid, &cb, &sched, 2).unwrap();
        assert_eq!((x.h, x.w, x.d), (4, 4, 3));
        // Independent recomputation: explicit sum of replicated coarse vectors.
        for i in 0..4 {
            for j in 0..4 {
                for c in 0..3 {
                    let a = cb.vector(enc.pyramid.scales[0][0] as usize)[c];
                    let b = cb.vector(enc.pyramid.scales[1][(i / 2) * 2 + j / 2] as usize)[c];
                    assert_eq!(x.cell(i, j)[c], a + b);
                }
            }
        }
        let all = all_next_scale_inputs(&enc.pyramid, &cb, &sched).unwrap();
        assert_eq!(all[1], x);
        assert!(next_scale_input(&enc.pyramid, &cb, &sched, 0).is_err());
        assert!(next_scale_input(&enc.pyramid, &cb, &sched, 3).is_err());
    }

    #[test]
    fn reencoding_a_decoded_pyramid_recovers_it() {
        // Only the coarsest scale is nonzero, so each step lands exactly on a
        // codebook vector and every later scale sees a zero residual.
        let cb = random_codebook(9, 16, 4);
        let sched = Schedule::square(&[1, 2, 4]).unwrap();
        for t in 1..16u32 {
            let p = TokenPyramid {
                scales: vec![vec![t], vec![0; 4], vec![0; 16]],
            };
            let f = decode(&p, &cb, &sched).unwrap();
            assert_eq!(encode(&f, &cb, &sched).unwrap().pyramid, p);
        }
    }

    #[test]
    fn tokenizer_fit_reserves_zero() {
        let mut r = rng::seeded(1);
        let images: Vec<Image> = (0..20)
            .map(|_| {
                Image::new(
                    16,
                    (0..16 * 16 * 3)
                        .map(|_| rng::uniform(&mut r) * 2.0 - 1.0)
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let sched = Schedule::square(&[1, 2, 4]).unwrap();
        let tok = Tokenizer::fit(&[(&images, &sched)], 16, 16, 3).unwrap();
        assert_eq!(tok.vocab(), 16);
        assert!(tok.codebook.vector(0).iter().all(|&v| v == 0.0));
        assert!(!tok.codebook.has_duplicates());
        let again = Tokenizer::fit(&[(&images, &sched)], 16, 16, 3).unwrap();
        assert_eq!(tok, again);
        let enc = tok.encode_image(&images[0], &sched).unwrap();
        enc.pyramid.check(&sched, 16).unwrap();
    }
}
