//! Kernel two-sample distance over fixed random image features.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

pub const FEATURE_DIM: usize = 64;
const PROJECTION_SEED: u64 = 0x4d4d_44;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mmd {
    /// Unbiased MMD² clamped at zero.
    pub value: f64,
    /// Unbiased MMD² before clamping; may be slightly negative.
    pub raw: f64,
    /// Biased (V-statistic) MMD², always ≥ 0.
    pub biased: f64,
    /// Squared RBF bandwidth from the median heuristic.
    pub bandwidth: f64,
}

/// 64-d Gaussian random projection of the flattened pixels. The matrix depends
/// only on the fixed seed and the input length.
pub fn features(images: &[Image]) -> Vec<Vec<f64>> {
    let Some(first) = images.first() else {
        return Vec::new();
    };
    let n = first.data().len();
    let r = &mut rng::seeded(rng::derive(PROJECTION_SEED, n as u64));
    let proj = rng::normal_vec(r, n * FEATURE_DIM, 1.0 / (n as f32).sqrt());
    images
        .iter()
        .map(|img| {
            let mut f = vec![0.0f64; FEATURE_DIM];
            for (k, &v) in img.data().iter().enumerate() {
                let row = &proj[k * FEATURE_DIM..(k + 1) * FEATURE_DIM];
                for (o, &w) in f.iter_mut().zip(row) {
                    *o += v as f64 * w as f64;
                }
            }
            f
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of pairwise squared distances over the union; 1 if all coincide.
pub fn median_bandwidth(xs: &[Vec<f64>]) -> f64 {
    let mut d = Vec::with_capacity(xs.len() * xs.len() / 2);
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            d.push(sq_dist(&xs[i], &xs[j]));
        }
    }
    d.sort_by(f64::total_cmp);
    let med = if d.is_empty() {
        0.0
    } else if d.len() % 2 == 1 {
        d[d.len() / 2]
    } else {
        (d[d.len() / 2 - 1] + d[d.len() / 2]) / 2.0
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

pub fn mmd_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Mmd> {
    let (m, n) = (a.len(), b.len());
    if m < 2 || n < 2 {
        return Err(Error::TooFewImages {
            got: m.min(n),
            need: 2,
        });
    }
    let union: Vec<Vec<f64>> = a.iter().chain(b).cloned().collect();
    let bw = median_bandwidth(&union);
    let k = |x: &[f64], y: &[f64]| (-sq_dist(x, y) / (2.0 * bw)).exp();
    let within = |s: &[Vec<f64>]| {
        let (mut off, mut diag) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                let v = k(&s[i], &s[j]);
                if i == j {
                    diag += v;
                } else {
                    off += v;
                }
            }
        }
        (off, diag)
    };
    let (aa, ad) = within(a);
    let (bb, bd) = within(b);
    let mut ab = 0.0;
    for x in a {
        for y in b {
            ab += k(x, y);
        }
    }
    let (mf, nf) = (m as f64, n as f64);
    let cross = 2.0 * ab / (mf * nf);
    let raw = aa / (mf * (mf - 1.0)) + bb / (nf * (nf - 1.0)) - cross;
    let biased = ((aa + ad) / (mf * mf) + (bb + bd) / (nf * nf) - cross).max(0.0);
    Ok(Mmd {
        value: raw.max(0.0),
        raw,
        biased,
        bandwidth: bw,
    })
}

pub fn mmd_proxy(a: &[Image], b: &[Image]) -> Result<Mmd> {
    if a.iter()
        .chain(b)
        .any(|i| i.data().len() != a.first().map_or(0, |f| f.data().len()))
    {
        return Err(Error::shape("mmd_proxy", "images differ in size"));
    }
    mmd_features(&features(a), &features(b))
}
