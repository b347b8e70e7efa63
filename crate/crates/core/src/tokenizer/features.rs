//! Fixed pooling features standing in for a learned image encoder.
//!
//! Each latent cell covers a `patch × patch` block of pixels. The block is
//! average-pooled into 2×2 sub-cells of RGB (12 values) and mapped to `d`
//! dimensions with a seeded matrix whose rows or columns are orthonormal,
//! so its transpose is the pseudo-inverse used for reconstruction.

use super::resample::FeatureMap;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

pub const POOLED: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub d: usize,
    /// `POOLED × d`, row-major.
    pub matrix: Vec<f32>,
}

impl Projection {
    pub fn seeded(d: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let raw: Vec<f64> = (0..POOLED * d)
            .map(|_| rng::normal(&mut r) as f64)
            .collect();
        // Orthonormalize along the shorter side.
        let (n_vec, len, stride_vec, stride_el) = if d >= POOLED {
            (POOLED, d, d, 1)
        } else {
            (d, POOLED, 1, d)
        };
        let mut m = raw;
        for a in 0..n_vec {
            for b in 0..a {
                let dot: f64 = (0..len)
                    .map(|t| m[a * stride_vec + t * stride_el] * m[b * stride_vec + t * stride_el])
                    .sum();
                for t in 0..len {
                    m[a * stride_vec + t * stride_el] -= dot * m[b * stride_vec + t * stride_el];
                }
            }
            let norm = (0..len)
                .map(|t| m[a * stride_vec + t * stride_el].powi(2))
                .sum::<f64>()
                .sqrt();
            for t in 0..len {
                m[a * stride_vec + t * stride_el] /= norm;
            }
        }
        Projection {
            d,
            matrix: m.into_iter().map(|v| v as f32).collect(),
        }
    }

    pub fn project(&self, pooled: &[f32; POOLED], out: &mut [f32]) {
        for (c, o) in out.iter_mut().enumerate() {
            let mut s = 0.0f64;
            for (k, &p) in pooled.iter().enumerate() {
                s += p as f64 * self.matrix[k * self.d + c] as f64;
            }
            *o = s as f32;
        }
    }

    pub fn unproject(&self, f: &[f32]) -> [f32; POOLED] {
        let mut out = [0.0f32; POOLED];
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.matrix[k * self.d..(k + 1) * self.d];
            *o = row
                .iter()
                .zip(f)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>() as f32;
        }
        out
    }
}

fn patch_size(resolution: usize, latent: usize) -> Result<usize> {
    if latent == 0 || resolution % latent != 0 || (resolution / latent) % 2 != 0 {
        return Err(Error::NotDivisible { resolution, latent });
    }
    Ok(resolution / latent)
}

/// Pooled 2×2 RGB sub-cells of one latent patch.
pub fn pool_patch(image: &Image, latent: usize, i: usize, j: usize) -> Result<[f32; POOLED]> {
    let patch = patch_size(image.side(), latent)?;
    let sub = patch / 2;
    let mut out = [0.0f32; POOLED];
    for a in 0..2 {
        for b in 0..2 {
            let mut acc = [0.0f64; 3];
            for y in 0..sub {
                for x in 0..sub {
                    let p = image.pixel(i * patch + a * sub + y, j * patch + b * sub + x);
                    for c in 0..3 {
                        acc[c] += p[c] as f64;
                    }
                }
            }
            for c in 0..3 {
                out[(a * 2 + b) * 3 + c] = (acc[c] / (sub * sub) as f64) as f32;
            }
        }
    }
    Ok(out)
}

pub fn extract_features(image: &Image, proj: &Projection, latent: usize) -> Result<FeatureMap> {
    patch_size(image.side(), latent)?;
    let mut map = FeatureMap::zeros(latent, latent, proj.d);
    for i in 0..latent {
        for j in 0..latent {
            let pooled = pool_patch(image, latent, i, j)?;
            proj.project(&pooled, map.cell_mut(i, j));
        }
    }
    Ok(map)
}

/// Pixel reconstruction: pseudo-inverse projection, then sub-cell replication.
pub fn reconstruct_image(map: &FeatureMap, proj: &Projection, resolution: usize) -> Result<Image> {
    if map.h != map.w {
        return Err(Error::shape("reconstruct", "latent grid must be square"));
    }
    let patch = patch_size(resolution, map.h)?;
    let sub = patch / 2;
    let mut img = Image::filled(resolution, [0.0; 3]);
    for i in 0..map.h {
        for j in 0..map.w {
            let pooled = proj.unproject(map.cell(i, j));
            for a in 0..2 {
                for b in 0..2 {
                    let o = (a * 2 + b) * 3;
                    let rgb = [pooled[o], pooled[o + 1], pooled[o + 2]];
                    for y in 0..sub {
                        for x in 0..sub {
                            img.set_pixel(i * patch + a * sub + y, j * patch + b * sub + x, rgb);
                        }
                    }
                }
            }
        }
    }
    Ok(img)
}
