//! Area resampling between grids.
//!
//! Downsampling averages every fine cell with weight equal to its overlap
//! with the coarse cell. Upsampling is the adjoint of that map normalized so
//! each fine cell receives a convex combination of coarse cells; for integer
//! ratios it is nearest-neighbour replication.

use crate::error::{Error, Result};

/// `h × w` grid of `d`-dimensional vectors, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        FeatureMap {
            h,
            w,
            d,
            data: vec![0.0; h * w * d],
        }
    }

    pub fn new(h: usize, w: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * d {
            return Err(Error::shape(
                "feature_map",
                format!("{h}x{w}x{d} needs {} values, got {}", h * w * d, data.len()),
            ));
        }
        Ok(FeatureMap { h, w, d, data })
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f32] {
        let o = (i * self.w + j) * self.d;
        &self.data[o..o + self.d]
    }

    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut [f32] {
        let o = (i * self.w + j) * self.d;
        &mut self.data[o..o + self.d]
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|&v| v as f64 * v as f64).sum()
    }
}

/// For each coarse cell, the fine cells it overlaps and the overlap length
/// measured in units where one cell of each grid has integer length.
fn overlaps(fine: usize, coarse: usize) -> Vec<Vec<(usize, usize)>> {
    (0..coarse)
        .map(|c| {
            let (lo, hi) = (c * fine, (c + 1) * fine);
            (0..fine)
                .filter_map(|p| {
                    let (a, b) = (p * coarse, (p + 1) * coarse);
                    let ov = hi.min(b).saturating_sub(lo.max(a));
                    (ov > 0).then_some((p, ov))
                })
                .collect()
        })
        .collect()
}

/// Area-weighted average of `x` onto an `h × w` grid.
pub fn area_down(x: &FeatureMap, h: usize, w: usize) -> FeatureMap {
    if (h, w) == (x.h, x.w) {
        return x.clone();
    }
    let (oh, ow) = (overlaps(x.h, h), overlaps(x.w, w));
    let d = x.d;
    let mut out = FeatureMap::zeros(h, w, d);
    let mut acc = vec![0.0f64; d];
    for ci in 0..h {
        for cj in 0..w {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &(pi, wi) in &oh[ci] {
                for &(pj, wj) in &ow[cj] {
                    let wt = (wi * wj) as f64;
                    for (a, &v) in acc.iter_mut().zip(x.cell(pi, pj)) {
                        *a += wt * v as f64;
                    }
                }
            }
            let norm = (x.h * x.w) as f64;
            for (o, a) in out.cell_mut(ci, cj).iter_mut().zip(&acc) {
                *o = (a / norm) as f32;
            }
        }
    }
    out
}

/// Spreads a coarse map over an `h × w` grid (adjoint of [`area_down`],
/// rows normalized to sum to one).
pub fn area_up(q: &FeatureMap, h: usize, w: usize) -> FeatureMap {
    if (h, w) == (q.h, q.w) {
        return q.clone();
    }
    let d = q.d;
    let invert = |fine: usize, coarse: usize| {
        let mut rows = vec![Vec::new(); fine];
        for (c, list) in overlaps(fine, coarse).into_iter().enumerate() {
            for (p, ov) in list {
                rows[p].push((c, ov));
            }
        }
        rows
    };
    let (uh, uw) = (invert(h, q.h), invert(w, q.w));
    let norm = (q.h * q.w) as f64;
    let mut out = FeatureMap::zeros(h, w, d);
    let mut acc = vec![0.0f64; d];
    for pi in 0..h {
        for pj in 0..w {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &(ci, wi) in &uh[pi] {
                for &(cj, wj) in &uw[pj] {
                    let wt = (wi * wj) as f64;
                    for (a, &v) in acc.iter_mut().zip(q.cell(ci, cj)) {
                        *a += wt * v as f64;
                    }
                }
            }
            for (o, a) in out.cell_mut(pi, pj).iter_mut().zip(&acc) {
                *o = (a / norm) as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_map(seed: u64, h: usize, w: usize, d: usize) -> FeatureMap {
        let mut r = rng::seeded(seed);
        FeatureMap::new(h, w, d, rng::normal_vec(&mut r, h * w * d, 1.0)).unwrap()
    }

    #[test]
    fn down_of_constant_is_constant() {
        let x = FeatureMap::new(6, 6, 1, vec![0.25; 36]).unwrap();
        for side in 1..=6 {
            let y = area_down(&x, side, side);
            assert!(y.data.iter().all(|&v| (v - 0.25).abs() < 1e-7));
        }
    }

    #[test]
    fn integer_ratio_down_is_block_mean() {
        let x = random_map(1, 4, 4, 2);
        let y = area_down(&x, 2, 2);
        for c in 0..2 {
            let mean: f32 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|&(a, b)| x.cell(2 + a, b)[c])
                .sum::<f32>()
                / 4.0;
            assert!((y.cell(1, 0)[c] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn integer_ratio_up_replicates() {
        let q = random_map(2, 2, 2, 3);
        let u = area_up(&q, 4, 4);
        assert_eq!(u.cell(3, 1), q.cell(1, 0));
        assert_eq!(u.cell(0, 3), q.cell(0, 1));
    }

    #[test]
    fn up_is_scaled_adjoint_of_down() {
        // <down(x), q> * (H W / h w) == <x, up(q)> for every x, q.
        for (hf, hc) in [(8, 3), (6, 4), (4, 2), (5, 1)] {
            let x = random_map(3, hf, hf, 2);
            let q = random_map(4, hc, hc, 2);
            let dx = area_down(&x, hc, hc);
            let uq = area_up(&q, hf, hf);
            let lhs: f64 = dx
                .data
                .iter()
                .zip(&q.data)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>()
                * (hf * hf) as f64
                / (hc * hc) as f64;
            let rhs: f64 = x
                .data
                .iter()
                .zip(&uq.data)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            assert!((lhs - rhs).abs() < 1e-4, "{hf}->{hc}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn same_size_is_identity() {
        let x = random_map(5, 3, 3, 4);
        assert_eq!(area_down(&x, 3, 3), x);
        assert_eq!(area_up(&x, 3, 3), x);
    }
}
