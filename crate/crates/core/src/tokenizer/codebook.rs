use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const KMEANS_ITERS: usize = 25;

/// `V × d` table of quantization vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub d: usize,
    pub vectors: Vec<f32>,
}

impl Codebook {
    pub fn new(d: usize, vectors: Vec<f32>) -> Result<Self> {
        if d == 0 || vectors.is_empty() {
            return Err(Error::EmptyCodebook);
        }
        if vectors.len() % d != 0 {
            return Err(Error::shape(
                "codebook",
                format!("{} values for d={d}", vectors.len()),
            ));
        }
        Ok(Codebook { d, vectors })
    }

    pub fn size(&self) -> usize {
        self.vectors.len() / self.d
    }

    pub fn vector(&self, k: usize) -> &[f32] {
        &self.vectors[k * self.d..(k + 1) * self.d]
    }

    /// Index of the closest vector in L2; ties go to the lowest index.
    pub fn nearest(&self, x: &[f32]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for k in 0..self.size() {
            let dist = sq_dist(x, self.vector(k));
            if dist < best.0 {
                best = (dist, k);
            }
        }
        best.1
    }

    pub fn has_duplicates(&self) -> bool {
        let mut seen = HashSet::new();
        (0..self.size()).any(|k| !seen.insert(bits(self.vector(k))))
    }
}

pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let t = x as f64 - y as f64;
            t * t
        })
        .sum()
}

fn bits(v: &[f32]) -> Vec<u32> {
    // Normalize -0.0 so it compares equal to 0.0.
    v.iter()
        .map(|&x| if x == 0.0 { 0 } else { x.to_bits() })
        .collect()
}

pub fn count_distinct(samples: &[f32], d: usize) -> usize {
    samples.chunks(d).map(bits).collect::<HashSet<_>>().len()
}

/// k-means with seeded k-means++ initialization and a fixed iteration count.
pub fn fit_codebook(samples: &[f32], d: usize, v: usize, seed: u64) -> Result<Codebook> {
    if v == 0 || d == 0 {
        return Err(Error::EmptyCodebook);
    }
    if samples.len() % d != 0 {
        return Err(Error::shape(
            "fit_codebook",
            format!("{} values for d={d}", samples.len()),
        ));
    }
    let distinct = count_distinct(samples, d);
    if distinct < v {
        return Err(Error::TooFewSamples {
            distinct,
            needed: v,
        });
    }
    let n = samples.len() / d;
    let point = |i: usize| &samples[i * d..(i + 1) * d];
    let mut r = rng::seeded(seed);
    let mut centers = init_plus_plus(samples, d, v, &mut r);

    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_ITERS {
        let book = Codebook {
            d,
            vectors: centers.clone(),
        };
        for (i, a) in assign.iter_mut().enumerate() {
            *a = book.nearest(point(i));
        }
        let mut sums = vec![0.0f64; v * d];
        let mut counts = vec![0usize; v];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &x) in sums[a * d..(a + 1) * d].iter_mut().zip(point(i)) {
                *s += x as f64;
            }
        }
        let mut empty = Vec::new();
        for k in 0..v {
            if counts[k] == 0 {
                empty.push(k);
                continue;
            }
            for t in 0..d {
                centers[k * d + t] = (sums[k * d + t] / counts[k] as f64) as f32;
            }
        }
        // Reseed empty clusters with the points worst served by their center.
        if !empty.is_empty() {
            let mut far: Vec<(f64, usize)> = (0..n)
                .map(|i| {
                    (
                        sq_dist(point(i), &centers[assign[i] * d..(assign[i] + 1) * d]),
                        i,
                    )
                })
                .collect();
            far.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut used = HashSet::new();
            let mut src = far.into_iter().map(|(_, i)| i);
            for k in empty {
                for i in src.by_ref() {
                    if used.insert(bits(point(i))) {
                        centers[k * d..(k + 1) * d].copy_from_slice(point(i));
                        break;
                    }
                }
            }
        }
    }
    dedupe(&mut centers, samples, d);
    Codebook::new(d, centers)
}

fn init_plus_plus(samples: &[f32], d: usize, v: usize, r: &mut Rng) -> Vec<f32> {
    let n = samples.len() / d;
    let point = |i: usize| &samples[i * d..(i + 1) * d];
    let mut centers = Vec::with_capacity(v * d);
    centers.extend_from_slice(point(rng::below(r, n)));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(point(i), &centers[..d])).collect();
    for _ in 1..v {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng::uniform_f64(r) * total;
            let mut pick = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            // Never pick a zero-distance point (a duplicate of an existing center).
            if dist[pick] == 0.0 {
                pick = dist.iter().position(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng::below(r, n)
        };
        let c = point(pick).to_vec();
        for (i, w) in dist.iter_mut().enumerate() {
            *w = w.min(sq_dist(point(i), &c));
        }
        centers.extend_from_slice(&c);
    }
    centers
}

/// Replaces any repeated center with an unused sample vector.
fn dedupe(centers: &mut [f32], samples: &[f32], d: usize) {
    let v = centers.len() / d;
    let mut seen = HashSet::new();
    let mut dup = Vec::new();
    for k in 0..v {
        if !seen.insert(bits(&centers[k * d..(k + 1) * d])) {
            dup.push(k);
        }
    }
    let mut fresh = samples.chunks(d).filter(|p| seen.insert(bits(p)));
    for k in dup {
        if let Some(p) = fresh.next() {
            centers[k * d..(k + 1) * d].copy_from_slice(p);
        }
    }
}
