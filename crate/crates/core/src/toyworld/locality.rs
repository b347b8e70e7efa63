//! Where the attention mass of each scale's queries goes.

use crate::error::{Error, Result};
use crate::model::Layout;

/// Mean split of attention mass for the queries of one scale.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Locality {
    pub scale: usize,
    /// Keys in the query's own scale.
    pub same: f64,
    /// Keys in earlier scales whose normalized cell centre lies within
    /// `1/h_s` (per axis) of the query's.
    pub aligned: f64,
    /// Everything else, including the start token.
    pub other: f64,
}

fn centre(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

/// Key category for a query at `p` and a key at `q`: 0 same scale, 1 aligned
/// earlier scale, 2 other.
fn category(layout: &Layout, p: usize, q: usize) -> usize {
    let (Some(sp), Some(sq)) = (layout.scale_of(p), layout.scale_of(q)) else {
        return 2;
    };
    if sp == sq {
        return 0;
    }
    let (a, b) = (layout.cells[p - 1], layout.cells[q - 1]);
    let (ha, wa) = layout.schedule.side(sp);
    let (hb, wb) = layout.schedule.side(sq);
    let dy = (centre(a.i, ha) - centre(b.i, hb)).abs();
    let dx = (centre(a.j, wa) - centre(b.j, wb)).abs();
    let eps = 1e-12;
    if sq < sp && dy <= 1.0 / ha as f64 + eps && dx <= 1.0 / wa as f64 + eps {
        1
    } else {
        2
    }
}

/// Per-scale mass fractions from probabilities laid out
/// `[batch][head][L][L]` over `layout`'s sequence.
pub fn attention_locality(
    probs: &[f32],
    batch: usize,
    heads: usize,
    layout: &Layout,
) -> Result<Vec<Locality>> {
    let l = layout.seq_len();
    if probs.len() != batch * heads * l * l {
        return Err(Error::shape(
            "attention_locality",
            format!(
                "{} probabilities for batch {batch}, {heads} heads, length {l}",
                probs.len()
            ),
        ));
    }
    let cats: Vec<usize> = (0..l * l).map(|k| category(layout, k / l, k % l)).collect();
    let mut sums = vec![[0.0f64; 3]; layout.scales()];
    let mut counts = vec![0usize; layout.scales()];
    for bh in 0..batch * heads {
        for p in 1..l {
            let s = layout.cells[p - 1].s;
            let row = &probs[(bh * l + p) * l..(bh * l + p + 1) * l];
            let mut acc = [0.0f64; 3];
            for (q, &v) in row.iter().enumerate() {
                acc[cats[p * l + q]] += v as f64;
            }
            // Normalise per query so rounding in the stored row cannot leak.
            let total: f64 = acc.iter().sum();
            for c in 0..3 {
                sums[s][c] += acc[c] / total;
            }
            counts[s] += 1;
        }
    }
    Ok((0..layout.scales())
        .filter(|&s| counts[s] > 0)
        .map(|s| {
            let n = counts[s] as f64;
            Locality {
                scale: s,
                same: sums[s][0] / n,
                aligned: sums[s][1] / n,
                other: sums[s][2] / n,
            }
        })
        .collect())
}

/// Probabilities spreading each query's mass evenly over the keys the
/// block-causal mask allows.
pub fn uniform_probs(layout: &Layout) -> Vec<f32> {
    let l = layout.seq_len();
    let mut out = vec![0.0f32; l * l];
    for p in 0..l {
        let allowed: Vec<usize> = (0..l).filter(|&q| layout.allows(p, q)).collect();
        for &q in &allowed {
            out[p * l + q] = 1.0 / allowed.len() as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Schedule;

    #[test]
    fn single_scale_is_all_same() {
        let layout = Layout::full(&Schedule::square(&[1]).unwrap());
        let p = vec![1.0f32, 0.0, 0.0, 1.0];
        let loc = attention_locality(&p, 1, 1, &layout).unwrap();
        assert_eq!(loc.len(), 1);
        assert_eq!(loc[0].same, 1.0);
    }

    #[test]
    fn constructed_split() {
        // Schedule 1x1, 2x2: the 2x2 queries see start, the 1x1 cell and
        // their own scale. The 1x1 centre (0.5) lies within 1/2 of every
        // 2x2 centre, so it counts as aligned.
        let layout = Layout::full(&Schedule::square(&[1, 2]).unwrap());
        let l = 6;
        let mut p = vec![0.0f32; l * l];
        p[0] = 1.0;
        p[l] = 0.5;
        p[l + 1] = 0.5;
        for r in 2..6 {
            p[r * l] = 0.1;
            p[r * l + 1] = 0.3;
            for c in 2..6 {
                p[r * l + c] = 0.15;
            }
        }
        let loc = attention_locality(&p, 1, 1, &layout).unwrap();
        assert_eq!(
            loc[0],
            Locality {
                scale: 0,
                same: 0.5,
                aligned: 0.0,
                other: 0.5
            }
        );
        let l1 = loc[1];
        assert!(
            (l1.same - 0.6).abs() < 1e-6
                && (l1.aligned - 0.3).abs() < 1e-6
                && (l1.other - 0.1).abs() < 1e-6
        );
    }

    #[test]
    fn uniform_baseline_counts_keys() {
        let sched = Schedule::square(&[1, 2, 3, 4, 6, 8]).unwrap();
        let layout = Layout::full(&sched);
        let loc = attention_locality(&uniform_probs(&layout), 1, 1, &layout).unwrap();
        let last = loc.last().unwrap();
        assert!((last.same - 64.0 / 131.0).abs() < 1e-5);
        for f in &loc {
            assert!((f.same + f.aligned + f.other - 1.0).abs() < 1e-6);
        }
        assert!(attention_locality(&[0.0; 3], 1, 1, &layout).is_err());
    }
}
