//! Teacher-forcing cross-entropy over supervised token positions.

use std::sync::Arc;

use super::layout::{Layout, Window};
use super::transformer::{Forward, Model};
use crate::error::{Error, Result};
use crate::numeric::{Graph, NodeId};
use crate::tokenizer::TokenPyramid;

/// Rows of `Forward::hidden` to supervise and their target tokens.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Supervision {
    pub rows: Vec<usize>,
    pub targets: Vec<u32>,
    /// Scale of each supervised row.
    pub scales: Vec<usize>,
}

impl Supervision {
    /// Every token in each layout. With windows, the second-to-last scale is
    /// limited to the window's aligned crop (the last scale is already
    /// cropped by the layout itself).
    pub fn new(
        layouts: &[Layout],
        pyramids: &[&TokenPyramid],
        windows: Option<&[Window]>,
    ) -> Result<Self> {
        let mut sup = Supervision::default();
        let mut base = 0;
        for (b, (layout, pyr)) in layouts.iter().zip(pyramids).enumerate() {
            let n = layout.scales();
            let second = windows.and_then(|w| w[b].second);
            for (p, c) in layout.cells.iter().enumerate() {
                if n >= 2 && c.s == n - 2 {
                    if let Some(crop) = second {
                        if !crop.contains(c.i, c.j) {
                            continue;
                        }
                    }
                }
                let w = layout.schedule.side(c.s).1;
                let t = *pyr
                    .scales
                    .get(c.s)
                    .and_then(|r| r.get(c.i * w + c.j))
                    .ok_or_else(|| Error::shape("supervision", "pyramid does not match layout"))?;
                sup.rows.push(base + p + 1);
                sup.targets.push(t);
                sup.scales.push(c.s);
            }
            base += layout.seq_len();
        }
        if sup.rows.is_empty() {
            return Err(Error::EmptySupervision);
        }
        Ok(sup)
    }

    /// Only the rows belonging to scale `s`.
    pub fn only_scale(&self, s: usize) -> Result<Self> {
        let mut out = Supervision::default();
        for k in 0..self.rows.len() {
            if self.scales[k] == s {
                out.rows.push(self.rows[k]);
                out.targets.push(self.targets[k]);
                out.scales.push(s);
            }
        }
        if out.rows.is_empty() {
            return Err(Error::EmptySupervision);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Mean cross-entropy over the supervised rows. Returns the loss node and
/// the logits node.
pub fn teacher_forcing_loss(
    model: &Model,
    g: &mut Graph,
    fwd: &Forward,
    sup: &Supervision,
) -> Result<(NodeId, NodeId)> {
    if sup.is_empty() {
        return Err(Error::EmptySupervision);
    }
    let logits = model.logits(g, fwd, &sup.rows)?;
    let loss = g.cross_entropy(logits, Arc::new(sup.targets.clone()))?;
    Ok((loss, logits))
}

/// Fraction of rows whose argmax logit (lowest index on ties) is the target.
pub fn accuracy(g: &Graph, logits: NodeId, targets: &[u32]) -> f64 {
    let lv = g.value(logits);
    let hits = (0..lv.rows())
        .filter(|&r| {
            let row = lv.row(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best as u32 == targets[r]
        })
        .count();
    hits as f64 / lv.rows().max(1) as f64
}
