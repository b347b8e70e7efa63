//! Flattened token sequences: `[start] ⧺ scale 1 ⧺ … ⧺ scale S`.

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tokenizer::Schedule;

/// A token position: scale and 0-based cell within that scale's grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Cell {
    pub s: usize,
    pub i: usize,
    pub j: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub schedule: Schedule,
    /// Tokens in sequence order after the start token.
    pub cells: Vec<Cell>,
    /// Start offset of each scale in the sequence (start token at 0).
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
}

impl Layout {
    fn from_cells(schedule: Schedule, cells: Vec<Cell>) -> Self {
        let n = schedule.len();
        let mut lens = vec![0; n];
        for c in &cells {
            lens[c.s] += 1;
        }
        let mut offsets = Vec::with_capacity(n);
        let mut at = 1;
        for &l in &lens {
            offsets.push(at);
            at += l;
        }
        Layout {
            schedule,
            cells,
            offsets,
            lens,
        }
    }

    pub fn full(schedule: &Schedule) -> Self {
        Self::prefix(schedule, schedule.len())
    }

    /// The first `scales` scales of `schedule`.
    pub fn prefix(schedule: &Schedule, scales: usize) -> Self {
        let mut cells = Vec::new();
        for s in 0..scales.min(schedule.len()) {
            let (h, w) = schedule.side(s);
            for i in 0..h {
                for j in 0..w {
                    cells.push(Cell { s, i, j });
                }
            }
        }
        Self::from_cells(schedule.clone(), cells)
    }

    /// Full layout whose last scale keeps only the cells of `window`.
    pub fn windowed(schedule: &Schedule, window: &Window) -> Self {
        let last = schedule.len() - 1;
        let cells = Self::full(schedule)
            .cells
            .into_iter()
            .filter(|c| c.s != last || window.last.contains(c.i, c.j))
            .collect();
        Self::from_cells(schedule.clone(), cells)
    }

    /// Sequence length including the start token.
    pub fn seq_len(&self) -> usize {
        1 + self.cells.len()
    }

    pub fn scales(&self) -> usize {
        self.offsets.len()
    }

    /// Scale of sequence position `p`; `None` for the start token.
    pub fn scale_of(&self, p: usize) -> Option<usize> {
        (p > 0).then(|| self.cells[p - 1].s)
    }

    /// Whether the row at `p` may attend to the column at `q`.
    pub fn allows(&self, p: usize, q: usize) -> bool {
        match (self.scale_of(p), self.scale_of(q)) {
            (_, None) => true,
            (None, Some(_)) => false,
            (Some(a), Some(b)) => b <= a,
        }
    }

    /// Row-major `seq_len × seq_len` block-causal attention pattern.
    pub fn block_causal_mask(&self) -> Vec<bool> {
        let n = self.seq_len();
        let mut m = vec![false; n * n];
        for p in 0..n {
            for q in 0..n {
                m[p * n + q] = self.allows(p, q);
            }
        }
        m
    }

    /// Layouts share geometry when their masks and scale spans coincide.
    pub fn same_structure(&self, other: &Layout) -> bool {
        self.lens == other.lens
    }

    pub(crate) fn check_structure(layouts: &[Layout]) -> Result<()> {
        match layouts.split_first() {
            None => Err(Error::shape("layout", "empty batch")),
            Some((first, rest)) if rest.iter().any(|l| !l.same_structure(first)) => Err(
                Error::shape("layout", "batch layouts differ in scale lengths"),
            ),
            _ => Ok(()),
        }
    }
}

/// Axis-aligned crop of a grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

impl Crop {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        i >= self.top && i < self.top + self.side && j >= self.left && j < self.left + self.side
    }
}

/// Training crops for the last two scales.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub last: Crop,
    pub second: Option<Crop>,
}

impl Window {
    /// Random `side × side` crop of the last scale and the aligned crop of
    /// the scale before it (side scaled to that grid, rounded up).
    pub fn sample(schedule: &Schedule, side: usize, rng: &mut Rng) -> Self {
        let n = schedule.last().0;
        let side = side.clamp(1, n);
        let top = rng::below(rng, n - side + 1);
        let left = rng::below(rng, n - side + 1);
        Self::at(schedule, side, top, left)
    }

    pub fn at(schedule: &Schedule, side: usize, top: usize, left: usize) -> Self {
        let n = schedule.last().0;
        let last = Crop { top, left, side };
        let second = (schedule.len() >= 2).then(|| {
            let m = schedule.side(schedule.len() - 2).0;
            let ms = (side * m).div_ceil(n).clamp(1, m);
            let place = |x: usize| ((x * m + n / 2) / n).min(m - ms);
            Crop {
                top: place(top),
                left: place(left),
                side: ms,
            }
        });
        Window { last, second }
    }

    /// Whether a window of this side crops nothing.
    pub fn is_full(schedule: &Schedule, side: usize) -> bool {
        side == 0 || side >= schedule.last().0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lengths_and_offsets() {
        let sched = Schedule::square(&[1, 2]).unwrap();
        let l = Layout::full(&sched);
        assert_eq!(l.seq_len(), 6);
        assert_eq!(l.offsets, vec![1, 2]);
        assert_eq!(
            Layout::full(&Schedule::square(&[1, 2, 3, 4, 6, 8]).unwrap()).seq_len(),
            131
        );
    }

    #[test]
    fn mask_rows() {
        let sched = Schedule::square(&[1, 2]).unwrap();
        let l = Layout::full(&sched);
        let m = l.block_causal_mask();
        assert_eq!(&m[6..12], &[true, true, false, false, false, false]);
        for p in 2..6 {
            assert!(m[p * 6..p * 6 + 6].iter().all(|&x| x));
        }
        assert_eq!(&m[0..6], &[true, false, false, false, false, false]);
    }

    #[test]
    fn windowed_drops_last_scale_cells() {
        let sched = Schedule::square(&[1, 2, 3, 4, 6, 8]).unwrap();
        let w = Window::at(&sched, 4, 4, 2);
        assert_eq!(
            w.second,
            Some(Crop {
                top: 3,
                left: 2,
                side: 3
            })
        );
        let l = Layout::windowed(&sched, &w);
        assert_eq!(l.lens, vec![1, 4, 9, 16, 36, 16]);
        assert!(l
            .cells
            .iter()
            .filter(|c| c.s == 5)
            .all(|c| w.last.contains(c.i, c.j)));
        let full = Window::at(&sched, 8, 0, 0);
        assert_eq!(Layout::windowed(&sched, &full), Layout::full(&sched));
    }
}
