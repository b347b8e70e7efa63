//! Scale-aware 2D rotary positions and per-scale embeddings.
//!
//! In normalized mode a token at `(i, j)` on an `h × w` grid is placed at
//! `(i·H/h, j·W/w)` on a fixed `H × W` canvas, so tokens covering the same
//! image location share rotation angles at every scale. Raw mode uses
//! `(i, j)` directly. Absolute mode applies no rotation and relies on a
//! learned per-position table held by the model.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numeric::ParamStore;
use crate::rng::Rng;
use crate::tokenizer::Schedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PosEncoding {
    Normalized,
    Raw,
    Absolute,
}

impl fmt::Display for PosEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PosEncoding::Normalized => "normalized",
            PosEncoding::Raw => "raw",
            PosEncoding::Absolute => "absolute",
        })
    }
}

impl FromStr for PosEncoding {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(PosEncoding::Normalized),
            "raw" => Ok(PosEncoding::Raw),
            "absolute" => Ok(PosEncoding::Absolute),
            _ => Err(Error::Config(format!(
                "pos_encoding must be normalized|raw|absolute, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub d_head: usize,
    pub freq_base: f64,
    pub mode: PosEncoding,
}

impl RopeConfig {
    pub fn new(d_head: usize, mode: PosEncoding) -> Self {
        RopeConfig {
            grid_h: 8,
            grid_w: 8,
            d_head,
            freq_base: 10_000.0,
            mode,
        }
    }

    pub fn validate(&self, schedule: &Schedule) -> Result<()> {
        if self.d_head == 0 || self.d_head % 4 != 0 {
            return Err(Error::Config(format!(
                "head dim {} must be a positive multiple of 4",
                self.d_head
            )));
        }
        if self.freq_base <= 0.0 {
            return Err(Error::Config("freq_base must be positive".into()));
        }
        let (h, w) = schedule.last();
        if self.mode == PosEncoding::Normalized && (self.grid_h < h || self.grid_w < w) {
            return Err(Error::Config(format!(
                "rope grid {}x{} smaller than latent {h}x{w}",
                self.grid_h, self.grid_w
            )));
        }
        Ok(())
    }

    /// Continuous position of 1-based cell `(i, j)` on an `h × w` grid.
    pub fn position(&self, i: usize, j: usize, h: usize, w: usize) -> Result<(f64, f64)> {
        if i == 0 || j == 0 || i > h || j > w {
            return Err(Error::CoordinateOutOfGrid { i, j, h, w });
        }
        Ok(match self.mode {
            PosEncoding::Normalized => (
                (i * self.grid_h) as f64 / h as f64,
                (j * self.grid_w) as f64 / w as f64,
            ),
            PosEncoding::Raw => (i as f64, j as f64),
            PosEncoding::Absolute => (0.0, 0.0),
        })
    }

    /// Angle for every channel pair of one head at a continuous position.
    /// The first half of the pairs encodes rows, the second half columns.
    pub fn angles_at(&self, px: f64, py: f64) -> Vec<f32> {
        let quarter = self.d_head / 4;
        let mut out = Vec::with_capacity(self.d_head / 2);
        for p in [px, py] {
            for t in 0..quarter {
                let freq = self.freq_base.powf(-4.0 * t as f64 / self.d_head as f64);
                out.push((p * freq) as f32);
            }
        }
        out
    }
}

/// Rotation angles for 1-based `(i, j)` on an `h × w` grid.
pub fn rope_angles(
    i: usize,
    j: usize,
    h: usize,
    w: usize,
    config: &RopeConfig,
) -> Result<Vec<f32>> {
    let (px, py) = config.position(i, j, h, w)?;
    Ok(config.angles_at(px, py))
}

/// Rotates channel pairs `(2t, 2t+1)` of a single head vector.
pub fn apply_rope(x: &[f32], angles: &[f32]) -> Result<Vec<f32>> {
    if x.len() != angles.len() * 2 {
        return Err(Error::shape(
            "apply_rope",
            format!("{} channels for {} angles", x.len(), angles.len()),
        ));
    }
    let mut out = x.to_vec();
    for (t, &a) in angles.iter().enumerate() {
        let (s, c) = (a.sin(), a.cos());
        let (u, v) = (x[2 * t], x[2 * t + 1]);
        out[2 * t] = u * c - v * s;
        out[2 * t + 1] = u * s + v * c;
    }
    Ok(out)
}

/// Angle rows for every token of every scale in sequence order
/// (`total_tokens × d_head/2`). All zeros in absolute mode.
pub fn schedule_angles(schedule: &Schedule, config: &RopeConfig) -> Result<Vec<Vec<f32>>> {
    let mut rows = Vec::with_capacity(schedule.total_tokens());
    for &(h, w) in schedule.sides() {
        for i in 1..=h {
            for j in 1..=w {
                rows.push(if config.mode == PosEncoding::Absolute {
                    vec![0.0; config.d_head / 2]
                } else {
                    rope_angles(i, j, h, w, config)?
                });
            }
        }
    }
    Ok(rows)
}

pub const SCALE_PARAM: &str = "scale_embed";

/// One learned vector per scale slot.
pub fn init_scale_embedding(params: &mut ParamStore, rng: &mut Rng, slots: usize, d: usize) {
    params.init_normal(rng, SCALE_PARAM, &[slots, d], 0.02);
}

/// The learned vector added to every token of scale `s` (0-based).
pub fn scale_term(params: &ParamStore, s: usize) -> Result<&[f32]> {
    let t = params.get(SCALE_PARAM)?;
    if s >= t.rows() {
        return Err(Error::ScaleOutOfRange {
            scale: s,
            scales: t.rows(),
        });
    }
    Ok(t.row(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn cfg(mode: PosEncoding) -> RopeConfig {
        RopeConfig::new(16, mode)
    }

    #[test]
    fn last_cell_maps_to_canvas_corner() {
        let c = cfg(PosEncoding::Normalized);
        let corner = c.angles_at(8.0, 8.0);
        for s in [1, 2, 3, 4, 6, 8] {
            assert_eq!(rope_angles(s, s, s, s, &c).unwrap(), corner);
        }
        assert_eq!(c.position(1, 1, 2, 2).unwrap(), (4.0, 4.0));
    }

    #[test]
    fn aligned_cells_share_angles_only_when_normalized() {
        let c = cfg(PosEncoding::Normalized);
        // (2,4) on 4x4 and (1,2) on 2x2 sit at the same normalized spot.
        assert_eq!(
            rope_angles(2, 4, 4, 4, &c).unwrap(),
            rope_angles(1, 2, 2, 2, &c).unwrap()
        );
        assert_eq!(
            rope_angles(3, 6, 6, 6, &c).unwrap(),
            rope_angles(4, 8, 8, 8, &c).unwrap()
        );
        let r = cfg(PosEncoding::Raw);
        assert_ne!(
            rope_angles(2, 4, 4, 4, &r).unwrap(),
            rope_angles(1, 2, 2, 2, &r).unwrap()
        );
    }

    #[test]
    fn out_of_grid_rejected() {
        let c = cfg(PosEncoding::Normalized);
        assert!(matches!(
            rope_angles(0, 1, 2, 2, &c),
            Err(Error::CoordinateOutOfGrid { .. })
        ));
        assert!(rope_angles(3, 1, 2, 2, &c).is_err());
    }

    #[test]
    fn rotation_basics() {
        let mut r = rng::seeded(1);
        let x = rng::normal_vec(&mut r, 16, 1.0);
        assert_eq!(apply_rope(&x, &[0.0; 8]).unwrap(), x);
        let a = rng::normal_vec(&mut r, 8, 3.0);
        let y = apply_rope(&x, &a).unwrap();
        let n = |v: &[f32]| v.iter().map(|&t| t * t).sum::<f32>().sqrt();
        assert!((n(&x) - n(&y)).abs() < 1e-5);
        assert!(apply_rope(&x, &a[..7]).is_err());
    }

    #[test]
    fn relative_property() {
        let c = cfg(PosEncoding::Normalized);
        let mut r = rng::seeded(2);
        let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f32>();
        for _ in 0..200 {
            let q = rng::normal_vec(&mut r, 16, 1.0);
            let k = rng::normal_vec(&mut r, 16, 1.0);
            let mut p = [0.0f64; 6];
            for v in &mut p {
                *v = rng::uniform_f64(&mut r) * 8.0;
            }
            let lhs = dot(
                &apply_rope(&q, &c.angles_at(p[0], p[1])).unwrap(),
                &apply_rope(&k, &c.angles_at(p[2], p[3])).unwrap(),
            );
            let rhs = dot(
                &apply_rope(&q, &c.angles_at(p[0] - p[2] + p[4], p[1] - p[3] + p[5])).unwrap(),
                &apply_rope(&k, &c.angles_at(p[4], p[5])).unwrap(),
            );
            assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn finer_grid_refines_coarser_centre() {
        // The four 2x2 cells surround the single 1x1 cell's canvas position
        // symmetrically when measured from cell centres.
        let c = cfg(PosEncoding::Normalized);
        let centre = |i: usize, h: usize| {
            (c.position(i, i, h, h).unwrap().0) - c.grid_h as f64 / (2.0 * h as f64)
        };
        assert_eq!(centre(1, 1), 4.0);
        assert_eq!((centre(1, 2) + centre(2, 2)) / 2.0, 4.0);
    }

    #[test]
    fn scale_terms_are_lookups() {
        let mut p = ParamStore::new();
        init_scale_embedding(&mut p, &mut rng::seeded(3), 4, 8);
        assert_eq!(scale_term(&p, 1).unwrap(), scale_term(&p, 1).unwrap());
        assert_ne!(scale_term(&p, 0).unwrap(), scale_term(&p, 1).unwrap());
        assert!(matches!(
            scale_term(&p, 4),
            Err(Error::ScaleOutOfRange { .. })
        ));
    }

    #[test]
    fn absolute_mode_is_identity() {
        let sched = Schedule::square(&[1, 2]).unwrap();
        let rows = schedule_angles(&sched, &cfg(PosEncoding::Absolute)).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().flatten().all(|&a| a == 0.0));
        assert!("bogus".parse::<PosEncoding>().is_err());
        assert_eq!("raw".parse::<PosEncoding>().unwrap().to_string(), "raw");
    }
}
