use crate::error::{Error, Result};
use crate::rope::{PosEncoding, RopeConfig};
use crate::text::M_MAX;
use crate::tokenizer::Schedule;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Image-token vocabulary size.
    pub vocab: usize,
    /// Width of the tokenizer's latent vectors.
    pub feat_dim: usize,
    pub text_vocab: usize,
    pub m_max: usize,
    pub pos_encoding: PosEncoding,
    pub qk_norm: bool,
    /// Capacity of the scale-embedding table; fixed so longer schedules
    /// reuse the same parameters.
    pub scale_slots: usize,
    /// Schedule the absolute position table is sized for.
    pub schedule: Schedule,
    /// Side of the last-scale training crop; 0 disables cropping.
    pub window_side: usize,
    pub rope_grid: usize,
}

impl ModelConfig {
    pub fn desk(vocab: usize, text_vocab: usize, schedule: Schedule) -> Self {
        ModelConfig {
            depth: 4,
            d_model: 128,
            heads: 4,
            mlp_ratio: 4,
            vocab,
            feat_dim: 16,
            text_vocab,
            m_max: M_MAX,
            pos_encoding: PosEncoding::Normalized,
            qk_norm: true,
            scale_slots: 8,
            schedule,
            window_side: 0,
            rope_grid: 8,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn rope(&self) -> RopeConfig {
        RopeConfig {
            grid_h: self.rope_grid,
            grid_w: self.rope_grid,
            ..RopeConfig::new(self.head_dim(), self.pos_encoding)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.d_model == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("depth, d_model, heads and mlp_ratio must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.vocab < 2 || self.feat_dim == 0 || self.text_vocab < 2 || self.m_max == 0 {
            return bad("vocabulary sizes, feat_dim and m_max must be positive".into());
        }
        self.check_schedule(&self.schedule)?;
        self.rope().validate(&self.schedule)
    }

    /// Whether this model can run on `schedule`.
    pub fn check_schedule(&self, schedule: &Schedule) -> Result<()> {
        if schedule.len() > self.scale_slots {
            return Err(Error::Config(format!(
                "schedule has {} scales but the model has {} scale slots",
                schedule.len(),
                self.scale_slots
            )));
        }
        if self.pos_encoding == PosEncoding::Absolute && !schedule.is_prefix_of(&self.schedule) {
            return Err(Error::Config(format!(
                "absolute position table covers {} only; cannot run {schedule}",
                self.schedule
            )));
        }
        if self.pos_encoding == PosEncoding::Normalized {
            let (h, w) = schedule.last();
            if h > self.rope_grid || w > self.rope_grid {
                return Err(Error::Config(format!(
                    "latent {h}x{w} exceeds rope grid {}",
                    self.rope_grid
                )));
            }
        }
        Ok(())
    }
}
