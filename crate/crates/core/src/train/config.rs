//! Training configuration and its `key = value` file form.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rope::PosEncoding;
use crate::tokenizer::Schedule;

/// Latent cells per image side come from 4×4 pixel patches.
pub const PATCH: usize = 4;

/// Geometric side sequence used when a stage names no schedule.
pub fn default_schedule(latent: usize) -> Result<Schedule> {
    let mut sides: Vec<usize> = [1, 2, 3, 4, 6, 8, 12, 16, 24, 32]
        .into_iter()
        .filter(|&s| s < latent)
        .collect();
    sides.push(latent);
    Schedule::square(&sides)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub resolution: usize,
    pub schedule: Schedule,
    pub batch: usize,
    pub lr: f32,
    pub steps: usize,
}

impl Stage {
    pub fn new(resolution: usize, batch: usize, lr: f32, steps: usize) -> Result<Self> {
        if resolution % PATCH != 0 {
            return Err(Error::NotDivisible {
                resolution,
                latent: resolution / PATCH,
            });
        }
        Ok(Stage {
            resolution,
            schedule: default_schedule(resolution / PATCH)?,
            batch,
            lr,
            steps,
        })
    }

    pub fn latent(&self) -> usize {
        self.resolution / PATCH
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "resolution={} schedule={} batch={} lr={} steps={}",
            self.resolution, self.schedule, self.batch, self.lr, self.steps
        )
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (mut resolution, mut schedule, mut batch, mut lr, mut steps) =
            (None, None, None, None, None);
        for part in s.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("stage field {part:?} is not key=value")))?;
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Config(format!("stage {k}: bad number {v:?}")))
            };
            match k {
                "resolution" => resolution = Some(num(v)?),
                "schedule" => schedule = Some(v.parse::<Schedule>()?),
                "batch" => batch = Some(num(v)?),
                "lr" => {
                    lr = Some(
                        v.parse::<f32>()
                            .map_err(|_| Error::Config(format!("stage lr: bad number {v:?}")))?,
                    )
                }
                "steps" => steps = Some(num(v)?),
                _ => return Err(Error::Config(format!("unknown stage field {k:?}"))),
            }
        }
        let resolution =
            resolution.ok_or_else(|| Error::Config("stage needs resolution=".into()))?;
        let mut stage = Stage::new(
            resolution,
            batch.ok_or_else(|| Error::Config("stage needs batch=".into()))?,
            lr.unwrap_or(1e-4),
            steps.ok_or_else(|| Error::Config("stage needs steps=".into()))?,
        )?;
        if let Some(s) = schedule {
            stage.schedule = s;
        }
        Ok(stage)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Image-token vocabulary size V.
    pub vocab: usize,
    /// Latent vector width d.
    pub feat_dim: usize,
    pub pos_encoding: PosEncoding,
    pub window_side: usize,
    /// Mask-head phase on the frozen backbone; 0 skips it.
    pub mask_steps: usize,
    pub mask_batch: usize,
    pub mask_lr: f32,
    /// Images used to fit the codebook.
    pub codebook_images: usize,
    /// Probability of replacing a training caption with the null prompt.
    pub null_prob: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            stages: vec![
                Stage::new(16, 32, 1e-4, 1000).expect("valid default stage"),
                Stage::new(32, 16, 1e-4, 1000).expect("valid default stage"),
            ],
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            depth: 4,
            d_model: 128,
            heads: 4,
            vocab: 256,
            feat_dim: 16,
            pos_encoding: PosEncoding::Normalized,
            window_side: 0,
            mask_steps: 300,
            mask_batch: 16,
            mask_lr: 1e-3,
            codebook_images: 1000,
            null_prob: 0.1,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        for (k, s) in self.stages.iter().enumerate() {
            if s.batch == 0 || !(s.lr > 0.0) {
                return bad(format!("stage {k}: batch and lr must be positive"));
            }
            if s.schedule.last() != (s.latent(), s.latent()) {
                return bad(format!(
                    "stage {k}: schedule {} does not end at latent {}",
                    s.schedule,
                    s.latent()
                ));
            }
            if k > 0 && s.resolution <= self.stages[k - 1].resolution {
                return bad("stage resolutions must be strictly increasing".into());
            }
        }
        if self.depth == 0
            || self.d_model == 0
            || self.heads == 0
            || self.vocab < 2
            || self.feat_dim == 0
        {
            return bad("model sizes must be positive (vocab ≥ 2)".into());
        }
        if self.mask_steps > 0 && (self.mask_batch == 0 || !(self.mask_lr > 0.0)) {
            return bad("mask_batch and mask_lr must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.null_prob) {
            return bad("null_prob must lie in [0, 1]".into());
        }
        if self.codebook_images == 0 {
            return bad("codebook_images must be positive".into());
        }
        if !(self.weight_decay >= 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return bad("optimizer settings out of range".into());
        }
        Ok(())
    }

    pub fn last_stage(&self) -> &Stage {
        self.stages.last().expect("validated config has stages")
    }

    /// Parses `key = value` lines; `#` starts a comment. Each `stage` line
    /// appends a stage; when any is given the defaults are replaced.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut stages = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "seed" => cfg.seed = parse(k, v)?,
                "stage" => stages.push(v.parse()?),
                "weight_decay" => cfg.weight_decay = parse(k, v)?,
                "beta1" => cfg.beta1 = parse(k, v)?,
                "beta2" => cfg.beta2 = parse(k, v)?,
                "depth" => cfg.depth = parse(k, v)?,
                "d_model" => cfg.d_model = parse(k, v)?,
                "heads" => cfg.heads = parse(k, v)?,
                "vocab" => cfg.vocab = parse(k, v)?,
                "feat_dim" => cfg.feat_dim = parse(k, v)?,
                "pos_encoding" => cfg.pos_encoding = v.parse()?,
                "window_side" => cfg.window_side = parse(k, v)?,
                "mask_steps" => cfg.mask_steps = parse(k, v)?,
                "mask_batch" => cfg.mask_batch = parse(k, v)?,
                "mask_lr" => cfg.mask_lr = parse(k, v)?,
                "codebook_images" => cfg.codebook_images = parse(k, v)?,
                "null_prob" => cfg.null_prob = parse(k, v)?,
                _ => return Err(Error::Config(format!("line {}: unknown key {k:?}", n + 1))),
            }
        }
        if !stages.is_empty() {
            cfg.stages = stages;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Ordered `(key, value)` pairs; `stage` repeats once per stage.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut e: Vec<(String, String)> = vec![("seed".into(), self.seed.to_string())];
        e.extend(
            self.stages
                .iter()
                .map(|s| ("stage".to_string(), s.to_string())),
        );
        let kv = [
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("depth", self.depth.to_string()),
            ("d_model", self.d_model.to_string()),
            ("heads", self.heads.to_string()),
            ("vocab", self.vocab.to_string()),
            ("feat_dim", self.feat_dim.to_string()),
            ("pos_encoding", self.pos_encoding.to_string()),
            ("window_side", self.window_side.to_string()),
            ("mask_steps", self.mask_steps.to_string()),
            ("mask_batch", self.mask_batch.to_string()),
            ("mask_lr", self.mask_lr.to_string()),
            ("codebook_images", self.codebook_images.to_string()),
            ("null_prob", self.null_prob.to_string()),
        ];
        e.extend(kv.into_iter().map(|(k, v)| (k.to_string(), v)));
        e
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedules() {
        assert_eq!(
            default_schedule(8).unwrap().to_string(),
            "1x1,2x2,3x3,4x4,6x6,8x8"
        );
        assert_eq!(default_schedule(4).unwrap().to_string(), "1x1,2x2,3x3,4x4");
        assert_eq!(default_schedule(1).unwrap().to_string(), "1x1");
    }

    #[test]
    fn text_round_trip() {
        let text = "# desk run\nseed = 7\nstage = resolution=16 batch=8 steps=10\nstage = resolution=32 schedule=1x1,2x2,4x4,8x8 batch=4 lr=0.001 steps=5  # fine\ndepth = 2\npos_encoding = raw\n";
        let c = TrainConfig::parse(text).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.stages.len(), 2);
        assert_eq!(c.stages[1].schedule.to_string(), "1x1,2x2,4x4,8x8");
        assert_eq!(c.stages[0].lr, 1e-4);
        assert_eq!(c.pos_encoding, PosEncoding::Raw);
        assert_eq!(TrainConfig::parse(&c.to_string()).unwrap(), c);
    }

    #[test]
    fn invalid_configs() {
        assert!(TrainConfig::parse("bogus = 1").is_err());
        assert!(TrainConfig::parse("depth 2").is_err());
        assert!(TrainConfig::parse(
            "stage = resolution=32 batch=4 steps=1\nstage = resolution=16 batch=4 steps=1"
        )
        .is_err());
        assert!(TrainConfig::parse("stage = resolution=30 batch=4 steps=1").is_err());
        assert!(
            TrainConfig::parse("stage = resolution=32 schedule=1x1,2x2 batch=4 steps=1").is_err()
        );
        assert!(TrainConfig::parse("stage = resolution=32 batch=0 steps=1").is_err());
        assert!(TrainConfig::parse("vocab = many").is_err());
    }
}
