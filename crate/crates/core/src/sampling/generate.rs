//! Scale-by-scale generation of a token pyramid from a prompt.

use std::fmt;
use std::str::FromStr;

use super::causal::{causal_stable_sample, CausalParams};
use super::gumbel::{check_sigmas, gumbel_tokens, linear_sigmas};
use super::mask_head::MaskPredictor;
use super::topk::{confidence, top_k_top_p};
use super::trace::{SampleTrace, ScaleTrace};
use crate::error::{Error, Result};
use crate::model::{Layout, Model, SeqBatch};
use crate::numeric::Graph;
use crate::rng;
use crate::text::null_prompt;
use crate::tokenizer::{next_scale_input, Codebook, FeatureMap, Schedule, TokenPyramid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    TopK,
    Gumbel,
    Causal,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::TopK => "topk",
            SamplerKind::Gumbel => "gumbel",
            SamplerKind::Causal => "causal",
        })
    }
}

impl FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk" => Ok(SamplerKind::TopK),
            "gumbel" => Ok(SamplerKind::Gumbel),
            "causal" => Ok(SamplerKind::Causal),
            _ => Err(Error::Config(format!(
                "sampler must be topk|gumbel|causal, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub k: usize,
    pub p: f32,
    pub temperature: f32,
    /// First scale handled by the causal sampler. Earlier scales use top-k.
    pub s_min: usize,
    /// Mask-head iterations, aligned to the end of the schedule: the last
    /// entry is for the last scale. Scales further from the end than the
    /// list reaches reuse its first entry.
    pub steps: Vec<usize>,
    pub keep_ratio: f32,
    /// Gumbel noise per scale; linear 1 → 0 when `None`.
    pub sigmas: Option<Vec<f32>>,
    /// Guidance weight against the null prompt; 0 disables it. Logits become
    /// `cond + w · (cond − uncond)`.
    pub cfg_scale: f32,
}

impl SamplerConfig {
    pub fn topk(k: usize) -> Self {
        SamplerConfig {
            kind: SamplerKind::TopK,
            k,
            p: 1.0,
            temperature: 1.0,
            s_min: 0,
            steps: vec![4, 6, 8],
            keep_ratio: 0.5,
            sigmas: None,
            cfg_scale: 0.0,
        }
    }

    pub fn gumbel() -> Self {
        SamplerConfig {
            kind: SamplerKind::Gumbel,
            ..Self::topk(1)
        }
    }

    /// Causal sampling on the last two scales of an `scales`-long schedule.
    pub fn causal(k: usize, scales: usize) -> Self {
        SamplerConfig {
            kind: SamplerKind::Causal,
            s_min: scales.saturating_sub(2),
            ..Self::topk(k)
        }
    }

    pub fn validate(&self, vocab: usize, scales: usize) -> Result<()> {
        if self.k < 1 || self.k > vocab {
            return Err(Error::Config(format!(
                "k = {} outside [1, {vocab}]",
                self.k
            )));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Config(format!("p = {} outside (0, 1]", self.p)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.keep_ratio) {
            return Err(Error::Config(format!(
                "keep_ratio {} outside [0, 1]",
                self.keep_ratio
            )));
        }
        if self.steps.is_empty() || self.steps.contains(&0) {
            return Err(Error::Config("steps per scale must be at least 1".into()));
        }
        if self.steps.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(
                "steps per scale must be nondecreasing".into(),
            ));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::Config("cfg_scale must be finite".into()));
        }
        if let Some(s) = &self.sigmas {
            check_sigmas(s, scales)?;
        }
        Ok(())
    }

    /// Mask-head iterations at scale `s` of `scales`.
    pub fn steps_for(&self, s: usize, scales: usize) -> usize {
        let back = scales - 1 - s;
        let n = self.steps.len();
        if back < n {
            self.steps[n - 1 - back]
        } else {
            self.steps[0]
        }
    }

    fn causal_params(&self, steps: usize) -> CausalParams {
        CausalParams {
            k: self.k,
            p: self.p,
            temperature: self.temperature,
            keep_ratio: self.keep_ratio,
            steps,
        }
    }
}

/// A trained backbone with its codebook and, for causal sampling, a mask head.
pub struct Generator<'a> {
    pub model: &'a Model,
    pub codebook: &'a Codebook,
    pub mask_head: Option<&'a dyn MaskPredictor>,
}

/// Backbone output for the tokens of one scale.
struct ScaleOutput {
    logits: Vec<f32>,
    phi: Vec<f32>,
}

impl<'a> Generator<'a> {
    pub fn new(
        model: &'a Model,
        codebook: &'a Codebook,
        mask_head: Option<&'a dyn MaskPredictor>,
    ) -> Self {
        Generator {
            model,
            codebook,
            mask_head,
        }
    }

    /// Seed of the stream used for scale `s`.
    pub fn scale_seed(seed: u64, s: usize) -> u64 {
        rng::derive(seed, s as u64)
    }

    pub fn generate(
        &self,
        prompt: &[u32],
        schedule: &Schedule,
        cfg: &SamplerConfig,
        seed: u64,
    ) -> Result<(TokenPyramid, SampleTrace)> {
        self.generate_forced(prompt, schedule, cfg, seed, &[])
    }

    /// Like [`Self::generate`] but scales `0..forced.len()` take the given
    /// tokens instead of being sampled.
    pub fn generate_forced(
        &self,
        prompt: &[u32],
        schedule: &Schedule,
        cfg: &SamplerConfig,
        seed: u64,
        forced: &[Vec<u32>],
    ) -> Result<(TokenPyramid, SampleTrace)> {
        let vocab = self.model.config.vocab;
        let n = schedule.len();
        cfg.validate(vocab, n)?;
        if self.codebook.size() != vocab {
            return Err(Error::Config(format!(
                "codebook has {} entries, model expects {vocab}",
                self.codebook.size()
            )));
        }
        if forced.len() > n {
            return Err(Error::Schedule(format!(
                "{} forced scales for a {n}-scale schedule",
                forced.len()
            )));
        }
        let sigmas = cfg.sigmas.clone().unwrap_or_else(|| linear_sigmas(n));
        let mut pyramid = TokenPyramid {
            scales: Vec::with_capacity(n),
        };
        let mut inputs: Vec<FeatureMap> = Vec::with_capacity(n.saturating_sub(1));
        let mut trace = SampleTrace::default();
        for s in 0..n {
            if s > 0 {
                inputs.push(next_scale_input(&pyramid, self.codebook, schedule, s)?);
            }
            let (h, w) = schedule.side(s);
            if let Some(tokens) = forced.get(s) {
                if tokens.len() != h * w {
                    return Err(Error::shape(
                        "generate",
                        format!(
                            "forced scale {s} has {} tokens, needs {}",
                            tokens.len(),
                            h * w
                        ),
                    ));
                }
                if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab) {
                    return Err(Error::TokenOutOfRange {
                        token: t as usize,
                        vocab,
                    });
                }
                pyramid.scales.push(tokens.clone());
                continue;
            }
            let out = self.scale_output(prompt, schedule, s, &inputs, cfg.cfg_scale)?;
            let scale_seed = Self::scale_seed(seed, s);
            let r = &mut rng::seeded(scale_seed);
            let (tokens, conf, iterations) = match cfg.kind {
                SamplerKind::Causal if s >= cfg.s_min => {
                    let head = self.mask_head.ok_or(Error::UntrainedMaskHead)?;
                    let res = causal_stable_sample(
                        &out.logits,
                        &out.phi,
                        h,
                        w,
                        head,
                        &cfg.causal_params(cfg.steps_for(s, n)),
                        r,
                    )?;
                    (res.tokens, res.confidence, res.iterations)
                }
                SamplerKind::Gumbel => {
                    let tokens = gumbel_tokens(&out.logits, vocab, sigmas[s], r)?;
                    let conf = out
                        .logits
                        .chunks(vocab)
                        .zip(&tokens)
                        .map(|(row, &t)| confidence(row, t as usize, 1.0))
                        .collect();
                    (tokens, conf, 0)
                }
                _ => {
                    let mut tokens = Vec::with_capacity(h * w);
                    let mut conf = Vec::with_capacity(h * w);
                    for row in out.logits.chunks(vocab) {
                        let t = top_k_top_p(row, cfg.k, cfg.p, cfg.temperature, r)?;
                        tokens.push(t as u32);
                        conf.push(confidence(row, t, cfg.temperature));
                    }
                    (tokens, conf, 0)
                }
            };
            trace.scales.push(ScaleTrace {
                scale: s,
                seed: scale_seed,
                tokens: tokens.clone(),
                confidence: conf.iter().map(|&c| c as f32).collect(),
                iterations,
            });
            pyramid.scales.push(tokens);
        }
        Ok((pyramid, trace))
    }

    /// One forward over scales `0..=s`; returns the logits and final-norm
    /// features of scale `s`.
    fn scale_output(
        &self,
        prompt: &[u32],
        schedule: &Schedule,
        s: usize,
        inputs: &[FeatureMap],
        cfg_scale: f32,
    ) -> Result<ScaleOutput> {
        let layout = Layout::prefix(schedule, s + 1);
        let (start, len) = (layout.offsets[s], layout.lens[s]);
        let guided = cfg_scale != 0.0;
        let (prompts, layouts, maps): (Vec<Vec<u32>>, Vec<Layout>, Vec<&[FeatureMap]>) = if guided {
            (
                vec![prompt.to_vec(), null_prompt()],
                vec![layout.clone(), layout],
                vec![inputs, inputs],
            )
        } else {
            (vec![prompt.to_vec()], vec![layout], vec![inputs])
        };
        let batch = SeqBatch::new(prompts, layouts, &maps)?;
        let mut g = Graph::new();
        let fwd = self.model.forward(&mut g, &batch)?;
        let seq = fwd.seq_len;
        let rows: Vec<usize> = (0..batch.batch())
            .flat_map(|b| (start..start + len).map(move |p| b * seq + p))
            .collect();
        let logits = self.model.logits(&mut g, &fwd, &rows)?;
        let hidden = g.value(fwd.hidden);
        let phi = rows[..len]
            .iter()
            .flat_map(|&r| hidden.row(r).iter().copied())
            .collect();
        let all = g.value(logits).data();
        let half = len * self.model.config.vocab;
        let logits = if guided {
            all[..half]
                .iter()
                .zip(&all[half..])
                .map(|(&c, &u)| c + cfg_scale * (c - u))
                .collect()
        } else {
            all.to_vec()
        };
        Ok(ScaleOutput { logits, phi })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_align_to_schedule_end() {
        let c = SamplerConfig::causal(8, 6);
        assert_eq!(c.s_min, 4);
        assert_eq!(
            (
                c.steps_for(5, 6),
                c.steps_for(4, 6),
                c.steps_for(3, 6),
                c.steps_for(0, 6)
            ),
            (8, 6, 4, 4)
        );
    }

    #[test]
    fn validation() {
        assert!(SamplerConfig::topk(0).validate(16, 3).is_err());
        assert!(SamplerConfig::topk(17).validate(16, 3).is_err());
        assert!(SamplerConfig::topk(16).validate(16, 3).is_ok());
        let mut c = SamplerConfig::causal(4, 3);
        c.steps = vec![6, 4];
        assert!(c.validate(16, 3).is_err());
        c.steps = vec![0];
        assert!(c.validate(16, 3).is_err());
        let mut g = SamplerConfig::gumbel();
        g.sigmas = Some(vec![1.0, -1.0, 0.0]);
        assert!(g.validate(16, 3).is_err());
        assert_eq!(
            "causal".parse::<SamplerKind>().unwrap(),
            SamplerKind::Causal
        );
    }
}
