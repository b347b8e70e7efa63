//! Staged teacher-forcing training, resolution fine-tuning and the
//! mask-head phase.

use std::time::Instant;

use super::checkpoint::Checkpoint;
use super::config::{Stage, TrainConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{
    accuracy, teacher_forcing_loss, Layout, Model, ModelConfig, SeqBatch, Supervision, Window,
};
use crate::numeric::{softmax_cross_entropy, AdamW, AdamWConfig, Graph, ParamStore, Tensor};
use crate::rng::{self, Rng};
use crate::rope::PosEncoding;
use crate::sampling::{MaskHead, MaskHeadConfig};
use crate::text::{null_prompt, Vocabulary};
use crate::tokenizer::{
    all_next_scale_inputs, Codebook, FeatureMap, Projection, Schedule, TokenPyramid, Tokenizer,
};

/// One optimizer step's statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub stage: usize,
    pub step: usize,
    pub loss: f32,
    pub accuracy: f32,
    /// Mean CE over the supervised last-scale rows of the batch.
    pub last_scale_loss: f32,
}

impl StepLog {
    fn to_meta(self) -> String {
        format!(
            "{} {} {} {} {}",
            self.stage, self.step, self.loss, self.accuracy, self.last_scale_loss
        )
    }

    fn from_meta(s: &str) -> Result<Self> {
        let f: Vec<&str> = s.split(' ').collect();
        let bad = || Error::Format(format!("bad log entry {s:?}"));
        if f.len() != 5 {
            return Err(bad());
        }
        Ok(StepLog {
            stage: f[0].parse().map_err(|_| bad())?,
            step: f[1].parse().map_err(|_| bad())?,
            loss: f[2].parse().map_err(|_| bad())?,
            accuracy: f[3].parse().map_err(|_| bad())?,
            last_scale_loss: f[4].parse().map_err(|_| bad())?,
        })
    }
}

/// A dataset tokenized for one schedule.
pub struct Encoded {
    pub schedule: Schedule,
    pub prompts: Vec<Vec<u32>>,
    pub pyramids: Vec<TokenPyramid>,
    pub inputs: Vec<Vec<FeatureMap>>,
}

impl Encoded {
    pub fn new(
        tokenizer: &Tokenizer,
        vocab: &Vocabulary,
        images: &[Image],
        captions: &[String],
        stage: &Stage,
    ) -> Result<Self> {
        if images.len() != captions.len() || images.is_empty() {
            return Err(Error::shape(
                "dataset",
                "need matching, non-empty image and caption lists",
            ));
        }
        let mut out = Encoded {
            schedule: stage.schedule.clone(),
            prompts: Vec::with_capacity(images.len()),
            pyramids: Vec::with_capacity(images.len()),
            inputs: Vec::with_capacity(images.len()),
        };
        for (img, cap) in images.iter().zip(captions) {
            let img = resize(img, stage.resolution)?;
            let enc = tokenizer.encode_image(&img, &stage.schedule)?;
            out.inputs.push(all_next_scale_inputs(
                &enc.pyramid,
                &tokenizer.codebook,
                &stage.schedule,
            )?);
            out.pyramids.push(enc.pyramid);
            out.prompts.push(vocab.tokenize(cap)?);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

fn resize(img: &Image, resolution: usize) -> Result<Image> {
    if img.side() < resolution {
        return Err(Error::Config(format!(
            "dataset resolution {} below stage resolution {resolution}",
            img.side()
        )));
    }
    img.downsample(resolution)
}

/// Everything a run produces.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub vocabulary: Vocabulary,
    pub tokenizer: Tokenizer,
    pub model: Model,
    pub mask_head: Option<MaskHead>,
    pub history: Vec<StepLog>,
    pub mask_history: Vec<f32>,
}

/// Training throughput of one stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTiming {
    pub seconds: f64,
    /// Full-pyramid image tokens (Σ h_s·w_s per sample) processed per second.
    pub tokens_per_sec: f64,
    /// Tokens that entered the loss per second.
    pub supervised_per_sec: f64,
}

pub fn model_config(config: &TrainConfig, text_vocab: usize) -> ModelConfig {
    let mut m = ModelConfig::desk(
        config.vocab,
        text_vocab,
        config.last_stage().schedule.clone(),
    );
    m.depth = config.depth;
    m.d_model = config.d_model;
    m.heads = config.heads;
    m.feat_dim = config.feat_dim;
    m.pos_encoding = config.pos_encoding;
    m.window_side = config.window_side;
    m
}

/// Fits the codebook on the first `codebook_images` images at every stage.
pub fn fit_tokenizer(config: &TrainConfig, images: &[Image]) -> Result<Tokenizer> {
    let n = config.codebook_images.min(images.len());
    let resized: Vec<Vec<Image>> = config
        .stages
        .iter()
        .map(|s| {
            images[..n]
                .iter()
                .map(|i| resize(i, s.resolution))
                .collect()
        })
        .collect::<Result<_>>()?;
    let sets: Vec<(&[Image], &Schedule)> = resized
        .iter()
        .zip(&config.stages)
        .map(|(i, s)| (i.as_slice(), &s.schedule))
        .collect();
    Tokenizer::fit(
        &sets,
        config.vocab,
        config.feat_dim,
        rng::derive(config.seed, 1),
    )
}

impl TrainedModel {
    /// Fresh parameters for `config` around an existing tokenizer.
    pub fn init(config: TrainConfig, tokenizer: Tokenizer) -> Result<Self> {
        config.validate()?;
        if tokenizer.vocab() != config.vocab || tokenizer.codebook.d != config.feat_dim {
            return Err(Error::Config(
                "tokenizer does not match vocab/feat_dim".into(),
            ));
        }
        let vocabulary = Vocabulary::toy();
        let model = Model::new(
            model_config(&config, vocabulary.len()),
            rng::derive(config.seed, 2),
        )?;
        Ok(TrainedModel {
            config,
            vocabulary,
            tokenizer,
            model,
            mask_head: None,
            history: Vec::new(),
            mask_history: Vec::new(),
        })
    }

    pub fn encode(&self, images: &[Image], captions: &[String], stage: &Stage) -> Result<Encoded> {
        Encoded::new(&self.tokenizer, &self.vocabulary, images, captions, stage)
    }

    /// Runs stage `k` of the config on `data` (encoded for that stage).
    pub fn run_stage(&mut self, k: usize, data: &Encoded) -> Result<StageTiming> {
        let stage = self.config.stages[k].clone();
        self.optimize(k, &stage, data)
    }

    fn window_for(&self, schedule: &Schedule) -> Option<usize> {
        let side = self.config.window_side;
        (!Window::is_full(schedule, side)).then_some(side)
    }

    fn optimize(&mut self, k: usize, stage: &Stage, data: &Encoded) -> Result<StageTiming> {
        if data.schedule != stage.schedule {
            return Err(Error::Schedule(format!(
                "data encoded for {} but stage uses {}",
                data.schedule, stage.schedule
            )));
        }
        self.model.config.check_schedule(&stage.schedule)?;
        let mut opt = AdamW::new(AdamWConfig {
            lr: stage.lr,
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            weight_decay: self.config.weight_decay,
            ..AdamWConfig::default()
        });
        let r = &mut rng::seeded(rng::derive(self.config.seed, 1000 + k as u64));
        let window = self.window_for(&stage.schedule);
        let last = stage.schedule.len() - 1;
        let start = Instant::now();
        let mut supervised = 0usize;
        for step in 0..stage.steps {
            let idx: Vec<usize> = (0..stage.batch)
                .map(|_| rng::below(r, data.len()))
                .collect();
            let drop: Vec<bool> = idx
                .iter()
                .map(|_| rng::uniform(r) < self.config.null_prob)
                .collect();
            let windows: Option<Vec<Window>> = window.map(|side| {
                idx.iter()
                    .map(|_| Window::sample(&stage.schedule, side, r))
                    .collect()
            });
            let nan = |e: Error| match e {
                Error::NonFinite { .. } => Error::NanLoss { stage: k, step },
                e => e,
            };
            let (log, grads) = self
                .loss_and_grads(data, &idx, &drop, windows.as_deref(), last)
                .map_err(nan)?;
            if !log.0.is_finite() {
                return Err(Error::NanLoss { stage: k, step });
            }
            supervised += log.3;
            opt.step(&mut self.model.params, &grads)?;
            self.history.push(StepLog {
                stage: k,
                step,
                loss: log.0,
                accuracy: log.1,
                last_scale_loss: log.2,
            });
        }
        let seconds = start.elapsed().as_secs_f64();
        let tokens = (stage.steps * stage.batch * stage.schedule.total_tokens()) as f64;
        Ok(StageTiming {
            seconds,
            tokens_per_sec: tokens / seconds.max(1e-9),
            supervised_per_sec: supervised as f64 / seconds.max(1e-9),
        })
    }

    /// Returns (loss, accuracy, last-scale loss, supervised rows) and the
    /// parameter gradients for one batch.
    fn loss_and_grads(
        &self,
        data: &Encoded,
        idx: &[usize],
        drop: &[bool],
        windows: Option<&[Window]>,
        last: usize,
    ) -> Result<((f32, f32, f32, usize), crate::numeric::Gradients<f32>)> {
        let sched = &data.schedule;
        let layouts: Vec<Layout> = match windows {
            Some(w) => w.iter().map(|w| Layout::windowed(sched, w)).collect(),
            None => vec![Layout::full(sched); idx.len()],
        };
        let prompts = idx
            .iter()
            .zip(drop)
            .map(|(&i, &d)| {
                if d {
                    null_prompt()
                } else {
                    data.prompts[i].clone()
                }
            })
            .collect();
        let inputs: Vec<&[FeatureMap]> = idx.iter().map(|&i| data.inputs[i].as_slice()).collect();
        let pyramids: Vec<&TokenPyramid> = idx.iter().map(|&i| &data.pyramids[i]).collect();
        let batch = SeqBatch::new(prompts, layouts.clone(), &inputs)?;
        let mut g = Graph::new();
        let fwd = self.model.forward(&mut g, &batch)?;
        let sup = Supervision::new(&layouts, &pyramids, windows)?;
        let (loss, logits) = teacher_forcing_loss(&self.model, &mut g, &fwd, &sup)?;
        let acc = accuracy(&g, logits, &sup.targets) as f32;
        let last_loss = scale_loss(g.value(logits), &sup, last)?;
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss)?;
        Ok(((value, acc, last_loss, sup.len()), grads))
    }

    /// Continues training on a longer schedule. Absolute position tables
    /// cannot grow, so that mode is rejected.
    pub fn finetune_resolution(&mut self, stage: Stage, data: &Encoded) -> Result<StageTiming> {
        let old = self.config.last_stage().schedule.clone();
        if self.config.pos_encoding == PosEncoding::Absolute && stage.schedule != old {
            return Err(Error::Config(format!(
                "absolute position embeddings exist only for {old}; cannot fine-tune at {}",
                stage.schedule
            )));
        }
        if !old.extends_to(&stage.schedule) {
            return Err(Error::Schedule(format!(
                "{} does not extend {old}",
                stage.schedule
            )));
        }
        self.model.config.check_schedule(&stage.schedule)?;
        self.config.stages.push(stage.clone());
        self.config.validate()?;
        self.model.config.schedule = stage.schedule.clone();
        let k = self.config.stages.len() - 1;
        self.optimize(k, &stage, data)
    }

    /// Trains a fresh mask head on the frozen backbone over the last two
    /// scales of `data`'s schedule.
    pub fn train_mask_head(&mut self, data: &Encoded) -> Result<()> {
        let cfg = &self.model.config;
        let steps = self.config.mask_steps;
        let mut head = MaskHead::new(
            MaskHeadConfig::for_backbone(cfg.d_model, cfg.heads, cfg.vocab, cfg.rope_grid),
            rng::derive(self.config.seed, 3),
        )?;
        let mut opt = AdamW::new(AdamWConfig {
            lr: self.config.mask_lr,
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            weight_decay: self.config.weight_decay,
            ..AdamWConfig::default()
        });
        let r = &mut rng::seeded(rng::derive(self.config.seed, 2000));
        let n = data.schedule.len();
        for step in 0..steps {
            let idx: Vec<usize> = (0..self.config.mask_batch)
                .map(|_| rng::below(r, data.len()))
                .collect();
            let s = n - 1 - rng::below(r, n.min(2));
            let (h, w) = data.schedule.side(s);
            let phi = self.scale_features(data, &idx, s)?;
            let truth: Vec<Vec<u32>> = idx
                .iter()
                .map(|&i| data.pyramids[i].scales[s].clone())
                .collect();
            let masked: Vec<Vec<bool>> = idx
                .iter()
                .map(|_| random_mask(h * w, rng::uniform_f64(r), r))
                .collect();
            let mut g = Graph::new();
            let (loss, _, _) = head.loss(&mut g, &truth, &masked, &phi, h, w)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NanLoss {
                    stage: usize::MAX,
                    step,
                });
            }
            let grads = g.backward(loss)?;
            opt.step(&mut head.params, &grads)?;
            self.mask_history.push(value);
        }
        head.trained = steps > 0;
        self.mask_head = Some(head);
        Ok(())
    }

    /// Final-norm backbone features of scale `s` for the given samples,
    /// `(batch · h_s·w_s) × d_model`.
    pub fn scale_features(&self, data: &Encoded, idx: &[usize], s: usize) -> Result<Vec<f32>> {
        let layout = Layout::prefix(&data.schedule, s + 1);
        let (start, len) = (layout.offsets[s], layout.lens[s]);
        let prompts = idx.iter().map(|&i| data.prompts[i].clone()).collect();
        let inputs: Vec<&[FeatureMap]> = idx.iter().map(|&i| data.inputs[i].as_slice()).collect();
        let batch = SeqBatch::new(prompts, vec![layout; idx.len()], &inputs)?;
        let mut g = Graph::new();
        let fwd = self.model.forward(&mut g, &batch)?;
        let hidden = g.value(fwd.hidden);
        let mut out = Vec::with_capacity(idx.len() * len * self.model.config.d_model);
        for b in 0..idx.len() {
            for p in start..start + len {
                out.extend_from_slice(hidden.row(fwd.row(b, p)));
            }
        }
        Ok(out)
    }

    /// Teacher-forcing metrics on `data[..limit]` with full layouts.
    pub fn evaluate(&self, data: &Encoded, limit: usize) -> Result<Evaluation> {
        let n = limit.min(data.len());
        let last = data.schedule.len() - 1;
        let (mut loss, mut last_loss, mut hits, mut rows, mut last_rows) =
            (0.0f64, 0.0f64, 0.0f64, 0usize, 0usize);
        let chunk = 16;
        for lo in (0..n).step_by(chunk) {
            let idx: Vec<usize> = (lo..(lo + chunk).min(n)).collect();
            let layouts = vec![Layout::full(&data.schedule); idx.len()];
            let prompts = idx.iter().map(|&i| data.prompts[i].clone()).collect();
            let inputs: Vec<&[FeatureMap]> =
                idx.iter().map(|&i| data.inputs[i].as_slice()).collect();
            let pyramids: Vec<&TokenPyramid> = idx.iter().map(|&i| &data.pyramids[i]).collect();
            let batch = SeqBatch::new(prompts, layouts.clone(), &inputs)?;
            let mut g = Graph::new();
            let fwd = self.model.forward(&mut g, &batch)?;
            let sup = Supervision::new(&layouts, &pyramids, None)?;
            let logits = self.model.logits(&mut g, &fwd, &sup.rows)?;
            let lv = g.value(logits);
            for (k, &t) in sup.targets.iter().enumerate() {
                let ce = softmax_cross_entropy(lv.row(k), t as usize)? as f64;
                loss += ce;
                if argmax(lv.row(k)) == t as usize {
                    hits += 1.0;
                }
                if sup.scales[k] == last {
                    last_loss += ce;
                    last_rows += 1;
                }
            }
            rows += sup.len();
        }
        Ok(Evaluation {
            loss: loss / rows as f64,
            accuracy: hits / rows as f64,
            last_scale_loss: last_loss / last_rows.max(1) as f64,
        })
    }

    /// Mask-head token accuracy at masked positions of the last scale.
    pub fn mask_head_accuracy(
        &self,
        data: &Encoded,
        limit: usize,
        ratio: f64,
        seed: u64,
    ) -> Result<f64> {
        let head = self.mask_head.as_ref().ok_or(Error::UntrainedMaskHead)?;
        let s = data.schedule.len() - 1;
        let (h, w) = data.schedule.side(s);
        let r = &mut rng::seeded(seed);
        let (mut hits, mut total) = (0usize, 0usize);
        let n = limit.min(data.len());
        for lo in (0..n).step_by(16) {
            let idx: Vec<usize> = (lo..(lo + 16).min(n)).collect();
            let phi = self.scale_features(data, &idx, s)?;
            let truth: Vec<Vec<u32>> = idx
                .iter()
                .map(|&i| data.pyramids[i].scales[s].clone())
                .collect();
            let masked: Vec<Vec<bool>> = idx.iter().map(|_| random_mask(h * w, ratio, r)).collect();
            let mut g = Graph::new();
            let (_, sel, rows) = head.loss(&mut g, &truth, &masked, &phi, h, w)?;
            let lv = g.value(sel);
            for (k, &row) in rows.iter().enumerate() {
                let (b, p) = (row / (h * w), row % (h * w));
                hits += (argmax(lv.row(k)) == truth[b][p] as usize) as usize;
                total += 1;
            }
        }
        Ok(hits as f64 / total as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.metadata.push(("format".into(), "starlite".into()));
        for (k, v) in self.config.entries() {
            c.metadata.push((format!("config.{k}"), v));
        }
        c.metadata
            .push(("vocabulary".into(), self.vocabulary.words().join(" ")));
        c.metadata
            .push(("step".into(), self.history.len().to_string()));
        c.metadata.push((
            "mask_trained".into(),
            self.mask_head
                .as_ref()
                .is_some_and(|h| h.trained)
                .to_string(),
        ));
        for l in &self.history {
            c.metadata.push(("log".into(), l.to_meta()));
        }
        for l in &self.mask_history {
            c.metadata.push(("mask_log".into(), l.to_string()));
        }
        for (n, t) in self.model.params.iter() {
            c.tensors.push((n.clone(), t.clone()));
        }
        let cb = &self.tokenizer.codebook;
        c.tensors.push((
            "tokenizer.codebook".into(),
            Tensor::matrix(cb.size(), cb.d, cb.vectors.clone()).expect("codebook shape"),
        ));
        let p = &self.tokenizer.projection;
        c.tensors.push((
            "tokenizer.projection".into(),
            Tensor::matrix(p.matrix.len() / p.d, p.d, p.matrix.clone()).expect("projection shape"),
        ));
        if let Some(h) = &self.mask_head {
            for (n, t) in h.params.iter() {
                c.tensors.push((format!("mask.{n}"), t.clone()));
            }
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let text: String = c
            .metadata
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| format!("{k} = {v}\n")))
            .collect();
        let config = TrainConfig::parse(&text)?;
        let vocabulary = Vocabulary::from_words(
            c.require("vocabulary")?
                .split(' ')
                .map(str::to_string)
                .collect(),
        )?;
        let mut model = Model::new(model_config(&config, vocabulary.len()), 0)?;
        let mut head_params = ParamStore::new();
        for (n, t) in &c.tensors {
            if let Some(m) = n.strip_prefix("mask.") {
                head_params.insert(m, t.clone());
            } else if !n.starts_with("tokenizer.") {
                let slot = model.params.get_mut(n)?;
                if slot.dims() != t.dims() {
                    return Err(Error::Format(format!(
                        "tensor {n} has dims {:?}, expected {:?}",
                        t.dims(),
                        slot.dims()
                    )));
                }
                *slot = t.clone();
            }
        }
        if model.params.len() + head_params.len() + 2 != c.tensors.len() {
            return Err(Error::Format(
                "checkpoint tensor set does not match the model".into(),
            ));
        }
        let cb = c.tensor("tokenizer.codebook")?;
        let pj = c.tensor("tokenizer.projection")?;
        let tokenizer = Tokenizer {
            projection: Projection {
                d: pj.cols(),
                matrix: pj.data().to_vec(),
            },
            codebook: Codebook::new(cb.cols(), cb.data().to_vec())?,
        };
        let mask_head = if head_params.is_empty() {
            None
        } else {
            let m = &model.config;
            let mut h = MaskHead::new(
                MaskHeadConfig::for_backbone(m.d_model, m.heads, m.vocab, m.rope_grid),
                0,
            )?;
            for (n, t) in head_params.iter() {
                *h.params.get_mut(n)? = t.clone();
            }
            h.trained = c.require("mask_trained")? == "true";
            Some(h)
        };
        let history = c
            .meta_all("log")
            .map(StepLog::from_meta)
            .collect::<Result<_>>()?;
        let mask_history = c
            .meta_all("mask_log")
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Format(format!("bad mask_log {v:?}")))
            })
            .collect::<Result<_>>()?;
        Ok(TrainedModel {
            config,
            vocabulary,
            tokenizer,
            model,
            mask_head,
            history,
            mask_history,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub last_scale_loss: f64,
}

/// Report of a complete [`train`] run.
pub struct TrainReport {
    pub trained: TrainedModel,
    pub timings: Vec<StageTiming>,
}

/// Fits the tokenizer, runs every stage in order, then the mask-head phase
/// on the final stage's data.
pub fn train(config: TrainConfig, images: &[Image], captions: &[String]) -> Result<TrainReport> {
    config.validate()?;
    let tokenizer = fit_tokenizer(&config, images)?;
    let mut tm = TrainedModel::init(config, tokenizer)?;
    let mut timings = Vec::new();
    let mut data = None;
    for k in 0..tm.config.stages.len() {
        let stage = tm.config.stages[k].clone();
        let enc = tm.encode(images, captions, &stage)?;
        timings.push(tm.run_stage(k, &enc)?);
        data = Some(enc);
    }
    if tm.config.mask_steps > 0 {
        tm.train_mask_head(data.as_ref().expect("at least one stage"))?;
    }
    Ok(TrainReport {
        trained: tm,
        timings,
    })
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Mean CE of the supervised rows of scale `s`; NaN-free zero when the
/// batch has none.
fn scale_loss(logits: &Tensor, sup: &Supervision, s: usize) -> Result<f32> {
    let (mut total, mut n) = (0.0f64, 0usize);
    for (k, &t) in sup.targets.iter().enumerate() {
        if sup.scales[k] == s {
            total += softmax_cross_entropy(logits.row(k), t as usize)? as f64;
            n += 1;
        }
    }
    Ok(if n == 0 {
        0.0
    } else {
        (total / n as f64) as f32
    })
}

/// Each position masked with probability `ratio`; at least one is masked.
pub fn random_mask(n: usize, ratio: f64, r: &mut Rng) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| rng::uniform_f64(r) < ratio).collect();
    if !m.contains(&true) {
        m[rng::below(r, n)] = true;
    }
    m
}
