//! Generation, scoring and the ablation studies shared by the CLI and the
//! acceptance harness.

use std::fmt::Write as _;
use std::thread;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{Layout, SeqBatch};
use crate::numeric::Graph;
use crate::rng;
use crate::rope::PosEncoding;
use crate::sampling::{Generator, MaskPredictor, SampleTrace, SamplerConfig};
use crate::text::Vocabulary;
use crate::tokenizer::{FeatureMap, TokenPyramid};
use crate::toyworld::locality::uniform_probs;
use crate::toyworld::{attention_locality, Locality, MetricsReport};
use crate::train::{fit_tokenizer, Encoded, Evaluation, StepLog, TrainConfig, TrainedModel};

/// Worker cap from `STARLITE_THREADS`, else the available parallelism.
pub fn worker_count() -> usize {
    let avail = thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("STARLITE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        Some(n) if n > 0 => n,
        _ => avail,
    }
}

/// Maps `f` over `items` on up to `threads` workers; results keep input order.
pub fn par_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    thread::scope(|sc| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                sc.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(k, t)| f(c * chunk + k, t))
                        .collect::<Vec<R>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// The desk analogue of a production top-k of 600 out of 4096 codes.
pub fn baseline_k(vocab: usize) -> usize {
    (600 * vocab).div_ceil(4096).clamp(1, vocab)
}

pub struct Generated {
    pub images: Vec<Image>,
    pub pyramids: Vec<TokenPyramid>,
    pub traces: Vec<SampleTrace>,
}

/// Seed used for prompt `i` of a batch generated with `seed`.
pub fn prompt_seed(seed: u64, i: usize) -> u64 {
    rng::derive(seed, i as u64)
}

/// One image per prompt at the model's final stage resolution.
pub fn generate_images(
    tm: &TrainedModel,
    prompts: &[String],
    cfg: &SamplerConfig,
    seed: u64,
    threads: usize,
) -> Result<Generated> {
    let schedule = &tm.model.config.schedule;
    let resolution = tm.config.last_stage().resolution;
    let head = tm
        .mask_head
        .as_ref()
        .map(|h| h as &(dyn MaskPredictor + Sync));
    let results = par_map(
        prompts,
        threads,
        |i, p| -> Result<(Image, TokenPyramid, SampleTrace)> {
            let ids = tm.vocabulary.tokenize(p)?;
            let generator = Generator::new(
                &tm.model,
                &tm.tokenizer.codebook,
                head.map(|h| h as &dyn MaskPredictor),
            );
            let (pyr, trace) = generator.generate(&ids, schedule, cfg, prompt_seed(seed, i))?;
            let img = tm.tokenizer.decode_image(&pyr, schedule, resolution)?;
            Ok((img, pyr, trace))
        },
    );
    let mut out = Generated {
        images: Vec::with_capacity(prompts.len()),
        pyramids: Vec::with_capacity(prompts.len()),
        traces: Vec::with_capacity(prompts.len()),
    };
    for r in results {
        let (img, pyr, trace) = r?;
        out.images.push(img);
        out.pyramids.push(pyr);
        out.traces.push(trace);
    }
    Ok(out)
}

pub struct SamplerRow {
    pub name: &'static str,
    pub sampler: SamplerConfig,
    pub report: MetricsReport,
}

/// The three compared strategies: plain top-k at the desk baseline k,
/// Gumbel smoothing, and the causal sampler at full k.
pub fn sampler_variants(vocab: usize, scales: usize) -> Vec<(&'static str, SamplerConfig)> {
    vec![
        ("Baseline", SamplerConfig::topk(baseline_k(vocab))),
        ("Smooth", SamplerConfig::gumbel()),
        ("Ours", SamplerConfig::causal(vocab, scales)),
    ]
}

pub fn ablate_sampler(
    tm: &TrainedModel,
    prompts: &[String],
    reference: &[Image],
    seed: u64,
    threads: usize,
) -> Result<Vec<SamplerRow>> {
    let scales = tm.model.config.schedule.len();
    sampler_variants(tm.config.vocab, scales)
        .into_iter()
        .map(|(name, sampler)| {
            let g = generate_images(tm, prompts, &sampler, seed, threads)?;
            let report = MetricsReport::score(&g.images, prompts, reference)?;
            Ok(SamplerRow {
                name,
                sampler,
                report,
            })
        })
        .collect()
}

pub fn sampler_table(rows: &[SamplerRow]) -> String {
    let mut s = String::from("sampler\tkind\tk\talignment\tstructure\tmmd\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            r.name,
            r.sampler.kind,
            r.sampler.k,
            r.report.alignment,
            r.report.structure,
            r.report.mmd.value
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerLocality {
    pub layer: usize,
    pub scales: Vec<Locality>,
}

/// Locality fractions of every self-attention layer over the first
/// `count` samples, plus the uniform-attention reference.
pub fn inspect_attn(
    tm: &TrainedModel,
    data: &Encoded,
    count: usize,
) -> Result<(Vec<LayerLocality>, Vec<Locality>)> {
    let n = count.min(data.len());
    if n == 0 {
        return Err(Error::EmptySupervision);
    }
    let layout = Layout::full(&data.schedule);
    let depth = tm.model.config.depth;
    let mut sums: Vec<Vec<Locality>> = vec![Vec::new(); depth];
    for lo in (0..n).step_by(8) {
        let idx: Vec<usize> = (lo..(lo + 8).min(n)).collect();
        let prompts = idx.iter().map(|&i| data.prompts[i].clone()).collect();
        let inputs: Vec<&[FeatureMap]> = idx.iter().map(|&i| data.inputs[i].as_slice()).collect();
        let batch = SeqBatch::new(prompts, vec![layout.clone(); idx.len()], &inputs)?;
        let mut g = Graph::new();
        let fwd = tm.model.forward(&mut g, &batch)?;
        for (l, &node) in fwd.self_attn.iter().enumerate() {
            let (spec, probs) = g
                .attention_probs(node)
                .ok_or_else(|| Error::shape("inspect_attn", "not an attention node"))?;
            let loc = attention_locality(probs, spec.batch, spec.heads, &layout)?;
            let w = idx.len() as f64 / n as f64;
            if sums[l].is_empty() {
                sums[l] = loc
                    .iter()
                    .map(|x| Locality {
                        scale: x.scale,
                        ..Locality::default()
                    })
                    .collect();
            }
            for (acc, x) in sums[l].iter_mut().zip(&loc) {
                acc.same += w * x.same;
                acc.aligned += w * x.aligned;
                acc.other += w * x.other;
            }
        }
    }
    let layers = sums
        .into_iter()
        .enumerate()
        .map(|(layer, scales)| LayerLocality { layer, scales })
        .collect();
    let uniform = attention_locality(&uniform_probs(&layout), 1, 1, &layout)?;
    Ok((layers, uniform))
}

/// Mean over layers for each scale.
pub fn mean_locality(layers: &[LayerLocality]) -> Vec<Locality> {
    let Some(first) = layers.first() else {
        return Vec::new();
    };
    let n = layers.len() as f64;
    (0..first.scales.len())
        .map(|s| {
            let mut m = Locality {
                scale: first.scales[s].scale,
                ..Locality::default()
            };
            for l in layers {
                m.same += l.scales[s].same / n;
                m.aligned += l.scales[s].aligned / n;
                m.other += l.scales[s].other / n;
            }
            m
        })
        .collect()
}

pub fn locality_table(layers: &[LayerLocality], uniform: &[Locality]) -> String {
    let mut s = String::from("layer\tscale\tsame\taligned\tother\n");
    let mut row = |name: &str, l: &Locality| {
        let _ = writeln!(
            s,
            "{name}\t{}\t{:.6}\t{:.6}\t{:.6}",
            l.scale, l.same, l.aligned, l.other
        );
    };
    for layer in layers {
        for l in &layer.scales {
            row(&layer.layer.to_string(), l);
        }
    }
    for l in &mean_locality(layers) {
        row("mean", l);
    }
    for l in uniform {
        row("uniform", l);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct RopeRun {
    pub seed: u64,
    pub mode: PosEncoding,
    pub curve: Vec<StepLog>,
    /// Held-out metrics at the first stage.
    pub low: Evaluation,
    /// Fine-tuning curve and held-out metrics at the second stage; absent in
    /// absolute mode.
    pub finetune: Option<(Vec<StepLog>, Evaluation)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScratchRun {
    pub seed: u64,
    pub curve: Vec<StepLog>,
    pub high: Evaluation,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RopeAblation {
    pub runs: Vec<RopeRun>,
    /// Normalized-mode models trained only at the second stage, for the
    /// same number of steps as the fine-tuning.
    pub scratch: Vec<ScratchRun>,
}

pub struct Split<'a> {
    pub images: &'a [Image],
    pub captions: &'a [String],
}

/// Paired runs per seed: every mode trains the first stage of `base`, then
/// normalized and raw modes fine-tune on the second stage. A from-scratch
/// normalized run at the second stage gives the fine-tuning reference.
pub fn ablate_rope(
    base: &TrainConfig,
    train: Split<'_>,
    held: Split<'_>,
    seeds: &[u64],
    modes: &[PosEncoding],
    eval_limit: usize,
) -> Result<RopeAblation> {
    if base.stages.len() != 2 {
        return Err(Error::Config(
            "rope ablation needs exactly two stages (low, high)".into(),
        ));
    }
    base.validate()?;
    let (low, high) = (base.stages[0].clone(), base.stages[1].clone());
    let vocab = Vocabulary::toy();
    let mut out = RopeAblation::default();
    for &seed in seeds {
        let cfg = TrainConfig {
            seed,
            mask_steps: 0,
            ..base.clone()
        };
        let tokenizer = fit_tokenizer(&cfg, train.images)?;
        let enc = |split: &Split<'_>, stage| {
            Encoded::new(&tokenizer, &vocab, split.images, split.captions, stage)
        };
        let (train_low, train_high) = (enc(&train, &low)?, enc(&train, &high)?);
        let (held_low, held_high) = (enc(&held, &low)?, enc(&held, &high)?);
        for &mode in modes {
            let c = TrainConfig {
                pos_encoding: mode,
                stages: vec![low.clone()],
                ..cfg.clone()
            };
            let mut tm = TrainedModel::init(c, tokenizer.clone())?;
            tm.run_stage(0, &train_low)?;
            let curve = tm.history.clone();
            let low_eval = tm.evaluate(&held_low, eval_limit)?;
            let finetune = if mode == PosEncoding::Absolute {
                None
            } else {
                tm.finetune_resolution(high.clone(), &train_high)?;
                Some((
                    tm.history[curve.len()..].to_vec(),
                    tm.evaluate(&held_high, eval_limit)?,
                ))
            };
            out.runs.push(RopeRun {
                seed,
                mode,
                curve,
                low: low_eval,
                finetune,
            });
        }
        let c = TrainConfig {
            stages: vec![high.clone()],
            pos_encoding: PosEncoding::Normalized,
            ..cfg.clone()
        };
        let mut tm = TrainedModel::init(c, tokenizer.clone())?;
        tm.run_stage(0, &train_high)?;
        out.scratch.push(ScratchRun {
            seed,
            curve: tm.history.clone(),
            high: tm.evaluate(&held_high, eval_limit)?,
        });
    }
    Ok(out)
}

impl RopeAblation {
    /// Training curves, one row per optimizer step.
    pub fn curves_tsv(&self) -> String {
        let mut s = String::from("seed\tmode\tphase\tstep\tloss\taccuracy\tlast_scale_loss\n");
        let mut rows = |seed: u64, mode: &str, phase: &str, curve: &[StepLog]| {
            for l in curve {
                let _ = writeln!(
                    s,
                    "{seed}\t{mode}\t{phase}\t{}\t{:.6}\t{:.6}\t{:.6}",
                    l.step, l.loss, l.accuracy, l.last_scale_loss
                );
            }
        };
        for r in &self.runs {
            rows(r.seed, &r.mode.to_string(), "low", &r.curve);
            if let Some((c, _)) = &r.finetune {
                rows(r.seed, &r.mode.to_string(), "finetune", c);
            }
        }
        for r in &self.scratch {
            rows(r.seed, "normalized", "scratch", &r.curve);
        }
        s
    }

    /// Held-out metrics per run; `-` where a phase does not apply.
    pub fn summary_tsv(&self) -> String {
        let mut s = String::from(
            "seed\trun\tlow_loss\tlow_accuracy\thigh_loss\thigh_accuracy\thigh_last_scale_loss\n",
        );
        let f = |e: Option<&Evaluation>| match e {
            Some(e) => format!("{:.6}\t{:.6}\t{:.6}", e.loss, e.accuracy, e.last_scale_loss),
            None => "-\t-\t-".into(),
        };
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6}\t{:.6}\t{}",
                r.seed,
                r.mode,
                r.low.loss,
                r.low.accuracy,
                f(r.finetune.as_ref().map(|x| &x.1))
            );
        }
        for r in &self.scratch {
            let _ = writeln!(s, "{}\tscratch\t-\t-\t{}", r.seed, f(Some(&r.high)));
        }
        s
    }

    pub fn run(&self, seed: u64, mode: PosEncoding) -> Option<&RopeRun> {
        self.runs.iter().find(|r| r.seed == seed && r.mode == mode)
    }

    pub fn scratch_for(&self, seed: u64) -> Option<&ScratchRun> {
        self.scratch.iter().find(|r| r.seed == seed)
    }
}
