use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use starlite_core::experiments::{
    ablate_rope, ablate_sampler, baseline_k, generate_images, inspect_attn, locality_table,
    mean_locality, sampler_table, worker_count, Split,
};
use starlite_core::image::Image;
use starlite_core::rope::PosEncoding;
use starlite_core::sampling::{SamplerConfig, SamplerKind};
use starlite_core::toyworld::{gen_dataset, read_dataset, write_dataset, MetricsReport};
use starlite_core::train::{train, Checkpoint, TrainConfig, TrainedModel};

#[derive(Parser)]
#[command(
    name = "starlite",
    version,
    about = "Scale-wise text-to-image generation on a toy shape world"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic caption/image dataset.
    GenData {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
    },
    /// Train a model and write `model.ckpt` plus loss logs.
    Train {
        /// `key = value` training config; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Generate images for a prompt.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score generated images for held-out captions against the held-out images.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        heldout: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Paired normalized / absolute / raw position-encoding runs.
    AblateRope {
        /// Must define exactly two stages.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        heldout: PathBuf,
        /// Runs use seeds 0..seeds.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 200)]
        eval_count: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Baseline / Smooth / Ours sampler comparison.
    AblateSampler {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        heldout: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Attention-locality fractions per layer and scale.
    InspectAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct SamplerArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// topk | gumbel | causal
    #[arg(long, default_value = "topk")]
    sampler: String,
    /// Defaults: the desk baseline k for topk, the full vocabulary for causal.
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    topp: f32,
    /// Mask-head iterations per causal scale, aligned to the last scale.
    #[arg(long, default_value = "4,6,8")]
    steps: String,
    #[arg(long, default_value_t = 0.5)]
    keep_ratio: f32,
    #[arg(long, default_value_t = 0.0)]
    cfg_scale: f32,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn require_file(p: &Path, what: &str) -> Outcome {
    if p.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", p.display())))
    }
}

fn require_dir(p: &Path, what: &str) -> Outcome {
    if p.join("captions.txt").is_file() {
        Ok(())
    } else {
        Err(usage(format!(
            "{what} is not a dataset directory: {}",
            p.display()
        )))
    }
}

fn load_config(path: Option<&Path>) -> std::result::Result<TrainConfig, Failure> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            require_file(p, "config file")?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
        }
    }
}

fn load_model(path: &Path) -> std::result::Result<TrainedModel, Failure> {
    require_file(path, "checkpoint")?;
    let c = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(TrainedModel::from_checkpoint(&c)?)
}

fn load_data(dir: &Path, what: &str) -> std::result::Result<(Vec<Image>, Vec<String>), Failure> {
    require_dir(dir, what)?;
    Ok(read_dataset(dir).with_context(|| format!("reading {}", dir.display()))?)
}

/// Echoes the resolved run to stdout and `out_dir/run.cfg`.
fn write_run_cfg(out_dir: &Path, text: &str) -> Outcome {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    fs::write(out_dir.join("run.cfg"), text)?;
    print!("{text}");
    Ok(())
}

fn sampler_config(
    a: &SamplerArgs,
    tm: &TrainedModel,
) -> std::result::Result<SamplerConfig, Failure> {
    let kind: SamplerKind = a
        .sampler
        .parse()
        .map_err(|e| usage(format!("--sampler: {e}")))?;
    let vocab = tm.config.vocab;
    let scales = tm.model.config.schedule.len();
    let mut cfg = match kind {
        SamplerKind::TopK => SamplerConfig::topk(a.topk.unwrap_or(baseline_k(vocab))),
        SamplerKind::Gumbel => SamplerConfig::gumbel(),
        SamplerKind::Causal => SamplerConfig::causal(a.topk.unwrap_or(vocab), scales),
    };
    if kind == SamplerKind::Gumbel {
        if let Some(k) = a.topk {
            cfg.k = k;
        }
    }
    cfg.p = a.topp;
    cfg.keep_ratio = a.keep_ratio;
    cfg.cfg_scale = a.cfg_scale;
    cfg.steps = a
        .steps
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| {
            usage(format!(
                "--steps: expected comma-separated counts, got {:?}",
                a.steps
            ))
        })?;
    cfg.validate(vocab, scales)
        .map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn sampler_echo(s: &mut String, a: &SamplerArgs, cfg: &SamplerConfig) {
    let _ = writeln!(s, "seed = {}", a.seed);
    let _ = writeln!(s, "sampler = {}", cfg.kind);
    let _ = writeln!(s, "topk = {}", cfg.k);
    let _ = writeln!(s, "topp = {}", cfg.p);
    let _ = writeln!(s, "steps = {}", a.steps);
    let _ = writeln!(s, "keep_ratio = {}", cfg.keep_ratio);
    let _ = writeln!(s, "cfg_scale = {}", cfg.cfg_scale);
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::GenData {
            out_dir,
            seed,
            n,
            resolution,
        } => {
            if n == 0 || resolution == 0 {
                return Err(usage("--n and --resolution must be positive"));
            }
            write_run_cfg(
                &out_dir,
                &format!("command = gen-data\nseed = {seed}\nn = {n}\nresolution = {resolution}\n"),
            )?;
            let samples = gen_dataset(seed, n, resolution);
            let images: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
            let captions: Vec<String> = samples.iter().map(|s| s.caption.clone()).collect();
            write_dataset(&out_dir, &images, &captions)?;
            println!("wrote {n} pairs to {}", out_dir.display());
        }
        Command::Train {
            config,
            data,
            seed,
            out_dir,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (images, captions) = load_data(&data, "--data")?;
            // Invocation lines are comments so the echo doubles as a config file.
            let mut echo = format!("# command = train\n# data = {}\n", data.display());
            for (k, v) in cfg.entries() {
                let _ = writeln!(echo, "{k} = {v}");
            }
            write_run_cfg(&out_dir, &echo)?;
            let report = train(cfg, &images, &captions)?;
            let tm = &report.trained;
            let mut log = String::from("stage\tstep\tloss\taccuracy\tlast_scale_loss\n");
            for l in &tm.history {
                let _ = writeln!(
                    log,
                    "{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                    l.stage, l.step, l.loss, l.accuracy, l.last_scale_loss
                );
            }
            fs::write(out_dir.join("metrics.tsv"), log)?;
            let mask: String = std::iter::once("step\tloss\n".to_string())
                .chain(
                    tm.mask_history
                        .iter()
                        .enumerate()
                        .map(|(k, l)| format!("{k}\t{l:.6}\n")),
                )
                .collect();
            fs::write(out_dir.join("mask_metrics.tsv"), mask)?;
            tm.to_checkpoint().save(&out_dir.join("model.ckpt"))?;
            if let Some(l) = tm.history.last() {
                println!("final loss {:.4} accuracy {:.4}", l.loss, l.accuracy);
            }
            println!("wrote {}", out_dir.join("model.ckpt").display());
        }
        Command::Sample {
            checkpoint,
            prompt,
            count,
            sampler,
            out_dir,
        } => {
            let tm = load_model(&checkpoint)?;
            tm.vocabulary
                .tokenize(&prompt)
                .map_err(|e| usage(format!("--prompt: {e}")))?;
            let cfg = sampler_config(&sampler, &tm)?;
            let mut echo = format!(
                "command = sample\ncheckpoint = {}\nprompt = {prompt}\ncount = {count}\n",
                checkpoint.display()
            );
            sampler_echo(&mut echo, &sampler, &cfg);
            write_run_cfg(&out_dir, &echo)?;
            let prompts = vec![prompt; count];
            let g = generate_images(&tm, &prompts, &cfg, sampler.seed, worker_count())?;
            let mut trace = String::new();
            for (k, (img, t)) in g.images.iter().zip(&g.traces).enumerate() {
                img.write_ppm(fs::File::create(
                    out_dir.join(format!("sample_{k:03}.ppm")),
                )?)?;
                let _ = writeln!(trace, "# sample {k}");
                trace.push_str(&t.to_string());
            }
            fs::write(out_dir.join("trace.txt"), trace)?;
            println!("wrote {count} samples to {}", out_dir.display());
        }
        Command::Eval {
            checkpoint,
            heldout,
            count,
            sampler,
            out_dir,
        } => {
            let tm = load_model(&checkpoint)?;
            let cfg = sampler_config(&sampler, &tm)?;
            let (images, captions) = load_data(&heldout, "--heldout")?;
            let n = count.min(images.len());
            let mut echo = format!(
                "command = eval\ncheckpoint = {}\nheldout = {}\ncount = {n}\n",
                checkpoint.display(),
                heldout.display()
            );
            sampler_echo(&mut echo, &sampler, &cfg);
            write_run_cfg(&out_dir, &echo)?;
            let g = generate_images(&tm, &captions[..n], &cfg, sampler.seed, worker_count())?;
            let mut report = MetricsReport::score(&g.images, &captions[..n], &images[..n])?;
            let enc = tm.encode(&images[..n], &captions[..n], tm.config.last_stage())?;
            report.token_accuracy = Some(tm.evaluate(&enc, n)?.accuracy);
            report.locality = mean_locality(&inspect_attn(&tm, &enc, n.min(64))?.0);
            fs::write(out_dir.join("metrics.txt"), report.to_string())?;
            print!("{report}");
        }
        Command::AblateRope {
            config,
            data,
            heldout,
            seeds,
            eval_count,
            out_dir,
        } => {
            let cfg = load_config(config.as_deref())?;
            if cfg.stages.len() != 2 {
                return Err(usage("ablate-rope needs a config with exactly two stages"));
            }
            let (images, captions) = load_data(&data, "--data")?;
            let (himages, hcaptions) = load_data(&heldout, "--heldout")?;
            let mut echo = format!(
                "# command = ablate-rope\n# data = {}\n# heldout = {}\n# seeds = {seeds}\n# eval_count = {eval_count}\n",
                data.display(),
                heldout.display()
            );
            for (k, v) in cfg.entries() {
                let _ = writeln!(echo, "{k} = {v}");
            }
            write_run_cfg(&out_dir, &echo)?;
            let seeds: Vec<u64> = (0..seeds).collect();
            let result = ablate_rope(
                &cfg,
                Split {
                    images: &images,
                    captions: &captions,
                },
                Split {
                    images: &himages,
                    captions: &hcaptions,
                },
                &seeds,
                &[
                    PosEncoding::Normalized,
                    PosEncoding::Absolute,
                    PosEncoding::Raw,
                ],
                eval_count,
            )?;
            fs::write(out_dir.join("rope_curves.tsv"), result.curves_tsv())?;
            let summary = result.summary_tsv();
            fs::write(out_dir.join("rope_summary.tsv"), &summary)?;
            print!("{summary}");
        }
        Command::AblateSampler {
            checkpoint,
            heldout,
            count,
            seed,
            out_dir,
        } => {
            let tm = load_model(&checkpoint)?;
            let (images, captions) = load_data(&heldout, "--heldout")?;
            let n = count.min(images.len());
            write_run_cfg(
                &out_dir,
                &format!(
                    "command = ablate-sampler\ncheckpoint = {}\nheldout = {}\ncount = {n}\nseed = {seed}\n",
                    checkpoint.display(),
                    heldout.display()
                ),
            )?;
            let rows = ablate_sampler(&tm, &captions[..n], &images[..n], seed, worker_count())?;
            let table = sampler_table(&rows);
            fs::write(out_dir.join("samplers.tsv"), &table)?;
            print!("{table}");
        }
        Command::InspectAttn {
            checkpoint,
            data,
            count,
            out_dir,
        } => {
            let tm = load_model(&checkpoint)?;
            let (images, captions) = load_data(&data, "--data")?;
            let n = count.min(images.len());
            write_run_cfg(
                &out_dir,
                &format!(
                    "command = inspect-attn\ncheckpoint = {}\ndata = {}\ncount = {n}\n",
                    checkpoint.display(),
                    data.display()
                ),
            )?;
            let enc = tm.encode(&images[..n], &captions[..n], tm.config.last_stage())?;
            let (layers, uniform) = inspect_attn(&tm, &enc, n)?;
            let table = locality_table(&layers, &uniform);
            fs::write(out_dir.join("locality.tsv"), &table)?;
            print!("{table}");
        }
    }
    Ok(())
}
