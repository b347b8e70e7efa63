//! Random-graph gradient checking against central finite differences.
//!
//! Graphs are built in `f64` from a seeded recipe so the finite-difference
//! side is accurate enough to resolve a 1e-4 relative error. The op code
//! under test is the same generic code the `f32` models run.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::graph::{AttnMask, AttnSpec, Graph, NodeId};
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng::{self, Rng};

/// Relative error with a denominator floor, so entries whose true gradient
/// is ~0 are judged by absolute error instead.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const FD_STEP: f64 = 1e-3;
/// Step for the random-graph sweep. Head-normalized attention over 2-wide
/// heads has enough curvature that 1e-3 leaves ~1e-2 truncation error.
pub const FINE_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-2;

pub type Params64 = BTreeMap<String, Tensor<f64>>;

/// Max relative error of analytic vs. central-difference gradients for a
/// loss built by `build` over `params`.
pub fn check_gradients<F>(params: &Params64, step: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &Params64) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let grads = g.backward(loss)?;
    let mut worst = 0.0f64;
    let mut work = params.clone();
    for (name, p) in params {
        let analytic = grads
            .get(name)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; p.len()]);
        for i in 0..p.len() {
            let orig = p.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let lp = eval(&work, &build)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let lm = eval(&work, &build)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * step);
            worst = worst.max(rel_err(analytic[i], numeric, REL_FLOOR));
        }
    }
    Ok(worst)
}

fn eval<F>(params: &Params64, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &Params64) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    Ok(g.value(loss).data()[0])
}

// Some fields are only read through `Debug` when a check fails.
#[allow(dead_code)]
#[derive(Clone, Debug)]
enum Layer {
    Linear {
        out: usize,
        bias: bool,
    },
    Gelu,
    Tanh,
    LayerNorm,
    SelfAttention {
        heads: usize,
        rope: Vec<f64>,
        qk_norm: bool,
        mask: Arc<AttnMask>,
    },
    Residual,
    MulParam,
    ExpGate,
    ConcatParam {
        extra: usize,
    },
    Select(Arc<Vec<(u32, u32)>>),
}

#[allow(dead_code)]
#[derive(Clone, Debug)]
enum Readout {
    CrossEntropy {
        classes: usize,
        targets: Arc<Vec<u32>>,
    },
    WeightedSum(Tensor<f64>),
    Mean,
}

/// A seeded random composition of graph ops.
#[derive(Clone, Debug)]
pub struct RandomGraph {
    input: Tensor<f64>,
    layers: Vec<Layer>,
    readout: Readout,
    pub params: Params64,
}

fn rand_tensor(r: &mut Rng, dims: &[usize], std: f64) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng::normal(r) as f64 * std).collect();
    Tensor::new(dims.to_vec(), data).unwrap()
}

impl RandomGraph {
    pub fn generate(seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let rows = 2 + rng::below(&mut r, 3);
        let din = [3usize, 5][rng::below(&mut r, 2)];
        let width = [4usize, 8][rng::below(&mut r, 2)];
        let input = rand_tensor(&mut r, &[rows, din], 1.0);
        let mut params = Params64::new();
        let mut layers = vec![Layer::Linear {
            out: width,
            bias: true,
        }];
        let mut cur = width;
        params.insert("l0.w".into(), rand_tensor(&mut r, &[din, width], 0.6));
        params.insert("l0.b".into(), rand_tensor(&mut r, &[width], 0.1));
        let depth = 1 + rng::below(&mut r, 4);
        let mut cur_rows = rows;
        for li in 1..=depth {
            let pfx = format!("l{li}.");
            let choice = rng::below(&mut r, 10);
            let layer = match choice {
                0 => {
                    let out = [4usize, 8][rng::below(&mut r, 2)];
                    let bias = rng::below(&mut r, 2) == 0;
                    params.insert(format!("{pfx}w"), rand_tensor(&mut r, &[cur, out], 0.5));
                    if bias {
                        params.insert(format!("{pfx}b"), rand_tensor(&mut r, &[out], 0.1));
                    }
                    cur = out;
                    Layer::Linear { out, bias }
                }
                1 => Layer::Gelu,
                2 => Layer::Tanh,
                3 => {
                    params.insert(
                        format!("{pfx}g"),
                        rand_tensor(&mut r, &[cur], 0.2).map(|v| v + 1.0),
                    );
                    params.insert(format!("{pfx}b"), rand_tensor(&mut r, &[cur], 0.1));
                    Layer::LayerNorm
                }
                4 | 5 => {
                    let heads = if cur % 4 == 0 && rng::below(&mut r, 2) == 0 {
                        2
                    } else {
                        1
                    };
                    let dh = cur / heads;
                    let use_rope = rng::below(&mut r, 2) == 0 && dh % 2 == 0;
                    let rope = if use_rope {
                        (0..cur_rows * dh / 2)
                            .map(|_| rng::normal(&mut r) as f64)
                            .collect()
                    } else {
                        Vec::new()
                    };
                    let qk_norm = rng::below(&mut r, 2) == 0;
                    for m in ["q", "k", "v"] {
                        params.insert(format!("{pfx}{m}"), rand_tensor(&mut r, &[cur, cur], 0.5));
                    }
                    if qk_norm {
                        params.insert(
                            format!("{pfx}t"),
                            rand_tensor(&mut r, &[heads], 0.2).map(|v| v + 1.5),
                        );
                    }
                    // random mask with at least the diagonal allowed
                    let mut allowed = vec![false; cur_rows * cur_rows];
                    for i in 0..cur_rows {
                        for j in 0..cur_rows {
                            allowed[i * cur_rows + j] = i == j || rng::below(&mut r, 3) > 0;
                        }
                    }
                    Layer::SelfAttention {
                        heads,
                        rope,
                        qk_norm,
                        mask: Arc::new(AttnMask {
                            lq: cur_rows,
                            lk: cur_rows,
                            allowed: Some(allowed),
                            key_valid: None,
                        }),
                    }
                }
                6 => Layer::Residual,
                7 => {
                    params.insert(
                        format!("{pfx}m"),
                        rand_tensor(&mut r, &[cur_rows, cur], 0.8),
                    );
                    Layer::MulParam
                }
                8 => {
                    params.insert(
                        format!("{pfx}e"),
                        rand_tensor(&mut r, &[cur_rows, cur], 0.3),
                    );
                    Layer::ExpGate
                }
                _ => {
                    if rng::below(&mut r, 2) == 0 {
                        let extra = 1 + rng::below(&mut r, 3);
                        params.insert(
                            format!("{pfx}c"),
                            rand_tensor(&mut r, &[cur_rows, extra], 0.5),
                        );
                        cur += extra;
                        Layer::ConcatParam { extra }
                    } else {
                        let n_out = 2 + rng::below(&mut r, 4);
                        let picks: Vec<(u32, u32)> = (0..n_out)
                            .map(|_| (0, rng::below(&mut r, cur_rows) as u32))
                            .collect();
                        cur_rows = n_out;
                        Layer::Select(Arc::new(picks))
                    }
                }
            };
            layers.push(layer);
        }
        let readout = match rng::below(&mut r, 4) {
            0 | 1 => {
                let classes = 3 + rng::below(&mut r, 4);
                params.insert("head.w".into(), rand_tensor(&mut r, &[cur, classes], 0.5));
                let targets = (0..cur_rows)
                    .map(|_| rng::below(&mut r, classes) as u32)
                    .collect();
                Readout::CrossEntropy {
                    classes,
                    targets: Arc::new(targets),
                }
            }
            2 => Readout::WeightedSum(rand_tensor(&mut r, &[cur_rows, cur], 1.0)),
            _ => Readout::Mean,
        };
        RandomGraph {
            input,
            layers,
            readout,
            params,
        }
    }

    pub fn build(&self, g: &mut Graph<f64>, p: &Params64) -> Result<NodeId> {
        let param = |g: &mut Graph<f64>, name: String| g.param(&name, &p[&name]);
        let x = g.constant(self.input.clone());
        let w = param(g, "l0.w".into());
        let b = param(g, "l0.b".into());
        let mut h = g.linear(x, w, Some(b))?;
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            let pfx = format!("l{i}.");
            h = match layer {
                Layer::Linear { bias, .. } => {
                    let w = param(g, format!("{pfx}w"));
                    let b = bias.then(|| param(g, format!("{pfx}b")));
                    g.linear(h, w, b)?
                }
                Layer::Gelu => g.gelu(h)?,
                Layer::Tanh => g.tanh(h)?,
                Layer::LayerNorm => {
                    let gm = param(g, format!("{pfx}g"));
                    let bt = param(g, format!("{pfx}b"));
                    g.layer_norm(h, gm, bt, 1e-5)?
                }
                Layer::SelfAttention {
                    heads,
                    rope,
                    qk_norm,
                    mask,
                } => {
                    let wq = param(g, format!("{pfx}q"));
                    let wk = param(g, format!("{pfx}k"));
                    let wv = param(g, format!("{pfx}v"));
                    let mut q = g.linear(h, wq, None)?;
                    let mut k = g.linear(h, wk, None)?;
                    let v = g.linear(h, wv, None)?;
                    if !rope.is_empty() {
                        q = g.rope(q, *heads, rope)?;
                        k = g.rope(k, *heads, rope)?;
                    }
                    let temp = if *qk_norm {
                        q = g.head_norm(q, *heads)?;
                        k = g.head_norm(k, *heads)?;
                        Some(param(g, format!("{pfx}t")))
                    } else {
                        None
                    };
                    let rows = g.value(h).rows();
                    let spec = AttnSpec {
                        heads: *heads,
                        batch: 1,
                        lq: rows,
                        lk: rows,
                        mask: mask.clone(),
                    };
                    g.attention(q, k, v, temp, spec)?
                }
                Layer::Residual => {
                    let t = g.tanh(h)?;
                    g.add(h, t)?
                }
                Layer::MulParam => {
                    let m = param(g, format!("{pfx}m"));
                    g.mul(h, m)?
                }
                Layer::ExpGate => {
                    let e = param(g, format!("{pfx}e"));
                    let e = g.exp(e)?;
                    g.mul(h, e)?
                }
                Layer::ConcatParam { .. } => {
                    let c = param(g, format!("{pfx}c"));
                    g.concat_cols(h, c)?
                }
                Layer::Select(picks) => g.select_rows(&[h], picks.clone())?,
            };
        }
        match &self.readout {
            Readout::CrossEntropy { targets, .. } => {
                let w = param(g, "head.w".into());
                let logits = g.linear(h, w, None)?;
                g.cross_entropy(logits, targets.clone())
            }
            Readout::WeightedSum(c) => {
                let c = g.constant(c.clone());
                let m = g.mul(h, c)?;
                g.sum(m)
            }
            Readout::Mean => {
                let s = g.scale(h, 0.5)?;
                g.mean(s)
            }
        }
    }

    /// Max relative error over every parameter entry.
    pub fn check(&self) -> Result<f64> {
        check_gradients(&self.params, FINE_STEP, |g, p| self.build(g, p))
    }
}
