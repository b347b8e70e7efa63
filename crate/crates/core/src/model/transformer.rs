//! Block-causal scale-wise decoder.
//!
//! Each block is pre-norm self-attention (rotary, QK-norm with a learned
//! per-head temperature), cross-attention to the prompt rows, and an MLP.
//! The start token carries the prompt's global vector; the tokens of scale
//! `s` carry a projection of the reconstruction from scales `< s`.

use std::sync::Arc;

use super::config::ModelConfig;
use super::layout::Layout;
use crate::error::{Error, Result};
use crate::numeric::{AttnMask, AttnSpec, Graph, NodeId, ParamStore, Tensor};
use crate::rng;
use crate::rope::{self, PosEncoding};
use crate::text;
use crate::tokenizer::FeatureMap;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Inputs for one forward pass. All layouts must share scale lengths.
#[derive(Clone, Debug)]
pub struct SeqBatch {
    pub prompts: Vec<Vec<u32>>,
    pub layouts: Vec<Layout>,
    /// Per sample, the next-scale input vector of every cell of scales ≥ 1
    /// in layout order (`feat_dim` values each).
    pub feats: Vec<Vec<f32>>,
}

impl SeqBatch {
    /// `inputs[b][s - 1]` is sample `b`'s next-scale input map for scale `s`.
    pub fn new(
        prompts: Vec<Vec<u32>>,
        layouts: Vec<Layout>,
        inputs: &[&[FeatureMap]],
    ) -> Result<Self> {
        if prompts.len() != layouts.len() || inputs.len() != layouts.len() {
            return Err(Error::shape(
                "seq_batch",
                "prompt, layout and input counts differ",
            ));
        }
        let mut feats = Vec::with_capacity(layouts.len());
        for (layout, maps) in layouts.iter().zip(inputs) {
            let mut f = Vec::new();
            for c in layout.cells.iter().filter(|c| c.s > 0) {
                let map = maps.get(c.s - 1).ok_or_else(|| {
                    Error::shape("seq_batch", format!("missing input for scale {}", c.s))
                })?;
                if (map.h, map.w) != layout.schedule.side(c.s) {
                    return Err(Error::shape(
                        "seq_batch",
                        format!("input map for scale {} has wrong size", c.s),
                    ));
                }
                f.extend_from_slice(map.cell(c.i, c.j));
            }
            feats.push(f);
        }
        Ok(SeqBatch {
            prompts,
            layouts,
            feats,
        })
    }

    pub fn batch(&self) -> usize {
        self.layouts.len()
    }
}

pub struct Forward {
    /// `(batch · seq_len) × d_model` features after the final norm.
    pub hidden: NodeId,
    /// Self-attention node of every block, for probability inspection.
    pub self_attn: Vec<NodeId>,
    pub seq_len: usize,
    pub batch: usize,
}

impl Forward {
    pub fn row(&self, b: usize, p: usize) -> usize {
        b * self.seq_len + p
    }
}

fn init_normal(params: &mut ParamStore, r: &mut rng::Rng, name: String, dims: &[usize], std: f32) {
    params.init_normal(r, &name, dims, std);
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut params = ParamStore::new();
        let r = &mut rng::seeded(rng::derive(seed, 100));
        let inv = |n: usize| (1.0 / n as f32).sqrt();
        text::init_params(&mut params, r, config.text_vocab, d);
        params.init_normal(r, "in.start", &[1, d], 0.5);
        params.init_normal(r, "in.proj.w", &[config.feat_dim, d], inv(config.feat_dim));
        params.init_const("in.proj.b", &[d], 0.0);
        rope::init_scale_embedding(&mut params, r, config.scale_slots, d);
        if config.pos_encoding == PosEncoding::Absolute {
            params.init_normal(r, "abs_pos", &[config.schedule.total_tokens(), d], 0.02);
        }
        let hidden = d * config.mlp_ratio;
        let log_temp = (config.head_dim() as f32).sqrt().ln();
        let out_std = inv(d) / (2.0 * config.depth as f32).sqrt();
        for l in 0..config.depth {
            let p = format!("blk{l}.");
            for ln in ["ln1", "ln2", "ln3"] {
                params.init_const(&format!("{p}{ln}.g"), &[d], 1.0);
                params.init_const(&format!("{p}{ln}.b"), &[d], 0.0);
            }
            for a in ["attn", "xattn"] {
                for m in ["q", "k", "v"] {
                    init_normal(&mut params, r, format!("{p}{a}.{m}"), &[d, d], inv(d));
                }
                init_normal(&mut params, r, format!("{p}{a}.o"), &[d, d], out_std);
                params.init_const(&format!("{p}{a}.ob"), &[d], 0.0);
            }
            params.init_const(&format!("{p}attn.log_temp"), &[config.heads], log_temp);
            init_normal(&mut params, r, format!("{p}mlp.w1"), &[d, hidden], inv(d));
            params.init_const(&format!("{p}mlp.b1"), &[hidden], 0.0);
            init_normal(
                &mut params,
                r,
                format!("{p}mlp.w2"),
                &[hidden, d],
                inv(hidden) / (2.0 * config.depth as f32).sqrt(),
            );
            params.init_const(&format!("{p}mlp.b2"), &[d], 0.0);
        }
        params.init_const("final.ln.g", &[d], 1.0);
        params.init_const("final.ln.b", &[d], 0.0);
        params.init_normal(r, "head.w", &[d, config.vocab], 0.01);
        params.init_const("head.b", &[config.vocab], 0.0);
        Ok(Model { config, params })
    }

    fn p(&self, g: &mut Graph, name: &str) -> Result<NodeId> {
        Ok(g.param(name, self.params.get(name)?))
    }

    pub fn forward(&self, g: &mut Graph, batch: &SeqBatch) -> Result<Forward> {
        let cfg = &self.config;
        Layout::check_structure(&batch.layouts)?;
        let b = batch.batch();
        let first = &batch.layouts[0];
        cfg.check_schedule(&first.schedule)?;
        let l = first.seq_len();
        let d = cfg.d_model;

        let prompt = text::embed_prompts(g, &self.params, &batch.prompts)?;

        // Token inputs: start content for scale 1, projected features after.
        let n_feat: usize = batch.feats.iter().map(|f| f.len()).sum::<usize>() / cfg.feat_dim;
        let mut picks = Vec::with_capacity(b * l);
        let mut scale_picks = Vec::with_capacity(b * l);
        let mut abs_picks = Vec::with_capacity(b * l);
        let mut angles = Vec::with_capacity(b * l * cfg.head_dim() / 2);
        let rope_cfg = cfg.rope();
        let half = cfg.head_dim() / 2;
        let mut feat_row = 0u32;
        let mut abs_offsets = vec![0usize; cfg.schedule.len() + 1];
        for s in 0..cfg.schedule.len() {
            abs_offsets[s + 1] = abs_offsets[s] + cfg.schedule.tokens(s);
        }
        for (k, layout) in batch.layouts.iter().enumerate() {
            if layout.schedule != first.schedule {
                return Err(Error::shape("forward", "batch mixes schedules"));
            }
            picks.push((0, k as u32));
            scale_picks.push((1, 0));
            abs_picks.push((1, 0));
            angles.extend(std::iter::repeat_n(0.0f32, half));
            for c in &layout.cells {
                if c.s == 0 {
                    picks.push((1, 0));
                } else {
                    picks.push((2, feat_row));
                    feat_row += 1;
                }
                scale_picks.push((0, c.s as u32));
                let (h, w) = layout.schedule.side(c.s);
                if cfg.pos_encoding == PosEncoding::Absolute {
                    abs_picks.push((0, (abs_offsets[c.s] + c.i * w + c.j) as u32));
                } else {
                    angles.extend(rope::rope_angles(c.i + 1, c.j + 1, h, w, &rope_cfg)?);
                }
            }
        }
        let start = self.p(g, "in.start")?;
        let mut sources = vec![prompt.eta, start];
        if n_feat > 0 {
            let feats: Vec<f32> = batch.feats.iter().flatten().copied().collect();
            let x = g.constant(Tensor::matrix(n_feat, cfg.feat_dim, feats)?);
            let w = self.p(g, "in.proj.w")?;
            let bias = self.p(g, "in.proj.b")?;
            sources.push(g.linear(x, w, Some(bias))?);
        }
        let mut x = g.select_rows(&sources, Arc::new(picks))?;
        let zero = g.constant(Tensor::zeros(&[1, d]));
        let table = self.p(g, rope::SCALE_PARAM)?;
        let scale_rows = g.select_rows(&[table, zero], Arc::new(scale_picks))?;
        x = g.add(x, scale_rows)?;
        if cfg.pos_encoding == PosEncoding::Absolute {
            let table = self.p(g, "abs_pos")?;
            let pos_rows = g.select_rows(&[table, zero], Arc::new(abs_picks))?;
            x = g.add(x, pos_rows)?;
        }

        let self_mask = Arc::new(AttnMask {
            lq: l,
            lk: l,
            allowed: Some(first.block_causal_mask()),
            key_valid: None,
        });
        let self_spec = AttnSpec {
            heads: cfg.heads,
            batch: b,
            lq: l,
            lk: l,
            mask: self_mask,
        };
        let cross_spec = AttnSpec {
            heads: cfg.heads,
            batch: b,
            lq: l,
            lk: cfg.m_max,
            mask: Arc::new(AttnMask {
                lq: l,
                lk: cfg.m_max,
                allowed: None,
                key_valid: Some(prompt.valid.clone()),
            }),
        };
        let angles = (cfg.pos_encoding != PosEncoding::Absolute).then_some(angles);

        let mut self_attn = Vec::with_capacity(cfg.depth);
        for blk in 0..cfg.depth {
            let pre = format!("blk{blk}.");
            let name = |s: &str| format!("{pre}{s}");

            let h = self.norm(g, x, &name("ln1"))?;
            let (wq, wk, wv) = (
                self.p(g, &name("attn.q"))?,
                self.p(g, &name("attn.k"))?,
                self.p(g, &name("attn.v"))?,
            );
            let mut q = g.linear(h, wq, None)?;
            let mut k = g.linear(h, wk, None)?;
            let v = g.linear(h, wv, None)?;
            if let Some(a) = &angles {
                q = g.rope(q, cfg.heads, a)?;
                k = g.rope(k, cfg.heads, a)?;
            }
            let temp = if cfg.qk_norm {
                q = g.head_norm(q, cfg.heads)?;
                k = g.head_norm(k, cfg.heads)?;
                let lt = self.p(g, &name("attn.log_temp"))?;
                Some(g.exp(lt)?)
            } else {
                None
            };
            let att = g.attention(q, k, v, temp, self_spec.clone())?;
            self_attn.push(att);
            let o = self.p(g, &name("attn.o"))?;
            let ob = self.p(g, &name("attn.ob"))?;
            let out = g.linear(att, o, Some(ob))?;
            x = g.add(x, out)?;

            let h = self.norm(g, x, &name("ln2"))?;
            let (wq, wk, wv) = (
                self.p(g, &name("xattn.q"))?,
                self.p(g, &name("xattn.k"))?,
                self.p(g, &name("xattn.v"))?,
            );
            let q = g.linear(h, wq, None)?;
            let k = g.linear(prompt.tau, wk, None)?;
            let v = g.linear(prompt.tau, wv, None)?;
            let att = g.attention(q, k, v, None, cross_spec.clone())?;
            let o = self.p(g, &name("xattn.o"))?;
            let ob = self.p(g, &name("xattn.ob"))?;
            let out = g.linear(att, o, Some(ob))?;
            x = g.add(x, out)?;

            let h = self.norm(g, x, &name("ln3"))?;
            let (w1, b1) = (self.p(g, &name("mlp.w1"))?, self.p(g, &name("mlp.b1"))?);
            let (w2, b2) = (self.p(g, &name("mlp.w2"))?, self.p(g, &name("mlp.b2"))?);
            let u = g.linear(h, w1, Some(b1))?;
            let u = g.gelu(u)?;
            let out = g.linear(u, w2, Some(b2))?;
            x = g.add(x, out)?;
        }
        let hidden = self.norm(g, x, "final.ln")?;
        Ok(Forward {
            hidden,
            self_attn,
            seq_len: l,
            batch: b,
        })
    }

    fn norm(&self, g: &mut Graph, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gamma = self.p(g, &format!("{prefix}.g"))?;
        let beta = self.p(g, &format!("{prefix}.b"))?;
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    /// Head logits for the given rows of `fwd.hidden`.
    pub fn logits(&self, g: &mut Graph, fwd: &Forward, rows: &[usize]) -> Result<NodeId> {
        let picks: Vec<(u32, u32)> = rows.iter().map(|&r| (0, r as u32)).collect();
        let h = g.select_rows(&[fwd.hidden], Arc::new(picks))?;
        let w = self.p(g, "head.w")?;
        let b = self.p(g, "head.b")?;
        g.linear(h, w, Some(b))
    }
}
