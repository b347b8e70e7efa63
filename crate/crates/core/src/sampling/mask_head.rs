//! Shallow network that fills masked tokens of one scale.
//!
//! Input per position: the token embedding (a dedicated `[MASK]` row for
//! masked positions) concatenated with the backbone's pre-logit feature φ.
//! Two pre-norm attention blocks with rotary positions mix the scale, then
//! a linear head predicts `V` logits.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::transformer::LN_EPS;
use crate::numeric::{AttnMask, AttnSpec, Graph, NodeId, ParamStore, Tensor};
use crate::rng;
use crate::rope::{rope_angles, PosEncoding, RopeConfig};

/// Predicts token logits for one scale from partially known tokens.
pub trait MaskPredictor {
    fn vocab(&self) -> usize;
    fn is_trained(&self) -> bool;
    /// `n × V` logits for an `h × w` scale; `known[k]` is `None` where masked.
    /// `phi` holds `n` backbone feature rows.
    fn predict(&self, known: &[Option<u32>], phi: &[f32], h: usize, w: usize) -> Result<Vec<f32>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskHeadConfig {
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub vocab: usize,
    pub phi_dim: usize,
    pub rope_grid: usize,
}

impl MaskHeadConfig {
    /// Half the backbone width, two blocks.
    pub fn for_backbone(d_model: usize, heads: usize, vocab: usize, rope_grid: usize) -> Self {
        let width = (d_model / 2).max(4);
        let mut h = (heads / 2).max(1);
        while h > 1 && (width % h != 0 || (width / h) % 4 != 0) {
            h -= 1;
        }
        MaskHeadConfig {
            width,
            heads: h,
            depth: 2,
            vocab,
            phi_dim: d_model,
            rope_grid,
        }
    }

    fn rope(&self) -> RopeConfig {
        RopeConfig {
            grid_h: self.rope_grid,
            grid_w: self.rope_grid,
            ..RopeConfig::new(self.width / self.heads, PosEncoding::Normalized)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskHead {
    pub config: MaskHeadConfig,
    pub params: ParamStore,
    pub trained: bool,
}

impl MaskHead {
    pub fn new(config: MaskHeadConfig, seed: u64) -> Result<Self> {
        let (w, v) = (config.width, config.vocab);
        if w % config.heads != 0 || (w / config.heads) % 4 != 0 {
            return Err(Error::Config(format!(
                "mask head width {w} with {} heads",
                config.heads
            )));
        }
        let mut p = ParamStore::new();
        let r = &mut rng::seeded(rng::derive(seed, 200));
        let inv = |n: usize| (1.0 / n as f32).sqrt();
        p.init_normal(r, "embed", &[v + 1, w], 0.5);
        p.init_normal(r, "in.w", &[w + config.phi_dim, w], inv(w + config.phi_dim));
        p.init_const("in.b", &[w], 0.0);
        for l in 0..config.depth {
            let n = |s: &str| format!("blk{l}.{s}");
            for ln in ["ln1", "ln2"] {
                p.init_const(&n(&format!("{ln}.g")), &[w], 1.0);
                p.init_const(&n(&format!("{ln}.b")), &[w], 0.0);
            }
            for m in ["q", "k", "v"] {
                p.init_normal(r, &n(m), &[w, w], inv(w));
            }
            p.init_normal(r, &n("o"), &[w, w], inv(w) * 0.5);
            p.init_const(&n("ob"), &[w], 0.0);
            p.init_normal(r, &n("w1"), &[w, 4 * w], inv(w));
            p.init_const(&n("b1"), &[4 * w], 0.0);
            p.init_normal(r, &n("w2"), &[4 * w, w], inv(4 * w) * 0.5);
            p.init_const(&n("b2"), &[w], 0.0);
        }
        p.init_const("final.g", &[w], 1.0);
        p.init_const("final.b", &[w], 0.0);
        p.init_normal(r, "head.w", &[w, v], 0.01);
        p.init_const("head.b", &[v], 0.0);
        Ok(MaskHead {
            config,
            params: p,
            trained: false,
        })
    }

    pub fn mask_token(&self) -> u32 {
        self.config.vocab as u32
    }

    fn p(&self, g: &mut Graph, name: &str) -> Result<NodeId> {
        Ok(g.param(name, self.params.get(name)?))
    }

    /// Logits for a batch of one scale. `tokens[b]` uses [`Self::mask_token`]
    /// at masked positions; `phi` is `(batch · h·w) × phi_dim`.
    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: &[Vec<u32>],
        phi: &[f32],
        h: usize,
        w: usize,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        let n = h * w;
        let b = tokens.len();
        if b == 0 || tokens.iter().any(|t| t.len() != n) || phi.len() != b * n * cfg.phi_dim {
            return Err(Error::shape(
                "mask_head",
                format!("batch {b} of {h}x{w} with {} feature values", phi.len()),
            ));
        }
        let ids: Vec<u32> = tokens.iter().flatten().copied().collect();
        if let Some(&t) = ids.iter().find(|&&t| t > self.mask_token()) {
            return Err(Error::TokenOutOfRange {
                token: t as usize,
                vocab: cfg.vocab + 1,
            });
        }
        let table = self.p(g, "embed")?;
        let emb = g.gather(table, &ids)?;
        let phi = g.constant(Tensor::matrix(b * n, cfg.phi_dim, phi.to_vec())?);
        let x = g.concat_cols(emb, phi)?;
        let (wi, bi) = (self.p(g, "in.w")?, self.p(g, "in.b")?);
        let mut x = g.linear(x, wi, Some(bi))?;

        let rope = cfg.rope();
        let mut angles = Vec::with_capacity(b * n * rope.d_head / 2);
        for _ in 0..b {
            for i in 0..h {
                for j in 0..w {
                    angles.extend(rope_angles(i + 1, j + 1, h, w, &rope)?);
                }
            }
        }
        let spec = AttnSpec {
            heads: cfg.heads,
            batch: b,
            lq: n,
            lk: n,
            mask: Arc::new(AttnMask::full(n, n)),
        };
        for l in 0..cfg.depth {
            let name = |s: &str| format!("blk{l}.{s}");
            let hn = self.norm(g, x, &name("ln1"))?;
            let (wq, wk, wv) = (
                self.p(g, &name("q"))?,
                self.p(g, &name("k"))?,
                self.p(g, &name("v"))?,
            );
            let q = g.linear(hn, wq, None)?;
            let k = g.linear(hn, wk, None)?;
            let v = g.linear(hn, wv, None)?;
            let q = g.rope(q, cfg.heads, &angles)?;
            let k = g.rope(k, cfg.heads, &angles)?;
            let a = g.attention(q, k, v, None, spec.clone())?;
            let (o, ob) = (self.p(g, &name("o"))?, self.p(g, &name("ob"))?);
            let a = g.linear(a, o, Some(ob))?;
            x = g.add(x, a)?;
            let hn = self.norm(g, x, &name("ln2"))?;
            let (w1, b1) = (self.p(g, &name("w1"))?, self.p(g, &name("b1"))?);
            let (w2, b2) = (self.p(g, &name("w2"))?, self.p(g, &name("b2"))?);
            let u = g.linear(hn, w1, Some(b1))?;
            let u = g.gelu(u)?;
            let u = g.linear(u, w2, Some(b2))?;
            x = g.add(x, u)?;
        }
        let x = self.norm(g, x, "final")?;
        let (hw, hb) = (self.p(g, "head.w")?, self.p(g, "head.b")?);
        g.linear(x, hw, Some(hb))
    }

    fn norm(&self, g: &mut Graph, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gamma = self.p(g, &format!("{prefix}.g"))?;
        let beta = self.p(g, &format!("{prefix}.b"))?;
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    /// Mean negative log-likelihood of the true tokens at masked positions.
    /// Returns the loss node, the logits node and the supervised rows.
    pub fn loss(
        &self,
        g: &mut Graph,
        truth: &[Vec<u32>],
        masked: &[Vec<bool>],
        phi: &[f32],
        h: usize,
        w: usize,
    ) -> Result<(NodeId, NodeId, Vec<usize>)> {
        let mut inputs = Vec::with_capacity(truth.len());
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, (t, m)) in truth.iter().zip(masked).enumerate() {
            if t.len() != m.len() {
                return Err(Error::shape(
                    "mask_head_loss",
                    "mask and token maps differ in size",
                ));
            }
            inputs.push(
                t.iter()
                    .zip(m)
                    .map(|(&tok, &mk)| if mk { self.mask_token() } else { tok })
                    .collect(),
            );
            for (k, &mk) in m.iter().enumerate() {
                if mk {
                    rows.push(b * h * w + k);
                    targets.push(t[k]);
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::EmptySupervision);
        }
        let logits = self.forward(g, &inputs, phi, h, w)?;
        let picks: Vec<(u32, u32)> = rows.iter().map(|&r| (0, r as u32)).collect();
        let sel = g.select_rows(&[logits], Arc::new(picks))?;
        let loss = g.cross_entropy(sel, Arc::new(targets))?;
        Ok((loss, sel, rows))
    }
}

impl MaskPredictor for MaskHead {
    fn vocab(&self) -> usize {
        self.config.vocab
    }

    fn is_trained(&self) -> bool {
        self.trained
    }

    fn predict(&self, known: &[Option<u32>], phi: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
        let tokens: Vec<u32> = known
            .iter()
            .map(|t| t.unwrap_or(self.mask_token()))
            .collect();
        let mut g = Graph::new();
        let logits = self.forward(&mut g, &[tokens], phi, h, w)?;
        Ok(g.value(logits).data().to_vec())
    }
}
