//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op in build order together with its output.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for named parameter leaves. Ops are coarse (linear layers, fused
//! attention, fused cross-entropy) so per-node bookkeeping stays small next
//! to the arithmetic.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::scalar::{gemm, Scalar, View};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which keys each query may see. Shared across heads.
#[derive(Clone, Debug)]
pub struct AttnMask {
    pub lq: usize,
    pub lk: usize,
    /// Row-major `lq × lk` pattern shared by every batch element; `None` allows all.
    pub allowed: Option<Vec<bool>>,
    /// Per batch element `lk` validity flags; `None` means every key is valid.
    pub key_valid: Option<Vec<bool>>,
}

impl AttnMask {
    pub fn full(lq: usize, lk: usize) -> Self {
        AttnMask {
            lq,
            lk,
            allowed: None,
            key_valid: None,
        }
    }

    #[inline]
    pub fn allows(&self, b: usize, i: usize, j: usize) -> bool {
        self.allowed.as_ref().is_none_or(|a| a[i * self.lk + j])
            && self.key_valid.as_ref().is_none_or(|v| v[b * self.lk + j])
    }
}

/// Geometry of a fused multi-head attention call.
#[derive(Clone, Debug)]
pub struct AttnSpec {
    pub heads: usize,
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub mask: Arc<AttnMask>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, T),
    Exp(NodeId),
    Gelu(NodeId),
    Tanh(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SelectRows {
        sources: Vec<NodeId>,
        picks: Arc<Vec<(u32, u32)>>,
    },
    ConcatCols(NodeId, NodeId),
    Rope {
        x: NodeId,
        heads: usize,
        cos: Arc<Vec<T>>,
        sin: Arc<Vec<T>>,
    },
    HeadNorm {
        x: NodeId,
        heads: usize,
        norms: Vec<T>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        temp: Option<NodeId>,
        scale: T,
        spec: AttnSpec,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Arc<Vec<u32>>,
        probs: Vec<T>,
    },
    Sum(NodeId),
    Mean(NodeId),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
    param: Option<String>,
}

/// Gradients of named parameters, ordered by name.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T: Scalar = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.map.values().map(|g| g.sq_norm()).sum::<f64>().sqrt()
    }

    /// Rescales all gradients so the global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = T::of(max_norm / norm);
            for g in self.map.values_mut() {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
        norm
    }
}

#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

fn same_dims<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    Ok(())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Attention probabilities `[batch][head][lq][lk]` saved by an attention node.
    pub fn attention_probs(&self, id: NodeId) -> Option<(&AttnSpec, &[T])> {
        match &self.nodes[id.0].op {
            Op::Attention { spec, probs, .. } => Some((spec, probs)),
            _ => None,
        }
    }

    fn push(
        &mut self,
        op: Op<T>,
        value: Tensor<T>,
        parents: &[NodeId],
        name: &'static str,
    ) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            param: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Differentiable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: value.clone(),
            needs_grad: true,
            param: Some(name.to_string()),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: false,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), out, &[a, b], "matmul")
    }

    /// `x·w + b` where `x` is `N × in` (leading dims flattened) and `w` is `in × out`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.dims().len() != 2 || xv.cols() != wv.dims()[0] {
            return Err(Error::shape(
                "linear",
                format!("x {:?} with w {:?}", xv.dims(), wv.dims()),
            ));
        }
        let (n, din, dout) = (xv.rows(), xv.cols(), wv.dims()[1]);
        let mut out = Tensor::zeros(&[n, dout]);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != dout {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for {dout} outputs", bv.dims()),
                ));
            }
            for r in 0..n {
                out.data_mut()[r * dout..(r + 1) * dout].copy_from_slice(bv.data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            T::one(),
            xv.data(),
            View::rm(0, n, din, din),
            wv.data(),
            View::rm(0, din, dout, dout),
            beta,
            out.data_mut(),
            View::rm(0, n, dout, dout),
        );
        let parents: Vec<NodeId> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Op::Linear { x, w, b }, out, &parents, "linear")
    }

    fn zip(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        same_dims(name, av, bv)?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.dims().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), out, &[a, b], "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), out, &[a, b], "mul")
    }

    /// Adds a length-`C` vector to every row of an `N × C` input.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = xv.cols();
        if bv.len() != c {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", xv.dims(), bv.dims()),
            ));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        self.push(Op::AddBias(x, b), out, &[x, b], "add_bias")
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        let out = self.value(x).map(|v| v * c);
        self.push(Op::Scale(x, c), out, &[x], "scale")
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| v.exp());
        self.push(Op::Exp(x), out, &[x], "exp")
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let c = T::of(GELU_C);
        let k = T::of(0.044715);
        let half = T::of(0.5);
        let out = self
            .value(x)
            .map(|v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()));
        self.push(Op::Gelu(x), out, &[x], "gelu")
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| v.tanh());
        self.push(Op::Tanh(x), out, &[x], "tanh")
    }

    /// Layer normalization over the trailing dimension.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return Err(Error::shape(
                "layer_norm",
                format!("{:?} with gain {:?}", xv.dims(), gv.dims()),
            ));
        }
        let rows = xv.rows();
        let mut out = Tensor::zeros(xv.dims());
        let mut xhat = vec![T::zero(); rows * c];
        let mut rstd = vec![T::zero(); rows];
        let inv_c = T::of(1.0 / c as f64);
        let eps = T::of(eps);
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out.data_mut()[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            out,
            &[x, gamma, beta],
            "layer_norm",
        )
    }

    /// Output row `r` is row `picks[r].1` of `sources[picks[r].0]`. Covers
    /// gathers, embedding lookups and row concatenation.
    pub fn select_rows(
        &mut self,
        sources: &[NodeId],
        picks: Arc<Vec<(u32, u32)>>,
    ) -> Result<NodeId> {
        if sources.is_empty() || picks.is_empty() {
            return Err(Error::shape("select_rows", "no sources or no rows"));
        }
        let c = self.value(sources[0]).cols();
        for s in sources {
            if self.value(*s).cols() != c {
                return Err(Error::shape("select_rows", "sources differ in width"));
            }
        }
        let mut data = Vec::with_capacity(picks.len() * c);
        for &(s, r) in picks.iter() {
            let src = self.value(
                *sources
                    .get(s as usize)
                    .ok_or_else(|| Error::shape("select_rows", "bad source"))?,
            );
            if r as usize >= src.rows() {
                return Err(Error::shape(
                    "select_rows",
                    format!("row {r} of {}", src.rows()),
                ));
            }
            data.extend_from_slice(src.row(r as usize));
        }
        let out = Tensor::new(vec![picks.len(), c], data)?;
        let parents = sources.to_vec();
        self.push(
            Op::SelectRows {
                sources: sources.to_vec(),
                picks,
            },
            out,
            &parents,
            "select_rows",
        )
    }

    /// Embedding lookup: rows of `table` by index.
    pub fn gather(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let picks: Vec<(u32, u32)> = ids.iter().map(|&i| (0, i)).collect();
        self.select_rows(&[table], Arc::new(picks))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::shape(
                "concat_cols",
                format!("{:?} | {:?}", av.dims(), bv.dims()),
            ));
        }
        let (ca, cb) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(av.rows() * (ca + cb));
        for r in 0..av.rows() {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let out = Tensor::new(vec![av.rows(), ca + cb], data)?;
        self.push(Op::ConcatCols(a, b), out, &[a, b], "concat_cols")
    }

    /// Rotates channel pairs `(2t, 2t+1)` of every head by per-row angles.
    /// `angles` is `rows × head_dim/2`, shared by all heads.
    pub fn rope(&mut self, x: NodeId, heads: usize, angles: &[T]) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        if heads == 0 || d % heads != 0 || (d / heads) % 2 != 0 {
            return Err(Error::shape(
                "rope",
                format!("width {d} with {heads} heads"),
            ));
        }
        let half = d / heads / 2;
        if angles.len() != rows * half {
            return Err(Error::shape(
                "rope",
                format!("{} angles for {rows}x{half}", angles.len()),
            ));
        }
        let cos: Vec<T> = angles.iter().map(|a| a.cos()).collect();
        let sin: Vec<T> = angles.iter().map(|a| a.sin()).collect();
        let mut out = xv.clone();
        rotate_rows(out.data_mut(), d, heads, half, &cos, &sin, false);
        self.push(
            Op::Rope {
                x,
                heads,
                cos: Arc::new(cos),
                sin: Arc::new(sin),
            },
            out,
            &[x],
            "rope",
        )
    }

    /// Unit-normalizes each head slice of every row.
    pub fn head_norm(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let d = xv.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "head_norm",
                format!("width {d} with {heads} heads"),
            ));
        }
        let dh = d / heads;
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows() * heads);
        let eps = T::of(1e-6);
        for seg in out.data_mut().chunks_mut(dh) {
            let n = seg.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            norms.push(n);
            for v in seg.iter_mut() {
                *v = *v / n;
            }
        }
        self.push(Op::HeadNorm { x, heads, norms }, out, &[x], "head_norm")
    }

    /// Fused masked multi-head attention.
    ///
    /// `q` is `(batch·lq) × d`, `k` and `v` are `(batch·lk) × d`. Logits are
    /// `temp[h] · q·k` when a temperature node (length `heads`) is given,
    /// otherwise `q·k / sqrt(head_dim)`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        temp: Option<NodeId>,
        spec: AttnSpec,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let AttnSpec {
            heads,
            batch,
            lq,
            lk,
            ..
        } = spec;
        if heads == 0
            || d % heads != 0
            || kv.cols() != d
            || vv.cols() != d
            || qv.rows() != batch * lq
            || kv.rows() != batch * lk
            || vv.rows() != batch * lk
            || spec.mask.lq != lq
            || spec.mask.lk != lk
        {
            return Err(Error::shape(
                "attention",
                format!(
                    "q {:?} k {:?} v {:?} for batch {batch} lq {lq} lk {lk} heads {heads}",
                    qv.dims(),
                    kv.dims(),
                    vv.dims()
                ),
            ));
        }
        let dh = d / heads;
        let temps: Option<Vec<T>> = match temp {
            Some(t) => {
                let tv = self.value(t);
                if tv.len() != heads {
                    return Err(Error::shape(
                        "attention",
                        "temperature must have one entry per head",
                    ));
                }
                Some(tv.data().to_vec())
            }
            None => None,
        };
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut probs = vec![T::zero(); batch * heads * lq * lk];
        let mut out = Tensor::zeros(&[batch * lq, d]);
        let mask = &spec.mask;
        for b in 0..batch {
            for h in 0..heads {
                let s = temps.as_ref().map_or(scale, |t| t[h]);
                let base = (b * heads + h) * lq * lk;
                let p = &mut probs[base..base + lq * lk];
                gemm(
                    s,
                    qv.data(),
                    View::rm(b * lq * d + h * dh, lq, dh, d),
                    kv.data(),
                    View::rm(b * lk * d + h * dh, lk, dh, d).t(),
                    T::zero(),
                    p,
                    View::rm(0, lq, lk, lk),
                );
                for i in 0..lq {
                    let row = &mut p[i * lk..(i + 1) * lk];
                    let mut max = T::neg_infinity();
                    for (j, z) in row.iter().enumerate() {
                        if mask.allows(b, i, j) && *z > max {
                            max = *z;
                        }
                    }
                    if max == T::neg_infinity() {
                        return Err(Error::AllMasked);
                    }
                    let mut sum = T::zero();
                    for (j, z) in row.iter_mut().enumerate() {
                        if mask.allows(b, i, j) {
                            *z = (*z - max).exp();
                            sum += *z;
                        } else {
                            *z = T::zero();
                        }
                    }
                    for z in row.iter_mut() {
                        *z = *z / sum;
                    }
                }
                gemm(
                    T::one(),
                    p,
                    View::rm(0, lq, lk, lk),
                    vv.data(),
                    View::rm(b * lk * d + h * dh, lk, dh, d),
                    T::zero(),
                    out.data_mut(),
                    View::rm(b * lq * d + h * dh, lq, dh, d),
                );
            }
        }
        let parents: Vec<NodeId> = [Some(q), Some(k), Some(v), temp]
            .into_iter()
            .flatten()
            .collect();
        self.push(
            Op::Attention {
                q,
                k,
                v,
                temp,
                scale,
                spec,
                probs,
            },
            out,
            &parents,
            "attention",
        )
    }

    /// Mean softmax cross-entropy of `logits` rows against `targets`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Arc<Vec<u32>>) -> Result<NodeId> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if targets.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t as usize >= c) {
            return Err(Error::TargetOutOfRange {
                target: t as usize,
                classes: c,
            });
        }
        let mut probs = vec![T::zero(); n * c];
        let mut total = 0.0f64;
        for r in 0..n {
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[r * c..(r + 1) * c];
            let mut sum = T::zero();
            for (pp, &z) in p.iter_mut().zip(row) {
                *pp = (z - max).exp();
                sum += *pp;
            }
            for pp in p.iter_mut() {
                *pp = *pp / sum;
            }
            let t = targets[r] as usize;
            total += (sum.ln() + max - row[t]).as_f64();
        }
        let out = Tensor::scalar(T::of(total / n as f64));
        self.push(
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            out,
            &[logits],
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().map(|v| v.as_f64()).sum::<f64>();
        self.push(Op::Sum(x), Tensor::scalar(T::of(s)), &[x], "sum")
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let s = xv.data().iter().map(|v| v.as_f64()).sum::<f64>() / xv.len() as f64;
        self.push(Op::Mean(x), Tensor::scalar(T::of(s)), &[x], "mean")
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss {
                dims: lv.dims().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            if let Some(name) = &node.param {
                match out.map.get_mut(name) {
                    Some(g) => {
                        for (a, &b) in g.data_mut().iter_mut().zip(&gy) {
                            *a += b;
                        }
                    }
                    None => {
                        out.map
                            .insert(name.clone(), Tensor::new(node.value.dims().to_vec(), gy)?);
                    }
                }
                continue;
            }
            self.backprop(i, &gy, &mut grads);
        }
        Ok(out)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], id: NodeId) -> &'g mut Vec<T> {
        let n = self.nodes[id.0].value.len();
        grads[id.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn backprop(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
                self.linear_backward(gy, *a, *b, None, m, k, n, grads);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xv.rows(), xv.cols(), wv.dims()[1]);
                self.linear_backward(gy, *x, *w, *b, m, k, n, grads);
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if self.wants(id) {
                        add_into(self.buf(grads, id), gy);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let g = self.buf(grads, *a);
                    for ((g, &d), &o) in g.iter_mut().zip(gy).zip(bv) {
                        *g += d * o;
                    }
                }
                if self.wants(*b) {
                    let g = self.buf(grads, *b);
                    for ((g, &d), &o) in g.iter_mut().zip(gy).zip(av) {
                        *g += d * o;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    add_into(self.buf(grads, *x), gy);
                }
                if self.wants(*b) {
                    let c = y.cols();
                    let g = self.buf(grads, *b);
                    for row in gy.chunks(c) {
                        add_into(g, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    let g = self.buf(grads, *x);
                    for (g, &d) in g.iter_mut().zip(gy) {
                        *g += d * *c;
                    }
                }
            }
            Op::Exp(x) => {
                if self.wants(*x) {
                    let g = self.buf(grads, *x);
                    for ((g, &d), &o) in g.iter_mut().zip(gy).zip(y.data()) {
                        *g += d * o;
                    }
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let c = T::of(GELU_C);
                    let k = T::of(0.044715);
                    let half = T::of(0.5);
                    let three = T::of(3.0);
                    let g = self.buf(grads, *x);
                    for ((g, &d), &v) in g.iter_mut().zip(gy).zip(xv) {
                        let u = c * (v + k * v * v * v);
                        let t = u.tanh();
                        let du = c * (T::one() + three * k * v * v);
                        let dydx = half * (T::one() + t) + half * v * (T::one() - t * t) * du;
                        *g += d * dydx;
                    }
                }
            }
            Op::Tanh(x) => {
                if self.wants(*x) {
                    let g = self.buf(grads, *x);
                    for ((g, &d), &o) in g.iter_mut().zip(gy).zip(y.data()) {
                        *g += d * (T::one() - o * o);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = y.cols();
                let gv = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let g = self.buf(grads, *gamma);
                    for (row, hrow) in gy.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            g[j] += row[j] * hrow[j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let g = self.buf(grads, *beta);
                    for row in gy.chunks(c) {
                        add_into(g, row);
                    }
                }
                if self.wants(*x) {
                    let inv_c = T::of(1.0 / c as f64);
                    let g = self.buf(grads, *x);
                    let mut dh = vec![T::zero(); c];
                    for (r, (row, hrow)) in gy.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            dh[j] = row[j] * gv[j];
                            m1 += dh[j];
                            m2 += dh[j] * hrow[j];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        let gr = &mut g[r * c..(r + 1) * c];
                        for j in 0..c {
                            gr[j] += rstd[r] * (dh[j] - m1 - hrow[j] * m2);
                        }
                    }
                }
            }
            Op::SelectRows { sources, picks } => {
                let c = y.cols();
                for (r, &(s, row)) in picks.iter().enumerate() {
                    let src = sources[s as usize];
                    if !self.wants(src) {
                        continue;
                    }
                    let g = self.buf(grads, src);
                    let dst = &mut g[row as usize * c..(row as usize + 1) * c];
                    add_into(dst, &gy[r * c..(r + 1) * c]);
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let rows = y.rows();
                if self.wants(*a) {
                    let g = self.buf(grads, *a);
                    for r in 0..rows {
                        add_into(
                            &mut g[r * ca..(r + 1) * ca],
                            &gy[r * (ca + cb)..r * (ca + cb) + ca],
                        );
                    }
                }
                if self.wants(*b) {
                    let g = self.buf(grads, *b);
                    for r in 0..rows {
                        add_into(
                            &mut g[r * cb..(r + 1) * cb],
                            &gy[r * (ca + cb) + ca..(r + 1) * (ca + cb)],
                        );
                    }
                }
            }
            Op::Rope { x, heads, cos, sin } => {
                if self.wants(*x) {
                    let d = y.cols();
                    let mut tmp = gy.to_vec();
                    rotate_rows(&mut tmp, d, *heads, d / heads / 2, cos, sin, true);
                    add_into(self.buf(grads, *x), &tmp);
                }
            }
            Op::HeadNorm { x, heads, norms } => {
                if self.wants(*x) {
                    let dh = y.cols() / heads;
                    let g = self.buf(grads, *x);
                    for (s, n) in norms.iter().enumerate() {
                        let ys = &y.data()[s * dh..(s + 1) * dh];
                        let gs = &gy[s * dh..(s + 1) * dh];
                        let dot = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum::<T>();
                        let out = &mut g[s * dh..(s + 1) * dh];
                        for j in 0..dh {
                            out[j] += (gs[j] - ys[j] * dot) / *n;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                temp,
                scale,
                spec,
                probs,
            } => self.attention_backward(gy, *q, *k, *v, *temp, *scale, spec, probs, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let c = self.value(*logits).cols();
                    let n = targets.len();
                    let s = gy[0] / T::of(n as f64);
                    let g = self.buf(grads, *logits);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t as usize { T::one() } else { T::zero() };
                            g[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    for g in self.buf(grads, *x).iter_mut() {
                        *g += gy[0];
                    }
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).len();
                    let s = gy[0] / T::of(n as f64);
                    for g in self.buf(grads, *x).iter_mut() {
                        *g += s;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn linear_backward(
        &self,
        gy: &[T],
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        m: usize,
        k: usize,
        n: usize,
        grads: &mut [Option<Vec<T>>],
    ) {
        if self.wants(x) {
            let wv = self.value(w).data();
            let g = self.buf(grads, x);
            gemm(
                T::one(),
                gy,
                View::rm(0, m, n, n),
                wv,
                View::rm(0, k, n, n).t(),
                T::one(),
                g,
                View::rm(0, m, k, k),
            );
        }
        if self.wants(w) {
            let xv = self.value(x).data();
            let g = self.buf(grads, w);
            gemm(
                T::one(),
                xv,
                View::rm(0, m, k, k).t(),
                gy,
                View::rm(0, m, n, n),
                T::one(),
                g,
                View::rm(0, k, n, n),
            );
        }
        if let Some(b) = b {
            if self.wants(b) {
                let g = self.buf(grads, b);
                for row in gy.chunks(n) {
                    add_into(g, row);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        gy: &[T],
        q: NodeId,
        k: NodeId,
        v: NodeId,
        temp: Option<NodeId>,
        scale: T,
        spec: &AttnSpec,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let d = self.value(q).cols();
        let AttnSpec {
            heads,
            batch,
            lq,
            lk,
            ..
        } = *spec;
        let dh = d / heads;
        let temps: Option<&[T]> = temp.map(|t| self.value(t).data());
        let mut dq = self.wants(q).then(|| vec![T::zero(); batch * lq * d]);
        let mut dk = self.wants(k).then(|| vec![T::zero(); batch * lk * d]);
        let mut dv = self.wants(v).then(|| vec![T::zero(); batch * lk * d]);
        let mut dtemp = temp
            .filter(|t| self.wants(*t))
            .map(|_| vec![T::zero(); heads]);
        let mut dp = vec![T::zero(); lq * lk];
        let mut raw = vec![T::zero(); lq * lk];
        for b in 0..batch {
            for h in 0..heads {
                let s = temps.map_or(scale, |t| t[h]);
                let base = (b * heads + h) * lq * lk;
                let p = &probs[base..base + lq * lk];
                let qview = View::rm(b * lq * d + h * dh, lq, dh, d);
                let kview = View::rm(b * lk * d + h * dh, lk, dh, d);
                let oview = View::rm(b * lq * d + h * dh, lq, dh, d);
                if let Some(dv) = dv.as_mut() {
                    gemm(
                        T::one(),
                        p,
                        View::rm(0, lq, lk, lk).t(),
                        gy,
                        oview,
                        T::one(),
                        dv,
                        kview,
                    );
                }
                // dP = dO · Vᵀ
                gemm(
                    T::one(),
                    gy,
                    oview,
                    vv,
                    kview.t(),
                    T::zero(),
                    &mut dp,
                    View::rm(0, lq, lk, lk),
                );
                // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                for i in 0..lq {
                    let pr = &p[i * lk..(i + 1) * lk];
                    let dr = &mut dp[i * lk..(i + 1) * lk];
                    let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                    for (dd, &pp) in dr.iter_mut().zip(pr) {
                        *dd = pp * (*dd - dot);
                    }
                }
                if let Some(dt) = dtemp.as_mut() {
                    gemm(
                        T::one(),
                        qv,
                        qview,
                        kv,
                        kview.t(),
                        T::zero(),
                        &mut raw,
                        View::rm(0, lq, lk, lk),
                    );
                    dt[h] += dp.iter().zip(&raw).map(|(&a, &b)| a * b).sum::<T>();
                }
                if let Some(dq) = dq.as_mut() {
                    gemm(
                        s,
                        &dp,
                        View::rm(0, lq, lk, lk),
                        kv,
                        kview,
                        T::one(),
                        dq,
                        qview,
                    );
                }
                if let Some(dk) = dk.as_mut() {
                    gemm(
                        s,
                        &dp,
                        View::rm(0, lq, lk, lk).t(),
                        qv,
                        qview,
                        T::one(),
                        dk,
                        kview,
                    );
                }
            }
        }
        if let Some(g) = dq {
            add_into(self.buf(grads, q), &g);
        }
        if let Some(g) = dk {
            add_into(self.buf(grads, k), &g);
        }
        if let Some(g) = dv {
            add_into(self.buf(grads, v), &g);
        }
        if let (Some(g), Some(t)) = (dtemp, temp) {
            add_into(self.buf(grads, t), &g);
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[allow(clippy::too_many_arguments)]
fn rotate_rows<T: Scalar>(
    data: &mut [T],
    d: usize,
    heads: usize,
    half: usize,
    cos: &[T],
    sin: &[T],
    inverse: bool,
) {
    let dh = d / heads;
    for (r, row) in data.chunks_mut(d).enumerate() {
        let cr = &cos[r * half..(r + 1) * half];
        let sr = &sin[r * half..(r + 1) * half];
        for h in 0..heads {
            let seg = &mut row[h * dh..(h + 1) * dh];
            for t in 0..half {
                let (a, b) = (seg[2 * t], seg[2 * t + 1]);
                let (c, s) = (cr[t], if inverse { -sr[t] } else { sr[t] });
                seg[2 * t] = a * c - b * s;
                seg[2 * t + 1] = a * s + b * c;
            }
        }
    }
}
