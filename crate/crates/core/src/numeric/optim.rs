//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use super::graph::Gradients;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f32]> {
        self.moments.get(name).map(|m| m.m.as_slice())
    }

    /// One update over every parameter in `params`. Parameters without a
    /// gradient are treated as having a zero gradient (they still decay).
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients<f32>) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params.get(name)?;
            if p.dims() != g.dims() {
                return Err(Error::shape(
                    "adamw",
                    format!("{name}: param {:?} grad {:?}", p.dims(), g.dims()),
                ));
            }
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - (beta1 as f64).powi(t);
        let bc2 = 1.0 - (beta2 as f64).powi(t);
        let decay = 1.0 - lr * weight_decay;
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let p: &mut Tensor = params.get_mut(&name)?;
            let n = p.len();
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let g = grads.get(&name).map(|g| g.data());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * gi;
                mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * gi * gi;
                let mhat = mom.m[i] as f64 / bc1;
                let vhat = mom.v[i] as f64 / bc2;
                *w *= decay;
                *w -= (lr as f64 * mhat / (vhat.sqrt() + eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::graph::Graph;

    fn one_param(v: f32) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(vec![1], vec![v]).unwrap());
        p
    }

    fn grads_for(store: &ParamStore, g: f32) -> Gradients<f32> {
        // loss = g * w, so dloss/dw = g.
        let mut graph = Graph::new();
        let w = graph.param("w", store.get("w").unwrap());
        let c = graph.constant(Tensor::new(vec![1], vec![g]).unwrap());
        let prod = graph.mul(w, c).unwrap();
        let loss = graph.sum(prod).unwrap();
        graph.backward(loss).unwrap()
    }

    #[test]
    fn zero_grads_without_decay_leave_params() {
        let mut p = one_param(0.7);
        let g = grads_for(&p, 0.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.7]);
    }

    #[test]
    fn first_step_is_sign_times_lr() {
        for g in [0.3f32, -2.0, 1e-3] {
            let mut p = one_param(1.0);
            let grads = grads_for(&p, g);
            let cfg = AdamWConfig {
                lr: 1e-2,
                weight_decay: 0.0,
                ..Default::default()
            };
            let mut opt = AdamW::new(cfg);
            opt.step(&mut p, &grads).unwrap();
            let want = 1.0 - cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p.get("w").unwrap().data()[0] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn decay_only_scales_params() {
        let mut p = one_param(2.0);
        let g = grads_for(&p, 0.0);
        let cfg = AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.05,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg);
        opt.step(&mut p, &g).unwrap();
        let want = 2.0 * (1.0 - 1e-3 * 0.05);
        assert!((p.get("w").unwrap().data()[0] - want).abs() < 1e-7);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = one_param(1.0);
        let mut other = ParamStore::new();
        other.insert("w", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let g = {
            let mut graph = Graph::new();
            let w = graph.param("w", other.get("w").unwrap());
            let loss = graph.sum(w).unwrap();
            graph.backward(loss).unwrap()
        };
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut p, &g), Err(Error::Shape { .. })));
    }
}
