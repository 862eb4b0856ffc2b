//! Adam with per-group learning rates and groupwise gradient clipping.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::params::{Gradients, ParamGroup, ParamId, ParamStore};

use super::TrainError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Scales the group's gradients down to `max_norm` when their joint L2
/// norm exceeds it. Returns the norm before clipping.
pub fn clip_group(grads: &mut Gradients, store: &ParamStore, group: ParamGroup, max_norm: f64) -> Result<f64, TrainError> {
    if !(max_norm > 0.0) {
        return Err(TrainError::Config(format!("clip norm must be > 0, got {max_norm}")));
    }
    let norm = grads.group_norm_sq(store, group).sqrt();
    if norm > max_norm {
        grads.scale_group(store, group, max_norm / norm);
    }
    Ok(norm)
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Drops gradients of `frozen`, clips each group to `clip[group]`, then
    /// applies one Adam update with `rates[group]`. Returns pre-clip norms.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        mut grads: Gradients,
        rates: [f64; 4],
        clip: [f64; 4],
        frozen: &BTreeSet<ParamId>,
    ) -> Result<[f64; 4], TrainError> {
        for id in frozen {
            grads.remove(*id);
        }
        let mut norms = [0.0; 4];
        for g in ParamGroup::ALL {
            norms[g.index()] = clip_group(&mut grads, store, g, clip[g.index()])?;
        }
        self.t += 1;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let mut dense = Vec::new();
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if frozen.contains(&id) {
                continue;
            }
            let lr = rates[store.get(id).group.index()];
            let n = store.value(id).len();
            dense.clear();
            dense.resize(n, 0.0);
            if let Some(g) = grads.get(id) {
                g.add_into(&mut dense);
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.value_mut(id).data_mut();
            for k in 0..n {
                let g = dense[k];
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let update = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                p[k] -= update;
            }
        }
        Ok(norms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store() -> (ParamStore, ParamId, ParamId) {
        let mut s = ParamStore::new();
        let a = s.add("emb.a", ParamGroup::Embeddings, Tensor::vector(vec![1.0, -2.0]));
        let b = s.add("user.b", ParamGroup::Transformer, Tensor::vector(vec![0.5]));
        (s, a, b)
    }

    fn grads(a: ParamId, ga: &[f64], b: ParamId, gb: &[f64]) -> Gradients {
        let mut g = Gradients::new();
        g.add_dense(a, ga);
        g.add_dense(b, gb);
        g
    }

    #[test]
    fn clipping_cases() {
        let (s, a, b) = store();
        let mut g = grads(a, &[0.3, 0.4], b, &[7.0]);
        assert_eq!(clip_group(&mut g, &s, ParamGroup::Embeddings, 1.0).unwrap(), 0.5);
        assert_eq!(g.dense(a, &s).data(), &[0.3, 0.4]);

        let mut g = grads(a, &[1.2, 1.6], b, &[7.0]);
        assert!((clip_group(&mut g, &s, ParamGroup::Embeddings, 1.0).unwrap() - 2.0).abs() < 1e-12);
        assert!((g.group_norm_sq(&s, ParamGroup::Embeddings).sqrt() - 1.0).abs() < 1e-6);
        assert_eq!(g.dense(b, &s).data(), &[7.0]);

        let mut g = grads(a, &[0.0, 0.0], b, &[0.0]);
        assert_eq!(clip_group(&mut g, &s, ParamGroup::Transformer, 1.0).unwrap(), 0.0);
        assert_eq!(g.dense(b, &s).data(), &[0.0]);
        assert!(clip_group(&mut g, &s, ParamGroup::Transformer, 0.0).is_err());
    }

    #[test]
    fn zero_rates_leave_parameters_bit_identical() {
        let (mut s, a, b) = store();
        let before = s.clone();
        let mut opt = Adam::new(&s, AdamConfig::default());
        for _ in 0..3 {
            let g = grads(a, &[0.1, -3.0], b, &[1e-9]);
            opt.step(&mut s, g, [0.0; 4], [1.0; 4], &BTreeSet::new()).unwrap();
        }
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_moves_by_the_rate_against_the_gradient_sign() {
        let (mut s, a, b) = store();
        let mut opt = Adam::new(&s, AdamConfig::default());
        let g = grads(a, &[0.2, -0.1], b, &[0.0]);
        opt.step(&mut s, g, [0.01; 4], [10.0; 4], &BTreeSet::new()).unwrap();
        let v = s.value(a).data();
        assert!((v[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((v[1] - (-2.0 + 0.01)).abs() < 1e-6);
        assert_eq!(s.value(b).data(), &[0.5]);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let (mut s, a, b) = store();
        let mut opt = Adam::new(&s, AdamConfig::default());
        let frozen = BTreeSet::from([b]);
        let g = grads(a, &[0.2, 0.2], b, &[5.0]);
        opt.step(&mut s, g, [0.1; 4], [1.0; 4], &frozen).unwrap();
        assert_eq!(s.value(b).data(), &[0.5]);
        assert_ne!(s.value(a).data(), &[1.0, -2.0]);
    }
}
