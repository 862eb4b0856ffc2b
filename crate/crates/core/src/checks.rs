//! Gradient checks run by the `gradcheck` command: every autodiff
//! primitive on random inputs, then end-to-end derivatives of a tiny model.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{gradcheck_params, primitive_suite, GradcheckReport, DEFAULT_TOL};
use crate::autodiff::{Graph, Var};
use crate::event::EventKind;
use crate::model::{context_score, item_tower, user_tower, Context, EncodedEvent, Model, TowerConfig};
use crate::objectives::{finetune_objective_graph, CalibrationVars, DEFAULT_POINTWISE_WEIGHT};
use crate::tensor::TensorError;

/// Random shapes per primitive.
pub const TRIALS: usize = 3;

pub fn tiny_config() -> TowerConfig {
    TowerConfig {
        d: 8,
        user_layers: 1,
        user_heads: 2,
        ffn_hidden: 16,
        item_layers: 2,
        item_hidden: 8,
        max_history: 3,
        max_positions: 4,
        vocab_size: 10,
        n_surfaces: 3,
        n_devices: 2,
    }
}

/// A tiny model with every parameter shifted by up to `scale`, so the
/// check does not sit in the near-zero initial regime.
pub fn perturbed_model(seed: u64, scale: f64) -> Model {
    let mut m = Model::new(tiny_config(), seed).expect("tiny config is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        for x in m.store.value_mut(id).data_mut() {
            *x += rng.random_range(-scale..scale);
        }
    }
    m
}

fn ev(kind: EventKind, tokens: &[u32]) -> EncodedEvent {
    EncodedEvent {
        kind,
        tokens: Arc::from(tokens),
    }
}

/// Similarity of one user/item pair as a 1x1 graph value.
pub fn similarity_graph(g: &mut Graph, m: &Model, events: &[EncodedEvent], title: &[u32]) -> Result<Var, TensorError> {
    let u = user_tower(g, m, events, None)?;
    let v = item_tower(g, m, &[title])?;
    let vt = g.transpose(v)?;
    g.matmul(u, vt)
}

pub fn gradcheck_suite(seed: u64) -> Vec<GradcheckReport> {
    let mut out = primitive_suite(seed, TRIALS, DEFAULT_TOL);
    let m = perturbed_model(seed, 0.3);
    let events = [
        ev(EventKind::WebQuery, &[1, 2]),
        ev(EventKind::Click, &[3, 4]),
        ev(EventKind::Purchase, &[5]),
    ];
    out.push(gradcheck_params(
        "end-to-end similarity",
        &m.store,
        |g| similarity_graph(g, &m, &events, &[4, 6, 6]),
        None,
        DEFAULT_TOL,
    ));
    let titles: [&[u32]; 3] = [&[4, 6], &[7], &[8, 9, 3]];
    let labels = [[true, false, true, false], [false; 4], [true, true, false, false]];
    out.push(gradcheck_params(
        "end-to-end fine-tuning objective",
        &m.store,
        |g| {
            let u = user_tower(g, &m, &events, None)?;
            let v = item_tower(g, &m, &titles)?;
            let ut = g.transpose(u)?;
            let r = g.matmul(v, ut)?;
            let r_ctx = context_score(g, &m, Context { surface: 1, device: 0 })?;
            let cal = CalibrationVars::new(g, &m.ids.calib);
            finetune_objective_graph(g, r, r_ctx, &labels, &cal, DEFAULT_POINTWISE_WEIGHT).map_err(|e| match e {
                crate::objectives::ObjectiveError::Tensor(t) => t,
                other => TensorError::Invalid {
                    primitive: "finetune_objective",
                    detail: other.to_string(),
                },
            })
        },
        None,
        DEFAULT_TOL,
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_covers_every_primitive() {
        let reports = gradcheck_suite(7);
        let n = crate::autodiff::gradcheck::PRIMITIVE_NAMES.len();
        assert_eq!(reports.len(), n * TRIALS + 2);
        for r in &reports {
            assert!(r.passed(), "{r:?}");
            assert!(r.checked > 0, "{}", r.name);
        }
    }
}
