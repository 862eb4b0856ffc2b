//! Two-stage training: retrieval pre-training with in-batch negatives, then
//! ranking fine-tuning on impression groups, plus the continuous mode that
//! resumes from a previous model.

mod optim;
mod schedule;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use optim::{clip_group, Adam, AdamConfig};
pub use schedule::{lr_at, Schedule, ScheduleMode};

use crate::autodiff::{Graph, Var};
use crate::dataset::{Encoded, ImpressionGroup, PretrainSample};
use crate::model::{context_score, item_tower, user_tower, user_towers, EncodedEvent, Model, TowerConfig};
use crate::objectives::{finetune_objective_graph, pretrain_loss_graph, CalibrationVars, ObjectiveError};
use crate::params::{ParamGroup, ParamId};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("no {0} to train on")]
    Empty(&'static str),
    #[error("item {0} has no title")]
    MissingTitle(u64),
    #[error("checkpoint does not match config: {0}")]
    ConfigMismatch(String),
    #[error("non-finite loss at {stage} step {step}")]
    NonFinite { stage: &'static str, step: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// One value per optimizer group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupValues {
    pub embeddings: f64,
    pub transformer: f64,
    pub candidate_tower: f64,
    pub loss_params: f64,
}

impl GroupValues {
    pub fn splat(v: f64) -> Self {
        Self {
            embeddings: v,
            transformer: v,
            candidate_tower: v,
            loss_params: v,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.embeddings, self.transformer, self.candidate_tower, self.loss_params]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    /// Samples per batch when pre-training, impression groups when fine-tuning.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: GroupValues,
    pub clip: GroupValues,
    pub warmup_steps: usize,
    pub schedule: ScheduleMode,
    pub frozen: Vec<ParamGroup>,
}

impl StageConfig {
    fn pretrain_default() -> Self {
        Self {
            batch_size: 128,
            epochs: 2,
            lr: GroupValues::splat(2e-3),
            clip: GroupValues::splat(1.0),
            warmup_steps: 100,
            schedule: ScheduleMode::WarmupLinearDecay,
            frozen: Vec::new(),
        }
    }

    fn finetune_default() -> Self {
        Self {
            batch_size: 16,
            epochs: 1,
            lr: GroupValues {
                loss_params: 1e-2,
                ..GroupValues::splat(1e-3)
            },
            warmup_steps: 20,
            ..Self::pretrain_default()
        }
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::pretrain_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Set from the run seed, not read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    /// Weight of the pointwise click term in the fine-tuning objective.
    pub pointwise_weight: f64,
    /// Whether fine-tuning uses the context tower; off gives r_ctx = 0.
    pub context_tower: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pretrain: StageConfig::pretrain_default(),
            finetune: StageConfig::finetune_default(),
            pointwise_weight: crate::objectives::DEFAULT_POINTWISE_WEIGHT,
            context_tower: true,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageReport {
    pub steps: usize,
    /// Mean batch loss of each epoch.
    pub epoch_loss: Vec<f64>,
    /// Rows that hit the l2-normalization floor.
    pub degenerate_norms: usize,
}

fn recent(h: &[EncodedEvent], max: usize) -> &[EncodedEvent] {
    &h[h.len().saturating_sub(max)..]
}

fn titles<'e>(enc: &'e Encoded, items: impl Iterator<Item = u64>) -> Result<Vec<&'e [u32]>, TrainError> {
    items
        .map(|i| enc.title(i).ok_or(TrainError::MissingTitle(i)))
        .collect()
}

/// Mean in-batch softmax loss of one pre-training batch.
pub fn pretrain_batch_loss(
    g: &mut Graph,
    model: &Model,
    batch: &[&PretrainSample],
    enc: &Encoded,
) -> Result<Var, TrainError> {
    let max = model.config.max_history;
    let histories: Vec<&[EncodedEvent]> = batch.iter().map(|s| recent(enc.history(&s.history), max)).collect();
    let users = user_towers(g, model, &histories)?;
    let t = titles(enc, batch.iter().map(|s| s.item))?;
    let items = item_tower(g, model, &t)?;
    let tau = g.param(model.ids.calib.tau_raw);
    Ok(pretrain_loss_graph(g, users, items, tau)?)
}

/// Mean fine-tuning objective over the groups of one batch.
pub fn finetune_batch_loss(
    g: &mut Graph,
    model: &Model,
    batch: &[&ImpressionGroup],
    enc: &Encoded,
    cfg: &TrainConfig,
) -> Result<Var, TrainError> {
    let cal = CalibrationVars::new(g, &model.ids.calib);
    let max = model.config.max_history;
    let mut total: Option<Var> = None;
    for group in batch {
        let u = user_tower(g, model, recent(enc.history(&group.history), max), None)?;
        let t = titles(enc, group.items.iter().copied())?;
        let v = item_tower(g, model, &t)?;
        let ut = g.transpose(u)?;
        let r = g.matmul(v, ut)?;
        let r_ctx = if cfg.context_tower {
            context_score(
                g,
                model,
                crate::model::Context {
                    surface: group.surface,
                    device: group.device,
                },
            )?
        } else {
            g.constant(Tensor::scalar(0.0))
        };
        let obj = finetune_objective_graph(g, r, r_ctx, &group.labels, &cal, cfg.pointwise_weight)?;
        total = Some(match total {
            None => obj,
            Some(acc) => g.add(acc, obj)?,
        });
    }
    let total = total.ok_or(TrainError::Empty("impression groups"))?;
    Ok(g.scale(total, 1.0 / batch.len() as f64))
}

struct Stage<'a> {
    name: &'static str,
    cfg: &'a StageConfig,
    mode: ScheduleMode,
    frozen: BTreeSet<ParamId>,
    seed: u64,
    min_batch: usize,
}

fn run_stage<T, F>(model: &mut Model, data: &[T], stage: Stage, adam: &AdamConfig, loss: F) -> Result<StageReport, TrainError>
where
    F: Fn(&mut Graph, &Model, &[&T]) -> Result<Var, TrainError>,
{
    let b = stage.cfg.batch_size;
    if b == 0 {
        return Err(TrainError::Config(format!("{} batch_size must be positive", stage.name)));
    }
    let per_epoch = data.len() / b + usize::from(data.len() % b >= stage.min_batch);
    let total = per_epoch * stage.cfg.epochs;
    let schedule = Schedule::new(
        stage.cfg.lr.to_array(),
        stage.cfg.warmup_steps.min(total),
        total,
        stage.mode,
    )?;
    let clip = stage.cfg.clip.to_array();
    let mut frozen = stage.frozen;
    for (id, p) in model.store.iter() {
        if stage.cfg.frozen.contains(&p.group) {
            frozen.insert(id);
        }
    }
    let mut opt = Adam::new(&model.store, adam.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(stage.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = StageReport::default();
    for _ in 0..stage.cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(b) {
            if chunk.len() < stage.min_batch {
                continue;
            }
            let batch: Vec<&T> = chunk.iter().map(|&i| &data[i]).collect();
            let (value, grads, degenerate) = {
                let mut g = Graph::new(&model.store);
                let l = loss(&mut g, model, &batch)?;
                let back = g.backward(l)?;
                (g.value(l).item(), back.params, g.degenerate_norms())
            };
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    stage: stage.name,
                    step: report.steps,
                });
            }
            let mut rates = [0.0; 4];
            for grp in ParamGroup::ALL {
                rates[grp.index()] = lr_at(report.steps + 1, &schedule, grp)?;
            }
            opt.step(&mut model.store, grads, rates, clip, &frozen)?;
            report.steps += 1;
            report.degenerate_norms += degenerate;
            sum += value;
            batches += 1;
        }
        report.epoch_loss.push(if batches > 0 { sum / batches as f64 } else { f64::NAN });
    }
    Ok(report)
}

/// Pre-trains with in-batch negatives: every other positive item in the
/// batch is a negative for each sample.
pub fn pretrain_run(
    mut model: Model,
    samples: &[PretrainSample],
    enc: &Encoded,
    cfg: &TrainConfig,
) -> Result<(Model, StageReport), TrainError> {
    if samples.len() < 2 {
        return Err(TrainError::Empty("pre-training samples"));
    }
    let stage = Stage {
        name: "pretrain",
        cfg: &cfg.pretrain,
        mode: cfg.pretrain.schedule,
        frozen: BTreeSet::new(),
        seed: cfg.seed ^ 0x7072_6574,
        min_batch: 2,
    };
    let report = run_stage(&mut model, samples, stage, &cfg.adam, |g, m, b| pretrain_batch_loss(g, m, b, enc))?;
    Ok((model, report))
}

/// Fine-tunes on impression groups, from a pre-trained or a fresh model.
pub fn finetune_run(
    mut model: Model,
    groups: &[ImpressionGroup],
    enc: &Encoded,
    cfg: &TrainConfig,
) -> Result<(Model, StageReport), TrainError> {
    if groups.is_empty() {
        return Err(TrainError::Empty("impression groups"));
    }
    let stage = Stage {
        name: "finetune",
        cfg: &cfg.finetune,
        mode: cfg.finetune.schedule,
        frozen: BTreeSet::new(),
        seed: cfg.seed ^ 0x6669_6e65,
        min_batch: 1,
    };
    let report = run_stage(&mut model, groups, stage, &cfg.adam, |g, m, b| finetune_batch_loss(g, m, b, enc, cfg))?;
    Ok((model, report))
}

/// Continues fine-tuning a previous model on new groups. The calibration
/// scalars inside the sigmoids stay frozen, the rate is constant and the
/// optimizer starts from scratch.
pub fn continuous_finetune(
    mut prev: Model,
    expected: &TowerConfig,
    groups: &[ImpressionGroup],
    enc: &Encoded,
    cfg: &TrainConfig,
) -> Result<(Model, StageReport), TrainError> {
    if prev.config != *expected {
        return Err(TrainError::ConfigMismatch(format!(
            "checkpoint has {:?}, config asks for {:?}",
            prev.config, expected
        )));
    }
    if groups.is_empty() {
        return Err(TrainError::Empty("impression groups"));
    }
    let stage = Stage {
        name: "continuous",
        cfg: &cfg.finetune,
        mode: ScheduleMode::Constant,
        frozen: prev.ids.calib.sigmoid_inner().into_iter().collect(),
        seed: cfg.seed ^ 0x636f_6e74,
        min_batch: 1,
    };
    let report = run_stage(&mut prev, groups, stage, &cfg.adam, |g, m, b| finetune_batch_loss(g, m, b, enc, cfg))?;
    Ok((prev, report))
}

/// Pre-training loss of `batch` under `model`, without updating it.
pub fn pretrain_loss_value(model: &Model, batch: &[&PretrainSample], enc: &Encoded) -> Result<f64, TrainError> {
    let mut g = Graph::inference(&model.store);
    let l = pretrain_batch_loss(&mut g, model, batch, enc)?;
    Ok(g.value(l).item())
}

/// Mean fine-tuning objective of `groups` under `model`.
pub fn finetune_loss_value(
    model: &Model,
    groups: &[&ImpressionGroup],
    enc: &Encoded,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let mut g = Graph::inference(&model.store);
    let l = finetune_batch_loss(&mut g, model, groups, enc, cfg)?;
    Ok(g.value(l).item())
}
