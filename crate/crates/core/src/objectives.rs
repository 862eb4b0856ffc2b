//! Training losses: sampled softmax for pre-training, pointwise click BCE,
//! original and calibrated BPR, and the combined fine-tuning objective.
//!
//! Every loss has a plain scalar form and a graph form. The graph forms are
//! what the trainer differentiates; the scalar forms serve inspection and
//! evaluation.

use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::event::{Labels, Signal};
use crate::model::{CalibrationIds, Model};
use crate::tensor::{Tensor, TensorError};

pub const DEFAULT_POINTWISE_WEIGHT: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("sampled softmax needs at least one negative")]
    NoNegatives,
    #[error("group has {items} items but {labels} label rows")]
    LabelCount { items: usize, labels: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Calibration scalars of one signal's sigmoid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignalCalibration {
    pub gamma: f64,
    pub gamma_ctx: f64,
    pub beta: f64,
}

impl SignalCalibration {
    pub fn logit(&self, r: f64, r_ctx: f64) -> f64 {
        self.gamma * r + self.gamma_ctx * r_ctx + self.beta
    }
}

/// All loss-side scalars as plain numbers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationParams {
    pub tau: f64,
    pub signals: [SignalCalibration; 4],
    pub alpha_cl: f64,
    pub alpha_ctx: f64,
    pub beta_cl: f64,
    pub pointwise_weight: f64,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self {
            tau: crate::model::DEFAULT_TAU,
            signals: [SignalCalibration {
                gamma: 1.0,
                gamma_ctx: 0.0,
                beta: 0.0,
            }; 4],
            alpha_cl: 1.0,
            alpha_ctx: 0.0,
            beta_cl: 0.0,
            pointwise_weight: DEFAULT_POINTWISE_WEIGHT,
        }
    }
}

impl CalibrationParams {
    pub fn from_model(model: &Model, pointwise_weight: f64) -> Self {
        let c = &model.ids.calib;
        let signals = Signal::ALL.map(|k| SignalCalibration {
            gamma: model.scalar(c.gamma[k.index()]),
            gamma_ctx: model.scalar(c.gamma_ctx[k.index()]),
            beta: model.scalar(c.beta[k.index()]),
        });
        Self {
            tau: model.temperature(),
            signals,
            alpha_cl: model.scalar(c.alpha_cl),
            alpha_ctx: model.scalar(c.alpha_ctx),
            beta_cl: model.scalar(c.beta_cl),
            pointwise_weight,
        }
    }

    pub fn click_logit(&self, r: f64, r_ctx: f64) -> f64 {
        self.alpha_cl * r + self.alpha_ctx * r_ctx + self.beta_cl
    }

    /// Predicted click probability of one impression.
    pub fn click_probability(&self, r: f64, r_ctx: f64) -> f64 {
        sigmoid(self.click_logit(r, r_ctx))
    }
}

/// `-log softmax` of the positive among the positive and its negatives, with
/// similarities scaled by `tau`.
pub fn pretrain_loss(r_pos: f64, r_neg: &[f64], tau: f64) -> Result<f64, ObjectiveError> {
    if r_neg.is_empty() {
        return Err(ObjectiveError::NoNegatives);
    }
    let logits = std::iter::once(r_pos).chain(r_neg.iter().copied()).map(|r| tau * r);
    let m = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.map(|z| (z - m).exp()).sum::<f64>().ln();
    Ok((lse - tau * r_pos).max(0.0))
}

/// Binary cross-entropy of the click head in logit form.
pub fn bce_click(r: f64, r_ctx: f64, clicked: bool, p: &CalibrationParams) -> f64 {
    let z = p.click_logit(r, r_ctx);
    softplus(z) - if clicked { z } else { 0.0 }
}

pub fn bpr_original(r_pos: f64, r_neg: f64, gamma: f64) -> f64 {
    softplus(-gamma * (r_pos - r_neg))
}

/// `-log(f_p / (f_p + f_n))` with `f = sigmoid(gamma r + gamma_ctx r_ctx + beta)`,
/// evaluated as `softplus(log f_n - log f_p)`.
pub fn bpr_calibrated(r_pos: f64, r_neg: f64, r_ctx: f64, k: &SignalCalibration) -> f64 {
    softplus(log_sigmoid(k.logit(r_neg, r_ctx)) - log_sigmoid(k.logit(r_pos, r_ctx)))
}

/// Ordered (positive, non-positive) index pairs for one signal, positive
/// index major.
pub fn signal_pairs(labels: &[Labels], k: Signal) -> Vec<(usize, usize)> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i][k.index()]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i][k.index()]).collect();
    pos.iter()
        .flat_map(|&p| neg.iter().map(move |&n| (p, n)))
        .collect()
}

/// Per-signal mean calibrated BPR summed over signals, plus the weighted mean
/// click BCE over impressions. Signals without pairs contribute nothing.
pub fn finetune_objective(
    r: &[f64],
    r_ctx: f64,
    labels: &[Labels],
    p: &CalibrationParams,
) -> Result<f64, ObjectiveError> {
    if r.len() != labels.len() {
        return Err(ObjectiveError::LabelCount {
            items: r.len(),
            labels: labels.len(),
        });
    }
    let mut total = 0.0;
    for k in Signal::ALL {
        let pairs = signal_pairs(labels, k);
        if pairs.is_empty() {
            continue;
        }
        let cal = &p.signals[k.index()];
        let s: f64 = pairs
            .iter()
            .map(|&(i, j)| bpr_calibrated(r[i], r[j], r_ctx, cal))
            .sum();
        total += s / pairs.len() as f64;
    }
    if !r.is_empty() && p.pointwise_weight != 0.0 {
        let s: f64 = r
            .iter()
            .zip(labels)
            .map(|(ri, l)| bce_click(*ri, r_ctx, l[Signal::Click.index()], p))
            .sum();
        total += p.pointwise_weight * s / r.len() as f64;
    }
    Ok(total)
}

/// Graph handles of the calibration scalars.
#[derive(Clone, Copy, Debug)]
pub struct CalibrationVars {
    pub gamma: [Var; 4],
    pub gamma_ctx: [Var; 4],
    pub beta: [Var; 4],
    pub alpha_cl: Var,
    pub alpha_ctx: Var,
    pub beta_cl: Var,
}

impl CalibrationVars {
    pub fn new(g: &mut Graph, c: &CalibrationIds) -> Self {
        Self {
            gamma: c.gamma.map(|id| g.param(id)),
            gamma_ctx: c.gamma_ctx.map(|id| g.param(id)),
            beta: c.beta.map(|id| g.param(id)),
            alpha_cl: g.param(c.alpha_cl),
            alpha_ctx: g.param(c.alpha_ctx),
            beta_cl: g.param(c.beta_cl),
        }
    }
}

/// `a * r + b * r_ctx + c` for a column of similarities and scalar handles.
fn affine(g: &mut Graph, r: Var, a: Var, b: Var, r_ctx: Var, c: Var) -> Result<Var, TensorError> {
    let ar = g.mul(r, a)?;
    let bc = g.mul(r_ctx, b)?;
    let z = g.add(ar, bc)?;
    g.add(z, c)
}

/// Graph form of [`finetune_objective`] for one group. `r` is `[n,1]`,
/// `r_ctx` holds one value.
pub fn finetune_objective_graph(
    g: &mut Graph,
    r: Var,
    r_ctx: Var,
    labels: &[Labels],
    cal: &CalibrationVars,
    pointwise_weight: f64,
) -> Result<Var, ObjectiveError> {
    let n = g.value(r).len();
    if n != labels.len() {
        return Err(ObjectiveError::LabelCount {
            items: n,
            labels: labels.len(),
        });
    }
    let mut terms = Vec::new();
    for k in Signal::ALL {
        let pairs = signal_pairs(labels, k);
        if pairs.is_empty() {
            continue;
        }
        let i = k.index();
        let z = affine(g, r, cal.gamma[i], cal.gamma_ctx[i], r_ctx, cal.beta[i])?;
        let ls = g.log_sigmoid(z);
        let (pi, ni): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let lp = g.gather(ls, &pi)?;
        let ln = g.gather(ls, &ni)?;
        let diff = g.sub(ln, lp)?;
        let l = g.softplus(diff);
        let s = g.sum_all(l);
        terms.push(g.scale(s, 1.0 / pairs.len() as f64));
    }
    if pointwise_weight != 0.0 {
        let z = affine(g, r, cal.alpha_cl, cal.alpha_ctx, r_ctx, cal.beta_cl)?;
        let sp = g.softplus(z);
        let y: Vec<f64> = labels
            .iter()
            .map(|l| if l[Signal::Click.index()] { 1.0 } else { 0.0 })
            .collect();
        let y = g.constant(Tensor::new(vec![n, 1], y)?);
        let yz = g.mul(z, y)?;
        let b = g.sub(sp, yz)?;
        let s = g.sum_all(b);
        terms.push(g.scale(s, pointwise_weight / n as f64));
    }
    Ok(sum_terms(g, &terms)?)
}

fn sum_terms(g: &mut Graph, terms: &[Var]) -> Result<Var, TensorError> {
    match terms.split_first() {
        None => Ok(g.constant(Tensor::scalar(0.0))),
        Some((first, rest)) => rest.iter().try_fold(*first, |acc, t| g.add(acc, *t)),
    }
}

/// Mean in-batch sampled-softmax loss. Row `b` of `users` and `items` form a
/// positive pair; every other item in the batch is a negative for user `b`.
pub fn pretrain_loss_graph(g: &mut Graph, users: Var, items: Var, tau_raw: Var) -> Result<Var, ObjectiveError> {
    let b = g.value(users).rows();
    if b < 2 {
        return Err(ObjectiveError::NoNegatives);
    }
    let vt = g.transpose(items)?;
    let sims = g.matmul(users, vt)?;
    let tau = g.softplus(tau_raw);
    let logits = g.mul(sims, tau)?;
    let lse = g.logsumexp(logits);
    let flat = g.reshape(logits, vec![b * b, 1])?;
    let diag: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let pos = g.gather(flat, &diag)?;
    let per = g.sub(lse, pos)?;
    let s = g.sum_all(per);
    Ok(g.scale(s, 1.0 / b as f64))
}
