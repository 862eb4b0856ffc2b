//! Offline evaluation: ranking metrics, the feature-gain harness and the
//! ablation runner.

pub mod ablation;
pub mod logistic;

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Encoded, ImpressionGroup};
use crate::event::{Labels, Signal};
use crate::model::{similarity, Model};
use crate::tensor::TensorError;

use logistic::Logistic;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("group has no positive item")]
    NoPositive,
    #[error("{scores} scores for {items} items")]
    Length { scores: usize, items: usize },
    #[error("item {0} has no title")]
    MissingTitle(u64),
    #[error("no groups to evaluate")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which items of an impression group take part in the ranking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceFilter {
    /// All impressed items.
    Retargeting,
    /// Only items from categories the user had not interacted with.
    Discovery,
}

impl SurfaceFilter {
    pub const ALL: [SurfaceFilter; 2] = [SurfaceFilter::Retargeting, SurfaceFilter::Discovery];

    pub fn name(self) -> &'static str {
        match self {
            SurfaceFilter::Retargeting => "retargeting",
            SurfaceFilter::Discovery => "discovery",
        }
    }

    /// Indices of the group's items kept by the filter.
    pub fn select(self, group: &ImpressionGroup) -> Vec<usize> {
        (0..group.items.len())
            .filter(|&i| self == SurfaceFilter::Retargeting || group.novel[i])
            .collect()
    }
}

/// Gain of one label set: binary click-or-stronger, or graded with click 1,
/// cart and favourite 2 and purchase 3.
pub fn relevance(labels: &Labels, graded: bool) -> f64 {
    if !graded {
        return if labels.iter().any(|&b| b) { 1.0 } else { 0.0 };
    }
    let mut r: f64 = 0.0;
    if labels[Signal::Click.index()] {
        r = 1.0;
    }
    if labels[Signal::Cart.index()] || labels[Signal::Fvrt.index()] {
        r = 2.0;
    }
    if labels[Signal::Prch.index()] {
        r = 3.0;
    }
    r
}

/// Order of items by descending score, ties by ascending id.
pub fn rank_order(scores: &[f64], ids: &[u64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| match scores[b].partial_cmp(&scores[a]) {
        Some(Ordering::Equal) | None => ids[a].cmp(&ids[b]),
        Some(o) => o,
    });
    idx
}

/// nDCG with gain `2^rel - 1` and discount `1 / log2(rank + 1)`, truncated
/// at `k` (0 keeps every rank).
pub fn ndcg(scores: &[f64], ids: &[u64], rel: &[f64], k: usize) -> Result<f64, EvalError> {
    if scores.len() != rel.len() || ids.len() != rel.len() {
        return Err(EvalError::Length {
            scores: scores.len(),
            items: rel.len(),
        });
    }
    if !rel.iter().any(|&r| r > 0.0) {
        return Err(EvalError::NoPositive);
    }
    let cut = if k == 0 { rel.len() } else { k.min(rel.len()) };
    let dcg_of = |order: &mut dyn Iterator<Item = f64>| -> f64 {
        order
            .take(cut)
            .enumerate()
            .map(|(i, r)| (2f64.powf(r) - 1.0) / ((i + 2) as f64).log2())
            .sum()
    };
    let order = rank_order(scores, ids);
    let dcg = dcg_of(&mut order.iter().map(|&i| rel[i]));
    let mut ideal = rel.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg_of(&mut ideal.into_iter());
    Ok(dcg / idcg)
}

/// Fraction of queries whose positive ranks in the top `k` of its pool.
/// Each query is `(scores over the pool, pool ids, index of the positive)`.
pub fn recall_at_k<'a>(queries: impl IntoIterator<Item = (&'a [f64], &'a [u64], usize)>, k: usize) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (scores, ids, pos) in queries {
        n += 1;
        if k == 0 {
            continue;
        }
        let (sp, ip) = (scores[pos], ids[pos]);
        let better = scores
            .iter()
            .zip(ids)
            .filter(|(s, id)| **s > sp || (**s == sp && **id < ip))
            .count();
        hit += usize::from(better < k);
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Similarities of the group's items to the user's history embedding.
pub fn group_scores(model: &Model, enc: &Encoded, group: &ImpressionGroup) -> Result<Vec<f64>, EvalError> {
    let h = enc.history(&group.history);
    let h = &h[h.len().saturating_sub(model.config.max_history)..];
    let u = model.embed_user(h)?;
    let titles = group
        .items
        .iter()
        .map(|&i| enc.title(i).ok_or(EvalError::MissingTitle(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let v = model.embed_items(&titles)?;
    Ok((0..group.items.len()).map(|r| similarity(&u, v.row_slice(r))).collect())
}

/// One filtered group ready for ranking.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranked {
    pub context: (u32, u32),
    pub ids: Vec<u64>,
    pub scores: Vec<f64>,
    pub rel: Vec<f64>,
}

/// Applies the filter and keeps groups with at least two items and one
/// positive left. `scores[g]` and `rel[g]` follow `groups[g].items`.
pub fn rank_groups(groups: &[ImpressionGroup], scores: &[Vec<f64>], rel: &[Vec<f64>], filter: SurfaceFilter) -> Vec<Ranked> {
    groups
        .iter()
        .zip(scores.iter().zip(rel))
        .filter_map(|(g, (s, r))| {
            let keep = filter.select(g);
            let ranked = Ranked {
                context: (g.surface, g.device),
                ids: keep.iter().map(|&i| g.items[i]).collect(),
                scores: keep.iter().map(|&i| s[i]).collect(),
                rel: keep.iter().map(|&i| r[i]).collect(),
            };
            (ranked.ids.len() >= 2 && ranked.rel.iter().any(|&x| x > 0.0)).then_some(ranked)
        })
        .collect()
}

pub fn mean_ndcg(groups: &[Ranked], k: usize) -> Result<f64, EvalError> {
    if groups.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sum = 0.0;
    for g in groups {
        sum += ndcg(&g.scores, &g.ids, &g.rel, k)?;
    }
    Ok(sum / groups.len() as f64)
}

/// Mean over (surface, device) cells of the per-cell mean nDCG, so every
/// context weighs the same regardless of its traffic.
pub fn context_balanced_ndcg(groups: &[Ranked], k: usize) -> Result<f64, EvalError> {
    let mut cells: BTreeMap<(u32, u32), (f64, usize)> = BTreeMap::new();
    for g in groups {
        let e = cells.entry(g.context).or_default();
        e.0 += ndcg(&g.scores, &g.ids, &g.rel, k)?;
        e.1 += 1;
    }
    if cells.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(cells.values().map(|(s, n)| s / *n as f64).sum::<f64>() / cells.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub filter: SurfaceFilter,
    pub value: f64,
    pub baseline: f64,
    pub relative_gain: f64,
    pub seeds: usize,
}

impl EvalReport {
    pub fn new(metric: impl Into<String>, filter: SurfaceFilter, value: f64, baseline: f64, seeds: usize) -> Self {
        let relative_gain = if baseline > 0.0 { (value - baseline) / baseline } else { 0.0 };
        Self {
            metric: metric.into(),
            filter,
            value,
            baseline,
            relative_gain,
            seeds,
        }
    }
}

/// Base ranker features of one impressed item: log popularity and whether
/// the user already knows the item's category.
pub fn base_features(popularity: &HashMap<u64, usize>, group: &ImpressionGroup, i: usize) -> [f64; 2] {
    let p = popularity.get(&group.items[i]).copied().unwrap_or(0);
    [(1.0 + p as f64).ln(), if group.novel[i] { 0.0 } else { 1.0 }]
}

/// Trains a logistic combiner on `train` with and without the extra
/// feature and compares test nDCG. `extra(set, g, i)` is the additional
/// feature of item `i` in group `g`, where `set` is 0 for train, 1 for test.
pub fn relative_gain_harness<F>(
    train: &[ImpressionGroup],
    test: &[ImpressionGroup],
    popularity: &HashMap<u64, usize>,
    extra: F,
    filter: SurfaceFilter,
    k: usize,
) -> Result<EvalReport, EvalError>
where
    F: Fn(usize, usize, usize) -> f64,
{
    let mut rows_base = Vec::new();
    let mut rows_full = Vec::new();
    let mut y = Vec::new();
    for (gi, g) in train.iter().enumerate() {
        for i in filter.select(g) {
            let b = base_features(popularity, g, i);
            rows_base.push(b.to_vec());
            rows_full.push(vec![b[0], b[1], extra(0, gi, i)]);
            y.push(g.labels[i].iter().any(|&x| x));
        }
    }
    const L2: f64 = 1e-3;
    let base = Logistic::fit(&rows_base, &y, L2, 50).ok_or(EvalError::Empty)?;
    let full = Logistic::fit(&rows_full, &y, L2, 50).ok_or(EvalError::Empty)?;
    let mut s_base = Vec::new();
    let mut s_full = Vec::new();
    let mut rel = Vec::new();
    for (gi, g) in test.iter().enumerate() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for i in 0..g.items.len() {
            let f = base_features(popularity, g, i);
            a.push(base.logit(&f));
            b.push(full.logit(&[f[0], f[1], extra(1, gi, i)]));
        }
        s_base.push(a);
        s_full.push(b);
        rel.push(g.labels.iter().map(|l| relevance(l, false)).collect());
    }
    let without = mean_ndcg(&rank_groups(test, &s_base, &rel, filter), k)?;
    let with = mean_ndcg(&rank_groups(test, &s_full, &rel, filter), k)?;
    Ok(EvalReport::new("ndcg_with_similarity", filter, with, without, 1))
}

#[cfg(test)]
mod tests;
