//! Named learnable parameters, partitioned into optimizer groups, and the
//! gradient containers produced by backward passes.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Optimizer partition. Every parameter belongs to exactly one group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embeddings,
    Transformer,
    CandidateTower,
    LossParams,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Embeddings,
        ParamGroup::Transformer,
        ParamGroup::CandidateTower,
        ParamGroup::LossParams,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Embeddings => "embeddings",
            ParamGroup::Transformer => "transformer",
            ParamGroup::CandidateTower => "candidate_tower",
            ParamGroup::LossParams => "loss_params",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name, which is a
    /// programming error in model construction.
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Gradient of one parameter. Embedding lookups accumulate only the rows
/// they touched.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamGrad {
    Dense(Vec<f64>),
    Rows {
        cols: usize,
        rows: BTreeMap<usize, Vec<f64>>,
    },
}

impl ParamGrad {
    pub fn norm_sq(&self) -> f64 {
        match self {
            ParamGrad::Dense(v) => v.iter().map(|x| x * x).sum(),
            ParamGrad::Rows { rows, .. } => rows
                .values()
                .map(|r| r.iter().map(|x| x * x).sum::<f64>())
                .sum(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        match self {
            ParamGrad::Dense(v) => v.iter_mut().for_each(|x| *x *= s),
            ParamGrad::Rows { rows, .. } => rows
                .values_mut()
                .for_each(|r| r.iter_mut().for_each(|x| *x *= s)),
        }
    }

    /// Adds this gradient into a dense buffer of the parameter's size.
    pub fn add_into(&self, dense: &mut [f64]) {
        match self {
            ParamGrad::Dense(v) => dense.iter_mut().zip(v).for_each(|(d, g)| *d += g),
            ParamGrad::Rows { cols, rows } => {
                for (&r, g) in rows {
                    dense[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, x)| *d += x);
                }
            }
        }
    }

    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        self.add_into(&mut out);
        out
    }

    fn merge(&mut self, other: &ParamGrad, len: usize) {
        match (&mut *self, other) {
            (ParamGrad::Dense(a), b) => b.add_into(a),
            (ParamGrad::Rows { rows: a, .. }, ParamGrad::Rows { rows: b, .. }) => {
                for (&r, g) in b {
                    match a.get_mut(&r) {
                        Some(acc) => acc.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                        None => {
                            a.insert(r, g.clone());
                        }
                    }
                }
            }
            (rows @ ParamGrad::Rows { .. }, ParamGrad::Dense(b)) => {
                let mut dense = rows.to_dense(len);
                dense.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                *rows = ParamGrad::Dense(dense);
            }
        }
    }
}

/// Gradients keyed by parameter. Parameters not present have zero gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, ParamGrad>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&ParamGrad> {
        self.grads.get(&id)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut ParamGrad> {
        self.grads.get_mut(&id)
    }

    /// Dense gradient with the parameter's shape; zeros when unreachable.
    pub fn dense(&self, id: ParamId, store: &ParamStore) -> Tensor {
        let shape = store.value(id).shape().to_vec();
        let len = store.value(id).len();
        let data = match self.grads.get(&id) {
            Some(g) => g.to_dense(len),
            None => vec![0.0; len],
        };
        Tensor::from_parts(shape, data)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamGrad)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamGrad)> {
        self.grads.iter_mut().map(|(k, v)| (*k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub(crate) fn add_dense(&mut self, id: ParamId, g: &[f64]) {
        match self.grads.get_mut(&id) {
            Some(ParamGrad::Dense(acc)) => acc.iter_mut().zip(g).for_each(|(x, y)| *x += y),
            Some(rows @ ParamGrad::Rows { .. }) => {
                let mut dense = rows.to_dense(g.len());
                dense.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                *rows = ParamGrad::Dense(dense);
            }
            None => {
                self.grads.insert(id, ParamGrad::Dense(g.to_vec()));
            }
        }
    }

    pub(crate) fn add_row(&mut self, id: ParamId, cols: usize, row: usize, g: &[f64]) {
        let entry = self.grads.entry(id).or_insert_with(|| ParamGrad::Rows {
            cols,
            rows: BTreeMap::new(),
        });
        match entry {
            ParamGrad::Dense(acc) => acc[row * cols..(row + 1) * cols]
                .iter_mut()
                .zip(g)
                .for_each(|(x, y)| *x += y),
            ParamGrad::Rows { rows, .. } => match rows.get_mut(&row) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                None => {
                    rows.insert(row, g.to_vec());
                }
            },
        }
    }

    /// Accumulates `other` into `self`. Summation order follows call order,
    /// so merging per-sample gradients in a fixed order is deterministic.
    pub fn accumulate(&mut self, other: &Gradients, store: &ParamStore) {
        for (id, g) in &other.grads {
            match self.grads.get_mut(id) {
                Some(acc) => acc.merge(g, store.value(*id).len()),
                None => {
                    self.grads.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn remove(&mut self, id: ParamId) -> Option<ParamGrad> {
        self.grads.remove(&id)
    }

    /// Squared L2 norm over the parameters of one group.
    pub fn group_norm_sq(&self, store: &ParamStore, group: ParamGroup) -> f64 {
        self.grads
            .iter()
            .filter(|(id, _)| store.get(**id).group == group)
            .map(|(_, g)| g.norm_sq())
            .sum()
    }

    pub fn scale_group(&mut self, store: &ParamStore, group: ParamGroup, s: f64) {
        for (id, g) in self.grads.iter_mut() {
            if store.get(*id).group == group {
                g.scale(s);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_and_dense_merge() {
        let mut store = ParamStore::new();
        let id = store.add("m", ParamGroup::Embeddings, Tensor::zeros(vec![3, 2]));
        let mut a = Gradients::new();
        a.add_row(id, 2, 1, &[1.0, 2.0]);
        let mut b = Gradients::new();
        b.add_dense(id, &[1.0; 6]);
        a.accumulate(&b, &store);
        assert_eq!(
            a.dense(id, &store).data(),
            &[1.0, 1.0, 2.0, 3.0, 1.0, 1.0]
        );
    }

    #[test]
    fn unreachable_param_is_zero() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::Transformer, Tensor::zeros(vec![2, 2]));
        let g = Gradients::new();
        assert_eq!(g.dense(id, &store).data(), &[0.0; 4]);
    }
}
