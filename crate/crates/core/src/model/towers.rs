//! Forward passes of the item, user and context towers.

use std::sync::Arc;

use crate::autodiff::{Graph, Var};
use crate::event::EventKind;
use crate::tensor::{Tensor, TensorError};
use crate::text::content_embed_batch;

use super::{EncoderLayer, Linear, Model, Norm};

/// Reserved id for a surface or device outside the training vocabulary.
pub const UNKNOWN: u32 = u32::MAX;

/// An event reduced to what the user tower consumes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedEvent {
    pub kind: EventKind,
    pub tokens: Arc<[u32]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Context {
    pub surface: u32,
    pub device: u32,
}

fn apply_linear(g: &mut Graph, l: Linear, x: Var) -> Result<Var, TensorError> {
    let w = g.param(l.w);
    let b = g.param(l.b);
    let h = g.matmul(x, w)?;
    g.add(h, b)
}

fn apply_norm(g: &mut Graph, n: Norm, x: Var) -> Result<Var, TensorError> {
    let gain = g.param(n.gain);
    let bias = g.param(n.bias);
    g.layer_norm(x, gain, bias)
}

/// Unit-norm item embeddings `[n,d]`, one row per title.
pub fn item_tower(g: &mut Graph, model: &Model, titles: &[&[u32]]) -> Result<Var, TensorError> {
    let ids = &model.ids;
    let mut x = content_embed_batch(g, ids.content, titles)?;
    if let Some(l) = ids.item_in {
        x = apply_linear(g, l, x)?;
    }
    for block in &ids.item_blocks {
        let h = apply_linear(g, block.linear, x)?;
        let h = g.relu(h);
        let h = g.add(h, x)?;
        x = apply_norm(g, block.norm, h)?;
    }
    if let Some(l) = ids.item_out {
        x = apply_linear(g, l, x)?;
    }
    Ok(g.l2_normalize(x))
}

/// Input sequence of the user encoder: `[CLS]` followed by the events in
/// chronological order, then `pad_to - len` padding rows. Returns the
/// `[1 + max(len, pad_to), d]` matrix and its key mask.
///
/// The latest event gets position 0. Event rows are content + position +
/// type embeddings passed through one shared layer norm; `[CLS]` is not
/// normalized.
pub fn encode_events(
    g: &mut Graph,
    model: &Model,
    events: &[EncodedEvent],
    pad_to: Option<usize>,
) -> Result<(Var, Vec<bool>), TensorError> {
    let c = &model.config;
    let ids = &model.ids;
    let n = events.len();
    if n > c.max_history {
        return Err(TensorError::Invalid {
            primitive: "encode_events",
            detail: format!("history of {n} events exceeds max_history {}", c.max_history),
        });
    }
    let cls = g.param(ids.cls);
    let mut parts = vec![cls];
    if n > 0 {
        let bags: Vec<&[u32]> = events.iter().map(|e| &*e.tokens).collect();
        let content = content_embed_batch(g, ids.content, &bags)?;
        let pos_table = g.param(ids.position);
        let positions: Vec<usize> = (0..n).map(|i| n - 1 - i).collect();
        let pos = g.gather(pos_table, &positions)?;
        let type_table = g.param(ids.event_type);
        let kinds: Vec<usize> = events.iter().map(|e| e.kind.index()).collect();
        let types = g.gather(type_table, &kinds)?;
        let x = g.add(content, pos)?;
        let x = g.add(x, types)?;
        parts.push(apply_norm(g, ids.event_norm, x)?);
    }
    let pad = pad_to.unwrap_or(n).saturating_sub(n);
    if pad > 0 {
        parts.push(g.constant(Tensor::zeros(vec![pad, c.d])));
    }
    let mut mask = vec![true; 1 + n];
    mask.resize(1 + n + pad, false);
    let x = if parts.len() == 1 { parts[0] } else { g.concat(&parts)? };
    Ok((x, mask))
}

fn encoder_layer(
    g: &mut Graph,
    layer: &EncoderLayer,
    heads: usize,
    x: Var,
    mask: &[bool],
) -> Result<Var, TensorError> {
    let q = apply_linear(g, layer.q, x)?;
    let k = apply_linear(g, layer.k, x)?;
    let v = apply_linear(g, layer.v, x)?;
    let a = g.attention(q, k, v, heads, mask)?;
    let a = apply_linear(g, layer.o, a)?;
    let h = g.add(x, a)?;
    let h = apply_norm(g, layer.norm1, h)?;
    let f = apply_linear(g, layer.ff1, h)?;
    let f = g.relu(f);
    let f = apply_linear(g, layer.ff2, f)?;
    let out = g.add(h, f)?;
    apply_norm(g, layer.norm2, out)
}

/// Unit-norm user embedding `[1,d]`: the contextualized `[CLS]` row of a
/// post-norm bidirectional encoder.
pub fn user_tower(
    g: &mut Graph,
    model: &Model,
    events: &[EncodedEvent],
    pad_to: Option<usize>,
) -> Result<Var, TensorError> {
    let (mut x, mask) = encode_events(g, model, events, pad_to)?;
    for layer in &model.ids.encoder {
        x = encoder_layer(g, layer, model.config.user_heads, x, &mask)?;
    }
    let cls = g.slice_rows(x, 0, 1)?;
    Ok(g.l2_normalize(cls))
}

/// User embeddings for several histories stacked as `[n,d]`.
pub fn user_towers(
    g: &mut Graph,
    model: &Model,
    histories: &[&[EncodedEvent]],
) -> Result<Var, TensorError> {
    let rows = histories
        .iter()
        .map(|h| user_tower(g, model, h, None))
        .collect::<Result<Vec<_>, _>>()?;
    g.concat(&rows)
}

fn table_index(id: u32, n: usize, primitive: &'static str) -> Result<usize, TensorError> {
    if id == UNKNOWN {
        Ok(n)
    } else if (id as usize) < n {
        Ok(id as usize)
    } else {
        Err(TensorError::IndexOutOfRange {
            primitive,
            index: id as usize,
            len: n,
        })
    }
}

/// Per-request context scores `[n,1]`: surface scalar plus device scalar.
pub fn context_scores(g: &mut Graph, model: &Model, ctx: &[Context]) -> Result<Var, TensorError> {
    let c = &model.config;
    let surfaces = ctx
        .iter()
        .map(|x| table_index(x.surface, c.n_surfaces, "context_surface"))
        .collect::<Result<Vec<_>, _>>()?;
    let devices = ctx
        .iter()
        .map(|x| table_index(x.device, c.n_devices, "context_device"))
        .collect::<Result<Vec<_>, _>>()?;
    let st = g.param(model.ids.ctx_surface);
    let dt = g.param(model.ids.ctx_device);
    let s = g.gather(st, &surfaces)?;
    let d = g.gather(dt, &devices)?;
    g.add(s, d)
}

/// Context score of one request as a `[1,1]` value.
pub fn context_score(g: &mut Graph, model: &Model, ctx: Context) -> Result<Var, TensorError> {
    context_scores(g, model, &[ctx])
}

/// Inner product of two unit vectors, i.e. their cosine similarity.
pub fn similarity(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

impl Model {
    pub fn embed_items(&self, titles: &[&[u32]]) -> Result<Tensor, TensorError> {
        let mut g = Graph::inference(&self.store);
        let v = item_tower(&mut g, self, titles)?;
        Ok(g.value(v).clone())
    }

    pub fn embed_item(&self, title: &[u32]) -> Result<Vec<f64>, TensorError> {
        Ok(self.embed_items(&[title])?.into_data())
    }

    pub fn embed_user(&self, events: &[EncodedEvent]) -> Result<Vec<f64>, TensorError> {
        let mut g = Graph::inference(&self.store);
        let v = user_tower(&mut g, self, events, None)?;
        Ok(g.value(v).data().to_vec())
    }

    pub fn context_value(&self, ctx: Context) -> Result<f64, TensorError> {
        let mut g = Graph::inference(&self.store);
        let v = context_score(&mut g, self, ctx)?;
        Ok(g.value(v).data()[0])
    }
}
