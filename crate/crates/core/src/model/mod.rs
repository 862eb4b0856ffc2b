//! Two-tower model: parameter layout, initialization and presets.

mod checkpoint;
mod towers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::event::{EventKind, Signal};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

pub use checkpoint::write_atomic;
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError, MAGIC,
    VERSION,
};
pub use towers::{
    context_score, context_scores, encode_events, item_tower, similarity, user_tower, user_towers,
    Context, EncodedEvent, UNKNOWN,
};

pub const INIT_STD: f64 = 0.02;
pub const DEFAULT_TAU: f64 = 10.0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("width {d} is not divisible by {heads} attention heads")]
    Heads { d: usize, heads: usize },
    #[error("max_positions {positions} must be at least max_history + 1 = {}", history + 1)]
    Positions { positions: usize, history: usize },
    #[error("{0} must be positive")]
    Zero(&'static str),
}

/// Shape of both towers plus the categorical vocabularies they index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TowerConfig {
    pub d: usize,
    pub user_layers: usize,
    pub user_heads: usize,
    pub ffn_hidden: usize,
    pub item_layers: usize,
    pub item_hidden: usize,
    pub max_history: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub n_surfaces: usize,
    pub n_devices: usize,
}

impl TowerConfig {
    /// Small defaults that train in minutes on one CPU core.
    pub fn desk(vocab_size: usize, n_surfaces: usize, n_devices: usize) -> Self {
        Self {
            d: 32,
            user_layers: 2,
            user_heads: 2,
            ffn_hidden: 64,
            item_layers: 2,
            item_hidden: 32,
            max_history: 64,
            max_positions: 65,
            vocab_size,
            n_surfaces,
            n_devices,
        }
    }

    /// Production-sized shape: four encoder layers of width 256 with four
    /// heads, and a four-layer candidate tower of width 1024.
    pub fn paper(vocab_size: usize, n_surfaces: usize, n_devices: usize) -> Self {
        Self {
            d: 256,
            user_layers: 4,
            user_heads: 4,
            ffn_hidden: 1024,
            item_layers: 4,
            item_hidden: 1024,
            max_history: 1024,
            max_positions: 1025,
            vocab_size,
            n_surfaces,
            n_devices,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("d", self.d),
            ("user_heads", self.user_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("item_hidden", self.item_hidden),
            ("vocab_size", self.vocab_size),
            ("n_surfaces", self.n_surfaces),
            ("n_devices", self.n_devices),
        ] {
            if v == 0 {
                return Err(ConfigError::Zero(name));
            }
        }
        if self.d % self.user_heads != 0 {
            return Err(ConfigError::Heads {
                d: self.d,
                heads: self.user_heads,
            });
        }
        if self.max_positions < self.max_history + 1 {
            return Err(ConfigError::Positions {
                positions: self.max_positions,
                history: self.max_history,
            });
        }
        Ok(())
    }

    /// Field order of the checkpoint config block.
    pub(crate) fn to_fields(&self) -> [usize; 11] {
        [
            self.d,
            self.user_layers,
            self.user_heads,
            self.ffn_hidden,
            self.item_layers,
            self.item_hidden,
            self.max_history,
            self.max_positions,
            self.vocab_size,
            self.n_surfaces,
            self.n_devices,
        ]
    }

    pub(crate) fn from_fields(f: [usize; 11]) -> Self {
        Self {
            d: f[0],
            user_layers: f[1],
            user_heads: f[2],
            ffn_hidden: f[3],
            item_layers: f[4],
            item_hidden: f[5],
            max_history: f[6],
            max_positions: f[7],
            vocab_size: f[8],
            n_surfaces: f[9],
            n_devices: f[10],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm1: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: Norm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItemBlock {
    pub linear: Linear,
    pub norm: Norm,
}

/// Loss-side scalars. Each is a one-element parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CalibrationIds {
    pub tau_raw: ParamId,
    pub gamma: [ParamId; 4],
    pub gamma_ctx: [ParamId; 4],
    pub beta: [ParamId; 4],
    pub alpha_cl: ParamId,
    pub alpha_ctx: ParamId,
    pub beta_cl: ParamId,
}

impl CalibrationIds {
    /// Scalars inside the fine-tuning sigmoids.
    pub fn sigmoid_inner(&self) -> Vec<ParamId> {
        let mut v = Vec::with_capacity(15);
        v.extend(self.gamma);
        v.extend(self.gamma_ctx);
        v.extend(self.beta);
        v.extend([self.alpha_cl, self.alpha_ctx, self.beta_cl]);
        v
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelIds {
    pub content: ParamId,
    pub position: ParamId,
    pub event_type: ParamId,
    pub cls: ParamId,
    pub event_norm: Norm,
    pub encoder: Vec<EncoderLayer>,
    pub item_in: Option<Linear>,
    pub item_blocks: Vec<ItemBlock>,
    pub item_out: Option<Linear>,
    pub ctx_surface: ParamId,
    pub ctx_device: ParamId,
    pub calib: CalibrationIds,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: TowerConfig,
    pub store: ParamStore,
    pub ids: ModelIds,
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn normal(&mut self, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
        Tensor::new(shape, data).expect("shape and data agree")
    }
}

fn linear(store: &mut ParamStore, init: &mut Init, name: &str, group: ParamGroup, i: usize, o: usize) -> Linear {
    Linear {
        w: store.add(format!("{name}.w"), group, init.normal(vec![i, o])),
        b: store.add(format!("{name}.b"), group, Tensor::zeros(vec![o])),
    }
}

fn norm(store: &mut ParamStore, name: &str, group: ParamGroup, d: usize) -> Norm {
    Norm {
        gain: store.add(format!("{name}.gain"), group, Tensor::full(vec![d], 1.0)),
        bias: store.add(format!("{name}.bias"), group, Tensor::zeros(vec![d])),
    }
}

/// Inverse of softplus, for initializing a positive reparameterized scalar.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl Model {
    pub fn new(config: TowerConfig, seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        };
        let c = &config;
        let mut s = ParamStore::new();
        let e = ParamGroup::Embeddings;
        let content = s.add("emb.content", e, init.normal(vec![c.vocab_size, c.d]));
        let position = s.add("emb.position", e, init.normal(vec![c.max_positions, c.d]));
        let event_type = s.add("emb.event_type", e, init.normal(vec![EventKind::COUNT, c.d]));
        let cls = s.add("emb.cls", e, init.normal(vec![1, c.d]));

        let t = ParamGroup::Transformer;
        let event_norm = norm(&mut s, "user.event_norm", t, c.d);
        let encoder = (0..c.user_layers)
            .map(|l| {
                let p = format!("user.layer{l}");
                EncoderLayer {
                    q: linear(&mut s, &mut init, &format!("{p}.q"), t, c.d, c.d),
                    k: linear(&mut s, &mut init, &format!("{p}.k"), t, c.d, c.d),
                    v: linear(&mut s, &mut init, &format!("{p}.v"), t, c.d, c.d),
                    o: linear(&mut s, &mut init, &format!("{p}.o"), t, c.d, c.d),
                    norm1: norm(&mut s, &format!("{p}.norm1"), t, c.d),
                    ff1: linear(&mut s, &mut init, &format!("{p}.ff1"), t, c.d, c.ffn_hidden),
                    ff2: linear(&mut s, &mut init, &format!("{p}.ff2"), t, c.ffn_hidden, c.d),
                    norm2: norm(&mut s, &format!("{p}.norm2"), t, c.d),
                }
            })
            .collect();

        let ct = ParamGroup::CandidateTower;
        let h = c.item_hidden;
        let (item_in, item_out) = if h != c.d {
            (
                Some(linear(&mut s, &mut init, "item.in", ct, c.d, h)),
                Some(linear(&mut s, &mut init, "item.out", ct, h, c.d)),
            )
        } else {
            (None, None)
        };
        let item_blocks = (0..c.item_layers)
            .map(|k| ItemBlock {
                linear: linear(&mut s, &mut init, &format!("item.block{k}.linear"), ct, h, h),
                norm: norm(&mut s, &format!("item.block{k}.norm"), ct, h),
            })
            .collect();

        let lp = ParamGroup::LossParams;
        let ctx_surface = s.add("ctx.surface", lp, Tensor::zeros(vec![c.n_surfaces + 1, 1]));
        let ctx_device = s.add("ctx.device", lp, Tensor::zeros(vec![c.n_devices + 1, 1]));
        let scalar = |s: &mut ParamStore, name: String, v: f64| s.add(name, lp, Tensor::scalar(v));
        let tau_raw = scalar(&mut s, "loss.tau_raw".into(), softplus_inverse(DEFAULT_TAU));
        let gamma = Signal::ALL.map(|k| scalar(&mut s, format!("loss.gamma.{k}"), 1.0));
        let gamma_ctx = Signal::ALL.map(|k| scalar(&mut s, format!("loss.gamma_ctx.{k}"), 1.0));
        let beta = Signal::ALL.map(|k| scalar(&mut s, format!("loss.beta.{k}"), 0.0));
        let alpha_cl = scalar(&mut s, "loss.alpha_cl".into(), 1.0);
        let alpha_ctx = scalar(&mut s, "loss.alpha_ctx".into(), 1.0);
        let beta_cl = scalar(&mut s, "loss.beta_cl".into(), 0.0);

        let ids = ModelIds {
            content,
            position,
            event_type,
            cls,
            event_norm,
            encoder,
            item_in,
            item_blocks,
            item_out,
            ctx_surface,
            ctx_device,
            calib: CalibrationIds {
                tau_raw,
                gamma,
                gamma_ctx,
                beta,
                alpha_cl,
                alpha_ctx,
                beta_cl,
            },
        };
        Ok(Self { config, store: s, ids })
    }

    pub fn scalar(&self, id: ParamId) -> f64 {
        self.store.value(id).data()[0]
    }

    pub fn set_scalar(&mut self, id: ParamId, v: f64) {
        self.store.value_mut(id).data_mut()[0] = v;
    }

    pub fn temperature(&self) -> f64 {
        crate::objectives::softplus(self.scalar(self.ids.calib.tau_raw))
    }

    pub fn set_temperature(&mut self, tau: f64) {
        self.set_scalar(self.ids.calib.tau_raw, softplus_inverse(tau));
    }
}
