//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Primitive, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};

pub const FD_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Outcome of one check. The error per coordinate is
/// `|autodiff - fd| / max(1, |autodiff|, |fd|)`.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub tol: f64,
    pub error: Option<String>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_error < self.tol
    }

    fn failed(name: &str, tol: f64, e: TensorError) -> Self {
        Self {
            name: name.to_string(),
            checked: 0,
            max_rel_error: f64::INFINITY,
            worst: None,
            tol,
            error: Some(e.to_string()),
        }
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Checks `f` with respect to every coordinate of every input tensor.
pub fn gradcheck<F>(name: &str, f: F, point: &[Tensor], tol: f64) -> GradcheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let store = ParamStore::new();
    let eval = |pt: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::inference(&store);
        let vars: Vec<Var> = pt.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut g = Graph::new(&store);
    let vars: Vec<Var> = point.iter().map(|t| g.input(t.clone())).collect();
    let analytic = match f(&mut g, &vars).and_then(|root| g.backward(root)) {
        Ok(b) => b,
        Err(e) => return GradcheckReport::failed(name, tol, e),
    };

    let mut report = GradcheckReport {
        name: name.to_string(),
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        tol,
        error: None,
    };
    let mut pt = point.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let grad = analytic.wrt(*var).map(|s| s.to_vec());
        for c in 0..pt[i].len() {
            let orig = pt[i].data()[c];
            pt[i].data_mut()[c] = orig + FD_STEP;
            let plus = eval(&pt);
            pt[i].data_mut()[c] = orig - FD_STEP;
            let minus = eval(&pt);
            pt[i].data_mut()[c] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => return GradcheckReport::failed(name, tol, e),
            };
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let ad = grad.as_ref().map_or(0.0, |g| g[c]);
            report.record(relative_error(ad, fd), (i, c));
        }
    }
    report
}

impl GradcheckReport {
    fn record(&mut self, err: f64, at: (usize, usize)) {
        self.checked += 1;
        if self.worst.is_none() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some(at);
        }
    }
}

/// Checks a scalar program's gradient with respect to stored parameters.
/// `only` restricts the check to a subset; `None` checks every parameter.
pub fn gradcheck_params<F>(
    name: &str,
    store: &ParamStore,
    f: F,
    only: Option<&[ParamId]>,
    tol: f64,
) -> GradcheckReport
where
    F: Fn(&mut Graph) -> Result<Var, TensorError>,
{
    let analytic = {
        let mut g = Graph::new(store);
        match f(&mut g).and_then(|root| g.backward(root)) {
            Ok(b) => b.params,
            Err(e) => return GradcheckReport::failed(name, tol, e),
        }
    };
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut report = GradcheckReport {
        name: name.to_string(),
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        tol,
        error: None,
    };
    let mut work = store.clone();
    let eval = |s: &ParamStore| -> Result<f64, TensorError> {
        let mut g = Graph::inference(s);
        let root = f(&mut g)?;
        Ok(g.value(root).item())
    };
    for id in ids {
        let dense = analytic.dense(id, store);
        for c in 0..dense.len() {
            let orig = work.value(id).data()[c];
            work.value_mut(id).data_mut()[c] = orig + FD_STEP;
            let plus = eval(&work);
            work.value_mut(id).data_mut()[c] = orig - FD_STEP;
            let minus = eval(&work);
            work.value_mut(id).data_mut()[c] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => return GradcheckReport::failed(name, tol, e),
            };
            let fd = (plus - minus) / (2.0 * FD_STEP);
            report.record(relative_error(dense.data()[c], fd), (id.index(), c));
        }
    }
    report
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // Irwin-Hall approximation; only needs to be a spread of values.
            let s: f64 = (0..4).map(|_| rng.random::<f64>()).sum::<f64>() - 2.0;
            s * scale
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

fn away_from_zero(mut t: Tensor, margin: f64) -> Tensor {
    for x in t.data_mut() {
        if x.abs() < margin {
            *x = if *x < 0.0 { -margin } else { margin } * 2.0;
        }
    }
    t
}

/// Contracts an arbitrary output with fixed random weights so every output
/// coordinate contributes to the scalar root.
fn contract(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var, TensorError> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum_all(p))
}

struct Case {
    prim: Primitive,
    inputs: Vec<Tensor>,
}

fn case_for(name: &str, rng: &mut ChaCha8Rng) -> Case {
    let m = rng.random_range(1..5usize);
    let n = rng.random_range(2..6usize);
    let k = rng.random_range(1..5usize);
    let t = |rng: &mut ChaCha8Rng, shape: Vec<usize>| normal_tensor(rng, shape, 1.0);
    match name {
        "matmul" => Case {
            prim: Primitive::MatMul,
            inputs: vec![t(rng, vec![m, k]), t(rng, vec![k, n])],
        },
        "transpose" => Case {
            prim: Primitive::Transpose,
            inputs: vec![t(rng, vec![m, n])],
        },
        "add" | "sub" | "mul" => {
            let a = t(rng, vec![m, n]);
            let b = match rng.random_range(0..3) {
                0 => t(rng, vec![m, n]),
                1 => t(rng, vec![1, n]),
                _ => t(rng, vec![1]),
            };
            let prim = match name {
                "add" => Primitive::Add,
                "sub" => Primitive::Sub,
                _ => Primitive::Mul,
            };
            Case {
                prim,
                inputs: vec![a, b],
            }
        }
        "scale" => Case {
            prim: Primitive::Scale(rng.random_range(-3.0..3.0)),
            inputs: vec![t(rng, vec![m, n])],
        },
        "relu" => Case {
            prim: Primitive::Relu,
            inputs: vec![away_from_zero(t(rng, vec![m, n]), 1e-2)],
        },
        "sigmoid" => Case {
            prim: Primitive::Sigmoid,
            inputs: vec![normal_tensor(rng, vec![m, n], 3.0)],
        },
        "exp" => Case {
            prim: Primitive::Exp,
            inputs: vec![t(rng, vec![m, n])],
        },
        "log" => {
            let mut x = t(rng, vec![m, n]);
            x.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.2);
            Case {
                prim: Primitive::Log,
                inputs: vec![x],
            }
        }
        "softplus" => Case {
            prim: Primitive::Softplus,
            inputs: vec![normal_tensor(rng, vec![m, n], 4.0)],
        },
        "log_sigmoid" => Case {
            prim: Primitive::LogSigmoid,
            inputs: vec![normal_tensor(rng, vec![m, n], 4.0)],
        },
        "softmax" => Case {
            prim: Primitive::Softmax,
            inputs: vec![normal_tensor(rng, vec![m, n], 2.0)],
        },
        "logsumexp" => Case {
            prim: Primitive::LogSumExp,
            inputs: vec![normal_tensor(rng, vec![m, n], 2.0)],
        },
        "layer_norm" => Case {
            prim: Primitive::LayerNorm,
            inputs: vec![
                normal_tensor(rng, vec![m, n], 2.0),
                t(rng, vec![n]),
                t(rng, vec![n]),
            ],
        },
        "l2_normalize" => Case {
            prim: Primitive::L2Normalize,
            inputs: vec![t(rng, vec![m, n])],
        },
        "gather" => {
            let rows = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..m)).collect();
            Case {
                prim: Primitive::Gather(rows),
                inputs: vec![t(rng, vec![m, n])],
            }
        }
        "embedding_bag" => {
            let bags = (0..rng.random_range(1..4))
                .map(|_| (0..rng.random_range(0..4)).map(|_| rng.random_range(0..m)).collect())
                .collect();
            Case {
                prim: Primitive::EmbeddingBag(bags),
                inputs: vec![t(rng, vec![m, n])],
            }
        }
        "sum_rows" => Case {
            prim: Primitive::SumRows,
            inputs: vec![t(rng, vec![m, n])],
        },
        "sum_all" => Case {
            prim: Primitive::SumAll,
            inputs: vec![t(rng, vec![m, n])],
        },
        "concat" => {
            let parts = rng.random_range(1..4);
            Case {
                prim: Primitive::Concat,
                inputs: (0..parts)
                    .map(|_| {
                        let r = rng.random_range(1..4);
                        t(rng, vec![r, n])
                    })
                    .collect(),
            }
        }
        "slice_rows" => {
            let rows = m + 2;
            let start = rng.random_range(0..rows);
            let len = rng.random_range(1..=rows - start);
            Case {
                prim: Primitive::SliceRows { start, len },
                inputs: vec![t(rng, vec![rows, n])],
            }
        }
        "reshape" => Case {
            prim: Primitive::Reshape(vec![m * n]),
            inputs: vec![t(rng, vec![m, n])],
        },
        "attention" => {
            let heads = rng.random_range(1..3usize);
            let d = heads * rng.random_range(1..4usize);
            let l = rng.random_range(1..6usize);
            let mut mask: Vec<bool> = (0..l).map(|_| rng.random_bool(0.7)).collect();
            mask[0] = true;
            Case {
                prim: Primitive::Attention {
                    heads,
                    key_mask: mask,
                },
                inputs: (0..3).map(|_| t(rng, vec![l, d])).collect(),
            }
        }
        other => panic!("no gradcheck case for {other}"),
    }
}

pub const PRIMITIVE_NAMES: &[&str] = &[
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "softplus",
    "log_sigmoid",
    "softmax",
    "logsumexp",
    "layer_norm",
    "l2_normalize",
    "gather",
    "embedding_bag",
    "sum_rows",
    "sum_all",
    "concat",
    "slice_rows",
    "reshape",
    "attention",
];

/// Runs `trials` random shapes/seeds for every primitive.
pub fn primitive_suite(seed: u64, trials: usize, tol: f64) -> Vec<GradcheckReport> {
    let mut out = Vec::new();
    for (p, name) in PRIMITIVE_NAMES.iter().enumerate() {
        for trial in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((p as u64) << 32) ^ trial as u64);
            let case = case_for(name, &mut rng);
            // Output shape is needed for the contraction weights.
            let store = ParamStore::new();
            let out_shape = {
                let mut g = Graph::inference(&store);
                let vars: Vec<Var> = case.inputs.iter().map(|t| g.constant(t.clone())).collect();
                match g.apply(&case.prim, &vars) {
                    Ok(v) => g.value(v).shape().to_vec(),
                    Err(e) => {
                        out.push(GradcheckReport::failed(name, tol, e));
                        continue;
                    }
                }
            };
            let weights = normal_tensor(&mut rng, out_shape, 1.0);
            let prim = case.prim.clone();
            let report = gradcheck(
                &format!("{name}#{trial}"),
                |g, vars| {
                    let o = g.apply(&prim, vars)?;
                    contract(g, o, &weights)
                },
                &case.inputs,
                tol,
            );
            out.push(report);
        }
    }
    out
}
