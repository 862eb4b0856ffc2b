//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ttrank::checks::gradcheck_suite;
use ttrank::config::RunConfig;
use ttrank::dataset::{delay_violations, Dataset, DatasetConfig};
use ttrank::eval::ablation::{evaluate_model, run_ablation, seeds, AblationReport, Cell};
use ttrank::event::Labels;
use ttrank::model::{similarity, write_checkpoint, CalibrationIds};
use ttrank::objectives::{
    bce_click, bpr_calibrated, bpr_original, finetune_objective_graph, pretrain_loss, CalibrationParams, CalibrationVars,
    SignalCalibration,
};
use ttrank::pipeline::Corpus;
use ttrank::serving::{dot32, export_items, export_users, Scorer};
use ttrank::trainer::{finetune_run, pretrain_run};
use ttrank::{Graph, ParamGroup, ParamStore, Tensor};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let reports = gradcheck_suite(1);
    let elapsed = t.elapsed();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    outcome(
        failed.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} checks, worst relative error {worst:.2e}, {:.1}s, failed {failed:?}",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn analytic_losses() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let mut worst: f64 = 0.0;
    for n in 1..=32 {
        for r in [-1.0, 0.0, 0.4, 1.0] {
            let l = pretrain_loss(r, &vec![r; n], 10.0).unwrap();
            worst = worst.max((l - ((n + 1) as f64).ln()).abs());
        }
    }
    let unit = CalibrationParams {
        alpha_cl: 1.0,
        alpha_ctx: 0.0,
        beta_cl: 0.0,
        ..CalibrationParams::default()
    };
    let k = SignalCalibration {
        gamma: 1.0,
        gamma_ctx: 0.0,
        beta: 0.0,
    };
    let cases = [
        bce_click(0.0, 0.0, true, &unit),
        bce_click(0.0, 0.0, false, &unit),
        bpr_original(0.3, 0.3, 2.0),
        bpr_calibrated(0.3, 0.3, 0.7, &k),
    ];
    for c in cases {
        worst = worst.max((c - ln2).abs());
    }
    // -log sigmoid(z) against the two-way softmax it rewrites.
    let mut identity: f64 = 0.0;
    for i in 0..=4000 {
        let z = -20.0 + i as f64 * 0.01;
        let direct = -(z.exp() / (z.exp() + 1.0)).ln();
        identity = identity.max((bpr_original(z, 0.0, 1.0) - direct).abs());
        identity = identity.max((pretrain_loss(z, &[0.0], 1.0).unwrap() - direct).abs());
    }
    outcome(
        worst < 1e-9 && identity < 1e-9,
        format!("max deviation {worst:.1e}, identity deviation {identity:.1e}"),
    )
}

fn comparison_line(report: &AblationReport, metric: &str, better: Cell, worse: Cell) -> (bool, String) {
    match report.comparison(metric, better, worse) {
        Some(c) => (c.passed, format!("{} {}/{}", c.name, c.wins, c.seeds)),
        None => (false, format!("{} > {} on {metric}: missing", better.name(), worse.name())),
    }
}

fn regimes(report: &AblationReport, elapsed: Duration) -> Outcome {
    let mut ok = elapsed < Duration::from_secs(600);
    let mut parts = Vec::new();
    for worse in [Cell::PretrainOnly, Cell::FinetuneOnly] {
        for m in ["ndcg_retargeting", "ndcg_discovery"] {
            let (p, s) = comparison_line(report, m, Cell::Both, worse);
            ok &= p;
            parts.push(s);
        }
    }
    parts.push(format!("ablation {:.0}s", elapsed.as_secs_f64()));
    outcome(ok, parts.join("; "))
}

fn single(report: &AblationReport, metric: &str, worse: Cell) -> Outcome {
    let (p, s) = comparison_line(report, metric, Cell::Both, worse);
    outcome(p, s)
}

fn calibration(report: &AblationReport) -> Outcome {
    let rows: Vec<_> = report.rows.iter().filter(|r| r.cell == Cell::Both).collect();
    let gaps: Vec<f64> = rows
        .iter()
        .map(|r| r.metrics.predicted_ctr - r.metrics.empirical_ctr)
        .collect();
    let ok = !gaps.is_empty() && gaps.iter().all(|g| g.abs() <= 0.05);
    let shown: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "seed {}: predicted {:.4} vs empirical {:.4}",
                r.seed, r.metrics.predicted_ctr, r.metrics.empirical_ctr
            )
        })
        .collect();
    outcome(ok, shown.join("; "))
}

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = 7;
    c.world.n_items = 600;
    c.world.n_users = 200;
    c.world.n_days = 30;
    c.world.n_categories = 12;
    c.world.activity = 0.3;
    c.model.d = 16;
    c.model.user_layers = 1;
    c.model.ffn_hidden = 32;
    c.model.item_hidden = 16;
    c.model.max_history = 32;
    c.dataset.max_history = 32;
    c.eval.test_days = 6;
    c.eval.recall_pool = 100;
    c.trainer.pretrain.warmup_steps = 20;
    c.trainer.finetune.warmup_steps = 5;
    c
}

struct PipelineRun {
    corpus: Corpus,
    data: ttrank::pipeline::Prepared,
    model: ttrank::model::Model,
    metrics: String,
    checkpoint: Vec<u8>,
}

fn pipeline(cfg: &RunConfig) -> PipelineRun {
    let corpus = Corpus::generate(cfg, cfg.seed).unwrap();
    let data = corpus.prepare(&cfg.dataset).unwrap();
    let tc = cfg.trainer_for(cfg.seed);
    let fresh = corpus.fresh_model(cfg, cfg.seed).unwrap();
    let (pre, _) = pretrain_run(fresh, &data.train_samples, &data.enc, &tc).unwrap();
    let (model, _) = finetune_run(pre, &data.train_groups, &data.enc, &tc).unwrap();
    let m = evaluate_model(&model, &corpus, &data, cfg, true, cfg.seed).unwrap();
    let mut checkpoint = Vec::new();
    write_checkpoint(&model, &mut checkpoint).unwrap();
    PipelineRun {
        metrics: serde_json::to_string_pretty(&m).unwrap(),
        corpus,
        data,
        model,
        checkpoint,
    }
}

fn serving(run: &PipelineRun, cfg: &RunConfig) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (model, corpus, data) = (&run.model, &run.corpus, &run.data);
    let day = cfg.world.n_days;
    let (delay, max) = (cfg.dataset.delay, model.config.max_history);
    let refs: Vec<_> = corpus
        .world
        .users
        .iter()
        .map(|u| (u.id, data.dataset.histories.at(u.id, day, delay, max)))
        .collect();
    let users = export_users(model, refs.iter().map(|(id, h)| (*id, data.enc.history(h)))).unwrap();
    let items = export_items(model, corpus.world.items.iter().map(|i| (i.id, data.enc.title(i.id).unwrap()))).unwrap();
    let norm_gap = users
        .records
        .iter()
        .chain(&items.records)
        .map(|(_, v)| (dot32(v, v).sqrt() - 1.0).abs())
        .fold(0.0, f64::max);
    let (up, ip) = (dir.path().join("users.emb"), dir.path().join("items.emb"));
    users.save(&up).unwrap();
    items.save(&ip).unwrap();
    let scorer = Scorer::load(&up, &ip).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut parity: f64 = 0.0;
    for _ in 0..100 {
        let (uid, h) = refs[rng.random_range(0..refs.len())];
        let item = &corpus.world.items[rng.random_range(0..corpus.world.items.len())];
        let u = model.embed_user(data.enc.history(&h)).unwrap();
        let v = model.embed_item(data.enc.title(item.id).unwrap()).unwrap();
        let served = scorer.score(uid, &[item.id])[0].clone().unwrap();
        parity = parity.max((similarity(&u, &v) - served).abs());
    }
    outcome(
        parity < 1e-6 && norm_gap < 1e-5,
        format!("max score gap {parity:.2e} over 100 pairs, max norm gap {norm_gap:.2e}"),
    )
}

fn dataset_contracts() -> Outcome {
    let cfg = RunConfig::default();
    let corpus = Corpus::generate(&cfg, cfg.seed).unwrap();
    let dcfg = DatasetConfig::default();
    let d = Dataset::build(&corpus.logs, &corpus.categories, &dcfg);
    let late_samples = delay_violations(&d.histories, d.pretrain.iter().map(|s| (s.day, &s.history)), dcfg.delay);
    let late_groups = delay_violations(&d.histories, d.groups.iter().map(|g| (g.day, &g.history)), dcfg.delay);
    let empty = d.groups.iter().filter(|g| !g.has_positive()).count();
    outcome(
        late_samples == 0 && late_groups == 0 && empty == 0 && !d.pretrain.is_empty() && !d.groups.is_empty(),
        format!(
            "{} samples with {late_samples} delay violations, {} groups with {late_groups} delay violations and {empty} without a positive",
            d.pretrain.len(),
            d.groups.len()
        ),
    )
}

/// Explicit enumeration of every (positive, non-positive) pair per signal
/// with the probability-ratio form of the pair loss.
fn brute_force(r: &[f64], r_ctx: f64, labels: &[Labels], p: &CalibrationParams) -> f64 {
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut total = 0.0;
    for k in 0..4 {
        let c = p.signals[k];
        let f = |x: f64| sig(c.gamma * x + c.gamma_ctx * r_ctx + c.beta);
        let (mut sum, mut count) = (0.0, 0);
        for a in 0..r.len() {
            for b in 0..r.len() {
                if labels[a][k] && !labels[b][k] {
                    sum -= (f(r[a]) / (f(r[a]) + f(r[b]))).ln();
                    count += 1;
                }
            }
        }
        if count > 0 {
            total += sum / count as f64;
        }
    }
    let mut bce = 0.0;
    for (x, l) in r.iter().zip(labels) {
        let f = sig(p.alpha_cl * x + p.alpha_ctx * r_ctx + p.beta_cl);
        bce -= if l[0] { f.ln() } else { (1.0 - f).ln() };
    }
    total + p.pointwise_weight * bce / r.len() as f64
}

fn objective_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=6);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<Labels> = (0..n).map(|_| std::array::from_fn(|_| rng.random_bool(0.35))).collect();
        let r_ctx = rng.random_range(-1.0..1.0);
        let mut p = CalibrationParams::default();
        for s in p.signals.iter_mut() {
            s.gamma = rng.random_range(0.1..8.0);
            s.gamma_ctx = rng.random_range(-2.0..2.0);
            s.beta = rng.random_range(-2.0..2.0);
        }
        p.alpha_cl = rng.random_range(0.1..8.0);
        p.alpha_ctx = rng.random_range(-2.0..2.0);
        p.beta_cl = rng.random_range(-2.0..2.0);

        // The training path: loss scalars as stored parameters in a graph.
        let mut store = ParamStore::new();
        let mut add = |name: String, v: f64| store.add(name, ParamGroup::LossParams, Tensor::scalar(v));
        let gamma = std::array::from_fn(|k| add(format!("gamma{k}"), p.signals[k].gamma));
        let gamma_ctx = std::array::from_fn(|k| add(format!("gamma_ctx{k}"), p.signals[k].gamma_ctx));
        let beta = std::array::from_fn(|k| add(format!("beta{k}"), p.signals[k].beta));
        let ids = CalibrationIds {
            tau_raw: add("tau".into(), 1.0),
            gamma,
            gamma_ctx,
            beta,
            alpha_cl: add("alpha_cl".into(), p.alpha_cl),
            alpha_ctx: add("alpha_ctx".into(), p.alpha_ctx),
            beta_cl: add("beta_cl".into(), p.beta_cl),
        };
        let mut g = Graph::inference(&store);
        let rv = g.constant(Tensor::new(vec![n, 1], r.clone()).unwrap());
        let cv = g.constant(Tensor::scalar(r_ctx));
        let cal = CalibrationVars::new(&mut g, &ids);
        let loss = finetune_objective_graph(&mut g, rv, cv, &labels, &cal, p.pointwise_weight).unwrap();
        let ours = g.value(loss).item();
        let reference = brute_force(&r, r_ctx, &labels, &p);
        worst = worst.max((ours - reference).abs() / reference.abs().max(1.0));
    }
    outcome(worst < 1e-12, format!("1000 groups, max relative gap {worst:.1e}"))
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((1, "gradient correctness", gradients()));
    results.push((2, "analytic loss values", analytic_losses()));

    let cfg = RunConfig::default();
    let cells = [Cell::PretrainOnly, Cell::FinetuneOnly, Cell::Both, Cell::BothNoContext, Cell::BothNoWeb];
    let t = Instant::now();
    let report = run_ablation(&cfg, &seeds(&cfg), &cells).expect("ablation runs");
    let elapsed = t.elapsed();
    results.push((3, "two-stage training", regimes(&report, elapsed)));
    results.push((4, "context debiasing", single(&report, "ndcg_context_balanced", Cell::BothNoContext)));
    results.push((5, "web-query enrichment", single(&report, "ndcg_discovery", Cell::BothNoWeb)));
    results.push((6, "calibration", calibration(&report)));

    let small = small_config();
    let first = pipeline(&small);
    results.push((7, "serving parity", serving(&first, &small)));
    results.push((8, "dataset contracts", dataset_contracts()));
    results.push((9, "objective oracle", objective_oracle()));
    let second = pipeline(&small);
    let same = first.metrics == second.metrics && first.checkpoint == second.checkpoint;
    results.push((
        10,
        "determinism",
        outcome(same, format!("metrics {} bytes, checkpoint {} bytes", first.metrics.len(), first.checkpoint.len())),
    ));

    print!("{}", report.to_tsv());
    let mut failed = 0;
    for (n, name, o) in &results {
        failed += usize::from(!o.passed);
        println!("criterion {n} {}: {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
