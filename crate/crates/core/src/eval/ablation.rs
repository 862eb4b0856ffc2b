//! Training-regime and feature ablations over several seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::dataset::DatasetConfig;
use crate::model::{Context, Model};
use crate::objectives::CalibrationParams;
use crate::pipeline::{Corpus, PipelineError, Prepared};
use crate::trainer::{finetune_run, pretrain_run, TrainConfig, TrainError};

use super::{
    context_balanced_ndcg, group_scores, mean_ndcg, rank_groups, recall_at_k, relative_gain_harness, relevance,
    EvalError, SurfaceFilter,
};

#[derive(Debug, Error)]
pub enum AblationError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cell {
    PretrainOnly,
    FinetuneOnly,
    Both,
    BothNoContext,
    BothNoWeb,
    BothHist16,
}

impl Cell {
    pub const ALL: [Cell; 6] = [
        Cell::PretrainOnly,
        Cell::FinetuneOnly,
        Cell::Both,
        Cell::BothNoContext,
        Cell::BothNoWeb,
        Cell::BothHist16,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Cell::PretrainOnly => "pretrain-only",
            Cell::FinetuneOnly => "finetune-only",
            Cell::Both => "both",
            Cell::BothNoContext => "both-no-context",
            Cell::BothNoWeb => "both-no-web",
            Cell::BothHist16 => "both-hist16",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    fn pretrains(self) -> bool {
        self != Cell::FinetuneOnly
    }

    fn finetunes(self) -> bool {
        self != Cell::PretrainOnly
    }

    /// Cells with the same variant train on the same dataset.
    fn variant(self) -> u8 {
        match self {
            Cell::BothNoWeb => 1,
            Cell::BothHist16 => 2,
            _ => 0,
        }
    }

    fn dataset(self, base: &DatasetConfig) -> DatasetConfig {
        match self {
            Cell::BothNoWeb => DatasetConfig {
                web_queries: false,
                ..base.clone()
            },
            Cell::BothHist16 => DatasetConfig {
                max_history: 16,
                ..base.clone()
            },
            _ => base.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub ndcg_retargeting: f64,
    pub ndcg_discovery: f64,
    /// Context-free oracle relevance, averaged over (surface, device) cells.
    pub ndcg_context_balanced: f64,
    pub gain_retargeting: f64,
    pub gain_discovery: f64,
    pub recall_at_k: f64,
    pub popularity_recall_at_k: f64,
    /// Mean predicted click probability on test impressions.
    pub predicted_ctr: f64,
    pub empirical_ctr: f64,
    pub test_groups: usize,
    pub discovery_groups: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: Cell,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: CellMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub name: String,
    pub metric: String,
    pub better: Cell,
    pub worse: Cell,
    pub wins: usize,
    pub seeds: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub comparisons: Vec<Comparison>,
}

fn metric(m: &CellMetrics, name: &str) -> f64 {
    match name {
        "ndcg_retargeting" => m.ndcg_retargeting,
        "ndcg_discovery" => m.ndcg_discovery,
        "ndcg_context_balanced" => m.ndcg_context_balanced,
        "gain_retargeting" => m.gain_retargeting,
        "gain_discovery" => m.gain_discovery,
        "recall_at_k" => m.recall_at_k,
        _ => f64::NAN,
    }
}

/// Directional checks: (metric, better cell, worse cell).
pub const COMPARISONS: [(&str, Cell, Cell); 6] = [
    ("ndcg_retargeting", Cell::Both, Cell::PretrainOnly),
    ("ndcg_discovery", Cell::Both, Cell::PretrainOnly),
    ("ndcg_retargeting", Cell::Both, Cell::FinetuneOnly),
    ("ndcg_discovery", Cell::Both, Cell::FinetuneOnly),
    ("ndcg_context_balanced", Cell::Both, Cell::BothNoContext),
    ("ndcg_discovery", Cell::Both, Cell::BothNoWeb),
];

/// Wins needed out of `n` seeds: two thirds, rounded up.
pub fn majority(n: usize) -> usize {
    (2 * n).div_ceil(3)
}

impl AblationReport {
    fn compare(&mut self) {
        let seeds: Vec<u64> = {
            let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
            s.dedup();
            s
        };
        let by: BTreeMap<(Cell, u64), &CellMetrics> = self.rows.iter().map(|r| ((r.cell, r.seed), &r.metrics)).collect();
        for (m, better, worse) in COMPARISONS {
            let mut wins = 0;
            let mut n = 0;
            for s in &seeds {
                if let (Some(a), Some(b)) = (by.get(&(better, *s)), by.get(&(worse, *s))) {
                    n += 1;
                    wins += usize::from(metric(a, m) > metric(b, m));
                }
            }
            if n == 0 {
                continue;
            }
            self.comparisons.push(Comparison {
                name: format!("{} > {} on {}", better.name(), worse.name(), m),
                metric: m.to_string(),
                better,
                worse,
                wins,
                seeds: n,
                passed: wins >= majority(n),
            });
        }
    }

    pub fn comparison(&self, metric: &str, better: Cell, worse: Cell) -> Option<&Comparison> {
        self.comparisons
            .iter()
            .find(|c| c.metric == metric && c.better == better && c.worse == worse)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(
            "cell\tseed\tndcg_retargeting\tndcg_discovery\tndcg_context_balanced\tgain_retargeting\tgain_discovery\trecall_at_k\tpopularity_recall_at_k\tpredicted_ctr\tempirical_ctr\ttest_groups\tdiscovery_groups\n",
        );
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
                r.cell.name(),
                r.seed,
                m.ndcg_retargeting,
                m.ndcg_discovery,
                m.ndcg_context_balanced,
                m.gain_retargeting,
                m.gain_discovery,
                m.recall_at_k,
                m.popularity_recall_at_k,
                m.predicted_ctr,
                m.empirical_ctr,
                m.test_groups,
                m.discovery_groups
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for c in &self.comparisons {
            let _ = writeln!(
                s,
                "{} {}: {}/{} seeds",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.wins,
                c.seeds
            );
        }
        s
    }
}

/// Test-period metrics of one trained model.
pub fn evaluate_model(
    model: &Model,
    corpus: &Corpus,
    data: &Prepared,
    cfg: &RunConfig,
    context_tower: bool,
    seed: u64,
) -> Result<CellMetrics, AblationError> {
    let k = cfg.eval.k;
    let test = &data.test_groups;
    let score_all = |groups: &[crate::dataset::ImpressionGroup]| -> Result<Vec<Vec<f64>>, EvalError> {
        groups.iter().map(|g| group_scores(model, &data.enc, g)).collect()
    };
    let test_scores = score_all(test)?;
    let train_scores = score_all(&data.train_groups)?;
    let labels: Vec<Vec<f64>> = test
        .iter()
        .map(|g| g.labels.iter().map(|l| relevance(l, cfg.eval.graded)).collect())
        .collect();
    let retarget = rank_groups(test, &test_scores, &labels, SurfaceFilter::Retargeting);
    let discovery = rank_groups(test, &test_scores, &labels, SurfaceFilter::Discovery);
    let oracle = corpus.oracle_relevance(test)?;
    let balanced = rank_groups(test, &test_scores, &oracle, SurfaceFilter::Retargeting);

    let pop = data.popularity();
    let sims = [&train_scores, &test_scores];
    let extra = |set: usize, g: usize, i: usize| sims[set][g][i];
    let gain = |f| relative_gain_harness(&data.train_groups, test, &pop, extra, f, k).map(|r| r.relative_gain);

    let calib = CalibrationParams::from_model(model, cfg.trainer.pointwise_weight);
    let (mut predicted, mut clicked, mut n) = (0.0, 0usize, 0usize);
    for (g, s) in test.iter().zip(&test_scores) {
        let r_ctx = if context_tower {
            model.context_value(Context {
                surface: g.surface,
                device: g.device,
            })?
        } else {
            0.0
        };
        for (r, l) in s.iter().zip(&g.labels) {
            predicted += calib.click_probability(*r, r_ctx);
            clicked += usize::from(l[crate::event::Signal::Click.index()]);
            n += 1;
        }
    }

    let (recall, pop_recall) = retrieval_recall(model, data, cfg, &pop, seed)?;
    Ok(CellMetrics {
        ndcg_retargeting: mean_ndcg(&retarget, k)?,
        ndcg_discovery: mean_ndcg(&discovery, k)?,
        ndcg_context_balanced: context_balanced_ndcg(&balanced, k)?,
        gain_retargeting: gain(SurfaceFilter::Retargeting)?,
        gain_discovery: gain(SurfaceFilter::Discovery)?,
        recall_at_k: recall,
        popularity_recall_at_k: pop_recall,
        predicted_ctr: predicted / n.max(1) as f64,
        empirical_ctr: clicked as f64 / n.max(1) as f64,
        test_groups: retarget.len(),
        discovery_groups: discovery.len(),
    })
}

/// Recall@K of held-out positives against the positive plus random
/// catalog items, for the model and for a popularity ranking.
fn retrieval_recall(
    model: &Model,
    data: &Prepared,
    cfg: &RunConfig,
    pop: &std::collections::HashMap<u64, usize>,
    seed: u64,
) -> Result<(f64, f64), AblationError> {
    const QUERIES: usize = 500;
    let mut item_ids: Vec<u64> = data.enc.titles.keys().copied().collect();
    item_ids.sort_unstable();
    let titles: Vec<&[u32]> = item_ids.iter().map(|i| &*data.enc.titles[i]).collect();
    let emb = model.embed_items(&titles)?;
    let index: std::collections::HashMap<u64, usize> = item_ids.iter().enumerate().map(|(r, i)| (*i, r)).collect();
    let pool = cfg.eval.recall_pool.min(item_ids.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7265_6361);
    let step = (data.test_samples.len() / QUERIES).max(1);
    let mut queries = Vec::new();
    for s in data.test_samples.iter().step_by(step).take(QUERIES) {
        let mut ids = vec![s.item];
        while ids.len() < pool {
            let c = item_ids[rng.random_range(0..item_ids.len())];
            if !ids.contains(&c) {
                ids.push(c);
            }
        }
        let h = data.enc.history(&s.history);
        let u = model.embed_user(&h[h.len().saturating_sub(model.config.max_history)..])?;
        let sc: Vec<f64> = ids.iter().map(|i| crate::model::similarity(&u, emb.row_slice(index[i]))).collect();
        let pc: Vec<f64> = ids.iter().map(|i| pop.get(i).copied().unwrap_or(0) as f64).collect();
        queries.push((ids, sc, pc));
    }
    let k = cfg.eval.recall_k;
    let model_recall = recall_at_k(queries.iter().map(|(ids, s, _)| (&s[..], &ids[..], 0)), k);
    let pop_recall = recall_at_k(queries.iter().map(|(ids, _, p)| (&p[..], &ids[..], 0)), k);
    Ok((model_recall, pop_recall))
}

/// Seeds of an ablation: `eval.seeds` consecutive values from the run seed.
pub fn seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.eval.seeds as u64).map(|i| cfg.seed + i).collect()
}

fn model_seed(seed: u64) -> u64 {
    seed ^ 0x6d6f_6465_6c00
}

/// Runs every requested cell on every seed. Cells that share a dataset
/// variant share one pre-trained model.
pub fn run_ablation(cfg: &RunConfig, seeds: &[u64], cells: &[Cell]) -> Result<AblationReport, AblationError> {
    let mut report = AblationReport::default();
    for &seed in seeds {
        let corpus = Corpus::generate(cfg, seed)?;
        let tc = cfg.trainer_for(seed);
        let mut variants: BTreeMap<u8, (Prepared, Option<Model>)> = BTreeMap::new();
        for &cell in cells {
            if !variants.contains_key(&cell.variant()) {
                let data = corpus.prepare(&cell.dataset(&cfg.dataset))?;
                variants.insert(cell.variant(), (data, None));
            }
            let (data, pretrained) = variants.get_mut(&cell.variant()).expect("inserted above");
            let fresh = corpus.fresh_model(cfg, model_seed(seed))?;
            let start = if cell.pretrains() {
                if pretrained.is_none() {
                    let (m, _) = pretrain_run(fresh, &data.train_samples, &data.enc, &tc)?;
                    *pretrained = Some(m);
                }
                pretrained.clone().expect("just trained")
            } else {
                fresh
            };
            let ftc = TrainConfig {
                context_tower: tc.context_tower && cell != Cell::BothNoContext,
                ..tc.clone()
            };
            let model = if cell.finetunes() {
                finetune_run(start, &data.train_groups, &data.enc, &ftc)?.0
            } else {
                start
            };
            let metrics = evaluate_model(&model, &corpus, data, cfg, ftc.context_tower && cell.finetunes(), seed)?;
            report.rows.push(AblationRow { cell, seed, metrics });
        }
    }
    report.compare();
    Ok(report)
}
