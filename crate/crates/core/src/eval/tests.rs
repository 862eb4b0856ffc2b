use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ablation::{majority, run_ablation, Cell};
use super::*;
use crate::config::RunConfig;
use crate::pipeline::{Corpus, Prepared};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn ndcg_two_item_examples() {
    assert!(close(ndcg(&[0.9, 0.1], &[1, 2], &[1.0, 0.0], 0).unwrap(), 1.0, 1e-12));
    let second = ndcg(&[0.1, 0.9], &[1, 2], &[1.0, 0.0], 0).unwrap();
    assert!(close(second, 1.0 / 3f64.log2(), 1e-12));
    assert!(close(second, 0.63093, 1e-5));
}

#[test]
fn ndcg_ties_go_to_the_smaller_id() {
    // Equal scores: id 3 ranks before id 7.
    let a = ndcg(&[0.5, 0.5], &[7, 3], &[1.0, 0.0], 0).unwrap();
    assert!(close(a, 1.0 / 3f64.log2(), 1e-12));
    let b = ndcg(&[0.5, 0.5], &[3, 7], &[1.0, 0.0], 0).unwrap();
    assert!(close(b, 1.0, 1e-12));
    assert_eq!(rank_order(&[0.2, 0.7, 0.2, 0.7], &[4, 9, 1, 2]), vec![3, 1, 2, 0]);
}

#[test]
fn ndcg_truncation_and_errors() {
    // Positive at rank 3 falls outside the top 2.
    assert_eq!(ndcg(&[0.9, 0.8, 0.1], &[1, 2, 3], &[0.0, 0.0, 1.0], 2).unwrap(), 0.0);
    assert_eq!(ndcg(&[0.1, 0.2], &[1, 2], &[0.0, 0.0], 0), Err(EvalError::NoPositive));
    assert!(matches!(ndcg(&[0.1], &[1, 2], &[1.0, 0.0], 0), Err(EvalError::Length { .. })));
}

#[test]
fn graded_relevance_levels() {
    let l = |c, f, a, p| [c, f, a, p];
    assert_eq!(relevance(&l(false, false, false, false), true), 0.0);
    assert_eq!(relevance(&l(true, false, false, false), true), 1.0);
    assert_eq!(relevance(&l(true, true, false, false), true), 2.0);
    assert_eq!(relevance(&l(true, false, true, false), true), 2.0);
    assert_eq!(relevance(&l(true, false, true, true), true), 3.0);
    assert_eq!(relevance(&l(false, false, true, false), false), 1.0);
}

fn sample_group() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..10).prop_flat_map(|n| {
        (
            proptest::collection::vec(-5.0f64..5.0, n),
            proptest::collection::vec(0u8..4, n).prop_filter("needs a positive", |r| r.iter().any(|&x| x > 0)),
        )
            .prop_map(|(s, r)| (s, r.into_iter().map(f64::from).collect()))
    })
}

proptest! {
    #[test]
    fn ndcg_is_scale_invariant_and_bounded(
        (scores, rel) in sample_group(),
        c in 0.01f64..100.0,
        k in 0usize..12,
    ) {
        let ids: Vec<u64> = (0..scores.len() as u64).collect();
        let a = ndcg(&scores, &ids, &rel, k).unwrap();
        let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
        let b = ndcg(&scaled, &ids, &rel, k).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
        prop_assert!(close(a, b, 1e-12));
    }

    #[test]
    fn ndcg_is_one_iff_relevance_does_not_increase_down_the_ranking(
        (scores, rel) in sample_group(),
    ) {
        let ids: Vec<u64> = (0..scores.len() as u64).collect();
        let v = ndcg(&scores, &ids, &rel, 0).unwrap();
        let order = rank_order(&scores, &ids);
        let sorted = order.windows(2).all(|w| rel[w[0]] >= rel[w[1]]);
        prop_assert_eq!(close(v, 1.0, 1e-12), sorted);
        // Scoring by relevance itself is always ideal.
        prop_assert!(close(ndcg(&rel, &ids, &rel, 0).unwrap(), 1.0, 1e-12));
    }
}

#[test]
fn recall_edge_cases() {
    let scores = [0.1, 0.9, 0.5];
    let ids = [1, 2, 3];
    let q = || std::iter::once((&scores[..], &ids[..], 0));
    assert_eq!(recall_at_k(q(), 0), 0.0);
    assert_eq!(recall_at_k(q(), 3), 1.0);
    assert_eq!(recall_at_k(q(), 2), 0.0);
    assert_eq!(recall_at_k(std::iter::once((&scores[..], &ids[..], 1)), 1), 1.0);
    assert_eq!(recall_at_k(std::iter::empty(), 10), 0.0);
}

#[test]
fn random_scores_recall_matches_k_over_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (pool, k, n) = (500, 10, 5000);
    let ids: Vec<u64> = (0..pool as u64).collect();
    let queries: Vec<(Vec<f64>, usize)> = (0..n)
        .map(|_| ((0..pool).map(|_| rng.random::<f64>()).collect(), rng.random_range(0..pool)))
        .collect();
    let r = recall_at_k(queries.iter().map(|(s, p)| (&s[..], &ids[..], *p)), k);
    // Expectation 0.02, standard error about 0.002.
    assert!(close(r, k as f64 / pool as f64, 0.006), "{r}");
}

fn ranked(context: (u32, u32), scores: &[f64], rel: &[f64]) -> Ranked {
    Ranked {
        context,
        ids: (0..scores.len() as u64).collect(),
        scores: scores.to_vec(),
        rel: rel.to_vec(),
    }
}

#[test]
fn context_balanced_weighs_cells_equally() {
    let good = ranked((0, 0), &[0.9, 0.1], &[1.0, 0.0]);
    let bad = ranked((1, 0), &[0.1, 0.9], &[1.0, 0.0]);
    let groups = vec![good.clone(), good.clone(), good, bad];
    let worst = 1.0 / 3f64.log2();
    assert!(close(mean_ndcg(&groups, 0).unwrap(), (3.0 + worst) / 4.0, 1e-12));
    assert!(close(context_balanced_ndcg(&groups, 0).unwrap(), (1.0 + worst) / 2.0, 1e-12));
    assert_eq!(mean_ndcg(&[], 0), Err(EvalError::Empty));
    assert_eq!(context_balanced_ndcg(&[], 0), Err(EvalError::Empty));
}

fn group(items: Vec<u64>, clicks: &[bool], novel: Vec<bool>) -> ImpressionGroup {
    ImpressionGroup {
        user: 1,
        day: 3,
        surface: 2,
        device: 1,
        history: crate::dataset::HistoryRef { user: 1, start: 0, end: 0 },
        labels: clicks.iter().map(|&c| [c, false, false, false]).collect(),
        items,
        novel,
    }
}

#[test]
fn discovery_filter_and_group_selection() {
    let g = group(vec![5, 6, 7], &[true, false, false], vec![true, false, true]);
    assert_eq!(SurfaceFilter::Retargeting.select(&g), vec![0, 1, 2]);
    assert_eq!(SurfaceFilter::Discovery.select(&g), vec![0, 2]);
    let scores = vec![vec![0.3, 0.2, 0.1]];
    let rel = vec![vec![1.0, 0.0, 0.0]];
    let r = rank_groups(std::slice::from_ref(&g), &scores, &rel, SurfaceFilter::Discovery);
    assert_eq!(r.len(), 1);
    assert_eq!(r[0].ids, vec![5, 7]);
    assert_eq!(r[0].context, (2, 1));
    // One novel item left: dropped.
    let single = group(vec![5, 6], &[true, false], vec![true, false]);
    assert!(rank_groups(&[single], &[vec![0.0, 0.0]], &[vec![1.0, 0.0]], SurfaceFilter::Discovery).is_empty());
    // No novel positive: dropped.
    let none = group(vec![5, 6, 7], &[true, false, false], vec![false, true, true]);
    assert!(rank_groups(&[none], &scores, &rel, SurfaceFilter::Discovery).is_empty());
}

#[test]
fn relative_gain_follows_its_definition() {
    let r = EvalReport::new("ndcg", SurfaceFilter::Retargeting, 0.66, 0.6, 3);
    assert!(close(r.relative_gain, 0.1, 1e-12));
    assert_eq!(EvalReport::new("ndcg", SurfaceFilter::Discovery, 0.5, 0.0, 1).relative_gain, 0.0);
}

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.world.n_items = 400;
    c.world.n_users = 150;
    c.world.n_days = 20;
    c.world.n_categories = 10;
    c.world.activity = 0.5;
    c.model.d = 8;
    c.model.user_layers = 1;
    c.model.ffn_hidden = 16;
    c.model.item_layers = 1;
    c.model.item_hidden = 8;
    c.model.max_history = 16;
    c.model.vocab_size = 200;
    c.dataset.max_history = 16;
    c.eval.test_days = 5;
    c.eval.seeds = 2;
    c.eval.recall_pool = 50;
    c.trainer.pretrain.batch_size = 32;
    c.trainer.pretrain.warmup_steps = 5;
    c.trainer.finetune.batch_size = 8;
    c.trainer.finetune.warmup_steps = 2;
    c
}

fn fixture() -> (Corpus, Prepared) {
    let cfg = tiny_config();
    let corpus = Corpus::generate(&cfg, 2).unwrap();
    let data = corpus.prepare(&cfg.dataset).unwrap();
    (corpus, data)
}

#[test]
fn harness_gain_tracks_feature_information() {
    let (corpus, data) = fixture();
    let pop = data.popularity();
    let oracle = [
        corpus.oracle_relevance(&data.train_groups).unwrap(),
        corpus.oracle_relevance(&data.test_groups).unwrap(),
    ];
    let groups = [&data.train_groups, &data.test_groups];
    for filter in SurfaceFilter::ALL {
        let constant = relative_gain_harness(&data.train_groups, &data.test_groups, &pop, |_, _, _| 0.0, filter, 0).unwrap();
        assert!(constant.relative_gain.abs() < 1e-9, "{filter:?} constant {constant:?}");

        let duplicate = relative_gain_harness(
            &data.train_groups,
            &data.test_groups,
            &pop,
            |s, g, i| base_features(&pop, &groups[s][g], i)[0],
            filter,
            0,
        )
        .unwrap();
        assert!(duplicate.relative_gain.abs() < 1e-3, "{filter:?} duplicate {duplicate:?}");

        let informed =
            relative_gain_harness(&data.train_groups, &data.test_groups, &pop, |s, g, i| oracle[s][g][i], filter, 0)
                .unwrap();
        assert!(informed.relative_gain > 0.0, "{filter:?} oracle {informed:?}");
    }
}

#[test]
fn majority_is_two_thirds_rounded_up() {
    assert_eq!(majority(1), 1);
    assert_eq!(majority(2), 2);
    assert_eq!(majority(3), 2);
    assert_eq!(majority(5), 4);
}

#[test]
fn ablation_has_one_row_per_cell_and_seed() {
    let mut cfg = tiny_config();
    cfg.trainer.pretrain.epochs = 1;
    let cells = [Cell::PretrainOnly, Cell::FinetuneOnly, Cell::Both];
    let seeds = [1, 2];
    let report = run_ablation(&cfg, &seeds, &cells).unwrap();
    assert_eq!(report.rows.len(), cells.len() * seeds.len());
    assert!(report.comparison("ndcg_retargeting", Cell::Both, Cell::PretrainOnly).is_some());
    assert!(report.comparison("ndcg_context_balanced", Cell::Both, Cell::BothNoContext).is_none());
    let tsv = report.to_tsv();
    assert_eq!(tsv.lines().count(), 1 + report.rows.len());
    assert_eq!(report.summary().lines().count(), report.comparisons.len());
    for r in &report.rows {
        assert!((0.0..=1.0).contains(&r.metrics.ndcg_retargeting));
        assert!((0.0..=1.0).contains(&r.metrics.predicted_ctr));
    }
}
