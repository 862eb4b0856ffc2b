use proptest::prelude::*;

use super::*;
use crate::synth::{generate_world, simulate_logs, WorldConfig};

fn ev(user: u64, day: u32, kind: EventKind, item: Option<u64>, text: &str) -> LogRecord {
    LogRecord::Event {
        user,
        event: Event {
            day,
            kind,
            text: text.into(),
            item,
            surface: None,
        },
    }
}

fn click(user: u64, day: u32, item: u64) -> LogRecord {
    ev(user, day, EventKind::Click, Some(item), "red shirt")
}

fn imp(user: u64, day: u32, items: &[u64], signals: Vec<Vec<Signal>>) -> LogRecord {
    LogRecord::Impression {
        day,
        user,
        surface: 1,
        device: 0,
        items: items.to_vec(),
        signals,
    }
}

fn build(logs: &[LogRecord], cfg: &DatasetConfig) -> Dataset {
    let cats: HashMap<u64, usize> = (0..100).map(|i| (i, (i / 10) as usize)).collect();
    Dataset::build(logs, &cats, cfg)
}

#[test]
fn one_day_delay_hides_the_target_day() {
    let logs = vec![click(1, 8, 1), click(1, 9, 2), click(1, 10, 3), click(1, 10, 4)];
    let d = build(&logs, &DatasetConfig::default());
    let s = d.pretrain.iter().find(|s| s.item == 4).unwrap();
    let h = d.history(&s.history);
    assert_eq!(h.len(), 2);
    assert!(h.iter().all(|e| e.day <= 9));
}

#[test]
fn zero_delay_admits_earlier_same_day_events() {
    let logs = vec![click(1, 9, 1), click(1, 10, 2), click(1, 10, 3), click(1, 10, 4)];
    let d = build(&logs, &DatasetConfig { delay: 0, ..Default::default() });
    let s = d.pretrain.iter().find(|s| s.item == 3).unwrap();
    let items: Vec<_> = d.history(&s.history).iter().map(|e| e.item.unwrap()).collect();
    assert_eq!(items, vec![1, 2]);
}

#[test]
fn first_interaction_keeps_an_empty_history() {
    let d = build(&[click(5, 0, 1)], &DatasetConfig::default());
    assert_eq!(d.pretrain.len(), 1);
    assert!(d.pretrain[0].history.is_empty());
    assert_eq!(d.pretrain[0].signal, Signal::Click);
}

#[test]
fn every_positive_kind_is_a_sample_and_queries_are_not() {
    let logs = vec![
        ev(1, 0, EventKind::WebQuery, None, "shirt"),
        click(1, 1, 1),
        ev(1, 1, EventKind::AddToCart, Some(1), "red shirt"),
        ev(1, 1, EventKind::AddToFavorites, Some(1), "red shirt"),
        ev(1, 1, EventKind::Purchase, Some(1), "red shirt"),
    ];
    let d = build(&logs, &DatasetConfig::default());
    let sig: Vec<_> = d.pretrain.iter().map(|s| s.signal).collect();
    assert_eq!(sig, vec![Signal::Click, Signal::Cart, Signal::Fvrt, Signal::Prch]);
    assert!(d.pretrain.iter().all(|s| d.history(&s.history)[0].kind == EventKind::WebQuery));
}

#[test]
fn histories_keep_the_most_recent_events() {
    let logs: Vec<_> = (0..10).map(|d| click(1, d, d as u64)).collect();
    let d = build(&logs, &DatasetConfig { max_history: 3, ..Default::default() });
    let last = d.pretrain.last().unwrap();
    let items: Vec<_> = d.history(&last.history).iter().map(|e| e.item.unwrap()).collect();
    assert_eq!(items, vec![6, 7, 8]);
}

#[test]
fn web_queries_can_be_left_out() {
    let logs = vec![ev(1, 0, EventKind::WebQuery, None, "lamp"), click(1, 0, 2), click(1, 3, 1)];
    let with = build(&logs, &DatasetConfig::default());
    let without = build(&logs, &DatasetConfig { web_queries: false, ..Default::default() });
    assert_eq!(with.pretrain[1].history.len(), 2);
    assert_eq!(without.pretrain[1].history.len(), 1);
    assert_eq!(without.history(&without.pretrain[1].history)[0].kind, EventKind::Click);
}

#[test]
fn groups_without_positives_are_dropped() {
    let logs = vec![
        imp(1, 0, &[1, 2], vec![vec![], vec![]]),
        imp(1, 1, &[3], vec![vec![Signal::Click]]),
    ];
    let d = build(&logs, &DatasetConfig::default());
    assert_eq!(d.groups.len(), 1);
    assert_eq!(d.groups[0].items, vec![3]);
    assert!(d.groups.iter().all(ImpressionGroup::has_positive));
}

#[test]
fn purchase_closes_the_funnel_downward() {
    let logs = vec![imp(1, 0, &[1, 2], vec![vec![], vec![Signal::Prch]])];
    let d = build(&logs, &DatasetConfig::default());
    assert_eq!(d.groups[0].labels, vec![[false; 4], [true, true, false, true]]);
    let open = build(&logs, &DatasetConfig { funnel_closure: false, ..Default::default() });
    assert_eq!(open.groups[0].labels[1], [false, false, false, true]);
    let fav = build(&[imp(1, 0, &[1], vec![vec![Signal::Fvrt]])], &DatasetConfig::default());
    assert_eq!(fav.groups[0].labels[0], [true, false, true, false]);
}

#[test]
fn label_window_joins_later_interactions() {
    let logs = vec![
        click(1, 0, 1),
        imp(1, 0, &[1, 2, 3], vec![vec![], vec![], vec![]]),
        ev(1, 0, EventKind::AddToCart, Some(2), "x"),
        click(1, 1, 3),
    ];
    let same_day = build(&logs, &DatasetConfig::default());
    assert_eq!(same_day.groups.len(), 1);
    // Item 1 was clicked before the impression, so it is not a positive.
    assert_eq!(same_day.groups[0].clicked(), vec![false, true, false]);
    let two_days = build(&logs, &DatasetConfig { label_window: 1, ..Default::default() });
    assert_eq!(two_days.groups[0].clicked(), vec![false, true, true]);
}

#[test]
fn novelty_is_category_level_and_prior_to_the_request() {
    let logs = vec![
        click(1, 0, 11),
        imp(1, 2, &[12, 25, 30], vec![vec![Signal::Click], vec![], vec![]]),
        click(1, 2, 25),
    ];
    let d = build(&logs, &DatasetConfig::default());
    assert_eq!(d.groups[0].novel, vec![false, true, true]);
}

#[test]
fn split_puts_the_boundary_day_in_test() {
    let logs = vec![click(1, 3, 1), click(1, 5, 2), click(1, 6, 3)];
    let d = build(&logs, &DatasetConfig::default());
    let (train, test) = time_split(d.pretrain.clone(), 5, 7).unwrap();
    assert_eq!(train.iter().map(|s| s.item).collect::<Vec<_>>(), vec![1]);
    assert_eq!(test.iter().map(|s| s.item).collect::<Vec<_>>(), vec![2, 3]);
    let (train, test) = time_split(d.pretrain.clone(), 7, 7).unwrap();
    assert_eq!((train.len(), test.len()), (3, 0));
    assert_eq!(time_split(d.pretrain, 8, 7), Err(DatasetError::Boundary { boundary: 8, days: 7 }));
}

#[test]
fn encoded_histories_line_up_with_events() {
    let logs = vec![ev(1, 0, EventKind::WebQuery, None, "red"), click(1, 1, 1), click(1, 3, 2)];
    let d = build(&logs, &DatasetConfig::default());
    let vocab = Vocab::build(&["red shirt", "blue shirt"], 24).unwrap();
    let enc = Encoded::new(&vocab, &d.histories, [(1, "red shirt"), (2, "blue shirt")]);
    let s = &d.pretrain[1];
    let h = enc.history(&s.history);
    assert_eq!(h.len(), 2);
    assert_eq!(h[0].kind, EventKind::WebQuery);
    assert_eq!(&*h[0].tokens, &vocab.tokenize("red")[..]);
    assert_eq!(enc.title(2).unwrap(), &vocab.tokenize("blue shirt")[..]);
    assert!(enc.title(3).is_none());
}

fn world_logs(seed: u64) -> (Vec<LogRecord>, HashMap<u64, usize>) {
    let cfg = WorldConfig {
        n_items: 200,
        n_users: 40,
        n_days: 12,
        ..WorldConfig::default()
    };
    let w = generate_world(&cfg, seed).unwrap();
    let cats = w.items.iter().map(|i| (i.id, i.category)).collect();
    (simulate_logs(&w, cfg.n_days).unwrap(), cats)
}

#[test]
fn simulated_stream_is_deterministic() {
    let (logs, cats) = world_logs(4);
    let a = Dataset::build(&logs, &cats, &DatasetConfig::default());
    let b = Dataset::build(&logs, &cats, &DatasetConfig::default());
    assert_eq!(a, b);
    assert!(!a.pretrain.is_empty() && !a.groups.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn scans_find_no_contract_violations(seed in 0u64..1000, delay in 0u32..3, max_history in 1usize..40) {
        let (logs, cats) = world_logs(seed);
        let cfg = DatasetConfig { delay, max_history, ..Default::default() };
        let d = Dataset::build(&logs, &cats, &cfg);
        let targets = d
            .pretrain
            .iter()
            .map(|s| (s.day, &s.history))
            .chain(d.groups.iter().map(|g| (g.day, &g.history)));
        prop_assert_eq!(delay_violations(&d.histories, targets, delay), 0);
        prop_assert!(d.groups.iter().all(ImpressionGroup::has_positive));
        prop_assert!(d.pretrain.iter().all(|s| s.history.len() <= max_history));
    }
}
