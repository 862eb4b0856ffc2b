use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::event::EventKind;
use crate::model::{similarity, TowerConfig};

fn model() -> Model {
    let cfg = TowerConfig {
        d: 8,
        user_layers: 1,
        user_heads: 2,
        ffn_hidden: 16,
        item_layers: 1,
        item_hidden: 8,
        max_history: 8,
        max_positions: 9,
        vocab_size: 30,
        n_surfaces: 3,
        n_devices: 2,
    };
    let mut m = Model::new(cfg, 3).unwrap();
    // Move away from the near-uniform initial outputs.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        for x in m.store.value_mut(id).data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    m
}

fn tokens(rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..rng.random_range(1..5)).map(|_| rng.random_range(4..30)).collect()
}

struct Fixture {
    model: Model,
    histories: Vec<(u64, Vec<EncodedEvent>)>,
    titles: Vec<(u64, Vec<u32>)>,
}

fn fixture() -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let kinds = [EventKind::Click, EventKind::AddToCart, EventKind::WebQuery];
    let histories = (0..20u64)
        .map(|u| {
            let n = if u == 0 { 0 } else { rng.random_range(1..8) };
            let h = (0..n)
                .map(|_| EncodedEvent {
                    kind: kinds[rng.random_range(0..kinds.len())],
                    tokens: Arc::from(tokens(&mut rng)),
                })
                .collect();
            (1000 + u, h)
        })
        .collect();
    let titles = (0..30u64).map(|i| (i * 7, tokens(&mut rng))).collect();
    Fixture {
        model: model(),
        histories,
        titles,
    }
}

impl Fixture {
    fn tables(&self) -> (EmbeddingTable, EmbeddingTable) {
        let u = export_users(&self.model, self.histories.iter().map(|(id, h)| (*id, &h[..]))).unwrap();
        let i = export_items(&self.model, self.titles.iter().map(|(id, t)| (*id, &t[..]))).unwrap();
        (u, i)
    }
}

#[test]
fn file_scores_match_direct_forward_pass() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (u, i) = f.tables();
    let (up, ip) = (dir.path().join("users.emb"), dir.path().join("items.emb"));
    u.save(&up).unwrap();
    i.save(&ip).unwrap();
    let scorer = Scorer::load(&up, &ip).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let (uid, h) = &f.histories[rng.random_range(0..f.histories.len())];
        let (iid, t) = &f.titles[rng.random_range(0..f.titles.len())];
        let direct = similarity(&f.model.embed_user(h).unwrap(), &f.model.embed_item(t).unwrap());
        let served = scorer.score(*uid, &[*iid])[0].clone().unwrap();
        assert!((direct - served).abs() < 1e-6, "{direct} vs {served}");
    }
}

#[test]
fn exported_vectors_are_unit_norm() {
    let (u, i) = fixture().tables();
    for t in [&u, &i] {
        assert_eq!(t.dim, 8);
        for (id, v) in &t.records {
            let n = dot32(v, v).sqrt();
            assert!((n - 1.0).abs() < 1e-5, "{} {id}: {n}", t.kind);
        }
    }
}

#[test]
fn export_is_byte_identical_across_runs() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.emb"), dir.path().join("b.emb"));
    f.tables().0.save(&a).unwrap();
    f.tables().0.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(!dir.path().join("a.emb.tmp").exists());
}

#[test]
fn empty_history_user_is_kept() {
    let f = fixture();
    let (u, _) = f.tables();
    assert_eq!(u.records.len(), f.histories.len());
    let (id, v) = &u.records[0];
    assert_eq!(*id, 1000);
    let cls_only: Vec<f32> = f.model.embed_user(&[]).unwrap().iter().map(|&x| x as f32).collect();
    assert_eq!(v, &cls_only);
}

#[test]
fn layout_is_little_endian_with_header() {
    let t = EmbeddingTable {
        kind: EntityKind::Item,
        dim: 2,
        records: vec![(5, vec![1.0, -0.5]), (9, vec![0.25, 2.0])],
    };
    let b = t.to_bytes().unwrap();
    assert_eq!(&b[..4], b"EMB1");
    assert_eq!(b[4], 1);
    assert_eq!(&b[5..9], &2u32.to_le_bytes());
    assert_eq!(&b[9..17], &2u64.to_le_bytes());
    assert_eq!(&b[17..25], &5u64.to_le_bytes());
    assert_eq!(&b[25..29], &1.0f32.to_le_bytes());
    assert_eq!(b.len(), 17 + 2 * (8 + 2 * 4));
    assert_eq!(EmbeddingTable::read_from(&b[..]).unwrap(), t);
}

#[test]
fn malformed_tables_are_rejected() {
    let t = EmbeddingTable {
        kind: EntityKind::User,
        dim: 1,
        records: vec![(5, vec![1.0]), (5, vec![0.5])],
    };
    let b = t.to_bytes().unwrap();
    assert!(matches!(EmbeddingTable::read_from(&b[..]), Err(ServingError::Duplicate(5))));
    let mut bad = b.clone();
    bad[0] = b'X';
    assert!(matches!(EmbeddingTable::read_from(&bad[..]), Err(ServingError::BadMagic)));
    let mut kind = b.clone();
    kind[4] = 7;
    assert!(matches!(EmbeddingTable::read_from(&kind[..]), Err(ServingError::Kind(7))));
    assert!(matches!(EmbeddingTable::read_from(&b[..20]), Err(ServingError::Io(_))));
    let one = EmbeddingTable {
        records: vec![(5, vec![1.0])],
        ..t
    };
    let mut extra = one.to_bytes().unwrap();
    extra.push(0);
    assert!(matches!(EmbeddingTable::read_from(&extra[..]), Err(ServingError::Trailing(1))));
}

#[test]
fn item_as_user_scores_one() {
    let (_, items) = fixture().tables();
    let (id, v) = items.records[3].clone();
    let users = EmbeddingTable {
        kind: EntityKind::User,
        dim: items.dim,
        records: vec![(42, v)],
    };
    let s = Scorer::new(users, items).unwrap();
    assert!((s.score(42, &[id])[0].clone().unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn results_follow_request_order_with_per_id_errors() {
    let (u, i) = fixture().tables();
    let s = Scorer::new(u.clone(), i.clone()).unwrap();
    let req = [21, 0, 999, 7, 14];
    let out = s.score(1003, &req);
    assert_eq!(out.len(), req.len());
    assert_eq!(out[2], Err(ScoreError::UnknownItem(999)));
    for (k, &id) in req.iter().enumerate().filter(|(k, _)| *k != 2) {
        assert_eq!(out[k], s.score(1003, &[id])[0]);
        assert!(out[k].is_ok());
    }
    assert!(s.score(5, &[0, 7]).iter().all(|r| *r == Err(ScoreError::UnknownUser(5))));
    assert!(matches!(Scorer::new(i.clone(), u), Err(ServingError::WrongKind { .. })));
}
