use std::collections::HashMap;
use std::time::Instant;

use expert_lm::eval::{Split, TaskInstance, TaskSet};
use expert_lm::keys::{Embedder, EmbedderConfig, EmbeddingVector, TextFormat};
use expert_lm::library::{
    build_library, load_library, nearest, route, route_embedded, save_library, tally, EmbedSource, ExpertKind,
    ExpertLibrary, ExpertRecord, LibraryEntry, LibrarySettings, QueryMatch,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn record(id: &str) -> ExpertRecord {
    ExpertRecord {
        id: id.into(),
        kind: ExpertKind::Pe,
        dataset: id.into(),
        prompt: None,
        params: format!("{id}.elmp"),
        provenance: None,
    }
}

fn task(name: &str, n: usize) -> TaskSet {
    let instances = (0..n)
        .map(|i| TaskInstance {
            id: format!("{name}-{i}"),
            input: format!("{name} says {i} things"),
            choices: vec!["left".into(), "right".into()],
            target: "left".into(),
        })
        .collect();
    TaskSet::new(name, Split::Train, instances).unwrap()
}

fn unit(rng: &mut impl Rng, dim: usize) -> EmbeddingVector {
    EmbeddingVector::normalized((0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

fn raw_library(dim: usize) -> ExpertLibrary {
    ExpertLibrary::empty(dim, TextFormat::E, 1, 0, EmbedSource::External).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn entry_count_law(sizes in prop::collection::vec(1usize..40, 0..8), s in 1usize..30) {
        let experts: Vec<_> = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| (record(&format!("e{i}")), task(&format!("t{i}"), n)))
            .collect();
        let settings = LibrarySettings { samples_per_expert: s, format: TextFormat::E, seed: 1 };
        let lib = build_library(&experts, &settings, &Embedder::Builtin(EmbedderConfig::default())).unwrap();
        let want: usize = sizes.iter().map(|&n| n.min(s)).sum();
        prop_assert_eq!(lib.len(), want);
        prop_assert_eq!(lib.to_jsonl().lines().count(), want + 1);
    }
}

/// Independent scan in `f64`: highest inner product, earliest index on ties.
fn scan(keys: &[EmbeddingVector], q: &EmbeddingVector) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, k) in keys.iter().enumerate() {
        let s = k.dot(q);
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

#[test]
fn nearest_matches_full_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let dim = 64;
    let keys: Vec<_> = (0..10_000).map(|_| unit(&mut rng, dim)).collect();
    let mut lib = raw_library(dim);
    for (i, k) in keys.iter().enumerate() {
        lib.push_entry(LibraryEntry {
            key: k.clone(),
            expert_id: format!("e{}", i % 37),
            instance_id: format!("i{i}"),
        })
        .unwrap();
    }
    for _ in 0..100 {
        let q = unit(&mut rng, dim);
        assert_eq!(nearest(&lib, &q).unwrap().index, scan(&keys, &q));
    }
}

/// Histogram oracle: sort candidates by (votes desc, summed score desc, id asc).
fn histogram_choice(per_query: &[QueryMatch]) -> String {
    let mut h: HashMap<&str, (usize, f64)> = HashMap::new();
    for m in per_query {
        let e = h.entry(&m.expert).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += m.score as f64;
    }
    let mut v: Vec<_> = h.into_iter().collect();
    v.sort_by(|a, b| {
        b.1 .0
            .cmp(&a.1 .0)
            .then(b.1 .1.partial_cmp(&a.1 .1).unwrap())
            .then(a.0.cmp(b.0))
    });
    v[0].0.to_string()
}

#[test]
fn routing_decisions_match_vote_histogram() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dim = 16;
    for case in 0..10_000u64 {
        // A small palette of key directions makes vote ties common.
        let palette: Vec<_> = (0..rng.gen_range(2..6)).map(|_| unit(&mut rng, dim)).collect();
        let experts = rng.gen_range(1..5);
        let mut lib = raw_library(dim);
        let mut keys = Vec::new();
        for i in 0..rng.gen_range(1..12) {
            let k = palette[rng.gen_range(0..palette.len())].clone();
            keys.push(k.clone());
            lib.push_entry(LibraryEntry {
                key: k,
                expert_id: format!("x{}", rng.gen_range(0..experts)),
                instance_id: format!("k{i}"),
            })
            .unwrap();
        }
        let queries: Vec<_> = (0..rng.gen_range(1..9))
            .map(|i| (format!("q{i}"), palette[rng.gen_range(0..palette.len())].clone()))
            .collect();
        let d = route_embedded(&lib, &queries, case).unwrap();
        for (m, (_, q)) in d.per_query.iter().zip(&queries) {
            assert_eq!(m.entry, scan(&keys, q));
            assert_eq!(m.expert, lib.expert_of(m.entry));
        }
        assert_eq!(d.chosen_expert, histogram_choice(&d.per_query), "case {case}");
        assert_eq!(d.votes.values().sum::<usize>(), queries.len());
    }
}

#[test]
fn tally_matches_histogram_on_discrete_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10_000 {
        let per_query: Vec<_> = (0..rng.gen_range(1..10))
            .map(|i| QueryMatch {
                instance: format!("q{i}"),
                entry: 0,
                expert: ["a", "b", "c"][rng.gen_range(0..3)].to_string(),
                key_instance: "k".into(),
                score: [0.25f32, 0.5, 0.75][rng.gen_range(0..3)],
            })
            .collect();
        assert_eq!(tally(&per_query).unwrap().0, histogram_choice(&per_query));
    }
}

#[test]
fn routing_is_deterministic_and_samples_q() {
    let emb = Embedder::Builtin(EmbedderConfig::default());
    let experts: Vec<_> = ["a", "b", "c"].iter().map(|id| (record(id), task(id, 30))).collect();
    let lib = build_library(&experts, &LibrarySettings::default(), &emb).unwrap();
    let target = task("b", 50);
    let d1 = route(&lib, &target.instances, 32, &emb, 7).unwrap();
    let d2 = route(&lib, &target.instances, 32, &emb, 7).unwrap();
    assert_eq!(d1, d2);
    assert_eq!(d1.per_query.len(), 32);
    assert_eq!(d1.chosen_expert, "b");
    let small = route(&lib, &target.instances[..5], 32, &emb, 7).unwrap();
    assert_eq!(small.per_query.len(), 5);
}

#[test]
fn appending_keeps_old_bytes_and_old_decisions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lib.jsonl");
    let emb = Embedder::Builtin(EmbedderConfig::default());
    let experts: Vec<_> = ["a", "b"].iter().map(|id| (record(id), task(id, 20))).collect();
    let mut lib = build_library(&experts, &LibrarySettings::default(), &emb).unwrap();
    save_library(&lib, &path).unwrap();
    let before = std::fs::read(&path).unwrap();
    let old_decision = route(&lib, &task("a", 10).instances, 8, &emb, 0).unwrap();

    let mut loaded = load_library(&path, None).unwrap();
    let far = TaskSet::new(
        "zq",
        Split::Train,
        (0..10)
            .map(|i| TaskInstance {
                id: format!("zq{i}"),
                input: format!("QQQQ ZZZZ {i}"),
                choices: vec![],
                target: "x".into(),
            })
            .collect(),
    )
    .unwrap();
    loaded.add_expert(&record("zq"), &far, &emb).unwrap();
    lib.add_expert(&record("zq"), &far, &emb).unwrap();
    assert_eq!(loaded, lib);
    save_library(&loaded, &path).unwrap();
    let after = std::fs::read(&path).unwrap();
    assert!(after.starts_with(&before));
    assert!(after.len() > before.len());

    let new_decision = route(&loaded, &task("a", 10).instances, 8, &emb, 0).unwrap();
    assert!(!new_decision.votes.contains_key("zq"));
    assert_eq!(new_decision, old_decision);
}

#[test]
fn large_library_saves_and_loads_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.jsonl");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut lib = ExpertLibrary::empty(256, TextFormat::E, 100, 0, EmbedSource::Builtin(EmbedderConfig::default())).unwrap();
    for e in 0..296 {
        for i in 0..100 {
            lib.push_entry(LibraryEntry {
                key: unit(&mut rng, 256),
                expert_id: format!("expert{e:03}"),
                instance_id: format!("i{i}"),
            })
            .unwrap();
        }
    }
    let start = Instant::now();
    save_library(&lib, &path).unwrap();
    let back = load_library(&path, None).unwrap();
    let elapsed = start.elapsed();
    assert_eq!(back, lib);
    assert!(elapsed.as_secs_f64() < 2.0, "{elapsed:?}");
}
