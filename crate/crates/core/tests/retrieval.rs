mod common;

use std::cell::Cell;
use std::collections::HashMap;

use cds::curriculum::partition;
use cds::embeddings::{similarity, top_m, EmbeddingStore, Metric, Query, VectorLookup};
use cds::selection::{order_demos, select_cds, select_kate, select_uniform, OrderMode, Retrieval};
use cds::EmbeddingStore64;
use common::{corpus, example, random_corpus, random_store};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sum_of_squares_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc += d * d;
    }
    -acc.sqrt()
}

#[test]
fn similarity_matches_componentwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let dim = rng.gen_range(1..64);
        let a: Vec<f64> = (0..dim).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let b: Vec<f64> = (0..dim).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let got = similarity(&a, &b).unwrap();
        let want = sum_of_squares_distance(&a, &b);
        assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want}");
    }
    assert_eq!(similarity(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), -5.0);
}

fn exhaustive(store: &EmbeddingStore64, query: &[f64], candidates: &[&str], m: usize) -> Vec<String> {
    let mut scored: Vec<(f64, &str)> = candidates
        .iter()
        .map(|&id| (sum_of_squares_distance(query, store.vector(id).unwrap()), id))
        .collect();
    scored.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(y.1)));
    scored.into_iter().take(m).map(|(_, id)| id.to_string()).collect()
}

#[test]
fn top_m_equals_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ids: Vec<String> = (0..1000).map(|i| format!("c{i:04}")).collect();
    let store = random_store(&mut rng, &ids, 16);
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    for _ in 0..20 {
        let q: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got: Vec<String> = top_m(&store, Query::Vector(&q), &refs, 5, Metric::NegEuclidean)
            .unwrap()
            .into_iter()
            .map(|n| n.id)
            .collect();
        assert_eq!(got, exhaustive(&store, &q, &refs, 5));
    }
}

#[test]
fn equidistant_tie_goes_to_smaller_id() {
    let store = EmbeddingStore64::from_rows(
        1,
        vec![("q".to_string(), vec![0.0]), ("b".into(), vec![1.0]), ("a".into(), vec![-1.0])],
    )
    .unwrap();
    let best = top_m(&store, Query::Id("q"), &["b", "a"], 1, Metric::NegEuclidean).unwrap();
    assert_eq!(best[0].id, "a");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn top_m_is_translation_invariant(seed in any::<u64>(), shift in prop::collection::vec(-5i32..5, 4)) {
        // Integer-valued vectors keep the shifted distances exact.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<(String, Vec<f64>)> = (0..30)
            .map(|i| (format!("v{i:02}"), (0..4).map(|_| rng.gen_range(-8..8) as f64).collect()))
            .collect();
        let shifted: Vec<(String, Vec<f64>)> = rows
            .iter()
            .map(|(id, v)| (id.clone(), v.iter().zip(&shift).map(|(x, s)| x + *s as f64).collect()))
            .collect();
        let a = EmbeddingStore64::from_rows(4, rows).unwrap();
        let b = EmbeddingStore64::from_rows(4, shifted).unwrap();
        let cands: Vec<&str> = a.ids().iter().skip(1).map(String::as_str).collect();
        let ids = |s: &EmbeddingStore64| -> Vec<String> {
            top_m(s, Query::Id("v00"), &cands, 7, Metric::NegEuclidean).unwrap().into_iter().map(|n| n.id).collect()
        };
        prop_assert_eq!(ids(&a), ids(&b));
    }

    #[test]
    fn top_all_is_a_permutation(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<String> = (0..n).map(|i| format!("i{i}")).collect();
        let store = random_store(&mut rng, &ids, 3);
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let q = [0.0, 0.0, 0.0];
        let mut got: Vec<String> = top_m(&store, Query::Vector(&q), &refs, n, Metric::NegEuclidean)
            .unwrap().into_iter().map(|x| x.id).collect();
        got.sort();
        let mut want = ids.clone();
        want.sort();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn cds_covers_every_partition_and_is_best_within_each(seed in any::<u64>(), n in 10usize..120, k in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = random_corpus(&mut rng, n, 6, true);
        let mut ids: Vec<String> = train.ids().map(String::from).collect();
        ids.push("test".into());
        let store = random_store(&mut rng, &ids, 6);
        let parts = partition(&train, k).unwrap();
        let demos = select_cds(&parts, Retrieval::Similarity, Some(&store), "test", seed, Metric::NegEuclidean).unwrap();
        let mut seen: Vec<usize> = demos.items.iter().map(|d| d.provenance.source_partition.unwrap()).collect();
        seen.sort();
        prop_assert_eq!(seen, (1..=k).collect::<Vec<_>>());
        let q = store.vector("test").unwrap();
        for d in &demos.items {
            let part = &parts.partitions[d.provenance.source_partition.unwrap() - 1];
            let refs: Vec<&str> = part.iter().map(String::as_str).collect();
            prop_assert_eq!(&exhaustive(&store, q, &refs, 1)[0], &d.id);
        }
    }
}

#[test]
fn kate_with_one_partition_matches_cds() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let train = random_corpus(&mut rng, 40, 4, false);
    let mut ids: Vec<String> = train.ids().map(String::from).collect();
    ids.push("t".into());
    let store = random_store(&mut rng, &ids, 5);
    let parts = partition(&train, 1).unwrap();
    let cds = select_cds(&parts, Retrieval::Similarity, Some(&store), "t", 1, Metric::NegEuclidean).unwrap();
    let kate = select_kate(&train, &store, "t", 1, Metric::NegEuclidean).unwrap();
    assert_eq!(cds.ids(), kate.ids());
}

#[test]
fn planted_neighbours_are_recovered() {
    // Five partitions of 8; in each, one item sits at distance 0.1 from the
    // query and the rest at distance >= 1.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut examples = Vec::new();
    let mut rows = vec![("query".to_string(), vec![0.0; 8])];
    let mut planted = Vec::new();
    for level in 1..=5 {
        let hit = rng.gen_range(0..8);
        for j in 0..8 {
            let id = format!("l{level}-{j}");
            examples.push(example(&id, level, None));
            let mut v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let radius = if j == hit { 0.1 } else { rng.gen_range(1.0..3.0) };
            v.iter_mut().for_each(|x| *x *= radius / norm);
            if j == hit {
                planted.push(id.clone());
            }
            rows.push((id, v));
        }
    }
    let train = corpus(examples);
    let store = EmbeddingStore::from_rows(8, rows).unwrap();
    let parts = partition(&train, 5).unwrap();
    let demos = select_cds(&parts, Retrieval::Similarity, Some(&store), "query", 1, Metric::NegEuclidean).unwrap();
    assert_eq!(demos.ids(), planted.iter().map(String::as_str).collect::<Vec<_>>());
}

/// Counts every vector lookup.
struct Counting<'a> {
    inner: &'a EmbeddingStore64,
    hits: Cell<usize>,
}

impl VectorLookup<f64> for Counting<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn vector(&self, id: &str) -> Option<&[f64]> {
        self.hits.set(self.hits.get() + 1);
        self.inner.vector(id)
    }
}

#[test]
fn random_retrieval_never_reads_the_store() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let train = random_corpus(&mut rng, 50, 5, false);
    let ids: Vec<String> = train.ids().map(String::from).collect();
    let store = random_store(&mut rng, &ids, 4);
    let counting = Counting {
        inner: &store,
        hits: Cell::new(0),
    };
    let parts = partition(&train, 5).unwrap();
    for seed in 0..20 {
        select_cds(&parts, Retrieval::Random, Some(&counting), "ex0001", seed, Metric::NegEuclidean).unwrap();
    }
    assert_eq!(counting.hits.get(), 0);
    // sanity: similarity retrieval does read it
    select_cds(&parts, Retrieval::Similarity, Some(&counting), "ex0001", 0, Metric::NegEuclidean).unwrap();
    assert!(counting.hits.get() > 0);
}

fn three_sigma_ok(count: usize, trials: usize, p: f64) -> bool {
    let mean = trials as f64 * p;
    let sd = (trials as f64 * p * (1.0 - p)).sqrt();
    (count as f64 - mean).abs() <= 3.0 * sd
}

#[test]
fn uniform_pairs_are_uniform() {
    let train = corpus((0..5).map(|i| example(&format!("u{i}"), 1, None)).collect());
    let trials = 100_000;
    let mut counts: HashMap<Vec<String>, usize> = HashMap::new();
    for seed in 0..trials as u64 {
        let mut ids: Vec<String> = select_uniform(&train, "none", 2, seed)
            .unwrap()
            .ids()
            .into_iter()
            .map(String::from)
            .collect();
        ids.sort();
        *counts.entry(ids).or_default() += 1;
    }
    // C(5,2) = 10 equally likely pairs
    assert_eq!(counts.len(), 10);
    for (pair, c) in &counts {
        assert!(three_sigma_ok(*c, trials, 0.1), "{pair:?}: {c}");
    }
}

#[test]
fn shuffle_permutations_are_uniform() {
    let train = corpus((1..=3).map(|l| example(&format!("s{l}"), l, None)).collect());
    let parts = partition(&train, 3).unwrap();
    let trials = 60_000;
    let mut counts: HashMap<Vec<String>, usize> = HashMap::new();
    for seed in 0..trials as u64 {
        let demos = select_cds::<f64, EmbeddingStore64>(&parts, Retrieval::Random, None, "t", seed, Metric::NegEuclidean)
            .unwrap();
        let ordered = order_demos(demos, OrderMode::Shuffle, &train, "t", seed).unwrap();
        *counts.entry(ordered.ids().into_iter().map(String::from).collect()).or_default() += 1;
    }
    assert_eq!(counts.len(), 6);
    for (perm, c) in &counts {
        assert!(three_sigma_ok(*c, trials, 1.0 / 6.0), "{perm:?}: {c}");
    }
}
