//! Demonstration selection: uniform sampling, nearest-neighbour (KATE) and
//! curriculum selection (one demonstration per difficulty partition).
//!
//! Every random choice draws from a ChaCha8 stream derived from
//! `(global seed, stream tag, test id)`, so results do not depend on the
//! order in which test instances are processed. Selection and ordering use
//! separate streams, which keeps the selected set identical when only the
//! ordering mode changes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::curriculum::{difficulty_key, CurriculumError, PartitionSet};
use crate::embeddings::{top_m, EmbeddingError, Metric, Query, VectorLookup};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Uniform,
    Kate,
    Cds,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retrieval {
    Random,
    #[default]
    Similarity,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderMode {
    #[default]
    Shuffle,
    E2h,
}

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    #[serde(default)]
    pub retrieval: Retrieval,
    #[serde(default)]
    pub ordering: OrderMode,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub metric: Metric,
}

fn default_k() -> usize {
    DEFAULT_K
}

impl SelectionConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            retrieval: Retrieval::default(),
            ordering: OrderMode::default(),
            k: DEFAULT_K,
            metric: Metric::default(),
        }
    }

    pub fn needs_embeddings(&self) -> bool {
        match self.strategy {
            Strategy::Uniform => false,
            Strategy::Kate => true,
            Strategy::Cds => self.retrieval == Retrieval::Similarity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: Strategy,
    /// 1-based partition index (curriculum selection only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_partition: Option<usize>,
    /// Retrieval score (similarity retrieval only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub id: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationSet {
    pub items: Vec<Demonstration>,
}

impl DemonstrationSet {
    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|d| d.id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("need {k} demonstrations but only {available} candidates are available")]
    TooFewCandidates { k: usize, available: usize },
    #[error("configured k={config} but the partition set has k={partitions}")]
    KMismatch { config: usize, partitions: usize },
    #[error("strategy requires an embedding store")]
    MissingStore,
    #[error("partition {0} has no usable candidates")]
    EmptyPartition(usize),
    #[error("unknown example `{0}`")]
    UnknownExample(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
}

/// Independent random streams derived from one global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Selection,
    Ordering,
}

impl Stream {
    fn tag(self) -> &'static [u8] {
        match self {
            Stream::Selection => b"select",
            Stream::Ordering => b"order",
        }
    }
}

/// Per-instance RNG: SHA-256 over (seed, stream, test id) seeds ChaCha8.
pub fn instance_rng(seed: u64, test_id: &str, stream: Stream) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"cds-rng-v1\0");
    h.update(seed.to_le_bytes());
    h.update(stream.tag());
    h.update([0u8]);
    h.update(test_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn candidates<'a>(ids: impl Iterator<Item = &'a str>, test_id: &str) -> Vec<&'a str> {
    ids.filter(|&id| id != test_id).collect()
}

/// `k` distinct training examples drawn uniformly without replacement.
/// An example whose id equals `test_id` is never drawn.
pub fn select_uniform(
    train: &Corpus,
    test_id: &str,
    k: usize,
    seed: u64,
) -> Result<DemonstrationSet, SelectionError> {
    let pool = candidates(train.ids(), test_id);
    if pool.len() < k {
        return Err(SelectionError::TooFewCandidates {
            k,
            available: pool.len(),
        });
    }
    let mut rng = instance_rng(seed, test_id, Stream::Selection);
    let picked = rand::seq::index::sample(&mut rng, pool.len(), k);
    Ok(DemonstrationSet {
        items: picked
            .into_iter()
            .map(|i| Demonstration {
                id: pool[i].to_string(),
                provenance: Provenance {
                    strategy: Strategy::Uniform,
                    source_partition: None,
                    similarity: None,
                },
            })
            .collect(),
    })
}

/// The `k` training examples nearest to the test question, best first.
pub fn select_kate<T, S>(
    train: &Corpus,
    store: &S,
    test_id: &str,
    k: usize,
    metric: Metric,
) -> Result<DemonstrationSet, SelectionError>
where
    T: Scalar,
    S: VectorLookup<T> + ?Sized,
{
    let pool = candidates(train.ids(), test_id);
    if pool.len() < k {
        return Err(SelectionError::TooFewCandidates {
            k,
            available: pool.len(),
        });
    }
    let neighbors = top_m(store, Query::Id(test_id), &pool, k, metric)?;
    Ok(DemonstrationSet {
        items: neighbors
            .into_iter()
            .map(|n| Demonstration {
                id: n.id,
                provenance: Provenance {
                    strategy: Strategy::Kate,
                    source_partition: None,
                    similarity: Some(n.score.to_f64_lossy()),
                },
            })
            .collect(),
    })
}

/// One demonstration per partition, easiest partition first. Apply
/// [`order_demos`] afterwards for the final prompt order.
pub fn select_cds<T, S>(
    partitions: &PartitionSet,
    retrieval: Retrieval,
    store: Option<&S>,
    test_id: &str,
    seed: u64,
    metric: Metric,
) -> Result<DemonstrationSet, SelectionError>
where
    T: Scalar,
    S: VectorLookup<T> + ?Sized,
{
    let store = match retrieval {
        Retrieval::Similarity => Some(store.ok_or(SelectionError::MissingStore)?),
        Retrieval::Random => None,
    };
    let mut rng = instance_rng(seed, test_id, Stream::Selection);
    let mut items = Vec::with_capacity(partitions.k);
    for (i, part) in partitions.partitions.iter().enumerate() {
        let pool = candidates(part.iter().map(String::as_str), test_id);
        if pool.is_empty() {
            return Err(SelectionError::EmptyPartition(i + 1));
        }
        let (id, similarity) = match store {
            Some(store) => {
                let best = top_m(store, Query::Id(test_id), &pool, 1, metric)?
                    .pop()
                    .expect("one neighbour");
                (best.id, Some(best.score.to_f64_lossy()))
            }
            None => (pool[rng.gen_range(0..pool.len())].to_string(), None),
        };
        items.push(Demonstration {
            id,
            provenance: Provenance {
                strategy: Strategy::Cds,
                source_partition: Some(i + 1),
                similarity,
            },
        });
    }
    Ok(DemonstrationSet { items })
}

/// Final prompt order: a seeded uniform shuffle, or easy-to-hard by
/// difficulty key (ids looked up in `train`).
pub fn order_demos(
    mut demos: DemonstrationSet,
    mode: OrderMode,
    train: &Corpus,
    test_id: &str,
    seed: u64,
) -> Result<DemonstrationSet, SelectionError> {
    match mode {
        OrderMode::Shuffle => {
            let mut rng = instance_rng(seed, test_id, Stream::Ordering);
            demos.items.shuffle(&mut rng);
        }
        OrderMode::E2h => {
            let mut keyed = demos
                .items
                .into_iter()
                .map(|d| {
                    let ex = train
                        .get(&d.id)
                        .ok_or_else(|| SelectionError::UnknownExample(d.id.clone()))?;
                    Ok((difficulty_key(ex)?, d))
                })
                .collect::<Result<Vec<_>, SelectionError>>()?;
            keyed.sort_by(|a, b| a.0.cmp(&b.0));
            demos.items = keyed.into_iter().map(|(_, d)| d).collect();
        }
    }
    Ok(demos)
}

/// Bundles everything a strategy needs and applies selection plus ordering
/// for one test instance at a time.
pub struct Selector<'a, T, S: ?Sized> {
    config: SelectionConfig,
    train: &'a Corpus,
    partitions: Option<&'a PartitionSet>,
    store: Option<&'a S>,
    _scalar: std::marker::PhantomData<T>,
}

impl<'a, T, S> Selector<'a, T, S>
where
    T: Scalar,
    S: VectorLookup<T> + ?Sized,
{
    pub fn new(
        config: SelectionConfig,
        train: &'a Corpus,
        partitions: Option<&'a PartitionSet>,
        store: Option<&'a S>,
    ) -> Result<Self, SelectionError> {
        if config.needs_embeddings() && store.is_none() {
            return Err(SelectionError::MissingStore);
        }
        if config.strategy == Strategy::Cds {
            let p = partitions.ok_or(SelectionError::KMismatch {
                config: config.k,
                partitions: 0,
            })?;
            if p.k != config.k {
                return Err(SelectionError::KMismatch {
                    config: config.k,
                    partitions: p.k,
                });
            }
        }
        Ok(Self {
            config,
            train,
            partitions,
            store,
            _scalar: std::marker::PhantomData,
        })
    }

    pub fn config(&self) -> &SelectionConfig {
        &self.config
    }

    pub fn select(&self, test_id: &str, seed: u64) -> Result<DemonstrationSet, SelectionError> {
        let c = &self.config;
        let chosen = match c.strategy {
            Strategy::Uniform => select_uniform(self.train, test_id, c.k, seed)?,
            Strategy::Kate => select_kate(
                self.train,
                self.store.ok_or(SelectionError::MissingStore)?,
                test_id,
                c.k,
                c.metric,
            )?,
            Strategy::Cds => select_cds(
                self.partitions.expect("checked in new"),
                c.retrieval,
                self.store,
                test_id,
                seed,
                c.metric,
            )?,
        };
        order_demos(chosen, c.ordering, self.train, test_id, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DifficultyMeta, Example, LoadOptions, TaskKind};
    use crate::curriculum::partition;
    use crate::embeddings::EmbeddingStore;

    fn corpus(levels: &[i64]) -> Corpus {
        let examples = levels
            .iter()
            .enumerate()
            .map(|(i, &l)| Example {
                id: format!("t{i}"),
                task_kind: TaskKind::Math,
                question: format!("q{i}"),
                solution: String::new(),
                answer: "1".into(),
                difficulty: Some(DifficultyMeta::level(l)),
                extra: Default::default(),
            })
            .collect();
        Corpus::from_examples("t", TaskKind::Math, examples, LoadOptions::training()).unwrap()
    }

    type Store = EmbeddingStore<f64>;

    #[test]
    fn uniform_takes_whole_corpus_when_k_equals_size() {
        let c = corpus(&[1, 2, 3]);
        let s = select_uniform(&c, "test", 3, 7).unwrap();
        let mut ids = s.ids();
        ids.sort();
        assert_eq!(ids, vec!["t0", "t1", "t2"]);
        assert_eq!(s, select_uniform(&c, "test", 3, 7).unwrap());
    }

    #[test]
    fn uniform_errors_when_too_small() {
        let c = corpus(&[1, 2]);
        assert_eq!(
            select_uniform(&c, "test", 3, 1),
            Err(SelectionError::TooFewCandidates { k: 3, available: 2 })
        );
        // the test id itself is excluded
        assert!(select_uniform(&c, "t0", 2, 1).is_err());
    }

    #[test]
    fn kate_nearest_and_exact_match_first() {
        let c = corpus(&[1, 2, 3]);
        let store = Store::from_rows(
            2,
            vec![
                ("t0", vec![0.0, 0.0]),
                ("t1", vec![1.0, 1.0]),
                ("t2", vec![5.0, 5.0]),
                ("q", vec![1.0, 1.0]),
            ],
        )
        .unwrap();
        let s = select_kate(&c, &store, "q", 1, Metric::NegEuclidean).unwrap();
        assert_eq!(s.ids(), vec!["t1"]);
        assert_eq!(s.items[0].provenance.similarity, Some(0.0));
        let err = select_kate(&c, &store, "missing", 1, Metric::NegEuclidean).unwrap_err();
        assert!(matches!(err, SelectionError::Embedding(EmbeddingError::UnknownId(_))));
    }

    #[test]
    fn cds_singletons_regardless_of_retrieval() {
        let c = corpus(&[1, 2, 3]);
        let p = partition(&c, 3).unwrap();
        let store = Store::from_rows(
            1,
            vec![("t0", vec![0.0]), ("t1", vec![1.0]), ("t2", vec![2.0]), ("q", vec![9.0])],
        )
        .unwrap();
        for r in [Retrieval::Random, Retrieval::Similarity] {
            let s = select_cds(&p, r, Some(&store), "q", 3, Metric::NegEuclidean).unwrap();
            assert_eq!(s.ids(), vec!["t0", "t1", "t2"]);
            let parts: Vec<_> = s.items.iter().map(|d| d.provenance.source_partition).collect();
            assert_eq!(parts, vec![Some(1), Some(2), Some(3)]);
        }
    }

    #[test]
    fn cds_similarity_without_store_errors() {
        let c = corpus(&[1, 2]);
        let p = partition(&c, 2).unwrap();
        let err = select_cds::<f64, Store>(&p, Retrieval::Similarity, None, "q", 0, Metric::NegEuclidean);
        assert_eq!(err, Err(SelectionError::MissingStore));
        assert!(select_cds::<f64, Store>(&p, Retrieval::Random, None, "q", 0, Metric::NegEuclidean).is_ok());
    }

    #[test]
    fn cds_excludes_test_id_and_reports_empty_partition() {
        let c = corpus(&[1, 2]);
        let p = partition(&c, 2).unwrap();
        let err = select_cds::<f64, Store>(&p, Retrieval::Random, None, "t0", 0, Metric::NegEuclidean);
        assert_eq!(err, Err(SelectionError::EmptyPartition(1)));
    }

    #[test]
    fn e2h_sorts_by_level() {
        let c = corpus(&[3, 1, 2]);
        let demos = DemonstrationSet {
            items: ["t0", "t1", "t2"]
                .iter()
                .map(|id| Demonstration {
                    id: id.to_string(),
                    provenance: Provenance {
                        strategy: Strategy::Cds,
                        source_partition: None,
                        similarity: None,
                    },
                })
                .collect(),
        };
        let ordered = order_demos(demos.clone(), OrderMode::E2h, &c, "x", 0).unwrap();
        assert_eq!(ordered.ids(), vec!["t1", "t2", "t0"]);
        for seed in 0..20 {
            let shuffled = order_demos(demos.clone(), OrderMode::Shuffle, &c, "x", seed).unwrap();
            let mut ids = shuffled.ids();
            ids.sort();
            assert_eq!(ids, vec!["t0", "t1", "t2"]);
        }
    }

    #[test]
    fn selector_rejects_bad_configs() {
        let c = corpus(&[1, 2, 3]);
        let p = partition(&c, 3).unwrap();
        let mut cfg = SelectionConfig::new(Strategy::Kate);
        assert!(matches!(
            Selector::<f64, Store>::new(cfg.clone(), &c, None, None),
            Err(SelectionError::MissingStore)
        ));
        cfg.strategy = Strategy::Cds;
        cfg.retrieval = Retrieval::Random;
        cfg.k = 5;
        assert!(matches!(
            Selector::<f64, Store>::new(cfg, &c, Some(&p), None),
            Err(SelectionError::KMismatch { config: 5, partitions: 3 })
        ));
    }

    #[test]
    fn streams_are_independent_and_stable() {
        let a: u64 = instance_rng(1, "x", Stream::Selection).gen();
        let b: u64 = instance_rng(1, "x", Stream::Selection).gen();
        let c: u64 = instance_rng(1, "x", Stream::Ordering).gen();
        let d: u64 = instance_rng(2, "x", Stream::Selection).gen();
        let e: u64 = instance_rng(1, "y", Stream::Selection).gen();
        assert_eq!(a, b);
        assert!(a != c && a != d && a != e);
    }
}
