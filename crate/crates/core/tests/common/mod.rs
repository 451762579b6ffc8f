#![allow(dead_code)]

use std::path::{Path, PathBuf};

use cds::corpus::{Corpus, DifficultyMeta, Example, LoadOptions, TaskKind};
use cds::curriculum::DifficultyKey;
use cds::embeddings::EmbeddingStore;
use cds::inference::DecodingParams;
use cds::runner::{ExperimentConfig, MockMode, ModelConfig};
use cds::selection::{OrderMode, Retrieval, SelectionConfig, Strategy};
use rand::Rng;

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

pub fn example(id: &str, level: i64, secondary: Option<f64>) -> Example {
    Example {
        id: id.to_string(),
        task_kind: TaskKind::Math,
        question: format!("question {id}"),
        solution: format!("solution {id}"),
        answer: format!("answer-{id}"),
        difficulty: Some(DifficultyMeta {
            primary_level: level,
            secondary,
        }),
        extra: Default::default(),
    }
}

pub fn corpus(examples: Vec<Example>) -> Corpus {
    let opts = LoadOptions {
        level_range: Some((0, 100)),
        ..LoadOptions::training()
    };
    Corpus::from_examples("synthetic", TaskKind::Math, examples, opts).expect("valid corpus")
}

/// `n` items with levels drawn from `1..=levels`; optional random secondary.
pub fn random_corpus<R: Rng>(rng: &mut R, n: usize, levels: i64, secondary: bool) -> Corpus {
    let examples = (0..n)
        .map(|i| {
            let level = rng.gen_range(1..=levels);
            let sec = secondary.then(|| rng.gen_range(0..=1000) as f64 / 1000.0);
            example(&format!("ex{i:04}"), level, sec)
        })
        .collect();
    corpus(examples)
}

pub fn random_store<R: Rng>(rng: &mut R, ids: &[String], dim: usize) -> EmbeddingStore<f64> {
    let rows: Vec<(String, Vec<f64>)> = ids
        .iter()
        .map(|id| (id.clone(), (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect();
    EmbeddingStore::from_rows(dim, rows).expect("valid store")
}

/// Sizes of the best contiguous `k`-way split of `keys` (already sorted),
/// found by enumerating every admissible cut combination. A cut is
/// admissible if it does not separate two items with the same primary level;
/// when no such split exists, cuts may separate levels but not identical
/// (level, tiebreak) pairs. Best means smallest largest bin, then the
/// lexicographically smallest cut positions.
pub fn brute_force_sizes(keys: &[DifficultyKey], k: usize) -> Option<Vec<usize>> {
    let n = keys.len();
    let level_cuts: Vec<usize> = (1..n)
        .filter(|&p| keys[p - 1].primary_level != keys[p].primary_level)
        .collect();
    let full_cuts: Vec<usize> = (1..n)
        .filter(|&p| {
            keys[p - 1].primary_level != keys[p].primary_level
                || keys[p - 1].hardness_tiebreak != keys[p].hardness_tiebreak
        })
        .collect();
    let cuts = if level_cuts.len() + 1 >= k { level_cuts } else { full_cuts };
    if cuts.len() + 1 < k {
        return None;
    }
    let mut best: Option<(usize, Vec<usize>)> = None;
    let mut chosen = Vec::with_capacity(k - 1);
    enumerate(&cuts, 0, k - 1, &mut chosen, &mut |combo| {
        let mut bounds = vec![0];
        bounds.extend_from_slice(combo);
        bounds.push(n);
        let largest = bounds.windows(2).map(|w| w[1] - w[0]).max().unwrap();
        let better = match &best {
            None => true,
            Some((b, c)) => largest < *b || (largest == *b && combo < c.as_slice()),
        };
        if better {
            best = Some((largest, combo.to_vec()));
        }
    });
    let (_, combo) = best?;
    let mut bounds = vec![0];
    bounds.extend(combo);
    bounds.push(n);
    Some(bounds.windows(2).map(|w| w[1] - w[0]).collect())
}

fn enumerate(cuts: &[usize], from: usize, left: usize, chosen: &mut Vec<usize>, visit: &mut impl FnMut(&[usize])) {
    if left == 0 {
        visit(chosen);
        return;
    }
    for i in from..cuts.len() {
        if cuts.len() - i < left {
            break;
        }
        chosen.push(cuts[i]);
        enumerate(cuts, i + 1, left - 1, chosen, visit);
        chosen.pop();
    }
}

/// Config over the on-disk synthetic corpus with an echo-gold mock.
pub fn synth_config(output_dir: &Path, strategy: Strategy, retrieval: Retrieval, ordering: OrderMode) -> ExperimentConfig {
    ExperimentConfig {
        name: "synthetic".into(),
        task_kind: TaskKind::Math,
        train: fixture("synth/train.jsonl"),
        test: fixture("synth/test.jsonl"),
        embeddings: Some(fixture("synth/embeddings.tsv")),
        code_tasks: None,
        selection: SelectionConfig {
            strategy,
            retrieval,
            ordering,
            ..SelectionConfig::new(strategy)
        },
        template: None,
        decoding: Some(DecodingParams::for_task(TaskKind::Math)),
        model: ModelConfig::Mock {
            mode: MockMode::EchoGold,
        },
        seeds: vec![1, 2, 3],
        output_dir: output_dir.to_path_buf(),
        concurrency: 4,
        cache: true,
        max_prompt_chars: None,
        sandbox: None,
    }
}
