//! Difficulty ordering and curriculum partitioning.
//!
//! Examples are sorted by [`DifficultyKey`] and cut into `k` contiguous,
//! non-empty bins. Cuts only fall between groups of tied difficulty: whole
//! primary levels when there are at least `k` of them, otherwise distinct
//! `(level, tie-break)` keys. Among all admissible cuts the partitioner picks
//! the one with the smallest largest bin, and among those the
//! lexicographically smallest cut positions.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Example};

/// Total order over examples; larger means harder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyKey {
    pub primary_level: i64,
    /// `1 - secondary` when a completion rate is known, else 0.
    pub hardness_tiebreak: f64,
    pub id: String,
}

impl DifficultyKey {
    fn same_level(&self, other: &Self) -> bool {
        self.primary_level == other.primary_level
    }

    fn same_score(&self, other: &Self) -> bool {
        self.primary_level == other.primary_level
            && self.hardness_tiebreak.total_cmp(&other.hardness_tiebreak) == Ordering::Equal
    }
}

impl Eq for DifficultyKey {}

impl Ord for DifficultyKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.primary_level
            .cmp(&other.primary_level)
            .then_with(|| self.hardness_tiebreak.total_cmp(&other.hardness_tiebreak))
            .then_with(|| self.id.cmp(&other.id))
    }
}

impl PartialOrd for DifficultyKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for DifficultyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {:.4}, {})",
            self.primary_level, self.hardness_tiebreak, self.id
        )
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CurriculumError {
    #[error("example `{0}` has no primary difficulty level")]
    MissingLevel(String),
    #[error("k must be positive")]
    ZeroK,
    #[error("cannot split into {requested} partitions without splitting tied difficulties; maximum feasible k is {max_feasible}")]
    InfeasibleK { requested: usize, max_feasible: usize },
}

pub fn difficulty_key(example: &Example) -> Result<DifficultyKey, CurriculumError> {
    let meta = example
        .difficulty
        .ok_or_else(|| CurriculumError::MissingLevel(example.id.clone()))?;
    Ok(DifficultyKey {
        primary_level: meta.primary_level,
        hardness_tiebreak: meta.secondary.map_or(0.0, |s| 1.0 - s),
        id: example.id.clone(),
    })
}

/// Which tie groups were treated as indivisible when cutting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutGranularity {
    PrimaryLevel,
    FullKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSet {
    pub k: usize,
    /// Ids per partition, easiest partition first, ids in key order.
    pub partitions: Vec<Vec<String>>,
    /// First (easiest) key of partitions 2..=k.
    pub boundaries: Vec<DifficultyKey>,
    pub granularity: CutGranularity,
}

impl PartitionSet {
    /// Zero-based partition index of `id`.
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.partitions
            .iter()
            .position(|p| p.iter().any(|x| x == id))
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.partitions.iter().map(Vec::len).collect()
    }

    pub fn index_map(&self) -> HashMap<&str, usize> {
        self.partitions
            .iter()
            .enumerate()
            .flat_map(|(i, p)| p.iter().map(move |id| (id.as_str(), i)))
            .collect()
    }
}

/// Sorted keys for every example of the corpus.
pub fn sorted_keys(corpus: &Corpus) -> Result<Vec<DifficultyKey>, CurriculumError> {
    let mut keys = corpus
        .examples()
        .iter()
        .map(difficulty_key)
        .collect::<Result<Vec<_>, _>>()?;
    keys.sort();
    Ok(keys)
}

/// Sizes of consecutive runs of equal elements under `same`.
fn group_sizes(keys: &[DifficultyKey], same: impl Fn(&DifficultyKey, &DifficultyKey) -> bool) -> Vec<usize> {
    let mut sizes: Vec<usize> = Vec::new();
    for (i, key) in keys.iter().enumerate() {
        if i > 0 && same(&keys[i - 1], key) {
            *sizes.last_mut().expect("non-empty") += 1;
        } else {
            sizes.push(1);
        }
    }
    sizes
}

/// Indivisible group sizes for a sorted key list and requested `k`.
pub fn cut_units(keys: &[DifficultyKey], k: usize) -> Result<(Vec<usize>, CutGranularity), CurriculumError> {
    if k == 0 {
        return Err(CurriculumError::ZeroK);
    }
    let levels = group_sizes(keys, DifficultyKey::same_level);
    if levels.len() >= k {
        return Ok((levels, CutGranularity::PrimaryLevel));
    }
    let scores = group_sizes(keys, DifficultyKey::same_score);
    if scores.len() >= k {
        return Ok((scores, CutGranularity::FullKey));
    }
    Err(CurriculumError::InfeasibleK {
        requested: k,
        max_feasible: scores.len(),
    })
}

/// For each start unit, the minimum number of bins (capacity `cap`) needed
/// to cover units `start..`; `usize::MAX` if some unit exceeds `cap`.
fn min_bins_from(units: &[usize], cap: usize) -> Vec<usize> {
    let g = units.len();
    let mut bins = vec![0usize; g + 1];
    let mut end = g;
    let mut sum: usize = 0;
    // Greedy packing from each start is optimal; compute right to left with
    // a sliding window over [start, end).
    for start in (0..g).rev() {
        if units[start] > cap {
            bins[start] = usize::MAX;
            end = start;
            sum = 0;
            continue;
        }
        sum += units[start];
        while sum > cap {
            end -= 1;
            sum -= units[end];
        }
        bins[start] = if bins[end] == usize::MAX {
            usize::MAX
        } else {
            1 + bins[end]
        };
    }
    bins
}

/// Splits `units` into exactly `k` contiguous non-empty runs minimizing the
/// largest run total, then lexicographically minimizing the cut positions.
/// Returns the run lengths in units. Requires `1 <= k <= units.len()`.
pub fn balanced_unit_split(units: &[usize], k: usize) -> Vec<usize> {
    let g = units.len();
    assert!(k >= 1 && k <= g, "k must be within 1..=units");
    let total: usize = units.iter().sum();
    let feasible = |cap: usize| min_bins_from(units, cap)[0] <= k;
    let mut lo = units.iter().copied().max().unwrap_or(0);
    let mut hi = total;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let cap = lo;
    let min_bins = min_bins_from(units, cap);

    let mut runs = Vec::with_capacity(k);
    let mut start = 0;
    for bin in 0..k - 1 {
        let remaining_bins = k - bin - 1;
        let mut sum = 0;
        let mut end = start;
        loop {
            sum += units[end];
            end += 1;
            debug_assert!(sum <= cap, "a feasible cut always exists");
            let left = g - end;
            if left >= remaining_bins && min_bins[end] <= remaining_bins {
                break;
            }
        }
        runs.push(end - start);
        start = end;
    }
    runs.push(g - start);
    runs
}

/// Splits the corpus into `k` ordered difficulty partitions.
pub fn partition(corpus: &Corpus, k: usize) -> Result<PartitionSet, CurriculumError> {
    let keys = sorted_keys(corpus)?;
    partition_keys(&keys, k)
}

/// Same as [`partition`] for an already sorted key list.
pub fn partition_keys(keys: &[DifficultyKey], k: usize) -> Result<PartitionSet, CurriculumError> {
    debug_assert!(keys.windows(2).all(|w| w[0] <= w[1]));
    let (units, granularity) = cut_units(keys, k)?;
    let runs = balanced_unit_split(&units, k);

    let mut partitions = Vec::with_capacity(k);
    let mut boundaries = Vec::with_capacity(k.saturating_sub(1));
    let mut unit = 0;
    let mut item = 0;
    for run in runs {
        let count: usize = units[unit..unit + run].iter().sum();
        if item > 0 {
            boundaries.push(keys[item].clone());
        }
        partitions.push(keys[item..item + count].iter().map(|k| k.id.clone()).collect());
        unit += run;
        item += count;
    }
    Ok(PartitionSet {
        k,
        partitions,
        boundaries,
        granularity,
    })
}
