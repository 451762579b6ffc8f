//! Precomputed sentence vectors and exhaustive nearest-neighbour search.
//!
//! File layout (UTF-8 text, `\n` line endings, fields separated by a single
//! tab, see `docs/embedding-format.md`):
//!
//! ```text
//! cds-embeddings<TAB>1<TAB><dim><TAB><count>
//! <id><TAB><v_1><TAB>...<TAB><v_dim>
//! ```

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub const FORMAT_MAGIC: &str = "cds-embeddings";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("failed to read {path}: {message}")]
    Io { path: String, message: String },
    #[error("embedding file is empty")]
    Empty,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: vector for `{id}` has {found} components, expected {expected}")]
    DimMismatch {
        line: usize,
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: vector for `{id}` has a non-finite component at position {position}")]
    NonFinite {
        line: usize,
        id: String,
        position: usize,
    },
    #[error("duplicate embedding id `{id}` on lines {first} and {second}")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },
    #[error("header declares {declared} vectors but file holds {found}")]
    CountMismatch { declared: usize, found: usize },
    #[error("vectors have different dimensions ({0} vs {1})")]
    VectorDims(usize, usize),
    #[error("no embedding for id `{0}`")]
    UnknownId(String),
    #[error("requested {m} neighbours from {available} candidates")]
    TooFewCandidates { m: usize, available: usize },
}

/// Read access to vectors by id. Selection code goes through this trait so
/// tests can observe whether a strategy touches the store at all.
pub trait VectorLookup<T> {
    fn dim(&self) -> usize;
    fn vector(&self, id: &str) -> Option<&[T]>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore<T> {
    dim: usize,
    ids: Vec<String>,
    data: Vec<T>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> EmbeddingStore<T> {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn from_rows<I, S>(dim: usize, rows: I) -> Result<Self, EmbeddingError>
    where
        I: IntoIterator<Item = (S, Vec<T>)>,
        S: Into<String>,
    {
        let mut store = Self::new(dim);
        for (line, (id, v)) in rows.into_iter().enumerate() {
            store.insert(line + 1, id.into(), &v)?;
        }
        Ok(store)
    }

    fn insert(&mut self, line: usize, id: String, v: &[T]) -> Result<(), EmbeddingError> {
        if v.len() != self.dim {
            return Err(EmbeddingError::DimMismatch {
                line,
                id,
                expected: self.dim,
                found: v.len(),
            });
        }
        if let Some(position) = v.iter().position(|x| !x.is_finite()) {
            return Err(EmbeddingError::NonFinite { line, id, position });
        }
        if let Some(&prev) = self.index.get(&id) {
            return Err(EmbeddingError::DuplicateId {
                id,
                first: prev + 1,
                second: line,
            });
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(v);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Parses the text format described in the module docs.
    pub fn parse(text: &str) -> Result<Self, EmbeddingError> {
        let mut lines = text.split('\n').enumerate().filter(|(_, l)| !l.is_empty());
        let (_, header) = lines.next().ok_or(EmbeddingError::Empty)?;
        let fields: Vec<&str> = header.split('\t').collect();
        let malformed = |message: String| EmbeddingError::Malformed { line: 1, message };
        if fields.len() != 4 || fields[0] != FORMAT_MAGIC {
            return Err(malformed(format!(
                "expected header `{FORMAT_MAGIC}<TAB>{FORMAT_VERSION}<TAB>dim<TAB>count`"
            )));
        }
        if fields[1] != FORMAT_VERSION.to_string() {
            return Err(malformed(format!("unsupported version `{}`", fields[1])));
        }
        let dim: usize = fields[2]
            .parse()
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| malformed(format!("invalid dim `{}`", fields[2])))?;
        let count: usize = fields[3]
            .parse()
            .map_err(|_| malformed(format!("invalid count `{}`", fields[3])))?;

        let mut store = Self::new(dim);
        let mut row_lines: Vec<usize> = Vec::new();
        for (i, row) in lines {
            let line = i + 1;
            let mut parts = row.split('\t');
            let id = parts.next().unwrap_or_default();
            if id.is_empty() {
                return Err(EmbeddingError::Malformed {
                    line,
                    message: "empty id".into(),
                });
            }
            let values = parts
                .enumerate()
                .map(|(pos, s)| {
                    s.trim().parse::<T>().map_err(|_| EmbeddingError::Malformed {
                        line,
                        message: format!("component {pos} of `{id}` is not a number: `{s}`"),
                    })
                })
                .collect::<Result<Vec<T>, _>>()?;
            if let Some(&prev) = store.index.get(id) {
                return Err(EmbeddingError::DuplicateId {
                    id: id.to_string(),
                    first: row_lines[prev],
                    second: line,
                });
            }
            store.insert(line, id.to_string(), &values)?;
            row_lines.push(line);
        }
        if store.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if store.len() != count {
            return Err(EmbeddingError::CountMismatch {
                declared: count,
                found: store.len(),
            });
        }
        Ok(store)
    }

    /// Serializes to the text format. Values use Rust's shortest round-trip
    /// float formatting, so `parse(to_text())` reproduces the store exactly.
    pub fn to_text(&self) -> String {
        let mut out = format!("{FORMAT_MAGIC}\t{FORMAT_VERSION}\t{}\t{}\n", self.dim, self.len());
        for (i, id) in self.ids.iter().enumerate() {
            out.push_str(id);
            for x in &self.data[i * self.dim..(i + 1) * self.dim] {
                write!(out, "\t{x:?}").expect("write to String");
            }
            out.push('\n');
        }
        out
    }
}

impl<T: Scalar> VectorLookup<T> for EmbeddingStore<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn vector(&self, id: &str) -> Option<&[T]> {
        self.index
            .get(id)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }
}

pub fn load_embeddings<T: Scalar>(path: impl AsRef<Path>) -> Result<EmbeddingStore<T>, EmbeddingError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| EmbeddingError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    EmbeddingStore::parse(&text)
}

/// Scoring function for retrieval. Negative Euclidean distance is the
/// default everywhere; cosine exists for ablations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    NegEuclidean,
    Cosine,
}

/// Negative Euclidean distance `-||a - b||`.
pub fn similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::VectorDims(a.len(), b.len()));
    }
    let sq: T = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    Ok(-sq.sqrt())
}

/// Cosine similarity; zero vectors score 0.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::VectorDims(a.len(), b.len()));
    }
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: T = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb: T = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        return Ok(T::zero());
    }
    Ok(dot / (na * nb))
}

impl Metric {
    pub fn score<T: Scalar>(self, a: &[T], b: &[T]) -> Result<T, EmbeddingError> {
        match self {
            Metric::NegEuclidean => similarity(a, b),
            Metric::Cosine => cosine(a, b),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Query<'a, T> {
    Id(&'a str),
    Vector(&'a [T]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor<T> {
    pub id: String,
    pub score: T,
}

/// Highest score first; equal scores by ascending id.
pub fn rank_order<T: Scalar>(a: (&str, T), b: (&str, T)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(b.0))
}

/// The `m` best-scoring candidates, best first, ties broken by id.
pub fn top_m<T, S>(
    store: &S,
    query: Query<'_, T>,
    candidates: &[&str],
    m: usize,
    metric: Metric,
) -> Result<Vec<Neighbor<T>>, EmbeddingError>
where
    T: Scalar,
    S: VectorLookup<T> + ?Sized,
{
    if m > candidates.len() {
        return Err(EmbeddingError::TooFewCandidates {
            m,
            available: candidates.len(),
        });
    }
    let q = match query {
        Query::Id(id) => store
            .vector(id)
            .ok_or_else(|| EmbeddingError::UnknownId(id.to_string()))?,
        Query::Vector(v) => v,
    };
    let mut scored = candidates
        .iter()
        .map(|&id| {
            let v = store
                .vector(id)
                .ok_or_else(|| EmbeddingError::UnknownId(id.to_string()))?;
            Ok((id, metric.score(q, v)?))
        })
        .collect::<Result<Vec<(&str, T)>, EmbeddingError>>()?;
    scored.sort_by(|a, b| rank_order(*a, *b));
    scored.truncate(m);
    Ok(scored
        .into_iter()
        .map(|(id, score)| Neighbor {
            id: id.to_string(),
            score,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_two_rows() {
        let text = "cds-embeddings\t1\t4\t2\na\t0\t1\t2\t3\nb\t1.5\t-2\t0.25\t1e-3\n";
        let store: EmbeddingStore<f64> = EmbeddingStore::parse(text).unwrap();
        assert_eq!(store.dim(), 4);
        assert_eq!(store.len(), 2);
        assert_eq!(store.vector("b").unwrap(), &[1.5, -2.0, 0.25, 1e-3]);
    }

    #[test]
    fn dimension_mismatch_names_id() {
        let text = "cds-embeddings\t1\t4\t2\na\t0\t1\t2\t3\nbad\t1\t2\t3\t4\t5\n";
        let err = EmbeddingStore::<f64>::parse(text).unwrap_err();
        assert!(matches!(&err, EmbeddingError::DimMismatch { id, found: 5, .. } if id == "bad"));
        assert!(err.to_string().contains("bad"));
    }

    #[test]
    fn empty_and_non_finite_rejected() {
        assert_eq!(EmbeddingStore::<f64>::parse(""), Err(EmbeddingError::Empty));
        assert_eq!(
            EmbeddingStore::<f64>::parse("cds-embeddings\t1\t2\t0\n"),
            Err(EmbeddingError::Empty)
        );
        let err = EmbeddingStore::<f64>::parse("cds-embeddings\t1\t2\t1\nx\t1\tNaN\n").unwrap_err();
        assert!(matches!(err, EmbeddingError::NonFinite { position: 1, .. }));
        let err = EmbeddingStore::<f32>::parse("cds-embeddings\t1\t2\t1\nx\tinf\t0\n").unwrap_err();
        assert!(matches!(err, EmbeddingError::NonFinite { position: 0, .. }));
    }

    #[test]
    fn duplicate_and_count_checks() {
        let err = EmbeddingStore::<f64>::parse("cds-embeddings\t1\t1\t2\na\t1\na\t2\n").unwrap_err();
        assert!(matches!(err, EmbeddingError::DuplicateId { first: 2, second: 3, .. }));
        let err = EmbeddingStore::<f64>::parse("cds-embeddings\t1\t1\t3\na\t1\nb\t2\n").unwrap_err();
        assert_eq!(err, EmbeddingError::CountMismatch { declared: 3, found: 2 });
    }

    #[test]
    fn similarity_basics() {
        assert_eq!(similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(similarity(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), -5.0);
        assert_eq!(similarity::<f32>(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), -5.0);
        assert!(similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine(&[1.0, 0.0], &[2.0, 0.0]).unwrap() - 1.0f64).abs() < 1e-12);
        assert_eq!(cosine(&[0.0, 0.0], &[2.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn top_m_tie_break_and_errors() {
        let store = EmbeddingStore::from_rows(
            2,
            vec![
                ("q", vec![0.0, 0.0]),
                ("b", vec![1.0, 0.0]),
                ("a", vec![0.0, 1.0]),
                ("c", vec![5.0, 5.0]),
            ],
        )
        .unwrap();
        let got = top_m(&store, Query::Id("q"), &["b", "a", "c"], 1, Metric::NegEuclidean).unwrap();
        assert_eq!(got[0].id, "a");
        let all = top_m(&store, Query::Id("q"), &["c", "b", "a"], 3, Metric::NegEuclidean).unwrap();
        let ids: Vec<&str> = all.iter().map(|n| n.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
        assert!(matches!(
            top_m(&store, Query::Id("q"), &["a"], 2, Metric::NegEuclidean),
            Err(EmbeddingError::TooFewCandidates { .. })
        ));
        assert!(matches!(
            top_m(&store, Query::Id("zz"), &["a"], 1, Metric::NegEuclidean),
            Err(EmbeddingError::UnknownId(_))
        ));
    }

    #[test]
    fn text_round_trip() {
        let store = EmbeddingStore::from_rows(
            3,
            vec![("x", vec![0.1f64, -1e-300, 12345.678]), ("y", vec![1.0 / 3.0, 2.0, 0.0])],
        )
        .unwrap();
        let back = EmbeddingStore::<f64>::parse(&store.to_text()).unwrap();
        assert_eq!(store, back);
    }
}
