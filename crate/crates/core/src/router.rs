//! Module selection over per-module embedding vectors.
//!
//! A module's embedding is the normalized mean of its shard's keys. Cosine
//! routing can perturb the query with Gaussian noise of per-coordinate
//! stddev `noise_stddev / sqrt(d_emb)`, so the expected noise norm equals
//! `noise_stddev` against a unit query.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{Matrix, Rng};
use crate::scalar::Scalar;

const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex<T> {
    d_emb: usize,
    entries: BTreeMap<String, Vec<T>>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    d_emb: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

fn unit<T: Scalar>(v: &[T]) -> Option<Vec<T>> {
    let norm = v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    if !norm.is_finite() || norm <= f64::EPSILON {
        return None;
    }
    Some(v.iter().map(|&x| T::of(x.as_f64() / norm)).collect())
}

impl<T: Scalar> EmbeddingIndex<T> {
    pub fn new(d_emb: usize) -> Self {
        Self {
            d_emb,
            entries: BTreeMap::new(),
        }
    }

    /// Adds a vector under a fresh id, normalizing it.
    pub fn insert(&mut self, id: impl Into<String>, vector: &[T]) -> Result<()> {
        let id = id.into();
        if vector.len() != self.d_emb {
            return Err(Error::ShapeMismatch {
                op: "index insert",
                left: (1, self.d_emb),
                right: (1, vector.len()),
            });
        }
        if self.entries.contains_key(&id) {
            return Err(Error::invalid(format!("duplicate module id {id:?}")));
        }
        let v = unit(vector).ok_or_else(|| Error::invalid(format!("module {id:?} has a zero or non-finite embedding")))?;
        self.entries.insert(id, v);
        Ok(())
    }

    pub fn d_emb(&self) -> usize {
        self.d_emb
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, id: &str) -> Option<&[T]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = IndexFile {
            d_emb: self.d_emb,
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|x| x.as_f64()).collect()))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: IndexFile = serde_json::from_str(text)?;
        let mut index = Self::new(file.d_emb);
        for (id, v) in file.entries {
            let v: Vec<T> = v.into_iter().map(T::of).collect();
            let norm = v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("index entry {id:?} is not unit norm ({norm})")));
            }
            index.insert(id, &v)?;
        }
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_json(&text)
    }
}

/// Index of shard centroids: each entry is the normalized mean of the keys.
pub fn build_index<T: Scalar>(shards: &[(String, &Matrix<T>)]) -> Result<EmbeddingIndex<T>> {
    let d_emb = shards
        .first()
        .map(|(_, m)| m.cols())
        .ok_or_else(|| Error::invalid("no shards to index"))?;
    let mut index = EmbeddingIndex::new(d_emb);
    for (id, keys) in shards {
        if keys.rows() == 0 {
            return Err(Error::invalid(format!("shard {id:?} is empty")));
        }
        let mut mean = vec![0.0f64; keys.cols()];
        for i in 0..keys.rows() {
            for (m, x) in mean.iter_mut().zip(keys.row(i)) {
                *m += x.as_f64();
            }
        }
        let n = keys.rows() as f64;
        let mean: Vec<T> = mean.into_iter().map(|m| T::of(m / n)).collect();
        index.insert(id.clone(), &mean)?;
    }
    Ok(index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RouteKind {
    #[default]
    Oracle,
    Cosine,
}

impl std::str::FromStr for RouteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::invalid(format!("unknown routing kind {other:?} (oracle|cosine)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutingPolicy {
    pub kind: RouteKind,
    pub k: usize,
    pub noise_stddev: f64,
    pub seed: u64,
}

impl Default for RoutingPolicy {
    fn default() -> Self {
        Self {
            kind: RouteKind::Oracle,
            k: 1,
            noise_stddev: 0.0,
            seed: 0,
        }
    }
}

impl RoutingPolicy {
    pub fn cosine(k: usize, noise_stddev: f64, seed: u64) -> Self {
        Self {
            kind: RouteKind::Cosine,
            k,
            noise_stddev,
            seed,
        }
    }

    pub fn validate(&self, index_len: usize) -> Result<()> {
        if self.k == 0 || self.k > index_len {
            return Err(Error::invalid(format!("k = {} outside 1..={index_len}", self.k)));
        }
        if !(self.noise_stddev >= 0.0) || !self.noise_stddev.is_finite() {
            return Err(Error::invalid("noise_stddev must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Ranked `(id, score)` list for one query.
///
/// `ordinal` selects the noise stream, so the same query at the same
/// ordinal always routes the same way. Oracle routing needs `truth`.
pub fn route<T: Scalar>(
    index: &EmbeddingIndex<T>,
    query: &[T],
    policy: &RoutingPolicy,
    ordinal: u64,
    truth: Option<&str>,
) -> Result<Vec<(String, f64)>> {
    policy.validate(index.len())?;
    if query.len() != index.d_emb {
        return Err(Error::ShapeMismatch {
            op: "route",
            left: (1, index.d_emb),
            right: (1, query.len()),
        });
    }
    match policy.kind {
        RouteKind::Oracle => {
            let truth = truth.ok_or_else(|| Error::invalid("oracle routing needs the ground-truth module"))?;
            if index.get(truth).is_none() {
                return Err(Error::UnknownId(truth.to_string()));
            }
            Ok(vec![(truth.to_string(), 1.0)])
        }
        RouteKind::Cosine => {
            let mut q: Vec<f64> = query.iter().map(|x| x.as_f64()).collect();
            if policy.noise_stddev > 0.0 {
                let mut rng = Rng::stream(policy.seed, ordinal);
                let sd = policy.noise_stddev / (index.d_emb as f64).sqrt();
                q.iter_mut().for_each(|x| *x += sd * rng.gaussian());
            }
            let q = unit(&q).ok_or_else(|| Error::invalid("query vector has zero norm"))?;
            let mut scored: Vec<(String, f64)> = index
                .entries
                .iter()
                .map(|(id, v)| (id.clone(), v.iter().zip(&q).map(|(a, b)| a.as_f64() * b).sum()))
                .collect();
            // BTreeMap order is lexicographic and the sort is stable
            scored.sort_by(|a, b| b.1.total_cmp(&a.1));
            scored.truncate(policy.k);
            Ok(scored)
        }
    }
}

/// Fraction of queries whose top-1 route equals the truth. Row `i` of
/// `queries` is routed with ordinal `i`.
pub fn routing_accuracy<T: Scalar>(
    index: &EmbeddingIndex<T>,
    queries: &Matrix<T>,
    truths: &[&str],
    policy: &RoutingPolicy,
) -> Result<f64> {
    if queries.rows() == 0 || queries.rows() != truths.len() {
        return Err(Error::invalid("need one truth label per query and at least one query"));
    }
    let mut hits = 0;
    for (i, truth) in truths.iter().enumerate() {
        let ranked = route(index, queries.row(i), policy, i as u64, Some(truth))?;
        if ranked[0].0 == *truth {
            hits += 1;
        }
    }
    Ok(hits as f64 / truths.len() as f64)
}

/// Checks that every stored vector is unit norm.
pub fn check_unit_norm<T: Scalar>(index: &EmbeddingIndex<T>) -> bool {
    index
        .entries
        .values()
        .all(|v| (v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt() - 1.0).abs() <= UNIT_TOLERANCE)
}
