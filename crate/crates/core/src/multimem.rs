//! Multi-module memory: partition a dataset, train one adapter per shard,
//! then route each query to modules and score the merged delta.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::error::{Error, Result};
use crate::matcore::Matrix;
use crate::memlab::{evaluate, exact_match, frozen_base, train, KvDataset, TrainConfig};
use crate::merge::{merge, MergeMethod, MergeSpec};
use crate::router::{build_index, route, EmbeddingIndex, RouteKind, RoutingPolicy};
use crate::scalar::Scalar;
use crate::VERSION;

/// Target id of the single weight a memory adapter modifies.
pub const MEMORY_TARGET: &str = "memory";

pub fn shard_id(i: usize) -> String {
    format!("shard-{i:02}")
}

/// Contiguous blocks of records, in dataset order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub shards: Vec<Range<usize>>,
}

impl ShardPlan {
    pub fn len(&self) -> usize {
        self.shards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shards.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        (0..self.len()).map(shard_id).collect()
    }

    pub fn shard_of(&self, record: usize) -> Option<usize> {
        self.shards.iter().position(|r| r.contains(&record))
    }

    pub fn records(&self) -> usize {
        self.shards.last().map_or(0, |r| r.end)
    }
}

/// Splits `n_records` into `s` blocks whose sizes differ by at most one,
/// larger blocks first.
pub fn partition(n_records: usize, s: usize) -> Result<ShardPlan> {
    if s == 0 || s > n_records {
        return Err(Error::invalid(format!("shard count {s} outside 1..={n_records}")));
    }
    let (base, extra) = (n_records / s, n_records % s);
    let mut start = 0;
    let shards = (0..s)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect();
    Ok(ShardPlan { shards })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    pub train: TrainConfig,
    pub routing: RoutingPolicy,
    pub merge: MergeSpec,
    pub top_n: usize,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            routing: RoutingPolicy::default(),
            merge: MergeSpec::new(MergeMethod::Ties),
            top_n: 1,
        }
    }
}

/// One adapter per shard, all sharing the frozen base of `config.seed`.
pub fn train_shards<T: Scalar>(dataset: &KvDataset<T>, plan: &ShardPlan, config: &TrainConfig) -> Result<Vec<Adapter<T>>> {
    if plan.records() != dataset.len() {
        return Err(Error::invalid(format!(
            "plan covers {} records, dataset has {}",
            plan.records(),
            dataset.len()
        )));
    }
    let mut out = Vec::with_capacity(plan.len());
    for (i, range) in plan.shards.iter().enumerate() {
        let id = shard_id(i);
        let shard = dataset.subset(range.clone());
        let pair = train(&shard, config)
            .map_err(|e| e.context(format!("training {id}")))?
            .model
            .pair;
        log::info!("trained {id} on {} records", shard.len());
        let centroid = build_index(&[(id.clone(), &shard.keys)])?;
        let embedding: Vec<f64> = centroid.get(&id).expect("just inserted").iter().map(|x| x.as_f64()).collect();
        let adapter = Adapter::new(id.clone())
            .with_target(MEMORY_TARGET, pair)?
            .with_meta("seed", config.seed.to_string())
            .with_meta("d_in", dataset.d_in().to_string())
            .with_meta("rank", config.rank.to_string())
            .with_meta("records", shard.len().to_string())
            .with_meta("embedding", serde_json::to_string(&embedding)?);
        out.push(adapter);
    }
    Ok(out)
}

/// Reads the routing embedding stored in an adapter's metadata.
pub fn adapter_embedding<T: Scalar>(adapter: &Adapter<T>) -> Result<Vec<T>> {
    let raw = adapter
        .metadata
        .get("embedding")
        .ok_or_else(|| Error::invalid(format!("adapter {:?} carries no embedding", adapter.name)))?;
    let v: Vec<f64> = serde_json::from_str(raw)?;
    Ok(v.into_iter().map(T::of).collect())
}

/// Shard adapters plus everything needed to answer routed queries.
#[derive(Debug, Clone)]
pub struct ShardedMemory<T> {
    pub plan: ShardPlan,
    pub adapters: Vec<Adapter<T>>,
    pub w0: Matrix<T>,
    pub index: EmbeddingIndex<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub version: String,
    pub config: SystemConfig,
    pub shards: usize,
    pub queries: usize,
    pub em: f64,
    pub routing_accuracy: f64,
    pub per_shard_em: BTreeMap<String, f64>,
}

impl<T: Scalar> ShardedMemory<T> {
    pub fn build(dataset: &KvDataset<T>, shards: usize, config: &TrainConfig) -> Result<Self> {
        let plan = partition(dataset.len(), shards)?;
        let adapters = train_shards(dataset, &plan, config)?;
        let keys: Vec<(String, Matrix<T>)> = plan
            .shards
            .iter()
            .enumerate()
            .map(|(i, r)| (shard_id(i), dataset.subset(r.clone()).keys))
            .collect();
        let refs: Vec<(String, &Matrix<T>)> = keys.iter().map(|(id, m)| (id.clone(), m)).collect();
        Ok(Self {
            index: build_index(&refs)?,
            w0: frozen_base(dataset.d_in(), config.seed),
            plan,
            adapters,
        })
    }

    /// Modules selected for one query, best first.
    fn select(&self, query: &[T], truth: usize, ordinal: usize, config: &SystemConfig) -> Result<Vec<usize>> {
        let s = self.plan.len();
        match config.routing.kind {
            // oracle companions are the cyclic successors of the true shard
            RouteKind::Oracle => Ok((0..config.top_n).map(|j| (truth + j) % s).collect()),
            RouteKind::Cosine => {
                let policy = RoutingPolicy { k: config.top_n, ..config.routing.clone() };
                route(&self.index, query, &policy, ordinal as u64, None)?
                    .into_iter()
                    .map(|(id, _)| {
                        self.adapters
                            .iter()
                            .position(|a| a.name == id)
                            .ok_or(Error::UnknownId(id))
                    })
                    .collect()
            }
        }
    }

    /// Dense delta for a module set: a lone module is used as is.
    pub fn delta_for(&self, modules: &[usize], spec: &MergeSpec) -> Result<Matrix<T>> {
        let chosen: Vec<&Adapter<T>> = modules.iter().map(|&m| &self.adapters[m]).collect();
        let missing = || Error::TargetMismatch(format!("no {MEMORY_TARGET:?} target"));
        if let [one] = chosen.as_slice() {
            return Ok(one.target(MEMORY_TARGET).ok_or_else(missing)?.delta());
        }
        merge(&chosen, spec)?.densify(MEMORY_TARGET).ok_or_else(missing)
    }

    /// Routes every record of `dataset` as a query and scores the answers.
    pub fn eval_system(&self, dataset: &KvDataset<T>, config: &SystemConfig) -> Result<SystemReport> {
        let s = self.plan.len();
        if config.top_n == 0 || config.top_n > s {
            return Err(Error::invalid(format!("top_n {} outside 1..={s}", config.top_n)));
        }
        if self.plan.records() != dataset.len() {
            return Err(Error::invalid("dataset does not match the shard plan"));
        }
        // queries grouped by their (sorted) module set so each merge runs once
        let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
        let mut truth_of = Vec::with_capacity(dataset.len());
        let mut routed_right = 0usize;
        for q in 0..dataset.len() {
            let truth = self.plan.shard_of(q).expect("plan covers dataset");
            let chosen = self
                .select(dataset.keys.row(q), truth, q, config)
                .map_err(|e| e.context(format!("routing query {q}")))?;
            if chosen[0] == truth {
                routed_right += 1;
            }
            let mut set = chosen;
            set.sort_unstable();
            groups.entry(set).or_default().push(q);
            truth_of.push(truth);
        }
        let mut hit = vec![false; dataset.len()];
        for (set, queries) in &groups {
            let delta = self
                .delta_for(set, &config.merge)
                .map_err(|e| e.context(format!("merging for query {}", queries[0])))?;
            let logits = dataset.keys.select_rows(queries.iter().copied()).matmul_nt(&self.w0.add(&delta)?)?;
            for (row, &q) in queries.iter().enumerate() {
                let one = Matrix::new(1, logits.cols(), logits.row(row).to_vec())?;
                hit[q] = exact_match(&one, &dataset.labels[q..q + 1]) == 1.0;
            }
        }
        let mut per_shard_em = BTreeMap::new();
        for (i, r) in self.plan.shards.iter().enumerate() {
            let hits = r.clone().filter(|&q| hit[q]).count();
            per_shard_em.insert(shard_id(i), hits as f64 / r.len() as f64);
        }
        let n = dataset.len() as f64;
        Ok(SystemReport {
            version: VERSION.to_string(),
            config: config.clone(),
            shards: s,
            queries: dataset.len(),
            em: hit.iter().filter(|h| **h).count() as f64 / n,
            routing_accuracy: routed_right as f64 / n,
            per_shard_em,
        })
    }

    /// EM per N when each query merges its own shard with the next N-1
    /// shards (cyclically) by TIES.
    pub fn interference_sweep(&self, dataset: &KvDataset<T>, n_range: &[usize], base: &SystemConfig) -> Result<BTreeMap<usize, f64>> {
        let mut out = BTreeMap::new();
        for &n in n_range {
            if n == 0 || n > self.plan.len() {
                return Err(Error::invalid(format!("N = {n} outside 1..={}", self.plan.len())));
            }
            let config = SystemConfig {
                routing: RoutingPolicy { kind: RouteKind::Oracle, ..base.routing.clone() },
                merge: MergeSpec { method: MergeMethod::Ties, weights: Vec::new(), ..base.merge.clone() },
                top_n: n,
                ..base.clone()
            };
            out.insert(n, self.eval_system(dataset, &config)?.em);
        }
        Ok(out)
    }
}

/// A single adapter with the same trainable-parameter budget as `shards`
/// modules of `config.rank`, trained on the whole dataset.
pub fn monolithic_baseline<T: Scalar>(dataset: &KvDataset<T>, config: &TrainConfig, shards: usize) -> Result<(f64, usize)> {
    let config = config.at_rank(config.rank * shards);
    let out = train(dataset, &config)?;
    Ok((evaluate(&out.model, dataset)?, out.model.pair.param_count()))
}
