use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::thread;

use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::bench::ReadCounter;
use super::timing::{timed, Stage, StageTimes};
use crate::adapter::Adapter;
use crate::error::{Error, Result};
use crate::matcore::Matrix;
use crate::memlab::frozen_base;
use crate::merge::{merge, MergeMethod, MergeSpec};
use crate::multimem::{adapter_embedding, MEMORY_TARGET};
use crate::router::{route, EmbeddingIndex, RoutingPolicy};

#[derive(Debug)]
struct State {
    seed: u64,
    d_in: usize,
    w0: Matrix<f64>,
    adapters: BTreeMap<String, Adapter<f64>>,
    index: EmbeddingIndex<f64>,
}

/// Preloaded adapters shared by all connections.
#[derive(Debug, Default)]
pub struct Registry {
    state: RwLock<Option<State>>,
    queries: AtomicU64,
    reads: ReadCounter,
}

#[derive(Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum Request {
    Register { path: PathBuf },
    Query {
        vector: Vec<f64>,
        #[serde(default = "one")]
        top_n: usize,
        #[serde(default)]
        merge: Option<MergeSpec>,
    },
    Stats,
}

fn one() -> usize {
    1
}

fn meta<'a>(adapter: &'a Adapter<f64>, key: &str) -> Result<&'a str> {
    adapter
        .metadata
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::invalid(format!("adapter {:?} lacks {key:?} metadata", adapter.name)))
}

/// Hex SHA-256 of the little-endian logit bytes.
pub fn logits_digest(logits: &[f64]) -> String {
    let mut h = Sha256::new();
    for x in logits {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads every `.lmem` file of a directory, in name order.
    pub fn preload_dir(&self, dir: &Path) -> Result<usize> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|_| Error::MissingFile(dir.to_path_buf()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "lmem"))
            .collect();
        files.sort();
        for f in &files {
            self.register(f)?;
        }
        Ok(files.len())
    }

    pub fn register(&self, path: &Path) -> Result<String> {
        let adapter = self.reads.load(path)?;
        let seed: u64 = meta(&adapter, "seed")?.parse().map_err(|_| Error::invalid("bad seed metadata"))?;
        let d_in: usize = meta(&adapter, "d_in")?.parse().map_err(|_| Error::invalid("bad d_in metadata"))?;
        let embedding = adapter_embedding(&adapter)?;
        if adapter.target(MEMORY_TARGET).is_none() {
            return Err(Error::TargetMismatch(format!("{:?} has no {MEMORY_TARGET:?} target", adapter.name)));
        }
        let mut guard = self.state.write().expect("registry lock");
        let state = guard.get_or_insert_with(|| State {
            seed,
            d_in,
            w0: frozen_base(d_in, seed),
            adapters: BTreeMap::new(),
            index: EmbeddingIndex::new(d_in),
        });
        if state.seed != seed || state.d_in != d_in {
            return Err(Error::invalid(format!(
                "adapter {:?} was trained on another base (seed {seed}, d_in {d_in})",
                adapter.name
            )));
        }
        if state.adapters.contains_key(&adapter.name) {
            return Err(Error::invalid(format!("adapter {:?} already registered", adapter.name)));
        }
        state.index.insert(adapter.name.clone(), &embedding)?;
        let id = adapter.name.clone();
        state.adapters.insert(id.clone(), adapter);
        Ok(id)
    }

    pub fn adapter_count(&self) -> usize {
        self.state.read().expect("registry lock").as_ref().map_or(0, |s| s.adapters.len())
    }

    pub fn disk_reads(&self) -> usize {
        self.reads.total()
    }

    fn query(&self, vector: &[f64], top_n: usize, spec: Option<MergeSpec>) -> Result<Value> {
        let guard = self.state.read().expect("registry lock");
        let state = guard.as_ref().ok_or_else(|| Error::invalid("no adapters registered"))?;
        let mut stages = StageTimes::new();
        let (ranked, ms) = timed(|| route(&state.index, vector, &RoutingPolicy::cosine(top_n, 0.0, 0), 0, None))?;
        stages.push((Stage::IndexSearch, ms));
        let ids: Vec<String> = ranked.into_iter().map(|(id, _)| id).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        let chosen: Vec<&Adapter<f64>> = sorted
            .iter()
            .map(|id| state.adapters.get(id).ok_or_else(|| Error::UnknownId(id.clone())))
            .collect::<Result<_>>()?;
        let no_target = || Error::TargetMismatch(MEMORY_TARGET.to_string());
        let delta = if let [only] = chosen.as_slice() {
            only.target(MEMORY_TARGET).ok_or_else(no_target)?.delta()
        } else {
            let spec = spec.unwrap_or_else(|| MergeSpec::new(MergeMethod::Linear));
            let (d, ms) = timed(|| merge(&chosen, &spec)?.densify(MEMORY_TARGET).ok_or_else(no_target))?;
            stages.push((Stage::LoraMerge, ms));
            d
        };
        let (weights, ms) = timed(|| state.w0.add(&delta))?;
        stages.push((Stage::LoraActivation, ms));
        let (logits, ms) = timed(|| Matrix::new(1, vector.len(), vector.to_vec())?.matmul_nt(&weights))?;
        stages.push((Stage::Inference, ms));
        self.queries.fetch_add(1, Ordering::Relaxed);
        let stage_times: BTreeMap<String, f64> = stages.iter().map(|(s, ms)| (s.to_string(), *ms)).collect();
        Ok(json!({
            "ok": true,
            "route": ids,
            "em_logits_digest": logits_digest(logits.data()),
            "stage_times": stage_times,
        }))
    }

    fn stats(&self) -> Value {
        let guard = self.state.read().expect("registry lock");
        let ids: Vec<&String> = guard.as_ref().map(|s| s.adapters.keys().collect()).unwrap_or_default();
        json!({
            "ok": true,
            "adapters": ids.len(),
            "ids": ids,
            "queries": self.queries.load(Ordering::Relaxed),
            "disk_reads": self.reads.total(),
        })
    }

    /// Answers one protocol line. Failures become `{"ok": false, ...}`.
    pub fn handle_line(&self, line: &str) -> Value {
        let result = serde_json::from_str::<Request>(line)
            .map_err(|e| Error::invalid(format!("malformed request: {e}")))
            .and_then(|req| match req {
                Request::Register { path } => self
                    .register(&path)
                    .map(|id| json!({"ok": true, "id": id, "adapters": self.adapter_count()})),
                Request::Query { vector, top_n, merge } => self.query(&vector, top_n, merge),
                Request::Stats => Ok(self.stats()),
            });
        result.unwrap_or_else(|e| {
            json!({"ok": false, "error": {"category": e.category(), "message": e.to_string()}})
        })
    }
}

fn serve_connection(registry: &Registry, stream: TcpStream) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = registry.handle_line(&line);
        writer.write_all(reply.to_string().as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per client.
pub fn serve(listener: TcpListener, registry: Arc<Registry>) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let registry = Arc::clone(&registry);
        thread::spawn(move || {
            // a client hanging up mid-line only ends its own connection
            let _ = serve_connection(&registry, stream);
        });
    }
    Ok(())
}
