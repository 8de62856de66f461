use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::timing::{add_to, timed, Stage, StageTimes};
use crate::adapter::Adapter;
use crate::error::{Error, Result};
use crate::lmem;
use crate::matcore::Matrix;
use crate::memlab::{encode_key, frozen_base, gen_phonebook, predict_digits, KvDataset, PhonebookRecord, TrainConfig};
use crate::merge::{merge, MergeMethod, MergeSpec};
use crate::multimem::{ShardedMemory, MEMORY_TARGET};
use crate::router::{route, EmbeddingIndex, RoutingPolicy};
use crate::VERSION;

pub const INDEX_FILE: &str = "index.json";
pub const QUESTIONS_FILE: &str = "questions.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Base,
    Single,
    Preloaded,
    Dynamic,
}

impl std::str::FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Self::Base),
            "single" => Ok(Self::Single),
            "preloaded" => Ok(Self::Preloaded),
            "dynamic" => Ok(Self::Dynamic),
            other => Err(Error::invalid(format!("unknown bench mode {other:?} (base|single|preloaded|dynamic)"))),
        }
    }
}

/// What an adapter directory was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchManifest {
    pub seed: u64,
    pub d_in: usize,
    pub adapters: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchScenario {
    pub mode: BenchMode,
    pub question_count: usize,
    pub top_n: usize,
    pub merge: MergeSpec,
    pub adapter_dir: PathBuf,
}

impl Default for BenchScenario {
    fn default() -> Self {
        Self {
            mode: BenchMode::Preloaded,
            question_count: 30,
            top_n: 1,
            merge: MergeSpec::new(MergeMethod::Linear),
            adapter_dir: PathBuf::from("adapters"),
        }
    }
}

/// Settings for [`prepare_adapter_dir`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepareConfig {
    pub shards: usize,
    pub load_tokens: usize,
    pub d_in: usize,
    pub train: TrainConfig,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            shards: 4,
            load_tokens: 1024,
            d_in: 64,
            train: TrainConfig { steps: 400, ..TrainConfig::default() },
        }
    }
}

/// Trains shard adapters and writes them, their index and the question
/// list into `dir`.
pub fn prepare_adapter_dir(dir: &Path, config: &PrepareConfig) -> Result<BenchManifest> {
    fs::create_dir_all(dir)?;
    let source = gen_phonebook(config.load_tokens / 11 + 2, config.train.seed)?;
    let dataset = crate::memlab::slice_by_budget::<f64>(&source, config.load_tokens, config.d_in)?;
    let mem = ShardedMemory::build(&dataset, config.shards, &config.train)?;
    let mut names = Vec::new();
    for adapter in &mem.adapters {
        let file = format!("{}.lmem", adapter.name);
        lmem::save(adapter, dir.join(&file))?;
        names.push(file);
    }
    mem.index.save(&dir.join(INDEX_FILE))?;
    let questions: String = dataset.records.iter().map(|r| r.qa_line() + "\n").collect();
    fs::write(dir.join(QUESTIONS_FILE), questions)?;
    let manifest = BenchManifest {
        seed: config.train.seed,
        d_in: config.d_in,
        adapters: names,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Counts adapter file reads per path.
#[derive(Debug, Default)]
pub struct ReadCounter {
    total: AtomicUsize,
    per_file: Mutex<BTreeMap<String, usize>>,
}

impl ReadCounter {
    pub fn load(&self, path: &Path) -> Result<Adapter<f64>> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        self.total.fetch_add(1, Ordering::Relaxed);
        let key = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        *self.per_file.lock().expect("counter lock").entry(key).or_insert(0) += 1;
        lmem::load(path)
    }

    pub fn total(&self) -> usize {
        self.total.load(Ordering::Relaxed)
    }

    pub fn per_file(&self) -> BTreeMap<String, usize> {
        self.per_file.lock().expect("counter lock").clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTiming {
    pub question: String,
    pub route: Vec<String>,
    pub correct: bool,
    pub stages: StageTimes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub version: String,
    pub scenario: BenchScenario,
    pub mode: BenchMode,
    /// Stages run once per scenario.
    pub stages: StageTimes,
    pub per_query: Vec<QueryTiming>,
    pub totals: BTreeMap<Stage, f64>,
    pub disk_reads: BTreeMap<String, usize>,
    pub em: f64,
}

impl TimingReport {
    pub fn total(&self, stage: Stage) -> f64 {
        self.totals.get(&stage).copied().unwrap_or(0.0)
    }

    /// Every stage name that appears anywhere in the report.
    pub fn stage_names(&self) -> Vec<Stage> {
        let mut out: Vec<Stage> = self
            .stages
            .iter()
            .chain(self.per_query.iter().flat_map(|q| q.stages.iter()))
            .map(|(s, _)| *s)
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Copy with every time zeroed, for comparing runs.
    pub fn without_times(&self) -> Self {
        let zero = |v: &StageTimes| v.iter().map(|(s, _)| (*s, 0.0)).collect();
        Self {
            stages: zero(&self.stages),
            per_query: self
                .per_query
                .iter()
                .map(|q| QueryTiming { stages: zero(&q.stages), ..q.clone() })
                .collect(),
            totals: self.totals.keys().map(|s| (*s, 0.0)).collect(),
            ..self.clone()
        }
    }
}

fn read_manifest(dir: &Path) -> Result<BenchManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|_| Error::MissingFile(path.clone()))?;
    Ok(serde_json::from_str(&text)?)
}

fn read_questions(dir: &Path, count: usize) -> Result<Vec<PhonebookRecord>> {
    let path = dir.join(QUESTIONS_FILE);
    let text = fs::read_to_string(&path).map_err(|_| Error::MissingFile(path.clone()))?;
    let all: Vec<PhonebookRecord> = text.lines().map(PhonebookRecord::parse_qa_line).collect::<Result<_>>()?;
    if all.len() < count {
        return Err(Error::invalid(format!("{} holds {} questions, {count} requested", path.display(), all.len())));
    }
    Ok(all.into_iter().take(count).collect())
}

fn name_from_question(question: &str) -> Result<&str> {
    question
        .strip_prefix("Question: What is the phone number of ")
        .and_then(|r| r.strip_suffix('?'))
        .ok_or_else(|| Error::invalid(format!("not a phonebook question: {question:?}")))
}

fn answer(weights: &Matrix<f64>, key: &[f64], record: &PhonebookRecord) -> Result<bool> {
    let q = Matrix::new(1, key.len(), key.to_vec())?;
    let logits = q.matmul_nt(weights)?;
    let digits = predict_digits(logits.row(0));
    Ok(digits.iter().zip(record.digits()).all(|(p, d)| *p == Some(d)))
}

fn memory_delta(adapters: &[&Adapter<f64>], spec: &MergeSpec) -> Result<Matrix<f64>> {
    let missing = || Error::TargetMismatch(format!("no {MEMORY_TARGET:?} target"));
    if let [one] = adapters {
        return Ok(one.target(MEMORY_TARGET).ok_or_else(missing)?.delta());
    }
    merge(adapters, spec)?.densify(MEMORY_TARGET).ok_or_else(missing)
}

/// Runs one scenario against a prepared adapter directory.
pub fn run_bench(scenario: &BenchScenario) -> Result<TimingReport> {
    if scenario.question_count == 0 {
        return Err(Error::invalid("question_count must be at least 1"));
    }
    let dir = &scenario.adapter_dir;
    let manifest = read_manifest(dir)?;
    if scenario.top_n == 0 || scenario.top_n > manifest.adapters.len() {
        return Err(Error::invalid(format!("top_n {} outside 1..={}", scenario.top_n, manifest.adapters.len())));
    }
    let questions = read_questions(dir, scenario.question_count)?;
    let counter = ReadCounter::default();
    let mut once = StageTimes::new();
    let mut per_query = Vec::with_capacity(questions.len());
    let routed = matches!(scenario.mode, BenchMode::Preloaded | BenchMode::Dynamic);

    let ((w0, index), ms) = timed(|| {
        let w0 = frozen_base::<f64>(manifest.d_in, manifest.seed);
        let index = if routed { Some(EmbeddingIndex::<f64>::load(&dir.join(INDEX_FILE))?) } else { None };
        Ok((w0, index))
    })?;
    once.push((Stage::ModelLoading, ms));

    let mut preloaded: BTreeMap<String, Adapter<f64>> = BTreeMap::new();
    let mut single_weights = None;
    match scenario.mode {
        BenchMode::Preloaded => {
            let (loaded, ms) = timed(|| {
                manifest
                    .adapters
                    .iter()
                    .map(|f| Ok((f.trim_end_matches(".lmem").to_string(), counter.load(&dir.join(f))?)))
                    .collect::<Result<BTreeMap<_, _>>>()
            })?;
            preloaded = loaded;
            once.push((Stage::AllLoraLoading, ms));
        }
        BenchMode::Single => {
            let (adapter, ms) = timed(|| counter.load(&dir.join(&manifest.adapters[0])))?;
            once.push((Stage::LoraLoading, ms));
            let (w, ms) = timed(|| w0.add(&memory_delta(&[&adapter], &scenario.merge)?))?;
            once.push((Stage::LoraActivation, ms));
            single_weights = Some(w);
        }
        BenchMode::Base | BenchMode::Dynamic => {}
    }

    let policy = RoutingPolicy::cosine(scenario.top_n, 0.0, 0);
    for (ordinal, record) in questions.iter().enumerate() {
        let mut stages = StageTimes::new();
        let question = record.question();
        let (key, ms) = timed(|| Ok(encode_key::<f64>(name_from_question(&question)?, manifest.d_in)))?;
        stages.push((Stage::Tokenization, ms));
        let mut route_ids = Vec::new();
        let weights = match scenario.mode {
            BenchMode::Base => None,
            BenchMode::Single => single_weights.clone(),
            BenchMode::Preloaded | BenchMode::Dynamic => {
                let index = index.as_ref().expect("routed modes load the index");
                let (embedding, ms) = timed(|| Ok(key.clone()))?;
                stages.push((Stage::QueryEmbedding, ms));
                let (ranked, ms) = timed(|| route(index, &embedding, &policy, ordinal as u64, None))?;
                stages.push((Stage::IndexSearch, ms));
                route_ids = ranked.into_iter().map(|(id, _)| id).collect();
                let mut sorted = route_ids.clone();
                sorted.sort();
                let chosen: Vec<Adapter<f64>> = if scenario.mode == BenchMode::Dynamic {
                    let (loaded, ms) = timed(|| {
                        sorted
                            .iter()
                            .map(|id| counter.load(&dir.join(format!("{id}.lmem"))))
                            .collect::<Result<Vec<_>>>()
                    })?;
                    stages.push((Stage::LoraLoading, ms));
                    loaded
                } else {
                    sorted
                        .iter()
                        .map(|id| preloaded.get(id).cloned().ok_or_else(|| Error::UnknownId(id.clone())))
                        .collect::<Result<_>>()?
                };
                let refs: Vec<&Adapter<f64>> = chosen.iter().collect();
                let delta = if refs.len() > 1 {
                    let (d, ms) = timed(|| memory_delta(&refs, &scenario.merge))?;
                    stages.push((Stage::LoraMerge, ms));
                    d
                } else {
                    memory_delta(&refs, &scenario.merge)?
                };
                let (w, ms) = timed(|| w0.add(&delta))?;
                stages.push((Stage::LoraActivation, ms));
                Some(w)
            }
        };
        let (correct, ms) = timed(|| answer(weights.as_ref().unwrap_or(&w0), &key, record))?;
        stages.push((Stage::Inference, ms));
        per_query.push(QueryTiming {
            question,
            route: route_ids,
            correct,
            stages,
        });
    }

    let mut totals = BTreeMap::new();
    add_to(&mut totals, &once);
    for q in &per_query {
        add_to(&mut totals, &q.stages);
    }
    let em = per_query.iter().filter(|q| q.correct).count() as f64 / per_query.len() as f64;
    Ok(TimingReport {
        version: VERSION.to_string(),
        scenario: scenario.clone(),
        mode: scenario.mode,
        stages: once,
        per_query,
        totals,
        disk_reads: counter.per_file(),
        em,
    })
}

/// Keys for the bench questions, for callers that want to query directly.
pub fn question_keys(dir: &Path, count: usize) -> Result<KvDataset<f64>> {
    let manifest = read_manifest(dir)?;
    KvDataset::from_records(read_questions(dir, count)?, manifest.d_in)
}
