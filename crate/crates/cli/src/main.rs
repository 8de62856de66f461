use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use loramem::analysis::{run_sweep, SweepGrid};
use loramem::lmem;
use loramem::memlab::{
    evaluate_with_delta, frozen_base, gen_phonebook, slice_by_budget, train, KvDataset, PhonebookRecord, TrainConfig,
    DEFAULT_D_IN,
};
use loramem::merge::{merge, MergeMethod, MergeSpec};
use loramem::multimem::{monolithic_baseline, ShardedMemory, SystemConfig, MEMORY_TARGET};
use loramem::router::{route, EmbeddingIndex, RouteKind, RoutingPolicy};
use loramem::servebench::{prepare_adapter_dir, run_bench, serve, BenchMode, BenchScenario, PrepareConfig, Registry};
use loramem::{Adapter, Error, VERSION};

#[derive(Parser)]
#[command(name = "loramem", version = VERSION, about = "Low-rank adapter memory lab")]
struct Cli {
    /// Progress messages on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Phonebook generation, training and evaluation.
    #[command(subcommand)]
    Lab(LabCommand),
    /// Capacity sweep over ranks, loads and seeds.
    Sweep(SweepArgs),
    /// Merge adapter files.
    Merge(MergeArgs),
    /// Route query vectors against an embedding index.
    Route(RouteArgs),
    /// Multi-module experiments.
    #[command(subcommand)]
    Multi(MultiCommand),
    /// Serving-cost benchmark.
    Bench(BenchArgs),
    /// Adapter registry service over line-delimited JSON.
    Serve(ServeArgs),
    /// Adapter file utilities.
    #[command(subcommand)]
    Adapter(AdapterCommand),
}

#[derive(Subcommand)]
enum LabCommand {
    /// Write a phonebook as QA lines plus a JSON sidecar.
    Gen(GenArgs),
    /// Train a memory adapter on a phonebook file.
    Train(TrainArgs),
    /// Exact-match rate of an adapter on a phonebook file.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = TrainConfig::default().rank)]
    rank: usize,
    /// Defaults to the rank, which keeps alpha/rank at 1.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().init_stddev)]
    init_stddev: f64,
}

impl TrainFlags {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            rank: self.rank,
            alpha: self.alpha.unwrap_or(self.rank as f64),
            learning_rate: self.lr,
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
            init_stddev: self.init_stddev,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Token budget; the whole file is used when absent.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_D_IN)]
    d_in: usize,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    adapter: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Grid JSON; missing fields take their defaults.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
    /// Defaults to efficiency.csv next to --out.
    #[arg(long)]
    efficiency: Option<PathBuf>,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long, default_value = "linear")]
    method: MergeMethod,
    /// Comma-separated weights; uniform when absent.
    #[arg(long, value_delimiter = ',')]
    weights: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    density: f64,
    #[arg(long, default_value_t = 0.0)]
    drop_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct RouteArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated query vector.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "queries")]
    vector: Vec<f64>,
    /// JSON file holding an array of query vectors.
    #[arg(long)]
    queries: Option<PathBuf>,
}

#[derive(Subcommand)]
enum MultiCommand {
    /// Partition, train per shard, route and score.
    Run(MultiArgs),
}

#[derive(Args)]
struct MultiArgs {
    #[arg(long, default_value_t = 8)]
    shards: usize,
    /// Total knowledge load in tokens.
    #[arg(long, default_value_t = 6144)]
    load: usize,
    #[arg(long, default_value_t = DEFAULT_D_IN)]
    d_in: usize,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, default_value = "oracle")]
    route: RouteKind,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Method name or a JSON merge spec.
    #[arg(long, default_value = "ties")]
    merge: String,
    #[arg(long, default_value_t = 1)]
    topn: usize,
    /// Also train the matched-budget single adapter.
    #[arg(long)]
    baseline: bool,
    /// Write shard adapters and index.json here.
    #[arg(long)]
    save_dir: Option<PathBuf>,
    #[arg(long, default_value = "multi_report.json")]
    report: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "preloaded")]
    mode: BenchMode,
    #[arg(long, default_value_t = 30)]
    questions: usize,
    #[arg(long, default_value_t = 1)]
    topn: usize,
    #[arg(long, default_value = "adapters")]
    adapters: PathBuf,
    /// Build the adapter directory before running.
    #[arg(long)]
    prepare: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "bench_report.json")]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 7878)]
    port: u16,
    #[arg(long)]
    adapters: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AdapterCommand {
    /// Print an LMEM header as JSON.
    Inspect { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainRunConfig {
    data: PathBuf,
    budget: Option<usize>,
    d_in: usize,
    train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MultiRunConfig {
    shards: usize,
    load_tokens: usize,
    d_in: usize,
    baseline: bool,
    system: SystemConfig,
}

type CliResult<T> = Result<T, Error>;

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Prints to stdout; a closed pipe is not an error.
fn emit(value: &serde_json::Value) -> CliResult<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)? + "\n";
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io(e)),
        _ => Ok(()),
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn read_records(path: &Path) -> CliResult<Vec<PhonebookRecord>> {
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(PhonebookRecord::parse_qa_line)
        .collect()
}

fn lab_gen(args: &GenArgs) -> CliResult<()> {
    let records = gen_phonebook(args.n, args.seed)?;
    let text: String = records.iter().map(|r| r.qa_line() + "\n").collect();
    fs::write(&args.out, text)?;
    let tokens: usize = records.iter().map(PhonebookRecord::tokens).sum();
    let sidecar = args.out.with_extension("json");
    write_json(
        &sidecar,
        &json!({"version": VERSION, "seed": args.seed, "n_pairs": args.n, "token_count": tokens}),
    )
}

fn lab_train(args: &TrainArgs) -> CliResult<()> {
    let records = read_records(&args.data)?;
    let dataset = match args.budget {
        Some(b) => slice_by_budget::<f64>(&records, b, args.d_in)?,
        None => KvDataset::from_records(records, args.d_in)?,
    };
    let config = TrainRunConfig {
        data: args.data.clone(),
        budget: args.budget,
        d_in: args.d_in,
        train: args.train.config(),
    };
    let out = train(&dataset, &config.train)?;
    let em = evaluate_with_delta(out.model.w0(), Some(&out.model.pair.delta()), &dataset)?;
    let adapter = Adapter::new("memory-adapter")
        .with_target(MEMORY_TARGET, out.model.pair.clone())?
        .with_meta("seed", config.train.seed.to_string())
        .with_meta("d_in", args.d_in.to_string())
        .with_meta("config", serde_json::to_string(&config)?);
    lmem::save(&adapter, &args.out)?;
    log::info!("trained on {} records, em {em}", dataset.len());
    let report = json!({
        "version": VERSION,
        "config": config,
        "records": dataset.len(),
        "token_count": dataset.token_count,
        "em": em,
        "final_loss": out.losses.last(),
    });
    match &args.report {
        Some(p) => write_json(p, &report),
        None => emit(&report),
    }
}

fn meta_parse<T: std::str::FromStr>(adapter: &Adapter<f64>, key: &str) -> CliResult<T> {
    adapter
        .metadata
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::InvalidArgument(format!("adapter lacks a usable {key:?} metadata entry")))
}

fn lab_eval(args: &EvalArgs) -> CliResult<()> {
    let adapter = lmem::load::<f64>(&args.adapter)?;
    let d_in: usize = meta_parse(&adapter, "d_in")?;
    let seed: u64 = meta_parse(&adapter, "seed")?;
    let dataset = KvDataset::from_records(read_records(&args.data)?, d_in)?;
    let delta = adapter
        .target(MEMORY_TARGET)
        .ok_or_else(|| Error::TargetMismatch(format!("adapter has no {MEMORY_TARGET:?} target")))?
        .delta();
    let em = evaluate_with_delta(&frozen_base(d_in, seed), Some(&delta), &dataset)?;
    let report = json!({
        "version": VERSION,
        "config": {"data": args.data, "adapter": args.adapter, "d_in": d_in, "seed": seed},
        "records": dataset.len(),
        "em": em,
    });
    match &args.report {
        Some(p) => write_json(p, &report),
        None => emit(&report),
    }
}

fn sweep(args: &SweepArgs) -> CliResult<()> {
    let grid: SweepGrid = match &args.grid {
        Some(p) => serde_json::from_str(&read_text(p)?)?,
        None => SweepGrid::default(),
    };
    let result = run_sweep(&grid)?;
    fs::write(&args.out, result.results_csv()?)?;
    let eff = args
        .efficiency
        .clone()
        .unwrap_or_else(|| args.out.with_file_name("efficiency.csv"));
    fs::write(&eff, result.efficiency_csv()?)?;
    if let Some(peak) = result.peak_rank(grid.threshold)? {
        log::info!("peak efficiency at rank {peak}");
    }
    Ok(())
}

fn merge_cmd(args: &MergeArgs) -> CliResult<()> {
    let adapters: Vec<Adapter<f64>> = args.inputs.iter().map(lmem::load).collect::<CliResult<_>>()?;
    let spec = MergeSpec {
        method: args.method,
        weights: args.weights.clone(),
        density: args.density,
        drop_rate: args.drop_rate,
        seed: args.seed,
    };
    let refs: Vec<&Adapter<f64>> = adapters.iter().collect();
    let merged = merge(&refs, &spec)?;
    let mut metadata = adapters[0].metadata.clone();
    metadata.remove("embedding");
    metadata.insert("merge".into(), serde_json::to_string(&spec)?);
    metadata.insert(
        "sources".into(),
        serde_json::to_string(&adapters.iter().map(|a| &a.name).collect::<Vec<_>>())?,
    );
    lmem::save_merged("merged", &metadata, &merged, &args.out)
}

fn route_cmd(args: &RouteArgs) -> CliResult<()> {
    let index = EmbeddingIndex::<f64>::load(&args.index)?;
    let queries: Vec<Vec<f64>> = match &args.queries {
        Some(p) => serde_json::from_str(&read_text(p)?)?,
        None if !args.vector.is_empty() => vec![args.vector.clone()],
        None => return Err(Error::InvalidArgument("give --vector or --queries".into())),
    };
    let policy = RoutingPolicy::cosine(args.k, args.noise, args.seed);
    let mut out = Vec::with_capacity(queries.len());
    for (i, q) in queries.iter().enumerate() {
        let ranked = route(&index, q, &policy, i as u64, None)?;
        out.push(ranked.into_iter().map(|(id, score)| json!({"id": id, "score": score})).collect::<Vec<_>>());
    }
    emit(&json!({"version": VERSION, "config": policy, "routes": out}))
}

fn parse_merge_spec(text: &str) -> CliResult<MergeSpec> {
    if text.trim_start().starts_with('{') {
        Ok(serde_json::from_str(text)?)
    } else {
        Ok(MergeSpec::new(text.parse()?))
    }
}

fn multi_run(args: &MultiArgs) -> CliResult<()> {
    let train_config = args.train.config();
    let system = SystemConfig {
        train: train_config.clone(),
        routing: RoutingPolicy {
            kind: args.route,
            k: args.topn,
            noise_stddev: args.noise,
            seed: train_config.seed,
        },
        merge: parse_merge_spec(&args.merge)?,
        top_n: args.topn,
    };
    let config = MultiRunConfig {
        shards: args.shards,
        load_tokens: args.load,
        d_in: args.d_in,
        baseline: args.baseline,
        system,
    };
    let source = gen_phonebook(args.load / 11 + 2, train_config.seed)?;
    let dataset = slice_by_budget::<f64>(&source, args.load, args.d_in)?;
    let memory = ShardedMemory::build(&dataset, args.shards, &train_config)?;
    let report = memory.eval_system(&dataset, &config.system)?;
    if let Some(dir) = &args.save_dir {
        fs::create_dir_all(dir)?;
        for a in &memory.adapters {
            lmem::save(a, dir.join(format!("{}.lmem", a.name)))?;
        }
        memory.index.save(&dir.join("index.json"))?;
    }
    let baseline = if args.baseline {
        let (em, n_params) = monolithic_baseline(&dataset, &train_config, args.shards)?;
        Some(json!({"em": em, "n_params": n_params}))
    } else {
        None
    };
    write_json(
        &args.report,
        &json!({
            "version": VERSION,
            "config": config,
            "records": dataset.len(),
            "token_count": dataset.token_count,
            "em": report.em,
            "routing_accuracy": report.routing_accuracy,
            "per_shard_em": report.per_shard_em,
            "baseline": baseline,
        }),
    )
}

fn bench(args: &BenchArgs) -> CliResult<()> {
    if args.prepare {
        let config = PrepareConfig {
            train: TrainConfig { seed: args.seed, ..PrepareConfig::default().train },
            ..PrepareConfig::default()
        };
        prepare_adapter_dir(&args.adapters, &config)?;
    }
    let scenario = BenchScenario {
        mode: args.mode,
        question_count: args.questions,
        top_n: args.topn,
        adapter_dir: args.adapters.clone(),
        ..BenchScenario::default()
    };
    let report = run_bench(&scenario)?;
    write_json(&args.out, &serde_json::to_value(&report)?)
}

fn serve_cmd(args: &ServeArgs) -> CliResult<()> {
    let registry = Arc::new(Registry::new());
    if let Some(dir) = &args.adapters {
        let n = registry.preload_dir(dir)?;
        log::info!("preloaded {n} adapters from {}", dir.display());
    }
    let listener = TcpListener::bind(("127.0.0.1", args.port))?;
    eprintln!("listening on {}", listener.local_addr()?);
    serve(listener, registry)
}

fn inspect(path: &Path) -> CliResult<()> {
    let header = lmem::read_header(path)?;
    let adapter = lmem::load::<f64>(path)?;
    emit(&json!({
        "version": VERSION,
        "header": header,
        "param_count": adapter.count_params(),
    }))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Lab(LabCommand::Gen(a)) => lab_gen(&a),
        Command::Lab(LabCommand::Train(a)) => lab_train(&a),
        Command::Lab(LabCommand::Eval(a)) => lab_eval(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Merge(a) => merge_cmd(&a),
        Command::Route(a) => route_cmd(&a),
        Command::Multi(MultiCommand::Run(a)) => multi_run(&a),
        Command::Bench(a) => bench(&a),
        Command::Serve(a) => serve_cmd(&a),
        Command::Adapter(AdapterCommand::Inspect { path }) => inspect(&path),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(1)
        }
    }
}
