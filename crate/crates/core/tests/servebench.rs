use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::Arc;
use std::thread;

use loramem::memlab::TrainConfig;
use loramem::multimem::adapter_embedding;
use loramem::servebench::*;
use serde_json::{json, Value};

fn prepared(dir: &Path) -> BenchManifest {
    let config = PrepareConfig {
        shards: 3,
        load_tokens: 512,
        d_in: 32,
        train: TrainConfig { steps: 200, seed: 4, ..TrainConfig::default() },
    };
    prepare_adapter_dir(dir, &config).unwrap()
}

fn scenario(dir: &Path, mode: BenchMode) -> BenchScenario {
    BenchScenario {
        mode,
        question_count: 12,
        adapter_dir: dir.to_path_buf(),
        ..BenchScenario::default()
    }
}

#[test]
fn stage_sets_per_mode() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path());
    let base = run_bench(&scenario(dir.path(), BenchMode::Base)).unwrap();
    assert_eq!(base.stage_names(), vec![Stage::ModelLoading, Stage::Tokenization, Stage::Inference]);
    assert_eq!(base.em, 0.0);
    for mode in [BenchMode::Single, BenchMode::Preloaded, BenchMode::Dynamic] {
        let report = run_bench(&scenario(dir.path(), mode)).unwrap();
        for stage in report.stage_names() {
            assert!(Stage::ALL.contains(&stage));
        }
        // totals are the sum of one-time and per-query entries
        for (stage, total) in &report.totals {
            let sum: f64 = report
                .stages
                .iter()
                .chain(report.per_query.iter().flat_map(|q| q.stages.iter()))
                .filter(|(s, _)| s == stage)
                .map(|(_, ms)| ms)
                .sum();
            assert!((sum - total).abs() < 1e-9);
        }
    }
}

#[test]
fn preloaded_reads_each_file_once_and_dynamic_rereads() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = prepared(dir.path());
    let pre = run_bench(&scenario(dir.path(), BenchMode::Preloaded)).unwrap();
    assert_eq!(pre.disk_reads.len(), manifest.adapters.len());
    assert!(pre.disk_reads.values().all(|&n| n == 1));
    let dynamic = run_bench(&scenario(dir.path(), BenchMode::Dynamic)).unwrap();
    assert_eq!(dynamic.disk_reads.values().sum::<usize>(), 12);
    // same routes and answers either way
    let routes = |r: &TimingReport| r.per_query.iter().map(|q| (q.route.clone(), q.correct)).collect::<Vec<_>>();
    assert_eq!(routes(&pre), routes(&dynamic));
    assert!(pre.em > 0.0);
}

#[test]
fn reports_are_deterministic_apart_from_times() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path());
    let a = run_bench(&scenario(dir.path(), BenchMode::Dynamic)).unwrap();
    let b = run_bench(&scenario(dir.path(), BenchMode::Dynamic)).unwrap();
    assert_eq!(a.without_times(), b.without_times());
    let text = serde_json::to_string(&a).unwrap();
    let back: TimingReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, a);
}

#[test]
fn scenario_errors() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path());
    let zero = BenchScenario { question_count: 0, ..scenario(dir.path(), BenchMode::Preloaded) };
    assert!(run_bench(&zero).is_err());
    std::fs::remove_file(dir.path().join("shard-01.lmem")).unwrap();
    let err = run_bench(&scenario(dir.path(), BenchMode::Preloaded)).unwrap_err();
    assert_eq!(err.category(), "missing_file");
}

fn roundtrip(stream: &mut TcpStream, reader: &mut BufReader<TcpStream>, request: &Value) -> Value {
    stream.write_all(format!("{request}\n").as_bytes()).unwrap();
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    serde_json::from_str(&line).unwrap()
}

#[test]
fn service_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = prepared(dir.path());
    let registry = Arc::new(Registry::new());
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = Arc::clone(&registry);
    thread::spawn(move || serve(listener, server));

    let mut stream = TcpStream::connect(addr).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let stats = roundtrip(&mut stream, &mut reader, &json!({"op": "stats"}));
    assert_eq!(stats["adapters"], 0);
    for (i, file) in manifest.adapters.iter().enumerate() {
        let reply = roundtrip(&mut stream, &mut reader, &json!({"op": "register", "path": dir.path().join(file)}));
        assert_eq!(reply["ok"], true, "{reply}");
        let stats = roundtrip(&mut stream, &mut reader, &json!({"op": "stats"}));
        assert_eq!(stats["adapters"], i + 1);
    }

    let bad = roundtrip(&mut stream, &mut reader, &json!({"op": "fly"}));
    assert_eq!(bad["ok"], false);
    let garbage = {
        stream.write_all(b"{not json\n").unwrap();
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        serde_json::from_str::<Value>(&line).unwrap()
    };
    assert_eq!(garbage["ok"], false);
    let missing = roundtrip(&mut stream, &mut reader, &json!({"op": "register", "path": dir.path().join("nope.lmem")}));
    assert_eq!(missing["error"]["category"], "missing_file");

    let adapter = loramem::lmem::load::<f64>(dir.path().join("shard-01.lmem")).unwrap();
    let centroid = adapter_embedding(&adapter).unwrap();
    let query = json!({"op": "query", "vector": centroid, "top_n": 1});
    let a = roundtrip(&mut stream, &mut reader, &query);
    assert_eq!(a["route"], json!(["shard-01"]));
    let b = roundtrip(&mut stream, &mut reader, &query);
    assert_eq!(a["route"], b["route"]);
    assert_eq!(a["em_logits_digest"], b["em_logits_digest"]);
    let merged = roundtrip(
        &mut stream,
        &mut reader,
        &json!({"op": "query", "vector": centroid, "top_n": 2, "merge": {"method": "ties"}}),
    );
    assert!(merged["stage_times"]["lora_merge"].is_number(), "{merged}");
    let wrong_dim = roundtrip(&mut stream, &mut reader, &json!({"op": "query", "vector": [1.0, 0.0]}));
    assert_eq!(wrong_dim["ok"], false);

    // concurrent identical queries agree
    let expected = (a["route"].clone(), a["em_logits_digest"].clone());
    let handles: Vec<_> = (0..32)
        .map(|_| {
            let query = query.clone();
            thread::spawn(move || {
                let mut s = TcpStream::connect(addr).unwrap();
                let mut r = BufReader::new(s.try_clone().unwrap());
                let reply = roundtrip(&mut s, &mut r, &query);
                (reply["route"].clone(), reply["em_logits_digest"].clone())
            })
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap(), expected);
    }
    assert_eq!(registry.disk_reads(), manifest.adapters.len());
}

#[test]
fn registry_preloads_directory() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = prepared(dir.path());
    let registry = Registry::new();
    assert_eq!(registry.preload_dir(dir.path()).unwrap(), manifest.adapters.len());
    assert_eq!(registry.adapter_count(), manifest.adapters.len());
    let dup = registry.handle_line(&json!({"op": "register", "path": dir.path().join("shard-00.lmem")}).to_string());
    assert_eq!(dup["ok"], false);
}
