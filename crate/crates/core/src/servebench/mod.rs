//! Serving-cost harness and a small adapter registry service.

mod bench;
mod service;
mod timing;

pub use bench::{
    prepare_adapter_dir, question_keys, run_bench, BenchManifest, BenchMode, BenchScenario, PrepareConfig, QueryTiming,
    ReadCounter, TimingReport, INDEX_FILE, MANIFEST_FILE, QUESTIONS_FILE,
};
pub use service::{logits_digest, serve, Registry};
pub use timing::{timed, Stage, StageTimes};
