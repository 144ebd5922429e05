use std::path::Path;

use maestro_core::tts::{benchmark_virtual, synthetic_corpus, BenchError, LatencyReport, MockEngineConfig, Mode};
use serde::{Deserialize, Serialize};

/// Utterances per generated corpus when no corpus file is given.
pub const DEFAULT_CORPUS_SIZE: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchParams {
    pub engine: MockEngineConfig,
    pub workers: usize,
    pub runs: usize,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self { engine: MockEngineConfig::default(), workers: 4, runs: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub sequential: LatencyReport,
    pub parallel: LatencyReport,
    /// Relative reduction of the mean completion time.
    pub mean_reduction: f64,
    /// Parallel variance over sequential variance.
    pub variance_ratio: f64,
}

impl Comparison {
    pub fn regressed(&self) -> bool {
        self.parallel.mean_ms > self.sequential.mean_ms
    }

    pub fn table(&self) -> String {
        let row = |r: &LatencyReport| {
            format!(
                "{:<15} {:>6} {:>10.2} {:>14.2} {:>10.2}\n",
                serde_json::to_value(r.mode).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
                r.n,
                r.mean_ms,
                r.variance_ms2,
                r.ttfa_mean_ms
            )
        };
        let mut out = format!("{:<15} {:>6} {:>10} {:>14} {:>10}\n", "mode", "n", "mean_ms", "variance_ms2", "ttfa_ms");
        out.push_str(&row(&self.sequential));
        out.push_str(&row(&self.parallel));
        out.push_str(&format!(
            "mean reduction {:.1}%, variance ratio {:.3}\n",
            self.mean_reduction * 100.0,
            self.variance_ratio
        ));
        out
    }
}

/// One utterance per non-empty line; `#` starts a comment line.
pub fn load_corpus(path: &Path) -> std::io::Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

pub fn default_corpus(seed: u64) -> Vec<String> {
    synthetic_corpus(seed, DEFAULT_CORPUS_SIZE, 3, 6)
}

/// Benchmarks both modes on identical engine draws.
pub fn compare(corpus: &[String], params: BenchParams) -> Result<Comparison, BenchError> {
    let sequential = benchmark_virtual(params.engine, corpus, Mode::Sequential, params.runs, params.workers)?;
    let parallel = benchmark_virtual(params.engine, corpus, Mode::ParallelBatch, params.runs, params.workers)?;
    let mean_reduction = 1.0 - parallel.mean_ms / sequential.mean_ms;
    let variance_ratio = if sequential.variance_ms2 > 0.0 {
        parallel.variance_ms2 / sequential.variance_ms2
    } else {
        1.0
    };
    Ok(Comparison { sequential, parallel, mean_reduction, variance_ratio })
}
