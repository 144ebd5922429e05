use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maestro_core::mock::{MockTable, MockTableError};
use maestro_core::tts::MockEngineConfig;
use maestro_gateway::{Gateway, GatewayConfig};
use maestro_harness::bench::{self, BenchParams};
use maestro_harness::memtool;
use maestro_harness::{run_scenario, Scenario};

const PASS: u8 = 0;
const FAIL: u8 = 1;
const USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "maestro", version, about = "Multimodal orchestration runtime tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the HTTP/WebSocket gateway.
    Serve {
        /// TOML config; MAESTRO_* environment variables override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Replay scripted scenarios.
    #[command(subcommand)]
    Scenario(ScenarioCmd),
    /// Latency benchmarks.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Inspect persisted memory files.
    #[command(subcommand)]
    Memory(MemoryCmd),
    /// Mock backend tables.
    #[command(subcommand)]
    Mock(MockCmd),
}

#[derive(Debug, Subcommand)]
enum ScenarioCmd {
    /// Run a scenario file, or a bundled one by name (`garden`, `interrupt`).
    Run {
        file: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Subcommand)]
enum BenchCmd {
    /// Sequential vs parallel-batch synthesis on the simulated engine.
    Tts(TtsBench),
}

#[derive(Debug, Args)]
struct TtsBench {
    /// One utterance per line; a seeded synthetic corpus when omitted.
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long, default_value_t = 50)]
    base_ms: u64,
    #[arg(long, default_value_t = 20)]
    jitter_ms: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Subcommand)]
enum MemoryCmd {
    /// Print every record with its validation findings.
    Dump { file: PathBuf },
    /// Validate records against the memory schema.
    Validate {
        file: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Subcommand)]
enum MockCmd {
    /// Check that a table parses and ends in a catch-all.
    Check {
        table: PathBuf,
        /// Show which entry answers this text.
        #[arg(long)]
        query: Option<String>,
        /// Restrict the lookup to one pass (`controller` or `fusion`).
        #[arg(long)]
        pass: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    ExitCode::from(match cli.command {
        Command::Serve { config } => serve(config.as_deref()),
        Command::Scenario(ScenarioCmd::Run { file, json }) => scenario(&file, json),
        Command::Bench(BenchCmd::Tts(args)) => bench_tts(&args),
        Command::Memory(MemoryCmd::Dump { file }) => memory_dump(&file),
        Command::Memory(MemoryCmd::Validate { file, json }) => memory_validate(&file, json),
        Command::Mock(MockCmd::Check { table, query, pass }) => mock_check(&table, query, pass),
    })
}

fn serve(config: Option<&Path>) -> u8 {
    tracing_subscriber::fmt().with_env_filter(
        tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
    ).init();
    let (mut cfg, base) = match config {
        Some(p) => match GatewayConfig::load(p) {
            Ok(c) => (c, p.parent().map(Path::to_path_buf).unwrap_or_default()),
            Err(e) => {
                eprintln!("{e}");
                return USAGE;
            }
        },
        None => (GatewayConfig::default(), PathBuf::from(".")),
    };
    if let Err(e) = cfg.apply_env(std::env::vars()) {
        eprintln!("{e}");
        return USAGE;
    }
    let gateway = match Gateway::from_config(cfg, &base) {
        Ok(g) => g,
        Err(e) => {
            eprintln!("{e}");
            return USAGE;
        }
    };
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    match rt.block_on(maestro_gateway::serve(gateway)) {
        Ok(()) => PASS,
        Err(e) => {
            eprintln!("server error: {e}");
            FAIL
        }
    }
}

fn scenario(file: &Path, json: bool) -> u8 {
    let builtin = file.to_str().and_then(maestro_harness::bundled).filter(|_| !file.exists());
    let (parsed, base) = if let Some(text) = builtin {
        (Scenario::from_toml_str(text), PathBuf::from("."))
    } else {
        (Scenario::load(file), file.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    let scenario = match parsed {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return USAGE;
        }
    };
    let started = std::time::Instant::now();
    let report = match run_scenario(&scenario, &base) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return USAGE;
        }
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        for a in &report.assertions {
            println!("{} {:<12} {:<28} {}", if a.passed { "ok  " } else { "FAIL" }, a.step, a.check, a.detail);
        }
        for w in &report.warnings {
            println!("warning: {w}");
        }
        println!(
            "{}: {} ({} assertions, {} failed, {} ms virtual, {:.0} ms wall)",
            report.name,
            if report.passed { "PASS" } else { "FAIL" },
            report.assertions.len(),
            report.failures().count(),
            report.virtual_ms,
            started.elapsed().as_secs_f64() * 1000.0
        );
    }
    if report.passed {
        PASS
    } else {
        FAIL
    }
}

fn bench_tts(args: &TtsBench) -> u8 {
    let corpus = match &args.corpus {
        Some(p) => match bench::load_corpus(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("cannot read corpus {}: {e}", p.display());
                return USAGE;
            }
        },
        None => bench::default_corpus(args.seed),
    };
    let params = BenchParams {
        engine: MockEngineConfig { base_ms: args.base_ms, jitter_ms: args.jitter_ms, seed: args.seed, ..MockEngineConfig::default() },
        workers: args.workers.max(1),
        runs: args.runs.max(1),
    };
    let cmp = match bench::compare(&corpus, params) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return USAGE;
        }
    };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&cmp).expect("report serializes"));
    } else {
        print!("{}", cmp.table());
    }
    if cmp.regressed() {
        eprintln!("parallel mean exceeds sequential mean");
        FAIL
    } else {
        PASS
    }
}

fn memory_dump(file: &Path) -> u8 {
    match memtool::dump_lines(file) {
        Ok((lines, validation)) => {
            for l in lines {
                println!("{l}");
            }
            println!("{} records, {} violations, {} warnings", validation.records, validation.violations(), validation.warnings());
            if validation.is_valid() {
                PASS
            } else {
                FAIL
            }
        }
        Err(e) => {
            eprintln!("{e}");
            USAGE
        }
    }
}

fn memory_validate(file: &Path, json: bool) -> u8 {
    let validation = match memtool::validate_file(file) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("{e}");
            return USAGE;
        }
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&validation).expect("report serializes"));
    } else {
        for r in &validation.reports {
            let id = r.id.as_deref().unwrap_or("?");
            for v in &r.violations {
                println!("line {} ({id}): {v}", r.line);
            }
            for w in &r.warnings {
                println!("line {} ({id}): warning: {w}", r.line);
            }
        }
        println!("{} records, {} violations, {} warnings", validation.records, validation.violations(), validation.warnings());
    }
    if validation.is_valid() {
        PASS
    } else {
        FAIL
    }
}

fn mock_check(table: &Path, query: Option<String>, pass: Option<String>) -> u8 {
    let t = match MockTable::load(table) {
        Ok(t) => t,
        Err(e @ MockTableError::Io { .. }) => {
            eprintln!("{e}");
            return USAGE;
        }
        Err(e) => {
            eprintln!("{e}");
            return FAIL;
        }
    };
    println!("{}: {} entries, catch-all present", table.display(), t.len());
    if let Some(q) = query {
        match t.lookup(&q, pass.as_deref()) {
            Some(r) => println!("-> {r}"),
            None => println!("-> no entry for this pass"),
        }
    }
    PASS
}
