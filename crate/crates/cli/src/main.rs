//! `dmcis` command line.
//!
//! Exit codes: 0 ok, 1 validation or sweep failure, 2 unparseable input,
//! 3 I/O failure.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dmcis::engine::metrics::{aggregate, read_metrics_csv, write_aggregate_csv, write_metrics_csv, AggregateRow};
use dmcis::engine::{run, EngineError, MetricsRow};
use dmcis::model::validate_topology;
use dmcis::sweep::{run_sweep, SweepParam, SweepSpec};
use dmcis::{parse_scenario, Scenario};

const OK: u8 = 0;
const FAILED: u8 = 1;
const PARSE: u8 = 2;
const IO: u8 = 3;

#[derive(Parser)]
#[command(name = "dmcis", version, about = "Disaster management communication system simulator")]
#[command(after_help = "Exit codes: 0 ok, 1 validation or sweep failure, 2 parse error, 3 I/O error.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario against the deployment conditions.
    Validate {
        file: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run one simulation and write trace.jsonl, metrics.csv, summary.txt
    /// and trace.sha256.
    Run {
        file: PathBuf,
        /// Master seed (defaults to the scenario's `seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Simulated seconds (defaults to the scenario's `horizon`).
        #[arg(long)]
        horizon: Option<f64>,
        /// Output directory.
        #[arg(long, env = "DMCIS_OUT_DIR", default_value = "out")]
        out: PathBuf,
    },
    /// Run one scenario over a list of values for one parameter.
    Sweep {
        file: PathBuf,
        /// One of tau, map_count, link_standard, match_threshold, dpc_count.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<String>,
        /// Replications per value; replication r uses seed + r.
        #[arg(long, default_value_t = 1)]
        reps: u32,
        /// Base seed (defaults to the scenario's `seed`).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        horizon: Option<f64>,
        /// Output directory.
        #[arg(long, env = "DMCIS_OUT_DIR", default_value = "out")]
        out: PathBuf,
    },
    /// Summarise a metrics.csv as mean and standard error per sweep value.
    Report {
        metrics: PathBuf,
        /// Emit CSV instead of an aligned table.
        #[arg(long)]
        csv: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Validate { file, json } => validate(&file, json),
        Command::Run { file, seed, horizon, out } => run_cmd(&file, seed, horizon, &out),
        Command::Sweep { file, param, values, reps, seed, horizon, out } => {
            sweep(&file, &param, &values, reps, seed, horizon, &out)
        }
        Command::Report { metrics, csv } => report(&metrics, csv),
    };
    ExitCode::from(code)
}

fn load(file: &Path) -> Result<Scenario, u8> {
    parse_scenario(file).map_err(|e| {
        eprintln!("error: {e}");
        match e {
            dmcis::ScenarioError::Io { .. } => IO,
            dmcis::ScenarioError::Parse { .. } => PARSE,
        }
    })
}

fn validate(file: &Path, json: bool) -> u8 {
    let sc = match load(file) {
        Ok(sc) => sc,
        Err(code) => return code,
    };
    let report = validate_topology(&sc.topology);
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serialises"));
    } else {
        println!("{report}");
    }
    if report.is_valid() {
        OK
    } else {
        FAILED
    }
}

/// Writes through a temporary file in the same directory, then renames.
fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

fn write_all(dir: &Path, files: &[(&str, String)]) -> u8 {
    let res = fs::create_dir_all(dir).and_then(|_| files.iter().try_for_each(|(n, c)| write_atomic(&dir.join(n), c)));
    match res {
        Ok(()) => OK,
        Err(e) => {
            eprintln!("error: writing to {}: {e}", dir.display());
            IO
        }
    }
}

fn run_cmd(file: &Path, seed: Option<u64>, horizon: Option<f64>, out: &Path) -> u8 {
    let sc = match load(file) {
        Ok(sc) => sc,
        Err(code) => return code,
    };
    let seed = seed.unwrap_or(sc.settings.seed);
    let horizon = horizon.unwrap_or(sc.settings.horizon);
    let result = match run(&sc, seed, horizon) {
        Ok(r) => r,
        Err(EngineError::Invalid(report)) => {
            eprintln!("{report}");
            return FAILED;
        }
        Err(e @ EngineError::Horizon(_)) => {
            eprintln!("error: {e}");
            return PARSE;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return FAILED;
        }
    };
    let row = MetricsRow::new(&result.metrics, &result.digest);
    let csv = write_metrics_csv(&[row]).expect("in-memory csv");
    let code = write_all(
        out,
        &[
            ("trace.jsonl", result.jsonl.clone()),
            ("metrics.csv", csv),
            ("summary.txt", result.summary()),
            ("trace.sha256", format!("{}  trace.jsonl\n", result.digest)),
        ],
    );
    if code == OK {
        print!("{}", result.summary());
    }
    code
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    file: &Path,
    param: &str,
    values: &[String],
    reps: u32,
    seed: Option<u64>,
    horizon: Option<f64>,
    out: &Path,
) -> u8 {
    let param: SweepParam = match param.parse() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return PARSE;
        }
    };
    let values: Vec<String> = values.iter().map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        eprintln!("error: --values must list at least one value");
        return PARSE;
    }
    if reps == 0 {
        eprintln!("error: --reps must be >= 1");
        return PARSE;
    }
    let sc = match load(file) {
        Ok(sc) => sc,
        Err(code) => return code,
    };
    let spec = SweepSpec {
        param,
        values,
        reps,
        base_seed: seed.unwrap_or(sc.settings.seed),
        horizon: horizon.unwrap_or(sc.settings.horizon),
    };
    let outcome = run_sweep(&sc, &spec);
    for s in &outcome.skipped {
        eprintln!("skipped {param}={}: {}", s.value, s.reason.trim_end());
    }
    let agg = aggregate(&outcome.rows);
    let code = write_all(
        out,
        &[
            ("metrics.csv", write_metrics_csv(&outcome.rows).expect("in-memory csv")),
            ("aggregate.csv", write_aggregate_csv(&agg).expect("in-memory csv")),
        ],
    );
    if code != OK {
        return code;
    }
    print!("{}", table(&agg));
    if outcome.skipped.is_empty() {
        OK
    } else {
        FAILED
    }
}

fn report(path: &Path, csv: bool) -> u8 {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return IO;
        }
    };
    let rows = match read_metrics_csv(&text) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return PARSE;
        }
    };
    let agg = aggregate(&rows);
    if csv {
        print!("{}", write_aggregate_csv(&agg).expect("in-memory csv"));
    } else {
        print!("{}", table(&agg));
    }
    OK
}

/// Plain-text table: one block per sweep value, one line per metric.
fn table(rows: &[AggregateRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let label = if r.param.is_empty() { "all runs".to_string() } else { format!("{}={}", r.param, r.value) };
        s.push_str(&format!("{label} ({} run(s))\n", r.runs));
        for (name, stat) in &r.columns {
            match stat {
                Some(st) => s.push_str(&format!("  {name:<24} {:>12.4} ± {:.4}\n", st.mean, st.se)),
                None => s.push_str(&format!("  {name:<24} {:>12}\n", "n/a")),
            }
        }
    }
    s
}
