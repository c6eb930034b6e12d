use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use isac_core::experiment::{methods, threads_from_env, write_csv, write_trace, Scenario};
use isac_core::{run_experiment, IsacError, RunOptions, SimulationConfig};
use log::{error, info};

const EXIT_CONFIG: u8 = 1;
const EXIT_PARTIAL: u8 = 2;

#[derive(Parser)]
#[command(name = "isac", version, about = "Monte Carlo runs of RIS-assisted sensing and communication")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sweep and write one CSV row per scenario, method, sweep point and metric
    Run(RunArgs),
    /// Parse and check a configuration file
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the registered methods
    ListMethods {
        #[arg(long, value_parser = parse_scenario)]
        scenario: Option<Scenario>,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_parser = parse_scenario)]
    scenario: Option<Scenario>,
    /// comma-separated method names
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// comma-separated SNR points in dB
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snr_db: Option<Vec<f64>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// CSV destination; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
    /// also write per-iteration JSON lines next to the CSV
    #[arg(long)]
    trace: bool,
    /// worker threads, capped by ISAC_THREADS
    #[arg(long)]
    threads: Option<usize>,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse().map_err(|e: IsacError| e.to_string())
}

fn load(path: &Path) -> isac_core::Result<SimulationConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| IsacError::Config(format!("cannot read {}: {e}", path.display())))?;
    SimulationConfig::from_json(&text).map_err(|e| IsacError::Config(format!("{}: {e}", path.display())))
}

fn trace_path(out: Option<&Path>) -> PathBuf {
    match out {
        Some(p) => p.with_extension("trace.jsonl"),
        None => PathBuf::from("trace.jsonl"),
    }
}

fn run(args: RunArgs) -> Result<ExitCode, (u8, String)> {
    let config_error = |e: IsacError| (EXIT_CONFIG, e.to_string());
    let mut cfg = load(&args.config).map_err(config_error)?;
    if let Some(s) = args.scenario {
        if s != cfg.scenario {
            cfg.methods.clear();
        }
        cfg.scenario = s;
    }
    if let Some(m) = args.methods {
        cfg.methods = m;
    }
    if let Some(s) = args.snr_db {
        cfg.snr_db = s;
    }
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(config_error)?;

    let threads = match (args.threads, threads_from_env()) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    let output = run_experiment(&cfg, &RunOptions { threads, trace: args.trace }).map_err(config_error)?;

    let io_error = |e: IsacError| (EXIT_CONFIG, format!("writing results: {e}"));
    match &args.out {
        Some(p) => {
            let f = File::create(p).map_err(|e| io_error(e.into()))?;
            write_csv(&output.rows, BufWriter::new(f)).map_err(io_error)?;
            info!("wrote {} rows to {}", output.rows.len(), p.display());
        }
        None => write_csv(&output.rows, io::stdout().lock()).map_err(io_error)?,
    }
    if args.trace {
        let p = trace_path(args.out.as_deref());
        let f = File::create(&p).map_err(|e| io_error(e.into()))?;
        let mut w = BufWriter::new(f);
        write_trace(&output.traces, &mut w).map_err(io_error)?;
        w.flush().map_err(|e| io_error(e.into()))?;
        info!("wrote {} trace lines to {}", output.traces.len(), p.display());
    }
    if output.failures.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    for f in &output.failures {
        error!("{} trial {} at {} dB (t1 {}, t2 {}): {}", f.method, f.trial, f.snr_db, f.t1, f.t2, f.message);
    }
    eprintln!("{} trial(s) failed", output.failures.len());
    Ok(ExitCode::from(EXIT_PARTIAL))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::ValidateConfig { config } => load(&config)
            .and_then(|c| c.validate().map(|_| c))
            .map(|c| {
                println!("ok: scenario {}, {} SNR point(s), {} trial(s)", c.scenario, c.snr_db.len(), c.trials);
                ExitCode::SUCCESS
            })
            .map_err(|e| (EXIT_CONFIG, e.to_string())),
        Command::ListMethods { scenario } => {
            for m in methods().iter().filter(|m| scenario.map_or(true, |s| s == m.scenario)) {
                println!("{:<22} {:<11} {}", m.name, m.scenario.as_str(), m.description);
            }
            Ok(ExitCode::SUCCESS)
        }
    };
    match result {
        Ok(code) => code,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
