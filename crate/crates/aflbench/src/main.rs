use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aflbench::aggregation::Strategy;
use aflbench::config::{self, ComparisonReport, ExperimentFile};
use aflbench::verify::{self, Suite};
use aflbench::Error;

#[derive(Parser)]
#[command(name = "aflbench", version, about = "Buffered asynchronous federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics and reports.
    Run {
        /// Path to the experiment JSON file.
        config: PathBuf,
        /// Overrides the config seed and the AFLBENCH_SEED env fallback.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for metrics.csv, report.json, resolved_config.json.
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Run the same experiment under several strategies with paired seeds.
    Compare {
        /// Path to the experiment JSON file.
        config: PathBuf,
        /// Comma-separated strategy names (at least two).
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
        /// Comma-separated seeds; each seed is shared across strategies.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Output directory for comparison.json.
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Run internal consistency suites.
    Verify {
        /// One of: mechanism, staleness-oracle, bound, gradients, all.
        #[arg(long, default_value = "all")]
        suite: String,
        /// Seed for the randomized checks.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VERIFY: u8 = 3;

fn fail(code: u8, err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(code)
}

fn config_exit(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidInput(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn cmd_run(config_path: &PathBuf, seed: Option<u64>, out_dir: &PathBuf) -> ExitCode {
    let file = match ExperimentFile::from_path(config_path) {
        Ok(f) => f,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };
    let seed = match config::resolve_seed(seed, &file) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };
    let out = match config::execute(&file, seed) {
        Ok(o) => o,
        Err(e) => return fail(config_exit(&e), &e),
    };
    let write = || -> aflbench::Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let csv = std::fs::File::create(out_dir.join("metrics.csv"))?;
        out.log.write_csv(std::io::BufWriter::new(csv))?;
        std::fs::write(
            out_dir.join("report.json"),
            serde_json::to_string_pretty(&out.report)?,
        )?;
        std::fs::write(
            out_dir.join("resolved_config.json"),
            serde_json::to_string_pretty(&file.resolved(seed))?,
        )?;
        Ok(())
    };
    if let Err(e) = write() {
        return fail(EXIT_RUNTIME, &e);
    }
    println!(
        "run complete: strategy={}, seed={}, aggregations={}, outputs in {}",
        out.report.strategy,
        seed,
        out.log.rows.len(),
        out_dir.display()
    );
    ExitCode::SUCCESS
}

fn cmd_compare(
    config_path: &PathBuf,
    strategies: &[String],
    seeds: &[u64],
    out_dir: &PathBuf,
) -> ExitCode {
    if strategies.len() < 2 {
        return fail(EXIT_CONFIG, &Error::Config("compare needs at least two --strategies".into()));
    }
    if seeds.is_empty() {
        return fail(EXIT_CONFIG, &Error::Config("compare needs at least one seed in --seeds".into()));
    }
    let mut parsed = Vec::with_capacity(strategies.len());
    for s in strategies {
        match s.parse::<Strategy>() {
            Ok(p) => parsed.push(p),
            Err(e) => return fail(EXIT_CONFIG, &e),
        }
    }
    let file = match ExperimentFile::from_path(config_path) {
        Ok(f) => f,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };
    let mut runs = Vec::new();
    for &seed in seeds {
        for &strategy in &parsed {
            let mut variant = file.clone();
            variant.server.strategy = strategy;
            match config::execute(&variant, seed) {
                Ok(o) => runs.push(o.report),
                Err(e) => return fail(config_exit(&e), &e),
            }
        }
    }
    let report = ComparisonReport {
        strategies: parsed.iter().map(|s| s.as_str().to_string()).collect(),
        seeds: seeds.to_vec(),
        runs,
    };
    let write = || -> aflbench::Result<()> {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(
            out_dir.join("comparison.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
        Ok(())
    };
    if let Err(e) = write() {
        return fail(EXIT_RUNTIME, &e);
    }
    println!(
        "compare complete: {} strategies x {} seeds, outputs in {}",
        parsed.len(),
        seeds.len(),
        out_dir.display()
    );
    ExitCode::SUCCESS
}

fn cmd_verify(suite: &str, seed: u64) -> ExitCode {
    let suite: Suite = match suite.parse() {
        Ok(s) => s,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };
    let results = match verify::run_suite(suite, seed) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_RUNTIME, &e),
    };
    let mut all_passed = true;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status} {}: {}", r.name, r.detail);
        all_passed &= r.passed;
    }
    if all_passed {
        println!("verify: {} checks passed", results.len());
        ExitCode::SUCCESS
    } else {
        eprintln!("verify: at least one check failed");
        ExitCode::from(EXIT_VERIFY)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, seed, out_dir } => cmd_run(&config, seed, &out_dir),
        Command::Compare { config, strategies, seeds, out_dir } => {
            cmd_compare(&config, &strategies, &seeds, &out_dir)
        }
        Command::Verify { suite, seed } => cmd_verify(&suite, seed),
    }
}
