use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use invlab::harness::{self, parse_formats, AblationPreset, ExperimentConfig, Format, RunRecord};
use invlab::oracle;
use invlab::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "invlab", version, about = "DDIM inversion round-trip laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the independent oracle checks and print a pass/fail table.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a config with every default filled in.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Round-trip every configured strategy over all instances.
    Roundtrip {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Keep only strategies with these labels (repeatable).
        #[arg(long = "strategy")]
        strategies: Vec<String>,
        #[arg(long, default_value = "csv,json,svg")]
        formats: String,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation preset on the config's mixture, predictor and instances.
    Ablate {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "csv,json,svg")]
        formats: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-emit outputs from a saved `*.record.json`.
    Emit {
        #[arg(long)]
        record: PathBuf,
        #[arg(long, default_value = "csv,json,svg")]
        formats: String,
        /// Defaults to the record's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &Error) -> u8 {
    if err.is_validation() {
        EXIT_VALIDATION
    } else if matches!(err, Error::Invariant(_)) {
        EXIT_CHECK
    } else {
        EXIT_FAILURE
    }
}

fn load(config: Option<&Path>) -> Result<ExperimentConfig, Error> {
    match config {
        Some(path) => harness::load_config(path),
        None => {
            let cfg = ExperimentConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn verify(seed: u64) -> Result<u8, Error> {
    let reports = oracle::verification_suite(seed)?;
    println!("{:<34} {:>12} {:>10} {:>8}  result", "check", "discrepancy", "threshold", "samples");
    let mut failed = 0;
    for r in &reports {
        let ok = r.passed();
        if !ok {
            failed += 1;
        }
        println!(
            "{:<34} {:>12.3e} {:>10.1e} {:>8}  {}",
            r.name,
            r.discrepancy,
            r.threshold,
            r.samples,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    println!("{} of {} checks passed", reports.len() - failed, reports.len());
    Ok(if failed == 0 { 0 } else { EXIT_CHECK })
}

fn finish(record: &RunRecord, formats: &[Format], out: &Path) -> Result<u8, Error> {
    let written = harness::emit(record, formats, out)?;
    print!("{}", record.comparison_table());
    println!("config hash {}", record.config_hash);
    for path in &written {
        println!("wrote {}", path.display());
    }
    let t = record.timings;
    eprintln!(
        "cpu time: inversion {:.2}s, reconstruction {:.2}s, metrics {:.2}s",
        t.inversion_secs, t.reconstruction_secs, t.metrics_secs
    );
    if let Some(failure) = &record.failure {
        eprintln!("error: some runs failed: {failure}");
        return Ok(EXIT_FAILURE);
    }
    let violations = record.triangle_violations();
    if violations > 0 {
        eprintln!("error: ensemble mismatch exceeded the mean branch mismatch on {violations} steps");
        return Ok(EXIT_CHECK);
    }
    Ok(0)
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Verify { seed } => verify(seed),
        Command::Config { config } => {
            print!("{}", load(config.as_deref())?.to_toml()?);
            Ok(0)
        }
        Command::Roundtrip {
            config,
            strategies,
            formats,
            out,
        } => {
            let formats = parse_formats(&formats)?;
            let mut cfg = load(config.as_deref())?;
            if !strategies.is_empty() {
                if let Some(missing) = strategies
                    .iter()
                    .find(|want| !cfg.strategies.iter().any(|s| &s.label() == *want))
                {
                    let known: Vec<String> = cfg.strategies.iter().map(|s| s.label()).collect();
                    return Err(Error::InvalidArgument(format!(
                        "no configured strategy is labelled `{missing}` (known: {})",
                        known.join(", ")
                    )));
                }
                cfg.strategies.retain(|s| strategies.contains(&s.label()));
            }
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
            let record = harness::run_experiment(&cfg)?;
            finish(&record, &formats, &out)
        }
        Command::Ablate {
            preset,
            config,
            formats,
            out,
        } => {
            let preset: AblationPreset = preset.parse()?;
            let formats = parse_formats(&formats)?;
            let cfg = load(config.as_deref())?;
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
            let record = harness::ablate(preset, &cfg)?;
            finish(&record, &formats, &out)
        }
        Command::Emit { record, formats, out } => {
            let formats = parse_formats(&formats)?;
            let loaded = harness::load_record(&record)?;
            let out = out.unwrap_or_else(|| record.parent().map(Path::to_path_buf).unwrap_or_default());
            for path in harness::emit(&loaded, &formats, &out)? {
                println!("wrote {}", path.display());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
