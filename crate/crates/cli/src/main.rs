use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use spo_core::baseline::{cp_als, joint_tensor, ALS_RESTARTS};
use spo_core::experiment::{emit, sweep, ExperimentConfig};
use spo_core::moment_problem::matrix_pencil;
use spo_core::moments::{condition_diagnostic, estimate_bundle};
use spo_core::spo::{ate, ate_via_pseudoinverse, response_moment_sequence};
use spo_core::synthetic::{appendix_model, exact_bundle, exact_ground_truth, paper_model, sample, ModelSpec};
use spo_core::{Dataset, Error};

#[derive(Parser)]
#[command(name = "spo-mix", version, about = "Average and mixture treatment effects from proxy moments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelName {
    Paper,
    Appendix1,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic dataset (with the latent class column).
    Gen {
        #[arg(long, value_enum, default_value = "paper")]
        model: ModelName,
        #[arg(long, default_value_t = 0.0)]
        mu_zt: f64,
        #[arg(long, default_value_t = 0.0)]
        mu_xy: f64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate from a dataset: level 4 ATE, level 3 mixture of effects, level 2 CP factors.
    Estimate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(2..=4))]
        level: u8,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Include the observable moment bundle in the output.
        #[arg(long)]
        dump_moments: bool,
    },
    /// Run a parameter sweep and write sweep.csv / sweep.json.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Exact ground truth and exact-moment estimates for a model.
    Oracle {
        #[arg(long, value_enum, default_value = "paper")]
        model: ModelName,
        #[arg(long, default_value_t = 0.0)]
        mu_zt: f64,
        #[arg(long, default_value_t = 0.0)]
        mu_xy: f64,
        #[arg(long, default_value_t = 2)]
        k: usize,
    },
}

fn model(name: ModelName, mu_zt: f64, mu_xy: f64) -> spo_core::Result<ModelSpec> {
    match name {
        ModelName::Paper => paper_model(mu_zt, mu_xy).map_err(|e| Error::Config(e.to_string())),
        ModelName::Appendix1 => Ok(appendix_model()),
    }
}

fn outcome(r: spo_core::Result<Value>) -> Value {
    match r {
        Ok(v) => v,
        Err(e) => json!({ "error": e.name(), "message": e.to_string() }),
    }
}

fn print_json(v: &Value) -> spo_core::Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(v)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn with_path(path: &Path) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    }
}

fn run(cli: Cli) -> spo_core::Result<()> {
    match cli.command {
        Command::Gen {
            model: name,
            mu_zt,
            mu_xy,
            n,
            seed,
            out,
        } => {
            if n == 0 {
                return Err(Error::Config("--n must be at least 1".into()));
            }
            let spec = model(name, mu_zt, mu_xy)?;
            sample(&spec, n, seed).write_csv_path(&out).map_err(with_path(&out))?;
        }
        Command::Estimate {
            input,
            level,
            k,
            seed,
            dump_moments,
        } => {
            if k == 0 {
                return Err(Error::Config("--k must be at least 1".into()));
            }
            let d = Dataset::read_csv_path(&input).map_err(with_path(&input))?;
            let mut out = json!({ "n": d.n(), "level": level, "k": k });
            let bundle = estimate_bundle(&d);
            if let Ok(b) = &bundle {
                out["condition"] = serde_json::to_value(condition_diagnostic(b))?;
                if dump_moments {
                    out["moments"] = serde_json::to_value(b)?;
                }
            }
            match level {
                4 => {
                    let b = bundle?;
                    out["ate"] = json!(ate(&b)?);
                }
                3 => {
                    let b = bundle?;
                    let seq = response_moment_sequence(&b, k)?;
                    let (m, diag) = matrix_pencil(&seq)?;
                    out["ate"] = json!(seq.values[0]);
                    out["moment_sequence"] = json!(seq.values);
                    out["mixture"] = serde_json::to_value(&m)?;
                    out["pencil"] = serde_json::to_value(diag)?;
                }
                _ => {
                    let fit = cp_als(&joint_tensor(&d)?, k, ALS_RESTARTS, seed)?;
                    out["implied_effects"] = json!(fit.factors.implied_effects());
                    out["cp"] = serde_json::to_value(&fit)?;
                    if !fit.converged {
                        eprintln!("warning: ALS stopped at the iteration cap before converging");
                    }
                }
            }
            print_json(&out)?;
        }
        Command::Sweep { config } => {
            let cfg = ExperimentConfig::from_path(&config).map_err(with_path(&config))?;
            let table = sweep(&cfg)?;
            let (csv, json_path) = emit(&cfg, &table)?;
            eprintln!("wrote {} and {}", csv.display(), json_path.display());
        }
        Command::Oracle {
            model: name,
            mu_zt,
            mu_xy,
            k,
        } => {
            if k == 0 {
                return Err(Error::Config("--k must be at least 1".into()));
            }
            let spec = model(name, mu_zt, mu_xy)?;
            let truth = exact_ground_truth(&spec)?;
            let bundle = exact_bundle(&spec)?;
            let seq = response_moment_sequence(&bundle, k);
            let pencil = match &seq {
                Ok(s) => matrix_pencil(s).map(|(m, d)| json!({ "mixture": m, "diagnostics": d })),
                Err(e) => Ok(json!({ "error": e.name() })),
            };
            let out = json!({
                "truth": { "ate": truth.ate, "mte": truth.mte },
                "spo": {
                    "ate": outcome(ate(&bundle).map(|a| json!(a))),
                    "ate_pseudoinverse": outcome(ate_via_pseudoinverse(&bundle).map(|a| json!(a))),
                    "moment_sequence": outcome(seq.map(|s| json!(s.values))),
                    "mte": outcome(pencil),
                    "condition": condition_diagnostic(&bundle),
                },
                "moments": bundle,
            });
            print_json(&out)?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::OutOfRange { .. } | Error::InvalidModel(_) => 2,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
