use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use threephase::cli::{self, Overrides, RunConfig, VerifyOptions};
use threephase::{Error, Result};

#[derive(Parser)]
#[command(name = "threephase", version, about = "Train and inspect N-phase transformers")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
    /// Run configuration (JSON). Defaults to {out}/config.json where that exists.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run or report directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "BOOL")]
    deterministic: Option<bool>,
    #[arg(long, global = true)]
    steps: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run.
    Train,
    /// Re-evaluate the final checkpoint of the run in --out.
    Eval,
    /// Run the invariant suites; exits 1 on any failure.
    Verify {
        /// Perturb the horn profile by this amount (fault-injection hook).
        #[arg(long)]
        inject_fault: Option<f64>,
    },
    /// One run per phase count, in parallel (THREEPHASE_THREADS caps workers).
    SweepN {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,6,8,12")]
        phases: Vec<usize>,
    },
    /// Drift heatmap, horn, phase balance and radii of the run in --out.
    Diagnose {
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
    },
    /// Compare two or more finished runs; writes into --out.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
    },
}

fn load_config(args: &Args) -> Result<RunConfig> {
    let path = match (&args.config, &args.out) {
        (Some(p), _) => p.clone(),
        (None, Some(out)) if out.join(cli::CONFIG).exists() => out.join(cli::CONFIG),
        _ => return Err(Error::Config("no --config given and no config.json in --out".into())),
    };
    let mut cfg = RunConfig::load(&path)?;
    cfg.apply(&Overrides {
        seed: args.seed,
        out: args.out.clone(),
        deterministic: args.deterministic,
        steps: args.steps,
    })?;
    Ok(cfg)
}

fn run_dir(args: &Args) -> Result<PathBuf> {
    args.out
        .clone()
        .ok_or_else(|| Error::Config("--out must name the run directory".into()))
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn print_json<S: serde::Serialize>(v: &S) -> Result<()> {
    emit(&serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(args: &Args) -> Result<bool> {
    match &args.cmd {
        Cmd::Train => {
            let cfg = load_config(args)?;
            let s = cli::train(&cfg)?;
            emit(&format!(
                "{}: {} steps, loss {:.4} -> {:.4}, val {:.4} (ppl {:.2}, bpb {:.4}) in {}",
                s.label,
                s.steps,
                s.initial_loss,
                s.final_train_loss,
                s.final_val_loss,
                s.final_ppl,
                s.final_bpb,
                cfg.out_dir.display()
            ));
        }
        Cmd::Eval => print_json(&cli::eval(&run_dir(args)?)?)?,
        Cmd::Verify { inject_fault } => {
            let cfg = args.config.as_ref().map(|_| load_config(args)).transpose()?;
            let mut opts = VerifyOptions {
                inject_fault: *inject_fault,
                seed: args.seed.unwrap_or(0),
                ..Default::default()
            };
            if let Some(s) = args.steps {
                opts.dead_aux_steps = s;
            }
            let report = cli::verify(cfg.as_ref(), &opts)?;
            for s in &report.suites {
                emit(&format!("{} {}", if s.passed { "PASS" } else { "FAIL" }, s.name));
            }
            match &args.out {
                Some(out) => cli::write_json(&out.join("verify.json"), &report)?,
                None => print_json(&report)?,
            }
            return Ok(report.passed);
        }
        Cmd::SweepN { phases } => {
            let cfg = load_config(args)?;
            let rows = cli::sweep_n(&cfg, phases)?;
            emit(cli::sweep_table(&rows).trim_end());
        }
        Cmd::Diagnose { threshold } => {
            let r = cli::diagnose(&run_dir(args)?, *threshold)?;
            print_json(&r)?;
        }
        Cmd::Compare { runs } => {
            let out = args.out.clone().unwrap_or_else(|| PathBuf::from("compare"));
            let r = cli::compare(runs, &out)?;
            emit(cli::compare_table(&r).trim_end());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(true) => ExitCode::from(cli::ExitCode::Success as u8),
        Ok(false) => ExitCode::from(cli::ExitCode::InvariantFailure as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
