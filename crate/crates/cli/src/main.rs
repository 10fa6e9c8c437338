use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flopsd_core::harness::experiment::read_curves;
use flopsd_core::harness::report::{render_table, summarize, write_report_csv};
use flopsd_core::harness::stages::{output_root, BASE_CKPT, DISTILLED_CKPT};
use flopsd_core::harness::{run_stage, verify, Manifest, Method, RunConfig, StageRequest};
use flopsd_core::Error;

/// Few-step flow-matching experiments on labeled 2-D mixtures.
///
/// Outputs go to `output.dir` from the config, or to $FLOPSD_RUNDIR if set.
/// Exit status: 0 success, 1 usage or input error, 2 numerical failure.
#[derive(Parser)]
#[command(name = "flopsd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model with flow matching and context dropout.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Distill the base model into a few-step model.
    Distill {
        #[arg(long)]
        config: PathBuf,
        /// Base checkpoint [default: <rundir>/base.ckpt]
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Tune a few-step model on the scenario's tuning set with one method.
    Tune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// opsd, sft, sft-teacher or offpolicy
        #[arg(long)]
        method: Method,
        /// Reference base checkpoint for the quality metric [default: <rundir>/base.ckpt]
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Evaluate a model: concept score, quality proxy, SW2 to target, retained energy.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// [default: <rundir>/base.ckpt]
        #[arg(long)]
        base: Option<PathBuf>,
        /// Untuned few-step model [default: <rundir>/distilled.ckpt]
        #[arg(long)]
        untuned: Option<PathBuf>,
    },
    /// Run every tuning method and the teacher-mode sweep over `ablate.seeds`.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Aggregate curves.csv (and teacher_modes.csv) of a run directory.
    Report {
        #[arg(long)]
        rundir: PathBuf,
    },
    /// Re-run a stage from its manifest and compare output hashes.
    Verify {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for the re-run [default: <manifest dir>/verify]
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn or_default(path: Option<PathBuf>, root: &Path, name: &str) -> PathBuf {
    path.unwrap_or_else(|| root.join(name))
}

fn stage(config: &Path, request: impl FnOnce(&Path) -> StageRequest) -> Result<(), Error> {
    let cfg = RunConfig::load(config)?;
    let root = output_root(&cfg);
    let request = request(&root);
    let manifest = run_stage(&cfg, &request, &root)?;
    println!("{} -> {}", request.name(), root.display());
    for (name, hash) in &manifest.outputs {
        println!("  {name}  {}", &hash[..16]);
    }
    Ok(())
}

fn report(rundir: &Path) -> Result<(), Error> {
    for (input, out) in [
        ("curves.csv", "report.csv"),
        ("teacher_modes.csv", "report_teacher_modes.csv"),
    ] {
        let path = rundir.join(input);
        if !path.exists() {
            if input == "curves.csv" {
                return Err(Error::Config(format!("{} not found", path.display())));
            }
            continue;
        }
        let summaries = summarize(&read_curves(&path)?)?;
        println!("{input}");
        print!("{}", render_table(&summaries));
        write_report_csv(&rundir.join(out), &summaries)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Pretrain { config } => stage(&config, |_| StageRequest::Pretrain),
        Command::Distill { config, base } => stage(&config, |root| StageRequest::Distill {
            base: or_default(base, root, BASE_CKPT),
        }),
        Command::Tune {
            config,
            model,
            method,
            base,
        } => stage(&config, |root| StageRequest::Tune {
            model,
            base: or_default(base, root, BASE_CKPT),
            method,
        }),
        Command::Eval {
            config,
            model,
            base,
            untuned,
        } => stage(&config, |root| StageRequest::Eval {
            model,
            base: or_default(base, root, BASE_CKPT),
            untuned: or_default(untuned, root, DISTILLED_CKPT),
        }),
        Command::Ablate { config } => stage(&config, |_| StageRequest::Ablate),
        Command::Report { rundir } => report(&rundir),
        Command::Verify { manifest, out } => {
            let m = Manifest::load(&manifest)?;
            let out = out.unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).join("verify"));
            let v = verify(&m, &out)?;
            if v.ok() {
                println!("{}: all {} outputs reproduced", m.request.name(), m.outputs.len());
                Ok(())
            } else {
                Err(Error::Checkpoint(format!(
                    "outputs differ: {}",
                    v.mismatched.join(", ")
                )))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
