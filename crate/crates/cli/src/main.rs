mod error;
mod jobs;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use error::{CliError, CliResult, Context};
use jobs::Job;
use manifest::{RunManifest, Timing, MANIFEST_FILE, TIMING_FILE};

#[derive(Parser)]
#[command(name = "tgd", version, about = "Targeted gradient descent experiments for PET denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML job file; relative paths inside it resolve against its folder.
    config: PathBuf,
    /// Run directory (default: runs/<timestamp>-<job hash>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// KSE threshold; for kse-report and prune-eval it replaces the sweep.
    #[arg(long)]
    phi: Option<f64>,
    /// Freeze the output layer during TGD.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    freeze_last_layer: Option<bool>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a training dataset and/or an evaluation study.
    GenData(Common),
    /// Train a denoiser from scratch.
    Train(Common),
    /// Fine-tune with gradients limited to low-KSE channels.
    TgdFinetune(Common),
    /// Adapt to one study from its two equal-count halves.
    N2n(Common),
    /// Score every layer's input channels and sweep pruning thresholds.
    KseReport(Common),
    /// Drop low-KSE kernels and measure the effect on a dataset.
    PruneEval(Common),
    /// Ensemble bias, CoV and MSE of a network on a study.
    Evaluate(Common),
    /// Rerun the job recorded in a manifest and compare outputs.
    Replay {
        /// manifest.json or the run directory holding it.
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).config_ctx(path.display())?;
    toml::from_str(&text).config_ctx(path.display())
}

fn load_job(name: &str, path: &Path) -> CliResult<Job> {
    let mut job = match name {
        "gen-data" => Job::GenData(parse(path)?),
        "train" => Job::Train(parse(path)?),
        "tgd-finetune" => Job::TgdFinetune(parse(path)?),
        "n2n" => Job::N2n(parse(path)?),
        "kse-report" => Job::KseReport(parse(path)?),
        "prune-eval" => Job::PruneEval(parse(path)?),
        "evaluate" => Job::Evaluate(parse(path)?),
        other => unreachable!("unknown subcommand {other}"),
    };
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    job.rebase(base);
    Ok(job)
}

fn apply_overrides(job: &mut Job, c: &Common) -> CliResult<()> {
    let name = job.name();
    let unsupported = |flag: &str| CliError::config(format!("{flag} does not apply to {name}"));
    if let Some(phi) = c.phi {
        match job {
            Job::KseReport(j) => j.phis = vec![phi],
            Job::PruneEval(j) => j.phis = vec![phi],
            Job::TgdFinetune(_) | Job::N2n(_) => job.train_config_mut().unwrap().phi = Some(phi),
            _ => return Err(unsupported("--phi")),
        }
    }
    let train_flags = [
        ("--freeze-last-layer", c.freeze_last_layer.is_some()),
        ("--epochs", c.epochs.is_some()),
        ("--seed", c.seed.is_some()),
    ];
    let Some(t) = job.train_config_mut() else {
        return match train_flags.iter().find(|f| f.1) {
            Some((flag, _)) => Err(unsupported(flag)),
            None => Ok(()),
        };
    };
    if let Some(b) = c.freeze_last_layer {
        t.last_layer_frozen = b;
    }
    if let Some(e) = c.epochs {
        t.epochs = e;
    }
    if let Some(s) = c.seed {
        t.seed = s;
    }
    Ok(())
}

/// Executes `job` into `out` and records manifest and timing.
fn run(job: &Job, out: &Path) -> CliResult<RunManifest> {
    job.validate()?;
    if out.join(MANIFEST_FILE).exists() {
        return Err(CliError::config(format!("{} already holds a run", out.display())));
    }
    let inputs = manifest::digest_inputs(&job.inputs())?;
    let started = chrono::Utc::now();
    let clock = Instant::now();
    let text = jobs::execute(job, out)?;
    print!("{text}");
    let m = RunManifest {
        tool: "tgd".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: job.name().into(),
        job: job.clone(),
        seeds: job.seeds(),
        inputs,
        outputs: manifest::digest_outputs(out)?,
    };
    let timing = Timing {
        started_utc: started.to_rfc3339(),
        wall_seconds: clock.elapsed().as_secs_f64(),
    };
    fs::write(out.join(MANIFEST_FILE), json(&m)).data_ctx(MANIFEST_FILE)?;
    fs::write(out.join(TIMING_FILE), json(&timing)).data_ctx(TIMING_FILE)?;
    println!("run directory: {}", out.display());
    Ok(m)
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("manifests serialize") + "\n"
}

fn out_dir(out: Option<PathBuf>, job: &Job) -> PathBuf {
    out.unwrap_or_else(|| manifest::default_run_dir(Path::new("runs"), job, chrono::Utc::now()))
}

fn replay(path: &Path, out: Option<PathBuf>) -> CliResult<()> {
    let recorded = manifest::load_manifest(path)?;
    let current = manifest::digest_inputs(&recorded.job.inputs())?;
    for (was, now) in recorded.inputs.iter().zip(&current) {
        if was.sha256 != now.sha256 {
            return Err(CliError::data(format!("input {} changed since the recorded run", was.path)));
        }
    }
    let out = out_dir(out, &recorded.job);
    let m = run(&recorded.job, &out)?;
    if m.outputs != recorded.outputs {
        let differing: Vec<_> = recorded
            .outputs
            .iter()
            .filter(|d| !m.outputs.contains(d))
            .map(|d| d.path.as_str())
            .collect();
        return Err(CliError::data(format!("replay outputs differ: {}", differing.join(", "))));
    }
    println!("replay: all {} outputs identical", m.outputs.len());
    Ok(())
}

fn main_inner(cli: Cli) -> CliResult<()> {
    let (name, common) = match cli.command {
        Command::Replay { manifest, out } => return replay(&manifest, out),
        Command::GenData(c) => ("gen-data", c),
        Command::Train(c) => ("train", c),
        Command::TgdFinetune(c) => ("tgd-finetune", c),
        Command::N2n(c) => ("n2n", c),
        Command::KseReport(c) => ("kse-report", c),
        Command::PruneEval(c) => ("prune-eval", c),
        Command::Evaluate(c) => ("evaluate", c),
    };
    let mut job = load_job(name, &common.config)?;
    apply_overrides(&mut job, &common)?;
    let out = out_dir(common.out.clone(), &job);
    run(&job, &out).map(|_| ())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { error::EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
