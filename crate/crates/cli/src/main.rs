use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fedpm::codec::ModelArtifact;
use fedpm::data::load_idx;
use fedpm::sim::config::{Baseline, DataSource, DpSettings, ExperimentConfig};
use fedpm::sim::experiment::{evaluate_artifact, prepare_data, run_federated};
use fedpm::sim::metrics::{metrics_jsonl, summary_csv, write_file};
use fedpm::par::Exec;

#[derive(Parser)]
#[command(name = "fedpm", version, about = "Federated probabilistic mask training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics.jsonl, summary.csv and model.fpm.
    Run(RunArgs),
    /// Score a saved model on a test set.
    Eval(EvalArgs),
    /// Print the header of a saved model.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory with the four IDX files.
    #[arg(long, conflicts_with = "synthetic")]
    data_dir: Option<PathBuf>,
    /// Use the generated Gaussian blobs instead of IDX files.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, value_parser = ["signsgd"])]
    baseline: Option<String>,
    #[arg(long, requires_all = ["dp_delta", "dp_clip"])]
    dp_epsilon: Option<f64>,
    #[arg(long, requires = "dp_epsilon")]
    dp_delta: Option<f64>,
    #[arg(long, requires = "dp_epsilon")]
    dp_clip: Option<f64>,
    /// Run clients one after another.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory holding t10k-images-idx3-ubyte and t10k-labels-idx1-ubyte.
    #[arg(long, required_unless_present = "config")]
    data_dir: Option<PathBuf>,
    /// Rebuild the synthetic test split from this experiment file instead.
    #[arg(long, conflicts_with = "data_dir")]
    config: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Eval(args) => eval(args),
        Command::Inspect { model } => inspect(&model),
    }
}

fn build_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load_unvalidated(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &args.data_dir {
        cfg.data = DataSource::Idx;
        cfg.data_dir = Some(dir.clone());
    }
    if args.synthetic {
        cfg.data = DataSource::Synthetic;
    }
    if args.baseline.is_some() {
        cfg.baseline = Baseline::Signsgd;
    }
    if let (Some(epsilon), Some(delta), Some(clip)) = (args.dp_epsilon, args.dp_delta, args.dp_clip) {
        cfg.dp = Some(DpSettings { epsilon, delta, clip });
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: RunArgs) -> Result<()> {
    let cfg = build_config(&args)?;
    let exec = if args.sequential { Exec::Sequential } else { Exec::default() };
    let fed = prepare_data(&cfg)?;
    let out = run_federated(&cfg, &fed, exec)?;

    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    write_file(&args.out_dir.join("metrics.jsonl"), metrics_jsonl(&out.metrics).as_bytes())?;
    let model_bpp = out.artifact.as_ref().map(ModelArtifact::bitrate);
    write_file(
        &args.out_dir.join("summary.csv"),
        summary_csv(&out.metrics, out.initial_accuracy, out.final_accuracy, model_bpp).as_bytes(),
    )?;
    if let Some(artifact) = &out.artifact {
        write_file(&args.out_dir.join("model.fpm"), &artifact.to_bytes())?;
    }
    let timings: String = out
        .round_seconds
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{},{s:.3}\n", i + 1))
        .collect();
    write_file(&args.out_dir.join("timings.csv"), format!("round,seconds\n{timings}").as_bytes())?;

    if let Some(last) = out.metrics.last() {
        println!(
            "rounds={} final_accuracy={:.4} last_uplink_bpp={:.4}",
            last.round, out.final_accuracy, last.uplink_bpp
        );
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let bytes = std::fs::read(&args.model).with_context(|| format!("reading {}", args.model.display()))?;
    let artifact = ModelArtifact::from_bytes(&bytes)?;
    let test = match (&args.data_dir, &args.config) {
        (Some(dir), _) => load_idx(
            &dir.join("t10k-images-idx3-ubyte"),
            &dir.join("t10k-labels-idx1-ubyte"),
        )?,
        (None, Some(cfg_path)) => {
            let cfg = ExperimentConfig::load(cfg_path)?;
            prepare_data(&cfg)?.test
        }
        (None, None) => bail!("either --data-dir or --config is required"),
    };
    let acc = evaluate_artifact(&artifact, &test)?;
    println!("accuracy={acc:.4} samples={}", test.len());
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let artifact = ModelArtifact::from_bytes(&bytes)?;
    let d = artifact.arch.param_count();
    let p_hat = artifact.mask.ones_count as f64 / d as f64;
    let widths: Vec<String> = artifact.arch.widths().iter().map(|w| w.to_string()).collect();
    println!("arch={}", widths.join("-"));
    println!("d={d}");
    println!("p_hat={p_hat:.6}");
    println!("bpp={:.6}", artifact.bitrate());
    println!("seed={}", artifact.seed);
    Ok(())
}
