use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use condshape_cli::commands::{self, Segmenter};
use condshape_cli::sweep::{plan, run_sweep, split_target};
use condshape_cli::{configure_threads, CliError, Result, StudyConfig};
use condshape_core::dataset::read_manifest;
use condshape_models::{ShapeModel, UNet};
use serde_json::json;

#[derive(Parser)]
#[command(name = "condshape", version, about = "Edge-map-conditioned implicit shape segmentation study")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Dcsm,
    Baseline,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        domain: DomainArg,
        /// Override the number of cases.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Edge map of the union of one or more mask volumes.
    EdgeMap {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the target-domain edge detector on a subsample of a target dataset.
    TrainEdge {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the shape model on a source dataset.
    TrainShape {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the image-to-mask baseline on a subsample of a target dataset.
    TrainBaseline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment every case of a dataset, writing one mask volume per case.
    Infer {
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        edge: Option<PathBuf>,
        #[arg(long)]
        shape: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted masks against ground truth (mask directories or a dataset).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the data-efficiency sweep.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Source dataset, used to train the shape model when --shape is absent.
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        /// Pretrained (frozen) shape model checkpoint.
        #[arg(long)]
        shape: Option<PathBuf>,
        /// Run a single fraction instead of the configured list.
        #[arg(long)]
        fraction: Option<f64>,
        /// Run a single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the experiment plan without training.
        #[arg(long)]
        dry_run: bool,
    },
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::Config(format!("{flag} is required")))
}

fn print(v: serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenData { config, domain, n, seed, out } => {
            let cfg = StudyConfig::load_or_default(config.as_deref())?;
            let mut data = match domain {
                DomainArg::Source => cfg.source_data,
                DomainArg::Target => cfg.target_data,
            };
            data.n_cases = n.unwrap_or(data.n_cases);
            data.seed = seed.unwrap_or(data.seed);
            let count = commands::gen_data(&data, &out)?;
            print(json!({ "cases": count, "out": out }))
        }
        Command::EdgeMap { config, inputs, lambda, out } => {
            let cfg = StudyConfig::load_or_default(config.as_deref())?;
            let lambda = lambda.unwrap_or(cfg.lambda);
            let em = commands::edge_map(&inputs, lambda, &out)?;
            print(json!({ "dims": em.dims(), "lambda": lambda, "out": out }))
        }
        Command::TrainEdge { config, data, fraction, seed, out } => {
            let cfg = StudyConfig::load_or_default(config.as_deref())?;
            let seed = seed.unwrap_or(cfg.seed);
            commands::train_edge(&cfg, &data, fraction, seed, &out)?;
            print(json!({ "checkpoint": out, "fraction": fraction, "seed": seed }))
        }
        Command::TrainBaseline { config, data, fraction, seed, out } => {
            let cfg = StudyConfig::load_or_default(config.as_deref())?;
            let seed = seed.unwrap_or(cfg.seed);
            commands::train_baseline(&cfg, &data, fraction, seed, &out)?;
            print(json!({ "checkpoint": out, "fraction": fraction, "seed": seed }))
        }
        Command::TrainShape { config, data, seed, out } => {
            let cfg = StudyConfig::load_or_default(config.as_deref())?;
            let seed = seed.unwrap_or(cfg.seed);
            commands::train_shape(&cfg, &data, seed, &out)?;
            print(json!({ "checkpoint": out, "seed": seed }))
        }
        Command::Infer { method, edge, shape, baseline, data, out } => {
            let seg = match method {
                MethodArg::Dcsm => Segmenter::Dcsm {
                    edge: UNet::load(required(&edge, "--edge")?)?,
                    shape: ShapeModel::load(required(&shape, "--shape")?)?,
                },
                MethodArg::Baseline => Segmenter::Baseline(UNet::load(required(&baseline, "--baseline")?)?),
            };
            let ids = commands::infer(&seg, &data, &out)?;
            print(json!({ "method": seg.method(), "cases": ids.len(), "out": out }))
        }
        Command::Eval { pred, gt, out } => {
            let report = commands::eval(&pred, &gt)?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => println!("{text}"),
            }
            Ok(())
        }
        Command::Sweep { config, source, target, shape, fraction, seed, out, dry_run } => {
            let mut cfg = StudyConfig::load_or_default(config.as_deref())?;
            if let Some(f) = fraction {
                cfg.sweep.fractions = vec![f];
            }
            if let Some(s) = seed {
                cfg.sweep.seeds = vec![s];
            }
            if dry_run {
                let total = match &target {
                    Some(dir) => read_manifest(dir)?.cases.len(),
                    None => cfg.target_data.n_cases,
                };
                let pool = total.checked_sub(cfg.test_cases).filter(|p| *p > 0).ok_or_else(|| {
                    CliError::Config(format!("{total} target cases cannot hold {} test cases", cfg.test_cases))
                })?;
                return print(serde_json::to_value(plan(&cfg, pool)?)?);
            }
            let target_dir = required(&target, "--target")?;
            let target_cases = commands::load_dataset(target_dir)?;
            // Validate the split before any expensive work.
            split_target(target_cases.clone(), cfg.test_cases)?;
            let out = out.unwrap_or_else(|| PathBuf::from("sweep_out"));
            std::fs::create_dir_all(&out)?;
            let shape_model = match &shape {
                Some(path) => ShapeModel::load(path)?,
                None => {
                    let src = required(&source, "--source (or --shape)")?;
                    eprintln!("training the shape model on {}", src.display());
                    commands::train_shape(&cfg, src, cfg.seed, &out.join("shape.ckpt"))?
                }
            };
            let report = run_sweep(&cfg, &shape_model, target_cases, Some(&out), &mut |m| eprintln!("{m}"))?;
            print(json!({ "report": out.join("report.json"), "table": report.table }))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
