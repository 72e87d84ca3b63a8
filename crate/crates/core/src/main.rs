use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gradleak::config::ExperimentConfig;
use gradleak::pipeline::{Outcome, Runner};
use gradleak::{Error, Result};

/// Exit status for a scan that flags the model.
const EXIT_ANOMALOUS: u8 = 3;
const EXIT_ERROR: u8 = 1;

#[derive(Parser)]
#[command(name = "gradleak", version, about = "Gradient leakage attacks and defenses on a federated classification head")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment configuration (JSON). Defaults to the selected preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when --config is absent.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for reconstruction.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the natural reference and the adversarially trained extractor.
    PretrainAt,
    /// Train the sparse-activation head on the frozen robust extractor.
    SpabTrain,
    /// Simulate one client round and store the uploaded update.
    FedRound,
    /// Recover and deduplicate candidate IRs from the update.
    Extract,
    /// Invert every candidate IR through the generator prior.
    Reconstruct,
    /// Run the feature-collision attack on both extractors.
    Preimage,
    /// Scan a model for handcrafted leakage primitives.
    Detect {
        /// Checkpoint to scan; defaults to the run's SpAB model.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Score reconstructions; optionally sweep the leakage rate.
    Evaluate {
        /// `batch-size 8,16,32,64`
        #[arg(long, num_args = 2, value_names = ["KIND", "VALUES"])]
        sweep: Option<Vec<String>>,
    },
    /// Run every stage in order.
    Demo,
    /// Print the effective configuration as JSON.
    ShowConfig,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::PretrainAt => "pretrain-at",
            Command::SpabTrain => "spab-train",
            Command::FedRound => "fed-round",
            Command::Extract => "extract",
            Command::Reconstruct => "reconstruct",
            Command::Preimage => "preimage",
            Command::Detect { .. } => "detect",
            Command::Evaluate { .. } => "evaluate",
            Command::Demo => "demo",
            Command::ShowConfig => "show-config",
        }
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::preset(&g.preset)?,
    };
    if let Some(seed) = g.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_sweep(args: &[String]) -> Result<Vec<usize>> {
    if args[0] != "batch-size" {
        return Err(Error::Config(format!("unknown sweep {:?}; only batch-size is supported", args[0])));
    }
    args[1]
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad batch size {s:?}")))
        })
        .collect()
}

fn report(stage: &str, outcome: Outcome) {
    let state = match outcome {
        Outcome::Ran => "ran",
        Outcome::UpToDate => "up_to_date",
    };
    println!("{}", serde_json::json!({"stage": stage, "outcome": state}));
}

fn run(cli: &Cli) -> Result<u8> {
    let cfg = load_config(&cli.global)?;
    if let Command::ShowConfig = cli.command {
        println!("{}", cfg.to_json());
        return Ok(0);
    }
    let out = cfg.output_dir.clone();
    let runner = Runner::new(cfg, out, cli.global.jobs)?;
    runner.write_config()?;
    let name = cli.command.name();
    match &cli.command {
        Command::PretrainAt => report(name, runner.pretrain_at()?),
        Command::SpabTrain => report(name, runner.spab_train()?),
        Command::FedRound => report(name, runner.fed_round()?),
        Command::Extract => report(name, runner.extract()?),
        Command::Reconstruct => report(name, runner.reconstruct()?),
        Command::Preimage => report(name, runner.preimage()?),
        Command::Detect { model } => {
            let rep = runner.detect(model.as_deref())?;
            println!(
                "{}",
                serde_json::json!({
                    "stage": name,
                    "anomalous": rep.anomalous,
                    "min_entropy": rep.min_entropy,
                    "flagged_vectors": rep.vectors.iter().filter(|v| v.flagged).count(),
                    "structure_matches": rep.structure_matches,
                    "checksum": rep.checksum,
                })
            );
            if rep.anomalous {
                return Ok(EXIT_ANOMALOUS);
            }
        }
        Command::Evaluate { sweep } => {
            let sizes = sweep.as_deref().map(parse_sweep).transpose()?;
            report(name, runner.evaluate(sizes.as_deref())?)
        }
        Command::Demo => {
            runner.demo()?;
            println!("{}", serde_json::json!({"stage": name, "outcome": "done"}));
        }
        Command::ShowConfig => unreachable!(),
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRADLEAK_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let record = serde_json::json!({
                "stage": cli.command.name(),
                "error": e.code(),
                "message": e.to_string(),
            });
            eprintln!("{record}");
            let dir = load_config(&cli.global).ok().map(|c| c.output_dir).or(cli.global.out.clone());
            if let Some(dir) = dir {
                if dir.is_dir() {
                    let _ = std::fs::write(dir.join("error.json"), format!("{record:#}\n"));
                }
            }
            ExitCode::from(EXIT_ERROR)
        }
    }
}
