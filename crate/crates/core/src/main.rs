use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semlink::experiment::{self, Experiment, ExperimentConfig, Manifest};
use semlink::model::Variant;
use semlink::Result;

#[derive(Parser)]
#[command(name = "semlink", version, about = "Token-level semantic link simulator")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(clap::Args)]
struct Common {
    /// Configuration file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for CSVs and the manifest.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Overrides the model initialization seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the model variant.
    #[arg(long)]
    variant: Option<Variant>,
}

#[derive(Subcommand)]
enum Verb {
    /// Train a variant (reusing a cached checkpoint when the budget matches).
    Train(Common),
    /// Evaluate a trained variant at the reference channel setting.
    Eval(Common),
    /// Accuracy over channels, SNRs, seeds and tasks.
    SweepSnr(Common),
    /// Full model against the fusion and projector ablations.
    Ablate(Common),
    /// Joint codec training against a separately trained codec.
    JointCompare(Common),
    /// Re-run the experiment recorded in a manifest.
    Reproduce {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "runs/reproduced")]
        out: PathBuf,
    },
    /// Print the configuration keys and their defaults.
    Keys,
}

fn load(c: &Common, experiment: Experiment) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.experiment = experiment;
    if let Some(s) = c.seed {
        cfg.model_seed = s;
    }
    if let Some(v) = c.variant {
        cfg.variant = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(verb: Verb) -> Result<()> {
    let (common, experiment) = match verb {
        Verb::Train(c) => (c, Experiment::Train),
        Verb::Eval(c) => (c, Experiment::Eval),
        Verb::SweepSnr(c) => (c, Experiment::SweepSnr),
        Verb::Ablate(c) => (c, Experiment::Ablate),
        Verb::JointCompare(c) => (c, Experiment::JointCompare),
        Verb::Reproduce { manifest, out } => {
            let m = Manifest::load(&manifest)?;
            let run = experiment::reproduce(&m)?;
            experiment::write_output(&run, &out)?;
            println!("reproduced {} into {}", m.config.experiment, out.display());
            return Ok(());
        }
        Verb::Keys => {
            let d = ExperimentConfig::default();
            for (k, help) in experiment::CONFIG_KEYS {
                println!("{k}={}\t# {help}", d.get(k).unwrap_or_default());
            }
            return Ok(());
        }
    };
    let cfg = load(&common, experiment)?;
    let run = experiment::run(&cfg)?;
    experiment::write_output(&run, &common.out)?;
    if let Some(csv) = run.file("results.csv") {
        print!("{}", String::from_utf8_lossy(csv));
    }
    println!("wrote {}", common.out.display());
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse().verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
