use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualprompt::checkpoint::load_base;
use dualprompt::config::{ExperimentConfig, Preset};
use dualprompt::dataset::{generate_dataset, Dataset};
use dualprompt::experiments::{
    run_ablation, run_features, run_infer, run_prognosis, run_train, write_ablation, write_features,
    InferRequest,
};
use dualprompt::{Error, Result};
use dualprompt_core::phantom::Split;
use dualprompt_core::text::{make_prompt, PromptKind};
use dualprompt_core::volume::Modality;

#[derive(Parser)]
#[command(name = "dualprompt", version, about = "Dual-prompt volumetric segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON); defaults apply to missing sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the model, training and fine-tuning seeds.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let cfg = ExperimentConfig::load_or_default(self.config.as_deref())?;
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a phantom dataset, its manifest and survival labels.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Built-in phantom set; overrides the config's phantom section.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset; writes history.jsonl, best.ckpt and a report.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one volume under explicit or templated prompts.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Volume sidecar (.json).
        #[arg(long)]
        volume: PathBuf,
        /// Raw context prompt.
        #[arg(long)]
        t1: Option<String>,
        /// Raw target prompt; repeat for several structures.
        #[arg(long)]
        t2: Vec<String>,
        /// Template fields used when --t1 / --t2 are absent.
        #[arg(long)]
        modality: Option<Modality>,
        #[arg(long)]
        region: Option<String>,
        #[arg(long)]
        organ: Vec<String>,
        /// Ground-truth mask sidecars, one per target, for DSC reporting.
        #[arg(long)]
        gt: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the six prompt-ablation conditions on the test split.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export pooled bottleneck features for both prompt sets.
    Features {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune adapters and a risk head; report concordance.
    Prognosis {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("reports serialise"));
}

fn prompts(
    t1: Option<String>,
    t2: Vec<String>,
    modality: Option<Modality>,
    region: Option<String>,
    organs: Vec<String>,
) -> Result<(String, Vec<String>)> {
    let t1 = match (t1, modality, &region) {
        (Some(t), _, _) => t.to_lowercase(),
        (None, Some(m), Some(r)) => make_prompt(m, r, PromptKind::Context),
        _ => return Err(Error::Usage("give --t1, or --modality and --region".into())),
    };
    let t2s = if !t2.is_empty() {
        t2.into_iter().map(|t| t.to_lowercase()).collect()
    } else {
        let m = modality.ok_or_else(|| Error::Usage("give --t2, or --modality and --organ".into()))?;
        if organs.is_empty() {
            return Err(Error::Usage("give --t2, or --modality and --organ".into()));
        }
        organs.iter().map(|o| make_prompt(m, o, PromptKind::Target)).collect()
    };
    Ok((t1, t2s))
}

fn dataset_modalities(data: &Dataset) -> Vec<Modality> {
    data.manifest.spec.modalities.clone()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, preset, out } => {
            let cfg = ExperimentConfig::load_or_default(common.config.as_deref())?;
            let mut spec = preset.map_or(cfg.phantom, Preset::spec);
            if let Some(s) = common.seed {
                spec.seed = s;
            }
            let data = generate_dataset(&spec, &out)?;
            eprintln!("wrote {} volumes to {}", data.manifest.entries.len(), out.display());
        }
        Command::Train { common, manifest, out } => {
            let cfg = common.load()?;
            let data = Dataset::open(&manifest)?;
            let (_, report) = run_train(&cfg, &data, Some(&out))?;
            eprintln!(
                "best epoch {} (validation DSC {:.4}) in {:.1} s",
                report.best_epoch, report.best_val_dsc, report.seconds
            );
        }
        Command::Infer {
            checkpoint,
            volume,
            t1,
            t2,
            modality,
            region,
            organ,
            gt,
            out,
        } => {
            let model = load_base(&checkpoint)?;
            let (t1, t2s) = prompts(t1, t2, modality, region, organ)?;
            let req = InferRequest {
                volume,
                t1,
                t2s,
                ground_truth: gt,
            };
            print_json(&run_infer(&model, &req, &out)?);
        }
        Command::Ablate { checkpoint, manifest, out } => {
            let model = load_base(&checkpoint)?;
            let data = Dataset::open(&manifest)?;
            let cases = data.load_split(Split::Test)?;
            let report = run_ablation(&model, &cases, &dualprompt::experiments::region_cycle(&data))?;
            write_ablation(&report, &out)?;
            print!("{}", report.table());
        }
        Command::Features { checkpoint, manifest, out } => {
            let model = load_base(&checkpoint)?;
            let data = Dataset::open(&manifest)?;
            let cases = data.load_split(Split::Test)?;
            let (rows, report) = run_features(
                &model,
                &cases,
                &dataset_modalities(&data),
                &dualprompt::experiments::region_cycle(&data),
            )?;
            write_features(&rows, &report, &out)?;
            print_json(&report);
        }
        Command::Prognosis {
            common,
            checkpoint,
            manifest,
            out,
        } => {
            let cfg = common.load()?;
            let base = load_base(&checkpoint)?;
            let data = Dataset::open(&manifest)?;
            let modalities: Vec<Modality> = [Modality::Ct, Modality::Pet]
                .into_iter()
                .filter(|m| data.manifest.spec.modalities.contains(m))
                .collect();
            let (_, report) = run_prognosis(&base, &data, &cfg.prognosis, &modalities, Some(&out))?;
            eprintln!(
                "trainable {} of {} parameters ({:.2}%)",
                report.adapters.trainable,
                report.adapters.total,
                100.0 * report.adapters.fraction
            );
            print_json(&report);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

