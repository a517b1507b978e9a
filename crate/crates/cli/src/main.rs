use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fuseg_core::checkpoint::Checkpoint;
use fuseg_core::config::ModelConfig;
use fuseg_core::metrics::MetricRecord;
use fuseg_core::model::end_to_end_grad_check;
use fuseg_core::par::ExecMode;
use fuseg_core::synth::{generate_range, write_dataset};
use fuseg_core::train::{ablate, evaluate, evaluate_subsets, load_model, train, Dataset, RunOptions, TrainConfig, Variant};
use fuseg_tensor::GradCheckOptions;

#[derive(Parser)]
#[command(name = "fuseg", version, about = "Multimodal segmentation with cross-modal interaction and fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML training config; the toy defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory receiving JSON-lines reports and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Run per-sample work on one thread.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                TrainConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => TrainConfig::toy(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn exec(&self) -> ExecMode {
        if self.sequential {
            ExecMode::Sequential
        } else {
            ExecMode::Parallel
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and keep the best validation checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train on these modalities only (comma-separated names).
        #[arg(long, value_delimiter = ',')]
        subset: Option<Vec<String>>,
    },
    /// Evaluate a checkpoint on every modality subset, or on the given one.
    EvalSubsets {
        #[command(flatten)]
        common: Common,
        /// Checkpoint base path; defaults to `<out>/best`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        subset: Option<Vec<String>>,
    },
    /// Train the component variants, or a stage-insertion sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Stages to sweep: each one alone, then all of them together.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<usize>>,
    },
    /// Finite-difference check of the whole model on a 16x16 input.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Modalities present in the checked model.
        #[arg(long, value_delimiter = ',', default_value = "intensity,material")]
        subset: Vec<String>,
        /// Coordinates checked per parameter tensor.
        #[arg(long, default_value_t = 3)]
        coords: usize,
    },
    /// Write the training and validation scenes to disk.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

fn restrict(model: &ModelConfig, subset: &[String]) -> Result<ModelConfig> {
    let names: Vec<&str> = subset.iter().map(String::as_str).collect();
    Ok(model.restricted_to(&names)?)
}

fn write_lines(path: &Path, lines: &str) -> Result<()> {
    fs::write(path, lines).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, subset } => {
            let mut cfg = common.load()?;
            if let Some(s) = &subset {
                cfg.model = restrict(&cfg.model, s)?;
            }
            let opts = RunOptions {
                exec: common.exec(),
                out: Some(common.out.clone()),
            };
            let outcome = train(&cfg, &opts)?;
            let data = Dataset::generate(&cfg, opts.exec)?;
            let cm = evaluate(&outcome.model, &outcome.best.store, &data.val, opts.exec)?;
            let rec = MetricRecord::from_matrix("val", &cm, cfg.seed, &outcome.config_hash);
            write_lines(&common.out.join("metrics.jsonl"), &(rec.to_json_line()? + "\n"))?;
            println!(
                "best validation mIoU {:.4} at epoch {} (config {})",
                outcome.best_miou, outcome.best_epoch, outcome.config_hash
            );
        }
        Command::EvalSubsets { common, checkpoint, subset } => {
            let cfg = common.load()?;
            let base = checkpoint.unwrap_or_else(|| common.out.join("best"));
            let ck = Checkpoint::load(&base).with_context(|| format!("loading {}", base.display()))?;
            let model = load_model(&cfg, &ck)?;
            let data = Dataset::generate(&cfg, common.exec())?;
            let subsets = match &subset {
                Some(names) => Some(vec![names
                    .iter()
                    .map(|n| cfg.model.modality_index(n).with_context(|| format!("unknown modality `{n}`")))
                    .collect::<Result<Vec<_>>>()?]),
                None => None,
            };
            let table = evaluate_subsets(&model, &ck.store, &data.val, subsets.as_deref(), cfg.seed, &ck.config_hash, common.exec())?;
            fs::create_dir_all(&common.out)?;
            write_lines(&common.out.join("subsets.jsonl"), &table.to_json_lines()?)?;
            for r in &table.rows {
                println!("{:<40} {:.4}", r.subset, r.miou);
            }
            println!("{:<40} {:.4}", "mean", table.mean_miou);
        }
        Command::Ablate { common, stages } => {
            let cfg = common.load()?;
            let variants = match stages {
                Some(s) if s.is_empty() => bail!("--stages needs at least one stage"),
                Some(s) => {
                    let mut v: Vec<Variant> = s.iter().map(|&x| Variant::Stages(vec![x])).collect();
                    if s.len() > 1 {
                        v.push(Variant::Stages(s.clone()));
                    }
                    v
                }
                None => Variant::components(),
            };
            let opts = RunOptions {
                exec: common.exec(),
                out: Some(common.out.clone()),
            };
            fs::create_dir_all(&common.out)?;
            let report = common.out.join("ablation.jsonl");
            if report.exists() {
                fs::remove_file(&report)?;
            }
            for row in ablate(&cfg, &variants, &opts)? {
                println!("{:<16} mIoU {:.4}  params {:>9}  MACs {:>11}", row.variant, row.miou, row.params, row.macs);
            }
        }
        Command::Gradcheck { common, subset, coords } => {
            let cfg = common.load()?;
            let model = restrict(&cfg.model, &subset)?;
            let opts = GradCheckOptions {
                max_coords: Some(coords),
                seed: cfg.seed,
                ..Default::default()
            };
            let report = end_to_end_grad_check(&model, 16, 16, cfg.seed, &opts)?;
            fs::create_dir_all(&common.out)?;
            let lines: String = report
                .params
                .iter()
                .map(|p| {
                    serde_json::json!({
                        "param": p.name,
                        "checked": p.checked,
                        "max_rel_err": p.max_rel_err,
                        "analytic": p.analytic,
                        "numeric": p.numeric,
                    })
                    .to_string()
                        + "\n"
                })
                .collect();
            write_lines(&common.out.join("gradcheck.jsonl"), &lines)?;
            println!("max relative error {:.3e} over {} tensors", report.max_rel_err(), report.params.len());
            report.ensure()?;
        }
        Command::GenData { common } => {
            let cfg = common.load()?;
            let d = &cfg.data;
            let val = generate_range(&d.scene, 0, d.val_samples, common.exec())?;
            let train = generate_range(&d.scene, d.train_start(0), d.train_samples, common.exec())?;
            write_dataset(&common.out.join("val"), &d.scene, &val)?;
            write_dataset(&common.out.join("train"), &d.scene, &train)?;
            println!("wrote {} training and {} validation scenes", train.len(), val.len());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
