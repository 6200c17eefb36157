use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tclp::eval::{evaluate, EvalMeta};
use tclp::harness::{run_ablation_matrix, run_concept_sweep, run_filtered, train, HarnessError, TrainConfig};
use tclp::losses::{objective_loss, LossBatch, LossError, Objective};
use tclp::model::{decode_checkpoint, load_checkpoint, random_unit_rows, CHECKPOINT_VERSION};
use tclp::numerics::{grad_check, kernels, GradCheckConfig, Graph, NumericsError, Tensor, Var};
use tclp::toyworld::{generate_dataset, read_dataset, write_dataset, Dataset, KindMix, PerturbationKind};

#[derive(Parser)]
#[command(name = "tclp", version, about = "Contrastive training with image and text hard negatives")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Training configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    strict_deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy dataset of positive pairs and hard negatives.
    GenData {
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 32)]
        image_hw: usize,
        /// Comma-separated perturbation kinds to draw from (default: all, uniformly).
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<String>,
        /// Drop the negative half of every example.
        #[arg(long)]
        positives_only: bool,
    },
    /// Train one objective under the configured pairs budget.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset with hard negatives.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train every objective under every seed and tabulate the results.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Keep the best-scoring fraction of a dataset under a reference model and train on it.
    Filter {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        keep: f64,
    },
    /// Compare clip on concept subsets with tripletclip on half of each.
    ConceptSweep {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<usize>,
    },
    /// Compare autodiff gradients of every objective with finite differences.
    GradCheck {
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
    },
    /// Print a checkpoint's header, metadata and tensor table.
    InspectCheckpoint {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(HarnessError),
}

impl<E: Into<HarnessError>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Run(e.into())
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Run(e) => e.exit_code() as u8,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("usage error: {m}"),
                Failure::Run(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn load_config(common: &Common) -> Result<TrainConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::from_json_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.strict_deterministic |= common.strict_deterministic;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<&Path, Failure> {
    common.out.as_deref().ok_or_else(|| Failure::Usage("--out <dir> is required".into()))
}

fn dataset(flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<Dataset, Failure> {
    let path = flag
        .as_ref()
        .or(configured.as_ref())
        .ok_or_else(|| Failure::Usage(format!("no {what} given (flag or config)")))?;
    Ok(read_dataset(path)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(HarnessError::from)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value).map_err(HarnessError::from)?).map_err(HarnessError::from)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = &cli.common;
    if common.strict_deterministic {
        kernels::set_intra_op_threads(1);
    }
    match &cli.command {
        Command::GenData { m, image_hw, kinds, positives_only } => {
            let mix = if kinds.is_empty() {
                KindMix::uniform()
            } else {
                let parsed = kinds
                    .iter()
                    .map(|k| PerturbationKind::from_name(k).ok_or_else(|| Failure::Usage(format!("unknown kind '{k}'"))))
                    .collect::<Result<Vec<_>, _>>()?;
                KindMix::only(&parsed)
            };
            let ds = generate_dataset(*m, common.seed.unwrap_or(0), &mix, *image_hw)?;
            let ds = if *positives_only { ds.positives_only() } else { ds };
            let out = out_dir(common)?;
            write_dataset(&ds, out)?;
            log::info!("wrote {} examples to {}", ds.len(), out.display());
        }
        Command::Train { data, eval_data } => {
            let cfg = load_config(common)?;
            let train_ds = dataset(data, &cfg.dataset, "training dataset")?;
            let eval_ds = match eval_data.as_ref().or(cfg.eval_dataset.as_ref()) {
                Some(p) => Some(read_dataset(p)?),
                None => None,
            };
            let out = out_dir(common)?;
            let (_, record) = train(&cfg, &train_ds, eval_ds.as_ref(), Some(out))?;
            println!(
                "{}",
                json!({
                    "objective": record.objective,
                    "steps": record.ledger.steps,
                    "pairs_seen": record.ledger.pairs_seen,
                    "final_checkpoint": record.final_checkpoint,
                })
            );
        }
        Command::Eval { checkpoint, data } => {
            let (model, meta) = load_checkpoint(checkpoint)?;
            let ds = read_dataset(data)?;
            let report = evaluate(
                &model,
                &ds,
                EvalMeta {
                    checkpoint_step: meta.step,
                    pairs_seen: meta.pairs_seen,
                    objective: meta.objective,
                    dataset: data.display().to_string(),
                },
            )?;
            match &common.out {
                Some(dir) => write_json(&dir.join("eval_report.json"), &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report).map_err(HarnessError::from)?),
            }
        }
        Command::Ablate { data, eval_data, seeds } => {
            let cfg = load_config(common)?;
            let train_ds = dataset(data, &cfg.dataset, "training dataset")?;
            let eval_ds = dataset(eval_data, &cfg.eval_dataset, "evaluation dataset")?;
            let out = out_dir(common)?;
            std::fs::create_dir_all(out).map_err(HarnessError::from)?;
            let table = run_ablation_matrix(&cfg, &Objective::ALL, seeds, &train_ds, &eval_ds, Some(out))?;
            print!("{}", table.render());
        }
        Command::Filter { data, eval_data, reference, keep } => {
            let cfg = load_config(common)?;
            let train_ds = dataset(data, &cfg.dataset, "training dataset")?;
            let eval_ds = dataset(eval_data, &cfg.eval_dataset, "evaluation dataset")?;
            let ref_path = reference
                .as_ref()
                .or(cfg.reference_checkpoint.as_ref())
                .ok_or_else(|| Failure::Usage("no reference checkpoint given (flag or config)".into()))?;
            let (reference, _) = load_checkpoint(ref_path)?;
            let out = out_dir(common)?;
            let run = run_filtered(&cfg, &train_ds, &eval_ds, &reference, *keep, Some(out))?;
            println!("{}", serde_json::to_string(&run.row).map_err(HarnessError::from)?);
        }
        Command::ConceptSweep { data, eval_data, targets } => {
            let cfg = load_config(common)?;
            let train_ds = dataset(data, &cfg.dataset, "training dataset")?;
            let eval_ds = dataset(eval_data, &cfg.eval_dataset, "evaluation dataset")?;
            let out = out_dir(common)?;
            std::fs::create_dir_all(out).map_err(HarnessError::from)?;
            let sweep = run_concept_sweep(&cfg, targets, &train_ds, &eval_ds, Some(out))?;
            for (i, t) in sweep.targets.iter().enumerate() {
                println!(
                    "concepts {t:2}: compositional clip {:.3} tripletclip {:.3}",
                    sweep.compositional[i][0], sweep.compositional[i][1]
                );
            }
        }
        Command::GradCheck { batch, dim } => grad_check_all(*batch, *dim, common.seed.unwrap_or(0))?,
        Command::InspectCheckpoint { checkpoint } => {
            let bytes = std::fs::read(checkpoint).map_err(HarnessError::from)?;
            let (model, meta) = decode_checkpoint(&bytes)?;
            let tensors: Vec<_> =
                model.params().iter().map(|(k, t)| json!({ "name": k, "shape": t.shape() })).collect();
            let summary = json!({
                "version": CHECKPOINT_VERSION,
                "bytes": bytes.len(),
                "encoder": model.config(),
                "train": meta,
                "param_count": model.param_count(),
                "tau": model.tau(),
                "tensors": tensors,
            });
            println!("{}", serde_json::to_string_pretty(&summary).map_err(HarnessError::from)?);
        }
    }
    Ok(())
}

fn grad_check_all(batch: usize, dim: usize, seed: u64) -> Result<(), Failure> {
    if batch == 0 || dim == 0 {
        return Err(Failure::Usage("--batch and --dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failed = Vec::new();
    for objective in Objective::ALL {
        let mut params: Vec<Tensor<f64>> = (0..4).map(|_| random_unit_rows(&mut rng, batch, dim).cast()).collect();
        params.push(Tensor::scalar(1.0 / 0.07));
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let b = LossBatch { img_pos: v[0], txt_pos: v[1], img_neg: Some(v[2]), txt_neg: Some(v[3]), logit_scale: v[4] };
            objective_loss(g, objective, &b).map_err(|e| match e {
                LossError::Numerics(n) => n,
                _ => NumericsError::InvalidHyper { what: "loss inputs" },
            })
        };
        let report = grad_check(f, &params, GradCheckConfig::f64_default())?;
        println!(
            "{objective:12} checked {:4} max rel error {:.3e} {}",
            report.checked,
            report.max_rel_error,
            if report.passed { "ok" } else { "FAIL" }
        );
        if !report.passed {
            failed.push(objective);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        let names: Vec<&str> = failed.iter().map(|o| o.name()).collect();
        Err(Failure::Run(HarnessError::GradientMismatch(names.join(", "))))
    }
}
