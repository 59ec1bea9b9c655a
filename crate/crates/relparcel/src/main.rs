//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or config error,
//! 3 failed gradient check.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use relparcel::checkpoint;
use relparcel::config::RunConfig;
use relparcel::data::{self, io as data_io, LabeledImage, SceneRecipe};
use relparcel::error::{Error, Result};
use relparcel::tensor::op_gradient_suite;
use relparcel::train::{self, binarize, split_train_val};
use relparcel::viz;

/// Environment variable overriding every seed source.
const SEED_ENV: &str = "RELPARCEL_SEED";

#[derive(Parser)]
#[command(
    name = "relparcel",
    about = "Multi-label classifier with label-wise attentional parcels and pairwise relation reasoning",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SeedArg {
    /// Master seed; RELPARCEL_SEED overrides it when set.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset.
    GenData {
        /// Number of images.
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Image side length in pixels.
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Train a model on a dataset directory.
    Train {
        /// Dataset directory from gen-data.
        #[arg(long)]
        data: PathBuf,
        /// TOML config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory for checkpoint, history, and config snapshot.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Portion of the dataset: all, train, or val (the checkpoint's
        /// own split).
        #[arg(long, default_value = "all")]
        split: String,
    },
    /// Print per-image label predictions.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Write predictions here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export attention corners, relation matrices, and parcel heatmaps.
    Visualize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of images to export, from the start of the dataset.
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
    /// Run the gradient oracle over every op and the composed network.
    GradCheck {
        #[command(flatten)]
        seed: SeedArg,
    },
}

fn resolve_seed(arg: &SeedArg, config_seed: Option<u64>) -> Result<u64> {
    if let Ok(text) = std::env::var(SEED_ENV) {
        return text
            .parse()
            .map_err(|_| Error::config(format!("{SEED_ENV}={text} is not an integer")));
    }
    Ok(arg.seed.or(config_seed).unwrap_or(0))
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_gen_data(n: usize, size: usize, out: &Path, seed: u64) -> Result<()> {
    let recipe = SceneRecipe::default_recipe().scaled_to(size);
    let dataset = data::generate_dataset(&recipe, n, seed)?;
    data_io::save_dataset(out, &dataset, &recipe)?;
    println!(
        "wrote {} images of {}x{} with {} labels to {}",
        dataset.len(),
        size,
        size,
        recipe.num_labels(),
        out.display()
    );
    Ok(())
}

fn cmd_train(data: &Path, config: Option<&Path>, out: &Path, seed_arg: &SeedArg) -> Result<()> {
    let (dataset, names, _) = data_io::load_dataset(data)?;
    let mut cfg = match config {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            if cfg.model.num_labels != names.len() {
                return Err(Error::config(format!(
                    "config expects {} labels but the dataset has {}",
                    cfg.model.num_labels,
                    names.len()
                )));
            }
            if cfg.backbone.input_size != dataset[0].size {
                return Err(Error::config(format!(
                    "config expects {0}x{0} images but the dataset has {1}x{1}",
                    cfg.backbone.input_size, dataset[0].size
                )));
            }
            cfg
        }
        None => {
            // no file to keep consistent with: adopt the dataset's shape
            let mut cfg = RunConfig::default();
            cfg.model.num_labels = names.len();
            cfg.backbone.input_size = dataset[0].size;
            cfg.validate()?;
            cfg
        }
    };
    let seed = resolve_seed(seed_arg, Some(cfg.train.seed))?;
    cfg.train.seed = seed;

    let outcome = train::train(&cfg, &dataset, seed)?;
    std::fs::create_dir_all(out)?;
    checkpoint::save(
        &out.join("model.ckpt"),
        &cfg,
        &outcome.model,
        &outcome.optimizer,
        outcome.state.history.len() as u64,
    )?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    let mut history = String::from("epoch,train_loss,val_loss,lr,val_mean_f1\n");
    for row in &outcome.state.history {
        history.push_str(&format!(
            "{},{},{},{},{}\n",
            row.epoch, row.train_loss, row.val_loss, row.lr, row.val_f1
        ));
    }
    std::fs::write(out.join("history.csv"), history)?;

    let last = outcome.state.history.last().expect("at least one epoch");
    println!(
        "trained {} epochs{}; train loss {:.6}, val loss {:.6}, val F1 {:.4}",
        outcome.state.history.len(),
        if outcome.state.stopped_early { " (stopped early)" } else { "" },
        last.train_loss,
        last.val_loss,
        last.val_f1
    );
    println!("checkpoint: {}", out.join("model.ckpt").display());
    Ok(())
}

/// Restrict a dataset to the checkpoint's own train or val rows.
fn select_split<'a>(
    dataset: &'a [LabeledImage],
    cfg: &RunConfig,
    split: &str,
) -> Result<Vec<&'a LabeledImage>> {
    match split {
        "all" => Ok(dataset.iter().collect()),
        "train" | "val" => {
            let (train_idx, val_idx) =
                split_train_val(dataset.len(), cfg.train.val_fraction, cfg.train.seed)?;
            let idx = if split == "train" { train_idx } else { val_idx };
            Ok(idx.into_iter().map(|i| &dataset[i]).collect())
        }
        other => Err(Error::config(format!(
            "unknown split `{other}`; use all, train, or val"
        ))),
    }
}

fn load_model_for(
    data: &Path,
    ckpt: &Path,
) -> Result<(Vec<LabeledImage>, Vec<String>, checkpoint::Checkpoint)> {
    let (dataset, names, _) = data_io::load_dataset(data)?;
    let loaded = checkpoint::load(ckpt)?;
    if loaded.config.model.num_labels != names.len() {
        return Err(Error::data(format!(
            "checkpoint was trained with {} labels but the dataset has {}",
            loaded.config.model.num_labels,
            names.len()
        )));
    }
    if loaded.config.backbone.input_size != dataset[0].size {
        return Err(Error::data(format!(
            "checkpoint expects {0}x{0} images but the dataset has {1}x{1}",
            loaded.config.backbone.input_size, dataset[0].size
        )));
    }
    Ok((dataset, names, loaded))
}

fn cmd_eval(data: &Path, ckpt: &Path, out: &Option<PathBuf>, split: &str) -> Result<()> {
    let (dataset, names, loaded) = load_model_for(data, ckpt)?;
    let examples = select_split(&dataset, &loaded.config, split)?;
    let (loss, report) =
        train::evaluate(&loaded.model, &examples, loaded.config.train.threshold)?;
    let mut text = format!("split: {split}\n");
    text.push_str(&report.render(&names));
    text.push_str(&format!("mean_bce: {loss}\n"));
    emit(out, &text)
}

fn cmd_predict(data: &Path, ckpt: &Path, out: &Option<PathBuf>) -> Result<()> {
    let (dataset, names, loaded) = load_model_for(data, ckpt)?;
    let refs: Vec<&LabeledImage> = dataset.iter().collect();
    let probs = train::predict_all(&loaded.model, &refs)?;
    let mut text = String::from("image,predicted\n");
    for (img, p) in dataset.iter().zip(&probs) {
        let pred = binarize(p, loaded.config.train.threshold);
        let labels: Vec<&str> = names
            .iter()
            .enumerate()
            .filter(|(i, _)| pred.get(*i))
            .map(|(_, n)| n.as_str())
            .collect();
        text.push_str(&format!("{},{}\n", img.id, labels.join(";")));
    }
    emit(out, &text)
}

fn cmd_visualize(data: &Path, ckpt: &Path, out: &Path, limit: usize) -> Result<()> {
    let (dataset, names, loaded) = load_model_for(data, ckpt)?;
    let refs: Vec<&LabeledImage> = dataset.iter().take(limit).collect();
    viz::export_visualizations(&loaded.model, &refs, &names, out)?;
    println!("exported {} images to {}", refs.len(), out.display());
    Ok(())
}

fn cmd_grad_check(seed: u64) -> Result<bool> {
    let mut worst: f64 = 0.0;
    for r in op_gradient_suite(seed) {
        println!("{:<24} {:.3e}", r.name, r.error);
        worst = worst.max(r.error);
    }
    let full = relparcel::model::full_network_grad_check(seed)?;
    println!("{:<24} {:.3e}", "full_network", full);
    worst = worst.max(full);
    println!("max relative error: {worst:.3e}");
    Ok(worst <= 1e-4)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { n, size, out, seed } => {
            let seed = resolve_seed(&seed, None)?;
            cmd_gen_data(n, size, &out, seed)?;
        }
        Command::Train { data, config, out, seed } => {
            cmd_train(&data, config.as_deref(), &out, &seed)?;
        }
        Command::Eval { data, ckpt, out, split } => {
            cmd_eval(&data, &ckpt, &out, &split)?;
        }
        Command::Predict { data, ckpt, out } => {
            cmd_predict(&data, &ckpt, &out)?;
        }
        Command::Visualize { data, ckpt, out, limit } => {
            cmd_visualize(&data, &ckpt, &out, limit)?;
        }
        Command::GradCheck { seed } => {
            let seed = resolve_seed(&seed, Some(1))?;
            if !cmd_grad_check(seed)? {
                eprintln!("gradient check FAILED");
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap routes --help and --version through the error path
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
