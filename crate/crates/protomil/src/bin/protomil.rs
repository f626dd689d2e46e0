//! Command-line entry point: dataset generation, training (with optional
//! cross-validation), evaluation, pruning, and explanation export.
//!
//! Exit codes: 0 success, 2 usage/config, 3 I/O, 4 numerical abort.
//! Config precedence: config file < command-line flags < PROTOMIL_* env vars.
//! Logs go to stderr; artifacts only to --out.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use protomil::checkpoint;
use protomil::data::{
    generate_digit_corpus, generate_mnist_bags, load_bag_dataset, make_cv_splits,
    save_bag_dataset, MnistBagsConfig, PixelEncoding,
};
use protomil::error::Error;
use protomil::eval::{compute_metrics, MetricReport};
use protomil::explain::{build_explanation, render_explanation};
use protomil::losses::LossConfig;
use protomil::mil::types::{Bag, EncoderArch, InstanceData};
use protomil::mil::{forward_bag, Model, ModelConfig};
use protomil::proto_ops::{prototype_neighbor_census, prune_prototypes, PruneConfig};
use protomil::train::{run_full_training, score_bags, OptimizerConfig, TrainSchedule};

#[derive(Parser)]
#[command(
    name = "protomil",
    version,
    about = "Prototype-based multiple-instance learning pipeline"
)]
struct Cli {
    /// Worker threads; only 1 (fully deterministic) is supported.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic stroke-digit corpus in IDX format.
    GenDigits(GenDigitsArgs),
    /// Generate an MNIST-Bags dataset manifest from an IDX digit source.
    GenMnistBags(GenBagsArgs),
    /// Train a model (optionally with a cross-validation harness).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and print a metric summary.
    Eval(EvalArgs),
    /// Prune prototypes by neighbor census, then fine-tune head/attention.
    Prune(PruneArgs),
    /// Export explanation matrices and heatmap composites for a bag.
    Explain(ExplainArgs),
}

#[derive(Args)]
struct GenDigitsArgs {
    /// Output directory for the IDX files.
    #[arg(long)]
    out: PathBuf,
    /// Images generated per digit class.
    #[arg(long, default_value_t = 500)]
    per_digit: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenBagsArgs {
    /// Directory containing IDX train image/label files.
    #[arg(long)]
    source: PathBuf,
    #[arg(long, default_value_t = 500)]
    num_bags: usize,
    #[arg(long, default_value_t = 100.0)]
    mean_size: f64,
    #[arg(long, default_value_t = 20.0)]
    std_size: f64,
    #[arg(long, default_value_t = 9)]
    positive_digit: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Store pixel instances as PNG instead of raw tensors.
    #[arg(long)]
    png: bool,
    /// Output manifest directory.
    #[arg(long)]
    out: PathBuf,
}

/// Optional overrides shared by the file config and the train/prune flags.
/// Unset values fall back to the declared defaults.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainOverrides {
    warmup_epochs: Option<usize>,
    finetune_epochs: Option<usize>,
    joint_epochs: Option<usize>,
    projection_every: Option<usize>,
    seed: Option<u64>,
    prototypes_per_class: Option<usize>,
    attention_hidden_dim: Option<usize>,
    encoder: Option<String>,
    lr_warmup: Option<f64>,
    warmup_gamma: Option<f64>,
    lr_finetune: Option<f64>,
    lr_joint: Option<f64>,
    joint_step_size: Option<usize>,
    joint_gamma: Option<f64>,
    weight_decay: Option<f64>,
    lambda1: Option<f64>,
    lambda2: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Bag-dataset manifest (file or directory).
    #[arg(long)]
    data: PathBuf,
    /// Optional JSON config file (lowest precedence).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoint, report and echoed config.
    #[arg(long)]
    out: PathBuf,
    /// Cross-validation folds (omit to train on the full dataset).
    #[arg(long)]
    folds: Option<usize>,
    /// Cross-validation repeats.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    joint_epochs: Option<usize>,
    #[arg(long)]
    projection_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    prototypes_per_class: Option<usize>,
    #[arg(long)]
    attention_hidden_dim: Option<usize>,
    /// Encoder architecture: small_conv | resnet18_conv | identity_passthrough.
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    lr_warmup: Option<f64>,
    #[arg(long)]
    warmup_gamma: Option<f64>,
    #[arg(long)]
    lr_finetune: Option<f64>,
    #[arg(long)]
    lr_joint: Option<f64>,
    #[arg(long)]
    joint_step_size: Option<usize>,
    #[arg(long)]
    joint_gamma: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Optional directory for metrics.json / metrics.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Neighbor count for the census.
    #[arg(long, default_value_t = 6)]
    k: usize,
    /// Maximum removal fraction.
    #[arg(long, default_value_t = 0.4)]
    l: f64,
    #[arg(long, default_value_t = 20)]
    finetune_epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lr_finetune: Option<f64>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Bag id to explain (defaults to every bag in the dataset).
    #[arg(long)]
    bag: Option<String>,
    #[arg(long, default_value_t = 5)]
    top_instances: usize,
    /// Neighbors per prototype in the gallery.
    #[arg(long, default_value_t = 3)]
    census_k: usize,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidInput(_) => 2,
        Error::NumericalAbort { .. } => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads != 1 {
        eprintln!("note: only --threads 1 is supported; running single-threaded");
    }
    let result = match cli.command {
        Command::GenDigits(a) => cmd_gen_digits(a),
        Command::GenMnistBags(a) => cmd_gen_mnist_bags(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Explain(a) => cmd_explain(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn cmd_gen_digits(a: GenDigitsArgs) -> Result<(), Error> {
    generate_digit_corpus(&a.out, a.per_digit, a.seed)?;
    eprintln!(
        "wrote {} digit images to {}",
        a.per_digit * 10,
        a.out.display()
    );
    Ok(())
}

fn cmd_gen_mnist_bags(a: GenBagsArgs) -> Result<(), Error> {
    let config = MnistBagsConfig {
        num_bags: a.num_bags,
        mean_size: a.mean_size,
        std_size: a.std_size,
        positive_digit: a.positive_digit,
        seed: a.seed,
        source: a.source,
    };
    let bags = generate_mnist_bags(&config)?;
    let encoding = if a.png {
        PixelEncoding::Png
    } else {
        PixelEncoding::RawTensor
    };
    save_bag_dataset(&a.out, &bags, encoding)?;
    echo_config(&a.out, &config)?;
    eprintln!("wrote {} bags to {}", bags.len(), a.out.display());
    Ok(())
}

fn echo_config<T: Serialize>(out: &Path, config: &T) -> Result<(), Error> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("config-echo.json");
    let json = serde_json::to_string_pretty(config)
        .map_err(|e| Error::Schema(format!("config echo: {e}")))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Apply precedence: file config < flags < PROTOMIL_* environment variables.
fn merge_overrides(args: &TrainArgs) -> Result<TrainOverrides, Error> {
    let mut merged = match &args.config {
        Some(path) => {
            let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<TrainOverrides>(&raw)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => TrainOverrides::default(),
    };
    macro_rules! flag {
        ($field:ident) => {
            if args.$field.is_some() {
                merged.$field = args.$field.clone();
            }
        };
    }
    flag!(warmup_epochs);
    flag!(finetune_epochs);
    flag!(joint_epochs);
    flag!(projection_every);
    flag!(seed);
    flag!(prototypes_per_class);
    flag!(attention_hidden_dim);
    flag!(encoder);
    flag!(lr_warmup);
    flag!(warmup_gamma);
    flag!(lr_finetune);
    flag!(lr_joint);
    flag!(joint_step_size);
    flag!(joint_gamma);
    flag!(weight_decay);
    flag!(lambda1);
    flag!(lambda2);
    macro_rules! env_var {
        ($field:ident, $name:literal, $ty:ty) => {
            if let Ok(v) = std::env::var($name) {
                merged.$field = Some(<$ty>::from_str(&v).map_err(|e| {
                    Error::Config(format!("{}={v}: {e}", $name))
                })?);
            }
        };
    }
    env_var!(warmup_epochs, "PROTOMIL_WARMUP_EPOCHS", usize);
    env_var!(finetune_epochs, "PROTOMIL_FINETUNE_EPOCHS", usize);
    env_var!(joint_epochs, "PROTOMIL_JOINT_EPOCHS", usize);
    env_var!(projection_every, "PROTOMIL_PROJECTION_EVERY", usize);
    env_var!(seed, "PROTOMIL_SEED", u64);
    env_var!(prototypes_per_class, "PROTOMIL_PROTOTYPES_PER_CLASS", usize);
    env_var!(attention_hidden_dim, "PROTOMIL_ATTENTION_HIDDEN_DIM", usize);
    env_var!(encoder, "PROTOMIL_ENCODER", String);
    env_var!(lr_warmup, "PROTOMIL_LR_WARMUP", f64);
    env_var!(warmup_gamma, "PROTOMIL_WARMUP_GAMMA", f64);
    env_var!(lr_finetune, "PROTOMIL_LR_FINETUNE", f64);
    env_var!(lr_joint, "PROTOMIL_LR_JOINT", f64);
    env_var!(joint_step_size, "PROTOMIL_JOINT_STEP_SIZE", usize);
    env_var!(joint_gamma, "PROTOMIL_JOINT_GAMMA", f64);
    env_var!(weight_decay, "PROTOMIL_WEIGHT_DECAY", f64);
    env_var!(lambda1, "PROTOMIL_LAMBDA1", f64);
    env_var!(lambda2, "PROTOMIL_LAMBDA2", f64);
    Ok(merged)
}

struct ResolvedTrain {
    model_config: ModelConfig,
    schedule: TrainSchedule,
    opt: OptimizerConfig,
    loss: LossConfig,
}

fn resolve_train(o: &TrainOverrides, bags: &[Bag]) -> Result<ResolvedTrain, Error> {
    let pixel_modality = matches!(bags[0].instances[0].data, InstanceData::Pixels(_));
    let mut model_config = if pixel_modality {
        ModelConfig::mnist_default()
    } else {
        let dim = match &bags[0].instances[0].data {
            InstanceData::Embedding(e) => e.len(),
            _ => unreachable!(),
        };
        ModelConfig::embedding_default(dim)
    };
    if let Some(name) = &o.encoder {
        model_config.encoder.architecture = match name.as_str() {
            "small_conv" => EncoderArch::SmallConv,
            "resnet18_conv" => EncoderArch::Resnet18Conv,
            "identity_passthrough" => EncoderArch::IdentityPassthrough,
            other => return Err(Error::Config(format!("unknown encoder '{other}'"))),
        };
    }
    if let Some(n) = o.prototypes_per_class {
        model_config.prototypes_per_class = n;
    }
    if let Some(n) = o.attention_hidden_dim {
        model_config.attention_hidden_dim = n;
    }
    model_config.validate()?;

    let mut schedule = TrainSchedule::new(30, 20, 10, o.seed.unwrap_or(0));
    if let Some(v) = o.warmup_epochs {
        schedule.warmup_epochs = v;
    }
    if let Some(v) = o.finetune_epochs {
        schedule.finetune_epochs = v;
    }
    if let Some(v) = o.joint_epochs {
        schedule.joint_epochs = v;
    }
    if let Some(v) = o.projection_every {
        schedule.projection_every = v;
    }
    schedule.validate()?;

    let mut opt = OptimizerConfig::default();
    if let Some(v) = o.lr_warmup {
        opt.lr_warmup = v;
    }
    if let Some(v) = o.warmup_gamma {
        opt.warmup_gamma = v;
    }
    if let Some(v) = o.lr_finetune {
        opt.lr_finetune = v;
    }
    if let Some(v) = o.lr_joint {
        opt.lr_joint = v;
    }
    if let Some(v) = o.joint_step_size {
        opt.joint_step_size = v;
    }
    if let Some(v) = o.joint_gamma {
        opt.joint_gamma = v;
    }
    if let Some(v) = o.weight_decay {
        opt.weight_decay = v;
    }
    opt.validate()?;

    let mut loss = LossConfig::default();
    if let Some(v) = o.lambda1 {
        loss.lambda1 = v;
    }
    if let Some(v) = o.lambda2 {
        loss.lambda2 = v;
    }
    loss.validate()?;
    Ok(ResolvedTrain {
        model_config,
        schedule,
        opt,
        loss,
    })
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let overrides = merge_overrides(&args)?;
    let bags = load_bag_dataset(&args.data)?;
    let resolved = resolve_train(&overrides, &bags)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    echo_config(&args.out, &overrides)?;

    if let Some(folds) = args.folds {
        let splits = make_cv_splits(&bags, folds, args.repeats, resolved.schedule.seed)?;
        let mut per_fold = Vec::new();
        for split in &splits {
            for fold in 0..split.num_folds {
                let train: Vec<Bag> = split
                    .train_indices(&bags, fold)
                    .into_iter()
                    .map(|i| bags[i].clone())
                    .collect();
                let test: Vec<Bag> = split
                    .test_indices(&bags, fold)
                    .into_iter()
                    .map(|i| bags[i].clone())
                    .collect();
                let mut model =
                    Model::init(resolved.model_config.clone(), resolved.schedule.seed)?;
                run_full_training(
                    &mut model,
                    &train,
                    &resolved.schedule,
                    &resolved.opt,
                    &resolved.loss,
                )?;
                let metrics = compute_metrics(&score_bags(&model, &test)?)?;
                eprintln!(
                    "repeat {} fold {}: accuracy {:.4} auc {:?}",
                    split.repeat, fold, metrics.accuracy, metrics.auc
                );
                per_fold.push(metrics);
            }
        }
        let report = MetricReport::from_folds(per_fold)?;
        report.save_json(&args.out.join("metrics.json"))?;
        report.save_csv(&args.out.join("metrics.csv"))?;
        eprintln!("{}", report.summary_table());
        return Ok(());
    }

    let mut model = Model::init(resolved.model_config.clone(), resolved.schedule.seed)?;
    let report = run_full_training(
        &mut model,
        &bags,
        &resolved.schedule,
        &resolved.opt,
        &resolved.loss,
    )?;
    report.save_jsonl(&args.out.join("train-report.jsonl"))?;
    let ckpt = args.out.join("checkpoint");
    checkpoint::save(&model, &ckpt)?;
    let metrics = compute_metrics(&score_bags(&model, &bags)?)?;
    eprintln!(
        "training metrics: accuracy {:.4} auc {:?}",
        metrics.accuracy, metrics.auc
    );
    eprintln!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let model = checkpoint::load(&args.checkpoint)?;
    let bags = load_bag_dataset(&args.data)?;
    let metrics = compute_metrics(&score_bags(&model, &bags)?)?;
    let report = MetricReport::from_folds(vec![metrics])?;
    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        report.save_json(&out.join("metrics.json"))?;
        report.save_csv(&out.join("metrics.csv"))?;
    }
    println!("{}", report.summary_table());
    Ok(())
}

fn cmd_prune(args: PruneArgs) -> Result<(), Error> {
    let mut model = checkpoint::load(&args.checkpoint)?;
    let bags = load_bag_dataset(&args.data)?;
    let config = PruneConfig {
        k_neighbors: args.k,
        max_removal_fraction: args.l,
        finetune_epochs: args.finetune_epochs,
    };
    let mut opt = OptimizerConfig::default();
    if let Some(v) = args.lr_finetune {
        opt.lr_finetune = v;
    }
    let report = prune_prototypes(&mut model, &bags, &config, &opt, args.seed)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    echo_config(&args.out, &config)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Schema(format!("prune report: {e}")))?;
    let report_path = args.out.join("prune-report.json");
    fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;
    checkpoint::save(&model, &args.out.join("checkpoint"))?;
    eprintln!(
        "pruned {} of {} prototypes (r = {:?}); report at {}",
        report.removed_indices.len(),
        report.active_before,
        report.chosen_r,
        report_path.display()
    );
    Ok(())
}

fn cmd_explain(args: ExplainArgs) -> Result<(), Error> {
    let model = checkpoint::load(&args.checkpoint)?;
    let bags = load_bag_dataset(&args.data)?;
    let census = prototype_neighbor_census(&model, &bags, args.census_k)?;
    let selected: Vec<&Bag> = match &args.bag {
        Some(id) => {
            let bag = bags
                .iter()
                .find(|b| &b.id == id)
                .ok_or_else(|| Error::InvalidInput(format!("no bag with id '{id}'")))?;
            vec![bag]
        }
        None => bags.iter().collect(),
    };
    for bag in selected {
        let (trace, _) = forward_bag(&model, bag)?;
        let matrix = build_explanation(&trace, bag, &model, &census, args.top_instances)?;
        match render_explanation(&matrix, &args.out) {
            Ok((png, _)) => eprintln!("wrote {}", png.display()),
            Err(Error::InvalidInput(msg)) => {
                // Embedding-modality bags have no raster; JSON twin exists.
                eprintln!("bag {}: {msg}", bag.id);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}
