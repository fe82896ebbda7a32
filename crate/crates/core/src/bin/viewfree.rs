use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use viewfree::checkpoint::Checkpoint;
use viewfree::complexity::complexity;
use viewfree::config::TrainConfig;
use viewfree::data::io::{points_csv, read_cloud, write_atomic, write_pcf};
use viewfree::data::{generate_dataset, Dataset, DatasetSpec, FamilyName, Sample, Split};
use viewfree::eval::evaluate;
use viewfree::geometry::{normalize_unit_sphere, PointCloud, Provenance};
use viewfree::gradcheck;
use viewfree::loss::{LossKind, LossRegistry};
use viewfree::metrics::DEFAULT_TAU;
use viewfree::train::Trainer;
use viewfree::{Error, Result};

#[derive(Parser)]
#[command(name = "viewfree", version, about = "View-free multi-branch point cloud completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of shapes and partial scans.
    GenData(GenData),
    /// Train a model and write checkpoints.
    Train(Train),
    /// Score a checkpoint on a dataset split.
    Eval(Eval),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(Gradcheck),
    /// Parameter and FLOP counts for a configuration.
    Complexity(Complexity),
    /// Complete a single partial cloud.
    Complete(Complete),
    /// Write point clouds as CSV for plotting.
    ExportPlot(ExportPlot),
}

#[derive(Clone, Copy, ValueEnum)]
enum Fusion {
    Single,
    Double,
}

/// Settings shared by every command that builds a model.
#[derive(Args)]
struct ModelArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=4))]
    branches: Option<u8>,
    #[arg(long, value_enum)]
    fusion: Option<Fusion>,
    /// `set_abstraction_knn` or `graph_feature`.
    #[arg(long)]
    extractor: Option<String>,
    /// `query_cross_attention` or `transformer_upsampling`.
    #[arg(long)]
    decoder: Option<String>,
    /// `vanilla_cd` or `external:<name>`.
    #[arg(long)]
    loss: Option<String>,
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    shapes: usize,
    /// Ground-truth points per shape.
    #[arg(long, default_value_t = 256)]
    points: usize,
    #[arg(long, default_value_t = 0.5)]
    keep_ratio: f64,
    /// Comma-separated families to cycle through.
    #[arg(long, value_delimiter = ',')]
    families: Option<Vec<FamilyName>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    model: ModelArgs,
    /// Dataset directory or manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from this checkpoint; its configuration is used.
    #[arg(long, conflicts_with_all = ["config", "branches", "fusion", "extractor", "decoder", "loss", "seed"])]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    /// Checkpoint to evaluate. Required unless `--bypass` is given.
    #[arg(long, required_unless_present = "bypass")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: Split,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Score the ground truth against itself instead of a model.
    #[arg(long)]
    bypass: bool,
    /// Output directory for the metric files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random draws per operation.
    #[arg(long, default_value_t = gradcheck::DEFAULT_SEEDS)]
    seeds: usize,
    #[arg(long)]
    json: bool,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Complexity {
    #[command(flatten)]
    model: ModelArgs,
    /// Input size the FLOPs are traced at.
    #[arg(long)]
    input_points: Option<usize>,
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Complete {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Partial cloud, PCF1 or ASCII `x y z`.
    #[arg(long)]
    input: PathBuf,
    /// Output file; `.csv` writes CSV, anything else PCF1.
    #[arg(long)]
    out: PathBuf,
    /// Normalize the input to the unit sphere and map the result back.
    #[arg(long)]
    normalize: bool,
}

#[derive(Args)]
struct ExportPlot {
    /// Cloud files to include, labeled by file stem.
    #[arg(long)]
    input: Vec<PathBuf>,
    /// Dataset to take a sample from.
    #[arg(long, requires = "id")]
    data: Option<PathBuf>,
    /// Sample id within `--data`.
    #[arg(long, requires = "data")]
    id: Option<String>,
    /// Add the completion of the sample's partial scan.
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_named<T: DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Config(format!("unknown {what} {s:?}")))
}

impl ModelArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.branches {
            cfg.model.branches = b as usize;
        }
        if let Some(f) = self.fusion {
            cfg.model.fusion_mode = match f {
                Fusion::Single => viewfree::fusion::FusionMode::Single,
                Fusion::Double => viewfree::fusion::FusionMode::Double,
            };
        }
        if let Some(e) = &self.extractor {
            cfg.model.extractor = parse_named("extractor", e)?;
        }
        if let Some(d) = &self.decoder {
            cfg.model.decoder = parse_named("decoder", d)?;
        }
        if let Some(l) = &self.loss {
            cfg.loss = l.parse::<LossKind>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let mut spec = DatasetSpec {
        shapes: a.shapes,
        points: a.points,
        keep_ratio: a.keep_ratio,
        seed: a.seed,
        ..DatasetSpec::default()
    };
    if let Some(f) = a.families {
        spec.families = f;
    }
    let manifest = generate_dataset(&spec.shape_specs()?, spec.keep_ratio, &a.out)?;
    println!("wrote {} shapes to {}", manifest.shapes.len(), a.out.display());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let registry = LossRegistry::new();
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(&Checkpoint::load(p)?, &registry, p)?,
        None => Trainer::new(&a.model.resolve()?, &registry)?,
    };
    if let Some(e) = a.epochs {
        trainer.config.epochs = e;
        trainer.config.validate()?;
    }
    let data = a
        .data
        .clone()
        .or_else(|| trainer.config.data.clone())
        .ok_or_else(|| Error::Config("no dataset: pass --data or set `data` in the config".into()))?;
    let dataset = Dataset::load(&data)?;
    let samples = dataset.split(trainer.config.split);
    if samples.is_empty() {
        return Err(Error::Config(format!(
            "split {:?} of {} is empty",
            trainer.config.split,
            data.display()
        )));
    }
    write_atomic(&a.out.join("config.toml"), trainer.config.to_toml().as_bytes())?;
    eprintln!(
        "training {} parameters on {} samples for {} epochs",
        trainer.model.param_count(),
        samples.len(),
        trainer.config.epochs
    );
    let every = trainer.config.checkpoint_every;
    let out = a.out.clone();
    trainer.train(&samples, |t, entry| {
        println!("epoch {:>4}  mean_cd {:.6e}", entry.epoch, entry.mean_loss);
        if every > 0 && entry.epoch % every == 0 && entry.epoch < t.config.epochs {
            t.checkpoint()
                .save(&out.join(format!("epoch-{:04}.ckpt", entry.epoch)))?;
        }
        Ok(())
    })?;
    let mut log = String::from("epoch,mean_cd\n");
    for e in &trainer.log {
        log.push_str(&format!("{},{}\n", e.epoch, e.mean_loss));
    }
    write_atomic(&a.out.join("train_log.csv"), log.as_bytes())?;
    let path = a.out.join("model.ckpt");
    trainer.checkpoint().save(&path)?;
    eprintln!("saved {}", path.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<viewfree::model::Model> {
    Ok(Checkpoint::load(path)?.restore(path)?.0)
}

fn eval(a: Eval) -> Result<()> {
    let dataset = Dataset::load(&a.data)?;
    let samples = dataset.split(a.split);
    let model = match (&a.checkpoint, a.bypass) {
        (_, true) => None,
        (Some(p), false) => Some(load_model(p)?),
        (None, false) => unreachable!("clap requires a checkpoint"),
    };
    let ev = evaluate(model.as_ref(), &samples, a.tau)?;
    ev.write(&a.out)?;
    print!("{}", ev.report.to_csv());
    Ok(())
}

fn run_gradcheck(a: Gradcheck) -> Result<bool> {
    let report = gradcheck::run(a.seed, a.seeds);
    let text = if a.json { report.to_json() } else { report.to_text() };
    print!("{text}");
    if let Some(p) = &a.out {
        write_atomic(p, text.as_bytes())?;
    }
    Ok(report.all_passed())
}

fn run_complexity(a: Complexity) -> Result<()> {
    let cfg = a.model.resolve()?;
    let report = complexity(&cfg.model, a.input_points)?;
    let text = if a.json { report.to_json() } else { report.to_text() };
    print!("{text}");
    if let Some(p) = &a.out {
        write_atomic(p, text.as_bytes())?;
    }
    Ok(())
}

fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    if path.extension().is_some_and(|e| e == "csv") {
        write_atomic(path, points_csv(cloud.points()).as_bytes())
    } else {
        write_pcf(path, cloud.points())
    }
}

fn complete(a: Complete) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let input = read_cloud(&a.input, Provenance::Partial)?;
    let out = if a.normalize {
        let (mut norm, t) = normalize_unit_sphere(&input);
        norm.transform = Some(t);
        model.complete(&norm)?.denormalized()
    } else {
        model.complete(&input)?
    };
    write_cloud(&a.out, &out)?;
    eprintln!("wrote {} points to {}", out.len(), a.out.display());
    Ok(())
}

fn export_plot(a: ExportPlot) -> Result<()> {
    let mut layers: Vec<(String, PointCloud)> = Vec::new();
    for p in &a.input {
        let label = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        layers.push((label, read_cloud(p, Provenance::Synthetic)?));
    }
    if let (Some(data), Some(id)) = (&a.data, &a.id) {
        let ds = Dataset::load(data)?;
        let s: &Sample = ds
            .samples
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| Error::Config(format!("no sample {id:?} in {}", data.display())))?;
        layers.push(("partial".into(), s.partial.clone()));
        layers.push(("ground_truth".into(), s.gt.clone()));
        if let Some(c) = &a.checkpoint {
            layers.push(("completion".into(), load_model(c)?.complete(&s.partial)?));
        }
    }
    if layers.is_empty() {
        return Err(Error::Config(
            "nothing to export: pass --input or --data with --id".into(),
        ));
    }
    let mut csv = String::from("source,x,y,z\n");
    for (label, cloud) in &layers {
        for p in cloud.points() {
            csv.push_str(&format!("{label},{},{},{}\n", p[0], p[1], p[2]));
        }
    }
    write_atomic(&a.out, csv.as_bytes())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => match run_gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient check failed");
                return ExitCode::from(1);
            }
            Err(e) => Err(e),
        },
        Command::Complexity(a) => run_complexity(a),
        Command::Complete(a) => complete(a),
        Command::ExportPlot(a) => export_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
