//! `clusterprune`: train with the cluster loss, prune, fine-tune, evaluate
//! and compare filter selection criteria from one JSON config file.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use clusterprune::cluster::ClusterSpec;
use clusterprune::data::Dataset;
use clusterprune::experiment::{
    run_compare, select_filters, CompareOutcome, Criterion, ExperimentConfig, ExperimentError, Manifest,
};
use clusterprune::graph::{load_checkpoint, save_checkpoint, save_model};
use clusterprune::prune::{make_report, prune_and_merge, KeptFilter, PruneReport};
use clusterprune::train::{evaluate, finetune, train, LrSchedule, RunMetrics};
use clusterprune::ModelGraph;

type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Parser)]
#[command(name = "clusterprune", version, about = "Cluster-regularized filter pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the default desk-scale config to a file.
    Init { path: PathBuf },
    /// Train a model, with the cluster loss unless --plain is given.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train without the cluster loss.
        #[arg(long)]
        plain: bool,
    },
    /// Remove filters from a trained model under the configured criterion.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Train a pruned model further without the cluster loss.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Report top-1 accuracy of a model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Run the criterion x pruned-ratio grid over several seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Seeds, comma separated.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Uniform pruned ratios of the grid, comma separated.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        /// Criteria of the grid, comma separated.
        #[arg(long, value_delimiter = ',', value_parser = parse_criterion)]
        criteria: Option<Vec<Criterion>>,
    },
    /// Print a prune report CSV, a compare CSV or a compare directory.
    Report {
        path: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KeptArg {
    AsTrained,
    Centroid,
}

fn parse_criterion(s: &str) -> std::result::Result<Criterion, String> {
    s.parse()
}

/// Config file plus flags overriding its scalar fields.
#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for initialization, shuffling and random selection.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    finetune_lr: Option<f64>,
    /// Per-layer pruned ratios, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "p")]
    ratios: Option<Vec<f64>>,
    /// One pruned ratio for every prunable layer.
    #[arg(long)]
    p: Option<f64>,
    #[arg(long, value_parser = parse_criterion)]
    criterion: Option<Criterion>,
    #[arg(long, value_enum)]
    kept: Option<KeptArg>,
    #[arg(long)]
    apoz_samples: Option<usize>,
}

/// Keeps the schedule's shape: a stepped schedule is re-spread over the new
/// epoch count, a constant one stays constant.
fn reschedule(old: &LrSchedule, initial: f64, epochs: usize) -> LrSchedule {
    if old.steps.is_empty() {
        LrSchedule::constant(initial)
    } else {
        LrSchedule::step_fifths(initial, epochs)
    }
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        let t = &mut cfg.train;
        t.lambda = self.lambda.unwrap_or(t.lambda);
        t.weight_decay = self.weight_decay.unwrap_or(t.weight_decay);
        t.momentum = self.momentum.unwrap_or(t.momentum);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        if self.epochs.is_some() || self.lr.is_some() {
            t.epochs = self.epochs.unwrap_or(t.epochs);
            t.lr = reschedule(&t.lr, self.lr.unwrap_or(t.lr.initial), t.epochs);
        }
        let f = &mut cfg.finetune;
        f.weight_decay = self.weight_decay.unwrap_or(f.weight_decay);
        f.momentum = self.momentum.unwrap_or(f.momentum);
        f.batch_size = self.batch_size.unwrap_or(f.batch_size);
        if self.finetune_epochs.is_some() || self.finetune_lr.is_some() {
            f.epochs = self.finetune_epochs.unwrap_or(f.epochs);
            f.lr = reschedule(&f.lr, self.finetune_lr.unwrap_or(f.lr.initial), f.epochs);
        }
        if let Some(r) = &self.ratios {
            cfg.ratios = r.clone();
        }
        if let Some(c) = self.criterion {
            cfg.criterion = c;
        }
        if let Some(k) = self.kept {
            cfg.kept_filter = match k {
                KeptArg::AsTrained => KeptFilter::AsTrained,
                KeptArg::Centroid => KeptFilter::Centroid,
            };
        }
        if self.apoz_samples.is_some() {
            cfg.apoz_samples = self.apoz_samples;
        }
        if let Some(p) = self.p {
            // widened to the model's prunable layer count once it is known
            cfg.ratios = vec![p];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn fit_ratios(&self, cfg: &mut ExperimentConfig, model: &ModelGraph) {
        if let Some(p) = self.p {
            cfg.ratios = vec![p; model.prunable_layers().len()];
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(io(&dir))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(io(path))
}

fn write_metrics(path: &Path, metrics: &RunMetrics) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io(path))?;
    metrics.write_csv(file)?;
    Ok(())
}

/// Writes `manifest_<command>.json` covering `outputs`.
fn finish(command: &str, cfg: &ExperimentConfig, seeds: Vec<u64>, dir: &Path, mut outputs: Vec<PathBuf>) -> Result<()> {
    // the model sidecars are outputs too
    let sidecars: Vec<PathBuf> = outputs
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == "clp"))
        .map(|p| clusterprune::graph::sidecar_path(p))
        .collect();
    outputs.extend(sidecars);
    let manifest = Manifest::new(command, cfg, seeds, dir, &outputs)?;
    let path = dir.join(format!("manifest_{command}.json"));
    write_json(&path, &manifest)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn check_input(model: &ModelGraph, data: &Dataset) -> Result<()> {
    if model.input_shape() != data.image_shape() {
        return Err(ExperimentError::Config {
            field: "data".into(),
            detail: format!(
                "dataset images {:?} do not fit the model input {:?}",
                data.image_shape(),
                model.input_shape()
            ),
        });
    }
    Ok(())
}

fn cmd_train(common: &Common, plain: bool) -> Result<()> {
    let mut cfg = common.load()?;
    let (train_set, test_set) = cfg.data.load()?;
    let seed = cfg.train.seed;
    let init = cfg.init_model(&train_set, seed)?;
    common.fit_ratios(&mut cfg, &init);
    let spec = if plain {
        None
    } else {
        Some(ClusterSpec::for_model(&init, &cfg.layer_ratios(&init)?)?)
    };
    eprintln!(
        "training {} epochs on {} samples{}",
        cfg.train.epochs,
        train_set.len(),
        if plain { "" } else { " with the cluster loss" }
    );
    let (model, metrics) = train(&init, &train_set, Some(&test_set), spec.as_ref(), &cfg.train)?;
    let dir = out_dir(&cfg)?;
    let model_path = dir.join("model.clp");
    save_checkpoint(&model, spec.as_ref(), &model_path)?;
    let metrics_path = dir.join("train_metrics.csv");
    write_metrics(&metrics_path, &metrics)?;
    println!("{}", metrics.summary());
    finish("train", &cfg, vec![seed], &dir, vec![model_path, metrics_path])
}

fn cmd_prune(common: &Common, model_path: &Path) -> Result<()> {
    let mut cfg = common.load()?;
    let (model, stored) = load_checkpoint(model_path)?;
    common.fit_ratios(&mut cfg, &model);
    let (train_set, test_set) = cfg.data.load()?;
    check_input(&model, &test_set)?;
    let ratios = cfg.layer_ratios(&model)?;
    // a checkpoint trained with the cluster loss carries its own clusters
    let spec = match (cfg.criterion, stored) {
        (Criterion::Cluster, Some(s)) => Some(s),
        _ => None,
    };
    let decision = select_filters(
        cfg.criterion,
        &model,
        &ratios,
        spec.as_ref(),
        &cfg.apoz_sample(&train_set),
        cfg.train.seed,
        0,
    )?;
    let pruned = prune_and_merge(&model, &decision, cfg.kept_filter)?;
    let report = make_report(&model, &pruned, &decision)?;
    let before = evaluate(&model, &test_set)?;
    let after = evaluate(&pruned, &test_set)?;

    let dir = out_dir(&cfg)?;
    let pruned_path = dir.join("pruned.clp");
    save_model(&pruned, &pruned_path)?;
    let decision_path = dir.join("decision.json");
    write_json(&decision_path, &decision)?;
    let report_csv = dir.join("prune_report.csv");
    report.write_csv(std::fs::File::create(&report_csv).map_err(io(&report_csv))?)?;
    let report_txt = dir.join("prune_report.txt");
    let text = format!(
        "{}criterion {}: test accuracy {before:.4} -> {after:.4} before fine-tuning\n",
        report.render_text(),
        cfg.criterion
    );
    std::fs::write(&report_txt, &text).map_err(io(&report_txt))?;
    print!("{text}");
    finish(
        "prune",
        &cfg,
        vec![cfg.train.seed],
        &dir,
        vec![pruned_path, decision_path, report_csv, report_txt],
    )
}

fn cmd_finetune(common: &Common, model_path: &Path) -> Result<()> {
    let cfg = common.load()?;
    let (model, _) = load_checkpoint(model_path)?;
    let (train_set, test_set) = cfg.data.load()?;
    check_input(&model, &train_set)?;
    let (tuned, metrics) = finetune(&model, &train_set, Some(&test_set), &cfg.finetune)?;
    let dir = out_dir(&cfg)?;
    let path = dir.join("finetuned.clp");
    save_model(&tuned, &path)?;
    let metrics_path = dir.join("finetune_metrics.csv");
    write_metrics(&metrics_path, &metrics)?;
    println!("{}", metrics.summary());
    finish("finetune", &cfg, vec![cfg.finetune.seed], &dir, vec![path, metrics_path])
}

#[derive(Serialize)]
struct EvalResult<'a> {
    model: &'a Path,
    split: &'a str,
    samples: usize,
    accuracy: f64,
}

fn cmd_eval(common: &Common, model_path: &Path, split: SplitArg) -> Result<()> {
    let cfg = common.load()?;
    let (model, _) = load_checkpoint(model_path)?;
    let (train_set, test_set) = cfg.data.load()?;
    let (name, data) = match split {
        SplitArg::Train => ("train", &train_set),
        SplitArg::Test => ("test", &test_set),
    };
    check_input(&model, data)?;
    let accuracy = evaluate(&model, data)?;
    println!("{name} accuracy {accuracy:.4} over {} samples", data.len());
    let dir = out_dir(&cfg)?;
    let path = dir.join("eval.json");
    write_json(
        &path,
        &EvalResult {
            model: model_path,
            split: name,
            samples: data.len(),
            accuracy,
        },
    )?;
    finish("eval", &cfg, vec![cfg.train.seed], &dir, vec![path])
}

fn cmd_compare(
    common: &Common,
    seeds: &Option<Vec<u64>>,
    grid: &Option<Vec<f64>>,
    criteria: &Option<Vec<Criterion>>,
) -> Result<()> {
    let mut cfg = common.load()?;
    if let Some(s) = seeds {
        cfg.compare.seeds = s.clone();
    }
    if let Some(g) = grid {
        cfg.compare.ratios = g.clone();
    }
    if let Some(c) = criteria {
        cfg.compare.criteria = c.clone();
    }
    cfg.validate()?;
    let (train_set, test_set) = cfg.data.load()?;
    let outcome = run_compare(&cfg, &train_set, &test_set, |line| eprintln!("{line}"))?;
    let dir = out_dir(&cfg)?;
    let written = outcome.write(&dir)?;
    print!("{}", outcome.render_text());
    finish("compare", &cfg, cfg.compare.seeds.clone(), &dir, written)
}

fn cmd_report(path: &Path, format: Format) -> Result<()> {
    let file = if path.is_dir() { path.join("compare.csv") } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).map_err(io(&file))?;
    let header = text.lines().next().unwrap_or_default();
    if matches!(format, Format::Csv) {
        print!("{text}");
        return Ok(());
    }
    if header.starts_with("layer,") {
        let layers = PruneReport::read_csv(text.as_bytes())?;
        print!("{}", PruneReport::from_layers(layers).render_text());
    } else if header.starts_with("criterion,") {
        print!("{}", CompareOutcome::from_rows(CompareOutcome::read_rows(&file)?).render_text());
    } else {
        return Err(ExperimentError::Config {
            field: "path".into(),
            detail: format!("{} is neither a prune report nor a compare table", file.display()),
        });
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Init { path } => {
            ExperimentConfig::default().save(path)?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        Command::Train { common, plain } => cmd_train(common, *plain),
        Command::Prune { common, model } => cmd_prune(common, model),
        Command::Finetune { common, model } => cmd_finetune(common, model),
        Command::Eval { common, model, split } => cmd_eval(common, model, *split),
        Command::Compare {
            common,
            seeds,
            grid,
            criteria,
        } => cmd_compare(common, seeds, grid, criteria),
        Command::Report { path, format } => cmd_report(path, *format),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
