//! Experiment configuration and the pipeline steps shared by the command
//! line tool: building the model, selecting filters under a named criterion,
//! and the criterion-by-ratio comparison grid.

mod compare;
mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{self, ClusterError, ClusterSpec, LayerRatios};
use crate::data::{self, DataError, Dataset, Split, SynthConfig};
use crate::graph::{GraphError, ModelGraph};
use crate::models::Architecture;
use crate::prune::{self, KeptFilter, PruneDecision, PruneError};
use crate::rng::Rng;
use crate::tensor::TensorError;
use crate::train::{LrSchedule, TrainConfig, TrainError};

pub use compare::{run_compare, AggregateRow, CellResult, CompareOutcome, CompareSummary, PairwiseCheck};
pub use manifest::{config_hash, sha256_file, Manifest, OutputDigest};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config field `{field}`: {detail}")]
    Config { field: String, detail: String },
    #[error("config: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn config_err<T>(field: &str, detail: impl Into<String>) -> Result<T> {
    Err(ExperimentError::Config {
        field: field.to_string(),
        detail: detail.into(),
    })
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn graph_non_finite(e: &GraphError) -> bool {
    matches!(
        e,
        GraphError::Tensor(TensorError::NonFinite { .. })
            | GraphError::AtLayer {
                source: TensorError::NonFinite { .. },
                ..
            }
    )
}

impl ExperimentError {
    /// True for failures caused by numbers going bad rather than by inputs.
    pub fn is_numeric(&self) -> bool {
        match self {
            ExperimentError::Train(TrainError::Diverged { .. }) => true,
            ExperimentError::Train(TrainError::Graph(g))
            | ExperimentError::Graph(g)
            | ExperimentError::Prune(PruneError::Graph(g)) => graph_non_finite(g),
            _ => false,
        }
    }

    /// Process exit status: 1 for configuration problems, 3 for numeric
    /// failures, 2 for everything concerning inputs and files.
    pub fn exit_code(&self) -> i32 {
        if self.is_numeric() {
            return 3;
        }
        match self {
            ExperimentError::Config { .. } | ExperimentError::Json(_) => 1,
            ExperimentError::Cluster(_) | ExperimentError::Prune(PruneError::Cluster(_)) => 1,
            ExperimentError::Train(TrainError::Config(_)) => 1,
            _ => 2,
        }
    }
}

/// Filter selection rule, plus `scratch` for training the pruned
/// architecture from a fresh initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    Cluster,
    WeightSum,
    Apoz,
    Random,
    Scratch,
}

impl Criterion {
    pub const ALL: [Criterion; 5] = [
        Criterion::Cluster,
        Criterion::WeightSum,
        Criterion::Apoz,
        Criterion::Random,
        Criterion::Scratch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Cluster => "cluster",
            Criterion::WeightSum => "weight-sum",
            Criterion::Apoz => "apoz",
            Criterion::Random => "random",
            Criterion::Scratch => "scratch",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Criterion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown criterion '{s}' (expected one of cluster, weight-sum, apoz, random, scratch)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Seeded synthetic task; train and test draw from separate streams.
    Synthetic {
        seed: u64,
        train_samples: usize,
        test_samples: usize,
        classes: usize,
        difficulty: f64,
        size: usize,
    },
    /// IDX image and label files (MNIST layout).
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        classes: usize,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            seed: 0,
            train_samples: 1000,
            test_samples: 500,
            classes: 10,
            difficulty: 0.6,
            size: 12,
        }
    }
}

impl DataSource {
    /// Returns `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Synthetic {
                seed,
                train_samples,
                test_samples,
                classes,
                difficulty,
                size,
            } => {
                let cfg = |samples| SynthConfig {
                    seed: *seed,
                    samples,
                    classes: *classes,
                    difficulty: *difficulty,
                    size: *size,
                };
                Ok((
                    data::synth_dataset(&cfg(*train_samples), Split::Train)?,
                    data::synth_dataset(&cfg(*test_samples), Split::Test)?,
                ))
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                classes,
            } => Ok((
                data::load_idx(train_images, train_labels, *classes, Split::Train)?,
                data::load_idx(test_images, test_labels, *classes, Split::Test)?,
            )),
        }
    }
}

/// The criterion-by-ratio sweep run by `compare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareGrid {
    pub ratios: Vec<f64>,
    pub criteria: Vec<Criterion>,
    pub seeds: Vec<u64>,
}

impl Default for CompareGrid {
    fn default() -> Self {
        Self {
            ratios: vec![0.125, 0.25, 0.375, 0.5],
            criteria: Criterion::ALL.to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub architecture: Architecture,
    pub data: DataSource,
    /// Pruned ratio per prunable layer, in graph order.
    pub ratios: Vec<f64>,
    #[serde(default)]
    pub kept_filter: KeptFilter,
    /// Used for the baseline, cluster-regularized and from-scratch runs.
    pub train: TrainConfig,
    /// Used after pruning; its `lambda` is ignored.
    pub finetune: TrainConfig,
    pub criterion: Criterion,
    /// Images used to measure APoZ, taken from the start of the training
    /// split. `None` uses the whole split.
    #[serde(default)]
    pub apoz_samples: Option<usize>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub compare: CompareGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::default(),
            data: DataSource::default(),
            ratios: vec![0.25; 3],
            kept_filter: KeptFilter::AsTrained,
            train: TrainConfig {
                batch_size: 32,
                lr: LrSchedule::step_fifths(0.05, 20),
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                lambda: 0.0,
                batch_size: 32,
                epochs: 3,
                lr: LrSchedule::constant(0.005),
                ..TrainConfig::default()
            },
            criterion: Criterion::Cluster,
            apoz_samples: None,
            output_dir: PathBuf::from("runs/default"),
            compare: CompareGrid::default(),
        }
    }
}

fn check_ratio(field: &str, p: f64) -> Result<()> {
    cluster::check_ratio(p).or_else(|e| config_err(field, e.to_string()))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(io_err(path))
    }

    /// Checks everything that can be checked without building the model.
    pub fn validate(&self) -> Result<()> {
        match &self.architecture {
            Architecture::Cnn { filters } => {
                if filters.is_empty() || filters.contains(&0) {
                    return config_err("architecture.filters", "need at least one layer, each with filters > 0");
                }
            }
            Architecture::Residual { stem, block } => {
                if *stem == 0 || *block == 0 {
                    return config_err("architecture", "stem and block widths must be positive");
                }
            }
        }
        for (i, &p) in self.ratios.iter().enumerate() {
            check_ratio(&format!("ratios[{i}]"), p)?;
        }
        self.train
            .validate()
            .or_else(|e| config_err("train", e.to_string()))?;
        self.finetune
            .validate()
            .or_else(|e| config_err("finetune", e.to_string()))?;
        if self.apoz_samples == Some(0) {
            return config_err("apoz_samples", "must be positive when given");
        }
        let grid = &self.compare;
        if grid.ratios.is_empty() || grid.criteria.is_empty() || grid.seeds.is_empty() {
            return config_err("compare", "ratios, criteria and seeds must all be non-empty");
        }
        for (i, &p) in grid.ratios.iter().enumerate() {
            check_ratio(&format!("compare.ratios[{i}]"), p)?;
        }
        if let DataSource::Synthetic {
            train_samples,
            test_samples,
            classes,
            ..
        } = &self.data
        {
            if *train_samples == 0 || *test_samples == 0 {
                return config_err("data", "sample counts must be positive");
            }
            if *classes < 2 {
                return config_err("data.classes", "need at least 2 classes");
            }
        }
        Ok(())
    }

    /// Fresh model for `data`, initialized from `(seed, stream 5)`.
    pub fn init_model(&self, data: &Dataset, seed: u64) -> Result<ModelGraph> {
        Ok(self
            .architecture
            .build(data.image_shape(), data.classes(), &mut Rng::with_stream(seed, 5))?)
    }

    /// Pairs the `ratios` vector with the model's prunable layers.
    pub fn layer_ratios(&self, model: &ModelGraph) -> Result<LayerRatios> {
        let layers = model.prunable_layers();
        if layers.len() != self.ratios.len() {
            return config_err(
                "ratios",
                format!(
                    "{} values given but the model has {} prunable layers ({})",
                    self.ratios.len(),
                    layers.len(),
                    layers.join(", ")
                ),
            );
        }
        Ok(layers.into_iter().map(String::from).zip(self.ratios.iter().copied()).collect())
    }

    /// The APoZ sample drawn from the training split.
    pub fn apoz_sample(&self, train: &Dataset) -> Dataset {
        match self.apoz_samples {
            Some(n) => train.head(n.min(train.len())),
            None => train.clone(),
        }
    }

    /// Copy with the training and fine-tuning seeds replaced.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.train.seed = seed;
        cfg.finetune.seed = seed;
        cfg
    }
}

/// Picks filters to remove under `criterion`. `spec` is required for the
/// cluster criterion and must come from the cluster-regularized model;
/// random selection draws from `(seed, stream 40 + salt)`.
pub fn select_filters(
    criterion: Criterion,
    model: &ModelGraph,
    ratios: &LayerRatios,
    spec: Option<&ClusterSpec>,
    apoz_sample: &Dataset,
    seed: u64,
    salt: u64,
) -> Result<PruneDecision> {
    Ok(match criterion {
        Criterion::Cluster => {
            let owned;
            let spec = match spec {
                Some(s) => s,
                None => {
                    owned = ClusterSpec::for_model(model, ratios)?;
                    &owned
                }
            };
            prune::select_cluster(model, spec)?
        }
        Criterion::WeightSum => prune::select_weight_sum(model, ratios)?,
        Criterion::Apoz => prune::select_apoz(model, apoz_sample, ratios)?,
        Criterion::Random => prune::select_random(model, ratios, &mut Rng::with_stream(seed, 40 + salt))?,
        Criterion::Scratch => {
            return config_err("criterion", "'scratch' trains a fresh model and selects no filters")
        }
    })
}
