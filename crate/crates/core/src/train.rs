//! Momentum SGD on `CE + weight_decay * R + lambda * cluster_loss`, where
//! `R = 1/2 * sum ||W||^2` over conv and dense weights (biases excluded).

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{cluster_loss, cluster_loss_grad, ClusterError, ClusterGradMode, ClusterSpec};
use crate::data::{augment, Dataset};
use crate::graph::{GraphError, ModelGraph, Params};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss became non-finite ({loss}) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("dataset is empty")]
    EmptyData,
    #[error("dataset images {data:?} do not match model input {model:?}")]
    InputMismatch { data: Vec<usize>, model: Vec<usize> },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrStep {
    /// First epoch (0-based) at which the divisor applies.
    pub epoch: usize,
    pub divisor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default)]
    pub steps: Vec<LrStep>,
}

impl LrSchedule {
    pub fn constant(initial: f64) -> Self {
        Self { initial, steps: Vec::new() }
    }

    /// Divide by 5 after every fifth of the run, i.e. a 300-epoch
    /// "divide by 5 every 60 epochs" schedule scaled to `epochs`.
    pub fn step_fifths(initial: f64, epochs: usize) -> Self {
        let mut steps: Vec<LrStep> = Vec::new();
        for k in 1..5 {
            let epoch = (epochs as f64 * k as f64 / 5.0).round() as usize;
            if epoch > 0 && epoch < epochs && steps.last().is_none_or(|s| s.epoch < epoch) {
                steps.push(LrStep { epoch, divisor: 5.0 });
            }
        }
        Self { initial, steps }
    }

    pub fn rate_at(&self, epoch: usize) -> f64 {
        self.steps
            .iter()
            .filter(|s| s.epoch <= epoch)
            .fold(self.initial, |lr, s| lr / s.divisor)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.initial > 0.0 && self.initial.is_finite()) {
            return Err(format!("learning rate {} must be positive", self.initial));
        }
        if self.steps.iter().any(|s| !(s.divisor > 0.0 && s.divisor.is_finite())) {
            return Err("schedule divisors must be positive".into());
        }
        if self.steps.windows(2).any(|w| w[0].epoch >= w[1].epoch) {
            return Err("schedule epochs must be strictly increasing".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    pub pad: usize,
    pub flip: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    #[serde(default)]
    pub cluster_grad: ClusterGradMode,
    #[serde(default)]
    pub augment: Option<Augment>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            weight_decay: 0.0005,
            momentum: 0.9,
            batch_size: 128,
            epochs: 20,
            lr: LrSchedule::step_fifths(0.02, 20),
            seed: 0,
            cluster_grad: ClusterGradMode::FrozenCentroid,
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be >= 0", self.lambda));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        self.lr.validate().map_err(TrainError::Config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Batch means over the epoch, each evaluated before that batch's update.
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_reg: f64,
    pub loss_cluster: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
    /// Per-layer cluster loss after the epoch's last update.
    pub cluster_layers: Vec<(String, f64)>,
}

impl EpochMetrics {
    pub fn cluster_loss_end(&self) -> f64 {
        self.cluster_layers.iter().map(|(_, v)| v).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub lambda: f64,
    pub weight_decay: f64,
    pub epochs: Vec<EpochMetrics>,
    /// Not written to the CSV, which must be reproducible.
    pub wall_clock_secs: f64,
}

impl RunMetrics {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    /// Columns: `epoch, lr, loss_total, loss_ce, loss_reg, loss_cluster,
    /// train_acc, eval_acc, cluster_loss_end`, then one `cluster:<layer>`
    /// column per clustered layer. Empty cells mean "not measured".
    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let layer_names: Vec<String> = self
            .epochs
            .first()
            .map(|e| e.cluster_layers.iter().map(|(n, _)| format!("cluster:{n}")).collect())
            .unwrap_or_default();
        let mut header: Vec<String> = [
            "epoch",
            "lr",
            "loss_total",
            "loss_ce",
            "loss_reg",
            "loss_cluster",
            "train_acc",
            "eval_acc",
            "cluster_loss_end",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(layer_names);
        w.write_record(&header)?;
        for e in &self.epochs {
            let mut row = vec![
                e.epoch.to_string(),
                e.lr.to_string(),
                e.loss_total.to_string(),
                e.loss_ce.to_string(),
                e.loss_reg.to_string(),
                e.loss_cluster.to_string(),
                e.train_acc.to_string(),
                e.eval_acc.map(|v| v.to_string()).unwrap_or_default(),
                if e.cluster_layers.is_empty() { String::new() } else { e.cluster_loss_end().to_string() },
            ];
            row.extend(e.cluster_layers.iter().map(|(_, v)| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        match self.last() {
            None => "no epochs run".to_string(),
            Some(e) => format!(
                "{} epochs in {:.1}s: loss {:.4} (ce {:.4}, reg {:.4}, cluster {:.6}), train acc {:.4}{}",
                self.epochs.len(),
                self.wall_clock_secs,
                e.loss_total,
                e.loss_ce,
                e.loss_reg,
                e.loss_cluster,
                e.train_acc,
                e.eval_acc.map(|a| format!(", eval acc {a:.4}")).unwrap_or_default()
            ),
        }
    }
}

/// Wall clock for run metrics. Browsers have no monotonic clock reachable
/// from plain wasm, so there it always reads zero.
struct Stopwatch(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Stopwatch {
    fn start() -> Self {
        Stopwatch(
            #[cfg(not(target_arch = "wasm32"))]
            std::time::Instant::now(),
        )
    }

    fn seconds(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.0.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        return 0.0;
    }
}

/// `1/2 * sum ||W||^2` over conv and dense weights.
pub fn weight_decay_value(model: &ModelGraph) -> f64 {
    0.5 * model.params().values().map(|p| p.weights.sum_sq()).sum::<f64>()
}

/// Gradient of [`weight_decay_value`]: the weights themselves, zero for biases.
pub fn weight_decay_grad(model: &ModelGraph) -> BTreeMap<String, Params> {
    model
        .params()
        .iter()
        .map(|(n, p)| {
            (
                n.clone(),
                Params {
                    weights: p.weights.clone(),
                    bias: crate::tensor::Tensor::zeros(p.bias.shape()),
                },
            )
        })
        .collect()
}

pub(crate) struct BatchResult {
    pub ce: f64,
    pub correct: usize,
    pub grads: BTreeMap<String, Params>,
}

/// Mean cross-entropy and gradient over `indices`, summed in index order.
pub(crate) fn batch_gradient(
    model: &ModelGraph,
    data: &Dataset,
    indices: &[usize],
    mut augment_with: Option<(&Augment, &mut Rng)>,
) -> Result<BatchResult> {
    let mut grads: BTreeMap<String, Params> = model.params().iter().map(|(n, p)| (n.clone(), p.zeros_like())).collect();
    let mut ce = 0.0;
    let mut correct = 0;
    for &i in indices {
        let mut x = data.image(i);
        if let Some((aug, rng)) = augment_with.as_mut() {
            x = augment(&x, aug.pad, aug.flip, rng);
        }
        let bp = model.backward(&x, data.label(i))?;
        ce += bp.loss;
        if bp.logits.argmax() == data.label(i) {
            correct += 1;
        }
        for (name, g) in bp.grads {
            let acc = grads.get_mut(&name).expect("grad for known layer");
            acc.weights.axpy(1.0, &g.weights).map_err(GraphError::from)?;
            acc.bias.axpy(1.0, &g.bias).map_err(GraphError::from)?;
        }
    }
    let inv = 1.0 / indices.len() as f64;
    for g in grads.values_mut() {
        g.weights = g.weights.scale(inv);
        g.bias = g.bias.scale(inv);
    }
    Ok(BatchResult {
        ce: ce * inv,
        correct,
        grads,
    })
}

fn check_data(model: &ModelGraph, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if data.image_shape() != model.input_shape() {
        return Err(TrainError::InputMismatch {
            data: data.image_shape().to_vec(),
            model: model.input_shape().to_vec(),
        });
    }
    Ok(())
}

/// Top-1 accuracy; ties in the logits resolve to the lowest class.
pub fn evaluate(model: &ModelGraph, data: &Dataset) -> Result<f64> {
    check_data(model, data)?;
    let mut hits = 0usize;
    for i in 0..data.len() {
        if model.logits(&data.image(i))?.argmax() == data.label(i) {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Trains `model` on `data`. With a cluster spec the cluster loss is added
/// with weight `config.lambda`; without one this is plain training.
/// Shuffling and augmentation draw from `(config.seed, stream 10)`.
pub fn train(
    model: &ModelGraph,
    data: &Dataset,
    eval: Option<&Dataset>,
    spec: Option<&ClusterSpec>,
    config: &TrainConfig,
) -> Result<(ModelGraph, RunMetrics)> {
    train_observed(model, data, eval, spec, config, |_, _| Ok(()))
}

/// [`train`] with a callback after every epoch, handed the epoch's metrics
/// and the model as it stands at that point.
pub fn train_observed(
    model: &ModelGraph,
    data: &Dataset,
    eval: Option<&Dataset>,
    spec: Option<&ClusterSpec>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &ModelGraph) -> Result<()>,
) -> Result<(ModelGraph, RunMetrics)> {
    config.validate()?;
    check_data(model, data)?;
    if let Some(e) = eval {
        check_data(model, e)?;
    }
    if let Some(s) = spec {
        s.validate(model)?;
    }
    let started = Stopwatch::start();
    let mut model = model.clone();
    let mut rng = Rng::with_stream(config.seed, 10);
    let mut velocity: BTreeMap<String, Params> =
        model.params().iter().map(|(n, p)| (n.clone(), p.zeros_like())).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..config.epochs {
        let lr = config.lr.rate_at(epoch);
        rng.shuffle(&mut order);
        let (mut sum_total, mut sum_ce, mut sum_reg, mut sum_cluster) = (0.0, 0.0, 0.0, 0.0);
        let mut correct = 0usize;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let aug = config.augment.as_ref().map(|a| (a, &mut rng));
            let batch = batch_gradient(&model, data, chunk, aug).map_err(|e| match e {
                TrainError::Graph(ref g) if is_overflow(g) => TrainError::Diverged {
                    epoch,
                    batch: b,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            let reg = weight_decay_value(&model);
            let cluster = match spec {
                Some(s) => cluster_loss(&model, s)?.total,
                None => 0.0,
            };
            let total = batch.ce + config.weight_decay * reg + config.lambda * cluster;
            if !total.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: b, loss: total });
            }
            let cluster_grads = match spec {
                Some(s) if config.lambda > 0.0 => Some(cluster_loss_grad(&model, s, config.cluster_grad)?),
                _ => None,
            };
            apply_update(&mut model, &mut velocity, &batch.grads, cluster_grads.as_ref(), config, lr)?;
            sum_total += total;
            sum_ce += batch.ce;
            sum_reg += reg;
            sum_cluster += cluster;
            correct += batch.correct;
            batches += 1;
        }
        let inv = 1.0 / batches.max(1) as f64;
        let cluster_layers = match spec {
            Some(s) => cluster_loss(&model, s)?.layers,
            None => Vec::new(),
        };
        let eval_acc = eval.map(|e| evaluate(&model, e)).transpose()?;
        epochs.push(EpochMetrics {
            epoch,
            lr,
            loss_total: sum_total * inv,
            loss_ce: sum_ce * inv,
            loss_reg: sum_reg * inv,
            loss_cluster: sum_cluster * inv,
            train_acc: correct as f64 / data.len() as f64,
            eval_acc,
            cluster_layers,
        });
        on_epoch(epochs.last().expect("just pushed"), &model)?;
    }
    Ok((
        model,
        RunMetrics {
            lambda: if spec.is_some() { config.lambda } else { 0.0 },
            weight_decay: config.weight_decay,
            epochs,
            wall_clock_secs: started.seconds(),
        },
    ))
}

/// Activations overflowed somewhere in the forward or backward pass.
fn is_overflow(e: &GraphError) -> bool {
    matches!(
        e,
        GraphError::AtLayer {
            source: crate::tensor::TensorError::NonFinite { .. },
            ..
        } | GraphError::Tensor(crate::tensor::TensorError::NonFinite { .. })
    )
}

/// `v <- momentum * v + g_total; w <- w - lr * v` with
/// `g_total = g_ce + weight_decay * w + lambda * g_cluster` (weights) and
/// `g_ce + lambda * g_cluster` (biases).
fn apply_update(
    model: &mut ModelGraph,
    velocity: &mut BTreeMap<String, Params>,
    grads: &BTreeMap<String, Params>,
    cluster_grads: Option<&BTreeMap<String, Params>>,
    config: &TrainConfig,
    lr: f64,
) -> Result<()> {
    let names: Vec<String> = model.params().keys().cloned().collect();
    for name in names {
        let g = &grads[&name];
        let cg = cluster_grads.and_then(|c| c.get(&name));
        let v = velocity.get_mut(&name).expect("velocity");
        let p = model.params_mut().get_mut(&name).expect("params");
        let (w, gw, vw) = (p.weights.data_mut(), g.weights.data(), v.weights.data_mut());
        for k in 0..w.len() {
            let mut total = gw[k] + config.weight_decay * w[k];
            if let Some(c) = cg {
                total += config.lambda * c.weights.data()[k];
            }
            vw[k] = config.momentum * vw[k] + total;
            w[k] -= lr * vw[k];
        }
        let (b, gb, vb) = (p.bias.data_mut(), g.bias.data(), v.bias.data_mut());
        for k in 0..b.len() {
            let mut total = gb[k];
            if let Some(c) = cg {
                total += config.lambda * c.bias.data()[k];
            }
            vb[k] = config.momentum * vb[k] + total;
            b[k] -= lr * vb[k];
        }
    }
    Ok(())
}

/// Plain training of an already pruned model.
pub fn finetune(
    model: &ModelGraph,
    data: &Dataset,
    eval: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(ModelGraph, RunMetrics)> {
    train(model, data, eval, None, config)
}

/// Fresh weights for the architecture of `architecture`, drawn from
/// `(config.seed, stream 20)`, then plain training.
pub fn train_from_scratch(
    architecture: &ModelGraph,
    data: &Dataset,
    eval: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(ModelGraph, RunMetrics)> {
    let fresh = architecture.reinitialized(&mut Rng::with_stream(config.seed, 20));
    train(&fresh, data, eval, None, config)
}
