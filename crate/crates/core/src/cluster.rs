//! Fixed filter clusters and the cluster loss that pulls their members
//! together.
//!
//! Each prunable layer with `N` filters and pruned ratio `p` gets
//! `floor(N * p)` clusters of two adjacent filters `(2t, 2t + 1)` followed by
//! singletons. A filter's cluster vector is its flattened weights with its
//! bias appended, so equal members produce identical feature maps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ModelGraph, Params};
use crate::tensor::Tensor;

/// Largest pruned ratio representable with clusters of at most two filters.
pub const MAX_PRUNED_RATIO: f64 = 0.5;

// Guards floor(N * p) against products like 0.29 * 100 = 28.999999999999996.
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("pruned ratio {0} exceeds {MAX_PRUNED_RATIO}: clusters hold at most two filters")]
    RatioTooLarge(f64),
    #[error("pruned ratio {0} must be a finite value >= 0")]
    InvalidRatio(f64),
    #[error("a layer needs at least one filter")]
    NoFilters,
    #[error("no cluster assignment for prunable layer '{0}'")]
    MissingLayer(String),
    #[error("cluster assignment given for '{0}', which is not a prunable layer")]
    UnknownLayer(String),
    #[error("layer '{layer}' has {actual} filters but its assignment covers {expected}")]
    FilterCount {
        layer: String,
        expected: usize,
        actual: usize,
    },
    #[error("layers {0:?} feed one residual join and must share one cluster assignment")]
    ResidualMismatch(Vec<String>),
    #[error("invalid assignment for '{layer}': {detail}")]
    Assignment { layer: String, detail: String },
    #[error("cluster members disagree in shape: {0}")]
    Shape(String),
    #[error("centroid of an empty cluster")]
    EmptyCluster,
}

pub type Result<T> = std::result::Result<T, ClusterError>;

/// Pruned ratio per layer name.
pub type LayerRatios = BTreeMap<String, f64>;

/// The same ratio for every prunable layer of `model`.
pub fn uniform_ratios(model: &ModelGraph, p: f64) -> LayerRatios {
    model
        .prunable_layers()
        .into_iter()
        .map(|n| (n.to_string(), p))
        .collect()
}

pub fn check_ratio(p: f64) -> Result<()> {
    if !p.is_finite() || p < 0.0 {
        return Err(ClusterError::InvalidRatio(p));
    }
    if p > MAX_PRUNED_RATIO {
        return Err(ClusterError::RatioTooLarge(p));
    }
    Ok(())
}

/// `floor(n * p)`: the number of filters removed from a layer of `n`.
pub fn pruned_count(n: usize, p: f64) -> usize {
    ((n as f64) * p + FLOOR_SLACK).floor() as usize
}

/// Partition of one layer's filters into clusters of size one or two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Cluster id of each filter.
    pub assignment: Vec<usize>,
    /// Requested pruned ratio.
    pub pruned_ratio: f64,
    /// Number of clusters, `N - floor(N * p)`.
    pub clusters: usize,
}

/// Adjacent-pair assignment: filters `2t` and `2t + 1` form cluster `t` for
/// `t < floor(N * p)`; the remaining filters are singletons.
pub fn assign_clusters(n: usize, p: f64) -> Result<ClusterAssignment> {
    check_ratio(p)?;
    if n == 0 {
        return Err(ClusterError::NoFilters);
    }
    let pairs = pruned_count(n, p);
    let assignment = (0..n)
        .map(|j| if j < 2 * pairs { j / 2 } else { j - pairs })
        .collect();
    Ok(ClusterAssignment {
        assignment,
        pruned_ratio: p,
        clusters: n - pairs,
    })
}

impl ClusterAssignment {
    pub fn filter_count(&self) -> usize {
        self.assignment.len()
    }

    /// Member filter indices of every cluster, ascending within a cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.clusters];
        for (j, &t) in self.assignment.iter().enumerate() {
            out[t].push(j);
        }
        out
    }

    pub fn pair_count(&self) -> usize {
        self.members().iter().filter(|m| m.len() == 2).count()
    }

    /// Fraction of filters actually removed when one member of each pair is
    /// dropped.
    pub fn effective_ratio(&self) -> f64 {
        self.pair_count() as f64 / self.filter_count() as f64
    }

    fn validate(&self, layer: &str) -> Result<()> {
        let bad = |detail: String| ClusterError::Assignment {
            layer: layer.to_string(),
            detail,
        };
        check_ratio(self.pruned_ratio)?;
        if self.assignment.iter().any(|&t| t >= self.clusters) {
            return Err(bad(format!("cluster id out of range 0..{}", self.clusters)));
        }
        let members = self.members();
        if let Some(t) = members.iter().position(|m| m.is_empty() || m.len() > 2) {
            return Err(bad(format!("cluster {t} has {} members", members[t].len())));
        }
        let n = self.filter_count();
        let pairs = pruned_count(n, self.pruned_ratio);
        if self.pair_count() != pairs || self.clusters != n - pairs {
            return Err(bad(format!(
                "expected {pairs} pairs and {} clusters for ratio {}",
                n - pairs,
                self.pruned_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerClusters {
    pub layer: String,
    #[serde(flatten)]
    pub clusters: ClusterAssignment,
}

/// Cluster assignments for every prunable layer of a model. Fixed for a
/// whole training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub layers: Vec<LayerClusters>,
}

impl ClusterSpec {
    /// Assigns clusters to every prunable layer using `ratios`. Layers joined
    /// by a residual add must request the same ratio.
    pub fn for_model(model: &ModelGraph, ratios: &LayerRatios) -> Result<Self> {
        let mut layers = Vec::new();
        for group in model.prunable_groups() {
            let names: Vec<&str> = group
                .producers
                .iter()
                .map(|&i| model.layers()[i].name.as_str())
                .collect();
            let mut p = None;
            for name in &names {
                let r = *ratios
                    .get(*name)
                    .ok_or_else(|| ClusterError::MissingLayer(name.to_string()))?;
                if p.is_some_and(|q| q != r) {
                    return Err(ClusterError::ResidualMismatch(
                        names.iter().map(|s| s.to_string()).collect(),
                    ));
                }
                p = Some(r);
            }
            let assignment = assign_clusters(group.channels, p.unwrap_or(0.0))?;
            for name in names {
                layers.push(LayerClusters {
                    layer: name.to_string(),
                    clusters: assignment.clone(),
                });
            }
        }
        let spec = Self { layers };
        spec.validate(model)?;
        Ok(spec)
    }

    pub fn get(&self, layer: &str) -> Option<&ClusterAssignment> {
        self.layers.iter().find(|l| l.layer == layer).map(|l| &l.clusters)
    }

    /// Checks coverage of every prunable layer, filter counts and the shared
    /// assignment across residual joins.
    pub fn validate(&self, model: &ModelGraph) -> Result<()> {
        let prunable = model.prunable_layers();
        for entry in &self.layers {
            if !prunable.contains(&entry.layer.as_str()) {
                return Err(ClusterError::UnknownLayer(entry.layer.clone()));
            }
            entry.clusters.validate(&entry.layer)?;
        }
        for group in model.prunable_groups() {
            let mut first: Option<&ClusterAssignment> = None;
            for &i in &group.producers {
                let name = &model.layers()[i].name;
                let a = self
                    .get(name)
                    .ok_or_else(|| ClusterError::MissingLayer(name.clone()))?;
                if a.filter_count() != group.channels {
                    return Err(ClusterError::FilterCount {
                        layer: name.clone(),
                        expected: a.filter_count(),
                        actual: group.channels,
                    });
                }
                if first.is_some_and(|f| f.assignment != a.assignment) {
                    return Err(ClusterError::ResidualMismatch(
                        group
                            .producers
                            .iter()
                            .map(|&k| model.layers()[k].name.clone())
                            .collect(),
                    ));
                }
                first = Some(a);
            }
        }
        Ok(())
    }
}

/// Elementwise mean of the cluster members.
pub fn centroid(members: &[Tensor]) -> Result<Tensor> {
    let first = members.first().ok_or(ClusterError::EmptyCluster)?;
    let mut acc = Tensor::zeros(first.shape());
    for m in members {
        acc.axpy(1.0, m)
            .map_err(|_| ClusterError::Shape(format!("{:?} vs {:?}", first.shape(), m.shape())))?;
    }
    Ok(acc.scale(1.0 / members.len() as f64))
}

fn mean_vector(vectors: &[Vec<f64>]) -> Vec<f64> {
    let mut c = vec![0.0; vectors[0].len()];
    for v in vectors {
        for (a, b) in c.iter_mut().zip(v) {
            *a += b;
        }
    }
    let inv = 1.0 / vectors.len() as f64;
    c.iter_mut().for_each(|a| *a *= inv);
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterLossReport {
    /// Unscaled cluster loss per layer, in spec order.
    pub layers: Vec<(String, f64)>,
    pub total: f64,
}

/// How the gradient treats the centroid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterGradMode {
    /// `2 (k - c)` with `c` held constant for the step.
    #[default]
    FrozenCentroid,
    /// Full derivative including the centroid's dependence on each member:
    /// `2 (k - c) - (2 / |S|) * sum_m (k_m - c)`.
    Differentiated,
}

fn layer_params<'a>(model: &'a ModelGraph, layer: &str, n: usize) -> Result<&'a Params> {
    let p = model
        .layer_params(layer)
        .ok_or_else(|| ClusterError::MissingLayer(layer.to_string()))?;
    if p.filter_count() != n {
        return Err(ClusterError::FilterCount {
            layer: layer.to_string(),
            expected: n,
            actual: p.filter_count(),
        });
    }
    Ok(p)
}

/// `sum_layers sum_clusters sum_{k in S} ||k - c||^2`, not scaled by lambda.
pub fn cluster_loss(model: &ModelGraph, spec: &ClusterSpec) -> Result<ClusterLossReport> {
    let mut layers = Vec::with_capacity(spec.layers.len());
    for entry in &spec.layers {
        let p = layer_params(model, &entry.layer, entry.clusters.filter_count())?;
        let mut value = 0.0;
        for members in entry.clusters.members() {
            if members.len() < 2 {
                continue;
            }
            let vectors: Vec<Vec<f64>> = members.iter().map(|&j| p.filter_vector(j)).collect();
            let c = mean_vector(&vectors);
            for v in &vectors {
                value += v.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
        }
        layers.push((entry.layer.clone(), value));
    }
    let total = layers.iter().map(|(_, v)| v).sum();
    Ok(ClusterLossReport { layers, total })
}

/// Gradient of [`cluster_loss`] for every layer covered by `spec`. Layers without
/// any pair get an all-zero gradient.
pub fn cluster_loss_grad(
    model: &ModelGraph,
    spec: &ClusterSpec,
    mode: ClusterGradMode,
) -> Result<BTreeMap<String, Params>> {
    let mut out = BTreeMap::new();
    for entry in &spec.layers {
        let p = layer_params(model, &entry.layer, entry.clusters.filter_count())?;
        let mut g = p.zeros_like();
        for members in entry.clusters.members() {
            if members.len() < 2 {
                continue;
            }
            let vectors: Vec<Vec<f64>> = members.iter().map(|&j| p.filter_vector(j)).collect();
            if let (ClusterGradMode::FrozenCentroid, [a, b]) = (mode, vectors.as_slice()) {
                // 2 (a - c) = a - b for a pair; writing it this way makes the
                // two member gradients exact negatives of each other.
                let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
                let neg: Vec<f64> = diff.iter().map(|d| -d).collect();
                g.add_to_filter(members[0], &diff);
                g.add_to_filter(members[1], &neg);
                continue;
            }
            let c = mean_vector(&vectors);
            let correction: Vec<f64> = match mode {
                ClusterGradMode::FrozenCentroid => vec![0.0; c.len()],
                ClusterGradMode::Differentiated => {
                    let scale = 2.0 / members.len() as f64;
                    (0..c.len())
                        .map(|r| scale * vectors.iter().map(|v| v[r] - c[r]).sum::<f64>())
                        .collect()
                }
            };
            for (&j, v) in members.iter().zip(&vectors) {
                let delta: Vec<f64> = v
                    .iter()
                    .zip(&c)
                    .zip(&correction)
                    .map(|((a, b), corr)| 2.0 * (a - b) - corr)
                    .collect();
                g.add_to_filter(j, &delta);
            }
        }
        out.insert(entry.layer.clone(), g);
    }
    Ok(out)
}

/// Moves every cluster member towards its centroid: `k <- c + factor (k - c)`.
/// `factor = 0` makes all members of a cluster exactly equal and the cluster
/// loss scales with `factor^2`.
pub fn shrink_clusters(model: &ModelGraph, spec: &ClusterSpec, factor: f64) -> Result<ModelGraph> {
    let mut out = model.clone();
    for entry in &spec.layers {
        let mut p = layer_params(model, &entry.layer, entry.clusters.filter_count())?.clone();
        for members in entry.clusters.members() {
            if members.len() < 2 {
                continue;
            }
            let vectors: Vec<Vec<f64>> = members.iter().map(|&j| p.filter_vector(j)).collect();
            let c = mean_vector(&vectors);
            for (&j, v) in members.iter().zip(&vectors) {
                let moved: Vec<f64> = v.iter().zip(&c).map(|(k, ci)| ci + factor * (k - ci)).collect();
                p.set_filter(j, &moved);
            }
        }
        out.set_params(&entry.layer, p).map_err(|e| ClusterError::Shape(e.to_string()))?;
    }
    Ok(out)
}
