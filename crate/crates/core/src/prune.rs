//! Filter selection and the prune-and-merge rewrite.
//!
//! A decision lists, for every prunable layer, which filters survive. When a
//! dropped filter has a cluster partner the rewrite folds the dropped
//! channel's weights in every consumer into the partner's channel before
//! removing it, so a pair of identical filters is removed without changing
//! the network function.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{self, ClusterError, ClusterSpec, LayerRatios};
use crate::data::Dataset;
use crate::graph::{count_costs, ChannelGroup, GraphError, LayerKind, ModelGraph, Params};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum PruneError {
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("decision does not fit the model: {0}")]
    Decision(String),
    #[error("layer '{0}' consumes pruned channels but is not a conv or dense layer")]
    UnsupportedConsumer(String),
    #[error("APoZ needs at least one sample")]
    EmptySample,
    #[error("report inconsistent with models: {0}")]
    Report(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, PruneError>;

fn decision_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(PruneError::Decision(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDecision {
    pub layer: String,
    pub filters: usize,
    pub keep: Vec<usize>,
    pub drop: Vec<usize>,
    /// Dropped filter -> kept cluster partner whose consumer channel absorbs it.
    #[serde(default)]
    pub merge_into: BTreeMap<usize, usize>,
}

impl LayerDecision {
    fn from_drop(layer: &str, filters: usize, drop: BTreeSet<usize>, merge_into: BTreeMap<usize, usize>) -> Self {
        Self {
            layer: layer.to_string(),
            filters,
            keep: (0..filters).filter(|j| !drop.contains(j)).collect(),
            drop: drop.into_iter().collect(),
            merge_into,
        }
    }

    pub fn effective_ratio(&self) -> f64 {
        self.drop.len() as f64 / self.filters as f64
    }

    fn same_choice(&self, other: &LayerDecision) -> bool {
        self.keep == other.keep && self.drop == other.drop && self.merge_into == other.merge_into
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PruneDecision {
    pub layers: Vec<LayerDecision>,
}

impl PruneDecision {
    pub fn get(&self, layer: &str) -> Option<&LayerDecision> {
        self.layers.iter().find(|d| d.layer == layer)
    }

    pub fn dropped(&self) -> usize {
        self.layers.iter().map(|d| d.drop.len()).sum()
    }

    /// Checks the decision against the model's prunable groups and returns
    /// the decision that applies to each group (if any).
    fn resolve<'a>(&'a self, model: &ModelGraph) -> Result<Vec<(ChannelGroup, Option<&'a LayerDecision>)>> {
        let groups = model.prunable_groups();
        let mut covered = BTreeSet::new();
        let mut out = Vec::with_capacity(groups.len());
        for g in groups {
            let mut chosen: Option<&LayerDecision> = None;
            let mut seen = 0;
            for &p in &g.producers {
                let name = &model.layers()[p].name;
                if let Some(d) = self.get(name) {
                    seen += 1;
                    covered.insert(name.as_str());
                    check_layer_decision(d, g.channels)?;
                    if chosen.is_some_and(|c| !c.same_choice(d)) {
                        return decision_err(format!(
                            "layers joined by a residual add disagree ('{}' vs '{name}')",
                            chosen.unwrap().layer
                        ));
                    }
                    chosen = Some(d);
                }
            }
            if seen != 0 && seen != g.producers.len() {
                return decision_err("a residual group is only partially covered");
            }
            out.push((g, chosen));
        }
        for d in &self.layers {
            if !covered.contains(d.layer.as_str()) {
                return decision_err(format!("'{}' is not a prunable layer", d.layer));
            }
        }
        Ok(out)
    }
}

fn check_layer_decision(d: &LayerDecision, channels: usize) -> Result<()> {
    if d.filters != channels {
        return decision_err(format!("'{}' has {channels} filters, decision says {}", d.layer, d.filters));
    }
    let keep: BTreeSet<usize> = d.keep.iter().copied().collect();
    let drop: BTreeSet<usize> = d.drop.iter().copied().collect();
    let sorted = d.keep.windows(2).all(|w| w[0] < w[1]) && d.drop.windows(2).all(|w| w[0] < w[1]);
    if !sorted || keep.len() + drop.len() != channels || !keep.is_disjoint(&drop) || keep.iter().chain(&drop).any(|&j| j >= channels) {
        return decision_err(format!("keep/drop of '{}' do not partition 0..{channels}", d.layer));
    }
    if keep.is_empty() {
        return decision_err(format!("'{}' would lose every filter", d.layer));
    }
    for (from, to) in &d.merge_into {
        if !drop.contains(from) || !keep.contains(to) {
            return decision_err(format!("'{}': merge {from} -> {to} must map a dropped filter to a kept one", d.layer));
        }
    }
    Ok(())
}

/// What happens to the surviving member of a cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeptFilter {
    /// Retained unchanged.
    #[default]
    AsTrained,
    /// Replaced by the mean of its cluster (weights and bias).
    Centroid,
}

/// Keeps the lower-index member of every pair and drops the other.
pub fn select_cluster(model: &ModelGraph, spec: &ClusterSpec) -> Result<PruneDecision> {
    spec.validate(model)?;
    let mut layers = Vec::new();
    for entry in &spec.layers {
        let mut drop = BTreeSet::new();
        let mut merge = BTreeMap::new();
        for members in entry.clusters.members() {
            if let [kept, rest @ ..] = members.as_slice() {
                for &j in rest {
                    drop.insert(j);
                    merge.insert(j, *kept);
                }
            }
        }
        layers.push(LayerDecision::from_drop(&entry.layer, entry.clusters.filter_count(), drop, merge));
    }
    Ok(PruneDecision { layers })
}

fn group_ratio(model: &ModelGraph, group: &ChannelGroup, ratios: &LayerRatios) -> Result<f64> {
    let mut p = None;
    for &i in &group.producers {
        let name = &model.layers()[i].name;
        let r = *ratios.get(name).ok_or_else(|| ClusterError::MissingLayer(name.clone()))?;
        cluster::check_ratio(r)?;
        if p.is_some_and(|q| q != r) {
            return Err(ClusterError::ResidualMismatch(
                group.producers.iter().map(|&k| model.layers()[k].name.clone()).collect(),
            )
            .into());
        }
        p = Some(r);
    }
    Ok(p.unwrap_or(0.0))
}

/// Builds a decision by dropping, per group, the `floor(N * p)` channels that
/// come first under `order` (a strict ranking of channel indices).
fn select_by(
    model: &ModelGraph,
    ratios: &LayerRatios,
    mut pick: impl FnMut(&ChannelGroup, usize) -> Result<Vec<usize>>,
) -> Result<PruneDecision> {
    let mut layers = Vec::new();
    for group in model.prunable_groups() {
        let p = group_ratio(model, &group, ratios)?;
        let k = cluster::pruned_count(group.channels, p);
        let drop: BTreeSet<usize> = pick(&group, k)?.into_iter().collect();
        debug_assert_eq!(drop.len(), k);
        for &i in &group.producers {
            layers.push(LayerDecision::from_drop(
                &model.layers()[i].name,
                group.channels,
                drop.clone(),
                BTreeMap::new(),
            ));
        }
    }
    Ok(PruneDecision { layers })
}

/// Indices sorted by `(score, index)` ascending, first `k`.
fn lowest(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// L1 norm of each filter's weights (bias excluded), summed over the
/// producers of a residual group.
pub fn weight_sum_scores(model: &ModelGraph, group: &ChannelGroup) -> Vec<f64> {
    let mut scores = vec![0.0; group.channels];
    for &i in &group.producers {
        let p = &model.params()[&model.layers()[i].name];
        for (j, s) in scores.iter_mut().enumerate() {
            *s += p.weights.filter_column(j).iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    scores
}

/// Drops the filters with the smallest absolute weight sum; ties drop the
/// lower index first.
pub fn select_weight_sum(model: &ModelGraph, ratios: &LayerRatios) -> Result<PruneDecision> {
    select_by(model, ratios, |g, k| Ok(lowest(&weight_sum_scores(model, g), k)))
}

/// Fraction of exactly-zero post-activation values of each channel over the
/// whole sample: `zeros / (samples * positions per channel)`. Keyed by the
/// first producer of each prunable group.
pub fn apoz_scores(model: &ModelGraph, sample: &Dataset) -> Result<BTreeMap<String, Vec<f64>>> {
    if sample.is_empty() {
        return Err(PruneError::EmptySample);
    }
    let groups = model.prunable_groups();
    let mut zeros: Vec<Vec<u64>> = groups.iter().map(|g| vec![0; g.channels]).collect();
    let mut positions = vec![0u64; groups.len()];
    for i in 0..sample.len() {
        let acts = model.forward(&sample.image(i), true)?.activations.unwrap_or_default();
        for (gi, g) in groups.iter().enumerate() {
            let t = &acts[&model.layers()[g.activation].name];
            for (k, &v) in t.data().iter().enumerate() {
                if v == 0.0 {
                    zeros[gi][k % g.channels] += 1;
                }
            }
            positions[gi] += (t.len() / g.channels) as u64;
        }
    }
    Ok(groups
        .iter()
        .zip(zeros)
        .zip(positions)
        .map(|((g, z), n)| {
            let name = model.layers()[g.producers[0]].name.clone();
            (name, z.iter().map(|&c| c as f64 / n as f64).collect())
        })
        .collect())
}

/// Drops the filters with the highest APoZ; ties drop the lower index first.
pub fn select_apoz(model: &ModelGraph, sample: &Dataset, ratios: &LayerRatios) -> Result<PruneDecision> {
    let scores = apoz_scores(model, sample)?;
    select_by(model, ratios, |g, k| {
        let s = &scores[&model.layers()[g.producers[0]].name];
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        Ok(lowest(&neg, k))
    })
}

/// Drops `floor(N * p)` filters per group chosen uniformly from `rng`.
pub fn select_random(model: &ModelGraph, ratios: &LayerRatios, rng: &mut Rng) -> Result<PruneDecision> {
    select_by(model, ratios, |g, k| Ok(rng.choose_indices(g.channels, k)))
}

/// Copies `t` viewed as `(outer, channels, inner)` keeping only `keep` along
/// the channel axis.
fn keep_channels(t: &Tensor, outer: usize, channels: usize, inner: usize, keep: &[usize]) -> Vec<f64> {
    let d = t.data();
    let mut out = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        for &c in keep {
            let base = (o * channels + c) * inner;
            out.extend_from_slice(&d[base..base + inner]);
        }
    }
    out
}

fn fold_channel(t: &mut Tensor, outer: usize, channels: usize, inner: usize, from: usize, into: usize) {
    let d = t.data_mut();
    for o in 0..outer {
        let src = (o * channels + from) * inner;
        let dst = (o * channels + into) * inner;
        for i in 0..inner {
            d[dst + i] += d[src + i];
        }
    }
}

/// Removes the dropped filters of every decided group and rewrites their
/// consumers: a dropped channel with a merge partner is first added into the
/// partner's channel, then every dropped channel is removed.
pub fn prune_and_merge(model: &ModelGraph, decision: &PruneDecision, kept: KeptFilter) -> Result<ModelGraph> {
    let resolved = decision.resolve(model)?;
    let mut layers = model.layers().to_vec();
    let mut params: BTreeMap<String, Params> = model.params().clone();

    for (group, choice) in resolved {
        let Some(d) = choice else { continue };
        if d.drop.is_empty() && kept == KeptFilter::AsTrained {
            continue;
        }
        let n = group.channels;

        for &ci in &group.consumers {
            let c = ci.layer;
            let name = layers[c].name.clone();
            let p = params.get_mut(&name).expect("consumer has params");
            let shape = p.weights.shape().to_vec();
            let (outer, inner) = match layers[c].kind {
                LayerKind::Conv { kernel, .. } => (kernel * kernel, shape[3]),
                LayerKind::Dense { .. } => (ci.spatial, shape[1]),
                _ => return Err(PruneError::UnsupportedConsumer(name)),
            };
            if outer * n * inner != p.weights.len() {
                return decision_err(format!("consumer '{name}' weights {shape:?} do not carry {n} channels"));
            }
            for (&from, &into) in &d.merge_into {
                fold_channel(&mut p.weights, outer, n, inner, from, into);
            }
            let data = keep_channels(&p.weights, outer, n, inner, &d.keep);
            let kept_n = d.keep.len();
            let new_shape = match &mut layers[c].kind {
                LayerKind::Conv { in_channels, kernel, .. } => {
                    *in_channels = kept_n;
                    vec![*kernel, *kernel, kept_n, inner]
                }
                LayerKind::Dense { in_features, .. } => {
                    *in_features = ci.spatial * kept_n;
                    vec![ci.spatial * kept_n, inner]
                }
                _ => unreachable!(),
            };
            p.weights = Tensor::new(new_shape, data).map_err(GraphError::from)?;
        }

        for &pi in &group.producers {
            let name = layers[pi].name.clone();
            let p = params.get_mut(&name).expect("producer has params");
            if kept == KeptFilter::Centroid {
                let mut partners: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for (&from, &into) in &d.merge_into {
                    partners.entry(into).or_insert_with(|| vec![into]).push(from);
                }
                for (into, members) in partners {
                    let vectors: Vec<Vec<f64>> = members.iter().map(|&j| p.filter_vector(j)).collect();
                    let own = p.filter_vector(into);
                    let inv = 1.0 / members.len() as f64;
                    let delta: Vec<f64> = (0..own.len())
                        .map(|r| vectors.iter().map(|v| v[r]).sum::<f64>() * inv - own[r])
                        .collect();
                    p.add_to_filter(into, &delta);
                }
            }
            let rows = p.weights.len() / n;
            let mut wshape = p.weights.shape().to_vec();
            *wshape.last_mut().unwrap() = d.keep.len();
            p.weights = Tensor::new(wshape, keep_channels(&p.weights, rows, n, 1, &d.keep)).map_err(GraphError::from)?;
            p.bias = Tensor::new(vec![d.keep.len()], keep_channels(&p.bias, 1, n, 1, &d.keep)).map_err(GraphError::from)?;
            match &mut layers[pi].kind {
                LayerKind::Conv { filters, .. } => *filters = d.keep.len(),
                LayerKind::Dense { out_features, .. } => *out_features = d.keep.len(),
                _ => unreachable!(),
            }
        }
    }
    Ok(model.rebuild(layers, params)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPruneStats {
    pub layer: String,
    pub kind: String,
    pub filters_before: usize,
    pub filters_after: usize,
    /// Fraction of this layer's input channels removed (`p_{i-1}`).
    pub input_pruned: f64,
    /// Fraction of this layer's filters removed (`p_i`).
    pub output_pruned: f64,
    pub params_before: u64,
    pub params_after: u64,
    pub macs_before: u64,
    pub macs_after: u64,
    /// `(1 - p_{i-1}) (1 - p_i)`.
    pub cost_ratio: f64,
    /// `1 - p_i`: remaining share of this layer's feature maps.
    pub activation_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub layers: Vec<LayerPruneStats>,
    pub params_before: u64,
    pub params_after: u64,
    pub macs_before: u64,
    pub macs_after: u64,
    /// `macs_before / macs_after`.
    pub speedup: f64,
    /// `params_before / params_after`.
    pub compression: f64,
}

/// Per-layer and total costs before and after a rewrite. Fails when the
/// pruned model does not match what `decision` implies.
pub fn make_report(before: &ModelGraph, after: &ModelGraph, decision: &PruneDecision) -> Result<PruneReport> {
    let resolved = decision.resolve(before)?;
    let mut input_drop: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut output_drop: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (g, d) in &resolved {
        let dropped = d.map_or(0, |d| d.drop.len());
        for c in &g.consumers {
            input_drop.insert(c.layer, (dropped, g.channels));
        }
        for &p in &g.producers {
            output_drop.insert(p, (dropped, g.channels));
        }
    }
    let cost_before = count_costs(before);
    let cost_after = count_costs(after);
    let mut layers = Vec::new();
    for (i, layer) in before.layers().iter().enumerate() {
        let Some(filters_before) = layer.kind.filter_count() else { continue };
        let b = cost_before.get(&layer.name).expect("cost of parameter layer");
        let a = cost_after
            .get(&layer.name)
            .ok_or_else(|| PruneError::Report(format!("layer '{}' missing after pruning", layer.name)))?;
        let (din, cin) = input_drop.get(&i).copied().unwrap_or((0, 1));
        let (dout, cout) = output_drop.get(&i).copied().unwrap_or((0, 1));
        let filters_after = after.layers()[after.layer_index(&layer.name).unwrap()]
            .kind
            .filter_count()
            .unwrap_or(0);
        if filters_after != filters_before - dout {
            return Err(PruneError::Report(format!(
                "'{}' has {filters_after} filters, expected {}",
                layer.name,
                filters_before - dout
            )));
        }
        // exact integer form of macs_after = macs_before (1 - p_in)(1 - p_out)
        if a.macs as u128 * (cin * cout) as u128 != b.macs as u128 * ((cin - din) * (cout - dout)) as u128 {
            return Err(PruneError::Report(format!("'{}' MACs do not follow the pruned ratios", layer.name)));
        }
        let p_in = din as f64 / cin as f64;
        let p_out = dout as f64 / cout as f64;
        layers.push(LayerPruneStats {
            layer: layer.name.clone(),
            kind: layer.kind.label().to_string(),
            filters_before,
            filters_after,
            input_pruned: p_in,
            output_pruned: p_out,
            params_before: b.params,
            params_after: a.params,
            macs_before: b.macs,
            macs_after: a.macs,
            cost_ratio: (1.0 - p_in) * (1.0 - p_out),
            activation_ratio: 1.0 - p_out,
        });
    }
    Ok(PruneReport {
        layers,
        params_before: cost_before.total_params,
        params_after: cost_after.total_params,
        macs_before: cost_before.total_macs,
        macs_after: cost_after.total_macs,
        speedup: cost_before.total_macs as f64 / cost_after.total_macs.max(1) as f64,
        compression: cost_before.total_params as f64 / cost_after.total_params.max(1) as f64,
    })
}

impl PruneReport {
    /// One row per conv/dense layer, header as the field names of
    /// [`LayerPruneStats`].
    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.layers {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rebuilds totals and ratios from per-layer rows, e.g. ones read back
    /// with [`PruneReport::read_csv`].
    pub fn from_layers(layers: Vec<LayerPruneStats>) -> Self {
        let sum = |f: fn(&LayerPruneStats) -> u64| layers.iter().map(f).sum::<u64>();
        let (params_before, params_after) = (sum(|l| l.params_before), sum(|l| l.params_after));
        let (macs_before, macs_after) = (sum(|l| l.macs_before), sum(|l| l.macs_after));
        Self {
            params_before,
            params_after,
            macs_before,
            macs_after,
            speedup: macs_before as f64 / macs_after.max(1) as f64,
            compression: params_before as f64 / params_after.max(1) as f64,
            layers,
        }
    }

    pub fn read_csv<R: io::Read>(input: R) -> Result<Vec<LayerPruneStats>> {
        let mut r = csv::Reader::from_reader(input);
        Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>7} {:>9} {:>7} {:>7} {:>10} {:>10} {:>12} {:>12} {:>7}",
            "layer", "kind", "filters", "p_in", "p_out", "params", "params'", "macs", "macs'", "ratio"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<12} {:>7} {:>4}->{:<4} {:>7.4} {:>7.4} {:>10} {:>10} {:>12} {:>12} {:>7.4}",
                l.layer,
                l.kind,
                l.filters_before,
                l.filters_after,
                l.input_pruned,
                l.output_pruned,
                l.params_before,
                l.params_after,
                l.macs_before,
                l.macs_after,
                l.cost_ratio
            );
        }
        let _ = writeln!(
            s,
            "total params {} -> {} (compression {:.3}x), MACs {} -> {} (speedup {:.3}x)",
            self.params_before, self.params_after, self.compression, self.macs_before, self.macs_after, self.speedup
        );
        s
    }
}
