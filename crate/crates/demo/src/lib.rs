//! Three small experiments exposed to JavaScript. Each takes plain numbers
//! and returns a JSON string; the page in `www/` draws the results.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use clusterprune::cluster::{cluster_loss, shrink_clusters, uniform_ratios, ClusterSpec};
use clusterprune::data::{synth_dataset, Split, SynthConfig};
use clusterprune::graph::count_costs;
use clusterprune::models::Architecture;
use clusterprune::prune::{make_report, prune_and_merge, select_cluster, KeptFilter, LayerPruneStats};
use clusterprune::train::{evaluate, train_observed, LrSchedule, TrainConfig};
use clusterprune::{Rng, Tensor};

const SIZE: usize = 8;
const CLASSES: usize = 4;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(err)
}

#[derive(Debug, Serialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub loss_ce: f64,
    pub cluster_loss: f64,
    pub test_acc: f64,
    /// Test accuracy of the network after pruning one filter per cluster.
    pub pruned_acc: f64,
}

/// Trains a two-layer CNN on an 8x8 synthetic task with cluster loss weight
/// `lambda` and reports, after every epoch, how much accuracy pruning at
/// ratio `p` would cost.
pub fn training_curve(lambda: f64, p: f64, epochs: usize, seed: u64) -> Result<String, String> {
    if epochs > 200 {
        return Err("at most 200 epochs".into());
    }
    let synth = |samples| SynthConfig {
        seed,
        samples,
        classes: CLASSES,
        difficulty: 0.6,
        size: SIZE,
    };
    let train_set = synth_dataset(&synth(240), Split::Train).map_err(err)?;
    let test_set = synth_dataset(&synth(120), Split::Test).map_err(err)?;
    let model = Architecture::Cnn { filters: vec![8, 8] }
        .build(train_set.image_shape(), CLASSES, &mut Rng::with_stream(seed, 5))
        .map_err(err)?;
    let spec = ClusterSpec::for_model(&model, &uniform_ratios(&model, p)).map_err(err)?;
    let cfg = TrainConfig {
        lambda,
        batch_size: 16,
        epochs,
        lr: LrSchedule::step_fifths(0.05, epochs),
        seed,
        ..TrainConfig::default()
    };
    let mut snapshots = Vec::with_capacity(epochs);
    train_observed(&model, &train_set, None, Some(&spec), &cfg, |m, current| {
        snapshots.push((m.clone(), current.clone()));
        Ok(())
    })
    .map_err(err)?;
    let mut points = Vec::with_capacity(epochs);
    for (m, current) in &snapshots {
        let decision = select_cluster(current, &spec).map_err(err)?;
        let pruned = prune_and_merge(current, &decision, KeptFilter::AsTrained).map_err(err)?;
        points.push(CurvePoint {
            epoch: m.epoch,
            loss_ce: m.loss_ce,
            cluster_loss: m.cluster_loss_end(),
            test_acc: evaluate(current, &test_set).map_err(err)?,
            pruned_acc: evaluate(&pruned, &test_set).map_err(err)?,
        });
    }
    to_json(&points)
}

#[derive(Debug, Serialize)]
pub struct DeviationPoint {
    /// Fraction of each member's distance to its centroid that is kept.
    pub factor: f64,
    pub cluster_loss: f64,
    /// Largest absolute logit change caused by prune-and-merge.
    pub max_deviation: f64,
}

/// Pulls cluster members of a random CNN toward their centroids by
/// decreasing factors and measures how far prune-and-merge moves the logits.
pub fn merge_deviation(p: f64, seed: u64) -> Result<String, String> {
    let mut rng = Rng::with_stream(seed, 5);
    let model = Architecture::Cnn { filters: vec![8, 16] }
        .build(&[SIZE, SIZE, 1], CLASSES, &mut rng)
        .map_err(err)?;
    let spec = ClusterSpec::for_model(&model, &uniform_ratios(&model, p)).map_err(err)?;
    let inputs: Vec<Tensor> = (0..20)
        .map(|_| Tensor::from_fn(&[SIZE, SIZE, 1], |_| rng.uniform()))
        .collect();
    let mut points = Vec::new();
    for factor in [1.0, 0.5, 0.25, 0.1, 0.05, 0.01, 1e-3, 1e-4, 1e-6, 0.0] {
        let shrunk = shrink_clusters(&model, &spec, factor).map_err(err)?;
        let decision = select_cluster(&shrunk, &spec).map_err(err)?;
        let pruned = prune_and_merge(&shrunk, &decision, KeptFilter::AsTrained).map_err(err)?;
        let mut worst = 0.0f64;
        for x in &inputs {
            let a = shrunk.logits(x).map_err(err)?;
            let b = pruned.logits(x).map_err(err)?;
            worst = worst.max(a.max_abs_diff(&b).map_err(err)?);
        }
        points.push(DeviationPoint {
            factor,
            cluster_loss: cluster_loss(&shrunk, &spec).map_err(err)?.total,
            max_deviation: worst,
        });
    }
    to_json(&points)
}

#[derive(Debug, Serialize)]
pub struct CostTable {
    pub layers: Vec<LayerPruneStats>,
    pub params_before: u64,
    pub params_after: u64,
    pub macs_before: u64,
    pub macs_after: u64,
    pub speedup: f64,
    pub compression: f64,
}

/// Parameter and MAC counts of a 32x32x3 CNN with the given conv widths
/// before and after pruning every conv layer at ratio `p`.
pub fn compression_table(filters: &str, p: f64) -> Result<String, String> {
    let widths: Vec<usize> = filters
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| format!("'{s}': {e}")))
        .collect::<Result<_, _>>()?;
    if widths.is_empty() || widths.len() > 5 || widths.iter().any(|&w| w == 0 || w > 512) {
        return Err("give 1 to 5 conv widths between 1 and 512".into());
    }
    let model = Architecture::Cnn { filters: widths }
        .build(&[32, 32, 3], 10, &mut Rng::new(0))
        .map_err(err)?;
    let spec = ClusterSpec::for_model(&model, &uniform_ratios(&model, p)).map_err(err)?;
    let decision = select_cluster(&model, &spec).map_err(err)?;
    let pruned = prune_and_merge(&model, &decision, KeptFilter::AsTrained).map_err(err)?;
    let report = make_report(&model, &pruned, &decision).map_err(err)?;
    debug_assert_eq!(report.macs_after, count_costs(&pruned).total_macs);
    to_json(&CostTable {
        layers: report.layers,
        params_before: report.params_before,
        params_after: report.params_after,
        macs_before: report.macs_before,
        macs_after: report.macs_after,
        speedup: report.speedup,
        compression: report.compression,
    })
}

#[wasm_bindgen(js_name = trainingCurve)]
pub fn training_curve_js(lambda: f64, p: f64, epochs: u32, seed: u32) -> Result<String, JsValue> {
    training_curve(lambda, p, epochs as usize, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = mergeDeviation)]
pub fn merge_deviation_js(p: f64, seed: u32) -> Result<String, JsValue> {
    merge_deviation(p, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = compressionTable)]
pub fn compression_table_js(filters: &str, p: f64) -> Result<String, JsValue> {
    compression_table(filters, p).map_err(|e| JsValue::from_str(&e))
}
