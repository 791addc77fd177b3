use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, select_filters, Criterion, ExperimentConfig, Result};
use crate::cluster::{uniform_ratios, ClusterSpec};
use crate::data::Dataset;
use crate::graph::ModelGraph;
use crate::prune::{make_report, prune_and_merge, select_cluster, PruneReport};
use crate::train::{evaluate, finetune, train, train_from_scratch};

/// One (seed, criterion, p) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub seed: u64,
    pub criterion: Criterion,
    pub p: f64,
    /// Test accuracy of the plainly trained, unpruned model for this seed.
    pub baseline_acc: f64,
    /// Test accuracy of the model the filters were removed from.
    pub source_acc: Option<f64>,
    /// Test accuracy right after pruning, before fine-tuning.
    pub pruned_acc: Option<f64>,
    /// Test accuracy after fine-tuning (or after training, for scratch).
    pub final_acc: f64,
    /// Cluster loss of the source model (cluster criterion only).
    pub cluster_loss: Option<f64>,
    pub params: u64,
    pub macs: u64,
    pub speedup: f64,
    pub compression: f64,
}

/// Mean over seeds of one (criterion, p) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub criterion: Criterion,
    pub p: f64,
    pub seeds: usize,
    pub baseline_acc_mean: f64,
    pub pruned_acc_mean: Option<f64>,
    pub final_acc_mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub final_acc_std: f64,
    pub params: u64,
    pub macs: u64,
    pub speedup: f64,
    pub compression: f64,
}

/// Cluster-based pruning against one other criterion at one ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseCheck {
    pub other: Criterion,
    pub p: f64,
    pub cluster_mean: f64,
    pub other_mean: f64,
}

impl PairwiseCheck {
    pub fn cluster_at_least_as_good(&self) -> bool {
        self.cluster_mean >= self.other_mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub checks: Vec<PairwiseCheck>,
}

impl CompareSummary {
    /// `None` when the grid lacks the cluster or the `other` criterion.
    pub fn cluster_beats(&self, other: Criterion) -> Option<bool> {
        let relevant: Vec<&PairwiseCheck> = self.checks.iter().filter(|c| c.other == other).collect();
        (!relevant.is_empty()).then(|| relevant.iter().all(|c| c.cluster_at_least_as_good()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareOutcome {
    pub cells: Vec<CellResult>,
    pub rows: Vec<AggregateRow>,
    pub summary: CompareSummary,
}

fn cost_fields(report: &PruneReport) -> (u64, u64, f64, f64) {
    (report.params_after, report.macs_after, report.speedup, report.compression)
}

/// Runs the whole grid. Every seed trains one plain baseline shared by the
/// weight-sum, APoZ and random criteria, and one cluster-regularized model
/// per ratio from the same initialization. `progress` receives one line per
/// finished run.
pub fn run_compare(
    cfg: &ExperimentConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    mut progress: impl FnMut(&str),
) -> Result<CompareOutcome> {
    cfg.validate()?;
    let grid = &cfg.compare;
    let mut criteria = grid.criteria.clone();
    criteria.sort();
    criteria.dedup();
    let sample = cfg.apoz_sample(train_set);
    let mut cells = Vec::new();

    for &seed in &grid.seeds {
        let cfg = cfg.with_seed(seed);
        let init = cfg.init_model(train_set, seed)?;
        let (baseline, _) = train(&init, train_set, None, None, &cfg.train)?;
        let baseline_acc = evaluate(&baseline, test_set)?;
        progress(&format!("seed {seed}: baseline accuracy {baseline_acc:.4}"));

        for (pi, &p) in grid.ratios.iter().enumerate() {
            let ratios = uniform_ratios(&init, p);
            let spec = ClusterSpec::for_model(&init, &ratios)?;
            for &criterion in &criteria {
                let cell = match criterion {
                    Criterion::Scratch => {
                        let decision = select_cluster(&init, &spec)?;
                        let shape = prune_and_merge(&init, &decision, cfg.kept_filter)?;
                        let report = make_report(&init, &shape, &decision)?;
                        let (model, _) = train_from_scratch(&shape, train_set, None, &cfg.train)?;
                        let (params, macs, speedup, compression) = cost_fields(&report);
                        CellResult {
                            seed,
                            criterion,
                            p,
                            baseline_acc,
                            source_acc: None,
                            pruned_acc: None,
                            final_acc: evaluate(&model, test_set)?,
                            cluster_loss: None,
                            params,
                            macs,
                            speedup,
                            compression,
                        }
                    }
                    _ => {
                        let (source, cluster_loss): (ModelGraph, Option<f64>) = if criterion == Criterion::Cluster {
                            let (m, metrics) = train(&init, train_set, None, Some(&spec), &cfg.train)?;
                            let loss = metrics.last().map(|e| e.cluster_loss_end()).unwrap_or(0.0);
                            (m, Some(loss))
                        } else {
                            (baseline.clone(), None)
                        };
                        let source_acc = if criterion == Criterion::Cluster {
                            evaluate(&source, test_set)?
                        } else {
                            baseline_acc
                        };
                        let decision =
                            select_filters(criterion, &source, &ratios, Some(&spec), &sample, seed, pi as u64)?;
                        let pruned = prune_and_merge(&source, &decision, cfg.kept_filter)?;
                        let report = make_report(&source, &pruned, &decision)?;
                        let pruned_acc = evaluate(&pruned, test_set)?;
                        let (tuned, _) = finetune(&pruned, train_set, None, &cfg.finetune)?;
                        let (params, macs, speedup, compression) = cost_fields(&report);
                        CellResult {
                            seed,
                            criterion,
                            p,
                            baseline_acc,
                            source_acc: Some(source_acc),
                            pruned_acc: Some(pruned_acc),
                            final_acc: evaluate(&tuned, test_set)?,
                            cluster_loss,
                            params,
                            macs,
                            speedup,
                            compression,
                        }
                    }
                };
                progress(&format!(
                    "seed {seed}: {criterion} p={p}: final accuracy {:.4}{}",
                    cell.final_acc,
                    cell.pruned_acc.map(|a| format!(" (pruned {a:.4})")).unwrap_or_default()
                ));
                cells.push(cell);
            }
        }
    }

    let rows = aggregate(&cells);
    let summary = summarize(&rows);
    Ok(CompareOutcome { cells, rows, summary })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Groups by (criterion, p) in that order; seeds are averaged in the order
/// they were run.
fn aggregate(cells: &[CellResult]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(Criterion, u64), Vec<&CellResult>> = BTreeMap::new();
    for c in cells {
        groups.entry((c.criterion, c.p.to_bits())).or_default().push(c);
    }
    let mut rows: Vec<AggregateRow> = groups
        .into_values()
        .map(|g| {
            let finals: Vec<f64> = g.iter().map(|c| c.final_acc).collect();
            let pruned: Vec<f64> = g.iter().filter_map(|c| c.pruned_acc).collect();
            let first = g[0];
            AggregateRow {
                criterion: first.criterion,
                p: first.p,
                seeds: g.len(),
                baseline_acc_mean: mean(&g.iter().map(|c| c.baseline_acc).collect::<Vec<_>>()),
                pruned_acc_mean: (!pruned.is_empty()).then(|| mean(&pruned)),
                final_acc_mean: mean(&finals),
                final_acc_std: sample_std(&finals),
                params: first.params,
                macs: first.macs,
                speedup: first.speedup,
                compression: first.compression,
            }
        })
        .collect();
    rows.sort_by(|a, b| a.criterion.cmp(&b.criterion).then(a.p.total_cmp(&b.p)));
    rows
}

fn summarize(rows: &[AggregateRow]) -> CompareSummary {
    let mut checks = Vec::new();
    for cluster in rows.iter().filter(|r| r.criterion == Criterion::Cluster) {
        for other in rows.iter().filter(|r| r.criterion != Criterion::Cluster && r.p == cluster.p) {
            checks.push(PairwiseCheck {
                other: other.criterion,
                p: cluster.p,
                cluster_mean: cluster.final_acc_mean,
                other_mean: other.final_acc_mean,
            });
        }
    }
    CompareSummary { checks }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

#[derive(Serialize)]
struct CurvePoint {
    p: f64,
    final_acc_mean: f64,
    final_acc_std: f64,
    pruned_acc_mean: Option<f64>,
    speedup: f64,
}

impl CompareOutcome {
    /// Outcome holding only aggregated rows, e.g. read back from
    /// `compare.csv`.
    pub fn from_rows(rows: Vec<AggregateRow>) -> Self {
        let summary = summarize(&rows);
        Self {
            cells: Vec::new(),
            rows,
            summary,
        }
    }

    pub fn read_rows(path: &Path) -> Result<Vec<AggregateRow>> {
        let file = std::fs::File::open(path).map_err(io_err(path))?;
        csv::Reader::from_reader(file)
            .deserialize()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(Into::into)
    }

    /// Writes `compare_cells.csv` (every run), `compare.csv` (one row per
    /// criterion and ratio), `curve_<criterion>.csv` and `summary.txt`.
    /// Returns the paths written.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut written = Vec::new();
        let cells = dir.join("compare_cells.csv");
        write_rows(&cells, &self.cells)?;
        written.push(cells);
        let combined = dir.join("compare.csv");
        write_rows(&combined, &self.rows)?;
        written.push(combined);

        let mut by_criterion: BTreeMap<Criterion, Vec<CurvePoint>> = BTreeMap::new();
        for r in &self.rows {
            by_criterion.entry(r.criterion).or_default().push(CurvePoint {
                p: r.p,
                final_acc_mean: r.final_acc_mean,
                final_acc_std: r.final_acc_std,
                pruned_acc_mean: r.pruned_acc_mean,
                speedup: r.speedup,
            });
        }
        for (criterion, points) in &by_criterion {
            let path = dir.join(format!("curve_{criterion}.csv"));
            write_rows(&path, points)?;
            written.push(path);
        }
        let summary = dir.join("summary.txt");
        std::fs::write(&summary, self.render_text()).map_err(io_err(&summary))?;
        written.push(summary);
        Ok(written)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<11} {:>6} {:>10} {:>10} {:>10} {:>8}",
            "criterion", "p", "pruned", "final", "std", "speedup"
        );
        for r in &self.rows {
            let pruned = r.pruned_acc_mean.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<11} {:>6.3} {:>10} {:>10.4} {:>10.4} {:>8.3}",
                r.criterion.name(),
                r.p,
                pruned,
                r.final_acc_mean,
                r.final_acc_std,
                r.speedup
            );
        }
        for other in [Criterion::Random, Criterion::WeightSum, Criterion::Apoz, Criterion::Scratch] {
            if let Some(ok) = self.summary.cluster_beats(other) {
                let _ = writeln!(
                    out,
                    "cluster >= {other} at every p: {}",
                    if ok { "yes" } else { "no" }
                );
            }
        }
        out
    }
}
