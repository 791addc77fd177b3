//! Acceptance checks, one per criterion. Runs as a plain binary so that every
//! criterion prints its PASS/FAIL line even when the others succeed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use clusterprune::cluster::{
    assign_clusters, cluster_loss, cluster_loss_grad, pruned_count, shrink_clusters, uniform_ratios,
    ClusterGradMode, ClusterSpec, LayerRatios,
};
use clusterprune::experiment::{run_compare, select_filters, Criterion, DataSource, ExperimentConfig};
use clusterprune::graph::{count_costs, save_checkpoint, ModelGraph, Params};
use clusterprune::models::Architecture;
use clusterprune::prune::{make_report, prune_and_merge, select_cluster, KeptFilter};
use clusterprune::tensor::{
    avgpool_backward, avgpool_forward, conv2d_backward, conv2d_forward, conv2d_oracle, conv_output_extent,
    dense_backward, dense_forward, grad_check, maxpool_backward, maxpool_forward, relu_backward, relu_forward,
    softmax_cross_entropy, Padding,
};
use clusterprune::train::{evaluate, finetune, train, train_observed};
use clusterprune::{GraphBuilder, Rng, Tensor};

/// Test accuracy of the plainly trained desk model (seed 0) on the default
/// synthetic task, measured when this suite was first run.
const DESK_BASELINE_ACC: f64 = 1.0;
const DESK_BASELINE_TOL: f64 = 0.01;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

fn randomize_biases(model: &mut ModelGraph, rng: &mut Rng) {
    for name in model.parameter_layers().into_iter().map(String::from).collect::<Vec<_>>() {
        let mut p = model.layer_params(&name).unwrap().clone();
        p.bias = Tensor::from_fn(p.bias.shape(), |_| 0.1 * rng.normal());
        model.set_params(&name, p).unwrap();
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn desk_config() -> ExperimentConfig {
    ExperimentConfig::default()
}

// 1 -------------------------------------------------------------------------

fn oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let mut rng = Rng::new(1);
    let mut shapes = 0;
    let mut worst = 0.0f64;
    while shapes < 1200 {
        let h = 1 + rng.below(8);
        let w = 1 + rng.below(8);
        let m = 1 + rng.below(8);
        let n = 1 + rng.below(8);
        let d = 1 + rng.below(5);
        let stride = 1 + rng.below(3);
        let padding = match rng.below(3) {
            0 => Padding::Valid,
            1 => Padding::Same,
            _ => Padding::Explicit(rng.below(3)),
        };
        let pad = padding.amount(d);
        if conv_output_extent(h, d, stride, pad).is_none() || conv_output_extent(w, d, stride, pad).is_none() {
            continue;
        }
        let x = random_tensor(&[h, w, m], &mut rng);
        let k = random_tensor(&[d, d, m, n], &mut rng);
        let b = random_tensor(&[n], &mut rng);
        let fast = conv2d_forward(&x, &k, &b, stride, padding).map_err(|e| e.to_string())?;
        let slow = conv2d_oracle(&x, &k, &b, stride, padding).map_err(|e| e.to_string())?;
        let rel = fast.rel_diff(&slow).map_err(|e| e.to_string())?;
        worst = worst.max(rel);
        shapes += 1;
    }
    let elapsed = started.elapsed();
    ensure(worst < 1e-12, || format!("max relative difference {worst:e}"))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {}", secs(elapsed)))?;
    Ok(format!("{shapes} shapes, max relative difference {worst:.1e}, {}", secs(elapsed)))
}

// 2 -------------------------------------------------------------------------

/// Worst finite-difference error of `instances` random draws of one op.
fn fd_suite(name: &str, instances: usize, mut one: impl FnMut(&mut Rng) -> Result<f64, String>) -> Result<(String, f64), String> {
    let mut rng = Rng::with_stream(2, name.len() as u64);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        worst = worst.max(one(&mut rng)?);
    }
    ensure(worst < 1e-5, || format!("{name}: relative error {worst:e}"))?;
    Ok((name.to_string(), worst))
}

fn e2s(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Scalar probe `sum(r * y)` so that the output gradient is `r`.
fn probe(y: &Tensor, r: &Tensor) -> f64 {
    y.dot(r).expect("same shapes")
}

fn gradient_suite() -> Outcome {
    const N: usize = 100;
    const STEP: f64 = 1e-6;
    let mut results = Vec::new();

    results.push(fd_suite("conv2d", N, |rng| {
        let (h, w) = (2 + rng.below(5), 2 + rng.below(5));
        let (m, n) = (1 + rng.below(3), 1 + rng.below(3));
        let d = 1 + rng.below(3);
        let stride = 1 + rng.below(2);
        let padding = if rng.below(2) == 0 { Padding::Same } else { Padding::Valid };
        if conv_output_extent(h, d, stride, padding.amount(d)).is_none()
            || conv_output_extent(w, d, stride, padding.amount(d)).is_none()
        {
            return Ok(0.0);
        }
        let x = random_tensor(&[h, w, m], rng);
        let k = random_tensor(&[d, d, m, n], rng);
        let b = random_tensor(&[n], rng);
        let y = conv2d_forward(&x, &k, &b, stride, padding).map_err(e2s)?;
        let r = random_tensor(y.shape(), rng);
        let g = conv2d_backward(&x, &k, &r, stride, padding).map_err(e2s)?;
        let fx = |t: &Tensor| probe(&conv2d_forward(t, &k, &b, stride, padding).unwrap(), &r);
        let fk = |t: &Tensor| probe(&conv2d_forward(&x, t, &b, stride, padding).unwrap(), &r);
        let fb = |t: &Tensor| probe(&conv2d_forward(&x, &k, t, stride, padding).unwrap(), &r);
        Ok(grad_check(fx, &x, &g.input, STEP)
            .map_err(e2s)?
            .max(grad_check(fk, &k, &g.filters, STEP).map_err(e2s)?)
            .max(grad_check(fb, &b, &g.bias, STEP).map_err(e2s)?))
    })?);

    results.push(fd_suite("dense", N, |rng| {
        let (i, o) = (1 + rng.below(12), 1 + rng.below(6));
        let x = random_tensor(&[i], rng);
        let w = random_tensor(&[i, o], rng);
        let b = random_tensor(&[o], rng);
        let r = random_tensor(&[o], rng);
        let g = dense_backward(&x, &w, &r).map_err(e2s)?;
        let fx = |t: &Tensor| probe(&dense_forward(t, &w, &b).unwrap(), &r);
        let fw = |t: &Tensor| probe(&dense_forward(&x, t, &b).unwrap(), &r);
        let fb = |t: &Tensor| probe(&dense_forward(&x, &w, t).unwrap(), &r);
        Ok(grad_check(fx, &x, &g.input, STEP)
            .map_err(e2s)?
            .max(grad_check(fw, &w, &g.weights, STEP).map_err(e2s)?)
            .max(grad_check(fb, &b, &g.bias, STEP).map_err(e2s)?))
    })?);

    results.push(fd_suite("relu", N, |rng| {
        let x = random_tensor(&[1 + rng.below(20)], rng);
        let r = random_tensor(x.shape(), rng);
        let g = relu_backward(&x, &r).map_err(e2s)?;
        grad_check(|t| probe(&relu_forward(t), &r), &x, &g, STEP).map_err(e2s)
    })?);

    results.push(fd_suite("maxpool", N, |rng| {
        let window = 1 + rng.below(3);
        let stride = 1 + rng.below(2);
        let (h, w, c) = (window + rng.below(5), window + rng.below(5), 1 + rng.below(3));
        let x = random_tensor(&[h, w, c], rng);
        let (y, cache) = maxpool_forward(&x, window, stride).map_err(e2s)?;
        let r = random_tensor(y.shape(), rng);
        let g = maxpool_backward(&cache, &r).map_err(e2s)?;
        grad_check(|t| probe(&maxpool_forward(t, window, stride).unwrap().0, &r), &x, &g, STEP).map_err(e2s)
    })?);

    results.push(fd_suite("avgpool", N, |rng| {
        let window = 1 + rng.below(3);
        let stride = 1 + rng.below(2);
        let (h, w, c) = (window + rng.below(5), window + rng.below(5), 1 + rng.below(3));
        let x = random_tensor(&[h, w, c], rng);
        let y = avgpool_forward(&x, window, stride).map_err(e2s)?;
        let r = random_tensor(y.shape(), rng);
        let g = avgpool_backward(x.shape(), window, stride, &r).map_err(e2s)?;
        grad_check(|t| probe(&avgpool_forward(t, window, stride).unwrap(), &r), &x, &g, STEP).map_err(e2s)
    })?);

    results.push(fd_suite("softmax-ce", N, |rng| {
        let c = 2 + rng.below(8);
        let z = Tensor::from_fn(&[c], |_| 3.0 * rng.uniform_range(-1.0, 1.0));
        let label = rng.below(c);
        let (_, g) = softmax_cross_entropy(&z, label).map_err(e2s)?;
        grad_check(|t| softmax_cross_entropy(t, label).unwrap().0, &z, &g, STEP).map_err(e2s)
    })?);

    results.push(fd_suite("model-backward", N, |rng| {
        let residual = rng.below(2) == 0;
        let b = GraphBuilder::new(&[5, 5, 2]).conv("c1", 3, 3, 1, Padding::Same).relu("r1");
        let b = if residual { b.residual_block("res", 2) } else { b.conv("c2", 2, 2, 1, Padding::Valid).relu("r2") };
        let mut model = b.maxpool("pool", 2, 2).flatten("flat").dense("fc", 3).build(rng).map_err(e2s)?;
        // zero biases leave exact zeros in front of some ReLUs, where the
        // finite difference straddles the kink
        randomize_biases(&mut model, rng);
        let x = random_tensor(&[5, 5, 2], rng);
        let label = rng.below(3);
        let bp = model.backward(&x, label).map_err(e2s)?;
        let mut worst = 0.0f64;
        for (name, p) in model.params() {
            let loss_with = |weights: &Tensor, bias: &Tensor| {
                let mut m = model.clone();
                m.set_params(
                    name,
                    Params {
                        weights: weights.clone(),
                        bias: bias.clone(),
                    },
                )
                .unwrap();
                let z = m.logits(&x).unwrap();
                softmax_cross_entropy(&z, label).unwrap().0
            };
            worst = worst.max(grad_check(|t| loss_with(t, &p.bias), &p.weights, &bp.grads[name].weights, STEP).map_err(e2s)?);
            worst = worst.max(grad_check(|t| loss_with(&p.weights, t), &p.bias, &bp.grads[name].bias, STEP).map_err(e2s)?);
        }
        Ok(worst)
    })?);

    for mode in [ClusterGradMode::FrozenCentroid, ClusterGradMode::Differentiated] {
        let name = match mode {
            ClusterGradMode::FrozenCentroid => "cluster-loss",
            ClusterGradMode::Differentiated => "cluster-loss (differentiated)",
        };
        results.push(fd_suite(name, N, |rng| {
            let widths = vec![2 + rng.below(7), 2 + rng.below(7)];
            let model = Architecture::Cnn { filters: widths }.build(&[4, 4, 1], 2, rng).map_err(e2s)?;
            let p = [0.125, 0.25, 0.375, 0.5][rng.below(4)];
            let spec = ClusterSpec::for_model(&model, &uniform_ratios(&model, p)).map_err(e2s)?;
            let grads = cluster_loss_grad(&model, &spec, mode).map_err(e2s)?;
            let mut worst = 0.0f64;
            for (name, p) in model.params() {
                let zero = p.zeros_like();
                let g = grads.get(name).unwrap_or(&zero);
                let loss_with = |weights: &Tensor, bias: &Tensor| {
                    let mut m = model.clone();
                    m.set_params(
                        name,
                        Params {
                            weights: weights.clone(),
                            bias: bias.clone(),
                        },
                    )
                    .unwrap();
                    cluster_loss(&m, &spec).unwrap().total
                };
                worst = worst.max(grad_check(|t| loss_with(t, &p.bias), &p.weights, &g.weights, STEP).map_err(e2s)?);
                worst = worst.max(grad_check(|t| loss_with(&p.weights, t), &p.bias, &g.bias, STEP).map_err(e2s)?);
            }
            Ok(worst)
        })?);
    }

    let detail: Vec<String> = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Ok(format!("{N} instances each; worst relative error: {}", detail.join(", ")))
}

// 3 -------------------------------------------------------------------------

fn exact_merge() -> Outcome {
    let mut worst = 0.0f64;
    let models: Vec<(&str, ModelGraph)> = vec![
        (
            "cnn",
            Architecture::Cnn {
                filters: vec![8, 16, 16],
            }
            .build(&[12, 12, 1], 10, &mut Rng::new(0))
            .map_err(e2s)?,
        ),
        (
            "residual",
            Architecture::Residual { stem: 8, block: 16 }
                .build(&[12, 12, 3], 10, &mut Rng::new(0))
                .map_err(e2s)?,
        ),
    ];
    let mut rng = Rng::new(3);
    for (label, mut model) in models {
        // non-zero biases, so the merge has something to get wrong
        randomize_biases(&mut model, &mut rng);
        for p in [0.25, 0.5] {
            let spec = ClusterSpec::for_model(&model, &uniform_ratios(&model, p)).map_err(e2s)?;
            let equal = shrink_clusters(&model, &spec, 0.0).map_err(e2s)?;
            let decision = select_cluster(&equal, &spec).map_err(e2s)?;
            let pruned = prune_and_merge(&equal, &decision, KeptFilter::AsTrained).map_err(e2s)?;
            for _ in 0..100 {
                let x = Tensor::from_fn(equal.input_shape(), |_| rng.uniform());
                let gap = equal
                    .logits(&x)
                    .map_err(e2s)?
                    .max_abs_diff(&pruned.logits(&x).map_err(e2s)?)
                    .map_err(e2s)?;
                worst = worst.max(gap);
            }
            ensure(worst < 1e-10, || format!("{label} p={p}: logit gap {worst:e}"))?;
        }
    }
    Ok(format!("CNN and residual net at p=0.25 and 0.5, 100 inputs each: max |logit gap| {worst:.1e}"))
}

// 4 -------------------------------------------------------------------------

fn near_equivalence() -> Outcome {
    let started = Instant::now();
    let mut cfg = desk_config();
    cfg.ratios = vec![0.25; 3];
    let (train_set, test_set) = cfg.data.load().map_err(e2s)?;
    let init = cfg.init_model(&train_set, 0).map_err(e2s)?;
    let spec = ClusterSpec::for_model(&init, &cfg.layer_ratios(&init).map_err(e2s)?).map_err(e2s)?;
    let schedule = cfg.train.lr.clone();
    let epochs = cfg.train.epochs;
    // one checkpoint at the end of every learning-rate stage
    let is_checkpoint = |e: usize| e + 1 == epochs || schedule.rate_at(e + 1) != schedule.rate_at(e);
    let mut checkpoints: Vec<(usize, f64, f64, f64)> = Vec::new();
    let mut failure = None;
    train_observed(&init, &train_set, None, Some(&spec), &cfg.train, |m, model| {
        if !is_checkpoint(m.epoch) {
            return Ok(());
        }
        let acc = evaluate(model, &test_set)?;
        match select_cluster(model, &spec).and_then(|d| prune_and_merge(model, &d, KeptFilter::AsTrained)) {
            Ok(pruned) => {
                let pruned_acc = evaluate(&pruned, &test_set)?;
                checkpoints.push((m.epoch, m.cluster_loss_end(), acc, pruned_acc));
            }
            Err(e) => failure = Some(e.to_string()),
        }
        Ok(())
    })
    .map_err(e2s)?;
    if let Some(f) = failure {
        return Err(f);
    }
    let elapsed = started.elapsed();
    let drops: Vec<f64> = checkpoints.iter().map(|c| (c.2 - c.3).max(0.0)).collect();
    let losses: Vec<f64> = checkpoints.iter().map(|c| c.1).collect();
    let trail: Vec<String> = checkpoints
        .iter()
        .zip(&drops)
        .map(|(c, d)| format!("epoch {} loss {:.4} drop {:.3}", c.0, c.1, d))
        .collect();
    let last_drop = *drops.last().unwrap();
    ensure(last_drop <= 0.02, || format!("final drop {last_drop} > 0.02; {}", trail.join("; ")))?;
    ensure(losses.windows(2).all(|w| w[1] < w[0]), || {
        format!("cluster loss did not decrease across checkpoints: {}", trail.join("; "))
    })?;
    ensure(drops.windows(2).all(|w| w[1] <= w[0]), || {
        format!("drop not monotone in cluster loss: {}", trail.join("; "))
    })?;
    ensure(elapsed < Duration::from_secs(600), || format!("took {}", secs(elapsed)))?;
    Ok(format!("lambda 0.05, p 0.25: {}; {}", trail.join("; "), secs(elapsed)))
}

// 5 -------------------------------------------------------------------------

fn compression_formula() -> Outcome {
    let model = Architecture::Cnn {
        filters: vec![16, 32, 32],
    }
    .build(&[12, 12, 1], 10, &mut Rng::new(0))
    .map_err(e2s)?;
    let ratios: LayerRatios = [("conv1", 0.5), ("conv2", 0.5), ("conv3", 0.0)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    let spec = ClusterSpec::for_model(&model, &ratios).map_err(e2s)?;
    let decision = select_cluster(&model, &spec).map_err(e2s)?;
    let pruned = prune_and_merge(&model, &decision, KeptFilter::AsTrained).map_err(e2s)?;
    let report = make_report(&model, &pruned, &decision).map_err(e2s)?;
    let conv2 = report.layers.iter().find(|l| l.layer == "conv2").ok_or("conv2 missing")?;
    let measured = conv2.macs_after as f64 / conv2.macs_before as f64;
    ensure(measured == 0.25 && conv2.cost_ratio == 0.25, || {
        format!("conv2 MAC ratio {measured}, reported {}", conv2.cost_ratio)
    })?;

    // every cell of the comparison grid
    let cfg = desk_config();
    let (train_set, _) = cfg.data.load().map_err(e2s)?;
    let sample = train_set.head(50);
    let mut cells = 0;
    for p in [0.125, 0.25, 0.375, 0.5] {
        let ratios = uniform_ratios(&model, p);
        for criterion in Criterion::ALL {
            let used = if criterion == Criterion::Scratch { Criterion::Cluster } else { criterion };
            let decision = select_filters(used, &model, &ratios, None, &sample, 0, 0).map_err(e2s)?;
            let pruned = prune_and_merge(&model, &decision, KeptFilter::AsTrained).map_err(e2s)?;
            let report = make_report(&model, &pruned, &decision).map_err(e2s)?;
            let recount = count_costs(&pruned);
            ensure(
                report.params_after == recount.total_params && report.macs_after == recount.total_macs,
                || format!("{criterion} p={p}: report disagrees with recount"),
            )?;
            for l in &report.layers {
                let c = recount.get(&l.layer).ok_or("layer missing from recount")?;
                ensure(l.params_after == c.params && l.macs_after == c.macs, || {
                    format!("{criterion} p={p} {}: per-layer counts disagree", l.layer)
                })?;
            }
            cells += 1;
        }
    }
    Ok(format!("conv2 MAC ratio {measured} at p=0.5/0.5; report equals recount in all {cells} grid cells"))
}

// 6 -------------------------------------------------------------------------

fn criterion_comparison() -> Outcome {
    let started = Instant::now();
    let mut cfg = desk_config();
    // narrower than the desk default so the 3-seed grid stays around two minutes
    cfg.architecture = Architecture::Cnn {
        filters: vec![8, 16, 16],
    };
    cfg.output_dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-compare");
    let (train_set, test_set) = cfg.data.load().map_err(e2s)?;
    let outcome = run_compare(&cfg, &train_set, &test_set, |_| {}).map_err(e2s)?;
    let written = outcome.write(&cfg.output_dir).map_err(e2s)?;
    ensure(outcome.rows.len() == 20, || format!("{} aggregated rows", outcome.rows.len()))?;
    let table = std::fs::read_to_string(cfg.output_dir.join("compare.csv")).map_err(e2s)?;
    ensure(table.lines().count() == 21, || "compare.csv should hold 20 rows".into())?;
    let beats_random = outcome.summary.cluster_beats(Criterion::Random).ok_or("no random rows")?;
    let soft: Vec<String> = [Criterion::WeightSum, Criterion::Apoz, Criterion::Scratch]
        .into_iter()
        .map(|c| format!("vs {c}: {}", if outcome.summary.cluster_beats(c) == Some(true) { "held" } else { "not held" }))
        .collect();
    let per_p: Vec<String> = outcome
        .summary
        .checks
        .iter()
        .filter(|c| c.other == Criterion::Random)
        .map(|c| format!("p={} {:.4}/{:.4}", c.p, c.cluster_mean, c.other_mean))
        .collect();
    ensure(beats_random, || format!("cluster < random at some p (cluster/random: {})", per_p.join(", ")))?;
    Ok(format!(
        "cluster >= random at every p (cluster/random: {}); soft ordering {}; {} files in {}; {}",
        per_p.join(", "),
        soft.join(", "),
        written.len(),
        cfg.output_dir.display(),
        secs(started.elapsed())
    ))
}

// 7 -------------------------------------------------------------------------

fn cluster_machinery() -> Outcome {
    let mut checked = 0;
    for n in 1..=64usize {
        // every ratio k/64 up to one half, which covers every attainable count
        for k in 0..=32usize {
            let p = k as f64 / 64.0;
            let a = assign_clusters(n, p).map_err(e2s)?;
            let pairs = (n as f64 * p).floor() as usize;
            let members = a.members();
            ensure(pruned_count(n, p) == pairs, || format!("N={n} p={p}: pruned count"))?;
            ensure(a.pair_count() == pairs && members.len() == n - pairs, || {
                format!("N={n} p={p}: {} clusters, {} pairs", members.len(), a.pair_count())
            })?;
            let mut seen = vec![false; n];
            for c in &members {
                ensure(!c.is_empty() && c.len() <= 2, || format!("N={n} p={p}: cluster size {}", c.len()))?;
                if c.len() == 2 {
                    ensure(c[1] == c[0] + 1 && c[0] % 2 == 0 && c[0] / 2 < pairs, || {
                        format!("N={n} p={p}: pair {c:?} not adjacent")
                    })?;
                }
                for &j in c {
                    ensure(!seen[j], || format!("N={n} p={p}: filter {j} twice"))?;
                    seen[j] = true;
                }
            }
            ensure(seen.iter().all(|&s| s), || format!("N={n} p={p}: filter missing"))?;
            checked += 1;
        }
    }
    let eight = assign_clusters(8, 0.5).map_err(e2s)?.members();
    ensure(eight == vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]], || format!("8 filters: {eight:?}"))?;

    // antisymmetry (exact) and contraction (1e-12) on random pairs
    let mut rng = Rng::new(7);
    let mut worst_contraction = 0.0f64;
    for trial in 0..200 {
        let model = Architecture::Cnn {
            filters: vec![2 + 2 * rng.below(4)],
        }
        .build(&[5, 5, 2], 3, &mut rng)
        .map_err(e2s)?;
        let spec = ClusterSpec::for_model(&model, &uniform_ratios(&model, 0.5)).map_err(e2s)?;
        let grads = cluster_loss_grad(&model, &spec, ClusterGradMode::FrozenCentroid).map_err(e2s)?;
        let p = model.layer_params("conv1").unwrap();
        let g = &grads["conv1"];
        let eta = 0.01 + 0.2 * rng.uniform();
        for pair in spec.get("conv1").unwrap().members() {
            let (a, b) = (pair[0], pair[1]);
            let (ga, gb) = (g.filter_vector(a), g.filter_vector(b));
            ensure(ga.iter().zip(&gb).all(|(x, y)| *x == -*y), || {
                format!("trial {trial}: gradient of pair ({a},{b}) not antisymmetric")
            })?;
            let (ka, kb) = (p.filter_vector(a), p.filter_vector(b));
            for r in 0..ka.len() {
                let before = ka[r] - kb[r];
                let after = (ka[r] - eta * ga[r]) - (kb[r] - eta * gb[r]);
                worst_contraction = worst_contraction.max((after - (1.0 - 2.0 * eta) * before).abs());
            }
        }
    }
    ensure(worst_contraction < 1e-12, || format!("contraction error {worst_contraction:e}"))?;
    Ok(format!(
        "{checked} (N, p) assignments exact; 8 filters at p=0.5 give {eight:?}; antisymmetry exact, contraction error {worst_contraction:.1e}"
    ))
}

// 8 -------------------------------------------------------------------------

fn determinism() -> Outcome {
    let mut cfg = desk_config();
    cfg.architecture = Architecture::Cnn { filters: vec![6, 8] };
    cfg.data = DataSource::Synthetic {
        seed: 4,
        train_samples: 200,
        test_samples: 100,
        classes: 5,
        difficulty: 0.6,
        size: 10,
    };
    cfg.ratios = vec![0.5, 0.25];
    cfg.train.epochs = 4;
    cfg.train.lr = clusterprune::train::LrSchedule::step_fifths(0.05, 4);
    cfg.finetune.epochs = 2;
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-determinism");
    let run = |tag: &str| -> Result<Vec<Vec<u8>>, String> {
        let out = dir.join(tag);
        std::fs::create_dir_all(&out).map_err(e2s)?;
        let (train_set, test_set) = cfg.data.load().map_err(e2s)?;
        let init = cfg.init_model(&train_set, 11).map_err(e2s)?;
        let spec = ClusterSpec::for_model(&init, &cfg.layer_ratios(&init).map_err(e2s)?).map_err(e2s)?;
        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = 11;
        let (trained, m1) = train(&init, &train_set, Some(&test_set), Some(&spec), &train_cfg).map_err(e2s)?;
        let pruned = prune_and_merge(&trained, &select_cluster(&trained, &spec).map_err(e2s)?, KeptFilter::AsTrained)
            .map_err(e2s)?;
        let (tuned, m2) = finetune(&pruned, &train_set, Some(&test_set), &cfg.finetune).map_err(e2s)?;
        save_checkpoint(&trained, Some(&spec), &out.join("trained.clp")).map_err(e2s)?;
        save_checkpoint(&tuned, None, &out.join("tuned.clp")).map_err(e2s)?;
        let mut c1 = Vec::new();
        let mut c2 = Vec::new();
        m1.write_csv(&mut c1).map_err(e2s)?;
        m2.write_csv(&mut c2).map_err(e2s)?;
        let mut files = vec![c1, c2];
        for f in ["trained.clp", "tuned.clp", "trained.clp.json", "tuned.clp.json"] {
            files.push(std::fs::read(out.join(f)).map_err(e2s)?);
        }
        Ok(files)
    };
    let a = run("a")?;
    let b = run("b")?;
    ensure(a == b, || "outputs differ between identical runs".into())?;
    let mut cmp = cfg.clone();
    cmp.compare.seeds = vec![3];
    cmp.compare.ratios = vec![0.25, 0.5];
    cmp.finetune.epochs = 1;
    let (train_set, test_set) = cmp.data.load().map_err(e2s)?;
    let mut grids = Vec::new();
    for tag in ["grid-a", "grid-b"] {
        let out = dir.join(tag);
        run_compare(&cmp, &train_set, &test_set, |_| {}).map_err(e2s)?.write(&out).map_err(e2s)?;
        grids.push(std::fs::read(out.join("compare_cells.csv")).map_err(e2s)?);
    }
    ensure(grids[0] == grids[1], || "compare grids differ".into())?;
    let bytes: usize = a.iter().map(Vec::len).sum();
    Ok(format!(
        "two identical train/prune/finetune runs: {} files, {bytes} bytes, bit-identical; compare grid CSVs identical",
        a.len()
    ))
}

// 9 -------------------------------------------------------------------------

fn end_to_end() -> Outcome {
    let started = Instant::now();
    let mut cfg = desk_config();
    cfg.ratios = vec![0.25; 3];
    let (train_set, test_set) = cfg.data.load().map_err(e2s)?;
    let init = cfg.init_model(&train_set, 0).map_err(e2s)?;
    let (baseline, _) = train(&init, &train_set, None, None, &cfg.train).map_err(e2s)?;
    let baseline_acc = evaluate(&baseline, &test_set).map_err(e2s)?;
    ensure((baseline_acc - DESK_BASELINE_ACC).abs() <= DESK_BASELINE_TOL, || {
        format!("baseline accuracy {baseline_acc} drifted from the pinned {DESK_BASELINE_ACC}")
    })?;

    let spec = ClusterSpec::for_model(&init, &cfg.layer_ratios(&init).map_err(e2s)?).map_err(e2s)?;
    let (clustered, _) = train(&init, &train_set, None, Some(&spec), &cfg.train).map_err(e2s)?;
    let decision = select_cluster(&clustered, &spec).map_err(e2s)?;
    let pruned = prune_and_merge(&clustered, &decision, cfg.kept_filter).map_err(e2s)?;
    let pruned_acc = evaluate(&pruned, &test_set).map_err(e2s)?;
    let (tuned, _) = finetune(&pruned, &train_set, None, &cfg.finetune).map_err(e2s)?;
    let final_acc = evaluate(&tuned, &test_set).map_err(e2s)?;
    let report = make_report(&clustered, &pruned, &decision).map_err(e2s)?;
    let elapsed = started.elapsed();
    ensure(final_acc >= baseline_acc - 0.01, || {
        format!("final {final_acc} vs baseline {baseline_acc}")
    })?;
    ensure(elapsed < Duration::from_secs(900), || format!("took {}", secs(elapsed)))?;
    Ok(format!(
        "baseline {baseline_acc:.4} (pinned {DESK_BASELINE_ACC}), pruned {pruned_acc:.4}, fine-tuned {final_acc:.4}, speedup {:.2}x, {}",
        report.speedup,
        secs(elapsed)
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("oracle equivalence", oracle_equivalence),
        ("gradient suite", gradient_suite),
        ("exact prune-and-merge", exact_merge),
        ("near-equivalence under small cluster loss", near_equivalence),
        ("compression and speedup formula", compression_formula),
        ("criterion comparison", criterion_comparison),
        ("cluster machinery", cluster_machinery),
        ("determinism", determinism),
        ("end-to-end pipeline", end_to_end),
    ];
    // `cargo test -- <filter>` style selection by number or name fragment
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let number = (i + 1).to_string();
        if !filters.is_empty() && !filters.iter().any(|f| *f == number || name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("acceptance {number} {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("acceptance {number} {name}: FAIL ({detail})");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
