use clusterprune_demo::{compression_table, merge_deviation, training_curve};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn compression_table_matches_ratio_formula() {
    let t = parse(&compression_table("16, 32, 32", 0.5).unwrap());
    let layers = t["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 4);
    assert_eq!(layers[0]["cost_ratio"], 0.5);
    assert_eq!(layers[1]["cost_ratio"], 0.25);
    assert_eq!(layers[1]["filters_after"], 16);
    // the classifier only loses inputs
    assert_eq!(layers[3]["cost_ratio"], 0.5);
    assert!(t["speedup"].as_f64().unwrap() > 3.0);

    let none = parse(&compression_table("8", 0.0).unwrap());
    assert_eq!(none["speedup"], 1.0);
}

#[test]
fn compression_table_rejects_bad_input() {
    assert!(compression_table("16,x", 0.5).is_err());
    assert!(compression_table("", 0.5).is_err());
    assert!(compression_table("0", 0.5).is_err());
    assert!(compression_table("16", 0.75).is_err());
}

#[test]
fn deviation_vanishes_for_equal_members() {
    let points = parse(&merge_deviation(0.5, 3).unwrap());
    let points = points.as_array().unwrap();
    let dev: Vec<f64> = points.iter().map(|p| p["max_deviation"].as_f64().unwrap()).collect();
    assert!(dev[0] > 1e-3, "unshrunk clusters should change the logits: {dev:?}");
    assert!(*dev.last().unwrap() < 1e-10);
    assert_eq!(points.last().unwrap()["cluster_loss"], 0.0);
    assert!(dev.windows(2).all(|w| w[1] <= w[0]), "{dev:?}");
}

#[test]
fn training_curve_reports_every_epoch() {
    let strong = parse(&training_curve(5.0, 0.5, 6, 0).unwrap());
    let strong = strong.as_array().unwrap();
    assert_eq!(strong.len(), 6);
    let weak = parse(&training_curve(0.0, 0.5, 6, 0).unwrap());
    let last = |v: &Vec<Value>, k: &str| v.last().unwrap()[k].as_f64().unwrap();
    assert!(last(strong, "cluster_loss") < last(weak.as_array().unwrap(), "cluster_loss"));
    // with near-equal pairs pruning barely matters
    assert!((last(strong, "test_acc") - last(strong, "pruned_acc")).abs() <= 0.05);
    assert!(training_curve(0.05, 0.5, 1000, 0).is_err());
    assert_eq!(training_curve(0.05, 0.5, 2, 7).unwrap(), training_curve(0.05, 0.5, 2, 7).unwrap());
}
