use std::collections::BTreeMap;

use gradirn::dataset::{self, Dataset};
use gradirn::eval::{evaluate_dataset, write_json};
use gradirn::synth::SynthParams;
use gradirn_core::{RegistrationConfig, RegistrationParams, Variant};
use serde_json::Value;
use tempfile::tempdir;

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

fn stat(v: &Value) -> (f64, f64) {
    (v["mean"].as_f64().unwrap(), v["std"].as_f64().unwrap())
}

fn params() -> SynthParams {
    SynthParams {
        size: 32,
        deform_scale: 2.0,
        smoothness: 5.0,
        ..Default::default()
    }
}

/// Aggregates re-derived from the per-pair JSON records alone.
#[test]
fn aggregates_match_recomputation_from_pair_records() {
    let t = tempdir().unwrap();
    dataset::generate(t.path(), 11, &params(), 6, 0).unwrap();
    let reg = RegistrationConfig {
        levels: 2,
        steps_per_level: 2,
        ..Default::default()
    };
    let p = RegistrationParams::<f32>::init(&reg, 1.0, 5);
    let (report, _) = evaluate_dataset(&Dataset::open(t.path()).unwrap(), None, &p, &reg).unwrap();
    let path = t.path().join("report.json");
    write_json(&path, &report).unwrap();
    let json: Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    let pairs = json["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 6);

    let mut by_label: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut hd_by_label: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for p in pairs {
        for (k, v) in p["dice"].as_object().unwrap() {
            by_label.entry(k.clone()).or_default().push(v.as_f64().unwrap());
        }
        for (k, v) in p["hausdorff"].as_object().unwrap() {
            if let Some(v) = v.as_f64() {
                hd_by_label.entry(k.clone()).or_default().push(v);
            }
        }
        // the per-pair mean is the plain average over its labels
        let d: Vec<f64> = p["dice"]
            .as_object()
            .unwrap()
            .values()
            .map(|v| v.as_f64().unwrap())
            .collect();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        assert!((m - p["mean_dice"].as_f64().unwrap()).abs() < 1e-12);
    }
    let agg = &json["aggregate"];
    for (k, v) in &by_label {
        assert_eq!(stat(&agg["dice_per_label"][k]), mean_std(v), "label {k}");
    }
    for (k, v) in &hd_by_label {
        assert_eq!(stat(&agg["hausdorff_per_label"][k]), mean_std(v), "label {k}");
    }
    for key in [
        "mean_dice",
        "initial_mean_dice",
        "folding_percent",
        "std_log_jac",
        "endpoint_error",
        "gt_magnitude",
    ] {
        let col: Vec<f64> = pairs.iter().map(|p| p[key].as_f64().unwrap()).collect();
        let agg_key = match key {
            "mean_dice" => "dice",
            "initial_mean_dice" => "initial_dice",
            k => k,
        };
        assert_eq!(stat(&agg[agg_key]), mean_std(&col), "{key}");
    }
}

/// A VN_NOGRAD model with zero final layers does not move anything.
#[test]
fn zero_effect_model_reproduces_initial_scores() {
    let t = tempdir().unwrap();
    dataset::generate(t.path(), 12, &params(), 4, 0).unwrap();
    let reg = RegistrationConfig {
        variant: Variant::VnNoGrad,
        levels: 2,
        steps_per_level: 2,
        ..Default::default()
    };
    let p = RegistrationParams::<f32>::init(&reg, 1.0, 0);
    let (report, _) = evaluate_dataset(&Dataset::open(t.path()).unwrap(), None, &p, &reg).unwrap();
    for r in &report.pairs {
        assert_eq!(r.dice, r.initial_dice);
        assert_eq!(r.folding_percent, 0.0);
        assert_eq!(r.std_log_jac, 0.0);
        assert_eq!(r.endpoint_error, r.gt_magnitude);
        assert_eq!(r.dissimilarity_after, r.dissimilarity_before);
    }
}
