//! Dataset-level evaluation and the `report.json` schema.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use gradirn_core::evaluation::{pair_metrics, MeanStd, PairMetrics};
use gradirn_core::{register_pair, RegistrationConfig, RegistrationParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::synth::SamplePair;

/// Environment variable capping the number of evaluation threads.
pub const THREADS_ENV: &str = "GRADIRN_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Option<Self> {
        MeanStd::of(values).map(|m| Stat {
            mean: m.mean,
            std: m.std,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    /// Dice per label after registration, keyed by label.
    pub dice: BTreeMap<String, f64>,
    pub initial_dice: BTreeMap<String, f64>,
    /// Hausdorff distance per label in pixels; `null` when a region is empty.
    pub hausdorff: BTreeMap<String, Option<f64>>,
    pub mean_dice: f64,
    pub initial_mean_dice: f64,
    pub mean_hausdorff: Option<f64>,
    pub folding_percent: f64,
    pub std_log_jac: f64,
    pub endpoint_error: Option<f64>,
    /// Mean magnitude of the ground-truth field (the endpoint error of the identity).
    pub gt_magnitude: Option<f64>,
    pub dissimilarity_before: f64,
    pub dissimilarity_after: f64,
}

impl PairRecord {
    fn new(id: &str, m: &PairMetrics) -> Self {
        let key = |l: u8| l.to_string();
        Self {
            id: id.to_string(),
            dice: m.labels.iter().map(|s| (key(s.label), s.dice)).collect(),
            initial_dice: m.labels.iter().map(|s| (key(s.label), s.initial_dice)).collect(),
            hausdorff: m.labels.iter().map(|s| (key(s.label), s.hausdorff)).collect(),
            mean_dice: m.mean_dice,
            initial_mean_dice: m.initial_mean_dice,
            mean_hausdorff: m.mean_hausdorff,
            folding_percent: m.folding_percent,
            std_log_jac: m.std_log_jac,
            endpoint_error: m.endpoint_error,
            gt_magnitude: m.gt_magnitude,
            dissimilarity_before: m.dissimilarity_before,
            dissimilarity_after: m.dissimilarity_after,
        }
    }
}

/// Aggregates over the evaluated pairs, each as mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub pairs: usize,
    pub skipped: usize,
    pub dice: Option<Stat>,
    pub initial_dice: Option<Stat>,
    pub dice_per_label: BTreeMap<String, Stat>,
    pub initial_dice_per_label: BTreeMap<String, Stat>,
    pub hausdorff: Option<Stat>,
    pub hausdorff_per_label: BTreeMap<String, Stat>,
    pub folding_percent: Option<Stat>,
    pub std_log_jac: Option<Stat>,
    pub endpoint_error: Option<Stat>,
    pub gt_magnitude: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: Vec<PairRecord>,
    pub aggregate: Aggregate,
}

/// Wall-clock seconds per pair, kept apart from the deterministic report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub seconds: BTreeMap<String, f64>,
    pub mean_seconds: f64,
}

type LabelColumn = dyn Fn(&PairRecord) -> Vec<(String, Option<f64>)>;

impl Aggregate {
    /// Recomputes every aggregate from the per-pair records alone.
    pub fn from_records(pairs: &[PairRecord], skipped: usize) -> Self {
        let col = |f: &dyn Fn(&PairRecord) -> Option<f64>| -> Option<Stat> {
            Stat::of(&pairs.iter().filter_map(f).collect::<Vec<_>>())
        };
        let per_label = |f: &LabelColumn| -> BTreeMap<String, Stat> {
            let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for p in pairs {
                for (k, v) in f(p) {
                    if let Some(v) = v {
                        by.entry(k).or_default().push(v);
                    }
                }
            }
            by.into_iter()
                .filter_map(|(k, v)| Stat::of(&v).map(|s| (k, s)))
                .collect()
        };
        Self {
            pairs: pairs.len(),
            skipped,
            dice: col(&|p| Some(p.mean_dice)),
            initial_dice: col(&|p| Some(p.initial_mean_dice)),
            dice_per_label: per_label(&|p| p.dice.iter().map(|(k, v)| (k.clone(), Some(*v))).collect()),
            initial_dice_per_label: per_label(&|p| p.initial_dice.iter().map(|(k, v)| (k.clone(), Some(*v))).collect()),
            hausdorff: col(&|p| p.mean_hausdorff),
            hausdorff_per_label: per_label(&|p| p.hausdorff.iter().map(|(k, v)| (k.clone(), *v)).collect()),
            folding_percent: col(&|p| Some(p.folding_percent)),
            std_log_jac: col(&|p| Some(p.std_log_jac)),
            endpoint_error: col(&|p| p.endpoint_error),
            gt_magnitude: col(&|p| p.gt_magnitude),
        }
    }
}

/// Thread count from [`THREADS_ENV`], if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

fn evaluate_one(
    pair: &SamplePair,
    params: &RegistrationParams<f32>,
    reg: &RegistrationConfig,
) -> Result<Option<(PairRecord, f64)>> {
    let (Some(ms), Some(fs)) = (&pair.moving_seg, &pair.fixed_seg) else {
        return Ok(None);
    };
    let start = Instant::now();
    let outcome = register_pair(&pair.moving, &pair.fixed, params, reg)?;
    let seconds = start.elapsed().as_secs_f64();
    let m = pair_metrics(&outcome, ms, fs, pair.gt_disp.as_ref())?;
    Ok(Some((PairRecord::new(&pair.id, &m), seconds)))
}

/// Registers and scores every pair; pairs without masks are skipped and
/// counted. Records are ordered as in `pairs` regardless of threading.
pub fn evaluate_pairs(
    pairs: &[SamplePair],
    params: &RegistrationParams<f32>,
    reg: &RegistrationConfig,
) -> Result<(EvalReport, TimingReport)> {
    params.check_against(reg)?;
    let run = || -> Result<Vec<_>> { pairs.par_iter().map(|p| evaluate_one(p, params, reg)).collect() };
    let results = match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Dataset(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let skipped = results.iter().filter(|r| r.is_none()).count();
    let (records, seconds): (Vec<_>, Vec<_>) = results.into_iter().flatten().unzip();
    let timing = TimingReport {
        seconds: records
            .iter()
            .map(|r| r.id.clone())
            .zip(seconds.iter().copied())
            .collect(),
        mean_seconds: if seconds.is_empty() {
            0.0
        } else {
            seconds.iter().sum::<f64>() / seconds.len() as f64
        },
    };
    let aggregate = Aggregate::from_records(&records, skipped);
    Ok((
        EvalReport {
            pairs: records,
            aggregate,
        },
        timing,
    ))
}

pub fn evaluate_dataset(
    ds: &Dataset,
    split: Option<&str>,
    params: &RegistrationParams<f32>,
    reg: &RegistrationConfig,
) -> Result<(EvalReport, TimingReport)> {
    let pairs = ds.load_split(split)?;
    if pairs.is_empty() {
        return Err(Error::Dataset(format!(
            "no samples in split {}",
            split.unwrap_or("(all)")
        )));
    }
    evaluate_pairs(&pairs, params, reg)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(Error::json(path))?;
    std::fs::write(path, text + "\n").map_err(Error::io(path))
}

/// `report.json` -> `report.timing.json`.
pub fn timing_path(report: &Path) -> std::path::PathBuf {
    let stem = report
        .file_stem()
        .map_or("report".into(), |s| s.to_string_lossy().into_owned());
    report.with_file_name(format!("{stem}.timing.json"))
}
