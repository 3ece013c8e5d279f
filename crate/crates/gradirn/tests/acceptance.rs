//! Acceptance suite. One test per criterion; run with `--nocapture` to see the
//! measured values next to each verdict. Criteria 4, 5 and 7 share four
//! training runs (VN twice, VN_NOGRAD, RC_CNN), so the whole file takes a
//! while on a single core. Artifacts are kept under the cargo target tmpdir.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use gradirn::checkpoint;
use gradirn::dataset::{self, Dataset};
use gradirn::eval::{evaluate_dataset, write_json, EvalReport};
use gradirn::gradcheck::run_all;
use gradirn::synth::{pair_rng, synth_pair, Split, SynthParams};
use gradirn::train::train_dataset;
use gradirn_core::registration::DEFAULT_TAU_INIT;
use gradirn_core::similarity::warped_dissimilarity;
use gradirn_core::{
    build_pyramid, dice, hausdorff, jacobian_determinant, jacobian_stats, register_pair, DisplacementField, LabelMask,
    RegistrationConfig, RegistrationParams, SimilarityKind, Tape, Tensor, TrainConfig, Variant,
};

const TRAIN_PAIRS: usize = 200;
const VAL_PAIRS: usize = 20;
const TEST_PAIRS: usize = 50;
const TRAIN_SEED: u64 = 0;
const TEST_SEED: u64 = 1;

fn verdict(n: usize, ok: bool, detail: &str) {
    println!("criterion {n}: {} | {detail}", if ok { "PASS" } else { "FAIL" });
}

fn work() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    })
}

fn synth_params() -> SynthParams {
    SynthParams {
        size: 64,
        deform_scale: 4.0,
        ..Default::default()
    }
}

/// Training set (with a validation split) and a held-out test set drawn from
/// a different master seed.
fn datasets() -> &'static (PathBuf, PathBuf) {
    static DS: OnceLock<(PathBuf, PathBuf)> = OnceLock::new();
    DS.get_or_init(|| {
        let train = work().join("data-train");
        let test = work().join("data-test");
        dataset::generate(&train, TRAIN_SEED, &synth_params(), TRAIN_PAIRS, VAL_PAIRS).unwrap();
        dataset::generate(&test, TEST_SEED, &synth_params(), TEST_PAIRS, 0).unwrap();
        (train, test)
    })
}

struct Run {
    dir: PathBuf,
    report_path: PathBuf,
    report: EvalReport,
    seconds: f64,
}

/// The criterion 4 protocol for one variant.
fn train_and_test(variant: Variant, tag: &str) -> Run {
    let (train, test) = datasets();
    let start = Instant::now();
    let reg = RegistrationConfig {
        variant,
        similarity: SimilarityKind::Ssd,
        lambda: 0.05,
        ..Default::default()
    };
    let cfg = TrainConfig {
        lr: 1e-4,
        lambda: 0.05,
        epochs: 30,
        seed: 0,
        ..Default::default()
    };
    let dir = work().join(tag);
    let ds = Dataset::open(train).unwrap();
    train_dataset(&ds, &cfg, &reg, DEFAULT_TAU_INIT, &dir, |e| {
        eprintln!(
            "[{tag}] epoch {:>2} train {:.6} val {:.6}",
            e.epoch,
            e.train_loss,
            e.val_loss.unwrap_or(f64::NAN)
        );
    })
    .unwrap();
    let ck = checkpoint::load::<f32>(&dir).unwrap();
    let (report, _) = evaluate_dataset(&Dataset::open(test).unwrap(), None, &ck.params, &ck.registration).unwrap();
    let report_path = dir.join("report.json");
    write_json(&report_path, &report).unwrap();
    Run {
        dir,
        report_path,
        report,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn vn() -> &'static Run {
    static R: OnceLock<Run> = OnceLock::new();
    R.get_or_init(|| train_and_test(Variant::Vn, "vn"))
}

fn vn_repeat() -> &'static Run {
    static R: OnceLock<Run> = OnceLock::new();
    R.get_or_init(|| train_and_test(Variant::Vn, "vn-repeat"))
}

fn vn_nograd() -> &'static Run {
    static R: OnceLock<Run> = OnceLock::new();
    R.get_or_init(|| train_and_test(Variant::VnNoGrad, "vn-nograd"))
}

fn rc_cnn() -> &'static Run {
    static R: OnceLock<Run> = OnceLock::new();
    R.get_or_init(|| train_and_test(Variant::RcCnn, "rc-cnn"))
}

fn mean(s: &Option<gradirn::eval::Stat>) -> f64 {
    s.as_ref().expect("statistic present").mean
}

/// Every file under `dir`, relative path and bytes, sorted by path.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

#[test]
fn criterion_1_parameter_count() {
    let n = RegistrationParams::<f32>::init(&RegistrationConfig::default(), DEFAULT_TAU_INIT, 0).count_parameters();
    let ok = n == 88_527;
    verdict(1, ok, &format!("count_parameters = {n}, expected 88527"));
    assert!(ok);
}

#[test]
fn criterion_2_gradient_oracles() {
    let start = Instant::now();
    let results = run_all(0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name.clone()).collect();
    let worst = results.iter().map(|r| r.max_rel_err / r.tolerance).fold(0.0, f64::max);
    let ok = failed.is_empty() && secs < 120.0;
    verdict(
        2,
        ok,
        &format!(
            "{} checks, failed {:?}, worst err/tol {worst:.2e}, {secs:.1}s",
            results.len(),
            failed
        ),
    );
    assert!(ok);
}

/// Dissimilarity at the start of `level`: the previous level's last field,
/// upsampled, against that level's pyramid images.
fn level_start(moving: &[Tensor<f32>], fixed: &[Tensor<f32>], level: usize, prev: &DisplacementField<f32>) -> f32 {
    let up = prev.upsample().unwrap();
    warped_dissimilarity(SimilarityKind::Ssd, &moving[level], &fixed[level], up.grid()).unwrap()
}

fn pyramid(image: &Tensor<f32>, levels: usize) -> Vec<Tensor<f32>> {
    let mut tape = Tape::inference();
    let v = tape.constant(image.clone());
    build_pyramid(&mut tape, v, levels)
        .unwrap()
        .into_iter()
        .map(|l| tape.value(l).clone())
        .collect()
}

#[test]
fn criterion_3_descent_property() {
    let start = Instant::now();
    let reg = RegistrationConfig {
        variant: Variant::PlainGd,
        similarity: SimilarityKind::Ssd,
        alpha: 0.01,
        plain_gd_step: 1e-2,
        dump_intermediate: true,
        ..Default::default()
    };
    let params = RegistrationParams::<f32>::empty();
    let mut halved = 0;
    let mut monotone = 0;
    let mut ratios = Vec::new();
    for i in 0..20u64 {
        let pair = synth_pair(&mut pair_rng(3, Split::Train, i), format!("c3-{i}"), &synth_params()).unwrap();
        let out = register_pair(&pair.moving, &pair.fixed, &params, &reg).unwrap();
        let ratio = out.dissimilarity_after as f64 / out.dissimilarity_before as f64;
        ratios.push(ratio);
        if ratio < 0.5 {
            halved += 1;
        }
        let mp = pyramid(&pair.moving, reg.levels);
        let fp = pyramid(&pair.fixed, reg.levels);
        let e = &out.trajectory.as_ref().unwrap().entries;
        let mut ok = true;
        for level in 0..reg.levels {
            let first = level * reg.steps_per_level + 1;
            let start = if level == 0 {
                e[0].dissimilarity
            } else {
                level_start(&mp, &fp, level, &e[first - 1].field)
            };
            let mut prev = start;
            for entry in &e[first..first + reg.steps_per_level] {
                assert_eq!(entry.level, level);
                ok &= entry.dissimilarity <= prev;
                prev = entry.dissimilarity;
            }
        }
        if ok {
            monotone += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let ok = halved >= 18 && monotone == 20 && secs < 60.0;
    verdict(
        3,
        ok,
        &format!(
            "final/initial SSD < 0.5 on {halved}/20 pairs (need 18), mean ratio {mean_ratio:.3}, \
             per-level monotone on {monotone}/20, {secs:.1}s"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_4_training_improvement() {
    let r = vn();
    let g = &r.report.aggregate;
    let (d0, d1) = (mean(&g.initial_dice), mean(&g.dice));
    let (epe, gt) = (mean(&g.endpoint_error), mean(&g.gt_magnitude));
    let fold = mean(&g.folding_percent);
    let ok = g.pairs == TEST_PAIRS && d1 - d0 >= 0.15 && epe < 0.6 * gt && fold < 0.5;
    verdict(
        4,
        ok,
        &format!(
            "dice {d0:.4} -> {d1:.4} (+{:.4}, need 0.15), EPE {epe:.3} vs 0.6 x {gt:.3} = {:.3}, \
             folding {fold:.4}% (need < 0.5), {:.0}s",
            d1 - d0,
            0.6 * gt,
            r.seconds
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_5_ablation_direction() {
    let d = |r: &Run| mean(&r.report.aggregate.dice);
    let (v, n, c) = (d(vn()), d(vn_nograd()), d(rc_cnn()));
    let ok = v >= n + 0.01 && v >= c + 0.01;
    verdict(
        5,
        ok,
        &format!(
            "test dice VN {v:.4}, VN_NOGRAD {n:.4} (gap {:+.4}), RC_CNN {c:.4} (gap {:+.4}), need gaps >= 0.01",
            v - n,
            v - c
        ),
    );
    assert!(ok);
}

fn exact(failures: &mut Vec<String>, name: &str, got: f64, want: f64) {
    if got != want {
        failures.push(format!("{name}: got {got}, want {want}"));
    }
}

#[test]
fn criterion_6_metric_examples() {
    let mut failures = Vec::new();
    // single pixels at (0,0) and (3,4)
    let mut a = vec![0u8; 25];
    let mut b = vec![0u8; 25];
    a[0] = 1;
    b[3 * 5 + 4] = 1;
    let (ma, mb) = (LabelMask::new(5, 5, a).unwrap(), LabelMask::new(5, 5, b).unwrap());
    exact(
        &mut failures,
        "hausdorff single pixels",
        hausdorff(&ma, &mb, 1).unwrap(),
        5.0,
    );
    exact(
        &mut failures,
        "hausdorff symmetric",
        hausdorff(&mb, &ma, 1).unwrap(),
        5.0,
    );
    exact(
        &mut failures,
        "hausdorff identical",
        hausdorff(&ma, &ma, 1).unwrap(),
        0.0,
    );
    // |A| = |B| = 4, overlap 2
    let ra = LabelMask::new(1, 6, vec![1, 1, 1, 1, 0, 0]).unwrap();
    let rb = LabelMask::new(1, 6, vec![0, 0, 1, 1, 1, 1]).unwrap();
    exact(&mut failures, "dice half overlap", dice(&ra, &rb, 1).unwrap(), 0.5);
    exact(&mut failures, "dice identical", dice(&ra, &ra, 1).unwrap(), 1.0);
    let da = LabelMask::new(1, 4, vec![1, 1, 0, 0]).unwrap();
    let db = LabelMask::new(1, 4, vec![0, 0, 1, 1]).unwrap();
    exact(&mut failures, "dice disjoint", dice(&da, &db, 1).unwrap(), 0.0);

    let dilation = DisplacementField::<f64>::from_fn(8, 8, 0, |y, x| (0.1 * y as f64, 0.1 * x as f64));
    let det = jacobian_determinant(&dilation).unwrap();
    for y in 1..7 {
        for x in 1..7 {
            let v = det.data()[y * 8 + x];
            if (v - 1.21).abs() > 1e-12 {
                failures.push(format!("dilation det at ({y},{x}) = {v}"));
            }
        }
    }
    let s = jacobian_stats(&dilation, 1e-6).unwrap();
    exact(&mut failures, "dilation folding", s.folding_fraction, 0.0);
    if s.std_log_jac > 1e-12 {
        failures.push(format!("dilation std_log_jac = {}", s.std_log_jac));
    }
    let reflection = DisplacementField::<f64>::from_fn(8, 8, 0, |y, _| (-2.0 * y as f64, 0.0));
    exact(
        &mut failures,
        "reflection folding",
        jacobian_stats(&reflection, 1e-6).unwrap().folding_fraction,
        1.0,
    );
    let identity = DisplacementField::<f64>::zeros(8, 8, 0);
    let s = jacobian_stats(&identity, 1e-6).unwrap();
    exact(&mut failures, "identity folding", s.folding_fraction, 0.0);
    exact(&mut failures, "identity std_log_jac", s.std_log_jac, 0.0);
    exact(
        &mut failures,
        "identity det",
        jacobian_determinant(&identity).unwrap().data()[9],
        1.0,
    );

    let ok = failures.is_empty();
    verdict(
        6,
        ok,
        &if ok {
            "all metric examples exact".to_string()
        } else {
            failures.join("; ")
        },
    );
    assert!(ok);
}

#[test]
fn criterion_7_reproducibility() {
    let (a, b) = (vn(), vn_repeat());
    let ckpt_same = tree(&a.dir) == tree(&b.dir);
    let report_same = fs::read(&a.report_path).unwrap() == fs::read(&b.report_path).unwrap();
    let s1 = work().join("synth-a");
    let s2 = work().join("synth-b");
    for d in [&s1, &s2] {
        dataset::generate(d, 7, &synth_params(), 2, 0).unwrap();
    }
    let synth_same = tree(&s1) == tree(&s2);
    let ok = ckpt_same && report_same && synth_same;
    verdict(
        7,
        ok,
        &format!("checkpoints identical {ckpt_same}, reports identical {report_same}, synth identical {synth_same}"),
    );
    assert!(ok);
}

#[test]
fn criterion_8_trajectory_dump() {
    let dir = work().join("c8");
    let data = dir.join("data");
    dataset::generate(&data, 8, &synth_params(), 1, 0).unwrap();
    let reg = RegistrationConfig::default();
    let ckpt = dir.join("ckpt");
    let params = RegistrationParams::<f32>::init(&reg, DEFAULT_TAU_INIT, 0);
    checkpoint::save(&ckpt, &params, None, &reg, None, 0).unwrap();
    let ds = Dataset::open(&data).unwrap();
    let entry = ds.entries(None)[0].clone();
    let dump = dir.join("dump");
    let out = Command::new(env!("CARGO_BIN_EXE_gradirn"))
        .arg("register")
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--moving")
        .arg(data.join(&entry.moving))
        .arg("--fixed")
        .arg(data.join(&entry.fixed))
        .arg("--dump-steps")
        .arg(&dump)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let steps = json["steps"].as_array().unwrap();
    let index: serde_json::Value = serde_json::from_slice(&fs::read(dump.join("index.json")).unwrap()).unwrap();
    let snapshots = fs::read_dir(&dump)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "gtf"))
        .count();

    // recompute each step's dissimilarity from the dumped field
    let pair = ds.load(&entry).unwrap();
    let mp = pyramid(&pair.moving, reg.levels);
    let fp = pyramid(&pair.fixed, reg.levels);
    let mut mismatches = 0;
    for s in steps {
        let level = s["level"].as_u64().unwrap() as usize;
        let field: Tensor<f32> = gradirn::gtf::read_tensor_exact(&dump.join(s["file"].as_str().unwrap())).unwrap();
        let d = warped_dissimilarity(reg.similarity, &mp[level], &fp[level], &field).unwrap();
        // reported values are f32 widened to f64
        if d != s["dissimilarity"].as_f64().unwrap() as f32 {
            mismatches += 1;
        }
    }
    let ok = steps.len() == 10 && snapshots == 10 && index == json["steps"] && mismatches == 0;
    verdict(
        8,
        ok,
        &format!(
            "{} steps in JSON, {snapshots} snapshot files, index matches stdout {}, dissimilarity mismatches {mismatches}",
            steps.len(),
            index == json["steps"]
        ),
    );
    assert!(ok);
}
