//! One PASS/FAIL line per acceptance criterion, with the tolerances pinned
//! below. Criteria 1-4, 9 and 10 are exact properties and fail the test when
//! they fail. Criteria 5-8 are trends measured on the synthetic benchmark;
//! they are always reported, and only fail the test when
//! `GSMOE_STRICT_ACCEPTANCE` is set. Runs without the libtest harness so the
//! lines are printed under plain `cargo test`.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::fs;
use std::process::Command;
use std::time::Instant;

use gsmoe::data::container::{decode_dataset, encode_dataset};
use gsmoe::data::{load_container, save_container};
use gsmoe::metrics::{average_precision, evaluate, roc_auc};
use gsmoe::signal::{detect_peaks, make_targets, splat_kernel, GaussianKernel, Peak, ScoreSeries, SplatConfig, TailMode};
use gsmoe::train::{train_from_encoder, ExpertMode, TrainLog};
use gsmoe::{ContainerError, Error};
use gsmoe_cli::config::RunConfig;
use gsmoe_cli::runs::{run_seed, score_dataset, with_seed_offset, SeedRun};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// criterion 1
const PEAK_SERIES: usize = 1000;
const PEAK_SECONDS: f64 = 5.0;
// criterion 2
const RANKING_INSTANCES: usize = 200;
const RANKING_MAX_N: usize = 500;
const RANKING_TOL: f64 = 1e-9;
const RANKING_SECONDS: f64 = 10.0;
// criterion 3
const GRAD_INSTANCES: usize = 50;
const CHAIN_INSTANCES: usize = 5;
const GRAD_SECONDS: f64 = 60.0;
// criterion 4
const SPLAT_TOL: f64 = 1e-12;
const SPLAT_CASES: u32 = 10_000;
// criterion 5
const ABLATION_SEEDS: u64 = 5;
const ABLATION_MARGIN: f64 = 0.02;
const PIPELINE_SECONDS: f64 = 600.0;
// criterion 6
const MASKED_RANGE: (f64, f64) = (0.40, 0.60);
const UNMASKED_MIN: f64 = 0.65;
const MASKED_CLASSES_NEEDED: usize = 5;
// criterion 7
const THRESHOLDS: [f64; 5] = [0.1, 0.15, 0.2, 0.25, 0.3];
const THRESHOLD_SEEDS: u64 = 3;
const THRESHOLD_SPREAD: f64 = 0.03;
// criterion 8
const CLUSTER_SEEDS: u64 = 3;
const CLUSTER_GAP: f64 = 0.05;
// criterion 10
const ROUND_TRIPS: usize = 100;

struct Report {
    lines: Vec<(usize, bool, bool, String)>,
}

impl Report {
    /// `hard` criteria fail the test on their own.
    fn record(&mut self, id: usize, hard: bool, pass: bool, detail: String) {
        println!("ACCEPTANCE {id:>2} {} {detail}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((id, hard, pass, detail));
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn peaks_oracle(report: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    let mut peaks = 0;
    for _ in 0..PEAK_SERIES {
        let len = rng.gen_range(50..=300);
        let s = support::random_series(&mut rng, len);
        let splat = SplatConfig {
            prominence_threshold: rng.gen_range(0.05..0.6),
            sigma_floor: rng.gen_range(0.01..0.6),
            ..SplatConfig::default()
        };
        let got = detect_peaks(&ScoreSeries::new(s.clone()).unwrap(), &splat).unwrap();
        let want = support::brute_peaks(&s, splat.prominence_threshold, splat.sigma_floor);
        let same = got.len() == want.len()
            && got.iter().zip(&want).all(|(g, w)| {
                (g.position, g.v1, g.v2, g.width) == (w.position, w.v1, w.v2, w.width) && (g.sigma - w.sigma).abs() < 1e-12
            });
        mismatches += usize::from(!same);
        peaks += want.len();
    }
    let secs = start.elapsed().as_secs_f64();
    report.record(
        1,
        true,
        mismatches == 0 && secs < PEAK_SECONDS,
        format!(
            "peaks vs brute force: {} of {PEAK_SERIES} series identical ({peaks} peaks), {secs:.2} s (limit {PEAK_SECONDS} s)",
            PEAK_SERIES - mismatches
        ),
    );
}

fn ranking_oracle(report: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..RANKING_INSTANCES {
        let (s, l) = support::random_ranking(&mut rng, RANKING_MAX_N);
        worst = worst.max((roc_auc(&s, &l).unwrap() - support::auc_pairs(&s, &l)).abs());
        worst = worst.max((average_precision(&s, &l).unwrap() - support::ap_prefix(&s, &l)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    report.record(
        2,
        true,
        worst <= RANKING_TOL && secs < RANKING_SECONDS,
        format!(
            "AUC/AP vs pairwise/prefix oracles on {RANKING_INSTANCES} instances: max |diff| {worst:.1e} (tol {RANKING_TOL:.0e}), {secs:.2} s (limit {RANKING_SECONDS} s)"
        ),
    );
}

fn gradients(report: &mut Report) {
    let start = Instant::now();
    let mut results = support::gradient_suite(support::GRADIENT_CASES, GRAD_INSTANCES, 3);
    let secs = start.elapsed().as_secs_f64();
    results.extend(support::gradient_suite(support::CHAIN_CASES, CHAIN_INSTANCES, 3));
    let failing: Vec<String> = results
        .iter()
        .filter(|r| !r.passes())
        .map(|r| format!("{} {:.2e}", r.name, r.max_rel_err))
        .collect();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    report.record(
        3,
        true,
        failing.is_empty() && secs < GRAD_SECONDS,
        format!(
            "finite differences (h {:.0e}): {} losses/blocks x {GRAD_INSTANCES} plus encoder-experts-gate chain x {CHAIN_INSTANCES}, \
             max rel err {worst:.2e} (tol {:.0e}){}, {secs:.1} s for the per-block suite (limit {GRAD_SECONDS} s)",
            support::GRAD_H,
            support::GRADIENT_CASES.len(),
            support::GRAD_TOL,
            if failing.is_empty() { String::new() } else { format!("; failing: {}", failing.join(", ")) }
        ),
    );
}

fn splat_exactness(report: &mut Report) {
    let half = (-0.5f64).exp();
    let mut worst: f64 = 0.0;
    let mut centre_ok = true;
    for sigma in [1.0, 2.0, 3.0, 5.0] {
        let k = GaussianKernel {
            support: vec![true; 21],
            peak: Peak {
                position: 10,
                score: 1.0,
                v1: 5,
                v2: 5,
                width: 5,
                sigma,
            },
        };
        for tail in [TailMode::Truncated, TailMode::Full] {
            let f = splat_kernel(&k, 21, tail).unwrap();
            centre_ok &= f[10] == 1.0;
            let s = sigma as usize;
            worst = worst.max((f[10 - s] - half).abs()).max((f[10 + s] - half).abs());
        }
    }
    // through detection: a floor above every window std fixes sigma
    let tent = vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 0.7, 0.5, 0.3, 0.1, 0.0];
    for floor in [1.0, 2.0, 3.0] {
        let splat = SplatConfig {
            sigma_floor: floor,
            ..SplatConfig::default()
        };
        let t = make_targets(&ScoreSeries::new(tent.clone()).unwrap(), &splat).unwrap();
        let d = floor as usize;
        centre_ok &= t.targets()[5] == 1.0;
        worst = worst.max((t.targets()[5 - d] - half).abs()).max((t.targets()[5 + d] - half).abs());
    }

    let mut runner = TestRunner::new(Config {
        cases: SPLAT_CASES,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (
        prop::collection::vec(0.0f64..=1.0, 1..300),
        0.01f64..0.99,
        0.01f64..5.0,
        any::<bool>(),
    );
    let bounded = runner.run(&strategy, |(s, threshold, floor, full)| {
        let splat = SplatConfig {
            prominence_threshold: threshold,
            sigma_floor: floor,
            tail_mode: if full { TailMode::Full } else { TailMode::Truncated },
            ..SplatConfig::default()
        };
        let labels = make_targets(&ScoreSeries::new(s).unwrap(), &splat).unwrap();
        prop_assert!(labels.targets().iter().all(|v| (0.0..=1.0).contains(v)));
        Ok(())
    });
    report.record(
        4,
        true,
        centre_ok && worst <= SPLAT_TOL && bounded.is_ok(),
        format!(
            "splat f(P) = 1: {centre_ok}; |f(P±σ) - exp(-0.5)| max {worst:.1e} (tol {SPLAT_TOL:.0e}); \
             labels in [0, 1] over {SPLAT_CASES} random cases: {}",
            match &bounded {
                Ok(()) => "yes".to_string(),
                Err(e) => format!("no ({e})"),
            }
        ),
    );
}

fn fused_auc(run: &SeedRun) -> f64 {
    run.metrics.fused.as_ref().expect("full pipeline").auc
}

fn ablation(report: &mut Report, runs: &[SeedRun], max_secs: f64) {
    let mil = mean(runs.iter().map(|r| r.metrics.mil_encoder.as_ref().unwrap().auc));
    let tgs = mean(runs.iter().map(|r| r.metrics.encoder.auc));
    let experts = mean(runs.iter().map(|r| r.metrics.experts_max.as_ref().unwrap().auc));
    let gate = mean(runs.iter().map(fused_auc));
    let order = gate > experts && experts > tgs && tgs >= mil;
    let margin = gate - mil;
    report.record(
        5,
        false,
        order && margin >= ABLATION_MARGIN && max_secs <= PIPELINE_SECONDS,
        format!(
            "ablation over {ABLATION_SEEDS} seeds: gate {gate:.4} > experts {experts:.4} > tgs {tgs:.4} >= mil {mil:.4}: {order}; \
             gate - mil {margin:+.4} (need >= {ABLATION_MARGIN}); slowest pipeline {max_secs:.0} s (limit {PIPELINE_SECONDS} s)"
        ),
    );
}

fn masking(report: &mut Report, runs: &[SeedRun]) {
    let classes = runs[0].split.test.class_names.clone();
    let mut hits = 0;
    let mut parts = Vec::new();
    for name in &classes {
        let mut plain = Vec::new();
        let mut masked = Vec::new();
        for run in runs {
            let bundle = &run.state.bundle;
            let idx = bundle.expert_names.iter().position(|n| n == name).expect("class expert");
            let test = &run.split.test;
            plain.push(run.metrics.fused.as_ref().unwrap().per_class_auc[name]);
            let scores = score_dataset(bundle, test, Some(idx)).unwrap();
            let m = evaluate(test, scores.fused.as_deref().unwrap()).unwrap();
            masked.push(m.per_class_auc[name]);
        }
        let (p, m) = (mean(plain), mean(masked));
        let ok = (MASKED_RANGE.0..=MASKED_RANGE.1).contains(&m) && p > UNMASKED_MIN;
        hits += usize::from(ok);
        parts.push(format!("{name} {p:.3}->{m:.3}"));
    }
    report.record(
        6,
        false,
        hits >= MASKED_CLASSES_NEEDED,
        format!(
            "masking: {hits} of {} classes drop into [{:.2}, {:.2}] from above {UNMASKED_MIN} (need {MASKED_CLASSES_NEEDED}); {}",
            classes.len(),
            MASKED_RANGE.0,
            MASKED_RANGE.1,
            parts.join(", ")
        ),
    );
}

fn thresholds(report: &mut Report, base: &RunConfig, runs: &[SeedRun]) {
    let default = SplatConfig::default().prominence_threshold;
    let mut means = Vec::new();
    for &thr in &THRESHOLDS {
        let aucs: Vec<f64> = (0..THRESHOLD_SEEDS)
            .map(|s| {
                if thr == default {
                    return fused_auc(&runs[s as usize]);
                }
                let mut cfg = with_seed_offset(base, s);
                cfg.train.splat.prominence_threshold = thr;
                fused_auc(&run_seed(&cfg).unwrap())
            })
            .collect();
        means.push((thr, mean(aucs)));
    }
    let hi = means.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
    let lo = means.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
    let listed: Vec<String> = means.iter().map(|(t, a)| format!("{t}: {a:.4}")).collect();
    report.record(
        7,
        false,
        hi - lo <= THRESHOLD_SPREAD,
        format!(
            "threshold robustness over {THRESHOLD_SEEDS} seeds: gate AUC spread {:.4} (limit {THRESHOLD_SPREAD}); {}",
            hi - lo,
            listed.join(", ")
        ),
    );
}

fn clusters(report: &mut Report, base: &RunConfig, runs: &[SeedRun]) {
    let mut class_aucs = Vec::new();
    let mut cluster_aucs = Vec::new();
    for s in 0..CLUSTER_SEEDS {
        let run = &runs[s as usize];
        let mut cfg = with_seed_offset(base, s).train;
        cfg.expert_mode = ExpertMode::Cluster;
        cfg.n_clusters = Some(run.split.train.n_classes());
        let bundle = train_from_encoder(run.state.bundle.encoder.clone(), &run.split.train, &cfg, &mut TrainLog::default())
            .unwrap();
        let scores = score_dataset(&bundle, &run.split.test, None).unwrap();
        cluster_aucs.push(evaluate(&run.split.test, scores.fused.as_deref().unwrap()).unwrap().auc);
        class_aucs.push(fused_auc(run));
    }
    let (a, b) = (mean(class_aucs), mean(cluster_aucs));
    report.record(
        8,
        false,
        (a - b).abs() <= CLUSTER_GAP,
        format!(
            "cluster experts (k = n_classes) over {CLUSTER_SEEDS} seeds: AUC {b:.4} vs class experts {a:.4}, gap {:.4} (limit {CLUSTER_GAP})",
            (a - b).abs()
        ),
    );
}

fn determinism(report: &mut Report) {
    let dir = tempfile::tempdir().unwrap();
    let gsmoe = |config: Option<&std::path::Path>, out: &str, args: &[&str]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_gsmoe"));
        cmd.current_dir(dir.path());
        if let Some(c) = config {
            cmd.arg("--config").arg(c);
        }
        let o = cmd.args(args).args(["--output_dir", out]).output().unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    for args in [&["gen-data"][..], &["train"], &["eval"]] {
        gsmoe(None, "first", args);
    }
    let resolved = dir.path().join("first/config.resolved.json");
    for args in [&["gen-data"][..], &["train"], &["eval"]] {
        gsmoe(Some(&resolved), "second", args);
    }
    let files = [
        "models/encoder_mil.gsmk",
        "models/encoder.gsmk",
        "models/experts.gsmk",
        "models/model.gsmk",
        "eval/metrics.json",
        "eval/metrics.csv",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| fs::read(dir.path().join("first").join(f)).unwrap() != fs::read(dir.path().join("second").join(f)).unwrap())
        .collect();
    report.record(
        9,
        true,
        differing.is_empty(),
        format!(
            "rerun from config.resolved.json: {} of {} checkpoint/metrics files bit-identical{}",
            files.len() - differing.len(),
            files.len(),
            if differing.is_empty() { String::new() } else { format!("; differing: {}", differing.join(", ")) }
        ),
    );
}

fn containers(report: &mut Report) {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut exact = 0;
    for i in 0..ROUND_TRIPS {
        let ds = support::random_dataset(&mut rng);
        let path = dir.path().join(format!("{i}.gsmk"));
        save_container(&path, &ds).unwrap();
        exact += usize::from(support::same_bits(&ds, &load_container(&path).unwrap()));
    }
    let bytes = encode_dataset(&support::random_dataset(&mut rng)).unwrap();
    let mut magic = bytes.clone();
    magic[1] = b'?';
    let mut version = bytes.clone();
    version[4] = b'9';
    let magic_ok = matches!(decode_dataset(&magic), Err(Error::Container(ContainerError::BadMagic)));
    let version_ok = matches!(decode_dataset(&version), Err(Error::Container(ContainerError::VersionMismatch { .. })));
    let truncated_ok = matches!(
        decode_dataset(&bytes[..bytes.len() - 3]),
        Err(Error::Container(ContainerError::TruncatedPayload(_)))
    );
    report.record(
        10,
        true,
        exact == ROUND_TRIPS && magic_ok && version_ok && truncated_ok,
        format!(
            "containers: {exact} of {ROUND_TRIPS} random datasets bit-exact; bad magic {magic_ok}, version mismatch {version_ok}, truncated payload {truncated_ok}"
        ),
    );
}

fn main() {
    let mut report = Report { lines: Vec::new() };
    peaks_oracle(&mut report);
    ranking_oracle(&mut report);
    gradients(&mut report);
    splat_exactness(&mut report);

    let base = RunConfig::default();
    let mut runs = Vec::new();
    let mut slowest: f64 = 0.0;
    for s in 0..ABLATION_SEEDS {
        let start = Instant::now();
        runs.push(run_seed(&with_seed_offset(&base, s)).unwrap());
        slowest = slowest.max(start.elapsed().as_secs_f64());
    }
    ablation(&mut report, &runs, slowest);
    masking(&mut report, &runs);
    thresholds(&mut report, &base, &runs);
    clusters(&mut report, &base, &runs);
    determinism(&mut report);
    containers(&mut report);

    let strict = std::env::var_os("GSMOE_STRICT_ACCEPTANCE").is_some();
    let passed = report.lines.iter().filter(|l| l.2).count();
    println!("ACCEPTANCE summary: {passed} of {} criteria pass", report.lines.len());
    let blocking: Vec<usize> = report
        .lines
        .iter()
        .filter(|(_, hard, pass, _)| !pass && (*hard || strict))
        .map(|l| l.0)
        .collect();
    if !blocking.is_empty() {
        eprintln!("failing criteria: {blocking:?}");
        std::process::exit(1);
    }
}
