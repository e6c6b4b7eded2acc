//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Criteria 1–6 are read from the `summary.json` files written by
//! `frcl run --final` for the configurations in `configs/acceptance`
//! (see `scripts/run_acceptance.sh`); results live under `results/` or
//! `$FRCL_RESULTS_DIR`. They are reported but never fail the test, since
//! they depend on hours of training that `cargo test` does not run.
//! Criteria 7–9 run here and must pass.

use std::path::PathBuf;

use frcl_bench::config::{BlobsConfig, Dataset, ExperimentConfig};
use frcl_bench::metrics::read_metrics;
use frcl_bench::{run_experiment, ExperimentSummary, RunOptions};
use frcl_core::boundary::{symmetric_kl, welch_t, DetectorConfig, DetectorState, SurpriseScores};
use frcl_core::gradcheck::{random_matrix, random_net, random_posterior, run_suite, Target};
use frcl_core::inducing::{dense_trace, select_with, Criterion, Scorer, SelectionConfig, TaskData};
use frcl_core::kernel::{nystrom_residuals, KernelConfig, KernelWorkspace};
use frcl_core::likelihood::Likelihood;
use frcl_core::numerics::{gauss_hermite, Matrix};
use frcl_core::objective::{kl_functional, kl_functional_features};
use frcl_core::posterior::{kl_gauss_vs_standard, WeightPosterior};
use frcl_core::summary::{distill, distill_functions, predict, TaskSummary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Report {
    failed: Vec<usize>,
}

impl Report {
    fn line(&mut self, criterion: usize, pass: bool, detail: String) {
        println!("criterion {criterion}: {} {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(criterion);
        }
    }
}

fn results_dir() -> PathBuf {
    std::env::var_os("FRCL_RESULTS_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../results"))
}

fn load(name: &str) -> Result<ExperimentSummary, String> {
    let path = results_dir().join(name).join("summary.json");
    let text = std::fs::read_to_string(&path).map_err(|_| format!("no results at {}", path.display()))?;
    let s: ExperimentSummary = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    if !s.final_protocol {
        return Err(format!("{name} was run on the validation split, not with --final"));
    }
    Ok(s)
}

fn accuracy(name: &str, reps: usize) -> Result<f64, String> {
    let s = load(name)?;
    if s.runs.len() < reps {
        return Err(format!("{name} has {} of {reps} seeds", s.runs.len()));
    }
    s.accuracy_mean.ok_or_else(|| format!("{name} has no accuracy"))
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

fn threshold(report: &mut Report, c: usize, value: Result<f64, String>, min: f64, what: &str, fmt: fn(f64) -> String) {
    match value {
        Ok(v) => report.line(c, v >= min, format!("{what} = {} (need >= {})", fmt(v), fmt(min))),
        Err(e) => report.line(c, false, format!("{what}: {e}")),
    }
}

fn quantitative(report: &mut Report) {
    threshold(report, 1, accuracy("split_trace_m40", 5), 0.95, "Split-MNIST trace M=40 accuracy", pct);
    let gap = accuracy("split_trace_m2", 5).and_then(|t| Ok(t - accuracy("split_random_m2", 5)?));
    threshold(report, 2, gap, 0.08, "Split-MNIST M=2 trace minus random", pct);
    threshold(report, 3, accuracy("perm_trace_m200", 3), 0.92, "Permuted-MNIST trace M=200 accuracy", pct);
    let gap = accuracy("perm_random_m200", 3).and_then(|r| Ok(r - accuracy("perm_baseline_m200", 3)?));
    threshold(report, 4, gap, 0.05, "Permuted-MNIST M=200 frcl-random minus baseline", pct);

    let f1 = |name: &str, reps: usize| -> Result<f64, String> {
        let s = load(name)?;
        if s.runs.len() < reps {
            return Err(format!("{name} has {} of {reps} seeds", s.runs.len()));
        }
        s.f1_mean.ok_or_else(|| format!("{name} has no boundary score"))
    };
    match (f1("split_detect", 10), f1("perm_detect", 3)) {
        (Ok(a), Ok(b)) => report.line(
            5,
            a >= 0.9 && b >= 0.85,
            format!("detection F1 Split = {a:.3} (need >= 0.9), Permuted = {b:.3} (need >= 0.85)"),
        ),
        (a, b) => report.line(5, false, format!("detection F1: {:?} / {:?}", a, b)),
    }

    let coverage = load("perm_coverage_m10").and_then(|s| {
        if s.runs.len() < 10 {
            return Err(format!("perm_coverage_m10 has {} of 10 seeds", s.runs.len()));
        }
        Ok(s.runs.iter().filter(|r| r.class_coverage.first().is_some_and(|&c| c >= 8)).count())
    });
    match coverage {
        Ok(n) => report.line(6, n >= 8, format!("{n}/10 seeds cover >= 8 classes with M=10 (need >= 8)")),
        Err(e) => report.line(6, false, format!("class coverage: {e}")),
    }
}

fn gradients(report: &mut Report) {
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for (i, target) in Target::ALL.into_iter().enumerate() {
        let r = run_suite(target, 100, 100 + i as u64).unwrap();
        worst = worst.max(r.worst_relative_error);
        detail.push(format!("{} {:.1e}", target.name(), r.worst_relative_error));
    }
    report.line(7, worst <= 1e-4, format!("worst relative FD error {worst:.2e} (need <= 1e-4): {}", detail.join(", ")));
}

/// Gauss–Jordan inverse with partial pivoting, independent of the crate's
/// Cholesky path.
fn dense_inverse(a: &Matrix<f64>) -> Matrix<f64> {
    let n = a.rows();
    let mut m = a.clone();
    let mut inv = Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 });
    for col in 0..n {
        let p = (col..n).max_by(|&x, &y| m[(x, col)].abs().total_cmp(&m[(y, col)].abs())).unwrap();
        for j in 0..n {
            let (t, u) = (m[(col, j)], inv[(col, j)]);
            m[(col, j)] = m[(p, j)];
            m[(p, j)] = t;
            inv[(col, j)] = inv[(p, j)];
            inv[(p, j)] = u;
        }
        let d = m[(col, col)];
        for j in 0..n {
            m[(col, j)] /= d;
            inv[(col, j)] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = m[(r, col)];
                for j in 0..n {
                    m[(r, j)] -= f * m[(col, j)];
                    inv[(r, j)] -= f * inv[(col, j)];
                }
            }
        }
    }
    inv
}

/// `K_Z` factorises without jitter and has condition number at most 1e8;
/// dead ReLU units can otherwise leave it numerically singular.
fn well_conditioned(net: &frcl_core::FeatureNet, z: &Matrix<f64>, kernel: &KernelConfig<f64>) -> bool {
    KernelWorkspace::new(net, kernel, z).is_ok_and(|ws| {
        let d = ws.chol().l().diag();
        let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        ws.chol().jitter_used() == 0.0 && (hi / lo).powi(2) <= 1e8
    })
}

fn trace_oracle(rng: &mut ChaCha8Rng) -> (bool, String) {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(6..=20);
        let net = random_net(rng, &[4, 8, 6]);
        let x = random_matrix(rng, n, 4, 1.0);
        let labels = vec![0; n];
        let q = WeightPosterior::init(6, 1, 0);
        let rule = gauss_hermite(20).unwrap();
        let data = TaskData { x: &x, labels: &labels, likelihood: Likelihood::BernoulliLogit };
        let m = rng.random_range(1..=4);
        let cfg = SelectionConfig::new(Criterion::Trace, m, 0);
        let kernel = KernelConfig::default();
        let scorer = Scorer::new(&cfg, data, &q, &net, &kernel, &rule).unwrap();
        let idx: Vec<usize> = rand::seq::index::sample(rng, n, m).into_vec();
        let fast = scorer.score(&idx).unwrap();
        let dense = dense_trace(scorer.features(), &idx, &kernel).unwrap();
        worst = worst.max((fast - dense).abs() / dense.abs().max(1.0));
    }
    (worst <= 1e-8, format!("trace vs dense Nyström {worst:.1e}"))
}

fn cov_oracle(rng: &mut ChaCha8Rng) -> (bool, String) {
    const DRAWS: usize = 1_000_000;
    let (m, k) = (3, 4);
    let net = random_net(rng, &[3, 5, k]);
    let z = random_matrix(rng, m, 3, 1.0);
    let q = random_posterior(rng, k, 1);
    let kernel = KernelConfig::default();
    let s = distill(&q, &z, &net, &kernel, Likelihood::BernoulliLogit, 0).unwrap();
    let phi_z = net.forward(&z).unwrap();
    let (mu, l) = (q.mu(0).to_vec(), q.l(0));
    let mut sum = vec![0.0; m * m];
    let mut sum_sq = vec![0.0; m * m];
    let mut eps = vec![0.0; k];
    for _ in 0..DRAWS {
        eps.iter_mut().for_each(|e| *e = rng.sample(StandardNormal));
        let w: Vec<f64> = (0..k).map(|i| mu[i] + (0..=i).map(|j| l[(i, j)] * eps[j]).sum::<f64>()).collect();
        let f = phi_z.matvec(&w).unwrap();
        let mean_u = &s.functions()[0].mu_u;
        for i in 0..m {
            for j in 0..m {
                let p = (f[i] - mean_u[i]) * (f[j] - mean_u[j]);
                sum[i * m + j] += p;
                sum_sq[i * m + j] += p * p;
            }
        }
    }
    let n = DRAWS as f64;
    let mut worst = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            let mean = sum[i * m + j] / n;
            let se = ((sum_sq[i * m + j] / n - mean * mean) / n).sqrt();
            worst = worst.max((s.functions()[0].cov_u[(i, j)] - mean).abs() / se);
        }
    }
    (worst <= 3.0, format!("cov_u vs Monte Carlo {worst:.2} SE"))
}

fn predict_oracle(rng: &mut ChaCha8Rng) -> (bool, String) {
    let mut worst = 0.0f64;
    let kernel = KernelConfig::default();
    let mut inst = 0;
    while inst < 50 {
        let functions = if inst % 2 == 0 { 1 } else { 3 };
        let (m, k, b) = (3, 6, 5);
        let net = random_net(rng, &[4, 7, k]);
        let z = random_matrix(rng, m, 4, 1.0);
        if !well_conditioned(&net, &z, &kernel) {
            continue;
        }
        inst += 1;
        let x = random_matrix(rng, b, 4, 1.0);
        let q = random_posterior(rng, k, functions);
        // distilled under another network so the summary is not consistent with `net`
        let other = random_net(rng, &[4, 7, k]);
        let s = distill(&q, &z, &other, &kernel, Likelihood::from_function_count(functions).unwrap(), 0).unwrap();
        let preds = predict(&s, &x, &net, &kernel).unwrap();
        let (pz, px) = (net.forward(&z).unwrap(), net.forward(&x).unwrap());
        // joint prior over (u, f*), then f* | u integrated against q(u)
        let kzz = pz.matmul_t(&pz).unwrap();
        let kzs = pz.matmul_t(&px).unwrap();
        let kss = px.matmul_t(&px).unwrap();
        let a = dense_inverse(&kzz).matmul(&kzs).unwrap();
        for (c, f) in s.functions().iter().enumerate() {
            let sa = f.cov_u.matmul(&a).unwrap();
            for j in 0..b {
                let mean: f64 = (0..m).map(|i| a[(i, j)] * f.mu_u[i]).sum();
                let var = kss[(j, j)] - (0..m).map(|i| kzs[(i, j)] * a[(i, j)]).sum::<f64>()
                    + (0..m).map(|i| a[(i, j)] * sa[(i, j)]).sum::<f64>();
                let p = &preds[j];
                worst = worst
                    .max((p.mean[c] - mean).abs() / mean.abs().max(1.0))
                    .max((p.variance[c] - var.max(0.0)).abs() / var.abs().max(1.0));
            }
        }
    }
    (worst <= 1e-8, format!("predict vs joint-Gaussian conditioning {worst:.1e}"))
}

fn swap_oracle(rng: &mut ChaCha8Rng) -> (bool, String) {
    let kernel = KernelConfig::default();
    let rule = gauss_hermite(20).unwrap();
    let mut hits = 0;
    for inst in 0..100u64 {
        let net = random_net(rng, &[3, 6, 5]);
        let x = random_matrix(rng, 8, 3, 1.0);
        let labels = vec![0; 8];
        let q = WeightPosterior::init(5, 1, 0);
        let data = TaskData { x: &x, labels: &labels, likelihood: Likelihood::BernoulliLogit };
        let cfg = SelectionConfig { search_steps: 200, ..SelectionConfig::new(Criterion::Trace, 2, inst) };
        let scorer = Scorer::new(&cfg, data, &q, &net, &kernel, &rule).unwrap();
        let mut best = f64::INFINITY;
        for i in 0..8 {
            for j in i + 1..8 {
                best = best.min(scorer.score(&[i, j]).unwrap());
            }
        }
        let found = select_with(&cfg, &scorer, data).unwrap().final_score;
        if (found - best).abs() <= 1e-9 * best.abs().max(1.0) {
            hits += 1;
        }
    }
    (hits >= 90, format!("swap search optimal on {hits}/100 (N=8, M=2)"))
}

fn hand_values() -> (bool, String) {
    let t = welch_t(&[1.0, 2.0, 3.0, 4.0], &[2.0, 4.0, 6.0, 8.0, 10.0]).unwrap();
    let skl = symmetric_kl(1.0, 2.0, 1.0);
    let q1 = WeightPosterior::from_factors(vec![(vec![1.0], Matrix::from_fn(1, 1, |_, _| 1.0))]).unwrap();
    let w1 = kl_gauss_vs_standard(&q1, 0, 1.0).unwrap().0;
    let q2 = WeightPosterior::from_factors(vec![(
        vec![1.0, 2.0],
        Matrix::from_fn(2, 2, |i, j| match (i, j) {
            (0, 0) => 2.0,
            (1, 1) => 0.5,
            _ => 0.0,
        }),
    )])
    .unwrap();
    let w2 = kl_gauss_vs_standard(&q2, 0, 2.0).unwrap().0;
    // one inducing input with feature 2: K = 4, mu_u = 1, S = 1
    let kernel = KernelConfig::default();
    let phi_z = Matrix::from_fn(1, 1, |_, _| 2.0);
    let q3 = WeightPosterior::from_factors(vec![(vec![0.5], Matrix::from_fn(1, 1, |_, _| 0.5))]).unwrap();
    let f = distill_functions(&q3, &phi_z, &kernel).unwrap();
    let s = TaskSummary::from_parts(0, phi_z.clone(), f, Likelihood::BernoulliLogit).unwrap();
    let kl_u = kl_functional_features(&s, &kernel, &phi_z).unwrap().0;
    let checks: [(f64, f64); 5] = [
        (t, 2.2514363231593695),
        (skl, 0.5),
        (w1, 0.5),
        (w2, 2.0056471805599454),
        (kl_u, 0.4431471805599453),
    ];
    let worst = checks.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    (worst <= 1e-12, format!("Welch t and Gaussian KL hand values {worst:.1e}"))
}

fn oracles(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let parts = [
        trace_oracle(&mut rng),
        cov_oracle(&mut rng),
        predict_oracle(&mut rng),
        swap_oracle(&mut rng),
        hand_values(),
    ];
    let pass = parts.iter().all(|p| p.0);
    let detail: Vec<String> = parts.into_iter().map(|p| p.1).collect();
    report.line(8, pass, detail.join("; "));
}

fn kl_nonnegative(rng: &mut ChaCha8Rng) -> (bool, String) {
    let kernel = KernelConfig::default();
    let mut lowest = f64::INFINITY;
    for _ in 0..200 {
        let net = random_net(rng, &[4, 6, 5]);
        let other = random_net(rng, &[4, 6, 5]);
        let functions = rng.random_range(1..=3);
        let q = random_posterior(rng, 5, functions);
        for c in 0..functions {
            lowest = lowest.min(kl_gauss_vs_standard(&q, c, rng.random_range(0.5..2.0)).unwrap().0);
        }
        let z = random_matrix(rng, 3, 4, 1.0);
        let likelihood = Likelihood::from_function_count(functions).unwrap();
        // under the same network the KL can get close to zero
        let source = if rng.random_bool(0.5) { &net } else { &other };
        let s = distill(&q, &z, source, &kernel, likelihood, 0).unwrap();
        if let Ok((kl, _)) = kl_functional(&s, &net, &kernel) {
            lowest = lowest.min(kl);
        }
    }
    (lowest >= -1e-10, format!("min KL {lowest:.2e}"))
}

fn residuals(rng: &mut ChaCha8Rng) -> (bool, String) {
    let kernel = KernelConfig::default();
    let (mut lowest, mut full_set) = (f64::INFINITY, 0.0f64);
    for _ in 0..100 {
        let net = random_net(rng, &[4, 10, 8]);
        let x = random_matrix(rng, 12, 4, 1.0);
        let m = rng.random_range(1..=6);
        let idx = rand::seq::index::sample(rng, 12, m).into_vec();
        let ws = KernelWorkspace::new(&net, &kernel, &x.select_rows(&idx)).unwrap();
        let r = nystrom_residuals(&ws, &x, &net, &kernel).unwrap();
        lowest = r.iter().copied().fold(lowest, f64::min);
        // Z = X, with N below the feature width so K_Z is nonsingular
        let xs = random_matrix(rng, 6, 4, 1.0);
        let ws = KernelWorkspace::new(&net, &kernel, &xs).unwrap();
        let r = nystrom_residuals(&ws, &xs, &net, &kernel).unwrap();
        full_set = r.iter().copied().fold(full_set, f64::max);
    }
    (lowest >= 0.0 && full_set <= 1e-6, format!("min residual {lowest:.1e}, max residual at Z = X {full_set:.1e}"))
}

fn mean_anchoring(rng: &mut ChaCha8Rng) -> (bool, String) {
    let kernel = KernelConfig::default();
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 100 {
        let net = random_net(rng, &[4, 10, 8]);
        let z = random_matrix(rng, 4, 4, 1.0);
        let functions = if rng.random_bool(0.5) { 1 } else { 3 };
        let q = random_posterior(rng, 8, functions);
        let s = distill(&q, &z, &net, &kernel, Likelihood::from_function_count(functions).unwrap(), 0).unwrap();
        let mut moved = net.clone();
        let p: Vec<f64> = moved.param_vec().iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
        moved.set_param_vec(&p).unwrap();
        if !well_conditioned(&moved, &z, &kernel) {
            continue;
        }
        let preds = predict(&s, &z, &moved, &kernel).unwrap();
        for (j, p) in preds.iter().enumerate() {
            for (c, f) in s.functions().iter().enumerate() {
                worst = worst.max((p.mean[c] - f.mu_u[j]).abs());
            }
        }
        checked += 1;
    }
    (worst <= 1e-3, format!("mean anchoring {worst:.1e}"))
}

fn detector_gating() -> (bool, String) {
    let cfg = DetectorConfig {
        threshold: 5.0,
        min_time_in: 10,
        cooldown: 10,
        log_space: false,
        ..DetectorConfig::default()
    };
    let mut det = DetectorState::<f64>::new(cfg).unwrap();
    // surprise drops by one every batch with little spread, so the statistic
    // exceeds the threshold at every step and only gating decides
    let mut fired = Vec::new();
    let mut stats_ok = true;
    for s in 0..60 {
        let scores = (0..8).map(|i| -(s as f64) + 0.01 * i as f64).collect();
        let d = det.step(&SurpriseScores { scores: vec![scores] }).unwrap();
        stats_ok &= s == 0 || d.statistic.is_some_and(|t| t > 5.0);
        if d.detected {
            fired.push(s);
        }
    }
    // a flat stream never fires
    let mut flat = DetectorState::<f64>::new(DetectorConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let quiet = (0..200).all(|_| {
        let scores = (0..16).map(|_| rng.random_range(0.5..1.5)).collect();
        !flat.step(&SurpriseScores { scores: vec![scores] }).unwrap().detected
    });
    let spaced = fired.first() == Some(&11) && fired.windows(2).all(|w| w[1] - w[0] == 12);
    (stats_ok && spaced && quiet, format!("detections at {fired:?}, flat stream quiet: {quiet}"))
}

fn determinism() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig {
        dataset: Dataset::Blobs,
        blobs: BlobsConfig { task_count: 3, classes: 2, dims: 4, separation: 6.0, points_per_task: 300 },
        ..ExperimentConfig::default()
    };
    cfg.engine.hidden_layers = vec![16, 16];
    cfg.engine.train_steps_per_task = 60;
    cfg.engine.batch_size = 32;
    cfg.engine.points_per_task = 6;
    cfg.engine.selection.search_steps = 50;
    let strip = |path: PathBuf| -> Vec<serde_json::Value> {
        read_metrics(&path)
            .unwrap()
            .into_iter()
            .map(|r| {
                let mut v = serde_json::to_value(r).unwrap();
                v.as_object_mut().unwrap().remove("wall_ms");
                v
            })
            .collect()
    };
    let mut streams = Vec::new();
    for run in ["a", "b"] {
        let opts = RunOptions { seed: Some(4), final_protocol: false, out_dir: Some(dir.path().join(run)) };
        run_experiment(&cfg, &opts).unwrap();
        streams.push(strip(dir.path().join(run).join("metrics_seed4.jsonl")));
    }
    let same = !streams[0].is_empty() && streams[0] == streams[1];
    (same, format!("{} metrics records identical across reruns: {same}", streams[0].len()))
}

fn invariants(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let parts = [
        kl_nonnegative(&mut rng),
        residuals(&mut rng),
        mean_anchoring(&mut rng),
        detector_gating(),
        determinism(),
    ];
    let pass = parts.iter().all(|p| p.0);
    let detail: Vec<String> = parts.into_iter().map(|p| p.1).collect();
    report.line(9, pass, detail.join("; "));
}

#[test]
fn acceptance() {
    let mut report = Report { failed: Vec::new() };
    quantitative(&mut report);
    let quantitative_failures = report.failed.len();
    gradients(&mut report);
    oracles(&mut report);
    invariants(&mut report);
    assert_eq!(
        report.failed.len(),
        quantitative_failures,
        "in-process criteria failed: {:?}",
        &report.failed[quantitative_failures..]
    );
}
