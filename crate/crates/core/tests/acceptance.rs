//! Acceptance suite. Each test covers one criterion and prints a single
//! `criterion N ...: PASS|FAIL (details)` line before asserting.
//!
//! Run with `cargo test -p rfalcf --test acceptance -- --nocapture` to see the
//! verdict lines. Tests hold a shared lock so the runtime bounds are measured
//! without the other criteria competing for the CPU.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rfalcf::baselines::{cf_fit, nmf_fit};
use rfalcf::clustering::{accuracy, f_measure, score_representation};
use rfalcf::data::{corrupt_gaussian, load_matrix, normalize_columns, save_matrix, synth_blobs, LabeledDataset, MatrixFormat};
use rfalcf::model::{build_aux, build_he, flexible_residual, l21_norm, DataMatrix, FactorState, Hyperparams};
use rfalcf::solver::{fit, fit_from, init_state};
use rfalcf::updates::{refresh_m, refresh_s, solve_b, solve_p};

const INVARIANT_INSTANCES: usize = 50;
const INVARIANT_ITERS: usize = 100;
const INVARIANT_BUDGET: Duration = Duration::from_secs(60);
const MEDIAN_INCREASE_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-6;
const FD_INSTANCES: usize = 20;
const IDENTITY_TOL: f64 = 1e-10;
const METRIC_CASES: usize = 1000;
const PLANTED_SEEDS: u64 = 10;
const PLANTED_DIM: usize = 50;
const PLANTED_PER_CLASS: usize = 50;
const PLANTED_CLASSES: usize = 3;
const PLANTED_SPREAD: f64 = 10.0;
const PLANTED_MIN_AC: f64 = 0.90;
const PLANTED_BUDGET: Duration = Duration::from_secs(120);
const KMEANS_RESTARTS: usize = 30;
const KMEANS_ITERS: usize = 100;
const PIXEL_FRACTION: f64 = 0.3;
const MAX_INVERSIONS: usize = 1;
const MAX_INVERSION_SIZE: f64 = 0.03;
const CONVERGED_MIN: usize = 9;
const BASELINE_SLACK: f64 = 1e-12;
const IO_CASES: usize = 100;

static SERIAL: Mutex<()> = Mutex::new(());

fn report(id: usize, name: &str, pass: bool, detail: &str) {
    println!("criterion {id} {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

fn random_params(rng: &mut ChaCha8Rng, rank: usize) -> Hyperparams {
    Hyperparams {
        alpha: rng.random_range(0.0..1.0),
        beta: rng.random_range(0.0..1.0),
        gamma: rng.random_range(0.01..1.0),
        rank,
        ..Hyperparams::default()
    }
}

/// Random state with every solver-side invariant satisfied.
fn random_state(rng: &mut ChaCha8Rng, d: usize, n: usize, r: usize) -> (DataMatrix, FactorState) {
    let x = DataMatrix::new(rand_mat(rng, d, n, 0.0, 1.0)).unwrap();
    let mut q = rand_mat(rng, n, n, 0.0, 1.0);
    q.fill_diagonal(0.0);
    let p = DMatrix::identity(d, d) + rand_mat(rng, d, d, -0.5, 0.5);
    let st = FactorState {
        s: DVector::from_fn(d, |_, _| rng.random_range(0.2..2.0)),
        m: DVector::from_fn(n, |_, _| rng.random_range(0.2..2.0)),
        p,
        w: rand_mat(rng, n, r, 0.0, 1.0),
        v: rand_mat(rng, n, r, 0.0, 1.0),
        q,
        b: DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
    };
    (x, st)
}

fn planted(seed: u64) -> LabeledDataset {
    synth_blobs(PLANTED_DIM, PLANTED_PER_CLASS, PLANTED_CLASSES, PLANTED_SPREAD, seed).unwrap()
}

fn planted_params() -> Hyperparams {
    Hyperparams::with_rank(PLANTED_CLASSES + 1)
}

/// Mean (AC, F) of K-means on a representation over the standard restarts.
fn cluster_scores(repr: &DMatrix<f64>, labels: &[u32], seed: u64) -> (f64, f64) {
    let scores = score_representation(repr, labels, PLANTED_CLASSES, KMEANS_RESTARTS, KMEANS_ITERS, seed).unwrap();
    let n = scores.len() as f64;
    (scores.iter().map(|s| s.0).sum::<f64>() / n, scores.iter().map(|s| s.1).sum::<f64>() / n)
}

fn rfa_scores(ds: &LabeledDataset, seed: u64) -> (f64, f64, bool) {
    let ds = normalize_columns(ds);
    let res = fit(&ds.data_matrix().unwrap(), &planted_params(), seed).unwrap();
    let (ac, f) = cluster_scores(&res.state.v, &ds.labels, seed);
    (ac, f, res.converged)
}

fn cf_scores(ds: &LabeledDataset, seed: u64) -> (f64, f64) {
    let ds = normalize_columns(ds);
    let prm = planted_params();
    let res = cf_fit(&ds.values, prm.rank, prm.max_iter, seed, prm.guard_eps).unwrap();
    cluster_scores(&res.representation, &ds.labels, seed)
}

fn invariant_violations(st: &FactorState) -> usize {
    let neg = |m: &DMatrix<f64>| m.iter().filter(|v| v.is_nan() || **v < 0.0).count();
    let diag = (0..st.q.nrows()).filter(|&i| st.q[(i, i)] != 0.0).count();
    neg(&st.w) + neg(&st.v) + neg(&st.q) + diag + usize::from(st.check_invariants().is_err())
}

struct SuiteRun {
    violations: usize,
    not_descending: usize,
    increases: Vec<f64>,
    elapsed: Duration,
}

/// Shared body of criteria 1 and 2: random small instances, one iteration at
/// a time so every iterate is inspected.
fn run_invariant_suite() -> SuiteRun {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut run = SuiteRun {
        violations: 0,
        not_descending: 0,
        increases: Vec::new(),
        elapsed: Duration::ZERO,
    };
    for inst in 0..INVARIANT_INSTANCES {
        let r = rng.random_range(1..=4);
        let d = rng.random_range(2..=20);
        let n = rng.random_range(r.max(2) + 1..=30);
        let x = DataMatrix::new(rand_mat(&mut rng, d, n, 0.0, 1.0)).unwrap();
        let prm = Hyperparams {
            max_iter: 1,
            conv_relative: false,
            conv_eps: f64::MIN_POSITIVE,
            ..random_params(&mut rng, r)
        };
        let mut state = init_state(&x, &prm, inst as u64).unwrap();
        run.violations += invariant_violations(&state);
        let mut objectives = Vec::new();
        for _ in 0..INVARIANT_ITERS {
            let res = fit_from(&x, &prm, state).unwrap();
            if objectives.is_empty() {
                objectives.push(res.trace.rows[0].breakdown.total);
            }
            objectives.push(res.trace.last().unwrap().breakdown.total);
            state = res.state;
            run.violations += invariant_violations(&state);
        }
        if objectives.last().unwrap() > &objectives[0] {
            run.not_descending += 1;
        }
        for pair in objectives.windows(2) {
            run.increases.push(((pair[1] - pair[0]) / pair[0].abs().max(f64::MIN_POSITIVE)).max(0.0));
        }
    }
    run.elapsed = start.elapsed();
    run
}

#[test]
fn criterion_01_invariants() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let run = run_invariant_suite();
    let pass = run.violations == 0 && run.elapsed < INVARIANT_BUDGET;
    report(
        1,
        "invariant suite",
        pass,
        &format!("{} violations, {:.1}s", run.violations, run.elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_02_descent() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut run = run_invariant_suite();
    run.increases.sort_by(f64::total_cmp);
    let median = run.increases[run.increases.len() / 2];
    let worst = *run.increases.last().unwrap();
    let count = run.increases.iter().filter(|v| **v > 0.0).count();
    let pass = run.not_descending == 0 && median <= MEDIAN_INCREASE_TOL;
    report(
        2,
        "objective descent",
        pass,
        &format!(
            "{} of {INVARIANT_INSTANCES} end above start; median step increase {median:e}; {count} increasing steps, worst {worst:e}",
            run.not_descending
        ),
    );
    assert!(pass);
}

/// tr(Y^T M Y) by scalar loops for an explicit bias.
fn weighted_residual(x: &DMatrix<f64>, st: &FactorState, b: &DVector<f64>) -> f64 {
    let (d, n) = x.shape();
    let clean = st.p.transpose() * x;
    let recon = x * &st.w * st.v.transpose();
    let mut total = 0.0;
    for i in 0..n {
        for k in 0..d {
            total += st.m[i] * (clean[(k, i)] + b[k] - recon[(k, i)]).powi(2);
        }
    }
    total
}

/// P-subproblem objective by scalar loops, with the bias at its optimum.
fn p_objective(x: &DMatrix<f64>, st: &FactorState, prm: &Hyperparams, p: &DMatrix<f64>) -> f64 {
    let (d, n) = x.shape();
    let clean = p.transpose() * x;
    let anchors = x * &st.w;
    let recon = &anchors * st.v.transpose();
    let mass: f64 = st.m.iter().sum();
    let b = DVector::from_fn(d, |k, _| (0..n).map(|i| st.m[i] * (recon[(k, i)] - clean[(k, i)])).sum::<f64>() / mass);
    let clean_anchors = p.transpose() * &anchors;
    let mut total = 0.0;
    for i in 0..n {
        for k in 0..d {
            total += st.m[i] * (clean[(k, i)] + b[k] - recon[(k, i)]).powi(2);
        }
        for c in 0..st.w.ncols() {
            let dist: f64 = (0..d).map(|k| (clean_anchors[(k, c)] - clean[(k, i)]).powi(2)).sum();
            total += prm.alpha * st.v[(i, c)].abs() * dist;
        }
        for k in 0..d {
            let smooth: f64 = (0..n).map(|j| clean[(k, j)] * st.q[(j, i)]).sum();
            total += prm.beta * (clean[(k, i)] - smooth).powi(2);
        }
    }
    for k in 0..d {
        total += prm.gamma * st.s[k] * p.row(k).norm_squared();
    }
    total
}

fn central_gradient<F: Fn(&DMatrix<f64>) -> f64>(at: &DMatrix<f64>, f: F) -> DMatrix<f64> {
    let mut grad = DMatrix::zeros(at.nrows(), at.ncols());
    for idx in 0..at.len() {
        let (mut up, mut down) = (at.clone(), at.clone());
        up[idx] += FD_STEP;
        down[idx] -= FD_STEP;
        grad[idx] = (f(&up) - f(&down)) / (2.0 * FD_STEP);
    }
    grad
}

#[test]
fn criterion_03_stationarity() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let (mut worst_b, mut worst_p) = (0.0f64, 0.0f64);
    for _ in 0..FD_INSTANCES {
        let r = rng.random_range(1..=3);
        let d = rng.random_range(2..=6);
        let n = rng.random_range(r + 2..=9);
        let (x, st) = random_state(&mut rng, d, n, r);
        let prm = random_params(&mut rng, r);
        let xv = x.values();

        let b = solve_b(xv, &st.p, &st.w, &st.v, &st.m);
        let bm = DMatrix::from_column_slice(d, 1, b.as_slice());
        let gb = central_gradient(&bm, |t| weighted_residual(xv, &st, &DVector::from_column_slice(t.as_slice())));
        worst_b = worst_b.max(gb.norm() / (1.0 + b.norm()));

        let aux = build_aux(&x, &st).unwrap();
        let p = solve_p(&x, &st, &aux, &prm).unwrap();
        let gp = central_gradient(&p, |t| p_objective(xv, &st, &prm, t));
        worst_p = worst_p.max(gp.norm() / (1.0 + p.norm()));
    }
    let pass = worst_b <= FD_TOL && worst_p <= FD_TOL;
    report(
        3,
        "stationarity oracles",
        pass,
        &format!("worst relative gradient: bias {worst_b:e}, projection {worst_p:e}"),
    );
    assert!(pass);
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

#[test]
fn criterion_04_identities() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let (mut worst_l21, mut worst_he, mut worst_s) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let r = rng.random_range(1..=4);
        let d = rng.random_range(1..=10);
        let n = rng.random_range(r + 1..=15);
        let (x, mut st) = random_state(&mut rng, d, n, r);
        let xv = x.values();

        // L2,1 trace surrogate with M refreshed at Y
        let y = flexible_residual(&x, &st).unwrap();
        let m = refresh_m(&y, 1e-300);
        let trace: f64 = (0..n).map(|i| m[i] * y.row(i).norm_squared()).sum();
        worst_l21 = worst_l21.max(rel_err(l21_norm(&y), 2.0 * trace));

        // centring matrix absorbs the optimal bias
        st.b = solve_b(xv, &st.p, &st.w, &st.v, &st.m);
        let direct = weighted_residual(xv, &st, &st.b);
        let he = build_he(&st.m).unwrap();
        let z = xv.transpose() * &st.p - &st.v * (xv * &st.w).transpose();
        let centred = &he * z;
        let via_he: f64 = (0..n).map(|i| st.m[i] * centred.row(i).norm_squared()).sum();
        worst_he = worst_he.max(rel_err(direct, via_he));

        let s = refresh_s(&st.p, 1e-300);
        let quad: f64 = (0..d).map(|k| s[k] * st.p.row(k).norm_squared()).sum();
        worst_s = worst_s.max(rel_err(l21_norm(&st.p), 2.0 * quad));
    }
    let pass = worst_l21 <= IDENTITY_TOL && worst_he <= IDENTITY_TOL && worst_s <= IDENTITY_TOL;
    report(
        4,
        "algebraic identities",
        pass,
        &format!("worst relative error: residual {worst_l21:e}, centring {worst_he:e}, projection {worst_s:e}"),
    );
    assert!(pass);
}

fn brute_accuracy(pred: &[u32], truth: &[u32]) -> f64 {
    let k = pred.iter().chain(truth).max().map_or(1, |m| *m as usize + 1);
    let best = (0..k)
        .permutations(k)
        .map(|perm| pred.iter().zip(truth).filter(|(p, t)| perm[**p as usize] == **t as usize).count())
        .max()
        .unwrap_or(0);
    best as f64 / pred.len() as f64
}

fn brute_f(pred: &[u32], truth: &[u32]) -> f64 {
    let (mut both, mut in_pred, mut in_truth) = (0u64, 0u64, 0u64);
    for i in 0..pred.len() {
        for j in i + 1..pred.len() {
            let (sp, st) = (pred[i] == pred[j], truth[i] == truth[j]);
            both += u64::from(sp && st);
            in_pred += u64::from(sp);
            in_truth += u64::from(st);
        }
    }
    if both == 0 || in_pred == 0 || in_truth == 0 {
        return 0.0;
    }
    let precision = both as f64 / in_pred as f64;
    let recall = both as f64 / in_truth as f64;
    2.0 * precision * recall / (precision + recall)
}

#[test]
fn criterion_05_metric_oracles() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    let (mut ac_bad, mut f_bad) = (0, 0);
    for _ in 0..METRIC_CASES {
        let k = rng.random_range(1..=5);
        let n = rng.random_range(1..=12);
        let pred: Vec<u32> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let truth: Vec<u32> = (0..n).map(|_| rng.random_range(0..k)).collect();
        ac_bad += usize::from(accuracy(&pred, &truth).unwrap() != brute_accuracy(&pred, &truth));
        f_bad += usize::from(f_measure(&pred, &truth).unwrap() != brute_f(&pred, &truth));
    }
    let pass = ac_bad == 0 && f_bad == 0;
    report(
        5,
        "metric oracles",
        pass,
        &format!("{METRIC_CASES} cases: {ac_bad} accuracy mismatches, {f_bad} F-measure mismatches"),
    );
    assert!(pass);
}

#[test]
fn criterion_06_planted_recovery() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (mut rfa, mut cf) = (0.0, 0.0);
    for seed in 0..PLANTED_SEEDS {
        let ds = planted(seed);
        rfa += rfa_scores(&ds, seed).0;
        cf += cf_scores(&ds, seed).0;
    }
    let elapsed = start.elapsed();
    let (rfa, cf) = (rfa / PLANTED_SEEDS as f64, cf / PLANTED_SEEDS as f64);
    let pass = rfa >= PLANTED_MIN_AC && rfa >= cf && elapsed < PLANTED_BUDGET;
    report(
        6,
        "planted recovery",
        pass,
        &format!("mean AC rfa-lcf {rfa:.4}, cf {cf:.4}, {:.1}s", elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_07_robustness_trend() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let variances: Vec<f64> = (0..=10).map(|i| 10.0 * i as f64).collect();
    let mut rfa = vec![0.0; variances.len()];
    let mut cf = vec![0.0; variances.len()];
    for seed in 0..PLANTED_SEEDS {
        let ds = planted(seed);
        for (i, &var) in variances.iter().enumerate() {
            let noisy = corrupt_gaussian(&ds, var, PIXEL_FRACTION, seed + 500).unwrap();
            rfa[i] += rfa_scores(&noisy, seed).1 / PLANTED_SEEDS as f64;
            cf[i] += cf_scores(&noisy, seed).1 / PLANTED_SEEDS as f64;
        }
    }
    let at50 = variances.iter().position(|v| *v == 50.0).unwrap();
    let rises: Vec<f64> = rfa.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).collect();
    let largest_rise = rises.iter().cloned().fold(0.0, f64::max);
    let monotone = rises.len() <= MAX_INVERSIONS && largest_rise <= MAX_INVERSION_SIZE;
    let pass = rfa[at50] >= cf[at50] && monotone;
    let curve = |v: &[f64]| v.iter().map(|f| format!("{f:.3}")).join(" ");
    report(
        7,
        "robustness trend",
        pass,
        &format!(
            "F at variance 50: rfa-lcf {:.4}, cf {:.4}; {} inversions, largest {largest_rise:.4}; rfa-lcf curve [{}]; cf curve [{}]",
            rfa[at50],
            cf[at50],
            rises.len(),
            curve(&rfa),
            curve(&cf)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_convergence() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut converged = 0;
    let mut iterations = Vec::new();
    for seed in 0..PLANTED_SEEDS {
        let ds = normalize_columns(&planted(seed));
        let res = fit(&ds.data_matrix().unwrap(), &planted_params(), seed).unwrap();
        assert!(res.iterations_run <= 500);
        converged += usize::from(res.converged);
        iterations.push(res.iterations_run);
    }
    let pass = converged >= CONVERGED_MIN;
    report(
        8,
        "convergence",
        pass,
        &format!("{converged} of {PLANTED_SEEDS} seeds converged; iterations {iterations:?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_09_baseline_monotonicity() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(1009);
    let mut violations = 0;
    let mut instances = 0;
    for case in 0..60u64 {
        let d = rng.random_range(1..=15);
        let n = rng.random_range(2..=20);
        let r = rng.random_range(1..=n.min(5));
        // a third of the CF cases use signed data
        let lo = if case % 3 == 0 { -1.0 } else { 0.0 };
        let x = rand_mat(&mut rng, d, n, lo, 1.0);
        let mut traces = vec![cf_fit(&x, r, 200, case, 1e-12).unwrap().trace];
        if lo == 0.0 {
            traces.push(nmf_fit(&x, r, 200, case, 1e-12).unwrap().trace);
        }
        for trace in traces {
            instances += 1;
            violations += trace.windows(2).filter(|w| w[1].1 > w[0].1 + BASELINE_SLACK).count();
        }
    }
    let pass = violations == 0;
    report(
        9,
        "baseline monotonicity",
        pass,
        &format!("{instances} traces, {violations} increasing steps"),
    );
    assert!(pass);
}

#[test]
fn criterion_10_binary_round_trip() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut mismatches = 0;
    for case in 0..IO_CASES {
        let (d, n) = match case {
            0 => (1, 1),
            1 => (1, rng.random_range(2..50)),
            _ => (rng.random_range(1..30), rng.random_range(1..30)),
        };
        let scale = 10f64.powi(rng.random_range(-300..300));
        let values = DMatrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0) * scale);
        let labels = (0..n).map(|_| rng.random()).collect();
        let ds = LabeledDataset::new(values, labels, "m").unwrap();
        let path = dir.path().join(format!("m{case}.bin"));
        save_matrix(&ds, &path, MatrixFormat::Bin).unwrap();
        let back = load_matrix(&path, MatrixFormat::Bin).unwrap();
        let same = back.values.shape() == ds.values.shape()
            && back.labels == ds.labels
            && back.values.iter().zip(ds.values.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
        mismatches += usize::from(!same);
    }
    let pass = mismatches == 0;
    report(
        10,
        "binary round trip",
        pass,
        &format!("{IO_CASES} matrices, {mismatches} not bitwise identical"),
    );
    assert!(pass);
}
