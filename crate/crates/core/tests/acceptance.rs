//! Acceptance criteria, one verdict line each.
//!
//! Runs without the libtest harness so every verdict is printed even when
//! all criteria pass. Exits non-zero when any criterion fails.

use std::time::{Duration, Instant};

use clra::experiments::{run_plan, ExperimentPlan, RunRecord};
use clra::lowrank::{build_blocks, m_n, numeric_rank, Property};
use clra::metrics::{estimation_error, is_recovered, summarize, MetricSummary};
use clra::scene::{
    generate_scene, pseudo_toa_from_tdoa, tdoa_from_scene, toa_from_scene, SceneSpec,
};
use clra::solver::{
    default_weights, init_offsets, jacobian_check, select_case, solve_observed, Assembly,
    CaseLabel, Layout, PenaltyWeights, Problem,
};
use clra::{
    MeasurementMatrix, Method, MethodSetup, Scene, SolveStatus, SolverConfig, TimingOffsets,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RANK_TOL: f64 = 1e-8;
const MASTER_SEED: u64 = 2024;

type Criterion = (&'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn scene(m: usize, n: usize, seed: u64) -> Scene {
    generate_scene(&SceneSpec::simulation(m, n), seed).unwrap()
}

fn rank(mat: &nalgebra::DMatrix<f64>) -> usize {
    numeric_rank(mat, RANK_TOL).unwrap().rank
}

/// Counts scenes whose ranks match the low-rank properties that hold at
/// the given size.
fn rank_suite(
    m: usize,
    n: usize,
    scenes: u64,
    measure: impl Fn(&Scene) -> (MeasurementMatrix, TimingOffsets),
) -> (usize, String) {
    let mut ok = 0;
    let mut first_bad = String::new();
    for k in 0..scenes {
        let sc = scene(m, n, 1000 + k);
        let (meas, truth) = measure(&sc);
        let blocks = build_blocks(&meas, &truth).unwrap();
        let lrp = rank(&blocks.parent(Property::Lrp));
        let v3 = rank(&blocks.parent(Property::Lrpv3));
        let mut good = lrp == 3 && v3 == m_n(m, n);
        let mut extra = String::new();
        for prop in [Property::Lrpv1, Property::Lrpv2] {
            if prop.is_low_rank(m, n) {
                let r = rank(&blocks.parent(prop));
                good &= r == prop.rank_bound(m, n);
                extra = format!(" {}={r}", prop.label());
            }
        }
        if good {
            ok += 1;
        } else if first_bad.is_empty() {
            first_bad = format!(" first miss: scene {k} D+U={lrp} T3={v3}{extra}");
        }
    }
    (ok, first_bad)
}

fn toa_truth(sc: &Scene) -> (MeasurementMatrix, TimingOffsets) {
    (toa_from_scene(sc).unwrap(), sc.offsets())
}

fn pseudo_truth(sc: &Scene) -> (MeasurementMatrix, TimingOffsets) {
    let (meas, gauge) = pseudo_toa_from_tdoa(&tdoa_from_scene(sc).unwrap(), sc.c).unwrap();
    (meas, gauge.truth(sc))
}

fn rank_properties() -> Verdict {
    let start = Instant::now();
    let sizes = [(10, 10), (15, 8), (8, 15)];
    let mut parts = Vec::new();
    let mut all = true;
    for (m, n) in sizes {
        let (ok, miss) = rank_suite(m, n, 100, toa_truth);
        all &= ok == 100;
        parts.push(format!("({m},{n}) {ok}/100{miss}"));
    }
    let t = start.elapsed();
    verdict(
        all && within(t, 30.0),
        format!("{}; {:.1}s (limit 30s)", parts.join(", "), t.as_secs_f64()),
    )
}

fn negative_control() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED);
    let mut violated = 0;
    for k in 0..100 {
        let sc = scene(10, 10, 5000 + k);
        let meas = toa_from_scene(&sc).unwrap();
        let delta = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eta = std::iter::once(0.0)
            .chain((1..10).map(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let wrong = TimingOffsets::new(delta, eta).unwrap();
        let blocks = build_blocks(&meas, &wrong).unwrap();
        if rank(&blocks.parent(Property::Lrp)) > 3 {
            violated += 1;
        }
    }
    let t = start.elapsed();
    verdict(
        violated >= 99,
        format!(
            "rank(D+U) > 3 in {violated}/100 scenes (need >= 99); {:.1}s",
            t.as_secs_f64()
        ),
    )
}

fn jacobian_points() -> Verdict {
    let start = Instant::now();
    let combos: [(usize, usize, Method); 11] = [
        (15, 8, Method::Stls),
        (15, 8, Method::Clra1),
        (15, 8, Method::Clra3),
        (15, 8, Method::Clra),
        (8, 15, Method::Stls),
        (8, 15, Method::Clra1),
        (8, 15, Method::Clra2),
        (8, 15, Method::Clra),
        (10, 10, Method::Stls),
        (10, 10, Method::Clra1),
        (10, 10, Method::Clra),
    ];
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for k in 0..20u64 {
        let (m, n, method) = combos[k as usize % combos.len()];
        let meas = toa_from_scene(&scene(m, n, 7000 + k)).unwrap();
        let setup = MethodSetup::resolve(method, m, n, None, None).unwrap();
        let problem = Problem::new(&meas, setup.weights, setup.assembly).unwrap();
        let init = init_offsets(m, n, [-1.0, 1.0], 8000 + k).unwrap();
        let p = problem.initial_point(&init).unwrap();
        let analytic = problem.jacobian(&p).unwrap();
        let fd = problem.jacobian_fd(&p, 1e-6).unwrap();
        let check = jacobian_check(&analytic, &fd, 1e-9);
        if check.max_rel_error > worst {
            worst = check.max_rel_error;
            worst_at = format!("{method} ({m},{n}) point {k}");
        }
    }
    let t = start.elapsed();
    verdict(
        worst < 1e-6 && within(t, 60.0),
        format!(
            "max relative error {worst:.2e} at {worst_at} (need < 1e-6); {:.1}s (limit 60s)",
            t.as_secs_f64()
        ),
    )
}

fn dimensions() -> Verdict {
    let (m, n) = (10, 10);
    let weights = default_weights(Method::Clra, CaseLabel::C3).unwrap();
    let all = Layout::new(m, n, &weights, Assembly::AllBlocks).unwrap();
    let active = Layout::new(m, n, &weights, Assembly::Active).unwrap();
    let q_formula = Layout::full_residual_count(m, n);
    let p_formula = Layout::full_param_count(m, n);
    let pass = all.num_residuals == 351
        && q_formula == 351
        && all.num_params == p_formula
        && p_formula == 253
        && active.num_params == 109;
    verdict(
        pass,
        format!(
            "all blocks |q|={} (formula {q_formula}), |p|={} (formula {p_formula}); \
             active C3 CLRA |p|={} |q|={}",
            all.num_residuals, all.num_params, active.num_params, active.num_residuals
        ),
    )
}

/// Noiseless local recovery from truth plus a uniform perturbation.
fn local_recovery(
    measure: impl Fn(&Scene) -> (MeasurementMatrix, TimingOffsets),
) -> (usize, usize, Duration) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED + 5);
    let config = SolverConfig::default();
    let mut good = 0;
    for k in 0..50 {
        let sc = scene(10, 10, 9000 + k);
        let (meas, truth) = measure(&sc);
        let setup = MethodSetup::resolve(Method::Clra, 10, 10, None, None).unwrap();
        let mut jitter = |v: f64| v + rng.random_range(-1e-3..1e-3);
        let delta = truth.delta.iter().map(|&d| jitter(d)).collect();
        let eta = std::iter::once(0.0)
            .chain(truth.eta[1..].iter().map(|&e| jitter(e)))
            .collect();
        let init = TimingOffsets::new(delta, eta).unwrap();
        let out = solve_observed(&meas, &setup, &init, &config, |_| {}).unwrap();
        let er = estimation_error(&out.offsets, &truth).unwrap();
        if out.status == SolveStatus::Converged && is_recovered(er) {
            good += 1;
        }
    }
    (good, 50, start.elapsed())
}

fn local_convergence() -> Verdict {
    let (good, total, t) = local_recovery(toa_truth);
    verdict(
        good * 100 >= 95 * total && within(t, 120.0),
        format!(
            "{good}/{total} converged with er < 1e-4 (need >= 95%); {:.1}s (limit 120s)",
            t.as_secs_f64()
        ),
    )
}

fn summary_of(records: &[RunRecord], method: Method) -> MetricSummary {
    let subset: Vec<RunRecord> = records
        .iter()
        .filter(|r| r.method == method)
        .cloned()
        .collect();
    summarize(&subset).unwrap()
}

fn comparison(m: usize, n: usize, method: Method, strict: bool) -> (bool, String) {
    let mut plan = ExperimentPlan::new(vec![[m, n]], vec![Method::Stls, method], MASTER_SEED);
    plan.configs = 20;
    plan.inits = 50;
    let records = run_plan(&plan).unwrap();
    let stls = summary_of(&records, Method::Stls);
    let other = summary_of(&records, method);
    let rr_ok = if strict {
        other.recovery_rate > stls.recovery_rate
    } else {
        other.recovery_rate >= stls.recovery_rate
    };
    let cr_ok = other.convergence_rate >= stls.convergence_rate;
    let rel = if strict { ">" } else { ">=" };
    (
        rr_ok && cr_ok,
        format!(
            "({m},{n}) {method} Rr {:.3} {rel} STLS {:.3}: {}, Cr {:.2} >= {:.2}: {}",
            other.recovery_rate,
            stls.recovery_rate,
            if rr_ok { "yes" } else { "no" },
            other.convergence_rate,
            stls.convergence_rate,
            if cr_ok { "yes" } else { "no" },
        ),
    )
}

fn method_ordering() -> Verdict {
    let start = Instant::now();
    let checks = [
        comparison(10, 10, Method::Clra, true),
        comparison(15, 8, Method::Clra3, false),
        comparison(8, 15, Method::Clra2, false),
    ];
    let pass = checks.iter().all(|(ok, _)| *ok);
    let detail: Vec<&str> = checks.iter().map(|(_, d)| d.as_str()).collect();
    verdict(
        pass,
        format!(
            "{}; {:.0}s",
            detail.join("; "),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn noise_robustness() -> Verdict {
    let start = Instant::now();
    let rates = |sigma: f64| {
        let mut plan =
            ExperimentPlan::new(vec![[15, 8]], vec![Method::Stls, Method::Clra], MASTER_SEED);
        plan.configs = 10;
        plan.inits = 50;
        plan.sigmas = vec![sigma];
        let records = run_plan(&plan).unwrap();
        (
            summary_of(&records, Method::Stls).recovery_rate,
            summary_of(&records, Method::Clra).recovery_rate,
        )
    };
    let (stls_lo, clra_lo) = rates(1e-6);
    let (stls_hi, clra_hi) = rates(1e-2);
    let pass = clra_lo > stls_lo && stls_hi == 0.0 && clra_hi == 0.0;
    verdict(
        pass,
        format!(
            "(15,8) sigma=1e-6: CLRA {clra_lo:.3} vs STLS {stls_lo:.3} (need CLRA > STLS); \
             sigma=1e-2: CLRA {clra_hi:.3}, STLS {stls_hi:.3} (need both 0); {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn tdoa_pathway() -> Verdict {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut all = true;
    for (m, n) in [(10, 10), (15, 8), (8, 15)] {
        let (ok, miss) = rank_suite(m, n, 100, pseudo_truth);
        all &= ok == 100;
        parts.push(format!("({m},{n}) {ok}/100{miss}"));
    }
    let (good, total, _) = local_recovery(pseudo_truth);
    all &= good * 100 >= 95 * total;
    verdict(
        all,
        format!(
            "rank suite {}; local recovery {good}/{total}; {:.1}s",
            parts.join(", "),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn zero_weight_equivalence() -> Verdict {
    let (m, n) = (10, 10);
    let config = SolverConfig::default();
    let stls = MethodSetup::resolve(Method::Stls, m, n, None, None).unwrap();
    let clra = MethodSetup::resolve(
        Method::Clra,
        m,
        n,
        None,
        Some(PenaltyWeights {
            lambda: stls.weights.lambda,
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        }),
    )
    .unwrap();
    let trace = |setup: &MethodSetup, meas: &MeasurementMatrix, init: &TimingOffsets| {
        let mut iterates = Vec::new();
        let out = solve_observed(meas, setup, init, &config, |info| {
            iterates.push(info.params.clone())
        })
        .unwrap();
        (out, iterates)
    };
    let mut worst = 0.0f64;
    let mut same_len = true;
    for k in 0..10 {
        let meas = toa_from_scene(&scene(m, n, 11_000 + k)).unwrap();
        let init = init_offsets(m, n, [-1.0, 1.0], 12_000 + k).unwrap();
        let (a, ia) = trace(&stls, &meas, &init);
        let (b, ib) = trace(&clra, &meas, &init);
        same_len &= ia.len() == ib.len() && a.status == b.status;
        for (x, y) in ia.iter().zip(&ib) {
            worst = worst.max((x - y).norm() / x.norm().max(1e-300));
        }
    }
    verdict(
        same_len && worst <= 1e-12,
        format!("10 runs, max relative iterate difference {worst:.2e} (need <= 1e-12)"),
    )
}

fn solve_time() -> Verdict {
    let (m, n) = (10, 10);
    let config = SolverConfig::default();
    let setup = MethodSetup::resolve(Method::Clra, m, n, None, None).unwrap();
    assert_eq!(select_case(m, n).unwrap(), CaseLabel::C3);
    let mut times: Vec<f64> = (0..21)
        .map(|k| {
            let meas = toa_from_scene(&scene(m, n, 13_000 + k)).unwrap();
            let init = init_offsets(m, n, [-1.0, 1.0], 14_000 + k).unwrap();
            let t = Instant::now();
            solve_observed(&meas, &setup, &init, &config, |_| {}).unwrap();
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    verdict(
        median < 1.0,
        format!(
            "median CLRA solve at (10,10) {:.2} ms over 21 runs (limit 1 s)",
            median * 1e3
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("rank properties at the true offsets", rank_properties),
        ("rank inflation at wrong offsets", negative_control),
        ("analytic vs finite-difference Jacobian", jacobian_points),
        ("residual and parameter dimensions", dimensions),
        ("local convergence from near the truth", local_convergence),
        ("method ordering over random inits", method_ordering),
        ("noise robustness", noise_robustness),
        ("TDOA pseudo-TOA pathway", tdoa_pathway),
        ("zero extra weights reproduce STLS", zero_weight_equivalence),
        ("solve time", solve_time),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let v = run();
        if !v.pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} [{}] {name}: {}",
            k + 1,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
