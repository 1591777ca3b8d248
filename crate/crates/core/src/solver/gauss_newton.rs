use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CaseLabel, Method, MethodSetup, ParamVector, Problem, SolverConfig};
use crate::error::{Error, Result};
use crate::linalg::weighted_lstsq;
use crate::lowrank::{check_offsets, RANK_REL_TOL};
use crate::scene::{validate_range, MeasurementMatrix, TimingOffsets};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    Diverged,
    MaxIterations,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Converged => "Converged",
            SolveStatus::Diverged => "Diverged",
            SolveStatus::MaxIterations => "MaxIterations",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveOutcome {
    pub offsets: TimingOffsets,
    pub status: SolveStatus,
    pub iterations: usize,
    pub final_objective: f64,
    pub runtime_ms: f64,
}

impl SolveOutcome {
    pub fn record(&self, setup: &MethodSetup, er: Option<f64>, seed: Option<u64>) -> OutcomeRecord {
        OutcomeRecord {
            method: setup.method,
            case: setup.case,
            status: self.status,
            iterations: self.iterations,
            final_objective: self.final_objective,
            er,
            runtime_ms: self.runtime_ms,
            seed,
            delta: self.offsets.delta.clone(),
            eta: self.offsets.eta.clone(),
        }
    }
}

/// JSON form of a solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub method: Method,
    pub case: CaseLabel,
    pub status: SolveStatus,
    pub iterations: usize,
    pub final_objective: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub er: Option<f64>,
    pub runtime_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub delta: Vec<f64>,
    pub eta: Vec<f64>,
}

/// State reported after every accepted Gauss-Newton update.
#[derive(Debug)]
pub struct IterationInfo<'a> {
    /// 1-based iteration count.
    pub iteration: usize,
    /// Objective at the point the step was computed from.
    pub objective: f64,
    pub step_norm: f64,
    /// Parameters after the update.
    pub params: &'a DVector<f64>,
}

/// `p - dp` where `dp` minimises `|J dp - q|` (minimum norm when `J` is
/// rank deficient).
pub fn gauss_newton_step(
    p: &DVector<f64>,
    jac: &DMatrix<f64>,
    q: &DVector<f64>,
) -> Result<DVector<f64>> {
    if jac.ncols() != p.len() {
        return Err(Error::DimensionMismatch(format!(
            "jacobian has {} columns, parameter vector {} entries",
            jac.ncols(),
            p.len()
        )));
    }
    let step = weighted_lstsq(jac, q)?;
    Ok(p - step)
}

/// Random initial offsets: `delta` uniform in `time_range`, `eta` uniform
/// with `eta[0] = 0`.
pub fn init_offsets(m: usize, n: usize, time_range: [f64; 2], seed: u64) -> Result<TimingOffsets> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument("counts must be positive".into()));
    }
    validate_range(time_range)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lo, hi] = time_range;
    let delta = (0..m).map(|_| rng.random_range(lo..hi)).collect();
    let eta = std::iter::once(0.0)
        .chain((1..n).map(|_| rng.random_range(lo..hi)))
        .collect();
    Ok(TimingOffsets { delta, eta })
}

pub fn solve(
    meas: &MeasurementMatrix,
    setup: &MethodSetup,
    init: &TimingOffsets,
    config: &SolverConfig,
) -> Result<SolveOutcome> {
    solve_observed(meas, setup, init, config, |_| {})
}

/// Gauss-Newton iteration with stopping checks in the order: divergence
/// (objective above `w_star` or non-finite), step norm below `d_p`,
/// iteration cap `m2`.
pub fn solve_observed(
    meas: &MeasurementMatrix,
    setup: &MethodSetup,
    init: &TimingOffsets,
    config: &SolverConfig,
    mut observer: impl FnMut(&IterationInfo<'_>),
) -> Result<SolveOutcome> {
    config.validate()?;
    check_offsets(meas.num_mics(), meas.num_sources(), init)?;
    if init.eta[0] != 0.0 {
        return Err(Error::InvalidArgument(format!(
            "initial eta[0] must be 0 (gauge), got {}",
            init.eta[0]
        )));
    }
    setup.weights.validate(setup.case)?;
    let start = Instant::now();
    let problem = Problem::new(meas, setup.weights, setup.assembly)?;
    problem.blocks(init)?.check_lrp_basis(RANK_REL_TOL)?;
    let mut p = problem.initial_point(init)?;
    let layout = problem.layout().clone();

    let mut status = SolveStatus::MaxIterations;
    let mut iterations = config.m2;
    for iter in 0..config.m2 {
        let q = problem.residual(&p)?.values;
        let objective = q.norm_squared();
        if !objective.is_finite() || objective > config.w_star {
            status = SolveStatus::Diverged;
            iterations = iter;
            break;
        }
        let next = match problem.gauss_newton_direction(&p, &q) {
            Ok(d) if d.iter().all(|v| v.is_finite()) => &p.values - d,
            Ok(_) | Err(Error::NumericalFailure(_)) => {
                status = SolveStatus::Diverged;
                iterations = iter + 1;
                break;
            }
            Err(e) => return Err(e),
        };
        let step_norm = (&next - &p.values).norm();
        p = ParamVector { values: next };
        observer(&IterationInfo {
            iteration: iter + 1,
            objective,
            step_norm,
            params: &p.values,
        });
        if step_norm < config.d_p {
            status = SolveStatus::Converged;
            iterations = iter + 1;
            break;
        }
    }

    let final_objective = problem.residual(&p)?.objective();
    if status != SolveStatus::Diverged
        && (!final_objective.is_finite() || final_objective > config.w_star)
    {
        status = SolveStatus::Diverged;
    }
    Ok(SolveOutcome {
        offsets: p.offsets(&layout),
        status,
        iterations,
        final_objective,
        runtime_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}
