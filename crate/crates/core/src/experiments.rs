//! Monte-Carlo orchestration: grids over `(M, N)`, random configurations and
//! initialisations, noise levels, penalty sweeps, and CSV persistence.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::estimation_error;
use crate::scene::{
    add_noise, generate_scene, pseudo_toa_from_tdoa, tdoa_from_scene, toa_from_scene,
    MeasurementKind, MeasurementMatrix, SceneSpec, TimingOffsets, SPEED_OF_SOUND,
};
use crate::solver::{
    init_offsets, select_case, solve, CaseLabel, Method, MethodSetup, PenaltyWeights, SolveStatus,
    SolverConfig,
};

/// Environment variable overriding a plan's master seed.
pub const SEED_ENV: &str = "CLRA_SEED";

pub const RESULTS_HEADER: [&str; 12] = [
    "method",
    "m",
    "n",
    "case",
    "config",
    "init",
    "sigma",
    "seed",
    "status",
    "iterations",
    "er",
    "runtime_ms",
];

const TAG_SCENE: u64 = 1;
const TAG_NOISE: u64 = 2;
const TAG_INIT: u64 = 3;

fn default_configs() -> usize {
    20
}

fn default_inits() -> usize {
    50
}

fn default_sigmas() -> Vec<f64> {
    vec![0.0]
}

fn default_kind() -> MeasurementKind {
    MeasurementKind::Toa
}

fn default_extent() -> [f64; 3] {
    [10.0, 10.0, 3.0]
}

fn default_range() -> [f64; 2] {
    [-1.0, 1.0]
}

fn default_c() -> f64 {
    SPEED_OF_SOUND
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    /// `(M, N)` pairs.
    pub grid: Vec<[usize; 2]>,
    pub methods: Vec<Method>,
    /// Random configurations per `(M, N)`.
    #[serde(default = "default_configs")]
    pub configs: usize,
    /// Initialisations per configuration.
    #[serde(default = "default_inits")]
    pub inits: usize,
    #[serde(default = "default_sigmas")]
    pub sigmas: Vec<f64>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default = "default_kind")]
    pub measurement_kind: MeasurementKind,
    #[serde(default)]
    pub weight_overrides: BTreeMap<Method, PenaltyWeights>,
    #[serde(default = "default_extent")]
    pub extent: [f64; 3],
    /// Range for the true offsets and for the random initialisations.
    #[serde(default = "default_range")]
    pub time_range: [f64; 2],
    #[serde(default = "default_c")]
    pub c: f64,
    /// Worker threads; all logical cores when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
}

impl ExperimentPlan {
    /// Noiseless TOA plan with the desk-scale defaults (20 configurations,
    /// 50 initialisations).
    pub fn new(grid: Vec<[usize; 2]>, methods: Vec<Method>, master_seed: u64) -> Self {
        Self {
            grid,
            methods,
            configs: default_configs(),
            inits: default_inits(),
            sigmas: default_sigmas(),
            master_seed,
            solver: SolverConfig::default(),
            measurement_kind: default_kind(),
            weight_overrides: BTreeMap::new(),
            extent: default_extent(),
            time_range: default_range(),
            c: default_c(),
            jobs: None,
        }
    }

    /// Reads a TOML plan and applies the `CLRA_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut plan: Self = toml::from_str(&text).map_err(|e| Error::parse(path, e))?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            plan.master_seed = seed.trim().parse().map_err(|_| {
                Error::Configuration(format!("{SEED_ENV}=`{seed}` is not an unsigned integer"))
            })?;
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.configs < 1 || self.inits < 1 {
            return Err(Error::Configuration(format!(
                "configs and inits must be >= 1, got {} and {}",
                self.configs, self.inits
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Configuration("plan lists no methods".into()));
        }
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Configuration(
                "sigmas must be a nonempty list of values >= 0".into(),
            ));
        }
        if self.jobs == Some(0) {
            return Err(Error::Configuration("jobs must be >= 1".into()));
        }
        self.solver.validate()?;
        Ok(())
    }

    fn scene_spec(&self, m: usize, n: usize) -> SceneSpec {
        SceneSpec {
            m,
            n,
            extent: self.extent,
            time_range: self.time_range,
            c: self.c,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RunStatus {
    Converged,
    Diverged,
    MaxIterations,
    /// The run could not be set up (configuration or degenerate scene).
    Error,
}

impl From<SolveStatus> for RunStatus {
    fn from(s: SolveStatus) -> Self {
        match s {
            SolveStatus::Converged => RunStatus::Converged,
            SolveStatus::Diverged => RunStatus::Diverged,
            SolveStatus::MaxIterations => RunStatus::MaxIterations,
        }
    }
}

/// Outcome of one `(configuration, initialisation)` solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub m: usize,
    pub n: usize,
    pub case: CaseLabel,
    pub config: usize,
    pub init: usize,
    pub sigma: f64,
    pub seed: u64,
    pub status: RunStatus,
    pub iterations: usize,
    /// `NaN` when the run errored.
    pub er: f64,
    pub runtime_ms: f64,
}

impl RunRecord {
    /// Copy with the wall-clock field cleared, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            runtime_ms: 0.0,
            ..self.clone()
        }
    }

    fn key(&self) -> (Method, usize, usize, u64, usize, usize) {
        (
            self.method,
            self.m,
            self.n,
            self.sigma.to_bits(),
            self.config,
            self.init,
        )
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based seed derivation: a pure function of the master seed and
/// the key path, independent of execution order.
pub fn derive_seed(master: u64, key: &[u64]) -> u64 {
    key.iter().fold(splitmix64(master), |h, &k| {
        splitmix64(h ^ splitmix64(k ^ 0xD6E8_FEB8_6659_FD93))
    })
}

struct Job {
    m: usize,
    n: usize,
    config: usize,
    sigma_index: usize,
    method: Method,
}

struct Instance {
    meas: MeasurementMatrix,
    truth: TimingOffsets,
}

fn build_instance(plan: &ExperimentPlan, job: &Job) -> Result<Instance> {
    let (m, n) = (job.m as u64, job.n as u64);
    let scene_seed = derive_seed(plan.master_seed, &[TAG_SCENE, m, n, job.config as u64]);
    let scene = generate_scene(&plan.scene_spec(job.m, job.n), scene_seed)?;
    let (meas, truth) = match plan.measurement_kind {
        MeasurementKind::Toa => (toa_from_scene(&scene)?, scene.offsets()),
        MeasurementKind::PseudoToa => {
            let (meas, gauge) = pseudo_toa_from_tdoa(&tdoa_from_scene(&scene)?, scene.c)?;
            (meas, gauge.truth(&scene))
        }
    };
    let sigma = plan.sigmas[job.sigma_index];
    let noise_seed = derive_seed(
        plan.master_seed,
        &[TAG_NOISE, m, n, job.config as u64, job.sigma_index as u64],
    );
    let meas = add_noise(&meas, sigma, noise_seed)?;
    Ok(Instance { meas, truth })
}

fn run_job(plan: &ExperimentPlan, job: &Job) -> Vec<RunRecord> {
    let sigma = plan.sigmas[job.sigma_index];
    let case = select_case(job.m, job.n).unwrap_or(CaseLabel::C3);
    let init_seed = |init: usize| {
        derive_seed(
            plan.master_seed,
            &[
                TAG_INIT,
                job.m as u64,
                job.n as u64,
                job.config as u64,
                init as u64,
            ],
        )
    };
    let failed = |init: usize, err: &Error| {
        warn!(
            "{} ({},{}) config {} init {}: {err}",
            job.method, job.m, job.n, job.config, init
        );
        RunRecord {
            method: job.method,
            m: job.m,
            n: job.n,
            case,
            config: job.config,
            init,
            sigma,
            seed: init_seed(init),
            status: RunStatus::Error,
            iterations: 0,
            er: f64::NAN,
            runtime_ms: 0.0,
        }
    };
    let prepared = build_instance(plan, job).and_then(|inst| {
        let setup = MethodSetup::resolve(
            job.method,
            job.m,
            job.n,
            None,
            plan.weight_overrides.get(&job.method).copied(),
        )?;
        Ok((inst, setup))
    });
    let (inst, setup) = match prepared {
        Ok(v) => v,
        Err(e) => return (0..plan.inits).map(|i| failed(i, &e)).collect(),
    };
    (0..plan.inits)
        .map(|init| {
            let seed = init_seed(init);
            let outcome = init_offsets(job.m, job.n, plan.time_range, seed)
                .and_then(|start| solve(&inst.meas, &setup, &start, &plan.solver))
                .and_then(|out| Ok((estimation_error(&out.offsets, &inst.truth)?, out)));
            match outcome {
                Ok((er, out)) => RunRecord {
                    method: job.method,
                    m: job.m,
                    n: job.n,
                    case: setup.case,
                    config: job.config,
                    init,
                    sigma,
                    seed,
                    status: out.status.into(),
                    iterations: out.iterations,
                    er,
                    runtime_ms: out.runtime_ms,
                },
                Err(e) => failed(init, &e),
            }
        })
        .collect()
}

/// Runs every `(M, N, configuration, sigma, method, initialisation)`
/// combination. Scenes, noise and initialisations are shared across
/// methods so that methods are compared on identical inputs. Output order
/// is fixed by the plan, independent of scheduling.
pub fn run_plan(plan: &ExperimentPlan) -> Result<Vec<RunRecord>> {
    plan.validate()?;
    let mut jobs = Vec::new();
    for &[m, n] in &plan.grid {
        if m < 5 || n < 5 {
            warn!("skipping grid point ({m},{n}): needs M >= 5 and N >= 5");
            continue;
        }
        for config in 0..plan.configs {
            for sigma_index in 0..plan.sigmas.len() {
                for &method in &plan.methods {
                    jobs.push(Job {
                        m,
                        n,
                        config,
                        sigma_index,
                        method,
                    });
                }
            }
        }
    }
    let work = || -> Vec<RunRecord> {
        jobs.par_iter()
            .flat_map_iter(|job| run_job(plan, job))
            .collect()
    };
    let mut records = match plan.jobs {
        Some(threads) => rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Configuration(e.to_string()))?
            .install(work),
        None => work(),
    };
    records.sort_by(|a, b| {
        a.key()
            .partial_cmp(&b.key())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(records)
}

/// Base-10 exponents of the penalty weights; `None` keeps a weight at 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExponentPoint {
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
}

impl ExponentPoint {
    pub fn weights(&self) -> PenaltyWeights {
        PenaltyWeights::from_exponents(self.lambda, self.alpha, self.beta, self.gamma)
    }
}

/// `lambda* = gamma* = e` for each `e`.
pub fn diagonal_grid(exponents: impl IntoIterator<Item = f64>) -> Vec<ExponentPoint> {
    exponents
        .into_iter()
        .map(|e| ExponentPoint {
            lambda: Some(e),
            gamma: Some(e),
            ..Default::default()
        })
        .collect()
}

/// Full `lambda* x gamma*` rectangle.
pub fn lambda_gamma_grid(lambdas: &[f64], gammas: &[f64]) -> Vec<ExponentPoint> {
    lambdas
        .iter()
        .flat_map(|&l| {
            gammas.iter().map(move |&g| ExponentPoint {
                lambda: Some(l),
                gamma: Some(g),
                ..Default::default()
            })
        })
        .collect()
}

/// `lambda* = 10` fixed, one extra exponent varied (`beta*` for CLRA2,
/// `alpha*` for CLRA3).
pub fn single_penalty_grid(method: Method, exponents: &[f64]) -> Result<Vec<ExponentPoint>> {
    exponents
        .iter()
        .map(|&e| {
            let base = ExponentPoint {
                lambda: Some(10.0),
                ..Default::default()
            };
            match method {
                Method::Clra2 => Ok(ExponentPoint {
                    beta: Some(e),
                    ..base
                }),
                Method::Clra3 => Ok(ExponentPoint {
                    alpha: Some(e),
                    ..base
                }),
                Method::Clra1 => Ok(ExponentPoint {
                    gamma: Some(e),
                    ..base
                }),
                _ => Err(Error::Configuration(format!(
                    "no single-penalty sweep for {method}"
                ))),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub lambda_exp: Option<f64>,
    pub alpha_exp: Option<f64>,
    pub beta_exp: Option<f64>,
    pub gamma_exp: Option<f64>,
    pub method: Method,
    pub m: usize,
    pub n: usize,
    pub case: CaseLabel,
    pub config: usize,
    pub init: usize,
    pub sigma: f64,
    pub seed: u64,
    pub status: RunStatus,
    pub iterations: usize,
    pub er: f64,
    pub runtime_ms: f64,
}

impl SweepRecord {
    fn new(point: &ExponentPoint, r: RunRecord) -> Self {
        Self {
            lambda_exp: point.lambda,
            alpha_exp: point.alpha,
            beta_exp: point.beta,
            gamma_exp: point.gamma,
            method: r.method,
            m: r.m,
            n: r.n,
            case: r.case,
            config: r.config,
            init: r.init,
            sigma: r.sigma,
            seed: r.seed,
            status: r.status,
            iterations: r.iterations,
            er: r.er,
            runtime_ms: r.runtime_ms,
        }
    }

    pub fn exponents(&self) -> ExponentPoint {
        ExponentPoint {
            lambda: self.lambda_exp,
            alpha: self.alpha_exp,
            beta: self.beta_exp,
            gamma: self.gamma_exp,
        }
    }

    pub fn run(&self) -> RunRecord {
        RunRecord {
            method: self.method,
            m: self.m,
            n: self.n,
            case: self.case,
            config: self.config,
            init: self.init,
            sigma: self.sigma,
            seed: self.seed,
            status: self.status,
            iterations: self.iterations,
            er: self.er,
            runtime_ms: self.runtime_ms,
        }
    }
}

/// One sub-experiment per exponent point, each running `method` with
/// weights `10^exponent` on the base plan's scenes and initialisations.
pub fn sweep_penalties(
    base: &ExperimentPlan,
    method: Method,
    grid: &[ExponentPoint],
) -> Result<Vec<SweepRecord>> {
    if grid.is_empty() {
        return Err(Error::Configuration("empty exponent grid".into()));
    }
    let mut out = Vec::new();
    for point in grid {
        let mut plan = base.clone();
        plan.methods = vec![method];
        plan.weight_overrides = BTreeMap::from([(method, point.weights())]);
        out.extend(
            run_plan(&plan)?
                .into_iter()
                .map(|r| SweepRecord::new(point, r)),
        );
    }
    Ok(out)
}

/// Recovery rate per exponent point, in grid order.
pub fn sweep_table(records: &[SweepRecord]) -> Result<Vec<(ExponentPoint, f64)>> {
    let mut points: Vec<ExponentPoint> = Vec::new();
    for r in records {
        let p = r.exponents();
        if !points.contains(&p) {
            points.push(p);
        }
    }
    points
        .into_iter()
        .map(|p| {
            let runs: Vec<RunRecord> = records
                .iter()
                .filter(|r| r.exponents() == p)
                .map(SweepRecord::run)
                .collect();
            Ok((p, crate::metrics::summarize(&runs)?.recovery_rate))
        })
        .collect()
}

fn write_rows<T: Serialize, W: Write>(rows: &[T], header: &[&str], out: W) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn save_rows<T: Serialize>(rows: &[T], header: &[&str], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_rows(rows, header, file).map_err(|e| Error::parse(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(header: &[&str], path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let found = r.headers().map_err(|e| Error::parse(path, e))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::parse(
            path,
            format!(
                "unexpected header `{}`",
                found.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::parse(path, e)))
        .collect()
}

/// Writes records as CSV under the fixed results header.
pub fn persist(records: &[RunRecord], path: &Path) -> Result<()> {
    save_rows(records, &RESULTS_HEADER, path)
}

pub fn write_results<W: Write>(records: &[RunRecord], out: W) -> Result<()> {
    write_rows(records, &RESULTS_HEADER, out).map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn load(path: &Path) -> Result<Vec<RunRecord>> {
    read_rows(&RESULTS_HEADER, path)
}

fn sweep_header() -> Vec<&'static str> {
    ["lambda_exp", "alpha_exp", "beta_exp", "gamma_exp"]
        .into_iter()
        .chain(RESULTS_HEADER)
        .collect()
}

pub fn persist_sweep(records: &[SweepRecord], path: &Path) -> Result<()> {
    save_rows(records, &sweep_header(), path)
}

pub fn write_sweep<W: Write>(records: &[SweepRecord], out: W) -> Result<()> {
    write_rows(records, &sweep_header(), out).map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn load_sweep(path: &Path) -> Result<Vec<SweepRecord>> {
    read_rows(&sweep_header(), path)
}
