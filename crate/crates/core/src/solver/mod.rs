//! Combined low-rank approximation (CLRA) solver family.
//!
//! The objective is
//!
//! ```text
//! |U|_F^2 + lambda^2 |(A+F)X - (B+G)|_F^2 + gamma^2 |T31 Y - T32|_F^2
//!         + alpha^2 |T11 Z - T12|_F^2   + beta^2 |T21 W - T22|_F^2
//! ```
//!
//! minimised over the offsets and the coefficient matrices by plain
//! Gauss-Newton. STLS is the special case `alpha = beta = gamma = 0`.

mod gauss_newton;
mod problem;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::{check_sizes, Property};

pub use gauss_newton::{
    gauss_newton_step, init_offsets, solve, solve_observed, IterationInfo, OutcomeRecord,
    SolveOutcome, SolveStatus,
};
pub use problem::{
    jacobian_check, Assembly, BlockSpan, JacobianCheck, Layout, ParamVector, Problem,
    ResidualVector, PACKING_ORDER,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CaseLabel {
    /// `M - N > 3`
    C1,
    /// `N - M > 3`
    C2,
    /// `|M - N| <= 3`
    C3,
}

impl fmt::Display for CaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CaseLabel::C1 => "C1",
            CaseLabel::C2 => "C2",
            CaseLabel::C3 => "C3",
        })
    }
}

impl FromStr for CaseLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "C1" => Ok(CaseLabel::C1),
            "C2" => Ok(CaseLabel::C2),
            "C3" => Ok(CaseLabel::C3),
            other => Err(Error::InvalidArgument(format!("unknown case `{other}`"))),
        }
    }
}

pub fn select_case(m: usize, n: usize) -> Result<CaseLabel> {
    check_sizes(m, n)?;
    Ok(if m > n + 3 {
        CaseLabel::C1
    } else if n > m + 3 {
        CaseLabel::C2
    } else {
        CaseLabel::C3
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// LRP only.
    Stls,
    /// LRP + LRPV3.
    Clra1,
    /// LRP + LRPV2.
    Clra2,
    /// LRP + LRPV1.
    Clra3,
    /// Every property applicable to the case.
    Clra,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Stls,
        Method::Clra1,
        Method::Clra2,
        Method::Clra3,
        Method::Clra,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Stls => "stls",
            Method::Clra1 => "clra1",
            Method::Clra2 => "clra2",
            Method::Clra3 => "clra3",
            Method::Clra => "clra",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

/// Penalty weights for LRP (`lambda`), LRPV1 (`alpha`), LRPV2 (`beta`) and
/// LRPV3 (`gamma`). Residual rows are scaled by the weight itself, so the
/// objective carries its square.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyWeights {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl PenaltyWeights {
    pub fn weight(&self, property: Property) -> f64 {
        match property {
            Property::Lrp => self.lambda,
            Property::Lrpv1 => self.alpha,
            Property::Lrpv2 => self.beta,
            Property::Lrpv3 => self.gamma,
        }
    }

    pub fn is_stls(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0
    }

    /// Non-negativity plus the combination rule: `alpha` only in C1,
    /// `beta` only in C2.
    pub fn validate(&self, case: CaseLabel) -> Result<()> {
        for (name, w) in [
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Configuration(format!(
                    "penalty {name} must be finite and >= 0, got {w}"
                )));
            }
        }
        if self.alpha != 0.0 && case != CaseLabel::C1 {
            return Err(Error::Configuration(format!(
                "alpha (LRPV1) must be 0 outside C1, case is {case}"
            )));
        }
        if self.beta != 0.0 && case != CaseLabel::C2 {
            return Err(Error::Configuration(format!(
                "beta (LRPV2) must be 0 outside C2, case is {case}"
            )));
        }
        Ok(())
    }

    /// Weights `10^e` for the given exponents; `None` leaves a weight at 0.
    pub fn from_exponents(
        lambda: Option<f64>,
        alpha: Option<f64>,
        beta: Option<f64>,
        gamma: Option<f64>,
    ) -> Self {
        let w = |e: Option<f64>| e.map_or(0.0, |e| 10f64.powf(e));
        Self {
            lambda: w(lambda),
            alpha: w(alpha),
            beta: w(beta),
            gamma: w(gamma),
        }
    }
}

/// Preset weights per method and case.
pub fn default_weights(method: Method, case: CaseLabel) -> Result<PenaltyWeights> {
    let w = |lambda: f64, alpha: f64, beta: f64, gamma: f64| PenaltyWeights {
        lambda,
        alpha,
        beta,
        gamma,
    };
    let weights = match (method, case) {
        (Method::Stls, _) => w(1e10, 0.0, 0.0, 0.0),
        (Method::Clra1, CaseLabel::C2) => w(1e12, 0.0, 0.0, 1e9),
        (Method::Clra1, _) => w(1e10, 0.0, 0.0, 1e10),
        (Method::Clra2, CaseLabel::C2) => w(1e10, 0.0, 1e11, 0.0),
        (Method::Clra3, CaseLabel::C1) => w(1e10, 1e11, 0.0, 0.0),
        (Method::Clra, CaseLabel::C1) => w(1e10, 1e11, 0.0, 1e10),
        (Method::Clra, CaseLabel::C2) => w(1e12, 0.0, 1e13, 1e9),
        (Method::Clra, CaseLabel::C3) => w(1e10, 0.0, 0.0, 1e10),
        (Method::Clra2, _) | (Method::Clra3, _) => {
            return Err(Error::Configuration(format!(
                "{method} is not applicable in case {case}"
            )))
        }
    };
    Ok(weights)
}

/// Stopping rules of the Gauss-Newton loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Objective value above which the run is declared divergent.
    pub w_star: f64,
    /// Step-norm threshold for convergence.
    pub d_p: f64,
    /// Maximum number of iterations.
    pub m2: usize,
    /// Relative finite-difference step used by Jacobian cross-checks.
    pub fd_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            w_star: 1e30,
            d_p: 1e-9,
            m2: 100,
            fd_step: 1e-6,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_star > 0.0) {
            return Err(Error::Configuration(format!(
                "w_star must be > 0, got {}",
                self.w_star
            )));
        }
        if !(self.d_p > 0.0) {
            return Err(Error::Configuration(format!(
                "d_p must be > 0, got {}",
                self.d_p
            )));
        }
        if self.m2 < 1 {
            return Err(Error::Configuration("m2 must be >= 1".into()));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::Configuration(format!(
                "fd_step must be > 0, got {}",
                self.fd_step
            )));
        }
        Ok(())
    }
}

/// A method resolved against a problem size: case, weights and assembly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MethodSetup {
    pub method: Method,
    pub case: CaseLabel,
    pub weights: PenaltyWeights,
    pub assembly: Assembly,
}

impl MethodSetup {
    /// Picks the case from `(m, n)` unless overridden, then the preset
    /// weights unless overridden, and validates the combination.
    pub fn resolve(
        method: Method,
        m: usize,
        n: usize,
        case_override: Option<CaseLabel>,
        weights_override: Option<PenaltyWeights>,
    ) -> Result<Self> {
        let natural = select_case(m, n)?;
        let case = case_override.unwrap_or(natural);
        let weights = match weights_override {
            Some(w) => w,
            None => default_weights(method, case)?,
        };
        weights.validate(case)?;
        let unused: &[(&str, f64)] = match method {
            Method::Stls => &[
                ("alpha", weights.alpha),
                ("beta", weights.beta),
                ("gamma", weights.gamma),
            ],
            Method::Clra1 => &[("alpha", weights.alpha), ("beta", weights.beta)],
            Method::Clra2 => &[("alpha", weights.alpha), ("gamma", weights.gamma)],
            Method::Clra3 => &[("beta", weights.beta), ("gamma", weights.gamma)],
            Method::Clra => &[],
        };
        if let Some((name, _)) = unused.iter().find(|(_, w)| *w != 0.0) {
            return Err(Error::Configuration(format!(
                "{method} requires {name} = 0"
            )));
        }
        Ok(Self {
            method,
            case,
            weights,
            assembly: Assembly::Active,
        })
    }

    pub fn with_assembly(mut self, assembly: Assembly) -> Self {
        self.assembly = assembly;
        self
    }
}
