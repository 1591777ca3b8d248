//! Structured low-rank matrices built from a measurement and a timing
//! hypothesis, plus numerical verification of their rank properties.
//!
//! With `t` the (pseudo-)TOA matrix and `(delta, eta)` the offsets, the
//! `(M-1) x (N-1)` matrices
//!
//! ```text
//! D[i-1, j-1] = t[i,j]^2 - t[i,1]^2 - t[1,j]^2 + t[1,1]^2
//! U[i-1, j-1] = 2 delta_i (t[i,j] - t[i,1]) - 2 delta_1 (t[1,j] - t[1,1])
//!             - 2 eta_j (t[i,j] - t[1,j]) + 2 eta_j (delta_1 - delta_i)
//! ```
//!
//! satisfy `D + U = -2 R^T S / c^2` at the true offsets, so `D + U` has rank
//! at most 3. The stacked matrices `[D U]`, `[D^T U^T]` and `[[D U], [U D]]`
//! inherit further rank bounds.

use nalgebra::{ClosedAddAssign, ClosedMulAssign, ClosedSubAssign, DMatrix, Scalar};
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::scene::{MeasurementMatrix, TimingOffsets};

/// Default relative singular-value threshold for numeric rank.
pub const RANK_REL_TOL: f64 = 1e-8;

/// The four low-rank properties, each giving one linear constraint
/// `parent[:, ..split] * C = parent[:, split..]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Property {
    /// `rank(D + U) <= 3`; coefficient `X`.
    Lrp,
    /// `rank([D U]) <= N - 1 + 3` when `M - 1 > N - 1 + 3`; coefficient `Z`.
    Lrpv1,
    /// `rank([D^T U^T]) <= M - 1 + 3` when `N - 1 > M - 1 + 3`; coefficient `W`.
    Lrpv2,
    /// `rank([[D U], [U D]]) <= M_N`; coefficient `Y`.
    Lrpv3,
}

impl Property {
    pub const ALL: [Property; 4] = [
        Property::Lrp,
        Property::Lrpv1,
        Property::Lrpv2,
        Property::Lrpv3,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Property::Lrp => "D+U",
            Property::Lrpv1 => "T1",
            Property::Lrpv2 => "T2",
            Property::Lrpv3 => "T3",
        }
    }

    /// Shape of the parent matrix for `m` mics and `n` sources.
    pub fn parent_shape(self, m: usize, n: usize) -> (usize, usize) {
        let (p, q) = (m - 1, n - 1);
        match self {
            Property::Lrp => (p, q),
            Property::Lrpv1 => (p, 2 * q),
            Property::Lrpv2 => (q, 2 * p),
            Property::Lrpv3 => (2 * p, 2 * q),
        }
    }

    /// Number of leading columns forming the basis part of the split.
    pub fn split(self, m: usize, n: usize) -> usize {
        match self {
            Property::Lrp => 3,
            Property::Lrpv1 => n - 1 + 3,
            Property::Lrpv2 => m - 1 + 3,
            Property::Lrpv3 => m_n(m, n),
        }
    }

    /// Rank bound asserted by the property.
    pub fn rank_bound(self, m: usize, n: usize) -> usize {
        self.split(m, n)
    }

    /// Whether the bound is informative (strictly below the parent's size).
    pub fn is_low_rank(self, m: usize, n: usize) -> bool {
        match self {
            Property::Lrp | Property::Lrpv3 => m > 4 && n > 4,
            Property::Lrpv1 => m > n + 3 && n > 4,
            Property::Lrpv2 => n > m + 3 && m > 4,
        }
    }

    /// Shape of the coefficient matrix (`X`, `Z`, `W` or `Y`).
    pub fn coefficient_shape(self, m: usize, n: usize) -> (usize, usize) {
        let (_, cols) = self.parent_shape(m, n);
        let split = self.split(m, n);
        (split, cols - split)
    }

    /// Shape of the constraint residual `parent[:, ..split] C - parent[:, split..]`.
    pub fn residual_shape(self, m: usize, n: usize) -> (usize, usize) {
        let (rows, cols) = self.parent_shape(m, n);
        (rows, cols - self.split(m, n))
    }

    /// Assembles the parent matrix from `D` and `U`.
    pub fn parent<T: Field>(self, d: &DMatrix<T>, u: &DMatrix<T>) -> DMatrix<T> {
        let (p, q) = d.shape();
        match self {
            Property::Lrp => d + u,
            Property::Lrpv1 => {
                let mut t = DMatrix::zeros(p, 2 * q);
                t.columns_mut(0, q).copy_from(d);
                t.columns_mut(q, q).copy_from(u);
                t
            }
            Property::Lrpv2 => {
                let mut t = DMatrix::zeros(q, 2 * p);
                t.columns_mut(0, p).copy_from(&d.transpose());
                t.columns_mut(p, p).copy_from(&u.transpose());
                t
            }
            Property::Lrpv3 => {
                let mut t = DMatrix::zeros(2 * p, 2 * q);
                t.view_mut((0, 0), (p, q)).copy_from(d);
                t.view_mut((0, q), (p, q)).copy_from(u);
                t.view_mut((p, 0), (p, q)).copy_from(u);
                t.view_mut((p, q), (p, q)).copy_from(d);
                t
            }
        }
    }
}

/// Scalars the `U` and constraint maps can be evaluated in; `f64` in
/// production, extended precision for finite-difference checks.
pub trait Field:
    Scalar + Copy + Zero + One + ClosedAddAssign + ClosedSubAssign + ClosedMulAssign + From<f64>
{
}

impl<T> Field for T where
    T: Scalar + Copy + Zero + One + ClosedAddAssign + ClosedSubAssign + ClosedMulAssign + From<f64>
{
}

/// `M_N = min(N - 1 + 3, M - 1 + 3)`.
pub fn m_n(m: usize, n: usize) -> usize {
    (n + 2).min(m + 2)
}

/// `D`, `U` and every partition used by the four constraints.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankBlocks {
    pub m: usize,
    pub n: usize,
    pub d: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub t1: DMatrix<f64>,
    pub t2: DMatrix<f64>,
    pub t3: DMatrix<f64>,
    pub t11: DMatrix<f64>,
    pub t12: DMatrix<f64>,
    pub t21: DMatrix<f64>,
    pub t22: DMatrix<f64>,
    pub t31: DMatrix<f64>,
    pub t32: DMatrix<f64>,
    pub m_n: usize,
}

pub(crate) fn check_sizes(m: usize, n: usize) -> Result<()> {
    if m < 5 || n < 5 {
        return Err(Error::InvalidArgument(format!(
            "low-rank machinery needs M >= 5 and N >= 5, got M={m} N={n}"
        )));
    }
    Ok(())
}

pub(crate) fn check_offsets(m: usize, n: usize, offsets: &TimingOffsets) -> Result<()> {
    if offsets.num_mics() != m || offsets.num_sources() != n {
        return Err(Error::DimensionMismatch(format!(
            "measurement is {m}x{n} but offsets have {} start times and {} emission times",
            offsets.num_mics(),
            offsets.num_sources()
        )));
    }
    Ok(())
}

/// `D` depends only on the measurement.
pub fn d_matrix(t: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = t.shape();
    let sq = |i: usize, j: usize| t[(i, j)] * t[(i, j)];
    DMatrix::from_fn(m - 1, n - 1, |a, b| {
        let (i, j) = (a + 1, b + 1);
        sq(i, j) - sq(i, 0) - sq(0, j) + sq(0, 0)
    })
}

/// `U`, linear in the offsets for a fixed measurement.
pub fn u_matrix<T: Field>(t: &DMatrix<T>, delta: &[T], eta: &[T]) -> DMatrix<T> {
    let (m, n) = t.shape();
    let two = T::from(2.0);
    DMatrix::from_fn(m - 1, n - 1, |a, b| {
        let (i, j) = (a + 1, b + 1);
        two * delta[i] * (t[(i, j)] - t[(i, 0)])
            - two * delta[0] * (t[(0, j)] - t[(0, 0)])
            - two * eta[j] * (t[(i, j)] - t[(0, j)])
            + two * eta[j] * (delta[0] - delta[i])
    })
}

impl LowRankBlocks {
    /// Builds every block from a measurement and a timing hypothesis.
    pub fn build(meas: &MeasurementMatrix, offsets: &TimingOffsets) -> Result<Self> {
        let (m, n) = (meas.num_mics(), meas.num_sources());
        check_sizes(m, n)?;
        check_offsets(m, n, offsets)?;
        let d = d_matrix(&meas.values);
        let u = u_matrix(&meas.values, &offsets.delta, &offsets.eta);
        Ok(Self::from_parts(d, u))
    }

    /// Builds the partitions from explicit `D` and `U`.
    pub fn from_parts(d: DMatrix<f64>, u: DMatrix<f64>) -> Self {
        let (p, q) = d.shape();
        let (m, n) = (p + 1, q + 1);
        let mn = m_n(m, n);
        let split = |t: &DMatrix<f64>, at: usize| {
            (
                t.columns(0, at).into_owned(),
                t.columns(at, t.ncols() - at).into_owned(),
            )
        };
        let (a, b) = split(&d, 3);
        let (f, g) = split(&u, 3);
        let t1 = Property::Lrpv1.parent(&d, &u);
        let t2 = Property::Lrpv2.parent(&d, &u);
        let t3 = Property::Lrpv3.parent(&d, &u);
        let (t11, t12) = split(&t1, Property::Lrpv1.split(m, n));
        let (t21, t22) = split(&t2, Property::Lrpv2.split(m, n));
        let (t31, t32) = split(&t3, mn);
        Self {
            m,
            n,
            d,
            u,
            a,
            b,
            f,
            g,
            t1,
            t2,
            t3,
            t11,
            t12,
            t21,
            t22,
            t31,
            t32,
            m_n: mn,
        }
    }

    /// Basis and target halves of the split for `property`.
    pub fn split(&self, property: Property) -> (DMatrix<f64>, DMatrix<f64>) {
        match property {
            Property::Lrp => (&self.a + &self.f, &self.b + &self.g),
            Property::Lrpv1 => (self.t11.clone(), self.t12.clone()),
            Property::Lrpv2 => (self.t21.clone(), self.t22.clone()),
            Property::Lrpv3 => (self.t31.clone(), self.t32.clone()),
        }
    }

    pub fn parent(&self, property: Property) -> DMatrix<f64> {
        match property {
            Property::Lrp => &self.d + &self.u,
            Property::Lrpv1 => self.t1.clone(),
            Property::Lrpv2 => self.t2.clone(),
            Property::Lrpv3 => self.t3.clone(),
        }
    }

    /// Minimum-norm least-squares coefficient for `property` together with
    /// the relative residual `|basis C - target|_F / |target|_F`.
    pub fn solve_constraint(&self, property: Property) -> Result<(DMatrix<f64>, f64)> {
        let (basis, target) = self.split(property);
        let coef = linalg::lstsq_min_norm(&basis, &target)?;
        let resid = (&basis * &coef - &target).norm();
        let scale = target.norm();
        let rel = if scale == 0.0 { resid } else { resid / scale };
        Ok((coef, rel))
    }

    /// Fails when the first three columns of `D + U` are numerically
    /// dependent, which breaks the `X` parameterisation.
    pub fn check_lrp_basis(&self, rel_tol: f64) -> Result<()> {
        let (basis, _) = self.split(Property::Lrp);
        let est = numeric_rank(&basis, rel_tol)?;
        if est.rank < 3 {
            return Err(Error::DegenerateScene(format!(
                "first three columns of D+U have numeric rank {}",
                est.rank
            )));
        }
        Ok(())
    }
}

/// Convenience wrapper over [`LowRankBlocks::build`].
pub fn build_blocks(meas: &MeasurementMatrix, offsets: &TimingOffsets) -> Result<LowRankBlocks> {
    LowRankBlocks::build(meas, offsets)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankEstimate {
    pub rank: usize,
    /// Descending.
    pub singular_values: Vec<f64>,
}

/// Counts singular values above `rel_tol * sigma_max`.
pub fn numeric_rank(mat: &DMatrix<f64>, rel_tol: f64) -> Result<RankEstimate> {
    if mat.is_empty() {
        return Err(Error::InvalidArgument(
            "numeric rank of an empty matrix".into(),
        ));
    }
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "relative tolerance must lie in (0, 1), got {rel_tol}"
        )));
    }
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("non-finite matrix entry".into()));
    }
    let mut singular_values: Vec<f64> = mat.singular_values().iter().copied().collect();
    singular_values.sort_by(|a, b| b.total_cmp(a));
    let smax = singular_values[0];
    let rank = if smax == 0.0 {
        0
    } else {
        singular_values
            .iter()
            .filter(|s| **s > rel_tol * smax)
            .count()
    };
    Ok(RankEstimate {
        rank,
        singular_values,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    #[serde(rename = "name")]
    pub matrix_name: String,
    #[serde(rename = "rank")]
    pub numeric_rank: usize,
    pub bound: usize,
    pub holds: bool,
    /// Whether the bound is below the matrix size for these `M`, `N`.
    pub applicable: bool,
    pub singular_values: Vec<f64>,
}

impl RankReport {
    fn new(name: &str, est: RankEstimate, bound: usize, applicable: bool) -> Self {
        Self {
            matrix_name: name.to_string(),
            numeric_rank: est.rank,
            bound,
            holds: est.rank <= bound,
            applicable,
            singular_values: est.singular_values,
        }
    }

    /// One JSON object keeping only the leading `top_k` singular values.
    pub fn to_json_line(&self, top_k: usize) -> String {
        let mut short = self.clone();
        short.singular_values.truncate(top_k);
        serde_json::to_string(&short).expect("rank report serializes")
    }

    /// An applicable bound that fails.
    pub fn violated(&self) -> bool {
        self.applicable && !self.holds
    }
}

/// Rank reports for `D + U`, `T1`, `T2` and `T3`.
pub fn verify_properties(blocks: &LowRankBlocks, rel_tol: f64) -> Result<Vec<RankReport>> {
    let (m, n) = (blocks.m, blocks.n);
    Property::ALL
        .iter()
        .map(|&prop| {
            let est = numeric_rank(&blocks.parent(prop), rel_tol)?;
            Ok(RankReport::new(
                prop.label(),
                est,
                prop.rank_bound(m, n),
                prop.is_low_rank(m, n),
            ))
        })
        .collect()
}
