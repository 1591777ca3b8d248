use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use twofloat::TwoFloat;

use super::PenaltyWeights;
use crate::error::{Error, Result};
use crate::linalg;
use crate::lowrank::{
    self, check_offsets, check_sizes, d_matrix, u_matrix, Field, LowRankBlocks, Property,
};
use crate::scene::{MeasurementMatrix, TimingOffsets};

/// Order of coefficient blocks in `p` and constraint blocks in `q`:
/// `X`/`f_B`, `Y`/`f_C`, `Z`/`f_D`, `W`/`f_E`.
pub const PACKING_ORDER: [Property; 4] = [
    Property::Lrp,
    Property::Lrpv3,
    Property::Lrpv1,
    Property::Lrpv2,
];

/// Which blocks enter `p` and `q`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assembly {
    /// LRP plus every property with a nonzero weight.
    Active,
    /// All four properties regardless of weight.
    AllBlocks,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpan {
    pub property: Property,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl BlockSpan {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Index map of the packed parameter vector
/// `p = [delta; eta_2..N; vec(X); vec(Y); vec(Z); vec(W)]` and of the
/// residual `q = [vec(U); lambda f_B; gamma f_C; alpha f_D; beta f_E]`,
/// restricted to the included blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub m: usize,
    pub n: usize,
    pub coefficients: Vec<BlockSpan>,
    pub constraints: Vec<BlockSpan>,
    pub num_params: usize,
    pub num_residuals: usize,
}

impl Layout {
    pub fn new(m: usize, n: usize, weights: &PenaltyWeights, assembly: Assembly) -> Result<Self> {
        check_sizes(m, n)?;
        let included: Vec<Property> = PACKING_ORDER
            .into_iter()
            .filter(|&prop| {
                prop == Property::Lrp
                    || assembly == Assembly::AllBlocks
                    || weights.weight(prop) != 0.0
            })
            .collect();
        let mut offset = m + n - 1;
        let coefficients = included
            .iter()
            .map(|&property| {
                let (rows, cols) = property.coefficient_shape(m, n);
                let span = BlockSpan {
                    property,
                    offset,
                    rows,
                    cols,
                };
                offset += span.len();
                span
            })
            .collect();
        let num_params = offset;
        let mut offset = (m - 1) * (n - 1);
        let constraints = included
            .iter()
            .map(|&property| {
                let (rows, cols) = property.residual_shape(m, n);
                let span = BlockSpan {
                    property,
                    offset,
                    rows,
                    cols,
                };
                offset += span.len();
                span
            })
            .collect();
        Ok(Self {
            m,
            n,
            coefficients,
            constraints,
            num_params,
            num_residuals: offset,
        })
    }

    pub fn eta_offset(&self) -> usize {
        self.m
    }

    pub fn coefficient_span(&self, property: Property) -> Option<&BlockSpan> {
        self.coefficients.iter().find(|s| s.property == property)
    }

    pub fn constraint_span(&self, property: Property) -> Option<&BlockSpan> {
        self.constraints.iter().find(|s| s.property == property)
    }

    /// Total parameter count with all four coefficient blocks.
    pub fn full_param_count(m: usize, n: usize) -> usize {
        let mn = lowrank::m_n(m, n);
        m + n - 1 + 3 * (n - 4) + mn * (2 * (n - 1) - mn) + (n + 2) * (n - 4) + (m + 2) * (m - 4)
    }

    /// Total residual count with all four constraint blocks.
    pub fn full_residual_count(m: usize, n: usize) -> usize {
        let mn = lowrank::m_n(m, n);
        (m - 1) * (8 * (n - 1) - 2 * mn - 6) - 3 * (n - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub values: DVector<f64>,
}

impl ParamVector {
    pub fn offsets(&self, layout: &Layout) -> TimingOffsets {
        let (m, n) = (layout.m, layout.n);
        let delta = self.values.rows(0, m).iter().copied().collect();
        let eta = std::iter::once(0.0)
            .chain(self.values.rows(m, n - 1).iter().copied())
            .collect();
        TimingOffsets { delta, eta }
    }

    pub fn coefficient(&self, layout: &Layout, property: Property) -> Option<DMatrix<f64>> {
        layout
            .coefficient_span(property)
            .map(|s| DMatrix::from_column_slice(s.rows, s.cols, &self.values.as_slice()[s.range()]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualVector {
    pub values: DVector<f64>,
}

impl ResidualVector {
    /// `f(p) = |q|^2`.
    pub fn objective(&self) -> f64 {
        self.values.norm_squared()
    }

    /// Unweighted-by-name view of one constraint block (`f_B`..`f_E`),
    /// still carrying its penalty factor.
    pub fn block<'a>(&'a self, layout: &Layout, property: Property) -> Option<&'a [f64]> {
        layout
            .constraint_span(property)
            .map(|s| &self.values.as_slice()[s.range()])
    }

    /// `f_A = vec(U)`.
    pub fn u_block<'a>(&'a self, layout: &Layout) -> &'a [f64] {
        &self.values.as_slice()[..(layout.m - 1) * (layout.n - 1)]
    }
}

/// A measurement paired with penalty weights and a packing layout.
#[derive(Clone, Debug)]
pub struct Problem<'a> {
    meas: &'a MeasurementMatrix,
    d: DMatrix<f64>,
    weights: PenaltyWeights,
    layout: Layout,
}

impl<'a> Problem<'a> {
    pub fn new(
        meas: &'a MeasurementMatrix,
        weights: PenaltyWeights,
        assembly: Assembly,
    ) -> Result<Self> {
        let layout = Layout::new(meas.num_mics(), meas.num_sources(), &weights, assembly)?;
        Ok(Self {
            meas,
            d: d_matrix(&meas.values),
            weights,
            layout,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn weights(&self) -> &PenaltyWeights {
        &self.weights
    }

    pub fn blocks(&self, offsets: &TimingOffsets) -> Result<LowRankBlocks> {
        LowRankBlocks::build(self.meas, offsets)
    }

    /// Packs offsets and coefficients; missing coefficient blocks are zero.
    pub fn pack(
        &self,
        offsets: &TimingOffsets,
        coefficients: &[(Property, DMatrix<f64>)],
    ) -> Result<ParamVector> {
        let l = &self.layout;
        check_offsets(l.m, l.n, offsets)?;
        let mut values = DVector::zeros(l.num_params);
        values.rows_mut(0, l.m).copy_from_slice(&offsets.delta);
        values
            .rows_mut(l.m, l.n - 1)
            .copy_from_slice(&offsets.eta[1..]);
        for (prop, coef) in coefficients {
            let span = l.coefficient_span(*prop).ok_or_else(|| {
                Error::DimensionMismatch(format!("{prop:?} is not part of this layout"))
            })?;
            if coef.shape() != (span.rows, span.cols) {
                return Err(Error::DimensionMismatch(format!(
                    "{prop:?} coefficient is {:?}, expected {:?}",
                    coef.shape(),
                    (span.rows, span.cols)
                )));
            }
            values
                .rows_mut(span.offset, span.len())
                .copy_from_slice(coef.as_slice());
        }
        Ok(ParamVector { values })
    }

    /// Offsets from `init`, coefficients set to the minimum-norm
    /// least-squares solution of each included constraint.
    pub fn initial_point(&self, init: &TimingOffsets) -> Result<ParamVector> {
        let coefficients = self.init_coefficients(init)?;
        self.pack(init, &coefficients)
    }

    pub fn init_coefficients(&self, init: &TimingOffsets) -> Result<Vec<(Property, DMatrix<f64>)>> {
        let blocks = self.blocks(init)?;
        self.layout
            .coefficients
            .iter()
            .map(|span| {
                let (coef, _) = blocks.solve_constraint(span.property)?;
                Ok((span.property, coef))
            })
            .collect()
    }

    fn check_len(&self, p: &ParamVector) -> Result<()> {
        if p.values.len() != self.layout.num_params {
            return Err(Error::DimensionMismatch(format!(
                "parameter vector has {} entries, layout expects {}",
                p.values.len(),
                self.layout.num_params
            )));
        }
        Ok(())
    }

    /// `q(p)` evaluated in the scalar type `T`.
    fn residual_in<T: Field>(&self, p: &[T]) -> DVector<T> {
        let l = &self.layout;
        let (m, n) = (l.m, l.n);
        let t = self.meas.values.map(T::from);
        let d = self.d.map(T::from);
        let delta = &p[..m];
        let eta: Vec<T> = std::iter::once(T::zero())
            .chain(p[m..m + n - 1].iter().copied())
            .collect();
        let u = u_matrix(&t, delta, &eta);
        let mut q = DVector::zeros(l.num_residuals);
        q.rows_mut(0, u.len()).copy_from_slice(u.as_slice());
        for (cspan, rspan) in l.coefficients.iter().zip(&l.constraints) {
            let prop = cspan.property;
            let parent = prop.parent(&d, &u);
            let split = cspan.rows;
            let coef = DMatrix::from_column_slice(cspan.rows, cspan.cols, &p[cspan.range()]);
            let r = parent.columns(0, split) * coef - parent.columns(split, cspan.cols);
            let w = T::from(self.weights.weight(prop));
            q.rows_mut(rspan.offset, rspan.len())
                .iter_mut()
                .zip(r.iter())
                .for_each(|(dst, v)| *dst = w * *v);
        }
        q
    }

    /// Evaluated in double-double and rounded once. The constraint blocks
    /// are small differences of large products scaled by the penalty
    /// weights; plain f64 rounding there leaves a step-norm floor near 1e-7
    /// that keeps runs sitting at the solution from meeting `d_p`.
    pub fn residual(&self, p: &ParamVector) -> Result<ResidualVector> {
        self.check_len(p)?;
        let wide: Vec<TwoFloat> = p.values.iter().map(|v| TwoFloat::from(*v)).collect();
        Ok(ResidualVector {
            values: self.residual_in(&wide).map(f64::from),
        })
    }

    fn coefficients_of(&self, p: &ParamVector) -> Vec<DMatrix<f64>> {
        self.layout
            .coefficients
            .iter()
            .map(|s| DMatrix::from_column_slice(s.rows, s.cols, &p.values.as_slice()[s.range()]))
            .collect()
    }

    /// The `delta`/`eta` columns of the Jacobian. The constraint residuals
    /// are linear in `U`, so each column is the constraint map applied to
    /// `dU/d(offset)`.
    fn offset_jacobian(&self, p: &ParamVector) -> DMatrix<f64> {
        let l = &self.layout;
        let (m, n) = (l.m, l.n);
        let t = &self.meas.values;
        let offsets = p.offsets(l);
        let (delta, eta) = (&offsets.delta, &offsets.eta);
        let zero_d = DMatrix::<f64>::zeros(m - 1, n - 1);
        let coefs = self.coefficients_of(p);
        let nu = (m - 1) * (n - 1);
        let mut jac = DMatrix::zeros(l.num_residuals, m + n - 1);
        for col in 0..(m + n - 1) {
            let du = if col < m {
                du_ddelta(t, eta, col)
            } else {
                du_deta(t, delta, col - m + 1)
            };
            jac.view_mut((0, col), (nu, 1))
                .copy_from_slice(du.as_slice());
            for ((cspan, rspan), coef) in l.coefficients.iter().zip(&l.constraints).zip(&coefs) {
                let prop = cspan.property;
                let dparent = prop.parent(&zero_d, &du);
                let split = cspan.rows;
                let dr = dparent.columns(0, split) * coef - dparent.columns(split, cspan.cols);
                let w = self.weights.weight(prop);
                jac.view_mut((rspan.offset, col), (rspan.len(), 1))
                    .iter_mut()
                    .zip(dr.iter())
                    .for_each(|(dst, v)| *dst = w * v);
            }
        }
        jac
    }

    /// Analytic `dq/dp`, rows ordered as `q`, columns as `p`.
    pub fn jacobian(&self, p: &ParamVector) -> Result<DMatrix<f64>> {
        self.check_len(p)?;
        let l = &self.layout;
        let offsets = p.offsets(l);
        let u = u_matrix(&self.meas.values, &offsets.delta, &offsets.eta);
        let n_off = l.m + l.n - 1;
        let mut jac = DMatrix::zeros(l.num_residuals, l.num_params);
        jac.columns_mut(0, n_off)
            .copy_from(&self.offset_jacobian(p));

        // Coefficient columns: d vec(B C) / d C[k, l] puts column k of the
        // basis into the rows of residual column l.
        for (cspan, rspan) in l.coefficients.iter().zip(&l.constraints) {
            let prop = cspan.property;
            let parent = prop.parent(&self.d, &u);
            let w = self.weights.weight(prop);
            let rows = rspan.rows;
            for lcol in 0..cspan.cols {
                for k in 0..cspan.rows {
                    let pcol = cspan.offset + lcol * cspan.rows + k;
                    let row0 = rspan.offset + lcol * rows;
                    for r in 0..rows {
                        jac[(row0 + r, pcol)] = w * parent[(r, k)];
                    }
                }
            }
        }
        Ok(jac)
    }

    /// Least-squares solution `d` of `J d = q`.
    ///
    /// Each coefficient block enters only its own constraint rows, as
    /// `I (x) w B` with `B` the basis columns of the parent matrix. The
    /// coefficients are eliminated per residual column with one QR of `w B`,
    /// the reduced system in the offsets is solved by QR, and the
    /// coefficients are recovered by back substitution. This is the same
    /// solution as a dense solve of `J`; the dense path is used instead when
    /// a basis or the reduced system is numerically rank deficient.
    pub fn gauss_newton_direction(
        &self,
        p: &ParamVector,
        q: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_len(p)?;
        let l = &self.layout;
        if q.len() != l.num_residuals {
            return Err(Error::DimensionMismatch(format!(
                "residual has {} entries, layout expects {}",
                q.len(),
                l.num_residuals
            )));
        }
        let joff = self.offset_jacobian(p);
        if joff.iter().chain(q.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(
                "non-finite value in least-squares system".into(),
            ));
        }
        match self.eliminated_direction(p, q, &joff) {
            Some(d) => Ok(d),
            None => linalg::weighted_lstsq(&self.jacobian(p)?, q),
        }
    }

    fn eliminated_direction(
        &self,
        p: &ParamVector,
        q: &DVector<f64>,
        joff: &DMatrix<f64>,
    ) -> Option<DVector<f64>> {
        let l = &self.layout;
        let n_off = l.m + l.n - 1;
        let nu = (l.m - 1) * (l.n - 1);
        let offsets = p.offsets(l);
        let u = u_matrix(&self.meas.values, &offsets.delta, &offsets.eta);

        let mut red = DMatrix::zeros(l.num_residuals, n_off);
        let mut rhs = DVector::zeros(l.num_residuals);
        red.rows_mut(0, nu).copy_from(&joff.rows(0, nu));
        rhs.rows_mut(0, nu).copy_from(&q.rows(0, nu));
        let mut factors = Vec::with_capacity(l.coefficients.len());
        for (cspan, rspan) in l.coefficients.iter().zip(&l.constraints) {
            let prop = cspan.property;
            let rows = rspan.rows;
            if rows < cspan.rows {
                return None;
            }
            let basis = prop.parent(&self.d, &u).columns(0, cspan.rows) * self.weights.weight(prop);
            let qr = basis.qr();
            let r = qr.r();
            let qm = qr.q();
            let diag_max = r.diagonal().amax();
            let tol = diag_max * rows as f64 * f64::EPSILON;
            if !(diag_max > 0.0) || r.diagonal().iter().any(|d| !(d.abs() > tol)) {
                return None;
            }
            let qt = qm.transpose();
            for lcol in 0..cspan.cols {
                let row0 = rspan.offset + lcol * rows;
                let jseg = joff.rows(row0, rows);
                let qseg = q.rows(row0, rows);
                red.rows_mut(row0, rows)
                    .copy_from(&(jseg - &qm * (&qt * jseg)));
                rhs.rows_mut(row0, rows)
                    .copy_from(&(qseg - &qm * (&qt * qseg)));
            }
            factors.push((qt, r));
        }

        let a = linalg::qr_lstsq(&red, &rhs)?;
        let mut d = DVector::zeros(l.num_params);
        d.rows_mut(0, n_off).copy_from(&a);
        for ((cspan, rspan), (qt, r)) in l.coefficients.iter().zip(&l.constraints).zip(&factors) {
            let rows = rspan.rows;
            for lcol in 0..cspan.cols {
                let row0 = rspan.offset + lcol * rows;
                let target = q.rows(row0, rows) - joff.rows(row0, rows) * &a;
                let c = r.solve_upper_triangular(&(qt * target))?;
                d.rows_mut(cspan.offset + lcol * cspan.rows, cspan.rows)
                    .copy_from(&c);
            }
        }
        Some(d)
    }

    /// Central finite differences of the residual with step
    /// `rel_step * (1 + |p_k|)`. The residual is evaluated in double-double
    /// arithmetic so the quotient is not swamped by cancellation in `q`.
    pub fn jacobian_fd(&self, p: &ParamVector, rel_step: f64) -> Result<DMatrix<f64>> {
        self.check_len(p)?;
        let l = &self.layout;
        let mut jac = DMatrix::zeros(l.num_residuals, l.num_params);
        let mut probe: Vec<TwoFloat> = p.values.iter().map(|v| TwoFloat::from(*v)).collect();
        for k in 0..l.num_params {
            let x = TwoFloat::from(p.values[k]);
            let h = TwoFloat::from(rel_step * (1.0 + p.values[k].abs()));
            probe[k] = x + h;
            let plus = self.residual_in(&probe);
            probe[k] = x - h;
            let minus = self.residual_in(&probe);
            probe[k] = x;
            let two_h = h * TwoFloat::from(2.0);
            for (r, (a, b)) in plus.iter().zip(minus.iter()).enumerate() {
                let v = f64::from((*a - *b) / two_h);
                if !v.is_finite() {
                    return Err(Error::NumericalFailure(
                        "non-finite finite-difference entry".into(),
                    ));
                }
                jac[(r, k)] = v;
            }
        }
        Ok(jac)
    }
}

/// `dU/d delta_k`; for `k = 1` every entry, otherwise only row `k - 1`.
fn du_ddelta(t: &DMatrix<f64>, eta: &[f64], k: usize) -> DMatrix<f64> {
    let (m, n) = t.shape();
    let mut du = DMatrix::zeros(m - 1, n - 1);
    if k == 0 {
        for b in 0..n - 1 {
            let j = b + 1;
            let v = -2.0 * (t[(0, j)] - t[(0, 0)]) + 2.0 * eta[j];
            du.column_mut(b).fill(v);
        }
    } else {
        let a = k - 1;
        for b in 0..n - 1 {
            let j = b + 1;
            du[(a, b)] = 2.0 * (t[(k, j)] - t[(k, 0)]) - 2.0 * eta[j];
        }
    }
    du
}

/// `dU/d eta_k` for `k >= 2` (1-based); only column `k - 1` is nonzero.
fn du_deta(t: &DMatrix<f64>, delta: &[f64], k: usize) -> DMatrix<f64> {
    let (m, n) = t.shape();
    let mut du = DMatrix::zeros(m - 1, n - 1);
    let b = k - 1;
    for a in 0..m - 1 {
        let i = a + 1;
        du[(a, b)] = -2.0 * (t[(i, k)] - t[(0, k)]) + 2.0 * (delta[0] - delta[i]);
    }
    du
}

/// Result of comparing the analytic Jacobian with finite differences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianCheck {
    pub max_rel_error: f64,
    pub worst_row: usize,
    pub worst_col: usize,
}

/// Entrywise `|a - f| / max(|a|, |f|)`, with entries where both are below
/// `abs_floor` compared in absolute terms against the floor instead.
pub fn jacobian_check(analytic: &DMatrix<f64>, fd: &DMatrix<f64>, abs_floor: f64) -> JacobianCheck {
    assert_eq!(analytic.shape(), fd.shape(), "jacobian shapes differ");
    let mut worst = JacobianCheck {
        max_rel_error: 0.0,
        worst_row: 0,
        worst_col: 0,
    };
    for c in 0..analytic.ncols() {
        for r in 0..analytic.nrows() {
            let (a, f) = (analytic[(r, c)], fd[(r, c)]);
            let scale = a.abs().max(f.abs());
            let err = if scale < abs_floor {
                (a - f).abs() / abs_floor
            } else {
                (a - f).abs() / scale
            };
            if !(err <= worst.max_rel_error) {
                worst = JacobianCheck {
                    max_rel_error: err,
                    worst_row: r,
                    worst_col: c,
                };
            }
        }
    }
    worst
}
