//! Dense convex QP solver.
//!
//! Solves
//!
//! ```text
//! minimize    ½ zᵀ H z + gᵀ z
//! subject to  Aeq z = beq,   lb ≤ z ≤ ub
//! ```
//!
//! with an operator-splitting (ADMM) iteration over the stacked constraint
//! matrix `[Aeq; I]`. The linear system of the iteration is factored once
//! and reused until the step size is adapted. Whenever the iterates look
//! converged, the active set they suggest is used to solve the equality
//! constrained KKT system exactly ("polishing"), which is what gives the
//! solver its high final accuracy.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 4000;

/// Added to the Hessian diagonal when it looks singular.
pub const HESSIAN_REG: f64 = 1e-9;

const SIGMA: f64 = 1e-6;
const ALPHA: f64 = 1.6;
const RHO_INIT: f64 = 0.1;
const RHO_EQ_SCALE: f64 = 1e3;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const CHECK_EVERY: usize = 25;

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Solved,
    MaxIter,
    Infeasible,
}

impl QpStatus {
    pub fn label(self) -> &'static str {
        match self {
            QpStatus::Solved => "solved",
            QpStatus::MaxIter => "max_iter",
            QpStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// Multipliers of the equality rows.
    pub y_eq: DVector<f64>,
    /// Multipliers of the bounds; positive on an active upper bound,
    /// negative on an active lower bound.
    pub y_box: DVector<f64>,
    pub eq_residual: f64,
    pub box_violation: f64,
    pub stationarity_residual: f64,
    pub iterations: usize,
    pub status: QpStatus,
}

impl QpProblem {
    /// Problem without equality constraints.
    pub fn boxed(h: DMatrix<f64>, g: DVector<f64>, lb: DVector<f64>, ub: DVector<f64>) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            lb,
            ub,
        }
    }

    pub fn n_dec(&self) -> usize {
        self.g.len()
    }

    pub fn n_eq(&self) -> usize {
        self.b_eq.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_dec();
        let m = self.n_eq();
        if self.h.shape() != (n, n)
            || self.a_eq.shape() != (m, n)
            || self.lb.len() != n
            || self.ub.len() != n
        {
            return Err(Error::DimensionMismatch(format!(
                "H {:?}, g {}, Aeq {:?}, beq {}, lb {}, ub {}",
                self.h.shape(),
                n,
                self.a_eq.shape(),
                m,
                self.lb.len(),
                self.ub.len()
            )));
        }
        let asym = (&self.h - self.h.transpose()).abs().max();
        if asym > 1e-10 * (1.0 + self.h.abs().max()) {
            return Err(Error::InvalidParameter(format!("Hessian not symmetric ({asym:e})")));
        }
        Ok(())
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.g.dot(z)
    }

    /// Residuals `(equality, bound violation, stationarity)` of `z` with the
    /// given multipliers.
    pub fn residuals(
        &self,
        z: &DVector<f64>,
        y_eq: &DVector<f64>,
        y_box: &DVector<f64>,
    ) -> (f64, f64, f64) {
        let eq = inf_norm(&(&self.a_eq * z - &self.b_eq));
        let bx = z
            .iter()
            .zip(self.lb.iter().zip(self.ub.iter()))
            .map(|(&zi, (&l, &u))| (l - zi).max(zi - u).max(0.0))
            .fold(0.0, f64::max);
        let grad = &self.h * z + &self.g + self.a_eq.tr_mul(y_eq) + y_box;
        (eq, bx, inf_norm(&grad))
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solves `p` to tolerance `tol`, optionally warm-started from `warm_start`.
pub fn solve_qp(
    p: &QpProblem,
    warm_start: Option<&DVector<f64>>,
    tol: f64,
    max_iter: usize,
) -> Result<QpSolution> {
    p.validate()?;
    let n = p.n_dec();
    let m = p.n_eq();
    if let Some(w) = warm_start {
        if w.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "warm start has {} entries, problem has {n}",
                w.len()
            )));
        }
    }
    if p.lb.iter().zip(p.ub.iter()).any(|(l, u)| l > u) {
        return Ok(infeasible(p, 0));
    }

    let mut hreg = p.h.clone();
    if min_diag_pivot(&p.h) < HESSIAN_REG {
        for i in 0..n {
            hreg[(i, i)] += HESSIAN_REG;
        }
    }

    // Constraint rows: first the m equalities, then the n bounds.
    let lo = stack(&p.b_eq, &p.lb);
    let hi = stack(&p.b_eq, &p.ub);
    let mut rho = RHO_INIT;
    let rho_vec = |rho: f64| {
        DVector::from_fn(m + n, |i, _| if i < m { rho * RHO_EQ_SCALE } else { rho })
    };
    let mut rv = rho_vec(rho);
    let mut factor = factor_kkt(&hreg, &p.a_eq, &rv)?;

    let mut x = warm_start.cloned().unwrap_or_else(|| DVector::zeros(n));
    let mut z = project(&apply_c(&p.a_eq, &x), &lo, &hi);
    let mut y = DVector::<f64>::zeros(m + n);

    for iter in 1..=max_iter {
        let rhs = &x * SIGMA - &p.g + apply_ct(&p.a_eq, &(rv.component_mul(&z) - &y), n);
        let x_tilde = factor.solve(&rhs);
        let z_tilde = apply_c(&p.a_eq, &x_tilde);
        let x_new = &x_tilde * ALPHA + &x * (1.0 - ALPHA);
        let z_relaxed = &z_tilde * ALPHA + &z * (1.0 - ALPHA);
        let z_new = project(&(&z_relaxed + y.component_div(&rv)), &lo, &hi);
        let y_new = &y + rv.component_mul(&(&z_relaxed - &z_new));
        let dy = &y_new - &y;
        x = x_new;
        z = z_new;
        y = y_new;

        if iter % CHECK_EVERY != 0 && iter != max_iter {
            continue;
        }

        if primal_infeasible(&p.a_eq, &dy, &lo, &hi, n, tol) {
            return Ok(infeasible(p, iter));
        }

        let cx = apply_c(&p.a_eq, &x);
        let r_prim = inf_norm(&(&cx - &z));
        let hx = &p.h * &x;
        let cty = apply_ct(&p.a_eq, &y, n);
        let r_dual = inf_norm(&(&hx + &p.g + &cty));

        let scale_p = inf_norm(&cx).max(inf_norm(&z)).max(1.0);
        let scale_d = inf_norm(&hx).max(inf_norm(&cty)).max(inf_norm(&p.g)).max(1.0);
        if r_prim <= 1e2 * tol * scale_p && r_dual <= 1e2 * tol * scale_d {
            if let Some(sol) = polish(p, &x, &y, tol, iter) {
                return Ok(sol);
            }
        }
        if r_prim <= tol && r_dual <= tol {
            let y_eq = y.rows(0, m).into_owned();
            let y_box = y.rows(m, n).into_owned();
            let (e, b, s) = p.residuals(&x, &y_eq, &y_box);
            if e <= tol && b <= tol && s <= 10.0 * tol {
                return Ok(QpSolution {
                    z: x,
                    y_eq,
                    y_box,
                    eq_residual: e,
                    box_violation: b,
                    stationarity_residual: s,
                    iterations: iter,
                    status: QpStatus::Solved,
                });
            }
        }

        // Balance primal and dual progress by adapting the step size.
        let ratio = ((r_prim / scale_p) / (r_dual / scale_d).max(1e-30)).sqrt();
        let new_rho = (rho * ratio).clamp(RHO_MIN, RHO_MAX);
        if new_rho > 5.0 * rho || new_rho < 0.2 * rho {
            rho = new_rho;
            rv = rho_vec(rho);
            factor = factor_kkt(&hreg, &p.a_eq, &rv)?;
        }
    }

    let y_eq = y.rows(0, m).into_owned();
    let y_box = y.rows(m, n).into_owned();
    let (e, b, s) = p.residuals(&x, &y_eq, &y_box);
    Ok(QpSolution {
        z: x,
        y_eq,
        y_box,
        eq_residual: e,
        box_violation: b,
        stationarity_residual: s,
        iterations: max_iter,
        status: QpStatus::MaxIter,
    })
}

fn infeasible(p: &QpProblem, iterations: usize) -> QpSolution {
    let n = p.n_dec();
    QpSolution {
        z: DVector::zeros(n),
        y_eq: DVector::zeros(p.n_eq()),
        y_box: DVector::zeros(n),
        eq_residual: f64::INFINITY,
        box_violation: f64::INFINITY,
        stationarity_residual: f64::INFINITY,
        iterations,
        status: QpStatus::Infeasible,
    }
}

fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

fn apply_c(a_eq: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    stack(&(a_eq * x), x)
}

fn apply_ct(a_eq: &DMatrix<f64>, w: &DVector<f64>, n: usize) -> DVector<f64> {
    let m = a_eq.nrows();
    a_eq.tr_mul(&w.rows(0, m).into_owned()) + w.rows(m, n)
}

fn project(v: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| v[i].max(lo[i]).min(hi[i]))
}

fn min_diag_pivot(h: &DMatrix<f64>) -> f64 {
    match Cholesky::new(h.clone()) {
        Some(c) => {
            let d = c.l_dirty().diagonal();
            d.iter().fold(f64::INFINITY, |m, x| m.min(x * x))
        }
        None => 0.0,
    }
}

fn factor_kkt(
    h: &DMatrix<f64>,
    a_eq: &DMatrix<f64>,
    rho: &DVector<f64>,
) -> Result<Cholesky<f64, Dyn>> {
    let n = h.nrows();
    let m = a_eq.nrows();
    let mut k = h.clone();
    if m > 0 {
        let rho_eq = rho[0];
        k += a_eq.tr_mul(a_eq) * rho_eq;
    }
    for i in 0..n {
        k[(i, i)] += SIGMA + rho[m + i];
    }
    Cholesky::new(k).ok_or(Error::SingularKkt)
}

/// OSQP-style primal infeasibility certificate from the change in the dual
/// iterate.
fn primal_infeasible(
    a_eq: &DMatrix<f64>,
    dy: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    n: usize,
    tol: f64,
) -> bool {
    let norm = inf_norm(dy);
    if norm < 1e-12 {
        return false;
    }
    if inf_norm(&apply_ct(a_eq, dy, n)) > tol * norm {
        return false;
    }
    let mut support = 0.0;
    for i in 0..dy.len() {
        let d = dy[i];
        if d > 0.0 {
            if hi[i].is_infinite() {
                return false;
            }
            support += hi[i] * d;
        } else if d < 0.0 {
            if lo[i].is_infinite() {
                return false;
            }
            support += lo[i] * d;
        }
    }
    support < -tol * norm
}

/// Solves the KKT system for the active set suggested by `(x, y)` and accepts
/// the result if it is primal and dual feasible.
fn polish(
    p: &QpProblem,
    x: &DVector<f64>,
    y: &DVector<f64>,
    tol: f64,
    iterations: usize,
) -> Option<QpSolution> {
    let n = p.n_dec();
    let m = p.n_eq();
    // -1 lower, +1 upper, 0 free
    let active: Vec<i8> = (0..n)
        .map(|i| {
            let yi = y[m + i];
            let at_lo = p.lb[i].is_finite() && (yi < -tol || x[i] - p.lb[i] < tol);
            let at_hi = p.ub[i].is_finite() && (yi > tol || p.ub[i] - x[i] < tol);
            if at_lo && (!at_hi || yi < 0.0) {
                -1
            } else if at_hi {
                1
            } else {
                0
            }
        })
        .collect();
    let z = solve_active_set(p, &active)?;
    let (y_eq, y_box) = z.1;
    let z = z.0;
    let sign_ok = (0..n).all(|i| match active[i] {
        -1 => y_box[i] <= tol,
        1 => y_box[i] >= -tol,
        _ => true,
    });
    if !sign_ok {
        return None;
    }
    let (e, b, s) = p.residuals(&z, &y_eq, &y_box);
    if e <= tol && b <= tol && s <= 10.0 * tol {
        Some(QpSolution {
            z,
            y_eq,
            y_box,
            eq_residual: e,
            box_violation: b,
            stationarity_residual: s,
            iterations,
            status: QpStatus::Solved,
        })
    } else {
        None
    }
}

type ActiveSetSolution = (DVector<f64>, (DVector<f64>, DVector<f64>));

/// Minimizer with the bounds in `active` held as equalities and all other
/// bounds dropped. Returns the point and the `(equality, bound)` multipliers.
fn solve_active_set(p: &QpProblem, active: &[i8]) -> Option<ActiveSetSolution> {
    let n = p.n_dec();
    let m = p.n_eq();
    let free: Vec<usize> = (0..n).filter(|&i| active[i] == 0).collect();
    let mut z = DVector::zeros(n);
    for i in 0..n {
        match active[i] {
            -1 => z[i] = p.lb[i],
            1 => z[i] = p.ub[i],
            _ => {}
        }
    }
    let nf = free.len();
    let dim = nf + m;
    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    let hz = &p.h * &z;
    let az = &p.a_eq * &z;
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            kkt[(a, b)] = p.h[(i, j)];
        }
        for r in 0..m {
            kkt[(a, nf + r)] = p.a_eq[(r, i)];
            kkt[(nf + r, a)] = p.a_eq[(r, i)];
        }
        rhs[a] = -p.g[i] - hz[i];
    }
    for r in 0..m {
        rhs[nf + r] = p.b_eq[r] - az[r];
    }
    let mut sol = DVector::zeros(0);
    if dim > 0 {
        let lu = kkt.clone().lu();
        sol = lu.solve(&rhs)?;
        // One step of iterative refinement.
        let res = &rhs - &kkt * &sol;
        if let Some(corr) = lu.solve(&res) {
            sol += corr;
        }
    }
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    for (a, &i) in free.iter().enumerate() {
        z[i] = sol[a];
    }
    let y_eq = sol.rows(nf, m).into_owned();
    let grad = &p.h * &z + &p.g + p.a_eq.tr_mul(&y_eq);
    let y_box = DVector::from_fn(n, |i, _| if active[i] != 0 { -grad[i] } else { 0.0 });
    Some((z, (y_eq, y_box)))
}
