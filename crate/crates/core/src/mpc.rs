//! Geometric hybrid MPC: mode scheduling, FTOCP assembly in exponential
//! coordinates and the SQP loop.
//!
//! Each solve picks the measured orientation as the anchor `q̄₀`, expresses
//! every knot's orientation as `ξ_k = log(q̄₀⁻¹ q_k)` and plans over a mode
//! schedule fixed a priori from a vertical ballistic / spring model. Knots
//! that carry a transition advance zero time and apply the affine impact
//! model instead of the flow.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::dynamics::{reset_map_ext, Edge, Input, ModelParams, State, Vector20, Vertex};
use crate::hybrid::integrate_step;
use crate::error::{Error, Result};
use crate::geom::{exp_map, log_map, ImQuat3, UnitQuat};
use crate::linearization::{build_affine_flow, linearize_reset, AffineFlow, AffineReset, Discretization};
use crate::qp::{solve_qp, QpProblem, QpSolution, QpStatus};

/// Number of local coordinates.
pub const NZ: usize = 20;
/// Number of inputs.
pub const NU: usize = 4;
/// Number of wheel inputs; the foot input is not planned.
pub const NW: usize = 3;

/// Longest step the nonlinear rollouts take between knots.
const ROLLOUT_MAX_STEP: f64 = 0.0025;

/// A state expressed in exponential coordinates about `anchor`.
///
/// `z = (p, ξ, θ, ℓ, ṗ, ω̂, θ̇, ℓ̇)` with `ω̂ = ω/2` (see [`crate::linearization`]).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalState {
    pub z: Vector20,
    pub anchor: UnitQuat,
}

impl LocalState {
    pub fn xi(&self) -> ImQuat3 {
        ImQuat3(self.z.fixed_rows::<3>(3).into_owned())
    }
}

pub fn to_local(x: &State, anchor: UnitQuat) -> Result<LocalState> {
    let xi = log_map(anchor.inverse() * x.q.quat)?;
    let mut z = Vector20::zeros();
    z.fixed_rows_mut::<3>(0).copy_from(&x.q.p);
    z.fixed_rows_mut::<3>(3).copy_from(&xi.0);
    z.fixed_rows_mut::<3>(6).copy_from(&x.q.theta);
    z[9] = x.q.ell;
    z.fixed_rows_mut::<3>(10).copy_from(&x.v.pdot);
    z.fixed_rows_mut::<3>(13).copy_from(&(x.v.omega * 0.5));
    z.fixed_rows_mut::<3>(16).copy_from(&x.v.thetadot);
    z[19] = x.v.elldot;
    Ok(LocalState { z, anchor })
}

pub fn recover_state(l: &LocalState) -> State {
    let z = &l.z;
    let mut x = State::default();
    x.q.p = z.fixed_rows::<3>(0).into_owned();
    x.q.quat = l.anchor * exp_map(l.xi());
    x.q.theta = z.fixed_rows::<3>(6).into_owned();
    x.q.ell = z[9];
    x.v.pdot = z.fixed_rows::<3>(10).into_owned();
    x.v.omega = z.fixed_rows::<3>(13) * 2.0;
    x.v.thetadot = z.fixed_rows::<3>(16).into_owned();
    x.v.elldot = z[19];
    x
}

/// Diagonal state and input weights.
///
/// `p`, `v` apply to the horizontal position and velocity; the vertical
/// motion is governed by the passive spring and is weighted separately
/// (zero by default). `omega` is specified for the physical rate in rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Weights {
    pub p: f64,
    pub p_z: f64,
    pub quat: f64,
    pub theta: f64,
    pub ell: f64,
    pub v: f64,
    pub v_z: f64,
    pub omega: f64,
    pub thetadot: f64,
    pub elldot: f64,
    pub u: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            p: 10.0,
            p_z: 0.0,
            quat: 10.0,
            theta: 0.0,
            ell: 0.0,
            v: 1.0,
            v_z: 0.0,
            omega: 0.01,
            thetadot: 0.0,
            elldot: 0.0,
            u: 0.001,
        }
    }
}

impl Weights {
    /// Diagonal of the state weight in local coordinates.
    pub fn q_diag(&self) -> Vector20 {
        let mut q = Vector20::zeros();
        q[0] = self.p;
        q[1] = self.p;
        q[2] = self.p_z;
        for i in 3..6 {
            q[i] = self.quat;
        }
        for i in 6..9 {
            q[i] = self.theta;
        }
        q[9] = self.ell;
        q[10] = self.v;
        q[11] = self.v;
        q[12] = self.v_z;
        // ω̂ = ω/2, so the same penalty on ω is four times as large on ω̂.
        for i in 13..16 {
            q[i] = 4.0 * self.omega;
        }
        for i in 16..19 {
            q[i] = self.thetadot;
        }
        q[19] = self.elldot;
        q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TerminalRule {
    /// Terminal weight equal to the stage weight.
    #[default]
    StageWeight,
    /// No terminal weight.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub sqp_iters: usize,
    pub weights: Weights,
    /// Wheel torque limit, N·m.
    pub u_max: f64,
    pub dt_flight: f64,
    pub dt_ground: f64,
    pub terminal: TerminalRule,
    pub discretization: Discretization,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            sqp_iters: 2,
            weights: Weights::default(),
            u_max: 1.5,
            dt_flight: 0.01,
            dt_ground: 0.001,
            terminal: TerminalRule::StageWeight,
            discretization: Discretization::Exact,
            qp_tol: crate::qp::DEFAULT_TOL,
            qp_max_iter: crate::qp::DEFAULT_MAX_ITER,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        let ws = [
            w.p, w.p_z, w.quat, w.theta, w.ell, w.v, w.v_z, w.omega, w.thetadot, w.elldot,
        ];
        if self.horizon < 2 {
            return Err(Error::InvalidParameter("horizon must be at least 2".into()));
        }
        if self.sqp_iters < 1 {
            return Err(Error::InvalidParameter("sqp_iters must be at least 1".into()));
        }
        if ws.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidParameter("state weights must be finite and non-negative".into()));
        }
        if !(w.u > 0.0 && w.u.is_finite()) {
            return Err(Error::InvalidParameter("input weight must be positive".into()));
        }
        if !(self.u_max > 0.0) {
            return Err(Error::InvalidParameter("u_max must be positive".into()));
        }
        if !(self.dt_flight > 0.0 && self.dt_ground > 0.0) {
            return Err(Error::InvalidParameter("knot steps must be positive".into()));
        }
        if !(self.qp_tol > 0.0) || self.qp_max_iter == 0 {
            return Err(Error::InvalidParameter("invalid QP settings".into()));
        }
        Ok(())
    }
}

/// Vertex sequence, transitions and step lengths over the horizon.
///
/// Knot `k` goes from `z_k` to `z_{k+1}`. If `edges[k]` is set the knot is a
/// transition (zero duration); otherwise it is a flow of length `steps[k]` in
/// `vertices[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSchedule {
    /// Vertex at each of the `N + 1` knot points.
    pub vertices: Vec<Vertex>,
    pub edges: Vec<Option<Edge>>,
    pub steps: Vec<f64>,
}

impl ModeSchedule {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Time offsets of the knot points from the start of the horizon.
    pub fn times(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.len() + 1];
        for k in 0..self.len() {
            t[k + 1] = t[k] + self.steps[k];
        }
        t
    }

    pub fn first_edge(&self) -> Option<(usize, Edge)> {
        self.edges
            .iter()
            .enumerate()
            .find_map(|(k, e)| e.map(|e| (k, e)))
    }
}

/// Vertical surrogate used to predict transition times.
#[derive(Debug, Clone, Copy)]
enum Surrogate {
    /// Foot height above ground and its vertical velocity.
    Flight { height: f64, vel: f64 },
    /// Spring compression and its rate.
    Ground { ell: f64, elldot: f64 },
}

fn predict_event(s: Surrogate, params: &ModelParams) -> (f64, Surrogate) {
    let g = params.gravity;
    match s {
        Surrogate::Flight { height, vel } => {
            let disc = vel * vel + 2.0 * g * height;
            let t = if disc < 0.0 { 0.0 } else { ((vel + disc.sqrt()) / g).max(0.0) };
            let v_td = vel - g * t;
            (
                t,
                Surrogate::Ground {
                    ell: 0.0,
                    elldot: -v_td,
                },
            )
        }
        Surrogate::Ground { ell, elldot } => {
            let m = params.m_body;
            let w = (params.k_spring / m).sqrt();
            let ell_eq = m * g / params.k_spring;
            let a = ell - ell_eq;
            let b = elldot / w;
            let r = (a * a + b * b).sqrt();
            if r <= ell_eq * (1.0 + 1e-9) {
                // Never reaches full extension, or only grazes it.
                return (f64::INFINITY, s);
            }
            let phi = b.atan2(a);
            let two_pi = 2.0 * std::f64::consts::PI;
            let mut arg = ((-ell_eq / r).acos() + phi).rem_euclid(two_pi);
            if arg >= two_pi - 1e-12 {
                arg = 0.0;
            }
            let t = arg / w;
            let elldot_lo = -w * r * (w * t - phi).sin();
            (
                t,
                Surrogate::Flight {
                    height: 0.0,
                    vel: -elldot_lo,
                },
            )
        }
    }
}

fn surrogate(x: &State, vertex: Vertex, params: &ModelParams) -> Surrogate {
    match vertex {
        Vertex::Flight => Surrogate::Flight {
            height: x.q.p.z - (params.leg_length - x.q.ell),
            vel: x.v.pdot.z,
        },
        Vertex::Ground => Surrogate::Ground {
            ell: x.q.ell,
            elldot: x.v.elldot,
        },
    }
}

/// Fixes the vertex sequence over the horizon from the vertical surrogate.
///
/// The flow step ending at a predicted transition is shortened so that the
/// transition knot sits at the predicted time.
pub fn schedule_modes(x: &State, vertex: Vertex, cfg: &MpcConfig, params: &ModelParams) -> ModeSchedule {
    let n = cfg.horizon;
    let mut vertices = Vec::with_capacity(n + 1);
    let mut edges = Vec::with_capacity(n);
    let mut steps = Vec::with_capacity(n);
    let mut vtx = vertex;
    let (mut t_event, mut after) = predict_event(surrogate(x, vertex, params), params);
    let mut t = 0.0;
    vertices.push(vtx);
    for _ in 0..n {
        let remaining = t_event - t;
        if remaining <= 1e-9 {
            let edge = vtx.outgoing();
            edges.push(Some(edge));
            steps.push(0.0);
            vtx = edge.target();
            let (dt, next) = predict_event(after, params);
            t_event = t + dt;
            after = next;
        } else {
            let dt = match vtx {
                Vertex::Flight => cfg.dt_flight,
                Vertex::Ground => cfg.dt_ground,
            };
            let h = dt.min(remaining);
            edges.push(None);
            steps.push(h);
            t += h;
        }
        vertices.push(vtx);
    }
    ModeSchedule { vertices, edges, steps }
}

/// Per-knot linear model.
#[derive(Debug, Clone)]
pub enum KnotModel {
    Flow(AffineFlow),
    Reset(AffineReset),
}

/// Target pose at a point in time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub p: Vector3<f64>,
    pub quat: UnitQuat,
}

impl Target {
    pub fn upright(p: Vector3<f64>) -> Self {
        Self {
            p,
            quat: UnitQuat::IDENTITY,
        }
    }
}

/// Reference in local coordinates: horizontal position and orientation, all
/// velocities zero.
pub fn local_reference(target: &Target, anchor: UnitQuat) -> Result<Vector20> {
    let mut r = Vector20::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&target.p);
    let xi = log_map(anchor.inverse() * target.quat)?;
    r.fixed_rows_mut::<3>(3).copy_from(&xi.0);
    Ok(r)
}

fn check_models(z0: &LocalState, sched: &ModeSchedule, refs: &[Vector20], models: &[KnotModel]) -> Result<usize> {
    let n = sched.len();
    if models.len() != n || refs.len() != n + 1 {
        return Err(Error::DimensionMismatch(format!(
            "schedule has {n} knots, got {} models and {} references",
            models.len(),
            refs.len()
        )));
    }
    for (k, m) in models.iter().enumerate() {
        let ok = match (m, sched.edges[k]) {
            (KnotModel::Flow(f), None) => f.vertex == sched.vertices[k],
            (KnotModel::Reset(r), Some(e)) => r.edge == e,
            _ => false,
        };
        if !ok {
            return Err(Error::DimensionMismatch(format!("model at knot {k} does not match the schedule")));
        }
    }
    let _ = z0;
    Ok(n)
}

fn terminal_diag(cfg: &MpcConfig) -> Vector20 {
    match cfg.terminal {
        TerminalRule::StageWeight => cfg.weights.q_diag(),
        TerminalRule::None => Vector20::zeros(),
    }
}

/// Assembles the FTOCP over the stacked decision `(z₁..z_N, u₀..u_{N−1})`.
///
/// `refs[k]` is the local reference at knot `k` (index 0 unused).
pub fn build_ftocp(
    z0: &LocalState,
    sched: &ModeSchedule,
    refs: &[Vector20],
    models: &[KnotModel],
    cfg: &MpcConfig,
) -> Result<QpProblem> {
    let n = check_models(z0, sched, refs, models)?;
    let nz = NZ * n;
    let ndec = nz + NU * n;
    let zi = |k: usize| NZ * (k - 1);
    let ui = |k: usize| nz + NU * k;

    let q = cfg.weights.q_diag();
    let qn = terminal_diag(cfg);
    let mut h = DMatrix::<f64>::zeros(ndec, ndec);
    let mut g = DVector::<f64>::zeros(ndec);
    for k in 1..=n {
        let w = if k == n { q + qn } else { q };
        for i in 0..NZ {
            h[(zi(k) + i, zi(k) + i)] = 2.0 * w[i];
            g[zi(k) + i] = -2.0 * w[i] * refs[k][i];
        }
    }
    for k in 0..n {
        for j in 0..NU {
            h[(ui(k) + j, ui(k) + j)] = 2.0 * cfg.weights.u;
        }
    }

    let mut a = DMatrix::<f64>::zeros(nz, ndec);
    let mut b = DVector::<f64>::zeros(nz);
    for (k, m) in models.iter().enumerate() {
        let row = NZ * k;
        for i in 0..NZ {
            a[(row + i, zi(k + 1) + i)] = 1.0;
        }
        let (mat, off) = match m {
            KnotModel::Flow(f) => {
                for i in 0..NZ {
                    for j in 0..NW {
                        a[(row + i, ui(k) + j)] = -f.bd[(i, j)];
                    }
                }
                (f.ad, f.cd)
            }
            KnotModel::Reset(r) => (r.d, r.e),
        };
        if k == 0 {
            let rhs = mat * z0.z + off;
            b.rows_mut(row, NZ).copy_from(&rhs);
        } else {
            for i in 0..NZ {
                for j in 0..NZ {
                    a[(row + i, zi(k) + j)] = -mat[(i, j)];
                }
            }
            b.rows_mut(row, NZ).copy_from(&off);
        }
    }

    let mut lb = DVector::from_element(ndec, f64::NEG_INFINITY);
    let mut ub = DVector::from_element(ndec, f64::INFINITY);
    for k in 0..n {
        for j in 0..NW {
            lb[ui(k) + j] = -cfg.u_max;
            ub[ui(k) + j] = cfg.u_max;
        }
    }
    Ok(QpProblem { h, g, a_eq: a, b_eq: b, lb, ub })
}

/// The FTOCP with the dynamics eliminated: a box-constrained QP in the wheel
/// inputs only, plus the affine map from inputs back to states.
#[derive(Debug, Clone)]
pub struct CondensedFtocp {
    pub qp: QpProblem,
    /// Stacked `(z₁..z_N)` = `gamma · u + free`.
    pub gamma: DMatrix<f64>,
    pub free: DVector<f64>,
}

impl CondensedFtocp {
    pub fn states(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.gamma * u + &self.free
    }
}

pub fn build_condensed(
    z0: &LocalState,
    sched: &ModeSchedule,
    refs: &[Vector20],
    models: &[KnotModel],
    cfg: &MpcConfig,
) -> Result<CondensedFtocp> {
    let n = check_models(z0, sched, refs, models)?;
    let nu = NW * n;
    let mut gamma = DMatrix::<f64>::zeros(NZ * n, nu);
    let mut free = DVector::<f64>::zeros(NZ * n);
    let mut z_prev = z0.z;
    for (k, m) in models.iter().enumerate() {
        let (mat, off) = match m {
            KnotModel::Flow(f) => (f.ad, f.cd),
            KnotModel::Reset(r) => (r.d, r.e),
        };
        let z_next = mat * z_prev + off;
        free.rows_mut(NZ * k, NZ).copy_from(&z_next);
        z_prev = z_next;
        if k > 0 {
            let prev_block = gamma.view((NZ * (k - 1), 0), (NZ, NW * k)).into_owned();
            let block = DMatrix::from_fn(NZ, NZ, |i, j| mat[(i, j)]) * prev_block;
            gamma.view_mut((NZ * k, 0), (NZ, NW * k)).copy_from(&block);
        }
        if let KnotModel::Flow(f) = m {
            for i in 0..NZ {
                for j in 0..NW {
                    gamma[(NZ * k + i, NW * k + j)] = f.bd[(i, j)];
                }
            }
        }
    }

    let q = cfg.weights.q_diag();
    let qn = terminal_diag(cfg);
    let wdiag = DVector::from_fn(NZ * n, |r, _| {
        let k = r / NZ + 1;
        let i = r % NZ;
        if k == n {
            q[i] + qn[i]
        } else {
            q[i]
        }
    });
    let reference = DVector::from_fn(NZ * n, |r, _| refs[r / NZ + 1][r % NZ]);
    let wg = DMatrix::from_fn(NZ * n, nu, |r, c| wdiag[r] * gamma[(r, c)]);
    let mut h = gamma.tr_mul(&wg) * 2.0;
    for i in 0..nu {
        h[(i, i)] += 2.0 * cfg.weights.u;
    }
    // Exact symmetry for the solver's check.
    let h = (&h + h.transpose()) * 0.5;
    let g = wg.tr_mul(&(&free - &reference)) * 2.0;
    let qp = QpProblem::boxed(
        h,
        g,
        DVector::from_element(nu, -cfg.u_max),
        DVector::from_element(nu, cfg.u_max),
    );
    Ok(CondensedFtocp { qp, gamma, free })
}

/// Linear models for every knot about the expansion `(xs, us)`.
pub fn linearize_along(
    sched: &ModeSchedule,
    xs: &[State],
    us: &[Input],
    anchor: UnitQuat,
    cfg: &MpcConfig,
    params: &ModelParams,
) -> Result<Vec<KnotModel>> {
    (0..sched.len())
        .map(|k| match sched.edges[k] {
            Some(e) => Ok(KnotModel::Reset(linearize_reset(e, &xs[k], anchor, params)?)),
            None => Ok(KnotModel::Flow(build_affine_flow(
                sched.vertices[k],
                &xs[k],
                &us[k],
                sched.steps[k],
                anchor,
                params,
                cfg.discretization,
            )?)),
        })
        .collect()
}

/// Nonlinear rollout along a fixed schedule; transitions use the extended
/// reset regardless of the guard value.
pub fn rollout(x0: &State, sched: &ModeSchedule, us: &[Input], params: &ModelParams) -> Result<Vec<State>> {
    let mut xs = Vec::with_capacity(sched.len() + 1);
    let mut x = *x0;
    xs.push(x);
    for k in 0..sched.len() {
        match sched.edges[k] {
            Some(e) => x = reset_map_ext(e, &x, params)?,
            None => {
                let h = sched.steps[k];
                let sub = (h / ROLLOUT_MAX_STEP).ceil().max(1.0) as usize;
                for _ in 0..sub {
                    x = integrate_step(sched.vertices[k], &x, &us[k], h / sub as f64, params)?;
                }
            }
        }
        xs.push(x);
    }
    Ok(xs)
}

/// A solved plan, kept to warm-start the next solve.
#[derive(Debug, Clone)]
pub struct MpcPlan {
    /// Absolute time of each knot point.
    pub times: Vec<f64>,
    pub states: Vec<State>,
    pub inputs: Vec<Input>,
    pub schedule: ModeSchedule,
}

impl MpcPlan {
    /// Planned input in effect at absolute time `t` (zero-order hold, clamped
    /// to the horizon).
    pub fn input_at(&self, t: f64) -> Input {
        let mut best = Input::zeros();
        for k in 0..self.inputs.len() {
            if self.schedule.edges[k].is_some() {
                continue;
            }
            best = self.inputs[k];
            if t < self.times[k + 1] {
                break;
            }
        }
        best
    }
}

#[derive(Debug, Clone)]
pub struct MpcOutput {
    pub quat_d: UnitQuat,
    /// Desired body rate, rad/s.
    pub omega_d: Vector3<f64>,
    pub u_ff: Vector4<f64>,
    /// Planned local states `z₀..z_N` about `anchor`.
    pub z_traj: Vec<Vector20>,
    pub anchor: UnitQuat,
    pub schedule: ModeSchedule,
    pub solve_time: f64,
    pub sqp_iters: usize,
    pub qp_status: QpStatus,
    /// Set when the solve failed and this output was carried over.
    pub stale: bool,
}

impl MpcOutput {
    /// Output that holds the given orientation with zero rate and torque.
    pub fn hold(quat: UnitQuat) -> Self {
        Self {
            quat_d: quat,
            omega_d: Vector3::zeros(),
            u_ff: Vector4::zeros(),
            z_traj: Vec::new(),
            anchor: quat,
            schedule: ModeSchedule {
                vertices: Vec::new(),
                edges: Vec::new(),
                steps: Vec::new(),
            },
            solve_time: 0.0,
            sqp_iters: 0,
            qp_status: QpStatus::Solved,
            stale: false,
        }
    }
}

/// Result of one successful SQP solve.
#[derive(Debug, Clone)]
pub struct SqpResult {
    pub output: MpcOutput,
    pub plan: MpcPlan,
    pub last_qp: QpSolution,
}

fn extract_output(
    anchor: UnitQuat,
    sched: &ModeSchedule,
    zs: &[Vector20],
    us: &[Input],
) -> (UnitQuat, Vector3<f64>, Vector4<f64>) {
    // The first flow knot carries the command; a leading transition has no
    // input of its own.
    let k = sched.edges.iter().position(|e| e.is_none()).unwrap_or(0);
    let z1 = &zs[k + 1];
    let quat_d = anchor * exp_map(ImQuat3(z1.fixed_rows::<3>(3).into_owned()));
    let omega_d = z1.fixed_rows::<3>(13) * 2.0;
    let mut u_ff = us[k];
    u_ff[3] = 0.0;
    (quat_d, omega_d, u_ff)
}

/// One receding-horizon solve from the measured state `x` in `vertex` at
/// time `t`.
///
/// The expansion of the first SQP round is the previous plan's inputs,
/// time-shifted and rolled out from `x`; without a previous plan it is the
/// constant state `x` with zero input.
pub fn sqp_solve(
    t: f64,
    x: &State,
    vertex: Vertex,
    reference: &dyn Fn(f64) -> Target,
    prev: Option<&MpcPlan>,
    cfg: &MpcConfig,
    params: &ModelParams,
) -> Result<SqpResult> {
    let start = Instant::now();
    let anchor = x.q.quat;
    let z0 = to_local(x, anchor)?;
    let sched = schedule_modes(x, vertex, cfg, params);
    let n = sched.len();
    let offsets = sched.times();
    let refs: Vec<Vector20> = offsets
        .iter()
        .map(|dt| local_reference(&reference(t + dt), anchor))
        .collect::<Result<_>>()?;

    let mut us: Vec<Input> = match prev {
        Some(p) => offsets[..n]
            .iter()
            .zip(&sched.edges)
            .map(|(dt, e)| if e.is_some() { Input::zeros() } else { p.input_at(t + dt) })
            .collect(),
        None => vec![Input::zeros(); n],
    };
    let mut xs: Vec<State> = match prev {
        Some(_) => rollout(x, &sched, &us, params).unwrap_or_else(|_| vec![*x; n + 1]),
        None => vec![*x; n + 1],
    };

    let mut warm: Option<DVector<f64>> = None;
    let mut last = None;
    let mut zs = Vec::new();
    for _ in 0..cfg.sqp_iters {
        let models = linearize_along(&sched, &xs, &us, anchor, cfg, params)?;
        let cond = build_condensed(&z0, &sched, &refs, &models, cfg)?;
        let sol = solve_qp(&cond.qp, warm.as_ref(), cfg.qp_tol, cfg.qp_max_iter)?;
        if sol.status != QpStatus::Solved {
            return Err(Error::ConvergenceFailure {
                iterations: sol.iterations,
                residual: sol.stationarity_residual.max(sol.eq_residual),
            });
        }
        let stacked = cond.states(&sol.z);
        zs = std::iter::once(z0.z)
            .chain((0..n).map(|k| stacked.fixed_rows::<NZ>(NZ * k).into_owned()))
            .collect();
        us = (0..n)
            .map(|k| Input::new(sol.z[NW * k], sol.z[NW * k + 1], sol.z[NW * k + 2], 0.0))
            .collect();
        xs = zs
            .iter()
            .map(|z| recover_state(&LocalState { z: *z, anchor }))
            .collect();
        warm = Some(sol.z.clone());
        last = Some(sol);
    }
    let last = last.expect("at least one SQP iteration");
    let (quat_d, omega_d, u_ff) = extract_output(anchor, &sched, &zs, &us);
    let output = MpcOutput {
        quat_d,
        omega_d,
        u_ff,
        z_traj: zs,
        anchor,
        schedule: sched.clone(),
        solve_time: start.elapsed().as_secs_f64(),
        sqp_iters: cfg.sqp_iters,
        qp_status: last.status,
        stale: false,
    };
    let plan = MpcPlan {
        times: offsets.iter().map(|dt| t + dt).collect(),
        states: xs,
        inputs: us,
        schedule: sched,
    };
    Ok(SqpResult {
        output,
        plan,
        last_qp: last,
    })
}

/// Stateful wrapper that keeps the previous plan and output.
#[derive(Debug, Clone)]
pub struct MpcController {
    pub cfg: MpcConfig,
    pub params: ModelParams,
    plan: Option<MpcPlan>,
    last: Option<MpcOutput>,
}

impl MpcController {
    pub fn new(cfg: MpcConfig, params: ModelParams) -> Self {
        Self {
            cfg,
            params,
            plan: None,
            last: None,
        }
    }

    pub fn plan(&self) -> Option<&MpcPlan> {
        self.plan.as_ref()
    }

    /// Runs one solve. On failure the previous output is returned flagged as
    /// stale (or a hold-attitude output if there is none).
    pub fn step(&mut self, t: f64, x: &State, vertex: Vertex, reference: &dyn Fn(f64) -> Target) -> MpcOutput {
        let start = Instant::now();
        match sqp_solve(t, x, vertex, reference, self.plan.as_ref(), &self.cfg, &self.params) {
            Ok(r) => {
                self.plan = Some(r.plan);
                self.last = Some(r.output.clone());
                r.output
            }
            Err(_) => {
                self.plan = None;
                let mut out = self.last.clone().unwrap_or_else(|| MpcOutput::hold(x.q.quat));
                out.stale = true;
                out.solve_time = start.elapsed().as_secs_f64();
                out.qp_status = QpStatus::MaxIter;
                out
            }
        }
    }
}

/// Convenience for a single solve towards an upright set-point.
pub fn mpc_step(
    x: &State,
    vertex: Vertex,
    p_ref: Vector3<f64>,
    prev: Option<&MpcPlan>,
    cfg: &MpcConfig,
    params: &ModelParams,
) -> Result<SqpResult> {
    let target = Target::upright(p_ref);
    sqp_solve(0.0, x, vertex, &|_| target, prev, cfg, params)
}
