//! Rigid-body model of the hopper: a main body carrying three reaction wheels
//! at its center of mass and a point-mass foot on a sprung prismatic joint
//! along the body −z axis.
//!
//! Generalized velocities are `v = (pdot, omega, thetadot, elldot)` where
//! `pdot` is the world-frame body velocity, `omega` the body-frame angular
//! velocity in rad/s, `thetadot` the wheel rates relative to the body and
//! `elldot` the rate of spring compression. Wheel inputs are the torques the
//! wheel motors exert *on the body*; the wheels receive the opposite torque.

use nalgebra::{
    Cholesky, Matrix3, SMatrix, SVector, Vector3, Vector4, U10,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::UnitQuat;

pub type Vector10 = SVector<f64, 10>;
pub type Vector20 = SVector<f64, 20>;
pub type Matrix10 = SMatrix<f64, 10, 10>;
pub type Matrix10x4 = SMatrix<f64, 10, 4>;
pub type Matrix3x10 = SMatrix<f64, 3, 10>;

/// Tolerance used by [`reset_map`] to decide whether a state lies on a guard.
pub const GUARD_TOL: f64 = 1e-6;

const MAX_MASS_COND: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vertex {
    Flight,
    Ground,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Edge {
    FlightToGround,
    GroundToFlight,
}

impl Vertex {
    /// The edge leaving this vertex.
    pub fn outgoing(self) -> Edge {
        match self {
            Vertex::Flight => Edge::FlightToGround,
            Vertex::Ground => Edge::GroundToFlight,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Vertex::Flight => "flight",
            Vertex::Ground => "ground",
        }
    }
}

impl Edge {
    pub fn source(self) -> Vertex {
        match self {
            Edge::FlightToGround => Vertex::Flight,
            Edge::GroundToFlight => Vertex::Ground,
        }
    }

    pub fn target(self) -> Vertex {
        match self {
            Edge::FlightToGround => Vertex::Ground,
            Edge::GroundToFlight => Vertex::Flight,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Edge::FlightToGround => "f->g",
            Edge::GroundToFlight => "g->f",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Config {
    /// Body center of mass, world frame, m.
    pub p: Vector3<f64>,
    pub quat: UnitQuat,
    /// Wheel angles relative to the body, rad.
    pub theta: Vector3<f64>,
    /// Spring compression, m. Positive shortens the leg.
    pub ell: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Veloc {
    pub pdot: Vector3<f64>,
    /// Body-frame angular velocity, rad/s.
    pub omega: Vector3<f64>,
    pub thetadot: Vector3<f64>,
    pub elldot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State {
    pub q: Config,
    pub v: Veloc,
}

/// `(tau_wheel_x, tau_wheel_y, tau_wheel_z, tau_foot)` in N m.
pub type Input = Vector4<f64>;

impl Default for Config {
    fn default() -> Self {
        Self {
            p: Vector3::zeros(),
            quat: UnitQuat::IDENTITY,
            theta: Vector3::zeros(),
            ell: 0.0,
        }
    }
}

impl Default for Veloc {
    fn default() -> Self {
        Self::from_vector(&Vector10::zeros())
    }
}

impl Default for State {
    fn default() -> Self {
        Self {
            q: Config::default(),
            v: Veloc::default(),
        }
    }
}

impl Veloc {
    pub fn to_vector(&self) -> Vector10 {
        let mut out = Vector10::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&self.pdot);
        out.fixed_rows_mut::<3>(3).copy_from(&self.omega);
        out.fixed_rows_mut::<3>(6).copy_from(&self.thetadot);
        out[9] = self.elldot;
        out
    }

    pub fn from_vector(v: &Vector10) -> Self {
        Self {
            pdot: v.fixed_rows::<3>(0).into_owned(),
            omega: v.fixed_rows::<3>(3).into_owned(),
            thetadot: v.fixed_rows::<3>(6).into_owned(),
            elldot: v[9],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|x| x.is_finite())
    }
}

impl State {
    /// Body at rest at `p` with identity attitude and relaxed spring.
    pub fn at_rest(p: Vector3<f64>) -> Self {
        Self {
            q: Config {
                p,
                ..Config::default()
            },
            v: Veloc::default(),
        }
    }

    pub fn is_finite(&self) -> bool {
        let q = &self.q;
        q.p.iter().chain(q.theta.iter()).all(|x| x.is_finite())
            && q.ell.is_finite()
            && q.quat.to_array().iter().all(|x| x.is_finite())
            && self.v.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub m_body: f64,
    pub m_foot: f64,
    /// Body inertia about its COM in the body frame, including the wheels'
    /// transverse inertia.
    pub i_body: Matrix3<f64>,
    /// Spin inertia of each wheel about its axis.
    pub i_wheel: f64,
    /// Wheel spin axes in the body frame, one per column.
    pub wheel_axes: Matrix3<f64>,
    /// Distance from the body COM to the foot at zero compression.
    pub leg_length: f64,
    pub k_spring: f64,
    pub b_spring: f64,
    pub gear_foot: f64,
    /// Cable pulley radius converting geared foot torque into spring force.
    pub foot_pulley_radius: f64,
    pub gravity: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            m_body: 5.0,
            m_foot: 0.1,
            i_body: Matrix3::from_diagonal(&Vector3::new(0.05, 0.05, 0.02)),
            i_wheel: 0.005,
            wheel_axes: Matrix3::identity(),
            leg_length: 0.3,
            k_spring: 4000.0,
            b_spring: 5.0,
            gear_foot: 3.0,
            foot_pulley_radius: 0.03,
            gravity: 9.81,
        }
    }
}

impl ModelParams {
    pub fn total_mass(&self) -> f64 {
        self.m_body + self.m_foot
    }

    /// Force along the leg per unit foot motor torque.
    pub fn foot_force_gain(&self) -> f64 {
        self.gear_foot / self.foot_pulley_radius
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m_body", self.m_body),
            ("m_foot", self.m_foot),
            ("i_wheel", self.i_wheel),
            ("leg_length", self.leg_length),
            ("k_spring", self.k_spring),
            ("gear_foot", self.gear_foot),
            ("foot_pulley_radius", self.foot_pulley_radius),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        if !(self.b_spring >= 0.0 && self.b_spring.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "b_spring must be non-negative, got {}",
                self.b_spring
            )));
        }
        if !(self.gravity >= 0.0 && self.gravity.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gravity must be non-negative, got {}",
                self.gravity
            )));
        }
        let sym = (self.i_body - self.i_body.transpose()).abs().max();
        if sym > 1e-12 || Cholesky::new(self.i_body).is_none() {
            return Err(Error::InvalidParameter(
                "i_body must be symmetric positive definite".into(),
            ));
        }
        let gram = self.wheel_axes.transpose() * self.wheel_axes;
        if (gram - Matrix3::identity()).abs().max() > 1e-9 {
            return Err(Error::InvalidParameter(
                "wheel_axes must be orthonormal".into(),
            ));
        }
        Ok(())
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Foot position relative to the body COM, body frame.
fn leg_vector(q: &Config, params: &ModelParams) -> Vector3<f64> {
    Vector3::new(0.0, 0.0, q.ell - params.leg_length)
}

/// Centripetal/Coriolis part of the foot acceleration, body frame.
fn foot_bias_body(q: &Config, v: &Veloc, params: &ModelParams) -> Vector3<f64> {
    let r = leg_vector(q, params);
    let w = v.omega;
    w.cross(&w.cross(&r)) + 2.0 * v.elldot * w.cross(&Vector3::z())
}

/// Body plus wheel angular momentum about the body COM, body frame.
fn rotor_momentum(v: &Veloc, params: &ModelParams) -> Vector3<f64> {
    let a = &params.wheel_axes;
    params.i_body * v.omega + params.i_wheel * a * (a.transpose() * v.omega + v.thetadot)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsTerms {
    /// Mass matrix.
    pub d: Matrix10,
    /// Coriolis, centrifugal, gravity and spring terms.
    pub h: Vector10,
    /// Actuation map.
    pub b: Matrix10x4,
}

pub fn mass_matrix(q: &Config, params: &ModelParams) -> Matrix10 {
    let rot = q.quat.to_rotation_matrix();
    let r = leg_vector(q, params);
    let rx = skew(&r);
    let a = &params.wheel_axes;
    let (mb, mf, iw) = (params.m_body, params.m_foot, params.i_wheel);

    let mut d = Matrix10::zeros();
    d.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(Matrix3::identity() * (mb + mf)));
    let p_w = -mf * rot * rx;
    d.fixed_view_mut::<3, 3>(0, 3).copy_from(&p_w);
    d.fixed_view_mut::<3, 3>(3, 0).copy_from(&p_w.transpose());
    let p_l = mf * rot * Vector3::z();
    d.fixed_view_mut::<3, 1>(0, 9).copy_from(&p_l);
    d.fixed_view_mut::<1, 3>(9, 0).copy_from(&p_l.transpose());

    let i_rot = params.i_body + iw * a * a.transpose() - mf * rx * rx;
    d.fixed_view_mut::<3, 3>(3, 3).copy_from(&i_rot);
    d.fixed_view_mut::<3, 3>(3, 6).copy_from(&(iw * a));
    d.fixed_view_mut::<3, 3>(6, 3).copy_from(&(iw * a.transpose()));
    d.fixed_view_mut::<3, 3>(6, 6)
        .copy_from(&(Matrix3::identity() * iw));
    d[(9, 9)] = mf;
    d
}

pub fn actuation_matrix(params: &ModelParams) -> Matrix10x4 {
    let mut b = Matrix10x4::zeros();
    // wheel motors: +u on the body means -u on the wheel
    for i in 0..3 {
        b[(6 + i, i)] = -1.0;
    }
    b[(9, 3)] = params.foot_force_gain();
    b
}

pub fn bias_forces(q: &Config, v: &Veloc, params: &ModelParams) -> Vector10 {
    let rot = q.quat.to_rotation_matrix();
    let r = leg_vector(q, params);
    let rx = skew(&r);
    let beta = foot_bias_body(q, v, params);
    let mf = params.m_foot;
    let g_world = Vector3::new(0.0, 0.0, params.gravity);
    let g_body = rot.transpose() * g_world;

    let mut h = Vector10::zeros();
    h.fixed_rows_mut::<3>(0)
        .copy_from(&(mf * rot * beta + params.total_mass() * g_world));
    let hw = rotor_momentum(v, params);
    h.fixed_rows_mut::<3>(3)
        .copy_from(&(v.omega.cross(&hw) + mf * rx * beta + mf * rx * g_body));
    h[9] = mf * beta.z + mf * g_body.z + params.k_spring * q.ell + params.b_spring * v.elldot;
    h
}

pub fn dynamics_terms(q: &Config, v: &Veloc, params: &ModelParams) -> Result<DynamicsTerms> {
    let d = mass_matrix(q, params);
    factor_mass_matrix(&d)?;
    Ok(DynamicsTerms {
        d,
        h: bias_forces(q, v, params),
        b: actuation_matrix(params),
    })
}

fn factor_mass_matrix(d: &Matrix10) -> Result<Cholesky<f64, U10>> {
    let chol = Cholesky::new(*d).ok_or(Error::SingularMassMatrix { cond: f64::INFINITY })?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = (diag.min(), diag.max());
    let cond = (hi / lo).powi(2);
    if !(cond <= MAX_MASS_COND) {
        return Err(Error::SingularMassMatrix { cond });
    }
    Ok(chol)
}

/// Foot position and velocity in the world frame.
pub fn foot_kinematics(
    q: &Config,
    v: &Veloc,
    params: &ModelParams,
) -> (Vector3<f64>, Vector3<f64>) {
    let rot = q.quat.to_rotation_matrix();
    let r = leg_vector(q, params);
    let p_foot = q.p + rot * r;
    let pdot_foot = v.pdot + rot * (v.omega.cross(&r) + Vector3::z() * v.elldot);
    (p_foot, pdot_foot)
}

/// Jacobian of the foot position with respect to the generalized velocity and
/// the drift term `Jdot v`.
pub fn contact_jacobian(q: &Config, v: &Veloc, params: &ModelParams) -> (Matrix3x10, Vector3<f64>) {
    let rot = q.quat.to_rotation_matrix();
    let r = leg_vector(q, params);
    let mut j = Matrix3x10::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rot * skew(&r)));
    j.fixed_view_mut::<3, 1>(0, 9).copy_from(&(rot * Vector3::z()));
    let jdot_v = rot * foot_bias_body(q, v, params);
    (j, jdot_v)
}

/// Generalized accelerations `vdot` in the given vertex.
pub fn accelerations(vtx: Vertex, x: &State, u: &Input, params: &ModelParams) -> Result<Vector10> {
    let d = mass_matrix(&x.q, params);
    let chol = factor_mass_matrix(&d)?;
    let rhs = actuation_matrix(params) * u - bias_forces(&x.q, &x.v, params);
    let free = chol.solve(&rhs);
    match vtx {
        Vertex::Flight => Ok(free),
        Vertex::Ground => {
            // Schur complement of [D -J^T; J 0]
            let (j, jdot_v) = contact_jacobian(&x.q, &x.v, params);
            let dinv_jt = chol.solve(&j.transpose());
            let schur = j * dinv_jt;
            let lambda = schur
                .lu()
                .solve(&(-(j * free) - jdot_v))
                .ok_or(Error::SingularKkt)?;
            let acc = free + dinv_jt * lambda;
            if acc.iter().all(|a| a.is_finite()) {
                Ok(acc)
            } else {
                Err(Error::SingularKkt)
            }
        }
    }
}

/// Contact force on the foot during the ground phase, world frame.
pub fn contact_force(x: &State, u: &Input, params: &ModelParams) -> Result<Vector3<f64>> {
    let d = mass_matrix(&x.q, params);
    let chol = factor_mass_matrix(&d)?;
    let rhs = actuation_matrix(params) * u - bias_forces(&x.q, &x.v, params);
    let free = chol.solve(&rhs);
    let (j, jdot_v) = contact_jacobian(&x.q, &x.v, params);
    let schur = j * chol.solve(&j.transpose());
    schur
        .lu()
        .solve(&(-(j * free) - jdot_v))
        .ok_or(Error::SingularKkt)
}

/// State derivative in tangent coordinates:
/// `(pdot, omega, thetadot, elldot, pddot, omegadot, thetaddot, ellddot)`.
///
/// The orientation slot carries the body rate in rad/s; the quaternion itself
/// is advanced on the group by the integrator.
pub fn vector_field(vtx: Vertex, x: &State, u: &Input, params: &ModelParams) -> Result<Vector20> {
    let acc = accelerations(vtx, x, u, params)?;
    let mut out = Vector20::zeros();
    out.fixed_rows_mut::<10>(0).copy_from(&x.v.to_vector());
    out.fixed_rows_mut::<10>(10).copy_from(&acc);
    Ok(out)
}

/// Guard function of the given vertex and whether its direction condition holds.
pub fn guard_value(vtx: Vertex, x: &State, params: &ModelParams) -> (f64, bool) {
    match vtx {
        Vertex::Flight => {
            let (pf, vf) = foot_kinematics(&x.q, &x.v, params);
            (pf.z, vf.z < 0.0)
        }
        Vertex::Ground => (x.q.ell, x.v.elldot < 0.0),
    }
}

/// Reset map restricted to the guard. Fails if `x_minus` is not on it.
pub fn reset_map(edge: Edge, x_minus: &State, params: &ModelParams) -> Result<State> {
    let src = edge.source();
    let (g, _) = guard_value(src, x_minus, params);
    if g.abs() > GUARD_TOL {
        return Err(Error::GuardViolation { vertex: src, value: g });
    }
    reset_map_ext(edge, x_minus, params)
}

/// The same momentum transfer applied anywhere in the state space.
///
/// `FlightToGround` is a plastic impact that annihilates the foot velocity:
/// `v+ = (I - D^-1 J^T (J D^-1 J^T)^-1 J) v-`. Liftoff is velocity continuous.
pub fn reset_map_ext(edge: Edge, x_minus: &State, params: &ModelParams) -> Result<State> {
    match edge {
        Edge::GroundToFlight => Ok(*x_minus),
        Edge::FlightToGround => {
            let d = mass_matrix(&x_minus.q, params);
            let chol = factor_mass_matrix(&d)?;
            let (j, _) = contact_jacobian(&x_minus.q, &x_minus.v, params);
            let v = x_minus.v.to_vector();
            let dinv_jt = chol.solve(&j.transpose());
            let schur = j * dinv_jt;
            let impulse = schur.lu().solve(&(j * v)).ok_or(Error::SingularKkt)?;
            let v_plus = v - dinv_jt * impulse;
            Ok(State {
                q: x_minus.q,
                v: Veloc::from_vector(&v_plus),
            })
        }
    }
}

pub fn kinetic_energy(x: &State, params: &ModelParams) -> f64 {
    let v = x.v.to_vector();
    0.5 * v.dot(&(mass_matrix(&x.q, params) * v))
}

/// Gravitational plus spring potential energy.
pub fn potential_energy(x: &State, params: &ModelParams) -> f64 {
    let (pf, _) = foot_kinematics(&x.q, &x.v, params);
    params.gravity * (params.m_body * x.q.p.z + params.m_foot * pf.z)
        + 0.5 * params.k_spring * x.q.ell * x.q.ell
}

pub fn total_energy(x: &State, params: &ModelParams) -> f64 {
    kinetic_energy(x, params) + potential_energy(x, params)
}

/// Center of mass of body plus foot.
pub fn center_of_mass(x: &State, params: &ModelParams) -> Vector3<f64> {
    let (pf, _) = foot_kinematics(&x.q, &x.v, params);
    (params.m_body * x.q.p + params.m_foot * pf) / params.total_mass()
}

/// Total angular momentum about the system center of mass, world frame.
pub fn angular_momentum_about_com(x: &State, params: &ModelParams) -> Vector3<f64> {
    let (pf, vf) = foot_kinematics(&x.q, &x.v, params);
    let c = center_of_mass(x, params);
    let vc = (params.m_body * x.v.pdot + params.m_foot * vf) / params.total_mass();
    let rot = x.q.quat.to_rotation_matrix();
    rot * rotor_momentum(&x.v, params)
        + params.m_body * (x.q.p - c).cross(&(x.v.pdot - vc))
        + params.m_foot * (pf - c).cross(&(vf - vc))
}
