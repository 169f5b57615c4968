//! Affine models of the hybrid dynamics in exponential coordinates.
//!
//! The local state is `z = (p, ξ, θ, ℓ, ṗ, ω̂, θ̇, ℓ̇)` where `ξ` is the
//! logarithm of the orientation relative to an anchor and `ω̂ = ω/2` is the
//! body rate in the same half-angle algebra units as `ξ`, so that the
//! attitude kinematics linearize to `δξ̇ = δω̂` without a scale factor.
//!
//! Jacobians are central finite differences. Orientation perturbations are
//! applied on the group, `q·exp(η)`.

use nalgebra::{DMatrix, Matrix3, Matrix3x4, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    reset_map_ext, vector_field, Edge, Input, ModelParams, State, Vector20, Vertex,
};
use crate::error::Result;
use crate::geom::{exp_map, ImQuat3, UnitQuat};
use crate::mpc::{to_local, LocalState};

pub type Matrix20 = SMatrix<f64, 20, 20>;
pub type Matrix20x4 = SMatrix<f64, 20, 4>;

/// Finite-difference step used by all Jacobians in this module.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    Euler,
    #[default]
    Exact,
}

/// Discrete affine flow `z⁺ = Ad z + Bd u + Cd` over a step of length `h`.
#[derive(Debug, Clone)]
pub struct AffineFlow {
    pub ad: Matrix20,
    pub bd: Matrix20x4,
    pub cd: Vector20,
    pub h: f64,
    pub vertex: Vertex,
}

/// Affine impact model `z⁺ = D z⁻ + E`.
#[derive(Debug, Clone)]
pub struct AffineReset {
    pub d: Matrix20,
    pub e: Vector20,
    pub edge: Edge,
}

/// Continuous affine model `ż = A z + B u + C`.
#[derive(Debug, Clone)]
pub struct ContinuousModel {
    pub a: Matrix20,
    pub b: Matrix20x4,
    pub c: Vector20,
}

/// Applies a local-coordinate increment to a state, with the orientation part
/// on the group and the rate part in algebra units.
pub fn perturb(x: &State, dz: &Vector20) -> State {
    let mut out = *x;
    out.q.p += dz.fixed_rows::<3>(0);
    out.q.quat = x.q.quat * exp_map(ImQuat3(dz.fixed_rows::<3>(3).into_owned()));
    out.q.theta += dz.fixed_rows::<3>(6);
    out.q.ell += dz[9];
    out.v.pdot += dz.fixed_rows::<3>(10);
    out.v.omega += dz.fixed_rows::<3>(13) * 2.0;
    out.v.thetadot += dz.fixed_rows::<3>(16);
    out.v.elldot += dz[19];
    out
}

/// Time derivative of `z` with the attitude row frozen to `ξ̇ = ω̂`.
fn local_field(vtx: Vertex, x: &State, u: &Input, params: &ModelParams) -> Result<Vector20> {
    let mut f = vector_field(vtx, x, u, params)?;
    for i in 3..6 {
        f[i] *= 0.5;
    }
    for i in 13..16 {
        f[i] *= 0.5;
    }
    Ok(f)
}

/// Jacobians of the body angular acceleration `ω̇` (rad/s²) with respect to an
/// on-group orientation perturbation `η`, the body rate `ω` (rad/s) and the
/// input.
pub fn attitude_jacobians(
    vtx: Vertex,
    x: &State,
    u: &Input,
    params: &ModelParams,
) -> Result<(Matrix3<f64>, Matrix3<f64>, Matrix3x4<f64>)> {
    let omega_dot = |x: &State, u: &Input| -> Result<Vector3<f64>> {
        Ok(vector_field(vtx, x, u, params)?.fixed_rows::<3>(13).into_owned())
    };
    let h = FD_STEP;
    let mut d_eta = Matrix3::zeros();
    let mut d_omega = Matrix3::zeros();
    let mut d_u = Matrix3x4::zeros();
    for i in 0..3 {
        let mut e = Vector3::zeros();
        e[i] = h;
        let mut xp = *x;
        let mut xm = *x;
        xp.q.quat = x.q.quat * exp_map(ImQuat3(e));
        xm.q.quat = x.q.quat * exp_map(ImQuat3(-e));
        d_eta.set_column(i, &((omega_dot(&xp, u)? - omega_dot(&xm, u)?) / (2.0 * h)));

        let mut xp = *x;
        let mut xm = *x;
        xp.v.omega += e;
        xm.v.omega -= e;
        d_omega.set_column(i, &((omega_dot(&xp, u)? - omega_dot(&xm, u)?) / (2.0 * h)));
    }
    for j in 0..4 {
        let mut up = *u;
        let mut um = *u;
        up[j] += h;
        um[j] -= h;
        d_u.set_column(j, &((omega_dot(x, &up)? - omega_dot(x, &um)?) / (2.0 * h)));
    }
    Ok((d_eta, d_omega, d_u))
}

/// Continuous affine model of the local dynamics about `(xbar, ubar)`, with
/// `ξ` measured from `anchor`.
pub fn continuous_model(
    vtx: Vertex,
    xbar: &State,
    ubar: &Input,
    anchor: UnitQuat,
    params: &ModelParams,
) -> Result<ContinuousModel> {
    let h = FD_STEP;
    let mut a = Matrix20::zeros();
    // Kinematic rows are exactly linear: d/dt (p, ξ, θ, ℓ) = (ṗ, ω̂, θ̇, ℓ̇).
    for i in 0..10 {
        a[(i, 10 + i)] = 1.0;
    }
    for j in 0..20 {
        let mut dz = Vector20::zeros();
        dz[j] = h;
        let fp = local_field(vtx, &perturb(xbar, &dz), ubar, params)?;
        let fm = local_field(vtx, &perturb(xbar, &(-dz)), ubar, params)?;
        let col = (fp - fm) / (2.0 * h);
        for i in 10..20 {
            a[(i, j)] = col[i];
        }
    }
    let mut b = Matrix20x4::zeros();
    for j in 0..4 {
        let mut up = *ubar;
        let mut um = *ubar;
        up[j] += h;
        um[j] -= h;
        let col = (local_field(vtx, xbar, &up, params)? - local_field(vtx, xbar, &um, params)?)
            / (2.0 * h);
        for i in 10..20 {
            b[(i, j)] = col[i];
        }
    }
    let zbar = to_local(xbar, anchor)?.z;
    let f = local_field(vtx, xbar, ubar, params)?;
    let c = f - a * zbar - b * ubar;
    Ok(ContinuousModel { a, b, c })
}

/// Discretizes a continuous affine model over a step `h`.
pub fn discretize(m: &ContinuousModel, h: f64, method: Discretization, vertex: Vertex) -> AffineFlow {
    match method {
        Discretization::Euler => AffineFlow {
            ad: Matrix20::identity() + m.a * h,
            bd: m.b * h,
            cd: m.c * h,
            h,
            vertex,
        },
        Discretization::Exact => {
            // exp([[A, B, C], [0, 0, 0]] h) = [[Ad, Bd, Cd], [0, I, 0], [0, 0, 1]]
            let mut aug = DMatrix::<f64>::zeros(25, 25);
            aug.view_mut((0, 0), (20, 20)).copy_from(&(m.a * h));
            aug.view_mut((0, 20), (20, 4)).copy_from(&(m.b * h));
            aug.view_mut((0, 24), (20, 1)).copy_from(&(m.c * h));
            let e = aug.exp();
            AffineFlow {
                ad: e.fixed_view::<20, 20>(0, 0).into_owned(),
                bd: e.fixed_view::<20, 4>(0, 20).into_owned(),
                cd: e.fixed_view::<20, 1>(0, 24).into_owned(),
                h,
                vertex,
            }
        }
    }
}

/// Discrete affine flow about `(xbar, ubar)` over a step `h`.
pub fn build_affine_flow(
    vtx: Vertex,
    xbar: &State,
    ubar: &Input,
    h: f64,
    anchor: UnitQuat,
    params: &ModelParams,
    method: Discretization,
) -> Result<AffineFlow> {
    let m = continuous_model(vtx, xbar, ubar, anchor, params)?;
    Ok(discretize(&m, h, method, vtx))
}

/// Affine model of the extended reset about `xbar_minus`.
pub fn linearize_reset(
    edge: Edge,
    xbar_minus: &State,
    anchor: UnitQuat,
    params: &ModelParams,
) -> Result<AffineReset> {
    let zbar = to_local(xbar_minus, anchor)?.z;
    let zplus = to_local(&reset_map_ext(edge, xbar_minus, params)?, anchor)?.z;
    let mut d = Matrix20::identity();
    if edge == Edge::FlightToGround {
        let h = FD_STEP;
        let reset_vel = |x: &State| -> Result<Vector20> {
            let xp = reset_map_ext(edge, x, params)?;
            let mut out = Vector20::zeros();
            let v = xp.v.to_vector();
            for i in 0..10 {
                out[10 + i] = v[i];
            }
            for i in 13..16 {
                out[i] *= 0.5;
            }
            Ok(out)
        };
        for j in 0..20 {
            let mut dz = Vector20::zeros();
            dz[j] = h;
            let col = (reset_vel(&perturb(xbar_minus, &dz))?
                - reset_vel(&perturb(xbar_minus, &(-dz)))?)
                / (2.0 * h);
            for i in 10..20 {
                d[(i, j)] = col[i];
            }
        }
    }
    let e = zplus - d * zbar;
    Ok(AffineReset { d, e, edge })
}

/// Local coordinates of `x` relative to `anchor` as a plain vector.
pub fn local_vector(x: &State, anchor: UnitQuat) -> Result<Vector20> {
    Ok(to_local(x, anchor)?.z)
}

impl LocalState {
    /// Applies an affine flow to this local state.
    pub fn flow(&self, f: &AffineFlow, u: &Input) -> LocalState {
        LocalState {
            z: f.ad * self.z + f.bd * u + f.cd,
            anchor: self.anchor,
        }
    }

    /// Applies an affine reset to this local state.
    pub fn reset(&self, r: &AffineReset) -> LocalState {
        LocalState {
            z: r.d * self.z + r.e,
            anchor: self.anchor,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::contact_jacobian;
    use crate::hybrid::integrate_step;
    use crate::mpc::recover_state;

    fn flight_state() -> State {
        let mut x = State::at_rest(Vector3::new(0.1, -0.2, 1.0));
        x.q.quat = UnitQuat::from_axis_angle(&Vector3::new(1.0, 2.0, 0.5), 0.3);
        x.v.pdot = Vector3::new(0.5, 0.1, -1.0);
        x.v.omega = Vector3::new(0.4, -0.3, 0.8);
        x.v.thetadot = Vector3::new(10.0, -4.0, 2.0);
        x.q.ell = 0.01;
        x.v.elldot = 0.2;
        x
    }

    #[test]
    fn spherical_body_has_no_orientation_sensitivity() {
        let params = ModelParams {
            i_body: Matrix3::identity() * 0.05,
            m_foot: 1e-3,
            ..ModelParams::default()
        };
        let mut x = flight_state();
        x.v.thetadot = Vector3::zeros();
        x.v.omega = Vector3::zeros();
        x.q.ell = 0.0;
        x.v.elldot = 0.0;
        let (d_eta, _, _) = attitude_jacobians(Vertex::Flight, &x, &Input::zeros(), &params).unwrap();
        assert!(d_eta.abs().max() < 1e-6, "{d_eta}");
    }

    #[test]
    fn wheel_torque_response_matches_rigid_body_formula() {
        // With the foot nearly massless, body and wheel rates obey
        // (I_b + I_w) ω̇ + I_w θ̈ = -ω×h, I_w(ω̇ + θ̈) = -u  so at rest ω̇ = u / I_b.
        let params = ModelParams {
            m_foot: 1e-4,
            k_spring: 1.0,
            b_spring: 0.0,
            ..ModelParams::default()
        };
        let x = State::at_rest(Vector3::new(0.0, 0.0, 1.0));
        let (_, _, d_u) = attitude_jacobians(Vertex::Flight, &x, &Input::zeros(), &params).unwrap();
        let ib = params.i_body;
        for i in 0..3 {
            let expected = 1.0 / ib[(i, i)];
            assert!((d_u[(i, i)] - expected).abs() / expected < 1e-2, "{d_u}");
        }
        assert!(d_u.column(3).norm() < 1e-6);
    }

    #[test]
    fn orientation_jacobian_taylor_remainder() {
        // In flight the body rate does not depend on orientation (free fall),
        // so check the stance dynamics where gravity acts through the foot.
        let params = ModelParams::default();
        let x = flight_state();
        let u = Input::new(0.2, -0.1, 0.3, 0.5);
        let vtx = Vertex::Ground;
        let (d_eta, _, _) = attitude_jacobians(vtx, &x, &u, &params).unwrap();
        assert!(d_eta.norm() > 1.0);
        let f0 = vector_field(vtx, &x, &u, &params).unwrap().fixed_rows::<3>(13).into_owned();
        let dir = Vector3::new(0.3, -0.5, 0.8).normalize();
        let err = |eps: f64| {
            let mut xp = x;
            xp.q.quat = x.q.quat * exp_map(ImQuat3(dir * eps));
            let f = vector_field(vtx, &xp, &u, &params).unwrap().fixed_rows::<3>(13).into_owned();
            (f - f0 - d_eta * dir * eps).norm()
        };
        let ratio = err(0.005) / err(0.01);
        assert!((0.2..=0.3).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn kinematic_rows_are_exact() {
        let params = ModelParams::default();
        let x = flight_state();
        let m = continuous_model(Vertex::Flight, &x, &Input::zeros(), x.q.quat, &params).unwrap();
        for i in 0..10 {
            for j in 0..20 {
                let expected = if j == i + 10 { 1.0 } else { 0.0 };
                assert_eq!(m.a[(i, j)], expected);
            }
        }
        assert!(m.c.fixed_rows::<10>(0).amax() == 0.0);
    }

    #[test]
    fn exact_flow_reproduces_free_fall() {
        // Ballistic flight without rotation is exactly affine.
        let params = ModelParams::default();
        let mut x = State::at_rest(Vector3::new(0.3, 0.2, 1.5));
        x.q.quat = UnitQuat::from_axis_angle(&Vector3::new(0.0, 1.0, 0.0), 0.2);
        x.v.pdot = Vector3::new(1.0, -0.5, 2.0);
        x.v.thetadot = Vector3::new(3.0, 0.0, -1.0);
        let u = Input::zeros();
        let h = 0.01;
        let flow = build_affine_flow(Vertex::Flight, &x, &u, h, x.q.quat, &params, Discretization::Exact).unwrap();
        let z0 = to_local(&x, x.q.quat).unwrap();
        let pred = z0.flow(&flow, &u);
        let truth = to_local(&integrate_step(Vertex::Flight, &x, &u, h, &params).unwrap(), x.q.quat).unwrap();
        assert!((pred.z - truth.z).amax() <= 1e-8, "{}", (pred.z - truth.z).amax());
    }

    #[test]
    fn liftoff_reset_is_identity() {
        let params = ModelParams::default();
        let x = flight_state();
        let r = linearize_reset(Edge::GroundToFlight, &x, x.q.quat, &params).unwrap();
        assert_eq!(r.d, Matrix20::identity());
        assert!(r.e.amax() < 1e-15);
    }

    #[test]
    fn impact_reset_annihilates_foot_velocity_to_first_order() {
        let params = ModelParams::default();
        let mut x = flight_state();
        // place the foot on the ground
        let (pf, _) = crate::dynamics::foot_kinematics(&x.q, &x.v, &params);
        x.q.p.z -= pf.z;
        let r = linearize_reset(Edge::FlightToGround, &x, x.q.quat, &params).unwrap();
        let z = to_local(&x, x.q.quat).unwrap();
        let foot_speed = |scale: f64| {
            let dz = Vector20::from_fn(|i, _| ((i * 7 % 11) as f64 - 5.0) * scale);
            let after = LocalState { z: r.d * (z.z + dz) + r.e, anchor: z.anchor };
            let xs = recover_state(&after);
            let (j, _) = contact_jacobian(&xs.q, &xs.v, &params);
            (j * xs.v.to_vector()).norm()
        };
        assert!(foot_speed(0.0) < 1e-9);
        let ratio = foot_speed(5e-4) / foot_speed(1e-3);
        assert!((0.2..=0.3).contains(&ratio), "ratio {ratio}");
        // config rows are the identity
        for i in 0..10 {
            for j in 0..20 {
                assert_eq!(r.d[(i, j)], if i == j { 1.0 } else { 0.0 });
            }
        }
    }
}
