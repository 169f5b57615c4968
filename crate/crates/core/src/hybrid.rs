//! Event-detecting execution of the flight/ground hybrid system.
//!
//! Continuous arcs are integrated with a Munthe-Kaas RK4 scheme: classical RK4
//! on the Euclidean coordinates, and the quaternion advanced by one Lie-Euler
//! step with the RK4-averaged (dexp-corrected) algebra rate. Guard crossings
//! are located by bisection on the step fraction.

use nalgebra::Vector3;

use crate::dynamics::{
    guard_value, reset_map, vector_field, Edge, Input, ModelParams, State, Vector20, Vertex,
};
use crate::error::{Error, Result};
use crate::geom::{dexp_inv, exp_map, lie_euler_step, ImQuat3};

pub const EVENT_TOL: f64 = 1e-9;
pub const MAX_BISECTIONS: usize = 60;
pub const MAX_EVENTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub vertex: Vertex,
    pub x: State,
    pub u: Input,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub t: f64,
    pub edge: Edge,
    pub x_minus: State,
    pub x_plus: State,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HybridTrace {
    pub samples: Vec<Sample>,
    pub events: Vec<EventRecord>,
}

impl HybridTrace {
    pub fn count(&self, edge: Edge) -> usize {
        self.events.iter().filter(|e| e.edge == edge).count()
    }
}

/// `x` moved along the tangent increment `delta` (same layout as the vector
/// field) with the orientation increment supplied in algebra coordinates.
fn displace(x: &State, delta: &Vector20, rot: ImQuat3) -> State {
    let mut out = *x;
    out.q.p += delta.fixed_rows::<3>(0);
    out.q.quat = x.q.quat * exp_map(rot);
    out.q.theta += delta.fixed_rows::<3>(6);
    out.q.ell += delta[9];
    out.v.pdot += delta.fixed_rows::<3>(10);
    out.v.omega += delta.fixed_rows::<3>(13);
    out.v.thetadot += delta.fixed_rows::<3>(16);
    out.v.elldot += delta[19];
    out
}

fn algebra_rate(k: &Vector20) -> ImQuat3 {
    ImQuat3::from_body_rate(&Vector3::new(k[3], k[4], k[5]))
}

/// One RK4 step of length `h` inside vertex `vtx` with the input held constant.
pub fn integrate_step(
    vtx: Vertex,
    x: &State,
    u: &Input,
    h: f64,
    params: &ModelParams,
) -> Result<State> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {h}")));
    }
    let k1 = vector_field(vtx, x, u, params)?;
    let w1 = algebra_rate(&k1);

    let th2 = w1 * (0.5 * h);
    let k2 = vector_field(vtx, &displace(x, &(k1 * (0.5 * h)), th2), u, params)?;
    let w2 = dexp_inv(th2, algebra_rate(&k2));

    let th3 = w2 * (0.5 * h);
    let k3 = vector_field(vtx, &displace(x, &(k2 * (0.5 * h)), th3), u, params)?;
    let w3 = dexp_inv(th3, algebra_rate(&k3));

    let th4 = w3 * h;
    let k4 = vector_field(vtx, &displace(x, &(k3 * h), th4), u, params)?;
    let w4 = dexp_inv(th4, algebra_rate(&k4));

    let incr = (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    let w_avg = (w1 + w2 * 2.0 + w3 * 2.0 + w4) * (1.0 / 6.0);
    let mut out = displace(x, &incr, ImQuat3::zero());
    out.q.quat = lie_euler_step(x.q.quat, w_avg, h);
    Ok(out)
}

/// Locates a guard crossing of `vtx` within a step of length `h`.
///
/// Returns the time from the start of the step and the state on the guard, or
/// `None` if the guard is not crossed in the active direction.
pub fn locate_event(
    vtx: Vertex,
    x_before: &State,
    u: &Input,
    h: f64,
    params: &ModelParams,
) -> Result<Option<(f64, State)>> {
    let (g0, _) = guard_value(vtx, x_before, params);
    let x_end = integrate_step(vtx, x_before, u, h, params)?;
    let (g1, _) = guard_value(vtx, &x_end, params);
    if !(g0 > 0.0 && g1 <= 0.0) {
        return Ok(None);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let (mut s, mut x_hit, mut g) = (1.0, x_end, g1);
    let mut iterations = 0;
    while g.abs() > EVENT_TOL {
        if iterations == MAX_BISECTIONS {
            return Err(Error::ConvergenceFailure {
                iterations,
                residual: g.abs(),
            });
        }
        s = 0.5 * (lo + hi);
        x_hit = integrate_step(vtx, x_before, u, s * h, params)?;
        g = guard_value(vtx, &x_hit, params).0;
        if g > 0.0 {
            lo = s;
        } else {
            hi = s;
        }
        iterations += 1;
    }
    let (_, rate_ok) = guard_value(vtx, &x_hit, params);
    if !rate_ok {
        return Ok(None);
    }
    Ok(Some((s * h, x_hit)))
}

/// Stateful stepper used by [`simulate`] and by the closed-loop runtime.
#[derive(Debug, Clone)]
pub struct HybridSim {
    pub t: f64,
    pub vertex: Vertex,
    pub x: State,
    pub params: ModelParams,
    events: usize,
}

impl HybridSim {
    pub fn new(x0: State, vertex: Vertex, params: ModelParams) -> Self {
        Self {
            t: 0.0,
            vertex,
            x: x0,
            params,
            events: 0,
        }
    }

    /// Advances by `dt` with `u` held, resolving any guard crossings on the way.
    /// The clock is set to `t_end` afterwards so that long runs do not drift.
    pub fn advance(&mut self, u: &Input, dt: f64, t_end: f64) -> Result<Vec<EventRecord>> {
        let mut out = Vec::new();
        let mut remaining = dt;
        let mut elapsed = 0.0;
        while remaining > 1e-14 {
            match locate_event(self.vertex, &self.x, u, remaining, &self.params)? {
                None => {
                    self.x = integrate_step(self.vertex, &self.x, u, remaining, &self.params)?;
                    break;
                }
                Some((t_hit, x_minus)) => {
                    let edge = self.vertex.outgoing();
                    let x_plus = reset_map(edge, &x_minus, &self.params)?;
                    elapsed += t_hit;
                    remaining -= t_hit;
                    out.push(EventRecord {
                        t: self.t + elapsed,
                        edge,
                        x_minus,
                        x_plus,
                    });
                    self.events += 1;
                    if self.events > MAX_EVENTS {
                        return Err(Error::MaxEventsExceeded { limit: MAX_EVENTS });
                    }
                    self.x = x_plus;
                    self.vertex = edge.target();
                }
            }
        }
        self.t = t_end;
        Ok(out)
    }

    /// Applies an instantaneous change of generalized velocity (e.g. a push).
    pub fn apply_velocity_change(&mut self, dpdot: Vector3<f64>, domega: Vector3<f64>) {
        self.x.v.pdot += dpdot;
        self.x.v.omega += domega;
    }
}

/// Runs the hybrid system from `x0` for `duration` seconds with a controller
/// sampled every `dt` and held in between.
pub fn simulate<F>(
    x0: &State,
    vertex0: Vertex,
    mut controller: F,
    duration: f64,
    params: &ModelParams,
    dt: f64,
) -> Result<HybridTrace>
where
    F: FnMut(f64, Vertex, &State) -> Input,
{
    if !(dt > 0.0) || !(duration > 0.0) {
        return Err(Error::InvalidParameter(
            "duration and dt must be positive".into(),
        ));
    }
    let steps = (duration / dt - 1e-9).ceil() as usize;
    let mut sim = HybridSim::new(*x0, vertex0, params.clone());
    let mut trace = HybridTrace::default();
    for k in 0..steps {
        let t = k as f64 * dt;
        let u = controller(t, sim.vertex, &sim.x);
        trace.samples.push(Sample {
            t,
            vertex: sim.vertex,
            x: sim.x,
            u,
        });
        let t_next = ((k + 1) as f64 * dt).min(duration);
        let events = sim.advance(&u, t_next - t, t_next)?;
        trace.events.extend(events);
    }
    let u = controller(sim.t, sim.vertex, &sim.x);
    trace.samples.push(Sample {
        t: sim.t,
        vertex: sim.vertex,
        x: sim.x,
        u,
    });
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::foot_kinematics;
    use crate::geom::UnitQuat;

    fn zero(_: f64, _: Vertex, _: &State) -> Input {
        Input::zeros()
    }

    #[test]
    fn free_fall_matches_ballistics() {
        let params = ModelParams::default();
        let mut x = State::at_rest(nalgebra::Vector3::new(0.0, 0.0, 2.0));
        for _ in 0..100 {
            x = integrate_step(Vertex::Flight, &x, &Input::zeros(), 1e-3, &params).unwrap();
        }
        let expected = 2.0 - 0.5 * params.gravity * 0.1 * 0.1;
        assert!((x.q.p.z - expected).abs() <= 1e-6);
    }

    #[test]
    fn full_revolution_returns_to_start() {
        // Spinning about the leg axis keeps the foot on the axis, so the body
        // rate stays constant regardless of the foot mass.
        let params = ModelParams::default();
        let mut x = State::at_rest(nalgebra::Vector3::new(0.0, 0.0, 100.0));
        x.v.omega = nalgebra::Vector3::new(0.0, 0.0, 2.0 * std::f64::consts::PI);
        let q0 = x.q.quat;
        for _ in 0..1000 {
            x = integrate_step(Vertex::Flight, &x, &Input::zeros(), 1e-3, &params).unwrap();
        }
        assert!(x.q.quat.rotation_distance(&q0) <= 1e-6);
        assert!((x.q.quat.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rk4_error_scales_with_fourth_power() {
        let params = ModelParams::default();
        let mut x = State::at_rest(nalgebra::Vector3::new(0.0, 0.0, 2.0));
        x.v.omega = nalgebra::Vector3::new(1.0, -2.0, 0.5);
        x.v.thetadot = nalgebra::Vector3::new(5.0, 2.0, -3.0);
        x.q.ell = 0.01;
        let u = Input::new(0.3, -0.2, 0.1, 0.0);
        let flat = |s: &State| {
            let mut v = s.v.to_vector().as_slice().to_vec();
            v.extend_from_slice(s.q.p.as_slice());
            v.extend_from_slice(&s.q.quat.to_array());
            v.push(s.q.ell);
            v
        };
        let mut reference = x;
        for _ in 0..256 {
            reference = integrate_step(Vertex::Flight, &reference, &u, 0.02 / 256.0, &params).unwrap();
        }
        let err = |h: f64| {
            let steps = (0.02 / h).round() as usize;
            let y = (0..steps).fold(x, |s, _| {
                integrate_step(Vertex::Flight, &s, &u, h, &params).unwrap()
            });
            flat(&y)
                .iter()
                .zip(flat(&reference))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        // global error of a fourth order method: ~16x per halving
        let ratio = err(0.01) / err(0.005);
        assert!(ratio > 12.0 && ratio < 20.0, "ratio {ratio}");
    }

    #[test]
    fn no_crossing_means_no_event() {
        let params = ModelParams::default();
        let x = State::at_rest(nalgebra::Vector3::new(0.0, 0.0, 1.0));
        let ev = locate_event(Vertex::Flight, &x, &Input::zeros(), 1e-3, &params).unwrap();
        assert!(ev.is_none());
    }

    #[test]
    fn free_fall_impact_time() {
        let params = ModelParams::default();
        let x = State::at_rest(nalgebra::Vector3::new(0.0, 0.0, params.leg_length + 0.1));
        let trace = simulate(&x, Vertex::Flight, zero, 0.2, &params, 1e-3).unwrap();
        let first = &trace.events[0];
        assert_eq!(first.edge, Edge::FlightToGround);
        let expected = (0.2 / params.gravity).sqrt();
        assert!((first.t - expected).abs() <= 1e-6, "{} vs {expected}", first.t);
        let (pf, _) = foot_kinematics(&first.x_minus.q, &first.x_minus.v, &params);
        assert!(pf.z.abs() <= EVENT_TOL);
    }

    #[test]
    fn grazing_is_not_an_event() {
        let params = ModelParams::default();
        // foot rises out of the ground plane: value crosses upward only
        let mut x = State::at_rest(nalgebra::Vector3::new(0.0, 0.0, params.leg_length + 1e-4));
        x.v.pdot.z = 0.5;
        let ev = locate_event(Vertex::Flight, &x, &Input::zeros(), 1e-3, &params).unwrap();
        assert!(ev.is_none());
    }

    #[test]
    fn short_horizon_has_no_events() {
        let params = ModelParams::default();
        let x = State::at_rest(nalgebra::Vector3::new(0.0, 0.0, params.leg_length + 0.2));
        let trace = simulate(&x, Vertex::Flight, zero, 0.05, &params, 1e-3).unwrap();
        assert!(trace.events.is_empty());
        assert_eq!(trace.samples.len(), 51);
        assert!(trace.samples.windows(2).all(|w| w[0].t < w[1].t));
    }

    #[test]
    fn passive_drop_bounces_with_decaying_apex() {
        let params = ModelParams::default();
        let x = State::at_rest(nalgebra::Vector3::new(0.0, 0.0, params.leg_length + 0.2));
        let trace = simulate(&x, Vertex::Flight, zero, 2.0, &params, 1e-3).unwrap();
        assert!(trace.events.len() >= 4, "{} events", trace.events.len());
        for (i, e) in trace.events.iter().enumerate() {
            let expected = if i % 2 == 0 { Edge::FlightToGround } else { Edge::GroundToFlight };
            assert_eq!(e.edge, expected);
            let (g, ok) = guard_value(e.edge.source(), &e.x_minus, &params);
            assert!(g.abs() <= EVENT_TOL && ok);
        }
        let mut apexes = Vec::new();
        let mut best = f64::NEG_INFINITY;
        for w in trace.samples.windows(2) {
            if w[0].vertex == Vertex::Flight {
                best = best.max(w[0].x.q.p.z);
            }
            if w[0].vertex == Vertex::Flight && w[1].vertex == Vertex::Ground {
                apexes.push(best);
                best = f64::NEG_INFINITY;
            }
        }
        assert!(apexes.len() >= 2);
        assert!(apexes.windows(2).all(|w| w[1] < w[0]), "{apexes:?}");
    }

    #[test]
    fn event_times_refine_consistently() {
        let params = ModelParams::default();
        let mut x = State::at_rest(nalgebra::Vector3::new(0.0, 0.0, params.leg_length + 0.2));
        x.q.quat = UnitQuat::from_axis_angle(&nalgebra::Vector3::x(), 0.05);
        let a = simulate(&x, Vertex::Flight, zero, 1.0, &params, 1e-3).unwrap();
        let b = simulate(&x, Vertex::Flight, zero, 1.0, &params, 5e-4).unwrap();
        assert_eq!(a.events.len(), b.events.len());
        for (ea, eb) in a.events.iter().zip(&b.events) {
            assert_eq!(ea.edge, eb.edge);
            assert!((ea.t - eb.t).abs() <= 1e-4, "{} vs {}", ea.t, eb.t);
        }
    }

    #[test]
    fn runs_are_bit_identical() {
        let params = ModelParams::default();
        let x = State::at_rest(nalgebra::Vector3::new(0.0, 0.0, params.leg_length + 0.15));
        let ctl = |t: f64, _: Vertex, _: &State| Input::new(0.2 * t.sin(), 0.1, -0.1, 0.0);
        let a = simulate(&x, Vertex::Flight, ctl, 0.8, &params, 1e-3).unwrap();
        let b = simulate(&x, Vertex::Flight, ctl, 0.8, &params, 1e-3).unwrap();
        assert_eq!(a, b);
    }
}
