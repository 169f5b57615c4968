use hopper_core::dynamics::*;
use hopper_core::geom::{exp_map, ImQuat3, UnitQuat};
use hopper_core::lowlevel::*;
use hopper_core::mpc::{MpcConfig, MpcOutput, Target};
use nalgebra::{Vector3, Vector4};
use proptest::prelude::*;

fn quat() -> impl Strategy<Value = UnitQuat> {
    prop::array::uniform4(-1.0..1.0f64)
        .prop_filter("non-degenerate", |a| a.iter().map(|x| x * x).sum::<f64>() > 1e-3)
        .prop_map(|[w, x, y, z]| UnitQuat::new(w, x, y, z))
}

fn vec3(max: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-max..max).prop_map(Vector3::from)
}

fn output(quat_d: UnitQuat, omega_d: Vector3<f64>, u_ff: Vector3<f64>) -> MpcOutput {
    let mut o = MpcOutput::hold(quat_d);
    o.omega_d = omega_d;
    o.u_ff = Vector4::new(u_ff.x, u_ff.y, u_ff.z, 0.0);
    o
}

proptest! {
    #[test]
    fn error_law_is_left_invariant(
        qd in quat(), qa in quat(), r in quat(),
        wa in vec3(5.0), wd in vec3(5.0), ff in vec3(1.0),
    ) {
        let gains = Gains::default();
        let a = attitude_feedback(qa, &wa, &output(qd, wd, ff), &gains, 1e6);
        let b = attitude_feedback(r * qa, &wa, &output(r * qd, wd, ff), &gains, 1e6);
        prop_assert!((a - b).norm() <= 1e-9 * (1.0 + a.norm()));
    }

    #[test]
    fn saturated_torque_stays_within_limit(
        qd in quat(), qa in quat(), wa in vec3(50.0), wd in vec3(50.0),
        ff in vec3(10.0), u_max in 0.01..5.0f64,
    ) {
        let u = attitude_feedback(qa, &wa, &output(qd, wd, ff), &Gains::default(), u_max);
        prop_assert!(u.amax() <= u_max);
    }

    #[test]
    fn zero_error_passes_feedforward_through(q in quat(), w in vec3(5.0), ff in vec3(1.0)) {
        let u = attitude_feedback(q, &w, &output(q, w, ff), &Gains::default(), 1e6);
        prop_assert!((u - ff).norm() <= 1e-12);
    }
}

#[test]
fn roll_error_is_restoring_to_third_order() {
    let gains = Gains::default();
    let reference = output(UnitQuat::IDENTITY, Vector3::zeros(), Vector3::zeros());
    let mut prev = None;
    for eps in [0.2, 0.1, 0.05] {
        let qa = exp_map(ImQuat3::new(eps, 0.0, 0.0));
        let u = attitude_feedback(qa, &Vector3::zeros(), &reference, &gains, 1e6);
        assert!(u.x < 0.0);
        let rem = (u + gains.kp * Vector3::new(eps, 0.0, 0.0)).norm();
        if let Some(p) = prev {
            let ratio = rem / p;
            assert!((1.0 / 16.0..=1.0 / 4.0).contains(&ratio), "{ratio}");
        }
        prev = Some(rem);
    }
}

fn hopper_start() -> State {
    let mut x0 = State::at_rest(Vector3::new(0.0, 0.0, 0.5));
    x0.q.quat = UnitQuat::from_axis_angle(&Vector3::new(1.0, 0.3, 0.0), 0.02);
    x0
}

fn closed_loop(latency_ticks: usize) -> ClosedLoop {
    ClosedLoop::new(
        hopper_start(),
        Vertex::Flight,
        ModelParams::default(),
        MpcConfig::default(),
        Gains::default(),
        LowLevelConfig::default(),
        RuntimeConfig {
            latency_ticks,
            ..Default::default()
        },
    )
}

#[test]
fn outputs_are_held_for_one_mpc_period() {
    let mut cl = closed_loop(0);
    let reference = |_: f64| Target::upright(Vector3::zeros());
    let mut solves = 0;
    for k in 0..100u64 {
        let rec = cl.step(&reference).unwrap();
        assert_eq!(rec.solved.is_some(), k % 10 == 0, "tick {k}");
        if rec.solved.is_some() {
            solves += 1;
        }
        // The applied input is the low-level law on the held output.
        let held = cl.latest().clone();
        let u = runtime_tick(&rec.x, rec.vertex, &held, &cl.gains, &cl.low, &cl.sim.params);
        assert_eq!(u, rec.u);
    }
    assert_eq!(solves, 10);
}

#[test]
fn consecutive_ticks_share_the_reference() {
    let mut cl = closed_loop(0);
    let reference = |_: f64| Target::upright(Vector3::new(0.1, 0.0, 0.0));
    let mut last: Option<(UnitQuat, Vector3<f64>, Vector4<f64>)> = None;
    for k in 0..60u64 {
        cl.step(&reference).unwrap();
        let l = cl.latest();
        let cur = (l.quat_d, l.omega_d, l.u_ff);
        if k % 10 != 0 {
            assert_eq!(Some(cur), last, "tick {k}");
        }
        last = Some(cur);
    }
}

/// Runs hop-in-place for 15 s and returns the apex height of every flight.
fn apex_heights(latency_ticks: usize) -> (Vec<f64>, f64) {
    let mut cl = closed_loop(latency_ticks);
    let reference = |_: f64| Target::upright(Vector3::zeros());
    let mut apex = Vec::new();
    let mut current = f64::NEG_INFINITY;
    let mut max_xy: f64 = 0.0;
    for _ in 0..15_000 {
        let rec = cl.step(&reference).unwrap();
        if rec.vertex == Vertex::Flight {
            current = current.max(rec.x.q.p.z);
        }
        max_xy = max_xy.max(rec.x.q.p.xy().norm());
        for e in &rec.events {
            if e.edge == Edge::FlightToGround {
                apex.push(current);
                current = f64::NEG_INFINITY;
            }
        }
    }
    (apex, max_xy)
}

fn assert_steady_apex(apex: &[f64]) {
    assert!(apex.len() >= 31, "only {} hops", apex.len());
    let window = &apex[10..=30];
    let mean = window.iter().sum::<f64>() / window.len() as f64;
    let spread = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - window.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(spread <= 0.1 * mean, "apex spread {spread} around {mean}");
}

#[test]
fn hop_in_place_apex_is_steady() {
    let (apex, max_xy) = apex_heights(0);
    assert_steady_apex(&apex);
    assert!(max_xy <= 0.3);
}

#[test]
fn one_period_of_extra_latency_keeps_hopping_steady() {
    let (apex, max_xy) = apex_heights(10);
    assert_steady_apex(&apex);
    assert!(max_xy <= 0.3);
}

#[test]
fn worker_thread_returns_solves() {
    let params = ModelParams::default();
    let worker = MpcWorker::spawn(MpcConfig::default(), params);
    let x = hopper_start();
    assert!(worker.offer(Snapshot {
        t: 0.0,
        x,
        vertex: Vertex::Flight,
        reference: Box::new(|_| Target::upright(Vector3::zeros())),
    }));
    let mut got = None;
    for _ in 0..2000 {
        if let Some(o) = worker.poll() {
            got = Some(o);
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(1));
    }
    let out = got.expect("worker answered within two seconds");
    assert!(!out.stale);
    assert!(out.u_ff.iter().all(|v| v.is_finite()));
}
