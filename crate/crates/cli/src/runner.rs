//! Closed-loop execution of a scenario and the files it produces.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use hopper_core::dynamics::{Edge, Input, State, Vertex};
use hopper_core::hybrid::{EventRecord, HybridSim};
use hopper_core::lowlevel::{runtime_tick, ClosedLoop, MpcWorker, Snapshot};
use hopper_core::mpc::MpcOutput;
use nalgebra::Vector3;
use serde::Serialize;

use crate::reference::Reference;
use crate::scenario::{ReferenceSpec, Scenario};
use crate::RunError;

pub const TRACE_HEADER: [&str; 28] = [
    "t", "vertex", "p_x", "p_y", "p_z", "quat_w", "quat_x", "quat_y", "quat_z", "theta_1",
    "theta_2", "theta_3", "ell", "pdot_x", "pdot_y", "pdot_z", "omega_x", "omega_y", "omega_z",
    "thetadot_1", "thetadot_2", "thetadot_3", "elldot", "u_1", "u_2", "u_3", "u_4", "event_edge",
];

pub const MPC_HEADER: [&str; 15] = [
    "t", "solve_time", "sqp_iters", "qp_status", "u_ff_1", "u_ff_2", "u_ff_3", "u_ff_4",
    "quat_d_w", "quat_d_x", "quat_d_y", "quat_d_z", "omega_d_x", "omega_d_y", "omega_d_z",
];

/// Touchdowns with a tilt below this count as stable hops.
pub const STABLE_TILT: f64 = 0.35;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub duration_override: Option<f64>,
    /// Forces deterministic interleaving regardless of the scenario.
    pub force_deterministic: bool,
    /// Runs the MPC on a worker thread in wall-clock time.
    pub realtime: bool,
    /// Write a trace row every this many ticks (events are always written).
    pub log_every: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("."),
            duration_override: None,
            force_deterministic: false,
            realtime: false,
            log_every: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EventSummary {
    pub t: f64,
    pub edge: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlipSummary {
    pub start_time: Option<f64>,
    pub end_time: Option<f64>,
    /// Integrated body rate about the flip axis over the whole run, rad.
    pub net_rotation: f64,
    /// Consecutive stable touchdowns after the flip reference completed.
    pub stable_hops_after: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub name: String,
    pub duration: f64,
    pub ticks: u64,
    pub seed: u64,
    pub deterministic: bool,
    /// Number of flight-to-ground transitions.
    pub hop_count: usize,
    pub liftoff_count: usize,
    /// Largest body height of each completed flight phase.
    pub apex_heights: Vec<f64>,
    pub final_position: [f64; 3],
    pub final_reference: [f64; 2],
    pub final_position_error: f64,
    pub max_xy_excursion: f64,
    /// First time the horizontal error stayed within 0.15 m until the end.
    pub settle_time: Option<f64>,
    pub mpc_solves: usize,
    pub stale_solves: usize,
    pub mean_solve_time: f64,
    pub max_solve_time: f64,
    pub events: Vec<EventSummary>,
    pub flip: Option<FlipSummary>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: Summary,
    pub trace_path: PathBuf,
    pub mpc_path: PathBuf,
    pub summary_path: PathBuf,
}

struct Writers {
    trace: csv::Writer<BufWriter<File>>,
    mpc: csv::Writer<BufWriter<File>>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Config(format!("cannot write {}: {e}", path.display()))
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn state_row(t: f64, vertex: Vertex, x: &State, u: &Input, event: &str) -> Vec<String> {
    let mut r = vec![num(t), vertex.label().to_string()];
    r.extend(x.q.p.iter().map(|v| num(*v)));
    r.extend(x.q.quat.to_array().iter().map(|v| num(*v)));
    r.extend(x.q.theta.iter().map(|v| num(*v)));
    r.push(num(x.q.ell));
    r.extend(x.v.pdot.iter().map(|v| num(*v)));
    r.extend(x.v.omega.iter().map(|v| num(*v)));
    r.extend(x.v.thetadot.iter().map(|v| num(*v)));
    r.push(num(x.v.elldot));
    r.extend(u.iter().map(|v| num(*v)));
    r.push(event.to_string());
    r
}

fn mpc_row(t: f64, o: &MpcOutput) -> Vec<String> {
    let mut r = vec![
        num(t),
        num(o.solve_time),
        o.sqp_iters.to_string(),
        if o.stale { "stale".to_string() } else { o.qp_status.label().to_string() },
    ];
    r.extend(o.u_ff.iter().map(|v| num(*v)));
    r.extend(o.quat_d.to_array().iter().map(|v| num(*v)));
    r.extend(o.omega_d.iter().map(|v| num(*v)));
    r
}

fn tilt(x: &State) -> f64 {
    let r = x.q.quat.to_rotation_matrix();
    r[(2, 2)].clamp(-1.0, 1.0).acos()
}

/// Running statistics collected while the loop executes.
struct Stats {
    hop_count: usize,
    liftoffs: usize,
    apex: Vec<f64>,
    current_apex: f64,
    max_xy: f64,
    solves: Vec<f64>,
    stale: usize,
    events: Vec<EventSummary>,
    roll: Vector3<f64>,
    stable_after_flip: usize,
    last_outside: Option<f64>,
}

impl Stats {
    fn new() -> Self {
        Self {
            hop_count: 0,
            liftoffs: 0,
            apex: Vec::new(),
            current_apex: f64::NEG_INFINITY,
            max_xy: 0.0,
            solves: Vec::new(),
            stale: 0,
            events: Vec::new(),
            roll: Vector3::zeros(),
            stable_after_flip: 0,
            last_outside: None,
        }
    }

    fn sample(&mut self, t: f64, x: &State, vertex: Vertex, dt: f64, target_xy: Vector3<f64>) {
        if vertex == Vertex::Flight {
            self.current_apex = self.current_apex.max(x.q.p.z);
        }
        self.max_xy = self.max_xy.max(x.q.p.xy().norm());
        // Body rates are expressed in the body frame; integrate them as a
        // rotation vector to measure accumulated turning.
        self.roll += x.v.omega * dt;
        let err = (x.q.p - target_xy).xy().norm();
        if err > 0.15 {
            self.last_outside = Some(t);
        }
    }

    fn event(&mut self, e: &EventRecord, reference: &mut Reference) {
        self.events.push(EventSummary {
            t: e.t,
            edge: e.edge.label(),
        });
        match e.edge {
            Edge::FlightToGround => {
                self.hop_count += 1;
                if self.current_apex.is_finite() {
                    self.apex.push(self.current_apex);
                }
                self.current_apex = f64::NEG_INFINITY;
                if let Some(end) = reference.flip_end() {
                    if e.t > end {
                        if tilt(&e.x_minus) < STABLE_TILT {
                            self.stable_after_flip += 1;
                        } else {
                            self.stable_after_flip = 0;
                        }
                    }
                }
            }
            Edge::GroundToFlight => {
                self.liftoffs += 1;
                reference.on_liftoff(e.t);
            }
        }
    }
}

fn check_plant(t: f64, x: &State) -> Result<(), RunError> {
    if !x.is_finite() {
        return Err(RunError::Simulation(format!("non-finite state at t = {t}")));
    }
    if x.q.p.z < 0.0 {
        return Err(RunError::Simulation(format!("body hit the ground at t = {t}")));
    }
    Ok(())
}

/// Runs `scenario` and writes `<name>_trace.csv`, `<name>_mpc.csv` and
/// `<name>_summary.json` into `opts.out_dir`.
pub fn run_scenario(scenario: &Scenario, opts: &RunOptions) -> Result<RunOutcome, RunError> {
    let duration = opts.duration_override.unwrap_or(scenario.duration);
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(RunError::Config("duration override must be positive".into()));
    }
    let deterministic = opts.force_deterministic || scenario.deterministic || !opts.realtime;
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| io_err(&opts.out_dir, e))?;
    let trace_path = opts.out_dir.join(format!("{}_trace.csv", scenario.name));
    let mpc_path = opts.out_dir.join(format!("{}_mpc.csv", scenario.name));
    let summary_path = opts.out_dir.join(format!("{}_summary.json", scenario.name));
    let open = |p: &Path| -> Result<csv::Writer<BufWriter<File>>, RunError> {
        let f = File::create(p).map_err(|e| io_err(p, e))?;
        Ok(csv::Writer::from_writer(BufWriter::new(f)))
    };
    let mut w = Writers {
        trace: open(&trace_path)?,
        mpc: open(&mpc_path)?,
    };
    w.trace
        .write_record(TRACE_HEADER)
        .map_err(|e| io_err(&trace_path, e))?;
    w.mpc
        .write_record(MPC_HEADER)
        .map_err(|e| io_err(&mpc_path, e))?;

    let mut reference = Reference::new(scenario.reference.clone());
    let mut stats = Stats::new();
    let ticks = (duration / scenario.runtime.tick - 1e-9).ceil() as u64;
    let result = if deterministic {
        run_deterministic(scenario, opts, ticks, &mut reference, &mut stats, &mut w, &trace_path, &mpc_path)
    } else {
        run_realtime(scenario, opts, ticks, &mut reference, &mut stats, &mut w, &trace_path, &mpc_path)
    };
    w.trace.flush().map_err(|e| io_err(&trace_path, e))?;
    w.mpc.flush().map_err(|e| io_err(&mpc_path, e))?;
    let final_state = result?;

    let final_t = ticks as f64 * scenario.runtime.tick;
    let target = reference.target(final_t).p;
    let mean = if stats.solves.is_empty() {
        0.0
    } else {
        stats.solves.iter().sum::<f64>() / stats.solves.len() as f64
    };
    let flip = reference.flip_axis().map(|axis| FlipSummary {
        start_time: reference.flip_start(),
        end_time: reference.flip_end(),
        net_rotation: stats.roll.dot(&axis),
        stable_hops_after: stats.stable_after_flip,
    });
    let settle_time = match stats.last_outside {
        None => Some(0.0),
        Some(t) if t + scenario.runtime.tick < final_t => Some(t + scenario.runtime.tick),
        Some(_) => None,
    };
    let summary = Summary {
        name: scenario.name.clone(),
        duration,
        ticks,
        seed: scenario.seed,
        deterministic,
        hop_count: stats.hop_count,
        liftoff_count: stats.liftoffs,
        apex_heights: stats.apex,
        final_position: [final_state.q.p.x, final_state.q.p.y, final_state.q.p.z],
        final_reference: [target.x, target.y],
        final_position_error: (final_state.q.p - target).xy().norm(),
        max_xy_excursion: stats.max_xy,
        settle_time,
        mpc_solves: stats.solves.len(),
        stale_solves: stats.stale,
        mean_solve_time: mean,
        max_solve_time: stats.solves.iter().cloned().fold(0.0, f64::max),
        events: stats.events,
        flip,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    let mut f = File::create(&summary_path).map_err(|e| io_err(&summary_path, e))?;
    f.write_all(json.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| io_err(&summary_path, e))?;
    Ok(RunOutcome {
        summary,
        trace_path,
        mpc_path,
        summary_path,
    })
}

fn disturbance(spec: &ReferenceSpec) -> Option<(f64, Vector3<f64>)> {
    match spec {
        ReferenceSpec::Disturbance { impulse, time, .. } => Some((*time, Vector3::from(*impulse))),
        _ => None,
    }
}

#[allow(clippy::too_many_arguments)]
fn run_deterministic(
    scenario: &Scenario,
    opts: &RunOptions,
    ticks: u64,
    reference: &mut Reference,
    stats: &mut Stats,
    w: &mut Writers,
    trace_path: &Path,
    mpc_path: &Path,
) -> Result<State, RunError> {
    let params = scenario.model_params();
    let x0 = scenario.x0.to_state().map_err(RunError::Config)?;
    let mut cl = ClosedLoop::new(
        x0,
        scenario.x0.vertex,
        params.clone(),
        scenario.mpc,
        scenario.gains,
        scenario.low_level_config(),
        scenario.runtime,
    );
    let dt = scenario.runtime.tick;
    let mut push = disturbance(&scenario.reference);
    let log_every = opts.log_every.max(1) as u64;
    for k in 0..ticks {
        let t = cl.time();
        if let Some((tp, impulse)) = push {
            if t >= tp {
                cl.sim
                    .apply_velocity_change(impulse / params.total_mass(), Vector3::zeros());
                push = None;
            }
        }
        let snapshot = reference.clone();
        let record = cl
            .step(&move |t| snapshot.target(t))
            .map_err(|e| RunError::Simulation(format!("t = {t}: {e}")))?;
        stats.sample(t, &record.x, record.vertex, dt, reference.target(t).p);
        if k % log_every == 0 {
            w.trace
                .write_record(state_row(t, record.vertex, &record.x, &record.u, ""))
                .map_err(|e| io_err(trace_path, e))?;
        }
        if let Some(o) = &record.solved {
            stats.solves.push(o.solve_time);
            stats.stale += o.stale as usize;
            w.mpc
                .write_record(mpc_row(t, o))
                .map_err(|e| io_err(mpc_path, e))?;
        }
        for e in &record.events {
            stats.event(e, reference);
            w.trace
                .write_record(state_row(e.t, e.edge.target(), &e.x_plus, &record.u, e.edge.label()))
                .map_err(|e| io_err(trace_path, e))?;
        }
        check_plant(cl.time(), &cl.sim.x)?;
    }
    let x = cl.sim.x;
    w.trace
        .write_record(state_row(cl.time(), cl.sim.vertex, &x, &Input::zeros(), ""))
        .map_err(|e| io_err(trace_path, e))?;
    Ok(x)
}

/// Wall-clock paced simulation with the MPC on a worker thread.
#[allow(clippy::too_many_arguments)]
fn run_realtime(
    scenario: &Scenario,
    opts: &RunOptions,
    ticks: u64,
    reference: &mut Reference,
    stats: &mut Stats,
    w: &mut Writers,
    trace_path: &Path,
    mpc_path: &Path,
) -> Result<State, RunError> {
    let params = scenario.model_params();
    let x0 = scenario.x0.to_state().map_err(RunError::Config)?;
    let low = scenario.low_level_config();
    let mut sim = HybridSim::new(x0, scenario.x0.vertex, params.clone());
    let worker = MpcWorker::spawn(scenario.mpc, params.clone());
    let dt = scenario.runtime.tick;
    let mut latest = MpcOutput::hold(x0.q.quat);
    let mut push = disturbance(&scenario.reference);
    let log_every = opts.log_every.max(1) as u64;
    let start = Instant::now();
    for k in 0..ticks {
        let t = k as f64 * dt;
        let deadline = start + Duration::from_secs_f64(t);
        let now = Instant::now();
        if deadline > now {
            std::thread::sleep(deadline - now);
        }
        if let Some((tp, impulse)) = push {
            if t >= tp {
                sim.apply_velocity_change(impulse / params.total_mass(), Vector3::zeros());
                push = None;
            }
        }
        if k % scenario.runtime.mpc_every as u64 == 0 {
            let r = reference.clone();
            worker.offer(Snapshot {
                t,
                x: sim.x,
                vertex: sim.vertex,
                reference: Box::new(move |t| r.target(t)),
            });
        }
        if let Some(o) = worker.poll() {
            stats.solves.push(o.solve_time);
            stats.stale += o.stale as usize;
            w.mpc
                .write_record(mpc_row(t, &o))
                .map_err(|e| io_err(mpc_path, e))?;
            latest = o;
        }
        let x = sim.x;
        let vertex = sim.vertex;
        let u = runtime_tick(&x, vertex, &latest, &scenario.gains, &low, &params);
        let events = sim
            .advance(&u, dt, (k + 1) as f64 * dt)
            .map_err(|e| RunError::Simulation(format!("t = {t}: {e}")))?;
        stats.sample(t, &x, vertex, dt, reference.target(t).p);
        if k % log_every == 0 {
            w.trace
                .write_record(state_row(t, vertex, &x, &u, ""))
                .map_err(|e| io_err(trace_path, e))?;
        }
        for e in &events {
            stats.event(e, reference);
            w.trace
                .write_record(state_row(e.t, e.edge.target(), &e.x_plus, &u, e.edge.label()))
                .map_err(|e| io_err(trace_path, e))?;
        }
        check_plant(sim.t, &sim.x)?;
    }
    let x = sim.x;
    w.trace
        .write_record(state_row(sim.t, sim.vertex, &x, &Input::zeros(), ""))
        .map_err(|e| io_err(trace_path, e))?;
    Ok(x)
}
