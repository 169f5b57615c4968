//! The 1 kHz feedback layer and the multi-rate runtime.
//!
//! Between MPC updates the latest [`MpcOutput`] is held (zero-order hold).
//! Wheel torques come from a quaternion PD law around the MPC's desired
//! attitude plus its feedforward; the foot motor regulates spring compression
//! during flight and is passive in stance.

use std::collections::VecDeque;
use std::sync::mpsc::{self, Receiver, SyncSender, TryRecvError, TrySendError};
use std::thread::JoinHandle;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Input, ModelParams, State, Vertex};
use crate::error::{Error, Result};
use crate::geom::{im_part, UnitQuat};
use crate::hybrid::{EventRecord, HybridSim};
use crate::mpc::{MpcConfig, MpcController, MpcOutput, Target};

/// Feedback gains. `kp`, `kd` act on the attitude error in body axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GainsSpec", into = "GainsSpec")]
pub struct Gains {
    pub kp: Matrix3<f64>,
    pub kd: Matrix3<f64>,
    pub kp_foot: f64,
    pub kd_foot: f64,
}

/// Serialized form of [`Gains`]: matrices as row-major nested arrays.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GainsSpec {
    kp: [[f64; 3]; 3],
    kd: [[f64; 3]; 3],
    kp_foot: f64,
    kd_foot: f64,
}

fn rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [0, 1, 2].map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)]])
}

fn from_rows(r: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| r[i][j])
}

impl TryFrom<GainsSpec> for Gains {
    type Error = Error;

    fn try_from(s: GainsSpec) -> Result<Self> {
        let g = Gains {
            kp: from_rows(&s.kp),
            kd: from_rows(&s.kd),
            kp_foot: s.kp_foot,
            kd_foot: s.kd_foot,
        };
        g.validate()?;
        Ok(g)
    }
}

impl From<Gains> for GainsSpec {
    fn from(g: Gains) -> Self {
        GainsSpec {
            kp: rows(&g.kp),
            kd: rows(&g.kd),
            kp_foot: g.kp_foot,
            kd_foot: g.kd_foot,
        }
    }
}

impl Default for Gains {
    fn default() -> Self {
        Self {
            kp: Matrix3::from_diagonal(&Vector3::new(120.0, 120.0, 15.0)),
            kd: Matrix3::from_diagonal(&Vector3::new(4.0, 4.0, 1.0)),
            kp_foot: 40.0,
            kd_foot: 0.2,
        }
    }
}

fn is_spd(m: &Matrix3<f64>) -> bool {
    (m - m.transpose()).abs().max() <= 1e-12 && m.cholesky().is_some()
}

impl Gains {
    pub fn validate(&self) -> Result<()> {
        if !is_spd(&self.kp) || !is_spd(&self.kd) {
            return Err(Error::InvalidParameter(
                "kp and kd must be symmetric positive definite".into(),
            ));
        }
        if !(self.kp_foot >= 0.0 && self.kd_foot >= 0.0) {
            return Err(Error::InvalidParameter("foot gains must be non-negative".into()));
        }
        Ok(())
    }
}

/// Saturation limits and the foot set-point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LowLevelConfig {
    /// Wheel torque limit, N·m.
    pub u_max: f64,
    /// Foot motor torque limit, N·m.
    pub u_max_foot: f64,
    /// Spring compression the foot loop holds during flight, m.
    pub ell_set: f64,
}

impl Default for LowLevelConfig {
    fn default() -> Self {
        Self {
            u_max: 1.5,
            u_max_foot: 3.0,
            ell_set: 0.04,
        }
    }
}

/// Rates of the multi-rate loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    /// Low-level period, s.
    pub tick: f64,
    /// Low-level ticks per MPC solve.
    pub mpc_every: usize,
    /// Extra ticks before a solved MPC output becomes visible.
    pub latency_ticks: usize,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            tick: 1e-3,
            mpc_every: 10,
            latency_ticks: 0,
        }
    }
}

fn saturate(v: f64, limit: f64) -> f64 {
    v.clamp(-limit, limit)
}

/// Wheel torques `−Kp Im(q_d⁻¹ q_a) − Kd (ω_a − ω_d) + u_ff`, saturated.
pub fn attitude_feedback(
    quat_a: UnitQuat,
    omega_a: &Vector3<f64>,
    reference: &MpcOutput,
    gains: &Gains,
    u_max: f64,
) -> Vector3<f64> {
    let err = im_part(reference.quat_d.inverse() * quat_a).0;
    let u = -gains.kp * err - gains.kd * (omega_a - reference.omega_d)
        + reference.u_ff.fixed_rows::<3>(0);
    u.map(|v| saturate(v, u_max))
}

/// Foot motor torque: PD towards `ell_set` in flight, zero in stance.
pub fn foot_feedback(x: &State, vertex: Vertex, gains: &Gains, cfg: &LowLevelConfig) -> f64 {
    match vertex {
        Vertex::Ground => 0.0,
        Vertex::Flight => saturate(
            gains.kp_foot * (cfg.ell_set - x.q.ell) - gains.kd_foot * x.v.elldot,
            cfg.u_max_foot,
        ),
    }
}

/// Full input for one low-level tick given the held MPC output.
pub fn runtime_tick(
    x: &State,
    vertex: Vertex,
    latest: &MpcOutput,
    gains: &Gains,
    cfg: &LowLevelConfig,
    params: &ModelParams,
) -> Input {
    let tau = attitude_feedback(x.q.quat, &x.v.omega, latest, gains, cfg.u_max);
    // Map body torque onto the wheel axes.
    let u_w = params.wheel_axes.transpose() * tau;
    let u_w = u_w.map(|v| saturate(v, cfg.u_max));
    Input::new(u_w.x, u_w.y, u_w.z, foot_feedback(x, vertex, gains, cfg))
}

/// What happened during one low-level tick.
#[derive(Debug, Clone)]
pub struct TickRecord {
    /// Time at the start of the tick.
    pub t: f64,
    pub vertex: Vertex,
    /// State at the start of the tick.
    pub x: State,
    pub u: Input,
    pub events: Vec<EventRecord>,
    /// MPC output solved at the start of this tick, if any.
    pub solved: Option<MpcOutput>,
}

/// Deterministic closed loop: MPC solves are interleaved synchronously every
/// `mpc_every` ticks.
pub struct ClosedLoop {
    pub sim: HybridSim,
    pub mpc: MpcController,
    pub gains: Gains,
    pub low: LowLevelConfig,
    pub runtime: RuntimeConfig,
    latest: MpcOutput,
    pending: VecDeque<(u64, MpcOutput)>,
    tick: u64,
}

impl ClosedLoop {
    pub fn new(
        x0: State,
        vertex0: Vertex,
        params: ModelParams,
        mpc: MpcConfig,
        gains: Gains,
        low: LowLevelConfig,
        runtime: RuntimeConfig,
    ) -> Self {
        Self {
            sim: HybridSim::new(x0, vertex0, params.clone()),
            mpc: MpcController::new(mpc, params),
            gains,
            low,
            runtime,
            latest: MpcOutput::hold(x0.q.quat),
            pending: VecDeque::new(),
            tick: 0,
        }
    }

    pub fn latest(&self) -> &MpcOutput {
        &self.latest
    }

    pub fn ticks(&self) -> u64 {
        self.tick
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.runtime.tick
    }

    /// Advances one low-level tick.
    pub fn step(&mut self, reference: &dyn Fn(f64) -> Target) -> Result<TickRecord> {
        let t = self.time();
        let x = self.sim.x;
        let vertex = self.sim.vertex;
        if !x.is_finite() {
            return Err(Error::InvalidParameter(format!("non-finite state at t = {t}")));
        }
        let mut solved = None;
        if self.tick % self.runtime.mpc_every.max(1) as u64 == 0 {
            let out = self.mpc.step(t, &x, vertex, reference);
            self.pending
                .push_back((self.tick + self.runtime.latency_ticks as u64, out.clone()));
            solved = Some(out);
        }
        while let Some((ready, _)) = self.pending.front() {
            if *ready > self.tick {
                break;
            }
            self.latest = self.pending.pop_front().expect("front exists").1;
        }
        let u = runtime_tick(&x, vertex, &self.latest, &self.gains, &self.low, &self.sim.params);
        self.tick += 1;
        let t_next = self.time();
        let events = self.sim.advance(&u, t_next - t, t_next)?;
        Ok(TickRecord {
            t,
            vertex,
            x,
            u,
            events,
            solved,
        })
    }
}

/// Reference function that can be shipped to the MPC worker thread.
pub type SharedReference = Box<dyn Fn(f64) -> Target + Send>;

/// Request sent to the MPC worker.
pub struct Snapshot {
    pub t: f64,
    pub x: State,
    pub vertex: Vertex,
    pub reference: SharedReference,
}

/// MPC solver running on its own thread. Snapshots and outputs are exchanged
/// through single-slot channels; a snapshot offered while the worker is busy
/// is dropped, and the consumer only ever keeps the newest output.
pub struct MpcWorker {
    requests: Option<SyncSender<Snapshot>>,
    outputs: Receiver<MpcOutput>,
    handle: Option<JoinHandle<()>>,
}

impl MpcWorker {
    pub fn spawn(cfg: MpcConfig, params: ModelParams) -> Self {
        let (req_tx, req_rx) = mpsc::sync_channel::<Snapshot>(1);
        let (out_tx, out_rx) = mpsc::sync_channel::<MpcOutput>(1);
        let handle = std::thread::spawn(move || {
            let mut ctrl = MpcController::new(cfg, params);
            while let Ok(s) = req_rx.recv() {
                let out = ctrl.step(s.t, &s.x, s.vertex, &*s.reference);
                if out_tx.send(out).is_err() {
                    break;
                }
            }
        });
        Self {
            requests: Some(req_tx),
            outputs: out_rx,
            handle: Some(handle),
        }
    }

    /// Offers a snapshot; returns false if the worker is still busy.
    pub fn offer(&self, s: Snapshot) -> bool {
        match self.requests.as_ref().map(|r| r.try_send(s)) {
            Some(Ok(())) => true,
            Some(Err(TrySendError::Full(_))) | Some(Err(TrySendError::Disconnected(_))) | None => {
                false
            }
        }
    }

    /// Newest finished output, if any arrived since the last call.
    pub fn poll(&self) -> Option<MpcOutput> {
        let mut newest = None;
        loop {
            match self.outputs.try_recv() {
                Ok(o) => newest = Some(o),
                Err(TryRecvError::Empty) | Err(TryRecvError::Disconnected) => break,
            }
        }
        newest
    }
}

impl Drop for MpcWorker {
    fn drop(&mut self) {
        self.requests.take();
        // Unblock a worker waiting to deliver its last output.
        while self.outputs.try_recv().is_ok() {}
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{exp_map, ImQuat3};
    use nalgebra::Vector4;

    fn reference(q: UnitQuat, w: Vector3<f64>, uff: Vector4<f64>) -> MpcOutput {
        let mut o = MpcOutput::hold(q);
        o.omega_d = w;
        o.u_ff = uff;
        o
    }

    #[test]
    fn zero_error_returns_feedforward() {
        let q = UnitQuat::from_axis_angle(&Vector3::new(1.0, 1.0, 0.0), 0.4);
        let w = Vector3::new(0.3, -0.2, 1.0);
        let r = reference(q, w, Vector4::new(0.1, -0.2, 0.3, 0.0));
        let u = attitude_feedback(q, &w, &r, &Gains::default(), 1.5);
        assert_eq!(u, Vector3::new(0.1, -0.2, 0.3));
    }

    #[test]
    fn small_roll_error_is_linear_in_kp() {
        let g = Gains::default();
        for eps in [1e-2, 1e-3] {
            let qd = UnitQuat::from_axis_angle(&Vector3::new(0.0, 1.0, 0.0), 0.2);
            let qa = qd * exp_map(ImQuat3::new(eps, 0.0, 0.0));
            let r = reference(qd, Vector3::zeros(), Vector4::zeros());
            let u = attitude_feedback(qa, &Vector3::zeros(), &r, &g, 1e9);
            let expected = -g.kp * Vector3::new(eps, 0.0, 0.0);
            assert!((u - expected).norm() <= g.kp.norm() * eps.powi(3));
            assert!(u.x < 0.0);
        }
    }

    #[test]
    fn saturates() {
        let qd = UnitQuat::IDENTITY;
        let qa = UnitQuat::from_axis_angle(&Vector3::new(1.0, 0.0, 0.0), 1.0);
        let r = reference(qd, Vector3::zeros(), Vector4::zeros());
        let u = attitude_feedback(qa, &Vector3::new(0.0, 50.0, 0.0), &r, &Gains::default(), 1.5);
        assert!(u.amax() <= 1.5);
    }

    #[test]
    fn foot_loop() {
        let g = Gains::default();
        let cfg = LowLevelConfig::default();
        let mut x = State::default();
        x.q.ell = 0.01;
        assert_eq!(foot_feedback(&x, Vertex::Ground, &g, &cfg), 0.0);
        x.q.ell = cfg.ell_set;
        assert_eq!(foot_feedback(&x, Vertex::Flight, &g, &cfg), 0.0);
        x.q.ell = -1.0;
        assert_eq!(foot_feedback(&x, Vertex::Flight, &g, &cfg), cfg.u_max_foot);
    }

    #[test]
    fn gains_round_trip_and_reject_non_spd() {
        let g = Gains::default();
        let s = serde_json_like(&g);
        assert_eq!(s.kp[2][2], 15.0);
        let mut bad = s;
        bad.kp[0][1] = 1.0;
        assert!(Gains::try_from(bad).is_err());
        assert_eq!(Gains::try_from(s).unwrap(), g);
    }

    fn serde_json_like(g: &Gains) -> GainsSpec {
        GainsSpec::from(*g)
    }
}
