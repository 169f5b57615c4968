//! Time-indexed targets for the controller.

use hopper_core::geom::{exp_map, ImQuat3, UnitQuat};
use hopper_core::mpc::Target;
use nalgebra::Vector3;

use crate::scenario::ReferenceSpec;

/// A reference plus the little bit of state a flip needs (its start is tied
/// to the first liftoff after the requested time).
#[derive(Debug, Clone)]
pub struct Reference {
    spec: ReferenceSpec,
    flip_start: Option<f64>,
}

fn smoothstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

fn horizontal(p: [f64; 2]) -> Vector3<f64> {
    Vector3::new(p[0], p[1], 0.0)
}

impl Reference {
    pub fn new(spec: ReferenceSpec) -> Self {
        Self {
            spec,
            flip_start: None,
        }
    }

    pub fn target(&self, t: f64) -> Target {
        match &self.spec {
            ReferenceSpec::Setpoint { p } => Target::upright(horizontal(*p)),
            ReferenceSpec::Waypoints { points } => {
                let first = &points[0];
                let p = if t <= first.t {
                    first.p
                } else {
                    match points.windows(2).find(|w| t < w[1].t) {
                        Some(w) => {
                            let s = (t - w[0].t) / (w[1].t - w[0].t);
                            [
                                w[0].p[0] + s * (w[1].p[0] - w[0].p[0]),
                                w[0].p[1] + s * (w[1].p[1] - w[0].p[1]),
                            ]
                        }
                        None => points[points.len() - 1].p,
                    }
                };
                Target::upright(horizontal(p))
            }
            ReferenceSpec::Flip {
                axis,
                count,
                duration,
                p,
                ..
            } => {
                let quat = match self.flip_start {
                    None => UnitQuat::IDENTITY,
                    Some(t0) => {
                        let a = Vector3::from(*axis).normalize();
                        // A full physical turn is a half-turn in the algebra.
                        let angle = std::f64::consts::PI * *count as f64 * smoothstep((t - t0) / duration);
                        exp_map(ImQuat3(a * angle))
                    }
                };
                Target {
                    p: horizontal(*p),
                    quat,
                }
            }
            ReferenceSpec::Disturbance { p, .. } => Target::upright(horizontal(*p)),
        }
    }

    /// Informs the reference of a liftoff at time `t`.
    pub fn on_liftoff(&mut self, t: f64) {
        if let ReferenceSpec::Flip { start, .. } = &self.spec {
            if self.flip_start.is_none() && t >= *start {
                self.flip_start = Some(t);
            }
        }
    }

    pub fn flip_start(&self) -> Option<f64> {
        self.flip_start
    }

    /// Time at which the flip reference completes, once triggered.
    pub fn flip_end(&self) -> Option<f64> {
        match (&self.spec, self.flip_start) {
            (ReferenceSpec::Flip { duration, .. }, Some(t0)) => Some(t0 + duration),
            _ => None,
        }
    }

    /// Unit flip axis, if this is a flip.
    pub fn flip_axis(&self) -> Option<Vector3<f64>> {
        match &self.spec {
            ReferenceSpec::Flip { axis, .. } => Some(Vector3::from(*axis).normalize()),
            _ => None,
        }
    }

    pub fn spec(&self) -> &ReferenceSpec {
        &self.spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Waypoint;

    #[test]
    fn waypoints_interpolate_and_hold() {
        let r = Reference::new(ReferenceSpec::Waypoints {
            points: vec![
                Waypoint { t: 1.0, p: [0.0, 0.0] },
                Waypoint { t: 3.0, p: [1.0, -2.0] },
            ],
        });
        assert_eq!(r.target(0.0).p, Vector3::zeros());
        assert!((r.target(2.0).p - Vector3::new(0.5, -1.0, 0.0)).norm() < 1e-15);
        assert_eq!(r.target(10.0).p, Vector3::new(1.0, -2.0, 0.0));
    }

    #[test]
    fn flip_starts_at_first_liftoff_and_completes_a_turn() {
        let mut r = Reference::new(ReferenceSpec::Flip {
            axis: [2.0, 0.0, 0.0],
            count: 1,
            start: 1.0,
            duration: 0.3,
            p: [0.0, 0.0],
        });
        r.on_liftoff(0.5);
        assert_eq!(r.flip_start(), None);
        r.on_liftoff(1.2);
        r.on_liftoff(1.7);
        assert_eq!(r.flip_start(), Some(1.2));
        assert_eq!(r.target(1.0).quat, UnitQuat::IDENTITY);
        let mid = r.target(1.35).quat;
        assert!((mid.angle() - std::f64::consts::PI).abs() < 1e-9);
        let end = r.target(2.0).quat;
        // Physically upright again, on the other sheet of the double cover.
        assert!((end.w() + 1.0).abs() < 1e-12);
    }
}
