//! Analytic trajectories with exact first and second derivatives.

use std::f64::consts::{FRAC_PI_2, PI};
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value with first and second time derivatives, propagated through
/// arithmetic (second-order forward-mode differentiation).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub d: f64,
    pub dd: f64,
}

impl Jet {
    pub fn constant(v: f64) -> Self {
        Self { v, d: 0.0, dd: 0.0 }
    }

    /// `a t + b` as a function of time.
    pub fn affine(t: f64, a: f64, b: f64) -> Self {
        Self {
            v: a * t + b,
            d: a,
            dd: 0.0,
        }
    }

    pub fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        Self {
            v: s,
            d: c * self.d,
            dd: c * self.dd - s * self.d * self.d,
        }
    }

    pub fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        Self {
            v: c,
            d: -s * self.d,
            dd: -s * self.dd - c * self.d * self.d,
        }
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        Jet {
            v: self.v + o.v,
            d: self.d + o.d,
            dd: self.dd + o.dd,
        }
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        self + (-o)
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        Jet {
            v: -self.v,
            d: -self.d,
            dd: -self.dd,
        }
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        Jet {
            v: self.v * o.v,
            d: self.d * o.v + self.v * o.d,
            dd: self.dd * o.v + 2.0 * self.d * o.d + self.v * o.dd,
        }
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(self, k: f64) -> Jet {
        Jet {
            v: self.v * k,
            d: self.d * k,
            dd: self.dd * k,
        }
    }
}

impl Add<f64> for Jet {
    type Output = Jet;
    fn add(self, k: f64) -> Jet {
        Jet { v: self.v + k, ..self }
    }
}

/// Pose, its derivatives and the body-frame angular rate at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kinematics {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    /// Body to world.
    pub attitude: UnitQuaternion<f64>,
    /// Angular velocity in the body frame (rad/s).
    pub body_rate: Vector3<f64>,
}

/// Assembles kinematics from position jets and Z-Y-X Euler angle jets.
fn kinematics(p: [Jet; 3], roll: Jet, pitch: Jet, yaw: Jet) -> Kinematics {
    let (sr, cr) = roll.v.sin_cos();
    let (sp, cp) = pitch.v.sin_cos();
    let body_rate = Vector3::new(
        roll.d - yaw.d * sp,
        pitch.d * cr + yaw.d * sr * cp,
        -pitch.d * sr + yaw.d * cr * cp,
    );
    Kinematics {
        position: Vector3::new(p[0].v, p[1].v, p[2].v),
        velocity: Vector3::new(p[0].d, p[1].d, p[2].d),
        acceleration: Vector3::new(p[0].dd, p[1].dd, p[2].dd),
        attitude: UnitQuaternion::from_euler_angles(roll.v, pitch.v, yaw.v),
        body_rate,
    }
}

/// `x^3 (10 - 15 x + 6 x^2)` on `[0, 1]`, 0 before, 1 after; zero first and
/// second derivatives at both ends.
fn smootherstep(x: Jet) -> Jet {
    if x.v <= 0.0 {
        Jet::constant(0.0)
    } else if x.v >= 1.0 {
        Jet::constant(1.0)
    } else {
        let x3 = x * x * x;
        x3 * (Jet::constant(10.0) - x * 15.0 + x * x * 6.0)
    }
}

/// Stop-and-go progress along a segment: `u - sin(2 pi u) / (2 pi)`, with
/// zero velocity and acceleration at both ends.
fn segment_progress(u: Jet) -> Jet {
    u - (u * (2.0 * PI)).sin() * (1.0 / (2.0 * PI))
}

fn default_hold() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectorySpec {
    /// Hovering at a fixed pose.
    Static {
        position: [f64; 3],
        yaw: f64,
        duration: f64,
    },
    /// Horizontal rectangle flown counter-clockwise from `origin`, stopping
    /// at each corner, facing a fixed heading with a small yaw swing.
    Rectangle {
        origin: [f64; 3],
        length: f64,
        width: f64,
        lap_time: f64,
        laps: usize,
        yaw: f64,
        yaw_amplitude: f64,
        yaw_period: f64,
        #[serde(default = "default_hold")]
        hold: f64,
    },
    /// Hand-held style Lissajous wobble around `center`, faded in after the
    /// initial hold.
    Lissajous {
        center: [f64; 3],
        amplitude: [f64; 3],
        frequency: [f64; 3],
        yaw: f64,
        yaw_amplitude: f64,
        yaw_frequency: f64,
        tilt_amplitude: f64,
        duration: f64,
        #[serde(default = "default_hold")]
        hold: f64,
    },
    /// Level circle at constant speed, facing along the direction of
    /// travel.
    Circle {
        center: [f64; 3],
        radius: f64,
        rate: f64,
        duration: f64,
    },
}

impl TrajectorySpec {
    /// The default rectangle flight: 4.8 m x 1.95 m at 1 m height, one lap,
    /// 60 s in total.
    pub fn rectangle_flight() -> Self {
        TrajectorySpec::Rectangle {
            origin: [0.0, 0.0, 1.0],
            length: 4.8,
            width: 1.95,
            lap_time: 59.0,
            laps: 1,
            yaw: FRAC_PI_2,
            yaw_amplitude: 0.08,
            yaw_period: 14.75,
            hold: 1.0,
        }
    }

    pub fn duration(&self) -> f64 {
        match self {
            TrajectorySpec::Static { duration, .. } => *duration,
            TrajectorySpec::Rectangle { lap_time, laps, hold, .. } => hold + lap_time * *laps as f64,
            TrajectorySpec::Lissajous { duration, .. } => *duration,
            TrajectorySpec::Circle { duration, .. } => *duration,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            TrajectorySpec::Static { duration, .. } => *duration > 0.0,
            TrajectorySpec::Rectangle {
                length,
                width,
                lap_time,
                laps,
                yaw_period,
                hold,
                ..
            } => *length > 0.0 && *width > 0.0 && *lap_time > 0.0 && *laps > 0 && *yaw_period > 0.0 && *hold >= 0.0,
            TrajectorySpec::Lissajous { duration, hold, .. } => *duration > *hold && *hold >= 0.0,
            TrajectorySpec::Circle { radius, duration, .. } => *radius > 0.0 && *duration > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid trajectory specification {self:?}")))
        }
    }

    /// Length of one lap of a rectangle (m); `None` for other kinds.
    pub fn lap_length(&self) -> Option<f64> {
        match self {
            TrajectorySpec::Rectangle { length, width, .. } => Some(2.0 * (length + width)),
            _ => None,
        }
    }

    pub fn kinematics(&self, t: f64) -> Kinematics {
        let zero = Jet::constant(0.0);
        match self {
            TrajectorySpec::Static { position, yaw, .. } => kinematics(
                position.map(Jet::constant),
                zero,
                zero,
                Jet::constant(*yaw),
            ),
            TrajectorySpec::Rectangle {
                origin,
                length,
                width,
                lap_time,
                laps,
                yaw,
                yaw_amplitude,
                yaw_period,
                hold,
            } => {
                let perimeter = 2.0 * (length + width);
                let sides = [(*length, [1.0, 0.0]), (*width, [0.0, 1.0]), (*length, [-1.0, 0.0]), (*width, [0.0, -1.0])];
                let tau = (t - hold).clamp(0.0, lap_time * *laps as f64);
                let mut in_lap = tau - (tau / lap_time).floor() * lap_time;
                if tau >= lap_time * *laps as f64 {
                    in_lap = *lap_time;
                }
                let mut corner = [origin[0], origin[1]];
                let mut xy = [Jet::constant(origin[0]), Jet::constant(origin[1])];
                let mut start = 0.0;
                for (len, dir) in sides {
                    let dur = lap_time * len / perimeter;
                    if in_lap <= start + dur {
                        let u = Jet::affine(in_lap, 1.0 / dur, -start / dur);
                        let s = segment_progress(u) * len;
                        xy = [s * dir[0] + corner[0], s * dir[1] + corner[1]];
                        break;
                    }
                    corner = [corner[0] + dir[0] * len, corner[1] + dir[1] * len];
                    xy = [Jet::constant(corner[0]), Jet::constant(corner[1])];
                    start += dur;
                }
                let yaw_jet = if t <= *hold {
                    Jet::constant(*yaw)
                } else {
                    let phase = Jet::affine(t - hold, 2.0 * PI / yaw_period, 0.0);
                    (Jet::constant(1.0) - phase.cos()) * *yaw_amplitude + *yaw
                };
                kinematics([xy[0], xy[1], Jet::constant(origin[2])], zero, zero, yaw_jet)
            }
            TrajectorySpec::Lissajous {
                center,
                amplitude,
                frequency,
                yaw,
                yaw_amplitude,
                yaw_frequency,
                tilt_amplitude,
                hold,
                ..
            } => {
                let tau = t - hold;
                let env = smootherstep(Jet::affine(tau, 0.5, 0.0));
                let wave = |f: f64, phase: f64| Jet::affine(tau, 2.0 * PI * f, phase).sin();
                let p = [0, 1, 2].map(|i| env * wave(frequency[i], 0.7 * i as f64) * amplitude[i] + center[i]);
                let yaw_jet = env * wave(*yaw_frequency, 0.3) * *yaw_amplitude + *yaw;
                let roll = env * wave(0.23, 1.1) * *tilt_amplitude;
                let pitch = env * wave(0.17, 2.0) * *tilt_amplitude;
                kinematics(p, roll, pitch, yaw_jet)
            }
            TrajectorySpec::Circle {
                center,
                radius,
                rate,
                ..
            } => {
                let angle = Jet::affine(t, *rate, 0.0);
                let p = [angle.cos() * *radius + center[0], angle.sin() * *radius + center[1], Jet::constant(center[2])];
                kinematics(p, zero, zero, angle + FRAC_PI_2)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_log;
    use approx::assert_relative_eq;

    fn lissajous() -> TrajectorySpec {
        TrajectorySpec::Lissajous {
            center: [1.5, 2.5, 1.2],
            amplitude: [0.4, 0.5, 0.2],
            frequency: [0.07, 0.11, 0.13],
            yaw: 0.0,
            yaw_amplitude: 0.3,
            yaw_frequency: 0.05,
            tilt_amplitude: 0.1,
            duration: 30.0,
            hold: 1.0,
        }
    }

    /// Central differences of position and attitude reproduce the analytic
    /// velocity, acceleration and body rate.
    fn check_derivatives(traj: &TrajectorySpec, times: &[f64]) {
        let h = 1e-4;
        for &t in times {
            let k = traj.kinematics(t);
            let (a, b) = (traj.kinematics(t - h), traj.kinematics(t + h));
            let vel = (b.position - a.position) / (2.0 * h);
            let acc = (b.position - 2.0 * k.position + a.position) / (h * h);
            let rate = so3_log(&(a.attitude.inverse() * b.attitude)) / (2.0 * h);
            assert!((vel - k.velocity).amax() < 1e-6, "vel at {t}");
            assert!((acc - k.acceleration).amax() < 1e-4, "acc at {t}: {acc} vs {}", k.acceleration);
            assert!((rate - k.body_rate).amax() < 1e-6, "rate at {t}");
        }
    }

    #[test]
    fn jet_arithmetic() {
        // f(t) = t^2 sin(t) at t = 0.7.
        let t = Jet::affine(0.7, 1.0, 0.0);
        let f = t * t * t.sin();
        let (s, c) = 0.7f64.sin_cos();
        assert_relative_eq!(f.v, 0.49 * s);
        assert_relative_eq!(f.d, 1.4 * s + 0.49 * c, epsilon = 1e-14);
        assert_relative_eq!(f.dd, 2.0 * s + 2.8 * c - 0.49 * s, epsilon = 1e-14);
    }

    #[test]
    fn derivatives_are_consistent() {
        let times: Vec<f64> = (0..60).map(|i| 0.37 + i as f64 * 0.49).collect();
        check_derivatives(&lissajous(), &times);
        check_derivatives(&TrajectorySpec::rectangle_flight(), &times);
        check_derivatives(
            &TrajectorySpec::Circle {
                center: [0.0, 0.0, 1.0],
                radius: 2.0,
                rate: 0.4,
                duration: 20.0,
            },
            &times[..30],
        );
    }

    #[test]
    fn rectangle_geometry() {
        let r = TrajectorySpec::rectangle_flight();
        assert_relative_eq!(r.lap_length().unwrap(), 13.5);
        assert_relative_eq!(r.duration(), 60.0);
        // Numerically integrated path length of the lap.
        let n = 60_000;
        let mut len = 0.0;
        let mut prev = r.kinematics(0.0).position;
        for i in 1..=n {
            let p = r.kinematics(60.0 * i as f64 / n as f64).position;
            len += (p - prev).norm();
            prev = p;
        }
        assert!((len - 13.5).abs() < 1e-6, "{len}");
        // Corners are visited at rest.
        let corner_t = 1.0 + 59.0 * 4.8 / 13.5;
        let k = r.kinematics(corner_t);
        assert_relative_eq!(k.position, Vector3::new(4.8, 0.0, 1.0), epsilon = 1e-9);
        assert!(k.velocity.norm() < 1e-9);
        assert_relative_eq!(r.kinematics(60.0).position, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-9);
        // Still during the initial hold.
        assert_eq!(r.kinematics(0.5).velocity, Vector3::zeros());
    }

    #[test]
    fn circle_centripetal_acceleration() {
        let c = TrajectorySpec::Circle {
            center: [0.0, 0.0, 1.0],
            radius: 1.5,
            rate: 0.8,
            duration: 10.0,
        };
        for t in [0.0, 1.3, 4.2] {
            let k = c.kinematics(t);
            assert_relative_eq!(k.acceleration.norm(), 0.8 * 0.8 * 1.5, epsilon = 1e-12);
            assert_relative_eq!(k.body_rate, Vector3::new(0.0, 0.0, 0.8), epsilon = 1e-12);
        }
    }

    #[test]
    fn lissajous_holds_then_moves() {
        let l = lissajous();
        assert_eq!(l.kinematics(0.3).velocity, Vector3::zeros());
        assert!(l.kinematics(5.0).velocity.norm() > 0.01);
    }
}
