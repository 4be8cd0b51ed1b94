use nalgebra::{DVector, UnitQuaternion, Vector3};

use crate::camera::BearingVector;
use crate::geometry::{so3_log, RigidTransform};

/// Error-state offsets of the robot part.
pub const POS: usize = 0;
pub const ATT: usize = 3;
pub const VEL: usize = 6;
pub const BIAS_ACC: usize = 9;
pub const BIAS_GYRO: usize = 12;
/// Robot error-state dimension.
pub const ROBOT_DIM: usize = 15;
/// Error-state dimension per landmark: azimuth, elevation, inverse depth.
pub const LANDMARK_DIM: usize = 3;

/// Offset of landmark `j` in the error state.
#[inline]
pub fn landmark_offset(j: usize) -> usize {
    ROBOT_DIM + LANDMARK_DIM * j
}

/// Landmark held in the camera frame as a bearing plus inverse distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LandmarkState {
    /// External identifier, stable for the landmark's lifetime.
    pub id: u64,
    pub bearing: BearingVector,
    /// `1 / |P|`, where `P` is the camera-frame point (1/m).
    pub inv_depth: f64,
}

impl LandmarkState {
    /// Camera-frame point.
    pub fn point(&self) -> Vector3<f64> {
        self.bearing.to_unit() / self.inv_depth
    }
}

/// Mean of the robocentric filter.
///
/// `position` and `velocity` are the IMU position and velocity expressed in
/// the current body frame; `attitude` rotates body vectors into the world.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterState {
    pub position: Vector3<f64>,
    pub attitude: UnitQuaternion<f64>,
    pub velocity: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub landmarks: Vec<LandmarkState>,
}

impl Default for FilterState {
    fn default() -> Self {
        Self {
            position: Vector3::zeros(),
            attitude: UnitQuaternion::identity(),
            velocity: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            landmarks: Vec::new(),
        }
    }
}

impl FilterState {
    pub fn error_dim(&self) -> usize {
        ROBOT_DIM + LANDMARK_DIM * self.landmarks.len()
    }

    /// IMU pose in the world frame.
    pub fn world_pose(&self) -> RigidTransform {
        RigidTransform::new(self.attitude, self.attitude * self.position)
    }

    /// Velocity in the world frame.
    pub fn world_velocity(&self) -> Vector3<f64> {
        self.attitude * self.velocity
    }

    /// Applies an error-state correction. Attitude uses the right
    /// perturbation `R exp(dtheta)`; bearings add in the azimuth/elevation
    /// chart; inverse depths are clamped to `[rho_min, rho_max]`.
    pub fn boxplus(&self, dx: &DVector<f64>, rho_min: f64, rho_max: f64) -> FilterState {
        debug_assert_eq!(dx.len(), self.error_dim());
        let v3 = |o: usize| Vector3::new(dx[o], dx[o + 1], dx[o + 2]);
        let mut out = self.clone();
        out.position += v3(POS);
        out.attitude = self.attitude * UnitQuaternion::from_scaled_axis(v3(ATT));
        out.attitude.renormalize();
        out.velocity += v3(VEL);
        out.accel_bias += v3(BIAS_ACC);
        out.gyro_bias += v3(BIAS_GYRO);
        for (j, lm) in out.landmarks.iter_mut().enumerate() {
            let o = landmark_offset(j);
            lm.bearing = wrap_bearing(lm.bearing.azimuth + dx[o], lm.bearing.elevation + dx[o + 1]);
            lm.inv_depth = (lm.inv_depth + dx[o + 2]).clamp(rho_min, rho_max);
        }
        out
    }

    /// Error-state difference `self - other`; both states must carry the
    /// same landmarks.
    pub fn boxminus(&self, other: &FilterState) -> DVector<f64> {
        assert_eq!(self.landmarks.len(), other.landmarks.len());
        let mut dx = DVector::zeros(self.error_dim());
        dx.fixed_rows_mut::<3>(POS).copy_from(&(self.position - other.position));
        dx.fixed_rows_mut::<3>(ATT).copy_from(&so3_log(&(other.attitude.inverse() * self.attitude)));
        dx.fixed_rows_mut::<3>(VEL).copy_from(&(self.velocity - other.velocity));
        dx.fixed_rows_mut::<3>(BIAS_ACC).copy_from(&(self.accel_bias - other.accel_bias));
        dx.fixed_rows_mut::<3>(BIAS_GYRO).copy_from(&(self.gyro_bias - other.gyro_bias));
        for (j, (a, b)) in self.landmarks.iter().zip(&other.landmarks).enumerate() {
            let o = landmark_offset(j);
            dx[o] = wrap_angle(a.bearing.azimuth - b.bearing.azimuth);
            dx[o + 1] = a.bearing.elevation - b.bearing.elevation;
            dx[o + 2] = a.inv_depth - b.inv_depth;
        }
        dx
    }

    pub fn is_finite(&self) -> bool {
        let v = |x: &Vector3<f64>| x.iter().all(|c| c.is_finite());
        v(&self.position)
            && v(&self.velocity)
            && v(&self.accel_bias)
            && v(&self.gyro_bias)
            && self.attitude.coords.iter().all(|c| c.is_finite())
            && self.landmarks.iter().all(|l| {
                l.bearing.azimuth.is_finite() && l.bearing.elevation.is_finite() && l.inv_depth.is_finite()
            })
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

/// Keeps an `(azimuth, elevation)` pair on the chart: elevations past the
/// pole are reflected through it.
fn wrap_bearing(az: f64, el: f64) -> BearingVector {
    BearingVector::from_vector(&BearingVector::new(az, el).to_unit())
}
