//! Robocentric error-state EKF over the IMU state and camera-frame
//! landmarks.

mod landmarks;
pub mod propagate;
pub mod state;
mod update;

pub use landmarks::inverse_depth_prior;
pub use state::{FilterState, LandmarkState};
pub use update::{LandmarkMeasurement, UpdateReport};

use nalgebra::{DMatrix, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::PinholeCamera;
use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

/// World gravity (z up).
pub const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, -9.81);
/// 99% quantile of the chi-square distribution with 2 degrees of freedom.
pub const CHI2_2DOF_99: f64 = 9.2103;
/// 99% quantile of the chi-square distribution with 1 degree of freedom.
pub const CHI2_1DOF_99: f64 = 6.6349;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub timestamp: f64,
    /// Specific force (m/s^2), body frame.
    pub accel: Vector3<f64>,
    /// Angular rate (rad/s), body frame.
    pub gyro: Vector3<f64>,
}

fn d_accel_noise() -> f64 {
    2e-3
}
fn d_gyro_noise() -> f64 {
    2e-4
}
fn d_accel_walk() -> f64 {
    1e-4
}
fn d_gyro_walk() -> f64 {
    1e-5
}
fn d_pixel() -> f64 {
    1.0
}
fn d_bearing_walk() -> f64 {
    1e-3
}
fn d_inv_depth_walk() -> f64 {
    1e-3
}
fn d_rho0() -> f64 {
    0.5
}
fn d_rho0_sigma() -> f64 {
    0.5
}

/// Noise densities of the sensors and the landmark model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    /// Accelerometer white noise (m/s^2/sqrt(Hz)).
    #[serde(default = "d_accel_noise")]
    pub accel_noise: f64,
    /// Gyroscope white noise (rad/s/sqrt(Hz)).
    #[serde(default = "d_gyro_noise")]
    pub gyro_noise: f64,
    /// Accelerometer bias random walk (m/s^2/sqrt(s)).
    #[serde(default = "d_accel_walk")]
    pub accel_bias_walk: f64,
    #[serde(default = "d_gyro_walk")]
    pub gyro_bias_walk: f64,
    /// Reprojection noise (px).
    #[serde(default = "d_pixel")]
    pub pixel_noise: f64,
    /// Landmark bearing random walk (rad/sqrt(s)).
    #[serde(default = "d_bearing_walk")]
    pub bearing_walk: f64,
    /// Landmark inverse-depth random walk (1/m/sqrt(s)).
    #[serde(default = "d_inv_depth_walk")]
    pub inv_depth_walk: f64,
    /// Inverse depth assigned to landmarks without a depth reading (1/m).
    #[serde(default = "d_rho0")]
    pub initial_inv_depth: f64,
    #[serde(default = "d_rho0_sigma")]
    pub initial_inv_depth_sigma: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            accel_noise: d_accel_noise(),
            gyro_noise: d_gyro_noise(),
            accel_bias_walk: d_accel_walk(),
            gyro_bias_walk: d_gyro_walk(),
            pixel_noise: d_pixel(),
            bearing_walk: d_bearing_walk(),
            inv_depth_walk: d_inv_depth_walk(),
            initial_inv_depth: d_rho0(),
            initial_inv_depth_sigma: d_rho0_sigma(),
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("accel_noise", self.accel_noise),
            ("gyro_noise", self.gyro_noise),
            ("accel_bias_walk", self.accel_bias_walk),
            ("gyro_bias_walk", self.gyro_bias_walk),
            ("pixel_noise", self.pixel_noise),
            ("bearing_walk", self.bearing_walk),
            ("inv_depth_walk", self.inv_depth_walk),
            ("initial_inv_depth", self.initial_inv_depth),
            ("initial_inv_depth_sigma", self.initial_inv_depth_sigma),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("noise.{name} must be positive and finite (got {v})")));
            }
        }
        Ok(())
    }
}

fn d_dt_max() -> f64 {
    0.02
}
fn d_min_distance() -> f64 {
    0.25
}
fn d_max_distance() -> f64 {
    20.0
}
fn d_max_landmarks() -> usize {
    25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterParams {
    /// Longest single propagation step (s); longer intervals are split.
    #[serde(default = "d_dt_max")]
    pub dt_max: f64,
    /// Landmark distances are kept within `[min_distance, max_distance]`.
    #[serde(default = "d_min_distance")]
    pub min_distance: f64,
    #[serde(default = "d_max_distance")]
    pub max_distance: f64,
    #[serde(default = "d_max_landmarks")]
    pub max_landmarks: usize,
    /// Also fuse the registered depth of matched landmarks as an
    /// inverse-depth measurement.
    #[serde(default)]
    pub depth_update: bool,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            dt_max: d_dt_max(),
            min_distance: d_min_distance(),
            max_distance: d_max_distance(),
            max_landmarks: d_max_landmarks(),
            depth_update: false,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt_max > 0.0) {
            return Err(Error::Config("filter.dt_max must be positive".into()));
        }
        if !(self.min_distance > 0.0 && self.min_distance < self.max_distance && self.max_distance.is_finite()) {
            return Err(Error::Config("filter distances must satisfy 0 < min_distance < max_distance".into()));
        }
        Ok(())
    }

    pub fn rho_min(&self) -> f64 {
        1.0 / self.max_distance
    }

    pub fn rho_max(&self) -> f64 {
        1.0 / self.min_distance
    }
}

/// Attitude whose z axis matches the measured specific force, with zero yaw.
/// `mean_accel` is the accelerometer average over a static interval.
pub fn initial_attitude(mean_accel: &Vector3<f64>) -> Option<UnitQuaternion<f64>> {
    let q = UnitQuaternion::rotation_between(mean_accel, &Vector3::z())?;
    let (roll, pitch, _) = q.euler_angles();
    Some(UnitQuaternion::from_euler_angles(roll, pitch, 0.0))
}

/// Robot-block prior: position and yaw pinned (they are the gauge), small
/// roll/pitch and velocity uncertainty, moderate bias uncertainty.
pub fn initial_covariance() -> DMatrix<f64> {
    let sig = [
        1e-6, 1e-6, 1e-6, 0.01, 0.01, 1e-4, 0.01, 0.01, 0.01, 0.05, 0.05, 0.05, 0.005, 0.005, 0.005,
    ];
    DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(15, sig.iter().map(|s| s * s)))
}

/// Error-state EKF with its mean, covariance and sensor models.
#[derive(Clone, Debug)]
pub struct Ekf {
    state: FilterState,
    cov: DMatrix<f64>,
    noise: NoiseParams,
    params: FilterParams,
    camera: PinholeCamera,
    cam_from_imu: RigidTransform,
}

impl Ekf {
    pub fn new(
        state: FilterState,
        cov: DMatrix<f64>,
        noise: NoiseParams,
        params: FilterParams,
        camera: PinholeCamera,
        cam_from_imu: RigidTransform,
    ) -> Result<Self> {
        noise.validate()?;
        params.validate()?;
        let n = state.error_dim();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::Config(format!(
                "covariance is {}x{} but the state has {n} error dimensions",
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(Self {
            state,
            cov,
            noise,
            params,
            camera,
            cam_from_imu,
        })
    }

    pub fn state(&self) -> &FilterState {
        &self.state
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn noise(&self) -> &NoiseParams {
        &self.noise
    }

    pub fn params(&self) -> &FilterParams {
        &self.params
    }

    pub fn camera(&self) -> &PinholeCamera {
        &self.camera
    }

    pub fn cam_from_imu(&self) -> &RigidTransform {
        &self.cam_from_imu
    }

    pub fn landmark_count(&self) -> usize {
        self.state.landmarks.len()
    }

    pub fn landmark_index(&self, id: u64) -> Option<usize> {
        self.state.landmarks.iter().position(|l| l.id == id)
    }

    /// Propagates with constant inputs over `dt`, split into equal steps no
    /// longer than `dt_max`.
    pub fn propagate(&mut self, accel: &Vector3<f64>, gyro: &Vector3<f64>, dt: f64) -> Result<()> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Numerical(format!("propagation interval {dt} is not positive")));
        }
        if !accel.iter().chain(gyro.iter()).all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite IMU input accel={accel:?} gyro={gyro:?}"
            )));
        }
        let steps = (dt / self.params.dt_max).ceil().max(1.0) as usize;
        let h = dt / steps as f64;
        for _ in 0..steps {
            let jac = propagate::propagation_jacobian(&self.state, accel, gyro, h, &self.cam_from_imu);
            self.state = propagate::propagate_mean(
                &self.state,
                accel,
                gyro,
                h,
                &self.cam_from_imu,
                self.params.rho_min(),
                self.params.rho_max(),
            );
            self.cov = propagate::propagate_covariance(&self.cov, &jac, &self.noise, h);
            symmetrize(&mut self.cov);
        }
        if !self.state.is_finite() {
            return Err(Error::Numerical("state became non-finite during propagation".into()));
        }
        Ok(())
    }

    /// Predicted pixel of landmark `index` and its 2x2 covariance from the
    /// bearing block. `None` when the bearing is out of view.
    pub fn predict_pixel(&self, index: usize) -> Option<(Vector2<f64>, nalgebra::Matrix2<f64>)> {
        let lm = self.state.landmarks.get(index)?;
        let pixel = self.camera.bearing_to_pixel(&lm.bearing)?;
        let (_, j) = self.camera.bearing_to_pixel_with_jacobian(&lm.bearing)?;
        let o = state::landmark_offset(index);
        let sigma = self.cov.fixed_view::<2, 2>(o, o).into_owned();
        Some((pixel, j * sigma * j.transpose()))
    }

    /// Covariance of the world pose error `[dp (world), dtheta (body)]`,
    /// where the true pose is `(p + dp, R exp(dtheta))`.
    pub fn world_pose_covariance(&self) -> nalgebra::Matrix6<f64> {
        let r = self.state.attitude.to_rotation_matrix().into_inner();
        let mut j = nalgebra::SMatrix::<f64, 6, 6>::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        j.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(-r * crate::geometry::skew(&self.state.position)));
        j.fixed_view_mut::<3, 3>(3, 3).copy_from(&nalgebra::Matrix3::identity());
        let p = self.cov.fixed_view::<6, 6>(0, 0).into_owned();
        j * p * j.transpose()
    }

    /// Verifies symmetry and positive semi-definiteness of the covariance.
    pub fn check_covariance(&self) -> Result<()> {
        check_psd(&self.cov)
    }
}

pub(crate) fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let m = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = m;
            p[(j, i)] = m;
        }
    }
}

/// Fails with a diagnostic summary if `p` is not PSD up to 1e-9.
pub(crate) fn check_psd(p: &DMatrix<f64>) -> Result<()> {
    let n = p.nrows();
    let shifted = p + DMatrix::identity(n, n) * 1e-9;
    if p.iter().all(|v| v.is_finite()) && shifted.cholesky().is_some() {
        return Ok(());
    }
    let diag = p.diagonal();
    let min_diag = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let min_eig = p.clone().symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min);
    Err(Error::Numerical(format!(
        "covariance lost positive semi-definiteness: dim={n} trace={:.6e} min_diag={min_diag:.6e} min_eigenvalue={min_eig:.6e}",
        p.trace()
    )))
}
