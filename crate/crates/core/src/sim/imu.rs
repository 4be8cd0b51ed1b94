use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::trajectory::TrajectorySpec;
use super::SimNoise;
use crate::ekf::{ImuSample, GRAVITY};

fn gaussian3<R: Rng>(rng: &mut R, sigma: f64) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    let mut g = || -> f64 { StandardNormal.sample(rng) };
    Vector3::new(g(), g(), g()) * sigma
}

/// Samples `f = R^T (a - g) + b_f + n_f` and `w = w_body + b_w + n_w` at
/// `rate` Hz over `[0, duration]`. White noise densities become per-sample
/// standard deviations `sigma * sqrt(rate)`; biases start at the configured
/// values and random-walk.
pub fn generate_imu<R: Rng>(traj: &TrajectorySpec, noise: &SimNoise, rate: f64, rng: &mut R) -> Vec<ImuSample> {
    let dt = 1.0 / rate;
    let n = (traj.duration() * rate + 1e-9).floor() as usize;
    let mut accel_bias = Vector3::from(noise.accel_bias);
    let mut gyro_bias = Vector3::from(noise.gyro_bias);
    let mut out = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = k as f64 * dt;
        let kin = traj.kinematics(t);
        let specific = kin.attitude.inverse() * (kin.acceleration - GRAVITY);
        let accel = specific + accel_bias + gaussian3(rng, noise.accel_noise * rate.sqrt());
        let gyro = kin.body_rate + gyro_bias + gaussian3(rng, noise.gyro_noise * rate.sqrt());
        out.push(ImuSample {
            timestamp: t,
            accel,
            gyro,
        });
        accel_bias += gaussian3(rng, noise.accel_bias_walk * dt.sqrt());
        gyro_bias += gaussian3(rng, noise.gyro_bias_walk * dt.sqrt());
    }
    out
}
