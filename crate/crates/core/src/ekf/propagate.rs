//! Discrete robocentric motion model and its error-state Jacobian.
//!
//! Over one step of length `dt` with bias-corrected rate `w` and specific
//! force `f` (both held constant), the body turns by `phi = w dt` and the
//! acceleration expressed in the old body frame is
//! `a = exp(phi / 2) f + R^T g` (specific force taken at mid-step). With
//! `Phi = exp(-phi)` and the displacement `D = dt v + dt^2 a / 2`:
//!
//! ```text
//! r' = Phi (r + D)        v' = Phi (v + dt a)        R' = R exp(phi)
//! P_B' = Phi (P_B - D)    for every landmark, P_B = R_BV (P_V - t_VB)
//! ```

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3};

use super::state::{landmark_offset, FilterState, ATT, BIAS_ACC, BIAS_GYRO, LANDMARK_DIM, POS, ROBOT_DIM, VEL};
use super::{NoiseParams, GRAVITY};
use crate::camera::BearingVector;
use crate::geometry::{right_jacobian, skew, so3_exp, RigidTransform};

pub type Matrix15 = SMatrix<f64, 15, 15>;
pub type Matrix3x15 = SMatrix<f64, 3, 15>;

/// Quantities shared by the mean update and the Jacobian of one step.
struct Step {
    f: Vector3<f64>,
    phi: Vector3<f64>,
    /// `exp(-phi)`: old-body to new-body coordinates.
    rot: Matrix3<f64>,
    half: Matrix3<f64>,
    gravity_body: Vector3<f64>,
    a: Vector3<f64>,
    disp: Vector3<f64>,
}

impl Step {
    fn new(state: &FilterState, accel: &Vector3<f64>, gyro: &Vector3<f64>, dt: f64) -> Self {
        let w = gyro - state.gyro_bias;
        let f = accel - state.accel_bias;
        let phi = w * dt;
        let half = so3_exp(&(phi * 0.5));
        let gravity_body = state.attitude.inverse() * GRAVITY;
        let a = half * f + gravity_body;
        Self {
            f,
            phi,
            rot: so3_exp(&-phi),
            half,
            gravity_body,
            a,
            disp: state.velocity * dt + a * (0.5 * dt * dt),
        }
    }
}

/// Mean propagation of one step. Inverse depths are clamped to
/// `[rho_min, rho_max]`.
pub fn propagate_mean(
    state: &FilterState,
    accel: &Vector3<f64>,
    gyro: &Vector3<f64>,
    dt: f64,
    cam_from_imu: &RigidTransform,
    rho_min: f64,
    rho_max: f64,
) -> FilterState {
    let s = Step::new(state, accel, gyro, dt);
    let r_vb = cam_from_imu.rotation_matrix();
    let t_vb = cam_from_imu.translation;
    let mut out = state.clone();
    out.position = s.rot * (state.position + s.disp);
    out.velocity = s.rot * (state.velocity + s.a * dt);
    out.attitude = state.attitude * nalgebra::UnitQuaternion::from_scaled_axis(s.phi);
    out.attitude.renormalize();
    for lm in &mut out.landmarks {
        let p_b = r_vb.transpose() * (lm.point() - t_vb);
        let p_v = r_vb * (s.rot * (p_b - s.disp)) + t_vb;
        lm.bearing = BearingVector::from_vector(&p_v);
        lm.inv_depth = (1.0 / p_v.norm()).clamp(rho_min, rho_max);
    }
    out
}

/// Error-state Jacobian of one step. The robot block is dense; each
/// landmark row block depends only on the robot state and on the landmark
/// itself.
#[derive(Clone, Debug)]
pub struct StepJacobian {
    pub robot: Matrix15,
    /// Per landmark: (rows x robot columns, rows x own columns).
    pub landmarks: Vec<(Matrix3x15, Matrix3<f64>)>,
}

impl StepJacobian {
    pub fn dim(&self) -> usize {
        ROBOT_DIM + LANDMARK_DIM * self.landmarks.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut f = DMatrix::zeros(n, n);
        f.fixed_view_mut::<15, 15>(0, 0).copy_from(&self.robot);
        for (j, (lr, ll)) in self.landmarks.iter().enumerate() {
            let o = landmark_offset(j);
            f.fixed_view_mut::<3, 15>(o, 0).copy_from(lr);
            f.fixed_view_mut::<3, 3>(o, o).copy_from(ll);
        }
        f
    }
}

pub fn propagation_jacobian(
    state: &FilterState,
    accel: &Vector3<f64>,
    gyro: &Vector3<f64>,
    dt: f64,
    cam_from_imu: &RigidTransform,
) -> StepJacobian {
    let s = Step::new(state, accel, gyro, dt);
    let dt2 = 0.5 * dt * dt;
    let jr_neg = right_jacobian(&-s.phi);
    let da_dth = skew(&s.gravity_body);
    let da_dbf = -s.half;
    let da_dbw = s.half * skew(&s.f) * right_jacobian(&(s.phi * 0.5)) * (0.5 * dt);
    // d(Phi u)/d b_w for a fixed vector u.
    let rot_dbw = |u: &Vector3<f64>| -s.rot * skew(u) * jr_neg * dt;

    let u_r = state.position + s.disp;
    let u_v = state.velocity + s.a * dt;
    let mut f = Matrix15::identity();
    let mut set = |r: usize, c: usize, m: Matrix3<f64>| f.fixed_view_mut::<3, 3>(r, c).copy_from(&m);
    set(POS, POS, s.rot);
    set(POS, ATT, s.rot * da_dth * dt2);
    set(POS, VEL, s.rot * dt);
    set(POS, BIAS_ACC, s.rot * da_dbf * dt2);
    set(POS, BIAS_GYRO, s.rot * da_dbw * dt2 + rot_dbw(&u_r));
    set(ATT, ATT, s.rot);
    set(ATT, BIAS_GYRO, -right_jacobian(&s.phi) * dt);
    set(VEL, ATT, s.rot * da_dth * dt);
    set(VEL, VEL, s.rot);
    set(VEL, BIAS_ACC, s.rot * da_dbf * dt);
    set(VEL, BIAS_GYRO, s.rot * da_dbw * dt + rot_dbw(&u_v));

    let r_vb = cam_from_imu.rotation_matrix();
    let t_vb = cam_from_imu.translation;
    let landmarks = state
        .landmarks
        .iter()
        .map(|lm| {
            let mu = lm.bearing.to_unit();
            let rho = lm.inv_depth;
            let p_b = r_vb.transpose() * (mu / rho - t_vb);
            let shifted = p_b - s.disp;
            let p_new = r_vb * (s.rot * shifted) + t_vb;
            let norm = p_new.norm();
            let mut chart = Matrix3::zeros();
            chart
                .fixed_view_mut::<2, 3>(0, 0)
                .copy_from(&BearingVector::chart_jacobian(&p_new));
            chart.fixed_view_mut::<1, 3>(2, 0).copy_from(&(-p_new.transpose() / (norm * norm * norm)));

            let outer = r_vb * s.rot;
            let mut dp_robot = Matrix3x15::zeros();
            dp_robot.fixed_view_mut::<3, 3>(0, ATT).copy_from(&(-outer * da_dth * dt2));
            dp_robot.fixed_view_mut::<3, 3>(0, VEL).copy_from(&(-outer * dt));
            dp_robot.fixed_view_mut::<3, 3>(0, BIAS_ACC).copy_from(&(-outer * da_dbf * dt2));
            dp_robot
                .fixed_view_mut::<3, 3>(0, BIAS_GYRO)
                .copy_from(&(-outer * da_dbw * dt2 + r_vb * rot_dbw(&shifted)));

            let mut dp_own = Matrix3::zeros();
            dp_own.fixed_view_mut::<3, 2>(0, 0).copy_from(&(lm.bearing.tangent_basis() / rho));
            dp_own.set_column(2, &(-mu / (rho * rho)));
            let dp_own = outer * r_vb.transpose() * dp_own;
            (chart * dp_robot, chart * dp_own)
        })
        .collect();
    StepJacobian { robot: f, landmarks }
}

/// `F P F^T + Q` using the block structure of `F`.
pub fn propagate_covariance(p: &DMatrix<f64>, jac: &StepJacobian, noise: &NoiseParams, dt: f64) -> DMatrix<f64> {
    let n = jac.dim();
    debug_assert_eq!(p.nrows(), n);
    let r = ROBOT_DIM;
    // A = F P
    let mut a = DMatrix::zeros(n, n);
    a.rows_mut(0, r).copy_from(&(jac.robot * p.fixed_rows::<15>(0)));
    for (j, (lr, ll)) in jac.landmarks.iter().enumerate() {
        let o = landmark_offset(j);
        a.rows_mut(o, 3).copy_from(&(lr * p.fixed_rows::<15>(0) + ll * p.fixed_rows::<3>(o)));
    }
    // P' = A F^T
    let mut out = DMatrix::zeros(n, n);
    let a_robot = a.fixed_columns::<15>(0);
    out.fixed_columns_mut::<15>(0).copy_from(&(a_robot * jac.robot.transpose()));
    for (j, (lr, ll)) in jac.landmarks.iter().enumerate() {
        let o = landmark_offset(j);
        let cols = a_robot * lr.transpose() + a.fixed_columns::<3>(o) * ll.transpose();
        out.fixed_columns_mut::<3>(o).copy_from(&cols);
    }

    // Sensor white noise enters exactly where the bias does, with opposite
    // sign; the bias rows themselves only see the random walk.
    let gain = |col: usize| {
        let mut g = DMatrix::<f64>::zeros(n, 3);
        g.view_mut((0, 0), (BIAS_ACC, 3)).copy_from(&jac.robot.view((0, col), (BIAS_ACC, 3)));
        for (j, (lr, _)) in jac.landmarks.iter().enumerate() {
            g.view_mut((landmark_offset(j), 0), (3, 3)).copy_from(&lr.fixed_view::<3, 3>(0, col));
        }
        g
    };
    let gf = gain(BIAS_ACC);
    let gw = gain(BIAS_GYRO);
    out += (&gf * gf.transpose()) * (noise.accel_noise.powi(2) / dt);
    out += (&gw * gw.transpose()) * (noise.gyro_noise.powi(2) / dt);
    for i in 0..3 {
        out[(BIAS_ACC + i, BIAS_ACC + i)] += noise.accel_bias_walk.powi(2) * dt;
        out[(BIAS_GYRO + i, BIAS_GYRO + i)] += noise.gyro_bias_walk.powi(2) * dt;
    }
    for j in 0..jac.landmarks.len() {
        let o = landmark_offset(j);
        out[(o, o)] += noise.bearing_walk.powi(2) * dt;
        out[(o + 1, o + 1)] += noise.bearing_walk.powi(2) * dt;
        out[(o + 2, o + 2)] += noise.inv_depth_walk.powi(2) * dt;
    }
    out
}
