//! Synthetic RGB-D + IMU sequences with exact ground truth.

mod imu;
mod render;
pub mod scene;
pub mod trajectory;

pub use imu::generate_imu;
pub use render::render_frame;
pub use scene::{Albedo, BoxSolid, Quad, Scene};
pub use trajectory::{Jet, Kinematics, TrajectorySpec};

use std::f64::consts::FRAC_PI_2;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::Calibration;
use crate::camera::PinholeCamera;
use crate::ekf::ImuSample;
use crate::error::{Error, Result};
use crate::frame::{DepthRange, RegisteredFrame};
use crate::geometry::RigidTransform;
use crate::image::GrayImage;

/// Sensor imperfections of the simulated rig.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimNoise {
    /// Accelerometer white noise (m/s^2/sqrt(Hz)).
    pub accel_noise: f64,
    /// Gyroscope white noise (rad/s/sqrt(Hz)).
    pub gyro_noise: f64,
    pub accel_bias_walk: f64,
    pub gyro_bias_walk: f64,
    pub accel_bias: [f64; 3],
    pub gyro_bias: [f64; 3],
    /// `(a0, a1, a2)` of the depth noise standard deviation (m).
    pub depth_noise: [f64; 3],
    /// Shot noise: variance equals `shot_gain` times the signal (grey
    /// levels).
    pub shot_gain: f64,
    /// Constant dark-current offset added to every pixel (grey levels).
    pub dark_level: f64,
    /// Fraction of sensor pixels that are hot, and how much they add.
    pub hot_pixel_fraction: f64,
    pub hot_pixel_level: f64,
}

impl Default for SimNoise {
    fn default() -> Self {
        Self {
            accel_noise: 2e-3,
            gyro_noise: 2e-4,
            accel_bias_walk: 1e-4,
            gyro_bias_walk: 1e-5,
            accel_bias: [0.02, -0.015, 0.01],
            gyro_bias: [1e-3, -1.5e-3, 8e-4],
            depth_noise: [0.0, 0.0, 6e-4],
            shot_gain: 0.5,
            dark_level: 3.0,
            hot_pixel_fraction: 5e-4,
            hot_pixel_level: 8.0,
        }
    }
}

impl SimNoise {
    /// No random perturbations: exact IMU, exact (1 mm quantised) depth and
    /// noiseless intensities. The deterministic dark offset remains.
    pub fn zero() -> Self {
        Self {
            accel_noise: 0.0,
            gyro_noise: 0.0,
            accel_bias_walk: 0.0,
            gyro_bias_walk: 0.0,
            accel_bias: [0.0; 3],
            gyro_bias: [0.0; 3],
            depth_noise: [0.0; 3],
            shot_gain: 0.0,
            hot_pixel_fraction: 0.0,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let scalars = [
            self.accel_noise,
            self.gyro_noise,
            self.accel_bias_walk,
            self.gyro_bias_walk,
            self.shot_gain,
            self.dark_level,
            self.hot_pixel_fraction,
            self.hot_pixel_level,
        ];
        if scalars.iter().chain(&self.depth_noise).any(|v| !(v.is_finite() && *v >= 0.0)) || self.hot_pixel_fraction > 1.0 {
            return Err(Error::Config("simulator noise values must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn d_width() -> usize {
    640
}
fn d_height() -> usize {
    480
}
fn d_focal() -> f64 {
    460.0
}
fn d_imu_rate() -> f64 {
    200.0
}
fn d_frame_rate() -> f64 {
    10.0
}

/// Everything needed to generate a sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub scene: Scene,
    pub trajectory: TrajectorySpec,
    /// Ambient light in `[0, 1]`; 0 is complete darkness.
    pub ambient: f64,
    #[serde(default = "d_width")]
    pub width: usize,
    #[serde(default = "d_height")]
    pub height: usize,
    /// Focal length (px); the principal point is the image centre.
    #[serde(default = "d_focal")]
    pub focal: f64,
    #[serde(default = "d_imu_rate")]
    pub imu_rate: f64,
    #[serde(default = "d_frame_rate")]
    pub frame_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise: SimNoise,
    #[serde(default)]
    pub depth_range: DepthRange,
}

/// Camera 5 cm ahead of and 2 cm above the IMU, looking along body x.
pub fn default_cam_from_imu() -> RigidTransform {
    // Rows: camera x = -body y, camera y = -body z, camera z = body x.
    let r = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    let rot = UnitQuaternion::from_matrix(&r);
    let cam_in_body = Vector3::new(0.05, 0.0, 0.02);
    RigidTransform::new(rot, -(rot * cam_in_body))
}

fn mosaic(seed: u64, cell: f64) -> Albedo {
    Albedo::Mosaic {
        cell,
        seed,
        low: 0.15,
        high: 0.95,
    }
}

impl SimConfig {
    /// Rectangle flight in front of a textured wall with a textured floor
    /// and a few boxes, under low light.
    pub fn rectangle_flight() -> Self {
        let mut quads = vec![
            Quad::axis_aligned(1, 4.5, [-4.0, 0.0], [9.0, 3.0], mosaic(11, 0.25)),
            Quad::axis_aligned(2, 0.0, [-4.0, -2.0], [9.0, 4.5], mosaic(12, 0.3)),
            Quad::axis_aligned(0, -4.0, [-2.0, 0.0], [4.5, 3.0], mosaic(13, 0.25)),
            Quad::axis_aligned(0, 9.0, [-2.0, 0.0], [4.5, 3.0], mosaic(14, 0.25)),
        ];
        quads.push(Quad::axis_aligned(2, 3.0, [-4.0, -2.0], [9.0, 4.5], mosaic(15, 0.4)));
        let boxes = [
            ([-1.0, 3.8, 0.4], [0.4, 0.3, 0.4], 0.2),
            ([2.0, 3.9, 0.6], [0.5, 0.35, 0.6], -0.3),
            ([5.5, 3.7, 0.35], [0.35, 0.35, 0.35], 0.5),
            ([7.5, 3.8, 0.5], [0.4, 0.4, 0.5], 0.1),
            ([3.6, 3.9, 1.45], [0.3, 0.3, 0.25], 0.0),
        ]
        .iter()
        .enumerate()
        .map(|(i, (c, h, yaw))| BoxSolid {
            center: *c,
            half_extents: *h,
            yaw: *yaw,
            albedo: mosaic(20 + i as u64, 0.12),
        })
        .collect();
        Self {
            scene: Scene { quads, boxes },
            trajectory: TrajectorySpec::rectangle_flight(),
            ambient: 0.3,
            width: d_width(),
            height: d_height(),
            focal: d_focal(),
            imu_rate: d_imu_rate(),
            frame_rate: d_frame_rate(),
            seed: 1,
            noise: SimNoise::default(),
            depth_range: DepthRange::default(),
        }
    }

    /// Unlit 7.6 m x 5 m x 2.3 m room furnished with thirty boxes,
    /// some stacked or floating, 1.5 m to 3.5 m ahead of a hand-held
    /// camera.
    pub fn dark_room() -> Self {
        let (lx, ly, lz) = (7.6, 5.0, 2.3);
        let wall = |s| Albedo::Constant { value: 0.5 + 0.05 * s as f64 };
        let quads = vec![
            Quad::axis_aligned(2, 0.0, [0.0, 0.0], [lx, ly], wall(0)),
            Quad::axis_aligned(2, lz, [0.0, 0.0], [lx, ly], wall(1)),
            Quad::axis_aligned(0, 0.0, [0.0, 0.0], [ly, lz], wall(2)),
            Quad::axis_aligned(0, lx, [0.0, 0.0], [ly, lz], wall(3)),
            Quad::axis_aligned(1, 0.0, [0.0, 0.0], [lx, lz], wall(4)),
            Quad::axis_aligned(1, ly, [0.0, 0.0], [lx, lz], wall(5)),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0xd4a2);
        let mut boxes: Vec<BoxSolid> = Vec::new();
        let camera_x = 1.5;
        while boxes.len() < 30 {
            let hx = rng.random_range(0.15..0.4);
            let hy = rng.random_range(0.15..0.45);
            let hz = rng.random_range(0.15..0.45);
            let x = camera_x + rng.random_range(1.5..3.5) + hx;
            let y = rng.random_range(0.4 + hy..ly - 0.4 - hy);
            // Most sit on the floor; some float (shelves) or stack.
            let base = match boxes.len() % 3 {
                0 => rng.random_range(0.6..1.4),
                1 => rng.random_range(0.3..0.9),
                _ => 0.0,
            };
            let candidate = BoxSolid {
                center: [x, y, base + hz],
                half_extents: [hx, hy, hz],
                yaw: rng.random_range(-0.8..0.8),
                albedo: Albedo::Constant { value: 0.6 },
            };
            let overlaps = boxes.iter().any(|b| {
                let r1 = b.half_extents[0].hypot(b.half_extents[1]);
                let r2 = hx.hypot(hy);
                let dxy = (b.center[0] - x).hypot(b.center[1] - y);
                let dz = (b.center[2] - candidate.center[2]).abs();
                dxy < r1 + r2 + 0.1 && dz < b.half_extents[2] + hz + 0.05
            });
            if !overlaps {
                boxes.push(candidate);
            }
        }
        Self {
            scene: Scene { quads, boxes },
            trajectory: TrajectorySpec::Lissajous {
                center: [camera_x, ly / 2.0, 1.2],
                amplitude: [0.35, 0.5, 0.2],
                frequency: [0.07, 0.05, 0.11],
                yaw: 0.0,
                yaw_amplitude: 0.25,
                yaw_frequency: 0.06,
                tilt_amplitude: 0.06,
                duration: 30.0,
                hold: 1.0,
            },
            ambient: 0.0,
            width: d_width(),
            height: d_height(),
            focal: d_focal(),
            imu_rate: d_imu_rate(),
            frame_rate: d_frame_rate(),
            seed: 2,
            noise: SimNoise::default(),
            depth_range: DepthRange::default(),
        }
    }

    /// Same scene at a different resolution, keeping the field of view.
    pub fn with_resolution(mut self, width: usize, height: usize) -> Self {
        self.focal *= width as f64 / self.width as f64;
        self.width = width;
        self.height = height;
        self
    }

    pub fn camera(&self) -> Result<PinholeCamera> {
        PinholeCamera::new(
            self.focal,
            self.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.trajectory.validate()?;
        self.noise.validate()?;
        self.depth_range.validate()?;
        if !(0.0..=1.0).contains(&self.ambient) {
            return Err(Error::Config(format!("ambient {} outside [0, 1]", self.ambient)));
        }
        if !(self.imu_rate > 0.0 && self.frame_rate > 0.0 && self.frame_rate <= self.imu_rate) {
            return Err(Error::Config("rates must satisfy 0 < frame_rate <= imu_rate".into()));
        }
        let ratio = self.imu_rate / self.frame_rate;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::Config("imu_rate must be an integer multiple of frame_rate".into()));
        }
        self.camera().map(|_| ())
    }
}

/// A generated sequence. Frames are rendered on demand.
#[derive(Clone, Debug)]
pub struct Simulation {
    config: SimConfig,
    camera: PinholeCamera,
    cam_from_imu: RigidTransform,
    imu: Vec<ImuSample>,
    frame_times: Vec<f64>,
    hot_pixels: Vec<usize>,
}

/// Mixes a seed with a stream index into an independent seed.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let camera = config.camera()?;
        let mut imu_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0));
        let imu = generate_imu(&config.trajectory, &config.noise, config.imu_rate, &mut imu_rng);
        let step = (config.imu_rate / config.frame_rate).round() as usize;
        // Frame stamps coincide with every `step`-th IMU stamp.
        let frame_times = imu.iter().step_by(step).map(|s| s.timestamp).collect();
        let mut hot_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
        let n_px = config.width * config.height;
        let n_hot = (config.noise.hot_pixel_fraction * n_px as f64).round() as usize;
        let mut hot_pixels: Vec<usize> = (0..n_hot).map(|_| hot_rng.random_range(0..n_px)).collect();
        hot_pixels.sort_unstable();
        hot_pixels.dedup();
        Ok(Self {
            cam_from_imu: default_cam_from_imu(),
            config,
            camera,
            imu,
            frame_times,
            hot_pixels,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn camera(&self) -> &PinholeCamera {
        &self.camera
    }

    pub fn cam_from_imu(&self) -> &RigidTransform {
        &self.cam_from_imu
    }

    /// Calibration of the simulated rig; depth is already registered.
    pub fn calibration(&self) -> Calibration {
        let mut c = Calibration::colocated(self.camera, self.cam_from_imu);
        c.range = self.config.depth_range;
        c
    }

    pub fn imu(&self) -> &[ImuSample] {
        &self.imu
    }

    pub fn frame_times(&self) -> &[f64] {
        &self.frame_times
    }

    pub fn frame_count(&self) -> usize {
        self.frame_times.len()
    }

    pub fn ground_truth(&self, t: f64) -> Kinematics {
        self.config.trajectory.kinematics(t)
    }

    /// IMU pose in the world at time `t`.
    pub fn ground_truth_pose(&self, t: f64) -> RigidTransform {
        let k = self.ground_truth(t);
        RigidTransform::new(k.attitude, k.position)
    }

    pub fn render(&self, index: usize) -> RegisteredFrame {
        self.render_with_ambient(index, self.config.ambient)
    }

    pub fn render_with_ambient(&self, index: usize, ambient: f64) -> RegisteredFrame {
        let t = self.frame_times[index];
        let world_from_cam = self.ground_truth_pose(t).compose(&self.cam_from_imu.inverse());
        render_frame(
            &self.config,
            &self.camera,
            &world_from_cam,
            ambient,
            &self.hot_pixels,
            derive_seed(self.config.seed, 2 + index as u64),
            t,
        )
    }

    /// Renders a batch of frames in parallel; same result as one by one.
    pub fn render_batch(&self, indices: std::ops::Range<usize>) -> Vec<RegisteredFrame> {
        indices.into_par_iter().map(|i| self.render(i)).collect()
    }

    /// Intensity images of the unlit scene, for dark-noise calibration.
    pub fn dark_frames(&self, count: usize) -> Vec<GrayImage> {
        (0..count.min(self.frame_count()))
            .map(|i| self.render_with_ambient(i, 0.0).gray)
            .collect()
    }
}

/// Heading that makes the default camera look along world `+y`.
pub const FACING_PLUS_Y: f64 = FRAC_PI_2;
