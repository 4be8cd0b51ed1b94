//! Binary descriptor mixing dark-noise compensated intensity comparisons
//! with geometric tests on the registered depth.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::RegisteredFrame;
use crate::image::{GrayImage, IntegralImage};

pub const DESCRIPTOR_BITS: usize = 256;
pub const DESCRIPTOR_BYTES: usize = DESCRIPTOR_BITS / 8;
/// Side of the square sampling window around a keypoint.
pub const PATCH_SIZE: usize = 48;
/// Half side of the square patch averaged at each sample point (9x9).
pub const MEAN_HALF: usize = 4;
const PATTERN_SEED: u64 = 0x5eed_b4a2_d000_0001;
/// Sample offsets lie in `[MIN_OFFSET, MAX_OFFSET]` so the 9x9 patches stay
/// inside the `[-24, 23]` window.
const MIN_OFFSET: i32 = -(PATCH_SIZE as i32 / 2) + MEAN_HALF as i32;
const MAX_OFFSET: i32 = PATCH_SIZE as i32 / 2 - 1 - MEAN_HALF as i32;
/// Half side of the neighbourhood used for surface normals (5x5).
const NORMAL_HALF: i32 = 2;

/// Fixed pairs of pixel offsets sampled around each keypoint.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPattern {
    pairs: Vec<([i32; 2], [i32; 2])>,
}

impl SamplingPattern {
    /// Draws 256 pairs from an isotropic Gaussian with sigma = window / 5.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, PATCH_SIZE as f64 / 5.0).expect("positive sigma");
        let draw = |rng: &mut ChaCha8Rng| {
            let mut c = || (normal.sample(rng).round() as i32).clamp(MIN_OFFSET, MAX_OFFSET);
            [c(), c()]
        };
        let mut pairs = Vec::with_capacity(DESCRIPTOR_BITS);
        while pairs.len() < DESCRIPTOR_BITS {
            let p1 = draw(&mut rng);
            let p2 = draw(&mut rng);
            if p1 != p2 {
                pairs.push((p1, p2));
            }
        }
        Self { pairs }
    }

    pub fn pairs(&self) -> &[([i32; 2], [i32; 2])] {
        &self.pairs
    }
}

impl Default for SamplingPattern {
    fn default() -> Self {
        Self::new(PATTERN_SEED)
    }
}

/// Mean intensity the sensor reports for a scene that should read zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DarkNoiseModel {
    intensity: f64,
}

impl DarkNoiseModel {
    pub fn new(intensity: f64) -> Result<Self> {
        if !(0.0..255.0).contains(&intensity) {
            return Err(Error::Config(format!("dark-noise intensity {intensity} outside [0, 255)")));
        }
        Ok(Self { intensity })
    }

    pub fn intensity(&self) -> f64 {
        self.intensity
    }
}

/// Mean intensity over every pixel of a set of images taken in darkness.
pub fn calibrate_dark_noise(images: &[GrayImage]) -> Result<DarkNoiseModel> {
    let count: usize = images.iter().map(|im| im.data().len()).sum();
    if count == 0 {
        return Err(Error::Config("dark-noise calibration needs at least one non-empty image".into()));
    }
    let sum: u64 = images.iter().flat_map(|im| im.data()).map(|&v| v as u64).sum();
    DarkNoiseModel::new(sum as f64 / count as f64)
}

/// Intensity comparison with the dark-noise floor removed; intensities that
/// fall below the floor clamp to zero and never set a bit.
#[inline]
pub fn visual_bit(p1_mean: f64, p2_mean: f64, dark_noise: &DarkNoiseModel) -> bool {
    (p1_mean - dark_noise.intensity).max(0.0) < (p2_mean - dark_noise.intensity).max(0.0)
}

/// Which modalities the extractor may use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorMode {
    #[default]
    Both,
    VisualOnly,
    DepthOnly,
}

/// Which modalities set at least one bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DescriptorValidity {
    VisualDepth,
    VisualOnly,
    DepthOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Descriptor {
    bits: [u64; 4],
    validity: DescriptorValidity,
}

impl Descriptor {
    /// Builds a descriptor from raw bits; `None` when every bit is zero.
    pub fn from_parts(visual: [u64; 4], depth: [u64; 4]) -> Option<Self> {
        let has_visual = visual.iter().any(|&w| w != 0);
        let has_depth = depth.iter().any(|&w| w != 0);
        let validity = match (has_visual, has_depth) {
            (true, true) => DescriptorValidity::VisualDepth,
            (true, false) => DescriptorValidity::VisualOnly,
            (false, true) => DescriptorValidity::DepthOnly,
            (false, false) => return None,
        };
        let mut bits = [0u64; 4];
        for i in 0..4 {
            bits[i] = visual[i] | depth[i];
        }
        Some(Self { bits, validity })
    }

    pub fn bits(&self) -> &[u64; 4] {
        &self.bits
    }

    pub fn validity(&self) -> DescriptorValidity {
        self.validity
    }

    pub fn bit(&self, i: usize) -> bool {
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn hamming(&self, other: &Descriptor) -> u32 {
        self.bits.iter().zip(&other.bits).map(|(a, b)| (a ^ b).count_ones()).sum()
    }

    /// Little-endian 32-byte blob of the bits.
    pub fn to_bytes(&self) -> [u8; DESCRIPTOR_BYTES] {
        let mut out = [0u8; DESCRIPTOR_BYTES];
        for (i, w) in self.bits.iter().enumerate() {
            out[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
        }
        out
    }

    /// Inverse of [`Descriptor::to_bytes`]. The blob carries no modality
    /// information, so the result is marked as using both.
    pub fn from_bytes(bytes: &[u8; DESCRIPTOR_BYTES]) -> Self {
        let mut bits = [0u64; 4];
        for (i, w) in bits.iter_mut().enumerate() {
            *w = u64::from_le_bytes(bytes[i * 8..(i + 1) * 8].try_into().expect("8 bytes"));
        }
        Self {
            bits,
            validity: DescriptorValidity::VisualDepth,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum DescriptorError {
    #[error("sampling window leaves the image")]
    OutOfBounds,
    #[error("no modality produced any set bit")]
    Uninformative,
}

fn default_tau() -> f64 {
    0.05
}
fn default_normal_angle() -> f64 {
    45.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorParams {
    /// Sample points closer than this in 3D (m) set the depth bit.
    #[serde(default = "default_tau")]
    pub max_point_distance: f64,
    /// Normals at least this far apart (degrees) set the depth bit.
    #[serde(default = "default_normal_angle")]
    pub min_normal_angle_deg: f64,
    #[serde(default)]
    pub mode: DescriptorMode,
}

impl Default for DescriptorParams {
    fn default() -> Self {
        Self {
            max_point_distance: default_tau(),
            min_normal_angle_deg: default_normal_angle(),
            mode: DescriptorMode::Both,
        }
    }
}

impl DescriptorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_point_distance > 0.0 && self.max_point_distance.is_finite()) {
            return Err(Error::Config("descriptor.max_point_distance must be positive".into()));
        }
        if !(0.0..=180.0).contains(&self.min_normal_angle_deg) {
            return Err(Error::Config("descriptor.min_normal_angle_deg outside [0, 180]".into()));
        }
        Ok(())
    }
}

/// Per-frame data shared by all extractions on that frame.
pub struct FrameDescriptorContext<'a> {
    frame: &'a RegisteredFrame,
    integral: IntegralImage,
}

impl<'a> FrameDescriptorContext<'a> {
    pub fn new(frame: &'a RegisteredFrame) -> Self {
        Self {
            frame,
            integral: IntegralImage::new(&frame.gray),
        }
    }

    pub fn frame(&self) -> &RegisteredFrame {
        self.frame
    }

    fn point(&self, x: i32, y: i32) -> Option<Vector3<f64>> {
        let d = self.frame.depth_at(x as isize, y as isize)?;
        Some(self.frame.camera.back_project(&Vector2::new(x as f64, y as f64), d))
    }

    /// Unit normal of the least-squares plane `z = a du + b dv + c` fitted
    /// to the valid depths of the 5x5 neighbourhood, oriented towards the
    /// camera. Lens distortion is ignored over this small support.
    fn normal(&self, x: i32, y: i32) -> Option<Vector3<f64>> {
        let mut ata = Matrix3::zeros();
        let mut atb = Vector3::zeros();
        let mut n = 0;
        for dv in -NORMAL_HALF..=NORMAL_HALF {
            for du in -NORMAL_HALF..=NORMAL_HALF {
                if let Some(z) = self.frame.depth_at((x + du) as isize, (y + dv) as isize) {
                    let row = Vector3::new(du as f64, dv as f64, 1.0);
                    ata += row * row.transpose();
                    atb += row * z;
                    n += 1;
                }
            }
        }
        if n < 6 {
            return None;
        }
        let sol = ata.cholesky()?.solve(&atb);
        let (a, b, z0) = (sol.x, sol.y, sol.z);
        if z0 <= 0.0 {
            return None;
        }
        let cam = &self.frame.camera;
        let (xu, yv) = ((x as f64 - cam.cx) / cam.fx, (y as f64 - cam.cy) / cam.fy);
        let du = Vector3::new((z0 + (x as f64 - cam.cx) * a) / cam.fx, yv * a, a);
        let dv = Vector3::new(xu * b, (z0 + (y as f64 - cam.cy) * b) / cam.fy, b);
        let mut normal = du.cross(&dv).try_normalize(1e-12)?;
        if normal.dot(&Vector3::new(xu, yv, 1.0)) > 0.0 {
            normal = -normal;
        }
        Some(normal)
    }
}

/// Descriptor extractor holding the immutable pattern and thresholds.
#[derive(Clone, Debug)]
pub struct DescriptorExtractor {
    pattern: SamplingPattern,
    params: DescriptorParams,
    dark_noise: DarkNoiseModel,
}

impl DescriptorExtractor {
    pub fn new(params: DescriptorParams, dark_noise: DarkNoiseModel) -> Self {
        Self {
            pattern: SamplingPattern::default(),
            params,
            dark_noise,
        }
    }

    pub fn params(&self) -> &DescriptorParams {
        &self.params
    }

    pub fn dark_noise(&self) -> &DarkNoiseModel {
        &self.dark_noise
    }

    /// Whether the full sampling window around integer pixel `(x, y)` fits.
    pub fn window_fits(frame: &RegisteredFrame, x: i64, y: i64) -> bool {
        let lo = (PATCH_SIZE / 2) as i64;
        let hi = (PATCH_SIZE / 2 - 1) as i64;
        x >= lo && y >= lo && x + hi < frame.width() as i64 && y + hi < frame.height() as i64
    }

    /// Extracts with the configured mode.
    pub fn extract(&self, ctx: &FrameDescriptorContext, pixel: &Vector2<f64>) -> std::result::Result<Descriptor, DescriptorError> {
        self.extract_with_mode(ctx, pixel, self.params.mode)
    }

    pub fn extract_with_mode(
        &self,
        ctx: &FrameDescriptorContext,
        pixel: &Vector2<f64>,
        mode: DescriptorMode,
    ) -> std::result::Result<Descriptor, DescriptorError> {
        let (visual, depth) = self.raw_bits(ctx, pixel, mode)?;
        Descriptor::from_parts(visual, depth).ok_or(DescriptorError::Uninformative)
    }

    /// Visual and depth bit strings before OR-combination.
    pub fn raw_bits(
        &self,
        ctx: &FrameDescriptorContext,
        pixel: &Vector2<f64>,
        mode: DescriptorMode,
    ) -> std::result::Result<([u64; 4], [u64; 4]), DescriptorError> {
        let (cx, cy) = (pixel.x.round() as i64, pixel.y.round() as i64);
        if !Self::window_fits(ctx.frame, cx, cy) {
            return Err(DescriptorError::OutOfBounds);
        }
        let (cx, cy) = (cx as i32, cy as i32);
        let mut visual = [0u64; 4];
        let mut depth = [0u64; 4];
        let use_visual = mode != DescriptorMode::DepthOnly;
        let use_depth = mode != DescriptorMode::VisualOnly;
        let tau2 = self.params.max_point_distance.powi(2);
        let cos_thresh = self.params.min_normal_angle_deg.to_radians().cos();
        for (i, &(p1, p2)) in self.pattern.pairs.iter().enumerate() {
            let (x1, y1) = (cx + p1[0], cy + p1[1]);
            let (x2, y2) = (cx + p2[0], cy + p2[1]);
            let mask = 1u64 << (i % 64);
            if use_visual {
                let m1 = ctx.integral.patch_mean(x1 as usize, y1 as usize, MEAN_HALF);
                let m2 = ctx.integral.patch_mean(x2 as usize, y2 as usize, MEAN_HALF);
                if visual_bit(m1, m2, &self.dark_noise) {
                    visual[i / 64] |= mask;
                }
            }
            if use_depth {
                if let (Some(a), Some(b)) = (ctx.point(x1, y1), ctx.point(x2, y2)) {
                    let close = (a - b).norm_squared() <= tau2;
                    let bent = || match (ctx.normal(x1, y1), ctx.normal(x2, y2)) {
                        (Some(n1), Some(n2)) => n1.dot(&n2) <= cos_thresh,
                        _ => false,
                    };
                    if close || bent() {
                        depth[i / 64] |= mask;
                    }
                }
            }
        }
        Ok((visual, depth))
    }
}
