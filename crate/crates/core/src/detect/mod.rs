//! Multimodal keypoint detection.
//!
//! A visual score map (Harris-scored corners) and a depth score map
//! (noise-filtered Laplacian of the depth image) are blended into one
//! combined map, from which spatially spread keypoints are picked.

mod depth;
mod select;
mod visual;

pub use depth::{compute_depth_score_map, depth_error};
pub use select::{select_keypoints, select_with_radius};
pub use visual::{compute_visual_score_map, harris_response};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::RegisteredFrame;
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreModality {
    Visual,
    Depth,
    Combined,
}

/// Per-pixel keypoint score in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub values: Image<f32>,
    pub modality: ScoreModality,
}

impl ScoreMap {
    pub fn zeros(width: usize, height: usize, modality: ScoreModality) -> Self {
        Self {
            values: Image::new(width, height, 0.0),
            modality,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values.get(x, y)
    }

    pub fn nonzero_count(&self) -> usize {
        self.values.data().iter().filter(|v| **v > 0.0).count()
    }

    pub fn max(&self) -> f32 {
        self.values.data().iter().copied().fold(0.0, f32::max)
    }
}

/// Which sensing modalities support a keypoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KeypointModality {
    VisualOnly,
    DepthOnly,
    Multimodal,
}

impl KeypointModality {
    pub fn from_scores(visual: f32, depth: f32) -> Option<Self> {
        match (visual > 0.0, depth > 0.0) {
            (true, true) => Some(Self::Multimodal),
            (true, false) => Some(Self::VisualOnly),
            (false, true) => Some(Self::DepthOnly),
            (false, false) => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::VisualOnly => "visual",
            Self::DepthOnly => "depth",
            Self::Multimodal => "multimodal",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub pixel: Vector2<f64>,
    pub score: f32,
    pub modality: KeypointModality,
    /// Registered z-depth at the keypoint (m), `None` when invalid.
    pub depth: Option<f64>,
}

fn default_lambda() -> f64 {
    1e-4
}
fn default_gamma() -> f64 {
    0.5
}
fn default_saturation() -> f64 {
    0.9
}
fn default_target() -> usize {
    25
}
fn default_r_min() -> f64 {
    8.0
}
fn default_r_max() -> f64 {
    32.0
}
fn default_depth_error() -> [f64; 3] {
    [0.0, 0.0, 0.0012]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorParams {
    /// Minimum Harris response for a visual corner (intensities in [0, 1],
    /// 3x3 Sobel derivatives, Gaussian-weighted 7x7 structure tensor, k = 0.04).
    #[serde(default = "default_lambda")]
    pub harris_threshold: f64,
    /// Weight of the visual map in the combined map.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_saturation")]
    pub saturation: f64,
    #[serde(default = "default_target")]
    pub target_count: usize,
    #[serde(default = "default_r_min")]
    pub min_radius: f64,
    #[serde(default = "default_r_max")]
    pub max_radius: f64,
    /// `(a0, a1, a2)` of the depth noise model `a0 + a1 d + a2 d^2` (m).
    #[serde(default = "default_depth_error")]
    pub depth_error_coeffs: [f64; 3],
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            harris_threshold: default_lambda(),
            gamma: default_gamma(),
            saturation: default_saturation(),
            target_count: default_target(),
            min_radius: default_r_min(),
            max_radius: default_r_max(),
            depth_error_coeffs: default_depth_error(),
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("detector.gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.saturation > 0.0 && self.saturation <= 1.0) {
            return Err(Error::Config(format!(
                "detector.saturation {} outside (0, 1]",
                self.saturation
            )));
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius) {
            return Err(Error::Config(format!(
                "detector radii must satisfy 0 < min_radius <= max_radius (got {} / {})",
                self.min_radius, self.max_radius
            )));
        }
        if self.harris_threshold < 0.0 || !self.harris_threshold.is_finite() {
            return Err(Error::Config("detector.harris_threshold must be >= 0".into()));
        }
        if self.depth_error_coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config("detector.depth_error_coeffs must be finite".into()));
        }
        Ok(())
    }
}

/// Per-pixel `min(gamma * V + (1 - gamma) * D, s_sat)`.
pub fn combine_score_maps(visual: &ScoreMap, depth: &ScoreMap, params: &DetectorParams) -> Result<ScoreMap> {
    if visual.values.dims() != depth.values.dims() {
        return Err(Error::Config(format!(
            "score maps differ in size: {:?} vs {:?}",
            visual.values.dims(),
            depth.values.dims()
        )));
    }
    let gamma = params.gamma as f32;
    let sat = params.saturation as f32;
    let data = visual
        .values
        .data()
        .iter()
        .zip(depth.values.data())
        .map(|(&v, &d)| (gamma * v + (1.0 - gamma) * d).min(sat))
        .collect();
    let (w, h) = visual.values.dims();
    Ok(ScoreMap {
        values: Image::from_vec(w, h, data).expect("same size"),
        modality: ScoreModality::Combined,
    })
}

/// Visual, depth and combined maps of one frame.
#[derive(Clone, Debug)]
pub struct ScoreMaps {
    pub visual: ScoreMap,
    pub depth: ScoreMap,
    pub combined: ScoreMap,
}

impl ScoreMaps {
    pub fn compute(frame: &RegisteredFrame, params: &DetectorParams) -> Result<Self> {
        let visual = compute_visual_score_map(&frame.gray, params);
        let depth = compute_depth_score_map(&frame.depth, params);
        let combined = combine_score_maps(&visual, &depth, params)?;
        Ok(Self {
            visual,
            depth,
            combined,
        })
    }

    /// Every pixel with a positive combined score, as a keypoint, in
    /// descending score order (raster order breaks ties).
    pub fn candidates(&self, frame: &RegisteredFrame) -> Vec<Keypoint> {
        let (w, h) = self.combined.values.dims();
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let c = self.combined.get(x, y);
                if c <= 0.0 {
                    continue;
                }
                if let Some(modality) = KeypointModality::from_scores(self.visual.get(x, y), self.depth.get(x, y)) {
                    out.push(Keypoint {
                        pixel: Vector2::new(x as f64, y as f64),
                        score: c,
                        modality,
                        depth: frame.depth_at(x as isize, y as isize),
                    });
                }
            }
        }
        // Stable sort keeps raster order among equal scores.
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        out
    }
}

/// 3x3 non-maximum suppression test with raster-order tie breaking: a pixel
/// survives if it is strictly greater than the neighbours that precede it
/// and not smaller than those that follow.
#[inline]
pub(crate) fn is_local_max(map: &[f32], width: usize, x: usize, y: usize) -> bool {
    let v = map[y * width + x];
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            if dx == 0 && dy == 0 {
                continue;
            }
            let n = map[(y as isize + dy) as usize * width + (x as isize + dx) as usize];
            let precedes = dy < 0 || (dy == 0 && dx < 0);
            if (precedes && n >= v) || (!precedes && n > v) {
                return false;
            }
        }
    }
    true
}
