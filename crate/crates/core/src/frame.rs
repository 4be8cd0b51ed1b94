use serde::{Deserialize, Serialize};

use crate::camera::PinholeCamera;
use crate::error::{Error, Result};
use crate::image::{DepthImage, GrayImage, Image};

/// Valid depth interval of the sensor, meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub min: f64,
    pub max: f64,
}

impl Default for DepthRange {
    fn default() -> Self {
        Self { min: 0.75, max: 6.0 }
    }
}

impl DepthRange {
    #[inline]
    pub fn contains(&self, d: f64) -> bool {
        d >= self.min && d <= self.max
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.min < self.max && self.max.is_finite()) {
            return Err(Error::Config(format!(
                "invalid depth range [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

/// Time-stamped intensity and depth pair, both on the colour camera grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RegisteredFrame {
    pub timestamp: f64,
    pub gray: GrayImage,
    pub depth: DepthImage,
    pub camera: PinholeCamera,
}

impl RegisteredFrame {
    /// Builds a frame, zeroing depth values outside `range`.
    pub fn new(
        timestamp: f64,
        gray: GrayImage,
        mut depth: DepthImage,
        camera: PinholeCamera,
        range: DepthRange,
    ) -> Result<Self> {
        if gray.dims() != depth.dims() {
            return Err(Error::Config(format!(
                "gray {:?} and depth {:?} dimensions differ",
                gray.dims(),
                depth.dims()
            )));
        }
        if gray.dims() != (camera.width, camera.height) {
            return Err(Error::Config(format!(
                "image {:?} does not match the {}x{} camera",
                gray.dims(),
                camera.width,
                camera.height
            )));
        }
        for d in depth.data_mut() {
            if !(d.is_finite() && range.contains(*d as f64)) {
                *d = 0.0;
            }
        }
        Ok(Self {
            timestamp,
            gray,
            depth,
            camera,
        })
    }

    pub fn width(&self) -> usize {
        self.gray.width()
    }

    pub fn height(&self) -> usize {
        self.gray.height()
    }

    /// Depth at an integer pixel, `None` when invalid or outside the image.
    pub fn depth_at(&self, x: isize, y: isize) -> Option<f64> {
        self.depth
            .get_checked(x, y)
            .filter(|d| *d > 0.0)
            .map(|d| d as f64)
    }
}

/// Converts a raw 16-bit millimetre depth image to meters (0 stays invalid).
pub fn depth_from_millimeters(raw: &Image<u16>) -> DepthImage {
    raw.map(|mm| mm as f32 / 1000.0)
}

/// Inverse of [`depth_from_millimeters`]; values round to the nearest
/// millimetre and saturate at `u16::MAX`.
pub fn depth_to_millimeters(depth: &DepthImage) -> Image<u16> {
    depth.map(|d| {
        if d.is_finite() && d > 0.0 {
            (d as f64 * 1000.0).round().min(u16::MAX as f64) as u16
        } else {
            0
        }
    })
}
