//! Pinhole camera with radial-tangential distortion and the azimuth/elevation
//! bearing parameterization used for landmarks.

use nalgebra::{Matrix2, Matrix2x3, Matrix3x2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Radial-tangential distortion coefficients `(k1, k2, p1, p2)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Distortion {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
}

impl Distortion {
    pub fn is_zero(&self) -> bool {
        self.k1 == 0.0 && self.k2 == 0.0 && self.p1 == 0.0 && self.p2 == 0.0
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.k1, self.k2, self.p1, self.p2]
    }

    pub fn from_array(c: [f64; 4]) -> Self {
        Self {
            k1: c[0],
            k2: c[1],
            p1: c[2],
            p2: c[3],
        }
    }
}

/// Pinhole intrinsics. Pixel coordinates put integer values at pixel centres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub distortion: Distortion,
}

impl PinholeCamera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            distortion: Distortion::default(),
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn with_distortion(mut self, distortion: Distortion) -> Self {
        self.distortion = distortion;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Config(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be nonzero".into()));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::Config(format!(
                "principal point ({}, {}) outside the {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Applies distortion to normalized image coordinates.
    pub fn distort(&self, xn: &Vector2<f64>) -> Vector2<f64> {
        let d = &self.distortion;
        let (x, y) = (xn.x, xn.y);
        let r2 = x * x + y * y;
        let radial = 1.0 + d.k1 * r2 + d.k2 * r2 * r2;
        Vector2::new(
            x * radial + 2.0 * d.p1 * x * y + d.p2 * (r2 + 2.0 * x * x),
            y * radial + d.p1 * (r2 + 2.0 * y * y) + 2.0 * d.p2 * x * y,
        )
    }

    /// Jacobian of [`distort`](Self::distort) with respect to `xn`.
    pub fn distort_jacobian(&self, xn: &Vector2<f64>) -> Matrix2<f64> {
        let d = &self.distortion;
        let (x, y) = (xn.x, xn.y);
        let r2 = x * x + y * y;
        let radial = 1.0 + d.k1 * r2 + d.k2 * r2 * r2;
        let dradial = 2.0 * d.k1 + 4.0 * d.k2 * r2; // d(radial)/d(r2) * 2
        Matrix2::new(
            radial + x * x * dradial + 2.0 * d.p1 * y + 6.0 * d.p2 * x,
            x * y * dradial + 2.0 * d.p1 * x + 2.0 * d.p2 * y,
            x * y * dradial + 2.0 * d.p1 * x + 2.0 * d.p2 * y,
            radial + y * y * dradial + 6.0 * d.p1 * y + 2.0 * d.p2 * x,
        )
    }

    /// Inverts [`distort`](Self::distort) with Newton iterations.
    pub fn undistort(&self, xd: &Vector2<f64>) -> Vector2<f64> {
        if self.distortion.is_zero() {
            return *xd;
        }
        let mut x = *xd;
        for _ in 0..20 {
            let residual = self.distort(&x) - xd;
            if residual.norm() < 1e-14 {
                break;
            }
            let j = self.distort_jacobian(&x);
            match j.try_inverse() {
                Some(inv) => x -= inv * residual,
                None => break,
            }
        }
        x
    }

    pub fn normalized_to_pixel(&self, xn: &Vector2<f64>) -> Vector2<f64> {
        let xd = self.distort(xn);
        Vector2::new(self.fx * xd.x + self.cx, self.fy * xd.y + self.cy)
    }

    pub fn pixel_to_normalized(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let xd = Vector2::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy);
        self.undistort(&xd)
    }

    /// Whether `p` lies on the pixel grid `[0, w-1] x [0, h-1]`.
    pub fn in_bounds(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width - 1) as f64 && p.y <= (self.height - 1) as f64
    }

    /// Projects a camera-frame point. `None` for points behind the camera or
    /// outside the image.
    pub fn project(&self, point: &Vector3<f64>) -> Option<Vector2<f64>> {
        if point.z <= 1e-9 {
            return None;
        }
        let p = self.normalized_to_pixel(&Vector2::new(point.x / point.z, point.y / point.z));
        self.in_bounds(&p).then_some(p)
    }

    /// Back-projects a pixel with a z-depth (meters) to a camera-frame point.
    pub fn back_project(&self, p: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        let xn = self.pixel_to_normalized(p);
        Vector3::new(xn.x * depth, xn.y * depth, depth)
    }

    /// Back-projection for undistorted cameras on integer pixels; used in the
    /// per-pixel loops where the Newton solve would dominate.
    #[inline]
    pub fn back_project_fast(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth)
    }

    pub fn pixel_to_bearing(&self, p: &Vector2<f64>) -> BearingVector {
        let xn = self.pixel_to_normalized(p);
        BearingVector::from_vector(&Vector3::new(xn.x, xn.y, 1.0))
    }

    /// Pixel of a bearing. `None` signals the bearing is out of view: behind
    /// the image plane or projecting outside the image.
    pub fn bearing_to_pixel(&self, b: &BearingVector) -> Option<Vector2<f64>> {
        self.project(&b.to_unit())
    }

    /// Pixel of a forward bearing regardless of image bounds, with the 2x2
    /// Jacobian of the pixel with respect to `(azimuth, elevation)`.
    pub fn bearing_to_pixel_with_jacobian(&self, b: &BearingVector) -> Option<(Vector2<f64>, Matrix2<f64>)> {
        let mu = b.to_unit();
        if mu.z <= 1e-6 {
            return None;
        }
        let xn = Vector2::new(mu.x / mu.z, mu.y / mu.z);
        let pixel = self.normalized_to_pixel(&xn);
        let inv_z = 1.0 / mu.z;
        let dxn_dmu = Matrix2x3::new(
            inv_z,
            0.0,
            -mu.x * inv_z * inv_z,
            0.0,
            inv_z,
            -mu.y * inv_z * inv_z,
        );
        let k = Matrix2::new(self.fx, 0.0, 0.0, self.fy);
        let j = k * self.distort_jacobian(&xn) * dxn_dmu * b.tangent_basis();
        Some((pixel, j))
    }
}

/// Unit direction parameterized by azimuth and elevation:
/// `mu = (cos(el) sin(az), sin(el), cos(el) cos(az))` in the camera frame
/// (x right, y down, z forward).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BearingVector {
    pub azimuth: f64,
    pub elevation: f64,
}

impl BearingVector {
    pub fn new(azimuth: f64, elevation: f64) -> Self {
        Self { azimuth, elevation }
    }

    /// Bearing of an arbitrary nonzero vector.
    pub fn from_vector(v: &Vector3<f64>) -> Self {
        let horiz = (v.x * v.x + v.z * v.z).sqrt();
        Self {
            azimuth: v.x.atan2(v.z),
            elevation: v.y.atan2(horiz),
        }
    }

    pub fn to_unit(&self) -> Vector3<f64> {
        let (sa, ca) = self.azimuth.sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        Vector3::new(ce * sa, se, ce * ca)
    }

    pub fn is_forward(&self) -> bool {
        self.azimuth.abs() < std::f64::consts::FRAC_PI_2 && self.elevation.abs() < std::f64::consts::FRAC_PI_2
    }

    /// Columns are `d mu / d azimuth` and `d mu / d elevation`.
    pub fn tangent_basis(&self) -> Matrix3x2<f64> {
        let (sa, ca) = self.azimuth.sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        Matrix3x2::new(ce * ca, -se * sa, 0.0, ce, -ce * sa, -se * ca)
    }

    /// Jacobian of `(azimuth, elevation)` of [`from_vector`](Self::from_vector)
    /// with respect to the (not necessarily unit) input vector.
    pub fn chart_jacobian(v: &Vector3<f64>) -> Matrix2x3<f64> {
        let h2 = v.x * v.x + v.z * v.z;
        let h = h2.sqrt();
        let n2 = h2 + v.y * v.y;
        Matrix2x3::new(
            v.z / h2,
            0.0,
            -v.x / h2,
            -v.x * v.y / (n2 * h),
            h / n2,
            -v.z * v.y / (n2 * h),
        )
    }
}
