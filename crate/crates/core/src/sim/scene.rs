//! Analytic scene geometry: textured rectangles and yawed boxes.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Surface reflectance pattern in face-local metric coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Albedo {
    Constant { value: f64 },
    Checker { cell: f64, low: f64, high: f64 },
    /// Blocky value noise: a coarse and a fine grid of cells with hashed
    /// reflectances, overlaid. Cell borders give sharp corners of varied
    /// contrast.
    Mosaic { cell: f64, seed: u64, low: f64, high: f64 },
}

fn hash2(seed: u64, i: i64, j: i64) -> f64 {
    // SplitMix64 finaliser over the packed cell index.
    let mut z = seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

impl Albedo {
    pub fn at(&self, uv: &Vector2<f64>) -> f64 {
        match self {
            Albedo::Constant { value } => *value,
            Albedo::Checker { cell, low, high } => {
                let i = (uv.x / cell).floor() as i64;
                let j = (uv.y / cell).floor() as i64;
                if (i + j).rem_euclid(2) == 0 {
                    *high
                } else {
                    *low
                }
            }
            Albedo::Mosaic { cell, seed, low, high } => {
                let coarse = hash2(*seed, (uv.x / cell).floor() as i64, (uv.y / cell).floor() as i64);
                let fine_cell = cell * 0.5;
                let fine = hash2(
                    seed.wrapping_add(1),
                    (uv.x / fine_cell).floor() as i64,
                    (uv.y / fine_cell).floor() as i64,
                );
                low + (high - low) * (0.7 * coarse + 0.3 * fine)
            }
        }
    }
}

/// Finite rectangle `center + a u + b v`, `|a| <= half_u`, `|b| <= half_v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quad {
    pub center: [f64; 3],
    /// In-plane unit axes.
    pub u: [f64; 3],
    pub v: [f64; 3],
    pub half_u: f64,
    pub half_v: f64,
    pub albedo: Albedo,
}

/// Box rotated about the world z axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSolid {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
    pub albedo: Albedo,
}

/// Nearest surface along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Ray parameter.
    pub t: f64,
    pub albedo: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    #[serde(default)]
    pub quads: Vec<Quad>,
    #[serde(default)]
    pub boxes: Vec<BoxSolid>,
}

fn v3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

impl Quad {
    /// Axis-aligned wall helper: `normal_axis` picks the constant
    /// coordinate (0 = x, 1 = y, 2 = z) and the remaining two axes span the
    /// quad between `lo` and `hi`.
    pub fn axis_aligned(normal_axis: usize, offset: f64, lo: [f64; 2], hi: [f64; 2], albedo: Albedo) -> Self {
        let (a, b) = match normal_axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let mut center = [0.0; 3];
        center[normal_axis] = offset;
        center[a] = 0.5 * (lo[0] + hi[0]);
        center[b] = 0.5 * (lo[1] + hi[1]);
        let mut u = [0.0; 3];
        u[a] = 1.0;
        let mut v = [0.0; 3];
        v[b] = 1.0;
        Quad {
            center,
            u,
            v,
            half_u: 0.5 * (hi[0] - lo[0]),
            half_v: 0.5 * (hi[1] - lo[1]),
            albedo,
        }
    }

    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let (c, u, v) = (v3(&self.center), v3(&self.u), v3(&self.v));
        let n = u.cross(&v);
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = n.dot(&(c - origin)) / denom;
        if t <= 1e-9 {
            return None;
        }
        let rel = origin + dir * t - c;
        let (a, b) = (rel.dot(&u), rel.dot(&v));
        if a.abs() > self.half_u || b.abs() > self.half_v {
            return None;
        }
        Some(Hit {
            t,
            albedo: self.albedo.at(&Vector2::new(a + self.half_u, b + self.half_v)),
        })
    }
}

impl BoxSolid {
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let (s, c) = self.yaw.sin_cos();
        // World to box-local: rotate by -yaw about z.
        let to_local = |w: &Vector3<f64>| Vector3::new(c * w.x + s * w.y, -s * w.x + c * w.y, w.z);
        let o = to_local(&(origin - v3(&self.center)));
        let d = to_local(dir);
        let h = v3(&self.half_extents);
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut axis = 0;
        for i in 0..3 {
            if d[i].abs() < 1e-15 {
                if o[i].abs() > h[i] {
                    return None;
                }
                continue;
            }
            let (a, b) = ((-h[i] - o[i]) / d[i], (h[i] - o[i]) / d[i]);
            let (near, far) = if a < b { (a, b) } else { (b, a) };
            if near > t0 {
                t0 = near;
                axis = i;
            }
            t1 = t1.min(far);
        }
        if t0 > t1 || t0 <= 1e-9 {
            // Missed, or the origin is inside the box.
            return None;
        }
        let p = o + d * t0;
        // Face coordinates: the two axes other than the hit face normal,
        // measured from the face corner.
        let (a, b) = match axis {
            0 => (p.y + h.y, p.z + h.z),
            1 => (p.x + h.x, p.z + h.z),
            _ => (p.x + h.x, p.y + h.y),
        };
        Some(Hit {
            t: t0,
            albedo: self.albedo.at(&Vector2::new(a + axis as f64 * 17.0, b)),
        })
    }
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        for q in &self.quads {
            let (u, v) = (v3(&q.u), v3(&q.v));
            if (u.norm() - 1.0).abs() > 1e-9 || (v.norm() - 1.0).abs() > 1e-9 || u.dot(&v).abs() > 1e-9 {
                return Err(Error::Config(format!("quad axes must be orthonormal: {q:?}")));
            }
            if !(q.half_u > 0.0 && q.half_v > 0.0) {
                return Err(Error::Config("quad half sizes must be positive".into()));
            }
        }
        if self.boxes.iter().any(|b| b.half_extents.iter().any(|&h| h <= 0.0)) {
            return Err(Error::Config("box half extents must be positive".into()));
        }
        Ok(())
    }

    /// Nearest hit along `origin + t dir`, `t > 0`.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let quads = self.quads.iter().filter_map(|q| q.intersect(origin, dir));
        let boxes = self.boxes.iter().filter_map(|b| b.intersect(origin, dir));
        quads.chain(boxes).min_by(|a, b| a.t.total_cmp(&b.t))
    }
}
