//! Depth-to-colour registration by forward projection with a z-buffer.

use nalgebra::Vector2;

use crate::camera::PinholeCamera;
use crate::error::{Error, Result};
use crate::frame::DepthRange;
use crate::geometry::RigidTransform;
use crate::image::DepthImage;

/// Re-projects a depth image from the depth camera into the colour camera.
///
/// `color_from_depth` maps depth-camera coordinates into the colour frame.
/// Each output pixel receives the z-depth (colour frame) of the nearest point
/// projecting onto it; pixels nothing lands on, or whose depth falls outside
/// `range`, are 0.
pub fn register_depth_to_color(
    depth_raw: &DepthImage,
    depth_cam: &PinholeCamera,
    color_cam: &PinholeCamera,
    color_from_depth: &RigidTransform,
    range: DepthRange,
) -> Result<DepthImage> {
    if depth_raw.dims() != (depth_cam.width, depth_cam.height) {
        return Err(Error::Config(format!(
            "depth image {:?} does not match the {}x{} depth camera",
            depth_raw.dims(),
            depth_cam.width,
            depth_cam.height
        )));
    }
    if depth_raw.data().is_empty() {
        return Err(Error::Data("empty depth image".into()));
    }
    let mut out = DepthImage::new(color_cam.width, color_cam.height, f32::INFINITY);
    let fast = depth_cam.distortion.is_zero();
    for v in 0..depth_cam.height {
        for u in 0..depth_cam.width {
            let d = depth_raw.get(u, v) as f64;
            if !(d > 0.0 && d.is_finite()) {
                continue;
            }
            let p = if fast {
                depth_cam.back_project_fast(u as f64, v as f64, d)
            } else {
                depth_cam.back_project(&Vector2::new(u as f64, v as f64), d)
            };
            let q = color_from_depth.transform_point(&p);
            if q.z <= 0.0 || !range.contains(q.z) {
                continue;
            }
            let px = color_cam.normalized_to_pixel(&Vector2::new(q.x / q.z, q.y / q.z));
            let (x, y) = (px.x.round(), px.y.round());
            if x < 0.0 || y < 0.0 || x >= color_cam.width as f64 || y >= color_cam.height as f64 {
                continue;
            }
            let (x, y) = (x as usize, y as usize);
            let z = q.z as f32;
            if z < out.get(x, y) {
                out.set(x, y, z);
            }
        }
    }
    for d in out.data_mut() {
        if d.is_infinite() {
            *d = 0.0;
        }
    }
    Ok(out)
}
