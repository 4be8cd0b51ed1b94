use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::SimConfig;
use crate::camera::PinholeCamera;
use crate::detect::depth_error;
use crate::frame::RegisteredFrame;
use crate::geometry::RigidTransform;
use crate::image::{DepthImage, GrayImage};

/// Ray-casts one registered frame.
///
/// Depth is the z-depth of the nearest surface plus Gaussian noise,
/// quantised to 1 mm, and zero outside the valid range. Intensity is
/// `albedo * ambient * 255` with signal-dependent shot noise, plus the
/// constant dark level and the fixed hot pixels, rounded and clamped.
/// Each row draws from its own stream of the frame seed, so the result is
/// independent of scheduling.
pub fn render_frame(
    config: &SimConfig,
    camera: &PinholeCamera,
    world_from_cam: &RigidTransform,
    ambient: f64,
    hot_pixels: &[usize],
    seed: u64,
    timestamp: f64,
) -> RegisteredFrame {
    let (w, h) = (camera.width, camera.height);
    let origin = world_from_cam.translation;
    let rot = world_from_cam.rotation_matrix();
    let noise = &config.noise;
    let range = config.depth_range;
    let mut gray = vec![0u8; w * h];
    let mut depth = vec![0f32; w * h];
    gray.par_chunks_mut(w)
        .zip(depth.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (grow, drow))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(y as u64);
            for x in 0..w {
                let xn = camera.pixel_to_normalized(&nalgebra::Vector2::new(x as f64, y as f64));
                // z component 1: the ray parameter is the z-depth.
                let dir = rot * Vector3::new(xn.x, xn.y, 1.0);
                let hit = config.scene.raycast(&origin, &dir);
                let n1: f64 = StandardNormal.sample(&mut rng);
                let n2: f64 = StandardNormal.sample(&mut rng);
                let mut value = noise.dark_level;
                if let Some(hit) = hit {
                    let signal = hit.albedo * ambient * 255.0;
                    value += signal + (noise.shot_gain * signal).sqrt() * n1;
                    let sigma = depth_error(hit.t, &noise.depth_noise).unwrap_or(0.0);
                    // Same float path as decoding a millimetre PNG.
                    let mm = ((hit.t + sigma * n2) * 1000.0).round();
                    if range.contains(mm / 1000.0) && mm <= u16::MAX as f64 {
                        drow[x] = mm as u16 as f32 / 1000.0;
                    }
                }
                grow[x] = value.round().clamp(0.0, 255.0) as u8;
            }
        });
    for &i in hot_pixels {
        gray[i] = (gray[i] as f64 + noise.hot_pixel_level).round().min(255.0) as u8;
    }
    RegisteredFrame::new(
        timestamp,
        GrayImage::from_vec(w, h, gray).expect("sized"),
        DepthImage::from_vec(w, h, depth).expect("sized"),
        *camera,
        range,
    )
    .expect("matching dimensions")
}
