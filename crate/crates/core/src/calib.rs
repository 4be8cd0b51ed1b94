//! Sensor calibration file (`calib.cfg`).
//!
//! Flat `key = value` text (TOML syntax) so it can be hand-edited and
//! appended to. Keys:
//!
//! | key | meaning |
//! |-----|---------|
//! | `width`, `height`, `fx`, `fy`, `cx`, `cy` | colour camera intrinsics (pixels) |
//! | `distortion` | `[k1, k2, p1, p2]`, default zeros |
//! | `depth_width` ... `depth_distortion` | depth camera intrinsics, default = colour |
//! | `cam_from_imu_rotation` | `[w, x, y, z]` quaternion taking IMU-frame vectors to the camera frame |
//! | `cam_from_imu_translation` | IMU origin expressed in the camera frame (m) |
//! | `color_from_depth_rotation`, `color_from_depth_translation` | depth camera to colour camera |
//! | `d_min`, `d_max` | valid depth range (m), defaults 0.75 / 6.0 |
//! | `dark_noise` | mean dark-noise intensity, written by `calibrate-dark-noise` |

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::{Distortion, PinholeCamera};
use crate::error::{Error, Result};
use crate::frame::DepthRange;
use crate::geometry::{quaternion_from_wxyz, quaternion_to_wxyz, RigidTransform};

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub color: PinholeCamera,
    pub depth: PinholeCamera,
    /// Maps IMU-frame coordinates into the camera frame.
    pub cam_from_imu: RigidTransform,
    /// Maps depth-camera coordinates into the colour-camera frame.
    pub color_from_depth: RigidTransform,
    pub range: DepthRange,
    pub dark_noise: Option<f64>,
}

fn identity_wxyz() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

fn default_d_min() -> f64 {
    DepthRange::default().min
}

fn default_d_max() -> f64 {
    DepthRange::default().max
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationFile {
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    #[serde(default)]
    distortion: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth_height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth_fx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth_fy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth_cx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth_cy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth_distortion: Option<[f64; 4]>,
    #[serde(default = "identity_wxyz")]
    cam_from_imu_rotation: [f64; 4],
    #[serde(default)]
    cam_from_imu_translation: [f64; 3],
    #[serde(default = "identity_wxyz")]
    color_from_depth_rotation: [f64; 4],
    #[serde(default)]
    color_from_depth_translation: [f64; 3],
    #[serde(default = "default_d_min")]
    d_min: f64,
    #[serde(default = "default_d_max")]
    d_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dark_noise: Option<f64>,
}

fn transform(key: &str, q: [f64; 4], t: [f64; 3]) -> Result<RigidTransform> {
    let rotation = quaternion_from_wxyz(q)
        .ok_or_else(|| Error::Config(format!("{key}_rotation is not a unit quaternion: {q:?}")))?;
    Ok(RigidTransform::new(rotation, t.into()))
}

impl Calibration {
    /// Colour and depth share intrinsics and frame.
    pub fn colocated(camera: PinholeCamera, cam_from_imu: RigidTransform) -> Self {
        Self {
            color: camera,
            depth: camera,
            cam_from_imu,
            color_from_depth: RigidTransform::identity(),
            range: DepthRange::default(),
            dark_noise: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let f: CalibrationFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("calibration: {e}")))?;
        let color = PinholeCamera {
            fx: f.fx,
            fy: f.fy,
            cx: f.cx,
            cy: f.cy,
            width: f.width,
            height: f.height,
            distortion: Distortion::from_array(f.distortion),
        };
        color.validate()?;
        let depth = PinholeCamera {
            fx: f.depth_fx.unwrap_or(f.fx),
            fy: f.depth_fy.unwrap_or(f.fy),
            cx: f.depth_cx.unwrap_or(f.cx),
            cy: f.depth_cy.unwrap_or(f.cy),
            width: f.depth_width.unwrap_or(f.width),
            height: f.depth_height.unwrap_or(f.height),
            distortion: Distortion::from_array(f.depth_distortion.unwrap_or(f.distortion)),
        };
        depth.validate()?;
        let range = DepthRange {
            min: f.d_min,
            max: f.d_max,
        };
        range.validate()?;
        if let Some(dn) = f.dark_noise {
            if !(0.0..255.0).contains(&dn) {
                return Err(Error::Config(format!("dark_noise {dn} outside [0, 255)")));
            }
        }
        Ok(Self {
            color,
            depth,
            cam_from_imu: transform("cam_from_imu", f.cam_from_imu_rotation, f.cam_from_imu_translation)?,
            color_from_depth: transform(
                "color_from_depth",
                f.color_from_depth_rotation,
                f.color_from_depth_translation,
            )?,
            range,
            dark_noise: f.dark_noise,
        })
    }

    pub fn to_toml_string(&self) -> String {
        let same_depth = self.depth == self.color;
        let f = CalibrationFile {
            width: self.color.width,
            height: self.color.height,
            fx: self.color.fx,
            fy: self.color.fy,
            cx: self.color.cx,
            cy: self.color.cy,
            distortion: self.color.distortion.to_array(),
            depth_width: (!same_depth).then_some(self.depth.width),
            depth_height: (!same_depth).then_some(self.depth.height),
            depth_fx: (!same_depth).then_some(self.depth.fx),
            depth_fy: (!same_depth).then_some(self.depth.fy),
            depth_cx: (!same_depth).then_some(self.depth.cx),
            depth_cy: (!same_depth).then_some(self.depth.cy),
            depth_distortion: (!same_depth).then_some(self.depth.distortion.to_array()),
            cam_from_imu_rotation: quaternion_to_wxyz(&self.cam_from_imu.rotation),
            cam_from_imu_translation: self.cam_from_imu.translation.into(),
            color_from_depth_rotation: quaternion_to_wxyz(&self.color_from_depth.rotation),
            color_from_depth_translation: self.color_from_depth.translation.into(),
            d_min: self.range.min,
            d_max: self.range.max,
            dark_noise: self.dark_noise,
        };
        let body = toml::to_string(&f).expect("calibration serializes");
        format!("# vdi sensor calibration\n{body}")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }
}

/// Appends `dark_noise = value` to a calibration file, replacing any earlier
/// entry. The rest of the file is left untouched.
pub fn append_dark_noise(path: &Path, value: f64) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept: Vec<&str> = text
        .lines()
        .filter(|l| {
            let key = l.split('=').next().unwrap_or("").trim();
            key != "dark_noise"
        })
        .collect();
    while kept.last().is_some_and(|l| l.trim().is_empty()) {
        kept.pop();
    }
    let mut out = kept.join("\n");
    out.push_str(&format!("\ndark_noise = {value:?}\n"));
    // Validate before committing so a broken file is never written.
    Calibration::from_toml_str(&out)?;
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};

    fn sample() -> Calibration {
        let cam = PinholeCamera::new(525.0, 525.0, 319.5, 239.5, 640, 480)
            .unwrap()
            .with_distortion(Distortion {
                k1: -0.1,
                k2: 0.01,
                p1: 0.0,
                p2: 0.0,
            });
        let mut c = Calibration::colocated(
            cam,
            RigidTransform::new(UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3), Vector3::new(0.01, -0.02, 0.03)),
        );
        c.depth = PinholeCamera::new(380.0, 380.0, 320.0, 240.0, 640, 480).unwrap();
        c.color_from_depth = RigidTransform::new(UnitQuaternion::identity(), Vector3::new(0.015, 0.0, 0.0));
        c
    }

    #[test]
    fn round_trip_through_text() {
        let c = sample();
        let back = Calibration::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back.color, c.color);
        assert_eq!(back.depth, c.depth);
        assert_eq!(back.range, c.range);
        assert!((back.cam_from_imu.rotation.into_inner().coords - c.cam_from_imu.rotation.into_inner().coords).norm() < 1e-12);
        assert!((back.cam_from_imu.rotation.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unknown_key_names_the_key() {
        let text = format!("{}\nfoo_bar = 3\n", sample().to_toml_string());
        let err = Calibration::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("foo_bar"), "{err}");
    }

    #[test]
    fn non_unit_quaternion_is_rejected() {
        let text = "width = 640\nheight = 480\nfx = 500.0\nfy = 500.0\ncx = 320.0\ncy = 240.0\ncam_from_imu_rotation = [2.0, 0.0, 0.0, 0.0]\n";
        assert!(matches!(Calibration::from_toml_str(text), Err(Error::Config(_))));
    }

    #[test]
    fn dark_noise_append_replaces_previous_value() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.cfg");
        sample().save(&path).unwrap();
        append_dark_noise(&path, 2.5).unwrap();
        append_dark_noise(&path, 3.25).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches("dark_noise").count(), 1);
        assert_eq!(Calibration::load(&path).unwrap().dark_noise, Some(3.25));
    }
}
