//! Trajectory error metrics and trajectory CSV files.

use std::path::Path;

use nalgebra::{Matrix3, Matrix6, UnitQuaternion, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::geometry::{quaternion_from_wxyz, so3_log, RigidTransform};

/// Nearest-neighbour association tolerance (s).
pub const ASSOCIATION_TOLERANCE: f64 = 0.005;

/// 99% quantile of the chi-square distribution with 6 degrees of freedom.
pub const CHI2_6DOF_99: f64 = 16.8119;

/// World-from-body pose at a timestamp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimedPose {
    pub timestamp: f64,
    pub pose: RigidTransform,
}

impl TimedPose {
    pub fn new(timestamp: f64, pose: RigidTransform) -> Self {
        Self { timestamp, pose }
    }
}

/// Pairs of `(estimate index, ground-truth index)` whose timestamps differ
/// by at most `tolerance`. Ground truth must be sorted by time.
pub fn associate(estimated: &[TimedPose], ground_truth: &[TimedPose], tolerance: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, e) in estimated.iter().enumerate() {
        let k = ground_truth.partition_point(|g| g.timestamp < e.timestamp);
        let best = [k.checked_sub(1), Some(k)]
            .into_iter()
            .flatten()
            .filter(|&j| j < ground_truth.len())
            .min_by(|&a, &b| {
                let da = (ground_truth[a].timestamp - e.timestamp).abs();
                let db = (ground_truth[b].timestamp - e.timestamp).abs();
                da.total_cmp(&db)
            });
        if let Some(j) = best {
            if (ground_truth[j].timestamp - e.timestamp).abs() <= tolerance {
                out.push((i, j));
            }
        }
    }
    out
}

/// Least-squares rigid transform `T` minimising `sum |T x_i - y_i|^2`
/// (Umeyama without scale).
pub fn align_points(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> Result<RigidTransform> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Data("alignment needs at least two point pairs".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<Vector3<f64>>() / n;
    let my = y.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (a, b) in x.iter().zip(y) {
        cov += (b - my) * (a - mx).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    let rotation = UnitQuaternion::from_matrix(&r);
    Ok(RigidTransform::new(rotation, my - rotation * mx))
}

/// Absolute trajectory error summary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AteReport {
    pub rmse: f64,
    pub mean: f64,
    pub max: f64,
    pub pairs: usize,
    /// Transform applied to the estimate before comparison.
    pub alignment: RigidTransform,
}

/// Translational RMSE after association and, when `align` is set, rigid
/// alignment of the estimate onto the ground truth.
pub fn evaluate_ate(estimated: &[TimedPose], ground_truth: &[TimedPose], align: bool) -> Result<AteReport> {
    let pairs = associate(estimated, ground_truth, ASSOCIATION_TOLERANCE);
    if pairs.len() < 2 {
        return Err(Error::Data(format!(
            "trajectories overlap in {} timestamps, at least 2 are needed",
            pairs.len()
        )));
    }
    let xs: Vec<_> = pairs.iter().map(|&(i, _)| estimated[i].pose.translation).collect();
    let ys: Vec<_> = pairs.iter().map(|&(_, j)| ground_truth[j].pose.translation).collect();
    let alignment = if align { align_points(&xs, &ys)? } else { RigidTransform::identity() };
    let errs: Vec<f64> = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (alignment.transform_point(x) - y).norm())
        .collect();
    let n = errs.len() as f64;
    Ok(AteReport {
        rmse: (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        mean: errs.iter().sum::<f64>() / n,
        max: errs.iter().copied().fold(0.0, f64::max),
        pairs: errs.len(),
        alignment,
    })
}

/// Relative pose error over a fixed time offset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RpeReport {
    pub delta: f64,
    pub translation_rmse: f64,
    /// Rotation RMSE (rad).
    pub rotation_rmse: f64,
    pub pairs: usize,
}

pub fn evaluate_rpe(estimated: &[TimedPose], ground_truth: &[TimedPose], delta: f64) -> Result<RpeReport> {
    if !(delta > 0.0) {
        return Err(Error::Config("relative pose error needs a positive time offset".into()));
    }
    let pairs = associate(estimated, ground_truth, ASSOCIATION_TOLERANCE);
    if pairs.len() < 2 {
        return Err(Error::Data(format!(
            "trajectories overlap in {} timestamps, at least 2 are needed",
            pairs.len()
        )));
    }
    let times: Vec<f64> = pairs.iter().map(|&(i, _)| estimated[i].timestamp).collect();
    let (mut st, mut sr, mut n) = (0.0, 0.0, 0usize);
    for (a, &(ia, ja)) in pairs.iter().enumerate() {
        let target = times[a] + delta;
        let b = times.partition_point(|&t| t < target - ASSOCIATION_TOLERANCE);
        if b >= pairs.len() || (times[b] - target).abs() > ASSOCIATION_TOLERANCE {
            continue;
        }
        let (ib, jb) = pairs[b];
        let de = estimated[ia].pose.inverse().compose(&estimated[ib].pose);
        let dg = ground_truth[ja].pose.inverse().compose(&ground_truth[jb].pose);
        let err = dg.inverse().compose(&de);
        st += err.translation.norm_squared();
        sr += so3_log(&err.rotation).norm_squared();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data(format!("no pose pairs separated by {delta} s")));
    }
    Ok(RpeReport {
        delta,
        translation_rmse: (st / n as f64).sqrt(),
        rotation_rmse: (sr / n as f64).sqrt(),
        pairs: n,
    })
}

/// Position error of the final associated pose without alignment (m).
pub fn final_drift(estimated: &[TimedPose], ground_truth: &[TimedPose]) -> Result<f64> {
    let pairs = associate(estimated, ground_truth, ASSOCIATION_TOLERANCE);
    let &(i, j) = pairs
        .last()
        .ok_or_else(|| Error::Data("trajectories do not overlap in time".into()))?;
    Ok((estimated[i].pose.translation - ground_truth[j].pose.translation).norm())
}

/// Error `[dp, dtheta]` such that the truth is `(p + dp, R exp(dtheta))`.
pub fn pose_error(estimate: &RigidTransform, truth: &RigidTransform) -> Vector6<f64> {
    let dp = truth.translation - estimate.translation;
    let dth = so3_log(&(estimate.rotation.inverse() * truth.rotation));
    Vector6::new(dp.x, dp.y, dp.z, dth.x, dth.y, dth.z)
}

/// Normalised estimation error squared of a pose with covariance over
/// `[dp (world), dtheta (body)]`. `None` if the covariance is singular.
pub fn pose_nees(estimate: &RigidTransform, cov: &Matrix6<f64>, truth: &RigidTransform) -> Option<f64> {
    let e = pose_error(estimate, truth);
    let chol = cov.cholesky()?;
    Some(e.dot(&chol.solve(&e)))
}

/// Pose covariance mapped through `T`: for poses `T * X`, the world position
/// error rotates with `T`, the body attitude error is unchanged.
pub fn transform_pose_covariance(cov: &Matrix6<f64>, t: &RigidTransform) -> Matrix6<f64> {
    let mut j = Matrix6::identity();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&t.rotation_matrix());
    j * cov * j.transpose()
}

/// Header of ground-truth and trajectory CSV files; trajectory files append
/// further columns.
pub const POSE_COLUMNS: [&str; 8] = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz"];

/// Reads the pose columns of a trajectory or ground-truth CSV. Extra columns
/// are ignored.
pub fn read_poses(path: &Path) -> Result<Vec<TimedPose>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_poses_from(file, &path.display().to_string())
}

pub fn read_poses_from<R: std::io::Read>(reader: R, name: &str) -> Result<Vec<TimedPose>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{name}: {e}")))?
        .clone();
    let mut cols = [0usize; 8];
    for (c, key) in cols.iter_mut().zip(POSE_COLUMNS) {
        *c = headers
            .iter()
            .position(|h| h == key)
            .ok_or_else(|| Error::Data(format!("{name}: missing column '{key}'")))?;
    }
    let mut out: Vec<TimedPose> = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{name}: {e}")))?;
        let mut v = [0.0; 8];
        for (x, &c) in v.iter_mut().zip(&cols) {
            *x = rec
                .get(c)
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::Data(format!("{name}: row {}: bad number in column {c}", row + 1)))?;
        }
        let q = quaternion_from_wxyz([v[4], v[5], v[6], v[7]])
            .ok_or_else(|| Error::Data(format!("{name}: row {}: quaternion is not unit norm", row + 1)))?;
        if let Some(prev) = out.last() {
            if v[0] <= prev.timestamp {
                return Err(Error::Data(format!("{name}: row {}: timestamp does not increase", row + 1)));
            }
        }
        out.push(TimedPose::new(v[0], RigidTransform::new(q, Vector3::new(v[1], v[2], v[3]))));
    }
    Ok(out)
}

/// Writes `t,px,py,pz,qw,qx,qy,qz` rows.
pub fn write_poses(path: &Path, poses: &[TimedPose]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let wrap = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(POSE_COLUMNS).map_err(wrap)?;
    for p in poses {
        w.write_record(pose_fields(p)).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Pose columns formatted with round-trip precision.
pub fn pose_fields(p: &TimedPose) -> [String; 8] {
    let t = p.pose.translation;
    let q = p.pose.rotation;
    [p.timestamp, t.x, t.y, t.z, q.w, q.i, q.j, q.k].map(|x| format!("{x:?}"))
}
