use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use super::state::landmark_offset;
use super::{check_psd, symmetrize, Ekf, CHI2_1DOF_99, CHI2_2DOF_99};
use crate::error::{Error, Result};

/// A matched observation of a live landmark.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LandmarkMeasurement {
    pub index: usize,
    pub pixel: Vector2<f64>,
    /// Registered z-depth at the pixel and its standard deviation, used only
    /// when depth updates are enabled.
    pub depth: Option<(f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateReport {
    /// Landmark indices whose reprojection passed the gate.
    pub accepted: Vec<usize>,
    /// Landmark indices gated out or out of view.
    pub rejected: Vec<usize>,
    /// Squared Mahalanobis distance of every accepted innovation.
    pub nis: Vec<f64>,
}

struct Row {
    /// First error-state column and the nonzero Jacobian entries from it.
    col: usize,
    jac: [f64; 2],
    width: usize,
    innovation: f64,
    variance: f64,
}

impl Ekf {
    /// Pixel innovation and its Jacobian with respect to the landmark's
    /// `(azimuth, elevation)`. `None` if the bearing is not in front of the
    /// camera.
    pub fn reprojection(&self, m: &LandmarkMeasurement) -> Option<(Vector2<f64>, Matrix2<f64>)> {
        let lm = self.state.landmarks.get(m.index)?;
        let (pred, j) = self.camera.bearing_to_pixel_with_jacobian(&lm.bearing)?;
        Some((m.pixel - pred, j))
    }

    /// Gated, stacked EKF update with pixel reprojection innovations and
    /// (optionally) inverse-depth measurements. Gated-out measurements are
    /// skipped; with none left the filter is unchanged.
    pub fn update(&mut self, measurements: &[LandmarkMeasurement]) -> Result<UpdateReport> {
        let mut report = UpdateReport::default();
        let mut rows: Vec<Row> = Vec::new();
        let r_px = self.noise.pixel_noise.powi(2);
        for m in measurements {
            if m.index >= self.state.landmarks.len() {
                return Err(Error::Data(format!("measurement for unknown landmark index {}", m.index)));
            }
            let Some((y, j)) = self.reprojection(m) else {
                report.rejected.push(m.index);
                continue;
            };
            let o = landmark_offset(m.index);
            let sigma = self.cov.fixed_view::<2, 2>(o, o).into_owned();
            let s = j * sigma * j.transpose() + Matrix2::identity() * r_px;
            let nis = s.try_inverse().map(|si| (y.transpose() * si * y)[0]).unwrap_or(f64::INFINITY);
            if !(nis <= CHI2_2DOF_99) {
                report.rejected.push(m.index);
                continue;
            }
            report.accepted.push(m.index);
            report.nis.push(nis);
            for k in 0..2 {
                rows.push(Row {
                    col: o,
                    jac: [j[(k, 0)], j[(k, 1)]],
                    width: 2,
                    innovation: y[k],
                    variance: r_px,
                });
            }
            if let (true, Some((z, sigma_z))) = (self.params.depth_update, m.depth) {
                if z > 0.0 {
                    let lm = &self.state.landmarks[m.index];
                    let mu_z = self.camera.pixel_to_bearing(&m.pixel).to_unit().z;
                    let dist = z / mu_z;
                    let measured = 1.0 / dist;
                    let var = (sigma_z / mu_z / (dist * dist)).powi(2);
                    let y = measured - lm.inv_depth;
                    let s = self.cov[(o + 2, o + 2)] + var;
                    if y * y / s <= CHI2_1DOF_99 {
                        rows.push(Row {
                            col: o + 2,
                            jac: [1.0, 0.0],
                            width: 1,
                            innovation: y,
                            variance: var,
                        });
                    }
                }
            }
        }
        if rows.is_empty() {
            return Ok(report);
        }

        let n = self.cov.nrows();
        let m = rows.len();
        let mut h = DMatrix::zeros(m, n);
        let mut y = DVector::zeros(m);
        let mut r = DMatrix::zeros(m, m);
        for (i, row) in rows.iter().enumerate() {
            for c in 0..row.width {
                h[(i, row.col + c)] = row.jac[c];
            }
            y[i] = row.innovation;
            r[(i, i)] = row.variance;
        }
        let pht = &self.cov * h.transpose();
        let s = &h * &pht + &r;
        let chol = s
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical(format!("innovation covariance ({m}x{m}) is not positive definite")))?;
        let k = chol.solve(&pht.transpose()).transpose();
        let dx = &k * &y;
        let ikh = DMatrix::identity(n, n) - &k * &h;
        let mut cov = &ikh * &self.cov * ikh.transpose() + &k * &r * k.transpose();
        symmetrize(&mut cov);
        check_psd(&cov)?;
        self.state = self.state.boxplus(&dx, self.params.rho_min(), self.params.rho_max());
        if !self.state.is_finite() {
            return Err(Error::Numerical("state became non-finite during update".into()));
        }
        self.cov = cov;
        Ok(report)
    }
}
