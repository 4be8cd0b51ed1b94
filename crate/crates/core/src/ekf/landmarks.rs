use nalgebra::{DMatrix, Matrix2, Vector2};

use super::state::{landmark_offset, LandmarkState, LANDMARK_DIM};
use super::{Ekf, NoiseParams};
use crate::camera::BearingVector;
use crate::error::{Error, Result};

/// Inverse distance and its standard deviation for a landmark along
/// `bearing`. `depth` is the z-depth reading and its standard deviation;
/// the distance is `z / mu_z`, and `d(1/d)/dd = -1/d^2` maps the error.
pub fn inverse_depth_prior(bearing: &BearingVector, depth: Option<(f64, f64)>, noise: &NoiseParams) -> (f64, f64) {
    match depth {
        Some((z, sigma_z)) if z > 0.0 => {
            let mu_z = bearing.to_unit().z;
            let dist = z / mu_z;
            (1.0 / dist, sigma_z / mu_z / (dist * dist))
        }
        _ => (noise.initial_inv_depth, noise.initial_inv_depth_sigma),
    }
}

impl Ekf {
    /// Adds a landmark observed at `pixel`. Its bearing covariance is the
    /// pixel noise pulled back through the projection; it starts
    /// uncorrelated with the rest of the state. Returns the new index.
    pub fn add_landmark(&mut self, id: u64, pixel: &Vector2<f64>, depth: Option<(f64, f64)>) -> Result<usize> {
        if self.state.landmarks.len() >= self.params.max_landmarks {
            return Err(Error::Data(format!(
                "no open landmark slot ({} in use)",
                self.params.max_landmarks
            )));
        }
        if self.landmark_index(id).is_some() {
            return Err(Error::Data(format!("landmark id {id} already present")));
        }
        let bearing = self.camera.pixel_to_bearing(pixel);
        let (_, j) = self
            .camera
            .bearing_to_pixel_with_jacobian(&bearing)
            .ok_or_else(|| Error::Data(format!("pixel {pixel:?} has no forward bearing")))?;
        let j_inv = j
            .try_inverse()
            .ok_or_else(|| Error::Numerical(format!("singular projection Jacobian at {pixel:?}")))?;
        let bearing_cov: Matrix2<f64> = j_inv * j_inv.transpose() * self.noise.pixel_noise.powi(2);
        let (rho, sigma_rho) = inverse_depth_prior(&bearing, depth, &self.noise);
        let rho = rho.clamp(self.params.rho_min(), self.params.rho_max());

        let n = self.cov.nrows();
        let mut cov = DMatrix::zeros(n + LANDMARK_DIM, n + LANDMARK_DIM);
        cov.view_mut((0, 0), (n, n)).copy_from(&self.cov);
        cov.fixed_view_mut::<2, 2>(n, n).copy_from(&bearing_cov);
        cov[(n + 2, n + 2)] = sigma_rho * sigma_rho;
        self.cov = cov;
        self.state.landmarks.push(LandmarkState {
            id,
            bearing,
            inv_depth: rho,
        });
        Ok(self.state.landmarks.len() - 1)
    }

    /// Marginalises landmark `index` out by deleting its rows and columns.
    pub fn remove_landmark(&mut self, index: usize) -> Result<()> {
        if index >= self.state.landmarks.len() {
            return Err(Error::Data(format!(
                "landmark index {index} out of range ({} live)",
                self.state.landmarks.len()
            )));
        }
        let o = landmark_offset(index);
        let cov = std::mem::replace(&mut self.cov, DMatrix::zeros(0, 0));
        self.cov = cov.remove_rows(o, LANDMARK_DIM).remove_columns(o, LANDMARK_DIM);
        self.state.landmarks.remove(index);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::PinholeCamera;
    use crate::ekf::state::{FilterState, ROBOT_DIM};
    use crate::ekf::{initial_covariance, FilterParams};
    use crate::geometry::RigidTransform;
    use approx::assert_relative_eq;

    fn ekf() -> Ekf {
        Ekf::new(
            FilterState::default(),
            initial_covariance(),
            NoiseParams::default(),
            FilterParams::default(),
            PinholeCamera::new(400.0, 400.0, 319.5, 239.5, 640, 480).unwrap(),
            RigidTransform::identity(),
        )
        .unwrap()
    }

    #[test]
    fn principal_point_with_depth() {
        let mut f = ekf();
        let i = f.add_landmark(1, &Vector2::new(319.5, 239.5), Some((2.0, 0.01))).unwrap();
        let lm = f.state().landmarks[i];
        assert_relative_eq!(lm.bearing.azimuth, 0.0);
        assert_relative_eq!(lm.bearing.elevation, 0.0);
        assert_relative_eq!(lm.inv_depth, 0.5);
        assert_eq!(f.covariance().nrows(), ROBOT_DIM + 3);
        // sigma_px / f on the axis.
        assert_relative_eq!(f.covariance()[(15, 15)], (1.0f64 / 400.0).powi(2), epsilon = 1e-15);
        assert_relative_eq!(f.covariance()[(17, 17)], (0.01f64 / 4.0).powi(2), epsilon = 1e-15);
        assert!(f.covariance().view((0, 15), (15, 3)).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn depth_noise_maps_through_inverse() {
        let (rho, sigma) = inverse_depth_prior(&BearingVector::new(0.0, 0.0), Some((4.0, 0.019)), &NoiseParams::default());
        assert_relative_eq!(rho, 0.25);
        assert_relative_eq!(sigma, 0.019 / 16.0);
        assert!((sigma - 0.0012).abs() < 1e-4);
        // Off-axis: distance, not z, is inverted.
        let b = BearingVector::from_vector(&nalgebra::Vector3::new(1.0, 0.0, 1.0));
        let (rho, _) = inverse_depth_prior(&b, Some((2.0, 0.01)), &NoiseParams::default());
        assert_relative_eq!(rho, 1.0 / (2.0 * 2f64.sqrt()), epsilon = 1e-12);
    }

    #[test]
    fn missing_depth_uses_default_prior() {
        let mut f = ekf();
        f.add_landmark(7, &Vector2::new(100.0, 50.0), None).unwrap();
        assert_eq!(f.state().landmarks[0].inv_depth, 0.5);
        assert_relative_eq!(f.covariance()[(17, 17)], 0.25);
    }

    #[test]
    fn remove_keeps_other_blocks_exactly() {
        let mut f = ekf();
        for id in 0..4 {
            f.add_landmark(id, &Vector2::new(100.0 + 50.0 * id as f64, 200.0), Some((1.5 + id as f64 * 0.1, 0.01)))
                .unwrap();
        }
        // Introduce cross-covariance.
        f.propagate(&nalgebra::Vector3::new(0.3, 0.0, 9.81), &nalgebra::Vector3::new(0.1, 0.2, 0.0), 0.1).unwrap();
        let before = f.covariance().clone();
        let robot = f.state().clone();
        f.remove_landmark(1).unwrap();
        let after = f.covariance();
        let keep: Vec<usize> = (0..15).chain(15..18).chain(21..27).collect();
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                assert_eq!(after[(a, b)], before[(i, j)]);
            }
        }
        assert_eq!(f.state().landmarks[1], robot.landmarks[2]);
        assert!(f.remove_landmark(3).is_err());
        while f.landmark_count() > 0 {
            f.remove_landmark(0).unwrap();
        }
        assert_eq!(f.covariance().nrows(), 15);
        assert_eq!(f.covariance(), &before.view((0, 0), (15, 15)).into_owned());
    }

    #[test]
    fn slots_are_limited() {
        let mut f = ekf();
        for id in 0..25 {
            f.add_landmark(id, &Vector2::new(100.0 + id as f64 * 10.0, 240.0), None).unwrap();
        }
        assert!(matches!(f.add_landmark(99, &Vector2::new(50.0, 50.0), None), Err(Error::Data(_))));
    }
}
