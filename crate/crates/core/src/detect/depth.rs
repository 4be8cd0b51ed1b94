use super::{is_local_max, DetectorParams, ScoreMap, ScoreModality};
use crate::image::DepthImage;

/// Expected depth error `a0 + a1 d + a2 d^2` (m). `None` for `d <= 0`.
pub fn depth_error(d: f64, coeffs: &[f64; 3]) -> Option<f64> {
    (d > 0.0).then(|| coeffs[0] + coeffs[1] * d + coeffs[2] * d * d)
}

const NEIGHBOURS: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

/// Depth score map.
///
/// 1. 4-neighbour Laplacian wherever the full 3x3 stencil has valid depth.
/// 2. Raw score `max(L - sum of the 8 neighbours' expected errors, 0)`;
///    foreground pixels next to a farther surface have `L > 0`.
/// 3. 3x3 non-maximum suppression.
/// 4. Keep pixels whose Sobel depth-gradient direction, folded into one
///    quadrant, lies in `[30, 60]` degrees.
/// 5. Divide survivors by the strongest one.
pub fn compute_depth_score_map(depth: &DepthImage, params: &DetectorParams) -> ScoreMap {
    let (w, h) = depth.dims();
    let mut map = ScoreMap::zeros(w, h, ScoreModality::Depth);
    if w < 3 || h < 3 {
        return map;
    }
    let d = depth.data();
    let at = |x: usize, y: usize, dx: isize, dy: isize| d[(y as isize + dy) as usize * w + (x as isize + dx) as usize] as f64;
    let mut raw = vec![0.0f32; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = d[y * w + x] as f64;
            if c <= 0.0 {
                continue;
            }
            let mut noise = 0.0;
            let mut valid = true;
            for &(dx, dy) in &NEIGHBOURS {
                match depth_error(at(x, y, dx, dy), &params.depth_error_coeffs) {
                    Some(e) => noise += e,
                    None => {
                        valid = false;
                        break;
                    }
                }
            }
            if !valid {
                continue;
            }
            let lap = at(x, y, -1, 0) + at(x, y, 1, 0) + at(x, y, 0, -1) + at(x, y, 0, 1) - 4.0 * c;
            raw[y * w + x] = (lap - noise).max(0.0) as f32;
        }
    }

    let mut survivors = Vec::new();
    let mut max = 0.0f32;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let v = raw[y * w + x];
            if v <= 0.0 || !is_local_max(&raw, w, x, y) {
                continue;
            }
            let gx = (at(x, y, 1, -1) + 2.0 * at(x, y, 1, 0) + at(x, y, 1, 1))
                - (at(x, y, -1, -1) + 2.0 * at(x, y, -1, 0) + at(x, y, -1, 1));
            let gy = (at(x, y, -1, 1) + 2.0 * at(x, y, 0, 1) + at(x, y, 1, 1))
                - (at(x, y, -1, -1) + 2.0 * at(x, y, 0, -1) + at(x, y, 1, -1));
            if !diagonal_gradient(gx, gy) {
                continue;
            }
            survivors.push((x, y, v));
            max = max.max(v);
        }
    }
    for (x, y, v) in survivors {
        map.values.set(x, y, (v / max).max(f32::MIN_POSITIVE));
    }
    map
}

/// Gradient direction folded into `[0, 90)` degrees lies in `[30, 60]`.
#[inline]
fn diagonal_gradient(gx: f64, gy: f64) -> bool {
    if gx == 0.0 && gy == 0.0 {
        return false;
    }
    let folded = gy.atan2(gx).to_degrees().rem_euclid(90.0);
    (30.0..=60.0).contains(&folded)
}

/// Raw (pre-suppression) score at one pixel, for tests and diagnostics.
#[cfg(test)]
fn raw_score(depth: &DepthImage, x: usize, y: usize, params: &DetectorParams) -> Option<f64> {
    let c = depth.get(x, y) as f64;
    let mut noise = 0.0;
    for &(dx, dy) in &NEIGHBOURS {
        noise += depth_error(depth.get_checked(x as isize + dx, y as isize + dy)? as f64, &params.depth_error_coeffs)?;
    }
    let lap = depth.get(x - 1, y) as f64 + depth.get(x + 1, y) as f64 + depth.get(x, y - 1) as f64 + depth.get(x, y + 1) as f64
        - 4.0 * c;
    Some((lap - noise).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn depth_error_examples() {
        let quad = [0.0, 0.0, 0.001];
        assert!((depth_error(2.0, &quad).unwrap() - 0.004).abs() < 1e-15);
        assert_eq!(depth_error(0.75, &[0.0; 3]), Some(0.0));
        assert_eq!(depth_error(4.0, &quad).unwrap(), 4.0 * depth_error(2.0, &quad).unwrap());
        assert_eq!(depth_error(0.0, &quad), None);
        assert_eq!(depth_error(-1.0, &quad), None);
    }

    #[test]
    fn depth_error_is_monotone_on_sensor_range() {
        let coeffs = DetectorParams::default().depth_error_coeffs;
        let mut prev = 0.0;
        for i in 0..=100 {
            let d = 0.75 + (6.0 - 0.75) * i as f64 / 100.0;
            let e = depth_error(d, &coeffs).unwrap();
            assert!(e >= prev);
            prev = e;
        }
    }

    #[test]
    fn planar_depth_has_empty_map() {
        // Tilted plane: z linear in the pixel coordinates, Laplacian zero.
        let depth = DepthImage::from_fn(64, 48, |x, y| 1.5 + 0.01 * x as f32 + 0.004 * y as f32);
        assert_eq!(compute_depth_score_map(&depth, &DetectorParams::default()).nonzero_count(), 0);
    }

    /// Foreground at 1 m where `x + y < 40`, background 0.5 m farther.
    fn diagonal_step(step: f32) -> DepthImage {
        DepthImage::from_fn(64, 64, |x, y| if x + y < 40 { 1.0 } else { 1.0 + step })
    }

    #[test]
    fn step_edge_scores_foreground_side_only() {
        let params = DetectorParams {
            depth_error_coeffs: [0.0, 0.0, 0.001],
            ..Default::default()
        };
        let depth = diagonal_step(0.5);
        // Analytic raw score on the foreground rim: two neighbours 0.5 m
        // farther give L = 1.0; the noise sum is 5 * 1e-3 + 3 * 2.25e-3.
        let rim = raw_score(&depth, 20, 19, &params).unwrap();
        assert!((rim - (1.0 - 0.01175)).abs() < 1e-6, "{rim}");
        assert_eq!(raw_score(&depth, 20, 20, &params).unwrap(), 0.0);
        let map = compute_depth_score_map(&depth, &params);
        assert!(map.nonzero_count() > 0);
        for y in 0..64 {
            for x in 0..64 {
                if map.get(x, y) > 0.0 {
                    assert_eq!(x + y, 39, "score off the foreground rim at ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn step_below_noise_floor_is_filtered() {
        // 8 neighbours * 0.01 * 1^2 = 0.08 m of expected error versus a
        // 0.03 m step (L <= 0.06).
        let params = DetectorParams {
            depth_error_coeffs: [0.0, 0.0, 0.01],
            ..Default::default()
        };
        let map = compute_depth_score_map(&diagonal_step(0.03), &params);
        assert_eq!(map.nonzero_count(), 0);
    }

    #[test]
    fn axis_aligned_edge_is_rejected_by_direction_band() {
        let depth = DepthImage::from_fn(64, 48, |x, _| if x < 30 { 1.0 } else { 2.0 });
        assert_eq!(compute_depth_score_map(&depth, &DetectorParams::default()).nonzero_count(), 0);
    }

    #[test]
    fn box_corner_is_detected() {
        // Near rectangle over a far wall: the four silhouette corners have
        // diagonal gradients.
        let depth = DepthImage::from_fn(80, 60, |x, y| if (20..50).contains(&x) && (15..40).contains(&y) { 1.2 } else { 3.0 });
        let map = compute_depth_score_map(&depth, &DetectorParams::default());
        let nz: Vec<_> = (0..60).flat_map(|y| (0..80).map(move |x| (x, y))).filter(|&(x, y)| map.get(x, y) > 0.0).collect();
        assert_eq!(nz, vec![(20, 15), (49, 15), (20, 39), (49, 39)]);
    }

    #[test]
    fn invalid_pixels_break_the_stencil() {
        let mut depth = DepthImage::from_fn(80, 60, |x, y| if (20..50).contains(&x) && (15..40).contains(&y) { 1.2 } else { 3.0 });
        depth.set(19, 14, 0.0);
        let map = compute_depth_score_map(&depth, &DetectorParams::default());
        assert_eq!(map.get(20, 15), 0.0);
    }

    proptest! {
        #[test]
        fn raw_scores_never_negative(seed in proptest::collection::vec(0.8f32..5.5, 100)) {
            let depth = DepthImage::from_vec(10, 10, seed).unwrap();
            let params = DetectorParams::default();
            for y in 1..9 {
                for x in 1..9 {
                    prop_assert!(raw_score(&depth, x, y, &params).unwrap() >= 0.0);
                }
            }
            let map = compute_depth_score_map(&depth, &params);
            prop_assert!(map.values.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
