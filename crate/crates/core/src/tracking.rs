//! Covariance-scaled search windows and descriptor matching of tracked
//! landmarks.

use std::collections::HashMap;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::descriptor::{Descriptor, DescriptorExtractor, FrameDescriptorContext};
use crate::detect::{Keypoint, KeypointModality};
use crate::error::{Error, Result};

fn d_sigma_scale() -> f64 {
    3.0
}
fn d_min_half() -> f64 {
    8.0
}
fn d_max_half() -> f64 {
    64.0
}
fn d_max_hamming() -> u32 {
    64
}
fn d_margin() -> u32 {
    8
}
fn d_true() -> bool {
    true
}
fn d_miss_max() -> u32 {
    3
}
fn d_refill_sep() -> f64 {
    16.0
}
fn d_same_feature() -> f64 {
    3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackingParams {
    /// Confidence scale of the search ellipse, in standard deviations.
    #[serde(default = "d_sigma_scale")]
    pub sigma_scale: f64,
    #[serde(default = "d_min_half")]
    pub min_half_axis: f64,
    #[serde(default = "d_max_half")]
    pub max_half_axis: f64,
    #[serde(default = "d_max_hamming")]
    pub max_hamming: u32,
    /// Required Hamming gap between the best and second-best candidate.
    #[serde(default = "d_margin")]
    pub margin: u32,
    #[serde(default = "d_true")]
    pub use_margin: bool,
    /// Candidates this close (px) to the best one count as the same
    /// feature in the margin test.
    #[serde(default = "d_same_feature")]
    pub same_feature_radius: f64,
    /// Landmarks missed this many consecutive frames are dropped.
    #[serde(default = "d_miss_max")]
    pub miss_max: u32,
    /// New landmarks keep at least this distance (px) from live ones.
    #[serde(default = "d_refill_sep")]
    pub refill_separation: f64,
}

impl Default for TrackingParams {
    fn default() -> Self {
        Self {
            sigma_scale: d_sigma_scale(),
            min_half_axis: d_min_half(),
            max_half_axis: d_max_half(),
            max_hamming: d_max_hamming(),
            margin: d_margin(),
            use_margin: true,
            same_feature_radius: d_same_feature(),
            miss_max: d_miss_max(),
            refill_separation: d_refill_sep(),
        }
    }
}

impl TrackingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_scale > 0.0 && self.min_half_axis > 0.0 && self.min_half_axis <= self.max_half_axis) {
            return Err(Error::Config(
                "tracking window needs sigma_scale > 0 and 0 < min_half_axis <= max_half_axis".into(),
            ));
        }
        if self.miss_max == 0 {
            return Err(Error::Config("tracking.miss_max must be at least 1".into()));
        }
        if self.max_hamming > 256 {
            return Err(Error::Config("tracking.max_hamming cannot exceed 256".into()));
        }
        Ok(())
    }
}

/// Elliptical search region around a predicted pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchWindow {
    pub center: Vector2<f64>,
    /// Major and minor half axes (px).
    pub half_axes: Vector2<f64>,
    /// Angle of the major axis from the image x axis (rad).
    pub orientation: f64,
}

impl SearchWindow {
    /// `sigma_scale`-sigma ellipse of the pixel covariance with half axes
    /// clamped to `[min_half_axis, max_half_axis]`.
    pub fn from_covariance(center: Vector2<f64>, cov: &Matrix2<f64>, params: &TrackingParams) -> Self {
        let sym = (cov + cov.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let (i_major, i_minor) = if eig.eigenvalues[0] >= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
        let axis = |i: usize| {
            (params.sigma_scale * eig.eigenvalues[i].max(0.0).sqrt()).clamp(params.min_half_axis, params.max_half_axis)
        };
        let major = eig.eigenvectors.column(i_major);
        Self {
            center,
            half_axes: Vector2::new(axis(i_major), axis(i_minor)),
            orientation: major[1].atan2(major[0]),
        }
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        let d = p - self.center;
        let (s, c) = self.orientation.sin_cos();
        let a = (c * d.x + s * d.y) / self.half_axes.x;
        let b = (-s * d.x + c * d.y) / self.half_axes.y;
        a * a + b * b <= 1.0
    }

    /// Half widths of the axis-aligned bounding box.
    pub fn bounding_half_extents(&self) -> Vector2<f64> {
        let (s, c) = self.orientation.sin_cos();
        let (a, b) = (self.half_axes.x, self.half_axes.y);
        Vector2::new((a * c).hypot(b * s), (a * s).hypot(b * c))
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.half_axes.x * self.half_axes.y
    }
}

/// Outcome of matching one landmark inside its window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchOutcome {
    /// Candidate index and Hamming distance.
    Matched { candidate: usize, distance: u32 },
    NoCandidates,
    TooDistant { best: u32 },
    Ambiguous { best: u32, second: u32 },
}

/// Picks the nearest descriptor among `(candidate index, pixel, descriptor)`
/// triples: accepted if within `max_hamming` and, when the margin test is
/// on, at least `margin` better than every candidate that is not within
/// `same_feature_radius` of the winner.
pub fn select_match(reference: &Descriptor, scored: &[(usize, Vector2<f64>, Descriptor)], params: &TrackingParams) -> MatchOutcome {
    let mut ranked: Vec<(u32, usize, Vector2<f64>)> =
        scored.iter().map(|(i, p, d)| (reference.hamming(d), *i, *p)).collect();
    if ranked.is_empty() {
        return MatchOutcome::NoCandidates;
    }
    ranked.sort_by_key(|&(d, i, _)| (d, i));
    let (best, idx, at) = ranked[0];
    if best > params.max_hamming {
        return MatchOutcome::TooDistant { best };
    }
    if params.use_margin {
        let r2 = params.same_feature_radius.powi(2);
        if let Some(&(second, _, _)) = ranked[1..].iter().find(|(_, _, p)| (p - at).norm_squared() > r2) {
            if second < best + params.margin {
                return MatchOutcome::Ambiguous { best, second };
            }
        }
    }
    MatchOutcome::Matched {
        candidate: idx,
        distance: best,
    }
}

const GRID_CELL: f64 = 16.0;

/// Candidate keypoints of one frame with a spatial index and lazily
/// extracted descriptors.
pub struct CandidatePool<'a> {
    candidates: Vec<Keypoint>,
    grid: HashMap<(i64, i64), Vec<usize>>,
    descriptors: Vec<Option<Option<Descriptor>>>,
    ctx: FrameDescriptorContext<'a>,
    extractor: &'a DescriptorExtractor,
}

impl<'a> CandidatePool<'a> {
    pub fn new(candidates: Vec<Keypoint>, ctx: FrameDescriptorContext<'a>, extractor: &'a DescriptorExtractor) -> Self {
        let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, k) in candidates.iter().enumerate() {
            grid.entry(cell_of(&k.pixel)).or_default().push(i);
        }
        let n = candidates.len();
        Self {
            candidates,
            grid,
            descriptors: vec![None; n],
            ctx,
            extractor,
        }
    }

    pub fn candidates(&self) -> &[Keypoint] {
        &self.candidates
    }

    pub fn context(&self) -> &FrameDescriptorContext<'a> {
        &self.ctx
    }

    /// Descriptor of candidate `i`, extracted on first use. `None` when the
    /// keypoint cannot be described (window off the image, no information).
    pub fn descriptor(&mut self, i: usize) -> Option<Descriptor> {
        if self.descriptors[i].is_none() {
            let d = self.extractor.extract(&self.ctx, &self.candidates[i].pixel).ok();
            self.descriptors[i] = Some(d);
        }
        self.descriptors[i].expect("filled")
    }

    /// Indices of candidates inside the ellipse, ascending.
    pub fn in_window(&self, window: &SearchWindow) -> Vec<usize> {
        let ext = window.bounding_half_extents();
        let lo = cell_of(&(window.center - ext));
        let hi = cell_of(&(window.center + ext));
        let mut out = Vec::new();
        for gx in lo.0..=hi.0 {
            for gy in lo.1..=hi.1 {
                if let Some(ids) = self.grid.get(&(gx, gy)) {
                    out.extend(ids.iter().copied().filter(|&i| window.contains(&self.candidates[i].pixel)));
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Matches a landmark descriptor against the candidates in its window.
    pub fn match_in_window(&mut self, reference: &Descriptor, window: &SearchWindow, params: &TrackingParams) -> MatchOutcome {
        let scored: Vec<(usize, Vector2<f64>, Descriptor)> = self
            .in_window(window)
            .into_iter()
            .filter_map(|i| self.descriptor(i).map(|d| (i, self.candidates[i].pixel, d)))
            .collect();
        select_match(reference, &scored, params)
    }
}

fn cell_of(p: &Vector2<f64>) -> (i64, i64) {
    ((p.x / GRID_CELL).floor() as i64, (p.y / GRID_CELL).floor() as i64)
}

/// Bookkeeping of a landmark held by the filter.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackedLandmark {
    pub id: u64,
    /// Descriptor from the first observation.
    pub descriptor: Descriptor,
    pub modality: KeypointModality,
    pub first_frame: usize,
    pub last_seen_frame: usize,
    pub miss_count: u32,
}

/// Result of one landmark's frame: matched or missed, and whether it must
/// go.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Observation {
    Matched,
    Missed,
    OutOfView,
}

/// Landmark records in filter order with never-reused ids.
#[derive(Clone, Debug, Default)]
pub struct LandmarkTable {
    records: Vec<TrackedLandmark>,
    next_id: u64,
}

impl LandmarkTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[TrackedLandmark] {
        &self.records
    }

    pub fn get(&self, index: usize) -> Option<&TrackedLandmark> {
        self.records.get(index)
    }

    /// Reserves a fresh id.
    pub fn allocate_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn push(&mut self, record: TrackedLandmark) {
        debug_assert!(record.id < self.next_id);
        self.records.push(record);
    }

    pub fn remove(&mut self, index: usize) -> TrackedLandmark {
        self.records.remove(index)
    }

    /// Updates miss counters and returns the indices to drop, descending so
    /// they can be removed in order.
    pub fn observe(&mut self, frame: usize, observations: &[Observation], miss_max: u32) -> Vec<usize> {
        assert_eq!(observations.len(), self.records.len());
        let mut drop = Vec::new();
        for (i, (rec, obs)) in self.records.iter_mut().zip(observations).enumerate() {
            match obs {
                Observation::Matched => {
                    rec.miss_count = 0;
                    rec.last_seen_frame = frame;
                }
                Observation::Missed => rec.miss_count += 1,
                Observation::OutOfView => {
                    rec.miss_count += 1;
                    drop.push(i);
                    continue;
                }
            }
            if rec.miss_count >= miss_max {
                drop.push(i);
            }
        }
        drop.reverse();
        drop
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn desc(seed: u64) -> Descriptor {
        let mut z = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        let mut words = [0u64; 4];
        for w in &mut words {
            z ^= z << 13;
            z ^= z >> 7;
            z ^= z << 17;
            *w = z;
        }
        Descriptor::from_parts(words, [0; 4]).unwrap()
    }

    /// Copy of `d` with its first `k` bits flipped.
    fn flipped(d: &Descriptor, k: usize) -> Descriptor {
        let mut w = *d.bits();
        for i in 0..k {
            w[i / 64] ^= 1 << (i % 64);
        }
        Descriptor::from_parts(w, [0; 4]).unwrap()
    }

    fn at(x: f64, y: f64) -> Vector2<f64> {
        Vector2::new(x, y)
    }

    #[test]
    fn single_candidate_matches() {
        let r = desc(1);
        let out = select_match(&r, &[(4, at(10.0, 10.0), flipped(&r, 10))], &TrackingParams::default());
        assert_eq!(out, MatchOutcome::Matched { candidate: 4, distance: 10 });
    }

    #[test]
    fn margin_violation_rejects() {
        let r = desc(2);
        let c = [(0, at(10.0, 10.0), flipped(&r, 30)), (1, at(40.0, 10.0), flipped(&r, 33))];
        let params = TrackingParams::default();
        assert_eq!(select_match(&r, &c, &params), MatchOutcome::Ambiguous { best: 30, second: 33 });
        let off = TrackingParams {
            use_margin: false,
            ..params.clone()
        };
        assert_eq!(select_match(&r, &c, &off), MatchOutcome::Matched { candidate: 0, distance: 30 });
        // A near-duplicate of the winner (same feature) does not count.
        let dup = [(0, at(10.0, 10.0), flipped(&r, 30)), (1, at(11.0, 11.0), flipped(&r, 31))];
        assert_eq!(select_match(&r, &dup, &params), MatchOutcome::Matched { candidate: 0, distance: 30 });
    }

    #[test]
    fn empty_and_distant() {
        let r = desc(3);
        let params = TrackingParams::default();
        assert_eq!(select_match(&r, &[], &params), MatchOutcome::NoCandidates);
        let far = [(0, at(0.0, 0.0), flipped(&r, 65))];
        assert_eq!(select_match(&r, &far, &params), MatchOutcome::TooDistant { best: 65 });
    }

    #[test]
    fn window_scales_with_sqrt_of_covariance() {
        let params = TrackingParams::default();
        let cov = Matrix2::new(9.0, 0.0, 0.0, 4.0);
        let w = SearchWindow::from_covariance(at(100.0, 100.0), &cov, &params);
        assert!((w.half_axes - Vector2::new(9.0, 8.0)).norm() < 1e-12); // minor 6 clamped to 8
        let w100 = SearchWindow::from_covariance(at(100.0, 100.0), &(cov * 100.0), &params);
        assert!((w100.half_axes - Vector2::new(64.0, 60.0)).norm() < 1e-9); // 90 capped, 60
        let small = Matrix2::new(16.0, 0.0, 0.0, 16.0);
        let w = SearchWindow::from_covariance(at(0.0, 0.0), &small, &params);
        let w100 = SearchWindow::from_covariance(at(0.0, 0.0), &(small * 100.0), &TrackingParams {
            max_half_axis: 1000.0,
            ..params
        });
        assert!((w100.half_axes - w.half_axes * 10.0).norm() < 1e-9);
    }

    #[test]
    fn tilted_window_membership() {
        let params = TrackingParams::default();
        // Major axis along the diagonal.
        let cov = Matrix2::new(200.0, 190.0, 190.0, 200.0);
        let w = SearchWindow::from_covariance(at(0.0, 0.0), &cov, &params);
        assert!(w.contains(&at(40.0, 40.0)));
        assert!(!w.contains(&at(40.0, -40.0)));
        let ext = w.bounding_half_extents();
        assert!(ext.x >= 40.0 && ext.y >= 40.0);
    }

    #[test]
    fn miss_policy_drops_after_three() {
        let mut table = LandmarkTable::new();
        for _ in 0..3 {
            let id = table.allocate_id();
            table.push(TrackedLandmark {
                id,
                descriptor: desc(id),
                modality: KeypointModality::VisualOnly,
                first_frame: 0,
                last_seen_frame: 0,
                miss_count: 0,
            });
        }
        use Observation::*;
        assert!(table.observe(1, &[Matched, Missed, Matched], 3).is_empty());
        assert!(table.observe(2, &[Matched, Missed, Matched], 3).is_empty());
        assert_eq!(table.observe(3, &[Matched, Missed, OutOfView], 3), vec![2, 1]);
        table.remove(2);
        table.remove(1);
        let id = table.allocate_id();
        assert_eq!(id, 3, "ids are never recycled");
        assert_eq!(table.records()[0].last_seen_frame, 3);
    }

    proptest! {
        #[test]
        fn window_area_monotone_in_trace(a in 0.1f64..500.0, b in 0.1f64..500.0, c in -1.0f64..1.0, k in 1.0f64..4.0) {
            let params = TrackingParams { max_half_axis: 1e9, ..Default::default() };
            let off = c * (a * b).sqrt() * 0.99;
            let cov = Matrix2::new(a, off, off, b);
            let w1 = SearchWindow::from_covariance(at(0.0, 0.0), &cov, &params);
            let w2 = SearchWindow::from_covariance(at(0.0, 0.0), &(cov * k), &params);
            prop_assert!(w2.area() >= w1.area() - 1e-9);
        }

        #[test]
        fn pool_lookup_matches_brute_force(
            pts in proptest::collection::vec((0.0f64..320.0, 0.0f64..240.0), 0..200),
            cx in 0.0f64..320.0, cy in 0.0f64..240.0,
            a in 1.0f64..2000.0, b in 1.0f64..2000.0, c in -0.9f64..0.9,
        ) {
            use crate::camera::PinholeCamera;
            use crate::descriptor::{DarkNoiseModel, DescriptorParams};
            use crate::frame::{DepthRange, RegisteredFrame};
            use crate::image::{DepthImage, GrayImage};
            let frame = RegisteredFrame::new(
                0.0,
                GrayImage::new(320, 240, 0),
                DepthImage::new(320, 240, 0.0),
                PinholeCamera::new(300.0, 300.0, 160.0, 120.0, 320, 240).unwrap(),
                DepthRange::default(),
            ).unwrap();
            let extractor = DescriptorExtractor::new(DescriptorParams::default(), DarkNoiseModel::default());
            let kps: Vec<Keypoint> = pts.iter().map(|&(x, y)| Keypoint {
                pixel: at(x.round(), y.round()),
                score: 1.0,
                modality: KeypointModality::VisualOnly,
                depth: None,
            }).collect();
            let pool = CandidatePool::new(kps.clone(), FrameDescriptorContext::new(&frame), &extractor);
            let off = c * (a * b).sqrt();
            let w = SearchWindow::from_covariance(at(cx, cy), &Matrix2::new(a, off, off, b), &TrackingParams::default());
            let brute: Vec<usize> = (0..kps.len()).filter(|&i| w.contains(&kps[i].pixel)).collect();
            prop_assert_eq!(pool.in_window(&w), brute);
        }
    }
}
