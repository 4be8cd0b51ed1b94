//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vdi_core::camera::{BearingVector, Distortion, PinholeCamera};
use vdi_core::config::PipelineConfig;
use vdi_core::dataset::Event;
use vdi_core::descriptor::{
    visual_bit, DarkNoiseModel, DescriptorExtractor, DescriptorMode, DescriptorParams, FrameDescriptorContext,
};
use vdi_core::detect::{
    combine_score_maps, compute_depth_score_map, compute_visual_score_map, depth_error, select_keypoints, DetectorParams,
    Keypoint, KeypointModality, ScoreMap, ScoreModality,
};
use vdi_core::ekf::propagate::{propagate_mean, propagation_jacobian};
use vdi_core::ekf::state::{landmark_offset, FilterState, LandmarkState};
use vdi_core::ekf::{Ekf, FilterParams, NoiseParams};
use vdi_core::eval::{evaluate_ate, final_drift, pose_nees, transform_pose_covariance, TimedPose, CHI2_6DOF_99};
use vdi_core::frame::{DepthRange, RegisteredFrame};
use vdi_core::geometry::RigidTransform;
use vdi_core::image::{DepthImage, GrayImage, Image};
use vdi_core::pipeline::{ground_truth_poses, run_simulation, run_simulation_with, write_trajectory_csv, RunOptions, RunOutput};
use vdi_core::sim::trajectory::TrajectorySpec;
use vdi_core::sim::{default_cam_from_imu, SimConfig, SimNoise, Simulation};

const RECT_ATE: f64 = 0.10;
const RECT_LAP: f64 = 13.5;
const RECT_DRIFT_FRACTION: f64 = 0.02;
const RECT_RUNTIME_S: f64 = 60.0;
const DARK_MIN_LANDMARKS: usize = 10;
const DARK_ATE: f64 = 0.15;
const RANDOM_MAPS: usize = 1000;
const RANDOM_FRAMES: u64 = 100;
const JACOBIAN_STATES: usize = 100;
const JACOBIAN_REL_ERR: f64 = 1e-5;
const NEES_FRACTION: f64 = 0.95;
const NEES_MIN_FRAMES: usize = 1000;
const DR_POSITION: f64 = 1e-3;
const DR_ROTATION: f64 = 1e-3;
const DR_SECONDS: f64 = 10.0;
const MIN_RATE_HZ: f64 = 10.0;

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(name: &'static str, pass: bool, detail: String) -> Self {
        Self { name, pass, detail }
    }
}

fn main() {
    let started = Instant::now();
    let mut verdicts = Vec::new();
    let (rect, throughput) = rectangle_flight();
    verdicts.push(rect);
    verdicts.push(dark_room());
    verdicts.push(score_maps());
    verdicts.push(descriptors());
    verdicts.push(jacobians());
    verdicts.push(consistency());
    verdicts.push(dead_reckoning());
    verdicts.push(determinism());
    verdicts.push(throughput);

    let mut failed = 0;
    for v in &verdicts {
        println!("{} {:<16} {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
        failed += usize::from(!v.pass);
    }
    println!(
        "{} of {} criteria passed in {:.1} s",
        verdicts.len() - failed,
        verdicts.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn single_core() -> RunOptions {
    RunOptions {
        threads: Some(1),
        ..Default::default()
    }
}

fn aligned_ate(sim: &Simulation, out: &RunOutput) -> Option<f64> {
    let est = out.timed_poses();
    let gt = ground_truth_poses(sim, est.iter().map(|p| p.timestamp));
    evaluate_ate(&est, &gt, true).ok().map(|r| r.rmse)
}

/// Drift of the last pose once the estimate is anchored to the ground truth
/// at the first estimated pose (the filter starts with zero yaw and position).
fn anchored_drift(sim: &Simulation, out: &RunOutput) -> Option<f64> {
    let est = out.timed_poses();
    let gt = ground_truth_poses(sim, est.iter().map(|p| p.timestamp));
    let anchor = gt.first()?.pose.compose(&est.first()?.pose.inverse());
    let anchored: Vec<_> = est.iter().map(|p| TimedPose::new(p.timestamp, anchor.compose(&p.pose))).collect();
    final_drift(&anchored, &gt).ok()
}

fn rectangle_flight() -> (Verdict, Verdict) {
    let sim = Simulation::new(SimConfig::rectangle_flight()).expect("scenario");
    let (w, h) = (sim.camera().width, sim.camera().height);
    let out = run_simulation(&sim, &PipelineConfig::default(), single_core()).expect("run");
    let ate = aligned_ate(&sim, &out).unwrap_or(f64::INFINITY);
    let drift = anchored_drift(&sim, &out).unwrap_or(f64::INFINITY);
    let runtime = out.report.stage_seconds.total();
    let drift_max = RECT_DRIFT_FRACTION * RECT_LAP;
    let rect = Verdict::new(
        "rectangle_flight",
        ate < RECT_ATE && drift < drift_max && runtime < RECT_RUNTIME_S,
        format!(
            "{w}x{h}, {} frames: ATE {ate:.4} m (< {RECT_ATE}), final drift {drift:.4} m (< {drift_max:.2}), \
             pipeline time {runtime:.1} s (< {RECT_RUNTIME_S})",
            out.report.frames_processed
        ),
    );
    let rate = out.report.throughput_hz;
    let throughput = Verdict::new(
        "throughput",
        w == 640 && h == 480 && rate >= MIN_RATE_HZ,
        format!("{w}x{h} on one worker thread: {rate:.1} Hz (>= {MIN_RATE_HZ})"),
    );
    (rect, throughput)
}

fn dark_room_sim() -> Simulation {
    Simulation::new(SimConfig::dark_room().with_resolution(320, 240)).expect("scenario")
}

fn dark_room() -> Verdict {
    let sim = dark_room_sim();
    let out = run_simulation(&sim, &PipelineConfig::default(), single_core()).expect("run");
    let ate = aligned_ate(&sim, &out).unwrap_or(f64::INFINITY);
    let after_first = || out.frames.iter().skip(1);
    let min_depth_only = after_first().map(|f| f.established_depth_only).min().unwrap_or(0);
    let min_accepted = after_first().map(|f| f.accepted_depth_only).min().unwrap_or(0);
    let visual_candidates: usize = out.frames.iter().map(|f| f.candidates - f.depth_only_candidates).sum();
    let multimodal_ok = min_depth_only >= DARK_MIN_LANDMARKS && ate < DARK_ATE && visual_candidates == 0;

    // A numerical breakdown of the vision-only filter counts as divergence.
    let (vision_landmarks, vision_ate) = match run_simulation(&sim, &PipelineConfig::default().vision_only(), single_core()) {
        Ok(vision) => (
            vision.frames.iter().skip(1).map(|f| f.landmarks).max().unwrap_or(0),
            aligned_ate(&sim, &vision).unwrap_or(f64::INFINITY),
        ),
        Err(_) => (0, f64::INFINITY),
    };
    let vision_fails = vision_landmarks == 0 || !(vision_ate < DARK_ATE);

    Verdict::new(
        "dark_room",
        multimodal_ok && vision_fails,
        format!(
            "320x240, {} frames: depth-only landmarks per frame min {min_depth_only} (>= {DARK_MIN_LANDMARKS}; \
             min accepted updates {min_accepted}), ATE {ate:.4} m (< {DARK_ATE}); vision-only: max landmarks \
             {vision_landmarks}, ATE {vision_ate:.2} m (must fail)",
            out.frames.len()
        ),
    )
}

/// Collects named check failures.
#[derive(Default)]
struct Checks {
    run: usize,
    failures: Vec<String>,
}

impl Checks {
    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.run += 1;
        if !ok {
            self.failures.push(what());
        }
    }

    fn summary(&self) -> String {
        match self.failures.first() {
            None => format!("{} checks, 0 failures", self.run),
            Some(first) => format!("{} checks, {} failures (first: {first})", self.run, self.failures.len()),
        }
    }
}

fn nonzero_pixels(map: &ScoreMap) -> Vec<(usize, usize)> {
    let (w, h) = map.values.dims();
    (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).filter(|&(x, y)| map.get(x, y) > 0.0).collect()
}

fn score_map_examples(c: &mut Checks) {
    let params = DetectorParams::default();

    let flat = GrayImage::new(64, 48, 117);
    c.check(compute_visual_score_map(&flat, &params).nonzero_count() == 0, || "constant image scored".into());

    let square = 16;
    let board = GrayImage::from_fn(128, 128, |x, y| if (x / square + y / square) % 2 == 0 { 230 } else { 20 });
    let hits = nonzero_pixels(&compute_visual_score_map(&board, &params));
    let corners: Vec<(f64, f64)> = (1..8)
        .flat_map(|i| (1..8).map(move |j| ((i * square) as f64 - 0.5, (j * square) as f64 - 0.5)))
        .collect();
    let near = |p: &(usize, usize), q: &(f64, f64)| (q.0 - p.0 as f64).abs() <= 1.0 && (q.1 - p.1 as f64).abs() <= 1.0;
    c.check(hits.len() == corners.len(), || format!("checkerboard: {} scores for {} corners", hits.len(), corners.len()));
    c.check(corners.iter().all(|q| hits.iter().filter(|p| near(p, q)).count() == 1), || {
        "checkerboard corner not scored exactly once".into()
    });

    let two = GrayImage::from_fn(96, 48, |x, y| match (x, y) {
        (x, y) if x < 30 && y >= 20 => 220,
        (x, y) if x >= 66 && y >= 20 => 104,
        _ => 100,
    });
    let hits = nonzero_pixels(&compute_visual_score_map(&two, &params));
    c.check(hits.len() == 1 && near(&hits[0], &(29.5, 19.5)), || format!("two-corner image scored at {hits:?}"));

    let quad = [0.0, 0.0, 0.001];
    c.check(depth_error(2.0, &quad).is_some_and(|e| (e - 0.004).abs() < 1e-15), || "depth_error(2) != 0.004".into());
    c.check(depth_error(0.75, &[0.0; 3]) == Some(0.0), || "zero model not zero".into());
    c.check(depth_error(4.0, &quad) == depth_error(2.0, &quad).map(|e| 4.0 * e), || "quadratic homogeneity".into());
    c.check(depth_error(0.0, &quad).is_none(), || "zero depth accepted".into());

    let plane = DepthImage::from_fn(64, 48, |x, y| 1.5 + 0.01 * x as f32 + 0.004 * y as f32);
    c.check(compute_depth_score_map(&plane, &params).nonzero_count() == 0, || "planar depth scored".into());

    let small_noise = DetectorParams {
        depth_error_coeffs: [0.0, 0.0, 0.001],
        ..Default::default()
    };
    let step = |h: f32| DepthImage::from_fn(64, 64, |x, y| if x + y < 40 { 1.0 } else { 1.0 + h });
    let hits = nonzero_pixels(&compute_depth_score_map(&step(0.5), &small_noise));
    c.check(!hits.is_empty() && hits.iter().all(|&(x, y)| x + y == 39), || {
        format!("step edge scores off the foreground rim: {hits:?}")
    });
    let noisy = DetectorParams {
        depth_error_coeffs: [0.0, 0.0, 0.01],
        ..Default::default()
    };
    c.check(compute_depth_score_map(&step(0.03), &noisy).nonzero_count() == 0, || "sub-noise step scored".into());

    let ones = |m| ScoreMap {
        values: Image::new(8, 8, 1.0),
        modality: m,
    };
    let sat = DetectorParams {
        gamma: 0.5,
        saturation: 0.8,
        ..Default::default()
    };
    let combined = combine_score_maps(&ones(ScoreModality::Visual), &ones(ScoreModality::Depth), &sat).unwrap();
    c.check(combined.values.data().iter().all(|&v| v == 0.8f32), || "saturation example".into());
    let other = ScoreMap::zeros(4, 4, ScoreModality::Depth);
    c.check(combine_score_maps(&ones(ScoreModality::Visual), &other, &sat).is_err(), || "size mismatch accepted".into());

    let kp = |x: f64, y: f64, score: f32| Keypoint {
        pixel: Vector2::new(x, y),
        score,
        modality: KeypointModality::Multimodal,
        depth: None,
    };
    let picked = select_keypoints(&[kp(10.0, 10.0, 0.9), kp(15.0, 10.0, 0.5)], &params);
    c.check(picked.len() == 1 && picked[0].score == 0.9, || "close pair not thinned".into());
    let four = DetectorParams {
        target_count: 4,
        ..Default::default()
    };
    let spread = [kp(0.0, 0.0, 0.4), kp(100.0, 0.0, 0.5), kp(0.0, 100.0, 0.6), kp(100.0, 100.0, 0.7)];
    c.check(select_keypoints(&spread, &four).len() == 4, || "separated maxima not all selected".into());
}

fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize, modality: ScoreModality) -> ScoreMap {
    let values = Image::from_fn(w, h, |_, _| if rng.random_bool(0.5) { 0.0 } else { rng.random_range(1e-6f32..=1.0) });
    ScoreMap { values, modality }
}

fn score_maps() -> Verdict {
    let mut c = Checks::default();
    score_map_examples(&mut c);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for i in 0..RANDOM_MAPS {
        let (w, h) = (rng.random_range(4..40), rng.random_range(4..30));
        let v = random_map(&mut rng, w, h, ScoreModality::Visual);
        let d = random_map(&mut rng, w, h, ScoreModality::Depth);
        let params = DetectorParams {
            gamma: rng.random_range(0.0..=1.0),
            saturation: rng.random_range(0.05..=1.0),
            ..Default::default()
        };
        let s = params.saturation as f32;
        let cs = combine_score_maps(&v, &d, &params).unwrap();
        c.check(cs.values.data().iter().all(|&x| (0.0..=s).contains(&x)), || format!("map {i}: score outside [0, s_sat]"));

        for (gamma, limit) in [(1.0, &v), (0.0, &d)] {
            let p = DetectorParams { gamma, ..params.clone() };
            let cs = combine_score_maps(&v, &d, &p).unwrap();
            let exact = cs.values.data().iter().zip(limit.values.data()).all(|(&c, &l)| c == l.min(s));
            c.check(exact, || format!("map {i}: gamma = {gamma} limit not exact"));
        }

        let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
        let mut raised = v.clone();
        raised.values.set(x, y, (v.get(x, y) + rng.random_range(0.0f32..0.5)).min(1.0));
        let after = combine_score_maps(&raised, &d, &params).unwrap();
        c.check(after.get(x, y) >= cs.get(x, y), || format!("map {i}: raising V lowered C"));
    }
    Verdict::new("score_maps", c.failures.is_empty(), c.summary())
}

fn descriptor_frame(gray: GrayImage, depth: DepthImage) -> RegisteredFrame {
    let (w, h) = gray.dims();
    let camera = PinholeCamera::new(200.0, 200.0, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h).unwrap();
    RegisteredFrame::new(0.0, gray, depth, camera, DepthRange::default()).unwrap()
}

/// Blocky texture with per-pixel noise, every pixel in `[lo, hi]`.
fn lit_texture(rng: &mut ChaCha8Rng, lo: u8, hi: u8) -> GrayImage {
    let cell: usize = rng.random_range(3..12);
    let stride = 96 / cell + 1;
    let cells: Vec<u8> = (0..stride * stride).map(|_| rng.random_range(lo..=hi)).collect();
    GrayImage::from_fn(96, 96, |x, y| {
        let base = cells[(y / cell) * stride + x / cell] as i32;
        (base + rng.random_range(-6..=6)).clamp(lo as i32, hi as i32) as u8
    })
}

/// Near box over a far wall with a random silhouette.
fn box_depth(rng: &mut ChaCha8Rng) -> DepthImage {
    let (x0, x1) = (rng.random_range(10..45), rng.random_range(50..90));
    let (y0, y1) = (rng.random_range(10..45), rng.random_range(50..90));
    let (near, far) = (rng.random_range(0.9f32..2.0), rng.random_range(2.5f32..5.5));
    DepthImage::from_fn(96, 96, |x, y| {
        if (x0..x1).contains(&x) && (y0..y1).contains(&y) {
            near + 0.01 * x as f32
        } else {
            far
        }
    })
}

fn descriptors() -> Verdict {
    let mut c = Checks::default();
    let dn = |v| DarkNoiseModel::new(v).unwrap();
    c.check(!visual_bit(2.0, 4.0, &dn(5.0)), || "clamp example set a bit".into());
    c.check(visual_bit(10.0, 20.0, &dn(0.0)), || "plain comparison example".into());
    c.check(visual_bit(4.0, 10.0, &dn(5.0)), || "partially clamped example".into());

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for seed in 0..RANDOM_FRAMES {
        let dark = rng.random_range(0.5..10.0);
        let ex = DescriptorExtractor::new(DescriptorParams::default(), dn(dark));
        let centre = Vector2::new(rng.random_range(24..=72) as f64, rng.random_range(24..=72) as f64);

        let below = lit_texture(&mut rng, 0, dark.floor() as u8);
        let f = descriptor_frame(below, box_depth(&mut rng));
        let (visual, _) = ex.raw_bits(&FrameDescriptorContext::new(&f), &centre, DescriptorMode::Both).unwrap();
        c.check(visual == [0; 4], || format!("frame {seed}: visual bits below dark noise"));

        let offset = 30u8;
        let lo = dark.ceil() as u8 + 1;
        let gray = lit_texture(&mut rng, lo, 255 - offset);
        let brighter = gray.map(|v| v + offset);
        let depth = box_depth(&mut rng);
        let f1 = descriptor_frame(gray, depth.clone());
        let f2 = descriptor_frame(brighter, depth);
        let (ctx1, ctx2) = (FrameDescriptorContext::new(&f1), FrameDescriptorContext::new(&f2));
        let a = ex.raw_bits(&ctx1, &centre, DescriptorMode::VisualOnly).unwrap();
        let b = ex.raw_bits(&ctx2, &centre, DescriptorMode::VisualOnly).unwrap();
        c.check(a.0 == b.0, || format!("frame {seed}: offset changed visual bits"));

        let (v, d) = ex.raw_bits(&ctx1, &centre, DescriptorMode::Both).unwrap();
        let v_only = ex.raw_bits(&ctx1, &centre, DescriptorMode::VisualOnly).unwrap().0;
        let d_only = ex.raw_bits(&ctx1, &centre, DescriptorMode::DepthOnly).unwrap().1;
        c.check(v == v_only && d == d_only, || format!("frame {seed}: modality bits depend on mode"));
        match ex.extract_with_mode(&ctx1, &centre, DescriptorMode::Both) {
            Ok(both) => {
                let or_ok = (0..4).all(|k| both.bits()[k] == v[k] | d[k]);
                c.check(or_ok, || format!("frame {seed}: combined bits are not visual OR depth"));
            }
            Err(e) => c.check(false, || format!("frame {seed}: extraction failed: {e}")),
        }
    }
    Verdict::new("descriptor", c.failures.is_empty(), c.summary())
}

fn random_filter_state(rng: &mut ChaCha8Rng, landmarks: usize) -> FilterState {
    let mut v = |s: f64| Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
    let position = v(2.0);
    let attitude = UnitQuaternion::from_scaled_axis(v(1.5));
    let velocity = v(1.0);
    let accel_bias = v(0.1);
    let gyro_bias = v(0.02);
    let landmarks = (0..landmarks)
        .map(|i| LandmarkState {
            id: i as u64,
            bearing: BearingVector::new(rng.random_range(-0.5..0.5), rng.random_range(-0.4..0.4)),
            inv_depth: rng.random_range(0.2..1.2),
        })
        .collect();
    FilterState {
        position,
        attitude,
        velocity,
        accel_bias,
        gyro_bias,
        landmarks,
    }
}

/// Entry-wise relative error, with magnitudes below one compared absolutely.
fn max_relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0)).fold(0.0, f64::max)
}

/// Central differences of `f` over the error state, through boxplus/boxminus.
fn numeric_jacobian(state: &FilterState, rows: usize, f: impl Fn(&FilterState) -> DVector<f64>) -> DMatrix<f64> {
    let n = state.error_dim();
    let eps = 1e-6;
    let mut j = DMatrix::zeros(rows, n);
    for col in 0..n {
        let mut dx = DVector::zeros(n);
        dx[col] = eps;
        let plus = f(&state.boxplus(&dx, 1e-6, 1e6));
        dx[col] = -eps;
        let minus = f(&state.boxplus(&dx, 1e-6, 1e6));
        j.set_column(col, &((plus - minus) / (2.0 * eps)));
    }
    j
}

fn jacobians() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let extr = default_cam_from_imu();
    let (mut worst_f, mut worst_h) = (0.0f64, 0.0f64);
    for _ in 0..JACOBIAN_STATES {
        let state = random_filter_state(&mut rng, 3);
        let acc = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(6.0..12.0));
        let gyr = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let dt = rng.random_range(0.002..0.05);
        let n = state.error_dim();

        let analytic_f = propagation_jacobian(&state, &acc, &gyr, dt, &extr).to_dense();
        let base = propagate_mean(&state, &acc, &gyr, dt, &extr, 1e-6, 1e6);
        let numeric_f = numeric_jacobian(&state, n, |s| propagate_mean(s, &acc, &gyr, dt, &extr, 1e-6, 1e6).boxminus(&base));
        worst_f = worst_f.max(max_relative_error(&analytic_f, &numeric_f));

        let focal = rng.random_range(250.0..600.0);
        let camera = PinholeCamera::new(focal, focal * rng.random_range(0.98..1.02), 319.5, 239.5, 640, 480)
            .unwrap()
            .with_distortion(Distortion {
                k1: rng.random_range(-0.1..0.1),
                k2: rng.random_range(-0.05..0.05),
                p1: rng.random_range(-0.002..0.002),
                p2: rng.random_range(-0.002..0.002),
            });
        // Rows per landmark: pixel u, pixel v, inverse distance.
        let rows = 3 * state.landmarks.len();
        let measure = |s: &FilterState| {
            let mut z = DVector::zeros(rows);
            for (k, lm) in s.landmarks.iter().enumerate() {
                let (px, _) = camera.bearing_to_pixel_with_jacobian(&lm.bearing).expect("landmark in front");
                z[3 * k] = px.x;
                z[3 * k + 1] = px.y;
                z[3 * k + 2] = lm.inv_depth;
            }
            z
        };
        let mut analytic_h = DMatrix::zeros(rows, n);
        for (k, lm) in state.landmarks.iter().enumerate() {
            let (_, jac) = camera.bearing_to_pixel_with_jacobian(&lm.bearing).expect("landmark in front");
            let o = landmark_offset(k);
            analytic_h.view_mut((3 * k, o), (2, 2)).copy_from(&jac);
            analytic_h[(3 * k + 2, o + 2)] = 1.0;
        }
        let numeric_h = numeric_jacobian(&state, rows, measure);
        worst_h = worst_h.max(max_relative_error(&analytic_h, &numeric_h));
    }
    Verdict::new(
        "jacobians",
        worst_f < JACOBIAN_REL_ERR && worst_h < JACOBIAN_REL_ERR,
        format!(
            "{JACOBIAN_STATES} random states: max relative error F {worst_f:.2e}, H {worst_h:.2e} (< {JACOBIAN_REL_ERR:e})"
        ),
    )
}

fn consistency() -> Verdict {
    let mut cfg = SimConfig::rectangle_flight().with_resolution(160, 120);
    if let TrajectorySpec::Rectangle { laps, .. } = &mut cfg.trajectory {
        *laps = 2;
    }
    cfg.noise = SimNoise::zero();
    let sim = Simulation::new(cfg).expect("scenario");
    let mut anchor: Option<RigidTransform> = None;
    let mut nees = Vec::new();
    let (mut steps, mut bad_cov) = (0usize, 0usize);
    let run = run_simulation_with(&sim, &PipelineConfig::default(), single_core(), |p, e| {
        let Some(ekf) = p.ekf() else { return Ok(()) };
        let a = *anchor.get_or_insert_with(|| sim.ground_truth_pose(e.timestamp()).compose(&ekf.state().world_pose().inverse()));
        steps += 1;
        bad_cov += usize::from(ekf.check_covariance().is_err());
        if let Event::Frame(f) = e {
            let est = a.compose(&ekf.state().world_pose());
            let cov = transform_pose_covariance(&ekf.world_pose_covariance(), &a);
            nees.push(pose_nees(&est, &cov, &sim.ground_truth_pose(f.timestamp)).unwrap_or(f64::INFINITY));
        }
        Ok(())
    });
    if let Err(e) = run {
        return Verdict::new("consistency", false, format!("run failed: {e}"));
    }
    let within = nees.iter().filter(|&&x| x <= CHI2_6DOF_99).count();
    let fraction = within as f64 / nees.len().max(1) as f64;
    Verdict::new(
        "consistency",
        nees.len() >= NEES_MIN_FRAMES && fraction >= NEES_FRACTION && bad_cov == 0,
        format!(
            "zero-noise {} frames: NEES <= {CHI2_6DOF_99} on {:.1}% (>= {:.0}%); covariance not symmetric PSD at \
             {bad_cov} of {steps} steps",
            nees.len(),
            100.0 * fraction,
            100.0 * NEES_FRACTION
        ),
    )
}

fn dead_reckoning() -> Verdict {
    let (mut worst_p, mut worst_r) = (0.0f64, 0.0f64);
    for cfg in [SimConfig::rectangle_flight(), SimConfig::dark_room()] {
        let mut cfg = cfg.with_resolution(160, 120);
        cfg.noise = SimNoise::zero();
        let sim = Simulation::new(cfg).expect("scenario");
        let t0 = 3.0;
        let k0 = sim.ground_truth(t0);
        let start = FilterState {
            position: k0.attitude.inverse() * k0.position,
            attitude: k0.attitude,
            velocity: k0.attitude.inverse() * k0.velocity,
            ..Default::default()
        };
        let mut ekf = Ekf::new(
            start,
            DMatrix::identity(15, 15) * 1e-4,
            NoiseParams::default(),
            FilterParams::default(),
            *sim.camera(),
            *sim.cam_from_imu(),
        )
        .expect("filter");
        let imu = sim.imu();
        let i0 = imu.iter().position(|s| s.timestamp >= t0 - 1e-9).expect("imu covers start");
        let mut k = i0;
        while imu[k].timestamp < t0 + DR_SECONDS - 1e-9 {
            let (a, b) = (&imu[k], &imu[k + 1]);
            ekf.propagate(&((a.accel + b.accel) * 0.5), &((a.gyro + b.gyro) * 0.5), b.timestamp - a.timestamp)
                .expect("propagate");
            k += 1;
        }
        let gt = sim.ground_truth(imu[k].timestamp);
        let pose = ekf.state().world_pose();
        worst_p = worst_p.max((pose.translation - gt.position).norm());
        worst_r = worst_r.max(pose.rotation.angle_to(&gt.attitude));
    }
    Verdict::new(
        "dead_reckoning",
        worst_p < DR_POSITION && worst_r < DR_ROTATION,
        format!("{DR_SECONDS} s, two scenarios: {worst_p:.2e} m (< {DR_POSITION:e}), {worst_r:.2e} rad (< {DR_ROTATION:e})"),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().expect("temp dir");
    let config = PipelineConfig {
        seed: 7,
        ..Default::default()
    };
    let mut bytes = Vec::new();
    for run in 0..2 {
        let sim = Simulation::new(SimConfig::dark_room().with_resolution(160, 120)).expect("scenario");
        let out = run_simulation(&sim, &config, RunOptions::default()).expect("run");
        let path = dir.path().join(format!("trajectory_{run}.csv"));
        write_trajectory_csv(&path, &out.records).expect("write");
        bytes.push(std::fs::read(&path).expect("read back"));
    }
    Verdict::new(
        "determinism",
        bytes[0] == bytes[1] && !bytes[0].is_empty(),
        format!("two seeded dark-room runs: trajectory CSVs of {} and {} bytes, identical: {}", bytes[0].len(), bytes[1].len(), bytes[0] == bytes[1]),
    )
}
