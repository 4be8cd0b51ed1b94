//! Odometry driver: IMU propagation, keypoint tracking, filter updates and
//! landmark management, plus the run outputs.

use std::collections::HashMap;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use serde::Serialize;

use crate::calib::Calibration;
use crate::config::PipelineConfig;
use crate::dataset::{Dataset, Event};
use crate::descriptor::{calibrate_dark_noise, DarkNoiseModel, DescriptorExtractor, FrameDescriptorContext};
use crate::detect::{depth_error, select_keypoints, KeypointModality, ScoreMaps};
use crate::ekf::{initial_attitude, initial_covariance, Ekf, ImuSample, LandmarkMeasurement};
use crate::ekf::state::{FilterState, ROBOT_DIM};
use crate::error::{Error, Result};
use crate::eval::{pose_fields, TimedPose};
use crate::frame::RegisteredFrame;
use crate::geometry::RigidTransform;
use crate::sim::Simulation;
use crate::tracking::{CandidatePool, LandmarkTable, MatchOutcome, Observation, SearchWindow, TrackedLandmark};

/// Smallest depth standard deviation used for landmark initialisation (m):
/// the spread of 1 mm quantisation.
const MIN_DEPTH_SIGMA: f64 = 0.001 / 3.464_101_615_137_754_6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordSource {
    Frame,
    Heartbeat,
}

impl RecordSource {
    fn as_str(&self) -> &'static str {
        match self {
            RecordSource::Frame => "frame",
            RecordSource::Heartbeat => "heartbeat",
        }
    }
}

/// Filter output at one instant: world pose of the IMU, world velocity,
/// biases, landmark count and the robot covariance diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub timestamp: f64,
    pub source: RecordSource,
    pub pose: RigidTransform,
    pub velocity: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub landmarks: usize,
    pub covariance_diagonal: [f64; ROBOT_DIM],
}

impl TrajectoryRecord {
    pub fn timed_pose(&self) -> TimedPose {
        TimedPose::new(self.timestamp, self.pose)
    }

    pub fn csv_header() -> Vec<String> {
        let mut h: Vec<String> = crate::eval::POSE_COLUMNS.iter().map(|s| s.to_string()).collect();
        for s in ["vx", "vy", "vz", "bax", "bay", "baz", "bgx", "bgy", "bgz", "landmarks", "source"] {
            h.push(s.into());
        }
        h.extend((0..ROBOT_DIM).map(|i| format!("var{i}")));
        h
    }

    pub fn csv_fields(&self) -> Vec<String> {
        let mut f: Vec<String> = pose_fields(&self.timed_pose()).into();
        for v in [self.velocity, self.accel_bias, self.gyro_bias] {
            f.extend(v.iter().map(|x| format!("{x:?}")));
        }
        f.push(self.landmarks.to_string());
        f.push(self.source.as_str().into());
        f.extend(self.covariance_diagonal.iter().map(|x| format!("{x:?}")));
        f
    }

    fn from_ekf(ekf: &Ekf, timestamp: f64, source: RecordSource) -> Self {
        let s = ekf.state();
        let p = ekf.covariance();
        Self {
            timestamp,
            source,
            pose: s.world_pose(),
            velocity: s.world_velocity(),
            accel_bias: s.accel_bias,
            gyro_bias: s.gyro_bias,
            landmarks: s.landmarks.len(),
            covariance_diagonal: std::array::from_fn(|i| p[(i, i)]),
        }
    }
}

/// Per-frame counters and stage timings.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FrameStats {
    pub index: usize,
    pub timestamp: f64,
    pub candidates: usize,
    pub depth_only_candidates: usize,
    /// Landmarks in the filter when the frame arrived.
    pub tracked: usize,
    pub matched: usize,
    /// Matches accepted by the filter update.
    pub accepted: usize,
    pub accepted_depth_only: usize,
    pub gated: usize,
    pub missed: usize,
    pub out_of_view: usize,
    pub added: usize,
    pub dropped: usize,
    /// Landmarks in the filter after management.
    pub landmarks: usize,
    pub depth_only_landmarks: usize,
    /// Depth-only landmarks in the filter that were re-observed at least
    /// once since creation.
    pub established_depth_only: usize,
    pub detect_s: f64,
    pub match_s: f64,
    pub update_s: f64,
    pub manage_s: f64,
}

/// One landmark's search in one frame, for `--dump-tracks`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackRow {
    pub frame: usize,
    pub id: u64,
    pub predicted: Option<Vector2<f64>>,
    pub matched: Option<Vector2<f64>>,
    pub hamming: Option<u32>,
    pub window: Option<Vector2<f64>>,
    pub outcome: &'static str,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkEventKind {
    Added,
    Missed,
    OutOfView,
}

/// Landmark creation and removal, with the world position at that time.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LandmarkEvent {
    pub frame: usize,
    pub timestamp: f64,
    pub id: u64,
    pub kind: LandmarkEventKind,
    pub modality: KeypointModality,
    pub world_point: [f64; 3],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageTotals {
    pub propagate_s: f64,
    pub detect_s: f64,
    pub match_s: f64,
    pub update_s: f64,
    pub manage_s: f64,
}

impl StageTotals {
    pub fn total(&self) -> f64 {
        self.propagate_s + self.detect_s + self.match_s + self.update_s + self.manage_s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub imu_samples: usize,
    pub frames_processed: usize,
    pub frames_skipped: usize,
    pub initialized_at: Option<f64>,
    pub dark_noise: f64,
    pub stage_seconds: StageTotals,
    /// Processed frames per second of pipeline time (rendering and file
    /// decoding excluded).
    pub throughput_hz: f64,
    pub mean_landmarks: f64,
    pub min_landmarks_after_first_frame: usize,
    /// Accepted updates over landmarks searched.
    pub match_rate: f64,
    pub landmarks_created: u64,
    pub final_position: Option<[f64; 3]>,
    pub warnings: Vec<String>,
    pub config: PipelineConfig,
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<TrajectoryRecord>,
    pub frames: Vec<FrameStats>,
    pub tracks: Vec<TrackRow>,
    pub landmark_events: Vec<LandmarkEvent>,
    pub report: RunReport,
}

pub struct Pipeline {
    config: PipelineConfig,
    calibration: Calibration,
    extractor: DescriptorExtractor,
    ekf: Option<Ekf>,
    table: LandmarkTable,
    init_buffer: Vec<ImuSample>,
    initialized_at: Option<f64>,
    last_imu: Option<ImuSample>,
    last_frame_time: Option<f64>,
    filter_time: f64,
    last_record_time: f64,
    dump_tracks: bool,
    records: Vec<TrajectoryRecord>,
    frames: Vec<FrameStats>,
    tracks: Vec<TrackRow>,
    landmark_events: Vec<LandmarkEvent>,
    totals: StageTotals,
    imu_count: usize,
    skipped: usize,
    warnings: Vec<String>,
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

impl Pipeline {
    pub fn new(config: PipelineConfig, calibration: Calibration) -> Result<Self> {
        config.validate()?;
        calibration.color.validate()?;
        let dn = match config.dark_noise.or(calibration.dark_noise) {
            Some(v) => DarkNoiseModel::new(v)?,
            None => DarkNoiseModel::default(),
        };
        let extractor = DescriptorExtractor::new(config.descriptor.clone(), dn);
        Ok(Self {
            config,
            calibration,
            extractor,
            ekf: None,
            table: LandmarkTable::new(),
            init_buffer: Vec::new(),
            initialized_at: None,
            last_imu: None,
            last_frame_time: None,
            filter_time: f64::NEG_INFINITY,
            last_record_time: f64::NEG_INFINITY,
            dump_tracks: false,
            records: Vec::new(),
            frames: Vec::new(),
            tracks: Vec::new(),
            landmark_events: Vec::new(),
            totals: StageTotals::default(),
            imu_count: 0,
            skipped: 0,
            warnings: Vec::new(),
        })
    }

    /// Keeps a per-landmark search log for every frame.
    pub fn with_track_dump(mut self, on: bool) -> Self {
        self.dump_tracks = on;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// The filter, once the initial attitude has been estimated.
    pub fn ekf(&self) -> Option<&Ekf> {
        self.ekf.as_ref()
    }

    pub fn landmarks(&self) -> &LandmarkTable {
        &self.table
    }

    pub fn records(&self) -> &[TrajectoryRecord] {
        &self.records
    }

    pub fn frame_stats(&self) -> &[FrameStats] {
        &self.frames
    }

    pub fn process(&mut self, event: &Event) -> Result<()> {
        match event {
            Event::Imu(s) => self.process_imu(s),
            Event::Frame(f) => self.process_frame(f),
        }
    }

    pub fn process_imu(&mut self, s: &ImuSample) -> Result<()> {
        if !(s.timestamp.is_finite() && s.accel.iter().chain(s.gyro.iter()).all(|v| v.is_finite())) {
            return Err(Error::Data(format!("non-finite IMU sample at t = {}", s.timestamp)));
        }
        if let Some(prev) = &self.last_imu {
            if s.timestamp <= prev.timestamp {
                return Err(Error::Data(format!(
                    "IMU sample {} at t = {} is not after t = {}",
                    self.imu_count, s.timestamp, prev.timestamp
                )));
            }
        }
        self.imu_count += 1;
        let Some(prev) = self.last_imu.replace(*s) else {
            self.init_buffer.push(*s);
            return Ok(());
        };
        if self.ekf.is_none() {
            self.init_buffer.push(*s);
            if s.timestamp - self.init_buffer[0].timestamp >= self.config.init_window - 1e-9 {
                self.initialize()?;
            }
            return Ok(());
        }
        if s.timestamp > self.filter_time {
            let started = Instant::now();
            // Mean of the linear interpolant over the interval.
            let mid = 0.5 * (self.filter_time + s.timestamp);
            let a = ((mid - prev.timestamp) / (s.timestamp - prev.timestamp)).clamp(0.0, 1.0);
            let accel = prev.accel.lerp(&s.accel, a);
            let gyro = prev.gyro.lerp(&s.gyro, a);
            let dt = s.timestamp - self.filter_time;
            self.ekf.as_mut().expect("initialized").propagate(&accel, &gyro, dt)?;
            self.filter_time = s.timestamp;
            self.totals.propagate_s += secs(started.elapsed());
        }
        if s.timestamp - self.last_record_time >= self.config.heartbeat_interval - 1e-9 {
            self.push_record(s.timestamp, RecordSource::Heartbeat);
        }
        Ok(())
    }

    fn initialize(&mut self) -> Result<()> {
        let n = self.init_buffer.len() as f64;
        let mean_accel = self.init_buffer.iter().map(|s| s.accel).sum::<Vector3<f64>>() / n;
        let attitude = initial_attitude(&mean_accel).ok_or_else(|| {
            Error::Data(format!(
                "cannot level the filter: mean specific force {mean_accel:?} over the first {} s",
                self.config.init_window
            ))
        })?;
        let state = FilterState {
            attitude,
            ..Default::default()
        };
        let ekf = Ekf::new(
            state,
            initial_covariance(),
            self.config.noise.clone(),
            self.config.filter.clone(),
            self.calibration.color,
            self.calibration.cam_from_imu,
        )?;
        let t = self.init_buffer.last().expect("non-empty").timestamp;
        self.ekf = Some(ekf);
        self.filter_time = t;
        self.initialized_at = Some(t);
        self.last_record_time = t;
        self.init_buffer.clear();
        log::info!("filter initialised at t = {t:.3} s");
        Ok(())
    }

    fn push_record(&mut self, t: f64, source: RecordSource) {
        if let Some(ekf) = &self.ekf {
            self.records.push(TrajectoryRecord::from_ekf(ekf, t, source));
            self.last_record_time = t;
        }
    }

    fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warnings.push(msg);
    }

    pub fn process_frame(&mut self, frame: &RegisteredFrame) -> Result<()> {
        if let Some(prev) = self.last_frame_time {
            if frame.timestamp <= prev {
                return Err(Error::Data(format!("frame at t = {} is not after t = {prev}", frame.timestamp)));
            }
        }
        self.last_frame_time = Some(frame.timestamp);
        if self.ekf.is_none() {
            if self.skipped == 0 {
                self.warn(format!("frames before filter initialisation are skipped (first at t = {})", frame.timestamp));
            }
            self.skipped += 1;
            return Ok(());
        }
        if frame.timestamp < self.filter_time - 1e-9 {
            self.warn(format!("frame at t = {} is older than the filter state, skipped", frame.timestamp));
            self.skipped += 1;
            return Ok(());
        }
        {
            let cam = self.ekf.as_ref().expect("initialized").camera();
            if (frame.width(), frame.height()) != (cam.width, cam.height) {
                return Err(Error::Data(format!(
                    "frame at t = {} is {}x{}, calibration says {}x{}",
                    frame.timestamp,
                    frame.width(),
                    frame.height(),
                    cam.width,
                    cam.height
                )));
            }
        }
        if frame.timestamp > self.filter_time {
            // Hold the latest IMU reading up to the frame time.
            let started = Instant::now();
            let last = self.last_imu.expect("initialized filter has IMU");
            let dt = frame.timestamp - self.filter_time;
            self.ekf.as_mut().expect("initialized").propagate(&last.accel, &last.gyro, dt)?;
            self.filter_time = frame.timestamp;
            self.totals.propagate_s += secs(started.elapsed());
        }
        let index = self.frames.len();
        let mut stats = FrameStats {
            index,
            timestamp: frame.timestamp,
            ..Default::default()
        };

        let t0 = Instant::now();
        let maps = ScoreMaps::compute(frame, &self.config.detector)?;
        let candidates = maps.candidates(frame);
        stats.candidates = candidates.len();
        stats.depth_only_candidates = candidates.iter().filter(|k| k.modality == KeypointModality::DepthOnly).count();
        stats.detect_s = secs(t0.elapsed());

        let t1 = Instant::now();
        let extractor = &self.extractor;
        let mut pool = CandidatePool::new(candidates, FrameDescriptorContext::new(frame), extractor);
        let ekf = self.ekf.as_mut().expect("initialized");
        let n = ekf.landmark_count();
        stats.tracked = n;
        let camera = *ekf.camera();
        let mut observations = vec![Observation::Missed; n];
        let mut proposals: Vec<(u32, usize, usize)> = Vec::new();
        let mut rows: Vec<TrackRow> = Vec::new();
        for j in 0..n {
            let id = ekf.state().landmarks[j].id;
            let mut row = TrackRow {
                frame: index,
                id,
                predicted: None,
                matched: None,
                hamming: None,
                window: None,
                outcome: "out_of_view",
            };
            let Some((pixel, cov)) = ekf.predict_pixel(j).filter(|(p, _)| camera.in_bounds(p)) else {
                observations[j] = Observation::OutOfView;
                rows.push(row);
                continue;
            };
            let window = SearchWindow::from_covariance(pixel, &cov, &self.config.tracking);
            row.predicted = Some(pixel);
            row.window = Some(window.half_axes);
            let outcome = pool.match_in_window(&self.table.records()[j].descriptor, &window, &self.config.tracking);
            row.outcome = match outcome {
                MatchOutcome::Matched { candidate, distance } => {
                    proposals.push((distance, j, candidate));
                    row.hamming = Some(distance);
                    "matched"
                }
                MatchOutcome::NoCandidates => "no_candidates",
                MatchOutcome::TooDistant { best } => {
                    row.hamming = Some(best);
                    "too_distant"
                }
                MatchOutcome::Ambiguous { best, .. } => {
                    row.hamming = Some(best);
                    "ambiguous"
                }
            };
            rows.push(row);
        }
        // One candidate serves at most one landmark: the closest descriptor
        // wins.
        proposals.sort_unstable();
        let mut taken: HashMap<usize, usize> = HashMap::new();
        let mut measurements = Vec::new();
        let coeffs = self.config.detector.depth_error_coeffs;
        for &(_, j, c) in &proposals {
            if taken.contains_key(&c) {
                rows[j].outcome = "conflict";
                continue;
            }
            taken.insert(c, j);
            let kp = pool.candidates()[c];
            rows[j].matched = Some(kp.pixel);
            let depth = kp
                .depth
                .map(|z| (z, depth_error(z, &coeffs).unwrap_or(0.0).max(MIN_DEPTH_SIGMA)));
            measurements.push(LandmarkMeasurement {
                index: j,
                pixel: kp.pixel,
                depth,
            });
        }
        stats.matched = measurements.len();
        stats.match_s = secs(t1.elapsed());

        let t2 = Instant::now();
        let report = ekf.update(&measurements)?;
        for &j in &report.accepted {
            observations[j] = Observation::Matched;
            if self.table.records()[j].modality == KeypointModality::DepthOnly {
                stats.accepted_depth_only += 1;
            }
        }
        for &j in &report.rejected {
            if rows[j].outcome == "matched" {
                rows[j].outcome = "gated";
            }
        }
        stats.accepted = report.accepted.len();
        stats.gated = stats.matched - stats.accepted;
        stats.update_s = secs(t2.elapsed());

        let t3 = Instant::now();
        stats.out_of_view = observations.iter().filter(|o| **o == Observation::OutOfView).count();
        stats.missed = n - stats.accepted - stats.out_of_view;
        let drop = self.table.observe(index, &observations, self.config.tracking.miss_max);
        let world_from_cam = |ekf: &Ekf| ekf.state().world_pose().compose(&ekf.cam_from_imu().inverse());
        for &j in &drop {
            let wc = world_from_cam(ekf);
            let p = wc.transform_point(&ekf.state().landmarks[j].point());
            let rec = self.table.remove(j);
            ekf.remove_landmark(j)?;
            self.landmark_events.push(LandmarkEvent {
                frame: index,
                timestamp: frame.timestamp,
                id: rec.id,
                kind: if observations[j] == Observation::OutOfView {
                    LandmarkEventKind::OutOfView
                } else {
                    LandmarkEventKind::Missed
                },
                modality: rec.modality,
                world_point: p.into(),
            });
        }
        stats.dropped = drop.len();

        let slots = self.config.filter.max_landmarks.saturating_sub(ekf.landmark_count());
        if slots > 0 {
            let mut occupied: Vec<Vector2<f64>> =
                (0..ekf.landmark_count()).filter_map(|j| ekf.predict_pixel(j).map(|(p, _)| p)).collect();
            occupied.extend(measurements.iter().map(|m| m.pixel));
            let by_pixel: HashMap<(i64, i64), usize> = pool
                .candidates()
                .iter()
                .enumerate()
                .map(|(i, k)| ((k.pixel.x as i64, k.pixel.y as i64), i))
                .collect();
            let sep2 = self.config.tracking.refill_separation.powi(2);
            let selected = select_keypoints(pool.candidates(), &self.config.detector);
            for kp in selected {
                if stats.added >= slots {
                    break;
                }
                if occupied.iter().any(|o| (o - kp.pixel).norm_squared() < sep2) {
                    continue;
                }
                let Some(&ci) = by_pixel.get(&(kp.pixel.x as i64, kp.pixel.y as i64)) else {
                    continue;
                };
                let Some(descriptor) = pool.descriptor(ci) else {
                    continue;
                };
                let depth = kp
                    .depth
                    .map(|z| (z, depth_error(z, &coeffs).unwrap_or(0.0).max(MIN_DEPTH_SIGMA)));
                let id = self.table.allocate_id();
                let j = ekf.add_landmark(id, &kp.pixel, depth)?;
                self.table.push(TrackedLandmark {
                    id,
                    descriptor,
                    modality: kp.modality,
                    first_frame: index,
                    last_seen_frame: index,
                    miss_count: 0,
                });
                let p = world_from_cam(ekf).transform_point(&ekf.state().landmarks[j].point());
                self.landmark_events.push(LandmarkEvent {
                    frame: index,
                    timestamp: frame.timestamp,
                    id,
                    kind: LandmarkEventKind::Added,
                    modality: kp.modality,
                    world_point: p.into(),
                });
                occupied.push(kp.pixel);
                stats.added += 1;
            }
        }
        ekf.check_covariance()?;
        stats.landmarks = ekf.landmark_count();
        stats.depth_only_landmarks = self
            .table
            .records()
            .iter()
            .filter(|r| r.modality == KeypointModality::DepthOnly)
            .count();
        stats.established_depth_only = self
            .table
            .records()
            .iter()
            .filter(|r| r.modality == KeypointModality::DepthOnly && r.last_seen_frame > r.first_frame)
            .count();
        stats.manage_s = secs(t3.elapsed());

        self.totals.detect_s += stats.detect_s;
        self.totals.match_s += stats.match_s;
        self.totals.update_s += stats.update_s;
        self.totals.manage_s += stats.manage_s;
        if self.dump_tracks {
            self.tracks.extend(rows);
        }
        self.frames.push(stats);
        self.push_record(frame.timestamp, RecordSource::Frame);
        Ok(())
    }

    pub fn finish(mut self) -> RunOutput {
        if self.ekf.is_none() {
            self.warn("the filter was never initialised (not enough IMU data)".into());
        }
        if self.frames.is_empty() && self.ekf.is_some() {
            self.warn("no frames were processed; the trajectory is dead reckoning".into());
        }
        let total = self.totals.total();
        let searched: usize = self.frames.iter().map(|f| f.tracked).sum();
        let accepted: usize = self.frames.iter().map(|f| f.accepted).sum();
        let report = RunReport {
            seed: self.config.seed,
            imu_samples: self.imu_count,
            frames_processed: self.frames.len(),
            frames_skipped: self.skipped,
            initialized_at: self.initialized_at,
            dark_noise: self.extractor.dark_noise().intensity(),
            stage_seconds: self.totals,
            throughput_hz: if total > 0.0 { self.frames.len() as f64 / total } else { 0.0 },
            mean_landmarks: if self.frames.is_empty() {
                0.0
            } else {
                self.frames.iter().map(|f| f.landmarks as f64).sum::<f64>() / self.frames.len() as f64
            },
            min_landmarks_after_first_frame: self.frames.iter().skip(1).map(|f| f.tracked).min().unwrap_or(0),
            match_rate: if searched > 0 { accepted as f64 / searched as f64 } else { 0.0 },
            landmarks_created: self
                .landmark_events
                .iter()
                .filter(|e| e.kind == LandmarkEventKind::Added)
                .count() as u64,
            final_position: self.records.last().map(|r| r.pose.translation.into()),
            warnings: self.warnings,
            config: self.config,
        };
        RunOutput {
            records: self.records,
            frames: self.frames,
            tracks: self.tracks,
            landmark_events: self.landmark_events,
            report,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunOptions {
    pub dump_tracks: bool,
    /// Pace processing by the data timestamps.
    pub realtime: bool,
    /// Worker threads for the pipeline itself; `None` uses the global pool.
    pub threads: Option<usize>,
}

fn thread_pool(threads: Option<usize>) -> Result<Option<rayon::ThreadPool>> {
    threads
        .map(|n| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("cannot build a {n}-thread pool: {e}")))
        })
        .transpose()
}

fn process_in(pool: &Option<rayon::ThreadPool>, pipeline: &mut Pipeline, event: &Event) -> Result<()> {
    match pool {
        Some(pool) => pool.install(|| pipeline.process(event)),
        None => pipeline.process(event),
    }
}

/// Runs the pipeline over a stored dataset in stream order.
pub fn run_dataset(dataset: &Dataset, config: &PipelineConfig, options: RunOptions) -> Result<RunOutput> {
    let mut pipeline = Pipeline::new(config.clone(), dataset.calibration.clone())?.with_track_dump(options.dump_tracks);
    if dataset.frame_count() == 0 {
        pipeline.warn("dataset has no frames; output is IMU dead reckoning".into());
    }
    let pool = thread_pool(options.threads)?;
    let wall = Instant::now();
    let mut t0 = None;
    for event in dataset.events() {
        let event = event?;
        if options.realtime {
            let start = *t0.get_or_insert(event.timestamp());
            let due = Duration::from_secs_f64((event.timestamp() - start).max(0.0));
            if let Some(wait) = due.checked_sub(wall.elapsed()) {
                std::thread::sleep(wait);
            }
        }
        process_in(&pool, &mut pipeline, &event)?;
    }
    Ok(pipeline.finish())
}

/// Calibration of a simulation with the dark-noise intensity measured on a
/// few unlit renders.
pub fn simulation_calibration(sim: &Simulation) -> Result<Calibration> {
    let mut calib = sim.calibration();
    calib.dark_noise = Some(calibrate_dark_noise(&sim.dark_frames(4))?.intensity());
    Ok(calib)
}

/// Drives a pipeline from a simulation, rendering frames in parallel
/// batches. `observe` sees the pipeline after every event.
pub fn run_simulation_with(
    sim: &Simulation,
    config: &PipelineConfig,
    options: RunOptions,
    mut observe: impl FnMut(&Pipeline, &Event) -> Result<()>,
) -> Result<RunOutput> {
    let mut pipeline = Pipeline::new(config.clone(), simulation_calibration(sim)?)?.with_track_dump(options.dump_tracks);
    let pool = thread_pool(options.threads)?;
    let imu = sim.imu();
    let mut k = 0;
    const BATCH: usize = 16;
    let n = sim.frame_count();
    let mut start = 0;
    while start < n {
        let frames = sim.render_batch(start..(start + BATCH).min(n));
        for frame in frames {
            while k < imu.len() && imu[k].timestamp <= frame.timestamp {
                let e = Event::Imu(imu[k]);
                process_in(&pool, &mut pipeline, &e)?;
                observe(&pipeline, &e)?;
                k += 1;
            }
            let e = Event::Frame(frame);
            process_in(&pool, &mut pipeline, &e)?;
            observe(&pipeline, &e)?;
        }
        start += BATCH;
    }
    for s in &imu[k..] {
        let e = Event::Imu(*s);
        process_in(&pool, &mut pipeline, &e)?;
        observe(&pipeline, &e)?;
    }
    Ok(pipeline.finish())
}

pub fn run_simulation(sim: &Simulation, config: &PipelineConfig, options: RunOptions) -> Result<RunOutput> {
    run_simulation_with(sim, config, options, |_, _| Ok(()))
}

/// Ground-truth IMU poses of a simulation at the given timestamps.
pub fn ground_truth_poses(sim: &Simulation, times: impl IntoIterator<Item = f64>) -> Vec<TimedPose> {
    times.into_iter().map(|t| TimedPose::new(t, sim.ground_truth_pose(t))).collect()
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, std::io::Error::other(e))
}

pub fn write_trajectory_csv(path: &Path, records: &[TrajectoryRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(TrajectoryRecord::csv_header()).map_err(csv_err(path))?;
    for r in records {
        w.write_record(r.csv_fields()).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const LOG_MAGIC: &[u8; 8] = b"VDILOG01";
const LOG_FLOATS: usize = 1 + 3 + 4 + 3 + 3 + 3 + ROBOT_DIM;

/// Little-endian binary log: magic, then per record one source byte, the
/// landmark count as u32 and `t, p, q(wxyz), v, ba, bg, var[15]` as f64.
pub fn write_binary_log(path: &Path, records: &[TrajectoryRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(LOG_MAGIC).map_err(io)?;
    for r in records {
        w.write_all(&[matches!(r.source, RecordSource::Heartbeat) as u8]).map_err(io)?;
        w.write_all(&(r.landmarks as u32).to_le_bytes()).map_err(io)?;
        let q = r.pose.rotation;
        let mut vals = vec![r.timestamp];
        vals.extend(r.pose.translation.iter());
        vals.extend([q.w, q.i, q.j, q.k]);
        vals.extend(r.velocity.iter().chain(r.accel_bias.iter()).chain(r.gyro_bias.iter()));
        vals.extend(r.covariance_diagonal);
        debug_assert_eq!(vals.len(), LOG_FLOATS);
        for v in vals {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_binary_log(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if !bytes.starts_with(LOG_MAGIC) {
        return Err(Error::Data(format!("{}: not a trajectory log", path.display())));
    }
    let rec_len = 1 + 4 + 8 * LOG_FLOATS;
    let body = &bytes[LOG_MAGIC.len()..];
    if body.len() % rec_len != 0 {
        return Err(Error::Data(format!("{}: truncated record", path.display())));
    }
    Ok(body
        .chunks_exact(rec_len)
        .map(|c| {
            let f: Vec<f64> = c[5..]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let v3 = |o: usize| Vector3::new(f[o], f[o + 1], f[o + 2]);
            TrajectoryRecord {
                timestamp: f[0],
                source: if c[0] == 1 { RecordSource::Heartbeat } else { RecordSource::Frame },
                pose: RigidTransform::new(
                    UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(f[4], f[5], f[6], f[7])),
                    v3(1),
                ),
                velocity: v3(8),
                accel_bias: v3(11),
                gyro_bias: v3(14),
                landmarks: u32::from_le_bytes(c[1..5].try_into().expect("4 bytes")) as usize,
                covariance_diagonal: std::array::from_fn(|i| f[17 + i]),
            }
        })
        .collect())
}

pub fn write_tracks_csv(path: &Path, rows: &[TrackRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let e = csv_err(path);
    w.write_record([
        "frame", "id", "pred_u", "pred_v", "match_u", "match_v", "hamming", "window_major", "window_minor", "outcome",
    ])
    .map_err(&e)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.frame.to_string(),
            r.id.to_string(),
            opt(r.predicted.map(|p| p.x)),
            opt(r.predicted.map(|p| p.y)),
            opt(r.matched.map(|p| p.x)),
            opt(r.matched.map(|p| p.y)),
            r.hamming.map(|h| h.to_string()).unwrap_or_default(),
            opt(r.window.map(|p| p.x)),
            opt(r.window.map(|p| p.y)),
            r.outcome.to_string(),
        ])
        .map_err(&e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_landmark_log(path: &Path, events: &[LandmarkEvent]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let e = csv_err(path);
    w.write_record(["frame", "t", "id", "event", "modality", "x", "y", "z"]).map_err(&e)?;
    for ev in events {
        let kind = match ev.kind {
            LandmarkEventKind::Added => "added",
            LandmarkEventKind::Missed => "dropped_missed",
            LandmarkEventKind::OutOfView => "dropped_out_of_view",
        };
        let mut rec = vec![
            ev.frame.to_string(),
            format!("{:?}", ev.timestamp),
            ev.id.to_string(),
            kind.to_string(),
            ev.modality.as_str().to_string(),
        ];
        rec.extend(ev.world_point.iter().map(|x| format!("{x:?}")));
        w.write_record(rec).map_err(&e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const BINARY_LOG_FILE: &str = "trajectory.bin";
pub const LANDMARK_LOG_FILE: &str = "landmarks.csv";
pub const FRAME_STATS_FILE: &str = "frames.csv";
pub const REPORT_FILE: &str = "report.json";

impl RunOutput {
    pub fn timed_poses(&self) -> Vec<TimedPose> {
        self.records.iter().map(|r| r.timed_pose()).collect()
    }

    /// Writes the trajectory CSV and binary log, landmark log, per-frame
    /// statistics and the JSON report into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_trajectory_csv(&dir.join(TRAJECTORY_FILE), &self.records)?;
        write_binary_log(&dir.join(BINARY_LOG_FILE), &self.records)?;
        write_landmark_log(&dir.join(LANDMARK_LOG_FILE), &self.landmark_events)?;
        let path = dir.join(FRAME_STATS_FILE);
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        for f in &self.frames {
            w.serialize(f).map_err(csv_err(&path))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let path = dir.join(REPORT_FILE);
        let json = serde_json::to_string_pretty(&self.report).expect("report serializes");
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{SimConfig, SimNoise};
    use crate::sim::trajectory::TrajectorySpec;

    fn static_sim(duration: f64) -> Simulation {
        let mut cfg = SimConfig::rectangle_flight().with_resolution(160, 120);
        cfg.trajectory = TrajectorySpec::Static {
            position: [2.4, 1.0, 1.0],
            yaw: crate::sim::FACING_PLUS_Y,
            duration,
        };
        cfg.noise = SimNoise::default();
        Simulation::new(cfg).unwrap()
    }

    #[test]
    fn imu_only_is_dead_reckoning_with_heartbeats() {
        let sim = static_sim(3.0);
        let mut p = Pipeline::new(PipelineConfig::default(), sim.calibration()).unwrap();
        for s in sim.imu() {
            p.process_imu(s).unwrap();
        }
        let out = p.finish();
        assert!(out.frames.is_empty());
        assert!(out.report.warnings.iter().any(|w| w.contains("dead reckoning")));
        // Initialised at 0.5 s, then a record every 0.5 s.
        assert_eq!(out.records.len(), 5);
        assert!(out.records.iter().all(|r| r.source == RecordSource::Heartbeat));
    }

    #[test]
    fn static_scene_holds_position() {
        let sim = static_sim(10.0);
        let out = run_simulation(&sim, &PipelineConfig::default(), RunOptions::default()).unwrap();
        let first = out.records.first().unwrap().pose.translation;
        let last = out.records.last().unwrap().pose.translation;
        assert!((last - first).norm() < 0.05, "drift {}", (last - first).norm());
        assert!(out.report.min_landmarks_after_first_frame >= 10, "{:?}", out.report.min_landmarks_after_first_frame);
    }

    #[test]
    fn rejects_out_of_order_input() {
        let sim = static_sim(1.0);
        let mut p = Pipeline::new(PipelineConfig::default(), sim.calibration()).unwrap();
        p.process_imu(&sim.imu()[5]).unwrap();
        assert!(matches!(p.process_imu(&sim.imu()[4]), Err(Error::Data(_))));
    }

    #[test]
    fn binary_log_round_trip() {
        let sim = static_sim(2.0);
        let out = run_simulation(&sim, &PipelineConfig::default(), RunOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        out.write(dir.path()).unwrap();
        let back = read_binary_log(&dir.path().join(BINARY_LOG_FILE)).unwrap();
        assert_eq!(back, out.records);
        let poses = crate::eval::read_poses(&dir.path().join(TRAJECTORY_FILE)).unwrap();
        assert_eq!(poses.len(), out.records.len());
    }
}
