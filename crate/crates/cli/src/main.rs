//! `vdi`: run, simulate, evaluate and debug the visual-depth-inertial
//! odometry pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vdi_core::calib::append_dark_noise;
use vdi_core::config::PipelineConfig;
use vdi_core::dataset::{read_pgm, write_pgm, Dataset, DatasetWriter};
use vdi_core::descriptor::calibrate_dark_noise;
use vdi_core::detect::{select_keypoints, ScoreMap, ScoreMaps};
use vdi_core::eval::{evaluate_ate, evaluate_rpe, final_drift, read_poses, write_poses};
use vdi_core::image::GrayImage;
use vdi_core::pipeline::{ground_truth_poses, run_dataset, simulation_calibration, write_tracks_csv, RunOptions};
use vdi_core::sim::{SimConfig, SimNoise, Simulation};
use vdi_core::{Error, ErrorClass, Result};

#[derive(Parser)]
#[command(name = "vdi", version, about = "Visual-depth-inertial odometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run odometry over a dataset and write trajectory, landmark log and report.
    Run {
        /// Dataset root (contains manifest.txt).
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: PathBuf,
        /// Per-frame landmark search log (CSV).
        #[arg(long)]
        dump_tracks: Option<PathBuf>,
        /// Pace processing by the data timestamps.
        #[arg(long)]
        realtime: bool,
        /// Worker threads for the pipeline (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Generate a synthetic dataset with ground truth.
    Simulate {
        #[arg(long, value_enum, default_value_t = Scenario::Rectangle)]
        scenario: Scenario,
        /// Scene and trajectory file (TOML); replaces the scenario preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: PathBuf,
        /// Output resolution as WIDTHxHEIGHT, keeping the field of view.
        #[arg(long)]
        resolution: Option<String>,
        /// Disable every sensor noise source.
        #[arg(long)]
        zero_noise: bool,
    },
    /// Compare an estimated trajectory with ground truth.
    Evaluate {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        /// Directory for evaluation.csv.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Skip rigid alignment before computing the absolute error.
        #[arg(long)]
        no_align: bool,
        /// Time offset of the relative pose error (s).
        #[arg(long, default_value_t = 1.0)]
        rpe_delta: f64,
    },
    /// Write the score maps and keypoints of one frame.
    Detect {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Measure the dark-noise intensity from images taken in darkness and
    /// store it in a calibration file.
    CalibrateDarkNoise {
        /// Directory of PGM images (or a dataset root, whose gray/ is used).
        #[arg(long)]
        input: PathBuf,
        /// Calibration file to update.
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scenario {
    Rectangle,
    DarkRoom,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
        ErrorClass::Io => 5,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vdi: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run {
            dataset,
            config,
            seed,
            output,
            dump_tracks,
            realtime,
            threads,
        } => cmd_run(&dataset, config.as_deref(), seed, &output, dump_tracks.as_deref(), realtime, threads),
        Command::Simulate {
            scenario,
            config,
            seed,
            output,
            resolution,
            zero_noise,
        } => cmd_simulate(scenario, config.as_deref(), seed, &output, resolution.as_deref(), zero_noise),
        Command::Evaluate {
            estimate,
            ground_truth,
            output,
            no_align,
            rpe_delta,
        } => cmd_evaluate(&estimate, &ground_truth, output.as_deref(), !no_align, rpe_delta),
        Command::Detect {
            dataset,
            frame,
            config,
            output,
        } => cmd_detect(&dataset, frame, config.as_deref(), &output),
        Command::CalibrateDarkNoise { input, output } => cmd_calibrate(&input, &output),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn cmd_run(
    dataset: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    output: &Path,
    dump_tracks: Option<&Path>,
    realtime: bool,
    threads: Option<usize>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let ds = Dataset::open(dataset)?;
    let options = RunOptions {
        dump_tracks: dump_tracks.is_some(),
        realtime,
        threads,
    };
    let out = run_dataset(&ds, &cfg, options)?;
    out.write(output)?;
    if let Some(path) = dump_tracks {
        write_tracks_csv(path, &out.tracks)?;
    }
    for w in &out.report.warnings {
        eprintln!("warning: {w}");
    }
    let r = &out.report;
    println!(
        "processed {} frames and {} IMU samples; {:.1} frames/s; mean {:.1} landmarks; match rate {:.2}",
        r.frames_processed, r.imu_samples, r.throughput_hz, r.mean_landmarks, r.match_rate
    );
    println!("outputs written to {}", output.display());
    Ok(())
}

fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("resolution '{s}' is not WIDTHxHEIGHT"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    if w < 48 || h < 48 {
        return Err(Error::Config(format!("resolution {w}x{h} is below the 48x48 descriptor window")));
    }
    Ok((w, h))
}

fn cmd_simulate(
    scenario: Scenario,
    config: Option<&Path>,
    seed: Option<u64>,
    output: &Path,
    resolution: Option<&str>,
    zero_noise: bool,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            toml::from_str::<SimConfig>(&text).map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?
        }
        None => match scenario {
            Scenario::Rectangle => SimConfig::rectangle_flight(),
            Scenario::DarkRoom => SimConfig::dark_room(),
        },
    };
    if let Some(r) = resolution {
        let (w, h) = parse_resolution(r)?;
        cfg = cfg.with_resolution(w, h);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if zero_noise {
        cfg.noise = SimNoise::zero();
    }
    let sim = Simulation::new(cfg)?;
    let calib = simulation_calibration(&sim)?;
    let mut writer = DatasetWriter::create(output, &calib, sim.imu())?;
    writer.set_metadata("source", "simulator");
    writer.set_metadata("seed", sim.config().seed);
    writer.set_metadata("imu_rate", sim.config().imu_rate);
    writer.set_metadata("frame_rate", sim.config().frame_rate);
    const BATCH: usize = 16;
    let n = sim.frame_count();
    for start in (0..n).step_by(BATCH) {
        for frame in sim.render_batch(start..(start + BATCH).min(n)) {
            writer.write_frame(&frame)?;
        }
    }
    writer.finish()?;
    let gt = ground_truth_poses(&sim, sim.imu().iter().map(|s| s.timestamp));
    write_poses(&output.join("ground_truth.csv"), &gt)?;
    let sim_cfg = toml::to_string(sim.config()).expect("simulation config serializes");
    let path = output.join("simulation.toml");
    std::fs::write(&path, sim_cfg).map_err(|e| Error::Io { path, source: e })?;
    println!(
        "wrote {} frames, {} IMU samples and ground truth to {}",
        n,
        sim.imu().len(),
        output.display()
    );
    Ok(())
}

fn cmd_evaluate(estimate: &Path, ground_truth: &Path, output: Option<&Path>, align: bool, rpe_delta: f64) -> Result<()> {
    let est = read_poses(estimate)?;
    let gt = read_poses(ground_truth)?;
    let ate = evaluate_ate(&est, &gt, align)?;
    let rpe = evaluate_rpe(&est, &gt, rpe_delta)?;
    let drift = final_drift(&est, &gt)?;
    let rows = [
        ("ate_rmse_m", ate.rmse),
        ("ate_mean_m", ate.mean),
        ("ate_max_m", ate.max),
        ("rpe_translation_rmse_m", rpe.translation_rmse),
        ("rpe_rotation_rmse_rad", rpe.rotation_rmse),
        ("final_position_error_m", drift),
    ];
    println!("{:<26} {:>12}", "metric", "value");
    for (k, v) in rows {
        println!("{k:<26} {v:>12.3}");
    }
    println!("{:<26} {:>12}", "associated_poses", ate.pairs);
    println!("{:<26} {:>12}", "rpe_pairs", rpe.pairs);
    if let Some(dir) = output {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let mut text = String::from("metric,value\n");
        for (k, v) in rows {
            text.push_str(&format!("{k},{v:?}\n"));
        }
        text.push_str(&format!("associated_poses,{}\nrpe_pairs,{}\nrpe_delta_s,{rpe_delta:?}\naligned,{align}\n", ate.pairs, rpe.pairs));
        let path = dir.join("evaluation.csv");
        std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
    }
    Ok(())
}

fn to_pgm(map: &ScoreMap) -> GrayImage {
    map.values.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

fn cmd_detect(dataset: &Path, frame: usize, config: Option<&Path>, output: &Path) -> Result<()> {
    let cfg = load_config(config, None)?;
    let ds = Dataset::open(dataset)?;
    let f = ds.load_frame(frame)?;
    let maps = ScoreMaps::compute(&f, &cfg.detector)?;
    std::fs::create_dir_all(output).map_err(|e| Error::Io {
        path: output.to_path_buf(),
        source: e,
    })?;
    write_pgm(&output.join("visual_score.pgm"), &to_pgm(&maps.visual))?;
    write_pgm(&output.join("depth_score.pgm"), &to_pgm(&maps.depth))?;
    write_pgm(&output.join("combined_score.pgm"), &to_pgm(&maps.combined))?;
    let candidates = maps.candidates(&f);
    let selected = select_keypoints(&candidates, &cfg.detector);
    let mut text = String::from("u,v,score,modality,depth\n");
    for k in &selected {
        let depth = k.depth.map(|d| format!("{d:?}")).unwrap_or_default();
        text.push_str(&format!("{},{},{:?},{},{depth}\n", k.pixel.x, k.pixel.y, k.score, k.modality.as_str()));
    }
    let path = output.join("keypoints.csv");
    std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
    println!(
        "frame {frame}: {} visual, {} depth, {} combined candidates; {} keypoints selected",
        maps.visual.nonzero_count(),
        maps.depth.nonzero_count(),
        candidates.len(),
        selected.len()
    );
    Ok(())
}

fn cmd_calibrate(input: &Path, output: &Path) -> Result<()> {
    let dir = if input.join("gray").is_dir() { input.join("gray") } else { input.to_path_buf() };
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no .pgm images in {}", dir.display())));
    }
    let images = paths.iter().map(|p| read_pgm(p)).collect::<Result<Vec<_>>>()?;
    let dn = calibrate_dark_noise(&images)?;
    append_dark_noise(output, dn.intensity())?;
    println!("dark noise {:.4} from {} images written to {}", dn.intensity(), images.len(), output.display());
    Ok(())
}
