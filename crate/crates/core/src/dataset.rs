//! On-disk dataset layout shared by recorded and simulated data.
//!
//! ```text
//! root/
//!   manifest.txt       index: calibration, IMU file, one line per frame
//!   calib.cfg          sensor calibration (TOML)
//!   imu.csv            t,fx,fy,fz,wx,wy,wz
//!   gray/NNNNNN.pgm    8-bit intensity
//!   depth/NNNNNN.png   16-bit depth in millimetres, 0 = invalid
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ::image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use ::image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat};
use nalgebra::Vector3;

use crate::calib::Calibration;
use crate::ekf::ImuSample;
use crate::error::{Error, Result};
use crate::frame::{depth_from_millimeters, depth_to_millimeters, RegisteredFrame};
use crate::image::{DepthImage, GrayImage, Image};
use crate::registration::register_depth_to_color;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CALIBRATION_FILE: &str = "calib.cfg";
pub const IMU_FILE: &str = "imu.csv";
pub const IMU_HEADER: [&str; 7] = ["t", "fx", "fy", "fz", "wx", "wy", "wz"];
const MANIFEST_MAGIC: &str = "# vdi dataset v1";

/// One element of the merged, time-ordered stream.
#[derive(Clone, Debug)]
pub enum Event {
    Imu(ImuSample),
    Frame(RegisteredFrame),
}

impl Event {
    pub fn timestamp(&self) -> f64 {
        match self {
            Event::Imu(s) => s.timestamp,
            Event::Frame(f) => f.timestamp,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameEntry {
    pub timestamp: f64,
    /// Paths relative to the dataset root.
    pub gray: PathBuf,
    pub depth: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub calibration: PathBuf,
    pub imu: PathBuf,
    /// Whether depth images are already on the intensity pixel grid.
    pub depth_registered: bool,
    pub frames: Vec<FrameEntry>,
    pub metadata: BTreeMap<String, String>,
}

fn data_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}:{line}: {msg}", path.display()))
}

impl DatasetManifest {
    /// Parses `root/manifest.txt` and checks that every referenced file
    /// exists and frame timestamps strictly increase.
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m = DatasetManifest {
            root: root.to_path_buf(),
            calibration: CALIBRATION_FILE.into(),
            imu: IMU_FILE.into(),
            depth_registered: true,
            frames: Vec::new(),
            metadata: BTreeMap::new(),
        };
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["calibration", p] => m.calibration = p.into(),
                ["imu", p] => m.imu = p.into(),
                ["depth_registered", v] => {
                    m.depth_registered = v
                        .parse()
                        .map_err(|_| data_err(&path, line_no, format!("expected true or false, got '{v}'")))?;
                }
                ["meta", key, rest @ ..] => {
                    m.metadata.insert(key.to_string(), rest.join(" "));
                }
                ["frame", t, gray, depth] => {
                    let timestamp: f64 = t
                        .parse()
                        .ok()
                        .filter(|x: &f64| x.is_finite())
                        .ok_or_else(|| data_err(&path, line_no, format!("bad timestamp '{t}'")))?;
                    if let Some(prev) = m.frames.last() {
                        if timestamp <= prev.timestamp {
                            return Err(data_err(
                                &path,
                                line_no,
                                format!("frame {} timestamp {timestamp} does not increase", m.frames.len()),
                            ));
                        }
                    }
                    m.frames.push(FrameEntry {
                        timestamp,
                        gray: gray.into(),
                        depth: depth.into(),
                    });
                }
                _ => return Err(data_err(&path, line_no, format!("unrecognised line '{line}'"))),
            }
        }
        m.check_files()?;
        Ok(m)
    }

    fn check_files(&self) -> Result<()> {
        for rel in [&self.calibration, &self.imu] {
            let p = self.root.join(rel);
            if !p.is_file() {
                return Err(Error::Data(format!("missing file {}", p.display())));
            }
        }
        for (i, f) in self.frames.iter().enumerate() {
            for (kind, rel) in [("gray", &f.gray), ("depth", &f.depth)] {
                let p = self.root.join(rel);
                if !p.is_file() {
                    return Err(Error::Data(format!(
                        "missing {kind} file {} for frame {i} at t = {}",
                        p.display(),
                        f.timestamp
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{MANIFEST_MAGIC}\ncalibration {}\nimu {}\ndepth_registered {}\n",
            self.calibration.display(),
            self.imu.display(),
            self.depth_registered
        );
        for (k, v) in &self.metadata {
            s.push_str(&format!("meta {k} {v}\n"));
        }
        for f in &self.frames {
            s.push_str(&format!("frame {} {} {}\n", f.timestamp, f.gray.display(), f.depth.display()));
        }
        s
    }
}

/// Reads `imu.csv`; timestamps must strictly increase.
pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(BufReader::new(file));
    let headers = rdr.headers().map_err(|e| data_err(path, 1, e))?;
    if headers.iter().collect::<Vec<_>>() != IMU_HEADER {
        return Err(data_err(path, 1, format!("expected header {}", IMU_HEADER.join(","))));
    }
    let mut out: Vec<ImuSample> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| data_err(path, line, e))?;
        let mut v = [0.0; 7];
        if rec.len() != 7 {
            return Err(data_err(path, line, format!("expected 7 fields, found {}", rec.len())));
        }
        for (x, s) in v.iter_mut().zip(rec.iter()) {
            *x = s
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| data_err(path, line, format!("bad number '{s}'")))?;
        }
        if let Some(prev) = out.last() {
            if v[0] <= prev.timestamp {
                return Err(data_err(path, line, format!("IMU sample {i} timestamp {} does not increase", v[0])));
            }
        }
        out.push(ImuSample {
            timestamp: v[0],
            accel: Vector3::new(v[1], v[2], v[3]),
            gyro: Vector3::new(v[4], v[5], v[6]),
        });
    }
    Ok(out)
}

pub fn write_imu_csv(path: &Path, samples: &[ImuSample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", IMU_HEADER.join(",")).map_err(io)?;
    for s in samples {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            s.timestamp, s.accel.x, s.accel.y, s.accel.z, s.gyro.x, s.gyro.y, s.gyro.z
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let enc = PnmEncoder::new(BufWriter::new(file)).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    enc.write_image(img.data(), img.width() as u32, img.height() as u32, ExtendedColorType::L8)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

fn decode(path: &Path, format: ImageFormat) -> Result<DynamicImage> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ::image::load(BufReader::new(file), format).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let img = decode(path, ImageFormat::Pnm)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Image::from_vec(w as usize, h as usize, img.into_raw()).expect("sized"))
}

/// Writes depth (metres) as a 16-bit millimetre PNG.
pub fn write_depth_png(path: &Path, depth: &DepthImage) -> Result<()> {
    let mm = depth_to_millimeters(depth);
    let bytes: Vec<u8> = mm.data().iter().flat_map(|v| v.to_ne_bytes()).collect();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    ::image::codecs::png::PngEncoder::new(BufWriter::new(file))
        .write_image(&bytes, mm.width() as u32, mm.height() as u32, ExtendedColorType::L16)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub fn read_depth_png(path: &Path) -> Result<DepthImage> {
    let img = match decode(path, ImageFormat::Png)? {
        DynamicImage::ImageLuma16(img) => img,
        other => {
            return Err(Error::Data(format!(
                "{}: depth must be a 16-bit grayscale PNG, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = img.dimensions();
    let raw = Image::from_vec(w as usize, h as usize, img.into_raw()).expect("sized");
    Ok(depth_from_millimeters(&raw))
}

/// Opened dataset: manifest, calibration and the full IMU stream. Frames are
/// decoded lazily by [`Dataset::events`].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub calibration: Calibration,
    pub imu: Vec<ImuSample>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(root)?;
        let calibration = Calibration::load(&root.join(&manifest.calibration))?;
        let imu = read_imu_csv(&root.join(&manifest.imu))?;
        Ok(Self {
            manifest,
            calibration,
            imu,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.manifest.frames.len()
    }

    /// Decodes frame `i`, registering depth onto the intensity grid when the
    /// manifest says it is not.
    pub fn load_frame(&self, i: usize) -> Result<RegisteredFrame> {
        let entry = self
            .manifest
            .frames
            .get(i)
            .ok_or_else(|| Error::Data(format!("frame index {i} out of range")))?;
        let root = &self.manifest.root;
        let gray = read_pgm(&root.join(&entry.gray))?;
        let mut depth = read_depth_png(&root.join(&entry.depth))?;
        let calib = &self.calibration;
        if !self.manifest.depth_registered {
            depth = register_depth_to_color(&depth, &calib.depth, &calib.color, &calib.color_from_depth, calib.range)?;
        }
        RegisteredFrame::new(entry.timestamp, gray, depth, calib.color, calib.range)
            .map_err(|e| Error::Data(format!("frame {i} at t = {}: {e}", entry.timestamp)))
    }

    /// Merged stream ordered by timestamp; at equal timestamps IMU samples
    /// come first.
    pub fn events(&self) -> Events<'_> {
        Events {
            dataset: self,
            next_imu: 0,
            next_frame: 0,
        }
    }
}

pub struct Events<'a> {
    dataset: &'a Dataset,
    next_imu: usize,
    next_frame: usize,
}

impl Iterator for Events<'_> {
    type Item = Result<Event>;

    fn next(&mut self) -> Option<Self::Item> {
        let imu = self.dataset.imu.get(self.next_imu);
        let frame_t = self.dataset.manifest.frames.get(self.next_frame).map(|f| f.timestamp);
        match (imu, frame_t) {
            (Some(s), Some(t)) if s.timestamp <= t => {
                self.next_imu += 1;
                Some(Ok(Event::Imu(*s)))
            }
            (Some(s), None) => {
                self.next_imu += 1;
                Some(Ok(Event::Imu(*s)))
            }
            (_, Some(_)) => {
                let i = self.next_frame;
                self.next_frame += 1;
                Some(self.dataset.load_frame(i).map(Event::Frame))
            }
            (None, None) => None,
        }
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.dataset.imu.len() - self.next_imu + self.dataset.frame_count() - self.next_frame;
        (n, Some(n))
    }
}

/// Streams frames to disk and writes the manifest on [`finish`](Self::finish).
pub struct DatasetWriter {
    manifest: DatasetManifest,
}

impl DatasetWriter {
    /// Creates the directory layout and writes the calibration and IMU file.
    pub fn create(root: &Path, calibration: &Calibration, imu: &[ImuSample]) -> Result<Self> {
        for dir in [root.to_path_buf(), root.join("gray"), root.join("depth")] {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        if imu.windows(2).any(|w| w[1].timestamp <= w[0].timestamp) {
            return Err(Error::Data("IMU timestamps must strictly increase".into()));
        }
        calibration.save(&root.join(CALIBRATION_FILE))?;
        write_imu_csv(&root.join(IMU_FILE), imu)?;
        Ok(Self {
            manifest: DatasetManifest {
                root: root.to_path_buf(),
                calibration: CALIBRATION_FILE.into(),
                imu: IMU_FILE.into(),
                depth_registered: true,
                frames: Vec::new(),
                metadata: BTreeMap::new(),
            },
        })
    }

    pub fn set_metadata(&mut self, key: &str, value: impl std::fmt::Display) {
        self.manifest.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn write_frame(&mut self, frame: &RegisteredFrame) -> Result<()> {
        if let Some(prev) = self.manifest.frames.last() {
            if frame.timestamp <= prev.timestamp {
                return Err(Error::Data(format!(
                    "frame {} timestamp {} does not increase",
                    self.manifest.frames.len(),
                    frame.timestamp
                )));
            }
        }
        let i = self.manifest.frames.len();
        let entry = FrameEntry {
            timestamp: frame.timestamp,
            gray: PathBuf::from(format!("gray/{i:06}.pgm")),
            depth: PathBuf::from(format!("depth/{i:06}.png")),
        };
        write_pgm(&self.manifest.root.join(&entry.gray), &frame.gray)?;
        write_depth_png(&self.manifest.root.join(&entry.depth), &frame.depth)?;
        self.manifest.frames.push(entry);
        Ok(())
    }

    pub fn finish(self) -> Result<DatasetManifest> {
        let path = self.manifest.root.join(MANIFEST_FILE);
        fs::write(&path, self.manifest.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(self.manifest)
    }
}

/// Writes a complete dataset from a merged event stream.
pub fn write_dataset(root: &Path, calibration: &Calibration, events: &[Event]) -> Result<DatasetManifest> {
    let imu: Vec<ImuSample> = events
        .iter()
        .filter_map(|e| match e {
            Event::Imu(s) => Some(*s),
            Event::Frame(_) => None,
        })
        .collect();
    let mut w = DatasetWriter::create(root, calibration, &imu)?;
    for e in events {
        if let Event::Frame(f) = e {
            w.write_frame(f)?;
        }
    }
    w.finish()
}
