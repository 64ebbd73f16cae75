//! Synthetic labeled point cloud videos and their on-disk formats.
//!
//! Every class animates the same two-cluster Gaussian blob (so a single
//! frame carries no class signal); the classes differ only in how the blob
//! moves, each tracing a distinct centroid trajectory. Points are re-noised
//! and shuffled every frame, so no cross-frame correspondence survives.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::PointCloudVideo;

/// The six motion classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionKind {
    /// Constant drift along +x.
    TranslateX,
    /// Constant drift along +y.
    TranslateY,
    /// Whole-blob rotation about a pivot offset in +x (xy-plane orbit).
    RotateZ,
    /// Sinusoidal sway along x.
    Oscillate,
    /// Uniform growth about a pivot offset in +z.
    Expand,
    /// One half of the blob swings about the inter-cluster hinge (xz-plane).
    Articulate,
}

impl MotionKind {
    pub const ALL: [MotionKind; 6] = [
        MotionKind::TranslateX,
        MotionKind::TranslateY,
        MotionKind::RotateZ,
        MotionKind::Oscillate,
        MotionKind::Expand,
        MotionKind::Articulate,
    ];

    pub fn label(self) -> u16 {
        match self {
            MotionKind::TranslateX => 0,
            MotionKind::TranslateY => 1,
            MotionKind::RotateZ => 2,
            MotionKind::Oscillate => 3,
            MotionKind::Expand => 4,
            MotionKind::Articulate => 5,
        }
    }

    pub fn from_label(label: u16) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.label() == label)
            .ok_or_else(|| Error::contract(format!("no motion class with label {label}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionKind::TranslateX => "translate-x",
            MotionKind::TranslateY => "translate-y",
            MotionKind::RotateZ => "rotate-z",
            MotionKind::Oscillate => "oscillate",
            MotionKind::Expand => "expand",
            MotionKind::Articulate => "articulate",
        }
    }
}

impl FromStr for MotionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown motion class {s:?}")))
    }
}

/// A motion class with its sampling knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionClass {
    pub kind: MotionKind,
    /// Per-frame speed drawn uniformly from [lo, hi] (lo == hi allowed).
    pub speed: (f64, f64),
    /// Per-coordinate Gaussian observation noise, fresh each frame.
    pub noise_sigma: f64,
}

/// Two generator distributions differing in speed ranges, for transfer
/// experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    A,
    B,
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" | "A" => Ok(Domain::A),
            "b" | "B" => Ok(Domain::B),
            other => Err(Error::Config(format!("unknown domain {other:?}; expected a|b"))),
        }
    }
}

impl Domain {
    /// Class parameters for this domain; B runs 1.6× faster.
    pub fn class(self, kind: MotionKind, noise_sigma: f64) -> MotionClass {
        let base = match kind {
            MotionKind::TranslateX | MotionKind::TranslateY => (0.020, 0.030),
            MotionKind::RotateZ => (0.08, 0.12),
            MotionKind::Oscillate => (0.25, 0.35),
            MotionKind::Expand => (0.015, 0.025),
            MotionKind::Articulate => (0.10, 0.15),
        };
        let f = match self {
            Domain::A => 1.0,
            Domain::B => 1.6,
        };
        MotionClass {
            kind,
            speed: (base.0 * f, base.1 * f),
            noise_sigma,
        }
    }
}

/// Oscillation period in frames, fixed across classes.
const OSCILLATE_PERIOD: f64 = 12.0;
/// Pivot offsets (pre-set in normalized coordinates).
const ROTATE_PIVOT_OFFSET: f64 = 0.25;
const EXPAND_PIVOT_OFFSET: f64 = 0.3;

/// Motion driver for one segment: advances the true (noise-free) pose one
/// frame at a time, so segment boundaries are positionally continuous.
struct SegmentDriver {
    kind: MotionKind,
    speed: f64,
    /// Fixed pivot/hinge chosen at segment start.
    pivot: [f64; 3],
    /// Frames elapsed within this segment.
    tau: usize,
}

fn centroid(points: &[[f64; 3]]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    for v in &mut c {
        *v /= points.len() as f64;
    }
    c
}

fn centroid_of(points: &[[f64; 3]], range: std::ops::Range<usize>) -> [f64; 3] {
    centroid(&points[range])
}

impl SegmentDriver {
    fn new(class: &MotionClass, points: &[[f64; 3]], speed: f64) -> Self {
        let c = centroid(points);
        let pivot = match class.kind {
            MotionKind::RotateZ => [c[0] + ROTATE_PIVOT_OFFSET, c[1], c[2]],
            MotionKind::Expand => [c[0], c[1], c[2] + EXPAND_PIVOT_OFFSET],
            MotionKind::Articulate => {
                let half = points.len() / 2;
                let a = centroid_of(points, 0..half);
                let b = centroid_of(points, half..points.len());
                [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0]
            }
            _ => c,
        };
        SegmentDriver {
            kind: class.kind,
            speed,
            pivot,
            tau: 0,
        }
    }

    /// Advance the pose by one frame.
    fn step(&mut self, points: &mut [[f64; 3]]) {
        match self.kind {
            MotionKind::TranslateX => {
                for p in points.iter_mut() {
                    p[0] += self.speed;
                }
            }
            MotionKind::TranslateY => {
                for p in points.iter_mut() {
                    p[1] += self.speed;
                }
            }
            MotionKind::RotateZ => {
                rotate_about(points, self.pivot, self.speed, Plane::Xy);
            }
            MotionKind::Oscillate => {
                let omega = 2.0 * std::f64::consts::PI / OSCILLATE_PERIOD;
                let t = self.tau as f64;
                let dx = self.speed * ((omega * (t + 1.0)).sin() - (omega * t).sin());
                for p in points.iter_mut() {
                    p[0] += dx;
                }
            }
            MotionKind::Expand => {
                // Telescoping per-frame ratio of s_t = 1 + speed·t.
                let t = self.tau as f64;
                let ratio = (1.0 + self.speed * (t + 1.0)) / (1.0 + self.speed * t);
                for p in points.iter_mut() {
                    for (v, pivot) in p.iter_mut().zip(self.pivot) {
                        *v = pivot + ratio * (*v - pivot);
                    }
                }
            }
            MotionKind::Articulate => {
                let half = points.len() / 2;
                let (_, swing) = points.split_at_mut(half);
                rotate_about(swing, self.pivot, self.speed, Plane::Xz);
            }
        }
        self.tau += 1;
    }
}

enum Plane {
    Xy,
    Xz,
}

fn rotate_about(points: &mut [[f64; 3]], pivot: [f64; 3], theta: f64, plane: Plane) {
    let (s, c) = theta.sin_cos();
    let (i, j) = match plane {
        Plane::Xy => (0, 1),
        Plane::Xz => (0, 2),
    };
    for p in points {
        let u = p[i] - pivot[i];
        let v = p[j] - pivot[j];
        p[i] = pivot[i] + c * u - s * v;
        p[j] = pivot[j] + s * u + c * v;
    }
}

/// Blob construction shared by all classes: two Gaussian sub-clusters at a
/// fixed offset, then scaled so frame 0 sits exactly in the unit sphere.
fn base_cloud(n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let spread = Normal::new(0.0, 0.15).expect("valid sigma");
    let offset = [0.35, 0.0, 0.0];
    let mut points: Vec<[f64; 3]> = Vec::with_capacity(n);
    let half = n / 2;
    for i in 0..n {
        let cx = if i < half { -0.2 } else { 0.2 };
        points.push([
            offset[0] + cx + spread.sample(rng),
            offset[1] + spread.sample(rng),
            offset[2] + spread.sample(rng),
        ]);
    }
    let max_norm = points
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    for p in &mut points {
        for v in p.iter_mut() {
            *v /= max_norm;
        }
    }
    points
}

/// Emit one observed frame: pose + fresh noise, order shuffled.
fn emit_frame(
    pose: &[[f64; 3]],
    sigma: f64,
    rng: &mut impl Rng,
    out: &mut Vec<f32>,
) -> Result<()> {
    let mut order: Vec<usize> = (0..pose.len()).collect();
    order.shuffle(rng);
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma)
            .map_err(|_| Error::contract(format!("invalid noise sigma {sigma}")))?;
        for &i in &order {
            for v in pose[i] {
                out.push((v + noise.sample(rng)) as f32);
            }
        }
    } else {
        for &i in &order {
            for v in pose[i] {
                out.push(v as f32);
            }
        }
    }
    Ok(())
}

fn drive_segments(
    plan: &[(MotionClass, usize)],
    n: usize,
    seed: u64,
) -> Result<(Vec<f32>, Vec<u16>, usize)> {
    let l: usize = plan.iter().map(|(_, len)| len).sum();
    if l == 0 || n == 0 {
        return Err(Error::contract("video needs at least one frame and one point"));
    }
    if plan.iter().any(|(_, len)| *len == 0) {
        return Err(Error::contract("zero-length segment in plan"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut pose = base_cloud(n, &mut rng);
    let mut coords = Vec::with_capacity(l * n * 3);
    let mut frame_labels = Vec::with_capacity(l);

    let mut emitted = 0usize;
    for (class, len) in plan {
        let speed = class.speed.0 + rng.random::<f64>() * (class.speed.1 - class.speed.0);
        let mut driver = SegmentDriver::new(class, &pose, speed);
        for _ in 0..*len {
            // The very first frame of the video is the initial pose itself.
            if emitted > 0 {
                driver.step(&mut pose);
            }
            emit_frame(&pose, class.noise_sigma, &mut rng, &mut coords)?;
            frame_labels.push(class.kind.label());
            emitted += 1;
        }
    }
    Ok((coords, frame_labels, l))
}

/// Generate one single-class video with its video-level label.
pub fn generate_video(class: &MotionClass, l: usize, n: usize, seed: u64) -> Result<PointCloudVideo> {
    let (coords, _, l) = drive_segments(&[(*class, l)], n, seed)?;
    Ok(PointCloudVideo::new(coords, l, n)?.with_label(class.kind.label()))
}

/// Generate a multi-segment video with per-frame labels; each segment
/// continues from the previous end pose.
pub fn generate_segmented_video(
    plan: &[(MotionClass, usize)],
    n: usize,
    seed: u64,
) -> Result<PointCloudVideo> {
    if plan.is_empty() {
        return Err(Error::contract("segment plan is empty"));
    }
    let (coords, frame_labels, l) = drive_segments(plan, n, seed)?;
    PointCloudVideo::new(coords, l, n)?.with_frame_labels(frame_labels)
}

// ---------------------------------------------------------------------------
// On-disk video format.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"PCV1";
const FLAG_FEATURES: u8 = 1;
const FLAG_LABEL: u8 = 2;
const FLAG_FRAME_LABELS: u8 = 4;

/// Serialize a video: magic, flags byte, u32 L/N/C_in, f32 coordinates,
/// optional f32 features, optional u16 label, optional u16 frame labels.
/// All integers and floats little-endian.
pub fn video_bytes(video: &PointCloudVideo) -> Vec<u8> {
    let (l, n, c_in) = (
        video.num_frames(),
        video.points_per_frame(),
        video.feature_width(),
    );
    let mut flags = 0u8;
    if video.features().is_some() {
        flags |= FLAG_FEATURES;
    }
    if video.label.is_some() {
        flags |= FLAG_LABEL;
    }
    if video.frame_labels().is_some() {
        flags |= FLAG_FRAME_LABELS;
    }
    let mut out = Vec::with_capacity(17 + l * n * (3 + c_in) * 4);
    out.extend_from_slice(MAGIC);
    out.push(flags);
    out.extend_from_slice(&(l as u32).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(c_in as u32).to_le_bytes());
    for v in video.coords() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(f) = video.features() {
        for v in f {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(label) = video.label {
        out.extend_from_slice(&label.to_le_bytes());
    }
    if let Some(fl) = video.frame_labels() {
        for v in fl {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_video(path: &Path, video: &PointCloudVideo) -> Result<()> {
    fs::write(path, video_bytes(video))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.offset as u64,
                detail: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.offset
                ),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.take(count * 4, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

/// Parse a serialized video, rejecting bad magic, truncation, and trailing
/// bytes with the offending offset.
pub fn video_from_bytes(bytes: &[u8]) -> Result<PointCloudVideo> {
    let mut r = Reader { bytes, offset: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let flags = r.take(1, "flags")?[0];
    if flags & !(FLAG_FEATURES | FLAG_LABEL | FLAG_FRAME_LABELS) != 0 {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unknown flag bits in {flags:#04x}"),
        });
    }
    let l = r.u32("frame count")? as usize;
    let n = r.u32("point count")? as usize;
    let c_in = r.u32("feature width")? as usize;
    if flags & FLAG_FEATURES != 0 && c_in == 0 {
        return Err(Error::Format {
            offset: 13,
            detail: "feature flag set but feature width is 0".into(),
        });
    }
    if flags & FLAG_FEATURES == 0 && c_in != 0 {
        return Err(Error::Format {
            offset: 13,
            detail: format!("feature width {c_in} without the feature flag"),
        });
    }
    let coords = r.f32s(l.checked_mul(n * 3).ok_or_else(|| Error::Format {
        offset: 5,
        detail: "frame/point counts overflow".into(),
    })?, "coordinates")?;
    let mut video = PointCloudVideo::new(coords, l, n).map_err(|e| Error::Format {
        offset: 17,
        detail: format!("invalid coordinate block: {e}"),
    })?;
    if flags & FLAG_FEATURES != 0 {
        let feats = r.f32s(l * n * c_in, "features")?;
        video = video.with_features(feats, c_in).map_err(|e| Error::Format {
            offset: (17 + l * n * 12) as u64,
            detail: format!("invalid feature block: {e}"),
        })?;
    }
    if flags & FLAG_LABEL != 0 {
        video = video.with_label(r.u16("label")?);
    }
    if flags & FLAG_FRAME_LABELS != 0 {
        let mut labels = Vec::with_capacity(l);
        for _ in 0..l {
            labels.push(r.u16("frame labels")?);
        }
        video = video.with_frame_labels(labels).expect("length enforced by loop");
    }
    if r.offset != bytes.len() {
        return Err(Error::Format {
            offset: r.offset as u64,
            detail: format!("{} trailing bytes", bytes.len() - r.offset),
        });
    }
    Ok(video)
}

pub fn read_video(path: &Path) -> Result<PointCloudVideo> {
    video_from_bytes(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Dataset manifests.
// ---------------------------------------------------------------------------

/// Train/test membership of a manifest entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: u16,
    pub split: Split,
}

/// Dataset generation plan: `classes` single-class videos, stratified split.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub classes: Vec<MotionClass>,
    pub per_class: usize,
    /// Fraction of each class routed to the train split; the rest is test.
    pub train_fraction: f64,
    pub frames: usize,
    pub points: usize,
    pub seed: u64,
}

/// Generate per-class videos under `dir`, write `manifest.tsv`
/// (path<TAB>label<TAB>split), and return the entries.
pub fn make_dataset(dir: &Path, spec: &DatasetSpec) -> Result<Vec<ManifestEntry>> {
    if !(0.0..=1.0).contains(&spec.train_fraction) {
        return Err(Error::contract(format!(
            "train fraction must lie in [0,1], got {}",
            spec.train_fraction
        )));
    }
    if spec.classes.is_empty() || spec.per_class == 0 {
        return Err(Error::contract("dataset needs classes and per-class count"));
    }
    fs::create_dir_all(dir)?;
    let n_train = (spec.train_fraction * spec.per_class as f64).round() as usize;
    let mut entries = Vec::with_capacity(spec.classes.len() * spec.per_class);
    for class in &spec.classes {
        for i in 0..spec.per_class {
            // Seed derived per (class, index) so adding classes or videos
            // never shifts other videos.
            let seed = spec
                .seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add((class.kind.label() as u64) << 32 | i as u64);
            let video = generate_video(class, spec.frames, spec.points, seed)?;
            let name = format!("{}_{i:03}.pcv", class.kind.name());
            let path = dir.join(&name);
            write_video(&path, &video)?;
            entries.push(ManifestEntry {
                path,
                label: class.kind.label(),
                split: if i < n_train { Split::Train } else { Split::Test },
            });
        }
    }
    let mut manifest = fs::File::create(dir.join("manifest.tsv"))?;
    for e in &entries {
        writeln!(
            manifest,
            "{}\t{}\t{}",
            e.path.file_name().expect("named file").to_string_lossy(),
            e.label,
            e.split.name()
        )?;
    }
    Ok(entries)
}

/// Read a manifest written by [`make_dataset`]; paths are resolved relative
/// to the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (file, label, split) = (parts.next(), parts.next(), parts.next());
        let (file, label, split) = match (file, label, split, parts.next()) {
            (Some(f), Some(l), Some(s), None) => (f, l, s),
            _ => {
                return Err(Error::Config(format!(
                    "manifest line {} is not path<TAB>label<TAB>split",
                    i + 1
                )))
            }
        };
        let label: u16 = label
            .parse()
            .map_err(|_| Error::Config(format!("manifest line {}: bad label {label:?}", i + 1)))?;
        entries.push(ManifestEntry {
            path: base.join(file),
            label,
            split: split.parse()?,
        });
    }
    Ok(entries)
}
