//! Synthetic two-domain volumes that mimic multi-channel brain MRI slices.
//!
//! Both domains share one intensity table (similar contrast) but differ in
//! lesion structure (different geometry): the source domain has one large
//! irregular lesion per patient with concentric tissue bands, the target
//! domain has one to four small circular lesions. A bright skull ring in the
//! FLAIR channel sits close to the edema intensity, so separating the two is
//! part of what a segmenter must learn.
//!
//! Classes: 0 background (air, normal brain, skull), 1 edema, 2 necrotic
//! core, 3 enhancing rim. Channels: FLAIR, T1, T1c, T2.
//!
//! All generated intensities are quantized through f32 at creation time, so
//! writing volumes as raw f32 and reading them back is bit-exact.

use crate::rng::{subseed_indexed, Rng};
use crate::tensor::{LabelMap, Sample, Tensor};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

pub const CHANNELS: usize = 4;
pub const NUM_CLASSES: usize = 4;
const DATASET_FILE: &str = "dataset.txt";
const MANIFEST_FILE: &str = "manifest.txt";
const VOLUME_FILE: &str = "volume.f32";
const LABELS_FILE: &str = "labels.u8";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug)]
pub enum SynthError {
    Config(String),
    Format(String),
    Io(std::io::Error),
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::Config(msg) => write!(f, "invalid generation config: {msg}"),
            SynthError::Format(msg) => write!(f, "invalid dataset file: {msg}"),
            SynthError::Io(e) => write!(f, "dataset io: {e}"),
        }
    }
}

impl std::error::Error for SynthError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            SynthError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for SynthError {
    fn from(e: std::io::Error) -> Self {
        SynthError::Io(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Result<Self, SynthError> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(SynthError::Format(format!("unknown domain {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub image_size: usize,
    pub slices: usize,
    pub noise_sigma: f64,
    pub contrast_margin: f64,
    pub skull: bool,
    /// Half-width of the per-patient channel gain range: every patient
    /// scales each channel by its own factor in [1-j, 1+j], mimicking
    /// scanner gain drift between acquisitions. Within-patient contrasts
    /// are preserved, so labels stay learnable, but models that latch onto
    /// absolute intensities generalize poorly to unseen patients.
    pub gain_jitter: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            slices: 25,
            noise_sigma: 0.05,
            contrast_margin: 0.3,
            skull: true,
            gain_jitter: 0.03,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.image_size < 16 || self.image_size % 4 != 0 {
            return Err(SynthError::Config(format!(
                "image_size must be a multiple of 4 and at least 16, got {}",
                self.image_size
            )));
        }
        if self.slices == 0 {
            return Err(SynthError::Config("slices must be positive".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(SynthError::Config("noise_sigma must be non-negative".into()));
        }
        // Tissue classes must stay separable: the intensity gap has to
        // dominate the noise, otherwise labels are not learnable.
        if self.contrast_margin <= 2.0 * self.noise_sigma {
            return Err(SynthError::Config(format!(
                "contrast_margin ({}) must exceed twice noise_sigma ({})",
                self.contrast_margin, self.noise_sigma
            )));
        }
        // A gain below 1/2 could invert contrasts against the noise floor.
        if !(0.0..=0.5).contains(&self.gain_jitter) {
            return Err(SynthError::Config(format!(
                "gain_jitter must be in [0, 0.5], got {}",
                self.gain_jitter
            )));
        }
        Ok(())
    }
}

/// Per-channel intensity for each structure; channels FLAIR, T1, T1c, T2.
/// The enhancing rim stands out in T1c by at least the contrast margin.
/// The skull ring runs close to the enhancing profile in every channel
/// (marrow and scalp fat also appear bright on T1-weighted contrast
/// scans), so a per-pixel intensity rule alone separates the two poorly;
/// reliable enhancing detection needs local geometry (a ring hugging the
/// air boundary versus a rim inside a lesion), which plants the
/// bright-ring false-positive failure mode.
fn intensity(channel: usize, structure: Structure, margin: f64) -> f64 {
    use Structure::*;
    let enh_t1c = (0.50 + margin + 0.15).min(0.98);
    match (channel, structure) {
        (0, Air) => 0.05,
        (0, Brain) => 0.35,
        (0, Skull) => 0.58,
        (0, Edema) => 0.85,
        (0, Necro) => 0.30,
        (0, Enhancing) => 0.55,
        (1, Air) => 0.05,
        (1, Brain) => 0.55,
        (1, Skull) => 0.55,
        (1, Edema) => 0.40,
        (1, Necro) => 0.22,
        (1, Enhancing) => 0.50,
        (2, Air) => 0.05,
        (2, Brain) => 0.50,
        (2, Skull) => (enh_t1c - 0.25).max(0.0),
        (2, Edema) => 0.45,
        (2, Necro) => 0.25,
        (2, Enhancing) => enh_t1c,
        (3, Air) => 0.05,
        (3, Brain) => 0.45,
        (3, Skull) => 0.55,
        (3, Edema) => 0.88,
        (3, Necro) => 0.78,
        (3, Enhancing) => 0.60,
        _ => unreachable!("channel out of range"),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Structure {
    Air,
    Brain,
    Skull,
    Edema,
    Necro,
    Enhancing,
}

fn label_of(s: Structure) -> u8 {
    match s {
        Structure::Air | Structure::Brain | Structure::Skull => 0,
        Structure::Edema => 1,
        Structure::Necro => 2,
        Structure::Enhancing => 3,
    }
}

struct BrainShape {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
}

impl BrainShape {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ay;
        let dx = (x - self.cx) / self.ax;
        dy * dy + dx * dx <= 1.0
    }

    fn in_skull_band(&self, y: f64, x: f64, band: f64) -> bool {
        let dy = (y - self.cy) / (self.ay + band);
        let dx = (x - self.cx) / (self.ax + band);
        dy * dy + dx * dx <= 1.0 && !self.contains(y, x)
    }
}

/// One lesion: a center track through the volume with an axial radius
/// profile; slices where the profile is too small show nothing.
struct Lesion {
    cy: f64,
    cx: f64,
    /// Full in-plane radius at the lesion's central slice.
    radius: f64,
    /// Slice of maximum extent and axial half-extent in slices.
    zc: f64,
    zr: f64,
    /// Minimum in-plane radius for the lesion to appear on a slice.
    min_visible: f64,
    /// Sinusoidal boundary perturbation (amplitude, frequency, phase).
    wobble: Vec<(f64, f64, f64)>,
    /// Band fractions: necrotic core inside `core_frac`, enhancing rim
    /// inside `rim_frac`, edema out to 1. A zero `core_frac` disables the core.
    core_frac: f64,
    rim_frac: f64,
    /// Cone-like axial profile instead of an ellipsoid: cross-section radii
    /// then distribute uniformly over slices, so every lesion scale gets
    /// comparable training exposure.
    linear_taper: bool,
}

impl Lesion {
    /// In-plane radius on slice z, or None beyond the axial extent.
    fn radius_at(&self, z: usize) -> Option<f64> {
        let t = (z as f64 - self.zc) / self.zr;
        let s = 1.0 - t * t;
        if s <= 0.0 {
            return None;
        }
        let r = self.radius * if self.linear_taper { 1.0 - t.abs() } else { s.sqrt() };
        (r >= self.min_visible).then_some(r)
    }

    /// Structure at (y, x) on slice z, if inside the lesion.
    fn structure_at(&self, z: usize, y: f64, x: f64) -> Option<Structure> {
        let rz = self.radius_at(z)?;
        let (dy, dx) = (y - self.cy, x - self.cx);
        let d = (dy * dy + dx * dx).sqrt();
        // Cheap reject: the wobble never exceeds +35%.
        if d > rz * 1.35 {
            return None;
        }
        let phi = dx.atan2(dy);
        let mut factor = 1.0;
        for &(a, k, psi) in &self.wobble {
            factor += a * (k * phi + psi).sin();
        }
        let r = rz * factor.max(0.55);
        if d > r {
            return None;
        }
        let (core_f, rim_f) = self.bands_at(z);
        if core_f > 0.0 && d <= r * core_f {
            Some(Structure::Necro)
        } else if d <= r * rim_f {
            Some(Structure::Enhancing)
        } else {
            Some(Structure::Edema)
        }
    }

    /// Band fractions on slice z. Tapered lesions keep their necrotic core
    /// down the whole axial extent while the enhancing band widens toward
    /// the edges, so edge cross-sections become small cored rings with a
    /// thin edema shell.
    fn bands_at(&self, z: usize) -> (f64, f64) {
        if !self.linear_taper {
            return (self.core_frac, self.rim_frac);
        }
        let t = ((z as f64 - self.zc) / self.zr).abs();
        let rim_f = self.rim_frac + (0.80 - self.rim_frac) * (t / 0.45).min(1.0);
        (self.core_frac, rim_f)
    }
}

fn source_lesion(rng: &mut Rng, brain: &BrainShape, slices: usize) -> Lesion {
    let radius = rng.range_f64(10.0, 14.5);
    let max_extent = radius * 1.25;
    let margin = (brain.ay.min(brain.ax) - max_extent - 2.0).max(0.0);
    let cy = brain.cy + rng.range_f64(-margin, margin);
    let cx = brain.cx + rng.range_f64(-margin, margin);
    let span = slices as f64;
    let zc = rng.range_f64(0.35 * span, 0.65 * span);
    let zr = rng.range_f64(0.30 * span, 0.45 * span);
    let wobble = [2.0, 3.0, 5.0]
        .iter()
        .map(|&k| (rng.range_f64(0.02, 0.04), k, rng.range_f64(0.0, std::f64::consts::TAU)))
        .collect();
    // Edge slices expose cross-sections down to 5.6 px. Zero-mean boundary
    // wobble barely changes enclosed area, so the smallest source component
    // (~95 px^2) still exceeds the largest target lesion (~79 px^2) and the
    // domains stay size-separated.
    Lesion {
        cy,
        cx,
        radius,
        zc,
        zr,
        min_visible: 5.6,
        wobble,
        core_frac: 0.40,
        rim_frac: 0.62,
        linear_taper: true,
    }
}

fn target_lesions(rng: &mut Rng, brain: &BrainShape, slices: usize) -> Vec<Lesion> {
    // Three to four lesions with narrow axial extents, so a large share of
    // slices carry no lesion at all. The first two lesions are anchors near
    // the top of the size range; the rest sit at the small end, where the
    // enhancing center rasterizes to a handful of pixels. Chasing those few
    // pixels invites false enhancing output on the many lesion-free slices,
    // which the per-slice score punishes hard, so aggressive fitting costs
    // more there than it earns and cautious adaptation comes out ahead.
    let count = 3 + rng.below(2);
    let span = slices as f64;
    let mut lesions: Vec<Lesion> = Vec::new();
    let mut attempts = 0;
    while lesions.len() < count && attempts < 200 {
        attempts += 1;
        let radius =
            if lesions.len() < 2 { rng.range_f64(4.0, 5.0) } else { rng.range_f64(2.0, 2.6) };
        let margin = brain.ay.min(brain.ax) - radius - 3.0;
        let cy = brain.cy + rng.range_f64(-margin, margin);
        let cx = brain.cx + rng.range_f64(-margin, margin);
        if !brain.contains(cy, cx) {
            continue;
        }
        let clear = lesions.iter().all(|l| {
            let d = ((l.cy - cy).powi(2) + (l.cx - cx).powi(2)).sqrt();
            d >= l.radius + radius + 3.0
        });
        if !clear {
            continue;
        }
        let zc = rng.range_f64(0.15 * span, 0.85 * span);
        let zr = if lesions.len() < 2 {
            rng.range_f64(0.14 * span, 0.22 * span)
        } else {
            rng.range_f64(0.10 * span, 0.16 * span)
        };
        // Metastasis-like cross-section: the anchor lesion is a thin
        // enhancing ring around a small necrotic core with a narrow edema
        // shell; the small lesions hide a subresolution enhancing center
        // inside an edema blob.
        let anchor = radius >= 4.0;
        lesions.push(Lesion {
            cy,
            cx,
            radius,
            zc,
            zr,
            min_visible: 1.2,
            wobble: Vec::new(),
            core_frac: if anchor { 0.45 } else { 0.0 },
            rim_frac: if anchor { 0.80 } else { 0.50 },
            linear_taper: false,
        });
    }
    lesions
}

/// Quantize through f32 so raw-f32 file round trips are bit-exact.
fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Generate all slices of one patient. Deterministic in (config, domain, seed).
pub fn generate_patient(
    config: &GenConfig,
    domain: Domain,
    seed: u64,
) -> Result<Vec<Sample>, SynthError> {
    config.validate()?;
    let mut rng = Rng::from_seed(subseed_indexed(seed, "patient", 0));
    let s = config.image_size;
    let c = (s as f64 - 1.0) / 2.0;
    let brain = BrainShape {
        cy: c + rng.range_f64(-1.5, 1.5),
        cx: c + rng.range_f64(-1.5, 1.5),
        ay: rng.range_f64(0.33, 0.38) * s as f64,
        ax: rng.range_f64(0.38, 0.43) * s as f64,
    };
    let lesions = match domain {
        Domain::Source => vec![source_lesion(&mut rng, &brain, config.slices)],
        Domain::Target => target_lesions(&mut rng, &brain, config.slices),
    };
    let j = config.gain_jitter;
    let gains: Vec<f64> = (0..CHANNELS).map(|_| 1.0 + rng.range_f64(-j, j)).collect();

    let mut samples = Vec::with_capacity(config.slices);
    for z in 0..config.slices {
        let mut labels = LabelMap::zeros(s, s);
        let mut image = vec![0.0f64; CHANNELS * s * s];
        for y in 0..s {
            for x in 0..s {
                let (yf, xf) = (y as f64, x as f64);
                let mut structure = if brain.contains(yf, xf) {
                    Structure::Brain
                } else if config.skull && brain.in_skull_band(yf, xf, 2.5) {
                    Structure::Skull
                } else {
                    Structure::Air
                };
                if structure == Structure::Brain {
                    for lesion in &lesions {
                        if let Some(tissue) = lesion.structure_at(z, yf, xf) {
                            structure = tissue;
                            break;
                        }
                    }
                }
                labels.set(y, x, label_of(structure));
                for ch in 0..CHANNELS {
                    let clean = intensity(ch, structure, config.contrast_margin) * gains[ch];
                    let v = clean + config.noise_sigma * rng.normal();
                    image[ch * s * s + y * s + x] = quantize(v.clamp(0.0, 1.0));
                }
            }
        }
        let image = Tensor::new(vec![CHANNELS, s, s], image)
            .map_err(|e| SynthError::Format(format!("generated bad intensity: {e}")))?;
        samples.push(Sample { image, labels });
    }
    Ok(samples)
}

/// A patient on disk or in memory, with its split assignment.
#[derive(Debug)]
pub struct PatientRecord {
    pub id: String,
    pub domain: Domain,
    pub split: Split,
    pub samples: Vec<Sample>,
}

#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub patients: Vec<PatientRecord>,
}

impl Dataset {
    pub fn patients_in(&self, domain: Domain, split: Split) -> Vec<&PatientRecord> {
        self.patients.iter().filter(|p| p.domain == domain && p.split == split).collect()
    }
}

fn write_manifest(
    path: &Path,
    id: &str,
    domain: Domain,
    seed: u64,
    config: &GenConfig,
) -> Result<(), SynthError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "format_version={MANIFEST_VERSION}")?;
    writeln!(f, "patient_id={id}")?;
    writeln!(f, "domain={}", domain.as_str())?;
    writeln!(f, "seed={seed}")?;
    writeln!(f, "slices={}", config.slices)?;
    writeln!(f, "height={}", config.image_size)?;
    writeln!(f, "width={}", config.image_size)?;
    writeln!(f, "channels={CHANNELS}")?;
    writeln!(f, "classes={NUM_CLASSES}")?;
    Ok(())
}

/// Write one patient directory: manifest, raw f32 volume, raw u8 labels.
pub fn write_patient(
    dir: &Path,
    id: &str,
    domain: Domain,
    seed: u64,
    config: &GenConfig,
    samples: &[Sample],
) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir)?;
    write_manifest(&dir.join(MANIFEST_FILE), id, domain, seed, config)?;
    let mut vol = Vec::with_capacity(samples.len() * CHANNELS * config.image_size.pow(2) * 4);
    let mut lab = Vec::with_capacity(samples.len() * config.image_size.pow(2));
    for sample in samples {
        for &v in sample.image.data() {
            vol.extend_from_slice(&(v as f32).to_le_bytes());
        }
        lab.extend_from_slice(sample.labels.data());
    }
    std::fs::write(dir.join(VOLUME_FILE), vol)?;
    std::fs::write(dir.join(LABELS_FILE), lab)?;
    Ok(())
}

/// Number of validation patients under the 80/20 split: floor(0.2 n).
pub fn val_count(n_patients: usize) -> usize {
    n_patients / 5
}

/// Generate a whole dataset directory: `n` patient dirs plus an index file
/// assigning the last floor(0.2 n) patients to validation. Patient `i` uses
/// seed `seed_base + i`.
pub fn generate_dataset(
    root: &Path,
    config: &GenConfig,
    domain: Domain,
    n_patients: usize,
    seed_base: u64,
) -> Result<(), SynthError> {
    config.validate()?;
    if n_patients == 0 {
        return Err(SynthError::Config("need at least one patient".into()));
    }
    std::fs::create_dir_all(root)?;
    let n_val = val_count(n_patients);
    let mut index = String::new();
    for i in 0..n_patients {
        let id = format!("{}_{i:03}", domain.as_str());
        let seed = seed_base + i as u64;
        let samples = generate_patient(config, domain, seed)?;
        write_patient(&root.join(&id), &id, domain, seed, config, &samples)?;
        let split = if i < n_patients - n_val { Split::Train } else { Split::Val };
        index.push_str(&format!("{id}\t{}\n", split.as_str()));
    }
    std::fs::write(root.join(DATASET_FILE), index)?;
    Ok(())
}

fn parse_manifest(path: &Path) -> Result<std::collections::HashMap<String, String>, SynthError> {
    let f = std::fs::File::open(path)?;
    let mut map = std::collections::HashMap::new();
    const KNOWN: &[&str] = &[
        "format_version",
        "patient_id",
        "domain",
        "seed",
        "slices",
        "height",
        "width",
        "channels",
        "classes",
    ];
    for line in BufReader::new(f).lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(SynthError::Format(format!("manifest line without '=': {line:?}")));
        };
        if !KNOWN.contains(&key) {
            eprintln!("warning: ignoring unknown manifest key {key:?} in {}", path.display());
            continue;
        }
        map.insert(key.to_string(), value.to_string());
    }
    Ok(map)
}

fn manifest_usize(
    map: &std::collections::HashMap<String, String>,
    key: &str,
) -> Result<usize, SynthError> {
    map.get(key)
        .ok_or_else(|| SynthError::Format(format!("manifest missing key {key:?}")))?
        .parse()
        .map_err(|_| SynthError::Format(format!("manifest key {key:?} is not a number")))
}

/// Load one patient directory.
pub fn load_patient(dir: &Path, split: Split) -> Result<PatientRecord, SynthError> {
    let manifest = parse_manifest(&dir.join(MANIFEST_FILE))?;
    let version = manifest_usize(&manifest, "format_version")?;
    if version != MANIFEST_VERSION as usize {
        return Err(SynthError::Format(format!("unsupported manifest version {version}")));
    }
    let id = manifest
        .get("patient_id")
        .ok_or_else(|| SynthError::Format("manifest missing patient_id".into()))?
        .clone();
    let domain = Domain::parse(
        manifest.get("domain").ok_or_else(|| SynthError::Format("manifest missing domain".into()))?,
    )?;
    let slices = manifest_usize(&manifest, "slices")?;
    let height = manifest_usize(&manifest, "height")?;
    let width = manifest_usize(&manifest, "width")?;
    let channels = manifest_usize(&manifest, "channels")?;
    if channels != CHANNELS {
        return Err(SynthError::Format(format!("expected {CHANNELS} channels, got {channels}")));
    }

    let mut vol_bytes = Vec::new();
    std::fs::File::open(dir.join(VOLUME_FILE))?.read_to_end(&mut vol_bytes)?;
    let expect = slices * channels * height * width * 4;
    if vol_bytes.len() != expect {
        return Err(SynthError::Format(format!(
            "volume file is {} bytes, expected {expect}",
            vol_bytes.len()
        )));
    }
    let lab_bytes = std::fs::read(dir.join(LABELS_FILE))?;
    if lab_bytes.len() != slices * height * width {
        return Err(SynthError::Format(format!(
            "label file is {} bytes, expected {}",
            lab_bytes.len(),
            slices * height * width
        )));
    }

    let plane = height * width;
    let mut samples = Vec::with_capacity(slices);
    for z in 0..slices {
        let mut data = Vec::with_capacity(channels * plane);
        let base = z * channels * plane * 4;
        for i in 0..channels * plane {
            let b = &vol_bytes[base + i * 4..base + i * 4 + 4];
            data.push(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64);
        }
        let image = Tensor::new(vec![channels, height, width], data)
            .map_err(|e| SynthError::Format(format!("bad volume data: {e}")))?;
        let labels = LabelMap::new(height, width, lab_bytes[z * plane..(z + 1) * plane].to_vec())
            .map_err(|e| SynthError::Format(format!("bad label data: {e}")))?;
        if let Some(&bad) = labels.data().iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(SynthError::Format(format!("label {bad} out of range")));
        }
        samples.push(Sample { image, labels });
    }
    Ok(PatientRecord { id, domain, split, samples })
}

/// Load a dataset directory written by `generate_dataset`.
pub fn load_dataset(root: &Path) -> Result<Dataset, SynthError> {
    let index = std::fs::read_to_string(root.join(DATASET_FILE))
        .map_err(|e| SynthError::Format(format!("cannot read dataset index: {e}")))?;
    let mut patients = Vec::new();
    for line in index.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((dir, split)) = line.split_once('\t') else {
            return Err(SynthError::Format(format!("bad dataset index line: {line:?}")));
        };
        let split = match split {
            "train" => Split::Train,
            "val" => Split::Val,
            other => return Err(SynthError::Format(format!("unknown split {other:?}"))),
        };
        patients.push(load_patient(&root.join(dir), split)?);
    }
    if patients.is_empty() {
        return Err(SynthError::Format("dataset index lists no patients".into()));
    }
    Ok(Dataset { root: root.to_path_buf(), patients })
}
