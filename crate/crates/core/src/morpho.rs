//! Grid types shared by every stage of the pipeline: grayscale and two-phase
//! morphologies, the PGM codec, label binning, augmentation, dataset
//! manifests and group-aware splitting.
//!
//! Orientation: row 0 touches the top electrode (cathode, collects electrons
//! through the acceptor), the last row touches the bottom electrode (anode,
//! collects holes through the donor). Columns wrap periodically.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::kv;

pub const DEFAULT_SIDE: usize = 101;
pub const N_CLASSES: usize = 10;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MorphoError {
    #[error("invalid shape {height}x{width}: both sides must be at least 3")]
    InvalidShape { height: usize, width: usize },
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("value {value} at index {index} outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("malformed PGM header: {0}")]
    MalformedHeader(String),
    #[error("PGM payload truncated: expected {expected} bytes, got {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("unsupported PGM maxval {0} (only 255)")]
    UnsupportedMaxval(u32),
    #[error("degenerate J_sc range: all values equal {0}")]
    DegenerateRange(f64),
    #[error("at least two values are needed to bin, got {0}")]
    TooFewValues(usize),
    #[error("manifest has no samples")]
    EmptyManifest,
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    InvalidFractions((f64, f64, f64)),
    #[error("duplicate manifest path {0}")]
    DuplicatePath(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("binning sidecar: {0}")]
    Sidecar(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MorphoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        MorphoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Local donor volume fraction on a rectangular grid, row-major, in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Morphology {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Morphology {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self, MorphoError> {
        if height < 3 || width < 3 {
            return Err(MorphoError::InvalidShape { height, width });
        }
        if values.len() != height * width {
            return Err(MorphoError::LengthMismatch {
                expected: height * width,
                got: values.len(),
            });
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(MorphoError::OutOfRange { index, value });
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self, MorphoError> {
        Self::new(height, width, vec![value; height * width])
    }

    /// Builds a grid from a per-pixel function `f(row, col)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, MorphoError> {
        let mut values = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                values.push(f(i, j));
            }
        }
        Self::new(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Left-right mirror image.
    pub fn mirror(&self) -> Morphology {
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks(self.width) {
            values.extend(row.iter().rev());
        }
        Morphology {
            height: self.height,
            width: self.width,
            values,
        }
    }

    /// Cyclic shift to the right by `k` columns.
    pub fn shift_columns(&self, k: usize) -> Morphology {
        let w = self.width;
        let mut values = vec![0.0; self.values.len()];
        for (dst, src) in values.chunks_mut(w).zip(self.values.chunks(w)) {
            for (j, &v) in src.iter().enumerate() {
                dst[(j + k) % w] = v;
            }
        }
        Morphology {
            height: self.height,
            width: w,
            values,
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.values.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self, MorphoError> {
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }
}

impl From<&BinaryMorphology> for Morphology {
    fn from(b: &BinaryMorphology) -> Self {
        Morphology {
            height: b.height,
            width: b.width,
            values: b.donor.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// `round(v * 255)` with halves rounded up, clamped to the byte range.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Two-phase field: `true` marks donor.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMorphology {
    pub height: usize,
    pub width: usize,
    pub donor: Vec<bool>,
}

impl BinaryMorphology {
    pub fn new(height: usize, width: usize, donor: Vec<bool>) -> Result<Self, MorphoError> {
        if height < 3 || width < 3 {
            return Err(MorphoError::InvalidShape { height, width });
        }
        if donor.len() != height * width {
            return Err(MorphoError::LengthMismatch {
                expected: height * width,
                got: donor.len(),
            });
        }
        Ok(Self {
            height,
            width,
            donor,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, MorphoError> {
        let mut donor = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                donor.push(f(i, j));
            }
        }
        Self::new(height, width, donor)
    }

    pub fn is_donor(&self, row: usize, col: usize) -> bool {
        self.donor[row * self.width + col]
    }

    pub fn donor_count(&self) -> usize {
        self.donor.iter().filter(|&&d| d).count()
    }

    pub fn mirror(&self) -> BinaryMorphology {
        let mut donor = Vec::with_capacity(self.donor.len());
        for row in self.donor.chunks(self.width) {
            donor.extend(row.iter().rev());
        }
        BinaryMorphology {
            height: self.height,
            width: self.width,
            donor,
        }
    }
}

pub fn binarize(m: &Morphology, threshold: f64) -> BinaryMorphology {
    BinaryMorphology {
        height: m.height,
        width: m.width,
        donor: m.values.iter().map(|&v| v > threshold).collect(),
    }
}

/// The 4-neighbours of `(i, j)`: left/right wrap, up/down stop at the edges.
#[inline]
pub(crate) fn neighbours(
    i: usize,
    j: usize,
    height: usize,
    width: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let left = (i, (j + width - 1) % width);
    let right = (i, (j + 1) % width);
    let up = (i > 0).then(|| (i - 1, j));
    let down = (i + 1 < height).then(|| (i + 1, j));
    [Some(left), Some(right), up, down].into_iter().flatten()
}

/// Pixels with at least one 4-neighbour of the opposite phase.
pub fn interface_mask(b: &BinaryMorphology) -> Vec<bool> {
    let (h, w) = (b.height, b.width);
    let mut out = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            let phase = b.donor[i * w + j];
            out[i * w + j] = neighbours(i, j, h, w).any(|(a, c)| b.donor[a * w + c] != phase);
        }
    }
    out
}

// --- PGM codec --------------------------------------------------------------

/// Encodes raw gray values as binary PGM. Used directly for saliency maps and
/// probability grids, which are not bound by morphology shape rules.
pub fn encode_gray(height: usize, width: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| quantize(v)));
    out
}

/// Decodes a binary PGM (maxval 255) into `(height, width, values)`.
pub fn decode_gray(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>), MorphoError> {
    let mut pos = 0usize;
    let mut fields: Vec<String> = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while let Some(b) = bytes.get(pos) {
            if b.is_ascii_whitespace() {
                break;
            }
            pos += 1;
        }
        if start == pos {
            return Err(MorphoError::MalformedHeader("header ends early".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        if fields.len() == 1 && fields[0] != "P5" {
            return Err(MorphoError::MalformedHeader(format!(
                "magic {:?}, only P5 is supported",
                fields[0]
            )));
        }
    }
    // exactly one whitespace byte separates maxval from the payload
    if bytes.get(pos).is_none_or(|b| !b.is_ascii_whitespace()) {
        return Err(MorphoError::MalformedHeader("missing separator".into()));
    }
    pos += 1;
    let parse = |s: &str, what: &str| {
        s.parse::<u32>()
            .map_err(|_| MorphoError::MalformedHeader(format!("bad {what} {s:?}")))
    };
    let width = parse(&fields[1], "width")? as usize;
    let height = parse(&fields[2], "height")? as usize;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(MorphoError::UnsupportedMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(MorphoError::MalformedHeader("zero dimension".into()));
    }
    let expected = width * height;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(MorphoError::TruncatedPayload {
            expected,
            got: payload.len(),
        });
    }
    let values = payload[..expected]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Ok((height, width, values))
}

pub fn encode_pgm(m: &Morphology) -> Vec<u8> {
    encode_gray(m.height, m.width, &m.values)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Morphology, MorphoError> {
    let (h, w, values) = decode_gray(bytes)?;
    Morphology::new(h, w, values)
}

pub fn read_pgm(path: &Path) -> Result<Morphology, MorphoError> {
    let bytes = fs::read(path).map_err(|e| MorphoError::io(path, e))?;
    decode_pgm(&bytes)
}

pub fn write_pgm(path: &Path, m: &Morphology) -> Result<(), MorphoError> {
    fs::write(path, encode_pgm(m)).map_err(|e| MorphoError::io(path, e))
}

// --- binning ----------------------------------------------------------------

/// Ten equal-width J_sc bins between the extremes of the labeled data.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BinningSpec {
    pub j_min: f64,
    pub j_max: f64,
    pub n_bins: usize,
}

impl BinningSpec {
    pub fn new(j_min: f64, j_max: f64) -> Result<Self, MorphoError> {
        if !(j_min < j_max) {
            return Err(MorphoError::DegenerateRange(j_min));
        }
        Ok(Self {
            j_min,
            j_max,
            n_bins: N_CLASSES,
        })
    }

    pub fn assign_class(&self, jsc: f64) -> u8 {
        assign_class(jsc, self)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("j_min".into(), format!("{}", self.j_min)),
            ("j_max".into(), format!("{}", self.j_max)),
            ("n_bins".into(), format!("{}", self.n_bins)),
        ]
    }
}

pub fn compute_binning(jscs: &[f64]) -> Result<BinningSpec, MorphoError> {
    if jscs.len() < 2 {
        return Err(MorphoError::TooFewValues(jscs.len()));
    }
    let lo = jscs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = jscs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Err(MorphoError::DegenerateRange(lo));
    }
    BinningSpec::new(lo, hi)
}

/// `clamp(floor(n·(jsc − j_min)/(j_max − j_min)), 0, n − 1)`; class 9 is best.
pub fn assign_class(jsc: f64, b: &BinningSpec) -> u8 {
    let n = b.n_bins as f64;
    let raw = (n * (jsc - b.j_min) / (b.j_max - b.j_min)).floor();
    if raw.is_nan() || raw < 0.0 {
        0
    } else {
        raw.min(n - 1.0) as u8
    }
}

// --- augmentation -----------------------------------------------------------

/// `[m, mirror(m)]` followed by cyclic column shifts of `m` by
/// `floor(width·k/(shifts+1))` for `k = 1..=shifts`.
///
/// Vertical flips and phase inversion are excluded: both move material to the
/// opposite electrode and change the label.
pub fn augment(m: &Morphology, shifts: usize) -> Vec<Morphology> {
    let mut out = Vec::with_capacity(shifts + 2);
    out.push(m.clone());
    out.push(m.mirror());
    for k in 1..=shifts {
        out.push(m.shift_columns(m.width * k / (shifts + 1)));
    }
    out
}

pub fn augment_shift_amounts(width: usize, shifts: usize) -> Vec<usize> {
    (1..=shifts).map(|k| width * k / (shifts + 1)).collect()
}

// --- manifests --------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = MorphoError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(MorphoError::Manifest(format!("unknown split {other:?}"))),
        }
    }
}

/// One manifest row. `jsc`, `class_id` and `split` stay empty until the
/// labeling and splitting stages fill them.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub path: String,
    pub jsc: Option<f64>,
    pub class_id: Option<u8>,
    pub split: Option<Split>,
    pub group: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub seed: u64,
    pub param_digest: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub samples: Vec<LabeledSample>,
    pub binning: Option<BinningSpec>,
    pub provenance: Option<Provenance>,
}

pub const MANIFEST_HEADER: [&str; 5] = ["path", "jsc", "class", "split", "group"];

/// Sidecar holding the frozen bin edges: `manifest.csv` → `manifest.binning`.
pub fn binning_sidecar_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("binning")
}

impl DatasetManifest {
    pub fn new(samples: Vec<LabeledSample>) -> Result<Self, MorphoError> {
        let m = Self {
            samples,
            binning: None,
            provenance: None,
        };
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<(), MorphoError> {
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.path.as_str()) {
                return Err(MorphoError::DuplicatePath(s.path.clone()));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &LabeledSample> {
        self.samples.iter().filter(move |s| s.split == Some(split))
    }

    pub fn to_csv(&self) -> Result<String, MorphoError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let err = |e: csv::Error| MorphoError::Manifest(e.to_string());
        w.write_record(MANIFEST_HEADER).map_err(err)?;
        for s in &self.samples {
            let jsc = s.jsc.map(|v| format!("{v}")).unwrap_or_default();
            let class = s.class_id.map(|c| c.to_string()).unwrap_or_default();
            let split = s.split.map(|x| x.as_str()).unwrap_or("");
            w.write_record([s.path.as_str(), &jsc, &class, split, &s.group])
                .map_err(err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| MorphoError::Manifest(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self, MorphoError> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let err = |e: csv::Error| MorphoError::Manifest(e.to_string());
        let header = r.headers().map_err(err)?.clone();
        if header.iter().ne(MANIFEST_HEADER.iter().copied()) {
            return Err(MorphoError::Manifest(format!(
                "header must be `{}`",
                MANIFEST_HEADER.join(",")
            )));
        }
        let mut samples = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec.map_err(err)?;
            let bad = |what: &str, v: &str| {
                MorphoError::Manifest(format!("row {}: bad {what} {v:?}", row + 2))
            };
            let jsc = match &rec[1] {
                "" => None,
                v => Some(v.parse::<f64>().map_err(|_| bad("jsc", v))?),
            };
            let class_id = match &rec[2] {
                "" => None,
                v => {
                    let c = v.parse::<u8>().map_err(|_| bad("class", v))?;
                    if c as usize >= N_CLASSES {
                        return Err(bad("class", v));
                    }
                    Some(c)
                }
            };
            let split = match &rec[3] {
                "" => None,
                v => Some(v.parse::<Split>()?),
            };
            samples.push(LabeledSample {
                path: rec[0].to_string(),
                jsc,
                class_id,
                split,
                group: rec[4].to_string(),
            });
        }
        Self::new(samples)
    }

    /// Reads the CSV and, when present, the binning sidecar next to it.
    pub fn load(path: &Path) -> Result<Self, MorphoError> {
        let text = fs::read_to_string(path).map_err(|e| MorphoError::io(path, e))?;
        let mut m = Self::from_csv(&text)?;
        let side = binning_sidecar_path(path);
        if side.exists() {
            let text = fs::read_to_string(&side).map_err(|e| MorphoError::io(&side, e))?;
            let (binning, provenance) = parse_sidecar(&text)?;
            m.binning = binning;
            m.provenance = provenance;
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), MorphoError> {
        fs::write(path, self.to_csv()?).map_err(|e| MorphoError::io(path, e))?;
        if self.binning.is_some() || self.provenance.is_some() {
            let side = binning_sidecar_path(path);
            fs::write(&side, render_sidecar(self.binning.as_ref(), self.provenance.as_ref()))
                .map_err(|e| MorphoError::io(&side, e))?;
        }
        Ok(())
    }

    /// Sample paths are stored relative to the manifest's directory.
    /// Recomputes bin edges from the training split's `jsc` values (from
    /// every labeled sample while nothing is assigned to training) and
    /// reassigns all classes.
    pub fn rebin(&mut self) -> Result<(), MorphoError> {
        let has_train = self.samples.iter().any(|s| s.split == Some(Split::Train));
        let basis: Vec<f64> = self
            .samples
            .iter()
            .filter(|s| !has_train || s.split == Some(Split::Train))
            .filter_map(|s| s.jsc)
            .collect();
        let binning = compute_binning(&basis)?;
        for s in &mut self.samples {
            s.class_id = s.jsc.map(|j| binning.assign_class(j));
        }
        self.binning = Some(binning);
        Ok(())
    }

    pub fn resolve(manifest_path: &Path, sample: &LabeledSample) -> PathBuf {
        let p = Path::new(&sample.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(p)
        }
    }
}

pub fn render_sidecar(binning: Option<&BinningSpec>, provenance: Option<&Provenance>) -> String {
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(b) = binning {
        pairs.extend(b.to_kv());
    }
    if let Some(p) = provenance {
        pairs.push(("seed".into(), p.seed.to_string()));
        pairs.push(("param_digest".into(), p.param_digest.clone()));
    }
    kv::render(&pairs)
}

pub fn parse_sidecar(
    text: &str,
) -> Result<(Option<BinningSpec>, Option<Provenance>), MorphoError> {
    let entries = kv::parse(text).map_err(|e| MorphoError::Sidecar(e.to_string()))?;
    let get = |k: &str| kv::lookup(&entries, "", k);
    let num = |k: &str, v: &str| {
        v.parse::<f64>()
            .map_err(|_| MorphoError::Sidecar(format!("bad {k} {v:?}")))
    };
    let binning = match (get("j_min"), get("j_max")) {
        (Some(lo), Some(hi)) => {
            let n = get("n_bins").unwrap_or("10");
            if n != "10" {
                return Err(MorphoError::Sidecar(format!("n_bins must be 10, got {n}")));
            }
            Some(BinningSpec::new(num("j_min", lo)?, num("j_max", hi)?)?)
        }
        (None, None) => None,
        _ => return Err(MorphoError::Sidecar("j_min and j_max must appear together".into())),
    };
    let provenance = match (get("seed"), get("param_digest")) {
        (Some(s), Some(d)) => Some(Provenance {
            seed: s
                .parse()
                .map_err(|_| MorphoError::Sidecar(format!("bad seed {s:?}")))?,
            param_digest: d.to_string(),
        }),
        _ => None,
    };
    Ok((binning, provenance))
}

/// Assigns every sample to train/val/test by shuffling whole groups, so all
/// augmented variants of one snapshot share a split.
pub fn split_dataset(
    manifest: &DatasetManifest,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetManifest, MorphoError> {
    if manifest.samples.is_empty() {
        return Err(MorphoError::EmptyManifest);
    }
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(MorphoError::InvalidFractions(fractions));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut sizes: HashMap<&str, usize> = HashMap::new();
    for s in &manifest.samples {
        let e = sizes.entry(s.group.as_str()).or_insert(0);
        if *e == 0 {
            order.push(s.group.as_str());
        }
        *e += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n = manifest.samples.len() as f64;
    let want_train = (a * n).round() as usize;
    let want_val = (b * n).round() as usize;
    let (mut n_train, mut n_val) = (0usize, 0usize);
    let mut assignment: HashMap<&str, Split> = HashMap::new();
    for g in order {
        let size = sizes[g];
        let split = if n_train < want_train {
            n_train += size;
            Split::Train
        } else if n_val < want_val {
            n_val += size;
            Split::Val
        } else {
            Split::Test
        };
        assignment.insert(g, split);
    }
    let mut out = manifest.clone();
    for s in &mut out.samples {
        s.split = Some(assignment[s.group.as_str()]);
    }
    Ok(out)
}
