//! Cell images, expert-scored manifests, score filtering and stratified splits.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest allowed disagreement between the two experts; pairs further apart are dropped.
pub const MAX_EXPERT_DISAGREEMENT: f64 = 1.0;

/// A single-channel fluorescence image, row-major `(height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellImage {
    pub id: String,
    pixels: Array2<f64>,
}

impl CellImage {
    pub fn new(id: impl Into<String>, pixels: Array2<f64>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty image {h}x{w}")));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation(
                "intensities must be finite and non-negative".into(),
            ));
        }
        Ok(CellImage {
            id: id.into(),
            pixels,
        })
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array2<f64> {
        self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn max_intensity(&self) -> f64 {
        self.pixels.iter().copied().fold(0.0, f64::max)
    }
}

/// Loads an 8/16-bit grayscale PNG or TIFF as intensities scaled to `[0, 1]`
/// by the type maximum. Multi-channel files keep channel 0.
pub fn load_image(path: &Path) -> Result<CellImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    let id = image_id(path);
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = match &img {
        DynamicImage::ImageLuma8(buf) => scaled(h, w, buf.as_raw(), 1, 255.0),
        DynamicImage::ImageLuma16(buf) => scaled(h, w, buf.as_raw(), 1, 65535.0),
        DynamicImage::ImageLumaA8(buf) => scaled(h, w, buf.as_raw(), 2, 255.0),
        DynamicImage::ImageLumaA16(buf) => scaled(h, w, buf.as_raw(), 2, 65535.0),
        other => {
            log::warn!(
                "{}: {:?} input, using channel 0",
                path.display(),
                other.color()
            );
            match other {
                DynamicImage::ImageRgb8(buf) => scaled(h, w, buf.as_raw(), 3, 255.0),
                DynamicImage::ImageRgba8(buf) => scaled(h, w, buf.as_raw(), 4, 255.0),
                DynamicImage::ImageRgb16(buf) => scaled(h, w, buf.as_raw(), 3, 65535.0),
                DynamicImage::ImageRgba16(buf) => scaled(h, w, buf.as_raw(), 4, 65535.0),
                _ => {
                    let buf = other.to_rgb32f();
                    let raw: Vec<f64> = buf.as_raw().iter().map(|&v| v as f64).collect();
                    scaled(h, w, &raw, 3, 1.0)
                }
            }
        }
    };
    CellImage::new(id, pixels)
}

fn scaled<P: Copy + Into<f64>>(h: usize, w: usize, raw: &[P], stride: usize, max: f64) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |(y, x)| {
        let v: f64 = raw[(y * w + x) * stride].into();
        (v / max).max(0.0)
    })
}

/// Writes intensities in `[0, 1]` as a 16-bit grayscale PNG.
pub fn save_image_png16(pixels: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = pixels.dim();
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
        let v = pixels[(y as usize, x as usize)].clamp(0.0, 1.0);
        image::Luma([(v * 65535.0).round() as u16])
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Image id used across manifests and outputs: the file stem.
pub fn image_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// True for scores on the half-step grid {1.0, 1.5, ..., 5.0}.
pub fn is_valid_score(score: f64) -> bool {
    (1.0..=5.0).contains(&score) && (score * 2.0).fract() == 0.0
}

/// Ground-truth label from two expert scores: their mean, or `None` when they
/// disagree by more than [`MAX_EXPERT_DISAGREEMENT`].
pub fn consensus_label(expert1: f64, expert2: f64) -> Option<f64> {
    if (expert1 - expert2).abs() > MAX_EXPERT_DISAGREEMENT {
        None
    } else {
        Some((expert1 + expert2) / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCell {
    pub image: CellImage,
    pub expert1: f64,
    pub expert2: f64,
    /// `None` when the record is excluded for expert disagreement.
    pub label: Option<f64>,
}

impl ScoredCell {
    pub fn new(image: CellImage, expert1: f64, expert2: f64) -> Result<Self> {
        for s in [expert1, expert2] {
            if !is_valid_score(s) {
                return Err(Error::Validation(format!(
                    "score {s} is not on the half-step grid 1.0..=5.0"
                )));
            }
        }
        Ok(ScoredCell {
            image,
            expert1,
            expert2,
            label: consensus_label(expert1, expert2),
        })
    }

    pub fn id(&self) -> &str {
        &self.image.id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Path as written in the manifest (relative paths resolve against the manifest directory).
    pub image_path: PathBuf,
    pub expert1: f64,
    pub expert2: f64,
}

impl ManifestRecord {
    pub fn id(&self) -> String {
        image_id(&self.image_path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        if record.image_path.is_absolute() {
            record.image_path.clone()
        } else {
            self.root.join(&record.image_path)
        }
    }
}

pub const MANIFEST_HEADER: [&str; 3] = ["image_path", "expert1", "expert2"];

/// Parses a CSV manifest with header `image_path,expert1,expert2`.
///
/// Row numbers in errors count data rows from 1 (the header is row 0).
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { row: 0, msg: e.to_string() })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Parse {
            row: 0,
            msg: format!(
                "expected header {:?}, found {:?}",
                MANIFEST_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let manifest = DatasetManifest {
        root,
        records: Vec::new(),
    };
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| Error::Parse {
            row: row_no,
            msg: e.to_string(),
        })?;
        if row.len() != 3 {
            return Err(Error::Parse {
                row: row_no,
                msg: format!("expected 3 fields, found {}", row.len()),
            });
        }
        let score = |field: usize| -> Result<f64> {
            let s = row[field].parse::<f64>().map_err(|e| Error::Parse {
                row: row_no,
                msg: format!("{} {:?}: {e}", MANIFEST_HEADER[field], &row[field]),
            })?;
            if !is_valid_score(s) {
                return Err(Error::Validation(format!(
                    "row {row_no}: {} = {s} is not on the half-step grid 1.0..=5.0",
                    MANIFEST_HEADER[field]
                )));
            }
            Ok(s)
        };
        let record = ManifestRecord {
            image_path: PathBuf::from(&row[0]),
            expert1: score(1)?,
            expert2: score(2)?,
        };
        if !manifest.resolve(&record).is_file() {
            return Err(Error::Validation(format!(
                "row {row_no}: image file not found: {}",
                manifest.resolve(&record).display()
            )));
        }
        records.push(record);
    }
    Ok(DatasetManifest { records, ..manifest })
}

/// Writes a manifest CSV.
pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    let mut out = String::from("image_path,expert1,expert2\n");
    for r in records {
        out.push_str(&format!(
            "{},{:.1},{:.1}\n",
            r.image_path.display(),
            r.expert1,
            r.expert2
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Manifest records that survived filtering, with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRecords {
    pub records: Vec<(ManifestRecord, f64)>,
    pub excluded: usize,
}

/// Applies the expert-agreement rule to manifest records without loading images.
pub fn label_records(manifest: &DatasetManifest) -> LabeledRecords {
    let mut records = Vec::new();
    let mut excluded = 0;
    for r in &manifest.records {
        match consensus_label(r.expert1, r.expert2) {
            Some(label) => records.push((r.clone(), label)),
            None => excluded += 1,
        }
    }
    LabeledRecords { records, excluded }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub cells: Vec<ScoredCell>,
    pub excluded: usize,
}

/// Drops records whose experts disagree by more than one point, loads the
/// survivors' images and labels them with the mean score.
pub fn filter_and_label(manifest: &DatasetManifest) -> Result<FilterOutcome> {
    let labeled = label_records(manifest);
    let mut cells = Vec::with_capacity(labeled.records.len());
    for (record, _) in &labeled.records {
        let image = load_image(&manifest.resolve(record))?;
        cells.push(ScoredCell::new(image, record.expert1, record.expert2)?);
    }
    if labeled.excluded > 0 {
        log::info!(
            "excluded {} of {} records for expert disagreement",
            labeled.excluded,
            manifest.records.len()
        );
    }
    Ok(FilterOutcome {
        cells,
        excluded: labeled.excluded,
    })
}

/// Keeps labeled cells only. Idempotent.
pub fn retain_labeled(cells: Vec<ScoredCell>) -> FilterOutcome {
    let before = cells.len();
    let cells: Vec<ScoredCell> = cells.into_iter().filter(|c| c.label.is_some()).collect();
    FilterOutcome {
        excluded: before - cells.len(),
        cells,
    }
}

/// A label expressed in quarter points (`label * 4`), used as a histogram and
/// stratification key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ScoreBin(pub u32);

impl ScoreBin {
    pub fn of(label: f64) -> Self {
        ScoreBin((label * 4.0).round() as u32)
    }

    pub fn value(self) -> f64 {
        self.0 as f64 / 4.0
    }

    /// The nine half-step bins 1.0, 1.5, ..., 5.0.
    pub fn half_steps() -> impl Iterator<Item = ScoreBin> {
        (0..9).map(|i| ScoreBin(4 + 2 * i))
    }
}

impl fmt::Display for ScoreBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 % 2 == 0 {
            write!(f, "{:.1}", self.value())
        } else {
            write!(f, "{:.2}", self.value())
        }
    }
}

/// Anything with an id and a ground-truth label.
pub trait Labeled {
    fn id(&self) -> &str;
    fn label(&self) -> Option<f64>;
}

impl Labeled for ScoredCell {
    fn id(&self) -> &str {
        &self.image.id
    }
    fn label(&self) -> Option<f64> {
        self.label
    }
}

impl Labeled for (ManifestRecord, f64) {
    fn id(&self) -> &str {
        self.0
            .image_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("")
    }
    fn label(&self) -> Option<f64> {
        Some(self.1)
    }
}

/// Counts per label bin. The nine half-step bins are always present.
pub fn label_histogram<L: Labeled>(items: &[L]) -> BTreeMap<ScoreBin, usize> {
    let mut hist: BTreeMap<ScoreBin, usize> = ScoreBin::half_steps().map(|b| (b, 0)).collect();
    for label in items.iter().filter_map(Labeled::label) {
        *hist.entry(ScoreBin::of(label)).or_insert(0) += 1;
    }
    hist
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("{name} fraction {f} not in (0, 1)")));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Fractions in the proportions 3,661 / 1,195 / 916.
    pub fn reference_proportions(seed: u64) -> Self {
        let total = 5772.0;
        SplitSpec { train: 3661.0 / total, val: 1195.0 / total, test: 916.0 / total, seed }
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::reference_proportions(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Stratified random split by label bin, deterministic for a fixed seed.
///
/// Within each bin the shuffled items are cut at `round(train·n)` and
/// `round((train+val)·n)`.
pub fn split_dataset<T: Labeled>(items: Vec<T>, spec: &SplitSpec) -> Result<Split<T>> {
    spec.validate()?;
    let mut bins: BTreeMap<ScoreBin, Vec<T>> = BTreeMap::new();
    for item in items {
        let label = item.label().ok_or_else(|| {
            Error::Input(format!("cell {} has no label; filter before splitting", item.id()))
        })?;
        bins.entry(ScoreBin::of(label)).or_default().push(item);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (_, mut bin) in bins {
        bin.shuffle(&mut rng);
        let n = bin.len() as f64;
        let train_end = (spec.train * n).round() as usize;
        let val_end = (((spec.train + spec.val) * n).round() as usize).max(train_end);
        let test = bin.split_off(val_end.min(bin.len()));
        let val = bin.split_off(train_end.min(bin.len()));
        split.train.extend(bin);
        split.val.extend(val);
        split.test.extend(test);
    }
    Ok(split)
}

/// JSON record of a split: ids per partition plus the seed used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub seed: u64,
    pub fractions: [f64; 3],
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitRecord {
    pub fn new<T: Labeled>(split: &Split<T>, spec: &SplitSpec) -> Self {
        let ids = |v: &[T]| v.iter().map(|t| t.id().to_string()).collect();
        SplitRecord {
            seed: spec.seed,
            fractions: [spec.train, spec.val, spec.test],
            train: ids(&split.train),
            val: ids(&split.val),
            test: ids(&split.test),
        }
    }
}
