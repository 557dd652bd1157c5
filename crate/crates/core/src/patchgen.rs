//! Patch-classification datasets from instance-segmentation datasets.
//!
//! A square window of `patch_size` pixels slides over every image with a
//! fixed stride. A window is labeled positive when the union of the
//! instance masks covers at least `area_threshold * patch_size^2` of its
//! pixels. Patches inherit the split of their source image, so one defect
//! never appears in two subsets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cocostore::{CocoAnnotation, CocoDataset, CocoImage, Split};
use crate::maskgeom::{self, BBox, BitGrid, GeomError};
use crate::par::Exec;
use crate::TOOL_VERSION;

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("invalid patch config: {0}")]
    Config(String),
    #[error("image {image}, annotation {annotation}: {source}")]
    Geometry {
        image: String,
        annotation: u64,
        #[source]
        source: GeomError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PatchError + '_ {
    move |source| PatchError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_size: u32,
    pub stride: u32,
    /// Fraction of the patch area the mask must cover for a positive label.
    pub area_threshold: f64,
    #[serde(default)]
    pub edge_anchored: bool,
    pub origin: String,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            patch_size: 224,
            stride: 224,
            area_threshold: 0.01,
            edge_anchored: false,
            origin: "hicis".into(),
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<(), PatchError> {
        if self.patch_size == 0 {
            return Err(PatchError::Config("patch size must be positive".into()));
        }
        if self.stride == 0 || self.stride > self.patch_size {
            return Err(PatchError::Config(format!(
                "stride {} must lie in 1..={}",
                self.stride, self.patch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.area_threshold) {
            return Err(PatchError::Config(format!(
                "area threshold {} must lie in [0,1]",
                self.area_threshold
            )));
        }
        if self.origin.is_empty() || self.origin.contains(['/', '\\']) {
            return Err(PatchError::Config(format!("bad origin tag `{}`", self.origin)));
        }
        Ok(())
    }

    /// Minimum mask pixels for a positive label.
    pub fn min_positive_area(&self) -> f64 {
        self.area_threshold * (self.patch_size as f64) * (self.patch_size as f64)
    }

    pub fn dataset_name(&self) -> String {
        dataset_name(&self.origin, self.stride, self.patch_size)
    }
}

/// `HiCC/{origin}-s{stride}-p{patch}`.
pub fn dataset_name(origin: &str, stride: u32, patch: u32) -> String {
    format!("HiCC/{origin}-s{stride}-p{patch}")
}

/// Integer crop window in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Window {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Window {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x as f64, self.y as f64, self.w as f64, self.h as f64)
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

fn axis_positions(len: u32, patch: u32, stride: u32, edge_anchored: bool) -> Vec<u32> {
    if len < patch {
        return Vec::new();
    }
    let mut v: Vec<u32> = (0..=len - patch).step_by(stride as usize).collect();
    if edge_anchored && v.last() != Some(&(len - patch)) {
        v.push(len - patch);
    }
    v
}

/// Windows for an image of `(height, width)`, row-major (y outer, x inner).
pub fn patch_grid(dims: (u32, u32), cfg: &PatchConfig) -> Vec<Window> {
    let (h, w) = dims;
    let p = cfg.patch_size;
    let xs = axis_positions(w, p, cfg.stride, cfg.edge_anchored);
    let ys = axis_positions(h, p, cfg.stride, cfg.edge_anchored);
    ys.iter()
        .flat_map(|&y| xs.iter().map(move |&x| Window { x, y, w: p, h: p }))
        .collect()
}

pub fn label_from_area(mask_area_px: u64, cfg: &PatchConfig) -> bool {
    mask_area_px as f64 >= cfg.min_positive_area()
}

/// Label and union mask area of one window. Overlapping masks count once.
pub fn label_patch(window: &Window, masks: &[BitGrid], cfg: &PatchConfig) -> (bool, u64) {
    let area = match masks {
        [] => 0,
        [only] => maskgeom::mask_area_in_window(only, &window.bbox()),
        _ => {
            let mut n = 0u64;
            for y in window.y..window.y + window.h {
                for x in window.x..window.x + window.w {
                    let hit = masks
                        .iter()
                        .any(|m| x < m.width() && y < m.height() && m.get(x, y));
                    n += hit as u64;
                }
            }
            n
        }
    };
    (label_from_area(area, cfg), area)
}

/// Union of the rasterized masks of `anns` on the image grid.
pub fn union_mask(image: &CocoImage, anns: &[&CocoAnnotation]) -> Result<BitGrid, PatchError> {
    let mut grid = BitGrid::new(image.width, image.height);
    for a in anns {
        let geom = |source| PatchError::Geometry {
            image: image.file_name.clone(),
            annotation: a.id,
            source,
        };
        let mask = a.segmentation.to_segmask(image.height, image.width).map_err(geom)?;
        let g = maskgeom::rasterize(&mask, (image.height, image.width)).map_err(geom)?;
        grid.union_with(&g).map_err(geom)?;
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patch_id: String,
    pub source_image: String,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub label: bool,
    pub mask_area_px: u64,
    pub split: Split,
    pub origin: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub file_name: String,
    pub reason: String,
}

/// First line of a manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub tool_version: String,
    pub dataset_name: String,
    pub config: PatchConfig,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub skipped: Vec<SkippedImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchManifest {
    pub header: ManifestHeader,
    pub records: Vec<PatchRecord>,
}

impl PatchManifest {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), PatchError> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
        let mut line = |v: String| -> Result<(), PatchError> {
            w.write_all(v.as_bytes()).map_err(io_err(path))?;
            w.write_all(b"\n").map_err(io_err(path))
        };
        line(serde_json::to_string(&self.header).expect("header serializes"))?;
        for r in &self.records {
            line(serde_json::to_string(r).expect("record serializes"))?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, PatchError> {
        let path = path.as_ref();
        let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
        let mut header = None;
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |e: serde_json::Error| PatchError::Manifest {
                path: path.to_owned(),
                line: i + 1,
                message: e.to_string(),
            };
            if header.is_none() {
                header = Some(serde_json::from_str(&line).map_err(bad)?);
            } else {
                records.push(serde_json::from_str(&line).map_err(bad)?);
            }
        }
        let header = header.ok_or_else(|| PatchError::Manifest {
            path: path.to_owned(),
            line: 0,
            message: "missing header line".into(),
        })?;
        Ok(PatchManifest { header, records })
    }
}

/// Knobs for [`generate`] that are not part of the dataset definition.
#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    /// Only annotations of these categories count. `None` counts all.
    pub category_ids: Option<Vec<u64>>,
    /// Recorded in the manifest header when the splits came from a seeded split.
    pub seed: Option<u64>,
    pub exec: Exec,
}

/// Window areas for one image, without touching pixel data.
#[derive(Debug, Clone)]
pub struct ImageWindows {
    pub split: Split,
    pub image: CocoImage,
    pub windows: Vec<(Window, u64)>,
}

struct Job<'a> {
    split: Split,
    image: &'a CocoImage,
    anns: Vec<&'a CocoAnnotation>,
}

fn jobs<'a>(inputs: &[(Split, &'a CocoDataset)], categories: Option<&[u64]>) -> Vec<Job<'a>> {
    let mut jobs = Vec::new();
    for &(split, ds) in inputs {
        let by_image = ds.annotations_by_image();
        for image in &ds.images {
            let anns = by_image
                .get(&image.id)
                .map(|v| {
                    v.iter()
                        .copied()
                        .filter(|a| categories.is_none_or(|c| c.contains(&a.category_id)))
                        .collect()
                })
                .unwrap_or_default();
            jobs.push(Job { split, image, anns });
        }
    }
    jobs.sort_by(|a, b| a.image.file_name.cmp(&b.image.file_name));
    jobs
}

/// Mask area of every window of every image, sorted by file name.
pub fn window_areas(
    inputs: &[(Split, &CocoDataset)],
    cfg: &PatchConfig,
    opts: &GenerateOptions,
) -> Result<Vec<ImageWindows>, PatchError> {
    cfg.validate()?;
    let jobs = jobs(inputs, opts.category_ids.as_deref());
    opts.exec.try_map(&jobs, |job| {
        let windows = patch_grid((job.image.height, job.image.width), cfg);
        let areas = if windows.is_empty() {
            Vec::new()
        } else {
            let union = union_mask(job.image, &job.anns)?;
            windows
                .iter()
                .map(|w| (*w, maskgeom::mask_area_in_window(&union, &w.bbox())))
                .collect()
        };
        Ok(ImageWindows {
            split: job.split,
            image: job.image.clone(),
            windows: areas,
        })
    })
}

pub fn patch_id(origin: &str, file_name: &str, x: u32, y: u32) -> String {
    let stem = Path::new(file_name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| file_name.to_owned());
    format!("{origin}_{stem}_{x}_{y}")
}

fn records_for(iw: &ImageWindows, cfg: &PatchConfig) -> Vec<PatchRecord> {
    let mut recs: Vec<PatchRecord> = iw
        .windows
        .iter()
        .map(|&(w, area)| PatchRecord {
            patch_id: patch_id(&cfg.origin, &iw.image.file_name, w.x, w.y),
            source_image: iw.image.file_name.clone(),
            x: w.x,
            y: w.y,
            w: w.w,
            h: w.h,
            label: label_from_area(area, cfg),
            mask_area_px: area,
            split: iw.split,
            origin: cfg.origin.clone(),
        })
        .collect();
    recs.sort_by_key(|r| (r.y, r.x));
    recs
}

/// Labels only. Same records as [`generate`] but no image is read or written.
pub fn label_manifest(
    inputs: &[(Split, &CocoDataset)],
    cfg: &PatchConfig,
    opts: &GenerateOptions,
) -> Result<PatchManifest, PatchError> {
    let per_image = window_areas(inputs, cfg, opts)?;
    Ok(PatchManifest {
        header: header(cfg, opts, Vec::new()),
        records: per_image.iter().flat_map(|iw| records_for(iw, cfg)).collect(),
    })
}

fn header(cfg: &PatchConfig, opts: &GenerateOptions, skipped: Vec<SkippedImage>) -> ManifestHeader {
    ManifestHeader {
        tool_version: TOOL_VERSION.to_owned(),
        dataset_name: cfg.dataset_name(),
        config: cfg.clone(),
        seed: opts.seed,
        skipped,
    }
}

/// Directory holding the PNG files of a generated dataset.
pub fn patches_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("patches")
}

/// Crops every window out of the source images into lossless PNG files under
/// `out_dir/patches/` and returns the manifest. Unreadable images are
/// skipped and listed in the manifest header.
pub fn generate(
    inputs: &[(Split, &CocoDataset)],
    images_dir: &Path,
    out_dir: &Path,
    cfg: &PatchConfig,
    opts: &GenerateOptions,
) -> Result<PatchManifest, PatchError> {
    let per_image = window_areas(inputs, cfg, opts)?;
    let dir = patches_dir(out_dir);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let outcomes = opts.exec.try_map(&per_image, |iw| -> Result<_, PatchError> {
        let records = records_for(iw, cfg);
        if records.is_empty() {
            return Ok(Ok(records));
        }
        let src = images_dir.join(&iw.image.file_name);
        let img = match image::open(&src) {
            Ok(img) => img,
            Err(e) => {
                return Ok(Err(SkippedImage {
                    file_name: iw.image.file_name.clone(),
                    reason: e.to_string(),
                }))
            }
        };
        if (img.width(), img.height()) != (iw.image.width, iw.image.height) {
            return Ok(Err(SkippedImage {
                file_name: iw.image.file_name.clone(),
                reason: format!(
                    "decoded size {}x{} differs from annotated {}x{}",
                    img.width(),
                    img.height(),
                    iw.image.width,
                    iw.image.height
                ),
            }));
        }
        for r in &records {
            let path = dir.join(format!("{}.png", r.patch_id));
            img.crop_imm(r.x, r.y, r.w, r.h)
                .save_with_format(&path, image::ImageFormat::Png)
                .map_err(|source| PatchError::Image { path, source })?;
        }
        Ok(Ok(records))
    })?;

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => records.extend(r),
            Err(s) => skipped.push(s),
        }
    }
    Ok(PatchManifest {
        header: header(cfg, opts, skipped),
        records,
    })
}

/// Positive/negative counts per split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchStats {
    pub train_true: u64,
    pub train_false: u64,
    pub val_true: u64,
    pub val_false: u64,
    pub test_true: u64,
    pub test_false: u64,
}

impl PatchStats {
    pub fn as_row(&self) -> [u64; 6] {
        [
            self.train_true,
            self.train_false,
            self.val_true,
            self.val_false,
            self.test_true,
            self.test_false,
        ]
    }

    pub fn from_row(r: [u64; 6]) -> Self {
        PatchStats {
            train_true: r[0],
            train_false: r[1],
            val_true: r[2],
            val_false: r[3],
            test_true: r[4],
            test_false: r[5],
        }
    }

    pub fn total_true(&self) -> u64 {
        self.train_true + self.val_true + self.test_true
    }

    pub fn total_false(&self) -> u64 {
        self.train_false + self.val_false + self.test_false
    }

    pub fn total(&self) -> u64 {
        self.total_true() + self.total_false()
    }

    fn add(&mut self, split: Split, label: bool) {
        let slot = match (split, label) {
            (Split::Train, true) => &mut self.train_true,
            (Split::Train, false) => &mut self.train_false,
            (Split::Val, true) => &mut self.val_true,
            (Split::Val, false) => &mut self.val_false,
            (Split::Test, true) => &mut self.test_true,
            (Split::Test, false) => &mut self.test_false,
        };
        *slot += 1;
    }

    /// Sum of absolute count differences.
    pub fn l1_distance(&self, other: &PatchStats) -> u64 {
        self.as_row()
            .iter()
            .zip(other.as_row())
            .map(|(a, b)| a.abs_diff(b))
            .sum()
    }
}

pub fn stats(manifest: &PatchManifest) -> PatchStats {
    let mut s = PatchStats::default();
    for r in &manifest.records {
        s.add(r.split, r.label);
    }
    s
}

/// Fixed-width table: origin, dataset name, then true/false per split and totals.
pub fn format_stats_table(rows: &[(&str, &str, PatchStats)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:<24} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "origin", "dataset", "train+", "train-", "val+", "val-", "test+", "test-", "total+", "total-"
    );
    for (origin, name, s) in rows {
        let r = s.as_row();
        let _ = writeln!(
            out,
            "{:<12} {:<24} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
            origin,
            name,
            r[0],
            r[1],
            r[2],
            r[3],
            r[4],
            r[5],
            s.total_true(),
            s.total_false()
        );
    }
    out
}

/// Published per-split counts of the reference patch datasets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceCounts {
    pub dataset: &'static str,
    /// Name as printed in the published overview, which lists the stride-112
    /// datasets under `s124`.
    pub printed_as: &'static str,
    pub counts: [u64; 6],
}

pub const REFERENCE_COUNTS: [ReferenceCounts; 4] = [
    ReferenceCounts {
        dataset: "HiCC/metis-s112-p224",
        printed_as: "HiCC/metis-s124-p224",
        counts: [10480, 64359, 3684, 25014, 4281, 24700],
    },
    ReferenceCounts {
        dataset: "HiCC/metis-s224-p224",
        printed_as: "HiCC/metis-s224-p224",
        counts: [2676, 16976, 936, 6571, 1080, 6498],
    },
    ReferenceCounts {
        dataset: "HiCC/web-s112-p224",
        printed_as: "HiCC/web-s124-p224",
        counts: [573, 823, 156, 28, 132, 20],
    },
    ReferenceCounts {
        dataset: "HiCC/web-s224-p224",
        printed_as: "HiCC/web-s224-p224",
        counts: [161, 231, 48, 8, 44, 5],
    },
];

pub fn reference_counts(dataset: &str) -> Option<&'static ReferenceCounts> {
    REFERENCE_COUNTS
        .iter()
        .find(|r| r.dataset == dataset || r.printed_as == dataset)
}

/// Area thresholds tried by the calibration sweep, as fractions of patch area.
pub const DEFAULT_SWEEP_THRESHOLDS: [f64; 5] = [0.0025, 0.005, 0.01, 0.02, 0.05];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub area_threshold: f64,
    pub stats: PatchStats,
    /// L1 distance to the reference counts, if a reference exists.
    pub l1_to_reference: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub dataset_name: String,
    pub reference: Option<[u64; 6]>,
    pub reference_printed_as: Option<String>,
    pub rows: Vec<SweepRow>,
    /// Threshold with the smallest L1 distance (first one on ties).
    pub closest: Option<f64>,
}

/// Labels every window once per threshold and compares the per-split counts
/// against the published counts for the dataset, when known.
pub fn theta_sweep(
    inputs: &[(Split, &CocoDataset)],
    cfg: &PatchConfig,
    thresholds: &[f64],
    opts: &GenerateOptions,
) -> Result<SweepReport, PatchError> {
    let per_image = window_areas(inputs, cfg, opts)?;
    let name = cfg.dataset_name();
    let reference = reference_counts(&name);
    let mut rows = Vec::new();
    for &theta in thresholds {
        let c = PatchConfig {
            area_threshold: theta,
            ..cfg.clone()
        };
        c.validate()?;
        let mut s = PatchStats::default();
        for iw in &per_image {
            for &(_, area) in &iw.windows {
                s.add(iw.split, label_from_area(area, &c));
            }
        }
        rows.push(SweepRow {
            area_threshold: theta,
            stats: s,
            l1_to_reference: reference.map(|r| s.l1_distance(&PatchStats::from_row(r.counts))),
        });
    }
    let closest = rows
        .iter()
        .filter_map(|r| r.l1_to_reference.map(|d| (d, r.area_threshold)))
        .min_by_key(|&(d, _)| d)
        .map(|(_, t)| t);
    Ok(SweepReport {
        dataset_name: name,
        reference: reference.map(|r| r.counts),
        reference_printed_as: reference.map(|r| r.printed_as.to_owned()),
        rows,
        closest,
    })
}

/// Per-pixel window multiplicity over an image. Used to check grid coverage laws.
pub fn coverage_counts(dims: (u32, u32), windows: &[Window]) -> BTreeMap<u32, u64> {
    let (h, w) = dims;
    let mut cover = vec![0u32; (h * w) as usize];
    for win in windows {
        for y in win.y..win.y + win.h {
            for x in win.x..win.x + win.w {
                cover[(y * w + x) as usize] += 1;
            }
        }
    }
    let mut hist = BTreeMap::new();
    for c in cover {
        *hist.entry(c).or_insert(0) += 1;
    }
    hist
}
