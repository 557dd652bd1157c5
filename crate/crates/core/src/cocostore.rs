//! COCO ground-truth datasets and detector result files.
//!
//! Unknown fields on the dataset, its images and annotations are kept in
//! `extra` maps so that a load/save cycle does not drop them.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::maskgeom::{self, BBox, GeomError, SegMask};

/// Slack, in pixels, allowed when checking that a box lies inside its image.
pub const BBOX_BOUNDS_TOLERANCE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum CocoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: at `{field}`: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        field: String,
        message: String,
    },
    #[error("dataset integrity violated: {}", .0.join("; "))]
    Integrity(Vec<String>),
    #[error("invalid results: {}", .0.join("; "))]
    Results(Vec<String>),
    #[error("invalid split: {0}")]
    Split(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Compressed (pycocotools string) or plain RLE counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RleCounts {
    Plain(Vec<u32>),
    Compressed(String),
}

/// `segmentation` as it appears on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle { counts: RleCounts, size: [u32; 2] },
}

impl Segmentation {
    /// Resolves the wire form into a [`SegMask`] for an image of `height x width`.
    pub fn to_segmask(&self, height: u32, width: u32) -> Result<SegMask, GeomError> {
        match self {
            Segmentation::Polygons(rings) => Ok(SegMask::polygons(rings.clone(), height, width)),
            Segmentation::Rle { counts, size } => {
                if size[0] != height || size[1] != width {
                    return Err(GeomError::DimensionMismatch {
                        left_h: size[0],
                        left_w: size[1],
                        right_h: height,
                        right_w: width,
                    });
                }
                let counts = match counts {
                    RleCounts::Plain(c) => c.clone(),
                    RleCounts::Compressed(s) => maskgeom::rle_counts_from_string(s)?,
                };
                Ok(SegMask::rle(counts, height, width))
            }
        }
    }

    pub fn from_segmask(mask: &SegMask) -> Self {
        match &mask.encoding {
            maskgeom::MaskEncoding::Polygons(r) => Segmentation::Polygons(r.clone()),
            maskgeom::MaskEncoding::Rle(c) => Segmentation::Rle {
                counts: RleCounts::Plain(c.clone()),
                size: [mask.height, mask.width],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    /// Provenance tag set by [`merge_datasets`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub segmentation: Segmentation,
    pub area: f64,
    pub bbox: BBox,
    #[serde(default)]
    pub iscrowd: u8,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    #[serde(default)]
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub categories: Vec<Category>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl CocoDataset {
    pub fn image(&self, id: u64) -> Option<&CocoImage> {
        self.images.iter().find(|im| im.id == id)
    }

    /// Annotations grouped by image id, in file order.
    pub fn annotations_by_image(&self) -> HashMap<u64, Vec<&CocoAnnotation>> {
        let mut out: HashMap<u64, Vec<&CocoAnnotation>> = HashMap::new();
        for a in &self.annotations {
            out.entry(a.image_id).or_default().push(a);
        }
        out
    }

    pub fn category_id(&self, name: &str) -> Option<u64> {
        self.categories.iter().find(|c| c.name == name).map(|c| c.id)
    }

    /// Checks id uniqueness, referential integrity, positive areas and box bounds.
    pub fn validate(&self) -> Result<(), CocoError> {
        let mut problems = Vec::new();
        let mut seen = HashSet::new();
        let mut dims = HashMap::new();
        for im in &self.images {
            if !seen.insert(im.id) {
                problems.push(format!("duplicate image id {}", im.id));
            }
            dims.insert(im.id, (im.width, im.height));
        }
        let mut seen = HashSet::new();
        for c in &self.categories {
            if !seen.insert(c.id) {
                problems.push(format!("duplicate category id {}", c.id));
            }
        }
        let mut seen = HashSet::new();
        for a in &self.annotations {
            if !seen.insert(a.id) {
                problems.push(format!("duplicate annotation id {}", a.id));
            }
            match dims.get(&a.image_id) {
                None => problems.push(format!(
                    "annotation {} references missing image_id {}",
                    a.id, a.image_id
                )),
                Some(&(w, h)) => {
                    if !a.bbox.within(w, h, BBOX_BOUNDS_TOLERANCE) {
                        problems.push(format!(
                            "annotation {} bbox {:?} outside {}x{} image {}",
                            a.id,
                            <[f64; 4]>::from(a.bbox),
                            w,
                            h,
                            a.image_id
                        ));
                    }
                }
            }
            if a.area.is_nan() || a.area <= 0.0 {
                problems.push(format!("annotation {} has non-positive area {}", a.id, a.area));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CocoError::Integrity(problems))
        }
    }

    /// Dataset restricted to `image_ids` (in this dataset's order), annotations following.
    pub fn subset(&self, image_ids: &HashSet<u64>) -> CocoDataset {
        CocoDataset {
            images: self
                .images
                .iter()
                .filter(|im| image_ids.contains(&im.id))
                .cloned()
                .collect(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| image_ids.contains(&a.image_id))
                .cloned()
                .collect(),
            categories: self.categories.clone(),
            extra: self.extra.clone(),
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CocoError> {
    let file = File::open(path).map_err(|source| CocoError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut de = serde_json::Deserializer::from_reader(BufReader::new(file));
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        CocoError::Parse {
            path: path.to_owned(),
            line: inner.line(),
            column: inner.column(),
            field,
            message: inner.to_string(),
        }
    })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<CocoDataset, CocoError> {
    let ds: CocoDataset = read_json(path.as_ref())?;
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(ds: &CocoDataset, path: impl AsRef<Path>) -> Result<(), CocoError> {
    let path = path.as_ref();
    let io = |source| CocoError::Io {
        path: path.to_owned(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    serde_json::to_writer_pretty(&mut w, ds).map_err(|e| io(e.into()))?;
    w.write_all(b"\n").map_err(io)?;
    w.flush().map_err(io)
}

/// One scored detector output.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub category_id: u64,
    pub bbox: BBox,
    pub score: f64,
    pub segmentation: Option<Segmentation>,
}

#[derive(Debug, Deserialize)]
struct ResultRow {
    image_id: u64,
    category_id: u64,
    bbox: BBox,
    score: f64,
    #[serde(default)]
    segmentation: Option<Segmentation>,
}

/// Detections grouped per image id, file order kept within each image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionSet {
    pub by_image: BTreeMap<u64, Vec<Detection>>,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.by_image.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn for_image(&self, image_id: u64) -> &[Detection] {
        self.by_image.get(&image_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn push(&mut self, image_id: u64, det: Detection) {
        self.by_image.entry(image_id).or_default().push(det);
    }
}

/// Reads a COCO results array. A blank file counts as no detections.
pub fn load_results(path: impl AsRef<Path>, dataset: &CocoDataset) -> Result<DetectionSet, CocoError> {
    let path = path.as_ref();
    let blank = std::fs::metadata(path).is_ok_and(|m| m.len() == 0);
    let rows: Vec<ResultRow> = if blank { Vec::new() } else { read_json(path)? };
    let known: HashSet<u64> = dataset.images.iter().map(|im| im.id).collect();
    let mut problems = Vec::new();
    let mut set = DetectionSet::default();
    for (i, r) in rows.into_iter().enumerate() {
        if !(0.0..=1.0).contains(&r.score) {
            problems.push(format!("row {i}: score {} outside [0,1]", r.score));
            continue;
        }
        if !known.contains(&r.image_id) {
            problems.push(format!("row {i}: unknown image_id {}", r.image_id));
            continue;
        }
        set.push(
            r.image_id,
            Detection {
                category_id: r.category_id,
                bbox: r.bbox,
                score: r.score,
                segmentation: r.segmentation,
            },
        );
    }
    if problems.is_empty() {
        Ok(set)
    } else {
        Err(CocoError::Results(problems))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

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

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Self {
        SplitSpec {
            train,
            val,
            test,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), CocoError> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CocoError::Split(format!("fractions {f:?} must lie in [0,1]")));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CocoError::Split(format!("fractions {f:?} sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Subset sizes for `n` images: val and test are rounded, train takes the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let val = ((self.val * n as f64).round() as usize).min(n);
        let test = ((self.test * n as f64).round() as usize).min(n - val);
        (n - val - test, val, test)
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::new(0.6, 0.2, 0.2, 0)
    }
}

/// SplitMix64 (Steele, Lea, Flood 2014). Fixed here so that splits are
/// reproducible by any implementation that follows the same steps.
#[derive(Debug, Clone)]
pub struct SplitMix64(u64);

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Fisher-Yates, swapping index `i` (from the end) with `next_u64() % (i + 1)`.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }
}

/// Image-level split. Images are sorted by id, shuffled with [`SplitMix64`],
/// then cut into train, val, test in that order.
pub fn split_dataset(
    ds: &CocoDataset,
    spec: &SplitSpec,
) -> Result<(CocoDataset, CocoDataset, CocoDataset), CocoError> {
    spec.validate()?;
    if ds.images.is_empty() {
        return Err(CocoError::Split("dataset has no images".into()));
    }
    let mut ids: Vec<u64> = ds.images.iter().map(|im| im.id).collect();
    ids.sort_unstable();
    SplitMix64::new(spec.seed).shuffle(&mut ids);
    let (n_train, n_val, _) = spec.sizes(ids.len());
    let take = |range: std::ops::Range<usize>| -> HashSet<u64> { ids[range].iter().copied().collect() };
    Ok((
        ds.subset(&take(0..n_train)),
        ds.subset(&take(n_train..n_train + n_val)),
        ds.subset(&take(n_train + n_val..ids.len())),
    ))
}

/// Concatenates two datasets. Image and annotation ids are re-keyed
/// sequentially from 1, categories are unified by name, and every image gets
/// an `origin` tag unless it already carries one.
pub fn merge_datasets(a: &CocoDataset, a_origin: &str, b: &CocoDataset, b_origin: &str) -> CocoDataset {
    let mut out = CocoDataset {
        extra: a.extra.clone(),
        ..Default::default()
    };
    let mut cat_by_name: HashMap<String, u64> = HashMap::new();
    let mut next_cat = 1u64;
    let mut next_image = 1u64;
    let mut next_ann = 1u64;

    for (ds, origin) in [(a, a_origin), (b, b_origin)] {
        let mut cat_map = HashMap::new();
        for c in &ds.categories {
            let id = *cat_by_name.entry(c.name.clone()).or_insert_with(|| {
                let id = next_cat.max(c.id);
                out.categories.push(Category {
                    id,
                    ..c.clone()
                });
                id
            });
            next_cat = next_cat.max(id + 1);
            cat_map.insert(c.id, id);
        }
        let mut image_map = HashMap::new();
        for im in &ds.images {
            image_map.insert(im.id, next_image);
            out.images.push(CocoImage {
                id: next_image,
                origin: Some(im.origin.clone().unwrap_or_else(|| origin.to_owned())),
                ..im.clone()
            });
            next_image += 1;
        }
        for ann in &ds.annotations {
            let Some(&image_id) = image_map.get(&ann.image_id) else {
                continue;
            };
            out.annotations.push(CocoAnnotation {
                id: next_ann,
                image_id,
                category_id: cat_map.get(&ann.category_id).copied().unwrap_or(ann.category_id),
                ..ann.clone()
            });
            next_ann += 1;
        }
    }
    out
}
