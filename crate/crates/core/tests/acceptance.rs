//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails. Tolerances, sample counts and time budgets are
//! pinned in the constants below.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use hic_core::clsmetrics::{self, ScoredSample};
use hic_core::cocostore::{
    self, Category, CocoAnnotation, CocoDataset, CocoImage, RleCounts, Segmentation, Split, SplitMix64,
};
use hic_core::detmetrics::{self, DetInstance, EvalConfig, GtInstance, ImageEval, IouKind};
use hic_core::maskgeom::{self, BBox, BitGrid};
use hic_core::patchgen::{self, GenerateOptions, PatchConfig, Window};
use hic_core::review::{
    self, Assessment, Comparison, ImageEntry, OthersDetected, Rating, ReviewStore, SessionSpec,
};
use hic_core::tileinfer::{self, CamMap, CamTensors};
use hic_core::Exec;
use image::{Rgb, RgbImage};
use serde_json::Map;

const F1_TOL: f64 = 5e-5;
const F1_MIN_ROWS: usize = 6;
const ORACLE_TOL: f64 = 1e-12;
const DET_SCENES: usize = 400;
const CLS_SETS: usize = 400;
const LABEL_IMAGES: usize = 60;
const WORKED_TOL: f64 = 5e-5;

const EXECS: [Exec; 2] = [Exec::Sequential, Exec::Parallel];

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

fn s<E: Display>(e: E) -> String {
    e.to_string()
}

struct Rng(SplitMix64);

impl Rng {
    fn new(seed: u64) -> Self {
        Rng(SplitMix64::new(seed))
    }

    fn below(&mut self, n: u64) -> u64 {
        self.0.next_u64() % n
    }

    /// Uniform in `lo..=hi`.
    fn range(&mut self, lo: u32, hi: u32) -> u32 {
        lo + self.below((hi - lo + 1) as u64) as u32
    }

    fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn coin(&mut self, p: f64) -> bool {
        self.unit() < p
    }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn copy_tree(src: &Path, dst: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dst)?;
    for e in fs::read_dir(src)? {
        let e = e?;
        let to = dst.join(e.file_name());
        if e.file_type()?.is_dir() {
            copy_tree(&e.path(), &to)?;
        } else {
            fs::copy(e.path(), to)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// F1 identity

/// (precision, recall, f1) as printed in the confidence-threshold tables,
/// validation rows first.
const F1_ROWS: [(f64, f64, f64); 36] = [
    (0.3469, 0.4722, 0.4000),
    (0.1386, 0.2121, 0.1677),
    (0.4706, 0.4444, 0.4571),
    (0.1954, 0.1799, 0.1873),
    (0.6087, 0.3889, 0.4746),
    (0.2526, 0.1379, 0.1784),
    (0.5333, 0.4444, 0.4848),
    (0.2060, 0.3179, 0.2500),
    (0.7857, 0.3056, 0.4400),
    (0.3077, 0.2051, 0.2462),
    (0.7500, 0.3000, 0.4286),
    (0.4694, 0.1447, 0.2212),
    (0.6429, 0.5000, 0.5625),
    (0.2576, 0.3434, 0.2944),
    (0.8500, 0.4722, 0.6071),
    (0.4000, 0.2383, 0.2987),
    (0.9286, 0.3611, 0.5200),
    (0.5283, 0.1637, 0.2500),
    (0.3396, 0.6316, 0.4417),
    (0.2222, 0.3143, 0.2604),
    (0.4225, 0.5263, 0.4687),
    (0.3161, 0.3216, 0.3188),
    (0.5682, 0.4386, 0.4950),
    (0.3711, 0.2323, 0.2857),
    (0.4167, 0.4386, 0.4274),
    (0.3162, 0.4095, 0.3568),
    (0.6800, 0.2982, 0.4146),
    (0.4911, 0.3293, 0.3943),
    (0.8333, 0.1923, 0.3125),
    (0.7250, 0.2266, 0.3452),
    (0.4304, 0.5965, 0.5000),
    (0.3116, 0.4115, 0.3546),
    (0.6486, 0.4211, 0.5106),
    (0.4786, 0.3415, 0.3986),
    (0.8333, 0.2632, 0.4000),
    (0.6531, 0.2462, 0.3575),
];

fn f1_identity() -> Result<String, String> {
    let f1 = detmetrics::f1_score;
    ensure!(
        (f1(0.4786, 0.3415) - 0.3986).abs() <= F1_TOL,
        "(0.4786, 0.3415) gave {}",
        f1(0.4786, 0.3415)
    );
    let mut exact = 0;
    let mut rounded = Vec::new();
    for &(p, r, f) in &F1_ROWS {
        if (f1(p, r) - f).abs() <= F1_TOL {
            exact += 1;
            continue;
        }
        // f1 is increasing in both arguments, so with 4-decimal inputs the
        // unrounded value lies between the corners of the rounding box.
        let h = 5e-5;
        let (lo, hi) = (f1(p - h, r - h), f1(p + h, r + h));
        ensure!(
            lo <= f + h && hi >= f - h,
            "({p}, {r}) -> {f} lies outside [{lo:.5}, {hi:.5}]"
        );
        rounded.push(format!("({p},{r})->{f}"));
    }
    ensure!(exact >= F1_MIN_ROWS, "only {exact} rows reproduce, need {F1_MIN_ROWS}");
    Ok(format!(
        "{exact}/{} rows within {F1_TOL:e}; {} more agree only up to input rounding: {}",
        F1_ROWS.len(),
        rounded.len(),
        rounded.join(" ")
    ))
}

// ---------------------------------------------------------------------------
// Review tally replay

fn tally_replay() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(s)?;
    copy_tree(&fixtures().join("review_38"), tmp.path()).map_err(s)?;
    let store = ReviewStore::open(tmp.path()).map_err(s)?;
    let session = store.sessions().next().ok_or("fixture has no session")?.clone();
    ensure!(session.images.len() == 38, "{} images", session.images.len());
    let t = store.tally(&session.session_id).map_err(s)?;
    let row = |run: &str| {
        t.runs
            .iter()
            .find(|r| r.run_id == run)
            .map(|r| (r.unsatisfactory, r.sufficient, r.satisfactory, r.assessed_images))
    };
    ensure!(
        row("efficientnet-b0") == Some((4, 22, 12, 38)),
        "efficientnet-b0 row {:?}",
        row("efficientnet-b0")
    );
    ensure!(row("mask-rcnn") == Some((8, 12, 18, 38)), "mask-rcnn row {:?}", row("mask-rcnn"));
    let c = &t.comparison;
    ensure!(
        (c.a_better, c.similar, c.b_better) == (13, 16, 8),
        "comparison {:?}",
        (c.a_better, c.similar, c.b_better)
    );
    ensure!(t.images_assessed == 38, "{} images assessed", t.images_assessed);
    Ok(format!(
        "efficientnet-b0 (4, 22, 12), mask-rcnn (8, 12, 18), comparison (13, 16, 8) from {} log entries",
        store.log().len()
    ))
}

// ---------------------------------------------------------------------------
// Detection metrics against an exhaustive oracle

const SCENE_SIDE: u32 = 20;

fn random_box(rng: &mut Rng) -> [u32; 4] {
    [rng.range(0, 12), rng.range(0, 12), rng.range(1, 8), rng.range(1, 8)]
}

fn to_bbox(b: [u32; 4]) -> BBox {
    BBox::new(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64)
}

fn to_grid(b: [u32; 4]) -> BitGrid {
    BitGrid::from_rect(SCENE_SIDE, SCENE_SIDE, b[0], b[1], b[0] + b[2], b[1] + b[3])
}

fn random_scene(rng: &mut Rng) -> Vec<ImageEval> {
    let n_images = rng.range(1, 3) as usize;
    let mut images: Vec<ImageEval> = (0..n_images)
        .map(|i| ImageEval {
            image_id: i as u64 + 1,
            ..Default::default()
        })
        .collect();
    let mut gt_boxes = Vec::new();
    for id in 0..rng.range(0, 5) {
        let b = random_box(rng);
        let im = rng.below(n_images as u64) as usize;
        gt_boxes.push((im, b));
        images[im].gts.push(GtInstance {
            id: id as u64 + 1,
            bbox: to_bbox(b),
            mask: Some(to_grid(b)),
        });
    }
    for _ in 0..rng.range(0, 6) {
        let (im, b) = if !gt_boxes.is_empty() && rng.coin(0.6) {
            let (im, g) = gt_boxes[rng.below(gt_boxes.len() as u64) as usize];
            let jitter = |rng: &mut Rng, v: u32, lo: u32, hi: u32| (v as i64 + rng.range(0, 4) as i64 - 2).clamp(lo as i64, hi as i64) as u32;
            let b = [
                jitter(rng, g[0], 0, 12),
                jitter(rng, g[1], 0, 12),
                jitter(rng, g[2], 1, 8),
                jitter(rng, g[3], 1, 8),
            ];
            (im, b)
        } else {
            (rng.below(n_images as u64) as usize, random_box(rng))
        };
        // coarse scores make ties common
        let score = if rng.coin(0.5) { rng.range(1, 9) as f64 / 10.0 } else { rng.unit() };
        images[im].dets.push(DetInstance {
            bbox: to_bbox(b),
            score,
            mask: Some(to_grid(b)),
        });
    }
    images
}

fn oracle_iou(kind: IouKind, d: &DetInstance, g: &GtInstance) -> f64 {
    match kind {
        IouKind::Bbox => {
            let (a, b) = (&d.bbox, &g.bbox);
            let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
            let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
            let inter = iw * ih;
            let union = a.w * a.h + b.w * b.h - inter;
            if union > 0.0 {
                inter / union
            } else {
                0.0
            }
        }
        IouKind::Segm => {
            let (a, b) = (d.mask.as_ref().unwrap(), g.mask.as_ref().unwrap());
            let (mut i, mut u) = (0u64, 0u64);
            for (&x, &y) in a.bits().iter().zip(b.bits()) {
                i += (x && y) as u64;
                u += (x || y) as u64;
            }
            if u == 0 {
                0.0
            } else {
                i as f64 / u as f64
            }
        }
    }
}

/// Greedy COCO matching. Returns the TP/FP flags of all kept detections in
/// global descending-score order (ties: image order, then per-image rank)
/// and the ground-truth count.
fn oracle_flags(images: &[ImageEval], kind: IouKind, thr: f64, cap: usize) -> (Vec<bool>, u64) {
    let mut all: Vec<(f64, bool)> = Vec::new();
    let mut g_total = 0u64;
    for img in images {
        g_total += img.gts.len() as u64;
        let mut order: Vec<usize> = (0..img.dets.len()).collect();
        order.sort_by(|&a, &b| img.dets[b].score.partial_cmp(&img.dets[a].score).unwrap());
        order.truncate(cap);
        let mut taken = vec![false; img.gts.len()];
        for &d in &order {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in img.gts.iter().enumerate() {
                let iou = oracle_iou(kind, &img.dets[d], gt);
                if !taken[g] && iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            all.push((img.dets[d].score, best.is_some()));
        }
    }
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    (all.into_iter().map(|(_, hit)| hit).collect(), g_total)
}

/// For every recall level, the best precision over every rank reaching it.
fn oracle_ap(flags: &[bool], g: u64) -> f64 {
    if g == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for k in 0..=100u64 {
        let mut best = 0.0f64;
        let mut tp = 0u64;
        for (n, &hit) in flags.iter().enumerate() {
            tp += hit as u64;
            if 100 * tp >= k * g {
                best = best.max(tp as f64 / (n + 1) as f64);
            }
        }
        sum += best;
    }
    sum / 101.0
}

fn oracle_metrics(images: &[ImageEval], kind: IouKind, cap: usize) -> (f64, f64, f64) {
    let (f50, g) = oracle_flags(images, kind, 0.5, cap);
    let ap50 = oracle_ap(&f50, g);
    let (mut ap, mut ar) = (0.0, 0.0);
    for i in 0..10 {
        let thr = (50 + 5 * i) as f64 / 100.0;
        let (flags, g) = oracle_flags(images, kind, thr, cap);
        ap += oracle_ap(&flags, g);
        if g > 0 {
            ar += flags.iter().filter(|&&h| h).count() as f64 / g as f64;
        }
    }
    (ap50, ap / 10.0, ar / 10.0)
}

fn detection_oracle() -> Result<String, String> {
    let mut rng = Rng::new(0xDE7EC7);
    let mut compared = 0;
    for scene in 0..DET_SCENES {
        let images = random_scene(&mut rng);
        for kind in [IouKind::Bbox, IouKind::Segm] {
            let want = oracle_metrics(&images, kind, 100);
            for exec in EXECS {
                let cfg = EvalConfig {
                    iou_kind: kind,
                    exec,
                    ..EvalConfig::default()
                };
                let r = detmetrics::evaluate(&images, &cfg).map_err(s)?;
                let got = (r.ap50, r.ap_range, r.ar_range);
                ensure!(
                    (got.0 - want.0).abs() <= ORACLE_TOL
                        && (got.1 - want.1).abs() <= ORACLE_TOL
                        && (got.2 - want.2).abs() <= ORACLE_TOL,
                    "scene {scene} {kind:?} {exec:?}: got {got:?}, oracle {want:?}"
                );
            }
            // per-image cap below the detection count
            let capped = oracle_metrics(&images, kind, 2);
            let got = (
                detmetrics::ap_range(&images, kind, 2).map_err(s)?,
                detmetrics::ar_range(&images, kind, 2).map_err(s)?,
            );
            ensure!(
                (got.0 - capped.1).abs() <= ORACLE_TOL && (got.1 - capped.2).abs() <= ORACLE_TOL,
                "scene {scene} {kind:?} max_dets=2: got {got:?}, oracle {:?}",
                (capped.1, capped.2)
            );
            compared += 1;
        }
    }
    Ok(format!(
        "{DET_SCENES} scenes x (bbox, segm) x (sequential, parallel, max_dets=2): {compared} comparisons within {ORACLE_TOL:e}"
    ))
}

// ---------------------------------------------------------------------------
// Classification AP/AR against a threshold sweep

fn cls_oracle(samples: &[(f64, bool)]) -> (f64, f64) {
    let positives = samples.iter().filter(|s| s.1).count() as u64;
    let (mut ap, mut ar) = (0.0, 0.0);
    for k in 0..=100u32 {
        let t = k as f64 / 100.0;
        let (mut tp, mut fp) = (0u64, 0u64);
        for &(score, label) in samples {
            if score >= t {
                if label {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        if tp + fp > 0 {
            ap += tp as f64 / (tp + fp) as f64;
        }
        if positives > 0 {
            ar += tp as f64 / positives as f64;
        }
    }
    (ap / 101.0, ar / 101.0)
}

fn to_samples(raw: &[(f64, bool)]) -> Vec<ScoredSample> {
    raw.iter()
        .enumerate()
        .map(|(i, &(score, label))| ScoredSample::new(format!("p{i}"), score, label))
        .collect()
}

fn cls_oracle_check() -> Result<String, String> {
    let worked = to_samples(&[(0.9, true), (0.4, false), (0.8, true)]);
    let ap = clsmetrics::ap_cls(&worked, Exec::Sequential);
    let (ar, _) = clsmetrics::ar_cls(&worked, Exec::Sequential);
    ensure!((ap - 0.7657).abs() <= WORKED_TOL, "worked example ap {ap}");
    ensure!((ar - 0.8515).abs() <= WORKED_TOL, "worked example ar {ar}");

    let mut rng = Rng::new(0xC1A55);
    for set in 0..CLS_SETS {
        let n = rng.range(0, 40) as usize;
        let p_pos = rng.unit();
        let raw: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                // grid-aligned scores sit exactly on a threshold
                let score = if rng.coin(0.4) { rng.range(0, 100) as f64 / 100.0 } else { rng.unit() };
                (score, rng.coin(p_pos))
            })
            .collect();
        let want = cls_oracle(&raw);
        let samples = to_samples(&raw);
        for exec in EXECS {
            let ap = clsmetrics::ap_cls(&samples, exec);
            let (ar, defined) = clsmetrics::ar_cls(&samples, exec);
            ensure!(
                (ap - want.0).abs() <= ORACLE_TOL && (ar - want.1).abs() <= ORACLE_TOL,
                "set {set} {exec:?}: got ({ap}, {ar}), oracle {want:?}"
            );
            ensure!(defined == raw.iter().any(|r| r.1), "set {set}: wrong definedness flag");
        }
    }
    Ok(format!(
        "worked example ap={ap:.4} ar={ar:.4}; {CLS_SETS} random sets within {ORACLE_TOL:e}"
    ))
}

// ---------------------------------------------------------------------------
// Patch grid

fn grid_laws() -> Result<String, String> {
    let cfg = |stride| PatchConfig {
        patch_size: 224,
        stride,
        ..PatchConfig::default()
    };
    let dims = (448, 448);
    let total = 448u64 * 448;

    let half = patchgen::patch_grid(dims, &cfg(112));
    ensure!(half.len() == 9, "s=112 gave {} windows", half.len());
    let cov = patchgen::coverage_counts(dims, &half);
    ensure!(!cov.contains_key(&0), "s=112 leaves pixels uncovered");
    ensure!(cov.values().sum::<u64>() == total, "coverage histogram does not sum to the image");
    let max = *cov.keys().max().unwrap();
    ensure!(max == 4, "s=112 max multiplicity {max}");
    ensure!(cov[&4] == 224 * 224, "{} pixels covered four times", cov[&4]);

    let full = patchgen::patch_grid(dims, &cfg(224));
    ensure!(full.len() == 4, "s=224 gave {} windows", full.len());
    let cov = patchgen::coverage_counts(dims, &full);
    ensure!(
        cov == BTreeMap::from([(1, total)]),
        "s=224 multiplicities {cov:?}"
    );
    Ok("s=112: 9 windows, multiplicity 1..=4; s=224: 4 windows, every pixel exactly once".into())
}

// ---------------------------------------------------------------------------
// Patch labels against brute-force rasterization

fn pnpoly(ring: &[f64], px: f64, py: f64) -> bool {
    let n = ring.len() / 2;
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi, xj, yj) = (ring[2 * i], ring[2 * i + 1], ring[2 * j], ring[2 * j + 1]);
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn column_major_counts(bits: &[bool], w: u32, h: u32) -> Vec<u32> {
    let mut counts = Vec::new();
    let (mut cur, mut run) = (false, 0u32);
    for x in 0..w {
        for y in 0..h {
            let v = bits[(y * w + x) as usize];
            if v != cur {
                counts.push(run);
                cur = v;
                run = 0;
            }
            run += 1;
        }
    }
    counts.push(run);
    counts
}

struct LabelCase {
    dataset: CocoDataset,
    cfg: PatchConfig,
    /// Row-major union of all masks, computed pixel by pixel.
    truth: Vec<bool>,
}

fn quarter(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    let steps = ((hi - lo) * 4.0) as u64;
    lo + rng.below(steps + 1) as f64 / 4.0
}

fn label_case(rng: &mut Rng, id: u64) -> LabelCase {
    let (w, h) = (rng.range(24, 64), rng.range(24, 64));
    let p = [8u32, 16, 32][rng.below(3) as usize].min(w.min(h));
    let stride = rng.range((p / 4).max(1), p);
    // k / p^2 is exact in binary for these p, so boundary areas compare exactly
    let area_threshold = if rng.coin(0.5) {
        rng.range(0, (p * p) / 3) as f64 / (p * p) as f64
    } else {
        rng.unit() * 0.3
    };
    let cfg = PatchConfig {
        patch_size: p,
        stride,
        area_threshold,
        edge_anchored: rng.coin(0.5),
        origin: "synth".into(),
    };
    let mut truth = vec![false; (w * h) as usize];
    let mut annotations = Vec::new();
    for a in 0..rng.range(0, 4) {
        let segmentation = if rng.coin(0.25) {
            let density = rng.unit();
            let bits: Vec<bool> = (0..w * h).map(|_| rng.coin(density)).collect();
            for (t, &b) in truth.iter_mut().zip(&bits) {
                *t |= b;
            }
            Segmentation::Rle {
                counts: RleCounts::Plain(column_major_counts(&bits, w, h)),
                size: [h, w],
            }
        } else {
            let mut rings = Vec::new();
            for _ in 0..rng.range(1, 2) {
                let ring: Vec<f64> = (0..rng.range(3, 6))
                    .flat_map(|_| [quarter(rng, -2.0, w as f64 + 2.0), quarter(rng, -2.0, h as f64 + 2.0)])
                    .collect();
                for y in 0..h {
                    for x in 0..w {
                        if pnpoly(&ring, x as f64 + 0.5, y as f64 + 0.5) {
                            truth[(y * w + x) as usize] = true;
                        }
                    }
                }
                rings.push(ring);
            }
            Segmentation::Polygons(rings)
        };
        annotations.push(CocoAnnotation {
            id: id * 10 + a as u64,
            image_id: id,
            category_id: 1,
            segmentation,
            area: 1.0,
            bbox: BBox::new(0.0, 0.0, w as f64, h as f64),
            iscrowd: 0,
            extra: Map::new(),
        });
    }
    let dataset = CocoDataset {
        images: vec![CocoImage {
            id,
            file_name: format!("synth_{id:03}.png"),
            width: w,
            height: h,
            origin: None,
            extra: Map::new(),
        }],
        annotations,
        categories: vec![Category {
            id: 1,
            name: "honeycomb".into(),
            extra: Map::new(),
        }],
        extra: Map::new(),
    };
    LabelCase { dataset, cfg, truth }
}

fn oracle_positions(len: u32, p: u32, s: u32, anchored: bool) -> Vec<u32> {
    let mut v = Vec::new();
    let mut x = 0;
    while x + p <= len {
        v.push(x);
        x += s;
    }
    if anchored && len >= p && v.last() != Some(&(len - p)) {
        v.push(len - p);
    }
    v
}

fn label_oracle() -> Result<String, String> {
    let mut rng = Rng::new(0x1ABE1);
    let thetas = [0.0, 0.0025, 0.005, 0.01, 0.02, 0.05, 0.1, 0.5, 1.0];
    let (mut windows, mut positives) = (0usize, 0usize);
    for id in 1..=LABEL_IMAGES as u64 {
        let case = label_case(&mut rng, id);
        let (w, h) = (case.dataset.images[0].width, case.dataset.images[0].height);
        let c = &case.cfg;
        let inputs = [(Split::Train, &case.dataset)];
        let opts = GenerateOptions {
            exec: if id % 2 == 0 { Exec::Parallel } else { Exec::Sequential },
            ..GenerateOptions::default()
        };
        let m = patchgen::label_manifest(&inputs, c, &opts).map_err(s)?;

        let xs = oracle_positions(w, c.patch_size, c.stride, c.edge_anchored);
        let ys = oracle_positions(h, c.patch_size, c.stride, c.edge_anchored);
        ensure!(
            m.records.len() == xs.len() * ys.len(),
            "image {id}: {} records, expected {}",
            m.records.len(),
            xs.len() * ys.len()
        );
        let mut expected = Vec::new();
        for &y0 in &ys {
            for &x0 in &xs {
                let mut n = 0u64;
                for y in y0..y0 + c.patch_size {
                    for x in x0..x0 + c.patch_size {
                        n += case.truth[(y * w + x) as usize] as u64;
                    }
                }
                expected.push((x0, y0, n));
            }
        }
        let p2 = (c.patch_size * c.patch_size) as f64;
        for (r, &(x0, y0, n)) in m.records.iter().zip(&expected) {
            ensure!(
                (r.x, r.y, r.mask_area_px) == (x0, y0, n),
                "image {id} window ({},{}): area {} at ({},{}), oracle {n} at ({x0},{y0})",
                r.x,
                r.y,
                r.mask_area_px,
                r.x,
                r.y
            );
            ensure!(
                r.label == (n as f64 >= c.area_threshold * p2),
                "image {id} window ({x0},{y0}): label {} for area {n}",
                r.label
            );
            windows += 1;
            positives += r.label as usize;
        }

        // raising the threshold never turns a negative into a positive
        let mut prev: Option<Vec<bool>> = None;
        for &t in &thetas {
            let ct = PatchConfig {
                area_threshold: t,
                ..c.clone()
            };
            let labels: Vec<bool> = patchgen::label_manifest(&inputs, &ct, &opts)
                .map_err(s)?
                .records
                .iter()
                .map(|r| r.label)
                .collect();
            if let Some(prev) = &prev {
                ensure!(
                    labels.iter().zip(prev).all(|(&now, &before)| !now || before),
                    "image {id}: a label turned positive when theta rose to {t}"
                );
            }
            prev = Some(labels);
        }
    }
    Ok(format!(
        "{LABEL_IMAGES} images, {windows} windows ({positives} positive) match pixel counting; labels monotone over {} thresholds",
        thetas.len()
    ))
}

// ---------------------------------------------------------------------------
// Grad-CAM

fn random_tensors(rng: &mut Rng, side: u32) -> CamTensors {
    let (k, hc, wc) = (rng.range(1, 4) as usize, rng.range(1, 4) as usize, rng.range(1, 4) as usize);
    let (ww, wh) = (rng.range(4, 16), rng.range(4, 16));
    let window = Window {
        x: rng.range(0, side - ww),
        y: rng.range(0, side - wh),
        w: ww,
        h: wh,
    };
    let n = k * hc * wc;
    CamTensors {
        k,
        hc,
        wc,
        window,
        activations: (0..n).map(|_| (rng.unit() * 2.0 - 1.0) as f32).collect(),
        gradients: (0..n).map(|_| (rng.unit() * 2.0 - 1.0) as f32).collect(),
    }
}

fn scaled(t: &CamTensors, c: f32) -> CamTensors {
    CamTensors {
        gradients: t.gradients.iter().map(|g| g * c).collect(),
        ..t.clone()
    }
}

fn solid(side: u32, rng: &mut Rng) -> RgbImage {
    RgbImage::from_fn(side, side, |_, _| {
        Rgb([rng.range(0, 255) as u8, rng.range(0, 255) as u8, rng.range(0, 255) as u8])
    })
}

fn blend(src: Rgb<u8>, cm: [u8; 3]) -> Rgb<u8> {
    Rgb([0, 1, 2].map(|c| ((src.0[c] as f64 + cm[c] as f64) / 2.0).round() as u8))
}

fn local(k: usize, a: Vec<f32>, g: Vec<f32>) -> Result<CamMap, String> {
    let t = CamTensors {
        k,
        hc: 2,
        wc: 2,
        window: Window { x: 0, y: 0, w: 2, h: 2 },
        activations: a,
        gradients: g,
    };
    tileinfer::gradcam_local(&t).map_err(s)
}

fn gradcam_invariants() -> Result<String, String> {
    // worked examples
    let m = local(1, vec![1.0, -1.0, 0.0, 2.0], vec![1.0; 4])?;
    ensure!(m.values == [1.0, 0.0, 0.0, 2.0], "identity weighting gave {:?}", m.values);
    let m = local(1, vec![1.0, -1.0, 0.0, 2.0], vec![0.0; 4])?;
    ensure!(m.values == [0.0; 4], "zero gradients gave {:?}", m.values);
    let m = local(2, vec![1.0, -1.0, 0.5, 2.0, -1.0, 1.0, -0.5, -2.0], vec![1.0; 8])?;
    ensure!(m.values == [0.0; 4], "cancelling maps gave {:?}", m.values);

    let side = 40;
    let mut rng = Rng::new(0x6CA3);
    let img = solid(side, &mut rng);

    // all-zero maps leave a plain colormap(0) blend
    let mut zero = random_tensors(&mut rng, side);
    zero.gradients.iter_mut().for_each(|g| *g = 0.0);
    let (heat, out) = tileinfer::composite_cams(&img, &[zero], Exec::Sequential).map_err(s)?;
    ensure!(heat.values.iter().all(|&v| v == 0.0), "zero maps produced heat");
    let cm0 = tileinfer::colormap(0.0);
    ensure!(
        img.pixels().zip(out.pixels()).all(|(a, b)| blend(*a, cm0) == *b),
        "zero maps: output is not the colormap(0) blend"
    );

    // a single hot window peaks at red
    let hot = CamTensors {
        k: 1,
        hc: 2,
        wc: 2,
        window: Window { x: 8, y: 8, w: 2, h: 2 },
        activations: vec![0.0, 0.0, 0.0, 3.0],
        gradients: vec![1.0; 4],
    };
    let (heat, out) = tileinfer::composite_cams(&img, &[hot], Exec::Sequential).map_err(s)?;
    let peak = (9 * side + 9) as usize;
    ensure!(heat.values[peak] == 1.0, "peak normalized to {}", heat.values[peak]);
    ensure!(tileinfer::colormap(1.0) == [255, 0, 0], "colormap(1) is not red");
    ensure!(*out.get_pixel(9, 9) == blend(*img.get_pixel(9, 9), [255, 0, 0]), "peak pixel not red-blended");

    // overlapping windows combine by maximum
    let constant = |v: f64, n: usize| CamMap {
        height: n,
        width: n,
        values: vec![v; n * n],
    };
    let win = |x, y| Window { x, y, w: 4, h: 4 };
    let heat = tileinfer::combine_cams(
        (16, 16),
        &[(win(0, 0), constant(0.2, 4)), (win(2, 2), constant(0.8, 4)), (win(10, 10), constant(1.0, 4))],
    );
    ensure!(heat.values[3 * 16 + 3] == 0.8, "shared pixel {}", heat.values[3 * 16 + 3]);
    ensure!(heat.values[0] == 0.2, "first-window pixel {}", heat.values[0]);
    ensure!(heat.values[15 * 16] == 0.0, "uncovered pixel {}", heat.values[15 * 16]);

    // random tensors: non-negativity and gradient-scale invariance
    let mut cases = 0;
    for _ in 0..60 {
        let ts: Vec<CamTensors> = (0..rng.range(1, 4)).map(|_| random_tensors(&mut rng, side)).collect();
        let (heat, out) = tileinfer::composite_cams(&img, &ts, Exec::Parallel).map_err(s)?;
        ensure!(
            heat.values.iter().all(|v| (0.0..=1.0).contains(v)),
            "composite left [0,1]"
        );
        for t in &ts {
            let l = tileinfer::gradcam(t).map_err(s)?;
            ensure!(l.values.iter().all(|&v| v >= 0.0 && v.is_finite()), "negative or non-finite CAM");
            // power-of-two factors scale every intermediate exactly
            for c in [0.25f32, 2.0, 8.0] {
                let lc = tileinfer::gradcam(&scaled(t, c)).map_err(s)?;
                ensure!(
                    lc.values.iter().zip(&l.values).all(|(a, b)| *a == c as f64 * b),
                    "scaling gradients by {c} did not scale L"
                );
            }
        }
        for c in [0.25f32, 8.0] {
            let sc: Vec<CamTensors> = ts.iter().map(|t| scaled(t, c)).collect();
            let (h2, o2) = tileinfer::composite_cams(&img, &sc, Exec::Sequential).map_err(s)?;
            ensure!(h2 == heat && o2 == out, "composite changed under gradient scale {c}");
        }
        // other factors round the f32 gradients, so only approximately
        let sc: Vec<CamTensors> = ts.iter().map(|t| scaled(t, 3.0)).collect();
        let (h3, _) = tileinfer::composite_cams(&img, &sc, Exec::Sequential).map_err(s)?;
        let worst = h3.values.iter().zip(&heat.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure!(worst <= 1e-5, "gradient scale 3 moved the composite by {worst}");
        cases += 1;
    }
    Ok(format!(
        "worked examples exact; {cases} random composites non-negative and invariant to gradient scale"
    ))
}

// ---------------------------------------------------------------------------
// Formats

fn rle_roundtrip(rng: &mut Rng) -> Result<usize, String> {
    let mut n = 0;
    for _ in 0..300 {
        let (w, h) = (rng.range(1, 20), rng.range(1, 20));
        let density = rng.unit();
        let bits: Vec<bool> = (0..w * h).map(|_| rng.coin(density)).collect();
        let grid = BitGrid::from_bits(w, h, bits).ok_or("bad grid")?;
        let seg = maskgeom::rle_encode(&grid);
        let maskgeom::MaskEncoding::Rle(counts) = &seg.encoding else {
            return Err("rle_encode returned polygons".into());
        };
        ensure!(maskgeom::decode_mask(&seg).map_err(s)? == grid, "RLE decode differs");
        let text = maskgeom::rle_counts_to_string(counts);
        let back = maskgeom::rle_counts_from_string(&text).map_err(s)?;
        ensure!(&back == counts, "compressed counts differ: {counts:?} -> {text} -> {back:?}");
        ensure!(maskgeom::rle_counts_to_string(&back) == text, "compressed string differs");
        n += 1;
    }
    Ok(n)
}

fn camt_roundtrip(rng: &mut Rng, dir: &Path) -> Result<usize, String> {
    let specials = [
        0.0f32,
        -0.0,
        f32::MIN_POSITIVE / 8.0,
        f32::MAX,
        f32::INFINITY,
        f32::NEG_INFINITY,
        f32::from_bits(0x7fc0_1234),
        f32::from_bits(0xff80_0001),
    ];
    let mut n = 0;
    for i in 0..100 {
        let mut t = random_tensors(rng, 64);
        for v in t.activations.iter_mut().chain(t.gradients.iter_mut()) {
            if rng.coin(0.3) {
                *v = specials[rng.below(specials.len() as u64) as usize];
            } else if rng.coin(0.5) {
                *v = f32::from_bits(rng.0.next_u64() as u32);
            }
        }
        let bytes = tileinfer::encode_camt(&t).map_err(s)?;
        let back = if i % 10 == 0 {
            let path = dir.join(format!("t{i}.camt"));
            tileinfer::write_camt(&path, &t).map_err(s)?;
            ensure!(fs::read(&path).map_err(s)? == bytes, "file bytes differ from encoding");
            tileinfer::read_camt(&path).map_err(s)?
        } else {
            tileinfer::decode_camt(&bytes, Path::new("mem.camt")).map_err(s)?
        };
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure!(
            (back.k, back.hc, back.wc, back.window) == (t.k, t.hc, t.wc, t.window),
            "camt header changed"
        );
        ensure!(
            bits(&back.activations) == bits(&t.activations) && bits(&back.gradients) == bits(&t.gradients),
            "camt payload changed"
        );
        ensure!(tileinfer::encode_camt(&back).map_err(s)? == bytes, "camt re-encoding differs");
        n += 1;
    }
    Ok(n)
}

fn coco_roundtrip(dir: &Path) -> Result<(), String> {
    let src = fixtures().join("coco_small.json");
    let ds = cocostore::load_dataset(&src).map_err(s)?;
    let out = dir.join("coco_small.json");
    cocostore::save_dataset(&ds, &out).map_err(s)?;
    ensure!(
        fs::read(&src).map_err(s)? == fs::read(&out).map_err(s)?,
        "saved COCO file differs from the fixture"
    );
    ensure!(cocostore::load_dataset(&out).map_err(s)? == ds, "reloaded dataset differs");
    Ok(())
}

fn review_replay(rng: &mut Rng, dir: &Path) -> Result<usize, String> {
    let spec = SessionSpec {
        run_a: "mask-rcnn".into(),
        run_b: Some("efficientnet-b0".into()),
        images: (0..12)
            .map(|i| ImageEntry {
                image_id: format!("img{i}"),
                original: format!("o/{i}.jpg"),
                overlay_a: format!("a/{i}.png"),
                overlay_b: Some(format!("b/{i}.png")),
            })
            .collect(),
    };
    let runs = ["mask-rcnn", "efficientnet-b0"];
    let ratings = [Rating::Unsatisfactory, Rating::Sufficient, Rating::Satisfactory];
    let comparisons = [Comparison::ABetter, Comparison::Similar, Comparison::BBetter];
    let root = dir.join("store");
    let (live, live_log, id) = {
        let mut store = ReviewStore::open(&root).map_err(s)?;
        let id = store.create_session(&spec, None, "2024-01-01T00:00:00Z").map_err(s)?.session_id;
        for n in 0..300 {
            let run = runs[rng.below(2) as usize];
            let a = Assessment {
                session_id: id.clone(),
                image_id: format!("img{}", rng.below(12)),
                run_id: run.into(),
                crucial_detected: rng.coin(0.5),
                others_detected: OthersDetected::Yes,
                fp_count: rng.below(4) as u32,
                fp_exceeds_tp: false,
                rating: ratings[rng.below(3) as usize],
                comparison: (run == "mask-rcnn" && rng.coin(0.7)).then(|| comparisons[rng.below(3) as usize]),
                reviewer: format!("r{}", rng.below(4)),
                timestamp: format!("t{n}"),
            };
            store.record(a).map_err(s)?;
        }
        (store.tally(&id).map_err(s)?, store.log().to_vec(), id)
        // dropped without an explicit flush
    };
    let reopened = ReviewStore::open(&root).map_err(s)?;
    ensure!(reopened.log() == live_log.as_slice(), "replayed log differs");
    ensure!(reopened.tally(&id).map_err(s)? == live, "replayed tally differs");
    let session = reopened.session(&id).ok_or("session lost")?;
    let from_file = review::read_log(&reopened.log_path()).map_err(s)?;
    ensure!(review::tally(session, &from_file) == live, "tally from the raw log differs");
    Ok(live_log.len())
}

fn formats() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(s)?;
    let mut rng = Rng::new(0xF0F0);
    let rle = rle_roundtrip(&mut rng)?;
    let camt = camt_roundtrip(&mut rng, tmp.path())?;
    coco_roundtrip(tmp.path())?;
    let entries = review_replay(&mut rng, tmp.path())?;
    Ok(format!(
        "{rle} RLE masks, {camt} .camt files bit-exact; COCO fixture byte-identical; {entries}-entry log replays to the live tally"
    ))
}

// ---------------------------------------------------------------------------
// Threshold sweep report

fn rect(id: u64, image_id: u64, x: f64, y: f64, w: f64, h: f64) -> CocoAnnotation {
    CocoAnnotation {
        id,
        image_id,
        category_id: 1,
        segmentation: Segmentation::Polygons(vec![vec![x, y, x + w, y, x + w, y + h, x, y + h]]),
        area: w * h,
        bbox: BBox::new(x, y, w, h),
        iscrowd: 0,
        extra: Map::new(),
    }
}

fn synthetic_split(first_id: u64, n: u64) -> CocoDataset {
    let mut ds = CocoDataset {
        categories: vec![Category {
            id: 1,
            name: "honeycomb".into(),
            extra: Map::new(),
        }],
        ..CocoDataset::default()
    };
    for i in first_id..first_id + n {
        ds.images.push(CocoImage {
            id: i,
            file_name: format!("metis_{i:04}.jpg"),
            width: 896,
            height: 672,
            origin: None,
            extra: Map::new(),
        });
        // defects from a few pixels up to a large patch fraction
        for k in 0..4u64 {
            let side = 6.0 * (1 + (i + k) % 8) as f64 * (1 + k) as f64;
            ds.annotations.push(rect(i * 10 + k, i, 30.0 + 200.0 * k as f64, 40.0 + 150.0 * k as f64, side, side));
        }
    }
    ds
}

fn sweep_line(inputs: &[(Split, &CocoDataset)], origin: &str, stride: u32) -> Result<String, String> {
    let cfg = PatchConfig {
        patch_size: 224,
        stride,
        area_threshold: 0.01,
        edge_anchored: false,
        origin: origin.into(),
    };
    let r = patchgen::theta_sweep(inputs, &cfg, &patchgen::DEFAULT_SWEEP_THRESHOLDS, &GenerateOptions::default())
        .map_err(s)?;
    let trues: Vec<u64> = r.rows.iter().map(|row| row.stats.total_true()).collect();
    ensure!(trues.windows(2).all(|w| w[0] >= w[1]), "positive counts rise with theta: {trues:?}");
    let closest = match (r.closest, r.rows.iter().find(|row| Some(row.area_threshold) == r.closest)) {
        (Some(t), Some(row)) => format!(
            "closest theta {t} (L1 {}, test {} true / {} false)",
            row.l1_to_reference.unwrap_or(0),
            row.stats.as_row()[4],
            row.stats.as_row()[5]
        ),
        _ => "no published counts".into(),
    };
    Ok(format!("{}: true counts {trues:?}, {closest}", r.dataset_name))
}

fn theta_sweep_report() -> Result<String, String> {
    let (train, val, test) = (synthetic_split(1, 6), synthetic_split(101, 2), synthetic_split(201, 2));
    let inputs = [(Split::Train, &train), (Split::Val, &val), (Split::Test, &test)];
    let mut lines = vec![format!("synthetic {}", sweep_line(&inputs, "metis", 224)?)];
    match std::env::var_os("HIC_DATASET_DIR") {
        None => lines.push("published data not checked (set HIC_DATASET_DIR to the COCO split directory)".into()),
        Some(dir) => {
            let dir = PathBuf::from(dir);
            let origin = std::env::var("HIC_DATASET_ORIGIN").unwrap_or_else(|_| "metis".into());
            let load = |name: &str| cocostore::load_dataset(dir.join(format!("{name}.json"))).map_err(s);
            let (tr, va, te) = (load("train")?, load("val")?, load("test")?);
            let inputs = [(Split::Train, &tr), (Split::Val, &va), (Split::Test, &te)];
            for stride in [224, 112] {
                lines.push(sweep_line(&inputs, &origin, stride)?);
            }
        }
    }
    Ok(lines.join("; "))
}

// ---------------------------------------------------------------------------

struct Criterion {
    name: &'static str,
    budget: Duration,
    check: fn() -> Result<String, String>,
}

fn panic_text(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}

fn main() {
    let secs = Duration::from_secs;
    let criteria = [
        Criterion { name: "f1-identity", budget: secs(1), check: f1_identity },
        Criterion { name: "review-tally-replay", budget: secs(1), check: tally_replay },
        Criterion { name: "detection-oracle", budget: secs(30), check: detection_oracle },
        Criterion { name: "classification-oracle", budget: secs(10), check: cls_oracle_check },
        Criterion { name: "patch-grid-laws", budget: secs(1), check: grid_laws },
        Criterion { name: "patch-label-oracle", budget: secs(30), check: label_oracle },
        Criterion { name: "gradcam-invariants", budget: secs(1), check: gradcam_invariants },
        Criterion { name: "format-roundtrips", budget: secs(5), check: formats },
        Criterion { name: "theta-sweep-report", budget: secs(120), check: theta_sweep_report },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.check)).unwrap_or_else(|p| Err(panic_text(p)));
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(d) if took > c.budget => Err(format!("{d}; took {took:.2?}, budget {:?}", c.budget)),
            o => o,
        };
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(e) => {
                failed += 1;
                ("FAIL", e)
            }
        };
        println!("{tag} {:<22} {:>8.3}s  {detail}", c.name, took.as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
