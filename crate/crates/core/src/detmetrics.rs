//! Detection and instance-segmentation evaluation.
//!
//! Matching is greedy per image: detections in descending score order (ties
//! by input order) each take the unmatched ground truth with the highest IoU
//! at or above the threshold (ties to the earlier ground truth). AP is the
//! 101-point interpolated average over recall levels `0.00, 0.01, ..., 1.00`.
//! Recall levels are compared in integers (`100 * tp >= k * gt_count`) so no
//! grid point is lost to rounding.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::cocostore::{CocoDataset, DetectionSet};
use crate::maskgeom::{self, BBox, BitGrid, GeomError};
use crate::par::Exec;

#[derive(Debug, Error)]
pub enum DetMetricsError {
    #[error("mask IoU requested but image {image_id} has a {what} without a segmentation")]
    MissingMask { image_id: u64, what: &'static str },
    #[error("image {image_id}: {source}")]
    Geometry {
        image_id: u64,
        #[source]
        source: GeomError,
    },
    #[error("invalid evaluation config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum IouKind {
    Bbox,
    Segm,
}

impl std::str::FromStr for IouKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bbox" => Ok(IouKind::Bbox),
            "segm" | "mask" => Ok(IouKind::Segm),
            o => Err(format!("unknown IoU kind `{o}` (expected bbox or segm)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub id: u64,
    pub bbox: BBox,
    pub mask: Option<BitGrid>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetInstance {
    pub bbox: BBox,
    pub score: f64,
    pub mask: Option<BitGrid>,
}

/// Ground truth and detections of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageEval {
    pub image_id: u64,
    pub gts: Vec<GtInstance>,
    pub dets: Vec<DetInstance>,
}

/// IoU thresholds `0.50, 0.55, ..., 0.95`.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Joins a dataset with its detections. Images are ordered by id. With
/// `category` set, other categories are dropped on both sides.
pub fn build_inputs(
    ds: &CocoDataset,
    dets: &DetectionSet,
    kind: IouKind,
    category: Option<u64>,
) -> Result<Vec<ImageEval>, DetMetricsError> {
    let keep = |c: u64| category.is_none_or(|k| k == c);
    let by_image = ds.annotations_by_image();
    let mut images: Vec<_> = ds.images.iter().collect();
    images.sort_by_key(|im| im.id);
    let mut out = Vec::with_capacity(images.len());
    for im in images {
        let geom = |source| DetMetricsError::Geometry {
            image_id: im.id,
            source,
        };
        let raster = |seg: &crate::cocostore::Segmentation| -> Result<BitGrid, DetMetricsError> {
            let m = seg.to_segmask(im.height, im.width).map_err(geom)?;
            maskgeom::rasterize(&m, (im.height, im.width)).map_err(geom)
        };
        let mut eval = ImageEval {
            image_id: im.id,
            ..Default::default()
        };
        for a in by_image.get(&im.id).into_iter().flatten() {
            if !keep(a.category_id) {
                continue;
            }
            let mask = match kind {
                IouKind::Bbox => None,
                IouKind::Segm => Some(raster(&a.segmentation)?),
            };
            eval.gts.push(GtInstance {
                id: a.id,
                bbox: a.bbox,
                mask,
            });
        }
        for d in dets.for_image(im.id) {
            if !keep(d.category_id) {
                continue;
            }
            let mask = match (kind, &d.segmentation) {
                (IouKind::Bbox, _) => None,
                (IouKind::Segm, Some(seg)) => Some(raster(seg)?),
                (IouKind::Segm, None) => {
                    return Err(DetMetricsError::MissingMask {
                        image_id: im.id,
                        what: "detection",
                    })
                }
            };
            eval.dets.push(DetInstance {
                bbox: d.bbox,
                score: d.score,
                mask,
            });
        }
        out.push(eval);
    }
    Ok(out)
}

/// One detection after matching, in global descending-score order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetMatch {
    pub image_id: u64,
    /// Index into the image's detection list.
    pub det_index: usize,
    pub score: f64,
    pub matched_gt: Option<u64>,
    /// IoU with the matched ground truth, 0 when unmatched.
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GtMatch {
    pub image_id: u64,
    pub gt_id: u64,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    pub dets: Vec<DetMatch>,
    pub gts: Vec<GtMatch>,
    pub iou_threshold: f64,
    pub iou_kind: IouKind,
}

impl MatchResult {
    pub fn gt_count(&self) -> usize {
        self.gts.len()
    }

    pub fn tp_count(&self) -> usize {
        self.dets.iter().filter(|d| d.matched_gt.is_some()).count()
    }

    /// TP flags in score order.
    pub fn tp_flags(&self) -> Vec<bool> {
        self.dets.iter().map(|d| d.matched_gt.is_some()).collect()
    }
}

struct Prepared {
    image_id: u64,
    gt_ids: Vec<u64>,
    /// Detection indices in descending score order (stable), possibly truncated.
    order: Vec<usize>,
    scores: Vec<f64>,
    /// `ious[d][g]` for the detection at `order[d]`.
    ious: Vec<Vec<f64>>,
}

fn iou_of(kind: IouKind, image_id: u64, d: &DetInstance, g: &GtInstance) -> Result<f64, DetMetricsError> {
    match kind {
        IouKind::Bbox => Ok(maskgeom::iou_bbox(&d.bbox, &g.bbox)),
        IouKind::Segm => {
            let (Some(dm), Some(gm)) = (&d.mask, &g.mask) else {
                return Err(DetMetricsError::MissingMask {
                    image_id,
                    what: if d.mask.is_none() { "detection" } else { "ground truth" },
                });
            };
            maskgeom::iou_mask(dm, gm).map_err(|source| DetMetricsError::Geometry { image_id, source })
        }
    }
}

fn descending_order(dets: &[DetInstance], min_score: f64, cap: Option<usize>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].score >= min_score).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    if let Some(cap) = cap {
        order.truncate(cap);
    }
    order
}

fn prepare(
    img: &ImageEval,
    kind: IouKind,
    min_score: f64,
    cap: Option<usize>,
) -> Result<Prepared, DetMetricsError> {
    let order = descending_order(&img.dets, min_score, cap);
    let mut ious = Vec::with_capacity(order.len());
    for &di in &order {
        let row = img
            .gts
            .iter()
            .map(|g| iou_of(kind, img.image_id, &img.dets[di], g))
            .collect::<Result<Vec<_>, _>>()?;
        ious.push(row);
    }
    Ok(Prepared {
        image_id: img.image_id,
        gt_ids: img.gts.iter().map(|g| g.id).collect(),
        scores: order.iter().map(|&i| img.dets[i].score).collect(),
        order,
        ious,
    })
}

/// Greedy assignment for one image. Returns per-detection `(gt index, iou)`.
fn greedy(p: &Prepared, threshold: f64) -> Vec<Option<(usize, f64)>> {
    let mut taken = vec![false; p.gt_ids.len()];
    p.ious
        .iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (g, &iou) in row.iter().enumerate() {
                if taken[g] || iou < threshold {
                    continue;
                }
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            best
        })
        .collect()
}

/// IoU matrices prepared once and matched at any number of thresholds.
pub struct Evaluator {
    prepared: Vec<Prepared>,
    kind: IouKind,
    exec: Exec,
}

impl Evaluator {
    /// Keeps detections with `score >= min_score`, at most `max_dets` per image.
    pub fn new(
        images: &[ImageEval],
        kind: IouKind,
        min_score: f64,
        max_dets: Option<usize>,
        exec: Exec,
    ) -> Result<Self, DetMetricsError> {
        let prepared = exec.try_map(images, |img| prepare(img, kind, min_score, max_dets))?;
        Ok(Evaluator { prepared, kind, exec })
    }

    pub fn gt_count(&self) -> usize {
        self.prepared.iter().map(|p| p.gt_ids.len()).sum()
    }

    pub fn det_count(&self) -> usize {
        self.prepared.iter().map(|p| p.order.len()).sum()
    }

    pub fn match_at(&self, iou_threshold: f64) -> MatchResult {
        let per_image = self.exec.map(&self.prepared, |p| greedy(p, iou_threshold));
        let mut dets = Vec::with_capacity(self.det_count());
        let mut gts = Vec::with_capacity(self.gt_count());
        for (p, assigned) in self.prepared.iter().zip(&per_image) {
            let mut hit = vec![false; p.gt_ids.len()];
            for (d, a) in assigned.iter().enumerate() {
                if let Some((g, _)) = a {
                    hit[*g] = true;
                }
                dets.push(DetMatch {
                    image_id: p.image_id,
                    det_index: p.order[d],
                    score: p.scores[d],
                    matched_gt: a.map(|(g, _)| p.gt_ids[g]),
                    iou: a.map_or(0.0, |(_, iou)| iou),
                });
            }
            gts.extend(p.gt_ids.iter().zip(hit).map(|(&gt_id, matched)| GtMatch {
                image_id: p.image_id,
                gt_id,
                matched,
            }));
        }
        // stable: images are in id order and detections in per-image score order
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        MatchResult {
            dets,
            gts,
            iou_threshold,
            iou_kind: self.kind,
        }
    }

    /// Ground-truth count on images with at least one kept detection.
    fn gts_on_detected_images(&self) -> usize {
        self.prepared
            .iter()
            .filter(|p| !p.order.is_empty())
            .map(|p| p.gt_ids.len())
            .sum()
    }
}

/// Greedy matching of all images at one IoU threshold, no per-image cap.
pub fn match_detections(
    images: &[ImageEval],
    iou_threshold: f64,
    kind: IouKind,
) -> Result<MatchResult, DetMetricsError> {
    Ok(Evaluator::new(images, kind, f64::NEG_INFINITY, None, Exec::default())?.match_at(iou_threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    /// True positives among the first `rank` detections.
    pub tp: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub support: usize,
    /// Set when there is no ground truth and the curve is undefined.
    pub undefined: bool,
}

/// Cumulative precision/recall down a score-ordered TP/FP sequence.
pub fn pr_curve_from_flags(tp_flags: &[bool], gt_count: usize) -> PrCurve {
    if gt_count == 0 {
        return PrCurve {
            points: Vec::new(),
            support: 0,
            undefined: true,
        };
    }
    let mut tp = 0;
    let points = tp_flags
        .iter()
        .enumerate()
        .map(|(k, &hit)| {
            tp += hit as usize;
            PrPoint {
                recall: tp as f64 / gt_count as f64,
                precision: tp as f64 / (k + 1) as f64,
                tp,
                rank: k + 1,
            }
        })
        .collect();
    PrCurve {
        points,
        support: gt_count,
        undefined: false,
    }
}

pub fn pr_curve(matches: &MatchResult) -> PrCurve {
    pr_curve_from_flags(&matches.tp_flags(), matches.gt_count())
}

/// 101-point interpolated AP. Returns `(ap, defined)`; an undefined or empty
/// curve gives `(0.0, false)`.
pub fn average_precision(curve: &PrCurve) -> (f64, bool) {
    if curve.undefined || curve.points.is_empty() {
        return (0.0, false);
    }
    let g = curve.support as u64;
    let n = curve.points.len();
    let mut envelope = vec![0.0f64; n];
    let mut running = 0.0f64;
    for i in (0..n).rev() {
        running = running.max(curve.points[i].precision);
        envelope[i] = running;
    }
    let mut idx = 0usize;
    let mut sum = 0.0;
    for k in 0..=100u64 {
        while idx < n && 100 * (curve.points[idx].tp as u64) < k * g {
            idx += 1;
        }
        if idx < n {
            sum += envelope[idx];
        }
    }
    (sum / 101.0, true)
}

/// `2PR / (P + R)`, zero when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdRow {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Ground-truth instances under evaluation.
    pub support: usize,
    /// Ground truth on images with at least one detection scoring `>= tau`.
    pub support_detected_images: usize,
    pub tp: usize,
    pub fp: usize,
}

/// Precision, recall and F1 of detections scoring at least `tau`.
pub fn prf_at_confidence(
    images: &[ImageEval],
    tau: f64,
    iou_threshold: f64,
    kind: IouKind,
    exec: Exec,
) -> Result<ThresholdRow, DetMetricsError> {
    let ev = Evaluator::new(images, kind, tau, None, exec)?;
    let m = ev.match_at(iou_threshold);
    let tp = m.tp_count();
    let kept = m.dets.len();
    let support = m.gt_count();
    let precision = if kept == 0 { 0.0 } else { tp as f64 / kept as f64 };
    let recall = if support == 0 { 0.0 } else { tp as f64 / support as f64 };
    Ok(ThresholdRow {
        tau,
        precision,
        recall,
        f1: f1_score(precision, recall),
        support,
        support_detected_images: ev.gts_on_detected_images(),
        tp,
        fp: kept - tp,
    })
}

pub const DEFAULT_TAUS: [f64; 3] = [0.3, 0.5, 0.7];

pub fn threshold_table(
    images: &[ImageEval],
    taus: &[f64],
    iou_threshold: f64,
    kind: IouKind,
    exec: Exec,
) -> Result<Vec<ThresholdRow>, DetMetricsError> {
    taus.iter()
        .map(|&t| prf_at_confidence(images, t, iou_threshold, kind, exec))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalConfig {
    pub iou_kind: IouKind,
    /// Thresholds averaged by `ap_range` / `ar_range`.
    pub iou_thresholds: Vec<f64>,
    /// IoU used by the confidence-threshold table.
    pub table_iou: f64,
    pub taus: Vec<f64>,
    pub max_dets: usize,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_kind: IouKind::Bbox,
            iou_thresholds: coco_iou_thresholds(),
            table_iou: 0.5,
            taus: DEFAULT_TAUS.to_vec(),
            max_dets: 100,
            exec: Exec::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), DetMetricsError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.iou_thresholds.is_empty() || !self.iou_thresholds.iter().all(|&t| unit(t)) {
            return Err(DetMetricsError::Config("IoU thresholds must be non-empty and in [0,1]".into()));
        }
        if !unit(self.table_iou) || !self.taus.iter().all(|&t| unit(t)) {
            return Err(DetMetricsError::Config("tau and table IoU must lie in [0,1]".into()));
        }
        if self.max_dets == 0 {
            return Err(DetMetricsError::Config("max_dets must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveReport {
    pub iou: f64,
    /// `[recall, precision]` pairs.
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub ap50: f64,
    pub ap_range: f64,
    pub ar_range: f64,
    pub thresholds: Vec<ThresholdRow>,
    pub curves: Vec<CurveReport>,
    pub iou_kind: IouKind,
    pub gt_count: usize,
    pub det_count: usize,
    pub flags: Vec<String>,
}

/// Mean AP and mean recall over `thresholds` for a prepared evaluator.
fn range_metrics(ev: &Evaluator, thresholds: &[f64]) -> (f64, f64, Vec<(f64, PrCurve)>) {
    let g = ev.gt_count();
    let mut ap_sum = 0.0;
    let mut ar_sum = 0.0;
    let mut curves = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let m = ev.match_at(t);
        let curve = pr_curve(&m);
        ap_sum += average_precision(&curve).0;
        if g > 0 {
            ar_sum += m.tp_count() as f64 / g as f64;
        }
        curves.push((t, curve));
    }
    let n = thresholds.len() as f64;
    (ap_sum / n, ar_sum / n, curves)
}

/// AP averaged over IoU thresholds `0.50:0.95:0.05`, `max_dets` per image.
pub fn ap_range(images: &[ImageEval], kind: IouKind, max_dets: usize) -> Result<f64, DetMetricsError> {
    let ev = Evaluator::new(images, kind, f64::NEG_INFINITY, Some(max_dets), Exec::default())?;
    Ok(range_metrics(&ev, &coco_iou_thresholds()).0)
}

/// Recall at the full (capped) detection list, averaged over `0.50:0.95:0.05`.
pub fn ar_range(images: &[ImageEval], kind: IouKind, max_dets: usize) -> Result<f64, DetMetricsError> {
    let ev = Evaluator::new(images, kind, f64::NEG_INFINITY, Some(max_dets), Exec::default())?;
    Ok(range_metrics(&ev, &coco_iou_thresholds()).1)
}

pub fn evaluate(images: &[ImageEval], cfg: &EvalConfig) -> Result<EvalReport, DetMetricsError> {
    cfg.validate()?;
    let ev = Evaluator::new(images, cfg.iou_kind, f64::NEG_INFINITY, Some(cfg.max_dets), cfg.exec)?;
    let (ap50, _) = average_precision(&pr_curve(&ev.match_at(0.5)));
    let (ap_range, ar_range, curves) = range_metrics(&ev, &cfg.iou_thresholds);
    let thresholds = threshold_table(images, &cfg.taus, cfg.table_iou, cfg.iou_kind, cfg.exec)?;

    let mut flags = Vec::new();
    if ev.gt_count() == 0 {
        flags.push("no_ground_truth: AP/AR undefined, reported as 0".to_owned());
    }
    if ev.det_count() == 0 {
        flags.push("no_detections".to_owned());
    }
    Ok(EvalReport {
        ap50,
        ap_range,
        ar_range,
        thresholds,
        curves: curves
            .into_iter()
            .map(|(iou, c)| CurveReport {
                iou,
                points: c.points.iter().map(|p| [p.recall, p.precision]).collect(),
            })
            .collect(),
        iou_kind: cfg.iou_kind,
        gt_count: ev.gt_count(),
        det_count: ev.det_count(),
        flags,
    })
}

/// Threshold table as CSV with a header row.
pub fn thresholds_csv(rows: &[ThresholdRow]) -> String {
    let mut out = String::from("tau,precision,recall,f1,support,support_detected_images,tp,fp\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.4},{:.4},{:.4},{},{},{},{}",
            r.tau, r.precision, r.recall, r.f1, r.support, r.support_detected_images, r.tp, r.fp
        );
    }
    out
}

const SERIES_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Precision-recall plot on unit axes. Each series is a labeled polyline.
pub fn pr_curves_svg(series: &[(String, Vec<[f64; 2]>)]) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 50.0;
    let sx = |r: f64| PAD + r * SIZE;
    let sy = |p: f64| PAD + (1.0 - p) * SIZE;
    let total = SIZE + 2.0 * PAD;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{total}" height="{total}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    for i in 0..=10 {
        let v = i as f64 / 10.0;
        let _ = writeln!(
            s,
            r##"<line x1="{x}" y1="{y0}" x2="{x}" y2="{y1}" stroke="#ddd"/><text x="{x}" y="{ty}" text-anchor="middle">{v:.1}</text>"##,
            x = sx(v),
            y0 = PAD,
            y1 = PAD + SIZE,
            ty = PAD + SIZE + 16.0
        );
        let _ = writeln!(
            s,
            r##"<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#ddd"/><text x="{tx}" y="{ty}" text-anchor="end">{v:.1}</text>"##,
            x0 = PAD,
            x1 = PAD + SIZE,
            y = sy(v),
            tx = PAD - 6.0,
            ty = sy(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">recall</text>"#,
        PAD + SIZE / 2.0,
        total - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">precision</text>"#,
        PAD + SIZE / 2.0,
        PAD + SIZE / 2.0
    );
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|[r, p]| format!("{:.2},{:.2}", sx(*r), sy(*p)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        let ly = PAD + 16.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            PAD + SIZE - 120.0,
            PAD + SIZE - 100.0,
            PAD + SIZE - 95.0,
            ly + 4.0,
            xml_escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
