//! Binary patch-classification metrics.
//!
//! A sample is predicted positive iff `score >= tau`. AP and AR average
//! precision and recall over the 101 thresholds `tau = k / 100`,
//! `k = 0..=100`; precision with nothing predicted positive counts as 0.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cocostore::Split;
use crate::detmetrics::f1_score;
use crate::par::Exec;
use crate::patchgen::PatchRecord;

#[derive(Debug, Error)]
pub enum ClsError {
    #[error("no samples to evaluate")]
    Empty,
    #[error("score {score} of `{patch_id}` outside [0,1]")]
    ScoreRange { patch_id: String, score: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{count} scored patches are missing from the manifest (first: `{first}`)")]
    UnknownPatch { count: usize, first: String },
    #[error("{count} manifest patches have no score (first: `{first}`)")]
    Unscored { count: usize, first: String },
    #[error("label and prediction lists differ in length ({labels} vs {preds})")]
    LengthMismatch { labels: usize, preds: usize },
    #[error("class index {0} out of range")]
    ClassIndex(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub patch_id: String,
    pub score: f64,
    pub label: bool,
}

impl ScoredSample {
    pub fn new(patch_id: impl Into<String>, score: f64, label: bool) -> Self {
        ScoredSample {
            patch_id: patch_id.into(),
            score,
            label,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion(samples: &[ScoredSample], tau: f64) -> Confusion {
    let mut c = Confusion::default();
    for s in samples {
        match (s.score >= tau, s.label) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// Number of positive samples.
    pub support: u64,
}

pub fn prf_cls(samples: &[ScoredSample], tau: f64) -> Result<Prf, ClsError> {
    if samples.is_empty() {
        return Err(ClsError::Empty);
    }
    let c = confusion(samples, tau);
    let (precision, recall) = (c.precision(), c.recall());
    Ok(Prf {
        precision,
        recall,
        f1: f1_score(precision, recall),
        accuracy: c.accuracy(),
        support: c.tp + c.fn_,
    })
}

/// `k / 100` for `k = 0..=100`.
pub fn threshold_grid() -> Vec<f64> {
    (0..=100).map(|k| k as f64 / 100.0).collect()
}

fn sweep(samples: &[ScoredSample], exec: Exec) -> Vec<Confusion> {
    exec.map(&threshold_grid(), |&t| confusion(samples, t))
}

/// Precision averaged over the 101-point threshold grid.
pub fn ap_cls(samples: &[ScoredSample], exec: Exec) -> f64 {
    sweep(samples, exec).iter().map(Confusion::precision).sum::<f64>() / 101.0
}

/// Recall averaged over the 101-point threshold grid. Returns `(ar, defined)`;
/// without positive samples AR is undefined and reported as 0.
pub fn ar_cls(samples: &[ScoredSample], exec: Exec) -> (f64, bool) {
    if !samples.iter().any(|s| s.label) {
        return (0.0, false);
    }
    (
        sweep(samples, exec).iter().map(Confusion::recall).sum::<f64>() / 101.0,
        true,
    )
}

/// Step-wise area under the precision-recall curve, one step per distinct
/// score: `sum (R_n - R_{n-1}) * P_n`.
pub fn ap_pr_area(samples: &[ScoredSample]) -> f64 {
    let positives = samples.iter().filter(|s| s.label).count() as u64;
    if positives == 0 {
        return 0.0;
    }
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].score;
        while i < sorted.len() && sorted[i].score == score {
            if sorted[i].label {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        area += (recall - prev_recall) * (tp as f64 / (tp + fp) as f64);
        prev_recall = recall;
    }
    area
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMode {
    #[default]
    ThresholdAverage,
    PrArea,
}

impl std::str::FromStr for ApMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "threshold" | "threshold-average" => Ok(ApMode::ThresholdAverage),
            "pr-area" => Ok(ApMode::PrArea),
            o => Err(format!("unknown AP mode `{o}` (expected threshold or pr-area)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClsReport {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub ap: f64,
    pub ar: f64,
    /// Positive samples.
    pub support: u64,
    pub samples: usize,
    pub tau: f64,
    pub ap_mode: ApMode,
    pub flags: Vec<String>,
}

pub fn cls_report(
    name: &str,
    samples: &[ScoredSample],
    tau: f64,
    ap_mode: ApMode,
    exec: Exec,
) -> Result<ClsReport, ClsError> {
    if let Some(s) = samples.iter().find(|s| !(0.0..=1.0).contains(&s.score)) {
        return Err(ClsError::ScoreRange {
            patch_id: s.patch_id.clone(),
            score: s.score,
        });
    }
    let prf = prf_cls(samples, tau)?;
    let ap = match ap_mode {
        ApMode::ThresholdAverage => ap_cls(samples, exec),
        ApMode::PrArea => ap_pr_area(samples),
    };
    let (ar, defined) = ar_cls(samples, exec);
    let mut flags = Vec::new();
    if !defined {
        flags.push("no_positive_labels: recall and AR undefined, reported as 0".to_owned());
    }
    Ok(ClsReport {
        name: name.to_owned(),
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        accuracy: prf.accuracy,
        ap,
        ar,
        support: prf.support,
        samples: samples.len(),
        tau,
        ap_mode,
        flags,
    })
}

/// One line of a score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub patch_id: String,
    pub score: f64,
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreLine>, ClsError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| ClsError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| ClsError::Io {
            path: path.to_owned(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ScoreLine = serde_json::from_str(&line).map_err(|e| ClsError::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&row.score) {
            return Err(ClsError::ScoreRange {
                patch_id: row.patch_id,
                score: row.score,
            });
        }
        out.push(row);
    }
    Ok(out)
}

/// Joins scores with manifest labels. With `split` set only that split's
/// records are expected; every expected record must be scored and every
/// score must belong to an expected record.
pub fn join_scores(
    records: &[PatchRecord],
    scores: &[ScoreLine],
    split: Option<Split>,
) -> Result<Vec<ScoredSample>, ClsError> {
    let expected: HashMap<&str, bool> = records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .map(|r| (r.patch_id.as_str(), r.label))
        .collect();
    let unknown: Vec<&str> = scores
        .iter()
        .map(|s| s.patch_id.as_str())
        .filter(|id| !expected.contains_key(id))
        .collect();
    if let Some(first) = unknown.first() {
        return Err(ClsError::UnknownPatch {
            count: unknown.len(),
            first: first.to_string(),
        });
    }
    let scored: HashMap<&str, f64> = scores.iter().map(|s| (s.patch_id.as_str(), s.score)).collect();
    let missing: Vec<&PatchRecord> = records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .filter(|r| !scored.contains_key(r.patch_id.as_str()))
        .collect();
    if let Some(first) = missing.first() {
        return Err(ClsError::Unscored {
            count: missing.len(),
            first: first.patch_id.clone(),
        });
    }
    Ok(records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .map(|r| ScoredSample::new(r.patch_id.clone(), scored[r.patch_id.as_str()], r.label))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassRow {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiClassReport {
    pub classes: Vec<ClassRow>,
    /// Unweighted mean of the per-class rows; support is the total.
    pub macro_avg: ClassRow,
    pub accuracy: f64,
}

/// One-vs-rest precision/recall/F1 per class plus their macro average.
pub fn multiclass_report(
    labels: &[usize],
    preds: &[usize],
    class_names: &[String],
) -> Result<MultiClassReport, ClsError> {
    if labels.len() != preds.len() {
        return Err(ClsError::LengthMismatch {
            labels: labels.len(),
            preds: preds.len(),
        });
    }
    if labels.is_empty() {
        return Err(ClsError::Empty);
    }
    let k = class_names.len();
    if let Some(&bad) = labels.iter().chain(preds).find(|&&c| c >= k) {
        return Err(ClsError::ClassIndex(bad));
    }
    let mut correct = 0u64;
    let mut tp = vec![0u64; k];
    let mut predicted = vec![0u64; k];
    let mut actual = vec![0u64; k];
    for (&l, &p) in labels.iter().zip(preds) {
        actual[l] += 1;
        predicted[p] += 1;
        if l == p {
            tp[l] += 1;
            correct += 1;
        }
    }
    let classes: Vec<ClassRow> = (0..k)
        .map(|c| {
            let precision = ratio(tp[c], predicted[c]);
            let recall = ratio(tp[c], actual[c]);
            ClassRow {
                class: class_names[c].clone(),
                precision,
                recall,
                f1: f1_score(precision, recall),
                support: actual[c],
            }
        })
        .collect();
    let mean = |f: fn(&ClassRow) -> f64| classes.iter().map(f).sum::<f64>() / k as f64;
    let macro_avg = ClassRow {
        class: "macro avg".into(),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        support: labels.len() as u64,
    };
    Ok(MultiClassReport {
        classes,
        macro_avg,
        accuracy: correct as f64 / labels.len() as f64,
    })
}
