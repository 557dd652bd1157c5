//! Expert review sessions: per-image checklist and rating for two model
//! runs, an append-only assessment log, and the tally.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const LOG_FILE: &str = "assessments.jsonl";
pub const SESSIONS_DIR: &str = "sessions";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        FieldError {
            field: field.to_owned(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: corrupt log entry: {message}")]
    CorruptLog {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: corrupt session file: {message}")]
    CorruptSession { path: PathBuf, message: String },
    #[error("invalid session spec: {0}")]
    Spec(String),
    #[error("missing assets: {}", .0.iter().map(|(i, p)| format!("{i}: {p}")).collect::<Vec<_>>().join(", "))]
    MissingAssets(Vec<(String, String)>),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("invalid assessment: {}", .0.iter().map(|e| format!("{}: {}", e.field, e.message)).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReviewError + '_ {
    move |source| ReviewError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Asset paths are relative to the service's asset root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: String,
    pub original: String,
    pub overlay_a: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlay_b: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub run_a: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_b: Option<String>,
    pub images: Vec<ImageEntry>,
}

impl SessionSpec {
    pub fn validate(&self) -> Result<(), ReviewError> {
        if self.images.is_empty() {
            return Err(ReviewError::Spec("image list is empty".into()));
        }
        if self.run_a.trim().is_empty() {
            return Err(ReviewError::Spec("run_a must be named".into()));
        }
        if self.run_b.as_deref() == Some(self.run_a.as_str()) {
            return Err(ReviewError::Spec("run_a and run_b must differ".into()));
        }
        let mut seen = HashSet::new();
        for img in &self.images {
            if !seen.insert(&img.image_id) {
                return Err(ReviewError::Spec(format!("duplicate image id `{}`", img.image_id)));
            }
            if self.run_b.is_some() != img.overlay_b.is_some() {
                return Err(ReviewError::Spec(format!(
                    "image `{}`: overlay_b must be given exactly when run_b is",
                    img.image_id
                )));
            }
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON spec.
    pub fn session_id(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&json))[..16].to_owned()
    }

    pub fn missing_assets(&self, asset_root: &Path) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for img in &self.images {
            for p in [Some(&img.original), Some(&img.overlay_a), img.overlay_b.as_ref()].into_iter().flatten() {
                if !asset_root.join(p).is_file() {
                    out.push((img.image_id.clone(), p.clone()));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewSession {
    pub session_id: String,
    pub run_a: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_b: Option<String>,
    pub images: Vec<ImageEntry>,
    pub created_at: String,
}

impl ReviewSession {
    pub fn runs(&self) -> Vec<&str> {
        std::iter::once(self.run_a.as_str()).chain(self.run_b.as_deref()).collect()
    }

    pub fn has_image(&self, id: &str) -> bool {
        self.images.iter().any(|i| i.image_id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OthersDetected {
    Yes,
    No,
    NotApplicable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rating {
    Unsatisfactory,
    Sufficient,
    Satisfactory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    ABetter,
    Similar,
    BBetter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assessment {
    pub session_id: String,
    pub image_id: String,
    pub run_id: String,
    pub crucial_detected: bool,
    pub others_detected: OthersDetected,
    pub fp_count: u32,
    pub fp_exceeds_tp: bool,
    pub rating: Rating,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
    pub reviewer: String,
    #[serde(default)]
    pub timestamp: String,
}

fn enum_field<T: for<'de> Deserialize<'de>>(
    obj: &serde_json::Map<String, Value>,
    key: &str,
    allowed: &str,
    errs: &mut Vec<FieldError>,
) -> Option<T> {
    match obj.get(key) {
        None | Some(Value::Null) => {
            errs.push(FieldError::new(key, format!("required, one of {allowed}")));
            None
        }
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|_| errs.push(FieldError::new(key, format!("must be one of {allowed}"))))
            .ok(),
    }
}

impl Assessment {
    /// Parses a request body, collecting every field problem instead of
    /// stopping at the first.
    pub fn from_json(v: &Value) -> Result<Assessment, Vec<FieldError>> {
        let Some(obj) = v.as_object() else {
            return Err(vec![FieldError::new("", "body must be a JSON object")]);
        };
        let mut errs = Vec::new();
        let string = |key: &str, required: bool, errs: &mut Vec<FieldError>| match obj.get(key) {
            Some(Value::String(s)) if !s.trim().is_empty() => Some(s.clone()),
            None if !required => Some(String::new()),
            _ => {
                errs.push(FieldError::new(key, "required non-empty string"));
                None
            }
        };
        let session_id = string("session_id", true, &mut errs);
        let image_id = string("image_id", true, &mut errs);
        let run_id = string("run_id", true, &mut errs);
        let reviewer = string("reviewer", true, &mut errs);
        let timestamp = string("timestamp", false, &mut errs);
        let boolean = |key: &str, errs: &mut Vec<FieldError>| match obj.get(key) {
            Some(Value::Bool(b)) => Some(*b),
            _ => {
                errs.push(FieldError::new(key, "required boolean"));
                None
            }
        };
        let crucial_detected = boolean("crucial_detected", &mut errs);
        let fp_exceeds_tp = boolean("fp_exceeds_tp", &mut errs);
        let fp_count = match obj.get("fp_count") {
            Some(Value::Number(n)) if n.as_u64().is_some_and(|c| c <= u32::MAX as u64) => Some(n.as_u64().unwrap() as u32),
            _ => {
                errs.push(FieldError::new("fp_count", "required integer >= 0"));
                None
            }
        };
        let others_detected = enum_field(obj, "others_detected", "yes, no, not_applicable", &mut errs);
        let rating = enum_field(obj, "rating", "unsatisfactory, sufficient, satisfactory", &mut errs);
        let comparison = match obj.get("comparison") {
            None | Some(Value::Null) => Some(None),
            Some(v) => serde_json::from_value::<Comparison>(v.clone())
                .map(Some)
                .map_err(|_| errs.push(FieldError::new("comparison", "must be one of a_better, similar, b_better")))
                .ok(),
        };
        if !errs.is_empty() {
            return Err(errs);
        }
        Ok(Assessment {
            session_id: session_id.unwrap(),
            image_id: image_id.unwrap(),
            run_id: run_id.unwrap(),
            crucial_detected: crucial_detected.unwrap(),
            others_detected: others_detected.unwrap(),
            fp_count: fp_count.unwrap(),
            fp_exceeds_tp: fp_exceeds_tp.unwrap(),
            rating: rating.unwrap(),
            comparison: comparison.unwrap(),
            reviewer: reviewer.unwrap(),
            timestamp: timestamp.unwrap(),
        })
    }

    pub fn key(&self) -> (String, String, String) {
        (self.reviewer.clone(), self.image_id.clone(), self.run_id.clone())
    }
}

/// One log line: the assessment plus its position in the log and its
/// revision under (reviewer, image, run).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub revision: u32,
    #[serde(flatten)]
    pub assessment: Assessment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StoredRevision {
    pub seq: u64,
    pub revision: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunTally {
    pub run_id: String,
    pub unsatisfactory: u64,
    pub sufficient: u64,
    pub satisfactory: u64,
    pub assessed_images: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonTally {
    pub a_better: u64,
    pub similar: u64,
    pub b_better: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TallyReport {
    pub session_id: String,
    pub runs: Vec<RunTally>,
    pub comparison: ComparisonTally,
    /// Distinct images with at least one assessment.
    pub images_assessed: u64,
}

/// Counts over the latest assessment of each (image, run), whichever
/// reviewer made it. The comparison of an image comes from its latest
/// assessment that carries one.
pub fn tally(session: &ReviewSession, log: &[LogEntry]) -> TallyReport {
    let mut latest: HashMap<(&str, &str), &LogEntry> = HashMap::new();
    let mut compared: HashMap<&str, (u64, Comparison)> = HashMap::new();
    for e in log.iter().filter(|e| e.assessment.session_id == session.session_id) {
        let a = &e.assessment;
        let slot = latest.entry((a.image_id.as_str(), a.run_id.as_str())).or_insert(e);
        if e.seq >= slot.seq {
            *slot = e;
        }
        if let Some(c) = a.comparison {
            let s = compared.entry(a.image_id.as_str()).or_insert((e.seq, c));
            if e.seq >= s.0 {
                *s = (e.seq, c);
            }
        }
    }
    let runs = session
        .runs()
        .into_iter()
        .map(|run| {
            let mut t = RunTally {
                run_id: run.to_owned(),
                ..RunTally::default()
            };
            for ((_, r), e) in &latest {
                if *r != run {
                    continue;
                }
                t.assessed_images += 1;
                match e.assessment.rating {
                    Rating::Unsatisfactory => t.unsatisfactory += 1,
                    Rating::Sufficient => t.sufficient += 1,
                    Rating::Satisfactory => t.satisfactory += 1,
                }
            }
            t
        })
        .collect();
    let mut comparison = ComparisonTally::default();
    for (_, c) in compared.values() {
        comparison.total += 1;
        match c {
            Comparison::ABetter => comparison.a_better += 1,
            Comparison::Similar => comparison.similar += 1,
            Comparison::BBetter => comparison.b_better += 1,
        }
    }
    let images: HashSet<&str> = latest.keys().map(|(i, _)| *i).collect();
    TallyReport {
        session_id: session.session_id.clone(),
        runs,
        comparison,
        images_assessed: images.len() as u64,
    }
}

/// Reads a log file. Sequence numbers must start at 1 and grow by one.
pub fn read_log(path: &Path) -> Result<Vec<LogEntry>, ReviewError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out: Vec<LogEntry> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let corrupt = |message: String| ReviewError::CorruptLog {
            path: path.to_owned(),
            line: i + 1,
            message,
        };
        if line.trim().is_empty() {
            continue;
        }
        let e: LogEntry = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
        let want = out.len() as u64 + 1;
        if e.seq != want {
            return Err(corrupt(format!("sequence {} where {want} was expected", e.seq)));
        }
        out.push(e);
    }
    Ok(out)
}

/// Directory holding `sessions/*.json` and the assessment log.
pub struct ReviewStore {
    root: PathBuf,
    sessions: BTreeMap<String, ReviewSession>,
    log: Vec<LogEntry>,
    revisions: HashMap<(String, String, String), u32>,
    writer: File,
}

impl ReviewStore {
    /// Opens or creates a store, replaying the log. A corrupt log line or
    /// session file is an error.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, ReviewError> {
        let root = root.as_ref().to_owned();
        let sdir = root.join(SESSIONS_DIR);
        fs::create_dir_all(&sdir).map_err(io_err(&sdir))?;
        let mut sessions = BTreeMap::new();
        let mut paths: Vec<PathBuf> = fs::read_dir(&sdir)
            .map_err(io_err(&sdir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for p in paths {
            let text = fs::read_to_string(&p).map_err(io_err(&p))?;
            let s: ReviewSession = serde_json::from_str(&text).map_err(|e| ReviewError::CorruptSession {
                path: p.clone(),
                message: e.to_string(),
            })?;
            sessions.insert(s.session_id.clone(), s);
        }
        let log_path = root.join(LOG_FILE);
        let log = read_log(&log_path)?;
        let mut revisions = HashMap::new();
        for e in &log {
            revisions.insert(e.assessment.key(), e.revision);
        }
        let writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        Ok(ReviewStore {
            root,
            sessions,
            log,
            revisions,
            writer,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join(LOG_FILE)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &ReviewSession> {
        self.sessions.values()
    }

    pub fn session(&self, id: &str) -> Option<&ReviewSession> {
        self.sessions.get(id)
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    /// Persists a session. Re-creating an identical spec returns the stored
    /// session unchanged. With `asset_root` set every asset must exist.
    pub fn create_session(
        &mut self,
        spec: &SessionSpec,
        asset_root: Option<&Path>,
        created_at: &str,
    ) -> Result<ReviewSession, ReviewError> {
        spec.validate()?;
        if let Some(root) = asset_root {
            let missing = spec.missing_assets(root);
            if !missing.is_empty() {
                return Err(ReviewError::MissingAssets(missing));
            }
        }
        let id = spec.session_id();
        if let Some(s) = self.sessions.get(&id) {
            return Ok(s.clone());
        }
        let session = ReviewSession {
            session_id: id.clone(),
            run_a: spec.run_a.clone(),
            run_b: spec.run_b.clone(),
            images: spec.images.clone(),
            created_at: created_at.to_owned(),
        };
        let path = self.root.join(SESSIONS_DIR).join(format!("{id}.json"));
        let mut text = serde_json::to_string_pretty(&session).expect("session serializes");
        text.push('\n');
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        self.sessions.insert(id, session.clone());
        Ok(session)
    }

    pub fn check(&self, a: &Assessment) -> Result<(), ReviewError> {
        let Some(s) = self.sessions.get(&a.session_id) else {
            return Err(ReviewError::UnknownSession(a.session_id.clone()));
        };
        let mut errs = Vec::new();
        if !s.has_image(&a.image_id) {
            errs.push(FieldError::new("image_id", format!("not in session {}", s.session_id)));
        }
        if !s.runs().contains(&a.run_id.as_str()) {
            errs.push(FieldError::new("run_id", format!("must be one of {}", s.runs().join(", "))));
        }
        if a.comparison.is_some() && s.run_b.is_none() {
            errs.push(FieldError::new("comparison", "session has a single run"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ReviewError::Invalid(errs))
        }
    }

    /// Appends an assessment and returns its log position and revision.
    pub fn record(&mut self, a: Assessment) -> Result<StoredRevision, ReviewError> {
        self.check(&a)?;
        let key = a.key();
        let revision = self.revisions.get(&key).copied().unwrap_or(0) + 1;
        let entry = LogEntry {
            seq: self.log.len() as u64 + 1,
            revision,
            assessment: a,
        };
        let mut line = serde_json::to_string(&entry).expect("log entry serializes");
        line.push('\n');
        let path = self.log_path();
        self.writer.write_all(line.as_bytes()).map_err(io_err(&path))?;
        self.writer.sync_data().map_err(io_err(&path))?;
        let stored = StoredRevision {
            seq: entry.seq,
            revision,
        };
        self.revisions.insert(key, revision);
        self.log.push(entry);
        Ok(stored)
    }

    pub fn tally(&self, session_id: &str) -> Result<TallyReport, ReviewError> {
        let s = self
            .sessions
            .get(session_id)
            .ok_or_else(|| ReviewError::UnknownSession(session_id.to_owned()))?;
        Ok(tally(s, &self.log))
    }

    pub fn flush(&mut self) -> Result<(), ReviewError> {
        let path = self.log_path();
        self.writer.sync_all().map_err(io_err(&path))
    }
}
