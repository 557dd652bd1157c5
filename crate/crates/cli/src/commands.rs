use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::Args;
use hic_core::clsmetrics::{self, ApMode, ClsReport};
use hic_core::cocostore::{self, CocoDataset, Split, SplitSpec};
use hic_core::detmetrics::{self, EvalConfig, IouKind};
use hic_core::patchgen::{self, GenerateOptions, PatchConfig, PatchManifest};
use hic_core::review::{ReviewStore, SessionSpec};
use hic_core::tileinfer::{self, ConstantScorer, FileScorer, OverlayStyle, Scorer, SubprocessScorer};
use hic_core::{Exec, TOOL_VERSION};
use serde::Serialize;
use serde_json::{json, Value};

use crate::StoreArg;

pub enum CliError {
    /// Bad arguments, configuration or missing inputs. Exit 2.
    Usage(anyhow::Error),
    /// Failure while doing the work. Exit 1.
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult = Result<(), CliError>;

fn usage(msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(anyhow!("{msg}"))
}

pub fn report(e: CliError) -> ExitCode {
    match e {
        CliError::Usage(e) => {
            eprintln!("error: {e:#}");
            eprintln!("run with --help for usage");
            ExitCode::from(2)
        }
        CliError::Runtime(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Applies `HIC_THREADS` and `--sequential`.
pub fn configure_threads(sequential: bool) -> Result<Exec, CliError> {
    if sequential {
        return Ok(Exec::Sequential);
    }
    let Ok(raw) = std::env::var("HIC_THREADS") else {
        return Ok(Exec::Parallel);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("HIC_THREADS must be a positive integer, got `{raw}`")))?;
    if n == 1 {
        return Ok(Exec::Sequential);
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.into()))?;
    Ok(Exec::Parallel)
}

/// Provenance block written into every artifact.
#[derive(Serialize)]
struct RunHeader {
    tool_version: &'static str,
    command: Vec<String>,
    seed: Option<u64>,
    config: Value,
}

fn header(seed: Option<u64>, config: Value) -> RunHeader {
    RunHeader {
        tool_version: TOOL_VERSION,
        command: std::env::args().collect(),
        seed,
        config,
    }
}

fn header_line(h: &RunHeader) -> String {
    serde_json::to_string(h).expect("header serializes")
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> CliResult {
    let mut s = serde_json::to_string_pretty(v).context("serializing report")?;
    s.push('\n');
    write_text(path, &s)
}

fn require_file(p: &Path, what: &str) -> CliResult {
    if p.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} `{}` does not exist", p.display())))
    }
}

fn require_dir(p: &Path, what: &str) -> CliResult {
    if p.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} `{}` is not a directory", p.display())))
    }
}

fn create_dir(p: &Path) -> CliResult {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    Ok(())
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| usage(format!("bad {what} value `{t}`"))))
        .collect()
}

#[derive(Args)]
pub struct PatchArgs {
    /// Patch side length in pixels.
    #[arg(long, default_value_t = 224)]
    patch_size: u32,
    /// Window step in pixels.
    #[arg(long, default_value_t = 224)]
    stride: u32,
    /// Minimum mask fraction of the patch area for a positive label.
    #[arg(long, default_value_t = 0.01)]
    theta: f64,
    /// Add a last window flush with the right/bottom edge.
    #[arg(long)]
    edge_anchored: bool,
    /// Origin tag used in patch names and the dataset name.
    #[arg(long, default_value = "hicis")]
    origin: String,
}

impl PatchArgs {
    fn config(&self) -> Result<PatchConfig, CliError> {
        let cfg = PatchConfig {
            patch_size: self.patch_size,
            stride: self.stride,
            area_threshold: self.theta,
            edge_anchored: self.edge_anchored,
            origin: self.origin.clone(),
        };
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

#[derive(Args)]
pub struct CocoInputs {
    /// COCO file, either `split=path` (repeat per split) or one path that is
    /// split with --fractions and --seed.
    #[arg(long, required = true)]
    coco: Vec<String>,
    /// Train,val,test fractions for an unsplit input.
    #[arg(long, default_value = "0.6,0.2,0.2")]
    fractions: String,
    /// Seed of the image-level split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Count only annotations of this category name.
    #[arg(long)]
    category: Option<String>,
}

struct LoadedInputs {
    sets: Vec<(Split, CocoDataset)>,
    seed: Option<u64>,
    category_ids: Option<Vec<u64>>,
}

impl LoadedInputs {
    fn refs(&self) -> Vec<(Split, &CocoDataset)> {
        self.sets.iter().map(|(s, d)| (*s, d)).collect()
    }
}

fn load_inputs(args: &CocoInputs) -> Result<LoadedInputs, CliError> {
    let mut labeled = Vec::new();
    let mut plain = Vec::new();
    for item in &args.coco {
        match item.split_once('=') {
            Some((split, path)) => {
                let split: Split = split.parse().map_err(usage)?;
                labeled.push((split, PathBuf::from(path)));
            }
            None => plain.push(PathBuf::from(item)),
        }
    }
    if !labeled.is_empty() && !plain.is_empty() {
        return Err(usage("--coco takes either split=path entries or a single unsplit path, not both"));
    }
    if plain.len() > 1 {
        return Err(usage("give one unsplit --coco path, or label each with split=path"));
    }
    for (_, p) in &labeled {
        require_file(p, "COCO file")?;
    }
    for p in &plain {
        require_file(p, "COCO file")?;
    }
    let (sets, seed) = if let Some(path) = plain.first() {
        let f = parse_list(&args.fractions, "fraction")?;
        if f.len() != 3 {
            return Err(usage("--fractions needs three values"));
        }
        let spec = SplitSpec::new(f[0], f[1], f[2], args.seed);
        spec.validate().map_err(usage)?;
        let ds = cocostore::load_dataset(path)?;
        let (tr, va, te) = cocostore::split_dataset(&ds, &spec)?;
        (vec![(Split::Train, tr), (Split::Val, va), (Split::Test, te)], Some(args.seed))
    } else {
        let mut sets = Vec::new();
        for (s, p) in labeled {
            sets.push((s, cocostore::load_dataset(&p)?));
        }
        (sets, None)
    };
    let category_ids = match &args.category {
        None => None,
        Some(name) => {
            let ids: Vec<u64> = sets.iter().filter_map(|(_, d)| d.category_id(name)).collect();
            if ids.is_empty() {
                return Err(usage(format!("no input defines category `{name}`")));
            }
            Some(ids)
        }
    };
    Ok(LoadedInputs {
        sets,
        seed,
        category_ids,
    })
}

#[derive(Args)]
pub struct PatchgenArgs {
    #[command(flatten)]
    inputs: CocoInputs,
    #[command(flatten)]
    patch: PatchArgs,
    /// Directory with the source images named as in the COCO files.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Output directory (manifest.jsonl, patches/, stats.txt).
    #[arg(long)]
    out: PathBuf,
    /// Compute labels only; no images are read or written.
    #[arg(long)]
    labels_only: bool,
}

pub fn patchgen(a: PatchgenArgs, exec: Exec) -> CliResult {
    let cfg = a.patch.config()?;
    let images = match (&a.images, a.labels_only) {
        (Some(d), _) => {
            require_dir(d, "image directory")?;
            Some(d.clone())
        }
        (None, true) => None,
        (None, false) => return Err(usage("--images is required unless --labels-only is set")),
    };
    let inputs = load_inputs(&a.inputs)?;
    let opts = GenerateOptions {
        category_ids: inputs.category_ids.clone(),
        seed: inputs.seed,
        exec,
    };
    create_dir(&a.out)?;
    let manifest = match images {
        Some(dir) if !a.labels_only => patchgen::generate(&inputs.refs(), &dir, &a.out, &cfg, &opts)?,
        _ => patchgen::label_manifest(&inputs.refs(), &cfg, &opts)?,
    };
    manifest.write(a.out.join("manifest.jsonl"))?;
    let table = patchgen::format_stats_table(&[(&cfg.origin, &cfg.dataset_name(), patchgen::stats(&manifest))]);
    let h = header(inputs.seed, serde_json::to_value(&cfg)?);
    write_text(&a.out.join("stats.txt"), &format!("# {}\n{table}", header_line(&h)))?;
    print!("{table}");
    for s in &manifest.header.skipped {
        eprintln!("skipped {}: {}", s.file_name, s.reason);
    }
    Ok(())
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    inputs: CocoInputs,
    #[command(flatten)]
    patch: PatchArgs,
    /// Area thresholds to sweep, as fractions of the patch area.
    #[arg(long, default_value = "0.0025,0.005,0.01,0.02,0.05")]
    thetas: String,
    /// Write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn theta_sweep(a: SweepArgs, exec: Exec) -> CliResult {
    let cfg = a.patch.config()?;
    let thetas = parse_list(&a.thetas, "theta")?;
    if thetas.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(usage("thetas must lie in [0,1]"));
    }
    let inputs = load_inputs(&a.inputs)?;
    let opts = GenerateOptions {
        category_ids: inputs.category_ids.clone(),
        seed: inputs.seed,
        exec,
    };
    let rep = patchgen::theta_sweep(&inputs.refs(), &cfg, &thetas, &opts)?;
    let rows: Vec<(String, String, patchgen::PatchStats)> = rep
        .rows
        .iter()
        .map(|r| (format!("theta={}", r.area_threshold), rep.dataset_name.clone(), r.stats))
        .collect();
    let mut table_rows: Vec<(&str, &str, patchgen::PatchStats)> =
        rows.iter().map(|(o, n, s)| (o.as_str(), n.as_str(), *s)).collect();
    let reference = rep.reference.map(patchgen::PatchStats::from_row);
    if let Some(r) = reference {
        table_rows.push(("published", rep.reference_printed_as.as_deref().unwrap_or(""), r));
    }
    print!("{}", patchgen::format_stats_table(&table_rows));
    match rep.closest {
        Some(t) => println!("closest theta: {t}"),
        None => println!("no published counts for {}", rep.dataset_name),
    }
    if let Some(out) = &a.out {
        let h = header(inputs.seed, json!({ "patch": cfg, "thetas": thetas }));
        write_json(out, &json!({ "header": h, "report": rep }))?;
    }
    Ok(())
}

#[derive(Args)]
pub struct SplitArgs {
    /// Unsplit COCO file.
    #[arg(long)]
    coco: PathBuf,
    /// Train,val,test fractions; the remainder goes to train.
    #[arg(long, default_value = "0.6,0.2,0.2")]
    fractions: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving train.json, val.json, test.json.
    #[arg(long)]
    out: PathBuf,
}

pub fn split(a: SplitArgs) -> CliResult {
    require_file(&a.coco, "COCO file")?;
    let f = parse_list(&a.fractions, "fraction")?;
    if f.len() != 3 {
        return Err(usage("--fractions needs three values"));
    }
    let spec = SplitSpec::new(f[0], f[1], f[2], a.seed);
    spec.validate().map_err(usage)?;
    let ds = cocostore::load_dataset(&a.coco)?;
    let (tr, va, te) = cocostore::split_dataset(&ds, &spec)?;
    create_dir(&a.out)?;
    for (name, mut part) in [("train", tr), ("val", va), ("test", te)] {
        part.extra.insert(
            "hic".into(),
            serde_json::to_value(header(Some(a.seed), json!({ "fractions": f, "split": name })))?,
        );
        println!("{name}: {} images, {} annotations", part.images.len(), part.annotations.len());
        cocostore::save_dataset(&part, a.out.join(format!("{name}.json")))?;
    }
    Ok(())
}

#[derive(Args)]
pub struct MergeArgs {
    /// First input as `origin=path`.
    #[arg(long)]
    a: String,
    /// Second input as `origin=path`.
    #[arg(long)]
    b: String,
    /// Merged COCO file.
    #[arg(long)]
    out: PathBuf,
}

fn origin_path(s: &str) -> Result<(String, PathBuf), CliError> {
    let (o, p) = s
        .split_once('=')
        .ok_or_else(|| usage(format!("expected origin=path, got `{s}`")))?;
    let p = PathBuf::from(p);
    require_file(&p, "COCO file")?;
    Ok((o.to_owned(), p))
}

pub fn merge(a: MergeArgs) -> CliResult {
    let (oa, pa) = origin_path(&a.a)?;
    let (ob, pb) = origin_path(&a.b)?;
    let da = cocostore::load_dataset(&pa)?;
    let db = cocostore::load_dataset(&pb)?;
    let mut merged = cocostore::merge_datasets(&da, &oa, &db, &ob);
    merged.extra.insert(
        "hic".into(),
        serde_json::to_value(header(None, json!({ "a": oa, "b": ob })))?,
    );
    cocostore::save_dataset(&merged, &a.out)?;
    println!("{} images, {} annotations", merged.images.len(), merged.annotations.len());
    Ok(())
}

#[derive(Args)]
pub struct DetEvalArgs {
    /// Ground-truth COCO file.
    #[arg(long)]
    gt: PathBuf,
    /// COCO results file (JSON array of detections).
    #[arg(long)]
    results: PathBuf,
    /// bbox or segm.
    #[arg(long, default_value = "bbox")]
    iou_type: String,
    /// IoU of the confidence-threshold table.
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Confidence thresholds of the table.
    #[arg(long, default_value = "0.3,0.5,0.7")]
    conf: String,
    /// Detections kept per image for AP/AR.
    #[arg(long, default_value_t = 100)]
    max_dets: usize,
    /// Evaluate one category by name.
    #[arg(long)]
    category: Option<String>,
    /// Output directory (det_report.json, thresholds.csv, pr_curves.svg).
    #[arg(long)]
    out: PathBuf,
}

pub fn det_eval(a: DetEvalArgs, exec: Exec) -> CliResult {
    require_file(&a.gt, "ground-truth file")?;
    require_file(&a.results, "results file")?;
    let kind: IouKind = a.iou_type.parse().map_err(usage)?;
    let cfg = EvalConfig {
        iou_kind: kind,
        table_iou: a.iou,
        taus: parse_list(&a.conf, "confidence")?,
        max_dets: a.max_dets,
        exec,
        ..EvalConfig::default()
    };
    cfg.validate().map_err(usage)?;
    let ds = cocostore::load_dataset(&a.gt)?;
    let category = match &a.category {
        None => None,
        Some(n) => Some(ds.category_id(n).ok_or_else(|| usage(format!("unknown category `{n}`")))?),
    };
    let dets = cocostore::load_results(&a.results, &ds)?;
    let images = detmetrics::build_inputs(&ds, &dets, kind, category)?;
    let rep = detmetrics::evaluate(&images, &cfg)?;
    create_dir(&a.out)?;
    let h = header(None, serde_json::to_value(&cfg)?);
    let line = header_line(&h);
    write_json(&a.out.join("det_report.json"), &json!({ "header": h, "report": rep }))?;
    write_text(
        &a.out.join("thresholds.csv"),
        &format!("# {line}\n{}", detmetrics::thresholds_csv(&rep.thresholds)),
    )?;
    let series: Vec<(String, Vec<[f64; 2]>)> = rep
        .curves
        .iter()
        .filter(|c| [0.5, 0.75].iter().any(|t| (c.iou - t).abs() < 1e-9))
        .map(|c| (format!("IoU={:.2}", c.iou), c.points.clone()))
        .collect();
    let svg = detmetrics::pr_curves_svg(&series);
    write_text(
        &a.out.join("pr_curves.svg"),
        &format!("<!-- {} -->\n{svg}", line.replace("--", "- -")),
    )?;
    println!("AP50 {:.4}  AP[.5:.95] {:.4}  AR[.5:.95] {:.4}", rep.ap50, rep.ap_range, rep.ar_range);
    print!("{}", detmetrics::thresholds_csv(&rep.thresholds));
    for f in &rep.flags {
        eprintln!("note: {f}");
    }
    Ok(())
}

#[derive(Args)]
pub struct ClsEvalArgs {
    /// Patch manifest (JSONL) holding the labels.
    #[arg(long)]
    manifest: PathBuf,
    /// Score file, `name=path` or `path`; repeat for a batch.
    #[arg(long, required = true)]
    scores: Vec<String>,
    /// Only evaluate this split's patches.
    #[arg(long)]
    split: Option<Split>,
    /// Decision threshold for precision/recall/F1/accuracy.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    /// threshold (101-point threshold average) or pr-area.
    #[arg(long, default_value = "threshold")]
    ap_mode: ApMode,
    /// Output directory (cls_report.json, cls_report.csv).
    #[arg(long)]
    out: PathBuf,
}

pub fn cls_eval(a: ClsEvalArgs, exec: Exec) -> CliResult {
    require_file(&a.manifest, "manifest")?;
    if !(0.0..=1.0).contains(&a.tau) {
        return Err(usage("--tau must lie in [0,1]"));
    }
    let mut named = Vec::new();
    for s in &a.scores {
        let (name, path) = match s.split_once('=') {
            Some((n, p)) => (n.to_owned(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(s);
                let n = p.file_stem().map(|x| x.to_string_lossy().into_owned()).unwrap_or_else(|| s.clone());
                (n, p)
            }
        };
        require_file(&path, "score file")?;
        named.push((name, path));
    }
    let manifest = PatchManifest::read(&a.manifest)?;
    let mut reports: Vec<ClsReport> = Vec::new();
    for (name, path) in &named {
        let scores = clsmetrics::read_scores(path)?;
        let samples = clsmetrics::join_scores(&manifest.records, &scores, a.split)
            .with_context(|| format!("joining {} with the manifest", path.display()))?;
        reports.push(clsmetrics::cls_report(name, &samples, a.tau, a.ap_mode, exec)?);
    }
    create_dir(&a.out)?;
    let h = header(
        manifest.header.seed,
        json!({ "tau": a.tau, "ap_mode": a.ap_mode, "split": a.split, "dataset": manifest.header.dataset_name }),
    );
    let mut csv = format!("# {}\nname,precision,recall,f1,accuracy,ap,ar,support,samples\n", header_line(&h));
    for r in &reports {
        csv.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{},{}\n",
            r.name, r.precision, r.recall, r.f1, r.accuracy, r.ap, r.ar, r.support, r.samples
        ));
    }
    write_json(&a.out.join("cls_report.json"), &json!({ "header": h, "reports": reports }))?;
    write_text(&a.out.join("cls_report.csv"), &csv)?;
    print!("{}", csv.split_once('\n').map(|x| x.1).unwrap_or(""));
    for r in &reports {
        for f in &r.flags {
            eprintln!("note: {}: {f}", r.name);
        }
    }
    Ok(())
}

#[derive(Args)]
pub struct TileArgs {
    /// Image to score; repeatable.
    #[arg(long, required = true)]
    image: Vec<PathBuf>,
    /// Replay scores from a recorded JSONL file.
    #[arg(long, group = "scorer")]
    replay: Option<PathBuf>,
    /// Model command speaking the line protocol on stdin/stdout (run by `sh -c`).
    #[arg(long, group = "scorer")]
    scorer_cmd: Option<String>,
    /// Give every window this score.
    #[arg(long, group = "scorer")]
    constant: Option<f64>,
    /// Window side length in pixels.
    #[arg(long, default_value_t = 224)]
    patch_size: u32,
    /// Window step in pixels.
    #[arg(long, default_value_t = 224)]
    stride: u32,
    /// Add a last window flush with the right/bottom edge.
    #[arg(long)]
    edge_anchored: bool,
    /// Windows scoring above this get a border.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    /// Magnification of the 5x7 font.
    #[arg(long, default_value_t = 2)]
    text_scale: u32,
    /// Output directory (overlays, scores.jsonl, tile.json).
    #[arg(long)]
    out: PathBuf,
}

pub fn tile(a: TileArgs, exec: Exec) -> CliResult {
    for p in &a.image {
        require_file(p, "image")?;
    }
    let cfg = PatchConfig {
        patch_size: a.patch_size,
        stride: a.stride,
        edge_anchored: a.edge_anchored,
        ..PatchConfig::default()
    };
    cfg.validate().map_err(usage)?;
    if !(0.0..=1.0).contains(&a.tau) || a.text_scale == 0 {
        return Err(usage("--tau must lie in [0,1] and --text-scale be positive"));
    }
    let scorer: Box<dyn Scorer> = match (&a.replay, &a.scorer_cmd, a.constant) {
        (Some(p), _, _) => {
            require_file(p, "score recording")?;
            Box::new(FileScorer::open(p)?)
        }
        (_, Some(cmd), _) => Box::new(SubprocessScorer::spawn("sh", &["-c".into(), cmd.clone()])?),
        (_, _, Some(c)) => Box::new(ConstantScorer(c)),
        _ => return Err(usage("one of --replay, --scorer-cmd, --constant is required")),
    };
    create_dir(&a.out)?;
    let style = OverlayStyle {
        tau: a.tau,
        text_scale: a.text_scale,
    };
    let mut grids = Vec::new();
    for path in &a.image {
        let img = image::open(path)
            .with_context(|| format!("decoding {}", path.display()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let grid = tileinfer::score_windows(path, (h, w), scorer.as_ref(), &cfg, exec)
            .with_context(|| format!("scoring {}", path.display()))?;
        let overlay = tileinfer::render_overlay(&img, &grid, &style);
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let out = a.out.join(format!("{stem}_overlay.png"));
        overlay
            .save_with_format(&out, image::ImageFormat::Png)
            .with_context(|| format!("writing {}", out.display()))?;
        let above = grid.windows.iter().filter(|w| w.score > a.tau).count();
        println!("{}: {} windows, {above} above {}", grid.image, grid.windows.len(), a.tau);
        grids.push(grid);
    }
    let records: Vec<_> = grids.iter().flat_map(|g| g.records()).collect();
    tileinfer::write_score_records(a.out.join("scores.jsonl"), &records)?;
    let h = header(None, json!({ "patch": cfg, "tau": a.tau, "text_scale": a.text_scale }));
    write_json(&a.out.join("tile.json"), &json!({ "header": h, "grids": grids }))?;
    Ok(())
}

#[derive(Args)]
pub struct CamArgs {
    /// Source image the tensors belong to.
    #[arg(long)]
    image: PathBuf,
    /// Tensor file; repeatable.
    #[arg(long)]
    camt: Vec<PathBuf>,
    /// Directory whose *.camt files are all used.
    #[arg(long)]
    camt_dir: Option<PathBuf>,
    /// Output PNG; a JSON sidecar with the same stem is written next to it.
    #[arg(long)]
    out: PathBuf,
}

pub fn cam(a: CamArgs, exec: Exec) -> CliResult {
    require_file(&a.image, "image")?;
    let mut files = a.camt.clone();
    if let Some(dir) = &a.camt_dir {
        require_dir(dir, "tensor directory")?;
        let mut found: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "camt"))
            .collect();
        found.sort();
        files.extend(found);
    }
    if files.is_empty() {
        return Err(usage("no tensor files given (--camt or --camt-dir)"));
    }
    for f in &files {
        require_file(f, "tensor file")?;
    }
    let img = image::open(&a.image)
        .with_context(|| format!("decoding {}", a.image.display()))?
        .to_rgb8();
    let tensors = files
        .iter()
        .map(tileinfer::read_camt)
        .collect::<Result<Vec<_>, _>>()?;
    let (heat, out) = tileinfer::composite_cams(&img, &tensors, exec)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    out.save_with_format(&a.out, image::ImageFormat::Png)
        .with_context(|| format!("writing {}", a.out.display()))?;
    let peak = heat.values.iter().copied().fold(0.0, f64::max);
    let h = header(
        None,
        json!({ "alpha": tileinfer::CAM_ALPHA, "tensors": files, "image": a.image }),
    );
    write_json(
        &a.out.with_extension("json"),
        &json!({ "header": h, "windows": tensors.iter().map(|t| t.window).collect::<Vec<_>>(), "normalized_peak": peak }),
    )?;
    println!("{} windows composited into {}", tensors.len(), a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct ServeArgs {
    #[command(flatten)]
    store: StoreArg,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Root of the image and overlay files named in sessions.
    #[arg(long, default_value = ".")]
    assets: PathBuf,
    /// Static UI bundle served at /.
    #[arg(long)]
    ui: Option<PathBuf>,
    /// Session spec to create before serving.
    #[arg(long)]
    session: Option<PathBuf>,
}

fn read_spec(p: &Path) -> Result<SessionSpec, CliError> {
    require_file(p, "session spec")?;
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
}

pub fn review_serve(a: ServeArgs) -> CliResult {
    require_dir(&a.assets, "asset root")?;
    if let Some(ui) = &a.ui {
        require_dir(ui, "UI bundle")?;
    }
    let addr: std::net::SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| usage(format!("bad address {}:{}: {e}", a.host, a.port)))?;
    let spec = a.session.as_deref().map(read_spec).transpose()?;
    let mut store = ReviewStore::open(&a.store.store)?;
    if let Some(spec) = spec {
        let s = store.create_session(&spec, Some(&a.assets), &hic_reviewsvc::now_rfc3339())?;
        println!("session {}", s.session_id);
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = hic_reviewsvc::bind(addr).await?;
        println!("listening on http://{}", listener.local_addr()?);
        let state = hic_reviewsvc::AppState::new(store, a.assets.clone());
        hic_reviewsvc::serve(listener, state, a.ui.clone(), hic_reviewsvc::shutdown_signal()).await?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(())
}

#[derive(Args)]
pub struct CreateArgs {
    #[command(flatten)]
    store: StoreArg,
    /// Session spec JSON: run_a, run_b, images.
    #[arg(long)]
    spec: PathBuf,
    /// Check that every asset exists under this root.
    #[arg(long)]
    assets: Option<PathBuf>,
}

pub fn review_create(a: CreateArgs) -> CliResult {
    let spec = read_spec(&a.spec)?;
    spec.validate().map_err(usage)?;
    if let Some(root) = &a.assets {
        require_dir(root, "asset root")?;
    }
    let mut store = ReviewStore::open(&a.store.store)?;
    let s = store.create_session(&spec, a.assets.as_deref(), &hic_reviewsvc::now_rfc3339())?;
    println!("{}", s.session_id);
    Ok(())
}

#[derive(Args)]
pub struct TallyArgs {
    #[command(flatten)]
    store: StoreArg,
    /// Session id as printed by `review create`.
    #[arg(long)]
    session: String,
    /// Also write the tally with a provenance header here.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn review_tally(a: TallyArgs) -> CliResult {
    require_dir(&a.store.store, "review store")?;
    let store = ReviewStore::open(&a.store.store)?;
    let t = store.tally(&a.session)?;
    println!("{}", serde_json::to_string_pretty(&t)?);
    if let Some(out) = &a.out {
        let h = header(None, json!({ "session": a.session }));
        write_json(out, &json!({ "header": h, "tally": t }))?;
    }
    Ok(())
}
