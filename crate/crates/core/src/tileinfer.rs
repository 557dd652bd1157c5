//! Tiled scoring of full images, confidence overlays, Grad-CAM and CAM
//! composites.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::Exec;
use crate::patchgen::{patch_grid, PatchConfig, PatchError, Window};

#[derive(Debug, Error)]
pub enum TileError {
    #[error("scorer failed on window ({x},{y},{w},{h}): {message}", x = .window.x, y = .window.y, w = .window.w, h = .window.h)]
    Protocol { window: Window, message: String },
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
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("image {width}x{height} is smaller than the {patch} px patch")]
    TooSmall { width: u32, height: u32, patch: u32 },
    #[error("tensor shape: {0}")]
    Shape(String),
    #[error("{path}: not a CAM tensor file: {message}")]
    Camt { path: PathBuf, message: String },
    #[error(transparent)]
    Config(#[from] PatchError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TileError + '_ {
    move |source| TileError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Scores one window of an image. Implementations must be safe to call
/// from several threads.
pub trait Scorer: Send + Sync {
    fn score(&self, image: &Path, window: &Window) -> Result<f64, String>;
}

pub struct ConstantScorer(pub f64);

impl Scorer for ConstantScorer {
    fn score(&self, _: &Path, _: &Window) -> Result<f64, String> {
        Ok(self.0)
    }
}

/// One line of a score recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub image: String,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub score: f64,
}

fn basename(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.to_string_lossy().into_owned())
}

/// Replays recorded scores, keyed by image file name and window.
pub struct FileScorer {
    scores: HashMap<(String, Window), f64>,
}

impl FileScorer {
    pub fn from_records(records: &[ScoreRecord]) -> Self {
        let scores = records
            .iter()
            .map(|r| {
                let key = (basename(Path::new(&r.image)), Window { x: r.x, y: r.y, w: r.w, h: r.h });
                (key, r.score)
            })
            .collect();
        FileScorer { scores }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, TileError> {
        Ok(Self::from_records(&read_score_records(path)?))
    }
}

impl Scorer for FileScorer {
    fn score(&self, image: &Path, window: &Window) -> Result<f64, String> {
        let name = basename(image);
        self.scores
            .get(&(name.clone(), *window))
            .copied()
            .ok_or_else(|| format!("no recorded score for `{name}`"))
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    image: &'a str,
    x: u32,
    y: u32,
    w: u32,
    h: u32,
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

struct Pipe {
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Talks to an external model process over stdin/stdout, one JSON request
/// and one JSON response per line. Requests are serialized.
pub struct SubprocessScorer {
    child: Mutex<Child>,
    pipe: Mutex<Pipe>,
}

impl SubprocessScorer {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, TileError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(io_err(Path::new(program)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(SubprocessScorer {
            child: Mutex::new(child),
            pipe: Mutex::new(Pipe { stdin, stdout }),
        })
    }
}

impl Scorer for SubprocessScorer {
    fn score(&self, image: &Path, window: &Window) -> Result<f64, String> {
        let req = ScoreRequest {
            image: &image.to_string_lossy(),
            x: window.x,
            y: window.y,
            w: window.w,
            h: window.h,
        };
        let mut line = serde_json::to_string(&req).map_err(|e| e.to_string())?;
        line.push('\n');
        let mut pipe = self.pipe.lock().map_err(|_| "scorer pipe poisoned".to_owned())?;
        pipe.stdin
            .write_all(line.as_bytes())
            .and_then(|_| pipe.stdin.flush())
            .map_err(|e| format!("write to scorer: {e}"))?;
        let mut reply = String::new();
        let n = pipe
            .stdout
            .read_line(&mut reply)
            .map_err(|e| format!("read from scorer: {e}"))?;
        if n == 0 {
            return Err("scorer closed its output".into());
        }
        let resp: ScoreResponse =
            serde_json::from_str(reply.trim_end()).map_err(|e| format!("bad response line `{}`: {e}", reply.trim_end()))?;
        Ok(resp.score)
    }
}

impl Drop for SubprocessScorer {
    fn drop(&mut self) {
        if let Ok(child) = self.child.get_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredWindow {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub score: f64,
}

impl ScoredWindow {
    pub fn window(&self) -> Window {
        Window {
            x: self.x,
            y: self.y,
            w: self.w,
            h: self.h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchScoreGrid {
    pub image: String,
    pub windows: Vec<ScoredWindow>,
    pub config: PatchConfig,
}

impl PatchScoreGrid {
    pub fn records(&self) -> Vec<ScoreRecord> {
        self.windows
            .iter()
            .map(|w| ScoreRecord {
                image: self.image.clone(),
                x: w.x,
                y: w.y,
                w: w.w,
                h: w.h,
                score: w.score,
            })
            .collect()
    }
}

/// Scores every window of `patch_grid(dims, cfg)` in row-major order.
pub fn score_windows(
    image: &Path,
    dims: (u32, u32),
    scorer: &dyn Scorer,
    cfg: &PatchConfig,
    exec: Exec,
) -> Result<PatchScoreGrid, TileError> {
    cfg.validate()?;
    let (height, width) = dims;
    if height < cfg.patch_size || width < cfg.patch_size {
        return Err(TileError::TooSmall {
            width,
            height,
            patch: cfg.patch_size,
        });
    }
    let grid = patch_grid(dims, cfg);
    let windows = exec.try_map(&grid, |win| {
        let score = scorer
            .score(image, win)
            .map_err(|message| TileError::Protocol { window: *win, message })?;
        if !(0.0..=1.0).contains(&score) {
            return Err(TileError::Protocol {
                window: *win,
                message: format!("score {score} outside [0,1]"),
            });
        }
        Ok(ScoredWindow {
            x: win.x,
            y: win.y,
            w: win.w,
            h: win.h,
            score,
        })
    })?;
    Ok(PatchScoreGrid {
        image: basename(image),
        windows,
        config: cfg.clone(),
    })
}

/// Reads the image size from disk and scores its windows.
pub fn score_image(image: &Path, scorer: &dyn Scorer, cfg: &PatchConfig, exec: Exec) -> Result<PatchScoreGrid, TileError> {
    let (w, h) = image::image_dimensions(image).map_err(|source| TileError::Image {
        path: image.to_owned(),
        source,
    })?;
    score_windows(image, (h, w), scorer, cfg, exec)
}

pub fn write_score_records(path: impl AsRef<Path>, records: &[ScoreRecord]) -> Result<(), TileError> {
    let path = path.as_ref();
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for r in records {
        let line = serde_json::to_string(r).expect("score record serializes");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn read_score_records(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>, TileError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| TileError::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub const MAGENTA: Rgb<u8> = Rgb([255, 0, 255]);
pub const BORDER_PX: u32 = 3;

// 5x7 glyphs, one byte per row, bit 4 = leftmost column.
const GLYPHS: [(char, [u8; 7]); 11] = [
    ('0', [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E]),
    ('1', [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E]),
    ('2', [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F]),
    ('3', [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E]),
    ('4', [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02]),
    ('5', [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E]),
    ('6', [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E]),
    ('7', [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08]),
    ('8', [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E]),
    ('9', [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C]),
    ('.', [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C]),
];

fn glyph(c: char) -> Option<&'static [u8; 7]> {
    GLYPHS.iter().find(|(g, _)| *g == c).map(|(_, rows)| rows)
}

/// Pixels set by `text` drawn at `(x0, y0)`, each font pixel `scale` px wide.
pub fn text_pixels(text: &str, x0: u32, y0: u32, scale: u32) -> Vec<(u32, u32)> {
    let mut out = Vec::new();
    for (i, c) in text.chars().enumerate() {
        let Some(rows) = glyph(c) else { continue };
        let gx = x0 + i as u32 * 6 * scale;
        for (ry, bits) in rows.iter().enumerate() {
            for rx in 0..5u32 {
                if bits & (0x10 >> rx) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        out.push((gx + rx * scale + dx, y0 + ry as u32 * scale + dy));
                    }
                }
            }
        }
    }
    out
}

/// Pixels of the `BORDER_PX` wide frame just inside `w`.
pub fn border_pixels(w: &Window) -> Vec<(u32, u32)> {
    let t = BORDER_PX.min(w.w).min(w.h);
    let mut out = Vec::new();
    for y in w.y..w.y + w.h {
        for x in w.x..w.x + w.w {
            let (dx, dy) = (x - w.x, y - w.y);
            if dx < t || dy < t || dx >= w.w - t || dy >= w.h - t {
                out.push((x, y));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlayStyle {
    pub tau: f64,
    /// Font magnification; 1 draws the 5x7 font at native size.
    pub text_scale: u32,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        OverlayStyle { tau: 0.5, text_scale: 2 }
    }
}

/// Frames every window whose score exceeds `tau` in magenta and writes the
/// score with two decimals in its upper-left corner. Nothing else changes.
pub fn render_overlay(image: &RgbImage, grid: &PatchScoreGrid, style: &OverlayStyle) -> RgbImage {
    let mut out = image.clone();
    let (iw, ih) = out.dimensions();
    let mut put = |(x, y): (u32, u32)| {
        if x < iw && y < ih {
            out.put_pixel(x, y, MAGENTA);
        }
    };
    for sw in grid.windows.iter().filter(|w| w.score > style.tau) {
        let win = sw.window();
        border_pixels(&win).into_iter().for_each(&mut put);
        let inset = BORDER_PX + 1;
        text_pixels(&format!("{:.2}", sw.score), win.x + inset, win.y + inset, style.text_scale.max(1))
            .into_iter()
            .for_each(&mut put);
    }
    out
}

/// Activations and score gradients of one window, each `k x hc x wc`,
/// row-major with the map index outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct CamTensors {
    pub k: usize,
    pub hc: usize,
    pub wc: usize,
    pub window: Window,
    pub activations: Vec<f32>,
    pub gradients: Vec<f32>,
}

impl CamTensors {
    pub fn validate(&self) -> Result<(), TileError> {
        if self.k == 0 || self.hc == 0 || self.wc == 0 {
            return Err(TileError::Shape(format!(
                "empty tensor (k={}, hc={}, wc={})",
                self.k, self.hc, self.wc
            )));
        }
        let n = self.k * self.hc * self.wc;
        if self.activations.len() != n || self.gradients.len() != n {
            return Err(TileError::Shape(format!(
                "expected {n} values per tensor, got {} activations and {} gradients",
                self.activations.len(),
                self.gradients.len()
            )));
        }
        if self.window.w == 0 || self.window.h == 0 {
            return Err(TileError::Shape("empty window".into()));
        }
        Ok(())
    }
}

/// Unnormalized, non-negative map of `height x width` values.
#[derive(Debug, Clone, PartialEq)]
pub struct CamMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl CamMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// `ReLU(sum_k alpha_k A_k)` with `alpha_k` the spatial mean of `G_k`, at
/// feature-map resolution.
pub fn gradcam_local(t: &CamTensors) -> Result<CamMap, TileError> {
    t.validate()?;
    let plane = t.hc * t.wc;
    let mut acc = vec![0.0f64; plane];
    for k in 0..t.k {
        let g = &t.gradients[k * plane..(k + 1) * plane];
        let alpha = g.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        let a = &t.activations[k * plane..(k + 1) * plane];
        for (dst, &v) in acc.iter_mut().zip(a) {
            *dst += alpha * v as f64;
        }
    }
    for v in &mut acc {
        *v = v.max(0.0);
    }
    Ok(CamMap {
        height: t.hc,
        width: t.wc,
        values: acc,
    })
}

/// Bilinear resize with pixel-center alignment and edge clamping.
pub fn upsample_bilinear(m: &CamMap, height: usize, width: usize) -> CamMap {
    let coord = |dst: usize, dst_len: usize, src_len: usize| {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, height, m.height);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, width, m.width);
            let top = m.get(y0, x0) * (1.0 - fx) + m.get(y0, x1) * fx;
            let bot = m.get(y1, x0) * (1.0 - fx) + m.get(y1, x1) * fx;
            values.push(top * (1.0 - fy) + bot * fy);
        }
    }
    CamMap { height, width, values }
}

/// Grad-CAM upsampled to the window size. Not normalized.
pub fn gradcam(t: &CamTensors) -> Result<CamMap, TileError> {
    let local = gradcam_local(t)?;
    Ok(upsample_bilinear(&local, t.window.h as usize, t.window.w as usize))
}

/// Whole-image map with values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: u32,
    pub width: u32,
    pub values: Vec<f64>,
}

/// Per-pixel maximum over overlapping windows, divided by the global
/// maximum. Pixels outside every window are 0; an all-zero map stays zero.
pub fn combine_cams(dims: (u32, u32), cams: &[(Window, CamMap)]) -> Heatmap {
    let (height, width) = dims;
    let mut values = vec![0.0f64; height as usize * width as usize];
    for (win, cam) in cams {
        for cy in 0..cam.height.min(win.h as usize) {
            let y = win.y as usize + cy;
            if y >= height as usize {
                break;
            }
            for cx in 0..cam.width.min(win.w as usize) {
                let x = win.x as usize + cx;
                if x >= width as usize {
                    break;
                }
                let dst = &mut values[y * width as usize + x];
                *dst = dst.max(cam.get(cy, cx));
            }
        }
    }
    let peak = values.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        for v in &mut values {
            *v /= peak;
        }
    }
    Heatmap { height, width, values }
}

const COLORMAP_STOPS: [[f64; 3]; 5] = [
    [0.0, 0.0, 255.0],
    [0.0, 255.0, 255.0],
    [0.0, 255.0, 0.0],
    [255.0, 255.0, 0.0],
    [255.0, 0.0, 0.0],
];

/// Blue, cyan, green, yellow, red at 0, .25, .5, .75, 1.
pub fn colormap(v: f64) -> [u8; 3] {
    let s = v.clamp(0.0, 1.0) * 4.0;
    let i = (s.floor() as usize).min(3);
    let f = s - i as f64;
    let (a, b) = (COLORMAP_STOPS[i], COLORMAP_STOPS[i + 1]);
    [0, 1, 2].map(|c| (a[c] + (b[c] - a[c]) * f).round() as u8)
}

pub const CAM_ALPHA: f64 = 0.5;

/// Colormapped heatmap alpha-blended over the image.
pub fn blend_heatmap(image: &RgbImage, heat: &Heatmap) -> RgbImage {
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let v = if x < heat.width && y < heat.height {
            heat.values[(y * heat.width + x) as usize]
        } else {
            0.0
        };
        let cm = colormap(v);
        for (dst, &m) in px.0.iter_mut().zip(&cm) {
            *dst = ((1.0 - CAM_ALPHA) * *dst as f64 + CAM_ALPHA * m as f64).round() as u8;
        }
    }
    out
}

/// Grad-CAM of every tensor set, combined over the image and blended.
pub fn composite_cams(image: &RgbImage, tensors: &[CamTensors], exec: Exec) -> Result<(Heatmap, RgbImage), TileError> {
    let cams = exec.try_map(tensors, |t| Ok::<_, TileError>((t.window, gradcam(t)?)))?;
    let (w, h) = image.dimensions();
    let heat = combine_cams((h, w), &cams);
    let out = blend_heatmap(image, &heat);
    Ok((heat, out))
}

pub const CAMT_MAGIC: &[u8; 4] = b"CAMT";
const CAMT_ORDER: &str = "activations_then_gradients";

#[derive(Serialize, Deserialize)]
struct CamtHeader {
    k: usize,
    hc: usize,
    wc: usize,
    window: [u32; 4],
    order: String,
}

pub fn encode_camt(t: &CamTensors) -> Result<Vec<u8>, TileError> {
    t.validate()?;
    let header = serde_json::to_vec(&CamtHeader {
        k: t.k,
        hc: t.hc,
        wc: t.wc,
        window: [t.window.x, t.window.y, t.window.w, t.window.h],
        order: CAMT_ORDER.into(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + 8 * t.activations.len());
    out.extend_from_slice(CAMT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in t.activations.iter().chain(&t.gradients) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_camt(bytes: &[u8], path: &Path) -> Result<CamTensors, TileError> {
    let bad = |message: String| TileError::Camt {
        path: path.to_owned(),
        message,
    };
    if bytes.len() < 8 || &bytes[..4] != CAMT_MAGIC {
        return Err(bad("missing CAMT magic bytes".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| bad(format!("header length {hlen} exceeds file size")))?;
    let h: CamtHeader = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    if h.order != CAMT_ORDER {
        return Err(bad(format!("unsupported tensor order `{}`", h.order)));
    }
    let n = h
        .k
        .checked_mul(h.hc)
        .and_then(|v| v.checked_mul(h.wc))
        .ok_or_else(|| bad("tensor size overflows".into()))?;
    let data = &bytes[8 + hlen..];
    if data.len() != 8 * n {
        return Err(bad(format!("expected {} data bytes, found {}", 8 * n, data.len())));
    }
    let floats: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let [x, y, w, hh] = h.window;
    let t = CamTensors {
        k: h.k,
        hc: h.hc,
        wc: h.wc,
        window: Window { x, y, w, h: hh },
        activations: floats[..n].to_vec(),
        gradients: floats[n..].to_vec(),
    };
    t.validate().map_err(|e| bad(e.to_string()))?;
    Ok(t)
}

pub fn write_camt(path: impl AsRef<Path>, t: &CamTensors) -> Result<(), TileError> {
    let path = path.as_ref();
    std::fs::write(path, encode_camt(t)?).map_err(io_err(path))
}

pub fn read_camt(path: impl AsRef<Path>) -> Result<CamTensors, TileError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_camt(&bytes, path)
}
