//! Mask and box geometry: rasterization, run-length encoding, areas and IoU.
//!
//! Pixel `(c, r)` covers the unit square `[c, c+1) x [r, r+1)` and is
//! sampled at its center `(c + 0.5, r + 0.5)`. Polygon rings are filled with
//! the even-odd rule on pixel centers, rings of one mask are unioned.
//!
//! Run-length counts follow the COCO convention: column-major order, the
//! first count is background (possibly zero), counts alternate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("polygon ring {ring} has {len} coordinates; need an even count of at least 6")]
    MalformedPolygon { ring: usize, len: usize },
    #[error("RLE counts sum to {sum} but a {height}x{width} mask has {expected} pixels")]
    RleSumMismatch {
        sum: u64,
        expected: u64,
        height: u32,
        width: u32,
    },
    #[error("dimension mismatch: {left_h}x{left_w} vs {right_h}x{right_w}")]
    DimensionMismatch {
        left_h: u32,
        left_w: u32,
        right_h: u32,
        right_w: u32,
    },
    #[error("invalid compressed RLE string at byte {0}")]
    BadRleString(usize),
}

/// Axis-aligned box in COCO `[x, y, w, h]` layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x.is_finite() && self.y.is_finite()
    }

    /// True when the box lies inside a `width x height` image, allowing `tol` pixels of slack.
    pub fn within(&self, width: u32, height: u32, tol: f64) -> bool {
        self.x >= -tol
            && self.y >= -tol
            && self.x2() <= width as f64 + tol
            && self.y2() <= height as f64 + tol
    }
}

/// Run-length counts or polygon rings describing one instance.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskEncoding {
    /// Flat `x0, y0, x1, y1, ...` vertex lists, one per ring.
    Polygons(Vec<Vec<f64>>),
    /// Column-major counts starting with background.
    Rle(Vec<u32>),
}

/// An instance mask on a `height x width` image.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMask {
    pub encoding: MaskEncoding,
    pub height: u32,
    pub width: u32,
}

impl SegMask {
    pub fn polygons(rings: Vec<Vec<f64>>, height: u32, width: u32) -> Self {
        SegMask {
            encoding: MaskEncoding::Polygons(rings),
            height,
            width,
        }
    }

    pub fn rle(counts: Vec<u32>, height: u32, width: u32) -> Self {
        SegMask {
            encoding: MaskEncoding::Rle(counts),
            height,
            width,
        }
    }
}

/// Row-major boolean occupancy grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitGrid {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BitGrid {
    pub fn new(width: u32, height: u32) -> Self {
        BitGrid {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    /// Grid with the half-open pixel rectangle `[x0, x1) x [y0, y1)` set, clipped to the grid.
    pub fn from_rect(width: u32, height: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        let mut g = BitGrid::new(width, height);
        for y in y0.min(height)..y1.min(height) {
            for x in x0.min(width)..x1.min(width) {
                g.set(x, y, true);
            }
        }
        g
    }

    /// Builds a grid from row-major bits. Returns `None` if the length is wrong.
    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Option<Self> {
        (bits.len() == width as usize * height as usize).then_some(BitGrid {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let w = self.width as usize;
        self.bits[y as usize * w + x as usize] = v;
    }

    pub fn count_ones(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// In-place union. Grids must share dimensions.
    pub fn union_with(&mut self, other: &BitGrid) -> Result<(), GeomError> {
        check_dims(self, other)?;
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    fn fill_row_span(&mut self, row: u32, from: u32, to: u32) {
        let start = row as usize * self.width as usize;
        for b in &mut self.bits[start + from as usize..start + to as usize] {
            *b = true;
        }
    }
}

fn check_dims(a: &BitGrid, b: &BitGrid) -> Result<(), GeomError> {
    if a.width != b.width || a.height != b.height {
        return Err(GeomError::DimensionMismatch {
            left_h: a.height,
            left_w: a.width,
            right_h: b.height,
            right_w: b.width,
        });
    }
    Ok(())
}

/// Rasterizes a mask onto a `(height, width)` grid.
pub fn rasterize(mask: &SegMask, dims: (u32, u32)) -> Result<BitGrid, GeomError> {
    let (h, w) = dims;
    if (mask.height, mask.width) != (h, w) {
        return Err(GeomError::DimensionMismatch {
            left_h: mask.height,
            left_w: mask.width,
            right_h: h,
            right_w: w,
        });
    }
    match &mask.encoding {
        MaskEncoding::Polygons(rings) => rasterize_polygons(rings, h, w),
        MaskEncoding::Rle(counts) => rle_decode(counts, h, w),
    }
}

fn rasterize_polygons(rings: &[Vec<f64>], h: u32, w: u32) -> Result<BitGrid, GeomError> {
    for (i, ring) in rings.iter().enumerate() {
        if ring.len() % 2 != 0 || ring.len() < 6 {
            return Err(GeomError::MalformedPolygon {
                ring: i,
                len: ring.len(),
            });
        }
    }
    let mut grid = BitGrid::new(w, h);
    let mut crossings: Vec<f64> = Vec::new();
    for ring in rings {
        let n = ring.len() / 2;
        for row in 0..h {
            let py = row as f64 + 0.5;
            crossings.clear();
            let mut j = n - 1;
            for i in 0..n {
                let (xi, yi) = (ring[2 * i], ring[2 * i + 1]);
                let (xj, yj) = (ring[2 * j], ring[2 * j + 1]);
                if (yi > py) != (yj > py) {
                    crossings.push((xj - xi) * (py - yi) / (yj - yi) + xi);
                }
                j = i;
            }
            crossings.sort_by(f64::total_cmp);
            // A center px is inside iff an odd number of crossings lie strictly right of it,
            // i.e. px falls in [c[2k], c[2k+1]).
            for pair in crossings.chunks_exact(2) {
                let from = first_center_at_or_after(pair[0], w);
                let to = first_center_at_or_after(pair[1], w);
                if from < to {
                    grid.fill_row_span(row, from, to);
                }
            }
        }
    }
    Ok(grid)
}

/// Smallest column `c` in `0..=limit` with `c + 0.5 >= a`.
fn first_center_at_or_after(a: f64, limit: u32) -> u32 {
    if a.is_nan() || a <= 0.5 {
        return 0;
    }
    if a > limit as f64 {
        return limit;
    }
    let mut c = (a - 0.5).ceil().max(0.0) as u32;
    while c > 0 && (c - 1) as f64 + 0.5 >= a {
        c -= 1;
    }
    while c < limit && (c as f64 + 0.5) < a {
        c += 1;
    }
    c.min(limit)
}

/// Column-major RLE of a grid.
pub fn rle_encode(grid: &BitGrid) -> SegMask {
    let (w, h) = (grid.width, grid.height);
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for x in 0..w {
        for y in 0..h {
            let v = grid.get(x, y);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    SegMask::rle(counts, h, w)
}

/// Expands column-major RLE counts into a grid.
pub fn rle_decode(counts: &[u32], h: u32, w: u32) -> Result<BitGrid, GeomError> {
    let expected = h as u64 * w as u64;
    let sum: u64 = counts.iter().map(|&c| c as u64).sum();
    if sum != expected {
        return Err(GeomError::RleSumMismatch {
            sum,
            expected,
            height: h,
            width: w,
        });
    }
    let mut grid = BitGrid::new(w, h);
    let mut idx = 0u64;
    for (i, &c) in counts.iter().enumerate() {
        if i % 2 == 1 {
            for k in idx..idx + c as u64 {
                let x = (k / h as u64) as u32;
                let y = (k % h as u64) as u32;
                grid.set(x, y, true);
            }
        }
        idx += c as u64;
    }
    Ok(grid)
}

/// Decodes an RLE [`SegMask`]. Polygon masks are rasterized.
pub fn decode_mask(mask: &SegMask) -> Result<BitGrid, GeomError> {
    rasterize(mask, (mask.height, mask.width))
}

/// COCO compressed RLE string (the `counts` field produced by pycocotools).
pub fn rle_counts_to_string(counts: &[u32]) -> String {
    let mut out = String::new();
    for i in 0..counts.len() {
        let mut x = counts[i] as i64;
        if i > 2 {
            x -= counts[i - 2] as i64;
        }
        let mut more = true;
        while more {
            let mut c = (x & 0x1f) as u8;
            x >>= 5;
            more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                c |= 0x20;
            }
            out.push((c + 48) as char);
        }
    }
    out
}

/// Inverse of [`rle_counts_to_string`].
pub fn rle_counts_from_string(s: &str) -> Result<Vec<u32>, GeomError> {
    let bytes = s.as_bytes();
    let mut counts: Vec<u32> = Vec::new();
    let mut p = 0usize;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0u32;
        let mut more = true;
        while more {
            let b = *bytes.get(p).ok_or(GeomError::BadRleString(p))?;
            if !(48..48 + 64).contains(&b) || k > 12 {
                return Err(GeomError::BadRleString(p));
            }
            let c = (b - 48) as i64;
            x |= (c & 0x1f) << (5 * k);
            more = c & 0x20 != 0;
            p += 1;
            k += 1;
            if !more && c & 0x10 != 0 {
                x |= -1i64 << (5 * k);
            }
        }
        let m = counts.len();
        if m > 2 {
            x += counts[m - 2] as i64;
        }
        counts.push(u32::try_from(x).map_err(|_| GeomError::BadRleString(p))?);
    }
    Ok(counts)
}

/// Number of set pixels whose centers fall inside `window`.
pub fn mask_area_in_window(mask: &BitGrid, window: &BBox) -> u64 {
    let x0 = first_center_at_or_after(window.x, mask.width);
    let x1 = first_center_at_or_after(window.x2(), mask.width);
    let y0 = first_center_at_or_after(window.y, mask.height);
    let y1 = first_center_at_or_after(window.y2(), mask.height);
    let w = mask.width as usize;
    let mut n = 0u64;
    for y in y0..y1 {
        let row = &mask.bits[y as usize * w..(y as usize + 1) * w];
        n += row[x0 as usize..x1 as usize].iter().filter(|&&b| b).count() as u64;
    }
    n
}

/// IoU of two boxes under continuous-area semantics. Zero when the union is empty.
pub fn iou_bbox(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x.max(b.x)).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// IoU of two grids. Two empty grids have IoU 0.
pub fn iou_mask(a: &BitGrid, b: &BitGrid) -> Result<f64, GeomError> {
    check_dims(a, b)?;
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}
