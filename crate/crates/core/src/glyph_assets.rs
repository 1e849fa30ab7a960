//! Glyph rendering, quadrilateral location masks, and latent-resolution
//! resizing.
//!
//! Glyph images are grayscale with a pure-white (1.0) background and dark
//! strokes, text centered on the canvas. Location masks are binary: 0 inside
//! the text quadrilateral, 1 everywhere else, so an "empty" (no-text) mask is
//! all ones.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classic 5x7 bitmap font, A-Z then 0-9. Bit rows are written out as
/// string art so the shapes are reviewable in source.
const FONT_5X7: &[(char, [&str; 7])] = &[
    ('A', ["01110", "10001", "10001", "11111", "10001", "10001", "10001"]),
    ('B', ["11110", "10001", "10001", "11110", "10001", "10001", "11110"]),
    ('C', ["01110", "10001", "10000", "10000", "10000", "10001", "01110"]),
    ('D', ["11110", "10001", "10001", "10001", "10001", "10001", "11110"]),
    ('E', ["11111", "10000", "10000", "11110", "10000", "10000", "11111"]),
    ('F', ["11111", "10000", "10000", "11110", "10000", "10000", "10000"]),
    ('G', ["01110", "10001", "10000", "10111", "10001", "10001", "01111"]),
    ('H', ["10001", "10001", "10001", "11111", "10001", "10001", "10001"]),
    ('I', ["01110", "00100", "00100", "00100", "00100", "00100", "01110"]),
    ('J', ["00111", "00010", "00010", "00010", "00010", "10010", "01100"]),
    ('K', ["10001", "10010", "10100", "11000", "10100", "10010", "10001"]),
    ('L', ["10000", "10000", "10000", "10000", "10000", "10000", "11111"]),
    ('M', ["10001", "11011", "10101", "10101", "10001", "10001", "10001"]),
    ('N', ["10001", "10001", "11001", "10101", "10011", "10001", "10001"]),
    ('O', ["01110", "10001", "10001", "10001", "10001", "10001", "01110"]),
    ('P', ["11110", "10001", "10001", "11110", "10000", "10000", "10000"]),
    ('Q', ["01110", "10001", "10001", "10001", "10101", "10010", "01101"]),
    ('R', ["11110", "10001", "10001", "11110", "10100", "10010", "10001"]),
    ('S', ["01111", "10000", "10000", "01110", "00001", "00001", "11110"]),
    ('T', ["11111", "00100", "00100", "00100", "00100", "00100", "00100"]),
    ('U', ["10001", "10001", "10001", "10001", "10001", "10001", "01110"]),
    ('V', ["10001", "10001", "10001", "10001", "10001", "01010", "00100"]),
    ('W', ["10001", "10001", "10001", "10101", "10101", "10101", "01010"]),
    ('X', ["10001", "10001", "01010", "00100", "01010", "10001", "10001"]),
    ('Y', ["10001", "10001", "01010", "00100", "00100", "00100", "00100"]),
    ('Z', ["11111", "00001", "00010", "00100", "01000", "10000", "11111"]),
    ('0', ["01110", "10001", "10011", "10101", "11001", "10001", "01110"]),
    ('1', ["00100", "01100", "00100", "00100", "00100", "00100", "01110"]),
    ('2', ["01110", "10001", "00001", "00010", "00100", "01000", "11111"]),
    ('3', ["11111", "00010", "00100", "00010", "00001", "10001", "01110"]),
    ('4', ["00010", "00110", "01010", "10010", "11111", "00010", "00010"]),
    ('5', ["11111", "10000", "11110", "00001", "00001", "10001", "01110"]),
    ('6', ["00110", "01000", "10000", "11110", "10001", "10001", "01110"]),
    ('7', ["11111", "00001", "00010", "00100", "01000", "01000", "01000"]),
    ('8', ["01110", "10001", "10001", "01110", "10001", "10001", "01110"]),
    ('9', ["01110", "10001", "10001", "01111", "00001", "00010", "01100"]),
];

/// Grayscale glyph image in [0,1]; background exactly 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphImage {
    pub pixels: Array2<f64>,
    pub text: String,
}

/// Quadrilateral in image pixel coordinates, corners (x, y) clockwise from
/// top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadRegion {
    pub corners: [[f64; 2]; 4],
}

/// Binary mask: 0 inside the quadrilateral, 1 outside.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationMask {
    pub pixels: Array2<f64>,
}

/// Bitmap glyph alphabet. Every glyph occupies a fixed cell, ink 0.0 on a
/// 1.0 background.
#[derive(Debug, Clone)]
pub struct GlyphAtlas {
    glyphs: BTreeMap<char, Array2<f64>>,
    cell_h: usize,
    cell_w: usize,
}

impl GlyphAtlas {
    /// Atlas over a subset of the built-in A-Z0-9 alphabet. Glyphs sit in a
    /// (cell_h, cell_w) cell with one pixel of padding around the 5x7 bitmap.
    pub fn builtin(charset: &str) -> Result<Self> {
        let cell_h = 9;
        let cell_w = 7;
        let mut glyphs = BTreeMap::new();
        for c in charset.chars() {
            let rows = FONT_5X7
                .iter()
                .find(|(fc, _)| *fc == c)
                .map(|(_, r)| r)
                .ok_or(Error::UnsupportedGlyph(c))?;
            let mut cell = Array2::<f64>::ones((cell_h, cell_w));
            for (i, row) in rows.iter().enumerate() {
                for (j, bit) in row.chars().enumerate() {
                    if bit == '1' {
                        cell[[i + 1, j + 1]] = 0.0;
                    }
                }
            }
            glyphs.insert(c, cell);
        }
        if glyphs.is_empty() {
            return Err(Error::Constraint("empty atlas charset".into()));
        }
        Ok(GlyphAtlas { glyphs, cell_h, cell_w })
    }

    pub fn builtin_full() -> Self {
        Self::builtin("ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789").unwrap()
    }

    pub fn cell_size(&self) -> (usize, usize) {
        (self.cell_h, self.cell_w)
    }

    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.glyphs.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }

    pub fn glyph(&self, c: char) -> Option<&Array2<f64>> {
        self.glyphs.get(&c)
    }

    /// Directory of per-character PNGs plus an `index.json`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (c, cell) in &self.glyphs {
            let file = format!("U+{:04X}.png", *c as u32);
            save_gray_png(cell, &dir.join(&file))?;
            entries.push(AtlasIndexEntry { ch: *c, file });
        }
        let index = AtlasIndex {
            cell_h: self.cell_h,
            cell_w: self.cell_w,
            glyphs: entries,
        };
        std::fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let index: AtlasIndex =
            serde_json::from_str(&std::fs::read_to_string(dir.join("index.json"))?)?;
        let mut glyphs = BTreeMap::new();
        for e in &index.glyphs {
            let cell = load_gray_png(&dir.join(&e.file))?;
            if cell.dim() != (index.cell_h, index.cell_w) {
                return Err(Error::Shape(format!(
                    "atlas glyph {:?} has cell {:?}, expected ({}, {})",
                    e.ch,
                    cell.dim(),
                    index.cell_h,
                    index.cell_w
                )));
            }
            glyphs.insert(e.ch, cell);
        }
        Ok(GlyphAtlas { glyphs, cell_h: index.cell_h, cell_w: index.cell_w })
    }
}

#[derive(Serialize, Deserialize)]
struct AtlasIndex {
    cell_h: usize,
    cell_w: usize,
    glyphs: Vec<AtlasIndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct AtlasIndexEntry {
    ch: char,
    file: String,
}

/// Render `text` centered on an (h, w) white canvas.
pub fn render_glyph(text: &str, canvas: (usize, usize), atlas: &GlyphAtlas) -> Result<GlyphImage> {
    let (h, w) = canvas;
    if h == 0 || w == 0 {
        return Err(Error::Shape("zero-sized glyph canvas".into()));
    }
    let mut pixels = Array2::<f64>::ones((h, w));
    let n = text.chars().count();
    if n == 0 {
        return Ok(GlyphImage { pixels, text: String::new() });
    }
    let (ch, cw) = atlas.cell_size();
    let block_w = n * cw;
    if block_w > w || ch > h {
        return Err(Error::Shape(format!(
            "text {:?} block {}x{} exceeds canvas {}x{}",
            text, ch, block_w, h, w
        )));
    }
    let y0 = (h - ch) / 2;
    let x0 = (w - block_w) / 2;
    stamp_text(&mut pixels.view_mut(), text, (y0, x0), atlas)?;
    Ok(GlyphImage { pixels, text: text.to_string() })
}

/// Copy glyph cells for `text` into `target` with the block's top-left at
/// `(y0, x0)`. Used both by `render_glyph` and by the dataset synthesizer.
pub fn stamp_text(
    target: &mut ndarray::ArrayViewMut2<f64>,
    text: &str,
    top_left: (usize, usize),
    atlas: &GlyphAtlas,
) -> Result<()> {
    let (ch, cw) = atlas.cell_size();
    let (y0, x0) = top_left;
    for (k, c) in text.chars().enumerate() {
        let cell = atlas.glyph(c).ok_or(Error::UnsupportedGlyph(c))?;
        for i in 0..ch {
            for j in 0..cw {
                let v = cell[[i, j]];
                if v < 1.0 {
                    target[[y0 + i, x0 + k * cw + j]] = v;
                }
            }
        }
    }
    Ok(())
}

/// Glyph plane spatially composited into the location mask: a white canvas
/// with the text block stamped centered on the bounding box of the masked
/// (zero) region, clipped at the canvas edges. When the mask has no zero
/// pixels (all-ones / empty-text masks) the block is centered on the canvas,
/// like `render_glyph`. This gives the denoiser input channel a
/// location-aligned shape hint a small convolution kernel can act on; the
/// glyph *encoder* keeps consuming the plain centered rendering.
pub fn glyph_channel(
    text: &str,
    mask: &ndarray::Array2<f64>,
    atlas: &GlyphAtlas,
) -> Result<ndarray::Array2<f64>> {
    let (h, w) = mask.dim();
    let mut out = ndarray::Array2::<f64>::from_elem((h, w), 1.0);
    if text.is_empty() {
        return Ok(out);
    }
    let (ch, cw) = atlas.cell_size();
    let n = text.chars().count();
    let (bh, bw) = (ch as i64, (n * cw) as i64);
    let (mut y0, mut y1, mut x0, mut x1) = (i64::MAX, i64::MIN, i64::MAX, i64::MIN);
    for i in 0..h {
        for j in 0..w {
            if mask[[i, j]] < 0.5 {
                y0 = y0.min(i as i64);
                y1 = y1.max(i as i64);
                x0 = x0.min(j as i64);
                x1 = x1.max(j as i64);
            }
        }
    }
    if y0 > y1 {
        (y0, x0, y1, x1) = (0, 0, h as i64 - 1, w as i64 - 1);
    }
    let ty = y0 + ((y1 - y0 + 1) - bh) / 2;
    let tx = x0 + ((x1 - x0 + 1) - bw) / 2;
    for (k, c) in text.chars().enumerate() {
        let cell = atlas.glyph(c).ok_or(Error::UnsupportedGlyph(c))?;
        for i in 0..ch {
            for j in 0..cw {
                let v = cell[[i, j]];
                if v < 1.0 {
                    let yy = ty + i as i64;
                    let xx = tx + (k * cw + j) as i64;
                    if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                        out[[yy as usize, xx as usize]] = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

impl QuadRegion {
    pub fn axis_aligned(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        QuadRegion { corners: [[x0, y0], [x1, y0], [x1, y1], [x0, y1]] }
    }

    /// Shoelace area (absolute).
    pub fn area(&self) -> f64 {
        let c = &self.corners;
        let mut s = 0.0;
        for i in 0..4 {
            let j = (i + 1) % 4;
            s += c[i][0] * c[j][1] - c[j][0] * c[i][1];
        }
        s.abs() / 2.0
    }

    pub fn center(&self) -> (f64, f64) {
        let cx = self.corners.iter().map(|p| p[0]).sum::<f64>() / 4.0;
        let cy = self.corners.iter().map(|p| p[1]).sum::<f64>() / 4.0;
        (cx, cy)
    }

    /// Valid: positive area and simple (no two non-adjacent edges intersect).
    pub fn validate(&self) -> Result<()> {
        if self.area() < 1e-9 {
            return Err(Error::DegenerateRegion("zero area quad".into()));
        }
        let c = &self.corners;
        let edges: Vec<([f64; 2], [f64; 2])> =
            (0..4).map(|i| (c[i], c[(i + 1) % 4])).collect();
        // only the two diagonal edge pairs are non-adjacent in a quad
        for (i, j) in [(0usize, 2usize), (1, 3)] {
            if segments_properly_intersect(edges[i].0, edges[i].1, edges[j].0, edges[j].1) {
                return Err(Error::DegenerateRegion("self-intersecting quad".into()));
            }
        }
        Ok(())
    }

    pub fn within_bounds(&self, h: usize, w: usize) -> bool {
        self.corners.iter().all(|p| {
            p[0] >= 0.0 && p[0] <= w as f64 && p[1] >= 0.0 && p[1] <= h as f64
        })
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn segments_properly_intersect(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

fn on_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> bool {
    let d = cross(a, b, p);
    if d.abs() > 1e-9 {
        return false;
    }
    p[0] >= a[0].min(b[0]) - 1e-9
        && p[0] <= a[0].max(b[0]) + 1e-9
        && p[1] >= a[1].min(b[1]) - 1e-9
        && p[1] <= a[1].max(b[1]) + 1e-9
}

/// Even-odd test with the boundary counting as inside.
pub fn point_in_quad(p: [f64; 2], quad: &QuadRegion) -> bool {
    let c = &quad.corners;
    for i in 0..4 {
        if on_segment(p, c[i], c[(i + 1) % 4]) {
            return true;
        }
    }
    let mut inside = false;
    let (px, py) = (p[0], p[1]);
    for i in 0..4 {
        let (a, b) = (c[i], c[(i + 1) % 4]);
        if (a[1] > py) != (b[1] > py) {
            let xint = a[0] + (py - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if px < xint {
                inside = !inside;
            }
        }
    }
    inside
}

/// Rasterize a quad against an (h, w) grid: a pixel is 0 iff its center lies
/// inside the closed quadrilateral.
pub fn rasterize_mask(quad: &QuadRegion, size: (usize, usize)) -> Result<LocationMask> {
    quad.validate()?;
    let (h, w) = size;
    let mut pixels = Array2::<f64>::ones((h, w));
    for i in 0..h {
        for j in 0..w {
            let p = [j as f64 + 0.5, i as f64 + 0.5];
            if point_in_quad(p, quad) {
                pixels[[i, j]] = 0.0;
            }
        }
    }
    Ok(LocationMask { pixels })
}

/// All-ones mask: "no text anywhere".
pub fn empty_mask(size: (usize, usize)) -> LocationMask {
    LocationMask { pixels: Array2::ones(size) }
}

impl LocationMask {
    pub fn is_all_ones(&self) -> bool {
        self.pixels.iter().all(|&v| v == 1.0)
    }
}

/// Area-average downsampling for glyph planes; output stays in [0,1].
pub fn glyph_to_latent(img: &GlyphImage, factor: usize) -> Result<GlyphImage> {
    let down = area_downsample(&img.pixels, factor)?;
    Ok(GlyphImage { pixels: down, text: img.text.clone() })
}

/// Nearest-neighbor downsampling (block top-left sample) followed by
/// re-binarization, so the result stays strictly in {0,1}.
pub fn mask_to_latent(mask: &LocationMask, factor: usize) -> Result<LocationMask> {
    let (h, w) = mask.pixels.dim();
    check_divisible(h, w, factor)?;
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            let v = mask.pixels[[i * factor, j * factor]];
            out[[i, j]] = if v >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    Ok(LocationMask { pixels: out })
}

fn check_divisible(h: usize, w: usize, factor: usize) -> Result<()> {
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!(
            "downsampling factor {factor} does not divide {h}x{w}"
        )));
    }
    Ok(())
}

pub fn area_downsample(a: &Array2<f64>, factor: usize) -> Result<Array2<f64>> {
    let (h, w) = a.dim();
    check_divisible(h, w, factor)?;
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Array2::<f64>::zeros((oh, ow));
    let inv = 1.0 / (factor * factor) as f64;
    for i in 0..oh {
        for j in 0..ow {
            let mut s = 0.0;
            for di in 0..factor {
                for dj in 0..factor {
                    s += a[[i * factor + di, j * factor + dj]];
                }
            }
            out[[i, j]] = s * inv;
        }
    }
    Ok(out)
}

/// Constraints for [`random_quad`]: every corner at least
/// `margin_frac * (w, h)` away from the respective edges, quad area at least
/// `min_area_frac` of the image.
#[derive(Debug, Clone, Copy)]
pub struct QuadConstraints {
    pub min_area_frac: f64,
    pub margin_frac: f64,
}

/// Seeded random simple quadrilateral satisfying the constraints.
pub fn random_quad(
    seed: u64,
    size: (usize, usize),
    constraints: QuadConstraints,
) -> Result<QuadRegion> {
    let (h, w) = (size.0 as f64, size.1 as f64);
    let mx = constraints.margin_frac * w;
    let my = constraints.margin_frac * h;
    let usable = (w - 2.0 * mx) * (h - 2.0 * my);
    if usable <= 0.0 || constraints.min_area_frac * w * h > usable {
        return Err(Error::Constraint(format!(
            "min area {} of image exceeds usable interior {}",
            constraints.min_area_frac,
            usable / (w * h)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..500 {
        let x0 = rng.gen_range(mx..w - mx);
        let x1 = rng.gen_range(mx..w - mx);
        let y0 = rng.gen_range(my..h - my);
        let y1 = rng.gen_range(my..h - my);
        let (xl, xr) = (x0.min(x1), x0.max(x1));
        let (yt, yb) = (y0.min(y1), y0.max(y1));
        // jitter the rectangle corners, clamped back into the margin box
        let jx = 0.1 * (xr - xl);
        let jy = 0.1 * (yb - yt);
        let mut corners = [[xl, yt], [xr, yt], [xr, yb], [xl, yb]];
        for p in corners.iter_mut() {
            p[0] = (p[0] + rng.gen_range(-jx..=jx)).clamp(mx, w - mx);
            p[1] = (p[1] + rng.gen_range(-jy..=jy)).clamp(my, h - my);
        }
        let quad = QuadRegion { corners };
        if quad.validate().is_ok() && quad.area() >= constraints.min_area_frac * w * h {
            return Ok(quad);
        }
    }
    Err(Error::Constraint(
        "no quad satisfying constraints found after 500 draws".into(),
    ))
}

pub fn save_gray_png(a: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = a.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let v = (a[[i, j]].clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(j as u32, i as u32, image::Luma([v]));
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_gray_png(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let mut a = Array2::<f64>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        a[[y as usize, x as usize]] = p.0[0] as f64 / 255.0;
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atlas() -> GlyphAtlas {
        GlyphAtlas::builtin_full()
    }

    #[test]
    fn empty_text_renders_white() {
        let g = render_glyph("", (64, 64), &atlas()).unwrap();
        assert!(g.pixels.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn glyph_block_is_centered() {
        let g = render_glyph("AB", (64, 64), &atlas()).unwrap();
        // bounding box of non-white pixels
        let mut min_i = usize::MAX;
        let mut max_i = 0;
        let mut min_j = usize::MAX;
        let mut max_j = 0;
        for ((i, j), &v) in g.pixels.indexed_iter() {
            if v < 1.0 {
                min_i = min_i.min(i);
                max_i = max_i.max(i);
                min_j = min_j.min(j);
                max_j = max_j.max(j);
            }
        }
        let ci = (min_i + max_i) as f64 / 2.0;
        let cj = (min_j + max_j) as f64 / 2.0;
        assert!((ci - 31.5).abs() <= 1.5, "row center {ci}");
        assert!((cj - 31.5).abs() <= 1.5, "col center {cj}");
    }

    #[test]
    fn render_is_deterministic() {
        let a = render_glyph("A", (64, 64), &atlas()).unwrap();
        let b = render_glyph("A", (64, 64), &atlas()).unwrap();
        assert_eq!(a.pixels, b.pixels);
    }

    #[test]
    fn unknown_character_errors() {
        match render_glyph("A?", (64, 64), &atlas()) {
            Err(Error::UnsupportedGlyph('?')) => {}
            other => panic!("expected UnsupportedGlyph, got {other:?}"),
        }
    }

    #[test]
    fn render_range_and_background_fraction() {
        let g = render_glyph("ABCDEFGH", (64, 64), &atlas()).unwrap();
        assert!(g.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let white = g.pixels.iter().filter(|&&v| v == 1.0).count();
        assert!(white as f64 / (64.0 * 64.0) >= 0.5);
    }

    #[test]
    fn full_cover_quad_is_all_zero() {
        let q = QuadRegion::axis_aligned(0.0, 0.0, 16.0, 16.0);
        let m = rasterize_mask(&q, (16, 16)).unwrap();
        assert!(m.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadrant_quad_covers_exactly_quadrant() {
        let (h, w) = (16usize, 16usize);
        let q = QuadRegion::axis_aligned(0.0, 0.0, 8.0, 8.0);
        let m = rasterize_mask(&q, (h, w)).unwrap();
        for i in 0..h {
            for j in 0..w {
                let expect = if i < 8 && j < 8 { 0.0 } else { 1.0 };
                assert_eq!(m.pixels[[i, j]], expect, "at ({i},{j})");
            }
        }
    }

    #[test]
    fn empty_mask_is_all_ones() {
        let m = empty_mask((8, 12));
        assert!(m.is_all_ones());
    }

    #[test]
    fn degenerate_quad_rejected() {
        let q = QuadRegion { corners: [[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [1.0, 1.0]] };
        assert!(matches!(rasterize_mask(&q, (8, 8)), Err(Error::DegenerateRegion(_))));
    }

    #[test]
    fn self_intersecting_quad_rejected() {
        // bowtie
        let q = QuadRegion { corners: [[0.0, 0.0], [4.0, 4.0], [4.0, 0.0], [0.0, 4.0]] };
        assert!(q.validate().is_err());
    }

    #[test]
    fn all_ones_mask_survives_downsampling() {
        let m = empty_mask((32, 32));
        let d = mask_to_latent(&m, 8).unwrap();
        assert!(d.is_all_ones());
        assert_eq!(d.pixels.dim(), (4, 4));
    }

    #[test]
    fn checkerboard_downsample_is_block_mean() {
        let mut px = Array2::<f64>::zeros((4, 4));
        for ((i, j), v) in px.indexed_iter_mut() {
            *v = if (i / 2 + j / 2) % 2 == 0 { 1.0 } else { 0.0 };
        }
        let g = GlyphImage { pixels: px.clone(), text: String::new() };
        let d = glyph_to_latent(&g, 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mean = px
                    .slice(ndarray::s![2 * i..2 * i + 2, 2 * j..2 * j + 2])
                    .mean()
                    .unwrap();
                assert_eq!(d.pixels[[i, j]], mean);
            }
        }
    }

    #[test]
    fn downsampled_mask_stays_binary() {
        let mut m = empty_mask((8, 8));
        m.pixels[[3, 3]] = 0.0;
        let d = mask_to_latent(&m, 2).unwrap();
        assert!(d.pixels.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn constant_image_stays_constant_after_downsampling() {
        let g = GlyphImage { pixels: Array2::from_elem((16, 16), 0.37), text: String::new() };
        let d = glyph_to_latent(&g, 4).unwrap();
        assert!(d.pixels.iter().all(|&v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn non_divisible_dims_error() {
        let g = GlyphImage { pixels: Array2::ones((10, 10)), text: String::new() };
        assert!(matches!(glyph_to_latent(&g, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn random_quad_is_deterministic() {
        let c = QuadConstraints { min_area_frac: 0.05, margin_frac: 0.1 };
        let a = random_quad(7, (32, 32), c).unwrap();
        let b = random_quad(7, (32, 32), c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_constraints_error() {
        let c = QuadConstraints { min_area_frac: 0.9, margin_frac: 0.1 };
        assert!(matches!(random_quad(1, (16, 16), c), Err(Error::Constraint(_))));
    }

    #[test]
    fn random_quads_respect_constraints() {
        let c = QuadConstraints { min_area_frac: 0.05, margin_frac: 0.1 };
        for seed in 0..1000 {
            let q = random_quad(seed, (32, 32), c).unwrap();
            assert!(q.area() >= 0.05 * 32.0 * 32.0);
            for p in &q.corners {
                assert!(p[0] >= 3.2 - 1e-9 && p[0] <= 28.8 + 1e-9);
                assert!(p[1] >= 3.2 - 1e-9 && p[1] <= 28.8 + 1e-9);
            }
        }
    }

    #[test]
    fn mask_area_matches_quad_area() {
        // mean(1 - mask) * image area == quad area, within one pixel row
        let c = QuadConstraints { min_area_frac: 0.05, margin_frac: 0.1 };
        for seed in 0..50 {
            let q = random_quad(seed + 100, (48, 48), c).unwrap();
            let m = rasterize_mask(&q, (48, 48)).unwrap();
            let covered: f64 = m.pixels.iter().map(|&v| 1.0 - v).sum();
            assert!(
                (covered - q.area()).abs() <= 48.0,
                "seed {seed}: covered {covered} vs area {}",
                q.area()
            );
        }
    }

    #[test]
    fn atlas_roundtrips_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let a = GlyphAtlas::builtin("ABC0").unwrap();
        a.save_dir(dir.path()).unwrap();
        let b = GlyphAtlas::load_dir(dir.path()).unwrap();
        assert_eq!(a.cell_size(), b.cell_size());
        for c in a.chars() {
            assert_eq!(a.glyph(c).unwrap(), b.glyph(c).unwrap());
        }
    }
}
