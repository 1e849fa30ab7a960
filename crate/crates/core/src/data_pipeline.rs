//! Dataset curation: OCR-record filtering, caption templating, synthetic
//! sample generation, corpus statistics, and shard serialization.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glyph_assets::{
    empty_mask, rasterize_mask, render_glyph, stamp_text, GlyphAtlas, GlyphImage, LocationMask,
    QuadRegion,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Zh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub text: String,
    pub quad: QuadRegion,
    pub confidence: f64,
}

/// One annotated input record, as produced by an OCR detector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OcrRecord {
    pub image_path: String,
    pub caption: String,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterConfig {
    pub min_confidence: f64,
    /// Quad area divided by character count, as a fraction of image area.
    pub min_char_area_frac: f64,
    /// Distance of the quad center from every edge, as a fraction of
    /// width/height.
    pub min_edge_margin_frac: f64,
    pub max_text_regions: usize,
    pub char_blacklist: BTreeSet<char>,
    pub keyword_blacklist: Vec<String>,
    pub language: Language,
}

/// The easily-misidentified Chinese character list.
pub const CHINESE_CHAR_BLACKLIST: &str = "米口回人王川大美三丰区中十田山一下个门八小品具工";

/// Common e-commerce advertisement terms.
pub const CHINESE_AD_KEYWORDS: &[&str] = &[
    "厂价", "直销", "包邮", "包赔", "立减", "清仓", "买1", "买一", "已售", "客服", "拍下",
    "改价", "开票", "厂家", "质保", "超值", "礼包", "限时", "全赔", "系列", "新品",
];

impl FilterConfig {
    pub fn default_chinese() -> Self {
        FilterConfig {
            min_confidence: 0.8,
            min_char_area_frac: 0.007,
            min_edge_margin_frac: 0.10,
            max_text_regions: 1,
            char_blacklist: CHINESE_CHAR_BLACKLIST.chars().collect(),
            keyword_blacklist: CHINESE_AD_KEYWORDS.iter().map(|s| s.to_string()).collect(),
            language: Language::Zh,
        }
    }

    pub fn default_english() -> Self {
        FilterConfig {
            min_confidence: 0.8,
            min_char_area_frac: 0.002,
            min_edge_margin_frac: 0.10,
            max_text_regions: 1,
            char_blacklist: BTreeSet::new(),
            keyword_blacklist: Vec::new(),
            language: Language::En,
        }
    }

    /// Permissive defaults for the synthetic bitmap-alphabet corpus: no
    /// one-letter rule, tiny size floor.
    pub fn default_synthetic() -> Self {
        FilterConfig {
            min_confidence: 0.8,
            min_char_area_frac: 0.002,
            min_edge_margin_frac: 0.10,
            max_text_regions: 1,
            char_blacklist: BTreeSet::new(),
            keyword_blacklist: Vec::new(),
            language: Language::Zh,
        }
    }

    fn validate(&self) -> Result<()> {
        let fracs_ok = (0.0..1.0).contains(&self.min_char_area_frac)
            && (0.0..1.0).contains(&self.min_edge_margin_frac)
            && self.min_char_area_frac > 0.0
            && self.min_edge_margin_frac > 0.0;
        if !fracs_ok {
            return Err(Error::Config("filter fractions must lie in (0, 1)".into()));
        }
        if self.max_text_regions < 1 {
            return Err(Error::Config("max_text_regions must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FilterOutcome {
    Accept(Detection),
    Reject(&'static str),
}

/// Apply the filtering rules in the fixed order
/// confidence -> multi_text -> char_size -> edge_margin -> blacklist ->
/// keyword, so every reject carries the first failing rule.
pub fn filter_record(
    rec: &OcrRecord,
    cfg: &FilterConfig,
    image_size: (usize, usize),
) -> Result<FilterOutcome> {
    cfg.validate()?;
    let (ih, iw) = (image_size.0 as f64, image_size.1 as f64);
    for d in &rec.detections {
        d.quad
            .validate()
            .map_err(|e| Error::MalformedRecord(format!("{}: {e}", rec.image_path)))?;
        if !d.quad.within_bounds(image_size.0, image_size.1) {
            return Err(Error::MalformedRecord(format!(
                "{}: quad outside image bounds",
                rec.image_path
            )));
        }
        if !(0.0..=1.0).contains(&d.confidence) {
            return Err(Error::MalformedRecord(format!(
                "{}: confidence {} outside [0, 1]",
                rec.image_path, d.confidence
            )));
        }
    }
    let surviving: Vec<&Detection> = rec
        .detections
        .iter()
        .filter(|d| d.confidence >= cfg.min_confidence)
        .collect();
    if surviving.is_empty() {
        return Ok(FilterOutcome::Reject("confidence"));
    }
    if surviving.len() > cfg.max_text_regions {
        return Ok(FilterOutcome::Reject("multi_text"));
    }
    let det = surviving[0];
    let n_chars = det.text.chars().count();
    if n_chars == 0 {
        return Err(Error::MalformedRecord(format!(
            "{}: empty detection text",
            rec.image_path
        )));
    }
    let per_char_area = det.quad.area() / n_chars as f64;
    if per_char_area < cfg.min_char_area_frac * ih * iw {
        return Ok(FilterOutcome::Reject("char_size"));
    }
    let (cx, cy) = det.quad.center();
    let mx = cfg.min_edge_margin_frac * iw;
    let my = cfg.min_edge_margin_frac * ih;
    if cx < mx || cx > iw - mx || cy < my || cy > ih - my {
        return Ok(FilterOutcome::Reject("edge_margin"));
    }
    let only_blacklisted = det.text.chars().all(|c| cfg.char_blacklist.contains(&c));
    let one_letter = cfg.language == Language::En && n_chars < 2;
    if (only_blacklisted && !cfg.char_blacklist.is_empty()) || one_letter {
        return Ok(FilterOutcome::Reject("blacklist"));
    }
    let caption_hit = cfg.keyword_blacklist.iter().any(|k| rec.caption.contains(k));
    // website-watermark approximation: link fragments inside detected text
    let watermark = det.text.contains("www.") || det.text.contains(".com");
    if caption_hit || watermark {
        return Ok(FilterOutcome::Reject("keyword"));
    }
    Ok(FilterOutcome::Accept(det.clone()))
}

/// Embed `text` in quotation marks inside the caption; idempotent.
pub fn make_caption(base_caption: &str, text: &str, _language: Language) -> String {
    if text.is_empty() {
        return base_caption.to_string();
    }
    let quoted = format!("\"{text}\"");
    if base_caption.contains(&quoted) {
        return base_caption.to_string();
    }
    format!("{base_caption}, with the text {quoted}")
}

/// Fully consistent training record: image, caption, target text, quad, and
/// the derived glyph image and location mask.
#[derive(Debug, Clone)]
pub struct TextSample {
    /// (3, H, W) in [0, 1]
    pub image: Array3<f64>,
    pub caption: String,
    pub text: String,
    /// `None` for a no-text sample (implies an all-ones mask).
    pub quad: Option<QuadRegion>,
    pub glyph: GlyphImage,
    pub mask: LocationMask,
    pub language: Language,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundKind {
    Gradient,
    Blobs,
    Stripes,
}

impl BackgroundKind {
    pub fn from_id(id: u32) -> Self {
        match id % 3 {
            0 => BackgroundKind::Gradient,
            1 => BackgroundKind::Blobs,
            _ => BackgroundKind::Stripes,
        }
    }

    fn describe(&self) -> &'static str {
        match self {
            BackgroundKind::Gradient => "a smooth color gradient backdrop",
            BackgroundKind::Blobs => "soft colorful blobs on a plain wall",
            BackgroundKind::Stripes => "a wall with wide diagonal stripes",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub margin_frac: f64,
    /// Maximum |offset| of the stamped block from the canvas center, per axis.
    pub max_jitter: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig { margin_frac: 0.10, max_jitter: 2 }
    }
}

fn procedural_background(
    rng: &mut ChaCha8Rng,
    kind: BackgroundKind,
    h: usize,
    w: usize,
) -> Array3<f64> {
    let mut img = Array3::<f64>::zeros((3, h, w));
    match kind {
        BackgroundKind::Gradient => {
            let a: [f64; 3] = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
            let b: [f64; 3] = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
            let horizontal = rng.gen_bool(0.5);
            for c in 0..3 {
                for i in 0..h {
                    for j in 0..w {
                        let t = if horizontal { j as f64 / (w - 1) as f64 } else { i as f64 / (h - 1) as f64 };
                        img[[c, i, j]] = a[c] * (1.0 - t) + b[c] * t;
                    }
                }
            }
        }
        BackgroundKind::Blobs => {
            let base: [f64; 3] = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
            let n_blobs = rng.gen_range(2..5);
            let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..n_blobs)
                .map(|_| {
                    (
                        rng.gen_range(0.0..w as f64),
                        rng.gen_range(0.0..h as f64),
                        rng.gen_range(0.15..0.4) * w as f64,
                        [rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25)],
                    )
                })
                .collect();
            for c in 0..3 {
                for i in 0..h {
                    for j in 0..w {
                        let mut v = base[c];
                        for (bx, by, r, dc) in &blobs {
                            let d2 = (j as f64 - bx).powi(2) + (i as f64 - by).powi(2);
                            v += dc[c] * (-d2 / (2.0 * r * r)).exp();
                        }
                        img[[c, i, j]] = v.clamp(0.05, 0.95);
                    }
                }
            }
        }
        BackgroundKind::Stripes => {
            let a: [f64; 3] = [rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)];
            let b: [f64; 3] = [rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)];
            let period = rng.gen_range(6..14) as f64;
            let phase = rng.gen_range(0.0..period);
            for c in 0..3 {
                for i in 0..h {
                    for j in 0..w {
                        let s = ((i + j) as f64 + phase) / period;
                        let t = 0.5 + 0.5 * (s * std::f64::consts::TAU).sin();
                        img[[c, i, j]] = a[c] * (1.0 - t) + b[c] * t;
                    }
                }
            }
        }
    }
    img
}

/// Compose a procedural background and stamp `text` at a jittered,
/// margin-respecting position. Deterministic per seed.
pub fn synthesize_sample(
    seed: u64,
    canvas: (usize, usize),
    text: &str,
    background: BackgroundKind,
    atlas: &GlyphAtlas,
    cfg: &SynthesisConfig,
) -> Result<TextSample> {
    let (h, w) = canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = procedural_background(&mut rng, background, h, w);
    let caption = make_caption(background.describe(), text, Language::Zh);
    let glyph = render_glyph(text, canvas, atlas)?;
    if text.is_empty() {
        return Ok(TextSample {
            image,
            caption,
            text: String::new(),
            quad: None,
            glyph,
            mask: empty_mask(canvas),
            language: Language::Zh,
        });
    }
    let (ch, cw) = atlas.cell_size();
    let n = text.chars().count();
    let (bh, bw) = (ch, n * cw);
    if bh > h || bw > w {
        return Err(Error::Shape(format!("text {text:?} does not fit {h}x{w}")));
    }
    // jitter around the centered placement, clamped so the quad center stays
    // behind the edge margins
    let cy0 = (h - bh) / 2;
    let cx0 = (w - bw) / 2;
    let jmax = cfg.max_jitter as i64;
    let my = (cfg.margin_frac * h as f64).ceil() as i64;
    let mx = (cfg.margin_frac * w as f64).ceil() as i64;
    let y0 = (cy0 as i64 + rng.gen_range(-jmax..=jmax))
        .clamp(my.min(cy0 as i64).max(0), (h as i64 - bh as i64).min(cy0 as i64 + jmax));
    let x0 = (cx0 as i64 + rng.gen_range(-jmax..=jmax))
        .clamp(mx.min(cx0 as i64).max(0), (w as i64 - bw as i64).min(cx0 as i64 + jmax));
    let (y0, x0) = (y0 as usize, x0 as usize);
    let quad = QuadRegion::axis_aligned(x0 as f64, y0 as f64, (x0 + bw) as f64, (y0 + bh) as f64);
    // lighten the sign area, then stamp dark ink
    let ink = rng.gen_range(0.0..0.12);
    let plate = rng.gen_range(0.82..0.95);
    let mut panel = Array2::<f64>::from_elem((bh, bw), 1.0);
    stamp_text(&mut panel.view_mut(), text, (0, 0), atlas)?;
    for c in 0..3 {
        for i in 0..bh {
            for j in 0..bw {
                let g = panel[[i, j]];
                let v = if g >= 1.0 { plate } else { ink };
                image[[c, y0 + i, x0 + j]] = v;
            }
        }
    }
    let mask = rasterize_mask(&quad, canvas)?;
    Ok(TextSample {
        image,
        caption,
        text: text.to_string(),
        quad: Some(quad),
        glyph,
        mask,
        language: Language::Zh,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub count: usize,
    pub total_chars: usize,
    pub unique_chars: usize,
    pub mean_chars_per_sample: f64,
}

pub fn corpus_stats<'a>(texts: impl IntoIterator<Item = &'a str>) -> CorpusStats {
    let mut count = 0usize;
    let mut total = 0usize;
    let mut unique = BTreeSet::new();
    for t in texts {
        count += 1;
        for c in t.chars() {
            total += 1;
            unique.insert(c);
        }
    }
    CorpusStats {
        count,
        total_chars: total,
        unique_chars: unique.len(),
        mean_chars_per_sample: if count == 0 { 0.0 } else { total as f64 / count as f64 },
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShardMetaRow {
    pub id: usize,
    pub caption: String,
    pub text: String,
    pub quad: Option<QuadRegion>,
    pub language: Language,
}

/// Write a shard directory: `samples/NNNN.png`, `glyphs/NNNN.png`,
/// `masks/NNNN.png`, `meta.jsonl`, `stats.json`.
pub fn write_shard(dir: &Path, samples: &[TextSample]) -> Result<CorpusStats> {
    for sub in ["samples", "glyphs", "masks"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    let mut meta = std::io::BufWriter::new(std::fs::File::create(dir.join("meta.jsonl"))?);
    for (id, s) in samples.iter().enumerate() {
        save_rgb_png(&s.image, &dir.join(format!("samples/{id:04}.png")))?;
        crate::glyph_assets::save_gray_png(&s.glyph.pixels, &dir.join(format!("glyphs/{id:04}.png")))?;
        crate::glyph_assets::save_gray_png(&s.mask.pixels, &dir.join(format!("masks/{id:04}.png")))?;
        let row = ShardMetaRow {
            id,
            caption: s.caption.clone(),
            text: s.text.clone(),
            quad: s.quad,
            language: s.language,
        };
        writeln!(meta, "{}", serde_json::to_string(&row)?)?;
    }
    meta.flush()?;
    let stats = corpus_stats(samples.iter().map(|s| s.text.as_str()));
    std::fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&stats)?)?;
    Ok(stats)
}

pub fn read_shard(dir: &Path) -> Result<Vec<TextSample>> {
    let meta = std::fs::read_to_string(dir.join("meta.jsonl"))?;
    let mut out = Vec::new();
    for line in meta.lines().filter(|l| !l.trim().is_empty()) {
        let row: ShardMetaRow = serde_json::from_str(line)?;
        let image = load_rgb_png(&dir.join(format!("samples/{:04}.png", row.id)))?;
        let glyph_px =
            crate::glyph_assets::load_gray_png(&dir.join(format!("glyphs/{:04}.png", row.id)))?;
        let mask_px =
            crate::glyph_assets::load_gray_png(&dir.join(format!("masks/{:04}.png", row.id)))?;
        out.push(TextSample {
            image,
            caption: row.caption,
            text: row.text.clone(),
            quad: row.quad,
            glyph: GlyphImage { pixels: glyph_px, text: row.text },
            mask: LocationMask { pixels: mask_px.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 }) },
            language: row.language,
        });
    }
    Ok(out)
}

pub fn save_rgb_png(img: &Array3<f64>, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = [
                (img[[0, i, j]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[1, i, j]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[2, i, j]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(j as u32, i as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_rgb_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let mut a = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            a[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(a)
}
