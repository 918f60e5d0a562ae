//! Catalog records: synthetic color-variant corpora and manifest ingestion.
//!
//! Each record carries an optional bounding box around its primary object.
//! Boxes come from the manifest (or from the generator), standing in for an
//! upstream object detector.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit RGB raster.
pub type Raster = RgbImage;

/// Minimum side of a usable crop.
pub const MIN_CROP_SIDE: u32 = 32;

/// Uniform light-gray catalog background.
pub const BACKGROUND: [u8; 3] = [224, 224, 224];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

/// Pixel box `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BoundingBox {
    pub fn full(width: u32, height: u32) -> Self {
        BoundingBox { x0: 0, y0: 0, x1: width, y1: height }
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    /// Checks `0 <= x0 < x1 <= width` and `0 <= y0 < y1 <= height`.
    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        if self.x0 >= self.x1 || self.x1 > width {
            return Err(Error::validation("bbox", format!("x range [{}, {}) outside image width {width}", self.x0, self.x1)));
        }
        if self.y0 >= self.y1 || self.y1 > height {
            return Err(Error::validation("bbox", format!("y range [{}, {}) outside image height {height}", self.y0, self.y1)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub id: String,
    pub pixels: Raster,
    pub bbox: Option<BoundingBox>,
    pub group_id: Option<String>,
    pub split: Split,
}

/// Returns the record's pixels restricted to its bounding box (the whole
/// image when no box is set). The box is clamped to the image first.
pub fn crop_primary(record: &ImageRecord) -> Result<Raster> {
    let (w, h) = record.pixels.dimensions();
    let Some(b) = record.bbox else {
        return Ok(record.pixels.clone());
    };
    let x1 = b.x1.min(w);
    let y1 = b.y1.min(h);
    if b.x0 >= x1 || b.y0 >= y1 {
        return Err(Error::DegenerateBox { id: record.id.clone() });
    }
    Ok(image::imageops::crop_imm(&record.pixels, b.x0, b.y0, x1 - b.x0, y1 - b.y0).to_image())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternFamily {
    Stripes,
    Diamonds,
    SplitPanel,
    FloralMotif,
    VerticalTextBand,
}

impl PatternFamily {
    pub const ALL: [PatternFamily; 5] = [
        PatternFamily::Stripes,
        PatternFamily::Diamonds,
        PatternFamily::SplitPanel,
        PatternFamily::FloralMotif,
        PatternFamily::VerticalTextBand,
    ];
}

/// Parameters of a synthetic color-variant corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_styles: usize,
    pub variants_per_style: usize,
    /// Canvas side length in pixels.
    pub canvas: u32,
    pub pattern_families: Vec<PatternFamily>,
    /// Hue rotations in degrees, one per variant.
    pub hue_set: Vec<f64>,
    pub seed: u64,
    /// The last `eval_styles` styles go to the eval split.
    pub eval_styles: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_styles: 20,
            variants_per_style: 4,
            canvas: 96,
            pattern_families: PatternFamily::ALL.to_vec(),
            hue_set: vec![0.0, 90.0, 180.0, 270.0],
            seed: 0,
            eval_styles: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_styles < 1 {
            return Err(Error::validation("n_styles", "must be at least 1"));
        }
        if self.variants_per_style < 1 {
            return Err(Error::validation("variants_per_style", "must be at least 1"));
        }
        if self.canvas < MIN_CROP_SIDE + 8 {
            return Err(Error::validation("canvas", format!("must be at least {} pixels", MIN_CROP_SIDE + 8)));
        }
        if self.pattern_families.is_empty() {
            return Err(Error::validation("pattern_families", "must not be empty"));
        }
        if self.hue_set.len() < self.variants_per_style {
            return Err(Error::validation(
                "hue_set",
                format!("{} hues cannot color {} variants", self.hue_set.len(), self.variants_per_style),
            ));
        }
        for (i, a) in self.hue_set.iter().enumerate() {
            if !a.is_finite() {
                return Err(Error::validation("hue_set", "entries must be finite"));
            }
            for b in &self.hue_set[..i] {
                if (a - b).rem_euclid(360.0) == 0.0 {
                    return Err(Error::validation("hue_set", format!("duplicate hue {a}")));
                }
            }
        }
        if self.eval_styles > self.n_styles {
            return Err(Error::validation("eval_styles", "exceeds n_styles"));
        }
        Ok(())
    }
}

/// A chromatic palette entry: gray level plus a chroma vector in the plane
/// orthogonal to the gray axis. Rotating the chroma vector changes hue while
/// keeping `r + g + b == 3 * level` exactly.
#[derive(Clone, Copy, Debug)]
struct ChromaColor {
    level: i32,
    radius: f64,
    angle: f64,
}

impl ChromaColor {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let level = rng.random_range(55..=185);
        let headroom = f64::from(level.min(255 - level));
        // channel deviation is at most radius * sqrt(2/3)
        let max_radius = headroom / (2.0f64 / 3.0).sqrt();
        ChromaColor { level, radius: max_radius * rng.random_range(0.55..0.95), angle: rng.random_range(0.0..2.0 * PI) }
    }

    fn rgb(&self, hue_degrees: f64) -> [u8; 3] {
        let theta = self.angle + hue_degrees.to_radians();
        let (s, c) = theta.sin_cos();
        let e1 = [2.0 / 6f64.sqrt(), -1.0 / 6f64.sqrt(), -1.0 / 6f64.sqrt()];
        let e2 = [0.0, 1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt()];
        let exact: [f64; 3] = std::array::from_fn(|k| f64::from(self.level) + self.radius * (c * e1[k] + s * e2[k]));
        let mut out: [i32; 3] = exact.map(|v| v.round() as i32);
        let diff = 3 * self.level - out.iter().sum::<i32>();
        if diff != 0 {
            // the rounding residual sums to `diff`; move it onto the channel
            // that was rounded furthest in the opposite direction
            let residual: [f64; 3] = std::array::from_fn(|k| exact[k] - f64::from(out[k]));
            let pick = (0..3)
                .max_by(|&a, &b| {
                    (residual[a] * f64::from(diff.signum())).total_cmp(&(residual[b] * f64::from(diff.signum()))).then(b.cmp(&a))
                })
                .unwrap_or(0);
            out[pick] += diff;
        }
        out.map(|v| v.clamp(0, 255) as u8)
    }
}

/// Palette index map of one style. Index 0 is background.
struct StylePattern {
    indices: Vec<u8>,
    palette: Vec<ChromaColor>,
    bbox: BoundingBox,
}

fn style_rng(seed: u64, style: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(style as u64 + 1);
    rng
}

fn make_style(family: PatternFamily, canvas: u32, rng: &mut ChaCha8Rng) -> StylePattern {
    let n = canvas as i64;
    let margin = |rng: &mut ChaCha8Rng| rng.random_range(n / 24..=n / 8);
    let (x0, x1) = (margin(rng), n - margin(rng));
    let (y0, y1) = (margin(rng), n - margin(rng));
    let (w, h) = (x1 - x0, y1 - y0);
    let palette: Vec<ChromaColor> = (0..3).map(|_| ChromaColor::random(rng)).collect();
    let mut idx = vec![0u8; (n * n) as usize];

    let paint: Box<dyn Fn(i64, i64) -> u8> = match family {
        PatternFamily::Stripes => {
            let period = rng.random_range(6..=18i64);
            let orient = rng.random_range(0..3u8);
            let colors = rng.random_range(2..=3u8);
            Box::new(move |u, v| {
                let t = match orient {
                    0 => v,
                    1 => u,
                    _ => u + v,
                };
                1 + ((t.div_euclid(period)) % i64::from(colors)) as u8
            })
        }
        PatternFamily::Diamonds => {
            let period = rng.random_range(10..=24i64);
            let dot = rng.random_bool(0.5);
            Box::new(move |u, v| {
                let du = (u.rem_euclid(period) - period / 2).abs();
                let dv = (v.rem_euclid(period) - period / 2).abs();
                if dot && du + dv < period / 6 {
                    3
                } else if du + dv < period / 2 {
                    1
                } else {
                    2
                }
            })
        }
        PatternFamily::SplitPanel => {
            let vertical_split = rng.random_bool(0.5);
            let frac = rng.random_range(0.3..0.7);
            let border = rng.random_range(2..=5i64);
            Box::new(move |u, v| {
                let (t, extent) = if vertical_split { (u, w) } else { (v, h) };
                let cut = (extent as f64 * frac) as i64;
                if (t - cut).abs() < border {
                    3
                } else if t < cut {
                    1
                } else {
                    2
                }
            })
        }
        PatternFamily::FloralMotif => {
            let spacing = rng.random_range(14..=26i64);
            let radius = spacing as f64 * rng.random_range(0.25..0.42);
            let offset = rng.random_range(0..spacing);
            Box::new(move |u, v| {
                let row = (v + offset).div_euclid(spacing);
                let shift = if row % 2 == 0 { 0 } else { spacing / 2 };
                let cu = ((u + shift).rem_euclid(spacing) - spacing / 2) as f64;
                let cv = ((v + offset).rem_euclid(spacing) - spacing / 2) as f64;
                let r = (cu * cu + cv * cv).sqrt();
                let petal = radius * (0.75 + 0.25 * (5.0 * cv.atan2(cu)).cos());
                if r < radius * 0.35 {
                    3
                } else if r < petal {
                    2
                } else {
                    1
                }
            })
        }
        PatternFamily::VerticalTextBand => {
            let band_w = (w as f64 * rng.random_range(0.16..0.26)) as i64;
            let band_x = rng.random_range(w / 6..=(w - band_w - w / 6).max(w / 6));
            // 3x5 glyphs stacked top to bottom
            let glyphs: Vec<u16> = (0..12).map(|_| rng.random_range(1..(1u16 << 15))).collect();
            Box::new(move |u, v| {
                if u < band_x || u >= band_x + band_w {
                    return 1;
                }
                let cell = (band_w / 4).max(2);
                let gu = (u - band_x - cell / 2).div_euclid(cell);
                let gv = v.div_euclid(cell);
                let glyph_row = gv.rem_euclid(6);
                let glyph = glyphs[(gv.div_euclid(6) as usize) % glyphs.len()];
                if (0..3).contains(&gu) && glyph_row < 5 {
                    let bit = glyph_row * 3 + gu;
                    if glyph >> bit & 1 == 1 {
                        return 3;
                    }
                }
                2
            })
        }
    };

    for y in y0..y1 {
        for x in x0..x1 {
            idx[(y * n + x) as usize] = paint(x - x0, y - y0);
        }
    }
    StylePattern { indices: idx, palette, bbox: BoundingBox { x0: x0 as u32, y0: y0 as u32, x1: x1 as u32, y1: y1 as u32 } }
}

fn render(style: &StylePattern, canvas: u32, hue_degrees: f64) -> Raster {
    let colors: Vec<[u8; 3]> = std::iter::once(BACKGROUND).chain(style.palette.iter().map(|c| c.rgb(hue_degrees))).collect();
    RgbImage::from_fn(canvas, canvas, |x, y| Rgb(colors[style.indices[(y * canvas + x) as usize] as usize]))
}

/// Generates `n_styles * variants_per_style` records. Variants of one style
/// share the pattern and differ only by a hue rotation of the non-background
/// colors, so their channel-sum images are identical.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<ImageRecord>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.n_styles * spec.variants_per_style);
    let first_eval = spec.n_styles - spec.eval_styles;
    for style in 0..spec.n_styles {
        let family = spec.pattern_families[style % spec.pattern_families.len()];
        let mut rng = style_rng(spec.seed, style);
        let pattern = make_style(family, spec.canvas, &mut rng);
        for (variant, &hue) in spec.hue_set.iter().take(spec.variants_per_style).enumerate() {
            out.push(ImageRecord {
                id: format!("s{style:03}_v{variant}"),
                pixels: render(&pattern, spec.canvas, hue),
                bbox: Some(pattern.bbox),
                group_id: Some(style.to_string()),
                split: if style >= first_eval { Split::Eval } else { Split::Train },
            });
        }
    }
    Ok(out)
}

/// One line of a JSON-lines manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    #[serde(default)]
    pub bbox: Option<[u32; 4]>,
    #[serde(default)]
    pub group_id: Option<String>,
    #[serde(default = "default_split")]
    pub split: Split,
}

fn default_split() -> Split {
    Split::Train
}

/// Reads a JSON-lines manifest. Image paths are resolved relative to the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| Error::parse(format!("{}:{}", path.display(), lineno + 1), e))?;
        if !seen.insert(entry.id.clone()) {
            return Err(Error::DuplicateId(entry.id));
        }
        let img_path = base.join(&entry.path);
        let pixels = image::open(&img_path).map_err(|e| Error::UnreadableImage { id: entry.id.clone(), reason: e.to_string() })?.to_rgb8();
        let (w, h) = pixels.dimensions();
        let bbox = match entry.bbox {
            Some([x0, y0, x1, y1]) => {
                let b = BoundingBox { x0, y0, x1, y1 };
                b.validate(w, h).map_err(|e| match e {
                    Error::Validation { reason, .. } => Error::validation(format!("bbox of `{}`", entry.id), reason),
                    other => other,
                })?;
                b
            }
            None => BoundingBox::full(w, h),
        };
        if bbox.width() < MIN_CROP_SIDE || bbox.height() < MIN_CROP_SIDE {
            return Err(Error::validation(
                format!("bbox of `{}`", entry.id),
                format!("crop {}x{} below {MIN_CROP_SIDE}x{MIN_CROP_SIDE}", bbox.width(), bbox.height()),
            ));
        }
        records.push(ImageRecord { id: entry.id, pixels, bbox: Some(bbox), group_id: entry.group_id, split: entry.split });
    }
    Ok(records)
}

/// Writes each record as `<dir>/images/<id>.png` plus `<dir>/manifest.jsonl`.
pub fn write_dataset(records: &[ImageRecord], dir: &Path) -> Result<std::path::PathBuf> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut out = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    for r in records {
        let rel = format!("images/{}.png", r.id);
        let file = dir.join(&rel);
        r.pixels.save(&file).map_err(|e| Error::parse(file.display().to_string(), e))?;
        let entry = ManifestEntry {
            id: r.id.clone(),
            path: rel,
            bbox: r.bbox.map(|b| [b.x0, b.y0, b.x1, b.y1]),
            group_id: r.group_id.clone(),
            split: r.split,
        };
        let line = serde_json::to_string(&entry).map_err(|e| Error::parse("manifest", e))?;
        writeln!(out, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
    }
    Ok(manifest_path)
}

/// Records of the requested split; all records when none carry that split.
pub fn split_or_all(records: &[ImageRecord], split: Split) -> Vec<&ImageRecord> {
    let picked: Vec<_> = records.iter().filter(|r| r.split == split).collect();
    if picked.is_empty() {
        records.iter().collect()
    } else {
        picked
    }
}
