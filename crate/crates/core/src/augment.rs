//! Image augmentations: the standard SSL recipe, the color-distortion-only
//! recipe, and the deterministic left/right/top/bottom slicing.

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Raster;
use crate::error::{Error, Result};

/// Smallest raster the random augmentations accept.
pub const MIN_AUGMENT_SIDE: u32 = 8;

/// One augmentation step. Every random step draws its coin and parameters
/// from the recipe's seeded stream, so a recipe is a pure function of
/// `(input, seed)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugmentOp {
    /// Brightness/contrast/saturation factors are drawn from
    /// `[max(0, 1 - x), 1 + x]`, the hue shift from `[-hue, hue]` turns.
    /// The four adjustments are applied in a random order.
    ColorJitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
        hue: f64,
        p: f64,
    },
    RandomGrayscale {
        p: f64,
    },
    HorizontalFlip {
        p: f64,
    },
    GaussianBlur {
        kernel: u32,
        sigma_min: f64,
        sigma_max: f64,
        p: f64,
    },
    /// Crop of a random area fraction and log-uniform aspect ratio. Falls
    /// back to the full frame when no candidate fits after ten draws.
    RandomResizedCrop {
        scale_min: f64,
        scale_max: f64,
        ratio_min: f64,
        ratio_max: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecipe {
    pub ops: Vec<AugmentOp>,
    /// Output side length; `None` keeps the input size.
    pub resize_to: Option<u32>,
}

impl AugmentRecipe {
    /// ColorJitter, RandomGrayscale, RandomHorizontalFlip, GaussianBlur and
    /// RandomResizedCrop, in that order, with jitter strength `s = 1`.
    pub fn standard_ssl(resize_to: u32) -> Self {
        let mut ops = Self::color_distortion(None).ops;
        ops.insert(2, AugmentOp::HorizontalFlip { p: 0.5 });
        ops.push(AugmentOp::RandomResizedCrop { scale_min: 0.08, scale_max: 1.0, ratio_min: 3.0 / 4.0, ratio_max: 4.0 / 3.0 });
        AugmentRecipe { ops, resize_to: Some(resize_to) }
    }

    /// ColorJitter(0.8s, 0.8s, 0.8s, 0.2s) p=0.8, RandomGrayscale p=0.2,
    /// GaussianBlur(3x3, sigma in [1, 2]) p=0.5.
    pub fn color_distortion(resize_to: Option<u32>) -> Self {
        let s = 1.0;
        AugmentRecipe {
            ops: vec![
                AugmentOp::ColorJitter { brightness: 0.8 * s, contrast: 0.8 * s, saturation: 0.8 * s, hue: 0.2 * s, p: 0.8 },
                AugmentOp::RandomGrayscale { p: 0.2 },
                AugmentOp::GaussianBlur { kernel: 3, sigma_min: 1.0, sigma_max: 2.0, p: 0.5 },
            ],
            resize_to,
        }
    }

    /// Color jitter alone, always applied.
    pub fn color_jitter_only(resize_to: Option<u32>) -> Self {
        AugmentRecipe { ops: vec![AugmentOp::ColorJitter { brightness: 0.8, contrast: 0.8, saturation: 0.8, hue: 0.2, p: 1.0 }], resize_to }
    }

    /// Returns a copy with every application probability replaced.
    pub fn with_probability(&self, p: f64) -> Self {
        let mut out = self.clone();
        for op in &mut out.ops {
            match op {
                AugmentOp::ColorJitter { p: q, .. }
                | AugmentOp::RandomGrayscale { p: q }
                | AugmentOp::HorizontalFlip { p: q }
                | AugmentOp::GaussianBlur { p: q, .. } => *q = p,
                AugmentOp::RandomResizedCrop { .. } => {}
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.resize_to == Some(0) {
            return Err(Error::validation("resize_to", "must be positive"));
        }
        for op in &self.ops {
            let p = match op {
                AugmentOp::ColorJitter { p, .. }
                | AugmentOp::RandomGrayscale { p }
                | AugmentOp::HorizontalFlip { p }
                | AugmentOp::GaussianBlur { p, .. } => *p,
                AugmentOp::RandomResizedCrop { scale_min, scale_max, ratio_min, ratio_max } => {
                    if !(0.0 < *scale_min && scale_min <= scale_max && *scale_max <= 1.0) {
                        return Err(Error::validation("random_resized_crop.scale", "need 0 < min <= max <= 1"));
                    }
                    if !(0.0 < *ratio_min && ratio_min <= ratio_max) {
                        return Err(Error::validation("random_resized_crop.ratio", "need 0 < min <= max"));
                    }
                    1.0
                }
            };
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation("p", format!("probability {p} outside [0, 1]")));
            }
            if let AugmentOp::GaussianBlur { kernel, sigma_min, sigma_max, .. } = op {
                if kernel % 2 == 0 || !(0.0 < *sigma_min && sigma_min <= sigma_max) {
                    return Err(Error::validation("gaussian_blur", "odd kernel and 0 < sigma_min <= sigma_max required"));
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, raster: &Raster, seed: u64) -> Result<Raster> {
        self.validate()?;
        check_size(raster, MIN_AUGMENT_SIDE)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = raster.clone();
        for op in &self.ops {
            img = apply_op(op, img, &mut rng);
        }
        if let Some(side) = self.resize_to {
            if img.dimensions() != (side, side) {
                img = imageops::resize(&img, side, side, FilterType::Triangle);
            }
        }
        Ok(img)
    }
}

fn check_size(raster: &Raster, min: u32) -> Result<()> {
    let (w, h) = raster.dimensions();
    if w < min || h < min {
        return Err(Error::RasterTooSmall { width: w, height: h, min });
    }
    Ok(())
}

fn apply_op(op: &AugmentOp, img: Raster, rng: &mut ChaCha8Rng) -> Raster {
    match *op {
        AugmentOp::ColorJitter { brightness, contrast, saturation, hue, p } => {
            let take = rng.random::<f64>() < p;
            let factor = |rng: &mut ChaCha8Rng, x: f64| rng.random_range((1.0 - x).max(0.0)..=1.0 + x);
            let b = factor(rng, brightness);
            let c = factor(rng, contrast);
            let s = factor(rng, saturation);
            let h = rng.random_range(-hue..=hue);
            let mut order = [0u8, 1, 2, 3];
            order.shuffle(rng);
            if take {
                color_jitter(&img, b, c, s, h, order)
            } else {
                img
            }
        }
        AugmentOp::RandomGrayscale { p } => {
            if rng.random::<f64>() < p {
                grayscale(&img)
            } else {
                img
            }
        }
        AugmentOp::HorizontalFlip { p } => {
            if rng.random::<f64>() < p {
                imageops::flip_horizontal(&img)
            } else {
                img
            }
        }
        AugmentOp::GaussianBlur { kernel, sigma_min, sigma_max, p } => {
            let take = rng.random::<f64>() < p;
            let sigma = rng.random_range(sigma_min..=sigma_max);
            if take {
                gaussian_blur(&img, kernel, sigma)
            } else {
                img
            }
        }
        AugmentOp::RandomResizedCrop { scale_min, scale_max, ratio_min, ratio_max } => {
            let (w, h) = img.dimensions();
            let area = f64::from(w) * f64::from(h);
            let (lo, hi) = (ratio_min.ln(), ratio_max.ln());
            for _ in 0..10 {
                let target = area * rng.random_range(scale_min..=scale_max);
                let ratio = rng.random_range(lo..=hi).exp();
                let cw = (target * ratio).sqrt().round() as u32;
                let ch = (target / ratio).sqrt().round() as u32;
                if cw > 0 && ch > 0 && cw <= w && ch <= h {
                    let x0 = rng.random_range(0..=w - cw);
                    let y0 = rng.random_range(0..=h - ch);
                    return imageops::crop_imm(&img, x0, y0, cw, ch).to_image();
                }
            }
            img
        }
    }
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Replicates the luma of each pixel into all three channels.
pub fn grayscale(img: &Raster) -> Raster {
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y).0.map(f64::from);
        let g = luma(p).round().clamp(0.0, 255.0) as u8;
        Rgb([g, g, g])
    })
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u8 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn color_jitter(img: &Raster, brightness: f64, contrast: f64, saturation: f64, hue: f64, order: [u8; 4]) -> Raster {
    let mut px: Vec<[f64; 3]> = img.pixels().map(|p| p.0.map(|v| f64::from(v) / 255.0)).collect();
    for step in order {
        match step {
            0 => px.iter_mut().for_each(|p| *p = p.map(|v| (v * brightness).clamp(0.0, 1.0))),
            1 => {
                let mean = px.iter().map(|&p| luma(p)).sum::<f64>() / px.len() as f64;
                px.iter_mut().for_each(|p| *p = p.map(|v| (v * contrast + mean * (1.0 - contrast)).clamp(0.0, 1.0)));
            }
            2 => px.iter_mut().for_each(|p| {
                let g = luma(*p);
                *p = p.map(|v| (v * saturation + g * (1.0 - saturation)).clamp(0.0, 1.0));
            }),
            _ => px.iter_mut().for_each(|p| {
                let mut hsv = rgb_to_hsv(*p);
                hsv[0] += hue;
                *p = hsv_to_rgb(hsv);
            }),
        }
    }
    let w = img.width();
    RgbImage::from_fn(w, img.height(), |x, y| {
        let p = px[(y * w + x) as usize];
        Rgb(p.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
    })
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &Raster, kernel: u32, sigma: f64) -> Raster {
    let half = (kernel / 2) as i64;
    let weights: Vec<f64> = (-half..=half).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let (w, h) = (img.width() as i64, img.height() as i64);
    let reflect = |i: i64, n: i64| -> usize {
        let period = 2 * (n - 1).max(1);
        let m = i.rem_euclid(period);
        (if m >= n { period - m } else { m }) as usize
    };
    let src: Vec<[f64; 3]> = img.pixels().map(|p| p.0.map(f64::from)).collect();
    let mut tmp = vec![[0.0; 3]; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (k, wt) in weights.iter().enumerate() {
                let sx = reflect(x + k as i64 - half, w);
                let p = src[y as usize * w as usize + sx];
                (0..3).for_each(|c| acc[c] += wt * p[c]);
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let mut acc = [0.0; 3];
        for (k, wt) in weights.iter().enumerate() {
            let sy = reflect(i64::from(y) + k as i64 - half, h);
            let p = tmp[sy * w as usize + x as usize];
            (0..3).for_each(|c| acc[c] += wt * p[c]);
        }
        Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8))
    })
}

/// The standard SSL recipe at 224x224.
pub fn standard_ssl_augment(raster: &Raster, seed: u64) -> Result<Raster> {
    AugmentRecipe::standard_ssl(224).apply(raster, seed)
}

/// Color jitter, random grayscale and Gaussian blur; no crop, no flip, size kept.
pub fn color_distort(raster: &Raster, seed: u64) -> Result<Raster> {
    AugmentRecipe::color_distortion(None).apply(raster, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceTag {
    Left,
    Right,
    Top,
    Bottom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceMode {
    /// left, right, top, bottom
    Both,
    /// top, bottom
    Horiz,
    /// left, right
    Vert,
}

impl SliceMode {
    pub fn tags(self) -> &'static [SliceTag] {
        match self {
            SliceMode::Both => &[SliceTag::Left, SliceTag::Right, SliceTag::Top, SliceTag::Bottom],
            SliceMode::Horiz => &[SliceTag::Top, SliceTag::Bottom],
            SliceMode::Vert => &[SliceTag::Left, SliceTag::Right],
        }
    }

    pub fn view_count(self) -> usize {
        self.tags().len()
    }
}

#[derive(Clone, Debug)]
pub struct SliceSet {
    pub views: Vec<(SliceTag, Raster)>,
}

impl SliceSet {
    pub fn rasters(&self) -> impl Iterator<Item = &Raster> {
        self.views.iter().map(|(_, r)| r)
    }
}

/// Half-image regions before resizing. The left/top half takes the floor.
pub fn slice_regions(raster: &Raster, mode: SliceMode) -> Result<Vec<(SliceTag, Raster)>> {
    check_size(raster, 2)?;
    let (w, h) = raster.dimensions();
    let (hw, hh) = (w / 2, h / 2);
    Ok(mode
        .tags()
        .iter()
        .map(|&tag| {
            let (x, y, cw, ch) = match tag {
                SliceTag::Left => (0, 0, hw, h),
                SliceTag::Right => (hw, 0, w - hw, h),
                SliceTag::Top => (0, 0, w, hh),
                SliceTag::Bottom => (0, hh, w, h - hh),
            };
            (tag, imageops::crop_imm(raster, x, y, cw, ch).to_image())
        })
        .collect())
}

/// Deterministic slicing into halves, each resized to `resize_to` squared.
pub fn slice4(raster: &Raster, mode: SliceMode, resize_to: u32) -> Result<SliceSet> {
    if resize_to == 0 {
        return Err(Error::validation("resize_to", "must be positive"));
    }
    let views = slice_regions(raster, mode)?
        .into_iter()
        .map(|(tag, r)| (tag, imageops::resize(&r, resize_to, resize_to, FilterType::Triangle)))
        .collect();
    Ok(SliceSet { views })
}
