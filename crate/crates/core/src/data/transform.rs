//! Image preprocessing: resize/crop to the backbone input, training-time
//! augmentation, and ImageNet channel normalization.

use image::imageops::{self, FilterType};
use image::{Rgb32FImage, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::DomainId;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Side-length fraction range of the random zoom crop.
    pub zoom: (f32, f32),
    pub flip_prob: f64,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            zoom: (0.8, 1.0),
            flip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LabeledSample {
    /// RGB in [0, 1], not yet normalized.
    pub image: Rgb32FImage,
    pub label: usize,
    pub domain: DomainId,
}

pub fn to_float(img: &RgbImage) -> Rgb32FImage {
    image::DynamicImage::ImageRgb8(img.clone()).into_rgb32f()
}

/// Resizes the shorter side to `size` and center-crops a `size x size` square.
pub fn resize_to_input(img: &RgbImage, size: usize) -> Rgb32FImage {
    let f = to_float(img);
    let (w, h) = f.dimensions();
    let size = size as u32;
    if w == size && h == size {
        return f;
    }
    let (nw, nh) = if w <= h {
        (size, ((h as f64 * size as f64 / w as f64).round() as u32).max(size))
    } else {
        (((w as f64 * size as f64 / h as f64).round() as u32).max(size), size)
    };
    let resized = imageops::resize(&f, nw, nh, FilterType::Triangle);
    imageops::crop_imm(&resized, (nw - size) / 2, (nh - size) / 2, size, size).to_image()
}

/// Crops a random square covering `zoom` of the side and rescales it back.
pub fn random_zoom(img: &Rgb32FImage, zoom: (f32, f32), rng: &mut impl Rng) -> Rgb32FImage {
    let (w, h) = img.dimensions();
    let frac = if zoom.0 < zoom.1 {
        rng.random_range(zoom.0..=zoom.1)
    } else {
        zoom.0
    };
    let cw = ((w as f32 * frac).round() as u32).clamp(1, w);
    let ch = ((h as f32 * frac).round() as u32).clamp(1, h);
    let x = rng.random_range(0..=w - cw);
    let y = rng.random_range(0..=h - ch);
    let crop = imageops::crop_imm(img, x, y, cw, ch).to_image();
    if (cw, ch) == (w, h) {
        return crop;
    }
    imageops::resize(&crop, w, h, FilterType::Triangle)
}

pub fn hflip(img: &Rgb32FImage, coin: bool) -> Rgb32FImage {
    if coin {
        imageops::flip_horizontal(img)
    } else {
        img.clone()
    }
}

fn gray(p: &[f32]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn factor(strength: f32, rng: &mut impl Rng) -> f32 {
    if strength <= 0.0 {
        1.0
    } else {
        rng.random_range((1.0 - strength).max(0.0)..=1.0 + strength)
    }
}

/// Brightness, contrast, saturation, then hue perturbation.
pub fn color_jitter(img: &Rgb32FImage, cfg: &AugmentConfig, rng: &mut impl Rng) -> Rgb32FImage {
    let b = factor(cfg.brightness, rng);
    let c = factor(cfg.contrast, rng);
    let s = factor(cfg.saturation, rng);
    let hue = if cfg.hue > 0.0 {
        rng.random_range(-cfg.hue..=cfg.hue)
    } else {
        0.0
    };
    let mut out = img.clone();
    for p in out.pixels_mut() {
        for v in p.0.iter_mut() {
            *v = (*v * b).clamp(0.0, 1.0);
        }
    }
    let mean_gray = out.pixels().map(|p| gray(&p.0)).sum::<f32>() / (out.width() * out.height()) as f32;
    for p in out.pixels_mut() {
        for v in p.0.iter_mut() {
            *v = (c * *v + (1.0 - c) * mean_gray).clamp(0.0, 1.0);
        }
        let g = gray(&p.0);
        for v in p.0.iter_mut() {
            *v = (s * *v + (1.0 - s) * g).clamp(0.0, 1.0);
        }
        if hue != 0.0 {
            let mut hsv = rgb_to_hsv(p.0);
            hsv[0] += hue;
            p.0 = hsv_to_rgb(hsv);
        }
    }
    out
}

/// Random zoom, horizontal flip, and color jitter, in that order. Label and
/// domain pass through untouched.
pub fn augment(sample: &LabeledSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> LabeledSample {
    let zoomed = random_zoom(&sample.image, cfg.zoom, rng);
    let flipped = hflip(&zoomed, rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0)));
    LabeledSample {
        image: color_jitter(&flipped, cfg, rng),
        label: sample.label,
        domain: sample.domain,
    }
}

/// Standardizes with the ImageNet statistics, returning `(3, H, W)` data.
pub fn normalize(img: &Rgb32FImage) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![0f32; 3 * plane];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = (p[c] - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
        }
    }
    out
}

/// Evaluation path: deterministic resize, crop, and normalization.
pub fn eval_transform(img: &RgbImage, size: usize) -> Vec<f32> {
    normalize(&resize_to_input(img, size))
}

pub fn train_transform(img: &RgbImage, size: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<f32> {
    let sample = LabeledSample {
        image: resize_to_input(img, size),
        label: 0,
        domain: DomainId::Source(0),
    };
    normalize(&augment(&sample, cfg, rng).image)
}
