//! Shapes-with-styles generator: class identity is the shape, domain identity
//! is the rendering style (palette, texture, noise, outline vs. filled).

use std::collections::BTreeMap;
use std::f32::consts::PI;
use std::path::PathBuf;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::index::DomainIndex;
use super::{ImageDataset, ImageSource, Sample};
use crate::error::{DsamError, Result};
use crate::init::{derive_seed, param_rng};

pub const SHAPES: [&str; 10] = [
    "disk", "square", "triangle", "plus", "ring", "hbar", "cross", "vbar", "diamond", "halfdisk",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub foreground: [f32; 3],
    pub background: [f32; 3],
    /// Stripe frequency of the background texture in cycles per pixel.
    pub texture_frequency: f32,
    pub texture_amplitude: f32,
    /// Standard deviation of additive pixel noise.
    pub noise_level: f32,
    /// Draw only the shape's boundary.
    pub outline: bool,
}

fn default_samples() -> usize {
    50
}

fn default_size() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDomainSpec {
    pub num_domains: usize,
    pub num_classes: usize,
    #[serde(default = "default_samples")]
    pub samples_per_class: usize,
    #[serde(default = "default_size")]
    pub image_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Explicit styles, one per domain; drawn from `seed` when absent.
    #[serde(default)]
    pub styles: Option<Vec<DomainStyle>>,
}

impl SyntheticDomainSpec {
    pub fn new(num_domains: usize, num_classes: usize, samples_per_class: usize, image_size: usize, seed: u64) -> Self {
        SyntheticDomainSpec {
            num_domains,
            num_classes,
            samples_per_class,
            image_size,
            seed,
            styles: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 2 {
            return Err(DsamError::InvalidSpec(format!(
                "synthetic data needs at least 2 domains, got {}",
                self.num_domains
            )));
        }
        if self.num_classes < 2 {
            return Err(DsamError::InvalidSpec(format!(
                "synthetic data needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.num_classes > SHAPES.len() {
            return Err(DsamError::InvalidSpec(format!(
                "synthetic data supports at most {} classes",
                SHAPES.len()
            )));
        }
        if self.samples_per_class == 0 || self.image_size < 8 {
            return Err(DsamError::InvalidSpec(
                "samples_per_class must be positive and image_size at least 8".into(),
            ));
        }
        if let Some(styles) = &self.styles {
            if styles.len() != self.num_domains {
                return Err(DsamError::InvalidSpec(format!(
                    "{} styles given for {} domains",
                    styles.len(),
                    self.num_domains
                )));
            }
        }
        Ok(())
    }

    pub fn domain_name(k: usize) -> String {
        format!("domain{k}")
    }

    pub fn resolved_styles(&self) -> Vec<DomainStyle> {
        match &self.styles {
            Some(s) => s.clone(),
            None => (0..self.num_domains)
                .map(|k| random_style(derive_seed(self.seed, 1000 + k as u64), k))
                .collect(),
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
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

fn random_style(seed: u64, k: usize) -> DomainStyle {
    let mut rng = param_rng(seed);
    let hue: f32 = rng.random();
    let dark_on_light = k % 2 == 1;
    let (fg_v, bg_v) = if dark_on_light { (0.15, 0.9) } else { (0.95, 0.2) };
    DomainStyle {
        foreground: hsv_to_rgb(hue, rng.random_range(0.3..0.9), fg_v),
        background: hsv_to_rgb(hue + 0.5, rng.random_range(0.2..0.8), bg_v),
        texture_frequency: rng.random_range(0.05..0.35),
        texture_amplitude: rng.random_range(0.0..0.25),
        noise_level: rng.random_range(0.0..0.1),
        outline: k % 4 == 3,
    }
}

/// Signed inside test for a shape centred at the origin with unit size.
/// Returns a distance-like value: negative inside, positive outside.
fn shape_field(shape: usize, x: f32, y: f32) -> f32 {
    match SHAPES[shape] {
        "disk" => (x * x + y * y).sqrt() - 1.0,
        "square" => x.abs().max(y.abs()) - 0.85,
        "triangle" => {
            // upward triangle with vertices (0,-1), (±1, 0.8)
            let d1 = y - 0.8;
            let d2 = (-1.8 * x - y - 1.0) / (1.8f32 * 1.8 + 1.0).sqrt();
            let d3 = (1.8 * x - y - 1.0) / (1.8f32 * 1.8 + 1.0).sqrt();
            d1.max(d2).max(d3)
        }
        "plus" => (x.abs() - 0.3).max(y.abs() - 1.0).min((y.abs() - 0.3).max(x.abs() - 1.0)),
        "ring" => ((x * x + y * y).sqrt() - 0.7).abs() - 0.25,
        "hbar" => (x.abs() - 1.0).max(y.abs() - 0.3),
        "cross" => {
            let u = (x + y) / 2f32.sqrt();
            let v = (x - y) / 2f32.sqrt();
            (u.abs() - 0.25).max(v.abs() - 1.0).min((v.abs() - 0.25).max(u.abs() - 1.0))
        }
        "vbar" => (y.abs() - 1.0).max(x.abs() - 0.3),
        "diamond" => (x.abs() + y.abs()) - 1.0,
        "halfdisk" => ((x * x + y * y).sqrt() - 1.0).max(-y),
        _ => unreachable!(),
    }
}

fn render(shape: usize, style: &DomainStyle, size: usize, rng: &mut impl Rng) -> RgbImage {
    let s = size as f32;
    let scale = rng.random_range(0.25..0.4) * s;
    let cx = s / 2.0 + rng.random_range(-0.12..0.12) * s;
    let cy = s / 2.0 + rng.random_range(-0.12..0.12) * s;
    let angle = rng.random_range(-0.3f32..0.3);
    let (sin, cos) = angle.sin_cos();
    let stripe_angle = rng.random_range(0.0..PI);
    let (ss, sc) = stripe_angle.sin_cos();
    let phase = rng.random_range(0.0..2.0 * PI);
    let shade: f32 = rng.random_range(0.85..1.15);
    let edge = 1.5 / scale;
    let mut img = RgbImage::new(size as u32, size as u32);
    for py in 0..size {
        for px in 0..size {
            let dx = (px as f32 + 0.5 - cx) / scale;
            let dy = (py as f32 + 0.5 - cy) / scale;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            let d = shape_field(shape, u, v);
            let inside = if style.outline { d.abs() < edge } else { d < 0.0 };
            let texture = style.texture_amplitude
                * (2.0 * PI * style.texture_frequency * (px as f32 * sc + py as f32 * ss) + phase).sin();
            let mut rgb = [0u8; 3];
            for c in 0..3 {
                let base = if inside {
                    style.foreground[c] * shade
                } else {
                    style.background[c] + texture
                };
                let noise = if style.noise_level > 0.0 {
                    // sum of uniforms: cheap approximately-normal noise
                    let n: f32 = (0..3).map(|_| rng.random_range(-1.0f32..1.0)).sum::<f32>() / 3f32.sqrt();
                    n * style.noise_level
                } else {
                    0.0
                };
                rgb[c] = ((base + noise).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            img.put_pixel(px as u32, py as u32, Rgb(rgb));
        }
    }
    img
}

/// Renders the dataset. Every image is a pure function of
/// `(spec.seed, domain, class, sample index)` and its domain's style.
pub fn generate_synthetic(spec: &SyntheticDomainSpec) -> Result<(ImageDataset, DomainIndex)> {
    spec.validate()?;
    let styles = spec.resolved_styles();
    let classes: Vec<String> = SHAPES[..spec.num_classes].iter().map(|s| s.to_string()).collect();
    let domains: Vec<String> = (0..spec.num_domains).map(SyntheticDomainSpec::domain_name).collect();
    let mut samples = Vec::with_capacity(spec.num_domains * spec.num_classes * spec.samples_per_class);
    let mut tree = BTreeMap::new();
    for (d, style) in styles.iter().enumerate() {
        let mut per_class = BTreeMap::new();
        for (c, class) in classes.iter().enumerate() {
            let mut paths = Vec::new();
            for i in 0..spec.samples_per_class {
                let stream = ((d as u64) << 40) | ((c as u64) << 20) | i as u64;
                let mut rng = param_rng(derive_seed(spec.seed, stream));
                let img = render(c, style, spec.image_size, &mut rng);
                let path = PathBuf::from(format!("{}/{class}/{i:05}.png", domains[d]));
                samples.push(Sample {
                    id: samples.len() as u64,
                    image: ImageSource::Memory(Arc::new(img)),
                    label: c,
                    domain: d,
                    path: path.clone(),
                });
                paths.push(path);
            }
            per_class.insert(class.clone(), paths);
        }
        tree.insert(domains[d].clone(), per_class);
    }
    let index = DomainIndex::from_domains(tree)?;
    let dataset = ImageDataset {
        classes,
        domains,
        samples,
    };
    Ok((dataset, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        let (ds, index) = generate_synthetic(&SyntheticDomainSpec::new(4, 7, 50, 32, 0)).unwrap();
        assert_eq!(ds.samples.len(), 1400);
        assert_eq!(index.total(), 1400);
        assert_eq!(index.classes.len(), 7);
        assert!(index.counts().values().all(|&n| n == 350));
    }

    #[test]
    fn deterministic_bytes() {
        let spec = SyntheticDomainSpec::new(2, 3, 4, 16, 9);
        let (a, _) = generate_synthetic(&spec).unwrap();
        let (b, _) = generate_synthetic(&spec).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.load().unwrap().as_raw(), y.load().unwrap().as_raw());
        }
        let (c, _) = generate_synthetic(&SyntheticDomainSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a.samples[0].load().unwrap().as_raw(), c.samples[0].load().unwrap().as_raw());
    }

    #[test]
    fn identical_styles_identical_distributions() {
        let style = random_style(3, 0);
        let spec = SyntheticDomainSpec {
            styles: Some(vec![style.clone(), style]),
            ..SyntheticDomainSpec::new(2, 3, 200, 16, 1)
        };
        let (ds, _) = generate_synthetic(&spec).unwrap();
        let mean = |d: usize| {
            let mut sum = [0f64; 3];
            let mut n = 0f64;
            for s in ds.samples.iter().filter(|s| s.domain == d) {
                for p in s.load().unwrap().pixels() {
                    for c in 0..3 {
                        sum[c] += p[c] as f64 / 255.0;
                    }
                    n += 1.0;
                }
            }
            sum.map(|v| v / n)
        };
        let (a, b) = (mean(0), mean(1));
        for c in 0..3 {
            assert!((a[c] - b[c]).abs() < 0.01, "{a:?} {b:?}");
        }
    }

    #[test]
    fn domains_differ_in_style() {
        let styles = SyntheticDomainSpec::new(4, 7, 1, 32, 0).resolved_styles();
        assert_ne!(styles[0], styles[1]);
        assert!(styles[3].outline);
    }

    #[test]
    fn rejects_degenerate_specs() {
        assert!(generate_synthetic(&SyntheticDomainSpec::new(1, 7, 5, 32, 0)).is_err());
        assert!(generate_synthetic(&SyntheticDomainSpec::new(3, 1, 5, 32, 0)).is_err());
    }
}
