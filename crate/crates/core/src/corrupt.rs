//! Parametric image corruptions with five severity levels.
//!
//! The severity tables are this crate's own and are not numerically
//! identical to any external corruption benchmark. Every random draw is
//! independent of the severity, so a larger severity only scales or extends
//! the same perturbation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, keyed_rng};
use crate::tensor::Tensor;

pub const CONTRAST_FACTORS: [f32; 5] = [0.75, 0.5, 0.3, 0.2, 0.1];
pub const NOISE_SIGMAS: [f32; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
pub const BLUR_LENGTHS: [usize; 5] = [3, 5, 7, 9, 11];
pub const SNOW_DENSITIES: [f64; 5] = [0.01, 0.02, 0.03, 0.04, 0.05];
/// Opacity of snow streaks.
pub const SNOW_ALPHA: f32 = 0.85;
/// Brightness added per severity level by the snow corruption.
pub const SNOW_LIFT: f32 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Contrast,
    GaussianNoise,
    SpeckleNoise,
    MotionBlur,
    Snow,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::Contrast,
        CorruptionKind::GaussianNoise,
        CorruptionKind::SpeckleNoise,
        CorruptionKind::MotionBlur,
        CorruptionKind::Snow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::SpeckleNoise => "speckle_noise",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::Snow => "snow",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    /// Accepts `gaussian_noise`, `gaussian-noise` or `GaussianNoise`.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        let key = match key.as_str() {
            "speckle" => "specklenoise".to_string(),
            "gaussian" => "gaussiannoise".to_string(),
            _ => key,
        };
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name().replace('_', "") == key)
            .ok_or_else(|| {
                Error::Spec(format!(
                    "unknown corruption kind {s:?} (expected one of contrast, gaussian_noise, speckle_noise, motion_blur, snow)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        let spec = Self {
            kind,
            severity,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::Spec(format!(
                "severity must be in 1..=5, got {}",
                self.severity
            )));
        }
        Ok(())
    }

    fn level(&self) -> usize {
        self.severity as usize - 1
    }
}

fn check_image(img: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Dimension(format!(
            "expected a CxHxW image, got {:?}",
            img.shape()
        ))),
    }
}

fn clip(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

/// Scales each channel about its mean by `factor`, then clips.
pub fn contrast_with_factor(img: &Tensor<f32>, factor: f32) -> Result<Tensor<f32>> {
    let (c, h, w) = check_image(img)?;
    let plane = h * w;
    let mut out = img.clone();
    for ch in 0..c {
        let px = &mut out.data_mut()[ch * plane..(ch + 1) * plane];
        let mean = (px.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32;
        let offset = mean * (1.0 - factor);
        for v in px.iter_mut() {
            *v = clip(*v * factor + offset);
        }
    }
    Ok(out)
}

fn additive_noise(img: &Tensor<f32>, sigma: f32, seed: u64, multiplicative: bool) -> Tensor<f32> {
    let mut rng = keyed_rng(seed, "noise", 0);
    let data = img
        .data()
        .iter()
        .map(|&x| {
            let e: f64 = rng.sample(StandardNormal);
            let e = e as f32 * sigma;
            if multiplicative {
                clip(x + x * e)
            } else {
                clip(x + e)
            }
        })
        .collect();
    Tensor::new(img.shape().to_vec(), data).expect("same shape")
}

/// Bilinear sample of one channel plane with edge clamping.
fn sample_clamped(plane: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f32;
    let fx = x - x0 as f32;
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Averages `length` samples spaced one pixel apart along the line at `angle`
/// through each pixel. The kernel is symmetric and sums to one.
pub fn motion_blur(img: &Tensor<f32>, length: usize, angle: f32) -> Result<Tensor<f32>> {
    let (c, h, w) = check_image(img)?;
    let plane = h * w;
    let (sin, cos) = angle.sin_cos();
    let half = (length as f32 - 1.0) / 2.0;
    let weight = 1.0 / length as f32;
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        let src = &img.data()[ch * plane..(ch + 1) * plane];
        let dst = &mut out[ch * plane..(ch + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for t in 0..length {
                    let off = t as f32 - half;
                    acc += sample_clamped(src, h, w, y as f32 + off * sin, x as f32 + off * cos);
                }
                dst[y * w + x] = clip(acc * weight);
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}

/// Streak pixels for the largest density; lower severities use a prefix.
fn snow_mask(h: usize, w: usize, density: f64, seed: u64) -> Vec<bool> {
    let mut rng = keyed_rng(seed, "snow", 0);
    let max_streaks = (SNOW_DENSITIES[4] * (h * w) as f64).round() as usize;
    let used = (density * (h * w) as f64).round() as usize;
    // Snow falls at one slant per image.
    let dx: i64 = rng.gen_range(-1..=1);
    let mut mask = vec![false; h * w];
    for i in 0..max_streaks {
        let y0 = rng.gen_range(0..h) as i64;
        let x0 = rng.gen_range(0..w) as i64;
        let len: i64 = rng.gen_range(1..=3);
        if i >= used {
            continue;
        }
        for t in 0..len {
            let (y, x) = (y0 + t, x0 + dx * t);
            if (0..h as i64).contains(&y) && (0..w as i64).contains(&x) {
                mask[y as usize * w + x as usize] = true;
            }
        }
    }
    mask
}

/// Corrupts one image in `[0, 1]` using the random stream for image `index`.
pub fn corrupt_indexed(
    img: &Tensor<f32>,
    spec: &CorruptionSpec,
    index: u64,
) -> Result<Tensor<f32>> {
    spec.validate()?;
    let (_, h, w) = check_image(img)?;
    let level = spec.level();
    let seed = derive_seed(spec.seed, spec.kind.name(), index);
    match spec.kind {
        CorruptionKind::Contrast => contrast_with_factor(img, CONTRAST_FACTORS[level]),
        CorruptionKind::GaussianNoise => Ok(additive_noise(img, NOISE_SIGMAS[level], seed, false)),
        CorruptionKind::SpeckleNoise => Ok(additive_noise(img, NOISE_SIGMAS[level], seed, true)),
        CorruptionKind::MotionBlur => {
            let angle = keyed_rng(seed, "angle", 0).gen_range(0.0..std::f32::consts::PI);
            motion_blur(img, BLUR_LENGTHS[level], angle)
        }
        CorruptionKind::Snow => {
            let mask = snow_mask(h, w, SNOW_DENSITIES[level], seed);
            let lift = SNOW_LIFT * spec.severity as f32;
            let mut out = img.clone();
            for plane in out.data_mut().chunks_exact_mut(h * w) {
                for (v, &m) in plane.iter_mut().zip(&mask) {
                    let lifted = clip(*v + lift);
                    *v = if m {
                        clip((1.0 - SNOW_ALPHA) * lifted + SNOW_ALPHA)
                    } else {
                        lifted
                    };
                }
            }
            Ok(out)
        }
    }
}

/// Corrupts a single image with the stream for index 0.
pub fn corrupt(img: &Tensor<f32>, spec: &CorruptionSpec) -> Result<Tensor<f32>> {
    corrupt_indexed(img, spec, 0)
}

/// Corrupts a `B × C × H × W` batch; image `i` uses stream `i`.
pub fn corrupt_batch(images: &Tensor<f32>, spec: &CorruptionSpec) -> Result<Tensor<f32>> {
    let shape = images.shape();
    if shape.len() != 4 {
        return Err(Error::Dimension(format!(
            "expected a BxCxHxW batch, got {shape:?}"
        )));
    }
    let len: usize = shape[1..].iter().product();
    let parts: Vec<Tensor<f32>> = images
        .data()
        .par_chunks_exact(len)
        .enumerate()
        .map(|(i, px)| {
            let img = Tensor::new(shape[1..].to_vec(), px.to_vec())?;
            corrupt_indexed(&img, spec, i as u64)
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(images.len());
    for p in parts {
        data.extend(p.into_data());
    }
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image() -> Tensor<f32> {
        let data = (0..3 * 16 * 16)
            .map(|i| ((i * 37) % 101) as f32 / 100.0)
            .collect();
        Tensor::new(vec![3, 16, 16], data).unwrap()
    }

    #[test]
    fn parse_kinds() {
        assert_eq!(
            "gaussian-noise".parse::<CorruptionKind>().unwrap(),
            CorruptionKind::GaussianNoise
        );
        assert_eq!(
            "MotionBlur".parse::<CorruptionKind>().unwrap(),
            CorruptionKind::MotionBlur
        );
        assert!(matches!(
            "fog".parse::<CorruptionKind>(),
            Err(Error::Spec(_))
        ));
        assert!(CorruptionSpec::new(CorruptionKind::Snow, 6, 0).is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Snow, 0, 0).is_err());
    }

    #[test]
    fn contrast_identity_factor() {
        let img = gradient_image();
        assert_eq!(contrast_with_factor(&img, 1.0).unwrap(), img);
    }

    #[test]
    fn blur_preserves_linear_ramps_in_the_interior() {
        let (h, w) = (20, 20);
        let data = (0..h * w)
            .map(|i| 0.2 + 0.01 * (i % w) as f32 + 0.005 * (i / w) as f32)
            .collect();
        let img = Tensor::new(vec![1, h, w], data).unwrap();
        let out = motion_blur(&img, 11, 0.7).unwrap();
        for y in 6..h - 6 {
            for x in 6..w - 6 {
                let (a, b) = (img.data()[y * w + x], out.data()[y * w + x]);
                assert!((a - b).abs() < 1e-6, "({y},{x}) {a} {b}");
            }
        }
    }

    #[test]
    fn batch_matches_single_images() {
        let img = gradient_image();
        let mut data = img.data().to_vec();
        data.extend(img.data());
        let batch = Tensor::new(vec![2, 3, 16, 16], data).unwrap();
        let spec = CorruptionSpec::new(CorruptionKind::Snow, 3, 9).unwrap();
        let out = corrupt_batch(&batch, &spec).unwrap();
        let second = corrupt_indexed(&img, &spec, 1).unwrap();
        assert_eq!(&out.data()[3 * 256..], second.data());
        assert_ne!(&out.data()[..3 * 256], &out.data()[3 * 256..]);
    }
}
