//! Seeded synthetic lesion volumes: smooth value-noise background, up to three
//! rotated elliptical lesions per slice with blurred boundaries, additive noise.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{normalize_intensity, Manifest, VolumeEntry};
use crate::error::{Error, Result};
use crate::model::SPATIAL_MULTIPLE;
use crate::pgm::Graymap;

pub const MAX_LESIONS: usize = 3;
/// Semi-axis range as a fraction of the image width.
pub const AXIS_RANGE: (f64, f64) = (0.03, 0.25);
pub const BLUR_SIGMA: f64 = 1.5;
/// Lesions are hypointense by an offset drawn from this range.
pub const LESION_OFFSET: (f64, f64) = (0.25, 0.4);
pub const NOISE_STD: f64 = 0.03;
const BACKGROUND_CELLS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub volumes: usize,
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// When false every slice is lesion-free.
    pub lesions: bool,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.volumes == 0 || self.slices == 0 {
            return Err(Error::Config("need at least one volume and one slice".into()));
        }
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(SPATIAL_MULTIPLE)
            || !self.width.is_multiple_of(SPATIAL_MULTIPLE)
        {
            return Err(Error::Config(format!(
                "slice size {}x{} must be positive multiples of {SPATIAL_MULTIPLE}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// A rotated ellipse in pixel coordinates; pixel `(row, col)` is sampled at
/// its integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub center_row: f64,
    pub center_col: f64,
    /// Semi-axis along the rotated column direction.
    pub semi_a: f64,
    pub semi_b: f64,
    /// Rotation in radians.
    pub angle: f64,
    /// Intensity drop inside the lesion.
    pub offset: f64,
}

impl Ellipse {
    pub fn contains(&self, row: f64, col: f64) -> bool {
        let (dy, dx) = (row - self.center_row, col - self.center_col);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_a).powi(2) + (v / self.semi_b).powi(2) <= 1.0
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSlice {
    /// Raw intensities before per-volume normalisation.
    pub image: Vec<f64>,
    /// 1 inside the union of lesion ellipses.
    pub mask: Vec<u8>,
    pub lesions: Vec<Ellipse>,
}

fn value_noise<R: Rng>(h: usize, w: usize, cells: usize, rng: &mut R) -> Vec<f64> {
    let grid: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen::<f64>()).collect();
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let fy = r as f64 / h as f64 * cells as f64;
        let (gy, ty) = (fy.floor() as usize, fy.fract());
        let sy = ty * ty * (3.0 - 2.0 * ty);
        for c in 0..w {
            let fx = c as f64 / w as f64 * cells as f64;
            let (gx, tx) = (fx.floor() as usize, fx.fract());
            let sx = tx * tx * (3.0 - 2.0 * tx);
            let at = |y: usize, x: usize| grid[y * (cells + 1) + x];
            let top = at(gy, gx) * (1.0 - sx) + at(gy, gx + 1) * sx;
            let bot = at(gy + 1, gx) * (1.0 - sx) + at(gy + 1, gx + 1) * sx;
            out[r * w + c] = top * (1.0 - sy) + bot * sy;
        }
    }
    out
}

/// Separable Gaussian blur with zero padding.
fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / norm).collect();
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; h * w];
        for r in 0..h as isize {
            for c in 0..w as isize {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    let d = k as isize - radius;
                    let (rr, cc) = if horizontal { (r, c + d) } else { (r + d, c) };
                    if rr >= 0 && rr < h as isize && cc >= 0 && cc < w as isize {
                        acc += t * src[rr as usize * w + cc as usize];
                    }
                }
                out[r as usize * w + c as usize] = acc;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

fn volume_rng(seed: u64, volume: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(volume as u64);
    rng
}

/// Generates the slices of one volume; depends only on `(cfg.seed, volume)`.
pub fn synthesize_volume(cfg: &SynthConfig, volume: usize) -> Vec<SyntheticSlice> {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = volume_rng(cfg.seed, volume);
    let base = value_noise(h, w, BACKGROUND_CELLS, &mut rng);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    (0..cfg.slices)
        .map(|_| {
            let detail = value_noise(h, w, 2 * BACKGROUND_CELLS, &mut rng);
            let count = if cfg.lesions {
                rng.gen_range(0..=MAX_LESIONS)
            } else {
                0
            };
            let lesions: Vec<Ellipse> = (0..count)
                .map(|_| Ellipse {
                    center_row: rng.gen_range(0.15..0.85) * h as f64,
                    center_col: rng.gen_range(0.15..0.85) * w as f64,
                    semi_a: rng.gen_range(AXIS_RANGE.0..AXIS_RANGE.1) * w as f64,
                    semi_b: rng.gen_range(AXIS_RANGE.0..AXIS_RANGE.1) * w as f64,
                    angle: rng.gen_range(0.0..std::f64::consts::PI),
                    offset: rng.gen_range(LESION_OFFSET.0..LESION_OFFSET.1),
                })
                .collect();
            let mut mask = vec![0u8; h * w];
            let mut drop = vec![0.0; h * w];
            for r in 0..h {
                for c in 0..w {
                    for e in &lesions {
                        if e.contains(r as f64, c as f64) {
                            mask[r * w + c] = 1;
                            drop[r * w + c] = f64::max(drop[r * w + c], e.offset);
                        }
                    }
                }
            }
            let drop = gaussian_blur(&drop, h, w, BLUR_SIGMA);
            let image = (0..h * w)
                .map(|i| 0.35 + 0.3 * base[i] + 0.1 * detail[i] - drop[i] + noise.sample(&mut rng))
                .collect();
            SyntheticSlice {
                image,
                mask,
                lesions,
            }
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct SynthSummary {
    pub volumes: usize,
    pub slices: usize,
    pub lesion_fraction: f64,
}

/// Writes every volume as P5 slices plus `manifest.json` under `out`.
pub fn generate_synthetic(cfg: &SynthConfig, out: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut entries = Vec::with_capacity(cfg.volumes);
    let (mut lesion_px, mut total_px) = (0usize, 0usize);
    for v in 0..cfg.volumes {
        let id = format!("vol_{v:03}");
        let dir = out.join(&id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let slices = synthesize_volume(cfg, v);
        let mut flat: Vec<f64> = slices.iter().flat_map(|s| s.image.iter().copied()).collect();
        normalize_intensity(&mut flat)?;
        let mut entry = VolumeEntry {
            id: id.clone(),
            images: Vec::new(),
            masks: Vec::new(),
            height: cfg.height,
            width: cfg.width,
        };
        let plane = cfg.height * cfg.width;
        for (s, slice) in slices.iter().enumerate() {
            let img_rel = format!("{id}/image_{s:03}.pgm");
            let mask_rel = format!("{id}/mask_{s:03}.pgm");
            let samples = flat[s * plane..(s + 1) * plane]
                .iter()
                .map(|&x| (x * 65535.0).round() as u16)
                .collect();
            Graymap::new(cfg.width, cfg.height, 65535, samples)?.write(&out.join(&img_rel))?;
            let mask = slice.mask.iter().map(|&m| m as u16 * 255).collect();
            Graymap::new(cfg.width, cfg.height, 255, mask)?.write(&out.join(&mask_rel))?;
            lesion_px += slice.mask.iter().filter(|&&m| m == 1).count();
            total_px += plane;
            entry.images.push(img_rel);
            entry.masks.push(mask_rel);
        }
        entries.push(entry);
    }
    Manifest { volumes: entries }.save(&out.join("manifest.json"))?;
    Ok(SynthSummary {
        volumes: cfg.volumes,
        slices: cfg.volumes * cfg.slices,
        lesion_fraction: lesion_px as f64 / total_px as f64,
    })
}
