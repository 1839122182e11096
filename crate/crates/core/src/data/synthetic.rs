use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub shape: [usize; 3],
    /// Blob peak in units of the pixel noise std; 0 makes classes indistinguishable.
    pub separation: f64,
    /// Per-pixel Gaussian noise before clamping to [0, 1].
    pub noise_std: f64,
    /// Maximum per-instance shift of the blob centres, in pixels.
    pub jitter: f64,
}

impl SyntheticConfig {
    pub fn new(classes: usize, per_class: usize, shape: [usize; 3], separation: f64) -> Self {
        Self { classes, per_class, shape, separation, noise_std: 0.15, jitter: 1.0 }
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    width: f64,
    /// Signed amplitude per channel.
    amp: Vec<f64>,
}

/// Class-conditional images: every class owns two Gaussian blobs with
/// random centres, widths and per-channel signs, drawn on a grey background
/// with pixel noise. Instances are interleaved by class.
pub fn make_synthetic(cfg: &SyntheticConfig, rng: &mut Rng) -> Result<Dataset> {
    let [c, h, w] = cfg.shape;
    if cfg.classes == 0 || cfg.per_class == 0 || c * h * w == 0 {
        return Err(Error::Data(format!("empty synthetic dataset requested: {cfg:?}")));
    }
    if !(cfg.separation >= 0.0 && cfg.noise_std >= 0.0 && cfg.jitter >= 0.0) {
        return Err(Error::Data(format!("invalid synthetic parameters: {cfg:?}")));
    }
    let side = h.min(w) as f64;
    let prototypes: Vec<Vec<Blob>> = (0..cfg.classes)
        .map(|_| {
            (0..2)
                .map(|_| Blob {
                    cy: rng.random_range(0.2..0.8) * h as f64,
                    cx: rng.random_range(0.2..0.8) * w as f64,
                    width: rng.random_range(0.1..0.25) * side,
                    amp: (0..c).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect(),
                })
                .collect()
        })
        .collect();
    let pixel_noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Data(e.to_string()))?;
    let amplitude = cfg.separation * cfg.noise_std;
    let n = cfg.classes * cfg.per_class;
    let mut images = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..cfg.per_class {
        for (label, blobs) in prototypes.iter().enumerate() {
            let shifts: Vec<(f64, f64)> = blobs
                .iter()
                .map(|_| {
                    if cfg.jitter > 0.0 {
                        (rng.random_range(-cfg.jitter..=cfg.jitter), rng.random_range(-cfg.jitter..=cfg.jitter))
                    } else {
                        (0.0, 0.0)
                    }
                })
                .collect();
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let mut v = 0.5;
                        for (b, (sy, sx)) in blobs.iter().zip(&shifts) {
                            let dy = y as f64 + 0.5 - b.cy - sy;
                            let dx = x as f64 + 0.5 - b.cx - sx;
                            v += amplitude * b.amp[ch] * (-(dy * dy + dx * dx) / (2.0 * b.width * b.width)).exp();
                        }
                        v += pixel_noise.sample(rng);
                        images.push(v.clamp(0.0, 1.0) as f32);
                    }
                }
            }
            labels.push(label);
        }
    }
    Dataset::new(cfg.shape, images, labels, cfg.classes)
}
