//! Fine-tuning augmentations: color/brightness change, noise, gamma, motion
//! and defocus blur, small geometric transforms and column occlusion.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::LineImage;
use crate::error::{Error, Result};

/// Magnitudes of every augmentation. A zero magnitude disables that
/// augmentation; the all-zero config is the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    /// Maximum absolute additive brightness shift.
    pub brightness: f32,
    /// Maximum relative contrast change around mid-gray.
    pub contrast: f32,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_sigma: f32,
    /// Maximum absolute log-gamma.
    pub gamma: f32,
    /// Maximum blur kernel extent in pixels (motion or defocus).
    pub blur: usize,
    /// Maximum absolute horizontal shear.
    pub shear: f32,
    /// Maximum absolute vertical translation in pixels.
    pub translate: f32,
    /// Expected fraction of columns hidden by occlusion stripes.
    pub occlusion: f32,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self::identity()
    }
}

impl AugmentationConfig {
    pub fn identity() -> Self {
        AugmentationConfig {
            brightness: 0.0,
            contrast: 0.0,
            noise_sigma: 0.0,
            gamma: 0.0,
            blur: 0,
            shear: 0.0,
            translate: 0.0,
            occlusion: 0.0,
        }
    }

    /// Moderate defaults used for fine-tuning.
    pub fn standard() -> Self {
        AugmentationConfig {
            brightness: 0.1,
            contrast: 0.2,
            noise_sigma: 0.03,
            gamma: 0.3,
            blur: 3,
            shear: 0.1,
            translate: 1.5,
            occlusion: 0.03,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn validate(&self) -> Result<()> {
        let floats = [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("noise_sigma", self.noise_sigma),
            ("gamma", self.gamma),
            ("shear", self.shear),
            ("translate", self.translate),
            ("occlusion", self.occlusion),
        ];
        for (name, v) in floats {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("augmentation {name} must be >= 0, got {v}")));
            }
        }
        if self.occlusion > 1.0 || self.contrast >= 1.0 {
            return Err(Error::Config("occlusion must be <= 1 and contrast < 1".into()));
        }
        Ok(())
    }
}

/// Applies the configured augmentations; output values are clamped to `[0,1]`
/// and the image size is preserved.
pub fn augment(image: &LineImage, config: &AugmentationConfig, rng: &mut impl Rng) -> LineImage {
    let mut img = image.clone();
    if config.shear > 0.0 || config.translate > 0.0 {
        let shear = if config.shear > 0.0 { rng.gen_range(-config.shear..=config.shear) } else { 0.0 };
        let ty = if config.translate > 0.0 {
            rng.gen_range(-config.translate..=config.translate)
        } else {
            0.0
        };
        img = affine(&img, shear, ty);
    }
    if config.blur > 1 {
        let extent = rng.gen_range(1..=config.blur);
        if extent > 1 {
            let motion = rng.gen_bool(0.5);
            img = box_blur(&img, extent, if motion { 1 } else { extent });
        }
    }
    if config.brightness > 0.0 || config.contrast > 0.0 {
        let b = if config.brightness > 0.0 {
            rng.gen_range(-config.brightness..=config.brightness)
        } else {
            0.0
        };
        let c = if config.contrast > 0.0 {
            rng.gen_range(1.0 - config.contrast..=1.0 + config.contrast)
        } else {
            1.0
        };
        img.data_mut().iter_mut().for_each(|v| *v = ((*v - 0.5) * c + 0.5 + b).clamp(0.0, 1.0));
    }
    if config.gamma > 0.0 {
        let g = rng.gen_range(-config.gamma..=config.gamma).exp();
        img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0).powf(g));
    }
    if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, config.noise_sigma).expect("sigma validated");
        img.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    if config.occlusion > 0.0 {
        let w = img.width();
        let h = img.height();
        let stripes = ((w as f32 * config.occlusion) / 4.0).ceil() as usize;
        for _ in 0..stripes {
            if !rng.gen_bool(0.5) {
                continue;
            }
            let sw = rng.gen_range(2..=6usize).min(w);
            let x0 = rng.gen_range(0..=w - sw);
            let fill: f32 = rng.gen_range(0.0..1.0);
            for y in 0..h {
                for x in x0..x0 + sw {
                    img.set(x, y, fill);
                }
            }
        }
    }
    img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

fn affine(img: &LineImage, shear: f32, ty: f32) -> LineImage {
    let (w, h) = (img.width(), img.height());
    let cy = h as f32 / 2.0;
    let mut out = LineImage::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let sy = y as f32 - ty;
            let sx = x as f32 + shear * (sy - cy);
            out.set(x, y, sample(img, sx, sy));
        }
    }
    out
}

fn sample(img: &LineImage, x: f32, y: f32) -> f32 {
    if x < 0.0 || y < 0.0 || x > (img.width() - 1) as f32 || y > (img.height() - 1) as f32 {
        return 0.0;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width() - 1), (y0 + 1).min(img.height() - 1));
    let (tx, ty) = (x - x0 as f32, y - y0 as f32);
    let top = img.get(x0, y0) * (1.0 - tx) + img.get(x1, y0) * tx;
    let bot = img.get(x0, y1) * (1.0 - tx) + img.get(x1, y1) * tx;
    top * (1.0 - ty) + bot * ty
}

/// Separable box filter with clamped borders.
fn box_blur(img: &LineImage, kx: usize, ky: usize) -> LineImage {
    let (w, h) = (img.width(), img.height());
    let pass = |src: &LineImage, k: usize, horizontal: bool| {
        let mut out = src.clone();
        let half = (k / 2) as isize;
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for d in 0..k as isize {
                    let o = d - half;
                    let (sx, sy) = if horizontal {
                        ((x as isize + o).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + o).clamp(0, h as isize - 1) as usize)
                    };
                    s += src.get(sx, sy);
                }
                out.set(x, y, s / k as f32);
            }
        }
        out
    };
    let tmp = if kx > 1 { pass(img, kx, true) } else { img.clone() };
    if ky > 1 {
        pass(&tmp, ky, false)
    } else {
        tmp
    }
}
