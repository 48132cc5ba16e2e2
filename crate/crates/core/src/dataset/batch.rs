use rand::Rng;

use super::alphabet::{Alphabet, BOS, EOS, PAD};
use super::augment::{augment, AugmentationConfig};
use super::corpus::LineSample;
use super::image::{LineImage, LINE_HEIGHT, PATCH_WIDTH};
use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

/// Variable-width lines right-padded with zeros to a common width.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    /// `B × 1 × 48 × W_max`.
    pub images: Tensor<f32>,
    pub widths: Vec<usize>,
    /// `floor(W_max / 8)`.
    pub n_patches: usize,
    /// `B × n_patches`, true at real (non-padding) patch positions.
    pub patch_mask: Vec<bool>,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }

    pub fn real_patches(&self, b: usize) -> usize {
        self.widths[b] / PATCH_WIDTH
    }
}

/// Images plus teacher-forcing targets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: ImageBatch,
    /// `B × target_len` ids framed `BOS chars… EOS PAD…`.
    pub targets: Vec<u32>,
    pub target_len: usize,
    /// `B × target_len`, true where the target is not PAD.
    pub target_mask: Vec<bool>,
}

pub fn batch_images(images: &[&LineImage]) -> Result<ImageBatch> {
    if images.is_empty() {
        return Err(Error::Data("cannot batch zero lines".into()));
    }
    if let Some(bad) = images.iter().find(|i| i.height() != LINE_HEIGHT || i.width() < PATCH_WIDTH) {
        return Err(Error::Dimension(format!(
            "line of {}×{} cannot be batched (height must be {LINE_HEIGHT}, width >= {PATCH_WIDTH})",
            bad.height(),
            bad.width()
        )));
    }
    let w_max = images.iter().map(|i| i.width()).max().unwrap_or(0);
    let b = images.len();
    let mut data = vec![0.0f32; b * LINE_HEIGHT * w_max];
    for (k, img) in images.iter().enumerate() {
        let base = k * LINE_HEIGHT * w_max;
        for (y, row) in img.data().chunks(img.width()).enumerate() {
            data[base + y * w_max..base + y * w_max + img.width()].copy_from_slice(row);
        }
    }
    let n_patches = w_max / PATCH_WIDTH;
    let widths: Vec<usize> = images.iter().map(|i| i.width()).collect();
    let patch_mask = widths
        .iter()
        .flat_map(|w| (0..n_patches).map(move |p| p < w / PATCH_WIDTH))
        .collect();
    Ok(ImageBatch {
        images: Tensor::new(vec![b, 1, LINE_HEIGHT, w_max], data)?,
        widths,
        n_patches,
        patch_mask,
    })
}

/// Frames `BOS + ids + EOS`, right-padded with PAD to the longest line.
pub fn frame_targets(texts: &[&str], alphabet: &Alphabet) -> Result<(Vec<u32>, usize, Vec<bool>)> {
    let encoded: Vec<Vec<u32>> = texts.iter().map(|t| alphabet.encode(t)).collect::<Result<_>>()?;
    let len = encoded.iter().map(|e| e.len() + 2).max().unwrap_or(2);
    let mut ids = Vec::with_capacity(texts.len() * len);
    for e in &encoded {
        ids.push(BOS);
        ids.extend_from_slice(e);
        ids.push(EOS);
        ids.extend(std::iter::repeat_n(PAD, len - e.len() - 2));
    }
    let mask = ids.iter().map(|&i| i != PAD).collect();
    Ok((ids, len, mask))
}

/// Builds a training batch, augmenting images when a config is supplied.
pub fn batch(
    samples: &[&LineSample],
    alphabet: &Alphabet,
    augmentation: Option<&AugmentationConfig>,
    rng: &mut impl Rng,
) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::Data("cannot batch zero lines".into()));
    }
    let texts: Vec<&str> = samples.iter().map(|s| s.text.as_str()).collect();
    let (targets, target_len, target_mask) = frame_targets(&texts, alphabet)?;
    let augmented: Vec<LineImage>;
    let images: Vec<&LineImage> = match augmentation {
        Some(cfg) if !cfg.is_identity() => {
            augmented = samples.iter().map(|s| augment(&s.image, cfg, rng)).collect();
            augmented.iter().collect()
        }
        _ => samples.iter().map(|s| &s.image).collect(),
    };
    Ok(Batch {
        images: batch_images(&images)?,
        targets,
        target_len,
        target_mask,
    })
}
