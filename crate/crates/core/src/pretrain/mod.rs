//! Masked label prediction: random stride-aligned patches of each line are
//! filled with mid-gray and the encoder, topped with a linear head, predicts
//! the cluster labels of the hidden patches.

mod run;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{LineImage, PATCH_WIDTH};
use crate::error::{Error, Result};
use crate::tensorcore::{Graph, Scalar, Tensor, Var};

pub use crate::optim::lr_at;
pub use run::{pretrain_step, run_pretraining, PretrainConfig, PretrainMetrics, PretrainOutcome};

/// Pixel value written over masked patches.
pub const MASK_FILL: f32 = 0.5;

/// Piecewise-constant masking probability over the fraction of training done.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingSchedule {
    /// `(start_fraction, p)` pairs; the first starts at 0.
    pub stages: Vec<(f64, f64)>,
}

impl MaskingSchedule {
    pub fn constant(p: f64) -> Self {
        MaskingSchedule { stages: vec![(0.0, p)] }
    }

    /// 20% of patches, 33% from a fifth of training, 50% from three fifths.
    pub fn progressive() -> Self {
        MaskingSchedule { stages: vec![(0.0, 0.20), (0.2, 0.33), (0.6, 0.50)] }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(&(first, _)) = self.stages.first() else {
            return Err(Error::Config("masking schedule has no stages".into()));
        };
        if first != 0.0 {
            return Err(Error::Config(format!("first masking stage starts at {first}, expected 0")));
        }
        if self.stages.windows(2).any(|w| !(w[0].0 < w[1].0)) {
            return Err(Error::Config("masking stage starts must strictly increase".into()));
        }
        if let Some((_, p)) = self.stages.iter().find(|(s, p)| !(0.0..=1.0).contains(p) || !(0.0..1.0).contains(s)) {
            return Err(Error::Config(format!("masking probability {p} or its start is outside [0,1]")));
        }
        Ok(())
    }
}

impl Default for MaskingSchedule {
    fn default() -> Self {
        Self::progressive()
    }
}

/// `p` of the latest stage whose start is at most `iteration / total`.
pub fn masking_probability(schedule: &MaskingSchedule, iteration: u64, total: u64) -> f64 {
    let frac = if total == 0 { 0.0 } else { iteration as f64 / total as f64 };
    schedule
        .stages
        .iter()
        .take_while(|(start, _)| *start <= frac)
        .last()
        .or(schedule.stages.first())
        .map_or(0.0, |&(_, p)| p)
}

/// Exactly `round(p·n)` of `n` positions, drawn uniformly without replacement.
pub fn sample_mask(n_patches: usize, p: f64, rng: &mut impl Rng) -> Vec<bool> {
    let count = ((p.clamp(0.0, 1.0) * n_patches as f64).round() as usize).min(n_patches);
    let mut plan = vec![false; n_patches];
    for i in rand::seq::index::sample(rng, n_patches, count) {
        plan[i] = true;
    }
    plan
}

/// Sets pixel columns `[8i, 8i+8)` of every masked position `i` to `fill`.
pub fn apply_mask(image: &LineImage, plan: &[bool], fill: f32) -> Result<LineImage> {
    let n = image.width() / PATCH_WIDTH;
    if plan.len() != n {
        return Err(Error::Plan(format!(
            "mask plan has {} positions, image of width {} has {n}",
            plan.len(),
            image.width()
        )));
    }
    let mut out = image.clone();
    let w = image.width();
    for row in out.data_mut().chunks_mut(w) {
        for (i, _) in plan.iter().enumerate().filter(|(_, m)| **m) {
            row[i * PATCH_WIDTH..(i + 1) * PATCH_WIDTH].fill(fill);
        }
    }
    Ok(out)
}

/// Mean CE over masked positions plus `w` times mean CE over the remaining
/// real positions. Positions with `real[i] == false` never contribute; a
/// term with no positions is zero.
pub fn pretrain_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[u32],
    plan: &[bool],
    real: &[bool],
    w: f64,
) -> Result<Var> {
    let n = labels.len();
    if plan.len() != n || real.len() != n {
        return Err(Error::Dimension(format!(
            "{n} labels, {} plan entries, {} real flags",
            plan.len(),
            real.len()
        )));
    }
    if !real.iter().any(|&r| r) {
        return Err(Error::DegenerateWeights("every position is padding".into()));
    }
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::Config(format!("unmasked loss weight must be >= 0, got {w}")));
    }
    let targets: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let weights = |want: bool| -> Vec<T> {
        plan.iter()
            .zip(real)
            .map(|(&m, &r)| if r && m == want { T::one() } else { T::zero() })
            .collect()
    };
    let masked = plan.iter().zip(real).any(|(&m, &r)| m && r);
    let unmasked = plan.iter().zip(real).any(|(&m, &r)| !m && r);
    let mut loss = None;
    if masked {
        loss = Some(g.cross_entropy(logits, &targets, &weights(true))?);
    }
    if unmasked && w > 0.0 {
        let ce = g.cross_entropy(logits, &targets, &weights(false))?;
        let ce = g.scale(ce, T::from_f64_lossy(w));
        loss = Some(match loss {
            Some(l) => g.add(l, ce)?,
            None => ce,
        });
    }
    Ok(loss.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero()))))
}
