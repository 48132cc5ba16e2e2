use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apply_mask, masking_probability, pretrain_loss, sample_mask, MaskingSchedule, MASK_FILL};
use crate::dataset::{batch_images, LineImage, LineSample};
use crate::error::{Error, Result};
use crate::model::{encode, project, Checkpoint, GroupSet, ModelParams, ParamGroup, RngState, Scope};
use crate::optim::{lr_at, Adam, AdamConfig};
use crate::quantizer::{labels_for, LabelRecord};
use crate::tensorcore::Graph;

const HELDOUT_SALT: u64 = 0x4d41_534b_4845_4c44;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Iterations after which the learning rate halves.
    pub halving_points: Vec<u64>,
    pub schedule: MaskingSchedule,
    /// Weight of the loss on non-masked patches.
    pub unmasked_weight: f64,
    pub eval_interval: u64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self::for_iterations(2000)
    }
}

impl PretrainConfig {
    /// Desk-scale defaults with halvings at 20% and 60% of training.
    pub fn for_iterations(iterations: u64) -> Self {
        PretrainConfig {
            iterations,
            batch_size: 16,
            lr: 1e-3,
            halving_points: vec![iterations / 5, iterations * 3 / 5],
            schedule: MaskingSchedule::progressive(),
            unmasked_weight: 0.1,
            eval_interval: 100,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(self.unmasked_weight >= 0.0 && self.unmasked_weight.is_finite()) {
            return Err(Error::Config(format!("unmasked_weight must be >= 0, got {}", self.unmasked_weight)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::Config("batch_size and eval_interval must be >= 1".into()));
        }
        if self.iterations > 0 && self.halving_points.iter().any(|&h| h >= self.iterations) {
            return Err(Error::Config("halving points must precede the last iteration".into()));
        }
        if self.halving_points.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("halving points must be sorted".into()));
        }
        Ok(())
    }
}

/// One row of the pre-training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    /// Completed iterations.
    pub iter: u64,
    /// Mean training loss since the previous row.
    pub loss: f64,
    /// Top-1 accuracy on masked held-out patches, absent without held-out lines.
    pub masked_acc: Option<f64>,
    pub p: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<PretrainMetrics>,
}

type Line<'a> = (&'a LineImage, &'a [u32]);

struct Forward {
    graph: Graph<f32>,
    logits: crate::tensorcore::Var,
    labels: Vec<u32>,
    plan: Vec<bool>,
    real: Vec<bool>,
}

fn forward(scope: &mut Scope<f32>, lines: &[Line], plans: &[Vec<bool>]) -> Result<Forward> {
    let masked: Vec<LineImage> = lines
        .iter()
        .zip(plans)
        .map(|((img, _), plan)| apply_mask(img, plan, MASK_FILL))
        .collect::<Result<_>>()?;
    let batch = batch_images(&masked.iter().collect::<Vec<_>>())?;
    let mut g = Graph::new();
    let enc = encode(&mut g, scope, &batch.images, &batch.widths)?;
    let logits = project(&mut g, scope, enc.states)?;
    let t = batch.n_patches;
    let mut labels = vec![0u32; lines.len() * t];
    let mut plan = vec![false; lines.len() * t];
    for (b, ((_, l), p)) in lines.iter().zip(plans).enumerate() {
        labels[b * t..b * t + l.len()].copy_from_slice(l);
        plan[b * t..b * t + p.len()].copy_from_slice(p);
    }
    Ok(Forward { graph: g, logits, labels, plan, real: enc.key_mask })
}

/// One optimizer step on a batch of labeled lines with fresh masks of
/// probability `p`. Returns the loss.
pub fn pretrain_step(
    params: &mut ModelParams,
    adam: &mut Adam,
    lines: &[Line],
    p: f64,
    w: f64,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    let plans: Vec<Vec<bool>> = lines.iter().map(|(_, l)| sample_mask(l.len(), p, rng)).collect();
    let mut scope = Scope::new(params, GroupSet::all());
    let mut f = forward(&mut scope, lines, &plans)?;
    let loss = pretrain_loss(&mut f.graph, f.logits, &f.labels, &f.plan, &f.real, w)?;
    let value = f.graph.value(loss).item() as f64;
    f.graph.backward(loss)?;
    let bindings = scope.into_bindings();
    adam.step(params, &f.graph, &bindings, lr);
    Ok(value)
}

/// Top-1 accuracy over masked real positions with masks drawn from `seed`.
fn masked_accuracy(params: &ModelParams, lines: &[Line], p: f64, seed: u64, batch: usize) -> Result<Option<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ HELDOUT_SALT);
    let (mut correct, mut total) = (0usize, 0usize);
    for chunk in lines.chunks(batch) {
        let plans: Vec<Vec<bool>> = chunk.iter().map(|(_, l)| sample_mask(l.len(), p, &mut rng)).collect();
        let mut scope = Scope::frozen(params);
        let f = forward(&mut scope, chunk, &plans)?;
        let logits = f.graph.value(f.logits);
        let k = logits.shape()[1];
        for (i, row) in logits.data().chunks(k).enumerate() {
            if !(f.plan[i] && f.real[i]) {
                continue;
            }
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0;
            total += 1;
            correct += usize::from(arg as u32 == f.labels[i]);
        }
    }
    Ok((total > 0).then(|| correct as f64 / total as f64))
}

fn labeled<'a>(samples: &'a [LineSample], store: &'a [LabelRecord], classes: usize) -> Result<Vec<Line<'a>>> {
    let labels = labels_for(store, samples)?;
    samples
        .iter()
        .zip(labels)
        .map(|(s, l)| {
            if let Some(bad) = l.iter().find(|&&c| c as usize >= classes) {
                return Err(Error::Data(format!("sample {}: label {bad} outside head of {classes} classes", s.id)));
            }
            Ok((&s.image, l))
        })
        .collect()
}

/// Trains stem, encoder and head on masked label prediction. `observer`
/// receives each metrics row as it is produced.
pub fn run_pretraining(
    config: &PretrainConfig,
    train: &[LineSample],
    heldout: &[LineSample],
    store: &[LabelRecord],
    mut params: ModelParams,
    mut observer: impl FnMut(&PretrainMetrics),
) -> Result<PretrainOutcome> {
    config.validate()?;
    let classes = params
        .config()
        .head_classes
        .filter(|_| params.has_group(ParamGroup::Head))
        .ok_or_else(|| Error::Config("pre-training needs a model with a projection head".into()))?;
    let train_lines = labeled(train, store, classes)?;
    let held_lines = labeled(heldout, store, classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut metrics = Vec::new();
    if config.iterations == 0 {
        return Ok(PretrainOutcome {
            checkpoint: Checkpoint { params, iteration: 0, rng: Some(RngState::capture(&rng)) },
            metrics,
        });
    }
    if train_lines.is_empty() {
        return Err(Error::Data("pre-training needs at least one training line".into()));
    }
    let mut adam = Adam::new(config.adam);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let (mut loss_sum, mut loss_n) = (0.0, 0u64);
    for it in 0..config.iterations {
        let p = masking_probability(&config.schedule, it, config.iterations);
        let lr = lr_at(config.lr, &config.halving_points, it);
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order = (0..train_lines.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train_lines[order[cursor]]);
            cursor += 1;
        }
        loss_sum += pretrain_step(&mut params, &mut adam, &batch, p, config.unmasked_weight, lr, &mut rng)?;
        loss_n += 1;
        let done = it + 1;
        if done % config.eval_interval == 0 || done == config.iterations {
            let row = PretrainMetrics {
                iter: done,
                loss: loss_sum / loss_n as f64,
                masked_acc: masked_accuracy(&params, &held_lines, p, config.seed, config.batch_size)?,
                p,
                lr,
            };
            observer(&row);
            metrics.push(row);
            (loss_sum, loss_n) = (0.0, 0);
        }
    }
    Ok(PretrainOutcome {
        checkpoint: Checkpoint { params, iteration: config.iterations, rng: Some(RngState::capture(&rng)) },
        metrics,
    })
}
