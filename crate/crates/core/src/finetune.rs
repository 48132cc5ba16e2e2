//! Supervised fine-tuning of the encoder–decoder recognizer with
//! teacher-forced cross-entropy, optional decoder-stage freezing, and model
//! selection on validation CER.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{batch, AugmentationConfig, Batch, LineSample};
use crate::error::{Error, Result};
use crate::eval::evaluate_model;
use crate::model::{adapt, decode, encode, Checkpoint, GroupSet, ModelConfig, ModelParams, ParamGroup, RngState, Scope};
use crate::optim::{lr_at, Adam, AdamConfig};
use crate::tensorcore::Graph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Every group trains from the first iteration.
    Full,
    /// Only adapter and decoder train until `decoder_stage_fraction` of the run.
    DecoderStage,
}

/// Groups updated at `iteration` of `total`. The projection head never is.
pub fn trainable_selector(strategy: Strategy, iteration: u64, total: u64, fraction: f64) -> GroupSet {
    let all = GroupSet::only(&[ParamGroup::Stem, ParamGroup::Encoder, ParamGroup::Adapter, ParamGroup::Decoder]);
    match strategy {
        Strategy::DecoderStage if total > 0 && (iteration as f64) < fraction * total as f64 => {
            GroupSet::only(&[ParamGroup::Adapter, ParamGroup::Decoder])
        }
        _ => all,
    }
}

/// Where initial weights come from.
#[derive(Clone, Debug)]
pub enum InitSource {
    Scratch,
    /// Stem and encoder of a pre-trained model; its head is discarded.
    PretrainedEncoder(ModelParams),
    /// Every stem, encoder, adapter and decoder tensor of a trained recognizer.
    TransferFullModel(ModelParams),
}

pub fn init_model(source: &InitSource, config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut config = config.clone();
    config.head_classes = None;
    match source {
        InitSource::Scratch => ModelParams::init(config, seed),
        InitSource::PretrainedEncoder(src) => {
            let mut p = ModelParams::init(config, seed)?;
            p.load_encoder_from(src)?;
            Ok(p)
        }
        InitSource::TransferFullModel(src) => {
            let s = src.config();
            if s.encoder != config.encoder || s.adapter != config.adapter || s.decoder != config.decoder {
                return Err(Error::Config(
                    "transfer source differs from the requested encoder, adapter or decoder".into(),
                ));
            }
            let mut p = src.clone();
            p.drop_head();
            if let Some(a) = config.alphabet {
                p.set_alphabet(a)?;
            }
            Ok(p)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub halving_points: Vec<u64>,
    pub strategy: Strategy,
    pub decoder_stage_fraction: f64,
    pub augmentation: AugmentationConfig,
    pub eval_interval: u64,
    pub seed: u64,
    /// Longest transcription produced during validation.
    pub max_decode_len: usize,
    pub adam: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self::for_iterations(2000)
    }
}

impl FinetuneConfig {
    /// Desk-scale defaults with one halving at mid-run.
    pub fn for_iterations(iterations: u64) -> Self {
        FinetuneConfig {
            iterations,
            batch_size: 16,
            lr: 5e-4,
            halving_points: vec![iterations / 2],
            strategy: Strategy::Full,
            decoder_stage_fraction: 0.2,
            augmentation: AugmentationConfig::standard(),
            eval_interval: 200,
            seed: 0,
            max_decode_len: 64,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decoder_stage_fraction > 0.0 && self.decoder_stage_fraction < 1.0) {
            return Err(Error::Config(format!(
                "decoder_stage_fraction must lie in (0,1), got {}",
                self.decoder_stage_fraction
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.eval_interval == 0 || self.max_decode_len == 0 {
            return Err(Error::Config("batch_size, eval_interval and max_decode_len must be >= 1".into()));
        }
        if self.iterations > 0 && self.halving_points.iter().any(|&h| h >= self.iterations) {
            return Err(Error::Config("halving points must precede the last iteration".into()));
        }
        if self.halving_points.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("halving points must be sorted".into()));
        }
        self.augmentation.validate()
    }
}

/// One teacher-forced update of the groups in `trainable`; returns the mean
/// cross-entropy over non-PAD target positions.
pub fn finetune_step(
    params: &mut ModelParams,
    adam: &mut Adam,
    batch: &Batch,
    trainable: GroupSet,
    lr: f64,
) -> Result<f64> {
    let (l, n) = (batch.target_len, batch.images.len());
    if l < 2 {
        return Err(Error::Data("targets need at least BOS and EOS".into()));
    }
    let mut inputs = Vec::with_capacity(n * (l - 1));
    let mut targets = Vec::with_capacity(n * (l - 1));
    let mut weights = Vec::with_capacity(n * (l - 1));
    for b in 0..n {
        let row = &batch.targets[b * l..(b + 1) * l];
        inputs.extend(row[..l - 1].iter().map(|&t| t as usize));
        targets.extend(row[1..].iter().map(|&t| t as usize));
        weights.extend(batch.target_mask[b * l + 1..(b + 1) * l].iter().map(|&m| if m { 1.0f32 } else { 0.0 }));
    }
    let mut g = Graph::new();
    let mut s = Scope::new(params, trainable);
    let enc = encode(&mut g, &mut s, &batch.images.images, &batch.images.widths)?;
    let memory = adapt(&mut g, &mut s, &enc)?;
    let logits = decode(&mut g, &mut s, memory, &enc.key_mask, &inputs, l - 1)?;
    let loss = g.cross_entropy(logits, &targets, &weights)?;
    let value = g.value(loss).item() as f64;
    g.backward(loss)?;
    let bindings = s.into_bindings();
    adam.step(params, &g, &bindings, lr);
    Ok(value)
}

/// One validation row of the fine-tuning log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneMetrics {
    pub iter: u64,
    /// Mean training loss since the previous row; absent before training.
    pub loss: Option<f64>,
    pub val_cer: f64,
    pub lr: f64,
    pub trainable: Vec<String>,
}

/// Events passed to the observer of [`run_finetuning`].
pub enum Progress<'a> {
    /// After every optimizer step.
    Step { iter: u64, loss: f64, params: &'a ModelParams },
    Metrics(&'a FinetuneMetrics),
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Lowest validation CER seen; the earliest such checkpoint wins ties.
    pub best: Checkpoint,
    pub best_cer: f64,
    pub last: Checkpoint,
    pub metrics: Vec<FinetuneMetrics>,
}

fn names(set: GroupSet) -> Vec<String> {
    set.groups().map(|g| g.name().to_string()).collect()
}

/// Initializes from `init`, trains on `train` with augmentation and keeps
/// the checkpoint with the lowest CER on `val`.
pub fn run_finetuning(
    config: &FinetuneConfig,
    model: &ModelConfig,
    init: &InitSource,
    train: &[LineSample],
    val: &[LineSample],
    mut observer: impl FnMut(Progress),
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if config.strategy == Strategy::DecoderStage && matches!(init, InitSource::Scratch) {
        return Err(Error::Config("the decoder-stage strategy needs a pre-trained or transferred encoder".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("fine-tuning needs non-empty train and val splits".into()));
    }
    let mut params = init_model(init, model, config.seed)?;
    let alphabet = params
        .config()
        .alphabet
        .clone()
        .ok_or_else(|| Error::Config("recognizer configuration needs an alphabet".into()))?;
    let total = config.iterations;
    let selector = |it: u64| trainable_selector(config.strategy, it, total, config.decoder_stage_fraction);
    let eval_batch = config.batch_size.max(16);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.adam);

    let cer0 = evaluate_model(&params, val, config.max_decode_len, eval_batch)?.cer;
    let row = FinetuneMetrics {
        iter: 0,
        loss: None,
        val_cer: cer0,
        lr: lr_at(config.lr, &config.halving_points, 0),
        trainable: names(selector(0)),
    };
    observer(Progress::Metrics(&row));
    let mut metrics = vec![row];
    let mut best = Checkpoint { params: params.clone(), iteration: 0, rng: Some(RngState::capture(&rng)) };
    let mut best_cer = cer0;

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let (mut loss_sum, mut loss_n) = (0.0, 0u64);
    for it in 0..total {
        let lr = lr_at(config.lr, &config.halving_points, it);
        let trainable = selector(it);
        let mut picked = Vec::with_capacity(config.batch_size);
        while picked.len() < config.batch_size {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(&train[order[cursor]]);
            cursor += 1;
        }
        let b = batch(&picked, &alphabet, Some(&config.augmentation), &mut rng)?;
        let loss = finetune_step(&mut params, &mut adam, &b, trainable, lr)?;
        loss_sum += loss;
        loss_n += 1;
        let done = it + 1;
        observer(Progress::Step { iter: done, loss, params: &params });
        if done % config.eval_interval == 0 || done == total {
            let cer = evaluate_model(&params, val, config.max_decode_len, eval_batch)?.cer;
            let row = FinetuneMetrics {
                iter: done,
                loss: Some(loss_sum / loss_n as f64),
                val_cer: cer,
                lr,
                trainable: names(trainable),
            };
            observer(Progress::Metrics(&row));
            metrics.push(row);
            (loss_sum, loss_n) = (0.0, 0);
            if cer < best_cer {
                best_cer = cer;
                best = Checkpoint { params: params.clone(), iteration: done, rng: Some(RngState::capture(&rng)) };
            }
        }
    }
    Ok(FinetuneOutcome {
        best,
        best_cer,
        last: Checkpoint { params, iteration: total, rng: Some(RngState::capture(&rng)) },
        metrics,
    })
}
