use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::{AdapterConfig, DecoderConfig, EncoderConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::tensorcore::{Scalar, Tensor};

/// Coarse parameter partition used for freezing and hashing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Stem,
    Encoder,
    Adapter,
    Decoder,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Stem,
        ParamGroup::Encoder,
        ParamGroup::Adapter,
        ParamGroup::Decoder,
        ParamGroup::Head,
    ];

    pub fn of(name: &str) -> ParamGroup {
        match name.split('.').next() {
            Some("stem") => ParamGroup::Stem,
            Some("encoder") => ParamGroup::Encoder,
            Some("adapter") => ParamGroup::Adapter,
            Some("head") => ParamGroup::Head,
            _ => ParamGroup::Decoder,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Stem => "stem",
            ParamGroup::Encoder => "encoder",
            ParamGroup::Adapter => "adapter",
            ParamGroup::Decoder => "decoder",
            ParamGroup::Head => "head",
        }
    }

    fn bit(self) -> u8 {
        1 << self as u8
    }
}

/// Set of parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupSet(u8);

impl GroupSet {
    pub fn all() -> Self {
        GroupSet(0x1f)
    }

    pub fn none() -> Self {
        GroupSet(0)
    }

    pub fn only(groups: &[ParamGroup]) -> Self {
        GroupSet(groups.iter().fold(0, |acc, g| acc | g.bit()))
    }

    pub fn contains(self, group: ParamGroup) -> bool {
        self.0 & group.bit() != 0
    }

    pub fn groups(self) -> impl Iterator<Item = ParamGroup> {
        ParamGroup::ALL.into_iter().filter(move |g| self.contains(*g))
    }
}

/// Named parameter tensors plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor<T>>,
}

enum Init {
    Uniform(f64),
    Zeros,
    Ones,
}

fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(name.as_bytes());
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(seed ^ u64::from_le_bytes(word))
}

fn make<T: Scalar>(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, T::one()),
        Init::Uniform(bound) => {
            let mut rng = tensor_rng(seed, name);
            Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
        }
    }
}

struct Builder<T: Scalar> {
    seed: u64,
    out: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Builder<T> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) {
        let t = make(self.seed, &name, shape, init);
        self.out.insert(name, t);
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.add(format!("{prefix}.weight"), &[fan_out, fan_in], Init::Uniform(bound));
        self.add(format!("{prefix}.bias"), &[fan_out], Init::Zeros);
    }

    fn norm(&mut self, prefix: &str, dim: usize) {
        self.add(format!("{prefix}.gamma"), &[dim], Init::Ones);
        self.add(format!("{prefix}.beta"), &[dim], Init::Zeros);
    }

    fn attention(&mut self, prefix: &str, dim: usize) {
        for p in ["wq", "wk", "wv", "wo"] {
            self.linear(&format!("{prefix}.{p}"), dim, dim);
        }
    }

    fn mlp(&mut self, prefix: &str, dim: usize, ratio: usize) {
        self.linear(&format!("{prefix}.fc1"), dim, dim * ratio);
        self.linear(&format!("{prefix}.fc2"), dim * ratio, dim);
    }

    fn encoder(&mut self, cfg: &EncoderConfig) {
        let mut cin = 1;
        for (b, &c) in cfg.stem.channels.iter().enumerate() {
            for i in 0..cfg.stem.convs_per_block {
                let bound = 1.0 / ((cin * 9) as f64).sqrt();
                self.add(format!("stem.conv{b}_{i}.weight"), &[c, cin, 3, 3], Init::Uniform(bound));
                self.add(format!("stem.conv{b}_{i}.bias"), &[c], Init::Zeros);
                cin = c;
            }
        }
        self.linear("stem.proj", cin, cfg.dim);
        for l in 0..cfg.layers {
            let p = format!("encoder.layer{l}");
            self.norm(&format!("{p}.ln1"), cfg.dim);
            self.attention(&format!("{p}.attn"), cfg.dim);
            self.norm(&format!("{p}.ln2"), cfg.dim);
            self.mlp(&format!("{p}.mlp"), cfg.dim, cfg.mlp_ratio);
        }
        self.norm("encoder.ln_f", cfg.dim);
    }

    fn decoder(&mut self, cfg: &DecoderConfig) {
        self.add("decoder.embed".into(), &[cfg.vocab, cfg.dim], Init::Uniform(1.0));
        for l in 0..cfg.layers {
            let p = format!("decoder.layer{l}");
            self.norm(&format!("{p}.ln1"), cfg.dim);
            self.attention(&format!("{p}.self_attn"), cfg.dim);
            self.norm(&format!("{p}.ln2"), cfg.dim);
            self.attention(&format!("{p}.cross_attn"), cfg.dim);
            self.norm(&format!("{p}.ln3"), cfg.dim);
            self.mlp(&format!("{p}.mlp"), cfg.dim, cfg.mlp_ratio);
        }
        self.norm("decoder.ln_f", cfg.dim);
        self.linear("decoder.out", cfg.dim, cfg.vocab);
    }
}

/// Full recognizer: encoder, adapter and decoder.
pub fn build_model(
    enc: EncoderConfig,
    adp: AdapterConfig,
    dec: DecoderConfig,
    seed: u64,
) -> Result<ModelParams> {
    ModelParams::init(
        ModelConfig { encoder: enc, adapter: Some(adp), decoder: Some(dec), head_classes: None, alphabet: None },
        seed,
    )
}

impl<T: Scalar> ModelParams<T> {
    /// Deterministic initialization: scaled-uniform linear and conv weights,
    /// zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { seed, out: BTreeMap::new() };
        b.encoder(&config.encoder);
        if let Some(a) = config.adapter {
            b.linear("adapter", a.in_dim, a.out_dim);
        }
        if let Some(d) = &config.decoder {
            b.decoder(d);
        }
        if let Some(k) = config.head_classes {
            b.linear("head", config.encoder.dim, k);
        }
        Ok(ModelParams { config, tensors: b.out })
    }

    /// Reassembles a parameter set, checking names and shapes against a fresh
    /// initialization of `config`.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let reference = ModelParams::<T>::init(config.clone(), 0)?;
        if reference.tensors.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} tensors for this configuration, found {}",
                reference.tensors.len(),
                tensors.len()
            )));
        }
        for (name, t) in &reference.tensors {
            match tensors.get(name) {
                Some(got) if got.shape() == t.shape() => {}
                Some(got) => {
                    return Err(Error::Config(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        got.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("tensor {name} missing"))),
            }
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set_alphabet(&mut self, alphabet: crate::dataset::Alphabet) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.alphabet = Some(alphabet);
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars held.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn has_group(&self, group: ParamGroup) -> bool {
        self.tensors.keys().any(|n| ParamGroup::of(n) == group)
    }

    /// SHA-256 over names, shapes and values of one group.
    pub fn group_hash(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors.iter().filter(|(n, _)| ParamGroup::of(n) == group) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Replaces stem and encoder tensors with those of `source`, which must
    /// have an identical encoder configuration.
    pub fn load_encoder_from(&mut self, source: &ModelParams<T>) -> Result<()> {
        if source.config.encoder != self.config.encoder {
            return Err(Error::Config(format!(
                "encoder configuration mismatch: checkpoint has {:?}, model has {:?}",
                source.config.encoder, self.config.encoder
            )));
        }
        for (name, t) in source.tensors.iter() {
            if matches!(ParamGroup::of(name), ParamGroup::Stem | ParamGroup::Encoder) {
                self.tensors.insert(name.clone(), t.clone());
            }
        }
        Ok(())
    }

    /// Copies every tensor whose name and shape match `source`; returns the
    /// number copied.
    pub fn load_matching_from(&mut self, source: &ModelParams<T>) -> usize {
        let mut copied = 0;
        for (name, t) in self.tensors.iter_mut() {
            if let Some(s) = source.tensors.get(name).filter(|s| s.shape() == t.shape()) {
                *t = s.clone();
                copied += 1;
            }
        }
        copied
    }

    /// Removes the pre-training projection head.
    pub fn drop_head(&mut self) {
        self.tensors.retain(|n, _| ParamGroup::of(n) != ParamGroup::Head);
        self.config.head_classes = None;
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }
}
