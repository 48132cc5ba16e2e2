use serde::{Deserialize, Serialize};

use crate::dataset::Alphabet;
use crate::error::{Error, Result};

/// Convolutional stem: four blocks of 3×3 convolutions with GELU. The first
/// three blocks halve both spatial extents, the last collapses the remaining
/// height, giving one feature vector per 8 input columns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StemConfig {
    /// Output channels of the four blocks.
    pub channels: [usize; 4],
    pub convs_per_block: usize,
}

impl Default for StemConfig {
    fn default() -> Self {
        Self::small()
    }
}

impl StemConfig {
    /// VGG-width stem used by the full-scale presets.
    pub fn vgg() -> Self {
        StemConfig { channels: [64, 128, 256, 512], convs_per_block: 2 }
    }

    pub fn small() -> Self {
        StemConfig { channels: [8, 16, 32, 32], convs_per_block: 1 }
    }

    pub fn micro() -> Self {
        StemConfig { channels: [2, 2, 3, 3], convs_per_block: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.convs_per_block == 0 {
            return Err(Error::Config("stem channels and convs_per_block must be positive".into()));
        }
        Ok(())
    }

    /// Trainable scalars in the convolutions (projection excluded).
    pub fn conv_params(&self) -> usize {
        let mut total = 0;
        let mut cin = 1;
        for &c in &self.channels {
            for _ in 0..self.convs_per_block {
                total += c * cin * 9 + c;
                cin = c;
            }
        }
        total
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    pub stem: StemConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl EncoderConfig {
    /// Two-layer, 128-wide encoder over the small stem.
    pub fn toy() -> Self {
        EncoderConfig { layers: 2, heads: 4, dim: 128, mlp_ratio: 4, stem: StemConfig::small() }
    }

    pub fn e6() -> Self {
        EncoderConfig { layers: 6, heads: 8, dim: 512, mlp_ratio: 4, stem: StemConfig::vgg() }
    }

    pub fn e12() -> Self {
        EncoderConfig { layers: 12, heads: 16, dim: 1024, mlp_ratio: 4, stem: StemConfig::vgg() }
    }

    pub fn validate(&self) -> Result<()> {
        self.stem.validate()?;
        check_attention_dims("encoder", self.dim, self.heads, self.mlp_ratio)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    /// Output vocabulary: alphabet plus PAD/BOS/EOS.
    pub vocab: usize,
    /// Longest accepted target sequence, BOS included.
    pub max_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::toy(0)
    }
}

impl DecoderConfig {
    /// Two-layer, 128-wide decoder.
    pub fn toy(vocab: usize) -> Self {
        DecoderConfig { layers: 2, heads: 4, dim: 128, mlp_ratio: 4, vocab, max_len: 64 }
    }

    pub fn d2(vocab: usize) -> Self {
        DecoderConfig { layers: 2, heads: 4, dim: 320, mlp_ratio: 4, vocab, max_len: 256 }
    }

    pub fn d6(vocab: usize) -> Self {
        DecoderConfig { layers: 6, heads: 8, dim: 512, mlp_ratio: 4, vocab, max_len: 256 }
    }

    pub fn d10(vocab: usize) -> Self {
        DecoderConfig { layers: 10, heads: 12, dim: 768, mlp_ratio: 4, vocab, max_len: 256 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 4 || self.max_len == 0 {
            return Err(Error::Config("decoder vocab must be >= 4 and max_len >= 1".into()));
        }
        check_attention_dims("decoder", self.dim, self.heads, self.mlp_ratio)
    }
}

fn check_attention_dims(what: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<()> {
    if dim == 0 || heads == 0 || dim % heads != 0 || mlp_ratio == 0 {
        return Err(Error::Config(format!(
            "{what}: dim {dim} must be a positive multiple of heads {heads}, mlp_ratio {mlp_ratio} positive"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub in_dim: usize,
    pub out_dim: usize,
}

impl AdapterConfig {
    pub fn between(enc: &EncoderConfig, dec: &DecoderConfig) -> Self {
        AdapterConfig { in_dim: enc.dim, out_dim: dec.dim }
    }
}

/// Everything needed to rebuild a parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub adapter: Option<AdapterConfig>,
    pub decoder: Option<DecoderConfig>,
    /// Codebook size of the pre-training projection head, when present.
    pub head_classes: Option<usize>,
    pub alphabet: Option<Alphabet>,
}

impl ModelConfig {
    /// Encoder with a `classes`-way projection head, as used for pre-training.
    pub fn pretraining(encoder: EncoderConfig, classes: usize) -> Self {
        ModelConfig { encoder, adapter: None, decoder: None, head_classes: Some(classes), alphabet: None }
    }

    /// Encoder, adapter and decoder sized for `alphabet`.
    pub fn recognizer(encoder: EncoderConfig, mut decoder: DecoderConfig, alphabet: Alphabet) -> Self {
        decoder.vocab = alphabet.vocab_size();
        ModelConfig {
            adapter: Some(AdapterConfig::between(&encoder, &decoder)),
            encoder,
            decoder: Some(decoder),
            head_classes: None,
            alphabet: Some(alphabet),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        match (&self.adapter, &self.decoder) {
            (Some(a), Some(d)) => {
                d.validate()?;
                if a.in_dim != self.encoder.dim || a.out_dim != d.dim {
                    return Err(Error::Config(format!(
                        "adapter {}→{} does not bridge encoder dim {} to decoder dim {}",
                        a.in_dim, a.out_dim, self.encoder.dim, d.dim
                    )));
                }
            }
            (None, None) => {}
            _ => return Err(Error::Config("adapter and decoder must be present together".into())),
        }
        if let (Some(alpha), Some(d)) = (&self.alphabet, &self.decoder) {
            if alpha.vocab_size() != d.vocab {
                return Err(Error::Config(format!(
                    "alphabet vocabulary {} differs from decoder vocab {}",
                    alpha.vocab_size(),
                    d.vocab
                )));
            }
        }
        if self.head_classes.is_some_and(|k| k < 2) {
            return Err(Error::Config("projection head needs at least 2 classes".into()));
        }
        Ok(())
    }
}

fn transformer_layer_params(dim: usize, mlp_ratio: usize, attentions: usize) -> usize {
    let attn = 4 * dim * dim + 4 * dim;
    let mlp = 2 * dim * dim * mlp_ratio + dim * mlp_ratio + dim;
    let norms = (attentions + 1) * 2 * dim;
    attentions * attn + mlp + norms
}

/// Trainable scalars of the stem, its projection and the encoder layers.
pub fn count_encoder_params(cfg: &EncoderConfig) -> usize {
    let stem = cfg.stem.conv_params() + cfg.stem.channels[3] * cfg.dim + cfg.dim;
    stem + cfg.layers * transformer_layer_params(cfg.dim, cfg.mlp_ratio, 1) + 2 * cfg.dim
}

/// Trainable scalars of the embedding, decoder layers and output projection.
pub fn count_decoder_params(cfg: &DecoderConfig) -> usize {
    cfg.vocab * cfg.dim
        + cfg.layers * transformer_layer_params(cfg.dim, cfg.mlp_ratio, 2)
        + 2 * cfg.dim
        + cfg.dim * cfg.vocab
        + cfg.vocab
}

/// Exact trainable-scalar count of a full configuration.
pub fn count_params(cfg: &ModelConfig) -> usize {
    count_encoder_params(&cfg.encoder)
        + cfg.adapter.map_or(0, |a| a.in_dim * a.out_dim + a.out_dim)
        + cfg.decoder.as_ref().map_or(0, count_decoder_params)
        + cfg.head_classes.map_or(0, |k| cfg.encoder.dim * k + k)
}
