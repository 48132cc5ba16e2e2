use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::CorpusSpec;
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::model::{DecoderConfig, EncoderConfig, ModelConfig, StemConfig};
use crate::pretrain::PretrainConfig;
use crate::quantizer::{ExtractorSpec, KMeansConfig};

/// `[quantizer]`: frozen feature stem and K-Means settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerSection {
    pub stem: StemConfig,
    /// Feature dimensionality.
    pub dim: usize,
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    /// Lines sampled for fitting.
    pub fit_lines: usize,
    pub seed: u64,
    /// Take the stem from a trained checkpoint instead of a random one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extractor_checkpoint: Option<PathBuf>,
}

impl Default for QuantizerSection {
    fn default() -> Self {
        QuantizerSection {
            stem: StemConfig::small(),
            dim: 64,
            k: 64,
            max_iters: 50,
            tol: 1e-4,
            fit_lines: 15_000,
            seed: 0,
            extractor_checkpoint: None,
        }
    }
}

impl QuantizerSection {
    pub fn extractor(&self) -> ExtractorSpec {
        ExtractorSpec { checkpoint: self.extractor_checkpoint.clone(), ..ExtractorSpec::random(self.stem.clone(), self.dim, self.seed) }
    }

    pub fn kmeans(&self) -> KMeansConfig {
        KMeansConfig { k: self.k, max_iters: self.max_iters, tol: self.tol, seed: self.seed }
    }
}

/// `[model]`: encoder and decoder shapes; the decoder vocabulary follows the
/// corpus alphabet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

/// A whole experiment: one section per pipeline stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: CorpusSpec,
    pub quantizer: QuantizerSection,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path` (defaults when `None`) and applies `section.key=value`
    /// overrides, whose values are parsed as TOML and fall back to strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match path {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::MissingArtifact(p.to_path_buf()));
                }
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse().map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces every seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.quantizer.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
    }

    pub fn pretraining_model(&self) -> ModelConfig {
        ModelConfig::pretraining(self.model.encoder.clone(), self.quantizer.k)
    }

    pub fn recognizer_model(&self) -> ModelConfig {
        ModelConfig::recognizer(self.model.encoder.clone(), self.model.decoder.clone(), self.data.alphabet.clone())
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let value: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emit_then_parse_is_idempotent() {
        let mut c = RunConfig::default();
        c.pretrain.iterations = 7;
        c.quantizer.extractor_checkpoint = Some("x.ckpt".into());
        let text = c.to_toml().unwrap();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn partial_sections_use_defaults() {
        let c = RunConfig::parse("[pretrain]\niterations = 5\n[model.encoder]\ndim = 32\n").unwrap();
        assert_eq!(c.pretrain.iterations, 5);
        assert_eq!(c.pretrain.batch_size, PretrainConfig::default().batch_size);
        assert_eq!(c.model.encoder.dim, 32);
        assert_eq!(c.model.encoder.layers, EncoderConfig::toy().layers);
    }

    #[test]
    fn unknown_keys_are_named() {
        for text in ["[data]\nfooo = 1\n", "fooo = 2\n", "[model.encoder]\nfooo = 3\n"] {
            let err = RunConfig::parse(text).unwrap_err();
            assert!(matches!(&err, Error::Config(m) if m.contains("fooo")), "{err}");
        }
    }

    #[test]
    fn overrides_take_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[pretrain]\niterations = 5\nlr = 0.01\n").unwrap();
        let sets = ["pretrain.iterations=9".to_string(), "data.alphabet=abc".to_string()];
        let c = RunConfig::load(Some(&path), &sets).unwrap();
        assert_eq!((c.pretrain.iterations, c.pretrain.lr), (9, 0.01));
        assert_eq!(c.data.alphabet.chars(), &['a', 'b', 'c']);
        let bad = RunConfig::load(None, &["pretrain.fooo=1".to_string()]).unwrap_err();
        assert!(bad.to_string().contains("fooo"));
        assert!(matches!(RunConfig::load(Some(&dir.path().join("none.toml")), &[]), Err(Error::MissingArtifact(_))));
    }
}
