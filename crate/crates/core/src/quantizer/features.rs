use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dataset::{batch_images, LineImage, PATCH_WIDTH};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, stem, EncoderConfig, ModelConfig, ModelParams, Scope, StemConfig};
use crate::tensorcore::{Graph, Tensor};

/// How to obtain the frozen stem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorSpec {
    pub stem: StemConfig,
    /// Feature dimensionality `d_f`.
    pub dim: usize,
    pub seed: u64,
    /// Take stem and projection from this checkpoint instead of a random init.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl ExtractorSpec {
    pub fn random(stem: StemConfig, dim: usize, seed: u64) -> Self {
        ExtractorSpec { stem, dim, seed, checkpoint: None }
    }
}

/// Frozen convolutional stem mapping a line to one `d_f` vector per patch.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    spec: ExtractorSpec,
    params: ModelParams,
}

fn stem_only(stem: StemConfig, dim: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { layers: 0, heads: 1, dim, mlp_ratio: 1, stem },
        adapter: None,
        decoder: None,
        head_classes: None,
        alphabet: None,
    }
}

impl FeatureExtractor {
    pub fn new(spec: ExtractorSpec) -> Result<Self> {
        let mut params = ModelParams::init(stem_only(spec.stem.clone(), spec.dim), spec.seed)?;
        if let Some(path) = &spec.checkpoint {
            let source = load_checkpoint(path)?.params;
            let enc = &source.config().encoder;
            if enc.stem != spec.stem || enc.dim != spec.dim {
                return Err(Error::Config(format!(
                    "checkpoint {} has stem {:?} / dim {}, extractor wants {:?} / {}",
                    path.display(),
                    enc.stem,
                    enc.dim,
                    spec.stem,
                    spec.dim
                )));
            }
            params.load_matching_from(&source);
        }
        Ok(FeatureExtractor { spec, params })
    }

    /// Uses the stem and projection of a trained model.
    pub fn from_model(model: &ModelParams) -> Result<Self> {
        let enc = &model.config().encoder;
        let spec = ExtractorSpec::random(enc.stem.clone(), enc.dim, 0);
        let mut params = ModelParams::init(stem_only(enc.stem.clone(), enc.dim), 0)?;
        params.load_matching_from(model);
        Ok(FeatureExtractor { spec, params })
    }

    pub fn spec(&self) -> &ExtractorSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    /// SHA-256 of the frozen weights.
    pub fn weights_hash(&self) -> String {
        self.params.group_hash(crate::model::ParamGroup::Stem)
    }

    /// Features `[floor(W/8) × d_f]`.
    pub fn extract(&self, image: &LineImage) -> Result<Tensor<f32>> {
        if image.width() < PATCH_WIDTH {
            return Err(Error::EmptyInput(format!(
                "line of width {} yields no patches (need >= {PATCH_WIDTH})",
                image.width()
            )));
        }
        let b = batch_images(&[image])?;
        let mut g = Graph::new();
        let mut s = Scope::frozen(&self.params);
        let (x, _) = stem(&mut g, &mut s, &b.images, &b.widths)?;
        Ok(g.take_value(x))
    }
}
