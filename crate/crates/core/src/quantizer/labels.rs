use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::FeatureExtractor;
use super::kmeans::{fit_kmeans, Codebook, KMeansConfig};
use crate::dataset::{read_json_lines, Corpus, LineImage, LineSample, PATCH_WIDTH};
use crate::error::{Error, Result};

/// Per-patch cluster labels of one line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub id: String,
    pub labels: Vec<u32>,
}

/// Labels for one image: nearest centroid of every patch feature.
pub fn assign_labels(image: &LineImage, fx: &FeatureExtractor, codebook: &Codebook) -> Result<Vec<u32>> {
    if fx.dim() != codebook.dim() {
        return Err(Error::Dimension(format!(
            "extractor produces {}-dim features, codebook expects {}",
            fx.dim(),
            codebook.dim()
        )));
    }
    codebook.assign(fx.extract(image)?.data())
}

pub fn label_samples(samples: &[LineSample], fx: &FeatureExtractor, codebook: &Codebook) -> Result<Vec<LabelRecord>> {
    samples
        .par_iter()
        .map(|s| Ok(LabelRecord { id: s.id.clone(), labels: assign_labels(&s.image, fx, codebook)? }))
        .collect()
}

/// Labels every line of a manifest and writes the store to `out`.
pub fn label_corpus(
    manifest: &Path,
    fx: &FeatureExtractor,
    codebook: &Codebook,
    out: &Path,
) -> Result<Vec<LabelRecord>> {
    let corpus = Corpus::open(manifest)?;
    let records: Vec<LabelRecord> = corpus
        .records()
        .par_iter()
        .map(|r| {
            let image = corpus.load_image(r)?;
            Ok(LabelRecord { id: r.id.clone(), labels: assign_labels(&image, fx, codebook)? })
        })
        .collect::<Result<_>>()?;
    write_label_store(out, &records)?;
    Ok(records)
}

pub fn write_label_store(path: &Path, records: &[LabelRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::Data(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_label_store(path: &Path) -> Result<Vec<LabelRecord>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    read_json_lines(path)
}

/// Index of a label store by sample id, verifying lengths against images.
pub fn labels_for<'a>(
    store: &'a [LabelRecord],
    samples: &[LineSample],
) -> Result<Vec<&'a [u32]>> {
    let by_id: HashMap<&str, &LabelRecord> = store.iter().map(|r| (r.id.as_str(), r)).collect();
    samples
        .iter()
        .map(|s| {
            let rec = by_id
                .get(s.id.as_str())
                .ok_or_else(|| Error::Data(format!("sample {} has no label record", s.id)))?;
            let want = s.image.width() / PATCH_WIDTH;
            if rec.labels.len() != want {
                return Err(Error::Data(format!(
                    "sample {}: {} labels for {want} patches",
                    s.id,
                    rec.labels.len()
                )));
            }
            Ok(rec.labels.as_slice())
        })
        .collect()
}

/// Fits a codebook on the patch features of at most `max_lines` randomly
/// chosen lines.
pub fn fit_codebook(
    samples: &[LineSample],
    fx: &FeatureExtractor,
    config: &KMeansConfig,
    max_lines: usize,
) -> Result<Codebook> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    order.truncate(max_lines);
    order.sort_unstable();
    let feats: Vec<Vec<f32>> = order
        .par_iter()
        .map(|&i| Ok(fx.extract(&samples[i].image)?.into_data()))
        .collect::<Result<_>>()?;
    let flat: Vec<f32> = feats.into_iter().flatten().collect();
    let mut cb = fit_kmeans(&flat, fx.dim(), config)?;
    cb.meta.extractor = Some(fx.spec().clone());
    Ok(cb)
}
