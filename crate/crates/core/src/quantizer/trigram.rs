use std::collections::{BTreeMap, HashMap};

use super::labels::LabelRecord;
use crate::dataset::{LineSample, PATCH_WIDTH};
use crate::error::{Error, Result};
use crate::dataset::LineImage;

/// Crops per group.
pub const MAX_CROPS: usize = 8;

#[derive(Clone, Debug)]
pub struct TrigramCrop {
    pub id: String,
    /// First of the three patch positions.
    pub patch: usize,
    /// `48 × 24` pixels covering the three patches.
    pub image: LineImage,
}

#[derive(Clone, Debug)]
pub struct TrigramGroup {
    pub key: [u32; 3],
    pub count: usize,
    pub crops: Vec<TrigramCrop>,
}

/// The `top_n` most frequent label trigrams (ties by key), each with up to
/// [`MAX_CROPS`] crops taken from distinct lines in corpus order.
pub fn trigram_report(store: &[LabelRecord], samples: &[LineSample], top_n: usize) -> Result<Vec<TrigramGroup>> {
    let images: HashMap<&str, &LineImage> = samples.iter().map(|s| (s.id.as_str(), &s.image)).collect();
    let mut counts: BTreeMap<[u32; 3], usize> = BTreeMap::new();
    for r in store {
        for w in r.labels.windows(3) {
            *counts.entry([w[0], w[1], w[2]]).or_default() += 1;
        }
    }
    let mut ranked: Vec<([u32; 3], usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top_n);

    let mut groups = Vec::with_capacity(ranked.len());
    for (key, count) in ranked {
        let mut crops = Vec::new();
        for r in store {
            if crops.len() == MAX_CROPS {
                break;
            }
            let Some(patch) = r.labels.windows(3).position(|w| w == key) else { continue };
            let image = images
                .get(r.id.as_str())
                .ok_or_else(|| Error::Data(format!("label record {} has no image", r.id)))?;
            let x0 = patch * PATCH_WIDTH;
            crops.push(TrigramCrop { id: r.id.clone(), patch, image: image.crop_columns(x0, x0 + 3 * PATCH_WIDTH)? });
        }
        groups.push(TrigramGroup { key, count, crops });
    }
    Ok(groups)
}
