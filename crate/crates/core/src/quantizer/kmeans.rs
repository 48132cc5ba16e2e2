use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::ExtractorSpec;
use crate::error::{Error, Result};

pub const CODEBOOK_MAGIC: &[u8; 4] = b"LQKM";
pub const CODEBOOK_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once the relative inertia improvement of an iteration is below this.
    pub tol: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookMeta {
    pub n_fit_vectors: usize,
    pub iterations: usize,
    pub inertia: f64,
    pub seed: u64,
    /// Inertia after initialization and after every accepted iteration.
    pub inertia_history: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor: Option<ExtractorSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    centroids: Vec<f32>,
    pub meta: CodebookMeta,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| {
        let d = (*x as f64) - (*y as f64);
        d * d
    }).sum()
}

/// Index of the nearest centroid and its squared distance; ties go to the
/// lowest index.
fn nearest(x: &[f32], centroids: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign_all(points: &[f32], centroids: &[f32], dim: usize) -> (Vec<usize>, Vec<f64>, f64) {
    let res: Vec<(usize, f64)> = points.par_chunks_exact(dim).map(|x| nearest(x, centroids, dim)).collect();
    let inertia = res.iter().map(|r| r.1).sum();
    let (labels, dists) = res.into_iter().unzip();
    (labels, dists, inertia)
}

fn plus_plus_init(points: &[f32], n: usize, dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = points.par_chunks_exact(dim).map(|x| sq_dist(x, &centroids[..dim])).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::InsufficientData(format!(
                "only {c} distinct feature vectors, cannot seed {k} clusters"
            )));
        }
        let mut target = rng.gen_range(0.0..total);
        let mut pick = n - 1;
        for (i, d) in d2.iter().enumerate() {
            if target < *d {
                pick = i;
                break;
            }
            target -= d;
        }
        if d2[pick] <= 0.0 {
            pick = d2.iter().rposition(|d| *d > 0.0).expect("positive total");
        }
        let cen = points[pick * dim..(pick + 1) * dim].to_vec();
        d2.par_iter_mut()
            .zip(points.par_chunks_exact(dim))
            .for_each(|(d, x)| *d = d.min(sq_dist(x, &cen)));
        centroids.extend_from_slice(&cen);
    }
    Ok(centroids)
}

/// Cluster means; an empty cluster takes the point currently farthest from
/// its centroid.
fn update(points: &[f32], dim: usize, k: usize, labels: &[usize], dists: &[f64]) -> Vec<f32> {
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (x, &l) in points.chunks_exact(dim).zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(x) {
            *s += *v as f64;
        }
    }
    let mut out: Vec<f32> = sums
        .chunks_exact(dim)
        .zip(&counts)
        .flat_map(|(s, &c)| s.iter().map(move |v| if c > 0 { (v / c as f64) as f32 } else { 0.0 }))
        .collect();
    let mut dists = dists.to_vec();
    for c in (0..k).filter(|c| counts[*c] == 0) {
        let far = dists
            .iter()
            .enumerate()
            .fold(0, |best, (i, d)| if *d > dists[best] { i } else { best });
        out[c * dim..(c + 1) * dim].copy_from_slice(&points[far * dim..(far + 1) * dim]);
        dists[far] = 0.0;
    }
    out
}

/// k-means++ seeding followed by Lloyd iterations under squared Euclidean
/// distance. `features` holds `n × dim` row-major vectors.
pub fn fit_kmeans(features: &[f32], dim: usize, config: &KMeansConfig) -> Result<Codebook> {
    let k = config.k;
    if dim == 0 || features.len() % dim != 0 {
        return Err(Error::Dimension(format!("{} values do not form rows of {dim}", features.len())));
    }
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("feature vectors contain non-finite values".into()));
    }
    let n = features.len() / dim;
    if n < k {
        return Err(Error::InsufficientData(format!("{n} feature vectors for {k} clusters")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids = plus_plus_init(features, n, dim, k, &mut rng)?;
    let (mut labels, mut dists, mut inertia) = assign_all(features, &centroids, dim);
    let mut history = vec![inertia];
    let mut iterations = 0;
    while iterations < config.max_iters && inertia > 0.0 {
        let next = update(features, dim, k, &labels, &dists);
        let (l2, d2, i2) = assign_all(features, &next, dim);
        if i2 > inertia {
            break;
        }
        iterations += 1;
        let improvement = (inertia - i2) / inertia;
        centroids = next;
        labels = l2;
        dists = d2;
        inertia = i2;
        history.push(inertia);
        if improvement < config.tol {
            break;
        }
    }
    Ok(Codebook {
        k,
        dim,
        centroids,
        meta: CodebookMeta {
            n_fit_vectors: n,
            iterations,
            inertia,
            seed: config.seed,
            inertia_history: history,
            extractor: None,
        },
    })
}

impl Codebook {
    pub fn new(k: usize, dim: usize, centroids: Vec<f32>, meta: CodebookMeta) -> Result<Self> {
        if k == 0 || dim == 0 || centroids.len() != k * dim {
            return Err(Error::Dimension(format!("{} values for {k} centroids of dim {dim}", centroids.len())));
        }
        Ok(Codebook { k, dim, centroids, meta })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    /// Nearest-centroid label for each `dim`-sized row of `features`.
    pub fn assign(&self, features: &[f32]) -> Result<Vec<u32>> {
        if features.len() % self.dim != 0 {
            return Err(Error::Dimension(format!(
                "feature length {} is not a multiple of codebook dim {}",
                features.len(),
                self.dim
            )));
        }
        Ok(features
            .par_chunks_exact(self.dim)
            .map(|x| nearest(x, &self.centroids, self.dim).0 as u32)
            .collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + self.centroids.len() * 4);
        out.extend_from_slice(CODEBOOK_MAGIC);
        out.extend_from_slice(&CODEBOOK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.centroids {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(serde_json::to_vec(&self.meta).map_err(|e| Error::Config(e.to_string()))?);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::format(bytes.len() as u64, "codebook header truncated"));
        }
        if &bytes[..4] != CODEBOOK_MAGIC {
            return Err(Error::format(0, "bad magic, not a codebook"));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != CODEBOOK_VERSION {
            return Err(Error::Version { found: version, expected: CODEBOOK_VERSION });
        }
        let (k, dim) = (word(8) as usize, word(12) as usize);
        let end = 16 + k * dim * 4;
        if bytes.len() < end {
            return Err(Error::format(bytes.len() as u64, format!("centroids truncated, expected {end} bytes")));
        }
        let centroids = bytes[16..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let meta = serde_json::from_slice(&bytes[end..])
            .map_err(|e| Error::format(end as u64, format!("codebook metadata: {e}")))?;
        Codebook::new(k, dim, centroids, meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Codebook::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
