use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::alphabet::Alphabet;
use super::image::{LineImage, LINE_HEIGHT, PATCH_WIDTH};
use super::render::{render_line, FontSpec, GlyphAtlas, Jitter};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGE_DIR: &str = "images";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One transcribed text line.
#[derive(Clone, Debug, PartialEq)]
pub struct LineSample {
    pub id: String,
    pub image: LineImage,
    pub text: String,
    pub split: Split,
}

/// One manifest line: `{"id":…,"image":…,"text":…,"split":…}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    pub text: String,
    pub split: Split,
}

/// Recipe for a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Inclusive transcription length range in characters.
    pub min_len: usize,
    pub max_len: usize,
    pub alphabet: Alphabet,
    pub fonts: Vec<FontSpec>,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self::toy(2000, 200, 200, 0)
    }
}

impl CorpusSpec {
    /// Small lowercase corpus with one handwriting-like font.
    pub fn toy(train: usize, val: usize, test: usize, seed: u64) -> Self {
        CorpusSpec {
            train,
            val,
            test,
            min_len: 3,
            max_len: 8,
            alphabet: Alphabet::new("abcdefghijklmnop ".chars()).expect("valid alphabet"),
            fonts: vec![FontSpec { seed: 1, advance: 16, jitter: Jitter::handwriting() }],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 {
            return Err(Error::Config("min_len must be >= 1 (empty transcriptions are rejected)".into()));
        }
        if self.max_len < self.min_len {
            return Err(Error::Config("max_len must be >= min_len".into()));
        }
        if self.fonts.is_empty() {
            return Err(Error::Config("at least one font is required".into()));
        }
        if self.fonts.iter().any(|f| f.advance < PATCH_WIDTH) {
            return Err(Error::Config(format!("glyph advance must be >= {PATCH_WIDTH}")));
        }
        if self.alphabet.chars().iter().all(|c| c.is_whitespace()) {
            return Err(Error::Config("alphabet needs at least one visible character".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn random_text(alphabet: &Alphabet, min_len: usize, max_len: usize, rng: &mut impl Rng) -> String {
    let chars = alphabet.chars();
    let visible: Vec<char> = chars.iter().copied().filter(|c| !c.is_whitespace()).collect();
    let n = rng.gen_range(min_len..=max_len);
    let mut text: Vec<char> = (0..n).map(|_| chars[rng.gen_range(0..chars.len())]).collect();
    // no leading/trailing or doubled whitespace
    for i in 0..n {
        let edge = i == 0 || i + 1 == n;
        let doubled = i > 0 && text[i - 1].is_whitespace();
        if text[i].is_whitespace() && (edge || doubled) {
            text[i] = visible[rng.gen_range(0..visible.len())];
        }
    }
    text.into_iter().collect()
}

/// Renders every line of `spec` in memory. Images are 8-bit quantized so they
/// equal what a PGM round trip yields.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<LineSample>> {
    spec.validate()?;
    let atlases: Vec<GlyphAtlas> = spec
        .fonts
        .iter()
        .map(|f| GlyphAtlas::synthetic(&spec.alphabet, f.clone()))
        .collect::<Result<_>>()?;
    let plan: Vec<(Split, usize)> = [(Split::Train, spec.train), (Split::Val, spec.val), (Split::Test, spec.test)]
        .iter()
        .flat_map(|&(s, n)| (0..n).map(move |i| (s, i)))
        .collect();
    plan.par_iter()
        .enumerate()
        .map(|(global, &(split, i))| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(global as u64);
            let atlas = &atlases[rng.gen_range(0..atlases.len())];
            let text = random_text(&spec.alphabet, spec.min_len, spec.max_len, &mut rng);
            let image = render_line(&text, atlas, &mut rng)?.quantized();
            Ok(LineSample { id: format!("{split}-{i:06}"), image, text, split })
        })
        .collect()
}

/// Generates `spec` and writes `images/<id>.pgm` plus `manifest.jsonl` under
/// `out_dir`. Returns the manifest path.
pub fn make_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<PathBuf> {
    let samples = generate_corpus(spec)?;
    write_corpus(&samples, out_dir)
}

/// Writes samples as PGM images plus a manifest.
pub fn write_corpus(samples: &[LineSample], out_dir: &Path) -> Result<PathBuf> {
    let img_dir = out_dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let records: Vec<ManifestRecord> = samples
        .par_iter()
        .map(|s| {
            let rel = format!("{IMAGE_DIR}/{}.pgm", s.id);
            s.image.save_pgm(&out_dir.join(&rel))?;
            Ok(ManifestRecord { id: s.id.clone(), image: rel, text: s.text.clone(), split: s.split })
        })
        .collect::<Result<_>>()?;
    let path = out_dir.join(MANIFEST_FILE);
    write_manifest(&path, &records)?;
    Ok(path)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("manifest record serializes");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Parses a JSON Lines file, skipping blank lines.
pub(crate) fn read_json_lines<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// A manifest together with the directory its image paths are relative to.
#[derive(Clone, Debug)]
pub struct Corpus {
    root: PathBuf,
    records: Vec<ManifestRecord>,
}

impl Corpus {
    pub fn open(manifest: &Path) -> Result<Self> {
        if !manifest.exists() {
            return Err(Error::MissingArtifact(manifest.to_path_buf()));
        }
        let records: Vec<ManifestRecord> = read_json_lines(manifest)?;
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id {}", r.id)));
            }
            if r.text.is_empty() {
                return Err(Error::Data(format!("sample {} has an empty transcription", r.id)));
            }
        }
        let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Corpus { root, records })
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn load_image(&self, record: &ManifestRecord) -> Result<LineImage> {
        let path = self.root.join(&record.image);
        let img = LineImage::load_pgm(&path).map_err(|e| match e {
            Error::Io { source, .. } => Error::Io {
                path: PathBuf::from(format!("{} (sample {})", path.display(), record.id)),
                source,
            },
            other => other,
        })?;
        if img.height() != LINE_HEIGHT || img.width() < PATCH_WIDTH {
            return Err(Error::Data(format!(
                "sample {}: image is {}×{}, expected height {LINE_HEIGHT} and width >= {PATCH_WIDTH}",
                record.id,
                img.height(),
                img.width()
            )));
        }
        Ok(img)
    }

    /// Loads every sample of the given split (all splits when `None`), in
    /// manifest order.
    pub fn samples(&self, split: Option<Split>) -> Result<Vec<LineSample>> {
        self.records
            .par_iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .map(|r| {
                Ok(LineSample {
                    id: r.id.clone(),
                    image: self.load_image(r)?,
                    text: r.text.clone(),
                    split: r.split,
                })
            })
            .collect()
    }
}
