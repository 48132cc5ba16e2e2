//! Character error rate over Unicode code points, micro-averaged over a
//! corpus, and greedy-decoding evaluation of a recognizer.

use serde::{Deserialize, Serialize};

use crate::dataset::{batch_images, LineSample};
use crate::error::{Error, Result};
use crate::model::{greedy_decode_batch, ModelParams};

/// Unit-cost Levenshtein distance between code-point sequences.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineResult {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub edits: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CerReport {
    pub total_edits: usize,
    pub total_ref_chars: usize,
    pub cer: f64,
    pub lines: Vec<LineResult>,
}

/// Corpus CER `Σ edits / Σ |ref|` over `(id, reference, hypothesis)` triples.
pub fn cer_report<I, S>(items: I) -> Result<CerReport>
where
    I: IntoIterator<Item = (S, S, S)>,
    S: Into<String>,
{
    let mut lines = Vec::new();
    let (mut edits, mut chars) = (0, 0);
    for (id, r, h) in items {
        let (id, reference, hypothesis) = (id.into(), r.into(), h.into());
        if reference.is_empty() {
            return Err(Error::Data(format!("line {id} has an empty reference")));
        }
        let e = edit_distance(&reference, &hypothesis);
        edits += e;
        chars += reference.chars().count();
        lines.push(LineResult { id, reference, hypothesis, edits: e });
    }
    if chars == 0 {
        return Err(Error::EmptyInput("no reference lines to score".into()));
    }
    Ok(CerReport { total_edits: edits, total_ref_chars: chars, cer: edits as f64 / chars as f64, lines })
}

/// CER of `(reference, hypothesis)` pairs; line ids are their indices.
pub fn cer(pairs: &[(&str, &str)]) -> Result<CerReport> {
    cer_report(pairs.iter().enumerate().map(|(i, (r, h))| (i.to_string(), r.to_string(), h.to_string())))
}

/// Greedy-decodes every sample (no augmentation) and scores it. Lines are
/// batched by width; the report keeps input order.
pub fn evaluate_model(
    params: &ModelParams,
    samples: &[LineSample],
    max_len: usize,
    batch_size: usize,
) -> Result<CerReport> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by_key(|&i| (samples[i].image.width(), i));
    let mut hyps = vec![String::new(); samples.len()];
    for chunk in order.chunks(batch_size.max(1)) {
        let images: Vec<_> = chunk.iter().map(|&i| &samples[i].image).collect();
        let batch = batch_images(&images)?;
        for (&i, h) in chunk.iter().zip(greedy_decode_batch(params, &batch, max_len)?) {
            hyps[i] = h;
        }
    }
    cer_report(
        samples
            .iter()
            .zip(hyps)
            .map(|(s, h)| (s.id.clone(), s.text.clone(), h)),
    )
}
