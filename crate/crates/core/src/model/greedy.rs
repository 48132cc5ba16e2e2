use super::forward::{adapt, decode, encode, Scope};
use super::params::ModelParams;
use crate::dataset::{batch_images, Alphabet, ImageBatch, LineImage, BOS, EOS};
use crate::error::{Error, Result};
use crate::tensorcore::{Graph, Scalar};

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy token ids per line, excluding BOS and the terminating EOS. At most
/// `max_len` tokens are produced; ties resolve to the lowest id.
pub fn greedy_ids<T: Scalar>(params: &ModelParams<T>, images: &ImageBatch, max_len: usize) -> Result<Vec<Vec<u32>>> {
    let dec = params
        .config()
        .decoder
        .as_ref()
        .ok_or_else(|| Error::Config("model has no decoder".into()))?;
    let steps = max_len.min(dec.max_len);
    let mut g = Graph::<T>::new();
    let mut s = Scope::frozen(params);
    let enc = encode(&mut g, &mut s, &images.images.cast(), &images.widths)?;
    let memory = adapt(&mut g, &mut s, &enc)?;
    let batch = images.len();
    let mut prefix: Vec<Vec<usize>> = vec![vec![BOS as usize]; batch];
    let mut out: Vec<Vec<u32>> = vec![Vec::new(); batch];
    let mut done = vec![false; batch];
    for step in 0..steps {
        let len = step + 1;
        let ids: Vec<usize> = prefix.iter().flatten().copied().collect();
        let logits = decode(&mut g, &mut s, memory, &enc.key_mask, &ids, len)?;
        let vocab = g.shape(logits)[1];
        let data = g.value(logits).data();
        for b in 0..batch {
            let next = argmax(&data[(b * len + len - 1) * vocab..(b * len + len) * vocab]);
            prefix[b].push(next);
            if done[b] {
                continue;
            }
            if next == EOS as usize {
                done[b] = true;
            } else {
                out[b].push(next as u32);
            }
        }
        if done.iter().all(|d| *d) {
            break;
        }
    }
    Ok(out)
}

fn alphabet_of<T: Scalar>(params: &ModelParams<T>) -> Result<&Alphabet> {
    params
        .config()
        .alphabet
        .as_ref()
        .ok_or_else(|| Error::Config("model carries no alphabet; cannot map ids to text".into()))
}

/// Greedy transcription of a batch of lines.
pub fn greedy_decode_batch<T: Scalar>(
    params: &ModelParams<T>,
    images: &ImageBatch,
    max_len: usize,
) -> Result<Vec<String>> {
    let alphabet = alphabet_of(params)?;
    Ok(greedy_ids(params, images, max_len)?.iter().map(|ids| alphabet.decode(ids)).collect())
}

/// Greedy transcription of one line.
pub fn greedy_decode<T: Scalar>(params: &ModelParams<T>, image: &LineImage, max_len: usize) -> Result<String> {
    let batch = batch_images(&[image])?;
    Ok(greedy_decode_batch(params, &batch, max_len)?.remove(0))
}
