use std::collections::BTreeMap;

use super::params::{GroupSet, ModelParams, ParamGroup};
use crate::dataset::{LINE_HEIGHT, PATCH_WIDTH};
use crate::error::{Error, Result};
use crate::tensorcore::{Graph, Scalar, Tensor, Var};

const MASKED: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

/// Binds parameters into a graph on first use. Tensors of trainable groups
/// become gradient-tracking leaves, all others constants.
pub struct Scope<'p, T: Scalar> {
    params: &'p ModelParams<T>,
    trainable: GroupSet,
    vars: BTreeMap<String, Var>,
}

impl<'p, T: Scalar> Scope<'p, T> {
    pub fn new(params: &'p ModelParams<T>, trainable: GroupSet) -> Self {
        Scope { params, trainable, vars: BTreeMap::new() }
    }

    /// Scope whose parameters are already bound to `vars`.
    pub fn with_bindings(params: &'p ModelParams<T>, vars: BTreeMap<String, Var>) -> Self {
        Scope { params, trainable: GroupSet::none(), vars }
    }

    pub fn frozen(params: &'p ModelParams<T>) -> Self {
        Self::new(params, GroupSet::none())
    }

    pub fn params(&self) -> &'p ModelParams<T> {
        self.params
    }

    pub fn get(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not part of this model")))?;
        let v = g.leaf(t.clone(), self.trainable.contains(ParamGroup::of(name)));
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Bound variables by parameter name.
    pub fn into_bindings(self) -> BTreeMap<String, Var> {
        self.vars
    }
}

/// Closed-form sinusoidal table `[len × dim]`: even dims `sin`, odd dims `cos`
/// of `pos / 10000^(2i/dim)`.
pub fn positional_encoding<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    Tensor::from_fn(&[len, dim], |idx| {
        let (pos, j) = (idx / dim, idx % dim);
        let freq = 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
        let angle = pos as f64 / freq;
        T::from_f64_lossy(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

fn add_positions<T: Scalar>(g: &mut Graph<T>, x: Var, batch: usize, len: usize, dim: usize) -> Result<Var> {
    let pe = positional_encoding::<T>(len, dim);
    let tiled: Vec<T> = (0..batch).flat_map(|_| pe.data().iter().copied()).collect();
    let pe = g.constant(Tensor::new(vec![batch * len, dim], tiled)?);
    g.add(x, pe)
}

fn linear<T: Scalar>(g: &mut Graph<T>, s: &mut Scope<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = s.get(g, &format!("{prefix}.weight"))?;
    let b = s.get(g, &format!("{prefix}.bias"))?;
    let y = g.matmul_nt(x, w)?;
    g.add_bias(y, b)
}

fn norm<T: Scalar>(g: &mut Graph<T>, s: &mut Scope<T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = s.get(g, &format!("{prefix}.gamma"))?;
    let beta = s.get(g, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

fn mlp<T: Scalar>(g: &mut Graph<T>, s: &mut Scope<T>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, s, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, s, &format!("{prefix}.fc2"), h)
}

/// Additive mask `[B·H × Tq × Tk]`: 0 where `allowed(b, i, j)`, −1e9 elsewhere.
fn attention_mask<T: Scalar>(
    batch: usize,
    heads: usize,
    tq: usize,
    tk: usize,
    allowed: impl Fn(usize, usize, usize) -> bool,
) -> Result<Tensor<T>> {
    let masked = T::from_f64_lossy(MASKED);
    let mut data = Vec::with_capacity(batch * heads * tq * tk);
    for b in 0..batch {
        let plane: Vec<T> = (0..tq * tk)
            .map(|k| if allowed(b, k / tk, k % tk) { T::zero() } else { masked })
            .collect();
        for _ in 0..heads {
            data.extend_from_slice(&plane);
        }
    }
    Tensor::new(vec![batch * heads, tq, tk], data)
}

struct AttnShape {
    batch: usize,
    tq: usize,
    tk: usize,
    heads: usize,
    dim: usize,
}

fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, batch: usize, t: usize, heads: usize, dh: usize) -> Result<Var> {
    let x = g.reshape(x, &[batch, t, heads, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[batch * heads, t, dh])
}

fn attention<T: Scalar>(
    g: &mut Graph<T>,
    s: &mut Scope<T>,
    prefix: &str,
    xq: Var,
    xkv: Var,
    shape: &AttnShape,
    mask: Var,
) -> Result<Var> {
    let AttnShape { batch, tq, tk, heads, dim } = *shape;
    let dh = dim / heads;
    let q = linear(g, s, &format!("{prefix}.wq"), xq)?;
    let k = linear(g, s, &format!("{prefix}.wk"), xkv)?;
    let v = linear(g, s, &format!("{prefix}.wv"), xkv)?;
    let q = split_heads(g, q, batch, tq, heads, dh)?;
    let k = split_heads(g, k, batch, tk, heads, dh)?;
    let v = split_heads(g, v, batch, tk, heads, dh)?;
    let scores = g.bmm(q, k, false, true)?;
    let scores = g.scale(scores, T::from_f64_lossy(1.0 / (dh as f64).sqrt()));
    let scores = g.add(scores, mask)?;
    let p = g.softmax(scores, 2)?;
    let o = g.bmm(p, v, false, false)?;
    let o = g.reshape(o, &[batch, heads, tq, dh])?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[batch * tq, dim])?;
    linear(g, s, &format!("{prefix}.wo"), o)
}

/// Encoder activations for a batch.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[B·T × d]`, row `b·T + t`.
    pub states: Var,
    pub batch: usize,
    pub len: usize,
    /// `B·T`, true at real (non-padding) patch positions.
    pub key_mask: Vec<bool>,
}

fn check_images<T: Scalar>(images: &Tensor<T>, widths: &[usize]) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 || s[2] != LINE_HEIGHT {
        return Err(Error::Dimension(format!(
            "encoder expects B×1×{LINE_HEIGHT}×W images, got {s:?}"
        )));
    }
    if s[3] < PATCH_WIDTH || widths.len() != s[0] {
        return Err(Error::Dimension(format!(
            "encoder got {} widths for image batch {s:?} (width must be >= {PATCH_WIDTH})",
            widths.len()
        )));
    }
    if let Some(w) = widths.iter().find(|&&w| w < PATCH_WIDTH || w > s[3]) {
        return Err(Error::Dimension(format!("line width {w} outside [{PATCH_WIDTH}, {}]", s[3])));
    }
    Ok(())
}

/// Convolutional stem and projection: `[B·T × d]` rows for `T = floor(W_max/8)`
/// positions per line. Columns beyond each line's width are zeroed before
/// every convolution, so real positions do not depend on batch padding.
pub fn stem<T: Scalar>(
    g: &mut Graph<T>,
    s: &mut Scope<T>,
    images: &Tensor<T>,
    widths: &[usize],
) -> Result<(Var, usize)> {
    check_images(images, widths)?;
    let cfg = s.params().config().encoder.stem.clone();
    let batch = images.shape()[0];
    let mut x = g.constant(images.clone());
    let mut level = widths.to_vec();
    for b in 0..cfg.channels.len() {
        for i in 0..cfg.convs_per_block {
            x = g.zero_columns(x, &level)?;
            let w = s.get(g, &format!("stem.conv{b}_{i}.weight"))?;
            let bias = s.get(g, &format!("stem.conv{b}_{i}.bias"))?;
            x = g.conv2d(x, w, Some(bias), (1, 1), (1, 1))?;
            x = g.gelu(x);
        }
        if b < 3 {
            x = g.max_pool2d(x, (2, 2), (2, 2))?;
            level.iter_mut().for_each(|w| *w /= 2);
        } else {
            x = g.max_pool2d(x, (6, 1), (6, 1))?;
        }
    }
    let xs = g.shape(x).to_vec();
    let (c, len) = (xs[1], xs[3]);
    let x = g.reshape(x, &[batch, c, len])?;
    let x = g.permute(x, &[0, 2, 1])?;
    let x = g.reshape(x, &[batch * len, c])?;
    Ok((linear(g, s, "stem.proj", x)?, len))
}

/// Stem, positional encoding and transformer layers. Padded patch positions
/// are masked as attention keys.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    s: &mut Scope<T>,
    images: &Tensor<T>,
    widths: &[usize],
) -> Result<EncoderOutput> {
    let cfg = s.params().config().encoder.clone();
    let batch = images.shape().first().copied().unwrap_or(0);
    let (x, len) = stem(g, s, images, widths)?;
    let mut x = add_positions(g, x, batch, len, cfg.dim)?;

    let key_mask: Vec<bool> = widths
        .iter()
        .flat_map(|w| (0..len).map(move |t| t < w / PATCH_WIDTH))
        .collect();
    let mask = attention_mask::<T>(batch, cfg.heads, len, len, |b, _, j| key_mask[b * len + j])?;
    let mask = g.constant(mask);
    let shape = AttnShape { batch, tq: len, tk: len, heads: cfg.heads, dim: cfg.dim };
    for l in 0..cfg.layers {
        let p = format!("encoder.layer{l}");
        let h = norm(g, s, &format!("{p}.ln1"), x)?;
        let h = attention(g, s, &format!("{p}.attn"), h, h, &shape, mask)?;
        x = g.add(x, h)?;
        let h = norm(g, s, &format!("{p}.ln2"), x)?;
        let h = mlp(g, s, &format!("{p}.mlp"), h)?;
        x = g.add(x, h)?;
    }
    let states = norm(g, s, "encoder.ln_f", x)?;
    Ok(EncoderOutput { states, batch, len, key_mask })
}

/// Pre-training projection head: `[B·T × d] → [B·T × k]`.
pub fn project<T: Scalar>(g: &mut Graph<T>, s: &mut Scope<T>, states: Var) -> Result<Var> {
    linear(g, s, "head", states)
}

/// Linear map to the decoder width followed by fresh positional encoding.
pub fn adapt<T: Scalar>(g: &mut Graph<T>, s: &mut Scope<T>, enc: &EncoderOutput) -> Result<Var> {
    let a = s
        .params()
        .config()
        .adapter
        .ok_or_else(|| Error::Config("model has no adapter".into()))?;
    if g.shape(enc.states) != [enc.batch * enc.len, a.in_dim] {
        return Err(Error::Dimension(format!(
            "adapter expects {}-dim states, got {:?}",
            a.in_dim,
            g.shape(enc.states)
        )));
    }
    let y = linear(g, s, "adapter", enc.states)?;
    add_positions(g, y, enc.batch, enc.len, a.out_dim)
}

/// Teacher-forced decoder. `ids` holds `B × len` target ids starting with BOS;
/// returns logits `[B·len × vocab]`.
pub fn decode<T: Scalar>(
    g: &mut Graph<T>,
    s: &mut Scope<T>,
    memory: Var,
    memory_mask: &[bool],
    ids: &[usize],
    len: usize,
) -> Result<Var> {
    let cfg = s
        .params()
        .config()
        .decoder
        .clone()
        .ok_or_else(|| Error::Config("model has no decoder".into()))?;
    if len == 0 || ids.len() % len != 0 {
        return Err(Error::Dimension(format!("{} target ids do not form rows of {len}", ids.len())));
    }
    if len > cfg.max_len {
        return Err(Error::Length(format!(
            "target length {len} exceeds decoder maximum {}",
            cfg.max_len
        )));
    }
    let batch = ids.len() / len;
    let ms = g.shape(memory).to_vec();
    if ms.len() != 2 || ms[1] != cfg.dim || batch == 0 || ms[0] % batch != 0 || memory_mask.len() != ms[0] {
        return Err(Error::Dimension(format!(
            "decoder memory {ms:?} with {} mask entries does not match batch {batch} and dim {}",
            memory_mask.len(),
            cfg.dim
        )));
    }
    let mem_len = ms[0] / batch;
    let table = s.get(g, "decoder.embed")?;
    let x = g.embedding(table, ids)?;
    let mut x = add_positions(g, x, batch, len, cfg.dim)?;
    let causal = g.constant(attention_mask::<T>(batch, cfg.heads, len, len, |_, i, j| j <= i)?);
    let cross = g.constant(attention_mask::<T>(batch, cfg.heads, len, mem_len, |b, _, j| {
        memory_mask[b * mem_len + j]
    })?);
    let self_shape = AttnShape { batch, tq: len, tk: len, heads: cfg.heads, dim: cfg.dim };
    let cross_shape = AttnShape { batch, tq: len, tk: mem_len, heads: cfg.heads, dim: cfg.dim };
    for l in 0..cfg.layers {
        let p = format!("decoder.layer{l}");
        let h = norm(g, s, &format!("{p}.ln1"), x)?;
        let h = attention(g, s, &format!("{p}.self_attn"), h, h, &self_shape, causal)?;
        x = g.add(x, h)?;
        let h = norm(g, s, &format!("{p}.ln2"), x)?;
        let h = attention(g, s, &format!("{p}.cross_attn"), h, memory, &cross_shape, cross)?;
        x = g.add(x, h)?;
        let h = norm(g, s, &format!("{p}.ln3"), x)?;
        let h = mlp(g, s, &format!("{p}.mlp"), h)?;
        x = g.add(x, h)?;
    }
    let x = norm(g, s, "decoder.ln_f", x)?;
    linear(g, s, "decoder.out", x)
}

/// Patch states `[B × floor(W/8) × d]` for a padded image batch.
pub fn encoder_forward<T: Scalar>(
    params: &ModelParams<T>,
    images: &Tensor<T>,
    widths: &[usize],
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mut s = Scope::frozen(params);
    let out = encode(&mut g, &mut s, images, widths)?;
    let d = params.config().encoder.dim;
    g.take_value(out.states).reshape(&[out.batch, out.len, d])
}

/// Decoder memory `[B × T × d_dec]` from patch states `[B × T × d_enc]`.
pub fn adapter_forward<T: Scalar>(params: &ModelParams<T>, states: &Tensor<T>) -> Result<Tensor<T>> {
    let sh = states.shape();
    if sh.len() != 3 {
        return Err(Error::Dimension(format!("adapter expects B×T×d states, got {sh:?}")));
    }
    let (batch, len) = (sh[0], sh[1]);
    let mut g = Graph::new();
    let mut s = Scope::frozen(params);
    let flat = states.clone().reshape(&[batch * len, sh[2]])?;
    let enc = EncoderOutput { states: g.constant(flat), batch, len, key_mask: vec![true; batch * len] };
    let out = adapt(&mut g, &mut s, &enc)?;
    let d = g.shape(out)[1];
    g.take_value(out).reshape(&[batch, len, d])
}

/// Teacher-forced logits `[B × len × vocab]`.
pub fn decoder_forward<T: Scalar>(
    params: &ModelParams<T>,
    memory: &Tensor<T>,
    memory_mask: &[bool],
    ids: &[u32],
    len: usize,
) -> Result<Tensor<T>> {
    let sh = memory.shape();
    if sh.len() != 3 {
        return Err(Error::Dimension(format!("decoder memory must be B×T×d, got {sh:?}")));
    }
    let mut g = Graph::new();
    let mut s = Scope::frozen(params);
    let m = g.constant(memory.clone().reshape(&[sh[0] * sh[1], sh[2]])?);
    let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let logits = decode(&mut g, &mut s, m, memory_mask, &ids, len)?;
    let v = g.shape(logits)[1];
    g.take_value(logits).reshape(&[ids.len() / len.max(1), len, v])
}
