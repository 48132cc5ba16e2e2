use crate::error::{Error, Result};

use super::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug)]
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
}

impl MatMulDims {
    fn a_strides(&self) -> (isize, isize) {
        if self.ta {
            (1, self.m as isize)
        } else {
            (self.k as isize, 1)
        }
    }

    fn b_strides(&self) -> (isize, isize) {
        if self.tb {
            (1, self.k as isize)
        } else {
            (self.n as isize, 1)
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    /// Calls `f(col_row, col_index, input_offset)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let ckk = self.channels * self.kh * self.kw;
        for b in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = (b * self.out_h + oy) * self.out_w + ox;
                    for c in 0..self.channels {
                        let plane = (b * self.channels + c) * self.height * self.width;
                        for dy in 0..self.kh {
                            let iy = (oy * self.sh + dy) as isize - self.ph as isize;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            for dx in 0..self.kw {
                                let ix = (ox * self.sw + dx) as isize - self.pw as isize;
                                if ix < 0 || ix >= self.width as isize {
                                    continue;
                                }
                                let col = (c * self.kh + dy) * self.kw + dx;
                                f(
                                    row * ckk + col,
                                    col,
                                    plane + iy as usize * self.width + ix as usize,
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        dims: MatMulDims,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        a: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    Gelu {
        a: Var,
    },
    Softmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        n: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Im2Col {
        a: Var,
        geom: ConvGeom,
    },
    MaxPool {
        a: Var,
        argmax: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        chunk: Vec<usize>,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    ZeroColumns {
        a: Var,
        widths: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
        weight_sum: T,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    grad: Option<Vec<T>>,
}

/// Recording of executed differentiable operations.
///
/// Nodes are appended in execution order, so replaying them in reverse index
/// order is a valid reverse topological traversal.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{what}: incompatible shapes {a:?} and {b:?}"))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Number of recorded non-leaf operations.
    pub fn num_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---- linear algebra -------------------------------------------------

    /// 2-D matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        self.gemm_op(a, b, MatMulDims { batch: 1, m: sa[0], k: sa[1], n: sb[1], ta: false, tb: false }, vec![sa[0], sb[1]])
    }

    /// 2-D product with the second operand transposed: `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_nt", &sa, &sb));
        }
        self.gemm_op(a, b, MatMulDims { batch: 1, m: sa[0], k: sa[1], n: sb[0], ta: false, tb: true }, vec![sa[0], sb[0]])
    }

    /// Batched product over the leading extent, optionally transposing either
    /// operand's trailing two axes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(shape_err("bmm", &sa, &sb));
        }
        self.gemm_op(a, b, MatMulDims { batch: sa[0], m, k, n, ta, tb }, vec![sa[0], m, n])
    }

    fn gemm_op(&mut self, a: Var, b: Var, dims: MatMulDims, out_shape: Vec<usize>) -> Result<Var> {
        let MatMulDims { batch, m, k, n, .. } = dims;
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    dims.a_strides(),
                    &db[i * k * n..(i + 1) * k * n],
                    dims.b_strides(),
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    (n as isize, 1),
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, rg, Op::MatMul { a, b, dims }))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x + *y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Add { a, b }))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(shape_err("add_bias", self.shape(a), self.shape(bias)));
        }
        let bd = self.data(bias);
        let out: Vec<T> = self
            .data(a)
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(bd).map(|(x, y)| *x + *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, bias]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::AddBias { a, bias }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x * *y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = Tensor::new(
            self.shape(a).to_vec(),
            self.data(a).iter().map(|x| *x * factor).collect(),
        )
        .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Scale { a, factor })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::from_f64_lossy(GELU_C);
        let k = T::from_f64_lossy(GELU_A);
        let half = T::from_f64_lossy(0.5);
        let value = Tensor::new(
            self.shape(a).to_vec(),
            self.data(a)
                .iter()
                .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
                .collect(),
        )
        .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Gelu { a })
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data(a);
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(x[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (x[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] = out[base + j * inner] / sum;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Softmax { a, outer, len, inner }))
    }

    /// Layer normalization over the last axis with affine gain and shift.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().unwrap_or(&0);
        if n == 0 || self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err("layer_norm", &shape, self.shape(gamma)));
        }
        let eps = T::from_f64_lossy(eps);
        let nt = T::from_usize(n).expect("usize converts");
        let (x, g, b) = (self.data(a), self.data(gamma), self.data(beta));
        let rows = x.len() / n;
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / nt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[a, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::LayerNorm { a, gamma, beta, n, xhat, rstd },
        ))
    }

    /// Row lookup: `table[V×d]` at `ids` gives `[len(ids)×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!("embedding table must be 2-D, got {shape:?}")));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Label(format!("token id {bad} outside table of {v} rows")));
        }
        let t = self.data(table);
        let out: Vec<T> = ids.iter().flat_map(|&i| t[i * d..(i + 1) * d].iter().copied()).collect();
        let rg = self.rg(&[table]);
        Ok(self.push(Tensor::new(vec![ids.len(), d], out)?, rg, Op::Embedding { table, ids: ids.to_vec() }))
    }

    // ---- convolution ----------------------------------------------------

    /// Unfolds `[B×C×H×W]` into rows of receptive fields `[B·Ho·Wo × C·kh·kw]`.
    pub fn im2col(
        &mut self,
        a: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::Dimension(format!("im2col expects B×C×H×W, got {s:?}")));
        }
        let (ph_in, pw_in) = (s[2] + 2 * padding.0, s[3] + 2 * padding.1);
        if kernel.0 == 0 || kernel.1 == 0 || kernel.0 > ph_in || kernel.1 > pw_in {
            return Err(Error::Dimension(format!(
                "kernel {kernel:?} larger than padded input {ph_in}×{pw_in}"
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Dimension("stride must be positive".into()));
        }
        let geom = ConvGeom {
            batch: s[0],
            channels: s[1],
            height: s[2],
            width: s[3],
            kh: kernel.0,
            kw: kernel.1,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            out_h: (ph_in - kernel.0) / stride.0 + 1,
            out_w: (pw_in - kernel.1) / stride.1 + 1,
        };
        let rows = geom.batch * geom.out_h * geom.out_w;
        let ckk = geom.channels * geom.kh * geom.kw;
        let mut out = vec![T::zero(); rows * ckk];
        let x = self.data(a);
        geom.for_each_tap(|o, _, i| out[o] = x[i]);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![rows, ckk], out)?, rg, Op::Im2Col { a, geom }))
    }

    /// 2-D convolution of `[B×C×H×W]` with `kernel[Cout×C×kh×kw]`, realized as
    /// unfold followed by a matrix product.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let ks = self.shape(kernel).to_vec();
        let is = self.shape(input).to_vec();
        if ks.len() != 4 || is.len() != 4 || ks[1] != is[1] {
            return Err(shape_err("conv2d", &is, &ks));
        }
        let cols = self.im2col(input, (ks[2], ks[3]), stride, padding)?;
        let (b, cout) = (is[0], ks[0]);
        let ho = (is[2] + 2 * padding.0 - ks[2]) / stride.0 + 1;
        let wo = (is[3] + 2 * padding.1 - ks[3]) / stride.1 + 1;
        let w2 = self.reshape(kernel, &[cout, ks[1] * ks[2] * ks[3]])?;
        let mut y = self.matmul_nt(cols, w2)?;
        if let Some(bias) = bias {
            y = self.add_bias(y, bias)?;
        }
        let y = self.reshape(y, &[b, ho * wo, cout])?;
        let y = self.permute(y, &[0, 2, 1])?;
        self.reshape(y, &[b, cout, ho, wo])
    }

    /// Max pooling over `[B×C×H×W]` with floor output extents.
    pub fn max_pool2d(&mut self, a: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || kernel.0 == 0 || kernel.1 == 0 || kernel.0 > s[2] || kernel.1 > s[3] {
            return Err(Error::Dimension(format!("max_pool2d kernel {kernel:?} on {s:?}")));
        }
        let (bn, c, h, w) = (s[0], s[1], s[2], s[3]);
        let oh = (h - kernel.0) / stride.0 + 1;
        let ow = (w - kernel.1) / stride.1 + 1;
        let x = self.data(a);
        let mut out = Vec::with_capacity(bn * c * oh * ow);
        let mut argmax = Vec::with_capacity(bn * c * oh * ow);
        for plane in 0..bn * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride.0 * w + ox * stride.1;
                    for dy in 0..kernel.0 {
                        for dx in 0..kernel.1 {
                            let i = base + (oy * stride.0 + dy) * w + ox * stride.1 + dx;
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![bn, c, oh, ow], out)?, rg, Op::MaxPool { a, argmax }))
    }

    /// Zeroes, per batch element `b`, every column at index `>= widths[b]` of a
    /// `[B×C×H×W]` tensor.
    pub fn zero_columns(&mut self, a: Var, widths: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || widths.len() != s[0] {
            return Err(Error::Dimension(format!("zero_columns: {} widths for {s:?}", widths.len())));
        }
        let mut out = self.data(a).to_vec();
        let plane = s[2] * s[3];
        for (b, &wid) in widths.iter().enumerate() {
            if wid >= s[3] {
                continue;
            }
            for c in 0..s[1] {
                let base = (b * s[1] + c) * plane;
                for row in out[base..base + plane].chunks_mut(s[3]) {
                    row[wid..].iter_mut().for_each(|v| *v = T::zero());
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(s, out)?, rg, Op::ZeroColumns { a, widths: widths.to_vec() }))
    }

    // ---- shape manipulation ---------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Reshape { a }))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Dimension(format!("invalid permutation {perm:?} for {s:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let out = permute_data(self.data(a), &s, perm);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(out_shape, out)?, rg, Op::Permute { a, perm: perm.to_vec() }))
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.permute(a, &[1, 0])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .map(|p| self.shape(*p).to_vec())
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        if axis >= first.len() {
            return Err(Error::Dimension(format!("concat axis {axis} out of range for {first:?}")));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        let mut chunk = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
            chunk.push(s[axis] * inner);
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &c) in parts.iter().zip(&chunk) {
                out.extend_from_slice(&self.data(*p)[o * c..(o + 1) * c]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Concat { parts: parts.to_vec(), outer, chunk }))
    }

    // ---- reductions and losses -----------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let n = T::from_usize(d.len().max(1)).expect("usize converts");
        let s = d.iter().copied().sum::<T>() / n;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Mean { a })
    }

    /// Weighted mean of per-row negative log-likelihoods:
    /// `Σ wᵢ·(−log softmax(logitsᵢ)[targetᵢ]) / Σ wᵢ`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] != weights.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy: logits {s:?}, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Label(format!("target {bad} outside [0,{k})")));
        }
        if weights.iter().any(|w| *w < T::zero() || !w.is_finite()) {
            return Err(Error::DegenerateWeights("weights must be finite and non-negative".into()));
        }
        let weight_sum = weights.iter().copied().sum::<T>();
        if weight_sum <= T::zero() {
            return Err(Error::DegenerateWeights("all position weights are zero".into()));
        }
        let x = self.data(logits);
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, v) in row.iter().enumerate() {
                let e = (*v - max).exp();
                probs[i * k + j] = e;
                z += e;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p = *p / z;
            }
            if weights[i] > T::zero() {
                let nll = z.ln() + max - row[targets[i]];
                total += weights[i] * nll;
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / weight_sum),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                weight_sum,
            },
        ))
    }

    // ---- reverse pass --------------------------------------------------

    /// Accumulates `∂loss/∂leaf` into every gradient-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((idx, g));
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        for (idx, g) in leaf_grads {
            match &mut self.nodes[idx].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let numel = |v: Var| nodes[v.0].value.numel();
        macro_rules! acc {
            ($v:expr) => {
                grads[$v.0].get_or_insert_with(|| vec![T::zero(); numel($v)])
            };
        }
        let node = &nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, dims } => {
                let MatMulDims { batch, m, k, n, .. } = *dims;
                let (sa, sb) = (dims.a_strides(), dims.b_strides());
                if needs(*a) {
                    let bd = nodes[b.0].value.data();
                    let ga = acc!(*a);
                    for i in 0..batch {
                        // dA = dC · Bᵀ written through A's storage strides.
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            (n as isize, 1),
                            &bd[i * k * n..(i + 1) * k * n],
                            (sb.1, sb.0),
                            T::one(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                            sa,
                        );
                    }
                }
                if needs(*b) {
                    let ad = nodes[a.0].value.data();
                    let gb = acc!(*b);
                    for i in 0..batch {
                        // dB = Aᵀ · dC written through B's storage strides.
                        T::gemm(
                            k,
                            m,
                            n,
                            &ad[i * m * k..(i + 1) * m * k],
                            (sa.1, sa.0),
                            &g[i * m * n..(i + 1) * m * n],
                            (n as isize, 1),
                            T::one(),
                            &mut gb[i * k * n..(i + 1) * k * n],
                            sb,
                        );
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if needs(v) {
                        acc!(v).iter_mut().zip(g).for_each(|(x, y)| *x += *y);
                    }
                }
            }
            Op::AddBias { a, bias } => {
                if needs(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(x, y)| *x += *y);
                }
                if needs(*bias) {
                    let n = numel(*bias);
                    let gb = acc!(*bias);
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += *y);
                    }
                }
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    let bd = nodes[b.0].value.data();
                    acc!(*a).iter_mut().zip(g.iter().zip(bd)).for_each(|(x, (gy, bv))| *x += *gy * *bv);
                }
                if needs(*b) {
                    let ad = nodes[a.0].value.data();
                    acc!(*b).iter_mut().zip(g.iter().zip(ad)).for_each(|(x, (gy, av))| *x += *gy * *av);
                }
            }
            Op::Scale { a, factor } => {
                if needs(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(x, y)| *x += *y * *factor);
                }
            }
            Op::Gelu { a } => {
                if needs(*a) {
                    let c = T::from_f64_lossy(GELU_C);
                    let k = T::from_f64_lossy(GELU_A);
                    let half = T::from_f64_lossy(0.5);
                    let three = T::from_f64_lossy(3.0);
                    let xd = nodes[a.0].value.data();
                    acc!(*a).iter_mut().zip(g.iter().zip(xd)).for_each(|(acc, (gy, &x))| {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let d = half * (T::one() + t)
                            + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
                        *acc += *gy * d;
                    });
                }
            }
            Op::Softmax { a, outer, len, inner } => {
                if needs(*a) {
                    let y = node.value.data();
                    let ga = acc!(*a);
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * len * inner + i;
                            let mut dot = T::zero();
                            for j in 0..*len {
                                dot += g[base + j * inner] * y[base + j * inner];
                            }
                            for j in 0..*len {
                                let p = base + j * inner;
                                ga[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { a, gamma, beta, n, xhat, rstd } => {
                let n = *n;
                let nt = T::from_usize(n).expect("usize converts");
                if needs(*gamma) {
                    let gg = acc!(*gamma);
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if needs(*beta) {
                    let gb = acc!(*beta);
                    for grow in g.chunks(n) {
                        gb.iter_mut().zip(grow).for_each(|(x, y)| *x += *y);
                    }
                }
                if needs(*a) {
                    let gamma_d = nodes[gamma.0].value.data();
                    let ga = acc!(*a);
                    let mut dxhat = vec![T::zero(); n];
                    for (r, rs) in rstd.iter().enumerate() {
                        let grow = &g[r * n..(r + 1) * n];
                        let hrow = &xhat[r * n..(r + 1) * n];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            dxhat[j] = grow[j] * gamma_d[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * hrow[j];
                        }
                        for j in 0..n {
                            ga[r * n + j] += *rs / nt * (nt * dxhat[j] - s1 - hrow[j] * s2);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if needs(*table) {
                    let d = nodes[table.0].value.shape()[1];
                    let gt = acc!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(x, y)| *x += *y);
                    }
                }
            }
            Op::Im2Col { a, geom } => {
                if needs(*a) {
                    let ga = acc!(*a);
                    geom.for_each_tap(|o, _, i| ga[i] += g[o]);
                }
            }
            Op::MaxPool { a, argmax } => {
                if needs(*a) {
                    let ga = acc!(*a);
                    for (gy, &i) in g.iter().zip(argmax) {
                        ga[i] += *gy;
                    }
                }
            }
            Op::ZeroColumns { a, widths } => {
                if needs(*a) {
                    let s = node.value.shape();
                    let ga = acc!(*a);
                    let plane = s[2] * s[3];
                    for (b, &wid) in widths.iter().enumerate() {
                        for c in 0..s[1] {
                            let base = (b * s[1] + c) * plane;
                            for (grow, arow) in g[base..base + plane]
                                .chunks(s[3])
                                .zip(ga[base..base + plane].chunks_mut(s[3]))
                            {
                                let keep = wid.min(s[3]);
                                arow[..keep].iter_mut().zip(&grow[..keep]).for_each(|(x, y)| *x += *y);
                            }
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if needs(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(x, y)| *x += *y);
                }
            }
            Op::Permute { a, perm } => {
                if needs(*a) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let back = permute_data(g, node.value.shape(), &inv);
                    acc!(*a).iter_mut().zip(&back).for_each(|(x, y)| *x += *y);
                }
            }
            Op::Concat { parts, outer, chunk } => {
                let row: usize = chunk.iter().sum();
                let mut offset = 0;
                for (p, &c) in parts.iter().zip(chunk) {
                    if needs(*p) {
                        let gp = acc!(*p);
                        for o in 0..*outer {
                            gp[o * c..(o + 1) * c]
                                .iter_mut()
                                .zip(&g[o * row + offset..o * row + offset + c])
                                .for_each(|(x, y)| *x += *y);
                        }
                    }
                    offset += c;
                }
            }
            Op::Sum { a } => {
                if needs(*a) {
                    let gy = g[0];
                    acc!(*a).iter_mut().for_each(|x| *x += gy);
                }
            }
            Op::Mean { a } => {
                if needs(*a) {
                    let gy = g[0] / T::from_usize(numel(*a).max(1)).expect("usize converts");
                    acc!(*a).iter_mut().for_each(|x| *x += gy);
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs, weight_sum } => {
                if needs(*logits) {
                    let k = nodes[logits.0].value.shape()[1];
                    let gl = acc!(*logits);
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let scale = g[0] * w / *weight_sum;
                        for j in 0..k {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[i * k + j] += scale * (probs[i * k + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

/// Row-major axis permutation: output axis `i` is input axis `perm[i]`.
fn permute_data<T: Copy>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    if rank == 0 || x.is_empty() {
        return x.to_vec();
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let rows = x.len() / inner_len;
    for _ in 0..rows {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.extend((0..inner_len).map(|j| x[base + j * inner_stride]));
        for ax in (0..last).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}
