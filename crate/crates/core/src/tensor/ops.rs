//! Op definitions: eager forward kernels plus one backward rule each.
//!
//! Constructors validate shapes up front and return `TensorError` on
//! mismatch, so a malformed graph fails at build time rather than deep in a
//! training step.

use std::sync::Arc;

use super::{GradAcc, Node, Result, Tensor, TensorError, MASK_FILL};

pub(crate) enum Op {
    Matmul { a: Tensor, b: Tensor },
    Add { a: Tensor, b: Tensor },
    AddRow { a: Tensor, row: Tensor },
    Mul { a: Tensor, b: Tensor },
    Scale { a: Tensor, c: f64 },
    ScaleGrad { a: Tensor, factor: f64 },
    Softmax { a: Tensor },
    LogSoftmax { a: Tensor },
    LayerNorm { x: Tensor, gamma: Tensor, beta: Tensor, eps: f64 },
    Conv1dDepthwise { x: Tensor, w: Tensor },
    Conv2d { x: Tensor, w: Tensor, stride: usize, pad: usize },
    Embedding { table: Tensor, ids: Arc<Vec<usize>> },
    ConcatLast { a: Tensor, b: Tensor },
    SliceLast { a: Tensor, start: usize, len: usize },
    Permute { a: Tensor, perm: Vec<usize> },
    Reshape { a: Tensor },
    MaskedFill { a: Tensor, mask: Arc<Vec<f64>> },
    Swish { a: Tensor },
    Glu { a: Tensor },
    Dropout { a: Tensor, mask: Arc<Vec<f64>> },
    SumAll { a: Tensor },
    MeanAll { a: Tensor },
    CtcLoss { logp: Tensor, ext: Arc<Vec<usize>>, blank: usize },
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("tensors have rank >= 1")
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

// a (m,k) * b (k,n) -> (m,n)
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

// g (m,n) * b^T (n,k) -> (m,k), b given as (k,n)
fn mm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += grow[j] * brow[j];
            }
            out[i * k + p] = s;
        }
    }
    out
}

// a^T (k,m) * g (m,n) -> (k,n), a given as (m,k)
fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
    out
}

fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..x.len() / cols {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for j in 0..cols {
            let e = (row[j] - m).exp();
            orow[j] = e;
            sum += e;
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn conv2d_out_dim(i: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (i + 2 * pad).checked_sub(kernel).map(|d| d / stride + 1)
}

impl Tensor {
    fn unary(&self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        Tensor::make(shape, data, Some(op).filter(|_| requires_grad), requires_grad)
    }

    fn view(&self, shape: Vec<usize>, op: Op) -> Tensor {
        let requires_grad = self.requires_grad();
        Tensor {
            node: Arc::new(Node {
                id: super::fresh_id(),
                shape,
                data: Arc::clone(&self.node.data),
                op: Some(op).filter(|_| requires_grad),
                requires_grad,
            }),
        }
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = mm_nn(self.data(), rhs.data(), m, k, n);
        Ok(self.unary(
            vec![m, n],
            data,
            Op::Matmul { a: self.clone(), b: rhs.clone() },
        ))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(mismatch(
                "add",
                format!("{:?} vs {:?}", self.shape(), rhs.shape()),
            ));
        }
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.unary(
            self.shape().to_vec(),
            data,
            Op::Add { a: self.clone(), b: rhs.clone() },
        ))
    }

    /// Broadcast a length-C vector over the last axis of `self`.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let c = last_dim(self.shape());
        if row.shape() != [c] {
            return Err(mismatch(
                "add_row",
                format!("{:?} + row {:?}", self.shape(), row.shape()),
            ));
        }
        let rv = row.data();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + rv[i % c])
            .collect();
        Ok(self.unary(
            self.shape().to_vec(),
            data,
            Op::AddRow { a: self.clone(), row: row.clone() },
        ))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(mismatch(
                "mul",
                format!("{:?} vs {:?}", self.shape(), rhs.shape()),
            ));
        }
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.unary(
            self.shape().to_vec(),
            data,
            Op::Mul { a: self.clone(), b: rhs.clone() },
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x * c).collect();
        self.unary(
            self.shape().to_vec(),
            data,
            Op::Scale { a: self.clone(), c },
        )
    }

    /// Identity forward; backward multiplies the incoming gradient by
    /// `factor`. With a negative factor this reverses gradients, which is
    /// how the adversarial branch detaches language identity from the
    /// encoder.
    pub fn scale_grad(&self, factor: f64) -> Tensor {
        self.view(
            self.shape().to_vec(),
            Op::ScaleGrad { a: self.clone(), factor },
        )
    }

    pub fn softmax(&self) -> Tensor {
        let cols = last_dim(self.shape());
        let data = softmax_rows(self.data(), cols);
        self.unary(self.shape().to_vec(), data, Op::Softmax { a: self.clone() })
    }

    pub fn log_softmax(&self) -> Tensor {
        let cols = last_dim(self.shape());
        let x = self.data();
        let mut data = vec![0.0; x.len()];
        for r in 0..x.len() / cols {
            let row = &x[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..cols {
                data[r * cols + j] = row[j] - lse;
            }
        }
        self.unary(
            self.shape().to_vec(),
            data,
            Op::LogSoftmax { a: self.clone() },
        )
    }

    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let c = last_dim(self.shape());
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(mismatch(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.shape(),
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        let x = self.data();
        let (gv, bv) = (gamma.data(), beta.data());
        let mut data = vec![0.0; x.len()];
        for r in 0..x.len() / c {
            let row = &x[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                data[r * c + j] = (row[j] - mean) * inv * gv[j] + bv[j];
            }
        }
        Ok(self.unary(
            self.shape().to_vec(),
            data,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                eps,
            },
        ))
    }

    /// Per-channel 1-D convolution over (T, C) with an odd kernel (K, C),
    /// zero padding on both sides so the output is also (T, C).
    pub fn conv1d_depthwise(&self, w: &Tensor) -> Result<Tensor> {
        let (sx, sw) = (self.shape(), w.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sw[0] % 2 == 0 {
            return Err(mismatch(
                "conv1d_depthwise",
                format!("x {:?}, w {:?} (kernel must be odd)", sx, sw),
            ));
        }
        let (t, c) = (sx[0], sx[1]);
        let k = sw[0];
        let p = k / 2;
        let (x, wv) = (self.data(), w.data());
        let mut data = vec![0.0; t * c];
        for ti in 0..t {
            for kk in 0..k {
                let src = ti + kk;
                if src < p || src - p >= t {
                    continue;
                }
                let xrow = &x[(src - p) * c..(src - p + 1) * c];
                let wrow = &wv[kk * c..(kk + 1) * c];
                let orow = &mut data[ti * c..(ti + 1) * c];
                for ch in 0..c {
                    orow[ch] += xrow[ch] * wrow[ch];
                }
            }
        }
        Ok(self.unary(
            vec![t, c],
            data,
            Op::Conv1dDepthwise { x: self.clone(), w: w.clone() },
        ))
    }

    /// 2-D convolution of (Cin, H, W) with weights (Cout, Cin, KH, KW),
    /// no bias.
    pub fn conv2d(&self, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let (sx, sw) = (self.shape(), w.shape());
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] || stride == 0 {
            return Err(mismatch("conv2d", format!("x {:?}, w {:?}", sx, sw)));
        }
        let (cin, h, wdt) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        let (oh, ow) = match (
            conv2d_out_dim(h, kh, stride, pad),
            conv2d_out_dim(wdt, kw, stride, pad),
        ) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
            _ => {
                return Err(mismatch(
                    "conv2d",
                    format!("input {:?} smaller than kernel {:?}", sx, sw),
                ))
            }
        };
        let (x, wv) = (self.data(), w.data());
        let mut data = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for ci in 0..cin {
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let weight = wv[((co * cin + ci) * kh + khi) * kw + kwi];
                        if weight == 0.0 {
                            continue;
                        }
                        for ohi in 0..oh {
                            let ih = ohi * stride + khi;
                            if ih < pad || ih - pad >= h {
                                continue;
                            }
                            for owi in 0..ow {
                                let iw = owi * stride + kwi;
                                if iw < pad || iw - pad >= wdt {
                                    continue;
                                }
                                data[(co * oh + ohi) * ow + owi] +=
                                    weight * x[(ci * h + (ih - pad)) * wdt + (iw - pad)];
                            }
                        }
                    }
                }
            }
        }
        Ok(self.unary(
            vec![cout, oh, ow],
            data,
            Op::Conv2d {
                x: self.clone(),
                w: w.clone(),
                stride,
                pad,
            },
        ))
    }

    /// Row lookup: `self` is a (V, D) table, output is (ids.len(), D).
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(mismatch("embedding", format!("table {:?}", s)));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding",
                index: bad,
                size: v,
            });
        }
        let table = self.data();
        let mut data = vec![0.0; ids.len() * d];
        for (n, &i) in ids.iter().enumerate() {
            data[n * d..(n + 1) * d].copy_from_slice(&table[i * d..(i + 1) * d]);
        }
        Ok(self.unary(
            vec![ids.len(), d],
            data,
            Op::Embedding {
                table: self.clone(),
                ids: Arc::new(ids.to_vec()),
            },
        ))
    }

    pub fn concat_last(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(mismatch("concat_last", format!("{:?} ++ {:?}", sa, sb)));
        }
        let (ca, cb) = (last_dim(sa), last_dim(sb));
        let rows = self.numel() / ca;
        let mut data = vec![0.0; rows * (ca + cb)];
        for r in 0..rows {
            data[r * (ca + cb)..r * (ca + cb) + ca]
                .copy_from_slice(&self.data()[r * ca..(r + 1) * ca]);
            data[r * (ca + cb) + ca..(r + 1) * (ca + cb)]
                .copy_from_slice(&rhs.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        Ok(self.unary(
            shape,
            data,
            Op::ConcatLast { a: self.clone(), b: rhs.clone() },
        ))
    }

    pub fn slice_last(&self, start: usize, len: usize) -> Result<Tensor> {
        let c = last_dim(self.shape());
        if start + len > c || len == 0 {
            return Err(mismatch(
                "slice_last",
                format!("[{}..{}) of last dim {}", start, start + len, c),
            ));
        }
        let rows = self.numel() / c;
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&self.data()[r * c + start..r * c + start + len]);
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.unary(
            shape,
            data,
            Op::SliceLast { a: self.clone(), start, len },
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(mismatch(
                "permute",
                format!("perm {:?} for shape {:?}", perm, self.shape()),
            ));
        }
        let (shape, data) = permute_data(self.data(), self.shape(), perm);
        Ok(self.unary(
            shape,
            data,
            Op::Permute { a: self.clone(), perm: perm.to_vec() },
        ))
    }

    /// 2-D transpose.
    pub fn t(&self) -> Result<Tensor> {
        self.permute(&[1, 0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(mismatch(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        Ok(self.view(shape.to_vec(), Op::Reshape { a: self.clone() }))
    }

    /// Where `mask` is 1 the output is a large negative constant, else the
    /// input passes through. Applied to attention scores before softmax.
    pub fn masked_fill(&self, mask: &Tensor) -> Result<Tensor> {
        if mask.shape() != self.shape() {
            return Err(mismatch(
                "masked_fill",
                format!("x {:?}, mask {:?}", self.shape(), mask.shape()),
            ));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(TensorError::InvalidValue {
                op: "masked_fill",
                detail: "mask entries must be 0 or 1".into(),
            });
        }
        let data = self
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&x, &m)| if m == 1.0 { MASK_FILL } else { x })
            .collect();
        Ok(self.unary(
            self.shape().to_vec(),
            data,
            Op::MaskedFill {
                a: self.clone(),
                mask: Arc::clone(&mask.node.data),
            },
        ))
    }

    pub fn swish(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x * sigmoid(x)).collect();
        self.unary(self.shape().to_vec(), data, Op::Swish { a: self.clone() })
    }

    /// Gated linear unit over the last axis: splits (..., 2C) into value and
    /// gate halves, returns value * sigmoid(gate) with shape (..., C).
    pub fn glu(&self) -> Result<Tensor> {
        let c2 = last_dim(self.shape());
        if c2 % 2 != 0 {
            return Err(mismatch(
                "glu",
                format!("last dim {} must be even", c2),
            ));
        }
        let c = c2 / 2;
        let rows = self.numel() / c2;
        let x = self.data();
        let mut data = vec![0.0; rows * c];
        for r in 0..rows {
            for j in 0..c {
                data[r * c + j] = x[r * c2 + j] * sigmoid(x[r * c2 + c + j]);
            }
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = c;
        Ok(self.unary(shape, data, Op::Glu { a: self.clone() }))
    }

    /// Inverted dropout: kept entries are scaled by 1/(1-p) so the expected
    /// value is unchanged. p = 0 is the identity.
    pub fn dropout<R: rand::Rng>(&self, p: f64, rng: &mut R) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidValue {
                op: "dropout",
                detail: format!("p = {} outside [0, 1)", p),
            });
        }
        if p == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = Tensor::from_vec(mask, self.shape())?;
        self.dropout_with_mask(&mask)
    }

    /// Dropout with a caller-supplied mask; exposed so gradient checks can
    /// pin the mask.
    pub fn dropout_with_mask(&self, mask: &Tensor) -> Result<Tensor> {
        if mask.shape() != self.shape() {
            return Err(mismatch(
                "dropout",
                format!("x {:?}, mask {:?}", self.shape(), mask.shape()),
            ));
        }
        let data = self
            .data()
            .iter()
            .zip(mask.data())
            .map(|(x, m)| x * m)
            .collect();
        Ok(self.unary(
            self.shape().to_vec(),
            data,
            Op::Dropout {
                a: self.clone(),
                mask: Arc::clone(&mask.node.data),
            },
        ))
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum();
        self.unary(vec![1], vec![s], Op::SumAll { a: self.clone() })
    }

    pub fn mean_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel() as f64;
        self.unary(vec![1], vec![s / n], Op::MeanAll { a: self.clone() })
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let map_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = vec![0.0; n];
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        for d in (0..rank).rev() {
            coords[d] += 1;
            src += map_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            src -= coords[d] * map_strides[d];
            coords[d] = 0;
        }
    }
    (out_shape, out)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (d, &p) in perm.iter().enumerate() {
        inv[p] = d;
    }
    inv
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Matmul { a, b } | Op::Add { a, b } | Op::Mul { a, b } | Op::ConcatLast { a, b } => {
                vec![a, b]
            }
            Op::AddRow { a, row } => vec![a, row],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Conv1dDepthwise { x, w } | Op::Conv2d { x, w, .. } => vec![x, w],
            Op::Embedding { table, .. } => vec![table],
            Op::Scale { a, .. }
            | Op::ScaleGrad { a, .. }
            | Op::Softmax { a }
            | Op::LogSoftmax { a }
            | Op::SliceLast { a, .. }
            | Op::Permute { a, .. }
            | Op::Reshape { a }
            | Op::MaskedFill { a, .. }
            | Op::Swish { a }
            | Op::Glu { a }
            | Op::Dropout { a, .. }
            | Op::SumAll { a }
            | Op::MeanAll { a } => vec![a],
            Op::CtcLoss { logp, .. } => vec![logp],
        }
    }

    pub(crate) fn backward(&self, out: &Tensor, g: &[f64], acc: &mut GradAcc) {
        match self {
            Op::Matmul { a, b } => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.requires_grad() {
                    let da = mm_nt(g, b.data(), m, n, k);
                    if let Some(slot) = acc.slot(a) {
                        for (s, v) in slot.iter_mut().zip(da) {
                            *s += v;
                        }
                    }
                }
                if b.requires_grad() {
                    let db = mm_tn(a.data(), g, m, k, n);
                    if let Some(slot) = acc.slot(b) {
                        for (s, v) in slot.iter_mut().zip(db) {
                            *s += v;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for t in [a, b] {
                    if let Some(slot) = acc.slot(t) {
                        for (s, &v) in slot.iter_mut().zip(g) {
                            *s += v;
                        }
                    }
                }
            }
            Op::AddRow { a, row } => {
                if let Some(slot) = acc.slot(a) {
                    for (s, &v) in slot.iter_mut().zip(g) {
                        *s += v;
                    }
                }
                if let Some(slot) = acc.slot(row) {
                    let c = slot.len();
                    for (i, &v) in g.iter().enumerate() {
                        slot[i % c] += v;
                    }
                }
            }
            Op::Mul { a, b } => {
                if let Some(slot) = acc.slot(a) {
                    for ((s, &v), &bv) in slot.iter_mut().zip(g).zip(b.data()) {
                        *s += v * bv;
                    }
                }
                if let Some(slot) = acc.slot(b) {
                    for ((s, &v), &av) in slot.iter_mut().zip(g).zip(a.data()) {
                        *s += v * av;
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(slot) = acc.slot(a) {
                    for (s, &v) in slot.iter_mut().zip(g) {
                        *s += v * c;
                    }
                }
            }
            Op::ScaleGrad { a, factor } => {
                if let Some(slot) = acc.slot(a) {
                    for (s, &v) in slot.iter_mut().zip(g) {
                        *s += v * factor;
                    }
                }
            }
            Op::Softmax { a } => {
                if let Some(slot) = acc.slot(a) {
                    let cols = last_dim(out.shape());
                    let y = out.data();
                    for r in 0..y.len() / cols {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        let sr = &mut slot[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            sr[j] += (gr[j] - dot) * yr[j];
                        }
                    }
                }
            }
            Op::LogSoftmax { a } => {
                if let Some(slot) = acc.slot(a) {
                    let cols = last_dim(out.shape());
                    let y = out.data();
                    for r in 0..y.len() / cols {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        let sr = &mut slot[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            sr[j] += gr[j] - yr[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let c = last_dim(x.shape());
                let xv = x.data();
                let gv = gamma.data();
                let rows = xv.len() / c;
                let mut xhat = vec![0.0; xv.len()];
                let mut inv = vec![0.0; rows];
                for r in 0..rows {
                    let row = &xv[r * c..(r + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    inv[r] = 1.0 / (var + eps).sqrt();
                    for j in 0..c {
                        xhat[r * c + j] = (row[j] - mean) * inv[r];
                    }
                }
                if let Some(slot) = acc.slot(x) {
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let xr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dxhat = gr[j] * gv[j];
                            m1 += dxhat;
                            m2 += dxhat * xr[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        let sr = &mut slot[r * c..(r + 1) * c];
                        for j in 0..c {
                            let dxhat = gr[j] * gv[j];
                            sr[j] += inv[r] * (dxhat - m1 - xr[j] * m2);
                        }
                    }
                }
                if let Some(slot) = acc.slot(gamma) {
                    for r in 0..rows {
                        for j in 0..c {
                            slot[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if let Some(slot) = acc.slot(beta) {
                    for r in 0..rows {
                        for j in 0..c {
                            slot[j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::Conv1dDepthwise { x, w } => {
                let (t, c) = (x.shape()[0], x.shape()[1]);
                let k = w.shape()[0];
                let p = k / 2;
                if let Some(slot) = acc.slot(x) {
                    let wv = w.data();
                    for ti in 0..t {
                        for kk in 0..k {
                            let src = ti + kk;
                            if src < p || src - p >= t {
                                continue;
                            }
                            for ch in 0..c {
                                slot[(src - p) * c + ch] += g[ti * c + ch] * wv[kk * c + ch];
                            }
                        }
                    }
                }
                if let Some(slot) = acc.slot(w) {
                    let xv = x.data();
                    for ti in 0..t {
                        for kk in 0..k {
                            let src = ti + kk;
                            if src < p || src - p >= t {
                                continue;
                            }
                            for ch in 0..c {
                                slot[kk * c + ch] += g[ti * c + ch] * xv[(src - p) * c + ch];
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (cin, h, wdt) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
                let (oh, ow) = (out.shape()[1], out.shape()[2]);
                let xv = x.data();
                let wv = w.data();
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                for co in 0..cout {
                    for ci in 0..cin {
                        for khi in 0..kh {
                            for kwi in 0..kw {
                                let widx = ((co * cin + ci) * kh + khi) * kw + kwi;
                                for ohi in 0..oh {
                                    let ih = ohi * stride + khi;
                                    if ih < *pad || ih - pad >= h {
                                        continue;
                                    }
                                    for owi in 0..ow {
                                        let iw = owi * stride + kwi;
                                        if iw < *pad || iw - pad >= wdt {
                                            continue;
                                        }
                                        let go = g[(co * oh + ohi) * ow + owi];
                                        let xidx = (ci * h + (ih - pad)) * wdt + (iw - pad);
                                        dx[xidx] += go * wv[widx];
                                        dw[widx] += go * xv[xidx];
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(slot) = acc.slot(x) {
                    for (s, v) in slot.iter_mut().zip(dx) {
                        *s += v;
                    }
                }
                if let Some(slot) = acc.slot(w) {
                    for (s, v) in slot.iter_mut().zip(dw) {
                        *s += v;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(slot) = acc.slot(table) {
                    let d = table.shape()[1];
                    for (n, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            slot[i * d + j] += g[n * d + j];
                        }
                    }
                }
            }
            Op::ConcatLast { a, b } => {
                let ca = last_dim(a.shape());
                let cb = last_dim(b.shape());
                let rows = a.numel() / ca;
                if let Some(slot) = acc.slot(a) {
                    for r in 0..rows {
                        for j in 0..ca {
                            slot[r * ca + j] += g[r * (ca + cb) + j];
                        }
                    }
                }
                if let Some(slot) = acc.slot(b) {
                    for r in 0..rows {
                        for j in 0..cb {
                            slot[r * cb + j] += g[r * (ca + cb) + ca + j];
                        }
                    }
                }
            }
            Op::SliceLast { a, start, len } => {
                if let Some(slot) = acc.slot(a) {
                    let c = last_dim(a.shape());
                    let rows = a.numel() / c;
                    for r in 0..rows {
                        for j in 0..*len {
                            slot[r * c + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::Permute { a, perm } => {
                if let Some(slot) = acc.slot(a) {
                    let (_, dg) = permute_data(g, out.shape(), &inverse_perm(perm));
                    for (s, v) in slot.iter_mut().zip(dg) {
                        *s += v;
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(slot) = acc.slot(a) {
                    for (s, &v) in slot.iter_mut().zip(g) {
                        *s += v;
                    }
                }
            }
            Op::MaskedFill { a, mask } => {
                if let Some(slot) = acc.slot(a) {
                    for ((s, &v), &m) in slot.iter_mut().zip(g).zip(mask.iter()) {
                        *s += v * (1.0 - m);
                    }
                }
            }
            Op::Swish { a } => {
                if let Some(slot) = acc.slot(a) {
                    for ((s, &v), &x) in slot.iter_mut().zip(g).zip(a.data()) {
                        let sg = sigmoid(x);
                        *s += v * (sg + x * sg * (1.0 - sg));
                    }
                }
            }
            Op::Glu { a } => {
                if let Some(slot) = acc.slot(a) {
                    let c2 = last_dim(a.shape());
                    let c = c2 / 2;
                    let rows = a.numel() / c2;
                    let x = a.data();
                    for r in 0..rows {
                        for j in 0..c {
                            let val = x[r * c2 + j];
                            let sg = sigmoid(x[r * c2 + c + j]);
                            let gv = g[r * c + j];
                            slot[r * c2 + j] += gv * sg;
                            slot[r * c2 + c + j] += gv * val * sg * (1.0 - sg);
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(slot) = acc.slot(a) {
                    for ((s, &v), &m) in slot.iter_mut().zip(g).zip(mask.iter()) {
                        *s += v * m;
                    }
                }
            }
            Op::SumAll { a } => {
                if let Some(slot) = acc.slot(a) {
                    for s in slot.iter_mut() {
                        *s += g[0];
                    }
                }
            }
            Op::MeanAll { a } => {
                if let Some(slot) = acc.slot(a) {
                    let inv = 1.0 / a.numel() as f64;
                    for s in slot.iter_mut() {
                        *s += g[0] * inv;
                    }
                }
            }
            Op::CtcLoss { logp, ext, blank } => {
                if let Some(slot) = acc.slot(logp) {
                    ctc_backward(logp.data(), logp.shape(), ext, *blank, g[0], slot);
                }
            }
        }
    }
}

/// Log-space add that treats -inf as the additive identity.
pub(crate) fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn extended_labels(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target {
        ext.push(y);
        ext.push(blank);
    }
    ext
}

/// Skip transition s-2 -> s is allowed when ext[s] is a label distinct from
/// ext[s-2].
fn skip_allowed(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

fn ctc_alpha(logp: &[f64], t_len: usize, v: usize, ext: &[usize], blank: usize) -> Vec<f64> {
    let s_len = ext.len();
    let mut alpha = vec![f64::NEG_INFINITY; t_len * s_len];
    alpha[0] = logp[ext[0]];
    if s_len > 1 {
        alpha[1] = logp[ext[1]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                acc = logaddexp(acc, alpha[(t - 1) * s_len + s - 1]);
            }
            if skip_allowed(ext, s, blank) {
                acc = logaddexp(acc, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = if acc == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                acc + logp[t * v + ext[s]]
            };
        }
    }
    alpha
}

fn ctc_log_z(alpha: &[f64], t_len: usize, s_len: usize) -> f64 {
    let last = &alpha[(t_len - 1) * s_len..t_len * s_len];
    let mut z = last[s_len - 1];
    if s_len > 1 {
        z = logaddexp(z, last[s_len - 2]);
    }
    z
}

/// Alignment-marginal negative log likelihood of `target` under per-frame
/// log posteriors `logp` (T, V). Returns None when no monotonic alignment
/// fits in T frames.
pub(crate) fn ctc_nll(logp: &Tensor, target: &[usize], blank: usize) -> Result<Option<Tensor>> {
    let s = logp.shape();
    if s.len() != 2 || s[0] == 0 {
        return Err(mismatch("ctc", format!("log posteriors {:?}", s)));
    }
    let (t_len, v) = (s[0], s[1]);
    if blank >= v {
        return Err(TensorError::IndexOutOfRange {
            op: "ctc",
            index: blank,
            size: v,
        });
    }
    if let Some(&bad) = target.iter().find(|&&y| y >= v || y == blank) {
        return Err(TensorError::IndexOutOfRange {
            op: "ctc",
            index: bad,
            size: v,
        });
    }
    let ext = extended_labels(target, blank);
    let alpha = ctc_alpha(logp.data(), t_len, v, &ext, blank);
    let log_z = ctc_log_z(&alpha, t_len, ext.len());
    if log_z == f64::NEG_INFINITY {
        return Ok(None);
    }
    let requires_grad = logp.requires_grad();
    let op = Op::CtcLoss {
        logp: logp.clone(),
        ext: Arc::new(ext),
        blank,
    };
    Ok(Some(Tensor::make(
        vec![1],
        vec![-log_z],
        Some(op).filter(|_| requires_grad),
        requires_grad,
    )))
}

/// Occupancy-weighted gradient: d(-log Z)/d logp[t][k] is minus the total
/// posterior probability of emitting k at frame t, summed over lattice
/// states that carry k.
fn ctc_backward(logp: &[f64], shape: &[usize], ext: &[usize], blank: usize, g: f64, slot: &mut [f64]) {
    let (t_len, v) = (shape[0], shape[1]);
    let s_len = ext.len();
    let alpha = ctc_alpha(logp, t_len, v, ext, blank);
    let log_z = ctc_log_z(&alpha, t_len, s_len);
    // beta[t][s]: completion probability from state s after emitting at t,
    // so alpha[t][s] + beta[t][s] sums to log Z over s at every t.
    let mut beta = vec![f64::NEG_INFINITY; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[(t + 1) * s_len + s] + logp[(t + 1) * v + ext[s]];
            if s + 1 < s_len {
                acc = logaddexp(
                    acc,
                    beta[(t + 1) * s_len + s + 1] + logp[(t + 1) * v + ext[s + 1]],
                );
            }
            if s + 2 < s_len && skip_allowed(ext, s + 2, blank) {
                acc = logaddexp(
                    acc,
                    beta[(t + 1) * s_len + s + 2] + logp[(t + 1) * v + ext[s + 2]],
                );
            }
            beta[t * s_len + s] = acc;
        }
    }
    for t in 0..t_len {
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - log_z;
            if occ == f64::NEG_INFINITY {
                continue;
            }
            slot[t * v + ext[s]] -= g * occ.exp();
        }
    }
}
