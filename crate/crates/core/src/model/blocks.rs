//! Network building blocks: linear/norm layers, multi-head attention, the
//! conformer encoder block, the transformer decoder stack, and the conv2d
//! subsampling frontend.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Result, Tensor, TensorError};

/// Train-time dropout state. Evaluation uses `DropoutCtx::eval()`, which
/// makes every apply a no-op so forward passes are deterministic.
pub struct DropoutCtx<'a> {
    p: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> DropoutCtx<'a> {
    pub fn train(p: f64, rng: &'a mut ChaCha8Rng) -> DropoutCtx<'a> {
        DropoutCtx { p, rng: Some(rng) }
    }

    pub fn eval() -> DropoutCtx<'static> {
        DropoutCtx { p: 0.0, rng: None }
    }

    pub fn apply(&mut self, x: &Tensor) -> Result<Tensor> {
        match self.rng.as_mut() {
            Some(rng) if self.p > 0.0 => x.dropout(self.p, rng),
            _ => Ok(x.clone()),
        }
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::param(data, shape).expect("shape/data consistent")
}

pub struct Linear {
    w: Tensor,
    b: Option<Tensor>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, din: usize, dout: usize) -> Linear {
        let bound = (6.0 / (din + dout) as f64).sqrt();
        Linear {
            w: uniform_init(rng, &[din, dout], bound),
            b: Some(Tensor::param(vec![0.0; dout], &[dout]).expect("bias")),
        }
    }

    pub fn new_no_bias(rng: &mut ChaCha8Rng, din: usize, dout: usize) -> Linear {
        let bound = (6.0 / (din + dout) as f64).sqrt();
        Linear {
            w: uniform_init(rng, &[din, dout], bound),
            b: None,
        }
    }

    /// Projection that starts by passing the first `dout` input dims through
    /// unchanged. Used for adapters that widen an existing representation:
    /// the extra input rows get small random weights, so their contribution
    /// (and gradient path) is live from step one but far too small to drown
    /// the passed-through signal. The rows must not be identical: for inputs
    /// that sum to a constant, like probability vectors, identical rows would
    /// make the output input-independent and the backward path vanish.
    pub fn new_passthrough(rng: &mut ChaCha8Rng, din: usize, dout: usize) -> Linear {
        let mut data = vec![0.0; din * dout];
        for i in 0..dout.min(din) {
            data[i * dout + i] = 1.0;
        }
        let bound = 0.1 * (6.0 / (din + dout) as f64).sqrt();
        for cell in data.iter_mut().skip(dout.min(din) * dout) {
            *cell = rng.gen_range(-bound..bound);
        }
        Linear {
            w: Tensor::param(data, &[din, dout]).expect("shape/data consistent"),
            b: Some(Tensor::param(vec![0.0; dout], &[dout]).expect("bias")),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.w)?;
        match &self.b {
            Some(b) => y.add_row(b),
            None => Ok(y),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w"), &self.w);
        if let Some(b) = &self.b {
            f(format!("{prefix}.b"), b);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w"), &mut self.w);
        if let Some(b) = &mut self.b {
            f(format!("{prefix}.b"), b);
        }
    }
}

pub struct Ln {
    gamma: Tensor,
    beta: Tensor,
}

impl Ln {
    pub fn new(d: usize) -> Ln {
        Ln {
            gamma: Tensor::param(vec![1.0; d], &[d]).expect("gamma"),
            beta: Tensor::param(vec![0.0; d], &[d]).expect("beta"),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, 1e-5)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

pub struct Mha {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
    d: usize,
}

impl Mha {
    pub fn new(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> Mha {
        // No key bias: it shifts every score in a row by the same amount, and
        // softmax is invariant to row-constant shifts.
        Mha {
            wq: Linear::new(rng, d, d),
            wk: Linear::new_no_bias(rng, d, d),
            wv: Linear::new(rng, d, d),
            wo: Linear::new(rng, d, d),
            heads,
            d,
        }
    }

    /// Scaled dot-product attention of `q_in` over `kv`; `mask` entries of 1
    /// block the corresponding (query, key) pair.
    pub fn forward(&self, q_in: &Tensor, kv: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let q = self.wq.forward(q_in)?;
        let k = self.wk.forward(kv)?;
        let v = self.wv.forward(kv)?;
        let dk = self.d / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut cat: Option<Tensor> = None;
        for h in 0..self.heads {
            let qh = q.slice_last(h * dk, dk)?;
            let kh = k.slice_last(h * dk, dk)?;
            let vh = v.slice_last(h * dk, dk)?;
            let mut scores = qh.matmul(&kh.t()?)?.scale(scale);
            if let Some(m) = mask {
                scores = scores.masked_fill(m)?;
            }
            let out = scores.softmax().matmul(&vh)?;
            cat = Some(match cat {
                Some(prev) => prev.concat_last(&out)?,
                None => out,
            });
        }
        self.wo.forward(&cat.expect("at least one head"))
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
    }
}

pub struct Ffn {
    lin1: Linear,
    lin2: Linear,
}

impl Ffn {
    pub fn new(rng: &mut ChaCha8Rng, d: usize, hidden: usize) -> Ffn {
        Ffn {
            lin1: Linear::new(rng, d, hidden),
            lin2: Linear::new(rng, hidden, d),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.lin2.forward(&self.lin1.forward(x)?.swish())
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.lin1.visit(&format!("{prefix}.lin1"), f);
        self.lin2.visit(&format!("{prefix}.lin2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.lin1.visit_mut(&format!("{prefix}.lin1"), f);
        self.lin2.visit_mut(&format!("{prefix}.lin2"), f);
    }
}

/// Half-step FFN, self-attention, convolution module, half-step FFN, final
/// norm; pre-norm residuals throughout.
pub struct ConformerBlock {
    ln_ffn1: Ln,
    ffn1: Ffn,
    ln_mhsa: Ln,
    mhsa: Mha,
    ln_conv: Ln,
    conv_pw1: Linear,
    conv_dw: Tensor,
    conv_ln: Ln,
    conv_pw2: Linear,
    ln_ffn2: Ln,
    ffn2: Ffn,
    ln_out: Ln,
}

impl ConformerBlock {
    pub fn new(rng: &mut ChaCha8Rng, d: usize, heads: usize, ffn_dim: usize, kernel: usize) -> ConformerBlock {
        let dw_bound = (1.0 / kernel as f64).sqrt();
        ConformerBlock {
            ln_ffn1: Ln::new(d),
            ffn1: Ffn::new(rng, d, ffn_dim),
            ln_mhsa: Ln::new(d),
            mhsa: Mha::new(rng, d, heads),
            ln_conv: Ln::new(d),
            conv_pw1: Linear::new(rng, d, 2 * d),
            conv_dw: uniform_init(rng, &[kernel, d], dw_bound),
            conv_ln: Ln::new(d),
            conv_pw2: Linear::new(rng, d, d),
            ln_ffn2: Ln::new(d),
            ffn2: Ffn::new(rng, d, ffn_dim),
            ln_out: Ln::new(d),
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut DropoutCtx) -> Result<Tensor> {
        let x = x.add(&ctx.apply(&self.ffn1.forward(&self.ln_ffn1.forward(x)?)?)?.scale(0.5))?;
        let attn_in = self.ln_mhsa.forward(&x)?;
        let x = x.add(&ctx.apply(&self.mhsa.forward(&attn_in, &attn_in, None)?)?)?;
        let conv = {
            let y = self.conv_pw1.forward(&self.ln_conv.forward(&x)?)?.glu()?;
            let y = y.conv1d_depthwise(&self.conv_dw)?;
            let y = self.conv_ln.forward(&y)?.swish();
            self.conv_pw2.forward(&y)?
        };
        let x = x.add(&ctx.apply(&conv)?)?;
        let x = x.add(&ctx.apply(&self.ffn2.forward(&self.ln_ffn2.forward(&x)?)?)?.scale(0.5))?;
        self.ln_out.forward(&x)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.ln_ffn1.visit(&format!("{prefix}.ln_ffn1"), f);
        self.ffn1.visit(&format!("{prefix}.ffn1"), f);
        self.ln_mhsa.visit(&format!("{prefix}.ln_mhsa"), f);
        self.mhsa.visit(&format!("{prefix}.mhsa"), f);
        self.ln_conv.visit(&format!("{prefix}.ln_conv"), f);
        self.conv_pw1.visit(&format!("{prefix}.conv_pw1"), f);
        f(format!("{prefix}.conv_dw"), &self.conv_dw);
        self.conv_ln.visit(&format!("{prefix}.conv_ln"), f);
        self.conv_pw2.visit(&format!("{prefix}.conv_pw2"), f);
        self.ln_ffn2.visit(&format!("{prefix}.ln_ffn2"), f);
        self.ffn2.visit(&format!("{prefix}.ffn2"), f);
        self.ln_out.visit(&format!("{prefix}.ln_out"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.ln_ffn1.visit_mut(&format!("{prefix}.ln_ffn1"), f);
        self.ffn1.visit_mut(&format!("{prefix}.ffn1"), f);
        self.ln_mhsa.visit_mut(&format!("{prefix}.ln_mhsa"), f);
        self.mhsa.visit_mut(&format!("{prefix}.mhsa"), f);
        self.ln_conv.visit_mut(&format!("{prefix}.ln_conv"), f);
        self.conv_pw1.visit_mut(&format!("{prefix}.conv_pw1"), f);
        f(format!("{prefix}.conv_dw"), &mut self.conv_dw);
        self.conv_ln.visit_mut(&format!("{prefix}.conv_ln"), f);
        self.conv_pw2.visit_mut(&format!("{prefix}.conv_pw2"), f);
        self.ln_ffn2.visit_mut(&format!("{prefix}.ln_ffn2"), f);
        self.ffn2.visit_mut(&format!("{prefix}.ffn2"), f);
        self.ln_out.visit_mut(&format!("{prefix}.ln_out"), f);
    }
}

pub struct DecoderLayer {
    ln1: Ln,
    self_attn: Mha,
    ln2: Ln,
    cross_attn: Mha,
    ln3: Ln,
    ffn: Ffn,
}

impl DecoderLayer {
    pub fn new(rng: &mut ChaCha8Rng, d: usize, heads: usize, ffn_dim: usize) -> DecoderLayer {
        DecoderLayer {
            ln1: Ln::new(d),
            self_attn: Mha::new(rng, d, heads),
            ln2: Ln::new(d),
            cross_attn: Mha::new(rng, d, heads),
            ln3: Ln::new(d),
            ffn: Ffn::new(rng, d, ffn_dim),
        }
    }

    pub fn forward(
        &self,
        x: &Tensor,
        h: &Tensor,
        self_mask: Option<&Tensor>,
        ctx: &mut DropoutCtx,
    ) -> Result<Tensor> {
        let s_in = self.ln1.forward(x)?;
        let x = x.add(&ctx.apply(&self.self_attn.forward(&s_in, &s_in, self_mask)?)?)?;
        let c_in = self.ln2.forward(&x)?;
        let x = x.add(&ctx.apply(&self.cross_attn.forward(&c_in, h, None)?)?)?;
        let f_in = self.ln3.forward(&x)?;
        x.add(&ctx.apply(&self.ffn.forward(&f_in)?)?)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.self_attn.visit(&format!("{prefix}.self_attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.cross_attn.visit(&format!("{prefix}.cross_attn"), f);
        self.ln3.visit(&format!("{prefix}.ln3"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.self_attn.visit_mut(&format!("{prefix}.self_attn"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.cross_attn.visit_mut(&format!("{prefix}.cross_attn"), f);
        self.ln3.visit_mut(&format!("{prefix}.ln3"), f);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
    }
}

/// Embedding table, pre-norm decoder layers with cross-attention into the
/// encoder output, final norm, output projection. Serves both the token
/// decoder (output V) and the language decoder (output V_ld); the mask
/// regime is the caller's choice per forward.
pub struct TransformerDecoder {
    embed: Tensor,
    layers: Vec<DecoderLayer>,
    ln_out: Ln,
    out: Linear,
    d: usize,
}

impl TransformerDecoder {
    pub fn new(
        rng: &mut ChaCha8Rng,
        v_in: usize,
        v_out: usize,
        d: usize,
        heads: usize,
        ffn_dim: usize,
        layers: usize,
    ) -> TransformerDecoder {
        let bound = (3.0 / d as f64).sqrt();
        TransformerDecoder {
            embed: uniform_init(rng, &[v_in, d], bound),
            layers: (0..layers).map(|_| DecoderLayer::new(rng, d, heads, ffn_dim)).collect(),
            ln_out: Ln::new(d),
            out: Linear::new(rng, d, v_out),
            d,
        }
    }

    pub fn embed_ids(&self, ids: &[usize]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(TensorError::InvalidValue {
                op: "decoder",
                detail: "empty prefix".into(),
            });
        }
        Ok(self.embed.embedding(ids)?.scale((self.d as f64).sqrt()))
    }

    /// Runs the stack on already-embedded inputs and returns output logits.
    /// `causal` masks self-attention so position i sees only positions <= i.
    pub fn forward_embedded(
        &self,
        e: &Tensor,
        h: &Tensor,
        causal: bool,
        ctx: &mut DropoutCtx,
    ) -> Result<Tensor> {
        let n = e.shape()[0];
        let x = e.add(&positional_encoding(n, self.d))?;
        let mut x = ctx.apply(&x)?;
        let mask = if causal { Some(causal_mask(n)) } else { None };
        for layer in &self.layers {
            x = layer.forward(&x, h, mask.as_ref(), ctx)?;
        }
        self.out.forward(&self.ln_out.forward(&x)?)
    }

    pub fn forward_ids(
        &self,
        ids: &[usize],
        h: &Tensor,
        causal: bool,
        ctx: &mut DropoutCtx,
    ) -> Result<Tensor> {
        let e = self.embed_ids(ids)?;
        self.forward_embedded(&e, h, causal, ctx)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.embed"), &self.embed);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}.layers.{i}"), f);
        }
        self.ln_out.visit(&format!("{prefix}.ln_out"), f);
        self.out.visit(&format!("{prefix}.out"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.embed"), &mut self.embed);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}.layers.{i}"), f);
        }
        self.ln_out.visit_mut(&format!("{prefix}.ln_out"), f);
        self.out.visit_mut(&format!("{prefix}.out"), f);
    }
}

/// Stacked stride-2 3x3 convolutions (one per factor-of-2 of subsampling),
/// flattened and projected to D, plus positional encoding.
pub struct Frontend {
    convs: Vec<Tensor>,
    proj: Linear,
    d: usize,
}

impl Frontend {
    pub fn new(rng: &mut ChaCha8Rng, feature_dim: usize, d: usize, n_convs: usize) -> Frontend {
        let mut convs = Vec::with_capacity(n_convs);
        let mut f1 = feature_dim;
        for i in 0..n_convs {
            let cin = if i == 0 { 1 } else { d };
            let bound = (1.0 / (cin * 9) as f64).sqrt();
            convs.push(uniform_init(rng, &[d, cin, 3, 3], bound));
            f1 = f1.div_ceil(2);
        }
        Frontend {
            convs,
            proj: Linear::new(rng, d * f1, d),
            d,
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut DropoutCtx) -> Result<Tensor> {
        let (t, f) = (x.shape()[0], x.shape()[1]);
        let mut y = x.reshape(&[1, t, f])?;
        for w in &self.convs {
            y = y.conv2d(w, 2, 1)?.swish();
        }
        let (c, t1, f1) = (y.shape()[0], y.shape()[1], y.shape()[2]);
        let y = y.permute(&[1, 0, 2])?.reshape(&[t1, c * f1])?;
        let y = self.proj.forward(&y)?;
        let y = y.add(&positional_encoding(t1, self.d))?;
        ctx.apply(&y)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, w) in self.convs.iter().enumerate() {
            f(format!("{prefix}.conv{i}"), w);
        }
        self.proj.visit(&format!("{prefix}.proj"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, w) in self.convs.iter_mut().enumerate() {
            f(format!("{prefix}.conv{i}"), w);
        }
        self.proj.visit_mut(&format!("{prefix}.proj"), f);
    }
}

/// Absolute sinusoidal positional encoding, (n, d) constant.
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for t in 0..n {
        for j in 0..d {
            let i = j / 2;
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[t * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_vec(data, &[n, d]).expect("shape/data consistent")
}

/// (n, n) mask with 1 wherever key position j exceeds query position i.
pub fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            data[i * n + j] = 1.0;
        }
    }
    Tensor::from_vec(data, &[n, n]).expect("shape/data consistent")
}
