//! Hybrid CTC/attention model with an optional language-diarization decoder.
//!
//! The encoder is a conv2d-subsampling frontend followed by conformer blocks.
//! Two transformer decoders share the same block implementation: the token
//! decoder emits logits over the token vocabulary, the language decoder emits
//! logits over the four language labels. The language decoder can run with a
//! causal mask or with full context, and its posteriors can be concatenated
//! onto the token decoder's input embeddings (the posterior-bias adapter).
//! A gradient-scaling hook between the encoder and the language decoder
//! implements the adversarial variant.

mod blocks;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::{self, CtcOutcome};
use crate::tensor::{Result, Tensor, TensorError};
use crate::vocab::{BLANK_ID, LD_VOCAB_SIZE};

pub use blocks::{causal_mask, positional_encoding, DropoutCtx, TransformerDecoder};
use blocks::{ConformerBlock, Frontend, Linear};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ld_layers: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    pub subsample_factor: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub ld_vocab_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub ld_full_context: bool,
    pub use_lpb: bool,
    pub use_grl: bool,
    pub grl_lambda: f64,
    pub lpb_stop_gradient: bool,
    pub dropout: f64,
    pub label_smoothing: f64,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            d: 64,
            heads: 4,
            enc_layers: 4,
            dec_layers: 2,
            ld_layers: 2,
            ffn_dim: 256,
            conv_kernel: 7,
            subsample_factor: 4,
            feature_dim: 16,
            vocab_size: 44,
            ld_vocab_size: LD_VOCAB_SIZE,
            alpha: 0.3,
            beta: 0.0,
            ld_full_context: true,
            use_lpb: false,
            use_grl: false,
            grl_lambda: 1.0,
            lpb_stop_gradient: true,
            dropout: 0.1,
            label_smoothing: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| TensorError::InvalidValue { op: "model_config", detail };
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(bad(format!("width {} must be a positive multiple of heads {}", self.d, self.heads)));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(bad("encoder and decoder need at least one layer".into()));
        }
        if self.ffn_dim == 0 || self.feature_dim == 0 {
            return Err(bad("ffn_dim and feature_dim must be positive".into()));
        }
        if self.conv_kernel == 0 || self.conv_kernel % 2 == 0 {
            return Err(bad(format!("conv_kernel {} must be odd", self.conv_kernel)));
        }
        if !matches!(self.subsample_factor, 2 | 4 | 8) {
            return Err(bad(format!("subsample_factor {} not in {{2, 4, 8}}", self.subsample_factor)));
        }
        if self.vocab_size < 5 {
            return Err(bad(format!("vocab_size {} leaves no room beyond specials", self.vocab_size)));
        }
        if self.ld_vocab_size != LD_VOCAB_SIZE {
            return Err(bad(format!("ld_vocab_size must be {LD_VOCAB_SIZE}")));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !self.alpha.is_finite() {
            return Err(bad(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(bad(format!("beta {} must be >= 0", self.beta)));
        }
        if self.use_lpb && self.use_grl {
            return Err(bad("use_lpb and use_grl are mutually exclusive".into()));
        }
        if self.use_grl && self.beta == 0.0 {
            return Err(bad("use_grl requires beta > 0".into()));
        }
        if !self.grl_lambda.is_finite() {
            return Err(bad("grl_lambda must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(bad(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if self.use_grl && self.ld_layers == 0 || self.use_lpb && self.ld_layers == 0 || self.beta > 0.0 && self.ld_layers == 0 {
            return Err(bad("ld_layers must be positive when the language decoder is in use".into()));
        }
        Ok(())
    }

    /// Whether this configuration instantiates the language decoder at all.
    pub fn has_ld(&self) -> bool {
        self.beta > 0.0 || self.use_lpb || self.use_grl
    }

    fn n_subsample_convs(&self) -> usize {
        self.subsample_factor.trailing_zeros() as usize
    }

    /// Subsampled length for an input of `t` frames.
    pub fn subsampled_len(&self, t: usize) -> usize {
        let mut t1 = t;
        for _ in 0..self.n_subsample_convs() {
            t1 = t1.div_ceil(2);
        }
        t1
    }
}

/// Per-utterance loss terms. `total` is alpha * ctc + (1 - alpha) * att
/// (+ beta * ld when the language decoder is active).
pub struct UttLosses {
    pub l_ctc: Tensor,
    pub ctc_feasible: bool,
    pub l_att: Tensor,
    pub l_ld: Option<Tensor>,
    pub total: Tensor,
}

pub struct Model {
    pub cfg: ModelConfig,
    frontend: Frontend,
    encoder: Vec<ConformerBlock>,
    asr_decoder: TransformerDecoder,
    ld_decoder: Option<TransformerDecoder>,
    lpb_proj: Option<Linear>,
    ctc_head: Linear,
    ld_passes: AtomicU64,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frontend = Frontend::new(&mut rng, cfg.feature_dim, cfg.d, cfg.n_subsample_convs());
        let encoder = (0..cfg.enc_layers)
            .map(|_| ConformerBlock::new(&mut rng, cfg.d, cfg.heads, cfg.ffn_dim, cfg.conv_kernel))
            .collect();
        let asr_decoder = TransformerDecoder::new(
            &mut rng, cfg.vocab_size, cfg.vocab_size, cfg.d, cfg.heads, cfg.ffn_dim, cfg.dec_layers,
        );
        let ld_decoder = cfg.has_ld().then(|| {
            TransformerDecoder::new(
                &mut rng, cfg.vocab_size, cfg.ld_vocab_size, cfg.d, cfg.heads, cfg.ffn_dim, cfg.ld_layers,
            )
        });
        // Passthrough init: the adapter starts as a near-identity over the
        // embedding slice, so enabling the bias path barely perturbs the
        // decoder input until training finds a use for the posteriors.
        let lpb_proj =
            cfg.use_lpb.then(|| Linear::new_passthrough(&mut rng, cfg.d + cfg.ld_vocab_size, cfg.d));
        let ctc_head = Linear::new(&mut rng, cfg.d, cfg.vocab_size);
        Ok(Model {
            cfg,
            frontend,
            encoder,
            asr_decoder,
            ld_decoder,
            lpb_proj,
            ctc_head,
            ld_passes: AtomicU64::new(0),
        })
    }

    /// Number of language-decoder forward passes since construction.
    pub fn ld_pass_count(&self) -> u64 {
        self.ld_passes.load(Ordering::Relaxed)
    }

    /// Encoder forward: (T, F) features to (T1, D) states.
    pub fn encode(&self, features: &Tensor, ctx: &mut DropoutCtx) -> Result<Tensor> {
        let shape = features.shape();
        if shape.len() != 2 || shape[1] != self.cfg.feature_dim {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                detail: format!("expected (T, {}), got {:?}", self.cfg.feature_dim, shape),
            });
        }
        if shape[0] < self.cfg.subsample_factor {
            return Err(TensorError::InvalidValue {
                op: "encode",
                detail: format!(
                    "utterance of {} frames is too short for {}x subsampling",
                    shape[0], self.cfg.subsample_factor
                ),
            });
        }
        let mut h = self.frontend.forward(features, ctx)?;
        for block in &self.encoder {
            h = block.forward(&h, ctx)?;
        }
        Ok(h)
    }

    /// Per-frame log-probabilities over the vocabulary, (T1, V).
    pub fn ctc_logprobs(&self, h: &Tensor) -> Result<Tensor> {
        Ok(self.ctc_head.forward(h)?.log_softmax())
    }

    /// Token-decoder logits for teacher-forced input ids, (N, V). When the
    /// posterior-bias adapter is active, `ld_posteriors` (N, V_ld) is
    /// concatenated onto the input embeddings and projected back to D.
    pub fn asr_logits(
        &self,
        input_ids: &[usize],
        h: &Tensor,
        ld_posteriors: Option<&Tensor>,
        ctx: &mut DropoutCtx,
    ) -> Result<Tensor> {
        let e = self.asr_decoder.embed_ids(input_ids)?;
        let e = match ld_posteriors {
            Some(p) => self.lpb_augment(&e, p)?,
            None => e,
        };
        self.asr_decoder.forward_embedded(&e, h, true, ctx)
    }

    /// Posterior-bias adapter: concatenates (N, D) embeddings with (N, V_ld)
    /// posteriors and projects back to (N, D).
    pub fn lpb_augment(&self, embeddings: &Tensor, posteriors: &Tensor) -> Result<Tensor> {
        let proj = self.lpb_proj.as_ref().ok_or_else(|| TensorError::InvalidValue {
            op: "posterior_bias",
            detail: "posteriors supplied but use_lpb is off".into(),
        })?;
        let es = embeddings.shape();
        if es.len() != 2 || es[1] != self.cfg.d || posteriors.shape() != [es[0], self.cfg.ld_vocab_size] {
            return Err(TensorError::ShapeMismatch {
                op: "posterior_bias",
                detail: format!(
                    "embeddings {:?} and posteriors {:?} do not align",
                    es,
                    posteriors.shape()
                ),
            });
        }
        proj.forward(&embeddings.concat_last(posteriors)?)
    }

    /// Language-decoder logits over the label set, (N, V_ld). `full_context`
    /// drops the causal mask; decoding must always pass false. The encoder
    /// gradient is scaled by -grl_lambda when the adversarial hook is on.
    pub fn ld_logits(
        &self,
        input_ids: &[usize],
        h: &Tensor,
        full_context: bool,
        ctx: &mut DropoutCtx,
    ) -> Result<Tensor> {
        let dec = self.ld_decoder.as_ref().ok_or_else(|| TensorError::InvalidValue {
            op: "ld_decode",
            detail: "this configuration has no language decoder".into(),
        })?;
        self.ld_passes.fetch_add(1, Ordering::Relaxed);
        let h_in = if self.cfg.use_grl {
            h.scale_grad(-self.cfg.grl_lambda)
        } else {
            h.clone()
        };
        dec.forward_ids(input_ids, &h_in, !full_context, ctx)
    }

    /// Language posteriors ready for the bias adapter: softmaxed and, when
    /// `lpb_stop_gradient` is set, detached so the token-decoder loss cannot
    /// reach the language decoder or the encoder through them.
    pub fn lpb_posteriors(&self, ld_logits: &Tensor) -> Tensor {
        let p = ld_logits.softmax();
        if self.cfg.lpb_stop_gradient {
            p.detach()
        } else {
            p
        }
    }

    /// Teacher-forced losses for one utterance. `tokens` is the bracketed
    /// sequence [sos, y_1..y_m, eos]; `ld_ids` its per-token language label
    /// ids (same length). The language decoder, when present, reads the same
    /// input positions as the token decoder and is supervised with each
    /// position's own label.
    pub fn utterance_loss(
        &self,
        features: &Tensor,
        tokens: &[usize],
        ld_ids: &[usize],
        ctx: &mut DropoutCtx,
    ) -> Result<UttLosses> {
        if tokens.len() < 2 {
            return Err(TensorError::InvalidValue {
                op: "utterance_loss",
                detail: "token sequence must be bracketed by sos/eos".into(),
            });
        }
        if ld_ids.len() != tokens.len() {
            return Err(TensorError::ShapeMismatch {
                op: "utterance_loss",
                detail: format!("{} label ids for {} tokens", ld_ids.len(), tokens.len()),
            });
        }
        let h = self.encode(features, ctx)?;

        let target = &tokens[1..tokens.len() - 1];
        let CtcOutcome { loss, feasible } = losses::ctc_loss(&self.ctc_logprobs(&h)?, target, BLANK_ID)?;
        let l_ctc = if feasible {
            loss.scale(1.0 / target.len().max(1) as f64)
        } else {
            Tensor::scalar_const(0.0)
        };

        let input_ids = &tokens[..tokens.len() - 1];
        let asr_targets = &tokens[1..];
        let (l_ld, posteriors) = match &self.ld_decoder {
            Some(_) => {
                let logits = self.ld_logits(input_ids, &h, self.cfg.ld_full_context, ctx)?;
                let l_ld = losses::label_smoothed_ce(
                    &logits,
                    &ld_ids[..input_ids.len()],
                    self.cfg.label_smoothing,
                )?;
                let posteriors = self.cfg.use_lpb.then(|| self.lpb_posteriors(&logits));
                (Some(l_ld), posteriors)
            }
            None => (None, None),
        };
        let asr_logits = self.asr_logits(input_ids, &h, posteriors.as_ref(), ctx)?;
        let l_att = losses::label_smoothed_ce(&asr_logits, asr_targets, self.cfg.label_smoothing)?;

        let total = match &l_ld {
            Some(l_ld) => losses::joint_loss(&l_ctc, &l_att, l_ld, self.cfg.alpha, self.cfg.beta)?,
            None => losses::asr_loss(&l_ctc, &l_att, self.cfg.alpha)?,
        };
        Ok(UttLosses { l_ctc, ctc_feasible: feasible, l_att, l_ld, total })
    }

    /// Visits every trainable parameter in a fixed order with a stable name.
    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor)) {
        self.frontend.visit("frontend", f);
        for (i, block) in self.encoder.iter().enumerate() {
            block.visit(&format!("encoder.{i}"), f);
        }
        self.asr_decoder.visit("asr_decoder", f);
        if let Some(dec) = &self.ld_decoder {
            dec.visit("ld_decoder", f);
        }
        if let Some(proj) = &self.lpb_proj {
            proj.visit("lpb_proj", f);
        }
        self.ctc_head.visit("ctc_head", f);
    }

    /// Mutable variant of [`Model::visit_params`], used to install updated
    /// parameter tensors after an optimizer step or a checkpoint load.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.frontend.visit_mut("frontend", f);
        for (i, block) in self.encoder.iter_mut().enumerate() {
            block.visit_mut(&format!("encoder.{i}"), f);
        }
        self.asr_decoder.visit_mut("asr_decoder", f);
        if let Some(dec) = &mut self.ld_decoder {
            dec.visit_mut("ld_decoder", f);
        }
        if let Some(proj) = &mut self.lpb_proj {
            proj.visit_mut("lpb_proj", f);
        }
        self.ctc_head.visit_mut("ctc_head", f);
    }

    /// Named snapshot of every parameter's data, in visit order.
    pub fn param_snapshot(&self) -> Vec<(String, Vec<f64>, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t| {
            out.push((name, t.data().to_vec(), t.shape().to_vec()));
        });
        out
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }
}

#[cfg(test)]
mod tests;
