//! Joint CTC/attention beam search with incremental CTC prefix scoring and
//! optional step-wise language-posterior bias.
//!
//! The CTC prefix scorer keeps, per hypothesis, the log probability of the
//! prefix having been emitted by each frame, split into blank-ending and
//! non-blank-ending mass. Extending a prefix is O(T). The combined score is
//! alpha * ctc + (1 - alpha) * att at every step.
//!
//! End-of-sequence competes for beam slots like any other extension: a
//! hypothesis only terminates when appending eos survives pruning. If nothing
//! terminates within the length budget the best unterminated hypotheses are
//! returned with a warning flag.

use serde::{Deserialize, Serialize};

use crate::model::{DropoutCtx, Model};
use crate::tensor::{logaddexp, Result, Tensor, TensorError};
use crate::vocab::{Vocab, BLANK_ID, SOS_EOS_ID};

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Per-frame forward variables for one prefix: `r_nb[t]` is the log
/// probability that the prefix has been emitted by frame t with its last
/// token as the latest emission, `r_b[t]` the same but followed by blanks.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcPrefixState {
    pub r_nb: Vec<f64>,
    pub r_b: Vec<f64>,
    /// Log prefix probability (mass of all complete outputs extending it).
    pub prefix_logprob: f64,
    last: Option<usize>,
}

impl CtcPrefixState {
    /// Log probability that the output equals the prefix exactly.
    pub fn full_sequence_logprob(&self) -> f64 {
        let t_last = self.r_nb.len() - 1;
        logaddexp(self.r_nb[t_last], self.r_b[t_last])
    }
}

/// State for the empty prefix: only blank emissions so far.
pub fn ctc_prefix_initial(frame_logprobs: &Tensor, blank: usize) -> Result<CtcPrefixState> {
    let shape = frame_logprobs.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "ctc_prefix",
            detail: format!("expected non-empty (T, V) frame log-probs, got {shape:?}"),
        });
    }
    let (t1, v) = (shape[0], shape[1]);
    if blank >= v {
        return Err(TensorError::IndexOutOfRange { op: "ctc_prefix", index: blank, size: v });
    }
    let lp = frame_logprobs.data();
    let mut r_b = Vec::with_capacity(t1);
    let mut acc = 0.0;
    for t in 0..t1 {
        acc += lp[t * v + blank];
        r_b.push(acc);
    }
    Ok(CtcPrefixState { r_nb: vec![NEG_INF; t1], r_b, prefix_logprob: 0.0, last: None })
}

/// Extends `prefix` (no sos/eos, no blanks) by `next`, returning the new
/// log prefix probability and the successor state.
pub fn ctc_prefix_score(
    frame_logprobs: &Tensor,
    prefix: &[usize],
    next: usize,
    state: &CtcPrefixState,
    blank: usize,
) -> Result<(f64, CtcPrefixState)> {
    let shape = frame_logprobs.shape();
    if shape.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "ctc_prefix",
            detail: format!("expected (T, V) frame log-probs, got {shape:?}"),
        });
    }
    let (t1, v) = (shape[0], shape[1]);
    if next >= v {
        return Err(TensorError::IndexOutOfRange { op: "ctc_prefix", index: next, size: v });
    }
    if next == blank {
        return Err(TensorError::InvalidValue {
            op: "ctc_prefix",
            detail: "prefixes never contain blank".into(),
        });
    }
    if state.r_nb.len() != t1 || state.r_b.len() != t1 {
        return Err(TensorError::InvalidValue {
            op: "ctc_prefix",
            detail: format!("state covers {} frames, log-probs have {t1}", state.r_nb.len()),
        });
    }
    if state.last != prefix.last().copied() {
        return Err(TensorError::InvalidValue {
            op: "ctc_prefix",
            detail: "state does not match the prefix it claims to score".into(),
        });
    }
    let lp = frame_logprobs.data();
    let repeat = state.last == Some(next);
    let mut r_nb = vec![NEG_INF; t1];
    let mut r_b = vec![NEG_INF; t1];
    let mut psi = NEG_INF;
    for t in 0..t1 {
        let (pg_nb, pg_b) = if t == 0 {
            if prefix.is_empty() {
                (NEG_INF, 0.0)
            } else {
                (NEG_INF, NEG_INF)
            }
        } else {
            (state.r_nb[t - 1], state.r_b[t - 1])
        };
        let phi = if repeat { pg_b } else { logaddexp(pg_b, pg_nb) };
        let (ph_nb, ph_b) = if t == 0 { (NEG_INF, NEG_INF) } else { (r_nb[t - 1], r_b[t - 1]) };
        r_nb[t] = logaddexp(ph_nb, phi) + lp[t * v + next];
        r_b[t] = logaddexp(ph_b, ph_nb) + lp[t * v + blank];
        psi = logaddexp(psi, phi + lp[t * v + next]);
    }
    let new_state = CtcPrefixState { r_nb, r_b, prefix_logprob: psi, last: Some(next) };
    Ok((psi, new_state))
}

/// alpha * ctc + (1 - alpha) * att, skipping the inactive side entirely so a
/// -inf CTC score cannot poison an attention-only ranking (and vice versa).
pub fn combine_scores(alpha: f64, ctc: f64, att: f64) -> f64 {
    if alpha == 0.0 {
        att
    } else if alpha == 1.0 {
        ctc
    } else {
        alpha * ctc + (1.0 - alpha) * att
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    pub alpha: f64,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> DecodeConfig {
        DecodeConfig { beam: 10, alpha: 0.4, max_len: 40 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 || self.max_len == 0 {
            return Err(TensorError::InvalidValue {
                op: "decode_config",
                detail: "beam and max_len must be at least 1".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.alpha) || !self.alpha.is_finite() {
            return Err(TensorError::InvalidValue {
                op: "decode_config",
                detail: format!("alpha {} outside [0, 1]", self.alpha),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Hypothesis {
    /// Token ids, starting with sos; terminated hypotheses end with eos.
    pub prefix: Vec<usize>,
    pub att_logprob: f64,
    pub ctc_logprob: f64,
    pub ctc_state: CtcPrefixState,
    /// Cached causal language posteriors, one row per prefix position,
    /// append-only across extensions.
    pub ld_state: Vec<[f64; 4]>,
    pub combined_score: f64,
    pub terminated: bool,
}

impl Hypothesis {
    /// The emitted tokens, without the sos/eos brackets.
    pub fn tokens(&self) -> &[usize] {
        let end = self.prefix.len() - usize::from(self.terminated);
        &self.prefix[1..end]
    }
}

#[derive(Debug)]
pub struct DecodeResult {
    /// Best-first hypotheses; terminated unless `no_termination` is set.
    pub nbest: Vec<Hypothesis>,
    /// No hypothesis reached eos within max_len; nbest holds unterminated
    /// prefixes instead.
    pub no_termination: bool,
}

/// Attention log-probabilities for the next position after `hyp.prefix`,
/// extending the cached causal language posteriors by one row when the bias
/// adapter is active.
fn next_token_logprobs(model: &Model, h: &Tensor, hyp: &mut Hypothesis) -> Result<Vec<f64>> {
    let n = hyp.prefix.len();
    let posterior = if model.cfg.use_lpb {
        let logits = model.ld_logits(&hyp.prefix, h, false, &mut DropoutCtx::eval())?;
        let p = logits.softmax();
        let row = &p.data()[(n - 1) * 4..n * 4];
        hyp.ld_state.push([row[0], row[1], row[2], row[3]]);
        debug_assert_eq!(hyp.ld_state.len(), n);
        let flat: Vec<f64> = hyp.ld_state.iter().flatten().copied().collect();
        Some(Tensor::from_vec(flat, &[n, 4])?)
    } else {
        None
    };
    let logits = model.asr_logits(&hyp.prefix, h, posterior.as_ref(), &mut DropoutCtx::eval())?;
    let lp = logits.log_softmax();
    let v = model.cfg.vocab_size;
    Ok(lp.data()[(n - 1) * v..n * v].to_vec())
}

fn sort_best_first(hyps: &mut [Hypothesis]) {
    hyps.sort_by(|a, b| b.combined_score.total_cmp(&a.combined_score));
}

/// Joint CTC/attention beam search over token sequences (Hypothesis.prefix
/// brackets them with sos/eos). The language decoder, when biasing is active,
/// always runs causally here.
pub fn beam_search(model: &Model, features: &Tensor, dcfg: &DecodeConfig) -> Result<DecodeResult> {
    dcfg.validate()?;
    let mut ctx = DropoutCtx::eval();
    let h = model.encode(features, &mut ctx)?;
    let frame_logprobs = model.ctc_logprobs(&h)?;
    let v = model.cfg.vocab_size;

    let init_state = ctc_prefix_initial(&frame_logprobs, BLANK_ID)?;
    let mut live = vec![Hypothesis {
        prefix: vec![SOS_EOS_ID],
        att_logprob: 0.0,
        ctc_logprob: 0.0,
        ctc_state: init_state,
        ld_state: Vec::new(),
        combined_score: 0.0,
        terminated: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..dcfg.max_len {
        if live.is_empty() {
            break;
        }
        // Scores only decrease along extensions, so once the best finished
        // hypothesis beats every live one the search is over.
        let best_finished = finished.iter().map(|h| h.combined_score).fold(NEG_INF, f64::max);
        if finished.len() >= dcfg.beam
            && live.iter().all(|l| l.combined_score <= best_finished)
        {
            break;
        }
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for mut hyp in live.drain(..) {
            let att_row = next_token_logprobs(model, &h, &mut hyp)?;
            let ctc_tokens = &hyp.prefix[1..];
            for c in 0..v {
                if c == BLANK_ID {
                    continue;
                }
                if c == SOS_EOS_ID {
                    let att = hyp.att_logprob + att_row[c];
                    let ctc = hyp.ctc_state.full_sequence_logprob();
                    let mut prefix = hyp.prefix.clone();
                    prefix.push(c);
                    candidates.push(Hypothesis {
                        prefix,
                        att_logprob: att,
                        ctc_logprob: ctc,
                        ctc_state: hyp.ctc_state.clone(),
                        ld_state: hyp.ld_state.clone(),
                        combined_score: combine_scores(dcfg.alpha, ctc, att),
                        terminated: true,
                    });
                } else {
                    let (psi, state) =
                        ctc_prefix_score(&frame_logprobs, ctc_tokens, c, &hyp.ctc_state, BLANK_ID)?;
                    let att = hyp.att_logprob + att_row[c];
                    let mut prefix = hyp.prefix.clone();
                    prefix.push(c);
                    candidates.push(Hypothesis {
                        prefix,
                        att_logprob: att,
                        ctc_logprob: psi,
                        ctc_state: state,
                        ld_state: hyp.ld_state.clone(),
                        combined_score: combine_scores(dcfg.alpha, psi, att),
                        terminated: false,
                    });
                }
            }
        }
        sort_best_first(&mut candidates);
        candidates.truncate(dcfg.beam);
        for cand in candidates {
            if cand.terminated {
                finished.push(cand);
            } else {
                live.push(cand);
            }
        }
    }

    if finished.is_empty() {
        sort_best_first(&mut live);
        live.truncate(dcfg.beam);
        return Ok(DecodeResult { nbest: live, no_termination: true });
    }
    sort_best_first(&mut finished);
    finished.truncate(dcfg.beam);
    Ok(DecodeResult { nbest: finished, no_termination: false })
}

/// One decoded utterance as written to the decode output file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodedUtterance {
    pub id: String,
    pub nbest: Vec<NBestEntry>,
    pub no_termination: bool,
    /// Per-step causal language posteriors of the best hypothesis, present
    /// when the bias adapter was active.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ld_posteriors: Option<Vec<[f64; 4]>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NBestEntry {
    pub tokens: Vec<String>,
    pub att_logprob: f64,
    pub ctc_logprob: f64,
    pub combined_score: f64,
}

impl DecodedUtterance {
    pub fn from_result(
        id: &str,
        result: &DecodeResult,
        vocab: &Vocab,
        with_ld: bool,
    ) -> std::result::Result<DecodedUtterance, crate::vocab::VocabError> {
        let nbest = result
            .nbest
            .iter()
            .map(|h| {
                Ok(NBestEntry {
                    tokens: vocab.decode_ids(h.tokens())?,
                    att_logprob: h.att_logprob,
                    ctc_logprob: h.ctc_logprob,
                    combined_score: h.combined_score,
                })
            })
            .collect::<std::result::Result<Vec<_>, crate::vocab::VocabError>>()?;
        let ld_posteriors = (with_ld && !result.nbest.is_empty())
            .then(|| result.nbest[0].ld_state.clone());
        Ok(DecodedUtterance { id: id.to_string(), nbest, no_termination: result.no_termination, ld_posteriors })
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::losses;
    use crate::model::ModelConfig;

    fn tiny_cfg(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d: 32,
            heads: 4,
            enc_layers: 1,
            dec_layers: 1,
            ld_layers: 1,
            ffn_dim: 48,
            conv_kernel: 3,
            feature_dim: 8,
            vocab_size,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn rand_features(rng: &mut ChaCha8Rng, t: usize, f: usize) -> Tensor {
        let data = (0..t * f).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(data, &[t, f]).unwrap()
    }

    fn rand_logprobs(rng: &mut ChaCha8Rng, t: usize, v: usize) -> Tensor {
        let data: Vec<f64> = (0..t * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::from_vec(data, &[t, v]).unwrap().log_softmax()
    }

    #[test]
    fn single_frame_single_token_score_is_the_frame_logprob() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lp = rand_logprobs(&mut rng, 1, 5);
        let state = ctc_prefix_initial(&lp, BLANK_ID).unwrap();
        for c in 1..5 {
            let (psi, _) = ctc_prefix_score(&lp, &[], c, &state, BLANK_ID).unwrap();
            assert!((psi - lp.data()[c]).abs() <= 1e-12);
        }
    }

    #[test]
    fn blank_extension_and_inconsistent_state_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lp = rand_logprobs(&mut rng, 3, 5);
        let state = ctc_prefix_initial(&lp, BLANK_ID).unwrap();
        assert!(ctc_prefix_score(&lp, &[], BLANK_ID, &state, BLANK_ID).is_err());
        assert!(ctc_prefix_score(&lp, &[2], 1, &state, BLANK_ID).is_err());
        let (_, extended) = ctc_prefix_score(&lp, &[], 2, &state, BLANK_ID).unwrap();
        assert!(ctc_prefix_score(&lp, &[1], 2, &extended, BLANK_ID).is_err());
        let short = rand_logprobs(&mut rng, 2, 5);
        assert!(ctc_prefix_score(&short, &[], 1, &state, BLANK_ID).is_err());
    }

    #[test]
    fn repeated_extension_reproduces_the_full_sequence_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..60 {
            let t1 = rng.gen_range(1..=5);
            let v = rng.gen_range(2..=4);
            let m = rng.gen_range(0..=3.min(t1));
            let target: Vec<usize> = (0..m).map(|_| rng.gen_range(1..v)).collect();
            let lp = rand_logprobs(&mut rng, t1, v);

            let mut state = ctc_prefix_initial(&lp, BLANK_ID).unwrap();
            let mut prefix: Vec<usize> = Vec::new();
            for &c in &target {
                let (_, next) = ctc_prefix_score(&lp, &prefix, c, &state, BLANK_ID).unwrap();
                state = next;
                prefix.push(c);
            }
            let via_prefix = state.full_sequence_logprob();
            let outcome = losses::ctc_loss(&lp, &target, BLANK_ID).unwrap();
            let via_loss = -outcome.loss.scalar();
            if outcome.feasible {
                assert!(
                    (via_prefix - via_loss).abs() <= 1e-9,
                    "trial {trial}: prefix {via_prefix} vs loss {via_loss}"
                );
            } else {
                assert_eq!(via_prefix, NEG_INF, "trial {trial}");
            }
        }
    }

    #[test]
    fn prefix_probability_never_increases_with_extension() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lp = rand_logprobs(&mut rng, 5, 4);
        let state = ctc_prefix_initial(&lp, BLANK_ID).unwrap();
        let (psi1, s1) = ctc_prefix_score(&lp, &[], 2, &state, BLANK_ID).unwrap();
        assert!(psi1 <= state.prefix_logprob);
        assert!(s1.full_sequence_logprob() <= psi1 + 1e-12);
        let (psi2, s2) = ctc_prefix_score(&lp, &[2], 3, &s1, BLANK_ID).unwrap();
        assert!(psi2 <= psi1);
        let (psi3, _) = ctc_prefix_score(&lp, &[2, 3], 3, &s2, BLANK_ID).unwrap();
        assert!(psi3 <= psi2);
    }

    fn alphabet(v: usize) -> Vec<usize> {
        (0..v).filter(|&c| c != BLANK_ID && c != SOS_EOS_ID).collect()
    }

    fn all_sequences(v: usize, max_len: usize) -> Vec<Vec<usize>> {
        let sigma = alphabet(v);
        let mut out: Vec<Vec<usize>> = vec![Vec::new()];
        let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for seq in &frontier {
                for &c in &sigma {
                    let mut s = seq.clone();
                    s.push(c);
                    out.push(s.clone());
                    next.push(s);
                }
            }
            frontier = next;
        }
        out
    }

    fn teacher_forced_att_logprob(model: &Model, h: &Tensor, seq: &[usize]) -> f64 {
        let mut tokens = vec![SOS_EOS_ID];
        tokens.extend_from_slice(seq);
        tokens.push(SOS_EOS_ID);
        let input = &tokens[..tokens.len() - 1];
        let posterior = model.cfg.use_lpb.then(|| {
            let logits = model.ld_logits(input, h, false, &mut DropoutCtx::eval()).unwrap();
            model.lpb_posteriors(&logits)
        });
        let logits = model
            .asr_logits(input, h, posterior.as_ref(), &mut DropoutCtx::eval())
            .unwrap();
        let lp = logits.log_softmax();
        let v = model.cfg.vocab_size;
        (0..input.len()).map(|i| lp.data()[i * v + tokens[i + 1]]).sum()
    }

    fn exhaustive_best(
        model: &Model,
        features: &Tensor,
        alpha: f64,
        max_len: usize,
    ) -> (Vec<usize>, f64) {
        let h = model.encode(features, &mut DropoutCtx::eval()).unwrap();
        let logp = model.ctc_logprobs(&h).unwrap();
        let mut best: Option<(Vec<usize>, f64)> = None;
        for seq in all_sequences(model.cfg.vocab_size, max_len) {
            let outcome = losses::ctc_loss(&logp, &seq, BLANK_ID).unwrap();
            let ctc = -outcome.loss.scalar();
            let att = teacher_forced_att_logprob(model, &h, &seq);
            let score = combine_scores(alpha, ctc, att);
            if best.as_ref().map_or(true, |(_, s)| score > *s) {
                best = Some((seq, score));
            }
        }
        best.unwrap()
    }

    #[test]
    fn beam_search_matches_the_exhaustive_oracle() {
        let max_len = 3;
        // The final decode step is reserved for eos, so the reachable outputs
        // are exactly the sequences of length at most max_len - 1.
        let reachable = all_sequences(6, max_len - 1).len();
        for (trial, use_lpb) in [(0u64, false), (1, true), (2, false)] {
            let cfg = ModelConfig {
                use_lpb,
                beta: if use_lpb { 0.5 } else { 0.0 },
                ..tiny_cfg(6)
            };
            let model = Model::new(cfg, 50 + trial).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(60 + trial);
            let x = rand_features(&mut rng, 16, 8);
            for alpha in [0.0, 0.4, 1.0] {
                let (oracle_seq, oracle_score) = exhaustive_best(&model, &x, alpha, max_len - 1);
                let dcfg = DecodeConfig { beam: reachable, alpha, max_len };
                let out = beam_search(&model, &x, &dcfg).unwrap();
                assert!(!out.no_termination);
                let top = &out.nbest[0];
                assert_eq!(top.tokens(), &oracle_seq[..], "alpha {alpha} trial {trial}");
                assert!(
                    (top.combined_score - oracle_score).abs() <= 1e-9,
                    "alpha {alpha}: beam {} vs oracle {oracle_score}",
                    top.combined_score
                );
            }
        }
    }

    #[test]
    fn larger_beams_never_lose_score() {
        let model = Model::new(tiny_cfg(8), 70).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let x = rand_features(&mut rng, 16, 8);
        let mut prev = NEG_INF;
        for beam in [1, 2, 4, 8, 16] {
            let out = beam_search(&model, &x, &DecodeConfig { beam, alpha: 0.4, max_len: 4 }).unwrap();
            let top = out.nbest.first().map(|h| h.combined_score).unwrap_or(NEG_INF);
            assert!(top >= prev - 1e-12, "beam {beam} lost score: {top} < {prev}");
            prev = top;
        }
    }

    #[test]
    fn score_components_compose_and_drive_the_ranking() {
        let model = Model::new(tiny_cfg(8), 72).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let x = rand_features(&mut rng, 16, 8);
        for alpha in [0.0, 0.3, 1.0] {
            let out = beam_search(&model, &x, &DecodeConfig { beam: 6, alpha, max_len: 4 }).unwrap();
            for h in &out.nbest {
                let expect = combine_scores(alpha, h.ctc_logprob, h.att_logprob);
                assert!((h.combined_score - expect).abs() <= 1e-12);
            }
            for pair in out.nbest.windows(2) {
                assert!(pair[0].combined_score >= pair[1].combined_score);
                match alpha {
                    a if a == 1.0 => assert!(pair[0].ctc_logprob >= pair[1].ctc_logprob - 1e-12),
                    a if a == 0.0 => assert!(pair[0].att_logprob >= pair[1].att_logprob - 1e-12),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn greedy_attention_decode_is_stepwise_argmax() {
        let model = Model::new(tiny_cfg(8), 74).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        let x = rand_features(&mut rng, 16, 8);
        let out = beam_search(&model, &x, &DecodeConfig { beam: 1, alpha: 0.0, max_len: 5 }).unwrap();

        let h = model.encode(&x, &mut DropoutCtx::eval()).unwrap();
        let mut prefix = vec![SOS_EOS_ID];
        let v = model.cfg.vocab_size;
        for _ in 0..5 {
            let logits = model
                .asr_logits(&prefix, &h, None, &mut DropoutCtx::eval())
                .unwrap()
                .log_softmax();
            let row = &logits.data()[(prefix.len() - 1) * v..prefix.len() * v];
            let argmax = (0..v)
                .filter(|&c| c != BLANK_ID)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap();
            prefix.push(argmax);
            if argmax == SOS_EOS_ID {
                break;
            }
        }
        assert_eq!(out.nbest[0].prefix, prefix);
    }

    #[test]
    fn ctc_only_search_with_tight_length_budget_reports_no_termination() {
        let model = Model::new(tiny_cfg(8), 76).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = rand_features(&mut rng, 32, 8);
        let out = beam_search(&model, &x, &DecodeConfig { beam: 1, alpha: 1.0, max_len: 1 }).unwrap();
        assert!(out.no_termination, "all-blank output should lose to any prefix here");
        assert!(!out.nbest.is_empty());
        assert!(!out.nbest[0].terminated);
    }

    #[test]
    fn cached_language_posteriors_match_a_fresh_causal_pass() {
        let cfg = ModelConfig { use_lpb: true, beta: 0.5, ..tiny_cfg(8) };
        let model = Model::new(cfg, 78).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let x = rand_features(&mut rng, 16, 8);
        let out = beam_search(&model, &x, &DecodeConfig { beam: 3, alpha: 0.4, max_len: 4 }).unwrap();
        let h = model.encode(&x, &mut DropoutCtx::eval()).unwrap();
        for hyp in &out.nbest {
            let n = hyp.ld_state.len();
            assert!(n >= 1);
            let input = &hyp.prefix[..n];
            let fresh = model
                .ld_logits(input, &h, false, &mut DropoutCtx::eval())
                .unwrap()
                .softmax();
            for (i, row) in hyp.ld_state.iter().enumerate() {
                for c in 0..4 {
                    let d = (row[c] - fresh.data()[i * 4 + c]).abs();
                    assert!(d <= 1e-12, "cached posterior drifted at step {i}");
                }
            }
        }
        assert!(model.ld_pass_count() > 0);
    }

    #[test]
    fn decoded_records_serialize_with_token_strings() {
        let a: Vec<String> = vec!["\u{2581}aa".into()];
        let b: Vec<String> = vec!["bb".into()];
        let vocab = Vocab::build(&a, &b).unwrap();
        let model = Model::new(tiny_cfg(vocab.len()), 80).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let x = rand_features(&mut rng, 16, 8);
        let out = beam_search(&model, &x, &DecodeConfig { beam: 2, alpha: 0.4, max_len: 3 }).unwrap();
        let rec = DecodedUtterance::from_result("utt-0", &out, &vocab, false).unwrap();
        let json = serde_json::to_string(&rec).unwrap();
        let back: DecodedUtterance = serde_json::from_str(&json).unwrap();
        assert_eq!(back.id, "utt-0");
        assert_eq!(back.nbest.len(), rec.nbest.len());
        assert!(json.contains("combined_score"));
        assert!(!json.contains("ld_posteriors"));
    }
}
