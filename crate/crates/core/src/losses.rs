//! Training objectives: alignment-marginal CTC, label-smoothed cross
//! entropy, and their weighted combinations.

use serde::{Deserialize, Serialize};

use crate::tensor::{self, Result, Tensor, TensorError};

/// CTC negative log likelihood plus a feasibility flag. When no monotonic
/// alignment fits (too few frames for the target) the loss is +inf, carries
/// no gradient, and `feasible` is false.
pub struct CtcOutcome {
    pub loss: Tensor,
    pub feasible: bool,
}

/// Marginal negative log likelihood of `target` (no sos/eos, no blanks)
/// under per-frame log posteriors (T1, V), forward-backward in log space.
pub fn ctc_loss(frame_logprobs: &Tensor, target: &[usize], blank: usize) -> Result<CtcOutcome> {
    match tensor::ctc_nll(frame_logprobs, target, blank)? {
        Some(loss) => Ok(CtcOutcome { loss, feasible: true }),
        None => Ok(CtcOutcome {
            loss: Tensor::scalar_const(f64::INFINITY),
            feasible: false,
        }),
    }
}

/// Exponential-time CTC reference: enumerates every length-T frame labeling,
/// collapses repeats then blanks, and sums path probabilities for labelings
/// that collapse to `target`. Test oracle only; returns None when no path
/// matches.
pub fn brute_force_ctc_nll(frame_logprobs: &Tensor, target: &[usize], blank: usize) -> Option<f64> {
    let shape = frame_logprobs.shape();
    assert_eq!(shape.len(), 2, "frame log probs must be (T, V)");
    let (t_len, v) = (shape[0], shape[1]);
    let lp = frame_logprobs.data();
    let mut path = vec![0usize; t_len];
    let mut total = f64::NEG_INFINITY;
    loop {
        let collapsed = collapse(&path, blank);
        if collapsed == target {
            let score: f64 = path.iter().enumerate().map(|(t, &k)| lp[t * v + k]).sum();
            total = tensor::logaddexp(total, score);
        }
        let mut t = 0;
        loop {
            if t == t_len {
                return if total == f64::NEG_INFINITY {
                    None
                } else {
                    Some(-total)
                };
            }
            path[t] += 1;
            if path[t] < v {
                break;
            }
            path[t] = 0;
            t += 1;
        }
    }
}

fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if prev == Some(k) {
            continue;
        }
        prev = Some(k);
        if k != blank {
            out.push(k);
        }
    }
    out
}

/// Mean over positions of (1-eps) * (-log p_target) + eps * mean over
/// classes of (-log p_c). Built from graph primitives so gradients flow
/// through the logits.
pub fn label_smoothed_ce(logits: &Tensor, targets: &[usize], epsilon: f64) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "label_smoothed_ce",
            detail: format!("logits {:?}", shape),
        });
    }
    let (n, c) = (shape[0], shape[1]);
    if targets.len() != n || n == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "label_smoothed_ce",
            detail: format!("{} targets for {} rows", targets.len(), n),
        });
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(TensorError::InvalidValue {
            op: "label_smoothed_ce",
            detail: format!("epsilon = {} outside [0, 1)", epsilon),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(TensorError::IndexOutOfRange {
            op: "label_smoothed_ce",
            index: bad,
            size: c,
        });
    }
    let mut q = vec![epsilon / c as f64; n * c];
    for (row, &t) in targets.iter().enumerate() {
        q[row * c + t] += 1.0 - epsilon;
    }
    let q = Tensor::from_vec(q, &[n, c])?;
    Ok(logits
        .log_softmax()
        .mul(&q)?
        .sum_all()
        .scale(-1.0 / n as f64))
}

/// alpha * l_ctc + (1 - alpha) * l_att.
pub fn asr_loss(l_ctc: &Tensor, l_att: &Tensor, alpha: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TensorError::InvalidValue {
            op: "asr_loss",
            detail: format!("alpha = {} outside [0, 1]", alpha),
        });
    }
    l_ctc.scale(alpha).add(&l_att.scale(1.0 - alpha))
}

/// alpha * l_ctc + (1 - alpha) * l_att + beta * l_ld; beta = 0 recovers the
/// plain recognizer objective.
pub fn joint_loss(
    l_ctc: &Tensor,
    l_att: &Tensor,
    l_ld: &Tensor,
    alpha: f64,
    beta: f64,
) -> Result<Tensor> {
    if beta < 0.0 {
        return Err(TensorError::InvalidValue {
            op: "joint_loss",
            detail: format!("beta = {} must be nonnegative", beta),
        });
    }
    asr_loss(l_ctc, l_att, alpha)?.add(&l_ld.scale(beta))
}

/// Scalar view of one loss evaluation, for logging and run records.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ctc: f64,
    pub l_att: f64,
    pub l_ld: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn combine(l_ctc: f64, l_att: f64, l_ld: f64, alpha: f64, beta: f64) -> LossBreakdown {
        LossBreakdown {
            l_ctc,
            l_att,
            l_ld,
            total: alpha * l_ctc + (1.0 - alpha) * l_att + beta * l_ld,
            alpha,
            beta,
        }
    }
}
