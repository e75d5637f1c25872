//! Batched Adam training loop with warmup, clipping, checkpoint pruning,
//! and parameter averaging.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::evaluate_model;
use super::{mix_seed, HarnessError, Result};
use crate::checkpoint::{average_checkpoints, Checkpoint, CheckpointMeta};
use crate::corpus::{Corpus, Split, Utterance};
use crate::decoding::DecodeConfig;
use crate::losses::LossBreakdown;
use crate::model::{DropoutCtx, Model};
use crate::par::{backend, par_map};
use crate::tensor::Tensor;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.98;
const ADAM_EPS: f64 = 1e-9;
const SHUFFLE_SALT: u64 = 0x5348_5546;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// How many of the best checkpoints (by validation loss) to keep and average.
    pub k_best: usize,
    /// Decode the validation split with the averaged parameters at the end.
    pub final_valid_mer: bool,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            peak_lr: 1e-3,
            warmup_steps: 500,
            clip_norm: 5.0,
            seed: 0,
            k_best: 10,
            final_valid_mer: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(HarnessError::Config(msg.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return bad("peak_lr must be positive and finite");
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be at least 1");
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return bad("clip_norm must be positive and finite");
        }
        if self.k_best == 0 {
            return bad("k_best must be at least 1");
        }
        Ok(())
    }

    /// Linear warmup to `peak_lr`, then inverse square-root decay.
    pub fn lr(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps as f64;
        self.peak_lr * (s / w).min((w / s).sqrt())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub valid: LossBreakdown,
    pub wall_ms: u128,
    pub best_valid_so_far: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    /// Surviving per-epoch checkpoints, ordered by epoch.
    pub checkpoints: Vec<PathBuf>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub averaged_checkpoint: PathBuf,
    pub valid_mer: Option<f64>,
    pub wall_ms: u128,
    pub ld_passes: u64,
    pub backend: String,
}

struct UttOutcome {
    l_ctc: f64,
    l_att: f64,
    l_ld: f64,
    total: f64,
    grads: crate::tensor::Gradients,
}

#[derive(Serialize)]
struct DivergenceDump {
    epoch: usize,
    step: u64,
    utterances: Vec<String>,
    totals: Vec<String>,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl Adam {
    fn new(sizes: &[usize]) -> Adam {
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One update over all parameters; `grads` is aligned with the visit order.
    fn apply(&mut self, model: &mut Model, lr: f64, grads: &[Vec<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let mut idx = 0;
        model.visit_params_mut(&mut |_, tensor| {
            let shape = tensor.shape().to_vec();
            let mut data = tensor.data().to_vec();
            let g = &grads[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for j in 0..data.len() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
            *tensor = Tensor::param(data, &shape).expect("shape unchanged");
            idx += 1;
        });
    }
}

fn forward_one(model: &Model, utt: &Utterance, feature_dim: usize, ctx: &mut DropoutCtx) -> Result<UttOutcome> {
    let features = Tensor::from_vec(utt.frames.clone(), &[utt.t, feature_dim])?;
    let losses = model.utterance_loss(&features, &utt.tokens, &utt.ld_ids(), ctx)?;
    let grads = losses.total.backward()?;
    Ok(UttOutcome {
        l_ctc: losses.l_ctc.scalar(),
        l_att: losses.l_att.scalar(),
        l_ld: losses.l_ld.as_ref().map_or(0.0, Tensor::scalar),
        total: losses.total.scalar(),
        grads,
    })
}

fn mean_valid_losses(model: &Model, utts: &[&Utterance], feature_dim: usize) -> Result<LossBreakdown> {
    let results = par_map(utts, |utt| {
        let features = Tensor::from_vec(utt.frames.clone(), &[utt.t, feature_dim])?;
        let losses = model.utterance_loss(&features, &utt.tokens, &utt.ld_ids(), &mut DropoutCtx::eval())?;
        Ok::<_, HarnessError>((
            losses.l_ctc.scalar(),
            losses.l_att.scalar(),
            losses.l_ld.as_ref().map_or(0.0, Tensor::scalar),
            losses.total.scalar(),
        ))
    });
    let mut sums = (0.0, 0.0, 0.0, 0.0);
    for r in results {
        let (c, a, l, t) = r?;
        sums = (sums.0 + c, sums.1 + a, sums.2 + l, sums.3 + t);
    }
    let n = utts.len() as f64;
    Ok(LossBreakdown {
        l_ctc: sums.0 / n,
        l_att: sums.1 / n,
        l_ld: sums.2 / n,
        total: sums.3 / n,
        alpha: model.cfg.alpha,
        beta: model.cfg.beta,
    })
}

/// Trains `model` in place, writing checkpoints and a `run.json` summary
/// into `out_dir`, and finishes by installing the average of the `k_best`
/// checkpoints with the lowest validation loss.
pub fn train(
    model: &mut Model,
    corpus: &Corpus,
    tcfg: &TrainConfig,
    dcfg: &DecodeConfig,
    out_dir: &Path,
) -> Result<RunRecord> {
    tcfg.validate()?;
    dcfg.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
    if corpus.vocab.len() != model.cfg.vocab_size {
        return Err(HarnessError::Config(format!(
            "corpus vocabulary has {} entries but the model expects {}",
            corpus.vocab.len(),
            model.cfg.vocab_size
        )));
    }
    if corpus.config.feature_dim != model.cfg.feature_dim {
        return Err(HarnessError::Config(format!(
            "corpus feature_dim {} differs from model feature_dim {}",
            corpus.config.feature_dim, model.cfg.feature_dim
        )));
    }
    let train_utts: Vec<&Utterance> = corpus.split(Split::Train).collect();
    let valid_utts: Vec<&Utterance> = corpus.split(Split::Valid).collect();
    if train_utts.is_empty() {
        return Err(HarnessError::Data("train split has no utterances".into()));
    }
    if valid_utts.is_empty() {
        return Err(HarnessError::Data("valid split has no utterances".into()));
    }
    fs::create_dir_all(out_dir)?;

    let feature_dim = corpus.config.feature_dim;
    let run_start = Instant::now();
    let ld_passes_at_start = model.ld_pass_count();

    let sizes: Vec<usize> = {
        let mut v = Vec::new();
        model.visit_params(&mut |_, t| v.push(t.numel()));
        v
    };
    let mut adam = Adam::new(&sizes);
    let mut step: u64 = 0;
    let mut records: Vec<EpochRecord> = Vec::with_capacity(tcfg.epochs);
    // (valid_loss, epoch, path) for every checkpoint still on disk.
    let mut pool: Vec<(f64, usize, PathBuf)> = Vec::new();
    let mut best_valid = f64::INFINITY;
    let mut best_epoch = 0;

    for epoch in 1..=tcfg.epochs {
        let epoch_start = Instant::now();
        let mut order: Vec<usize> = (0..train_utts.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(tcfg.seed, epoch as u64, SHUFFLE_SALT));
        order.shuffle(&mut shuffle_rng);

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for batch_ids in order.chunks(tcfg.batch_size) {
            step += 1;
            let batch: Vec<(u64, &Utterance)> = batch_ids
                .iter()
                .enumerate()
                .map(|(idx, &i)| (mix_seed(tcfg.seed, step, idx as u64), train_utts[i]))
                .collect();
            let results = par_map(&batch, |(utt_seed, utt)| {
                let mut rng = ChaCha8Rng::seed_from_u64(*utt_seed);
                let mut ctx = DropoutCtx::train(model.cfg.dropout, &mut rng);
                forward_one(model, utt, feature_dim, &mut ctx)
            });
            let mut outcomes = Vec::with_capacity(results.len());
            for r in results {
                outcomes.push(r?);
            }
            if let Some(bad) = outcomes.iter().position(|o| !o.total.is_finite()) {
                let dump = DivergenceDump {
                    epoch,
                    step,
                    utterances: batch.iter().map(|(_, u)| u.id.clone()).collect(),
                    totals: outcomes.iter().map(|o| format!("{}", o.total)).collect(),
                };
                let dump_path = out_dir.join("divergence.json");
                serde_json::to_writer_pretty(BufWriter::new(File::create(&dump_path)?), &dump)?;
                return Err(HarnessError::Diverged {
                    epoch,
                    step,
                    detail: format!(
                        "non-finite training loss on utterance {}",
                        batch[bad].1.id
                    ),
                    dump: Some(dump_path),
                });
            }

            let params: Vec<Tensor> = {
                let mut v = Vec::new();
                model.visit_params(&mut |_, t| v.push(t.clone()));
                v
            };
            let mut acc: Vec<Vec<f64>> = params.iter().map(|t| vec![0.0; t.numel()]).collect();
            for outcome in &outcomes {
                for (slot, tensor) in acc.iter_mut().zip(&params) {
                    if let Some(g) = outcome.grads.get(tensor) {
                        for (a, gi) in slot.iter_mut().zip(g) {
                            *a += gi;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let mut sq_norm = 0.0;
            for slot in &mut acc {
                for a in slot.iter_mut() {
                    *a *= scale;
                    sq_norm += *a * *a;
                }
            }
            let norm = sq_norm.sqrt();
            if norm > tcfg.clip_norm {
                let shrink = tcfg.clip_norm / norm;
                for slot in &mut acc {
                    for a in slot.iter_mut() {
                        *a *= shrink;
                    }
                }
            }
            adam.apply(model, tcfg.lr(step), &acc);

            for o in &outcomes {
                sums = (sums.0 + o.l_ctc, sums.1 + o.l_att, sums.2 + o.l_ld, sums.3 + o.total);
            }
        }
        let n = train_utts.len() as f64;
        let train_losses = LossBreakdown {
            l_ctc: sums.0 / n,
            l_att: sums.1 / n,
            l_ld: sums.2 / n,
            total: sums.3 / n,
            alpha: model.cfg.alpha,
            beta: model.cfg.beta,
        };

        let valid_losses = mean_valid_losses(model, &valid_utts, feature_dim)?;
        if !valid_losses.total.is_finite() {
            return Err(HarnessError::Diverged {
                epoch,
                step,
                detail: "non-finite validation loss".into(),
                dump: None,
            });
        }
        if valid_losses.total < best_valid {
            best_valid = valid_losses.total;
            best_epoch = epoch;
        }

        let ckpt_path = out_dir.join(format!("epoch{epoch:03}.ckpt"));
        let meta = CheckpointMeta {
            epoch,
            valid_loss: valid_losses.total,
            label: format!("epoch-{epoch}"),
        };
        Checkpoint::from_model(model, meta).save(&ckpt_path)?;
        pool.push((valid_losses.total, epoch, ckpt_path));
        if pool.len() > tcfg.k_best {
            // Drop the worst checkpoint; on ties drop the older epoch.
            let worst = pool
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
                .map(|(i, _)| i)
                .expect("pool is non-empty");
            let (_, _, path) = pool.swap_remove(worst);
            fs::remove_file(path)?;
        }

        records.push(EpochRecord {
            epoch,
            train: train_losses,
            valid: valid_losses,
            wall_ms: epoch_start.elapsed().as_millis(),
            best_valid_so_far: best_valid,
        });
    }

    pool.sort_by_key(|(_, epoch, _)| *epoch);
    let kept: Vec<Checkpoint> = pool
        .iter()
        .map(|(_, _, path)| Checkpoint::load(path))
        .collect::<std::result::Result<_, _>>()?;
    let averaged = average_checkpoints(&kept)?;
    let avg_path = out_dir.join("average.ckpt");
    averaged.save(&avg_path)?;
    averaged.install(model)?;

    let valid_mer = if tcfg.final_valid_mer {
        let report = evaluate_model(model, corpus, Split::Valid, dcfg)?;
        Some(report.score.overall_mer)
    } else {
        None
    };

    let record = RunRecord {
        epochs: records,
        checkpoints: pool.into_iter().map(|(_, _, p)| p).collect(),
        best_epoch,
        best_valid_loss: best_valid,
        averaged_checkpoint: avg_path,
        valid_mer,
        wall_ms: run_start.elapsed().as_millis(),
        ld_passes: model.ld_pass_count() - ld_passes_at_start,
        backend: backend().to_string(),
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(out_dir.join("run.json"))?), &record)?;
    Ok(record)
}
