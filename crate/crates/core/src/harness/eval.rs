//! Decodes a split with beam search and scores it.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::corpus::{Corpus, Split, Utterance};
use crate::decoding::{beam_search, DecodeConfig, DecodedUtterance};
use crate::metrics::{ld_accuracy, mixed_units_from_ids, score_corpus, ScoreReport, ScoredUtterance};
use crate::model::{DropoutCtx, Model};
use crate::par::par_map;
use crate::tensor::Tensor;
use crate::vocab::LdLabel;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub score: ScoreReport,
    pub utterances: usize,
    /// Utterances whose search never reached eos within the length budget.
    pub no_termination_count: usize,
    #[serde(skip)]
    pub decoded: Vec<DecodedUtterance>,
}

struct PerUtterance {
    scored: ScoredUtterance,
    decoded: DecodedUtterance,
    ld_refs: Option<Vec<usize>>,
    ld_preds: Option<Vec<usize>>,
    no_termination: bool,
}

fn decode_one(model: &Model, corpus: &Corpus, utt: &Utterance, dcfg: &DecodeConfig) -> Result<PerUtterance> {
    let features = Tensor::from_vec(utt.frames.clone(), &[utt.t, corpus.config.feature_dim])?;
    let result = beam_search(model, &features, dcfg)?;
    let hyp_ids: Vec<usize> = result
        .nbest
        .first()
        .map(|h| h.tokens().to_vec())
        .unwrap_or_default();
    let scored = ScoredUtterance {
        split: utt.split.to_string(),
        reference: mixed_units_from_ids(utt.target(), &corpus.vocab)?,
        hypothesis: mixed_units_from_ids(&hyp_ids, &corpus.vocab)?,
    };
    let decoded = DecodedUtterance::from_result(&utt.id, &result, &corpus.vocab, model.cfg.use_lpb)?;

    let (ld_refs, ld_preds) = if model.cfg.has_ld() {
        let input = &utt.tokens[..utt.tokens.len() - 1];
        let h = model.encode(&features, &mut DropoutCtx::eval())?;
        let logits = model.ld_logits(input, &h, false, &mut DropoutCtx::eval())?;
        let p = logits.softmax();
        let preds: Vec<usize> = (0..input.len())
            .map(|i| {
                let row = &p.data()[i * 4..(i + 1) * 4];
                (0..4).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap()
            })
            .collect();
        let refs: Vec<usize> = utt.ld_ids()[..input.len()].to_vec();
        (Some(refs), Some(preds))
    } else {
        (None, None)
    };
    Ok(PerUtterance {
        scored,
        decoded,
        ld_refs,
        ld_preds,
        no_termination: result.no_termination,
    })
}

/// Beam-decodes every utterance of `split` and pools MER, per-language
/// errors, and (when a language decoder exists) teacher-forced label
/// accuracy.
pub fn evaluate_model(
    model: &Model,
    corpus: &Corpus,
    split: Split,
    dcfg: &DecodeConfig,
) -> Result<EvalReport> {
    let utts: Vec<&Utterance> = corpus.split(split).collect();
    if utts.is_empty() {
        return Err(HarnessError::Data(format!("split {split} has no utterances")));
    }
    let results = par_map(&utts, |utt| decode_one(model, corpus, utt, dcfg));
    let mut items = Vec::with_capacity(results.len());
    for r in results {
        items.push(r?);
    }

    let scored: Vec<ScoredUtterance> = items.iter().map(|i| i.scored.clone()).collect();
    let mut score = score_corpus(&scored)?;
    if model.cfg.has_ld() {
        let refs: Vec<Vec<usize>> = items.iter().filter_map(|i| i.ld_refs.clone()).collect();
        let preds: Vec<Vec<usize>> = items.iter().filter_map(|i| i.ld_preds.clone()).collect();
        score.ld_accuracy = Some(ld_accuracy(&refs, &preds, LdLabel::SosEos.id())?);
    }
    let no_termination_count = items.iter().filter(|i| i.no_termination).count();
    Ok(EvalReport {
        split: split.to_string(),
        score,
        utterances: items.len(),
        no_termination_count,
        decoded: items.into_iter().map(|i| i.decoded).collect(),
    })
}

/// Writes decode records as JSON lines.
pub fn write_decoded_jsonl(path: &Path, decoded: &[DecodedUtterance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for d in decoded {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
