//! Mixed error rate over language-aware units, per-language error
//! decomposition, and language-label accuracy.
//!
//! Language-A subwords merge into word units at the word-marker boundary;
//! language-B tokens stay single-character units; specials are dropped.
//! Alignment is plain Levenshtein over whole units: language tags label the
//! units but never constrain the alignment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::{TokenClass, Vocab, VocabError, WORD_MARKER};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("reference and hypothesis counts differ: {refs} vs {hyps}")]
    CountMismatch { refs: usize, hyps: usize },
    #[error("label sequences differ in length: {refs} vs {hyps}")]
    LengthMismatch { refs: usize, hyps: usize },
    #[error("cannot score an empty reference corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitTag {
    E,
    M,
    Other,
}

impl UnitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            UnitTag::E => "e",
            UnitTag::M => "m",
            UnitTag::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixedUnit {
    pub text: String,
    pub tag: UnitTag,
}

impl MixedUnit {
    pub fn new(text: impl Into<String>, tag: UnitTag) -> MixedUnit {
        MixedUnit { text: text.into(), tag }
    }
}

/// Converts token strings to scoring units: language-A subwords merge into
/// words (a word starts at each word-marker token), language-B tokens become
/// one unit per character token, specials vanish.
pub fn to_mixed_units(tokens: &[String], vocab: &Vocab) -> Vec<MixedUnit> {
    let mut units = Vec::new();
    let mut word: Option<String> = None;
    let flush = |word: &mut Option<String>, units: &mut Vec<MixedUnit>| {
        if let Some(w) = word.take() {
            units.push(MixedUnit::new(w, UnitTag::E));
        }
    };
    for tok in tokens {
        let class = vocab.id_of(tok).map(|id| vocab.class(id).expect("id from vocab"));
        match class {
            Some(TokenClass::LangASubword) => {
                if let Some(stripped) = tok.strip_prefix(WORD_MARKER) {
                    flush(&mut word, &mut units);
                    word = Some(stripped.to_string());
                } else {
                    match &mut word {
                        Some(w) => w.push_str(tok),
                        None => word = Some(tok.clone()),
                    }
                }
            }
            Some(TokenClass::LangBChar) => {
                flush(&mut word, &mut units);
                units.push(MixedUnit::new(tok.clone(), UnitTag::M));
            }
            Some(TokenClass::Special) | None => flush(&mut word, &mut units),
        }
    }
    flush(&mut word, &mut units);
    units
}

/// Same conversion starting from token ids.
pub fn mixed_units_from_ids(ids: &[usize], vocab: &Vocab) -> Result<Vec<MixedUnit>> {
    Ok(to_mixed_units(&vocab.decode_ids(ids)?, vocab))
}

/// Renders units back to a transcript: units are space-separated except that
/// consecutive language-B characters run together.
pub fn units_to_text(units: &[MixedUnit]) -> String {
    let mut out = String::new();
    let mut prev_tag: Option<UnitTag> = None;
    for u in units {
        let glue = match (prev_tag, u.tag) {
            (None, _) => "",
            (Some(UnitTag::M), UnitTag::M) => "",
            _ => " ",
        };
        out.push_str(glue);
        out.push_str(&u.text);
        prev_tag = Some(u.tag);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignOp {
    Match,
    Substitute,
    Delete,
    Insert,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LangErrors {
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
    /// Reference-order alignment operations.
    pub alignment: Vec<AlignOp>,
    /// Errors attributed per language tag: substitutions and deletions to
    /// the reference unit's tag, insertions to the hypothesis unit's tag.
    pub per_language: BTreeMap<UnitTag, LangErrors>,
}

impl EditOutcome {
    pub fn total(&self) -> usize {
        self.sub + self.del + self.ins
    }
}

/// Levenshtein alignment over units with a fixed tie-break: match, then
/// substitution, then deletion, then insertion.
pub fn edit_distance(reference: &[MixedUnit], hypothesis: &[MixedUnit]) -> EditOutcome {
    let n = reference.len();
    let m = hypothesis.len();
    let mut d = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        d[idx(i, 0)] = i;
    }
    for j in 0..=m {
        d[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[idx(i, j)] = (d[idx(i - 1, j - 1)] + sub_cost)
                .min(d[idx(i - 1, j)] + 1)
                .min(d[idx(i, j - 1)] + 1);
        }
    }

    let mut ops = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[idx(i, j)];
        if i > 0 && j > 0 && reference[i - 1] == hypothesis[j - 1] && here == d[idx(i - 1, j - 1)] {
            ops.push((AlignOp::Match, i - 1, j - 1));
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && here == d[idx(i - 1, j - 1)] + 1 {
            ops.push((AlignOp::Substitute, i - 1, j - 1));
            i -= 1;
            j -= 1;
        } else if i > 0 && here == d[idx(i - 1, j)] + 1 {
            ops.push((AlignOp::Delete, i - 1, j));
            i -= 1;
        } else {
            ops.push((AlignOp::Insert, i, j - 1));
            j -= 1;
        }
    }
    ops.reverse();

    let (mut sub, mut del, mut ins) = (0, 0, 0);
    let mut per_language: BTreeMap<UnitTag, LangErrors> = BTreeMap::new();
    let mut alignment = Vec::with_capacity(ops.len());
    for (op, ri, hj) in ops {
        alignment.push(op);
        match op {
            AlignOp::Match => {}
            AlignOp::Substitute => {
                sub += 1;
                per_language.entry(reference[ri].tag).or_default().sub += 1;
            }
            AlignOp::Delete => {
                del += 1;
                per_language.entry(reference[ri].tag).or_default().del += 1;
            }
            AlignOp::Insert => {
                ins += 1;
                per_language.entry(hypothesis[hj].tag).or_default().ins += 1;
            }
        }
    }
    debug_assert_eq!(sub + del + ins, d[idx(n, m)]);
    EditOutcome { sub, del, ins, alignment, per_language }
}

/// Corpus-pooled mixed error rate: 100 * total errors / total reference
/// units.
pub fn mer(refs: &[Vec<MixedUnit>], hyps: &[Vec<MixedUnit>]) -> Result<f64> {
    if refs.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    if refs.len() != hyps.len() {
        return Err(MetricsError::CountMismatch { refs: refs.len(), hyps: hyps.len() });
    }
    let mut errors = 0usize;
    let mut units = 0usize;
    for (r, h) in refs.iter().zip(hyps) {
        errors += edit_distance(r, h).total();
        units += r.len();
    }
    if units == 0 {
        return if errors == 0 { Ok(0.0) } else { Err(MetricsError::EmptyCorpus) };
    }
    Ok(100.0 * errors as f64 / units as f64)
}

/// Percentage of positions whose labels match, pooled over utterances;
/// positions whose reference label is sos/eos are excluded.
pub fn ld_accuracy(refs: &[Vec<usize>], preds: &[Vec<usize>], sos_eos_label: usize) -> Result<f64> {
    if refs.len() != preds.len() {
        return Err(MetricsError::CountMismatch { refs: refs.len(), hyps: preds.len() });
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (r, p) in refs.iter().zip(preds) {
        if r.len() != p.len() {
            return Err(MetricsError::LengthMismatch { refs: r.len(), hyps: p.len() });
        }
        for (a, b) in r.iter().zip(p) {
            if *a == sos_eos_label {
                continue;
            }
            total += 1;
            hits += usize::from(a == b);
        }
    }
    if total == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * hits as f64 / total as f64)
}

/// One scored utterance, grouped by split for the report.
#[derive(Debug, Clone)]
pub struct ScoredUtterance {
    pub split: String,
    pub reference: Vec<MixedUnit>,
    pub hypothesis: Vec<MixedUnit>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub overall_mer: f64,
    pub split_mer: BTreeMap<String, f64>,
    pub per_language: BTreeMap<UnitTag, LangErrors>,
    pub reference_units: usize,
    pub errors: usize,
    pub utterances: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ld_accuracy: Option<f64>,
}

/// Pools edit statistics over utterances into overall and per-split rates.
pub fn score_corpus(items: &[ScoredUtterance]) -> Result<ScoreReport> {
    if items.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut errors = 0usize;
    let mut units = 0usize;
    let mut per_language: BTreeMap<UnitTag, LangErrors> = BTreeMap::new();
    let mut split_err: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for item in items {
        let outcome = edit_distance(&item.reference, &item.hypothesis);
        let total = outcome.total();
        errors += total;
        units += item.reference.len();
        for (tag, e) in &outcome.per_language {
            let slot = per_language.entry(*tag).or_default();
            slot.sub += e.sub;
            slot.del += e.del;
            slot.ins += e.ins;
        }
        let slot = split_err.entry(item.split.clone()).or_insert((0, 0));
        slot.0 += total;
        slot.1 += item.reference.len();
    }
    if units == 0 && errors > 0 {
        return Err(MetricsError::EmptyCorpus);
    }
    let rate = |e: usize, u: usize| if u == 0 { 0.0 } else { 100.0 * e as f64 / u as f64 };
    Ok(ScoreReport {
        overall_mer: rate(errors, units),
        split_mer: split_err.into_iter().map(|(k, (e, u))| (k, rate(e, u))).collect(),
        per_language,
        reference_units: units,
        errors,
        utterances: items.len(),
        ld_accuracy: None,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn word(w: &str) -> MixedUnit {
        MixedUnit::new(w, UnitTag::E)
    }

    fn ch(c: &str) -> MixedUnit {
        MixedUnit::new(c, UnitTag::M)
    }

    fn toy_vocab() -> Vocab {
        let a: Vec<String> = ["\u{2581}he", "llo", "\u{2581}new", "\u{2581}day"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let b: Vec<String> = ["x1", "x2", "x3", "x4"].iter().map(|s| s.to_string()).collect();
        Vocab::build(&a, &b).unwrap()
    }

    fn strs(tokens: &[&str]) -> Vec<String> {
        tokens.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn unit_construction_merges_words_and_splits_chars() {
        let v = toy_vocab();
        let pure_a = to_mixed_units(&strs(&["\u{2581}he", "llo", "\u{2581}new", "\u{2581}day"]), &v);
        assert_eq!(pure_a, vec![word("hello"), word("new"), word("day")]);

        let pure_b = to_mixed_units(&strs(&["x1", "x2", "x3", "x4"]), &v);
        assert_eq!(pure_b, vec![ch("x1"), ch("x2"), ch("x3"), ch("x4")]);

        let mixed = to_mixed_units(
            &strs(&["<sos/eos>", "\u{2581}he", "llo", "\u{2581}new", "x1", "x2", "<sos/eos>"]),
            &v,
        );
        assert_eq!(mixed, vec![word("hello"), word("new"), ch("x1"), ch("x2")]);

        let b_interrupts_word = to_mixed_units(&strs(&["\u{2581}he", "x1", "llo"]), &v);
        assert_eq!(b_interrupts_word, vec![word("he"), ch("x1"), word("llo")]);
    }

    #[test]
    fn transcripts_round_trip_through_units() {
        let v = toy_vocab();
        let tokens = strs(&["\u{2581}he", "llo", "x1", "x2", "\u{2581}day", "x3"]);
        let units = to_mixed_units(&tokens, &v);
        assert_eq!(units_to_text(&units), "hello x1x2 day x3");
        let again = to_mixed_units(&tokens, &v);
        assert_eq!(units, again);
    }

    #[test]
    fn edit_distance_handles_the_three_base_cases() {
        let a = vec![word("a"), word("b"), word("c")];
        let same = edit_distance(&a, &a);
        assert_eq!((same.sub, same.del, same.ins), (0, 0, 0));
        assert!(same.alignment.iter().all(|op| *op == AlignOp::Match));

        let empty: Vec<MixedUnit> = Vec::new();
        let del = edit_distance(&a, &empty);
        assert_eq!((del.sub, del.del, del.ins), (0, 3, 0));
        let ins = edit_distance(&empty, &a);
        assert_eq!((ins.sub, ins.del, ins.ins), (0, 0, 3));

        let sub = edit_distance(&a, &[word("a"), word("x"), word("c")]);
        assert_eq!((sub.sub, sub.del, sub.ins), (1, 0, 0));
    }

    #[test]
    fn tie_breaks_prefer_substitutions_over_insert_delete_pairs() {
        let outcome = edit_distance(&[word("a"), word("b")], &[word("b"), word("a")]);
        assert_eq!(outcome.total(), 2);
        assert_eq!((outcome.sub, outcome.del, outcome.ins), (2, 0, 0));
    }

    #[test]
    fn shifted_sequences_align_with_one_delete_and_one_insert() {
        let r = vec![word("a"), word("b"), word("c"), word("d")];
        let h = vec![word("b"), word("c"), word("d"), word("e")];
        let outcome = edit_distance(&r, &h);
        assert_eq!((outcome.sub, outcome.del, outcome.ins), (0, 1, 1));
    }

    #[test]
    fn cross_language_substitutions_are_allowed_and_attributed() {
        let outcome = edit_distance(&[word("hi"), ch("x1")], &[ch("x1"), ch("x1")]);
        assert_eq!((outcome.sub, outcome.del, outcome.ins), (1, 0, 0));
        assert_eq!(outcome.per_language[&UnitTag::E].sub, 1);

        let ins = edit_distance(&[word("hi")], &[word("hi"), ch("x2")]);
        assert_eq!(ins.per_language[&UnitTag::M].ins, 1);
    }

    #[test]
    fn triangle_inequality_holds_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let alphabet = ["a", "b", "c", "x1", "x2"];
        let random_seq = |rng: &mut ChaCha8Rng| -> Vec<MixedUnit> {
            let len = rng.gen_range(0..6);
            (0..len)
                .map(|_| {
                    let k = rng.gen_range(0..alphabet.len());
                    if k < 3 {
                        word(alphabet[k])
                    } else {
                        ch(alphabet[k])
                    }
                })
                .collect()
        };
        for _ in 0..50 {
            let a = random_seq(&mut rng);
            let b = random_seq(&mut rng);
            let c = random_seq(&mut rng);
            let ab = edit_distance(&a, &b).total();
            let bc = edit_distance(&b, &c).total();
            let ac = edit_distance(&a, &c).total();
            assert!(ac <= ab + bc, "triangle violated: {ac} > {ab} + {bc}");
        }
    }

    #[test]
    fn mer_pools_errors_over_the_corpus() {
        let refs = vec![
            vec![word("a"), word("b"), word("c"), word("d")],
            vec![ch("1"), ch("2"), ch("3"), ch("4"), ch("5"), ch("6")],
        ];
        let hyps = vec![
            vec![word("a"), word("x"), word("c"), word("d")],
            vec![ch("1"), ch("2"), ch("3"), ch("4"), ch("5")],
        ];
        assert_eq!(mer(&refs, &hyps).unwrap(), 20.0);
        assert_eq!(mer(&refs, &refs).unwrap(), 0.0);
        let empties = vec![Vec::new(), Vec::new()];
        assert_eq!(mer(&refs, &empties).unwrap(), 100.0);

        let swapped_refs = vec![refs[1].clone(), refs[0].clone()];
        let swapped_hyps = vec![hyps[1].clone(), hyps[0].clone()];
        assert_eq!(mer(&swapped_refs, &swapped_hyps).unwrap(), 20.0);

        assert!(mer(&[], &[]).is_err());
        assert!(mer(&refs, &hyps[..1].to_vec()).is_err());
    }

    #[test]
    fn label_accuracy_excludes_bracket_positions() {
        let refs = vec![vec![2, 0, 0, 1, 2]];
        assert_eq!(ld_accuracy(&refs, &refs, 2).unwrap(), 100.0);
        let wrong = vec![vec![2, 1, 1, 0, 2]];
        assert_eq!(ld_accuracy(&refs, &wrong, 2).unwrap(), 0.0);
        let half = vec![vec![2, 0, 1, 1, 2]];
        assert!((ld_accuracy(&refs, &half, 2).unwrap() - 66.66666666666667).abs() < 1e-12);
        let two = vec![vec![2, 0, 0, 1, 2], vec![2, 3, 3, 3, 2]];
        let preds = vec![vec![2, 0, 1, 0, 2], vec![2, 3, 3, 0, 2]];
        assert!((ld_accuracy(&two, &preds, 2).unwrap() - 50.0).abs() < 1e-12);
        assert!(ld_accuracy(&refs, &[vec![2, 0]], 2).is_err());
    }

    #[test]
    fn score_report_groups_by_split_and_language() {
        let items = vec![
            ScoredUtterance {
                split: "test_cs".into(),
                reference: vec![word("a"), ch("x1")],
                hypothesis: vec![word("a"), ch("x2")],
            },
            ScoredUtterance {
                split: "test_mono".into(),
                reference: vec![word("a"), word("b")],
                hypothesis: vec![word("a"), word("b")],
            },
        ];
        let report = score_corpus(&items).unwrap();
        assert_eq!(report.reference_units, 4);
        assert_eq!(report.errors, 1);
        assert_eq!(report.overall_mer, 25.0);
        assert_eq!(report.split_mer["test_cs"], 50.0);
        assert_eq!(report.split_mer["test_mono"], 0.0);
        assert_eq!(report.per_language[&UnitTag::M].sub, 1);
        let json = serde_json::to_string(&report).unwrap();
        let back: ScoreReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.overall_mer, 25.0);
        assert!(!json.contains("ld_accuracy"));
    }
}
