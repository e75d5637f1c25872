//! Token inventory plus the token-to-language-label mapping used by the
//! diarization decoder.
//!
//! Ids are dense and deterministic: the four specials first, then
//! language-A subwords sorted, then language-B characters sorted.
//! Language-A subwords follow the usual word-initial marker convention: a
//! leading '\u{2581}' starts a new word, unmarked units continue one.

use std::collections::HashMap;
use std::fmt;

/// Word-initial marker on language-A subwords.
pub const WORD_MARKER: char = '\u{2581}';

pub const BLANK_TOKEN: &str = "<blank>";
pub const UNK_TOKEN: &str = "<unk>";
pub const NOISE_TOKEN: &str = "<noise>";
pub const SOS_EOS_TOKEN: &str = "<sos/eos>";

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("duplicate token {0:?}")]
    DuplicateToken(String),
    #[error("token id {id} out of range for vocab of size {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("malformed vocab line {line}: {detail}")]
    MalformedLine { line: usize, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    LangASubword,
    LangBChar,
    Special,
}

impl TokenClass {
    fn as_str(self) -> &'static str {
        match self {
            TokenClass::LangASubword => "lang_a_subword",
            TokenClass::LangBChar => "lang_b_char",
            TokenClass::Special => "special",
        }
    }

    fn parse(s: &str) -> Option<TokenClass> {
        match s {
            "lang_a_subword" => Some(TokenClass::LangASubword),
            "lang_b_char" => Some(TokenClass::LangBChar),
            "special" => Some(TokenClass::Special),
            _ => None,
        }
    }
}

/// The four diarization labels. Ids are fixed and independent of the ASR
/// vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LdLabel {
    /// Language-A subword.
    E = 0,
    /// Language-B character.
    M = 1,
    SosEos = 2,
    Other = 3,
}

/// Number of diarization labels.
pub const LD_VOCAB_SIZE: usize = 4;

impl LdLabel {
    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<LdLabel> {
        match id {
            0 => Some(LdLabel::E),
            1 => Some(LdLabel::M),
            2 => Some(LdLabel::SosEos),
            3 => Some(LdLabel::Other),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LdLabel::E => "e",
            LdLabel::M => "m",
            LdLabel::SosEos => "sos/eos",
            LdLabel::Other => "other",
        }
    }
}

impl fmt::Display for LdLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    classes: Vec<TokenClass>,
    index: HashMap<String, usize>,
}

pub const BLANK_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const NOISE_ID: usize = 2;
pub const SOS_EOS_ID: usize = 3;

const SPECIALS: [&str; 4] = [BLANK_TOKEN, UNK_TOKEN, NOISE_TOKEN, SOS_EOS_TOKEN];

impl Vocab {
    /// Builds the inventory from the two languages' unit lists. Unit order
    /// within each language does not matter; storage order is canonical.
    pub fn build(a_units: &[String], b_units: &[String]) -> Result<Vocab, VocabError> {
        if a_units.is_empty() && b_units.is_empty() {
            eprintln!("warning: building a specials-only vocab (no language units)");
        }
        let mut a_sorted = a_units.to_vec();
        a_sorted.sort();
        let mut b_sorted = b_units.to_vec();
        b_sorted.sort();

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut classes = vec![TokenClass::Special; SPECIALS.len()];
        tokens.extend(a_sorted.iter().cloned());
        classes.extend(std::iter::repeat(TokenClass::LangASubword).take(a_sorted.len()));
        tokens.extend(b_sorted.iter().cloned());
        classes.extend(std::iter::repeat(TokenClass::LangBChar).take(b_sorted.len()));

        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(VocabError::DuplicateToken(tok.clone()));
            }
        }
        Ok(Vocab { tokens, classes, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Result<&str, VocabError> {
        self.tokens
            .get(id)
            .map(|s| s.as_str())
            .ok_or(VocabError::IdOutOfRange {
                id,
                size: self.len(),
            })
    }

    pub fn class(&self, id: usize) -> Result<TokenClass, VocabError> {
        self.classes
            .get(id)
            .copied()
            .ok_or(VocabError::IdOutOfRange {
                id,
                size: self.len(),
            })
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Unit strings to ids; unknown units become unk.
    pub fn encode_text(&self, units: &[String]) -> Vec<usize> {
        units
            .iter()
            .map(|u| self.id_of(u).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn decode_ids(&self, ids: &[usize]) -> Result<Vec<String>, VocabError> {
        ids.iter().map(|&i| self.token(i).map(String::from)).collect()
    }

    /// Language label per token: A-subwords are e, B-characters are m,
    /// sos/eos keeps its own label, remaining specials are other. Total and
    /// length-preserving.
    pub fn derive_ld_labels(&self, ids: &[usize]) -> Result<Vec<LdLabel>, VocabError> {
        ids.iter()
            .map(|&id| {
                Ok(match self.class(id)? {
                    TokenClass::LangASubword => LdLabel::E,
                    TokenClass::LangBChar => LdLabel::M,
                    TokenClass::Special if id == SOS_EOS_ID => LdLabel::SosEos,
                    TokenClass::Special => LdLabel::Other,
                })
            })
            .collect()
    }

    /// Line-oriented serialization: `token<TAB>class`, id = line index.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (tok, cls) in self.tokens.iter().zip(&self.classes) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(cls.as_str());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Vocab, VocabError> {
        let mut tokens = Vec::new();
        let mut classes = Vec::new();
        let mut index = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let (tok, cls) = line.split_once('\t').ok_or(VocabError::MalformedLine {
                line: n + 1,
                detail: "expected token<TAB>class".into(),
            })?;
            let cls = TokenClass::parse(cls).ok_or(VocabError::MalformedLine {
                line: n + 1,
                detail: format!("unknown class {cls:?}"),
            })?;
            if index.insert(tok.to_string(), n).is_some() {
                return Err(VocabError::DuplicateToken(tok.to_string()));
            }
            tokens.push(tok.to_string());
            classes.push(cls);
        }
        for (i, expect) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*expect) {
                return Err(VocabError::MalformedLine {
                    line: i + 1,
                    detail: format!("expected special token {expect:?}"),
                });
            }
        }
        Ok(Vocab { tokens, classes, index })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn units(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i:02}")).collect()
    }

    fn toy() -> Vocab {
        let mut a = units("\u{2581}a", 5);
        a.extend(units("a", 5));
        Vocab::build(&a, &units("b", 10)).unwrap()
    }

    #[test]
    fn sizes_specials_plus_units() {
        assert_eq!(toy().len(), 24);
        let empty = Vocab::build(&[], &[]).unwrap();
        assert_eq!(empty.len(), 4);
    }

    #[test]
    fn full_scale_inventory_size() {
        let a = units("\u{2581}bpe", 3000);
        let b = units("ch", 2624);
        let v = Vocab::build(&a, &b).unwrap();
        assert_eq!(v.len(), 5628);
    }

    #[test]
    fn duplicate_unit_is_rejected() {
        let a = vec!["x".to_string(), "x".to_string()];
        assert!(matches!(
            Vocab::build(&a, &[]),
            Err(VocabError::DuplicateToken(_))
        ));
    }

    #[test]
    fn cross_language_duplicate_is_rejected() {
        let shared = vec!["same".to_string()];
        assert!(matches!(
            Vocab::build(&shared, &shared),
            Err(VocabError::DuplicateToken(_))
        ));
    }

    #[test]
    fn ld_labels_follow_classes() {
        let v = toy();
        let a_id = v.id_of("\u{2581}a00").unwrap();
        let b_id = v.id_of("b00").unwrap();
        let labels = v
            .derive_ld_labels(&[SOS_EOS_ID, a_id, a_id, b_id, UNK_ID, NOISE_ID, BLANK_ID])
            .unwrap();
        assert_eq!(
            labels,
            vec![
                LdLabel::SosEos,
                LdLabel::E,
                LdLabel::E,
                LdLabel::M,
                LdLabel::Other,
                LdLabel::Other,
                LdLabel::Other,
            ]
        );
        assert!(v.derive_ld_labels(&[]).unwrap().is_empty());
        assert!(v.derive_ld_labels(&[v.len()]).is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = toy();
        let ids: Vec<usize> = vec![3, 4, 9, 14, 1];
        let text = v.decode_ids(&ids).unwrap();
        assert_eq!(v.encode_text(&text), ids);
        assert_eq!(v.encode_text(&["zzz".to_string()]), vec![UNK_ID]);
    }

    #[test]
    fn serialization_round_trip() {
        let v = toy();
        let text = v.to_text();
        let back = Vocab::from_text(&text).unwrap();
        assert_eq!(back.len(), v.len());
        for id in 0..v.len() {
            assert_eq!(back.token(id).unwrap(), v.token(id).unwrap());
            assert_eq!(back.class(id).unwrap(), v.class(id).unwrap());
        }
    }

    #[test]
    fn labels_depend_only_on_classes_not_storage_order() {
        // Same inventory presented in different orders must produce the
        // same label sequence for the same unit strings.
        let mut a1 = units("\u{2581}a", 4);
        let a2: Vec<String> = a1.iter().rev().cloned().collect();
        a1.rotate_left(1);
        let b = units("b", 4);
        let v1 = Vocab::build(&a1, &b).unwrap();
        let v2 = Vocab::build(&a2, &b).unwrap();
        let text: Vec<String> = vec!["\u{2581}a02".into(), "b03".into(), "\u{2581}a00".into()];
        let l1 = v1.derive_ld_labels(&v1.encode_text(&text)).unwrap();
        let l2 = v2.derive_ld_labels(&v2.encode_text(&text)).unwrap();
        assert_eq!(l1, l2);
    }
}
