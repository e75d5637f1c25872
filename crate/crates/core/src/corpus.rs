//! Synthetic bilingual corpus: code-switched token sequences with
//! log-mel-like feature frames generated straight from per-unit templates.
//!
//! Each vocabulary unit owns a random template vector; a language marker
//! offset on dimension 0 separates the two languages' regions of feature
//! space, except for a configurable fraction of cross-language confusable
//! pairs that share a template exactly. Words emit their units' templates
//! for a jittered number of frames plus Gaussian noise, so language identity
//! is recoverable from acoustics exactly where the generator says it is.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::vocab::{LdLabel, Vocab, VocabError, SOS_EOS_ID, WORD_MARKER};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed corpus file {path}: {detail}")]
    Malformed { path: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    TestCs,
    TestMono,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Valid, Split::TestCs, Split::TestMono];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::TestCs => "test_cs",
            Split::TestMono => "test_mono",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusConfig {
    pub n_units_per_language: usize,
    pub frames_per_unit_mean: usize,
    pub frames_per_unit_jitter: usize,
    pub feature_dim: usize,
    /// Probability of switching language at each word boundary.
    pub switch_prob: f64,
    pub words_per_utterance_min: usize,
    pub words_per_utterance_max: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test_cs: usize,
    pub n_test_mono: usize,
    pub noise_std: f64,
    /// Fraction of unit indices whose language-A and language-B templates
    /// coincide exactly, making them indistinguishable from acoustics alone.
    pub confusable_fraction: f64,
    /// Offset added to dimension 0: +scale for language A, -scale for
    /// language B (confusable pairs excepted).
    pub lang_marker_scale: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> CorpusConfig {
        CorpusConfig {
            n_units_per_language: 20,
            frames_per_unit_mean: 8,
            frames_per_unit_jitter: 2,
            feature_dim: 16,
            switch_prob: 0.3,
            words_per_utterance_min: 3,
            words_per_utterance_max: 8,
            n_train: 2000,
            n_valid: 100,
            n_test_cs: 100,
            n_test_mono: 100,
            noise_std: 0.3,
            confusable_fraction: 0.25,
            lang_marker_scale: 1.0,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |msg: String| Err(CorpusError::InvalidConfig(msg));
        if !(0.0..=1.0).contains(&self.switch_prob) {
            return fail(format!("switch_prob = {} outside [0, 1]", self.switch_prob));
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be at least 1".into());
        }
        if self.frames_per_unit_jitter >= self.frames_per_unit_mean {
            return fail(format!(
                "frames_per_unit_jitter {} must be below mean {}",
                self.frames_per_unit_jitter, self.frames_per_unit_mean
            ));
        }
        if self.n_units_per_language == 0 {
            return fail("n_units_per_language must be at least 1".into());
        }
        if self.words_per_utterance_min == 0
            || self.words_per_utterance_min > self.words_per_utterance_max
        {
            return fail(format!(
                "words per utterance range [{}, {}] is empty or starts at 0",
                self.words_per_utterance_min, self.words_per_utterance_max
            ));
        }
        if !(0.0..=1.0).contains(&self.confusable_fraction) {
            return fail(format!(
                "confusable_fraction = {} outside [0, 1]",
                self.confusable_fraction
            ));
        }
        if self.noise_std < 0.0 {
            return fail(format!("noise_std = {} must be nonnegative", self.noise_std));
        }
        if self.n_train == 0 {
            return fail("n_train must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub split: Split,
    /// Row-major (t, feature_dim) frames.
    pub frames: Vec<f64>,
    pub t: usize,
    /// Token ids bracketed by sos/eos on both ends.
    pub tokens: Vec<usize>,
    pub ld_labels: Vec<LdLabel>,
    /// Fraction of frames emitted by language-A units.
    pub language_ratio: f64,
}

impl Utterance {
    /// Target token ids without the sos/eos brackets.
    pub fn target(&self) -> &[usize] {
        &self.tokens[1..self.tokens.len() - 1]
    }

    pub fn is_code_switched(&self) -> bool {
        let has_a = self.ld_labels.contains(&LdLabel::E);
        let has_b = self.ld_labels.contains(&LdLabel::M);
        has_a && has_b
    }

    /// Per-token language label ids, aligned with `tokens`.
    pub fn ld_ids(&self) -> Vec<usize> {
        self.ld_labels.iter().map(|l| l.id()).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MvnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub vocab: Vocab,
    pub utterances: Vec<Utterance>,
    pub mvn: Option<MvnStats>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Lang {
    A,
    B,
}

struct Inventory {
    a_units: Vec<String>,
    b_units: Vec<String>,
    /// Template per token id (None for specials).
    templates: Vec<Option<Vec<f64>>>,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; one sample per call keeps the draw order obvious.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn build_inventory<R: Rng>(cfg: &CorpusConfig, rng: &mut R) -> Result<(Inventory, Vocab), CorpusError> {
    let n = cfg.n_units_per_language;
    let marked = n.div_ceil(2);
    let a_units: Vec<String> = (0..n)
        .map(|i| {
            if i < marked {
                format!("{WORD_MARKER}a{i:02}")
            } else {
                format!("a{i:02}")
            }
        })
        .collect();
    let b_units: Vec<String> = (0..n).map(|i| format!("b{i:02}")).collect();
    let vocab = Vocab::build(&a_units, &b_units)?;

    let f = cfg.feature_dim;
    let template = |marker: f64, rng: &mut R| -> Vec<f64> {
        let mut v: Vec<f64> = (0..f).map(|_| rng.gen_range(-1.0..1.0)).collect();
        v[0] += marker;
        v
    };
    // Draw templates in unit order, then overwrite the confusable B units,
    // so the confusable count never changes which random values a unit gets.
    let a_templates: Vec<Vec<f64>> = (0..n)
        .map(|_| template(cfg.lang_marker_scale, rng))
        .collect();
    let b_templates: Vec<Vec<f64>> = (0..n)
        .map(|_| template(-cfg.lang_marker_scale, rng))
        .collect();
    let n_confusable = (cfg.confusable_fraction * n as f64).round() as usize;

    let mut templates = vec![None; vocab.len()];
    for (i, unit) in a_units.iter().enumerate() {
        let id = vocab.id_of(unit).expect("unit in vocab");
        templates[id] = Some(a_templates[i].clone());
    }
    for (i, unit) in b_units.iter().enumerate() {
        let id = vocab.id_of(unit).expect("unit in vocab");
        let tpl = if i < n_confusable.min(n) {
            a_templates[i].clone()
        } else {
            b_templates[i].clone()
        };
        templates[id] = Some(tpl);
    }
    Ok((
        Inventory { a_units, b_units, templates },
        vocab,
    ))
}

#[derive(Clone, Copy)]
enum Mode {
    Natural,
    ForcedCs,
    ForcedMono(Lang),
}

/// Per-word language chain: Bernoulli(1/2) start, then a switch with
/// probability switch_prob at each boundary. ForcedCs flips the suffix at a
/// random boundary when the natural draw produced no switch; ForcedMono
/// pins the language throughout.
fn sample_language_chain<R: Rng>(
    cfg: &CorpusConfig,
    mode: Mode,
    n_words: usize,
    rng: &mut R,
) -> Vec<Lang> {
    let mut chain = Vec::with_capacity(n_words);
    let start = if let Mode::ForcedMono(lang) = mode {
        lang
    } else if rng.gen::<f64>() < 0.5 {
        Lang::A
    } else {
        Lang::B
    };
    chain.push(start);
    for _ in 1..n_words {
        let prev = *chain.last().unwrap();
        let next = match mode {
            Mode::ForcedMono(lang) => lang,
            _ => {
                if rng.gen::<f64>() < cfg.switch_prob {
                    if prev == Lang::A {
                        Lang::B
                    } else {
                        Lang::A
                    }
                } else {
                    prev
                }
            }
        };
        chain.push(next);
    }
    if matches!(mode, Mode::ForcedCs) && n_words >= 2 && chain.iter().all(|&l| l == start) {
        let j = rng.gen_range(1..n_words);
        for lang in chain.iter_mut().skip(j) {
            *lang = if *lang == Lang::A { Lang::B } else { Lang::A };
        }
    }
    chain
}

fn sample_word_units<R: Rng>(inv: &Inventory, vocab: &Vocab, lang: Lang, rng: &mut R) -> Vec<usize> {
    let mut units = Vec::with_capacity(2);
    match lang {
        Lang::A => {
            let marked = inv.a_units.iter().filter(|u| u.starts_with(WORD_MARKER)).count();
            let first = rng.gen_range(0..marked);
            units.push(vocab.id_of(&inv.a_units[first]).unwrap());
            let cont = inv.a_units.len() - marked;
            if cont > 0 && rng.gen::<f64>() < 0.5 {
                let c = rng.gen_range(0..cont);
                units.push(vocab.id_of(&inv.a_units[marked + c]).unwrap());
            }
        }
        Lang::B => {
            let first = rng.gen_range(0..inv.b_units.len());
            units.push(vocab.id_of(&inv.b_units[first]).unwrap());
            if rng.gen::<f64>() < 0.5 {
                let second = rng.gen_range(0..inv.b_units.len());
                units.push(vocab.id_of(&inv.b_units[second]).unwrap());
            }
        }
    }
    units
}

/// Frames the CTC lattice needs: room for every target token, a blank
/// between adjacent repeats, and headroom for 4x temporal subsampling.
fn frames_required(target: &[usize]) -> usize {
    let m = target.len();
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    (2 * m + 1).max(5 * (m + repeats)).max(3)
}

fn generate_utterance<R: Rng>(
    cfg: &CorpusConfig,
    inv: &Inventory,
    vocab: &Vocab,
    id: String,
    split: Split,
    mode: Mode,
    rng: &mut R,
) -> Utterance {
    let mut n_words = rng.gen_range(cfg.words_per_utterance_min..=cfg.words_per_utterance_max);
    if matches!(mode, Mode::ForcedCs) {
        n_words = n_words.max(2);
    }
    let chain = sample_language_chain(cfg, mode, n_words, rng);

    let mut unit_ids: Vec<usize> = Vec::new();
    let mut unit_langs: Vec<Lang> = Vec::new();
    for &lang in &chain {
        for id in sample_word_units(inv, vocab, lang, rng) {
            unit_ids.push(id);
            unit_langs.push(lang);
        }
    }

    let jitter = cfg.frames_per_unit_jitter as i64;
    let mut frames_per_unit: Vec<usize> = unit_ids
        .iter()
        .map(|_| {
            let j = rng.gen_range(-jitter..=jitter);
            ((cfg.frames_per_unit_mean as i64 + j).max(1)) as usize
        })
        .collect();
    let required = frames_required(&unit_ids);
    while frames_per_unit.iter().sum::<usize>() < required {
        for f in frames_per_unit.iter_mut() {
            *f += 1;
        }
    }

    let t: usize = frames_per_unit.iter().sum();
    let f_dim = cfg.feature_dim;
    let mut frames = Vec::with_capacity(t * f_dim);
    let mut a_frames = 0usize;
    for ((&uid, &lang), &n_frames) in unit_ids.iter().zip(&unit_langs).zip(&frames_per_unit) {
        let tpl = inv.templates[uid].as_ref().expect("unit has template");
        if lang == Lang::A {
            a_frames += n_frames;
        }
        for _ in 0..n_frames {
            for d in 0..f_dim {
                frames.push(tpl[d] + cfg.noise_std * normal(rng));
            }
        }
    }

    let mut tokens = Vec::with_capacity(unit_ids.len() + 2);
    tokens.push(SOS_EOS_ID);
    tokens.extend(&unit_ids);
    tokens.push(SOS_EOS_ID);
    let ld_labels = vocab.derive_ld_labels(&tokens).expect("ids in range");
    Utterance {
        id,
        split,
        frames,
        t,
        tokens,
        ld_labels,
        language_ratio: a_frames as f64 / t as f64,
    }
}

pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus, CorpusError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (inv, vocab) = build_inventory(config, &mut rng)?;
    if config.switch_prob == 0.0 {
        eprintln!(
            "warning: switch_prob = 0, every utterance is monolingual and the test_cs split cannot contain code-switching"
        );
    }

    let mut utterances = Vec::new();
    for split in Split::ALL {
        let count = match split {
            Split::Train => config.n_train,
            Split::Valid => config.n_valid,
            Split::TestCs => config.n_test_cs,
            Split::TestMono => config.n_test_mono,
        };
        for i in 0..count {
            let mode = match split {
                Split::Train | Split::Valid => Mode::Natural,
                Split::TestCs => {
                    if config.switch_prob == 0.0 {
                        Mode::Natural
                    } else if i % 5 == 4 {
                        Mode::ForcedMono(if i % 2 == 0 { Lang::A } else { Lang::B })
                    } else {
                        Mode::ForcedCs
                    }
                }
                Split::TestMono => {
                    if i % 2 == 0 {
                        Mode::ForcedMono(if (i / 2) % 2 == 0 { Lang::A } else { Lang::B })
                    } else {
                        Mode::Natural
                    }
                }
            };
            let id = format!("{split}-{i:06}");
            utterances.push(generate_utterance(
                config, &inv, &vocab, id, split, mode, &mut rng,
            ));
        }
    }
    Ok(Corpus {
        config: config.clone(),
        vocab,
        utterances,
        mvn: None,
    })
}

/// Per-dimension mean/variance from the training split, applied to every
/// split in place. Zero-variance dimensions are floored at 1e-8 with a
/// warning.
pub fn global_mvn(corpus: &mut Corpus) -> Result<MvnStats, CorpusError> {
    let f = corpus.config.feature_dim;
    let mut mean = vec![0.0f64; f];
    let mut count = 0usize;
    for u in corpus.utterances.iter().filter(|u| u.split == Split::Train) {
        for frame in u.frames.chunks(f) {
            for (m, &x) in mean.iter_mut().zip(frame) {
                *m += x;
            }
        }
        count += u.t;
    }
    if count == 0 {
        return Err(CorpusError::InvalidConfig(
            "training split is empty; cannot normalize".into(),
        ));
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let mut var = vec![0.0f64; f];
    for u in corpus.utterances.iter().filter(|u| u.split == Split::Train) {
        for frame in u.frames.chunks(f) {
            for (d, &x) in frame.iter().enumerate() {
                let c = x - mean[d];
                var[d] += c * c;
            }
        }
    }
    for (d, v) in var.iter_mut().enumerate() {
        *v /= count as f64;
        if *v < 1e-8 {
            eprintln!("warning: feature dimension {d} has near-zero variance; flooring at 1e-8");
            *v = 1e-8;
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / v.sqrt()).collect();
    for u in corpus.utterances.iter_mut() {
        for frame in u.frames.chunks_mut(f) {
            for (d, x) in frame.iter_mut().enumerate() {
                *x = (*x - mean[d]) * inv_std[d];
            }
        }
    }
    let stats = MvnStats { mean, var };
    corpus.mvn = Some(stats.clone());
    Ok(stats)
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    split: Split,
    tokens: Vec<String>,
    frames: usize,
    language_ratio: f64,
}

/// Writes manifest.jsonl, vocab.txt, config.json, optional mvn.json, and
/// one binary feature file per utterance (u64 LE t and f, then row-major
/// f64 LE frames).
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<(), CorpusError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("vocab.txt"), corpus.vocab.to_text())?;
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&corpus.config).expect("config serializes"),
    )?;
    if let Some(mvn) = &corpus.mvn {
        fs::write(
            dir.join("mvn.json"),
            serde_json::to_string(mvn).expect("stats serialize"),
        )?;
    }
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir)?;
    let mut manifest = fs::File::create(dir.join("manifest.jsonl"))?;
    for u in &corpus.utterances {
        let entry = ManifestEntry {
            id: u.id.clone(),
            split: u.split,
            tokens: corpus.vocab.decode_ids(&u.tokens).expect("ids valid"),
            frames: u.t,
            language_ratio: u.language_ratio,
        };
        serde_json::to_writer(&mut manifest, &entry).map_err(std::io::Error::from)?;
        manifest.write_all(b"\n")?;

        let mut bin = Vec::with_capacity(16 + u.frames.len() * 8);
        bin.extend_from_slice(&(u.t as u64).to_le_bytes());
        bin.extend_from_slice(&(corpus.config.feature_dim as u64).to_le_bytes());
        for &x in &u.frames {
            bin.extend_from_slice(&x.to_le_bytes());
        }
        fs::write(feat_dir.join(format!("{}.bin", u.id)), bin)?;
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    let config: CorpusConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)
        .map_err(|e| CorpusError::Malformed {
            path: dir.join("config.json").display().to_string(),
            detail: e.to_string(),
        })?;
    let vocab = Vocab::from_text(&fs::read_to_string(dir.join("vocab.txt"))?)?;
    let mvn = match fs::read_to_string(dir.join("mvn.json")) {
        Ok(text) => Some(serde_json::from_str(&text).map_err(|e| CorpusError::Malformed {
            path: dir.join("mvn.json").display().to_string(),
            detail: e.to_string(),
        })?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };

    let manifest_path = dir.join("manifest.jsonl");
    let manifest = fs::read_to_string(&manifest_path)?;
    let mut utterances = Vec::new();
    for (n, line) in manifest.lines().enumerate() {
        let entry: ManifestEntry =
            serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
                path: manifest_path.display().to_string(),
                detail: format!("line {}: {}", n + 1, e),
            })?;
        let bin_path = dir.join("features").join(format!("{}.bin", entry.id));
        let mut bytes = Vec::new();
        fs::File::open(&bin_path)?.read_to_end(&mut bytes)?;
        let malformed = |detail: &str| CorpusError::Malformed {
            path: bin_path.display().to_string(),
            detail: detail.to_string(),
        };
        if bytes.len() < 16 {
            return Err(malformed("missing shape header"));
        }
        let t = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        let f = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if t != entry.frames || f != config.feature_dim {
            return Err(malformed("shape header disagrees with manifest"));
        }
        if bytes.len() != 16 + t * f * 8 {
            return Err(malformed("payload length disagrees with shape header"));
        }
        let frames: Vec<f64> = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tokens = vocab.encode_text(&entry.tokens);
        let ld_labels = vocab.derive_ld_labels(&tokens)?;
        utterances.push(Utterance {
            id: entry.id,
            split: entry.split,
            frames,
            t,
            tokens,
            ld_labels,
            language_ratio: entry.language_ratio,
        });
    }
    Ok(Corpus { config, vocab, utterances, mvn })
}

/// Duration-weighted fraction of code-switched utterances within a split.
pub fn cs_duration_fraction(corpus: &Corpus, split: Split) -> f64 {
    let mut cs = 0usize;
    let mut total = 0usize;
    for u in corpus.split(split) {
        total += u.t;
        if u.is_code_switched() {
            cs += u.t;
        }
    }
    if total == 0 {
        0.0
    } else {
        cs as f64 / total as f64
    }
}
