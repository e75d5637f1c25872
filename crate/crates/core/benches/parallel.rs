//! Side-by-side timing of the data-parallel batch operations and their
//! sequential twins, in one run. The two workloads mirror the hot loops of
//! the harness: per-utterance loss gradients (the training inner loop) and
//! beam-search decoding (evaluation). `par_map` runs on whatever backend the
//! build selected; `seq_map` always stays on the calling thread, so a default
//! build reports the rayon pool against single-threaded execution.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mixasr::corpus::{generate_corpus, global_mvn, Corpus, CorpusConfig, Split, Utterance};
use mixasr::decoding::{beam_search, DecodeConfig};
use mixasr::model::{DropoutCtx, Model, ModelConfig};
use mixasr::par::{backend, par_map, seq_map};
use mixasr::tensor::Tensor;

fn bench_corpus() -> Corpus {
    let cfg = CorpusConfig {
        n_units_per_language: 4,
        frames_per_unit_mean: 4,
        frames_per_unit_jitter: 1,
        feature_dim: 6,
        switch_prob: 0.3,
        words_per_utterance_min: 2,
        words_per_utterance_max: 3,
        n_train: 16,
        n_valid: 4,
        n_test_cs: 8,
        n_test_mono: 8,
        noise_std: 0.2,
        confusable_fraction: 0.25,
        lang_marker_scale: 1.0,
        seed: 97,
    };
    let mut corpus = generate_corpus(&cfg).expect("corpus generation");
    global_mvn(&mut corpus).expect("normalization");
    corpus
}

fn bench_model(vocab_size: usize) -> Model {
    let cfg = ModelConfig {
        d: 16,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ld_layers: 1,
        ffn_dim: 24,
        conv_kernel: 3,
        subsample_factor: 2,
        feature_dim: 6,
        vocab_size,
        beta: 0.3,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    Model::new(cfg, 7).expect("model construction")
}

/// One training-loop work item: forward losses plus a full backward pass.
fn gradient_one(model: &Model, utt: &Utterance) -> f64 {
    let features =
        Tensor::from_vec(utt.frames.clone(), &[utt.t, model.cfg.feature_dim]).expect("features");
    let losses = model
        .utterance_loss(&features, &utt.tokens, &utt.ld_ids(), &mut DropoutCtx::eval())
        .expect("loss");
    let grads = losses.total.backward().expect("backward");
    losses.total.scalar() + grads.get_or_zero(&losses.l_att).iter().sum::<f64>()
}

/// One evaluation work item: joint beam-search decode of an utterance.
fn decode_one(model: &Model, utt: &Utterance, dcfg: &DecodeConfig) -> f64 {
    let features =
        Tensor::from_vec(utt.frames.clone(), &[utt.t, model.cfg.feature_dim]).expect("features");
    let out = beam_search(model, &features, dcfg).expect("decode");
    out.nbest.first().map(|h| h.combined_score).unwrap_or(f64::NEG_INFINITY)
}

fn gradient_batches(c: &mut Criterion) {
    let corpus = bench_corpus();
    let model = bench_model(corpus.vocab.len());
    let utts: Vec<&Utterance> = corpus.split(Split::Train).collect();

    let mut group = c.benchmark_group("utterance_gradients");
    group.sample_size(20).warm_up_time(Duration::from_millis(500)).measurement_time(Duration::from_secs(3));
    group.bench_function(BenchmarkId::new("par_map", backend()), |b| {
        b.iter(|| par_map(&utts, |utt| gradient_one(&model, utt)))
    });
    group.bench_function(BenchmarkId::new("seq_map", "sequential"), |b| {
        b.iter(|| seq_map(&utts, |utt| gradient_one(&model, utt)))
    });
    group.finish();
}

fn decode_batches(c: &mut Criterion) {
    let corpus = bench_corpus();
    let model = bench_model(corpus.vocab.len());
    let utts: Vec<&Utterance> = corpus.split(Split::TestCs).collect();
    let dcfg = DecodeConfig { beam: 4, alpha: 0.4, max_len: 16 };

    let mut group = c.benchmark_group("beam_decode");
    group.sample_size(20).warm_up_time(Duration::from_millis(500)).measurement_time(Duration::from_secs(3));
    group.bench_function(BenchmarkId::new("par_map", backend()), |b| {
        b.iter(|| par_map(&utts, |utt| decode_one(&model, utt, &dcfg)))
    });
    group.bench_function(BenchmarkId::new("seq_map", "sequential"), |b| {
        b.iter(|| seq_map(&utts, |utt| decode_one(&model, utt, &dcfg)))
    });
    group.finish();
}

criterion_group!(backends, gradient_batches, decode_batches);
criterion_main!(backends);
