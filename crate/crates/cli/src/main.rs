//! Command-line front end: corpus generation, training, evaluation,
//! checkpoint averaging, system ablations, and report rendering.
//!
//! Configuration comes from an optional JSON file; any field can be
//! overridden on the command line as `--section.field value` pairs after
//! the named flags. Relative `--out` paths are resolved under the
//! `MIXASR_OUT_ROOT` environment variable when it is set.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use mixasr::checkpoint::{average_checkpoints, Checkpoint, CheckpointError};
use mixasr::corpus::{
    cs_duration_fraction, generate_corpus, global_mvn, load_corpus, save_corpus, Corpus,
    CorpusError, Split,
};
use mixasr::harness::{
    evaluate_model, render_table, run_ablation, train, write_decoded_jsonl, AblationReport,
    AblationSpec, EvalReport, ExperimentConfig, HarnessError, RunRecord, SystemId,
};
use mixasr::model::Model;

const EXIT_HELP: &str = "Exit codes:
  0  success
  2  configuration error (also used by argument parsing)
  3  missing or malformed data and artifacts
  4  training diverged
  1  anything else

Overrides: append `--section.field value` pairs after the named flags,
e.g. `mixasr train --out run1 --train.epochs 5 --model.d 128`.
Relative --out paths resolve under $MIXASR_OUT_ROOT when set.";

#[derive(Parser)]
#[command(name = "mixasr", version, about = "Bilingual speech recognition toolkit", after_help = EXIT_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trailing `--section.field value` override pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic bilingual corpus and save it to a directory.
    GenCorpus {
        #[arg(long, default_value = "corpus")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model; keeps the best checkpoints and installs their average.
    Train {
        /// Directory of a saved corpus; defaults to generating one in memory.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "train-run")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Decode one split with a checkpoint and score it.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_split, default_value = "test_cs")]
        split: Split,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Average several checkpoints into one.
    Average {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train and score the system matrix over several seeds.
    Ablate {
        /// Comma-separated subset of: s0, ld, lpb, ld_lpb, grl.
        #[arg(long, value_delimiter = ',', value_parser = parse_system)]
        systems: Option<Vec<SystemId>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        grl_lambda: Option<f64>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render a stored ablation or evaluation JSON report as text.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> CliError {
        CliError { code: 2, message: message.into() }
    }

    fn data(message: impl Into<String>) -> CliError {
        CliError { code: 3, message: message.into() }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> CliError {
        let code = match &e {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) | HarnessError::Corpus(_) | HarnessError::Metrics(_)
            | HarnessError::Checkpoint(_) | HarnessError::Vocab(_) => 3,
            HarnessError::Diverged { .. } => 4,
            _ => 1,
        };
        let message = match &e {
            HarnessError::Diverged { dump: Some(path), .. } => {
                format!("{e} (details in {})", path.display())
            }
            _ => e.to_string(),
        };
        CliError { code, message }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> CliError {
        let code = match &e {
            CorpusError::InvalidConfig(_) => 2,
            _ => 3,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> CliError {
        CliError { code: 3, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError { code: 1, message: e.to_string() }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> CliError {
        CliError { code: 1, message: e.to_string() }
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::ALL
        .into_iter()
        .find(|split| split.as_str() == s)
        .ok_or_else(|| format!("unknown split {s:?}; expected train, valid, test_cs, or test_mono"))
}

fn parse_system(s: &str) -> Result<SystemId, String> {
    SystemId::ALL
        .into_iter()
        .find(|system| system.slug() == s)
        .ok_or_else(|| format!("unknown system {s:?}; expected s0, ld, lpb, ld_lpb, or grl"))
}

/// Resolves a relative output path under `MIXASR_OUT_ROOT` when set.
fn resolve_out(out: &Path) -> PathBuf {
    if out.is_absolute() {
        return out.to_path_buf();
    }
    match std::env::var_os("MIXASR_OUT_ROOT") {
        Some(root) => PathBuf::from(root).join(out),
        None => out.to_path_buf(),
    }
}

/// Recursively overlays `incoming` onto `base`; objects merge, scalars replace.
fn deep_merge(base: &mut Value, incoming: Value) {
    match (base, incoming) {
        (Value::Object(b), Value::Object(inc)) => {
            for (k, v) in inc {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses an override value with the type of the field it replaces: string
/// fields take the text verbatim, everything else parses as JSON.
fn coerce(raw: &str, like: &Value) -> Result<Value, CliError> {
    if like.is_string() {
        return Ok(Value::String(raw.to_string()));
    }
    serde_json::from_str(raw)
        .map_err(|_| CliError::config(format!("cannot parse override value {raw:?}")))
}

fn set_path(root: &mut Value, dotted: &str, raw: &str) -> Result<(), CliError> {
    let not_a_field = || CliError::config(format!("{dotted:?} does not name a config field"));
    let unknown = || CliError::config(format!("unknown config field {dotted:?}"));
    let mut parts: Vec<&str> = dotted.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = root;
    for part in parts {
        cur = match cur {
            Value::Object(map) => map.get_mut(part).ok_or_else(unknown)?,
            _ => return Err(not_a_field()),
        };
    }
    let slot = cur
        .as_object_mut()
        .ok_or_else(not_a_field)?
        .get_mut(last)
        .ok_or_else(unknown)?;
    let parsed = coerce(raw, slot)?;
    *slot = parsed;
    Ok(())
}

fn apply_overrides(root: &mut Value, overrides: &[String]) -> Result<(), CliError> {
    let mut it = overrides.iter();
    while let Some(key) = it.next() {
        let dotted = key.strip_prefix("--").ok_or_else(|| {
            CliError::config(format!("expected an override flag like --train.epochs, got {key:?}"))
        })?;
        let raw = it
            .next()
            .ok_or_else(|| CliError::config(format!("missing value for --{dotted}")))?;
        set_path(root, dotted, raw)?;
    }
    Ok(())
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    let mut merged = serde_json::to_value(ExperimentConfig::default()).expect("defaults serialize");
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("cannot read config {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("config {} is not valid JSON: {e}", path.display())))?;
        deep_merge(&mut merged, file);
    }
    apply_overrides(&mut merged, &args.overrides)?;
    serde_json::from_value(merged).map_err(|e| CliError::config(e.to_string()))
}

/// Loads a saved corpus (its stored settings replace the config's corpus
/// section) or generates and normalizes one from the config.
fn obtain_corpus(cfg: &mut ExperimentConfig, dir: &Option<PathBuf>) -> Result<Corpus, CliError> {
    match dir {
        Some(d) => {
            let corpus = load_corpus(d)?;
            cfg.corpus = corpus.config.clone();
            Ok(corpus)
        }
        None => {
            let mut corpus = generate_corpus(&cfg.corpus)?;
            global_mvn(&mut corpus)?;
            Ok(corpus)
        }
    }
}

fn check_model_matches_corpus(model: &Model, corpus: &Corpus) -> Result<(), CliError> {
    if model.cfg.vocab_size != corpus.vocab.len() {
        return Err(CliError::config(format!(
            "checkpoint vocabulary size {} does not match the corpus ({})",
            model.cfg.vocab_size,
            corpus.vocab.len()
        )));
    }
    if model.cfg.feature_dim != corpus.config.feature_dim {
        return Err(CliError::config(format!(
            "checkpoint feature_dim {} does not match the corpus ({})",
            model.cfg.feature_dim, corpus.config.feature_dim
        )));
    }
    Ok(())
}

fn render_run(record: &RunRecord) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>5} {:>12} {:>12} {:>12}", "epoch", "train", "valid", "best");
    for e in &record.epochs {
        let _ = writeln!(
            out,
            "{:>5} {:>12.4} {:>12.4} {:>12.4}",
            e.epoch, e.train.total, e.valid.total, e.best_valid_so_far
        );
    }
    let _ = writeln!(
        out,
        "best epoch {} (valid loss {:.4}); kept {} checkpoints; averaged -> {}",
        record.best_epoch,
        record.best_valid_loss,
        record.checkpoints.len(),
        record.averaged_checkpoint.display()
    );
    if let Some(mer) = record.valid_mer {
        let _ = writeln!(out, "valid MER with averaged parameters: {mer:.2}");
    }
    let _ = writeln!(
        out,
        "language decoder passes: {}; backend: {}; wall time {} ms",
        record.ld_passes, record.backend, record.wall_ms
    );
    out
}

fn render_eval(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "split {}: {} utterances, {} without natural termination",
        report.split, report.utterances, report.no_termination_count
    );
    let _ = writeln!(
        out,
        "overall MER {:.2} ({} errors / {} reference units)",
        report.score.overall_mer, report.score.errors, report.score.reference_units
    );
    for (tag, e) in &report.score.per_language {
        let _ = writeln!(
            out,
            "  language {:<6} sub {:>4} del {:>4} ins {:>4}",
            tag.as_str(),
            e.sub,
            e.del,
            e.ins
        );
    }
    if let Some(acc) = report.score.ld_accuracy {
        let _ = writeln!(out, "language label accuracy {acc:.2}");
    }
    out
}

fn cmd_gen_corpus(out: &Path, cfg_args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = load_config(cfg_args)?;
    let mut corpus = generate_corpus(&cfg.corpus)?;
    global_mvn(&mut corpus)?;
    let out = resolve_out(out);
    save_corpus(&corpus, &out)?;
    println!("saved corpus to {}", out.display());
    println!("vocabulary: {} entries", corpus.vocab.len());
    for split in Split::ALL {
        let n = corpus.split(split).count();
        let cs = cs_duration_fraction(&corpus, split);
        println!("  {split:<10} {n:>5} utterances, code-switched duration fraction {cs:.3}");
    }
    Ok(())
}

fn cmd_train(corpus_dir: &Option<PathBuf>, out: &Path, cfg_args: &ConfigArgs) -> Result<(), CliError> {
    let mut cfg = load_config(cfg_args)?;
    let corpus = obtain_corpus(&mut cfg, corpus_dir)?;
    cfg.validate()?;
    let out = resolve_out(out);
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)
        .map_err(|e| CliError::config(e.to_string()))?;
    let record = train(&mut model, &corpus, &cfg.train, &cfg.decode, &out)?;
    print!("{}", render_run(&record));
    println!("run summary: {}", out.join("run.json").display());
    Ok(())
}

fn cmd_evaluate(
    checkpoint: &Path,
    split: Split,
    corpus_dir: &Option<PathBuf>,
    out: &Path,
    cfg_args: &ConfigArgs,
) -> Result<(), CliError> {
    let mut cfg = load_config(cfg_args)?;
    let corpus = obtain_corpus(&mut cfg, corpus_dir)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.build_model()?;
    check_model_matches_corpus(&model, &corpus)?;
    let report = evaluate_model(&model, &corpus, split, &cfg.decode)?;
    let out = resolve_out(out);
    fs::create_dir_all(&out)?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(out.join("report.json"))?), &report)?;
    write_decoded_jsonl(&out.join("decoded.jsonl"), &report.decoded)?;
    print!("{}", render_eval(&report));
    println!("report: {}", out.join("report.json").display());
    Ok(())
}

fn cmd_average(inputs: &[PathBuf], output: &Path) -> Result<(), CliError> {
    let checkpoints: Vec<Checkpoint> =
        inputs.iter().map(|p| Checkpoint::load(p)).collect::<Result<_, _>>()?;
    let averaged = average_checkpoints(&checkpoints)?;
    let output = resolve_out(output);
    if let Some(parent) = output.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    averaged.save(&output)?;
    println!("averaged {} checkpoints -> {} ({})", inputs.len(), output.display(), averaged.meta.label);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    systems: Option<Vec<SystemId>>,
    seeds: Option<Vec<u64>>,
    beta: Option<f64>,
    grl_lambda: Option<f64>,
    corpus_dir: &Option<PathBuf>,
    out: &Path,
    cfg_args: &ConfigArgs,
) -> Result<(), CliError> {
    let mut cfg = load_config(cfg_args)?;
    let corpus = obtain_corpus(&mut cfg, corpus_dir)?;
    cfg.validate()?;
    let mut spec = AblationSpec::default();
    if let Some(systems) = systems {
        spec.systems = systems;
    }
    if let Some(seeds) = seeds {
        spec.seeds = seeds;
    }
    if let Some(beta) = beta {
        spec.beta = beta;
    }
    if let Some(grl_lambda) = grl_lambda {
        spec.grl_lambda = grl_lambda;
    }
    let out = resolve_out(out);
    let report = run_ablation(&corpus, &cfg.model, &cfg.train, &cfg.decode, &spec, &out)?;
    print!("{}", render_table(&report));
    println!("report: {}", out.join("ablation.json").display());
    Ok(())
}

fn cmd_report(input: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(input)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", input.display())))?;
    if let Ok(report) = serde_json::from_str::<AblationReport>(&text) {
        print!("{}", render_table(&report));
        return Ok(());
    }
    if let Ok(report) = serde_json::from_str::<EvalReport>(&text) {
        print!("{}", render_eval(&report));
        return Ok(());
    }
    Err(CliError::data(format!(
        "{} is neither an ablation report nor an evaluation report",
        input.display()
    )))
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenCorpus { out, cfg } => cmd_gen_corpus(&out, &cfg),
        Command::Train { corpus, out, cfg } => cmd_train(&corpus, &out, &cfg),
        Command::Evaluate { checkpoint, split, corpus, out, cfg } => {
            cmd_evaluate(&checkpoint, split, &corpus, &out, &cfg)
        }
        Command::Average { inputs, output } => cmd_average(&inputs, &output),
        Command::Ablate { systems, seeds, beta, grl_lambda, corpus, out, cfg } => {
            cmd_ablate(systems, seeds, beta, grl_lambda, &corpus, &out, &cfg)
        }
        Command::Report { input } => cmd_report(&input),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_value() -> Value {
        serde_json::to_value(ExperimentConfig::default()).unwrap()
    }

    #[test]
    fn overrides_reach_nested_fields_with_the_right_types() {
        let mut v = base_value();
        let overrides: Vec<String> = [
            "--model.d", "32",
            "--model.use_lpb", "true",
            "--train.peak_lr", "0.01",
            "--corpus.seed", "9",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        apply_overrides(&mut v, &overrides).unwrap();
        let cfg: ExperimentConfig = serde_json::from_value(v).unwrap();
        assert_eq!(cfg.model.d, 32);
        assert!(cfg.model.use_lpb);
        assert_eq!(cfg.train.peak_lr, 0.01);
        assert_eq!(cfg.corpus.seed, 9);
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        let mut v = base_value();
        let unknown = vec!["--model.width".to_string(), "3".to_string()];
        assert_eq!(apply_overrides(&mut v, &unknown).unwrap_err().code, 2);

        let missing_value = vec!["--model.d".to_string()];
        assert_eq!(apply_overrides(&mut v, &missing_value).unwrap_err().code, 2);

        let not_a_flag = vec!["model.d".to_string(), "3".to_string()];
        assert_eq!(apply_overrides(&mut v, &not_a_flag).unwrap_err().code, 2);

        let unparsable = vec!["--model.d".to_string(), "wide".to_string()];
        assert_eq!(apply_overrides(&mut v, &unparsable).unwrap_err().code, 2);
    }

    #[test]
    fn partial_config_files_merge_over_defaults() {
        let mut v = base_value();
        deep_merge(&mut v, serde_json::json!({"model": {"d": 48}, "train": {"epochs": 3}}));
        let cfg: ExperimentConfig = serde_json::from_value(v).unwrap();
        assert_eq!(cfg.model.d, 48);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.heads, ExperimentConfig::default().model.heads);

        let mut v = base_value();
        deep_merge(&mut v, serde_json::json!({"optimizer": {"lr": 0.1}}));
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }

    #[test]
    fn error_categories_map_to_exit_codes() {
        assert_eq!(CliError::from(HarnessError::Config("x".into())).code, 2);
        assert_eq!(CliError::from(HarnessError::Data("x".into())).code, 3);
        let diverged = HarnessError::Diverged {
            epoch: 1,
            step: 2,
            detail: "boom".into(),
            dump: Some(PathBuf::from("/tmp/d.json")),
        };
        let err = CliError::from(diverged);
        assert_eq!(err.code, 4);
        assert!(err.message.contains("/tmp/d.json"));
        assert_eq!(CliError::from(CorpusError::InvalidConfig("x".into())).code, 2);
    }

    #[test]
    fn split_and_system_names_parse() {
        assert_eq!(parse_split("test_cs").unwrap(), Split::TestCs);
        assert!(parse_split("dev").is_err());
        assert_eq!(parse_system("ld_lpb").unwrap(), SystemId::LdLpb);
        assert!(parse_system("s9").is_err());
    }
}
