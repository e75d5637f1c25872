//! Trains and scores a matrix of system variants over several seeds and
//! summarizes the medians in a single table.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::evaluate_model;
use super::train::{train, TrainConfig};
use super::{HarnessError, Result};
use crate::corpus::{Corpus, Split};
use crate::decoding::DecodeConfig;
use crate::model::{Model, ModelConfig};
use crate::par::backend;

/// The system variants under comparison. `S0` is the plain hybrid model;
/// the others add the auxiliary language decoder in different roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemId {
    S0,
    Ld,
    Lpb,
    LdLpb,
    Grl,
}

impl SystemId {
    pub const ALL: [SystemId; 5] =
        [SystemId::S0, SystemId::Ld, SystemId::Lpb, SystemId::LdLpb, SystemId::Grl];

    pub fn label(self) -> &'static str {
        match self {
            SystemId::S0 => "S0",
            SystemId::Ld => "+LD",
            SystemId::Lpb => "+LPB",
            SystemId::LdLpb => "+LD+LPB",
            SystemId::Grl => "+GRL",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            SystemId::S0 => "s0",
            SystemId::Ld => "ld",
            SystemId::Lpb => "lpb",
            SystemId::LdLpb => "ld_lpb",
            SystemId::Grl => "grl",
        }
    }

    /// Specializes a base model configuration for this system. The bias-only
    /// variant keeps the auxiliary loss off and trains the language decoder
    /// purely as a posterior source; variants that feed the bias train the
    /// language decoder causally so training matches decoding.
    pub fn apply(self, base: &ModelConfig, beta: f64, grl_lambda: f64) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.beta = 0.0;
        cfg.use_lpb = false;
        cfg.use_grl = false;
        cfg.grl_lambda = 1.0;
        cfg.ld_full_context = true;
        match self {
            SystemId::S0 => {}
            SystemId::Ld => cfg.beta = beta,
            SystemId::Lpb => {
                cfg.use_lpb = true;
                cfg.ld_full_context = false;
            }
            SystemId::LdLpb => {
                cfg.beta = beta;
                cfg.use_lpb = true;
                cfg.ld_full_context = false;
            }
            SystemId::Grl => {
                cfg.beta = beta;
                cfg.use_grl = true;
                cfg.grl_lambda = grl_lambda;
            }
        }
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    pub systems: Vec<SystemId>,
    pub seeds: Vec<u64>,
    /// Auxiliary loss weight for the systems that train the language decoder.
    pub beta: f64,
    pub grl_lambda: f64,
}

impl Default for AblationSpec {
    fn default() -> AblationSpec {
        AblationSpec {
            systems: SystemId::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            beta: 0.8,
            grl_lambda: 1.0,
        }
    }
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(HarnessError::Config(msg.into()));
        if self.systems.is_empty() {
            return bad("at least one system is required");
        }
        let mut seen = std::collections::HashSet::new();
        if !self.systems.iter().all(|s| seen.insert(*s)) {
            return bad("duplicate system id");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        let mut seen = std::collections::HashSet::new();
        if !self.seeds.iter().all(|s| seen.insert(*s)) {
            return bad("duplicate seed");
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return bad("beta must be positive and finite");
        }
        if !(self.grl_lambda.is_finite() && self.grl_lambda >= 0.0) {
            return bad("grl_lambda must be non-negative and finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub test_cs_mer: f64,
    pub test_mono_mer: f64,
    pub valid_loss: f64,
    pub ld_accuracy: Option<f64>,
    pub ld_passes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemRow {
    pub system: SystemId,
    pub label: String,
    pub beta: f64,
    pub outcomes: Vec<SeedOutcome>,
    pub median_test_cs: Option<f64>,
    pub median_test_mono: Option<f64>,
    pub failed: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<SystemRow>,
    pub corpus_seed: u64,
    pub seeds: Vec<u64>,
    pub beta: f64,
    pub grl_lambda: f64,
    pub reference_note: String,
    pub backend: String,
}

const REFERENCE_NOTE: &str = "Full-scale reference points (MER %, code-switched/monolingual): \
S0 = 16.7/23.4, S2.8 (+LD+LPB at beta 0.8) = 16.3/23.0. \
Desk-scale synthetic runs are not comparable in absolute terms.";

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn run_one(
    corpus: &Corpus,
    base: &ModelConfig,
    tcfg: &TrainConfig,
    dcfg: &DecodeConfig,
    spec: &AblationSpec,
    system: SystemId,
    seed: u64,
    out_dir: &Path,
) -> Result<SeedOutcome> {
    let cfg = system.apply(base, spec.beta, spec.grl_lambda);
    cfg.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut model = Model::new(cfg, seed)?;
    let run_dir = out_dir.join(system.slug()).join(format!("seed{seed}"));
    let run_tcfg = TrainConfig { seed, ..tcfg.clone() };
    let record = train(&mut model, corpus, &run_tcfg, dcfg, &run_dir)?;
    let cs = evaluate_model(&model, corpus, Split::TestCs, dcfg)?;
    let mono = evaluate_model(&model, corpus, Split::TestMono, dcfg)?;
    Ok(SeedOutcome {
        seed,
        test_cs_mer: cs.score.overall_mer,
        test_mono_mer: mono.score.overall_mer,
        valid_loss: record.best_valid_loss,
        ld_accuracy: cs.score.ld_accuracy,
        ld_passes: model.ld_pass_count(),
    })
}

/// Trains every requested system at every seed and reports per-system
/// median error rates. A failing run marks its row as failed and leaves
/// the other rows intact. Writes `ablation.json` and `ablation.txt` into
/// `out_dir` alongside the per-run directories.
pub fn run_ablation(
    corpus: &Corpus,
    base: &ModelConfig,
    tcfg: &TrainConfig,
    dcfg: &DecodeConfig,
    spec: &AblationSpec,
    out_dir: &Path,
) -> Result<AblationReport> {
    spec.validate()?;
    tcfg.validate()?;
    fs::create_dir_all(out_dir)?;

    let mut rows = Vec::with_capacity(spec.systems.len());
    for &system in &spec.systems {
        let mut outcomes = Vec::with_capacity(spec.seeds.len());
        let mut error = None;
        for &seed in &spec.seeds {
            match run_one(corpus, base, tcfg, dcfg, spec, system, seed, out_dir) {
                Ok(outcome) => outcomes.push(outcome),
                Err(e) => {
                    error = Some(format!("seed {seed}: {e}"));
                    break;
                }
            }
        }
        let failed = error.is_some();
        let cs: Vec<f64> = outcomes.iter().map(|o| o.test_cs_mer).collect();
        let mono: Vec<f64> = outcomes.iter().map(|o| o.test_mono_mer).collect();
        rows.push(SystemRow {
            system,
            label: system.label().to_string(),
            beta: spec.beta,
            median_test_cs: (!failed).then(|| median(&cs)),
            median_test_mono: (!failed).then(|| median(&mono)),
            outcomes,
            failed,
            error,
        });
    }

    let report = AblationReport {
        rows,
        corpus_seed: corpus.config.seed,
        seeds: spec.seeds.clone(),
        beta: spec.beta,
        grl_lambda: spec.grl_lambda,
        reference_note: REFERENCE_NOTE.to_string(),
        backend: backend().to_string(),
    };
    serde_json::to_writer_pretty(
        BufWriter::new(File::create(out_dir.join("ablation.json"))?),
        &report,
    )?;
    fs::write(out_dir.join("ablation.txt"), render_table(&report))?;
    Ok(report)
}

/// Aligned plain-text rendering of the report.
pub fn render_table(report: &AblationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>10} {:>10}  per-seed cs/mono", "system", "test_cs", "test_mono");
    for row in &report.rows {
        if row.failed {
            let reason = row.error.as_deref().unwrap_or("unknown");
            let _ = writeln!(out, "{:<10} {:>10} {:>10}  FAILED: {}", row.label, "-", "-", reason);
            continue;
        }
        let seeds = row
            .outcomes
            .iter()
            .map(|o| format!("{:.2}/{:.2}", o.test_cs_mer, o.test_mono_mer))
            .collect::<Vec<_>>()
            .join("  ");
        let _ = writeln!(
            out,
            "{:<10} {:>10.2} {:>10.2}  {}",
            row.label,
            row.median_test_cs.unwrap_or(f64::NAN),
            row.median_test_mono.unwrap_or(f64::NAN),
            seeds
        );
    }
    let _ = writeln!(out, "seeds: {:?}  beta: {}  backend: {}", report.seeds, report.beta, report.backend);
    let _ = writeln!(out, "{}", report.reference_note);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_corpus;
    use crate::harness::eval::tests::{micro_corpus_config, micro_model_config};

    #[test]
    fn system_configs_toggle_the_right_features() {
        let base = micro_model_config(12);
        let s0 = SystemId::S0.apply(&base, 0.8, 1.0);
        assert_eq!((s0.beta, s0.use_lpb, s0.use_grl), (0.0, false, false));
        assert!(!s0.has_ld());

        let ld = SystemId::Ld.apply(&base, 0.8, 1.0);
        assert_eq!((ld.beta, ld.use_lpb, ld.ld_full_context), (0.8, false, true));

        let lpb = SystemId::Lpb.apply(&base, 0.8, 1.0);
        assert_eq!((lpb.beta, lpb.use_lpb, lpb.ld_full_context), (0.0, true, false));
        assert!(lpb.lpb_stop_gradient);

        let both = SystemId::LdLpb.apply(&base, 0.8, 1.0);
        assert_eq!((both.beta, both.use_lpb, both.ld_full_context), (0.8, true, false));

        let grl = SystemId::Grl.apply(&base, 0.8, 0.5);
        assert_eq!((grl.beta, grl.use_grl, grl.grl_lambda), (0.8, true, 0.5));
        assert!(!grl.use_lpb);

        for system in SystemId::ALL {
            system.apply(&base, 0.8, 1.0).validate().unwrap();
        }
        assert_eq!(SystemId::LdLpb.label(), "+LD+LPB");
        assert_eq!(SystemId::LdLpb.slug(), "ld_lpb");
    }

    #[test]
    fn spec_validation_rejects_degenerate_matrices() {
        assert!(AblationSpec::default().validate().is_ok());
        let bad = AblationSpec { systems: vec![], ..AblationSpec::default() };
        assert!(bad.validate().is_err());
        let bad = AblationSpec { seeds: vec![], ..AblationSpec::default() };
        assert!(bad.validate().is_err());
        let bad = AblationSpec { seeds: vec![1, 1], ..AblationSpec::default() };
        assert!(bad.validate().is_err());
        let bad = AblationSpec { systems: vec![SystemId::S0, SystemId::S0], ..AblationSpec::default() };
        assert!(bad.validate().is_err());
        let bad = AblationSpec { beta: 0.0, ..AblationSpec::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn median_handles_odd_and_even_counts() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[5.0]), 5.0);
    }

    #[test]
    fn the_table_is_a_pure_function_of_configs_and_seeds() {
        let corpus = generate_corpus(&micro_corpus_config()).unwrap();
        let base = micro_model_config(corpus.vocab.len());
        let tcfg = TrainConfig {
            epochs: 1,
            batch_size: 6,
            peak_lr: 1e-3,
            warmup_steps: 2,
            k_best: 1,
            ..TrainConfig::default()
        };
        let dcfg = DecodeConfig { beam: 2, alpha: 0.4, max_len: 8 };
        let spec = AblationSpec {
            systems: vec![SystemId::S0, SystemId::LdLpb],
            seeds: vec![0],
            ..AblationSpec::default()
        };

        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let report = run_ablation(&corpus, &base, &tcfg, &dcfg, &spec, dir.path()).unwrap();
            assert!(dir.path().join("ablation.json").exists());
            assert!(dir.path().join("ablation.txt").exists());
            report
        };
        let a = run();
        let b = run();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );

        assert_eq!(a.rows.len(), 2);
        let s0 = &a.rows[0];
        assert_eq!(s0.system, SystemId::S0);
        assert!(!s0.failed);
        assert_eq!(s0.outcomes.len(), 1);
        assert_eq!(s0.outcomes[0].ld_passes, 0);
        assert!(s0.outcomes[0].ld_accuracy.is_none());
        assert!(s0.median_test_cs.is_some());

        let both = &a.rows[1];
        assert!(both.outcomes[0].ld_passes > 0);
        assert!(both.outcomes[0].ld_accuracy.is_some());

        let table = render_table(&a);
        assert!(table.contains("S0"));
        assert!(table.contains("+LD+LPB"));
        assert!(table.contains("16.7/23.4"));
        assert!(table.contains("16.3/23.0"));
    }

    #[test]
    fn a_failing_row_leaves_the_others_intact() {
        let corpus = generate_corpus(&micro_corpus_config()).unwrap();
        let base = micro_model_config(corpus.vocab.len());
        let tcfg = TrainConfig {
            epochs: 1,
            batch_size: 6,
            warmup_steps: 2,
            k_best: 1,
            ..TrainConfig::default()
        };
        let dcfg = DecodeConfig { beam: 1, alpha: 0.4, max_len: 6 };
        let spec = AblationSpec {
            systems: vec![SystemId::Grl, SystemId::S0],
            seeds: vec![0],
            ..AblationSpec::default()
        };

        // A plain file squatting on one system's run directory makes that
        // run alone fail with an io error.
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("grl"), b"in the way").unwrap();
        let report = run_ablation(&corpus, &base, &tcfg, &dcfg, &spec, dir.path()).unwrap();

        let grl = &report.rows[0];
        assert_eq!(grl.system, SystemId::Grl);
        assert!(grl.failed);
        assert!(grl.error.is_some());
        assert!(grl.median_test_cs.is_none());

        let s0 = &report.rows[1];
        assert!(!s0.failed);
        assert!(s0.median_test_cs.is_some());
        assert!(s0.median_test_mono.is_some());

        let table = render_table(&report);
        assert!(table.contains("FAILED"));
    }
}
