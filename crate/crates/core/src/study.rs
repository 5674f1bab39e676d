//! End-to-end synthetic experiment: generate subjects, split, normalize,
//! train each variant for each seed and evaluate on every test set.

use serde::{Deserialize, Serialize};

use crate::evaluation::{compare_models, evaluate, Comparison, Condition, EvalOptions, EvalReport, LatencyConfig};
use crate::models::{ModelSpec, Variant, WINDOW_LEN};
use crate::synthetic::{generate_recordings, SynthConfig};
use crate::training::{train, TrainConfig, TrainData, TrainRecord};
use crate::windowing::{fit_norm_stats, make_splits, NormStats, SplitSpec, WINDOW_SIZE, WINDOW_STEP};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSize {
    pub conv_channels: usize,
    pub lstm_hidden: usize,
    pub embed_dim: usize,
    pub classifier_hidden: usize,
}

impl Default for ModelSize {
    fn default() -> Self {
        Self {
            conv_channels: 64,
            lstm_hidden: 128,
            embed_dim: 256,
            classifier_hidden: 128,
        }
    }
}

impl ModelSize {
    pub fn spec(&self, variant: Variant) -> ModelSpec {
        ModelSpec::with_sizes(
            variant,
            WINDOW_LEN,
            self.conv_channels,
            self.lstm_hidden,
            self.embed_dim,
            self.classifier_hidden,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub synth: SynthConfig,
    pub split: SplitSpec,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Template; variant and seed are set per run.
    pub train: TrainConfig,
    pub size: ModelSize,
    pub baseline: Variant,
    pub latency: Option<LatencyConfig>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            split: SplitSpec::default(),
            seeds: vec![41, 42, 43],
            variants: vec![Variant::LightHar, Variant::InertialHar, Variant::ContraLight],
            train: TrainConfig::default(),
            size: ModelSize::default(),
            baseline: Variant::InertialHar,
            latency: None,
        }
    }
}

/// Condition each variant is judged under: its deployment mode.
pub fn deployment_condition(v: Variant) -> Condition {
    match v {
        Variant::MultiLight => Condition::ImuOnlyZeroAls,
        _ => Condition::Native,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRun {
    pub variant: Variant,
    pub seed: u64,
    pub record: TrainRecord,
    pub norm_stats: NormStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub runs: Vec<StudyRun>,
    pub reports: Vec<EvalReport>,
    pub comparison: Comparison,
}

/// For every seed the data, split, initialization and batch order all derive
/// from that seed.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult> {
    let mut runs = Vec::new();
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let synth = SynthConfig {
            seed,
            ..cfg.synth.clone()
        };
        let recordings = generate_recordings(&synth)?;
        let splits = make_splits(&recordings, &cfg.split, seed, WINDOW_SIZE, WINDOW_STEP)?;
        let stats = fit_norm_stats(&splits.train)?;
        let norm = splits.normalized(&stats);
        let data = TrainData {
            train: norm.train.clone(),
            val: norm.val.clone(),
        };
        for &variant in &cfg.variants {
            let tc = TrainConfig {
                variant,
                seed,
                ..cfg.train.clone()
            };
            log::info!("study: training {variant} with seed {seed}");
            let (state, record) = train(cfg.size.spec(variant), &data, &tc)?;
            for (name, windows) in &norm.tests {
                let opts = EvalOptions {
                    test_set: name.clone(),
                    latency: cfg.latency,
                    batch_size: None,
                };
                reports.push(evaluate(&state, windows, deployment_condition(variant), &opts)?);
            }
            runs.push(StudyRun {
                variant,
                seed,
                record,
                norm_stats: stats.clone(),
            });
        }
    }
    let comparison = compare_models(&reports, cfg.baseline)?;
    Ok(StudyResult {
        runs,
        reports,
        comparison,
    })
}
