//! Accuracy, macro F1, confusion matrices, latency and multi-seed
//! comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ingest::{Scenario, CLASS_NAMES};
use crate::models::{
    count_flops, count_inference_params, count_params, forward_contralight_infer, forward_inertialhar,
    forward_lighthar, forward_multilight, ModelState, Variant,
};
use crate::nn::Mat;
use crate::training::make_batch;
use crate::windowing::{without_als, WindowedSample};
use crate::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_predictions(classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Shape(format!(
                "{} labels but {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut m = Self::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            m.add(t, p)?;
        }
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        let c = self.classes();
        if truth >= c || pred >= c {
            return Err(Error::Input(format!("class {truth} or {pred} outside 0..{c}")));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    /// `trace / total`; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            0.0
        } else {
            self.trace() as f64 / n as f64
        }
    }

    /// `2TP / (2TP + FP + FN)` per class, 0 when the denominator is 0.
    pub fn per_class_f1(&self) -> Vec<f64> {
        let c = self.classes();
        (0..c)
            .map(|k| {
                let tp = self.counts[k][k];
                let fn_: u64 = self.counts[k].iter().sum::<u64>() - tp;
                let fp: u64 = (0..c).map(|r| self.counts[r][k]).sum::<u64>() - tp;
                let denom = 2 * tp + fp + fn_;
                if denom == 0 {
                    0.0
                } else {
                    (2 * tp) as f64 / denom as f64
                }
            })
            .collect()
    }

    /// Unweighted mean of per-class F1 over every class, absent ones included.
    pub fn macro_f1(&self) -> f64 {
        let f1 = self.per_class_f1();
        f1.iter().sum::<f64>() / f1.len() as f64
    }

    pub fn to_csv(&self, class_names: &[&str]) -> String {
        let mut s = String::from("true\\pred");
        for n in class_names {
            let _ = write!(s, ",{n}");
        }
        s.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            s.push_str(class_names.get(i).copied().unwrap_or("?"));
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Every modality the variant consumes at inference.
    Native,
    /// Accelerometer only, light replaced by the zero placeholder.
    ImuOnlyZeroAls,
    /// Accelerometer only, light encoder not run at all.
    ImuOnlyDiscard,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Native => "native",
            Condition::ImuOnlyZeroAls => "imu_only_zero_als",
            Condition::ImuOnlyDiscard => "imu_only_discard",
        }
    }

    pub fn supported_by(self, v: Variant) -> bool {
        matches!(
            (v, self),
            (_, Condition::Native)
                | (Variant::InertialHar, Condition::ImuOnlyDiscard)
                | (Variant::MultiLight, Condition::ImuOnlyZeroAls)
                | (Variant::ContraLight, Condition::ImuOnlyDiscard)
        )
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "native" => Ok(Condition::Native),
            "zero-als" | "imu_only_zero_als" => Ok(Condition::ImuOnlyZeroAls),
            "discard-als" | "imu_only_discard" => Ok(Condition::ImuOnlyDiscard),
            other => Err(Error::Config(format!("unknown condition `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median: f64,
    pub p95: f64,
    pub std: f64,
    pub passes: usize,
}

impl LatencyStats {
    /// Median, nearest-rank 95th percentile and population std of samples
    /// in milliseconds.
    pub fn from_samples(samples_ms: &[f64]) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(Error::InsufficientData("no latency samples".into()));
        }
        let mut s = samples_ms.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        let mean = s.iter().sum::<f64>() / n as f64;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Ok(Self {
            median,
            p95: s[rank - 1],
            std: var.sqrt(),
            passes: n,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyConfig {
    pub warmup: usize,
    pub passes: usize,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            warmup: 50,
            passes: 1000,
        }
    }
}

/// Times `passes` calls of `f` after `warmup` untimed calls, on the calling
/// thread.
pub fn measure_latency(cfg: &LatencyConfig, mut f: impl FnMut() -> Result<()>) -> Result<LatencyStats> {
    for _ in 0..cfg.warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(cfg.passes);
    for _ in 0..cfg.passes {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    LatencyStats::from_samples(&samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub test_set: String,
    pub scenario: Option<Scenario>,
    pub variant: Variant,
    pub condition: Condition,
    pub seed: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub class_names: Vec<String>,
    pub confusion: ConfusionMatrix,
    /// Learnable parameters on the inference path.
    pub params: u64,
    /// Learnable parameters of the full training graph.
    pub train_params: u64,
    pub flops: u64,
    pub latency_ms: Option<LatencyStats>,
    pub n_windows: usize,
}

impl EvalReport {
    pub fn without_timing(&self) -> Self {
        Self {
            latency_ms: None,
            ..self.clone()
        }
    }
}

/// Class probabilities for a batch of windows under `condition`.
pub fn predict(state: &ModelState<f32>, windows: &[&WindowedSample], condition: Condition) -> Result<Mat<f32>> {
    let v = state.spec.variant;
    if !condition.supported_by(v) {
        return Err(Error::Config(format!("condition {} does not apply to {v}", condition.name())));
    }
    let zeroed: Vec<WindowedSample>;
    let windows: Vec<&WindowedSample> = if condition == Condition::ImuOnlyZeroAls {
        zeroed = windows.iter().map(|w| without_als(w)).collect();
        zeroed.iter().collect()
    } else {
        windows.to_vec()
    };
    let batch = make_batch(&state.spec, &windows)?;
    match v {
        Variant::LightHar => forward_lighthar(state, &batch.als),
        Variant::InertialHar => forward_inertialhar(state, &batch.imu),
        Variant::MultiLight => forward_multilight(state, &batch.als, &batch.imu),
        Variant::ContraLight => forward_contralight_infer(state, &batch.imu),
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub test_set: String,
    pub latency: Option<LatencyConfig>,
    pub batch_size: Option<usize>,
}

/// Argmax predictions, confusion matrix and metrics on `windows`; latency
/// is measured on single-window passes when requested.
pub fn evaluate(
    state: &ModelState<f32>,
    windows: &[WindowedSample],
    condition: Condition,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let v = state.spec.variant;
    if !condition.supported_by(v) {
        return Err(Error::Config(format!("condition {} does not apply to {v}", condition.name())));
    }
    if windows.is_empty() {
        return Err(Error::Data("no windows to evaluate".into()));
    }
    let classes = state.spec.classifier.classes;
    let mut cm = ConfusionMatrix::new(classes);
    for chunk in windows.chunks(opts.batch_size.unwrap_or(256).max(1)) {
        let refs: Vec<&WindowedSample> = chunk.iter().collect();
        let probs = predict(state, &refs, condition)?;
        for (i, w) in chunk.iter().enumerate() {
            cm.add(w.label as usize, argmax(probs.row(i)))?;
        }
    }
    let latency_ms = match &opts.latency {
        Some(cfg) => {
            let mut k = 0;
            Some(measure_latency(cfg, || {
                let w = &windows[k % windows.len()];
                k += 1;
                predict(state, &[w], condition).map(|_| ())
            })?)
        }
        None => None,
    };
    let scenario = windows[0].scenario;
    let scenario = windows.iter().all(|w| w.scenario == scenario).then_some(scenario);
    Ok(EvalReport {
        test_set: opts.test_set.clone(),
        scenario,
        variant: v,
        condition,
        seed: state.seed,
        accuracy: cm.accuracy(),
        macro_f1: cm.macro_f1(),
        per_class_f1: cm.per_class_f1(),
        class_names: CLASS_NAMES.iter().take(classes).map(|s| s.to_string()).collect(),
        confusion: cm,
        params: count_inference_params(&state.spec),
        train_params: count_params(&state.spec),
        flops: count_flops(&state.spec, state.spec.seq_len),
        latency_ms,
        n_windows: windows.len(),
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub test_set: String,
    pub scenario: Option<Scenario>,
    pub variant: Variant,
    pub condition: Condition,
    pub seeds: Vec<u64>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub macro_f1_median: f64,
    /// Differences of means against the baseline row of the same test set.
    pub delta_accuracy: Option<f64>,
    pub delta_macro_f1: Option<f64>,
    /// Mean macro F1 strictly above the baseline's.
    pub beats_baseline: Option<bool>,
    pub params: u64,
    pub flops: u64,
    pub latency_median_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: Variant,
    pub std_convention: String,
    pub rows: Vec<ComparisonRow>,
}

/// Group reports by (test set, variant, condition), aggregate across seeds
/// and compare each group with `baseline` on the same test set. The first
/// baseline group found for a test set is the reference.
pub fn compare_models(reports: &[EvalReport], baseline: Variant) -> Result<Comparison> {
    if let Some(first) = reports.first() {
        if let Some(r) = reports.iter().find(|r| r.class_names != first.class_names) {
            return Err(Error::Incompatible(format!(
                "report for {} on {} uses a different class set",
                r.variant, r.test_set
            )));
        }
    }
    let mut groups: BTreeMap<(String, Variant, Condition), Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.test_set.clone(), r.variant, r.condition)).or_default().push(r);
    }
    let mut rows: Vec<ComparisonRow> = groups
        .into_iter()
        .map(|((test_set, variant, condition), rs)| {
            let acc: Vec<f64> = rs.iter().map(|r| r.accuracy).collect();
            let f1: Vec<f64> = rs.iter().map(|r| r.macro_f1).collect();
            let (accuracy_mean, accuracy_std) = mean_std(&acc);
            let (macro_f1_mean, macro_f1_std) = mean_std(&f1);
            let lat: Vec<f64> = rs.iter().filter_map(|r| r.latency_ms.map(|l| l.median)).collect();
            ComparisonRow {
                test_set,
                scenario: rs[0].scenario,
                variant,
                condition,
                seeds: rs.iter().map(|r| r.seed).collect(),
                accuracy_mean,
                accuracy_std,
                macro_f1_mean,
                macro_f1_std,
                macro_f1_median: median(&f1),
                delta_accuracy: None,
                delta_macro_f1: None,
                beats_baseline: None,
                params: rs[0].params,
                flops: rs[0].flops,
                latency_median_ms: (!lat.is_empty()).then(|| median(&lat)),
            }
        })
        .collect();
    let base: BTreeMap<String, (f64, f64)> = rows
        .iter()
        .filter(|r| r.variant == baseline)
        .fold(BTreeMap::new(), |mut m, r| {
            m.entry(r.test_set.clone()).or_insert((r.accuracy_mean, r.macro_f1_mean));
            m
        });
    for r in &mut rows {
        if let Some(&(acc, f1)) = base.get(&r.test_set) {
            r.delta_accuracy = Some(r.accuracy_mean - acc);
            r.delta_macro_f1 = Some(r.macro_f1_mean - f1);
            r.beats_baseline = Some(r.macro_f1_mean > f1);
        }
    }
    Ok(Comparison {
        baseline,
        std_convention: "population".into(),
        rows,
    })
}

impl Comparison {
    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let header = [
            "test_set", "variant", "condition", "seeds", "accuracy", "macro_f1", "d_acc", "d_f1", "better", "params",
            "flops", "latency_ms",
        ];
        let pm = |m: f64, s: f64| format!("{m:.4}±{s:.4}");
        let opt = |v: Option<f64>| v.map(|d| format!("{d:+.4}")).unwrap_or_else(|| "-".into());
        let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            table.push(vec![
                r.test_set.clone(),
                r.variant.name().into(),
                r.condition.name().into(),
                r.seeds.len().to_string(),
                pm(r.accuracy_mean, r.accuracy_std),
                pm(r.macro_f1_mean, r.macro_f1_std),
                opt(r.delta_accuracy),
                opt(r.delta_macro_f1),
                match r.beats_baseline {
                    Some(true) => "yes".into(),
                    Some(false) => "no".into(),
                    None => "-".into(),
                },
                r.params.to_string(),
                r.flops.to_string(),
                r.latency_median_ms.map(|l| format!("{l:.3}")).unwrap_or_else(|| "-".into()),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!("baseline: {}  (std over seeds, population)\n", self.baseline);
        for row in &table {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell:<w$}", w = *w))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}
