//! Sliding windows, normalization, subject splits and the three-instance
//! modality-dropout expansion.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::{Scenario, SensorRecording, CLASS_NAMES};
use crate::{Error, Result};

pub const WINDOW_SIZE: usize = 60;
pub const WINDOW_STEP: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedSample {
    /// `size` lux values (or normalized values after [`normalize`]).
    pub als: Vec<f64>,
    /// `size * 3` accelerometer values, row-major.
    pub imu: Vec<f64>,
    pub label: u8,
    pub als_present: bool,
    pub imu_present: bool,
    pub subject_id: u32,
    pub scenario: Scenario,
    /// Ordinal of the window within its recording.
    pub index: usize,
}

impl WindowedSample {
    pub fn len(&self) -> usize {
        self.als.len()
    }

    pub fn is_empty(&self) -> bool {
        self.als.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.imu.len() != 3 * self.als.len() {
            return Err(Error::Shape(format!(
                "window has {} light and {} accelerometer values",
                self.als.len(),
                self.imu.len()
            )));
        }
        if !self.als_present && !self.imu_present {
            return Err(Error::Validation("window with no modality present".into()));
        }
        if !self.als_present && self.als.iter().any(|&v| v != 0.0) {
            return Err(Error::Validation("absent light modality must be all zeros".into()));
        }
        if !self.imu_present && self.imu.iter().any(|&v| v != 0.0) {
            return Err(Error::Validation("absent accelerometer modality must be all zeros".into()));
        }
        if self.label as usize >= CLASS_NAMES.len() {
            return Err(Error::Validation(format!("label {} out of range", self.label)));
        }
        Ok(())
    }
}

/// Number of windows of `size` advanced by `step` that fit in `len` samples.
pub fn window_count(len: usize, size: usize, step: usize) -> usize {
    if len < size || size == 0 || step == 0 {
        0
    } else {
        (len - size) / step + 1
    }
}

/// Most frequent label; ties go to the smallest class id.
pub fn majority_label(labels: &[u8]) -> u8 {
    let mut counts = [0usize; 256];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best as u8
}

pub fn slide_windows(rec: &SensorRecording, size: usize, step: usize) -> Result<Vec<WindowedSample>> {
    if size == 0 || step == 0 {
        return Err(Error::Config("window size and step must be at least 1".into()));
    }
    rec.validate()?;
    let n = window_count(rec.len(), size, step);
    Ok((0..n)
        .map(|w| {
            let s = w * step;
            WindowedSample {
                als: rec.als[s..s + size].to_vec(),
                imu: rec.imu[s..s + size].iter().flatten().copied().collect(),
                label: majority_label(&rec.labels[s..s + size]),
                als_present: true,
                imu_present: true,
                subject_id: rec.subject_id,
                scenario: rec.scenario,
                index: w,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    /// Applied to lux before standardization.
    pub als_transform: String,
    pub als_mean: f64,
    pub als_std: f64,
    pub imu_mean: [f64; 3],
    pub imu_std: [f64; 3],
    pub std_convention: String,
}

const LOG1P: &str = "log1p";
const POPULATION: &str = "population";

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Per-channel mean and population standard deviation over every sample of
/// the given (training) windows; light is `log1p`-transformed first.
pub fn fit_norm_stats(train: &[WindowedSample]) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::InsufficientData("no training windows to fit statistics on".into()));
    }
    if train.iter().any(|w| !(w.als_present && w.imu_present)) {
        return Err(Error::Precondition("statistics need windows with both modalities".into()));
    }
    let (als_mean, als_std) = mean_std(train.iter().flat_map(|w| w.als.iter().map(|v| v.ln_1p())));
    let mut imu_mean = [0.0; 3];
    let mut imu_std = [0.0; 3];
    for c in 0..3 {
        let (m, s) = mean_std(train.iter().flat_map(move |w| w.imu.iter().skip(c).step_by(3).copied()));
        imu_mean[c] = m;
        imu_std[c] = s;
    }
    let stats = NormStats {
        als_transform: LOG1P.into(),
        als_mean,
        als_std,
        imu_mean,
        imu_std,
        std_convention: POPULATION.into(),
    };
    stats.validate()?;
    Ok(stats)
}

impl NormStats {
    pub fn validate(&self) -> Result<()> {
        if self.als_transform != LOG1P || self.std_convention != POPULATION {
            return Err(Error::Config(format!(
                "unsupported normalization `{}`/`{}`",
                self.als_transform, self.std_convention
            )));
        }
        let names = ["lux", "ax", "ay", "az"];
        let stds = [self.als_std, self.imu_std[0], self.imu_std[1], self.imu_std[2]];
        let means = [self.als_mean, self.imu_mean[0], self.imu_mean[1], self.imu_mean[2]];
        for ((name, s), m) in names.iter().zip(stds).zip(means) {
            if !(s > 0.0 && s.is_finite() && m.is_finite()) {
                return Err(Error::DegenerateData(format!("channel {name} has standard deviation {s}")));
            }
        }
        Ok(())
    }
}

/// Standardize present modalities; absent ones stay exactly zero.
pub fn normalize(sample: &WindowedSample, stats: &NormStats) -> WindowedSample {
    let mut out = sample.clone();
    if sample.als_present {
        for v in &mut out.als {
            *v = (v.ln_1p() - stats.als_mean) / stats.als_std;
        }
    }
    if sample.imu_present {
        for (i, v) in out.imu.iter_mut().enumerate() {
            *v = (*v - stats.imu_mean[i % 3]) / stats.imu_std[i % 3];
        }
    }
    out
}

pub fn denormalize(sample: &WindowedSample, stats: &NormStats) -> WindowedSample {
    let mut out = sample.clone();
    if sample.als_present {
        for v in &mut out.als {
            *v = (*v * stats.als_std + stats.als_mean).exp_m1();
        }
    }
    if sample.imu_present {
        for (i, v) in out.imu.iter_mut().enumerate() {
            *v = *v * stats.imu_std[i % 3] + stats.imu_mean[i % 3];
        }
    }
    out
}

/// Copy with the light modality replaced by the zero placeholder.
pub fn without_als(sample: &WindowedSample) -> WindowedSample {
    let mut s = sample.clone();
    s.als.iter_mut().for_each(|v| *v = 0.0);
    s.als_present = false;
    s
}

pub fn without_imu(sample: &WindowedSample) -> WindowedSample {
    let mut s = sample.clone();
    s.imu.iter_mut().for_each(|v| *v = 0.0);
    s.imu_present = false;
    s
}

/// Each sample becomes three: both modalities, light zeroed, accelerometer
/// zeroed.
pub fn expand_modality_dropout(samples: &[WindowedSample]) -> Result<Vec<WindowedSample>> {
    if let Some(s) = samples.iter().find(|s| !(s.als_present && s.imu_present)) {
        return Err(Error::Precondition(format!(
            "window {} of subject {} already misses a modality",
            s.index, s.subject_id
        )));
    }
    let mut out = Vec::with_capacity(3 * samples.len());
    for s in samples {
        out.push(s.clone());
        out.push(without_als(s));
        out.push(without_imu(s));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_subjects: Vec<u32>,
    pub val_fraction: f64,
    /// Named held-out subject lists, e.g. `test1`.
    pub test_sets: BTreeMap<String, Vec<u32>>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_subjects: (1..=7).collect(),
            val_fraction: 0.1,
            test_sets: BTreeMap::from([
                ("test1".to_string(), (8..=10).collect()),
                ("test2".to_string(), (11..=13).collect()),
                ("test3".to_string(), (14..=16).collect()),
            ]),
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {} not in (0, 1)", self.val_fraction)));
        }
        let train: BTreeSet<u32> = self.train_subjects.iter().copied().collect();
        for (name, subjects) in &self.test_sets {
            if let Some(s) = subjects.iter().find(|s| train.contains(s)) {
                return Err(Error::Config(format!("subject {s} is in both train and {name}")));
            }
        }
        Ok(())
    }

    pub fn subjects(&self) -> BTreeSet<u32> {
        self.train_subjects
            .iter()
            .chain(self.test_sets.values().flatten())
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<WindowedSample>,
    pub val: Vec<WindowedSample>,
    pub tests: BTreeMap<String, Vec<WindowedSample>>,
}

/// Seeded shuffle, then the first `floor(n * val_fraction)` windows become
/// validation and the rest training.
pub fn split_train_val(
    mut windows: Vec<WindowedSample>,
    val_fraction: f64,
    seed: u64,
) -> (Vec<WindowedSample>, Vec<WindowedSample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    windows.shuffle(&mut rng);
    let n_val = (windows.len() as f64 * val_fraction).floor() as usize;
    let train = windows.split_off(n_val);
    (train, windows)
}

pub fn make_splits(
    recordings: &[SensorRecording],
    spec: &SplitSpec,
    seed: u64,
    size: usize,
    step: usize,
) -> Result<Splits> {
    spec.validate()?;
    let by_subject: BTreeMap<u32, &SensorRecording> = recordings.iter().map(|r| (r.subject_id, r)).collect();
    let windows_of = |subjects: &[u32]| -> Result<Vec<WindowedSample>> {
        let mut out = Vec::new();
        for s in subjects {
            let rec = by_subject.get(s).ok_or(Error::MissingSubject(*s))?;
            out.extend(slide_windows(rec, size, step)?);
        }
        Ok(out)
    };
    let (train, val) = split_train_val(windows_of(&spec.train_subjects)?, spec.val_fraction, seed);
    let mut tests = BTreeMap::new();
    for (name, subjects) in &spec.test_sets {
        tests.insert(name.clone(), windows_of(subjects)?);
    }
    Ok(Splits { train, val, tests })
}

impl Splits {
    pub fn manifest(&self) -> BTreeMap<String, Vec<(u32, usize)>> {
        let ids = |w: &[WindowedSample]| w.iter().map(|s| (s.subject_id, s.index)).collect();
        let mut m = BTreeMap::new();
        m.insert("train".to_string(), ids(&self.train));
        m.insert("val".to_string(), ids(&self.val));
        for (k, v) in &self.tests {
            m.insert(k.clone(), ids(v));
        }
        m
    }

    pub fn normalized(&self, stats: &NormStats) -> Splits {
        let f = |w: &[WindowedSample]| w.iter().map(|s| normalize(s, stats)).collect();
        Splits {
            train: f(&self.train),
            val: f(&self.val),
            tests: self.tests.iter().map(|(k, v)| (k.clone(), f(v))).collect(),
        }
    }
}
