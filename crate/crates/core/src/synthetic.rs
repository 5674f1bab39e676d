//! Seeded generator of labeled light + accelerometer recordings for the
//! three lighting scenarios.
//!
//! Accelerometer: a class-specific gravity direction plus a two-harmonic
//! sinusoid per axis, with per-subject jitter of frequency, amplitude and
//! wrist tilt. Light: `baseline(t) * (1 + depth_c * env(t)) + noise`, where
//! `env` follows the arm rhythm and is zero during Null.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ingest::{
    apply_labels, write_label_csv, write_stream_csv, LabelInterval, LabelTrack, Modality, RawStream,
    RecordingManifest, Scenario, SensorRecording, CLASS_NAMES, RATE_HZ,
};
use crate::{Error, Result};

const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTemplate {
    pub freq_hz: f64,
    /// Per-axis amplitude of the fundamental, m/s².
    pub amplitudes: [f64; 3],
    /// Per-axis phase of the fundamental, radians.
    pub phases: [f64; 3],
    /// Second-harmonic amplitude relative to the fundamental.
    pub harmonic: f64,
    /// Direction of gravity in the sensor frame (normalized on use).
    pub gravity: [f64; 3],
    /// Relative light modulation at full motion envelope.
    pub light_depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioNoise {
    pub baseline_lux: f64,
    pub sensor_noise_lux: f64,
    /// Mean seconds between architectural-light steps; 0 disables steps.
    pub step_interval_s: f64,
    /// Step levels are drawn log-uniformly from this lux range.
    pub step_range_lux: [f64; 2],
    /// Relative amplitude of slow sinusoidal drift; 0 disables drift.
    pub drift_fraction: f64,
    pub drift_period_s: f64,
    /// Relative std of fast multiplicative flicker (clouds, shading).
    pub flicker_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Subjects in scenarios 1, 2 and 3, numbered consecutively from 1.
    pub subjects_per_scenario: [usize; 3],
    pub session_seconds: f64,
    /// Share of the session spent in Null gaps.
    pub null_fraction: f64,
    /// Index 0 is Null (no rhythm, no light modulation).
    pub classes: Vec<ClassTemplate>,
    pub scenarios: [ScenarioNoise; 3],
    pub imu_noise_std: f64,
    pub subject_freq_jitter: f64,
    pub subject_amp_jitter: f64,
    pub subject_tilt_jitter: f64,
}

fn template(freq_hz: f64, amplitudes: [f64; 3], phases: [f64; 3], harmonic: f64, gravity: [f64; 3], light_depth: f64) -> ClassTemplate {
    ClassTemplate {
        freq_hz,
        amplitudes,
        phases,
        harmonic,
        gravity,
        light_depth,
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        let classes = vec![
            template(0.0, [0.0; 3], [0.0; 3], 0.0, [0.0, 0.3, 1.0], 0.0),
            template(2.0, [4.0, 1.0, 1.5], [0.0, 0.5, 1.0], 0.3, [1.0, 0.0, 0.2], 0.20),
            template(0.8, [1.0, 3.5, 1.0], [0.0, 0.0, 1.5], 0.2, [0.2, 1.0, 0.0], 0.35),
            template(1.0, [3.0, 1.0, 0.8], [0.0, 1.0, 0.0], 0.1, [1.0, 0.3, 0.2], 0.15),
            template(1.0, [2.6, 1.4, 0.8], [0.0, 1.6, 0.4], 0.15, [0.9, 0.5, 0.2], 0.45),
            template(0.7, [1.2, 1.0, 3.0], [0.5, 0.0, 0.0], 0.2, [0.1, 0.2, 1.0], 0.25),
            template(0.7, [1.5, 1.2, 2.6], [0.5, 0.8, 0.0], 0.25, [0.3, 0.2, 1.0], 0.55),
            template(1.4, [2.0, 2.0, 0.5], [0.0, 1.57, 0.0], 0.1, [0.0, 0.6, 1.0], 0.10),
            template(0.4, [0.6, 0.8, 0.5], [0.0, 0.7, 1.2], 0.3, [0.7, 0.7, 0.3], 0.05),
            template(0.4, [0.7, 0.6, 0.6], [0.3, 0.7, 1.6], 0.3, [0.6, 0.8, 0.2], 0.40),
        ];
        Self {
            seed: 0,
            subjects_per_scenario: [10, 3, 3],
            session_seconds: 150.0,
            null_fraction: 0.1,
            classes,
            scenarios: [
                ScenarioNoise {
                    baseline_lux: 350.0,
                    sensor_noise_lux: 2.0,
                    step_interval_s: 0.0,
                    step_range_lux: [350.0, 350.0],
                    drift_fraction: 0.0,
                    drift_period_s: 60.0,
                    flicker_fraction: 0.0,
                },
                ScenarioNoise {
                    baseline_lux: 60.0,
                    sensor_noise_lux: 2.0,
                    step_interval_s: 3.0,
                    step_range_lux: [30.0, 150.0],
                    drift_fraction: 0.0,
                    drift_period_s: 60.0,
                    flicker_fraction: 0.02,
                },
                ScenarioNoise {
                    baseline_lux: 500.0,
                    sensor_noise_lux: 3.0,
                    step_interval_s: 0.0,
                    step_range_lux: [500.0, 500.0],
                    drift_fraction: 0.3,
                    drift_period_s: 40.0,
                    flicker_fraction: 0.03,
                },
            ],
            imu_noise_std: 0.5,
            subject_freq_jitter: 0.15,
            subject_amp_jitter: 0.25,
            subject_tilt_jitter: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() != CLASS_NAMES.len() {
            return Err(Error::Config(format!("need {} class templates", CLASS_NAMES.len())));
        }
        for (i, a) in self.classes.iter().enumerate() {
            if !(a.light_depth >= 0.0) || a.freq_hz < 0.0 {
                return Err(Error::Config(format!("class {i}: negative depth or frequency")));
            }
            if a.gravity.iter().all(|&g| g == 0.0) {
                return Err(Error::Config(format!("class {i}: zero gravity direction")));
            }
            for (j, b) in self.classes.iter().enumerate().skip(i + 1) {
                if a == b {
                    return Err(Error::Config(format!("classes {i} and {j} share a template")));
                }
            }
        }
        if !(self.session_seconds >= 10.0) {
            return Err(Error::Config("sessions must last at least 10 s".into()));
        }
        if !(self.null_fraction > 0.0 && self.null_fraction < 1.0) {
            return Err(Error::Config("null_fraction must be in (0, 1)".into()));
        }
        for s in &self.scenarios {
            if !(s.baseline_lux > 0.0 && s.sensor_noise_lux >= 0.0 && s.step_range_lux[0] > 0.0) {
                return Err(Error::Config("scenario light levels must be positive".into()));
            }
            if s.step_range_lux[0] > s.step_range_lux[1] {
                return Err(Error::Config("step range must be ordered".into()));
            }
        }
        let (s1, s2) = (&self.scenarios[0], &self.scenarios[1]);
        if !(s2.sensor_noise_lux / s2.baseline_lux > s1.sensor_noise_lux / s1.baseline_lux || s2.step_interval_s > 0.0) {
            return Err(Error::Config(
                "scenario 2 light must be noisier relative to its baseline than scenario 1".into(),
            ));
        }
        Ok(())
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects_per_scenario.iter().sum()
    }

    /// Subject ids are 1-based and grouped by scenario.
    pub fn scenario_of(&self, subject_id: u32) -> Option<Scenario> {
        let mut upper = 0;
        for (s, &n) in Scenario::ALL.iter().zip(&self.subjects_per_scenario) {
            upper += n as u32;
            if subject_id >= 1 && subject_id <= upper {
                return Some(*s);
            }
        }
        None
    }

    pub fn samples(&self) -> usize {
        (self.session_seconds * RATE_HZ).round() as usize
    }
}

/// A generated recording with its latent components, for tests.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecording {
    pub recording: SensorRecording,
    pub track: LabelTrack,
    /// Light level without the motion modulation and sensor noise.
    pub baseline_lux: Vec<f64>,
    /// Motion envelope in [0, 1]; zero during Null.
    pub envelope: Vec<f64>,
    pub sensor_noise_lux: f64,
}

/// Null gaps and the nine activities in seeded order, tiling the session.
fn schedule(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> LabelTrack {
    let total = (cfg.samples() as f64 - 1.0) / RATE_HZ;
    let n_act = CLASS_NAMES.len() - 1;
    let gap = total * cfg.null_fraction / (n_act + 1) as f64;
    let bout = total * (1.0 - cfg.null_fraction) / n_act as f64;
    let mut order: Vec<u8> = (1..=n_act as u8).collect();
    order.shuffle(rng);
    let intervals = order
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            let start = gap * (k + 1) as f64 + bout * k as f64;
            LabelInterval {
                start_s: start,
                end_s: start + bout,
                class_id: c,
            }
        })
        .collect();
    LabelTrack { intervals }
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn baseline_series(noise: &ScenarioNoise, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut level = noise.baseline_lux;
    let mut next_step = if noise.step_interval_s > 0.0 {
        rng.random_range(0.5..1.5) * noise.step_interval_s
    } else {
        f64::INFINITY
    };
    let drift_phase = rng.random_range(0.0..2.0 * PI);
    let (lo, hi) = (noise.step_range_lux[0].ln(), noise.step_range_lux[1].ln());
    let flicker = Normal::new(0.0, 1.0).expect("unit normal");
    // flicker is a first-order low-pass of white noise (time constant ~0.3 s)
    let alpha: f64 = 0.1;
    let mut f = 0.0;
    (0..n)
        .map(|i| {
            let t = i as f64 / RATE_HZ;
            if t >= next_step {
                level = if hi > lo { rng.random_range(lo..hi).exp() } else { lo.exp() };
                next_step += rng.random_range(0.5..1.5) * noise.step_interval_s;
            }
            let drift = 1.0 + noise.drift_fraction * (2.0 * PI * t / noise.drift_period_s + drift_phase).sin();
            f = (1.0 - alpha) * f + alpha * flicker.sample(rng) * (2.0 / alpha).sqrt();
            let fl = (1.0 + noise.flicker_fraction * f).max(0.05);
            level * drift * fl
        })
        .collect()
}

/// One subject's session. Deterministic in (config.seed, subject, scenario).
pub fn generate_recording(cfg: &SynthConfig, subject_id: u32, scenario: Scenario) -> Result<SynthRecording> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(((subject_id as u64) << 2) | scenario.id() as u64);
    let n = cfg.samples();
    let track = schedule(cfg, &mut rng);

    // per-subject style
    let jitter = |rng: &mut ChaCha8Rng, j: f64| 1.0 + rng.random_range(-j..=j);
    let freq_scale = jitter(&mut rng, cfg.subject_freq_jitter);
    let amp_scale: [f64; 3] = std::array::from_fn(|_| jitter(&mut rng, cfg.subject_amp_jitter));
    let tilt: [f64; 3] = std::array::from_fn(|_| rng.random_range(-cfg.subject_tilt_jitter..=cfg.subject_tilt_jitter));

    let base = SensorRecording {
        subject_id,
        scenario,
        rate_hz: RATE_HZ,
        t0: 0.0,
        als: vec![0.0; n],
        imu: vec![[0.0; 3]; n],
        labels: vec![0; n],
    };
    let mut rec = apply_labels(base, &track)?;

    let imu_noise = Normal::new(0.0, cfg.imu_noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let noise = &cfg.scenarios[scenario.id() as usize - 1];
    let lux_noise = Normal::new(0.0, noise.sensor_noise_lux).map_err(|e| Error::Config(e.to_string()))?;
    let baseline = baseline_series(noise, n, &mut rng);

    let mut envelope = vec![0.0; n];
    // each bout starts at a random phase; Null wanders slowly around its pose
    let mut phase = 0.0;
    let mut prev = u8::MAX;
    let mut wander = [0.0f64; 3];
    for i in 0..n {
        let c = rec.labels[i];
        if c != prev {
            phase = rng.random_range(0.0..2.0 * PI);
            prev = c;
        }
        let tpl = &cfg.classes[c as usize];
        let t = i as f64 / RATE_HZ;
        let g = normalize3([tpl.gravity[0] + tilt[0], tpl.gravity[1] + tilt[1], tpl.gravity[2] + tilt[2]]);
        let mut a = [0.0; 3];
        if c == 0 {
            for (k, w) in wander.iter_mut().enumerate() {
                *w = 0.98 * *w + 0.05 * imu_noise.sample(&mut rng);
                a[k] = GRAVITY * g[k] + *w;
            }
        } else {
            let w = 2.0 * PI * tpl.freq_hz * freq_scale * t + phase;
            for k in 0..3 {
                let amp = tpl.amplitudes[k] * amp_scale[k];
                let osc = (w + tpl.phases[k]).sin() + tpl.harmonic * (2.0 * (w + tpl.phases[k])).sin();
                a[k] = GRAVITY * g[k] + amp * osc;
            }
            envelope[i] = 0.5 * (1.0 + w.sin());
        }
        for v in &mut a {
            *v += imu_noise.sample(&mut rng);
        }
        rec.imu[i] = a;
        let lux = baseline[i] * (1.0 + tpl.light_depth * envelope[i]) + lux_noise.sample(&mut rng);
        rec.als[i] = lux.max(0.0);
    }
    rec.validate()?;
    Ok(SynthRecording {
        recording: rec,
        track,
        baseline_lux: baseline,
        envelope,
        sensor_noise_lux: noise.sensor_noise_lux,
    })
}

/// Every subject of the study, in id order.
pub fn generate_recordings(cfg: &SynthConfig) -> Result<Vec<SensorRecording>> {
    (1..=cfg.n_subjects() as u32)
        .map(|s| {
            let scenario = cfg.scenario_of(s).expect("subject within configured range");
            generate_recording(cfg, s, scenario).map(|r| r.recording)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySubject {
    pub subject_id: u32,
    pub scenario: Scenario,
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyManifest {
    pub seed: u64,
    pub config: SynthConfig,
    pub subjects: Vec<StudySubject>,
}

/// Writes `subject_XX/{als,imu,labels}.csv` and `subject_XX/manifest.json`
/// for every subject plus `study.json` at the top, in the raw formats the
/// ingest module reads.
pub fn generate_study(cfg: &SynthConfig, out: &Path) -> Result<StudyManifest> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut subjects = Vec::new();
    for s in 1..=cfg.n_subjects() as u32 {
        let scenario = cfg.scenario_of(s).expect("subject within configured range");
        let g = generate_recording(cfg, s, scenario)?;
        let rec = &g.recording;
        let dir_name = format!("subject_{s:02}");
        let dir = out.join(&dir_name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let times: Vec<f64> = (0..rec.len()).map(|i| rec.time(i)).collect();
        write_stream_csv(&dir.join("als.csv"), &RawStream::new(Modality::Als, times.clone(), rec.als.clone())?)?;
        write_stream_csv(
            &dir.join("imu.csv"),
            &RawStream::new(Modality::Imu, times, rec.imu.iter().flatten().copied().collect())?,
        )?;
        write_label_csv(&dir.join("labels.csv"), &g.track)?;
        let manifest = RecordingManifest {
            subject_id: s,
            scenario,
            als_path: "als.csv".into(),
            imu_path: "imu.csv".into(),
            labels_path: "labels.csv".into(),
            sync_offset_s: Some(0.0),
        };
        manifest.write(&dir.join("manifest.json"))?;
        subjects.push(StudySubject {
            subject_id: s,
            scenario,
            manifest: PathBuf::from(dir_name).join("manifest.json"),
        });
    }
    let study = StudyManifest {
        seed: cfg.seed,
        config: cfg.clone(),
        subjects,
    };
    let path = out.join("study.json");
    fs::write(&path, serde_json::to_string_pretty(&study)?).map_err(|e| Error::io(&path, e))?;
    Ok(study)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            session_seconds: 60.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_per_subject() {
        let c = small();
        let a = generate_recording(&c, 3, Scenario::FixedIndoor).unwrap();
        let b = generate_recording(&c, 3, Scenario::FixedIndoor).unwrap();
        assert_eq!(a, b);
        let other = generate_recording(&c, 4, Scenario::FixedIndoor).unwrap();
        assert_ne!(a.recording.imu, other.recording.imu);
    }

    #[test]
    fn default_layout() {
        let c = SynthConfig::default();
        assert_eq!(c.n_subjects(), 16);
        assert_eq!(c.scenario_of(10), Some(Scenario::FixedIndoor));
        assert_eq!(c.scenario_of(11), Some(Scenario::DynamicIndoor));
        assert_eq!(c.scenario_of(16), Some(Scenario::CloudyOutdoor));
        assert_eq!(c.scenario_of(17), None);
    }

    #[test]
    fn every_class_appears() {
        let c = small();
        let r = generate_recording(&c, 1, Scenario::DynamicIndoor).unwrap();
        for k in 0..10u8 {
            assert!(r.recording.labels.contains(&k), "class {k}");
        }
    }

    #[test]
    fn duplicate_templates_rejected() {
        let mut c = small();
        c.classes[2] = c.classes[1].clone();
        assert!(c.validate().is_err());
    }
}
