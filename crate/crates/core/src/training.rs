//! Adam training with early stopping on validation loss, plus checkpoints.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::losses::{BatchLabels, ContrastiveConfig, LossReport};
use crate::models::{eval_step, train_step, ModelSpec, ModelState, TrainBatch, Variant, NUM_CLASSES};
use crate::nn::{Mat, Scalar, Tensor, TensorMap};
use crate::windowing::{expand_modality_dropout, without_als, WindowedSample};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub margin: f64,
    pub eq2_literal: bool,
    /// A validation loss counts as an improvement only when it beats the
    /// best so far by more than this.
    pub min_delta: f64,
    pub early_stop_metric: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::InertialHar,
            learning_rate: 1e-3,
            max_epochs: 300,
            patience: 10,
            batch_size: 64,
            seed: 0,
            margin: 1.0,
            eq2_literal: false,
            min_delta: 1e-4,
            early_stop_metric: "val_total_loss".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config("margin must be positive".into()));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::Config("min_delta must be non-negative".into()));
        }
        if self.early_stop_metric != "val_total_loss" {
            return Err(Error::Config(format!(
                "unsupported early-stop metric `{}`",
                self.early_stop_metric
            )));
        }
        Ok(())
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            margin: self.margin,
            eq2_literal: self.eq2_literal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub train_components: LossReport,
    pub val_components: LossReport,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_epoch: usize,
    pub early_stopped: bool,
    pub wall_seconds: f64,
}

impl TrainRecord {
    /// Same record with every wall-clock field zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.wall_seconds = 0.0;
        for e in &mut r.epochs {
            e.seconds = 0.0;
        }
        r
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: TensorMap<F>,
    v: TensorMap<F>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &TensorMap<F>, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut TensorMap<F>, grads: &TensorMap<F>) {
        self.t += 1;
        let b1 = F::lit(self.beta1);
        let b2 = F::lit(self.beta2);
        let one = F::one();
        let c1 = F::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = F::lit(1.0 - self.beta2.powi(self.t as i32));
        let lr = F::lit(self.lr);
        let eps = F::lit(self.eps);
        for (name, p) in params.iter_mut() {
            let g = &grads.expect(name).data;
            let m = &mut self.m.expect_mut(name).data;
            let v = &mut self.v.expect_mut(name).data;
            for i in 0..p.data.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Pack windows into model layout. Window length must equal `spec.seq_len`.
pub fn make_batch(spec: &ModelSpec, windows: &[&WindowedSample]) -> Result<TrainBatch<f32>> {
    let t = spec.seq_len;
    let b = windows.len();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut als = Vec::with_capacity(b * t);
    let mut imu = Vec::with_capacity(b * t * 3);
    for w in windows {
        if w.als.len() != t || w.imu.len() != 3 * t {
            return Err(Error::Shape(format!(
                "window of {} samples, model expects {t}",
                w.als.len()
            )));
        }
        als.extend(w.als.iter().map(|&v| v as f32));
        imu.extend(w.imu.iter().map(|&v| v as f32));
    }
    let labels = BatchLabels::new(windows.iter().map(|w| w.label as usize).collect(), NUM_CLASSES)?;
    Ok(TrainBatch {
        batch: b,
        als: Mat::from_vec(b * t, 1, als),
        imu: Mat::from_vec(b * t, 3, imu),
        labels,
    })
}

/// Training and validation windows, already normalized with statistics
/// fitted on the training windows.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<WindowedSample>,
    pub val: Vec<WindowedSample>,
}

#[derive(Debug)]
pub enum TrainEvent<'a> {
    Step {
        epoch: usize,
        step: u64,
        losses: &'a LossReport,
    },
    Epoch(&'a EpochLog),
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

#[derive(Default)]
struct Running {
    n: usize,
    correct: usize,
    sums: [f64; 4],
}

impl Running {
    fn add(&mut self, l: &LossReport, probs: &Mat<f32>, labels: &BatchLabels) {
        let b = labels.len();
        self.n += b;
        for (s, v) in self.sums.iter_mut().zip([l.l_co, l.l_ce_light, l.l_ce_imu, l.l_total]) {
            *s += v * b as f64;
        }
        self.correct += (0..b).filter(|&i| argmax(probs.row(i)) == labels.ids()[i]).count();
    }

    fn report(&self) -> LossReport {
        let n = self.n.max(1) as f64;
        LossReport {
            l_co: self.sums[0] / n,
            l_ce_light: self.sums[1] / n,
            l_ce_imu: self.sums[2] / n,
            l_total: self.sums[3] / n,
        }
    }

    fn acc(&self) -> f64 {
        self.correct as f64 / self.n.max(1) as f64
    }
}

/// Validation windows as each variant sees them: MultiLight gets the
/// zero light placeholder (its deployment condition), others are unchanged.
/// Batch size for validation passes during training.
pub const VAL_BATCH_SIZE: usize = 256;

pub fn validation_view(variant: Variant, val: &[WindowedSample]) -> Vec<WindowedSample> {
    match variant {
        Variant::MultiLight => val.iter().map(without_als).collect(),
        _ => val.to_vec(),
    }
}

/// Size-weighted mean loss and accuracy over `windows` in evaluation mode.
pub fn evaluate_loss(
    state: &ModelState<f32>,
    windows: &[WindowedSample],
    contrastive: &ContrastiveConfig,
    batch_size: usize,
) -> Result<(LossReport, f64)> {
    if windows.is_empty() {
        return Err(Error::Data("no windows to evaluate".into()));
    }
    let mut run = Running::default();
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&WindowedSample> = chunk.iter().collect();
        let batch = make_batch(&state.spec, &refs)?;
        let (l, probs) = eval_step(state, &batch, contrastive)?;
        run.add(&l, &probs, &batch.labels);
    }
    Ok((run.report(), run.acc()))
}

pub fn train(spec: ModelSpec, data: &TrainData, config: &TrainConfig) -> Result<(ModelState<f32>, TrainRecord)> {
    train_with_observer(spec, data, config, &mut |_| {})
}

/// Seeded training loop. Stops once the validation total loss has not
/// improved for `patience` consecutive epochs and returns the best epoch's
/// state.
pub fn train_with_observer(
    spec: ModelSpec,
    data: &TrainData,
    config: &TrainConfig,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<(ModelState<f32>, TrainRecord)> {
    config.validate()?;
    if spec.variant != config.variant {
        return Err(Error::Config(format!(
            "spec is {} but config asks for {}",
            spec.variant, config.variant
        )));
    }
    let mut spec = spec;
    if spec.variant == Variant::ContraLight {
        spec.contrastive_margin = Some(config.margin);
    }
    if data.train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    if data.val.is_empty() {
        return Err(Error::Data("empty validation split".into()));
    }
    let train_windows = match spec.variant {
        Variant::MultiLight => expand_modality_dropout(&data.train)?,
        _ => data.train.clone(),
    };
    let val_windows = validation_view(spec.variant, &data.val);
    let contrastive = config.contrastive();

    let started = Instant::now();
    let mut state = ModelState::<f32>::init(spec, config.seed)?;
    let mut adam = Adam::new(&state.params, config.learning_rate);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(2);

    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, ModelState<f32>)> = None;
    let mut since_best = 0;
    let mut early_stopped = false;
    let mut order: Vec<usize> = (0..train_windows.len()).collect();

    for epoch in 1..=config.max_epochs {
        let t_epoch = Instant::now();
        order.shuffle(&mut order_rng);
        let mut run = Running::default();
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&WindowedSample> = chunk.iter().map(|&i| &train_windows[i]).collect();
            let batch = make_batch(&state.spec, &refs)?;
            let out = train_step(&mut state, &batch, &contrastive, &mut dropout_rng)?;
            let step = state.step + 1;
            if !out.losses.l_total.is_finite() || !out.grads.all_finite() {
                log::error!("non-finite loss or gradient at epoch {epoch}, step {step}");
                return Err(Error::Divergence {
                    epoch,
                    step,
                    message: format!("loss {}", out.losses.l_total),
                });
            }
            adam.step(&mut state.params, &out.grads);
            state.step = step;
            if !state.params.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    message: "parameters became non-finite".into(),
                });
            }
            observer(TrainEvent::Step {
                epoch,
                step,
                losses: &out.losses,
            });
            run.add(&out.losses, &out.probs, &batch.labels);
        }
        let (val, val_acc) = evaluate_loss(&state, &val_windows, &contrastive, VAL_BATCH_SIZE)?;
        if !val.l_total.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: state.step,
                message: "validation loss is not finite".into(),
            });
        }
        let train_components = run.report();
        let log = EpochLog {
            epoch,
            train_loss: train_components.l_total,
            train_acc: run.acc(),
            val_loss: val.l_total,
            val_acc,
            train_components,
            val_components: val,
            lr: config.learning_rate,
            seconds: t_epoch.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {:.4} acc {:.3}",
            log.train_loss,
            log.val_loss,
            log.val_acc
        );
        observer(TrainEvent::Epoch(&log));
        let improved = match &best {
            None => true,
            Some((_, b, _)) => log.val_loss < b - config.min_delta,
        };
        epochs.push(log);
        if improved {
            best = Some((epoch, val.l_total, state.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                early_stopped = true;
                break;
            }
        }
    }
    let stop_epoch = epochs.len();
    let (best_epoch, best_val_loss, best_state) = best.expect("at least one epoch ran");
    let record = TrainRecord {
        epochs,
        best_epoch,
        best_val_loss,
        stop_epoch,
        early_stopped,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((best_state, record))
}

// ---------------------------------------------------------------------------
// checkpoints

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    spec: ModelSpec,
    seed: u64,
    step: u64,
    spec_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: String,
    shape: Vec<usize>,
    file: String,
    bytes: usize,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    tensors: Vec<TensorEntry>,
}

const PARAM: &str = "param";
const BUFFER: &str = "buffer";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn tensor_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes `spec.json`, `manifest.json`, one little-endian f32 file per
/// tensor and, when given, `record.json` (timing fields zeroed so the
/// directory is byte-reproducible).
pub fn save_checkpoint(state: &ModelState<f32>, record: Option<&TrainRecord>, dir: &Path) -> Result<()> {
    state.validate()?;
    fs::create_dir_all(dir.join("tensors")).map_err(|e| Error::io(dir, e))?;
    let header = CheckpointHeader {
        spec: state.spec.clone(),
        seed: state.seed,
        step: state.step,
        spec_hash: state.spec.hash(),
    };
    write_file(&dir.join("spec.json"), serde_json::to_string_pretty(&header)?.as_bytes())?;
    let mut tensors = Vec::new();
    for (kind, map) in [(PARAM, &state.params), (BUFFER, &state.buffers)] {
        for (name, t) in map.iter() {
            let bytes = tensor_bytes(t);
            let file = format!("tensors/{name}.bin");
            write_file(&dir.join(&file), &bytes)?;
            tensors.push(TensorEntry {
                name: name.clone(),
                kind: kind.into(),
                shape: t.shape.clone(),
                file,
                bytes: bytes.len(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
    }
    write_file(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&CheckpointManifest { tensors })?.as_bytes(),
    )?;
    if let Some(r) = record {
        write_file(&dir.join("record.json"), serde_json::to_string_pretty(&r.without_timing())?.as_bytes())?;
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::IncompleteCheckpoint(format!("missing {}", path.display()))
        } else {
            Error::io(path, e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Corruption(format!("{}: {e}", path.display())))
}

/// Loads and verifies a checkpoint: spec hash, every expected tensor
/// present, byte lengths and per-tensor SHA-256 digests.
pub fn load_checkpoint(dir: &Path) -> Result<ModelState<f32>> {
    let header: CheckpointHeader = read_json(&dir.join("spec.json"))?;
    if header.spec.hash() != header.spec_hash {
        return Err(Error::Corruption("spec hash does not match spec.json contents".into()));
    }
    header
        .spec
        .validate()
        .map_err(|e| Error::Corruption(format!("invalid spec: {e}")))?;
    let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
    let mut params = TensorMap::new();
    let mut buffers = TensorMap::new();
    for entry in &manifest.tensors {
        let path = dir.join(&entry.file);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::IncompleteCheckpoint(format!("tensor file {} missing", entry.file)))
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        let numel: usize = entry.shape.iter().product();
        if bytes.len() != entry.bytes || bytes.len() != 4 * numel {
            return Err(Error::Corruption(format!(
                "{}: {} bytes, manifest says {} for shape {:?}",
                entry.name,
                bytes.len(),
                entry.bytes,
                entry.shape
            )));
        }
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            return Err(Error::Corruption(format!("{}: content hash mismatch", entry.name)));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor {
            shape: entry.shape.clone(),
            data,
        };
        match entry.kind.as_str() {
            PARAM => params.insert(entry.name.clone(), t),
            BUFFER => buffers.insert(entry.name.clone(), t),
            other => return Err(Error::Corruption(format!("unknown tensor kind `{other}`"))),
        }
    }
    for (name, _) in header.spec.param_shapes() {
        if params.get(&name).is_none() {
            return Err(Error::IncompleteCheckpoint(format!("parameter `{name}` missing")));
        }
    }
    for (name, _) in header.spec.buffer_shapes() {
        if buffers.get(&name).is_none() {
            return Err(Error::IncompleteCheckpoint(format!("buffer `{name}` missing")));
        }
    }
    let state = ModelState {
        spec: header.spec,
        seed: header.seed,
        params,
        buffers,
        step: header.step,
    };
    state.validate()?;
    Ok(state)
}

/// [`load_checkpoint`] that also requires the stored spec to equal `expected`.
pub fn load_checkpoint_for(dir: &Path, expected: &ModelSpec) -> Result<ModelState<f32>> {
    let header: CheckpointHeader = read_json(&dir.join("spec.json"))?;
    if header.spec_hash != expected.hash() {
        return Err(Error::Incompatible(format!(
            "checkpoint holds a {} model with spec hash {}, expected {}",
            header.spec.variant,
            &header.spec_hash[..12.min(header.spec_hash.len())],
            &expected.hash()[..12]
        )));
    }
    load_checkpoint(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_matches_hand_stepped_scalar() {
        // minimize f(x) = x^2 from x = 1 with lr 0.1
        let mut params = TensorMap::new();
        params.insert("x".to_string(), Tensor::filled(&[1], 1.0f64));
        let mut adam = Adam::new(&params, 0.1);
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.1f64);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);

            let mut grads = TensorMap::new();
            grads.insert("x".to_string(), Tensor::filled(&[1], 2.0 * params.expect("x").data[0]));
            adam.step(&mut params, &grads);
            assert!((params.expect("x").data[0] - x).abs() < 1e-15, "iteration {t}");
        }
        // with a steady gradient sign each step moves by about lr
        assert!((x - 0.7).abs() < 1e-2);
    }

    #[test]
    fn config_validation() {
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.batch_size = 1));
        assert!(bad(|c| c.patience = 0));
        assert!(bad(|c| c.learning_rate = -1.0));
        assert!(bad(|c| c.margin = 0.0));
        assert!(TrainConfig::default().validate().is_ok());
    }
}
