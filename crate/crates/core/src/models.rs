//! The four network variants over the [`crate::nn`] backend: unimodal light
//! and inertial classifiers, a two-encoder fusion model that accepts a zero
//! placeholder for missing light, and a contrastively trained pair whose
//! light encoder is dropped at inference.
//!
//! Every encoder is three conv blocks (conv, batch norm, ReLU, dropout), a
//! bidirectional LSTM whose final states of both directions are concatenated,
//! and a fully connected projection to the embedding. The classifier is two
//! fully connected layers with a ReLU between them and a softmax on top.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::losses::{
    contrastive_loss_with_grad, cross_entropy, cross_entropy_grad_logits, total_loss, BatchLabels,
    ContrastiveConfig, LossReport,
};
use crate::nn::{
    batch_norm_backward, batch_norm_eval, batch_norm_train, bilstm_backward, bilstm_forward,
    conv1d_backward, conv1d_forward, linear_backward, linear_forward, relu_dropout_backward,
    relu_dropout_forward, softmax_rows, BatchNormCache, BatchNormParams, BiLstmCache, LstmWeights,
    Mat, ParamSource, Scalar, Tensor, TensorMap, TracingParams,
};
use crate::{Error, Result};

pub const NUM_CLASSES: usize = 10;
pub const WINDOW_LEN: usize = 60;
pub const ALS_CHANNELS: usize = 1;
pub const IMU_CHANNELS: usize = 3;

pub const ALS_PREFIX: &str = "als_encoder";
pub const IMU_PREFIX: &str = "imu_encoder";
pub const CLASSIFIER_PREFIX: &str = "classifier";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    LightHar,
    InertialHar,
    MultiLight,
    ContraLight,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::LightHar,
        Variant::InertialHar,
        Variant::MultiLight,
        Variant::ContraLight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::LightHar => "LightHAR",
            Variant::InertialHar => "InertialHAR",
            Variant::MultiLight => "MultiLight",
            Variant::ContraLight => "ContraLight",
        }
    }

    pub fn has_als_encoder(self) -> bool {
        !matches!(self, Variant::InertialHar)
    }

    pub fn has_imu_encoder(self) -> bool {
        !matches!(self, Variant::LightHar)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "light" | "lighthar" => Ok(Variant::LightHar),
            "inertial" | "inertialhar" => Ok(Variant::InertialHar),
            "multilight" => Ok(Variant::MultiLight),
            "contralight" => Ok(Variant::ContraLight),
            other => Err(Error::Config(format!("unknown model variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub conv_blocks: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    pub dropout: f64,
    /// Per direction.
    pub lstm_hidden: usize,
    pub embed_dim: usize,
}

impl EncoderSpec {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            conv_blocks: 3,
            conv_channels: 64,
            kernel: 5,
            dropout: 0.2,
            lstm_hidden: 128,
            embed_dim: 256,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.conv_blocks != 3 {
            return Err(Error::Config(format!("{what}: encoders have exactly 3 conv blocks")));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::Config(format!("{what}: same padding needs an odd kernel")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("{what}: dropout must be in [0, 1)")));
        }
        if self.in_channels == 0 || self.conv_channels == 0 || self.lstm_hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config(format!("{what}: zero-sized layer")));
        }
        Ok(())
    }

    fn block_in(&self, i: usize) -> usize {
        if i == 0 {
            self.in_channels
        } else {
            self.conv_channels
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub seq_len: usize,
    pub als_encoder: Option<EncoderSpec>,
    pub imu_encoder: Option<EncoderSpec>,
    pub classifier: ClassifierSpec,
    pub contrastive_margin: Option<f64>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelSpec {
    /// Full-size architecture: 64-channel conv blocks, 128-unit BiLSTM,
    /// 256-d embeddings, 128-unit classifier hidden layer.
    pub fn new(variant: Variant) -> Self {
        Self::with_sizes(variant, WINDOW_LEN, 64, 128, 256, 128)
    }

    pub fn with_sizes(
        variant: Variant,
        seq_len: usize,
        conv_channels: usize,
        lstm_hidden: usize,
        embed_dim: usize,
        classifier_hidden: usize,
    ) -> Self {
        let enc = |c| EncoderSpec {
            conv_channels,
            lstm_hidden,
            embed_dim,
            ..EncoderSpec::new(c)
        };
        let als_encoder = variant.has_als_encoder().then(|| enc(ALS_CHANNELS));
        let imu_encoder = variant.has_imu_encoder().then(|| enc(IMU_CHANNELS));
        let input = if variant == Variant::MultiLight {
            2 * embed_dim
        } else {
            embed_dim
        };
        Self {
            variant,
            seq_len,
            als_encoder,
            imu_encoder,
            classifier: ClassifierSpec {
                input,
                hidden: classifier_hidden,
                classes: NUM_CLASSES,
            },
            contrastive_margin: (variant == Variant::ContraLight).then_some(1.0),
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.variant;
        if self.als_encoder.is_some() != v.has_als_encoder() || self.imu_encoder.is_some() != v.has_imu_encoder() {
            return Err(Error::Config(format!("{v}: encoder set does not match the variant")));
        }
        if let Some(e) = &self.als_encoder {
            e.validate("als encoder")?;
            if e.in_channels != ALS_CHANNELS {
                return Err(Error::Config("als encoder takes one channel".into()));
            }
        }
        if let Some(e) = &self.imu_encoder {
            e.validate("imu encoder")?;
            if e.in_channels != IMU_CHANNELS {
                return Err(Error::Config("imu encoder takes three channels".into()));
            }
        }
        let embed = |e: &Option<EncoderSpec>| e.as_ref().map(|e| e.embed_dim).unwrap_or(0);
        let expected_input = match v {
            Variant::LightHar => embed(&self.als_encoder),
            Variant::InertialHar => embed(&self.imu_encoder),
            Variant::MultiLight => embed(&self.als_encoder) + embed(&self.imu_encoder),
            Variant::ContraLight => {
                if embed(&self.als_encoder) != embed(&self.imu_encoder) {
                    return Err(Error::Config("contrastive embeddings must have equal width".into()));
                }
                embed(&self.imu_encoder)
            }
        };
        if self.classifier.input != expected_input {
            return Err(Error::Config(format!(
                "{v}: classifier input {} but encoders provide {expected_input}",
                self.classifier.input
            )));
        }
        if self.classifier.classes == 0 || self.classifier.hidden == 0 || self.seq_len == 0 {
            return Err(Error::Config("zero-sized classifier or sequence".into()));
        }
        match (v, self.contrastive_margin) {
            (Variant::ContraLight, Some(m)) if m > 0.0 && m.is_finite() => {}
            (Variant::ContraLight, _) => return Err(Error::Config("ContraLight needs a positive margin".into())),
            (_, Some(_)) => return Err(Error::Config("margin is only meaningful for ContraLight".into())),
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(Error::Config("batch-norm momentum/eps out of range".into()));
        }
        Ok(())
    }

    fn encoders(&self) -> Vec<(&'static str, &EncoderSpec)> {
        let mut out = Vec::new();
        if let Some(e) = &self.als_encoder {
            out.push((ALS_PREFIX, e));
        }
        if let Some(e) = &self.imu_encoder {
            out.push((IMU_PREFIX, e));
        }
        out
    }

    /// Learnable tensors with their shapes, in name order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (p, e) in self.encoders() {
            let c = e.conv_channels;
            for i in 0..e.conv_blocks {
                out.push((format!("{p}.conv{i}.weight"), vec![e.kernel, e.block_in(i), c]));
                out.push((format!("{p}.conv{i}.bias"), vec![c]));
                out.push((format!("{p}.bn{i}.gamma"), vec![c]));
                out.push((format!("{p}.bn{i}.beta"), vec![c]));
            }
            let h = e.lstm_hidden;
            for dir in ["fwd", "bwd"] {
                out.push((format!("{p}.lstm.{dir}.w_ih"), vec![c, 4 * h]));
                out.push((format!("{p}.lstm.{dir}.w_hh"), vec![h, 4 * h]));
                out.push((format!("{p}.lstm.{dir}.bias"), vec![4 * h]));
            }
            out.push((format!("{p}.embed.weight"), vec![2 * h, e.embed_dim]));
            out.push((format!("{p}.embed.bias"), vec![e.embed_dim]));
        }
        let c = &self.classifier;
        out.push((format!("{CLASSIFIER_PREFIX}.fc0.weight"), vec![c.input, c.hidden]));
        out.push((format!("{CLASSIFIER_PREFIX}.fc0.bias"), vec![c.hidden]));
        out.push((format!("{CLASSIFIER_PREFIX}.fc1.weight"), vec![c.hidden, c.classes]));
        out.push((format!("{CLASSIFIER_PREFIX}.fc1.bias"), vec![c.classes]));
        out.sort();
        out
    }

    /// Batch-norm running statistics (not learnable).
    pub fn buffer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (p, e) in self.encoders() {
            for i in 0..e.conv_blocks {
                out.push((format!("{p}.bn{i}.running_mean"), vec![e.conv_channels]));
                out.push((format!("{p}.bn{i}.running_var"), vec![e.conv_channels]));
            }
        }
        out.sort();
        out
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Weights, batch-norm buffers and bookkeeping for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<F: Scalar = f32> {
    pub spec: ModelSpec,
    pub seed: u64,
    pub params: TensorMap<F>,
    pub buffers: TensorMap<F>,
    pub step: u64,
}

impl<F: Scalar> ModelState<F> {
    /// Seeded initialization: weights uniform in `±1/sqrt(fan_in)`, biases and
    /// batch-norm shifts zero, batch-norm scales one.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = TensorMap::new();
        for (name, shape) in spec.param_shapes() {
            let t = if name.ends_with(".bias") || name.ends_with(".beta") {
                Tensor::zeros(&shape)
            } else if name.ends_with(".gamma") {
                Tensor::filled(&shape, F::one())
            } else {
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                Tensor {
                    shape: shape.clone(),
                    data: (0..n).map(|_| F::lit(rng.random_range(-bound..bound))).collect(),
                }
            };
            params.insert(name, t);
        }
        let mut buffers = TensorMap::new();
        for (name, shape) in spec.buffer_shapes() {
            let fill = if name.ends_with("running_var") { F::one() } else { F::zero() };
            buffers.insert(name, Tensor::filled(&shape, fill));
        }
        Ok(Self {
            spec,
            seed,
            params,
            buffers,
            step: 0,
        })
    }

    /// Names and shapes match `self.spec` exactly and every value is finite.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        for (label, map, shapes) in [
            ("parameter", &self.params, self.spec.param_shapes()),
            ("buffer", &self.buffers, self.spec.buffer_shapes()),
        ] {
            if map.len() != shapes.len() {
                return Err(Error::Incompatible(format!(
                    "expected {} {label} tensors, found {}",
                    shapes.len(),
                    map.len()
                )));
            }
            for (name, shape) in shapes {
                match map.get(&name) {
                    None => return Err(Error::Incompatible(format!("missing {label} `{name}`"))),
                    Some(t) if t.shape != shape || t.data.len() != shape.iter().product::<usize>() => {
                        return Err(Error::Incompatible(format!(
                            "{label} `{name}` has shape {:?}, expected {shape:?}",
                            t.shape
                        )))
                    }
                    _ => {}
                }
            }
            if !map.all_finite() {
                return Err(Error::Numerical(format!("non-finite {label} value")));
            }
        }
        Ok(())
    }

    /// Hash over every tensor (names, shapes, values) and the step counter.
    pub fn state_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.spec.hash().as_bytes());
        h.update(self.step.to_le_bytes());
        for map in [&self.params, &self.buffers] {
            for (name, t) in map.iter() {
                h.update(name.as_bytes());
                for d in &t.shape {
                    h.update((*d as u64).to_le_bytes());
                }
                for v in &t.data {
                    h.update(v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<G: Scalar>(&self) -> ModelState<G> {
        ModelState {
            spec: self.spec.clone(),
            seed: self.seed,
            params: self.params.cast(),
            buffers: self.buffers.cast(),
            step: self.step,
        }
    }
}

// ---------------------------------------------------------------------------
// graph pieces

fn bn_params<'a, F: Scalar, P: ParamSource<F>>(params: &'a P, prefix: &str, i: usize, eps: F) -> BatchNormParams<'a, F> {
    BatchNormParams {
        gamma: &params.param(&format!("{prefix}.bn{i}.gamma")).data,
        beta: &params.param(&format!("{prefix}.bn{i}.beta")).data,
        eps,
    }
}

fn lstm_weights<'a, F: Scalar, P: ParamSource<F>>(params: &'a P, prefix: &str, dir: &str) -> LstmWeights<'a, F> {
    LstmWeights {
        w_ih: params.param(&format!("{prefix}.lstm.{dir}.w_ih")),
        w_hh: params.param(&format!("{prefix}.lstm.{dir}.w_hh")),
        bias: params.param(&format!("{prefix}.lstm.{dir}.bias")),
    }
}

fn accumulate<F: Scalar>(grads: &mut TensorMap<F>, name: &str, g: &[F]) {
    let t = grads.expect_mut(name);
    for (a, b) in t.data.iter_mut().zip(g) {
        *a += *b;
    }
}

fn encode_eval<F: Scalar, P: ParamSource<F>, B: ParamSource<F>>(
    spec: &ModelSpec,
    enc: &EncoderSpec,
    prefix: &str,
    params: &P,
    buffers: &B,
    x: &Mat<F>,
    batch: usize,
) -> Mat<F> {
    let len = spec.seq_len;
    let eps = F::lit(spec.bn_eps);
    let mut h = x.clone();
    for i in 0..enc.conv_blocks {
        let (y, _) = conv1d_forward(
            &h,
            batch,
            len,
            params.param(&format!("{prefix}.conv{i}.weight")),
            params.param(&format!("{prefix}.conv{i}.bias")),
        );
        let y = batch_norm_eval(
            &y,
            &bn_params(params, prefix, i, eps),
            &buffers.param(&format!("{prefix}.bn{i}.running_mean")).data,
            &buffers.param(&format!("{prefix}.bn{i}.running_var")).data,
        );
        h = relu_dropout_forward::<F, ChaCha8Rng>(y, enc.dropout, None).0;
    }
    let (last, _) = bilstm_forward(
        &h,
        batch,
        len,
        lstm_weights(params, prefix, "fwd"),
        lstm_weights(params, prefix, "bwd"),
        false,
    );
    linear_forward(
        &last,
        params.param(&format!("{prefix}.embed.weight")),
        params.param(&format!("{prefix}.embed.bias")),
    )
}

struct BlockTrace<F> {
    cols: Vec<F>,
    bn: BatchNormCache<F>,
    mask: Vec<F>,
}

struct EncoderTrace<F> {
    batch: usize,
    blocks: Vec<BlockTrace<F>>,
    lstm_input: Mat<F>,
    lstm: BiLstmCache<F>,
    lstm_out: Mat<F>,
}

#[allow(clippy::too_many_arguments)]
fn encode_train<F: Scalar, R: Rng + ?Sized>(
    spec: &ModelSpec,
    enc: &EncoderSpec,
    prefix: &str,
    params: &TensorMap<F>,
    buffers: &mut TensorMap<F>,
    x: &Mat<F>,
    batch: usize,
    rng: &mut R,
) -> (Mat<F>, EncoderTrace<F>) {
    let len = spec.seq_len;
    let eps = F::lit(spec.bn_eps);
    let momentum = F::lit(spec.bn_momentum);
    let mut h = x.clone();
    let mut blocks = Vec::with_capacity(enc.conv_blocks);
    for i in 0..enc.conv_blocks {
        let (y, cols) = conv1d_forward(
            &h,
            batch,
            len,
            params.expect(&format!("{prefix}.conv{i}.weight")),
            params.expect(&format!("{prefix}.conv{i}.bias")),
        );
        let mean_name = format!("{prefix}.bn{i}.running_mean");
        let var_name = format!("{prefix}.bn{i}.running_var");
        let mut rm = buffers.expect(&mean_name).data.clone();
        let mut rv = buffers.expect(&var_name).data.clone();
        let (y, bn) = batch_norm_train(&y, &bn_params(params, prefix, i, eps), &mut rm, &mut rv, momentum);
        buffers.expect_mut(&mean_name).data = rm;
        buffers.expect_mut(&var_name).data = rv;
        let (y, mask) = relu_dropout_forward(y, enc.dropout, Some(&mut *rng));
        blocks.push(BlockTrace { cols, bn, mask });
        h = y;
    }
    let (lstm_out, cache) = bilstm_forward(
        &h,
        batch,
        len,
        lstm_weights(params, prefix, "fwd"),
        lstm_weights(params, prefix, "bwd"),
        true,
    );
    let emb = linear_forward(
        &lstm_out,
        params.expect(&format!("{prefix}.embed.weight")),
        params.expect(&format!("{prefix}.embed.bias")),
    );
    let trace = EncoderTrace {
        batch,
        blocks,
        lstm_input: h,
        lstm: cache.expect("cache requested"),
        lstm_out,
    };
    (emb, trace)
}

fn encode_backward<F: Scalar>(
    spec: &ModelSpec,
    enc: &EncoderSpec,
    prefix: &str,
    params: &TensorMap<F>,
    trace: EncoderTrace<F>,
    demb: &Mat<F>,
    grads: &mut TensorMap<F>,
) {
    let w_name = format!("{prefix}.embed.weight");
    let g = linear_backward(&trace.lstm_out, params.expect(&w_name), demb, true);
    accumulate(grads, &w_name, &g.weight);
    accumulate(grads, &format!("{prefix}.embed.bias"), &g.bias);
    let dlast = g.input.expect("requested");

    let (gf, gb, dx) = bilstm_backward(
        &trace.lstm,
        &trace.lstm_input,
        lstm_weights(params, prefix, "fwd"),
        lstm_weights(params, prefix, "bwd"),
        &dlast,
        true,
    );
    for (dir, g) in [("fwd", gf), ("bwd", gb)] {
        accumulate(grads, &format!("{prefix}.lstm.{dir}.w_ih"), &g.w_ih);
        accumulate(grads, &format!("{prefix}.lstm.{dir}.w_hh"), &g.w_hh);
        accumulate(grads, &format!("{prefix}.lstm.{dir}.bias"), &g.bias);
    }
    let mut dh = dx.expect("requested");
    for (i, block) in trace.blocks.into_iter().enumerate().rev() {
        let dy = relu_dropout_backward(dh, &block.mask);
        let gamma_name = format!("{prefix}.bn{i}.gamma");
        let gbn = batch_norm_backward(&block.bn, &params.expect(&gamma_name).data, &dy);
        accumulate(grads, &gamma_name, &gbn.weight);
        accumulate(grads, &format!("{prefix}.bn{i}.beta"), &gbn.bias);
        let conv_w = format!("{prefix}.conv{i}.weight");
        let gc = conv1d_backward(
            &block.cols,
            trace.batch,
            spec.seq_len,
            params.expect(&conv_w),
            gbn.input.as_ref().expect("bn always returns dx"),
            i > 0,
        );
        accumulate(grads, &conv_w, &gc.weight);
        accumulate(grads, &format!("{prefix}.conv{i}.bias"), &gc.bias);
        match gc.input {
            Some(d) => dh = d,
            None => break,
        }
    }
    let _ = enc;
}

struct ClassifierTrace<F> {
    input: Mat<F>,
    hidden: Mat<F>,
    mask: Vec<F>,
}

fn classify<F: Scalar, P: ParamSource<F>>(params: &P, x: &Mat<F>) -> (Mat<F>, ClassifierTrace<F>) {
    let p = CLASSIFIER_PREFIX;
    let pre = linear_forward(x, params.param(&format!("{p}.fc0.weight")), params.param(&format!("{p}.fc0.bias")));
    let (hidden, mask) = relu_dropout_forward::<F, ChaCha8Rng>(pre, 0.0, None);
    let logits = linear_forward(&hidden, params.param(&format!("{p}.fc1.weight")), params.param(&format!("{p}.fc1.bias")));
    let probs = softmax_rows(&logits);
    (
        probs,
        ClassifierTrace {
            input: x.clone(),
            hidden,
            mask,
        },
    )
}

/// Returns the gradient with respect to the classifier input.
fn classify_backward<F: Scalar>(
    params: &TensorMap<F>,
    trace: &ClassifierTrace<F>,
    dlogits: &Mat<F>,
    grads: &mut TensorMap<F>,
) -> Mat<F> {
    let p = CLASSIFIER_PREFIX;
    let w1 = format!("{p}.fc1.weight");
    let g1 = linear_backward(&trace.hidden, params.expect(&w1), dlogits, true);
    accumulate(grads, &w1, &g1.weight);
    accumulate(grads, &format!("{p}.fc1.bias"), &g1.bias);
    let dpre = relu_dropout_backward(g1.input.expect("requested"), &trace.mask);
    let w0 = format!("{p}.fc0.weight");
    let g0 = linear_backward(&trace.input, params.expect(&w0), &dpre, true);
    accumulate(grads, &w0, &g0.weight);
    accumulate(grads, &format!("{p}.fc0.bias"), &g0.bias);
    g0.input.expect("requested")
}

// ---------------------------------------------------------------------------
// evaluation-mode forward passes

fn check_input<F: Scalar>(spec: &ModelSpec, x: &Mat<F>, channels: usize, what: &str) -> Result<usize> {
    if x.cols != channels || x.rows == 0 || x.rows % spec.seq_len != 0 {
        return Err(Error::Shape(format!(
            "{what} input is {}x{}, expected (batch*{})x{channels}",
            x.rows, x.cols, spec.seq_len
        )));
    }
    if !x.is_finite() {
        return Err(Error::Input(format!("{what} input contains non-finite values")));
    }
    Ok(x.rows / spec.seq_len)
}

fn expect_variant<F: Scalar>(state: &ModelState<F>, v: Variant) -> Result<()> {
    if state.spec.variant != v {
        return Err(Error::Config(format!(
            "state holds a {} model, {v} requested",
            state.spec.variant
        )));
    }
    Ok(())
}

fn als_spec(spec: &ModelSpec) -> &EncoderSpec {
    spec.als_encoder.as_ref().expect("validated variant has an ALS encoder")
}

fn imu_spec(spec: &ModelSpec) -> &EncoderSpec {
    spec.imu_encoder.as_ref().expect("validated variant has an IMU encoder")
}

/// LightHAR on `(batch*seq_len, 1)` light windows → `(batch, 10)` probabilities.
pub fn forward_lighthar<F: Scalar>(state: &ModelState<F>, als: &Mat<F>) -> Result<Mat<F>> {
    expect_variant(state, Variant::LightHar)?;
    let spec = &state.spec;
    let b = check_input(spec, als, ALS_CHANNELS, "ALS")?;
    let z = encode_eval(spec, als_spec(spec), ALS_PREFIX, &state.params, &state.buffers, als, b);
    Ok(classify(&state.params, &z).0)
}

/// InertialHAR on `(batch*seq_len, 3)` accelerometer windows.
pub fn forward_inertialhar<F: Scalar>(state: &ModelState<F>, imu: &Mat<F>) -> Result<Mat<F>> {
    expect_variant(state, Variant::InertialHar)?;
    let spec = &state.spec;
    let b = check_input(spec, imu, IMU_CHANNELS, "IMU")?;
    let z = encode_eval(spec, imu_spec(spec), IMU_PREFIX, &state.params, &state.buffers, imu, b);
    Ok(classify(&state.params, &z).0)
}

/// MultiLight over the concatenated light and inertial embeddings. A missing
/// light stream is passed as all zeros.
pub fn forward_multilight<F: Scalar>(state: &ModelState<F>, als: &Mat<F>, imu: &Mat<F>) -> Result<Mat<F>> {
    expect_variant(state, Variant::MultiLight)?;
    let spec = &state.spec;
    let b = check_input(spec, als, ALS_CHANNELS, "ALS")?;
    if check_input(spec, imu, IMU_CHANNELS, "IMU")? != b {
        return Err(Error::Shape("ALS and IMU batches differ in size".into()));
    }
    let za = encode_eval(spec, als_spec(spec), ALS_PREFIX, &state.params, &state.buffers, als, b);
    let zi = encode_eval(spec, imu_spec(spec), IMU_PREFIX, &state.params, &state.buffers, imu, b);
    Ok(classify(&state.params, &za.hcat(&zi)).0)
}

/// Both branches of the contrastive model in evaluation mode.
#[derive(Debug, Clone)]
pub struct ContraOutputs<F> {
    pub z_als: Mat<F>,
    pub z_imu: Mat<F>,
    pub p_als: Mat<F>,
    pub p_imu: Mat<F>,
}

pub fn forward_contralight_train<F: Scalar>(state: &ModelState<F>, als: &Mat<F>, imu: &Mat<F>) -> Result<ContraOutputs<F>> {
    expect_variant(state, Variant::ContraLight)?;
    let spec = &state.spec;
    let b = check_input(spec, als, ALS_CHANNELS, "ALS")?;
    if check_input(spec, imu, IMU_CHANNELS, "IMU")? != b {
        return Err(Error::Shape("ALS and IMU batches differ in size".into()));
    }
    let z_als = encode_eval(spec, als_spec(spec), ALS_PREFIX, &state.params, &state.buffers, als, b);
    let z_imu = encode_eval(spec, imu_spec(spec), IMU_PREFIX, &state.params, &state.buffers, imu, b);
    let p_als = classify(&state.params, &z_als).0;
    let p_imu = classify(&state.params, &z_imu).0;
    Ok(ContraOutputs { z_als, z_imu, p_als, p_imu })
}

/// Deployment path of the contrastive model: inertial encoder and the shared
/// classifier only.
pub fn forward_contralight_infer<F: Scalar>(state: &ModelState<F>, imu: &Mat<F>) -> Result<Mat<F>> {
    Ok(contralight_infer_with(state, imu, &state.params, &state.buffers)?)
}

fn contralight_infer_with<F: Scalar, P: ParamSource<F>, B: ParamSource<F>>(
    state: &ModelState<F>,
    imu: &Mat<F>,
    params: &P,
    buffers: &B,
) -> Result<Mat<F>> {
    expect_variant(state, Variant::ContraLight)?;
    let spec = &state.spec;
    let b = check_input(spec, imu, IMU_CHANNELS, "IMU")?;
    let z = encode_eval(spec, imu_spec(spec), IMU_PREFIX, params, buffers, imu, b);
    Ok(classify(params, &z).0)
}

/// [`forward_contralight_infer`] that also returns the names of every
/// parameter and buffer tensor the pass read.
pub fn forward_contralight_infer_traced<F: Scalar>(state: &ModelState<F>, imu: &Mat<F>) -> Result<(Mat<F>, BTreeSet<String>)> {
    let params = TracingParams::new(&state.params);
    let buffers = TracingParams::new(&state.buffers);
    let out = contralight_infer_with(state, imu, &params, &buffers)?;
    let mut touched = params.touched();
    touched.extend(buffers.touched());
    Ok((out, touched))
}

/// Embedding of one modality in evaluation mode.
pub fn embed<F: Scalar>(state: &ModelState<F>, modality_prefix: &str, x: &Mat<F>) -> Result<Mat<F>> {
    let spec = &state.spec;
    let (enc, ch) = match modality_prefix {
        ALS_PREFIX => (spec.als_encoder.as_ref(), ALS_CHANNELS),
        IMU_PREFIX => (spec.imu_encoder.as_ref(), IMU_CHANNELS),
        _ => (None, 0),
    };
    let enc = enc.ok_or_else(|| Error::Config(format!("{} has no `{modality_prefix}`", spec.variant)))?;
    let b = check_input(spec, x, ch, modality_prefix)?;
    Ok(encode_eval(spec, enc, modality_prefix, &state.params, &state.buffers, x, b))
}

// ---------------------------------------------------------------------------
// training graph

/// One mini-batch in model layout. Variants ignore the modality they do not
/// consume.
#[derive(Debug, Clone)]
pub struct TrainBatch<F> {
    pub batch: usize,
    /// `(batch*seq_len, 1)`
    pub als: Mat<F>,
    /// `(batch*seq_len, 3)`
    pub imu: Mat<F>,
    pub labels: BatchLabels,
}

impl<F: Scalar> TrainBatch<F> {
    fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.batch == 0 || self.labels.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if self.labels.len() != self.batch {
            return Err(Error::Shape("label count differs from batch size".into()));
        }
        let v = spec.variant;
        if v.has_als_encoder() && check_input(spec, &self.als, ALS_CHANNELS, "ALS")? != self.batch {
            return Err(Error::Shape("ALS rows differ from batch size".into()));
        }
        if v.has_imu_encoder() && check_input(spec, &self.imu, IMU_CHANNELS, "IMU")? != self.batch {
            return Err(Error::Shape("IMU rows differ from batch size".into()));
        }
        Ok(())
    }
}

pub struct StepOutput<F> {
    pub losses: LossReport,
    pub grads: TensorMap<F>,
    /// Probabilities of the deployment path (IMU branch for ContraLight).
    pub probs: Mat<F>,
}

/// Training-mode forward and backward for one batch: batch norm uses batch
/// statistics (and updates the running buffers), dropout draws from `rng`.
pub fn train_step<F: Scalar, R: Rng + ?Sized>(
    state: &mut ModelState<F>,
    batch: &TrainBatch<F>,
    contrastive: &ContrastiveConfig,
    rng: &mut R,
) -> Result<StepOutput<F>> {
    batch.check(&state.spec)?;
    let ModelState { spec, params, buffers, .. } = state;
    let spec: &ModelSpec = spec;
    let n = batch.batch;
    let mut grads = params.zeros_like();
    let to64 = |v: F| v.to_f64().unwrap_or(f64::NAN);

    let (losses, probs) = match spec.variant {
        Variant::LightHar | Variant::InertialHar => {
            let (prefix, x, enc) = if spec.variant == Variant::LightHar {
                (ALS_PREFIX, &batch.als, als_spec(spec))
            } else {
                (IMU_PREFIX, &batch.imu, imu_spec(spec))
            };
            let (z, et) = encode_train(spec, enc, prefix, params, buffers, x, n, rng);
            let (probs, ct) = classify(&*params, &z);
            let ce = to64(cross_entropy(&probs, &batch.labels)?);
            let dlogits = cross_entropy_grad_logits(&probs, &batch.labels)?;
            let dz = classify_backward(params, &ct, &dlogits, &mut grads);
            encode_backward(spec, enc, prefix, params, et, &dz, &mut grads);
            let report = if spec.variant == Variant::LightHar {
                total_loss(0.0, ce, 0.0)?
            } else {
                total_loss(0.0, 0.0, ce)?
            };
            (report, probs)
        }
        Variant::MultiLight => {
            let (za, eta) = encode_train(spec, als_spec(spec), ALS_PREFIX, params, buffers, &batch.als, n, rng);
            let (zi, eti) = encode_train(spec, imu_spec(spec), IMU_PREFIX, params, buffers, &batch.imu, n, rng);
            let fused = za.hcat(&zi);
            let (probs, ct) = classify(&*params, &fused);
            let ce = to64(cross_entropy(&probs, &batch.labels)?);
            let dlogits = cross_entropy_grad_logits(&probs, &batch.labels)?;
            let dfused = classify_backward(params, &ct, &dlogits, &mut grads);
            let (dza, dzi) = dfused.hsplit(za.cols);
            encode_backward(spec, als_spec(spec), ALS_PREFIX, params, eta, &dza, &mut grads);
            encode_backward(spec, imu_spec(spec), IMU_PREFIX, params, eti, &dzi, &mut grads);
            (total_loss(0.0, 0.0, ce)?, probs)
        }
        Variant::ContraLight => {
            let (za, eta) = encode_train(spec, als_spec(spec), ALS_PREFIX, params, buffers, &batch.als, n, rng);
            let (zi, eti) = encode_train(spec, imu_spec(spec), IMU_PREFIX, params, buffers, &batch.imu, n, rng);
            let (pa, cta) = classify(&*params, &za);
            let (pi, cti) = classify(&*params, &zi);
            let ce_light = to64(cross_entropy(&pa, &batch.labels)?);
            let ce_imu = to64(cross_entropy(&pi, &batch.labels)?);
            let (co, mut dza, mut dzi) =
                contrastive_loss_with_grad(&za, &zi, &batch.labels, &batch.labels, contrastive)?;
            let dla = cross_entropy_grad_logits(&pa, &batch.labels)?;
            let dli = cross_entropy_grad_logits(&pi, &batch.labels)?;
            dza.add_assign(&classify_backward(params, &cta, &dla, &mut grads));
            dzi.add_assign(&classify_backward(params, &cti, &dli, &mut grads));
            encode_backward(spec, als_spec(spec), ALS_PREFIX, params, eta, &dza, &mut grads);
            encode_backward(spec, imu_spec(spec), IMU_PREFIX, params, eti, &dzi, &mut grads);
            (total_loss(to64(co), ce_light, ce_imu)?, pi)
        }
    };
    Ok(StepOutput { losses, grads, probs })
}

/// Evaluation-mode loss on one batch (no gradients, no buffer updates).
/// MultiLight and ContraLight read both modalities from the batch as given.
pub fn eval_step<F: Scalar>(
    state: &ModelState<F>,
    batch: &TrainBatch<F>,
    contrastive: &ContrastiveConfig,
) -> Result<(LossReport, Mat<F>)> {
    batch.check(&state.spec)?;
    let to64 = |v: F| v.to_f64().unwrap_or(f64::NAN);
    match state.spec.variant {
        Variant::LightHar => {
            let p = forward_lighthar(state, &batch.als)?;
            Ok((total_loss(0.0, to64(cross_entropy(&p, &batch.labels)?), 0.0)?, p))
        }
        Variant::InertialHar => {
            let p = forward_inertialhar(state, &batch.imu)?;
            Ok((total_loss(0.0, 0.0, to64(cross_entropy(&p, &batch.labels)?))?, p))
        }
        Variant::MultiLight => {
            let p = forward_multilight(state, &batch.als, &batch.imu)?;
            Ok((total_loss(0.0, 0.0, to64(cross_entropy(&p, &batch.labels)?))?, p))
        }
        Variant::ContraLight => {
            let o = forward_contralight_train(state, &batch.als, &batch.imu)?;
            let co = contrastive_loss_with_grad(&o.z_als, &o.z_imu, &batch.labels, &batch.labels, contrastive)?.0;
            let report = total_loss(
                to64(co),
                to64(cross_entropy(&o.p_als, &batch.labels)?),
                to64(cross_entropy(&o.p_imu, &batch.labels)?),
            )?;
            Ok((report, o.p_imu))
        }
    }
}

// ---------------------------------------------------------------------------
// parameter and FLOP accounting

/// One row of the per-layer accounting table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: String,
    pub params: u64,
    pub flops: u64,
}

fn encoder_costs(prefix: &str, e: &EncoderSpec, t: u64) -> Vec<LayerCost> {
    let mut out = Vec::new();
    let c = e.conv_channels as u64;
    let k = e.kernel as u64;
    for i in 0..e.conv_blocks {
        let cin = e.block_in(i) as u64;
        out.push(LayerCost {
            layer: format!("{prefix}.conv{i}"),
            params: c * cin * k + c,
            flops: 2 * t * c * cin * k,
        });
        out.push(LayerCost {
            layer: format!("{prefix}.bn{i}"),
            params: 2 * c,
            flops: t * c,
        });
        out.push(LayerCost {
            layer: format!("{prefix}.relu{i}"),
            params: 0,
            flops: t * c,
        });
    }
    let h = e.lstm_hidden as u64;
    out.push(LayerCost {
        layer: format!("{prefix}.lstm"),
        params: 2 * 4 * (h * (c + h) + h),
        // gate matmuls plus four gate activations and tanh(c) per unit
        flops: 2 * t * (2 * 4 * h * (c + h) + 5 * h),
    });
    let emb = e.embed_dim as u64;
    out.push(LayerCost {
        layer: format!("{prefix}.embed"),
        params: emb * 2 * h + emb,
        flops: 2 * emb * 2 * h,
    });
    out
}

fn classifier_costs(c: &ClassifierSpec) -> Vec<LayerCost> {
    let (i, h, k) = (c.input as u64, c.hidden as u64, c.classes as u64);
    vec![
        LayerCost {
            layer: format!("{CLASSIFIER_PREFIX}.fc0"),
            params: h * i + h,
            flops: 2 * h * i,
        },
        LayerCost {
            layer: format!("{CLASSIFIER_PREFIX}.relu"),
            params: 0,
            flops: h,
        },
        LayerCost {
            layer: format!("{CLASSIFIER_PREFIX}.fc1"),
            params: k * h + k,
            flops: 2 * k * h,
        },
        LayerCost {
            layer: format!("{CLASSIFIER_PREFIX}.softmax"),
            params: 0,
            flops: k,
        },
    ]
}

/// Per-layer costs of the inference path. For ContraLight that is the
/// inertial encoder and the classifier; the light encoder is not listed.
pub fn inference_costs(spec: &ModelSpec, seq_len: usize) -> Vec<LayerCost> {
    let t = seq_len as u64;
    let mut out = Vec::new();
    let use_als = matches!(spec.variant, Variant::LightHar | Variant::MultiLight);
    let use_imu = spec.variant != Variant::LightHar;
    if use_als {
        if let Some(e) = &spec.als_encoder {
            out.extend(encoder_costs(ALS_PREFIX, e, t));
        }
    }
    if use_imu {
        if let Some(e) = &spec.imu_encoder {
            out.extend(encoder_costs(IMU_PREFIX, e, t));
        }
    }
    out.extend(classifier_costs(&spec.classifier));
    out
}

/// Learnable scalars in the whole model (training graph). Batch-norm running
/// statistics are not counted; the shared ContraLight classifier counts once.
pub fn count_params(spec: &ModelSpec) -> u64 {
    let mut total: u64 = spec
        .encoders()
        .into_iter()
        .flat_map(|(p, e)| encoder_costs(p, e, 0))
        .map(|c| c.params)
        .sum();
    total += classifier_costs(&spec.classifier).iter().map(|c| c.params).sum::<u64>();
    total
}

/// Learnable scalars reachable from the inference path.
pub fn count_inference_params(spec: &ModelSpec) -> u64 {
    inference_costs(spec, spec.seq_len).iter().map(|c| c.params).sum()
}

/// Inference-path FLOPs for one window of `seq_len` steps, counting a
/// multiply-accumulate as 2 and each activation/normalization element as 1.
pub fn count_flops(spec: &ModelSpec, seq_len: usize) -> u64 {
    inference_costs(spec, seq_len).iter().map(|c| c.flops).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mini(variant: Variant) -> ModelSpec {
        ModelSpec::with_sizes(variant, 12, 4, 8, 6, 5)
    }

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn single_layer_param_formulas() {
        let c = classifier_costs(&ClassifierSpec {
            input: 256,
            hidden: 128,
            classes: 10,
        });
        assert_eq!(c[0].params, 32_896);
        let als = encoder_costs(ALS_PREFIX, &EncoderSpec::new(1), 60);
        assert_eq!(als[0].params, 384);
        // 60 steps x 64 outputs x 5 taps = 19,200 multiply-accumulates
        assert_eq!(als[0].flops, 38_400);
    }

    #[test]
    fn param_count_equals_tensor_element_count() {
        for v in Variant::ALL {
            for spec in [ModelSpec::new(v), mini(v)] {
                let total: usize = spec.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
                assert_eq!(count_params(&spec), total as u64, "{v}");
                let st = ModelState::<f32>::init(spec.clone(), 1).unwrap();
                assert_eq!(st.params.numel() as u64, count_params(&spec));
            }
        }
    }

    #[test]
    fn classifier_count_is_sum_of_its_layers() {
        let spec = ModelSpec::new(Variant::InertialHar);
        let cls: u64 = classifier_costs(&spec.classifier).iter().map(|c| c.params).sum();
        assert_eq!(cls, (256 * 128 + 128) + (128 * 10 + 10));
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelState::<f32>::init(mini(Variant::ContraLight), 5).unwrap();
        let b = ModelState::<f32>::init(mini(Variant::ContraLight), 5).unwrap();
        let c = ModelState::<f32>::init(mini(Variant::ContraLight), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
        a.validate().unwrap();
    }

    #[test]
    fn variant_mismatch_and_shape_errors() {
        let st = ModelState::<f32>::init(mini(Variant::LightHar), 0).unwrap();
        assert!(matches!(forward_inertialhar(&st, &random_mat(12, 3, 0)), Err(Error::Config(_))));
        assert!(matches!(forward_lighthar(&st, &random_mat(13, 1, 0)), Err(Error::Shape(_))));
        assert!(matches!(forward_lighthar(&st, &random_mat(12, 3, 0)), Err(Error::Shape(_))));
        let mut bad = random_mat(12, 1, 0);
        bad.data[3] = f32::NAN;
        assert!(matches!(forward_lighthar(&st, &bad), Err(Error::Input(_))));
    }

    #[test]
    fn spec_validation_rejects_inconsistent_specs() {
        let mut s = ModelSpec::new(Variant::MultiLight);
        s.classifier.input = 256;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::new(Variant::InertialHar);
        s.contrastive_margin = Some(1.0);
        assert!(s.validate().is_err());
        let mut s = ModelSpec::new(Variant::LightHar);
        s.als_encoder.as_mut().unwrap().conv_blocks = 2;
        assert!(s.validate().is_err());
    }

    #[test]
    fn batch_rows_are_independent() {
        let st = ModelState::<f32>::init(mini(Variant::InertialHar), 2).unwrap();
        let x = random_mat(4 * 12, 3, 9);
        let all = forward_inertialhar(&st, &x).unwrap();
        for b in 0..4 {
            let one = Mat::from_vec(12, 3, x.data[b * 36..(b + 1) * 36].to_vec());
            let p = forward_inertialhar(&st, &one).unwrap();
            for (a, e) in p.data.iter().zip(all.row(b)) {
                assert!((a - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn train_step_updates_running_statistics_only_in_training() {
        let mut st = ModelState::<f32>::init(mini(Variant::LightHar), 3).unwrap();
        let before = st.buffers.clone();
        let batch = TrainBatch {
            batch: 2,
            als: random_mat(24, 1, 1),
            imu: Mat::zeros(24, 3),
            labels: BatchLabels::new(vec![1, 2], 10).unwrap(),
        };
        let _ = eval_step(&st, &batch, &ContrastiveConfig::default()).unwrap();
        assert_eq!(st.buffers, before);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = train_step(&mut st, &batch, &ContrastiveConfig::default(), &mut rng).unwrap();
        assert_ne!(st.buffers, before);
        assert!(out.grads.all_finite());
        assert!(out.losses.l_ce_light > 0.0);
        assert_eq!(out.losses.l_total, out.losses.l_ce_light);
    }
}
