//! Small convolutional segmentation networks with a primary classifier on the
//! final backbone stage and an optional auxiliary classifier on the
//! penultimate stage.
//!
//! The backbone is a sequence of stages of 3x3 convolutions with ReLU; every
//! stage after the first opens with a stride-2 convolution, and both heads are
//! 1x1 convolutions whose logits are upsampled back to input resolution by
//! nearest neighbor. Teacher and student differ only in their [`ModelSpec`].

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{DiffTensor, Tape, TensorError, ValueId};

const CHECKPOINT_MAGIC: &[u8; 8] = b"RDSGCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("input {h}x{w} not divisible by downsampling factor {factor}")]
    Indivisible { h: usize, w: usize, factor: usize },
    #[error("parameter '{name}' has no gradient; run backward before stepping")]
    MissingGrad { name: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One backbone stage: `convs` 3x3 convolutions at `channels` width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub channels: usize,
    pub convs: usize,
}

/// Architecture description for one network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
    pub has_aux_head: bool,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
}

fn default_input_channels() -> usize {
    3
}

impl ModelSpec {
    /// Shipped teacher: wider and deeper than the student.
    pub fn teacher_default(num_classes: usize) -> Self {
        Self {
            stages: [16, 32, 64, 64]
                .iter()
                .map(|&channels| StageSpec { channels, convs: 2 })
                .collect(),
            num_classes,
            has_aux_head: true,
            input_channels: 3,
        }
    }

    /// Shipped student: three narrow single-conv stages, primary head only.
    pub fn student_default(num_classes: usize) -> Self {
        Self {
            stages: [8, 16, 16]
                .iter()
                .map(|&channels| StageSpec { channels, convs: 1 })
                .collect(),
            num_classes,
            has_aux_head: false,
            input_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.stages.len() < 2 {
            return Err(ModelError::InvalidSpec(format!(
                "need at least 2 stages (got {}); the auxiliary head reads the penultimate stage",
                self.stages.len()
            )));
        }
        if self.stages.iter().any(|s| s.channels == 0 || s.convs == 0) {
            return Err(ModelError::InvalidSpec("stage channels and convs must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidSpec(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.input_channels == 0 {
            return Err(ModelError::InvalidSpec("input_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Every stage after the first halves the resolution.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.stages.len() - 1)
    }

    /// Names and shapes of all parameters, in checkpoint order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut in_ch = self.input_channels;
        for (si, stage) in self.stages.iter().enumerate() {
            for ci in 0..stage.convs {
                out.push((format!("stage{si}.conv{ci}.weight"), vec![stage.channels, in_ch, 3, 3]));
                out.push((format!("stage{si}.conv{ci}.bias"), vec![stage.channels]));
                in_ch = stage.channels;
            }
        }
        let last = self.stages[self.stages.len() - 1].channels;
        out.push(("head.primary.weight".into(), vec![self.num_classes, last, 1, 1]));
        out.push(("head.primary.bias".into(), vec![self.num_classes]));
        if self.has_aux_head {
            let penult = self.stages[self.stages.len() - 2].channels;
            out.push(("head.aux.weight".into(), vec![self.num_classes, penult, 1, 1]));
            out.push(("head.aux.bias".into(), vec![self.num_classes]));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, shape)| shape.iter().product::<usize>()).sum()
    }
}

/// Named trainable tensors of one network plus the spec they realize.
#[derive(Debug, Clone)]
pub struct Params {
    spec: ModelSpec,
    tensors: BTreeMap<String, DiffTensor>,
}

/// Fan-in-scaled random initialization: conv weights drawn from
/// N(0, 2/fan_in), biases zero. Deterministic per seed.
pub fn build(spec: &ModelSpec, seed: u64) -> Result<Params, ModelError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in spec.layout() {
        let numel: usize = shape.iter().product();
        let data = if name.ends_with(".bias") {
            vec![0.0; numel]
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive sd");
            (0..numel).map(|_| normal.sample(&mut rng)).collect()
        };
        tensors.insert(name, DiffTensor::with_grad(shape, data)?);
    }
    Ok(Params { spec: spec.clone(), tensors })
}

impl Params {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn get(&self, name: &str) -> Option<&DiffTensor> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DiffTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DiffTensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(DiffTensor::numel).sum()
    }

    /// Mark every tensor constant (teacher use); gradients stop here.
    pub fn freeze(&mut self) {
        for t in self.tensors.values_mut() {
            t.set_requires_grad(false);
        }
    }

    pub fn clear_grads(&mut self) {
        for t in self.tensors.values_mut() {
            t.clear_grad();
        }
    }

    /// Write the versioned binary checkpoint: little-endian
    /// `(name, shape, row-major f64 values)` entries in name order.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Load a checkpoint against a spec; names and shapes must match the
    /// spec's layout exactly.
    pub fn load(spec: &ModelSpec, path: &Path) -> Result<Params, ModelError> {
        spec.validate()?;
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::BadCheckpoint("bad magic".into()));
        }
        let version = read_u32(&mut file)?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::BadCheckpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut file)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut file)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            file.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| ModelError::BadCheckpoint("non-utf8 name".into()))?;
            let rank = read_u32(&mut file)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                file.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut b = [0u8; 8];
            for _ in 0..numel {
                file.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            tensors.insert(name, DiffTensor::with_grad(shape, data)?);
        }
        let expected = spec.layout();
        if expected.len() != tensors.len() {
            return Err(ModelError::BadCheckpoint(format!(
                "spec expects {} tensors, file has {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &expected {
            match tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::BadCheckpoint(format!(
                        "tensor '{name}' has shape {:?}, spec expects {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(ModelError::BadCheckpoint(format!("tensor '{name}' missing"))),
            }
        }
        Ok(Params { spec: spec.clone(), tensors })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Primary (and optionally auxiliary) logit maps from one forward pass, as
/// values on the recording tape. Both are `[B, C, H, W]` at input resolution.
#[derive(Debug, Clone, Copy)]
pub struct LogitPair {
    pub primary: ValueId,
    pub auxiliary: Option<ValueId>,
}

/// Everything a training step needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: LogitPair,
    /// Output of each backbone stage, in order.
    pub stage_features: Vec<ValueId>,
    /// Tape ids of the registered parameter leaves, for gradient collection.
    pub param_ids: Vec<(String, ValueId)>,
}

/// Run the network on `[B, C_in, H, W]` images. The auxiliary head is
/// evaluated only when `want_aux` is set and the spec has one.
pub fn forward(
    tape: &mut Tape,
    params: &Params,
    images: &DiffTensor,
    want_aux: bool,
) -> Result<ForwardOutput, ModelError> {
    let spec = &params.spec;
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != spec.input_channels {
        return Err(ModelError::InvalidSpec(format!(
            "expected images [B, {}, H, W], got {shape:?}",
            spec.input_channels
        )));
    }
    let factor = spec.downsample_factor();
    let (h, w) = (shape[2], shape[3]);
    if h % factor != 0 || w % factor != 0 {
        return Err(ModelError::Indivisible { h, w, factor });
    }

    let mut param_ids = Vec::new();
    let mut register = |tape: &mut Tape, name: &str| -> Result<ValueId, ModelError> {
        let tensor = params.tensors.get(name).expect("layout names are exhaustive");
        let id = tape.leaf(tensor)?;
        param_ids.push((name.to_string(), id));
        Ok(id)
    };

    let mut x = tape.leaf(images)?;
    let mut features = Vec::with_capacity(spec.stages.len());
    for (si, stage) in spec.stages.iter().enumerate() {
        for ci in 0..stage.convs {
            let stride = if si > 0 && ci == 0 { 2 } else { 1 };
            let weight = register(tape, &format!("stage{si}.conv{ci}.weight"))?;
            let bias = register(tape, &format!("stage{si}.conv{ci}.bias"))?;
            x = tape.conv2d(x, weight, stride, 1)?;
            x = tape.add(x, bias)?;
            x = tape.relu(x)?;
        }
        features.push(x);
    }

    let head = |tape: &mut Tape,
                feature: ValueId,
                name: &str,
                up: usize,
                param_ids: &mut Vec<(String, ValueId)>|
     -> Result<ValueId, ModelError> {
        let tensor = params.tensors.get(&format!("{name}.weight")).expect("head layout");
        let weight = tape.leaf(tensor)?;
        param_ids.push((format!("{name}.weight"), weight));
        let tensor = params.tensors.get(&format!("{name}.bias")).expect("head layout");
        let bias = tape.leaf(tensor)?;
        param_ids.push((format!("{name}.bias"), bias));
        let mut logits = tape.conv2d(feature, weight, 1, 0)?;
        logits = tape.add(logits, bias)?;
        if up > 1 {
            logits = tape.upsample_nearest(logits, up)?;
        }
        Ok(logits)
    };

    let last = features[features.len() - 1];
    let primary = head(tape, last, "head.primary", factor, &mut param_ids)?;
    let auxiliary = if want_aux && spec.has_aux_head {
        let penult = features[features.len() - 2];
        Some(head(tape, penult, "head.aux", factor / 2, &mut param_ids)?)
    } else {
        None
    };

    Ok(ForwardOutput { logits: LogitPair { primary, auxiliary }, stage_features: features, param_ids })
}

/// Copy gradients produced by `tape.backward` into the parameter tensors.
pub fn collect_grads(tape: &Tape, fwd: &ForwardOutput, params: &mut Params) -> Result<(), ModelError> {
    for (name, id) in &fwd.param_ids {
        let tensor = params.tensors.get_mut(name).expect("forward used this params set");
        if !tensor.requires_grad() {
            continue;
        }
        match tape.grad(*id) {
            Some(g) => tensor.set_grad(g.to_vec())?,
            None => return Err(ModelError::MissingGrad { name: name.clone() }),
        }
    }
    Ok(())
}

/// SGD with momentum and weight decay:
/// `v <- momentum * v + grad + weight_decay * w; w <- w - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    /// One update over every parameter; requires populated gradients and
    /// clears them afterwards.
    pub fn step(&mut self, params: &mut Params, lr: f64) -> Result<(), ModelError> {
        for (name, tensor) in params.tensors.iter_mut() {
            let grad = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => return Err(ModelError::MissingGrad { name: name.clone() }),
            };
            let velocity = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; tensor.numel()]);
            let data = tensor.data_mut();
            for i in 0..data.len() {
                velocity[i] = self.momentum * velocity[i] + grad[i] + self.weight_decay * data[i];
                data[i] -= lr * velocity[i];
            }
            tensor.clear_grad();
        }
        Ok(())
    }
}

/// Polynomial decay: `base_lr * (1 - iter/total_iters)^0.9`.
pub fn poly_lr(iter: u64, total_iters: u64, base_lr: f64) -> Result<f64, ModelError> {
    if total_iters == 0 {
        return Err(ModelError::InvalidSpec("total_iters must be positive".into()));
    }
    if iter > total_iters {
        return Err(ModelError::InvalidSpec(format!(
            "iter {iter} exceeds total_iters {total_iters}"
        )));
    }
    Ok(base_lr * (1.0 - iter as f64 / total_iters as f64).powf(0.9))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            stages: vec![StageSpec { channels: 2, convs: 1 }, StageSpec { channels: 3, convs: 1 }],
            num_classes: 5,
            has_aux_head: true,
            input_channels: 3,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let spec = tiny_spec();
        let a = build(&spec, 9).unwrap();
        let b = build(&spec, 9).unwrap();
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        let c = build(&spec, 10).unwrap();
        assert_ne!(
            a.get("stage0.conv0.weight").unwrap().data(),
            c.get("stage0.conv0.weight").unwrap().data()
        );
    }

    #[test]
    fn heads_have_num_classes_outputs() {
        let params = build(&tiny_spec(), 0).unwrap();
        assert_eq!(params.get("head.primary.weight").unwrap().shape()[0], 5);
        assert_eq!(params.get("head.aux.weight").unwrap().shape()[0], 5);
    }

    #[test]
    fn param_count_matches_hand_arithmetic() {
        // stage0: 2*3*3*3 + 2 = 56; stage1: 3*2*3*3 + 3 = 57;
        // primary head: 5*3*1*1 + 5 = 20; aux head: 5*2*1*1 + 5 = 15.
        let spec = tiny_spec();
        assert_eq!(spec.param_count(), 56 + 57 + 20 + 15);
        assert_eq!(build(&spec, 3).unwrap().param_count(), spec.param_count());
    }

    #[test]
    fn default_teacher_outweighs_default_student() {
        let t = ModelSpec::teacher_default(5);
        let s = ModelSpec::student_default(5);
        assert!(t.param_count() > s.param_count(), "{} <= {}", t.param_count(), s.param_count());
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let spec = tiny_spec();
        let mut params = build(&spec, 1).unwrap();
        for (_, t) in params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let images = DiffTensor::new(vec![1, 3, 4, 4], (0..48).map(|v| v as f64 / 48.0).collect()).unwrap();
        let mut tape = Tape::new();
        let out = forward(&mut tape, &params, &images, true).unwrap();
        assert!(tape.value(out.logits.primary).iter().all(|&v| v == 0.0));
        assert!(tape.value(out.logits.auxiliary.unwrap()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let spec = tiny_spec();
        let params = build(&spec, 5).unwrap();
        let images = DiffTensor::new(vec![2, 3, 8, 8], (0..384).map(|v| (v as f64).sin()).collect()).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let out = forward(&mut tape, &params, &images, true).unwrap();
            assert_eq!(tape.shape(out.logits.primary), &[2, 5, 8, 8]);
            assert_eq!(tape.shape(out.logits.auxiliary.unwrap()), tape.shape(out.logits.primary));
            tape.value(out.logits.primary).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn forward_rejects_indivisible_input() {
        let params = build(&tiny_spec(), 5).unwrap();
        let images = DiffTensor::new(vec![1, 3, 5, 5], vec![0.0; 75]).unwrap();
        let mut tape = Tape::new();
        let err = forward(&mut tape, &params, &images, false).unwrap_err();
        assert!(matches!(err, ModelError::Indivisible { factor: 2, .. }));
    }

    #[test]
    fn one_pixel_affine_chain() {
        // A 1x1 image through 1x1 convs is a plain affine chain (ReLU kept
        // positive), checked against hand arithmetic.
        let spec = ModelSpec {
            stages: vec![StageSpec { channels: 1, convs: 1 }, StageSpec { channels: 1, convs: 1 }],
            num_classes: 2,
            has_aux_head: false,
            input_channels: 1,
        };
        let mut params = build(&spec, 0).unwrap();
        let values: &[(&str, f64)] = &[
            ("stage0.conv0.weight", 2.0),
            ("stage0.conv0.bias", 0.5),
            ("stage1.conv0.weight", 3.0),
            ("stage1.conv0.bias", -1.0),
        ];
        for (name, v) in values {
            let t = params.tensors.get_mut(*name).unwrap();
            // 3x3 weights: center tap only, so the padded 1x1 input sees an
            // effective scalar multiply.
            let slot = if t.shape().len() == 4 { t.numel() / 2 } else { 0 };
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            t.data_mut()[slot] = *v;
        }
        let hw = params.tensors.get_mut("head.primary.weight").unwrap();
        hw.data_mut().copy_from_slice(&[1.0, -1.0]);
        let hb = params.tensors.get_mut("head.primary.bias").unwrap();
        hb.data_mut().copy_from_slice(&[0.25, 0.0]);

        // Input 2x2 (factor 2); all pixels 0.6. Stage0: 2*0.6+0.5 = 1.7.
        // Stage1 (stride 2, one output pixel sees only the center tap at the
        // top-left corner due to padding): 3*1.7-1.0 = 4.1.
        // Heads: [4.1+0.25, -4.1+0.0].
        let images = DiffTensor::new(vec![1, 1, 2, 2], vec![0.6; 4]).unwrap();
        let mut tape = Tape::new();
        let out = forward(&mut tape, &params, &images, false).unwrap();
        let v = tape.value(out.logits.primary);
        assert_eq!(tape.shape(out.logits.primary), &[1, 2, 2, 2]);
        for pixel in 0..4 {
            assert!((v[pixel] - 4.35).abs() < 1e-12);
            assert!((v[4 + pixel] + 4.1).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_zero_lr_keeps_parameters() {
        let spec = tiny_spec();
        let mut params = build(&spec, 2).unwrap();
        let before: Vec<Vec<f64>> = params.iter().map(|(_, t)| t.data().to_vec()).collect();
        for (_, t) in params.iter_mut() {
            let n = t.numel();
            t.set_grad(vec![1.0; n]).unwrap();
        }
        Sgd::new(0.9, 0.0005).step(&mut params, 0.0).unwrap();
        let after: Vec<Vec<f64>> = params.iter().map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn sgd_single_step_definition() {
        let spec = tiny_spec();
        let mut params = build(&spec, 2).unwrap();
        let before = params.get("stage0.conv0.weight").unwrap().data().to_vec();
        for (_, t) in params.iter_mut() {
            let n = t.numel();
            t.set_grad(vec![0.25; n]).unwrap();
        }
        Sgd::new(0.0, 0.0).step(&mut params, 0.1).unwrap();
        let after = params.get("stage0.conv0.weight").unwrap().data();
        for (b, a) in before.iter().zip(after) {
            assert!((a - (b - 0.1 * 0.25)).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_two_step_momentum_recurrence() {
        // Constant grad g, momentum 0.9, no decay:
        // v1 = g, v2 = 1.9 g, so w2 = w0 - lr * 2.9 g.
        let spec = tiny_spec();
        let mut params = build(&spec, 2).unwrap();
        let before = params.get("stage1.conv0.bias").unwrap().data().to_vec();
        let mut sgd = Sgd::new(0.9, 0.0);
        for _ in 0..2 {
            for (_, t) in params.iter_mut() {
                let n = t.numel();
                t.set_grad(vec![0.5; n]).unwrap();
            }
            sgd.step(&mut params, 0.01).unwrap();
        }
        let after = params.get("stage1.conv0.bias").unwrap().data();
        for (b, a) in before.iter().zip(after) {
            assert!((a - (b - 0.01 * 2.9 * 0.5)).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_missing_grad_names_parameter() {
        let spec = tiny_spec();
        let mut params = build(&spec, 2).unwrap();
        let err = Sgd::new(0.9, 0.0).step(&mut params, 0.1).unwrap_err();
        match err {
            ModelError::MissingGrad { name } => assert_eq!(name, "head.aux.bias"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn poly_lr_endpoints_and_midpoint() {
        assert_eq!(poly_lr(0, 100, 0.02).unwrap(), 0.02);
        assert_eq!(poly_lr(100, 100, 0.02).unwrap(), 0.0);
        let mid = poly_lr(50, 100, 0.02).unwrap();
        assert!((mid - 0.02 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((mid - 0.010718).abs() < 1e-6);
        assert!(poly_lr(1, 0, 0.02).is_err());
        assert!(poly_lr(101, 100, 0.02).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let spec = tiny_spec();
        let params = build(&spec, 77).unwrap();
        params.save(&path).unwrap();
        let loaded = Params::load(&spec, &path).unwrap();
        for ((na, ta), (nb, tb)) in params.iter().zip(loaded.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        // Saving the loaded copy reproduces the file byte for byte.
        let path2 = dir.path().join("model2.ckpt");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_wrong_spec() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        build(&tiny_spec(), 1).unwrap().save(&path).unwrap();
        let mut other = tiny_spec();
        other.stages[0].channels = 4;
        assert!(matches!(Params::load(&other, &path), Err(ModelError::BadCheckpoint(_))));
    }
}
