//! Desk-scale supervised training (one shared recipe for fair model pairs)
//! and a bit-stable checkpoint format.
//!
//! Determinism: the per-epoch data order, augmentation flips, and parameter
//! init all derive from the config seed. Batches are split into fixed-size
//! chunks whose gradients fan out across workers and reduce in chunk order,
//! so results do not depend on the worker count.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::platform_tag;
use crate::data::Dataset;
use crate::error::{Error, FormatError, Result};
use crate::model::{Model, ModelSpec};
use crate::rng::{rng_from, shuffle, splitmix64};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// momentum 0.9
    SgdMomentum,
    AdamW,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub cosine_decay: bool,
    pub weight_decay: f64,
    pub seed: u64,
    pub flip_augment: bool,
    /// Attention temperature applied during training forwards.
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            optimizer: Optimizer::AdamW,
            lr: 1e-3,
            cosine_decay: true,
            weight_decay: 5e-2,
            seed: 0,
            flip_augment: true,
            temperature: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("train config: epochs and batch size must be positive"));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || !(self.temperature > 0.0) {
            return Err(Error::invalid("train config: nonpositive hyperparameter"));
        }
        Ok(())
    }
}

/// Stable hash of the full config; embedded in checkpoints and echoed in
/// reports so cross-config comparisons are detectable.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serialization");
    format!("{:08x}", crc32fast::hash(json.as_bytes()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_accuracy: f64,
}

/// Fixed chunk width for deterministic gradient reduction.
const GRAD_CHUNK: usize = 16;

struct ChunkResult {
    loss_sum: f64,
    grads: BTreeMap<String, Vec<f32>>,
}

/// Trains a fresh model. Deterministic per (spec, dataset, cfg) on one
/// platform. Per-epoch log carries train loss and accuracy on `eval`
/// (falling back to the training set when absent).
pub fn train_model(
    spec: &ModelSpec,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Model<f32>, Vec<EpochLog>)> {
    let model = Model::init(spec.clone(), cfg.seed)?;
    continue_training(model, train, eval, cfg)
}

/// Continues training from existing weights (fine-tuning); optimizer state
/// starts fresh. Same determinism contract as `train_model`.
pub fn continue_training(
    model: Model<f32>,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Model<f32>, Vec<EpochLog>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    let spec = &model.spec;
    let (c, h, w) = spec.geometry();
    if train.geometry() != (c, h, w) {
        return Err(Error::invalid("dataset geometry does not match model spec"));
    }
    if train.labels.iter().any(|&l| l as usize >= spec.num_classes()) {
        return Err(Error::invalid("label out of range for model head"));
    }

    let mut model = model;
    let mut opt = OptState::new(&model, cfg.optimizer);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let n = train.len();

    for epoch in 0..cfg.epochs {
        let lr = if cfg.cosine_decay {
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos())
        } else {
            cfg.lr
        };

        let mut order: Vec<usize> = (0..n).collect();
        let mut order_rng = rng_from(&[cfg.seed, 8, epoch as u64]);
        shuffle(&mut order, &mut order_rng);

        let mut epoch_loss = 0.0f64;
        for batch_indices in order.chunks(cfg.batch_size) {
            let chunks: Vec<&[usize]> = batch_indices.chunks(GRAD_CHUNK).collect();
            let results: Vec<Result<ChunkResult>> = chunks
                .par_iter()
                .map(|chunk| chunk_forward_backward(&model, train, chunk, cfg, epoch))
                .collect();

            let mut grad_total: BTreeMap<String, Vec<f32>> = BTreeMap::new();
            let mut loss_sum = 0.0f64;
            for result in results {
                let chunk = result.map_err(|e| match e {
                    Error::Numeric(msg) => Error::Training { epoch, message: msg },
                    other => other,
                })?;
                loss_sum += chunk.loss_sum;
                for (name, grad) in chunk.grads {
                    match grad_total.get_mut(&name) {
                        Some(total) => {
                            for (t, g) in total.iter_mut().zip(&grad) {
                                *t += g;
                            }
                        }
                        None => {
                            grad_total.insert(name, grad);
                        }
                    }
                }
            }
            if !loss_sum.is_finite() {
                return Err(Error::Training { epoch, message: "non-finite loss".into() });
            }
            epoch_loss += loss_sum;

            let scale = 1.0 / batch_indices.len() as f32;
            opt.step(&mut model, &grad_total, scale, lr, cfg);
        }

        let eval_accuracy = accuracy(&model, eval.unwrap_or(train)).map_err(|e| match e {
            Error::Numeric(msg) => Error::Training { epoch, message: msg },
            other => other,
        })?;
        logs.push(EpochLog { epoch, train_loss: epoch_loss / n as f64, eval_accuracy });
    }

    Ok((model, logs))
}

fn chunk_forward_backward(
    model: &Model<f32>,
    train: &Dataset,
    chunk: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<ChunkResult> {
    let (images, labels) = batch_with_flips(train, chunk, cfg, epoch)?;
    let mut tape = Tape::new();
    let input = tape.leaf(images, false)?;
    let out = model.train_graph(&mut tape, input, cfg.temperature)?;
    let loss = tape.cross_entropy_sum(out.logits, &labels)?;
    let loss_sum = tape.value(loss).item() as f64;
    tape.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (name, var) in &out.params {
        grads.insert(name.clone(), tape.grad(*var).expect("param grad").into_data());
    }
    Ok(ChunkResult { loss_sum, grads })
}

fn batch_with_flips(
    train: &Dataset,
    chunk: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let (mut images, labels) = train.batch(chunk)?;
    if cfg.flip_augment {
        let s = images.shape().to_vec();
        let (c, h, w) = (s[1], s[2], s[3]);
        for (bi, &idx) in chunk.iter().enumerate() {
            // flip decision per (seed, epoch, dataset index): chunking and
            // worker count cannot change it
            let mut key = crate::rng::derive_seed(&[cfg.seed, 9, epoch as u64, idx as u64]);
            if splitmix64(&mut key) & 1 == 1 {
                let img = &mut images.data_mut()[bi * c * h * w..(bi + 1) * c * h * w];
                for ci in 0..c {
                    for y in 0..h {
                        let row = &mut img[ci * h * w + y * w..ci * h * w + (y + 1) * w];
                        row.reverse();
                    }
                }
            }
        }
    }
    Ok((images, labels))
}

fn accuracy(model: &Model<f32>, data: &Dataset) -> Result<f64> {
    let all: Vec<usize> = (0..data.len()).collect();
    let counts: Vec<Result<usize>> = all
        .chunks(64)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|chunk| {
            let (images, labels) = data.batch(chunk)?;
            let preds = crate::data::Classifier::predict(model, &images)?;
            Ok(preds.iter().zip(&labels).filter(|(p, l)| p == l).count())
        })
        .collect();
    let mut correct = 0usize;
    for c in counts {
        correct += c?;
    }
    Ok(correct as f64 / data.len() as f64)
}

struct OptState {
    kind: Optimizer,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    t: usize,
}

impl OptState {
    fn new(model: &Model<f32>, kind: Optimizer) -> Self {
        let zeros: BTreeMap<String, Vec<f32>> = model
            .params()
            .iter()
            .map(|(k, t)| (k.clone(), vec![0.0; t.numel()]))
            .collect();
        OptState { kind, m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(
        &mut self,
        model: &mut Model<f32>,
        grads: &BTreeMap<String, Vec<f32>>,
        scale: f32,
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let lr = lr as f32;
        let wd = cfg.weight_decay as f32;
        match self.kind {
            Optimizer::SgdMomentum => {
                const MU: f32 = 0.9;
                for (name, grad) in grads {
                    let buf = self.m.get_mut(name).expect("momentum buffer");
                    let param = model.param_mut(name);
                    for ((p, g), b) in param.data_mut().iter_mut().zip(grad).zip(buf) {
                        *b = MU * *b + g * scale;
                        *p -= lr * (*b + wd * *p);
                    }
                }
            }
            Optimizer::AdamW => {
                const B1: f32 = 0.9;
                const B2: f32 = 0.999;
                const EPS: f32 = 1e-8;
                let bc1 = 1.0 - B1.powi(self.t as i32);
                let bc2 = 1.0 - B2.powi(self.t as i32);
                for (name, grad) in grads {
                    let m = self.m.get_mut(name).expect("adam m");
                    let v = self.v.get_mut(name).expect("adam v");
                    let param = model.param_mut(name);
                    for (i, (p, g)) in param.data_mut().iter_mut().zip(grad).enumerate() {
                        let g = g * scale;
                        m[i] = B1 * m[i] + (1.0 - B1) * g;
                        v[i] = B2 * v[i] + (1.0 - B2) * g * g;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        *p -= lr * (mhat / (vhat.sqrt() + EPS) + wd * *p);
                    }
                }
            }
        }
    }
}

// ---- checkpoint format ----

const MAGIC: &[u8; 5] = b"MVPR1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub train_config_hash: Option<String>,
    pub platform: String,
}

/// Layout: magic "MVPR1" | u32 LE meta length | meta JSON | little-endian
/// f32 parameter blobs in canonical name order | trailing CRC32 of all
/// preceding bytes.
pub fn save_checkpoint(
    model: &Model<f32>,
    path: &Path,
    train_config_hash: Option<&str>,
) -> Result<()> {
    let meta = CheckpointMeta {
        spec: model.spec.clone(),
        train_config_hash: train_config_hash.map(|s| s.to_string()),
        platform: platform_tag(),
    };
    let meta_json = serde_json::to_vec(&meta).map_err(|e| FormatError::Meta(e.to_string()))?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&meta_json);
    for ps in model.spec.param_specs() {
        for &v in model.param(&ps.name).data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    crate::analysis::atomic_write(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(FormatError::MagicMismatch.into());
    }
    if bytes.len() < MAGIC.len() + 8 {
        return Err(FormatError::CrcMismatch.into());
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(FormatError::CrcMismatch.into());
    }
    let meta_len =
        u32::from_le_bytes(body[5..9].try_into().expect("4 bytes")) as usize;
    if body.len() < 9 + meta_len {
        return Err(FormatError::Meta("metadata extends past file".into()).into());
    }
    let meta: CheckpointMeta = serde_json::from_slice(&body[9..9 + meta_len])
        .map_err(|e| FormatError::Meta(e.to_string()))?;
    meta.spec.validate().map_err(|e| FormatError::Meta(e.to_string()))?;

    let mut offset = 9 + meta_len;
    let mut params = BTreeMap::new();
    for ps in meta.spec.param_specs() {
        let numel: usize = ps.shape.iter().product();
        let nbytes = numel * 4;
        if offset + nbytes > body.len() {
            return Err(FormatError::ShapeMismatch(format!(
                "parameter {} wants {} bytes, {} remain",
                ps.name,
                nbytes,
                body.len() - offset
            ))
            .into());
        }
        let data: Vec<f32> = body[offset..offset + nbytes]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        params.insert(ps.name.clone(), Tensor::new(ps.shape.clone(), data)?);
        offset += nbytes;
    }
    if offset != body.len() {
        return Err(FormatError::ShapeMismatch(format!(
            "{} trailing parameter bytes",
            body.len() - offset
        ))
        .into());
    }
    Ok((Model::from_params(meta.spec.clone(), params)?, meta))
}
