//! Quantitative metrics (fooling rate, MAX/SUM patch saliency), attention
//! rollout, CNN feature-map attention, and deterministic PGM/PPM rendering.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::AttackTarget;
use crate::data::{argmax, PatchGrid};
use crate::error::{Error, Result};
use crate::model::{ActivationCache, AttentionRecord};
use crate::tensor::{Tape, Tensor};

pub fn platform_tag() -> String {
    format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS)
}

/// Versioned experiment report; JSON field order is fixed by declaration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub report_version: u32,
    pub experiment: String,
    pub model_ids: Vec<String>,
    /// Evaluation-set size.
    pub p: usize,
    /// Fooled count.
    pub q: usize,
    pub fooling_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_position: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_type: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_severity: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
    pub seed: u64,
    pub config_echo: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_config_hash: Option<String>,
    pub platform: String,
}

impl EvalReport {
    pub fn new(experiment: &str, model_ids: Vec<String>, outcomes: &[bool], seed: u64) -> Result<Self> {
        let (p, q, fooling_rate) = fooling_rate(outcomes)?;
        Ok(EvalReport {
            report_version: 1,
            experiment: experiment.to_string(),
            model_ids,
            p,
            q,
            fooling_rate,
            per_position: None,
            per_type: None,
            per_severity: None,
            notes: Vec::new(),
            seed,
            config_echo: serde_json::Value::Null,
            train_config_hash: None,
            platform: platform_tag(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization") + "\n"
    }
}

/// FR = Q/P over per-image fooled flags. Lower is more robust.
pub fn fooling_rate(outcomes: &[bool]) -> Result<(usize, usize, f64)> {
    if outcomes.is_empty() {
        return Err(Error::invalid("fooling rate needs P >= 1 outcomes"));
    }
    let p = outcomes.len();
    let q = outcomes.iter().filter(|&&b| b).count();
    Ok((p, q, q as f64 / p as f64))
}

/// Renders an FR as the paper formats it: percent with one decimal, integer
/// when exact ("30.6", "100").
pub fn percent_string(fr: f64) -> String {
    let rounded = (fr * 1000.0).round() / 10.0;
    if rounded.fract() == 0.0 {
        format!("{}", rounded as i64)
    } else {
        format!("{rounded:.1}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyClass {
    Predicted,
    GroundTruth(usize),
    Explicit(usize),
}

/// Vanilla gradient saliency: |d logit_k / d pixel| summed over channels.
/// Model-agnostic: any differentiable target, no branching on model kind.
pub fn gradient_saliency<M: AttackTarget + ?Sized>(
    model: &M,
    image: &Tensor<f32>,
    wrt: SaliencyClass,
) -> Result<Tensor<f32>> {
    let (c, h, w) = model.geometry();
    let mut tape = Tape::new();
    let input = tape.leaf(image.clone().reshaped(vec![1, c, h, w])?, true)?;
    let logits = model.logits_graph(&mut tape, input)?;
    let k = match wrt {
        SaliencyClass::Predicted => argmax(tape.value(logits).data()),
        SaliencyClass::GroundTruth(k) | SaliencyClass::Explicit(k) => k,
    };
    let classes = tape.value(logits).shape()[1];
    if k >= classes {
        return Err(Error::invalid(format!("saliency class {k} out of range {classes}")));
    }
    let picked = tape.slice(logits, 1, k, 1)?;
    let scalar = tape.reshape(picked, vec![])?;
    tape.backward(scalar)?;
    let grad = tape.grad(input).expect("input gradient");
    let mut map = vec![0.0f32; h * w];
    for ci in 0..c {
        for (px, slot) in map.iter_mut().enumerate() {
            *slot += grad.data()[ci * h * w + px].abs();
        }
    }
    Tensor::new(vec![h, w], map)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PatchSaliency {
    /// The patch contains the global maximum of the map (ties count as
    /// hits when the maximal value occurs inside).
    pub max_hit: bool,
    /// Sum inside the patch over the sum of the whole map.
    pub sum_fraction: f64,
    /// All-zero map: sum_fraction fell back to the patch-area fraction.
    pub degenerate: bool,
}

/// The MAX and SUM patch scores of a saliency map.
pub fn saliency_patch_metrics(
    map: &Tensor<f32>,
    grid: &PatchGrid,
    patch_index: usize,
) -> Result<PatchSaliency> {
    let s = map.shape();
    if s.len() != 2 || s[0] != grid.h || s[1] != grid.w {
        return Err(Error::invalid(format!(
            "saliency map {s:?} does not match grid {}x{}",
            grid.h, grid.w
        )));
    }
    let (y0, x0) = grid.rect(patch_index)?;
    let p = grid.p;
    let total: f64 = map.data().iter().map(|&v| v as f64).sum();
    let mut inside_sum = 0.0f64;
    let mut inside_max = f32::NEG_INFINITY;
    for y in y0..y0 + p {
        for x in x0..x0 + p {
            let v = map.data()[y * grid.w + x];
            inside_sum += v as f64;
            inside_max = inside_max.max(v);
        }
    }
    if total == 0.0 {
        let area = (p * p) as f64 / (grid.h * grid.w) as f64;
        return Ok(PatchSaliency { max_hit: false, sum_fraction: area, degenerate: true });
    }
    let global_max = map.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    Ok(PatchSaliency {
        max_hit: inside_max == global_max,
        sum_fraction: inside_sum / total,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    /// 0.5*A + 0.5*I residual correction (the rollout convention).
    HalfIdentity,
    /// (A + I) with rows renormalized.
    AddIdentityRenorm,
}

/// Attention rollout: layer-wise product of residual-corrected,
/// head-averaged attention matrices, last layer applied last.
pub fn attention_rollout(record: &AttentionRecord, mode: RolloutMode) -> Result<Tensor<f64>> {
    let first = record
        .layers
        .first()
        .ok_or_else(|| Error::invalid("rollout: empty attention record"))?;
    let n = first.shape()[0];
    // validate stochasticity
    for (li, layer) in record.layers.iter().enumerate() {
        if layer.shape() != [n, n] {
            return Err(Error::invalid("rollout: inconsistent attention shapes"));
        }
        for (ri, row) in layer.data().chunks_exact(n).enumerate() {
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            if (sum - 1.0).abs() > 1e-4 || row.iter().any(|&v| v < -1e-6) {
                return Err(Error::Integrity(format!(
                    "attention layer {li} row {ri} is not stochastic (sum {sum})"
                )));
            }
        }
    }

    let corrected: Vec<Vec<f64>> = record
        .layers
        .iter()
        .map(|layer| {
            let mut m = vec![0.0f64; n * n];
            for i in 0..n {
                for j in 0..n {
                    let a = layer.data()[i * n + j] as f64;
                    m[i * n + j] = match mode {
                        RolloutMode::HalfIdentity => 0.5 * a + if i == j { 0.5 } else { 0.0 },
                        RolloutMode::AddIdentityRenorm => a + if i == j { 1.0 } else { 0.0 },
                    };
                }
                if mode == RolloutMode::AddIdentityRenorm {
                    let sum: f64 = m[i * n..(i + 1) * n].iter().sum();
                    for v in &mut m[i * n..(i + 1) * n] {
                        *v /= sum;
                    }
                }
            }
            m
        })
        .collect();

    // A_L . A_{L-1} . ... . A_1
    let mut rollout = corrected.last().unwrap().clone();
    for layer in corrected.iter().rev().skip(1) {
        let mut next = vec![0.0f64; n * n];
        for i in 0..n {
            for k in 0..n {
                let r = rollout[i * n + k];
                for j in 0..n {
                    next[i * n + j] += r * layer[k * n + j];
                }
            }
        }
        rollout = next;
    }
    Tensor::new(vec![n, n], rollout)
}

/// Class-token row of a rollout matrix (excluding its own entry),
/// renormalized and reshaped to the patch grid for rendering.
pub fn rollout_class_grid(rollout: &Tensor<f64>, grid: &PatchGrid) -> Result<Tensor<f64>> {
    let n = rollout.shape()[0];
    if n != grid.num_patches() + 1 {
        return Err(Error::invalid(format!(
            "rollout size {n} does not match grid with {} patches",
            grid.num_patches()
        )));
    }
    let row = &rollout.data()[1..n];
    let sum: f64 = row.iter().sum();
    let values: Vec<f64> = if sum > 0.0 {
        row.iter().map(|&v| v / sum).collect()
    } else {
        row.to_vec()
    };
    Tensor::new(vec![grid.rows(), grid.cols()], values)
}

/// Channel-mean of a CNN stage's activations, nearest-neighbor upsampled to
/// the input resolution and min-max scaled to [0,1].
pub fn feature_map_attention(
    cache: &ActivationCache,
    image_index: usize,
    stage: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<f32>> {
    let stages = match cache {
        ActivationCache::Stages(s) => s,
        _ => return Err(Error::invalid("feature_map_attention needs a cnn activation cache")),
    };
    let tensor = stages
        .get(stage)
        .ok_or_else(|| Error::invalid(format!("stage {stage} out of range (have {})", stages.len())))?;
    let s = tensor.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if image_index >= b {
        return Err(Error::invalid("image index out of batch range"));
    }
    let mut mean = vec![0.0f32; h * w];
    for ci in 0..c {
        let base = (image_index * c + ci) * h * w;
        for (px, slot) in mean.iter_mut().enumerate() {
            *slot += tensor.data()[base + px];
        }
    }
    for v in &mut mean {
        *v /= c as f32;
    }
    // nearest-neighbor upsample
    let mut up = vec![0.0f32; out_h * out_w];
    for y in 0..out_h {
        for x in 0..out_w {
            up[y * out_w + x] = mean[(y * h / out_h) * w + x * w / out_w];
        }
    }
    // min-max scale
    let lo = up.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = up.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if hi > lo {
        for v in &mut up {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        for v in &mut up {
            *v = 0.0;
        }
    }
    Tensor::new(vec![out_h, out_w], up)
}

// ---- deterministic image output ----

fn quantize(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        // degenerate constant map: midpoint gray
        return vec![128u8; values.len()];
    }
    values
        .iter()
        .map(|&v| {
            let t = (v - lo) / (hi - lo);
            (t * 255.0).floor().min(255.0) as u8
        })
        .collect()
}

/// 8-bit grayscale PGM (P5), min-max scaled with floor quantization;
/// a constant map renders as all-128. Byte-exact given identical inputs.
pub fn write_pgm(values: &Tensor<f64>, path: &Path) -> Result<()> {
    let s = values.shape();
    if s.len() != 2 {
        return Err(Error::invalid(format!("pgm wants a 2-D map, got {s:?}")));
    }
    if values.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("pgm: non-finite values"));
    }
    let (h, w) = (s[0], s[1]);
    let mut out = Vec::with_capacity(32 + h * w);
    write!(out, "P5\n{w} {h}\n255\n")?;
    out.extend(quantize(values.data()));
    atomic_write(path, &out)
}

/// PPM (P6) overlay: the map (min-max normalized) alpha-blends a pure red
/// layer over the image with weight 0.6 * map.
pub fn write_ppm_overlay(map: &Tensor<f64>, image: &Tensor<f32>, path: &Path) -> Result<()> {
    let ms = map.shape();
    let is = image.shape();
    if ms.len() != 2 || is.len() != 3 || is[0] != 3 || is[1] != ms[0] || is[2] != ms[1] {
        return Err(Error::invalid(format!(
            "overlay: map {ms:?} vs image {is:?} (need [3,H,W])"
        )));
    }
    let (h, w) = (ms[0], ms[1]);
    let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let norm = |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    let mut out = Vec::with_capacity(32 + 3 * h * w);
    write!(out, "P6\n{w} {h}\n255\n")?;
    for px in 0..h * w {
        let alpha = 0.6 * norm(map.data()[px]);
        let r = image.data()[px] as f64;
        let g = image.data()[h * w + px] as f64;
        let b = image.data()[2 * h * w + px] as f64;
        let blended = [r + alpha * (1.0 - r), g * (1.0 - alpha), b * (1.0 - alpha)];
        for v in blended {
            out.push((v.clamp(0.0, 1.0) * 255.0).floor().min(255.0) as u8);
        }
    }
    atomic_write(path, &out)
}

/// CSV with a header row; values are written as given.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Write-then-rename so partial files never appear at the target path.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "tmp.{}",
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
