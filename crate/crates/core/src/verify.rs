//! Gradient verification battery: every differentiable kernel against
//! central finite differences, plus end-to-end checks through each model
//! family. Runs at f64.

use rand::Rng;

use crate::error::Result;
use crate::model::{CnnSpec, MixerSpec, Model, ModelSpec, ViTSpec};
use crate::rng::rng_from;
use crate::tensor::{grad_check, GradCheckReport, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn random_tensor(shape: &[usize], key: u64) -> Tensor<f64> {
    let mut rng = rng_from(&[0xfeed, key]);
    let numel = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..numel).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
    )
    .expect("shape")
}

/// Scalarizes an op output as a fixed random-weighted sum so every output
/// coordinate contributes to the checked gradient.
fn weighted_sum(tape: &mut Tape<f64>, v: Var, key: u64) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let w = tape.leaf(random_tensor(&shape, key ^ 0x77), false)?;
    let prod = tape.mul(v, w)?;
    tape.sum_all(prod)
}

fn check<F>(name: &str, x: &Tensor<f64>, tol: f64, h: f64, f: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let report: GradCheckReport = grad_check(f, x, h, tol)?;
    Ok(CheckOutcome { name: name.to_string(), max_rel_err: report.max_rel_err, pass: report.pass })
}

/// Five seeded shapes per kernel; returns one outcome per (kernel, shape).
pub fn kernel_checks(tol: f64, h: f64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let shapes2d: [[usize; 2]; 5] = [[2, 3], [3, 4], [4, 4], [1, 7], [5, 2]];

    for (si, shape) in shapes2d.iter().enumerate() {
        let key = si as u64;
        let x = random_tensor(shape, key);
        let like = |k: u64| random_tensor(shape, k + 1000);

        out.push(check(&format!("add/{si}"), &x, tol, h, {
            let other = like(key);
            move |t, v| {
                let o = t.leaf(other.clone(), false)?;
                let y = t.add(v, o)?;
                weighted_sum(t, y, key)
            }
        })?);
        out.push(check(&format!("sub/{si}"), &x, tol, h, {
            let other = like(key + 7);
            move |t, v| {
                let o = t.leaf(other.clone(), false)?;
                let y = t.sub(o, v)?;
                weighted_sum(t, y, key)
            }
        })?);
        out.push(check(&format!("mul/{si}"), &x, tol, h, {
            let other = like(key + 13);
            move |t, v| {
                let o = t.leaf(other.clone(), false)?;
                let y = t.mul(v, o)?;
                weighted_sum(t, y, key)
            }
        })?);
        out.push(check(&format!("scalar_ops/{si}"), &x, tol, h, move |t, v| {
            let y = t.add_scalar(v, 0.37)?;
            let y = t.mul_scalar(y, -1.21)?;
            weighted_sum(t, y, key)
        })?);
        out.push(check(&format!("relu/{si}"), &x, tol, h, move |t, v| {
            let y = t.relu(v)?;
            weighted_sum(t, y, key)
        })?);
        out.push(check(&format!("gelu/{si}"), &x, tol, h, move |t, v| {
            let y = t.gelu(v)?;
            weighted_sum(t, y, key)
        })?);
        out.push(check(&format!("softmax_temperature/{si}"), &x, tol, h, move |t, v| {
            let y = t.softmax_temperature(v, 1.7)?;
            weighted_sum(t, y, key)
        })?);
        out.push(check(&format!("layer_norm/{si}"), &x, tol, h, {
            let d = shape[1];
            let gamma = random_tensor(&[d], key + 21);
            let beta = random_tensor(&[d], key + 22);
            move |t, v| {
                let g = t.leaf(gamma.clone(), false)?;
                let b = t.leaf(beta.clone(), false)?;
                let y = t.layer_norm(v, g, b)?;
                weighted_sum(t, y, key)
            }
        })?);
        out.push(check(&format!("layer_norm_scale_shift/{si}"), &random_tensor(&[shape[1]], key + 23), tol, h, {
            let xfix = x.clone();
            let beta = random_tensor(&[shape[1]], key + 24);
            move |t, v| {
                let xv = t.leaf(xfix.clone(), false)?;
                let b = t.leaf(beta.clone(), false)?;
                let y = t.layer_norm(xv, v, b)?;
                weighted_sum(t, y, key)
            }
        })?);
        out.push(check(&format!("reductions/{si}"), &x, tol, h, move |t, v| {
            let s0 = t.sum_axis(v, 0)?;
            let s0 = weighted_sum(t, s0, key + 2)?;
            let m1 = t.mean_axis(v, 1)?;
            let m1 = weighted_sum(t, m1, key + 3)?;
            let all = t.mean_all(v)?;
            let partial = t.add(s0, m1)?;
            t.add(partial, all)
        })?);
        out.push(check(&format!("matmul_lhs/{si}"), &x, tol, h, {
            let rhs = random_tensor(&[shape[1], 3], key + 31);
            move |t, v| {
                let r = t.leaf(rhs.clone(), false)?;
                let y = t.matmul(v, r)?;
                weighted_sum(t, y, key)
            }
        })?);
        out.push(check(&format!("matmul_rhs/{si}"), &x, tol, h, {
            let lhs = random_tensor(&[3, shape[0]], key + 32);
            move |t, v| {
                let l = t.leaf(lhs.clone(), false)?;
                let y = t.matmul(l, v)?;
                weighted_sum(t, y, key)
            }
        })?);
        out.push(check(&format!("transpose_reshape_slice_concat/{si}"), &x, tol, h, move |t, v| {
            let tr = t.permute(v, &[1, 0])?;
            let half = t.slice(tr, 0, 0, 1)?;
            let joined = t.concat(&[half, tr], 0)?;
            let flat = t.reshape(joined, vec![joined_len(shape)])?;
            weighted_sum(t, flat, key)
        })?);
        out.push(check(&format!("cross_entropy/{si}"), &x, tol, h, {
            let labels: Vec<usize> = (0..shape[0]).map(|i| i % shape[1]).collect();
            move |t, v| t.cross_entropy(v, &labels)
        })?);
        out.push(check(&format!("add_bias/{si}"), &x, tol, h, {
            let bias = random_tensor(&[shape[1]], key + 41);
            move |t, v| {
                let b = t.leaf(bias.clone(), false)?;
                let y = t.add_bias(v, b)?;
                weighted_sum(t, y, key)
            }
        })?);
        out.push(check(&format!("tile_leading/{si}"), &x, tol, h, move |t, v| {
            let y = t.tile_leading(v, 3)?;
            weighted_sum(t, y, key)
        })?);
    }

    // spatial kernels on [B,C,H,W] shapes
    let shapes4d: [[usize; 4]; 5] =
        [[1, 1, 4, 4], [2, 2, 4, 4], [1, 3, 6, 6], [2, 1, 5, 5], [1, 2, 8, 8]];
    for (si, shape) in shapes4d.iter().enumerate() {
        let key = 100 + si as u64;
        let x = random_tensor(shape, key);
        out.push(check(&format!("bmm/{si}"), &random_tensor(&[3, 4, 2], key + 1), tol, h, {
            let rhs = random_tensor(&[3, 2, 5], key + 2);
            move |t, v| {
                let r = t.leaf(rhs.clone(), false)?;
                let y = t.bmm(v, r)?;
                weighted_sum(t, y, key)
            }
        })?);
        out.push(check(&format!("im2col_conv/{si}"), &x, tol, h, {
            let cols = shape[1] * 9;
            let w = random_tensor(&[cols, 3], key + 5);
            move |t, v| {
                let col = t.im2col(v, 3, 1, 1)?;
                let wv = t.leaf(w.clone(), false)?;
                let y = t.matmul(col, wv)?;
                weighted_sum(t, y, key)
            }
        })?);
        out.push(check(&format!("avg_pool2d/{si}"), &x, tol, h, move |t, v| {
            let y = t.avg_pool2d(v, 2, 2)?;
            weighted_sum(t, y, key)
        })?);
        out.push(check(&format!("patchify/{si}"), &x, tol, h, {
            let p = if shape[2] % 2 == 0 { 2 } else { 1 };
            move |t, v| {
                let y = t.patchify(v, p)?;
                weighted_sum(t, y, key)
            }
        })?);
    }

    Ok(out)
}

fn joined_len(shape: &[usize; 2]) -> usize {
    (shape[1] + 1) * shape[0]
}

/// End-to-end d(cross-entropy)/d(input pixels) for a 2-block micro-ViT, a
/// one-stage micro-CNN, and a one-block micro-Mixer, all at f64.
pub fn model_end_to_end_checks(tol: f64, h: f64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();

    let vit = ModelSpec::Vit(ViTSpec {
        image_size: 8,
        channels: 3,
        patch_size: 4,
        embed_dim: 16,
        heads: 2,
        depth: 2,
        mlp_ratio: 2,
        num_classes: 4,
        temperature: 1.0,
    });
    let cnn = ModelSpec::Cnn(CnnSpec {
        image_size: 8,
        channels: 3,
        stage_widths: vec![8],
        blocks_per_stage: 1,
        num_classes: 4,
    });
    let mixer = ModelSpec::Mixer(MixerSpec {
        image_size: 8,
        channels: 3,
        patch_size: 4,
        embed_dim: 16,
        token_mlp_dim: 8,
        channel_mlp_dim: 32,
        depth: 1,
        num_classes: 4,
    });

    for (name, spec) in [("vit", vit), ("cnn", cnn), ("mixer", mixer)] {
        let model = Model::init(spec, 0xe2e)?.cast::<f64>();
        let mut rng = rng_from(&[0xe2e, 7]);
        let pixels: Vec<f64> = (0..3 * 8 * 8).map(|_| rng.gen::<f64>()).collect();
        let x = Tensor::new(vec![1, 3, 8, 8], pixels)?;
        let outcome = check(&format!("end_to_end/{name}"), &x, tol, h, move |t, v| {
            let logits = model.logits_graph(t, v, None)?;
            t.cross_entropy(logits, &[1])
        })?;
        out.push(outcome);
    }
    Ok(out)
}

/// The full battery: kernels plus end-to-end model checks.
pub fn full_grad_check(tol: f64, h: f64) -> Result<Vec<CheckOutcome>> {
    let mut out = kernel_checks(tol, h)?;
    out.extend(model_end_to_end_checks(tol, h)?);
    Ok(out)
}
