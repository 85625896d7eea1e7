//! Micro residual CNN: conv stem, three stages of residual blocks with
//! per-position channel layer norm, global average pooling. Convolution is
//! im2col followed by the shared matmul kernel.

use super::{
    linear, normalize_pixels, ActivationCache, CnnSpec, GraphOptions, GraphOutput, Init, Model,
    ParamSpec,
};
use crate::error::Result;
use crate::tensor::{Scalar, Tape, Var};

fn he(fan_in: usize) -> Init {
    Init::Normal((2.0 / fan_in as f64).sqrt())
}

pub(crate) fn param_specs(spec: &CnnSpec) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let w0 = spec.stage_widths[0];
    let stem_in = spec.channels * 9;
    out.extend([
        p("stem.conv.w", vec![stem_in, w0], he(stem_in)),
        p("stem.conv.b", vec![w0], Init::Zeros),
    ]);
    let mut cin = w0;
    for (si, &width) in spec.stage_widths.iter().enumerate() {
        for bi in 0..spec.blocks_per_stage {
            let name = |suffix: &str| format!("s{si}.b{bi}.{suffix}");
            let block_in = if bi == 0 { cin } else { width };
            out.extend([
                p(&name("conv1.w"), vec![block_in * 9, width], he(block_in * 9)),
                p(&name("conv1.b"), vec![width], Init::Zeros),
                p(&name("conv2.w"), vec![width * 9, width], he(width * 9)),
                p(&name("conv2.b"), vec![width], Init::Zeros),
            ]);
            // shortcut projection whenever dims change (first block of a
            // stage after the first: stride 2 and/or width change)
            if bi == 0 && (block_in != width || si > 0) {
                out.extend([
                    p(&name("short.w"), vec![block_in, width], he(block_in)),
                    p(&name("short.b"), vec![width], Init::Zeros),
                ]);
            }
        }
        cin = width;
    }
    out.extend([
        p("head.w", vec![cin, spec.num_classes], Init::Normal(0.02)),
        p("head.b", vec![spec.num_classes], Init::Zeros),
    ]);
    out
}

fn p(name: &str, shape: Vec<usize>, init: Init) -> ParamSpec {
    ParamSpec { name: name.to_string(), shape, init }
}

/// conv as im2col + matmul; weight layout is [Cin*k*k, Cout].
fn conv2d<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    w: Var,
    b: Var,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let (bsz, h, win) = (shape[0], shape[2], shape[3]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (win + 2 * pad - k) / stride + 1;
    let cout = tape.value(w).shape()[1];
    let col = tape.im2col(x, k, stride, pad)?;
    let y = linear(tape, col, w, b)?;
    let y = tape.reshape(y, vec![bsz, ho, wo, cout])?;
    tape.permute(y, &[0, 3, 1, 2])
}

pub(crate) fn forward<S: Scalar>(
    model: &Model<S>,
    spec: &CnnSpec,
    tape: &mut Tape<S>,
    input: Var,
    opts: &GraphOptions,
) -> Result<GraphOutput<S>> {
    let b = tape.value(input).shape()[0];
    let params = model.param_leaves(tape, opts.params_require_grad)?;
    let pv = |name: &str| params[name];

    let x = normalize_pixels(tape, input)?;
    let mut xs = conv2d(tape, x, pv("stem.conv.w"), pv("stem.conv.b"), 3, 1, 1)?;
    xs = tape.relu(xs)?;

    let mut cache = opts.cache_activations.then(Vec::new);
    let mut cin = spec.stage_widths[0];
    for (si, &width) in spec.stage_widths.iter().enumerate() {
        for bi in 0..spec.blocks_per_stage {
            let name = |suffix: &str| format!("s{si}.b{bi}.{suffix}");
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            let block_in = if bi == 0 { cin } else { width };

            let mut h = conv2d(tape, xs, pv(&name("conv1.w")), pv(&name("conv1.b")), 3, stride, 1)?;
            h = tape.relu(h)?;
            h = conv2d(tape, h, pv(&name("conv2.w")), pv(&name("conv2.b")), 3, 1, 1)?;

            let shortcut = if bi == 0 && (block_in != width || si > 0) {
                conv2d(tape, xs, pv(&name("short.w")), pv(&name("short.b")), 1, stride, 0)?
            } else {
                xs
            };
            let sum = tape.add(h, shortcut)?;
            xs = tape.relu(sum)?;
        }
        cin = width;
        if let Some(cache) = cache.as_mut() {
            cache.push(tape.value(xs).clone());
        }
    }

    let spatial = spec.final_spatial();
    let pooled = tape.avg_pool2d(xs, spatial, spatial)?;
    let flat = tape.reshape(pooled, vec![b, cin])?;
    let logits = linear(tape, flat, pv("head.w"), pv("head.b"))?;

    Ok(GraphOutput {
        logits,
        attention_layers: None,
        attention_heads: None,
        activations: cache.map(ActivationCache::Stages),
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ForwardOptions, ModelSpec};
    use crate::tensor::Tensor;

    #[test]
    fn forward_shapes_and_stage_cache() {
        let model = Model::init(ModelSpec::micro_cnn(10), 0).unwrap();
        let batch = Tensor::filled(vec![2, 3, 32, 32], 0.5);
        let out = model
            .forward(&batch, &ForwardOptions { cache_activations: true, ..Default::default() })
            .unwrap();
        assert_eq!(out.logits.shape(), &[2, 10]);
        match out.activations.unwrap() {
            ActivationCache::Stages(stages) => {
                assert_eq!(stages.len(), 3);
                assert_eq!(stages[0].shape(), &[2, 16, 32, 32]);
                assert_eq!(stages[1].shape(), &[2, 32, 16, 16]);
                assert_eq!(stages[2].shape(), &[2, 64, 8, 8]);
            }
            _ => panic!("cnn must cache stages"),
        }
    }

    #[test]
    fn ignores_temperature_and_attention_flags() {
        let model = Model::init(ModelSpec::micro_cnn(4), 0).unwrap();
        let batch = Tensor::filled(vec![1, 3, 32, 32], 0.25);
        let out = model
            .forward(
                &batch,
                &ForwardOptions {
                    record_attention: true,
                    temperature_override: Some(8.0),
                    ..Default::default()
                },
            )
            .unwrap();
        assert!(out.attention.is_none());
        let base = model.forward(&batch, &ForwardOptions::default()).unwrap();
        assert_eq!(out.logits.data(), base.logits.data());
    }
}
