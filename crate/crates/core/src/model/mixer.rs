//! Micro MLP-Mixer: the attention-free control. Same patch geometry as the
//! micro ViT; token-mixing and channel-mixing MLPs instead of self-attention.

use super::{
    linear, normalize_pixels, ActivationCache, GraphOptions, GraphOutput, Init, MixerSpec, Model,
    ParamSpec,
};
use crate::error::Result;
use crate::tensor::{Scalar, Tape, Var};

pub(crate) fn param_specs(spec: &MixerSpec) -> Vec<ParamSpec> {
    let d = spec.embed_dim;
    let n = spec.num_patches();
    let plen = spec.patch_size * spec.patch_size * spec.channels;
    let (t, c) = (spec.token_mlp_dim, spec.channel_mlp_dim);
    let std = 0.02;
    let mut out = vec![
        p("embed.w", vec![plen, d], Init::Normal(std)),
        p("embed.b", vec![d], Init::Zeros),
    ];
    for i in 0..spec.depth {
        let b = |suffix: &str| format!("blk{i:02}.{suffix}");
        out.extend([
            p(&b("ln1.g"), vec![d], Init::Ones),
            p(&b("ln1.b"), vec![d], Init::Zeros),
            p(&b("tok.fc1.w"), vec![n, t], Init::Normal(std)),
            p(&b("tok.fc1.b"), vec![t], Init::Zeros),
            p(&b("tok.fc2.w"), vec![t, n], Init::Normal(std)),
            p(&b("tok.fc2.b"), vec![n], Init::Zeros),
            p(&b("ln2.g"), vec![d], Init::Ones),
            p(&b("ln2.b"), vec![d], Init::Zeros),
            p(&b("ch.fc1.w"), vec![d, c], Init::Normal(std)),
            p(&b("ch.fc1.b"), vec![c], Init::Zeros),
            p(&b("ch.fc2.w"), vec![c, d], Init::Normal(std)),
            p(&b("ch.fc2.b"), vec![d], Init::Zeros),
        ]);
    }
    out.extend([
        p("head.ln.g", vec![d], Init::Ones),
        p("head.ln.b", vec![d], Init::Zeros),
        p("head.w", vec![d, spec.num_classes], Init::Normal(std)),
        p("head.b", vec![spec.num_classes], Init::Zeros),
    ]);
    out
}

fn p(name: &str, shape: Vec<usize>, init: Init) -> ParamSpec {
    ParamSpec { name: name.to_string(), shape, init }
}

pub(crate) fn forward<S: Scalar>(
    model: &Model<S>,
    spec: &MixerSpec,
    tape: &mut Tape<S>,
    input: Var,
    opts: &GraphOptions,
) -> Result<GraphOutput<S>> {
    let b = tape.value(input).shape()[0];
    let d = spec.embed_dim;
    let n = spec.num_patches();
    let params = model.param_leaves(tape, opts.params_require_grad)?;
    let pv = |name: &str| params[name];

    let x = normalize_pixels(tape, input)?;
    let patches = tape.patchify(x, spec.patch_size)?;
    let flat = tape.reshape(patches, vec![b * n, spec.patch_size * spec.patch_size * spec.channels])?;
    let emb = linear(tape, flat, pv("embed.w"), pv("embed.b"))?;
    let mut xs = tape.reshape(emb, vec![b, n, d])?;

    let mut cache = opts.cache_activations.then(|| vec![tape.value(xs).clone()]);

    for i in 0..spec.depth {
        let name = |suffix: &str| format!("blk{i:02}.{suffix}");

        // token mixing: mlp across the patch axis
        let normed = tape.layer_norm(xs, pv(&name("ln1.g")), pv(&name("ln1.b")))?;
        let t = tape.permute(normed, &[0, 2, 1])?; // [B, D, N]
        let t = tape.reshape(t, vec![b * d, n])?;
        let h = linear(tape, t, pv(&name("tok.fc1.w")), pv(&name("tok.fc1.b")))?;
        let h = tape.gelu(h)?;
        let h = linear(tape, h, pv(&name("tok.fc2.w")), pv(&name("tok.fc2.b")))?;
        let h = tape.reshape(h, vec![b, d, n])?;
        let h = tape.permute(h, &[0, 2, 1])?;
        xs = tape.add(xs, h)?;

        // channel mixing: mlp across the embedding axis
        let normed = tape.layer_norm(xs, pv(&name("ln2.g")), pv(&name("ln2.b")))?;
        let t = tape.reshape(normed, vec![b * n, d])?;
        let h = linear(tape, t, pv(&name("ch.fc1.w")), pv(&name("ch.fc1.b")))?;
        let h = tape.gelu(h)?;
        let h = linear(tape, h, pv(&name("ch.fc2.w")), pv(&name("ch.fc2.b")))?;
        let h = tape.reshape(h, vec![b, n, d])?;
        xs = tape.add(xs, h)?;

        if let Some(cache) = cache.as_mut() {
            cache.push(tape.value(xs).clone());
        }
    }

    let normed = tape.layer_norm(xs, pv("head.ln.g"), pv("head.ln.b"))?;
    let pooled = tape.mean_axis(normed, 1)?; // [B, D]
    let logits = linear(tape, pooled, pv("head.w"), pv("head.b"))?;

    Ok(GraphOutput {
        logits,
        attention_layers: None,
        attention_heads: None,
        activations: cache.map(ActivationCache::Tokens),
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ForwardOptions, ModelSpec};
    use crate::tensor::Tensor;

    #[test]
    fn forward_shape_and_no_attention() {
        let model = Model::init(ModelSpec::micro_mixer(10), 0).unwrap();
        let batch = Tensor::filled(vec![2, 3, 32, 32], 0.4);
        let out = model
            .forward(
                &batch,
                &ForwardOptions {
                    record_attention: true,
                    temperature_override: Some(4.0),
                    ..Default::default()
                },
            )
            .unwrap();
        assert_eq!(out.logits.shape(), &[2, 10]);
        assert!(out.attention.is_none(), "mixer has no attention to record");
    }
}
