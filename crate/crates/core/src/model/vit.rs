//! Micro vision transformer: learned patch projection, class token, learned
//! positional embeddings, pre-norm blocks, temperature-scaled attention.

use super::{
    linear, normalize_pixels, ActivationCache, GraphOptions, GraphOutput, Init, Model, ParamSpec,
    ViTSpec,
};
use crate::error::Result;
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub(crate) fn param_specs(spec: &ViTSpec) -> Vec<ParamSpec> {
    let d = spec.embed_dim;
    let n = spec.num_patches();
    let plen = spec.patch_size * spec.patch_size * spec.channels;
    let hidden = spec.mlp_ratio * d;
    // fan-in scaled weight init; desk-scale training has no warmup stage, so
    // attention needs non-degenerate logits from the start
    let std = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
    let emb_std = 0.02;
    let mut out = vec![
        p("embed.w", vec![plen, d], Init::Normal(std(plen))),
        p("embed.b", vec![d], Init::Zeros),
        p("cls", vec![d], Init::Normal(emb_std)),
        p("pos", vec![n + 1, d], Init::Normal(emb_std)),
    ];
    for i in 0..spec.depth {
        let b = |suffix: &str| format!("blk{i:02}.{suffix}");
        out.extend([
            p(&b("ln1.g"), vec![d], Init::Ones),
            p(&b("ln1.b"), vec![d], Init::Zeros),
            p(&b("attn.qkv.w"), vec![d, 3 * d], Init::Normal(std(d))),
            p(&b("attn.qkv.b"), vec![3 * d], Init::Zeros),
            p(&b("attn.proj.w"), vec![d, d], Init::Normal(std(d))),
            p(&b("attn.proj.b"), vec![d], Init::Zeros),
            p(&b("ln2.g"), vec![d], Init::Ones),
            p(&b("ln2.b"), vec![d], Init::Zeros),
            p(&b("mlp.fc1.w"), vec![d, hidden], Init::Normal(std(d))),
            p(&b("mlp.fc1.b"), vec![hidden], Init::Zeros),
            p(&b("mlp.fc2.w"), vec![hidden, d], Init::Normal(std(hidden))),
            p(&b("mlp.fc2.b"), vec![d], Init::Zeros),
        ]);
    }
    out.extend([
        p("head.ln.g", vec![d], Init::Ones),
        p("head.ln.b", vec![d], Init::Zeros),
        p("head.w", vec![d, spec.num_classes], Init::Normal(std(d))),
        p("head.b", vec![spec.num_classes], Init::Zeros),
    ]);
    out
}

fn p(name: &str, shape: Vec<usize>, init: Init) -> ParamSpec {
    ParamSpec { name: name.to_string(), shape, init }
}

pub(crate) fn forward<S: Scalar>(
    model: &Model<S>,
    spec: &ViTSpec,
    tape: &mut Tape<S>,
    input: Var,
    opts: &GraphOptions,
) -> Result<GraphOutput<S>> {
    let b = tape.value(input).shape()[0];
    let d = spec.embed_dim;
    let heads = spec.heads;
    let dh = d / heads;
    let seq = spec.seq_len();
    let n = spec.num_patches();
    let temperature = S::from_f64(opts.temperature_override.unwrap_or(spec.temperature));
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());

    let params = model.param_leaves(tape, opts.params_require_grad)?;
    let pv = |name: &str| params[name];

    let x = normalize_pixels(tape, input)?;
    let patches = tape.patchify(x, spec.patch_size)?;
    let flat = tape.reshape(patches, vec![b * n, spec.patch_size * spec.patch_size * spec.channels])?;
    let emb = linear(tape, flat, pv("embed.w"), pv("embed.b"))?;
    let emb = tape.reshape(emb, vec![b, n, d])?;

    let cls = tape.reshape(pv("cls"), vec![1, d])?;
    let cls = tape.tile_leading(cls, b)?; // [B, 1, D]
    let seq_x = tape.concat(&[cls, emb], 1)?; // [B, N+1, D]
    let mut xs = tape.add_bias(seq_x, pv("pos"))?;

    let mut attention_layers = opts.record_attention.then(Vec::new);
    let mut attention_heads = (opts.record_attention && opts.record_per_head).then(Vec::new);
    let mut cache = opts.cache_activations.then(|| vec![tape.value(xs).clone()]);

    for i in 0..spec.depth {
        let name = |suffix: &str| format!("blk{i:02}.{suffix}");

        // attention sublayer
        let normed = tape.layer_norm(xs, pv(&name("ln1.g")), pv(&name("ln1.b")))?;
        let flat = tape.reshape(normed, vec![b * seq, d])?;
        let qkv = linear(tape, flat, pv(&name("attn.qkv.w")), pv(&name("attn.qkv.b")))?;
        let qkv = tape.reshape(qkv, vec![b, seq, 3, heads, dh])?;
        let split = |which: usize, t: &mut Tape<S>| -> Result<Var> {
            let part = t.slice(qkv, 2, which, 1)?;
            let part = t.reshape(part, vec![b, seq, heads, dh])?;
            let part = t.permute(part, &[0, 2, 1, 3])?;
            t.reshape(part, vec![b * heads, seq, dh])
        };
        let q = split(0, tape)?;
        let k = split(1, tape)?;
        let v = split(2, tape)?;

        let kt = tape.permute(k, &[0, 2, 1])?; // [B*h, dh, S]
        let scores = tape.bmm(q, kt)?;
        let scores = tape.mul_scalar(scores, scale)?;
        let attn = tape.softmax_temperature(scores, temperature)?;

        if let Some(layers) = attention_layers.as_mut() {
            let (avg, per_head) = head_average(tape.value(attn), b, heads, seq);
            layers.push(avg);
            if let Some(hs) = attention_heads.as_mut() {
                hs.push(per_head);
            }
        }

        let ctx = tape.bmm(attn, v)?; // [B*h, S, dh]
        let ctx = tape.reshape(ctx, vec![b, heads, seq, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, vec![b * seq, d])?;
        let proj = linear(tape, ctx, pv(&name("attn.proj.w")), pv(&name("attn.proj.b")))?;
        let proj = tape.reshape(proj, vec![b, seq, d])?;
        xs = tape.add(xs, proj)?;

        // mlp sublayer
        let normed = tape.layer_norm(xs, pv(&name("ln2.g")), pv(&name("ln2.b")))?;
        let flat = tape.reshape(normed, vec![b * seq, d])?;
        let h1 = linear(tape, flat, pv(&name("mlp.fc1.w")), pv(&name("mlp.fc1.b")))?;
        let h1 = tape.gelu(h1)?;
        let h2 = linear(tape, h1, pv(&name("mlp.fc2.w")), pv(&name("mlp.fc2.b")))?;
        let h2 = tape.reshape(h2, vec![b, seq, d])?;
        xs = tape.add(xs, h2)?;

        if let Some(cache) = cache.as_mut() {
            cache.push(tape.value(xs).clone());
        }
    }

    // class-token embedding of the last block feeds the classifier head
    let normed = tape.layer_norm(xs, pv("head.ln.g"), pv("head.ln.b"))?;
    let cls_tok = tape.slice(normed, 1, 0, 1)?;
    let cls_tok = tape.reshape(cls_tok, vec![b, d])?;
    let logits = linear(tape, cls_tok, pv("head.w"), pv("head.b"))?;

    Ok(GraphOutput {
        logits,
        attention_layers,
        attention_heads,
        activations: cache.map(ActivationCache::Tokens),
        params,
    })
}

/// Head-averaged `[B, S, S]` plus per-head `[B, h, S, S]` copies of one
/// layer's attention, detached from the tape.
fn head_average<S: Scalar>(
    attn: &Tensor<S>,
    b: usize,
    heads: usize,
    seq: usize,
) -> (Tensor<S>, Tensor<S>) {
    let data = attn.data();
    let mut avg = vec![S::ZERO; b * seq * seq];
    let inv = S::ONE / S::from_f64(heads as f64);
    for bi in 0..b {
        for hi in 0..heads {
            let src = (bi * heads + hi) * seq * seq;
            let dst = bi * seq * seq;
            for j in 0..seq * seq {
                avg[dst + j] += data[src + j] * inv;
            }
        }
    }
    let avg = Tensor::new(vec![b, seq, seq], avg).expect("attention shape");
    let per_head = Tensor::new(vec![b, heads, seq, seq], data.to_vec()).expect("attention shape");
    (avg, per_head)
}
