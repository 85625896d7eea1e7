//! Property tests for the algebraic invariants of the tensor and model
//! layers.

use proptest::prelude::*;

use patchprobe_core::data::{synth_shapes, SynthSpec};
use patchprobe_core::model::{ForwardOptions, Model, ModelSpec, ViTSpec};
use patchprobe_core::tensor::{Tape, Tensor};

fn tiny_vit_spec() -> ModelSpec {
    ModelSpec::Vit(ViTSpec {
        image_size: 8,
        channels: 3,
        patch_size: 4,
        embed_dim: 16,
        heads: 2,
        depth: 2,
        mlp_ratio: 2,
        num_classes: 4,
        temperature: 1.0,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_temperature_scaling_identity(
        logits in proptest::collection::vec(-6.0f64..6.0, 2..24),
        t in 0.2f64..16.0,
    ) {
        let n = logits.len();
        // softmax(z, T)
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::new(vec![n], logits.clone()).unwrap(), false).unwrap();
        let a = tape.softmax_temperature(z, t).unwrap();
        let a = tape.value(a).clone();
        // softmax(z / T, 1)
        let mut tape = Tape::<f64>::new();
        let scaled: Vec<f64> = logits.iter().map(|v| v / t).collect();
        let z = tape.leaf(Tensor::new(vec![n], scaled).unwrap(), false).unwrap();
        let b = tape.softmax_temperature(z, 1.0).unwrap();
        let b = tape.value(b).clone();

        let mut sum = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-6, "{x} vs {y}");
            prop_assert!((0.0..=1.0).contains(x));
            sum += x;
        }
        prop_assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
    }

    #[test]
    fn reshape_transpose_roundtrips_are_exact(
        rows in 1usize..6,
        cols in 1usize..6,
        seed in 0u64..1000,
    ) {
        let t = random_tensor(&[rows, cols], seed);
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(t.clone(), false).unwrap();
        let tr = tape.permute(v, &[1, 0]).unwrap();
        let back = tape.permute(tr, &[1, 0]).unwrap();
        prop_assert_eq!(tape.value(back).data(), t.data());
        let flat = tape.reshape(v, vec![rows * cols]).unwrap();
        let reshaped = tape.reshape(flat, vec![rows, cols]).unwrap();
        prop_assert_eq!(tape.value(reshaped).data(), t.data());
    }

    #[test]
    fn reductions_match_naive_loop_oracle(
        rows in 1usize..5,
        cols in 1usize..5,
        seed in 0u64..1000,
    ) {
        let t = random_tensor(&[rows, cols], seed);
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(t.clone(), false).unwrap();
        let total = tape.sum_all(v).unwrap();
        let mut oracle = 0.0f64;
        for &x in t.data() {
            oracle += x;
        }
        prop_assert_eq!(tape.value(total).item(), oracle, "sequential sums must agree exactly");

        let per_col = tape.sum_axis(v, 0).unwrap();
        for c in 0..cols {
            let mut acc = 0.0f64;
            for r in 0..rows {
                acc += t.data()[r * cols + c];
            }
            prop_assert_eq!(tape.value(per_col).data()[c], acc);
        }

        let mean = tape.mean_all(v).unwrap();
        prop_assert_eq!(tape.value(mean).item(), oracle / (rows * cols) as f64);
    }

    #[test]
    fn backward_is_linear_over_graph_sums(
        n in 2usize..10,
        seed in 0u64..1000,
    ) {
        let x = random_tensor(&[n], seed);

        // separate backwards
        let grad_f = {
            let mut tape = Tape::<f64>::new();
            let v = tape.leaf(x.clone(), true).unwrap();
            let sq = tape.mul(v, v).unwrap();
            let loss = tape.sum_all(sq).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(v).unwrap()
        };
        let grad_g = {
            let mut tape = Tape::<f64>::new();
            let v = tape.leaf(x.clone(), true).unwrap();
            let r = tape.relu(v).unwrap();
            let loss = tape.sum_all(r).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(v).unwrap()
        };
        // combined graph
        let grad_sum = {
            let mut tape = Tape::<f64>::new();
            let v = tape.leaf(x.clone(), true).unwrap();
            let sq = tape.mul(v, v).unwrap();
            let f = tape.sum_all(sq).unwrap();
            let r = tape.relu(v).unwrap();
            let g = tape.sum_all(r).unwrap();
            let loss = tape.add(f, g).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(v).unwrap()
        };
        for i in 0..n {
            let expected = grad_f.data()[i] + grad_g.data()[i];
            prop_assert!((grad_sum.data()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_probability_vectors_for_any_temperature(
        t in 0.05f64..64.0,
        img_seed in 0u64..50,
    ) {
        let model = Model::init(tiny_vit_spec(), 0).unwrap();
        let data = synth_shapes(1, img_seed, &SynthSpec { height: 8, width: 8 });
        let out = model
            .forward(
                &data.images,
                &ForwardOptions {
                    record_attention: true,
                    temperature_override: Some(t),
                    ..Default::default()
                },
            )
            .unwrap();
        let record = &out.attention.unwrap()[0];
        for layer in &record.layers {
            let n = layer.shape()[0];
            for row in layer.data().chunks_exact(n) {
                let sum: f32 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-5, "row sum {sum} at T {t}");
                prop_assert!(row.iter().all(|&v| (0.0..=1.0 + 1e-6).contains(&v)));
            }
        }
    }
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = patchprobe_core::rng::rng_from(&[0xabcd, seed]);
    let numel = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..numel).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect(),
    )
    .unwrap()
}

/// Content-equivariance of the patch aggregation: swapping two input
/// patches together with their positional embeddings swaps the two layer-1
/// patch embeddings.
#[test]
fn patch_permutation_equivariance_at_layer_one() {
    let spec = ModelSpec::Vit(ViTSpec {
        image_size: 8,
        channels: 3,
        patch_size: 4,
        embed_dim: 16,
        heads: 2,
        depth: 1,
        mlp_ratio: 2,
        num_classes: 4,
        temperature: 1.0,
    });
    let mut model = Model::init(spec, 3).unwrap();
    let data = synth_shapes(1, 5, &SynthSpec { height: 8, width: 8 });
    let image = data.image(0).unwrap();

    let run = |model: &Model<f32>, image: &Tensor<f32>| -> Vec<f32> {
        let batch = image.clone().reshaped(vec![1, 3, 8, 8]).unwrap();
        let out = model
            .forward(&batch, &ForwardOptions { cache_activations: true, ..Default::default() })
            .unwrap();
        match out.activations.unwrap() {
            patchprobe_core::model::ActivationCache::Tokens(layers) => {
                layers[1].data().to_vec()
            }
            _ => unreachable!(),
        }
    };

    let baseline = run(&model, &image);

    // swap patches 1 and 2 (both content and positional embedding)
    let (swap_a, swap_b) = (1usize, 2usize);
    let mut swapped = image.clone();
    let grid = patchprobe_core::data::PatchGrid::new(8, 8, 4).unwrap();
    let (ya, xa) = grid.rect(swap_a).unwrap();
    let (yb, xb) = grid.rect(swap_b).unwrap();
    for c in 0..3 {
        for py in 0..4 {
            for px in 0..4 {
                let ia = c * 64 + (ya + py) * 8 + xa + px;
                let ib = c * 64 + (yb + py) * 8 + xb + px;
                swapped.data_mut().swap(ia, ib);
            }
        }
    }
    let pos = model.param("pos").clone();
    let d = 16;
    {
        let p = model.param_mut("pos");
        for j in 0..d {
            // token index = patch index + 1 (class token first)
            p.data_mut().swap((swap_a + 1) * d + j, (swap_b + 1) * d + j);
        }
    }
    let permuted = run(&model, &swapped);
    // restore for clarity
    *model.param_mut("pos") = pos;

    // token embeddings: class token unchanged, swapped patches exchanged,
    // every other token unchanged
    let seq = 5usize;
    for tok in 0..seq {
        let src_tok = match tok {
            t if t == swap_a + 1 => swap_b + 1,
            t if t == swap_b + 1 => swap_a + 1,
            t => t,
        };
        for j in 0..d {
            let got = permuted[tok * d + j];
            let expected = baseline[src_tok * d + j];
            assert!(
                (got - expected).abs() < 1e-5,
                "token {tok} dim {j}: {got} vs {expected}"
            );
        }
    }
}

/// Dividing the pre-softmax attention scores by T (via the query weights)
/// at temperature 1 matches running the unmodified model at temperature T.
#[test]
fn temperature_equals_scaled_scores() {
    let spec = tiny_vit_spec();
    let model = Model::init(spec, 1).unwrap();
    let t = 3.5f64;
    let data = synth_shapes(2, 8, &SynthSpec { height: 8, width: 8 });

    let out_t = model
        .forward(
            &data.images,
            &ForwardOptions { temperature_override: Some(t), ..Default::default() },
        )
        .unwrap();

    // scale the query projection (first embed_dim columns of qkv) by 1/T:
    // scores are bilinear in q, so this divides every Z by T
    let mut scaled = model.clone();
    let d = 16usize;
    for blk in 0..2 {
        let name = format!("blk{blk:02}.attn.qkv.w");
        let w = scaled.param_mut(&name);
        for row in 0..d {
            for col in 0..d {
                w.data_mut()[row * 3 * d + col] /= t as f32;
            }
        }
        let name = format!("blk{blk:02}.attn.qkv.b");
        let b = scaled.param_mut(&name);
        for col in 0..d {
            b.data_mut()[col] /= t as f32;
        }
    }
    let out_scaled = scaled
        .forward(
            &data.images,
            &ForwardOptions { temperature_override: Some(1.0), ..Default::default() },
        )
        .unwrap();

    for (a, b) in out_t.logits.data().iter().zip(out_scaled.logits.data()) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}
