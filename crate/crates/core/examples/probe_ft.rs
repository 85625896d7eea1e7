// scratch: fine-tune-at-T accuracy recovery
use patchprobe_core::attack::*;
use patchprobe_core::data::{argmax, select_correct, synth_shapes, SynthSpec};
use patchprobe_core::model::{ForwardOptions, ModelSpec};
use patchprobe_core::train::{continue_training, train_model, TrainConfig};

fn main() {
    let train = synth_shapes(4096, 1, &SynthSpec::default());
    let eval = synth_shapes(600, 9001, &SynthSpec::default());
    let grid = patchprobe_core::data::PatchGrid::new(32, 32, 4).unwrap();
    let acc_at = |model: &patchprobe_core::model::Model<f32>, t: f64| -> f64 {
        let all: Vec<usize> = (0..eval.len()).collect();
        let mut correct = 0;
        for chunk in all.chunks(64) {
            let (images, labels) = eval.batch(chunk).unwrap();
            let out = model.forward(&images, &ForwardOptions { temperature_override: Some(t), ..Default::default() }).unwrap();
            for (row, &l) in out.logits.data().chunks_exact(4).zip(&labels) {
                if argmax(row) == l { correct += 1; }
            }
        }
        correct as f64 / eval.len() as f64
    };

    let base_cfg = TrainConfig { epochs: 10, seed: 0, ..TrainConfig::default() };
    let (base, _) = train_model(&ModelSpec::micro_vit(4), &train, Some(&eval), &base_cfg).unwrap();
    println!("base acc {:.3}", acc_at(&base, 1.0));

    for t in [1.0f64, 2.0, 4.0, 8.0] {
        let ft_cfg = TrainConfig { epochs: 4, seed: 100, temperature: t, lr: 5e-4, ..TrainConfig::default() };
        let t0 = std::time::Instant::now();
        let (model_t, _) = continue_training(base.clone(), &train, Some(&eval), &ft_cfg).unwrap();
        let acc = acc_at(&model_t, t);
        let es = select_correct(&[("v", &model_t)], &eval, 200).unwrap();
        let tempered = WithTemperature { model: &model_t, temperature: t };
        let atk = AttackConfig { iters: 60, early_stop: true, ..AttackConfig::default_untargeted(0) };
        let (fr, _) = evalset_attack(&tempered, &eval, &es, &grid, &atk).unwrap();
        println!("ft T={t}: acc {:.3} FR {:.3} ({:?})", acc, fr, t0.elapsed());
    }
}
