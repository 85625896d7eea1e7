//! Subcommand implementations. Each writes its outputs plus a RunManifest.

use std::collections::BTreeMap;
use std::path::Path;

use patchprobe_core::analysis::{
    self, attention_rollout, fooling_rate, gradient_saliency, rollout_class_grid,
    write_csv, write_pgm, write_ppm_overlay, EvalReport, RolloutMode, SaliencyClass,
};
use patchprobe_core::attack::{
    adversarial_patch_attack, evalset_attack, min_iterations, position_sweep, shared_patch_attack,
    task_seed, transfer_eval, AttackConfig, AttackResult, AttackTarget, Placement,
    WithTemperature,
};
use patchprobe_core::corrupt::{corrupt_patches, sample_patch_indices, CorruptionKind, CorruptionSpec};
use patchprobe_core::data::{Classifier, Dataset};
use patchprobe_core::error::{Error, Result};
use patchprobe_core::model::{embedding_deviation, ForwardOptions, Model, ModelKind, ModelSpec};
use patchprobe_core::rng::rng_from;
use patchprobe_core::tensor::Tensor;
use patchprobe_core::train::{config_hash, save_checkpoint, train_model, EpochLog};
use patchprobe_core::verify;
use serde::Serialize;

use crate::cli::*;
use crate::inputs::{build_evalset, load_data, load_model};
use crate::manifest::RunScope;

fn arch_spec(arch: &str, num_classes: usize) -> Result<ModelSpec> {
    match arch {
        "vit" => Ok(ModelSpec::micro_vit(num_classes)),
        "cnn" => Ok(ModelSpec::micro_cnn(num_classes)),
        "mixer" => Ok(ModelSpec::micro_mixer(num_classes)),
        other => Err(Error::invalid(format!("unknown architecture '{other}'"))),
    }
}

fn write_train_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let rows: Vec<Vec<String>> = logs
        .iter()
        .map(|l| {
            vec![
                l.epoch.to_string(),
                format!("{}", l.train_loss),
                format!("{}", l.eval_accuracy),
            ]
        })
        .collect();
    write_csv(path, &["epoch", "train_loss", "eval_accuracy"], &rows)
}

pub fn run_train(cfg: TrainCmdCfg) -> Result<()> {
    let mut scope = RunScope::new("train", &cfg);
    scope.seed(cfg.train.seed);
    let data = load_data(&cfg.data)?;
    let eval = cfg.eval_data.as_deref().map(load_data).transpose()?;
    let spec = arch_spec(&cfg.arch, cfg.num_classes)?;
    let (model, logs) = train_model(&spec, &data, eval.as_ref(), &cfg.train)?;
    save_checkpoint(&model, &cfg.out, Some(&config_hash(&cfg.train)))?;
    scope.output(&cfg.out);
    let log_path = cfg
        .log
        .clone()
        .unwrap_or_else(|| cfg.out.with_extension("log.csv"));
    write_train_log(&log_path, &logs)?;
    scope.output(&log_path);
    if let Some(last) = logs.last() {
        println!(
            "trained {} to accuracy {:.4} (loss {:.4})",
            cfg.arch, last.eval_accuracy, last.train_loss
        );
    }
    scope.finish()
}

pub fn run_pair_train(cfg: PairTrainCmdCfg) -> Result<()> {
    let mut scope = RunScope::new("pair-train", &cfg);
    scope.seed(cfg.train.seed);
    let data = load_data(&cfg.data)?;
    let eval = cfg.eval_data.as_deref().map(load_data).transpose()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let hash = config_hash(&cfg.train);
    for arch in &cfg.archs {
        let spec = arch_spec(arch, cfg.num_classes)?;
        let (model, logs) = train_model(&spec, &data, eval.as_ref(), &cfg.train)?;
        let ckpt = cfg.out_dir.join(format!("{arch}.ckpt"));
        save_checkpoint(&model, &ckpt, Some(&hash))?;
        scope.output(&ckpt);
        let log_path = cfg.out_dir.join(format!("{arch}.log.csv"));
        write_train_log(&log_path, &logs)?;
        scope.output(&log_path);
        if let Some(last) = logs.last() {
            println!("{arch}: accuracy {:.4}", last.eval_accuracy);
        }
    }
    scope.finish()
}

/// Applies the optional evaluation-time temperature behind one target type.
enum Subject<'a> {
    Plain(&'a Model<f32>),
    Tempered(WithTemperature<'a>),
}

impl Subject<'_> {
    fn target(&self) -> &dyn AttackTarget {
        match self {
            Subject::Plain(m) => *m,
            Subject::Tempered(t) => t,
        }
    }
}

fn subject<'a>(model: &'a Model<f32>, temperature: Option<f64>) -> Subject<'a> {
    match temperature {
        Some(t) => Subject::Tempered(WithTemperature { model, temperature: t }),
        None => Subject::Plain(model),
    }
}

struct TargetAdapter<'a>(&'a dyn AttackTarget);

impl AttackTarget for TargetAdapter<'_> {
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }
    fn geometry(&self) -> (usize, usize, usize) {
        self.0.geometry()
    }
    fn logits_graph(
        &self,
        tape: &mut patchprobe_core::tensor::Tape<f32>,
        input: patchprobe_core::tensor::Var,
    ) -> Result<patchprobe_core::tensor::Var> {
        self.0.logits_graph(tape, input)
    }
}

fn attack_config(cfg: &AttackCmdCfg, placement: Placement) -> AttackConfig {
    AttackConfig {
        num_patches: cfg.patches,
        placement,
        eps: cfg.eps as f32,
        step: cfg.step as f32,
        iters: cfg.iters,
        targeted: cfg.targeted,
        seed: cfg.seed,
        early_stop: cfg.early_stop,
        sign_grad: !cfg.plain_grad,
        free_side: cfg.free_side,
    }
}

fn dump_perturbation(result: &AttackResult, eps: f64, path: &Path) -> Result<()> {
    let mut raw = Vec::with_capacity(result.perturbation.numel() * 4);
    for &v in result.perturbation.data() {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    analysis::atomic_write(path, &raw)?;
    #[derive(Serialize)]
    struct Sidecar<'a> {
        shape: &'a [usize],
        eps: f64,
        positions: &'a [(usize, usize)],
        patch_side: usize,
        encoding: &'a str,
    }
    let sidecar = Sidecar {
        shape: result.perturbation.shape(),
        eps,
        positions: &result.positions,
        patch_side: result.patch_side,
        encoding: "f32-le",
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar") + "\n";
    analysis::atomic_write(&path.with_extension("json"), json.as_bytes())
}

pub fn run_attack(cfg: AttackCmdCfg) -> Result<()> {
    let mut scope = RunScope::new("attack", &cfg);
    scope.seed(cfg.seed);
    scope.input(&cfg.model)?;
    let (model, meta) = load_model(&cfg.model)?;
    let data = load_data(&cfg.data)?;
    let (evalset, extra_models) = build_evalset(&cfg.evalset, (
        &cfg.model.display().to_string(),
        &model,
    ), &data, cfg.max_eval)?;
    for m in &extra_models {
        scope.input(m)?;
    }
    let grid = model.spec.patch_grid()?;
    let subj = subject(&model, cfg.temperature);
    let target = TargetAdapter(subj.target());

    let mut report = if cfg.positions == "sweep" {
        let attack_cfg = attack_config(&cfg, Placement::AlignedRandom);
        let frs = position_sweep(&target, &data, &evalset, &grid, &attack_cfg)?;
        let outcomes_total: f64 = frs.iter().sum::<f64>() / frs.len() as f64;
        let mut report = EvalReport::new("position_sweep", vec![cfg.model.display().to_string()], &[true], cfg.seed)?;
        // aggregate FR over the sweep; per-position carries the real data
        report.p = evalset.len() * grid.num_patches();
        report.q = frs
            .iter()
            .map(|fr| (fr * evalset.len() as f64).round() as usize)
            .sum();
        report.fooling_rate = outcomes_total;
        report.per_position = Some(frs.clone());
        if let Some(heatmap) = &cfg.heatmap {
            let grid_map = Tensor::new(
                vec![grid.rows(), grid.cols()],
                frs.iter().map(|&v| v).collect(),
            )?;
            write_pgm(&grid_map, heatmap)?;
            scope.output(heatmap);
        }
        report
    } else {
        let placement = match cfg.alignment.as_str() {
            "free" => Placement::FreeRandom,
            _ => match cfg.positions.as_str() {
                "random" => Placement::AlignedRandom,
                list => Placement::AlignedExplicit(
                    list.split(',')
                        .map(|v| v.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::invalid(format!("bad positions '{list}'")))?,
                ),
            },
        };
        let attack_cfg = attack_config(&cfg, placement);
        let (fr, results) = evalset_attack(&target, &data, &evalset, &grid, &attack_cfg)?;
        if let Some(dump) = &cfg.dump_first {
            if let Some(first) = results.first() {
                dump_perturbation(first, cfg.eps, dump)?;
                scope.output(dump);
            }
        }
        let outcomes: Vec<bool> = results.iter().map(|r| r.success).collect();
        let report = EvalReport::new(
            "adversarial_patch_attack",
            vec![cfg.model.display().to_string()],
            &outcomes,
            cfg.seed,
        )?;
        debug_assert_eq!(report.fooling_rate, fr);
        report
    };
    report.config_echo = serde_json::to_value(&cfg).expect("config echo");
    report.train_config_hash = meta.train_config_hash.clone();
    analysis::atomic_write(&cfg.report, report.to_json().as_bytes())?;
    scope.output(&cfg.report);
    println!(
        "attack FR {} over {} images",
        analysis::percent_string(report.fooling_rate),
        report.p
    );
    scope.finish()
}

pub fn run_corrupt_eval(cfg: CorruptEvalCmdCfg) -> Result<()> {
    let mut scope = RunScope::new("corrupt-eval", &cfg);
    scope.seed(cfg.seed);
    let data = load_data(&cfg.data)?;
    let mut models = Vec::new();
    for path in &cfg.models {
        scope.input(path)?;
        models.push((path.display().to_string(), load_model(path)?.0));
    }
    let refs: Vec<(&str, &dyn Classifier)> = models
        .iter()
        .map(|(id, m)| (id.as_str(), m as &dyn Classifier))
        .collect();
    let evalset = patchprobe_core::data::select_correct(&refs, &data, cfg.max_eval)?;

    let kinds: Vec<CorruptionKind> = if cfg.kinds == "all" {
        CorruptionKind::ALL.to_vec()
    } else {
        cfg.kinds
            .split(',')
            .map(|k| CorruptionKind::parse(k.trim()))
            .collect::<Result<_>>()?
    };
    let severities: Vec<u8> = if cfg.severity == "all" {
        vec![1, 2, 3, 4, 5]
    } else {
        vec![cfg
            .severity
            .parse()
            .map_err(|_| Error::invalid(format!("bad severity '{}'", cfg.severity)))?]
    };

    let grid = models[0].1.spec.patch_grid()?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut pooled: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut per_type: BTreeMap<String, (usize, usize)> = BTreeMap::new();

    for &n_patches in &cfg.num_patches {
        for &severity in &severities {
            for &kind in &kinds {
                for (model_id, model) in &models {
                    let mut fooled = 0usize;
                    for &idx in &evalset.indices {
                        let image = data.image(idx)?;
                        let mut rng =
                            rng_from(&[cfg.seed, idx as u64, severity as u64, n_patches as u64]);
                        let patch_indices = sample_patch_indices(&grid, n_patches, &mut rng);
                        let spec = CorruptionSpec {
                            kind,
                            severity,
                            patch_indices,
                            seed: task_seed(cfg.seed, idx, kind as usize),
                        };
                        let corrupted = corrupt_patches(&image, &grid, &spec)?;
                        let batch = corrupted.reshaped(vec![
                            1,
                            image.shape()[0],
                            image.shape()[1],
                            image.shape()[2],
                        ])?;
                        let pred = model.predict(&batch)?[0];
                        if pred != data.label(idx) {
                            fooled += 1;
                        }
                    }
                    let p = evalset.len();
                    rows.push(vec![
                        model_id.clone(),
                        kind.name().to_string(),
                        severity.to_string(),
                        n_patches.to_string(),
                        p.to_string(),
                        fooled.to_string(),
                        format!("{}", fooled as f64 / p as f64),
                    ]);
                    let pool = pooled.entry(model_id.clone()).or_insert((0, 0));
                    pool.0 += p;
                    pool.1 += fooled;
                    let per = per_type
                        .entry(format!("{model_id}:{}", kind.name()))
                        .or_insert((0, 0));
                    per.0 += p;
                    per.1 += fooled;
                }
            }
        }
    }

    write_csv(
        &cfg.report,
        &["model", "kind", "severity", "num_patches", "p", "q", "fr"],
        &rows,
    )?;
    scope.output(&cfg.report);

    if let Some(json_path) = &cfg.json {
        // pooled report with equal weight per (image, kind) pair
        let mut report = EvalReport::new(
            "natural_patch_corruption",
            cfg.models.iter().map(|p| p.display().to_string()).collect(),
            &[false],
            cfg.seed,
        )?;
        let (p_total, q_total) = pooled.values().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        report.p = p_total;
        report.q = q_total;
        report.fooling_rate = if p_total > 0 { q_total as f64 / p_total as f64 } else { 0.0 };
        report.per_type = Some(
            per_type
                .into_iter()
                .map(|(k, (p, q))| (k, q as f64 / p.max(1) as f64))
                .collect(),
        );
        report.config_echo = serde_json::to_value(&cfg).expect("config echo");
        analysis::atomic_write(json_path, report.to_json().as_bytes())?;
        scope.output(json_path);
    }
    for (model_id, (p, q)) in &pooled {
        println!(
            "{model_id}: pooled corruption FR {}",
            analysis::percent_string(*q as f64 / (*p).max(1) as f64)
        );
    }
    scope.finish()
}

pub fn run_rollout(cfg: RolloutCmdCfg) -> Result<()> {
    let mut scope = RunScope::new("rollout", &cfg);
    scope.input(&cfg.model)?;
    let (model, _) = load_model(&cfg.model)?;
    let data = load_data(&cfg.data)?;
    let image = data.image(cfg.index)?;
    let batch = image.clone().reshaped(vec![1, image.shape()[0], image.shape()[1], image.shape()[2]])?;
    let (h, w) = (image.shape()[1], image.shape()[2]);

    // vit: rollout over recorded attention; cnn: channel-mean feature map
    // of the last stage (its attention counterpart); mixer has neither
    let pixel_map: Tensor<f64> = match model.kind() {
        ModelKind::Vit => {
            let out = model.forward(
                &batch,
                &ForwardOptions {
                    record_attention: true,
                    temperature_override: cfg.temperature,
                    ..Default::default()
                },
            )?;
            let record = &out.attention.as_ref().expect("vit records attention")[0];
            let mode = match cfg.mode.as_str() {
                "renorm" => RolloutMode::AddIdentityRenorm,
                _ => RolloutMode::HalfIdentity,
            };
            let rollout = attention_rollout(record, mode)?;
            let grid = model.spec.patch_grid()?;
            let class_grid = rollout_class_grid(&rollout, &grid)?;
            let mut up = vec![0.0f64; h * w];
            for y in 0..h {
                for x in 0..w {
                    up[y * w + x] = class_grid.data()[(y / grid.p) * grid.cols() + x / grid.p];
                }
            }
            Tensor::new(vec![h, w], up)?
        }
        ModelKind::Cnn => {
            let out = model.forward(
                &batch,
                &ForwardOptions { cache_activations: true, ..Default::default() },
            )?;
            let cache = out
                .activations
                .ok_or_else(|| Error::numeric("cnn forward produced no stage cache"))?;
            let stages = match &cache {
                patchprobe_core::model::ActivationCache::Stages(s) => s.len(),
                _ => 0,
            };
            patchprobe_core::analysis::feature_map_attention(&cache, 0, stages - 1, h, w)?
                .cast::<f64>()
        }
        ModelKind::Mixer => {
            return Err(Error::Unsupported(
                "the mixer has no attention to roll out".into(),
            ))
        }
    };
    write_pgm(&pixel_map, &cfg.out)?;
    scope.output(&cfg.out);
    if let Some(overlay) = &cfg.overlay {
        write_ppm_overlay(&pixel_map, &image, overlay)?;
        scope.output(overlay);
    }
    scope.finish()
}

pub fn run_saliency(cfg: SaliencyCmdCfg) -> Result<()> {
    let mut scope = RunScope::new("saliency", &cfg);
    scope.input(&cfg.model)?;
    let (model, _) = load_model(&cfg.model)?;
    let data = load_data(&cfg.data)?;
    let image = data.image(cfg.index)?;
    let wrt = match cfg.class.as_str() {
        "predicted" => SaliencyClass::Predicted,
        "truth" => SaliencyClass::GroundTruth(data.label(cfg.index)),
        k => SaliencyClass::Explicit(
            k.parse()
                .map_err(|_| Error::invalid(format!("bad class '{k}'")))?,
        ),
    };
    let map = gradient_saliency(&model, &image, wrt)?;
    let map64 = map.cast::<f64>();
    write_pgm(&map64, &cfg.out)?;
    scope.output(&cfg.out);
    if let Some(overlay) = &cfg.overlay {
        write_ppm_overlay(&map64, &image, overlay)?;
        scope.output(overlay);
    }
    scope.finish()
}

pub fn run_deviation(cfg: DeviationCmdCfg) -> Result<()> {
    let mut scope = RunScope::new("deviation", &cfg);
    scope.seed(cfg.seed);
    scope.input(&cfg.model)?;
    let (model, _) = load_model(&cfg.model)?;
    let data = load_data(&cfg.data)?;
    let image = data.image(cfg.index)?;
    let grid = model.spec.patch_grid()?;
    let attack_cfg = AttackConfig {
        num_patches: 1,
        placement: Placement::AlignedExplicit(vec![cfg.patch]),
        eps: cfg.eps as f32,
        step: cfg.step as f32,
        iters: cfg.iters,
        targeted: None,
        seed: cfg.seed,
        early_stop: false,
        sign_grad: true,
        free_side: 0,
    };
    let result =
        adversarial_patch_attack(&model, &image, data.label(cfg.index), &grid, &attack_cfg)?;

    #[derive(Serialize)]
    struct PerTemp {
        temperature: f64,
        deviations: Vec<f64>,
        class_token_deviation: f64,
    }
    #[derive(Serialize)]
    struct DeviationReport<'a> {
        report_version: u32,
        layer: usize,
        attacked_patch: usize,
        attack_succeeded: bool,
        per_temperature: Vec<PerTemp>,
        config_echo: &'a DeviationCmdCfg,
        platform: String,
    }

    let mut per_temperature = Vec::new();
    for &t in &cfg.temps {
        let deviations =
            embedding_deviation(&model, &image, &result.adversarial, cfg.layer, Some(t))?;
        per_temperature.push(PerTemp {
            temperature: t,
            class_token_deviation: deviations[0],
            deviations,
        });
    }
    let report = DeviationReport {
        report_version: 1,
        layer: cfg.layer,
        attacked_patch: cfg.patch,
        attack_succeeded: result.success,
        per_temperature,
        config_echo: &cfg,
        platform: analysis::platform_tag(),
    };
    let json = serde_json::to_string_pretty(&report).expect("report") + "\n";
    analysis::atomic_write(&cfg.report, json.as_bytes())?;
    scope.output(&cfg.report);
    scope.finish()
}

pub fn run_transfer(cfg: TransferCmdCfg) -> Result<()> {
    let mut scope = RunScope::new("transfer", &cfg);
    scope.seed(cfg.seed);
    scope.input(&cfg.model)?;
    let (model, _) = load_model(&cfg.model)?;
    let target_model = match &cfg.target_model {
        Some(p) => {
            scope.input(p)?;
            Some(load_model(p)?.0)
        }
        None => None,
    };
    let data = load_data(&cfg.data)?;
    let (evalset, _) = build_evalset(
        &cfg.evalset,
        (&cfg.model.display().to_string(), &model),
        &data,
        cfg.max_eval,
    )?;
    let grid = model.spec.patch_grid()?;

    let shifts: Vec<(isize, isize)> = cfg
        .shifts
        .split(';')
        .map(|pair| -> Result<(isize, isize)> {
            let (dy, dx) = pair
                .split_once(',')
                .ok_or_else(|| Error::invalid(format!("bad shift '{pair}'")))?;
            Ok((
                dy.trim().parse().map_err(|_| Error::invalid("bad shift"))?,
                dx.trim().parse().map_err(|_| Error::invalid("bad shift"))?,
            ))
        })
        .collect::<Result<_>>()?;

    // attack every evalset image once, then re-evaluate each perturbation
    // shifted on its own image
    let mut results: Vec<(usize, AttackResult)> = Vec::new();
    for &idx in &evalset.indices {
        let image = data.image(idx)?;
        let placement = match cfg.position {
            Some(p) => Placement::AlignedExplicit(vec![p]),
            None => Placement::AlignedRandom,
        };
        let attack_cfg = AttackConfig {
            num_patches: 1,
            placement,
            eps: cfg.eps as f32,
            step: cfg.step as f32,
            iters: cfg.iters,
            targeted: None,
            seed: task_seed(cfg.seed, idx, 0),
            early_stop: false,
            sign_grad: true,
            free_side: 0,
        };
        results.push((
            idx,
            adversarial_patch_attack(&model, &image, data.label(idx), &grid, &attack_cfg)?,
        ));
    }

    #[derive(Serialize)]
    struct ShiftRow {
        shift: (isize, isize),
        p: usize,
        q: usize,
        fooling_rate: f64,
        skipped_out_of_bounds: usize,
    }
    #[derive(Serialize)]
    struct TransferCmdReport<'a> {
        report_version: u32,
        source_model: String,
        target_model: String,
        shifts: Vec<ShiftRow>,
        config_echo: &'a TransferCmdCfg,
        platform: String,
    }

    let eval_target: &dyn AttackTarget = match &target_model {
        Some(t) => t,
        None => &model,
    };
    let adapter = TargetAdapter(eval_target);
    let mut shift_rows = Vec::new();
    for &shift in &shifts {
        let mut p = 0usize;
        let mut q = 0usize;
        let mut skipped = 0usize;
        for (idx, result) in &results {
            let image = data.image(*idx)?;
            match transfer_eval(result, &adapter, &[(image, data.label(*idx))], shift) {
                Ok(report) => {
                    p += report.p;
                    q += report.q;
                }
                Err(Error::InvalidArgument(_)) => skipped += 1,
                Err(Error::EmptyEvalSet) => {}
                Err(other) => return Err(other),
            }
        }
        shift_rows.push(ShiftRow {
            shift,
            p,
            q,
            fooling_rate: if p > 0 { q as f64 / p as f64 } else { 0.0 },
            skipped_out_of_bounds: skipped,
        });
    }
    let report = TransferCmdReport {
        report_version: 1,
        source_model: cfg.model.display().to_string(),
        target_model: cfg
            .target_model
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| cfg.model.display().to_string()),
        shifts: shift_rows,
        config_echo: &cfg,
        platform: analysis::platform_tag(),
    };
    let json = serde_json::to_string_pretty(&report).expect("report") + "\n";
    analysis::atomic_write(&cfg.report, json.as_bytes())?;
    scope.output(&cfg.report);
    scope.finish()
}

pub fn run_shared_attack(cfg: SharedAttackCmdCfg) -> Result<()> {
    let mut scope = RunScope::new("shared-attack", &cfg);
    scope.seed(cfg.seed);
    scope.input(&cfg.model)?;
    let (model, _) = load_model(&cfg.model)?;
    let data = load_data(&cfg.data)?;
    if data.len() < cfg.train_n + cfg.eval_n {
        return Err(Error::invalid(format!(
            "dataset has {} images; need train_n + eval_n = {}",
            data.len(),
            cfg.train_n + cfg.eval_n
        )));
    }
    let grid = model.spec.patch_grid()?;
    let train_idx: Vec<usize> = (0..cfg.train_n).collect();
    let eval_idx: Vec<usize> = (cfg.train_n..cfg.train_n + cfg.eval_n).collect();
    let attack_cfg = AttackConfig {
        iters: cfg.iters,
        step: cfg.step as f32,
        seed: cfg.seed,
        ..AttackConfig::default_untargeted(cfg.seed)
    };
    let shared = shared_patch_attack(
        &model,
        &data,
        &train_idx,
        &grid,
        &attack_cfg,
        cfg.minibatch,
        &eval_idx,
    )?;
    let (p, q, fr) = fooling_rate(&shared.success)?;

    #[derive(Serialize)]
    struct SharedReport<'a> {
        report_version: u32,
        train_images: usize,
        eval_images: usize,
        p: usize,
        q: usize,
        fooling_rate: f64,
        eval_positions: &'a [usize],
        success: &'a [bool],
        config_echo: &'a SharedAttackCmdCfg,
        platform: String,
    }
    let report = SharedReport {
        report_version: 1,
        train_images: cfg.train_n,
        eval_images: cfg.eval_n,
        p,
        q,
        fooling_rate: fr,
        eval_positions: &shared.eval_positions,
        success: &shared.success,
        config_echo: &cfg,
        platform: analysis::platform_tag(),
    };
    let json = serde_json::to_string_pretty(&report).expect("report") + "\n";
    analysis::atomic_write(&cfg.report, json.as_bytes())?;
    scope.output(&cfg.report);
    if let Some(noise_path) = &cfg.noise_out {
        let mut raw = Vec::with_capacity(shared.noise.numel() * 4);
        for &v in shared.noise.data() {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        analysis::atomic_write(noise_path, &raw)?;
        #[derive(Serialize)]
        struct Sidecar<'a> {
            shape: &'a [usize],
            eps: f64,
            encoding: &'a str,
        }
        let sc = Sidecar { shape: shared.noise.shape(), eps: 1.0, encoding: "f32-le" };
        analysis::atomic_write(
            &noise_path.with_extension("json"),
            (serde_json::to_string_pretty(&sc).expect("sidecar") + "\n").as_bytes(),
        )?;
        scope.output(noise_path);
    }
    println!("shared-noise transfer FR {}", analysis::percent_string(fr));
    scope.finish()
}

pub fn run_min_iters(cfg: MinItersCmdCfg) -> Result<()> {
    let mut scope = RunScope::new("min-iters", &cfg);
    scope.seed(cfg.seed);
    scope.input(&cfg.model)?;
    let (model, _) = load_model(&cfg.model)?;
    let data = load_data(&cfg.data)?;
    let (evalset, _) = build_evalset(
        &cfg.evalset,
        (&cfg.model.display().to_string(), &model),
        &data,
        cfg.max_eval,
    )?;
    let grid = model.spec.patch_grid()?;
    let attack_cfg = AttackConfig {
        num_patches: cfg.positions_per_image,
        eps: cfg.eps as f32,
        step: cfg.step as f32,
        iters: cfg.iters,
        early_stop: true,
        seed: cfg.seed,
        ..AttackConfig::default_untargeted(cfg.seed)
    };
    let report = min_iterations(&model, &data, &evalset, &grid, &attack_cfg)?;

    #[derive(Serialize)]
    struct MinItersReportOut<'a> {
        report_version: u32,
        mean_iterations: f64,
        fooled_pairs: usize,
        unfooled_pairs: usize,
        config_echo: &'a MinItersCmdCfg,
        platform: String,
    }
    let out = MinItersReportOut {
        report_version: 1,
        mean_iterations: report.mean_iterations,
        fooled_pairs: report.fooled_pairs,
        unfooled_pairs: report.unfooled_pairs,
        config_echo: &cfg,
        platform: analysis::platform_tag(),
    };
    let json = serde_json::to_string_pretty(&out).expect("report") + "\n";
    analysis::atomic_write(&cfg.report, json.as_bytes())?;
    scope.output(&cfg.report);
    println!(
        "mean iterations to fool: {:.1} over {} pairs ({} unfooled)",
        report.mean_iterations, report.fooled_pairs, report.unfooled_pairs
    );
    scope.finish()
}

pub fn run_temp_sweep(cfg: TempSweepCmdCfg) -> Result<()> {
    let mut scope = RunScope::new("temp-sweep", &cfg);
    scope.seed(cfg.seed);
    scope.input(&cfg.model)?;
    let (model, meta) = load_model(&cfg.model)?;
    if model.kind() != ModelKind::Vit {
        return Err(Error::Unsupported("temperature sweep requires a vit checkpoint".into()));
    }
    let data = load_data(&cfg.data)?;
    let (evalset, _) = build_evalset(
        &cfg.evalset,
        (&cfg.model.display().to_string(), &model),
        &data,
        cfg.max_eval,
    )?;
    let grid = model.spec.patch_grid()?;

    #[derive(Serialize)]
    struct TempRow {
        temperature: f64,
        p: usize,
        q: usize,
        fooling_rate: f64,
        clean_accuracy: f64,
    }
    #[derive(Serialize)]
    struct TempSweepReport<'a> {
        report_version: u32,
        model: String,
        rows: Vec<TempRow>,
        train_config_hash: Option<String>,
        config_echo: &'a TempSweepCmdCfg,
        platform: String,
    }

    let mut rows = Vec::new();
    for &t in &cfg.temps {
        let tempered = WithTemperature { model: &model, temperature: t };
        let attack_cfg = AttackConfig {
            num_patches: cfg.patches,
            eps: cfg.eps as f32,
            step: cfg.step as f32,
            iters: cfg.iters,
            early_stop: cfg.early_stop,
            seed: cfg.seed,
            ..AttackConfig::default_untargeted(cfg.seed)
        };
        let (fr, results) = evalset_attack(&tempered, &data, &evalset, &grid, &attack_cfg)?;
        let clean_accuracy = clean_accuracy_at(&model, &data, t)?;
        rows.push(TempRow {
            temperature: t,
            p: results.len(),
            q: results.iter().filter(|r| r.success).count(),
            fooling_rate: fr,
            clean_accuracy,
        });
        println!(
            "T={t}: FR {} clean accuracy {:.4}",
            analysis::percent_string(fr),
            clean_accuracy
        );
    }
    let report = TempSweepReport {
        report_version: 1,
        model: cfg.model.display().to_string(),
        rows,
        train_config_hash: meta.train_config_hash.clone(),
        config_echo: &cfg,
        platform: analysis::platform_tag(),
    };
    let json = serde_json::to_string_pretty(&report).expect("report") + "\n";
    analysis::atomic_write(&cfg.report, json.as_bytes())?;
    scope.output(&cfg.report);
    scope.finish()
}

fn clean_accuracy_at(model: &Model<f32>, data: &Dataset, temperature: f64) -> Result<f64> {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in all.chunks(64) {
        let (images, labels) = data.batch(chunk)?;
        let out = model.forward(
            &images,
            &ForwardOptions { temperature_override: Some(temperature), ..Default::default() },
        )?;
        let k = model.spec.num_classes();
        for (row, &label) in out.logits.data().chunks_exact(k).zip(&labels) {
            if patchprobe_core::data::argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn run_gradcheck(cfg: GradcheckCmdCfg) -> Result<()> {
    let mut scope = RunScope::new("gradcheck", &cfg);
    let outcomes = verify::full_grad_check(cfg.tol, cfg.h)?;
    let mut failures = 0usize;
    for o in &outcomes {
        println!(
            "{}: {} (max rel err {:.3e})",
            o.name,
            if o.pass { "PASS" } else { "FAIL" },
            o.max_rel_err
        );
        if !o.pass {
            failures += 1;
        }
    }
    if let Some(path) = &cfg.report {
        #[derive(Serialize)]
        struct Row<'a> {
            name: &'a str,
            max_rel_err: f64,
            pass: bool,
        }
        #[derive(Serialize)]
        struct GradReport<'a> {
            report_version: u32,
            tol: f64,
            h: f64,
            checks: Vec<Row<'a>>,
            platform: String,
        }
        let report = GradReport {
            report_version: 1,
            tol: cfg.tol,
            h: cfg.h,
            checks: outcomes
                .iter()
                .map(|o| Row { name: &o.name, max_rel_err: o.max_rel_err, pass: o.pass })
                .collect(),
            platform: analysis::platform_tag(),
        };
        analysis::atomic_write(
            path,
            (serde_json::to_string_pretty(&report).expect("report") + "\n").as_bytes(),
        )?;
        scope.output(path);
    }
    scope.finish()?;
    if failures > 0 {
        return Err(Error::numeric(format!("{failures} gradient checks failed")));
    }
    println!("all {} gradient checks passed", outcomes.len());
    Ok(())
}

pub fn run_rerun(manifest_path: &Path) -> Result<()> {
    let manifest = crate::manifest::load(manifest_path)?;
    let config = manifest.config.clone();
    macro_rules! redo {
        ($ty:ty, $func:path) => {{
            let cfg: $ty = serde_json::from_value(config)
                .map_err(|e| Error::invalid(format!("manifest config: {e}")))?;
            $func(cfg)
        }};
    }
    match manifest.subcommand.as_str() {
        "train" => redo!(TrainCmdCfg, run_train),
        "pair-train" => redo!(PairTrainCmdCfg, run_pair_train),
        "attack" => redo!(AttackCmdCfg, run_attack),
        "corrupt-eval" => redo!(CorruptEvalCmdCfg, run_corrupt_eval),
        "rollout" => redo!(RolloutCmdCfg, run_rollout),
        "saliency" => redo!(SaliencyCmdCfg, run_saliency),
        "deviation" => redo!(DeviationCmdCfg, run_deviation),
        "transfer" => redo!(TransferCmdCfg, run_transfer),
        "shared-attack" => redo!(SharedAttackCmdCfg, run_shared_attack),
        "min-iters" => redo!(MinItersCmdCfg, run_min_iters),
        "temp-sweep" => redo!(TempSweepCmdCfg, run_temp_sweep),
        "gradcheck" => redo!(GradcheckCmdCfg, run_gradcheck),
        other => Err(Error::invalid(format!("manifest subcommand '{other}'"))),
    }
}
