//! Optimized adversarial patch perturbations: sign-gradient ascent on the
//! classification loss, restricted to a pixel mask, projected onto
//! `[0,1] ∩ l_inf-ball(clean, eps)`, with best-iterate tracking.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{argmax, Dataset, EvalSet, PatchGrid};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{Tape, Tensor, Var};

/// A model the attacker can differentiate through: gradients flow to the
/// input pixels only.
pub trait AttackTarget: Sync {
    fn num_classes(&self) -> usize;
    /// (C, H, W) consumed by the model.
    fn geometry(&self) -> (usize, usize, usize);
    /// Records `[1, C, H, W] -> [1, K]` logits on the tape.
    fn logits_graph(&self, tape: &mut Tape<f32>, input: Var) -> Result<Var>;

    fn predict_image(&self, image: &Tensor<f32>) -> Result<usize> {
        let (c, h, w) = self.geometry();
        let mut tape = Tape::new();
        let input = tape.leaf(image.clone().reshaped(vec![1, c, h, w])?, false)?;
        let logits = self.logits_graph(&mut tape, input)?;
        Ok(argmax(tape.value(logits).data()))
    }
}

impl AttackTarget for crate::model::Model<f32> {
    fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    fn geometry(&self) -> (usize, usize, usize) {
        self.spec.geometry()
    }

    fn logits_graph(&self, tape: &mut Tape<f32>, input: Var) -> Result<Var> {
        crate::model::Model::logits_graph(self, tape, input, None)
    }
}

/// Wraps a model with an evaluation-time attention temperature (the smoothed
/// attention defense under attack).
pub struct WithTemperature<'a> {
    pub model: &'a crate::model::Model<f32>,
    pub temperature: f64,
}

impl AttackTarget for WithTemperature<'_> {
    fn num_classes(&self) -> usize {
        self.model.spec.num_classes()
    }

    fn geometry(&self) -> (usize, usize, usize) {
        self.model.spec.geometry()
    }

    fn logits_graph(&self, tape: &mut Tape<f32>, input: Var) -> Result<Var> {
        self.model.logits_graph(tape, input, Some(self.temperature))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Placement {
    /// Patch-grid indices.
    AlignedExplicit(Vec<usize>),
    /// `num_patches` grid indices sampled uniformly without replacement.
    AlignedRandom,
    /// Arbitrary top-left pixel coordinates (y, x) of `side`-sized squares.
    FreeExplicit(Vec<(usize, usize)>),
    FreeRandom,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub num_patches: usize,
    pub placement: Placement,
    /// l_inf radius in pixel units; 1.0 means unbounded within [0,1].
    pub eps: f32,
    /// Step size in pixel units.
    pub step: f32,
    pub iters: usize,
    /// Some(class): maximize that class's probability instead.
    pub targeted: Option<usize>,
    pub seed: u64,
    /// Stop at the first misclassification (for iterations-to-fool runs).
    pub early_stop: bool,
    /// Sign-gradient steps (default); false uses the raw gradient.
    pub sign_grad: bool,
    /// Square side in pixels for free placement; 0 means the grid patch size.
    pub free_side: usize,
}

impl AttackConfig {
    /// Untargeted single-patch defaults: eps 255/255, step 2/255, 250 iters
    /// (the paper-scale budget is 10k iterations).
    pub fn default_untargeted(seed: u64) -> Self {
        AttackConfig {
            num_patches: 1,
            placement: Placement::AlignedRandom,
            eps: 1.0,
            step: 2.0 / 255.0,
            iters: 250,
            targeted: None,
            seed,
            early_stop: false,
            sign_grad: true,
            free_side: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step <= self.eps && self.eps <= 1.0) {
            return Err(Error::invalid(format!(
                "attack config requires 0 < step <= eps <= 1 (step {}, eps {})",
                self.step, self.eps
            )));
        }
        if self.iters < 1 {
            return Err(Error::invalid("attack config requires iters >= 1"));
        }
        if self.num_patches < 1 {
            return Err(Error::invalid("attack config requires num_patches >= 1"));
        }
        Ok(())
    }

    fn side(&self, grid: &PatchGrid) -> usize {
        if self.free_side > 0 {
            self.free_side
        } else {
            grid.p
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    /// Whether any iterate was misclassified (equivalently: the returned
    /// adversarial image is misclassified).
    pub success: bool,
    /// Best iterate. Misclassifying iterates win over non-misclassifying
    /// ones; ties resolve to the highest attack objective.
    pub adversarial: Tensor<f32>,
    /// `adversarial - clean`; support is confined to the patch mask.
    pub perturbation: Tensor<f32>,
    /// Per pixel location (H*W), whether the attacker may touch it.
    pub mask: Vec<bool>,
    /// Best-so-far attack objective per evaluated iterate; non-decreasing.
    pub loss_trace: Vec<f32>,
    /// First iterate index (number of update steps applied) observed
    /// misclassified, if any.
    pub iterations_to_fool: Option<usize>,
    /// Prediction at the returned adversarial image.
    pub final_class: usize,
    /// Resolved top-left corners of the attacked squares.
    pub positions: Vec<(usize, usize)>,
    pub patch_side: usize,
}

fn resolve_positions(
    cfg: &AttackConfig,
    grid: &PatchGrid,
    geometry: (usize, usize, usize),
) -> Result<(Vec<(usize, usize)>, usize)> {
    let (_, h, w) = geometry;
    let side = cfg.side(grid);
    let positions = match &cfg.placement {
        Placement::AlignedExplicit(indices) => {
            let mut out = Vec::with_capacity(indices.len());
            for &i in indices {
                out.push(grid.rect(i)?);
            }
            out
        }
        Placement::AlignedRandom => {
            let mut rng = rng_from(&[cfg.seed, 4]);
            let indices = crate::corrupt::sample_patch_indices(grid, cfg.num_patches, &mut rng);
            indices
                .iter()
                .map(|&i| grid.rect(i))
                .collect::<Result<Vec<_>>>()?
        }
        Placement::FreeExplicit(coords) => coords.clone(),
        Placement::FreeRandom => {
            let mut rng = rng_from(&[cfg.seed, 4]);
            (0..cfg.num_patches)
                .map(|_| {
                    (
                        rng.gen_range(0..=h.saturating_sub(side)),
                        rng.gen_range(0..=w.saturating_sub(side)),
                    )
                })
                .collect()
        }
    };
    for &(y, x) in &positions {
        if y + side > h || x + side > w {
            return Err(Error::invalid(format!(
                "patch at ({y},{x}) with side {side} exceeds {h}x{w} image"
            )));
        }
    }
    Ok((positions, side))
}

fn build_mask(positions: &[(usize, usize)], side: usize, h: usize, w: usize) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    for &(y0, x0) in positions {
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                mask[y * w + x] = true;
            }
        }
    }
    mask
}

struct Evaluation {
    objective: f32,
    prediction: usize,
    grad: Option<Tensor<f32>>,
}

fn evaluate<M: AttackTarget + ?Sized>(
    model: &M,
    image: &Tensor<f32>,
    label: usize,
    targeted: Option<usize>,
    want_grad: bool,
) -> Result<Evaluation> {
    let (c, h, w) = model.geometry();
    let mut tape = Tape::new();
    let input = tape.leaf(image.clone().reshaped(vec![1, c, h, w])?, want_grad)?;
    let logits = model.logits_graph(&mut tape, input)?;
    let prediction = argmax(tape.value(logits).data());
    let objective_var = match targeted {
        None => tape.cross_entropy(logits, &[label])?,
        Some(target) => {
            let ce = tape.cross_entropy(logits, &[target])?;
            tape.neg(ce)?
        }
    };
    let objective = tape.value(objective_var).item();
    let grad = if want_grad {
        tape.backward(objective_var)?;
        Some(tape.grad(input).expect("input grad").reshaped(vec![c, h, w])?)
    } else {
        None
    };
    Ok(Evaluation { objective, prediction, grad })
}

fn fooled(prediction: usize, label: usize, targeted: Option<usize>) -> bool {
    match targeted {
        None => prediction != label,
        Some(target) => prediction == target,
    }
}

/// One adversarial patch attack. `(seed, config, model, image)` fully
/// determines the result.
pub fn adversarial_patch_attack<M: AttackTarget + ?Sized>(
    model: &M,
    image: &Tensor<f32>,
    label: usize,
    grid: &PatchGrid,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    attack_with_init(model, image, label, grid, cfg, None)
}

/// Warm-startable variant; `init` must match the image geometry and is
/// projected onto the feasible set before the first iterate.
pub fn attack_with_init<M: AttackTarget + ?Sized>(
    model: &M,
    image: &Tensor<f32>,
    label: usize,
    grid: &PatchGrid,
    cfg: &AttackConfig,
    init: Option<&Tensor<f32>>,
) -> Result<AttackResult> {
    cfg.validate()?;
    let geometry = model.geometry();
    let (c, h, w) = geometry;
    if image.shape() != [c, h, w] {
        return Err(Error::invalid(format!(
            "attack image {:?} does not match model geometry ({c},{h},{w})",
            image.shape()
        )));
    }
    if let Some(target) = cfg.targeted {
        if target >= model.num_classes() {
            return Err(Error::invalid(format!("target class {target} out of range")));
        }
    }
    let (positions, side) = resolve_positions(cfg, grid, geometry)?;
    let mask = build_mask(&positions, side, h, w);

    let mut x = image.clone();
    match init {
        Some(init_img) => {
            if init_img.shape() != image.shape() {
                return Err(Error::invalid("warm-start image geometry mismatch"));
            }
            for ci in 0..c {
                for (px, &m) in mask.iter().enumerate() {
                    if m {
                        x.data_mut()[ci * h * w + px] = init_img.data()[ci * h * w + px];
                    }
                }
            }
        }
        None if cfg.eps >= 1.0 => {
            // unbounded mode: replace patch pixels with uniform noise
            let mut rng = rng_from(&[cfg.seed, 5]);
            for &(y0, x0) in &positions {
                for ci in 0..c {
                    for y in y0..y0 + side {
                        for xx in x0..x0 + side {
                            x.data_mut()[ci * h * w + y * w + xx] = rng.gen::<f32>();
                        }
                    }
                }
            }
        }
        None => {} // imperceptible mode starts at the clean pixels
    }
    project(&mut x, image, &mask, cfg.eps, c, h, w);

    let mut trace: Vec<f32> = Vec::with_capacity(cfg.iters + 1);
    let mut best_obj = f32::NEG_INFINITY;
    let mut best_fooled = false;
    let mut best_img = x.clone();
    let mut best_pred = 0usize;
    let mut iterations_to_fool: Option<usize> = None;

    for t in 0..=cfg.iters {
        let last = t == cfg.iters;
        let eval = evaluate(model, &x, label, cfg.targeted, !last)?;
        let hit = fooled(eval.prediction, label, cfg.targeted);
        if hit && iterations_to_fool.is_none() {
            iterations_to_fool = Some(t);
        }
        if (hit, eval.objective) > (best_fooled, best_obj) {
            best_fooled = hit;
            best_obj = eval.objective;
            best_img = x.clone();
            best_pred = eval.prediction;
        }
        trace.push(match trace.last() {
            Some(&prev) if prev > eval.objective => prev,
            _ => eval.objective,
        });
        if last || (cfg.early_stop && hit) {
            break;
        }
        let grad = eval.grad.expect("gradient requested");
        for ci in 0..c {
            for (px, &m) in mask.iter().enumerate() {
                if m {
                    let g = grad.data()[ci * h * w + px];
                    let delta = if cfg.sign_grad {
                        cfg.step * sign(g)
                    } else {
                        cfg.step * g
                    };
                    x.data_mut()[ci * h * w + px] += delta;
                }
            }
        }
        project(&mut x, image, &mask, cfg.eps, c, h, w);
    }

    let mut perturbation = Tensor::zeros(vec![c, h, w]);
    for ci in 0..c {
        for (px, &m) in mask.iter().enumerate() {
            if m {
                perturbation.data_mut()[ci * h * w + px] =
                    best_img.data()[ci * h * w + px] - image.data()[ci * h * w + px];
            }
        }
    }

    Ok(AttackResult {
        success: best_fooled,
        adversarial: best_img,
        perturbation,
        mask,
        loss_trace: trace,
        iterations_to_fool,
        final_class: best_pred,
        positions,
        patch_side: side,
    })
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn project(
    x: &mut Tensor<f32>,
    clean: &Tensor<f32>,
    mask: &[bool],
    eps: f32,
    c: usize,
    h: usize,
    w: usize,
) {
    for ci in 0..c {
        for (px, &m) in mask.iter().enumerate() {
            if m {
                let idx = ci * h * w + px;
                let base = clean.data()[idx];
                let lo = (base - eps).max(0.0);
                let hi = (base + eps).min(1.0);
                let v = x.data()[idx];
                x.data_mut()[idx] = v.clamp(lo, hi);
            }
        }
    }
}

/// Per-task seed so parallel and serial sweeps agree bit for bit.
pub fn task_seed(global: u64, image_index: usize, position_index: usize) -> u64 {
    derive_seed(&[global, image_index as u64, position_index as u64])
}

/// Attacks every evalset image once with per-image seeds; returns the
/// fooling rate and all results (in evalset order).
pub fn evalset_attack<M: AttackTarget>(
    model: &M,
    dataset: &Dataset,
    evalset: &EvalSet,
    grid: &PatchGrid,
    cfg: &AttackConfig,
) -> Result<(f64, Vec<AttackResult>)> {
    if evalset.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let results: Vec<Result<AttackResult>> = evalset
        .indices
        .par_iter()
        .map(|&idx| {
            let image = dataset.image(idx)?;
            let mut task_cfg = cfg.clone();
            task_cfg.seed = task_seed(cfg.seed, idx, 0);
            adversarial_patch_attack(model, &image, dataset.label(idx), grid, &task_cfg)
        })
        .collect();
    let results: Vec<AttackResult> = results.into_iter().collect::<Result<Vec<_>>>()?;
    let fooled = results.iter().filter(|r| r.success).count();
    Ok((fooled as f64 / results.len() as f64, results))
}

/// Fooling rate of single-patch attacks fixed at every grid position.
pub fn position_sweep<M: AttackTarget>(
    model: &M,
    dataset: &Dataset,
    evalset: &EvalSet,
    grid: &PatchGrid,
    cfg: &AttackConfig,
) -> Result<Vec<f64>> {
    if evalset.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    if cfg.num_patches != 1 {
        return Err(Error::invalid("position sweep requires a single patch"));
    }
    let n = grid.num_patches();
    let tasks: Vec<(usize, usize)> = (0..n)
        .flat_map(|pos| evalset.indices.iter().map(move |&img| (pos, img)))
        .collect();
    let outcomes: Vec<Result<bool>> = tasks
        .par_iter()
        .map(|&(pos, img_idx)| {
            let image = dataset.image(img_idx)?;
            let mut task_cfg = cfg.clone();
            task_cfg.placement = Placement::AlignedExplicit(vec![pos]);
            task_cfg.seed = task_seed(cfg.seed, img_idx, pos);
            let result =
                adversarial_patch_attack(model, &image, dataset.label(img_idx), grid, &task_cfg)?;
            Ok(result.success)
        })
        .collect();
    let outcomes = outcomes.into_iter().collect::<Result<Vec<bool>>>()?;
    let per_image = evalset.len();
    Ok((0..n)
        .map(|pos| {
            let fooled = outcomes[pos * per_image..(pos + 1) * per_image]
                .iter()
                .filter(|&&b| b)
                .count();
            fooled as f64 / per_image as f64
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MinIterationsReport {
    pub mean_iterations: f64,
    pub fooled_pairs: usize,
    pub unfooled_pairs: usize,
}

/// Mean first-fooling iteration over (image, position) pairs; unfooled pairs
/// are excluded and counted. Requires `early_stop`.
pub fn min_iterations<M: AttackTarget>(
    model: &M,
    dataset: &Dataset,
    evalset: &EvalSet,
    grid: &PatchGrid,
    cfg: &AttackConfig,
) -> Result<MinIterationsReport> {
    if evalset.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    if !cfg.early_stop {
        return Err(Error::invalid("min_iterations requires cfg.early_stop"));
    }
    let tasks: Vec<(usize, usize)> = match &cfg.placement {
        Placement::AlignedExplicit(list) => evalset
            .indices
            .iter()
            .flat_map(|&img| list.iter().map(move |&pos| (img, pos)))
            .collect(),
        _ => {
            // one sampled position per image per patch slot
            evalset
                .indices
                .iter()
                .flat_map(|&img| {
                    let mut rng = rng_from(&[cfg.seed, 4, img as u64]);
                    crate::corrupt::sample_patch_indices(grid, cfg.num_patches, &mut rng)
                        .into_iter()
                        .map(move |pos| (img, pos))
                })
                .collect()
        }
    };
    let iter_counts: Vec<Result<Option<usize>>> = tasks
        .par_iter()
        .map(|&(img_idx, pos)| {
            let image = dataset.image(img_idx)?;
            let mut task_cfg = cfg.clone();
            task_cfg.placement = Placement::AlignedExplicit(vec![pos]);
            task_cfg.seed = task_seed(cfg.seed, img_idx, pos);
            let result =
                adversarial_patch_attack(model, &image, dataset.label(img_idx), grid, &task_cfg)?;
            Ok(result.iterations_to_fool)
        })
        .collect();
    let iter_counts = iter_counts.into_iter().collect::<Result<Vec<_>>>()?;
    let fooled: Vec<usize> = iter_counts.iter().filter_map(|&c| c).collect();
    if fooled.is_empty() {
        return Err(Error::NoSuccessfulAttacks);
    }
    Ok(MinIterationsReport {
        mean_iterations: fooled.iter().sum::<usize>() as f64 / fooled.len() as f64,
        fooled_pairs: fooled.len(),
        unfooled_pairs: iter_counts.len() - fooled.len(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferReport {
    pub p: usize,
    pub q: usize,
    pub fooling_rate: f64,
}

/// Pastes an attack's patch content at a shifted location onto target
/// images and measures the fooling rate on the originally-correct subset.
pub fn transfer_eval<M: AttackTarget>(
    result: &AttackResult,
    target_model: &M,
    targets: &[(Tensor<f32>, usize)],
    shift: (isize, isize),
) -> Result<TransferReport> {
    let (c, h, w) = target_model.geometry();
    let side = result.patch_side;
    let (dy, dx) = shift;
    let mut shifted_positions = Vec::with_capacity(result.positions.len());
    for &(y, x) in &result.positions {
        let ny = y as isize + dy;
        let nx = x as isize + dx;
        if ny < 0 || nx < 0 || ny as usize + side > h || nx as usize + side > w {
            return Err(Error::invalid(format!(
                "shift ({dy},{dx}) moves patch at ({y},{x}) out of bounds"
            )));
        }
        shifted_positions.push((ny as usize, nx as usize));
    }

    let mut p = 0usize;
    let mut q = 0usize;
    for (image, label) in targets {
        if target_model.predict_image(image)? != *label {
            continue;
        }
        p += 1;
        let mut pasted = image.clone();
        for (&(sy, sx), &(oy, ox)) in shifted_positions.iter().zip(&result.positions) {
            for ci in 0..c {
                for yy in 0..side {
                    for xx in 0..side {
                        pasted.data_mut()[ci * h * w + (sy + yy) * w + (sx + xx)] =
                            result.adversarial.data()[ci * h * w + (oy + yy) * w + (ox + xx)];
                    }
                }
            }
        }
        if target_model.predict_image(&pasted)? != *label {
            q += 1;
        }
    }
    if p == 0 {
        return Err(Error::EmptyEvalSet);
    }
    Ok(TransferReport { p, q, fooling_rate: q as f64 / p as f64 })
}

#[derive(Debug, Clone)]
pub struct SharedAttackResult {
    /// `[C, side, side]` pixel content shared across images and positions.
    pub noise: Tensor<f32>,
    /// Per evaluation image: position used and whether it fooled the model.
    pub eval_positions: Vec<usize>,
    pub success: Vec<bool>,
    pub loss_trace: Vec<f32>,
}

/// One patch noise optimized over a set of images: each iteration samples a
/// minibatch of (image, position) pairs, sums the attack objective, and
/// updates the shared noise. Unbounded mode only (the noise is absolute
/// pixel content).
pub fn shared_patch_attack<M: AttackTarget>(
    model: &M,
    dataset: &Dataset,
    image_indices: &[usize],
    grid: &PatchGrid,
    cfg: &AttackConfig,
    minibatch: usize,
    eval_indices: &[usize],
) -> Result<SharedAttackResult> {
    cfg.validate()?;
    if image_indices.is_empty() {
        return Err(Error::invalid("shared attack needs at least one image"));
    }
    if cfg.eps < 1.0 {
        return Err(Error::invalid("shared patch attack supports eps = 1.0 only"));
    }
    let (c, h, w) = model.geometry();
    let side = cfg.side(grid);
    let positions: Vec<usize> = match &cfg.placement {
        Placement::AlignedExplicit(list) => list.clone(),
        _ => (0..grid.num_patches()).collect(),
    };
    for &pos in &positions {
        grid.rect(pos)?;
    }

    // noise init draws match the single-image attack stream
    let mut init_rng = rng_from(&[cfg.seed, 5]);
    let mut noise = Tensor::zeros(vec![c, side, side]);
    for ci in 0..c {
        for y in 0..side {
            for x in 0..side {
                noise.data_mut()[(ci * side + y) * side + x] = init_rng.gen::<f32>();
            }
        }
    }

    let single_pair = image_indices.len() == 1 && positions.len() == 1;
    let batch_size = if single_pair { 1 } else { minibatch.max(1) };

    let paste = |img: &Tensor<f32>, noise: &Tensor<f32>, (y0, x0): (usize, usize)| {
        let mut out = img.clone();
        for ci in 0..c {
            for y in 0..side {
                for x in 0..side {
                    out.data_mut()[ci * h * w + (y0 + y) * w + (x0 + x)] =
                        noise.data()[(ci * side + y) * side + x];
                }
            }
        }
        out
    };

    let mut trace: Vec<f32> = Vec::with_capacity(cfg.iters + 1);
    for t in 0..=cfg.iters {
        let last = t == cfg.iters;
        let mut batch_rng = rng_from(&[cfg.seed, 6, t as u64]);
        let pairs: Vec<(usize, usize)> = if single_pair {
            vec![(image_indices[0], positions[0])]
        } else {
            (0..batch_size)
                .map(|_| {
                    let img = image_indices[batch_rng.gen_range(0..image_indices.len())];
                    let pos = positions[batch_rng.gen_range(0..positions.len())];
                    (img, pos)
                })
                .collect()
        };
        let mut total_obj = 0.0f32;
        let mut grad_acc = vec![0.0f32; c * side * side];
        for &(img_idx, pos) in &pairs {
            let rect = grid.rect(pos)?;
            let image = dataset.image(img_idx)?;
            let pasted = paste(&image, &noise, rect);
            let eval = evaluate(model, &pasted, dataset.label(img_idx), cfg.targeted, !last)?;
            total_obj += eval.objective;
            if let Some(grad) = eval.grad {
                let (y0, x0) = rect;
                for ci in 0..c {
                    for y in 0..side {
                        for x in 0..side {
                            grad_acc[(ci * side + y) * side + x] +=
                                grad.data()[ci * h * w + (y0 + y) * w + (x0 + x)];
                        }
                    }
                }
            }
        }
        trace.push(match trace.last() {
            Some(&prev) if prev > total_obj => prev,
            _ => total_obj,
        });
        if last {
            break;
        }
        for (v, &g) in noise.data_mut().iter_mut().zip(&grad_acc) {
            let delta = if cfg.sign_grad { cfg.step * sign(g) } else { cfg.step * g };
            *v = (*v + delta).clamp(0.0, 1.0);
        }
    }

    // evaluate the shared noise at one sampled position per eval image
    let mut eval_rng = rng_from(&[cfg.seed, 7]);
    let mut eval_positions = Vec::with_capacity(eval_indices.len());
    let mut success = Vec::with_capacity(eval_indices.len());
    for &img_idx in eval_indices {
        let pos = positions[eval_rng.gen_range(0..positions.len())];
        let rect = grid.rect(pos)?;
        let image = dataset.image(img_idx)?;
        let pasted = paste(&image, &noise, rect);
        let pred = model.predict_image(&pasted)?;
        let hit = match cfg.targeted {
            None => pred != dataset.label(img_idx),
            Some(target) => pred == target,
        };
        eval_positions.push(pos);
        success.push(hit);
    }

    Ok(SharedAttackResult { noise, eval_positions, success, loss_trace: trace })
}

/// Runs the small-eps attack, then warm-starts an unbounded run from its
/// best iterate. Because the small-eps best iterate is feasible at eps=1.0
/// and is re-evaluated first, FR(eps=1.0, warm) >= FR(small eps) holds
/// exactly, per image.
pub fn nested_budget_frs<M: AttackTarget>(
    model: &M,
    dataset: &Dataset,
    evalset: &EvalSet,
    grid: &PatchGrid,
    cfg: &AttackConfig,
    small_eps: f32,
) -> Result<(f64, f64)> {
    if evalset.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let outcomes: Vec<Result<(bool, bool)>> = evalset
        .indices
        .par_iter()
        .map(|&idx| {
            let image = dataset.image(idx)?;
            let label = dataset.label(idx);
            let mut small_cfg = cfg.clone();
            small_cfg.eps = small_eps;
            small_cfg.step = cfg.step.min(small_eps);
            small_cfg.seed = task_seed(cfg.seed, idx, 0);
            // pin the positions so both runs attack the same pixels
            if matches!(small_cfg.placement, Placement::AlignedRandom) {
                let mut rng = rng_from(&[small_cfg.seed, 4]);
                let indices =
                    crate::corrupt::sample_patch_indices(grid, cfg.num_patches, &mut rng);
                small_cfg.placement = Placement::AlignedExplicit(indices);
            }
            let small = adversarial_patch_attack(model, &image, label, grid, &small_cfg)?;

            let mut full_cfg = small_cfg.clone();
            full_cfg.eps = 1.0;
            full_cfg.step = cfg.step;
            let full =
                attack_with_init(model, &image, label, grid, &full_cfg, Some(&small.adversarial))?;
            Ok((small.success, full.success))
        })
        .collect();
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let p = outcomes.len() as f64;
    let fr_small = outcomes.iter().filter(|(s, _)| *s).count() as f64 / p;
    let fr_full = outcomes.iter().filter(|(_, f)| *f).count() as f64 / p;
    Ok((fr_small, fr_full))
}

/// Toy differentiable targets for harness verification.
pub mod toy {
    use super::*;

    /// Ignores its input: logits are a fixed vector, input gradient is zero.
    pub struct ConstantTarget {
        pub logits: Vec<f32>,
        pub geometry: (usize, usize, usize),
    }

    impl AttackTarget for ConstantTarget {
        fn num_classes(&self) -> usize {
            self.logits.len()
        }

        fn geometry(&self) -> (usize, usize, usize) {
            self.geometry
        }

        fn logits_graph(&self, tape: &mut Tape<f32>, input: Var) -> Result<Var> {
            // connect via a zero multiple so the input stays on the graph
            let (c, h, w) = self.geometry;
            let flat = tape.reshape(input, vec![1, c * h * w])?;
            let pooled = tape.mean_axis(flat, 1)?; // [1]
            let zero = tape.mul_scalar(pooled, 0.0)?;
            let zero = tape.reshape(zero, vec![1, 1])?;
            let k = self.logits.len();
            let spread = tape_const(tape, vec![1, k], 0.0)?;
            let zeros = tape.matmul(zero, spread)?;
            let base = tape.leaf(Tensor::new(vec![1, k], self.logits.clone())?, false)?;
            tape.add(zeros, base)
        }
    }

    fn tape_const(tape: &mut Tape<f32>, shape: Vec<usize>, v: f32) -> Result<Var> {
        tape.leaf(Tensor::filled(shape, v), false)
    }

    /// `logits = W . flatten(x)`: constant input gradient, closed-form
    /// attack behavior.
    pub struct LinearTarget {
        /// `[C*H*W, K]`
        pub weights: Tensor<f32>,
        pub geometry: (usize, usize, usize),
    }

    impl AttackTarget for LinearTarget {
        fn num_classes(&self) -> usize {
            self.weights.shape()[1]
        }

        fn geometry(&self) -> (usize, usize, usize) {
            self.geometry
        }

        fn logits_graph(&self, tape: &mut Tape<f32>, input: Var) -> Result<Var> {
            let (c, h, w) = self.geometry;
            let flat = tape.reshape(input, vec![1, c * h * w])?;
            let weights = tape.leaf(self.weights.clone(), false)?;
            tape.matmul(flat, weights)
        }
    }
}
