//! Three patch-based classifier families with recordable attention, the
//! smoothed-attention temperature, and the embedding-deviation diagnostic.

mod cnn;
mod mixer;
mod vit;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{argmax, Classifier, PatchGrid};
use crate::error::{Error, Result};
use crate::rng::{normal_f64, rng_from};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vit,
    Cnn,
    Mixer,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Vit => write!(f, "vit"),
            ModelKind::Cnn => write!(f, "cnn"),
            ModelKind::Mixer => write!(f, "mixer"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ViTSpec {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Attention softmax temperature baked into the model (1.0 = standard).
    pub temperature: f64,
}

impl ViTSpec {
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size) * (self.image_size / self.patch_size)
    }

    /// Sequence length including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::invalid("vit: image size not divisible by patch size"));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::invalid("vit: embed dim not divisible by heads"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("vit: temperature must be > 0"));
        }
        if self.depth == 0 || self.num_classes == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("vit: zero-sized hyperparameter"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CnnSpec {
    pub image_size: usize,
    pub channels: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub num_classes: usize,
}

impl CnnSpec {
    fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() || self.blocks_per_stage == 0 {
            return Err(Error::invalid("cnn: needs at least one stage and block"));
        }
        // every stage past the first halves spatial dims
        let downs = self.stage_widths.len() - 1;
        if self.image_size % (1 << downs) != 0 {
            return Err(Error::invalid("cnn: image size not divisible by total stride"));
        }
        if self.num_classes == 0 || self.channels == 0 {
            return Err(Error::invalid("cnn: zero-sized hyperparameter"));
        }
        Ok(())
    }

    fn final_spatial(&self) -> usize {
        self.image_size >> (self.stage_widths.len() - 1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MixerSpec {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub token_mlp_dim: usize,
    pub channel_mlp_dim: usize,
    pub depth: usize,
    pub num_classes: usize,
}

impl MixerSpec {
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size) * (self.image_size / self.patch_size)
    }

    fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::invalid("mixer: image size not divisible by patch size"));
        }
        if self.depth == 0
            || self.num_classes == 0
            || self.channels == 0
            || self.token_mlp_dim == 0
            || self.channel_mlp_dim == 0
        {
            return Err(Error::invalid("mixer: zero-sized hyperparameter"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Vit(ViTSpec),
    Cnn(CnnSpec),
    Mixer(MixerSpec),
}

impl ModelSpec {
    /// Desk default: 32x32x3, P=4, D=64, 4 heads, 4 blocks, mlp ratio 2.
    pub fn micro_vit(num_classes: usize) -> ModelSpec {
        ModelSpec::Vit(ViTSpec {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            embed_dim: 64,
            heads: 4,
            depth: 4,
            mlp_ratio: 2,
            num_classes,
            temperature: 1.0,
        })
    }

    /// Desk default: 3 stages x 2 residual blocks, widths 16/32/64.
    pub fn micro_cnn(num_classes: usize) -> ModelSpec {
        ModelSpec::Cnn(CnnSpec {
            image_size: 32,
            channels: 3,
            stage_widths: vec![16, 32, 64],
            blocks_per_stage: 2,
            num_classes,
        })
    }

    /// Same patch geometry as the micro ViT, attention-free.
    pub fn micro_mixer(num_classes: usize) -> ModelSpec {
        ModelSpec::Mixer(MixerSpec {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            embed_dim: 64,
            token_mlp_dim: 32,
            channel_mlp_dim: 128,
            depth: 4,
            num_classes,
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::Vit(_) => ModelKind::Vit,
            ModelSpec::Cnn(_) => ModelKind::Cnn,
            ModelSpec::Mixer(_) => ModelKind::Mixer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Vit(s) => s.validate(),
            ModelSpec::Cnn(s) => s.validate(),
            ModelSpec::Mixer(s) => s.validate(),
        }
    }

    /// (C, H, W) the model consumes.
    pub fn geometry(&self) -> (usize, usize, usize) {
        match self {
            ModelSpec::Vit(s) => (s.channels, s.image_size, s.image_size),
            ModelSpec::Cnn(s) => (s.channels, s.image_size, s.image_size),
            ModelSpec::Mixer(s) => (s.channels, s.image_size, s.image_size),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelSpec::Vit(s) => s.num_classes,
            ModelSpec::Cnn(s) => s.num_classes,
            ModelSpec::Mixer(s) => s.num_classes,
        }
    }

    /// The model's input patch grid (CNN uses the micro default of 4px for
    /// patch-wise experiments even though convolution has no native grid).
    pub fn patch_grid(&self) -> Result<PatchGrid> {
        let (_, h, w) = self.geometry();
        let p = match self {
            ModelSpec::Vit(s) => s.patch_size,
            ModelSpec::Mixer(s) => s.patch_size,
            ModelSpec::Cnn(_) => 4,
        };
        PatchGrid::new(h, w, p)
    }

    /// Canonical parameter table: deterministic name order shared by
    /// initialization and the checkpoint format.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        match self {
            ModelSpec::Vit(s) => vit::param_specs(s),
            ModelSpec::Cnn(s) => cnn::param_specs(s),
            ModelSpec::Mixer(s) => mixer::param_specs(s),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Head-averaged attention matrices of one image, one `(N+1)x(N+1)`
/// row-stochastic matrix per layer. Per-head matrices only when requested.
#[derive(Debug, Clone)]
pub struct AttentionRecord<S: Scalar = f32> {
    pub layers: Vec<Tensor<S>>,
    pub per_head: Option<Vec<Tensor<S>>>,
}

/// Detached intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub enum ActivationCache<S: Scalar = f32> {
    /// ViT / Mixer: `[B, tokens, D]` after embedding (entry 0) and after
    /// each block (entries 1..=depth).
    Tokens(Vec<Tensor<S>>),
    /// CNN: `[B, C, H', W']` after each stage.
    Stages(Vec<Tensor<S>>),
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub record_attention: bool,
    pub record_per_head: bool,
    pub cache_activations: bool,
    pub temperature_override: Option<f64>,
}

pub struct ForwardResult<S: Scalar = f32> {
    pub logits: Tensor<S>,
    pub attention: Option<Vec<AttentionRecord<S>>>,
    pub activations: Option<ActivationCache<S>>,
}

/// Output of a forward pass recorded on a caller-supplied tape.
pub struct GraphOutput<S: Scalar = f32> {
    pub logits: Var,
    /// Per layer, batched `[B, N+1, N+1]` head-averaged attention.
    pub attention_layers: Option<Vec<Tensor<S>>>,
    pub attention_heads: Option<Vec<Tensor<S>>>,
    pub activations: Option<ActivationCache<S>>,
    /// Leaf var of every parameter, for gradient reads after backward.
    pub params: BTreeMap<String, Var>,
}

pub(crate) struct GraphOptions {
    pub record_attention: bool,
    pub record_per_head: bool,
    pub cache_activations: bool,
    pub temperature_override: Option<f64>,
    pub params_require_grad: bool,
}

impl GraphOptions {
    fn from_forward(o: &ForwardOptions, params_require_grad: bool) -> Self {
        GraphOptions {
            record_attention: o.record_attention,
            record_per_head: o.record_per_head,
            cache_activations: o.cache_activations,
            temperature_override: o.temperature_override,
            params_require_grad,
        }
    }
}

/// A classifier family plus its parameter tensors, keyed by canonical names.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar = f32> {
    pub spec: ModelSpec,
    params: BTreeMap<String, Tensor<S>>,
}

impl Model<f32> {
    /// Fresh parameters, deterministic per (spec, seed).
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Model<f32>> {
        spec.validate()?;
        let mut params = BTreeMap::new();
        for (i, ps) in spec.param_specs().iter().enumerate() {
            let numel: usize = ps.shape.iter().product();
            let data: Vec<f32> = match ps.init {
                Init::Zeros => vec![0.0; numel],
                Init::Ones => vec![1.0; numel],
                Init::Normal(std) => {
                    let mut rng = rng_from(&[seed, 2, i as u64]);
                    (0..numel).map(|_| (normal_f64(&mut rng) * std) as f32).collect()
                }
            };
            params.insert(ps.name.clone(), Tensor::new(ps.shape.clone(), data)?);
        }
        Ok(Model { spec, params })
    }

    /// Restores a model from raw parameter tensors (checkpoint loading).
    pub fn from_params(spec: ModelSpec, params: BTreeMap<String, Tensor<f32>>) -> Result<Model<f32>> {
        spec.validate()?;
        for ps in spec.param_specs() {
            match params.get(&ps.name) {
                Some(t) if t.shape() == ps.shape.as_slice() => {}
                Some(t) => {
                    return Err(crate::error::FormatError::ShapeMismatch(format!(
                        "{}: expected {:?}, got {:?}",
                        ps.name,
                        ps.shape,
                        t.shape()
                    ))
                    .into())
                }
                None => {
                    return Err(crate::error::FormatError::ShapeMismatch(format!(
                        "missing parameter {}",
                        ps.name
                    ))
                    .into())
                }
            }
        }
        Ok(Model { spec, params })
    }
}

impl<S: Scalar> Model<S> {
    pub fn kind(&self) -> ModelKind {
        self.spec.kind()
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> &Tensor<S> {
        &self.params[name]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor<S> {
        self.params.get_mut(name).expect("unknown parameter")
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            spec: self.spec.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    fn check_geometry(&self, batch_shape: &[usize]) -> Result<()> {
        let (c, h, w) = self.spec.geometry();
        if batch_shape.len() != 4 || batch_shape[1] != c || batch_shape[2] != h || batch_shape[3] != w
        {
            return Err(Error::invalid(format!(
                "input {batch_shape:?} does not match model geometry [B, {c}, {h}, {w}]"
            )));
        }
        Ok(())
    }

    /// Records the forward computation on `tape` starting from `input`
    /// (a `[B, C, H, W]` var already on the tape).
    pub(crate) fn forward_graph(
        &self,
        tape: &mut Tape<S>,
        input: Var,
        opts: &GraphOptions,
    ) -> Result<GraphOutput<S>> {
        self.check_geometry(tape.value(input).shape())?;
        match &self.spec {
            ModelSpec::Vit(spec) => vit::forward(self, spec, tape, input, opts),
            ModelSpec::Cnn(spec) => cnn::forward(self, spec, tape, input, opts),
            ModelSpec::Mixer(spec) => mixer::forward(self, spec, tape, input, opts),
        }
    }

    /// Forward graph with parameter gradients enabled, for training steps.
    pub fn train_graph(
        &self,
        tape: &mut Tape<S>,
        input: Var,
        temperature: f64,
    ) -> Result<GraphOutput<S>> {
        let opts = GraphOptions {
            record_attention: false,
            record_per_head: false,
            cache_activations: false,
            temperature_override: Some(temperature),
            params_require_grad: true,
        };
        self.forward_graph(tape, input, &opts)
    }

    /// Records logits for attack/saliency use: gradients flow to the input,
    /// not to parameters. Temperature may be overridden for ViT.
    pub fn logits_graph(
        &self,
        tape: &mut Tape<S>,
        input: Var,
        temperature_override: Option<f64>,
    ) -> Result<Var> {
        let opts = GraphOptions {
            record_attention: false,
            record_per_head: false,
            cache_activations: false,
            temperature_override,
            params_require_grad: false,
        };
        Ok(self.forward_graph(tape, input, &opts)?.logits)
    }

    /// Plain inference. Pixels must lie in [0,1].
    pub fn forward(&self, batch: &Tensor<S>, opts: &ForwardOptions) -> Result<ForwardResult<S>> {
        if batch.data().iter().any(|v| {
            let x = v.to_f64();
            !(0.0..=1.0).contains(&x)
        }) {
            return Err(Error::invalid("forward: pixels must lie in [0,1]"));
        }
        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone(), false)?;
        let out = self.forward_graph(&mut tape, input, &GraphOptions::from_forward(opts, false))?;
        let logits = tape.value(out.logits).clone();
        let batch_size = batch.shape()[0];
        let attention = out.attention_layers.map(|layers| {
            split_attention_records(&layers, out.attention_heads.as_deref(), batch_size)
        });
        Ok(ForwardResult { logits, attention, activations: out.activations })
    }

    /// Helper used by training: leaves every parameter on the tape with
    /// `requires_grad` and returns their vars.
    pub(crate) fn param_leaves(
        &self,
        tape: &mut Tape<S>,
        requires_grad: bool,
    ) -> Result<BTreeMap<String, Var>> {
        let mut vars = BTreeMap::new();
        for (name, tensor) in &self.params {
            vars.insert(name.clone(), tape.leaf(tensor.clone(), requires_grad)?);
        }
        Ok(vars)
    }
}

fn split_attention_records<S: Scalar>(
    layers: &[Tensor<S>],
    heads: Option<&[Tensor<S>]>,
    batch: usize,
) -> Vec<AttentionRecord<S>> {
    (0..batch)
        .map(|b| AttentionRecord {
            layers: layers.iter().map(|l| l.index_axis0(b).expect("batch index")).collect(),
            per_head: heads.map(|hs| {
                hs.iter().map(|l| l.index_axis0(b).expect("batch index")).collect()
            }),
        })
        .collect()
}

impl Classifier for Model<f32> {
    fn predict(&self, images: &Tensor<f32>) -> Result<Vec<usize>> {
        let out = self.forward(images, &ForwardOptions::default())?;
        let k = self.spec.num_classes();
        Ok(out
            .logits
            .data()
            .chunks_exact(k)
            .map(argmax)
            .collect())
    }
}

// ---- standalone patchify (data-plane version of the tape op) ----

/// Splits a `[C, H, W]` image into the `[N, P*P*C]` patch sequence plus the
/// grid that maps indices back to rectangles. `unpatchify` inverts it.
pub fn patchify(image: &Tensor<f32>, p: usize) -> Result<(Tensor<f32>, PatchGrid)> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::invalid(format!("patchify expects [C,H,W], got {s:?}")));
    }
    let grid = PatchGrid::new(s[1], s[2], p)?;
    let mut tape = Tape::<f32>::new();
    let v = tape.leaf(image.clone().reshaped(vec![1, s[0], s[1], s[2]])?, false)?;
    let patches = tape.patchify(v, p)?;
    let val = tape.value(patches).clone();
    let n = grid.num_patches();
    Ok((val.reshaped(vec![n, p * p * s[0]])?, grid))
}

pub fn unpatchify(patches: &Tensor<f32>, channels: usize, grid: &PatchGrid) -> Result<Tensor<f32>> {
    let (n, p) = (grid.num_patches(), grid.p);
    if patches.shape() != [n, p * p * channels] {
        return Err(Error::invalid(format!(
            "unpatchify: expected [{n}, {}], got {:?}",
            p * p * channels,
            patches.shape()
        )));
    }
    let mut out = Tensor::zeros(vec![channels, grid.h, grid.w]);
    for i in 0..n {
        let (y0, x0) = grid.rect(i)?;
        let src = &patches.data()[i * p * p * channels..(i + 1) * p * p * channels];
        for c in 0..channels {
            for py in 0..p {
                for px in 0..p {
                    out.data_mut()[c * grid.h * grid.w + (y0 + py) * grid.w + (x0 + px)] =
                        src[(c * p + py) * p + px];
                }
            }
        }
    }
    Ok(out)
}

/// Per-token L2 distance between the layer-`layer` embeddings of a clean and
/// a perturbed image (index 0 is the class token). ViT only.
pub fn embedding_deviation(
    model: &Model<f32>,
    clean: &Tensor<f32>,
    perturbed: &Tensor<f32>,
    layer: usize,
    temperature_override: Option<f64>,
) -> Result<Vec<f64>> {
    let spec = match &model.spec {
        ModelSpec::Vit(s) => s,
        _ => return Err(Error::Unsupported("embedding deviation requires a vit model".into())),
    };
    if layer == 0 || layer > spec.depth {
        return Err(Error::invalid(format!(
            "layer {layer} out of range 1..={}",
            spec.depth
        )));
    }
    if clean.shape() != perturbed.shape() {
        return Err(Error::invalid("embedding deviation: geometry mismatch"));
    }
    let opts = ForwardOptions {
        cache_activations: true,
        temperature_override,
        ..Default::default()
    };
    let run = |img: &Tensor<f32>| -> Result<Tensor<f32>> {
        let batch = img.clone().reshaped(vec![
            1,
            img.shape()[0],
            img.shape()[1],
            img.shape()[2],
        ])?;
        let out = model.forward(&batch, &opts)?;
        match out.activations {
            Some(ActivationCache::Tokens(layers)) => Ok(layers[layer].clone()),
            _ => Err(Error::numeric("vit forward produced no token cache")),
        }
    };
    let tokens_clean = run(clean)?;
    let tokens_pert = run(perturbed)?;
    let seq = spec.seq_len();
    let d = spec.embed_dim;
    let mut out = Vec::with_capacity(seq);
    for i in 0..seq {
        let a = &tokens_clean.data()[i * d..(i + 1) * d];
        let b = &tokens_pert.data()[i * d..(i + 1) * d];
        let dist: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| {
                let dv = (*x - *y) as f64;
                dv * dv
            })
            .sum::<f64>()
            .sqrt();
        out.push(dist);
    }
    Ok(out)
}

/// Shared first layer of every family: map [0,1] pixels to [-1,1]. Keeping
/// normalization inside the model keeps attack bounds in pixel space.
pub(crate) fn normalize_pixels<S: Scalar>(tape: &mut Tape<S>, input: Var) -> Result<Var> {
    let centered = tape.add_scalar(input, S::from_f64(-0.5))?;
    tape.mul_scalar(centered, S::from_f64(2.0))
}

/// Linear layer on flattened-leading-dims input: `[R, In] . [In, Out] + b`.
pub(crate) fn linear<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    w: Var,
    b: Var,
) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthSpec;

    #[test]
    fn patchify_examples() {
        // 1x4x4, P=2: four patches of length 4; patch 0 is the top-left block
        let img = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let (patches, grid) = patchify(&img, 2).unwrap();
        assert_eq!(patches.shape(), &[4, 4]);
        assert_eq!(grid.num_patches(), 4);
        assert_eq!(&patches.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);

        // indivisible size is an error
        let bad = Tensor::zeros(vec![1, 6, 6]);
        assert!(patchify(&bad, 4).is_err());

        // random 3x32x32 roundtrip is exact
        let ds = crate::data::synth_shapes(1, 9, &SynthSpec::default());
        let img = ds.image(0).unwrap();
        let (patches, grid) = patchify(&img, 4).unwrap();
        let back = unpatchify(&patches, 3, &grid).unwrap();
        assert_eq!(img.data(), back.data());
    }

    #[test]
    fn model_init_is_deterministic() {
        let a = Model::init(ModelSpec::micro_vit(4), 0).unwrap();
        let b = Model::init(ModelSpec::micro_vit(4), 0).unwrap();
        let c = Model::init(ModelSpec::micro_vit(4), 1).unwrap();
        for (name, t) in a.params() {
            assert_eq!(t.data(), b.param(name).data(), "{name}");
        }
        assert!(a.params().keys().zip(c.params().keys()).all(|(x, y)| x == y));
        assert_ne!(a.param("embed.w").data(), c.param("embed.w").data());
    }

    #[test]
    fn param_specs_match_init() {
        for spec in [
            ModelSpec::micro_vit(10),
            ModelSpec::micro_cnn(10),
            ModelSpec::micro_mixer(10),
        ] {
            let model = Model::init(spec.clone(), 0).unwrap();
            let specs = spec.param_specs();
            assert_eq!(specs.len(), model.params().len());
            for ps in &specs {
                assert_eq!(model.param(&ps.name).shape(), ps.shape.as_slice(), "{}", ps.name);
            }
            // BTreeMap order must agree with sorted spec names
            let mut names: Vec<String> = specs.iter().map(|p| p.name.clone()).collect();
            names.sort();
            let map_names: Vec<String> = model.params().keys().cloned().collect();
            assert_eq!(names, map_names);
        }
    }

    #[test]
    fn deviation_requires_vit() {
        let model = Model::init(ModelSpec::micro_cnn(4), 0).unwrap();
        let img = Tensor::zeros(vec![3, 32, 32]);
        assert!(matches!(
            embedding_deviation(&model, &img, &img, 1, None),
            Err(Error::Unsupported(_))
        ));
    }
}
