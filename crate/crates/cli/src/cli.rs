//! Command-line grammar and resolved configurations.
//!
//! Precedence: built-in defaults < `--config <json>` file < explicit flags.
//! Every run records its fully resolved configuration in the manifest, so
//! fractions like `--step 2/255` appear normalized as decimals.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use patchprobe_core::error::{Error, Result};
use patchprobe_core::train::{Optimizer, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::inputs::parse_fraction;

pub const SEED_ENV: &str = "PATCHPROBE_SEED";

pub fn env_seed() -> u64 {
    std::env::var(SEED_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

#[derive(Parser)]
#[command(
    name = "patchprobe",
    about = "Desk-scale lab for patch-wise robustness of patch-based vision models",
    version
)]
pub struct Cli {
    /// Worker pool size (results are independent of this)
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train one model and write a checkpoint plus a training-log CSV
    Train(TrainArgs),
    /// Train several architectures from one shared config (fair pairs)
    PairTrain(PairTrainArgs),
    /// Adversarial patch attacks over an evaluation set
    Attack(AttackArgs),
    /// Natural patch corruption fooling rates
    CorruptEval(CorruptEvalArgs),
    /// Attention rollout heatmap for one image
    Rollout(RolloutArgs),
    /// Vanilla gradient saliency map for one image
    Saliency(SaliencyArgs),
    /// Per-patch embedding deviation under an adversarial patch
    Deviation(DeviationArgs),
    /// Transferability of adversarial patches under pixel shifts
    Transfer(TransferArgs),
    /// One shared patch noise optimized across images and positions
    SharedAttack(SharedAttackArgs),
    /// Mean iterations to first misclassification
    MinIters(MinItersArgs),
    /// Fooling rate and clean accuracy across attention temperatures
    TempSweep(TempSweepArgs),
    /// Gradient correctness battery (kernels + end-to-end models)
    Gradcheck(GradcheckArgs),
    /// Re-execute a run from its manifest
    Rerun(RerunArgs),
}

fn from_config_file<T: for<'de> Deserialize<'de> + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let bytes = std::fs::read(p)?;
            serde_json::from_slice(&bytes)
                .map_err(|e| Error::invalid(format!("config {}: {e}", p.display())))
        }
    }
}

macro_rules! take {
    ($cfg:expr, $($field:ident),+) => {
        $( if let Some(v) = $field { $cfg.$field = v; } )+
    };
}

// ---- train ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCmdCfg {
    pub arch: String,
    pub data: String,
    pub eval_data: Option<String>,
    pub num_classes: usize,
    pub out: PathBuf,
    pub log: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for TrainCmdCfg {
    fn default() -> Self {
        TrainCmdCfg {
            arch: "vit".into(),
            data: "synth:4096:seed=0".into(),
            eval_data: None,
            num_classes: 4,
            out: PathBuf::from("model.ckpt"),
            log: None,
            train: TrainConfig { seed: env_seed(), ..TrainConfig::default() },
        }
    }
}

#[derive(Args)]
pub struct TrainArgs {
    /// Architecture: vit | cnn | mixer
    #[arg(long)]
    pub arch: Option<String>,
    /// Dataset spec: synth:N[:seed=S] or cifar:PATH
    #[arg(long)]
    pub data: Option<String>,
    /// Held-out dataset spec for the per-epoch accuracy column
    #[arg(long)]
    pub eval_data: Option<String>,
    /// Classifier head width
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Checkpoint output path
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training-log CSV path (default: alongside the checkpoint)
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// JSON file with a full or partial config (defaults < file < flags)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Minibatch size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Optimizer: adamw | sgd_momentum
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Base learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight decay
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Disable cosine learning-rate decay
    #[arg(long)]
    pub no_cosine: bool,
    /// Disable horizontal-flip augmentation
    #[arg(long)]
    pub no_flip: bool,
    /// Attention temperature used during training forwards
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Training seed (env PATCHPROBE_SEED is the last-resort default)
    #[arg(long)]
    pub seed: Option<u64>,
}

impl TrainArgs {
    pub fn resolve(self) -> Result<TrainCmdCfg> {
        let TrainArgs {
            arch,
            data,
            eval_data,
            num_classes,
            out,
            log,
            config,
            epochs,
            batch_size,
            optimizer,
            lr,
            weight_decay,
            no_cosine,
            no_flip,
            temperature,
            seed,
        } = self;
        let mut cfg: TrainCmdCfg = from_config_file(&config)?;
        take!(cfg, arch, data, num_classes, out);
        if eval_data.is_some() {
            cfg.eval_data = eval_data;
        }
        if log.is_some() {
            cfg.log = log;
        }
        take!(cfg.train, epochs, batch_size, lr, weight_decay, temperature, seed);
        if let Some(opt) = optimizer {
            cfg.train.optimizer = parse_optimizer(&opt)?;
        }
        if no_cosine {
            cfg.train.cosine_decay = false;
        }
        if no_flip {
            cfg.train.flip_augment = false;
        }
        Ok(cfg)
    }
}

pub fn parse_optimizer(s: &str) -> Result<Optimizer> {
    match s {
        "adamw" => Ok(Optimizer::AdamW),
        "sgd_momentum" | "sgd" => Ok(Optimizer::SgdMomentum),
        other => Err(Error::invalid(format!("unknown optimizer '{other}'"))),
    }
}

// ---- pair-train ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PairTrainCmdCfg {
    pub archs: Vec<String>,
    pub data: String,
    pub eval_data: Option<String>,
    pub num_classes: usize,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
}

impl Default for PairTrainCmdCfg {
    fn default() -> Self {
        PairTrainCmdCfg {
            archs: vec!["vit".into(), "cnn".into()],
            data: "synth:4096:seed=0".into(),
            eval_data: None,
            num_classes: 4,
            out_dir: PathBuf::from("."),
            train: TrainConfig { seed: env_seed(), ..TrainConfig::default() },
        }
    }
}

#[derive(Args)]
pub struct PairTrainArgs {
    /// Comma-separated architectures, e.g. vit,cnn
    #[arg(long)]
    pub archs: Option<String>,
    /// Dataset spec shared by every architecture
    #[arg(long)]
    pub data: Option<String>,
    /// Held-out dataset spec
    #[arg(long)]
    pub eval_data: Option<String>,
    /// Classifier head width
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Directory for <arch>.ckpt and <arch>.log.csv outputs
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// JSON config file (defaults < file < flags)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training seed
    #[arg(long)]
    pub seed: Option<u64>,
}

impl PairTrainArgs {
    pub fn resolve(self) -> Result<PairTrainCmdCfg> {
        let PairTrainArgs { archs, data, eval_data, num_classes, out_dir, config, epochs, seed } =
            self;
        let mut cfg: PairTrainCmdCfg = from_config_file(&config)?;
        if let Some(a) = archs {
            cfg.archs = a.split(',').map(|s| s.trim().to_string()).collect();
        }
        take!(cfg, data, num_classes, out_dir);
        if eval_data.is_some() {
            cfg.eval_data = eval_data;
        }
        take!(cfg.train, epochs, seed);
        Ok(cfg)
    }
}

// ---- attack ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackCmdCfg {
    pub model: PathBuf,
    pub data: String,
    pub evalset: String,
    pub max_eval: usize,
    pub patches: usize,
    pub iters: usize,
    pub eps: f64,
    pub step: f64,
    pub targeted: Option<usize>,
    /// "random" | "sweep" | comma-separated aligned patch indices
    pub positions: String,
    /// aligned | free
    pub alignment: String,
    pub free_side: usize,
    pub early_stop: bool,
    pub plain_grad: bool,
    pub temperature: Option<f64>,
    pub seed: u64,
    pub report: PathBuf,
    pub heatmap: Option<PathBuf>,
    /// Export the first result's perturbation as raw f32 + JSON sidecar
    pub dump_first: Option<PathBuf>,
}

impl Default for AttackCmdCfg {
    fn default() -> Self {
        AttackCmdCfg {
            model: PathBuf::from("model.ckpt"),
            data: "synth:512:seed=99".into(),
            evalset: "self".into(),
            max_eval: 200,
            patches: 1,
            iters: 250,
            eps: 1.0,
            step: 2.0 / 255.0,
            targeted: None,
            positions: "random".into(),
            alignment: "aligned".into(),
            free_side: 0,
            early_stop: false,
            plain_grad: false,
            temperature: None,
            seed: env_seed(),
            report: PathBuf::from("attack.json"),
            heatmap: None,
            dump_first: None,
        }
    }
}

#[derive(Args)]
pub struct AttackArgs {
    /// Checkpoint of the model under attack
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset spec
    #[arg(long)]
    pub data: Option<String>,
    /// Evalset grammar: self | pair:<a.ckpt,b.ckpt> | all
    #[arg(long)]
    pub evalset: Option<String>,
    /// Evalset size cap
    #[arg(long)]
    pub max_eval: Option<usize>,
    /// Number of adversarial patches per image
    #[arg(long)]
    pub patches: Option<usize>,
    /// Attack iterations
    #[arg(long)]
    pub iters: Option<usize>,
    /// l_inf radius in pixel units; accepts fractions like 8/255
    #[arg(long)]
    pub eps: Option<String>,
    /// Step size in pixel units; accepts fractions like 2/255
    #[arg(long)]
    pub step: Option<String>,
    /// Target class for a targeted attack
    #[arg(long)]
    pub targeted: Option<usize>,
    /// Patch positions: random | comma-separated aligned indices
    #[arg(long)]
    pub positions: Option<String>,
    /// Sweep every aligned position (Fig.-6-style FR grid)
    #[arg(long)]
    pub sweep_positions: bool,
    /// Placement: aligned | free
    #[arg(long)]
    pub alignment: Option<String>,
    /// Square side in pixels for free placement (0 = grid patch size)
    #[arg(long)]
    pub free_side: Option<usize>,
    /// Stop each attack at the first misclassification
    #[arg(long)]
    pub early_stop: bool,
    /// Raw-gradient steps instead of sign steps
    #[arg(long)]
    pub plain_grad: bool,
    /// Evaluation-time attention temperature (smoothed attention defense)
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Attack seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report JSON path
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// FR-grid PGM path (position sweeps only)
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
    /// Export the first perturbation as raw f32 + sidecar
    #[arg(long)]
    pub dump_first: Option<PathBuf>,
    /// JSON config file (defaults < file < flags)
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl AttackArgs {
    pub fn resolve(self) -> Result<AttackCmdCfg> {
        let AttackArgs {
            model,
            data,
            evalset,
            max_eval,
            patches,
            iters,
            eps,
            step,
            targeted,
            positions,
            sweep_positions,
            alignment,
            free_side,
            early_stop,
            plain_grad,
            temperature,
            seed,
            report,
            heatmap,
            dump_first,
            config,
        } = self;
        let mut cfg: AttackCmdCfg = from_config_file(&config)?;
        take!(cfg, model, data, evalset, max_eval, patches, iters, positions, alignment, free_side, seed, report);
        if let Some(e) = eps {
            cfg.eps = parse_fraction(&e)?;
        }
        if let Some(s) = step {
            cfg.step = parse_fraction(&s)?;
        }
        if targeted.is_some() {
            cfg.targeted = targeted;
        }
        if sweep_positions {
            cfg.positions = "sweep".into();
        }
        if early_stop {
            cfg.early_stop = true;
        }
        if plain_grad {
            cfg.plain_grad = true;
        }
        if temperature.is_some() {
            cfg.temperature = temperature;
        }
        if heatmap.is_some() {
            cfg.heatmap = heatmap;
        }
        if dump_first.is_some() {
            cfg.dump_first = dump_first;
        }
        Ok(cfg)
    }
}

// ---- corrupt-eval ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptEvalCmdCfg {
    pub models: Vec<PathBuf>,
    pub data: String,
    pub max_eval: usize,
    /// "all" or comma-separated kind names
    pub kinds: String,
    /// "all" or a single level 1..=5
    pub severity: String,
    pub num_patches: Vec<usize>,
    pub seed: u64,
    pub report: PathBuf,
    pub json: Option<PathBuf>,
}

impl Default for CorruptEvalCmdCfg {
    fn default() -> Self {
        CorruptEvalCmdCfg {
            models: vec![],
            data: "synth:512:seed=99".into(),
            max_eval: 200,
            kinds: "all".into(),
            severity: "5".into(),
            num_patches: vec![16],
            seed: env_seed(),
            report: PathBuf::from("corrupt.csv"),
            json: None,
        }
    }
}

#[derive(Args)]
pub struct CorruptEvalArgs {
    /// Comma-separated model checkpoints (evalset requires all correct)
    #[arg(long)]
    pub models: Option<String>,
    /// Dataset spec
    #[arg(long)]
    pub data: Option<String>,
    /// Evalset size cap
    #[arg(long)]
    pub max_eval: Option<usize>,
    /// Corruption kinds: all | comma-separated names
    #[arg(long)]
    pub kinds: Option<String>,
    /// Severity level 1..=5 or all
    #[arg(long)]
    pub severity: Option<String>,
    /// Comma-separated corrupted-patch counts, e.g. 8,16,32
    #[arg(long)]
    pub num_patches: Option<String>,
    /// Corruption seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Breakdown CSV path
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Optional pooled EvalReport JSON path
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// JSON config file (defaults < file < flags)
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl CorruptEvalArgs {
    pub fn resolve(self) -> Result<CorruptEvalCmdCfg> {
        let CorruptEvalArgs {
            models,
            data,
            max_eval,
            kinds,
            severity,
            num_patches,
            seed,
            report,
            json,
            config,
        } = self;
        let mut cfg: CorruptEvalCmdCfg = from_config_file(&config)?;
        if let Some(m) = models {
            cfg.models = m.split(',').map(PathBuf::from).collect();
        }
        take!(cfg, data, max_eval, kinds, severity, seed, report);
        if let Some(np) = num_patches {
            cfg.num_patches = np
                .split(',')
                .map(|v| v.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::invalid(format!("bad num-patches '{np}'")))?;
        }
        if json.is_some() {
            cfg.json = json;
        }
        if cfg.models.is_empty() {
            return Err(Error::invalid("corrupt-eval needs at least one --models entry"));
        }
        Ok(cfg)
    }
}

// ---- single-image visualization commands ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutCmdCfg {
    pub model: PathBuf,
    pub data: String,
    pub index: usize,
    pub temperature: Option<f64>,
    /// half_identity | renorm
    pub mode: String,
    pub out: PathBuf,
    pub overlay: Option<PathBuf>,
}

impl Default for RolloutCmdCfg {
    fn default() -> Self {
        RolloutCmdCfg {
            model: PathBuf::from("model.ckpt"),
            data: "synth:64:seed=99".into(),
            index: 0,
            temperature: None,
            mode: "half_identity".into(),
            out: PathBuf::from("rollout.pgm"),
            overlay: None,
        }
    }
}

#[derive(Args)]
pub struct RolloutArgs {
    /// ViT checkpoint
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset spec
    #[arg(long)]
    pub data: Option<String>,
    /// Image index within the dataset
    #[arg(long)]
    pub index: Option<usize>,
    /// Evaluation-time attention temperature
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Residual correction: half_identity | renorm
    #[arg(long)]
    pub mode: Option<String>,
    /// Class-token rollout grid PGM path
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional PPM overlay over the image
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    /// JSON config file (defaults < file < flags)
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl RolloutArgs {
    pub fn resolve(self) -> Result<RolloutCmdCfg> {
        let RolloutArgs { model, data, index, temperature, mode, out, overlay, config } = self;
        let mut cfg: RolloutCmdCfg = from_config_file(&config)?;
        take!(cfg, model, data, index, mode, out);
        if temperature.is_some() {
            cfg.temperature = temperature;
        }
        if overlay.is_some() {
            cfg.overlay = overlay;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SaliencyCmdCfg {
    pub model: PathBuf,
    pub data: String,
    pub index: usize,
    /// predicted | truth | an explicit class index
    pub class: String,
    pub out: PathBuf,
    pub overlay: Option<PathBuf>,
}

impl Default for SaliencyCmdCfg {
    fn default() -> Self {
        SaliencyCmdCfg {
            model: PathBuf::from("model.ckpt"),
            data: "synth:64:seed=99".into(),
            index: 0,
            class: "predicted".into(),
            out: PathBuf::from("saliency.pgm"),
            overlay: None,
        }
    }
}

#[derive(Args)]
pub struct SaliencyArgs {
    /// Model checkpoint (any family)
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset spec
    #[arg(long)]
    pub data: Option<String>,
    /// Image index within the dataset
    #[arg(long)]
    pub index: Option<usize>,
    /// Gradient class: predicted | truth | <index>
    #[arg(long)]
    pub class: Option<String>,
    /// Saliency PGM path
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional PPM overlay over the image
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    /// JSON config file (defaults < file < flags)
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl SaliencyArgs {
    pub fn resolve(self) -> Result<SaliencyCmdCfg> {
        let SaliencyArgs { model, data, index, class, out, overlay, config } = self;
        let mut cfg: SaliencyCmdCfg = from_config_file(&config)?;
        take!(cfg, model, data, index, class, out);
        if overlay.is_some() {
            cfg.overlay = overlay;
        }
        Ok(cfg)
    }
}

// ---- deviation ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviationCmdCfg {
    pub model: PathBuf,
    pub data: String,
    pub index: usize,
    pub layer: usize,
    pub patch: usize,
    pub temps: Vec<f64>,
    pub iters: usize,
    pub eps: f64,
    pub step: f64,
    pub seed: u64,
    pub report: PathBuf,
}

impl Default for DeviationCmdCfg {
    fn default() -> Self {
        DeviationCmdCfg {
            model: PathBuf::from("model.ckpt"),
            data: "synth:64:seed=99".into(),
            index: 0,
            layer: 4,
            patch: 27,
            temps: vec![1.0, 8.0],
            iters: 250,
            eps: 1.0,
            step: 2.0 / 255.0,
            seed: env_seed(),
            report: PathBuf::from("deviation.json"),
        }
    }
}

#[derive(Args)]
pub struct DeviationArgs {
    /// ViT checkpoint
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset spec
    #[arg(long)]
    pub data: Option<String>,
    /// Image index within the dataset
    #[arg(long)]
    pub index: Option<usize>,
    /// Layer (1..=depth) whose embeddings are compared
    #[arg(long)]
    pub layer: Option<usize>,
    /// Attacked aligned patch index
    #[arg(long)]
    pub patch: Option<usize>,
    /// Comma-separated temperatures to evaluate, e.g. 1,8
    #[arg(long)]
    pub temps: Option<String>,
    /// Attack iterations
    #[arg(long)]
    pub iters: Option<usize>,
    /// Attack l_inf radius (fractions accepted)
    #[arg(long)]
    pub eps: Option<String>,
    /// Attack step size (fractions accepted)
    #[arg(long)]
    pub step: Option<String>,
    /// Attack seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report JSON path
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// JSON config file (defaults < file < flags)
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl DeviationArgs {
    pub fn resolve(self) -> Result<DeviationCmdCfg> {
        let DeviationArgs {
            model,
            data,
            index,
            layer,
            patch,
            temps,
            iters,
            eps,
            step,
            seed,
            report,
            config,
        } = self;
        let mut cfg: DeviationCmdCfg = from_config_file(&config)?;
        take!(cfg, model, data, index, layer, patch, iters, seed, report);
        if let Some(t) = temps {
            cfg.temps = parse_f64_list(&t)?;
        }
        if let Some(e) = eps {
            cfg.eps = parse_fraction(&e)?;
        }
        if let Some(s) = step {
            cfg.step = parse_fraction(&s)?;
        }
        Ok(cfg)
    }
}

pub fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad number list '{s}'")))
        })
        .collect()
}

// ---- transfer ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferCmdCfg {
    pub model: PathBuf,
    pub target_model: Option<PathBuf>,
    pub data: String,
    pub evalset: String,
    pub max_eval: usize,
    /// Fixed aligned position for every attack (None = random per image)
    pub position: Option<usize>,
    /// "dy,dx" pixel shifts, semicolon-separated for several
    pub shifts: String,
    pub iters: usize,
    pub eps: f64,
    pub step: f64,
    pub seed: u64,
    pub report: PathBuf,
}

impl Default for TransferCmdCfg {
    fn default() -> Self {
        TransferCmdCfg {
            model: PathBuf::from("model.ckpt"),
            target_model: None,
            data: "synth:512:seed=99".into(),
            evalset: "self".into(),
            max_eval: 200,
            position: None,
            shifts: "0,4;0,1".into(),
            iters: 250,
            eps: 1.0,
            step: 2.0 / 255.0,
            seed: env_seed(),
            report: PathBuf::from("transfer.json"),
        }
    }
}

#[derive(Args)]
pub struct TransferArgs {
    /// Checkpoint the patches are optimized against
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Optional different checkpoint to evaluate transfer on
    #[arg(long)]
    pub target_model: Option<PathBuf>,
    /// Dataset spec
    #[arg(long)]
    pub data: Option<String>,
    /// Evalset grammar: self | pair:<ckpts> | all
    #[arg(long)]
    pub evalset: Option<String>,
    /// Evalset size cap
    #[arg(long)]
    pub max_eval: Option<usize>,
    /// Fixed aligned patch position (default: random per image)
    #[arg(long)]
    pub position: Option<usize>,
    /// Shifts "dy,dx", semicolon-separated, e.g. "0,4;0,1"
    #[arg(long)]
    pub shifts: Option<String>,
    /// Attack iterations
    #[arg(long)]
    pub iters: Option<usize>,
    /// Attack l_inf radius (fractions accepted)
    #[arg(long)]
    pub eps: Option<String>,
    /// Attack step size (fractions accepted)
    #[arg(long)]
    pub step: Option<String>,
    /// Attack seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report JSON path
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// JSON config file (defaults < file < flags)
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl TransferArgs {
    pub fn resolve(self) -> Result<TransferCmdCfg> {
        let TransferArgs {
            model,
            target_model,
            data,
            evalset,
            max_eval,
            position,
            shifts,
            iters,
            eps,
            step,
            seed,
            report,
            config,
        } = self;
        let mut cfg: TransferCmdCfg = from_config_file(&config)?;
        take!(cfg, model, data, evalset, max_eval, shifts, iters, seed, report);
        if target_model.is_some() {
            cfg.target_model = target_model;
        }
        if position.is_some() {
            cfg.position = position;
        }
        if let Some(e) = eps {
            cfg.eps = parse_fraction(&e)?;
        }
        if let Some(s) = step {
            cfg.step = parse_fraction(&s)?;
        }
        Ok(cfg)
    }
}

// ---- shared attack ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SharedAttackCmdCfg {
    pub model: PathBuf,
    pub data: String,
    pub train_n: usize,
    pub eval_n: usize,
    pub iters: usize,
    pub step: f64,
    pub minibatch: usize,
    pub seed: u64,
    pub report: PathBuf,
    pub noise_out: Option<PathBuf>,
}

impl Default for SharedAttackCmdCfg {
    fn default() -> Self {
        SharedAttackCmdCfg {
            model: PathBuf::from("model.ckpt"),
            data: "synth:128:seed=99".into(),
            train_n: 32,
            eval_n: 32,
            iters: 250,
            step: 2.0 / 255.0,
            minibatch: 4,
            seed: env_seed(),
            report: PathBuf::from("shared_attack.json"),
            noise_out: None,
        }
    }
}

#[derive(Args)]
pub struct SharedAttackArgs {
    /// Model checkpoint
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset spec; first train_n images optimize, next eval_n evaluate
    #[arg(long)]
    pub data: Option<String>,
    /// Images the shared noise trains on
    #[arg(long)]
    pub train_n: Option<usize>,
    /// Held-out images the noise is evaluated on
    #[arg(long)]
    pub eval_n: Option<usize>,
    /// Attack iterations
    #[arg(long)]
    pub iters: Option<usize>,
    /// Step size (fractions accepted)
    #[arg(long)]
    pub step: Option<String>,
    /// (image, position) samples per iteration
    #[arg(long)]
    pub minibatch: Option<usize>,
    /// Attack seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report JSON path
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Export the shared noise as raw f32 + JSON sidecar
    #[arg(long)]
    pub noise_out: Option<PathBuf>,
    /// JSON config file (defaults < file < flags)
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl SharedAttackArgs {
    pub fn resolve(self) -> Result<SharedAttackCmdCfg> {
        let SharedAttackArgs {
            model,
            data,
            train_n,
            eval_n,
            iters,
            step,
            minibatch,
            seed,
            report,
            noise_out,
            config,
        } = self;
        let mut cfg: SharedAttackCmdCfg = from_config_file(&config)?;
        take!(cfg, model, data, train_n, eval_n, iters, minibatch, seed, report);
        if let Some(s) = step {
            cfg.step = parse_fraction(&s)?;
        }
        if noise_out.is_some() {
            cfg.noise_out = noise_out;
        }
        Ok(cfg)
    }
}

// ---- min-iters ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MinItersCmdCfg {
    pub model: PathBuf,
    pub data: String,
    pub evalset: String,
    pub max_eval: usize,
    pub iters: usize,
    pub eps: f64,
    pub step: f64,
    pub positions_per_image: usize,
    pub seed: u64,
    pub report: PathBuf,
}

impl Default for MinItersCmdCfg {
    fn default() -> Self {
        MinItersCmdCfg {
            model: PathBuf::from("model.ckpt"),
            data: "synth:256:seed=99".into(),
            evalset: "self".into(),
            max_eval: 100,
            iters: 250,
            eps: 1.0,
            step: 2.0 / 255.0,
            positions_per_image: 1,
            seed: env_seed(),
            report: PathBuf::from("min_iters.json"),
        }
    }
}

#[derive(Args)]
pub struct MinItersArgs {
    /// Model checkpoint
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset spec
    #[arg(long)]
    pub data: Option<String>,
    /// Evalset grammar
    #[arg(long)]
    pub evalset: Option<String>,
    /// Evalset size cap
    #[arg(long)]
    pub max_eval: Option<usize>,
    /// Iteration budget per attack
    #[arg(long)]
    pub iters: Option<usize>,
    /// l_inf radius (fractions accepted)
    #[arg(long)]
    pub eps: Option<String>,
    /// Step size (fractions accepted)
    #[arg(long)]
    pub step: Option<String>,
    /// Random positions sampled per image
    #[arg(long)]
    pub positions_per_image: Option<usize>,
    /// Attack seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report JSON path
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// JSON config file (defaults < file < flags)
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl MinItersArgs {
    pub fn resolve(self) -> Result<MinItersCmdCfg> {
        let MinItersArgs {
            model,
            data,
            evalset,
            max_eval,
            iters,
            eps,
            step,
            positions_per_image,
            seed,
            report,
            config,
        } = self;
        let mut cfg: MinItersCmdCfg = from_config_file(&config)?;
        take!(cfg, model, data, evalset, max_eval, iters, positions_per_image, seed, report);
        if let Some(e) = eps {
            cfg.eps = parse_fraction(&e)?;
        }
        if let Some(s) = step {
            cfg.step = parse_fraction(&s)?;
        }
        Ok(cfg)
    }
}

// ---- temp-sweep ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TempSweepCmdCfg {
    pub model: PathBuf,
    pub data: String,
    pub evalset: String,
    pub max_eval: usize,
    pub temps: Vec<f64>,
    pub patches: usize,
    pub iters: usize,
    pub eps: f64,
    pub step: f64,
    pub early_stop: bool,
    pub seed: u64,
    pub report: PathBuf,
}

impl Default for TempSweepCmdCfg {
    fn default() -> Self {
        TempSweepCmdCfg {
            model: PathBuf::from("model.ckpt"),
            data: "synth:512:seed=99".into(),
            evalset: "self".into(),
            max_eval: 200,
            temps: vec![1.0, 2.0, 4.0, 8.0],
            patches: 1,
            iters: 250,
            eps: 1.0,
            step: 2.0 / 255.0,
            early_stop: true,
            seed: env_seed(),
            report: PathBuf::from("temp_sweep.json"),
        }
    }
}

#[derive(Args)]
pub struct TempSweepArgs {
    /// ViT checkpoint
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset spec
    #[arg(long)]
    pub data: Option<String>,
    /// Evalset grammar
    #[arg(long)]
    pub evalset: Option<String>,
    /// Evalset size cap
    #[arg(long)]
    pub max_eval: Option<usize>,
    /// Comma-separated evaluation temperatures
    #[arg(long)]
    pub temps: Option<String>,
    /// Patches per attack
    #[arg(long)]
    pub patches: Option<usize>,
    /// Attack iterations
    #[arg(long)]
    pub iters: Option<usize>,
    /// l_inf radius (fractions accepted)
    #[arg(long)]
    pub eps: Option<String>,
    /// Step size (fractions accepted)
    #[arg(long)]
    pub step: Option<String>,
    /// Disable per-attack early stop
    #[arg(long)]
    pub no_early_stop: bool,
    /// Attack seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report JSON path
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// JSON config file (defaults < file < flags)
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl TempSweepArgs {
    pub fn resolve(self) -> Result<TempSweepCmdCfg> {
        let TempSweepArgs {
            model,
            data,
            evalset,
            max_eval,
            temps,
            patches,
            iters,
            eps,
            step,
            no_early_stop,
            seed,
            report,
            config,
        } = self;
        let mut cfg: TempSweepCmdCfg = from_config_file(&config)?;
        take!(cfg, model, data, evalset, max_eval, patches, iters, seed, report);
        if let Some(t) = temps {
            cfg.temps = parse_f64_list(&t)?;
        }
        if let Some(e) = eps {
            cfg.eps = parse_fraction(&e)?;
        }
        if let Some(s) = step {
            cfg.step = parse_fraction(&s)?;
        }
        if no_early_stop {
            cfg.early_stop = false;
        }
        Ok(cfg)
    }
}

// ---- gradcheck / rerun ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckCmdCfg {
    pub tol: f64,
    pub h: f64,
    pub report: Option<PathBuf>,
}

impl Default for GradcheckCmdCfg {
    fn default() -> Self {
        GradcheckCmdCfg { tol: 1e-4, h: 1e-5, report: None }
    }
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Maximum allowed relative error
    #[arg(long)]
    pub tol: Option<f64>,
    /// Central-difference step
    #[arg(long)]
    pub h: Option<f64>,
    /// Optional JSON report path
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// JSON config file (defaults < file < flags)
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl GradcheckArgs {
    pub fn resolve(self) -> Result<GradcheckCmdCfg> {
        let GradcheckArgs { tol, h, report, config } = self;
        let mut cfg: GradcheckCmdCfg = from_config_file(&config)?;
        take!(cfg, tol, h);
        if report.is_some() {
            cfg.report = report;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
pub struct RerunArgs {
    /// Manifest file written by a previous run
    pub manifest: PathBuf,
}
