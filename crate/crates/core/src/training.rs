//! Adam training with the MSE density loss, the exponential lr schedule,
//! plain-text experiment configs, and the four-variant ablation driver.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::attention::Fusion;
use crate::backbone::{ExtractorConfig, Normalization};
use crate::data::{generate_density_map, resize_scene, AnnotatedScene, DatasetSplit};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MetricsReport};
use crate::grid::DensityMap;
use crate::layers::{layer_rng, ConvGrad, Init};
use crate::model::{build_model, save_checkpoint, Gradients, ModelConfig, ModelVariant, Variant};
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::weights::WeightStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossReduction {
    Mean,
    Sum,
}

impl LossReduction {
    pub fn as_str(self) -> &'static str {
        match self {
            LossReduction::Mean => "mean",
            LossReduction::Sum => "sum",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    Gaussian,
    He,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Experiment configuration. Every field has a config-file key; see
/// [`CONFIG_KEYS`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub input_size: (usize, usize),
    pub sigma: f64,
    pub seed: u64,
    pub variant: Variant,
    /// Used only by SCAR.
    pub fusion: Fusion,
    pub loss_reduction: LossReduction,
    pub gt_scale: f64,
    /// Periodic checkpoint interval in epochs; 0 disables periodic saves.
    pub checkpoint_every: usize,
    pub output_dir: Option<PathBuf>,
    pub width_divisor: usize,
    /// Absolute conv3 width override applied after `width_divisor`.
    pub conv3_channels: Option<usize>,
    pub sam_reduction: usize,
    pub init: InitKind,
    pub init_std: f64,
    pub precision: Precision,
    pub pretrained: Option<PathBuf>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub data_root: PathBuf,
    pub manifest: PathBuf,
    pub synth_scenes: usize,
    pub synth_min_heads: usize,
    pub synth_max_heads: usize,
    pub synth_gradient: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_initial: 1e-5,
            lr_decay: 0.995,
            batch_size: 4,
            epochs: 400,
            input_size: (576, 768),
            sigma: crate::data::DEFAULT_SIGMA,
            seed: 0,
            variant: Variant::Scar,
            fusion: Fusion::Concat,
            loss_reduction: LossReduction::Mean,
            gt_scale: 1.0,
            checkpoint_every: 50,
            output_dir: None,
            width_divisor: 1,
            conv3_channels: None,
            sam_reduction: 1,
            init: InitKind::Gaussian,
            init_std: 0.01,
            precision: Precision::F32,
            pretrained: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            data_root: PathBuf::from("."),
            manifest: PathBuf::from("manifest.tsv"),
            synth_scenes: 20,
            synth_min_heads: 5,
            synth_max_heads: 40,
            synth_gradient: false,
        }
    }
}

/// Config keys with one-line descriptions, in rendering order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("lr_initial", "initial learning rate"),
    ("lr_decay", "per-epoch learning rate multiplier, in (0, 1]"),
    ("batch_size", "images per optimizer step"),
    ("epochs", "passes over the training split"),
    ("input_size", "training/inference resolution as HxW"),
    ("sigma", "ground-truth Gaussian std in pixels"),
    ("seed", "seed for initialization, data order and synthesis"),
    ("variant", "FCN, FCN+SAM, FCN+CAM or SCAR"),
    ("fusion", "SCAR branch fusion: concat or sum"),
    ("loss_reduction", "per-pixel loss reduction: mean or sum"),
    ("gt_scale", "constant multiplier on ground-truth maps"),
    ("checkpoint_every", "periodic checkpoint interval in epochs (0 = off)"),
    ("output_dir", "directory for checkpoints, logs and reports"),
    ("width_divisor", "divide every backbone/dilation width by this"),
    ("conv3_channels", "absolute conv3 width override (0 = default)"),
    ("sam_reduction", "channel reduction of the SAM S1/S2 projections"),
    ("init", "random initialization: gaussian or he"),
    ("init_std", "std of gaussian initialization"),
    ("precision", "arithmetic precision: f32 or f64"),
    ("pretrained", "VGG weight directory (empty = random init)"),
    ("adam_beta1", "Adam first-moment decay"),
    ("adam_beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam denominator epsilon"),
    ("data_root", "directory image paths are relative to"),
    ("manifest", "annotation manifest path"),
    ("synth_scenes", "scenes written by synth"),
    ("synth_min_heads", "minimum heads per synthetic scene"),
    ("synth_max_heads", "maximum heads per synthetic scene"),
    ("synth_gradient", "synthetic heads follow a left-to-right density gradient"),
];

fn parse_num<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for {key}"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl TrainConfig {
    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            config
                .set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, config_reason(e))))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Apply one override. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr_initial" => self.lr_initial = parse_num(key, value)?,
            "lr_decay" => self.lr_decay = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "input_size" => {
                let (h, w) = value
                    .split_once(['x', 'X'])
                    .ok_or_else(|| Error::Config(format!("input_size must be HxW, got {value:?}")))?;
                self.input_size = (parse_num(key, h.trim())?, parse_num(key, w.trim())?);
            }
            "sigma" => self.sigma = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "variant" => self.variant = Variant::parse(value)?,
            "fusion" => self.fusion = Fusion::parse(value)?,
            "loss_reduction" => {
                self.loss_reduction = match value {
                    "mean" => LossReduction::Mean,
                    "sum" => LossReduction::Sum,
                    _ => return Err(Error::Config(format!("loss_reduction must be mean or sum, got {value:?}"))),
                }
            }
            "gt_scale" => self.gt_scale = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "output_dir" => self.output_dir = opt_path(value),
            "width_divisor" => self.width_divisor = parse_num(key, value)?,
            "conv3_channels" => {
                let c: usize = parse_num(key, value)?;
                self.conv3_channels = (c > 0).then_some(c);
            }
            "sam_reduction" => self.sam_reduction = parse_num(key, value)?,
            "init" => {
                self.init = match value {
                    "gaussian" => InitKind::Gaussian,
                    "he" => InitKind::He,
                    _ => return Err(Error::Config(format!("init must be gaussian or he, got {value:?}"))),
                }
            }
            "init_std" => self.init_std = parse_num(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("precision must be f32 or f64, got {value:?}"))),
                }
            }
            "pretrained" => self.pretrained = opt_path(value),
            "adam_beta1" => self.adam_beta1 = parse_num(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_num(key, value)?,
            "adam_eps" => self.adam_eps = parse_num(key, value)?,
            "data_root" => self.data_root = PathBuf::from(value),
            "manifest" => self.manifest = PathBuf::from(value),
            "synth_scenes" => self.synth_scenes = parse_num(key, value)?,
            "synth_min_heads" => self.synth_min_heads = parse_num(key, value)?,
            "synth_max_heads" => self.synth_max_heads = parse_num(key, value)?,
            "synth_gradient" => self.synth_gradient = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "lr_initial" => self.lr_initial.to_string(),
            "lr_decay" => self.lr_decay.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "input_size" => format!("{}x{}", self.input_size.0, self.input_size.1),
            "sigma" => self.sigma.to_string(),
            "seed" => self.seed.to_string(),
            "variant" => self.variant.to_string(),
            "fusion" => self.fusion.as_str().to_string(),
            "loss_reduction" => self.loss_reduction.as_str().to_string(),
            "gt_scale" => self.gt_scale.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "output_dir" => path_str(&self.output_dir),
            "width_divisor" => self.width_divisor.to_string(),
            "conv3_channels" => self.conv3_channels.unwrap_or(0).to_string(),
            "sam_reduction" => self.sam_reduction.to_string(),
            "init" => match self.init {
                InitKind::Gaussian => "gaussian".into(),
                InitKind::He => "he".into(),
            },
            "init_std" => self.init_std.to_string(),
            "precision" => self.precision.as_str().to_string(),
            "pretrained" => path_str(&self.pretrained),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "data_root" => self.data_root.display().to_string(),
            "manifest" => self.manifest.display().to_string(),
            "synth_scenes" => self.synth_scenes.to_string(),
            "synth_min_heads" => self.synth_min_heads.to_string(),
            "synth_max_heads" => self.synth_max_heads.to_string(),
            "synth_gradient" => self.synth_gradient.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return fail("lr_initial must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail("lr_decay must be in (0, 1]");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return fail("input_size must be positive");
        }
        crate::backbone::check_divisible(self.input_size.0, self.input_size.1)?;
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return fail("sigma must be positive");
        }
        if !(self.gt_scale > 0.0 && self.gt_scale.is_finite()) {
            return fail("gt_scale must be positive");
        }
        if self.width_divisor == 0 || self.sam_reduction == 0 {
            return fail("width_divisor and sam_reduction must be at least 1");
        }
        if self.synth_min_heads > self.synth_max_heads {
            return fail("synth_min_heads exceeds synth_max_heads");
        }
        Ok(())
    }

    /// Every key as `key = value`, loadable by [`TrainConfig::parse`].
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (key, _) in CONFIG_KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    /// Fusion argument for `build_model`: present only for SCAR.
    pub fn fusion_for_variant(&self) -> Option<Fusion> {
        (self.variant == Variant::Scar).then_some(self.fusion)
    }

    pub fn extractor(&self) -> ExtractorConfig {
        let mut e = ExtractorConfig::scaled(self.width_divisor);
        if let Some(c) = self.conv3_channels {
            e.stage_channels[2] = c;
        }
        e
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            extractor: self.extractor(),
            sam_reduction: self.sam_reduction,
            init: match self.init {
                InitKind::Gaussian => Init::Gaussian { std: self.init_std },
                InitKind::He => Init::He,
            },
            seed: self.seed,
            normalization: if self.pretrained.is_some() {
                Normalization::ImageNet
            } else {
                Normalization::Unit
            },
            output_scale: self.gt_scale,
            input_size: self.input_size,
        }
    }
}

fn config_reason(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// `lr_initial * lr_decay^epoch`.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    config.lr_initial * config.lr_decay.powi(epoch as i32)
}

/// Pixel-mean squared difference.
pub fn mse_loss(pred: &DensityMap, gt: &DensityMap) -> Result<f64> {
    pred.ensure_same_shape(gt, "mse_loss")?;
    let n = pred.values().len().max(1) as f64;
    Ok(pred.values().iter().zip(gt.values()).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / n)
}

/// Loss and its gradient with respect to `pred`.
pub fn loss_and_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, reduction: LossReduction) -> Result<(f64, Tensor<T>)> {
    pred.ensure_shape(target, "loss")?;
    let norm = match reduction {
        LossReduction::Mean => pred.data().len().max(1) as f64,
        LossReduction::Sum => 1.0,
    };
    let mut sq = 0.0;
    let scale = T::lit(2.0 / norm);
    let grad: Vec<T> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            sq += d.as_f64() * d.as_f64();
            d * scale
        })
        .collect();
    let (c, h, w) = pred.shape();
    Ok((sq / norm, Tensor::from_vec(c, h, w, grad)?))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<ConvGrad<T>>,
    v: Vec<ConvGrad<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &ModelVariant<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = Gradients::zeros_like(model).convs;
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, model: &mut ModelVariant<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let c1 = T::lit(1.0 / (1.0 - self.beta1.powi(self.step)));
        let c2 = T::lit(1.0 / (1.0 - self.beta2.powi(self.step)));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        let update = |p: &mut [T], g: &[T], m: &mut [T], v: &mut [T]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                p[i] -= lr * (m[i] * c1) / ((v[i] * c2).sqrt() + eps);
            }
        };
        for (((conv, g), m), v) in model.convs_mut().into_iter().zip(&grads.convs).zip(&mut self.m).zip(&mut self.v) {
            update(conv.weight_mut(), &g.weight, &mut m.weight, &mut v.weight);
            update(conv.bias_mut(), &g.bias, &mut m.bias, &mut v.bias);
        }
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={}\tlr={:e}\tloss={:e}\twall_s={:.3}",
            self.epoch, self.lr, self.mean_loss, self.wall_seconds
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub final_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.mean_loss)
    }

    /// One record per line.
    pub fn render(&self) -> String {
        self.epochs.iter().map(|r| format!("{r}\n")).collect()
    }
}

/// A scene resized to the training resolution with its scaled target.
pub struct Sample<T> {
    pub scene_id: String,
    pub image: Tensor<T>,
    pub target: Tensor<T>,
}

pub fn prepare_samples<T: Scalar>(scenes: &[AnnotatedScene], config: &TrainConfig) -> Result<Vec<Sample<T>>> {
    let norm = config.model_config().normalization;
    par::map_slice(scenes, |scene| {
        let scene = resize_scene(scene, config.input_size)?;
        let gt = generate_density_map(scene.head_points(), config.input_size, config.sigma)?;
        let (h, w) = gt.resolution();
        let target = Tensor::from_vec(1, h, w, gt.values().iter().map(|v| T::lit(v * config.gt_scale)).collect())?;
        Ok(Sample {
            scene_id: scene.scene_id().to_string(),
            image: crate::backbone::image_to_tensor(scene.image(), norm),
            target,
        })
    })
    .into_iter()
    .collect()
}

/// Batch order of `epoch`: a permutation that depends only on (seed, epoch).
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut layer_rng(seed, &format!("epoch_{epoch}")));
    order
}

/// One optimizer step on `batch`; returns the mean item loss.
pub fn train_step<T: Scalar>(
    model: &mut ModelVariant<T>,
    adam: &mut Adam<T>,
    batch: &[&Sample<T>],
    lr: f64,
    reduction: LossReduction,
) -> Result<(f64, Gradients<T>)> {
    let frozen = &*model;
    let items = par::map_slice(batch, |s| -> Result<(f64, Gradients<T>)> {
        let (out, tape) = frozen.forward_train(&s.image)?;
        let (loss, d_out) = loss_and_grad(&out, &s.target, reduction)?;
        Ok((loss, frozen.backward(&tape, &d_out)?))
    });
    let mut total = Gradients::zeros_like(model);
    let mut loss = 0.0;
    for item in items {
        let (l, g) = item?;
        loss += l;
        total.add_assign(&g);
    }
    let n = batch.len() as f64;
    total.scale(T::lit(1.0 / n));
    let loss = loss / n;
    if loss.is_finite() {
        adam.step(model, &total, lr);
    }
    Ok((loss, total))
}

/// Build a model from `config` (loading pretrained VGG weights if named).
pub fn init_model<T: Scalar>(config: &TrainConfig) -> Result<ModelVariant<T>> {
    config.validate()?;
    let pretrained = config.pretrained.as_ref().map(WeightStore::read_dir).transpose()?;
    build_model(config.variant, config.fusion_for_variant(), &config.model_config(), pretrained.as_ref())
}

pub fn train<T: Scalar>(config: &TrainConfig, split: &DatasetSplit) -> Result<(ModelVariant<T>, TrainLog)> {
    train_with(config, split, |_| {})
}

/// [`train`] with a per-epoch callback.
pub fn train_with<T: Scalar>(
    config: &TrainConfig,
    split: &DatasetSplit,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelVariant<T>, TrainLog)> {
    if split.train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let mut model = init_model::<T>(config)?;
    let samples = prepare_samples::<T>(&split.train, config)?;
    let mut adam = Adam::new(&model, config.adam_beta1, config.adam_beta2, config.adam_eps);
    let mut log = TrainLog::default();
    let mut best = f64::INFINITY;
    let start = Instant::now();
    if let Some(dir) = &config.output_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("config.txt"), &config.render())?;
    }
    for epoch in 0..config.epochs {
        let lr = lr_at(config, epoch);
        let order = epoch_order(config.seed, epoch, samples.len());
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, _) = train_step(&mut model, &mut adam, &batch, lr, config.loss_reduction)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    loss,
                    scenes: batch.iter().map(|s| s.scene_id.as_str()).collect::<Vec<_>>().join(", "),
                });
            }
            epoch_loss += loss * batch.len() as f64;
        }
        let record = EpochRecord {
            epoch,
            lr,
            mean_loss: epoch_loss / samples.len() as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        if let Some(dir) = &config.output_dir {
            append_text(&dir.join("train_log.txt"), &format!("{record}\n"))?;
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
                save_checkpoint(&model, dir.join(format!("checkpoint_epoch_{:04}", epoch + 1)))?;
            }
            if record.mean_loss < best {
                let path = dir.join("checkpoint_best");
                save_checkpoint(&model, &path)?;
                log.best_checkpoint = Some(path);
            }
        }
        best = best.min(record.mean_loss);
        log.epochs.push(record);
    }
    if let Some(dir) = &config.output_dir {
        let path = dir.join("checkpoint_final");
        save_checkpoint(&model, &path)?;
        log.final_checkpoint = Some(path);
    }
    Ok((model, log))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_text(path: &Path, text: &str) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub fusion: Option<Fusion>,
    pub report: MetricsReport,
    pub final_train_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Markdown table: Method, MAE, MSE, PSNR, SSIM.
    pub fn render(&self) -> String {
        let mut out = String::from("| Method | MAE | MSE | PSNR | SSIM |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            let m = &r.report;
            let _ = writeln!(out, "| {} | {:.2} | {:.2} | {:.2} | {:.2} |", r.variant, m.mae, m.mse, m.psnr, m.ssim);
        }
        out
    }

    /// Final-epoch training loss per variant, one `variant\tloss` line each.
    pub fn render_losses(&self) -> String {
        self.rows
            .iter()
            .map(|r| format!("{}\t{:e}\n", r.variant, r.final_train_loss))
            .collect()
    }
}

/// Train and evaluate all four variants from one base config (same seed,
/// same data order). Metrics are computed on `split.test`. With an output
/// directory each variant writes into its own subdirectory.
pub fn run_ablation<T: Scalar>(base: &TrainConfig, split: &DatasetSplit) -> Result<AblationTable> {
    run_ablation_with::<T>(base, split, |_, _| {})
}

pub fn run_ablation_with<T: Scalar>(
    base: &TrainConfig,
    split: &DatasetSplit,
    mut on_epoch: impl FnMut(Variant, &EpochRecord),
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let mut config = base.clone();
        config.variant = variant;
        config.output_dir = base.output_dir.as_ref().map(|d| d.join(variant_slug(variant)));
        let (model, log) = train_with::<T>(&config, split, |r| on_epoch(variant, r))?;
        let report = evaluate(&model, &split.test, config.sigma)?;
        rows.push(AblationRow {
            variant,
            fusion: config.fusion_for_variant(),
            report,
            final_train_loss: log.final_loss().unwrap_or(f64::NAN),
        });
    }
    Ok(AblationTable { rows })
}

/// Filesystem-safe variant name.
pub fn variant_slug(variant: Variant) -> String {
    variant.name().to_ascii_lowercase().replace('+', "_")
}
