//! The four ablation variants (FCN, FCN+SAM, FCN+CAM, SCAR): feature
//! extractor, optional attention branches, 1x1 regression to one channel with
//! ReLU, and a sum-preserving bilinear x8 upsample.

use std::fmt;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use image::RgbImage;

use crate::attention::{fuse, fuse_backward, CamTape, ChannelAttention, Fusion, SamTape, SpatialAttention};
use crate::backbone::{
    check_divisible, image_to_tensor, load_conv, store_conv, ExtractorConfig, FeatureExtractor, LayerSpec,
    Normalization, StackTape, OUTPUT_STRIDE,
};
use crate::error::{Error, Result};
use crate::grid::{DensityMap, Grid};
use crate::layers::{layer_rng, upsample_density, upsample_density_backward, Conv2d, ConvGrad, Init};
use crate::scalar::Scalar;
use crate::tensor::{relu_backward_inplace, relu_inplace, FeatureMap, Tensor};
use crate::weights::WeightStore;

pub const CHECKPOINT_FORMAT: &str = "SCARCKPT1";
pub const REGRESSION_LAYER: &str = "regression";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Fcn,
    FcnSam,
    FcnCam,
    Scar,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Fcn, Variant::FcnSam, Variant::FcnCam, Variant::Scar];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fcn => "FCN",
            Variant::FcnSam => "FCN+SAM",
            Variant::FcnCam => "FCN+CAM",
            Variant::Scar => "SCAR",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model variant {s:?} (expected FCN, FCN+SAM, FCN+CAM or SCAR)")))
    }

    pub fn has_sam(self) -> bool {
        matches!(self, Variant::FcnSam | Variant::Scar)
    }

    pub fn has_cam(self) -> bool {
        matches!(self, Variant::FcnCam | Variant::Scar)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture and initialization settings shared by all variants.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    /// Channel reduction of SAM's `S1`/`S2` projections (1 = none).
    pub sam_reduction: usize,
    pub init: Init,
    pub seed: u64,
    pub normalization: Normalization,
    /// Constant the ground truth was multiplied by during training; raw
    /// network output is divided by it.
    pub output_scale: f64,
    /// Resolution images are resized to before inference.
    pub input_size: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            extractor: ExtractorConfig::STANDARD,
            sam_reduction: 1,
            init: Init::Gaussian { std: 0.01 },
            seed: 0,
            normalization: Normalization::Unit,
            output_scale: 1.0,
            input_size: (576, 768),
        }
    }
}

/// A built model of one ablation variant.
type Attended<T> = (FeatureMap<T>, Option<FeatureMap<T>>, Option<FeatureMap<T>>);

#[derive(Clone, Debug, PartialEq)]
pub struct ModelVariant<T> {
    variant: Variant,
    fusion: Option<Fusion>,
    config: ModelConfig,
    extractor: FeatureExtractor<T>,
    sam: Option<SpatialAttention<T>>,
    cam: Option<ChannelAttention<T>>,
    regression: Conv2d<T>,
}

/// Per-parameter gradients ordered as [`ModelVariant::convs`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub convs: Vec<ConvGrad<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(model: &ModelVariant<T>) -> Self {
        Gradients {
            convs: model.convs().into_iter().map(ConvGrad::zeros_like).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.convs {
            g.scale(s);
        }
    }
}

/// Intermediates of a training forward pass.
#[derive(Clone, Debug)]
pub struct ModelTape<T> {
    backbone: StackTape<T>,
    dilation: StackTape<T>,
    sam: Option<(FeatureMap<T>, SamTape<T>)>,
    cam: Option<(FeatureMap<T>, CamTape<T>)>,
    fused: FeatureMap<T>,
    regressed: Tensor<T>,
}

/// A named 2-D activation captured during prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub label: String,
    pub grid: Grid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionResult {
    pub density: DensityMap,
    /// Exactly `density.sum()`.
    pub count: f64,
    pub attention_snapshots: Vec<Snapshot>,
}

/// Wire a variant. `fusion` must be given for SCAR and only for SCAR.
pub fn build_model<T: Scalar>(
    variant: Variant,
    fusion: Option<Fusion>,
    config: &ModelConfig,
    pretrained: Option<&WeightStore>,
) -> Result<ModelVariant<T>> {
    match (variant, fusion) {
        (Variant::Scar, None) => {
            return Err(Error::InvalidArgument("SCAR requires a fusion strategy (concat or sum)".into()))
        }
        (v, Some(_)) if v != Variant::Scar => {
            return Err(Error::InvalidArgument(format!("fusion is only meaningful for SCAR, not {v}")))
        }
        _ => {}
    }
    let extractor = FeatureExtractor::new(&config.extractor, config.init, config.seed, pretrained)?;
    let c = extractor.out_channels();
    let sam = variant
        .has_sam()
        .then(|| SpatialAttention::new(c, config.sam_reduction, config.init, config.seed));
    let cam = variant.has_cam().then(|| ChannelAttention::new(c, config.init, config.seed));
    let regression_in = fusion.map_or(c, |f| f.output_channels(c));
    let regression = Conv2d::new(
        REGRESSION_LAYER,
        regression_in,
        1,
        1,
        1,
        config.init,
        &mut layer_rng(config.seed, REGRESSION_LAYER),
    );
    Ok(ModelVariant {
        variant,
        fusion,
        config: config.clone(),
        extractor,
        sam,
        cam,
        regression,
    })
}

impl<T: Scalar> ModelVariant<T> {
    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn fusion(&self) -> Option<Fusion> {
        self.fusion
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set_output_scale(&mut self, scale: f64) {
        self.config.output_scale = scale;
    }

    pub fn set_input_size(&mut self, size: (usize, usize)) {
        self.config.input_size = size;
    }

    pub fn extractor(&self) -> &FeatureExtractor<T> {
        &self.extractor
    }

    pub fn extractor_mut(&mut self) -> &mut FeatureExtractor<T> {
        &mut self.extractor
    }

    pub fn sam(&self) -> Option<&SpatialAttention<T>> {
        self.sam.as_ref()
    }

    pub fn sam_mut(&mut self) -> Option<&mut SpatialAttention<T>> {
        self.sam.as_mut()
    }

    pub fn cam(&self) -> Option<&ChannelAttention<T>> {
        self.cam.as_ref()
    }

    pub fn cam_mut(&mut self) -> Option<&mut ChannelAttention<T>> {
        self.cam.as_mut()
    }

    pub fn regression(&self) -> &Conv2d<T> {
        &self.regression
    }

    pub fn regression_mut(&mut self) -> &mut Conv2d<T> {
        &mut self.regression
    }

    /// Input channel count of the regression layer.
    pub fn regression_channels(&self) -> usize {
        self.regression.in_channels()
    }

    /// Every parameterized layer: backbone, dilation, SAM, CAM, regression.
    pub fn convs(&self) -> Vec<&Conv2d<T>> {
        let mut out = self.extractor.backbone.convs();
        out.extend(self.extractor.dilation.convs());
        if let Some(sam) = &self.sam {
            out.extend(sam.convs());
        }
        if let Some(cam) = &self.cam {
            out.extend(cam.convs());
        }
        out.push(&self.regression);
        out
    }

    pub fn convs_mut(&mut self) -> Vec<&mut Conv2d<T>> {
        let mut out = self.extractor.backbone.convs_mut();
        out.extend(self.extractor.dilation.convs_mut());
        if let Some(sam) = &mut self.sam {
            out.extend(sam.convs_mut());
        }
        if let Some(cam) = &mut self.cam {
            out.extend(cam.convs_mut());
        }
        out.push(&mut self.regression);
        out
    }

    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|c| c.param_count()).sum()
    }

    /// The full layer table, extractor through upsample.
    pub fn layer_specs(&self) -> Vec<(String, LayerSpec)> {
        let mut out: Vec<(String, LayerSpec)> = Vec::new();
        for spec in self.extractor.backbone.specs() {
            out.push(("backbone".into(), spec));
        }
        for spec in self.extractor.dilation.specs() {
            out.push(("dilation".into(), spec));
        }
        out.push((
            "regression".into(),
            LayerSpec::conv(1, 1, 1, crate::backbone::Activation::Relu),
        ));
        out.push(("regression".into(), LayerSpec::upsample(OUTPUT_STRIDE)));
        out
    }

    fn features(&self, image: &Tensor<T>) -> Result<FeatureMap<T>> {
        crate::backbone::extract_features(&self.extractor, image)
    }

    /// Fused features plus the SAM and CAM outputs when present.
    fn attend(&self, f: &FeatureMap<T>) -> Result<Attended<T>> {
        let sam_out = self.sam.as_ref().map(|s| s.forward(f)).transpose()?;
        let cam_out = self.cam.as_ref().map(|c| c.forward(f)).transpose()?;
        let fused = match (&sam_out, &cam_out) {
            (Some(s), Some(c)) => fuse(s, c, self.fusion.expect("SCAR has a fusion strategy"))?,
            (Some(s), None) => s.clone(),
            (None, Some(c)) => c.clone(),
            (None, None) => f.clone(),
        };
        Ok((fused, sam_out, cam_out))
    }

    fn regress(&self, fused: &FeatureMap<T>) -> Result<Tensor<T>> {
        let mut r = self.regression.forward(fused)?;
        relu_inplace(r.data_mut());
        Ok(r)
    }

    /// Network output at input resolution (`1 x H x W`), before the
    /// output-scale division.
    pub fn forward_raw(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self.features(image)?;
        let (fused, _, _) = self.attend(&f)?;
        Ok(upsample_density(&self.regress(&fused)?, OUTPUT_STRIDE))
    }

    pub fn forward_train(&self, image: &Tensor<T>) -> Result<(Tensor<T>, ModelTape<T>)> {
        check_divisible(image.height(), image.width())?;
        let backbone = self.extractor.backbone.forward_train(image)?;
        let dilation = self.extractor.dilation.forward_train(backbone.output())?;
        let f = dilation.output();
        let sam = self.sam.as_ref().map(|s| s.forward_train(f)).transpose()?;
        let cam = self.cam.as_ref().map(|c| c.forward_train(f)).transpose()?;
        let fused = match (&sam, &cam) {
            (Some((s, _)), Some((c, _))) => fuse(s, c, self.fusion.expect("SCAR has a fusion strategy"))?,
            (Some((s, _)), None) => s.clone(),
            (None, Some((c, _))) => c.clone(),
            (None, None) => f.clone(),
        };
        let regressed = self.regress(&fused)?;
        let out = upsample_density(&regressed, OUTPUT_STRIDE);
        Ok((
            out,
            ModelTape {
                backbone,
                dilation,
                sam,
                cam,
                fused,
                regressed,
            },
        ))
    }

    /// Gradients of a scalar loss given `d_out = dLoss / d(forward_raw)`.
    pub fn backward(&self, tape: &ModelTape<T>, d_out: &Tensor<T>) -> Result<Gradients<T>> {
        let mut grads = Gradients::zeros_like(self);
        let n_backbone = self.extractor.backbone.convs().len();
        let n_dilation = self.extractor.dilation.convs().len();
        let n_sam = if self.sam.is_some() { 4 } else { 0 };
        let n_cam = if self.cam.is_some() { 2 } else { 0 };
        let (g_backbone, rest) = grads.convs.split_at_mut(n_backbone);
        let (g_dilation, rest) = rest.split_at_mut(n_dilation);
        let (g_sam, rest) = rest.split_at_mut(n_sam);
        let (g_cam, g_regression) = rest.split_at_mut(n_cam);

        let mut d_reg = upsample_density_backward(d_out, OUTPUT_STRIDE);
        relu_backward_inplace(tape.regressed.data(), d_reg.data_mut());
        let d_fused = self
            .regression
            .backward(&tape.fused, &d_reg, &mut g_regression[0], true)?
            .expect("input gradient requested");

        let f = tape.dilation.output();
        let d_features = match (&self.sam, &self.cam, &tape.sam, &tape.cam) {
            (Some(sam), Some(cam), Some((_, st)), Some((_, ct))) => {
                let (d_sam, d_cam) = fuse_backward(&d_fused, self.fusion.expect("SCAR has a fusion strategy"));
                let mut df = sam.backward(f, st, &d_sam, g_sam)?;
                df.add_assign(&cam.backward(f, ct, &d_cam, g_cam)?);
                df
            }
            (Some(sam), None, Some((_, st)), None) => sam.backward(f, st, &d_fused, g_sam)?,
            (None, Some(cam), None, Some((_, ct))) => cam.backward(f, ct, &d_fused, g_cam)?,
            _ => d_fused,
        };
        let d_backbone_out = self
            .extractor
            .dilation
            .backward(&tape.dilation, d_features, g_dilation, true)?
            .expect("input gradient requested");
        self.extractor
            .backbone
            .backward(&tape.backbone, d_backbone_out, g_backbone, false)?;
        Ok(grads)
    }

    pub fn image_tensor(&self, image: &RgbImage) -> Tensor<T> {
        image_to_tensor(image, self.config.normalization)
    }
}

/// Density prediction for a normalized `3 x H x W` image.
pub fn predict_density<T: Scalar>(model: &ModelVariant<T>, image: &Tensor<T>) -> Result<PredictionResult> {
    let raw = model.forward_raw(image)?;
    Ok(to_prediction(model, &raw, Vec::new()))
}

fn to_prediction<T: Scalar>(model: &ModelVariant<T>, raw: &Tensor<T>, attention_snapshots: Vec<Snapshot>) -> PredictionResult {
    let inv = 1.0 / model.config.output_scale;
    let density = Grid::from_vec(
        raw.height(),
        raw.width(),
        raw.data().iter().map(|v| v.as_f64() * inv).collect(),
    )
    .expect("1-channel output");
    let count = density.sum();
    PredictionResult {
        density,
        count,
        attention_snapshots,
    }
}

/// Prediction plus the post-attention feature channels `channels` of every
/// attention branch, labelled `sam_ch<k>` / `cam_ch<k>`.
pub fn predict_with_attention<T: Scalar>(
    model: &ModelVariant<T>,
    image: &Tensor<T>,
    channels: &[usize],
) -> Result<PredictionResult> {
    let f = model.features(image)?;
    let (fused, sam_out, cam_out) = model.attend(&f)?;
    let raw = upsample_density(&model.regress(&fused)?, OUTPUT_STRIDE);
    let mut snapshots = Vec::new();
    for (label, out) in [("sam", &sam_out), ("cam", &cam_out)] {
        if let Some(out) = out {
            for &k in channels {
                if k >= out.channels() {
                    return Err(Error::InvalidArgument(format!(
                        "channel index {k} out of range for {}-channel attention output",
                        out.channels()
                    )));
                }
                let grid = Grid::from_vec(out.height(), out.width(), out.plane(k).iter().map(|v| v.as_f64()).collect())?;
                snapshots.push(Snapshot {
                    label: format!("{label}_ch{k}"),
                    grid,
                });
            }
        }
    }
    Ok(to_prediction(model, &raw, snapshots))
}

/// Key-value metadata stored next to checkpoint weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub format: String,
    pub variant: Variant,
    pub fusion: Option<Fusion>,
    pub precision: String,
    pub config: ModelConfig,
    pub created: u64,
    pub config_hash: String,
}

fn join(values: &[usize]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn architecture_string(variant: Variant, fusion: Option<Fusion>, config: &ModelConfig) -> String {
    format!(
        "{};{};{};{};{};{};{}x{}",
        variant.name(),
        fusion.map_or("none", Fusion::as_str),
        join(&config.extractor.stage_channels),
        join(&config.extractor.dilation_channels),
        config.sam_reduction,
        config.normalization.as_str(),
        config.input_size.0,
        config.input_size.1
    )
}

fn fnv64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl CheckpointMeta {
    fn render(&self) -> String {
        let c = &self.config;
        format!(
            "format={}\nvariant={}\nfusion={}\ncreated={}\nprecision={}\nstage_channels={}\ndilation_channels={}\nsam_reduction={}\nnormalization={}\noutput_scale={}\ninput_height={}\ninput_width={}\nconfig_hash={}\n",
            self.format,
            self.variant.name(),
            self.fusion.map_or("none", Fusion::as_str),
            self.created,
            self.precision,
            join(&c.extractor.stage_channels),
            join(&c.extractor.dilation_channels),
            c.sam_reduction,
            c.normalization.as_str(),
            c.output_scale,
            c.input_size.0,
            c.input_size.1,
            self.config_hash,
        )
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let mut kv = std::collections::HashMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| corrupt(format!("malformed line {line:?}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).cloned().ok_or_else(|| corrupt(format!("missing key {k}")));
        let format = get("format")?;
        if format != CHECKPOINT_FORMAT {
            return Err(Error::FormatMismatch {
                path: path.to_path_buf(),
                expected: CHECKPOINT_FORMAT,
                found: format,
            });
        }
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| corrupt(format!("bad integer for {k}"))) };
        let list = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split(',')
                .map(|v| v.trim().parse().map_err(|_| corrupt(format!("bad channel list for {k}"))))
                .collect()
        };
        let stage: [usize; 4] = list("stage_channels")?
            .try_into()
            .map_err(|_| corrupt("stage_channels needs 4 entries".into()))?;
        let dilation: [usize; 6] = list("dilation_channels")?
            .try_into()
            .map_err(|_| corrupt("dilation_channels needs 6 entries".into()))?;
        let fusion = match get("fusion")?.as_str() {
            "none" => None,
            other => Some(Fusion::parse(other)?),
        };
        Ok(CheckpointMeta {
            format,
            variant: Variant::parse(&get("variant")?)?,
            fusion,
            precision: get("precision")?,
            config: ModelConfig {
                extractor: ExtractorConfig {
                    stage_channels: stage,
                    dilation_channels: dilation,
                },
                sam_reduction: num("sam_reduction")?,
                init: Init::Zeros,
                seed: 0,
                normalization: Normalization::parse(&get("normalization")?)?,
                output_scale: get("output_scale")?
                    .parse()
                    .map_err(|_| corrupt("bad output_scale".into()))?,
                input_size: (num("input_height")?, num("input_width")?),
            },
            created: get("created")?.parse().unwrap_or(0),
            config_hash: get("config_hash")?,
        })
    }
}

pub fn read_checkpoint_meta(dir: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let path = dir.as_ref().join("meta.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    CheckpointMeta::parse(&text, &path)
}

/// Write `weights/` (one tensor file per parameter) and `meta.txt`.
pub fn save_checkpoint<T: Scalar>(model: &ModelVariant<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let mut store = WeightStore::new();
    for conv in model.convs() {
        store_conv(conv, &mut store);
    }
    store.write_dir(dir.join("weights"), T::NAME == "f64")?;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        variant: model.variant,
        fusion: model.fusion,
        precision: T::NAME.into(),
        config: model.config.clone(),
        created: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        config_hash: format!("{:016x}", fnv64(&architecture_string(model.variant, model.fusion, &model.config))),
    };
    let path = dir.join("meta.txt");
    fs::write(&path, meta.render()).map_err(|e| Error::io(&path, e))
}

/// Rebuild a model from a checkpoint directory. No partially loaded model is
/// ever returned.
pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>) -> Result<ModelVariant<T>> {
    let dir = dir.as_ref();
    let meta = read_checkpoint_meta(dir)?;
    let expected_hash = format!(
        "{:016x}",
        fnv64(&architecture_string(meta.variant, meta.fusion, &meta.config))
    );
    if expected_hash != meta.config_hash {
        return Err(Error::Corrupt {
            path: dir.join("meta.txt"),
            reason: "config_hash does not match the recorded architecture".into(),
        });
    }
    let store = WeightStore::read_dir(dir.join("weights"))?;
    let mut model = build_model::<T>(meta.variant, meta.fusion, &meta.config, None)?;
    for conv in model.convs_mut() {
        load_conv(conv, &store).map_err(|e| Error::Corrupt {
            path: dir.join("weights"),
            reason: e.to_string(),
        })?;
    }
    if store.tensors().len() != 2 * model.convs().len() {
        return Err(Error::Corrupt {
            path: dir.join("weights"),
            reason: format!(
                "{} tensors stored, model {} expects {}",
                store.tensors().len(),
                meta.variant,
                2 * model.convs().len()
            ),
        });
    }
    Ok(model)
}

/// [`load_checkpoint`] that also checks the stored variant and fusion.
pub fn load_checkpoint_as<T: Scalar>(
    dir: impl AsRef<Path>,
    variant: Variant,
    fusion: Option<Fusion>,
) -> Result<ModelVariant<T>> {
    let meta = read_checkpoint_meta(dir.as_ref())?;
    if meta.variant != variant || meta.fusion != fusion {
        let show = |v: Variant, f: Option<Fusion>| match f {
            Some(f) => format!("{v}-{}", f.as_str()),
            None => v.to_string(),
        };
        return Err(Error::VariantMismatch {
            expected: show(variant, fusion),
            found: show(meta.variant, meta.fusion),
        });
    }
    load_checkpoint(dir)
}
