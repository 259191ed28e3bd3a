//! Local feature extractor: the first ten VGG-16 convolutions (three 2x2 max
//! pools, 1/8 resolution) followed by the six-layer dilated module.

use std::fmt;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::layers::{layer_rng, max_pool2, max_pool2_backward, Conv2d, ConvGrad, Init};
use crate::scalar::Scalar;
use crate::tensor::{relu_backward_inplace, relu_inplace, FeatureMap, Tensor};
use crate::weights::{NamedTensor, WeightStore};

/// Total spatial downsampling of the extractor.
pub const OUTPUT_STRIDE: usize = 8;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    MaxPool,
    Upsample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

/// One row of the architecture table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub dilation: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub const fn conv(kernel: usize, out_channels: usize, dilation: usize, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Conv,
            kernel,
            out_channels,
            stride: 1,
            dilation,
            activation,
        }
    }

    pub const fn max_pool() -> Self {
        LayerSpec {
            kind: LayerKind::MaxPool,
            kernel: 2,
            out_channels: 0,
            stride: 2,
            dilation: 1,
            activation: Activation::None,
        }
    }

    pub const fn upsample(factor: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Upsample,
            kernel: 0,
            out_channels: 1,
            stride: factor,
            dilation: 1,
            activation: Activation::None,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            LayerKind::Conv => {
                write!(f, "k({0},{0})-c{1}-s{2}", self.kernel, self.out_channels, self.stride)?;
                if self.dilation > 1 {
                    write!(f, "-d{}", self.dilation)?;
                }
                if self.activation == Activation::Relu {
                    f.write_str("-R")?;
                }
                Ok(())
            }
            LayerKind::MaxPool => f.write_str("max-pool 2x2"),
            LayerKind::Upsample => write!(f, "up-sample x{}", self.stride),
        }
    }
}

/// Channel widths of the extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExtractorConfig {
    /// Output channels of VGG stages conv1..conv4.
    pub stage_channels: [usize; 4],
    /// Output channels of the six dilated convolutions.
    pub dilation_channels: [usize; 6],
}

impl ExtractorConfig {
    /// VGG-16 widths (conv3 = 256) and the 512-512-512-256-128-64 dilated
    /// module.
    pub const STANDARD: ExtractorConfig = ExtractorConfig {
        stage_channels: [64, 128, 256, 512],
        dilation_channels: [512, 512, 512, 256, 128, 64],
    };

    /// Same widths with every count divided by `divisor` (at least 1).
    pub fn scaled(divisor: usize) -> Self {
        Self::STANDARD.with_divisor(divisor)
    }

    pub fn with_divisor(self, divisor: usize) -> Self {
        let d = divisor.max(1);
        ExtractorConfig {
            stage_channels: self.stage_channels.map(|c| (c / d).max(1)),
            dilation_channels: self.dilation_channels.map(|c| (c / d).max(1)),
        }
    }

    /// Channels of the feature map handed to the attention branches.
    pub fn feature_channels(&self) -> usize {
        self.dilation_channels[5]
    }

    pub fn backbone_specs(&self) -> Vec<LayerSpec> {
        let [c1, c2, c3, c4] = self.stage_channels;
        let conv = |c| LayerSpec::conv(3, c, 1, Activation::Relu);
        vec![
            conv(c1),
            conv(c1),
            LayerSpec::max_pool(),
            conv(c2),
            conv(c2),
            LayerSpec::max_pool(),
            conv(c3),
            conv(c3),
            conv(c3),
            LayerSpec::max_pool(),
            conv(c4),
            conv(c4),
            conv(c4),
        ]
    }

    pub fn dilation_specs(&self) -> Vec<LayerSpec> {
        self.dilation_channels
            .iter()
            .map(|&c| LayerSpec::conv(3, c, 2, Activation::Relu))
            .collect()
    }
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self::STANDARD
    }
}

pub const VGG_LAYER_NAMES: [&str; 10] = [
    "conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2", "conv3_3", "conv4_1", "conv4_2", "conv4_3",
];

pub const DILATION_LAYER_NAMES: [&str; 6] = ["dilated_1", "dilated_2", "dilated_3", "dilated_4", "dilated_5", "dilated_6"];

#[derive(Clone, Debug, PartialEq)]
enum StackLayer<T> {
    Conv { conv: Conv2d<T>, relu: bool },
    MaxPool,
}

/// A sequence of stride-1 convolutions and 2x2 max pools.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack<T> {
    in_channels: usize,
    layers: Vec<StackLayer<T>>,
}

/// Activations recorded by [`ConvStack::forward_train`]; entry `i` is the
/// input of layer `i` and the last entry is the stack output.
#[derive(Clone, Debug)]
pub struct StackTape<T> {
    activations: Vec<Tensor<T>>,
}

impl<T: Scalar> StackTape<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.activations.last().expect("tape holds at least the input")
    }
}

impl<T: Scalar> ConvStack<T> {
    /// Build from specs; conv layers take their names from `names` in order
    /// and are initialized from per-name RNG streams.
    pub fn from_specs(in_channels: usize, specs: &[LayerSpec], names: &[&str], init: Init, seed: u64) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut channels = in_channels;
        let mut names = names.iter();
        for spec in specs {
            match spec.kind {
                LayerKind::Conv => {
                    if spec.kernel % 2 == 0 || spec.stride != 1 || spec.dilation == 0 {
                        return Err(Error::InvalidArgument(format!("unsupported conv layer {spec}")));
                    }
                    let name = names
                        .next()
                        .ok_or_else(|| Error::InvalidArgument("not enough layer names".into()))?;
                    let mut rng = layer_rng(seed, name);
                    let conv = Conv2d::new(*name, channels, spec.out_channels, spec.kernel, spec.dilation, init, &mut rng);
                    channels = spec.out_channels;
                    layers.push(StackLayer::Conv {
                        conv,
                        relu: spec.activation == Activation::Relu,
                    });
                }
                LayerKind::MaxPool => layers.push(StackLayer::MaxPool),
                LayerKind::Upsample => {
                    return Err(Error::InvalidArgument("up-sampling is not part of a feature stack".into()))
                }
            }
        }
        Ok(ConvStack { in_channels, layers })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.convs().last().map_or(self.in_channels, |c| c.out_channels())
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| match l {
                StackLayer::Conv { conv, relu } => LayerSpec::conv(
                    conv.kernel(),
                    conv.out_channels(),
                    conv.dilation(),
                    if *relu { Activation::Relu } else { Activation::None },
                ),
                StackLayer::MaxPool => LayerSpec::max_pool(),
            })
            .collect()
    }

    pub fn convs(&self) -> Vec<&Conv2d<T>> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                StackLayer::Conv { conv, .. } => Some(conv),
                StackLayer::MaxPool => None,
            })
            .collect()
    }

    pub fn convs_mut(&mut self) -> Vec<&mut Conv2d<T>> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                StackLayer::Conv { conv, .. } => Some(conv),
                StackLayer::MaxPool => None,
            })
            .collect()
    }

    /// Number of 2x2 pools, i.e. log2 of the stack's downsampling.
    pub fn pool_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, StackLayer::MaxPool)).count()
    }

    /// `(radius, stride)`: an output position depends only on input pixels
    /// within `radius` input pixels of its window, and output positions step
    /// by `stride` input pixels.
    pub fn receptive_field(&self) -> (usize, usize) {
        let (mut radius, mut jump) = (0usize, 1usize);
        for l in &self.layers {
            match l {
                StackLayer::Conv { conv, .. } => radius += conv.padding() * jump,
                StackLayer::MaxPool => {
                    radius += jump;
                    jump *= 2;
                }
            }
        }
        (radius, jump)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = None::<Tensor<T>>;
        for layer in &self.layers {
            let input = cur.as_ref().unwrap_or(x);
            let out = Self::apply(layer, input)?;
            cur = Some(out);
        }
        Ok(cur.unwrap_or_else(|| x.clone()))
    }

    fn apply(layer: &StackLayer<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(match layer {
            StackLayer::Conv { conv, relu } => {
                let mut y = conv.forward(input)?;
                if *relu {
                    relu_inplace(y.data_mut());
                }
                y
            }
            StackLayer::MaxPool => max_pool2(input),
        })
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<StackTape<T>> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        for layer in &self.layers {
            let out = Self::apply(layer, activations.last().unwrap())?;
            activations.push(out);
        }
        Ok(StackTape { activations })
    }

    /// Backpropagate `dy` through the stack. `grads` must hold one entry per
    /// conv layer, in order.
    pub fn backward(
        &self,
        tape: &StackTape<T>,
        dy: Tensor<T>,
        grads: &mut [ConvGrad<T>],
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let mut grad_index = grads.len();
        let mut g = dy;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &tape.activations[i];
            let output = &tape.activations[i + 1];
            let want_dx = need_input_grad || i > 0;
            match layer {
                StackLayer::Conv { conv, relu } => {
                    if *relu {
                        relu_backward_inplace(output.data(), g.data_mut());
                    }
                    grad_index -= 1;
                    match conv.backward(input, &g, &mut grads[grad_index], want_dx)? {
                        Some(dx) => g = dx,
                        None => return Ok(None),
                    }
                }
                StackLayer::MaxPool => g = max_pool2_backward(input, &g),
            }
        }
        Ok(Some(g))
    }
}

/// Pixel normalization applied before the extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// Intensities scaled to `[0, 1]`.
    Unit,
    /// `[0, 1]` scaling followed by ImageNet per-channel mean/std.
    ImageNet,
}

impl Normalization {
    pub fn as_str(self) -> &'static str {
        match self {
            Normalization::Unit => "unit",
            Normalization::ImageNet => "imagenet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(Normalization::Unit),
            "imagenet" => Ok(Normalization::ImageNet),
            other => Err(Error::Config(format!("unknown normalization {other:?}"))),
        }
    }
}

/// `3 x H x W` tensor from an RGB image.
pub fn image_to_tensor<T: Scalar>(image: &RgbImage, norm: Normalization) -> Tensor<T> {
    let (w, h) = image.dimensions();
    Tensor::from_fn(3, h as usize, w as usize, |c, y, x| {
        let v = image.get_pixel(x as u32, y as u32)[c] as f64 / 255.0;
        T::lit(match norm {
            Normalization::Unit => v,
            Normalization::ImageNet => (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c],
        })
    })
}

/// VGG front end plus dilated module.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<T> {
    pub backbone: ConvStack<T>,
    pub dilation: ConvStack<T>,
}

/// The ten VGG-16 convolutions with three max pools. With `pretrained`, every
/// conv takes its `<layer>.weight` `[out, in, 3, 3]` and `<layer>.bias`
/// `[out]` tensors from the store.
pub fn build_backbone<T: Scalar>(
    config: &ExtractorConfig,
    init: Init,
    seed: u64,
    pretrained: Option<&WeightStore>,
) -> Result<ConvStack<T>> {
    let mut stack = ConvStack::from_specs(3, &config.backbone_specs(), &VGG_LAYER_NAMES, init, seed)?;
    if let Some(store) = pretrained {
        for conv in stack.convs_mut() {
            load_conv(conv, store)?;
        }
    }
    Ok(stack)
}

/// Six dilation-2 3x3 convolutions, size-preserving.
pub fn build_dilation_module<T: Scalar>(config: &ExtractorConfig, init: Init, seed: u64) -> Result<ConvStack<T>> {
    ConvStack::from_specs(
        config.stage_channels[3],
        &config.dilation_specs(),
        &DILATION_LAYER_NAMES,
        init,
        seed,
    )
}

pub(crate) fn load_conv<T: Scalar>(conv: &mut Conv2d<T>, store: &WeightStore) -> Result<()> {
    let layer = conv.name().to_string();
    let fetch = |suffix: &str, dims: Vec<usize>| -> Result<Vec<T>> {
        let key = format!("{layer}.{suffix}");
        let t = store.get(&key).ok_or_else(|| Error::Pretrained {
            layer: layer.clone(),
            reason: format!("missing tensor {key}"),
        })?;
        if t.dims != dims {
            return Err(Error::Pretrained {
                layer: layer.clone(),
                reason: format!("{key} has shape {:?}, expected {:?}", t.dims, dims),
            });
        }
        Ok(t.to_scalars())
    };
    let weight = fetch("weight", conv.weight_dims().to_vec())?;
    let bias = fetch("bias", vec![conv.out_channels()])?;
    conv.set_params(weight, bias)
}

pub(crate) fn store_conv<T: Scalar>(conv: &Conv2d<T>, store: &mut WeightStore) {
    store.push(NamedTensor::from_scalars(
        format!("{}.weight", conv.name()),
        conv.weight_dims().to_vec(),
        conv.weight(),
    ));
    store.push(NamedTensor::from_scalars(
        format!("{}.bias", conv.name()),
        vec![conv.out_channels()],
        conv.bias(),
    ));
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new(config: &ExtractorConfig, init: Init, seed: u64, pretrained: Option<&WeightStore>) -> Result<Self> {
        Ok(FeatureExtractor {
            backbone: build_backbone(config, init, seed, pretrained)?,
            dilation: build_dilation_module(config, init, seed)?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.dilation.out_channels()
    }

    /// Backbone weights in the pretrained-source layout.
    pub fn backbone_weights(&self) -> WeightStore {
        let mut store = WeightStore::new();
        for conv in self.backbone.convs() {
            store_conv(conv, &mut store);
        }
        store
    }
}

pub fn check_divisible(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || !height.is_multiple_of(OUTPUT_STRIDE) || !width.is_multiple_of(OUTPUT_STRIDE) {
        return Err(Error::NotDivisible { height, width });
    }
    Ok(())
}

/// `C x H/8 x W/8` features of a normalized `3 x H x W` image.
pub fn extract_features<T: Scalar>(extractor: &FeatureExtractor<T>, image: &Tensor<T>) -> Result<FeatureMap<T>> {
    check_divisible(image.height(), image.width())?;
    let x = extractor.backbone.forward(image)?;
    extractor.dilation.forward(&x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_notation() {
        let specs = ExtractorConfig::STANDARD.dilation_specs();
        assert_eq!(specs[0].to_string(), "k(3,3)-c512-s1-d2-R");
        assert_eq!(specs[5].to_string(), "k(3,3)-c64-s1-d2-R");
        assert_eq!(ExtractorConfig::STANDARD.backbone_specs()[0].to_string(), "k(3,3)-c64-s1-R");
    }

    #[test]
    fn standard_channel_schedule() {
        let cfg = ExtractorConfig::STANDARD;
        let convs: Vec<usize> = cfg
            .backbone_specs()
            .iter()
            .filter(|s| s.kind == LayerKind::Conv)
            .map(|s| s.out_channels)
            .collect();
        assert_eq!(convs, vec![64, 64, 128, 128, 256, 256, 256, 512, 512, 512]);
        assert_eq!(cfg.feature_channels(), 64);
    }

    #[test]
    fn divisibility() {
        assert!(check_divisible(96, 128).is_ok());
        assert!(matches!(check_divisible(100, 128), Err(Error::NotDivisible { .. })));
    }

    #[test]
    fn receptive_field_of_small_stack() {
        let specs = [
            LayerSpec::conv(3, 2, 1, Activation::Relu),
            LayerSpec::max_pool(),
            LayerSpec::conv(3, 2, 2, Activation::Relu),
        ];
        let s = ConvStack::<f64>::from_specs(1, &specs, &["a", "b"], Init::He, 0).unwrap();
        // 1 (conv) + 1 (pool) + 2 * 2 (dilated conv at stride 2)
        assert_eq!(s.receptive_field(), (6, 2));
    }
}
