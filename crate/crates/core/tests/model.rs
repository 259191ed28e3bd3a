use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scar_core::backbone::{build_backbone, VGG_LAYER_NAMES};
use scar_core::model::{load_checkpoint_as, read_checkpoint_meta};
use scar_core::weights::{NamedTensor, WeightStore};
use scar_core::{
    build_model, load_checkpoint, predict_density, save_checkpoint, Error, ExtractorConfig, Fusion, Init, ModelConfig,
    ModelVariant, Tensor, Variant,
};

fn tiny(seed: u64) -> ModelConfig {
    ModelConfig {
        extractor: ExtractorConfig {
            stage_channels: [2, 3, 4, 4],
            dilation_channels: [4, 4, 4, 4, 3, 3],
        },
        init: Init::He,
        seed,
        input_size: (16, 24),
        ..ModelConfig::default()
    }
}

fn image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(3, h, w, |_, _, _| rng.random_range(0.0..1.0))
}

#[test]
fn output_is_full_resolution_and_features_are_one_eighth() {
    for (h, w) in [(8, 8), (16, 24), (40, 32)] {
        let m = build_model::<f64>(Variant::Scar, Some(Fusion::Concat), &tiny(1), None).unwrap();
        let x = image(2, h, w);
        let f = scar_core::extract_features(m.extractor(), &x).unwrap();
        assert_eq!((f.height(), f.width()), (h / 8, w / 8));
        assert_eq!(m.forward_raw(&x).unwrap().shape(), (1, h, w));
    }
    let m = build_model::<f64>(Variant::Fcn, None, &tiny(1), None).unwrap();
    assert!(matches!(m.forward_raw(&image(0, 12, 16)), Err(Error::NotDivisible { .. })));
}

#[test]
fn activations_stay_finite() {
    let m = build_model::<f32>(Variant::Scar, Some(Fusion::Sum), &tiny(3), None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let scale = [1.0, 10.0, 100.0][rng.random_range(0..3)];
        let x = Tensor::<f32>::from_fn(3, 8, 8, |_, _, _| rng.random_range(-scale..scale));
        let f = scar_core::extract_features(m.extractor(), &x).unwrap();
        assert!(f.is_finite());
        assert!(m.forward_raw(&x).unwrap().is_finite());
    }
}

#[test]
fn perturbation_stays_within_receptive_field() {
    let cfg = tiny(5);
    let backbone = build_backbone::<f64>(&cfg.extractor, Init::He, 5, None).unwrap();
    let (radius, stride) = backbone.receptive_field();
    assert_eq!(stride, 8);
    let (h, w) = (128, 128);
    let x = image(6, h, w);
    let (py, px) = (64usize, 64usize);
    let mut y = x.clone();
    for c in 0..3 {
        y.set(c, py, px, y.get(c, py, px) + 5.0);
    }
    let a = backbone.forward(&x).unwrap();
    let b = backbone.forward(&y).unwrap();
    let mut touched = 0;
    for c in 0..a.channels() {
        for oy in 0..a.height() {
            for ox in 0..a.width() {
                if a.get(c, oy, ox) != b.get(c, oy, ox) {
                    touched += 1;
                    let (cy, cx) = ((oy * stride) as isize, (ox * stride) as isize);
                    let reach = (radius + stride) as isize;
                    assert!((cy - py as isize).abs() <= reach && (cx - px as isize).abs() <= reach);
                }
            }
        }
    }
    assert!(touched > 0);
    // outputs far outside the bound exist and stayed fixed
    assert!((radius + stride) * 2 < h);
}

#[test]
fn variants_nest_at_initialization() {
    let cfg = tiny(7);
    let x = image(8, 16, 24);
    let fcn = build_model::<f64>(Variant::Fcn, None, &cfg, None).unwrap();
    let want = fcn.forward_raw(&x).unwrap();
    for v in [Variant::FcnSam, Variant::FcnCam] {
        let m = build_model::<f64>(v, None, &cfg, None).unwrap();
        assert_eq!(m.forward_raw(&x).unwrap(), want, "{v}");
    }
    let w = fcn.regression().weight().to_vec();
    let b = fcn.regression().bias().to_vec();

    let mut concat = build_model::<f64>(Variant::Scar, Some(Fusion::Concat), &cfg, None).unwrap();
    assert_eq!(concat.extractor(), fcn.extractor());
    let mirrored: Vec<f64> = std::iter::repeat_n(0.0, w.len()).chain(w.iter().copied()).collect();
    concat.regression_mut().set_params(mirrored, b.clone()).unwrap();
    assert_eq!(concat.forward_raw(&x).unwrap(), want);

    let mut sum = build_model::<f64>(Variant::Scar, Some(Fusion::Sum), &cfg, None).unwrap();
    sum.regression_mut().set_params(w.iter().map(|v| v / 2.0).collect(), b).unwrap();
    assert_eq!(sum.forward_raw(&x).unwrap(), want);
}

fn trained_looking(variant: Variant, fusion: Option<Fusion>) -> ModelVariant<f64> {
    let mut m = build_model::<f64>(variant, fusion, &tiny(9), None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for conv in m.convs_mut() {
        conv.bias_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
    }
    m
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let m = trained_looking(Variant::Scar, Some(Fusion::Sum));
    save_checkpoint(&m, dir.path()).unwrap();
    let back: ModelVariant<f64> = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.convs(), m.convs());
    let x = image(11, 16, 24);
    let (p, q) = (predict_density(&m, &x).unwrap(), predict_density(&back, &x).unwrap());
    assert_eq!(p.density, q.density);
    let meta = read_checkpoint_meta(dir.path()).unwrap();
    assert_eq!(meta.format, "SCARCKPT1");
    assert_eq!(meta.precision, "f64");

    let m32 = build_model::<f32>(Variant::FcnCam, None, &tiny(12), None).unwrap();
    let dir32 = tempfile::tempdir().unwrap();
    save_checkpoint(&m32, dir32.path()).unwrap();
    let back32: ModelVariant<f32> = load_checkpoint(dir32.path()).unwrap();
    assert_eq!(back32.convs(), m32.convs());
}

#[test]
fn checkpoint_variant_mismatch_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let fcn = trained_looking(Variant::Fcn, None);
    save_checkpoint(&fcn, dir.path()).unwrap();
    let err = load_checkpoint_as::<f64>(dir.path(), Variant::Scar, Some(Fusion::Concat)).unwrap_err();
    assert!(matches!(err, Error::VariantMismatch { .. }), "{err}");
    assert!(load_checkpoint_as::<f64>(dir.path(), Variant::Fcn, None).is_ok());

    let file = dir.path().join("weights/conv2_1.weight.bin");
    let bytes = fs::read(&file).unwrap();
    fs::write(&file, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_checkpoint::<f64>(dir.path()).is_err());

    let other = tempfile::tempdir().unwrap();
    save_checkpoint(&fcn, other.path()).unwrap();
    let meta = other.path().join("meta.txt");
    let text = fs::read_to_string(&meta).unwrap().replace("format=SCARCKPT1", "format=SCARCKPT0");
    fs::write(&meta, text).unwrap();
    let err = load_checkpoint::<f64>(other.path()).unwrap_err();
    assert!(err.to_string().contains("SCARCKPT1"), "{err}");
}

fn vgg_store(first_out: usize) -> WeightStore {
    let cfg = ExtractorConfig::STANDARD;
    let specs = cfg.backbone_specs();
    let mut store = WeightStore::new();
    let mut in_ch = 3;
    let mut layer = 0;
    for spec in specs.iter().filter(|s| s.kernel == 3) {
        let out = if layer == 0 { first_out } else { spec.out_channels };
        let name = VGG_LAYER_NAMES[layer];
        let n = out * in_ch * 9;
        store.push(NamedTensor::from_scalars(
            format!("{name}.weight"),
            vec![out, in_ch, 3, 3],
            &vec![0.001f32; n],
        ));
        store.push(NamedTensor::from_scalars(format!("{name}.bias"), vec![out], &vec![0.0f32; out]));
        in_ch = spec.out_channels;
        layer += 1;
    }
    assert_eq!(layer, 10);
    store
}

#[test]
fn pretrained_weights_are_checked_per_layer() {
    let cfg = ExtractorConfig::STANDARD;
    let backbone = build_backbone::<f32>(&cfg, Init::Zeros, 0, Some(&vgg_store(64))).unwrap();
    assert!(backbone.convs()[0].weight().iter().all(|&v| v == 0.001));
    let err = build_backbone::<f32>(&cfg, Init::Zeros, 0, Some(&vgg_store(32))).unwrap_err();
    assert!(err.to_string().contains("conv1_1"), "{err}");
}
