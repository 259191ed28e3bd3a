use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scar_core::attention::{spatial_attention_matrix, Fusion};
use scar_core::layers::{ConvGrad, Init};
use scar_core::{fuse, ChannelAttention, SpatialAttention, Tensor};

fn random(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
}

fn randomize_all<'a>(convs: impl IntoIterator<Item = &'a mut scar_core::layers::Conv2d<f64>>, rng: &mut ChaCha8Rng) {
    for conv in convs {
        conv.weight_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
        conv.bias_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    }
}

/// Loss `sum(out * r)`, so `dL/dout = r`.
fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

#[test]
fn sam_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut sam = SpatialAttention::<f64>::new(3, 1, Init::He, 1);
    randomize_all(sam.convs_mut(), &mut rng);
    let f = random(&mut rng, 3, 3, 3);
    let r = random(&mut rng, 3, 3, 3);
    let (_, tape) = sam.forward_train(&f).unwrap();
    let mut grads: Vec<ConvGrad<f64>> = sam.convs().into_iter().map(ConvGrad::zeros_like).collect();
    let df = sam.backward(&f, &tape, &r, &mut grads).unwrap();
    let eps = 1e-4;
    let loss = |s: &SpatialAttention<f64>, x: &Tensor<f64>| dot(&s.forward(x).unwrap(), &r);
    for i in 0..f.data().len() {
        let (mut p, mut m) = (f.clone(), f.clone());
        p.data_mut()[i] += eps;
        m.data_mut()[i] -= eps;
        let n = (loss(&sam, &p) - loss(&sam, &m)) / (2.0 * eps);
        assert!(rel(df.data()[i], n) < 1e-3, "input {i}: {} vs {n}", df.data()[i]);
    }
    for (layer, grad) in grads.iter().enumerate() {
        for idx in 0..grad.weight.len() {
            let mut s = sam.clone();
            s.convs_mut()[layer].weight_mut()[idx] += eps;
            let plus = loss(&s, &f);
            s.convs_mut()[layer].weight_mut()[idx] -= 2.0 * eps;
            let minus = loss(&s, &f);
            let n = (plus - minus) / (2.0 * eps);
            let a = grad.weight[idx];
            assert!(rel(a, n) < 1e-3, "layer {layer} weight {idx}: {a} vs {n}");
        }
    }
}

#[test]
fn cam_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cam = ChannelAttention::<f64>::new(3, Init::He, 2);
    randomize_all(cam.convs_mut(), &mut rng);
    let f = random(&mut rng, 3, 3, 3);
    let r = random(&mut rng, 3, 3, 3);
    let (_, tape) = cam.forward_train(&f).unwrap();
    let mut grads: Vec<ConvGrad<f64>> = cam.convs().into_iter().map(ConvGrad::zeros_like).collect();
    let df = cam.backward(&f, &tape, &r, &mut grads).unwrap();
    let eps = 1e-4;
    let loss = |c: &ChannelAttention<f64>, x: &Tensor<f64>| dot(&c.forward(x).unwrap(), &r);
    for i in 0..f.data().len() {
        let (mut p, mut m) = (f.clone(), f.clone());
        p.data_mut()[i] += eps;
        m.data_mut()[i] -= eps;
        let n = (loss(&cam, &p) - loss(&cam, &m)) / (2.0 * eps);
        assert!(rel(df.data()[i], n) < 1e-3, "input {i}: {} vs {n}", df.data()[i]);
    }
    for (layer, grad) in grads.iter().enumerate() {
        for idx in 0..grad.bias.len() {
            let mut c = cam.clone();
            c.convs_mut()[layer].bias_mut()[idx] += eps;
            let plus = loss(&c, &f);
            c.convs_mut()[layer].bias_mut()[idx] -= 2.0 * eps;
            let minus = loss(&c, &f);
            let n = (plus - minus) / (2.0 * eps);
            let a = grad.bias[idx];
            assert!(rel(a, n) < 1e-3, "layer {layer} bias {idx}: {a} vs {n}");
        }
    }
}

#[test]
fn spatial_attention_ignores_shift_of_the_normalized_operand() {
    // a constant added to every S1 entry adds a per-row constant to the logits
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let s1 = random(&mut rng, 4, 3, 5);
        let s2 = random(&mut rng, 4, 3, 5);
        let shift = rng.random_range(-5.0..5.0);
        let a = spatial_attention_matrix(&s1, &s2).unwrap();
        let b = spatial_attention_matrix(&s1.map(|v| v + shift), &s2).unwrap();
        for (x, y) in a.matrix().data().iter().zip(b.matrix().data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn attention_handles_large_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s1 = random(&mut rng, 8, 4, 4).map(|v| v * 300.0);
    let s2 = random(&mut rng, 8, 4, 4).map(|v| v * 300.0);
    let a = spatial_attention_matrix(&s1, &s2).unwrap();
    assert!(a.matrix().data().iter().all(|v| v.is_finite()));
    for s in a.row_sums() {
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn attention_matrix_grid_export() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = random(&mut rng, 2, 2, 3);
    let a = spatial_attention_matrix(&s, &s).unwrap();
    let g = a.to_grid();
    assert_eq!(g.resolution(), (6, 6));
    assert!((g.sum() - 6.0).abs() < 1e-12);
}

#[test]
fn sum_fusion_is_elementwise_and_concat_stacks() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random(&mut rng, 3, 2, 2);
    let b = random(&mut rng, 3, 2, 2);
    let s = fuse(&a, &b, Fusion::Sum).unwrap();
    for i in 0..a.data().len() {
        assert_eq!(s.data()[i], a.data()[i] + b.data()[i]);
    }
    let c = fuse(&a, &b, Fusion::Concat).unwrap();
    assert_eq!(c.shape(), (6, 2, 2));
    assert_eq!(&c.data()[..12], a.data());
    assert_eq!(&c.data()[12..], b.data());
    assert!(fuse(&a, &random(&mut rng, 2, 2, 2), Fusion::Sum).is_err());
}
