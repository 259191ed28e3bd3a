//! Half-pixel bilinear resampling with edge clamping.
//!
//! Output sample `o` reads source coordinate `(o + 0.5) * in / out - 0.5`,
//! clamped to `[0, in - 1]`. For an integer upscale factor `s` every source
//! sample receives total weight exactly `s` along each axis, so an `s x s`
//! upsample followed by a `1 / s^2` rescale preserves the grid sum.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One output sample: `(1 - frac) * src[lo] + frac * src[hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    assert!(in_len > 0 && out_len > 0);
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            if src <= 0.0 {
                Tap { lo: 0, hi: 0, frac: 0.0 }
            } else if src >= (in_len - 1) as f64 {
                Tap { lo: in_len - 1, hi: in_len - 1, frac: 0.0 }
            } else {
                let lo = src.floor() as usize;
                Tap { lo, hi: lo + 1, frac: src - lo as f64 }
            }
        })
        .collect()
}

/// Bilinear resize of every channel plane to `out_h x out_w`, multiplying the
/// result by `gain`.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize, gain: f64) -> Tensor<T> {
    let (c, h, w) = x.shape();
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let gain = T::lit(gain);
    let mut out = Tensor::zeros(c, out_h, out_w);
    let mut rows = vec![T::zero(); h * out_w];
    for ch in 0..c {
        let src = x.plane(ch);
        for y in 0..h {
            let s = &src[y * w..(y + 1) * w];
            for (o, t) in tx.iter().enumerate() {
                let f = T::lit(t.frac);
                rows[y * out_w + o] = s[t.lo] * (T::one() - f) + s[t.hi] * f;
            }
        }
        let dst = out.plane_mut(ch);
        for (oy, t) in ty.iter().enumerate() {
            let f = T::lit(t.frac);
            let (a, b) = (&rows[t.lo * out_w..(t.lo + 1) * out_w], &rows[t.hi * out_w..(t.hi + 1) * out_w]);
            for ((d, &va), &vb) in dst[oy * out_w..(oy + 1) * out_w].iter_mut().zip(a).zip(b) {
                *d = (va * (T::one() - f) + vb * f) * gain;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`]: maps a gradient on the `out_h x out_w`
/// grid back to the `in_h x in_w` grid.
pub fn resize_bilinear_backward<T: Scalar>(dy: &Tensor<T>, in_h: usize, in_w: usize, gain: f64) -> Tensor<T> {
    let (c, out_h, out_w) = dy.shape();
    let ty = bilinear_taps(in_h, out_h);
    let tx = bilinear_taps(in_w, out_w);
    let gain = T::lit(gain);
    let mut dx = Tensor::zeros(c, in_h, in_w);
    let mut rows = vec![T::zero(); in_h * out_w];
    for ch in 0..c {
        rows.fill(T::zero());
        let g = dy.plane(ch);
        for (oy, t) in ty.iter().enumerate() {
            let f = T::lit(t.frac);
            for o in 0..out_w {
                let v = g[oy * out_w + o] * gain;
                rows[t.lo * out_w + o] += v * (T::one() - f);
                rows[t.hi * out_w + o] += v * f;
            }
        }
        let dst = dx.plane_mut(ch);
        for y in 0..in_h {
            for (o, t) in tx.iter().enumerate() {
                let f = T::lit(t.frac);
                let v = rows[y * out_w + o];
                dst[y * in_w + t.lo] += v * (T::one() - f);
                dst[y * in_w + t.hi] += v * f;
            }
        }
    }
    dx
}

/// Bilinear `factor`x upsample with a uniform `1 / factor^2` rescale, so the
/// output sums to the input sum.
pub fn upsample_density<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let gain = 1.0 / (factor * factor) as f64;
    resize_bilinear(x, x.height() * factor, x.width() * factor, gain)
}

pub fn upsample_density_backward<T: Scalar>(dy: &Tensor<T>, factor: usize) -> Tensor<T> {
    let gain = 1.0 / (factor * factor) as f64;
    resize_bilinear_backward(dy, dy.height() / factor, dy.width() / factor, gain)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_upscale_gives_each_source_unit_mass() {
        for n in 1..6 {
            let taps = bilinear_taps(n, 8 * n);
            let mut mass = vec![0.0; n];
            for t in &taps {
                mass[t.lo] += 1.0 - t.frac;
                mass[t.hi] += t.frac;
            }
            for m in mass {
                assert!((m - 8.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_resize_is_exact() {
        let x = Tensor::<f64>::from_fn(2, 3, 5, |c, y, x| (c * 15 + y * 5 + x) as f64);
        assert_eq!(resize_bilinear(&x, 3, 5, 1.0), x);
    }

    #[test]
    fn backward_is_adjoint() {
        let x = Tensor::<f64>::from_fn(1, 3, 4, |_, y, x| ((y * 7 + x * 3) % 5) as f64 - 2.0);
        let g = Tensor::<f64>::from_fn(1, 24, 32, |_, y, x| ((y * 3 + x * 11) % 7) as f64 * 0.1);
        let up = upsample_density(&x, 8);
        let lhs: f64 = up.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let back = upsample_density_backward(&g, 8);
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
