use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::{format_shape, Tensor};

/// Upper bound on im2col buffer elements per tile.
const TILE_ELEMS: usize = 1 << 21;

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean Gaussian with the given standard deviation, zero bias.
    Gaussian { std: f64 },
    /// Zero-mean Gaussian with std `sqrt(2 / fan_in)`, zero bias.
    He,
    /// All-zero weights and bias.
    Zeros,
}

/// Stride-1 2-D convolution with square odd kernel, symmetric zero padding
/// `dilation * (kernel - 1) / 2` (spatial size is preserved).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    name: String,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    dilation: usize,
    weight: Vec<T>,
    bias: Vec<T>,
}

/// Accumulated gradient for one [`Conv2d`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrad<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvGrad<T> {
    pub fn zeros_like(conv: &Conv2d<T>) -> Self {
        ConvGrad {
            weight: vec![T::zero(); conv.weight.len()],
            bias: vec![T::zero(); conv.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, &b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, &b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.weight.iter_mut().chain(self.bias.iter_mut()).for_each(|v| *v *= s);
    }
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        assert!(dilation >= 1);
        let fan_in = in_channels * kernel * kernel;
        let n = out_channels * fan_in;
        let weight = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Gaussian { std } => sample_normal(std, n, rng),
            Init::He => sample_normal((2.0 / fan_in as f64).sqrt(), n, rng),
        };
        Conv2d {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            dilation,
            weight,
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    /// `[out, in, k, k]`.
    pub fn weight_dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn weight(&self) -> &[T] {
        &self.weight
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut [T] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        &mut self.bias
    }

    /// Replace parameters, checking lengths.
    pub fn set_params(&mut self, weight: Vec<T>, bias: Vec<T>) -> Result<()> {
        if weight.len() != self.weight.len() || bias.len() != self.bias.len() {
            return Err(Error::shape(
                "Conv2d::set_params",
                format!("{} weights + {} biases", self.weight.len(), self.bias.len()),
                format!("{} weights + {} biases", weight.len(), bias.len()),
            ));
        }
        self.weight = weight;
        self.bias = bias;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != self.in_channels {
            return Err(Error::shape(
                "Conv2d input channels",
                format!("{} ({})", self.in_channels, self.name),
                format_shape(x.shape()),
            ));
        }
        Ok(())
    }

    fn rows_per_tile(&self, width: usize) -> usize {
        (TILE_ELEMS / (self.patch_len() * width).max(1)).max(1)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let (h, w) = (x.height(), x.width());
        let hw = h * w;
        let mut out = Tensor::zeros(self.out_channels, h, w);
        for (c, b) in self.bias.iter().enumerate() {
            out.plane_mut(c).fill(*b);
        }
        let wmat = MatRef::new(&self.weight, self.out_channels, self.patch_len());
        if self.kernel == 1 {
            gemm(
                T::one(),
                wmat,
                MatRef::new(x.data(), self.in_channels, hw),
                T::one(),
                MatMut::new(out.data_mut(), self.out_channels, hw),
            );
            return Ok(out);
        }

        let tile_rows = self.rows_per_tile(w);
        let n_tiles = h.div_ceil(tile_rows);
        if n_tiles == 1 {
            let mut col = vec![T::zero(); self.patch_len() * hw];
            self.im2col(x, 0, h, &mut col);
            gemm(
                T::one(),
                wmat,
                MatRef::new(&col, self.patch_len(), hw),
                T::one(),
                MatMut::new(out.data_mut(), self.out_channels, hw),
            );
            return Ok(out);
        }

        let tiles = par::map_range(n_tiles, |t| {
            let r0 = t * tile_rows;
            let r1 = (r0 + tile_rows).min(h);
            let len = (r1 - r0) * w;
            let mut col = vec![T::zero(); self.patch_len() * len];
            self.im2col(x, r0, r1, &mut col);
            let mut buf = vec![T::zero(); self.out_channels * len];
            gemm(
                T::one(),
                wmat,
                MatRef::new(&col, self.patch_len(), len),
                T::zero(),
                MatMut::new(&mut buf, self.out_channels, len),
            );
            buf
        });
        for (t, buf) in tiles.iter().enumerate() {
            let start = t * tile_rows * w;
            let len = buf.len() / self.out_channels;
            for c in 0..self.out_channels {
                let dst = &mut out.plane_mut(c)[start..start + len];
                for (d, &s) in dst.iter_mut().zip(&buf[c * len..(c + 1) * len]) {
                    *d += s;
                }
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// w.r.t. the input when `need_input_grad` is set.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grad: &mut ConvGrad<T>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        self.check_input(x)?;
        if dy.shape() != (self.out_channels, x.height(), x.width()) {
            return Err(Error::shape(
                "Conv2d::backward upstream gradient",
                format_shape((self.out_channels, x.height(), x.width())),
                format_shape(dy.shape()),
            ));
        }
        let (h, w) = (x.height(), x.width());
        let hw = h * w;
        let k = self.patch_len();
        for (c, gb) in grad.bias.iter_mut().enumerate() {
            *gb += dy.plane(c).iter().copied().sum::<T>();
        }
        let dymat = MatRef::new(dy.data(), self.out_channels, hw);
        let wmat = MatRef::new(&self.weight, self.out_channels, k);

        if self.kernel == 1 {
            gemm(
                T::one(),
                dymat,
                MatRef::new(x.data(), self.in_channels, hw).t(),
                T::one(),
                MatMut::new(&mut grad.weight, self.out_channels, k),
            );
            if !need_input_grad {
                return Ok(None);
            }
            let mut dx = Tensor::zeros(self.in_channels, h, w);
            gemm(
                T::one(),
                wmat.t(),
                dymat,
                T::zero(),
                MatMut::new(dx.data_mut(), self.in_channels, hw),
            );
            return Ok(Some(dx));
        }

        let tile_rows = self.rows_per_tile(w);
        let mut dx = need_input_grad.then(|| Tensor::zeros(self.in_channels, h, w));
        let mut r0 = 0;
        let mut col = Vec::new();
        let mut dcol = Vec::new();
        while r0 < h {
            let r1 = (r0 + tile_rows).min(h);
            let len = (r1 - r0) * w;
            col.clear();
            col.resize(k * len, T::zero());
            self.im2col(x, r0, r1, &mut col);
            let dy_tile = dymat.columns(r0 * w, len);
            gemm(
                T::one(),
                dy_tile,
                MatRef::new(&col, k, len).t(),
                T::one(),
                MatMut::new(&mut grad.weight, self.out_channels, k),
            );
            if let Some(dx) = dx.as_mut() {
                dcol.clear();
                dcol.resize(k * len, T::zero());
                gemm(T::one(), wmat.t(), dy_tile, T::zero(), MatMut::new(&mut dcol, k, len));
                self.col2im(&dcol, r0, r1, dx);
            }
            r0 = r1;
        }
        Ok(dx)
    }

    /// Fill `col` (`patch_len x (r1 - r0) * W`) with input patches for output
    /// rows `r0..r1`.
    fn im2col(&self, x: &Tensor<T>, r0: usize, r1: usize, col: &mut [T]) {
        let (h, w) = (x.height() as isize, x.width());
        let len = (r1 - r0) * w;
        let pad = self.padding() as isize;
        let k = self.kernel;
        for ci in 0..self.in_channels {
            let plane = x.plane(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * len..(row + 1) * len];
                    let dx = (kx * self.dilation) as isize - pad;
                    let dy = (ky * self.dilation) as isize - pad;
                    let (x_lo, x_hi) = valid_range(w, dx);
                    for r in r0..r1 {
                        let iy = r as isize + dy;
                        let out_row = &mut dst[(r - r0) * w..(r - r0 + 1) * w];
                        if iy < 0 || iy >= h || x_lo >= x_hi {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        out_row[..x_lo].fill(T::zero());
                        out_row[x_hi..].fill(T::zero());
                        let s0 = (x_lo as isize + dx) as usize;
                        out_row[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                    }
                }
            }
        }
    }

    fn col2im(&self, dcol: &[T], r0: usize, r1: usize, dx: &mut Tensor<T>) {
        let (h, w) = (dx.height() as isize, dx.width());
        let len = (r1 - r0) * w;
        let pad = self.padding() as isize;
        let k = self.kernel;
        for ci in 0..self.in_channels {
            let plane = dx.plane_mut(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &dcol[row * len..(row + 1) * len];
                    let ddx = (kx * self.dilation) as isize - pad;
                    let ddy = (ky * self.dilation) as isize - pad;
                    let (x_lo, x_hi) = valid_range(w, ddx);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for r in r0..r1 {
                        let iy = r as isize + ddy;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let s = &src[(r - r0) * w + x_lo..(r - r0) * w + x_hi];
                        let d0 = iy as usize * w + (x_lo as isize + ddx) as usize;
                        for (d, &v) in plane[d0..d0 + (x_hi - x_lo)].iter_mut().zip(s) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `x` for which `x + offset` is inside `0..width`.
fn valid_range(width: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (width as isize - offset).clamp(0, width as isize) as usize;
    (lo.min(width), hi)
}

fn sample_normal<T: Scalar, R: Rng + ?Sized>(std: f64, n: usize, rng: &mut R) -> Vec<T> {
    if std == 0.0 {
        return vec![T::zero(); n];
    }
    let normal = Normal::new(0.0, std).expect("finite positive std");
    (0..n).map(|_| T::lit(normal.sample(rng))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-loop convolution.
    fn naive_conv(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let (h, w) = (x.height() as isize, x.width() as isize);
        let k = conv.kernel();
        let pad = conv.padding() as isize;
        Tensor::from_fn(conv.out_channels(), x.height(), x.width(), |o, y, xx| {
            let mut acc = conv.bias()[o];
            for i in 0..conv.in_channels() {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = y as isize + (ky * conv.dilation()) as isize - pad;
                        let ix = xx as isize + (kx * conv.dilation()) as isize - pad;
                        if iy >= 0 && iy < h && ix >= 0 && ix < w {
                            let wi = ((o * conv.in_channels() + i) * k + ky) * k + kx;
                            acc += conv.weight()[wi] * x.get(i, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    fn random_input(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn forward_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, d) in &[(1, 1), (3, 1), (3, 2), (5, 1)] {
            let mut conv = Conv2d::<f64>::new("c", 3, 4, k, d, Init::Gaussian { std: 0.5 }, &mut rng);
            let bias: Vec<f64> = (0..4).map(|i| i as f64 * 0.1).collect();
            let weight = conv.weight().to_vec();
            conv.set_params(weight, bias).unwrap();
            let x = random_input(&mut rng, 3, 7, 6);
            let fast = conv.forward(&x).unwrap();
            let slow = naive_conv(&conv, &x);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "k={k} d={d}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let conv = Conv2d::<f64>::new("c", 2, 3, 3, 2, Init::Gaussian { std: 0.5 }, &mut rng);
        let x = random_input(&mut rng, 2, 5, 4);
        let probe = random_input(&mut rng, 3, 5, 4);
        let loss = |c: &Conv2d<f64>, x: &Tensor<f64>| -> f64 {
            c.forward(x).unwrap().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let mut grad = ConvGrad::zeros_like(&conv);
        let dx = conv.backward(&x, &probe, &mut grad, true).unwrap().unwrap();
        let eps = 1e-6;
        for i in (0..conv.weight().len()).step_by(5) {
            let mut p = conv.clone();
            p.weight_mut()[i] += eps;
            let mut m = conv.clone();
            m.weight_mut()[i] -= eps;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * eps);
            assert!((fd - grad.weight[i]).abs() < 1e-6);
        }
        for i in 0..3 {
            let mut p = conv.clone();
            p.bias_mut()[i] += eps;
            let mut m = conv.clone();
            m.bias_mut()[i] -= eps;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * eps);
            assert!((fd - grad.bias[i]).abs() < 1e-6);
        }
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps);
            assert!((fd - dx.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn tiled_path_matches_single_tile() {
        // Enough channels that the im2col buffer is split across tiles.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv2d::<f32>::new("c", 64, 2, 3, 1, Init::Gaussian { std: 0.1 }, &mut rng);
        let x = Tensor::<f32>::from_fn(64, 80, 64, |c, y, x| ((c + 3 * y + 7 * x) % 13) as f32 / 13.0);
        assert!(conv.rows_per_tile(64) < 80);
        let fast = conv.forward(&x).unwrap();
        let slow = naive_conv(&Conv2d::<f64> {
            name: "c".into(),
            in_channels: 64,
            out_channels: 2,
            kernel: 3,
            dilation: 1,
            weight: conv.weight().iter().map(|&v| v as f64).collect(),
            bias: vec![0.0; 2],
        }, &x.cast());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((*a as f64 - b).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::<f32>::new("c", 4, 4, 3, 2, Init::He, &mut rng);
        let out = conv.forward(&Tensor::zeros(4, 6, 6)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::<f32>::new("c", 4, 4, 3, 1, Init::He, &mut rng);
        assert!(conv.forward(&Tensor::zeros(3, 6, 6)).is_err());
    }
}
