//! Spatial-wise (SAM) and channel-wise (CAM) self-attention over a
//! `C x H x W` feature map, and the fusion of their outputs.
//!
//! SAM: three 1x1 projections `S1, S2, S3`; attention over positions
//! `A[j, i] = softmax_i(S1_i . S2_j)`; output `lambda(sum_i A[j, i] S3_i) + F_j`.
//!
//! CAM: one shared 1x1 projection `F'`; attention over channels
//! `A[j, i] = softmax_i(F'_i . F'_j)`; output `mu(sum_i A[j, i] F'_i) + F_j`.
//!
//! `lambda` and `mu` are 1x1 convolutions `C -> C` initialized to zero, so a
//! fresh branch is the identity on `F`. Softmax rows subtract their maximum
//! before exponentiation.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::layers::{layer_rng, Conv2d, ConvGrad, Init};
use crate::linalg::{gemm, softmax_rows, softmax_rows_backward, MatMut, MatRef, Matrix};
use crate::scalar::Scalar;
use crate::tensor::{format_shape, FeatureMap, Tensor};

/// Row-stochastic `HW x HW` matrix; entry `(j, i)` is position `i`'s
/// influence on position `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttentionMatrix<T>(pub Matrix<T>);

/// Row-stochastic `C x C` matrix; entry `(j, i)` is channel `i`'s influence
/// on channel `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttentionMatrix<T>(pub Matrix<T>);

macro_rules! attention_matrix_common {
    ($ty:ident) => {
        impl<T: Scalar> $ty<T> {
            pub fn size(&self) -> usize {
                self.0.rows()
            }

            pub fn get(&self, j: usize, i: usize) -> T {
                self.0.get(j, i)
            }

            pub fn row_sums(&self) -> Vec<T> {
                (0..self.0.rows()).map(|r| self.0.row(r).iter().copied().sum()).collect()
            }

            pub fn matrix(&self) -> &Matrix<T> {
                &self.0
            }

            /// Export as a 2-D grid (e.g. for the density binary format).
            pub fn to_grid(&self) -> Grid {
                let n = self.0.rows();
                Grid::from_vec(n, self.0.cols(), self.0.data().iter().map(|v| v.as_f64()).collect())
                    .expect("square matrix")
            }
        }
    };
}

attention_matrix_common!(SpatialAttentionMatrix);
attention_matrix_common!(ChannelAttentionMatrix);

/// SAM attention map: `A[j, i] = exp(s1_i . s2_j) / sum_i exp(s1_i . s2_j)`
/// where `s1_i`, `s2_j` are the per-position channel vectors.
pub fn spatial_attention_matrix<T: Scalar>(s1: &Tensor<T>, s2: &Tensor<T>) -> Result<SpatialAttentionMatrix<T>> {
    s1.ensure_shape(s2, "spatial_attention_matrix")?;
    let (c, n) = (s1.channels(), s1.plane_len());
    let mut logits = Matrix::zeros(n, n);
    // L = S2^T S1
    gemm(
        T::one(),
        MatRef::new(s2.data(), c, n).t(),
        MatRef::new(s1.data(), c, n),
        T::zero(),
        MatMut::new(logits.data_mut(), n, n),
    );
    softmax_rows(logits.data_mut(), n);
    Ok(SpatialAttentionMatrix(logits))
}

/// CAM's attention map from `c1` (`C x HW`) and `c2` (`HW x C`):
/// `A[j, i] = softmax_i(c1_i . c2^j)` with `c1_i` the i-th row of `c1` and
/// `c2^j` the j-th column of `c2`.
pub fn channel_attention_matrix<T: Scalar>(c1: &Matrix<T>, c2: &Matrix<T>) -> Result<ChannelAttentionMatrix<T>> {
    if c1.cols() != c2.rows() || c1.rows() != c2.cols() {
        return Err(Error::shape(
            "channel_attention_matrix",
            format!("{}x{} and {}x{}", c1.rows(), c1.cols(), c1.cols(), c1.rows()),
            format!("{}x{} and {}x{}", c1.rows(), c1.cols(), c2.rows(), c2.cols()),
        ));
    }
    let c = c1.rows();
    let mut logits = Matrix::zeros(c, c);
    // L = (c1 c2)^T = c2^T c1^T
    gemm(T::one(), c2.view().t(), c1.view().t(), T::zero(), MatMut::new(logits.data_mut(), c, c));
    softmax_rows(logits.data_mut(), c);
    Ok(ChannelAttentionMatrix(logits))
}

fn check_branch_input<T: Scalar>(f: &Tensor<T>, channels: usize, context: &'static str) -> Result<()> {
    if f.channels() != channels {
        return Err(Error::shape(
            context,
            format!("{channels}xHxW"),
            format_shape(f.shape()),
        ));
    }
    Ok(())
}

/// Parameters of the spatial-wise attention branch.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttention<T> {
    pub s1: Conv2d<T>,
    pub s2: Conv2d<T>,
    pub s3: Conv2d<T>,
    pub lambda: Conv2d<T>,
}

/// Intermediates kept for the SAM backward pass.
#[derive(Clone, Debug)]
pub struct SamTape<T> {
    s1: Tensor<T>,
    s2: Tensor<T>,
    s3: Tensor<T>,
    attention: SpatialAttentionMatrix<T>,
    context: Tensor<T>,
}

impl<T: Scalar> SamTape<T> {
    pub fn attention(&self) -> &SpatialAttentionMatrix<T> {
        &self.attention
    }
}

pub const SAM_LAYER_NAMES: [&str; 4] = ["sam_s1", "sam_s2", "sam_s3", "sam_lambda"];
pub const CAM_LAYER_NAMES: [&str; 2] = ["cam_proj", "cam_mu"];

impl<T: Scalar> SpatialAttention<T> {
    /// `S1`/`S2` project to `channels / reduction` (at least 1) channels,
    /// `S3` and `lambda` keep `channels`.
    pub fn new(channels: usize, reduction: usize, init: Init, seed: u64) -> Self {
        let inner = (channels / reduction.max(1)).max(1);
        let conv = |name: &str, out: usize, init: Init| {
            Conv2d::new(name, channels, out, 1, 1, init, &mut layer_rng(seed, name))
        };
        SpatialAttention {
            s1: conv(SAM_LAYER_NAMES[0], inner, init),
            s2: conv(SAM_LAYER_NAMES[1], inner, init),
            s3: conv(SAM_LAYER_NAMES[2], channels, init),
            lambda: conv(SAM_LAYER_NAMES[3], channels, Init::Zeros),
        }
    }

    pub fn channels(&self) -> usize {
        self.s3.in_channels()
    }

    pub fn convs(&self) -> [&Conv2d<T>; 4] {
        [&self.s1, &self.s2, &self.s3, &self.lambda]
    }

    pub fn convs_mut(&mut self) -> [&mut Conv2d<T>; 4] {
        [&mut self.s1, &mut self.s2, &mut self.s3, &mut self.lambda]
    }

    pub fn forward(&self, f: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.forward_train(f).map(|(out, _)| out)
    }

    pub fn forward_train(&self, f: &FeatureMap<T>) -> Result<(FeatureMap<T>, SamTape<T>)> {
        check_branch_input(f, self.channels(), "sam_forward")?;
        let (c, h, w) = f.shape();
        let n = h * w;
        let s1 = self.s1.forward(f)?;
        let s2 = self.s2.forward(f)?;
        let s3 = self.s3.forward(f)?;
        let attention = spatial_attention_matrix(&s1, &s2)?;
        // context[:, j] = sum_i A[j, i] S3[:, i]  =>  context = S3 A^T
        let mut context = Tensor::zeros(c, h, w);
        gemm(
            T::one(),
            MatRef::new(s3.data(), c, n),
            attention.0.view().t(),
            T::zero(),
            MatMut::new(context.data_mut(), c, n),
        );
        let mut out = self.lambda.forward(&context)?;
        out.add_assign(f);
        Ok((
            out,
            SamTape {
                s1,
                s2,
                s3,
                attention,
                context,
            },
        ))
    }

    /// Returns `dL/dF`; parameter gradients accumulate into `grads`
    /// (ordered as [`SpatialAttention::convs`]).
    pub fn backward(
        &self,
        f: &FeatureMap<T>,
        tape: &SamTape<T>,
        dout: &Tensor<T>,
        grads: &mut [ConvGrad<T>],
    ) -> Result<FeatureMap<T>> {
        assert_eq!(grads.len(), 4);
        let (c, h, w) = f.shape();
        let n = h * w;
        let inner = self.s1.out_channels();
        let a = &tape.attention.0;

        let d_context = self
            .lambda
            .backward(&tape.context, dout, &mut grads[3], true)?
            .expect("input gradient requested");

        // context = S3 A^T
        let mut d_s3 = Tensor::zeros(c, h, w);
        gemm(
            T::one(),
            MatRef::new(d_context.data(), c, n),
            a.view(),
            T::zero(),
            MatMut::new(d_s3.data_mut(), c, n),
        );
        let mut d_logits = Matrix::zeros(n, n);
        gemm(
            T::one(),
            MatRef::new(d_context.data(), c, n).t(),
            MatRef::new(tape.s3.data(), c, n),
            T::zero(),
            MatMut::new(d_logits.data_mut(), n, n),
        );
        softmax_rows_backward(a.data(), d_logits.data_mut(), n);

        // L = S2^T S1
        let mut d_s1 = Tensor::zeros(inner, h, w);
        gemm(
            T::one(),
            MatRef::new(tape.s2.data(), inner, n),
            d_logits.view(),
            T::zero(),
            MatMut::new(d_s1.data_mut(), inner, n),
        );
        let mut d_s2 = Tensor::zeros(inner, h, w);
        gemm(
            T::one(),
            MatRef::new(tape.s1.data(), inner, n),
            d_logits.view().t(),
            T::zero(),
            MatMut::new(d_s2.data_mut(), inner, n),
        );

        let mut df = dout.clone();
        let (g_s1, rest) = grads.split_at_mut(1);
        let (g_s2, rest) = rest.split_at_mut(1);
        for (conv, dy, g) in [(&self.s1, &d_s1, &mut g_s1[0]), (&self.s2, &d_s2, &mut g_s2[0]), (&self.s3, &d_s3, &mut rest[0])] {
            let dx = conv.backward(f, dy, g, true)?.expect("input gradient requested");
            df.add_assign(&dx);
        }
        Ok(df)
    }
}

/// Parameters of the channel-wise attention branch.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttention<T> {
    pub proj: Conv2d<T>,
    pub mu: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct CamTape<T> {
    projected: Tensor<T>,
    attention: ChannelAttentionMatrix<T>,
    context: Tensor<T>,
}

impl<T: Scalar> CamTape<T> {
    pub fn attention(&self) -> &ChannelAttentionMatrix<T> {
        &self.attention
    }
}

impl<T: Scalar> ChannelAttention<T> {
    pub fn new(channels: usize, init: Init, seed: u64) -> Self {
        let conv = |name: &str, init: Init| Conv2d::new(name, channels, channels, 1, 1, init, &mut layer_rng(seed, name));
        ChannelAttention {
            proj: conv(CAM_LAYER_NAMES[0], init),
            mu: conv(CAM_LAYER_NAMES[1], Init::Zeros),
        }
    }

    pub fn channels(&self) -> usize {
        self.proj.in_channels()
    }

    pub fn convs(&self) -> [&Conv2d<T>; 2] {
        [&self.proj, &self.mu]
    }

    pub fn convs_mut(&mut self) -> [&mut Conv2d<T>; 2] {
        [&mut self.proj, &mut self.mu]
    }

    pub fn forward(&self, f: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.forward_train(f).map(|(out, _)| out)
    }

    pub fn forward_train(&self, f: &FeatureMap<T>) -> Result<(FeatureMap<T>, CamTape<T>)> {
        check_branch_input(f, self.channels(), "cam_forward")?;
        let (c, h, w) = f.shape();
        let n = h * w;
        let projected = self.proj.forward(f)?;
        // C1 = F' (C x HW), C2 = C1^T, C3 = C1
        let c1 = Matrix::from_vec(c, n, projected.data().to_vec());
        let attention = channel_attention_matrix(&c1, &c1.transpose())?;
        let mut context = Tensor::zeros(c, h, w);
        gemm(
            T::one(),
            attention.0.view(),
            c1.view(),
            T::zero(),
            MatMut::new(context.data_mut(), c, n),
        );
        let mut out = self.mu.forward(&context)?;
        out.add_assign(f);
        Ok((
            out,
            CamTape {
                projected,
                attention,
                context,
            },
        ))
    }

    /// Returns `dL/dF`; gradients accumulate into `grads` ordered as
    /// [`ChannelAttention::convs`].
    pub fn backward(
        &self,
        f: &FeatureMap<T>,
        tape: &CamTape<T>,
        dout: &Tensor<T>,
        grads: &mut [ConvGrad<T>],
    ) -> Result<FeatureMap<T>> {
        assert_eq!(grads.len(), 2);
        let (c, h, w) = f.shape();
        let n = h * w;
        let a = &tape.attention.0;
        let fp = MatRef::new(tape.projected.data(), c, n);

        let d_context = self
            .mu
            .backward(&tape.context, dout, &mut grads[1], true)?
            .expect("input gradient requested");
        let dc = MatRef::new(d_context.data(), c, n);

        // context = A F'
        let mut d_proj = Tensor::zeros(c, h, w);
        gemm(T::one(), a.view().t(), dc, T::zero(), MatMut::new(d_proj.data_mut(), c, n));
        let mut d_logits = Matrix::zeros(c, c);
        gemm(T::one(), dc, fp.t(), T::zero(), MatMut::new(d_logits.data_mut(), c, c));
        softmax_rows_backward(a.data(), d_logits.data_mut(), c);

        // L = F' F'^T  =>  dF' += (dL + dL^T) F'
        let symmetric = Matrix::from_fn(c, c, |r, col| d_logits.get(r, col) + d_logits.get(col, r));
        gemm(T::one(), symmetric.view(), fp, T::one(), MatMut::new(d_proj.data_mut(), c, n));

        let mut df = dout.clone();
        let dx = self
            .proj
            .backward(f, &d_proj, &mut grads[0], true)?
            .expect("input gradient requested");
        df.add_assign(&dx);
        Ok(df)
    }
}

pub fn sam_forward<T: Scalar>(f: &FeatureMap<T>, state: &SpatialAttention<T>) -> Result<FeatureMap<T>> {
    state.forward(f)
}

pub fn cam_forward<T: Scalar>(f: &FeatureMap<T>, state: &ChannelAttention<T>) -> Result<FeatureMap<T>> {
    state.forward(f)
}

/// How SAM and CAM outputs are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Fusion {
    /// Channel stacking, SAM channels first (`2C` channels).
    Concat,
    /// Elementwise addition (`C` channels).
    Sum,
}

impl Fusion {
    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::Concat => "concat",
            Fusion::Sum => "sum",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Fusion::Concat),
            "sum" => Ok(Fusion::Sum),
            other => Err(Error::Config(format!("unknown fusion {other:?}, expected concat or sum"))),
        }
    }

    /// Channel count of the fused map for `channels`-channel inputs.
    pub fn output_channels(self, channels: usize) -> usize {
        match self {
            Fusion::Concat => 2 * channels,
            Fusion::Sum => channels,
        }
    }
}

pub fn fuse<T: Scalar>(sam_out: &FeatureMap<T>, cam_out: &FeatureMap<T>, strategy: Fusion) -> Result<FeatureMap<T>> {
    sam_out.ensure_shape(cam_out, "fuse")?;
    match strategy {
        Fusion::Concat => sam_out.concat_channels(cam_out),
        Fusion::Sum => {
            let mut out = sam_out.clone();
            out.add_assign(cam_out);
            Ok(out)
        }
    }
}

/// Split the fused gradient into `(d_sam, d_cam)`.
pub fn fuse_backward<T: Scalar>(d_fused: &Tensor<T>, strategy: Fusion) -> (Tensor<T>, Tensor<T>) {
    match strategy {
        Fusion::Concat => d_fused.split_channels(d_fused.channels() / 2),
        Fusion::Sum => (d_fused.clone(), d_fused.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_position_gives_unit_matrix() {
        let s = Tensor::<f64>::from_vec(3, 1, 1, vec![0.3, -2.0, 5.0]).unwrap();
        let a = spatial_attention_matrix(&s, &s).unwrap();
        assert_eq!(a.matrix().data(), &[1.0]);
    }

    #[test]
    fn identical_positions_give_uniform_rows() {
        let s1 = Tensor::<f64>::from_fn(2, 2, 3, |c, _, _| c as f64 + 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s2 = random(&mut rng, 2, 2, 3);
        let a = spatial_attention_matrix(&s1, &s2).unwrap();
        for v in a.matrix().data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_channels_give_uniform_rows() {
        let c1 = Matrix::<f64>::from_fn(4, 5, |_, n| n as f64 * 0.3);
        let a = channel_attention_matrix(&c1, &c1.transpose()).unwrap();
        for v in a.matrix().data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let single = Matrix::<f64>::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        assert_eq!(channel_attention_matrix(&single, &single.transpose()).unwrap().matrix().data(), &[1.0]);
    }

    #[test]
    fn shape_mismatches_are_errors() {
        let a = Tensor::<f64>::zeros(2, 2, 2);
        let b = Tensor::<f64>::zeros(2, 2, 3);
        assert!(spatial_attention_matrix(&a, &b).is_err());
        let m = Matrix::<f64>::zeros(3, 4);
        assert!(channel_attention_matrix(&m, &m).is_err());
        let sam = SpatialAttention::<f64>::new(4, 1, Init::He, 0);
        assert!(sam.forward(&Tensor::zeros(3, 2, 2)).is_err());
        assert!(fuse(&a, &b, Fusion::Sum).is_err());
    }

    #[test]
    fn fresh_branches_are_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random(&mut rng, 8, 3, 5);
        let sam = SpatialAttention::new(8, 1, Init::Gaussian { std: 0.5 }, 3);
        let cam = ChannelAttention::new(8, Init::Gaussian { std: 0.5 }, 3);
        assert_eq!(sam.forward(&f).unwrap(), f);
        assert_eq!(cam.forward(&f).unwrap(), f);
    }

    #[test]
    fn fusion_shapes_and_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 4, 2, 3);
        let b = random(&mut rng, 4, 2, 3);
        assert_eq!(fuse(&a, &b, Fusion::Concat).unwrap().shape(), (8, 2, 3));
        assert_eq!(fuse(&a, &Tensor::zeros(4, 2, 3), Fusion::Sum).unwrap(), a);
        assert_eq!(fuse(&a, &b, Fusion::Sum).unwrap(), fuse(&b, &a, Fusion::Sum).unwrap());
    }
}
