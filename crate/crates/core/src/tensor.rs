use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A `C x H x W` activation grid stored channel-major, row-major within each
/// channel plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

pub type FeatureMap<T> = Tensor<T>;

impl<T: Scalar> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "Tensor::from_vec",
                channels * height * width,
                data.len(),
            ));
        }
        Ok(Tensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(C, H, W)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Number of spatial positions, `H * W`.
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(
                context,
                format_shape(self.shape()),
                format_shape(other.shape()),
            ))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack channels of `self` followed by channels of `other`.
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(
                "concat_channels",
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Tensor {
            channels: self.channels + other.channels,
            height: self.height,
            width: self.width,
            data,
        })
    }

    /// Split along channels at `at`; inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, at: usize) -> (Self, Self) {
        assert!(at > 0 && at < self.channels);
        let n = at * self.plane_len();
        (
            Tensor {
                channels: at,
                height: self.height,
                width: self.width,
                data: self.data[..n].to_vec(),
            },
            Tensor {
                channels: self.channels - at,
                height: self.height,
                width: self.width,
                data: self.data[n..].to_vec(),
            },
        )
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

pub(crate) fn format_shape((c, h, w): (usize, usize, usize)) -> String {
    format!("{c}x{h}x{w}")
}

/// In-place ReLU.
pub fn relu_inplace<T: Scalar>(values: &mut [T]) {
    for v in values {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zero the upstream gradient wherever the ReLU output was not positive.
pub fn relu_backward_inplace<T: Scalar>(output: &[T], grad: &mut [T]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_restores_inputs() {
        let a = Tensor::<f64>::from_fn(2, 3, 4, |c, y, x| (c * 100 + y * 10 + x) as f64);
        let b = Tensor::<f64>::from_fn(3, 3, 4, |c, y, x| -((c * 100 + y * 10 + x) as f64));
        let ab = a.concat_channels(&b).unwrap();
        assert_eq!(ab.shape(), (5, 3, 4));
        let (a2, b2) = ab.split_channels(2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(0, 2, 2, vec![]).is_err());
    }
}
