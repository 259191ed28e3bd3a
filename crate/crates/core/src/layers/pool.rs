use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    Tensor::from_fn(c, oh, ow, |ch, y, xx| {
        let (y0, x0) = (2 * y, 2 * xx);
        x.get(ch, y0, x0)
            .max(x.get(ch, y0, x0 + 1))
            .max(x.get(ch, y0 + 1, x0))
            .max(x.get(ch, y0 + 1, x0 + 1))
    })
}

/// Routes each upstream gradient to the first maximal element of its window
/// (row-major tie break).
pub fn max_pool2_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.shape();
    let mut dx = Tensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..dy.height() {
            for xx in 0..dy.width() {
                let (y0, x0) = (2 * y, 2 * xx);
                let mut best = (y0, x0);
                let mut best_v = x.get(ch, y0, x0);
                for (yy, xc) in [(y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)] {
                    let v = x.get(ch, yy, xc);
                    if v > best_v {
                        best_v = v;
                        best = (yy, xc);
                    }
                }
                let g = dx.get(ch, best.0, best.1) + dy.get(ch, y, xx);
                dx.set(ch, best.0, best.1, g);
            }
        }
    }
    dx
}
