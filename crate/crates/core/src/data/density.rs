use crate::data::scene::{validate_points, Point};
use crate::error::{Error, Result};
use crate::grid::DensityMap;

/// Default Gaussian bandwidth in pixels at 576x768.
pub const DEFAULT_SIGMA: f64 = 4.0;

/// Kernel support half-width in units of sigma.
pub const TRUNCATE_SIGMAS: f64 = 4.0;

/// Ground-truth density: one isotropic Gaussian per head, truncated to a
/// `±4 sigma` box and to the image, then renormalized to unit mass. The map
/// therefore sums to the number of points up to rounding.
pub fn generate_density_map(points: &[Point], shape: (usize, usize), sigma: f64) -> Result<DensityMap> {
    let (h, w) = shape;
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("density shape must be positive, got {h}x{w}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    validate_points("<density>", points, h, w)?;

    let mut map = DensityMap::zeros(h, w);
    let radius = TRUNCATE_SIGMAS * sigma;
    let mut wx = Vec::new();
    let mut wy = Vec::new();
    for p in points {
        let (x0, x1) = support(p.x, radius, w);
        let (y0, y1) = support(p.y, radius, h);
        axis_weights(p.x, x0, x1, sigma, &mut wx);
        axis_weights(p.y, y0, y1, sigma, &mut wy);
        let norm = wx.iter().sum::<f64>() * wy.iter().sum::<f64>();
        for (yi, &ay) in wy.iter().enumerate() {
            let row = y0 + yi;
            let dst = &mut map.values_mut()[row * w + x0..row * w + x1 + 1];
            for (d, &ax) in dst.iter_mut().zip(&wx) {
                *d += ay * ax / norm;
            }
        }
    }
    Ok(map)
}

/// Inclusive pixel index range within `radius` of `center`, clipped to the
/// grid. The center pixel is always included since `0 <= center < len`.
fn support(center: f64, radius: f64, len: usize) -> (usize, usize) {
    let lo = (center - radius).ceil().max(0.0) as usize;
    let hi = ((center + radius).floor() as usize).min(len - 1);
    (lo, hi)
}

fn axis_weights(center: f64, lo: usize, hi: usize, sigma: f64, out: &mut Vec<f64>) {
    out.clear();
    let denom = 2.0 * sigma * sigma;
    out.extend((lo..=hi).map(|i| {
        let d = i as f64 - center;
        (-d * d / denom).exp()
    }));
}
