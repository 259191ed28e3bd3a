use image::RgbImage;

use crate::data::scene::{AnnotatedScene, Point};
use crate::error::{Error, Result};
use crate::layers::resample::resize_bilinear;
use crate::tensor::Tensor;

/// Bilinear resample of an RGB image to `height x width`.
pub fn resize_image(image: &RgbImage, height: usize, width: usize) -> RgbImage {
    let (w, h) = image.dimensions();
    if (h as usize, w as usize) == (height, width) {
        return image.clone();
    }
    let src = Tensor::<f64>::from_fn(3, h as usize, w as usize, |c, y, x| {
        image.get_pixel(x as u32, y as u32)[c] as f64
    });
    let dst = resize_bilinear(&src, height, width, 1.0);
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let px = |c| dst.get(c, y as usize, x as usize).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Resample the image to `target = (H', W')` and scale every head point by
/// `(W' / W, H' / H)`. Density maps should be generated from the scaled
/// points, never by resampling a density grid.
pub fn resize_scene(scene: &AnnotatedScene, target: (usize, usize)) -> Result<AnnotatedScene> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::InvalidArgument(format!("resize target must be positive, got {th}x{tw}")));
    }
    let (h, w) = scene.shape();
    if (h, w) == target {
        return Ok(scene.clone());
    }
    let sx = tw as f64 / w as f64;
    let sy = th as f64 / h as f64;
    let points = scene
        .head_points()
        .iter()
        .map(|p| Point::new(scale_coord(p.x, sx, tw), scale_coord(p.y, sy, th)))
        .collect();
    AnnotatedScene::new(scene.scene_id(), resize_image(scene.image(), th, tw), points)
}

/// `v * s`, kept strictly below `len` if rounding lands on the edge.
fn scale_coord(v: f64, s: f64, len: usize) -> f64 {
    let out = v * s;
    if out < len as f64 {
        out
    } else {
        (len as f64).next_down()
    }
}
