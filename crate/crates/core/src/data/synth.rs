use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::scene::{AnnotatedScene, Point};

/// Offset of the linear density ramp used when `density_gradient` is set:
/// head density along y is proportional to `RAMP_OFFSET + y / H`.
const RAMP_OFFSET: f64 = 0.1;

/// Render a deterministic synthetic crowd scene: a smoothly textured
/// background with one dark disk per head. With `density_gradient`, heads
/// become monotonically denser toward the bottom of the image.
pub fn synth_scene(n_heads: usize, shape: (usize, usize), seed: u64, density_gradient: bool) -> AnnotatedScene {
    let (h, w) = shape;
    assert!(h > 0 && w > 0, "synthetic scene shape must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let points: Vec<Point> = (0..n_heads)
        .map(|_| {
            let x = rng.random_range(0.0..w as f64);
            let u: f64 = rng.random();
            let t = if density_gradient {
                // inverse CDF of p(t) = (a + t) / (a + 1/2) on [0, 1)
                let a = RAMP_OFFSET;
                -a + (a * a + 2.0 * u * (a + 0.5)).sqrt()
            } else {
                u
            };
            let y = (t * h as f64).min((h as f64).next_down());
            Point::new(x, y)
        })
        .collect();

    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(150.0..205.0));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.15),
                rng.random_range(0.02..0.15),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(6.0..16.0),
            )
        })
        .collect();
    let mut img = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (xf, yf) = (x as f64, y as f64);
        let texture: f64 = waves
            .iter()
            .map(|&(fx, fy, phase, amp)| amp * (fx * xf + fy * yf + phase).sin())
            .sum();
        let noise = rng.random_range(-6.0..6.0);
        for c in 0..3 {
            px[c] = (base[c] + texture + noise).clamp(0.0, 255.0) as u8;
        }
    }

    let radius = (h.min(w) as f64 / 40.0).max(1.5);
    let head_tone = [40.0, 32.0, 28.0];
    for p in &points {
        let x0 = (p.x - radius - 1.0).floor().max(0.0) as u32;
        let x1 = ((p.x + radius + 1.0).ceil() as u32).min(w as u32 - 1);
        let y0 = (p.y - radius - 1.0).floor().max(0.0) as u32;
        let y1 = ((p.y + radius + 1.0).ceil() as u32).min(h as u32 - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f64 - p.x).powi(2) + (y as f64 - p.y).powi(2)).sqrt();
                let coverage = (radius + 0.5 - d).clamp(0.0, 1.0);
                if coverage > 0.0 {
                    let px = img.get_pixel_mut(x, y);
                    for c in 0..3 {
                        let v = px[c] as f64 * (1.0 - coverage) + head_tone[c] * coverage;
                        px[c] = v.round() as u8;
                    }
                }
            }
        }
    }

    AnnotatedScene::new(format!("synth_{seed}"), img, points).expect("synthetic points are in bounds")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_has_no_points() {
        assert!(synth_scene(0, (32, 32), 1, false).head_points().is_empty());
    }

    #[test]
    fn deterministic_in_seed() {
        assert_eq!(synth_scene(20, (48, 64), 9, true), synth_scene(20, (48, 64), 9, true));
        assert_ne!(synth_scene(20, (48, 64), 9, true), synth_scene(20, (48, 64), 10, true));
    }

    #[test]
    fn requested_heads_are_in_bounds() {
        let s = synth_scene(50, (96, 128), 3, false);
        assert_eq!(s.count(), 50);
        assert!(s.head_points().iter().all(|p| p.in_bounds(96, 128)));
    }

    #[test]
    fn gradient_flag_skews_density_downward() {
        let s = synth_scene(4000, (100, 100), 5, true);
        let bottom = s.head_points().iter().filter(|p| p.y >= 50.0).count();
        // expected bottom share (0.05 + 0.375) / 0.6 ~ 0.708
        assert!(bottom > 2600, "{bottom}");
        let quarters: Vec<usize> = (0..4)
            .map(|q| s.head_points().iter().filter(|p| (p.y / 25.0) as usize == q).count())
            .collect();
        assert!(quarters.windows(2).all(|w| w[0] < w[1]), "{quarters:?}");
    }
}
