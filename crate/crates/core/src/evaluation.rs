//! Counting metrics (MAE and root-mean-square "MSE" over per-image counts),
//! density-map quality (PSNR, SSIM), the evaluation driver and attention
//! visualization export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use crate::data::{generate_density_map, resize_scene, AnnotatedScene};
use crate::error::{Error, Result};
use crate::grid::{DensityMap, Grid};
use crate::model::{predict_density, predict_with_attention, ModelVariant};
use crate::par;
use crate::scalar::Scalar;

/// PSNR reported for a zero-error prediction.
pub const DEFAULT_PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_counts(gt: &[f64], pred: &[f64]) -> Result<()> {
    if gt.len() != pred.len() {
        return Err(Error::shape("count lists", gt.len(), pred.len()));
    }
    if gt.is_empty() {
        return Err(Error::InvalidArgument("count lists are empty".into()));
    }
    Ok(())
}

/// Mean absolute count error.
pub fn mae(gt_counts: &[f64], pred_counts: &[f64]) -> Result<f64> {
    check_counts(gt_counts, pred_counts)?;
    let total: f64 = gt_counts.iter().zip(pred_counts).map(|(g, p)| (g - p).abs()).sum();
    Ok(total / gt_counts.len() as f64)
}

/// Root of the mean squared count error.
pub fn mse_count(gt_counts: &[f64], pred_counts: &[f64]) -> Result<f64> {
    check_counts(gt_counts, pred_counts)?;
    let total: f64 = gt_counts.iter().zip(pred_counts).map(|(g, p)| (g - p) * (g - p)).sum();
    Ok((total / gt_counts.len() as f64).sqrt())
}

/// Scale both maps by `1 / max(gt)`.
pub fn normalize_pair(pred: &DensityMap, gt: &DensityMap) -> Result<(Grid, Grid)> {
    pred.ensure_same_shape(gt, "normalize_pair")?;
    let peak = gt.max();
    if peak.is_nan() || peak <= 0.0 {
        return Err(Error::ZeroGroundTruth);
    }
    Ok((pred.scaled(1.0 / peak), gt.scaled(1.0 / peak)))
}

/// PSNR in dB after GT-max normalization, capped at `cap`.
pub fn psnr_with_cap(pred: &DensityMap, gt: &DensityMap, cap: f64) -> Result<f64> {
    let (p, g) = normalize_pair(pred, gt)?;
    let n = p.values().len() as f64;
    let mse: f64 = p.values().iter().zip(g.values()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(cap))
}

pub fn psnr(pred: &DensityMap, gt: &DensityMap) -> Result<f64> {
    psnr_with_cap(pred, gt, DEFAULT_PSNR_CAP)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a row-major `h x w` buffer.
fn filter_valid(values: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| values[y * w + x + i] * k[i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| rows[(y + i) * ow + x] * k[i]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5) and dynamic
/// range 1; both maps are expected to be normalized already. Maps smaller
/// than the window use the largest odd window that fits.
pub fn ssim(pred: &DensityMap, gt: &DensityMap) -> Result<f64> {
    pred.ensure_same_shape(gt, "ssim")?;
    let (h, w) = pred.resolution();
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("ssim of an empty map".into()));
    }
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_window(size, SSIM_SIGMA);
    let (x, y) = (pred.values(), gt.values());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, _, _) = filter_valid(x, h, w, &k);
    let (my, _, _) = filter_valid(y, h, w, &k);
    let (exx, _, _) = filter_valid(&xx, h, w, &k);
    let (eyy, _, _) = filter_valid(&yy, h, w, &k);
    let (exy, _, _) = filter_valid(&xy, h, w, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = (exx[i] - ux * ux).max(0.0);
        let vy = (eyy[i] - uy * uy).max(0.0);
        let cov = exy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok((total / mx.len() as f64).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    pub scene_id: String,
    pub gt_count: f64,
    pub pred_count: f64,
}

/// Aggregate evaluation result.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mae: f64,
    /// Root-mean-square count error.
    pub mse: f64,
    /// Mean PSNR (dB) over images with non-zero ground truth; NaN if none.
    pub psnr: f64,
    /// Mean SSIM over images with non-zero ground truth; NaN if none.
    pub ssim: f64,
    pub n_images: usize,
    /// Images that entered the PSNR/SSIM averages.
    pub n_quality_images: usize,
    pub per_image: Vec<ImageResult>,
}

impl MetricsReport {
    pub fn from_results(per_image: Vec<ImageResult>, quality: &[(f64, f64)]) -> Result<Self> {
        let gt: Vec<f64> = per_image.iter().map(|r| r.gt_count).collect();
        let pred: Vec<f64> = per_image.iter().map(|r| r.pred_count).collect();
        let mean = |f: fn(&(f64, f64)) -> f64| {
            if quality.is_empty() {
                f64::NAN
            } else {
                quality.iter().map(f).sum::<f64>() / quality.len() as f64
            }
        };
        Ok(MetricsReport {
            mae: mae(&gt, &pred)?,
            mse: mse_count(&gt, &pred)?,
            psnr: mean(|q| q.0),
            ssim: mean(|q| q.1),
            n_images: per_image.len(),
            n_quality_images: quality.len(),
            per_image,
        })
    }

    /// Header block of aggregate metrics, then one
    /// `scene_id\tgt_count\tpred_count` line per image.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# scar metrics report");
        let _ = writeln!(out, "mae\t{}", self.mae);
        let _ = writeln!(out, "mse\t{}", self.mse);
        let _ = writeln!(out, "psnr\t{}", self.psnr);
        let _ = writeln!(out, "ssim\t{}", self.ssim);
        let _ = writeln!(out, "n_images\t{}", self.n_images);
        let _ = writeln!(out, "quality_images\t{}", self.n_quality_images);
        let _ = writeln!(out, "normalization\tgt-max");
        let _ = writeln!(out, "scene_id\tgt_count\tpred_count");
        for r in &self.per_image {
            let _ = writeln!(out, "{}\t{}\t{}", r.scene_id, r.gt_count, r.pred_count);
        }
        out
    }
}

/// Counting and density-quality metrics of `model` on `scenes`. Scenes are
/// resized to the model's input size and ground truth is generated there.
/// Images with all-zero ground truth count toward MAE/MSE only.
pub fn evaluate<T: Scalar>(model: &ModelVariant<T>, scenes: &[AnnotatedScene], sigma: f64) -> Result<MetricsReport> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("no scenes to evaluate".into()));
    }
    let size = model.config().input_size;
    let results = par::map_slice(scenes, |scene| -> Result<(ImageResult, Option<(f64, f64)>)> {
        let scene = resize_scene(scene, size)?;
        let pred = predict_density(model, &model.image_tensor(scene.image()))?;
        let gt = generate_density_map(scene.head_points(), size, sigma)?;
        let quality = match normalize_pair(&pred.density, &gt) {
            Ok((p, g)) => Some((psnr(&pred.density, &gt)?, ssim(&p, &g)?)),
            Err(Error::ZeroGroundTruth) => None,
            Err(e) => return Err(e),
        };
        Ok((
            ImageResult {
                scene_id: scene.scene_id().to_string(),
                gt_count: scene.count() as f64,
                pred_count: pred.count,
            },
            quality,
        ))
    });
    let mut per_image = Vec::with_capacity(scenes.len());
    let mut quality = Vec::new();
    for r in results {
        let (img, q) = r?;
        per_image.push(img);
        quality.extend(q);
    }
    MetricsReport::from_results(per_image, &quality)
}

/// Viridis anchor colors at 0, 1/8, ..., 1.
const VIRIDIS: [[f64; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 44.0, 122.0],
    [59.0, 81.0, 139.0],
    [44.0, 113.0, 142.0],
    [33.0, 144.0, 141.0],
    [39.0, 173.0, 129.0],
    [92.0, 200.0, 99.0],
    [170.0, 220.0, 50.0],
    [253.0, 231.0, 37.0],
];

/// Viridis color for `t` in `[0, 1]` (clamped).
pub fn colormap(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (VIRIDIS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(VIRIDIS.len() - 2);
    let f = pos - i as f64;
    std::array::from_fn(|c| (VIRIDIS[i][c] * (1.0 - f) + VIRIDIS[i + 1][c] * f).round() as u8)
}

/// Min-max normalized 8-bit grayscale; a constant grid maps to mid-gray.
pub fn grid_to_gray(grid: &Grid) -> GrayImage {
    let (lo, hi) = (grid.min(), grid.max());
    let span = hi - lo;
    GrayImage::from_fn(grid.width() as u32, grid.height() as u32, |x, y| {
        let v = grid.get(y as usize, x as usize);
        let t = if span > 0.0 { (v - lo) / span } else { 0.5 };
        image::Luma([(t * 255.0).round() as u8])
    })
}

/// Color-mapped density, scaled by its maximum.
pub fn density_to_rgb(grid: &Grid) -> RgbImage {
    let peak = grid.max();
    RgbImage::from_fn(grid.width() as u32, grid.height() as u32, |x, y| {
        let v = grid.get(y as usize, x as usize);
        image::Rgb(colormap(if peak > 0.0 { v / peak } else { 0.0 }))
    })
}

fn save_png(img: impl FnOnce(&Path) -> image::ImageResult<()>, path: &Path) -> Result<()> {
    img(path).map_err(|e| Error::ImageWrite {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Write `<scene_id>_sam_ch<k>.png` / `<scene_id>_cam_ch<k>.png` for every
/// requested channel of each attention branch present, plus
/// `<scene_id>_density.png`. Returns the written paths.
pub fn export_attention_maps<T: Scalar>(
    model: &ModelVariant<T>,
    image: &RgbImage,
    scene_id: &str,
    out_dir: impl AsRef<Path>,
    channel_indices: &[usize],
) -> Result<Vec<PathBuf>> {
    if model.sam().is_none() && model.cam().is_none() {
        return Err(Error::NoAttention(model.variant().to_string()));
    }
    let out_dir = out_dir.as_ref();
    let (h, w) = model.config().input_size;
    let resized = crate::data::resize_image(image, h, w);
    let pred = predict_with_attention(model, &model.image_tensor(&resized), channel_indices)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut ordered: Vec<_> = pred.attention_snapshots.iter().collect();
    // sam_ch0, cam_ch0, sam_ch1, ... so paired maps sit together
    ordered.sort_by_key(|s| {
        let k: usize = s.label.rsplit("ch").next().and_then(|v| v.parse().ok()).unwrap_or(0);
        (k, !s.label.starts_with("sam"))
    });
    for snap in ordered {
        let path = out_dir.join(format!("{scene_id}_{}.png", snap.label));
        let img = grid_to_gray(&snap.grid);
        save_png(|p| img.save(p), &path)?;
        written.push(path);
    }
    let path = out_dir.join(format!("{scene_id}_density.png"));
    let img = density_to_rgb(&pred.density);
    save_png(|p| img.save(p), &path)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_metrics_examples() {
        assert_eq!(mae(&[10.0], &[10.0]).unwrap(), 0.0);
        assert_eq!(mae(&[10.0, 20.0], &[12.0, 17.0]).unwrap(), 2.5);
        assert!((mse_count(&[10.0, 20.0], &[12.0, 17.0]).unwrap() - 6.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(mse_count(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(mse_count(&[7.0], &[2.5]).unwrap(), mae(&[7.0], &[2.5]).unwrap());
        assert!(mae(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn psnr_examples() {
        let gt = Grid::from_fn(8, 8, |y, x| ((x + y) % 4) as f64 / 3.0);
        assert_eq!(psnr(&gt, &gt).unwrap(), 100.0);
        let off = |e: f64| Grid::from_fn(8, 8, |y, x| gt.get(y, x) + e);
        assert!((psnr(&off(0.1), &gt).unwrap() - 20.0).abs() < 1e-9);
        let gain = psnr(&off(0.05), &gt).unwrap() - psnr(&off(0.1), &gt).unwrap();
        assert!((gain - 20.0 * 2f64.log10()).abs() < 1e-9);
        assert!(matches!(psnr(&gt, &Grid::zeros(8, 8)), Err(Error::ZeroGroundTruth)));
        assert!(psnr(&gt, &Grid::zeros(8, 7)).is_err());
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let g = Grid::from_fn(16, 16, |y, x| ((x * 7 + y * 3) % 11) as f64 / 10.0);
        assert_eq!(ssim(&g, &g).unwrap(), 1.0);
        let inv = Grid::from_fn(16, 16, |y, x| 1.0 - g.get(y, x));
        assert!(ssim(&inv, &g).unwrap() < 0.0);
        let small = Grid::from_fn(4, 6, |y, x| (x + y) as f64);
        assert_eq!(ssim(&small, &small).unwrap(), 1.0);
    }

    #[test]
    fn gray_degenerate_rule() {
        let img = grid_to_gray(&Grid::from_fn(3, 3, |_, _| 4.2));
        assert!(img.pixels().all(|p| p.0 == [128]));
        let img = grid_to_gray(&Grid::from_vec(1, 2, vec![-1.0, 3.0]).unwrap());
        assert_eq!(img.as_raw(), &vec![0, 255]);
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [68, 1, 84]);
        assert_eq!(colormap(1.0), [253, 231, 37]);
        assert_eq!(colormap(f64::NAN), [68, 1, 84]);
    }

    #[test]
    fn report_rendering() {
        let r = MetricsReport::from_results(
            vec![
                ImageResult { scene_id: "a".into(), gt_count: 10.0, pred_count: 12.0 },
                ImageResult { scene_id: "b".into(), gt_count: 20.0, pred_count: 17.0 },
            ],
            &[(20.0, 0.5)],
        )
        .unwrap();
        let text = r.render();
        assert!(text.contains("mae\t2.5\n"));
        assert!(text.ends_with("a\t10\t12\nb\t20\t17\n"));
        assert!(r.mae <= r.mse);
    }
}
