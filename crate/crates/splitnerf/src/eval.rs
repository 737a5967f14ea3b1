//! Quantitative evaluation: PSNR and SSIM over the full image and over the
//! dynamic-foreground / static-background split induced by the projected
//! object bounding box, relative pose tracking error between neighboring
//! frames, and density-grid occupancy extraction with symmetric Hausdorff
//! distance.

use crate::field::{batch_forward, FieldParams, Query};
use crate::scene::{Aabb, Camera, Image};
use crate::se3::{inverse, relative, transform_point, RigidTransform};
use nalgebra::Vector3;
use ndarray::Array2;
use rayon::prelude::*;

/// PSNR returned for an exact match (MSE = 0).
pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio in dB for images in [0, 1].
pub fn psnr(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mse =
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable Gaussian filter, valid positions only: output is
/// (h - 10) x (w - 10).
fn gaussian_valid(img: &Array2<f64>, kernel: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = img.dim();
    let wv = w - SSIM_WINDOW + 1;
    let hv = h - SSIM_WINDOW + 1;
    let mut horiz = Array2::zeros((h, wv));
    for r in 0..h {
        for c in 0..wv {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * img[[r, c + i]];
            }
            horiz[[r, c]] = acc;
        }
    }
    let mut out = Array2::zeros((hv, wv));
    for r in 0..hv {
        for c in 0..wv {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * horiz[[r + i, c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Mean SSIM index over channels and valid window positions (Gaussian
/// window 11, sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1). When
/// `window_ok` is given, only windows it marks are averaged.
fn ssim_impl(a: &Image, b: &Image, window_ok: Option<&Array2<bool>>) -> Option<f64> {
    assert_eq!(a.shape(), b.shape());
    let (h, w) = (a.shape()[0], a.shape()[1]);
    assert!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        "image smaller than the SSIM window"
    );
    let kernel = ssim_kernel();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut acc = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let x = a.index_axis(ndarray::Axis(2), ch).to_owned();
        let y = b.index_axis(ndarray::Axis(2), ch).to_owned();
        let mu_x = gaussian_valid(&x, &kernel);
        let mu_y = gaussian_valid(&y, &kernel);
        let xx = gaussian_valid(&(&x * &x), &kernel);
        let yy = gaussian_valid(&(&y * &y), &kernel);
        let xy = gaussian_valid(&(&x * &y), &kernel);
        for r in 0..mu_x.nrows() {
            for c in 0..mu_x.ncols() {
                if let Some(ok) = window_ok {
                    if !ok[[r, c]] {
                        continue;
                    }
                }
                let (mx, my) = (mu_x[[r, c]], mu_y[[r, c]]);
                let vx = xx[[r, c]] - mx * mx;
                let vy = yy[[r, c]] - my * my;
                let cov = xy[[r, c]] - mx * my;
                let idx = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                acc += idx;
                count += 1;
            }
        }
    }
    (count > 0).then(|| acc / count as f64)
}

/// Structural similarity over the whole image.
pub fn ssim(a: &Image, b: &Image) -> f64 {
    ssim_impl(a, b, None).expect("full image always has valid windows")
}

/// Boolean foreground mask (true = dynamic object region).
#[derive(Debug, Clone)]
pub struct RegionMask {
    pub mask: Array2<bool>,
}

impl RegionMask {
    pub fn fg_pixel_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RegionMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

/// PSNR/SSIM over the full image plus each region of the fg/bg split.
/// Region PSNR uses the masked MSE; region SSIM averages windows fully
/// inside the region. A region with no pixels (or no complete windows for
/// SSIM) reports `None`.
pub fn region_metrics(
    pred: &Image,
    target: &Image,
    mask: &RegionMask,
) -> (RegionMetrics, Option<RegionMetrics>, Option<RegionMetrics>) {
    let full = RegionMetrics { psnr: psnr(pred, target), ssim: ssim(pred, target) };
    let (h, w) = (pred.shape()[0], pred.shape()[1]);

    let masked = |want: bool| -> Option<RegionMetrics> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for r in 0..h {
            for c in 0..w {
                if mask.mask[[r, c]] == want {
                    for ch in 0..3 {
                        let d = pred[[r, c, ch]] - target[[r, c, ch]];
                        sum += d * d;
                    }
                    count += 3;
                }
            }
        }
        if count == 0 {
            return None;
        }
        // Windows fully inside the region, via a summed-area table of the
        // region indicator.
        let mut sat = Array2::<u32>::zeros((h + 1, w + 1));
        for r in 0..h {
            for c in 0..w {
                let v = (mask.mask[[r, c]] == want) as u32;
                sat[[r + 1, c + 1]] = v + sat[[r, c + 1]] + sat[[r + 1, c]] - sat[[r, c]];
            }
        }
        let hv = h - SSIM_WINDOW + 1;
        let wv = w - SSIM_WINDOW + 1;
        let mut ok = Array2::from_elem((hv, wv), false);
        let full_window = (SSIM_WINDOW * SSIM_WINDOW) as u32;
        for r in 0..hv {
            for c in 0..wv {
                let s = sat[[r + SSIM_WINDOW, c + SSIM_WINDOW]] + sat[[r, c]]
                    - sat[[r, c + SSIM_WINDOW]]
                    - sat[[r + SSIM_WINDOW, c]];
                ok[[r, c]] = s == full_window;
            }
        }
        let region_ssim = ssim_impl(pred, target, Some(&ok));
        Some(RegionMetrics {
            psnr: psnr_from_mse(sum / count as f64),
            ssim: region_ssim.unwrap_or(f64::NAN),
        })
    };

    (full, masked(true), masked(false))
}

/// Rasterized convex hull of the object bounding box's corners projected at
/// the given object pose. Corners behind the camera are clipped; fewer than
/// three visible corners yield an empty mask.
pub fn project_bbox_mask(bbox: &Aabb, pose: &RigidTransform, camera: &Camera) -> RegionMask {
    let w2c = inverse(&camera.camera_to_world);
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(8);
    for corner in bbox.corners() {
        let world = transform_point(pose, &corner);
        let cam = transform_point(&w2c, &world);
        if cam[2] >= -1e-9 {
            continue; // behind the camera (it looks down -z)
        }
        let px = camera.cx + camera.fx * (cam[0] / -cam[2]);
        let py = camera.cy - camera.fy * (cam[1] / -cam[2]);
        pts.push((px, py));
    }
    let mut mask = Array2::from_elem((camera.height, camera.width), false);
    if pts.len() >= 3 {
        let hull = convex_hull(&mut pts);
        for r in 0..camera.height {
            for c in 0..camera.width {
                let p = (c as f64 + 0.5, r as f64 + 0.5);
                if point_in_convex(&hull, p) {
                    mask[[r, c]] = true;
                }
            }
        }
    }
    RegionMask { mask }
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew monotone chain; returns the hull in counter-clockwise order.
fn convex_hull(pts: &mut Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return pts.clone();
    }
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter() {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn point_in_convex(hull: &[(f64, f64)], p: (f64, f64)) -> bool {
    if hull.len() < 3 {
        return false;
    }
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        if cross(a, b, p) < 0.0 {
            return false;
        }
    }
    true
}

/// Relative pose error between neighboring frames: rotation in degrees and
/// translation as a percentage of the object bounding-box diagonal.
#[derive(Debug, Clone)]
pub struct PoseErrorReport {
    pub rotation_deg: Vec<f64>,
    pub translation_pct: Vec<f64>,
    pub mean_rotation_deg: f64,
    pub mean_translation_pct: f64,
}

/// Compares the estimated object-motion trajectory against ground truth by
/// relative (frame-to-frame) poses, which makes the metric invariant to any
/// constant pre-transform applied to both sequences.
pub fn tracking_error(
    estimated: &[RigidTransform],
    gt: &[RigidTransform],
    bbox: &Aabb,
) -> PoseErrorReport {
    assert_eq!(estimated.len(), gt.len());
    assert!(estimated.len() >= 2, "need at least two frames");
    let diag = bbox.diagonal();
    let mut rotation_deg = Vec::with_capacity(estimated.len() - 1);
    let mut translation_pct = Vec::with_capacity(estimated.len() - 1);
    for t in 1..estimated.len() {
        let rel_est = relative(&estimated[t - 1], &estimated[t]);
        let rel_gt = relative(&gt[t - 1], &gt[t]);
        let err = relative(&rel_gt, &rel_est);
        rotation_deg.push(err.rotation_angle().to_degrees());
        translation_pct.push((rel_est.t - rel_gt.t).norm() / diag * 100.0);
    }
    let n = rotation_deg.len() as f64;
    PoseErrorReport {
        mean_rotation_deg: rotation_deg.iter().sum::<f64>() / n,
        mean_translation_pct: translation_pct.iter().sum::<f64>() / n,
        rotation_deg,
        translation_pct,
    }
}

/// Voxel centers of a regular grid over `bbox` whose density exceeds
/// `sigma_min`, for an arbitrary density function.
pub fn density_grid_fn(
    sigma_at: impl Fn(&Vector3<f64>) -> f64 + Sync,
    bbox: &Aabb,
    resolution: usize,
    sigma_min: f64,
) -> Vec<Vector3<f64>> {
    assert!(resolution >= 2, "need at least 2 voxels per axis");
    let step: Vec<f64> = (0..3).map(|i| (bbox.max[i] - bbox.min[i]) / resolution as f64).collect();
    (0..resolution * resolution * resolution)
        .into_par_iter()
        .filter_map(|idx| {
            let (i, j, k) =
                (idx / (resolution * resolution), (idx / resolution) % resolution, idx % resolution);
            let p = Vector3::new(
                bbox.min[0] + (i as f64 + 0.5) * step[0],
                bbox.min[1] + (j as f64 + 0.5) * step[1],
                bbox.min[2] + (k as f64 + 0.5) * step[2],
            );
            (sigma_at(&p) >= sigma_min).then_some(p)
        })
        .collect()
}

/// Occupancy point cloud of a learned field: centers of voxels with
/// activated density at or above `sigma_min`. The direction input is fixed
/// to an arbitrary unit vector (density does not depend on it).
pub fn extract_density_grid(
    params: &FieldParams,
    bbox: &Aabb,
    resolution: usize,
    sigma_min: f64,
) -> Vec<Vector3<f64>> {
    assert!(resolution >= 2, "need at least 2 voxels per axis");
    let step: Vec<f64> = (0..3).map(|i| (bbox.max[i] - bbox.min[i]) / resolution as f64).collect();
    let centers: Vec<Vector3<f64>> = (0..resolution * resolution * resolution)
        .map(|idx| {
            let (i, j, k) =
                (idx / (resolution * resolution), (idx / resolution) % resolution, idx % resolution);
            Vector3::new(
                bbox.min[0] + (i as f64 + 0.5) * step[0],
                bbox.min[1] + (j as f64 + 0.5) * step[1],
                bbox.min[2] + (k as f64 + 0.5) * step[2],
            )
        })
        .collect();
    centers
        .par_chunks(4096)
        .flat_map_iter(|chunk| {
            let queries: Vec<Query> = chunk
                .iter()
                .map(|p| Query { p: [p[0], p[1], p[2]], d: [0.0, 0.0, 1.0], t_enc: None })
                .collect();
            let out = batch_forward(params, &queries).expect("finite params");
            chunk
                .iter()
                .zip(out)
                .filter_map(|(p, o)| (o.sigma >= sigma_min).then_some(*p))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Symmetric mean nearest-neighbor distance between two point clouds, as a
/// percentage of the bounding-box diagonal.
pub fn hausdorff_pct(a: &[Vector3<f64>], b: &[Vector3<f64>], bbox: &Aabb) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "clouds must be nonempty");
    let mean_nn = |from: &[Vector3<f64>], to: &[Vector3<f64>]| -> f64 {
        from.par_iter()
            .map(|p| {
                to.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min).sqrt()
            })
            .sum::<f64>()
            / from.len() as f64
    };
    let d = 0.5 * (mean_nn(a, b) + mean_nn(b, a));
    d / bbox.diagonal() * 100.0
}
