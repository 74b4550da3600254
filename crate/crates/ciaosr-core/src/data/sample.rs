//! Training pair synthesis: draw a continuous scale, crop a GT patch,
//! bicubic-degrade it to the fixed LR patch size, and sample query
//! coordinates with their ground-truth colors.

use serde::{Deserialize, Serialize};

use crate::coords::{make_coord_grid, Scale};
use crate::data::resize::bicubic_resize_with;
use crate::rng::SeedRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegradationConfig {
    /// Scale factors are drawn uniformly from [scale_low, scale_high].
    pub scale_low: f64,
    pub scale_high: f64,
    /// Side of the LR patch the model trains on.
    pub patch_lr: usize,
    /// Cubic kernel parameter.
    pub bicubic_a: f64,
    /// Stretch the kernel when downscaling.
    pub antialias: bool,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            scale_low: 1.0,
            scale_high: 4.0,
            patch_lr: 48,
            bicubic_a: crate::data::resize::BICUBIC_A,
            antialias: true,
        }
    }
}

/// One training example: an LR patch plus query coordinates (in the GT
/// patch's [−1,1] frame) and their ground-truth colors.
pub struct PatchSample {
    pub lr_patch: Tensor<f32>,
    pub query_coords: Vec<(f64, f64)>,
    /// Row-major `len(query_coords) × 3`.
    pub gt_rgb: Vec<f32>,
    pub scale: Scale,
}

pub fn sample_training_pair(
    hr: &Tensor<f32>,
    cfg: &DegradationConfig,
    rng: &mut SeedRng,
) -> PatchSample {
    assert!(cfg.scale_low >= 1.0, "scale_low must be >= 1");
    assert!(cfg.scale_high >= cfg.scale_low, "scale bounds out of order");
    assert!(cfg.patch_lr >= 8, "LR patch must be at least 8 px");
    let shape = hr.shape();
    assert_eq!(shape.len(), 3, "expected a [3×H×W] image");
    let (h, w) = (shape[1], shape[2]);
    let p = cfg.patch_lr;
    assert!(h >= p && w >= p, "image {h}×{w} is smaller than the {p}×{p} LR patch");

    // Draw a scale whose GT crop fits; after ten failed draws fall back to
    // the largest centered square crop.
    let mut drawn = None;
    for _ in 0..10 {
        let s = rng.uniform(cfg.scale_low, cfg.scale_high);
        let gt = (p as f64 * s).ceil() as usize;
        if gt <= h && gt <= w {
            drawn = Some(gt);
            break;
        }
    }
    let (gt_side, y0, x0) = match drawn {
        Some(gt) => (gt, rng.below(h - gt + 1), rng.below(w - gt + 1)),
        None => {
            let gt = h.min(w);
            (gt, (h - gt) / 2, (w - gt) / 2)
        }
    };

    let mut crop = vec![0.0f32; 3 * gt_side * gt_side];
    for c in 0..3 {
        for y in 0..gt_side {
            for x in 0..gt_side {
                crop[(c * gt_side + y) * gt_side + x] = hr.at3(c, y0 + y, x0 + x);
            }
        }
    }
    let gt_patch = Tensor::new(vec![3, gt_side, gt_side], crop);
    let lr_patch = bicubic_resize_with(&gt_patch, p, p, cfg.bicubic_a, cfg.antialias);

    // patch_lr² query pixels drawn without replacement from the GT patch.
    let m = p * p;
    let indices = rng.sample_indices(gt_side * gt_side, m);
    let grid = make_coord_grid(gt_side, gt_side);
    let mut query_coords = Vec::with_capacity(m);
    let mut gt_rgb = Vec::with_capacity(3 * m);
    for idx in indices {
        let (qy, qx) = (idx / gt_side, idx % gt_side);
        query_coords.push(grid.coord(qy, qx));
        for c in 0..3 {
            gt_rgb.push(gt_patch.at3(c, qy, qx));
        }
    }

    let s_eff = gt_side as f64 / p as f64;
    PatchSample { lr_patch, query_coords, gt_rgb, scale: Scale { s_h: s_eff, s_w: s_eff } }
}
