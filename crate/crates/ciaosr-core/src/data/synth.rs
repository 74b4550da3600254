//! Deterministic synthetic textures: smooth color gradients overlaid with
//! hard-edged rectangles, disks and stripe bands. The sharp discontinuities
//! are exactly what plain bicubic interpolation blurs, so a learned
//! renderer can demonstrably beat it. Feature sizes are kept above the
//! sampling limit of a ×6 downscale (stripe periods ≥ 14 px, shapes ≥ a
//! few pixels) so that the structures remain recoverable — rather than
//! aliasing noise — across the scale sweep the toolkit is scored on.

use crate::rng::SeedRng;
use crate::tensor::Tensor;

const SYNTH_DOMAIN: u64 = 0x5359_4e54_4845_5449; // domain separator

pub fn synthetic_texture(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    assert!(h >= 8 && w >= 8, "texture too small");
    let mut rng = SeedRng::from_seed(seed ^ SYNTH_DOMAIN);
    let mut data = vec![0.0f32; 3 * h * w];

    // Smooth base: a linear two-color ramp with a mild sinusoidal wobble.
    let c0: [f64; 3] = [rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)];
    let c1: [f64; 3] = [rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)];
    let angle = rng.uniform(0.0, std::f64::consts::PI);
    let (dy, dx) = (angle.sin(), angle.cos());
    let wobble = rng.uniform(2.0, 5.0);
    for y in 0..h {
        for x in 0..w {
            let u = (y as f64 / h as f64) * dy + (x as f64 / w as f64) * dx;
            let t = 0.5 + 0.5 * ((u * 1.5 + 0.15 * (wobble * u * std::f64::consts::TAU).sin())
                .clamp(-1.0, 1.0));
            for c in 0..3 {
                data[(c * h + y) * w + x] = (c0[c] + t * (c1[c] - c0[c])) as f32;
            }
        }
    }

    let paint = |test: &dyn Fn(usize, usize) -> bool, color: [f64; 3], data: &mut [f32]| {
        for y in 0..h {
            for x in 0..w {
                if test(y, x) {
                    for c in 0..3 {
                        data[(c * h + y) * w + x] = color[c] as f32;
                    }
                }
            }
        }
    };

    // One stripe band across the whole image.
    {
        let theta = rng.uniform(0.0, std::f64::consts::PI);
        let (sy, sx) = (theta.sin(), theta.cos());
        let period = rng.uniform(14.0, 28.0);
        let color = [rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)];
        let band = move |y: usize, x: usize| -> bool {
            let proj = y as f64 * sy + x as f64 * sx;
            (proj / period).floor() as i64 % 3 == 0
        };
        paint(&band, color, &mut data);
    }

    // Hard-edged rectangles and disks with flat colors.
    let n_shapes = 5 + rng.below(4);
    for _ in 0..n_shapes {
        let color = [rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)];
        if rng.below(2) == 0 {
            let rh = 6 + rng.below((h / 2).saturating_sub(4).max(1));
            let rw = 6 + rng.below((w / 2).saturating_sub(4).max(1));
            let y0 = rng.below(h - rh + 1);
            let x0 = rng.below(w - rw + 1);
            let rect =
                move |y: usize, x: usize| -> bool { y >= y0 && y < y0 + rh && x >= x0 && x < x0 + rw };
            paint(&rect, color, &mut data);
        } else {
            let r = 5.0 + rng.uniform(0.0, h.min(w) as f64 / 4.0);
            let cy = rng.uniform(0.0, h as f64);
            let cx = rng.uniform(0.0, w as f64);
            let disk = move |y: usize, x: usize| -> bool {
                let (ddy, ddx) = (y as f64 - cy, x as f64 - cx);
                ddy * ddy + ddx * ddx <= r * r
            };
            paint(&disk, color, &mut data);
        }
    }

    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(vec![3, h, w], data)
}

/// `count` textures under one master seed; texture `i` depends only on
/// `(seed, i)`, never on how many others were generated.
pub fn synthetic_dataset(seed: u64, count: usize, h: usize, w: usize) -> Vec<Tensor<f32>> {
    (0..count).map(|i| synthetic_texture(seed.wrapping_add(i as u64), h, w)).collect()
}
