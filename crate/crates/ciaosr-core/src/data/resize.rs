//! Separable cubic-convolution resampling with the benchmark-standard
//! kernel (a = −0.75), antialiasing on downscale, renormalized weights and
//! replicated edges. All accumulation is in f64.

use crate::tensor::{Scalar, Tensor};

pub const BICUBIC_A: f64 = -0.75;

/// Cubic convolution kernel:
/// (a+2)|x|³ − (a+3)|x|² + 1 for |x| ≤ 1,
/// a|x|³ − 5a|x|² + 8a|x| − 4a for 1 < |x| < 2, else 0.
pub fn cubic_kernel(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// One axis of the resampling plan: for each output index, the first input
/// tap and its normalized weights. Edge taps are clamped onto the border
/// sample (replication) before normalization.
struct AxisPlan {
    starts: Vec<usize>,
    weights: Vec<Vec<f64>>,
}

fn axis_plan(n_in: usize, n_out: usize, a: f64, antialias: bool) -> AxisPlan {
    assert!(n_in >= 1, "resize: empty input axis");
    assert!(n_out >= 1, "resize: zero target size");
    let scale = n_out as f64 / n_in as f64;
    // When shrinking, stretch the kernel by the inverse scale so it spans
    // enough input samples to act as a low-pass filter.
    let kscale = if antialias && scale < 1.0 { scale } else { 1.0 };
    let support = 2.0 / kscale;

    let mut starts = Vec::with_capacity(n_out);
    let mut weights = Vec::with_capacity(n_out);
    for o in 0..n_out {
        let center = (o as f64 + 0.5) / scale - 0.5;
        let lo = (center - support).floor() as isize + 1;
        let hi = (center + support).floor() as isize;
        let first = lo.clamp(0, n_in as isize - 1) as usize;
        let last = hi.clamp(0, n_in as isize - 1) as usize;
        let mut w = vec![0.0; last - first + 1];
        let mut total = 0.0;
        for i in lo..=hi {
            let tap = cubic_kernel((center - i as f64) * kscale, a);
            total += tap;
            let clamped = i.clamp(0, n_in as isize - 1) as usize;
            w[clamped - first] += tap;
        }
        assert!(total > 0.0, "degenerate kernel footprint");
        for v in &mut w {
            *v /= total;
        }
        starts.push(first);
        weights.push(w);
    }
    AxisPlan { starts, weights }
}

/// Resize every channel of a `[C×H×W]` image to `[C×h_out×w_out]`.
pub fn bicubic_resize_with<S: Scalar>(
    img: &Tensor<S>,
    h_out: usize,
    w_out: usize,
    a: f64,
    antialias: bool,
) -> Tensor<S> {
    let shape = img.shape();
    assert_eq!(shape.len(), 3, "bicubic_resize expects [C×H×W]");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let rows = axis_plan(h, h_out, a, antialias);
    let cols = axis_plan(w, w_out, a, antialias);

    let src = img.data();
    // Vertical pass: [C×H×W] → [C×h_out×W].
    let mut mid = vec![0.0f64; c * h_out * w];
    for ch in 0..c {
        for y in 0..h_out {
            let ws = &rows.weights[y];
            let y0 = rows.starts[y];
            for x in 0..w {
                let mut acc = 0.0;
                for (dy, wt) in ws.iter().enumerate() {
                    acc += wt * src[(ch * h + y0 + dy) * w + x].as_f64();
                }
                mid[(ch * h_out + y) * w + x] = acc;
            }
        }
    }
    // Horizontal pass: [C×h_out×W] → [C×h_out×w_out].
    let mut out = vec![S::zero(); c * h_out * w_out];
    for ch in 0..c {
        for y in 0..h_out {
            for x in 0..w_out {
                let ws = &cols.weights[x];
                let x0 = cols.starts[x];
                let mut acc = 0.0;
                for (dx, wt) in ws.iter().enumerate() {
                    acc += wt * mid[(ch * h_out + y) * w + x0 + dx];
                }
                out[(ch * h_out + y) * w_out + x] = S::of(acc);
            }
        }
    }
    Tensor::new(vec![c, h_out, w_out], out)
}

/// Default kernel (a = −0.75) with antialiasing on downscale.
pub fn bicubic_resize<S: Scalar>(img: &Tensor<S>, h_out: usize, w_out: usize) -> Tensor<S> {
    bicubic_resize_with(img, h_out, w_out, BICUBIC_A, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;

    fn random_image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = SeedRng::from_seed(seed);
        Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.uniform(0.0, 1.0)).collect())
    }

    /// Direct per-output-pixel kernel application written from the
    /// definition: loop over the full 2-D tap footprint with replicate
    /// indexing and per-axis renormalization.
    fn oracle_resize(img: &Tensor<f64>, h_out: usize, w_out: usize, antialias: bool) -> Vec<f64> {
        let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        let a = BICUBIC_A;
        let axis = |n_in: usize, n_out: usize, o: usize| -> (Vec<isize>, Vec<f64>) {
            let scale = n_out as f64 / n_in as f64;
            let k = if antialias && scale < 1.0 { scale } else { 1.0 };
            let center = (o as f64 + 0.5) / scale - 0.5;
            let mut idx = Vec::new();
            let mut wts = Vec::new();
            let mut i = (center - 2.0 / k).floor() as isize + 1;
            while (i as f64) <= center + 2.0 / k {
                idx.push(i);
                wts.push(cubic_kernel((center - i as f64) * k, a));
                i += 1;
            }
            let total: f64 = wts.iter().sum();
            for v in &mut wts {
                *v /= total;
            }
            (idx, wts)
        };
        let mut out = vec![0.0; c * h_out * w_out];
        for ch in 0..c {
            for y in 0..h_out {
                let (yi, yw) = axis(h, h_out, y);
                for x in 0..w_out {
                    let (xi, xw) = axis(w, w_out, x);
                    let mut acc = 0.0;
                    for (iy, wy) in yi.iter().zip(&yw) {
                        let cy = (*iy).clamp(0, h as isize - 1) as usize;
                        for (ix, wx) in xi.iter().zip(&xw) {
                            let cx = (*ix).clamp(0, w as isize - 1) as usize;
                            acc += wy * wx * img.at3(ch, cy, cx);
                        }
                    }
                    out[(ch * h_out + y) * w_out + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn constant_images_are_preserved_at_any_size() {
        let img = Tensor::full(&[3, 9, 7], 0.437f64);
        for (h, w) in [(9, 7), (18, 14), (5, 3), (25, 4), (13, 19)] {
            let out = bicubic_resize(&img, h, w);
            for v in out.data() {
                assert!((v - 0.437).abs() < 1e-6, "{h}x{w}");
            }
        }
    }

    #[test]
    fn identity_size_is_identity() {
        let img = random_image(1, 8, 11);
        let out = bicubic_resize(&img, 8, 11);
        assert!(out.max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn ramp_downscale_matches_direct_kernel_sum() {
        // 8×8 linear ramp, ×2 downscale.
        let mut data = Vec::new();
        for _ in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    data.push((y as f64 + x as f64) / 14.0);
                }
            }
        }
        let img = Tensor::new(vec![3, 8, 8], data);
        let out = bicubic_resize(&img, 4, 4);
        let want = oracle_resize(&img, 4, 4, true);
        for (got, want) in out.data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn random_images_match_direct_kernel_sum_in_both_directions() {
        let mut rng = SeedRng::from_seed(9);
        for trial in 0..20 {
            let h = 6 + rng.below(9);
            let w = 6 + rng.below(9);
            let img = random_image(100 + trial, h, w);
            let s = rng.uniform(1.0, 4.0);
            let (uh, uw) = ((h as f64 * s).round() as usize, (w as f64 * s).round() as usize);
            let up = bicubic_resize(&img, uh, uw);
            let want_up = oracle_resize(&img, uh, uw, true);
            for (got, want) in up.data().iter().zip(&want_up) {
                assert!((got - want).abs() < 1e-5, "trial {trial} upscale");
            }
            let (dh, dw) =
                (((h as f64 / s).round() as usize).max(1), ((w as f64 / s).round() as usize).max(1));
            let down = bicubic_resize(&img, dh, dw);
            let want_down = oracle_resize(&img, dh, dw, true);
            for (got, want) in down.data().iter().zip(&want_down) {
                assert!((got - want).abs() < 1e-5, "trial {trial} downscale");
            }
        }
    }

    #[test]
    fn axis_weights_sum_to_one() {
        for (n_in, n_out) in [(48, 96), (48, 17), (7, 30), (30, 7), (48, 130), (5, 5)] {
            let plan = axis_plan(n_in, n_out, BICUBIC_A, true);
            for w in &plan.weights {
                let sum: f64 = w.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "{n_in}->{n_out}");
            }
        }
    }

    #[test]
    fn upscale_then_downscale_keeps_constants_exact() {
        let img = Tensor::full(&[3, 12, 12], 0.815f64);
        let up = bicubic_resize(&img, 31, 31);
        let back = bicubic_resize(&up, 12, 12);
        for v in back.data() {
            assert!((v - 0.815).abs() < 1e-6);
        }
    }

    #[test]
    fn kernel_matches_its_closed_form_at_landmarks() {
        assert!((cubic_kernel(0.0, BICUBIC_A) - 1.0).abs() < 1e-12);
        assert!(cubic_kernel(1.0, BICUBIC_A).abs() < 1e-12);
        assert!(cubic_kernel(2.0, BICUBIC_A).abs() < 1e-12);
        assert!(cubic_kernel(2.5, BICUBIC_A).abs() < 1e-12);
        // Interior point, evaluated against the polynomial written out.
        let x: f64 = 1.5;
        let a = BICUBIC_A;
        let want = a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a;
        assert!((cubic_kernel(1.5, a) - want).abs() < 1e-12);
    }
}
