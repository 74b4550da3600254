//! Scale-aware non-local attention: every LR position attends over
//! downsampled copies of the whole feature map, pooling cross-scale
//! self-similar structure into an auxiliary feature map G.

use serde::{Deserialize, Serialize};

use crate::nn::{Conv2dDef, NetBuilder, ParamVars};
use crate::tensor::{Scalar, Tape, Var};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NonLocalConfig {
    /// Channel count of the q/k/v projections and of G.
    pub c_g: usize,
    /// Downsample factors whose tokens are pooled (all ≥ 2; factors larger
    /// than the input are skipped at use time).
    pub scale_set: Vec<usize>,
    /// Maximum H·W a single attention call may see; larger inputs must go
    /// through [`tiled_nonlocal`].
    pub cap_hw: usize,
    /// Scale logits by 1/√C_g (off by default: raw dot products).
    pub scale_logits: bool,
}

impl Default for NonLocalConfig {
    fn default() -> Self {
        NonLocalConfig { c_g: 64, scale_set: vec![2, 3, 4], cap_hw: 96 * 96, scale_logits: false }
    }
}

/// 1×1-conv q/k/v projections shared by all scales.
pub struct NonLocalBlock {
    pub cfg: NonLocalConfig,
    pub q: Conv2dDef,
    pub k: Conv2dDef,
    pub v: Conv2dDef,
}

impl NonLocalBlock {
    pub fn build<S: Scalar>(b: &mut NetBuilder<S>, cfg: &NonLocalConfig, in_ch: usize) -> Self {
        assert!(cfg.c_g >= 1);
        assert!(!cfg.scale_set.is_empty(), "non-local scale set must not be empty");
        assert!(cfg.scale_set.iter().all(|&s| s >= 2), "non-local scales must be >= 2");
        NonLocalBlock {
            cfg: cfg.clone(),
            q: b.conv("nonlocal.q", in_ch, cfg.c_g, 1, 0),
            k: b.conv("nonlocal.k", in_ch, cfg.c_g, 1, 0),
            v: b.conv("nonlocal.v", in_ch, cfg.c_g, 1, 0),
        }
    }
}

/// G = softmax(Q_gᵀ·K_g)·V_g over the token union of all usable scales.
/// Keys are projections of the downsampled map; values are the projected
/// full-resolution map downsampled by the same factor, so key and value
/// token sets stay aligned.
pub fn nonlocal_features<S: Scalar>(
    tape: &mut Tape<S>,
    pv: &ParamVars,
    block: &NonLocalBlock,
    feat: Var,
) -> Var {
    let shape = tape.shape(feat).to_vec();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    assert!(
        h * w <= block.cfg.cap_hw,
        "non-local input {h}×{w} exceeds the {} px cap; tile it",
        block.cfg.cap_hw
    );

    let mut scales: Vec<usize> =
        block.cfg.scale_set.iter().copied().filter(|&s| s <= h.min(w)).collect();
    if scales.len() < block.cfg.scale_set.len() {
        eprintln!(
            "warning: non-local scales {:?} skipped for a {h}×{w} input",
            block.cfg.scale_set.iter().filter(|&&s| s > h.min(w)).collect::<Vec<_>>()
        );
    }
    if scales.is_empty() {
        scales.push(1); // degenerate inputs: full-resolution tokens
    }

    let c_g = block.cfg.c_g;
    let q_map = block.q.apply(tape, pv, feat);
    let q_rows = tape.nchw_to_rows(q_map);
    let v_full = block.v.apply(tape, pv, feat);

    // Token rows per scale, each [(n·hs·ws) × c_g].
    let mut k_parts = Vec::new();
    let mut v_parts = Vec::new();
    let mut token_counts = Vec::new();
    for &s in &scales {
        let (down, vd) = if s == 1 {
            (feat, v_full)
        } else {
            (tape.avg_downsample(feat, s), tape.avg_downsample(v_full, s))
        };
        let k_map = block.k.apply(tape, pv, down);
        k_parts.push(tape.nchw_to_rows(k_map));
        v_parts.push(tape.nchw_to_rows(vd));
        token_counts.push((h / s.max(1)) * (w / s.max(1)));
    }

    let hw = h * w;
    let mut g_samples = Vec::with_capacity(n);
    for sample in 0..n {
        let q_n = tape.slice_rows(q_rows, sample * hw, hw);
        let mut k_n = Vec::new();
        let mut v_n = Vec::new();
        for ((kp, vp), &t) in k_parts.iter().zip(&v_parts).zip(&token_counts) {
            k_n.push(tape.slice_rows(*kp, sample * t, t));
            v_n.push(tape.slice_rows(*vp, sample * t, t));
        }
        let k_all = tape.concat_rows(&k_n);
        let v_all = tape.concat_rows(&v_n);
        let k_t = tape.transpose2(k_all);
        let mut logits = tape.matmul(q_n, k_t);
        if block.cfg.scale_logits {
            logits = tape.mul_scalar(logits, 1.0 / (c_g as f64).sqrt());
        }
        let attn = tape.softmax(logits, 1);
        g_samples.push(tape.matmul(attn, v_all));
    }
    let g_rows = if g_samples.len() == 1 { g_samples[0] } else { tape.concat_rows(&g_samples) };
    tape.rows_to_nchw(g_rows, n, c_g, h, w)
}

/// Blocked variant for inputs above the attention cap: each tile attends
/// only over its own tokens. Tiles abut without overlap; a trailing
/// remainder thinner than the largest scale factor is merged into the
/// previous tile so every tile can still be downsampled.
pub fn tiled_nonlocal<S: Scalar>(
    tape: &mut Tape<S>,
    pv: &ParamVars,
    block: &NonLocalBlock,
    feat: Var,
    tile: usize,
) -> Var {
    let max_s = block.cfg.scale_set.iter().copied().max().unwrap_or(1);
    assert!(tile >= max_s, "tile {tile} is smaller than the largest non-local scale {max_s}");
    assert!(
        (tile + max_s - 1) * (tile + max_s - 1) <= block.cfg.cap_hw,
        "tile {tile} (with merge slack) exceeds the non-local cap"
    );
    let shape = tape.shape(feat).to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h <= tile && w <= tile {
        return nonlocal_features(tape, pv, block, feat);
    }

    let ranges = |len: usize| -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        while start < len {
            let mut end = (start + tile).min(len);
            if len - end > 0 && len - end < max_s {
                end = len; // absorb a remainder too thin to downsample
            }
            out.push((start, end - start));
            start = end;
        }
        out
    };

    let feat_rows = tape.nchw_to_rows(feat);
    let mut block_rows = Vec::new();
    // For every output pixel (sample-major, row-major), where its G row
    // lands in the concatenation of per-tile outputs.
    let mut dest = vec![0usize; n * h * w];
    let mut written = 0usize;
    for (y0, bh) in ranges(h) {
        for (x0, bw) in ranges(w) {
            let mut idx = Vec::with_capacity(n * bh * bw);
            for sample in 0..n {
                for y in y0..y0 + bh {
                    for x in x0..x0 + bw {
                        idx.push((sample * h + y) * w + x);
                    }
                }
            }
            for (pos, &global) in idx.iter().enumerate() {
                dest[global] = written + pos;
            }
            written += idx.len();
            let gathered = tape.gather_rows(feat_rows, &idx);
            let tile_map = tape.rows_to_nchw(gathered, n, c, bh, bw);
            let g_tile = nonlocal_features(tape, pv, block, tile_map);
            block_rows.push(tape.nchw_to_rows(g_tile));
        }
    }
    let stacked =
        if block_rows.len() == 1 { block_rows[0] } else { tape.concat_rows(&block_rows) };
    let ordered = tape.gather_rows(stacked, &dest);
    tape.rows_to_nchw(ordered, n, block.cfg.c_g, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamSet, ParamVars};
    use crate::rng::SeedRng;
    use crate::tensor::Tensor;

    fn tiny_block(scale_set: Vec<usize>, c: usize, c_g: usize) -> (ParamSet<f32>, NonLocalBlock) {
        let cfg = NonLocalConfig { c_g, scale_set, cap_hw: 96 * 96, scale_logits: false };
        let mut params = ParamSet::new();
        let block = NonLocalBlock::build(&mut NetBuilder::new(&mut params, 11), &cfg, c);
        (params, block)
    }

    fn random_map(rng: &mut SeedRng, shape: &[usize]) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect())
    }

    fn run_g(params: &ParamSet<f32>, block: &NonLocalBlock, feat: Tensor<f32>) -> Tensor<f32> {
        let mut tape = Tape::new();
        let pv = ParamVars::leaf_all(params, &mut tape, false);
        let f = tape.leaf(feat, false);
        let g = nonlocal_features(&mut tape, &pv, block, f);
        tape.value(g).clone()
    }

    #[test]
    fn constant_input_gives_constant_projected_output() {
        let (params, block) = tiny_block(vec![2], 3, 4);
        let feat = Tensor::full(&[1, 3, 6, 6], 0.4f32);
        let g = run_g(&params, &block, feat);
        assert_eq!(g.shape(), &[1, 4, 6, 6]);
        // Every pixel of G must equal varphi_v(constant): uniform attention
        // over identical tokens.
        for ch in 0..4 {
            let base = g.at4(0, ch, 0, 0);
            for y in 0..6 {
                for x in 0..6 {
                    assert!((g.at4(0, ch, y, x) - base).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn single_token_input_broadcasts_that_token() {
        let (params, block) = tiny_block(vec![2], 3, 4);
        let mut rng = SeedRng::from_seed(2);
        let feat = random_map(&mut rng, &[1, 3, 2, 2]);
        let g = run_g(&params, &block, feat);
        // One 1×1 key/value token: softmax weight is exactly 1, so every G
        // pixel equals the single value token.
        for ch in 0..4 {
            let v = g.at4(0, ch, 0, 0);
            for y in 0..2 {
                for x in 0..2 {
                    assert!((g.at4(0, ch, y, x) - v).abs() < 1e-6);
                }
            }
        }
    }

    /// Direct per-pixel double-loop attention in f64, written from the
    /// definition (project, pool, dot, softmax, weighted sum).
    fn oracle_g(params: &ParamSet<f32>, block: &NonLocalBlock, feat: &Tensor<f32>) -> Vec<f64> {
        let (c, h, w) = (feat.shape()[1], feat.shape()[2], feat.shape()[3]);
        let c_g = block.cfg.c_g;
        let wq = params.get(block.q.w).data();
        let bq = params.get(block.q.b).data();
        let wk = params.get(block.k.w).data();
        let bk = params.get(block.k.b).data();
        let wv = params.get(block.v.w).data();
        let bv = params.get(block.v.b).data();
        let proj = |wm: &[f32], bm: &[f32], px: &[f64]| -> Vec<f64> {
            (0..c_g)
                .map(|o| {
                    bm[o] as f64
                        + (0..c).map(|i| wm[o * c + i] as f64 * px[i]).sum::<f64>()
                })
                .collect()
        };
        let pixel = |y: usize, x: usize| -> Vec<f64> {
            (0..c).map(|ch| feat.at4(0, ch, y, x) as f64).collect()
        };
        let pool = |s: usize, by: usize, bx: usize| -> Vec<f64> {
            let mut acc = vec![0.0; c];
            for dy in 0..s {
                for dx in 0..s {
                    for (a, v) in acc.iter_mut().zip(pixel(by * s + dy, bx * s + dx)) {
                        *a += v;
                    }
                }
            }
            acc.iter().map(|v| v / (s * s) as f64).collect()
        };

        // Token list: for each scale, keys from pooled-then-projected
        // feature, values from projected-then-pooled feature.
        let mut keys = Vec::new();
        let mut vals = Vec::new();
        for &s in &block.cfg.scale_set {
            if s > h.min(w) {
                continue;
            }
            for by in 0..h / s {
                for bx in 0..w / s {
                    keys.push(proj(wk, bk, &pool(s, by, bx)));
                    // value: project each pixel then average the block
                    let mut acc = vec![0.0; c_g];
                    for dy in 0..s {
                        for dx in 0..s {
                            for (a, v) in
                                acc.iter_mut().zip(proj(wv, bv, &pixel(by * s + dy, bx * s + dx)))
                            {
                                *a += v;
                            }
                        }
                    }
                    vals.push(acc.iter().map(|v| v / (s * s) as f64).collect::<Vec<f64>>());
                }
            }
        }

        let mut out = vec![0.0; c_g * h * w];
        for y in 0..h {
            for x in 0..w {
                let q = proj(wq, bq, &pixel(y, x));
                let logits: Vec<f64> =
                    keys.iter().map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum()).collect();
                let hi = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - hi).exp()).collect();
                let total: f64 = exps.iter().sum();
                let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();
                assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                for ch in 0..c_g {
                    let g: f64 = weights.iter().zip(&vals).map(|(wt, v)| wt * v[ch]).sum();
                    out[(ch * h + y) * w + x] = g;
                }
            }
        }
        out
    }

    #[test]
    fn matrix_attention_matches_double_loop_oracle() {
        let (params, block) = tiny_block(vec![2, 4], 3, 5);
        let mut rng = SeedRng::from_seed(33);
        let feat = random_map(&mut rng, &[1, 3, 8, 8]);
        let g = run_g(&params, &block, feat.clone());
        let oracle = oracle_g(&params, &block, &feat);
        for (got, want) in g.data().iter().zip(&oracle) {
            assert!((*got as f64 - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn scale_set_order_does_not_matter() {
        let mut rng = SeedRng::from_seed(4);
        let feat = random_map(&mut rng, &[1, 3, 8, 8]);
        let (params_a, block_a) = tiny_block(vec![2, 4], 3, 4);
        let (params_b, block_b) = tiny_block(vec![4, 2], 3, 4);
        let ga = run_g(&params_a, &block_a, feat.clone());
        let gb = run_g(&params_b, &block_b, feat);
        assert!(ga.max_abs_diff(&gb) < 1e-5);
    }

    #[test]
    fn oversized_scales_are_skipped_not_fatal() {
        let (params, block) = tiny_block(vec![2, 3, 4], 3, 4);
        let mut rng = SeedRng::from_seed(5);
        let feat = random_map(&mut rng, &[1, 3, 3, 3]); // only scale 2 and 3 fit
        let g = run_g(&params, &block, feat);
        assert_eq!(g.shape(), &[1, 4, 3, 3]);
        assert!(g.is_finite());
    }

    #[test]
    fn gradients_reach_all_three_projections() {
        let (params, block) = tiny_block(vec![2], 3, 4);
        let mut rng = SeedRng::from_seed(6);
        let mut tape = Tape::new();
        let pv = ParamVars::leaf_all(&params, &mut tape, true);
        let f = tape.leaf(random_map(&mut rng, &[1, 3, 6, 6]), false);
        let g = nonlocal_features(&mut tape, &pv, &block, f);
        let loss = tape.mean_all(g);
        let grads = tape.backward(loss);
        for (i, var) in pv.all().iter().enumerate() {
            let gr = grads.get(*var).expect("missing grad");
            assert!(
                gr.iter().any(|&v| v != 0.0),
                "projection `{}` got an identically zero gradient",
                params.names()[i]
            );
        }
    }

    #[test]
    fn batched_inputs_attend_per_sample() {
        let (params, block) = tiny_block(vec![2], 2, 3);
        let mut rng = SeedRng::from_seed(7);
        let a = random_map(&mut rng, &[1, 2, 4, 4]);
        let b = random_map(&mut rng, &[1, 2, 4, 4]);
        let mut joint = a.data().to_vec();
        joint.extend_from_slice(b.data());
        let batched = Tensor::new(vec![2, 2, 4, 4], joint);
        let g_joint = run_g(&params, &block, batched);
        let g_a = run_g(&params, &block, a);
        let g_b = run_g(&params, &block, b);
        let mut expect = g_a.data().to_vec();
        expect.extend_from_slice(g_b.data());
        assert_eq!(g_joint.data(), &expect[..]);
    }

    #[test]
    fn tiling_matches_per_block_recomputation() {
        let (params, block) = tiny_block(vec![2], 3, 4);
        let mut rng = SeedRng::from_seed(8);
        let feat = random_map(&mut rng, &[1, 3, 16, 16]);

        let mut tape = Tape::new();
        let pv = ParamVars::leaf_all(&params, &mut tape, false);
        let f = tape.leaf(feat.clone(), false);
        let g = tiled_nonlocal(&mut tape, &pv, &block, f, 8);
        let tiled = tape.value(g).clone();

        for (y0, x0) in [(0, 0), (0, 8), (8, 0), (8, 8)] {
            let mut sub = Vec::new();
            for ch in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        sub.push(feat.at4(0, ch, y0 + y, x0 + x));
                    }
                }
            }
            let g_block = run_g(&params, &block, Tensor::new(vec![1, 3, 8, 8], sub));
            for ch in 0..4 {
                for y in 0..8 {
                    for x in 0..8 {
                        let got = tiled.at4(0, ch, y0 + y, x0 + x);
                        let want = g_block.at4(0, ch, y, x);
                        assert!((got - want).abs() < 1e-6, "block ({y0},{x0}) ch {ch}");
                    }
                }
            }
        }
    }

    #[test]
    fn small_inputs_bypass_tiling() {
        let (params, block) = tiny_block(vec![2], 3, 4);
        let mut rng = SeedRng::from_seed(9);
        let feat = random_map(&mut rng, &[1, 3, 6, 6]);
        let direct = run_g(&params, &block, feat.clone());
        let mut tape = Tape::new();
        let pv = ParamVars::leaf_all(&params, &mut tape, false);
        let f = tape.leaf(feat, false);
        let g = tiled_nonlocal(&mut tape, &pv, &block, f, 8);
        assert_eq!(tape.value(g).data(), direct.data());
    }
}
