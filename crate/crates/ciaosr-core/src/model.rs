//! The complete super-resolution model: encoder, optional non-local
//! feature block, and one of the rendering heads, plus whole-image
//! inference with chunked queries and multi-step rendering chains.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::local::{
    render_attention, render_liif, render_mlp_weights, AttentionHead, HeadConfig, LiifHead,
    MlpWeightHead, QueryBatch, RenderOut,
};
use crate::attention::nonlocal::{nonlocal_features, tiled_nonlocal, NonLocalBlock, NonLocalConfig};
use crate::coords::{make_coord_grid, scale_vector};
use crate::encoder::{Encoder, EncoderConfig};
use crate::nn::{NetBuilder, ParamSet, ParamVars};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Model variants: the full attention renderer, the same renderer without
/// the non-local branch, the MLP-weight ensemble ablation, and the
/// area-weight baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoNonlocal,
    MlpWeights,
    Liif,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoNonlocal, Variant::MlpWeights, Variant::Liif];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoNonlocal => "no_nonlocal",
            Variant::MlpWeights => "mlp_weights",
            Variant::Liif => "liif",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Variant::Full),
            "no_nonlocal" => Ok(Variant::NoNonlocal),
            "mlp_weights" => Ok(Variant::MlpWeights),
            "liif" => Ok(Variant::Liif),
            other => Err(format!(
                "unknown variant `{other}` (expected full, no_nonlocal, mlp_weights or liif)"
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub nonlocal: NonLocalConfig,
    pub head: HeadConfig,
    pub variant: Variant,
    /// Tile side used when an input exceeds the non-local attention cap.
    pub tile: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            nonlocal: NonLocalConfig::default(),
            head: HeadConfig::default(),
            variant: Variant::Full,
            tile: 90,
        }
    }
}

impl ModelConfig {
    /// Minutes-scale preset: same architecture, narrower layers.
    pub fn desk() -> Self {
        ModelConfig {
            encoder: EncoderConfig { n_resblocks: 3, n_feats: 16, in_channels: 3 },
            nonlocal: NonLocalConfig {
                c_g: 16,
                scale_set: vec![2, 3, 4],
                cap_hw: 96 * 96,
                scale_logits: false,
            },
            head: HeadConfig {
                local_size: 2,
                d_v: 64,
                hidden_q: vec![64; 4],
                hidden_k: vec![64],
                hidden_v: vec![64],
                hidden_w: vec![64],
                scale_logits: false,
                query_chunk: 30_000,
            },
            variant: Variant::Full,
            tile: 90,
        }
    }

    /// Per-row feature width after 3×3 unfolding.
    pub fn feat_dim(&self) -> usize {
        9 * self.encoder.n_feats
    }
}

/// The variant-specific rendering head.
pub enum HeadNets {
    Attention(AttentionHead),
    MlpWeight(MlpWeightHead),
    Liif(LiifHead),
}

pub struct SrModel<S: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamSet<S>,
    pub encoder: Encoder,
    pub nonlocal: Option<NonLocalBlock>,
    pub head: HeadNets,
}

impl<S: Scalar> SrModel<S> {
    /// Initialization is keyed by (seed, parameter name), so networks shared
    /// between variants start from identical weights under the same seed.
    pub fn build(cfg: ModelConfig, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut b = NetBuilder::new(&mut params, seed);
        let encoder = Encoder::build(&mut b, &cfg.encoder);
        let feat_dim = cfg.feat_dim();
        let (nonlocal, head) = match cfg.variant {
            Variant::Full | Variant::NoNonlocal => (
                Some(NonLocalBlock::build(&mut b, &cfg.nonlocal, cfg.encoder.n_feats)),
                HeadNets::Attention(AttentionHead::build(&mut b, &cfg.head, feat_dim, cfg.nonlocal.c_g)),
            ),
            Variant::MlpWeights => (
                Some(NonLocalBlock::build(&mut b, &cfg.nonlocal, cfg.encoder.n_feats)),
                HeadNets::MlpWeight(MlpWeightHead::build(&mut b, &cfg.head, feat_dim, cfg.nonlocal.c_g)),
            ),
            Variant::Liif => {
                (None, HeadNets::Liif(LiifHead::build(&mut b, &cfg.head, feat_dim)))
            }
        };
        SrModel { cfg, params, encoder, nonlocal, head }
    }

    /// Encoder features as unfolded rows, plus the non-local rows the value
    /// network consumes (zeros for the no_nonlocal variant, absent for the
    /// baseline).
    fn feature_rows(&self, tape: &mut Tape<S>, pv: &ParamVars, lr: Var) -> (Var, Option<Var>) {
        let feat = self.encoder.forward(tape, pv, lr);
        let shape = tape.shape(feat).to_vec();
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let unfolded = tape.unfold(feat, 3);
        let feat_rows = tape.nchw_to_rows(unfolded);
        let g_rows = match self.cfg.variant {
            Variant::Full | Variant::MlpWeights => {
                let block = self.nonlocal.as_ref().expect("non-local block present");
                let g = if h * w <= block.cfg.cap_hw {
                    nonlocal_features(tape, pv, block, feat)
                } else {
                    tiled_nonlocal(tape, pv, block, feat, self.cfg.tile)
                };
                Some(tape.nchw_to_rows(g))
            }
            Variant::NoNonlocal => {
                let zeros = Tensor::zeros(&[n * h * w, self.cfg.nonlocal.c_g]);
                Some(tape.leaf(zeros, false))
            }
            Variant::Liif => None,
        };
        (feat_rows, g_rows)
    }

    /// One differentiable forward pass: N LR patches in, RGB rows for the
    /// requested query batch out. Used directly by the trainer.
    pub fn forward_rows(
        &self,
        tape: &mut Tape<S>,
        pv: &ParamVars,
        lr: Var,
        batch: &QueryBatch,
    ) -> RenderOut {
        let shape = tape.shape(lr).to_vec();
        assert_eq!(shape.len(), 4, "expected a batched N×C×H×W input");
        assert_eq!(shape[0], batch.scales.len(), "one scale per input sample");
        let (lr_h, lr_w) = (shape[2], shape[3]);
        let (feat_rows, g_rows) = self.feature_rows(tape, pv, lr);
        self.render_rows(tape, pv, feat_rows, g_rows, lr_h, lr_w, batch)
    }

    fn render_rows(
        &self,
        tape: &mut Tape<S>,
        pv: &ParamVars,
        feat_rows: Var,
        g_rows: Option<Var>,
        lr_h: usize,
        lr_w: usize,
        batch: &QueryBatch,
    ) -> RenderOut {
        match &self.head {
            HeadNets::Attention(h) => {
                let g = g_rows.expect("attention head needs non-local rows");
                render_attention(tape, pv, h, feat_rows, g, lr_h, lr_w, batch)
            }
            HeadNets::MlpWeight(h) => {
                let g = g_rows.expect("mlp-weight head needs non-local rows");
                render_mlp_weights(tape, pv, h, feat_rows, g, lr_h, lr_w, batch)
            }
            HeadNets::Liif(h) => render_liif(tape, pv, h, feat_rows, lr_h, lr_w, batch),
        }
    }

    /// Forward-only feature extraction for whole-image inference: the
    /// encoder and non-local branch run once and their outputs are frozen,
    /// so query chunks can each use a fresh, small tape.
    pub fn freeze_features(&self, lr: &Tensor<S>) -> FrozenFeatures<S> {
        let lr4 = as_batched(lr);
        let (n, h, w) = (lr4.shape()[0], lr4.shape()[2], lr4.shape()[3]);
        let mut tape = Tape::new();
        let pv = ParamVars::leaf_all(&self.params, &mut tape, false);
        let x = tape.leaf(lr4, false);
        let (feat_rows, g_rows) = self.feature_rows(&mut tape, &pv, x);
        FrozenFeatures {
            feat_rows: tape.value(feat_rows).clone(),
            g_rows: g_rows.map(|g| tape.value(g).clone()),
            n,
            lr_h: h,
            lr_w: w,
        }
    }

    /// Render a single image (`[3×H×W]` or `[1×3×H×W]`) to exactly
    /// `out_h × out_w`, chunking queries to bound memory.
    pub fn render_image(&self, lr: &Tensor<S>, out_h: usize, out_w: usize) -> Tensor<S> {
        assert!(out_h >= 1 && out_w >= 1, "target size must be positive");
        let frozen = self.freeze_features(lr);
        assert_eq!(frozen.n, 1, "render_image takes a single image");
        let scale = [scale_vector(frozen.lr_h, frozen.lr_w, out_h, out_w)];

        let grid = make_coord_grid(out_h, out_w);
        let mut coords = Vec::with_capacity(out_h * out_w);
        for i in 0..out_h {
            for j in 0..out_w {
                coords.push(grid.coord(i, j));
            }
        }

        // Chunks are rendered on fresh tapes and reassembled in order, so
        // the result is bit-identical whatever the chunk size or the number
        // of worker threads.
        let chunk = self.cfg.head.query_chunk.max(1);
        let parts: Vec<Vec<S>> = coords
            .par_chunks(chunk)
            .map(|part| {
                let mut tape = Tape::new();
                let pv = ParamVars::leaf_all(&self.params, &mut tape, false);
                let feat_rows = tape.leaf(frozen.feat_rows.clone(), false);
                let g_rows = frozen.g_rows.as_ref().map(|g| tape.leaf(g.clone(), false));
                let batch = QueryBatch { coords: part, per_sample: part.len(), scales: &scale };
                let out = self.render_rows(
                    &mut tape,
                    &pv,
                    feat_rows,
                    g_rows,
                    frozen.lr_h,
                    frozen.lr_w,
                    &batch,
                );
                tape.value(out.rgb).data().to_vec()
            })
            .collect();
        let mut rgb_rows: Vec<S> = Vec::with_capacity(out_h * out_w * 3);
        for p in parts {
            rgb_rows.extend_from_slice(&p);
        }

        // Rows are (y·W+x) × 3; image layout is 3 × H × W.
        let mut data = vec![S::zero(); 3 * out_h * out_w];
        for q in 0..out_h * out_w {
            for c in 0..3 {
                data[c * out_h * out_w + q] = rgb_rows[q * 3 + c];
            }
        }
        Tensor::new(vec![3, out_h, out_w], data)
    }

    /// Multi-step rendering: apply each factor in turn, re-encoding the
    /// previous output. Intermediate sizes round up; the final step is
    /// forced to the exact target so chains always land on it. Intermediate
    /// images are clamped to [0,1] (the encoder's input domain); the final
    /// output is returned raw like `render_image`'s.
    pub fn chain_render(
        &self,
        lr: &Tensor<S>,
        factors: &[f64],
        out_h: usize,
        out_w: usize,
    ) -> Tensor<S> {
        assert!(!factors.is_empty(), "empty scale chain");
        assert!(factors.iter().all(|&s| s > 1.0), "chain factors must be > 1");
        let mut current = lr.clone();
        let (mut h, mut w) = (shape3(lr).1, shape3(lr).2);
        for (i, &s) in factors.iter().enumerate() {
            let last = i + 1 == factors.len();
            let (th, tw) = if last {
                (out_h, out_w)
            } else {
                ((h as f64 * s).ceil() as usize, (w as f64 * s).ceil() as usize)
            };
            current = self.render_image(&current, th, tw);
            if !last {
                current = current.map(|v| {
                    let one = S::of(1.0);
                    if v < S::zero() {
                        S::zero()
                    } else if v > one {
                        one
                    } else {
                        v
                    }
                });
            }
            h = th;
            w = tw;
        }
        current
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.total_scalars()
    }
}

/// Frozen forward features for chunked inference.
pub struct FrozenFeatures<S> {
    pub feat_rows: Tensor<S>,
    pub g_rows: Option<Tensor<S>>,
    pub n: usize,
    pub lr_h: usize,
    pub lr_w: usize,
}

fn as_batched<S: Scalar>(img: &Tensor<S>) -> Tensor<S> {
    match img.shape() {
        [_, _, _, _] => img.clone(),
        [c, h, w] => img.clone().reshaped(vec![1, *c, *h, *w]),
        other => panic!("expected an image tensor, got shape {other:?}"),
    }
}

fn shape3<S: Scalar>(img: &Tensor<S>) -> (usize, usize, usize) {
    match img.shape() {
        [1, c, h, w] => (*c, *h, *w),
        [c, h, w] => (*c, *h, *w),
        other => panic!("expected an image tensor, got shape {other:?}"),
    }
}

/// Round a real scale to the output pixel count: round(s · n), at least 1.
pub fn scaled_size(n: usize, s: f64) -> usize {
    ((n as f64 * s).round() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;

    fn tiny_cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig { n_resblocks: 1, n_feats: 4, in_channels: 3 },
            nonlocal: NonLocalConfig {
                c_g: 3,
                scale_set: vec![2],
                cap_hw: 96 * 96,
                scale_logits: false,
            },
            head: HeadConfig {
                local_size: 2,
                d_v: 6,
                hidden_q: vec![8],
                hidden_k: vec![8],
                hidden_v: vec![8],
                hidden_w: vec![8],
                scale_logits: false,
                query_chunk: 30_000,
            },
            variant,
            tile: 90,
        }
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
        let mut rng = SeedRng::from_seed(seed);
        Tensor::new(
            vec![3, h, w],
            (0..3 * h * w).map(|_| rng.uniform(0.0, 1.0) as f32).collect(),
        )
    }

    #[test]
    fn output_shape_follows_rounded_target_sizes() {
        let model = SrModel::<f32>::build(tiny_cfg(Variant::Full), 3);
        let img = random_image(1, 7, 9);
        for s in [1.0, 1.5, 2.7] {
            let (oh, ow) = (scaled_size(7, s), scaled_size(9, s));
            let out = model.render_image(&img, oh, ow);
            assert_eq!(out.shape(), &[3, oh, ow], "scale {s}");
            assert!(out.is_finite());
        }
        // Identity-scale render keeps the input shape.
        let out = model.render_image(&img, 7, 9);
        assert_eq!(out.shape(), img.shape());
    }

    #[test]
    fn all_variants_render_finite_images() {
        for variant in Variant::ALL {
            let model = SrModel::<f32>::build(tiny_cfg(variant), 3);
            let img = random_image(2, 6, 6);
            let out = model.render_image(&img, 9, 9);
            assert_eq!(out.shape(), &[3, 9, 9], "{variant}");
            assert!(out.is_finite(), "{variant}");
        }
    }

    #[test]
    fn full_and_no_nonlocal_register_identical_parameters() {
        let full = SrModel::<f32>::build(tiny_cfg(Variant::Full), 3);
        let ablated = SrModel::<f32>::build(tiny_cfg(Variant::NoNonlocal), 3);
        assert_eq!(full.params.names(), ablated.params.names());
        for (a, b) in full.params.tensors().iter().zip(ablated.params.tensors()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn zeroed_nonlocal_projections_match_no_nonlocal_bitwise() {
        let mut full = SrModel::<f32>::build(tiny_cfg(Variant::Full), 3);
        let ablated = SrModel::<f32>::build(tiny_cfg(Variant::NoNonlocal), 3);
        for name in ["nonlocal.q", "nonlocal.k", "nonlocal.v"] {
            for suffix in [".w", ".b"] {
                let id = full.params.id_of(&format!("{name}{suffix}")).unwrap();
                let t = full.params.get_mut(id);
                let zeros = Tensor::zeros(t.shape());
                *t = zeros;
            }
        }
        let img = random_image(4, 6, 8);
        let a = full.render_image(&img, 13, 17);
        let b = ablated.render_image(&img, 13, 17);
        let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b, "renders are not bit-identical");
    }

    #[test]
    fn query_chunking_is_bit_exact() {
        let mut cfg = tiny_cfg(Variant::Full);
        let img = random_image(5, 6, 6);
        cfg.head.query_chunk = 1 << 20;
        let whole = SrModel::<f32>::build(cfg.clone(), 3).render_image(&img, 15, 15);
        cfg.head.query_chunk = 7;
        let chunked = SrModel::<f32>::build(cfg, 3).render_image(&img, 15, 15);
        assert_eq!(whole.data(), chunked.data());
    }

    #[test]
    fn single_step_chain_matches_direct_render_bitwise() {
        let model = SrModel::<f32>::build(tiny_cfg(Variant::Full), 3);
        let img = random_image(6, 5, 7);
        let direct = model.render_image(&img, 10, 14);
        let chained = model.chain_render(&img, &[2.0], 10, 14);
        assert_eq!(direct.data(), chained.data());
    }

    #[test]
    fn chains_land_exactly_on_the_target_size() {
        let model = SrModel::<f32>::build(tiny_cfg(Variant::Full), 3);
        let img = random_image(7, 5, 5);
        let target = scaled_size(5, 12.0);
        for chain in [vec![12.0], vec![2.0, 6.0], vec![2.0, 2.0, 3.0]] {
            let out = model.chain_render(&img, &chain, target, target);
            assert_eq!(out.shape(), &[3, target, target], "chain {chain:?}");
            assert!(out.is_finite());
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("resnet".parse::<Variant>().is_err());
    }
}
