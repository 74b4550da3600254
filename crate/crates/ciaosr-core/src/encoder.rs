//! Feature backbone: a small residual CNN that maps an RGB image to a
//! same-resolution latent feature map. No upsampling happens here — all
//! resolution change is the renderer's job.

use serde::{Deserialize, Serialize};

use crate::nn::{Conv2dDef, NetBuilder, ParamVars};
use crate::tensor::{Scalar, Tape, Var};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_resblocks: usize,
    pub n_feats: usize,
    pub in_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { n_resblocks: 4, n_feats: 64, in_channels: 3 }
    }
}

/// 3×3 conv head → residual blocks (conv-ReLU-conv + identity) → 3×3 conv
/// tail with a global skip from the head output.
pub struct Encoder {
    pub cfg: EncoderConfig,
    head: Conv2dDef,
    blocks: Vec<(Conv2dDef, Conv2dDef)>,
    tail: Conv2dDef,
}

impl Encoder {
    pub fn build<S: Scalar>(b: &mut NetBuilder<S>, cfg: &EncoderConfig) -> Self {
        assert!(cfg.n_resblocks >= 1 && cfg.n_feats >= 1 && cfg.in_channels >= 1);
        let c = cfg.n_feats;
        let head = b.conv("encoder.head", cfg.in_channels, c, 3, 1);
        let blocks = (0..cfg.n_resblocks)
            .map(|i| {
                (
                    b.conv(&format!("encoder.block{i}.conv1"), c, c, 3, 1),
                    b.conv(&format!("encoder.block{i}.conv2"), c, c, 3, 1),
                )
            })
            .collect();
        let tail = b.conv("encoder.tail", c, c, 3, 1);
        Encoder { cfg: cfg.clone(), head, blocks, tail }
    }

    /// N×in_channels×H×W → N×n_feats×H×W.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, pv: &ParamVars, x: Var) -> Var {
        let h0 = self.head.apply(tape, pv, x);
        let mut h = h0;
        for (c1, c2) in &self.blocks {
            let r = c1.apply(tape, pv, h);
            let r = tape.relu(r);
            let r = c2.apply(tape, pv, r);
            h = tape.add(h, r);
        }
        let t = self.tail.apply(tape, pv, h);
        tape.add(t, h0)
    }
}
