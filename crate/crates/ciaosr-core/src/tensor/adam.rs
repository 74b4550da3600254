//! Adam optimizer and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second-moment buffers, one pair per parameter tensor, plus the
/// shared step counter used for bias correction.
pub struct AdamState<S> {
    pub t: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(lens: &[usize]) -> Self {
        AdamState {
            t: 0,
            m: lens.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: lens.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    /// One Adam update over all parameters. `grads` must be parallel to
    /// `params` (same order, same lengths).
    pub fn step(&mut self, cfg: &AdamConfig, lr: f64, params: &mut [Tensor<S>], grads: &[Vec<S>]) {
        assert_eq!(params.len(), self.m.len(), "adam: parameter count changed");
        assert_eq!(params.len(), grads.len(), "adam: gradient count mismatch");
        self.t += 1;
        let b1 = S::of(cfg.beta1);
        let b2 = S::of(cfg.beta2);
        let one_m_b1 = S::of(1.0 - cfg.beta1);
        let one_m_b2 = S::of(1.0 - cfg.beta2);
        let c1 = S::of(1.0 / (1.0 - cfg.beta1.powi(self.t as i32)));
        let c2 = S::of(1.0 / (1.0 - cfg.beta2.powi(self.t as i32)));
        let eps = S::of(cfg.eps);
        let lr = S::of(lr);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.numel(), g.len(), "adam: gradient length mismatch");
            for ((pv, &gv), (mv, vv)) in
                p.data_mut().iter_mut().zip(g).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = b1 * *mv + one_m_b1 * gv;
                *vv = b2 * *vv + one_m_b2 * gv * gv;
                let mh = *mv * c1;
                let vh = *vv * c2;
                *pv = *pv - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Scale all gradients down so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Vec<S>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g {
            let v = v.as_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = S::of(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}
