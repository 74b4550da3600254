//! Continuous local attention head: each HR query attends over the feature
//! vectors of its surrounding LR cells, with keys and values conditioned on
//! the query-relative offsets and the rendering scale, so one model renders
//! any target resolution.

use serde::{Deserialize, Serialize};

use crate::coords::{
    area_weights, local_neighbors, make_coord_grid, nearest_index, rel_offset, CoordGrid, Scale,
};
use crate::nn::{MlpDef, NetBuilder, ParamVars};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Side of the neighbor footprint: 1 (nearest), 2 (2×2) or 3 (3×3).
    pub local_size: usize,
    /// Value dimension produced by phi_v and consumed by phi_q.
    pub d_v: usize,
    /// Hidden widths of the final rendering MLP phi_q.
    pub hidden_q: Vec<usize>,
    /// Hidden widths of the key MLP phi_k.
    pub hidden_k: Vec<usize>,
    /// Hidden widths of the value MLP phi_v.
    pub hidden_v: Vec<usize>,
    /// Hidden widths of the weight MLP used by the mlp_weights variant.
    pub hidden_w: Vec<usize>,
    /// Scale attention logits by 1/√dim (off by default: raw dot products).
    pub scale_logits: bool,
    /// Queries rendered per forward pass during chunked inference.
    pub query_chunk: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            local_size: 2,
            d_v: 256,
            hidden_q: vec![256; 4],
            hidden_k: vec![256; 2],
            hidden_v: vec![256; 2],
            hidden_w: vec![256; 2],
            scale_logits: false,
            query_chunk: 30_000,
        }
    }
}

impl HeadConfig {
    pub fn slots(&self) -> usize {
        self.local_size * self.local_size
    }
}

/// Attention renderer: keys from [F_i, r, s], values from [F_i, G_i, r, s],
/// RGB from phi_q applied to the softmax-weighted value ensemble.
pub struct AttentionHead {
    pub cfg: HeadConfig,
    pub phi_k: MlpDef,
    pub phi_v: MlpDef,
    pub phi_q: MlpDef,
    feat_dim: usize,
}

impl AttentionHead {
    /// `feat_dim` is the per-row feature width (unfolded: 9·channels);
    /// `c_g` the width of the auxiliary non-local features.
    pub fn build<S: Scalar>(
        b: &mut NetBuilder<S>,
        cfg: &HeadConfig,
        feat_dim: usize,
        c_g: usize,
    ) -> Self {
        assert!((1..=3).contains(&cfg.local_size), "local_size must be 1, 2 or 3");
        AttentionHead {
            cfg: cfg.clone(),
            phi_k: b.mlp("head.phi_k", feat_dim + 4, &cfg.hidden_k, feat_dim),
            phi_v: b.mlp("head.phi_v", feat_dim + c_g + 4, &cfg.hidden_v, cfg.d_v),
            phi_q: b.mlp("head.phi_q", cfg.d_v, &cfg.hidden_q, 3),
            feat_dim,
        }
    }
}

/// Ablation renderer: ensemble weights come from an MLP over (r, s) alone
/// instead of query–key attention; the value path is unchanged.
pub struct MlpWeightHead {
    pub cfg: HeadConfig,
    pub wnet: MlpDef,
    pub phi_v: MlpDef,
    pub phi_q: MlpDef,
}

impl MlpWeightHead {
    pub fn build<S: Scalar>(
        b: &mut NetBuilder<S>,
        cfg: &HeadConfig,
        feat_dim: usize,
        c_g: usize,
    ) -> Self {
        assert!((1..=3).contains(&cfg.local_size), "local_size must be 1, 2 or 3");
        MlpWeightHead {
            cfg: cfg.clone(),
            wnet: b.mlp("head.wnet", 4, &cfg.hidden_w, 1),
            phi_v: b.mlp("head.phi_v", feat_dim + c_g + 4, &cfg.hidden_v, cfg.d_v),
            phi_q: b.mlp("head.phi_q", cfg.d_v, &cfg.hidden_q, 3),
        }
    }
}

/// Baseline renderer: RGB = Σ_i w_i · f([F_i, r_i, s]) over the 2×2
/// footprint with fixed opposite-area weights.
pub struct LiifHead {
    pub cfg: HeadConfig,
    pub f: MlpDef,
}

impl LiifHead {
    pub fn build<S: Scalar>(b: &mut NetBuilder<S>, cfg: &HeadConfig, feat_dim: usize) -> Self {
        LiifHead { cfg: cfg.clone(), f: b.mlp("head.f", feat_dim + 4, &cfg.hidden_q, 3) }
    }
}

/// A batch of query points: `coords` is sample-major with `per_sample`
/// queries for each of the `scales.len()` samples; every coordinate lies in
/// the [−1,1]² domain of its sample's LR grid.
pub struct QueryBatch<'a> {
    pub coords: &'a [(f64, f64)],
    pub per_sample: usize,
    pub scales: &'a [Scale],
}

impl QueryBatch<'_> {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    fn validate(&self) {
        assert!(!self.coords.is_empty(), "query batch is empty");
        assert_eq!(
            self.coords.len(),
            self.per_sample * self.scales.len(),
            "query count must be per_sample × samples"
        );
    }
}

/// One neighbor slot: for every query, the global feature-row index of the
/// neighbor cell and the scaled query-minus-cell offset.
struct SlotData {
    idx: Vec<usize>,
    rel: Vec<f64>, // [M × 2] row-major (dy, dx)
}

struct NeighborData {
    nearest: Vec<usize>,
    slots: Vec<SlotData>,
    scale_rows: Vec<f64>, // [M × 2] row-major (s_h, s_w)
}

fn clamp_cell(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn neighbor_cells(q: (f64, f64), grid: &CoordGrid, local_size: usize) -> Vec<(usize, usize)> {
    match local_size {
        1 => vec![nearest_index(q, grid)],
        2 => local_neighbors(q, grid).idx.to_vec(),
        3 => {
            let (ny, nx) = nearest_index(q, grid);
            let mut cells = Vec::with_capacity(9);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    cells.push((
                        clamp_cell(ny as isize + dy, grid.height),
                        clamp_cell(nx as isize + dx, grid.width),
                    ));
                }
            }
            cells
        }
        other => panic!("unsupported local_size {other}"),
    }
}

fn gather_neighbor_data(
    lr_h: usize,
    lr_w: usize,
    batch: &QueryBatch,
    local_size: usize,
) -> NeighborData {
    batch.validate();
    let grid = make_coord_grid(lr_h, lr_w);
    let m = batch.len();
    let slots_n = local_size * local_size;
    let mut nearest = Vec::with_capacity(m);
    let mut slots: Vec<SlotData> = (0..slots_n)
        .map(|_| SlotData { idx: Vec::with_capacity(m), rel: Vec::with_capacity(2 * m) })
        .collect();
    let mut scale_rows = Vec::with_capacity(2 * m);

    for (q, &coord) in batch.coords.iter().enumerate() {
        let sample = q / batch.per_sample;
        let (ny, nx) = nearest_index(coord, &grid);
        nearest.push((sample * lr_h + ny) * lr_w + nx);
        for (slot, (iy, ix)) in neighbor_cells(coord, &grid, local_size).into_iter().enumerate() {
            slots[slot].idx.push((sample * lr_h + iy) * lr_w + ix);
            let r = rel_offset(coord, grid.coord(iy, ix), &grid);
            slots[slot].rel.push(r.dy);
            slots[slot].rel.push(r.dx);
        }
        let s = batch.scales[sample];
        scale_rows.push(s.s_h);
        scale_rows.push(s.s_w);
    }
    NeighborData { nearest, slots, scale_rows }
}

fn leaf_rows<S: Scalar>(tape: &mut Tape<S>, rows: &[f64], cols: usize) -> Var {
    let data: Vec<S> = rows.iter().map(|&v| S::of(v)).collect();
    tape.leaf(Tensor::new(vec![rows.len() / cols, cols], data), false)
}

/// Rendered RGB rows plus the per-query ensemble weights (rows sum to 1).
pub struct RenderOut {
    pub rgb: Var,     // [M × 3]
    pub weights: Var, // [M × slots]
}

/// Full attention renderer over feature rows `[.. × feat_dim]` and
/// non-local rows `[.. × c_g]`, both laid out sample-major, row-major.
pub fn render_attention<S: Scalar>(
    tape: &mut Tape<S>,
    pv: &ParamVars,
    head: &AttentionHead,
    feat_rows: Var,
    g_rows: Var,
    lr_h: usize,
    lr_w: usize,
    batch: &QueryBatch,
) -> RenderOut {
    let nd = gather_neighbor_data(lr_h, lr_w, batch, head.cfg.local_size);
    let scale_leaf = leaf_rows(tape, &nd.scale_rows, 2);
    let q_var = tape.gather_rows(feat_rows, &nd.nearest);

    let mut logits = Vec::new();
    let mut values = Vec::new();
    for slot in &nd.slots {
        let fj = tape.gather_rows(feat_rows, &slot.idx);
        let rel_leaf = leaf_rows(tape, &slot.rel, 2);
        let k_in = tape.concat_cols(&[fj, rel_leaf, scale_leaf]);
        let k_j = head.phi_k.apply(tape, pv, k_in);
        let mut lj = tape.rows_dot(q_var, k_j);
        if head.cfg.scale_logits {
            lj = tape.mul_scalar(lj, 1.0 / (head.feat_dim as f64).sqrt());
        }
        logits.push(lj);
        let gj = tape.gather_rows(g_rows, &slot.idx);
        let v_in = tape.concat_cols(&[fj, gj, rel_leaf, scale_leaf]);
        values.push(head.phi_v.apply(tape, pv, v_in));
    }
    let (weights, ens) = ensemble(tape, &logits, &values);
    RenderOut { rgb: head.phi_q.apply(tape, pv, ens), weights }
}

/// Softmax the per-slot logit columns and mix the per-slot value rows.
fn ensemble<S: Scalar>(tape: &mut Tape<S>, logits: &[Var], values: &[Var]) -> (Var, Var) {
    let logit_mat = if logits.len() == 1 { logits[0] } else { tape.concat_cols(logits) };
    let weights = tape.softmax(logit_mat, 1);
    let mut ens = None;
    for (j, &v) in values.iter().enumerate() {
        let wj = tape.slice_cols(weights, j, 1);
        let term = tape.mul_col(v, wj);
        ens = Some(match ens {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    (weights, ens.expect("at least one neighbor slot"))
}

/// Ablation renderer: softmaxed MLP(r, s) weights, attention values.
pub fn render_mlp_weights<S: Scalar>(
    tape: &mut Tape<S>,
    pv: &ParamVars,
    head: &MlpWeightHead,
    feat_rows: Var,
    g_rows: Var,
    lr_h: usize,
    lr_w: usize,
    batch: &QueryBatch,
) -> RenderOut {
    let nd = gather_neighbor_data(lr_h, lr_w, batch, head.cfg.local_size);
    let scale_leaf = leaf_rows(tape, &nd.scale_rows, 2);

    let mut logits = Vec::new();
    let mut values = Vec::new();
    for slot in &nd.slots {
        let rel_leaf = leaf_rows(tape, &slot.rel, 2);
        let w_in = tape.concat_cols(&[rel_leaf, scale_leaf]);
        logits.push(head.wnet.apply(tape, pv, w_in));
        let fj = tape.gather_rows(feat_rows, &slot.idx);
        let gj = tape.gather_rows(g_rows, &slot.idx);
        let v_in = tape.concat_cols(&[fj, gj, rel_leaf, scale_leaf]);
        values.push(head.phi_v.apply(tape, pv, v_in));
    }
    let (weights, ens) = ensemble(tape, &logits, &values);
    RenderOut { rgb: head.phi_q.apply(tape, pv, ens), weights }
}

/// Baseline renderer: fixed opposite-area weights over the 2×2 footprint,
/// per-neighbor RGB decoded directly from [F_i, r_i, s].
pub fn render_liif<S: Scalar>(
    tape: &mut Tape<S>,
    pv: &ParamVars,
    head: &LiifHead,
    feat_rows: Var,
    lr_h: usize,
    lr_w: usize,
    batch: &QueryBatch,
) -> RenderOut {
    // The bilinear local ensemble is defined on the 2×2 footprint.
    let nd = gather_neighbor_data(lr_h, lr_w, batch, 2);
    let scale_leaf = leaf_rows(tape, &nd.scale_rows, 2);
    let grid = make_coord_grid(lr_h, lr_w);
    let m = batch.len();

    let mut weight_rows = vec![0.0f64; m * 4];
    for (q, &coord) in batch.coords.iter().enumerate() {
        let neighbors = local_neighbors(coord, &grid);
        for (j, w) in area_weights(coord, &neighbors).into_iter().enumerate() {
            weight_rows[q * 4 + j] = w;
        }
    }
    let weights = leaf_rows(tape, &weight_rows, 4);

    let mut out = None;
    for (j, slot) in nd.slots.iter().enumerate() {
        let fj = tape.gather_rows(feat_rows, &slot.idx);
        let rel_leaf = leaf_rows(tape, &slot.rel, 2);
        let f_in = tape.concat_cols(&[fj, rel_leaf, scale_leaf]);
        let rgb_j = head.f.apply(tape, pv, f_in);
        let wj = tape.slice_cols(weights, j, 1);
        let term = tape.mul_col(rgb_j, wj);
        out = Some(match out {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    RenderOut { rgb: out.expect("four neighbor slots"), weights }
}
