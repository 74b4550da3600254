//! Continuous coordinate machinery shared by every renderer.
//!
//! Images live on the continuous domain [−1,1]²: pixel row `i` of an
//! `H`-row image sits at `−1 + (2i+1)/H`, i.e. at the center of its cell.
//! Offsets handed to the networks are scaled by the grid resolution so
//! their magnitude stays O(1) no matter how fine the grid is.

/// Cell centers of an H×W pixel grid in [−1,1]².
#[derive(Debug, Clone)]
pub struct CoordGrid {
    pub height: usize,
    pub width: usize,
    ys: Vec<f64>,
    xs: Vec<f64>,
}

impl CoordGrid {
    pub fn coord(&self, i: usize, j: usize) -> (f64, f64) {
        (self.ys[i], self.xs[j])
    }

    pub fn row_coords(&self) -> &[f64] {
        &self.ys
    }

    pub fn col_coords(&self) -> &[f64] {
        &self.xs
    }
}

/// Output-over-input size ratios for the two axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scale {
    pub s_h: f64,
    pub s_w: f64,
}

/// Query-minus-key offset after resolution scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelOffset {
    pub dy: f64,
    pub dx: f64,
}

fn centers(n: usize) -> Vec<f64> {
    (0..n).map(|i| -1.0 + (2 * i + 1) as f64 / n as f64).collect()
}

pub fn make_coord_grid(height: usize, width: usize) -> CoordGrid {
    assert!(height >= 1 && width >= 1, "coordinate grid needs positive dimensions");
    CoordGrid { height, width, ys: centers(height), xs: centers(width) }
}

/// Fractional cell position of a [−1,1] coordinate on an `n`-cell axis:
/// the center of cell `i` maps to exactly `i`.
fn grid_pos(x: f64, n: usize) -> f64 {
    (x + 1.0) * n as f64 / 2.0 - 0.5
}

fn nearest_axis(x: f64, n: usize) -> usize {
    // ceil(p − 1/2) rounds to the nearest integer with ties toward the
    // smaller index.
    let p = grid_pos(x, n);
    (p - 0.5).ceil().clamp(0.0, (n - 1) as f64) as usize
}

/// Index of the grid cell whose center is closest to the query (Euclidean;
/// the axes separate). Out-of-range queries clamp; ties break toward the
/// smaller index.
pub fn nearest_index(x_q: (f64, f64), grid: &CoordGrid) -> (usize, usize) {
    (nearest_axis(x_q.0, grid.height), nearest_axis(x_q.1, grid.width))
}

/// The four cells surrounding a query, in top-left, top-right, bottom-left,
/// bottom-right order. At the borders the raw floor/floor+1 pair clamps
/// axis-wise, so duplicated cells are possible.
#[derive(Debug, Clone)]
pub struct Neighbors {
    pub idx: [(usize, usize); 4],
    pub coords: [(f64, f64); 4],
}

fn floor_pair(x: f64, n: usize) -> (usize, usize) {
    let raw = grid_pos(x, n).floor();
    let hi = (n - 1) as f64;
    ((raw.clamp(0.0, hi)) as usize, ((raw + 1.0).clamp(0.0, hi)) as usize)
}

pub fn local_neighbors(x_q: (f64, f64), grid: &CoordGrid) -> Neighbors {
    let (i0, i1) = floor_pair(x_q.0, grid.height);
    let (j0, j1) = floor_pair(x_q.1, grid.width);
    let idx = [(i0, j0), (i0, j1), (i1, j0), (i1, j1)];
    let coords = idx.map(|(i, j)| grid.coord(i, j));
    Neighbors { idx, coords }
}

/// Ensemble weights for the four neighbors: each neighbor is weighted by the
/// rectangle spanned by the query and the diagonally opposite neighbor,
/// normalized to sum 1. Computed separably per axis, which reproduces
/// bilinear interpolation and handles duplicated (clamped) neighbors by
/// merging their shares evenly.
pub fn area_weights(x_q: (f64, f64), neighbors: &Neighbors) -> [f64; 4] {
    let axis = |q: f64, c0: f64, c1: f64| -> (f64, f64) {
        let (w0, w1) = ((q - c1).abs(), (q - c0).abs());
        let total = w0 + w1;
        if total == 0.0 {
            (0.5, 0.5)
        } else {
            (w0 / total, w1 / total)
        }
    };
    let (wy0, wy1) = axis(x_q.0, neighbors.coords[0].0, neighbors.coords[2].0);
    let (wx0, wx1) = axis(x_q.1, neighbors.coords[0].1, neighbors.coords[1].1);
    [wy0 * wx0, wy0 * wx1, wy1 * wx0, wy1 * wx1]
}

pub fn scale_vector(h_in: usize, w_in: usize, h_out: usize, w_out: usize) -> Scale {
    assert!(h_in >= 1 && w_in >= 1, "scale_vector: input sizes must be positive");
    assert!(h_out >= 1 && w_out >= 1, "scale_vector: output sizes must be positive");
    Scale { s_h: h_out as f64 / h_in as f64, s_w: w_out as f64 / w_in as f64 }
}

/// x_q − x_k with dy scaled by the grid height and dx by the grid width.
pub fn rel_offset(x_q: (f64, f64), x_k: (f64, f64), grid: &CoordGrid) -> RelOffset {
    RelOffset {
        dy: (x_q.0 - x_k.0) * grid.height as f64,
        dx: (x_q.1 - x_k.1) * grid.width as f64,
    }
}
