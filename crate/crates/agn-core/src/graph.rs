//! Per-slice graph construction over a probability map: one vertex per
//! 2^delta cell, geodesic distances (minimal cumulative absolute probability
//! difference along pixel paths), thresholded adjacency, and vertex feature
//! gather/scatter.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AgnError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

#[derive(Clone, Copy, Debug)]
pub struct GraphConfig {
    /// Sampling sparsity: cells have edge 2^delta.
    pub delta: u32,
    /// Geodesic edge threshold (used when `auto_threshold` is off).
    pub d_threshold: f64,
    /// Calibrate the threshold per slice so the mean vertex degree
    /// (self-loops excluded) lands in [2, 8].
    pub auto_threshold: bool,
    pub connectivity: Connectivity,
    pub rng_seed: u64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            delta: 3,
            d_threshold: 10.0,
            auto_threshold: true,
            connectivity: Connectivity::Four,
            rng_seed: 0,
        }
    }
}

impl GraphConfig {
    pub fn cell(&self) -> usize {
        1usize << self.delta
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.delta < 1 {
            return Err(AgnError::InvalidConfig("delta must be >= 1".into()));
        }
        if self.cell() > h.min(w) {
            return Err(AgnError::InvalidConfig(format!(
                "cell size 2^{} = {} exceeds min extent of {}x{} map",
                self.delta,
                self.cell(),
                h,
                w
            )));
        }
        if self.d_threshold <= 0.0 {
            return Err(AgnError::InvalidConfig("d_threshold must be > 0".into()));
        }
        Ok(())
    }
}

/// One sampled pixel per cell, in original-slice coordinates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VertexSet {
    pub positions: Vec<(usize, usize)>,
    pub grid_dims: (usize, usize),
}

impl VertexSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Symmetric 0/1 adjacency with self-loops, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    pub v: usize,
    pub data: Vec<u8>,
}

impl Adjacency {
    pub fn identity(v: usize) -> Self {
        let mut data = vec![0u8; v * v];
        for i in 0..v {
            data[i * v + i] = 1;
        }
        Adjacency { v, data }
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        self.data[i * self.v + j] != 0
    }

    pub fn set_edge(&mut self, i: usize, j: usize) {
        self.data[i * self.v + j] = 1;
        self.data[j * self.v + i] = 1;
    }

    /// Edge count excluding self-loops (each undirected edge once).
    pub fn edge_count(&self) -> usize {
        let mut e = 0;
        for i in 0..self.v {
            for j in i + 1..self.v {
                e += self.data[i * self.v + j] as usize;
            }
        }
        e
    }

    pub fn mean_degree(&self) -> f64 {
        if self.v == 0 {
            return 0.0;
        }
        2.0 * self.edge_count() as f64 / self.v as f64
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.v {
            if self.data[i * self.v + i] == 0 {
                return Err(AgnError::InvalidArgument(format!("adjacency row {i} lacks a self-loop")));
            }
            for j in 0..self.v {
                let a = self.data[i * self.v + j];
                if a > 1 {
                    return Err(AgnError::InvalidArgument("adjacency entries must be 0/1".into()));
                }
                if a != self.data[j * self.v + i] {
                    return Err(AgnError::InvalidArgument(format!("adjacency not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(())
    }
}

/// Sampled vertices, adjacency, and per-vertex feature rows.
#[derive(Clone, Debug)]
pub struct Graph {
    pub vertices: VertexSet,
    pub adjacency: Adjacency,
    pub features: Tensor,
}

fn prob_dims(prob: &Tensor) -> Result<(usize, usize)> {
    let (h, w) = prob.dims2()?;
    if !prob.all_finite() {
        return Err(AgnError::NonFinite("probability map".into()));
    }
    Ok((h, w))
}

/// One vertex per non-overlapping 2^delta cell: the brightest pixel, the cell
/// center when the cell is constant, a seeded uniform choice among ties.
pub fn sample_vertices(prob: &Tensor, cfg: &GraphConfig) -> Result<VertexSet> {
    let (h, w) = prob_dims(prob)?;
    cfg.validate(h, w)?;
    let c = cfg.cell();
    let gh = h.div_ceil(c);
    let gw = w.div_ceil(c);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let pd = prob.data();
    let mut positions = Vec::with_capacity(gh * gw);
    for gi in 0..gh {
        for gj in 0..gw {
            let r0 = gi * c;
            let c0 = gj * c;
            let r1 = (r0 + c).min(h);
            let c1 = (c0 + c).min(w);
            let mut max = f64::NEG_INFINITY;
            let mut min = f64::INFINITY;
            let mut count = 0usize;
            for r in r0..r1 {
                for cc in c0..c1 {
                    let v = pd[r * w + cc];
                    min = min.min(v);
                    if v > max {
                        max = v;
                        count = 1;
                    } else if v == max {
                        count += 1;
                    }
                }
            }
            let pos = if min == max {
                // constant cell: its center
                (r0 + (r1 - r0) / 2, c0 + (c1 - c0) / 2)
            } else if count == 1 {
                let mut found = (r0, c0);
                'scan: for r in r0..r1 {
                    for cc in c0..c1 {
                        if pd[r * w + cc] == max {
                            found = (r, cc);
                            break 'scan;
                        }
                    }
                }
                found
            } else {
                let pick = rng.gen_range(0..count);
                let mut seen = 0usize;
                let mut found = (r0, c0);
                'scan2: for r in r0..r1 {
                    for cc in c0..c1 {
                        if pd[r * w + cc] == max {
                            if seen == pick {
                                found = (r, cc);
                                break 'scan2;
                            }
                            seen += 1;
                        }
                    }
                }
                found
            };
            positions.push(pos);
        }
    }
    Ok(VertexSet {
        positions,
        grid_dims: (gh, gw),
    })
}

fn neighbors(connectivity: Connectivity) -> &'static [(isize, isize)] {
    match connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[
            (-1, 0),
            (1, 0),
            (0, -1),
            (0, 1),
            (-1, -1),
            (-1, 1),
            (1, -1),
            (1, 1),
        ],
    }
}

/// Exact single-source shortest paths on the pixel lattice with edge weight
/// |p(a) - p(b)|. Returns the full per-pixel distance field.
pub fn geodesic_distances(prob: &Tensor, source: (usize, usize), cfg: &GraphConfig) -> Result<Vec<f64>> {
    let (h, w) = prob_dims(prob)?;
    if source.0 >= h || source.1 >= w {
        return Err(AgnError::InvalidArgument(format!(
            "geodesic source {source:?} outside {h}x{w} map"
        )));
    }
    let pd = prob.data();
    let nbrs = neighbors(cfg.connectivity);
    let mut dist = vec![f64::INFINITY; h * w];
    let src = source.0 * w + source.1;
    dist[src] = 0.0;
    // distances are nonnegative finite, so the f64 bit pattern orders them
    let mut heap: BinaryHeap<Reverse<(u64, u32)>> = BinaryHeap::new();
    heap.push(Reverse((0u64, src as u32)));
    while let Some(Reverse((dbits, idx))) = heap.pop() {
        let d = f64::from_bits(dbits);
        let i = idx as usize;
        if d > dist[i] {
            continue;
        }
        let (r, c) = (i / w, i % w);
        let p_here = pd[i];
        for &(dr, dc) in nbrs {
            let nr = r as isize + dr;
            let nc = c as isize + dc;
            if nr < 0 || nr >= h as isize || nc < 0 || nc >= w as isize {
                continue;
            }
            let j = nr as usize * w + nc as usize;
            let nd = d + (p_here - pd[j]).abs();
            if nd < dist[j] {
                dist[j] = nd;
                heap.push(Reverse((nd.to_bits(), j as u32)));
            }
        }
    }
    Ok(dist)
}

/// All pairwise geodesic distances between sampled vertices, symmetrized by
/// taking the minimum of the two directions (they agree up to rounding).
pub fn vertex_distance_matrix(prob: &Tensor, vertices: &VertexSet, cfg: &GraphConfig) -> Result<Vec<f64>> {
    let (_, w) = prob_dims(prob)?;
    let v = vertices.len();
    let mut mat = vec![0.0; v * v];
    for (i, &pos) in vertices.positions.iter().enumerate() {
        let field = geodesic_distances(prob, pos, cfg)?;
        for (j, &(r, c)) in vertices.positions.iter().enumerate() {
            mat[i * v + j] = field[r * w + c];
        }
    }
    for i in 0..v {
        for j in i + 1..v {
            let m = mat[i * v + j].min(mat[j * v + i]);
            mat[i * v + j] = m;
            mat[j * v + i] = m;
        }
    }
    Ok(mat)
}

/// Pick a threshold from the pairwise distances so the mean degree lands in
/// [2, 8] (as close to 4 as ties allow).
pub fn calibrate_threshold(dist_matrix: &[f64], v: usize) -> f64 {
    let mut pairs: Vec<f64> = Vec::with_capacity(v * (v - 1) / 2);
    for i in 0..v {
        for j in i + 1..v {
            pairs.push(dist_matrix[i * v + j]);
        }
    }
    if pairs.is_empty() {
        return 1.0;
    }
    pairs.sort_unstable_by(f64::total_cmp);
    // candidate thresholds sit just above each distinct value
    let mut best_d = pairs[pairs.len() - 1] + 1.0;
    let mut best_score = f64::INFINITY;
    let mut k = 0usize;
    while k < pairs.len() {
        let val = pairs[k];
        // advance over ties
        let mut k2 = k;
        while k2 + 1 < pairs.len() && pairs[k2 + 1] == val {
            k2 += 1;
        }
        let edges = k2 + 1;
        let mean_deg = 2.0 * edges as f64 / v as f64;
        let score = if (2.0..=8.0).contains(&mean_deg) {
            (mean_deg - 4.0).abs()
        } else {
            100.0 + (mean_deg - 4.0).abs()
        };
        if score < best_score {
            best_score = score;
            let next = if k2 + 1 < pairs.len() { pairs[k2 + 1] } else { val + 1.0 };
            best_d = 0.5 * (val + next.max(val + f64::EPSILON));
        }
        k = k2 + 1;
    }
    best_d.max(f64::MIN_POSITIVE)
}

/// Edge (i,j) iff the geodesic distance between the vertices is under the
/// threshold; self-loops always present. Returns the threshold actually used.
pub fn build_adjacency(prob: &Tensor, vertices: &VertexSet, cfg: &GraphConfig) -> Result<(Adjacency, f64)> {
    let v = vertices.len();
    let mat = vertex_distance_matrix(prob, vertices, cfg)?;
    let d = if cfg.auto_threshold {
        calibrate_threshold(&mat, v)
    } else {
        cfg.d_threshold
    };
    let mut adj = Adjacency::identity(v);
    for i in 0..v {
        for j in i + 1..v {
            if mat[i * v + j] < d {
                adj.set_edge(i, j);
            }
        }
    }
    Ok((adj, d))
}

/// Row k = the channel vector at vertex k's pixel (Fig-12 style flattening).
pub fn gather_features(features: &Tensor, vertices: &VertexSet) -> Result<Tensor> {
    let (n, c, h, w) = features.dims4()?;
    if n != 1 {
        return Err(AgnError::InvalidArgument("gather_features expects batch 1".into()));
    }
    let v = vertices.len();
    let mut rows = Tensor::zeros(&[v, c]);
    let fd = features.data();
    let rd = rows.data_mut();
    for (k, &(r, cc)) in vertices.positions.iter().enumerate() {
        if r >= h || cc >= w {
            return Err(AgnError::InvalidArgument(format!(
                "vertex {k} at ({r},{cc}) outside {h}x{w} feature map"
            )));
        }
        for ch in 0..c {
            rd[k * c + ch] = fd[(ch * h + r) * w + cc];
        }
    }
    Ok(rows)
}

/// Backward of gather: scatters row gradients to vertex pixels, zero elsewhere.
pub fn gather_features_backward(grad_rows: &Tensor, feature_shape: &[usize], vertices: &VertexSet) -> Tensor {
    let (c, h, w) = (feature_shape[1], feature_shape[2], feature_shape[3]);
    let mut gx = Tensor::zeros(feature_shape);
    let gd = gx.data_mut();
    let grd = grad_rows.data();
    for (k, &(r, cc)) in vertices.positions.iter().enumerate() {
        for ch in 0..c {
            gd[(ch * h + r) * w + cc] += grd[k * c + ch];
        }
    }
    gx
}

/// Places vertex k's row at its cell's coordinate in the reduced grid.
pub fn scatter_features(rows: &Tensor, vertices: &VertexSet) -> Result<Tensor> {
    let (v, c) = rows.dims2()?;
    let (gh, gw) = vertices.grid_dims;
    if v != gh * gw || v != vertices.len() {
        return Err(AgnError::InvalidArgument(format!(
            "scatter_features: {v} rows vs grid {gh}x{gw} with {} vertices",
            vertices.len()
        )));
    }
    let mut out = Tensor::zeros(&[1, c, gh, gw]);
    let od = out.data_mut();
    let rd = rows.data();
    for k in 0..v {
        let (gi, gj) = (k / gw, k % gw);
        for ch in 0..c {
            od[(ch * gh + gi) * gw + gj] = rd[k * c + ch];
        }
    }
    Ok(out)
}

/// Backward of scatter: gathers grid gradients back into rows.
pub fn scatter_features_backward(grad_out: &Tensor, vertices: &VertexSet) -> Tensor {
    let (gh, gw) = vertices.grid_dims;
    let c = grad_out.shape()[1];
    let v = gh * gw;
    let mut gr = Tensor::zeros(&[v, c]);
    let gd = gr.data_mut();
    let od = grad_out.data();
    for k in 0..v {
        let (gi, gj) = (k / gw, k % gw);
        for ch in 0..c {
            gd[k * c + ch] = od[(ch * gh + gi) * gw + gj];
        }
    }
    gr
}

/// Debug text dump: "V E delta", V position lines, E edge lines (i < j).
pub fn dump_graph(vertices: &VertexSet, adjacency: &Adjacency, delta: u32) -> String {
    let v = vertices.len();
    let e = adjacency.edge_count();
    let mut s = String::new();
    let _ = writeln!(s, "{v} {e} {delta}");
    for &(r, c) in &vertices.positions {
        let _ = writeln!(s, "{r} {c}");
    }
    for i in 0..v {
        for j in i + 1..v {
            if adjacency.is_edge(i, j) {
                let _ = writeln!(s, "{i} {j}");
            }
        }
    }
    s
}
