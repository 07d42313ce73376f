//! Graph bottleneck: sinusoidal positional encodings over the bottleneck
//! grid, a learnable projection that warps node coordinates, k-nearest-
//! neighbor graph construction in the warped space, and the neighborhood-sum
//! graph convolution applied on top.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::{Real, Tensor};

/// Per-node sine/cosine features of the grid coordinates plus the linear
/// projection that turns them into a 2-D coordinate offset.
#[derive(Debug, Clone)]
pub struct PositionalEncoding {
    h: usize,
    w: usize,
    d_pe: usize,
    /// [num_nodes, d_pe], nodes in row-major grid order.
    encoding: Vec<Real>,
    /// [2, d_pe]; row 0 offsets the row coordinate, row 1 the column.
    projection: Tensor,
    learnable: bool,
}

/// Warped node positions: raw grid coordinate plus projected encoding.
#[derive(Debug, Clone)]
pub struct WarpedCoords {
    h: usize,
    w: usize,
    /// [num_nodes, 2] flattened (row, col) pairs.
    coords: Vec<Real>,
}

/// Directed k-NN adjacency over grid nodes in CSR form. Every row lists the
/// node itself plus its k nearest others, sorted by warped distance with
/// index as the tie-break.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridGraph {
    num_nodes: usize,
    k: usize,
    csr_offsets: Arc<Vec<usize>>,
    csr_neighbors: Arc<Vec<u32>>,
}

/// Weight/bias pair of one graph-convolution layer.
#[derive(Debug, Clone)]
pub struct GraphConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl GraphConvParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 2 || ws[0] != ws[1] {
            return Err(Error::Shape(format!(
                "graph-conv weight must be square, got {ws:?}"
            )));
        }
        if bias.shape() != [ws[0]] {
            return Err(Error::Shape(format!(
                "graph-conv bias shape {:?}, expected [{}]",
                bias.shape(),
                ws[0]
            )));
        }
        Ok(GraphConvParams { weight, bias })
    }

    pub fn width(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Builds the sine/cosine encoding of every node of an `h x w` grid.
///
/// Each axis gets `d_pe/2` slots filled with `[sin(p/w_j), cos(p/w_j)]`
/// pairs, `w_j = 10000^(2j / (d_pe/2))`; the row-axis slots follow the
/// column-axis slots. The projection starts at zero (identity warp).
pub fn sinusoidal_encoding(h: usize, w: usize, d_pe: usize) -> Result<PositionalEncoding> {
    if d_pe % 2 != 0 || d_pe < 4 {
        return Err(Error::Config(format!(
            "d_pe must be even and >= 4, got {d_pe}"
        )));
    }
    let d_half = d_pe / 2;
    let n = h * w;
    let mut encoding = vec![0.0; n * d_pe];
    for node in 0..n {
        let row = (node / w) as Real;
        let col = (node % w) as Real;
        let dst = &mut encoding[node * d_pe..(node + 1) * d_pe];
        fill_axis(&mut dst[..d_half], col, d_half);
        fill_axis(&mut dst[d_half..], row, d_half);
    }
    Ok(PositionalEncoding {
        h,
        w,
        d_pe,
        encoding,
        projection: Tensor::zeros(&[2, d_pe]),
        learnable: false,
    })
}

fn fill_axis(slots: &mut [Real], pos: Real, d_half: usize) {
    for (m, slot) in slots.iter_mut().enumerate() {
        let j = m / 2;
        let omega = (10000.0 as Real).powf(2.0 * j as Real / d_half as Real);
        let t = pos / omega;
        *slot = if m % 2 == 0 { t.sin() } else { t.cos() };
    }
}

impl PositionalEncoding {
    pub fn with_projection(mut self, projection: Tensor, learnable: bool) -> Result<Self> {
        if projection.shape() != [2, self.d_pe] {
            return Err(Error::Shape(format!(
                "projection shape {:?}, expected [2, {}]",
                projection.shape(),
                self.d_pe
            )));
        }
        self.projection = projection;
        self.learnable = learnable;
        Ok(self)
    }

    pub fn learnable(&self) -> bool {
        self.learnable
    }

    pub fn d_pe(&self) -> usize {
        self.d_pe
    }

    pub fn num_nodes(&self) -> usize {
        self.h * self.w
    }

    /// Encoding vector of one node.
    pub fn node(&self, i: usize) -> &[Real] {
        &self.encoding[i * self.d_pe..(i + 1) * self.d_pe]
    }
}

/// Adds the projected encoding of each node to its raw grid coordinate.
pub fn warp_coordinates(pe: &PositionalEncoding) -> WarpedCoords {
    let n = pe.num_nodes();
    let proj = pe.projection.data();
    let d = pe.d_pe;
    let mut coords = vec![0.0; n * 2];
    for i in 0..n {
        let enc = pe.node(i);
        let mut dr = 0.0;
        let mut dc = 0.0;
        for m in 0..d {
            dr += proj[m] * enc[m];
            dc += proj[d + m] * enc[m];
        }
        coords[i * 2] = (i / pe.w) as Real + dr;
        coords[i * 2 + 1] = (i % pe.w) as Real + dc;
    }
    WarpedCoords {
        h: pe.h,
        w: pe.w,
        coords,
    }
}

impl WarpedCoords {
    /// Directly supplied coordinates, mainly for tests and oracles.
    pub fn from_raw(h: usize, w: usize, coords: Vec<Real>) -> Result<Self> {
        if coords.len() != h * w * 2 {
            return Err(Error::Shape(format!(
                "expected {} coordinate pairs, got {}",
                h * w,
                coords.len() / 2
            )));
        }
        Ok(WarpedCoords { h, w, coords })
    }

    pub fn num_nodes(&self) -> usize {
        self.h * self.w
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn node(&self, i: usize) -> (Real, Real) {
        (self.coords[i * 2], self.coords[i * 2 + 1])
    }
}

/// Connects every node to itself plus its `k` nearest others by Euclidean
/// distance in warped coordinates; equal distances break toward the smaller
/// node index. `k = 0` yields a self-loop-only graph.
pub fn build_knn_graph(coords: &WarpedCoords, k: usize) -> Result<GridGraph> {
    let n = coords.num_nodes();
    if k >= n {
        return Err(Error::Config(format!(
            "k = {k} must be smaller than the node count {n}"
        )));
    }
    let mut offsets = Vec::with_capacity(n + 1);
    let mut neighbors = Vec::with_capacity(n * (k + 1));
    offsets.push(0);
    let mut candidates: Vec<(Real, u32)> = Vec::with_capacity(n.saturating_sub(1));
    for i in 0..n {
        let (iy, ix) = coords.node(i);
        candidates.clear();
        for j in 0..n {
            if j == i {
                continue;
            }
            let (jy, jx) = coords.node(j);
            let d2 = (iy - jy) * (iy - jy) + (ix - jx) * (ix - jx);
            candidates.push((d2, j as u32));
        }
        let by_dist_then_index =
            |a: &(Real, u32), b: &(Real, u32)| a.partial_cmp(b).expect("finite coords");
        if k > 0 && k < candidates.len() {
            candidates.select_nth_unstable_by(k - 1, by_dist_then_index);
            candidates.truncate(k);
        }
        candidates.push((0.0, i as u32));
        candidates.sort_unstable_by(by_dist_then_index);
        neighbors.extend(candidates.iter().map(|&(_, j)| j));
        offsets.push(neighbors.len());
    }
    Ok(GridGraph {
        num_nodes: n,
        k,
        csr_offsets: Arc::new(offsets),
        csr_neighbors: Arc::new(neighbors),
    })
}

impl GridGraph {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Always true: every neighbor list contains the node itself.
    pub fn includes_self(&self) -> bool {
        true
    }

    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.csr_neighbors[self.csr_offsets[i]..self.csr_offsets[i + 1]]
    }

    pub fn csr(&self) -> (Arc<Vec<usize>>, Arc<Vec<u32>>) {
        (Arc::clone(&self.csr_offsets), Arc::clone(&self.csr_neighbors))
    }

    /// Relabels nodes by `sigma` (new index = sigma[old index]). Used by the
    /// permutation-equivariance checks.
    pub fn permuted(&self, sigma: &[usize]) -> GridGraph {
        assert_eq!(sigma.len(), self.num_nodes);
        let mut inverse = vec![0usize; self.num_nodes];
        for (old, &new) in sigma.iter().enumerate() {
            inverse[new] = old;
        }
        let mut offsets = Vec::with_capacity(self.num_nodes + 1);
        let mut neighbors = Vec::with_capacity(self.csr_neighbors.len());
        offsets.push(0);
        for new in 0..self.num_nodes {
            let old = inverse[new];
            neighbors.extend(self.neighbors(old).iter().map(|&j| sigma[j as usize] as u32));
            offsets.push(neighbors.len());
        }
        GridGraph {
            num_nodes: self.num_nodes,
            k: self.k,
            csr_offsets: Arc::new(offsets),
            csr_neighbors: Arc::new(neighbors),
        }
    }
}

/// One graph-convolution layer on the tape: aggregate neighbor features
/// (sum, or mean when `mean` is set), apply the shared linear map, ReLU.
pub fn graph_conv(
    tape: &mut Tape,
    features: VarId,
    graph: &GridGraph,
    weight: VarId,
    bias: VarId,
    mean: bool,
) -> Result<VarId> {
    let fs = tape.shape(features);
    if fs.len() != 2 || fs[0] != graph.num_nodes() {
        return Err(Error::Shape(format!(
            "graph_conv: features {fs:?} vs {} graph nodes",
            graph.num_nodes()
        )));
    }
    let ws = tape.shape(weight);
    if ws.len() != 2 || ws[0] != ws[1] || ws[1] != fs[1] {
        return Err(Error::Shape(format!(
            "graph_conv: weight {ws:?} must be square [{c},{c}]",
            c = fs[1]
        )));
    }
    let (offsets, neighbors) = graph.csr();
    let agg = tape.row_gather_sum(features, offsets, neighbors, mean)?;
    let lin = tape.linear(agg, weight, bias)?;
    Ok(tape.relu(lin))
}

/// Forward-only convenience wrapper over [`graph_conv`].
pub fn graph_conv_tensor(
    features: &Tensor,
    graph: &GridGraph,
    params: &GraphConvParams,
    mean: bool,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.leaf_detached(features);
    let w = tape.leaf_detached(&params.weight);
    let b = tape.leaf_detached(&params.bias);
    let out = graph_conv(&mut tape, f, graph, w, b, mean)?;
    Ok(tape.value(out).clone())
}

/// Builds the bottleneck graph for an `h x w` feature grid: sinusoidal
/// encodings, projected warp, then k-NN with k clamped to the node count.
pub fn build_bottleneck_graph(
    h: usize,
    w: usize,
    k: usize,
    d_pe: usize,
    projection: &Tensor,
    learnable: bool,
) -> Result<GridGraph> {
    let pe = sinusoidal_encoding(h, w, d_pe)?
        .with_projection(projection.clone(), learnable)?;
    let coords = warp_coordinates(&pe);
    let k_eff = k.min(h * w - 1);
    build_knn_graph(&coords, k_eff)
}

/// Applies `layers` graph convolutions to a [C,H,W] map: flatten to node
/// features in row-major order, convolve over `graph`, reshape back.
pub fn bottleneck_forward(
    tape: &mut Tape,
    map: VarId,
    graph: &GridGraph,
    layers: &[(VarId, VarId)],
    mean: bool,
) -> Result<VarId> {
    let shape = tape.shape(map).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "bottleneck input must be [C,H,W], got {shape:?}"
        )));
    }
    if layers.is_empty() {
        return Err(Error::Config("bottleneck needs at least one GNN layer".into()));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut nodes = tape.map_to_nodes(map)?;
    for &(weight, bias) in layers {
        nodes = graph_conv(tape, nodes, graph, weight, bias, mean)?;
    }
    tape.nodes_to_map(nodes, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_params(c: usize) -> GraphConvParams {
        let mut w = Tensor::zeros(&[c, c]);
        for i in 0..c {
            w.data_mut()[i * c + i] = 1.0;
        }
        GraphConvParams::new(w, Tensor::zeros(&[c])).unwrap()
    }

    /// Full-sort k-NN oracle: all pairwise distances, sorted, first k+1 with
    /// the self entry forced in.
    fn knn_oracle(coords: &WarpedCoords, k: usize) -> Vec<Vec<u32>> {
        let n = coords.num_nodes();
        (0..n)
            .map(|i| {
                let (iy, ix) = coords.node(i);
                let mut all: Vec<(Real, u32)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| {
                        let (jy, jx) = coords.node(j);
                        ((iy - jy).powi(2) + (ix - jx).powi(2), j as u32)
                    })
                    .collect();
                all.sort_by(|a, b| a.partial_cmp(b).unwrap());
                all.truncate(k);
                all.push((0.0, i as u32));
                all.sort_by(|a, b| a.partial_cmp(b).unwrap());
                all.into_iter().map(|(_, j)| j).collect()
            })
            .collect()
    }

    #[test]
    fn encoding_at_origin() {
        let pe = sinusoidal_encoding(4, 4, 8).unwrap();
        let e = pe.node(0);
        for (m, &v) in e.iter().enumerate() {
            if m % 2 == 0 {
                assert_eq!(v, 0.0, "sine slot {m}");
            } else {
                assert_eq!(v, 1.0, "cosine slot {m}");
            }
        }
    }

    #[test]
    fn encoding_closed_form_d4() {
        // Node (x=1, y=0) with d_pe = 4: column part [sin 1, cos 1], row part [0, 1].
        let pe = sinusoidal_encoding(2, 2, 4).unwrap();
        let e = pe.node(1);
        let want = [(1.0 as Real).sin(), (1.0 as Real).cos(), 0.0, 1.0];
        for (a, b) in e.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn encoding_values_bounded_and_distinct() {
        let pe = sinusoidal_encoding(8, 8, 4).unwrap();
        assert!(pe.encoding.iter().all(|v| (-1.0..=1.0).contains(v)));
        for i in 0..64 {
            for j in (i + 1)..64 {
                assert_ne!(pe.node(i), pe.node(j), "nodes {i} and {j} collide");
            }
        }
    }

    #[test]
    fn encoding_rejects_bad_widths() {
        assert!(matches!(sinusoidal_encoding(2, 2, 5), Err(Error::Config(_))));
        assert!(matches!(sinusoidal_encoding(2, 2, 2), Err(Error::Config(_))));
    }

    #[test]
    fn identity_warp_is_the_integer_grid() {
        let pe = sinusoidal_encoding(2, 2, 4).unwrap();
        let coords = warp_coordinates(&pe);
        let want = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)];
        for (i, w) in want.iter().enumerate() {
            assert_eq!(coords.node(i), *w);
        }
    }

    #[test]
    fn constant_offset_projection() {
        // A projection solving proj . enc(i) = (0, 0.5) for every node of the
        // 2x2 grid: shifts each column coordinate by 0.5.
        let (s1, c1) = ((1.0 as Real).sin(), (1.0 as Real).cos());
        let (b, d) = (0.25 as Real, 0.25 as Real);
        let a = b * (1.0 - c1) / s1;
        let c = d * (1.0 - c1) / s1;
        let proj = Tensor::new(&[2, 4], vec![0.0, 0.0, 0.0, 0.0, a, b, c, d]).unwrap();
        let pe = sinusoidal_encoding(2, 2, 4)
            .unwrap()
            .with_projection(proj, false)
            .unwrap();
        let coords = warp_coordinates(&pe);
        for i in 0..4 {
            let (r, col) = coords.node(i);
            assert!((r - (i / 2) as Real).abs() < 1e-6);
            assert!((col - ((i % 2) as Real + 0.5)).abs() < 1e-6);
        }
    }

    #[test]
    fn random_projection_matches_matrix_product() {
        let mut state = 99u64;
        let mut next = move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 33) as Real / (1u64 << 31) as Real) - 1.0
        };
        let proj_data: Vec<Real> = (0..2 * 8).map(|_| next()).collect();
        let proj = Tensor::new(&[2, 8], proj_data.clone()).unwrap();
        let pe = sinusoidal_encoding(4, 4, 8)
            .unwrap()
            .with_projection(proj, false)
            .unwrap();
        let coords = warp_coordinates(&pe);
        for i in 0..16 {
            let enc = pe.node(i).to_vec();
            let mut offset = [0.0 as Real; 2];
            for (r, off) in offset.iter_mut().enumerate() {
                for m in 0..8 {
                    *off += proj_data[r * 8 + m] * enc[m];
                }
            }
            let (r, c) = coords.node(i);
            assert!((r - ((i / 4) as Real + offset[0])).abs() < 1e-6);
            assert!((c - ((i % 4) as Real + offset[1])).abs() < 1e-6);
        }
    }

    #[test]
    fn knn_two_nodes() {
        let pe = sinusoidal_encoding(1, 2, 4).unwrap();
        let g = build_knn_graph(&warp_coordinates(&pe), 1).unwrap();
        assert_eq!(g.neighbors(0), &[0, 1]);
        assert_eq!(g.neighbors(1), &[1, 0]);
    }

    #[test]
    fn knn_square_excludes_diagonal() {
        // 2x2 grid, k = 2: each corner keeps itself and its two edge-adjacent
        // corners; the diagonal sits at sqrt(2) and is dropped.
        let pe = sinusoidal_encoding(2, 2, 4).unwrap();
        let g = build_knn_graph(&warp_coordinates(&pe), 2).unwrap();
        assert_eq!(g.neighbors(0), &[0, 1, 2]);
        assert_eq!(g.neighbors(1), &[1, 0, 3]);
        assert_eq!(g.neighbors(2), &[2, 0, 3]);
        assert_eq!(g.neighbors(3), &[3, 1, 2]);
    }

    #[test]
    fn knn_rejects_k_at_node_count() {
        let pe = sinusoidal_encoding(2, 2, 4).unwrap();
        let err = build_knn_graph(&warp_coordinates(&pe), 4).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn knn_matches_full_sort_oracle_under_random_warps() {
        let mut state = 7u64;
        let mut next = move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 33) as Real / (1u64 << 31) as Real) - 1.0
        };
        for h in 1..=5usize {
            for w in 1..=5usize {
                let n = h * w;
                for k in 1..=3usize.min(n.saturating_sub(1)) {
                    for _ in 0..5 {
                        let coords: Vec<Real> = (0..n)
                            .flat_map(|i| {
                                [
                                    (i / w) as Real + 0.4 * next(),
                                    (i % w) as Real + 0.4 * next(),
                                ]
                            })
                            .collect();
                        let wc = WarpedCoords::from_raw(h, w, coords).unwrap();
                        let g = build_knn_graph(&wc, k).unwrap();
                        let want = knn_oracle(&wc, k);
                        for i in 0..n {
                            assert_eq!(g.neighbors(i), want[i].as_slice(), "node {i}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn interior_nodes_take_axis_neighbors() {
        let pe = sinusoidal_encoding(5, 5, 4).unwrap();
        let g = build_knn_graph(&warp_coordinates(&pe), 4).unwrap();
        // Center node 12 of the 5x5 grid: up, left, self, right, down.
        let mut got = g.neighbors(12).to_vec();
        got.sort_unstable();
        assert_eq!(got, vec![7, 11, 12, 13, 17]);
    }

    #[test]
    fn static_topology_rebuild_is_bitwise_identical() {
        let proj = Tensor::zeros(&[2, 8]);
        let a = build_bottleneck_graph(6, 6, 4, 8, &proj, false).unwrap();
        let b = build_bottleneck_graph(6, 6, 4, 8, &proj, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn graph_conv_single_node_is_relu() {
        let wc = WarpedCoords::from_raw(1, 1, vec![0.0, 0.0]).unwrap();
        let g = build_knn_graph(&wc, 0).unwrap();
        let params = identity_params(2);
        let h = Tensor::new(&[1, 2], vec![-1.0, 2.0]).unwrap();
        let out = graph_conv_tensor(&h, &g, &params, false).unwrap();
        assert_eq!(out.data(), &[0.0, 2.0]);
    }

    #[test]
    fn graph_conv_sums_self_and_neighbor() {
        let pe = sinusoidal_encoding(1, 2, 4).unwrap();
        let g = build_knn_graph(&warp_coordinates(&pe), 1).unwrap();
        let params = identity_params(1);
        let h = Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap();
        let out = graph_conv_tensor(&h, &g, &params, false).unwrap();
        assert_eq!(out.data(), &[3.0, 3.0]);
    }

    /// Dense oracle: relu(A . H . W^T + b), A the 0/1 adjacency with self.
    fn dense_oracle(
        h: &Tensor,
        graph: &GridGraph,
        params: &GraphConvParams,
        mean: bool,
    ) -> Vec<Real> {
        let n = graph.num_nodes();
        let c = h.shape()[1];
        let mut agg = vec![0.0; n * c];
        for i in 0..n {
            let deg = graph.neighbors(i).len() as Real;
            for &j in graph.neighbors(i) {
                for ch in 0..c {
                    agg[i * c + ch] += h.data()[j as usize * c + ch];
                }
            }
            if mean {
                for ch in 0..c {
                    agg[i * c + ch] /= deg;
                }
            }
        }
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for o in 0..c {
                let mut acc = params.bias.data()[o];
                for ch in 0..c {
                    acc += params.weight.data()[o * c + ch] * agg[i * c + ch];
                }
                out[i * c + o] = acc.max(0.0);
            }
        }
        out
    }

    #[test]
    fn graph_conv_matches_dense_oracle() {
        let mut state = 1234u64;
        let mut next = move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 33) as Real / (1u64 << 31) as Real) - 1.0
        };
        let pe = sinusoidal_encoding(4, 4, 4).unwrap();
        let g = build_knn_graph(&warp_coordinates(&pe), 3).unwrap();
        let c = 5;
        let feats = Tensor::new(&[16, c], (0..16 * c).map(|_| next()).collect()).unwrap();
        let params = GraphConvParams::new(
            Tensor::new(&[c, c], (0..c * c).map(|_| next()).collect()).unwrap(),
            Tensor::new(&[c], (0..c).map(|_| next()).collect()).unwrap(),
        )
        .unwrap();
        for &mean in &[false, true] {
            let got = graph_conv_tensor(&feats, &g, &params, mean).unwrap();
            let want = dense_oracle(&feats, &g, &params, mean);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn graph_conv_is_permutation_equivariant() {
        let mut state = 77u64;
        let mut next = move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 33) as Real / (1u64 << 31) as Real) - 1.0
        };
        let pe = sinusoidal_encoding(3, 3, 4).unwrap();
        let g = build_knn_graph(&warp_coordinates(&pe), 3).unwrap();
        let c = 4;
        let n = 9;
        let feats = Tensor::new(&[n, c], (0..n * c).map(|_| next()).collect()).unwrap();
        let params = GraphConvParams::new(
            Tensor::new(&[c, c], (0..c * c).map(|_| next()).collect()).unwrap(),
            Tensor::new(&[c], (0..c).map(|_| next()).collect()).unwrap(),
        )
        .unwrap();
        let base = graph_conv_tensor(&feats, &g, &params, false).unwrap();

        // An arbitrary permutation: sigma[old] = new.
        let sigma = [4usize, 7, 0, 2, 8, 1, 5, 3, 6];
        let permuted_graph = g.permuted(&sigma);
        let mut pf = vec![0.0; n * c];
        for old in 0..n {
            pf[sigma[old] * c..(sigma[old] + 1) * c]
                .copy_from_slice(&feats.data()[old * c..(old + 1) * c]);
        }
        let permuted_feats = Tensor::new(&[n, c], pf).unwrap();
        let out = graph_conv_tensor(&permuted_feats, &permuted_graph, &params, false).unwrap();
        for old in 0..n {
            for ch in 0..c {
                let a = base.data()[old * c + ch];
                let b = out.data()[sigma[old] * c + ch];
                assert!((a - b).abs() < 1e-5, "node {old} ch {ch}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn bottleneck_single_node_is_relu_of_input() {
        let mut tape = Tape::new();
        let map = tape.leaf(&Tensor::new(&[3, 1, 1], vec![-0.5, 0.0, 1.5]).unwrap());
        let g = build_bottleneck_graph(1, 1, 8, 4, &Tensor::zeros(&[2, 4]), false).unwrap();
        let params = identity_params(3);
        let w = tape.leaf(&params.weight);
        let b = tape.leaf(&params.bias);
        let out = bottleneck_forward(&mut tape, map, &g, &[(w, b)], false).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0, 1.5]);
    }

    #[test]
    fn bottleneck_preserves_shape_and_composes() {
        let mut state = 31u64;
        let mut next = move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 33) as Real / (1u64 << 31) as Real) - 1.0
        };
        let (c, h, w) = (6, 16, 16);
        let map = Tensor::new(&[c, h, w], (0..c * h * w).map(|_| next()).collect()).unwrap();
        let g = build_bottleneck_graph(h, w, 8, 8, &Tensor::zeros(&[2, 8]), false).unwrap();
        let layers: Vec<GraphConvParams> = (0..2)
            .map(|_| {
                GraphConvParams::new(
                    Tensor::new(&[c, c], (0..c * c).map(|_| next() * 0.3).collect()).unwrap(),
                    Tensor::new(&[c], (0..c).map(|_| next() * 0.1).collect()).unwrap(),
                )
                .unwrap()
            })
            .collect();

        let mut tape = Tape::new();
        let m = tape.leaf(&map);
        let vars: Vec<(VarId, VarId)> = layers
            .iter()
            .map(|p| (tape.leaf(&p.weight), tape.leaf(&p.bias)))
            .collect();
        let out = bottleneck_forward(&mut tape, m, &g, &vars, false).unwrap();
        assert_eq!(tape.shape(out), &[c, h, w]);

        // Step-by-step composition on the flattened path.
        let mut feats = Tensor::new(
            &[h * w, c],
            (0..h * w * c)
                .map(|i| {
                    let (node, ch) = (i / c, i % c);
                    map.data()[ch * h * w + node]
                })
                .collect(),
        )
        .unwrap();
        for p in &layers {
            feats = graph_conv_tensor(&feats, &g, p, false).unwrap();
        }
        for node in 0..h * w {
            for ch in 0..c {
                let a = tape.value(out).data()[ch * h * w + node];
                let b = feats.data()[node * c + ch];
                assert!((a - b).abs() < 1e-5);
            }
        }
    }
}
