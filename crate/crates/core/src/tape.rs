//! Define-by-run reverse-mode differentiation. A [`Tape`] records every
//! operation of one forward pass; [`Tape::backward`] replays the records in
//! reverse, accumulating gradients additively wherever a value fed several
//! consumers. The tape is rebuilt on every forward pass, so graph topology is
//! free to vary between passes.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

/// Probability floor applied inside the cross-entropy log.
pub const PROB_FLOOR: Real = 1e-12;

#[derive(Clone)]
enum Op {
    Leaf,
    Add {
        a: VarId,
        b: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
    },
    Scale {
        x: VarId,
        factor: Real,
    },
    Sum {
        x: VarId,
    },
    Relu {
        x: VarId,
    },
    Conv2d {
        input: VarId,
        kernel: VarId,
        bias: VarId,
        geom: ConvGeom,
    },
    MaxPool2 {
        input: VarId,
        argmax: Arc<Vec<u32>>,
    },
    ConvTranspose2 {
        input: VarId,
        kernel: VarId,
        bias: VarId,
    },
    SoftmaxChannels {
        input: VarId,
    },
    Linear {
        x: VarId,
        weight: VarId,
        bias: VarId,
    },
    /// [C,H,W] map -> [H*W, C] node-feature matrix, nodes in row-major order.
    MapToNodes {
        input: VarId,
    },
    /// Inverse of MapToNodes.
    NodesToMap {
        input: VarId,
    },
    /// out[i] = sum (or mean) of rows listed in CSR row i.
    RowGatherSum {
        input: VarId,
        offsets: Arc<Vec<usize>>,
        neighbors: Arc<Vec<u32>>,
        mean: bool,
    },
    /// Mean over scored pixels of -log(pred[target]); pred is a distribution.
    CrossEntropyMean {
        pred: VarId,
        targets: Arc<Vec<i32>>,
        scored: usize,
    },
    /// Mean over scored pixels of sum_c cost[target][c] * pred[c].
    CostMean {
        pred: VarId,
        targets: Arc<Vec<i32>>,
        costs: Arc<Vec<Real>>,
        num_classes: usize,
        scored: usize,
    },
}

struct Node {
    tensor: Tensor,
    op: Op,
    /// True when a requires_grad leaf is reachable from this node.
    needs: bool,
}

/// Ordered record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copies a tensor onto the tape, honoring its requires_grad flag.
    pub fn leaf(&mut self, t: &Tensor) -> VarId {
        let needs = t.tracks_grad();
        self.push(t.clone(), Op::Leaf, needs)
    }

    /// Copies a tensor onto the tape with gradient tracking disabled.
    pub fn leaf_detached(&mut self, t: &Tensor) -> VarId {
        self.push(t.clone().requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    /// Gradient accumulated on a node by [`Tape::backward`]. Present only on
    /// requires_grad leaves (interior gradients are transient).
    pub fn grad(&self, id: VarId) -> Option<&[Real]> {
        self.nodes[id.0].tensor.grad()
    }

    fn push(&mut self, tensor: Tensor, op: Op, needs: bool) -> VarId {
        debug_assert!(tensor.is_finite(), "non-finite values in recorded tensor");
        self.nodes.push(Node { tensor, op, needs });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs
    }

    fn data(&self, id: VarId) -> &[Real] {
        self.nodes[id.0].tensor.data()
    }

    // ── Elementwise and reduction ops ────────────────────────────────

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<Real> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a), data).expect("same shape");
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mul: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<Real> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a), data).expect("same shape");
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: VarId, factor: Real) -> VarId {
        let data: Vec<Real> = self.data(x).iter().map(|v| v * factor).collect();
        let t = Tensor::new(self.shape(x), data).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Scale { x, factor }, needs)
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let total: Real = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, needs)
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let data: Vec<Real> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x), data).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Relu { x }, needs)
    }

    // ── Neural kernels ───────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        input: VarId,
        kernel: VarId,
        bias: VarId,
        stride: usize,
        padding: usize,
    ) -> Result<VarId> {
        let geom = ConvGeom::resolve(self.shape(input), self.shape(kernel), stride, padding)
            .map_err(Error::Shape)?;
        if self.shape(bias) != [geom.out_ch] {
            return Err(Error::Shape(format!(
                "conv2d bias shape {:?}, expected [{}]",
                self.shape(bias),
                geom.out_ch
            )));
        }
        let out = kernels::conv2d_forward(&geom, self.data(input), self.data(kernel), self.data(bias));
        let t = Tensor::new(&[geom.out_ch, geom.out_h, geom.out_w], out).expect("geom");
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            needs,
        ))
    }

    pub fn maxpool2(&mut self, input: VarId) -> Result<VarId> {
        let shape = self.shape(input);
        if shape.len() != 3 {
            return Err(Error::Shape(format!(
                "maxpool2 input must be [C,H,W], got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "maxpool2 requires even spatial dims, got {h}x{w}"
            )));
        }
        let (out, argmax) = kernels::maxpool2_forward(c, h, w, self.data(input));
        let t = Tensor::new(&[c, h / 2, w / 2], out).expect("halved");
        let needs = self.needs(input);
        Ok(self.push(
            t,
            Op::MaxPool2 {
                input,
                argmax: Arc::new(argmax),
            },
            needs,
        ))
    }

    pub fn conv_transpose2(&mut self, input: VarId, kernel: VarId, bias: VarId) -> Result<VarId> {
        let in_shape = self.shape(input);
        let k_shape = self.shape(kernel);
        if in_shape.len() != 3 {
            return Err(Error::Shape(format!(
                "conv_transpose2 input must be [C,H,W], got {in_shape:?}"
            )));
        }
        if k_shape.len() != 4 || k_shape[2] != 2 || k_shape[3] != 2 {
            return Err(Error::Config(format!(
                "conv_transpose2 requires a [out,in,2,2] kernel (stride 2), got {k_shape:?}"
            )));
        }
        if k_shape[1] != in_shape[0] {
            return Err(Error::Shape(format!(
                "conv_transpose2 kernel expects {} input channels, input has {}",
                k_shape[1], in_shape[0]
            )));
        }
        let (out_ch, in_ch, h, w) = (k_shape[0], in_shape[0], in_shape[1], in_shape[2]);
        if self.shape(bias) != [out_ch] {
            return Err(Error::Shape(format!(
                "conv_transpose2 bias shape {:?}, expected [{out_ch}]",
                self.shape(bias)
            )));
        }
        let out = kernels::conv_transpose2_forward(
            in_ch,
            out_ch,
            h,
            w,
            self.data(input),
            self.data(kernel),
            self.data(bias),
        );
        let t = Tensor::new(&[out_ch, 2 * h, 2 * w], out).expect("doubled");
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            t,
            Op::ConvTranspose2 {
                input,
                kernel,
                bias,
            },
            needs,
        ))
    }

    pub fn softmax_channels(&mut self, input: VarId) -> Result<VarId> {
        let shape = self.shape(input);
        if shape.len() != 3 || shape[0] == 0 {
            return Err(Error::Shape(format!(
                "softmax_channels input must be [C,H,W] with C >= 1, got {shape:?}"
            )));
        }
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let out = kernels::softmax_channels_forward(c, hw, self.data(input));
        let t = Tensor::new(shape, out).expect("same shape");
        let needs = self.needs(input);
        Ok(self.push(t, Op::SoftmaxChannels { input }, needs))
    }

    pub fn linear(&mut self, x: VarId, weight: VarId, bias: VarId) -> Result<VarId> {
        let xs = self.shape(x);
        let ws = self.shape(weight);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Shape(format!(
                "linear: x {xs:?} incompatible with weight {ws:?}"
            )));
        }
        let (n, c_in, c_out) = (xs[0], xs[1], ws[0]);
        if self.shape(bias) != [c_out] {
            return Err(Error::Shape(format!(
                "linear bias shape {:?}, expected [{c_out}]",
                self.shape(bias)
            )));
        }
        let out = kernels::linear_forward(n, c_in, c_out, self.data(x), self.data(weight), self.data(bias));
        let t = Tensor::new(&[n, c_out], out).expect("n x c_out");
        let needs = self.needs(x) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            t,
            Op::Linear {
                x,
                weight,
                bias,
            },
            needs,
        ))
    }

    // ── Layout and graph ops ─────────────────────────────────────────

    pub fn map_to_nodes(&mut self, input: VarId) -> Result<VarId> {
        let shape = self.shape(input);
        if shape.len() != 3 {
            return Err(Error::Shape(format!(
                "map_to_nodes input must be [C,H,W], got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let src = self.data(input);
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                out[p * c + ch] = src[ch * h * w + p];
            }
        }
        let t = Tensor::new(&[h * w, c], out).expect("transposed");
        let needs = self.needs(input);
        Ok(self.push(t, Op::MapToNodes { input }, needs))
    }

    pub fn nodes_to_map(&mut self, input: VarId, h: usize, w: usize) -> Result<VarId> {
        let shape = self.shape(input);
        if shape.len() != 2 || shape[0] != h * w {
            return Err(Error::Shape(format!(
                "nodes_to_map input must be [{}x{}, C], got {shape:?}",
                h, w
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        let src = self.data(input);
        let mut out = vec![0.0; n * c];
        for p in 0..n {
            for ch in 0..c {
                out[ch * n + p] = src[p * c + ch];
            }
        }
        let t = Tensor::new(&[c, h, w], out).expect("transposed");
        let needs = self.needs(input);
        Ok(self.push(t, Op::NodesToMap { input }, needs))
    }

    pub fn row_gather_sum(
        &mut self,
        input: VarId,
        offsets: Arc<Vec<usize>>,
        neighbors: Arc<Vec<u32>>,
        mean: bool,
    ) -> Result<VarId> {
        let shape = self.shape(input);
        if shape.len() != 2 || shape[0] + 1 != offsets.len() {
            return Err(Error::Shape(format!(
                "row_gather_sum: features {shape:?} vs {} adjacency rows",
                offsets.len().saturating_sub(1)
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        let src = self.data(input);
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &neighbors[offsets[i]..offsets[i + 1]];
            let dst = &mut out[i * c..(i + 1) * c];
            for &j in row {
                let s = &src[j as usize * c..(j as usize + 1) * c];
                for (d, v) in dst.iter_mut().zip(s) {
                    *d += v;
                }
            }
            if mean && !row.is_empty() {
                let inv = 1.0 / row.len() as Real;
                for d in dst.iter_mut() {
                    *d *= inv;
                }
            }
        }
        let t = Tensor::new(&[n, c], out).expect("n x c");
        let needs = self.needs(input);
        Ok(self.push(
            t,
            Op::RowGatherSum {
                input,
                offsets,
                neighbors,
                mean,
            },
            needs,
        ))
    }

    // ── Losses ───────────────────────────────────────────────────────

    /// `targets` holds one class index per pixel in row-major order, -1 for
    /// ignored pixels. `pred` must already be a per-pixel distribution.
    pub fn cross_entropy_mean(&mut self, pred: VarId, targets: Arc<Vec<i32>>) -> Result<VarId> {
        let (c, hw) = self.check_loss_shapes(pred, &targets)?;
        let scored = targets.iter().filter(|&&t| t >= 0).count();
        if scored == 0 {
            return Err(Error::Degenerate(
                "cross_entropy: every pixel is ignored".to_string(),
            ));
        }
        let data = self.data(pred);
        let mut total = 0.0;
        for (p, &t) in targets.iter().enumerate() {
            if t < 0 {
                continue;
            }
            debug_assert!((t as usize) < c, "target class out of range");
            total -= data[t as usize * hw + p].max(PROB_FLOOR).ln();
        }
        let loss = total / scored as Real;
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyMean {
                pred,
                targets,
                scored,
            },
            needs,
        ))
    }

    /// Mean per-pixel transport cost of the predicted distribution against
    /// one-hot targets, with `costs` a row-major [C,C] matrix.
    pub fn cost_mean(
        &mut self,
        pred: VarId,
        targets: Arc<Vec<i32>>,
        costs: Arc<Vec<Real>>,
    ) -> Result<VarId> {
        let (c, hw) = self.check_loss_shapes(pred, &targets)?;
        if costs.len() != c * c {
            return Err(Error::Shape(format!(
                "cost matrix has {} entries, expected {}x{}",
                costs.len(),
                c,
                c
            )));
        }
        let scored = targets.iter().filter(|&&t| t >= 0).count();
        if scored == 0 {
            return Err(Error::Degenerate(
                "gwd_loss: every pixel is ignored".to_string(),
            ));
        }
        let data = self.data(pred);
        let mut total = 0.0;
        for (p, &t) in targets.iter().enumerate() {
            if t < 0 {
                continue;
            }
            let row = &costs[t as usize * c..(t as usize + 1) * c];
            for (ch, &m) in row.iter().enumerate() {
                total += m * data[ch * hw + p];
            }
        }
        let loss = total / scored as Real;
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CostMean {
                pred,
                targets,
                costs,
                num_classes: c,
                scored,
            },
            needs,
        ))
    }

    fn check_loss_shapes(&self, pred: VarId, targets: &[i32]) -> Result<(usize, usize)> {
        let shape = self.shape(pred);
        if shape.len() != 3 {
            return Err(Error::Shape(format!(
                "loss input must be [C,H,W], got {shape:?}"
            )));
        }
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        if targets.len() != hw {
            return Err(Error::Shape(format!(
                "loss targets: {} pixels, prediction has {}",
                targets.len(),
                hw
            )));
        }
        Ok((c, hw))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Distance of this pass from the nearest piecewise boundary: the
    /// smallest |x| feeding any ReLU and the smallest winner-to-runner-up
    /// gap in any max-pool window. Finite-difference checks use this to
    /// steer sample points away from kinks.
    pub fn smoothness_margin(&self) -> Real {
        let mut margin = Real::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for v in self.nodes[x.0].tensor.data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::MaxPool2 { input, .. } => {
                    let t = &self.nodes[input.0].tensor;
                    let s = t.shape();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    for ch in 0..c {
                        for oy in 0..h / 2 {
                            for ox in 0..w / 2 {
                                let mut vals = [0.0; 4];
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        vals[dy * 2 + dx] =
                                            t.data()[(ch * h + 2 * oy + dy) * w + 2 * ox + dx];
                                    }
                                }
                                vals.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
                                margin = margin.min(vals[0] - vals[1]);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every
    /// requires_grad leaf reachable from it. Consumes the tape's ability to
    /// run backward again; a fresh forward needs a fresh tape.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; rebuild the tape for a new pass".to_string(),
            ));
        }
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<Real>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs {
                vjp(&self.nodes, i, &g, &mut grads);
                if self.nodes[i].tensor.tracks_grad() {
                    self.nodes[i].tensor.set_grad(Some(g));
                }
            }
        }
        Ok(())
    }
}

/// Fetch-or-init the gradient accumulator for `id`, skipping nodes that no
/// tracked leaf feeds.
fn accum<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<Real>>],
    id: VarId,
) -> Option<&'a mut Vec<Real>> {
    if !nodes[id.0].needs {
        return None;
    }
    Some(grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].tensor.numel()]))
}

fn vjp(nodes: &[Node], idx: usize, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
    // Single-use helpers to keep the match arms short.
    let val = |id: VarId| nodes[id.0].tensor.data();
    let shp = |id: VarId| nodes[id.0].tensor.shape();

    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            for &side in &[*a, *b] {
                if let Some(dst) = accum(nodes, grads, side) {
                    for (d, gi) in dst.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
        }
        Op::Mul { a, b } => {
            let (a, b) = (*a, *b);
            if nodes[a.0].needs {
                let bv: Vec<Real> = val(b).to_vec();
                let dst = accum(nodes, grads, a).expect("needs");
                for ((d, gi), bvi) in dst.iter_mut().zip(g).zip(&bv) {
                    *d += gi * bvi;
                }
            }
            if nodes[b.0].needs {
                let av: Vec<Real> = val(a).to_vec();
                let dst = accum(nodes, grads, b).expect("needs");
                for ((d, gi), avi) in dst.iter_mut().zip(g).zip(&av) {
                    *d += gi * avi;
                }
            }
        }
        Op::Scale { x, factor } => {
            let f = *factor;
            if let Some(dst) = accum(nodes, grads, *x) {
                for (d, gi) in dst.iter_mut().zip(g) {
                    *d += gi * f;
                }
            }
        }
        Op::Sum { x } => {
            let go = g[0];
            if let Some(dst) = accum(nodes, grads, *x) {
                for d in dst.iter_mut() {
                    *d += go;
                }
            }
        }
        Op::Relu { x } => {
            let x = *x;
            if nodes[x.0].needs {
                let xv: Vec<Real> = val(x).to_vec();
                let dst = accum(nodes, grads, x).expect("needs");
                for ((d, gi), xi) in dst.iter_mut().zip(g).zip(&xv) {
                    if *xi > 0.0 {
                        *d += gi;
                    }
                }
            }
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
        } => {
            let (input, kernel, bias, geom) = (*input, *kernel, *bias, *geom);
            let in_v = val(input).to_vec();
            let k_v = val(kernel).to_vec();
            let mut d_in = vec![0.0; in_v.len()];
            let mut d_k = vec![0.0; k_v.len()];
            let mut d_b = vec![0.0; geom.out_ch];
            kernels::conv2d_backward(&geom, &in_v, &k_v, g, &mut d_in, &mut d_k, &mut d_b);
            add_into(nodes, grads, input, &d_in);
            add_into(nodes, grads, kernel, &d_k);
            add_into(nodes, grads, bias, &d_b);
        }
        Op::MaxPool2 { input, argmax } => {
            let argmax = Arc::clone(argmax);
            if let Some(dst) = accum(nodes, grads, *input) {
                kernels::maxpool2_backward(&argmax, g, dst);
            }
        }
        Op::ConvTranspose2 {
            input,
            kernel,
            bias,
        } => {
            let (input, kernel, bias) = (*input, *kernel, *bias);
            let in_shape = shp(input).to_vec();
            let k_shape = shp(kernel).to_vec();
            let (in_ch, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            let out_ch = k_shape[0];
            let in_v = val(input).to_vec();
            let k_v = val(kernel).to_vec();
            let mut d_in = vec![0.0; in_v.len()];
            let mut d_k = vec![0.0; k_v.len()];
            let mut d_b = vec![0.0; out_ch];
            kernels::conv_transpose2_backward(
                in_ch, out_ch, h, w, &in_v, &k_v, g, &mut d_in, &mut d_k, &mut d_b,
            );
            add_into(nodes, grads, input, &d_in);
            add_into(nodes, grads, kernel, &d_k);
            add_into(nodes, grads, bias, &d_b);
        }
        Op::SoftmaxChannels { input } => {
            let input = *input;
            if nodes[input.0].needs {
                let out_shape = shp(input).to_vec();
                let (c, hw) = (out_shape[0], out_shape[1] * out_shape[2]);
                let y: Vec<Real> = nodes[idx].tensor.data().to_vec();
                let dst = accum(nodes, grads, input).expect("needs");
                kernels::softmax_channels_backward(c, hw, &y, g, dst);
            }
        }
        Op::Linear {
            x,
            weight,
            bias,
        } => {
            let (x, weight, bias) = (*x, *weight, *bias);
            let xs = shp(x).to_vec();
            let ws = shp(weight).to_vec();
            let (n, c_in, c_out) = (xs[0], xs[1], ws[0]);
            let x_v = val(x).to_vec();
            let w_v = val(weight).to_vec();
            let mut d_x = vec![0.0; x_v.len()];
            let mut d_w = vec![0.0; w_v.len()];
            let mut d_b = vec![0.0; c_out];
            kernels::linear_backward(n, c_in, c_out, &x_v, &w_v, g, &mut d_x, &mut d_w, &mut d_b);
            add_into(nodes, grads, x, &d_x);
            add_into(nodes, grads, weight, &d_w);
            add_into(nodes, grads, bias, &d_b);
        }
        Op::MapToNodes { input } => {
            let input = *input;
            if nodes[input.0].needs {
                let s = shp(input).to_vec();
                let (c, hw) = (s[0], s[1] * s[2]);
                let dst = accum(nodes, grads, input).expect("needs");
                for p in 0..hw {
                    for ch in 0..c {
                        dst[ch * hw + p] += g[p * c + ch];
                    }
                }
            }
        }
        Op::NodesToMap { input } => {
            let input = *input;
            if nodes[input.0].needs {
                let s = shp(input).to_vec();
                let (n, c) = (s[0], s[1]);
                let dst = accum(nodes, grads, input).expect("needs");
                for p in 0..n {
                    for ch in 0..c {
                        dst[p * c + ch] += g[ch * n + p];
                    }
                }
            }
        }
        Op::RowGatherSum {
            input,
            offsets,
            neighbors,
            mean,
        } => {
            let input = *input;
            if nodes[input.0].needs {
                let offsets = Arc::clone(offsets);
                let neighbors = Arc::clone(neighbors);
                let mean = *mean;
                let c = shp(input)[1];
                let n = offsets.len() - 1;
                let dst = accum(nodes, grads, input).expect("needs");
                for i in 0..n {
                    let row = &neighbors[offsets[i]..offsets[i + 1]];
                    let scale = if mean && !row.is_empty() {
                        1.0 / row.len() as Real
                    } else {
                        1.0
                    };
                    let gi = &g[i * c..(i + 1) * c];
                    for &j in row {
                        let d = &mut dst[j as usize * c..(j as usize + 1) * c];
                        for (dv, gv) in d.iter_mut().zip(gi) {
                            *dv += gv * scale;
                        }
                    }
                }
            }
        }
        Op::CrossEntropyMean {
            pred,
            targets,
            scored,
        } => {
            let pred = *pred;
            if nodes[pred.0].needs {
                let targets = Arc::clone(targets);
                let scored = *scored;
                let s = shp(pred).to_vec();
                let hw = s[1] * s[2];
                let pv: Vec<Real> = val(pred).to_vec();
                let go = g[0];
                let dst = accum(nodes, grads, pred).expect("needs");
                for (p, &t) in targets.iter().enumerate() {
                    if t < 0 {
                        continue;
                    }
                    let i = t as usize * hw + p;
                    // Below the floor the loss is constant in the prediction.
                    if pv[i] > PROB_FLOOR {
                        dst[i] -= go / (scored as Real * pv[i]);
                    }
                }
            }
        }
        Op::CostMean {
            pred,
            targets,
            costs,
            num_classes,
            scored,
        } => {
            let pred = *pred;
            if nodes[pred.0].needs {
                let targets = Arc::clone(targets);
                let costs = Arc::clone(costs);
                let (c, scored) = (*num_classes, *scored);
                let s = shp(pred).to_vec();
                let hw = s[1] * s[2];
                let go = g[0];
                let dst = accum(nodes, grads, pred).expect("needs");
                for (p, &t) in targets.iter().enumerate() {
                    if t < 0 {
                        continue;
                    }
                    let row = &costs[t as usize * c..(t as usize + 1) * c];
                    for (ch, &m) in row.iter().enumerate() {
                        dst[ch * hw + p] += go * m / scored as Real;
                    }
                }
            }
        }
    }
}

fn add_into(nodes: &[Node], grads: &mut [Option<Vec<Real>>], id: VarId, contrib: &[Real]) {
    if let Some(dst) = accum(nodes, grads, id) {
        for (d, v) in dst.iter_mut().zip(contrib) {
            *d += v;
        }
    }
}
