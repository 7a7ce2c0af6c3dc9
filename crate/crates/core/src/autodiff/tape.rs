//! Wengert tape over matrix-valued nodes.
//!
//! Every node holds a row-major `rows x cols` block of f64. Ops are
//! evaluated when recorded; `backward` replays the list in reverse and
//! routes gradients to parents, flushing parameter gradients into the
//! [`ParamStore`]. Nodes are in topological order by construction since a
//! parent `NodeId` must exist before it can be referenced.

use super::optim::{ParamId, ParamStore};
use super::sigmoid;
use rayon::prelude::*;

/// Index of a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(u32);

/// One gather row: the 8 cell-corner embedding params of a covered sample
/// and the sample's fractional position inside the cell.
#[derive(Debug, Clone)]
pub struct TrilerpRow {
    pub corners: [ParamId; 8],
    pub frac: [f64; 3],
}

/// Interpolation plan for a batch of covered sample positions.
#[derive(Debug, Clone)]
pub struct TrilerpPlan {
    pub rows: Vec<TrilerpRow>,
    pub embedding_dim: usize,
    /// 1 / voxel_size, chains cell-fraction gradients to world coordinates.
    pub inv_voxel_size: f64,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param { id: ParamId, frozen: bool },
    /// y = x * w^T + b, with w of shape (out, in) and b broadcast over rows.
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Scale { x: NodeId, k: f64 },
    AddScalar { x: NodeId, k: f64 },
    Square { x: NodeId },
    Abs { x: NodeId },
    Sqrt { x: NodeId },
    Sin { x: NodeId },
    Cos { x: NodeId },
    Sum { x: NodeId },
    ConcatCols { a: NodeId, b: NodeId },
    SelectRows { x: NodeId, idx: Vec<usize> },
    /// Per-row segment reduction; `seg[r]` is the output row of input row r.
    SegmentSum { x: NodeId, seg: Vec<usize> },
    /// out[r][j] = x[r][j] / c[r], c one column.
    DivByCol { x: NodeId, c: NodeId },
    /// out[r][j] = x[r][j] * c[r], c one column.
    MulByCol { x: NodeId, c: NodeId },
    Get { x: NodeId, index: usize },
    StackScalars { parts: Vec<NodeId> },
    /// out[r] = R * pts[r] + t for constant points (B x 3).
    RotTranslate { pts: Vec<f64>, r: NodeId, t: NodeId },
    /// Trilinear gather of voxel embeddings at positions `pos` (B x 3).
    /// Corner values are snapshotted at record time so backward does not
    /// depend on params mutated after recording.
    TrilerpGather {
        pos: NodeId,
        plan: TrilerpPlan,
        corner_values: Vec<f64>,
        frozen_corners: bool,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Append-only record of primitive operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// y (m x n) = a (m x k) * b^T where b is (n x k). Rows of both operands are
/// contiguous, so the inner product vectorizes.
pub fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let body = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for t in 0..k {
                acc += a_row[t] * b_row[t];
            }
            *o = acc;
        }
    };
    if m >= 256 {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
}

/// out (m x n) += a (m x k) * b (k x n).
pub fn gemm_nn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let body = |(i, out_row): (usize, &mut [f64])| {
        for t in 0..k {
            let aik = a[i * k + t];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[t * n..(t + 1) * n];
            for j in 0..n {
                out_row[j] += aik * b_row[j];
            }
        }
    };
    if m >= 256 {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
}

/// out (k x n) += a^T * b for a (m x k), b (m x n). Each output row is owned
/// by one iteration order, keeping the reduction deterministic.
pub fn gemm_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let body = |(c, out_row): (usize, &mut [f64])| {
        for r in 0..m {
            let arc = a[r * k + c];
            if arc == 0.0 {
                continue;
            }
            let b_row = &b[r * n..(r + 1) * n];
            for j in 0..n {
                out_row[j] += arc * b_row[j];
            }
        }
    };
    if k >= 8 && m >= 256 {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
}

fn trilerp_weights(frac: &[f64; 3]) -> [f64; 8] {
    let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
    let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
    // Corner order: bit 0 = x, bit 1 = y, bit 2 = z.
    [
        gx * gy * gz,
        fx * gy * gz,
        gx * fy * gz,
        fx * fy * gz,
        gx * gy * fz,
        fx * gy * fz,
        gx * fy * fz,
        fx * fy * fz,
    ]
}

/// d(weight_k)/d(frac_axis) for all 8 corners.
fn trilerp_weight_grads(frac: &[f64; 3]) -> [[f64; 3]; 8] {
    let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
    let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
    let mut out = [[0.0; 3]; 8];
    for (c, slot) in out.iter_mut().enumerate() {
        let (sx, wx) = if c & 1 != 0 { (1.0, fx) } else { (-1.0, gx) };
        let (sy, wy) = if c & 2 != 0 { (1.0, fy) } else { (-1.0, gy) };
        let (sz, wz) = if c & 4 != 0 { (1.0, fz) } else { (-1.0, gz) };
        slot[0] = sx * wy * wz;
        slot[1] = wx * sy * wz;
        slot[2] = wx * wy * sz;
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn rows(&self, id: NodeId) -> usize {
        self.nodes[id.0 as usize].rows
    }

    pub fn cols(&self, id: NodeId) -> usize {
        self.nodes[id.0 as usize].cols
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0 as usize].data
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let n = &self.nodes[id.0 as usize];
        assert!(n.rows == 1 && n.cols == 1, "scalar() on {}x{} node", n.rows, n.cols);
        n.data[0]
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, needs_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(data.len(), rows * cols);
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { rows, cols, data, needs_grad, op });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0 as usize].needs_grad
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0 as usize];
        (n.rows, n.cols)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> NodeId {
        self.push(rows, cols, data, false, Op::Constant)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(1, 1, vec![v])
    }

    /// Leaf node for a trainable parameter, laid out as one row.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let v = store.value(id).to_vec();
        let n = v.len();
        self.push(1, n, v, true, Op::Param { id, frozen: false })
    }

    /// Parameter leaf excluded from gradient flow (weights held fixed while
    /// some other quantity is optimized).
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let v = store.value(id).to_vec();
        let n = v.len();
        self.push(1, n, v, false, Op::Param { id, frozen: true })
    }

    /// Parameter leaf reinterpreted as an (out x in) matrix.
    pub fn param_matrix(
        &mut self,
        store: &ParamStore,
        id: ParamId,
        out_dim: usize,
        in_dim: usize,
        frozen: bool,
    ) -> NodeId {
        let v = store.value(id).to_vec();
        assert_eq!(v.len(), out_dim * in_dim, "param shape mismatch");
        self.push(out_dim, in_dim, v, !frozen, Op::Param { id, frozen })
    }

    /// Affine map y = x * w^T + b. Dimension mismatches are programming
    /// errors and panic.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (bs, in_dim) = self.shape(x);
        let (out_dim, w_in) = self.shape(w);
        let (br, bc) = self.shape(b);
        assert_eq!(in_dim, w_in, "linear: input dim {in_dim} vs weight dim {w_in}");
        assert!(br == 1 && bc == out_dim, "linear: bias {br}x{bc} vs out {out_dim}");
        let mut data = vec![0.0; bs * out_dim];
        gemm_nt(
            &self.nodes[x.0 as usize].data,
            &self.nodes[w.0 as usize].data,
            bs,
            in_dim,
            out_dim,
            &mut data,
        );
        let bias = &self.nodes[b.0 as usize].data;
        for row in data.chunks_mut(out_dim) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(bs, out_dim, data, ng, Op::Linear { x, w, b })
    }

    fn unary<F: Fn(f64) -> f64>(&mut self, x: NodeId, f: F, op: Op) -> NodeId {
        let (r, c) = self.shape(x);
        let data = self.nodes[x.0 as usize].data.iter().map(|&v| f(v)).collect();
        let ng = self.needs(x);
        self.push(r, c, data, ng, op)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v * v, Op::Square { x })
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::abs, Op::Abs { x })
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::sqrt, Op::Sqrt { x })
    }

    pub fn sin(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::sin, Op::Sin { x })
    }

    pub fn cos(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::cos, Op::Cos { x })
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        self.unary(x, |v| v * k, Op::Scale { x, k })
    }

    pub fn add_scalar(&mut self, x: NodeId, k: f64) -> NodeId {
        self.unary(x, |v| v + k, Op::AddScalar { x, k })
    }

    fn binary<F: Fn(f64, f64) -> f64>(&mut self, a: NodeId, b: NodeId, f: F, op: Op) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "elementwise op shape mismatch");
        let data = self.nodes[a.0 as usize]
            .data
            .iter()
            .zip(&self.nodes[b.0 as usize].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(r, c, data, ng, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x / y, Op::Div { a, b })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0 as usize].data.iter().sum();
        let ng = self.needs(x);
        self.push(1, 1, vec![s], ng, Op::Sum { x })
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ra, rb, "concat_cols row mismatch");
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&self.nodes[a.0 as usize].data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&self.nodes[b.0 as usize].data[r * cb..(r + 1) * cb]);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(ra, ca + cb, data, ng, Op::ConcatCols { a, b })
    }

    pub fn select_rows(&mut self, x: NodeId, idx: Vec<usize>) -> NodeId {
        let (r, c) = self.shape(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            assert!(i < r, "select_rows index out of range");
            data.extend_from_slice(&self.nodes[x.0 as usize].data[i * c..(i + 1) * c]);
        }
        let ng = self.needs(x);
        let rows = idx.len();
        self.push(rows, c, data, ng, Op::SelectRows { x, idx })
    }

    /// Sum input rows into `n_seg` output rows according to `seg`.
    pub fn segment_sum(&mut self, x: NodeId, seg: Vec<usize>, n_seg: usize) -> NodeId {
        let (r, c) = self.shape(x);
        assert_eq!(seg.len(), r, "segment id per input row");
        let mut data = vec![0.0; n_seg * c];
        for (row, &s) in seg.iter().enumerate() {
            assert!(s < n_seg);
            for j in 0..c {
                data[s * c + j] += self.nodes[x.0 as usize].data[row * c + j];
            }
        }
        let ng = self.needs(x);
        self.push(n_seg, c, data, ng, Op::SegmentSum { x, seg })
    }

    pub fn div_by_col(&mut self, x: NodeId, c: NodeId) -> NodeId {
        let (r, k) = self.shape(x);
        assert_eq!(self.shape(c), (r, 1), "div_by_col denominator shape");
        let mut data = Vec::with_capacity(r * k);
        for row in 0..r {
            let d = self.nodes[c.0 as usize].data[row];
            for j in 0..k {
                data.push(self.nodes[x.0 as usize].data[row * k + j] / d);
            }
        }
        let ng = self.needs(x) || self.needs(c);
        self.push(r, k, data, ng, Op::DivByCol { x, c })
    }

    pub fn mul_by_col(&mut self, x: NodeId, c: NodeId) -> NodeId {
        let (r, k) = self.shape(x);
        assert_eq!(self.shape(c), (r, 1), "mul_by_col column shape");
        let mut data = Vec::with_capacity(r * k);
        for row in 0..r {
            let m = self.nodes[c.0 as usize].data[row];
            for j in 0..k {
                data.push(self.nodes[x.0 as usize].data[row * k + j] * m);
            }
        }
        let ng = self.needs(x) || self.needs(c);
        self.push(r, k, data, ng, Op::MulByCol { x, c })
    }

    /// Extract one element as a 1x1 node, by flat row-major index.
    pub fn get(&mut self, x: NodeId, index: usize) -> NodeId {
        let v = self.nodes[x.0 as usize].data[index];
        let ng = self.needs(x);
        self.push(1, 1, vec![v], ng, Op::Get { x, index })
    }

    /// Pack 1x1 nodes into a rows x cols block, row-major.
    pub fn stack_scalars(&mut self, parts: &[NodeId], rows: usize, cols: usize) -> NodeId {
        assert_eq!(parts.len(), rows * cols);
        let data: Vec<f64> = parts.iter().map(|&p| self.scalar(p)).collect();
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(rows, cols, data, ng, Op::StackScalars { parts: parts.to_vec() })
    }

    /// out[r] = R * pts[r] + t, with constant points and 3x3 / 1x3 nodes.
    pub fn rot_translate(&mut self, pts: Vec<f64>, r: NodeId, t: NodeId) -> NodeId {
        assert_eq!(self.shape(r), (3, 3));
        assert_eq!(self.shape(t), (1, 3));
        assert_eq!(pts.len() % 3, 0);
        let n = pts.len() / 3;
        let rm = &self.nodes[r.0 as usize].data;
        let tv = &self.nodes[t.0 as usize].data;
        let mut data = Vec::with_capacity(pts.len());
        for p in pts.chunks_exact(3) {
            for i in 0..3 {
                data.push(rm[i * 3] * p[0] + rm[i * 3 + 1] * p[1] + rm[i * 3 + 2] * p[2] + tv[i]);
            }
        }
        let ng = self.needs(r) || self.needs(t);
        self.push(n, 3, data, ng, Op::RotTranslate { pts, r, t })
    }

    /// Interpolate voxel embeddings at the planned positions. Positions and
    /// corner embeddings both receive gradients; during tracking the plan's
    /// corner params are left frozen by the caller via `frozen_corners`.
    pub fn trilerp_gather(
        &mut self,
        store: &ParamStore,
        pos: NodeId,
        plan: TrilerpPlan,
        frozen_corners: bool,
    ) -> NodeId {
        let (r, c) = self.shape(pos);
        assert_eq!(c, 3, "positions must be B x 3");
        assert_eq!(plan.rows.len(), r, "one plan row per position");
        let dim = plan.embedding_dim;
        let mut data = vec![0.0; r * dim];
        for (row, pr) in plan.rows.iter().enumerate() {
            let w = trilerp_weights(&pr.frac);
            let out = &mut data[row * dim..(row + 1) * dim];
            for (k, &cid) in pr.corners.iter().enumerate() {
                let e = store.value(cid);
                debug_assert_eq!(e.len(), dim);
                for (o, &ev) in out.iter_mut().zip(e) {
                    *o += w[k] * ev;
                }
            }
        }
        let ng = self.needs(pos) || !frozen_corners;
        let mut corner_values = Vec::with_capacity(r * 8 * dim);
        for pr in &plan.rows {
            for &cid in &pr.corners {
                corner_values.extend_from_slice(store.value(cid));
            }
        }
        self.push(
            r,
            dim,
            data,
            ng,
            Op::TrilerpGather { pos, plan, corner_values, frozen_corners },
        )
    }

    /// Accumulate d(output)/d(param) into `store` for every parameter the
    /// scalar `output` depends on. Node gradients are rebuilt per call, so
    /// repeated calls add into the store (accumulation semantics).
    pub fn backward(&self, output: NodeId, store: &mut ParamStore) {
        let n = &self.nodes[output.0 as usize];
        assert!(n.rows == 1 && n.cols == 1, "backward seed must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0 as usize] = Some(vec![1.0]);
        for i in (0..=output.0 as usize).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads, store);
        }
    }

    fn grad_slot<'a>(
        grads: &'a mut [Option<Vec<f64>>],
        nodes: &[Node],
        id: NodeId,
    ) -> &'a mut Vec<f64> {
        let idx = id.0 as usize;
        let len = nodes[idx].rows * nodes[idx].cols;
        grads[idx].get_or_insert_with(|| vec![0.0; len])
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Constant => {}
            Op::Param { id, frozen } => {
                if !frozen {
                    store.accumulate_grad(*id, g);
                }
            }
            Op::Linear { x, w, b } => {
                let (bs, in_dim) = self.shape(*x);
                let (out_dim, _) = self.shape(*w);
                if self.needs(*x) {
                    let wv = &self.nodes[w.0 as usize].data;
                    let gx = Self::grad_slot(grads, &self.nodes, *x);
                    gemm_nn_acc(g, wv, bs, out_dim, in_dim, gx);
                }
                if self.needs(*w) {
                    let xv = &self.nodes[x.0 as usize].data;
                    let gw = Self::grad_slot(grads, &self.nodes, *w);
                    gemm_tn_acc(g, xv, bs, out_dim, in_dim, gw);
                }
                if self.needs(*b) {
                    let gb = Self::grad_slot(grads, &self.nodes, *b);
                    for row in g.chunks_exact(out_dim) {
                        for (o, gv) in gb.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let y = &node.data;
                    let gx = Self::grad_slot(grads, &self.nodes, *x);
                    for (k, gv) in g.iter().enumerate() {
                        if y[k] > 0.0 {
                            gx[k] += gv;
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if self.needs(*x) {
                    let y = &node.data;
                    let gx = Self::grad_slot(grads, &self.nodes, *x);
                    for (k, gv) in g.iter().enumerate() {
                        gx[k] += gv * y[k] * (1.0 - y[k]);
                    }
                }
            }
            Op::Add { a, b } => {
                for &p in &[*a, *b] {
                    if self.needs(p) {
                        let gp = Self::grad_slot(grads, &self.nodes, p);
                        for (o, gv) in gp.iter_mut().zip(g) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    let ga = Self::grad_slot(grads, &self.nodes, *a);
                    for (o, gv) in ga.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if self.needs(*b) {
                    let gb = Self::grad_slot(grads, &self.nodes, *b);
                    for (o, gv) in gb.iter_mut().zip(g) {
                        *o -= gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bv = &self.nodes[b.0 as usize].data;
                    let ga = Self::grad_slot(grads, &self.nodes, *a);
                    for k in 0..g.len() {
                        ga[k] += g[k] * bv[k];
                    }
                }
                if self.needs(*b) {
                    let av = &self.nodes[a.0 as usize].data;
                    let gb = Self::grad_slot(grads, &self.nodes, *b);
                    for k in 0..g.len() {
                        gb[k] += g[k] * av[k];
                    }
                }
            }
            Op::Div { a, b } => {
                let av = &self.nodes[a.0 as usize].data;
                let bv = &self.nodes[b.0 as usize].data;
                if self.needs(*a) {
                    let ga = Self::grad_slot(grads, &self.nodes, *a);
                    for k in 0..g.len() {
                        ga[k] += g[k] / bv[k];
                    }
                }
                if self.needs(*b) {
                    let gb = Self::grad_slot(grads, &self.nodes, *b);
                    for k in 0..g.len() {
                        gb[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                    }
                }
            }
            Op::Scale { x, k } => {
                if self.needs(*x) {
                    let gx = Self::grad_slot(grads, &self.nodes, *x);
                    for (o, gv) in gx.iter_mut().zip(g) {
                        *o += gv * k;
                    }
                }
            }
            Op::AddScalar { x, .. } => {
                if self.needs(*x) {
                    let gx = Self::grad_slot(grads, &self.nodes, *x);
                    for (o, gv) in gx.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }
            Op::Square { x } => {
                if self.needs(*x) {
                    let xv = &self.nodes[x.0 as usize].data;
                    let gx = Self::grad_slot(grads, &self.nodes, *x);
                    for k in 0..g.len() {
                        gx[k] += 2.0 * xv[k] * g[k];
                    }
                }
            }
            Op::Abs { x } => {
                if self.needs(*x) {
                    let xv = &self.nodes[x.0 as usize].data;
                    let gx = Self::grad_slot(grads, &self.nodes, *x);
                    for k in 0..g.len() {
                        gx[k] += g[k] * xv[k].signum() * (xv[k] != 0.0) as u8 as f64;
                    }
                }
            }
            Op::Sqrt { x } => {
                if self.needs(*x) {
                    let y = &node.data;
                    let gx = Self::grad_slot(grads, &self.nodes, *x);
                    for k in 0..g.len() {
                        gx[k] += g[k] * 0.5 / y[k];
                    }
                }
            }
            Op::Sin { x } => {
                if self.needs(*x) {
                    let xv = &self.nodes[x.0 as usize].data;
                    let gx = Self::grad_slot(grads, &self.nodes, *x);
                    for k in 0..g.len() {
                        gx[k] += g[k] * xv[k].cos();
                    }
                }
            }
            Op::Cos { x } => {
                if self.needs(*x) {
                    let xv = &self.nodes[x.0 as usize].data;
                    let gx = Self::grad_slot(grads, &self.nodes, *x);
                    for k in 0..g.len() {
                        gx[k] -= g[k] * xv[k].sin();
                    }
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let gx = Self::grad_slot(grads, &self.nodes, *x);
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let (ra, ca) = self.shape(*a);
                let (_, cb) = self.shape(*b);
                let cols = ca + cb;
                if self.needs(*a) {
                    let ga = Self::grad_slot(grads, &self.nodes, *a);
                    for r in 0..ra {
                        for j in 0..ca {
                            ga[r * ca + j] += g[r * cols + j];
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = Self::grad_slot(grads, &self.nodes, *b);
                    for r in 0..ra {
                        for j in 0..cb {
                            gb[r * cb + j] += g[r * cols + ca + j];
                        }
                    }
                }
            }
            Op::SelectRows { x, idx } => {
                if self.needs(*x) {
                    let (_, c) = self.shape(*x);
                    let gx = Self::grad_slot(grads, &self.nodes, *x);
                    for (out_r, &in_r) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[in_r * c + j] += g[out_r * c + j];
                        }
                    }
                }
            }
            Op::SegmentSum { x, seg } => {
                if self.needs(*x) {
                    let (_, c) = self.shape(*x);
                    let gx = Self::grad_slot(grads, &self.nodes, *x);
                    for (row, &s) in seg.iter().enumerate() {
                        for j in 0..c {
                            gx[row * c + j] += g[s * c + j];
                        }
                    }
                }
            }
            Op::DivByCol { x, c } => {
                let (r, k) = self.shape(*x);
                let cv = &self.nodes[c.0 as usize].data;
                if self.needs(*x) {
                    let gx = Self::grad_slot(grads, &self.nodes, *x);
                    for row in 0..r {
                        for j in 0..k {
                            gx[row * k + j] += g[row * k + j] / cv[row];
                        }
                    }
                }
                if self.needs(*c) {
                    let xv = &self.nodes[x.0 as usize].data;
                    let gc = Self::grad_slot(grads, &self.nodes, *c);
                    for row in 0..r {
                        let mut acc = 0.0;
                        for j in 0..k {
                            acc += g[row * k + j] * xv[row * k + j];
                        }
                        gc[row] -= acc / (cv[row] * cv[row]);
                    }
                }
            }
            Op::MulByCol { x, c } => {
                let (r, k) = self.shape(*x);
                let cv = &self.nodes[c.0 as usize].data;
                if self.needs(*x) {
                    let gx = Self::grad_slot(grads, &self.nodes, *x);
                    for row in 0..r {
                        for j in 0..k {
                            gx[row * k + j] += g[row * k + j] * cv[row];
                        }
                    }
                }
                if self.needs(*c) {
                    let xv = &self.nodes[x.0 as usize].data;
                    let gc = Self::grad_slot(grads, &self.nodes, *c);
                    for row in 0..r {
                        let mut acc = 0.0;
                        for j in 0..k {
                            acc += g[row * k + j] * xv[row * k + j];
                        }
                        gc[row] += acc;
                    }
                }
            }
            Op::Get { x, index } => {
                if self.needs(*x) {
                    let gx = Self::grad_slot(grads, &self.nodes, *x);
                    gx[*index] += g[0];
                }
            }
            Op::StackScalars { parts } => {
                for (k, &p) in parts.iter().enumerate() {
                    if self.needs(p) {
                        let gp = Self::grad_slot(grads, &self.nodes, p);
                        gp[0] += g[k];
                    }
                }
            }
            Op::RotTranslate { pts, r, t } => {
                let n = pts.len() / 3;
                if self.needs(*r) {
                    let gr = Self::grad_slot(grads, &self.nodes, *r);
                    for row in 0..n {
                        let p = &pts[row * 3..row * 3 + 3];
                        for i in 0..3 {
                            let gv = g[row * 3 + i];
                            for j in 0..3 {
                                gr[i * 3 + j] += gv * p[j];
                            }
                        }
                    }
                }
                if self.needs(*t) {
                    let gt = Self::grad_slot(grads, &self.nodes, *t);
                    for row in 0..n {
                        for i in 0..3 {
                            gt[i] += g[row * 3 + i];
                        }
                    }
                }
            }
            Op::TrilerpGather { pos, plan, corner_values, frozen_corners } => {
                let dim = plan.embedding_dim;
                if !frozen_corners {
                    for (row, pr) in plan.rows.iter().enumerate() {
                        let w = trilerp_weights(&pr.frac);
                        let gr = &g[row * dim..(row + 1) * dim];
                        for (k, &cid) in pr.corners.iter().enumerate() {
                            store.accumulate_scaled_grad(cid, w[k], gr);
                        }
                    }
                }
                if self.needs(*pos) {
                    let gp = Self::grad_slot(grads, &self.nodes, *pos);
                    for (row, pr) in plan.rows.iter().enumerate() {
                        let dw = trilerp_weight_grads(&pr.frac);
                        let gr = &g[row * dim..(row + 1) * dim];
                        for k in 0..8 {
                            let e = &corner_values[(row * 8 + k) * dim..(row * 8 + k + 1) * dim];
                            let mut dot = 0.0;
                            for (gv, ev) in gr.iter().zip(e) {
                                dot += gv * ev;
                            }
                            for axis in 0..3 {
                                gp[row * 3 + axis] += dot * dw[k][axis] * plan.inv_voxel_size;
                            }
                        }
                    }
                }
            }
        }
    }
}
