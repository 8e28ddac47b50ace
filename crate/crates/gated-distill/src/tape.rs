//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records a computation as a flat list of nodes, each holding its
//! forward value eagerly. [`Tape::backward`] walks the list in reverse and
//! accumulates gradients for every node, so callers can read gradients for
//! any leaf they registered. Parameters enter as borrowed leaves via
//! [`Tape::shared`], which keeps a training step free of parameter copies.
//!
//! The op set is deliberately small: exactly what a pre-norm transformer
//! forward pass and the distillation losses need. Scalars are 1x1 matrices.

use ndarray::{s, Array1, Array2, Axis};

use crate::real::Real;

/// Index of a node on its tape.
pub type NodeId = usize;

/// Numerical floor used by layer normalization.
const LN_EPS: f64 = 1e-5;

enum Value<'p, R: Real> {
    Owned(Array2<R>),
    Shared(&'p Array2<R>),
}

impl<R: Real> Value<'_, R> {
    fn get(&self) -> &Array2<R> {
        match self {
            Value::Owned(a) => a,
            Value::Shared(a) => a,
        }
    }
}

enum Op<R: Real> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Scale(NodeId, R),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    /// a . b^T without materializing the transpose.
    MatMulNt(NodeId, NodeId),
    /// Matrix plus a 1xN row broadcast over all rows.
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Array2<R>,
        inv_std: Vec<R>,
    },
    GatherRows {
        table: NodeId,
        idx: Vec<usize>,
    },
    SliceCols {
        src: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    SumSq(NodeId),
    /// -sum_t w_t * sum_i targets[t,i] * lsm[t,i], a weighted soft cross-entropy.
    SoftCeRows {
        lsm: NodeId,
        targets: Array2<R>,
        row_weights: Vec<R>,
    },
    /// -sum_t w_t * lsm[t, target_ids[t]], a weighted hard cross-entropy.
    HardCeRows {
        lsm: NodeId,
        target_ids: Vec<usize>,
        row_weights: Vec<R>,
    },
}

struct Node<'p, R: Real> {
    value: Value<'p, R>,
    op: Op<R>,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by [`NodeId`].
///
/// A node that the root does not depend on has no buffer; its gradient is
/// an exact zero by construction, not a small float.
pub struct Gradients<R: Real> {
    buf: Vec<Option<Array2<R>>>,
}

impl<R: Real> Gradients<R> {
    /// Borrows the gradient of `id`, if the root depended on it.
    pub fn get(&self, id: NodeId) -> Option<&Array2<R>> {
        self.buf[id].as_ref()
    }

    /// Moves the gradient of `id` out of the buffer.
    pub fn take(&mut self, id: NodeId) -> Option<Array2<R>> {
        self.buf[id].take()
    }
}

/// Records a forward computation and differentiates it in reverse.
pub struct Tape<'p, R: Real> {
    nodes: Vec<Node<'p, R>>,
}

impl<'p, R: Real> Default for Tape<'p, R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, R: Real> Tape<'p, R> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Array2<R> {
        self.nodes[id].value.get()
    }

    /// Forward value of a 1x1 node.
    pub fn scalar_value(&self, id: NodeId) -> R {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar_value on a non-scalar node");
        v[(0, 0)]
    }

    fn push(&mut self, value: Array2<R>, op: Op<R>) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        self.nodes.len() - 1
    }

    /// Registers a constant or input the tape takes ownership of.
    pub fn owned(&mut self, a: Array2<R>) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(a),
            op: Op::Leaf,
        });
        self.nodes.len() - 1
    }

    /// Registers a borrowed leaf, typically a model parameter.
    pub fn shared(&mut self, a: &'p Array2<R>) -> NodeId {
        self.nodes.push(Node {
            value: Value::Shared(a),
            op: Op::Leaf,
        });
        self.nodes.len() - 1
    }

    /// A 1x1 constant.
    pub fn scalar(&mut self, x: R) -> NodeId {
        self.owned(Array2::from_elem((1, 1), x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "add: shape mismatch");
        let v = va + vb;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "sub: shape mismatch");
        let v = va - vb;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "mul_elem: shape mismatch");
        let v = va * vb;
        self.push(v, Op::MulElem(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: R) -> NodeId {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    /// Adds a plain constant elementwise; the constant carries no gradient.
    pub fn add_scalar(&mut self, a: NodeId, c: R) -> NodeId {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul: inner dim mismatch");
        let v = va.dot(vb);
        self.push(v, Op::MatMul(a, b))
    }

    /// `a . b^T` where `a` is m x k and `b` is n x k.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.ncols(), "matmul_nt: inner dim mismatch");
        let v = va.dot(&vb.t());
        self.push(v, Op::MatMulNt(a, b))
    }

    /// Broadcasts a 1xN row over every row of an MxN matrix.
    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> NodeId {
        let (vm, vr) = (self.value(m), self.value(row));
        assert_eq!(vr.nrows(), 1, "add_row: row operand must be 1xN");
        assert_eq!(vm.ncols(), vr.ncols(), "add_row: width mismatch");
        let v = vm + &vr.row(0);
        self.push(v, Op::AddRow(m, row))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| if x > R::zero() { x } else { R::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = log_softmax_rows(self.value(a));
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Normalizes each row to zero mean and unit variance, then applies a
    /// 1xN gain and bias.
    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let vx = self.value(x);
        let (vg, vb) = (self.value(gain), self.value(bias));
        assert_eq!(vg.nrows(), 1, "layer_norm_rows: gain must be 1xN");
        assert_eq!(vb.nrows(), 1, "layer_norm_rows: bias must be 1xN");
        assert_eq!(vx.ncols(), vg.ncols(), "layer_norm_rows: gain width mismatch");
        assert_eq!(vx.ncols(), vb.ncols(), "layer_norm_rows: bias width mismatch");

        let n = vx.ncols();
        let inv_n = R::of(1.0 / n as f64);
        let eps = R::of(LN_EPS);
        let mut xhat = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.iter().copied().sum::<R>() * inv_n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| *v * *v).sum::<R>() * inv_n;
            let is = (var + eps).sqrt().recip();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let mut v = xhat.clone();
        for mut row in v.rows_mut() {
            for (j, e) in row.iter_mut().enumerate() {
                *e = *e * vg[(0, j)] + vb[(0, j)];
            }
        }
        self.push(
            v,
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Selects rows of `table` by index; used for embedding lookup.
    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> NodeId {
        let vt = self.value(table);
        let mut v = Array2::zeros((idx.len(), vt.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            assert!(r < vt.nrows(), "gather_rows: index out of range");
            v.row_mut(i).assign(&vt.row(r));
        }
        self.push(
            v,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let vs = self.value(src);
        assert!(start + len <= vs.ncols(), "slice_cols: out of range");
        let v = vs.slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols { src, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols: empty part list");
        let rows = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = Array2::zeros((rows, total));
        let mut at = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.nrows(), rows, "concat_cols: row count mismatch");
            v.slice_mut(s![.., at..at + vp.ncols()]).assign(vp);
            at += vp.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Sum of squared entries, as a 1x1 node.
    pub fn sum_sq(&mut self, a: NodeId) -> NodeId {
        let s: R = self.value(a).iter().map(|v| *v * *v).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumSq(a))
    }

    /// Weighted soft cross-entropy against fixed target rows:
    /// `-sum_t w_t * sum_i targets[t,i] * lsm[t,i]`.
    pub fn soft_ce_rows(&mut self, lsm: NodeId, targets: Array2<R>, row_weights: Vec<R>) -> NodeId {
        let vl = self.value(lsm);
        assert_eq!(vl.dim(), targets.dim(), "soft_ce_rows: shape mismatch");
        assert_eq!(vl.nrows(), row_weights.len(), "soft_ce_rows: weight count");
        let mut acc = R::zero();
        for (t, row) in vl.rows().into_iter().enumerate() {
            let mut inner = R::zero();
            for (i, l) in row.iter().enumerate() {
                inner += targets[(t, i)] * *l;
            }
            acc -= row_weights[t] * inner;
        }
        self.push(
            Array2::from_elem((1, 1), acc),
            Op::SoftCeRows {
                lsm,
                targets,
                row_weights,
            },
        )
    }

    /// Weighted hard cross-entropy against integer target ids:
    /// `-sum_t w_t * lsm[t, target_ids[t]]`.
    pub fn hard_ce_rows(&mut self, lsm: NodeId, target_ids: Vec<usize>, row_weights: Vec<R>) -> NodeId {
        let vl = self.value(lsm);
        assert_eq!(vl.nrows(), target_ids.len(), "hard_ce_rows: target count");
        assert_eq!(vl.nrows(), row_weights.len(), "hard_ce_rows: weight count");
        let mut acc = R::zero();
        for (t, &y) in target_ids.iter().enumerate() {
            assert!(y < vl.ncols(), "hard_ce_rows: target id out of range");
            acc -= row_weights[t] * vl[(t, y)];
        }
        self.push(
            Array2::from_elem((1, 1), acc),
            Op::HardCeRows {
                lsm,
                target_ids,
                row_weights,
            },
        )
    }

    /// Runs reverse accumulation from a 1x1 root node with seed gradient 1.
    pub fn backward(&self, root: NodeId) -> Gradients<R> {
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward: root must be scalar"
        );
        let mut buf: Vec<Option<Array2<R>>> = vec![None; self.nodes.len()];
        buf[root] = Some(Array2::from_elem((1, 1), R::one()));

        for id in (0..=root).rev() {
            let Some(g) = buf[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut buf, *a, &g, self.value(*a).dim());
                    accumulate(&mut buf, *b, &g, self.value(*b).dim());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut buf, *a, &g, self.value(*a).dim());
                    let neg = g.mapv(|v| -v);
                    accumulate(&mut buf, *b, &neg, self.value(*b).dim());
                }
                Op::MulElem(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut buf, *a, &ga, ga.dim());
                    accumulate(&mut buf, *b, &gb, gb.dim());
                }
                Op::Scale(a, c) => {
                    let ga = g.mapv(|v| v * *c);
                    accumulate(&mut buf, *a, &ga, ga.dim());
                }
                Op::AddScalar(a) => {
                    accumulate(&mut buf, *a, &g, self.value(*a).dim());
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut buf, *a, &ga, ga.dim());
                    accumulate(&mut buf, *b, &gb, gb.dim());
                }
                Op::MatMulNt(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut buf, *a, &ga, ga.dim());
                    accumulate(&mut buf, *b, &gb, gb.dim());
                }
                Op::AddRow(m, row) => {
                    accumulate(&mut buf, *m, &g, self.value(*m).dim());
                    let col = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut buf, *row, &col, col.dim());
                }
                Op::Relu(a) => {
                    let va = self.value(*a);
                    let mut ga = g.clone();
                    ga.zip_mut_with(va, |gv, xv| {
                        if *xv <= R::zero() {
                            *gv = R::zero();
                        }
                    });
                    accumulate(&mut buf, *a, &ga, ga.dim());
                }
                Op::SoftmaxRows(a) => {
                    let s = self.value(id);
                    let mut ga = Array2::zeros(g.dim());
                    for r in 0..g.nrows() {
                        let dot: R = (0..g.ncols()).map(|c| g[(r, c)] * s[(r, c)]).sum();
                        for c in 0..g.ncols() {
                            ga[(r, c)] = s[(r, c)] * (g[(r, c)] - dot);
                        }
                    }
                    accumulate(&mut buf, *a, &ga, ga.dim());
                }
                Op::LogSoftmaxRows(a) => {
                    let lsm = self.value(id);
                    let mut ga = Array2::zeros(g.dim());
                    for r in 0..g.nrows() {
                        let gsum: R = (0..g.ncols()).map(|c| g[(r, c)]).sum();
                        for c in 0..g.ncols() {
                            ga[(r, c)] = g[(r, c)] - lsm[(r, c)].exp() * gsum;
                        }
                    }
                    accumulate(&mut buf, *a, &ga, ga.dim());
                }
                Op::LayerNormRows {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let vg = self.value(*gain);
                    let n = xhat.ncols();
                    let inv_n = R::of(1.0 / n as f64);

                    let mut dxhat = g.clone();
                    for mut row in dxhat.rows_mut() {
                        for (j, e) in row.iter_mut().enumerate() {
                            *e *= vg[(0, j)];
                        }
                    }
                    let mut gx = Array2::zeros(g.dim());
                    for r in 0..g.nrows() {
                        let m1: R = (0..n).map(|c| dxhat[(r, c)]).sum::<R>() * inv_n;
                        let m2: R =
                            (0..n).map(|c| dxhat[(r, c)] * xhat[(r, c)]).sum::<R>() * inv_n;
                        for c in 0..n {
                            gx[(r, c)] =
                                inv_std[r] * (dxhat[(r, c)] - m1 - xhat[(r, c)] * m2);
                        }
                    }
                    accumulate(&mut buf, *x, &gx, gx.dim());

                    let ggain = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut buf, *gain, &ggain, ggain.dim());
                    let gbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut buf, *bias, &gbias, gbias.dim());
                }
                Op::GatherRows { table, idx } => {
                    let dim = self.value(*table).dim();
                    let slot = buf[*table].get_or_insert_with(|| Array2::zeros(dim));
                    for (i, &r) in idx.iter().enumerate() {
                        let mut dst = slot.row_mut(r);
                        dst += &g.row(i);
                    }
                }
                Op::SliceCols { src, start, len } => {
                    let dim = self.value(*src).dim();
                    let slot = buf[*src].get_or_insert_with(|| Array2::zeros(dim));
                    let mut dst = slot.slice_mut(s![.., *start..*start + *len]);
                    dst += &g;
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        let gp = g.slice(s![.., at..at + w]).to_owned();
                        accumulate(&mut buf, p, &gp, gp.dim());
                        at += w;
                    }
                }
                Op::SumSq(a) => {
                    let c = g[(0, 0)] * R::of(2.0);
                    let ga = self.value(*a).mapv(|v| v * c);
                    accumulate(&mut buf, *a, &ga, ga.dim());
                }
                Op::SoftCeRows {
                    lsm,
                    targets,
                    row_weights,
                } => {
                    let g0 = g[(0, 0)];
                    let mut ga = Array2::zeros(targets.dim());
                    for t in 0..targets.nrows() {
                        let w = row_weights[t] * g0;
                        for i in 0..targets.ncols() {
                            ga[(t, i)] = -w * targets[(t, i)];
                        }
                    }
                    accumulate(&mut buf, *lsm, &ga, ga.dim());
                }
                Op::HardCeRows {
                    lsm,
                    target_ids,
                    row_weights,
                } => {
                    let g0 = g[(0, 0)];
                    let dim = self.value(*lsm).dim();
                    let mut ga = Array2::zeros(dim);
                    for (t, &y) in target_ids.iter().enumerate() {
                        ga[(t, y)] = -row_weights[t] * g0;
                    }
                    accumulate(&mut buf, *lsm, &ga, ga.dim());
                }
            }
            // Put the processed gradient back so callers can read it;
            // nodes the root never reached stay `None` (an exact zero).
            buf[id] = Some(g);
        }
        Gradients { buf }
    }
}

fn accumulate<R: Real>(
    buf: &mut [Option<Array2<R>>],
    id: NodeId,
    g: &Array2<R>,
    dim: (usize, usize),
) {
    debug_assert_eq!(g.dim(), dim, "gradient shape mismatch");
    match &mut buf[id] {
        Some(slot) => *slot += g,
        None => buf[id] = Some(g.clone()),
    }
}

/// Numerically stable row softmax of a plain matrix.
pub fn softmax_rows<R: Real>(x: &Array2<R>) -> Array2<R> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(R::neg_infinity(), R::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: R = row.iter().copied().sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Numerically stable row log-softmax of a plain matrix.
pub fn log_softmax_rows<R: Real>(x: &Array2<R>) -> Array2<R> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(R::neg_infinity(), R::max);
        let lse: R = row
            .iter()
            .map(|v| (*v - max).exp())
            .sum::<R>()
            .ln()
            + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Column sums as a 1xN row, a convenience for tests and the optimizer.
pub fn col_sums<R: Real>(x: &Array2<R>) -> Array1<R> {
    x.sum_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    type T<'p> = Tape<'p, f64>;

    /// Central-difference check of every input gradient of a scalar function.
    fn check_grads(
        inputs: &[Array2<f64>],
        build: impl Fn(&mut T<'_>, &[NodeId]) -> NodeId,
        tol: f64,
    ) {
        let mut tape = T::new();
        let ids: Vec<NodeId> = inputs.iter().map(|a| tape.owned(a.clone())).collect();
        let root = build(&mut tape, &ids);
        let mut grads = tape.backward(root);

        let eval = |xs: &[Array2<f64>]| -> f64 {
            let mut t = T::new();
            let ids: Vec<NodeId> = xs.iter().map(|a| t.owned(a.clone())).collect();
            let r = build(&mut t, &ids);
            t.scalar_value(r)
        };

        let h = 1e-5;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads
                .take(ids[i])
                .unwrap_or_else(|| Array2::zeros(input.dim()));
            for r in 0..input.nrows() {
                for c in 0..input.ncols() {
                    let mut xs = inputs.to_vec();
                    xs[i][(r, c)] = input[(r, c)] + h;
                    let fp = eval(&xs);
                    xs[i][(r, c)] = input[(r, c)] - h;
                    let fm = eval(&xs);
                    let numeric = (fp - fm) / (2.0 * h);
                    let a = analytic[(r, c)];
                    let denom = a.abs().max(numeric.abs()).max(1.0);
                    assert!(
                        (a - numeric).abs() / denom < tol,
                        "input {i} entry ({r},{c}): analytic {a} vs numeric {numeric}"
                    );
                }
            }
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        // Tiny deterministic LCG; keeps op tests free of RNG crate plumbing.
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        Array2::from_shape_fn((rows, cols), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn add_sub_mul_scale() {
        let a = sample(3, 4, 1);
        let b = sample(3, 4, 2);
        check_grads(&[a, b], |t, ids| {
            let s = t.add(ids[0], ids[1]);
            let d = t.sub(s, ids[1]);
            let m = t.mul_elem(d, ids[1]);
            let sc = t.scale(m, 0.7);
            t.sum_sq(sc)
        }, 1e-6);
    }

    #[test]
    fn matmul_both_forms() {
        let a = sample(3, 4, 3);
        let b = sample(4, 2, 4);
        let c = sample(5, 4, 5);
        check_grads(&[a, b, c], |t, ids| {
            let p = t.matmul(ids[0], ids[1]); // 3x2
            let q = t.matmul_nt(ids[0], ids[2]); // 3x5
            let sp = t.sum_sq(p);
            let sq = t.sum_sq(q);
            t.add(sp, sq)
        }, 1e-6);
    }

    #[test]
    fn add_row_and_relu() {
        let m = sample(4, 3, 6);
        let r = sample(1, 3, 7);
        check_grads(&[m, r], |t, ids| {
            let s = t.add_row(ids[0], ids[1]);
            let a = t.relu(s);
            t.sum_sq(a)
        }, 1e-5);
    }

    #[test]
    fn softmax_rows_grad_and_normalization() {
        let x = sample(3, 5, 8);
        {
            let mut t = T::new();
            let id = t.owned(x.clone());
            let s = t.softmax_rows(id);
            for row in t.value(s).rows() {
                let sum: f64 = row.sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&p| p > 0.0));
            }
        }
        let w = sample(3, 5, 9);
        check_grads(&[x, w], |t, ids| {
            let s = t.softmax_rows(ids[0]);
            let m = t.mul_elem(s, ids[1]);
            t.sum_sq(m)
        }, 1e-6);
    }

    #[test]
    fn log_softmax_rows_grad() {
        let x = sample(3, 6, 10);
        let w = sample(3, 6, 11);
        check_grads(&[x, w], |t, ids| {
            let l = t.log_softmax_rows(ids[0]);
            let m = t.mul_elem(l, ids[1]);
            t.sum_sq(m)
        }, 1e-6);
    }

    #[test]
    fn layer_norm_grad() {
        let x = sample(4, 6, 12);
        let g = sample(1, 6, 13);
        let b = sample(1, 6, 14);
        check_grads(&[x, g, b], |t, ids| {
            let y = t.layer_norm_rows(ids[0], ids[1], ids[2]);
            t.sum_sq(y)
        }, 1e-5);
    }

    #[test]
    fn gather_slice_concat() {
        let table = sample(6, 4, 15);
        check_grads(&[table], |t, ids| {
            let g = t.gather_rows(ids[0], &[2, 0, 2, 5]);
            let left = t.slice_cols(g, 0, 2);
            let right = t.slice_cols(g, 2, 2);
            let back = t.concat_cols(&[right, left]);
            t.sum_sq(back)
        }, 1e-6);
    }

    #[test]
    fn soft_and_hard_ce_grads() {
        let logits = sample(3, 5, 16);
        let targets = {
            let raw = sample(3, 5, 17).mapv(f64::abs);
            let mut t = raw.clone();
            for mut row in t.rows_mut() {
                let s: f64 = row.sum();
                row.mapv_inplace(|v| v / s);
            }
            t
        };
        let weights = vec![1.0, 0.5, 0.0];
        check_grads(std::slice::from_ref(&logits), |t, ids| {
            let lsm = t.log_softmax_rows(ids[0]);
            t.soft_ce_rows(lsm, targets.clone(), weights.clone())
        }, 1e-6);
        check_grads(&[logits], |t, ids| {
            let lsm = t.log_softmax_rows(ids[0]);
            t.hard_ce_rows(lsm, vec![1, 4, 0], vec![1.0, 0.25, 0.75])
        }, 1e-6);
    }

    #[test]
    fn add_scalar_shifts_value_not_grad() {
        let x = sample(2, 2, 18);
        let mut t = T::new();
        let id = t.owned(x.clone());
        let s = t.sum_sq(id);
        let shifted = t.add_scalar(s, 3.25);
        assert!((t.scalar_value(shifted) - (t.scalar_value(s) + 3.25)).abs() < 1e-12);
        let mut g = t.backward(shifted);
        let gx = g.take(id).unwrap();
        let expect = x.mapv(|v| 2.0 * v);
        assert!(gx.iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn shared_leaves_receive_grads_without_copies() {
        let p = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let mut t = Tape::new();
        let id = t.shared(&p);
        let s = t.sum_sq(id);
        let mut g = t.backward(s);
        let gp = g.take(id).unwrap();
        assert_eq!(gp, arr2(&[[2.0, 4.0], [6.0, 8.0]]));
    }

    #[test]
    fn unreached_nodes_have_no_gradient() {
        let mut t = T::new();
        let a = t.owned(sample(2, 2, 19));
        let b = t.owned(sample(2, 2, 20));
        let root = t.sum_sq(a);
        let mut g = t.backward(root);
        assert!(g.get(b).is_none());
        assert!(g.take(b).is_none());
        assert!(g.get(a).is_some());
    }

    #[test]
    fn composite_attention_like_block() {
        // One head of scaled dot-product attention with a causal mask,
        // checked end to end against finite differences.
        let q = sample(4, 3, 21);
        let k = sample(4, 3, 22);
        let v = sample(4, 3, 23);
        let mask = Array2::from_shape_fn((4, 4), |(r, c)| if c > r { -1e9 } else { 0.0 });
        check_grads(&[q, k, v], move |t, ids| {
            let scores = t.matmul_nt(ids[0], ids[1]);
            let scaled = t.scale(scores, 1.0 / 3.0f64.sqrt());
            let m = t.owned(mask.clone());
            let masked = t.add(scaled, m);
            let probs = t.softmax_rows(masked);
            let ctx = t.matmul(probs, ids[2]);
            t.sum_sq(ctx)
        }, 1e-5);
    }
}
