//! The recording tape and its primitive set: affine, elementwise
//! nonlinearities, arithmetic with broadcasting, reductions, column
//! slicing/concatenation, exclusive row cumsum, bilinear grid lookup, and
//! row gathers.

use ndarray::{Array2, Axis};

use super::{AutodiffError, ParamId, ParamStore, Tensor};

/// Keeps `x / ||x||`-style backward passes finite when a row is exactly zero.
const NORM_EPS_SQ: f64 = 1e-24;

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Param(ParamId),
    Constant,
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    SumAll(NodeId),
    SumRows(NodeId),
    L2NormRows(NodeId),
    CumsumExclusiveRows(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize, len: usize },
    Reshape(NodeId),
    BilinearLookup { grid: NodeId, grid_h: usize, grid_w: usize, queries: Vec<(f64, f64)> },
    GatherRows { table: NodeId, rows: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Record of primitive operations for one forward evaluation. Nodes are
/// appended in topological order by construction, so every node's parents
/// precede it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Output shape of a broadcast binary op; dims must match or be 1.
fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize, axis: &str| -> usize {
        if x == y || y == 1 {
            x.max(y)
        } else if x == 1 {
            y
        } else {
            panic!("incompatible {axis} dims for broadcast: {x} vs {y}")
        }
    };
    (dim(a.0, b.0, "row"), dim(a.1, b.1, "col"))
}

/// Sums `g` down to `shape`, undoing a broadcast.
fn reduce_to(g: &Tensor, shape: (usize, usize)) -> Tensor {
    let mut out = g.clone();
    if shape.0 == 1 && out.nrows() > 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && out.ncols() > 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    assert_eq!(out.dim(), shape);
    out
}

fn binary_elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.dim() == b.dim() {
        let mut out = a.clone();
        out.zip_mut_with(b, |x, &y| *x = f(*x, y));
        return out;
    }
    let (rows, cols) = broadcast_shape(a.dim(), b.dim());
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        let av = a[[if a.nrows() == 1 { 0 } else { i }, if a.ncols() == 1 { 0 } else { j }]];
        let bv = b[[if b.nrows() == 1 { 0 } else { i }, if b.ncols() == 1 { 0 } else { j }]];
        f(av, bv)
    })
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Value of a `[1,1]` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.dim(), (1, 1), "scalar() on non-scalar node");
        v[[0, 0]]
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Leaf node reading a parameter's current value.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(Op::Param(id), store.value(id).clone(), true)
    }

    /// Leaf node with a fixed value; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::from_elem((1, 1), v))
    }

    /// `x·w + b` with `x: [B,I]`, `w: [I,O]`, `b: [1,O]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xv, wv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        assert_eq!(
            xv.ncols(),
            wv.nrows(),
            "affine: x cols {} vs w rows {}",
            xv.ncols(),
            wv.nrows()
        );
        assert_eq!(
            bv.dim(),
            (1, wv.ncols()),
            "affine: bias shape {:?} vs [1,{}]",
            bv.dim(),
            wv.ncols()
        );
        let mut y = xv.dot(wv);
        y += &bv.row(0);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Op::Affine { x, w, b }, y, rg)
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let value = binary_elementwise(&self.nodes[a.0].value, &self.nodes[b.0].value, f);
        let rg = self.rg(a) || self.rg(b);
        self.push(op, value, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Div(a, b), a, b, |x, y| x / y)
    }

    fn unary(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> NodeId {
        let value = self.nodes[a.0].value.mapv(f);
        let rg = self.rg(a);
        self.push(op, value, rg)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(Op::Scale(a, k), a, |x| k * x)
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(Op::AddScalar(a), a, |x| x + k)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Tanh(a), a, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sigmoid(a), a, stable_sigmoid)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Softplus(a), a, stable_softplus)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp(a), a, f64::exp)
    }

    /// Natural log; callers keep inputs positive (add an epsilon first).
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Log(a), a, f64::ln)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sqrt(a), a, f64::sqrt)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::from_elem((1, 1), self.nodes[a.0].value.sum());
        let rg = self.rg(a);
        self.push(Op::SumAll(a), value, rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// `[B,C] -> [B,1]`, summing each row.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(Op::SumRows(a), value, rg)
    }

    /// `[B,C] -> [B,1]`, `sqrt(sum_c x^2 + eps^2)` per row. The epsilon keeps
    /// the gradient finite at the origin and is below every tolerance used
    /// by callers.
    pub fn l2_norm_rows(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let value = Tensor::from_shape_fn((v.nrows(), 1), |(i, _)| {
            (v.row(i).iter().map(|x| x * x).sum::<f64>() + NORM_EPS_SQ).sqrt()
        });
        let rg = self.rg(a);
        self.push(Op::L2NormRows(a), value, rg)
    }

    /// Exclusive prefix sum along each row: `y[r,c] = sum_{c'<c} x[r,c']`.
    pub fn cumsum_exclusive_rows(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let mut value = Tensor::zeros(v.raw_dim());
        for (row_in, mut row_out) in v.rows().into_iter().zip(value.rows_mut()) {
            let mut acc = 0.0;
            for (c, out) in row_out.iter_mut().enumerate() {
                *out = acc;
                acc += row_in[c];
            }
        }
        let rg = self.rg(a);
        self.push(Op::CumsumExclusiveRows(a), value, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.nodes[parts[0].0].value.nrows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.ncols()).sum();
        let mut value = Tensor::zeros((rows, total));
        let mut at = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.nrows(), rows, "concat_cols: row mismatch");
            value
                .slice_mut(ndarray::s![.., at..at + v.ncols()])
                .assign(v);
            at += v.ncols();
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Op::ConcatCols(parts.to_vec()), value, rg)
    }

    /// Row-major reinterpretation to `rows x cols`; element count must match.
    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = &self.nodes[x.0].value;
        assert_eq!(v.len(), rows * cols, "reshape: size mismatch");
        let value = Tensor::from_shape_vec((rows, cols), v.iter().copied().collect())
            .expect("checked size");
        let rg = self.rg(x);
        self.push(Op::Reshape(x), value, rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = &self.nodes[x.0].value;
        assert!(start + len <= v.ncols(), "slice_cols out of range");
        let value = v.slice(ndarray::s![.., start..start + len]).to_owned();
        let rg = self.rg(x);
        self.push(Op::SliceCols { x, start, len }, value, rg)
    }

    /// Bilinear interpolation into a feature grid stored row-major as
    /// `[grid_h * grid_w, channels]`. Query coordinates are in `[0,1]^2`
    /// (clamped) with `(qx, qy)` mapping to `(col, row)` via
    /// `qx * (grid_w - 1)`, so a query exactly at a node returns the stored
    /// feature. Queries are data, not differentiated.
    pub fn bilinear_lookup(
        &mut self,
        grid: NodeId,
        grid_h: usize,
        grid_w: usize,
        queries: &[(f64, f64)],
    ) -> NodeId {
        let g = &self.nodes[grid.0].value;
        assert_eq!(
            g.nrows(),
            grid_h * grid_w,
            "grid rows {} vs {}x{}",
            g.nrows(),
            grid_h,
            grid_w
        );
        let ch = g.ncols();
        let mut value = Tensor::zeros((queries.len(), ch));
        for (r, &(qx, qy)) in queries.iter().enumerate() {
            let (corners, weights) = bilinear_corners(qx, qy, grid_h, grid_w);
            let mut out = value.row_mut(r);
            for k in 0..4 {
                let src = g.row(corners[k]);
                let w = weights[k];
                if w == 0.0 {
                    continue;
                }
                for c in 0..ch {
                    out[c] += w * src[c];
                }
            }
        }
        let rg = self.rg(grid);
        self.push(
            Op::BilinearLookup {
                grid,
                grid_h,
                grid_w,
                queries: queries.to_vec(),
            },
            value,
            rg,
        )
    }

    /// `out[r,:] = table[rows[r],:]`; backward scatter-adds.
    pub fn gather_rows(&mut self, table: NodeId, rows: &[usize]) -> NodeId {
        let t = &self.nodes[table.0].value;
        let mut value = Tensor::zeros((rows.len(), t.ncols()));
        for (r, &src) in rows.iter().enumerate() {
            value.row_mut(r).assign(&t.row(src));
        }
        let rg = self.rg(table);
        self.push(
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            value,
            rg,
        )
    }

    /// Propagates `seed` from `output` to every parameter leaf, accumulating
    /// into the store's gradient buffers. A tape backs up exactly once.
    pub fn backward(
        &mut self,
        output: NodeId,
        seed: Tensor,
        store: &mut ParamStore,
    ) -> Result<(), AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        self.consumed = true;
        let out_shape = self.nodes[output.0].value.dim();
        if seed.dim() != out_shape {
            return Err(AutodiffError::SeedShape {
                seed: seed.dim(),
                output: out_shape,
            });
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, g, &mut grads, store);
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        store: &mut ParamStore,
    ) {
        let acc = |grads: &mut [Option<Tensor>], nodes: &[Node], id: NodeId, delta: Tensor| {
            if !nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.zip_mut_with(&delta, |a, &b| *a += b),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |id: NodeId| &self.nodes[id.0].value;

        match &self.nodes[i].op {
            Op::Constant => {}
            Op::Param(pid) => {
                store.grad_mut(*pid).zip_mut_with(&g, |a, &b| *a += b);
            }
            Op::Affine { x, w, b } => {
                if self.rg(*x) {
                    let dx = g.dot(&val(*w).t());
                    acc(grads, &self.nodes, *x, dx);
                }
                if self.rg(*w) {
                    let dw = val(*x).t().dot(&g);
                    acc(grads, &self.nodes, *w, dw);
                }
                if self.rg(*b) {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(grads, &self.nodes, *b, db);
                }
            }
            Op::Add(a, b) => {
                acc(grads, &self.nodes, *a, reduce_to(&g, val(*a).dim()));
                acc(grads, &self.nodes, *b, reduce_to(&g, val(*b).dim()));
            }
            Op::Sub(a, b) => {
                acc(grads, &self.nodes, *a, reduce_to(&g, val(*a).dim()));
                acc(grads, &self.nodes, *b, reduce_to(&g.mapv(|x| -x), val(*b).dim()));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let da = binary_elementwise(&g, val(*b), |x, y| x * y);
                    acc(grads, &self.nodes, *a, reduce_to(&da, val(*a).dim()));
                }
                if self.rg(*b) {
                    let db = binary_elementwise(&g, val(*a), |x, y| x * y);
                    acc(grads, &self.nodes, *b, reduce_to(&db, val(*b).dim()));
                }
            }
            Op::Div(a, b) => {
                if self.rg(*a) {
                    let da = binary_elementwise(&g, val(*b), |x, y| x / y);
                    acc(grads, &self.nodes, *a, reduce_to(&da, val(*a).dim()));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -a / b^2
                    let a_over_b2 = binary_elementwise(val(*a), val(*b), |x, y| -x / (y * y));
                    let db = binary_elementwise(&g, &a_over_b2, |x, y| x * y);
                    acc(grads, &self.nodes, *b, reduce_to(&db, val(*b).dim()));
                }
            }
            Op::Scale(a, k) => acc(grads, &self.nodes, *a, g.mapv(|x| x * k)),
            Op::AddScalar(a) => acc(grads, &self.nodes, *a, g),
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                let mut d = g;
                d.zip_mut_with(y, |gv, &yv| *gv *= 1.0 - yv * yv);
                acc(grads, &self.nodes, *a, d);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let mut d = g;
                d.zip_mut_with(y, |gv, &yv| *gv *= yv * (1.0 - yv));
                acc(grads, &self.nodes, *a, d);
            }
            Op::Softplus(a) => {
                let mut d = g;
                d.zip_mut_with(val(*a), |gv, &xv| *gv *= stable_sigmoid(xv));
                acc(grads, &self.nodes, *a, d);
            }
            Op::Exp(a) => {
                let y = &self.nodes[i].value;
                let mut d = g;
                d.zip_mut_with(y, |gv, &yv| *gv *= yv);
                acc(grads, &self.nodes, *a, d);
            }
            Op::Log(a) => {
                let mut d = g;
                d.zip_mut_with(val(*a), |gv, &xv| *gv /= xv);
                acc(grads, &self.nodes, *a, d);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                let mut d = g;
                d.zip_mut_with(y, |gv, &yv| *gv *= 0.5 / yv);
                acc(grads, &self.nodes, *a, d);
            }
            Op::SumAll(a) => {
                let s = g[[0, 0]];
                acc(grads, &self.nodes, *a, Tensor::from_elem(val(*a).raw_dim(), s));
            }
            Op::SumRows(a) => {
                let shape = val(*a).dim();
                let d = Tensor::from_shape_fn(shape, |(r, _)| g[[r, 0]]);
                acc(grads, &self.nodes, *a, d);
            }
            Op::L2NormRows(a) => {
                let x = val(*a);
                let y = &self.nodes[i].value;
                let d = Tensor::from_shape_fn(x.dim(), |(r, c)| g[[r, 0]] * x[[r, c]] / y[[r, 0]]);
                acc(grads, &self.nodes, *a, d);
            }
            Op::CumsumExclusiveRows(a) => {
                // dx[r,c] = sum_{c'>c} g[r,c']
                let mut d = Tensor::zeros(g.raw_dim());
                for (g_row, mut d_row) in g.rows().into_iter().zip(d.rows_mut()) {
                    let cols = g_row.len();
                    let mut acc_suffix = 0.0;
                    for c in (0..cols).rev() {
                        d_row[c] = acc_suffix;
                        acc_suffix += g_row[c];
                    }
                }
                acc(grads, &self.nodes, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    let d = g.slice(ndarray::s![.., at..at + w]).to_owned();
                    acc(grads, &self.nodes, *p, d);
                    at += w;
                }
            }
            Op::Reshape(x) => {
                let shape = val(*x).dim();
                let d = Tensor::from_shape_vec(shape, g.iter().copied().collect())
                    .expect("reshape grad size");
                acc(grads, &self.nodes, *x, d);
            }
            Op::SliceCols { x, start, len } => {
                let mut d = Tensor::zeros(val(*x).raw_dim());
                d.slice_mut(ndarray::s![.., *start..*start + *len]).assign(&g);
                acc(grads, &self.nodes, *x, d);
            }
            Op::BilinearLookup {
                grid,
                grid_h,
                grid_w,
                queries,
            } => {
                let mut d = Tensor::zeros(val(*grid).raw_dim());
                let ch = d.ncols();
                for (r, &(qx, qy)) in queries.iter().enumerate() {
                    let (corners, weights) = bilinear_corners(qx, qy, *grid_h, *grid_w);
                    for k in 0..4 {
                        if weights[k] == 0.0 {
                            continue;
                        }
                        for c in 0..ch {
                            d[[corners[k], c]] += weights[k] * g[[r, c]];
                        }
                    }
                }
                acc(grads, &self.nodes, *grid, d);
            }
            Op::GatherRows { table, rows } => {
                let mut d = Tensor::zeros(val(*table).raw_dim());
                for (r, &src) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(src);
                    for (c, gv) in g.row(r).iter().enumerate() {
                        dst[c] += gv;
                    }
                }
                acc(grads, &self.nodes, *table, d);
            }
        }
    }
}

/// Corner row indices and bilinear weights for a clamped `[0,1]^2` query.
fn bilinear_corners(qx: f64, qy: f64, grid_h: usize, grid_w: usize) -> ([usize; 4], [f64; 4]) {
    let fx = qx.clamp(0.0, 1.0) * (grid_w - 1) as f64;
    let fy = qy.clamp(0.0, 1.0) * (grid_h - 1) as f64;
    let x0 = (fx.floor() as usize).min(grid_w - 1);
    let y0 = (fy.floor() as usize).min(grid_h - 1);
    let x1 = (x0 + 1).min(grid_w - 1);
    let y1 = (y0 + 1).min(grid_h - 1);
    let tx = fx - x0 as f64;
    let ty = fy - y0 as f64;
    (
        [y0 * grid_w + x0, y0 * grid_w + x1, y1 * grid_w + x0, y1 * grid_w + x1],
        [
            (1.0 - ty) * (1.0 - tx),
            (1.0 - ty) * tx,
            ty * (1.0 - tx),
            ty * tx,
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn scalar_tensor(v: f64) -> Tensor {
        Tensor::from_elem((1, 1), v)
    }

    #[test]
    fn square_forward_and_backward() {
        let mut store = ParamStore::new();
        let x = store.add_param("x", scalar_tensor(3.0));
        let mut tape = Tape::new();
        let xn = tape.param(&store, x);
        let y = tape.mul(xn, xn);
        assert_eq!(tape.scalar(y), 9.0);
        tape.backward(y, scalar_tensor(1.0), &mut store).unwrap();
        assert_eq!(store.grad(x)[[0, 0]], 6.0);
    }

    #[test]
    fn sigmoid_forward_and_backward_at_zero() {
        let mut store = ParamStore::new();
        let x = store.add_param("x", scalar_tensor(0.0));
        let mut tape = Tape::new();
        let xn = tape.param(&store, x);
        let y = tape.sigmoid(xn);
        assert_eq!(tape.scalar(y), 0.5);
        tape.backward(y, scalar_tensor(1.0), &mut store).unwrap();
        assert_eq!(store.grad(x)[[0, 0]], 0.25);
    }

    #[test]
    fn backward_twice_rejected() {
        let mut store = ParamStore::new();
        let x = store.add_param("x", scalar_tensor(1.0));
        let mut tape = Tape::new();
        let xn = tape.param(&store, x);
        let y = tape.exp(xn);
        tape.backward(y, scalar_tensor(1.0), &mut store).unwrap();
        let again = tape.backward(y, scalar_tensor(1.0), &mut store);
        assert!(matches!(again, Err(AutodiffError::TapeConsumed)));
    }

    #[test]
    fn seed_shape_checked() {
        let mut store = ParamStore::new();
        let x = store.add_param("x", array![[1.0, 2.0]]);
        let mut tape = Tape::new();
        let xn = tape.param(&store, x);
        let y = tape.tanh(xn);
        let bad = tape.backward(y, scalar_tensor(1.0), &mut store);
        assert!(matches!(bad, Err(AutodiffError::SeedShape { .. })));
    }

    #[test]
    #[should_panic(expected = "affine")]
    fn affine_shape_mismatch_panics() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[1.0, 2.0]]);
        let w = tape.constant(array![[1.0], [2.0], [3.0]]);
        let b = tape.constant(array![[0.0]]);
        tape.affine(x, w, b);
    }

    #[test]
    fn two_layer_perceptron_matches_eager_oracle() {
        let mut rng = StdRng::seed_from_u64(42);
        let mut store = ParamStore::new();
        let w1v = Tensor::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let b1v = Tensor::from_shape_fn((1, 4), |_| rng.gen_range(-1.0..1.0));
        let w2v = Tensor::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
        let b2v = Tensor::from_shape_fn((1, 2), |_| rng.gen_range(-1.0..1.0));
        let xv = Tensor::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
        let w1 = store.add_param("w1", w1v.clone());
        let b1 = store.add_param("b1", b1v.clone());
        let w2 = store.add_param("w2", w2v.clone());
        let b2 = store.add_param("b2", b2v.clone());

        let mut tape = Tape::new();
        let x = tape.constant(xv.clone());
        let w1n = tape.param(&store, w1);
        let b1n = tape.param(&store, b1);
        let h_pre = tape.affine(x, w1n, b1n);
        let h = tape.tanh(h_pre);
        let w2n = tape.param(&store, w2);
        let b2n = tape.param(&store, b2);
        let out = tape.affine(h, w2n, b2n);

        // Eager evaluation, written independently of the tape path.
        let mut expected = xv.dot(&w1v);
        expected += &b1v.row(0);
        expected.mapv_inplace(f64::tanh);
        let mut expected = expected.dot(&w2v);
        expected += &b2v.row(0);

        let got = tape.value(out);
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    /// Central finite differences of a scalar-valued builder with respect to
    /// one parameter, compared against the analytic gradient.
    fn check_grad<F>(init: Tensor, tol: f64, build: F)
    where
        F: Fn(&mut Tape, &ParamStore, ParamId) -> NodeId,
    {
        let mut store = ParamStore::new();
        let p = store.add_param("p", init);
        let mut tape = Tape::new();
        let out = build(&mut tape, &store, p);
        assert_eq!(tape.value(out).dim(), (1, 1), "builder must produce a scalar");
        tape.backward(out, scalar_tensor(1.0), &mut store).unwrap();
        let analytic = store.grad(p).clone();

        let h = 1e-5;
        let dim = store.value(p).raw_dim();
        for idx in 0..store.value(p).len() {
            let (r, c) = (idx / dim[1], idx % dim[1]);
            let orig = store.value(p)[[r, c]];
            store.value_mut(p)[[r, c]] = orig + h;
            let mut t1 = Tape::new();
            let o1 = build(&mut t1, &store, p);
            let f_plus = t1.scalar(o1);
            store.value_mut(p)[[r, c]] = orig - h;
            let mut t2 = Tape::new();
            let o2 = build(&mut t2, &store, p);
            let f_minus = t2.scalar(o2);
            store.value_mut(p)[[r, c]] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[[r, c]];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / denom <= tol,
                "element ({r},{c}): analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(9);
        let init = Tensor::from_shape_fn((3, 4), |_| rng.gen_range(0.2..1.5));

        // affine (as x, as w, and as b), plus each elementwise op, each
        // reduction, cumsum, slicing, concatenation.
        check_grad(init.clone(), 1e-4, |t, s, p| {
            let x = t.param(s, p);
            let w = t.constant(Tensor::from_shape_fn((4, 2), |(i, j)| (i + 2 * j) as f64 * 0.1));
            let b = t.constant(array![[0.3, -0.2]]);
            let y = t.affine(x, w, b);
            let y = t.tanh(y);
            t.sum_all(y)
        });
        check_grad(init.clone(), 1e-4, |t, s, p| {
            let w = t.param(s, p); // param as weight matrix
            let x = t.constant(Tensor::from_shape_fn((2, 3), |(i, j)| 0.3 * (i as f64) - 0.2 * j as f64));
            let b = t.constant(array![[0.1, 0.2, 0.3, 0.4]]);
            let y = t.affine(x, w, b);
            let y = t.sigmoid(y);
            t.sum_all(y)
        });
        check_grad(array![[0.5, -0.3, 0.8]], 1e-4, |t, s, p| {
            let b = t.param(s, p);
            let x = t.constant(Tensor::from_shape_fn((4, 2), |(i, j)| 0.2 * i as f64 + 0.1 * j as f64));
            let w = t.constant(Tensor::from_shape_fn((2, 3), |(i, j)| 0.3 - 0.1 * (i + j) as f64));
            let y = t.affine(x, w, b);
            let y = t.softplus(y);
            t.sum_all(y)
        });
        for op in ["tanh", "sigmoid", "softplus", "exp", "log", "sqrt"] {
            check_grad(init.clone(), 1e-4, move |t, s, p| {
                let x = t.param(s, p);
                let y = match op {
                    "tanh" => t.tanh(x),
                    "sigmoid" => t.sigmoid(x),
                    "softplus" => t.softplus(x),
                    "exp" => t.exp(x),
                    "log" => t.log(x),
                    _ => t.sqrt(x),
                };
                t.sum_all(y)
            });
        }
        check_grad(init.clone(), 1e-4, |t, s, p| {
            let x = t.param(s, p);
            let c = t.constant(Tensor::from_shape_fn((3, 4), |(i, j)| 0.5 + 0.1 * (i * 4 + j) as f64));
            let y = t.mul(x, c);
            let y = t.div(y, x);
            let z = t.sub(y, x);
            let z = t.add(z, x);
            t.sum_all(z)
        });
        // broadcast paths: [B,1] against [B,C] and [1,C] against [B,C]
        check_grad(array![[0.7], [1.3], [0.4]], 1e-4, |t, s, p| {
            let col = t.param(s, p);
            let full = t.constant(Tensor::from_shape_fn((3, 4), |(i, j)| 1.0 + 0.2 * (i + j) as f64));
            let y = t.div(full, col);
            let y = t.mul(y, col);
            let z = t.add(full, col);
            let zz = t.mul(y, z);
            t.sum_all(zz)
        });
        check_grad(array![[0.7, 1.3, 0.4, 0.9]], 1e-4, |t, s, p| {
            let row = t.param(s, p);
            let full = t.constant(Tensor::from_shape_fn((3, 4), |(i, j)| 1.0 + 0.2 * (i + j) as f64));
            let y = t.mul(full, row);
            t.sum_all(y)
        });
        check_grad(init.clone(), 1e-4, |t, s, p| {
            let x = t.param(s, p);
            let y = t.sum_rows(x);
            let y = t.l2_norm_rows(y);
            t.sum_all(y)
        });
        check_grad(init.clone(), 1e-4, |t, s, p| {
            let x = t.param(s, p);
            let y = t.l2_norm_rows(x);
            t.sum_all(y)
        });
        check_grad(init.clone(), 1e-4, |t, s, p| {
            let x = t.param(s, p);
            let y = t.cumsum_exclusive_rows(x);
            let w = t.constant(Tensor::from_shape_fn((3, 4), |(i, j)| 0.1 + 0.3 * ((i + j) % 3) as f64));
            let y = t.mul(y, w);
            t.sum_all(y)
        });
        check_grad(init.clone(), 1e-4, |t, s, p| {
            let x = t.param(s, p);
            let a = t.slice_cols(x, 0, 2);
            let b = t.slice_cols(x, 2, 2);
            let swapped = t.concat_cols(&[b, a]);
            let y = t.exp(swapped);
            t.sum_all(y)
        });
        check_grad(init.clone(), 1e-4, |t, s, p| {
            let x = t.param(s, p);
            let flat = t.reshape(x, 2, 6);
            let w = t.constant(Tensor::from_shape_fn((2, 6), |(i, j)| 0.2 + 0.1 * (i * 6 + j) as f64));
            let y = t.mul(flat, w);
            t.sum_all(y)
        });
        // grid lookup and row gather
        check_grad(Tensor::from_shape_fn((6, 2), |(i, j)| 0.1 * i as f64 + 0.05 * j as f64), 1e-4, |t, s, p| {
            let grid = t.param(s, p);
            let q = [(0.2, 0.7), (0.0, 0.0), (1.0, 1.0), (0.61, 0.13)];
            let y = t.bilinear_lookup(grid, 3, 2, &q);
            let y = t.tanh(y);
            t.sum_all(y)
        });
        check_grad(Tensor::from_shape_fn((5, 3), |(i, j)| 0.2 * i as f64 - 0.1 * j as f64), 1e-4, |t, s, p| {
            let table = t.param(s, p);
            let y = t.gather_rows(table, &[4, 0, 0, 2]);
            let y = t.sigmoid(y);
            t.sum_all(y)
        });
    }

    #[test]
    fn random_composite_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(77);
        let init = Tensor::from_shape_fn((4, 3), |_| rng.gen_range(0.3..1.2));
        check_grad(init, 1e-4, |t, s, p| {
            let x = t.param(s, p);
            let w = t.constant(Tensor::from_shape_fn((3, 5), |(i, j)| 0.11 * i as f64 - 0.07 * j as f64));
            let b = t.constant(Tensor::from_shape_fn((1, 5), |(_, j)| 0.05 * j as f64));
            let h = t.affine(x, w, b);
            let h = t.tanh(h);
            let e = t.exp(h);
            let sp = t.softplus(e);
            let plus = t.add_scalar(sp, 1.0);
            let lg = t.log(plus);
            let nrm = t.l2_norm_rows(lg);
            let sum = t.sum_rows(x);
            let scaled = t.mul(nrm, sum);
            let sq2 = t.mul(scaled, scaled);
            let magnitude = t.sqrt(sq2);
            t.mean_all(magnitude)
        });
    }

    #[test]
    fn gradient_accumulation_is_additive_and_order_independent() {
        let mut store = ParamStore::new();
        let p = store.add_param("p", array![[0.4, -0.7, 1.1]]);

        let run = |store: &mut ParamStore, order: [usize; 3]| -> Tensor {
            store.zero_grads();
            let builders: [fn(&mut Tape, NodeId) -> NodeId; 3] = [
                |t, x| {
                    let y = t.tanh(x);
                    t.sum_all(y)
                },
                |t, x| {
                    let y = t.mul(x, x);
                    t.sum_all(y)
                },
                |t, x| {
                    let y = t.exp(x);
                    t.sum_all(y)
                },
            ];
            for idx in order {
                let mut tape = Tape::new();
                let x = tape.param(store, p);
                let out = builders[idx](&mut tape, x);
                tape.backward(out, Tensor::from_elem((1, 1), 1.0), store).unwrap();
            }
            store.grad(p).clone()
        };

        let g1 = run(&mut store, [0, 1, 2]);
        let g2 = run(&mut store, [2, 0, 1]);
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn lookup_at_node_and_midpoint() {
        let mut tape = Tape::new();
        // 2x2 grid, one channel: values 1,2,3,4 row-major
        let grid = tape.constant(array![[1.0], [2.0], [3.0], [4.0]]);
        let out = tape.bilinear_lookup(grid, 2, 2, &[(0.0, 0.0), (1.0, 0.0), (0.5, 0.5)]);
        let v = tape.value(out);
        assert_eq!(v[[0, 0]], 1.0);
        assert_eq!(v[[1, 0]], 2.0);
        assert_eq!(v[[2, 0]], 2.5); // mean of the four nodes
    }

    #[test]
    fn lookup_matches_naive_oracle() {
        let mut rng = StdRng::seed_from_u64(13);
        let (gh, gw, ch) = (5, 7, 3);
        let grid_data = Tensor::from_shape_fn((gh * gw, ch), |_| rng.gen_range(-1.0..1.0));
        let queries: Vec<(f64, f64)> = (0..200)
            .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
            .collect();
        let mut tape = Tape::new();
        let grid = tape.constant(grid_data.clone());
        let out = tape.bilinear_lookup(grid, gh, gw, &queries);
        let got = tape.value(out);
        for (r, &(qx, qy)) in queries.iter().enumerate() {
            // dense naive interpolation, written from the definition
            let fx = qx * (gw - 1) as f64;
            let fy = qy * (gh - 1) as f64;
            let x0 = fx.floor() as usize;
            let y0 = fy.floor() as usize;
            let x1 = (x0 + 1).min(gw - 1);
            let y1 = (y0 + 1).min(gh - 1);
            let tx = fx - x0 as f64;
            let ty = fy - y0 as f64;
            for c in 0..ch {
                let v00 = grid_data[[y0 * gw + x0, c]];
                let v01 = grid_data[[y0 * gw + x1, c]];
                let v10 = grid_data[[y1 * gw + x0, c]];
                let v11 = grid_data[[y1 * gw + x1, c]];
                let expect = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01)
                    + ty * ((1.0 - tx) * v10 + tx * v11);
                assert!((got[[r, c]] - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cumsum_exclusive_value() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[1.0, 2.0, 3.0], [10.0, 20.0, 30.0]]);
        let y = tape.cumsum_exclusive_rows(x);
        let v = tape.value(y);
        assert_eq!(v, &array![[0.0, 1.0, 3.0], [0.0, 10.0, 30.0]]);
    }
}
