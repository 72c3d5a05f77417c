//! Wengert tape: reverse-mode automatic differentiation over `f64` matrices.
//!
//! The forward pass records each operation into a linear tape; `backward`
//! replays it in reverse, accumulating vector-Jacobian products. Backbone
//! weights enter the graph as constant leaves, so gradients only ever reach
//! the prompt parameters registered with `param`.
//!
//! Forward kernels delegate to [`crate::math`], so a tape forward pass is
//! bit-identical to the plain (non-recorded) forward path.

use ndarray::{Array1, Array2, Axis};

use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// k * x + c, scalar coefficients.
    Affine {
        a: NodeId,
        k: f64,
    },
    Matmul(NodeId, NodeId),
    /// a . b^T
    MatmulNT(NodeId, NodeId),
    AddRow {
        a: NodeId,
    },
    AddConst {
        a: NodeId,
    },
    MulConst {
        a: NodeId,
        c: Array2<f64>,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows {
        a: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        a: NodeId,
        start: usize,
        len: usize,
    },
    SoftmaxRows(NodeId),
    LayerNormRows {
        a: NodeId,
        gamma: Array1<f64>,
    },
    QuickGelu(NodeId),
    L2NormalizeRows(NodeId),
    LogClamped {
        a: NodeId,
        floor: f64,
    },
    PowConst {
        a: NodeId,
        p: f64,
    },
    Sum(NodeId),
    Mean(NodeId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to the given node. Zero array if the
    /// node did not participate.
    pub fn get(&self, tape: &Tape, id: NodeId) -> Array2<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(tape.val(id).dim()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn val(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A constant leaf: gradients are not tracked through it.
    pub fn constant(&mut self, v: Array2<f64>) -> NodeId {
        self.push(v, Op::Leaf, false)
    }

    /// A trainable leaf: `backward` reports its gradient.
    pub fn param(&mut self, v: Array2<f64>) -> NodeId {
        self.push(v, Op::Leaf, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.val(a) + self.val(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.val(a) - self.val(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.val(a) * self.val(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.val(a) / self.val(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Div(a, b), rg)
    }

    pub fn affine(&mut self, a: NodeId, k: f64, c: f64) -> NodeId {
        // The c == 0 form must stay bit-identical to a plain `k * x`.
        let v = if c == 0.0 {
            self.val(a).mapv(|x| k * x)
        } else {
            self.val(a).mapv(|x| k * x + c)
        };
        let rg = self.rg(a);
        self.push(v, Op::Affine { a, k }, rg)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.affine(a, k, 0.0)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.val(a).dot(self.val(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Matmul(a, b), rg)
    }

    /// `a . b^T` — the shape used for linear layers and similarity logits.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.val(a).dot(&self.val(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatmulNT(a, b), rg)
    }

    pub fn add_row(&mut self, a: NodeId, bias: Array1<f64>) -> NodeId {
        let v = self.val(a) + &bias;
        let rg = self.rg(a);
        self.push(v, Op::AddRow { a }, rg)
    }

    pub fn add_const(&mut self, a: NodeId, c: Array2<f64>) -> NodeId {
        let v = self.val(a) + &c;
        let rg = self.rg(a);
        self.push(v, Op::AddConst { a }, rg)
    }

    pub fn mul_const(&mut self, a: NodeId, c: Array2<f64>) -> NodeId {
        let v = self.val(a) * &c;
        let rg = self.rg(a);
        self.push(v, Op::MulConst { a, c }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.val(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self
            .val(a)
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        let rg = self.rg(a);
        self.push(v, Op::SliceRows { a, start, len }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.val(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self
            .val(a)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        let rg = self.rg(a);
        self.push(v, Op::SliceCols { a, start, len }, rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = math::softmax_rows(self.val(a));
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn layer_norm_rows(&mut self, a: NodeId, gamma: Array1<f64>, beta: Array1<f64>) -> NodeId {
        let v = math::layer_norm_rows(self.val(a), &gamma, &beta);
        let rg = self.rg(a);
        self.push(v, Op::LayerNormRows { a, gamma }, rg)
    }

    pub fn quick_gelu(&mut self, a: NodeId) -> NodeId {
        let v = math::quick_gelu_array(self.val(a));
        let rg = self.rg(a);
        self.push(v, Op::QuickGelu(a), rg)
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let v = math::l2_normalize_rows(self.val(a));
        let rg = self.rg(a);
        self.push(v, Op::L2NormalizeRows(a), rg)
    }

    /// `ln(max(x, floor))`; gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: NodeId, floor: f64) -> NodeId {
        let v = self.val(a).mapv(|x| x.max(floor).ln());
        let rg = self.rg(a);
        self.push(v, Op::LogClamped { a, floor }, rg)
    }

    pub fn pow_const(&mut self, a: NodeId, p: f64) -> NodeId {
        let v = self.val(a).mapv(|x| x.powf(p));
        let rg = self.rg(a);
        self.push(v, Op::PowConst { a, p }, rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.val(a).sum();
        let rg = self.rg(a);
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.val(a).len() as f64;
        let s = self.val(a).sum() / n;
        let rg = self.rg(a);
        self.push(Array2::from_elem((1, 1), s), Op::Mean(a), rg)
    }

    pub fn scalar_value(&self, a: NodeId) -> f64 {
        debug_assert_eq!(self.val(a).dim(), (1, 1));
        self.val(a)[(0, 0)]
    }

    /// Reverse pass from a scalar (1x1) root.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.val(root).dim(), (1, 1), "backward root must be 1x1");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let dy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &dy, &mut grads);
            // Leaves keep their gradient for the caller.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(dy);
            }
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
        if !self.rg(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn accumulate(&self, i: usize, dy: &Array2<f64>, grads: &mut Vec<Option<Array2<f64>>>) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, dy.clone());
                self.acc(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, dy.clone());
                self.acc(grads, *b, -dy);
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, dy * self.val(*b));
                self.acc(grads, *b, dy * self.val(*a));
            }
            Op::Div(a, b) => {
                let bv = self.val(*b);
                self.acc(grads, *a, dy / bv);
                let db = -(dy * self.val(*a)) / (bv * bv);
                self.acc(grads, *b, db);
            }
            Op::Affine { a, k } => {
                self.acc(grads, *a, dy * *k);
            }
            Op::Matmul(a, b) => {
                self.acc(grads, *a, dy.dot(&self.val(*b).t()));
                self.acc(grads, *b, self.val(*a).t().dot(dy));
            }
            Op::MatmulNT(a, b) => {
                self.acc(grads, *a, dy.dot(self.val(*b)));
                self.acc(grads, *b, dy.t().dot(self.val(*a)));
            }
            Op::AddRow { a } => {
                self.acc(grads, *a, dy.clone());
            }
            Op::AddConst { a } => {
                self.acc(grads, *a, dy.clone());
            }
            Op::MulConst { a, c } => {
                self.acc(grads, *a, dy * c);
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for p in parts {
                    let n = self.val(*p).nrows();
                    let slice = dy.slice(ndarray::s![row..row + n, ..]).to_owned();
                    self.acc(grads, *p, slice);
                    row += n;
                }
            }
            Op::SliceRows { a, start, len } => {
                let mut da = Array2::zeros(self.val(*a).dim());
                da.slice_mut(ndarray::s![*start..*start + *len, ..])
                    .assign(dy);
                self.acc(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for p in parts {
                    let n = self.val(*p).ncols();
                    let slice = dy.slice(ndarray::s![.., col..col + n]).to_owned();
                    self.acc(grads, *p, slice);
                    col += n;
                }
            }
            Op::SliceCols { a, start, len } => {
                let mut da = Array2::zeros(self.val(*a).dim());
                da.slice_mut(ndarray::s![.., *start..*start + *len])
                    .assign(dy);
                self.acc(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut dx = dy * y;
                for (mut dx_row, y_row) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let s: f64 = dx_row.sum();
                    for (d, yv) in dx_row.iter_mut().zip(y_row.iter()) {
                        *d -= s * yv;
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::LayerNormRows { a, gamma } => {
                let x = self.val(*a);
                let n = x.ncols() as f64;
                let mut dx = Array2::zeros(x.dim());
                for (r, x_row) in x.rows().into_iter().enumerate() {
                    let mean = x_row.sum() / n;
                    let var = x_row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv_std = 1.0 / (var + math::LN_EPS).sqrt();
                    let xhat: Vec<f64> = x_row.iter().map(|v| (v - mean) * inv_std).collect();
                    let g: Vec<f64> = dy
                        .row(r)
                        .iter()
                        .zip(gamma.iter())
                        .map(|(d, gm)| d * gm)
                        .collect();
                    let g_mean = g.iter().sum::<f64>() / n;
                    let gx_mean = g.iter().zip(&xhat).map(|(gv, xv)| gv * xv).sum::<f64>() / n;
                    for j in 0..x.ncols() {
                        dx[(r, j)] = inv_std * (g[j] - g_mean - xhat[j] * gx_mean);
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::QuickGelu(a) => {
                let dx = self.val(*a).mapv(math::quick_gelu_grad) * dy;
                self.acc(grads, *a, dx);
            }
            Op::L2NormalizeRows(a) => {
                let x = self.val(*a);
                let y = &self.nodes[i].value;
                let mut dx = Array2::zeros(x.dim());
                for (r, x_row) in x.rows().into_iter().enumerate() {
                    let norm = x_row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let dot: f64 = y
                        .row(r)
                        .iter()
                        .zip(dy.row(r).iter())
                        .map(|(yv, dv)| yv * dv)
                        .sum();
                    for j in 0..x.ncols() {
                        dx[(r, j)] = (dy[(r, j)] - y[(r, j)] * dot) / norm;
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::LogClamped { a, floor } => {
                let x = self.val(*a);
                let dx = ndarray::Zip::from(x)
                    .and(dy)
                    .map_collect(|&xv, &dv| if xv > *floor { dv / xv } else { 0.0 });
                self.acc(grads, *a, dx);
            }
            Op::PowConst { a, p } => {
                let x = self.val(*a);
                let dx = ndarray::Zip::from(x).and(dy).map_collect(|&xv, &dv| {
                    if xv == 0.0 && *p <= 1.0 {
                        0.0
                    } else {
                        dv * *p * xv.powf(*p - 1.0)
                    }
                });
                self.acc(grads, *a, dx);
            }
            Op::Sum(a) => {
                let d = dy[(0, 0)];
                self.acc(grads, *a, Array2::from_elem(self.val(*a).dim(), d));
            }
            Op::Mean(a) => {
                let n = self.val(*a).len() as f64;
                let d = dy[(0, 0)] / n;
                self.acc(grads, *a, Array2::from_elem(self.val(*a).dim(), d));
            }
        }
    }
}
