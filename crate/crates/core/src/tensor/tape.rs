use super::{axis_extents, strides, Tensor, LEAKY_RELU_SLOPE};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    AddScalar(f64),
    MulScalar(f64),
    Sigmoid,
    LeakyRelu,
    Exp,
    Log,
    Square,
    /// `ln(1 + e^x)`, evaluated stably.
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Population variance (divides by the count).
    Variance,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
        b_index: Bcast,
    },
    Unary(UnaryOp, Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Reduce {
        op: ReduceOp,
        x: Var,
        axis: Option<usize>,
    },
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterAdd {
        x: Var,
        rows: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    PrefixMean {
        x: Var,
        axis: usize,
    },
    Overwrite {
        x: Var,
        spans: Vec<(usize, usize)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every operation's inputs
/// precede it and a reverse sweep is a valid topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], one slot per recorded leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulates the gradient of `v` into `target.grad`. A leaf that did
    /// not influence the loss contributes zeros.
    pub fn apply_to(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![0.0; target.numel()]),
        }
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a leaf, honoring `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        let mut t = t;
        t.grad = None;
        self.push(t, Op::Leaf, rg)
    }

    /// Registers a copy of a trainable tensor.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut v = t.clone();
        v.grad = None;
        v.requires_grad = true;
        self.push(v, Op::Leaf, true)
    }

    /// Registers a value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// First element; the value of a scalar.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(
            &self.value(a).data,
            &self.value(b).data,
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul(a, b),
            rg,
        ))
    }

    /// Elementwise binary operation. `b` must be broadcastable to the shape
    /// of `a` (left-padded with ones, each dimension equal or 1); for `Add`
    /// and `Mul` the operands are swapped when only `a` broadcasts.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (mut a, mut b) = (a, b);
        if matches!(op, BinaryOp::Add | BinaryOp::Mul)
            && !broadcastable(self.shape(a), self.shape(b))
            && broadcastable(self.shape(b), self.shape(a))
        {
            std::mem::swap(&mut a, &mut b);
        }
        let b_index = broadcast_map(self.shape(a), self.shape(b))
            .ok_or_else(|| Error::shape(binary_name(op), self.shape(a), self.shape(b)))?;
        let av = &self.value(a).data;
        let bv = &self.value(b).data;
        let f = |x: f64, y: f64| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let out: Vec<f64> = match &b_index {
            Bcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Tile(_) => av
                .chunks(bv.len())
                .flat_map(|c| c.iter().zip(bv).map(|(&x, &y)| f(x, y)))
                .collect(),
            Bcast::Spread(w) => av
                .chunks(*w)
                .zip(bv)
                .flat_map(|(c, &y)| c.iter().map(move |&x| f(x, y)))
                .collect(),
            Bcast::Map(idx) => av.iter().zip(idx).map(|(&x, &j)| f(x, bv[j])).collect(),
        };
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Binary { op, a, b, b_index },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Var {
        let xv = self.value(x);
        let out: Vec<f64> = xv.data.iter().map(|&v| unary_forward(op, v)).collect();
        let shape = xv.shape.clone();
        let rg = self.rg(x);
        self.push(
            Tensor {
                shape,
                data: out,
                requires_grad: false,
                grad: None,
            },
            Op::Unary(op, x),
            rg,
        )
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryOp::AddScalar(c), x)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryOp::MulScalar(c), x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::LeakyRelu, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Square, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Softplus, x)
    }

    /// Softmax along `axis`, stabilized by subtracting the axis maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for rank {}",
                xv.rank()
            )));
        }
        let (outer, len, inner) = axis_extents(&xv.shape, axis);
        let mut out = vec![0.0; xv.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len)
                    .map(|j| xv.data[base + j * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (xv.data[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let shape = xv.shape.clone();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Reduces along `axis` (removing it) or over every element when
    /// `axis` is `None` (producing a scalar).
    pub fn reduce(&mut self, op: ReduceOp, x: Var, axis: Option<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (outer, len, inner, shape) = match axis {
            None => (1, xv.numel(), 1, Vec::new()),
            Some(ax) => {
                if ax >= xv.rank() {
                    return Err(Error::invalid(format!(
                        "reduce axis {ax} out of range for rank {}",
                        xv.rank()
                    )));
                }
                let (o, l, i) = axis_extents(&xv.shape, ax);
                let mut s = xv.shape.clone();
                s.remove(ax);
                (o, l, i, s)
            }
        };
        if len == 0 {
            return Err(Error::invalid("reduction over an empty axis"));
        }
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let sum: f64 = (0..len).map(|j| xv.data[base + j * inner]).sum();
                out[o * inner + i] = match op {
                    ReduceOp::Sum => sum,
                    ReduceOp::Mean => sum / len as f64,
                    ReduceOp::Variance => {
                        let mean = sum / len as f64;
                        (0..len)
                            .map(|j| (xv.data[base + j * inner] - mean).powi(2))
                            .sum::<f64>()
                            / len as f64
                    }
                };
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Reduce { op, x, axis }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        self.reduce(ReduceOp::Sum, x, None)
            .expect("sum over a non-empty tensor")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        self.reduce(ReduceOp::Mean, x, None)
            .expect("mean over a non-empty tensor")
    }

    /// Selects rows (entries of axis 0) by index; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(Error::invalid("gather_rows on a scalar"));
        }
        let n = xv.shape[0];
        let width = xv.numel() / n.max(1);
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= n {
                return Err(Error::invalid(format!("row {r} out of range for {n} rows")));
            }
            out.extend_from_slice(&xv.data[r * width..(r + 1) * width]);
        }
        let mut shape = xv.shape.clone();
        shape[0] = rows.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Sums row `i` of `x` into row `rows[i]` of an `n`-row zero tensor.
    pub fn scatter_add_rows(&mut self, x: Var, rows: &[usize], n: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 || xv.shape[0] != rows.len() {
            return Err(Error::shape("scatter_add_rows", &xv.shape, &[rows.len()]));
        }
        let width = xv.numel() / rows.len().max(1);
        let mut out = vec![0.0; n * width];
        for (i, &r) in rows.iter().enumerate() {
            if r >= n {
                return Err(Error::invalid(format!("row {r} out of range for {n} rows")));
            }
            let dst = &mut out[r * width..(r + 1) * width];
            for (d, s) in dst.iter_mut().zip(&xv.data[i * width..(i + 1) * width]) {
                *d += s;
            }
        }
        let mut shape = xv.shape.clone();
        shape[0] = n;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::ScatterAdd {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::invalid("concat axis out of range"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same_rest = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(Error::shape("concat", &base_shape, s));
            }
            total += s[axis];
        }
        let mut shape = base_shape.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let xv = self.value(v);
                let chunk = xv.shape[axis] * inner;
                out.extend_from_slice(&xv.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || start + len > xv.shape[axis] {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) of axis {axis} out of range for {:?}",
                start + len,
                xv.shape
            )));
        }
        let (outer, full, inner) = axis_extents(&xv.shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = o * full * inner + start * inner;
            out.extend_from_slice(&xv.data[off..off + len * inner]);
        }
        let mut shape = xv.shape.clone();
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.numel() {
            return Err(Error::shape("reshape", &xv.shape, shape));
        }
        let data = xv.data.clone();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::Reshape(x), rg))
    }

    /// Running mean along `axis`: entry `j` is the mean of entries `0..=j`.
    pub fn prefix_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::invalid("prefix_mean axis out of range"));
        }
        let (outer, len, inner) = axis_extents(&xv.shape, axis);
        let mut out = vec![0.0; xv.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut run = 0.0;
                for j in 0..len {
                    run += xv.data[base + j * inner];
                    out[base + j * inner] = run / (j + 1) as f64;
                }
            }
        }
        let shape = xv.shape.clone();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::PrefixMean { x, axis }, rg))
    }

    /// Copies `x` and overwrites each flat span `(offset, len)` with the
    /// next `len` entries of `values`. Overwritten entries pass no gradient
    /// back to `x`, and `values` never receives gradient.
    pub fn overwrite(&mut self, x: Var, spans: &[(usize, usize)], values: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        let need: usize = spans.iter().map(|s| s.1).sum();
        if need != values.len() {
            return Err(Error::shape("overwrite", &[need], &[values.len()]));
        }
        let mut out = xv.data.clone();
        let mut cursor = 0;
        for &(off, len) in spans {
            if off + len > out.len() {
                return Err(Error::invalid("overwrite span out of range"));
            }
            out[off..off + len].copy_from_slice(&values[cursor..cursor + len]);
            cursor += len;
        }
        let shape = xv.shape.clone();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Overwrite {
                x,
                spans: spans.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients from every use of a
    /// value are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
        }
        // Keep only leaf gradients.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                if self.rg(*a) {
                    // g [m,n] · bᵀ [n,k]
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv.data[p * n..(p + 1) * n];
                            ga[i * k + p] = dot(grow, brow);
                        }
                    }
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    // aᵀ [k,m] · g [m,n]
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = av.data[i * k + p];
                            if s != 0.0 {
                                let dst = &mut gb[p * n..(p + 1) * n];
                                for (d, &x) in dst.iter_mut().zip(grow) {
                                    *d += s * x;
                                }
                            }
                        }
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Binary { op, a, b, b_index } => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                let bi = |i: usize| b_index.index(i);
                if self.rg(*a) {
                    let ga: Vec<f64> = (0..av.len())
                        .map(|i| match op {
                            BinaryOp::Add | BinaryOp::Sub => g[i],
                            BinaryOp::Mul => g[i] * bv[bi(i)],
                            BinaryOp::Div => g[i] / bv[bi(i)],
                        })
                        .collect();
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; bv.len()];
                    for i in 0..av.len() {
                        let j = bi(i);
                        gb[j] += match op {
                            BinaryOp::Add => g[i],
                            BinaryOp::Sub => -g[i],
                            BinaryOp::Mul => g[i] * av[i],
                            BinaryOp::Div => -g[i] * av[i] / (bv[j] * bv[j]),
                        };
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Unary(op, x) => {
                let xv = &self.value(*x).data;
                let gx: Vec<f64> = xv
                    .iter()
                    .zip(&out.data)
                    .zip(g)
                    .map(|((&xi, &yi), &gi)| gi * unary_derivative(*op, xi, yi))
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_extents(&out.shape, *axis);
                let y = &out.data;
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let s: f64 = (0..len)
                            .map(|j| g[base + j * inner] * y[base + j * inner])
                            .sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            gx[p] = y[p] * (g[p] - s);
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Reduce { op, x, axis } => {
                let xv = self.value(*x);
                let (outer, len, inner) = match axis {
                    None => (1, xv.numel(), 1),
                    Some(ax) => axis_extents(&xv.shape, *ax),
                };
                let mut gx = vec![0.0; xv.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let go = g[o * inner + i];
                        match op {
                            ReduceOp::Sum => {
                                for j in 0..len {
                                    gx[base + j * inner] = go;
                                }
                            }
                            ReduceOp::Mean => {
                                for j in 0..len {
                                    gx[base + j * inner] = go / len as f64;
                                }
                            }
                            ReduceOp::Variance => {
                                let mean = (0..len)
                                    .map(|j| xv.data[base + j * inner])
                                    .sum::<f64>()
                                    / len as f64;
                                for j in 0..len {
                                    let p = base + j * inner;
                                    gx[p] = 2.0 * (xv.data[p] - mean) * go / len as f64;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Gather { x, rows } => {
                let xv = self.value(*x);
                let width = xv.numel() / xv.shape[0].max(1);
                let mut gx = vec![0.0; xv.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    let dst = &mut gx[r * width..(r + 1) * width];
                    for (d, s) in dst.iter_mut().zip(&g[i * width..(i + 1) * width]) {
                        *d += s;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::ScatterAdd { x, rows } => {
                let xv = self.value(*x);
                let width = xv.numel() / rows.len().max(1);
                let mut gx = Vec::with_capacity(xv.numel());
                for &r in rows {
                    gx.extend_from_slice(&g[r * width..(r + 1) * width]);
                }
                accumulate(grads, *x, gx);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_extents(&out.shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.rg(v) {
                        let mut gx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let off = o * total * inner + offset * inner;
                            gx.extend_from_slice(&g[off..off + len * inner]);
                        }
                        accumulate(grads, v, gx);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xv = self.value(*x);
                let (outer, full, inner) = axis_extents(&xv.shape, *axis);
                let len = out.shape[*axis];
                let mut gx = vec![0.0; xv.numel()];
                for o in 0..outer {
                    let off = o * full * inner + start * inner;
                    gx[off..off + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::PrefixMean { x, axis } => {
                let (outer, len, inner) = axis_extents(&out.shape, *axis);
                let mut gx = vec![0.0; out.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut run = 0.0;
                        for j in (0..len).rev() {
                            run += g[base + j * inner] / (j + 1) as f64;
                            gx[base + j * inner] = run;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Overwrite { x, spans } => {
                let mut gx = g.to_vec();
                for &(off, len) in spans {
                    gx[off..off + len].fill(0.0);
                }
                accumulate(grads, *x, gx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn binary_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn unary_forward(op: UnaryOp, x: f64) -> f64 {
    match op {
        UnaryOp::AddScalar(c) => x + c,
        UnaryOp::MulScalar(c) => x * c,
        UnaryOp::Sigmoid => sigmoid(x),
        UnaryOp::LeakyRelu => {
            if x >= 0.0 {
                x
            } else {
                LEAKY_RELU_SLOPE * x
            }
        }
        UnaryOp::Exp => x.exp(),
        UnaryOp::Log => x.ln(),
        UnaryOp::Square => x * x,
        UnaryOp::Softplus => softplus(x),
    }
}

/// d(op)/dx given input `x` and output `y`.
fn unary_derivative(op: UnaryOp, x: f64, y: f64) -> f64 {
    match op {
        UnaryOp::AddScalar(_) => 1.0,
        UnaryOp::MulScalar(c) => c,
        UnaryOp::Sigmoid => y * (1.0 - y),
        UnaryOp::LeakyRelu => {
            if x >= 0.0 {
                1.0
            } else {
                LEAKY_RELU_SLOPE
            }
        }
        UnaryOp::Exp => y,
        UnaryOp::Log => 1.0 / x,
        UnaryOp::Square => 2.0 * x,
        UnaryOp::Softplus => sigmoid(x),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out[m,n] = a[m,k] · b[k,n]`, i-k-j loop order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &x) in orow.iter_mut().zip(brow) {
                *o += s * x;
            }
        }
    }
}

/// How an element of a broadcast operand is found from an output index.
#[derive(Debug, Clone)]
enum Bcast {
    Same,
    /// `b` repeats every `len` elements (`b` is a suffix of `a`'s shape).
    Tile(usize),
    /// Each element of `b` covers `w` consecutive outputs (`b` is `a`'s
    /// shape with trailing dimensions set to 1).
    Spread(usize),
    Map(Vec<usize>),
}

impl Bcast {
    fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Tile(len) => i % len,
            Bcast::Spread(w) => i / w,
            Bcast::Map(m) => m[i],
        }
    }
}

fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && b.iter().rev().zip(a.iter().rev()).all(|(&pb, &pa)| pb == pa || pb == 1)
}

/// Broadcast of `b` onto `a`'s shape; `None` when not broadcastable.
fn broadcast_map(a: &[usize], b: &[usize]) -> Option<Bcast> {
    if a == b {
        return Some(Bcast::Same);
    }
    if !broadcastable(a, b) {
        return None;
    }
    let pad = a.len() - b.len();
    let padded: Vec<usize> = std::iter::repeat_n(1, pad).chain(b.iter().copied()).collect();
    let numel_b: usize = padded.iter().product();
    if numel_b == 0 {
        return Some(Bcast::Map(Vec::new()));
    }
    // Leading ones, then a suffix equal to `a`'s.
    let lead = padded.iter().take_while(|&&d| d == 1).count();
    if padded[lead..] == a[lead..] {
        return Some(Bcast::Tile(numel_b));
    }
    // A prefix equal to `a`'s, then trailing ones.
    let keep = padded.len() - padded.iter().rev().take_while(|&&d| d == 1).count();
    if padded[..keep] == a[..keep] {
        return Some(Bcast::Spread(a[keep..].iter().product()));
    }
    let bstr = strides(&padded);
    let eff: Vec<usize> = padded
        .iter()
        .zip(&bstr)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let n: usize = a.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; a.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        // odometer increment
        for d in (0..a.len()).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < a[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(Bcast::Map(map))
}
