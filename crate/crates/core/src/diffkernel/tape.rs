use super::{Array, KernelError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused primitive with a hand-written vector-Jacobian product.
///
/// The forward value is computed by the caller and recorded with
/// [`Tape::custom`]; only the adjoint lives here.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one adjoint per input (`None` when the input gets nothing).
    fn vjp(&self, inputs: &[&Array], output: &Array, grad: &Array) -> Vec<Option<Array>>;
}

/// Reduction axis for 2-D reductions. `Rows` collapses axis 0, `Cols` axis 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    All,
    Rows,
    Cols,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var, Axis),
    Mean(Var, Axis),
    NormL1(Var, Axis),
    NormL2(Var, Axis),
    Concat(Vec<Var>),
    Gather(Var, Vec<usize>),
    StopGradient,
    Reshape(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode record of array operations.
///
/// Nodes are appended in evaluation order, so every operand precedes its
/// consumers. Stop-gradient nodes can be replayed with frozen values (see
/// [`Tape::with_frozen`]) which is how finite-difference oracles hold detached
/// branches constant.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    frozen: Option<Vec<Array>>,
    sg_count: usize,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> KernelError {
    KernelError::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

/// Output dims for a broadcast binary op.
fn broadcast_dims(
    op: &'static str,
    a: &Array,
    b: &Array,
) -> Result<((usize, usize), Vec<usize>), KernelError> {
    let err = || shape_err(op, &[a.shape(), b.shape()]);
    if a.shape() == b.shape() {
        let d = a.dims2().unwrap_or((a.len(), 1));
        return Ok((d, a.shape().to_vec()));
    }
    let (ar, ac) = a.dims2().ok_or_else(err)?;
    let (br, bc) = b.dims2().ok_or_else(err)?;
    let r = ar.max(br);
    let c = ac.max(bc);
    if (ar != r && ar != 1) || (br != r && br != 1) || (ac != c && ac != 1) || (bc != c && bc != 1)
    {
        return Err(err());
    }
    let shape = if (ar, ac) == (r, c) {
        a.shape().to_vec()
    } else if (br, bc) == (r, c) {
        b.shape().to_vec()
    } else {
        vec![r, c]
    };
    Ok(((r, c), shape))
}

fn binary_map(
    a: &Array,
    b: &Array,
    (r, c): (usize, usize),
    shape: Vec<usize>,
    f: impl Fn(f64, f64) -> f64,
) -> Array {
    let ad = a.data();
    let bd = b.data();
    let data: Vec<f64> = if ad.len() == bd.len() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if bd.len() == 1 {
        let y = bd[0];
        ad.iter().map(|&x| f(x, y)).collect()
    } else if ad.len() == 1 {
        let x = ad[0];
        bd.iter().map(|&y| f(x, y)).collect()
    } else {
        let (ar, ac) = a.dims2().unwrap();
        let (br, bc) = b.dims2().unwrap();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let ia = if ar == 1 { 0 } else { i };
            let ib = if br == 1 { 0 } else { i };
            for j in 0..c {
                let ja = if ac == 1 { 0 } else { j };
                let jb = if bc == 1 { 0 } else { j };
                out.push(f(ad[ia * ac + ja], bd[ib * bc + jb]));
            }
        }
        out
    };
    Array::new(shape, data).expect("broadcast shape")
}

/// Sums a broadcast gradient `g` (dims `(r, c)`) back down to `target`'s shape.
fn unbroadcast(g: &Array, target: &Array) -> Array {
    if g.len() == target.len() {
        return Array::new(target.shape().to_vec(), g.data().to_vec()).unwrap();
    }
    let (r, c) = g.dims2().unwrap_or((g.len(), 1));
    let (tr, tc) = target.dims2().unwrap();
    let mut out = vec![0.0; tr * tc];
    let gd = g.data();
    for i in 0..r {
        let ti = if tr == 1 { 0 } else { i };
        for j in 0..c {
            let tj = if tc == 1 { 0 } else { j };
            out[ti * tc + tj] += gd[i * c + j];
        }
    }
    Array::new(target.shape().to_vec(), out).unwrap()
}

fn reduce_shape(op: &'static str, a: &Array, axis: Axis) -> Result<(usize, usize, Vec<usize>), KernelError> {
    let (r, c) = match axis {
        Axis::All => (a.len(), 1),
        _ => a.dims2().ok_or_else(|| shape_err(op, &[a.shape()]))?,
    };
    let shape = match axis {
        Axis::All => Vec::new(),
        Axis::Rows => vec![1, c],
        Axis::Cols => vec![r, 1],
    };
    Ok((r, c, shape))
}

/// Sums `f(x)` over each reduction group.
fn reduce(a: &Array, axis: Axis, r: usize, c: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let d = a.data();
    match axis {
        Axis::All => vec![d.iter().map(|&x| f(x)).sum()],
        Axis::Rows => (0..c).map(|j| (0..r).map(|i| f(d[i * c + j])).sum()).collect(),
        Axis::Cols => (0..r).map(|i| d[i * c..(i + 1) * c].iter().map(|&x| f(x)).sum()).collect(),
    }
}

/// Index of the reduction group element `k` (flat, in `(r, c)` layout) belongs to.
fn group_of(axis: Axis, k: usize, c: usize) -> usize {
    match axis {
        Axis::All => 0,
        Axis::Rows => k % c,
        Axis::Cols => k / c,
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
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

/// `c += op(a) * op(b)` with `a: m x k`, `b: k x n` given by strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: strides describe in-bounds views of the given slices; `c` is a
    // dense row-major m x n buffer that does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose `k`-th stop-gradient node takes `frozen[k]` as its value
    /// instead of its operand's value.
    pub fn with_frozen(frozen: Vec<Array>) -> Self {
        Self {
            frozen: Some(frozen),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Values of every stop-gradient node, in recording order.
    pub fn stop_gradient_values(&self) -> Vec<Array> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::StopGradient))
            .map(|n| n.value.clone())
            .collect()
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array::scalar(value))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, KernelError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (dims, shape) = broadcast_dims(name, va, vb)?;
        let out = binary_map(va, vb, dims, shape, f);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = match va.shape() {
            [m, k] => (*m, *k),
            _ => return Err(shape_err("matmul", &[va.shape(), vb.shape()])),
        };
        let n = match vb.shape() {
            [k2, n] if *k2 == k => *n,
            _ => return Err(shape_err("matmul", &[va.shape(), vb.shape()])),
        };
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, va.data(), k as isize, 1, vb.data(), n as isize, 1, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Array::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    /// `a * factor` for a compile-time constant factor.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, value: f64) -> Var {
        self.unary(a, |x| x + value, Op::AddScalar(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    fn reduction(
        &mut self,
        name: &'static str,
        a: Var,
        axis: Axis,
        f: impl Fn(f64) -> f64,
        post: impl Fn(f64, usize) -> f64,
        op: Op,
    ) -> Result<Var, KernelError> {
        let va = self.value(a);
        let (r, c, shape) = reduce_shape(name, va, axis)?;
        let count = match axis {
            Axis::All => r * c,
            Axis::Rows => r,
            Axis::Cols => c,
        };
        let data = reduce(va, axis, r, c, f).into_iter().map(|s| post(s, count)).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Array::new(shape, data)?, op, rg))
    }

    pub fn sum(&mut self, a: Var, axis: Axis) -> Result<Var, KernelError> {
        self.reduction("sum", a, axis, |x| x, |s, _| s, Op::Sum(a, axis))
    }

    pub fn mean(&mut self, a: Var, axis: Axis) -> Result<Var, KernelError> {
        if self.value(a).is_empty() {
            return Err(shape_err("mean", &[self.value(a).shape()]));
        }
        self.reduction("mean", a, axis, |x| x, |s, n| s / n as f64, Op::Mean(a, axis))
    }

    pub fn norm_l1(&mut self, a: Var, axis: Axis) -> Result<Var, KernelError> {
        self.reduction("norm_l1", a, axis, f64::abs, |s, _| s, Op::NormL1(a, axis))
    }

    pub fn norm_l2(&mut self, a: Var, axis: Axis) -> Result<Var, KernelError> {
        self.reduction("norm_l2", a, axis, |x| x * x, |s, _| s.sqrt(), Op::NormL2(a, axis))
    }

    /// Column-wise concatenation of 2-D operands with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        let shapes: Vec<&[usize]> = parts.iter().map(|v| self.value(*v).shape()).collect();
        let dims: Option<Vec<(usize, usize)>> = parts.iter().map(|v| self.value(*v).dims2()).collect();
        let dims = dims.ok_or_else(|| shape_err("concat", &shapes))?;
        let r = dims.first().map(|d| d.0).unwrap_or(0);
        if dims.iter().any(|d| d.0 != r) {
            return Err(shape_err("concat", &shapes));
        }
        let c: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for (v, d) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.value(*v).data()[i * d.1..(i + 1) * d.1]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Array::new(vec![r, c], out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// `out.flat[i] = a.flat[indices[i]]`, shaped as `shape`. The adjoint is
    /// scattered additively, so repeated indices accumulate.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var, KernelError> {
        let va = self.value(a);
        let n: usize = shape.iter().product();
        if n != indices.len() || indices.iter().any(|&i| i >= va.len()) {
            return Err(shape_err("gather", &[va.shape(), shape]));
        }
        let d = va.data();
        let out: Vec<f64> = indices.iter().map(|&i| d[i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Array::new(shape.to_vec(), out)?, Op::Gather(a, indices), rg))
    }

    /// Rows (leading-axis entries) of `a`, in the given order.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, KernelError> {
        let va = self.value(a);
        let w = va.row_len();
        let nrows = va.rows();
        if rows.iter().any(|&r| r >= nrows) {
            return Err(shape_err("gather_rows", &[va.shape()]));
        }
        let mut shape = va.shape().to_vec();
        if shape.is_empty() {
            shape.push(rows.len());
        } else {
            shape[0] = rows.len();
        }
        let indices = rows.iter().flat_map(|&r| r * w..(r + 1) * w).collect();
        self.gather(a, indices, &shape)
    }

    /// Column `j` of a 2-D array, as an `r x 1` array.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var, KernelError> {
        let va = self.value(a);
        let (r, c) = va.dims2().ok_or_else(|| shape_err("column", &[va.shape()]))?;
        if j >= c {
            return Err(shape_err("column", &[va.shape()]));
        }
        self.gather(a, (0..r).map(|i| i * c + j).collect(), &[r, 1])
    }

    /// Identity forward, zero map backward.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var, KernelError> {
        let k = self.sg_count;
        self.sg_count += 1;
        let value = match self.frozen.as_ref().and_then(|f| f.get(k)) {
            Some(frozen) => {
                if frozen.shape() != self.value(a).shape() {
                    return Err(shape_err("stop_gradient", &[frozen.shape(), self.value(a).shape()]));
                }
                frozen.clone()
            }
            None => self.value(a).clone(),
        };
        Ok(self.push(value, Op::StopGradient, false))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, KernelError> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Records a fused operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Array, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(output, Op::Custom(inputs.to_vec(), op), rg)
    }

    /// Reverse sweep from a scalar output. Adjoints are kept for every node
    /// that requires a gradient, including intermediates.
    pub fn backward(&self, output: Var) -> Result<Gradients, KernelError> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(KernelError::NonScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(Array::filled(out.shape(), 1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.vjp(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let elementwise = |a: Var, grads: &mut [Option<Array>], f: &dyn Fn(usize) -> f64| {
            if !wants(a) {
                return;
            }
            let buf = slot(grads, a, val(a));
            for (i, (b, gi)) in buf.data_mut().iter_mut().zip(g.data()).enumerate() {
                *b += gi * f(i);
            }
        };
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        let d = unbroadcast(g, val(v));
                        slot(grads, v, val(v)).add_assign(&d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    let d = unbroadcast(g, val(*a));
                    slot(grads, *a, val(*a)).add_assign(&d);
                }
                if wants(*b) {
                    let d = unbroadcast(&g.map(|x| -x), val(*b));
                    slot(grads, *b, val(*b)).add_assign(&d);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (va, vb) = (val(*a), val(*b));
                let (dims, shape) = broadcast_dims("vjp", va, vb).unwrap();
                // Broadcast operands to the output shape, then reduce back.
                let ea = binary_map(va, vb, dims, shape.clone(), |x, _| x);
                let eb = binary_map(va, vb, dims, shape.clone(), |_, y| y);
                if wants(*a) {
                    let d: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(eb.data())
                        .map(|(gi, y)| if is_div { gi / y } else { gi * y })
                        .collect();
                    let d = unbroadcast(&Array::new(shape.clone(), d).unwrap(), va);
                    slot(grads, *a, va).add_assign(&d);
                }
                if wants(*b) {
                    let d: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(ea.data().iter().zip(eb.data()))
                        .map(|(gi, (x, y))| if is_div { -gi * x / (y * y) } else { gi * x })
                        .collect();
                    let d = unbroadcast(&Array::new(shape, d).unwrap(), vb);
                    slot(grads, *b, vb).add_assign(&d);
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if wants(*a) {
                    // dA = dC * B^T
                    let buf = slot(grads, *a, va);
                    gemm_acc(m, n, k, g.data(), n as isize, 1, vb.data(), 1, n as isize, buf.data_mut());
                }
                if wants(*b) {
                    // dB = A^T * dC
                    let buf = slot(grads, *b, vb);
                    gemm_acc(k, m, n, va.data(), 1, k as isize, g.data(), n as isize, 1, buf.data_mut());
                }
            }
            Op::Scale(a, f) => elementwise(*a, grads, &|_| *f),
            Op::AddScalar(a) | Op::Reshape(a) => elementwise(*a, grads, &|_| 1.0),
            Op::Sin(a) => {
                let x = val(*a).data();
                elementwise(*a, grads, &|i| x[i].cos())
            }
            Op::Cos(a) => {
                let x = val(*a).data();
                elementwise(*a, grads, &|i| -x[i].sin())
            }
            Op::Exp(a) => {
                let y = node.value.data();
                elementwise(*a, grads, &|i| y[i])
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                elementwise(*a, grads, &|i| 0.5 / y[i])
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                elementwise(*a, grads, &|i| y[i] * (1.0 - y[i]))
            }
            Op::Log(a) => {
                let x = val(*a).data();
                elementwise(*a, grads, &|i| 1.0 / x[i])
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                elementwise(*a, grads, &|i| if x[i] > 0.0 { 1.0 } else { 0.0 })
            }
            Op::Abs(a) => {
                let x = val(*a).data();
                elementwise(*a, grads, &|i| sign(x[i]))
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a).data();
                elementwise(*a, grads, &|i| if x[i] >= *lo && x[i] <= *hi { 1.0 } else { 0.0 })
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) | Op::NormL1(a, axis) | Op::NormL2(a, axis) => {
                if !wants(*a) {
                    return;
                }
                let va = val(*a);
                let (r, c, _) = reduce_shape("vjp", va, *axis).unwrap();
                let count = match axis {
                    Axis::All => (r * c) as f64,
                    Axis::Rows => r as f64,
                    Axis::Cols => c as f64,
                };
                let x = va.data();
                let y = node.value.data();
                let gd = g.data();
                let buf = slot(grads, *a, va);
                for (k, b) in buf.data_mut().iter_mut().enumerate() {
                    let grp = group_of(*axis, k, c);
                    let local = match &node.op {
                        Op::Sum(..) => 1.0,
                        Op::Mean(..) => 1.0 / count,
                        Op::NormL1(..) => sign(x[k]),
                        _ => {
                            if y[grp] > 0.0 {
                                x[k] / y[grp]
                            } else {
                                0.0
                            }
                        }
                    };
                    *b += gd[grp] * local;
                }
            }
            Op::Concat(parts) => {
                let r = node.value.dims2().unwrap().0;
                let c = node.value.dims2().unwrap().1;
                let mut offset = 0;
                for v in parts {
                    let pc = val(*v).dims2().unwrap().1;
                    if wants(*v) {
                        let buf = slot(grads, *v, val(*v));
                        let bd = buf.data_mut();
                        for i in 0..r {
                            for j in 0..pc {
                                bd[i * pc + j] += g.data()[i * c + offset + j];
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::Gather(a, indices) => {
                if wants(*a) {
                    let buf = slot(grads, *a, val(*a));
                    let bd = buf.data_mut();
                    for (&i, gi) in indices.iter().zip(g.data()) {
                        bd[i] += gi;
                    }
                }
            }
            Op::Custom(inputs, op) => {
                let ins: Vec<&Array> = inputs.iter().map(|v| val(*v)).collect();
                let outs = op.vjp(&ins, &node.value, g);
                for (v, d) in inputs.iter().zip(outs) {
                    if let Some(d) = d {
                        if wants(*v) {
                            slot(grads, *v, val(*v)).add_assign(&d);
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Array>], v: Var, like: &Array) -> &'a mut Array {
    grads[v.0].get_or_insert_with(|| Array::zeros(like.shape()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_adjoint() {
        let mut t = Tape::new();
        let x = t.param(Array::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(t.value(y).item(), 9.0);
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut t = Tape::new();
        let x = t.param(Array::scalar(0.0));
        let y = t.sigmoid(x);
        let g = t.backward(y).unwrap();
        assert_eq!(t.value(y).item(), 0.5);
        assert_eq!(g.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut t = Tape::new();
        let x = t.param(Array::scalar(2.0));
        let y = t.param(Array::scalar(3.0));
        let sx = t.stop_gradient(x).unwrap();
        let z = t.mul(sx, y).unwrap();
        let g = t.backward(z).unwrap();
        assert_eq!(t.value(z).item(), 6.0);
        assert!(g.get(x).is_none());
        assert_eq!(g.get(y).unwrap().item(), 2.0);
    }

    #[test]
    fn sum_adjoint_is_ones() {
        let mut t = Tape::new();
        let x = t.param(Array::from_vec(vec![1.0, -2.0, 5.0, 0.5]));
        let s = t.sum(x, Axis::All).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(Array::from_vec(vec![1.0, 2.0]));
        let y = t.exp(x);
        assert!(matches!(t.backward(y), Err(KernelError::NonScalar(_))));
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut t = Tape::new();
        let a = t.param(Array::zeros(&[2, 3]));
        let b = t.param(Array::zeros(&[3, 2]));
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
        assert!(t.matmul(b, b).is_err());
    }

    #[test]
    fn broadcast_row_and_column() {
        let mut t = Tape::new();
        let a = t.param(Array::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]));
        let row = t.param(Array::new(vec![1, 2], vec![10.0, 20.0]).unwrap());
        let col = t.param(Array::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let s = t.add(a, row).unwrap();
        let p = t.mul(s, col).unwrap();
        assert_eq!(t.value(p).data(), &[11.0, 22.0, 26.0, 48.0, 45.0, 78.0]);
        let l = t.sum(p, Axis::All).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(row).unwrap().data(), &[6.0, 6.0]);
        assert_eq!(g.get(col).unwrap().data(), &[33.0, 37.0, 41.0]);
    }

    #[test]
    fn gather_scatters_additively() {
        let mut t = Tape::new();
        let table = t.param(Array::from_vec(vec![1.0, 2.0, 3.0]));
        let g = t.gather(table, vec![0, 2, 2, 2], &[4]).unwrap();
        let s = t.sum(g, Axis::All).unwrap();
        let grads = t.backward(s).unwrap();
        assert_eq!(t.value(s).item(), 10.0);
        assert_eq!(grads.get(table).unwrap().data(), &[1.0, 0.0, 3.0]);
    }

    #[test]
    fn frozen_stop_gradient_replays_values() {
        let mut t = Tape::with_frozen(vec![Array::scalar(7.0)]);
        let x = t.param(Array::scalar(2.0));
        let sx = t.stop_gradient(x).unwrap();
        assert_eq!(t.value(sx).item(), 7.0);
        assert_eq!(t.stop_gradient_values(), vec![Array::scalar(7.0)]);
    }

    #[test]
    fn recorded_order_is_topological() {
        let mut t = Tape::new();
        let x = t.param(Array::scalar(1.0));
        let y = t.exp(x);
        let z = t.add(x, y).unwrap();
        assert!(x.index() < y.index() && y.index() < z.index());
        assert_eq!(t.len(), 3);
    }
}
