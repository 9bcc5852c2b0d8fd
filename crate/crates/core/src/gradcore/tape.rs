use super::eager::Eager;
use super::matrix::{self, gemm, Matrix};
use super::{Backend, GradError, Result};

/// Handle to a node on a [`Tape`]. Ids are dense and increase in insertion
/// order, which is therefore a valid topological order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpTag {
    Constant,
    Parameter,
    MatMul,
    AddBias,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Square,
    Sum,
    Mean,
    SumCols,
    ConcatCols,
    SliceCols,
    Reshape,
    Exp,
    Log,
    Tanh,
    Sin,
    Cos,
    Elu,
    SoftmaxRows,
    Clamp,
    SoftClip,
    StopGradient,
    StraightThrough,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Parameter,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sin(Var),
    Cos(Var),
    Elu(Var),
    SoftmaxRows(Var),
    Clamp(Var, f64, f64),
    SoftClip(Var, f64, f64),
    StopGradient(Var),
    StraightThrough(Var),
}

impl Op {
    fn tag(&self) -> OpTag {
        match self {
            Op::Constant => OpTag::Constant,
            Op::Parameter => OpTag::Parameter,
            Op::MatMul(..) => OpTag::MatMul,
            Op::AddBias(..) => OpTag::AddBias,
            Op::Add(..) => OpTag::Add,
            Op::Sub(..) => OpTag::Sub,
            Op::Mul(..) => OpTag::Mul,
            Op::Scale(..) => OpTag::Scale,
            Op::AddScalar(..) => OpTag::AddScalar,
            Op::Square(..) => OpTag::Square,
            Op::Sum(..) => OpTag::Sum,
            Op::Mean(..) => OpTag::Mean,
            Op::SumCols(..) => OpTag::SumCols,
            Op::ConcatCols(..) => OpTag::ConcatCols,
            Op::SliceCols(..) => OpTag::SliceCols,
            Op::Reshape(..) => OpTag::Reshape,
            Op::Exp(..) => OpTag::Exp,
            Op::Log(..) => OpTag::Log,
            Op::Tanh(..) => OpTag::Tanh,
            Op::Sin(..) => OpTag::Sin,
            Op::Cos(..) => OpTag::Cos,
            Op::Elu(..) => OpTag::Elu,
            Op::SoftmaxRows(..) => OpTag::SoftmaxRows,
            Op::Clamp(..) => OpTag::Clamp,
            Op::SoftClip(..) => OpTag::SoftClip,
            Op::StopGradient(..) => OpTag::StopGradient,
            Op::StraightThrough(..) => OpTag::StraightThrough,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Parameter => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::ConcatCols(parts) => parts.clone(),
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Square(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumCols(x)
            | Op::SliceCols(x, _)
            | Op::Reshape(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Tanh(x)
            | Op::Sin(x)
            | Op::Cos(x)
            | Op::Elu(x)
            | Op::SoftmaxRows(x)
            | Op::Clamp(x, ..)
            | Op::SoftClip(x, ..)
            | Op::StopGradient(x)
            | Op::StraightThrough(x) => vec![*x],
        }
    }
}

/// One recorded value.
#[derive(Debug, Clone)]
pub struct Node {
    value: Matrix,
    // Allocated on first accumulation; reads as zeros until then.
    grad: Option<Matrix>,
    op: Op,
}

impl Node {
    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn value(&self) -> &Matrix {
        &self.value
    }

    pub fn op_tag(&self) -> OpTag {
        self.op.tag()
    }

    pub fn parents(&self) -> Vec<Var> {
        self.op.parents()
    }
}

/// Append-only record of a computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
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

    /// Handle for node `id`, if it exists.
    pub fn var(&self, id: usize) -> Option<Var> {
        (id < self.nodes.len()).then_some(Var(id))
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn parameters(&self) -> &[Var] {
        &self.params
    }

    /// Trainable leaf from explicit values.
    pub fn parameter(&mut self, shape: (usize, usize), values: Vec<f64>) -> Result<Var> {
        let m = Matrix::new(shape.0, shape.1, values)?;
        Ok(self.param(&m))
    }

    pub fn grad(&self, v: Var) -> Matrix {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()))
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.as_mut_slice().fill(0.0);
            }
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value, grad: None, op });
        Var(id)
    }

    fn val(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Accumulates `d root / d node` into every node reachable from `root`.
    ///
    /// Gradients add onto whatever is already stored; call
    /// [`zero_grads`](Self::zero_grads) first for a fresh pass.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.val(root).shape();
        if shape != (1, 1) {
            return Err(GradError::NotScalar { shape });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(d) = adj[id].take() else { continue };
            let (lower, _) = adj.split_at_mut(id);
            self.propagate(id, &d, lower);
            adj[id] = Some(d);
        }
        for (node, d) in self.nodes.iter_mut().zip(adj) {
            if let Some(d) = d {
                let g = node
                    .grad
                    .get_or_insert_with(|| Matrix::zeros(node.value.rows(), node.value.cols()));
                for (a, b) in g.as_mut_slice().iter_mut().zip(&d) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, d: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        macro_rules! acc {
            ($v:expr) => {
                slot(adj, self.nodes[$v.0].value.len(), $v)
            };
        }
        match &node.op {
            Op::Constant | Op::Parameter | Op::StopGradient(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let dm = Matrix::new(out.rows(), out.cols(), d.to_vec()).expect("shape");
                let ga = acc!(*a);
                gemm(1.0, &dm, false, vb, true, 1.0, ga, va.cols());
                let gb = acc!(*b);
                gemm(1.0, va, true, &dm, false, 1.0, gb, vb.cols());
            }
            Op::AddBias(x, b) => {
                add_into(acc!(*x), d);
                let cols = out.cols();
                let gb = acc!(*b);
                if cols > 0 {
                    for row in d.chunks_exact(cols) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(acc!(*a), d);
                add_into(acc!(*b), d);
            }
            Op::Sub(a, b) => {
                add_into(acc!(*a), d);
                for (g, x) in acc!(*b).iter_mut().zip(d) {
                    *g -= x;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).as_slice(), self.val(*b).as_slice());
                for ((g, x), y) in acc!(*a).iter_mut().zip(d).zip(vb) {
                    *g += x * y;
                }
                for ((g, x), y) in acc!(*b).iter_mut().zip(d).zip(va) {
                    *g += x * y;
                }
            }
            Op::Scale(x, k) => {
                for (g, v) in acc!(*x).iter_mut().zip(d) {
                    *g += k * v;
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) | Op::StraightThrough(x) => add_into(acc!(*x), d),
            Op::Square(x) => {
                let vx = self.val(*x).as_slice();
                for ((g, v), xv) in acc!(*x).iter_mut().zip(d).zip(vx) {
                    *g += 2.0 * xv * v;
                }
            }
            Op::Sum(x) => {
                for g in acc!(*x).iter_mut() {
                    *g += d[0];
                }
            }
            Op::Mean(x) => {
                let n = self.val(*x).len() as f64;
                for g in acc!(*x).iter_mut() {
                    *g += d[0] / n;
                }
            }
            Op::SumCols(x) => {
                let cols = self.val(*x).cols();
                if cols > 0 {
                    for (row, dv) in acc!(*x).chunks_exact_mut(cols).zip(d) {
                        for g in row {
                            *g += dv;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let pc = self.val(*p).cols();
                    let g = acc!(*p);
                    for r in 0..out.rows() {
                        let src = &d[r * total + offset..r * total + offset + pc];
                        add_into(&mut g[r * pc..(r + 1) * pc], src);
                    }
                    offset += pc;
                }
            }
            Op::SliceCols(x, start) => {
                let xc = self.val(*x).cols();
                let oc = out.cols();
                let g = acc!(*x);
                for r in 0..out.rows() {
                    add_into(&mut g[r * xc + start..r * xc + start + oc], &d[r * oc..(r + 1) * oc]);
                }
            }
            Op::Exp(x) => {
                for ((g, v), y) in acc!(*x).iter_mut().zip(d).zip(out.as_slice()) {
                    *g += v * y;
                }
            }
            Op::Log(x) => {
                let vx = self.val(*x).as_slice();
                for ((g, v), xv) in acc!(*x).iter_mut().zip(d).zip(vx) {
                    *g += v / xv;
                }
            }
            Op::Tanh(x) => {
                for ((g, v), y) in acc!(*x).iter_mut().zip(d).zip(out.as_slice()) {
                    *g += v * (1.0 - y * y);
                }
            }
            Op::Sin(x) => {
                let vx = self.val(*x).as_slice();
                for ((g, v), xv) in acc!(*x).iter_mut().zip(d).zip(vx) {
                    *g += v * xv.cos();
                }
            }
            Op::Cos(x) => {
                let vx = self.val(*x).as_slice();
                for ((g, v), xv) in acc!(*x).iter_mut().zip(d).zip(vx) {
                    *g -= v * xv.sin();
                }
            }
            Op::Elu(x) => {
                let vx = self.val(*x).as_slice();
                for (((g, v), xv), y) in acc!(*x).iter_mut().zip(d).zip(vx).zip(out.as_slice()) {
                    *g += if *xv > 0.0 { *v } else { v * (y + 1.0) };
                }
            }
            Op::SoftmaxRows(x) => {
                let cols = out.cols();
                if cols > 0 {
                    let g = acc!(*x);
                    for ((grow, drow), yrow) in g
                        .chunks_exact_mut(cols)
                        .zip(d.chunks_exact(cols))
                        .zip(out.as_slice().chunks_exact(cols))
                    {
                        let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((gv, dv), yv) in grow.iter_mut().zip(drow).zip(yrow) {
                            *gv += yv * (dv - dot);
                        }
                    }
                }
            }
            Op::Clamp(x, lo, hi) => {
                let vx = self.val(*x).as_slice();
                for ((g, v), xv) in acc!(*x).iter_mut().zip(d).zip(vx) {
                    if xv > lo && xv < hi {
                        *g += v;
                    }
                }
            }
            Op::SoftClip(x, knee, limit) => {
                let vx = self.val(*x).as_slice();
                for ((g, v), xv) in acc!(*x).iter_mut().zip(d).zip(vx) {
                    *g += v * matrix::soft_clip_grad(*xv, *knee, *limit);
                }
            }
        }
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], len: usize, v: Var) -> &mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

impl Backend for Tape {
    type Value = Var;

    fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant)
    }

    fn param(&mut self, m: &Matrix) -> Var {
        let v = self.push(m.clone(), Op::Parameter);
        self.params.push(v);
        v
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Matrix {
        &self.nodes[v.0].value
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let m = Eager.matmul(self.val(*a), self.val(*b))?;
        Ok(self.push(m, Op::MatMul(*a, *b)))
    }

    fn add_bias(&mut self, x: &Var, bias: &Var) -> Result<Var> {
        let m = Eager.add_bias(self.val(*x), self.val(*bias))?;
        Ok(self.push(m, Op::AddBias(*x, *bias)))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let m = Eager.add(self.val(*a), self.val(*b))?;
        Ok(self.push(m, Op::Add(*a, *b)))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let m = Eager.sub(self.val(*a), self.val(*b))?;
        Ok(self.push(m, Op::Sub(*a, *b)))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let m = Eager.mul(self.val(*a), self.val(*b))?;
        Ok(self.push(m, Op::Mul(*a, *b)))
    }

    fn scale(&mut self, x: &Var, k: f64) -> Var {
        let m = Eager.scale(self.val(*x), k);
        self.push(m, Op::Scale(*x, k))
    }

    fn add_scalar(&mut self, x: &Var, k: f64) -> Var {
        let m = Eager.add_scalar(self.val(*x), k);
        self.push(m, Op::AddScalar(*x))
    }

    fn square(&mut self, x: &Var) -> Var {
        let m = Eager.square(self.val(*x));
        self.push(m, Op::Square(*x))
    }

    fn sum(&mut self, x: &Var) -> Var {
        let m = Eager.sum(self.val(*x));
        self.push(m, Op::Sum(*x))
    }

    fn mean(&mut self, x: &Var) -> Result<Var> {
        let m = Eager.mean(self.val(*x))?;
        Ok(self.push(m, Op::Mean(*x)))
    }

    fn sum_cols(&mut self, x: &Var) -> Var {
        let m = Eager.sum_cols(self.val(*x));
        self.push(m, Op::SumCols(*x))
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Matrix> = parts.iter().map(|p| self.val(*p)).collect();
        let m = matrix::concat_cols(&refs)?;
        Ok(self.push(m, Op::ConcatCols(parts.to_vec())))
    }

    fn slice_cols(&mut self, x: &Var, start: usize, end: usize) -> Result<Var> {
        let m = Eager.slice_cols(self.val(*x), start, end)?;
        Ok(self.push(m, Op::SliceCols(*x, start)))
    }

    fn reshape(&mut self, x: &Var, rows: usize, cols: usize) -> Result<Var> {
        let m = Eager.reshape(self.val(*x), rows, cols)?;
        Ok(self.push(m, Op::Reshape(*x)))
    }

    fn exp(&mut self, x: &Var) -> Var {
        let m = Eager.exp(self.val(*x));
        self.push(m, Op::Exp(*x))
    }

    fn log(&mut self, x: &Var) -> Result<Var> {
        let m = Eager.log(self.val(*x))?;
        Ok(self.push(m, Op::Log(*x)))
    }

    fn tanh(&mut self, x: &Var) -> Var {
        let m = Eager.tanh(self.val(*x));
        self.push(m, Op::Tanh(*x))
    }

    fn sin(&mut self, x: &Var) -> Var {
        let m = Eager.sin(self.val(*x));
        self.push(m, Op::Sin(*x))
    }

    fn cos(&mut self, x: &Var) -> Var {
        let m = Eager.cos(self.val(*x));
        self.push(m, Op::Cos(*x))
    }

    fn elu(&mut self, x: &Var) -> Var {
        let m = Eager.elu(self.val(*x));
        self.push(m, Op::Elu(*x))
    }

    fn softmax_rows(&mut self, x: &Var) -> Var {
        let m = Eager.softmax_rows(self.val(*x));
        self.push(m, Op::SoftmaxRows(*x))
    }

    fn clamp(&mut self, x: &Var, lo: f64, hi: f64) -> Var {
        let m = Eager.clamp(self.val(*x), lo, hi);
        self.push(m, Op::Clamp(*x, lo, hi))
    }

    fn soft_clip(&mut self, x: &Var, knee: f64, limit: f64) -> Var {
        let m = Eager.soft_clip(self.val(*x), knee, limit);
        self.push(m, Op::SoftClip(*x, knee, limit))
    }

    fn stop_gradient(&mut self, x: &Var) -> Var {
        let m = self.val(*x).clone();
        self.push(m, Op::StopGradient(*x))
    }

    fn straight_through(&mut self, forward: Matrix, through: &Var) -> Result<Var> {
        let m = Eager.straight_through(forward, self.val(*through))?;
        Ok(self.push(m, Op::StraightThrough(*through)))
    }
}
