//! Tensor-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass together with its value. Nodes are
//! only ever appended, so the tape is topologically sorted by construction and `backward` is a
//! single reverse sweep. Any non-finite value poisons the tape; `backward` then refuses to run.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{msg, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How rows of the left operand of a grouped product pick their block of the right operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupMap {
    /// `row % n`
    Modulo(usize),
    /// `row / n`
    Div(usize),
}

impl GroupMap {
    fn group(self, row: usize) -> usize {
        match self {
            GroupMap::Modulo(n) => row % n,
            GroupMap::Div(n) => row / n,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Powf(Var, f64),
    Square(Var),
    MulCol { x: Var, col: Var },
    MulConst { x: Var, c: Box<Tensor> },
    SumAll(Var),
    MeanAll(Var),
    RowSum(Var),
    RowMean(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    RepeatRows { x: Var, times: usize },
    Grouped { a: Var, w: Var, map: GroupMap, block_rows: usize, transpose: bool },
    FrameShift { x: Var, rows_per_frame: usize, lag: usize },
    CausalEma { x: Var, rows_per_frame: usize, alpha: f64 },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::MulCol { x, col } => vec![*x, *col],
            Op::Grouped { a, w, .. } => vec![*a, *w],
            Op::ConcatCols(parts) => parts.clone(),
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Powf(x, _)
            | Op::Square(x)
            | Op::MulConst { x, .. }
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::RowSum(x)
            | Op::RowMean(x)
            | Op::SliceCols { x, .. }
            | Op::Reshape(x)
            | Op::RepeatRows { x, .. }
            | Op::FrameShift { x, .. }
            | Op::CausalEma { x, .. } => vec![*x],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Powf(..) => "powf",
            Op::Square(..) => "square",
            Op::MulCol { .. } => "mul_col",
            Op::MulConst { .. } => "mul_const",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::RowSum(..) => "row_sum",
            Op::RowMean(..) => "row_mean",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::Grouped { .. } => "grouped_matmul",
            Op::FrameShift { .. } => "frame_shift",
            Op::CausalEma { .. } => "causal_ema",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    poison: Option<String>,
}

/// Gradients of one backward sweep, per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient per parameter of a store with `n_params` entries; parameters used several
    /// times get the sum. Unused parameters are `None`.
    pub fn for_params(&self, n_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; n_params];
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                match &mut out[id.index()] {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

/// `C = A·B` (or `A·Bᵀ`) through the blocked kernel, `beta` scales the existing `C`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= if m * k == 0 { 0 } else { (m - 1) * rsa + (k - 1) * csa + 1 });
    debug_assert!(b.len() >= if k * n == 0 { 0 } else { (k - 1) * rsb + (n - 1) * csb + 1 });
    debug_assert!(c.len() >= m * n);
    if n <= 4 {
        // narrow outputs: the packed kernel's edge handling costs more than it saves
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            if beta == 0.0 {
                row.iter_mut().for_each(|v| *v = 0.0);
            } else if beta != 1.0 {
                row.iter_mut().for_each(|v| *v *= beta);
            }
            for p in 0..k {
                let av = a[i * rsa + p * csa];
                for (j, cv) in row.iter_mut().enumerate() {
                    *cv += av * b[p * rsb + j * csb];
                }
            }
        }
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches for these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `x^p` with the common exponents routed to `sqrt`/division.
fn fast_pow(x: f64, p: f64) -> f64 {
    if p == 0.5 {
        libm::sqrt(x)
    } else if p == -0.5 {
        1.0 / libm::sqrt(x)
    } else if p == 0.25 {
        libm::sqrt(libm::sqrt(x))
    } else if p == -0.25 {
        1.0 / libm::sqrt(libm::sqrt(x))
    } else if p == -1.0 {
        1.0 / x
    } else if p == 1.0 {
        x
    } else if p == 2.0 {
        x * x
    } else {
        libm::pow(x, p)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// First non-finite value seen, if any.
    pub fn poisoned(&self) -> Option<&str> {
        self.poison.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if self.poison.is_none() && !value.is_finite() {
            self.poison = Some(msg!("non-finite value produced by `{}` at node {}", op.name(), self.nodes.len()));
        }
        let needs_grad = matches!(op, Op::Param(_)) || op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// A constant leaf (no gradient is propagated past it).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(k, kb, "matmul inner dimensions");
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, self.value(a).data(), k, 1, self.value(b).data(), n, 1, out.data_mut(), 0.0);
        self.push(out, Op::MatMul { a, b, trans_b: false })
    }

    /// `a · bᵀ`, used for `x · Wᵀ` with weights stored `out × in`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, kb) = self.shape(b);
        assert_eq!(k, kb, "matmul_t inner dimensions");
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, self.value(a).data(), k, 1, self.value(b).data(), 1, k, out.data_mut(), 0.0);
        self.push(out, Op::MatMul { a, b, trans_b: true })
    }

    /// Adds a 1×cols row to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(bias), (1, c), "bias shape");
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..r {
            for (o, bj) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(&b) {
                *o += bj;
            }
        }
        self.push(out, Op::AddBias { x, bias })
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shapes ({})", op.name());
        let out = self.value(a).zip_map(self.value(b), f);
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.push(out, Op::AddScalar(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(libm::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / (1.0 + libm::exp(-v)));
        self.push(out, Op::Sigmoid(x))
    }

    /// `x^p` elementwise; inputs must stay in the domain of `p` (positive for fractional `p`).
    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let out = self.value(x).map(|v| fast_pow(v, p));
        self.push(out, Op::Powf(x, p))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x))
    }

    /// Scales every row of `x` by the matching entry of the n×1 `col`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(col), (r, 1), "mul_col shapes");
        let mut out = self.value(x).clone();
        let s = self.value(col).data().to_vec();
        for (i, si) in s.iter().enumerate() {
            for o in &mut out.data_mut()[i * c..(i + 1) * c] {
                *o *= si;
            }
        }
        self.push(out, Op::MulCol { x, col })
    }

    /// Elementwise product with a constant (e.g. a structural mask).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Var {
        assert_eq!(self.shape(x), c.shape(), "mul_const shapes");
        let out = self.value(x).zip_map(&c, |a, b| a * b);
        self.push(out, Op::MulConst { x, c: Box::new(c) })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(out, Op::MeanAll(x))
    }

    /// n×m → n×1.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::column((0..t.rows()).map(|i| t.row(i).iter().sum()).collect());
        self.push(out, Op::RowSum(x))
    }

    pub fn row_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols() as f64;
        let out = Tensor::column((0..t.rows()).map(|i| t.row(i).iter().sum::<f64>() / c).collect());
        self.push(out, Op::RowMean(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        assert!(parts.iter().all(|&p| self.shape(p).0 == rows), "concat_cols row counts");
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::from_vec(rows, cols, out).expect("concat shape");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let (r, c) = self.shape(x);
        assert!(start < end && end <= c, "slice_cols range");
        let t = self.value(x);
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..end]);
        }
        let out = Tensor::from_vec(r, end - start, out).expect("slice shape");
        self.push(out, Op::SliceCols { x, start })
    }

    /// Row-major reinterpretation.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(x).clone().reshaped(rows, cols);
        self.push(out, Op::Reshape(x))
    }

    /// Each row repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let t = self.value(x);
        let mut out = Vec::with_capacity(t.len() * times);
        for i in 0..t.rows() {
            for _ in 0..times {
                out.extend_from_slice(t.row(i));
            }
        }
        let out = Tensor::from_vec(t.rows() * times, t.cols(), out).expect("repeat shape");
        self.push(out, Op::RepeatRows { x, times })
    }

    /// Row-wise product with a per-row block of `w`.
    ///
    /// `w` stacks equally sized blocks of `block_rows` rows; row `r` of `a` uses block
    /// `map(r)`. Without `transpose` the product is `a[r]·W_g`, with it `a[r]·W_gᵀ`.
    pub fn grouped_matmul(&mut self, a: Var, w: Var, map: GroupMap, block_rows: usize, transpose: bool) -> Var {
        let (r, ka) = self.shape(a);
        let (wr, bc) = self.shape(w);
        assert!(block_rows > 0 && wr % block_rows == 0, "grouped_matmul block layout");
        let groups = wr / block_rows;
        let (inner, out_cols) = if transpose { (bc, block_rows) } else { (block_rows, bc) };
        assert_eq!(ka, inner, "grouped_matmul inner dimensions");
        let av = self.value(a).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; r * out_cols];
        for row in 0..r {
            let g = map.group(row);
            assert!(g < groups, "group index out of range");
            let block = &wv[g * block_rows * bc..(g + 1) * block_rows * bc];
            let arow = &av[row * ka..(row + 1) * ka];
            let orow = &mut out[row * out_cols..(row + 1) * out_cols];
            if transpose {
                for (i, o) in orow.iter_mut().enumerate() {
                    *o = arow.iter().zip(&block[i * bc..(i + 1) * bc]).map(|(x, y)| x * y).sum();
                }
            } else {
                for (j, &x) in arow.iter().enumerate() {
                    for (o, y) in orow.iter_mut().zip(&block[j * bc..(j + 1) * bc]) {
                        *o += x * y;
                    }
                }
            }
        }
        let out = Tensor::from_vec(r, out_cols, out).expect("grouped shape");
        self.push(out, Op::Grouped { a, w, map, block_rows, transpose })
    }

    /// Rows are grouped in frames of `rows_per_frame`; output frame `l` is input frame
    /// `l − lag` (zeros before the start).
    pub fn frame_shift(&mut self, x: Var, rows_per_frame: usize, lag: usize) -> Var {
        let (r, c) = self.shape(x);
        let offset = (lag * rows_per_frame).min(r) * c;
        let mut out = Tensor::zeros(r, c);
        let src = self.value(x).data();
        out.data_mut()[offset..].copy_from_slice(&src[..r * c - offset]);
        self.push(out, Op::FrameShift { x, rows_per_frame, lag })
    }

    /// Bias-corrected causal exponential average over frames:
    /// `e_l = α·e_{l−1} + (1−α)·x_l`, output `e_l / (1 − α^{l+1})`.
    pub fn causal_ema(&mut self, x: Var, rows_per_frame: usize, alpha: f64) -> Var {
        let (r, c) = self.shape(x);
        assert!(rows_per_frame > 0 && r % rows_per_frame == 0, "causal_ema frame layout");
        let width = rows_per_frame * c;
        let frames = r / rows_per_frame;
        let src = self.value(x).data();
        let mut state = vec![0.0; width];
        let mut out = vec![0.0; r * c];
        let mut decay = 1.0;
        for l in 0..frames {
            decay *= alpha;
            let norm = 1.0 / (1.0 - decay);
            for (j, s) in state.iter_mut().enumerate() {
                *s = alpha * *s + (1.0 - alpha) * src[l * width + j];
                out[l * width + j] = *s * norm;
            }
        }
        let out = Tensor::from_vec(r, c, out).expect("ema shape");
        self.push(out, Op::CausalEma { x, rows_per_frame, alpha })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if let Some(p) = &self.poison {
            return Err(Error::Poisoned(p.clone()));
        }
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::Contract(msg!("backward needs a scalar loss, got {r}x{c}")));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut params = Vec::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop(&node.op, &node.value, &g, &mut grads);
            if let Op::Param(id) = node.op {
                params.push((idx, id));
                grads[idx] = Some(g);
            }
        }
        for (node, _) in &params {
            if let Some(g) = &grads[*node] {
                if !g.is_finite() {
                    return Err(Error::Poisoned(msg!("non-finite gradient for parameter node {node}")));
                }
            }
        }
        Ok(Gradients { grads, params })
    }

    fn backprop(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.shape();
                let n = g.cols();
                // dA = G · op(B)ᵀ
                let mut da = Tensor::zeros(m, k);
                if *trans_b {
                    gemm(m, n, k, g.data(), n, 1, bv.data(), k, 1, da.data_mut(), 0.0);
                } else {
                    gemm(m, n, k, g.data(), n, 1, bv.data(), 1, n, da.data_mut(), 0.0);
                }
                acc(grads, *a, da);
                if *trans_b {
                    // dB (n×k) = Gᵀ · A
                    let mut db = Tensor::zeros(n, k);
                    gemm(n, m, k, g.data(), 1, n, av.data(), k, 1, db.data_mut(), 0.0);
                    acc(grads, *b, db);
                } else {
                    // dB (k×n) = Aᵀ · G
                    let mut db = Tensor::zeros(k, n);
                    gemm(k, m, n, av.data(), 1, k, g.data(), n, 1, db.data_mut(), 0.0);
                    acc(grads, *b, db);
                }
            }
            Op::AddBias { x, bias } => {
                let c = g.cols();
                let mut db = Tensor::zeros(1, c);
                for i in 0..g.rows() {
                    for (d, v) in db.data_mut().iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                acc(grads, *x, g.clone());
                acc(grads, *bias, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y);
                let gb = g.zip_map(self.value(*a), |x, y| x * y);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Scale(x, s) => acc(grads, *x, g.map(|v| v * s)),
            Op::AddScalar(x) => acc(grads, *x, g.clone()),
            Op::Tanh(x) => acc(grads, *x, g.zip_map(out, |gv, y| gv * (1.0 - y * y))),
            Op::Sigmoid(x) => acc(grads, *x, g.zip_map(out, |gv, y| gv * y * (1.0 - y))),
            Op::Powf(x, p) => {
                let p = *p;
                let xv = self.value(*x).data();
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(xv)
                    .zip(out.data())
                    .map(|((&gv, &xv), &y)| gv * p * if xv != 0.0 { y / xv } else { fast_pow(xv, p - 1.0) })
                    .collect();
                acc(grads, *x, Tensor::from_vec(g.rows(), g.cols(), dx).expect("powf grad shape"));
            }
            Op::Square(x) => acc(grads, *x, g.zip_map(self.value(*x), |gv, xv| 2.0 * gv * xv)),
            Op::MulCol { x, col } => {
                let xv = self.value(*x);
                let cv = self.value(*col);
                let c = xv.cols();
                let mut dx = g.clone();
                let mut dcol = Tensor::zeros(cv.rows(), 1);
                for i in 0..xv.rows() {
                    let s = cv.data()[i];
                    let mut d = 0.0;
                    for j in 0..c {
                        d += g.data()[i * c + j] * xv.data()[i * c + j];
                        dx.data_mut()[i * c + j] *= s;
                    }
                    dcol.data_mut()[i] = d;
                }
                acc(grads, *x, dx);
                acc(grads, *col, dcol);
            }
            Op::MulConst { x, c } => acc(grads, *x, g.zip_map(c, |a, b| a * b)),
            Op::SumAll(x) => {
                let (r, c) = self.shape(*x);
                acc(grads, *x, Tensor::filled(r, c, g.item()));
            }
            Op::MeanAll(x) => {
                let (r, c) = self.shape(*x);
                acc(grads, *x, Tensor::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::RowSum(x) | Op::RowMean(x) => {
                let (r, c) = self.shape(*x);
                let scale = if matches!(op, Op::RowMean(_)) { 1.0 / c as f64 } else { 1.0 };
                let mut dx = Tensor::zeros(r, c);
                for i in 0..r {
                    let v = g.data()[i] * scale;
                    dx.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|d| *d = v);
                }
                acc(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    let mut dp = Vec::with_capacity(rows * pc);
                    for i in 0..rows {
                        dp.extend_from_slice(&g.row(i)[offset..offset + pc]);
                    }
                    acc(grads, p, Tensor::from_vec(rows, pc, dp).expect("concat grad"));
                    offset += pc;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.shape(*x);
                let w = g.cols();
                let mut dx = Tensor::zeros(r, c);
                for i in 0..r {
                    dx.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                acc(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let (r, c) = self.shape(*x);
                acc(grads, *x, g.clone().reshaped(r, c));
            }
            Op::RepeatRows { x, times } => {
                let (r, c) = self.shape(*x);
                let mut dx = Tensor::zeros(r, c);
                for i in 0..r {
                    for t in 0..*times {
                        let src = g.row(i * times + t);
                        for (d, s) in dx.data_mut()[i * c..(i + 1) * c].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Grouped { a, w, map, block_rows, transpose } => {
                let av = self.value(*a);
                let wv = self.value(*w);
                let (r, ka) = av.shape();
                let bc = wv.cols();
                let oc = g.cols();
                let mut da = Tensor::zeros(r, ka);
                let mut dw = Tensor::zeros(wv.rows(), bc);
                for row in 0..r {
                    let gidx = map.group(row);
                    let base = gidx * block_rows * bc;
                    let arow = av.row(row);
                    let grow = g.row(row);
                    let da_row = &mut da.data_mut()[row * ka..(row + 1) * ka];
                    let block = &wv.data()[base..base + block_rows * bc];
                    let dblock = &mut dw.data_mut()[base..base + block_rows * bc];
                    if *transpose {
                        // out_i = Σ_j a_j W[i,j]
                        for i in 0..oc {
                            let gi = grow[i];
                            for j in 0..ka {
                                da_row[j] += gi * block[i * bc + j];
                                dblock[i * bc + j] += gi * arow[j];
                            }
                        }
                    } else {
                        // out_c = Σ_j a_j W[j,c]
                        for j in 0..ka {
                            let mut s = 0.0;
                            for c in 0..oc {
                                s += grow[c] * block[j * bc + c];
                                dblock[j * bc + c] += arow[j] * grow[c];
                            }
                            da_row[j] += s;
                        }
                    }
                }
                acc(grads, *a, da);
                acc(grads, *w, dw);
            }
            Op::FrameShift { x, rows_per_frame, lag } => {
                let (r, c) = self.shape(*x);
                let offset = (lag * rows_per_frame).min(r) * c;
                let mut dx = Tensor::zeros(r, c);
                dx.data_mut()[..r * c - offset].copy_from_slice(&g.data()[offset..]);
                acc(grads, *x, dx);
            }
            Op::CausalEma { x, rows_per_frame, alpha } => {
                let (r, c) = self.shape(*x);
                let width = rows_per_frame * c;
                let frames = r / rows_per_frame;
                let alpha = *alpha;
                let mut dx = Tensor::zeros(r, c);
                let mut carry = vec![0.0; width];
                for l in (0..frames).rev() {
                    let norm = 1.0 / (1.0 - libm::pow(alpha, (l + 1) as f64));
                    for j in 0..width {
                        carry[j] = g.data()[l * width + j] * norm + alpha * carry[j];
                        dx.data_mut()[l * width + j] = (1.0 - alpha) * carry[j];
                    }
                }
                acc(grads, *x, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let y = tape.mul(wv, wv);
        let g = tape.backward(y).unwrap().for_params(store.len());
        assert_eq!(tape.value(y).item(), 9.0);
        assert_eq!(g[0].as_ref().unwrap().item(), 6.0);
    }

    #[test]
    fn product_partials() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(2.5));
        let y = store.add("y", Tensor::scalar(-4.0));
        let mut tape = Tape::new();
        let (xv, yv) = (tape.param(&store, x), tape.param(&store, y));
        let f = tape.mul(xv, yv);
        let g = tape.backward(f).unwrap().for_params(store.len());
        assert_eq!(g[0].as_ref().unwrap().item(), -4.0);
        assert_eq!(g[1].as_ref().unwrap().item(), 2.5);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_poisons_the_tape() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(-1.0));
        let y = tape.powf(x, 0.5);
        assert!(tape.poisoned().is_some());
        assert!(matches!(tape.backward(y), Err(Error::Poisoned(_))));
    }

    #[test]
    fn frame_shift_moves_whole_frames() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(6, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = tape.frame_shift(x, 2, 1);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn ema_of_constant_is_constant() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::filled(10, 3, 2.5));
        let y = tape.causal_ema(x, 2, 0.9);
        assert!(tape.value(y).data().iter().all(|v| (v - 2.5).abs() < 1e-12));
    }
}
