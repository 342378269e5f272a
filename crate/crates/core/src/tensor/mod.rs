//! Minimal dense f64 tensor with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape: every operation records its inputs and
//! produces exactly one new tensor slot, so topological order is the append
//! order and [`Graph::backward`] is a single reverse sweep. The operation set
//! is exactly what the prognostics network needs: matmul, im2col-lowered
//! convolution, max pooling, softmax, layer norm, a small elementwise suite,
//! and the gather/scatter plumbing used by sparse attention.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod params;

pub use adam::AdamState;
pub use params::{BoundParams, ParamSet};

use crate::error::{Error, Result};

/// Epsilon added to layer-norm variances.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Denominators smaller than this in magnitude receive a +1e-8 guard.
pub const DIV_GUARD_THRESHOLD: f64 = 1e-12;
/// Guard added to near-zero denominators.
pub const DIV_GUARD: f64 = 1e-8;

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("dimensions must be positive, got {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn requires_grad(mut self) -> Tensor {
        self.requires_grad = true;
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Canonical 2-D view: rank-1 `[n]` reads as one row `(1, n)`.
    pub fn view2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::Shape {
                op,
                detail: format!("expected rank <= 2, got shape {:?}", self.shape),
            }),
        }
    }
}

/// Handle to a tensor slot on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnKind {
    Exp,
    Tanh,
    Sigmoid,
    Gelu,
}

/// How the right operand of a binary op maps onto the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is `1 x c`, repeated down the rows of an `r x c` lhs.
    Row,
    /// rhs is `r x 1`, repeated across the columns of an `r x c` lhs.
    Col,
    /// rhs is a single value.
    Scalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Bin { kind: BinKind, a: Var, b: Var, bc: Bcast },
    MaxPair { a: Var, b: Var },
    Un { kind: UnKind, x: Var },
    Scale { x: Var, k: f64 },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Im2Col { x: Var, l: usize, cin: usize, k: usize },
    MaxPool1d { x: Var, argmax: Vec<usize> },
    MaxRows { x: Var, argmax: Vec<usize> },
    MeanRows { x: Var },
    SumAll { x: Var },
    Transpose { x: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Reshape { x: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    RepeatRows { x: Var },
    ScatterRows { base: Var, src: Var, idx: Vec<usize> },
}

/// Append-only autodiff tape.
#[derive(Debug, Default)]
pub struct Graph {
    tensors: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.tensors[v.0]
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.tensors[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.tensors[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.tensors[v.0].grad.as_deref()
    }

    /// Insert an existing tensor as a graph leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.tensors.push(t);
        self.ops.push(Op::Leaf);
        self.needs_grad.push(needs);
        Var(self.tensors.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    fn push(&mut self, op: &'static str, shape: Vec<usize>, data: Vec<f64>, rec: Op) -> Result<Var> {
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "op {op} produced {} at flat index {bad}",
                data[bad]
            )));
        }
        let needs = match &rec {
            Op::Leaf => false,
            _ => self.inputs_of(&rec).iter().any(|v| self.needs_grad[v.0]),
        };
        self.tensors.push(Tensor { shape, data, requires_grad: false, grad: None });
        self.ops.push(rec);
        self.needs_grad.push(needs);
        Ok(Var(self.tensors.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Bin { a, b, .. } | Op::MaxPair { a, b } => vec![*a, *b],
            Op::Un { x, .. }
            | Op::Scale { x, .. }
            | Op::Softmax { x, .. }
            | Op::Im2Col { x, .. }
            | Op::MaxPool1d { x, .. }
            | Op::MaxRows { x, .. }
            | Op::MeanRows { x }
            | Op::SumAll { x }
            | Op::Transpose { x }
            | Op::Reshape { x }
            | Op::GatherRows { x, .. }
            | Op::RepeatRows { x } => vec![*x],
            Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
            Op::Concat { xs, .. } => xs.clone(),
            Op::ScatterRows { base, src, .. } => vec![*base, *src],
        }
    }

    // ---- core operations ------------------------------------------------

    /// `a (m x k) . b (k x n) -> (m x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.tensors[a.0].view2("matmul")?;
        let (kb, n) = self.tensors[b.0].view2("matmul")?;
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!(
                    "inner dimensions disagree: {:?} vs {:?}",
                    self.tensors[a.0].shape, self.tensors[b.0].shape
                ),
            });
        }
        let out = matmul_raw(&self.tensors[a.0].data, &self.tensors[b.0].data, m, ka, n);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, m, k: ka, n })
    }

    fn bin(&mut self, kind: BinKind, opname: &'static str, a: Var, b: Var) -> Result<Var> {
        let sa = self.tensors[a.0].shape.clone();
        let bc = self.bcast_of(opname, a, b)?;
        let (r, c) = if sa.len() <= 2 {
            self.tensors[a.0].view2(opname)?
        } else {
            (1, self.tensors[a.0].len())
        };
        let ad = &self.tensors[a.0].data;
        let bd = &self.tensors[b.0].data;
        let mut out = vec![0.0; ad.len()];
        for i in 0..r {
            for j in 0..c {
                let flat = i * c + j;
                let bv = match bc {
                    Bcast::Same => bd[flat],
                    Bcast::Row => bd[j],
                    Bcast::Col => bd[i],
                    Bcast::Scalar => bd[0],
                };
                let av = ad[flat];
                out[flat] = match kind {
                    BinKind::Add => av + bv,
                    BinKind::Sub => av - bv,
                    BinKind::Mul => av * bv,
                    BinKind::Div => av / guard_den(bv),
                };
            }
        }
        self.push(opname, sa, out, Op::Bin { kind, a, b, bc })
    }

    fn bcast_of(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let sa = &self.tensors[a.0].shape;
        let sb = &self.tensors[b.0].shape;
        if sa == sb {
            return Ok(Bcast::Same);
        }
        if self.tensors[b.0].len() == 1 {
            return Ok(Bcast::Scalar);
        }
        if sa.len() == 2 && sb.len() == 2 {
            let (r, c) = (sa[0], sa[1]);
            if sb[0] == 1 && sb[1] == c {
                return Ok(Bcast::Row);
            }
            if sb[0] == r && sb[1] == 1 {
                return Ok(Bcast::Col);
            }
        }
        Err(Error::Shape { op, detail: format!("cannot broadcast {sb:?} onto {sa:?}") })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Mul, "mul", a, b)
    }

    /// Division with a guarded denominator: values with magnitude below
    /// 1e-12 receive +1e-8; everything else divides exactly.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Div, "div", a, b)
    }

    /// Elementwise maximum of two same-shape tensors; gradient routes to the
    /// left operand on ties.
    pub fn max_pair(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.tensors[a.0].shape != self.tensors[b.0].shape {
            return Err(Error::Shape {
                op: "max_pair",
                detail: format!(
                    "{:?} vs {:?}",
                    self.tensors[a.0].shape, self.tensors[b.0].shape
                ),
            });
        }
        let sa = self.tensors[a.0].shape.clone();
        let out: Vec<f64> = self.tensors[a.0]
            .data
            .iter()
            .zip(&self.tensors[b.0].data)
            .map(|(&x, &y)| if x >= y { x } else { y })
            .collect();
        self.push("max_pair", sa, out, Op::MaxPair { a, b })
    }

    fn unary(&mut self, kind: UnKind, opname: &'static str, x: Var) -> Result<Var> {
        let sx = self.tensors[x.0].shape.clone();
        let out: Vec<f64> = self.tensors[x.0]
            .data
            .iter()
            .map(|&v| match kind {
                UnKind::Exp => v.exp(),
                UnKind::Tanh => v.tanh(),
                UnKind::Sigmoid => sigmoid(v),
                UnKind::Gelu => gelu(v),
            })
            .collect();
        self.push(opname, sx, out, Op::Un { kind, x })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Exp, "exp", x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Tanh, "tanh", x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Sigmoid, "sigmoid", x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Gelu, "gelu", x)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let sx = self.tensors[x.0].shape.clone();
        let out: Vec<f64> = self.tensors[x.0].data.iter().map(|&v| v * k).collect();
        self.push("scale", sx, out, Op::Scale { x, k })
    }

    /// Numerically stable softmax along `axis` (0 = down columns, 1 = along
    /// rows) of a rank <= 2 tensor.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.tensors[x.0].view2("softmax")?;
        if axis > 1 {
            return Err(Error::Usage(format!("softmax axis must be 0 or 1, got {axis}")));
        }
        let sx = self.tensors[x.0].shape.clone();
        let xd = &self.tensors[x.0].data;
        let mut out = vec![0.0; xd.len()];
        let (groups, len, stride_g, stride_e) = if axis == 1 {
            (r, c, c, 1)
        } else {
            (c, r, 1, c)
        };
        for g in 0..groups {
            let at = |e: usize| g * stride_g + e * stride_e;
            let mut mx = f64::NEG_INFINITY;
            for e in 0..len {
                mx = mx.max(xd[at(e)]);
            }
            let mut sum = 0.0;
            for e in 0..len {
                let v = (xd[at(e)] - mx).exp();
                out[at(e)] = v;
                sum += v;
            }
            for e in 0..len {
                out[at(e)] /= sum;
            }
        }
        self.push("softmax", sx, out, Op::Softmax { x, axis })
    }

    /// Layer normalization over the last axis with learnable gain/offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.tensors[x.0].view2("layer_norm")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.tensors[v.0].len() != c {
                return Err(Error::Shape {
                    op: "layer_norm",
                    detail: format!(
                        "{name} has {} values, input has {c} channels",
                        self.tensors[v.0].len()
                    ),
                });
            }
        }
        let sx = self.tensors[x.0].shape.clone();
        let xd = &self.tensors[x.0].data;
        let gd = &self.tensors[gamma.0].data;
        let bd = &self.tensors[beta.0].data;
        let mut out = vec![0.0; xd.len()];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv * gd[j] + bd[j];
            }
        }
        self.push("layer_norm", sx, out, Op::LayerNorm { x, gamma, beta })
    }

    /// im2col lowering of a same-padded 1-D window: `x (L x Cin)` becomes
    /// `(L x k*Cin)` with zero padding, column index `dk*Cin + c`.
    pub fn im2col(&mut self, x: Var, k: usize) -> Result<Var> {
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!("conv kernel size must be odd, got {k}")));
        }
        let (l, cin) = self.tensors[x.0].view2("im2col")?;
        let pad = (k - 1) / 2;
        let xd = &self.tensors[x.0].data;
        let mut out = vec![0.0; l * k * cin];
        for i in 0..l {
            for dk in 0..k {
                let src = i as isize + dk as isize - pad as isize;
                if src < 0 || src >= l as isize {
                    continue;
                }
                let src = src as usize;
                let dst = i * k * cin + dk * cin;
                out[dst..dst + cin].copy_from_slice(&xd[src * cin..(src + 1) * cin]);
            }
        }
        self.push("im2col", vec![l, k * cin], out, Op::Im2Col { x, l, cin, k })
    }

    /// Same-padded 1-D convolution (cross-correlation) lowered to
    /// im2col + matmul. `w` has shape `[k, cin, cout]`, `b` has `cout` values.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sw = self.tensors[w.0].shape.clone();
        if sw.len() != 3 {
            return Err(Error::Shape {
                op: "conv1d",
                detail: format!("weight must be rank 3 [k, cin, cout], got {sw:?}"),
            });
        }
        let (k, cin, cout) = (sw[0], sw[1], sw[2]);
        let (_, xc) = self.tensors[x.0].view2("conv1d")?;
        if xc != cin {
            return Err(Error::Shape {
                op: "conv1d",
                detail: format!("input has {xc} channels, weight expects {cin}"),
            });
        }
        if self.tensors[b.0].len() != cout {
            return Err(Error::Shape {
                op: "conv1d",
                detail: format!("bias has {} values, weight expects {cout}", self.tensors[b.0].len()),
            });
        }
        let cols = self.im2col(x, k)?;
        let wm = self.reshape(w, vec![k * cin, cout])?;
        let prod = self.matmul(cols, wm)?;
        let brow = self.reshape(b, vec![1, cout])?;
        self.add(prod, brow)
    }

    /// Same-padded max pooling over the time axis of `x (L x C)`; padding is
    /// -inf and gradient routes to the first maximal index in each window.
    pub fn maxpool1d(&mut self, x: Var, k: usize) -> Result<Var> {
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!("pool kernel size must be odd, got {k}")));
        }
        let (l, c) = self.tensors[x.0].view2("maxpool1d")?;
        let pad = (k - 1) / 2;
        let xd = &self.tensors[x.0].data;
        let mut out = vec![0.0; l * c];
        let mut argmax = vec![0usize; l * c];
        for i in 0..l {
            for j in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = 0usize;
                for dk in 0..k {
                    let src = i as isize + dk as isize - pad as isize;
                    if src < 0 || src >= l as isize {
                        continue;
                    }
                    let v = xd[src as usize * c + j];
                    if v > best {
                        best = v;
                        best_at = src as usize * c + j;
                    }
                }
                out[i * c + j] = best;
                argmax[i * c + j] = best_at;
            }
        }
        let sx = self.tensors[x.0].shape.clone();
        self.push("maxpool1d", sx, out, Op::MaxPool1d { x, argmax })
    }

    /// Column-wise maximum over rows: `x (L x C) -> (1 x C)`; gradient routes
    /// to the first maximal row per column.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (l, c) = self.tensors[x.0].view2("max_rows")?;
        let xd = &self.tensors[x.0].data;
        let mut out = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0usize; c];
        for j in 0..c {
            for i in 0..l {
                let v = xd[i * c + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        self.push("max_rows", vec![1, c], out, Op::MaxRows { x, argmax })
    }

    /// Column-wise mean over rows: `x (L x C) -> (1 x C)`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (l, c) = self.tensors[x.0].view2("mean_rows")?;
        let xd = &self.tensors[x.0].data;
        let mut out = vec![0.0; c];
        for i in 0..l {
            for j in 0..c {
                out[j] += xd[i * c + j];
            }
        }
        for v in &mut out {
            *v /= l as f64;
        }
        self.push("mean_rows", vec![1, c], out, Op::MeanRows { x })
    }

    /// Sum of every element, as a `[1]` scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.tensors[x.0].data.iter().sum();
        self.push("sum_all", vec![1], vec![s], Op::SumAll { x })
    }

    /// Exchange of the last two dimensions of a rank <= 2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.tensors[x.0].view2("transpose")?;
        let xd = &self.tensors[x.0].data;
        let mut out = vec![0.0; xd.len()];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        self.push("transpose", vec![c, r], out, Op::Transpose { x })
    }

    /// Concatenate rank-2 tensors along `axis` (0 = stack rows, 1 = widen).
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Usage("concat of zero tensors".into()));
        }
        if axis > 1 {
            return Err(Error::Usage(format!("concat axis must be 0 or 1, got {axis}")));
        }
        let dims: Vec<(usize, usize)> = xs
            .iter()
            .map(|v| self.tensors[v.0].view2("concat"))
            .collect::<Result<_>>()?;
        let (r0, c0) = dims[0];
        let mut out;
        let shape;
        if axis == 0 {
            if dims.iter().any(|&(_, c)| c != c0) {
                return Err(Error::Shape { op: "concat", detail: "column counts differ".into() });
            }
            let rows: usize = dims.iter().map(|&(r, _)| r).sum();
            out = Vec::with_capacity(rows * c0);
            for v in xs {
                out.extend_from_slice(&self.tensors[v.0].data);
            }
            shape = vec![rows, c0];
        } else {
            if dims.iter().any(|&(r, _)| r != r0) {
                return Err(Error::Shape { op: "concat", detail: "row counts differ".into() });
            }
            let cols: usize = dims.iter().map(|&(_, c)| c).sum();
            out = vec![0.0; r0 * cols];
            let mut off = 0;
            for (v, &(_, c)) in xs.iter().zip(&dims) {
                let xd = &self.tensors[v.0].data;
                for i in 0..r0 {
                    out[i * cols + off..i * cols + off + c]
                        .copy_from_slice(&xd[i * c..(i + 1) * c]);
                }
                off += c;
            }
            shape = vec![r0, cols];
        }
        self.push("concat", shape, out, Op::Concat { xs: xs.to_vec(), axis })
    }

    /// Reinterpret the row-major data under a new shape (no data movement).
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.tensors[x.0].len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.tensors[x.0].shape),
            });
        }
        let data = self.tensors[x.0].data.clone();
        self.push("reshape", shape, data, Op::Reshape { x })
    }

    /// Select rows of `x (R x C)` by index (duplicates allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.tensors[x.0].view2("gather_rows")?;
        if idx.is_empty() {
            return Err(Error::Usage("gather_rows with empty index set".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Shape {
                op: "gather_rows",
                detail: format!("row {bad} out of range for {r} rows"),
            });
        }
        let xd = &self.tensors[x.0].data;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        self.push("gather_rows", vec![idx.len(), c], out, Op::GatherRows { x, idx: idx.to_vec() })
    }

    /// Repeat a `1 x C` row `n` times into an `n x C` tensor.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let (r, c) = self.tensors[x.0].view2("repeat_rows")?;
        if r != 1 || n == 0 {
            return Err(Error::Shape {
                op: "repeat_rows",
                detail: format!("need a single row and n > 0, got {r} rows, n = {n}"),
            });
        }
        let xd = &self.tensors[x.0].data;
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(xd);
        }
        self.push("repeat_rows", vec![n, c], out, Op::RepeatRows { x })
    }

    /// Copy of `base (R x C)` with row `idx[u]` replaced by `src` row `u`.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.tensors[base.0].view2("scatter_rows")?;
        let (u, cs) = self.tensors[src.0].view2("scatter_rows")?;
        if cs != c || u != idx.len() {
            return Err(Error::Shape {
                op: "scatter_rows",
                detail: format!("src {u} x {cs} vs base {r} x {c} with {} indices", idx.len()),
            });
        }
        let mut seen = vec![false; r];
        for &i in idx {
            if i >= r || seen[i] {
                return Err(Error::Usage(format!("scatter_rows index {i} out of range or repeated")));
            }
            seen[i] = true;
        }
        let mut out = self.tensors[base.0].data.clone();
        let sd = &self.tensors[src.0].data;
        for (u0, &i) in idx.iter().enumerate() {
            out[i * c..(i + 1) * c].copy_from_slice(&sd[u0 * c..(u0 + 1) * c]);
        }
        let sb = self.tensors[base.0].shape.clone();
        self.push("scatter_rows", sb, out, Op::ScatterRows { base, src, idx: idx.to_vec() })
    }

    // ---- backward --------------------------------------------------------

    fn add_grad(&mut self, v: Var, contrib: &[f64]) {
        let t = &mut self.tensors[v.0];
        let g = t.grad.get_or_insert_with(|| vec![0.0; t.data.len()]);
        for (dst, src) in g.iter_mut().zip(contrib) {
            *dst += src;
        }
    }

    fn take_grad(&self, v: Var) -> Option<Vec<f64>> {
        self.tensors[v.0].grad.clone()
    }

    /// Reverse sweep from a scalar loss; populates `grad` on every
    /// reachable slot whose subgraph contains a `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.tensors.is_empty() {
            return Err(Error::Usage("backward on an empty graph".into()));
        }
        if self.tensors[loss.0].len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.tensors[loss.0].shape
            )));
        }
        self.add_grad(loss, &[1.0]);
        for i in (0..self.ops.len()).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(g) = self.take_grad(Var(i)) else { continue };
            let op = self.ops[i].clone();
            self.backprop_node(Var(i), &op, &g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, node: Var, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.needs_grad[a.0] {
                    let bd = &self.tensors[b.0].data;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bd[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    self.add_grad(*a, &da);
                }
                if self.needs_grad[b.0] {
                    let ad = &self.tensors[a.0].data;
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    self.add_grad(*b, &db);
                }
            }
            Op::Bin { kind, a, b, bc } => self.backprop_bin(*kind, *a, *b, *bc, g),
            Op::MaxPair { a, b } => {
                let winners: Vec<bool> = self.tensors[a.0]
                    .data
                    .iter()
                    .zip(&self.tensors[b.0].data)
                    .map(|(&x, &y)| x >= y)
                    .collect();
                if self.needs_grad[a.0] {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&winners)
                        .map(|(&gv, &w)| if w { gv } else { 0.0 })
                        .collect();
                    self.add_grad(*a, &da);
                }
                if self.needs_grad[b.0] {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(&winners)
                        .map(|(&gv, &w)| if w { 0.0 } else { gv })
                        .collect();
                    self.add_grad(*b, &db);
                }
            }
            Op::Un { kind, x } => {
                if !self.needs_grad[x.0] {
                    return;
                }
                let yd = &self.tensors[node.0].data;
                let xd = &self.tensors[x.0].data;
                let dx: Vec<f64> = match kind {
                    UnKind::Exp => g.iter().zip(yd).map(|(&gv, &y)| gv * y).collect(),
                    UnKind::Tanh => g.iter().zip(yd).map(|(&gv, &y)| gv * (1.0 - y * y)).collect(),
                    UnKind::Sigmoid => {
                        g.iter().zip(yd).map(|(&gv, &y)| gv * y * (1.0 - y)).collect()
                    }
                    UnKind::Gelu => g.iter().zip(xd).map(|(&gv, &x)| gv * gelu_grad(x)).collect(),
                };
                self.add_grad(*x, &dx);
            }
            Op::Scale { x, k } => {
                if self.needs_grad[x.0] {
                    let dx: Vec<f64> = g.iter().map(|&gv| gv * k).collect();
                    self.add_grad(*x, &dx);
                }
            }
            Op::Softmax { x, axis } => {
                if !self.needs_grad[x.0] {
                    return;
                }
                let yd = self.tensors[node.0].data.clone();
                let (r, c) = self.tensors[node.0].view2("softmax").expect("checked at forward");
                let (groups, len, stride_g, stride_e) =
                    if *axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
                let mut dx = vec![0.0; yd.len()];
                for grp in 0..groups {
                    let at = |e: usize| grp * stride_g + e * stride_e;
                    let mut dot = 0.0;
                    for e in 0..len {
                        dot += g[at(e)] * yd[at(e)];
                    }
                    for e in 0..len {
                        dx[at(e)] = yd[at(e)] * (g[at(e)] - dot);
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (r, c) = self.tensors[x.0].view2("layer_norm").expect("checked at forward");
                let xd = self.tensors[x.0].data.clone();
                let gd = self.tensors[gamma.0].data.clone();
                let mut dx = vec![0.0; xd.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..r {
                    let row = &xd[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var =
                        row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let mut mean_h = 0.0;
                    let mut mean_hx = 0.0;
                    for j in 0..c {
                        let h = grow[j] * gd[j];
                        mean_h += h;
                        mean_hx += h * xhat[j];
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                    mean_h /= c as f64;
                    mean_hx /= c as f64;
                    for j in 0..c {
                        let h = grow[j] * gd[j];
                        dx[i * c + j] = inv * (h - mean_h - xhat[j] * mean_hx);
                    }
                }
                if self.needs_grad[x.0] {
                    self.add_grad(*x, &dx);
                }
                if self.needs_grad[gamma.0] {
                    self.add_grad(*gamma, &dgamma);
                }
                if self.needs_grad[beta.0] {
                    self.add_grad(*beta, &dbeta);
                }
            }
            Op::Im2Col { x, l, cin, k } => {
                if !self.needs_grad[x.0] {
                    return;
                }
                let (l, cin, k) = (*l, *cin, *k);
                let pad = (k - 1) / 2;
                let mut dx = vec![0.0; l * cin];
                for i in 0..l {
                    for dk in 0..k {
                        let src = i as isize + dk as isize - pad as isize;
                        if src < 0 || src >= l as isize {
                            continue;
                        }
                        let src = src as usize;
                        for ch in 0..cin {
                            dx[src * cin + ch] += g[i * k * cin + dk * cin + ch];
                        }
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::MaxPool1d { x, argmax } | Op::MaxRows { x, argmax } => {
                if !self.needs_grad[x.0] {
                    return;
                }
                let mut dx = vec![0.0; self.tensors[x.0].len()];
                match op {
                    Op::MaxPool1d { .. } => {
                        for (out_flat, &src) in argmax.iter().enumerate() {
                            dx[src] += g[out_flat];
                        }
                    }
                    _ => {
                        let (_, c) = self.tensors[x.0].view2("max_rows").expect("checked");
                        for (j, &row) in argmax.iter().enumerate() {
                            dx[row * c + j] += g[j];
                        }
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::MeanRows { x } => {
                if !self.needs_grad[x.0] {
                    return;
                }
                let (l, c) = self.tensors[x.0].view2("mean_rows").expect("checked");
                let mut dx = vec![0.0; l * c];
                for i in 0..l {
                    for j in 0..c {
                        dx[i * c + j] = g[j] / l as f64;
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::SumAll { x } => {
                if self.needs_grad[x.0] {
                    let dx = vec![g[0]; self.tensors[x.0].len()];
                    self.add_grad(*x, &dx);
                }
            }
            Op::Transpose { x } => {
                if !self.needs_grad[x.0] {
                    return;
                }
                let (r, c) = self.tensors[x.0].view2("transpose").expect("checked");
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::Concat { xs, axis } => {
                let dims: Vec<(usize, usize)> = xs
                    .iter()
                    .map(|v| self.tensors[v.0].view2("concat").expect("checked"))
                    .collect();
                if *axis == 0 {
                    let mut off = 0;
                    for (v, &(r, c)) in xs.iter().zip(&dims) {
                        if self.needs_grad[v.0] {
                            self.add_grad(*v, &g[off..off + r * c]);
                        }
                        off += r * c;
                    }
                } else {
                    let rows = dims[0].0;
                    let total_c: usize = dims.iter().map(|&(_, c)| c).sum();
                    let mut off = 0;
                    for (v, &(_, c)) in xs.iter().zip(&dims) {
                        if self.needs_grad[v.0] {
                            let mut dv = vec![0.0; rows * c];
                            for i in 0..rows {
                                dv[i * c..(i + 1) * c]
                                    .copy_from_slice(&g[i * total_c + off..i * total_c + off + c]);
                            }
                            self.add_grad(*v, &dv);
                        }
                        off += c;
                    }
                }
            }
            Op::Reshape { x } => {
                if self.needs_grad[x.0] {
                    self.add_grad(*x, g);
                }
            }
            Op::GatherRows { x, idx } => {
                if !self.needs_grad[x.0] {
                    return;
                }
                let (r, c) = self.tensors[x.0].view2("gather_rows").expect("checked");
                let mut dx = vec![0.0; r * c];
                for (u, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += g[u * c + j];
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::RepeatRows { x } => {
                if !self.needs_grad[x.0] {
                    return;
                }
                let c = self.tensors[x.0].len();
                let n = g.len() / c;
                let mut dx = vec![0.0; c];
                for i in 0..n {
                    for j in 0..c {
                        dx[j] += g[i * c + j];
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::ScatterRows { base, src, idx } => {
                let (_, c) = self.tensors[base.0].view2("scatter_rows").expect("checked");
                if self.needs_grad[src.0] {
                    let mut ds = vec![0.0; idx.len() * c];
                    for (u, &i) in idx.iter().enumerate() {
                        ds[u * c..(u + 1) * c].copy_from_slice(&g[i * c..(i + 1) * c]);
                    }
                    self.add_grad(*src, &ds);
                }
                if self.needs_grad[base.0] {
                    let mut db = g.to_vec();
                    for &i in idx {
                        for v in &mut db[i * c..(i + 1) * c] {
                            *v = 0.0;
                        }
                    }
                    self.add_grad(*base, &db);
                }
            }
        }
    }

    fn backprop_bin(&mut self, kind: BinKind, a: Var, b: Var, bc: Bcast, g: &[f64]) {
        let (r, c) = match self.tensors[a.0].shape.len() {
            0..=2 => self.tensors[a.0].view2("bin").expect("checked at forward"),
            _ => (1, self.tensors[a.0].len()),
        };
        let ad = self.tensors[a.0].data.clone();
        let bd = self.tensors[b.0].data.clone();
        let bval = |i: usize, j: usize| match bc {
            Bcast::Same => bd[i * c + j],
            Bcast::Row => bd[j],
            Bcast::Col => bd[i],
            Bcast::Scalar => bd[0],
        };
        if self.needs_grad[a.0] {
            let mut da = vec![0.0; ad.len()];
            for i in 0..r {
                for j in 0..c {
                    let flat = i * c + j;
                    da[flat] = match kind {
                        BinKind::Add | BinKind::Sub => g[flat],
                        BinKind::Mul => g[flat] * bval(i, j),
                        BinKind::Div => g[flat] / guard_den(bval(i, j)),
                    };
                }
            }
            self.add_grad(a, &da);
        }
        if self.needs_grad[b.0] {
            let mut db = vec![0.0; bd.len()];
            for i in 0..r {
                for j in 0..c {
                    let flat = i * c + j;
                    let contrib = match kind {
                        BinKind::Add => g[flat],
                        BinKind::Sub => -g[flat],
                        BinKind::Mul => g[flat] * ad[flat],
                        BinKind::Div => {
                            let den = guard_den(bval(i, j));
                            -g[flat] * ad[flat] / (den * den)
                        }
                    };
                    let slot = match bc {
                        Bcast::Same => flat,
                        Bcast::Row => j,
                        Bcast::Col => i,
                        Bcast::Scalar => 0,
                    };
                    db[slot] += contrib;
                }
            }
            self.add_grad(b, &db);
        }
    }
}

// ---- scalar helpers ------------------------------------------------------

pub(crate) fn guard_den(v: f64) -> f64 {
    if v.abs() < DIV_GUARD_THRESHOLD {
        v + DIV_GUARD
    } else {
        v
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

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GeLU, tanh approximation.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}
