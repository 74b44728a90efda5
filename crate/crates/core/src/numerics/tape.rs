//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value; node order is a
//! topological order, so backward is a single reverse sweep.

use rand::Rng;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{ParamId, ParamStore, Real, SeededRng, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Bmm { a: Var, b: Var, g: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Reshape { a: Var },
    SwapAxes12 { a: Var, dims: [usize; 4] },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, k: T },
    AddBias { a: Var, bias: Var },
    Relu { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Concat { parts: Vec<Var> },
    Slice { a: Var, start: usize },
    Dropout { a: Var, keep: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    /// `gap`: smallest lead of a winner over the runner-up in its group.
    MaxPoolTime { a: Var, winners: Vec<usize>, gap: T },
    SelectTime { a: Var, t: usize, n: usize },
    StackTime { parts: Vec<Var> },
    SelectRows { a: Var, b: Var, mask: Vec<bool> },
    ShiftTime { a: Var, src: Vec<Option<usize>> },
    Sum { a: Var },
    /// Scalar-valued function whose partials were computed in the forward pass.
    ScalarFn { inputs: Vec<Var>, partials: Vec<Vec<T>> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn shape_3d(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize)> {
    match *s {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::shape(op, format!("expected a rank-3 tensor, got {s:?}"))),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last backward pass, if the node was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- leaves

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Leaf that receives a gradient (used by gradient checks on inputs).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, &[]);
        self.nodes[v.0].requires_grad = true;
        v
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), &[])
    }

    // ------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, k2, n) = match (sa, sb) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            _ => {
                return Err(Error::Dimension {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                })
            }
        };
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// `x[..., k] · w[k, n]` over all leading axes.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().ok_or_else(|| Error::shape("linear", "scalar input"))?;
        let rows = shape.iter().product::<usize>() / k.max(1);
        let flat = self.reshape(x, vec![rows, k])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = bias {
            y = self.add_bias(y, b)?;
        }
        let n = self.shape(y)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = n;
        self.reshape(y, out_shape)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = match *self.shape(a) {
            [r, c] => (r, c),
            ref s => return Err(Error::shape("transpose", format!("expected a matrix, got {s:?}"))),
        };
        let src = self.data(a);
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let value = Tensor::new(vec![cols, rows], out)?;
        Ok(self.push(value, Op::Transpose { a, rows, cols }, &[a]))
    }

    /// Batched product of `a[g×m×k]` with `b[g×k×n]` (or `b[g×n×k]ᵀ` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (g, m, k) = shape_3d("bmm", self.shape(a))?;
        let (g2, r, c) = shape_3d("bmm", self.shape(b))?;
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if g != g2 || k != kb {
            return Err(Error::Dimension {
                op: "bmm",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![T::zero(); g * m * n];
        for i in 0..g {
            let ai = &da[i * m * k..(i + 1) * m * k];
            let bi = &db[i * k * n..(i + 1) * k * n];
            let oi = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(ai, bi, oi, m, k, n);
            } else {
                gemm_nn(ai, bi, oi, m, k, n);
            }
        }
        let value = Tensor::new(vec![g, m, n], out)?;
        Ok(self.push(value, Op::Bmm { a, b, g, m, k, n, trans_b }, &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if self.shape(a) == shape.as_slice() {
            return Ok(a);
        }
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    /// `[d0, d1, d2, d3] → [d0, d2, d1, d3]`
    pub fn swap_axes_12(&mut self, a: Var) -> Result<Var> {
        let dims: [usize; 4] = self
            .shape(a)
            .try_into()
            .map_err(|_| Error::shape("swap_axes_12", format!("expected rank 4, got {:?}", self.shape(a))))?;
        let out = swap12(self.data(a), dims);
        let value = Tensor::new(vec![dims[0], dims[2], dims[1], dims[3]], out)?;
        Ok(self.push(value, Op::SwapAxes12 { a, dims }, &[a]))
    }

    // ---------------------------------------------------------- elementwise

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let k = T::of(k);
        let out = self.data(a).iter().map(|&x| x * k).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        self.push(value, Op::Scale { a, k }, &[a])
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let w = self.value(a).last_dim();
        if self.shape(bias) != [w] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias);
        let out = self
            .data(a)
            .chunks(w)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::AddBias { a, bias }, &[a, bias]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        self.push(value, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, T::tanh, Op::Tanh { a })
    }

    // -------------------------------------------------------- normalization

    /// Softmax over the last axis. `mask` has one entry per element; masked
    /// entries get exactly zero probability.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let x = self.data(a);
        if let Some(m) = mask {
            if m.len() != x.len() {
                return Err(Error::shape(
                    "softmax",
                    format!("mask has {} entries for {} values", m.len(), x.len()),
                ));
            }
        }
        let w = self.value(a).last_dim();
        let mut out = vec![T::zero(); x.len()];
        for (g, (row, o)) in x.chunks(w).zip(out.chunks_mut(w)).enumerate() {
            let keep = |j: usize| mask.is_none_or(|m| m[g * w + j]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::DegenerateGroup { group: g });
            }
            let mut total = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - max).exp();
                    o[j] = e;
                    total += e;
                }
            }
            for v in o.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { a }, &[a]))
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d == 0 || self.shape(x).is_empty() {
            return Err(Error::EmptyFeature);
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let eps = T::of(eps);
        let inv_d = T::of(1.0 / d as f64);
        let (g, b) = (self.data(gamma), self.data(beta));
        let src = self.data(x);
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = (var + eps).sqrt().recip();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    // ------------------------------------------------------------ structure

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_last", "no inputs"))?;
        let lead = &self.shape(first)[..self.shape(first).len().saturating_sub(1)];
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(Error::Dimension {
                    op: "concat_last",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, parts))
    }

    /// Columns `start..start + width` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let w = self.value(a).last_dim();
        if start + width > w || self.shape(a).is_empty() {
            return Err(Error::shape(
                "slice_last",
                format!("range {start}..{} exceeds width {w}", start + width),
            ));
        }
        let out = self
            .data(a)
            .chunks(w)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().expect("non-empty") = width;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Slice { a, start }, &[a]))
    }

    /// Inverted dropout. With `rng == None` (evaluation) this is the identity.
    pub fn dropout(&mut self, a: Var, p: f64, rng: Option<&mut SeededRng>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        let rng = match rng {
            Some(r) if p > 0.0 => r,
            _ => return Ok(a),
        };
        let scale = T::of(1.0 / (1.0 - p));
        let keep: Vec<T> = (0..self.value(a).numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { scale })
            .collect();
        let out = self.data(a).iter().zip(&keep).map(|(&x, &k)| x * k).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Dropout { a, keep }, &[a]))
    }

    /// Rows of `table[v×e]` for an id matrix of shape `shape`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let (vocab, e) = match *self.shape(table) {
            [v, e] => (v, e),
            ref s => return Err(Error::shape("embedding", format!("table must be a matrix, got {s:?}"))),
        };
        if shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", "id count does not match shape"));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: id,
                    size: vocab,
                });
            }
            out.extend_from_slice(&src[id * e..(id + 1) * e]);
        }
        let mut out_shape = shape.to_vec();
        out_shape.push(e);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Max over the time axis of `a[B×n×d]`; positions with `mask == false`
    /// never win. Ties go to the earliest position.
    pub fn maxpool_time(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (b, n, d) = shape_3d("maxpool_time", self.shape(a))?;
        if mask.len() != b * n {
            return Err(Error::shape("maxpool_time", "mask must be B×n"));
        }
        let src = self.data(a);
        let mut out = vec![T::zero(); b * d];
        let mut winners = vec![0usize; b * d];
        let mut gap = T::infinity();
        for bi in 0..b {
            let first = (0..n)
                .find(|&t| mask[bi * n + t])
                .ok_or_else(|| Error::Contract(format!("sequence {bi} has no real tokens")))?;
            for j in 0..d {
                let mut best = first;
                for t in first + 1..n {
                    if mask[bi * n + t] && src[(bi * n + t) * d + j] > src[(bi * n + best) * d + j] {
                        best = t;
                    }
                }
                let idx = (bi * n + best) * d + j;
                for t in (0..n).filter(|&t| t != best && mask[bi * n + t]) {
                    gap = gap.min(src[idx] - src[(bi * n + t) * d + j]);
                }
                out[bi * d + j] = src[idx];
                winners[bi * d + j] = idx;
            }
        }
        let value = Tensor::new(vec![b, d], out)?;
        Ok(self.push(value, Op::MaxPoolTime { a, winners, gap }, &[a]))
    }

    /// Time step `t` of `a[B×n×k]` as `[B×k]`.
    pub fn select_time(&mut self, a: Var, t: usize) -> Result<Var> {
        let (b, n, k) = shape_3d("select_time", self.shape(a))?;
        if t >= n {
            return Err(Error::Index {
                what: "time axis",
                index: t,
                size: n,
            });
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(b * k);
        for bi in 0..b {
            out.extend_from_slice(&src[(bi * n + t) * k..(bi * n + t + 1) * k]);
        }
        let value = Tensor::new(vec![b, k], out)?;
        Ok(self.push(value, Op::SelectTime { a, t, n }, &[a]))
    }

    /// Stacks `[B×k]` steps into `[B×n×k]`.
    pub fn stack_time(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("stack_time", "no inputs"))?;
        let (b, k) = match *self.shape(first) {
            [b, k] => (b, k),
            ref s => return Err(Error::shape("stack_time", format!("expected matrices, got {s:?}"))),
        };
        for &p in parts {
            if self.shape(p) != [b, k] {
                return Err(Error::Dimension {
                    op: "stack_time",
                    lhs: vec![b, k],
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let n = parts.len();
        let mut out = vec![T::zero(); b * n * k];
        for (t, &p) in parts.iter().enumerate() {
            let src = self.data(p);
            for bi in 0..b {
                out[(bi * n + t) * k..(bi * n + t + 1) * k].copy_from_slice(&src[bi * k..(bi + 1) * k]);
            }
        }
        let value = Tensor::new(vec![b, n, k], out)?;
        Ok(self.push(value, Op::StackTime { parts: parts.to_vec() }, parts))
    }

    /// Row-wise choice: row `r` comes from `a` where `mask[r]`, else from `b`.
    /// Rows are the slices along the last axis.
    pub fn select_rows(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        self.same_shape("select_rows", a, b)?;
        let w = self.value(a).last_dim();
        if mask.len() * w != self.value(a).numel() {
            return Err(Error::shape("select_rows", "mask must have one entry per row"));
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(da.len());
        for (r, &m) in mask.iter().enumerate() {
            let src = if m { da } else { db };
            out.extend_from_slice(&src[r * w..(r + 1) * w]);
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::SelectRows { a, b, mask: mask.to_vec() }, &[a, b]))
    }

    /// `out[b, t] = a[b, t + offset]` when that position is a real token,
    /// zeros otherwise.
    pub fn shift_time(&mut self, a: Var, offset: isize, mask: &[bool]) -> Result<Var> {
        let (b, n, d) = shape_3d("shift_time", self.shape(a))?;
        if mask.len() != b * n {
            return Err(Error::shape("shift_time", "mask must be B×n"));
        }
        let src_data = self.data(a);
        let mut out = vec![T::zero(); b * n * d];
        let mut src = vec![None; b * n];
        for bi in 0..b {
            for t in 0..n {
                let s = t as isize + offset;
                if s >= 0 && (s as usize) < n && mask[bi * n + s as usize] {
                    let row = bi * n + s as usize;
                    src[bi * n + t] = Some(row);
                    out[(bi * n + t) * d..(bi * n + t + 1) * d].copy_from_slice(&src_data[row * d..(row + 1) * d]);
                }
            }
        }
        let value = Tensor::new(vec![b, n, d], out)?;
        Ok(self.push(value, Op::ShiftTime { a, src }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    /// Records a scalar function whose partial derivatives w.r.t. each input
    /// are already known. `partials[i]` must match the shape of `inputs[i]`.
    pub fn scalar_fn(&mut self, value: T, inputs: &[Var], partials: Vec<Vec<T>>) -> Result<Var> {
        if inputs.len() != partials.len() {
            return Err(Error::Contract("one partial per input required".into()));
        }
        for (&v, p) in inputs.iter().zip(&partials) {
            if self.value(v).numel() != p.len() {
                return Err(Error::shape("scalar_fn", "partial does not match input size"));
            }
        }
        Ok(self.push(
            Tensor::scalar(value),
            Op::ScalarFn {
                inputs: inputs.to_vec(),
                partials,
            },
            inputs,
        ))
    }

    /// Summed softmax cross-entropy of `logits[B×C]` against gold classes.
    pub fn cross_entropy_sum(&mut self, logits: Var, gold: &[usize]) -> Result<Var> {
        let (b, c) = match *self.shape(logits) {
            [b, c] => (b, c),
            ref s => return Err(Error::shape("cross_entropy", format!("expected B×C logits, got {s:?}"))),
        };
        if gold.len() != b {
            return Err(Error::shape("cross_entropy", "one gold label per row required"));
        }
        let x = self.data(logits);
        let mut total = T::zero();
        let mut partial = vec![T::zero(); b * c];
        for (r, &y) in gold.iter().enumerate() {
            if y >= c {
                return Err(Error::Index {
                    what: "classes",
                    index: y,
                    size: c,
                });
            }
            let row = &x[r * c..(r + 1) * c];
            let lse = super::kernels::log_sum_exp(row.iter().copied());
            total += lse - row[y];
            for j in 0..c {
                partial[r * c + j] = (row[j] - lse).exp();
            }
            partial[r * c + y] -= T::one();
        }
        self.scalar_fn(total, &[logits], vec![partial])
    }

    /// Distance of the recorded forward pass from its nearest
    /// non-differentiable point: the smallest |input| of any relu and the
    /// smallest winner/runner-up gap of any max-pool. Infinite if neither op
    /// was recorded.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu { a } => {
                    for &x in self.data(*a) {
                        margin = margin.min(x.abs().as_f64());
                    }
                }
                Op::MaxPoolTime { gap, .. } => margin = margin.min(gap.as_f64()),
                _ => {}
            }
        }
        margin
    }

    // ------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Gradients accumulate on tape nodes
    /// and into `store` for parameter nodes; calling twice accumulates twice.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for node in &mut self.nodes[..=loss.0] {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let (head, tail) = self.nodes.split_at_mut(i);
            backprop(head, &tail[0], &grad);
            tail[0].grad = Some(grad);
        }

        for node in &self.nodes[..=loss.0] {
            if let (Op::Param(id), Some(g)) = (&node.op, &node.grad) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn swap12<T: Real>(src: &[T], [d0, d1, d2, d3]: [usize; 4]) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for a in 0..d0 {
        for b in 0..d1 {
            for c in 0..d2 {
                let from = ((a * d1 + b) * d2 + c) * d3;
                let to = ((a * d2 + c) * d1 + b) * d3;
                out[to..to + d3].copy_from_slice(&src[from..from + d3]);
            }
        }
    }
    out
}

/// Adds `f`'s contribution to input `v`'s gradient, if it needs one.
fn accumulate<T: Real>(head: &mut [Node<T>], v: Var, f: impl FnOnce(&[Node<T>], &mut [T])) {
    if !head[v.0].requires_grad {
        return;
    }
    let n = head[v.0].value.numel();
    let mut g = head[v.0].grad.take().unwrap_or_else(|| vec![T::zero(); n]);
    f(head, &mut g);
    head[v.0].grad = Some(g);
}

fn backprop<T: Real>(head: &mut [Node<T>], node: &Node<T>, dy: &[T]) {
    let y = node.value.data();
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        &Op::MatMul { a, b, m, k, n } => {
            accumulate(head, a, |h, ga| gemm_nt(dy, h[b.0].value.data(), ga, m, n, k));
            accumulate(head, b, |h, gb| gemm_tn(h[a.0].value.data(), dy, gb, m, k, n));
        }
        &Op::Transpose { a, rows, cols } => accumulate(head, a, |_, ga| {
            for i in 0..rows {
                for j in 0..cols {
                    ga[i * cols + j] += dy[j * rows + i];
                }
            }
        }),
        &Op::Bmm { a, b, g, m, k, n, trans_b } => {
            accumulate(head, a, |h, ga| {
                let db = h[b.0].value.data();
                for i in 0..g {
                    let dyi = &dy[i * m * n..(i + 1) * m * n];
                    let bi = &db[i * k * n..(i + 1) * k * n];
                    let gai = &mut ga[i * m * k..(i + 1) * m * k];
                    if trans_b {
                        // y = a·bᵀ with b[n×k]: da = dy·b
                        gemm_nn(dyi, bi, gai, m, n, k);
                    } else {
                        gemm_nt(dyi, bi, gai, m, n, k);
                    }
                }
            });
            accumulate(head, b, |h, gb| {
                let da = h[a.0].value.data();
                for i in 0..g {
                    let dyi = &dy[i * m * n..(i + 1) * m * n];
                    let ai = &da[i * m * k..(i + 1) * m * k];
                    let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        // db[n×k] = dyᵀ·a
                        gemm_tn(dyi, ai, gbi, m, n, k);
                    } else {
                        gemm_tn(ai, dyi, gbi, m, k, n);
                    }
                }
            });
        }
        &Op::Reshape { a } => accumulate(head, a, |_, ga| add_into(ga, dy)),
        &Op::SwapAxes12 { a, dims: [d0, d1, d2, d3] } => accumulate(head, a, |_, ga| {
            let back = swap12(dy, [d0, d2, d1, d3]);
            add_into(ga, &back);
        }),
        &Op::Add { a, b } => {
            accumulate(head, a, |_, ga| add_into(ga, dy));
            accumulate(head, b, |_, gb| add_into(gb, dy));
        }
        &Op::Mul { a, b } => {
            accumulate(head, a, |h, ga| {
                for ((g, &d), &x) in ga.iter_mut().zip(dy).zip(h[b.0].value.data()) {
                    *g += d * x;
                }
            });
            accumulate(head, b, |h, gb| {
                for ((g, &d), &x) in gb.iter_mut().zip(dy).zip(h[a.0].value.data()) {
                    *g += d * x;
                }
            });
        }
        &Op::Scale { a, k } => accumulate(head, a, |_, ga| {
            for (g, &d) in ga.iter_mut().zip(dy) {
                *g += d * k;
            }
        }),
        &Op::AddBias { a, bias } => {
            accumulate(head, a, |_, ga| add_into(ga, dy));
            accumulate(head, bias, |_, gb| {
                let w = gb.len();
                for row in dy.chunks(w) {
                    add_into(gb, row);
                }
            });
        }
        &Op::Relu { a } => accumulate(head, a, |_, ga| {
            for ((g, &d), &o) in ga.iter_mut().zip(dy).zip(y) {
                if o > T::zero() {
                    *g += d;
                }
            }
        }),
        &Op::Sigmoid { a } => accumulate(head, a, |_, ga| {
            for ((g, &d), &o) in ga.iter_mut().zip(dy).zip(y) {
                *g += d * o * (T::one() - o);
            }
        }),
        &Op::Tanh { a } => accumulate(head, a, |_, ga| {
            for ((g, &d), &o) in ga.iter_mut().zip(dy).zip(y) {
                *g += d * (T::one() - o * o);
            }
        }),
        &Op::Softmax { a } => accumulate(head, a, |_, ga| {
            let w = node.value.last_dim();
            for ((gr, dr), yr) in ga.chunks_mut(w).zip(dy.chunks(w)).zip(y.chunks(w)) {
                let s: T = dr.iter().zip(yr).map(|(&d, &o)| d * o).sum();
                for j in 0..w {
                    gr[j] += yr[j] * (dr[j] - s);
                }
            }
        }),
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let d = node.value.last_dim();
            let inv_d = T::of(1.0 / d as f64);
            accumulate(head, *x, |h, gx| {
                let g = h[gamma.0].value.data();
                for (r, &is) in inv_std.iter().enumerate() {
                    let dr = &dy[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        let dh = dr[j] * g[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh *= inv_d;
                    mean_dh_h *= inv_d;
                    for j in 0..d {
                        let dh = dr[j] * g[j];
                        gx[r * d + j] += is * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
            });
            accumulate(head, *gamma, |_, gg| {
                for (dr, hr) in dy.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += dr[j] * hr[j];
                    }
                }
            });
            accumulate(head, *beta, |_, gb| {
                for dr in dy.chunks(d) {
                    add_into(gb, dr);
                }
            });
        }
        Op::Concat { parts } => {
            let total = node.value.last_dim();
            let mut offset = 0;
            for &p in parts {
                let w = head[p.0].value.last_dim();
                accumulate(head, p, |_, gp| {
                    for (gr, dr) in gp.chunks_mut(w).zip(dy.chunks(total)) {
                        add_into(gr, &dr[offset..offset + w]);
                    }
                });
                offset += w;
            }
        }
        &Op::Slice { a, start } => {
            let width = node.value.last_dim();
            let w = head[a.0].value.last_dim();
            accumulate(head, a, |_, ga| {
                for (gr, dr) in ga.chunks_mut(w).zip(dy.chunks(width)) {
                    add_into(&mut gr[start..start + width], dr);
                }
            });
        }
        Op::Dropout { a, keep } => accumulate(head, *a, |_, ga| {
            for ((g, &d), &k) in ga.iter_mut().zip(dy).zip(keep) {
                *g += d * k;
            }
        }),
        Op::Embedding { table, ids } => {
            let e = node.value.last_dim();
            accumulate(head, *table, |_, gt| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * e..(id + 1) * e], &dy[r * e..(r + 1) * e]);
                }
            });
        }
        Op::MaxPoolTime { a, winners, .. } => accumulate(head, *a, |_, ga| {
            for (&w, &d) in winners.iter().zip(dy) {
                ga[w] += d;
            }
        }),
        &Op::SelectTime { a, t, n } => {
            let k = node.value.last_dim();
            accumulate(head, a, |_, ga| {
                for (bi, dr) in dy.chunks(k).enumerate() {
                    add_into(&mut ga[(bi * n + t) * k..(bi * n + t + 1) * k], dr);
                }
            });
        }
        Op::StackTime { parts } => {
            let n = parts.len();
            let k = node.value.last_dim();
            for (t, &p) in parts.iter().enumerate() {
                accumulate(head, p, |_, gp| {
                    for (bi, gr) in gp.chunks_mut(k).enumerate() {
                        add_into(gr, &dy[(bi * n + t) * k..(bi * n + t + 1) * k]);
                    }
                });
            }
        }
        Op::SelectRows { a, b, mask } => {
            let w = node.value.last_dim();
            for (v, want) in [(*a, true), (*b, false)] {
                accumulate(head, v, |_, gv| {
                    for (r, &m) in mask.iter().enumerate() {
                        if m == want {
                            add_into(&mut gv[r * w..(r + 1) * w], &dy[r * w..(r + 1) * w]);
                        }
                    }
                });
            }
        }
        Op::ShiftTime { a, src } => {
            let d = node.value.last_dim();
            accumulate(head, *a, |_, ga| {
                for (r, s) in src.iter().enumerate() {
                    if let Some(s) = *s {
                        add_into(&mut ga[s * d..(s + 1) * d], &dy[r * d..(r + 1) * d]);
                    }
                }
            });
        }
        &Op::Sum { a } => accumulate(head, a, |_, ga| {
            for g in ga.iter_mut() {
                *g += dy[0];
            }
        }),
        Op::ScalarFn { inputs, partials } => {
            for (&v, p) in inputs.iter().zip(partials) {
                accumulate(head, v, |_, gv| {
                    for (g, &q) in gv.iter_mut().zip(p) {
                        *g += dy[0] * q;
                    }
                });
            }
        }
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
