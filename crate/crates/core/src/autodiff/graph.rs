//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] and never copied; their gradients come out of
//! [`Graph::backward`] as a [`Gradients`] value that can be summed across graphs.

use crate::error::{Error, Result};

use super::real::{gemm, MatMut, MatRef};
use super::{ParamId, ParamStore, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch norm operating mode.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a, T> {
    /// Normalize by batch statistics.
    Train,
    /// Normalize by the supplied running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-feature batch statistics reported by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance estimate.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Affine(Var, T),
    Relu(Var),
    Gelu(Var),
    Log(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        train: bool,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    Cosine {
        a: Var,
        b: Var,
        denom: T,
        clipped: bool,
    },
    Stack(Vec<Var>),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    MulConst {
        x: Var,
        c: Vec<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
}

/// Gradients of one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    params: Vec<Option<Vec<T>>>,
    leaves: Vec<(Var, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn empty(num_params: usize) -> Self {
        Gradients {
            params: vec![None; num_params],
            leaves: Vec::new(),
        }
    }

    /// Gradient of a parameter, `None` if it never took part in the graph.
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a parameter, zero-filled when it was unreachable.
    pub fn param_or_zero(&self, id: ParamId, len: usize) -> Vec<T> {
        self.param(id)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); len])
    }

    /// Gradient of a leaf input.
    pub fn leaf(&self, v: Var) -> Option<&[T]> {
        self.leaves.iter().find(|(l, _)| *l == v).map(|(_, g)| g.as_slice())
    }

    /// Adds `other` into `self` in a fixed element order.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            match (mine.as_mut(), theirs) {
                (_, None) => {}
                (None, Some(t)) => *mine = Some(t.clone()),
                (Some(m), Some(t)) => m.iter_mut().zip(t).for_each(|(a, b)| *a += *b),
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.params.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn global_norm(&self) -> T {
        self.params
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| *v * *v)
            .sum::<T>()
            .sqrt()
    }

    /// Rescales to `max_norm` when the global norm exceeds it; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: T) -> T {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn retain_params(&mut self, keep: impl Fn(ParamId) -> bool) {
        for (i, g) in self.params.iter_mut().enumerate() {
            if !keep(ParamId(i)) {
                *g = None;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        _ => {
            let last = *shape.last().unwrap();
            let rows = shape[..shape.len() - 1].iter().product();
            (rows, last)
        }
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh_fast();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
    (y, dy)
}

fn softmax_rows<T: Real>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.iter_mut().for_each(|v| *v -= max);
        T::exp_in_place(row);
        let inv = T::one() / row.iter().copied().sum::<T>();
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Recording of one forward computation.
pub struct Graph<'p, T: Real> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.store.value(*id).data(),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, what: &str) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if let Some(bad) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{what} (element {bad})")));
        }
        self.nodes.push(Node { shape, value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input.
    pub fn input(&mut self, tensor: Tensor<T>) -> Result<Var> {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, "input")
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let shape = self.store.value(id).shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Vec::new(),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatRef::dense(self.value(a), m, k),
            MatRef::dense(self.value(b), k, n),
            T::zero(),
            MatMut::dense(&mut out, m, n),
        );
        self.push(vec![m, n], out, Op::MatMul(a, b), "matmul")
    }

    /// `x · w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w);
        let (rows, inp) = rows_cols(&sx);
        if sx.is_empty() || sw.len() != 2 || sw[0] != inp {
            return Err(Error::shape(format!("linear {sx:?} x {sw:?}")));
        }
        let out_dim = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(Error::shape(format!("linear bias {:?} for width {out_dim}", self.shape(b))));
            }
        }
        let mut out = vec![T::zero(); rows * out_dim];
        if let Some(b) = b {
            let bias = self.value(b);
            for row in out.chunks_mut(out_dim) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            T::one(),
            MatRef::dense(self.value(x), rows, inp),
            MatRef::dense(self.value(w), inp, out_dim),
            beta,
            MatMut::dense(&mut out, rows, out_dim),
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = out_dim;
        self.push(shape, out, Op::Linear { x, w, b }, "linear")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x - *y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), "mul")
    }

    /// Adds a `[d]` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, d) = rows_cols(self.shape(x));
        if self.shape(b) != [d] {
            return Err(Error::shape(format!("add_bias {:?} + {:?}", self.shape(x), self.shape(b))));
        }
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(d) {
            row.iter_mut().zip(bias).for_each(|(o, b)| *o += *b);
        }
        self.push(self.shape(x).to_vec(), out, Op::AddBias(x, b), "add_bias")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).iter().map(|v| *v * c).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), "scale")
    }

    /// `a * x + b` elementwise.
    pub fn affine(&mut self, x: Var, a: T, b: T) -> Result<Var> {
        let out = self.value(x).iter().map(|v| a * *v + b).collect();
        self.push(self.shape(x).to_vec(), out, Op::Affine(x, a), "affine")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v.max(T::zero())).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), "relu")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| gelu_parts(*v).0).collect();
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), "gelu")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v.ln()).collect();
        self.push(self.shape(x).to_vec(), out, Op::Log(x), "log")
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        let out = self.value(x).iter().map(|v| v.max(lo).min(hi)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Clamp { x, lo, hi }, "clamp")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, n) = rows_cols(self.shape(x));
        if n == 0 {
            return Err(Error::shape("softmax over an empty axis"));
        }
        let mut out = self.value(x).to_vec();
        softmax_rows(&mut out, n);
        self.push(self.shape(x).to_vec(), out, Op::Softmax(x), "softmax")
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (rows, d) = rows_cols(self.shape(x));
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm {:?} with gamma {:?} beta {:?}",
                self.shape(x),
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if eps <= T::zero() {
            return Err(Error::InvalidArgument("layer_norm eps must be positive".into()));
        }
        let dt = T::from_usize(d).unwrap();
        let (xs, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Batch norm over the rows of a `[batch, d]` matrix.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        mode: NormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || self.shape(gamma) != [sx[1]] || self.shape(beta) != [sx[1]] {
            return Err(Error::shape(format!("batch_norm {sx:?}")));
        }
        let (n, d) = (sx[0], sx[1]);
        let xs = self.value(x);
        let mut mean = vec![T::zero(); d];
        let mut var = vec![T::zero(); d];
        let mut stats = None;
        let train = matches!(mode, NormMode::Train);
        match mode {
            NormMode::Train => {
                if n < 2 {
                    return Err(Error::InvalidArgument(
                        "batch_norm in training mode needs at least 2 rows".into(),
                    ));
                }
                let nt = T::from_usize(n).unwrap();
                for row in xs.chunks(d) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += *v);
                }
                mean.iter_mut().for_each(|m| *m /= nt);
                for row in xs.chunks(d) {
                    for j in 0..d {
                        let c = row[j] - mean[j];
                        var[j] += c * c;
                    }
                }
                let unbiased = var.iter().map(|v| *v / (nt - T::one())).collect();
                var.iter_mut().for_each(|v| *v /= nt);
                stats = Some(BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                });
            }
            NormMode::Eval { mean: m, var: v } => {
                if m.len() != d || v.len() != d {
                    return Err(Error::shape("batch_norm running statistics width"));
                }
                mean.copy_from_slice(m);
                var.copy_from_slice(v);
            }
        }
        let rstd: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); n * d];
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            for j in 0..d {
                let h = (xs[i * d + j] - mean[j]) * rstd[j];
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let v = self.push(
            sx,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                train,
            },
            "batch_norm",
        )?;
        Ok((v, stats))
    }

    /// Multi-head `softmax(Q Kᵀ / √d_head) V`. `q` is `[s_q, d]`, `k` and `v`
    /// are `[s_k, d]`; head `h` uses columns `[h·d_head, (h+1)·d_head)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk != sv {
            return Err(Error::shape(format!("attention q {sq:?} k {sk:?} v {sv:?}")));
        }
        let (nq, nk, d) = (sq[0], sk[0], sq[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!("{d} columns do not split into {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut out = vec![T::zero(); nq * d];
        for (h, p) in probs.chunks_mut(nq * nk).enumerate() {
            let off = h * dh;
            gemm(
                scale,
                MatRef { data: qv, offset: off, rows: nq, cols: dh, rs: d, cs: 1 },
                MatRef { data: kv, offset: off, rows: nk, cols: dh, rs: d, cs: 1 }.t(),
                T::zero(),
                MatMut::dense(p, nq, nk),
            );
            softmax_rows(p, nk);
            gemm(
                T::one(),
                MatRef::dense(p, nq, nk),
                MatRef { data: vv, offset: off, rows: nk, cols: dh, rs: d, cs: 1 },
                T::zero(),
                MatMut { data: &mut out, offset: off, rows: nq, cols: dh, rs: d, cs: 1 },
            );
        }
        self.push(
            vec![nq, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            "attention",
        )
    }

    /// Mean over the leading axis: `[n, d] -> [d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = rows_cols(self.shape(x));
        if n == 0 {
            return Err(Error::shape("mean over zero rows"));
        }
        let mut out = vec![T::zero(); d];
        for row in self.value(x).chunks(d) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += *v);
        }
        let inv = T::one() / T::from_usize(n).unwrap();
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(vec![d], out, Op::MeanRows(x), "mean_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push(Vec::new(), vec![s], Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::shape("mean of an empty tensor"));
        }
        let s = self.value(x).iter().copied().sum::<T>() / T::from_usize(n).unwrap();
        self.push(Vec::new(), vec![s], Op::Mean(x), "mean")
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let s = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).sum();
        self.push(Vec::new(), vec![s], Op::Dot(a, b), "dot")
    }

    /// `aᵀb / max(‖a‖·‖b‖, eps)`.
    pub fn cosine(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::shape(format!(
                "cosine of lengths {} and {}",
                self.value(a).len(),
                self.value(b).len()
            )));
        }
        if eps <= T::zero() {
            return Err(Error::InvalidArgument("cosine eps must be positive".into()));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let dot: T = av.iter().zip(bv).map(|(x, y)| *x * *y).sum();
        let na = av.iter().map(|x| *x * *x).sum::<T>().sqrt();
        let nb = bv.iter().map(|x| *x * *x).sum::<T>().sqrt();
        let prod = na * nb;
        let (denom, clipped) = if prod > eps { (prod, false) } else { (eps, true) };
        self.push(
            Vec::new(),
            vec![dot / denom],
            Op::Cosine {
                a,
                b,
                denom,
                clipped,
            },
            "cosine",
        )
    }

    /// Stacks equally sized vectors into the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(first) = rows.first() else {
            return Err(Error::shape("stack of zero rows"));
        };
        let d = self.value(*first).len();
        let mut out = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if self.value(*r).len() != d {
                return Err(Error::shape("stack of rows with different widths"));
            }
            out.extend_from_slice(self.value(*r));
        }
        self.push(vec![rows.len(), d], out, Op::Stack(rows.to_vec()), "stack")
    }

    /// Picks `x[i, idx[i]]` from a `[n, c]` matrix.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != idx.len() || idx.iter().any(|i| *i >= s[1]) {
            return Err(Error::shape(format!("gather {s:?} with {} indices", idx.len())));
        }
        let c = s[1];
        let xv = self.value(x);
        let out = idx.iter().enumerate().map(|(r, i)| xv[r * c + i]).collect();
        self.push(
            vec![idx.len()],
            out,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            "gather",
        )
    }

    /// Elementwise product with a constant vector.
    pub fn mul_const(&mut self, x: Var, c: &[T]) -> Result<Var> {
        if self.value(x).len() != c.len() {
            return Err(Error::shape("mul_const length"));
        }
        let out = self.value(x).iter().zip(c).map(|(v, c)| *v * *c).collect();
        self.push(self.shape(x).to_vec(), out, Op::MulConst { x, c: c.to_vec() }, "mul_const")
    }

    /// Gradients of a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(&[(loss, vec![T::one()])])
    }

    /// Backpropagates the given output gradients.
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(Error::shape("seed gradient length"));
            }
            accumulate(&mut grads, *v, g);
        }
        let mut out = Gradients::empty(self.store.len());
        // every parameter in the graph receives at least a zero gradient
        for (i, pv) in self.param_vars.iter().enumerate() {
            if pv.is_some() {
                out.params[i] = Some(vec![T::zero(); self.store.value(ParamId(i)).len()]);
            }
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(i, dy, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, dy: Vec<T>, grads: &mut [Option<Vec<T>>], out: &mut Gradients<T>) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => out.leaves.push((Var(i), dy)),
            Op::Param(id) => {
                let slot = out.params[id.0].get_or_insert_with(|| vec![T::zero(); dy.len()]);
                slot.iter_mut().zip(&dy).for_each(|(a, b)| *a += *b);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let dyr = MatRef::dense(&dy, m, n);
                let ga = grad_buf(grads, *a, m * k);
                gemm(
                    T::one(),
                    dyr,
                    MatRef::dense(self.value(*b), k, n).t(),
                    T::one(),
                    MatMut::dense(ga, m, k),
                );
                let gb = grad_buf(grads, *b, k * n);
                gemm(
                    T::one(),
                    MatRef::dense(self.value(*a), m, k).t(),
                    dyr,
                    T::one(),
                    MatMut::dense(gb, k, n),
                );
            }
            Op::Linear { x, w, b } => {
                let (rows, inp) = rows_cols(self.shape(*x));
                let outd = self.shape(*w)[1];
                let dyr = MatRef::dense(&dy, rows, outd);
                let gx = grad_buf(grads, *x, rows * inp);
                gemm(
                    T::one(),
                    dyr,
                    MatRef::dense(self.value(*w), inp, outd).t(),
                    T::one(),
                    MatMut::dense(gx, rows, inp),
                );
                let gw = grad_buf(grads, *w, inp * outd);
                gemm(
                    T::one(),
                    MatRef::dense(self.value(*x), rows, inp).t(),
                    dyr,
                    T::one(),
                    MatMut::dense(gw, inp, outd),
                );
                if let Some(b) = b {
                    let gb = grad_buf(grads, *b, outd);
                    for row in dy.chunks(outd) {
                        gb.iter_mut().zip(row).for_each(|(g, d)| *g += *d);
                    }
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, &dy);
                accumulate(grads, *b, &dy);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, &dy);
                let gb = grad_buf(grads, *b, dy.len());
                gb.iter_mut().zip(&dy).for_each(|(g, d)| *g -= *d);
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b);
                let ga = grad_buf(grads, *a, dy.len());
                ga.iter_mut().zip(dy.iter().zip(bv)).for_each(|(g, (d, y))| *g += *d * *y);
                let av = self.value(*a);
                let gb = grad_buf(grads, *b, dy.len());
                gb.iter_mut().zip(dy.iter().zip(av)).for_each(|(g, (d, x))| *g += *d * *x);
            }
            Op::AddBias(x, b) => {
                accumulate(grads, *x, &dy);
                let d = self.value(*b).len();
                let gb = grad_buf(grads, *b, d);
                for row in dy.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(g, v)| *g += *v);
                }
            }
            Op::Scale(x, c) => {
                // a zero factor contributes an exactly-zero gradient
                if *c != T::zero() {
                    let gx = grad_buf(grads, *x, dy.len());
                    gx.iter_mut().zip(&dy).for_each(|(g, d)| *g += *d * *c);
                }
            }
            Op::Affine(x, a) => {
                if *a != T::zero() {
                    let gx = grad_buf(grads, *x, dy.len());
                    gx.iter_mut().zip(&dy).for_each(|(g, d)| *g += *d * *a);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let gx = grad_buf(grads, *x, dy.len());
                for ((g, d), v) in gx.iter_mut().zip(&dy).zip(xv) {
                    if *v > T::zero() {
                        *g += *d;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = grad_buf(grads, *x, dy.len());
                for ((g, d), v) in gx.iter_mut().zip(&dy).zip(xv) {
                    *g += *d * gelu_parts(*v).1;
                }
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                let gx = grad_buf(grads, *x, dy.len());
                for ((g, d), v) in gx.iter_mut().zip(&dy).zip(xv) {
                    *g += *d / *v;
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let gx = grad_buf(grads, *x, dy.len());
                for ((g, d), v) in gx.iter_mut().zip(&dy).zip(xv) {
                    if *v >= *lo && *v <= *hi {
                        *g += *d;
                    }
                }
            }
            Op::Softmax(x) => {
                let (_, n) = rows_cols(&node.shape);
                let y = &node.value;
                let gx = grad_buf(grads, *x, dy.len());
                for ((gr, dr), yr) in gx.chunks_mut(n).zip(dy.chunks(n)).zip(y.chunks(n)) {
                    let s: T = dr.iter().zip(yr).map(|(d, y)| *d * *y).sum();
                    for j in 0..n {
                        gr[j] += yr[j] * (dr[j] - s);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, d) = rows_cols(&node.shape);
                let g = self.value(*gamma);
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = vec![T::zero(); rows * d];
                let dt = T::from_usize(d).unwrap();
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let dyr = &dy[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        dgamma[j] += dyr[j] * xh[j];
                        dbeta[j] += dyr[j];
                        dxhat[j] = dyr[j] * g[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xh[j];
                    }
                    m1 /= dt;
                    m2 /= dt;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                    }
                }
                accumulate(grads, *x, &dx);
                accumulate(grads, *gamma, &dgamma);
                accumulate(grads, *beta, &dbeta);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                train,
            } => {
                let (n, d) = (node.shape[0], node.shape[1]);
                let g = self.value(*gamma);
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        dgamma[j] += dy[i * d + j] * xhat[i * d + j];
                        dbeta[j] += dy[i * d + j];
                    }
                }
                let mut dx = vec![T::zero(); n * d];
                if *train {
                    let nt = T::from_usize(n).unwrap();
                    for j in 0..d {
                        let m1 = dbeta[j] * g[j] / nt;
                        let m2 = dgamma[j] * g[j] / nt;
                        for i in 0..n {
                            let dxh = dy[i * d + j] * g[j];
                            dx[i * d + j] = rstd[j] * (dxh - m1 - xhat[i * d + j] * m2);
                        }
                    }
                } else {
                    for i in 0..n {
                        for j in 0..d {
                            dx[i * d + j] = dy[i * d + j] * g[j] * rstd[j];
                        }
                    }
                }
                accumulate(grads, *x, &dx);
                accumulate(grads, *gamma, &dgamma);
                accumulate(grads, *beta, &dbeta);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (nq, d) = (self.shape(*q)[0], self.shape(*q)[1]);
                let nk = self.shape(*k)[0];
                let dh = d / heads;
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![T::zero(); nq * d];
                let mut dk = vec![T::zero(); nk * d];
                let mut dv = vec![T::zero(); nk * d];
                let mut ds = vec![T::zero(); nq * nk];
                for h in 0..*heads {
                    let off = h * dh;
                    let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                    let doh = MatRef { data: &dy, offset: off, rows: nq, cols: dh, rs: d, cs: 1 };
                    // dV_h = Pᵀ dO_h
                    gemm(
                        T::one(),
                        MatRef::dense(p, nq, nk).t(),
                        doh,
                        T::zero(),
                        MatMut { data: &mut dv, offset: off, rows: nk, cols: dh, rs: d, cs: 1 },
                    );
                    // dP = dO_h V_hᵀ
                    gemm(
                        T::one(),
                        doh,
                        MatRef { data: vv, offset: off, rows: nk, cols: dh, rs: d, cs: 1 }.t(),
                        T::zero(),
                        MatMut::dense(&mut ds, nq, nk),
                    );
                    for (dr, pr) in ds.chunks_mut(nk).zip(p.chunks(nk)) {
                        let s: T = dr.iter().zip(pr).map(|(a, b)| *a * *b).sum();
                        for j in 0..nk {
                            dr[j] = pr[j] * (dr[j] - s);
                        }
                    }
                    gemm(
                        scale,
                        MatRef::dense(&ds, nq, nk),
                        MatRef { data: kv, offset: off, rows: nk, cols: dh, rs: d, cs: 1 },
                        T::zero(),
                        MatMut { data: &mut dq, offset: off, rows: nq, cols: dh, rs: d, cs: 1 },
                    );
                    gemm(
                        scale,
                        MatRef::dense(&ds, nq, nk).t(),
                        MatRef { data: qv, offset: off, rows: nq, cols: dh, rs: d, cs: 1 },
                        T::zero(),
                        MatMut { data: &mut dk, offset: off, rows: nk, cols: dh, rs: d, cs: 1 },
                    );
                }
                accumulate(grads, *q, &dq);
                accumulate(grads, *k, &dk);
                accumulate(grads, *v, &dv);
            }
            Op::MeanRows(x) => {
                let (n, d) = rows_cols(self.shape(*x));
                let inv = T::one() / T::from_usize(n).unwrap();
                let gx = grad_buf(grads, *x, n * d);
                for row in gx.chunks_mut(d) {
                    row.iter_mut().zip(&dy).for_each(|(g, v)| *g += *v * inv);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                let gx = grad_buf(grads, *x, n);
                gx.iter_mut().for_each(|g| *g += dy[0]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let s = dy[0] / T::from_usize(n).unwrap();
                let gx = grad_buf(grads, *x, n);
                gx.iter_mut().for_each(|g| *g += s);
            }
            Op::Dot(a, b) => {
                let s = dy[0];
                let bv = self.value(*b);
                let ga = grad_buf(grads, *a, bv.len());
                ga.iter_mut().zip(bv).for_each(|(g, y)| *g += s * *y);
                let av = self.value(*a);
                let gb = grad_buf(grads, *b, av.len());
                gb.iter_mut().zip(av).for_each(|(g, x)| *g += s * *x);
            }
            Op::Cosine {
                a,
                b,
                denom,
                clipped,
            } => {
                let s = dy[0];
                let cos = node.value[0];
                let (av, bv) = (self.value(*a), self.value(*b));
                let na2: T = av.iter().map(|x| *x * *x).sum();
                let nb2: T = bv.iter().map(|x| *x * *x).sum();
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                for j in 0..av.len() {
                    da[j] = s * bv[j] / *denom;
                    db[j] = s * av[j] / *denom;
                    if !*clipped {
                        da[j] -= s * cos * av[j] / na2;
                        db[j] -= s * cos * bv[j] / nb2;
                    }
                }
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::Stack(rows) => {
                let d = node.shape[1];
                for (r, v) in rows.iter().enumerate() {
                    accumulate(grads, *v, &dy[r * d..(r + 1) * d]);
                }
            }
            Op::Gather { x, idx } => {
                let (n, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let gx = grad_buf(grads, *x, n * c);
                for (r, i) in idx.iter().enumerate() {
                    gx[r * c + i] += dy[r];
                }
            }
            Op::MulConst { x, c } => {
                let gx = grad_buf(grads, *x, dy.len());
                for ((g, d), c) in gx.iter_mut().zip(&dy).zip(c) {
                    *g += *d * *c;
                }
            }
        }
    }
}

fn grad_buf<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}
