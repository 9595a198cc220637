use std::cell::RefCell;
use std::time::Instant;

use crate::error::{invalid, shape_err, NnError, Result};
use crate::kernels::{self, AttnDims};
use crate::params::{ParamId, ParamStore};
use crate::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the three filter-head projections are merged into complex taps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterCombine {
    /// `w = sigmoid(m) * (r + j i)`
    SigmoidGate,
    /// `w = tanh(|v|) v / |v|` with `v = r + j i`; the magnitude head is unused.
    TanhPolar,
}

enum Op<T> {
    Leaf,
    MatMul { x: Var, w: Var },
    AddSuffix { x: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    SwiGlu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        means: Vec<T>,
        rstds: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: [usize; 4],
        kt: usize,
        kf: usize,
        cols: Vec<T>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: [usize; 3],
        k: usize,
        groups: usize,
        cols: Vec<Vec<T>>,
    },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Repeat { x: Var, axis: usize, times: usize },
    Rope { x: Var, cos: Vec<T>, sin: Vec<T> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        probs: Vec<T>,
    },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    FilterCombine { r: Var, i: Var, m: Var, kind: FilterCombine },
    DeepFilter { w: Var, ctx: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    name: &'static str,
}

/// Wall-clock time per operation kind, in seconds.
#[derive(Debug, Clone, Default)]
pub struct OpProfile {
    /// `(op, forward, backward, count)` in first-seen order.
    pub entries: Vec<(&'static str, f64, f64, usize)>,
}

impl OpProfile {
    fn entry(&mut self, name: &'static str) -> &mut (&'static str, f64, f64, usize) {
        let i = match self.entries.iter().position(|e| e.0 == name) {
            Some(i) => i,
            None => {
                self.entries.push((name, 0.0, 0.0, 0));
                self.entries.len() - 1
            }
        };
        &mut self.entries[i]
    }
}

struct Profiler {
    last: Instant,
    profile: OpProfile,
}

/// A single-use computation graph recorded during a forward pass.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for the backward sweep.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: Vec<Option<Var>>,
    param_links: Vec<(ParamId, Var)>,
    check_finite: bool,
    profiler: Option<RefCell<Profiler>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_links: Vec::new(),
            check_finite: true,
            profiler: None,
        }
    }

    /// Records per-operation timings, see [`Graph::profile`].
    pub fn with_profiling(mut self) -> Self {
        self.profiler = Some(RefCell::new(Profiler {
            last: Instant::now(),
            profile: OpProfile::default(),
        }));
        self
    }

    /// Timings gathered so far when profiling is enabled. Forward time of an op
    /// is the time since the previous node was recorded.
    pub fn profile(&self) -> Option<OpProfile> {
        self.profiler.as_ref().map(|p| p.borrow().profile.clone())
    }

    /// Disables the per-op finiteness check.
    pub fn without_finite_check(mut self) -> Self {
        self.check_finite = false;
        self
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(NnError::NonFinite { op: name });
        }
        if let Some(p) = &self.profiler {
            let mut p = p.borrow_mut();
            let now = Instant::now();
            let dt = (now - p.last).as_secs_f64();
            p.last = now;
            let e = p.profile.entry(name);
            e.1 += dt;
            e.3 += 1;
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Leaf holding `value`; gradients are collected for it when `requires_grad`.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "input")
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.input(value, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node, so
    /// weight sharing accumulates gradients naturally.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if self.params.len() <= id.0 {
            self.params.resize(id.0 + 1, None);
        }
        if let Some(v) = self.params[id.0] {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            requires_grad: p.requires_grad,
            name: "param",
        });
        let v = Var(self.nodes.len() - 1);
        self.params[id.0] = Some(v);
        self.param_links.push((id, v));
        v
    }

    // ----- linear algebra -------------------------------------------------

    /// `x [.., in] @ w [in, out]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return shape_err("matmul", format!("{xs:?} @ {ws:?}"));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).numel() / k;
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, self.data(x), false, self.data(w), false, &mut out, T::zero());
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[x, w]);
        self.push(Tensor::from_vec(&shape, out)?, Op::MatMul { x, w }, rg, "matmul")
    }

    /// Adds `b`, whose shape must equal a suffix of `x`'s shape, broadcasting over
    /// the leading axes.
    pub fn add_suffix(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return shape_err("add_suffix", format!("{xs:?} + {bs:?}"));
        }
        let bd = self.data(b);
        let n = bd.len().max(1);
        let mut out = self.data(x).to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, &c) in chunk.iter_mut().zip(bd) {
                *o += c;
            }
        }
        let shape = xs.to_vec();
        let rg = self.rg(&[x, b]);
        self.push(Tensor::from_vec(&shape, out)?, Op::AddSuffix { x, b }, rg, "add_suffix")
    }

    /// Affine map along the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_suffix(y, b),
            None => Ok(y),
        }
    }

    // ----- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        if self.shape(a) != self.shape(b) {
            return shape_err(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let t = Tensor::from_vec(self.shape(a), out)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let t = Tensor::from_vec(self.shape(a), out)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let t = Tensor::from_vec(self.shape(a), out)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let t = self.value(a).map(|v| v * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg, "scale")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(kernels::sigmoid);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg, "sigmoid")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|v| v.max(T::zero()));
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg, "relu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|v| v.tanh());
        let rg = self.rg(&[a]);
        self.push(t, Op::Tanh(a), rg, "tanh")
    }

    /// Splits the last axis into halves `(a, b)` and returns `a * swish(b)`.
    pub fn swiglu(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if c % 2 != 0 {
            return invalid("swiglu", format!("last dim {c} is odd"));
        }
        let out = kernels::swiglu_fwd(self.data(x), c / 2);
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = c / 2;
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(&shape, out)?, Op::SwiGlu(x), rg, "swiglu")
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return shape_err("layer_norm", format!("affine params must be [{c}]"));
        }
        let (out, means, rstds) =
            kernels::layer_norm_fwd(self.data(x), c, self.data(gain), self.data(bias), T::of(eps));
        let t = Tensor::from_vec(self.shape(x), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                rstds,
            },
            rg,
            "layer_norm",
        )
    }

    // ----- convolutions ---------------------------------------------------

    /// Same-padded 2-D convolution of `x [b?, t, f, cin]` with `w [kt, kf, cin, cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let dims = match xs.len() {
            3 => [1, xs[0], xs[1], xs[2]],
            4 => [xs[0], xs[1], xs[2], xs[3]],
            _ => return shape_err("conv2d", format!("input rank {}", xs.len())),
        };
        if ws.len() != 4 || ws[2] != dims[3] {
            return shape_err("conv2d", format!("input {xs:?}, kernel {ws:?}"));
        }
        let (kt, kf, cout) = (ws[0], ws[1], ws[3]);
        if kt % 2 == 0 || kf % 2 == 0 {
            return invalid("conv2d", format!("kernel {kt}x{kf} must be odd"));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return shape_err("conv2d", "bias shape");
            }
        }
        let cols = kernels::im2col_2d(self.data(x), dims, kt, kf);
        let rows = dims[0] * dims[1] * dims[2];
        let kk = kt * kf * dims[3];
        let mut out = vec![T::zero(); rows * cout];
        kernels::gemm(rows, kk, cout, &cols, false, self.data(w), false, &mut out, T::zero());
        if let Some(b) = b {
            let bd = self.data(b);
            for row in out.chunks_mut(cout) {
                for (o, &bb) in row.iter_mut().zip(bd) {
                    *o += bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        self.push(
            Tensor::from_vec(&shape, out)?,
            Op::Conv2d {
                x,
                w,
                b,
                dims,
                kt,
                kf,
                cols,
            },
            rg,
            "conv2d",
        )
    }

    /// Same-padded grouped 1-D convolution along the sequence axis of
    /// `x [n?, seq, cin]` with `w [k, cin / groups, cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let dims = match xs.len() {
            2 => [1, xs[0], xs[1]],
            3 => [xs[0], xs[1], xs[2]],
            _ => return shape_err("conv1d", format!("input rank {}", xs.len())),
        };
        let cin = dims[2];
        if groups == 0 || cin % groups != 0 {
            return invalid("conv1d", format!("{cin} channels not divisible by {groups} groups"));
        }
        if ws.len() != 3 || ws[1] != cin / groups || ws[2] % groups != 0 {
            return shape_err("conv1d", format!("input {xs:?}, kernel {ws:?}, groups {groups}"));
        }
        let (k, cout) = (ws[0], ws[2]);
        if k % 2 == 0 {
            return invalid("conv1d", format!("kernel {k} must be odd"));
        }
        let (cig, cog) = (cin / groups, cout / groups);
        let rows = dims[0] * dims[1];
        let mut out = vec![T::zero(); rows * cout];
        let mut all_cols = Vec::with_capacity(groups);
        let wd = self.data(w);
        for g in 0..groups {
            let cols = kernels::im2col_1d(self.data(x), dims, k, g * cig, cig);
            let wg = kernels::take_columns(wd, k * cig, cout, g * cog, cog);
            if groups == 1 {
                kernels::gemm(rows, k * cig, cout, &cols, false, &wg, false, &mut out, T::zero());
            } else {
                let mut og = vec![T::zero(); rows * cog];
                kernels::gemm(rows, k * cig, cog, &cols, false, &wg, false, &mut og, T::zero());
                kernels::put_columns(&mut out, rows, cout, g * cog, &og);
            }
            all_cols.push(cols);
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return shape_err("conv1d", "bias shape");
            }
            let bd = self.data(b);
            for row in out.chunks_mut(cout) {
                for (o, &bb) in row.iter_mut().zip(bd) {
                    *o += bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        self.push(
            Tensor::from_vec(&shape, out)?,
            Op::Conv1d {
                x,
                w,
                b,
                dims,
                k,
                groups,
                cols: all_cols,
            },
            rg,
            "conv1d",
        )
    }

    // ----- shape manipulation --------------------------------------------

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
            return invalid("permute", format!("{perm:?} for rank {}", xs.len()));
        }
        let out = kernels::permute(self.data(x), &xs, perm);
        let shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_vec(&shape, out)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
            "permute",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg, "reshape")
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return invalid("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return invalid("concat", format!("axis {axis} for rank {}", base.len()));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &n)| i != axis && n != base[i])
            {
                return shape_err("concat", format!("{base:?} vs {s:?}"));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * n..(o + 1) * n]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(xs);
        self.push(
            Tensor::from_vec(&shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
            "concat",
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return invalid("slice", format!("{start}..{} of axis {axis} in {xs:?}", start + len));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * xs[axis] + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(&shape, out)?, Op::Slice { x, axis, start }, rg, "slice")
    }

    /// Tiles a size-1 axis `times` times.
    pub fn repeat(&mut self, x: Var, axis: usize, times: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || xs[axis] != 1 {
            return invalid("repeat", format!("axis {axis} of {xs:?} must have size 1"));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * times * inner);
        for o in 0..outer {
            for _ in 0..times {
                out.extend_from_slice(&d[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = xs;
        shape[axis] = times;
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(&shape, out)?, Op::Repeat { x, axis, times }, rg, "repeat")
    }

    // ----- attention ------------------------------------------------------

    /// Rotary position embedding on `x [n, seq, heads, d]` (positions `0..seq`).
    pub fn rope(&mut self, x: Var, base: f64) -> Result<Var> {
        self.rope_offset(x, base, 0.0)
    }

    pub fn rope_offset(&mut self, x: Var, base: f64, offset: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[3] % 2 != 0 {
            return shape_err("rope", format!("expected [n, seq, heads, even d], got {xs:?}"));
        }
        let dims = [xs[0], xs[1], xs[2], xs[3]];
        let (cos, sin) = kernels::rope_table(dims[1], dims[3], base, offset);
        let mut out = vec![T::zero(); self.value(x).numel()];
        kernels::rope_apply(self.data(x), dims, &cos, &sin, false, &mut out);
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(&xs, out)?, Op::Rope { x, cos, sin }, rg, "rope")
    }

    /// Scaled dot-product attention over `[n, seq, heads, d]` tensors.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        if qs.len() != 4 || ks.len() != 4 || ks != vs || qs[0] != ks[0] || qs[2..] != ks[2..] {
            return shape_err("attention", format!("q {qs:?}, k {ks:?}, v {vs:?}"));
        }
        let dims = AttnDims {
            n: qs[0],
            sq: qs[1],
            sk: ks[1],
            heads: qs[2],
            d: qs[3],
            causal,
        };
        let shape = qs.to_vec();
        let (out, probs) = kernels::attention_fwd(self.data(q), self.data(k), self.data(v), dims);
        let rg = self.rg(&[q, k, v]);
        self.push(
            Tensor::from_vec(&shape, out)?,
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
            },
            rg,
            "attention",
        )
    }

    /// Attention probabilities of an attention node, `[n, heads, sq, sk]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut t = self.value(x).clone();
        let w = t.last_dim();
        kernels::softmax_rows(t.data_mut(), w);
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg, "softmax")
    }

    // ----- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::of(self.value(x).numel().max(1) as f64);
        let s = self.data(x).iter().copied().sum::<T>() / n;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg, "mean")
    }

    // ----- complex filtering ----------------------------------------------

    /// Merges real, imaginary and magnitude heads `[.., p]` into complex taps
    /// `[.., p, 2]` (last axis = real, imaginary).
    pub fn filter_combine(&mut self, r: Var, i: Var, m: Var, kind: FilterCombine) -> Result<Var> {
        let s = self.shape(r).to_vec();
        if self.shape(i) != s || self.shape(m) != s {
            return shape_err("filter_combine", "head shapes differ");
        }
        let (rd, id, md) = (self.data(r), self.data(i), self.data(m));
        let mut out = Vec::with_capacity(rd.len() * 2);
        for n in 0..rd.len() {
            let (re, im) = match kind {
                FilterCombine::SigmoidGate => {
                    let g = kernels::sigmoid(md[n]);
                    (g * rd[n], g * id[n])
                }
                FilterCombine::TanhPolar => {
                    let g = tanh_ratio(rd[n].hypot(id[n]));
                    (g * rd[n], g * id[n])
                }
            };
            out.push(re);
            out.push(im);
        }
        let mut shape = s;
        shape.push(2);
        let rg = self.rg(&[r, i, m]);
        self.push(
            Tensor::from_vec(&shape, out)?,
            Op::FilterCombine { r, i, m, kind },
            rg,
            "filter_combine",
        )
    }

    /// Applies per-bin complex taps `w [k, t, f, p, 2]` to a context stack
    /// `ctx [t, f, p, 2]`: `y[k, t, f] = sum_p w[k, t, f, p] * ctx[t, f, p]`.
    pub fn deep_filter(&mut self, w: Var, ctx: Var) -> Result<Var> {
        let (ws, cs) = (self.shape(w).to_vec(), self.shape(ctx).to_vec());
        if ws.len() != 5 || cs.len() != 4 || ws[1..] != cs[..] || cs[3] != 2 {
            return shape_err("deep_filter", format!("w {ws:?}, ctx {cs:?}"));
        }
        let (nk, bins, p) = (ws[0], cs[0] * cs[1], cs[2]);
        let (wd, cd) = (self.data(w), self.data(ctx));
        let mut out = vec![T::zero(); nk * bins * 2];
        for k in 0..nk {
            for b in 0..bins {
                let wo = (k * bins + b) * p * 2;
                let co = b * p * 2;
                let (mut re, mut im) = (T::zero(), T::zero());
                for j in 0..p {
                    let (wr, wi) = (wd[wo + 2 * j], wd[wo + 2 * j + 1]);
                    let (xr, xi) = (cd[co + 2 * j], cd[co + 2 * j + 1]);
                    re += wr * xr - wi * xi;
                    im += wr * xi + wi * xr;
                }
                out[(k * bins + b) * 2] = re;
                out[(k * bins + b) * 2 + 1] = im;
            }
        }
        let shape = [nk, cs[0], cs[1], 2];
        let rg = self.rg(&[w, ctx]);
        self.push(Tensor::from_vec(&shape, out)?, Op::DeepFilter { w, ctx }, rg, "deep_filter")
    }

    // ----- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return invalid("backward", format!("loss must be scalar, got {:?}", self.shape(loss)));
        }
        self.backward_with(&[(loss, vec![T::one()])])
    }

    /// Reverse sweep seeded with explicit output gradients, e.g. from a loss
    /// evaluated outside the graph.
    pub fn backward_with(&self, seeds: &[(Var, Vec<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            if g.len() != self.value(*v).numel() {
                return shape_err("backward", "seed gradient size");
            }
            let slot = acc(&mut grads, *v, g.len());
            for (a, &b) in slot.iter_mut().zip(g) {
                *a += b;
            }
            last = last.max(v.0 + 1);
        }
        for idx in (0..last).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let start = self.profiler.as_ref().map(|_| Instant::now());
            self.backprop_node(node, &g, &mut grads);
            if let (Some(p), Some(start)) = (&self.profiler, start) {
                p.borrow_mut().profile.entry(node.name).2 += start.elapsed().as_secs_f64();
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { x, w } => {
                let ws = self.shape(*w);
                let (k, n) = (ws[0], ws[1]);
                let m = g.len() / n;
                if self.requires_grad(*x) {
                    let gx = acc(grads, *x, m * k);
                    kernels::gemm(m, n, k, g, false, self.data(*w), true, gx, T::one());
                }
                if self.requires_grad(*w) {
                    let gw = acc(grads, *w, k * n);
                    kernels::gemm(k, m, n, self.data(*x), true, g, false, gw, T::one());
                }
            }
            Op::AddSuffix { x, b } => {
                if self.requires_grad(*x) {
                    add_into(acc(grads, *x, g.len()), g);
                }
                if self.requires_grad(*b) {
                    let nb = self.value(*b).numel();
                    let gb = acc(grads, *b, nb);
                    for chunk in g.chunks(nb.max(1)) {
                        add_into(gb, chunk);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        add_into(acc(grads, v, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if self.requires_grad(*b) {
                    for (d, &s) in acc(grads, *b, g.len()).iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.requires_grad(*a) {
                    let ga: Vec<T> = g.iter().zip(bd).map(|(&x, &y)| x * y).collect();
                    add_into(acc(grads, *a, g.len()), &ga);
                }
                if self.requires_grad(*b) {
                    let gb: Vec<T> = g.iter().zip(ad).map(|(&x, &y)| x * y).collect();
                    add_into(acc(grads, *b, g.len()), &gb);
                }
            }
            Op::Scale(a, c) => {
                for (d, &s) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += s * *c;
                }
            }
            Op::Sigmoid(a) => {
                for ((d, &s), &y) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(out) {
                    *d += s * y * (T::one() - y);
                }
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                for ((d, &s), &xv) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(x) {
                    if xv > T::zero() {
                        *d += s;
                    }
                }
            }
            Op::Tanh(a) => {
                for ((d, &s), &y) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(out) {
                    *d += s * (T::one() - y * y);
                }
            }
            Op::SwiGlu(x) => {
                let xd = self.data(*x);
                let h = self.value(*x).last_dim() / 2;
                let gx = acc(grads, *x, xd.len());
                kernels::swiglu_bwd(xd, h, g, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                rstds,
            } => {
                let xd = self.data(*x);
                let c = self.value(*x).last_dim();
                let mut gx = vec![T::zero(); xd.len()];
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                kernels::layer_norm_bwd(xd, c, self.data(*gain), means, rstds, g, &mut gx, &mut gg, &mut gb);
                if self.requires_grad(*x) {
                    add_into(acc(grads, *x, xd.len()), &gx);
                }
                if self.requires_grad(*gain) {
                    add_into(acc(grads, *gain, c), &gg);
                }
                if self.requires_grad(*bias) {
                    add_into(acc(grads, *bias, c), &gb);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                dims,
                kt,
                kf,
                cols,
            } => {
                let cout = self.value(*w).last_dim();
                let rows = dims[0] * dims[1] * dims[2];
                let kk = kt * kf * dims[3];
                if self.requires_grad(*w) {
                    let gw = acc(grads, *w, kk * cout);
                    kernels::gemm(kk, rows, cout, cols, true, g, false, gw, T::one());
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        bias_grad(acc(grads, *b, cout), g);
                    }
                }
                if self.requires_grad(*x) {
                    let mut gcols = vec![T::zero(); rows * kk];
                    kernels::gemm(rows, cout, kk, g, false, self.data(*w), true, &mut gcols, T::zero());
                    let gx = acc(grads, *x, self.value(*x).numel());
                    kernels::col2im_2d(&gcols, *dims, *kt, *kf, gx);
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                dims,
                k,
                groups,
                cols,
            } => {
                let cout = self.value(*w).last_dim();
                let cig = dims[2] / groups;
                let cog = cout / groups;
                let rows = dims[0] * dims[1];
                let wd = self.data(*w);
                for (gi, cols_g) in cols.iter().enumerate() {
                    let g_out = if *groups == 1 {
                        g.to_vec()
                    } else {
                        kernels::take_columns(g, rows, cout, gi * cog, cog)
                    };
                    if self.requires_grad(*w) {
                        let mut gw = vec![T::zero(); k * cig * cog];
                        kernels::gemm(k * cig, rows, cog, cols_g, true, &g_out, false, &mut gw, T::zero());
                        let slot = acc(grads, *w, k * cig * cout);
                        kernels::add_columns(slot, k * cig, cout, gi * cog, &gw);
                    }
                    if self.requires_grad(*x) {
                        let wg = kernels::take_columns(wd, k * cig, cout, gi * cog, cog);
                        let mut gcols = vec![T::zero(); rows * k * cig];
                        kernels::gemm(rows, cog, k * cig, &g_out, false, &wg, true, &mut gcols, T::zero());
                        let gx = acc(grads, *x, self.value(*x).numel());
                        kernels::col2im_1d(&gcols, *dims, *k, gi * cig, cig, gx);
                    }
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        bias_grad(acc(grads, *b, cout), g);
                    }
                }
            }
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_permutation(perm);
                let back = kernels::permute(g, node.value.shape(), &inv);
                add_into(acc(grads, *x, g.len()), &back);
            }
            Op::Reshape(x) => add_into(acc(grads, *x, g.len()), g),
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut off = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis] * inner;
                    if self.requires_grad(v) {
                        let gv = acc(grads, v, outer * n);
                        for o in 0..outer {
                            add_into(&mut gv[o * n..(o + 1) * n], &g[o * total + off..o * total + off + n]);
                        }
                    }
                    off += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let len = node.value.shape()[*axis] * inner;
                let full = xs[*axis] * inner;
                let gx = acc(grads, *x, outer * full);
                for o in 0..outer {
                    let base = o * full + start * inner;
                    add_into(&mut gx[base..base + len], &g[o * len..(o + 1) * len]);
                }
            }
            Op::Repeat { x, axis, times } => {
                let xs = self.shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let gx = acc(grads, *x, outer * inner);
                for o in 0..outer {
                    for r in 0..*times {
                        let src = (o * times + r) * inner;
                        add_into(&mut gx[o * inner..(o + 1) * inner], &g[src..src + inner]);
                    }
                }
            }
            Op::Rope { x, cos, sin } => {
                let s = node.value.shape();
                let dims = [s[0], s[1], s[2], s[3]];
                let gx = acc(grads, *x, g.len());
                kernels::rope_apply(g, dims, cos, sin, true, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
            } => {
                let mut gq = vec![T::zero(); self.value(*q).numel()];
                let mut gk = vec![T::zero(); self.value(*k).numel()];
                let mut gv = vec![T::zero(); self.value(*v).numel()];
                kernels::attention_bwd(
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    probs,
                    g,
                    *dims,
                    &mut gq,
                    &mut gk,
                    &mut gv,
                );
                for (var, gr) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if self.requires_grad(var) {
                        add_into(acc(grads, var, gr.len()), &gr);
                    }
                }
            }
            Op::Softmax(x) => {
                let w = node.value.last_dim();
                let gx = acc(grads, *x, g.len());
                for ((gr, yr), dst) in g.chunks(w).zip(out.chunks(w)).zip(gx.chunks_mut(w)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &gg), &y) in dst.iter_mut().zip(gr).zip(yr) {
                        *d += y * (gg - dot);
                    }
                }
            }
            Op::Sum(x) => {
                for d in acc(grads, *x, self.value(*x).numel()).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let s = g[0] / T::of(n.max(1) as f64);
                for d in acc(grads, *x, n).iter_mut() {
                    *d += s;
                }
            }
            Op::FilterCombine { r, i, m, kind } => {
                let (rd, id, md) = (self.data(*r), self.data(*i), self.data(*m));
                let n = rd.len();
                let mut gr = vec![T::zero(); n];
                let mut gi = vec![T::zero(); n];
                let mut gm = vec![T::zero(); n];
                for j in 0..n {
                    let (g_re, g_im) = (g[2 * j], g[2 * j + 1]);
                    match kind {
                        FilterCombine::SigmoidGate => {
                            let s = kernels::sigmoid(md[j]);
                            gr[j] = g_re * s;
                            gi[j] = g_im * s;
                            gm[j] = (g_re * rd[j] + g_im * id[j]) * s * (T::one() - s);
                        }
                        FilterCombine::TanhPolar => {
                            let rho = rd[j].hypot(id[j]);
                            let q = tanh_ratio(rho);
                            // d q / d rho divided by rho keeps the expression regular at 0.
                            let dq = tanh_ratio_deriv_over_rho(rho);
                            let proj = g_re * rd[j] + g_im * id[j];
                            gr[j] = g_re * q + dq * rd[j] * proj;
                            gi[j] = g_im * q + dq * id[j] * proj;
                        }
                    }
                }
                for (var, gv) in [(*r, gr), (*i, gi), (*m, gm)] {
                    if self.requires_grad(var) {
                        add_into(acc(grads, var, n), &gv);
                    }
                }
            }
            Op::DeepFilter { w, ctx } => {
                let cs = self.shape(*ctx);
                let (bins, p) = (cs[0] * cs[1], cs[2]);
                let nk = self.shape(*w)[0];
                let (wd, cd) = (self.data(*w), self.data(*ctx));
                if self.requires_grad(*w) {
                    let gw = acc(grads, *w, wd.len());
                    for k in 0..nk {
                        for b in 0..bins {
                            let (g_re, g_im) = (g[(k * bins + b) * 2], g[(k * bins + b) * 2 + 1]);
                            let wo = (k * bins + b) * p * 2;
                            let co = b * p * 2;
                            for j in 0..p {
                                let (xr, xi) = (cd[co + 2 * j], cd[co + 2 * j + 1]);
                                gw[wo + 2 * j] += g_re * xr + g_im * xi;
                                gw[wo + 2 * j + 1] += g_im * xr - g_re * xi;
                            }
                        }
                    }
                }
                if self.requires_grad(*ctx) {
                    let gc = acc(grads, *ctx, cd.len());
                    for k in 0..nk {
                        for b in 0..bins {
                            let (g_re, g_im) = (g[(k * bins + b) * 2], g[(k * bins + b) * 2 + 1]);
                            let wo = (k * bins + b) * p * 2;
                            let co = b * p * 2;
                            for j in 0..p {
                                let (wr, wi) = (wd[wo + 2 * j], wd[wo + 2 * j + 1]);
                                gc[co + 2 * j] += g_re * wr + g_im * wi;
                                gc[co + 2 * j + 1] += g_im * wr - g_re * wi;
                            }
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn param_links(&self) -> &[(ParamId, Var)] {
        &self.param_links
    }
}

/// `tanh(rho) / rho`, continuous at zero.
fn tanh_ratio<T: Real>(rho: T) -> T {
    if rho < T::of(0.05) {
        let r2 = rho * rho;
        T::one() - r2 / T::of(3.0) + r2 * r2 * T::of(2.0 / 15.0) - r2 * r2 * r2 * T::of(17.0 / 315.0)
    } else {
        rho.tanh() / rho
    }
}

/// `(d/d rho)(tanh(rho) / rho) / rho`.
fn tanh_ratio_deriv_over_rho<T: Real>(rho: T) -> T {
    if rho < T::of(0.05) {
        let r2 = rho * rho;
        T::of(-2.0 / 3.0) + r2 * T::of(8.0 / 15.0) - r2 * r2 * T::of(102.0 / 315.0)
    } else {
        let t = rho.tanh();
        ((T::one() - t * t) * rho - t) / (rho * rho * rho)
    }
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn bias_grad<T: Real>(gb: &mut [T], g: &[T]) {
    let c = gb.len();
    for row in g.chunks(c) {
        add_into(gb, row);
    }
}

/// Gradients produced by one backward sweep. Only leaf gradients are retained.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into `store`.
    pub fn accumulate(&self, graph: &Graph<T>, store: &mut ParamStore<T>) {
        for (id, g) in self.params(graph) {
            store.add_grad(id, g);
        }
    }

    /// Gradients of the stored parameters used by `graph`.
    pub fn params<'a>(&'a self, graph: &'a Graph<T>) -> impl Iterator<Item = (ParamId, &'a [T])> + 'a {
        graph
            .param_links()
            .iter()
            .filter_map(move |&(id, v)| self.get(v).map(|g| (id, g)))
    }
}
