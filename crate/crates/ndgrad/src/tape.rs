use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{shape_err, TensorError};
use crate::kernels::{self, to_real, ConvGeom};
use crate::params::{Grads, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Mask = Arc<Vec<bool>>;

enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    MulConst(Var, Arc<Tensor<T>>),
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Atan(Var),
    Exp(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    ExpandChannels(Var),
    Sum(Var),
    MeanAxis { x: Var, axis: usize },
    Softmax(Var, Option<Mask>),
    LogSoftmax(Var, Option<Mask>),
    CrossEntropy { x: Var, target: usize, probs: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ChannelAffine { x: Var, gamma: Var, beta: Var },
    Pick(Var, usize),
}

struct Node<T: Real> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records forward operations so that gradients can be replayed in reverse.
/// A tape is confined to one thread; build a new one per forward pass.
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, Var>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), params: RefCell::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.item()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn push_arc(&self, value: Arc<Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let op = if needs_grad { op } else { Op::Leaf };
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn push(
        &self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        needs_grad: bool,
    ) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push_arc(Arc::new(value), op, needs_grad))
    }

    /// Records a constant (no gradient).
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_arc(Arc::new(value), Op::Leaf, false)
    }

    pub fn constant_arc(&self, value: Arc<Tensor<T>>) -> Var {
        self.push_arc(value, Op::Leaf, false)
    }

    /// Records a parameter leaf. Repeated calls for the same id return the
    /// same node so gradients accumulate in one place.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.params.borrow().get(&id) {
            return *v;
        }
        let v = self.push_arc(store.get_arc(id), Op::Param(id), true);
        self.params.borrow_mut().insert(id, v);
        v
    }

    /// Parameter read without gradient tracking (frozen networks).
    pub fn frozen(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push_arc(store.get_arc(id), Op::Leaf, false)
    }

    fn binary_same(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(name, Tensor::from_parts(va.shape().to_vec(), data), op, ng)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let f = T::from_f64(factor);
        let va = self.value(a);
        let data = va.data().iter().map(|x| *x * f).collect();
        self.push("scale", Tensor::from_parts(va.shape().to_vec(), data), Op::Scale(a, f), self.needs(a))
    }

    pub fn add_const(&self, a: Var, c: &Tensor<T>) -> Result<Var, TensorError> {
        let va = self.value(a);
        if va.shape() != c.shape() {
            return Err(shape_err("add_const", format!("{:?} vs {:?}", va.shape(), c.shape())));
        }
        let data = va.data().iter().zip(c.data()).map(|(x, y)| *x + *y).collect();
        self.push("add_const", Tensor::from_parts(va.shape().to_vec(), data), Op::AddConst(a), self.needs(a))
    }

    pub fn mul_const(&self, a: Var, c: Arc<Tensor<T>>) -> Result<Var, TensorError> {
        let va = self.value(a);
        if va.shape() != c.shape() {
            return Err(shape_err("mul_const", format!("{:?} vs {:?}", va.shape(), c.shape())));
        }
        let data = va.data().iter().zip(c.data()).map(|(x, y)| *x * *y).collect();
        let ng = self.needs(a);
        self.push("mul_const", Tensor::from_parts(va.shape().to_vec(), data), Op::MulConst(a, c), ng)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = to_real(kernels::matmul(va.data(), vb.data(), m, k, n));
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    pub fn transpose(&self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("{s:?} is not 2-D")));
        }
        let (m, n) = (s[0], s[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = va.data()[i * n + j];
            }
        }
        self.push("transpose", Tensor::from_parts(vec![n, m], out), Op::Transpose(a), self.needs(a))
    }

    /// Adds a `[n]` row vector to every row of `[m,n]`.
    pub fn add_row(&self, x: Var, row: Var) -> Result<Var, TensorError> {
        let (vx, vr) = (self.value(x), self.value(row));
        let n = last_dim(vx.shape());
        if vx.shape().len() != 2 || vr.len() != n {
            return Err(shape_err("add_row", format!("{:?} + {:?}", vx.shape(), vr.shape())));
        }
        let data = vx.data().iter().enumerate().map(|(i, v)| *v + vr.data()[i % n]).collect();
        let ng = self.needs(x) || self.needs(row);
        self.push("add_row", Tensor::from_parts(vx.shape().to_vec(), data), Op::AddRow(x, row), ng)
    }

    fn unary(&self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var, TensorError> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| f(*x)).collect();
        self.push(name, Tensor::from_parts(va.shape().to_vec(), data), op, self.needs(a))
    }

    pub fn relu(&self, a: Var) -> Result<Var, TensorError> {
        self.unary("relu", a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var, TensorError> {
        self.unary("sigmoid", a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&self, a: Var) -> Result<Var, TensorError> {
        self.unary("tanh", a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn atan(&self, a: Var) -> Result<Var, TensorError> {
        self.unary("atan", a, |x| x.atan(), Op::Atan(a))
    }

    pub fn exp(&self, a: Var) -> Result<Var, TensorError> {
        self.unary("exp", a, |x| x.exp(), Op::Exp(a))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let va = self.value(a);
        let t = va.reshape(shape)?;
        self.push("reshape", t, Op::Reshape(a), self.needs(a))
    }

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        if inputs.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        let values: Vec<Arc<Tensor<T>>> = inputs.iter().map(|v| self.value(*v)).collect();
        let first = values[0].shape().to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, d)| i != axis && *d != first[i])
            {
                return Err(shape_err("concat", format!("{:?} vs {:?}", first, s)));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = inputs.iter().any(|v| self.needs(*v));
        self.push("concat", Tensor::from_parts(shape, data), Op::Concat(inputs.to_vec(), axis), ng)
    }

    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let s = vx.shape();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(shape_err("narrow", format!("{s:?} axis {axis} [{start}, {})", start + len)));
        }
        let (outer, inner) = outer_inner(s, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&vx.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        self.push("narrow", Tensor::from_parts(shape, data), Op::Narrow { x, axis, start }, self.needs(x))
    }

    /// Broadcasts a `[C]` vector to `[C,H,W]`.
    pub fn expand_channels(&self, v: Var, h: usize, w: usize) -> Result<Var, TensorError> {
        let vv = self.value(v);
        if vv.shape().len() != 1 {
            return Err(shape_err("expand_channels", format!("{:?} is not 1-D", vv.shape())));
        }
        let c = vv.len();
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            data.extend(std::iter::repeat(vv.data()[ch]).take(h * w));
        }
        self.push("expand_channels", Tensor::from_parts(vec![c, h, w], data), Op::ExpandChannels(v), self.needs(v))
    }

    pub fn sum(&self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).sum_f64();
        self.push("sum", Tensor::scalar(T::from_f64(s)), Op::Sum(a), self.needs(a))
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let s = vx.shape();
        if axis >= s.len() || s[axis] == 0 {
            return Err(shape_err("mean_axis", format!("{s:?} axis {axis}")));
        }
        let (outer, inner) = outer_inner(s, axis);
        let n = s[axis];
        let mut out = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += vx.data()[(o * n + k) * inner + i].as_f64();
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut shape = s.to_vec();
        shape.remove(axis);
        self.push("mean_axis", Tensor::from_parts(shape, to_real(out)), Op::MeanAxis { x, axis }, self.needs(x))
    }

    fn check_mask(&self, name: &'static str, x: &Tensor<T>, mask: Option<&[bool]>) -> Result<(), TensorError> {
        if let Some(m) = mask {
            if m.len() != x.len() {
                return Err(shape_err(name, format!("mask length {} for {:?}", m.len(), x.shape())));
            }
        }
        Ok(())
    }

    /// Softmax over the last axis. Masked entries get probability exactly 0.
    pub fn softmax(&self, x: Var, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let vx = self.value(x);
        self.check_mask("softmax", &vx, mask)?;
        let n = last_dim(vx.shape());
        let mut out = Vec::with_capacity(vx.len());
        for (r, row) in vx.data().chunks(n.max(1)).enumerate() {
            let m = mask.map(|m| &m[r * n..(r + 1) * n]);
            let p = kernels::softmax_row(row, m).ok_or(TensorError::NoValidAction { op: "softmax" })?;
            out.extend(p.into_iter().map(T::from_f64));
        }
        let mask = mask.map(|m| Arc::new(m.to_vec()));
        self.push("softmax", Tensor::from_parts(vx.shape().to_vec(), out), Op::Softmax(x, mask), self.needs(x))
    }

    /// Temperature softmax: `softmax(x / temperature)` under a mask.
    pub fn softmax_with_temperature(
        &self,
        x: Var,
        temperature: f64,
        mask: Option<&[bool]>,
    ) -> Result<Var, TensorError> {
        if !(temperature > 0.0) {
            return Err(TensorError::Invalid {
                op: "softmax_with_temperature",
                detail: format!("temperature {temperature} must be positive"),
            });
        }
        let scaled = self.scale(x, 1.0 / temperature)?;
        self.softmax(scaled, mask)
    }

    /// Log-softmax over the last axis; masked entries are reported as 0.
    pub fn log_softmax(&self, x: Var, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let vx = self.value(x);
        self.check_mask("log_softmax", &vx, mask)?;
        let n = last_dim(vx.shape());
        let mut out = Vec::with_capacity(vx.len());
        for (r, row) in vx.data().chunks(n.max(1)).enumerate() {
            let m = mask.map(|m| &m[r * n..(r + 1) * n]);
            let p = kernels::log_softmax_row(row, m).ok_or(TensorError::NoValidAction { op: "log_softmax" })?;
            out.extend(p.into_iter().map(T::from_f64));
        }
        let mask = mask.map(|m| Arc::new(m.to_vec()));
        self.push("log_softmax", Tensor::from_parts(vx.shape().to_vec(), out), Op::LogSoftmax(x, mask), self.needs(x))
    }

    /// `-log softmax(x)[target]` over all elements of `x`, optionally masked.
    pub fn cross_entropy(&self, x: Var, target: usize, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let vx = self.value(x);
        self.check_mask("cross_entropy", &vx, mask)?;
        if target >= vx.len() {
            return Err(TensorError::IndexOutOfRange { op: "cross_entropy", index: target, len: vx.len() });
        }
        if mask.map_or(false, |m| !m[target]) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                detail: format!("target {target} is masked out"),
            });
        }
        let logp = kernels::log_softmax_row(vx.data(), mask)
            .ok_or(TensorError::NoValidAction { op: "cross_entropy" })?;
        let loss = -logp[target];
        let probs = logp
            .iter()
            .enumerate()
            .map(|(i, l)| if mask.map_or(true, |m| m[i]) { l.exp() } else { 0.0 })
            .collect();
        self.push(
            "cross_entropy",
            Tensor::scalar(T::from_f64(loss)),
            Op::CrossEntropy { x, target, probs },
            self.needs(x),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = last_dim(vx.shape());
        if vg.len() != n || vb.len() != n {
            return Err(shape_err("layer_norm", format!("{:?} with gamma {:?}", vx.shape(), vg.shape())));
        }
        let rows = vx.len() / n;
        let mut xhat = vec![0.0f64; vx.len()];
        let mut rstd = vec![0.0f64; rows];
        let mut out = Vec::with_capacity(vx.len());
        for r in 0..rows {
            let row = &vx.data()[r * n..(r + 1) * n];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..n {
                let h = (row[i].as_f64() - mean) * rs;
                xhat[r * n + i] = h;
                out.push(T::from_f64(h * vg.data()[i].as_f64() + vb.data()[i].as_f64()));
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            "layer_norm",
            Tensor::from_parts(vx.shape().to_vec(), out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            ng,
        )
    }

    fn conv_geom(
        name: &'static str,
        xs: &[usize],
        ws: &[usize],
        stride: usize,
        pad: usize,
        transpose: bool,
    ) -> Result<ConvGeom, TensorError> {
        if xs.len() != 3 || ws.len() != 4 || stride == 0 {
            return Err(shape_err(name, format!("input {xs:?}, kernel {ws:?}, stride {stride}")));
        }
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let (kh, kw) = (ws[2], ws[3]);
        if transpose {
            if ws[0] != c_in {
                return Err(shape_err(name, format!("input channels {c_in} vs kernel {ws:?}")));
            }
            let oh = ((h - 1) * stride + kh) as isize - 2 * pad as isize;
            let ow = ((w - 1) * stride + kw) as isize - 2 * pad as isize;
            if oh <= 0 || ow <= 0 {
                return Err(shape_err(name, format!("padding {pad} too large for {xs:?}")));
            }
            Ok(ConvGeom { c_in, h, w, c_out: ws[1], kh, kw, stride, pad, oh: oh as usize, ow: ow as usize })
        } else {
            if ws[1] != c_in {
                return Err(shape_err(name, format!("input channels {c_in} vs kernel {ws:?}")));
            }
            if kh > h + 2 * pad || kw > w + 2 * pad {
                return Err(shape_err(name, format!("kernel {kh}x{kw} larger than padded input {xs:?}")));
            }
            let oh = (h + 2 * pad - kh) / stride + 1;
            let ow = (w + 2 * pad - kw) / stride + 1;
            Ok(ConvGeom { c_in, h, w, c_out: ws[0], kh, kw, stride, pad, oh, ow })
        }
    }

    fn check_bias(&self, name: &'static str, b: Option<Var>, c_out: usize) -> Result<Option<Arc<Tensor<T>>>, TensorError> {
        match b {
            None => Ok(None),
            Some(b) => {
                let vb = self.value(b);
                if vb.len() != c_out {
                    return Err(shape_err(name, format!("bias {:?} for {c_out} channels", vb.shape())));
                }
                Ok(Some(vb))
            }
        }
    }

    /// 2-D cross-correlation of `[C,H,W]` with kernel `[C',C,kh,kw]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (vx, vw) = (self.value(x), self.value(w));
        let geom = Self::conv_geom("conv2d", vx.shape(), vw.shape(), stride, pad, false)?;
        let vb = self.check_bias("conv2d", b, geom.c_out)?;
        let out = kernels::conv2d(vx.data(), vw.data(), vb.as_ref().map(|t| t.data()), &geom);
        let ng = self.needs(x) || self.needs(w) || b.map_or(false, |b| self.needs(b));
        self.push(
            "conv2d",
            Tensor::from_parts(vec![geom.c_out, geom.oh, geom.ow], to_real(out)),
            Op::Conv2d { x, w, b, geom },
            ng,
        )
    }

    /// Transposed convolution of `[C,H,W]` with kernel `[C,C',kh,kw]`; the
    /// adjoint of [`Tape::conv2d`] using the same kernel tensor.
    pub fn conv2d_transpose(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let (vx, vw) = (self.value(x), self.value(w));
        let geom = Self::conv_geom("conv2d_transpose", vx.shape(), vw.shape(), stride, pad, true)?;
        let vb = self.check_bias("conv2d_transpose", b, geom.c_out)?;
        let out = kernels::conv2d_transpose(vx.data(), vw.data(), vb.as_ref().map(|t| t.data()), &geom);
        let ng = self.needs(x) || self.needs(w) || b.map_or(false, |b| self.needs(b));
        self.push(
            "conv2d_transpose",
            Tensor::from_parts(vec![geom.c_out, geom.oh, geom.ow], to_real(out)),
            Op::ConvTranspose2d { x, w, b, geom },
            ng,
        )
    }

    /// Per-channel `gamma[c] * x[c] + beta[c]` on `[C,H,W]` (FiLM).
    pub fn channel_affine(&self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let s = vx.shape();
        if s.len() != 3 || vg.len() != s[0] || vb.len() != s[0] {
            return Err(shape_err("channel_affine", format!("{s:?} with {:?}/{:?}", vg.shape(), vb.shape())));
        }
        let plane = s[1] * s[2];
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| vg.data()[i / plane] * *v + vb.data()[i / plane])
            .collect();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push("channel_affine", Tensor::from_parts(s.to_vec(), data), Op::ChannelAffine { x, gamma, beta }, ng)
    }

    /// Selects one element (flat index) as a scalar.
    pub fn pick(&self, x: Var, index: usize) -> Result<Var, TensorError> {
        let vx = self.value(x);
        if index >= vx.len() {
            return Err(TensorError::IndexOutOfRange { op: "pick", index, len: vx.len() });
        }
        self.push("pick", Tensor::scalar(vx.data()[index]), Op::Pick(x, index), self.needs(x))
    }

    /// Reverse-mode sweep from a single-element `loss`. Returns gradients for
    /// every parameter in `store`; parameters not on the tape get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Grads<T>, TensorError> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(shape_err("backward", format!("loss has shape {:?}", nodes[loss.0].value.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Grads::zeros_like(store);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(pid) = node.op {
                let dst = out.get_mut(pid);
                for (d, v) in dst.data_mut().iter_mut().zip(&g) {
                    *d = *d + T::from_f64(*v);
                }
                continue;
            }
            backward_node(&nodes, node, &g, &mut grads);
        }
        Ok(out)
    }
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

fn vals<T: Real>(nodes: &[Node<T>], v: Var) -> &[T] {
    nodes[v.0].value.data()
}

fn backward_node<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let f = |t: T| t.as_f64();
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (vals(nodes, *a), vals(nodes, *b));
            accumulate(nodes, grads, *a, g.iter().zip(vb).map(|(d, y)| d * f(*y)).collect());
            accumulate(nodes, grads, *b, g.iter().zip(va).map(|(d, x)| d * f(*x)).collect());
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, g.iter().map(|d| d * f(*s)).collect()),
        Op::AddConst(a) | Op::Reshape(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::MulConst(a, c) => {
            accumulate(nodes, grads, *a, g.iter().zip(c.data()).map(|(d, y)| d * f(*y)).collect())
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if nodes[a.0].needs_grad {
                let da = kernels::matmul_bt(g, tb.data(), m, n, k);
                accumulate(nodes, grads, *a, da);
            }
            if nodes[b.0].needs_grad {
                let db = kernels::matmul_at(ta.data(), g, m, k, n);
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Transpose(a) => {
            let s = nodes[a.0].value.shape();
            let (m, n) = (s[0], s[1]);
            let mut d = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    d[i * n + j] = g[j * m + i];
                }
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::AddRow(x, row) => {
            accumulate(nodes, grads, *x, g.to_vec());
            let n = nodes[row.0].value.len();
            let mut d = vec![0.0; n];
            for (i, v) in g.iter().enumerate() {
                d[i % n] += v;
            }
            accumulate(nodes, grads, *row, d);
        }
        Op::Relu(a) => {
            let va = vals(nodes, *a);
            accumulate(nodes, grads, *a, g.iter().zip(va).map(|(d, x)| if f(*x) > 0.0 { *d } else { 0.0 }).collect())
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            accumulate(nodes, grads, *a, g.iter().zip(y).map(|(d, s)| d * f(*s) * (1.0 - f(*s))).collect())
        }
        Op::Tanh(a) => {
            let y = node.value.data();
            accumulate(nodes, grads, *a, g.iter().zip(y).map(|(d, t)| d * (1.0 - f(*t) * f(*t))).collect())
        }
        Op::Atan(a) => {
            let va = vals(nodes, *a);
            accumulate(nodes, grads, *a, g.iter().zip(va).map(|(d, x)| d / (1.0 + f(*x) * f(*x))).collect())
        }
        Op::Exp(a) => {
            let y = node.value.data();
            accumulate(nodes, grads, *a, g.iter().zip(y).map(|(d, e)| d * f(*e)).collect())
        }
        Op::Concat(inputs, axis) => {
            let out_shape = node.value.shape();
            let (outer, inner) = outer_inner(out_shape, *axis);
            let total = out_shape[*axis];
            let mut offset = 0;
            for v in inputs {
                let len = nodes[v.0].value.shape()[*axis];
                if nodes[v.0].needs_grad {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + len * inner]);
                    }
                    accumulate(nodes, grads, *v, d);
                }
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let s = nodes[x.0].value.shape();
            let (outer, inner) = outer_inner(s, *axis);
            let len = node.value.shape()[*axis];
            let mut d = vec![0.0; nodes[x.0].value.len()];
            for o in 0..outer {
                let base = (o * s[*axis] + start) * inner;
                d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(nodes, grads, *x, d);
        }
        Op::ExpandChannels(v) => {
            let c = nodes[v.0].value.len();
            let plane = g.len() / c;
            let d = (0..c).map(|ch| g[ch * plane..(ch + 1) * plane].iter().sum()).collect();
            accumulate(nodes, grads, *v, d);
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, vec![g[0]; nodes[a.0].value.len()]),
        Op::MeanAxis { x, axis } => {
            let s = nodes[x.0].value.shape();
            let (outer, inner) = outer_inner(s, *axis);
            let n = s[*axis];
            let mut d = vec![0.0; numel(s)];
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        d[(o * n + k) * inner + i] = g[o * inner + i] / n as f64;
                    }
                }
            }
            accumulate(nodes, grads, *x, d);
        }
        Op::Softmax(x, mask) => {
            let p = node.value.data();
            let n = last_dim(node.value.shape()).max(1);
            let mut d = vec![0.0; p.len()];
            for r in 0..p.len() / n {
                let dot: f64 = (r * n..(r + 1) * n).map(|i| f(p[i]) * g[i]).sum();
                for i in r * n..(r + 1) * n {
                    if mask.as_ref().map_or(true, |m| m[i]) {
                        d[i] = f(p[i]) * (g[i] - dot);
                    }
                }
            }
            accumulate(nodes, grads, *x, d);
        }
        Op::LogSoftmax(x, mask) => {
            let lp = node.value.data();
            let n = last_dim(node.value.shape()).max(1);
            let valid = |i: usize| mask.as_ref().map_or(true, |m| m[i]);
            let mut d = vec![0.0; lp.len()];
            for r in 0..lp.len() / n {
                let gs: f64 = (r * n..(r + 1) * n).filter(|i| valid(*i)).map(|i| g[i]).sum();
                for i in r * n..(r + 1) * n {
                    if valid(i) {
                        d[i] = g[i] - f(lp[i]).exp() * gs;
                    }
                }
            }
            accumulate(nodes, grads, *x, d);
        }
        Op::CrossEntropy { x, target, probs } => {
            let mut d: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
            d[*target] -= g[0];
            accumulate(nodes, grads, *x, d);
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let n = nodes[gamma.0].value.len();
            let gam = vals(nodes, *gamma);
            let rows = xhat.len() / n;
            let mut dg = vec![0.0; n];
            let mut db = vec![0.0; n];
            let mut dx = vec![0.0; xhat.len()];
            for r in 0..rows {
                let mut mean_dh = 0.0;
                let mut mean_dh_h = 0.0;
                for i in 0..n {
                    let k = r * n + i;
                    dg[i] += g[k] * xhat[k];
                    db[i] += g[k];
                    let dh = g[k] * f(gam[i]);
                    mean_dh += dh;
                    mean_dh_h += dh * xhat[k];
                }
                mean_dh /= n as f64;
                mean_dh_h /= n as f64;
                for i in 0..n {
                    let k = r * n + i;
                    let dh = g[k] * f(gam[i]);
                    dx[k] = rstd[r] * (dh - mean_dh - xhat[k] * mean_dh_h);
                }
            }
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *gamma, dg);
            accumulate(nodes, grads, *beta, db);
        }
        Op::Conv2d { x, w, b, geom } => {
            let (dx, dw, db) = kernels::conv2d_backward(vals(nodes, *x), vals(nodes, *w), g, geom);
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *w, dw);
            if let Some(b) = b {
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::ConvTranspose2d { x, w, b, geom } => {
            let (dx, dw, db) = kernels::conv2d_transpose_backward(vals(nodes, *x), vals(nodes, *w), g, geom);
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *w, dw);
            if let Some(b) = b {
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::ChannelAffine { x, gamma, beta } => {
            let vx = vals(nodes, *x);
            let gam = vals(nodes, *gamma);
            let c = gam.len();
            let plane = vx.len() / c;
            let mut dx = vec![0.0; vx.len()];
            let mut dg = vec![0.0; c];
            let mut db = vec![0.0; c];
            for (i, d) in g.iter().enumerate() {
                let ch = i / plane;
                dx[i] = d * f(gam[ch]);
                dg[ch] += d * f(vx[i]);
                db[ch] += d;
            }
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *gamma, dg);
            accumulate(nodes, grads, *beta, db);
        }
        Op::Pick(x, index) => {
            let mut d = vec![0.0; nodes[x.0].value.len()];
            d[*index] = g[0];
            accumulate(nodes, grads, *x, d);
        }
    }
}
