//! Parameterized layers built from tape primitives.
//!
//! Layers only hold [`ParamId`]s; weights live in a [`ParamStore`] so the
//! same architecture can be evaluated against any snapshot, in either float
//! width.

use std::sync::Arc;

use rand::Rng;

use crate::error::{shape_err, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Additive mask value for padded attention keys.
pub const ATTENTION_MASK_VALUE: f64 = -1e9;

/// Evaluation context: a tape plus the weights to read. When `trainable` is
/// false parameters enter the tape as constants and no gradient is tracked.
pub struct Ctx<'a, T: Real = f32> {
    pub tape: &'a Tape<T>,
    pub params: &'a ParamStore<T>,
    pub trainable: bool,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, params: &'a ParamStore<T>, trainable: bool) -> Self {
        Ctx { tape, params, trainable }
    }

    pub fn p(&self, id: ParamId) -> Var {
        if self.trainable {
            self.tape.param(self.params, id)
        } else {
            self.tape.frozen(self.params, id)
        }
    }
}

/// Registers freshly initialized parameters under a name prefix.
pub struct ParamInit<'a, R: Rng> {
    store: &'a mut ParamStore<f32>,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> ParamInit<'a, R> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut R) -> Self {
        ParamInit { store, rng, prefix: String::new() }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<O>(&mut self, name: &str, f: impl FnOnce(&mut ParamInit<'_, R>) -> O) -> O {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        let mut inner = ParamInit { store: self.store, rng: self.rng, prefix };
        f(&mut inner)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// He-style uniform fan-in initialization: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId, TensorError> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound) as f32).collect();
        let full = self.full_name(name);
        self.store.insert(&full, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<ParamId, TensorError> {
        let full = self.full_name(name);
        self.store.insert(&full, Tensor::full(shape, value))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, input: usize, output: usize) -> Result<Self, TensorError> {
        init.scope(name, |p| {
            Ok(Linear {
                weight: p.uniform("weight", &[input, output], input)?,
                bias: p.constant("bias", &[output], 0.0)?,
                input,
                output,
            })
        })
    }

    /// `x` is `[m, input]` or `[input]`; output keeps the leading shape.
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var, TensorError> {
        let shape = ctx.tape.shape(x);
        let (x2, vector) = match shape.as_slice() {
            [n] if *n == self.input => (ctx.tape.reshape(x, &[1, *n])?, true),
            [_, n] if *n == self.input => (x, false),
            _ => return Err(shape_err("linear", format!("{shape:?} into {} inputs", self.input))),
        };
        let y = ctx.tape.matmul(x2, ctx.p(self.weight))?;
        let y = ctx.tape.add_row(y, ctx.p(self.bias))?;
        if vector {
            ctx.tape.reshape(y, &[self.output])
        } else {
            Ok(y)
        }
    }

    pub fn forward_relu<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var, TensorError> {
        let y = self.forward(ctx, x)?;
        ctx.tape.relu(y)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, width: usize) -> Result<Self, TensorError> {
        init.scope(name, |p| {
            Ok(LayerNorm { gamma: p.constant("gamma", &[width], 1.0)?, beta: p.constant("beta", &[width], 0.0)? })
        })
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var, TensorError> {
        ctx.tape.layer_norm(x, ctx.p(self.gamma), ctx.p(self.beta), Self::EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        init: &mut ParamInit<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self, TensorError> {
        init.scope(name, |p| {
            Ok(Conv2d {
                weight: p.uniform("weight", &[c_out, c_in, kernel, kernel], c_in * kernel * kernel)?,
                bias: p.constant("bias", &[c_out], 0.0)?,
                stride,
                pad,
            })
        })
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var, TensorError> {
        ctx.tape.conv2d(x, ctx.p(self.weight), Some(ctx.p(self.bias)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        init: &mut ParamInit<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self, TensorError> {
        init.scope(name, |p| {
            Ok(ConvTranspose2d {
                weight: p.uniform("weight", &[c_in, c_out, kernel, kernel], c_in * kernel * kernel / (stride * stride).max(1))?,
                bias: p.constant("bias", &[c_out], 0.0)?,
                stride,
                pad,
            })
        })
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var, TensorError> {
        ctx.tape.conv2d_transpose(x, ctx.p(self.weight), Some(ctx.p(self.bias)), self.stride, self.pad)
    }
}

/// Recurrent state of one LSTM layer, each `[1, hidden]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, input: usize, hidden: usize) -> Result<Self, TensorError> {
        init.scope(name, |p| {
            Ok(LstmCell {
                w_input: p.uniform("w_input", &[input, 4 * hidden], input)?,
                w_hidden: p.uniform("w_hidden", &[hidden, 4 * hidden], hidden)?,
                bias: p.constant("bias", &[4 * hidden], 0.0)?,
                input,
                hidden,
            })
        })
    }

    /// Gate order in the fused projection: input, forget, cell, output.
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var, state: LstmState) -> Result<LstmState, TensorError> {
        lstm_cell(ctx.tape, x, state, ctx.p(self.w_input), ctx.p(self.w_hidden), ctx.p(self.bias))
    }
}

/// Standard LSTM cell on `[1, in]` input with fused weights
/// `w_input: [in, 4H]`, `w_hidden: [H, 4H]`, `bias: [4H]`.
pub fn lstm_cell<T: Real>(
    tape: &Tape<T>,
    x: Var,
    state: LstmState,
    w_input: Var,
    w_hidden: Var,
    bias: Var,
) -> Result<LstmState, TensorError> {
    let hidden = tape.shape(w_hidden)[0];
    let hs = tape.shape(state.h);
    let cs = tape.shape(state.c);
    if hs != [1, hidden] || cs != [1, hidden] {
        return Err(shape_err("lstm_cell", format!("state {hs:?}/{cs:?} for hidden {hidden}")));
    }
    let zx = tape.matmul(x, w_input)?;
    let zh = tape.matmul(state.h, w_hidden)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_row(z, bias)?;
    let i = tape.sigmoid(tape.narrow(z, 1, 0, hidden)?)?;
    let f = tape.sigmoid(tape.narrow(z, 1, hidden, hidden)?)?;
    let g = tape.tanh(tape.narrow(z, 1, 2 * hidden, hidden)?)?;
    let o = tape.sigmoid(tape.narrow(z, 1, 3 * hidden, hidden)?)?;
    let c = tape.add(tape.mul(f, state.c)?, tape.mul(i, g)?)?;
    let h = tape.mul(o, tape.tanh(c)?)?;
    Ok(LstmState { h, c })
}

/// Gated linear unit: `out(sigmoid(gate(context)) * x)`.
#[derive(Clone, Debug)]
pub struct Glu {
    pub gate: Linear,
    pub out: Linear,
}

impl Glu {
    pub fn new<R: Rng>(
        init: &mut ParamInit<'_, R>,
        name: &str,
        input: usize,
        context: usize,
        output: usize,
    ) -> Result<Self, TensorError> {
        init.scope(name, |p| {
            Ok(Glu { gate: Linear::new(p, "gate", context, input)?, out: Linear::new(p, "out", input, output)? })
        })
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var, context: Var) -> Result<Var, TensorError> {
        let gate = ctx.tape.sigmoid(self.gate.forward(ctx, context)?)?;
        let gated = ctx.tape.mul(gate, x)?;
        self.out.forward(ctx, gated)
    }
}

/// Feature-wise linear modulation of a `[C,H,W]` map by a conditioning vector.
#[derive(Clone, Debug)]
pub struct Film {
    pub proj: Linear,
    pub channels: usize,
}

impl Film {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, cond: usize, channels: usize) -> Result<Self, TensorError> {
        init.scope(name, |p| Ok(Film { proj: Linear::new(p, "proj", cond, 2 * channels)?, channels }))
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var, cond: Var) -> Result<Var, TensorError> {
        let gb = self.proj.forward(ctx, cond)?;
        let gb = ctx.tape.reshape(gb, &[2 * self.channels])?;
        let gamma = ctx.tape.narrow(gb, 0, 0, self.channels)?;
        let beta = ctx.tape.narrow(gb, 0, self.channels, self.channels)?;
        ctx.tape.channel_affine(x, gamma, beta)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, width: usize, heads: usize) -> Result<Self, TensorError> {
        if heads == 0 || width % heads != 0 {
            return Err(TensorError::Invalid {
                op: "multi_head_attention",
                detail: format!("width {width} not divisible by {heads} heads"),
            });
        }
        init.scope(name, |p| {
            Ok(MultiHeadAttention {
                query: Linear::new(p, "query", width, width)?,
                key: Linear::new(p, "key", width, width)?,
                value: Linear::new(p, "value", width, width)?,
                out: Linear::new(p, "out", width, width)?,
                heads,
            })
        })
    }

    /// Self-attention over `x: [N, width]`. `valid` marks keys that may be
    /// attended; others get an additive `-1e9` before the softmax. Returns
    /// the output and the attention weights `[heads, N, N]`.
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var, valid: &[bool]) -> Result<(Var, Tensor<T>), TensorError> {
        let tape = ctx.tape;
        let shape = tape.shape(x);
        let (n, width) = (shape[0], shape[1]);
        if valid.len() != n {
            return Err(shape_err("multi_head_attention", format!("mask {} for {n} entities", valid.len())));
        }
        let dh = width / self.heads;
        let q = self.query.forward(ctx, x)?;
        let k = self.key.forward(ctx, x)?;
        let v = self.value.forward(ctx, x)?;
        let mut additive = Vec::with_capacity(n * n);
        for _ in 0..n {
            additive.extend(valid.iter().map(|ok| T::from_f64(if *ok { 0.0 } else { ATTENTION_MASK_VALUE })));
        }
        let additive = Tensor::new(vec![n, n], additive)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads * n * n);
        for h in 0..self.heads {
            let qh = tape.narrow(q, 1, h * dh, dh)?;
            let kh = tape.narrow(k, 1, h * dh, dh)?;
            let vh = tape.narrow(v, 1, h * dh, dh)?;
            let scores = tape.matmul(qh, tape.transpose(kh)?)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let scores = tape.add_const(scores, &additive)?;
            let att = tape.softmax(scores, None)?;
            weights.extend_from_slice(tape.value(att).data());
            outs.push(tape.matmul(att, vh)?);
        }
        let merged = tape.concat(&outs, 1)?;
        let out = self.out.forward(ctx, merged)?;
        Ok((out, Tensor::new(vec![self.heads, n, n], weights)?))
    }
}

/// Inverted dropout. With `p == 0` or no rng this is the identity.
pub fn dropout<T: Real, R: Rng>(tape: &Tape<T>, x: Var, p: f64, rng: Option<&mut R>) -> Result<Var, TensorError> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    if p >= 1.0 {
        return Err(TensorError::Invalid { op: "dropout", detail: format!("p = {p}") });
    }
    let shape = tape.shape(x);
    let keep = T::from_f64(1.0 / (1.0 - p));
    let n: usize = shape.iter().product();
    let mask = (0..n).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
    tape.mul_const(x, Arc::new(Tensor::new(shape, mask)?))
}
