//! Finite-difference gradient checking. These helpers only evaluate the
//! function being checked; they never touch the tape's backward pass.

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_differences(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut point = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = point[i];
            point[i] = orig + eps;
            let plus = f(&point);
            point[i] = orig - eps;
            let minus = f(&point);
            point[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, 0 when both are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}


use std::sync::Arc;

use rand::{Rng, SeedableRng};

use crate::nn::{self, Ctx, LstmState};
use crate::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

/// Forward builder for a gradient check: receives one leaf per input.
/// The store holds the inputs in order, so layers reading `ParamId`s see the
/// same leaves.
pub type BuildFn = Box<dyn Fn(&Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var, TensorError>>;

/// One randomized instance of a differentiable operation.
pub struct OpInstance {
    pub inputs: Vec<Tensor<f64>>,
    pub build: BuildFn,
}

fn eval_projection(inst: &OpInstance, store: &ParamStore<f64>, weights: &[f64]) -> Result<f64, TensorError> {
    let tape = Tape::new();
    let leaves: Vec<Var> = store.ids().map(|id| tape.param(store, id)).collect();
    let y = (inst.build)(&tape, store, &leaves)?;
    let out = tape.value(y);
    Ok(out.data().iter().zip(weights).map(|(a, w)| a * w).sum())
}

/// Compares tape gradients of `sum(w * op(inputs))` (random fixed `w`)
/// against central differences. Returns the relative error over all inputs.
pub fn gradient_check(inst: &OpInstance, rng: &mut impl Rng, eps: f64) -> Result<f64, TensorError> {
    let mut store = ParamStore::<f64>::new();
    for (i, t) in inst.inputs.iter().enumerate() {
        store.insert(&format!("input{i}"), t.clone())?;
    }
    let tape = Tape::new();
    let leaves: Vec<Var> = store.ids().map(|id| tape.param(&store, id)).collect();
    let y = (inst.build)(&tape, &store, &leaves)?;
    let n_out = tape.value(y).len();
    let weights: Vec<f64> = (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let shape = tape.shape(y);
    let w = tape.constant(Tensor::new(shape.clone(), weights.clone())?);
    let loss = tape.sum(tape.mul(y, w)?)?;
    let grads = tape.backward(loss, &store)?;
    let analytic = grads.flatten_f64();

    let sizes: Vec<usize> = inst.inputs.iter().map(|t| t.len()).collect();
    let flat: Vec<f64> = inst.inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let mut failure = None;
    let mut f = |x: &[f64]| -> f64 {
        let mut s = store.clone();
        let mut offset = 0;
        for (k, n) in sizes.iter().enumerate() {
            s.get_mut(ParamId(k)).data_mut().copy_from_slice(&x[offset..offset + n]);
            offset += n;
        }
        match eval_projection(inst, &s, &weights) {
            Ok(v) => v,
            Err(e) => {
                failure = Some(e);
                0.0
            }
        }
    };
    let numeric = central_differences(&mut f, &flat, eps);
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(relative_error(&analytic, &numeric))
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so kinks (relu) are never straddled.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn random_mask(rng: &mut impl Rng, n: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < 0.7).collect();
    let keep = rng.gen_range(0..n);
    m[keep] = true;
    m
}

/// Every differentiable tape operation and composite layer, each paired
/// with a generator of small random instances.
pub fn differentiable_ops() -> Vec<(&'static str, fn(&mut rand::rngs::StdRng) -> OpInstance)> {
    use rand::rngs::StdRng;
    fn inst(inputs: Vec<Tensor<f64>>, build: BuildFn) -> OpInstance {
        OpInstance { inputs, build }
    }
    let ops: Vec<(&'static str, fn(&mut StdRng) -> OpInstance)> = vec![
        ("add", |r| inst(vec![random_tensor(r, &[2, 3]), random_tensor(r, &[2, 3])], Box::new(|t, _, v| t.add(v[0], v[1])))),
        ("sub", |r| inst(vec![random_tensor(r, &[2, 3]), random_tensor(r, &[2, 3])], Box::new(|t, _, v| t.sub(v[0], v[1])))),
        ("mul", |r| inst(vec![random_tensor(r, &[2, 3]), random_tensor(r, &[2, 3])], Box::new(|t, _, v| t.mul(v[0], v[1])))),
        ("scale", |r| inst(vec![random_tensor(r, &[4])], Box::new(|t, _, v| t.scale(v[0], -1.7)))),
        ("matmul", |r| inst(vec![random_tensor(r, &[2, 3]), random_tensor(r, &[3, 4])], Box::new(|t, _, v| t.matmul(v[0], v[1])))),
        ("transpose", |r| inst(vec![random_tensor(r, &[2, 3])], Box::new(|t, _, v| t.transpose(v[0])))),
        ("add_row", |r| inst(vec![random_tensor(r, &[3, 2]), random_tensor(r, &[2])], Box::new(|t, _, v| t.add_row(v[0], v[1])))),
        ("relu", |r| inst(vec![away_from_zero(r, &[2, 4])], Box::new(|t, _, v| t.relu(v[0])))),
        ("sigmoid", |r| inst(vec![random_tensor(r, &[5])], Box::new(|t, _, v| t.sigmoid(v[0])))),
        ("tanh", |r| inst(vec![random_tensor(r, &[5])], Box::new(|t, _, v| t.tanh(v[0])))),
        ("atan", |r| inst(vec![random_tensor(r, &[5])], Box::new(|t, _, v| t.atan(v[0])))),
        ("exp", |r| inst(vec![random_tensor(r, &[5])], Box::new(|t, _, v| t.exp(v[0])))),
        ("concat", |r| {
            inst(vec![random_tensor(r, &[2, 2]), random_tensor(r, &[2, 3])], Box::new(|t, _, v| t.concat(&[v[0], v[1]], 1)))
        }),
        ("narrow", |r| inst(vec![random_tensor(r, &[3, 4])], Box::new(|t, _, v| t.narrow(v[0], 1, 1, 2)))),
        ("expand_channels", |r| inst(vec![random_tensor(r, &[3])], Box::new(|t, _, v| t.expand_channels(v[0], 2, 2)))),
        ("sum", |r| inst(vec![random_tensor(r, &[2, 3])], Box::new(|t, _, v| t.sum(v[0])))),
        ("mean_axis", |r| inst(vec![random_tensor(r, &[3, 4])], Box::new(|t, _, v| t.mean_axis(v[0], 0)))),
        ("softmax_masked", |r| {
            let mask = random_mask(r, 6);
            inst(vec![random_tensor(r, &[6])], Box::new(move |t, _, v| t.softmax(v[0], Some(&mask))))
        }),
        ("softmax_with_temperature", |r| {
            inst(vec![random_tensor(r, &[2, 3])], Box::new(|t, _, v| t.softmax_with_temperature(v[0], 0.7, None)))
        }),
        ("log_softmax_masked", |r| {
            let mask = random_mask(r, 5);
            inst(vec![random_tensor(r, &[5])], Box::new(move |t, _, v| t.log_softmax(v[0], Some(&mask))))
        }),
        ("cross_entropy", |r| {
            let mask = random_mask(r, 5);
            let target = (0..5).find(|i| mask[*i]).unwrap();
            inst(vec![random_tensor(r, &[5])], Box::new(move |t, _, v| t.cross_entropy(v[0], target, Some(&mask))))
        }),
        ("layer_norm", |r| {
            inst(
                vec![random_tensor(r, &[2, 4]), random_tensor(r, &[4]), random_tensor(r, &[4])],
                Box::new(|t, _, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
            )
        }),
        ("conv2d", |r| {
            inst(
                vec![random_tensor(r, &[2, 4, 4]), random_tensor(r, &[3, 2, 3, 3]), random_tensor(r, &[3])],
                Box::new(|t, _, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1)),
            )
        }),
        ("conv2d_transpose", |r| {
            inst(
                vec![random_tensor(r, &[2, 3, 3]), random_tensor(r, &[2, 3, 4, 4]), random_tensor(r, &[3])],
                Box::new(|t, _, v| t.conv2d_transpose(v[0], v[1], Some(v[2]), 2, 1)),
            )
        }),
        ("channel_affine", |r| {
            inst(
                vec![random_tensor(r, &[2, 2, 3]), random_tensor(r, &[2]), random_tensor(r, &[2])],
                Box::new(|t, _, v| t.channel_affine(v[0], v[1], v[2])),
            )
        }),
        ("pick", |r| inst(vec![random_tensor(r, &[2, 3])], Box::new(|t, _, v| t.pick(v[0], 4)))),
        ("linear", |r| {
            inst(
                vec![random_tensor(r, &[2, 3]), random_tensor(r, &[3, 2]), random_tensor(r, &[2])],
                Box::new(|t, _, v| t.add_row(t.matmul(v[0], v[1])?, v[2])),
            )
        }),
        ("lstm_cell", |r| {
            let (inp, hid) = (3, 2);
            inst(
                vec![
                    random_tensor(r, &[1, inp]),
                    random_tensor(r, &[1, hid]),
                    random_tensor(r, &[1, hid]),
                    random_tensor(r, &[inp, 4 * hid]),
                    random_tensor(r, &[hid, 4 * hid]),
                    random_tensor(r, &[4 * hid]),
                ],
                Box::new(|t, _, v| {
                    let s = nn::lstm_cell(t, v[0], LstmState { h: v[1], c: v[2] }, v[3], v[4], v[5])?;
                    t.concat(&[s.h, s.c], 1)
                }),
            )
        }),
        ("glu", |r| {
            inst(
                vec![
                    random_tensor(r, &[3]),
                    random_tensor(r, &[2]),
                    random_tensor(r, &[2, 3]),
                    random_tensor(r, &[3]),
                    random_tensor(r, &[3, 2]),
                    random_tensor(r, &[2]),
                ],
                Box::new(|t, _, v| {
                    let x = t.reshape(v[0], &[1, 3])?;
                    let ctx = t.reshape(v[1], &[1, 2])?;
                    let gate = t.sigmoid(t.add_row(t.matmul(ctx, v[2])?, v[3])?)?;
                    t.add_row(t.matmul(t.mul(gate, x)?, v[4])?, v[5])
                }),
            )
        }),
        ("film", |r| {
            inst(
                vec![random_tensor(r, &[2, 2, 2]), random_tensor(r, &[3]), random_tensor(r, &[3, 4]), random_tensor(r, &[4])],
                Box::new(|t, _, v| {
                    let cond = t.reshape(v[1], &[1, 3])?;
                    let gb = t.reshape(t.add_row(t.matmul(cond, v[2])?, v[3])?, &[4])?;
                    t.channel_affine(v[0], t.narrow(gb, 0, 0, 2)?, t.narrow(gb, 0, 2, 2)?)
                }),
            )
        }),
        ("multi_head_attention", |r| {
            let mut store = ParamStore::<f32>::new();
            store.insert("x", random_tensor(r, &[3, 4]).cast()).unwrap();
            let mut seed_rng = rand::rngs::StdRng::seed_from_u64(r.gen());
            let mha = {
                let mut init = nn::ParamInit::new(&mut store, &mut seed_rng);
                nn::MultiHeadAttention::new(&mut init, "att", 4, 2).unwrap()
            };
            let inputs = store.ids().map(|id| store.get(id).cast::<f64>()).collect();
            let valid = vec![true, false, true];
            inst(
                inputs,
                Box::new(move |t, s, v| {
                    let ctx = Ctx::new(t, s, true);
                    Ok(mha.forward(&ctx, v[0], &valid)?.0)
                }),
            )
        }),
        ("dropout", |r| {
            let mask = Arc::new(Tensor::new(vec![6], (0..6).map(|i| if i % 3 == 0 { 0.0 } else { 1.5 }).collect()).unwrap());
            inst(vec![random_tensor(r, &[6])], Box::new(move |t, _, v| t.mul_const(v[0], Arc::clone(&mask))))
        }),
    ];
    ops
}
