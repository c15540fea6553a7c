//! Random gradient-check instances shared by the autodiff tests and the acceptance run.

use std::collections::BTreeMap;

use che_core::data::multi_hot;
use che_core::encoders::{Bound, Dims, Model, ModelKind};
use che_core::hsic::{hsic_local_graph, median_sigma};
use che_core::tensor::{grad_check, grad_check_multi, OpKind};
use che_core::{Graph, Tensor, TensorError, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{random_record, tensor, uniform};

pub const TOL: f64 = 1e-4;
pub const INSTANCES: usize = 100;
const STEP: f64 = 1e-6;
// Deep graphs accumulate roundoff on near-zero coordinates; a wider step keeps
// the central difference above that floor while truncation stays O(h^2).
const MODEL_STEP: f64 = 1e-4;

/// Contracts `out` with fixed random coefficients so every output coordinate
/// carries a distinct, non-zero share of the scalar.
fn contract(g: &mut Graph, out: Var, coeffs: &[f64]) -> Result<Var, TensorError> {
    let shape = g.shape(out).to_vec();
    let c = g.constant(Tensor::new(shape.clone(), coeffs[..shape.iter().product()].to_vec())?);
    let prod = g.mul(out, c)?;
    g.sum(prod)
}

pub fn check_op(kind: OpKind, r: &mut ChaCha8Rng) -> f64 {
    let rows = r.gen_range(2..5);
    let cols = r.gen_range(2..5);
    let coeffs = uniform(r, 64, 0.5, 1.5);
    let sq = tensor(r, &[rows, rows], -1.0, 1.0);
    let a = tensor(r, &[rows, cols], -1.0, 1.0);
    let b = tensor(r, &[rows, cols], -1.0, 1.0);
    let positive = tensor(r, &[rows, cols], 0.5, 2.0);
    let c2 = tensor(r, &[cols, rows], -1.0, 1.0);
    let v = tensor(r, &[cols], -1.0, 1.0);
    let target: Vec<f64> = (0..rows * cols).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let c = &coeffs;
    let res = match kind {
        OpKind::Leaf => grad_check(|g, x| contract(g, x, c), &a, STEP),
        OpKind::Add => grad_check_multi(|g, x| { let o = g.add(x[0], x[1])?; contract(g, o, c) }, &[a, b], STEP),
        OpKind::Sub => grad_check_multi(|g, x| { let o = g.sub(x[0], x[1])?; contract(g, o, c) }, &[a, b], STEP),
        OpKind::Mul => grad_check_multi(|g, x| { let o = g.mul(x[0], x[1])?; contract(g, o, c) }, &[a, b], STEP),
        OpKind::Div => grad_check_multi(|g, x| { let o = g.div(x[0], x[1])?; contract(g, o, c) }, &[a, positive], STEP),
        OpKind::Scale => grad_check(|g, x| { let o = g.scale(x, -1.7)?; contract(g, o, c) }, &a, STEP),
        OpKind::Exp => grad_check(|g, x| { let o = g.exp(x)?; contract(g, o, c) }, &a, STEP),
        OpKind::Log => grad_check(|g, x| { let o = g.log(x)?; contract(g, o, c) }, &positive, STEP),
        OpKind::Tanh => grad_check(|g, x| { let o = g.tanh(x)?; contract(g, o, c) }, &a, STEP),
        OpKind::Sigmoid => grad_check(|g, x| { let o = g.sigmoid(x)?; contract(g, o, c) }, &a, STEP),
        OpKind::Softmax => grad_check(|g, x| { let o = g.softmax(x)?; contract(g, o, c) }, &a, STEP),
        OpKind::Sum => grad_check(|g, x| { let s = g.mul(x, x)?; g.sum(s) }, &a, STEP),
        OpKind::Mean => grad_check(|g, x| { let s = g.mul(x, x)?; g.mean(s) }, &a, STEP),
        OpKind::Trace => grad_check(|g, x| { let s = g.mul(x, x)?; g.trace(s) }, &sq, STEP),
        OpKind::Transpose => grad_check(|g, x| { let o = g.transpose(x)?; contract(g, o, c) }, &a, STEP),
        OpKind::Concat => grad_check_multi(|g, x| { let o = g.concat(&[x[0], x[1]])?; contract(g, o, c) }, &[a, b], STEP),
        OpKind::Slice => grad_check(|g, x| { let o = g.slice(x, 1, rows - 1)?; contract(g, o, c) }, &a, STEP),
        OpKind::Reshape => grad_check(|g, x| { let o = g.reshape(x, &[cols * rows])?; contract(g, o, c) }, &a, STEP),
        OpKind::MatMul => {
            let mm = grad_check_multi(|g, x| { let o = g.matmul(x[0], x[1])?; contract(g, o, c) }, &[a.clone(), c2], STEP);
            let mv = grad_check_multi(|g, x| { let o = g.matmul(x[0], x[1])?; contract(g, o, c) }, &[a, v], STEP);
            mm.and_then(|x| mv.map(|y| x.max(y)))
        }
        OpKind::PairwiseSqDist => {
            let m = grad_check(|g, x| { let o = g.pairwise_sq_dist(x)?; contract(g, o, c) }, &a, STEP);
            let vv = grad_check(|g, x| { let o = g.pairwise_sq_dist(x)?; contract(g, o, c) }, &v, STEP);
            m.and_then(|x| vv.map(|y| x.max(y)))
        }
        OpKind::BceWithLogits => grad_check(|g, x| g.bce_with_logits(x, &target), &a, STEP),
    };
    res.unwrap_or_else(|e| panic!("{kind:?}: {e}"))
}

pub const ALL_OPS: [OpKind; 21] = [
    OpKind::Leaf,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Div,
    OpKind::Scale,
    OpKind::Exp,
    OpKind::Log,
    OpKind::Tanh,
    OpKind::Sigmoid,
    OpKind::Softmax,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::Trace,
    OpKind::Transpose,
    OpKind::Concat,
    OpKind::Slice,
    OpKind::Reshape,
    OpKind::MatMul,
    OpKind::PairwiseSqDist,
    OpKind::BceWithLogits,
];

/// Relative error of the composed `hsic_local` graph on one random pair, r in 2..=16.
pub fn check_hsic(r: &mut ChaCha8Rng) -> f64 {
    let n = r.gen_range(2..=16);
    let x = tensor(r, &[n], -1.0, 1.0);
    let y = tensor(r, &[n], -1.0, 1.0);
    let (sx, sy) = (median_sigma(x.data()), median_sigma(y.data()));
    grad_check_multi(
        |g, v| hsic_local_graph(g, v[0], v[1], sx, sy).map_err(|e| TensorError::InvalidArgument(e.to_string())),
        &[x, y],
        STEP,
    )
    .unwrap()
}

pub const MODEL_KINDS: [ModelKind; 4] = [ModelKind::Lstm, ModelKind::ReverseAttention, ModelKind::BiAttention, ModelKind::Linear];

/// Relative error of the full-model loss in every parameter for one random record.
pub fn check_model(kind: ModelKind, r: &mut ChaCha8Rng) -> f64 {
    let dims = Dims { m: 5, n: 4, r: 3 };
    let model = Model::new(kind, dims, r.gen()).unwrap();
    let visits = r.gen_range(2..5);
    let record = random_record(r, dims.m, dims.n, visits);
    let prefix = r.gen_range(1..visits);
    let target = multi_hot(&record.visits[prefix].dx, dims.m);
    let names: Vec<String> = model.params.keys().cloned().collect();
    let inputs: Vec<Tensor> = model.params.values().cloned().collect();
    grad_check_multi(
        |g, vars| {
            let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()).collect::<BTreeMap<_, _>>());
            let fw = model
                .forward(g, &bound, &record, prefix, None)
                .map_err(|e| TensorError::InvalidArgument(e.to_string()))?;
            g.bce_with_logits(fw.logits, &target)
        },
        &inputs,
        MODEL_STEP,
    )
    .unwrap()
}
