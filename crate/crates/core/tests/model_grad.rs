//! Finite-difference verification of the model forward passes with
//! respect to every parameter, plus a reconstruction optimization smoke
//! test.

mod common;

use common::{finite_diff, max_rel_err, TestRng};
use nldg_core::model::{bind, classify, decode, encode, init_params, ModelDims, ModelParams};
use nldg_core::{Tape, Tensor};

const STEP: f64 = 1e-6;

fn tiny_dims() -> ModelDims {
    ModelDims { channels: 1, epoch_len: 5, t: 3, d: 4, c: 3 }
}

fn flatten(params: &ModelParams) -> Vec<f64> {
    params.tensors().iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

fn unflatten(template: &ModelParams, flat: &[f64]) -> ModelParams {
    let mut p = template.clone();
    let mut off = 0;
    for (_, t) in p.tensors_mut() {
        let n = t.data().len();
        let shape = t.shape().to_vec();
        *t = Tensor::new(shape, flat[off..off + n].to_vec()).unwrap().with_grad();
        off += n;
    }
    assert_eq!(off, flat.len());
    p
}

fn input_tensor(dims: &ModelDims, batch: usize, rng: &mut TestRng) -> Tensor {
    Tensor::new(
        vec![batch, dims.t, dims.channels, dims.epoch_len],
        rng.vec(batch * dims.t * dims.channels * dims.epoch_len),
    )
    .unwrap()
}

/// Check the gradient of a scalar forward pass against central finite
/// differences over every parameter entry at once.
fn check_params(
    dims: ModelDims,
    forward: impl Fn(&Tape, &nldg_core::model::ParamVars) -> nldg_core::graph::Var,
    tol: f64,
) {
    let params = init_params(dims, 11).unwrap();
    let flat0 = flatten(&params);

    let tape = Tape::new();
    let pv = bind(&params, &tape);
    let loss = forward(&tape, &pv);
    tape.backward(loss).unwrap();
    // parameters unused by this forward pass get zero gradient
    let analytic: Vec<f64> = pv
        .all()
        .iter()
        .zip(params.tensors())
        .flat_map(|(&(_, v), (_, t))| tape.grad(v).unwrap_or_else(|| vec![0.0; t.data().len()]))
        .collect();

    let mut eval = |p: &[f64]| {
        let params = unflatten(&params, p);
        let tape = Tape::new();
        let pv = bind(&params, &tape);
        let loss = forward(&tape, &pv);
        tape.scalar_value(loss)
    };
    let numeric = finite_diff(&mut eval, &flat0, STEP);
    let err = max_rel_err(&analytic, &numeric);
    assert!(err < tol, "max rel err {err:.3e} ≥ {tol:.0e}");
}

#[test]
fn encoder_grads_vs_finite_differences() {
    let dims = tiny_dims();
    let mut rng = TestRng::new(3);
    let x = input_tensor(&dims, 2, &mut rng);
    // weight the sum so gradients are not uniform across features
    let w: Vec<f64> = rng.vec(2 * dims.t * dims.d);
    check_params(
        dims,
        move |tape, pv| {
            let xv = tape.constant(x.clone());
            let f = encode(tape, xv, pv, &dims, 0.0, false, 0).unwrap();
            let wv = tape.constant(Tensor::new(vec![2, dims.t, dims.d], w.clone()).unwrap());
            tape.sum_all(tape.mul(f, wv).unwrap())
        },
        1e-5,
    );
}

#[test]
fn decoder_grads_vs_finite_differences() {
    let dims = tiny_dims();
    let mut rng = TestRng::new(4);
    let f0 = Tensor::new(vec![2, dims.t, dims.d], rng.vec(2 * dims.t * dims.d)).unwrap();
    let w: Vec<f64> = rng.vec(2 * dims.t * dims.channels * dims.epoch_len);
    check_params(
        dims,
        move |tape, pv| {
            let fv = tape.constant(f0.clone());
            let xhat = decode(tape, fv, pv, &dims).unwrap();
            let wv = tape.constant(
                Tensor::new(vec![2, dims.t, dims.channels, dims.epoch_len], w.clone()).unwrap(),
            );
            tape.sum_all(tape.mul(xhat, wv).unwrap())
        },
        1e-5,
    );
}

#[test]
fn classifier_grads_vs_finite_differences() {
    let dims = tiny_dims();
    let mut rng = TestRng::new(5);
    let f0 = Tensor::new(vec![2, dims.t, dims.d], rng.vec(2 * dims.t * dims.d)).unwrap();
    let w: Vec<f64> = rng.vec(2 * dims.t * dims.c);
    check_params(
        dims,
        move |tape, pv| {
            let fv = tape.constant(f0.clone());
            let z = classify(tape, fv, pv, &dims).unwrap();
            let wv = tape.constant(Tensor::new(vec![2, dims.t, dims.c], w.clone()).unwrap());
            tape.sum_all(tape.mul(z, wv).unwrap())
        },
        1e-5,
    );
}

#[test]
fn composite_classify_encode_grads_vs_finite_differences() {
    let dims = tiny_dims();
    let mut rng = TestRng::new(6);
    let x = input_tensor(&dims, 2, &mut rng);
    let labels: Vec<usize> = (0..2 * dims.t).map(|i| i % dims.c).collect();
    check_params(
        dims,
        move |tape, pv| {
            let xv = tape.constant(x.clone());
            let f = encode(tape, xv, pv, &dims, 0.0, false, 0).unwrap();
            let z = classify(tape, f, pv, &dims).unwrap();
            let flat = tape.reshape(z, vec![2 * dims.t, dims.c]).unwrap();
            tape.mean_all(tape.cross_entropy_logits(flat, &labels).unwrap())
        },
        1e-4,
    );
}

#[test]
fn reconstruction_fit_drops_loss_tenfold() {
    let dims = tiny_dims();
    let mut rng = TestRng::new(7);
    let x = input_tensor(&dims, 2, &mut rng);
    let mut params = init_params(dims, 0).unwrap();
    let lr = 0.05;

    let step = |params: &ModelParams| -> (f64, Vec<f64>) {
        let tape = Tape::new();
        let pv = bind(params, &tape);
        let xv = tape.constant(x.clone());
        let f = encode(&tape, xv, &pv, &dims, 0.0, false, 0).unwrap();
        let xhat = decode(&tape, f, &pv, &dims).unwrap();
        let diff = tape.sub(xhat, xv).unwrap();
        let loss = tape.scale(tape.sum_all(tape.square(diff)), 1.0 / (2.0 * dims.t as f64));
        tape.backward(loss).unwrap();
        let grads: Vec<f64> = pv
            .all()
            .iter()
            .zip(params.tensors())
            .flat_map(|(&(_, v), (_, t))| {
                tape.grad(v).unwrap_or_else(|| vec![0.0; t.data().len()])
            })
            .collect();
        (tape.scalar_value(loss), grads)
    };

    let (initial, _) = step(&params);
    let mut last = initial;
    for _ in 0..500 {
        let (loss, grads) = step(&params);
        last = loss;
        let mut flat = flatten(&params);
        for (p, g) in flat.iter_mut().zip(&grads) {
            *p -= lr * g;
        }
        params = unflatten(&params, &flat);
    }
    assert!(
        last <= initial / 10.0,
        "reconstruction loss {initial:.4} only reached {last:.4} after 500 steps"
    );
}
