//! Finite-difference verification of the full composite objective over
//! every model parameter on a 2-domain toy batch. EMA buffers are
//! seeded with a warm pass and then frozen so the stop-gradient
//! semantics of the targets match what the tape differentiates.

mod common;

use common::{finite_diff, max_rel_err, TestRng};
use nldg_core::model::{bind, init_params, ModelDims, ModelParams};
use nldg_core::objective::{total_loss, Batch, Buffers, ObjectiveConfig, StepContext};
use nldg_core::regularizers::{ElrBuffer, FourierBuffer, WarmupSchedule};
use nldg_core::{Tape, Tensor};

const STEP: f64 = 1e-6;

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
    p
}

#[test]
fn full_objective_grads_vs_finite_differences() {
    let dims = ModelDims { channels: 1, epoch_len: 8, t: 4, d: 8, c: 3 };
    let b = 4;
    let mut rng = TestRng::new(21);
    let batch = Batch {
        x: Tensor::new(
            vec![b, dims.t, dims.channels, dims.epoch_len],
            rng.vec(b * dims.t * dims.channels * dims.epoch_len),
        )
        .unwrap(),
        y_noisy: (0..b * dims.t).map(|i| (i * 5 + 1) % dims.c).collect(),
        sample_ids: (0..b as u64).collect(),
        domain_ids: vec![0, 1, 0, 1],
    };
    let cfg = ObjectiveConfig {
        lambda_ce: 1.0,
        lambda_im: 0.1,
        lambda_rec: 0.5,
        lambda_ep: 0.5,
        lambda_seq: 0.5,
        warmup: WarmupSchedule::new(20, 30).unwrap(),
        fourier_log_variant: false,
        fourier_log_epsilon: 1e-4,
        dropout: 0.0,
    };

    // warm pass with different parameters so the frozen spectral
    // targets are not proportional to the scored spectra (cos < 1)
    let mut buffers = Buffers {
        elr: ElrBuffer::new(dims.c, 0.9, 0.12).unwrap(),
        fourier: FourierBuffer::new(0.9, 0.08).unwrap(),
    };
    let warm_params = init_params(dims, 99).unwrap();
    {
        let tape = Tape::new();
        let pv = bind(&warm_params, &tape);
        let warm_ctx =
            StepContext { epoch_t: 25, dropout_seed: 0, training: true, update_buffers: true };
        total_loss(&tape, &batch, &pv, &dims, &mut buffers, &cfg, warm_ctx).unwrap();
    }
    let frozen =
        StepContext { epoch_t: 25, dropout_seed: 0, training: true, update_buffers: false };

    let params = init_params(dims, 11).unwrap();
    let flat0 = flatten(&params);

    let start = std::time::Instant::now();
    let tape = Tape::new();
    let pv = bind(&params, &tape);
    let (loss, bd) =
        total_loss(&tape, &batch, &pv, &dims, &mut buffers.clone(), &cfg, frozen).unwrap();
    // every term should actually participate in this check
    assert!(bd.cls_ffcdr > 0.0 && bd.elr > 0.0 && bd.felr > 0.0);
    assert!(bd.rec > 0.0 && bd.ep_align > 0.0 && bd.seq_align > 0.0);
    tape.backward(loss).unwrap();
    let analytic: Vec<f64> = pv
        .all()
        .iter()
        .zip(params.tensors())
        .flat_map(|(&(_, v), (_, t))| tape.grad(v).unwrap_or_else(|| vec![0.0; t.data().len()]))
        .collect();

    let mut eval = |p: &[f64]| {
        let trial = unflatten(&params, p);
        let tape = Tape::new();
        let pv = bind(&trial, &tape);
        let (loss, _) =
            total_loss(&tape, &batch, &pv, &dims, &mut buffers.clone(), &cfg, frozen).unwrap();
        tape.scalar_value(loss)
    };
    let numeric = finite_diff(&mut eval, &flat0, STEP);
    let err = max_rel_err(&analytic, &numeric);
    let elapsed = start.elapsed();
    assert!(err < 1e-4, "max rel err {err:.3e} ≥ 1e-4");
    assert!(elapsed.as_secs() < 60, "gradient check took {elapsed:?}");
}

#[test]
fn log_variant_objective_grads_vs_finite_differences() {
    let dims = ModelDims { channels: 1, epoch_len: 6, t: 3, d: 5, c: 3 };
    let b = 4;
    let mut rng = TestRng::new(33);
    let batch = Batch {
        x: Tensor::new(
            vec![b, dims.t, dims.channels, dims.epoch_len],
            rng.vec(b * dims.t * dims.channels * dims.epoch_len),
        )
        .unwrap(),
        y_noisy: (0..b * dims.t).map(|i| (i * 7 + 2) % dims.c).collect(),
        sample_ids: (0..b as u64).collect(),
        domain_ids: vec![0, 0, 1, 1],
    };
    let cfg = ObjectiveConfig {
        lambda_ce: 1.1,
        lambda_im: 0.2,
        lambda_rec: 0.5,
        lambda_ep: 0.5,
        lambda_seq: 0.5,
        warmup: WarmupSchedule::new(20, 35).unwrap(),
        fourier_log_variant: true,
        fourier_log_epsilon: 1e-4,
        dropout: 0.0,
    };
    let mut buffers = Buffers {
        elr: ElrBuffer::new(dims.c, 0.9, 0.1).unwrap(),
        fourier: FourierBuffer::new(0.9, 0.1).unwrap(),
    };
    let warm_params = init_params(dims, 5).unwrap();
    {
        let tape = Tape::new();
        let pv = bind(&warm_params, &tape);
        let warm_ctx =
            StepContext { epoch_t: 40, dropout_seed: 0, training: true, update_buffers: true };
        total_loss(&tape, &batch, &pv, &dims, &mut buffers, &cfg, warm_ctx).unwrap();
    }
    let frozen =
        StepContext { epoch_t: 40, dropout_seed: 0, training: true, update_buffers: false };

    let params = init_params(dims, 13).unwrap();
    let flat0 = flatten(&params);

    let tape = Tape::new();
    let pv = bind(&params, &tape);
    let (loss, _) =
        total_loss(&tape, &batch, &pv, &dims, &mut buffers.clone(), &cfg, frozen).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<f64> = pv
        .all()
        .iter()
        .zip(params.tensors())
        .flat_map(|(&(_, v), (_, t))| tape.grad(v).unwrap_or_else(|| vec![0.0; t.data().len()]))
        .collect();

    let mut eval = |p: &[f64]| {
        let trial = unflatten(&params, p);
        let tape = Tape::new();
        let pv = bind(&trial, &tape);
        let (loss, _) =
            total_loss(&tape, &batch, &pv, &dims, &mut buffers.clone(), &cfg, frozen).unwrap();
        tape.scalar_value(loss)
    };
    let numeric = finite_diff(&mut eval, &flat0, STEP);
    let err = max_rel_err(&analytic, &numeric);
    assert!(err < 1e-4, "max rel err {err:.3e} ≥ 1e-4");
}
