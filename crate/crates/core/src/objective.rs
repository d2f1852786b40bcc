//! Composite training objective: weighted sum of classification with
//! confidence-diversity, warm-up-gated prediction consistency, spectral
//! consistency, reconstruction, and the two domain-alignment terms, all
//! computed from one shared forward pass.

use serde::{Deserialize, Serialize};

use crate::align::{epoch_align_loss, pearson_matrix, seq_align_loss, DomainFeatureBatch};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::model::{classify, decode, encode, ModelDims, ParamVars};
use crate::regularizers::{
    elr_frozen_loss, elr_update_and_loss, ff_cdr_loss, fourier_frozen_loss, fourier_loss_log,
    fourier_update_and_loss, warmup_alpha, TokenId, WarmupSchedule,
};
use crate::tensor::Tensor;

/// One mini-batch of sequences with stable identities.
#[derive(Clone, Debug)]
pub struct Batch {
    /// B×T×channels×epoch_len input signal.
    pub x: Tensor,
    /// B·T noisy labels in epoch order.
    pub y_noisy: Vec<usize>,
    /// Stable per-sequence ids, one per batch row.
    pub sample_ids: Vec<u64>,
    /// Source domain of each batch row.
    pub domain_ids: Vec<usize>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        let s = self.x.shape();
        if s.len() != 4 || s[1] != dims.t || s[2] != dims.channels || s[3] != dims.epoch_len {
            return Err(Error::Shape(format!(
                "batch: expected B×{}×{}×{} input, got {s:?}",
                dims.t, dims.channels, dims.epoch_len
            )));
        }
        let b = s[0];
        if self.sample_ids.len() != b || self.domain_ids.len() != b {
            return Err(Error::Shape(format!(
                "batch: {b} rows but {} ids and {} domains",
                self.sample_ids.len(),
                self.domain_ids.len()
            )));
        }
        if self.y_noisy.len() != b * dims.t {
            return Err(Error::Shape(format!(
                "batch: {} labels for {b}×{} epochs",
                self.y_noisy.len(),
                dims.t
            )));
        }
        if let Some(&y) = self.y_noisy.iter().find(|&&y| y >= dims.c) {
            return Err(Error::Data(format!("batch: label {y} out of range [0, {})", dims.c)));
        }
        Ok(())
    }

    /// (sample_id, epoch_position) for every epoch token in batch order.
    pub fn token_ids(&self, t: usize) -> Vec<TokenId> {
        self.sample_ids
            .iter()
            .flat_map(|&id| (0..t).map(move |pos| (id, pos)))
            .collect()
    }

    /// Batch-row indices grouped by domain id, ascending.
    pub fn domain_partition(&self) -> Vec<(usize, Vec<usize>)> {
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (row, &d) in self.domain_ids.iter().enumerate() {
            groups.entry(d).or_default().push(row);
        }
        groups.into_iter().collect()
    }
}

/// EMA state shared across training steps.
#[derive(Clone, Debug)]
pub struct Buffers {
    pub elr: crate::regularizers::ElrBuffer,
    pub fourier: crate::regularizers::FourierBuffer,
}

/// Loss-composition weights and schedule; λ_ELR, m_ELR, λ_f, m_f live
/// inside the buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda_ce: f64,
    pub lambda_im: f64,
    /// λ₁, reconstruction.
    pub lambda_rec: f64,
    /// λ₂, epoch-level alignment.
    pub lambda_ep: f64,
    /// λ₃, sequence-level alignment.
    pub lambda_seq: f64,
    pub warmup: WarmupSchedule,
    /// Use −log(1 − clip(cos)) instead of 1 − max(0, cos).
    pub fourier_log_variant: bool,
    pub fourier_log_epsilon: f64,
    pub dropout: f64,
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ce", self.lambda_ce),
            ("lambda_im", self.lambda_im),
            ("lambda_rec", self.lambda_rec),
            ("lambda_ep", self.lambda_ep),
            ("lambda_seq", self.lambda_seq),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.fourier_log_epsilon) || self.fourier_log_epsilon == 0.0 {
            return Err(Error::Config(format!(
                "fourier_log_epsilon {} outside (0, 1)",
                self.fourier_log_epsilon
            )));
        }
        Ok(())
    }
}

/// Per-step mode flags for one `total_loss` evaluation.
#[derive(Clone, Copy, Debug)]
pub struct StepContext {
    pub epoch_t: usize,
    pub dropout_seed: u64,
    pub training: bool,
    /// When false, EMA buffers are read but never written; targets for
    /// unseen ids fall back to their initialization values.
    pub update_buffers: bool,
}

/// Weights in effect for one step.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub alpha: f64,
    pub lambda_rec: f64,
    pub lambda_ep: f64,
    pub lambda_seq: f64,
    pub lambda_im: f64,
    pub lambda_elr: f64,
    pub lambda_f: f64,
}

/// Raw per-term values plus the weighted total. `elr` and `felr`
/// already carry λ_ELR and λ_f internally; the remaining terms are
/// pre-weighting.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub cls_ffcdr: f64,
    pub elr: f64,
    pub felr: f64,
    pub rec: f64,
    pub ep_align: f64,
    pub seq_align: f64,
    pub weighted_total: f64,
    pub weights: LossWeights,
    pub degenerate_spectra: usize,
}

impl LossBreakdown {
    /// λ_ce·cls + α·elr + felr + λ₁·rec + λ₂·ep + λ₃·seq.
    pub fn recompose(&self) -> f64 {
        let w = &self.weights;
        w.lambda_ce * self.cls_ffcdr
            + w.alpha * self.elr
            + self.felr
            + w.lambda_rec * self.rec
            + w.lambda_ep * self.ep_align
            + w.lambda_seq * self.seq_align
    }
}

/// (1/T)·Σ over all entries of ‖x − x̂‖², averaged over the batch.
pub fn reconstruction_loss(tape: &Tape, x: Var, xhat: Var) -> Result<Var> {
    let (batch, t) = {
        let vx = tape.value(x);
        let vh = tape.value(xhat);
        if vx.shape() != vh.shape() {
            return Err(Error::Shape(format!(
                "reconstruction: {:?} vs {:?}",
                vx.shape(),
                vh.shape()
            )));
        }
        let s = vx.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("reconstruction: expected B×T×ch×E, got {s:?}")));
        }
        (s[0], s[1])
    };
    let diff = tape.sub(x, xhat)?;
    Ok(tape.scale(tape.sum_all(tape.square(diff)), 1.0 / (batch * t) as f64))
}

/// One shared forward pass producing every term of the composite
/// objective plus its breakdown. Alignment terms require ≥ 2 distinct
/// domains in the batch.
pub fn total_loss(
    tape: &Tape,
    batch: &Batch,
    pv: &ParamVars,
    dims: &ModelDims,
    buffers: &mut Buffers,
    cfg: &ObjectiveConfig,
    ctx: StepContext,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    batch.validate(dims)?;
    let b = batch.batch_size();
    let alpha = warmup_alpha(cfg.warmup, ctx.epoch_t);

    let x = tape.constant(batch.x.clone());
    let f = encode(tape, x, pv, dims, cfg.dropout, ctx.training, ctx.dropout_seed)?;
    let zero = tape.scalar(0.0);
    let mut total = zero;
    let mut bd = LossBreakdown {
        cls_ffcdr: 0.0,
        elr: 0.0,
        felr: 0.0,
        rec: 0.0,
        ep_align: 0.0,
        seq_align: 0.0,
        weighted_total: 0.0,
        weights: LossWeights {
            lambda_ce: cfg.lambda_ce,
            alpha,
            lambda_rec: cfg.lambda_rec,
            lambda_ep: cfg.lambda_ep,
            lambda_seq: cfg.lambda_seq,
            lambda_im: cfg.lambda_im,
            lambda_elr: buffers.elr.lambda,
            lambda_f: buffers.fourier.lambda,
        },
        degenerate_spectra: 0,
    };

    let need_probs = cfg.lambda_ce > 0.0 || buffers.elr.lambda > 0.0;
    let z = if need_probs { Some(classify(tape, f, pv, dims)?) } else { None };

    if cfg.lambda_ce > 0.0 {
        let z = z.expect("logits");
        let cls = ff_cdr_loss(tape, z, &batch.y_noisy, cfg.lambda_im)?;
        bd.cls_ffcdr = tape.scalar_value(cls);
        total = tape.add(total, tape.scale(cls, cfg.lambda_ce))?;
    }

    if buffers.elr.lambda > 0.0 {
        let z = z.expect("logits");
        let flat = tape.reshape(z, vec![b * dims.t, dims.c])?;
        let p = tape.softmax(flat)?;
        let ids = batch.token_ids(dims.t);
        let elr = if ctx.update_buffers {
            elr_update_and_loss(&mut buffers.elr, tape, &ids, p)?
        } else {
            elr_frozen_loss(&buffers.elr, tape, &ids, p)?
        };
        bd.elr = tape.scalar_value(elr);
        total = tape.add(total, tape.scale(elr, alpha))?;
    }

    if buffers.fourier.lambda > 0.0 {
        let m_cur = tape.rfft_mag(f)?;
        let (felr, degenerate) = if ctx.update_buffers {
            if cfg.fourier_log_variant {
                fourier_loss_log(
                    &mut buffers.fourier,
                    tape,
                    &batch.sample_ids,
                    m_cur,
                    cfg.fourier_log_epsilon,
                )?
            } else {
                fourier_update_and_loss(&mut buffers.fourier, tape, &batch.sample_ids, m_cur)?
            }
        } else {
            let eps = cfg.fourier_log_variant.then_some(cfg.fourier_log_epsilon);
            fourier_frozen_loss(&buffers.fourier, tape, &batch.sample_ids, m_cur, eps)?
        };
        bd.felr = tape.scalar_value(felr);
        bd.degenerate_spectra = degenerate;
        total = tape.add(total, felr)?;
    }

    if cfg.lambda_rec > 0.0 {
        let xhat = decode(tape, f, pv, dims)?;
        let rec = reconstruction_loss(tape, x, xhat)?;
        bd.rec = tape.scalar_value(rec);
        total = tape.add(total, tape.scale(rec, cfg.lambda_rec))?;
    }

    if cfg.lambda_ep > 0.0 || cfg.lambda_seq > 0.0 {
        let partition = batch.domain_partition();
        if partition.len() < 2 {
            return Err(Error::Contract(format!(
                "alignment requires ≥ 2 source domains per batch, got {}",
                partition.len()
            )));
        }
        if cfg.lambda_ep > 0.0 {
            let mut features = Vec::with_capacity(partition.len());
            for (domain, rows) in &partition {
                let sub = tape.gather_batch(f, rows)?;
                let flat = tape.reshape(sub, vec![rows.len() * dims.t, dims.d])?;
                features.push((*domain, flat));
            }
            let ep = epoch_align_loss(tape, &DomainFeatureBatch { features })?;
            bd.ep_align = tape.scalar_value(ep);
            total = tape.add(total, tape.scale(ep, cfg.lambda_ep))?;
        }
        if cfg.lambda_seq > 0.0 {
            let mats = partition
                .iter()
                .map(|(domain, rows)| {
                    let sub = tape.gather_batch(f, rows)?;
                    pearson_matrix(tape, sub, *domain)
                })
                .collect::<Result<Vec<_>>>()?;
            let seq = seq_align_loss(tape, &mats)?;
            bd.seq_align = tape.scalar_value(seq);
            total = tape.add(total, tape.scale(seq, cfg.lambda_seq))?;
        }
    }

    bd.weighted_total = tape.scalar_value(total);
    let recomposed = bd.recompose();
    debug_assert!(
        (bd.weighted_total - recomposed).abs() <= 1e-10 * bd.weighted_total.abs().max(1.0),
        "breakdown drifted from total: {} vs {recomposed}",
        bd.weighted_total
    );
    Ok((total, bd))
}
