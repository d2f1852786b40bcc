//! Domain-invariance losses: epoch-level first/second-moment matching
//! and sequence-level correlation-structure matching.
//!
//! Both losses sum over ordered domain pairs i ≠ j, so every unordered
//! pair is counted twice; the constant is absorbed by the loss weights.

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::tensor::Tensor;

/// Variance threshold below which an epoch's feature vector counts as
/// degenerate when computing correlations.
pub const VARIANCE_EPS: f64 = 1e-12;

/// Per-domain epoch-level feature matrices for one mini-batch.
pub struct DomainFeatureBatch {
    /// (domain id, n_i×D feature matrix on the tape)
    pub features: Vec<(usize, Var)>,
}

/// T×T averaged Pearson correlation matrix of one domain's sequences.
pub struct CorrelationMatrix {
    pub r: Var,
    pub domain: usize,
    /// Number of zero-variance epoch vectors encountered (their
    /// correlations were defined as 0 instead of NaN).
    pub degenerate_rows: usize,
}

/// Sample mean (D) and unbiased covariance (D×D) of an n×D matrix.
pub fn mean_cov(tape: &Tape, f: Var) -> Result<(Var, Var)> {
    let (n, d) = {
        let v = tape.value(f);
        let s = v.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("mean_cov: expected n×D, got {s:?}")));
        }
        (s[0], s[1])
    };
    if n < 2 {
        return Err(Error::Contract(format!("mean_cov: need n ≥ 2 rows, got {n}")));
    }
    let ones = tape.constant(Tensor::new(vec![1, n], vec![1.0 / n as f64; n])?);
    let mean_row = tape.matmul(ones, f)?; // 1×D
    let mean = tape.reshape(mean_row, vec![d])?;
    let neg_mean = tape.scale(mean, -1.0);
    let centered = tape.add_bias(f, neg_mean)?;
    let gram = tape.matmul(tape.transpose(centered)?, centered)?;
    let cov = tape.scale(gram, 1.0 / (n - 1) as f64);
    Ok((mean, cov))
}

/// Σ_{i≠j} ‖E(F_i) − E(F_j)‖² + ‖Cov(F_i) − Cov(F_j)‖_F².
pub fn epoch_align_loss(tape: &Tape, batch: &DomainFeatureBatch) -> Result<Var> {
    if batch.features.len() < 2 {
        return Err(Error::Contract(format!(
            "epoch alignment needs ≥ 2 domains, got {}",
            batch.features.len()
        )));
    }
    let stats: Vec<(Var, Var)> = batch
        .features
        .iter()
        .map(|&(_, f)| mean_cov(tape, f))
        .collect::<Result<_>>()?;
    let mut total = tape.scalar(0.0);
    for i in 0..stats.len() {
        for j in (i + 1)..stats.len() {
            let dm = tape.sub(stats[i].0, stats[j].0)?;
            let dc = tape.sub(stats[i].1, stats[j].1)?;
            let pair = tape.add(tape.sum_all(tape.square(dm)), tape.sum_all(tape.square(dc)))?;
            // ordered-pair sum counts each unordered pair twice
            total = tape.add(total, tape.scale(pair, 2.0))?;
        }
    }
    Ok(total)
}

/// Per-sequence T×T Pearson correlation between epoch feature vectors
/// (correlating across the feature axis), averaged over sequences.
pub fn pearson_matrix(tape: &Tape, seq_features: Var, domain: usize) -> Result<CorrelationMatrix> {
    let (n_seq, t, d) = {
        let v = tape.value(seq_features);
        let s = v.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("pearson_matrix: expected n×T×D, got {s:?}")));
        }
        (s[0], s[1], s[2])
    };
    if d < 2 {
        return Err(Error::Contract(format!("pearson_matrix: need D ≥ 2 features, got {d}")));
    }
    let mut sum: Option<Var> = None;
    let mut degenerate_rows = 0usize;
    for b in 0..n_seq {
        let x3 = tape.gather_batch(seq_features, &[b])?;
        let x = tape.reshape(x3, vec![t, d])?;
        // center each epoch vector across the feature axis
        let row_mean = tape.scale(tape.row_sum(x)?, 1.0 / d as f64);
        let centered = tape.sub_rows(x, row_mean)?;
        let sumsq = tape.row_sum(tape.square(centered))?;
        // zero-variance rows get scale 0 so their correlations are 0, never NaN
        let (mask_vals, guard_vals): (Vec<f64>, Vec<f64>) = {
            let v = tape.value(sumsq);
            v.data()
                .iter()
                .map(|&s| if s >= VARIANCE_EPS { (1.0, 0.0) } else { (0.0, 1.0) })
                .unzip()
        };
        degenerate_rows += guard_vals.iter().filter(|&&g| g > 0.0).count();
        let mask = tape.constant(Tensor::new(vec![t], mask_vals)?);
        let guard = tape.constant(Tensor::new(vec![t], guard_vals)?);
        let safe = tape.add(sumsq, guard)?;
        let inv_norm = tape.mul(tape.recip(tape.sqrt(safe)?)?, mask)?;
        let unit = tape.scale_rows(centered, inv_norm)?;
        let r = tape.matmul(unit, tape.transpose(unit)?)?;
        sum = Some(match sum {
            Some(acc) => tape.add(acc, r)?,
            None => r,
        });
    }
    let r = tape.scale(sum.expect("n_seq ≥ 1"), 1.0 / n_seq as f64);
    Ok(CorrelationMatrix { r, domain, degenerate_rows })
}

/// Σ_{i≠j} ‖R_i − R_j‖_F² over per-domain correlation matrices.
pub fn seq_align_loss(tape: &Tape, mats: &[CorrelationMatrix]) -> Result<Var> {
    if mats.len() < 2 {
        return Err(Error::Contract(format!(
            "sequence alignment needs ≥ 2 domains, got {}",
            mats.len()
        )));
    }
    let t0 = tape.value(mats[0].r).shape().to_vec();
    for m in &mats[1..] {
        if tape.value(m.r).shape() != t0.as_slice() {
            return Err(Error::Contract(format!(
                "sequence alignment: mismatched correlation shapes {:?} vs {t0:?}",
                tape.value(m.r).shape()
            )));
        }
    }
    let mut total = tape.scalar(0.0);
    for i in 0..mats.len() {
        for j in (i + 1)..mats.len() {
            let diff = tape.sub(mats[i].r, mats[j].r)?;
            total = tape.add(total, tape.scale(tape.sum_all(tape.square(diff)), 2.0))?;
        }
    }
    Ok(total)
}
