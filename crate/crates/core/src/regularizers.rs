//! Noise-robust regularizers: EMA-anchored prediction consistency in the
//! time domain, EMA-anchored spectral consistency in the frequency
//! domain (plus its log variant), the confidence-diversity penalty, and
//! the linear warm-up schedule.
//!
//! Both EMA buffers are stop-gradient targets: the update consumes the
//! current forward values as constants, and the loss differentiates only
//! through the current prediction or spectrum.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::spectral::DEGENERACY_EPS;
use crate::tensor::Tensor;

/// Inner products are clipped below this bound before the log so the
/// penalty stays finite when the prediction matches its target exactly.
pub const ELR_INNER_CLIP: f64 = 1.0 - 1e-7;

const PROB_TOL: f64 = 1e-8;

fn check_probability_rows(data: &[f64], classes: usize, tag: &str) -> Result<()> {
    for (i, row) in data.chunks(classes).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > PROB_TOL || row.iter().any(|&p| p < -PROB_TOL) {
            return Err(Error::Contract(format!(
                "{tag}: row {i} is not a probability vector (sum {s})"
            )));
        }
    }
    Ok(())
}

/// Stable identity of one prediction token: (sample id, epoch position).
pub type TokenId = (u64, usize);

/// Per-token EMA targets for prediction-consistency regularization.
#[derive(Clone, Debug)]
pub struct ElrBuffer {
    pub targets: BTreeMap<TokenId, Vec<f64>>,
    pub momentum: f64,
    pub lambda: f64,
    classes: usize,
}

impl ElrBuffer {
    pub fn new(classes: usize, momentum: f64, lambda: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) || momentum == 0.0 {
            return Err(Error::Contract(format!("ELR momentum {momentum} outside (0, 1)")));
        }
        if lambda < 0.0 {
            return Err(Error::Contract(format!("negative ELR weight {lambda}")));
        }
        Ok(ElrBuffer { targets: BTreeMap::new(), momentum, lambda, classes })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// EMA-update the targets for `ids` from current probabilities
    /// (taken as constants) and return the per-token targets in call
    /// order, post-update.
    fn update(&mut self, ids: &[TokenId], probs: &[f64]) -> Vec<f64> {
        let c = self.classes;
        let m = self.momentum;
        let mut out = Vec::with_capacity(ids.len() * c);
        for (&id, p) in ids.iter().zip(probs.chunks(c)) {
            let target = self
                .targets
                .entry(id)
                .or_insert_with(|| vec![1.0 / c as f64; c]);
            for (t, &pv) in target.iter_mut().zip(p) {
                *t = m * *t + (1.0 - m) * pv;
            }
            out.extend_from_slice(target);
        }
        out
    }
}

/// Eq-style penalty −λ·mean_n log(1 − ⟨p_n, P_n⟩) for explicit targets,
/// differentiating through `p` only.
pub fn elr_loss(tape: &Tape, p: Var, targets: &[f64], lambda: f64) -> Result<Var> {
    let (rows, classes) = {
        let v = tape.value(p);
        let s = v.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("elr_loss: expected N×C, got {s:?}")));
        }
        (s[0], s[1])
    };
    if targets.len() != rows * classes {
        return Err(Error::Shape(format!(
            "elr_loss: {} target values for {rows}×{classes} predictions",
            targets.len()
        )));
    }
    let target = tape.constant(Tensor::new(vec![rows, classes], targets.to_vec())?);
    let inner = tape.row_sum(tape.mul(p, target)?)?;
    let clipped = tape.clamp(inner, -1.0, ELR_INNER_CLIP);
    let one_minus = tape.add_const(tape.scale(clipped, -1.0), 1.0);
    let loss = tape.scale(tape.mean_all(tape.log(one_minus)?), -lambda);
    Ok(loss)
}

/// Update the buffer from the current softmax probabilities and return
/// the penalty. Targets see the pre-update probabilities as constants;
/// first-seen tokens start from the uniform vector.
pub fn elr_update_and_loss(
    buf: &mut ElrBuffer,
    tape: &Tape,
    ids: &[TokenId],
    p: Var,
) -> Result<Var> {
    let (rows, classes, probs) = {
        let v = tape.value(p);
        let s = v.shape();
        if s.len() != 2 || s[1] != buf.classes {
            return Err(Error::Shape(format!(
                "elr: expected N×{} probabilities, got {s:?}",
                buf.classes
            )));
        }
        (s[0], s[1], v.data().to_vec())
    };
    if ids.len() != rows {
        return Err(Error::Shape(format!("elr: {rows} rows but {} ids", ids.len())));
    }
    {
        let mut sorted = ids.to_vec();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("elr: duplicate token ids within one call".into()));
        }
    }
    check_probability_rows(&probs, classes, "elr")?;
    let targets = buf.update(ids, &probs);
    elr_loss(tape, p, &targets, buf.lambda)
}

/// Penalty against the currently stored targets without touching the
/// buffer; unseen tokens use the uniform initialization. Matches what
/// [`elr_update_and_loss`] would return if its EMA step were skipped.
pub fn elr_frozen_loss(buf: &ElrBuffer, tape: &Tape, ids: &[TokenId], p: Var) -> Result<Var> {
    let (rows, classes) = {
        let v = tape.value(p);
        let s = v.shape();
        if s.len() != 2 || s[1] != buf.classes {
            return Err(Error::Shape(format!(
                "elr: expected N×{} probabilities, got {s:?}",
                buf.classes
            )));
        }
        (s[0], s[1])
    };
    if ids.len() != rows {
        return Err(Error::Shape(format!("elr: {rows} rows but {} ids", ids.len())));
    }
    let uniform = vec![1.0 / classes as f64; classes];
    let mut targets = Vec::with_capacity(rows * classes);
    for id in ids {
        targets.extend_from_slice(buf.targets.get(id).unwrap_or(&uniform));
    }
    elr_loss(tape, p, &targets, buf.lambda)
}

/// Per-sequence EMA targets of raw (unnormalized) magnitude spectra.
#[derive(Clone, Debug)]
pub struct FourierBuffer {
    pub targets: BTreeMap<u64, Vec<f64>>,
    pub momentum: f64,
    pub lambda: f64,
    spectrum_len: Option<usize>,
}

impl FourierBuffer {
    pub fn new(momentum: f64, lambda: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) || momentum == 0.0 {
            return Err(Error::Contract(format!("spectral momentum {momentum} outside (0, 1)")));
        }
        if lambda < 0.0 {
            return Err(Error::Contract(format!("negative spectral weight {lambda}")));
        }
        Ok(FourierBuffer { targets: BTreeMap::new(), momentum, lambda, spectrum_len: None })
    }

    pub fn spectrum_len(&self) -> Option<usize> {
        self.spectrum_len
    }

    pub(crate) fn set_spectrum_len(&mut self, len: usize) {
        self.spectrum_len = Some(len);
    }

    /// EMA-update per-sequence targets from raw magnitudes; first-seen
    /// ids adopt the current magnitudes outright. Returns the
    /// ℓ2-normalized targets in call order plus a per-sequence validity
    /// mask (0 where either side is degenerate).
    fn update(&mut self, ids: &[u64], mags: &[f64], flat_len: usize) -> Result<(Vec<f64>, Vec<f64>, usize)> {
        match self.spectrum_len {
            None => self.spectrum_len = Some(flat_len),
            Some(expected) if expected != flat_len => {
                return Err(Error::Contract(format!(
                    "spectral buffer holds length-{expected} spectra, got {flat_len}"
                )));
            }
            Some(_) => {}
        }
        let m = self.momentum;
        let mut normalized = Vec::with_capacity(ids.len() * flat_len);
        let mut mask = Vec::with_capacity(ids.len());
        let mut degenerate = 0usize;
        for (&id, cur) in ids.iter().zip(mags.chunks(flat_len)) {
            let target = match self.targets.entry(id) {
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(cur.to_vec())
                }
                std::collections::btree_map::Entry::Occupied(e) => {
                    let t = e.into_mut();
                    for (tv, &cv) in t.iter_mut().zip(cur) {
                        *tv = m * *tv + (1.0 - m) * cv;
                    }
                    t
                }
            };
            let t_norm = target.iter().map(|v| v * v).sum::<f64>().sqrt();
            let c_norm = cur.iter().map(|v| v * v).sum::<f64>().sqrt();
            if t_norm < DEGENERACY_EPS || c_norm < DEGENERACY_EPS {
                normalized.extend(std::iter::repeat(0.0).take(flat_len));
                mask.push(0.0);
                degenerate += 1;
            } else {
                normalized.extend(target.iter().map(|v| v / t_norm));
                mask.push(1.0);
            }
        }
        Ok((normalized, mask, degenerate))
    }

    /// Read-only counterpart of `update`: normalized stored targets (or
    /// the current magnitudes for unseen ids) without any EMA step.
    fn frozen_targets(
        &self,
        ids: &[u64],
        mags: &[f64],
        flat_len: usize,
    ) -> Result<(Vec<f64>, Vec<f64>, usize)> {
        if let Some(expected) = self.spectrum_len {
            if expected != flat_len {
                return Err(Error::Contract(format!(
                    "spectral buffer holds length-{expected} spectra, got {flat_len}"
                )));
            }
        }
        let mut normalized = Vec::with_capacity(ids.len() * flat_len);
        let mut mask = Vec::with_capacity(ids.len());
        let mut degenerate = 0usize;
        for (&id, cur) in ids.iter().zip(mags.chunks(flat_len)) {
            let target: &[f64] = self.targets.get(&id).map(|t| t.as_slice()).unwrap_or(cur);
            let t_norm = target.iter().map(|v| v * v).sum::<f64>().sqrt();
            let c_norm = cur.iter().map(|v| v * v).sum::<f64>().sqrt();
            if t_norm < DEGENERACY_EPS || c_norm < DEGENERACY_EPS {
                normalized.extend(std::iter::repeat(0.0).take(flat_len));
                mask.push(0.0);
                degenerate += 1;
            } else {
                normalized.extend(target.iter().map(|v| v / t_norm));
                mask.push(1.0);
            }
        }
        Ok((normalized, mask, degenerate))
    }
}

fn current_mags(tape: &Tape, m_cur: Var, n_ids: usize) -> Result<(usize, usize, Vec<f64>)> {
    let (batch, flat_len, mags) = {
        let v = tape.value(m_cur);
        let s = v.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("spectral loss: expected B×K×D magnitudes, got {s:?}")));
        }
        (s[0], s[1] * s[2], v.data().to_vec())
    };
    if n_ids != batch {
        return Err(Error::Shape(format!("spectral loss: {batch} spectra but {n_ids} ids")));
    }
    if !mags.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain("spectral loss: non-finite magnitudes".into()));
    }
    Ok((batch, flat_len, mags))
}

/// On-tape cosine of the current spectra against constant normalized
/// targets, plus the degeneracy mask as a tape constant.
fn cosine_graph(
    tape: &Tape,
    m_cur: Var,
    batch: usize,
    flat_len: usize,
    targets: Vec<f64>,
    mask_vals: Vec<f64>,
) -> Result<(Var, Var)> {
    let flat = tape.reshape(m_cur, vec![batch, flat_len])?;
    let sumsq = tape.row_sum(tape.square(flat))?;
    // guard degenerate rows: their normalized current spectrum becomes 0
    let guard_vals: Vec<f64> = mask_vals.iter().map(|&m| 1.0 - m).collect();
    let mask = tape.constant(Tensor::new(vec![batch], mask_vals)?);
    let guard = tape.constant(Tensor::new(vec![batch], guard_vals)?);
    let safe = tape.add(sumsq, guard)?;
    let inv_norm = tape.mul(tape.recip(tape.sqrt(safe)?)?, mask)?;
    let unit = tape.scale_rows(flat, inv_norm)?;
    let target = tape.constant(Tensor::new(vec![batch, flat_len], targets)?);
    let cos = tape.row_sum(tape.mul(unit, target)?)?;
    Ok((cos, mask))
}

fn plain_penalty(tape: &Tape, cos: Var, mask: Var, lambda: f64) -> Result<Var> {
    let penalty = tape.add_const(tape.scale(tape.relu(cos), -1.0), 1.0);
    Ok(tape.scale(tape.mean_all(tape.mul(penalty, mask)?), lambda))
}

fn log_penalty(tape: &Tape, cos: Var, mask: Var, lambda: f64, epsilon: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&epsilon) || epsilon == 0.0 {
        return Err(Error::Contract(format!("log-variant epsilon {epsilon} outside (0, 1)")));
    }
    let clipped = tape.clamp(cos, 0.0, 1.0 - epsilon);
    let one_minus = tape.add_const(tape.scale(clipped, -1.0), 1.0);
    let neg_log = tape.scale(tape.log(one_minus)?, -1.0);
    Ok(tape.scale(tape.mean_all(tape.mul(neg_log, mask)?), lambda))
}

/// λ_f·mean_b[1 − max(0, cos)] with EMA target update; gradient flows
/// through the current spectra only. Returns the loss and the number of
/// degenerate (zero-norm) sequences, which contribute 0.
pub fn fourier_update_and_loss(
    buf: &mut FourierBuffer,
    tape: &Tape,
    ids: &[u64],
    m_cur: Var,
) -> Result<(Var, usize)> {
    let (batch, flat_len, mags) = current_mags(tape, m_cur, ids.len())?;
    let (targets, mask_vals, degenerate) = buf.update(ids, &mags, flat_len)?;
    let (cos, mask) = cosine_graph(tape, m_cur, batch, flat_len, targets, mask_vals)?;
    Ok((plain_penalty(tape, cos, mask, buf.lambda)?, degenerate))
}

/// Log variant: −λ_f·mean_b log(1 − clip(cos, 0, 1−ε)).
pub fn fourier_loss_log(
    buf: &mut FourierBuffer,
    tape: &Tape,
    ids: &[u64],
    m_cur: Var,
    epsilon: f64,
) -> Result<(Var, usize)> {
    let (batch, flat_len, mags) = current_mags(tape, m_cur, ids.len())?;
    let (targets, mask_vals, degenerate) = buf.update(ids, &mags, flat_len)?;
    let (cos, mask) = cosine_graph(tape, m_cur, batch, flat_len, targets, mask_vals)?;
    Ok((log_penalty(tape, cos, mask, buf.lambda, epsilon)?, degenerate))
}

/// Penalty against the stored targets without updating the buffer;
/// unseen ids score against the current spectrum (cos = 1). Uses the
/// log variant when `log_epsilon` is given.
pub fn fourier_frozen_loss(
    buf: &FourierBuffer,
    tape: &Tape,
    ids: &[u64],
    m_cur: Var,
    log_epsilon: Option<f64>,
) -> Result<(Var, usize)> {
    let (batch, flat_len, mags) = current_mags(tape, m_cur, ids.len())?;
    let (targets, mask_vals, degenerate) = buf.frozen_targets(ids, &mags, flat_len)?;
    let (cos, mask) = cosine_graph(tape, m_cur, batch, flat_len, targets, mask_vals)?;
    let loss = match log_epsilon {
        Some(eps) => log_penalty(tape, cos, mask, buf.lambda, eps)?,
        None => plain_penalty(tape, cos, mask, buf.lambda)?,
    };
    Ok((loss, degenerate))
}

/// Mean per-sample prediction entropy minus the entropy of the
/// batch-mean prediction (natural log, 0·log 0 := 0). Negative when
/// predictions are individually confident but collectively diverse.
pub fn cdr_penalty(tape: &Tape, p_seq: Var) -> Result<Var> {
    let (batch, classes) = {
        let v = tape.value(p_seq);
        let s = v.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("cdr_penalty: expected B×C, got {s:?}")));
        }
        check_probability_rows(v.data(), s[1], "cdr_penalty")?;
        (s[0], s[1])
    };
    // p entries can carry tiny negative float noise; clamp for xlogx
    let p = tape.clamp(p_seq, 0.0, 1.0);
    let mean_entropy = tape.scale(tape.sum_all(tape.xlogx(p)?), -1.0 / batch as f64);
    let ones = tape.constant(Tensor::new(vec![1, batch], vec![1.0 / batch as f64; batch])?);
    let p_bar = tape.matmul(ones, p)?;
    let _ = classes;
    let bar_entropy = tape.scale(tape.sum_all(tape.xlogx(p_bar)?), -1.0);
    tape.sub(mean_entropy, bar_entropy)
}

/// Epoch-level cross-entropy (summed over epochs, averaged over the
/// batch) plus λ_IM times the confidence-diversity penalty of the
/// time-averaged softmax.
pub fn ff_cdr_loss(tape: &Tape, z: Var, y_noisy: &[usize], lambda_im: f64) -> Result<Var> {
    let (batch, t, classes) = {
        let v = tape.value(z);
        let s = v.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("ff_cdr_loss: expected B×T×C logits, got {s:?}")));
        }
        (s[0], s[1], s[2])
    };
    if y_noisy.len() != batch * t {
        return Err(Error::Shape(format!(
            "ff_cdr_loss: {} labels for {batch}×{t} epochs",
            y_noisy.len()
        )));
    }
    let flat = tape.reshape(z, vec![batch * t, classes])?;
    let per_token = tape.cross_entropy_logits(flat, y_noisy)?;
    let ce = tape.scale(tape.sum_all(per_token), 1.0 / batch as f64);
    if lambda_im == 0.0 {
        return Ok(ce);
    }
    let probs = tape.softmax(flat)?;
    let probs3 = tape.reshape(probs, vec![batch, t, classes])?;
    let avg_mix = tape.constant(Tensor::new(vec![1, t], vec![1.0 / t as f64; t])?);
    let p_seq = tape.reshape(tape.time_mix(probs3, avg_mix)?, vec![batch, classes])?;
    let cdr = cdr_penalty(tape, p_seq)?;
    tape.add(ce, tape.scale(cdr, lambda_im))
}

/// Linear ramp of a regularizer weight over a training-epoch interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupSchedule {
    pub t_start: usize,
    pub t_end: usize,
}

impl WarmupSchedule {
    pub fn new(t_start: usize, t_end: usize) -> Result<Self> {
        if t_start >= t_end {
            return Err(Error::Contract(format!(
                "warm-up start {t_start} must precede end {t_end}"
            )));
        }
        Ok(WarmupSchedule { t_start, t_end })
    }
}

/// clamp((t − t_start)/(t_end − t_start), 0, 1).
pub fn warmup_alpha(sched: WarmupSchedule, t: usize) -> f64 {
    let num = t as f64 - sched.t_start as f64;
    let den = (sched.t_end - sched.t_start) as f64;
    (num / den).clamp(0.0, 1.0)
}
