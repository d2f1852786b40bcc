//! Real-input DFT magnitudes along the temporal axis.
//!
//! The forward convention is unnormalized: X_k = Σ_t x_t·e^{−2πikt/T}.
//! Arbitrary temporal lengths are supported (the planner falls back to
//! Bluestein for awkward sizes).

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Norms below this are treated as degenerate when ℓ2-normalizing.
pub const DEGENERACY_EPS: f64 = 1e-12;

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<usize, Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn with_plan<R>(len: usize, f: impl FnOnce(&Arc<dyn Fft<f64>>) -> R) -> R {
    PLANS.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        let plan = cache.entry(len).or_insert_with(|| planner.plan_fft_forward(len)).clone();
        drop(guard);
        f(&plan)
    })
}

/// Magnitude spectra of a B×T×D feature block: B×(⌊T/2⌋+1)×D.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub mags: Tensor,
    pub source_len: usize,
}

impl Spectrum {
    pub fn batch(&self) -> usize {
        self.mags.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.mags.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.mags.shape()[2]
    }

    /// Flattened (row-major) magnitudes of one batch entry.
    pub fn flat(&self, b: usize) -> &[f64] {
        let n = self.bins() * self.width();
        &self.mags.data()[b * n..(b + 1) * n]
    }
}

/// Forward kernel shared by the tape op and the pure entry point.
/// Returns (magnitudes, saved re/im parts for the backward rule).
pub(crate) fn rfft_mag_forward(
    data: &[f64],
    batch: usize,
    t: usize,
    width: usize,
) -> (Vec<f64>, Vec<f64>) {
    let bins = t / 2 + 1;
    let out_len = batch * bins * width;
    let mut mags = vec![0.0; out_len];
    let mut re_im = vec![0.0; 2 * out_len];
    with_plan(t, |plan| {
        let mut buf = vec![Complex::new(0.0, 0.0); t];
        let mut scratch = vec![Complex::new(0.0, 0.0); plan.get_inplace_scratch_len()];
        for b in 0..batch {
            for d in 0..width {
                for (ti, c) in buf.iter_mut().enumerate() {
                    *c = Complex::new(data[(b * t + ti) * width + d], 0.0);
                }
                plan.process_with_scratch(&mut buf, &mut scratch);
                for k in 0..bins {
                    let idx = (b * bins + k) * width + d;
                    mags[idx] = buf[k].norm();
                    re_im[idx] = buf[k].re;
                    re_im[out_len + idx] = buf[k].im;
                }
            }
        }
    });
    (mags, re_im)
}

/// Adjoint of the magnitude map: d|X_k|/dx_t = (Re·cos(ωkt) − Im·sin(ωkt))/|X_k|.
/// Zero-magnitude bins contribute nothing.
pub(crate) fn rfft_mag_backward(
    dout: &[f64],
    mags: &[f64],
    re_im: &[f64],
    batch: usize,
    t: usize,
    width: usize,
) -> Vec<f64> {
    let bins = t / 2 + 1;
    let out_len = batch * bins * width;
    let omega = std::f64::consts::TAU / t as f64;
    let mut grad = vec![0.0; batch * t * width];
    for b in 0..batch {
        for d in 0..width {
            for k in 0..bins {
                let idx = (b * bins + k) * width + d;
                let m = mags[idx];
                if m == 0.0 || dout[idx] == 0.0 {
                    continue;
                }
                let scale = dout[idx] / m;
                let (re, im) = (re_im[idx], re_im[out_len + idx]);
                for ti in 0..t {
                    let (s, c) = (omega * k as f64 * ti as f64).sin_cos();
                    grad[(b * t + ti) * width + d] += scale * (re * c - im * s);
                }
            }
        }
    }
    grad
}

/// |rFFT| of a B×T×D tensor along the temporal axis, outside any tape.
pub fn rfft_magnitude(f: &Tensor) -> Result<Spectrum> {
    let s = f.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("rfft_magnitude: expected B×T×D, got {s:?}")));
    }
    let (batch, t, width) = (s[0], s[1], s[2]);
    if t < 2 {
        return Err(Error::Contract(format!("rfft_magnitude: temporal length {t} < 2")));
    }
    if !f.all_finite() {
        return Err(Error::Domain("rfft_magnitude: non-finite input".into()));
    }
    let (mags, _) = rfft_mag_forward(f.data(), batch, t, width);
    Ok(Spectrum { mags: Tensor::new(vec![batch, t / 2 + 1, width], mags)?, source_len: t })
}

/// Row-major flattening of one batch entry's spectrum, divided by its ℓ2
/// norm. Returns the unit vector and a degeneracy flag; a near-zero
/// spectrum yields the zero vector with the flag set.
pub fn normalize_flatten(s: &Spectrum, b: usize) -> (Vec<f64>, bool) {
    let flat = s.flat(b);
    let norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < DEGENERACY_EPS {
        (vec![0.0; flat.len()], true)
    } else {
        (flat.iter().map(|v| v / norm).collect(), false)
    }
}
