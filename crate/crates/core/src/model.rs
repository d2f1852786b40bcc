//! Sequence model: per-epoch two-layer encoder, learned temporal mixing
//! across the sequence axis, a mirrored reconstruction decoder, and an
//! epoch-wise linear classifier.
//!
//! Parameters live in [`ModelParams`] as plain tensors; each training
//! step binds them onto a fresh tape as leaves via [`bind`].

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::tensor::Tensor;

/// Shape configuration shared by the model and the data generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub channels: usize,
    pub epoch_len: usize,
    pub t: usize,
    pub d: usize,
    pub c: usize,
}

impl ModelDims {
    /// 2 input channels, 64 samples per epoch, 8 epochs per sequence,
    /// 32-wide features, 5 classes.
    pub fn desk_default() -> Self {
        ModelDims { channels: 2, epoch_len: 64, t: 8, d: 32, c: 5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.epoch_len == 0 || self.d == 0 {
            return Err(Error::Contract(format!("dimensions must be positive: {self:?}")));
        }
        if self.c < 2 {
            return Err(Error::Contract(format!("need ≥ 2 classes, got {}", self.c)));
        }
        if self.t < 2 {
            return Err(Error::Contract(format!("need ≥ 2 epochs per sequence, got {}", self.t)));
        }
        Ok(())
    }

    /// Flattened per-epoch input width.
    pub fn input_len(&self) -> usize {
        self.channels * self.epoch_len
    }

    /// Encoder hidden width; wider than the feature dim so the per-epoch
    /// embedding is not the capacity bottleneck.
    pub fn hidden(&self) -> usize {
        3 * self.d
    }
}

/// All learnable tensors. Weights use the scaled uniform bound
/// ±√(6/(fan_in+fan_out)); biases start at zero.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub enc_w1: Tensor,
    pub enc_b1: Tensor,
    pub enc_w2: Tensor,
    pub enc_b2: Tensor,
    pub mixer: Tensor,
    pub mix_w: Tensor,
    pub mix_b: Tensor,
    pub dec_w1: Tensor,
    pub dec_b1: Tensor,
    pub dec_w2: Tensor,
    pub dec_b2: Tensor,
    pub cls_w: Tensor,
    pub cls_b: Tensor,
}

/// Field names in a fixed order, shared by the optimizer, checkpoints,
/// and gradient plumbing.
pub const PARAM_NAMES: [&str; 13] = [
    "enc_w1", "enc_b1", "enc_w2", "enc_b2", "mixer", "mix_w", "mix_b", "dec_w1", "dec_b1",
    "dec_w2", "dec_b2", "cls_w", "cls_b",
];

impl ModelParams {
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("enc_w1", &self.enc_w1),
            ("enc_b1", &self.enc_b1),
            ("enc_w2", &self.enc_w2),
            ("enc_b2", &self.enc_b2),
            ("mixer", &self.mixer),
            ("mix_w", &self.mix_w),
            ("mix_b", &self.mix_b),
            ("dec_w1", &self.dec_w1),
            ("dec_b1", &self.dec_b1),
            ("dec_w2", &self.dec_w2),
            ("dec_b2", &self.dec_b2),
            ("cls_w", &self.cls_w),
            ("cls_b", &self.cls_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("enc_w1", &mut self.enc_w1),
            ("enc_b1", &mut self.enc_b1),
            ("enc_w2", &mut self.enc_w2),
            ("enc_b2", &mut self.enc_b2),
            ("mixer", &mut self.mixer),
            ("mix_w", &mut self.mix_w),
            ("mix_b", &mut self.mix_b),
            ("dec_w1", &mut self.dec_w1),
            ("dec_b1", &mut self.dec_b1),
            ("dec_w2", &mut self.dec_w2),
            ("dec_b2", &mut self.dec_b2),
            ("cls_w", &mut self.cls_w),
            ("cls_b", &mut self.cls_b),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data().len()).sum()
    }
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, shape: Vec<usize>) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("xavier shape").with_grad()
}

fn zeros_grad(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape).with_grad()
}

/// Identity plus scaled Xavier noise, for layers that should start as
/// near-passthrough maps.
fn near_identity(rng: &mut ChaCha8Rng, n: usize, noise: f64) -> Tensor {
    let mut t = xavier(rng, n, n, vec![n, n]);
    for v in t.data_mut().iter_mut() {
        *v *= noise;
    }
    for i in 0..n {
        t.data_mut()[i * n + i] += 1.0;
    }
    t
}

/// Seeded parameter initialization, deterministic per (dims, seed).
pub fn init_params(dims: ModelDims, seed: u64) -> Result<ModelParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (i, h, d, t, c) = (dims.input_len(), dims.hidden(), dims.d, dims.t, dims.c);
    Ok(ModelParams {
        dims,
        enc_w1: xavier(&mut rng, i, h, vec![i, h]),
        enc_b1: zeros_grad(vec![h]),
        enc_w2: xavier(&mut rng, h, d, vec![h, d]),
        enc_b2: zeros_grad(vec![d]),
        mixer: near_identity(&mut rng, t, 0.1),
        mix_w: near_identity(&mut rng, d, 0.1),
        mix_b: zeros_grad(vec![d]),
        dec_w1: xavier(&mut rng, d, d, vec![d, d]),
        dec_b1: zeros_grad(vec![d]),
        dec_w2: xavier(&mut rng, d, i, vec![d, i]),
        dec_b2: zeros_grad(vec![i]),
        cls_w: xavier(&mut rng, d, c, vec![d, c]),
        cls_b: zeros_grad(vec![c]),
    })
}

/// Tape handles for one bound parameter set.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub enc_w1: Var,
    pub enc_b1: Var,
    pub enc_w2: Var,
    pub enc_b2: Var,
    pub mixer: Var,
    pub mix_w: Var,
    pub mix_b: Var,
    pub dec_w1: Var,
    pub dec_b1: Var,
    pub dec_w2: Var,
    pub dec_b2: Var,
    pub cls_w: Var,
    pub cls_b: Var,
}

impl ParamVars {
    pub fn all(&self) -> Vec<(&'static str, Var)> {
        vec![
            ("enc_w1", self.enc_w1),
            ("enc_b1", self.enc_b1),
            ("enc_w2", self.enc_w2),
            ("enc_b2", self.enc_b2),
            ("mixer", self.mixer),
            ("mix_w", self.mix_w),
            ("mix_b", self.mix_b),
            ("dec_w1", self.dec_w1),
            ("dec_b1", self.dec_b1),
            ("dec_w2", self.dec_w2),
            ("dec_b2", self.dec_b2),
            ("cls_w", self.cls_w),
            ("cls_b", self.cls_b),
        ]
    }
}

/// Register every parameter as a tape leaf.
pub fn bind(params: &ModelParams, tape: &Tape) -> ParamVars {
    ParamVars {
        enc_w1: tape.leaf(params.enc_w1.clone()),
        enc_b1: tape.leaf(params.enc_b1.clone()),
        enc_w2: tape.leaf(params.enc_w2.clone()),
        enc_b2: tape.leaf(params.enc_b2.clone()),
        mixer: tape.leaf(params.mixer.clone()),
        mix_w: tape.leaf(params.mix_w.clone()),
        mix_b: tape.leaf(params.mix_b.clone()),
        dec_w1: tape.leaf(params.dec_w1.clone()),
        dec_b1: tape.leaf(params.dec_b1.clone()),
        dec_w2: tape.leaf(params.dec_w2.clone()),
        dec_b2: tape.leaf(params.dec_b2.clone()),
        cls_w: tape.leaf(params.cls_w.clone()),
        cls_b: tape.leaf(params.cls_b.clone()),
    }
}

fn check_input_shape(tape: &Tape, x: Var, dims: &ModelDims) -> Result<usize> {
    let v = tape.value(x);
    let s = v.shape();
    if s.len() != 4 || s[1] != dims.t || s[2] != dims.channels || s[3] != dims.epoch_len {
        return Err(Error::Shape(format!(
            "encode: expected B×{}×{}×{}, got {s:?}",
            dims.t, dims.channels, dims.epoch_len
        )));
    }
    Ok(s[0])
}

fn check_feature_shape(tape: &Tape, f: Var, dims: &ModelDims, tag: &str) -> Result<usize> {
    let v = tape.value(f);
    let s = v.shape();
    if s.len() != 3 || s[1] != dims.t || s[2] != dims.d {
        return Err(Error::Shape(format!("{tag}: expected B×{}×{}, got {s:?}", dims.t, dims.d)));
    }
    Ok(s[0])
}

/// Per-epoch two-layer MLP, inverted dropout (training only), then a
/// learned T×T temporal mix and a pointwise affine.
pub fn encode(
    tape: &Tape,
    x: Var,
    pv: &ParamVars,
    dims: &ModelDims,
    dropout_rate: f64,
    training: bool,
    rng_seed: u64,
) -> Result<Var> {
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::Contract(format!("dropout rate {dropout_rate} outside [0, 1)")));
    }
    let batch = check_input_shape(tape, x, dims)?;
    let rows = batch * dims.t;
    let flat = tape.reshape(x, vec![rows, dims.input_len()])?;
    let mut h = tape.tanh(tape.add_bias(tape.matmul(flat, pv.enc_w1)?, pv.enc_b1)?);
    if training && dropout_rate > 0.0 {
        let keep = 1.0 - dropout_rate;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mask: Vec<f64> = (0..rows * dims.hidden())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = tape.constant(Tensor::new(vec![rows, dims.hidden()], mask)?);
        h = tape.mul(h, mask)?;
    }
    let per_epoch = tape.add_bias(tape.matmul(h, pv.enc_w2)?, pv.enc_b2)?;
    let seq = tape.reshape(per_epoch, vec![batch, dims.t, dims.d])?;
    let mixed = tape.time_mix(seq, pv.mixer)?;
    let mixed_flat = tape.reshape(mixed, vec![rows, dims.d])?;
    let out = tape.add_bias(tape.matmul(mixed_flat, pv.mix_w)?, pv.mix_b)?;
    tape.reshape(out, vec![batch, dims.t, dims.d])
}

/// Mirror of the encoder MLP mapping features back to input shape.
pub fn decode(tape: &Tape, f: Var, pv: &ParamVars, dims: &ModelDims) -> Result<Var> {
    let batch = check_feature_shape(tape, f, dims, "decode")?;
    let rows = batch * dims.t;
    let flat = tape.reshape(f, vec![rows, dims.d])?;
    let h = tape.tanh(tape.add_bias(tape.matmul(flat, pv.dec_w1)?, pv.dec_b1)?);
    let out = tape.add_bias(tape.matmul(h, pv.dec_w2)?, pv.dec_b2)?;
    tape.reshape(out, vec![batch, dims.t, dims.channels, dims.epoch_len])
}

/// Epoch-wise linear logits; no softmax here.
pub fn classify(tape: &Tape, f: Var, pv: &ParamVars, dims: &ModelDims) -> Result<Var> {
    let batch = check_feature_shape(tape, f, dims, "classify")?;
    let rows = batch * dims.t;
    let flat = tape.reshape(f, vec![rows, dims.d])?;
    let z = tape.add_bias(tape.matmul(flat, pv.cls_w)?, pv.cls_b)?;
    tape.reshape(z, vec![batch, dims.t, dims.c])
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"NLDP";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct ParamManifest {
    dims: ModelDims,
    entries: Vec<(String, Vec<usize>)>,
}

impl ModelParams {
    /// Serialize as magic, version, length-prefixed JSON shape manifest,
    /// then a flat little-endian f64 blob. Bit-exact round trip.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = ParamManifest {
            dims: self.dims,
            entries: self
                .tensors()
                .iter()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
                .collect(),
        };
        let manifest =
            serde_json::to_vec(&manifest).map_err(|e| Error::Data(format!("manifest: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in self.tensors() {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |off: usize, len: usize| -> Result<&[u8]> {
            bytes.get(off..off + len).ok_or(Error::Parse {
                offset: off as u64,
                msg: "truncated parameter blob".into(),
            })
        };
        if need(0, 4)? != CHECKPOINT_MAGIC {
            return Err(Error::Parse { offset: 0, msg: "bad parameter magic".into() });
        }
        let version = u16::from_le_bytes(need(4, 2)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let mlen = u64::from_le_bytes(need(6, 8)?.try_into().unwrap()) as usize;
        let manifest: ParamManifest = serde_json::from_slice(need(14, mlen)?)
            .map_err(|e| Error::Parse { offset: 14, msg: format!("manifest: {e}") })?;
        if manifest.entries.len() != PARAM_NAMES.len()
            || manifest.entries.iter().zip(PARAM_NAMES).any(|((n, _), e)| n != e)
        {
            return Err(Error::Parse { offset: 14, msg: "unexpected parameter set".into() });
        }
        let mut off = 14 + mlen;
        let mut params = init_params(manifest.dims, 0)?;
        for ((name, shape), (_, tensor)) in
            manifest.entries.iter().zip(params.tensors_mut())
        {
            let n: usize = shape.iter().product();
            let raw = need(off, n * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            *tensor = Tensor::new(shape.clone(), data)
                .map_err(|e| Error::Parse { offset: off as u64, msg: format!("{name}: {e}") })?
                .with_grad();
            off += n * 8;
        }
        if off != bytes.len() {
            return Err(Error::Parse { offset: off as u64, msg: "trailing bytes after parameters".into() });
        }
        Ok(params)
    }
}
