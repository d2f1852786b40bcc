//! Tape-based reverse-mode differentiation over dense f64 tensors.
//!
//! A [`Tape`] records one forward pass as an append-only node list; node
//! inputs always point backwards, so the append order is a topological
//! order. [`Tape::backward`] replays the tape in reverse and accumulates
//! adjoints into leaf gradients. Repeated `backward` calls accumulate;
//! gradients are cleared explicitly by the optimizer, never implicitly.
//!
//! Broadcasting is restricted to scalar operands and trailing-axis bias
//! addition; anything richer is rejected so every gradient rule stays
//! auditable.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    /// `[..., D] + [D]`, bias broadcast over the trailing axis.
    AddBias,
    Relu,
    Tanh,
    Log,
    Exp,
    Square,
    Sqrt,
    Recip,
    /// x·ln(x) with 0·ln 0 := 0; entropy building block.
    XLogX,
    Clamp {
        lo: f64,
        hi: f64,
    },
    Scale(f64),
    AddConst,
    MatMul {
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        rows: usize,
        cols: usize,
    },
    Reshape,
    SumAll,
    /// Softmax over the trailing axis, computed with max subtraction.
    Softmax {
        classes: usize,
    },
    /// Fused stable log-softmax + label gather: out[i] = −log p_i[y_i].
    CrossEntropyLogits {
        classes: usize,
    },
    /// out[b,s,d] = Σ_t mix[s,t]·f[b,t,d]; mixes along the temporal axis.
    TimeMix {
        batch: usize,
        t_in: usize,
        t_out: usize,
        width: usize,
    },
    /// Row-wise scaling of an N×D matrix by an N-vector.
    ScaleRows {
        rows: usize,
        cols: usize,
    },
    /// Row-wise subtraction of an N-vector from an N×D matrix.
    SubRows {
        rows: usize,
        cols: usize,
    },
    /// Sum over the trailing axis: N×D → N.
    RowSum {
        rows: usize,
        cols: usize,
    },
    /// Magnitudes of the real-input DFT along the temporal axis:
    /// B×T×D → B×(⌊T/2⌋+1)×D.
    RfftMag {
        batch: usize,
        t: usize,
        width: usize,
    },
    /// Select batch entries of a B×T×D tensor; gradient scatter-adds
    /// back into the source. Selected indices live in `aux`.
    GatherBatch {
        block: usize,
        src_batch: usize,
    },
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
    /// Saved intermediates needed by the backward rule (softmax probs,
    /// DFT real/imaginary parts, CE labels as f64).
    aux: Vec<f64>,
}

/// Append-only computation tape. Confined to one thread for its lifetime.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grads: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Forward value of a node. The borrow must be released before the
    /// next operation is recorded.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn value_cloned(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Value of a scalar node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        debug_assert!(nodes[v.0].value.is_scalar());
        nodes[v.0].value.data()[0]
    }

    /// Accumulated gradient of a node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Vec<f64>> {
        self.grads.borrow().get(v.0).and_then(|g| g.clone())
    }

    fn push(&self, op: Op, inputs: Vec<usize>, value: Tensor, aux: Vec<f64>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match op {
            Op::Leaf => value.requires_grad,
            _ => inputs.iter().any(|&i| nodes[i].requires_grad),
        };
        debug_assert!(inputs.iter().all(|&i| i < nodes.len()));
        nodes.push(Node { op, inputs, value, requires_grad, aux });
        self.grads.borrow_mut().push(None);
        Var(nodes.len() - 1)
    }

    /// Record an input tensor. Gradient is tracked iff `t.requires_grad`.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(Op::Leaf, vec![], t, vec![])
    }

    /// Record a constant (never differentiated through).
    pub fn constant(&self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push(Op::Leaf, vec![], t, vec![])
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn binary_same_shape(&self, tag: &str, a: Var, b: Var) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.shape() != tb.shape() && !ta.is_scalar() && !tb.is_scalar() {
            return Err(Error::Shape(format!(
                "{tag}: incompatible shapes {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let shape = if ta.is_scalar() { tb.shape().to_vec() } else { ta.shape().to_vec() };
        Ok((shape, ta.data().to_vec(), tb.data().to_vec()))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, da, db) = self.binary_same_shape("add", a, b)?;
        let n = shape.iter().product();
        let out: Vec<f64> = (0..n).map(|i| da[i % da.len()] + db[i % db.len()]).collect();
        Ok(self.push(Op::Add, vec![a.0, b.0], Tensor::new(shape, out)?, vec![]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, da, db) = self.binary_same_shape("sub", a, b)?;
        let n = shape.iter().product();
        let out: Vec<f64> = (0..n).map(|i| da[i % da.len()] - db[i % db.len()]).collect();
        Ok(self.push(Op::Sub, vec![a.0, b.0], Tensor::new(shape, out)?, vec![]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, da, db) = self.binary_same_shape("mul", a, b)?;
        let n = shape.iter().product();
        let out: Vec<f64> = (0..n).map(|i| da[i % da.len()] * db[i % db.len()]).collect();
        Ok(self.push(Op::Mul, vec![a.0, b.0], Tensor::new(shape, out)?, vec![]))
    }

    /// `a + bias` where `bias` has the length of `a`'s trailing axis.
    pub fn add_bias(&self, a: Var, bias: Var) -> Result<Var> {
        let (shape, da, db) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[bias.0].value);
            let last = *ta.shape().last().unwrap_or(&0);
            if tb.shape().len() != 1 || tb.len() != last {
                return Err(Error::Shape(format!(
                    "add_bias: bias shape {:?} does not match trailing axis of {:?}",
                    tb.shape(),
                    ta.shape()
                )));
            }
            (ta.shape().to_vec(), ta.data().to_vec(), tb.data().to_vec())
        };
        let d = db.len();
        let out: Vec<f64> = da.iter().enumerate().map(|(i, v)| v + db[i % d]).collect();
        Ok(self.push(Op::AddBias, vec![a.0, bias.0], Tensor::new(shape, out)?, vec![]))
    }

    fn unary<F: Fn(f64) -> f64>(&self, op: Op, a: Var, f: F) -> Var {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            (t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect::<Vec<f64>>())
        };
        self.push(op, vec![a.0], Tensor::new(shape, data).expect("unary preserves shape"), vec![])
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(Op::Relu, a, |x| x.max(0.0))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(Op::Tanh, a, f64::tanh)
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        {
            let nodes = self.nodes.borrow();
            if let Some(x) = nodes[a.0].value.data().iter().find(|&&x| x <= 0.0) {
                return Err(Error::Domain(format!("log of non-positive value {x}")));
            }
        }
        Ok(self.unary(Op::Log, a, f64::ln))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(Op::Square, a, |x| x * x)
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        {
            let nodes = self.nodes.borrow();
            if let Some(x) = nodes[a.0].value.data().iter().find(|&&x| x < 0.0) {
                return Err(Error::Domain(format!("sqrt of negative value {x}")));
            }
        }
        Ok(self.unary(Op::Sqrt, a, f64::sqrt))
    }

    pub fn recip(&self, a: Var) -> Result<Var> {
        {
            let nodes = self.nodes.borrow();
            if nodes[a.0].value.data().iter().any(|&x| x == 0.0) {
                return Err(Error::Domain("reciprocal of zero".into()));
            }
        }
        Ok(self.unary(Op::Recip, a, |x| 1.0 / x))
    }

    /// x·ln(x) extended continuously with 0 at x = 0.
    pub fn xlogx(&self, a: Var) -> Result<Var> {
        {
            let nodes = self.nodes.borrow();
            if let Some(x) = nodes[a.0].value.data().iter().find(|&&x| x < 0.0) {
                return Err(Error::Domain(format!("xlogx of negative value {x}")));
            }
        }
        Ok(self.unary(Op::XLogX, a, |x| if x > 0.0 { x * x.ln() } else { 0.0 }))
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp { lo, hi }, a, |x| x.clamp(lo, hi))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(Op::Scale(c), a, |x| c * x)
    }

    pub fn add_const(&self, a: Var, c: f64) -> Var {
        self.unary(Op::AddConst, a, |x| x + c)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n, da, db) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::Shape(format!("matmul: {sa:?} × {sb:?}")));
            }
            (sa[0], sa[1], sb[1], ta.data().to_vec(), tb.data().to_vec())
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        Ok(self.push(Op::MatMul { m, k, n }, vec![a.0, b.0], Tensor::new(vec![m, n], out)?, vec![]))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (rows, cols, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.shape().len() != 2 {
                return Err(Error::Shape(format!("transpose: expected 2-d, got {:?}", t.shape())));
            }
            (t.shape()[0], t.shape()[1], t.data().to_vec())
        };
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = data[i * cols + j];
            }
        }
        Ok(self.push(
            Op::Transpose { rows, cols },
            vec![a.0],
            Tensor::new(vec![cols, rows], out)?,
            vec![],
        ))
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.reshaped(shape)?
        };
        Ok(self.push(Op::Reshape, vec![a.0], value, vec![]))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let s: f64 = self.nodes.borrow()[a.0].value.data().iter().sum();
        self.push(Op::SumAll, vec![a.0], Tensor::scalar(s), vec![])
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.nodes.borrow()[a.0].value.len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Softmax over the trailing axis, with max subtraction for stability.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if !t.all_finite() {
                return Err(Error::Domain("softmax: non-finite input".into()));
            }
            (t.shape().to_vec(), t.data().to_vec())
        };
        let classes = *shape.last().ok_or_else(|| Error::Shape("softmax: empty shape".into()))?;
        let mut out = vec![0.0; data.len()];
        for (row_in, row_out) in data.chunks(classes).zip(out.chunks_mut(classes)) {
            let mx = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = (x - mx).exp();
                z += *o;
            }
            for o in row_out.iter_mut() {
                *o /= z;
            }
        }
        Ok(self.push(Op::Softmax { classes }, vec![a.0], Tensor::new(shape, out)?, vec![]))
    }

    /// Per-row cross-entropy against integer labels: out[i] = −log softmax(z_i)[y_i].
    pub fn cross_entropy_logits(&self, z: Var, labels: &[usize]) -> Result<Var> {
        let (rows, classes, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[z.0].value;
            if t.shape().len() != 2 {
                return Err(Error::Shape(format!("cross_entropy: expected N×C logits, got {:?}", t.shape())));
            }
            (t.shape()[0], t.shape()[1], t.data().to_vec())
        };
        if labels.len() != rows {
            return Err(Error::Shape(format!(
                "cross_entropy: {rows} logit rows but {} labels",
                labels.len()
            )));
        }
        if let Some(pos) = labels.iter().position(|&y| y >= classes) {
            return Err(Error::Data(format!(
                "label {} out of range [0, {classes}) at position {pos}",
                labels[pos]
            )));
        }
        // aux = softmax probs followed by labels as f64
        let mut aux = Vec::with_capacity(rows * classes + rows);
        let mut out = Vec::with_capacity(rows);
        for (i, row) in data.chunks(classes).enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z_sum: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
            let lse = mx + z_sum.ln();
            out.push(lse - row[labels[i]]);
            for &x in row {
                aux.push((x - mx).exp() / z_sum);
            }
        }
        aux.extend(labels.iter().map(|&y| y as f64));
        Ok(self.push(
            Op::CrossEntropyLogits { classes },
            vec![z.0],
            Tensor::new(vec![rows], out)?,
            aux,
        ))
    }

    /// out[b,s,d] = Σ_t mix[s,t]·f[b,t,d].
    pub fn time_mix(&self, f: Var, mix: Var) -> Result<Var> {
        let (batch, t_in, width, t_out, df, dm) = {
            let nodes = self.nodes.borrow();
            let (tf, tm) = (&nodes[f.0].value, &nodes[mix.0].value);
            let (sf, sm) = (tf.shape(), tm.shape());
            if sf.len() != 3 || sm.len() != 2 || sm[1] != sf[1] {
                return Err(Error::Shape(format!("time_mix: features {sf:?} vs mix {sm:?}")));
            }
            (sf[0], sf[1], sf[2], sm[0], tf.data().to_vec(), tm.data().to_vec())
        };
        let mut out = vec![0.0; batch * t_out * width];
        for b in 0..batch {
            for s in 0..t_out {
                let orow = &mut out[(b * t_out + s) * width..(b * t_out + s + 1) * width];
                for t in 0..t_in {
                    let w = dm[s * t_in + t];
                    if w == 0.0 {
                        continue;
                    }
                    let frow = &df[(b * t_in + t) * width..(b * t_in + t + 1) * width];
                    for d in 0..width {
                        orow[d] += w * frow[d];
                    }
                }
            }
        }
        Ok(self.push(
            Op::TimeMix { batch, t_in, t_out, width },
            vec![f.0, mix.0],
            Tensor::new(vec![batch, t_out, width], out)?,
            vec![],
        ))
    }

    pub fn scale_rows(&self, x: Var, s: Var) -> Result<Var> {
        let (rows, cols, dx, ds) = self.rowwise_operands("scale_rows", x, s)?;
        let out: Vec<f64> =
            dx.iter().enumerate().map(|(i, v)| v * ds[i / cols]).collect();
        Ok(self.push(
            Op::ScaleRows { rows, cols },
            vec![x.0, s.0],
            Tensor::new(vec![rows, cols], out)?,
            vec![],
        ))
    }

    pub fn sub_rows(&self, x: Var, s: Var) -> Result<Var> {
        let (rows, cols, dx, ds) = self.rowwise_operands("sub_rows", x, s)?;
        let out: Vec<f64> =
            dx.iter().enumerate().map(|(i, v)| v - ds[i / cols]).collect();
        Ok(self.push(
            Op::SubRows { rows, cols },
            vec![x.0, s.0],
            Tensor::new(vec![rows, cols], out)?,
            vec![],
        ))
    }

    pub fn row_sum(&self, x: Var) -> Result<Var> {
        let (rows, cols, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape().len() != 2 {
                return Err(Error::Shape(format!("row_sum: expected 2-d, got {:?}", t.shape())));
            }
            (t.shape()[0], t.shape()[1], t.data().to_vec())
        };
        let out: Vec<f64> = data.chunks(cols).map(|r| r.iter().sum()).collect();
        Ok(self.push(Op::RowSum { rows, cols }, vec![x.0], Tensor::new(vec![rows], out)?, vec![]))
    }

    fn rowwise_operands(
        &self,
        tag: &str,
        x: Var,
        s: Var,
    ) -> Result<(usize, usize, Vec<f64>, Vec<f64>)> {
        let nodes = self.nodes.borrow();
        let (tx, ts) = (&nodes[x.0].value, &nodes[s.0].value);
        if tx.shape().len() != 2 || ts.shape().len() != 1 || ts.len() != tx.shape()[0] {
            return Err(Error::Shape(format!(
                "{tag}: matrix {:?} vs per-row vector {:?}",
                tx.shape(),
                ts.shape()
            )));
        }
        Ok((tx.shape()[0], tx.shape()[1], tx.data().to_vec(), ts.data().to_vec()))
    }

    /// |rFFT| magnitudes along the temporal axis of a B×T×D tensor.
    pub fn rfft_mag(&self, f: Var) -> Result<Var> {
        let (batch, t, width, data) = {
            let nodes = self.nodes.borrow();
            let tf = &nodes[f.0].value;
            let s = tf.shape();
            if s.len() != 3 {
                return Err(Error::Shape(format!("rfft_mag: expected B×T×D, got {s:?}")));
            }
            if s[1] < 2 {
                return Err(Error::Contract(format!("rfft_mag: temporal length {} < 2", s[1])));
            }
            if !tf.all_finite() {
                return Err(Error::Domain("rfft_mag: non-finite input".into()));
            }
            (s[0], s[1], s[2], tf.data().to_vec())
        };
        let bins = t / 2 + 1;
        let (mags, re_im) = crate::spectral::rfft_mag_forward(&data, batch, t, width);
        let value = Tensor::new(vec![batch, bins, width], mags)?;
        Ok(self.push(Op::RfftMag { batch, t, width }, vec![f.0], value, re_im))
    }

    /// Select the given batch entries of a B×T×D tensor into a
    /// len×T×D tensor. Indices may repeat.
    pub fn gather_batch(&self, f: Var, indices: &[usize]) -> Result<Var> {
        let (src_batch, t, width, data) = {
            let nodes = self.nodes.borrow();
            let tf = &nodes[f.0].value;
            let s = tf.shape();
            if s.len() != 3 {
                return Err(Error::Shape(format!("gather_batch: expected B×T×D, got {s:?}")));
            }
            (s[0], s[1], s[2], tf.data().to_vec())
        };
        if indices.is_empty() {
            return Err(Error::Contract("gather_batch: empty index set".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= src_batch) {
            return Err(Error::Shape(format!(
                "gather_batch: index {bad} out of range for batch {src_batch}"
            )));
        }
        let block = t * width;
        let mut out = Vec::with_capacity(indices.len() * block);
        for &i in indices {
            out.extend_from_slice(&data[i * block..(i + 1) * block]);
        }
        let aux: Vec<f64> = indices.iter().map(|&i| i as f64).collect();
        Ok(self.push(
            Op::GatherBatch { block, src_batch },
            vec![f.0],
            Tensor::new(vec![indices.len(), t, width], out)?,
            aux,
        ))
    }

    /// Reverse accumulation from a scalar loss into every `requires_grad`
    /// leaf. Accumulates on top of gradients from earlier calls.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::Contract("backward on empty tape".into()));
        }
        if !nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for k in (0..=loss.0).rev() {
            let Some(dout) = adj[k].take() else { continue };
            let node = &nodes[k];
            if !node.requires_grad {
                continue;
            }
            // merge into the persistent store so repeated backward calls accumulate
            {
                let mut grads = self.grads.borrow_mut();
                let slot = grads[k].get_or_insert_with(|| vec![0.0; dout.len()]);
                for (g, d) in slot.iter_mut().zip(&dout) {
                    *g += d;
                }
            }
            let push_to = |adj: &mut Vec<Option<Vec<f64>>>, input: usize, contrib: Vec<f64>| {
                if !nodes[input].requires_grad {
                    return;
                }
                match &mut adj[input] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(&contrib) {
                            *e += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add | Op::Sub => {
                    let sign = if matches!(node.op, Op::Sub) { -1.0 } else { 1.0 };
                    for (which, &input) in node.inputs.iter().enumerate() {
                        let s = if which == 1 { sign } else { 1.0 };
                        let in_len = nodes[input].value.len();
                        let contrib = if in_len == dout.len() {
                            dout.iter().map(|d| s * d).collect()
                        } else {
                            // scalar operand
                            vec![s * dout.iter().sum::<f64>()]
                        };
                        push_to(&mut adj, input, contrib);
                    }
                }
                Op::Mul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let va = nodes[a].value.data();
                    let vb = nodes[b].value.data();
                    let grad_for = |own: &[f64], other: &[f64]| -> Vec<f64> {
                        if own.len() == dout.len() {
                            dout.iter()
                                .enumerate()
                                .map(|(i, d)| d * other[i % other.len()])
                                .collect()
                        } else {
                            vec![dout
                                .iter()
                                .enumerate()
                                .map(|(i, d)| d * other[i % other.len()])
                                .sum()]
                        }
                    };
                    let ga = grad_for(va, vb);
                    let gb = grad_for(vb, va);
                    push_to(&mut adj, a, ga);
                    push_to(&mut adj, b, gb);
                }
                Op::AddBias => {
                    let (a, bias) = (node.inputs[0], node.inputs[1]);
                    push_to(&mut adj, a, dout.clone());
                    let d = nodes[bias].value.len();
                    let mut gb = vec![0.0; d];
                    for (i, v) in dout.iter().enumerate() {
                        gb[i % d] += v;
                    }
                    push_to(&mut adj, bias, gb);
                }
                Op::Relu => {
                    let x = nodes[node.inputs[0]].value.data();
                    let g = dout.iter().zip(x).map(|(d, &x)| if x > 0.0 { *d } else { 0.0 }).collect();
                    push_to(&mut adj, node.inputs[0], g);
                }
                Op::Tanh => {
                    let y = node.value.data();
                    let g = dout.iter().zip(y).map(|(d, &y)| d * (1.0 - y * y)).collect();
                    push_to(&mut adj, node.inputs[0], g);
                }
                Op::Log => {
                    let x = nodes[node.inputs[0]].value.data();
                    let g = dout.iter().zip(x).map(|(d, &x)| d / x).collect();
                    push_to(&mut adj, node.inputs[0], g);
                }
                Op::Exp => {
                    let y = node.value.data();
                    let g = dout.iter().zip(y).map(|(d, &y)| d * y).collect();
                    push_to(&mut adj, node.inputs[0], g);
                }
                Op::Square => {
                    let x = nodes[node.inputs[0]].value.data();
                    let g = dout.iter().zip(x).map(|(d, &x)| d * 2.0 * x).collect();
                    push_to(&mut adj, node.inputs[0], g);
                }
                Op::Sqrt => {
                    let y = node.value.data();
                    let g = dout
                        .iter()
                        .zip(y)
                        .map(|(d, &y)| if y > 0.0 { d / (2.0 * y) } else { 0.0 })
                        .collect();
                    push_to(&mut adj, node.inputs[0], g);
                }
                Op::Recip => {
                    let x = nodes[node.inputs[0]].value.data();
                    let g = dout.iter().zip(x).map(|(d, &x)| -d / (x * x)).collect();
                    push_to(&mut adj, node.inputs[0], g);
                }
                Op::XLogX => {
                    let x = nodes[node.inputs[0]].value.data();
                    let g = dout
                        .iter()
                        .zip(x)
                        .map(|(d, &x)| if x > 0.0 { d * (x.ln() + 1.0) } else { 0.0 })
                        .collect();
                    push_to(&mut adj, node.inputs[0], g);
                }
                Op::Clamp { lo, hi } => {
                    let x = nodes[node.inputs[0]].value.data();
                    let g = dout
                        .iter()
                        .zip(x)
                        .map(|(d, &x)| if x > *lo && x < *hi { *d } else { 0.0 })
                        .collect();
                    push_to(&mut adj, node.inputs[0], g);
                }
                Op::Scale(c) => {
                    let g = dout.iter().map(|d| c * d).collect();
                    push_to(&mut adj, node.inputs[0], g);
                }
                Op::AddConst => {
                    push_to(&mut adj, node.inputs[0], dout.clone());
                }
                Op::MatMul { m, k, n } => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let va = nodes[a].value.data();
                    let vb = nodes[b].value.data();
                    // dA = dOut · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    for i in 0..*m {
                        for j in 0..*n {
                            let d = dout[i * n + j];
                            if d == 0.0 {
                                continue;
                            }
                            for p in 0..*k {
                                ga[i * k + p] += d * vb[p * n + j];
                            }
                        }
                    }
                    // dB = Aᵀ · dOut
                    let mut gb = vec![0.0; k * n];
                    for i in 0..*m {
                        for p in 0..*k {
                            let aip = va[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..*n {
                                gb[p * n + j] += aip * dout[i * n + j];
                            }
                        }
                    }
                    push_to(&mut adj, a, ga);
                    push_to(&mut adj, b, gb);
                }
                Op::Transpose { rows, cols } => {
                    let mut g = vec![0.0; rows * cols];
                    for i in 0..*rows {
                        for j in 0..*cols {
                            g[i * cols + j] = dout[j * rows + i];
                        }
                    }
                    push_to(&mut adj, node.inputs[0], g);
                }
                Op::Reshape => {
                    push_to(&mut adj, node.inputs[0], dout.clone());
                }
                Op::SumAll => {
                    let in_len = nodes[node.inputs[0]].value.len();
                    push_to(&mut adj, node.inputs[0], vec![dout[0]; in_len]);
                }
                Op::Softmax { classes } => {
                    let p = node.value.data();
                    let mut g = vec![0.0; p.len()];
                    for (row, (prow, drow)) in
                        p.chunks(*classes).zip(dout.chunks(*classes)).enumerate()
                    {
                        let dot: f64 = prow.iter().zip(drow).map(|(p, d)| p * d).sum();
                        for c in 0..*classes {
                            g[row * classes + c] = prow[c] * (drow[c] - dot);
                        }
                    }
                    push_to(&mut adj, node.inputs[0], g);
                }
                Op::CrossEntropyLogits { classes } => {
                    let rows = dout.len();
                    let probs = &node.aux[..rows * classes];
                    let labels = &node.aux[rows * classes..];
                    let mut g = vec![0.0; rows * classes];
                    for i in 0..rows {
                        let y = labels[i] as usize;
                        for c in 0..*classes {
                            let ind = if c == y { 1.0 } else { 0.0 };
                            g[i * classes + c] = dout[i] * (probs[i * classes + c] - ind);
                        }
                    }
                    push_to(&mut adj, node.inputs[0], g);
                }
                Op::TimeMix { batch, t_in, t_out, width } => {
                    let (f, mix) = (node.inputs[0], node.inputs[1]);
                    let vf = nodes[f].value.data();
                    let vm = nodes[mix].value.data();
                    let mut gf = vec![0.0; batch * t_in * width];
                    let mut gm = vec![0.0; t_out * t_in];
                    for b in 0..*batch {
                        for s in 0..*t_out {
                            let drow = &dout[(b * t_out + s) * width..(b * t_out + s + 1) * width];
                            for t in 0..*t_in {
                                let frow = &vf[(b * t_in + t) * width..(b * t_in + t + 1) * width];
                                let w = vm[s * t_in + t];
                                let mut acc = 0.0;
                                for d in 0..*width {
                                    gf[(b * t_in + t) * width + d] += w * drow[d];
                                    acc += drow[d] * frow[d];
                                }
                                gm[s * t_in + t] += acc;
                            }
                        }
                    }
                    push_to(&mut adj, f, gf);
                    push_to(&mut adj, mix, gm);
                }
                Op::ScaleRows { rows, cols } => {
                    let (x, s) = (node.inputs[0], node.inputs[1]);
                    let vx = nodes[x].value.data();
                    let vs = nodes[s].value.data();
                    let gx: Vec<f64> =
                        dout.iter().enumerate().map(|(i, d)| d * vs[i / cols]).collect();
                    let mut gs = vec![0.0; *rows];
                    for (i, d) in dout.iter().enumerate() {
                        gs[i / cols] += d * vx[i];
                    }
                    push_to(&mut adj, x, gx);
                    push_to(&mut adj, s, gs);
                }
                Op::SubRows { rows, cols } => {
                    let (x, s) = (node.inputs[0], node.inputs[1]);
                    push_to(&mut adj, x, dout.clone());
                    let mut gs = vec![0.0; *rows];
                    for (i, d) in dout.iter().enumerate() {
                        gs[i / cols] -= d;
                    }
                    push_to(&mut adj, s, gs);
                }
                Op::RowSum { rows, cols } => {
                    let mut g = vec![0.0; rows * cols];
                    for (i, gi) in g.iter_mut().enumerate() {
                        *gi = dout[i / cols];
                    }
                    push_to(&mut adj, node.inputs[0], g);
                }
                Op::RfftMag { batch, t, width } => {
                    let g = crate::spectral::rfft_mag_backward(
                        &dout,
                        node.value.data(),
                        &node.aux,
                        *batch,
                        *t,
                        *width,
                    );
                    push_to(&mut adj, node.inputs[0], g);
                }
                Op::GatherBatch { block, src_batch } => {
                    let mut g = vec![0.0; src_batch * block];
                    for (pos, &src) in node.aux.iter().enumerate() {
                        let src = src as usize;
                        for d in 0..*block {
                            g[src * block + d] += dout[pos * block + d];
                        }
                    }
                    push_to(&mut adj, node.inputs[0], g);
                }
            }
        }
        Ok(())
    }
}
