//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable computation is built by pushing operations onto a
//! [`Tape`]. Nodes are appended in evaluation order, so the tape is always a
//! DAG in topological order and [`Tape::backward`] visits each node exactly
//! once, in reverse. Forward values stay on the tape; backward reads them
//! instead of recomputing.
//!
//! Convolutions use the cross-correlation convention (kernels are not
//! flipped), matching the layout every weight archive assumes.
//! `conv2d_transpose` is the exact adjoint of `conv2d` with the same stride
//! and padding: `<conv2d(x,k), y> == <x, conv2d_transpose(y,k)>`.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Matmul(Var, Var),
    RowBias(Var, Var),
    ChannelBias(Var, Var),
    Conv2d { x: Var, k: Var, stride: usize, pad: usize },
    ConvT2d { x: Var, k: Var, stride: usize, pad: usize },
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    L2NormRows(Var),
    ConcatChannels(Var, Var),
    Reshape(Var),
    MeanAll(Var),
    SumAll(Var),
    BceMean { probs: Var, target: Tensor },
    TripletMargin { anchor: Var, positive: Var, negative: Var, margin: f64 },
    SoftmaxRows(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct TapeGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl TapeGrads {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

/// Recording tape for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    // (node index, parameter name): where to deliver gradients after backward.
    bindings: Vec<(usize, String)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward value");
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Untracked leaf: gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Tracked leaf: backward produces a gradient for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Copies a named parameter onto the tape. Gradients flow back to the
    /// parameter set (via [`Tape::apply_grads`]) only when the tensor is
    /// trainable and `track` is true.
    pub fn param(&mut self, params: &ParamSet, name: &str, track: bool) -> Result<Var> {
        let tensor = params.get(name)?;
        let tracked = track && tensor.requires_grad();
        let mut value = tensor.clone();
        value.clear_grad();
        let var = self.push(Op::Leaf, value, tracked);
        if tracked {
            self.bindings.push((var.0, name.to_string()));
        }
        Ok(var)
    }

    // ---- element-wise ----

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::Shape {
                op,
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), data, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), data, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), data, needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = map(self.value(a), |x| x * c);
        let needs = self.needs(a);
        self.push(Op::Scale(a, c), data, needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = map(self.value(a), |x| x + c);
        let needs = self.needs(a);
        self.push(Op::AddScalar(a), data, needs)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let data = map(self.value(a), f64::abs);
        let needs = self.needs(a);
        self.push(Op::Abs(a), data, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = map(self.value(a), sigmoid_scalar);
        let needs = self.needs(a);
        self.push(Op::Sigmoid(a), data, needs)
    }

    pub fn tanh_act(&mut self, a: Var) -> Var {
        let data = map(self.value(a), f64::tanh);
        let needs = self.needs(a);
        self.push(Op::Tanh(a), data, needs)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let data = map(self.value(a), |x| if x > 0.0 { x } else { slope * x });
        let needs = self.needs(a);
        self.push(Op::LeakyRelu(a, slope), data, needs)
    }

    // ---- linear algebra ----

    /// `x[B,I] · w[I,O] -> [B,O]`
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("expected rank-2 operands, got {xs:?} and {ws:?}"),
            });
        }
        if xs[1] != ws[0] {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("inner axes differ: x columns {} vs w rows {}", xs[1], ws[0]),
            });
        }
        let (b, i, o) = (xs[0], xs[1], ws[1]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; b * o];
        for r in 0..b {
            for c in 0..i {
                let xv_rc = xv[r * i + c];
                let wrow = &wv[c * o..(c + 1) * o];
                let orow = &mut out[r * o..(r + 1) * o];
                for (ov, wv) in orow.iter_mut().zip(wrow) {
                    *ov += xv_rc * wv;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w);
        let value = Tensor::from_vec(&[b, o], out)?;
        Ok(self.push(Op::Matmul(x, w), value, needs))
    }

    /// `x[B,O] + b[O]`, broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() != 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::Shape {
                op: "add_row_bias",
                detail: format!("x {xs:?} vs bias {bs:?} (bias must match x columns)"),
            });
        }
        let (b, o) = (xs[0], xs[1]);
        let xv = self.value(x).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; b * o];
        for r in 0..b {
            for c in 0..o {
                out[r * o + c] = xv[r * o + c] + bv[c];
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        let value = Tensor::from_vec(&[b, o], out)?;
        Ok(self.push(Op::RowBias(x, bias), value, needs))
    }

    /// `x[B,F,H,W] + b[F]`, broadcast over batch and space.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() != 4 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::Shape {
                op: "add_channel_bias",
                detail: format!("x {xs:?} vs bias {bs:?} (bias must match x channels)"),
            });
        }
        let (b, f, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xv = self.value(x).data();
        let bv = self.value(bias).data();
        let hw = h * w;
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for fi in 0..f {
                let base = (bi * f + fi) * hw;
                let bias_v = bv[fi];
                for s in 0..hw {
                    out[base + s] = xv[base + s] + bias_v;
                }
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        let value = Tensor::from_vec(&xs, out)?;
        Ok(self.push(Op::ChannelBias(x, bias), value, needs))
    }

    // ---- convolution ----

    /// Cross-correlation of `x[B,C,H,W]` with `k[F,C,Kh,Kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let value = conv2d_forward(self.value(x), self.value(k), stride, pad)?;
        let needs = self.needs(x) || self.needs(k);
        Ok(self.push(Op::Conv2d { x, k, stride, pad }, value, needs))
    }

    /// Adjoint of [`Tape::conv2d`] with identical stride and padding.
    /// Maps `x[B,F,H,W]` with `k[F,C,Kh,Kw]` to `[B,C,(H-1)s+Kh-2p,(W-1)s+Kw-2p]`.
    /// The adjoint pairing `<conv2d(x,k), y> == <x, conv2d_transpose(y,k)>`
    /// holds whenever the paired conv2d consumed its input without a floor
    /// remainder, i.e. `(H + 2p - Kh) % stride == 0`.
    pub fn conv2d_transpose(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let value = conv2d_transpose_forward(self.value(x), self.value(k), stride, pad)?;
        let needs = self.needs(x) || self.needs(k);
        Ok(self.push(Op::ConvT2d { x, k, stride, pad }, value, needs))
    }

    // ---- shape and reductions ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(Op::Reshape(a), value, needs))
    }

    /// Concatenates `[B,C1,H,W]` and `[B,C2,H,W]` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(Error::Shape {
                op: "concat_channels",
                detail: format!("{sa:?} vs {sb:?} (batch and spatial axes must match)"),
            });
        }
        let (bn, c1, c2, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
        let hw = h * w;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity((c1 + c2) * bn * hw);
        for bi in 0..bn {
            out.extend_from_slice(&av[bi * c1 * hw..(bi + 1) * c1 * hw]);
            out.extend_from_slice(&bv[bi * c2 * hw..(bi + 1) * c2 * hw]);
        }
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::from_vec(&[bn, c1 + c2, h, w], out)?;
        Ok(self.push(Op::ConcatChannels(a, b), value, needs))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mean = v.data().iter().sum::<f64>() / v.numel() as f64;
        let needs = self.needs(a);
        self.push(Op::MeanAll(a), Tensor::scalar(mean), needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let sum = v.data().iter().sum::<f64>();
        let needs = self.needs(a);
        self.push(Op::SumAll(a), Tensor::scalar(sum), needs)
    }

    // ---- embedding and loss heads ----

    /// Normalizes each row of `x[B,D]` to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::Shape {
                op: "l2_normalize_rows",
                detail: format!("expected rank-2 input, got {xs:?}"),
            });
        }
        let (b, d) = (xs[0], xs[1]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * d];
        for r in 0..b {
            let row = &xv[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateEmbedding { row: r });
            }
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let needs = self.needs(x);
        let value = Tensor::from_vec(&[b, d], out)?;
        Ok(self.push(Op::L2NormRows(x), value, needs))
    }

    /// Mean binary cross-entropy of probabilities against a constant target.
    /// Probabilities must lie strictly inside (0,1).
    pub fn bce_mean(&mut self, probs: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(probs);
        if p.shape() != target.shape() {
            return Err(Error::Shape {
                op: "bce_mean",
                detail: format!("{:?} vs target {:?}", p.shape(), target.shape()),
            });
        }
        let mut acc = 0.0;
        for (i, (&pi, &ti)) in p.data().iter().zip(target.data()).enumerate() {
            if !(pi > 0.0 && pi < 1.0) {
                return Err(Error::Contract(format!(
                    "bce_mean: probability {pi} at index {i} outside (0,1)"
                )));
            }
            acc -= ti * pi.ln() + (1.0 - ti) * (1.0 - pi).ln();
        }
        let loss = acc / p.numel() as f64;
        let needs = self.needs(probs);
        Ok(self.push(
            Op::BceMean { probs, target: target.clone() },
            Tensor::scalar(loss),
            needs,
        ))
    }

    /// Mean over the batch of `max(0, ||a-p||^2 - ||a-n||^2 + margin)`.
    /// Rows of all three inputs must be unit-norm.
    pub fn triplet_margin(
        &mut self,
        anchor: Var,
        positive: Var,
        negative: Var,
        margin: f64,
    ) -> Result<Var> {
        self.check_same_shape("triplet_margin", anchor, positive)?;
        self.check_same_shape("triplet_margin", anchor, negative)?;
        let shape = self.value(anchor).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "triplet_margin",
                detail: format!("expected rank-2 embeddings, got {shape:?}"),
            });
        }
        if margin <= 0.0 {
            return Err(Error::Argument(format!("margin must be positive, got {margin}")));
        }
        let (b, d) = (shape[0], shape[1]);
        for (name, var) in [("anchor", anchor), ("positive", positive), ("negative", negative)] {
            let v = self.value(var).data();
            for r in 0..b {
                let norm = v[r * d..(r + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt();
                // 1e-4 leaves room for finite-difference probes of upstream values.
                if (norm - 1.0).abs() > 1e-4 {
                    return Err(Error::Contract(format!(
                        "triplet_margin: {name} row {r} has norm {norm}, expected unit"
                    )));
                }
            }
        }
        let av = self.value(anchor).data();
        let pv = self.value(positive).data();
        let nv = self.value(negative).data();
        let mut acc = 0.0;
        for r in 0..b {
            let (mut dap, mut dan) = (0.0, 0.0);
            for c in 0..d {
                let i = r * d + c;
                dap += (av[i] - pv[i]) * (av[i] - pv[i]);
                dan += (av[i] - nv[i]) * (av[i] - nv[i]);
            }
            acc += (dap - dan + margin).max(0.0);
        }
        let loss = acc / b as f64;
        let needs = self.needs(anchor) || self.needs(positive) || self.needs(negative);
        Ok(self.push(
            Op::TripletMargin { anchor, positive, negative, margin },
            Tensor::scalar(loss),
            needs,
        ))
    }

    /// Row-wise softmax of `x[B,K]`.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::Shape {
                op: "softmax_rows",
                detail: format!("expected rank-2 logits, got {xs:?}"),
            });
        }
        let (b, k) = (xs[0], xs[1]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * k];
        for r in 0..b {
            softmax_row(&xv[r * k..(r + 1) * k], &mut out[r * k..(r + 1) * k]);
        }
        let needs = self.needs(x);
        let value = Tensor::from_vec(&[b, k], out)?;
        Ok(self.push(Op::SoftmaxRows(x), value, needs))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of the logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let xs = self.value(logits).shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                detail: format!("expected rank-2 logits, got {xs:?}"),
            });
        }
        let (b, k) = (xs[0], xs[1]);
        if labels.len() != b {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                detail: format!("{b} rows but {} labels", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Argument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let xv = self.value(logits).data();
        let mut acc = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &xv[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            acc += lse - row[label];
        }
        let loss = acc / b as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec() },
            Tensor::scalar(loss),
            needs,
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Returns per-variable gradients.
    pub fn backward(&self, loss: Var) -> Result<TapeGrads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(TapeGrads { grads })
    }

    /// Accumulates gradients from a backward sweep into bound parameters.
    pub fn apply_grads(&self, grads: &TapeGrads, params: &mut ParamSet) -> Result<()> {
        for (node, name) in &self.bindings {
            if let Some(g) = grads.grads[*node].as_deref() {
                if params.contains(name) {
                    params.get_mut(name)?.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }

    fn add_into(grads: &mut Vec<Option<Vec<f64>>>, var: Var, numel: usize, f: impl FnOnce(&mut [f64])) {
        let slot = grads[var.0].get_or_insert_with(|| vec![0.0; numel]);
        f(slot);
    }

    fn backprop_node(&self, idx: usize, gout: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    Self::add_into(grads, *a, self.value(*a).numel(), |g| {
                        for (gi, go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    });
                }
                if self.needs(*b) {
                    Self::add_into(grads, *b, self.value(*b).numel(), |g| {
                        for (gi, go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    });
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    Self::add_into(grads, *a, self.value(*a).numel(), |g| {
                        for (gi, go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    });
                }
                if self.needs(*b) {
                    Self::add_into(grads, *b, self.value(*b).numel(), |g| {
                        for (gi, go) in g.iter_mut().zip(gout) {
                            *gi -= go;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    Self::add_into(grads, *a, av.len(), |g| {
                        for i in 0..g.len() {
                            g[i] += gout[i] * bv[i];
                        }
                    });
                }
                if self.needs(*b) {
                    Self::add_into(grads, *b, bv.len(), |g| {
                        for i in 0..g.len() {
                            g[i] += gout[i] * av[i];
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let c = *c;
                    Self::add_into(grads, *a, self.value(*a).numel(), |g| {
                        for (gi, go) in g.iter_mut().zip(gout) {
                            *gi += go * c;
                        }
                    });
                }
            }
            Op::AddScalar(a) => {
                if self.needs(*a) {
                    Self::add_into(grads, *a, self.value(*a).numel(), |g| {
                        for (gi, go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    });
                }
            }
            Op::Abs(a) => {
                if self.needs(*a) {
                    let av = self.value(*a).data();
                    Self::add_into(grads, *a, av.len(), |g| {
                        for i in 0..g.len() {
                            let s = if av[i] > 0.0 {
                                1.0
                            } else if av[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            g[i] += gout[i] * s;
                        }
                    });
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let yv = node.value.data();
                    Self::add_into(grads, *a, yv.len(), |g| {
                        for i in 0..g.len() {
                            g[i] += gout[i] * yv[i] * (1.0 - yv[i]);
                        }
                    });
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    let yv = node.value.data();
                    Self::add_into(grads, *a, yv.len(), |g| {
                        for i in 0..g.len() {
                            g[i] += gout[i] * (1.0 - yv[i] * yv[i]);
                        }
                    });
                }
            }
            Op::LeakyRelu(a, slope) => {
                if self.needs(*a) {
                    let av = self.value(*a).data();
                    let slope = *slope;
                    Self::add_into(grads, *a, av.len(), |g| {
                        for i in 0..g.len() {
                            g[i] += gout[i] * if av[i] > 0.0 { 1.0 } else { slope };
                        }
                    });
                }
            }
            Op::Matmul(x, w) => {
                let xs = self.value(*x).shape();
                let ws = self.value(*w).shape();
                let (b, i, o) = (xs[0], xs[1], ws[1]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.needs(*x) {
                    Self::add_into(grads, *x, b * i, |g| {
                        for r in 0..b {
                            for c in 0..i {
                                let mut acc = 0.0;
                                for q in 0..o {
                                    acc += gout[r * o + q] * wv[c * o + q];
                                }
                                g[r * i + c] += acc;
                            }
                        }
                    });
                }
                if self.needs(*w) {
                    Self::add_into(grads, *w, i * o, |g| {
                        for r in 0..b {
                            for c in 0..i {
                                let xv_rc = xv[r * i + c];
                                for q in 0..o {
                                    g[c * o + q] += xv_rc * gout[r * o + q];
                                }
                            }
                        }
                    });
                }
            }
            Op::RowBias(x, bias) => {
                let xs = self.value(*x).shape();
                let (b, o) = (xs[0], xs[1]);
                if self.needs(*x) {
                    Self::add_into(grads, *x, b * o, |g| {
                        for (gi, go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    });
                }
                if self.needs(*bias) {
                    Self::add_into(grads, *bias, o, |g| {
                        for r in 0..b {
                            for c in 0..o {
                                g[c] += gout[r * o + c];
                            }
                        }
                    });
                }
            }
            Op::ChannelBias(x, bias) => {
                let xs = self.value(*x).shape();
                let (b, f, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                if self.needs(*x) {
                    Self::add_into(grads, *x, b * f * hw, |g| {
                        for (gi, go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    });
                }
                if self.needs(*bias) {
                    Self::add_into(grads, *bias, f, |g| {
                        for bi in 0..b {
                            for fi in 0..f {
                                let base = (bi * f + fi) * hw;
                                let mut acc = 0.0;
                                for s in 0..hw {
                                    acc += gout[base + s];
                                }
                                g[fi] += acc;
                            }
                        }
                    });
                }
            }
            Op::Conv2d { x, k, stride, pad } => {
                let xt = self.value(*x);
                let kt = self.value(*k);
                let out_shape = node.value.shape();
                if self.needs(*x) {
                    let dx = conv_input_grad(gout, out_shape, kt, *stride, *pad, xt.shape());
                    Self::add_into(grads, *x, xt.numel(), |g| {
                        for (gi, d) in g.iter_mut().zip(&dx) {
                            *gi += d;
                        }
                    });
                }
                if self.needs(*k) {
                    let dk = conv_kernel_grad(gout, out_shape, xt, *stride, *pad, kt.shape());
                    Self::add_into(grads, *k, kt.numel(), |g| {
                        for (gi, d) in g.iter_mut().zip(&dk) {
                            *gi += d;
                        }
                    });
                }
            }
            Op::ConvT2d { x, k, stride, pad } => {
                let xt = self.value(*x);
                let kt = self.value(*k);
                let out_shape = node.value.shape();
                if self.needs(*x) {
                    // Adjointness: d(x) of the transpose is a plain conv of the
                    // upstream gradient with the same kernel.
                    let gt = Tensor::from_vec(out_shape, gout.to_vec()).expect("shape consistent");
                    let dx = conv2d_forward(&gt, kt, *stride, *pad).expect("shape consistent");
                    Self::add_into(grads, *x, xt.numel(), |g| {
                        for (gi, d) in g.iter_mut().zip(dx.data()) {
                            *gi += d;
                        }
                    });
                }
                if self.needs(*k) {
                    let dk = convt_kernel_grad(gout, out_shape, xt, *stride, *pad, kt.shape());
                    Self::add_into(grads, *k, kt.numel(), |g| {
                        for (gi, d) in g.iter_mut().zip(&dk) {
                            *gi += d;
                        }
                    });
                }
            }
            Op::L2NormRows(x) => {
                if self.needs(*x) {
                    let xs = self.value(*x).shape();
                    let (b, d) = (xs[0], xs[1]);
                    let xv = self.value(*x).data();
                    let yv = node.value.data();
                    Self::add_into(grads, *x, b * d, |g| {
                        for r in 0..b {
                            let xrow = &xv[r * d..(r + 1) * d];
                            let yrow = &yv[r * d..(r + 1) * d];
                            let grow = &gout[r * d..(r + 1) * d];
                            let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for c in 0..d {
                                g[r * d + c] += (grow[c] - yrow[c] * dot) / norm;
                            }
                        }
                    });
                }
            }
            Op::ConcatChannels(a, b) => {
                let sa = self.value(*a).shape();
                let sb = self.value(*b).shape();
                let (bn, c1, c2, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                let row = (c1 + c2) * hw;
                if self.needs(*a) {
                    Self::add_into(grads, *a, bn * c1 * hw, |g| {
                        for bi in 0..bn {
                            let src = &gout[bi * row..bi * row + c1 * hw];
                            let dst = &mut g[bi * c1 * hw..(bi + 1) * c1 * hw];
                            for (gi, go) in dst.iter_mut().zip(src) {
                                *gi += go;
                            }
                        }
                    });
                }
                if self.needs(*b) {
                    Self::add_into(grads, *b, bn * c2 * hw, |g| {
                        for bi in 0..bn {
                            let src = &gout[bi * row + c1 * hw..(bi + 1) * row];
                            let dst = &mut g[bi * c2 * hw..(bi + 1) * c2 * hw];
                            for (gi, go) in dst.iter_mut().zip(src) {
                                *gi += go;
                            }
                        }
                    });
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    Self::add_into(grads, *a, self.value(*a).numel(), |g| {
                        for (gi, go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    });
                }
            }
            Op::MeanAll(a) => {
                if self.needs(*a) {
                    let n = self.value(*a).numel();
                    let go = gout[0] / n as f64;
                    Self::add_into(grads, *a, n, |g| {
                        for gi in g.iter_mut() {
                            *gi += go;
                        }
                    });
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let n = self.value(*a).numel();
                    let go = gout[0];
                    Self::add_into(grads, *a, n, |g| {
                        for gi in g.iter_mut() {
                            *gi += go;
                        }
                    });
                }
            }
            Op::BceMean { probs, target } => {
                if self.needs(*probs) {
                    let pv = self.value(*probs).data();
                    let tv = target.data();
                    let n = pv.len() as f64;
                    let go = gout[0];
                    Self::add_into(grads, *probs, pv.len(), |g| {
                        for i in 0..g.len() {
                            g[i] += go * ((1.0 - tv[i]) / (1.0 - pv[i]) - tv[i] / pv[i]) / n;
                        }
                    });
                }
            }
            Op::TripletMargin { anchor, positive, negative, margin } => {
                let shape = self.value(*anchor).shape();
                let (b, d) = (shape[0], shape[1]);
                let av = self.value(*anchor).data();
                let pv = self.value(*positive).data();
                let nv = self.value(*negative).data();
                let go = gout[0] / b as f64;
                // Active rows: hinge strictly positive.
                let mut active = vec![false; b];
                for r in 0..b {
                    let (mut dap, mut dan) = (0.0, 0.0);
                    for c in 0..d {
                        let i = r * d + c;
                        dap += (av[i] - pv[i]) * (av[i] - pv[i]);
                        dan += (av[i] - nv[i]) * (av[i] - nv[i]);
                    }
                    active[r] = dap - dan + margin > 0.0;
                }
                if self.needs(*anchor) {
                    Self::add_into(grads, *anchor, b * d, |g| {
                        for r in 0..b {
                            if !active[r] {
                                continue;
                            }
                            for c in 0..d {
                                let i = r * d + c;
                                g[i] += go * 2.0 * (nv[i] - pv[i]);
                            }
                        }
                    });
                }
                if self.needs(*positive) {
                    Self::add_into(grads, *positive, b * d, |g| {
                        for r in 0..b {
                            if !active[r] {
                                continue;
                            }
                            for c in 0..d {
                                let i = r * d + c;
                                g[i] += go * 2.0 * (pv[i] - av[i]);
                            }
                        }
                    });
                }
                if self.needs(*negative) {
                    Self::add_into(grads, *negative, b * d, |g| {
                        for r in 0..b {
                            if !active[r] {
                                continue;
                            }
                            for c in 0..d {
                                let i = r * d + c;
                                g[i] += go * 2.0 * (av[i] - nv[i]);
                            }
                        }
                    });
                }
            }
            Op::SoftmaxRows(x) => {
                if self.needs(*x) {
                    let xs = self.value(*x).shape();
                    let (b, k) = (xs[0], xs[1]);
                    let yv = node.value.data();
                    Self::add_into(grads, *x, b * k, |g| {
                        for r in 0..b {
                            let yrow = &yv[r * k..(r + 1) * k];
                            let grow = &gout[r * k..(r + 1) * k];
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for c in 0..k {
                                g[r * k + c] += yrow[c] * (grow[c] - dot);
                            }
                        }
                    });
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                if self.needs(*logits) {
                    let xs = self.value(*logits).shape();
                    let (b, k) = (xs[0], xs[1]);
                    let xv = self.value(*logits).data();
                    let go = gout[0] / b as f64;
                    Self::add_into(grads, *logits, b * k, |g| {
                        let mut probs = vec![0.0; k];
                        for (r, &label) in labels.iter().enumerate() {
                            softmax_row(&xv[r * k..(r + 1) * k], &mut probs);
                            for c in 0..k {
                                let ind = if c == label { 1.0 } else { 0.0 };
                                g[r * k + c] += go * (probs[c] - ind);
                            }
                        }
                    });
                }
            }
        }
    }
}

/// Numerically stable logistic function.
///
/// The result is clamped into the largest representable open interval
/// inside (0,1), so downstream log-losses stay finite for any finite input.
pub fn sigmoid_scalar(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - 0.5 * f64::EPSILON)
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::from_vec(t.shape(), data).expect("same element count")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same element count")
}

fn conv_dims(op: &'static str, x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let xs = x.shape();
    let ks = k.shape();
    if xs.len() != 4 || ks.len() != 4 {
        return Err(Error::Shape {
            op,
            detail: format!("expected rank-4 input and kernel, got {xs:?} and {ks:?}"),
        });
    }
    if stride == 0 {
        return Err(Error::Argument("stride must be >= 1".into()));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kc != c {
        return Err(Error::Shape {
            op,
            detail: format!("kernel channel axis {kc} != input channel axis {c}"),
        });
    }
    Ok((b, c, h, w, f, kh, kw, pad))
}

/// Plain (non-taped) cross-correlation forward pass.
pub fn conv2d_forward(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, c, h, w, f, kh, kw, pad) = conv_dims("conv2d", x, k, stride, pad)?;
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::Shape {
            op: "conv2d",
            detail: format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            ),
        });
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let xv = x.data();
    let kv = k.data();
    let mut out = vec![0.0; b * f * oh * ow];
    for bi in 0..b {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xbase = ((bi * c + ci) * h + iy as usize) * w;
                            let kbase = ((fi * c + ci) * kh + ky) * kw;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += xv[xbase + ix as usize] * kv[kbase + kx];
                            }
                        }
                    }
                    out[((bi * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[b, f, oh, ow], out)
}

/// Transpose (adjoint) convolution forward pass.
pub fn conv2d_transpose_forward(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let xs = x.shape();
    let ks = k.shape();
    if xs.len() != 4 || ks.len() != 4 {
        return Err(Error::Shape {
            op: "conv2d_transpose",
            detail: format!("expected rank-4 input and kernel, got {xs:?} and {ks:?}"),
        });
    }
    if stride == 0 {
        return Err(Error::Argument("stride must be >= 1".into()));
    }
    let (b, f, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (kf, c, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kf != f {
        return Err(Error::Shape {
            op: "conv2d_transpose",
            detail: format!("kernel filter axis {kf} != input channel axis {f}"),
        });
    }
    let oh_signed = (h - 1) * stride + kh;
    let ow_signed = (w - 1) * stride + kw;
    if oh_signed <= 2 * pad || ow_signed <= 2 * pad {
        return Err(Error::Shape {
            op: "conv2d_transpose",
            detail: format!("padding {pad} swallows the whole {oh_signed}x{ow_signed} output"),
        });
    }
    let oh = oh_signed - 2 * pad;
    let ow = ow_signed - 2 * pad;
    let xv = x.data();
    let kv = k.data();
    let mut out = vec![0.0; b * c * oh * ow];
    for bi in 0..b {
        for fi in 0..f {
            for sy in 0..h {
                for sx in 0..w {
                    let v = xv[((bi * f + fi) * h + sy) * w + sx];
                    for ci in 0..c {
                        let kbase = (fi * c + ci) * kh * kw;
                        for ky in 0..kh {
                            let oy = (sy * stride + ky) as isize - pad as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            let obase = ((bi * c + ci) * oh + oy as usize) * ow;
                            for kx in 0..kw {
                                let ox = (sx * stride + kx) as isize - pad as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                out[obase + ox as usize] += v * kv[kbase + ky * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, c, oh, ow], out)
}

// Gradient w.r.t. the conv2d input: scatter of the output gradient through the kernel.
fn conv_input_grad(
    gout: &[f64],
    out_shape: &[usize],
    k: &Tensor,
    stride: usize,
    pad: usize,
    in_shape: &[usize],
) -> Vec<f64> {
    let (b, f, oh, ow) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
    let ks = k.shape();
    let (c, kh, kw) = (ks[1], ks[2], ks[3]);
    let (h, w) = (in_shape[2], in_shape[3]);
    let kv = k.data();
    let mut dx = vec![0.0; b * c * h * w];
    for bi in 0..b {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gout[((bi * f + fi) * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        let kbase = (fi * c + ci) * kh * kw;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xbase = ((bi * c + ci) * h + iy as usize) * w;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dx[xbase + ix as usize] += g * kv[kbase + ky * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

// Gradient w.r.t. the conv2d kernel: correlation of input with output gradient.
fn conv_kernel_grad(
    gout: &[f64],
    out_shape: &[usize],
    x: &Tensor,
    stride: usize,
    pad: usize,
    k_shape: &[usize],
) -> Vec<f64> {
    let (b, f, oh, ow) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
    let (c, kh, kw) = (k_shape[1], k_shape[2], k_shape[3]);
    let xs = x.shape();
    let (h, w) = (xs[2], xs[3]);
    let xv = x.data();
    let mut dk = vec![0.0; f * c * kh * kw];
    for bi in 0..b {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gout[((bi * f + fi) * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        let kbase = (fi * c + ci) * kh * kw;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xbase = ((bi * c + ci) * h + iy as usize) * w;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dk[kbase + ky * kw + kx] += g * xv[xbase + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    dk
}

// Gradient w.r.t. the transpose-conv kernel. The tape input sits on the
// "output position" side of the correlation, the upstream gradient on the
// "input position" side.
fn convt_kernel_grad(
    gout: &[f64],
    out_shape: &[usize],
    x: &Tensor,
    stride: usize,
    pad: usize,
    k_shape: &[usize],
) -> Vec<f64> {
    let xs = x.shape();
    let (b, f, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (c, kh, kw) = (k_shape[1], k_shape[2], k_shape[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let xv = x.data();
    let mut dk = vec![0.0; f * c * kh * kw];
    for bi in 0..b {
        for fi in 0..f {
            for sy in 0..h {
                for sx in 0..w {
                    let v = xv[((bi * f + fi) * h + sy) * w + sx];
                    if v == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        let kbase = (fi * c + ci) * kh * kw;
                        for ky in 0..kh {
                            let oy = (sy * stride + ky) as isize - pad as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            let obase = ((bi * c + ci) * oh + oy as usize) * ow;
                            for kx in 0..kw {
                                let ox = (sx * stride + kx) as isize - pad as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                dk[kbase + ky * kw + kx] += v * gout[obase + ox as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    dk
}
