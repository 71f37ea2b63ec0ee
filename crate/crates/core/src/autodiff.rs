//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation in execution order, so the node list is
//! already topologically sorted and `backward` simply walks it in reverse.
//! Every forward result is checked for finiteness; a NaN or infinity is
//! reported as [`Error::NonFinite`] at the op that produced it.
//!
//! Bilinear upsampling uses half-pixel sample centers: output index `o` on an
//! axis of input length `n` and output length `m` samples the input at
//! `x = (o + 0.5) * n / m - 0.5`, clamped to `[0, n - 1]`, and blends the two
//! neighbouring input samples `floor(x)` and `floor(x) + 1` linearly.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Probabilities below this are clamped inside the log of the hybrid loss.
pub const LOG_CLAMP: f64 = 1e-7;
/// Slack allowed when validating that targets and predictions lie in `[0, 1]`.
pub const PROB_SLACK: f64 = 1e-6;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Upsample2x(Var),
    Relu(Var),
    SoftmaxChannels(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SwapChannels(Var),
    HybridLoss { target: Var, pred: Var },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug, Clone)]
pub struct Gradients<F: Scalar = f32> {
    grads: BTreeMap<Var, Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<F>> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    spent: bool,
    relu_margin: f64,
    relu_signature: u64,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            spent: false,
            relu_margin: f64::INFINITY,
            relu_signature: FNV_OFFSET,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest |x| seen at the input of any relu since the tape was created.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }

    /// Hash of the sign pattern of every relu input, in recording order.
    pub fn relu_signature(&self) -> u64 {
        self.relu_signature
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.spent = false;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn get(&self, var: Var) -> Result<&Tensor<F>> {
        self.nodes
            .get(var.0)
            .map(|n| &n.value)
            .ok_or(Error::UnknownVar(var.0))
    }

    /// Value of a recorded variable. Panics on a handle from another tape.
    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes.get(var.0).is_some_and(|n| n.requires_grad)
    }

    fn node(&self, var: Var) -> Result<&Node<F>> {
        self.nodes.get(var.0).ok_or(Error::UnknownVar(var.0))
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Copy of `var` that is cut off from gradient flow.
    pub fn detach(&mut self, var: Var) -> Result<Var> {
        let value = self.node(var)?.value.clone();
        Ok(self.constant(value))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = &self.node(input)?.value;
        let w = &self.node(kernel)?.value;
        let b = match bias {
            Some(b) => Some(&self.node(b)?.value),
            None => None,
        };
        let geom = ConvGeom::new(x, w, b, stride, padding)?;
        let out = conv2d_forward(&geom, x.data(), w.data(), b.map(|b| b.data()));
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            &inputs,
        )
    }

    pub fn upsample_bilinear2x(&mut self, input: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        let [b, c, h, w] = x.dims4("upsample_bilinear2x")?;
        let rows = axis_weights(h, 2 * h);
        let cols = axis_weights(w, 2 * w);
        let mut out = Tensor::zeros(&[b, c, 2 * h, 2 * w]);
        {
            let src = x.data();
            let dst = out.data_mut();
            for plane in 0..b * c {
                let s = &src[plane * h * w..(plane + 1) * h * w];
                let d = &mut dst[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                for (oy, ry) in rows.iter().enumerate() {
                    for (ox, rx) in cols.iter().enumerate() {
                        d[oy * 2 * w + ox] = bilinear_sample(s, w, ry, rx);
                    }
                }
            }
        }
        self.push("upsample_bilinear2x", out, Op::Upsample2x(input), &[input])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        let mut margin = self.relu_margin;
        let mut sig = self.relu_signature;
        let mut out = x.clone();
        for v in out.data_mut() {
            margin = margin.min(v.as_f64().abs());
            sig = (sig ^ u64::from(*v > F::zero())).wrapping_mul(FNV_PRIME);
            if *v <= F::zero() {
                *v = F::zero();
            }
        }
        self.relu_margin = margin;
        self.relu_signature = sig;
        self.push("relu", out, Op::Relu(input), &[input])
    }

    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        let [b, c, h, w] = x.dims4("softmax_channels")?;
        let hw = h * w;
        let mut out = x.clone();
        let data = out.data_mut();
        for bi in 0..b {
            let base = bi * c * hw;
            for p in 0..hw {
                let mut max = F::neg_infinity();
                for ci in 0..c {
                    max = max.max(data[base + ci * hw + p]);
                }
                let mut total = F::zero();
                for ci in 0..c {
                    let e = (data[base + ci * hw + p] - max).exp();
                    data[base + ci * hw + p] = e;
                    total = total + e;
                }
                for ci in 0..c {
                    data[base + ci * hw + p] = data[base + ci * hw + p] / total;
                }
            }
        }
        self.push("softmax_channels", out, Op::SoftmaxChannels(input), &[input])
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no operands"))?;
        let [b, _, h, w] = self.node(*first)?.value.dims4("concat_channels")?;
        let mut channels = 0;
        for v in inputs {
            let [vb, vc, vh, vw] = self.node(*v)?.value.dims4("concat_channels")?;
            if (vb, vh, vw) != (b, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("operand {:?} vs [{b}, _, {h}, {w}]", [vb, vc, vh, vw]),
                ));
            }
            channels += vc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(b * channels * hw);
        for bi in 0..b {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let c = t.dims()[1];
                data.extend_from_slice(&t.data()[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let out = Tensor::new(vec![b, channels, h, w], data)?;
        self.push("concat_channels", out, Op::Concat(inputs.to_vec()), inputs)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op<F>,
        f: impl Fn(F, F) -> F,
    ) -> Result<Var> {
        let x = &self.node(a)?.value;
        let y = &self.node(b)?.value;
        if !x.same_dims(y) {
            return Err(Error::shape(name, format!("{:?} vs {:?}", x.dims(), y.dims())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(x.dims().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |p, q| p * q)
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Result<Var> {
        let mut out = self.node(a)?.value.clone();
        out.data_mut().iter_mut().for_each(|v| *v = *v * factor);
        self.push("scale", out, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, offset: F) -> Result<Var> {
        let mut out = self.node(a)?.value.clone();
        out.data_mut().iter_mut().for_each(|v| *v = *v + offset);
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.node(a)?.value.sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = &self.node(a)?.value;
        let total = x.sum() / F::from_f64(x.len() as f64);
        self.push("mean", Tensor::scalar(total), Op::Mean(a), &[a])
    }

    /// Reverses the order of the channel axis (for two classes, a swap).
    pub fn swap_channels(&mut self, a: Var) -> Result<Var> {
        let x = &self.node(a)?.value;
        let [b, c, h, w] = x.dims4("swap_channels")?;
        let hw = h * w;
        let mut out = Tensor::zeros(x.dims());
        for bi in 0..b {
            for ci in 0..c {
                let src = (bi * c + ci) * hw;
                let dst = (bi * c + (c - 1 - ci)) * hw;
                out.data_mut()[dst..dst + hw].copy_from_slice(&x.data()[src..src + hw]);
            }
        }
        self.push("swap_channels", out, Op::SwapChannels(a), &[a])
    }

    /// `-(1/N) * sum_{c,n} [ y log p + y p / (y^2 + p^2) ]` where `N` counts
    /// pixels (all axes except the channel axis), `log` clamps `p` at
    /// [`LOG_CLAMP`] and the ratio is defined as 0 when `y = p = 0`.
    pub fn hybrid_loss(&mut self, target: Var, pred: Var) -> Result<Var> {
        let y = &self.node(target)?.value;
        let p = &self.node(pred)?.value;
        if !y.same_dims(p) {
            return Err(Error::shape(
                "hybrid_loss",
                format!("target {:?} vs prediction {:?}", y.dims(), p.dims()),
            ));
        }
        if p.rank() < 2 {
            return Err(Error::shape("hybrid_loss", "need a channel axis at dim 1"));
        }
        check_unit_interval("target", y)?;
        check_unit_interval("prediction", p)?;
        let pixels = p.len() / p.dims()[1];
        let clamp = F::from_f64(LOG_CLAMP);
        let mut total = F::zero();
        for (&yv, &pv) in y.data().iter().zip(p.data()) {
            total = total + yv * pv.max(clamp).ln() + ratio(yv, pv);
        }
        let value = -total / F::from_f64(pixels as f64);
        self.push(
            "hybrid_loss",
            Tensor::scalar(value),
            Op::HybridLoss { target, pred },
            &[target, pred],
        )
    }

    /// Accumulates gradients of the scalar `loss` into every `requires_grad`
    /// leaf, then clears the tape. Unused leaves receive exact zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.spent {
            return Err(Error::TapeSpent);
        }
        let root = self.node(loss)?;
        if !root.value.is_scalar() {
            return Err(Error::NotScalar(root.value.dims().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(root.value.dims(), F::one()));

        let mut leaves = BTreeMap::new();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.dims()));
                leaves.insert(Var(idx), g);
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads)?;
        }
        // Leaves recorded after the loss never influenced it.
        for (idx, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                leaves.insert(Var(idx), Tensor::zeros(node.value.dims()));
            }
        }
        self.nodes.clear();
        self.spent = true;
        Ok(Gradients { grads: leaves })
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[kernel.0].value;
                let b = bias.map(|b| &self.nodes[b.0].value);
                let geom = ConvGeom::new(x, w, b, *stride, *padding)?;
                if wants(input) {
                    let gi = conv2d_grad_input(&geom, g.data(), w.data());
                    accumulate(grads, *input, gi);
                }
                if wants(kernel) {
                    let gk = conv2d_grad_kernel(&geom, g.data(), x.data());
                    accumulate(grads, *kernel, gk);
                }
                if let Some(b) = bias.filter(|b| wants(b)) {
                    accumulate(grads, b, conv2d_grad_bias(&geom, g.data()));
                }
            }
            Op::Upsample2x(input) => {
                let x = &self.nodes[input.0].value;
                let [b, c, h, w] = x.dims4("upsample_bilinear2x")?;
                let rows = axis_weights(h, 2 * h);
                let cols = axis_weights(w, 2 * w);
                let mut gi = Tensor::zeros(x.dims());
                let go = g.data();
                let dst = gi.data_mut();
                for plane in 0..b * c {
                    let d = &mut dst[plane * h * w..(plane + 1) * h * w];
                    let s = &go[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    for (oy, ry) in rows.iter().enumerate() {
                        for (ox, rx) in cols.iter().enumerate() {
                            bilinear_scatter(d, w, ry, rx, s[oy * 2 * w + ox]);
                        }
                    }
                }
                accumulate(grads, *input, gi);
            }
            Op::Relu(input) => {
                let x = &self.nodes[input.0].value;
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > F::zero() { gv } else { F::zero() })
                    .collect();
                accumulate(grads, *input, Tensor::new(x.dims().to_vec(), data)?);
            }
            Op::SoftmaxChannels(input) => {
                let p = &node.value;
                let [b, c, h, w] = p.dims4("softmax_channels")?;
                let hw = h * w;
                let mut gi = Tensor::zeros(p.dims());
                let (pd, gd) = (p.data(), g.data());
                let out = gi.data_mut();
                for bi in 0..b {
                    let base = bi * c * hw;
                    for px in 0..hw {
                        let mut dot = F::zero();
                        for ci in 0..c {
                            let k = base + ci * hw + px;
                            dot = dot + pd[k] * gd[k];
                        }
                        for ci in 0..c {
                            let k = base + ci * hw + px;
                            out[k] = pd[k] * (gd[k] - dot);
                        }
                    }
                }
                accumulate(grads, *input, gi);
            }
            Op::Concat(inputs) => {
                let [b, total_c, h, w] = node.value.dims4("concat_channels")?;
                let hw = h * w;
                let mut offset = 0;
                for v in inputs {
                    let c = self.nodes[v.0].value.dims()[1];
                    if wants(v) {
                        let mut data = Vec::with_capacity(b * c * hw);
                        for bi in 0..b {
                            let start = (bi * total_c + offset) * hw;
                            data.extend_from_slice(&g.data()[start..start + c * hw]);
                        }
                        accumulate(grads, *v, Tensor::new(vec![b, c, h, w], data)?);
                    }
                    offset += c;
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(b) {
                    accumulate(grads, *b, map(g, |v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if wants(a) {
                    accumulate(grads, *a, zip(g, y, |gv, yv| gv * yv));
                }
                if wants(b) {
                    accumulate(grads, *b, zip(g, x, |gv, xv| gv * xv));
                }
            }
            Op::Scale(a, factor) => {
                let factor = *factor;
                accumulate(grads, *a, map(g, |v| v * factor));
            }
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Sum(a) => {
                let dims = self.nodes[a.0].value.dims();
                accumulate(grads, *a, Tensor::full(dims, g.item()));
            }
            Op::Mean(a) => {
                let x = &self.nodes[a.0].value;
                let share = g.item() / F::from_f64(x.len() as f64);
                accumulate(grads, *a, Tensor::full(x.dims(), share));
            }
            Op::SwapChannels(a) => {
                let [b, c, h, w] = g.dims4("swap_channels")?;
                let hw = h * w;
                let mut gi = Tensor::zeros(g.dims());
                for bi in 0..b {
                    for ci in 0..c {
                        let src = (bi * c + ci) * hw;
                        let dst = (bi * c + (c - 1 - ci)) * hw;
                        gi.data_mut()[dst..dst + hw].copy_from_slice(&g.data()[src..src + hw]);
                    }
                }
                accumulate(grads, *a, gi);
            }
            Op::HybridLoss { target, pred } => {
                let y = &self.nodes[target.0].value;
                let p = &self.nodes[pred.0].value;
                let pixels = p.len() / p.dims()[1];
                let scale = -g.item() / F::from_f64(pixels as f64);
                let clamp = F::from_f64(LOG_CLAMP);
                if wants(pred) {
                    let gp = zip(y, p, |yv, pv| {
                        let log_term = if pv > clamp { yv / pv } else { F::zero() };
                        scale * (log_term + ratio_grad(yv, pv))
                    });
                    accumulate(grads, *pred, gp);
                }
                if wants(target) {
                    let gy = zip(y, p, |yv, pv| scale * (pv.max(clamp).ln() + ratio_grad(pv, yv)));
                    accumulate(grads, *target, gy);
                }
            }
        }
        Ok(())
    }
}

fn check_unit_interval<F: Scalar>(what: &str, t: &Tensor<F>) -> Result<()> {
    let lo = F::from_f64(-PROB_SLACK);
    let hi = F::from_f64(1.0 + PROB_SLACK);
    if let Some(v) = t.data().iter().find(|&&v| v < lo || v > hi) {
        return Err(Error::InvalidArgument(format!(
            "hybrid_loss {what} value {v} outside [0, 1]"
        )));
    }
    Ok(())
}

/// `y p / (y^2 + p^2)` with `0 / 0 := 0`.
fn ratio<F: Scalar>(y: F, p: F) -> F {
    let denom = y * y + p * p;
    if denom == F::zero() {
        F::zero()
    } else {
        y * p / denom
    }
}

/// Partial derivative of `ratio(a, b)` with respect to `b`:
/// `a (a^2 - b^2) / (a^2 + b^2)^2`. The ratio is symmetric, so the same
/// function gives the derivative in either argument.
fn ratio_grad<F: Scalar>(a: F, b: F) -> F {
    let denom = a * a + b * b;
    if denom == F::zero() {
        F::zero()
    } else {
        a * (a * a - b * b) / (denom * denom)
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Tensor<F>>], var: Var, g: Tensor<F>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e = *e + *v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn map<F: Scalar>(t: &Tensor<F>, f: impl Fn(F) -> F) -> Tensor<F> {
    Tensor::new(t.dims().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same dims")
}

fn zip<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.dims().to_vec(), data).expect("same dims")
}

/// Sample positions for resampling an axis of `in_len` samples to `out_len`
/// samples with half-pixel centers: `(lower index, upper index, upper weight)`.
pub fn axis_weights(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let x = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, x - lo as f64)
        })
        .collect()
}

fn bilinear_sample<F: Scalar>(
    src: &[F],
    width: usize,
    &(y0, y1, wy): &(usize, usize, f64),
    &(x0, x1, wx): &(usize, usize, f64),
) -> F {
    // lerp form keeps constant regions exactly constant
    let (wy, wx) = (F::from_f64(wy), F::from_f64(wx));
    let lerp = |a: F, b: F, t: F| a + (b - a) * t;
    let top = lerp(src[y0 * width + x0], src[y0 * width + x1], wx);
    let bottom = lerp(src[y1 * width + x0], src[y1 * width + x1], wx);
    lerp(top, bottom, wy)
}

fn bilinear_scatter<F: Scalar>(
    dst: &mut [F],
    width: usize,
    &(y0, y1, wy): &(usize, usize, f64),
    &(x0, x1, wx): &(usize, usize, f64),
    g: F,
) {
    let (wy, wx) = (F::from_f64(wy), F::from_f64(wx));
    let one = F::one();
    let top = g * (one - wy);
    let bottom = g * wy;
    dst[y0 * width + x0] = dst[y0 * width + x0] + top * (one - wx);
    dst[y0 * width + x1] = dst[y0 * width + x1] + top * wx;
    dst[y1 * width + x0] = dst[y1 * width + x0] + bottom * (one - wx);
    dst[y1 * width + x1] = dst[y1 * width + x1] + bottom * wx;
}

/// Plain bilinear resize of a single `height × width` plane.
pub fn resize_plane<F: Scalar>(
    src: &[F],
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<F> {
    if (height, width) == (out_h, out_w) {
        return src.to_vec();
    }
    let rows = axis_weights(height, out_h);
    let cols = axis_weights(width, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for ry in &rows {
        for rx in &cols {
            out.push(bilinear_sample(src, width, ry, rx));
        }
    }
    out
}

struct ConvGeom {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    k: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn new<F: Scalar>(
        x: &Tensor<F>,
        w: &Tensor<F>,
        b: Option<&Tensor<F>>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [batch, in_c, in_h, in_w] = x.dims4("conv2d")?;
        let [out_c, k_in, kh, kw] = w.dims4("conv2d")?;
        if k_in != in_c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {in_c} channels, kernel expects {k_in}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape("conv2d", format!("non-square kernel {kh}×{kw}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if let Some(b) = b {
            if b.dims() != [out_c] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias dims {:?}, expected [{out_c}]", b.dims()),
                ));
            }
        }
        if in_h + 2 * padding < kh || in_w + 2 * padding < kw {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        Ok(Self {
            batch,
            in_c,
            in_h,
            in_w,
            out_c,
            k: kh,
            out_h: (in_h + 2 * padding - kh) / stride + 1,
            out_w: (in_w + 2 * padding - kw) / stride + 1,
            stride,
            padding,
        })
    }

    /// Range of output coordinates whose tap `kpos` lands inside `[0, in_len)`.
    fn valid(&self, kpos: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        // o * s + kpos - p in [0, in_len)
        let lo = if kpos >= p { 0 } else { (p - kpos).div_ceil(s) };
        let hi = if in_len + p > kpos {
            ((in_len + p - kpos - 1) / s + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn conv2d_forward<F: Scalar>(g: &ConvGeom, x: &[F], w: &[F], b: Option<&[F]>) -> Tensor<F> {
    let mut out = Tensor::zeros(&[g.batch, g.out_c, g.out_h, g.out_w]);
    let (s, p, k) = (g.stride, g.padding, g.k);
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let dst = out.data_mut();
    for bi in 0..g.batch {
        for co in 0..g.out_c {
            let o = &mut dst[(bi * g.out_c + co) * out_plane..][..out_plane];
            if let Some(b) = b {
                o.iter_mut().for_each(|v| *v = b[co]);
            }
            for ci in 0..g.in_c {
                let src = &x[(bi * g.in_c + ci) * in_plane..][..in_plane];
                for ky in 0..k {
                    let (oy0, oy1) = g.valid(ky, g.in_h, g.out_h);
                    for kx in 0..k {
                        let wv = w[((co * g.in_c + ci) * k + ky) * k + kx];
                        let (ox0, ox1) = g.valid(kx, g.in_w, g.out_w);
                        for oy in oy0..oy1 {
                            let row = (oy * s + ky - p) * g.in_w;
                            let orow = &mut o[oy * g.out_w..(oy + 1) * g.out_w];
                            for ox in ox0..ox1 {
                                orow[ox] = orow[ox] + wv * src[row + ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_grad_input<F: Scalar>(g: &ConvGeom, go: &[F], w: &[F]) -> Tensor<F> {
    let mut gi = Tensor::zeros(&[g.batch, g.in_c, g.in_h, g.in_w]);
    let (s, p, k) = (g.stride, g.padding, g.k);
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let dst = gi.data_mut();
    for bi in 0..g.batch {
        for co in 0..g.out_c {
            let o = &go[(bi * g.out_c + co) * out_plane..][..out_plane];
            for ci in 0..g.in_c {
                let d = &mut dst[(bi * g.in_c + ci) * in_plane..][..in_plane];
                for ky in 0..k {
                    let (oy0, oy1) = g.valid(ky, g.in_h, g.out_h);
                    for kx in 0..k {
                        let wv = w[((co * g.in_c + ci) * k + ky) * k + kx];
                        let (ox0, ox1) = g.valid(kx, g.in_w, g.out_w);
                        for oy in oy0..oy1 {
                            let row = (oy * s + ky - p) * g.in_w;
                            let orow = &o[oy * g.out_w..(oy + 1) * g.out_w];
                            for ox in ox0..ox1 {
                                let idx = row + ox * s + kx - p;
                                d[idx] = d[idx] + wv * orow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    gi
}

fn conv2d_grad_kernel<F: Scalar>(g: &ConvGeom, go: &[F], x: &[F]) -> Tensor<F> {
    let mut gk = Tensor::zeros(&[g.out_c, g.in_c, g.k, g.k]);
    let (s, p, k) = (g.stride, g.padding, g.k);
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let dst = gk.data_mut();
    for bi in 0..g.batch {
        for co in 0..g.out_c {
            let o = &go[(bi * g.out_c + co) * out_plane..][..out_plane];
            for ci in 0..g.in_c {
                let src = &x[(bi * g.in_c + ci) * in_plane..][..in_plane];
                for ky in 0..k {
                    let (oy0, oy1) = g.valid(ky, g.in_h, g.out_h);
                    for kx in 0..k {
                        let (ox0, ox1) = g.valid(kx, g.in_w, g.out_w);
                        let mut acc = F::zero();
                        for oy in oy0..oy1 {
                            let row = (oy * s + ky - p) * g.in_w;
                            let orow = &o[oy * g.out_w..(oy + 1) * g.out_w];
                            for ox in ox0..ox1 {
                                acc = acc + orow[ox] * src[row + ox * s + kx - p];
                            }
                        }
                        let idx = ((co * g.in_c + ci) * k + ky) * k + kx;
                        dst[idx] = dst[idx] + acc;
                    }
                }
            }
        }
    }
    gk
}

fn conv2d_grad_bias<F: Scalar>(g: &ConvGeom, go: &[F]) -> Tensor<F> {
    let out_plane = g.out_h * g.out_w;
    let mut gb = Tensor::zeros(&[g.out_c]);
    for bi in 0..g.batch {
        for co in 0..g.out_c {
            let plane = &go[(bi * g.out_c + co) * out_plane..][..out_plane];
            let total: F = plane.iter().copied().sum();
            gb.data_mut()[co] = gb.data()[co] + total;
        }
    }
    gb
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_scaling_kernel_doubles_input() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).dims(), &[1, 1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_single_window_dot_product() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        // oracle: 1*1 + 2*0 + 3*0 + 4*1
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv_stride_two_halves_side() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 256, 256], 0.5));
        let k = tape.constant(Tensor::full(&[2, 1, 3, 3], 0.1));
        let y = tape.conv2d(x, k, None, 2, 1).unwrap();
        assert_eq!(tape.value(y).dims(), &[1, 2, 128, 128]);
        let k5 = tape_kernel(&mut tape, 5);
        let y = tape.conv2d(x, k5, None, 2, 2).unwrap();
        assert_eq!(tape.value(y).dims(), &[1, 1, 128, 128]);
    }

    fn tape_kernel(tape: &mut Tape<f32>, k: usize) -> Var {
        tape.constant(Tensor::full(&[1, 1, k, k], 0.01))
    }

    #[test]
    fn conv_channel_mismatch_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, k, None, 1, 1),
            Err(Error::Shape { op: "conv2d", .. })
        ));
    }

    #[test]
    fn upsample_extends_a_single_pixel() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 1, 1], 0.7));
        let y = tape.upsample_bilinear2x(x).unwrap();
        assert_eq!(tape.value(y).dims(), &[1, 1, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn upsample_half_pixel_centers() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 1, 2], &[0.0, 2.0]));
        let y = tape.upsample_bilinear2x(x).unwrap();
        // Independent evaluation of the half-pixel formula per output pixel.
        let oracle: Vec<f64> = (0..4)
            .map(|o| {
                let pos = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
                0.0 * (1.0 - pos) + 2.0 * pos
            })
            .collect();
        assert_eq!(oracle, vec![0.0, 0.5, 1.5, 2.0]);
        let got = tape.value(y);
        assert_eq!(got.dims(), &[1, 1, 2, 4]);
        for row in got.data().chunks(4) {
            assert_eq!(row, oracle.as_slice());
        }
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let p = tape.softmax_channels(x).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![2], vec![-1.0, 3.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 3.0]);
    }

    #[test]
    fn concat_adds_channel_counts() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 2, 4, 4]));
        let b = tape.constant(Tensor::full(&[2, 3, 4, 4], 1.0));
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(c).dims(), &[2, 5, 4, 4]);
        let bad = tape.constant(Tensor::zeros(&[2, 1, 3, 4]));
        assert!(tape.concat_channels(&[a, bad]).is_err());
    }

    #[test]
    fn linear_form_gradient_is_the_fixed_operand() {
        let mut tape = Tape::<f64>::new();
        let xv = t(&[4], &[1.0, -2.0, 0.5, 3.0]);
        let w = tape.leaf(t(&[4], &[0.3, 0.1, -0.7, 2.0]), true);
        let x = tape.constant(xv.clone());
        let prod = tape.mul(w, x).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &xv);
    }

    #[test]
    fn mean_square_gradient() {
        let mut tape = Tape::<f64>::new();
        let wv = [0.5, -1.0, 2.0];
        let w = tape.leaf(t(&[3], &wv), true);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.mean(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        let expected: Vec<f64> = wv.iter().map(|v| 2.0 * v / 3.0).collect();
        assert_eq!(grads.get(w).unwrap().data(), expected.as_slice());
    }

    #[test]
    fn unused_leaf_gets_exact_zero() {
        let mut tape = Tape::<f32>::new();
        let used = tape.leaf(Tensor::full(&[2], 1.0), true);
        let unused = tape.leaf(Tensor::full(&[3], 1.0), true);
        let loss = tape.sum(used).unwrap();
        let late = tape.leaf(Tensor::full(&[1], 1.0), true);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.get(late).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::full(&[2], 1.0), true);
        assert!(matches!(tape.backward(w), Err(Error::NotScalar(_))));
        let loss = tape.sum(w).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeSpent)));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let d = tape.detach(w).unwrap();
        let prod = tape.mul(w, d).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        // d(w * stop(w))/dw = stop(w), not 2w
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1], f32::MAX));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite("scale"))));
    }

    #[test]
    fn axis_weights_identity_when_lengths_match() {
        for (i, &(lo, hi, w)) in axis_weights(5, 5).iter().enumerate() {
            assert_eq!((lo, w), (i, 0.0));
            assert!(hi == i + 1 || hi == 4);
        }
    }
}
