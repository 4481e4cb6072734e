use super::kernels;
use super::param::{ParamId, ParamTensor};
use super::tensor::{Dims, Tensor4};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { input: Var, weight: Var, bias: Var },
    Relu(Var),
    MaxPool { input: Var, argmax: Vec<u32> },
    Upsample(Var),
    Concat(Var, Var),
    Mse { pred: Var, target: Var },
    WeightedSum { input: Var, weights: Tensor4 },
    SqNorm(Vec<Var>),
    Add(Var, Var),
    Scale(Var, f32),
}

#[derive(Debug)]
struct Node {
    value: Tensor4,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
    /// Full-precision copy of scalar results, kept for loss reporting and
    /// finite-difference checks.
    exact: Option<f64>,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order of the (acyclic) graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor4>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4, op: Op, requires_grad: bool) -> Var {
        self.push_node(Node {
            value,
            op,
            requires_grad,
            param: None,
            exact: None,
        })
    }

    fn push_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> Dims {
        self.nodes[v.0].value.dims()
    }

    /// Scalar result in full precision where the op computed one.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        match n.exact {
            Some(x) => Ok(x),
            None => n.value.item().map(f64::from),
        }
    }

    /// Gradient of the last [`Tape::backward`] target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor4> {
        self.grads[v.0].as_ref()
    }

    /// A value that does not take part in differentiation (inputs, targets).
    pub fn constant(&mut self, value: Tensor4) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf not tied to a parameter (used for input gradients).
    pub fn leaf(&mut self, value: Tensor4) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a trainable parameter; its gradient is routed back by
    /// [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, id: ParamId, p: &ParamTensor) -> Var {
        self.push_node(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
            exact: None,
        })
    }

    /// Stride-1 convolution with zero "same" padding.
    pub fn conv2d_same(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.dims(input);
        let w = self.dims(weight);
        let b = self.dims(bias);
        let k = w.height;
        if w.width != k || k.is_multiple_of(2) {
            return Err(Error::shape(format!(
                "conv kernel must be odd and square, got {w}"
            )));
        }
        if w.channels != x.channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got input {x}",
                w.channels
            )));
        }
        if b.numel() != w.batch {
            return Err(Error::shape(format!(
                "conv bias {b} does not match {} output channels",
                w.batch
            )));
        }
        let out_dims = Dims::new(x.batch, w.batch, x.height, x.width);
        let mut out = Tensor4::zeros(out_dims);
        let plane = x.plane();
        let kc = x.channels * k * k;
        let mut cols = if k > 1 { vec![0.0; kc * plane] } else { Vec::new() };
        {
            let xv = self.value(input).data();
            let wv = self.value(weight).data();
            let bv = self.value(bias).data();
            let o = out.data_mut();
            for s in 0..x.batch {
                let xs = &xv[s * x.sample()..(s + 1) * x.sample()];
                let os = &mut o[s * out_dims.sample()..(s + 1) * out_dims.sample()];
                for (c, row) in os.chunks_exact_mut(plane).enumerate() {
                    row.fill(bv[c]);
                }
                let rhs: &[f32] = if k > 1 {
                    kernels::im2col(xs, x.channels, x.height, x.width, k, &mut cols);
                    &cols
                } else {
                    xs
                };
                kernels::gemm(w.batch, kc, plane, 1.0, wv, (kc, 1), rhs, (plane, 1), 1.0, os, (plane, 1));
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(out, Op::Conv { input, weight, bias }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| v.max(0.0));
        let rg = self.rg(input);
        self.push(out, Op::Relu(input), rg)
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let d = self.dims(input);
        if !d.height.is_multiple_of(2) || !d.width.is_multiple_of(2) {
            return Err(Error::shape(format!("max-pool needs even spatial dims, got {d}")));
        }
        let od = Dims::new(d.batch, d.channels, d.height / 2, d.width / 2);
        let mut out = Tensor4::zeros(od);
        let mut argmax = vec![0u32; od.numel()];
        kernels::maxpool2_forward(
            self.value(input).data(),
            d.batch * d.channels,
            d.height,
            d.width,
            out.data_mut(),
            &mut argmax,
        );
        let rg = self.rg(input);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    pub fn upsample_bilinear2(&mut self, input: Var) -> Var {
        let d = self.dims(input);
        let od = Dims::new(d.batch, d.channels, 2 * d.height, 2 * d.width);
        let mut out = Tensor4::zeros(od);
        if d.numel() > 0 {
            kernels::upsample2_forward(
                self.value(input).data(),
                d.batch * d.channels,
                d.height,
                d.width,
                out.data_mut(),
            );
        }
        let rg = self.rg(input);
        self.push(out, Op::Upsample(input), rg)
    }

    /// Channel concatenation, `a`'s channels first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let da = self.dims(a);
        let db = self.dims(b);
        if (da.batch, da.height, da.width) != (db.batch, db.height, db.width) {
            return Err(Error::shape(format!("cannot concatenate {da} with {db}")));
        }
        let od = Dims::new(da.batch, da.channels + db.channels, da.height, da.width);
        let mut data = Vec::with_capacity(od.numel());
        for s in 0..da.batch {
            data.extend_from_slice(self.value(a).sample(s));
            data.extend_from_slice(self.value(b).sample(s));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor4::from_vec(od, data)?, Op::Concat(a, b), rg))
    }

    /// Batch-mean of per-sample summed squared error: `(1/B) sum_b ||pred_b - target_b||^2`.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let dp = self.dims(pred);
        let dt = self.dims(target);
        if dp != dt {
            return Err(Error::shape(format!("mse: prediction {dp} vs target {dt}")));
        }
        if self.rg(target) {
            return Err(Error::usage("mse target must not require gradients"));
        }
        let total: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&p, &t)| {
                let d = p as f64 - t as f64;
                d * d
            })
            .sum();
        let loss = total / dp.batch.max(1) as f64;
        let rg = self.rg(pred);
        let v = self.push(Tensor4::scalar(loss as f32), Op::Mse { pred, target }, rg);
        self.nodes[v.0].exact = Some(loss);
        Ok(v)
    }

    /// `sum(input * weights)` with fixed weights; a linear probe for tests
    /// and gradient checks.
    pub fn weighted_sum(&mut self, input: Var, weights: Tensor4) -> Result<Var> {
        let d = self.dims(input);
        if weights.dims() != d {
            return Err(Error::shape(format!(
                "weighted sum: weights {} vs input {d}",
                weights.dims()
            )));
        }
        let s: f64 = self
            .value(input)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let rg = self.rg(input);
        let v = self.push(Tensor4::scalar(s as f32), Op::WeightedSum { input, weights }, rg);
        self.nodes[v.0].exact = Some(s);
        Ok(v)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let ones = Tensor4::full(self.dims(input), 1.0);
        self.weighted_sum(input, ones)
    }

    /// Sum of squared entries over all of `inputs`.
    pub fn sq_norm(&mut self, inputs: &[Var]) -> Var {
        let s: f64 = inputs.iter().map(|&v| self.value(v).sq_norm()).sum();
        let rg = inputs.iter().any(|&v| self.rg(v));
        let v = self.push(Tensor4::scalar(s as f32), Op::SqNorm(inputs.to_vec()), rg);
        self.nodes[v.0].exact = Some(s);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(format!("add: {da} vs {db}")));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        let exact = match (self.node(a).exact, self.node(b).exact) {
            (Some(x), Some(y)) => Some(x + y),
            _ => None,
        };
        let v = self.push(out, Op::Add(a, b), rg);
        self.nodes[v.0].exact = exact;
        Ok(v)
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let out = self.value(input).map(|v| v * factor);
        let rg = self.rg(input);
        let exact = self.node(input).exact.map(|x| x * factor as f64);
        let v = self.push(out, Op::Scale(input, factor), rg);
        self.nodes[v.0].exact = exact;
        v
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients of every node on
    /// the tape are replaced (not accumulated) by this call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.node(loss);
        if n.value.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar, got dims {}",
                n.value.dims()
            )));
        }
        if !n.requires_grad {
            return Err(Error::usage(
                "backward called on a value detached from any differentiable input",
            ));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(Tensor4::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &Tensor4) -> Result<()> {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: Var| &nodes[v.0].value;
        match nodes[i].op {
            Op::Leaf => {}
            Op::Conv { input, weight, bias } => conv_backward(nodes, grads, input, weight, bias, g),
            Op::Relu(input) => {
                if let Some(gi) = slot(nodes, grads, input) {
                    let out = nodes[i].value.data();
                    for ((d, &o), &gv) in gi.data_mut().iter_mut().zip(out).zip(g.data()) {
                        if o > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::MaxPool { input, ref argmax } => {
                if let Some(gi) = slot(nodes, grads, input) {
                    let d = gi.data_mut();
                    for (&a, &gv) in argmax.iter().zip(g.data()) {
                        d[a as usize] += gv;
                    }
                }
            }
            Op::Upsample(input) => {
                let dims = val(input).dims();
                if let Some(gi) = slot(nodes, grads, input) {
                    if dims.numel() > 0 {
                        kernels::upsample2_backward(
                            g.data(),
                            dims.batch * dims.channels,
                            dims.height,
                            dims.width,
                            gi.data_mut(),
                        );
                    }
                }
            }
            Op::Concat(a, b) => {
                let (da, db) = (val(a).dims(), val(b).dims());
                let od = g.dims();
                for (v, offset, len) in [(a, 0, da.sample()), (b, da.sample(), db.sample())] {
                    if let Some(gi) = slot(nodes, grads, v) {
                        let d = gi.data_mut();
                        for s in 0..od.batch {
                            let start = s * od.sample() + offset;
                            d[s * len..(s + 1) * len]
                                .iter_mut()
                                .zip(&g.data()[start..start + len])
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                let scale = 2.0 * g.item()? / val(pred).dims().batch.max(1) as f32;
                if let Some(gi) = slot(nodes, grads, pred) {
                    let (p, t) = (val(pred).data(), val(target).data());
                    for ((d, &pv), &tv) in gi.data_mut().iter_mut().zip(p).zip(t) {
                        *d += scale * (pv - tv);
                    }
                }
            }
            Op::WeightedSum { input, ref weights } => {
                let gv = g.item()?;
                if let Some(gi) = slot(nodes, grads, input) {
                    for (d, &w) in gi.data_mut().iter_mut().zip(weights.data()) {
                        *d += gv * w;
                    }
                }
            }
            Op::SqNorm(ref inputs) => {
                let gv = g.item()?;
                for &v in inputs {
                    if let Some(gi) = slot(nodes, grads, v) {
                        for (d, &xv) in gi.data_mut().iter_mut().zip(val(v).data()) {
                            *d += 2.0 * gv * xv;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gi) = slot(nodes, grads, v) {
                        gi.add_assign(g)?;
                    }
                }
            }
            Op::Scale(input, factor) => {
                if let Some(gi) = slot(nodes, grads, input) {
                    for (d, &gv) in gi.data_mut().iter_mut().zip(g.data()) {
                        *d += factor * gv;
                    }
                }
            }
        }
        Ok(())
    }

    /// Adds the gradient of every parameter leaf into its [`ParamTensor::grad`].
    /// Repeated calls keep accumulating until the grads are cleared.
    pub fn accumulate_param_grads(&self, params: &mut [ParamTensor]) -> Result<()> {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            let (Some(id), Some(g)) = (node.param, grad) else {
                continue;
            };
            let p = params
                .get_mut(id.index())
                .ok_or_else(|| Error::usage(format!("parameter id {} out of range", id.index())))?;
            p.grad.add_assign(g)?;
        }
        Ok(())
    }
}

/// Gradient buffer of `v`, allocated on first use; `None` for values that do
/// not require gradients.
fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Tensor4>], v: Var) -> Option<&'g mut Tensor4> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let dims = node.value.dims();
    Some(grads[v.0].get_or_insert_with(|| Tensor4::zeros(dims)))
}

fn conv_backward(nodes: &[Node], grads: &mut [Option<Tensor4>], input: Var, weight: Var, bias: Var, g: &Tensor4) {
    let xv = &nodes[input.0].value;
    let wv = &nodes[weight.0].value;
    let x = xv.dims();
    let w = wv.dims();
    let k = w.height;
    let plane = x.plane();
    let kc = x.channels * k * k;
    let c_out = w.batch;

    if let Some(gb) = slot(nodes, grads, bias) {
        let d = gb.data_mut();
        for s in 0..x.batch {
            for (c, dc) in d.iter_mut().enumerate().take(c_out) {
                let start = (s * c_out + c) * plane;
                *dc += g.data()[start..start + plane].iter().sum::<f32>();
            }
        }
    }

    if let Some(gw) = slot(nodes, grads, weight) {
        let mut cols = if k > 1 { vec![0.0; kc * plane] } else { Vec::new() };
        for s in 0..x.batch {
            let gs = &g.data()[s * c_out * plane..(s + 1) * c_out * plane];
            let xs = &xv.data()[s * x.sample()..(s + 1) * x.sample()];
            let rhs: &[f32] = if k > 1 {
                kernels::im2col(xs, x.channels, x.height, x.width, k, &mut cols);
                &cols
            } else {
                xs
            };
            // dW (c_out x kc) += g_s (c_out x plane) * cols^T (plane x kc)
            kernels::gemm(c_out, plane, kc, 1.0, gs, (plane, 1), rhs, (1, plane), 1.0, gw.data_mut(), (kc, 1));
        }
    }

    if let Some(gx) = slot(nodes, grads, input) {
        let mut dcols = if k > 1 { vec![0.0; kc * plane] } else { Vec::new() };
        for s in 0..x.batch {
            let gs = &g.data()[s * c_out * plane..(s + 1) * c_out * plane];
            let dxs = &mut gx.data_mut()[s * x.sample()..(s + 1) * x.sample()];
            if k > 1 {
                // dcols (kc x plane) = W^T (kc x c_out) * g_s (c_out x plane)
                kernels::gemm(kc, c_out, plane, 1.0, wv.data(), (1, kc), gs, (plane, 1), 0.0, &mut dcols, (plane, 1));
                kernels::col2im_add(&dcols, x.channels, x.height, x.width, k, dxs);
            } else {
                kernels::gemm(kc, c_out, plane, 1.0, wv.data(), (1, kc), gs, (plane, 1), 1.0, dxs, (plane, 1));
            }
        }
    }
}
