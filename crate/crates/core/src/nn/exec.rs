//! Whole-tensor graph execution and backpropagation.
//!
//! Two numerical modes exist. `Quantized` is the real forward pass: codes
//! are rounded, bit-planes are exactly 0/1, and the backward pass uses the
//! straight-through rules. `PassThrough` replaces every rounding step with a
//! continuous surrogate whose derivative equals the straight-through rule,
//! so finite differences can check the backward pass.

use std::collections::BTreeMap;

use crate::error::{bail, Result};
use crate::nn::graph::{GraphInfo, LayerOp, NetworkGraph};
use crate::nn::layers::{
    conv_grads, conv_row, fc_backward, fc_forward, global_avgpool, global_avgpool_backward, maxpool_apply,
    maxpool_argmax, maxpool_grad, RowSlab,
};
use crate::nn::model::{cast_store, LayerParams, Model, ParamStore};
use crate::quant::QuantParams;
use crate::tensor::{concat_many, split_many, Real, Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Quantized,
    PassThrough,
}

/// FNV-1a over the discrete choices a forward pass made.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecisionTrace(u64);

impl Default for DecisionTrace {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl DecisionTrace {
    #[inline]
    pub fn push(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn value(&self) -> u64 {
        self.0
    }
}

/// Element-wise (per position) layer behaviour shared by the whole-tensor
/// and row-streaming executors. Inputs and outputs are channel-major slabs
/// of `channels × len` elements.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Pointwise {
    Relu,
    Quantize(QuantParams),
    Dequantize(QuantParams),
    Binarize { bits: u8, norm: f64 },
    Debinarize { bits: u8 },
}

impl Pointwise {
    pub(crate) fn out_channels(&self, c: usize) -> usize {
        match self {
            Pointwise::Binarize { bits, .. } => c * *bits as usize,
            Pointwise::Debinarize { bits } => c / *bits as usize,
            _ => c,
        }
    }

    pub(crate) fn apply<S: Scalar>(
        &self,
        mode: ExecMode,
        input: &[S],
        channels: usize,
        len: usize,
        out: &mut [S],
        trace: Option<&mut DecisionTrace>,
    ) -> Result<()> {
        let pass = mode == ExecMode::PassThrough;
        let mut sink = DecisionTrace::default();
        let tr = trace.is_some();
        let t = match trace {
            Some(t) => t,
            None => &mut sink,
        };
        match *self {
            Pointwise::Relu => {
                for (o, &v) in out.iter_mut().zip(input) {
                    if tr {
                        t.push((v > S::ZERO) as u64);
                    }
                    *o = v.relu();
                }
            }
            Pointwise::Quantize(p) => {
                let (lo, hi) = p.code_range();
                for (o, &v) in out.iter_mut().zip(input) {
                    let x = v.to_f64();
                    if tr {
                        let r = x / p.scale;
                        t.push(if r < lo as f64 { 0 } else if r > hi as f64 { 2 } else { 1 });
                    }
                    *o = if pass {
                        S::from_f64(p.passthrough_value(x))
                    } else {
                        S::from_f64(p.quantize_value(x) as f64)
                    };
                }
            }
            Pointwise::Dequantize(p) => {
                for (o, &v) in out.iter_mut().zip(input) {
                    *o = S::from_f64(v.to_f64() * p.scale);
                }
            }
            Pointwise::Binarize { bits, norm } => {
                let b = bits as usize;
                let max = ((1u32 << bits) - 1) as f64;
                for c in 0..channels {
                    for i in 0..len {
                        let code = input[c * len + i].to_f64();
                        let r = code.round();
                        if !pass && ((r - code).abs() > 1e-6 || r < 0.0 || r > max) {
                            bail!(OutOfRange, "binarize got code {} outside 0..={}", code, max);
                        }
                        let r = r.clamp(0.0, max);
                        if tr {
                            t.push(r as u64);
                        }
                        let ri = r as u32;
                        for k in 0..b {
                            let bit = ((ri >> k) & 1) as f64;
                            let v = if pass { bit + (code - r) / norm } else { bit };
                            out[(c * b + k) * len + i] = S::from_f64(v);
                        }
                    }
                }
            }
            Pointwise::Debinarize { bits } => {
                let b = bits as usize;
                for c in 0..channels / b {
                    for i in 0..len {
                        let mut code = 0.0;
                        for k in 0..b {
                            let v = input[(c * b + k) * len + i].to_f64();
                            let on = v >= 0.5;
                            if tr {
                                t.push(on as u64);
                            }
                            if on {
                                code += (1u32 << k) as f64;
                                if pass {
                                    code += v - 1.0;
                                }
                            }
                        }
                        out[c * len + i] = S::from_f64(code);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Turns bitconv pre-activations into stored bits.
#[inline]
pub(crate) fn bit_activation<S: Scalar>(z: S, mode: ExecMode) -> S {
    match mode {
        ExecMode::Quantized => {
            if z.to_f64() >= 0.5 {
                S::ONE
            } else {
                S::ZERO
            }
        }
        ExecMode::PassThrough => S::from_f64(z.to_f64().clamp(0.0, 1.0)),
    }
}

#[inline]
fn bit_region(z: f64) -> u64 {
    if z <= 0.0 {
        0
    } else if z > 1.0 {
        2
    } else {
        1
    }
}

/// Forward values of every edge, plus per-layer pre-activations where the
/// backward pass needs them.
#[derive(Clone, Debug)]
pub struct Activations<S> {
    pub values: Vec<Tensor<S>>,
    pub pre: Vec<Option<Tensor<S>>>,
    pub trace: DecisionTrace,
}

impl<S: Scalar> Activations<S> {
    pub fn get(&self, info: &GraphInfo, name: &str) -> Option<&Tensor<S>> {
        info.index.get(name).map(|&e| &self.values[e])
    }
}

#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub params: ParamStore<T>,
    pub input: Option<Tensor<T>>,
}

/// Executes a validated graph with parameters cast to `S`.
pub struct Executor<'g, S> {
    pub graph: &'g NetworkGraph,
    pub info: GraphInfo,
    pub params: ParamStore<S>,
    pointwise: Vec<Option<Pointwise>>,
    pub mode: ExecMode,
    pub track_decisions: bool,
}

impl<'g, S: Scalar> Executor<'g, S> {
    pub fn new(model: &'g Model, mode: ExecMode) -> Result<Self> {
        Self::with_params(&model.graph, cast_store(&model.params), &model.quant, &model.grad_norms, mode)
    }

    pub fn with_params(
        graph: &'g NetworkGraph,
        params: ParamStore<S>,
        quant: &BTreeMap<String, QuantParams>,
        grad_norms: &BTreeMap<String, f64>,
        mode: ExecMode,
    ) -> Result<Self> {
        let info = graph.validate()?;
        for (name, wshape, nbias) in graph.param_shapes()? {
            match params.get(&name) {
                Some(p) if p.weight.shape() == wshape && p.bias.len() == nbias => {}
                _ => bail!(InvalidArgument, "layer '{}' lacks parameters of shape {}", name, wshape),
            }
        }
        let mut pointwise = Vec::with_capacity(graph.layers.len());
        for l in &graph.layers {
            let lookup = |layer: &str| -> Result<QuantParams> {
                match quant.get(layer) {
                    Some(q) => Ok(*q),
                    None => bail!(InvalidArgument, "quantizer '{}' is not calibrated", layer),
                }
            };
            pointwise.push(match &l.op {
                LayerOp::Relu => Some(Pointwise::Relu),
                LayerOp::Quantize { bits, signed } => {
                    let q = lookup(&l.name)?;
                    if q.bits != *bits || q.signed != *signed {
                        bail!(InvalidArgument, "quantizer '{}' params disagree with the graph", l.name);
                    }
                    Some(Pointwise::Quantize(q))
                }
                LayerOp::Dequantize { source } => {
                    let src = info.index[source];
                    let producer = info.edges[src].producer.expect("validated");
                    Some(Pointwise::Dequantize(lookup(&graph.layers[producer].name)?))
                }
                LayerOp::Binarize { bits } => {
                    let norm = grad_norms.get(&l.name).copied().unwrap_or(1.0);
                    if !(norm.is_finite() && norm > 0.0) {
                        bail!(InvalidArgument, "gradient norm for '{}' must be positive", l.name);
                    }
                    Some(Pointwise::Binarize { bits: *bits, norm })
                }
                LayerOp::Debinarize { bits } => Some(Pointwise::Debinarize { bits: *bits }),
                _ => None,
            });
        }
        Ok(Self {
            graph,
            info,
            params,
            pointwise,
            mode,
            track_decisions: mode == ExecMode::PassThrough,
        })
    }

    pub(crate) fn pointwise(&self, layer: usize) -> Option<Pointwise> {
        self.pointwise[layer]
    }

    pub fn run(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut acts = self.forward(x)?;
        Ok(acts.values.swap_remove(self.info.output))
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Activations<S>> {
        self.forward_partial(x, self.graph.layers.len())
    }

    /// Runs layers `[0, stop)` only; later edges hold empty placeholders.
    pub fn forward_partial(&self, x: &Tensor<S>, stop: usize) -> Result<Activations<S>> {
        let n = x.shape().n;
        let want = self.info.edges[0].shape.with_n(n);
        if x.shape() != want {
            bail!(ShapeMismatch, "input {} does not match graph input {}", x.shape(), want);
        }
        let mut values: Vec<Tensor<S>> = Vec::with_capacity(self.info.edges.len());
        values.push(x.clone());
        let mut pre = vec![None; self.graph.layers.len()];
        let mut trace = DecisionTrace::default();
        for (li, l) in self.graph.layers.iter().enumerate() {
            if li >= stop {
                values.push(Tensor::zeros(Shape::new(0, 0, 0, 0)));
                continue;
            }
            let ins = &self.info.layer_inputs[li];
            let x0 = &values[ins[0]];
            let out = match &l.op {
                LayerOp::Conv(c) => {
                    let p = &self.params[&l.name];
                    let z = conv_full(x0, c.geom(), p)?;
                    if c.relu {
                        if self.track_decisions {
                            for &v in z.data() {
                                trace.push((v > S::ZERO) as u64);
                            }
                        }
                        z.map(|v| v.relu())
                    } else {
                        z
                    }
                }
                LayerOp::BitConv(c) => {
                    let p = &self.params[&l.name];
                    let z = conv_full(x0, c.geom(), p)?;
                    if self.track_decisions {
                        for &v in z.data() {
                            trace.push(bit_region(v.to_f64()));
                        }
                    }
                    let mode = self.mode;
                    let out = z.map(|v| bit_activation(v, mode));
                    pre[li] = Some(z);
                    out
                }
                LayerOp::MaxPool(g) => {
                    if self.track_decisions {
                        for i in maxpool_argmax(x0, g)? {
                            trace.push(i as u64);
                        }
                    }
                    maxpool_apply(x0, g)?
                }
                LayerOp::GlobalAvgPool => global_avgpool(x0),
                LayerOp::Fc { .. } => {
                    let p = &self.params[&l.name];
                    fc_forward(x0, &p.weight, &p.bias)?
                }
                LayerOp::Concat => {
                    let parts: Vec<&Tensor<S>> = ins.iter().map(|&e| &values[e]).collect();
                    concat_many(&parts)?
                }
                _ => {
                    let pw = self.pointwise[li].expect("pointwise layer");
                    let s = x0.shape();
                    let oc = pw.out_channels(s.c);
                    let os = s.with_c(oc);
                    let mut out = Tensor::zeros(os);
                    for i in 0..n {
                        let tr = self.track_decisions.then_some(&mut trace);
                        pw.apply(self.mode, x0.sample(i), s.c, s.plane_len(), out.sample_mut(i), tr)?;
                    }
                    out
                }
            };
            values.push(out);
        }
        Ok(Activations { values, pre, trace })
    }
}

fn conv_full<S: Scalar>(x: &Tensor<S>, g: crate::nn::layers::ConvGeom, p: &LayerParams<S>) -> Result<Tensor<S>> {
    crate::nn::layers::conv_apply(x, &g, &p.weight, &p.bias, false)
}

fn add_into<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<'g, T: Real> Executor<'g, T> {
    /// Backpropagates `grad_out` (gradient at the graph output) through the
    /// recorded activations.
    pub fn backward(&self, acts: &Activations<T>, grad_out: &Tensor<T>) -> Result<Gradients<T>> {
        let info = &self.info;
        let out_shape = acts.values[info.output].shape();
        if grad_out.shape() != out_shape {
            bail!(ShapeMismatch, "output gradient {} vs output {}", grad_out.shape(), out_shape);
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; info.edges.len()];
        grads[info.output] = Some(grad_out.clone());
        let mut pgrads: ParamStore<T> = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), LayerParams::zeros(p.weight.shape(), p.bias.len())))
            .collect();

        for (li, l) in self.graph.layers.iter().enumerate().rev() {
            let Some(g) = grads[info.layer_output[li]].take() else { continue };
            let ins = &info.layer_inputs[li];
            let x0 = &acts.values[ins[0]];
            match &l.op {
                LayerOp::Conv(c) | LayerOp::BitConv(c) => {
                    let mut gz = g;
                    if let LayerOp::BitConv(_) = l.op {
                        let z = acts.pre[li].as_ref().expect("bitconv pre-activation");
                        for (gv, &zv) in gz.data_mut().iter_mut().zip(z.data()) {
                            if !(zv > T::ZERO && zv <= T::ONE) {
                                *gv = T::ZERO;
                            }
                        }
                    } else if c.relu {
                        let y = &acts.values[info.layer_output[li]];
                        for (gv, &yv) in gz.data_mut().iter_mut().zip(y.data()) {
                            if yv <= T::ZERO {
                                *gv = T::ZERO;
                            }
                        }
                    }
                    let p = &self.params[&l.name];
                    let (gx, gw, gb) = conv_grads(x0, &c.geom(), &p.weight, &gz, true)?;
                    let pg = pgrads.get_mut(&l.name).expect("allocated");
                    pg.weight = gw;
                    pg.bias = gb;
                    if let Some(gx) = gx {
                        add_into(&mut grads[ins[0]], gx);
                    }
                }
                LayerOp::Relu => {
                    let y = &acts.values[info.layer_output[li]];
                    let mut gx = g;
                    for (gv, &yv) in gx.data_mut().iter_mut().zip(y.data()) {
                        if yv <= T::ZERO {
                            *gv = T::ZERO;
                        }
                    }
                    add_into(&mut grads[ins[0]], gx);
                }
                LayerOp::MaxPool(pg) => add_into(&mut grads[ins[0]], maxpool_grad(&g, x0, pg)?),
                LayerOp::GlobalAvgPool => add_into(&mut grads[ins[0]], global_avgpool_backward(&g, x0.shape())),
                LayerOp::Fc { .. } => {
                    let p = &self.params[&l.name];
                    let (gx, gw, gb) = fc_backward(&g, x0, &p.weight)?;
                    let pg = pgrads.get_mut(&l.name).expect("allocated");
                    pg.weight = gw;
                    pg.bias = gb;
                    add_into(&mut grads[ins[0]], gx);
                }
                LayerOp::Concat => {
                    let sizes: Vec<usize> = ins.iter().map(|&e| acts.values[e].shape().c).collect();
                    for (&e, part) in ins.iter().zip(split_many(&g, &sizes)?) {
                        add_into(&mut grads[e], part);
                    }
                }
                _ => {
                    let pw = self.pointwise[li].expect("pointwise layer");
                    let gx = pointwise_backward(pw, &g, x0)?;
                    add_into(&mut grads[ins[0]], gx);
                }
            }
        }
        Ok(Gradients {
            params: pgrads,
            input: grads[0].take(),
        })
    }
}

fn pointwise_backward<T: Real>(pw: Pointwise, g: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    Ok(match pw {
        Pointwise::Relu => unreachable!("handled by caller"),
        Pointwise::Quantize(p) => {
            let inv = T::from_f64(1.0 / p.scale);
            let mut gx = g.clone();
            for (gv, &xv) in gx.data_mut().iter_mut().zip(x.data()) {
                *gv = if p.in_range(xv.to_f64()) { *gv * inv } else { T::ZERO };
            }
            gx
        }
        Pointwise::Dequantize(p) => g.map(|v| v * T::from_f64(p.scale)),
        Pointwise::Binarize { bits, norm } => {
            let b = bits as usize;
            let inv = T::from_f64(1.0 / norm);
            let mut gx = Tensor::zeros(s);
            let plane = s.plane_len();
            for n in 0..s.n {
                let gs = g.sample(n);
                let out = gx.sample_mut(n);
                for c in 0..s.c {
                    for i in 0..plane {
                        let mut acc = T::ZERO;
                        for k in 0..b {
                            acc += gs[(c * b + k) * plane + i];
                        }
                        out[c * plane + i] = acc * inv;
                    }
                }
            }
            gx
        }
        Pointwise::Debinarize { bits } => {
            let b = bits as usize;
            let mut gx = Tensor::zeros(s);
            let plane = s.plane_len();
            for n in 0..s.n {
                let gs = g.sample(n);
                let xs = x.sample(n);
                let out = gx.sample_mut(n);
                for c in 0..s.c / b {
                    for k in 0..b {
                        for i in 0..plane {
                            let idx = (c * b + k) * plane + i;
                            if xs[idx].to_f64() >= 0.5 {
                                out[idx] = gs[c * plane + i];
                            }
                        }
                    }
                }
            }
            gx
        }
    })
}

/// Computes one output row of a conv or bitconv layer from row slabs.
pub(crate) fn conv_layer_row<S: Scalar>(
    spec: &crate::nn::graph::ConvSpec,
    bit: bool,
    mode: ExecMode,
    p: &LayerParams<S>,
    in_w: usize,
    taps: &[(usize, RowSlab<'_, S>)],
    out_w: usize,
    out: &mut [S],
) {
    conv_row(&spec.geom(), &p.weight, &p.bias, in_w, taps, out_w, out);
    if bit {
        for v in out.iter_mut() {
            *v = bit_activation(*v, mode);
        }
    } else if spec.relu {
        for v in out.iter_mut() {
            *v = v.relu();
        }
    }
}
