//! Training, calibration, retraining from a float model, and gradient checks.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{bail, Error, Result};
use crate::gf2::{estimate_grad_norm, pack_planes};
use crate::nn::exec::{ExecMode, Executor};
use crate::nn::fusion::FusionPlan;
use crate::nn::graph::LayerOp;
use crate::nn::model::{cast_store, LayerParams, Model, ParamStore};
use crate::nn::transform::{insert_compression, CompressionConfig, InsertedBlock};
use crate::quant::{Calibrator, QuantParams};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub base_lr: f64,
    /// Iterations between learning-rate drops.
    #[serde(default = "d_step")]
    pub step_size: u64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub iterations: u64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate every this many iterations; 0 evaluates only at the ends.
    #[serde(default)]
    pub eval_interval: u64,
    /// Samples per parallel work item. Results do not depend on the
    /// thread count, only on this value.
    #[serde(default = "d_chunk")]
    pub chunk: usize,
    /// Samples used for calibration and gradient-norm estimation.
    #[serde(default = "d_calib")]
    pub calibration_samples: usize,
}

fn d_lr() -> f64 {
    1e-3
}
fn d_step() -> u64 {
    20_000
}
fn d_gamma() -> f64 {
    0.1
}
fn d_momentum() -> f64 {
    0.9
}
fn d_batch() -> usize {
    64
}
fn d_chunk() -> usize {
    16
}
fn d_calib() -> usize {
    256
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: d_lr(),
            step_size: d_step(),
            gamma: d_gamma(),
            momentum: d_momentum(),
            iterations: 0,
            batch_size: d_batch(),
            seed: 0,
            eval_interval: 0,
            chunk: d_chunk(),
            calibration_samples: d_calib(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            bail!(Config, "base_lr must be positive");
        }
        if self.step_size == 0 {
            bail!(Config, "step_size must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            bail!(Config, "gamma must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail!(Config, "momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.chunk == 0 || self.calibration_samples == 0 {
            bail!(Config, "batch_size, chunk and calibration_samples must be positive");
        }
        Ok(())
    }
}

/// Step schedule: `base_lr · gamma^⌊iter / step_size⌋`.
pub fn step_lr(iter: u64, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * cfg.gamma.powi((iter / cfg.step_size) as i32)
}

fn f<T: Real>(v: T) -> f64 {
    crate::tensor::Scalar::to_f64(v)
}

fn logits_rows<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 {
        bail!(ShapeMismatch, "logits must be N×K×1×1, got {}", s);
    }
    if s.n != labels.len() {
        bail!(ShapeMismatch, "{} logits rows for {} labels", s.n, labels.len());
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= s.c) {
        bail!(OutOfRange, "label {} outside 0..{}", l, s.c);
    }
    Ok(s.c)
}

/// Summed cross-entropy and its gradient multiplied by `scale`.
fn xent_scaled<T: Real>(logits: &Tensor<T>, labels: &[usize], scale: f64) -> Result<(f64, Tensor<T>)> {
    let k = logits_rows(logits, labels)?;
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.sample(i);
        let m = row.iter().map(|&v| f(v)).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (f(*v) - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - f(row[label]);
        let g = grad.sample_mut(i);
        for j in 0..k {
            let p = (f(row[j]) - lse).exp();
            g[j] = T::from_f64(scale * (p - if j == label { 1.0 } else { 0.0 }));
        }
    }
    Ok((loss, grad))
}

/// Mean softmax cross-entropy over the batch and its gradient.
pub fn softmax_xent<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    if labels.is_empty() {
        bail!(Degenerate, "empty batch");
    }
    let n = labels.len() as f64;
    let (sum, grad) = xent_scaled(logits, labels, 1.0 / n)?;
    Ok((sum / n, grad))
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct SgdState {
    velocity: ParamStore<f32>,
}

/// `v ← μ·v + g`, `w ← w − lr·v`. Refuses non-finite gradients before
/// touching anything.
pub fn sgd_step(params: &mut ParamStore<f32>, grads: &ParamStore<f32>, lr: f64, momentum: f64, state: &mut SgdState) -> Result<()> {
    for (name, g) in grads {
        if g.weight.data().iter().chain(&g.bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of '{name}'")));
        }
        if !params.contains_key(name) {
            bail!(InvalidArgument, "gradient for unknown layer '{}'", name);
        }
    }
    let (lr, mu) = (lr as f32, momentum as f32);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked");
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| LayerParams::zeros(g.weight.shape(), g.bias.len()));
        let pairs = v
            .weight
            .data_mut()
            .iter_mut()
            .zip(p.weight.data_mut().iter_mut())
            .zip(g.weight.data())
            .chain(v.bias.iter_mut().zip(p.bias.iter_mut()).zip(&g.bias));
        for ((vv, w), &gv) in pairs {
            *vv = mu * *vv + gv;
            *w -= lr * *vv;
        }
        if p.weight.data().iter().chain(&p.bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameters of '{name}' after update")));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
}

pub fn metrics_csv(rows: &[Metrics]) -> String {
    let mut s = String::from("iteration,lr,loss,top1,top5\n");
    for m in rows {
        s.push_str(&format!("{},{:e},{:.6},{:.6},{:.6}\n", m.iteration, m.lr, m.loss, m.top1, m.top5));
    }
    s
}

fn chunks(n: usize, size: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(size)).map(|i| (i * size, ((i + 1) * size).min(n))).collect()
}

/// Loss, top-1 and top-5 accuracy of the quantized forward pass.
pub fn evaluate(model: &Model, data: &Dataset, chunk: usize) -> Result<EvalResult> {
    if data.is_empty() {
        bail!(Degenerate, "evaluation set is empty");
    }
    let exec = Executor::<f32>::new(model, ExecMode::Quantized)?;
    let parts: Vec<Result<(f64, usize, usize)>> = chunks(data.len(), chunk.max(1))
        .into_par_iter()
        .map(|(a, b)| {
            let x = data.images.slice_batch(a, b);
            let labels = &data.labels[a..b];
            let logits = exec.run(&x)?;
            let (loss, _) = xent_scaled(&logits, labels, 0.0)?;
            let (mut t1, mut t5) = (0, 0);
            for (i, &l) in labels.iter().enumerate() {
                let row = logits.sample(i);
                let rank = row.iter().filter(|&&v| v > row[l]).count();
                t1 += (rank == 0) as usize;
                t5 += (rank < 5) as usize;
            }
            Ok((loss, t1, t5))
        })
        .collect();
    let (mut loss, mut t1, mut t5) = (0.0, 0, 0);
    for p in parts {
        let (l, a, b) = p?;
        loss += l;
        t1 += a;
        t5 += b;
    }
    let n = data.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("evaluation loss".into()));
    }
    Ok(EvalResult {
        loss: loss / n,
        top1: t1 as f64 / n,
        top5: t5 as f64 / n,
    })
}

/// Mean loss and summed gradients for one batch, chunked for rayon and
/// reduced in a fixed order.
pub fn batch_gradients(model: &Model, x: &Tensor<f32>, labels: &[usize], chunk: usize) -> Result<(f64, ParamStore<f32>)> {
    let exec = Executor::<f32>::new(model, ExecMode::Quantized)?;
    let n = labels.len();
    if n == 0 {
        bail!(Degenerate, "empty batch");
    }
    let scale = 1.0 / n as f64;
    let parts: Vec<Result<(f64, ParamStore<f32>)>> = chunks(n, chunk.max(1))
        .into_par_iter()
        .map(|(a, b)| {
            let xs = x.slice_batch(a, b);
            let acts = exec.forward(&xs)?;
            let (loss, g) = xent_scaled(&acts.values[exec.info.output], &labels[a..b], scale)?;
            Ok((loss, exec.backward(&acts, &g)?.params))
        })
        .collect();
    let mut total: Option<ParamStore<f32>> = None;
    let mut loss = 0.0;
    for p in parts {
        let (l, g) = p?;
        loss += l;
        match &mut total {
            None => total = Some(g),
            Some(acc) => {
                for (name, gp) in g {
                    let ap = acc.get_mut(&name).expect("same layers");
                    for (a, b) in ap.weight.data_mut().iter_mut().zip(gp.weight.data()) {
                        *a += *b;
                    }
                    for (a, b) in ap.bias.iter_mut().zip(&gp.bias) {
                        *a += *b;
                    }
                }
            }
        }
    }
    Ok((loss * scale, total.expect("at least one chunk")))
}

/// Minibatch SGD with momentum. Evaluates on `eval` before the first
/// update, every `eval_interval` iterations, and after the last update.
pub fn train(model: &mut Model, data: &Dataset, eval: &Dataset, cfg: &TrainConfig) -> Result<Vec<Metrics>> {
    cfg.validate()?;
    if data.is_empty() {
        bail!(Degenerate, "training set is empty");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut state = SgdState::default();
    let mut log = Vec::new();
    let start = model.iteration;
    let end = start + cfg.iterations;
    let record = |model: &Model, log: &mut Vec<Metrics>| -> Result<()> {
        let r = evaluate(model, eval, cfg.chunk.max(64))?;
        log::info!("iter {} loss {:.4} top1 {:.4}", model.iteration, r.loss, r.top1);
        log.push(Metrics {
            iteration: model.iteration,
            lr: step_lr(model.iteration, cfg),
            loss: r.loss,
            top1: r.top1,
            top5: r.top5,
        });
        Ok(())
    };
    record(model, &mut log)?;
    while model.iteration < end {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let take = (cfg.batch_size - idx.len()).min(order.len() - cursor);
            idx.extend_from_slice(&order[cursor..cursor + take]);
            cursor += take;
        }
        let (x, labels) = data.batch(&idx);
        let (loss, grads) = batch_gradients(model, &x, &labels, cfg.chunk)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at iteration {}", model.iteration)));
        }
        let lr = step_lr(model.iteration, cfg);
        sgd_step(&mut model.params, &grads, lr, cfg.momentum, &mut state)?;
        model.iteration += 1;
        let done = model.iteration - start;
        if model.iteration == end || (cfg.eval_interval > 0 && done.is_multiple_of(cfg.eval_interval)) {
            record(model, &mut log)?;
        }
    }
    Ok(log)
}

/// Calibrates every quantizer in graph order from the first `samples`
/// training images, then estimates each binarizer's gradient norm.
/// Each quantizer sees activations produced with all earlier quantizers
/// already in place.
pub fn calibrate_model(model: &mut Model, data: &Dataset, samples: usize, chunk: usize) -> Result<()> {
    let data = data.take(samples);
    if data.is_empty() {
        bail!(Degenerate, "calibration needs at least one sample");
    }
    let quantizers: Vec<(usize, u8, bool)> = model
        .graph
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l.op {
            LayerOp::Quantize { bits, signed } => Some((i, bits, signed)),
            _ => None,
        })
        .collect();
    let placeholder = |bits, signed| QuantParams::new(bits, 1.0, signed);
    for &(li, bits, signed) in &quantizers {
        let name = model.graph.layers[li].name.clone();
        model.quant.entry(name).or_insert(placeholder(bits, signed)?);
    }
    let info = model.info()?;
    for &(li, bits, signed) in &quantizers {
        let exec = Executor::<f32>::new(model, ExecMode::Quantized)?;
        let input = info.layer_inputs[li][0];
        let mut cal = Calibrator::new();
        for (a, b) in chunks(data.len(), chunk.max(1)) {
            let acts = exec.forward_partial(&data.images.slice_batch(a, b), li)?;
            cal.observe(&acts.values[input]);
        }
        let q = cal.finish(bits, signed)?;
        drop(exec);
        model.quant.insert(model.graph.layers[li].name.clone(), q);
    }

    let binarizers: Vec<(usize, u8)> = model
        .graph
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l.op {
            LayerOp::Binarize { bits } => Some((i, bits)),
            _ => None,
        })
        .collect();
    if binarizers.is_empty() {
        return Ok(());
    }
    let exec = Executor::<f32>::new(model, ExecMode::Quantized)?;
    let mut streams: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for (a, b) in chunks(data.len(), chunk.max(1)) {
        let acts = exec.forward(&data.images.slice_batch(a, b))?;
        for &(li, bits) in &binarizers {
            let planes = &acts.values[info.layer_output[li]];
            streams
                .entry(model.graph.layers[li].name.clone())
                .or_default()
                .push(pack_planes(planes, bits)?);
        }
    }
    drop(exec);
    for (name, s) in streams {
        model.grad_norms.insert(name, estimate_grad_norm(&s)?);
    }
    Ok(())
}

/// Inserts quantization (and compression, if the mode asks for it) into a
/// trained float model, initialises the new layers, and calibrates.
pub fn prepare_compressed(
    float: &Model,
    plan: &FusionPlan,
    cfg: &CompressionConfig,
    calib: &Dataset,
    train: &TrainConfig,
) -> Result<(Model, FusionPlan, Vec<InsertedBlock>)> {
    let (graph, plan, blocks) = insert_compression(&float.graph, plan, cfg)?;
    let mut model = Model::with_graph(graph, &float.params, train.seed)?;
    model.iteration = 0;
    calibrate_model(&mut model, calib, train.calibration_samples, train.chunk.max(64))?;
    Ok((model, plan, blocks))
}

#[derive(Clone, Debug)]
pub struct RetrainOutcome {
    pub model: Model,
    pub plan: FusionPlan,
    pub blocks: Vec<InsertedBlock>,
    pub metrics: Vec<Metrics>,
}

/// [`prepare_compressed`] followed by finetuning with `train`.
pub fn retrain_from_quantized(
    float: &Model,
    plan: &FusionPlan,
    cfg: &CompressionConfig,
    data: &Dataset,
    eval: &Dataset,
    train_cfg: &TrainConfig,
) -> Result<RetrainOutcome> {
    let (mut model, plan, blocks) = prepare_compressed(float, plan, cfg, data, train_cfg)?;
    let metrics = train(&mut model, data, eval, train_cfg)?;
    Ok(RetrainOutcome {
        model,
        plan,
        blocks,
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Coordinates sampled per parameterised layer.
    pub coords_per_layer: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn double() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-5,
            coords_per_layer: 24,
            floor: 1e-8,
            seed: 0,
        }
    }

    pub fn single() -> Self {
        Self {
            step: 1e-2,
            tolerance: 1e-3,
            coords_per_layer: 24,
            floor: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerGradCheck {
    pub layer: String,
    pub checked: usize,
    /// Coordinates whose ±step perturbation changed a discrete decision.
    pub skipped: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub layers: Vec<LayerGradCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares backward-pass parameter gradients of the pass-through network
/// against central differences of the mean cross-entropy, in precision `T`.
/// A coordinate is skipped when either perturbation changes any ReLU,
/// pooling, clamp, rounding or threshold decision, since the surrogate is
/// not differentiable there.
pub fn finite_diff_check<T: Real>(model: &Model, x: &Tensor<f64>, labels: &[usize], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    finite_diff_check_with(model, x, labels, cfg, |_, _: &mut LayerParams<T>| {})
}

/// [`finite_diff_check`] with a hook that may alter the analytic gradients
/// before comparison (negative controls).
pub fn finite_diff_check_with<T: Real>(
    model: &Model,
    x: &Tensor<f64>,
    labels: &[usize],
    cfg: &GradCheckConfig,
    adjust: impl Fn(&str, &mut LayerParams<T>),
) -> Result<GradCheckReport> {
    let mut exec = Executor::<T>::with_params(
        &model.graph,
        cast_store(&model.params),
        &model.quant,
        &model.grad_norms,
        ExecMode::PassThrough,
    )?;
    exec.track_decisions = true;
    let xt: Tensor<T> = x.cast();
    let acts = exec.forward(&xt)?;
    let base_trace = acts.trace.value();
    let (_, g) = softmax_xent(&acts.values[exec.info.output], labels)?;
    let mut analytic = exec.backward(&acts, &g)?.params;
    for (name, p) in analytic.iter_mut() {
        adjust(name, p);
    }

    let loss_at = |exec: &Executor<T>| -> Result<(f64, u64)> {
        let a = exec.forward(&xt)?;
        let (l, _) = softmax_xent(&a.values[exec.info.output], labels)?;
        Ok((l, a.trace.value()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<String> = exec.params.keys().cloned().collect();
    let mut layers = Vec::new();
    let h = T::from_f64(cfg.step);
    for name in names {
        let wlen = exec.params[&name].weight.data().len();
        let total = wlen + exec.params[&name].bias.len();
        let mut coords: Vec<usize> = (0..total).collect();
        if total > cfg.coords_per_layer {
            coords.shuffle(&mut rng);
            coords.truncate(cfg.coords_per_layer);
            coords.sort_unstable();
        }
        let mut rep = LayerGradCheck {
            layer: name.clone(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
        };
        for i in coords {
            let orig = coord(&mut exec.params, &name, i, wlen, None);
            coord(&mut exec.params, &name, i, wlen, Some(orig + h));
            let plus = loss_at(&exec);
            coord(&mut exec.params, &name, i, wlen, Some(orig - h));
            let minus = loss_at(&exec);
            coord(&mut exec.params, &name, i, wlen, Some(orig));
            let ((lp, tp), (lm, tm)) = (plus?, minus?);
            if tp != base_trace || tm != base_trace {
                rep.skipped += 1;
                continue;
            }
            // actual perturbation after rounding to T
            let step = (f(orig + h) - f(orig - h)) / 2.0;
            let numeric = (lp - lm) / (2.0 * step);
            let ap = &analytic[&name];
            let a = f(if i < wlen { ap.weight.data()[i] } else { ap.bias[i - wlen] });
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            rep.checked += 1;
            rep.max_rel_err = rep.max_rel_err.max(rel);
        }
        layers.push(rep);
    }
    let max_rel_err = layers.iter().map(|l| l.max_rel_err).fold(0.0, f64::max);
    let checked: usize = layers.iter().map(|l| l.checked).sum();
    Ok(GradCheckReport {
        pass: checked > 0 && max_rel_err <= cfg.tolerance,
        layers,
        max_rel_err,
        tolerance: cfg.tolerance,
    })
}

/// Reads coordinate `i` of a layer's flattened `[weight, bias]`, writing
/// `set` first when given.
fn coord<T: Real>(params: &mut ParamStore<T>, name: &str, i: usize, wlen: usize, set: Option<T>) -> T {
    let p = params.get_mut(name).expect("layer");
    let slot = if i < wlen { &mut p.weight.data_mut()[i] } else { &mut p.bias[i - wlen] };
    if let Some(v) = set {
        *slot = v;
    }
    *slot
}

/// Input batch shape helper for callers building one-off samples.
pub fn sample_shape(model: &Model, n: usize) -> Result<Shape> {
    Ok(model.info()?.edges[0].shape.with_n(n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::nn::build::toy_fire_net;

    #[test]
    fn schedule_steps() {
        let cfg = TrainConfig::default();
        assert_eq!(step_lr(0, &cfg), 1e-3);
        assert_eq!(step_lr(19_999, &cfg), 1e-3);
        assert!((step_lr(20_000, &cfg) - 1e-4).abs() < 1e-18);
        assert!((step_lr(45_000, &cfg) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn xent_matches_hand_computation() {
        let logits = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![1.0f64, 2.0, 3.0]).unwrap();
        let (l, g) = softmax_xent(&logits, &[0]).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        assert!((l - (z.ln() - 1.0)).abs() < 1e-12);
        assert!((g.data()[0] - (1f64.exp() / z - 1.0)).abs() < 1e-12);
        assert!(matches!(softmax_xent(&logits, &[3]), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn sgd_rejects_nan_without_mutating() {
        let mut p = ParamStore::new();
        p.insert("a".into(), LayerParams::<f32>::zeros(Shape::new(1, 1, 1, 2), 1));
        let before = p.clone();
        let mut g = p.clone();
        g.get_mut("a").unwrap().bias[0] = f32::NAN;
        let r = sgd_step(&mut p, &g, 0.1, 0.9, &mut SgdState::default());
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = ParamStore::new();
        p.insert("a".into(), LayerParams::<f32>::zeros(Shape::new(1, 1, 1, 1), 0));
        let mut g = p.clone();
        g.get_mut("a").unwrap().weight.data_mut()[0] = 1.0;
        let mut st = SgdState::default();
        sgd_step(&mut p, &g, 0.5, 0.5, &mut st).unwrap();
        sgd_step(&mut p, &g, 0.5, 0.5, &mut st).unwrap();
        // v1 = 1, v2 = 1.5
        assert_eq!(p["a"].weight.data()[0], -1.25);
    }

    #[test]
    fn lr_scales_whole_velocity() {
        let mut p = ParamStore::new();
        p.insert("a".into(), LayerParams::<f32>::zeros(Shape::new(1, 1, 1, 1), 0));
        let mut g = p.clone();
        g.get_mut("a").unwrap().weight.data_mut()[0] = 1.0;
        let mut st = SgdState::default();
        sgd_step(&mut p, &g, 0.1, 0.9, &mut st).unwrap();
        sgd_step(&mut p, &g, 0.01, 0.9, &mut st).unwrap();
        // w = -0.1·1 - 0.01·1.9
        assert!((p["a"].weight.data()[0] - -0.119).abs() < 1e-7);
    }

    #[test]
    fn chunking_does_not_change_gradients_much() {
        let m = Model::init(toy_fire_net(10, 16), 1).unwrap();
        let d = gen_synthetic(2, 20, 10, 16).unwrap();
        let (l1, g1) = batch_gradients(&m, &d.images, &d.labels, 20).unwrap();
        let (l2, g2) = batch_gradients(&m, &d.images, &d.labels, 3).unwrap();
        assert!((l1 - l2).abs() < 1e-5);
        for (k, a) in &g1 {
            for (x, y) in a.weight.data().iter().zip(g2[k].weight.data()) {
                assert!((x - y).abs() < 1e-4);
            }
        }
    }
}
