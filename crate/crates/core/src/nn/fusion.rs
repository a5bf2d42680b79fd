//! Layer fusion: grouping layers into steps whose intermediate maps never
//! exist in full.
//!
//! Inside a step, maps are produced one row (all channels of one spatial
//! row) at a time and held in ring buffers just deep enough for their
//! consumers' windows. Only maps that leave a step are materialised.
//!
//! Concat inputs consumed by nothing else are written straight into the
//! concat output, so they occupy no storage of their own.

use std::collections::{HashMap, VecDeque};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::gf2::{pack_bits, unpack_bits, BitTensor};
use crate::nn::exec::{conv_layer_row, Executor};
use crate::nn::graph::{EdgeType, GraphInfo, LayerOp, NetworkGraph};
use crate::nn::layers::{fc_forward, global_avgpool, maxpool_row, RowSlab};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionGroup {
    pub name: String,
    pub layers: Vec<String>,
    /// Allows consumers whose windows overlap between output rows.
    #[serde(default)]
    pub halo: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionPlan {
    pub groups: Vec<FusionGroup>,
}

impl FusionPlan {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn group_of(&self, layer: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.layers.iter().any(|l| l == layer))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeClass {
    Input,
    /// Materialised in full.
    Stored,
    /// Lives in a ring buffer of `rows` rows inside one step.
    Intra { rows: usize },
    /// Written directly into its concat consumer's output.
    Alias,
}

#[derive(Clone, Debug)]
pub struct Step {
    pub name: String,
    pub layers: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct StepPlan {
    pub steps: Vec<Step>,
    pub class: Vec<EdgeClass>,
    pub step_of_layer: Vec<usize>,
    /// Step that produces each edge; `None` for the graph input.
    pub produced_in: Vec<Option<usize>>,
    /// Last step that reads each edge; the graph output stays live to the end.
    pub last_use: Vec<Option<usize>>,
}

impl StepPlan {
    /// Bytes of a ring buffer for an intra edge (single sample).
    pub fn buffer_bytes(&self, info: &GraphInfo, e: usize) -> u64 {
        match self.class[e] {
            EdgeClass::Intra { rows } => {
                let s = info.edges[e].shape;
                (rows as u64 * s.c as u64 * s.w as u64 * info.edges[e].bits as u64).div_ceil(8)
            }
            _ => 0,
        }
    }

    /// Whether edge `e` occupies full storage during step `t`.
    pub fn live_at(&self, e: usize, t: usize) -> bool {
        if !matches!(self.class[e], EdgeClass::Stored | EdgeClass::Input) {
            return false;
        }
        let born = self.produced_in[e].is_none_or(|p| p <= t);
        let alive = match self.last_use[e] {
            Some(l) => t <= l,
            None => self.produced_in[e] == Some(t),
        };
        born && alive
    }
}

/// Rows of an intra input a streaming consumer must see at once, or an
/// error if the consumer cannot stream.
fn rows_for(graph: &NetworkGraph, layer: usize, halo: bool) -> Result<usize> {
    let l = &graph.layers[layer];
    let (rows, overlap) = match &l.op {
        LayerOp::Conv(c) | LayerOp::BitConv(c) => {
            let g = c.geom();
            (g.rows_needed(), g.overlaps())
        }
        LayerOp::MaxPool(p) => (p.rows_needed(), p.overlaps()),
        LayerOp::GlobalAvgPool | LayerOp::Fc { .. } => {
            bail!(Plan, "layer '{}' ({}) needs its whole input and cannot read a fused map", l.name, l.op.kind())
        }
        _ => (1, false),
    };
    if overlap && !halo {
        bail!(
            Plan,
            "layer '{}' reads overlapping row windows; its group must enable halo buffering",
            l.name
        );
    }
    Ok(rows)
}

pub fn analyze(graph: &NetworkGraph, info: &GraphInfo, plan: &FusionPlan) -> Result<StepPlan> {
    let nl = graph.layers.len();
    let mut group_of: Vec<Option<usize>> = vec![None; nl];
    for (gi, g) in plan.groups.iter().enumerate() {
        if g.layers.is_empty() {
            bail!(Plan, "group '{}' is empty", g.name);
        }
        let mut idx = Vec::with_capacity(g.layers.len());
        for name in &g.layers {
            let Some(li) = graph.layer_index(name) else {
                bail!(Plan, "group '{}' names unknown layer '{}'", g.name, name);
            };
            if group_of[li].is_some() {
                bail!(Plan, "layer '{}' appears in more than one group", name);
            }
            group_of[li] = Some(gi);
            idx.push(li);
        }
        idx.sort_unstable();
        if idx.windows(2).any(|w| w[1] != w[0] + 1) {
            bail!(Plan, "group '{}' is not contiguous in graph order", g.name);
        }
    }

    // concat inputs that can be written in place
    let mut alias = vec![false; info.edges.len()];
    for (e, edge) in info.edges.iter().enumerate().skip(1) {
        if e == info.output || edge.consumers.len() != 1 {
            continue;
        }
        let c = edge.consumers[0];
        let p = edge.producer.expect("non-input edge");
        if matches!(graph.layers[c].op, LayerOp::Concat) && group_of[p] == group_of[c] {
            alias[e] = true;
        }
    }

    // assign steps: groups, then singletons; alias producers follow their concat
    let mut owner: Vec<usize> = (0..nl).collect();
    for li in (0..nl).rev() {
        let e = info.layer_output[li];
        if alias[e] && group_of[li].is_none() {
            owner[li] = owner[info.edges[e].consumers[0]];
        }
    }
    let mut keyed: HashMap<(bool, usize), Vec<usize>> = HashMap::new();
    for li in 0..nl {
        let key = match group_of[li] {
            Some(g) => (true, g),
            None => (false, owner[li]),
        };
        keyed.entry(key).or_default().push(li);
    }
    let mut steps: Vec<Step> = keyed
        .into_iter()
        .map(|((grouped, k), layers)| Step {
            name: if grouped {
                plan.groups[k].name.clone()
            } else {
                graph.layers[k].name.clone()
            },
            layers,
        })
        .collect();
    steps.sort_by_key(|s| *s.layers.last().expect("non-empty"));
    let mut step_of_layer = vec![0; nl];
    for (t, s) in steps.iter().enumerate() {
        for &li in &s.layers {
            step_of_layer[li] = t;
        }
    }
    for li in 0..nl {
        for &e in &info.layer_inputs[li] {
            if let Some(p) = info.edges[e].producer {
                if step_of_layer[p] > step_of_layer[li] {
                    bail!(
                        Plan,
                        "layer '{}' would run before '{}', which produces its input",
                        graph.layers[li].name,
                        graph.layers[p].name
                    );
                }
            }
        }
    }

    let mut class = vec![EdgeClass::Stored; info.edges.len()];
    class[0] = EdgeClass::Input;
    let mut produced_in = vec![None; info.edges.len()];
    let mut last_use = vec![None; info.edges.len()];
    for (e, edge) in info.edges.iter().enumerate() {
        produced_in[e] = edge.producer.map(|p| step_of_layer[p]);
        last_use[e] = edge.consumers.iter().map(|&c| step_of_layer[c]).max();
        if e == info.output {
            last_use[e] = Some(steps.len() - 1);
        }
        if e == 0 {
            continue;
        }
        if alias[e] {
            class[e] = EdgeClass::Alias;
            continue;
        }
        let t = produced_in[e].expect("produced");
        let internal = e != info.output
            && !edge.consumers.is_empty()
            && edge.consumers.iter().all(|&c| step_of_layer[c] == t);
        if internal {
            let halo = group_of[edge.producer.expect("produced")].is_some_and(|g| plan.groups[g].halo);
            let mut rows = 1;
            for &c in &edge.consumers {
                rows = rows.max(rows_for(graph, c, halo)?);
            }
            class[e] = EdgeClass::Intra {
                rows: rows.min(edge.shape.h),
            };
        }
    }
    // alias edges must feed a concat that can itself be row-produced
    Ok(StepPlan {
        steps,
        class,
        step_of_layer,
        produced_in,
        last_use,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StepUsage {
    pub name: String,
    pub stored_live_bytes: u64,
    pub buffer_bytes: u64,
}

impl StepUsage {
    pub fn total(&self) -> u64 {
        self.stored_live_bytes + self.buffer_bytes
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MemoryTrace {
    pub steps: Vec<StepUsage>,
    /// Bytes of every materialised map, excluding the input.
    pub stored_bytes: u64,
    pub peak_bytes: u64,
}

#[derive(Clone, Debug)]
pub struct FusedOutput<S> {
    pub output: Tensor<S>,
    pub trace: MemoryTrace,
}

enum Stored<S> {
    Dense(Tensor<S>),
    Packed(BitTensor),
}

impl<S: Scalar> Stored<S> {
    fn bytes(&self, bits: u32) -> u64 {
        match self {
            Stored::Dense(t) => (t.shape().numel() as u64 * bits as u64).div_ceil(8),
            Stored::Packed(b) => b.payload().len() as u64,
        }
    }

    fn dense(&self) -> Tensor<S> {
        match self {
            Stored::Dense(t) => t.clone(),
            Stored::Packed(b) => unpack_bits(b),
        }
    }
}

enum RowStore<S> {
    Ring { cap: usize, next: usize, rows: VecDeque<Rc<Vec<S>>> },
    Full { next: usize, map: Tensor<S> },
}

fn copy_row<S: Scalar>(t: &Tensor<S>, y: usize) -> Vec<S> {
    let s = t.shape();
    let mut out = Vec::with_capacity(s.c * s.w);
    for c in 0..s.c {
        out.extend_from_slice(&t.plane(0, c)[y * s.w..(y + 1) * s.w]);
    }
    out
}

fn write_row<S: Scalar>(t: &mut Tensor<S>, y: usize, row: &[S]) {
    let s = t.shape();
    let plane = s.plane_len();
    let data = t.data_mut();
    for c in 0..s.c {
        data[c * plane + y * s.w..][..s.w].copy_from_slice(&row[c * s.w..(c + 1) * s.w]);
    }
}

struct StepRun<'a, 'g, S> {
    exec: &'a Executor<'g, S>,
    sp: &'a StepPlan,
    maps: &'a [Option<Tensor<S>>],
    stores: HashMap<usize, RowStore<S>>,
}

impl<S: Scalar> StepRun<'_, '_, S> {
    fn info(&self) -> &GraphInfo {
        &self.exec.info
    }

    fn fetch(&mut self, e: usize, y: usize) -> Result<Rc<Vec<S>>> {
        if let Some(m) = &self.maps[e] {
            return Ok(Rc::new(copy_row(m, y)));
        }
        if self.sp.class[e] == EdgeClass::Alias {
            let p = self.info().edges[e].producer.expect("produced");
            return Ok(Rc::new(self.compute_row(p, y)?));
        }
        loop {
            let store = self
                .stores
                .get(&e)
                .ok_or_else(|| crate::Error::Plan(format!("edge '{}' is not available in this step", self.info().edges[e].name)))?;
            match store {
                RowStore::Ring { next, rows, .. } if y < *next => {
                    let first = next - rows.len();
                    if y < first {
                        bail!(Plan, "row {} of '{}' was already evicted", y, self.info().edges[e].name);
                    }
                    return Ok(rows[y - first].clone());
                }
                RowStore::Full { next, map } if y < *next => return Ok(Rc::new(copy_row(map, y))),
                _ => self.produce(e)?,
            }
        }
    }

    fn produce(&mut self, e: usize) -> Result<()> {
        let p = self.info().edges[e].producer.expect("produced");
        let y = match &self.stores[&e] {
            RowStore::Ring { next, .. } | RowStore::Full { next, .. } => *next,
        };
        let row = self.compute_row(p, y)?;
        match self.stores.get_mut(&e).expect("store exists") {
            RowStore::Ring { cap, next, rows } => {
                if rows.len() == *cap {
                    rows.pop_front();
                }
                rows.push_back(Rc::new(row));
                *next += 1;
            }
            RowStore::Full { next, map } => {
                write_row(map, y, &row);
                *next += 1;
            }
        }
        Ok(())
    }

    fn compute_row(&mut self, li: usize, y: usize) -> Result<Vec<S>> {
        let exec = self.exec;
        let l = &exec.graph.layers[li];
        let ins = exec.info.layer_inputs[li].clone();
        let in_shape = exec.info.edges[ins[0]].shape;
        let out_shape = exec.info.edges[exec.info.layer_output[li]].shape;
        let mut out = vec![S::ZERO; out_shape.c * out_shape.w];
        match &l.op {
            LayerOp::Conv(c) | LayerOp::BitConv(c) => {
                let taps_idx = c.geom().taps(y, in_shape.h);
                let mut rows = Vec::with_capacity(taps_idx.len());
                for &(kh, iy) in &taps_idx {
                    rows.push((kh, self.fetch(ins[0], iy)?));
                }
                let taps: Vec<(usize, RowSlab<'_, S>)> = rows
                    .iter()
                    .map(|(kh, r)| {
                        (
                            *kh,
                            RowSlab {
                                data: r.as_slice(),
                                channel_stride: in_shape.w,
                            },
                        )
                    })
                    .collect();
                let bit = matches!(l.op, LayerOp::BitConv(_));
                conv_layer_row(c, bit, exec.mode, &exec.params[&l.name], in_shape.w, &taps, out_shape.w, &mut out);
            }
            LayerOp::MaxPool(g) => {
                let mut rows = Vec::new();
                for iy in g.rows(y, in_shape.h) {
                    rows.push((iy, self.fetch(ins[0], iy)?));
                }
                let slabs: Vec<(usize, RowSlab<'_, S>)> = rows
                    .iter()
                    .map(|(iy, r)| {
                        (
                            *iy,
                            RowSlab {
                                data: r.as_slice(),
                                channel_stride: in_shape.w,
                            },
                        )
                    })
                    .collect();
                maxpool_row(g, in_shape.c, in_shape.w, &slabs, out_shape.w, &mut out);
            }
            LayerOp::GlobalAvgPool | LayerOp::Fc { .. } => {
                let Some(m) = &self.maps[ins[0]] else {
                    bail!(Plan, "layer '{}' needs a materialised input", l.name);
                };
                let res = match &l.op {
                    LayerOp::GlobalAvgPool => global_avgpool(m),
                    _ => {
                        let p = &exec.params[&l.name];
                        fc_forward(m, &p.weight, &p.bias)?
                    }
                };
                out.copy_from_slice(res.data());
            }
            LayerOp::Concat => {
                let mut off = 0;
                for &e in &ins {
                    let r = self.fetch(e, y)?;
                    out[off..off + r.len()].copy_from_slice(&r);
                    off += r.len();
                }
            }
            _ => {
                let pw = exec.pointwise(li).expect("pointwise layer");
                let r = self.fetch(ins[0], y)?;
                pw.apply(exec.mode, &r, in_shape.c, in_shape.w, &mut out, None)?;
            }
        }
        Ok(out)
    }
}

/// Runs the graph step by step under `plan`, sample by sample, and reports
/// the storage each step needed (for one sample).
pub fn fused_execute<S: Scalar>(exec: &Executor<'_, S>, x: &Tensor<S>, plan: &FusionPlan) -> Result<FusedOutput<S>> {
    let info = &exec.info;
    let sp = analyze(exec.graph, info, plan)?;
    let in_shape = info.edges[0].shape.with_n(x.shape().n);
    if x.shape() != in_shape {
        bail!(ShapeMismatch, "input {} does not match graph input {}", x.shape(), in_shape);
    }
    let mut outputs = Vec::with_capacity(x.shape().n);
    let mut trace = MemoryTrace::default();
    for n in 0..x.shape().n {
        let (out, tr) = run_sample(exec, &sp, x.slice_batch(n, n + 1))?;
        outputs.push(out);
        if n == 0 {
            trace = tr;
        }
    }
    let refs: Vec<&Tensor<S>> = outputs.iter().collect();
    let output = if refs.len() == 1 {
        outputs.pop().expect("one")
    } else {
        let s = refs[0].shape();
        let mut data = Vec::with_capacity(s.numel() * refs.len());
        for r in &refs {
            data.extend_from_slice(r.data());
        }
        Tensor::from_vec(s.with_n(refs.len()), data)?
    };
    Ok(FusedOutput { output, trace })
}

fn run_sample<S: Scalar>(exec: &Executor<'_, S>, sp: &StepPlan, x: Tensor<S>) -> Result<(Tensor<S>, MemoryTrace)> {
    let info = &exec.info;
    let ne = info.edges.len();
    let mut stored: Vec<Option<Stored<S>>> = (0..ne).map(|_| None).collect();
    stored[0] = Some(Stored::Dense(x));
    let mut trace = MemoryTrace::default();
    for (t, step) in sp.steps.iter().enumerate() {
        let maps: Vec<Option<Tensor<S>>> = stored.iter().map(|m| m.as_ref().map(Stored::dense)).collect();
        let mut run = StepRun {
            exec,
            sp,
            maps: &maps,
            stores: HashMap::new(),
        };
        let mut sinks = Vec::new();
        let mut buffer_bytes = 0;
        for &li in &step.layers {
            let e = info.layer_output[li];
            let shape = info.edges[e].shape;
            match sp.class[e] {
                EdgeClass::Intra { rows } => {
                    buffer_bytes += sp.buffer_bytes(info, e);
                    run.stores.insert(
                        e,
                        RowStore::Ring {
                            cap: rows,
                            next: 0,
                            rows: VecDeque::with_capacity(rows),
                        },
                    );
                }
                EdgeClass::Stored => {
                    sinks.push(e);
                    run.stores.insert(
                        e,
                        RowStore::Full {
                            next: 0,
                            map: Tensor::zeros(Shape::new(1, shape.c, shape.h, shape.w)),
                        },
                    );
                }
                EdgeClass::Alias | EdgeClass::Input => {}
            }
        }
        let h_max = sinks.iter().map(|&e| info.edges[e].shape.h).max().unwrap_or(0);
        for y in 0..h_max {
            for &e in &sinks {
                let h = info.edges[e].shape.h;
                let target = ((y + 1) * h).div_ceil(h_max);
                loop {
                    let RowStore::Full { next, .. } = &run.stores[&e] else { unreachable!() };
                    if *next >= target {
                        break;
                    }
                    run.produce(e)?;
                }
            }
        }
        for &e in &sinks {
            let Some(RowStore::Full { map, .. }) = run.stores.remove(&e) else { unreachable!() };
            let packed = if info.edges[e].ty == EdgeType::Bits {
                pack_bits(&map).ok().map(Stored::Packed)
            } else {
                None
            };
            trace.stored_bytes += packed.as_ref().map_or_else(|| Stored::Dense(map.clone()).bytes(info.edges[e].bits), |p| p.bytes(1));
            stored[e] = Some(packed.unwrap_or(Stored::Dense(map)));
        }
        drop(run);
        let live: u64 = stored
            .iter()
            .enumerate()
            .filter_map(|(e, m)| m.as_ref().map(|m| m.bytes(info.edges[e].bits)))
            .sum();
        let usage = StepUsage {
            name: step.name.clone(),
            stored_live_bytes: live,
            buffer_bytes,
        };
        trace.peak_bytes = trace.peak_bytes.max(usage.total());
        trace.steps.push(usage);
        for (e, m) in stored.iter_mut().enumerate() {
            if m.is_some() && e != info.output && sp.last_use[e].is_none_or(|l| l <= t) {
                *m = None;
            }
        }
    }
    let out = stored[info.output]
        .take()
        .ok_or_else(|| crate::Error::Plan("graph output was never produced".into()))?
        .dense();
    Ok((out, trace))
}
