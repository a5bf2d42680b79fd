//! Declarative network description: named layers joined by named edges.
//!
//! Layers are listed in topological order. Each layer produces exactly one
//! edge; the graph input is edge 0. Validation infers every edge's shape
//! (for a single sample) and element type.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail, Result};
use crate::nn::layers::{ConvGeom, PoolGeom};
use crate::tensor::Shape;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
    pub transposed: bool,
    pub relu: bool,
}

impl ConvSpec {
    pub fn new(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
            pad,
            output_pad: 0,
            transposed: false,
            relu: false,
        }
    }

    pub fn deconv(out_channels: usize, kernel: usize, stride: usize, pad: usize, output_pad: usize) -> Self {
        Self {
            output_pad,
            transposed: true,
            ..Self::new(out_channels, kernel, stride, pad)
        }
    }

    pub fn relu(mut self) -> Self {
        self.relu = true;
        self
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom {
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            output_pad: self.output_pad,
            transposed: self.transposed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerOp {
    Conv(ConvSpec),
    Relu,
    MaxPool(PoolGeom),
    GlobalAvgPool,
    Concat,
    Fc { out_features: usize },
    Quantize { bits: u8, signed: bool },
    /// Inverse of the quantizer that produced edge `source`.
    Dequantize { source: String },
    Binarize { bits: u8 },
    /// Convolution over GF(2) planes whose output is thresholded back to bits.
    BitConv(ConvSpec),
    Debinarize { bits: u8 },
}

impl LayerOp {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerOp::Conv(_) => "conv",
            LayerOp::Relu => "relu",
            LayerOp::MaxPool(_) => "maxpool",
            LayerOp::GlobalAvgPool => "avgpool",
            LayerOp::Concat => "concat",
            LayerOp::Fc { .. } => "fc",
            LayerOp::Quantize { .. } => "quantize",
            LayerOp::Dequantize { .. } => "dequantize",
            LayerOp::Binarize { .. } => "binarize",
            LayerOp::BitConv(_) => "bitconv",
            LayerOp::Debinarize { .. } => "debinarize",
        }
    }

    pub fn conv_spec(&self) -> Option<&ConvSpec> {
        match self {
            LayerOp::Conv(c) | LayerOp::BitConv(c) => Some(c),
            _ => None,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerOp::Conv(_) | LayerOp::BitConv(_) | LayerOp::Fc { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub op: LayerOp,
    pub inputs: Vec<String>,
    pub output: String,
    /// Report row this layer's output belongs to.
    pub row: Option<String>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, op: LayerOp, inputs: &[&str]) -> Self {
        let name = name.into();
        Self {
            output: name.clone(),
            name,
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            row: None,
        }
    }

    pub fn with_row(mut self, row: impl Into<String>) -> Self {
        self.row = Some(row.into());
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Storage bits per input element.
    pub bits: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkGraph {
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
    pub output: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeType {
    Real,
    Code { bits: u8, signed: bool },
    Bits,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeInfo {
    pub name: String,
    /// Shape of one sample (`n == 1`).
    pub shape: Shape,
    pub ty: EdgeType,
    /// Storage bits per element.
    pub bits: u32,
    pub producer: Option<usize>,
    pub consumers: Vec<usize>,
    pub row: Option<String>,
}

impl EdgeInfo {
    pub fn bytes(&self, n: usize) -> u64 {
        (self.shape.with_n(n).numel() as u64 * self.bits as u64).div_ceil(8)
    }
}

/// Result of validation: resolved edge ids and inferred edge metadata.
#[derive(Clone, Debug)]
pub struct GraphInfo {
    pub edges: Vec<EdgeInfo>,
    pub index: HashMap<String, usize>,
    pub layer_inputs: Vec<Vec<usize>>,
    pub layer_output: Vec<usize>,
    pub output: usize,
}

impl GraphInfo {
    pub fn edge(&self, name: &str) -> Option<&EdgeInfo> {
        self.index.get(name).map(|&i| &self.edges[i])
    }
}

pub const REAL_BITS: u32 = 32;

impl NetworkGraph {
    pub fn new(input: InputSpec) -> Self {
        Self {
            output: input.name.clone(),
            input,
            layers: Vec::new(),
        }
    }

    /// Appends a layer and makes its output the graph output.
    pub fn push(&mut self, layer: LayerSpec) -> &mut Self {
        self.output = layer.output.clone();
        self.layers.push(layer);
        self
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn input_shape(&self, n: usize) -> Shape {
        Shape::new(n, self.input.channels, self.input.height, self.input.width)
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("graph serializes");
        Sha256::digest(&bytes).into()
    }

    /// Weight and bias shapes of every parameterised layer, in graph order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Shape, usize)>> {
        let info = self.validate()?;
        let mut out = Vec::new();
        for (li, l) in self.layers.iter().enumerate() {
            let in_shape = info.edges[info.layer_inputs[li][0]].shape;
            match &l.op {
                LayerOp::Conv(c) | LayerOp::BitConv(c) => {
                    out.push((l.name.clone(), Shape::new(c.out_channels, in_shape.c, c.kernel, c.kernel), c.out_channels))
                }
                LayerOp::Fc { out_features } => {
                    out.push((l.name.clone(), Shape::new(*out_features, in_shape.sample_len(), 1, 1), *out_features))
                }
                _ => {}
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<GraphInfo> {
        let inp = &self.input;
        if inp.channels == 0 || inp.height == 0 || inp.width == 0 {
            bail!(Graph, "input '{}' has an empty dimension", inp.name);
        }
        if inp.bits == 0 || inp.bits > 64 {
            bail!(Graph, "input storage bits {} outside 1..=64", inp.bits);
        }
        let mut edges = vec![EdgeInfo {
            name: inp.name.clone(),
            shape: Shape::new(1, inp.channels, inp.height, inp.width),
            ty: EdgeType::Real,
            bits: inp.bits,
            producer: None,
            consumers: Vec::new(),
            row: None,
        }];
        let mut index = HashMap::from([(inp.name.clone(), 0usize)]);
        let mut names = HashMap::new();
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut layer_output = Vec::with_capacity(self.layers.len());

        for (li, l) in self.layers.iter().enumerate() {
            if names.insert(l.name.clone(), li).is_some() {
                bail!(Graph, "duplicate layer name '{}'", l.name);
            }
            if index.contains_key(&l.output) {
                bail!(Graph, "edge '{}' has more than one producer", l.output);
            }
            let mut ins = Vec::with_capacity(l.inputs.len());
            for name in &l.inputs {
                match index.get(name) {
                    Some(&e) => ins.push(e),
                    None => bail!(Graph, "layer '{}' reads '{}' before it is produced", l.name, name),
                }
            }
            let want_inputs = match l.op {
                LayerOp::Concat => None,
                _ => Some(1),
            };
            match want_inputs {
                Some(k) if ins.len() != k => bail!(Graph, "layer '{}' ({}) takes {} input(s), got {}", l.name, l.op.kind(), k, ins.len()),
                None if ins.len() < 2 => bail!(Graph, "concat '{}' needs at least two inputs", l.name),
                _ => {}
            }
            let (shape, ty) = infer(l, &ins, &edges, &index, &self.layers)?;
            let bits = match ty {
                EdgeType::Real => REAL_BITS,
                EdgeType::Code { bits, .. } => bits as u32,
                EdgeType::Bits => 1,
            };
            for &e in &ins {
                edges[e].consumers.push(li);
            }
            let id = edges.len();
            edges.push(EdgeInfo {
                name: l.output.clone(),
                shape,
                ty,
                bits,
                producer: Some(li),
                consumers: Vec::new(),
                row: l.row.clone(),
            });
            index.insert(l.output.clone(), id);
            layer_inputs.push(ins);
            layer_output.push(id);
        }
        let Some(&output) = index.get(&self.output) else {
            bail!(Graph, "graph output '{}' is not an edge", self.output);
        };
        Ok(GraphInfo {
            edges,
            index,
            layer_inputs,
            layer_output,
            output,
        })
    }
}

fn conv_out(l: &LayerSpec, c: &ConvSpec, s: Shape) -> Result<Shape> {
    if c.out_channels == 0 {
        bail!(Graph, "layer '{}' has zero output channels", l.name);
    }
    let g = c.geom();
    g.validate().map_err(|e| crate::Error::Graph(format!("layer '{}': {}", l.name, e)))?;
    let h = g.out_len(s.h);
    let w = g.out_len(s.w);
    match (h, w) {
        (Ok(h), Ok(w)) => Ok(Shape::new(1, c.out_channels, h, w)),
        _ => bail!(Graph, "layer '{}' cannot convolve a {}x{} map with kernel {} stride {}", l.name, s.h, s.w, c.kernel, c.stride),
    }
}

fn infer(
    l: &LayerSpec,
    ins: &[usize],
    edges: &[EdgeInfo],
    index: &HashMap<String, usize>,
    layers: &[LayerSpec],
) -> Result<(Shape, EdgeType)> {
    let e0 = &edges[ins[0]];
    let s = e0.shape;
    let need_real = || -> Result<()> {
        if e0.ty != EdgeType::Real {
            bail!(Graph, "layer '{}' ({}) needs a real-valued input, '{}' is {:?}", l.name, l.op.kind(), e0.name, e0.ty);
        }
        Ok(())
    };
    Ok(match &l.op {
        LayerOp::Conv(c) => {
            need_real()?;
            (conv_out(l, c, s)?, EdgeType::Real)
        }
        LayerOp::Relu => {
            need_real()?;
            (s, EdgeType::Real)
        }
        LayerOp::MaxPool(p) => {
            need_real()?;
            match (p.out_len(s.h), p.out_len(s.w)) {
                (Ok(h), Ok(w)) => (Shape::new(1, s.c, h, w), EdgeType::Real),
                _ => bail!(Graph, "pool '{}' window {} does not fit {}x{}", l.name, p.window, s.h, s.w),
            }
        }
        LayerOp::GlobalAvgPool => {
            need_real()?;
            (Shape::new(1, s.c, 1, 1), EdgeType::Real)
        }
        LayerOp::Fc { out_features } => {
            need_real()?;
            if *out_features == 0 {
                bail!(Graph, "fc '{}' has zero outputs", l.name);
            }
            (Shape::new(1, *out_features, 1, 1), EdgeType::Real)
        }
        LayerOp::Concat => {
            let mut c = 0;
            for &e in ins {
                let ei = &edges[e];
                if (ei.shape.h, ei.shape.w) != (s.h, s.w) || ei.ty != e0.ty {
                    bail!(Graph, "concat '{}' mixes {} {:?} with {} {:?}", l.name, s, e0.ty, ei.shape, ei.ty);
                }
                c += ei.shape.c;
            }
            (s.with_c(c), e0.ty)
        }
        LayerOp::Quantize { bits, signed } => {
            need_real()?;
            if !(1..=16).contains(bits) || (*signed && *bits < 2) {
                bail!(Graph, "quantizer '{}' has unsupported bit-width {}", l.name, bits);
            }
            (
                s,
                EdgeType::Code {
                    bits: *bits,
                    signed: *signed,
                },
            )
        }
        LayerOp::Dequantize { source } => {
            let Some(&src) = index.get(source) else {
                bail!(Graph, "dequantize '{}' refers to unknown edge '{}'", l.name, source);
            };
            let src_edge = &edges[src];
            let from_quantizer = src_edge
                .producer
                .is_some_and(|p| matches!(layers[p].op, LayerOp::Quantize { .. }));
            if !from_quantizer {
                bail!(Graph, "dequantize '{}' source '{}' is not a quantizer output", l.name, source);
            }
            if e0.ty != src_edge.ty {
                bail!(Graph, "dequantize '{}' input type {:?} differs from source {:?}", l.name, e0.ty, src_edge.ty);
            }
            if s != src_edge.shape {
                bail!(
                    Graph,
                    "dequantize '{}' input {} does not restore source shape {} (compression geometry mismatch)",
                    l.name,
                    s,
                    src_edge.shape
                );
            }
            (s, EdgeType::Real)
        }
        LayerOp::Binarize { bits } => {
            match e0.ty {
                EdgeType::Code { bits: b, signed: false } if b == *bits && *bits <= 8 => {}
                EdgeType::Code { signed: true, .. } => {
                    bail!(Graph, "binarize '{}' requires unsigned codes, '{}' is signed", l.name, e0.name)
                }
                _ => bail!(Graph, "binarize '{}' expects unsigned {}-bit codes (at most 8), got {:?}", l.name, bits, e0.ty),
            }
            (s.with_c(s.c * *bits as usize), EdgeType::Bits)
        }
        LayerOp::BitConv(c) => {
            if e0.ty != EdgeType::Bits {
                bail!(Graph, "bitconv '{}' needs a GF(2) input, got {:?}", l.name, e0.ty);
            }
            (conv_out(l, c, s)?, EdgeType::Bits)
        }
        LayerOp::Debinarize { bits } => {
            if e0.ty != EdgeType::Bits || *bits == 0 || *bits > 8 || !s.c.is_multiple_of(*bits as usize) {
                bail!(Graph, "debinarize '{}' cannot group {} bit-channels by {}", l.name, s.c, bits);
            }
            (
                s.with_c(s.c / *bits as usize),
                EdgeType::Code {
                    bits: *bits,
                    signed: false,
                },
            )
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(c: usize, h: usize) -> InputSpec {
        InputSpec {
            name: "data".into(),
            channels: c,
            height: h,
            width: h,
            bits: 32,
        }
    }

    #[test]
    fn infers_shapes() {
        let mut g = NetworkGraph::new(input(3, 227));
        g.push(LayerSpec::new("conv1", LayerOp::Conv(ConvSpec::new(64, 3, 2, 0).relu()), &["data"]));
        g.push(LayerSpec::new(
            "pool1",
            LayerOp::MaxPool(PoolGeom {
                window: 3,
                stride: 2,
                ceil: true,
            }),
            &["conv1"],
        ));
        g.push(LayerSpec::new("sq", LayerOp::Conv(ConvSpec::new(16, 1, 1, 0).relu()), &["pool1"]));
        let info = g.validate().unwrap();
        assert_eq!(info.edge("conv1").unwrap().shape, Shape::new(1, 64, 113, 113));
        assert_eq!(info.edge("sq").unwrap().shape, Shape::new(1, 16, 56, 56));
        assert_eq!(info.edge("sq").unwrap().bytes(1), 16 * 56 * 56 * 4);
    }

    #[test]
    fn rejects_bad_graphs() {
        let mut g = NetworkGraph::new(input(1, 8));
        g.push(LayerSpec::new("a", LayerOp::Relu, &["missing"]));
        assert!(matches!(g.validate(), Err(crate::Error::Graph(_))));

        let mut g = NetworkGraph::new(input(1, 8));
        g.push(LayerSpec::new("q", LayerOp::Quantize { bits: 9, signed: true }, &["data"]));
        g.push(LayerSpec::new("b", LayerOp::Binarize { bits: 9 }, &["q"]));
        assert!(g.validate().is_err());

        let mut g = NetworkGraph::new(input(1, 8));
        g.push(LayerSpec::new("a", LayerOp::Relu, &["data"]));
        g.push(LayerSpec::new("a", LayerOp::Relu, &["a"]));
        assert!(g.validate().is_err());
    }

    #[test]
    fn odd_extent_fails_restore() {
        let mut g = NetworkGraph::new(input(2, 7));
        g.push(LayerSpec::new("q", LayerOp::Quantize { bits: 2, signed: false }, &["data"]));
        g.push(LayerSpec::new("b", LayerOp::Binarize { bits: 2 }, &["q"]));
        g.push(LayerSpec::new("p", LayerOp::BitConv(ConvSpec::new(4, 3, 2, 1)), &["b"]));
        g.push(LayerSpec::new("r", LayerOp::BitConv(ConvSpec::deconv(4, 3, 2, 1, 1)), &["p"]));
        g.push(LayerSpec::new("bi", LayerOp::Debinarize { bits: 2 }, &["r"]));
        g.push(LayerSpec::new("dq", LayerOp::Dequantize { source: "q".into() }, &["bi"]));
        let err = g.validate().unwrap_err().to_string();
        assert!(err.contains("restore"), "{err}");

        let mut ok = g.clone();
        ok.input.height = 8;
        ok.input.width = 8;
        ok.validate().unwrap();
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let mut g = NetworkGraph::new(input(1, 8));
        g.push(LayerSpec::new("a", LayerOp::Relu, &["data"]));
        let h = g.hash();
        assert_eq!(h, g.clone().hash());
        g.input.height = 9;
        assert_ne!(h, g.hash());
    }
}
