//! Architecture builders.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::fusion::FusionPlan;
use crate::nn::graph::{ConvSpec, InputSpec, LayerOp, LayerSpec, NetworkGraph};
use crate::nn::layers::PoolGeom;
use crate::nn::transform::{insert_compression, CompressionConfig, CompressionMode};

/// Optional compression appended after a module's output map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub bits: u8,
    pub mode: CompressionMode,
    #[serde(default)]
    pub compressed_channels: Option<usize>,
}

/// Expand 1×1 ∥ expand 3×3 → concat → squeeze 1×1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FireConfig {
    pub name: String,
    pub expand1x1: usize,
    pub expand3x3: usize,
    /// Defaults to one eighth of the expand width.
    #[serde(default)]
    pub squeeze: Option<usize>,
    #[serde(default)]
    pub compression: Option<BlockConfig>,
}

/// Appends a fire module reading `input`; returns the module's output edge.
pub fn build_fire_module(graph: &mut NetworkGraph, cfg: &FireConfig, input: &str) -> Result<String> {
    let width = cfg.expand1x1 + cfg.expand3x3;
    if cfg.expand1x1 == 0 || cfg.expand3x3 == 0 {
        bail!(Graph, "fire '{}' needs both expand branches", cfg.name);
    }
    let squeeze = match cfg.squeeze {
        Some(s) => s,
        None if width.is_multiple_of(8) => width / 8,
        None => bail!(Graph, "fire '{}' expand width {} is not divisible by 8", cfg.name, width),
    };
    if squeeze == 0 || squeeze > width {
        bail!(Graph, "fire '{}' squeeze width {} must lie in 1..={}", cfg.name, squeeze, width);
    }
    let n = |s: &str| format!("{}/{}", cfg.name, s);
    graph.push(LayerSpec::new(
        n("expand1x1"),
        LayerOp::Conv(ConvSpec::new(cfg.expand1x1, 1, 1, 0).relu()),
        &[input],
    ));
    graph.push(LayerSpec::new(
        n("expand3x3"),
        LayerOp::Conv(ConvSpec::new(cfg.expand3x3, 3, 1, 1).relu()),
        &[input],
    ));
    graph.push(LayerSpec::new(n("concat"), LayerOp::Concat, &[&n("expand1x1"), &n("expand3x3")]));
    graph.push(LayerSpec::new(n("squeeze"), LayerOp::Conv(ConvSpec::new(squeeze, 1, 1, 0).relu()), &[&n("concat")]));
    let out = n("squeeze");
    if let Some(b) = &cfg.compression {
        let cc = CompressionConfig {
            targets: vec![out.clone()],
            bits: b.bits,
            signed: false,
            mode: b.mode,
            compressed_channels: b.compressed_channels,
            insert_relu: false,
        };
        // the map is still the graph output, so add a placeholder consumer
        let (g, _, blocks) = insert_compression(&with_sink(graph, &out), &FusionPlan::empty(), &cc)?;
        *graph = g;
        graph.layers.pop();
        graph.output = blocks[0].dequantize.clone();
        return Ok(blocks[0].dequantize.clone());
    }
    graph.validate()?;
    Ok(out)
}

fn with_sink(graph: &NetworkGraph, edge: &str) -> NetworkGraph {
    let mut g = graph.clone();
    g.push(LayerSpec::new("__sink", LayerOp::Relu, &[edge]));
    g
}

/// MobileNetV2-style inverted bottleneck with standard (not depthwise) 3×3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BottleneckConfig {
    pub name: String,
    /// Expansion factor, 2..=6.
    pub factor: usize,
    pub out_channels: usize,
    #[serde(default = "one")]
    pub stride: usize,
    /// Appends a ReLU to the linear projection so its output is unsigned.
    #[serde(default = "yes")]
    pub relu_after_linear: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

pub fn build_bottleneck_module(graph: &mut NetworkGraph, cfg: &BottleneckConfig, input: &str) -> Result<String> {
    if !(2..=6).contains(&cfg.factor) {
        bail!(Graph, "bottleneck '{}' factor {} outside 2..=6", cfg.name, cfg.factor);
    }
    if cfg.out_channels == 0 || cfg.stride == 0 {
        bail!(Graph, "bottleneck '{}' needs positive width and stride", cfg.name);
    }
    let info = graph.validate()?;
    let Some(e) = info.edge(input) else {
        bail!(Graph, "bottleneck '{}' input '{}' does not exist", cfg.name, input);
    };
    let inner = e.shape.c * cfg.factor;
    let n = |s: &str| format!("{}/{}", cfg.name, s);
    graph.push(LayerSpec::new(n("expand"), LayerOp::Conv(ConvSpec::new(inner, 1, 1, 0).relu()), &[input]));
    graph.push(LayerSpec::new(
        n("conv3x3"),
        LayerOp::Conv(ConvSpec::new(inner, 3, cfg.stride, 1).relu()),
        &[&n("expand")],
    ));
    let mut linear = ConvSpec::new(cfg.out_channels, 1, 1, 0);
    linear.relu = cfg.relu_after_linear;
    graph.push(LayerSpec::new(n("linear"), LayerOp::Conv(linear), &[&n("conv3x3")]));
    graph.validate()?;
    Ok(n("linear"))
}

/// The desk-scale classifier: conv 3×3/2 → maxpool 2×2/2 → two fire
/// modules → 1×1 classifier → global average.
pub fn toy_fire_net(classes: usize, size: usize) -> NetworkGraph {
    let mut g = NetworkGraph::new(InputSpec {
        name: "data".into(),
        channels: 1,
        height: size,
        width: size,
        bits: 32,
    });
    g.push(LayerSpec::new("conv1", LayerOp::Conv(ConvSpec::new(16, 3, 2, 1).relu()), &["data"]));
    g.push(LayerSpec::new(
        "pool1",
        LayerOp::MaxPool(PoolGeom {
            window: 2,
            stride: 2,
            ceil: false,
        }),
        &["conv1"],
    ));
    let mut cur = "pool1".to_string();
    for name in ["fire2", "fire3"] {
        let cfg = FireConfig {
            name: name.into(),
            expand1x1: 32,
            expand3x3: 32,
            squeeze: None,
            compression: None,
        };
        cur = build_fire_module(&mut g, &cfg, &cur).expect("static geometry");
    }
    g.push(LayerSpec::new("classifier", LayerOp::Conv(ConvSpec::new(classes, 1, 1, 0)), &[&cur]));
    g.push(LayerSpec::new("gap", LayerOp::GlobalAvgPool, &["classifier"]));
    g
}

/// Fusion plan for [`toy_fire_net`]: stem and each fire module fused.
/// Fire groups allow halo rows so a decoder inserted in front of the
/// 3×3 expand can stay inside the group.
pub fn toy_fusion_plan() -> FusionPlan {
    use crate::nn::fusion::FusionGroup;
    let group = |name: &str, layers: &[&str]| FusionGroup {
        name: name.into(),
        layers: layers.iter().map(|s| s.to_string()).collect(),
        halo: name != "stem",
    };
    FusionPlan {
        groups: vec![
            group("stem", &["conv1", "pool1"]),
            group("fire2", &["fire2/expand1x1", "fire2/expand3x3", "fire2/concat", "fire2/squeeze"]),
            group("fire3", &["fire3/expand1x1", "fire3/expand3x3", "fire3/concat", "fire3/squeeze"]),
        ],
    }
}
