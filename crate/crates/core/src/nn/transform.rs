//! Inserting quantization and GF(2) compression around chosen feature maps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::fusion::FusionPlan;
use crate::nn::graph::{ConvSpec, LayerOp, LayerSpec, NetworkGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CompressionMode {
    /// Quantization only.
    #[serde(rename = "none")]
    None,
    #[serde(rename = "1x1")]
    Channel1x1,
    #[serde(rename = "3x3s2")]
    Conv3x3s2,
    #[serde(rename = "2x2s2")]
    Conv2x2s2,
}

impl CompressionMode {
    pub fn is_spatial(&self) -> bool {
        matches!(self, CompressionMode::Conv3x3s2 | CompressionMode::Conv2x2s2)
    }

    /// Projection and reconstruction layer specs for `bc` bit-channels.
    pub fn layer_specs(&self, bc: usize, compressed: usize) -> Option<(ConvSpec, ConvSpec)> {
        match self {
            CompressionMode::None => None,
            CompressionMode::Channel1x1 => Some((ConvSpec::new(compressed, 1, 1, 0), ConvSpec::new(bc, 1, 1, 0))),
            CompressionMode::Conv3x3s2 => Some((ConvSpec::new(compressed, 3, 2, 1), ConvSpec::deconv(bc, 3, 2, 1, 1))),
            CompressionMode::Conv2x2s2 => Some((ConvSpec::new(compressed, 2, 2, 0), ConvSpec::deconv(bc, 2, 2, 0, 0))),
        }
    }
}

impl fmt::Display for CompressionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CompressionMode::None => "none",
            CompressionMode::Channel1x1 => "1x1",
            CompressionMode::Conv3x3s2 => "3x3s2",
            CompressionMode::Conv2x2s2 => "2x2s2",
        })
    }
}

impl FromStr for CompressionMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => CompressionMode::None,
            "1x1" => CompressionMode::Channel1x1,
            "3x3s2" => CompressionMode::Conv3x3s2,
            "2x2s2" => CompressionMode::Conv2x2s2,
            other => bail!(InvalidArgument, "unknown compression mode '{}' (none, 1x1, 3x3s2, 2x2s2)", other),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    pub targets: Vec<String>,
    pub bits: u8,
    #[serde(default)]
    pub signed: bool,
    pub mode: CompressionMode,
    /// Stored bit-channels; defaults to `bits × channels`.
    #[serde(default)]
    pub compressed_channels: Option<usize>,
    /// Adds a ReLU in front of the quantizer.
    #[serde(default)]
    pub insert_relu: bool,
}

/// Names of the layers inserted for one target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InsertedBlock {
    pub target: String,
    pub quantize: String,
    pub binarize: Option<String>,
    pub project: Option<String>,
    pub reconstruct: Option<String>,
    pub debinarize: Option<String>,
    pub dequantize: String,
    /// The map that is kept between the two halves.
    pub stored: String,
}

/// Rewrites `graph` so every target edge passes through
/// `[relu] → q → [b → P → R → b⁻¹] → q⁻¹` before reaching its consumers.
///
/// Producer-side layers join the producer's fusion group and consumer-side
/// layers join the group of the first consumer, when those exist.
pub fn insert_compression(
    graph: &NetworkGraph,
    plan: &FusionPlan,
    cfg: &CompressionConfig,
) -> Result<(NetworkGraph, FusionPlan, Vec<InsertedBlock>)> {
    let mut g = graph.clone();
    let mut plan = plan.clone();
    let mut blocks = Vec::new();
    for target in &cfg.targets {
        let info = g.validate()?;
        let Some(&e) = info.index.get(target) else {
            bail!(Graph, "compression target '{}' is not an edge", target);
        };
        let edge = &info.edges[e];
        let Some(pi) = edge.producer else {
            bail!(Graph, "cannot compress the graph input '{}'", target);
        };
        if e == info.output {
            bail!(Graph, "cannot compress the graph output '{}'", target);
        }
        let s = edge.shape;
        let bc = s.c * cfg.bits as usize;
        let compressed = cfg.compressed_channels.unwrap_or(bc);
        if compressed == 0 || compressed > bc {
            bail!(Graph, "compressed channels {} must lie in 1..={} for '{}'", compressed, bc, target);
        }
        let consumers = edge.consumers.clone();
        let first_consumer = consumers.iter().min().copied();
        let row = g.layers[pi].row.take();

        let name = |suffix: &str| format!("{target}/{suffix}");
        let mut enc: Vec<LayerSpec> = Vec::new();
        let mut dec: Vec<LayerSpec> = Vec::new();
        let mut cur = target.clone();
        if cfg.insert_relu {
            enc.push(LayerSpec::new(name("relu"), LayerOp::Relu, &[&cur]));
            cur = name("relu");
        }
        enc.push(LayerSpec::new(
            name("q"),
            LayerOp::Quantize {
                bits: cfg.bits,
                signed: cfg.signed,
            },
            &[&cur],
        ));
        cur = name("q");
        let mut block = InsertedBlock {
            target: target.clone(),
            quantize: name("q"),
            binarize: None,
            project: None,
            reconstruct: None,
            debinarize: None,
            dequantize: name("dq"),
            stored: name("q"),
        };
        if let Some((p, r)) = cfg.mode.layer_specs(bc, compressed) {
            enc.push(LayerSpec::new(name("b"), LayerOp::Binarize { bits: cfg.bits }, &[&cur]));
            enc.push(LayerSpec::new(name("P"), LayerOp::BitConv(p), &[&name("b")]));
            dec.push(LayerSpec::new(name("R"), LayerOp::BitConv(r), &[&name("P")]));
            dec.push(LayerSpec::new(name("bi"), LayerOp::Debinarize { bits: cfg.bits }, &[&name("R")]));
            cur = name("bi");
            block.binarize = Some(name("b"));
            block.project = Some(name("P"));
            block.reconstruct = Some(name("R"));
            block.debinarize = Some(name("bi"));
            block.stored = name("P");
        }
        dec.push(LayerSpec::new(name("dq"), LayerOp::Dequantize { source: name("q") }, &[&cur]));
        if let Some(r) = row {
            let stored = enc.iter_mut().find(|l| l.name == block.stored).expect("stored layer");
            stored.row = Some(r);
        }

        // fusion membership, computed before indices shift
        let producer_name = g.layers[pi].name.clone();
        let consumer_name = first_consumer.map(|c| g.layers[c].name.clone());
        for &c in &consumers {
            for inp in &mut g.layers[c].inputs {
                if inp == target {
                    *inp = name("dq");
                }
            }
        }
        let enc_names: Vec<String> = enc.iter().map(|l| l.name.clone()).collect();
        let dec_names: Vec<String> = dec.iter().map(|l| l.name.clone()).collect();
        let at = pi + 1;
        g.layers.splice(at..at, enc.into_iter().chain(dec));

        if let Some(gi) = plan.group_of(&producer_name) {
            plan.groups[gi].layers.extend(enc_names);
        }
        if let Some(gi) = consumer_name.and_then(|c| plan.group_of(&c)) {
            plan.groups[gi].layers.extend(dec_names);
        }
        blocks.push(block);
    }
    g.validate()?;
    Ok((g, plan, blocks))
}
