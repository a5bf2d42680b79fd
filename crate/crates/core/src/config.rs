//! TOML experiment configuration: network, fusion plan, compression,
//! training schedule, data source and memory-table layout.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetSource;
use crate::error::{bail, Error, Result};
use crate::memplan::{plan_memory, MemoryTable};
use crate::nn::build::{build_bottleneck_module, build_fire_module, BottleneckConfig, FireConfig};
use crate::nn::fusion::{FusionGroup, FusionPlan};
use crate::nn::graph::{ConvSpec, InputSpec, LayerOp, LayerSpec, NetworkGraph};
use crate::nn::layers::PoolGeom;
use crate::nn::transform::{CompressionConfig, CompressionMode};
use crate::train::{GradCheckConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub input: InputSpec,
    /// Defaults to the last layer's output.
    #[serde(default)]
    pub output: Option<String>,
}

/// One `[[layer]]` entry. Which optional fields apply depends on `kind`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub name: String,
    pub kind: String,
    /// Defaults to the previous layer's output (or the network input).
    #[serde(default)]
    pub inputs: Option<Vec<String>>,
    #[serde(default)]
    pub row: Option<String>,
    #[serde(default)]
    pub out_channels: Option<usize>,
    #[serde(default)]
    pub kernel: Option<usize>,
    #[serde(default)]
    pub stride: Option<usize>,
    #[serde(default)]
    pub pad: Option<usize>,
    #[serde(default)]
    pub output_pad: Option<usize>,
    #[serde(default)]
    pub relu: Option<bool>,
    #[serde(default)]
    pub ceil: Option<bool>,
    #[serde(default)]
    pub out_features: Option<usize>,
    #[serde(default)]
    pub bits: Option<u8>,
    #[serde(default)]
    pub signed: Option<bool>,
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default)]
    pub expand1x1: Option<usize>,
    #[serde(default)]
    pub expand3x3: Option<usize>,
    #[serde(default)]
    pub squeeze: Option<usize>,
    /// Row label for a fire module's expand concat.
    #[serde(default)]
    pub expand_row: Option<String>,
    #[serde(default)]
    pub factor: Option<usize>,
}

/// One column of a memory table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemplanColumn {
    pub label: String,
    #[serde(default)]
    pub fused: bool,
    /// Absent means the targets stay in float.
    #[serde(default)]
    pub bits: Option<u8>,
    #[serde(default)]
    pub signed: bool,
    #[serde(default = "mode_none")]
    pub mode: CompressionMode,
    #[serde(default)]
    pub compressed_channels: Option<usize>,
    #[serde(default)]
    pub insert_relu: bool,
}

fn mode_none() -> CompressionMode {
    CompressionMode::None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemplanSection {
    #[serde(default)]
    pub title: Option<String>,
    pub targets: Vec<String>,
    /// Bit-widths for the weight-size report.
    #[serde(default)]
    pub weight_bits: Vec<u32>,
    #[serde(default, rename = "column")]
    pub columns: Vec<MemplanColumn>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub network: NetworkSection,
    #[serde(default, rename = "layer")]
    pub layers: Vec<LayerRecord>,
    #[serde(default, rename = "fusion")]
    pub fusion: Vec<FusionGroup>,
    #[serde(default)]
    pub compression: Option<CompressionConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Schedule for retraining after quantization or compression.
    #[serde(default)]
    pub finetune: Option<TrainConfig>,
    #[serde(default)]
    pub data: Option<DatasetSource>,
    #[serde(default)]
    pub memplan: Option<MemplanSection>,
    #[serde(default)]
    pub gradcheck: Option<GradCheckConfig>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        if let Some(f) = &cfg.finetune {
            f.validate()?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
        Self::parse(&text)
    }

    pub fn fusion_plan(&self) -> FusionPlan {
        FusionPlan {
            groups: self.fusion.clone(),
        }
    }

    pub fn finetune_config(&self) -> &TrainConfig {
        self.finetune.as_ref().unwrap_or(&self.train)
    }

    /// Builds and validates the base graph (without compression).
    pub fn build_graph(&self) -> Result<NetworkGraph> {
        let mut g = NetworkGraph::new(self.network.input.clone());
        let mut prev = self.network.input.name.clone();
        for rec in &self.layers {
            prev = add_layer(&mut g, rec, &prev)?;
        }
        if g.layers.is_empty() {
            bail!(Config, "network has no layers");
        }
        if let Some(out) = &self.network.output {
            g.output = out.clone();
        }
        g.validate()?;
        Ok(g)
    }

    /// The compression section with optional command-line overrides.
    /// Changing the bit-width resets `compressed_channels` to its default.
    pub fn compression_with(&self, bits: Option<u8>, mode: Option<CompressionMode>) -> Result<Option<CompressionConfig>> {
        match (&self.compression, bits, mode) {
            (None, None, None) => Ok(None),
            (None, _, _) => bail!(Config, "--bits/--mode need a [compression] section naming the targets"),
            (Some(c), b, m) => {
                let mut c = c.clone();
                if let Some(b) = b {
                    // a width chosen for another bit-width no longer fits
                    if b != c.bits {
                        c.compressed_channels = None;
                    }
                    c.bits = b;
                }
                if let Some(m) = m {
                    c.mode = m;
                }
                Ok(Some(c))
            }
        }
    }

    /// Computes every column of the `[memplan]` section.
    pub fn memory_table(&self) -> Result<MemoryTable> {
        let Some(mp) = &self.memplan else {
            bail!(Config, "config has no [memplan] section");
        };
        if mp.columns.is_empty() {
            bail!(Config, "[memplan] needs at least one [[memplan.column]]");
        }
        let graph = self.build_graph()?;
        let fused = self.fusion_plan();
        let mut columns = Vec::new();
        for col in &mp.columns {
            let plan = if col.fused { fused.clone() } else { FusionPlan::empty() };
            let comp = col.bits.map(|bits| CompressionConfig {
                targets: mp.targets.clone(),
                bits,
                signed: col.signed,
                mode: col.mode,
                compressed_channels: col.compressed_channels,
                insert_relu: col.insert_relu,
            });
            if comp.is_none() && col.mode != CompressionMode::None {
                bail!(Config, "column '{}' sets a mode but no bits", col.label);
            }
            columns.push((col.label.clone(), plan_memory(&graph, &plan, comp.as_ref())?));
        }
        Ok(MemoryTable {
            title: mp.title.clone().unwrap_or_else(|| "Feature-map memory, KB".into()),
            columns,
        })
    }
}

fn need<T: Copy>(v: Option<T>, rec: &LayerRecord, field: &str) -> Result<T> {
    match v {
        Some(v) => Ok(v),
        None => bail!(Config, "layer '{}' ({}) needs '{}'", rec.name, rec.kind, field),
    }
}

fn conv_spec(rec: &LayerRecord, transposed: bool) -> Result<ConvSpec> {
    let kernel = need(rec.kernel, rec, "kernel")?;
    Ok(ConvSpec {
        out_channels: need(rec.out_channels, rec, "out_channels")?,
        kernel,
        stride: rec.stride.unwrap_or(1),
        pad: rec.pad.unwrap_or(0),
        output_pad: rec.output_pad.unwrap_or(0),
        transposed,
        relu: rec.relu.unwrap_or(false),
    })
}

fn add_layer(g: &mut NetworkGraph, rec: &LayerRecord, prev: &str) -> Result<String> {
    let inputs: Vec<String> = rec.inputs.clone().unwrap_or_else(|| vec![prev.to_string()]);
    let single = || -> Result<&str> {
        match inputs.as_slice() {
            [one] => Ok(one.as_str()),
            _ => bail!(Config, "layer '{}' ({}) takes exactly one input", rec.name, rec.kind),
        }
    };
    let op = match rec.kind.as_str() {
        "fire" => {
            let cfg = FireConfig {
                name: rec.name.clone(),
                expand1x1: need(rec.expand1x1, rec, "expand1x1")?,
                expand3x3: need(rec.expand3x3, rec, "expand3x3")?,
                squeeze: rec.squeeze,
                compression: None,
            };
            let out = build_fire_module(g, &cfg, single()?)?;
            let label = |g: &mut NetworkGraph, layer: String, row: &Option<String>| {
                if let Some(r) = row {
                    let i = g.layer_index(&layer).expect("built");
                    g.layers[i].row = Some(r.clone());
                }
            };
            label(g, format!("{}/squeeze", rec.name), &rec.row);
            label(g, format!("{}/concat", rec.name), &rec.expand_row);
            return Ok(out);
        }
        "bottleneck" => {
            let cfg = BottleneckConfig {
                name: rec.name.clone(),
                factor: need(rec.factor, rec, "factor")?,
                out_channels: need(rec.out_channels, rec, "out_channels")?,
                stride: rec.stride.unwrap_or(1),
                relu_after_linear: rec.relu.unwrap_or(true),
            };
            let out = build_bottleneck_module(g, &cfg, single()?)?;
            if let Some(r) = &rec.row {
                let i = g.layer_index(&out).expect("built");
                g.layers[i].row = Some(r.clone());
            }
            return Ok(out);
        }
        "conv" => LayerOp::Conv(conv_spec(rec, false)?),
        "deconv" => LayerOp::Conv(conv_spec(rec, true)?),
        "bitconv" => LayerOp::BitConv(conv_spec(rec, false)?),
        "bitdeconv" => LayerOp::BitConv(conv_spec(rec, true)?),
        "relu" => LayerOp::Relu,
        "maxpool" => {
            let window = need(rec.kernel, rec, "kernel")?;
            LayerOp::MaxPool(PoolGeom {
                window,
                stride: rec.stride.unwrap_or(window),
                ceil: rec.ceil.unwrap_or(false),
            })
        }
        "global_avgpool" => LayerOp::GlobalAvgPool,
        "concat" => LayerOp::Concat,
        "fc" => LayerOp::Fc {
            out_features: need(rec.out_features, rec, "out_features")?,
        },
        "quantize" => LayerOp::Quantize {
            bits: need(rec.bits, rec, "bits")?,
            signed: rec.signed.unwrap_or(false),
        },
        "dequantize" => LayerOp::Dequantize {
            source: match &rec.source {
                Some(s) => s.clone(),
                None => bail!(Config, "layer '{}' (dequantize) needs 'source'", rec.name),
            },
        },
        "binarize" => LayerOp::Binarize {
            bits: need(rec.bits, rec, "bits")?,
        },
        "debinarize" => LayerOp::Debinarize {
            bits: need(rec.bits, rec, "bits")?,
        },
        other => bail!(Config, "layer '{}' has unknown kind '{}'", rec.name, other),
    };
    let refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
    let mut spec = LayerSpec::new(rec.name.clone(), op, &refs);
    spec.row = rec.row.clone();
    g.push(spec);
    Ok(rec.name.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"
[network]
input = { name = "data", channels = 1, height = 8, width = 8, bits = 32 }

[[layer]]
name = "conv1"
kind = "conv"
out_channels = 4
kernel = 3
pad = 1
relu = true
row = "conv1"

[[layer]]
name = "f"
kind = "fire"
expand1x1 = 8
expand3x3 = 8

[[layer]]
name = "cls"
kind = "conv"
out_channels = 3
kernel = 1

[[layer]]
name = "gap"
kind = "global_avgpool"

[compression]
targets = ["f/squeeze"]
bits = 4
mode = "1x1"
"#;

    #[test]
    fn parses_and_builds() {
        let c = Config::parse(TINY).unwrap();
        let g = c.build_graph().unwrap();
        assert_eq!(g.output, "gap");
        assert_eq!(g.layers.len(), 7);
        let comp = c.compression_with(Some(2), None).unwrap().unwrap();
        assert_eq!(comp.bits, 2);
        assert_eq!(comp.mode, CompressionMode::Channel1x1);
    }

    #[test]
    fn unknown_field_is_config_error() {
        let bad = TINY.replace("relu = true", "relu = true\nbogus = 1");
        assert!(matches!(Config::parse(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn missing_field_is_config_error() {
        let bad = TINY.replace("kernel = 3\n", "");
        let c = Config::parse(&bad).unwrap();
        assert!(matches!(c.build_graph(), Err(Error::Config(_))));
    }

    #[test]
    fn bad_geometry_is_graph_error() {
        let bad = TINY.replace("out_channels = 4\nkernel = 3", "out_channels = 4\nkernel = 30");
        let c = Config::parse(&bad).unwrap();
        assert!(c.build_graph().is_err());
    }
}
