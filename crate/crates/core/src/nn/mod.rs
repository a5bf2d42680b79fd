//! Layers, graphs, execution and architecture builders.

pub mod block;
pub mod build;
pub mod exec;
pub mod fusion;
pub mod graph;
pub mod layers;
pub mod model;
pub mod transform;

pub use block::{compress_block_forward, identity_init, CompressionBlock};
pub use build::{build_bottleneck_module, build_fire_module, toy_fire_net, toy_fusion_plan, BottleneckConfig, FireConfig};
pub use exec::{Activations, ExecMode, Executor, Gradients};
pub use fusion::{analyze, fused_execute, EdgeClass, FusedOutput, FusionGroup, FusionPlan, MemoryTrace, StepPlan, StepUsage};
pub use graph::{ConvSpec, EdgeType, GraphInfo, InputSpec, LayerOp, LayerSpec, NetworkGraph};
pub use layers::*;
pub use model::{LayerParams, Model, ParamStore};
pub use transform::{insert_compression, CompressionConfig, CompressionMode, InsertedBlock};
