use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, Result};
use crate::nn::graph::{ConvSpec, GraphInfo, LayerOp, NetworkGraph};
use crate::quant::QuantParams;
use crate::tensor::{Scalar, Shape, Tensor};

/// Weight tensor and bias of one parameterised layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn zeros(weight: Shape, bias: usize) -> Self {
        Self {
            weight: Tensor::zeros(weight),
            bias: vec![T::ZERO; bias],
        }
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        LayerParams {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|&b| U::from_f64(b.to_f64())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub type ParamStore<T> = BTreeMap<String, LayerParams<T>>;

pub fn cast_store<T: Scalar, U: Scalar>(s: &ParamStore<T>) -> ParamStore<U> {
    s.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
}

/// A graph together with its learned state.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub graph: NetworkGraph,
    pub params: ParamStore<f32>,
    /// Keyed by quantize layer name.
    pub quant: BTreeMap<String, QuantParams>,
    /// Keyed by binarize layer name; missing entries mean 1.
    pub grad_norms: BTreeMap<String, f64>,
    pub iteration: u64,
}

impl Model {
    /// Random initialisation: He-normal for ordinary layers, identity or
    /// delta kernels for GF(2) projection layers.
    pub fn init(graph: NetworkGraph, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let shapes = graph.param_shapes()?;
        for (name, wshape, nbias) in shapes {
            let li = graph.layer_index(&name).expect("layer exists");
            let p = match &graph.layers[li].op {
                LayerOp::BitConv(spec) => bitconv_init(spec, wshape, &mut rng),
                _ => he_init(wshape, nbias, &mut rng),
            };
            params.insert(name, p);
        }
        Ok(Self {
            graph,
            params,
            quant: BTreeMap::new(),
            grad_norms: BTreeMap::new(),
            iteration: 0,
        })
    }

    /// Fresh model for `graph` that reuses every parameter of `from` whose
    /// layer name survives; layers new to `graph` get their default init.
    pub fn with_graph(graph: NetworkGraph, from: &ParamStore<f32>, seed: u64) -> Result<Self> {
        let mut m = Self::init(graph, seed)?;
        for (name, p) in m.params.iter_mut() {
            if let Some(src) = from.get(name) {
                if src.weight.shape() != p.weight.shape() || src.bias.len() != p.bias.len() {
                    bail!(Graph, "layer '{}' changed shape from {} to {}", name, src.weight.shape(), p.weight.shape());
                }
                *p = src.clone();
            }
        }
        Ok(m)
    }

    pub fn info(&self) -> Result<GraphInfo> {
        self.graph.validate()
    }

    /// Checks that every parameterised layer has correctly shaped parameters.
    pub fn check_params(&self) -> Result<()> {
        let shapes = self.graph.param_shapes()?;
        for (name, wshape, nbias) in &shapes {
            let Some(p) = self.params.get(name) else {
                bail!(Checkpoint, "missing parameters for layer '{}'", name);
            };
            if p.weight.shape() != *wshape || p.bias.len() != *nbias {
                bail!(
                    Checkpoint,
                    "layer '{}' expects weight {} and {} biases, found {} and {}",
                    name,
                    wshape,
                    nbias,
                    p.weight.shape(),
                    p.bias.len()
                );
            }
        }
        if self.params.len() != shapes.len() {
            bail!(Checkpoint, "parameter set has {} entries, graph has {} parameterised layers", self.params.len(), shapes.len());
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(LayerParams::len).sum()
    }
}

fn he_init(wshape: Shape, nbias: usize, rng: &mut ChaCha8Rng) -> LayerParams<f32> {
    let fan_in = wshape.sample_len() as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
    let data = (0..wshape.numel()).map(|_| normal.sample(rng) as f32).collect();
    LayerParams {
        weight: Tensor::from_vec(wshape, data).expect("sized"),
        bias: vec![0.0; nbias],
    }
}

/// Identity (1×1) or stride-aligned delta kernels; spatial kernels also get
/// uniform noise small enough that binary inputs still threshold exactly.
pub fn bitconv_init(spec: &ConvSpec, wshape: Shape, rng: &mut ChaCha8Rng) -> LayerParams<f32> {
    let mut p = LayerParams::<f32>::zeros(wshape, wshape.n);
    if spec.kernel > 1 {
        let amp = 0.25 / wshape.sample_len() as f64;
        for w in p.weight.data_mut() {
            *w = rng.random_range(-amp..amp) as f32;
        }
    }
    let tap = spec.pad;
    for j in 0..wshape.n.min(wshape.c) {
        p.weight.set(j, j, tap, tap, 1.0);
    }
    p
}
