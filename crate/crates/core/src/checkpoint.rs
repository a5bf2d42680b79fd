//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GF2C" | version u8 | 3 reserved | graph hash [32] | iteration u64
//! n_params u32, then per layer (name order):
//!     name | weight n,c,h,w u32 ×4 | weights f32… | n_bias u32 | biases f32…
//! n_quant u32, then per quantizer: name | bits u8 | signed u8 | scale f64
//! n_norms u32, then per binarizer: name | norm f64
//! ```
//!
//! Names are a `u16` length followed by UTF-8 bytes. The graph itself is not
//! stored; loading checks the hash against the graph the caller built.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::nn::graph::NetworkGraph;
use crate::nn::model::{LayerParams, Model, ParamStore};
use crate::quant::QuantParams;
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GF2C";
pub const CHECKPOINT_VERSION: u8 = 1;

fn put_name(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn save_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&[CHECKPOINT_VERSION, 0, 0, 0]);
    out.extend_from_slice(&model.graph.hash());
    out.extend_from_slice(&model.iteration.to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, p) in &model.params {
        put_name(&mut out, name);
        let s = p.weight.shape();
        for d in [s.n, s.c, s.h, s.w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.weight.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(p.bias.len() as u32).to_le_bytes());
        for v in &p.bias {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(model.quant.len() as u32).to_le_bytes());
    for (name, q) in &model.quant {
        put_name(&mut out, name);
        out.push(q.bits);
        out.push(q.signed as u8);
        out.extend_from_slice(&q.scale.to_le_bytes());
    }
    out.extend_from_slice(&(model.grad_norms.len() as u32).to_le_bytes());
    for (name, n) in &model.grad_norms {
        put_name(&mut out, name);
        out.extend_from_slice(&n.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("checkpoint truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n.saturating_mul(4), what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn name(&mut self) -> Result<String> {
        let at = self.pos;
        let len = u16::from_le_bytes(self.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let raw = self.take(len, "name")?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: at as u64,
            msg: "name is not UTF-8".into(),
        })
    }
}

/// Parses a checkpoint and attaches it to `graph`. The stored graph hash
/// must match and every parameter shape must agree with the graph.
pub fn load_checkpoint(bytes: &[u8], graph: &NetworkGraph) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = r.u8("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    r.take(3, "reserved bytes")?;
    let stored_hash = r.take(32, "graph hash")?;
    if stored_hash != graph.hash() {
        bail!(
            Checkpoint,
            "checkpoint was written for a different graph (check --bits/--mode and the config)"
        );
    }
    let iteration = r.u64("iteration")?;

    let mut params = ParamStore::new();
    for _ in 0..r.u32("parameter count")? {
        let name = r.name()?;
        let mut d = [0usize; 4];
        for v in &mut d {
            *v = r.u32("weight shape")? as usize;
        }
        let shape = Shape::new(d[0], d[1], d[2], d[3]);
        let weight = Tensor::from_vec(shape, r.f32s(shape.numel(), "weights")?)?;
        let nb = r.u32("bias count")? as usize;
        let bias = r.f32s(nb, "biases")?;
        params.insert(name, LayerParams { weight, bias });
    }
    let mut quant = BTreeMap::new();
    for _ in 0..r.u32("quantizer count")? {
        let name = r.name()?;
        let bits = r.u8("bits")?;
        let signed = r.u8("signedness")? != 0;
        let scale = r.f64("scale")?;
        quant.insert(name, QuantParams::new(bits, scale, signed)?);
    }
    let mut grad_norms = BTreeMap::new();
    for _ in 0..r.u32("norm count")? {
        let name = r.name()?;
        grad_norms.insert(name, r.f64("norm")?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: "trailing bytes after checkpoint".into(),
        });
    }
    let model = Model {
        graph: graph.clone(),
        params,
        quant,
        grad_norms,
        iteration,
    };
    model.check_params()?;
    Ok(model)
}

pub fn write_checkpoint(path: &Path, model: &Model) -> Result<()> {
    std::fs::write(path, save_checkpoint(model)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path, graph: &NetworkGraph) -> Result<Model> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {}", path.display(), e)))?;
    load_checkpoint(&bytes, graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build::toy_fire_net;

    fn model() -> Model {
        let mut m = Model::init(toy_fire_net(10, 16), 4).unwrap();
        m.iteration = 17;
        m.quant.insert("x/q".into(), QuantParams::new(4, 0.25, false).unwrap());
        m.grad_norms.insert("x/b".into(), 1.5);
        m
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = model();
        let a = save_checkpoint(&m).unwrap();
        let back = load_checkpoint(&a, &m.graph).unwrap();
        assert_eq!(back, m);
        assert_eq!(save_checkpoint(&back).unwrap(), a);
    }

    #[test]
    fn other_graph_is_rejected() {
        let m = model();
        let a = save_checkpoint(&m).unwrap();
        let other = toy_fire_net(5, 16);
        assert!(matches!(load_checkpoint(&a, &other), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncation_reports_offset() {
        let m = model();
        let a = save_checkpoint(&m).unwrap();
        match load_checkpoint(&a[..a.len() - 3], &m.graph) {
            Err(Error::Format { offset, .. }) => assert!(offset > 40),
            other => panic!("{other:?}"),
        }
        assert!(matches!(load_checkpoint(b"NOPE", &m.graph), Err(Error::Format { offset: 0, .. })));
    }
}
