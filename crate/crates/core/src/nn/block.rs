//! Stand-alone compression block over GF(2) bit-planes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::gf2::{pack_planes, unpack_bits, BitTensor};
use crate::nn::exec::{bit_activation, ExecMode};
use crate::nn::layers::{conv_apply, ConvParams};
use crate::nn::model::bitconv_init;
use crate::nn::transform::CompressionMode;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CompressionBlock {
    pub bits: u8,
    pub base_channels: usize,
    pub compressed_channels: usize,
    pub mode: CompressionMode,
    pub p_layers: Vec<ConvParams<f32>>,
    pub r_layers: Vec<ConvParams<f32>>,
    pub grad_norm: f64,
}

impl CompressionBlock {
    /// Block with zero weights.
    pub fn new(bits: u8, base_channels: usize, compressed_channels: usize, mode: CompressionMode) -> Result<Self> {
        let bc = bits as usize * base_channels;
        if bits == 0 || bits > 8 || base_channels == 0 {
            bail!(InvalidArgument, "block needs 1..=8 bits and at least one channel");
        }
        if compressed_channels == 0 || compressed_channels > bc {
            bail!(InvalidArgument, "compressed channels {} outside 1..={}", compressed_channels, bc);
        }
        let Some((p, r)) = mode.layer_specs(bc, compressed_channels) else {
            bail!(InvalidArgument, "a compression block needs a projection mode");
        };
        let make = |spec: &crate::nn::graph::ConvSpec, cin: usize| {
            ConvParams::new(
                Tensor::zeros(Shape::new(spec.out_channels, cin, spec.kernel, spec.kernel)),
                vec![0.0; spec.out_channels],
                spec.geom(),
            )
        };
        Ok(Self {
            bits,
            base_channels,
            compressed_channels,
            mode,
            p_layers: vec![make(&p, bc)?],
            r_layers: vec![make(&r, compressed_channels)?],
            grad_norm: 1.0,
        })
    }

    pub fn logical_channels(&self) -> usize {
        self.bits as usize * self.base_channels
    }

    /// Stride-aligned delta kernels plus small noise (spatial modes).
    pub fn delta_init(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bc = self.logical_channels();
        let (p, r) = self.mode.layer_specs(bc, self.compressed_channels).expect("projection mode");
        self.p_layers[0].weight = bitconv_init(&p, self.p_layers[0].weight.shape(), &mut rng).weight;
        self.r_layers[0].weight = bitconv_init(&r, self.r_layers[0].weight.shape(), &mut rng).weight;
        self
    }
}

/// Truncated-identity projection and its transpose (channel 1×1 mode only).
pub fn identity_init(block: &CompressionBlock) -> Result<CompressionBlock> {
    if block.mode != CompressionMode::Channel1x1 {
        bail!(InvalidArgument, "identity initialisation needs 1x1 mode, got {}", block.mode);
    }
    let mut b = block.clone();
    for layer in b.p_layers.iter_mut().chain(b.r_layers.iter_mut()) {
        let s = layer.weight.shape();
        layer.weight = Tensor::zeros(s);
        for j in 0..s.n.min(s.c) {
            layer.weight.set(j, j, 0, 0, 1.0);
        }
        layer.bias.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(b)
}

fn bit_layer(x: &Tensor<f32>, p: &ConvParams<f32>) -> Result<Tensor<f32>> {
    let z = conv_apply(x, &p.geom, &p.weight, &p.bias, false)?;
    Ok(z.map(|v| bit_activation(v, ExecMode::Quantized)))
}

/// Runs the projection half, keeps only the stored map, then reconstructs.
pub fn compress_block_forward(x: &BitTensor, block: &CompressionBlock) -> Result<(BitTensor, BitTensor)> {
    if x.bits() != block.bits || x.base_channels() != block.base_channels {
        bail!(
            ShapeMismatch,
            "bit tensor has {} planes × {} channels, block expects {} × {}",
            x.bits(),
            x.base_channels(),
            block.bits,
            block.base_channels
        );
    }
    let mut cur: Tensor<f32> = unpack_bits(x);
    for p in &block.p_layers {
        cur = bit_layer(&cur, p)?;
    }
    let stored = pack_planes(&cur, 1)?;
    let mut cur: Tensor<f32> = unpack_bits(&stored);
    for r in &block.r_layers {
        cur = bit_layer(&cur, r)?;
    }
    if cur.shape() != x.logical_shape() {
        bail!(ShapeMismatch, "reconstruction {} does not restore {}", cur.shape(), x.logical_shape());
    }
    let recon = pack_planes(&cur, block.bits)?;
    Ok((stored, recon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gf2::binarize;
    use rand::Rng;

    fn random_bits(seed: u64, c: usize, h: usize, bits: u8) -> BitTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape::new(1, c, h, h);
        let codes = Tensor::from_vec(s, (0..s.numel()).map(|_| rng.random_range(0..1 << bits)).collect()).unwrap();
        binarize(&codes, bits).unwrap()
    }

    #[test]
    fn ratio_one_identity() {
        let b = identity_init(&CompressionBlock::new(4, 3, 12, CompressionMode::Channel1x1).unwrap()).unwrap();
        for seed in 0..20 {
            let x = random_bits(seed, 3, 5, 4);
            let (stored, recon) = compress_block_forward(&x, &b).unwrap();
            assert_eq!(recon, x);
            assert_eq!(stored.payload(), x.payload());
        }
    }

    #[test]
    fn truncation_zeroes_top_channels() {
        let b = identity_init(&CompressionBlock::new(4, 3, 11, CompressionMode::Channel1x1).unwrap()).unwrap();
        let x = random_bits(3, 3, 4, 4);
        let (_, recon) = compress_block_forward(&x, &b).unwrap();
        let mut want = x.clone();
        for y in 0..4 {
            for xx in 0..4 {
                want.set(0, 11, y, xx, false);
            }
        }
        assert_eq!(recon, want);
    }

    #[test]
    fn zero_input_zero_output() {
        let b = identity_init(&CompressionBlock::new(2, 2, 3, CompressionMode::Channel1x1).unwrap()).unwrap();
        let x = BitTensor::zeros(1, 2, 3, 3, 2).unwrap();
        let (stored, recon) = compress_block_forward(&x, &b).unwrap();
        assert_eq!(stored.count_ones(), 0);
        assert_eq!(recon.count_ones(), 0);
    }

    #[test]
    fn spatial_identity_rejected() {
        let b = CompressionBlock::new(4, 2, 8, CompressionMode::Conv3x3s2).unwrap();
        assert!(identity_init(&b).is_err());
    }

    #[test]
    fn delta_init_reconstructs_subsampled_grid() {
        for mode in [CompressionMode::Conv2x2s2, CompressionMode::Conv3x3s2] {
            let b = CompressionBlock::new(2, 1, 2, mode).unwrap().delta_init(5);
            let x = random_bits(9, 1, 4, 2);
            let (stored, recon) = compress_block_forward(&x, &b).unwrap();
            assert_eq!(stored.logical_shape(), Shape::new(1, 2, 2, 2));
            for lc in 0..2 {
                for y in 0..4 {
                    for xx in 0..4 {
                        let want = y % 2 == 0 && xx % 2 == 0 && x.get(0, lc, y, xx);
                        assert_eq!(recon.get(0, lc, y, xx), want, "{mode} {lc} {y} {xx}");
                    }
                }
            }
        }
    }
}
