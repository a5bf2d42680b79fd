//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use std::path::PathBuf;

use gf2cnn::config::Config;
use gf2cnn::nn::{ConvGeom, ConvParams, PoolGeom};
use gf2cnn::tensor::{Real, Scalar};
use gf2cnn::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn config(name: &str) -> Config {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.toml"));
    Config::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, s: Shape, lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_vec(s, (0..s.numel()).map(|_| T::from_f64(rng.random_range(lo..hi))).collect()).unwrap()
}

/// Plain shift-and-mask code recombination: bit `k` of base channel `c`
/// lives at logical channel `c·B + k`.
pub fn code_from_planes(planes: &[bool], bits: usize, c: usize) -> i32 {
    (0..bits).map(|k| (planes[c * bits + k] as i32) << k).sum()
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Worst relative error of a set of (analytic, numeric) pairs.
pub fn worst(pairs: &[(f64, f64)], floor: f64) -> f64 {
    pairs.iter().map(|&(a, n)| rel_err(a, n, floor)).fold(0.0, f64::max)
}

/// `L = Σ r·y`, accumulated in double precision.
pub fn project<T: Scalar>(y: &Tensor<T>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a.to_f64() * b).sum()
}

/// Central difference of `loss` with respect to `v[i]`, using the step that
/// actually lands after rounding to `T`.
pub fn central<T: Real>(v: &mut [T], i: usize, h: f64, mut loss: impl FnMut(&[T]) -> f64) -> f64 {
    let orig = v[i];
    let up = orig + T::from_f64(h);
    let down = orig - T::from_f64(h);
    v[i] = up;
    let lp = loss(v);
    v[i] = down;
    let lm = loss(v);
    v[i] = orig;
    (lp - lm) / (up.to_f64() - down.to_f64())
}

/// Picks up to `k` coordinates out of `n`, deterministically.
pub fn sample_coords(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut v: Vec<usize> = (0..k).map(|_| rng.random_range(0..n)).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Six-loop direct convolution in f64, independent of the library kernels.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], g: &ConvGeom) -> Tensor<f64> {
    assert!(!g.transposed);
    let (xs, ws) = (x.shape(), w.shape());
    let oh = (xs.h + 2 * g.pad - g.kernel) / g.stride + 1;
    let ow = (xs.w + 2 * g.pad - g.kernel) / g.stride + 1;
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
    for n in 0..xs.n {
        for o in 0..ws.n {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[o];
                    for c in 0..xs.c {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (y * g.stride + ky) as isize - g.pad as isize;
                                let ix = (xx * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                                    acc += w.at(o, c, ky, kx) * x.at(n, c, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.set(n, o, y, xx, acc);
                }
            }
        }
    }
    out
}

/// Window maximum by brute force, first maximum wins on ties.
pub fn naive_maxpool(x: &Tensor<f64>, g: &PoolGeom) -> Tensor<f64> {
    let xs = x.shape();
    let oh = (xs.h - g.window) / g.stride + 1;
    let ow = (xs.w - g.window) / g.stride + 1;
    let mut out = Tensor::zeros(Shape::new(xs.n, xs.c, oh, ow));
    for n in 0..xs.n {
        for c in 0..xs.c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..g.window {
                        for dx in 0..g.window {
                            m = m.max(x.at(n, c, y * g.stride + dy, xx * g.stride + dx));
                        }
                    }
                    out.set(n, c, y, xx, m);
                }
            }
        }
    }
    out
}

pub fn random_conv<T: Scalar>(rng: &mut ChaCha8Rng, cout: usize, cin: usize, geom: ConvGeom) -> ConvParams<T> {
    let w = uniform(rng, Shape::new(cout, cin, geom.kernel, geom.kernel), -0.5, 0.5);
    let b = (0..cout).map(|_| T::from_f64(rng.random_range(-0.5..0.5))).collect();
    ConvParams::new(w, b, geom).unwrap()
}
