//! Uniform fixed-point activation quantization.
//!
//! A real activation `x` maps to the integer code `clamp(round(x / Δ))`,
//! rounding half away from zero, and back to `code · Δ`. Unsigned codes live
//! in `0..=2^B-1`, signed codes in `-2^(B-1)..=2^(B-1)-1`. The scale is one
//! scalar per tensor, chosen by absolute-max calibration.
//!
//! The backward pass is the clipped straight-through estimator: the gradient
//! of `dequantize(quantize(x))` is taken as 1 where `x` lies in the
//! representable interval `[lo·Δ, hi·Δ]` and 0 where the forward saturated.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::{Real, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u8,
    pub scale: f64,
    pub signed: bool,
}

impl QuantParams {
    pub fn new(bits: u8, scale: f64, signed: bool) -> Result<Self> {
        let p = Self {
            bits,
            scale,
            signed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.bits) {
            bail!(InvalidArgument, "bit-width {} outside 1..=16", self.bits);
        }
        if self.signed && self.bits < 2 {
            bail!(InvalidArgument, "signed codes need at least 2 bits");
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            bail!(InvalidArgument, "scale must be positive and finite, got {}", self.scale);
        }
        Ok(())
    }

    /// Inclusive code domain.
    pub fn code_range(&self) -> (i32, i32) {
        if self.signed {
            let half = 1i32 << (self.bits - 1);
            (-half, half - 1)
        } else {
            (0, (1i32 << self.bits) - 1)
        }
    }

    /// Largest code magnitude used by calibration (`2^B-1` or `2^(B-1)-1`).
    pub fn calibration_levels(bits: u8, signed: bool) -> f64 {
        if signed {
            ((1u32 << (bits - 1)) - 1) as f64
        } else {
            ((1u32 << bits) - 1) as f64
        }
    }

    /// Inclusive real interval that quantizes without saturation.
    pub fn representable(&self) -> (f64, f64) {
        let (lo, hi) = self.code_range();
        (lo as f64 * self.scale, hi as f64 * self.scale)
    }

    #[inline]
    pub fn quantize_value(&self, x: f64) -> i32 {
        let (lo, hi) = self.code_range();
        let r = (x / self.scale).round();
        if r.is_nan() {
            return 0;
        }
        r.clamp(lo as f64, hi as f64) as i32
    }

    #[inline]
    pub fn dequantize_value(&self, code: i32) -> f64 {
        code as f64 * self.scale
    }

    /// Real-valued code without rounding; the differentiable stand-in used by
    /// the gradient checker.
    #[inline]
    pub fn passthrough_value(&self, x: f64) -> f64 {
        let (lo, hi) = self.code_range();
        (x / self.scale).clamp(lo as f64, hi as f64)
    }

    #[inline]
    pub fn in_range(&self, x: f64) -> bool {
        let (lo, hi) = self.representable();
        x >= lo && x <= hi
    }
}

/// Streaming absolute-max calibration.
#[derive(Clone, Debug, Default)]
pub struct Calibrator {
    max_abs: f64,
    seen: usize,
}

impl Calibrator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe<T: Scalar>(&mut self, x: &Tensor<T>) {
        for &v in x.data() {
            let a = v.to_f64().abs();
            if a > self.max_abs {
                self.max_abs = a;
            }
        }
        self.seen += 1;
    }

    pub fn max_abs(&self) -> f64 {
        self.max_abs
    }

    pub fn finish(&self, bits: u8, signed: bool) -> Result<QuantParams> {
        if self.seen == 0 {
            bail!(Degenerate, "calibration stream is empty");
        }
        if !(self.max_abs.is_finite() && self.max_abs > 0.0) {
            bail!(Degenerate, "calibration stream has no nonzero finite element");
        }
        if !(1..=16).contains(&bits) || (signed && bits < 2) {
            bail!(InvalidArgument, "unsupported bit-width {}", bits);
        }
        QuantParams::new(bits, self.max_abs / QuantParams::calibration_levels(bits, signed), signed)
    }
}

/// Absolute-max calibration over a stream of tensors.
pub fn calibrate<'a, T, I>(samples: I, bits: u8, signed: bool) -> Result<QuantParams>
where
    T: Scalar,
    I: IntoIterator<Item = &'a Tensor<T>>,
{
    let mut cal = Calibrator::new();
    for s in samples {
        cal.observe(s);
    }
    cal.finish(bits, signed)
}

pub fn quantize<T: Scalar>(x: &Tensor<T>, p: &QuantParams) -> Tensor<i32> {
    x.map(|v| p.quantize_value(v.to_f64()))
}

pub fn dequantize<T: Scalar>(codes: &Tensor<i32>, p: &QuantParams) -> Result<Tensor<T>> {
    let (lo, hi) = p.code_range();
    if let Some(bad) = codes.data().iter().find(|&&c| c < lo || c > hi) {
        bail!(OutOfRange, "code {} outside [{}, {}]", bad, lo, hi);
    }
    Ok(codes.map(|c| T::from_f64(p.dequantize_value(c))))
}

/// Clipped straight-through gradient of `dequantize ∘ quantize`.
pub fn quantize_backward<T: Real>(
    upstream: &Tensor<T>,
    x: &Tensor<T>,
    p: &QuantParams,
) -> Result<Tensor<T>> {
    if upstream.shape() != x.shape() {
        bail!(ShapeMismatch, "upstream {} vs input {}", upstream.shape(), x.shape());
    }
    let data = upstream
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if p.in_range(v.to_f64()) { g } else { T::ZERO })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use proptest::prelude::*;

    fn t(v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, 1, 1, v.len()), v).unwrap()
    }

    #[test]
    fn calibration_rule() {
        let p = calibrate([&t(vec![-3.0, 15.0, 2.0])], 4, false).unwrap();
        assert_eq!(p.scale, 1.0);
        let p = calibrate([&t(vec![1.0, 0.5])], 8, false).unwrap();
        assert_eq!(p.scale, 1.0 / 255.0);
        let p = calibrate([&t(vec![-127.0])], 8, true).unwrap();
        assert_eq!(p.scale, 1.0);
    }

    #[test]
    fn all_zero_calibration_fails() {
        let z = t(vec![0.0; 4]);
        assert!(matches!(
            calibrate([&z, &z], 8, false),
            Err(crate::Error::Degenerate(_))
        ));
        assert!(calibrate(std::iter::empty::<&Tensor<f64>>(), 8, false).is_err());
    }

    #[test]
    fn quantize_examples() {
        let p = QuantParams::new(2, 0.25, false).unwrap();
        assert_eq!(p.quantize_value(0.6), 2);
        assert_eq!(p.quantize_value(0.0), 0);
        let p = QuantParams::new(4, 1.0, false).unwrap();
        assert_eq!(p.quantize_value(99.0), 15);
        assert_eq!(p.quantize_value(-3.0), 0);
        // ties go away from zero
        assert_eq!(p.quantize_value(2.5), 3);
        let s = QuantParams::new(4, 1.0, true).unwrap();
        assert_eq!(s.quantize_value(-2.5), -3);
        assert_eq!(s.quantize_value(-100.0), -8);
    }

    #[test]
    fn dequantize_examples() {
        let p = QuantParams::new(4, 1.0, false).unwrap();
        let codes = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0, 15]).unwrap();
        let x: Tensor<f64> = dequantize(&codes, &p).unwrap();
        assert_eq!(x.data(), &[0.0, 15.0]);
        let bad = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![16]).unwrap();
        assert!(dequantize::<f64>(&bad, &p).is_err());
    }

    #[test]
    fn requantizing_codes_is_identity_exhaustive() {
        for bits in 1..=8u8 {
            for signed in [false, true] {
                if signed && bits < 2 {
                    continue;
                }
                let p = QuantParams::new(bits, 0.037, signed).unwrap();
                let (lo, hi) = p.code_range();
                let codes: Vec<i32> = (lo..=hi).collect();
                let ct = Tensor::from_vec(Shape::new(1, 1, 1, codes.len()), codes).unwrap();
                let x: Tensor<f64> = dequantize(&ct, &p).unwrap();
                assert_eq!(quantize(&x, &p), ct, "bits {bits} signed {signed}");
            }
        }
    }

    #[test]
    fn backward_masks_saturation() {
        let p = QuantParams::new(4, 1.0, false).unwrap();
        let x = t(vec![3.0, 20.0, -1.0, 15.0]);
        let g = t(vec![0.5, 0.5, 0.5, 0.5]);
        let out = quantize_backward(&g, &x, &p).unwrap();
        assert_eq!(out.data(), &[0.5, 0.0, 0.0, 0.5]);
    }

    proptest! {
        #[test]
        fn roundtrip_error_bounded(x in 0.0f64..15.0, scale in 0.01f64..2.0) {
            let p = QuantParams::new(8, scale, false).unwrap();
            let (_, hi) = p.representable();
            let x = x.min(hi);
            let back = p.dequantize_value(p.quantize_value(x));
            prop_assert!((back - x).abs() <= scale / 2.0 + 1e-12);
        }

        #[test]
        fn monotone(a in -50.0f64..50.0, b in -50.0f64..50.0, signed in any::<bool>()) {
            let p = QuantParams::new(5, 0.7, signed).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(p.quantize_value(lo) <= p.quantize_value(hi));
        }

        #[test]
        fn codes_stay_in_domain(xs in proptest::collection::vec(-1e3f64..1e3, 1..64), bits in 2u8..=12, signed in any::<bool>()) {
            let p = QuantParams::new(bits, 0.5, signed).unwrap();
            let (lo, hi) = p.code_range();
            let codes = quantize(&t(xs), &p);
            prop_assert!(codes.data().iter().all(|&c| c >= lo && c <= hi));
        }
    }
}
