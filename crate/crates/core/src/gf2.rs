//! Bit-plane representation of fixed-point codes over GF(2).
//!
//! A `B`-bit code tensor with `C` channels becomes a binary tensor with `B·C`
//! logical channels. Logical channel `c·B + k` holds bit `k` (weight `2^k`)
//! of base channel `c`, so the bits of one base channel are contiguous.
//!
//! Storage packs one logical element per bit, LSB-first within each byte, in
//! row-major logical order. The on-disk blob is a 24-byte header followed by
//! the payload:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "GF2T"
//! 4       1     format version (1)
//! 5       1     bits per code B (1..=8)
//! 6       2     reserved, zero
//! 8       4     N  (u32 little-endian)
//! 12      4     C  base channels (u32 little-endian)
//! 16      4     H  (u32 little-endian)
//! 20      4     W  (u32 little-endian)
//! 24      ...   ceil(N·B·C·H·W / 8) payload bytes, unused high bits zero
//! ```

use std::io::{Read, Write};

use crate::error::{bail, Error, Result};
use crate::tensor::{Real, Scalar, Shape, Tensor};

pub const BLOB_MAGIC: &[u8; 4] = b"GF2T";
pub const BLOB_VERSION: u8 = 1;
pub const BLOB_HEADER_LEN: usize = 24;

/// The basis `[2^0, 2^1, ..., 2^(B-1)]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitBasis(Vec<u32>);

impl BitBasis {
    pub fn new(bits: u8) -> Result<Self> {
        check_bits(bits)?;
        Ok(Self((0..bits).map(|k| 1u32 << k).collect()))
    }

    pub fn weights(&self) -> &[u32] {
        &self.0
    }

    /// `bᵀx̃`: the code whose bit-planes are `bits`.
    pub fn combine(&self, bits: &[bool]) -> u32 {
        self.0
            .iter()
            .zip(bits)
            .filter(|(_, &b)| b)
            .map(|(w, _)| w)
            .sum()
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if !(1..=8).contains(&bits) {
        bail!(InvalidArgument, "bit-plane count {} outside 1..=8", bits);
    }
    Ok(())
}

/// Bit-packed binary tensor with logical shape `(N, B·C, H, W)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensor {
    n: usize,
    base_c: usize,
    h: usize,
    w: usize,
    bits: u8,
    payload: Vec<u8>,
}

impl BitTensor {
    pub fn zeros(n: usize, base_c: usize, h: usize, w: usize, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        let numel = n * base_c * bits as usize * h * w;
        Ok(Self {
            n,
            base_c,
            h,
            w,
            bits,
            payload: vec![0; numel.div_ceil(8)],
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn base_channels(&self) -> usize {
        self.base_c
    }

    pub fn logical_shape(&self) -> Shape {
        Shape::new(self.n, self.base_c * self.bits as usize, self.h, self.w)
    }

    /// Shape of the code tensor this represents.
    pub fn code_shape(&self) -> Shape {
        Shape::new(self.n, self.base_c, self.h, self.w)
    }

    pub fn numel(&self) -> usize {
        self.logical_shape().numel()
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    #[inline]
    fn index(&self, n: usize, lc: usize, y: usize, x: usize) -> usize {
        let lcs = self.base_c * self.bits as usize;
        ((n * lcs + lc) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get_flat(&self, i: usize) -> bool {
        (self.payload[i >> 3] >> (i & 7)) & 1 == 1
    }

    #[inline]
    pub fn set_flat(&mut self, i: usize, v: bool) {
        let mask = 1u8 << (i & 7);
        if v {
            self.payload[i >> 3] |= mask;
        } else {
            self.payload[i >> 3] &= !mask;
        }
    }

    #[inline]
    pub fn get(&self, n: usize, lc: usize, y: usize, x: usize) -> bool {
        self.get_flat(self.index(n, lc, y, x))
    }

    #[inline]
    pub fn set(&mut self, n: usize, lc: usize, y: usize, x: usize, v: bool) {
        let i = self.index(n, lc, y, x);
        self.set_flat(i, v)
    }

    pub fn count_ones(&self) -> u64 {
        self.payload.iter().map(|b| b.count_ones() as u64).sum()
    }

    /// Serializes header and payload.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(BLOB_HEADER_LEN + self.payload.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut header = [0u8; BLOB_HEADER_LEN];
        header[..4].copy_from_slice(BLOB_MAGIC);
        header[4] = BLOB_VERSION;
        header[5] = self.bits;
        for (i, d) in [self.n, self.base_c, self.h, self.w].into_iter().enumerate() {
            let d = u32::try_from(d)
                .map_err(|_| Error::OutOfRange(format!("dimension {d} exceeds u32")))?;
            header[8 + 4 * i..12 + 4 * i].copy_from_slice(&d.to_le_bytes());
        }
        w.write_all(&header)?;
        w.write_all(&self.payload)?;
        Ok(())
    }

    pub fn from_blob(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let t = Self::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Format {
                offset: (bytes.len() - cursor.len()) as u64,
                msg: format!("{} trailing bytes after payload", cursor.len()),
            });
        }
        Ok(t)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut header = [0u8; BLOB_HEADER_LEN];
        read_exact_at(r, &mut header, 0)?;
        if &header[..4] != BLOB_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, expected GF2T".into(),
            });
        }
        if header[4] != BLOB_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {}", header[4]),
            });
        }
        let bits = header[5];
        if !(1..=8).contains(&bits) {
            return Err(Error::Format {
                offset: 5,
                msg: format!("bits {} outside 1..=8", bits),
            });
        }
        if header[6] != 0 || header[7] != 0 {
            return Err(Error::Format {
                offset: 6,
                msg: "reserved bytes must be zero".into(),
            });
        }
        let dim = |i: usize| u32::from_le_bytes(header[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        let mut t = Self::zeros(dim(0), dim(1), dim(2), dim(3), bits)?;
        read_exact_at(r, &mut t.payload, BLOB_HEADER_LEN as u64)?;
        let used = t.numel() % 8;
        if used != 0 {
            let last = *t.payload.last().expect("non-empty when bits remain");
            if last >> used != 0 {
                return Err(Error::Format {
                    offset: (BLOB_HEADER_LEN + t.payload.len() - 1) as u64,
                    msg: "padding bits must be zero".into(),
                });
            }
        }
        Ok(t)
    }
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: u64) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::Format {
                    offset: offset + filled as u64,
                    msg: format!("truncated: needed {} more bytes", buf.len() - filled),
                })
            }
            Ok(k) => filled += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

/// Packs a `{0,1}` tensor as a single-plane bit tensor.
pub fn pack_bits<T: Scalar>(logical: &Tensor<T>) -> Result<BitTensor> {
    pack_planes(logical, 1)
}

/// Packs a `{0,1}` tensor whose channels are grouped into `bits` planes.
pub fn pack_planes<T: Scalar>(logical: &Tensor<T>, bits: u8) -> Result<BitTensor> {
    check_bits(bits)?;
    let s = logical.shape();
    if !s.c.is_multiple_of(bits as usize) {
        bail!(ShapeMismatch, "{} logical channels not divisible by {} planes", s.c, bits);
    }
    let mut out = BitTensor::zeros(s.n, s.c / bits as usize, s.h, s.w, bits)?;
    for (i, &v) in logical.data().iter().enumerate() {
        if v == T::ONE {
            out.set_flat(i, true);
        } else if v != T::ZERO {
            bail!(OutOfRange, "element {} is {:?}, not 0 or 1", i, v);
        }
    }
    Ok(out)
}

pub fn unpack_bits<T: Scalar>(t: &BitTensor) -> Tensor<T> {
    let data = (0..t.numel())
        .map(|i| if t.get_flat(i) { T::ONE } else { T::ZERO })
        .collect();
    Tensor::from_vec(t.logical_shape(), data).expect("shape matches numel")
}

/// `b()`: expands every code into its `B` bit-planes.
pub fn binarize(codes: &Tensor<i32>, bits: u8) -> Result<BitTensor> {
    check_bits(bits)?;
    let s = codes.shape();
    let limit = 1i32 << bits;
    let mut out = BitTensor::zeros(s.n, s.c, s.h, s.w, bits)?;
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let code = codes.at(n, c, y, x);
                    if code < 0 || code >= limit {
                        bail!(OutOfRange, "code {} does not fit {} unsigned bits", code, bits);
                    }
                    for k in 0..bits as usize {
                        if (code >> k) & 1 == 1 {
                            out.set(n, c * bits as usize + k, y, x, true);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `b⁻¹()`: recombines bit-planes into codes, `Σ_k 2^k · bit_k`.
pub fn debinarize(t: &BitTensor) -> Tensor<i32> {
    let s = t.code_shape();
    let bits = t.bits() as usize;
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let mut code = 0i32;
                    for k in 0..bits {
                        if t.get(n, c * bits + k, y, x) {
                            code |= 1 << k;
                        }
                    }
                    out.set(n, c, y, x, code);
                }
            }
        }
    }
    out
}

/// Gradient of `b⁻¹` per bit-plane: the upstream code gradient where the
/// forward bit was set, zero elsewhere.
pub fn debinarize_backward<T: Real>(upstream: &Tensor<T>, forward_bits: &BitTensor) -> Result<Tensor<T>> {
    if upstream.shape() != forward_bits.code_shape() {
        bail!(
            ShapeMismatch,
            "upstream {} vs code shape {}",
            upstream.shape(),
            forward_bits.code_shape()
        );
    }
    let s = forward_bits.logical_shape();
    let bits = forward_bits.bits() as usize;
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for lc in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    if forward_bits.get(n, lc, y, x) {
                        out.set(n, lc, y, x, upstream.at(n, lc / bits, y, x));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of `b()` per code: the sum of its `B` plane gradients divided by
/// the static normalization factor.
pub fn binarize_backward<T: Real>(
    plane_grads: &Tensor<T>,
    forward_bits: &BitTensor,
    norm: f64,
) -> Result<Tensor<T>> {
    if !(norm.is_finite() && norm > 0.0) {
        bail!(InvalidArgument, "gradient normalization must be positive, got {}", norm);
    }
    if plane_grads.shape() != forward_bits.logical_shape() {
        bail!(
            ShapeMismatch,
            "plane gradients {} vs logical shape {}",
            plane_grads.shape(),
            forward_bits.logical_shape()
        );
    }
    let s = forward_bits.code_shape();
    let bits = forward_bits.bits() as usize;
    let inv = T::from_f64(1.0 / norm);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let mut acc = T::ZERO;
                    for k in 0..bits {
                        acc += plane_grads.at(n, c * bits + k, y, x);
                    }
                    out.set(n, c, y, x, if norm == 1.0 { acc } else { acc * inv });
                }
            }
        }
    }
    Ok(out)
}

/// Mean number of set bits per code position over the stream, floored at 1.
pub fn estimate_grad_norm<'a, I>(samples: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a BitTensor>,
{
    let mut ones = 0u64;
    let mut codes = 0u64;
    for t in samples {
        ones += t.count_ones();
        codes += t.code_shape().numel() as u64;
    }
    if codes == 0 {
        bail!(Degenerate, "gradient-norm estimation needs at least one code");
    }
    Ok((ones as f64 / codes as f64).max(1.0))
}
