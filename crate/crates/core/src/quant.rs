//! Per-tensor affine quantization.
//!
//! Codes are signed two's-complement integers in `[-2^(n-1), 2^(n-1) - 1]`.
//! A weight `w` maps to the code `clamp(round(w/s + b))` (ties to even) and
//! back to `s·(code − b)`. Code arithmetic runs in `f64` so fake and real
//! quantization agree bit-for-bit on the `f32` result.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SUPPORTED_BITS: [u8; 3] = [2, 4, 8];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    bits: u8,
    scale: f32,
    offset: f32,
}

impl QuantSpec {
    pub fn new(bits: u8, scale: f32, offset: f32) -> Result<Self> {
        check_bits(bits)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid("quant_spec", format!("scale must be positive and finite, got {scale}")));
        }
        if !offset.is_finite() {
            return Err(Error::invalid("quant_spec", format!("offset must be finite, got {offset}")));
        }
        Ok(Self {
            bits,
            scale,
            offset,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn offset(&self) -> f32 {
        self.offset
    }

    pub fn qmin(&self) -> i32 {
        qmin(self.bits)
    }

    pub fn qmax(&self) -> i32 {
        qmax(self.bits)
    }

    /// `(code, in_range)` for one weight; `in_range` is false when clamped.
    pub fn code(&self, w: f32) -> (i32, bool) {
        affine_code(
            f64::from(w),
            f64::from(self.scale),
            f64::from(self.offset),
            self.qmin(),
            self.qmax(),
        )
    }

    pub fn decode(&self, code: i32) -> f32 {
        (f64::from(self.scale) * (f64::from(code) - f64::from(self.offset))) as f32
    }
}

pub fn qmin(bits: u8) -> i32 {
    -(1 << (bits - 1))
}

pub fn qmax(bits: u8) -> i32 {
    (1 << (bits - 1)) - 1
}

fn check_bits(bits: u8) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::invalid("quant_spec", format!("bit width must be one of 2, 4, 8; got {bits}")))
    }
}

pub(crate) fn affine_code(w: f64, s: f64, b: f64, qmin: i32, qmax: i32) -> (i32, bool) {
    let raw = (w / s + b).round_ties_even();
    if raw < f64::from(qmin) {
        (qmin, false)
    } else if raw > f64::from(qmax) {
        (qmax, false)
    } else {
        (raw as i32, true)
    }
}

/// Min-max initialization: the smallest weight maps to `qmin` and the
/// largest to `qmax`. A constant tensor gets `s = 1`, `b = −w₀`.
pub fn fit_affine_params(w: &Tensor, bits: u8) -> Result<QuantSpec> {
    check_bits(bits)?;
    let (lo, hi) = w
        .min_max()
        .ok_or_else(|| Error::invalid("fit_affine_params", "empty tensor"))?;
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::invalid("fit_affine_params", "tensor has non-finite values"));
    }
    if hi > lo {
        let span = f64::from(qmax(bits) - qmin(bits));
        let scale = ((f64::from(hi) - f64::from(lo)) / span) as f32;
        let offset = (f64::from(qmin(bits)) - f64::from(lo) / f64::from(scale)) as f32;
        QuantSpec::new(bits, scale, offset)
    } else {
        QuantSpec::new(bits, 1.0, -w.data()[0])
    }
}

pub fn fake_quantize(w: &Tensor, spec: &QuantSpec) -> Tensor {
    w.map(|v| spec.decode(spec.code(v).0))
}

/// Gradient through `fake_quantize`: identity except where the code clamped.
pub fn ste_backward(grad_out: &Tensor, w: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    if grad_out.shape() != w.shape() {
        return Err(Error::Shape {
            op: "ste_backward",
            left: grad_out.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let data = grad_out
        .data()
        .iter()
        .zip(w.data())
        .map(|(&g, &v)| if spec.code(v).1 { g } else { 0.0 })
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// Integer codes plus the spec that decodes them.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedTensor {
    shape: Vec<usize>,
    codes: Vec<i8>,
    spec: QuantSpec,
}

pub fn real_quantize(w: &Tensor, bits: u8) -> Result<PackedTensor> {
    let spec = fit_affine_params(w, bits)?;
    Ok(PackedTensor::quantize(w, spec))
}

pub fn dequantize(p: &PackedTensor) -> Result<Tensor> {
    p.check_codes()?;
    let data = p.codes.iter().map(|&c| p.spec.decode(i32::from(c))).collect();
    Tensor::new(p.shape.clone(), data)
}

impl PackedTensor {
    /// Quantizes with a given spec instead of refitting one.
    pub fn quantize(w: &Tensor, spec: QuantSpec) -> Self {
        let codes = w.data().iter().map(|&v| spec.code(v).0 as i8).collect();
        Self {
            shape: w.shape().to_vec(),
            codes,
            spec,
        }
    }

    pub fn from_codes(shape: Vec<usize>, codes: Vec<i8>, spec: QuantSpec) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != codes.len() {
            return Err(Error::invalid(
                "packed_tensor",
                format!("shape {shape:?} needs {numel} codes, got {}", codes.len()),
            ));
        }
        let packed = Self { shape, codes, spec };
        packed.check_codes()?;
        Ok(packed)
    }

    fn check_codes(&self) -> Result<()> {
        let (lo, hi) = (self.spec.qmin(), self.spec.qmax());
        match self.codes.iter().position(|&c| !(lo..=hi).contains(&i32::from(c))) {
            None => Ok(()),
            Some(i) => Err(Error::Corrupt(format!(
                "code {} at index {i} outside [{lo}, {hi}]",
                self.codes[i]
            ))),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    fn header_len(&self) -> usize {
        1 + 4 + 4 + 1 + 4 * self.shape.len()
    }

    fn codes_len(&self) -> usize {
        let per_byte = 8 / usize::from(self.spec.bits);
        self.codes.len().div_ceil(per_byte)
    }

    pub fn encoded_len(&self) -> usize {
        self.header_len() + self.codes_len()
    }

    /// Little-endian `{bits u8, scale f32, offset f32, rank u8, dims u32…}`
    /// followed by the codes, packed low bits first for 4 and 2 bits.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(self.spec.bits);
        out.extend_from_slice(&self.spec.scale.to_le_bytes());
        out.extend_from_slice(&self.spec.offset.to_le_bytes());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let bits = usize::from(self.spec.bits);
        if bits == 8 {
            out.extend(self.codes.iter().map(|&c| c as u8));
        } else {
            let per_byte = 8 / bits;
            let mask = (1u8 << bits) - 1;
            for chunk in self.codes.chunks(per_byte) {
                let mut byte = 0u8;
                for (i, &c) in chunk.iter().enumerate() {
                    byte |= ((c as u8) & mask) << (i * bits);
                }
                out.push(byte);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let bits = r.u8()?;
        let scale = r.f32()?;
        let offset = r.f32()?;
        let spec = QuantSpec::new(bits, scale, offset).map_err(|e| Error::Corrupt(e.to_string()))?;
        let rank = usize::from(r.u8()?);
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let bits = usize::from(bits);
        let per_byte = 8 / bits;
        let body = r.rest();
        if body.len() != numel.div_ceil(per_byte) {
            return Err(Error::Corrupt(format!(
                "packed payload has {} code bytes, shape {shape:?} at {bits} bits needs {}",
                body.len(),
                numel.div_ceil(per_byte)
            )));
        }
        let codes = if bits == 8 {
            body.iter().map(|&b| b as i8).collect()
        } else {
            let mask = (1u8 << bits) - 1;
            let mut codes = Vec::with_capacity(numel);
            for (bi, &byte) in body.iter().enumerate() {
                for i in 0..per_byte {
                    let field = (byte >> (i * bits)) & mask;
                    if bi * per_byte + i < numel {
                        // sign-extend the n-bit field
                        let shift = 8 - bits;
                        codes.push(((field << shift) as i8) >> shift);
                    } else if field != 0 {
                        return Err(Error::Corrupt("non-zero padding bits in packed codes".into()));
                    }
                }
            }
            codes
        };
        Self::from_codes(shape, codes, spec)
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated: wanted {n} bytes at offset {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn rest(&mut self) -> &'a [u8] {
        let out = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        out
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
