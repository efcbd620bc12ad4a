//! Deployment-path verification: pack quantized weights into 4-bit codes and
//! run the linear layer in integer arithmetic with per-channel/per-token
//! rescaling.
//!
//! Both this path and the training path compute quantized products through
//! [`quantized_matmul_values`]: integer code accumulation, rescaled once per
//! (channel, token). Identical arithmetic on both sides is what makes the
//! equivalence bit-exact rather than merely close.

use crate::error::{Error, Result};
use crate::quantizer::{codes, Granularity, QuantSpec};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct PackedWeights<S: Scalar> {
    /// For b <= 4: two 4-bit codes per byte, row-major, low nibble holds the
    /// even-index element. For b in 5..=8: one code per byte.
    pub bytes: Vec<u8>,
    /// Per-output-channel scale and zero-shift.
    pub scales: Vec<S>,
    pub zeros: Vec<i64>,
    pub n: usize,
    pub m: usize,
    pub bits: u32,
}

impl<S: Scalar> PackedWeights<S> {
    pub fn code_bytes(&self) -> usize {
        self.bytes.len()
    }

    /// Per-channel parameter overhead as serialized: 8-byte scale plus
    /// 1-byte zero-shift per output channel.
    pub fn param_bytes(&self) -> usize {
        self.scales.len() * 9
    }

    /// On-disk payload of the packed form: nibble codes plus compact
    /// per-channel parameters (f32 scale, one-byte zero point).
    pub fn packed_payload_bytes(&self) -> usize {
        self.code_bytes() + self.scales.len() * 5
    }

    /// Size of the 16-bit dense reference for the same layer: one 16-bit
    /// word per weight plus full-precision per-channel parameters
    /// (f64 scale, i64 zero point).
    pub fn dense16_payload_bytes(&self) -> usize {
        self.n * self.m * 2 + self.scales.len() * 16
    }

    pub fn unpack(&self) -> Vec<u8> {
        let count = self.n * self.m;
        if self.bits <= 4 {
            let mut out = Vec::with_capacity(count);
            for i in 0..count {
                let byte = self.bytes[i / 2];
                out.push(if i % 2 == 0 { byte & 0x0f } else { byte >> 4 });
            }
            out
        } else {
            self.bytes.clone()
        }
    }

    pub fn dequantize(&self) -> Vec<S> {
        let codes = self.unpack();
        codes
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let ch = i / self.m;
                (S::c(c as f64) - S::c(self.zeros[ch] as f64)) * self.scales[ch]
            })
            .collect()
    }
}

fn pack_nibbles(codes: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; codes.len().div_ceil(2)];
    for (i, &c) in codes.iter().enumerate() {
        if i % 2 == 0 {
            out[i / 2] |= c & 0x0f;
        } else {
            out[i / 2] |= (c & 0x0f) << 4;
        }
    }
    out
}

/// Quantize a weight matrix to integer codes and pack them.
pub fn pack<S: Scalar>(w: &[S], n: usize, m: usize, spec: &QuantSpec<S>) -> Result<PackedWeights<S>> {
    if spec.bits > 8 {
        return Err(Error::invalid(format!("pack supports b <= 8, got {}", spec.bits)));
    }
    if w.len() != n * m {
        return Err(Error::invalid("pack: data length does not match n x m"));
    }
    let (scales, zeros) = match spec.granularity {
        Granularity::PerChannel => (spec.scales.clone(), spec.zeros.clone()),
        Granularity::PerTensor => (vec![spec.scales[0]; n], vec![spec.zeros[0]; n]),
        Granularity::PerToken => {
            return Err(Error::invalid("pack expects per-channel or per-tensor weights"))
        }
    };
    let raw = codes(w, &[n, m], spec)?;
    let bytes = if spec.bits <= 4 { pack_nibbles(&raw) } else { raw };
    Ok(PackedWeights {
        bytes,
        scales,
        zeros,
        n,
        m,
        bits: spec.bits,
    })
}

/// Shared arithmetic for the quantized product: wide-integer accumulation of
/// (code_w − z_w)(code_x − z_x), rescaled by s_w · s_x per (channel, token).
#[allow(clippy::too_many_arguments)]
pub fn quantized_matmul_values<S: Scalar>(
    codes_w: &[u8],
    scales_w: &[S],
    zeros_w: &[i64],
    codes_x: &[u8],
    scales_x: &[S],
    zeros_x: &[i64],
    n: usize,
    m: usize,
    k: usize,
) -> Vec<S> {
    // Desk-scale dims cannot overflow i64: |code − z| < 256, so each product
    // is < 2^16 and the accumulator stays below m · 2^16.
    debug_assert!((m as i64) < (i64::MAX >> 17));
    let mut out = vec![S::zero(); n * k];
    for i in 0..n {
        let zw = zeros_w[i];
        for j in 0..k {
            let zx = zeros_x[j];
            let mut acc: i64 = 0;
            for l in 0..m {
                let cw = codes_w[i * m + l] as i64 - zw;
                let cx = codes_x[l * k + j] as i64 - zx;
                acc += cw * cx;
            }
            out[i * k + j] = S::c(acc as f64) * scales_w[i] * scales_x[j];
        }
    }
    out
}

/// Integer-arithmetic linear layer. `q_a` must be computed per token from `x`
/// with the quantizer's rounding mode.
pub fn int_linear<S: Scalar>(
    packed: &PackedWeights<S>,
    x: &[S],
    m: usize,
    k: usize,
    q_a: &QuantSpec<S>,
) -> Result<Vec<S>> {
    if m != packed.m {
        return Err(Error::ShapeMismatch {
            op: "int_linear",
            left: vec![packed.n, packed.m],
            right: vec![m, k],
        });
    }
    if q_a.granularity != Granularity::PerToken || q_a.groups() != k {
        return Err(Error::invalid("int_linear needs a per-token activation spec"));
    }
    let codes_x = codes(x, &[m, k], q_a)?;
    Ok(quantized_matmul_values(
        &packed.unpack(),
        &packed.scales,
        &packed.zeros,
        &codes_x,
        &q_a.scales,
        &q_a.zeros,
        packed.n,
        m,
        k,
    ))
}
