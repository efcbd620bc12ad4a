//! Asymmetric uniform fake quantization with straight-through gradients.
//!
//! Weight scales are static per output channel and learnable (LSQ rule);
//! activation scales are recomputed per forward pass, per token column.
//! Rounding is half-away-from-zero everywhere, matching the integer
//! execution path bit-exactly.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{GroupIndexer, Tensor};

/// Floor for degenerate (all-equal) groups.
pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    /// One group per output row (weights).
    PerChannel,
    /// One group per token column (activations).
    PerToken,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantSpec<S: Scalar> {
    pub bits: u32,
    pub granularity: Granularity,
    pub scales: Vec<S>,
    pub zeros: Vec<i64>,
    pub learnable: bool,
}

impl<S: Scalar> QuantSpec<S> {
    pub fn max_code(&self) -> i64 {
        (1i64 << self.bits) - 1
    }

    pub fn groups(&self) -> usize {
        self.scales.len()
    }

    /// Maps flat element indices of a tensor with `shape` onto groups,
    /// checking that the group count lines up.
    pub fn indexer(&self, shape: &[usize]) -> Result<GroupIndexer> {
        let (rows, cols) = match shape {
            [n] => (*n, 1),
            [n, m] => (*n, *m),
            _ => {
                return Err(Error::invalid(format!(
                    "quantization expects 1-D or 2-D tensors, got {shape:?}"
                )))
            }
        };
        let (indexer, expected) = match self.granularity {
            Granularity::PerTensor => (GroupIndexer::Tensor, 1),
            Granularity::PerChannel => (GroupIndexer::Row { cols }, rows),
            Granularity::PerToken => (GroupIndexer::Col { cols }, cols),
        };
        if self.groups() != expected {
            return Err(Error::invalid(format!(
                "quant spec has {} groups, shape {shape:?} needs {expected} for {:?}",
                self.groups(),
                self.granularity
            )));
        }
        Ok(indexer)
    }
}

/// Min/max scale and zero-shift per group: s = (max − min)/(2^b − 1),
/// z = −round(min/s), clamped into the code range.
pub fn compute_qparams<S: Scalar>(
    data: &[S],
    shape: &[usize],
    bits: u32,
    granularity: Granularity,
) -> Result<QuantSpec<S>> {
    if !(2..=16).contains(&bits) {
        return Err(Error::invalid(format!("bits must be in [2, 16], got {bits}")));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("compute_qparams"));
    }
    let probe = QuantSpec::<S> {
        bits,
        granularity,
        scales: Vec::new(),
        zeros: Vec::new(),
        learnable: false,
    };
    let groups = match granularity {
        Granularity::PerTensor => 1,
        Granularity::PerChannel => shape[0],
        Granularity::PerToken => *shape.last().unwrap(),
    };
    if data.is_empty() || !data.len().is_multiple_of(groups) {
        return Err(Error::invalid("each quantization group needs >= 1 element"));
    }
    let mut spec = QuantSpec {
        scales: vec![S::zero(); groups],
        zeros: vec![0i64; groups],
        ..probe
    };
    // Temporarily give the spec its group count so indexer() validates.
    let indexer = spec.indexer(shape)?;

    // Each group range is widened to include zero so the zero-shift always
    // lands inside the code range and in-range values stay within s/2 of
    // their reconstruction.
    let mut mins = vec![S::zero(); groups];
    let mut maxs = vec![S::zero(); groups];
    for (i, &x) in data.iter().enumerate() {
        let g = indexer.group_of(i);
        if x < mins[g] {
            mins[g] = x;
        }
        if x > maxs[g] {
            maxs[g] = x;
        }
    }
    let levels = S::c(((1i64 << bits) - 1) as f64);
    for g in 0..groups {
        if maxs[g] == mins[g] {
            // Degenerate group: constant output, gradients pass through.
            spec.scales[g] = S::c(SCALE_FLOOR);
            spec.zeros[g] = 0;
        } else {
            let s = (maxs[g] - mins[g]) / levels;
            let z = (-(mins[g] / s)).round_half_away().to_f64_lossy() as i64;
            spec.scales[g] = s;
            spec.zeros[g] = z.clamp(0, (1i64 << bits) - 1);
        }
    }
    Ok(spec)
}

/// Quantize-dequantize on raw data: (clamp(⌊x/s⌉ + z, 0, 2^b − 1) − z) · s.
pub fn fake_quantize_data<S: Scalar>(
    data: &[S],
    shape: &[usize],
    spec: &QuantSpec<S>,
) -> Result<Vec<S>> {
    let indexer = spec.indexer(shape)?;
    let max_code = S::c(spec.max_code() as f64);
    Ok(data
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let g = indexer.group_of(i);
            let s = spec.scales[g];
            let z = S::c(spec.zeros[g] as f64);
            let code = ((x / s).round_half_away() + z).max(S::zero()).min(max_code);
            (code - z) * s
        })
        .collect())
}

/// STE indicator: 1 exactly where ⌊x/s⌉ + z lands inside [0, 2^b − 1].
pub fn ste_mask_data<S: Scalar>(data: &[S], shape: &[usize], spec: &QuantSpec<S>) -> Result<Vec<S>> {
    let indexer = spec.indexer(shape)?;
    let max_code = S::c(spec.max_code() as f64);
    Ok(data
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let g = indexer.group_of(i);
            let s = spec.scales[g];
            let z = S::c(spec.zeros[g] as f64);
            let r = (x / s).round_half_away() + z;
            if r >= S::zero() && r <= max_code {
                S::one()
            } else {
                S::zero()
            }
        })
        .collect())
}

/// Per-element derivative of the fake-quantized value w.r.t. its group scale
/// (LSQ rule): ⌊x/s⌉ − x/s in range, clamp code − z when clamped.
fn lsq_ds_data<S: Scalar>(data: &[S], shape: &[usize], spec: &QuantSpec<S>) -> Result<Vec<S>> {
    let indexer = spec.indexer(shape)?;
    let max_code = S::c(spec.max_code() as f64);
    Ok(data
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let g = indexer.group_of(i);
            let s = spec.scales[g];
            let z = S::c(spec.zeros[g] as f64);
            let rounded = (x / s).round_half_away();
            let r = rounded + z;
            if r < S::zero() {
                -z
            } else if r > max_code {
                max_code - z
            } else {
                rounded - x / s
            }
        })
        .collect())
}

/// LSQ gradient-scaling convention: g = 1/√(N_group · (2^b − 1)).
pub fn lsq_grad_scale<S: Scalar>(group_elems: usize, bits: u32) -> S {
    S::c(1.0 / ((group_elems as f64) * (((1i64 << bits) - 1) as f64)).sqrt())
}

/// Gradient of the fake-quantized output w.r.t. each group scale, given the
/// upstream gradient. Standalone form of what the graph op does internally.
pub fn lsq_scale_grad<S: Scalar>(
    data: &[S],
    shape: &[usize],
    spec: &QuantSpec<S>,
    upstream: &[S],
) -> Result<Vec<S>> {
    if !spec.learnable {
        return Err(Error::invalid("lsq_scale_grad on a non-learnable spec"));
    }
    let indexer = spec.indexer(shape)?;
    let ds = lsq_ds_data(data, shape, spec)?;
    let g_factor = lsq_grad_scale::<S>(data.len() / spec.groups(), spec.bits);
    let mut out = vec![S::zero(); spec.groups()];
    for (i, (&u, &d)) in upstream.iter().zip(&ds).enumerate() {
        out[indexer.group_of(i)] += g_factor * u * d;
    }
    Ok(out)
}

/// Graph op: fake quantization under a frozen spec, STE backward.
pub fn fake_quantize<S: Scalar>(x: &Tensor<S>, spec: &QuantSpec<S>) -> Result<Tensor<S>> {
    let shape = x.shape();
    let (values, mask) = x.with_data(|d| -> Result<_> {
        Ok((
            fake_quantize_data(d, &shape, spec)?,
            ste_mask_data(d, &shape, spec)?,
        ))
    })?;
    Ok(Tensor::fake_quant_ste(x, values, mask))
}

/// Graph op: dynamic per-token activation quantization. The spec is
/// recomputed from the live values on every call.
pub fn fake_quantize_dynamic<S: Scalar>(
    x: &Tensor<S>,
    bits: u32,
) -> Result<(Tensor<S>, QuantSpec<S>)> {
    let shape = x.shape();
    let spec = x.with_data(|d| compute_qparams(d, &shape, bits, Granularity::PerToken))?;
    Ok((fake_quantize(x, &spec)?, spec))
}

/// Graph op: weight fake quantization whose per-channel scale is a trainable
/// leaf. Zero shifts stay frozen at their data-derived values.
pub fn fake_quantize_lsq<S: Scalar>(
    w: &Tensor<S>,
    scale: &Tensor<S>,
    zeros: &[i64],
    bits: u32,
    granularity: Granularity,
) -> Result<Tensor<S>> {
    let shape = w.shape();
    let floor = S::c(SCALE_FLOOR);
    let spec = QuantSpec {
        bits,
        granularity,
        scales: scale.data().iter().map(|&s| s.max(floor)).collect(),
        zeros: zeros.to_vec(),
        learnable: true,
    };
    let indexer = spec.indexer(&shape)?;
    let (values, mask, ds) = w.with_data(|d| -> Result<_> {
        Ok((
            fake_quantize_data(d, &shape, &spec)?,
            ste_mask_data(d, &shape, &spec)?,
            lsq_ds_data(d, &shape, &spec)?,
        ))
    })?;
    let g_factor = lsq_grad_scale::<S>(w.numel() / spec.groups(), bits);
    Ok(Tensor::fake_quant_lsq(
        w, scale, values, mask, ds, indexer, g_factor,
    ))
}

/// Integer codes for a tensor under a spec; shared by the packer. Byte-wide
/// codes only — callers on wider widths stay on the float path.
pub fn codes<S: Scalar>(data: &[S], shape: &[usize], spec: &QuantSpec<S>) -> Result<Vec<u8>> {
    if spec.bits > 8 {
        return Err(Error::invalid(format!(
            "integer codes support b <= 8, got {}",
            spec.bits
        )));
    }
    let indexer = spec.indexer(shape)?;
    let max_code = spec.max_code();
    Ok(data
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let g = indexer.group_of(i);
            let s = spec.scales[g];
            let c = (x / s).round_half_away().to_f64_lossy() as i64 + spec.zeros[g];
            c.clamp(0, max_code) as u8
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn qparams_hand_cases() {
        let spec = compute_qparams(&[-1.0, 0.0, 2.0], &[3], 2, Granularity::PerTensor).unwrap();
        assert_eq!(spec.scales, vec![1.0]);
        assert_eq!(spec.zeros, vec![1]);

        let spec = compute_qparams(&[0.0, 15.0], &[2], 4, Granularity::PerTensor).unwrap();
        assert_eq!(spec.scales, vec![1.0]);
        assert_eq!(spec.zeros, vec![0]);
        // every integer 0..=15 is a grid point
        let xs: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let q = fake_quantize_data(&xs, &[16], &spec).unwrap();
        // per-tensor spec built for shape [2] reused on [16]: same group count
        assert_eq!(q, xs);
    }

    #[test]
    fn degenerate_group_gets_floor_scale() {
        let spec = compute_qparams(&[0.0, 0.0, 0.0], &[3], 4, Granularity::PerTensor).unwrap();
        assert_eq!(spec.scales, vec![SCALE_FLOOR]);
        assert_eq!(spec.zeros, vec![0]);
        let mask = ste_mask_data(&[0.0, 0.0, 0.0], &[3], &spec).unwrap();
        assert_eq!(mask, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn nonfinite_rejected() {
        assert!(compute_qparams(&[1.0, f64::INFINITY], &[2], 4, Granularity::PerTensor).is_err());
    }

    fn spec_b2_s1_z1() -> QuantSpec<f64> {
        QuantSpec {
            bits: 2,
            granularity: Granularity::PerTensor,
            scales: vec![1.0],
            zeros: vec![1],
            learnable: false,
        }
    }

    #[test]
    fn fake_quantize_hand_cases() {
        let spec = spec_b2_s1_z1();
        assert_eq!(
            fake_quantize_data(&[-1.0, 0.0, 2.0], &[3], &spec).unwrap(),
            vec![-1.0, 0.0, 2.0]
        );
        assert_eq!(fake_quantize_data(&[0.4], &[1], &spec).unwrap(), vec![0.0]);
        assert_eq!(fake_quantize_data(&[100.0], &[1], &spec).unwrap(), vec![2.0]);
    }

    #[test]
    fn ste_mask_hand_cases() {
        let spec = spec_b2_s1_z1();
        assert_eq!(
            ste_mask_data(&[-100.0, 0.0, 100.0], &[3], &spec).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn ste_gradient_passes_through_in_range() {
        let spec = spec_b2_s1_z1();
        let x = Tensor::<f64>::param(&[3], vec![-1.0, 0.3, 1.7]).unwrap();
        let q = fake_quantize(&x, &spec).unwrap();
        q.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);

        let y = Tensor::<f64>::param(&[3], vec![-100.0, 0.0, 100.0]).unwrap();
        let q = fake_quantize(&y, &spec).unwrap();
        q.sum().backward().unwrap();
        assert_eq!(y.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn lsq_hand_cases() {
        let mut spec = spec_b2_s1_z1();
        spec.learnable = true;
        // grid point → zero contribution
        let g = lsq_scale_grad(&[1.0], &[1], &spec, &[1.0]).unwrap();
        let gf = lsq_grad_scale::<f64>(1, 2);
        assert_eq!(g, vec![0.0 * gf]);
        // clamped high → (3 − 1) per unit upstream (times the LSQ factor)
        let g = lsq_scale_grad(&[100.0], &[1], &spec, &[1.0]).unwrap();
        assert!((g[0] - 2.0 * gf).abs() < 1e-15);
        // non-learnable spec rejected
        let frozen = spec_b2_s1_z1();
        assert!(lsq_scale_grad(&[1.0], &[1], &frozen, &[1.0]).is_err());
    }

    /// The LSQ rule is the STE surrogate gradient: for in-range elements it
    /// differs from the raw derivative of the piecewise fake_quantize by
    /// exactly x/s (the straight-through term for the rounded code). The
    /// finite-difference oracle therefore checks fd − Σ_in-range x/s against
    /// the analytic rule, and the clamped branch (genuinely linear in s)
    /// against fd directly.
    #[test]
    fn lsq_matches_finite_difference_in_scale() {
        let mut rng = Rng::new(23);
        let n = 64usize;
        let mut xs: Vec<f64> = rng.uniform_vec(n, -1.5, 1.5);
        xs[0] = 100.0; // force one clamped element
        let bits = 4u32;
        let base = compute_qparams(&xs[1..], &[n - 1], bits, Granularity::PerTensor).unwrap();
        let s0 = base.scales[0];
        let z = base.zeros[0];
        let make_spec = |s: f64| QuantSpec {
            bits,
            granularity: Granularity::PerTensor,
            scales: vec![s],
            zeros: vec![z],
            learnable: true,
        };
        let eval = |s: f64| -> f64 {
            fake_quantize_data(&xs, &[n], &make_spec(s))
                .unwrap()
                .iter()
                .sum::<f64>()
        };
        let h = 1e-9;
        // exclude points within 1e-6 of a rounding boundary
        for x in xs.iter().copied() {
            let r = x / s0;
            assert!(
                (r - r.floor() - 0.5).abs() > 1e-6 || x == 100.0,
                "unlucky seed: boundary point"
            );
        }
        let fd = (eval(s0 + h) - eval(s0 - h)) / (2.0 * h);
        let spec = make_spec(s0);
        let mask = ste_mask_data(&xs, &[n], &spec).unwrap();
        let ste_correction: f64 = xs
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m == 1.0)
            .map(|(&x, _)| x / s0)
            .sum();
        let analytic = lsq_scale_grad(&xs, &[n], &spec, &vec![1.0; n]).unwrap()[0]
            / lsq_grad_scale::<f64>(n, bits);
        let expected = fd - ste_correction;
        let denom = expected.abs().max(analytic.abs()).max(1.0);
        assert!(
            (expected - analytic).abs() / denom < 1e-4,
            "fd-derived {expected} vs analytic {analytic}"
        );
        // clamped element alone: derivative is exactly (max code − z)
        let clamped_only: Vec<f64> = vec![100.0];
        let g = lsq_scale_grad(&clamped_only, &[1], &spec, &[1.0]).unwrap()[0]
            / lsq_grad_scale::<f64>(1, bits);
        assert_eq!(g, (spec.max_code() - z) as f64);
    }

    #[test]
    fn idempotence_and_grid_membership() {
        let mut rng = Rng::new(3);
        for &bits in &[2u32, 3, 4, 8] {
            let xs: Vec<f64> = rng.uniform_vec(128, -3.0, 3.0);
            let spec = compute_qparams(&xs, &[128], bits, Granularity::PerTensor).unwrap();
            let q1 = fake_quantize_data(&xs, &[128], &spec).unwrap();
            let q2 = fake_quantize_data(&q1, &[128], &spec).unwrap();
            assert_eq!(q1, q2, "idempotence at b={bits}");
            for &v in &q1 {
                let code = v / spec.scales[0] + spec.zeros[0] as f64;
                assert!((code - code.round()).abs() < 1e-9, "grid membership");
                assert!(code.round() >= 0.0 && code.round() <= spec.max_code() as f64);
            }
        }
    }

    #[test]
    fn per_token_groups_align_with_columns() {
        // 2 x 3 matrix, tokens are columns.
        let xs: Vec<f64> = vec![0.0, 10.0, -4.0, 1.0, 20.0, 4.0];
        let spec = compute_qparams(&xs, &[2, 3], 4, Granularity::PerToken).unwrap();
        assert_eq!(spec.groups(), 3);
        let q = fake_quantize_data(&xs, &[2, 3], &spec).unwrap();
        for (i, (&x, &qx)) in xs.iter().zip(&q).enumerate() {
            let g = i % 3;
            assert!((x - qx).abs() <= spec.scales[g] / 2.0 + 1e-12);
        }
    }

    #[test]
    fn group_count_mismatch_rejected() {
        let spec = QuantSpec::<f64> {
            bits: 4,
            granularity: Granularity::PerChannel,
            scales: vec![1.0, 1.0],
            zeros: vec![0, 0],
            learnable: false,
        };
        assert!(fake_quantize_data(&[1.0, 2.0, 3.0], &[3], &spec).is_err());
    }
}
