//! Error-compensating auxiliary modules with a rank-decay schedule.
//!
//! Each quantized linear layer may carry a low-rank pair (L, R) initialized
//! from the SVD of its weight quantization error W − Q_b(W). During training
//! the trailing (smallest-σ) columns are multiplied by an annealing factor u
//! that decays 1 → 0 within each phase; at the phase boundary those columns
//! are truncated away. Because the annealed columns contribute exactly zero
//! at u = 0, the forward output is continuous across the boundary. After the
//! final phase the module vanishes entirely and the layer reduces to the
//! plain quantized product.
//!
//! Two baseline decay strategies are included for comparison: magnitude
//! sparsification of the dense correction, and a four-term additive 4-bit
//! residual decomposition decayed one term per phase.

use crate::error::{Error, Result};
use crate::quantizer::{compute_qparams, fake_quantize_data, Granularity, QuantSpec};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::svd::svd_raw;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnealTag {
    Cosine,
    Linear,
    Square,
    Logarithmic,
    Exponential,
}

impl AnnealTag {
    pub const ALL: [AnnealTag; 5] = [
        AnnealTag::Cosine,
        AnnealTag::Linear,
        AnnealTag::Square,
        AnnealTag::Logarithmic,
        AnnealTag::Exponential,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AnnealTag::Cosine => "cosine",
            AnnealTag::Linear => "linear",
            AnnealTag::Square => "square",
            AnnealTag::Logarithmic => "logarithmic",
            AnnealTag::Exponential => "exponential",
        }
    }
}

impl std::str::FromStr for AnnealTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(AnnealTag::Cosine),
            "linear" => Ok(AnnealTag::Linear),
            "square" => Ok(AnnealTag::Square),
            "logarithmic" => Ok(AnnealTag::Logarithmic),
            "exponential" => Ok(AnnealTag::Exponential),
            _ => Err(Error::invalid(format!("unknown annealing tag {s:?}"))),
        }
    }
}

/// Which columns the γ mask decays. `Trailing` (smallest singular values) is
/// the default; the alternatives exist for the ordering ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaOrder {
    Trailing,
    Leading,
    Random,
}

impl GammaOrder {
    pub fn name(&self) -> &'static str {
        match self {
            GammaOrder::Trailing => "trailing",
            GammaOrder::Leading => "leading",
            GammaOrder::Random => "random",
        }
    }
}

impl std::str::FromStr for GammaOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trailing" => Ok(GammaOrder::Trailing),
            "leading" => Ok(GammaOrder::Leading),
            "random" => Ok(GammaOrder::Random),
            _ => Err(Error::invalid(format!("unknown gamma order {s:?}"))),
        }
    }
}

/// Annealing factor at `step` of a phase with `steps` total steps. Every tag
/// is normalized so u(0) = 1, u(steps) = 0, monotone nonincreasing between.
pub fn anneal_u(step: usize, steps: usize, tag: AnnealTag) -> Result<f64> {
    if steps == 0 {
        return Err(Error::invalid("anneal_u: steps-per-phase must be >= 1"));
    }
    if step > steps {
        return Err(Error::invalid(format!(
            "anneal_u: step {step} > steps-per-phase {steps}"
        )));
    }
    if step == steps {
        return Ok(0.0);
    }
    let x = step as f64 / steps as f64;
    Ok(match tag {
        AnnealTag::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * x).cos()),
        AnnealTag::Linear => 1.0 - x,
        AnnealTag::Square => (1.0 - x) * (1.0 - x),
        AnnealTag::Logarithmic => (2.0 - x).log2(),
        AnnealTag::Exponential => ((1.0 - x).exp() - 1.0) / (std::f64::consts::E - 1.0),
    })
}

/// Column count kept at 1 in the mask for the current rank: ⌈(1−λ)r⌉, or 0
/// in the final phase where λ·r < 1 and the whole remaining mask is annealed.
pub fn kept_columns(r: usize, lambda: f64) -> usize {
    if r == 0 {
        return 0;
    }
    if (r as f64) < 1.0 / lambda {
        return 0;
    }
    ((1.0 - lambda) * r as f64).ceil() as usize
}

/// The n×r mask of the decay schedule: kept columns at 1, the trailing
/// remainder at u.
pub fn gamma<S: Scalar>(n: usize, r: usize, lambda: f64, u: f64) -> Result<Vec<S>> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::invalid(format!("gamma: u must be in [0, 1], got {u}")));
    }
    let kept = kept_columns(r, lambda);
    let mut row = vec![S::c(u); r];
    for v in row.iter_mut().take(kept) {
        *v = S::one();
    }
    Ok(row.iter().cycle().take(n * r).copied().collect())
}

#[derive(Debug, Clone)]
pub struct AuxState<S: Scalar> {
    /// n×r, trainable.
    pub l: Tensor<S>,
    /// r×m, trainable.
    pub r_mat: Tensor<S>,
    pub rank: usize,
    pub r0: usize,
    pub lambda: f64,
    pub u: f64,
    pub phase: usize,
    pub steps_per_phase: usize,
    pub tag: AnnealTag,
    pub order: GammaOrder,
    /// Re-run SVD on L·R at each phase start so columns are again ordered by
    /// singular value. On by default; off truncates trained factors as-is.
    pub refactorize_on: bool,
    /// Column indices currently multiplied by u. Complement of the kept set.
    decayed: Vec<usize>,
    order_rng: Rng,
    pub n: usize,
    pub m: usize,
}

/// Build the auxiliary pair from the weight quantization error:
/// E = W − Q_b(W), L = [√σ₁u₁ …], R = [√σ₁v₁ …]ᵀ truncated at r₀.
pub fn init_phi<S: Scalar>(
    w: &[S],
    n: usize,
    m: usize,
    q: &QuantSpec<S>,
    r0: usize,
    lambda: f64,
) -> Result<AuxState<S>> {
    if r0 > n.min(m) {
        return Err(Error::invalid(format!(
            "aux rank {r0} exceeds min(n, m) = {}",
            n.min(m)
        )));
    }
    if !(0.0 < lambda && lambda <= 1.0) {
        return Err(Error::invalid(format!("lambda must be in (0, 1], got {lambda}")));
    }
    let qw = fake_quantize_data(w, &[n, m], q)?;
    let e: Vec<S> = w.iter().zip(&qw).map(|(&a, &b)| a - b).collect();
    let (l, r_mat) = split_factors(&e, n, m, r0)?;
    let mut state = AuxState {
        l: Tensor::param(&[n, r0], l)?,
        r_mat: Tensor::param(&[r0, m], r_mat)?,
        rank: r0,
        r0,
        lambda,
        u: 1.0,
        phase: 0,
        steps_per_phase: 1,
        tag: AnnealTag::Cosine,
        order: GammaOrder::Trailing,
        refactorize_on: true,
        decayed: Vec::new(),
        order_rng: Rng::new(0),
        n,
        m,
    };
    state.pick_decayed();
    Ok(state)
}

/// √σ-balanced split of the top-`rank` SVD of an n×m matrix.
fn split_factors<S: Scalar>(e: &[S], n: usize, m: usize, rank: usize) -> Result<(Vec<S>, Vec<S>)> {
    let svd = svd_raw(e, n, m)?;
    let d = svd.d();
    let mut l = vec![S::zero(); n * rank];
    let mut r = vec![S::zero(); rank * m];
    for s in 0..rank.min(d) {
        let root = svd.singulars[s].sqrt();
        for i in 0..n {
            l[i * rank + s] = root * svd.left[i * d + s];
        }
        for j in 0..m {
            r[s * m + j] = root * svd.right_t[s * m + j];
        }
    }
    Ok((l, r))
}

impl<S: Scalar> AuxState<S> {
    pub fn with_schedule(
        mut self,
        steps_per_phase: usize,
        tag: AnnealTag,
        order: GammaOrder,
        refactorize_on: bool,
        seed: u64,
    ) -> Result<Self> {
        if steps_per_phase == 0 {
            return Err(Error::invalid("steps-per-phase must be >= 1"));
        }
        self.steps_per_phase = steps_per_phase;
        self.tag = tag;
        self.order = order;
        self.refactorize_on = refactorize_on;
        self.order_rng = Rng::new(seed).substream("gamma-order");
        self.pick_decayed();
        Ok(self)
    }

    /// Choose which columns decay this phase, honoring the ordering variant.
    fn pick_decayed(&mut self) {
        let kept = kept_columns(self.rank, self.lambda);
        let shed = self.rank - kept;
        self.decayed = match self.order {
            GammaOrder::Trailing => (kept..self.rank).collect(),
            GammaOrder::Leading => (0..shed).collect(),
            GammaOrder::Random => {
                let mut idx: Vec<usize> = (0..self.rank).collect();
                for i in (1..idx.len()).rev() {
                    idx.swap(i, self.order_rng.below(i + 1));
                }
                let mut d = idx[..shed].to_vec();
                d.sort_unstable();
                d
            }
        };
    }

    /// γ as currently applied: 1 on kept columns, u on decayed ones.
    pub fn gamma_mask(&self) -> Vec<S> {
        let mut row = vec![S::one(); self.rank];
        for &c in &self.decayed {
            row[c] = S::c(self.u);
        }
        row.iter().cycle().take(self.n * self.rank).copied().collect()
    }

    pub fn set_step_in_phase(&mut self, step: usize) -> Result<()> {
        self.u = anneal_u(step, self.steps_per_phase, self.tag)?;
        Ok(())
    }

    /// (γ ⊙ L) · (R · Qx). Rank 0 contributes an exact zero.
    pub fn forward_aux(&self, qx: &Tensor<S>) -> Result<Tensor<S>> {
        let xshape = qx.shape();
        if xshape.len() != 2 || xshape[0] != self.m {
            return Err(Error::ShapeMismatch {
                op: "forward_aux",
                left: vec![self.rank, self.m],
                right: xshape,
            });
        }
        if self.rank == 0 {
            return Ok(Tensor::zeros(&[self.n, xshape[1]]));
        }
        let mask = Tensor::from_vec(&[self.n, self.rank], self.gamma_mask())?;
        let gl = self.l.mul(&mask)?;
        gl.matmul(&self.r_mat.matmul(qx)?)
    }

    /// Same contraction on raw data, bypassing the graph (for snapshots).
    pub fn product(&self) -> Vec<S> {
        if self.rank == 0 {
            return vec![S::zero(); self.n * self.m];
        }
        let ld = self.l.data();
        let rd = self.r_mat.data();
        let mut out = vec![S::zero(); self.n * self.m];
        for i in 0..self.n {
            for s in 0..self.rank {
                let v = ld[i * self.rank + s];
                if v == S::zero() {
                    continue;
                }
                for j in 0..self.m {
                    out[i * self.m + j] += v * rd[s * self.m + j];
                }
            }
        }
        out
    }

    /// Singular values of the current product L·R.
    pub fn spectrum(&self) -> Result<Vec<S>> {
        if self.rank == 0 {
            return Ok(Vec::new());
        }
        Ok(svd_raw(&self.product(), self.n, self.m)?
            .singulars
            .into_iter()
            .take(self.rank)
            .collect())
    }

    /// Drop the decayed columns once u has reached 0. The surviving columns
    /// keep their trained values, so the forward output is unchanged.
    pub fn truncate(&mut self) -> Result<()> {
        if self.u != 0.0 {
            return Err(Error::invalid(format!(
                "truncate called mid-phase (u = {})",
                self.u
            )));
        }
        if self.rank == 0 {
            return Ok(());
        }
        let keep: Vec<usize> = (0..self.rank).filter(|c| !self.decayed.contains(c)).collect();
        let new_rank = keep.len();
        let ld = self.l.data();
        let rd = self.r_mat.data();
        let mut l = vec![S::zero(); self.n * new_rank];
        let mut r = vec![S::zero(); new_rank * self.m];
        for (s_new, &s_old) in keep.iter().enumerate() {
            for i in 0..self.n {
                l[i * new_rank + s_new] = ld[i * self.rank + s_old];
            }
            for j in 0..self.m {
                r[s_new * self.m + j] = rd[s_old * self.m + j];
            }
        }
        self.l = Tensor::param(&[self.n, new_rank], l)?;
        self.r_mat = Tensor::param(&[new_rank, self.m], r)?;
        self.rank = new_rank;
        self.decayed.clear();
        Ok(())
    }

    /// Re-run SVD on the current product and re-split at the current rank so
    /// columns are again ordered by singular value.
    pub fn refactorize(&mut self) -> Result<()> {
        if self.rank == 0 {
            return Ok(());
        }
        let (l, r) = split_factors(&self.product(), self.n, self.m, self.rank)?;
        self.l = Tensor::param(&[self.n, self.rank], l)?;
        self.r_mat = Tensor::param(&[self.rank, self.m], r)?;
        Ok(())
    }

    /// Phase boundary: truncate at u = 0, optionally refactorize, reset u and
    /// choose the next decayed set. Returns the new rank.
    pub fn advance_phase(&mut self) -> Result<usize> {
        self.truncate()?;
        if self.refactorize_on {
            self.refactorize()?;
        }
        self.phase += 1;
        self.u = 1.0;
        self.pick_decayed();
        Ok(self.rank)
    }

    pub fn is_eliminated(&self) -> bool {
        self.rank == 0
    }
}

/// Dense-correction baselines the schedule is compared against.
#[derive(Debug, Clone)]
pub enum DecayBaselineState<S: Scalar> {
    Sparse {
        w_phi: Tensor<S>,
        frozen: Vec<bool>,
        /// Cumulative fraction of entries zeroed so far.
        ratio: f64,
        phase: usize,
    },
    ResidualQuant {
        /// Q₄(W_Φ), Q₄(E₁), Q₄(E₂), Q₄(E₃); decayed in reverse order.
        terms: [Tensor<S>; 4],
        /// Annealing factor of the term currently being decayed.
        u: f64,
        phase: usize,
        /// Final-level quantization scale (per-tensor), for the error bound.
        final_scale: S,
    },
}

impl<S: Scalar> DecayBaselineState<S> {
    /// Parameters the optimizer should update under this strategy.
    pub fn trainable(&self) -> Vec<Tensor<S>> {
        match self {
            DecayBaselineState::Sparse { w_phi, .. } => vec![w_phi.clone()],
            DecayBaselineState::ResidualQuant { terms, phase, .. } => terms
                .iter()
                .enumerate()
                .filter(|(level, _)| 3 - level >= *phase)
                .map(|(_, t)| t.clone())
                .collect(),
        }
    }

    /// True once the correction is identically zero for the rest of the run.
    pub fn is_spent(&self) -> bool {
        match self {
            DecayBaselineState::Sparse { ratio, .. } => *ratio >= 1.0,
            DecayBaselineState::ResidualQuant { phase, .. } => *phase >= 4,
        }
    }
}

pub fn sparse_decay_init<S: Scalar>(w_phi: &[S], n: usize, m: usize) -> Result<DecayBaselineState<S>> {
    Ok(DecayBaselineState::Sparse {
        w_phi: Tensor::param(&[n, m], w_phi.to_vec())?,
        frozen: vec![false; n * m],
        ratio: 0.0,
        phase: 0,
    })
}

pub const SPARSE_RATIOS: [f64; 6] = [0.50, 0.75, 0.875, 0.9375, 0.96875, 1.0];

/// At a phase boundary, zero-and-freeze the smallest-magnitude live entries
/// until the cumulative ratio hits the next point of the 50% → … → 100% run.
pub fn sparse_decay_step<S: Scalar>(state: &mut DecayBaselineState<S>) -> Result<()> {
    let DecayBaselineState::Sparse {
        w_phi,
        frozen,
        ratio,
        phase,
    } = state
    else {
        return Err(Error::invalid("sparse_decay_step on a non-sparse strategy"));
    };
    if *phase >= SPARSE_RATIOS.len() {
        return Err(Error::invalid("sparse decay already complete"));
    }
    let total = frozen.len();
    let target = SPARSE_RATIOS[*phase];
    // Ties broken by index so the schedule is deterministic.
    let mut live: Vec<usize> = (0..total).filter(|&i| !frozen[i]).collect();
    let data = w_phi.data();
    live.sort_by(|&a, &b| {
        data[a]
            .abs()
            .partial_cmp(&data[b].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    let want_frozen = (target * total as f64).round() as usize;
    let already = total - live.len();
    let add = want_frozen.saturating_sub(already);
    w_phi.update_data(|d| {
        for &i in live.iter().take(add) {
            d[i] = S::zero();
        }
    });
    for &i in live.iter().take(add) {
        frozen[i] = true;
    }
    *ratio = target;
    *phase += 1;
    Ok(())
}

/// Re-zero frozen entries after an optimizer step; the mask is a hard freeze.
pub fn sparse_apply_mask<S: Scalar>(state: &DecayBaselineState<S>) -> Result<()> {
    let DecayBaselineState::Sparse { w_phi, frozen, .. } = state else {
        return Err(Error::invalid("sparse_apply_mask on a non-sparse strategy"));
    };
    w_phi.update_data(|d| {
        for (v, &f) in d.iter_mut().zip(frozen) {
            if f {
                *v = S::zero();
            }
        }
    });
    Ok(())
}

/// Additive 4-bit decomposition: W_Φ ≈ Q₄(W_Φ) + Q₄(E₁) + Q₄(E₂) + Q₄(E₃),
/// each residual quantizing what the previous levels missed.
pub fn resq_decay_init<S: Scalar>(w_phi: &[S], n: usize, m: usize) -> Result<DecayBaselineState<S>> {
    let mut remainder = w_phi.to_vec();
    let mut terms = Vec::with_capacity(4);
    let mut final_scale = S::c(crate::quantizer::SCALE_FLOOR);
    for _ in 0..4 {
        let spec = compute_qparams(&remainder, &[n, m], 4, Granularity::PerTensor)?;
        let q = fake_quantize_data(&remainder, &[n, m], &spec)?;
        for (rem, &qv) in remainder.iter_mut().zip(&q) {
            *rem -= qv;
        }
        final_scale = spec.scales[0];
        terms.push(Tensor::param(&[n, m], q)?);
    }
    let [q0, q1, q2, q3]: [Tensor<S>; 4] = terms.try_into().unwrap();
    Ok(DecayBaselineState::ResidualQuant {
        terms: [q0, q1, q2, q3],
        u: 1.0,
        phase: 0,
        final_scale,
    })
}

/// Graph form of the residual-quant correction: the same weighting as
/// [`resq_correction`], but built from tensor ops so gradients reach the
/// live terms.
pub fn resq_correction_graph<S: Scalar>(state: &DecayBaselineState<S>) -> Result<Option<Tensor<S>>> {
    let DecayBaselineState::ResidualQuant { terms, u, phase, .. } = state else {
        return Err(Error::invalid("resq_correction_graph on a non-residual strategy"));
    };
    let mut acc: Option<Tensor<S>> = None;
    for (level, t) in terms.iter().enumerate() {
        let decay_phase = 3 - level;
        if decay_phase < *phase {
            continue;
        }
        let term = if decay_phase == *phase {
            t.scale(S::c(*u))
        } else {
            t.clone()
        };
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    Ok(acc)
}

/// Current dense correction under the residual-quant schedule: fully decayed
/// terms contribute nothing, the active term is scaled by u, the rest pass
/// through. Terms decay in the order E₃, E₂, E₁, Q₄(W_Φ).
pub fn resq_correction<S: Scalar>(state: &DecayBaselineState<S>) -> Result<Vec<S>> {
    let DecayBaselineState::ResidualQuant { terms, u, phase, .. } = state else {
        return Err(Error::invalid("resq_correction on a non-residual strategy"));
    };
    let numel = terms[0].numel();
    let mut out = vec![S::zero(); numel];
    for (level, t) in terms.iter().enumerate() {
        // level 3 = E₃ decays in phase 0, …, level 0 = Q₄(W_Φ) in phase 3
        let decay_phase = 3 - level;
        let factor = if decay_phase < *phase {
            continue;
        } else if decay_phase == *phase {
            S::c(*u)
        } else {
            S::one()
        };
        t.with_data(|d| {
            for (o, &v) in out.iter_mut().zip(d) {
                *o += factor * v;
            }
        });
    }
    Ok(out)
}

pub fn resq_set_u<S: Scalar>(state: &mut DecayBaselineState<S>, new_u: f64) -> Result<()> {
    let DecayBaselineState::ResidualQuant { u, .. } = state else {
        return Err(Error::invalid("resq_set_u on a non-residual strategy"));
    };
    *u = new_u;
    Ok(())
}

pub fn resq_advance_phase<S: Scalar>(state: &mut DecayBaselineState<S>) -> Result<()> {
    let DecayBaselineState::ResidualQuant { u, phase, .. } = state else {
        return Err(Error::invalid("resq_advance_phase on a non-residual strategy"));
    };
    if *u != 0.0 {
        return Err(Error::invalid("resq phase advanced before u reached 0"));
    }
    *phase += 1;
    *u = 1.0;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::svd::frobenius;

    fn rel_frob(a: &[f64], b: &[f64]) -> f64 {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let denom = frobenius(b).max(1e-300);
        frobenius(&diff) / denom
    }

    fn per_tensor_spec(bits: u32, scale: f64, zero: i64) -> QuantSpec<f64> {
        QuantSpec {
            bits,
            granularity: Granularity::PerTensor,
            scales: vec![scale],
            zeros: vec![zero],
            learnable: false,
        }
    }

    #[test]
    fn anneal_endpoints_and_midpoints() {
        for tag in AnnealTag::ALL {
            assert_eq!(anneal_u(0, 10, tag).unwrap(), 1.0, "{tag:?} start");
            assert_eq!(anneal_u(10, 10, tag).unwrap(), 0.0, "{tag:?} end");
            let mut prev = 1.0;
            for s in 1..=10 {
                let u = anneal_u(s, 10, tag).unwrap();
                assert!(u <= prev + 1e-15, "{tag:?} not monotone at {s}");
                prev = u;
            }
        }
        assert!((anneal_u(5, 10, AnnealTag::Cosine).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(anneal_u(3, 4, AnnealTag::Linear).unwrap(), 0.25);
        assert!(anneal_u(0, 0, AnnealTag::Cosine).is_err());
    }

    #[test]
    fn gamma_hand_case() {
        let g: Vec<f64> = gamma(2, 4, 0.5, 0.25).unwrap();
        assert_eq!(g, vec![1.0, 1.0, 0.25, 0.25, 1.0, 1.0, 0.25, 0.25]);
        let ones: Vec<f64> = gamma(3, 2, 0.5, 1.0).unwrap();
        assert_eq!(ones, vec![1.0; 6]);
        let empty: Vec<f64> = gamma(3, 0, 0.5, 0.3).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn kept_columns_arithmetic() {
        assert_eq!(kept_columns(32, 0.5), 16);
        assert_eq!(kept_columns(4, 0.25), 3);
        // final-phase rule: r < 1/λ anneals everything
        assert_eq!(kept_columns(1, 0.5), 0);
        assert_eq!(kept_columns(0, 0.5), 0);
    }

    #[test]
    fn init_phi_zero_error_gives_zero_factors() {
        let spec = per_tensor_spec(2, 1.0, 1);
        // values already on the grid
        let w = vec![-1.0, 0.0, 1.0, 2.0];
        let st = init_phi(&w, 2, 2, &spec, 2, 0.5).unwrap();
        assert_eq!(st.l.data(), vec![0.0; 4]);
        assert_eq!(st.r_mat.data(), vec![0.0; 4]);
    }

    #[test]
    fn init_phi_full_rank_reconstructs_error() {
        let mut rng = Rng::new(5);
        let w: Vec<f64> = rng.uniform_vec(6 * 4, -1.0, 1.0);
        let spec = compute_qparams(&w, &[6, 4], 4, Granularity::PerChannel).unwrap();
        let qw = fake_quantize_data(&w, &[6, 4], &spec).unwrap();
        let e: Vec<f64> = w.iter().zip(&qw).map(|(a, b)| a - b).collect();
        let st = init_phi(&w, 6, 4, &spec, 4, 0.5).unwrap();
        assert!(rel_frob(&st.product(), &e) < 1e-9);
    }

    #[test]
    fn init_phi_matches_eckart_young_on_small_integers() {
        let e = vec![1.0, -1.0, 0.0, 1.0, 0.0, 1.0, -1.0, 0.0, 1.0, 1.0, 1.0, -1.0, 0.0, 0.0, 1.0, -1.0];
        // feed E directly by putting W = E on a grid-spec whose Q(W) = 0
        let spec = per_tensor_spec(8, 1000.0, 0);
        let st = init_phi(&e, 4, 4, &spec, 2, 0.5).unwrap();
        let got: Vec<f64> = e.iter().zip(&st.product()).map(|(a, b)| a - b).collect();
        let best = {
            let svd = svd_raw(&e, 4, 4).unwrap();
            let rec = svd.reconstruct(2);
            let diff: Vec<f64> = e.iter().zip(&rec).map(|(a, b)| a - b).collect();
            frobenius(&diff)
        };
        assert!((frobenius(&got) - best).abs() < 1e-9);
    }

    #[test]
    fn init_phi_rejects_oversized_rank() {
        let spec = per_tensor_spec(4, 1.0, 0);
        assert!(init_phi(&[1.0; 6], 2, 3, &spec, 3, 0.5).is_err());
    }

    fn random_state(seed: u64, n: usize, m: usize, r0: usize) -> AuxState<f64> {
        let mut rng = Rng::new(seed);
        let w: Vec<f64> = rng.uniform_vec(n * m, -1.0, 1.0);
        let spec = compute_qparams(&w, &[n, m], 4, Granularity::PerChannel).unwrap();
        init_phi(&w, n, m, &spec, r0, 0.5)
            .unwrap()
            .with_schedule(8, AnnealTag::Cosine, GammaOrder::Trailing, true, seed)
            .unwrap()
    }

    #[test]
    fn forward_aux_boundary_cases() {
        let mut st = random_state(7, 6, 5, 4);
        let qx = Tensor::from_vec(&[5, 3], Rng::new(9).uniform_vec(15, -1.0, 1.0)).unwrap();
        // u = 1: equals plain L·R·Qx
        let with_mask = st.forward_aux(&qx).unwrap().data();
        let plain = st.l.matmul(&st.r_mat.matmul(&qx).unwrap()).unwrap().data();
        for (a, b) in with_mask.iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
        // rank 0: exact zero
        st.rank = 0;
        st.l = Tensor::param(&[6, 0], vec![]).unwrap();
        st.r_mat = Tensor::param(&[0, 5], vec![]).unwrap();
        st.decayed.clear();
        assert_eq!(st.forward_aux(&qx).unwrap().data(), vec![0.0; 18]);
        // dimension mismatch rejected
        let bad = Tensor::from_vec(&[4, 3], vec![0.0; 12]).unwrap();
        assert!(st.forward_aux(&bad).is_err());
    }

    #[test]
    fn continuity_across_truncation() {
        let mut st = random_state(11, 8, 6, 4);
        let qx = Tensor::from_vec(&[6, 2], Rng::new(2).uniform_vec(12, -1.0, 1.0)).unwrap();
        st.u = 0.0;
        let before = st.forward_aux(&qx).unwrap().data();
        st.truncate().unwrap();
        assert_eq!(st.rank, 2);
        let after = st.forward_aux(&qx).unwrap().data();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn truncate_mid_phase_rejected() {
        let mut st = random_state(13, 4, 4, 2);
        st.u = 0.5;
        assert!(st.truncate().is_err());
    }

    #[test]
    fn phase_log_for_default_schedule() {
        let mut st = random_state(17, 36, 36, 32);
        let mut log = vec![st.rank];
        while st.rank > 0 {
            st.u = 0.0;
            st.advance_phase().unwrap();
            log.push(st.rank);
        }
        assert_eq!(log, vec![32, 16, 8, 4, 2, 1, 0]);
    }

    #[test]
    fn refactorize_preserves_product_and_restores_order() {
        let mut st = random_state(19, 8, 7, 4);
        // perturb the factors as training would
        let mut rng = Rng::new(23);
        st.l.update_data(|d| {
            for v in d.iter_mut() {
                *v += 0.05 * rng.normal();
            }
        });
        st.r_mat.update_data(|d| {
            for v in d.iter_mut() {
                *v += 0.05 * rng.normal();
            }
        });
        let before = st.product();
        st.refactorize().unwrap();
        assert!(rel_frob(&st.product(), &before) < 1e-9);
        // columns ordered by singular value again: ‖L col s‖² nonincreasing
        let ld = st.l.data();
        let mut prev = f64::INFINITY;
        for s in 0..st.rank {
            let norm2: f64 = (0..st.n).map(|i| ld[i * st.rank + s].powi(2)).sum();
            assert!(norm2 <= prev + 1e-12);
            prev = norm2;
        }
    }

    #[test]
    fn gamma_orders_pick_different_columns() {
        let st_t = random_state(29, 6, 6, 4);
        assert_eq!(st_t.decayed, vec![2, 3]);
        let st_l = random_state(29, 6, 6, 4)
            .with_schedule(8, AnnealTag::Cosine, GammaOrder::Leading, true, 29)
            .unwrap();
        assert_eq!(st_l.decayed, vec![0, 1]);
        let st_r = random_state(29, 6, 6, 4)
            .with_schedule(8, AnnealTag::Cosine, GammaOrder::Random, true, 29)
            .unwrap();
        assert_eq!(st_r.decayed.len(), 2);
        // deterministic under the same seed
        let st_r2 = random_state(29, 6, 6, 4)
            .with_schedule(8, AnnealTag::Cosine, GammaOrder::Random, true, 29)
            .unwrap();
        assert_eq!(st_r.decayed, st_r2.decayed);
    }

    #[test]
    fn gradients_flow_to_both_factors() {
        let st = random_state(31, 4, 4, 2);
        let qx = Tensor::from_vec(&[4, 2], Rng::new(3).uniform_vec(8, -1.0, 1.0)).unwrap();
        let loss = st.forward_aux(&qx).unwrap().square().unwrap().sum();
        loss.backward().unwrap();
        assert!(st.l.grad().is_some());
        assert!(st.r_mat.grad().is_some());
    }

    #[test]
    fn sparse_decay_exact_ratios() {
        let mut rng = Rng::new(37);
        let w: Vec<f64> = rng.uniform_vec(100, -1.0, 1.0);
        let mut st = sparse_decay_init(&w, 10, 10).unwrap();
        let expect_zeroed = [50usize, 75, 88, 94, 97, 100];
        for (p, &want) in expect_zeroed.iter().enumerate() {
            sparse_decay_step(&mut st).unwrap();
            let DecayBaselineState::Sparse { w_phi, frozen, ratio, .. } = &st else {
                unreachable!()
            };
            let zeroed = frozen.iter().filter(|&&f| f).count();
            assert_eq!(zeroed, want, "phase {}", p + 1);
            assert!((*ratio - SPARSE_RATIOS[p]).abs() < 1e-12);
            // frozen entries are exactly zero
            let d = w_phi.data();
            for (i, &f) in frozen.iter().enumerate() {
                if f {
                    assert_eq!(d[i], 0.0);
                }
            }
        }
        let DecayBaselineState::Sparse { w_phi, .. } = &st else { unreachable!() };
        assert_eq!(w_phi.data(), vec![0.0; 100]);
        assert!(sparse_decay_step(&mut st).is_err());
    }

    #[test]
    fn sparse_phase_one_zeros_smallest_half() {
        let w: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let mut st = sparse_decay_init(&w, 2, 5).unwrap();
        sparse_decay_step(&mut st).unwrap();
        let DecayBaselineState::Sparse { w_phi, .. } = &st else { unreachable!() };
        assert_eq!(
            w_phi.data(),
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 6.0, 7.0, 8.0, 9.0, 10.0]
        );
    }

    #[test]
    fn resq_decomposition_bound_and_decay() {
        let mut rng = Rng::new(41);
        let w: Vec<f64> = rng.uniform_vec(64, -1.0, 1.0);
        let mut st = resq_decay_init(&w, 8, 8).unwrap();
        let DecayBaselineState::ResidualQuant { final_scale, .. } = &st else {
            unreachable!()
        };
        let bound = final_scale / 2.0 + 1e-12;
        let sum = resq_correction(&st).unwrap();
        for (a, b) in w.iter().zip(&sum) {
            assert!((a - b).abs() <= bound, "{a} vs {b} (bound {bound})");
        }
        // decay E₃ fully: remaining three terms only
        resq_set_u(&mut st, 0.0).unwrap();
        let three = resq_correction(&st).unwrap();
        resq_advance_phase(&mut st).unwrap();
        let after = resq_correction(&st).unwrap();
        assert_eq!(three, after);
        // complete all four phases → zero correction
        for _ in 0..3 {
            resq_set_u(&mut st, 0.0).unwrap();
            resq_advance_phase(&mut st).unwrap();
        }
        assert_eq!(resq_correction(&st).unwrap(), vec![0.0; 64]);
    }

    #[test]
    fn resq_zero_input_gives_zero_terms() {
        let st = resq_decay_init(&[0.0; 16], 4, 4).unwrap();
        assert_eq!(resq_correction(&st).unwrap(), vec![0.0; 16]);
    }

    #[test]
    fn strategy_tag_mismatch_rejected() {
        let mut sp = sparse_decay_init(&[1.0; 4], 2, 2).unwrap();
        assert!(resq_correction(&sp).is_err());
        assert!(resq_set_u(&mut sp, 0.0).is_err());
        let mut rq = resq_decay_init(&[1.0; 4], 2, 2).unwrap();
        assert!(sparse_decay_step(&mut rq).is_err());
        assert!(sparse_apply_mask(&rq).is_err());
    }

    #[test]
    fn unknown_tags_rejected() {
        assert!("triangle".parse::<AnnealTag>().is_err());
        assert!("cosine".parse::<AnnealTag>().is_ok());
        assert!("sideways".parse::<GammaOrder>().is_err());
    }
}
