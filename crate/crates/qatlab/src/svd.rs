//! Small-matrix singular value decomposition via one-sided Jacobi rotations.
//!
//! Matrices here stay at a few hundred per side, so a robust Jacobi sweep
//! beats anything faster. Convergence threshold is 1e-12 on the normalized
//! off-diagonal mass.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{transpose_raw, Tensor};

const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone)]
pub struct SvdResult<S: Scalar> {
    /// n x d, column-orthonormal.
    pub left: Vec<S>,
    /// d nonincreasing nonnegative values.
    pub singulars: Vec<S>,
    /// d x m, row-orthonormal.
    pub right_t: Vec<S>,
    pub n: usize,
    pub m: usize,
}

impl<S: Scalar> SvdResult<S> {
    pub fn d(&self) -> usize {
        self.singulars.len()
    }

    /// U · diag(σ) · Vᵀ, optionally truncated to the top `rank` components.
    pub fn reconstruct(&self, rank: usize) -> Vec<S> {
        let (n, m, d) = (self.n, self.m, self.d());
        let r = rank.min(d);
        let mut out = vec![S::zero(); n * m];
        for s in 0..r {
            let sv = self.singulars[s];
            for i in 0..n {
                let c = self.left[i * d + s] * sv;
                for j in 0..m {
                    out[i * m + j] += c * self.right_t[s * m + j];
                }
            }
        }
        out
    }
}

/// Full SVD of an n x m matrix given as a row-major slice.
pub fn svd_raw<S: Scalar>(mat: &[S], n: usize, m: usize) -> Result<SvdResult<S>> {
    if n == 0 || m == 0 {
        return Err(Error::invalid("svd requires min(n, m) >= 1"));
    }
    if mat.len() != n * m {
        return Err(Error::invalid(format!(
            "svd: data length {} != {n}x{m}",
            mat.len()
        )));
    }
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("svd"));
    }

    // One-sided Jacobi wants rows >= cols; transpose and swap factors if not.
    if n < m {
        let t = transpose_raw(mat, n, m);
        let r = jacobi_tall(&t, m, n)?;
        let d = n;
        // Mᵀ = U' Σ V'ᵀ  ⇒  M = V' Σ U'ᵀ.
        let left = r.v; // n x d (V' is d x d with d = n)
        let right_t = transpose_raw(&r.u, m, d); // d x m
        return Ok(finish(left, r.sigma, right_t, n, m));
    }
    let r = jacobi_tall(mat, n, m)?;
    let vt = r.v_t();
    Ok(finish(r.u, r.sigma, vt, n, m))
}

pub fn svd<S: Scalar>(mat: &Tensor<S>) -> Result<SvdResult<S>> {
    let shape = mat.shape();
    if shape.len() != 2 {
        return Err(Error::invalid(format!("svd expects a matrix, got {shape:?}")));
    }
    mat.with_data(|d| svd_raw(d, shape[0], shape[1]))
}

struct JacobiOut<S: Scalar> {
    u: Vec<S>,     // n x m, column-orthonormal
    sigma: Vec<S>, // m
    v: Vec<S>,     // m x m, orthogonal
    m: usize,
}

impl<S: Scalar> JacobiOut<S> {
    fn v_t(&self) -> Vec<S> {
        transpose_raw(&self.v, self.m, self.m)
    }
}

/// One-sided Jacobi on A with n >= m: orthogonalize the columns of A by
/// plane rotations, accumulating them into V. Then A = U Σ Vᵀ with
/// σ_j = ‖A[:,j]‖ and U the normalized columns.
fn jacobi_tall<S: Scalar>(mat: &[S], n: usize, m: usize) -> Result<JacobiOut<S>> {
    let mut a = mat.to_vec();
    let mut v = vec![S::zero(); m * m];
    for j in 0..m {
        v[j * m + j] = S::one();
    }
    let tol = S::c(JACOBI_TOL);

    for _sweep in 0..MAX_SWEEPS {
        let mut off = S::zero();
        for p in 0..m {
            for q in (p + 1)..m {
                let mut app = S::zero();
                let mut aqq = S::zero();
                let mut apq = S::zero();
                for i in 0..n {
                    let x = a[i * m + p];
                    let y = a[i * m + q];
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                let denom = (app * aqq).sqrt();
                if denom == S::zero() {
                    continue;
                }
                let ratio = apq.abs() / denom;
                if ratio > off {
                    off = ratio;
                }
                if ratio <= tol {
                    continue;
                }
                let zeta = (aqq - app) / (S::c(2.0) * apq);
                let t = {
                    let sign = if zeta >= S::zero() { S::one() } else { -S::one() };
                    sign / (zeta.abs() + (S::one() + zeta * zeta).sqrt())
                };
                let c = S::one() / (S::one() + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let x = a[i * m + p];
                    let y = a[i * m + q];
                    a[i * m + p] = c * x - s * y;
                    a[i * m + q] = s * x + c * y;
                }
                for i in 0..m {
                    let x = v[i * m + p];
                    let y = v[i * m + q];
                    v[i * m + p] = c * x - s * y;
                    v[i * m + q] = s * x + c * y;
                }
            }
        }
        if off <= tol {
            break;
        }
    }

    let mut sigma = vec![S::zero(); m];
    let mut u = vec![S::zero(); n * m];
    for j in 0..m {
        let mut norm = S::zero();
        for i in 0..n {
            norm += a[i * m + j] * a[i * m + j];
        }
        let norm = norm.sqrt();
        sigma[j] = norm;
        if norm > S::zero() {
            for i in 0..n {
                u[i * m + j] = a[i * m + j] / norm;
            }
        }
    }
    complete_dead_columns(&mut u, &sigma, n, m);
    Ok(JacobiOut { u, sigma, v, m })
}

/// Replace numerically dead columns of a column-orthonormal factor with an
/// orthonormal completion, so UᵀU = I holds even for rank-deficient inputs.
/// The associated σ stay as computed (at most ~1e-13·σ₁), so reconstruction
/// is unaffected.
fn complete_dead_columns<S: Scalar>(u: &mut [S], sigma: &[S], n: usize, m: usize) {
    let sigma_max = sigma.iter().cloned().fold(S::zero(), S::max);
    let dead_tol = sigma_max * S::c(1e-13);
    for s in 0..m {
        if sigma[s] > dead_tol {
            continue;
        }
        'cand: for cand in 0..n {
            let mut col = vec![S::zero(); n];
            col[cand] = S::one();
            for prev in 0..m {
                if prev == s || (prev > s && sigma[prev] <= dead_tol) {
                    continue;
                }
                let mut dot = S::zero();
                for i in 0..n {
                    dot += col[i] * u[i * m + prev];
                }
                for i in 0..n {
                    col[i] -= dot * u[i * m + prev];
                }
            }
            let norm = col.iter().map(|&x| x * x).sum::<S>().sqrt();
            if norm.to_f64_lossy() > 0.5 {
                for i in 0..n {
                    u[i * m + s] = col[i] / norm;
                }
                break 'cand;
            }
        }
    }
}

fn finish<S: Scalar>(
    mut left: Vec<S>,
    mut sigma: Vec<S>,
    mut right_t: Vec<S>,
    n: usize,
    m: usize,
) -> SvdResult<S> {
    let d = sigma.len();

    // Stable descending sort by singular value.
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| sigma[b].partial_cmp(&sigma[a]).unwrap());
    let old_left = left.clone();
    let old_sigma = sigma.clone();
    let old_right = right_t.clone();
    for (new_s, &old_s) in idx.iter().enumerate() {
        sigma[new_s] = old_sigma[old_s];
        for i in 0..n {
            left[i * d + new_s] = old_left[i * d + old_s];
        }
        for j in 0..m {
            right_t[new_s * m + j] = old_right[old_s * m + j];
        }
    }

    // Sign convention: largest-magnitude entry of each left vector nonnegative.
    for s in 0..d {
        let mut best = 0usize;
        let mut best_abs = S::zero();
        for i in 0..n {
            let a = left[i * d + s].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if left[best * d + s] < S::zero() {
            for i in 0..n {
                left[i * d + s] = -left[i * d + s];
            }
            for j in 0..m {
                right_t[s * m + j] = -right_t[s * m + j];
            }
        }
    }

    SvdResult {
        left,
        singulars: sigma,
        right_t,
        n,
        m,
    }
}

pub fn frobenius<S: Scalar>(a: &[S]) -> S {
    a.iter().map(|&x| x * x).sum::<S>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn check_invariants(mat: &[f64], n: usize, m: usize, r: &SvdResult<f64>) {
        let d = r.d();
        assert_eq!(d, n.min(m));
        for s in 1..d {
            assert!(r.singulars[s - 1] >= r.singulars[s], "ordering");
            assert!(r.singulars[s] >= 0.0);
        }
        // UᵀU = I
        for s1 in 0..d {
            for s2 in 0..d {
                let mut dot = 0.0;
                for i in 0..n {
                    dot += r.left[i * d + s1] * r.left[i * d + s2];
                }
                let expect = if s1 == s2 { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() <= 1e-10, "UᵀU[{s1},{s2}] = {dot}");
            }
        }
        // V Vᵀ = I (rows of right_t orthonormal)
        for s1 in 0..d {
            for s2 in 0..d {
                let mut dot = 0.0;
                for j in 0..m {
                    dot += r.right_t[s1 * m + j] * r.right_t[s2 * m + j];
                }
                let expect = if s1 == s2 { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() <= 1e-10, "VVᵀ[{s1},{s2}] = {dot}");
            }
        }
        let rec = r.reconstruct(d);
        let diff: Vec<f64> = rec.iter().zip(mat).map(|(a, b)| a - b).collect();
        let denom = frobenius(mat).max(1e-300);
        assert!(
            frobenius(&diff) / denom <= 1e-9 || frobenius(mat) == 0.0,
            "reconstruction error {}",
            frobenius(&diff) / denom
        );
    }

    #[test]
    fn identity_has_unit_singulars() {
        let i3 = Tensor::<f64>::eye(3);
        let r = svd(&i3).unwrap();
        for s in 0..3 {
            assert!((r.singulars[s] - 1.0).abs() <= 1e-12);
        }
        i3.with_data(|d| check_invariants(d, 3, 3, &r));
    }

    #[test]
    fn rank_one_outer_product() {
        // ‖a‖ = 2, ‖b‖ = 3 → σ₁ = 6 for a·bᵀ.
        let a = [2.0 / 3.0_f64.sqrt(); 3];
        let b = [3.0 / 2.0_f64.sqrt(), 0.0, 3.0 / 2.0_f64.sqrt(), 0.0];
        let mut m = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                m[i * 4 + j] = a[i] * b[j];
            }
        }
        let r = svd_raw(&m, 3, 4).unwrap();
        assert!((r.singulars[0] - 6.0).abs() <= 1e-9, "σ1 = {}", r.singulars[0]);
        for s in 1..r.d() {
            assert!(r.singulars[s] <= 1e-10);
        }
        check_invariants(&m, 3, 4, &r);
    }

    #[test]
    fn zero_matrix_still_orthonormal() {
        let r = svd_raw(&vec![0.0_f64; 12], 4, 3).unwrap();
        check_invariants(&vec![0.0; 12], 4, 3, &r);
        assert!(r.singulars.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn random_shapes_reconstruct() {
        let mut rng = Rng::new(5);
        for &(n, m) in &[(4usize, 4usize), (16, 32), (64, 64), (3, 7), (7, 3)] {
            let mat: Vec<f64> = rng.uniform_vec(n * m, -2.0, 2.0);
            let r = svd_raw(&mat, n, m).unwrap();
            check_invariants(&mat, n, m, &r);
        }
    }

    #[test]
    fn nonfinite_rejected() {
        let m = vec![1.0, f64::NAN, 0.0, 1.0];
        assert!(svd_raw(&m, 2, 2).is_err());
    }

    #[test]
    fn truncation_matches_exhaustive_component_subsets() {
        // Eckart–Young on small integer matrices: keeping the top-k
        // components is at least as good as any other k-subset.
        let mut rng = Rng::new(17);
        for _ in 0..50 {
            let mat: Vec<f64> = (0..16).map(|_| (rng.below(3) as f64) - 1.0).collect();
            let r = svd_raw(&mat, 4, 4).unwrap();
            for k in 1..4usize {
                let top = r.reconstruct(k);
                let err_top = {
                    let diff: Vec<f64> = top.iter().zip(&mat).map(|(a, b)| a - b).collect();
                    frobenius(&diff)
                };
                // every k-subset of the 4 components
                for subset in 0u32..16 {
                    if subset.count_ones() as usize != k {
                        continue;
                    }
                    let mut rec = vec![0.0; 16];
                    for s in 0..4 {
                        if subset & (1 << s) == 0 {
                            continue;
                        }
                        for i in 0..4 {
                            for j in 0..4 {
                                rec[i * 4 + j] +=
                                    r.singulars[s] * r.left[i * 4 + s] * r.right_t[s * 4 + j];
                            }
                        }
                    }
                    let diff: Vec<f64> = rec.iter().zip(&mat).map(|(a, b)| a - b).collect();
                    assert!(err_top <= frobenius(&diff) + 1e-9);
                }
            }
        }
    }

    #[test]
    fn determinism_same_input_same_output() {
        let mut rng = Rng::new(9);
        let mat: Vec<f64> = rng.uniform_vec(64, -1.0, 1.0);
        let r1 = svd_raw(&mat, 8, 8).unwrap();
        let r2 = svd_raw(&mat, 8, 8).unwrap();
        assert_eq!(r1.left, r2.left);
        assert_eq!(r1.singulars, r2.singulars);
        assert_eq!(r1.right_t, r2.right_t);
    }
}
