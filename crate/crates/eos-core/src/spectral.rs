//! Matrix-free estimation of the leading Hessian eigenvalue λ₁ and the
//! quadratic divergence threshold it is measured against.
//!
//! Lanczos is used rather than power iteration because the training-loss
//! Hessian can be indefinite: power iteration converges to the largest
//! *magnitude* eigenvalue, which is the wrong answer when a negative
//! outlier dominates. The tridiagonal eigenproblem is solved by Sturm
//! bisection so the estimator has no dependency on an external eigensolver
//! (the test oracle uses one — routes stay independent).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
    #[error("momentum beta must be in [0, 1), got {0}")]
    BadBeta(f64),
    #[error("operator produced non-finite values at Lanczos iteration {iteration}")]
    NonFiniteOperator { iteration: usize },
    #[error("empty eigenvalue series")]
    EmptySeries,
    #[error("operator dimension must be positive")]
    ZeroDim,
}

/// λ₁ estimate at a given training step.
#[derive(Debug, Clone, Copy)]
pub struct SpectralEstimate {
    pub lambda1: f64,
    /// ‖H·u − λ₁·u‖ for the unit Ritz vector u.
    pub residual_norm: f64,
    pub iterations: usize,
    pub loss_value: f32,
    pub step_index: u64,
}

/// The quadratic divergence threshold (2+2β)/η of heavy-ball gradient
/// descent; β = 0 reduces to plain gradient descent's 2/η.
pub fn divergence_threshold(eta: f64, beta: f64) -> Result<f64, SpectralError> {
    if !(eta > 0.0) {
        return Err(SpectralError::BadLearningRate(eta));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(SpectralError::BadBeta(beta));
    }
    Ok((2.0 + 2.0 * beta) / eta)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Number of eigenvalues of the symmetric tridiagonal (alpha, beta) that
/// are strictly below `x`, via the Sturm sequence of LDLᵀ pivots.
fn sturm_count(alpha: &[f64], beta: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut d = 1.0f64;
    for (i, &a) in alpha.iter().enumerate() {
        let off = if i == 0 { 0.0 } else { beta[i - 1] * beta[i - 1] };
        d = a - x - off / d;
        if d == 0.0 {
            d = -f64::EPSILON * (x.abs() + 1.0);
        }
        if d < 0.0 {
            count += 1;
        }
    }
    count
}

/// Largest (algebraic) eigenvalue of the symmetric tridiagonal matrix.
fn tridiag_max_eigenvalue(alpha: &[f64], beta: &[f64]) -> f64 {
    let k = alpha.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..k {
        let r = if i == 0 { 0.0 } else { beta[i - 1].abs() }
            + if i + 1 < k { beta[i].abs() } else { 0.0 };
        lo = lo.min(alpha[i] - r);
        hi = hi.max(alpha[i] + r);
    }
    if lo == hi {
        return lo;
    }
    // λ_max = inf { x : all k eigenvalues lie below x }.
    for _ in 0..120 {
        let mid = 0.5 * (lo + hi);
        if sturm_count(alpha, beta, mid) == k {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-14 * hi.abs().max(lo.abs()).max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Eigenvector of the tridiagonal for the eigenvalue nearest `lambda`, by
/// inverse iteration with dense partial-pivot elimination (k is tiny).
fn tridiag_eigenvector(alpha: &[f64], beta: &[f64], lambda: f64) -> Vec<f64> {
    let k = alpha.len();
    let shift = lambda + 1e-10 * (lambda.abs() + 1.0);
    let mut s = vec![1.0 / (k as f64).sqrt(); k];
    for _ in 0..3 {
        // Dense copy of T − shift·I.
        let mut m = vec![0.0f64; k * k];
        for i in 0..k {
            m[i * k + i] = alpha[i] - shift;
            if i + 1 < k {
                m[i * k + i + 1] = beta[i];
                m[(i + 1) * k + i] = beta[i];
            }
        }
        let mut b = s.clone();
        // Gaussian elimination with partial pivoting.
        for col in 0..k {
            let mut piv = col;
            for r in col + 1..k {
                if m[r * k + col].abs() > m[piv * k + col].abs() {
                    piv = r;
                }
            }
            if piv != col {
                for c in 0..k {
                    m.swap(col * k + c, piv * k + c);
                }
                b.swap(col, piv);
            }
            let pval = m[col * k + col];
            let pval = if pval == 0.0 { f64::EPSILON } else { pval };
            for r in col + 1..k {
                let f = m[r * k + col] / pval;
                if f != 0.0 {
                    for c in col..k {
                        m[r * k + c] -= f * m[col * k + c];
                    }
                    b[r] -= f * b[col];
                }
            }
        }
        for r in (0..k).rev() {
            let mut acc = b[r];
            for c in r + 1..k {
                acc -= m[r * k + c] * s[c];
            }
            let pval = m[r * k + r];
            let pval = if pval == 0.0 { f64::EPSILON } else { pval };
            s[r] = acc / pval;
        }
        let n = norm(&s);
        if n == 0.0 || !n.is_finite() {
            s = vec![1.0 / (k as f64).sqrt(); k];
            break;
        }
        for v in &mut s {
            *v /= n;
        }
    }
    s
}

/// Runs `k_iters` Lanczos steps with full reorthogonalization from a seeded
/// random unit start vector and returns the largest algebraic Ritz value
/// with its residual. `apply` is the matrix-vector (HVP) oracle; the batch
/// behind it must stay fixed for the whole estimate.
pub fn leading_eigenvalue<F>(
    dim: usize,
    k_iters: usize,
    seed: u64,
    mut apply: F,
) -> Result<(f64, f64, usize), SpectralError>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    if dim == 0 {
        return Err(SpectralError::ZeroDim);
    }
    let k_iters = k_iters.min(dim).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v0: Vec<f64> = (0..dim)
        .map(|_| {
            // Box-Muller keeps the start direction rotation-agnostic.
            let u1: f64 = rand::Rng::gen_range(&mut rng, f64::EPSILON..1.0);
            let u2: f64 = rand::Rng::gen_range(&mut rng, 0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    let n0 = norm(&v0);
    for v in &mut v0 {
        *v /= n0;
    }

    let mut basis: Vec<Vec<f64>> = vec![v0];
    let mut alpha = Vec::with_capacity(k_iters);
    let mut beta: Vec<f64> = Vec::new();

    for j in 0..k_iters {
        let vj = basis[j].clone();
        let mut w = apply(&vj);
        if w.iter().any(|v| !v.is_finite()) {
            return Err(SpectralError::NonFiniteOperator { iteration: j });
        }
        let a = dot(&w, &vj);
        alpha.push(a);
        for (wi, &vi) in w.iter_mut().zip(&vj) {
            *wi -= a * vi;
        }
        if j > 0 {
            let b_prev = beta[j - 1];
            for (wi, &vi) in w.iter_mut().zip(&basis[j - 1]) {
                *wi -= b_prev * vi;
            }
        }
        // Full reorthogonalization against every stored basis vector.
        for prev in &basis {
            let c = dot(&w, prev);
            for (wi, &vi) in w.iter_mut().zip(prev) {
                *wi -= c * vi;
            }
        }
        let b = norm(&w);
        if j + 1 == k_iters {
            break;
        }
        if b < 1e-12 * alpha.iter().map(|v| v.abs()).fold(1.0, f64::max) {
            // Invariant subspace: the Krylov space is exact already.
            break;
        }
        for wi in &mut w {
            *wi /= b;
        }
        beta.push(b);
        basis.push(w);
    }

    let iterations = alpha.len();
    let lambda = tridiag_max_eigenvalue(&alpha, &beta[..iterations - 1]);
    let s = tridiag_eigenvector(&alpha, &beta[..iterations - 1], lambda);
    let mut u = vec![0.0f64; dim];
    for (sj, vj) in s.iter().zip(&basis) {
        for (ui, &vi) in u.iter_mut().zip(vj) {
            *ui += sj * vi;
        }
    }
    let un = norm(&u);
    if un > 0.0 {
        for ui in &mut u {
            *ui /= un;
        }
    }
    let hu = apply(&u);
    if hu.iter().any(|v| !v.is_finite()) {
        return Err(SpectralError::NonFiniteOperator { iteration: iterations });
    }
    let residual = hu
        .iter()
        .zip(&u)
        .map(|(h, ui)| (h - lambda * ui) * (h - lambda * ui))
        .sum::<f64>()
        .sqrt();
    Ok((lambda, residual, iterations))
}

/// Phase labels for a λ₁ series measured against a threshold T.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Below 0.9·T and locally increasing, before the first crossing.
    Sharpening,
    /// Within [0.75·T, 1.35·T] after the first crossing of 0.9·T.
    Edge,
    /// Above 1.35·T.
    Above,
    Below,
}

#[derive(Debug, Clone)]
pub struct EosSummary {
    pub labels: Vec<Phase>,
    /// Index and step of the first point at or above 0.9·T.
    pub first_crossing: Option<(usize, u64)>,
    /// Fraction of post-crossing points labelled Edge; 0 when no crossing.
    pub edge_fraction: f64,
}

/// Classifies a chronologically ordered (step, λ₁) series. Band constants
/// (0.75 / 0.9 / 1.35 of the threshold) are artifact-defined; the claim
/// they operationalize is qualitative.
pub fn eos_phase(series: &[(u64, f64)], threshold: f64) -> Result<EosSummary, SpectralError> {
    if series.is_empty() {
        return Err(SpectralError::EmptySeries);
    }
    let cross = 0.9 * threshold;
    let band_lo = 0.75 * threshold;
    let band_hi = 1.35 * threshold;
    let first_crossing = series.iter().position(|&(_, l)| l >= cross);
    let mut labels = Vec::with_capacity(series.len());
    for (i, &(_, l)) in series.iter().enumerate() {
        let post = first_crossing.map_or(false, |c| i >= c);
        let label = if post {
            if l > band_hi {
                Phase::Above
            } else if l >= band_lo {
                Phase::Edge
            } else {
                Phase::Below
            }
        } else {
            let increasing = if i == 0 {
                series.len() > 1 && series[1].1 >= series[0].1
            } else {
                l >= series[i - 1].1
            };
            if increasing {
                Phase::Sharpening
            } else {
                Phase::Below
            }
        };
        labels.push(label);
    }
    let edge_fraction = match first_crossing {
        Some(c) => {
            let post = &labels[c..];
            post.iter().filter(|&&p| p == Phase::Edge).count() as f64 / post.len() as f64
        }
        None => 0.0,
    };
    Ok(EosSummary {
        labels,
        first_crossing: first_crossing.map(|c| (c, series[c].0)),
        edge_fraction,
    })
}

/// Dense symmetric matvec closure for quadratic losses ½θᵀAθ.
pub fn dense_matvec(a: Vec<f64>, dim: usize) -> impl FnMut(&[f64]) -> Vec<f64> {
    move |v: &[f64]| {
        (0..dim)
            .map(|i| (0..dim).map(|j| a[i * dim + j] * v[j]).sum())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn threshold_formula() {
        assert_eq!(divergence_threshold(0.01, 0.8).unwrap(), 360.0);
        assert_eq!(divergence_threshold(0.01, 0.0).unwrap(), 200.0);
        assert_eq!(divergence_threshold(2.0, 0.0).unwrap(), 1.0);
        assert!(matches!(divergence_threshold(0.0, 0.5), Err(SpectralError::BadLearningRate(_))));
        assert!(matches!(divergence_threshold(-1.0, 0.5), Err(SpectralError::BadLearningRate(_))));
        assert!(matches!(divergence_threshold(0.1, 1.0), Err(SpectralError::BadBeta(_))));
    }

    #[test]
    fn diagonal_quadratic() {
        let a = vec![3.0, 0.0, 0.0, 1.0];
        let (l, r, _) = leading_eigenvalue(2, 30, 0, dense_matvec(a, 2)).unwrap();
        assert!((l - 3.0).abs() < 1e-6);
        assert!(r < 1e-6);
    }

    #[test]
    fn indefinite_returns_algebraic_max() {
        // Eigenvalues {−5, 2}: the answer is 2, not the dominant −5.
        let a = vec![-5.0, 0.0, 0.0, 2.0];
        let (l, _, _) = leading_eigenvalue(2, 30, 1, dense_matvec(a, 2)).unwrap();
        assert!((l - 2.0).abs() < 1e-6);
    }

    fn random_symmetric(dim: usize, seed: u64, shift: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = vec![0.0f64; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let v = rng.gen_range(-1.0..1.0);
                a[i * dim + j] = v;
                a[j * dim + i] = v;
            }
            a[i * dim + i] += shift;
        }
        a
    }

    #[test]
    fn matches_dense_oracle_on_random_matrices() {
        for seed in 0..6u64 {
            let dim = 50;
            let a = random_symmetric(dim, seed, 0.0);
            let (l, _, _) = leading_eigenvalue(dim, 30, seed + 100, dense_matvec(a.clone(), dim)).unwrap();
            let m = nalgebra::DMatrix::from_row_slice(dim, dim, &a);
            let oracle = m.symmetric_eigen().eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
            assert!(
                (l - oracle).abs() <= 1e-3 * oracle.abs().max(1.0),
                "seed {seed}: {l} vs {oracle}"
            );
        }
    }

    #[test]
    fn monotone_in_iterations_on_psd() {
        // Rayleigh–Ritz: for a fixed start vector the max Ritz value is
        // non-decreasing in the subspace dimension.
        let dim = 40;
        let a = random_symmetric(dim, 3, 8.0);
        let mut prev = f64::MIN;
        for k in [2, 4, 8, 16, 30] {
            let (l, _, _) = leading_eigenvalue(dim, k, 42, dense_matvec(a.clone(), dim)).unwrap();
            assert!(l >= prev - 1e-9, "k={k}: {l} < {prev}");
            prev = l;
        }
    }

    #[test]
    fn seed_invariant_with_spectral_gap() {
        // diag(10, 5, ..) has gap ≫ 0.1·λ₁.
        let dim = 30;
        let mut a = random_symmetric(dim, 9, 0.0);
        for v in a.iter_mut() {
            *v *= 0.1;
        }
        a[0] = 10.0;
        let (l1, _, _) = leading_eigenvalue(dim, 30, 7, dense_matvec(a.clone(), dim)).unwrap();
        let (l2, _, _) = leading_eigenvalue(dim, 30, 8, dense_matvec(a.clone(), dim)).unwrap();
        assert!((l1 - l2).abs() <= 1e-4 * l1.abs());
    }

    #[test]
    fn residual_small_on_quadratics() {
        for seed in 0..4u64 {
            let dim = 80;
            let a = random_symmetric(dim, seed + 20, 2.0);
            let (l, r, _) = leading_eigenvalue(dim, 30, seed, dense_matvec(a, dim)).unwrap();
            assert!(r < 1e-2 * l.abs(), "seed {seed}: residual {r} vs λ {l}");
        }
    }

    #[test]
    fn non_finite_operator_reports_iteration() {
        let res = leading_eigenvalue(4, 10, 0, |_| vec![f64::NAN; 4]);
        assert!(matches!(res, Err(SpectralError::NonFiniteOperator { iteration: 0 })));
    }

    #[test]
    fn eos_phase_ramp_and_constant() {
        let t = 100.0;
        // Monotone ramp 0 → 2T: the first point at or above 0.9T is the
        // crossing.
        let series: Vec<(u64, f64)> = (0..21).map(|i| (i * 100, i as f64 * 10.0)).collect();
        let summary = eos_phase(&series, t).unwrap();
        let (idx, step) = summary.first_crossing.unwrap();
        assert_eq!(idx, 9);
        assert_eq!(step, 900);
        assert_eq!(summary.labels[8], Phase::Sharpening);
        assert_eq!(summary.labels[9], Phase::Edge);
        assert_eq!(summary.labels[20], Phase::Above);

        let flat: Vec<(u64, f64)> = (0..10).map(|i| (i, t)).collect();
        let summary = eos_phase(&flat, t).unwrap();
        assert_eq!(summary.edge_fraction, 1.0);
        assert!(summary.labels.iter().all(|&l| l == Phase::Edge));

        assert!(matches!(eos_phase(&[], t), Err(SpectralError::EmptySeries)));
    }

    #[test]
    fn eos_phase_no_crossing() {
        let t = 100.0;
        let series: Vec<(u64, f64)> = (0..5).map(|i| (i, 50.0 + i as f64)).collect();
        let s = eos_phase(&series, t).unwrap();
        assert!(s.first_crossing.is_none());
        assert_eq!(s.edge_fraction, 0.0);
        assert!(s.labels.iter().all(|&l| l == Phase::Sharpening));
    }
}
