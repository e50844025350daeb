//! Spectral machinery of the moment semigroup.
//!
//! The expected-mass flow of the process restricted to `[n]` is the
//! matrix semigroup `exp(t L)` with
//!
//! ```text
//! L = Delta_{-b} + K,    K_ij = a(i) pi_i(j),    a(i) = beta(i)(d(i) + int u n(i,du)),
//! ```
//!
//! an essentially non-negative (Metzler) matrix. Its leading eigenvalue
//! is `-Lambda^(n)`; the truncation scheme `Lambda^(n)` decreases to the
//! spectral radius `Lambda` of the untruncated semigroup, whose sign
//! separates almost-sure local extinction from local survival.

use crate::model::{validate_model, ModelError, ModelSpec, PlacementKernel, ValidationReport};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("model constraints violated on [{n}]: {}", summarize(.report))]
    ModelInvalid { n: usize, report: ValidationReport },
    #[error("truncation [{n}] is not irreducible")]
    NotIrreducible { n: usize },
    #[error("eigensolver did not converge: residual {residual:.3e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("leading eigenvector is not positive (min entry {min:.3e})")]
    NotPositive { min: f64 },
    #[error("resolvent diverges: lambda = {lambda} >= Lambda^(n) = {lambda_n}")]
    ResolventDiverges { lambda: f64, lambda_n: f64 },
    #[error("internal consistency: {0}")]
    Inconsistent(String),
}

fn summarize(report: &ValidationReport) -> String {
    report
        .violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// Generator of the killed moment semigroup on `[n]`, with its
/// `Delta_{-b} + K` decomposition data.
#[derive(Debug, Clone)]
pub struct TruncatedGenerator {
    pub n: usize,
    pub l: DMatrix<f64>,
    /// Effective non-local rates `a(i)` (the row scale of `K`).
    pub a: Vec<f64>,
    /// Local drifts; `Delta_{-b}` is the diagonal part of `L`.
    pub b: Vec<f64>,
}

impl TruncatedGenerator {
    /// Sup row-sum norm of `L`.
    pub fn norm(&self) -> f64 {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.l[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Assemble `L^(n) = Delta_{-b} + K` for the killed process on `[n]`.
pub fn build_generator(model: &ModelSpec, n: usize) -> Result<TruncatedGenerator, SpectralError> {
    let report = validate_model(model, n)?;
    if !report.passed() {
        return Err(SpectralError::ModelInvalid { n, report });
    }
    let tm = model.truncate(n)?;
    let n = tm.n;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        l[(i, i)] = -tm.b[i];
        for &(j, p) in &tm.rows[i] {
            l[(i, j)] += tm.a[i] * p;
        }
    }
    Ok(TruncatedGenerator {
        n,
        l,
        a: tm.a,
        b: tm.b,
    })
}

/// True iff the placement-support digraph on `[n]` is strongly connected.
pub fn check_irreducible(model: &ModelSpec, n: usize) -> Result<bool, SpectralError> {
    let tm = model.truncate(n)?;
    let n = tm.n;
    if n == 1 {
        return Ok(true);
    }
    let forward: Vec<Vec<usize>> = tm
        .rows
        .iter()
        .map(|row| row.iter().filter(|&&(_, p)| p > 0.0).map(|&(j, _)| j).collect())
        .collect();
    let mut backward: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, row) in forward.iter().enumerate() {
        for &j in row {
            backward[j].push(i);
        }
    }
    let reach = |adj: &Vec<Vec<usize>>| -> bool {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = stack.pop() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    stack.push(j);
                }
            }
        }
        count == n
    };
    Ok(reach(&forward) && reach(&backward))
}

/// Leading (Perron-Frobenius) eigenpair of `L^(n)` with the
/// normalisations `x(1) = 1` and `<y, x> = 1`.
#[derive(Debug, Clone)]
pub struct TruncatedSpectrum {
    pub n: usize,
    /// `Lambda^(n) = -(leading eigenvalue of L^(n))`.
    pub lambda: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Relative eigen-residual, measured on the balanced similarity of
    /// `L` (the scale-faithful metric): `||B z + Lambda z||_inf /
    /// (||B|| ||z||_inf)`.
    pub right_residual: f64,
    /// Same for the left pair.
    pub left_residual: f64,
}

const PF_TOL_REL: f64 = 1e-12;

/// Diagonal scales that symmetrise the pairwise weights of a Metzler
/// matrix where possible: `d_j / d_i = sqrt(m_ji / m_ij)` along every
/// doubly-positive edge. Consistent exactly when cycle products are
/// symmetric, which holds in particular for tree-structured supports
/// (nearest-neighbour walks). Returns `None` when inconsistent or when
/// the scales would overflow. Exponents are rounded to powers of two,
/// so applying the scales is exact and the symmetrised entries stay
/// within a factor `sqrt(2)` of each other.
///
/// Strongly drift-asymmetric kernels produce Perron vectors whose
/// entries span hundreds of orders of magnitude; in the natural basis
/// the eigenproblem is then exponentially ill-conditioned for any
/// norm-stable method, while the symmetrised similarity is benign.
fn symmetrize_scales(m: &DMatrix<f64>) -> Option<Vec<f64>> {
    let n = m.nrows();
    let mut phi = vec![f64::NAN; n];
    let mut stack = Vec::new();
    for root in 0..n {
        if !phi[root].is_nan() {
            continue;
        }
        phi[root] = 0.0;
        stack.push(root);
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if j == i {
                    continue;
                }
                let fwd = m[(i, j)];
                let bwd = m[(j, i)];
                if fwd <= 0.0 && bwd <= 0.0 {
                    continue;
                }
                // want d_j/d_i = sqrt(m_ji/m_ij), giving
                // B_ij = B_ji = sqrt(m_ij m_ji)
                let delta = if fwd > 0.0 && bwd > 0.0 {
                    0.5 * (bwd / fwd).ln()
                } else {
                    0.0
                };
                let want = phi[i] + delta;
                if phi[j].is_nan() {
                    phi[j] = want;
                    stack.push(j);
                } else if fwd > 0.0 && bwd > 0.0 && (phi[j] - want).abs() > 1e-9 {
                    return None;
                }
            }
        }
    }
    let ln2 = std::f64::consts::LN_2;
    let mut d = Vec::with_capacity(n);
    for &p in &phi {
        let e = (p / ln2).round();
        if !(e.abs() <= 1000.0) {
            return None;
        }
        d.push(e.exp2());
    }
    Some(d)
}

fn apply_scales(m: &DMatrix<f64>, d: &[f64]) -> DMatrix<f64> {
    let n = m.nrows();
    DMatrix::from_fn(n, n, |i, j| m[(i, j)] * d[j] / d[i])
}

/// Symmetrising scales composed with Osborne balancing.
fn scaled_similarity(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let n = m.nrows();
    let d1 = symmetrize_scales(m).unwrap_or_else(|| vec![1.0; n]);
    let m1 = apply_scales(m, &d1);
    let (b, d2) = balance(&m1);
    let d = d1.iter().zip(&d2).map(|(a, b)| a * b).collect();
    (b, d)
}

/// Osborne-style norm balancing with power-of-two scales:
/// returns `(B, d)` with `B = D^{-1} M D`, `D = diag(d)`. A similarity,
/// so the spectrum is unchanged, and the scales are exact in floating
/// point.
fn balance(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let n = m.nrows();
    let mut b = m.clone();
    let mut d = vec![1.0f64; n];
    for _sweep in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let mut r = 0.0;
            let mut c = 0.0;
            for j in 0..n {
                if j != i {
                    r += b[(i, j)].abs();
                    c += b[(j, i)].abs();
                }
            }
            if r == 0.0 || c == 0.0 || !r.is_finite() || !c.is_finite() {
                continue;
            }
            let s = c + r;
            let mut f = 1.0f64;
            let mut c2 = c;
            let mut r2 = r;
            while c2 < r2 / 2.0 {
                c2 *= 2.0;
                r2 /= 2.0;
                f *= 2.0;
            }
            while c2 >= r2 * 2.0 {
                c2 /= 2.0;
                r2 *= 2.0;
                f /= 2.0;
            }
            if f != 1.0 && c2 + r2 < 0.95 * s {
                d[i] *= f;
                for j in 0..n {
                    b[(j, i)] *= f;
                }
                for j in 0..n {
                    b[(i, j)] /= f;
                }
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    (b, d)
}

/// `sigma` is strictly above the leading eigenvalue of the Metzler
/// matrix `m` iff `sigma I - m` is a nonsingular M-matrix, iff Gaussian
/// elimination without pivoting meets only positive pivots. Early exit
/// on the first non-positive pivot. Column-oriented right-looking
/// elimination on a scratch copy.
fn shift_is_above(m: &DMatrix<f64>, sigma: f64) -> bool {
    let n = m.nrows();
    // column-major scratch, a = sigma I - m
    let mut a: Vec<f64> = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let mut x = -m[(i, j)];
            if i == j {
                x += sigma;
            }
            a.push(x);
        }
    }
    let mut mult = vec![0.0f64; n];
    for k in 0..n {
        let pivot = a[k * n + k];
        if !(pivot > 0.0) || !pivot.is_finite() {
            return false;
        }
        for i in (k + 1)..n {
            mult[i] = a[k * n + i] / pivot;
        }
        for j in (k + 1)..n {
            let akj = a[j * n + k];
            if akj != 0.0 {
                let col = &mut a[j * n..(j + 1) * n];
                for i in (k + 1)..n {
                    col[i] -= mult[i] * akj;
                }
            }
        }
    }
    true
}

/// Leading (Perron) eigenpair of a Metzler matrix by shifted power
/// iteration in shift-and-invert form: for `s` above the leading
/// eigenvalue, `(sI - M)^{-1}` is entrywise non-negative and shares the
/// Perron vector, so power steps on it stay positive and converge at
/// ratio `(s - lambda_1)/(s - lambda_2)`. The shift is driven down to
/// the eigenvalue through a rigorous bracket: row sums and
/// Collatz-Wielandt ratios of the iterates bound `lambda_1` from both
/// sides, and the M-matrix pivot test bisects inside the bracket, which
/// keeps the iteration fast even when the subdominant gap is tiny.
/// `lo_hint` must be a rigorous lower bound for the leading eigenvalue
/// (e.g. from a smaller truncation); `hi_hint` is a guess that is
/// verified before use.
fn metzler_leading_with(
    m: &DMatrix<f64>,
    lo_hint: Option<f64>,
    hi_hint: Option<f64>,
) -> Result<(f64, DVector<f64>, f64), SpectralError> {
    let n = m.nrows();
    if n == 1 {
        return Ok((m[(0, 0)], DVector::from_element(1, 1.0), 0.0));
    }
    let norm = m
        .row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let tol = PF_TOL_REL * norm;

    let mut lo = m
        .row_iter()
        .map(|r| r.iter().sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    let mut hi = m
        .row_iter()
        .map(|r| r.iter().sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max)
        + (1e-9 * norm).max(1e-12);
    if let Some(h) = lo_hint {
        if h.is_finite() && h > lo && h <= hi {
            lo = h;
        }
    }
    if let Some(h) = hi_hint {
        if h.is_finite() && h < hi && h > lo && shift_is_above(m, h) {
            hi = h;
        }
    }

    let mut v = DVector::from_element(n, 1.0 / n as f64);
    let mut best_res = f64::INFINITY;
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut total_iters = 0usize;

    'rounds: for _round in 0..60 {
        let s = hi;
        let shifted = DMatrix::<f64>::identity(n, n) * s - m;
        let lu = shifted.lu();
        let mut prev_res = f64::INFINITY;
        let mut stalled = false;
        for inner in 0..80 {
            total_iters += 1;
            let w = match lu.solve(&v) {
                Some(w) => w,
                None => {
                    hi += (1e-12 * norm).max(1e-300);
                    continue 'rounds;
                }
            };
            let wmax = w.amax();
            if !(wmax > 0.0) || !wmax.is_finite() {
                hi += (1e-12 * norm).max(1e-300);
                continue 'rounds;
            }
            // keep the dominant entry positive
            let idx = w
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap());
            let scale = idx.map(|(i, _)| w[i]).unwrap_or(wmax);
            v = w / scale;

            let lv = m * &v;
            let rayleigh = v.dot(&lv) / v.dot(&v);
            let mut res = 0.0f64;
            for i in 0..n {
                res = res.max((lv[i] - rayleigh * v[i]).abs());
            }
            if res < best_res {
                best_res = res;
                best = Some((rayleigh, v.clone()));
            }
            if res <= tol {
                break 'rounds;
            }
            // Collatz-Wielandt bounds from a positive iterate tighten the
            // bracket for free
            if v.min() > 0.0 {
                let mut cw_lo = f64::INFINITY;
                let mut cw_up = f64::NEG_INFINITY;
                for i in 0..n {
                    let r = lv[i] / v[i];
                    cw_lo = cw_lo.min(r);
                    cw_up = cw_up.max(r);
                }
                if cw_lo.is_finite() && cw_lo > lo {
                    lo = cw_lo.min(hi);
                }
                if cw_up.is_finite() && cw_up < hi && cw_up > lo {
                    hi = cw_up;
                }
            }
            if inner >= 6 && res > 0.9 * prev_res {
                stalled = true;
                break;
            }
            prev_res = res;
        }
        if !stalled && best_res <= tol {
            break 'rounds;
        }
        // shrink the bracket by pivot-test bisection until the shift can
        // out-contract the subdominant cluster
        for _ in 0..4 {
            if hi - lo <= (f64::EPSILON * norm).max(1e-300) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if shift_is_above(m, mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }

    let (lambda, mut v) = best.ok_or(SpectralError::NoConvergence {
        residual: best_res,
        iterations: total_iters,
    })?;
    if best_res > 100.0 * tol {
        return Err(SpectralError::NoConvergence {
            residual: best_res,
            iterations: total_iters,
        });
    }
    // certify the Perron pair: the positive eigenvector is unique
    let vmax = v.amax();
    v /= v
        .iter()
        .cloned()
        .max_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap())
        .unwrap_or(vmax);
    let min = v.min();
    if !(min > 0.0) {
        return Err(SpectralError::NotPositive { min });
    }
    Ok((lambda, v, best_res))
}


/// Perron-Frobenius eigen-triple of a truncated generator. Requires the
/// truncation to be irreducible.
pub fn pf_eigen(gen: &TruncatedGenerator) -> Result<TruncatedSpectrum, SpectralError> {
    pf_eigen_with(gen, None, None)
}

/// Like [`pf_eigen`], with optional bracket hints on the leading
/// eigenvalue of `L` (that is, on `-Lambda^(n)`): `lo_hint` must be a
/// rigorous lower bound, `hi_hint` is verified before use. Truncation
/// schedules use the monotone eigenvalue hierarchy to seed these.
fn pf_eigen_with(
    gen: &TruncatedGenerator,
    lo_hint: Option<f64>,
    hi_hint: Option<f64>,
) -> Result<TruncatedSpectrum, SpectralError> {
    let n = gen.n;
    let (b, d) = scaled_similarity(&gen.l);
    let norm_b = b
        .row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let (lam_r, z, res_r) = metzler_leading_with(&b, lo_hint, hi_hint)?;
    let (lam_l, w, res_l) = metzler_leading_with(&b.transpose(), lo_hint, hi_hint)?;
    if (lam_r - lam_l).abs() > 1e-8 * norm_b.max(1.0) {
        return Err(SpectralError::Inconsistent(format!(
            "left/right leading eigenvalues disagree: {lam_r} vs {lam_l}"
        )));
    }
    // unbalance: B z = lam z gives L (D z) = lam (D z), and the left pair
    // maps through D^{-1}; the pairing <w, z> is invariant
    let x0 = d[0] * z[0];
    if !(x0 > 0.0) {
        return Err(SpectralError::NotPositive { min: x0 });
    }
    let x: Vec<f64> = (0..n).map(|i| d[i] * z[i] / x0).collect();
    let pairing: f64 = (0..n).map(|i| w[i] * z[i]).sum();
    if !(pairing > 0.0) {
        return Err(SpectralError::Inconsistent(
            "left/right eigenvector pairing is not positive".into(),
        ));
    }
    // <y, x> = 1 with x normalised to x(1) = 1
    let y: Vec<f64> = (0..n).map(|i| w[i] / d[i] * x0 / pairing).collect();
    Ok(TruncatedSpectrum {
        n,
        lambda: -lam_r,
        x,
        y,
        right_residual: res_r / norm_b,
        left_residual: res_l / norm_b,
    })
}

/// Monotone truncation scheme for the spectral radius.
#[derive(Debug, Clone)]
pub struct SpectralRadiusEstimate {
    /// `(n, Lambda^(n), right residual)` in schedule order.
    pub sequence: Vec<(usize, f64, f64)>,
    pub estimate: f64,
    pub converged: bool,
}

const MONOTONE_TOL: f64 = 1e-10;

/// Run `Lambda^(n)` over an increasing truncation schedule. The sequence
/// must be non-increasing (up to `1e-10`); a violation indicates an
/// eigensolver defect and is reported as an error. Stops early when two
/// successive values differ by less than `tol`.
pub fn estimate_spectral_radius(
    model: &ModelSpec,
    schedule: &[usize],
    tol: f64,
) -> Result<SpectralRadiusEstimate, SpectralError> {
    // finite models clamp to their own size; the constant tail is kept
    let ns: Vec<usize> = schedule
        .iter()
        .map(|&n| match model.num_types() {
            Some(m) => n.min(m),
            None => n,
        })
        .collect();
    let mut sequence: Vec<(usize, f64, f64)> = Vec::with_capacity(ns.len());
    let mut converged = false;
    for &n in &ns {
        if !check_irreducible(model, n)? {
            return Err(SpectralError::NotIrreducible { n });
        }
        let gen = build_generator(model, n)?;
        // the eigenvalue hierarchy makes earlier truncations rigorous
        // lower brackets for -Lambda^(n), and extrapolating their spacing
        // gives a candidate upper bracket worth verifying
        let lo_hint = sequence.last().map(|&(_, lam, _)| -lam);
        let hi_hint = match sequence.len() {
            0 | 1 => None,
            k => {
                let a = -sequence[k - 1].1;
                let b = -sequence[k - 2].1;
                Some(a + 4.0 * (a - b).max(0.0) + 1e-9 * gen.norm().max(1.0))
            }
        };
        let spec = pf_eigen_with(&gen, lo_hint, hi_hint)?;
        if let Some(&(_, prev, _)) = sequence.last() {
            if spec.lambda > prev + MONOTONE_TOL {
                return Err(SpectralError::Inconsistent(format!(
                    "Lambda^({n}) = {} exceeds previous {} beyond 1e-10",
                    spec.lambda, prev
                )));
            }
            if (prev - spec.lambda).abs() < tol {
                converged = true;
                sequence.push((n, spec.lambda, spec.right_residual));
                break;
            }
        }
        sequence.push((n, spec.lambda, spec.right_residual));
    }
    let estimate = sequence.last().map(|&(_, l, _)| l).ok_or_else(|| {
        SpectralError::Inconsistent("empty truncation schedule".into())
    })?;
    Ok(SpectralRadiusEstimate {
        sequence,
        estimate,
        converged,
    })
}

/// Default truncation schedule.
pub fn default_schedule() -> Vec<usize> {
    vec![25, 50, 100, 200, 400, 800]
}

/// Resolvent `H^(n)(lambda) = int_0^inf e^{lambda t} e^{t L} dt
/// = -(L + lambda I)^{-1}`, finite and entrywise non-negative exactly
/// for `lambda < Lambda^(n)`.
pub fn resolvent(gen: &TruncatedGenerator, lambda: f64) -> Result<DMatrix<f64>, SpectralError> {
    let spec = pf_eigen(gen)?;
    if lambda >= spec.lambda {
        return Err(SpectralError::ResolventDiverges {
            lambda,
            lambda_n: spec.lambda,
        });
    }
    let n = gen.n;
    let shifted = -(gen.l.clone() + DMatrix::<f64>::identity(n, n) * lambda);
    shifted
        .lu()
        .try_inverse()
        .ok_or_else(|| SpectralError::Inconsistent("resolvent matrix is singular".into()))
}

/// Verdict of the subinvariance test `(L + lambda I) v <= 0` (right) or
/// `vT (L + lambda I) <= 0` (left), which is equivalent to the semigroup
/// inequality `M(t) v <= e^{-lambda t} v` on the truncation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubinvarianceVerdict {
    /// Equality within tolerance: invariant vector.
    Invariant,
    /// Inequality strict somewhere: subinvariant.
    Subinvariant,
    /// Inequality fails.
    NotSubinvariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Right,
    Left,
}

pub fn subinvariance_check(
    gen: &TruncatedGenerator,
    v: &[f64],
    lambda: f64,
    side: Side,
    tol: f64,
) -> SubinvarianceVerdict {
    let n = gen.n;
    let vv = DVector::from_column_slice(v);
    let shifted = gen.l.clone() + DMatrix::<f64>::identity(n, n) * lambda;
    let r = match side {
        Side::Right => &shifted * &vv,
        Side::Left => shifted.transpose() * &vv,
    };
    let max = r.max();
    let amax = r.amax();
    if max > tol {
        SubinvarianceVerdict::NotSubinvariant
    } else if amax <= tol {
        SubinvarianceVerdict::Invariant
    } else {
        SubinvarianceVerdict::Subinvariant
    }
}

/// Kingman decay of a unit-rate placement kernel, via the truncations of
/// `Q = pi - I`: `kappa^(n) = -(leading eigenvalue of Q^(n))`, decreasing
/// in `n` toward the decay parameter.
#[derive(Debug, Clone)]
pub struct KingmanEstimate {
    pub sequence: Vec<(usize, f64)>,
    pub estimate: f64,
    pub converged: bool,
}

pub fn kingman_decay(
    kernel: &PlacementKernel,
    schedule: &[usize],
    tol: f64,
) -> Result<KingmanEstimate, SpectralError> {
    let mut sequence: Vec<(usize, f64)> = Vec::with_capacity(schedule.len());
    let mut converged = false;
    for &n in schedule {
        let mut q = DMatrix::<f64>::zeros(n, n);
        for i in 1..=n {
            q[(i - 1, i - 1)] = -1.0;
            for (j, p) in kernel.row(i) {
                if j <= n {
                    q[(i - 1, j - 1)] += p;
                }
            }
        }
        let lo_hint = sequence.last().map(|&(_, k)| -k);
        let hi_hint = match sequence.len() {
            0 | 1 => None,
            k => {
                let a = -sequence[k - 1].1;
                let b = -sequence[k - 2].1;
                Some(a + 4.0 * (a - b).max(0.0) + 1e-9)
            }
        };
        let (balanced, _) = scaled_similarity(&q);
        let (lam, _, _) = metzler_leading_with(&balanced, lo_hint, hi_hint)?;
        let kappa: f64 = -lam;
        if let Some(&(_, prev)) = sequence.last() {
            if kappa > prev + MONOTONE_TOL {
                return Err(SpectralError::Inconsistent(format!(
                    "kappa^({n}) = {kappa} exceeds previous {prev}"
                )));
            }
            if (prev - kappa).abs() < tol {
                converged = true;
                sequence.push((n, kappa));
                break;
            }
        }
        sequence.push((n, kappa));
    }
    let estimate = sequence
        .last()
        .map(|&(_, k)| k)
        .ok_or_else(|| SpectralError::Inconsistent("empty schedule".into()))?;
    Ok(KingmanEstimate {
        sequence,
        estimate,
        converged,
    })
}

/// Componentwise tail-liminf estimate of the invariant vector along a
/// truncation schedule, with a stabilisation diagnostic.
#[derive(Debug, Clone)]
pub struct InvariantVectorEstimate {
    /// Running minima of `x^(n)(j)` over the schedule tail, for the types
    /// present in the smallest truncation.
    pub x_star: Vec<f64>,
    /// Max relative change of any component over the last three
    /// truncations.
    pub stabilization: f64,
    pub lambdas: Vec<(usize, f64)>,
}

pub fn extend_invariant_vector(
    model: &ModelSpec,
    schedule: &[usize],
) -> Result<InvariantVectorEstimate, SpectralError> {
    let mut ns: Vec<usize> = schedule
        .iter()
        .map(|&n| match model.num_types() {
            Some(m) => n.min(m),
            None => n,
        })
        .collect();
    ns.dedup();
    if ns.is_empty() {
        return Err(SpectralError::Inconsistent("empty schedule".into()));
    }
    let base = ns[0];
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(ns.len());
    let mut lambdas = Vec::with_capacity(ns.len());
    for &n in &ns {
        if !check_irreducible(model, n)? {
            return Err(SpectralError::NotIrreducible { n });
        }
        let spec = pf_eigen(&build_generator(model, n)?)?;
        lambdas.push((n, spec.lambda));
        xs.push(spec.x);
    }
    let tail = xs.len().saturating_sub(3).max(0);
    let tail_xs = &xs[tail..];
    let mut x_star = vec![f64::INFINITY; base];
    for x in tail_xs {
        for j in 0..base {
            x_star[j] = x_star[j].min(x[j]);
        }
    }
    let mut stab = 0.0f64;
    for j in 0..base {
        let vals: Vec<f64> = tail_xs.iter().map(|x| x[j]).collect();
        for w in vals.windows(2) {
            let denom = w[0].abs().max(w[1].abs()).max(f64::MIN_POSITIVE);
            stab = stab.max((w[1] - w[0]).abs() / denom);
        }
    }
    Ok(InvariantVectorEstimate {
        x_star,
        stabilization: stab,
        lambdas,
    })
}
