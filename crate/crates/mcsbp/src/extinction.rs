//! Global and local extinction probabilities.
//!
//! With `w(i) = -log P_{delta_i}(total mass dies out)` and
//! `v_A(i) = -log P_{delta_i}(mass on A dies out)`, both vectors satisfy
//! the fixed-point equation
//!
//! ```text
//! psi(i, w(i)) + phi(i, w) = 0,
//! ```
//!
//! and `v_A <= w`. Neither has a closed algorithm in general; here they
//! are computed on a truncation as the monotone double limit of
//! `V_T(theta 1_A)` over a theta ladder with horizon doubling, then
//! certified by the fixed-point residual. Whether mass on finite sets
//! dies out almost surely is decided by the sign of the spectral radius.

use crate::cumulant::CumulantError;
use crate::model::{phi_from_inner, psi_params, ModelError, ModelSpec, TruncatedModel};
use crate::ode::{self, StepControl};
use crate::spectral::{
    estimate_spectral_radius, SpectralError, SpectralRadiusEstimate,
};
use crate::model::xlogx_moment;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExtinctionError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cumulant(#[from] CumulantError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("horizon did not stabilize: sup difference {diff:.3e} at horizon {horizon:.3e}{}", if *.growing { " (values still growing; the extinction probability may be zero)" } else { "" })]
    Horizon {
        diff: f64,
        horizon: f64,
        growing: bool,
    },
    #[error("fixed-point residual {residual:.3e} exceeds {tol:.3e}")]
    ResidualTooLarge { residual: f64, tol: f64 },
    #[error("ordering violated: v_A({i}) = {v} exceeds w({i}) = {w} beyond 1e-8")]
    OrderingViolated { i: usize, v: f64, w: f64 },
    #[error("operation needs a homogeneous family model")]
    NotHomogeneous,
    #[error("set entry {0} lies outside the truncation")]
    SetOutsideTruncation(usize),
}

#[derive(Debug, Clone)]
pub struct ExtinctionOptions {
    /// Increasing theta ladder; default `1, 2, 4, ..., 2^14`.
    pub theta_ladder: Vec<f64>,
    /// First horizon checkpoint.
    pub base_horizon: f64,
    /// Stop doubling when `||V_T - V_{2T}||_inf` drops below this.
    pub horizon_tol: f64,
    pub max_doublings: u32,
    /// Stop the ladder when successive rung limits differ by less.
    pub ladder_tol: f64,
    /// Required bound on the fixed-point residual of the accepted vector.
    pub residual_tol: f64,
    pub step: StepControl,
}

impl Default for ExtinctionOptions {
    fn default() -> Self {
        Self {
            theta_ladder: (0..15).map(|k| (1u64 << k) as f64).collect(),
            base_horizon: 4.0,
            horizon_tol: 1e-9,
            max_doublings: 32,
            ladder_tol: 1e-9,
            residual_tol: 1e-6,
            step: StepControl::default(),
        }
    }
}

/// An accepted fixed-point vector on `[n]` with its certificate.
#[derive(Debug, Clone)]
pub struct ExtinctionSolution {
    pub n: usize,
    /// `-log` extinction probabilities per type of `[n]`.
    pub w: Vec<f64>,
    /// `max_i |psi(i, w(i)) + phi(i, w)|` over the killed truncation.
    pub residual: f64,
    /// Last ladder rung actually used.
    pub theta_used: f64,
    /// Horizon at which the rung stabilized.
    pub horizon: f64,
}

/// Killed-truncation fixed-point residual of a candidate vector.
pub fn fixed_point_residual(tm: &TruncatedModel, w: &[f64]) -> f64 {
    let mut r: f64 = 0.0;
    for i0 in 0..tm.n {
        r = r.max((tm.psi(i0, w[i0]) + tm.phi(i0, w)).abs());
    }
    r
}

fn rung_limit(
    tm: &TruncatedModel,
    theta: f64,
    mask: &[bool],
    opts: &ExtinctionOptions,
) -> Result<(Vec<f64>, f64), ExtinctionError> {
    let n = tm.n;
    let mut v: Vec<f64> = (0..n).map(|i| if mask[i] { theta } else { 0.0 }).collect();
    let mut rhs = |_t: f64, y: &[f64], dy: &mut [f64]| tm.cumulant_rhs(y, dy);
    let mut horizon = opts.base_horizon;
    ode::integrate(&mut rhs, &mut v, 0.0, horizon, &opts.step)
        .map_err(CumulantError::from)?;
    clip_negative(&mut v);
    let mut last_diff = f64::INFINITY;
    let mut last_growing = true;
    for _ in 0..opts.max_doublings {
        let prev = v.clone();
        ode::integrate(&mut rhs, &mut v, horizon, 2.0 * horizon, &opts.step)
            .map_err(CumulantError::from)?;
        clip_negative(&mut v);
        horizon *= 2.0;
        let mut diff = 0.0f64;
        let mut growing = false;
        for i in 0..n {
            let d = v[i] - prev[i];
            diff = diff.max(d.abs());
            if d > opts.horizon_tol {
                growing = true;
            }
        }
        if diff < opts.horizon_tol {
            return Ok((v, horizon));
        }
        last_diff = diff;
        last_growing = growing;
        if !diff.is_finite() {
            break;
        }
    }
    Err(ExtinctionError::Horizon {
        diff: last_diff,
        horizon,
        growing: last_growing,
    })
}

fn clip_negative(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn solve_fixed_point(
    tm: &TruncatedModel,
    mask: &[bool],
    opts: &ExtinctionOptions,
) -> Result<ExtinctionSolution, ExtinctionError> {
    let mut result: Option<(Vec<f64>, f64, f64)> = None;
    for &theta in &opts.theta_ladder {
        let (w, horizon) = rung_limit(tm, theta, mask, opts)?;
        if let Some((prev_w, _, _)) = &result {
            let diff = w
                .iter()
                .zip(prev_w)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            let done = diff < opts.ladder_tol;
            result = Some((w, theta, horizon));
            if done {
                break;
            }
        } else {
            result = Some((w, theta, horizon));
        }
    }
    let (w, theta_used, horizon) = result.expect("theta ladder is non-empty");
    let residual = fixed_point_residual(tm, &w);
    if residual > opts.residual_tol {
        return Err(ExtinctionError::ResidualTooLarge {
            residual,
            tol: opts.residual_tol,
        });
    }
    Ok(ExtinctionSolution {
        n: tm.n,
        w,
        residual,
        theta_used,
        horizon,
    })
}

/// Global extinction exponents `w` on the killed truncation `[n]`.
///
/// For finite models with `n >= m` this is exact (no killing). For
/// infinite families the killed value bounds the true `w` from below,
/// and when mass can survive by escaping to ever-higher types the bound
/// does not close; homogeneous families then have the exact answer
/// through [`homogeneous_reduce`].
pub fn solve_global_extinction(
    model: &ModelSpec,
    n: usize,
    opts: &ExtinctionOptions,
) -> Result<ExtinctionSolution, ExtinctionError> {
    let tm = model.truncate(n)?;
    let mask = vec![true; tm.n];
    solve_fixed_point(&tm, &mask, opts)
}

/// Local extinction exponents `v_A` on the killed truncation, with the
/// ordering `v_A <= w + 1e-8` checked against the global solution.
pub fn solve_local_extinction(
    model: &ModelSpec,
    set: &[usize],
    n: usize,
    opts: &ExtinctionOptions,
) -> Result<ExtinctionSolution, ExtinctionError> {
    let tm = model.truncate(n)?;
    let mut mask = vec![false; tm.n];
    for &i in set {
        if i == 0 || i > tm.n {
            return Err(ExtinctionError::SetOutsideTruncation(i));
        }
        mask[i - 1] = true;
    }
    let local = solve_fixed_point(&tm, &mask, opts)?;
    let global = solve_fixed_point(&tm, &vec![true; tm.n], opts)?;
    for i0 in 0..tm.n {
        if local.w[i0] > global.w[i0] + 1e-8 {
            return Err(ExtinctionError::OrderingViolated {
                i: i0 + 1,
                v: local.w[i0],
                w: global.w[i0],
            });
        }
    }
    Ok(local)
}

/// Total-mass reduction of a homogeneous family: `<1, X_t>` is a
/// single-type process with mechanism
///
/// ```text
/// psi~(z) = (b - a) z + c z^2 + int (e^{-zu} - 1 + zu) (ell + beta n)(du),
/// ```
///
/// whose largest non-negative root gives the exact global extinction
/// probability `exp(-root)` for every type.
#[derive(Debug, Clone)]
pub struct HomogeneousMechanism {
    /// `b - a = b - beta d - beta int u n(du)`.
    pub drift: f64,
    pub c: f64,
    /// Merged jump measure `ell + beta n`.
    pub jumps: crate::model::AtomicMeasure,
    /// Largest non-negative root of `psi~`; `+inf` when there is none
    /// (extinction probability zero).
    pub root: f64,
}

impl HomogeneousMechanism {
    pub fn psi_tilde(&self, z: f64) -> f64 {
        let mut s = self.drift * z + self.c * z * z;
        for &(u, m) in self.jumps.atoms() {
            s += m * ((-z * u).exp() - 1.0 + z * u);
        }
        s
    }

    pub fn extinction_probability(&self) -> f64 {
        (-self.root).exp()
    }
}

/// Reduce a homogeneous family to its total-mass mechanism and find the
/// extinction root by bracketing and bisection.
pub fn homogeneous_reduce(model: &ModelSpec) -> Result<HomogeneousMechanism, ExtinctionError> {
    let (local, nonlocal) = match model {
        ModelSpec::Homogeneous {
            local, nonlocal, ..
        } => (local, nonlocal),
        _ => return Err(ExtinctionError::NotHomogeneous),
    };
    let drift = local.b - nonlocal.a();
    let jumps = local.levy.merged(&nonlocal.njump.scaled(nonlocal.beta));
    let mut mech = HomogeneousMechanism {
        drift,
        c: local.c,
        jumps,
        root: 0.0,
    };
    mech.root = largest_root(&mech);
    Ok(mech)
}

fn largest_root(mech: &HomogeneousMechanism) -> f64 {
    let degenerate = mech.drift == 0.0 && mech.c == 0.0 && mech.jumps.is_empty();
    if degenerate {
        // psi~ vanishes identically: constant total mass, no extinction
        return f64::INFINITY;
    }
    if mech.drift >= 0.0 {
        // convex with psi~(0) = 0 and non-negative slope: no positive root
        return 0.0;
    }
    let mut hi = 1.0;
    while mech.psi_tilde(hi) <= 0.0 {
        hi *= 2.0;
        if hi > 1e12 {
            // still negative arbitrarily far out: supercritical with no
            // quadratic/jump braking, extinction never happens
            return f64::INFINITY;
        }
    }
    let mut lo = hi / 2.0;
    while mech.psi_tilde(lo) > 0.0 {
        lo /= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mech.psi_tilde(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-15 * hi.max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Fixed-point residual of the constant vector `wbar` against the full
/// (untruncated) mechanism of a homogeneous family; equals
/// `|psi~(wbar)|` analytically.
pub fn homogeneous_fixed_point_residual(
    model: &ModelSpec,
    wbar: f64,
) -> Result<f64, ExtinctionError> {
    let (local, nonlocal) = match model {
        ModelSpec::Homogeneous {
            local, nonlocal, ..
        } => (local, nonlocal),
        _ => return Err(ExtinctionError::NotHomogeneous),
    };
    // full placement rows sum to one, so <wbar 1, pi_i> = wbar
    Ok((psi_params(local, wbar) + phi_from_inner(nonlocal, wbar)).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalVerdict {
    AlmostSure,
    SurvivesWithPositiveProbability,
    Indeterminate,
}

/// Classification of local extinction on a finite set by the sign of
/// the spectral radius estimate.
#[derive(Debug, Clone)]
pub struct LocalExtinctionVerdict {
    pub set: Vec<usize>,
    pub lambda: SpectralRadiusEstimate,
    pub verdict: LocalVerdict,
    /// `(type, (x log x mass of ell, of n))` for the requested set; always
    /// finite for atomic measures, so the moment hypothesis of the
    /// dichotomy holds by construction.
    pub xlogx: Vec<(usize, (f64, f64))>,
}

/// Decide almost-sure local extinction on `A` from the truncation scheme.
///
/// `Lambda^(n)` decreases toward the true spectral radius, so a final
/// value below `-tol` certifies survival; a converged estimate above
/// `-tol` is classified almost-sure; anything still decreasing through
/// the `[-tol, tol]` band is reported indeterminate rather than guessed.
pub fn classify_local_extinction(
    model: &ModelSpec,
    set: &[usize],
    schedule: &[usize],
    lambda_tol: f64,
) -> Result<LocalExtinctionVerdict, ExtinctionError> {
    let lambda = estimate_spectral_radius(model, schedule, lambda_tol)?;
    let last = lambda.estimate;
    let verdict = if last <= -lambda_tol {
        LocalVerdict::SurvivesWithPositiveProbability
    } else if lambda.converged {
        LocalVerdict::AlmostSure
    } else {
        LocalVerdict::Indeterminate
    };
    let mut xlogx = Vec::with_capacity(set.len());
    for &i in set {
        xlogx.push((i, xlogx_moment(model, i)?));
    }
    Ok(LocalExtinctionVerdict {
        set: set.to_vec(),
        lambda,
        verdict,
        xlogx,
    })
}
