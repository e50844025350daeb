//! The spine decomposition: under the change of measure by the
//! martingale `Y_t = e^{Lambda t} <x, X_t> / <x, mu>`, the process gains
//! an immortal tilted Markov chain (the spine) with generator
//!
//! ```text
//! Ltilde_ij = (1/x(i)) (Delta_{-b} + K + Lambda I)_ij x(j),
//! ```
//!
//! along which mass immigrates continuously (rate `2c`), discontinuously
//! (intensity `u ell(i, du)`), and — a consequence of non-local
//! branching — at every spine jump `i -> j`, with mass law `nu_{i,j}`.
//! The tilted expectation of the path functional built from the
//! `Theta` edge factors and the quadratic/jump potential reproduces the
//! size-biased Laplace functional of the process; both sides are
//! computed here independently (backward ODE vs path Monte Carlo vs
//! killed particle simulation) and compared as a z-scored identity
//! check.
//!
//! The Feynman-Kac engine underneath is the generic one for chain
//! functionals with a multiplicative edge factor: the semigroup
//! generator is `p_ij = q_ij e^{F(i,j)} + v(i) 1_{i=j}`.

use crate::cumulant::{integrate_cumulant, CumulantError, CumulantOptions, CumulantSolution};
use crate::model::{ModelError, ModelSpec, TruncatedModel, TypeVector};
use crate::ode::{self, OdeError, StepControl};
use crate::particle::{
    build_scaling_family, replicate_stream, simulate_with_rng, McEstimate, ParticleError,
    Population, SimCaps,
};
use crate::spectral::{build_generator, pf_eigen, SpectralError, TruncatedSpectrum};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Cumulant(#[from] CumulantError),
    #[error(transparent)]
    Particle(#[from] ParticleError),
    #[error(transparent)]
    Integration(#[from] OdeError),
    #[error("tilted generator row {i} sums to {sum:.3e}; eigenpair quality insufficient")]
    RowSum { i: usize, sum: f64 },
    #[error("spine cannot jump {i} -> {j}: placement probability is zero")]
    UndefinedTransition { i: usize, j: usize },
    #[error("thread pool: {0}")]
    Pool(String),
}

/// The tilted-chain context on a truncation: eigenpair, conservative
/// generator, and tilted placement rows.
#[derive(Debug, Clone)]
pub struct SpineContext {
    pub n: usize,
    pub spectrum: TruncatedSpectrum,
    /// Conservative generator of the spine chain; rows sum to zero
    /// exactly (diagonal set from the off-diagonal sums after the
    /// eigen-quality check).
    pub ltilde: DMatrix<f64>,
    /// Tilted placement rows `pi^x_i(j) = (x(j)/x(i)) pi_i(j)`,
    /// 0-based targets within the truncation.
    pub pix: Vec<Vec<(usize, f64)>>,
    pub tm: TruncatedModel,
}

const ROW_SUM_CHECK: f64 = 1e-10;

/// Assemble the spine context from the generator eigenpair.
pub fn build_spine_context(model: &ModelSpec, n: usize) -> Result<SpineContext, SpineError> {
    let gen = build_generator(model, n)?;
    let spectrum = pf_eigen(&gen)?;
    let tm = model.truncate(n)?;
    let n = tm.n;
    let x = &spectrum.x;
    let lambda = spectrum.lambda;
    let mut ltilde = DMatrix::<f64>::zeros(n, n);
    let mut pix = Vec::with_capacity(n);
    for i in 0..n {
        let mut row_pix = Vec::with_capacity(tm.rows[i].len());
        let mut off_sum = 0.0;
        for &(j, p) in &tm.rows[i] {
            let tilted = p * x[j] / x[i];
            row_pix.push((j, tilted));
            if j != i {
                let rate = tm.a[i] * tilted;
                ltilde[(i, j)] = rate;
                off_sum += rate;
            }
        }
        pix.push(row_pix);
        // formula diagonal: (1/x_i)(-b_i + Lambda) x_i
        let formula = -tm.b[i] + lambda;
        let sum = formula + off_sum;
        let scale = gen.norm().max(1.0);
        if sum.abs() > ROW_SUM_CHECK * scale {
            return Err(SpineError::RowSum { i: i + 1, sum });
        }
        ltilde[(i, i)] = -off_sum;
    }
    Ok(SpineContext {
        n,
        spectrum,
        ltilde,
        pix,
        tm,
    })
}

/// Jump-immigration mass law `nu_{i,j}`: an atom at zero of weight
/// `beta d / a` plus size-biased jump atoms `u m_u beta / a`; total mass
/// one by the definition of `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct NuLaw {
    pub zero_weight: f64,
    /// `(mass, probability)` pairs from the size-biased jump measure.
    pub atoms: Vec<(f64, f64)>,
}

impl NuLaw {
    pub fn total_mass(&self) -> f64 {
        self.zero_weight + self.atoms.iter().map(|&(_, p)| p).sum::<f64>()
    }

    /// `E[e^{-Delta y}]` under the law.
    pub fn laplace(&self, y: f64) -> f64 {
        self.zero_weight
            + self
                .atoms
                .iter()
                .map(|&(u, p)| p * (-u * y).exp())
                .sum::<f64>()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let mut u: f64 = rng.gen();
        if u < self.zero_weight {
            return 0.0;
        }
        u -= self.zero_weight;
        for &(mass, p) in &self.atoms {
            if u < p {
                return mass;
            }
            u -= p;
        }
        self.atoms.last().map(|&(m, _)| m).unwrap_or(0.0)
    }
}

/// Immigration law at a spine jump `i -> j` (1-based); requires
/// `pi_i(j) > 0` and `i != j`.
pub fn nu_law(ctx: &SpineContext, i: usize, j: usize) -> Result<NuLaw, SpineError> {
    let i0 = i - 1;
    let j0 = j - 1;
    if i == j || i0 >= ctx.n || j0 >= ctx.n {
        return Err(SpineError::UndefinedTransition { i, j });
    }
    let p_ij = ctx.tm.rows[i0]
        .iter()
        .find(|&&(jj, _)| jj == j0)
        .map(|&(_, p)| p)
        .unwrap_or(0.0);
    if p_ij <= 0.0 || ctx.tm.a[i0] <= 0.0 {
        return Err(SpineError::UndefinedTransition { i, j });
    }
    // off-diagonal case: (Delta_{-b} + I Lambda)_{ij} = 0, so the zero
    // atom carries beta d pi / K and each jump atom u m beta pi / K,
    // with K_ij = a pi
    let a = ctx.tm.a[i0];
    let beta = ctx.tm.beta[i0];
    let zero_weight = beta * ctx.tm.d[i0] / a;
    let atoms: Vec<(f64, f64)> = ctx.tm.njump[i0]
        .atoms()
        .iter()
        .map(|&(u, m)| (u, beta * u * m / a))
        .collect();
    Ok(NuLaw { zero_weight, atoms })
}

/// The scalar edge factor `Theta_i` at remaining horizon `tau`, given
/// the killed inner product `y = <V_tau f, pi_i>`:
/// `1 + (beta/a) sum m u (e^{-u y} - 1)`. It does not depend on the
/// jump target.
fn theta_value(tm: &TruncatedModel, i0: usize, y: f64) -> f64 {
    if tm.a[i0] <= 0.0 {
        return 1.0;
    }
    let mut j_i = 0.0;
    for &(u, m) in tm.njump[i0].atoms() {
        j_i += m * u * ((-u * y).exp() - 1.0);
    }
    1.0 + tm.beta[i0] * j_i / tm.a[i0]
}

/// `Theta^{(n), t}` as a full matrix: entries on admissible transitions
/// (`pi_i(j) > 0`, `i != j`); inadmissible entries are left at the
/// neutral value one (the spine cannot make those jumps).
pub fn theta_matrix(
    model: &ModelSpec,
    ctx: &SpineContext,
    f: &TypeVector,
    t: f64,
    opts: &CumulantOptions,
) -> Result<DMatrix<f64>, SpineError> {
    let vsol = integrate_cumulant(model, f, t, ctx.n, opts)?;
    Ok(theta_from_v(ctx, vsol.final_row()))
}

pub(crate) fn theta_from_v(ctx: &SpineContext, v: &[f64]) -> DMatrix<f64> {
    let n = ctx.n;
    let mut m = DMatrix::<f64>::from_element(n, n, 1.0);
    for i0 in 0..n {
        let y = ctx.tm.inner(i0, v);
        let th = theta_value(&ctx.tm, i0, y);
        for &(j0, p) in &ctx.tm.rows[i0] {
            if p > 0.0 && j0 != i0 {
                m[(i0, j0)] = th;
            }
        }
    }
    m
}

// ---------------------------------------------------------------------
// Feynman-Kac engine
// ---------------------------------------------------------------------

/// Time-homogeneous chain functional semigroup: `h(., t) = exp(t P) f`
/// with `p_ij = q_ij edge_ij` off the diagonal and
/// `p_ii = q_ii + v(i)`. `edge` is the multiplicative factor `e^{F}`
/// (diagonal ignored); `None` means no edge weighting.
pub fn fk_expectation(
    q: &DMatrix<f64>,
    v: &[f64],
    edge: Option<&DMatrix<f64>>,
    f: &[f64],
    t: f64,
) -> Vec<f64> {
    let n = q.nrows();
    let mut p = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                p[(i, j)] = q[(i, j)] + v[i];
            } else {
                let e = edge.map(|m| m[(i, j)]).unwrap_or(1.0);
                p[(i, j)] = q[(i, j)] * e;
            }
        }
    }
    let ept = (p * t).exp();
    let fv = nalgebra::DVector::from_column_slice(f);
    (ept * fv).iter().cloned().collect()
}

/// Time-dependent variant as a backward linear ODE in the remaining
/// horizon `tau`: `dPhi/dtau = P(tau) Phi`, `Phi(0) = f`, with
/// `P(tau)_ij = q_ij edge(i, j, tau)` off-diagonal and
/// `P(tau)_ii = q_ii + v(i, tau)`.
pub fn fk_expectation_td<V, E>(
    q: &DMatrix<f64>,
    v: V,
    edge: E,
    f: &[f64],
    t: f64,
    step: &StepControl,
) -> Result<Vec<f64>, OdeError>
where
    V: Fn(usize, f64) -> f64,
    E: Fn(usize, usize, f64) -> f64,
{
    let n = q.nrows();
    let mut phi = f.to_vec();
    let mut rhs = |tau: f64, y: &[f64], dy: &mut [f64]| {
        for i in 0..n {
            let mut acc = (q[(i, i)] + v(i, tau)) * y[i];
            for j in 0..n {
                if j != i {
                    let qij = q[(i, j)];
                    if qij != 0.0 {
                        acc += qij * edge(i, j, tau) * y[j];
                    }
                }
            }
            dy[i] = acc;
        }
    };
    ode::integrate(&mut rhs, &mut phi, 0.0, t, step)?;
    Ok(phi)
}

/// Simpson quadrature of a scalar function over `[a, b]`.
fn simpson<G: Fn(f64) -> f64>(g: G, a: f64, b: f64, substeps: usize) -> f64 {
    let m = substeps.max(1) * 2;
    let h = (b - a) / m as f64;
    let mut acc = g(a) + g(b);
    for k in 1..m {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * g(a + k as f64 * h);
    }
    acc * h / 3.0
}

/// Monte Carlo over chain paths of the same functional:
/// `E_i[f(xi_t) exp(int v(xi_s, t-s) ds) prod edge(xi_{s-}, xi_s, t-s)]`.
/// Sub-stochastic rows kill the path (contribution zero). Returns one
/// estimate per start state.
pub fn fk_path_mc<V, E>(
    q: &DMatrix<f64>,
    v: V,
    edge: E,
    f: &[f64],
    t: f64,
    reps: u64,
    seed: u64,
    workers: usize,
    quad_substeps: usize,
) -> Result<Vec<McEstimate>, SpineError>
where
    V: Fn(usize, f64) -> f64 + Sync,
    E: Fn(usize, usize, f64) -> f64 + Sync,
{
    let n = q.nrows();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| SpineError::Pool(e.to_string()))?;
    let rows: Vec<Vec<f64>> = pool.install(|| {
        (0..reps)
            .into_par_iter()
            .map(|r| {
                let mut rng = replicate_stream(seed, r);
                (0..n)
                    .map(|start| {
                        path_functional(q, &v, &edge, f, t, start, &mut rng, quad_substeps)
                    })
                    .collect()
            })
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let vals: Vec<f64> = rows.iter().map(|row| row[i]).collect();
        let (estimate, stderr) = mean_stderr(&vals);
        out.push(McEstimate {
            estimate,
            stderr,
            reps,
            truncated_reps: 0,
            valid: true,
        });
    }
    Ok(out)
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|&v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n * (n - 1.0))).sqrt())
}

#[allow(clippy::too_many_arguments)]
fn path_functional<V, E>(
    q: &DMatrix<f64>,
    v: &V,
    edge: &E,
    f: &[f64],
    t: f64,
    start: usize,
    rng: &mut ChaCha8Rng,
    quad_substeps: usize,
) -> f64
where
    V: Fn(usize, f64) -> f64,
    E: Fn(usize, usize, f64) -> f64,
{
    let n = q.nrows();
    let mut state = start;
    let mut s = 0.0f64;
    let mut log_weight = 0.0f64;
    let mut edge_weight = 1.0f64;
    loop {
        let rate = -q[(state, state)];
        let dwell = if rate > 0.0 {
            let u: f64 = rng.gen();
            -(1.0 - u).ln() / rate
        } else {
            f64::INFINITY
        };
        let seg_end = (s + dwell).min(t);
        // integral of the potential over the segment, in time-to-go
        log_weight += simpson(|r| v(state, t - r), s, seg_end, quad_substeps);
        if s + dwell >= t {
            return f[state] * log_weight.exp() * edge_weight;
        }
        s = seg_end;
        // pick the jump target among off-diagonal rates; the deficit of
        // a sub-stochastic row kills the path
        let mut pick: f64 = rng.gen::<f64>() * rate;
        let mut target = None;
        for j in 0..n {
            if j != state {
                let qij = q[(state, j)];
                if qij > 0.0 {
                    if pick < qij {
                        target = Some(j);
                        break;
                    }
                    pick -= qij;
                }
            }
        }
        match target {
            Some(j) => {
                edge_weight *= edge(state, j, t - s);
                state = j;
            }
            None => return 0.0,
        }
    }
}

// ---------------------------------------------------------------------
// The spine functional and the identity check
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SpineOptions {
    pub cumulant: CumulantOptions,
    pub step: StepControl,
    pub quad_substeps: usize,
    pub caps: SimCaps,
    /// Above this standard error the identity check is flagged
    /// inconclusive instead of scored.
    pub max_se: f64,
}

impl Default for SpineOptions {
    fn default() -> Self {
        Self {
            cumulant: CumulantOptions::default(),
            step: StepControl::default(),
            quad_substeps: 16,
            caps: SimCaps::default(),
            max_se: 0.02,
        }
    }
}

/// Potential of the spine functional at remaining horizon `tau`:
/// `-(2c V + sum m u (1 - e^{-u V}))`, evaluated through the stored
/// cumulant grid.
fn kill_rate(tm: &TruncatedModel, i0: usize, v_i: f64) -> f64 {
    let mut acc = 2.0 * tm.c[i0] * v_i;
    for &(u, m) in tm.levy[i0].atoms() {
        acc += m * u * (1.0 - (-u * v_i).exp());
    }
    acc
}

struct SpineCoeffs<'a> {
    ctx: &'a SpineContext,
    vsol: &'a CumulantSolution,
}

impl<'a> SpineCoeffs<'a> {
    fn v_row(&self, tau: f64) -> Vec<f64> {
        let mut row = vec![0.0; self.ctx.n];
        self.vsol.interpolate(tau, &mut row);
        row
    }

    fn potential(&self, i0: usize, tau: f64) -> f64 {
        let row = self.v_row(tau);
        -kill_rate(&self.ctx.tm, i0, row[i0])
    }

    fn edge(&self, i0: usize, tau: f64) -> f64 {
        let row = self.v_row(tau);
        let y = self.ctx.tm.inner(i0, &row);
        theta_value(&self.ctx.tm, i0, y)
    }
}

/// Tilted-chain expectation of the spine functional by the backward
/// theta recursion, one value per start type.
pub fn rhs_spine_functional_ode(
    model: &ModelSpec,
    ctx: &SpineContext,
    f: &TypeVector,
    g: &[f64],
    t: f64,
    opts: &SpineOptions,
) -> Result<Vec<f64>, SpineError> {
    let vsol = integrate_cumulant(model, f, t, ctx.n, &opts.cumulant)?;
    let coeffs = SpineCoeffs { ctx, vsol: &vsol };
    // cache: the potential and edge only need the interpolated row once
    // per (i, tau) pair; the rhs below evaluates all i at one tau, so
    // interpolate per call
    let n = ctx.n;
    let mut phi = g.to_vec();
    let mut row = vec![0.0; n];
    let mut rhs = |tau: f64, y: &[f64], dy: &mut [f64]| {
        coeffs.vsol.interpolate(tau, &mut row);
        for i0 in 0..n {
            let pot = -kill_rate(&ctx.tm, i0, row[i0]);
            let yin = ctx.tm.inner(i0, &row);
            let th = theta_value(&ctx.tm, i0, yin);
            let mut acc = (ctx.ltilde[(i0, i0)] + pot) * y[i0];
            for j0 in 0..n {
                if j0 != i0 {
                    let lij = ctx.ltilde[(i0, j0)];
                    if lij != 0.0 {
                        acc += lij * th * y[j0];
                    }
                }
            }
            dy[i0] = acc;
        }
    };
    ode::integrate(&mut rhs, &mut phi, 0.0, t, &opts.step)?;
    Ok(phi)
}

/// Same functional by Monte Carlo over spine paths.
pub fn rhs_spine_functional_mc(
    model: &ModelSpec,
    ctx: &SpineContext,
    f: &TypeVector,
    g: &[f64],
    t: f64,
    reps: u64,
    seed: u64,
    workers: usize,
    opts: &SpineOptions,
) -> Result<Vec<McEstimate>, SpineError> {
    let vsol = integrate_cumulant(model, f, t, ctx.n, &opts.cumulant)?;
    let coeffs = SpineCoeffs { ctx, vsol: &vsol };
    fk_path_mc(
        &ctx.ltilde,
        |i0, tau| coeffs.potential(i0, tau),
        |i0, _j0, tau| coeffs.edge(i0, tau),
        g,
        t,
        reps,
        seed,
        workers,
        opts.quad_substeps,
    )
}

/// Two-sided spine identity report. The left side is the size-biased
/// Laplace functional estimated by killed particle Monte Carlo; the
/// right side is the product of the killed Laplace functional and the
/// tilted-chain functional, computed deterministically (theta ODE) and
/// by path Monte Carlo.
#[derive(Debug, Clone)]
pub struct SpineIdentityReport {
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs_ode: f64,
    pub rhs_mc: f64,
    pub rhs_mc_se: f64,
    /// `(lhs - rhs_ode) / lhs_se`.
    pub z: f64,
    /// `(rhs_mc - rhs_ode) / rhs_mc_se`.
    pub z_routes: f64,
    pub inconclusive: bool,
    pub lambda: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn spine_identity_check(
    model: &ModelSpec,
    n: usize,
    mu: &TypeVector,
    f: &TypeVector,
    g: &[f64],
    t: f64,
    k: u32,
    reps: u64,
    seed: u64,
    workers: usize,
    opts: &SpineOptions,
) -> Result<SpineIdentityReport, SpineError> {
    let ctx = build_spine_context(model, n)?;
    let x = &ctx.spectrum.x;
    let lambda = ctx.spectrum.lambda;

    // the particle start is mu rounded to the grid 1/k; use exactly that
    // mass on both sides
    let init = Population::from_mass(mu, k);
    let mu_hat: Vec<f64> = init.counts.iter().map(|&c| c as f64 / k as f64).collect();
    let x_mu: f64 = mu_hat
        .iter()
        .enumerate()
        .map(|(i0, &m)| if i0 < ctx.n { x[i0] * m } else { 0.0 })
        .sum();

    // right side, deterministic route
    let vsol = integrate_cumulant(model, f, t, ctx.n, &opts.cumulant)?;
    let vfin = vsol.final_row();
    let lap = (-mu_hat
        .iter()
        .enumerate()
        .map(|(i0, &m)| if i0 < ctx.n { vfin[i0] * m } else { 0.0 })
        .sum::<f64>())
    .exp();
    let vec_ode = rhs_spine_functional_ode(model, &ctx, f, g, t, opts)?;
    let weights: Vec<f64> = mu_hat
        .iter()
        .enumerate()
        .map(|(i0, &m)| if i0 < ctx.n { x[i0] * m / x_mu } else { 0.0 })
        .collect();
    let rhs_ode = lap
        * weights
            .iter()
            .zip(&vec_ode)
            .map(|(&w, &v)| w * v)
            .sum::<f64>();

    // right side, path Monte Carlo route
    let vec_mc = rhs_spine_functional_mc(model, &ctx, f, g, t, reps, seed ^ 0x9e37_79b9, workers, opts)?;
    let rhs_mc = lap
        * weights
            .iter()
            .zip(&vec_mc)
            .map(|(&w, e)| w * e.estimate)
            .sum::<f64>();
    let rhs_mc_se = lap
        * weights
            .iter()
            .zip(&vec_mc)
            .map(|(&w, e)| (w * e.stderr) * (w * e.stderr))
            .sum::<f64>()
            .sqrt();

    // left side: killed particle Monte Carlo of
    // e^{Lambda t} e^{-<f, X_t>} <x o g, X_t> / <x, mu>
    let mut spec = build_scaling_family(model, k)?;
    spec.kill_above = Some(ctx.n);
    let fs: Vec<(usize, f64)> = f.support().filter(|&(i, _)| i <= ctx.n).collect();
    let growth = (lambda * t).exp();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| SpineError::Pool(e.to_string()))?;
    let sample_times = [t];
    let values: Vec<f64> = pool.install(|| {
        (0..reps)
            .into_par_iter()
            .map(|r| {
                let mut rng = replicate_stream(seed, r);
                let traj = simulate_with_rng(&spec, &init, &sample_times, &mut rng, &opts.caps);
                let snap = traj.snapshots.last().expect("one sample");
                let mut dot_f = 0.0;
                for &(i, fv) in &fs {
                    if let Some(&(_, c)) = snap.iter().find(|&&(j, _)| j == i) {
                        dot_f += fv * c as f64 / k as f64;
                    }
                }
                let mut dot_xg = 0.0;
                for &(i, c) in snap {
                    if i <= ctx.n {
                        dot_xg += x[i - 1] * g[i - 1] * c as f64 / k as f64;
                    }
                }
                growth * (-dot_f).exp() * dot_xg / x_mu
            })
            .collect()
    });
    let (lhs, lhs_se) = mean_stderr(&values);

    let z = if lhs_se > 0.0 {
        (lhs - rhs_ode) / lhs_se
    } else if (lhs - rhs_ode).abs() < 1e-12 {
        0.0
    } else {
        f64::INFINITY
    };
    let z_routes = if rhs_mc_se > 0.0 {
        (rhs_mc - rhs_ode) / rhs_mc_se
    } else if (rhs_mc - rhs_ode).abs() < 1e-12 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(SpineIdentityReport {
        lhs,
        lhs_se,
        rhs_ode,
        rhs_mc,
        rhs_mc_se,
        z,
        z_routes,
        inconclusive: lhs_se > opts.max_se,
        lambda,
    })
}

// ---------------------------------------------------------------------
// Spine path simulation with immigration marks
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkKind {
    /// Records the continuous-immigration rate `2c` at a segment start
    /// (the excursion intensity is only used through expectations; no
    /// mass is sampled).
    ContinuousRate,
    /// Poisson mark with intensity `u ell(eta_s, du)`.
    Discontinuous,
    /// Mass drawn from `nu_{i,j}` at a spine jump.
    Jump,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImmigrationMark {
    pub time: f64,
    pub kind: MarkKind,
    pub mass: f64,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpinePath {
    /// Segment start times; `times[0] = 0`.
    pub times: Vec<f64>,
    /// 1-based state per segment.
    pub states: Vec<usize>,
}

impl SpinePath {
    /// Occupation fraction per state up to `t_end`.
    pub fn occupation(&self, n: usize, t_end: f64) -> Vec<f64> {
        let mut occ = vec![0.0; n];
        for (k, &s) in self.states.iter().enumerate() {
            let a = self.times[k];
            let b = self.times.get(k + 1).copied().unwrap_or(t_end).min(t_end);
            if b > a {
                occ[s - 1] += b - a;
            }
        }
        for o in occ.iter_mut() {
            *o /= t_end;
        }
        occ
    }
}

/// Simulate the spine chain under the tilted generator and lay down the
/// three immigration mark streams.
pub fn simulate_spine(
    ctx: &SpineContext,
    start: usize,
    t_end: f64,
    seed: u64,
) -> Result<(SpinePath, Vec<ImmigrationMark>), SpineError> {
    if start == 0 || start > ctx.n {
        return Err(SpineError::UndefinedTransition { i: start, j: start });
    }
    let mut rng = replicate_stream(seed, 0);
    let n = ctx.n;
    let mut state = start;
    let mut t = 0.0f64;
    let mut times = vec![0.0];
    let mut states = vec![state];
    let mut marks = Vec::new();

    // precompute discontinuous intensities (first moments of ell) and
    // thinning tables
    let disc_rate: Vec<f64> = (0..n).map(|i0| ctx.tm.levy[i0].first_moment()).collect();

    marks.push(ImmigrationMark {
        time: 0.0,
        kind: MarkKind::ContinuousRate,
        mass: 2.0 * ctx.tm.c[state - 1],
        from: state,
        to: state,
    });

    while t < t_end {
        let i0 = state - 1;
        let jump_rate = -ctx.ltilde[(i0, i0)];
        let dwell = if jump_rate > 0.0 {
            let u: f64 = rng.gen();
            -(1.0 - u).ln() / jump_rate
        } else {
            f64::INFINITY
        };
        let seg_end = (t + dwell).min(t_end);
        // discontinuous marks on [t, seg_end)
        if disc_rate[i0] > 0.0 {
            let mut s = t;
            loop {
                let u: f64 = rng.gen();
                s += -(1.0 - u).ln() / disc_rate[i0];
                if s >= seg_end {
                    break;
                }
                // thin over atoms: mass u_a with probability m_a u_a / rate
                let mut pick: f64 = rng.gen::<f64>() * disc_rate[i0];
                let mut mass = 0.0;
                for &(u_a, m_a) in ctx.tm.levy[i0].atoms() {
                    let w = u_a * m_a;
                    if pick < w {
                        mass = u_a;
                        break;
                    }
                    pick -= w;
                }
                if mass == 0.0 {
                    if let Some(&(u_a, _)) = ctx.tm.levy[i0].atoms().last() {
                        mass = u_a;
                    }
                }
                marks.push(ImmigrationMark {
                    time: s,
                    kind: MarkKind::Discontinuous,
                    mass,
                    from: state,
                    to: state,
                });
            }
        }
        if t + dwell >= t_end {
            break;
        }
        t = seg_end;
        // jump target proportional to the off-diagonal tilted rates
        let mut pick: f64 = rng.gen::<f64>() * jump_rate;
        let mut target = state;
        for j0 in 0..n {
            if j0 != i0 {
                let rate = ctx.ltilde[(i0, j0)];
                if rate > 0.0 {
                    if pick < rate {
                        target = j0 + 1;
                        break;
                    }
                    pick -= rate;
                }
            }
        }
        let law = nu_law(ctx, state, target)?;
        let mass = law.sample(&mut rng);
        marks.push(ImmigrationMark {
            time: t,
            kind: MarkKind::Jump,
            mass,
            from: state,
            to: target,
        });
        state = target;
        times.push(t);
        states.push(state);
        marks.push(ImmigrationMark {
            time: t,
            kind: MarkKind::ContinuousRate,
            mass: 2.0 * ctx.tm.c[state - 1],
            from: state,
            to: state,
        });
    }
    Ok((SpinePath { times, states }, marks))
}

/// Growth diagnostics of the discounted immigration streams
/// `e^{lambda s} Delta_s` (finite sums indicate the summability used by
/// the martingale-convergence argument; diagnostic only).
#[derive(Debug, Clone, Copy)]
pub struct ImmigrationDiagnostics {
    pub discontinuous_sum: f64,
    pub jump_sum: f64,
    pub sup_discounted: f64,
    /// `max log(Delta)/s` over marks with mass at least one.
    pub max_log_growth: f64,
}

pub fn immigration_diagnostics(marks: &[ImmigrationMark], lambda: f64) -> ImmigrationDiagnostics {
    let mut d_sum = 0.0;
    let mut j_sum = 0.0;
    let mut sup = 0.0f64;
    let mut growth = f64::NEG_INFINITY;
    for m in marks {
        let disc = (lambda * m.time).exp() * m.mass;
        match m.kind {
            MarkKind::Discontinuous => d_sum += disc,
            MarkKind::Jump => j_sum += disc,
            MarkKind::ContinuousRate => continue,
        }
        sup = sup.max(disc);
        if m.mass >= 1.0 && m.time > 0.0 {
            growth = growth.max(m.mass.ln() / m.time);
        }
    }
    ImmigrationDiagnostics {
        discontinuous_sum: d_sum,
        jump_sum: j_sum,
        sup_discounted: sup,
        max_log_growth: growth,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model::{AtomicMeasure, LocalParams, NonLocalParams};

    #[test]
    fn context_symmetric_two_type() {
        let m = fixtures::two_type_symmetric_model();
        let ctx = build_spine_context(&m, 2).unwrap();
        // x = (1, 1), Lambda = 1/2: Ltilde = [[-1/2, 1/2], [1/2, -1/2]]
        assert!((ctx.ltilde[(0, 0)] + 0.5).abs() < 1e-10);
        assert!((ctx.ltilde[(0, 1)] - 0.5).abs() < 1e-10);
        assert!((ctx.ltilde[(1, 0)] - 0.5).abs() < 1e-10);
        assert!((ctx.ltilde[(1, 1)] + 0.5).abs() < 1e-10);
    }

    #[test]
    fn context_rows_sum_to_zero() {
        for (_, m) in [
            ("two", fixtures::two_type_model()),
            ("three", fixtures::three_type_model()),
        ] {
            let ctx = build_spine_context(&m, 3).unwrap();
            for i in 0..ctx.n {
                let sum: f64 = (0..ctx.n).map(|j| ctx.ltilde[(i, j)]).sum();
                assert!(sum.abs() < 1e-12, "row {i} sums to {sum}");
            }
        }
    }

    #[test]
    fn context_single_type() {
        let m = ModelSpec::Finite {
            local: vec![LocalParams {
                b: 0.7,
                c: 0.2,
                levy: AtomicMeasure::empty(),
            }],
            nonlocal: vec![NonLocalParams {
                beta: 0.0,
                d: 0.0,
                njump: AtomicMeasure::empty(),
            }],
            pi: vec![vec![]],
        };
        let ctx = build_spine_context(&m, 1).unwrap();
        assert_eq!(ctx.ltilde[(0, 0)], 0.0);
    }

    #[test]
    fn nu_point_mass_without_jumps() {
        let m = fixtures::two_type_symmetric_model();
        let ctx = build_spine_context(&m, 2).unwrap();
        let law = nu_law(&ctx, 1, 2).unwrap();
        assert_eq!(law.zero_weight, 1.0);
        assert!(law.atoms.is_empty());
        assert!((law.total_mass() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nu_pure_atom_and_mixed() {
        // d = 0, n = {(2, 0.5)}: all mass on the atom at 2
        let m = ModelSpec::Finite {
            local: vec![
                LocalParams {
                    b: 0.2,
                    c: 0.1,
                    levy: AtomicMeasure::empty(),
                };
                2
            ],
            nonlocal: vec![
                NonLocalParams {
                    beta: 0.5,
                    d: 0.0,
                    njump: AtomicMeasure::new(&[(2.0, 0.5)]).unwrap(),
                },
                NonLocalParams {
                    beta: 0.5,
                    d: 0.5,
                    njump: AtomicMeasure::new(&[(2.0, 0.25)]).unwrap(),
                },
            ],
            pi: vec![vec![(2, 1.0)], vec![(1, 1.0)]],
        };
        let ctx = build_spine_context(&m, 2).unwrap();
        let law1 = nu_law(&ctx, 1, 2).unwrap();
        assert_eq!(law1.zero_weight, 0.0);
        assert_eq!(law1.atoms, vec![(2.0, 1.0)]);
        // mixed: d = 0.5, n = {(2, 0.25)}: P(0) = 0.5, P(2) = 0.5
        let law2 = nu_law(&ctx, 2, 1).unwrap();
        assert!((law2.zero_weight - 0.5).abs() < 1e-14);
        assert_eq!(law2.atoms.len(), 1);
        assert!((law2.atoms[0].1 - 0.5).abs() < 1e-14);
        assert!((law2.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nu_rejects_inadmissible_transitions() {
        let m = fixtures::three_type_model();
        let ctx = build_spine_context(&m, 3).unwrap();
        assert!(matches!(
            nu_law(&ctx, 1, 1),
            Err(SpineError::UndefinedTransition { .. })
        ));
        // pi_2 = delta_3, so 2 -> 1 is not a spine jump
        assert!(matches!(
            nu_law(&ctx, 2, 1),
            Err(SpineError::UndefinedTransition { .. })
        ));
    }

    #[test]
    fn nu_normalisation_across_fixtures() {
        for (name, m) in fixtures::spectral_fixtures() {
            let n = match m.num_types() {
                Some(k) => k,
                None => 11,
            };
            let ctx = build_spine_context(&m, n).unwrap();
            for i in 1..=ctx.n {
                for &(j0, p) in &ctx.tm.rows[i - 1] {
                    if p > 0.0 && j0 + 1 != i {
                        let law = nu_law(&ctx, i, j0 + 1).unwrap();
                        assert!(
                            (law.total_mass() - 1.0).abs() < 1e-12,
                            "{name}: nu({i}, {}) mass {}",
                            j0 + 1,
                            law.total_mass()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn theta_neutral_cases() {
        let m = fixtures::two_type_symmetric_model(); // no jump measures
        let ctx = build_spine_context(&m, 2).unwrap();
        let f = TypeVector::from_pairs(&[(1, 0.7), (2, 0.3)]).unwrap();
        let th = theta_matrix(&m, &ctx, &f, 1.0, &CumulantOptions::default()).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(th[(i, j)], 1.0);
            }
        }
        // f = 0 on a model with jumps
        let m = fixtures::two_type_model();
        let ctx = build_spine_context(&m, 2).unwrap();
        let th = theta_matrix(&m, &ctx, &TypeVector::zero(), 1.0, &CumulantOptions::default())
            .unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(th[(i, j)], 1.0);
            }
        }
    }

    #[test]
    fn theta_equals_nu_laplace_transform() {
        // Theta_{ij} = E_nu[e^{-Delta <V, pi_i>}]: the edge factor is the
        // jump-mass discount
        let m = fixtures::two_type_model();
        let ctx = build_spine_context(&m, 2).unwrap();
        let f = TypeVector::from_pairs(&[(1, 0.5), (2, 0.25)]).unwrap();
        let vsol = integrate_cumulant(&m, &f, 1.0, 2, &CumulantOptions::default()).unwrap();
        let v = vsol.final_row();
        let th = theta_from_v(&ctx, v);
        for (i, j) in [(1usize, 2usize), (2, 1)] {
            let y = ctx.tm.inner(i - 1, v);
            let law = nu_law(&ctx, i, j).unwrap();
            assert!(
                (th[(i - 1, j - 1)] - law.laplace(y)).abs() < 1e-12,
                "({i},{j}): {} vs {}",
                th[(i - 1, j - 1)],
                law.laplace(y)
            );
        }
    }

    #[test]
    fn fk_semigroup_cases() {
        let m = fixtures::three_type_model();
        let gen = build_generator(&m, 3).unwrap();
        // Q = a (pi - I) on the truncation
        let tm = m.truncate(3).unwrap();
        let mut q = DMatrix::<f64>::zeros(3, 3);
        for i in 0..3 {
            q[(i, i)] = -tm.a[i];
            for &(j, p) in &tm.rows[i] {
                q[(i, j)] += tm.a[i] * p;
            }
        }
        let f = [0.3, 1.0, 0.6];
        // v = 0, edge = 1: plain semigroup
        let h = fk_expectation(&q, &[0.0; 3], None, &f, 0.8);
        let want = (q.clone() * 0.8).exp() * nalgebra::DVector::from_column_slice(&f);
        for i in 0..3 {
            assert!((h[i] - want[i]).abs() < 1e-12);
        }
        // constant potential: scalar factor e^{v0 t}
        let h2 = fk_expectation(&q, &[0.4; 3], None, &f, 0.8);
        for i in 0..3 {
            assert!((h2[i] - (0.4f64 * 0.8).exp() * h[i]).abs() < 1e-10);
        }
        // Feynman-Kac closure: P = Q + diag(a - b) reproduces exp(tL)
        let v: Vec<f64> = (0..3).map(|i| tm.a[i] - tm.b[i]).collect();
        let h3 = fk_expectation(&q, &v, None, &f, 0.8);
        let want3 = (gen.l.clone() * 0.8).exp() * nalgebra::DVector::from_column_slice(&f);
        for i in 0..3 {
            assert!((h3[i] - want3[i]).abs() < 1e-8, "{} vs {}", h3[i], want3[i]);
        }
    }

    #[test]
    fn fk_two_state_log2_edge() {
        // q12 = q21 = 1, edge = 2 off-diagonal, v = 0, f = 1:
        // P 1 = 1 so h(i, 1) = e
        let q = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]);
        let edge = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let h = fk_expectation(&q, &[0.0; 2], Some(&edge), &[1.0, 1.0], 1.0);
        for i in 0..2 {
            assert!(
                (h[i] - std::f64::consts::E).abs() < 1e-10,
                "{} vs e",
                h[i]
            );
        }
    }

    #[test]
    fn fk_td_matches_constant_case() {
        let q = DMatrix::from_row_slice(2, 2, &[-0.7, 0.7, 0.4, -0.4]);
        let f = [1.0, 0.2];
        let v = [0.3, -0.1];
        let edge = DMatrix::from_row_slice(2, 2, &[1.0, 1.5, 0.8, 1.0]);
        let want = fk_expectation(&q, &v, Some(&edge), &f, 1.3);
        let got = fk_expectation_td(
            &q,
            |i, _| v[i],
            |i, j, _| edge[(i, j)],
            &f,
            1.3,
            &StepControl::default(),
        )
        .unwrap();
        for i in 0..2 {
            assert!((got[i] - want[i]).abs() < 1e-8, "{} vs {}", got[i], want[i]);
        }
    }

    #[test]
    fn fk_path_mc_matches_matrix_exponential() {
        let q = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]);
        let f = [1.0, 0.4];
        let v = [0.25, -0.5];
        let edge = DMatrix::from_row_slice(2, 2, &[1.0, 1.3, 0.7, 1.0]);
        let want = fk_expectation(&q, &v, Some(&edge), &f, 1.0);
        let got = fk_path_mc(
            &q,
            |i, _| v[i],
            |i, j, _| edge[(i, j)],
            &f,
            1.0,
            40000,
            5,
            2,
            8,
        )
        .unwrap();
        for i in 0..2 {
            assert!(
                (got[i].estimate - want[i]).abs() < 3.0 * got[i].stderr,
                "start {i}: {} vs {} (se {})",
                got[i].estimate,
                want[i],
                got[i].stderr
            );
        }
    }

    #[test]
    fn fk_path_mc_substochastic_rows_kill() {
        // single state with pure exit: h(0, t) = e^{-t} f
        let q = DMatrix::from_row_slice(1, 1, &[-1.0]);
        let got = fk_path_mc(&q, |_, _| 0.0, |_, _, _| 1.0, &[2.0], 1.0, 30000, 9, 2, 4)
            .unwrap();
        let want = 2.0 * (-1.0f64).exp();
        assert!((got[0].estimate - want).abs() < 3.0 * got[0].stderr);
    }

    #[test]
    fn rhs_trivial_cases() {
        let m = fixtures::two_type_model();
        let ctx = build_spine_context(&m, 2).unwrap();
        let opts = SpineOptions::default();
        // g = 1, f = 0: the functional is exactly one
        let v = rhs_spine_functional_ode(&m, &ctx, &TypeVector::zero(), &[1.0, 1.0], 1.5, &opts)
            .unwrap();
        for &x in &v {
            assert!((x - 1.0).abs() < 1e-9, "{x}");
        }
        // f = 0, general g: reduces to the tilted semigroup
        let g = [0.3, 1.7];
        let v = rhs_spine_functional_ode(&m, &ctx, &TypeVector::zero(), &g, 0.9, &opts).unwrap();
        let want = fk_expectation(&ctx.ltilde, &[0.0; 2], None, &g, 0.9);
        for i in 0..2 {
            assert!((v[i] - want[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn rhs_routes_agree() {
        let m = fixtures::two_type_model();
        let ctx = build_spine_context(&m, 2).unwrap();
        let opts = SpineOptions::default();
        let f = TypeVector::from_pairs(&[(1, 0.5), (2, 0.25)]).unwrap();
        let g = [1.0, 0.6];
        let ode_v = rhs_spine_functional_ode(&m, &ctx, &f, &g, 1.0, &opts).unwrap();
        let mc_v =
            rhs_spine_functional_mc(&m, &ctx, &f, &g, 1.0, 30000, 7, 2, &opts).unwrap();
        for i in 0..2 {
            assert!(
                (ode_v[i] - mc_v[i].estimate).abs() < 3.0 * mc_v[i].stderr,
                "start {i}: {} vs {} (se {})",
                ode_v[i],
                mc_v[i].estimate,
                mc_v[i].stderr
            );
        }
    }

    #[test]
    fn identity_trivial_is_exact() {
        let m = fixtures::two_type_model();
        let report = spine_identity_check(
            &m,
            2,
            &TypeVector::from_pairs(&[(1, 1.0)]).unwrap(),
            &TypeVector::zero(),
            &[1.0, 1.0],
            1.0,
            100,
            4000,
            11,
            2,
            &SpineOptions::default(),
        )
        .unwrap();
        assert!((report.rhs_ode - 1.0).abs() < 1e-8);
        assert!(report.z.abs() <= 3.5, "z = {}", report.z);
    }

    #[test]
    fn spine_simulation_marks() {
        let m = fixtures::two_type_model();
        let ctx = build_spine_context(&m, 2).unwrap();
        let (path, marks) = simulate_spine(&ctx, 1, 200.0, 13).unwrap();
        assert!(path.states.len() > 10, "the seesaw spine keeps jumping");
        assert!(marks.iter().any(|m| m.kind == MarkKind::Discontinuous));
        assert!(marks.iter().any(|m| m.kind == MarkKind::Jump));
        // jump marks only at jump times
        for m in marks.iter().filter(|m| m.kind == MarkKind::Jump) {
            assert!(path.times.contains(&m.time));
            assert!(m.from != m.to);
        }
        let diag = immigration_diagnostics(&marks, ctx.spectrum.lambda);
        assert!(diag.discontinuous_sum.is_finite());
        assert!(diag.jump_sum.is_finite());
    }

    #[test]
    fn spine_without_measures_has_silent_marks() {
        let m = fixtures::two_type_symmetric_model();
        let ctx = build_spine_context(&m, 2).unwrap();
        let (_, marks) = simulate_spine(&ctx, 1, 100.0, 3).unwrap();
        assert!(marks.iter().all(|m| m.kind != MarkKind::Discontinuous));
        for m in marks.iter().filter(|m| m.kind == MarkKind::Jump) {
            assert_eq!(m.mass, 0.0);
        }
    }

    #[test]
    fn spine_occupation_matches_stationary_law() {
        let m = fixtures::two_type_model();
        let ctx = build_spine_context(&m, 2).unwrap();
        // oracle: solve y Ltilde = 0 directly
        let lt = &ctx.ltilde;
        // for a 2-state conservative chain: pi = (r2, r1)/(r1 + r2) with
        // r1 = rate(1 -> 2), r2 = rate(2 -> 1)
        let r1 = lt[(0, 1)];
        let r2 = lt[(1, 0)];
        let stat = [r2 / (r1 + r2), r1 / (r1 + r2)];
        // batch means for the error bar
        let batches = 60;
        let t_batch = 250.0;
        let mut occ1 = Vec::with_capacity(batches);
        for b in 0..batches {
            let (path, _) = simulate_spine(&ctx, 1 + (b % 2), t_batch, 1000 + b as u64).unwrap();
            occ1.push(path.occupation(2, t_batch)[0]);
        }
        let (mean, se) = mean_stderr(&occ1);
        assert!(
            (mean - stat[0]).abs() < 3.0 * se,
            "occupation {mean} vs {} (se {se})",
            stat[0]
        );
    }
}
