//! Exact branching-particle simulation and the scaling families that
//! approximate a continuous-mass mechanism.
//!
//! A particle of type `i` lives an exponential time with rate
//! `gamma(i) = alpha(i) + beta(i)`; at death it is replaced, with
//! probability `alpha/gamma`, by a local offspring count drawn from
//! `p(i)` placed at `i`, and otherwise by a count drawn from `q(i)`
//! placed i.i.d. by `pi_i`. Mass-`1/k` rescalings of these systems with
//! laws built by [`build_scaling_family`] converge to the
//! continuous-state process with the prescribed `(psi, phi)`, which is
//! what the Monte Carlo estimators here cross-check.
//!
//! Replicates own private RNG streams derived from `(seed, replicate)`
//! via the cipher's stream parameter, and every estimator reduces
//! per-replicate values in fixed index order, so results do not depend
//! on the worker count.

use crate::model::{ModelError, ModelSpec, PlacementKernel, TypeVector};
use crate::model::{zigzag_index, zigzag_site};
use crate::ode::{self, OdeError, StepControl};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParticleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("offspring law malformed: {0}")]
    BadLaw(String),
    #[error("scale k = {k} infeasible; minimum feasible k is {min_k}")]
    InfeasibleScale { k: u32, min_k: u32 },
    #[error("trajectory visits type {0} outside the supplied vector")]
    VectorTooShort(usize),
    #[error(transparent)]
    Integration(#[from] OdeError),
    #[error("thread pool: {0}")]
    Pool(String),
}

/// Finite-support offspring count law.
#[derive(Debug, Clone, PartialEq)]
pub struct OffspringLaw {
    entries: Vec<(u32, f64)>,
}

impl OffspringLaw {
    pub fn new(entries: &[(u32, f64)]) -> Result<Self, ParticleError> {
        let mut es: Vec<(u32, f64)> = Vec::new();
        for &(n, p) in entries {
            if !(p >= 0.0) || !p.is_finite() {
                return Err(ParticleError::BadLaw(format!("weight {p} at count {n}")));
            }
            if p > 0.0 {
                es.push((n, p));
            }
        }
        es.sort_by_key(|&(n, _)| n);
        let mut merged: Vec<(u32, f64)> = Vec::with_capacity(es.len());
        for (n, p) in es {
            match merged.last_mut() {
                Some(last) if last.0 == n => last.1 += p,
                _ => merged.push((n, p)),
            }
        }
        let total: f64 = merged.iter().map(|&(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(ParticleError::BadLaw(format!("weights sum to {total}")));
        }
        Ok(Self { entries: merged })
    }

    pub fn point(n: u32) -> Self {
        Self {
            entries: vec![(n, 1.0)],
        }
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn mean(&self) -> f64 {
        self.entries.iter().map(|&(n, p)| n as f64 * p).sum()
    }

    /// Probability generating function `sum p_n s^n`.
    pub fn generating(&self, s: f64) -> f64 {
        self.entries
            .iter()
            .map(|&(n, p)| p * s.powi(n as i32))
            .sum()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> u32 {
        let mut u: f64 = rng.gen();
        for &(n, p) in &self.entries {
            if u < p {
                return n;
            }
            u -= p;
        }
        self.entries.last().map(|&(n, _)| n).unwrap_or(0)
    }
}

/// Branch parameters of one type; `gamma = alpha + beta` by definition.
#[derive(Debug, Clone, PartialEq)]
pub struct MbgwTypeParams {
    pub alpha: f64,
    pub beta: f64,
    pub local: OffspringLaw,
    pub nonlocal: OffspringLaw,
}

impl MbgwTypeParams {
    pub fn gamma(&self) -> f64 {
        self.alpha + self.beta
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MbgwParams {
    Finite(Vec<MbgwTypeParams>),
    Homogeneous(Box<MbgwTypeParams>),
}

impl From<Vec<MbgwTypeParams>> for MbgwParams {
    fn from(v: Vec<MbgwTypeParams>) -> Self {
        MbgwParams::Finite(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MbgwPlacement {
    /// Explicit full rows, 1-based targets.
    Rows(Vec<Vec<(usize, f64)>>),
    Kernel(PlacementKernel),
}

/// A branching Markov chain specification. `kill_above = Some(n)`
/// discards offspring placed outside `[n]` at birth.
#[derive(Debug, Clone, PartialEq)]
pub struct MbgwSpec {
    pub params: MbgwParams,
    pub placement: MbgwPlacement,
    pub kill_above: Option<usize>,
}

impl MbgwSpec {
    pub fn type_params(&self, i: usize) -> &MbgwTypeParams {
        match &self.params {
            MbgwParams::Finite(v) => &v[i - 1],
            MbgwParams::Homogeneous(p) => p,
        }
    }

    pub fn num_types(&self) -> Option<usize> {
        match &self.params {
            MbgwParams::Finite(v) => Some(v.len()),
            MbgwParams::Homogeneous(_) => None,
        }
    }

    fn sample_target(&self, i: usize, rng: &mut ChaCha8Rng) -> usize {
        match &self.placement {
            MbgwPlacement::Rows(rows) => {
                let row = &rows[i - 1];
                let mut u: f64 = rng.gen();
                for &(j, p) in row {
                    if u < p {
                        return j;
                    }
                    u -= p;
                }
                row.last().map(|&(j, _)| j).unwrap_or(i)
            }
            MbgwPlacement::Kernel(PlacementKernel::PqWalk { p }) => {
                let site = zigzag_site(i);
                if rng.gen::<f64>() < *p {
                    zigzag_index(site + 1)
                } else {
                    zigzag_index(site - 1)
                }
            }
        }
    }

    /// Placement rows restricted to `[n]` plus the killed tail mass.
    fn killed_rows(&self, n: usize) -> (Vec<Vec<(usize, f64)>>, Vec<f64>) {
        let mut rows = Vec::with_capacity(n);
        let mut tails = Vec::with_capacity(n);
        for i in 1..=n {
            let full: Vec<(usize, f64)> = match &self.placement {
                MbgwPlacement::Rows(r) => r[i - 1].clone(),
                MbgwPlacement::Kernel(k) => k.row(i),
            };
            let mut row = Vec::new();
            let mut kept = 0.0;
            for (j, p) in full {
                if j <= n {
                    row.push((j - 1, p));
                    kept += p;
                }
            }
            rows.push(row);
            tails.push((1.0 - kept).max(0.0));
        }
        (rows, tails)
    }
}

/// Particle counts per type with the mass scale (mass per particle is
/// `1/scale`).
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub counts: Vec<u64>,
    pub scale: u32,
}

impl Population {
    /// Round a mass configuration to particle counts at scale `k`.
    pub fn from_mass(mu: &TypeVector, k: u32) -> Self {
        let n = mu.max_support();
        let mut counts = vec![0u64; n];
        for (i, v) in mu.support() {
            counts[i - 1] = (v * k as f64).round().max(0.0) as u64;
        }
        Population { counts, scale: k }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimCaps {
    pub max_events: u64,
    pub max_particles: u64,
}

impl Default for SimCaps {
    fn default() -> Self {
        Self {
            max_events: 20_000_000,
            max_particles: 10_000_000,
        }
    }
}

/// One simulated path: sparse snapshots at the requested sample times.
/// `truncated` marks paths stopped by a cap (remaining snapshots carry
/// the state at the stop).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sample_times: Vec<f64>,
    /// Sparse non-zero counts, 1-based types, sorted.
    pub snapshots: Vec<Vec<(usize, u64)>>,
    pub scale: u32,
    pub seed: u64,
    pub events: u64,
    pub truncated: bool,
}

impl Trajectory {
    pub fn count_at(&self, snapshot: usize, i: usize) -> u64 {
        self.snapshots[snapshot]
            .iter()
            .find(|&&(j, _)| j == i)
            .map(|&(_, c)| c)
            .unwrap_or(0)
    }

    pub fn total_at(&self, snapshot: usize) -> u64 {
        self.snapshots[snapshot].iter().map(|&(_, c)| c).sum()
    }
}

fn exp_time(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    let u: f64 = rng.gen();
    -(1.0 - u).ln() / rate
}

fn sparse(counts: &[u64]) -> Vec<(usize, u64)> {
    counts
        .iter()
        .enumerate()
        .filter(|&(_, &c)| c > 0)
        .map(|(i0, &c)| (i0 + 1, c))
        .collect()
}

/// Exact event-driven simulation (no leaping): total event rate
/// `sum_i counts(i) gamma(i)`, reproducible from the seed.
pub fn simulate_mbgw(
    spec: &MbgwSpec,
    init: &Population,
    sample_times: &[f64],
    seed: u64,
    caps: &SimCaps,
) -> Trajectory {
    let mut rng = replicate_stream(seed, 0);
    let mut traj = simulate_with_rng(spec, init, sample_times, &mut rng, caps);
    traj.seed = seed;
    traj
}

pub(crate) fn replicate_stream(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

pub(crate) fn simulate_with_rng(
    spec: &MbgwSpec,
    init: &Population,
    sample_times: &[f64],
    rng: &mut ChaCha8Rng,
    caps: &SimCaps,
) -> Trajectory {
    debug_assert!(sample_times.windows(2).all(|w| w[0] < w[1]));
    let t_end = sample_times.last().copied().unwrap_or(0.0);
    let mut counts = init.counts.clone();
    if let Some(n) = spec.kill_above {
        counts.truncate(n);
    }
    if let Some(m) = spec.num_types() {
        counts.truncate(m);
    }
    let gamma_of = |i: usize| spec.type_params(i).gamma();
    let mut total_rate: f64 = counts
        .iter()
        .enumerate()
        .map(|(i0, &c)| c as f64 * gamma_of(i0 + 1))
        .sum();
    let mut total_particles: u64 = counts.iter().sum();

    let mut snapshots: Vec<Vec<(usize, u64)>> = Vec::with_capacity(sample_times.len());
    let mut next_sample = 0usize;
    let mut t = 0.0f64;
    let mut events = 0u64;
    let mut truncated = false;

    'outer: loop {
        let t_next = if total_rate > 0.0 {
            t + exp_time(rng, total_rate)
        } else {
            f64::INFINITY
        };
        while next_sample < sample_times.len() && sample_times[next_sample] <= t_next {
            snapshots.push(sparse(&counts));
            next_sample += 1;
        }
        if next_sample >= sample_times.len() || t_next > t_end {
            break;
        }
        t = t_next;
        events += 1;

        // pick the branching type proportional to counts * gamma
        let mut pick: f64 = rng.gen::<f64>() * total_rate;
        let mut chosen = 0usize;
        let mut found = false;
        for (i0, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let r = c as f64 * gamma_of(i0 + 1);
            if pick < r {
                chosen = i0 + 1;
                found = true;
                break;
            }
            pick -= r;
        }
        if !found {
            // rounding at the cumulative tail: take the last active type
            match counts.iter().rposition(|&c| c > 0) {
                Some(i0) => chosen = i0 + 1,
                None => break,
            }
        }

        let params = spec.type_params(chosen);
        let gamma = params.gamma();
        counts[chosen - 1] -= 1;
        total_particles -= 1;
        total_rate -= gamma;

        if rng.gen::<f64>() * gamma < params.alpha {
            let n = params.local.sample(rng);
            counts[chosen - 1] += n as u64;
            total_particles += n as u64;
            total_rate += n as f64 * gamma;
        } else {
            let n = params.nonlocal.sample(rng);
            for _ in 0..n {
                let j = spec.sample_target(chosen, rng);
                if let Some(nn) = spec.kill_above {
                    if j > nn {
                        continue;
                    }
                }
                if let Some(m) = spec.num_types() {
                    if j > m {
                        continue;
                    }
                }
                if j > counts.len() {
                    counts.resize(j, 0);
                }
                counts[j - 1] += 1;
                total_particles += 1;
                total_rate += gamma_of(j);
            }
        }

        // periodic re-accumulation against floating-point drift
        if events % 16384 == 0 {
            total_rate = counts
                .iter()
                .enumerate()
                .map(|(i0, &c)| c as f64 * gamma_of(i0 + 1))
                .sum();
        }

        if events >= caps.max_events || total_particles >= caps.max_particles {
            truncated = true;
            while next_sample < sample_times.len() {
                snapshots.push(sparse(&counts));
                next_sample += 1;
            }
            break 'outer;
        }
    }

    Trajectory {
        sample_times: sample_times.to_vec(),
        snapshots,
        scale: init.scale,
        seed: 0,
        events,
        truncated,
    }
}

/// Smallest scale at which the offspring construction below is valid
/// for the given model.
pub fn min_feasible_scale(model: &ModelSpec, probe_types: usize) -> Result<u32, ParticleError> {
    let upto = match model.num_types() {
        Some(m) => m,
        None => probe_types.max(1).min(1),
    };
    let mut min_k = 1u64;
    for i in 1..=upto {
        let lp = model.local(i)?;
        let np = model.nonlocal(i)?;
        for &(u, _) in lp.levy.atoms().iter().chain(np.njump.atoms()) {
            min_k = min_k.max((2.0 / u).ceil() as u64);
        }
        let njump_mass: f64 = np.njump.atoms().iter().map(|&(_, m)| m).sum();
        if njump_mass > 0.0 {
            // q_0 >= 0 needs d + sum m / k <= 1; d < 1 is implied by the
            // mass bound whenever atoms exist
            min_k = min_k.max((njump_mass / (1.0 - np.d)).ceil() as u64);
        }
    }
    Ok(min_k.min(u32::MAX as u64) as u32)
}

/// Offspring laws realising the mechanism at scale `k`:
///
/// - local law on `{0, 1, 2} ∪ {floor(k u)}` with `alpha p_2 = c k` (plus
///   any negative-drift excess), `k alpha p_{floor(ku)} = m_u`, and the
///   0-vs-2 balance matching the linear coefficient;
/// - non-local law on `{0, 1} ∪ {floor(k u)}` with weight `d` at one and
///   `m_u / k` at `floor(k u)`.
///
/// With these, the rescaled mechanism reproduces the drift and quadratic
/// parts exactly for every feasible `k`, and the jump terms up to the
/// `floor(k u)/k` discretisation.
pub fn build_scaling_family(model: &ModelSpec, k: u32) -> Result<MbgwSpec, ParticleError> {
    let min_k = min_feasible_scale(model, 1)?;
    if k < min_k {
        return Err(ParticleError::InfeasibleScale { k, min_k });
    }
    let kf = k as f64;
    let build_one = |i: usize| -> Result<MbgwTypeParams, ParticleError> {
        let lp = model.local(i)?;
        let np = model.nonlocal(i)?;
        // local law
        let mut excess = lp.b - np.beta + lp.c * kf;
        for &(u, m) in lp.levy.atoms() {
            excess += m * ((kf * u).floor() - 1.0) / kf;
        }
        let p0_mass = excess.max(0.0);
        let p2_mass = lp.c * kf + (-excess).max(0.0);
        let mut masses: Vec<(u32, f64)> = Vec::new();
        if p0_mass > 0.0 {
            masses.push((0, p0_mass));
        }
        if p2_mass > 0.0 {
            masses.push((2, p2_mass));
        }
        for &(u, m) in lp.levy.atoms() {
            masses.push(((kf * u).floor() as u32, m / kf));
        }
        let alpha: f64 = masses.iter().map(|&(_, m)| m).sum();
        let local = if alpha > 0.0 {
            let mut probs: Vec<(u32, f64)> = masses
                .iter()
                .map(|&(n, m)| (n, m / alpha))
                .collect();
            let covered: f64 = probs.iter().map(|&(_, p)| p).sum();
            if 1.0 - covered > 1e-15 {
                probs.push((1, 1.0 - covered));
            }
            OffspringLaw::new(&probs)?
        } else {
            OffspringLaw::point(1)
        };
        // non-local law
        let mut q: Vec<(u32, f64)> = Vec::new();
        let mut q_mass = 0.0;
        if np.d > 0.0 {
            q.push((1, np.d));
            q_mass += np.d;
        }
        for &(u, m) in np.njump.atoms() {
            q.push(((kf * u).floor() as u32, m / kf));
            q_mass += m / kf;
        }
        if 1.0 - q_mass > 1e-15 {
            q.push((0, 1.0 - q_mass));
        }
        let nonlocal = if q.is_empty() {
            OffspringLaw::point(0)
        } else {
            OffspringLaw::new(&q)?
        };
        Ok(MbgwTypeParams {
            alpha,
            beta: np.beta,
            local,
            nonlocal,
        })
    };

    let params = match model.num_types() {
        Some(m) => MbgwParams::Finite((1..=m).map(build_one).collect::<Result<_, _>>()?),
        None => MbgwParams::Homogeneous(Box::new(build_one(1)?)),
    };
    let placement = match model {
        ModelSpec::Finite { pi, .. } => MbgwPlacement::Rows(pi.clone()),
        ModelSpec::Homogeneous { kernel, .. } => MbgwPlacement::Kernel(kernel.clone()),
    };
    Ok(MbgwSpec {
        params,
        placement,
        kill_above: None,
    })
}

/// The rescaled local mechanism realised by a scaling-family type:
/// `psi_k(z) = k alpha [g(1 - z/k) - (1 - z/k)] + beta z`.
pub fn psi_of_scaled(params: &MbgwTypeParams, k: u32, z: f64) -> f64 {
    let kf = k as f64;
    let s = 1.0 - z / kf;
    kf * params.alpha * (params.local.generating(s) - s) + params.beta * z
}

/// The rescaled non-local mechanism:
/// `phi_k(y) = beta k [h(1 - y/k) - 1]` at `y = <f, pi_i>`.
pub fn phi_of_scaled(params: &MbgwTypeParams, k: u32, y: f64) -> f64 {
    let kf = k as f64;
    params.beta * kf * (params.nonlocal.generating(1.0 - y / kf) - 1.0)
}

/// Laplace exponent `u_t` of the particle system on `[n]` (killed
/// outside), by integrating the autonomous flow of `w = e^{-u}`:
///
/// ```text
/// dw_i/dt = alpha_i [g_i(w_i) - w_i] + beta_i [h_i(<w, pi_i> + tail_i) - w_i],
/// ```
///
/// with `w_0 = e^{-f}`. Offspring killed outside `[n]` contribute
/// factor one, hence the `tail` term. Serves as the deterministic
/// oracle for the simulator via `E[e^{-<f, Y_t>}] = e^{-<u_t, mu>}`.
pub fn mbgw_laplace_ode(
    spec: &MbgwSpec,
    f: &TypeVector,
    t_end: f64,
    n: usize,
    step: &StepControl,
) -> Result<Vec<f64>, ParticleError> {
    let n = match spec.num_types() {
        Some(m) => n.min(m),
        None => n,
    };
    let (rows, tails) = spec.killed_rows(n);
    let params: Vec<&MbgwTypeParams> = (1..=n).map(|i| spec.type_params(i)).collect();
    let mut w: Vec<f64> = (1..=n).map(|i| (-f.get(i)).exp()).collect();
    let mut rhs = |_t: f64, w: &[f64], dw: &mut [f64]| {
        for i0 in 0..n {
            let p = params[i0];
            let inner: f64 = rows[i0].iter().map(|&(j0, pj)| pj * w[j0]).sum::<f64>() + tails[i0];
            dw[i0] = p.alpha * (p.local.generating(w[i0]) - w[i0])
                + p.beta * (p.nonlocal.generating(inner) - w[i0]);
        }
    };
    ode::integrate(&mut rhs, &mut w, 0.0, t_end, step)?;
    Ok(w
        .iter()
        .map(|&x| -x.clamp(1e-300, 1.0).ln())
        .collect())
}

/// A Monte Carlo estimate with its standard error. `valid` is false
/// when more than 1% of replicates hit a simulation cap.
#[derive(Debug, Clone, Copy)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub reps: u64,
    pub truncated_reps: u64,
    pub valid: bool,
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    // fixed-order compensated sums keep results worker-count invariant
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    let mean = (sum + comp) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|&v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n * (n - 1.0))).sqrt())
}

fn run_replicates<F>(
    reps: u64,
    seed: u64,
    workers: usize,
    job: F,
) -> Result<Vec<(f64, bool)>, ParticleError>
where
    F: Fn(&mut ChaCha8Rng) -> (f64, bool) + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| ParticleError::Pool(e.to_string()))?;
    Ok(pool.install(|| {
        (0..reps)
            .into_par_iter()
            .map(|r| {
                let mut rng = replicate_stream(seed, r);
                job(&mut rng)
            })
            .collect()
    }))
}

fn finish(values: Vec<(f64, bool)>) -> McEstimate {
    let reps = values.len() as u64;
    let truncated_reps = values.iter().filter(|&&(_, t)| t).count() as u64;
    let vals: Vec<f64> = values.into_iter().map(|(v, _)| v).collect();
    let (estimate, stderr) = mean_stderr(&vals);
    McEstimate {
        estimate,
        stderr,
        reps,
        truncated_reps,
        valid: (truncated_reps as f64) <= 0.01 * reps as f64,
    }
}

/// Mean of `e^{-<f, X_T>}` over independent rescaled replicates at
/// scale `k`, started from `round(k mu)` particles.
pub fn mc_laplace(
    model: &ModelSpec,
    mu: &TypeVector,
    f: &TypeVector,
    t_end: f64,
    k: u32,
    reps: u64,
    seed: u64,
    workers: usize,
    caps: &SimCaps,
) -> Result<McEstimate, ParticleError> {
    let spec = build_scaling_family(model, k)?;
    let init = Population::from_mass(mu, k);
    let sample_times = [t_end.max(0.0)];
    let fs: Vec<(usize, f64)> = f.support().collect();
    let values = run_replicates(reps, seed, workers, |rng| {
        let traj = simulate_with_rng(&spec, &init, &sample_times, rng, caps);
        let last = traj.snapshots.last().expect("one sample time");
        let mut dot = 0.0;
        for &(i, fv) in &fs {
            if let Some(&(_, c)) = last.iter().find(|&&(j, _)| j == i) {
                dot += fv * c as f64 / k as f64;
            }
        }
        ((-dot).exp(), traj.truncated)
    })?;
    Ok(finish(values))
}

/// Frequency of global extinction by time `T` (empty population at or
/// before `T`).
pub fn mc_extinction_by_t(
    model: &ModelSpec,
    mu: &TypeVector,
    t_end: f64,
    k: u32,
    reps: u64,
    seed: u64,
    workers: usize,
    caps: &SimCaps,
) -> Result<McEstimate, ParticleError> {
    let spec = build_scaling_family(model, k)?;
    let init = Population::from_mass(mu, k);
    let sample_times = [t_end.max(0.0)];
    let values = run_replicates(reps, seed, workers, |rng| {
        let traj = simulate_with_rng(&spec, &init, &sample_times, rng, caps);
        let extinct = traj.total_at(traj.snapshots.len() - 1) == 0;
        (if extinct { 1.0 } else { 0.0 }, traj.truncated)
    })?;
    Ok(finish(values))
}

/// `W_t = e^{lambda t} <x, X_t>` at the snapshot times of a trajectory.
pub fn martingale_path(
    traj: &Trajectory,
    x: &[f64],
    lambda: f64,
) -> Result<Vec<f64>, ParticleError> {
    let mut out = Vec::with_capacity(traj.snapshots.len());
    for (snap, &t) in traj.snapshots.iter().zip(&traj.sample_times) {
        let mut dot = 0.0;
        for &(i, c) in snap {
            if i > x.len() {
                return Err(ParticleError::VectorTooShort(i));
            }
            dot += x[i - 1] * c as f64 / traj.scale as f64;
        }
        out.push((lambda * t).exp() * dot);
    }
    Ok(out)
}

/// Batch martingale means `E[W_t]` with standard errors, on the process
/// killed outside `[n]`.
pub fn mc_martingale_means(
    model: &ModelSpec,
    n: usize,
    mu: &TypeVector,
    x: &[f64],
    lambda: f64,
    sample_times: &[f64],
    k: u32,
    reps: u64,
    seed: u64,
    workers: usize,
    caps: &SimCaps,
) -> Result<Vec<McEstimate>, ParticleError> {
    let mut spec = build_scaling_family(model, k)?;
    spec.kill_above = Some(n);
    let init = Population::from_mass(mu, k);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| ParticleError::Pool(e.to_string()))?;
    let rows: Result<Vec<(Vec<f64>, bool)>, ParticleError> = pool.install(|| {
        (0..reps)
            .into_par_iter()
            .map(|r| {
                let mut rng = replicate_stream(seed, r);
                let traj = simulate_with_rng(&spec, &init, sample_times, &mut rng, caps);
                Ok((martingale_path(&traj, x, lambda)?, traj.truncated))
            })
            .collect()
    });
    let rows = rows?;
    let mut out = Vec::with_capacity(sample_times.len());
    for idx in 0..sample_times.len() {
        let vals: Vec<(f64, bool)> = rows.iter().map(|(w, tr)| (w[idx], *tr)).collect();
        out.push(finish(vals));
    }
    Ok(out)
}
