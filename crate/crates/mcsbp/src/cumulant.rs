//! The cumulant evolution: `V_t f` solves
//!
//! ```text
//! dV_t(i)/dt = -[ psi(i, V_t(i)) + phi(i, V_t) ],    V_0 = f,
//! ```
//!
//! on a truncation `[n]`, where `phi` reads `V_t` only inside `[n]` (mass
//! placed on higher types contributes zero, matching the killed process).
//! Laplace functionals are `E_mu exp(-<f, X_t>) = exp(-<V_t f, mu>)`.

use crate::model::{ModelError, ModelSpec, TruncatedModel, TypeVector};
use crate::ode::{self, OdeError, StepControl};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CumulantError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("integration failed: {0}")]
    Integration(#[from] OdeError),
    #[error("domain error: {0}")]
    Domain(String),
}

#[derive(Debug, Clone, Copy)]
pub struct CumulantOptions {
    pub step: StepControl,
    /// Number of uniform output intervals (grid has `grid + 1` points).
    pub grid: usize,
}

impl Default for CumulantOptions {
    fn default() -> Self {
        Self {
            step: StepControl::default(),
            grid: 256,
        }
    }
}

/// `V_t f` on a truncation over a uniform time grid, with the largest
/// accepted local-error estimate of the integrator.
#[derive(Debug, Clone)]
pub struct CumulantSolution {
    pub n: usize,
    pub times: Vec<f64>,
    /// Row-major `(times.len()) x n` values; `V(t_k, i) >= 0`.
    values: Vec<f64>,
    pub max_local_error: f64,
}

impl CumulantSolution {
    pub fn grid_len(&self) -> usize {
        self.times.len()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.n..(k + 1) * self.n]
    }

    pub fn value(&self, k: usize, i: usize) -> f64 {
        self.row(k)[i - 1]
    }

    pub fn final_row(&self) -> &[f64] {
        self.row(self.times.len() - 1)
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Cubic (4-point Lagrange) interpolation in time, writing all `n`
    /// components at time `t` into `out`.
    pub fn interpolate(&self, t: f64, out: &mut [f64]) {
        let m = self.times.len();
        assert!(out.len() == self.n);
        if m == 1 {
            out.copy_from_slice(self.row(0));
            return;
        }
        let t0 = self.times[0];
        let t_end = self.horizon();
        let h = (t_end - t0) / (m - 1) as f64;
        let t = t.clamp(t0, t_end);
        // choose a 4-point stencil around t
        let pos = ((t - t0) / h).floor() as usize;
        let lo = pos.saturating_sub(1).min(m.saturating_sub(4));
        let stencil = 4.min(m);
        let lo = if m >= 4 { lo } else { 0 };
        for x in out.iter_mut() {
            *x = 0.0;
        }
        for a in 0..stencil {
            let ta = self.times[lo + a];
            let mut w = 1.0;
            for b in 0..stencil {
                if a != b {
                    let tb = self.times[lo + b];
                    w *= (t - tb) / (ta - tb);
                }
            }
            let row = self.row(lo + a);
            for i in 0..self.n {
                out[i] += w * row[i];
            }
        }
    }
}

/// Integrate the cumulant evolution from `f` to horizon `t_end` on `[n]`.
pub fn integrate_cumulant(
    model: &ModelSpec,
    f: &TypeVector,
    t_end: f64,
    n: usize,
    opts: &CumulantOptions,
) -> Result<CumulantSolution, CumulantError> {
    if !(t_end >= 0.0) {
        return Err(CumulantError::Domain(format!(
            "horizon must be >= 0, got {t_end}"
        )));
    }
    let tm = model.truncate(n)?;
    let f0 = f.dense(tm.n);
    if f0.iter().any(|&v| v < 0.0) {
        return Err(CumulantError::Domain(
            "initial condition must be non-negative".into(),
        ));
    }
    integrate_cumulant_truncated(&tm, f0, t_end, opts)
}

/// Dense-workhorse variant used by the solvers that already hold a
/// truncated view.
pub fn integrate_cumulant_truncated(
    tm: &TruncatedModel,
    f0: Vec<f64>,
    t_end: f64,
    opts: &CumulantOptions,
) -> Result<CumulantSolution, CumulantError> {
    let n = tm.n;
    let grid = opts.grid.max(1);
    let mut times = Vec::with_capacity(grid + 1);
    let mut values = Vec::with_capacity((grid + 1) * n);
    times.push(0.0);
    values.extend_from_slice(&f0);

    if t_end == 0.0 {
        return Ok(CumulantSolution {
            n,
            times,
            values,
            max_local_error: 0.0,
        });
    }

    let mut y = f0;
    let mut rhs = |_t: f64, v: &[f64], dv: &mut [f64]| tm.cumulant_rhs(v, dv);
    let mut max_err = 0.0f64;
    for k in 1..=grid {
        let t_from = t_end * (k - 1) as f64 / grid as f64;
        let t_to = t_end * k as f64 / grid as f64;
        let err = ode::integrate(&mut rhs, &mut y, t_from, t_to, &opts.step)?;
        if err > max_err {
            max_err = err;
        }
        // the exact solution stays non-negative; clip integrator wiggle
        for v in y.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        times.push(t_to);
        values.extend_from_slice(&y);
    }
    Ok(CumulantSolution {
        n,
        times,
        values,
        max_local_error: max_err,
    })
}

/// `E_mu[e^{-<f, X_t>}] = exp(-<V_t f, mu>)`, a value in (0, 1].
pub fn laplace_functional(
    model: &ModelSpec,
    mu: &TypeVector,
    f: &TypeVector,
    t_end: f64,
    n: usize,
    opts: &CumulantOptions,
) -> Result<f64, CumulantError> {
    if mu.support().any(|(_, v)| v < 0.0) {
        return Err(CumulantError::Domain("mu must be non-negative".into()));
    }
    if mu.max_support() > n {
        return Err(CumulantError::Domain(format!(
            "mu has support above the truncation: type {} > n = {n}",
            mu.max_support()
        )));
    }
    let sol = integrate_cumulant(model, f, t_end, n, opts)?;
    Ok((-mu.dot_dense(sol.final_row())).exp())
}
