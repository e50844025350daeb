//! Classical 4th-order Runge-Kutta with a Richardson step-halving error
//! estimate. Steps are bisected while the estimated local error exceeds
//! the control and re-grown when it is comfortably below; a step-size
//! underflow is reported as an error carrying the last good time.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("step size underflow at t = {t} (local error {err:.3e} vs tol {tol:.3e})")]
    StepUnderflow { t: f64, err: f64, tol: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct StepControl {
    /// Target for the estimated local error per step (sup norm).
    pub local_tol: f64,
    /// Hard floor on the step size, relative to the span being integrated.
    pub min_step_rel: f64,
    /// Initial step, relative to the span. Adapted from there.
    pub initial_step_rel: f64,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            local_tol: 1e-9,
            min_step_rel: 1e-13,
            initial_step_rel: 1.0 / 64.0,
        }
    }
}

/// Stage buffers so repeated integrations do not allocate.
struct Stages {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    arg: Vec<f64>,
}

impl Stages {
    fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            arg: vec![0.0; dim],
        }
    }
}

fn rk4_step<F>(rhs: &mut F, t: f64, y: &[f64], h: f64, st: &mut Stages, out: &mut [f64])
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let dim = y.len();
    rhs(t, y, &mut st.k1);
    for i in 0..dim {
        st.arg[i] = y[i] + 0.5 * h * st.k1[i];
    }
    rhs(t + 0.5 * h, &st.arg, &mut st.k2);
    for i in 0..dim {
        st.arg[i] = y[i] + 0.5 * h * st.k2[i];
    }
    rhs(t + 0.5 * h, &st.arg, &mut st.k3);
    for i in 0..dim {
        st.arg[i] = y[i] + h * st.k3[i];
    }
    rhs(t + h, &st.arg, &mut st.k4);
    for i in 0..dim {
        out[i] = y[i] + h / 6.0 * (st.k1[i] + 2.0 * st.k2[i] + 2.0 * st.k3[i] + st.k4[i]);
    }
}

/// Integrate `y' = rhs(t, y)` in place from `t0` to `t1`, returning the
/// largest accepted local-error estimate.
pub fn integrate<F>(
    rhs: &mut F,
    y: &mut Vec<f64>,
    t0: f64,
    t1: f64,
    ctrl: &StepControl,
) -> Result<f64, OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let span = t1 - t0;
    if span <= 0.0 {
        return Ok(0.0);
    }
    let dim = y.len();
    let mut st = Stages::new(dim);
    let mut full = vec![0.0; dim];
    let mut mid = vec![0.0; dim];
    let mut half = vec![0.0; dim];
    let min_step = span * ctrl.min_step_rel;
    let mut h = span * ctrl.initial_step_rel;
    let mut t = t0;
    let mut max_err = 0.0f64;

    while t < t1 {
        if h > t1 - t {
            h = t1 - t;
        }
        // one full step vs two half steps; Richardson error for order 4
        rk4_step(rhs, t, y, h, &mut st, &mut full);
        rk4_step(rhs, t, y, 0.5 * h, &mut st, &mut mid);
        rk4_step(rhs, t + 0.5 * h, &mid, 0.5 * h, &mut st, &mut half);

        let mut err = 0.0f64;
        for i in 0..dim {
            err = err.max((half[i] - full[i]).abs());
        }
        err /= 15.0;

        if err <= ctrl.local_tol {
            t += h;
            y.copy_from_slice(&half);
            if err > max_err {
                max_err = err;
            }
            if err < ctrl.local_tol / 64.0 {
                h *= 2.0;
            }
        } else if h <= min_step {
            return Err(OdeError::StepUnderflow {
                t,
                err,
                tol: ctrl.local_tol,
            });
        } else {
            h *= 0.5;
        }
    }
    Ok(max_err)
}
