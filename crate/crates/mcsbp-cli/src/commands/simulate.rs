use crate::bundle::fmt;
use crate::config::{ExperimentConfig, FlagLayer};
use crate::specparse::parse_type_vector;
use crate::EstimateKind;
use anyhow::{bail, Context, Result};
use mcsbp::model::{load_model, TypeVector};
use mcsbp::particle::{
    build_scaling_family, mc_extinction_by_t, mc_laplace, mc_martingale_means, simulate_mbgw,
    Population, SimCaps,
};
use mcsbp::spectral::{build_generator, pf_eigen};
use serde_json::json;
use std::path::Path;

#[allow(clippy::too_many_arguments)]
pub fn run(
    model_path: &Path,
    k: u32,
    t: f64,
    reps: u64,
    estimate: Option<EstimateKind>,
    f_spec: Option<&str>,
    n: Option<usize>,
    mu_spec: Option<&str>,
    flags: &FlagLayer,
) -> Result<i32> {
    let model = load_model(model_path)?;
    let cfg = ExperimentConfig::resolve(None, flags)?;
    let seed = cfg.require_seed()?;
    let workers = cfg.workers_or_default();
    let caps = SimCaps::default();
    let n_default = model.num_types().unwrap_or(25);
    let nn = n.unwrap_or(n_default);
    let mu = match mu_spec {
        Some(s) => parse_type_vector(s, nn)?,
        None => TypeVector::from_pairs(&[(1, 1.0)])?,
    };

    match estimate {
        None => {
            // raw trajectories at five evenly spaced snapshot times
            let spec = build_scaling_family(&model, k)?;
            let init = Population::from_mass(&mu, k);
            let times: Vec<f64> = (1..=5).map(|j| t * j as f64 / 5.0).collect();
            let mut rows = Vec::new();
            for rep in 0..reps {
                let traj = simulate_mbgw(&spec, &init, &times, seed.wrapping_add(rep), &caps);
                for (s, snap) in traj.snapshots.iter().enumerate() {
                    for &(i, c) in snap {
                        rows.push(vec![
                            rep.to_string(),
                            fmt(times[s]),
                            i.to_string(),
                            c.to_string(),
                        ]);
                    }
                }
            }
            super::emit_table(flags.out.as_deref(), &["rep", "t", "type", "count"], &rows)?;
        }
        Some(EstimateKind::Laplace) => {
            let f_spec = f_spec.context("--estimate laplace needs --f")?;
            let f = parse_type_vector(f_spec, nn)?;
            let est = mc_laplace(&model, &mu, &f, t, k, reps, seed, workers, &caps)?;
            let report = json!({
                "estimator": "laplace",
                "estimate": est.estimate,
                "stderr": est.stderr,
                "reps": est.reps,
                "truncated_reps": est.truncated_reps,
                "valid": est.valid,
            });
            super::emit_json(flags.out.as_deref(), &report)?;
            if !est.valid {
                bail!("more than 1% of replicates hit a simulation cap");
            }
        }
        Some(EstimateKind::Extinction) => {
            let est = mc_extinction_by_t(&model, &mu, t, k, reps, seed, workers, &caps)?;
            let report = json!({
                "estimator": "extinction",
                "estimate": est.estimate,
                "stderr": est.stderr,
                "reps": est.reps,
                "truncated_reps": est.truncated_reps,
                "valid": est.valid,
            });
            super::emit_json(flags.out.as_deref(), &report)?;
        }
        Some(EstimateKind::Martingale) => {
            let gen = build_generator(&model, nn)?;
            let spec = pf_eigen(&gen)?;
            let times: Vec<f64> = (1..=4).map(|j| t * j as f64 / 4.0).collect();
            let means = mc_martingale_means(
                &model, nn, &mu, &spec.x, spec.lambda, &times, k, reps, seed, workers, &caps,
            )?;
            let report = json!({
                "estimator": "martingale",
                "lambda": spec.lambda,
                "times": times,
                "means": means.iter().map(|e| e.estimate).collect::<Vec<_>>(),
                "stderrs": means.iter().map(|e| e.stderr).collect::<Vec<_>>(),
            });
            super::emit_json(flags.out.as_deref(), &report)?;
        }
    }
    Ok(0)
}
