use crate::bundle::fmt;
use crate::config::FlagLayer;
use anyhow::{bail, Result};
use mcsbp::model::{load_model, ModelSpec};
use mcsbp::spectral::{default_schedule, estimate_spectral_radius, kingman_decay};
use std::path::Path;

pub fn run(
    model_path: &Path,
    schedule: Option<&[usize]>,
    kingman: bool,
    flags: &FlagLayer,
) -> Result<i32> {
    let model = load_model(model_path)?;
    let schedule = schedule
        .map(|s| s.to_vec())
        .unwrap_or_else(default_schedule);
    if kingman {
        let kernel = match &model {
            ModelSpec::Homogeneous { kernel, .. } => kernel.clone(),
            _ => bail!("--kingman needs a homogeneous model with a placement kernel"),
        };
        let est = kingman_decay(&kernel, &schedule, 1e-12)?;
        let rows: Vec<Vec<String>> = est
            .sequence
            .iter()
            .map(|&(n, kappa)| vec![n.to_string(), fmt(kappa)])
            .collect();
        super::emit_table(flags.out.as_deref(), &["n", "kappa_n"], &rows)?;
        eprintln!(
            "kappa estimate {} (converged: {})",
            est.estimate, est.converged
        );
    } else {
        let est = estimate_spectral_radius(&model, &schedule, 1e-12)?;
        let rows: Vec<Vec<String>> = est
            .sequence
            .iter()
            .map(|&(n, lambda, residual)| vec![n.to_string(), fmt(lambda), fmt(residual)])
            .collect();
        super::emit_table(flags.out.as_deref(), &["n", "lambda_n", "residual"], &rows)?;
        eprintln!(
            "Lambda estimate {} (converged: {})",
            est.estimate, est.converged
        );
    }
    Ok(0)
}
