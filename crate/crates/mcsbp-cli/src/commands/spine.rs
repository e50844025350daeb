use crate::config::{ExperimentConfig, FlagLayer};
use crate::specparse::parse_type_vector;
use anyhow::Result;
use mcsbp::model::load_model;
use mcsbp::spine::{spine_identity_check, SpineOptions};
use mcsbp::model::TypeVector;
use serde_json::json;
use std::path::Path;

#[allow(clippy::too_many_arguments)]
pub fn run(
    model_path: &Path,
    n: usize,
    f_spec: &str,
    g_spec: &str,
    t: f64,
    k: u32,
    reps: u64,
    flags: &FlagLayer,
) -> Result<i32> {
    let model = load_model(model_path)?;
    let cfg = ExperimentConfig::resolve(None, flags)?;
    let seed = cfg.require_seed()?;
    let workers = cfg.workers_or_default();
    let f = parse_type_vector(f_spec, n)?;
    let g = parse_type_vector(g_spec, n)?.dense(n);
    let mu = TypeVector::from_pairs(&[(1, 1.0)])?;
    let report = spine_identity_check(
        &model,
        n,
        &mu,
        &f,
        &g,
        t,
        k,
        reps,
        seed,
        workers,
        &SpineOptions::default(),
    )?;
    let out = json!({
        "lhs": report.lhs,
        "rhs": report.rhs_ode,
        "se": report.lhs_se,
        "z": report.z,
        "rhs_path_mc": report.rhs_mc,
        "rhs_path_mc_se": report.rhs_mc_se,
        "z_routes": report.z_routes,
        "inconclusive": report.inconclusive,
        "lambda": report.lambda,
    });
    super::emit_json(flags.out.as_deref(), &out)?;
    Ok(if report.inconclusive { 2 } else { 0 })
}
