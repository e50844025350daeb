use crate::config::FlagLayer;
use anyhow::Result;
use mcsbp::extinction::{
    classify_local_extinction, solve_global_extinction, solve_local_extinction,
    ExtinctionOptions, LocalVerdict,
};
use mcsbp::model::load_model;
use mcsbp::spectral::default_schedule;
use serde_json::json;
use std::path::Path;

pub fn run(
    model_path: &Path,
    set: &[usize],
    n: usize,
    schedule: Option<&[usize]>,
    flags: &FlagLayer,
) -> Result<i32> {
    let model = load_model(model_path)?;
    let schedule = schedule
        .map(|s| s.to_vec())
        .unwrap_or_else(default_schedule);
    let opts = ExtinctionOptions::default();
    let w = solve_global_extinction(&model, n, &opts)?;
    let v = solve_local_extinction(&model, set, n, &opts)?;
    let verdict = classify_local_extinction(&model, set, &schedule, 1e-3)?;
    let verdict_name = match verdict.verdict {
        LocalVerdict::AlmostSure => "almost-sure",
        LocalVerdict::SurvivesWithPositiveProbability => "survives-with-positive-probability",
        LocalVerdict::Indeterminate => "indeterminate",
    };
    let report = json!({
        "n": w.n,
        "set": set,
        "w": w.w,
        "v_A": v.w,
        "residuals": { "w": w.residual, "v_A": v.residual },
        "lambda": {
            "sequence": verdict.lambda.sequence.iter()
                .map(|&(n, l, r)| json!({"n": n, "lambda": l, "residual": r}))
                .collect::<Vec<_>>(),
            "estimate": verdict.lambda.estimate,
            "converged": verdict.lambda.converged,
        },
        "verdict": verdict_name,
        "xlogx": verdict.xlogx.iter()
            .map(|&(i, (l, nn))| json!({"type": i, "levy": l, "njump": nn}))
            .collect::<Vec<_>>(),
    });
    super::emit_json(flags.out.as_deref(), &report)?;
    Ok(0)
}
