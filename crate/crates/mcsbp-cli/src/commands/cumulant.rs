use crate::bundle::fmt;
use crate::config::FlagLayer;
use crate::specparse::parse_type_vector;
use anyhow::Result;
use mcsbp::cumulant::{integrate_cumulant, CumulantOptions};
use mcsbp::model::load_model;
use std::path::Path;

pub fn run(
    model_path: &Path,
    f_spec: &str,
    t: f64,
    n: usize,
    grid: usize,
    flags: &FlagLayer,
) -> Result<i32> {
    let model = load_model(model_path)?;
    let f = parse_type_vector(f_spec, n)?;
    let opts = CumulantOptions {
        grid,
        ..CumulantOptions::default()
    };
    let sol = integrate_cumulant(&model, &f, t, n, &opts)?;
    let mut rows = Vec::with_capacity(sol.grid_len() * sol.n);
    for k in 0..sol.grid_len() {
        let time = sol.times[k];
        for i in 1..=sol.n {
            rows.push(vec![fmt(time), i.to_string(), fmt(sol.value(k, i))]);
        }
    }
    super::emit_table(flags.out.as_deref(), &["t", "i", "V"], &rows)?;
    Ok(0)
}
