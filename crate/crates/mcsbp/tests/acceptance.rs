//! Acceptance suite: every numbered criterion below runs at its pinned
//! tolerance and budget and prints one pass/fail line. Run with
//! `cargo test --test acceptance -- --nocapture` to see the lines for
//! passing criteria too.

use mcsbp::cumulant::{integrate_cumulant, CumulantOptions};
use mcsbp::extinction::{
    classify_local_extinction, homogeneous_fixed_point_residual, homogeneous_reduce,
    solve_global_extinction, solve_local_extinction, ExtinctionOptions, LocalVerdict,
};
use mcsbp::fixtures;
use mcsbp::model::{ModelSpec, PlacementKernel, TypeVector};
use mcsbp::particle::{
    build_scaling_family, mbgw_laplace_ode, mc_laplace, mc_martingale_means, SimCaps,
};
use mcsbp::spectral::{
    build_generator, default_schedule, estimate_spectral_radius, kingman_decay, pf_eigen,
};
use mcsbp::spine::{
    build_spine_context, fk_expectation, fk_path_mc, nu_law, spine_identity_check, SpineOptions,
};
use mcsbp::ode::StepControl;
use std::time::Instant;

struct Criterion {
    id: u32,
    name: &'static str,
    budget_secs: f64,
}

struct Outcome {
    line: String,
    failed: Option<String>,
}

fn run_criterion(
    c: &Criterion,
    body: impl FnOnce() -> Result<String, String>,
) -> Outcome {
    let t0 = Instant::now();
    let result = body();
    let secs = t0.elapsed().as_secs_f64();
    match result {
        Ok(detail) => {
            let over = if secs > c.budget_secs {
                Some(format!(
                    "criterion {} ({}) exceeded its {}s budget: {:.1}s",
                    c.id, c.name, c.budget_secs, secs
                ))
            } else {
                None
            };
            Outcome {
                line: format!(
                    "criterion {:>2} ({}): {} ({:.2}s) {}",
                    c.id,
                    c.name,
                    if over.is_none() { "PASS" } else { "FAIL" },
                    secs,
                    detail
                ),
                failed: over,
            }
        }
        Err(msg) => Outcome {
            line: format!(
                "criterion {:>2} ({}): FAIL ({:.2}s) {}",
                c.id, c.name, secs, msg
            ),
            failed: Some(format!("criterion {} ({}): {}", c.id, c.name, msg)),
        },
    }
}

fn check(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

fn criterion_1() -> Result<String, String> {
    let schedule = [25usize, 50, 100, 200, 400];
    let est = kingman_decay(&PlacementKernel::PqWalk { p: 0.1 }, &schedule, 1e-12)
        .map_err(|e| e.to_string())?;
    check(
        (est.estimate - 0.4).abs() < 1e-3,
        format!("kappa(0.1) = {} not within 1e-3 of 0.4", est.estimate),
    )?;
    let est5 = kingman_decay(&PlacementKernel::PqWalk { p: 0.5 }, &schedule, 1e-12)
        .map_err(|e| e.to_string())?;
    check(
        est5.estimate.abs() < 1e-3,
        format!("kappa(0.5) = {} not within 1e-3 of 0", est5.estimate),
    )?;
    Ok(format!(
        "kappa(0.1) = {:.6}, kappa(0.5) = {:.2e}",
        est.estimate, est5.estimate
    ))
}

fn criterion_2() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for (name, model) in fixtures::spectral_fixtures() {
        let est = estimate_spectral_radius(&model, &default_schedule(), -1.0)
            .map_err(|e| format!("{name}: {e}"))?;
        for w in est.sequence.windows(2) {
            let violation = w[1].1 - w[0].1;
            worst = worst.max(violation);
            check(
                violation <= 1e-10,
                format!(
                    "{name}: Lambda^({}) = {} above Lambda^({}) = {}",
                    w[1].0, w[1].1, w[0].0, w[0].1
                ),
            )?;
        }
    }
    Ok(format!("5 fixtures monotone; worst violation {worst:.2e}"))
}

fn criterion_3() -> Result<String, String> {
    let model = fixtures::example1_model();
    let est = estimate_spectral_radius(&model, &default_schedule(), 1e-12)
        .map_err(|e| e.to_string())?;
    let (n_last, lambda_last, _) = *est.sequence.last().unwrap();
    check(
        n_last == 800,
        format!("schedule stopped early at n = {n_last}"),
    )?;
    check(
        (lambda_last - 0.1).abs() <= 2e-3,
        format!("Lambda^(800) = {lambda_last} not within 2e-3 of 0.1"),
    )?;
    let mech = homogeneous_reduce(&model).map_err(|e| e.to_string())?;
    check(
        (mech.root - 0.3).abs() <= 1e-6,
        format!("global w = {} not within 1e-6 of 0.3", mech.root),
    )?;
    let p_ext = mech.extinction_probability();
    check(
        (p_ext - (-0.3f64).exp()).abs() <= 1e-6,
        format!("P(extinction) = {p_ext} not within 1e-6 of e^-0.3"),
    )?;
    check(
        p_ext < 1.0 - 1e-6,
        "global verdict should be survives-with-positive-probability".into(),
    )?;
    let verdict = classify_local_extinction(&model, &[1], &default_schedule(), 1e-3)
        .map_err(|e| e.to_string())?;
    check(
        verdict.verdict == LocalVerdict::AlmostSure,
        format!("local verdict {:?} should be almost-sure", verdict.verdict),
    )?;
    Ok(format!(
        "Lambda^(800) = {lambda_last:.6}, w = {:.8}, P(E) = {p_ext:.8}, local a.s. + global survives",
        mech.root
    ))
}

fn criterion_4() -> Result<String, String> {
    let opts = ExtinctionOptions::default();
    let mut worst_residual: f64 = 0.0;
    let mut worst_order: f64 = f64::NEG_INFINITY;
    // finite fixtures: solver is exact (no killing), local vs global
    for (name, model, m) in [
        ("two-type", fixtures::two_type_model(), 2usize),
        ("three-type", fixtures::three_type_model(), 3usize),
    ] {
        let w = solve_global_extinction(&model, m, &opts).map_err(|e| format!("{name}: {e}"))?;
        let v = solve_local_extinction(&model, &[1], m, &opts)
            .map_err(|e| format!("{name}: {e}"))?;
        worst_residual = worst_residual.max(w.residual).max(v.residual);
        for i in 0..m {
            worst_order = worst_order.max(v.w[i] - w.w[i]);
            check(
                v.w[i] <= w.w[i] + 1e-8,
                format!("{name}: v_A({}) = {} above w = {}", i + 1, v.w[i], w.w[i]),
            )?;
        }
        check(
            w.residual < 1e-6 && v.residual < 1e-6,
            format!("{name}: residuals {:.2e}, {:.2e}", w.residual, v.residual),
        )?;
    }
    // homogeneous fixtures: exact global root, killed local solve below it
    for (name, model) in [
        ("example1", fixtures::example1_model()),
        ("example2", fixtures::example2_model()),
        ("example3", fixtures::example3_model()),
        ("pq-quarter", fixtures::pq_quarter_model()),
    ] {
        let mech = homogeneous_reduce(&model).map_err(|e| format!("{name}: {e}"))?;
        let resid = homogeneous_fixed_point_residual(&model, mech.root)
            .map_err(|e| format!("{name}: {e}"))?;
        worst_residual = worst_residual.max(resid);
        check(
            resid < 1e-6,
            format!("{name}: residual {resid:.2e} at the root"),
        )?;
        let v = solve_local_extinction(&model, &[1], 41, &opts)
            .map_err(|e| format!("{name}: {e}"))?;
        worst_residual = worst_residual.max(v.residual);
        check(v.residual < 1e-6, format!("{name}: v_A residual {:.2e}", v.residual))?;
        for (i, &vi) in v.w.iter().enumerate() {
            worst_order = worst_order.max(vi - mech.root);
            check(
                vi <= mech.root + 1e-8,
                format!("{name}: v_A({}) = {vi} above w = {}", i + 1, mech.root),
            )?;
        }
    }
    Ok(format!(
        "worst residual {worst_residual:.2e}, worst v_A - w = {worst_order:.2e}"
    ))
}

fn criterion_5() -> Result<String, String> {
    let model = fixtures::three_type_model();
    let mu = TypeVector::from_pairs(&[(1, 1.0)]).unwrap();
    let f = TypeVector::from_pairs(&[(1, 0.4), (2, 0.3), (3, 0.5)]).unwrap();
    let t = 1.0;
    let sol = integrate_cumulant(&model, &f, t, 3, &CumulantOptions::default())
        .map_err(|e| e.to_string())?;
    let target = (-mu.dot_dense(sol.final_row())).exp();
    let caps = SimCaps::default();
    let reps = 100_000u64;
    let mut results = Vec::new();
    for (k, seed) in [(50u32, 501u64), (100, 502), (200, 503)] {
        let est = mc_laplace(&model, &mu, &f, t, k, reps, seed, 2, &caps)
            .map_err(|e| e.to_string())?;
        check(est.valid, format!("k = {k}: too many capped replicates"))?;
        results.push((k, est));
    }
    let (_, last) = results[2];
    check(
        (last.estimate - target).abs() <= 3.0 * last.stderr + 0.5 / 200.0,
        format!(
            "k = 200: |{} - {target}| above 3 se + 0.5/k (se {})",
            last.estimate, last.stderr
        ),
    )?;
    for w in results.windows(2) {
        let (ka, a) = w[0];
        let (kb, b) = w[1];
        let bias_a = (a.estimate - target).abs();
        let bias_b = (b.estimate - target).abs();
        let slack = 2.0 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
        check(
            bias_b <= bias_a + slack,
            format!("bias increased from k={ka} ({bias_a:.2e}) to k={kb} ({bias_b:.2e})"),
        )?;
    }
    Ok(format!(
        "target {target:.6}; biases {:.2e}/{:.2e}/{:.2e} at k=50/100/200",
        (results[0].1.estimate - target).abs(),
        (results[1].1.estimate - target).abs(),
        (results[2].1.estimate - target).abs()
    ))
}

fn criterion_6() -> Result<String, String> {
    let spec = fixtures::three_type_mbgw();
    let f = TypeVector::from_pairs(&[(1, 0.4), (2, 0.3), (3, 0.5)]).unwrap();
    let t = 1.0;
    let u = mbgw_laplace_ode(&spec, &f, t, 3, &StepControl::default())
        .map_err(|e| e.to_string())?;
    let init_counts = [3.0f64, 2.0, 1.0];
    let target = (-(u[0] * init_counts[0] + u[1] * init_counts[1] + u[2] * init_counts[2])).exp();
    // direct unscaled particle run
    use mcsbp::particle::{simulate_mbgw, Population};
    let init = Population {
        counts: vec![3, 2, 1],
        scale: 1,
    };
    let reps = 100_000u64;
    let caps = SimCaps::default();
    let fs: Vec<(usize, f64)> = f.support().collect();
    let mut sum = 0.0f64;
    let mut sq = 0.0f64;
    for r in 0..reps {
        let traj = simulate_mbgw(&spec, &init, &[t], 600 + r, &caps);
        let mut dot = 0.0;
        for &(i, fv) in &fs {
            dot += fv * traj.count_at(0, i) as f64;
        }
        let v = (-dot).exp();
        sum += v;
        sq += v * v;
    }
    let mean = sum / reps as f64;
    let var = (sq / reps as f64 - mean * mean).max(0.0);
    let se = (var / reps as f64).sqrt();
    check(
        (mean - target).abs() <= 3.0 * se,
        format!("|{mean} - {target}| above 3 se ({se:.2e})"),
    )?;
    Ok(format!("mc {mean:.6} vs renewal-equation {target:.6} (se {se:.1e})"))
}

fn criterion_7() -> Result<String, String> {
    let model = fixtures::three_type_model();
    let gen = build_generator(&model, 3).map_err(|e| e.to_string())?;
    let spec = pf_eigen(&gen).map_err(|e| e.to_string())?;
    let mu = TypeVector::from_pairs(&[(1, 1.0)]).unwrap();
    let w0 = spec.x[0];
    let ts = [0.5, 1.0, 2.0];
    let means = mc_martingale_means(
        &model,
        3,
        &mu,
        &spec.x,
        spec.lambda,
        &ts,
        100,
        100_000,
        701,
        2,
        &SimCaps::default(),
    )
    .map_err(|e| e.to_string())?;
    let mut detail = String::new();
    for (t, est) in ts.iter().zip(&means) {
        check(
            (est.estimate - w0).abs() <= 3.0 * est.stderr,
            format!(
                "E[W_{t}] = {} not within 3 se ({:.2e}) of W_0 = {w0}",
                est.estimate, est.stderr
            ),
        )?;
        detail.push_str(&format!("E[W_{t}] = {:.5} ", est.estimate));
    }
    Ok(format!("{detail}(W_0 = {w0})"))
}

fn criterion_8() -> Result<String, String> {
    let model = fixtures::two_type_model();
    let mu = TypeVector::from_pairs(&[(1, 1.0)]).unwrap();
    let f = TypeVector::from_pairs(&[(1, 0.5), (2, 0.25)]).unwrap();
    let g = [1.0, 1.0];
    let report = spine_identity_check(
        &model,
        2,
        &mu,
        &f,
        &g,
        1.0,
        200,
        100_000,
        801,
        2,
        &SpineOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    check(
        !report.inconclusive,
        format!("inconclusive at the rep budget (se {:.2e})", report.lhs_se),
    )?;
    check(
        report.z.abs() <= 3.0,
        format!(
            "|z| = {:.2} > 3 (lhs {} vs rhs {})",
            report.z.abs(),
            report.lhs,
            report.rhs_ode
        ),
    )?;
    check(
        (report.rhs_mc - report.rhs_ode).abs() <= 3.0 * report.rhs_mc_se,
        format!(
            "theta-ode {} vs path-mc {} beyond 3 se ({:.2e})",
            report.rhs_ode, report.rhs_mc, report.rhs_mc_se
        ),
    )?;
    Ok(format!(
        "lhs {:.6} rhs {:.6} z = {:+.2}, routes z = {:+.2}",
        report.lhs, report.rhs_ode, report.z, report.z_routes
    ))
}

fn criterion_9() -> Result<String, String> {
    let model = fixtures::three_type_model();
    let gen = build_generator(&model, 3).map_err(|e| e.to_string())?;
    let tm = model.truncate(3).map_err(|e| e.to_string())?;
    let t = 0.8;
    // the chain of the mean flow and its potential
    let mut q = nalgebra::DMatrix::<f64>::zeros(3, 3);
    for i in 0..3 {
        q[(i, i)] = -tm.a[i];
        for &(j, p) in &tm.rows[i] {
            q[(i, j)] += tm.a[i] * p;
        }
    }
    let v: Vec<f64> = (0..3).map(|i| tm.a[i] - tm.b[i]).collect();
    let flow = (gen.l.clone() * t).exp();
    // deterministic closure: every column of exp(tL) within 1e-8
    let mut worst: f64 = 0.0;
    for j in 0..3 {
        let mut f = [0.0; 3];
        f[j] = 1.0;
        let h = fk_expectation(&q, &v, None, &f, t);
        for i in 0..3 {
            let err = (h[i] - flow[(i, j)]).abs();
            worst = worst.max(err);
            check(
                err <= 1e-8,
                format!("column {j}: |{} - {}| = {err:.2e} at row {i}", h[i], flow[(i, j)]),
            )?;
        }
    }
    // path Monte Carlo within 3 se
    let f = [0.3, 1.0, 0.6];
    let want = fk_expectation(&q, &v, None, &f, t);
    let got = fk_path_mc(&q, |i, _| v[i], |_, _, _| 1.0, &f, t, 100_000, 901, 2, 4)
        .map_err(|e| e.to_string())?;
    for i in 0..3 {
        check(
            (got[i].estimate - want[i]).abs() <= 3.0 * got[i].stderr,
            format!(
                "path-mc start {}: {} vs {} (se {:.2e})",
                i + 1,
                got[i].estimate,
                want[i],
                got[i].stderr
            ),
        )?;
    }
    Ok(format!("matrix route worst error {worst:.1e}; path-mc within 3 se"))
}

fn criterion_10() -> Result<String, String> {
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    let mut all: Vec<(&'static str, ModelSpec)> = fixtures::spectral_fixtures();
    all.push(("two-type", fixtures::two_type_model()));
    for (name, model) in all {
        let n = model.num_types().unwrap_or(11);
        let ctx = build_spine_context(&model, n).map_err(|e| format!("{name}: {e}"))?;
        for i in 1..=ctx.n {
            for &(j0, p) in &ctx.tm.rows[i - 1] {
                if p > 0.0 && j0 + 1 != i {
                    let law = nu_law(&ctx, i, j0 + 1).map_err(|e| format!("{name}: {e}"))?;
                    let err = (law.total_mass() - 1.0).abs();
                    worst = worst.max(err);
                    checked += 1;
                    check(
                        err <= 1e-12,
                        format!("{name}: nu({i},{}) mass error {err:.2e}", j0 + 1),
                    )?;
                }
            }
        }
    }
    Ok(format!("{checked} transition laws, worst error {worst:.1e}"))
}

#[test]
fn acceptance() {
    let criteria = [
        Criterion { id: 1, name: "kingman decay", budget_secs: 10.0 },
        Criterion { id: 2, name: "spectral monotonicity", budget_secs: 30.0 },
        Criterion { id: 3, name: "example-1 discrepancy regime", budget_secs: 120.0 },
        Criterion { id: 4, name: "fixed-point residuals", budget_secs: 120.0 },
        Criterion { id: 5, name: "mc-ode laplace agreement", budget_secs: 180.0 },
        Criterion { id: 6, name: "pre-limit renewal oracle", budget_secs: 60.0 },
        Criterion { id: 7, name: "martingale flatness", budget_secs: 120.0 },
        Criterion { id: 8, name: "spine identity", budget_secs: 180.0 },
        Criterion { id: 9, name: "feynman-kac closure", budget_secs: 60.0 },
        Criterion { id: 10, name: "nu-law normalisation", budget_secs: 30.0 },
    ];
    let bodies: Vec<Box<dyn FnOnce() -> Result<String, String>>> = vec![
        Box::new(criterion_1),
        Box::new(criterion_2),
        Box::new(criterion_3),
        Box::new(criterion_4),
        Box::new(criterion_5),
        Box::new(criterion_6),
        Box::new(criterion_7),
        Box::new(criterion_8),
        Box::new(criterion_9),
        Box::new(criterion_10),
    ];
    let mut failures = Vec::new();
    for (c, body) in criteria.iter().zip(bodies) {
        let outcome = run_criterion(c, body);
        println!("{}", outcome.line);
        if let Some(f) = outcome.failed {
            failures.push(f);
        }
    }
    assert!(
        failures.is_empty(),
        "acceptance criteria failed:\n{}",
        failures.join("\n")
    );
}
