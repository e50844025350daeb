//! Cross-module invariants: order and boundedness of the cumulant flow,
//! the semigroup property, truncation monotonicity, stochasticity of the
//! tilted semigroup, and the particle/moment-flow agreement.

use mcsbp::cumulant::{integrate_cumulant, CumulantOptions};
use mcsbp::fixtures;
use mcsbp::model::{
    eval_phi, eval_psi, AtomicMeasure, LocalParams, ModelSpec, NonLocalParams, TypeVector,
};
use mcsbp::particle::{build_scaling_family, simulate_mbgw, Population, SimCaps};
use mcsbp::spectral::build_generator;
use mcsbp::spine::build_spine_context;
use proptest::prelude::*;

/// Random small irreducible models: a cycle on `m` types with bounded
/// parameters and optional atoms.
fn small_model_strategy() -> impl Strategy<Value = ModelSpec> {
    (2usize..4)
        .prop_flat_map(|m| {
            let local = proptest::collection::vec(
                (-0.5f64..0.8, 0.0f64..0.5, proptest::option::of((0.2f64..2.0, 0.05f64..0.5))),
                m..=m,
            );
            let nonlocal = proptest::collection::vec(
                (0.0f64..0.8, 0.0f64..0.8, proptest::option::of((0.2f64..1.5, 0.05f64..0.3))),
                m..=m,
            );
            (Just(m), local, nonlocal)
        })
        .prop_map(|(m, local, nonlocal)| {
            let local = local
                .into_iter()
                .map(|(b, c, atom)| LocalParams {
                    b,
                    c,
                    levy: atom
                        .map(|(u, w)| AtomicMeasure::new(&[(u, w)]).unwrap())
                        .unwrap_or_else(AtomicMeasure::empty),
                })
                .collect();
            let nonlocal = nonlocal
                .into_iter()
                .map(|(beta, d, atom)| {
                    let njump = atom
                        .map(|(u, w)| AtomicMeasure::new(&[(u, w)]).unwrap())
                        .unwrap_or_else(AtomicMeasure::empty);
                    // keep the non-local mass bound d + int u n <= 1
                    let mass = njump.first_moment();
                    let d = if d + mass > 1.0 { (1.0 - mass).max(0.0) } else { d };
                    NonLocalParams { beta, d, njump }
                })
                .collect();
            let pi = (1..=m).map(|i| vec![(i % m + 1, 1.0)]).collect();
            ModelSpec::Finite { local, nonlocal, pi }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cumulant_monotone_in_f(model in small_model_strategy(), seed_vals in proptest::collection::vec(0.0f64..1.5, 4), bumps in proptest::collection::vec(0.0f64..0.8, 4)) {
        let m = model.num_types().unwrap();
        let opts = CumulantOptions { grid: 32, ..CumulantOptions::default() };
        let f_pairs: Vec<(usize, f64)> = (1..=m).map(|i| (i, seed_vals[(i - 1) % seed_vals.len()])).collect();
        let g_pairs: Vec<(usize, f64)> = (1..=m).map(|i| (i, seed_vals[(i - 1) % seed_vals.len()] + bumps[(i - 1) % bumps.len()])).collect();
        let f = TypeVector::from_pairs(&f_pairs).unwrap();
        let g = TypeVector::from_pairs(&g_pairs).unwrap();
        let vf = integrate_cumulant(&model, &f, 1.0, m, &opts).unwrap();
        let vg = integrate_cumulant(&model, &g, 1.0, m, &opts).unwrap();
        for k in 0..vf.grid_len() {
            for i in 0..m {
                prop_assert!(vf.row(k)[i] <= vg.row(k)[i] + 1e-9,
                    "V_t monotone: {} > {} at (k={k}, i={i})", vf.row(k)[i], vg.row(k)[i]);
            }
        }
    }

    #[test]
    fn cumulant_bounded_a_priori(model in small_model_strategy(), theta in 0.1f64..2.0) {
        let m = model.num_types().unwrap();
        let opts = CumulantOptions { grid: 32, ..CumulantOptions::default() };
        let f = TypeVector::constant(theta, m);
        let sol = integrate_cumulant(&model, &f, 1.5, m, &opts).unwrap();
        let sup_b = (1..=m).map(|i| model.local(i).unwrap().b.abs()).fold(0.0, f64::max);
        let sup_beta = (1..=m).map(|i| model.nonlocal(i).unwrap().beta).fold(0.0, f64::max);
        let c_rate = sup_b + sup_beta;
        for k in 0..sol.grid_len() {
            let t = sol.times[k];
            let bound = 2.0 * theta * (c_rate * t).exp();
            for i in 0..m {
                prop_assert!(sol.row(k)[i] >= 0.0);
                prop_assert!(sol.row(k)[i] <= bound,
                    "V = {} exceeds bound {bound} at t = {t}", sol.row(k)[i]);
            }
        }
    }

    #[test]
    fn psi_convex_and_phi_ordered(model in small_model_strategy(), z in 0.0f64..3.0) {
        let m = model.num_types().unwrap();
        for i in 1..=m {
            let h = 0.05f64;
            let a = eval_psi(&model, i, z).unwrap();
            let b = eval_psi(&model, i, z + h).unwrap();
            let c = eval_psi(&model, i, z + 2.0 * h).unwrap();
            prop_assert!(c - 2.0 * b + a >= -1e-10);
            // phi(f) <= 0 with equality iff the inner product vanishes
            let f = TypeVector::constant(z, m);
            let phi = eval_phi(&model, i, &f).unwrap();
            prop_assert!(phi <= 0.0);
            if z > 0.0 && model.nonlocal(i).unwrap().beta > 0.0
                && model.nonlocal(i).unwrap().d > 0.0 {
                prop_assert!(phi < 0.0);
            }
        }
    }
}

#[test]
fn semigroup_property_three_type() {
    let model = fixtures::three_type_model();
    let opts = CumulantOptions::default();
    let f = TypeVector::from_pairs(&[(1, 0.8), (2, 0.4), (3, 1.2)]).unwrap();
    let (s, t) = (0.6, 0.9);
    let vt = integrate_cumulant(&model, &f, t, 3, &opts).unwrap();
    let vtf = TypeVector::from_dense(vt.final_row());
    let vs_vt = integrate_cumulant(&model, &vtf, s, 3, &opts).unwrap();
    let vst = integrate_cumulant(&model, &f, s + t, 3, &opts).unwrap();
    for i in 0..3 {
        let a = vs_vt.final_row()[i];
        let b = vst.final_row()[i];
        assert!(
            (a - b).abs() <= 1e-6 * b.abs().max(1.0),
            "semigroup property: {a} vs {b}"
        );
    }
}

#[test]
fn truncation_monotonicity_window() {
    // a rapidly mixing homogeneous family: growing the truncation only
    // adds coupling, and far from the boundary the change is tiny
    let model = fixtures::pq_model(0.2, 0.5, 0.4, 1.0, 1.0);
    let opts = CumulantOptions { grid: 64, ..CumulantOptions::default() };
    let window = 15usize;
    let f60 = TypeVector::constant(0.7, 60);
    let f70 = TypeVector::constant(0.7, 70);
    let v60 = integrate_cumulant(&model, &f60, 1.0, 60, &opts).unwrap();
    let v70 = integrate_cumulant(&model, &f70, 1.0, 70, &opts).unwrap();
    for i in 0..window {
        let a = v60.final_row()[i];
        let b = v70.final_row()[i];
        assert!(b >= a - 1e-12, "V must increase with the truncation");
        assert!(
            (b - a).abs() < 1e-6,
            "window entry {i} moved by {}",
            (b - a).abs()
        );
    }
}

#[test]
fn tilted_semigroup_is_stochastic() {
    let model = fixtures::three_type_model();
    let ctx = build_spine_context(&model, 3).unwrap();
    for &t in &[0.1, 1.0, 10.0] {
        let e = (ctx.ltilde.clone() * t).exp();
        for i in 0..3 {
            let sum: f64 = (0..3).map(|j| e[(i, j)]).sum();
            assert!(
                (sum - 1.0).abs() < 1e-10,
                "row {i} of exp({t} Ltilde) sums to {sum}"
            );
        }
    }
}

#[test]
fn particle_mean_matches_moment_flow() {
    // E[X_t(j)] from the killed particle system against exp(t L) rows;
    // the fixture atoms are integer-aligned at k = 100 so the particle
    // mean generator coincides with L exactly
    let model = fixtures::three_type_model();
    let k = 100u32;
    let t = 1.0;
    let gen = build_generator(&model, 3).unwrap();
    let flow = (gen.l.clone() * t).exp();
    let mut spec = build_scaling_family(&model, k).unwrap();
    spec.kill_above = Some(3);
    let init = Population {
        counts: vec![k as u64, 0, 0],
        scale: k,
    };
    let reps = 6000u64;
    let mut sums = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    for r in 0..reps {
        let traj = simulate_mbgw(&spec, &init, &[t], 1000 + r, &SimCaps::default());
        for j in 0..3 {
            let v = traj.count_at(0, j + 1) as f64 / k as f64;
            sums[j] += v;
            sq[j] += v * v;
        }
    }
    for j in 0..3 {
        let mean = sums[j] / reps as f64;
        let var = (sq[j] / reps as f64 - mean * mean).max(0.0);
        let se = (var / reps as f64).sqrt();
        let want = flow[(0, j)];
        assert!(
            (mean - want).abs() <= 3.0 * se + 1e-9,
            "type {}: {mean} vs {want} (se {se})",
            j + 1
        );
    }
}

#[test]
fn branching_property_at_monte_carlo_level() {
    use mcsbp::particle::mc_laplace;
    let model = fixtures::three_type_model();
    let f = TypeVector::from_pairs(&[(1, 0.5), (2, 0.3), (3, 0.4)]).unwrap();
    let mu1 = TypeVector::from_pairs(&[(1, 1.0)]).unwrap();
    let mu2 = TypeVector::from_pairs(&[(2, 0.5), (3, 0.5)]).unwrap();
    let mu12 = TypeVector::from_pairs(&[(1, 1.0), (2, 0.5), (3, 0.5)]).unwrap();
    let caps = SimCaps::default();
    let (k, reps, t) = (50u32, 20000u64, 0.8);
    let e1 = mc_laplace(&model, &mu1, &f, t, k, reps, 101, 2, &caps).unwrap();
    let e2 = mc_laplace(&model, &mu2, &f, t, k, reps, 202, 2, &caps).unwrap();
    let e12 = mc_laplace(&model, &mu12, &f, t, k, reps, 303, 2, &caps).unwrap();
    let product = e1.estimate * e2.estimate;
    let combined_se = (e1.stderr * e2.estimate).hypot(e2.stderr * e1.estimate) + e12.stderr;
    assert!(
        (e12.estimate - product).abs() <= 3.0 * combined_se,
        "{} vs {} (se {})",
        e12.estimate,
        product,
        combined_se
    );
}
