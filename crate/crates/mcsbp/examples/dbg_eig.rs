use mcsbp::model::{AtomicMeasure, LocalParams, ModelSpec, NonLocalParams, PlacementKernel};
use mcsbp::spectral::{default_schedule, estimate_spectral_radius, kingman_decay};
use std::time::Instant;

fn main() {
    let m = ModelSpec::Homogeneous {
        local: LocalParams { b: 0.7, c: 1.0, levy: AtomicMeasure::empty() },
        nonlocal: NonLocalParams { beta: 1.0, d: 1.0, njump: AtomicMeasure::empty() },
        kernel: PlacementKernel::PqWalk { p: 0.1 },
    };
    let t0 = Instant::now();
    let est = estimate_spectral_radius(&m, &default_schedule(), 1e-9).unwrap();
    println!("schedule to 800 in {:?}:", t0.elapsed());
    for (n, l, r) in &est.sequence {
        println!("  n={n}: Lambda={l:.9} res={r:.2e}");
    }
    let t0 = Instant::now();
    let k = kingman_decay(&PlacementKernel::PqWalk { p: 0.1 }, &[25, 50, 100, 200, 400], 1e-9).unwrap();
    println!("kingman(0.1) -> {:.9} in {:?}", k.estimate, t0.elapsed());
    let k = kingman_decay(&PlacementKernel::PqWalk { p: 0.5 }, &[25, 50, 100, 200, 400], 1e-9).unwrap();
    println!("kingman(0.5) -> {:.9}", k.estimate);
}
