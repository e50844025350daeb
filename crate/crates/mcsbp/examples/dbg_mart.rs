use mcsbp::fixtures;
use mcsbp::model::TypeVector;
use mcsbp::particle::{mc_martingale_means, SimCaps};
use mcsbp::spectral::{build_generator, pf_eigen};

fn main() {
    let model = fixtures::three_type_model();
    let spec = pf_eigen(&build_generator(&model, 3).unwrap()).unwrap();
    let mu = TypeVector::from_pairs(&[(1, 1.0)]).unwrap();
    for seed in [701u64, 702, 703] {
        let means = mc_martingale_means(
            &model, 3, &mu, &spec.x, spec.lambda, &[0.5, 1.0, 2.0],
            100, 100_000, seed, 2, &SimCaps::default(),
        ).unwrap();
        print!("seed {seed}:");
        for est in &means {
            print!("  {:.5}±{:.5} (z={:+.2})", est.estimate, est.stderr, (est.estimate - spec.x[0]) / est.stderr);
        }
        println!();
    }
}
