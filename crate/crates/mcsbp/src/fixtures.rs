//! Canonical models used by the CLI scenarios and the verification
//! suites: the three worked example regimes on the pq-walk, two small
//! finite mixers with jump atoms on both mechanisms, and a direct
//! branching-particle fixture.
//!
//! Jump atoms sit at dyadic-friendly locations (0.25, 0.5, 0.8, 1.0) so
//! that offspring sizes `floor(k u)` are exact at the default particle
//! scales `k = 100, 200`, which makes the particle mean flow match the
//! moment generator exactly there.

use crate::model::{AtomicMeasure, LocalParams, ModelSpec, NonLocalParams, PlacementKernel};
use crate::particle::{MbgwPlacement, MbgwSpec, MbgwTypeParams, OffspringLaw};

/// Homogeneous pq-walk family with unit non-local rate split `beta d`.
pub fn pq_model(p: f64, b: f64, c: f64, beta: f64, d: f64) -> ModelSpec {
    ModelSpec::Homogeneous {
        local: LocalParams {
            b,
            c,
            levy: AtomicMeasure::empty(),
        },
        nonlocal: NonLocalParams {
            beta,
            d,
            njump: AtomicMeasure::empty(),
        },
        kernel: PlacementKernel::PqWalk { p },
    }
}

/// Discrepancy regime: transient walk (p = 0.1, kappa = 0.4), drift
/// b = 0.7 inside (a - kappa, a) = (0.6, 1). Mass dies locally almost
/// surely yet survives globally with probability 1 - e^{-0.3}.
pub fn example1_model() -> ModelSpec {
    pq_model(0.1, 0.7, 1.0, 1.0, 1.0)
}

/// Uniformly subcritical drift: b - a = 0.5 > 0, local extinction a.s.
pub fn example2_model() -> ModelSpec {
    pq_model(0.1, 1.5, 1.0, 1.0, 1.0)
}

/// Recurrent symmetric walk with b - a = -0.5: local survival with
/// positive probability.
pub fn example3_model() -> ModelSpec {
    pq_model(0.5, 0.5, 1.0, 1.0, 1.0)
}

/// Mildly supercritical asymmetric walk (limit Lambda ~ -0.066).
pub fn pq_quarter_model() -> ModelSpec {
    pq_model(0.25, 0.8, 1.0, 1.0, 1.0)
}

/// Three-type cyclic mixer with jump atoms on both mechanisms.
pub fn three_type_model() -> ModelSpec {
    ModelSpec::Finite {
        local: vec![
            LocalParams {
                b: 0.35,
                c: 0.2,
                levy: AtomicMeasure::new(&[(0.5, 0.3)]).unwrap(),
            },
            LocalParams {
                b: -0.05,
                c: 0.15,
                levy: AtomicMeasure::empty(),
            },
            LocalParams {
                b: 0.2,
                c: 0.1,
                levy: AtomicMeasure::new(&[(1.0, 0.15)]).unwrap(),
            },
        ],
        nonlocal: vec![
            NonLocalParams {
                beta: 0.5,
                d: 0.6,
                njump: AtomicMeasure::new(&[(0.5, 0.4)]).unwrap(),
            },
            NonLocalParams {
                beta: 0.4,
                d: 0.5,
                njump: AtomicMeasure::new(&[(0.25, 0.8)]).unwrap(),
            },
            NonLocalParams {
                beta: 0.6,
                d: 0.75,
                njump: AtomicMeasure::empty(),
            },
        ],
        pi: vec![
            vec![(2, 0.7), (3, 0.3)],
            vec![(3, 1.0)],
            vec![(1, 1.0)],
        ],
    }
}

/// Two-type seesaw; type 2 sits exactly on the non-local mass bound
/// `d + int u n = 1`.
pub fn two_type_model() -> ModelSpec {
    ModelSpec::Finite {
        local: vec![
            LocalParams {
                b: 0.45,
                c: 0.15,
                levy: AtomicMeasure::new(&[(0.5, 0.2)]).unwrap(),
            },
            LocalParams {
                b: 0.35,
                c: 0.1,
                levy: AtomicMeasure::empty(),
            },
        ],
        nonlocal: vec![
            NonLocalParams {
                beta: 0.5,
                d: 0.5,
                njump: AtomicMeasure::new(&[(0.8, 0.25)]).unwrap(),
            },
            NonLocalParams {
                beta: 0.4,
                d: 0.75,
                njump: AtomicMeasure::new(&[(0.5, 0.5)]).unwrap(),
            },
        ],
        pi: vec![vec![(2, 1.0)], vec![(1, 1.0)]],
    }
}

/// Symmetric two-type model (b = 1, a = 1/2): eigen-objects by hand.
pub fn two_type_symmetric_model() -> ModelSpec {
    ModelSpec::Finite {
        local: vec![
            LocalParams {
                b: 1.0,
                c: 0.0,
                levy: AtomicMeasure::empty(),
            };
            2
        ],
        nonlocal: vec![
            NonLocalParams {
                beta: 0.5,
                d: 1.0,
                njump: AtomicMeasure::empty(),
            };
            2
        ],
        pi: vec![vec![(2, 1.0)], vec![(1, 1.0)]],
    }
}

/// The spectral-monotonicity fixture set.
pub fn spectral_fixtures() -> Vec<(&'static str, ModelSpec)> {
    vec![
        ("example1", example1_model()),
        ("example2", example2_model()),
        ("example3", example3_model()),
        ("pq-quarter", pq_quarter_model()),
        ("three-type", three_type_model()),
    ]
}

/// A direct three-type branching-particle fixture (not a scaling
/// family): small offspring counts, cyclic placement.
pub fn three_type_mbgw() -> MbgwSpec {
    let local = |entries: &[(u32, f64)]| OffspringLaw::new(entries).unwrap();
    MbgwSpec {
        params: vec![
            MbgwTypeParams {
                alpha: 0.7,
                beta: 0.5,
                local: local(&[(0, 0.3), (1, 0.2), (2, 0.5)]),
                nonlocal: local(&[(0, 0.5), (1, 0.4), (2, 0.1)]),
            },
            MbgwTypeParams {
                alpha: 0.6,
                beta: 0.4,
                local: local(&[(0, 0.55), (2, 0.45)]),
                nonlocal: local(&[(0, 0.5), (1, 0.5)]),
            },
            MbgwTypeParams {
                alpha: 0.5,
                beta: 0.6,
                local: local(&[(0, 0.25), (1, 0.5), (2, 0.25)]),
                nonlocal: local(&[(0, 0.35), (1, 0.6), (2, 0.05)]),
            },
        ]
        .into(),
        placement: MbgwPlacement::Rows(vec![
            vec![(2, 0.6), (3, 0.4)],
            vec![(3, 1.0)],
            vec![(1, 1.0)],
        ]),
        kill_above: None,
    }
}
