//! Reference models used by the tests, the acceptance suite and the example
//! model files.

use crate::convexset::ConvexSet;
use crate::model::{ModelSpec, ScalarCoefficients};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scalar model with every coupling present and an unconstrained control.
pub fn scalar_reference() -> ModelSpec {
    ModelSpec::scalar(
        0.5,
        &ScalarCoefficients {
            a: 0.1,
            b: 1.0,
            f: 0.1,
            d: 0.2,
            sigma: 0.3,
            m: 0.1,
            u_coef: 0.1,
            h: 0.1,
            v: 0.1,
            k: 0.1,
            phi: 0.5,
            q: 1.0,
            l: 1.0,
            r: 1.0,
            g: 1.0,
            x0: 1.0,
            ..Default::default()
        },
    )
}

/// No cost weights except `R`; the optimal control is `P_U[0] = 0`.
/// Only passes permissive validation. Without `F` and `V` the means settle
/// in the first sweep, so the solver stops after two.
pub fn zero_weight() -> ModelSpec {
    let mut spec = ModelSpec::scalar(
        0.5,
        &ScalarCoefficients {
            a: 0.1,
            b: 1.0,
            x_drift: 0.2,
            d: 0.2,
            sigma: 0.3,
            m: 0.1,
            u_coef: 0.1,
            h: 0.1,
            k: 0.1,
            phi: 0.5,
            r: 1.0,
            x0: 1.0,
            ..Default::default()
        },
    );
    spec.control_set = ConvexSet::new_box(vec![-1.0], vec![1.0]).expect("valid box");
    spec
}

/// The population's mean does not enter any agent's dynamics, so the
/// decentralized control is exactly optimal for every population size.
pub fn no_coupling() -> ModelSpec {
    let mut spec = coupled();
    spec.f = crate::model::TimeFunction::constant(crate::linalg::zeros(1, 1));
    spec.h = spec.f.clone();
    spec.v = spec.f.clone();
    spec
}

/// Scalar model with mean-field coupling in both equations and a box
/// constraint that binds on part of the tree.
pub fn coupled() -> ModelSpec {
    let mut spec = ModelSpec::scalar(
        1.0,
        &ScalarCoefficients {
            a: 0.2,
            b: 1.0,
            f: 0.5,
            x_drift: 0.1,
            d: 0.3,
            sigma: 0.5,
            m: 0.2,
            u_coef: 0.1,
            h: 0.4,
            v: 0.3,
            k: 0.2,
            y_drift: 0.05,
            phi: 0.5,
            q: 1.0,
            l: 0.5,
            r: 0.5,
            g: 1.0,
            x0: 0.5,
        },
    );
    spec.control_set = ConvexSet::new_box(vec![-0.4], vec![0.6]).expect("valid box");
    spec
}

/// Cheap control against a large terminal weight: the undamped Picard
/// iteration overshoots and diverges, damping makes it converge.
pub fn stiff() -> ModelSpec {
    ModelSpec::scalar(
        1.0,
        &ScalarCoefficients {
            a: 0.3,
            b: 1.0,
            sigma: 0.3,
            q: 1.0,
            l: 1.0,
            r: 0.2,
            g: 1.0,
            phi: 1.0,
            m: 0.5,
            x0: 1.0,
            ..Default::default()
        },
    )
}

/// A random scalar model satisfying the strict assumptions, with moderate
/// coefficients. Deterministic in `seed`.
pub fn random_strict_scalar(seed: u64, set: ConvexSet) -> ModelSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let c = ScalarCoefficients {
        a: u(-0.5, 0.5),
        b: u(-1.0, 1.0),
        f: u(-0.3, 0.3),
        x_drift: u(-0.2, 0.2),
        d: u(-0.3, 0.3),
        sigma: u(0.0, 0.5),
        m: u(-0.3, 0.3),
        u_coef: u(-0.3, 0.3),
        h: u(-0.3, 0.3),
        v: u(-0.3, 0.3),
        k: u(-0.3, 0.3),
        y_drift: u(-0.2, 0.2),
        phi: u(-0.5, 0.5),
        q: u(0.1, 1.5),
        l: u(0.1, 1.5),
        r: u(0.5, 2.0),
        g: u(0.1, 1.5),
        x0: u(-1.0, 1.0),
    };
    let horizon = u(0.5, 1.0);
    let mut spec = ModelSpec::scalar(horizon, &c);
    spec.control_set = set;
    spec
}
