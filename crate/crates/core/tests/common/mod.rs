//! Generators and property checks shared by the integration tests and the
//! acceptance suite.
#![allow(dead_code)]

use mfgcc::convexset::ConvexSet;
use mfgcc::linalg::{quad_form, Mat};
use mfgcc::noise_tree::ScenarioTree;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const KINDS: [&str; 4] = ["whole", "box", "ball", "orthant"];

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn random_set(rng: &mut ChaCha8Rng, kind: &str, m: usize) -> ConvexSet {
    match kind {
        "whole" => ConvexSet::whole(m),
        "orthant" => ConvexSet::orthant(m),
        "box" => {
            let lo: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..0.5)).collect();
            let hi = lo.iter().map(|l| l + rng.random_range(0.0..2.0)).collect();
            ConvexSet::new_box(lo, hi).unwrap()
        }
        "ball" => {
            let center = (0..m).map(|_| normal(rng)).collect();
            ConvexSet::new_ball(center, rng.random_range(0.1..2.0)).unwrap()
        }
        _ => unreachable!("unknown set kind {kind}"),
    }
}

/// SPD weight: a multiple of the identity, a diagonal matrix or a dense
/// matrix, with condition number at most a few hundred.
pub fn random_spd(rng: &mut ChaCha8Rng, m: usize) -> Mat {
    match rng.random_range(0..3) {
        0 => Mat::identity(m, m) * rng.random_range(0.2..5.0),
        1 => Mat::from_diagonal(&nalgebra::DVector::from_fn(m, |_, _| rng.random_range(0.2..5.0))),
        _ => {
            let a = Mat::from_fn(m, m, |_, _| normal(rng));
            &a * a.transpose() + Mat::identity(m, m) * 0.2
        }
    }
}

pub fn random_point(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    (0..m).map(|_| 2.0 * normal(rng)).collect()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn r_inner(r: &Mat, a: &[f64], b: &[f64]) -> f64 {
    let mut ra = vec![0.0; a.len()];
    mfgcc::linalg::mv(&mut ra, r, a);
    ra.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Outcome of the projection checks on one or more triples.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionCheck {
    /// Largest violation of the characterization, firm nonexpansiveness,
    /// Lipschitz and monotonicity inequalities; nonpositive when all hold.
    pub inequality: f64,
    /// Largest `|P(P(v)) − P(v)|`.
    pub idempotence: f64,
    /// Every projected point passed `contains(·, 1e-12)`.
    pub members: bool,
}

impl ProjectionCheck {
    fn merge(self, o: ProjectionCheck) -> ProjectionCheck {
        ProjectionCheck {
            inequality: self.inequality.max(o.inequality),
            idempotence: self.idempotence.max(o.idempotence),
            members: self.members && o.members,
        }
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.inequality <= tol && self.idempotence <= 1e-12 && self.members
    }
}

/// Checks one `(set, R, v)` triple against a second point `w` and sampled
/// members `ys`.
pub fn check_projection(set: &ConvexSet, r: &Mat, v: &[f64], w: &[f64], ys: &[Vec<f64>]) -> ProjectionCheck {
    let pv = set.project(r, v).unwrap().point;
    let pw = set.project(r, w).unwrap().point;
    let mut worst = f64::NEG_INFINITY;
    let res = sub(&pv, v);
    for y in ys {
        worst = worst.max(r_inner(r, &res, &sub(&pv, y)));
    }
    let dp = sub(&pv, &pw);
    let dv = sub(v, w);
    let cross = r_inner(r, &dp, &dv);
    worst = worst.max(quad_form(r, &dp) - cross);
    worst = worst.max(quad_form(r, &dp).sqrt() - quad_form(r, &dv).sqrt());
    worst = worst.max(-cross);
    let ppv = set.project(r, &pv).unwrap().point;
    ProjectionCheck {
        inequality: worst,
        idempotence: sub(&ppv, &pv).iter().fold(0.0, |a: f64, x| a.max(x.abs())),
        members: set.contains(&pv, 1e-12) && set.contains(&pw, 1e-12),
    }
}

/// Checks `count` random triples cycling through all set kinds and the
/// dimensions 1, 2 and 4, with 50 members sampled per set.
pub fn projection_suite(count: usize, seed: u64) -> ProjectionCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = ProjectionCheck { inequality: f64::NEG_INFINITY, idempotence: 0.0, members: true };
    for i in 0..count {
        let kind = KINDS[i % 4];
        let m = [1, 2, 4][(i / 4) % 3];
        let set = random_set(&mut rng, kind, m);
        let r = random_spd(&mut rng, m);
        let v = random_point(&mut rng, m);
        let w = random_point(&mut rng, m);
        let ys = set.sample_boundary_and_interior(50, rng.random());
        acc = acc.merge(check_projection(&set, &r, &v, &w, &ys));
    }
    acc
}

/// Largest reconstruction residual `|ξ − (mean + z·ΔW)|` over `pairs`
/// random node pairs. With `dyadic` the tree step and the values are
/// dyadic rationals, so every operation is exact.
pub fn reconstruction_residual(pairs: usize, seed: u64, dyadic: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let depth = rng.random_range(1..=12);
        let horizon = if dyadic {
            // Δt = 4^-j makes √Δt = 2^-j.
            depth as f64 * 0.25f64.powi(rng.random_range(0..4))
        } else {
            rng.random_range(0.1..3.0)
        };
        let tree = ScenarioTree::build(depth, horizon).unwrap();
        let dim = rng.random_range(1..=3);
        let value = |rng: &mut ChaCha8Rng| -> f64 {
            if dyadic {
                rng.random_range(-4096i64..4096) as f64 / 256.0
            } else {
                4.0 * normal(rng)
            }
        };
        let up: Vec<f64> = (0..dim).map(|_| value(&mut rng)).collect();
        let dn: Vec<f64> = (0..dim).map(|_| value(&mut rng)).collect();
        let (mean, z) = tree.martingale_representation(&up, &dn);
        let s = tree.sqrt_dt();
        for i in 0..dim {
            let scale = if dyadic { 1.0 } else { up[i].abs().max(dn[i].abs()).max(1.0) };
            worst = worst.max((mean[i] + z[i] * s - up[i]).abs() / scale);
            worst = worst.max((mean[i] - z[i] * s - dn[i]).abs() / scale);
        }
    }
    worst
}

/// Largest deviation of the level expectations of `W` from 0 and of `W²`
/// from `kΔt`, over all levels of trees with the given depths.
/// With `dyadic` the step is `1/4`, otherwise the horizon is 1.
pub fn brownian_moment_error(depths: &[usize], dyadic: bool) -> f64 {
    let mut worst: f64 = 0.0;
    for &depth in depths {
        let horizon = if dyadic { depth as f64 / 4.0 } else { 1.0 };
        let tree = ScenarioTree::build(depth, horizon).unwrap();
        let w = mfgcc::noise_tree::TreeProcess::from_fn(&tree, 2, |k, j| {
            let b = tree.brownian(k, j);
            vec![b, b * b]
        });
        for k in 0..=depth {
            let e = tree.expectation(&w, k).unwrap();
            worst = worst.max(e[0].abs()).max((e[1] - k as f64 * tree.dt()).abs());
        }
    }
    worst
}
