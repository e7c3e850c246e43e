//! Closed convex control sets and projections under the `R`-weighted norm
//! `‖u‖²_R = ⟨R u, u⟩`.
//!
//! The projection `P_U[v]` is the unique minimiser of `⟨R(u − v), u − v⟩`
//! over `u ∈ U`. It is characterised by the variational inequality
//! `⟨R(P_U[v] − v), P_U[v] − y⟩ ≤ 0` for every `y ∈ U`, which is what the
//! property tests check.

use crate::linalg::{self, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Iteration cap for the projected-gradient fallback.
pub const MAX_PROJECTION_ITERS: usize = 100_000;
/// Projected-gradient termination threshold.
pub const KKT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error("weight matrix is not symmetric positive definite: {0}")]
    NotSpd(String),
    #[error("dimension mismatch: set has dimension {set}, got {got}")]
    Dimension { set: usize, got: usize },
    #[error("projection did not converge in {iterations} iterations (kkt residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("invalid set: {0}")]
    InvalidSet(String),
}

/// The constraint set `U ⊂ R^m`.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvexSet {
    Whole { dim: usize },
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    /// The nonnegative orthant `R^m_+`.
    Orthant { dim: usize },
}

impl ConvexSet {
    pub fn whole(dim: usize) -> Self {
        ConvexSet::Whole { dim }
    }

    pub fn orthant(dim: usize) -> Self {
        ConvexSet::Orthant { dim }
    }

    pub fn new_box(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, ProjectionError> {
        if lo.len() != hi.len() {
            return Err(ProjectionError::InvalidSet(format!(
                "box bounds have lengths {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        for (i, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if !l.is_finite() || !h.is_finite() || l > h {
                return Err(ProjectionError::InvalidSet(format!(
                    "box coordinate {i}: need finite lo <= hi, got [{l}, {h}]"
                )));
            }
        }
        Ok(ConvexSet::Box { lo, hi })
    }

    pub fn new_ball(center: Vec<f64>, radius: f64) -> Result<Self, ProjectionError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(ProjectionError::InvalidSet(format!(
                "ball radius must be positive and finite, got {radius}"
            )));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(ProjectionError::InvalidSet("ball center must be finite".into()));
        }
        Ok(ConvexSet::Ball { center, radius })
    }

    pub fn dim(&self) -> usize {
        match self {
            ConvexSet::Whole { dim } | ConvexSet::Orthant { dim } => *dim,
            ConvexSet::Box { lo, .. } => lo.len(),
            ConvexSet::Ball { center, .. } => center.len(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ConvexSet::Whole { .. } => "whole",
            ConvexSet::Box { .. } => "box",
            ConvexSet::Ball { .. } => "ball",
            ConvexSet::Orthant { .. } => "orthant",
        }
    }

    /// Euclidean distance from `u` to the set.
    pub fn distance(&self, u: &[f64]) -> f64 {
        let mut p = u.to_vec();
        self.euclidean_project_in_place(&mut p);
        linalg::norm_sq(&p.iter().zip(u).map(|(a, b)| a - b).collect::<Vec<_>>()).sqrt()
    }

    /// True iff `u` lies within Euclidean distance `tol` of the set.
    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        assert_eq!(u.len(), self.dim(), "dimension mismatch in contains");
        self.distance(u) <= tol
    }

    /// Nearest point in the ordinary Euclidean norm.
    pub fn euclidean_project_in_place(&self, u: &mut [f64]) {
        match self {
            ConvexSet::Whole { .. } => {}
            ConvexSet::Box { lo, hi } => {
                for ((x, l), h) in u.iter_mut().zip(lo).zip(hi) {
                    *x = x.clamp(*l, *h);
                }
            }
            ConvexSet::Orthant { .. } => {
                for x in u.iter_mut() {
                    *x = x.max(0.0);
                }
            }
            ConvexSet::Ball { center, radius } => {
                let d: f64 = u
                    .iter()
                    .zip(center)
                    .map(|(x, c)| (x - c) * (x - c))
                    .sum::<f64>()
                    .sqrt();
                if d > *radius {
                    let s = radius / d;
                    for (x, c) in u.iter_mut().zip(center) {
                        *x = c + (*x - c) * s;
                    }
                }
            }
        }
    }

    fn bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            ConvexSet::Box { lo, hi } => Some((lo.clone(), hi.clone())),
            ConvexSet::Orthant { dim } => Some((vec![0.0; *dim], vec![f64::INFINITY; *dim])),
            _ => None,
        }
    }

    /// Projection of `v` under the `R`-weighted norm.
    pub fn project(&self, r: &Mat, v: &[f64]) -> Result<WeightedProjection, ProjectionError> {
        WeightedProjector::new(self.clone(), r)?.project(v)
    }

    /// Deterministic sample of points of the set: a mix of interior points,
    /// boundary points and (for boxes) vertices.
    pub fn sample_boundary_and_interior(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = self.dim();
        let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
        (0..count)
            .map(|i| match self {
                ConvexSet::Whole { .. } => (0..m).map(|_| 2.0 * normal(&mut rng)).collect(),
                ConvexSet::Box { lo, hi } => {
                    let mut p: Vec<f64> = lo
                        .iter()
                        .zip(hi)
                        .map(|(l, h)| l + (h - l) * rng.random::<f64>())
                        .collect();
                    match i % 3 {
                        0 => {}
                        1 => {
                            let c = rng.random_range(0..m);
                            p[c] = if rng.random::<bool>() { lo[c] } else { hi[c] };
                        }
                        _ => {
                            for c in 0..m {
                                p[c] = if rng.random::<bool>() { lo[c] } else { hi[c] };
                            }
                        }
                    }
                    p
                }
                ConvexSet::Orthant { .. } => {
                    let mut p: Vec<f64> = (0..m).map(|_| 2.0 * normal(&mut rng).abs()).collect();
                    if i % 2 == 1 {
                        let c = rng.random_range(0..m);
                        p[c] = 0.0;
                    }
                    if i % 5 == 4 {
                        p.iter_mut().for_each(|x| *x = 0.0);
                    }
                    p
                }
                ConvexSet::Ball { center, radius } => {
                    let mut dir: Vec<f64> = (0..m).map(|_| normal(&mut rng)).collect();
                    let nrm = linalg::norm_sq(&dir).sqrt().max(1e-300);
                    dir.iter_mut().for_each(|x| *x /= nrm);
                    let scale = if i % 2 == 0 {
                        radius * rng.random::<f64>().powf(1.0 / m as f64)
                    } else {
                        *radius
                    };
                    center.iter().zip(&dir).map(|(c, d)| c + scale * d).collect()
                }
            })
            .collect()
    }
}

/// Output of a weighted projection.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedProjection {
    pub point: Vec<f64>,
    pub iterations: usize,
    /// Norm of the projected-gradient map `u − Π(u − R(u − v)/λ_max)`.
    pub kkt_residual: f64,
}

#[derive(Debug, Clone)]
enum Method {
    Identity,
    Clamp,
    Radial,
    /// Secular equation in the Lagrange multiplier, using `R = QΛQᵀ`.
    BallSecular { eigvecs: Mat, eigvals: Vec<f64> },
    BoxIterative,
}

/// A set paired with a fixed SPD weight, with the weight-dependent setup
/// done once. The solver builds one of these per time step.
#[derive(Debug, Clone)]
pub struct WeightedProjector {
    set: ConvexSet,
    r: Mat,
    lambda_max: f64,
    method: Method,
}

impl WeightedProjector {
    pub fn new(set: ConvexSet, r: &Mat) -> Result<Self, ProjectionError> {
        let m = set.dim();
        if r.nrows() != m || r.ncols() != m {
            return Err(ProjectionError::Dimension { set: m, got: r.nrows() });
        }
        if linalg::asymmetry(r) > 1e-12 * linalg::max_abs(r).max(1.0) {
            return Err(ProjectionError::NotSpd("matrix is not symmetric".into()));
        }
        let r = linalg::symmetrized(r);
        let eig = r.clone().symmetric_eigen();
        let lambda_min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        let lambda_max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(lambda_min > 0.0) || !lambda_max.is_finite() {
            return Err(ProjectionError::NotSpd(format!("smallest eigenvalue {lambda_min:e}")));
        }
        let method = match &set {
            ConvexSet::Whole { .. } => Method::Identity,
            ConvexSet::Box { .. } | ConvexSet::Orthant { .. } => {
                if linalg::is_diagonal(&r) {
                    Method::Clamp
                } else {
                    Method::BoxIterative
                }
            }
            ConvexSet::Ball { .. } => {
                if linalg::scalar_multiple_of_identity(&r).is_some() {
                    Method::Radial
                } else {
                    Method::BallSecular {
                        eigvecs: eig.eigenvectors.clone(),
                        eigvals: eig.eigenvalues.iter().copied().collect(),
                    }
                }
            }
        };
        Ok(WeightedProjector { set, r, lambda_max, method })
    }

    pub fn set(&self) -> &ConvexSet {
        &self.set
    }

    pub fn weight(&self) -> &Mat {
        &self.r
    }

    pub fn project(&self, v: &[f64]) -> Result<WeightedProjection, ProjectionError> {
        if v.len() != self.set.dim() {
            return Err(ProjectionError::Dimension { set: self.set.dim(), got: v.len() });
        }
        let (point, iterations) = match &self.method {
            Method::Identity => (v.to_vec(), 0),
            Method::Clamp | Method::Radial => {
                let mut u = v.to_vec();
                self.set.euclidean_project_in_place(&mut u);
                (u, 0)
            }
            Method::BallSecular { eigvecs, eigvals } => self.ball_secular(v, eigvecs, eigvals),
            Method::BoxIterative => self.box_iterative(v)?,
        };
        let kkt_residual = self.kkt_residual(&point, v);
        Ok(WeightedProjection { point, iterations, kkt_residual })
    }

    /// `‖u − Π(u − R(u − v)/λ_max)‖₂` with `Π` the Euclidean projection.
    pub fn kkt_residual(&self, u: &[f64], v: &[f64]) -> f64 {
        let diff: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - b).collect();
        let mut g = vec![0.0; u.len()];
        linalg::mv(&mut g, &self.r, &diff);
        let mut step: Vec<f64> = u.iter().zip(&g).map(|(a, gi)| a - gi / self.lambda_max).collect();
        self.set.euclidean_project_in_place(&mut step);
        linalg::norm_sq(&u.iter().zip(&step).map(|(a, b)| a - b).collect::<Vec<_>>()).sqrt()
    }

    fn ball_secular(&self, v: &[f64], q: &Mat, lam: &[f64]) -> (Vec<f64>, usize) {
        let ConvexSet::Ball { center, radius } = &self.set else {
            unreachable!("secular method only built for balls")
        };
        let m = v.len();
        let d: Vec<f64> = v.iter().zip(center).map(|(a, c)| a - c).collect();
        if linalg::norm_sq(&d).sqrt() <= *radius {
            return (v.to_vec(), 0);
        }
        let mut w = vec![0.0; m];
        linalg::mtv_add(&mut w, q, &d, 1.0);
        let s = |mu: f64| -> f64 {
            lam.iter()
                .zip(&w)
                .map(|(l, wi)| {
                    let t = l * wi / (l + mu);
                    t * t
                })
                .sum::<f64>()
                .sqrt()
        };
        // s is strictly decreasing with s(0) > radius and s(hi) <= radius.
        let mut lo = 0.0;
        let mut hi = self.lambda_max * linalg::norm_sq(&w).sqrt() / radius;
        let mut mu = 0.5 * hi;
        let mut iterations = 0;
        for it in 1..=200 {
            iterations = it;
            let sv = s(mu);
            if sv > *radius {
                lo = mu;
            } else {
                hi = mu;
            }
            if (sv - radius).abs() <= 1e-15 * radius || hi - lo <= 1e-16 * hi.max(1.0) {
                break;
            }
            // Newton on 1/s(mu) - 1/radius, which is close to linear in mu.
            let ds: f64 = -lam
                .iter()
                .zip(&w)
                .map(|(l, wi)| (l * wi).powi(2) / (l + mu).powi(3))
                .sum::<f64>()
                / sv;
            let f = 1.0 / sv - 1.0 / radius;
            let df = -ds / (sv * sv);
            let mut next = mu - f / df;
            if !(next > lo && next < hi) || !next.is_finite() {
                next = 0.5 * (lo + hi);
            }
            mu = next;
        }
        let scaled: Vec<f64> = lam.iter().zip(&w).map(|(l, wi)| l * wi / (l + mu)).collect();
        let mut off = vec![0.0; m];
        linalg::mv(&mut off, q, &scaled);
        let nrm = linalg::norm_sq(&off).sqrt();
        let point = center
            .iter()
            .zip(&off)
            .map(|(c, o)| c + o * (radius / nrm))
            .collect();
        (point, iterations)
    }

    fn box_iterative(&self, v: &[f64]) -> Result<(Vec<f64>, usize), ProjectionError> {
        let (lo, hi) = self.set.bounds().expect("box-like set");
        let m = v.len();
        let mut u = v.to_vec();
        self.set.euclidean_project_in_place(&mut u);
        if let Some(p) = self.polish(&u, v, &lo, &hi) {
            return Ok((p, 0));
        }
        let step = 1.0 / self.lambda_max;
        let mut g = vec![0.0; m];
        let mut residual = f64::INFINITY;
        for it in 1..=MAX_PROJECTION_ITERS {
            let diff: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - b).collect();
            linalg::mv(&mut g, &self.r, &diff);
            let mut next: Vec<f64> = u.iter().zip(&g).map(|(a, gi)| a - step * gi).collect();
            self.set.euclidean_project_in_place(&mut next);
            residual = linalg::norm_sq(&next.iter().zip(&u).map(|(a, b)| a - b).collect::<Vec<_>>())
                .sqrt();
            u = next;
            if it % 8 == 0 || residual < KKT_TOLERANCE {
                if let Some(p) = self.polish(&u, v, &lo, &hi) {
                    return Ok((p, it));
                }
            }
            if residual < KKT_TOLERANCE {
                return Ok((u, it));
            }
        }
        Err(ProjectionError::NoConvergence { iterations: MAX_PROJECTION_ITERS, residual })
    }

    /// Exact solve on the active set suggested by `u`; `None` unless the
    /// result satisfies primal feasibility and the multiplier sign
    /// conditions.
    fn polish(&self, u: &[f64], v: &[f64], lo: &[f64], hi: &[f64]) -> Option<Vec<f64>> {
        let m = u.len();
        let free: Vec<usize> = (0..m).filter(|&i| u[i] > lo[i] && u[i] < hi[i]).collect();
        let mut out = u.to_vec();
        if !free.is_empty() {
            let fixed: Vec<usize> = (0..m).filter(|i| !free.contains(i)).collect();
            let nf = free.len();
            let rff = Mat::from_fn(nf, nf, |a, b| self.r[(free[a], free[b])]);
            let mut rhs = nalgebra::DVector::zeros(nf);
            for (a, &i) in free.iter().enumerate() {
                let mut acc = 0.0;
                for &j in &fixed {
                    acc += self.r[(i, j)] * (u[j] - v[j]);
                }
                rhs[a] = -acc;
            }
            let sol = rff.cholesky()?.solve(&rhs);
            for (a, &i) in free.iter().enumerate() {
                let ui = v[i] + sol[a];
                if !(ui >= lo[i] && ui <= hi[i]) {
                    return None;
                }
                out[i] = ui;
            }
        }
        let diff: Vec<f64> = out.iter().zip(v).map(|(a, b)| a - b).collect();
        let mut g = vec![0.0; m];
        linalg::mv(&mut g, &self.r, &diff);
        let tol = 1e-13 * (1.0 + linalg::norm_sq(&g).sqrt());
        for i in 0..m {
            if free.contains(&i) {
                continue;
            }
            let at_lo = out[i] <= lo[i];
            let at_hi = out[i] >= hi[i];
            let ok = (at_lo && g[i] >= -tol) || (at_hi && g[i] <= tol) || (at_lo && at_hi);
            if !ok {
                return None;
            }
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, data: &[f64]) -> Mat {
        Mat::from_row_slice(rows, data.len() / rows, data)
    }

    #[test]
    fn whole_space_projection_is_identity() {
        let p = ConvexSet::whole(2).project(&Mat::identity(2, 2), &[3.0, -2.0]).unwrap();
        assert_eq!(p.point, vec![3.0, -2.0]);
    }

    #[test]
    fn identity_weight_box_projection_is_clamp() {
        let set = ConvexSet::new_box(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let p = set.project(&Mat::identity(2, 2), &[2.0, 0.5]).unwrap();
        assert_eq!(p.point, vec![1.0, 0.5]);
    }

    /// Active-set enumeration over the 2² sign patterns of the orthant
    /// problem min ⟨R(u−v),u−v⟩, u ≥ 0, with R = [[2,1],[1,2]], v = (1,−1):
    ///  * both free: u = v, infeasible;
    ///  * u₂ = 0, u₁ free: 2(u₁−1) + (0+1) = 0 → u₁ = 0.5, multiplier
    ///    g₂ = (u₁−1) + 2(0+1) = 1.5 ≥ 0, feasible and optimal;
    ///  * u₁ = 0 only: u₂ = −1 + 0.5 = −0.5 infeasible;
    ///  * both zero: g₁ = 2(−1) + 1 = −1 < 0, not optimal.
    #[test]
    fn weighted_orthant_projection_matches_active_set_enumeration() {
        let r = mat(2, &[2.0, 1.0, 1.0, 2.0]);
        let p = ConvexSet::orthant(2).project(&r, &[1.0, -1.0]).unwrap();
        assert!((p.point[0] - 0.5).abs() < 1e-14, "{:?}", p.point);
        assert!(p.point[1].abs() < 1e-14);

        // Grid oracle, refined around the minimiser.
        let obj = |u: &[f64]| {
            let d = [u[0] - 1.0, u[1] + 1.0];
            linalg::quad_form(&r, &d)
        };
        let (mut best, mut arg) = (f64::INFINITY, [0.0, 0.0]);
        let mut center = [1.0, 1.0];
        let mut half = 1.0;
        for _ in 0..6 {
            for i in 0..=100 {
                for j in 0..=100 {
                    let u = [
                        (center[0] - half + 2.0 * half * i as f64 / 100.0).max(0.0),
                        (center[1] - half + 2.0 * half * j as f64 / 100.0).max(0.0),
                    ];
                    let val = obj(&u);
                    if val < best {
                        best = val;
                        arg = u;
                    }
                }
            }
            center = arg;
            half /= 20.0;
        }
        assert!((arg[0] - 0.5).abs() < 1e-6 && arg[1].abs() < 1e-6, "{arg:?}");
    }

    #[test]
    fn contains_examples() {
        let b = ConvexSet::new_box(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(b.contains(&[0.5, 0.5], 0.0));
        assert!(ConvexSet::orthant(2).contains(&[-1e-13, 0.0], 1e-12));
        let ball = ConvexSet::new_ball(vec![0.0, 0.0], 1.0).unwrap();
        assert!(!ball.contains(&[2.0, 0.0], 1e-9));
    }

    #[test]
    fn samples_are_members() {
        let sets = [
            ConvexSet::whole(3),
            ConvexSet::new_box(vec![-1.0, 0.0, 2.0], vec![1.0, 0.5, 3.0]).unwrap(),
            ConvexSet::new_ball(vec![1.0, -1.0, 0.0], 0.7).unwrap(),
            ConvexSet::orthant(3),
        ];
        for s in &sets {
            let pts = s.sample_boundary_and_interior(100, 1);
            assert_eq!(pts.len(), 100);
            assert!(pts.iter().all(|p| s.contains(p, 1e-12)));
            assert_eq!(pts, s.sample_boundary_and_interior(100, 1));
        }
        let ball = ConvexSet::new_ball(vec![0.0, 0.0], 1.0).unwrap();
        let max_norm = ball
            .sample_boundary_and_interior(100, 1)
            .iter()
            .map(|p| linalg::norm_sq(p).sqrt())
            .fold(0.0, f64::max);
        assert!(max_norm <= 1.0 + 1e-12);
        assert_eq!(ConvexSet::whole(2).sample_boundary_and_interior(3, 7).len(), 3);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(ConvexSet::new_box(vec![1.0], vec![0.0]).is_err());
        assert!(ConvexSet::new_ball(vec![0.0], 0.0).is_err());
        let r = mat(2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            ConvexSet::orthant(2).project(&r, &[1.0, 1.0]),
            Err(ProjectionError::NotSpd(_))
        ));
        assert!(matches!(
            ConvexSet::orthant(2).project(&Mat::identity(3, 3), &[1.0, 1.0]),
            Err(ProjectionError::Dimension { .. })
        ));
    }

    #[test]
    fn ball_weighted_projection_lands_on_sphere() {
        let r = mat(2, &[3.0, 1.0, 1.0, 1.0]);
        let ball = ConvexSet::new_ball(vec![0.5, 0.0], 1.0).unwrap();
        let p = ball.project(&r, &[4.0, -3.0]).unwrap();
        let d = ((p.point[0] - 0.5).powi(2) + p.point[1].powi(2)).sqrt();
        assert!((d - 1.0).abs() < 1e-14);
        assert!(p.kkt_residual < 1e-12);
    }
}
