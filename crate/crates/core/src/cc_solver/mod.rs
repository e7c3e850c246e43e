//! Solver for the consistency system: the Hamiltonian system of a generic
//! agent whose frozen means are required to equal the means of its own
//! optimal state.
//!
//! The scheme on the tree is the exact optimality system of the discretized
//! frozen-mean control problem. With `Δt` the step, `s = √Δt` and coefficient
//! slice `k` on `[t_k, t_{k+1})`:
//!
//! * `u = P_U[R⁻¹(Bᵀq + Kᵀp + Dᵀk)]` at every node;
//! * `x_{child} = x + Δt(Ax + Bu + F m_x + b) + ΔW(Du + σ)`, `x_root = x0`;
//! * `y = Φx` at leaves, otherwise
//!   `(I − ΔtU)y = E[y_{child}] + Δt(Mx + H m_x + V m_y + Ku + f)` and
//!   `z = (y_up − y_dn)/2s`;
//! * `(I − ΔtUᵀ)p = p_{parent} − ΔtL(y − m_y)` below the leaves, `p = 0`
//!   above the root, and leaves copy their parent;
//! * `q = Φᵀp − G(x − m_x)` at leaves; otherwise with
//!   `ν = q_c + Δt(Aᵀq_c + Mᵀp_c − Q(x_c − m_x))` for each non-leaf child
//!   (and `ν = q_c` for a leaf child), `q = E[ν]`, `k = (ν_up − ν_dn)/2s`.
//!
//! Since the means are frozen inside one sweep, the solution of this system is
//! the global minimiser of the left-endpoint discrete cost (see
//! [`limiting_cost`]) for the frozen means, and the consistency fixed point
//! closes the loop. The continuation family multiplies every coefficient of
//! the system except the control map by `α`; `α = 0` is solved in closed form.

mod direct;

pub use direct::{solve_cc_direct_linear, DirectSolution};

use crate::convexset::{ConvexSet, ProjectionError, WeightedProjector};
use crate::linalg::{self, Mat};
use crate::model::{CoefficientSlice, ModelError, ModelSpec, ValidatedModel};
use crate::noise_tree::{ScenarioTree, TreeProcess};
use serde::Serialize;
use thiserror::Error;

/// Largest condition number of `R` the solver accepts.
pub const MAX_R_CONDITION: f64 = 1e8;
/// Smallest damping the automatic halving reaches.
pub const MIN_DAMPING: f64 = 1.0 / 64.0;
const BLOWUP: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error("model only passes permissive validation; pass allow_permissive to solve it")]
    PermissiveRefused,
    #[error("R is ill-conditioned at level {level} (condition number {condition:e})")]
    IllConditioned { level: usize, condition: f64 },
    #[error("tree horizon {tree} differs from model horizon {model}")]
    HorizonMismatch { tree: f64, model: f64 },
    #[error("invalid solver options: {0}")]
    Options(String),
    #[error("{0}")]
    Unsupported(String),
    #[error("linear system is singular or inaccurate (residual {0:e})")]
    Singular(f64),
    #[error("solver diverged at alpha = {alpha} (damping {damping}, last residual {last:e})", last = residual_history.last().copied().unwrap_or(f64::NAN))]
    Diverged { alpha: f64, damping: f64, residual_history: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    /// Picard at the target problem, falling back to continuation.
    Auto,
    /// Picard at the target problem with fixed damping and no fallback.
    PicardOnly,
    Continuation,
}

impl std::str::FromStr for SolveMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "auto" => Ok(SolveMode::Auto),
            "picard_only" | "picard-only" => Ok(SolveMode::PicardOnly),
            "continuation" => Ok(SolveMode::Continuation),
            other => Err(format!("unknown solve mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveOptions {
    pub picard_tol: f64,
    /// Iteration cap per continuation stage.
    pub max_iters: usize,
    pub damping: f64,
    pub continuation_steps: usize,
    pub mode: SolveMode,
    /// Accept models that only pass permissive validation.
    pub allow_permissive: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            picard_tol: 1e-10,
            max_iters: 500,
            damping: 1.0,
            continuation_steps: 10,
            mode: SolveMode::Auto,
            allow_permissive: false,
        }
    }
}

impl SolveOptions {
    pub fn check(&self) -> Result<(), SolveError> {
        if !(self.picard_tol > 0.0) {
            return Err(SolveError::Options("picard_tol must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(SolveError::Options("damping must lie in (0, 1]".into()));
        }
        if self.continuation_steps == 0 {
            return Err(SolveError::Options("continuation_steps must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return Err(SolveError::Options("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageDiagnostics {
    pub alpha: f64,
    pub iterations: usize,
    pub final_damping: f64,
    pub converged: bool,
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveDiagnostics {
    pub mode: SolveMode,
    pub iterations: usize,
    pub final_residual: f64,
    /// `α` values of the stages that produced the solution, in order.
    pub alpha_path: Vec<f64>,
    /// Every stage attempted, including a failed direct attempt in auto mode.
    pub stages: Vec<StageDiagnostics>,
}

/// Processes on the tree, per-level means and diagnostics.
///
/// For [`solve_cc`] the means are `E x` and `E y` of the returned state. For
/// [`solve_auxiliary`] they are the frozen inputs.
#[derive(Debug, Clone)]
pub struct CCSolution {
    pub x: TreeProcess,
    pub y: TreeProcess,
    pub z: TreeProcess,
    pub p: TreeProcess,
    pub q: TreeProcess,
    pub k: TreeProcess,
    pub u: TreeProcess,
    pub mean_x: Vec<Vec<f64>>,
    pub mean_y: Vec<Vec<f64>>,
    pub diagnostics: SolveDiagnostics,
}

impl CCSolution {
    /// Means CSV: `level,t,m_x0..,m_y0..`.
    pub fn means_csv(&self, tree: &ScenarioTree) -> String {
        let n = self.mean_x[0].len();
        let mut out = String::from("level,t");
        (0..n).for_each(|i| out.push_str(&format!(",m_x{i}")));
        (0..n).for_each(|i| out.push_str(&format!(",m_y{i}")));
        out.push('\n');
        for (lvl, (mx, my)) in self.mean_x.iter().zip(&self.mean_y).enumerate() {
            out.push_str(&format!("{lvl},{}", tree.time(lvl)));
            mx.iter().chain(my).for_each(|v| out.push_str(&format!(",{v}")));
            out.push('\n');
        }
        out
    }
}

/// `P_U[R⁻¹(Bᵀq + Kᵀp + Dᵀk)]`.
#[allow(clippy::too_many_arguments)]
pub fn phi(
    r: &Mat,
    b: &Mat,
    kc: &Mat,
    d: &Mat,
    set: &ConvexSet,
    p: &[f64],
    q: &[f64],
    k: &[f64],
) -> Result<Vec<f64>, SolveError> {
    let projector = WeightedProjector::new(set.clone(), r)?;
    let r_inv = r
        .clone()
        .cholesky()
        .ok_or_else(|| ProjectionError::NotSpd("Cholesky factorisation failed".into()))?
        .inverse();
    let mut out = vec![0.0; r.nrows()];
    control_map(&projector, &r_inv, b, kc, d, p, q, k, &mut out)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn control_map(
    projector: &WeightedProjector,
    r_inv: &Mat,
    b: &Mat,
    kc: &Mat,
    d: &Mat,
    p: &[f64],
    q: &[f64],
    k: &[f64],
    out: &mut [f64],
) -> Result<(), ProjectionError> {
    let mut w = vec![0.0; out.len()];
    linalg::mtv_add(&mut w, b, q, 1.0);
    linalg::mtv_add(&mut w, kc, p, 1.0);
    linalg::mtv_add(&mut w, d, k, 1.0);
    linalg::mv(out, r_inv, &w);
    if !matches!(projector.set(), ConvexSet::Whole { .. }) {
        let proj = projector.project(out)?;
        out.copy_from_slice(&proj.point);
    }
    Ok(())
}

/// One forward Euler step of the state on a branch with increment `dw`.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn forward_step(
    c: &CoefficientSlice,
    alpha: f64,
    dt: f64,
    dw: f64,
    x: &[f64],
    u: &[f64],
    mean_x: &[f64],
    out: &mut [f64],
) {
    out.copy_from_slice(x);
    let s = alpha * dt;
    linalg::mv_add(out, &c.a, x, s);
    linalg::mv_add(out, &c.b, u, s);
    linalg::mv_add(out, &c.f, mean_x, s);
    let w = alpha * dw;
    linalg::mv_add(out, &c.d, u, w);
    for i in 0..out.len() {
        out[i] += s * c.x_drift[i] + w * c.sigma[i];
    }
}

/// Per-level data shared by all sweeps on one (model, tree) pair.
pub(crate) struct Prepared {
    pub spec: ModelSpec,
    pub tree: ScenarioTree,
    pub levels: Vec<LevelData>,
}

pub(crate) struct LevelData {
    pub c: CoefficientSlice,
    pub projector: WeightedProjector,
    pub r_inv: Mat,
}

impl Prepared {
    pub fn new(model: &ValidatedModel, tree: &ScenarioTree) -> Result<Self, SolveError> {
        Prepared::from_spec(model.spec(), tree)
    }

    pub fn from_spec(spec: &ModelSpec, tree: &ScenarioTree) -> Result<Self, SolveError> {
        if (tree.horizon() - spec.horizon).abs() > 1e-12 * spec.horizon {
            return Err(SolveError::HorizonMismatch { tree: tree.horizon(), model: spec.horizon });
        }
        let slices = spec.slices_on_grid(tree.depth())?;
        let mut levels = Vec::with_capacity(slices.len());
        for (level, c) in slices.into_iter().enumerate() {
            let ev = linalg::sym_eigenvalues(&c.r);
            let condition = ev[ev.len() - 1] / ev[0];
            if !(ev[0] > 0.0) || condition > MAX_R_CONDITION {
                return Err(SolveError::IllConditioned { level, condition });
            }
            let projector = WeightedProjector::new(spec.control_set.clone(), &c.r)?;
            let r_inv = c.r.clone().cholesky().expect("R checked positive definite").inverse();
            levels.push(LevelData { c, projector, r_inv });
        }
        Ok(Prepared { spec: spec.clone(), tree: *tree, levels })
    }

    pub fn n(&self) -> usize {
        self.spec.state_dim
    }

    pub fn m(&self) -> usize {
        self.spec.control_dim
    }

    #[inline]
    pub fn control(
        &self,
        level: usize,
        p: &[f64],
        q: &[f64],
        k: &[f64],
        out: &mut [f64],
    ) -> Result<(), ProjectionError> {
        let l = &self.levels[level];
        control_map(&l.projector, &l.r_inv, &l.c.b, &l.c.k, &l.c.d, p, q, k, out)
    }

    /// `(I − αΔtU_k)⁻¹` and `(I − αΔtU_kᵀ)⁻¹` per level.
    fn implicit_inverses(&self, alpha: f64) -> Vec<(Mat, Mat)> {
        let n = self.n();
        let dt = self.tree.dt();
        self.levels
            .iter()
            .map(|l| {
                let m = Mat::identity(n, n) - &l.c.u_coef * (alpha * dt);
                let inv = m.clone().try_inverse().expect("I - dt U is invertible at desk step sizes");
                let inv_t = inv.transpose();
                (inv, inv_t)
            })
            .collect()
    }
}

/// Current values of every unknown; means are flat `(depth + 1) × n`.
#[derive(Clone)]
struct Iterate {
    x: TreeProcess,
    y: TreeProcess,
    z: TreeProcess,
    p: TreeProcess,
    q: TreeProcess,
    k: TreeProcess,
    u: TreeProcess,
    mx: Vec<f64>,
    my: Vec<f64>,
}

impl Iterate {
    /// The closed-form solution of the `α = 0` problem.
    fn zero_problem(prep: &Prepared) -> Self {
        let tree = &prep.tree;
        let n = prep.n();
        let x0 = prep.spec.x0.clone();
        Iterate {
            x: TreeProcess::from_fn(tree, n, |_, _| x0.clone()),
            y: TreeProcess::zeros(tree, n),
            z: TreeProcess::zeros(tree, n),
            p: TreeProcess::zeros(tree, n),
            q: TreeProcess::zeros(tree, n),
            k: TreeProcess::zeros(tree, n),
            u: TreeProcess::zeros(tree, prep.m()),
            mx: x0.iter().copied().cycle().take(n * (tree.depth() + 1)).collect(),
            my: vec![0.0; n * (tree.depth() + 1)],
        }
    }

    fn with_means(prep: &Prepared, mx: &[Vec<f64>], my: &[Vec<f64>]) -> Self {
        let mut it = Iterate::zero_problem(prep);
        it.mx = mx.concat();
        it.my = my.concat();
        it
    }

    fn change(&self, other: &Iterate) -> f64 {
        [
            self.p.max_abs_diff(&other.p),
            self.q.max_abs_diff(&other.q),
            self.k.max_abs_diff(&other.k),
            linalg::sup_diff(&self.mx, &other.mx),
            linalg::sup_diff(&self.my, &other.my),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    /// `self ← self + θ(next − self)` on the iterated unknowns.
    fn damp_toward(&mut self, next: &Iterate, theta: f64) {
        fn mix(a: &mut [f64], b: &[f64], theta: f64) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += theta * (y - *x);
            }
        }
        if theta == 1.0 {
            self.clone_from(next);
            return;
        }
        mix(self.p.as_mut_slice(), next.p.as_slice(), theta);
        mix(self.q.as_mut_slice(), next.q.as_slice(), theta);
        mix(self.k.as_mut_slice(), next.k.as_slice(), theta);
        mix(&mut self.mx, &next.mx, theta);
        mix(&mut self.my, &next.my, theta);
    }
}

/// One sweep of the scheme. Reads `(p, q, k)` and the means from `cur`,
/// writes every unknown of `next`. With `frozen` the means are kept.
fn sweep(
    prep: &Prepared,
    alpha: f64,
    inverses: &[(Mat, Mat)],
    cur: &Iterate,
    frozen: bool,
    next: &mut Iterate,
) -> Result<(), ProjectionError> {
    let tree = &prep.tree;
    let depth = tree.depth();
    let n = prep.n();
    let dt = tree.dt();
    let s = tree.sqrt_dt();
    let spec = &prep.spec;

    // Controls.
    for level in 0..=depth {
        for j in 0..tree.level_size(level) {
            let (p, q, k) = (cur.p.get(level, j), cur.q.get(level, j), cur.k.get(level, j));
            prep.control(level, p, q, k, next.u.get_mut(level, j))?;
        }
    }

    // State, forward.
    next.x.get_mut(0, 0).copy_from_slice(&spec.x0);
    let mut buf = vec![0.0; n];
    for level in 0..depth {
        let c = &prep.levels[level].c;
        let mean = &cur.mx[level * n..(level + 1) * n];
        for j in 0..tree.level_size(level) {
            for (child, dw) in [(2 * j, s), (2 * j + 1, -s)] {
                forward_step(
                    c,
                    alpha,
                    dt,
                    dw,
                    next.x.get(level, j),
                    next.u.get(level, j),
                    mean,
                    &mut buf,
                );
                next.x.get_mut(level + 1, child).copy_from_slice(&buf);
            }
        }
    }
    if frozen {
        next.mx.clone_from(&cur.mx);
    } else {
        for level in 0..=depth {
            next.mx[level * n..(level + 1) * n].copy_from_slice(&next.x.level_mean(level));
        }
    }

    // Backward state.
    for j in 0..tree.level_size(depth) {
        let mut y = vec![0.0; n];
        linalg::mv_add(&mut y, &spec.phi, next.x.get(depth, j), alpha);
        next.y.get_mut(depth, j).copy_from_slice(&y);
        next.z.get_mut(depth, j).iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rhs = vec![0.0; n];
    let mut zbuf = vec![0.0; n];
    for level in (0..depth).rev() {
        let c = &prep.levels[level].c;
        let inv = &inverses[level].0;
        let mx = &next.mx[level * n..(level + 1) * n];
        let my = &cur.my[level * n..(level + 1) * n];
        let sdt = alpha * dt;
        for j in 0..tree.level_size(level) {
            tree.martingale_representation_into(
                next.y.get(level + 1, 2 * j),
                next.y.get(level + 1, 2 * j + 1),
                &mut rhs,
                &mut zbuf,
            );
            linalg::mv_add(&mut rhs, &c.m, next.x.get(level, j), sdt);
            linalg::mv_add(&mut rhs, &c.h, mx, sdt);
            linalg::mv_add(&mut rhs, &c.v, my, sdt);
            linalg::mv_add(&mut rhs, &c.k, next.u.get(level, j), sdt);
            for i in 0..n {
                rhs[i] += sdt * c.y_drift[i];
            }
            linalg::mv(next.y.get_mut(level, j), inv, &rhs);
            next.z.get_mut(level, j).copy_from_slice(&zbuf);
        }
    }
    if frozen {
        next.my.clone_from(&cur.my);
    } else {
        for level in 0..=depth {
            next.my[level * n..(level + 1) * n].copy_from_slice(&next.y.level_mean(level));
        }
    }

    // First adjoint, forward.
    for level in 0..=depth {
        let my = &next.my[level * n..(level + 1) * n];
        for j in 0..tree.level_size(level) {
            let parent: Vec<f64> = if level == 0 {
                vec![0.0; n]
            } else {
                next.p.get(level - 1, j >> 1).to_vec()
            };
            if level == depth {
                next.p.get_mut(level, j).copy_from_slice(&parent);
                continue;
            }
            let c = &prep.levels[level].c;
            let mut r = parent;
            let dev: Vec<f64> = next.y.get(level, j).iter().zip(my).map(|(a, b)| a - b).collect();
            linalg::mv_add(&mut r, &c.l, &dev, -alpha * dt);
            linalg::mv(next.p.get_mut(level, j), &inverses[level].1, &r);
        }
    }

    // Second adjoint, backward.
    {
        let mx = &next.mx[depth * n..(depth + 1) * n];
        for j in 0..tree.level_size(depth) {
            let mut q = vec![0.0; n];
            linalg::mtv_add(&mut q, &spec.phi, next.p.get(depth, j), alpha);
            let dev: Vec<f64> = next.x.get(depth, j).iter().zip(mx).map(|(a, b)| a - b).collect();
            linalg::mv_add(&mut q, &spec.g, &dev, -alpha);
            next.q.get_mut(depth, j).copy_from_slice(&q);
            next.k.get_mut(depth, j).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut nu_up = vec![0.0; n];
    let mut nu_dn = vec![0.0; n];
    let mut dev = vec![0.0; n];
    for level in (0..depth).rev() {
        let child_level = level + 1;
        let child_is_leaf = child_level == depth;
        let c = &prep.levels[child_level].c;
        let mx = &next.mx[child_level * n..(child_level + 1) * n];
        for j in 0..tree.level_size(level) {
            for (child, nu) in [(2 * j, &mut nu_up), (2 * j + 1, &mut nu_dn)] {
                let qc = next.q.get(child_level, child);
                nu.copy_from_slice(qc);
                if !child_is_leaf {
                    let sdt = alpha * dt;
                    linalg::mtv_add(nu, &c.a, qc, sdt);
                    linalg::mtv_add(nu, &c.m, next.p.get(child_level, child), sdt);
                    for (i, d) in dev.iter_mut().enumerate() {
                        *d = next.x.get(child_level, child)[i] - mx[i];
                    }
                    linalg::mv_add(nu, &c.q, &dev, -sdt);
                }
            }
            let (mut qv, mut kv) = (vec![0.0; n], vec![0.0; n]);
            tree.martingale_representation_into(&nu_up, &nu_dn, &mut qv, &mut kv);
            next.q.get_mut(level, j).copy_from_slice(&qv);
            next.k.get_mut(level, j).copy_from_slice(&kv);
        }
    }
    Ok(())
}

enum Stage {
    Converged(Box<Iterate>),
    Failed,
}

/// Picard iterations for one value of `α`, optionally halving the damping
/// when the residual grows.
fn picard_stage(
    prep: &Prepared,
    alpha: f64,
    start: &Iterate,
    frozen: bool,
    opts: &SolveOptions,
    adaptive: bool,
) -> Result<(Stage, StageDiagnostics), SolveError> {
    let inverses = prep.implicit_inverses(alpha);
    let mut cur = start.clone();
    let mut next = start.clone();
    let mut theta = opts.damping;
    let mut residuals = Vec::new();
    let mut prev = f64::INFINITY;
    for it in 1..=opts.max_iters {
        sweep(prep, alpha, &inverses, &cur, frozen, &mut next)?;
        let res = cur.change(&next);
        residuals.push(res);
        let diag = |converged: bool, theta: f64, residuals: Vec<f64>| StageDiagnostics {
            alpha,
            iterations: it,
            final_damping: theta,
            converged,
            residuals,
        };
        if res < opts.picard_tol {
            return Ok((Stage::Converged(Box::new(next)), diag(true, theta, residuals)));
        }
        if !res.is_finite() || res > BLOWUP {
            if adaptive && theta > MIN_DAMPING {
                theta = (theta / 2.0).max(MIN_DAMPING);
                cur = start.clone();
                prev = f64::INFINITY;
                continue;
            }
            return Ok((Stage::Failed, diag(false, theta, residuals)));
        }
        if adaptive && res > prev && theta > MIN_DAMPING {
            theta = (theta / 2.0).max(MIN_DAMPING);
        }
        prev = res;
        cur.damp_toward(&next, theta);
    }
    let iterations = opts.max_iters;
    Ok((
        Stage::Failed,
        StageDiagnostics { alpha, iterations, final_damping: theta, converged: false, residuals },
    ))
}

fn run_modes(
    prep: &Prepared,
    start: Iterate,
    frozen: bool,
    opts: &SolveOptions,
) -> Result<(Iterate, SolveDiagnostics), SolveError> {
    opts.check()?;
    let mut stages = Vec::new();
    let finish = |it: Iterate, stages: Vec<StageDiagnostics>, alpha_path: Vec<f64>| {
        let iterations = stages.iter().map(|s: &StageDiagnostics| s.iterations).sum();
        let final_residual = stages
            .last()
            .and_then(|s| s.residuals.last().copied())
            .unwrap_or(0.0);
        (it, SolveDiagnostics { mode: opts.mode, iterations, final_residual, alpha_path, stages })
    };
    let diverged = |d: &StageDiagnostics| SolveError::Diverged {
        alpha: d.alpha,
        damping: d.final_damping,
        residual_history: d.residuals.clone(),
    };
    if opts.mode != SolveMode::Continuation {
        let adaptive = opts.mode == SolveMode::Auto;
        let (outcome, diag) = picard_stage(prep, 1.0, &start, frozen, opts, adaptive)?;
        stages.push(diag);
        match outcome {
            Stage::Converged(it) => return Ok(finish(*it, stages, vec![1.0])),
            Stage::Failed if opts.mode == SolveMode::PicardOnly => {
                return Err(diverged(stages.last().expect("one stage")))
            }
            Stage::Failed => {}
        }
    }
    let steps = opts.continuation_steps;
    let mut cur = start;
    let mut path = Vec::with_capacity(steps);
    for j in 1..=steps {
        let alpha = j as f64 / steps as f64;
        let (outcome, diag) = picard_stage(prep, alpha, &cur, frozen, opts, true)?;
        stages.push(diag);
        match outcome {
            Stage::Converged(it) => cur = *it,
            Stage::Failed => return Err(diverged(stages.last().expect("one stage"))),
        }
        path.push(alpha);
    }
    Ok(finish(cur, stages, path))
}

fn split_means(flat: &[f64], n: usize) -> Vec<Vec<f64>> {
    flat.chunks(n).map(<[f64]>::to_vec).collect()
}

fn into_solution(it: Iterate, n: usize, diagnostics: SolveDiagnostics) -> CCSolution {
    CCSolution {
        mean_x: split_means(&it.mx, n),
        mean_y: split_means(&it.my, n),
        x: it.x,
        y: it.y,
        z: it.z,
        p: it.p,
        q: it.q,
        k: it.k,
        u: it.u,
        diagnostics,
    }
}

fn check_permissive(model: &ValidatedModel, opts: &SolveOptions) -> Result<(), SolveError> {
    if !model.is_strict() && !opts.allow_permissive {
        return Err(SolveError::PermissiveRefused);
    }
    Ok(())
}

/// Solves the consistency system on `tree`.
pub fn solve_cc(
    model: &ValidatedModel,
    tree: &ScenarioTree,
    opts: &SolveOptions,
) -> Result<CCSolution, SolveError> {
    check_permissive(model, opts)?;
    let prep = Prepared::new(model, tree)?;
    let (it, diag) = run_modes(&prep, Iterate::zero_problem(&prep), false, opts)?;
    Ok(into_solution(it, prep.n(), diag))
}

/// Solves the Hamiltonian system of the generic agent against the given
/// frozen mean paths (one `n`-vector per level). The returned solution
/// carries the frozen means.
pub fn solve_auxiliary(
    model: &ValidatedModel,
    tree: &ScenarioTree,
    mean_x: &[Vec<f64>],
    mean_y: &[Vec<f64>],
    opts: &SolveOptions,
) -> Result<CCSolution, SolveError> {
    check_permissive(model, opts)?;
    let prep = Prepared::new(model, tree)?;
    let n = prep.n();
    for (name, path) in [("mean_x", mean_x), ("mean_y", mean_y)] {
        if path.len() != tree.depth() + 1 || path.iter().any(|v| v.len() != n) {
            return Err(SolveError::Options(format!(
                "{name} must hold {} vectors of length {n}",
                tree.depth() + 1
            )));
        }
    }
    let start = Iterate::with_means(&prep, mean_x, mean_y);
    let (it, diag) = run_modes(&prep, start, true, opts)?;
    Ok(into_solution(it, n, diag))
}

/// State processes `(x, y, z)` generated by an arbitrary tree control
/// against frozen means, using the same discretization as the solver.
pub fn states_under_control(
    model: &ValidatedModel,
    tree: &ScenarioTree,
    control: &TreeProcess,
    mean_x: &[Vec<f64>],
    mean_y: &[Vec<f64>],
) -> Result<(TreeProcess, TreeProcess, TreeProcess), SolveError> {
    let prep = Prepared::new(model, tree)?;
    let n = prep.n();
    let depth = tree.depth();
    let (dt, s) = (tree.dt(), tree.sqrt_dt());
    let spec = &prep.spec;
    let mut x = TreeProcess::zeros(tree, n);
    let mut y = TreeProcess::zeros(tree, n);
    let mut z = TreeProcess::zeros(tree, n);
    x.get_mut(0, 0).copy_from_slice(&spec.x0);
    let mut buf = vec![0.0; n];
    for level in 0..depth {
        let c = &prep.levels[level].c;
        for j in 0..tree.level_size(level) {
            for (child, dw) in [(2 * j, s), (2 * j + 1, -s)] {
                let xj = x.get(level, j).to_vec();
                forward_step(c, 1.0, dt, dw, &xj, control.get(level, j), &mean_x[level], &mut buf);
                x.get_mut(level + 1, child).copy_from_slice(&buf);
            }
        }
    }
    let inverses = prep.implicit_inverses(1.0);
    for j in 0..tree.level_size(depth) {
        let xv = x.get(depth, j).to_vec();
        linalg::mv(y.get_mut(depth, j), &spec.phi, &xv);
    }
    let mut rhs = vec![0.0; n];
    let mut zb = vec![0.0; n];
    for level in (0..depth).rev() {
        let c = &prep.levels[level].c;
        for j in 0..tree.level_size(level) {
            tree.martingale_representation_into(
                y.get(level + 1, 2 * j),
                y.get(level + 1, 2 * j + 1),
                &mut rhs,
                &mut zb,
            );
            linalg::mv_add(&mut rhs, &c.m, x.get(level, j), dt);
            linalg::mv_add(&mut rhs, &c.h, &mean_x[level], dt);
            linalg::mv_add(&mut rhs, &c.v, &mean_y[level], dt);
            linalg::mv_add(&mut rhs, &c.k, control.get(level, j), dt);
            for i in 0..n {
                rhs[i] += dt * c.y_drift[i];
            }
            linalg::mv(y.get_mut(level, j), &inverses[level].0, &rhs);
            z.get_mut(level, j).copy_from_slice(&zb);
        }
    }
    Ok((x, y, z))
}

/// Left-endpoint tree quadrature of the limiting cost
/// `½E[Σ_k Δt(|x−m_x|²_Q + |y−m_y|²_L + |u|²_R) + |x_T − m_x(T)|²_G]`.
pub fn limiting_cost(
    model: &ValidatedModel,
    tree: &ScenarioTree,
    x: &TreeProcess,
    y: &TreeProcess,
    control: &TreeProcess,
    mean_x: &[Vec<f64>],
    mean_y: &[Vec<f64>],
) -> Result<f64, SolveError> {
    let slices = model.spec().slices_on_grid(tree.depth())?;
    let depth = tree.depth();
    let dt = tree.dt();
    let mut total = 0.0;
    for level in 0..depth {
        let c = &slices[level];
        let mut acc = 0.0;
        for j in 0..tree.level_size(level) {
            let dx: Vec<f64> = x.get(level, j).iter().zip(&mean_x[level]).map(|(a, b)| a - b).collect();
            let dy: Vec<f64> = y.get(level, j).iter().zip(&mean_y[level]).map(|(a, b)| a - b).collect();
            acc += linalg::quad_form(&c.q, &dx)
                + linalg::quad_form(&c.l, &dy)
                + linalg::quad_form(&c.r, control.get(level, j));
        }
        total += dt * acc * tree.probability(level);
    }
    let g = &model.spec().g;
    let mut acc = 0.0;
    for j in 0..tree.level_size(depth) {
        let dx: Vec<f64> = x.get(depth, j).iter().zip(&mean_x[depth]).map(|(a, b)| a - b).collect();
        acc += linalg::quad_form(g, &dx);
    }
    total += acc * tree.probability(depth);
    Ok(0.5 * total)
}

/// Largest value of `⟨Bᵀq + Kᵀp + Dᵀk − Rū, v − ū⟩` over all nodes and
/// `samples` points `v` of the control set; nonpositive up to rounding for
/// an optimal control.
pub fn check_max_principle(
    model: &ValidatedModel,
    tree: &ScenarioTree,
    sol: &CCSolution,
    samples: usize,
    seed: u64,
) -> Result<f64, SolveError> {
    let prep = Prepared::new(model, tree)?;
    let set = &prep.spec.control_set;
    let points = set.sample_boundary_and_interior(samples, seed);
    let m = prep.m();
    let mut worst = f64::NEG_INFINITY;
    for level in 0..=tree.depth() {
        let c = &prep.levels[level].c;
        for j in 0..tree.level_size(level) {
            let u = sol.u.get(level, j);
            let mut g = vec![0.0; m];
            linalg::mtv_add(&mut g, &c.b, sol.q.get(level, j), 1.0);
            linalg::mtv_add(&mut g, &c.k, sol.p.get(level, j), 1.0);
            linalg::mtv_add(&mut g, &c.d, sol.k.get(level, j), 1.0);
            linalg::mv_add(&mut g, &c.r, u, -1.0);
            for v in &points {
                let val: f64 = g.iter().zip(v.iter().zip(u)).map(|(gi, (vi, ui))| gi * (vi - ui)).sum();
                worst = worst.max(val);
            }
        }
    }
    Ok(worst)
}
