//! Dense direct solve of the unconstrained consistency system.
//!
//! With `U = R^m` the control map is linear, so every row of the scheme in
//! the parent module is a linear equation. Unknowns are `(x, y, z, p, q, k)`
//! at every node followed by the per-level means; the system is assembled
//! and solved by partial-pivot LU.

use super::{CCSolution, Prepared, SolveDiagnostics, SolveError, SolveMode};
use crate::convexset::ConvexSet;
use crate::linalg::Mat;
use crate::model::ValidatedModel;
use crate::noise_tree::{ScenarioTree, TreeProcess};
use faer::linalg::solvers::Solve;

#[derive(Debug, Clone)]
pub struct DirectSolution {
    pub solution: CCSolution,
    /// Largest absolute equation residual after the solve.
    pub max_residual: f64,
    pub unknowns: usize,
}

struct Layout {
    n: usize,
    nodes: usize,
    depth: usize,
}

impl Layout {
    fn node(&self, tree: &ScenarioTree, level: usize, path: usize, var: usize) -> usize {
        (tree.index(level, path) * 6 + var) * self.n
    }
    fn mean_x(&self, level: usize) -> usize {
        (6 * self.nodes + level) * self.n
    }
    fn mean_y(&self, level: usize) -> usize {
        (6 * self.nodes + self.depth + 1 + level) * self.n
    }
    fn size(&self) -> usize {
        (6 * self.nodes + 2 * (self.depth + 1)) * self.n
    }
}

const X: usize = 0;
const Y: usize = 1;
const Z: usize = 2;
const P: usize = 3;
const Q: usize = 4;
const K: usize = 5;

struct System {
    a: faer::Mat<f64>,
    rhs: faer::Mat<f64>,
}

impl System {
    /// `A[row.., col..] += scale * block`
    fn add(&mut self, row: usize, col: usize, block: &Mat, scale: f64) {
        for i in 0..block.nrows() {
            for j in 0..block.ncols() {
                let v = block[(i, j)];
                if v != 0.0 {
                    self.a[(row + i, col + j)] += scale * v;
                }
            }
        }
    }

    fn eye(&mut self, row: usize, col: usize, n: usize, scale: f64) {
        for i in 0..n {
            self.a[(row + i, col + i)] += scale;
        }
    }

    fn rhs(&mut self, row: usize, v: &[f64], scale: f64) {
        for (i, x) in v.iter().enumerate() {
            self.rhs[(row + i, 0)] += scale * x;
        }
    }
}

/// Solves the unconstrained system directly. Only valid when the control
/// set is the whole space.
pub fn solve_cc_direct_linear(
    model: &ValidatedModel,
    tree: &ScenarioTree,
) -> Result<DirectSolution, SolveError> {
    let spec = model.spec();
    if !matches!(spec.control_set, ConvexSet::Whole { .. }) {
        return Err(SolveError::Unsupported(
            "the direct linear solve needs an unconstrained control set".into(),
        ));
    }
    let prep = Prepared::new(model, tree)?;
    let n = prep.n();
    let depth = tree.depth();
    let dt = tree.dt();
    let s = tree.sqrt_dt();
    let lay = Layout { n, nodes: tree.node_count(), depth };
    let size = lay.size();
    let mut sys = System { a: faer::Mat::zeros(size, size), rhs: faer::Mat::zeros(size, 1) };
    let ident = Mat::identity(n, n);

    // Control as a linear map of the adjoints at each level.
    let gains: Vec<[Mat; 3]> = prep
        .levels
        .iter()
        .map(|l| {
            [
                &l.r_inv * l.c.b.transpose(),
                &l.r_inv * l.c.k.transpose(),
                &l.r_inv * l.c.d.transpose(),
            ]
        })
        .collect();
    let add_control = |sys: &mut System, row: usize, level: usize, path: usize, coef: &Mat| {
        let [gq, gp, gk] = &gains[level];
        sys.add(row, lay.node(tree, level, path, Q), &(coef * gq), 1.0);
        sys.add(row, lay.node(tree, level, path, P), &(coef * gp), 1.0);
        sys.add(row, lay.node(tree, level, path, K), &(coef * gk), 1.0);
    };

    for level in 0..=depth {
        let leaf = level == depth;
        for j in 0..tree.level_size(level) {
            let c = &prep.levels[level].c;
            let row = |var| lay.node(tree, level, j, var);

            // State.
            let r = row(X);
            sys.eye(r, r, n, 1.0);
            if level == 0 {
                sys.rhs(r, &spec.x0, 1.0);
            } else {
                let (pl, pj) = (level - 1, j >> 1);
                let pc = &prep.levels[pl].c;
                let dw = tree.increment(j);
                sys.add(r, lay.node(tree, pl, pj, X), &(&ident + &pc.a * dt), -1.0);
                sys.add(r, lay.mean_x(pl), &pc.f, -dt);
                let ctrl = &pc.b * dt + &pc.d * dw;
                add_control(&mut sys, r, pl, pj, &(-ctrl));
                sys.rhs(r, &pc.x_drift, dt);
                sys.rhs(r, &pc.sigma, dw);
            }

            // Backward state and its diffusion.
            let (ry, rz) = (row(Y), row(Z));
            if leaf {
                sys.eye(ry, ry, n, 1.0);
                sys.add(ry, row(X), &spec.phi, -1.0);
                sys.eye(rz, rz, n, 1.0);
            } else {
                let (up, dn) = (lay.node(tree, level + 1, 2 * j, Y), lay.node(tree, level + 1, 2 * j + 1, Y));
                sys.add(ry, ry, &(&ident - &c.u_coef * dt), 1.0);
                sys.eye(ry, up, n, -0.5);
                sys.eye(ry, dn, n, -0.5);
                sys.add(ry, row(X), &c.m, -dt);
                sys.add(ry, lay.mean_x(level), &c.h, -dt);
                sys.add(ry, lay.mean_y(level), &c.v, -dt);
                add_control(&mut sys, ry, level, j, &(&c.k * -dt));
                sys.rhs(ry, &c.y_drift, dt);
                sys.eye(rz, rz, n, 1.0);
                sys.eye(rz, up, n, -0.5 / s);
                sys.eye(rz, dn, n, 0.5 / s);
            }

            // First adjoint.
            let rp = row(P);
            if leaf {
                sys.eye(rp, rp, n, 1.0);
            } else {
                sys.add(rp, rp, &(&ident - c.u_coef.transpose() * dt), 1.0);
                sys.add(rp, row(Y), &c.l, dt);
                sys.add(rp, lay.mean_y(level), &c.l, -dt);
            }
            if level > 0 {
                sys.eye(rp, lay.node(tree, level - 1, j >> 1, P), n, -1.0);
            }

            // Second adjoint.
            let (rq, rk) = (row(Q), row(K));
            sys.eye(rq, rq, n, 1.0);
            sys.eye(rk, rk, n, 1.0);
            if leaf {
                sys.add(rq, row(P), &spec.phi.transpose(), -1.0);
                sys.add(rq, row(X), &spec.g, 1.0);
                sys.add(rq, lay.mean_x(level), &spec.g, -1.0);
            } else {
                let cl = level + 1;
                let cc = &prep.levels[cl].c;
                for (child, weight) in [(2 * j, 1.0), (2 * j + 1, -1.0)] {
                    // q - E[nu] = 0 and k - (nu_up - nu_dn)/2s = 0.
                    for (r, scale) in [(rq, -0.5), (rk, -0.5 * weight / s)] {
                        sys.eye(r, lay.node(tree, cl, child, Q), n, scale);
                        if cl < depth {
                            sys.add(r, lay.node(tree, cl, child, Q), &cc.a.transpose(), scale * dt);
                            sys.add(r, lay.node(tree, cl, child, P), &cc.m.transpose(), scale * dt);
                            sys.add(r, lay.node(tree, cl, child, X), &cc.q, -scale * dt);
                            sys.add(r, lay.mean_x(cl), &cc.q, scale * dt);
                        }
                    }
                }
            }
        }
    }

    // Means.
    for level in 0..=depth {
        let w = tree.probability(level);
        let (rx, ry) = (lay.mean_x(level), lay.mean_y(level));
        sys.eye(rx, rx, n, 1.0);
        sys.eye(ry, ry, n, 1.0);
        for j in 0..tree.level_size(level) {
            sys.eye(rx, lay.node(tree, level, j, X), n, -w);
            sys.eye(ry, lay.node(tree, level, j, Y), n, -w);
        }
    }

    let lu = sys.a.partial_piv_lu();
    let sol = lu.solve(&sys.rhs);
    let residual_vec = &sys.a * &sol - &sys.rhs;
    let mut max_residual: f64 = 0.0;
    for i in 0..size {
        let r = residual_vec[(i, 0)];
        max_residual = if r.is_finite() { max_residual.max(r.abs()) } else { f64::INFINITY };
    }
    if !(max_residual < 1e-8) {
        return Err(SolveError::Singular(max_residual));
    }

    let value = |i: usize| sol[(i, 0)];
    let proc = |var: usize| {
        TreeProcess::from_fn(tree, n, |level, path| {
            let base = lay.node(tree, level, path, var);
            (0..n).map(|i| value(base + i)).collect()
        })
    };
    let (p, q, k) = (proc(P), proc(Q), proc(K));
    let m = prep.m();
    let mut u = TreeProcess::zeros(tree, m);
    for level in 0..=depth {
        for j in 0..tree.level_size(level) {
            prep.control(level, p.get(level, j), q.get(level, j), k.get(level, j), u.get_mut(level, j))?;
        }
    }
    let means = |f: fn(&Layout, usize) -> usize| -> Vec<Vec<f64>> {
        (0..=depth)
            .map(|level| (0..n).map(|i| value(f(&lay, level) + i)).collect())
            .collect()
    };
    let solution = CCSolution {
        x: proc(X),
        y: proc(Y),
        z: proc(Z),
        p,
        q,
        k,
        u,
        mean_x: means(Layout::mean_x),
        mean_y: means(Layout::mean_y),
        diagnostics: SolveDiagnostics {
            mode: SolveMode::Auto,
            iterations: 0,
            final_residual: max_residual,
            alpha_path: vec![1.0],
            stages: Vec::new(),
        },
    };
    Ok(DirectSolution { solution, max_residual, unknowns: size })
}
