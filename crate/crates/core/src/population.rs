//! Finite populations playing the decentralized strategy.
//!
//! Every agent follows its own path through the shared scenario tree, so its
//! control is read off a tree process. The forward states are simulated
//! jointly with the realized state average in the drift. The backward
//! components live on the joint filtration of all agents, which has far too
//! many nodes to sweep. They are linear, though, so `E[· | F_k]` of any
//! future aggregate splits into per-agent tree conditional expectations.
//! Each level then needs one short deterministic backward recursion.
//!
//! Write `ξⁱ` for the state agent `i` would have with the frozen means. Its
//! realized state is `ξⁱ + δ`, where the correction `δ` is the same for all
//! agents and is driven by the gap between the state average and `m_x`.

use crate::cc_solver::{forward_step, CCSolution, SolveError};
use crate::linalg::{self, Mat};
use crate::model::{CoefficientSlice, ValidatedModel};
use crate::noise_tree::{ScenarioTree, TreeProcess};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

/// Largest state or control dimension the backward evaluation accepts.
pub const MAX_BACKWARD_DIM: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PopulationError {
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("a population needs at least {min} agents, got {got}")]
    Agents { min: usize, got: usize },
    #[error("the consistency solution is not converged")]
    NotConverged,
    #[error("leaf {leaf} is outside a tree with {leaves} leaves")]
    Leaf { leaf: usize, leaves: usize },
    #[error("solution or control does not match the tree: {0}")]
    Shape(String),
    #[error("control at level {level}, path {path} is outside the control set")]
    Inadmissible { level: usize, path: usize },
    #[error("{0}")]
    Unsupported(String),
}

/// `E[v_l | node]` for every node and every later level `l`.
#[derive(Debug, Clone)]
struct CondTable {
    dim: usize,
    depth: usize,
    base: Vec<usize>,
    values: Vec<f64>,
}

impl CondTable {
    fn build(tree: &ScenarioTree, proc: &TreeProcess) -> Self {
        let depth = tree.depth();
        let dim = proc.dim();
        let mut base = Vec::with_capacity(depth + 1);
        let mut total = 0;
        for k in 0..=depth {
            base.push(total);
            total += (1usize << k) * (depth - k + 1) * dim;
        }
        let mut t = CondTable { dim, depth, base, values: vec![0.0; total] };
        for k in (0..=depth).rev() {
            for path in 0..tree.level_size(k) {
                let at = t.offset(k, path);
                t.values[at..at + dim].copy_from_slice(proc.get(k, path));
                if k == depth {
                    continue;
                }
                let (up, dn) = (t.offset(k + 1, 2 * path), t.offset(k + 1, 2 * path + 1));
                for i in 0..(depth - k) * dim {
                    t.values[at + dim + i] = 0.5 * (t.values[up + i] + t.values[dn + i]);
                }
            }
        }
        t
    }

    fn offset(&self, level: usize, path: usize) -> usize {
        self.base[level] + path * (self.depth - level + 1) * self.dim
    }

    /// Conditional expectations at levels `level..=depth`, level-major.
    fn span(&self, level: usize, path: usize) -> &[f64] {
        let at = self.offset(level, path);
        &self.values[at..at + (self.depth - level + 1) * self.dim]
    }
}

/// A tree control together with the state it generates under the frozen
/// means, with conditional expectation tables for both.
#[derive(Debug, Clone)]
pub struct Profile {
    pub x: TreeProcess,
    pub u: TreeProcess,
    cx: CondTable,
    cu: CondTable,
}

impl Profile {
    fn new(tree: &ScenarioTree, x: TreeProcess, u: TreeProcess) -> Self {
        let cx = CondTable::build(tree, &x);
        let cu = CondTable::build(tree, &u);
        Profile { x, u, cx, cu }
    }
}

/// Per-agent cost split into its quadratic terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub tracking_x: f64,
    pub tracking_y: f64,
    pub control_effort: f64,
    pub terminal: f64,
    pub total: f64,
}

/// One realization of the population's forward states.
#[derive(Debug, Clone)]
pub struct PopulationRun {
    pub agents: usize,
    pub seed: u64,
    pub replication: u64,
    pub leaves: Vec<usize>,
    /// Agent-major: agent `i`, level `k` at `(i·(depth+1) + k)·n`.
    pub states: Vec<f64>,
    pub aggregate_x: Vec<Vec<f64>>,
    /// Control followed by agent 0 instead of the decentralized one.
    pub deviant: Option<Profile>,
    n: usize,
    depth: usize,
}

impl PopulationRun {
    pub fn state(&self, agent: usize, level: usize) -> &[f64] {
        let at = (agent * (self.depth + 1) + level) * self.n;
        &self.states[at..at + self.n]
    }

    /// State average recomputed from the per-agent paths in agent order.
    pub fn recompute_aggregate(&self, level: usize) -> Vec<f64> {
        let mut acc = vec![0.0; self.n];
        for i in 0..self.agents {
            for (a, v) in acc.iter_mut().zip(self.state(i, level)) {
                *a += v;
            }
        }
        let inv = 1.0 / self.agents as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        acc
    }
}

/// Backward components of a run.
#[derive(Debug, Clone)]
pub struct BackwardPaths {
    pub aggregate_y: Vec<Vec<f64>>,
    /// Same layout as [`PopulationRun::states`].
    pub individual_y: Vec<f64>,
    n: usize,
    depth: usize,
}

impl BackwardPaths {
    pub fn individual(&self, agent: usize, level: usize) -> &[f64] {
        let at = (agent * (self.depth + 1) + level) * self.n;
        &self.individual_y[at..at + self.n]
    }
}

/// Conditional view of the aggregate from one level onwards.
struct AggregateView {
    /// `E[x̆^(N)_l | F_k]` for `l = k..=depth`.
    x: Vec<f64>,
    /// `E[δ_l | F_k]`.
    delta: Vec<f64>,
    /// `E[y̆^(N)_l | F_k]`.
    y: Vec<f64>,
}

/// Everything needed to simulate populations around one consistency
/// solution.
#[derive(Debug, Clone)]
pub struct Population {
    model: ValidatedModel,
    tree: ScenarioTree,
    slices: Vec<CoefficientSlice>,
    mean_x: Vec<Vec<f64>>,
    mean_y: Vec<Vec<f64>>,
    reference: Profile,
    reference_y: TreeProcess,
    inv_u: Vec<Mat>,
    inv_uv: Vec<Mat>,
}

/// Leaf drawn by `agent` in `replication`. Depends only on the three
/// arguments, so results do not depend on evaluation order.
pub fn agent_leaf(tree: &ScenarioTree, master_seed: u64, replication: u64, agent: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(replication);
    rng.set_word_pos(2 * agent as u128);
    (rng.next_u64() as usize) & (tree.leaf_count() - 1)
}

impl Population {
    pub fn new(
        model: &ValidatedModel,
        tree: &ScenarioTree,
        cc: &CCSolution,
    ) -> Result<Self, PopulationError> {
        let converged = cc.diagnostics.final_residual.is_finite()
            && cc.diagnostics.stages.last().is_none_or(|s| s.converged);
        if !converged {
            return Err(PopulationError::NotConverged);
        }
        let spec = model.spec();
        let n = spec.state_dim;
        if cc.x.depth() != tree.depth() || cc.x.dim() != n || cc.u.dim() != spec.control_dim {
            return Err(PopulationError::Shape("consistency solution".into()));
        }
        let slices = spec.slices_on_grid(tree.depth()).map_err(SolveError::from)?;
        let dt = tree.dt();
        let invert = |m: Mat| {
            m.try_inverse()
                .ok_or_else(|| PopulationError::Unsupported("implicit step matrix is singular".into()))
        };
        let mut inv_u = Vec::with_capacity(slices.len());
        let mut inv_uv = Vec::with_capacity(slices.len());
        for c in &slices {
            let id = Mat::identity(n, n);
            inv_u.push(invert(&id - &c.u_coef * dt)?);
            inv_uv.push(invert(&id - (&c.u_coef + &c.v) * dt)?);
        }
        Ok(Population {
            model: model.clone(),
            tree: *tree,
            slices,
            mean_x: cc.mean_x.clone(),
            mean_y: cc.mean_y.clone(),
            reference: Profile::new(tree, cc.x.clone(), cc.u.clone()),
            reference_y: cc.y.clone(),
            inv_u,
            inv_uv,
        })
    }

    pub fn tree(&self) -> &ScenarioTree {
        &self.tree
    }

    pub fn reference(&self) -> &Profile {
        &self.reference
    }

    pub fn mean_x(&self) -> &[Vec<f64>] {
        &self.mean_x
    }

    pub fn mean_y(&self) -> &[Vec<f64>] {
        &self.mean_y
    }

    /// Backward state of the generic agent, read along agents' paths.
    pub fn reference_y(&self) -> &TreeProcess {
        &self.reference_y
    }

    fn n(&self) -> usize {
        self.model.spec().state_dim
    }

    fn m(&self) -> usize {
        self.model.spec().control_dim
    }

    /// Wraps an admissible tree control as a profile. Its frozen-mean state
    /// uses the same forward step as the solver.
    pub fn profile(&self, control: &TreeProcess) -> Result<Profile, PopulationError> {
        let tree = &self.tree;
        if control.depth() != tree.depth() || control.dim() != self.m() {
            return Err(PopulationError::Shape("control".into()));
        }
        let set = &self.model.spec().control_set;
        for level in 0..=tree.depth() {
            for path in 0..tree.level_size(level) {
                if !set.contains(control.get(level, path), 1e-12) {
                    return Err(PopulationError::Inadmissible { level, path });
                }
            }
        }
        let n = self.n();
        let mut x = TreeProcess::zeros(tree, n);
        x.get_mut(0, 0).copy_from_slice(&self.model.spec().x0);
        let mut buf = vec![0.0; n];
        let s = tree.sqrt_dt();
        for level in 0..tree.depth() {
            let c = &self.slices[level];
            for j in 0..tree.level_size(level) {
                for (child, dw) in [(2 * j, s), (2 * j + 1, -s)] {
                    let xj = x.get(level, j).to_vec();
                    let u = control.get(level, j);
                    forward_step(c, 1.0, tree.dt(), dw, &xj, u, &self.mean_x[level], &mut buf);
                    x.get_mut(level + 1, child).copy_from_slice(&buf);
                }
            }
        }
        Ok(Profile::new(tree, x, control.clone()))
    }

    fn profile_of<'a>(&'a self, run: &'a PopulationRun, agent: usize) -> &'a Profile {
        match (&run.deviant, agent) {
            (Some(p), 0) => p,
            _ => &self.reference,
        }
    }

    /// `agents` agents on independently drawn leaves; needs at least two.
    pub fn simulate(
        &self,
        agents: usize,
        seed: u64,
        replication: u64,
    ) -> Result<PopulationRun, PopulationError> {
        if agents < 2 {
            return Err(PopulationError::Agents { min: 2, got: agents });
        }
        let leaves: Vec<usize> =
            (0..agents).map(|i| agent_leaf(&self.tree, seed, replication, i)).collect();
        let mut run = self.simulate_from_leaves(&leaves, None)?;
        run.seed = seed;
        run.replication = replication;
        Ok(run)
    }

    /// Runs the population on given leaves, agent 0 optionally following
    /// `deviant`. Accepts a single agent.
    pub fn simulate_from_leaves(
        &self,
        leaves: &[usize],
        deviant: Option<&Profile>,
    ) -> Result<PopulationRun, PopulationError> {
        let tree = &self.tree;
        if leaves.is_empty() {
            return Err(PopulationError::Agents { min: 1, got: 0 });
        }
        if let Some(&leaf) = leaves.iter().find(|&&l| l >= tree.leaf_count()) {
            return Err(PopulationError::Leaf { leaf, leaves: tree.leaf_count() });
        }
        let (n, depth, agents) = (self.n(), tree.depth(), leaves.len());
        let mut run = PopulationRun {
            agents,
            seed: 0,
            replication: 0,
            leaves: leaves.to_vec(),
            states: vec![0.0; agents * (depth + 1) * n],
            aggregate_x: Vec::with_capacity(depth + 1),
            deviant: deviant.cloned(),
            n,
            depth,
        };
        let x0 = &self.model.spec().x0;
        for i in 0..agents {
            let at = i * (depth + 1) * n;
            run.states[at..at + n].copy_from_slice(x0);
        }
        let mut buf = vec![0.0; n];
        for level in 0..depth {
            let agg = run.recompute_aggregate(level);
            let c = &self.slices[level];
            for (i, &leaf) in leaves.iter().enumerate() {
                let node = tree.ancestor(leaf, level);
                let u = self.profile_of(&run, i).u.get(level, node);
                let dw = tree.increment(tree.ancestor(leaf, level + 1));
                forward_step(c, 1.0, tree.dt(), dw, run.state(i, level), u, &agg, &mut buf);
                let at = (i * (depth + 1) + level + 1) * n;
                run.states[at..at + n].copy_from_slice(&buf);
            }
            run.aggregate_x.push(agg);
        }
        run.aggregate_x.push(run.recompute_aggregate(depth));
        Ok(run)
    }

    fn check_backward_dims(&self) -> Result<(), PopulationError> {
        if self.n() > MAX_BACKWARD_DIM || self.m() > MAX_BACKWARD_DIM {
            return Err(PopulationError::Unsupported(format!(
                "backward evaluation supports state and control dimension up to {MAX_BACKWARD_DIM}"
            )));
        }
        Ok(())
    }

    /// Conditional view of the aggregate at `level`. `sum_x` and `sum_u`
    /// hold the summed per-agent conditional expectations of `ξ` and `u`;
    /// `delta` is the realized correction.
    fn aggregate_view(
        &self,
        level: usize,
        sum_x: &[f64],
        sum_u: &[f64],
        agents: usize,
        delta: &[f64],
    ) -> AggregateView {
        let (n, m, depth, dt) = (self.n(), self.m(), self.tree.depth(), self.tree.dt());
        let inv = 1.0 / agents as f64;
        let len = depth - level + 1;
        let mut x = vec![0.0; len * n];
        let mut ed = vec![0.0; len * n];
        ed[..n].copy_from_slice(delta);
        for j in 0..len {
            let l = level + j;
            for i in 0..n {
                x[j * n + i] = sum_x[j * n + i] * inv + ed[j * n + i];
            }
            if l < depth {
                let c = &self.slices[l];
                let gap: Vec<f64> = (0..n).map(|i| x[j * n + i] - self.mean_x[l][i]).collect();
                let (cur, next) = ed.split_at_mut((j + 1) * n);
                let cur = &cur[j * n..];
                next[..n].copy_from_slice(cur);
                linalg::mv_add(&mut next[..n], &c.a, cur, dt);
                linalg::mv_add(&mut next[..n], &c.f, &gap, dt);
            }
        }
        let mut y = vec![0.0; len * n];
        linalg::mv(&mut y[(len - 1) * n..], &self.model.spec().phi, &x[(len - 1) * n..]);
        let mut rhs = vec![0.0; n];
        let mut ubar = vec![0.0; m];
        for j in (0..len - 1).rev() {
            let l = level + j;
            let c = &self.slices[l];
            rhs.copy_from_slice(&y[(j + 1) * n..(j + 2) * n]);
            let xj = &x[j * n..(j + 1) * n];
            linalg::mv_add(&mut rhs, &c.m, xj, dt);
            linalg::mv_add(&mut rhs, &c.h, xj, dt);
            for (i, u) in ubar.iter_mut().enumerate() {
                *u = sum_u[j * m + i] * inv;
            }
            linalg::mv_add(&mut rhs, &c.k, &ubar, dt);
            for i in 0..n {
                rhs[i] += dt * c.y_drift[i];
            }
            linalg::mv(&mut y[j * n..(j + 1) * n], &self.inv_uv[l], &rhs);
        }
        AggregateView { x, delta: ed, y }
    }

    /// `y̆ⁱ` at `level` from the agent's conditional expectations.
    fn individual_y(&self, level: usize, view: &AggregateView, cx: &[f64], cu: &[f64]) -> Vec<f64> {
        let (n, m, depth, dt) = (self.n(), self.m(), self.tree.depth(), self.tree.dt());
        let len = depth - level + 1;
        let own = |j: usize| -> Vec<f64> {
            (0..n).map(|i| cx[j * n + i] + view.delta[j * n + i]).collect()
        };
        let mut yi = vec![0.0; n];
        linalg::mv(&mut yi, &self.model.spec().phi, &own(len - 1));
        let mut rhs = vec![0.0; n];
        for j in (0..len - 1).rev() {
            let l = level + j;
            let c = &self.slices[l];
            rhs.copy_from_slice(&yi);
            linalg::mv_add(&mut rhs, &c.m, &own(j), dt);
            linalg::mv_add(&mut rhs, &c.h, &view.x[j * n..(j + 1) * n], dt);
            linalg::mv_add(&mut rhs, &c.v, &view.y[j * n..(j + 1) * n], dt);
            linalg::mv_add(&mut rhs, &c.k, &cu[j * m..(j + 1) * m], dt);
            for i in 0..n {
                rhs[i] += dt * c.y_drift[i];
            }
            linalg::mv(&mut yi, &self.inv_u[l], &rhs);
        }
        yi
    }

    /// Summed conditional expectations of all agents at `level`, and the
    /// realized correction `δ`.
    fn level_sums(&self, run: &PopulationRun, level: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (n, m) = (self.n(), self.m());
        let len = self.tree.depth() - level + 1;
        let mut sx = vec![0.0; len * n];
        let mut su = vec![0.0; len * m];
        for (i, &leaf) in run.leaves.iter().enumerate() {
            let prof = self.profile_of(run, i);
            let node = self.tree.ancestor(leaf, level);
            sx.iter_mut().zip(prof.cx.span(level, node)).for_each(|(a, v)| *a += v);
            su.iter_mut().zip(prof.cu.span(level, node)).for_each(|(a, v)| *a += v);
        }
        let inv = 1.0 / run.agents as f64;
        let delta = (0..n).map(|i| run.aggregate_x[level][i] - sx[i] * inv).collect();
        (sx, su, delta)
    }

    /// `y̆^(N)` along the run.
    pub fn evaluate_backward_aggregate(
        &self,
        run: &PopulationRun,
    ) -> Result<Vec<Vec<f64>>, PopulationError> {
        self.check_backward_dims()?;
        let n = self.n();
        Ok((0..=self.tree.depth())
            .map(|level| {
                let (sx, su, delta) = self.level_sums(run, level);
                self.aggregate_view(level, &sx, &su, run.agents, &delta).y[..n].to_vec()
            })
            .collect())
    }

    /// `y̆ⁱ` along the run for one agent.
    pub fn evaluate_backward_individual(
        &self,
        run: &PopulationRun,
        agent: usize,
    ) -> Result<Vec<Vec<f64>>, PopulationError> {
        self.check_backward_dims()?;
        if agent >= run.agents {
            return Err(PopulationError::Agents { min: agent + 1, got: run.agents });
        }
        let prof = self.profile_of(run, agent);
        Ok((0..=self.tree.depth())
            .map(|level| {
                let (sx, su, delta) = self.level_sums(run, level);
                let view = self.aggregate_view(level, &sx, &su, run.agents, &delta);
                let node = self.tree.ancestor(run.leaves[agent], level);
                self.individual_y(level, &view, prof.cx.span(level, node), prof.cu.span(level, node))
            })
            .collect())
    }

    /// Aggregate and every individual backward state in one pass.
    pub fn evaluate_backward(&self, run: &PopulationRun) -> Result<BackwardPaths, PopulationError> {
        self.check_backward_dims()?;
        let (n, depth) = (self.n(), self.tree.depth());
        let mut out = BackwardPaths {
            aggregate_y: Vec::with_capacity(depth + 1),
            individual_y: vec![0.0; run.agents * (depth + 1) * n],
            n,
            depth,
        };
        for level in 0..=depth {
            let (sx, su, delta) = self.level_sums(run, level);
            let view = self.aggregate_view(level, &sx, &su, run.agents, &delta);
            for (i, &leaf) in run.leaves.iter().enumerate() {
                let prof = self.profile_of(run, i);
                let node = self.tree.ancestor(leaf, level);
                let yi = self.individual_y(level, &view, prof.cx.span(level, node), prof.cu.span(level, node));
                let at = (i * (depth + 1) + level) * n;
                out.individual_y[at..at + n].copy_from_slice(&yi);
            }
            out.aggregate_y.push(view.y[..n].to_vec());
        }
        Ok(out)
    }

    /// Realized cost of one agent, left-endpoint quadrature in time.
    pub fn realized_cost(
        &self,
        run: &PopulationRun,
        back: &BackwardPaths,
        agent: usize,
    ) -> CostBreakdown {
        let prof = self.profile_of(run, agent);
        let leaf = run.leaves[agent];
        let own = |level: usize| Observed {
            x: run.state(agent, level),
            agg_x: &run.aggregate_x[level],
            y: back.individual(agent, level),
            agg_y: &back.aggregate_y[level],
            u: prof.u.get(level, self.tree.ancestor(leaf, level)),
        };
        self.cost_along(own)
    }

    fn cost_along<'a>(&self, at: impl Fn(usize) -> Observed<'a>) -> CostBreakdown {
        let (depth, dt) = (self.tree.depth(), self.tree.dt());
        let mut c = CostBreakdown::default();
        let diff = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x - y).collect() };
        for level in 0..depth {
            let o = at(level);
            let s = &self.slices[level];
            c.tracking_x += 0.5 * dt * linalg::quad_form(&s.q, &diff(o.x, o.agg_x));
            c.tracking_y += 0.5 * dt * linalg::quad_form(&s.l, &diff(o.y, o.agg_y));
            c.control_effort += 0.5 * dt * linalg::quad_form(&s.r, o.u);
        }
        let o = at(depth);
        c.terminal = 0.5 * linalg::quad_form(&self.model.spec().g, &diff(o.x, o.agg_x));
        c.total = c.tracking_x + c.tracking_y + c.control_effort + c.terminal;
        c
    }

    /// Expected cost of agent 0 for each candidate profile, with agents
    /// `1..` on the given leaves following the decentralized strategy.
    /// Agent 0's own noise is averaged exactly over all leaves.
    pub fn deviation_costs(
        &self,
        others: &[usize],
        candidates: &[&Profile],
    ) -> Result<Vec<f64>, PopulationError> {
        self.check_backward_dims()?;
        let tree = &self.tree;
        if let Some(&leaf) = others.iter().find(|&&l| l >= tree.leaf_count()) {
            return Err(PopulationError::Leaf { leaf, leaves: tree.leaf_count() });
        }
        let (n, m, depth, dt) = (self.n(), self.m(), tree.depth(), tree.dt());
        let agents = others.len() + 1;
        let inv = 1.0 / agents as f64;
        let sums: Vec<(Vec<f64>, Vec<f64>)> = (0..=depth)
            .map(|level| {
                let len = depth - level + 1;
                let mut sx = vec![0.0; len * n];
                let mut su = vec![0.0; len * m];
                for &leaf in others {
                    let node = tree.ancestor(leaf, level);
                    sx.iter_mut().zip(self.reference.cx.span(level, node)).for_each(|(a, v)| *a += v);
                    su.iter_mut().zip(self.reference.cu.span(level, node)).for_each(|(a, v)| *a += v);
                }
                (sx, su)
            })
            .collect();

        let mut out = Vec::with_capacity(candidates.len());
        for prof in candidates {
            let mut total = 0.0;
            for leaf in 0..tree.leaf_count() {
                let mut delta = vec![vec![0.0; n]; depth + 1];
                let mut agg_x = vec![vec![0.0; n]; depth + 1];
                for level in 0..=depth {
                    let node = tree.ancestor(leaf, level);
                    let own = prof.x.get(level, node);
                    for i in 0..n {
                        agg_x[level][i] = (sums[level].0[i] + own[i]) * inv + delta[level][i];
                    }
                    if level < depth {
                        let c = &self.slices[level];
                        let gap: Vec<f64> = (0..n).map(|i| agg_x[level][i] - self.mean_x[level][i]).collect();
                        let mut next = delta[level].clone();
                        linalg::mv_add(&mut next, &c.a, &delta[level], dt);
                        linalg::mv_add(&mut next, &c.f, &gap, dt);
                        delta[level + 1] = next;
                    }
                }
                let mut x = vec![vec![0.0; n]; depth + 1];
                let mut y = vec![vec![0.0; n]; depth + 1];
                let mut agg_y = vec![vec![0.0; n]; depth + 1];
                for level in 0..=depth {
                    let node = tree.ancestor(leaf, level);
                    let (cx, cu) = (prof.cx.span(level, node), prof.cu.span(level, node));
                    let sx: Vec<f64> = sums[level].0.iter().zip(cx).map(|(a, b)| a + b).collect();
                    let su: Vec<f64> = sums[level].1.iter().zip(cu).map(|(a, b)| a + b).collect();
                    let view = self.aggregate_view(level, &sx, &su, agents, &delta[level]);
                    y[level] = self.individual_y(level, &view, cx, cu);
                    agg_y[level] = view.y[..n].to_vec();
                    x[level] = prof.x.get(level, node).iter().zip(&delta[level]).map(|(a, b)| a + b).collect();
                }
                let cost = self.cost_along(|level| Observed {
                    x: &x[level],
                    agg_x: &agg_x[level],
                    y: &y[level],
                    agg_y: &agg_y[level],
                    u: prof.u.get(level, tree.ancestor(leaf, level)),
                });
                total += cost.total;
            }
            out.push(total / tree.leaf_count() as f64);
        }
        Ok(out)
    }
}

struct Observed<'a> {
    x: &'a [f64],
    agg_x: &'a [f64],
    y: &'a [f64],
    agg_y: &'a [f64],
    u: &'a [f64],
}

/// Convenience wrapper: one replication of `agents` agents.
pub fn simulate_population(
    model: &ValidatedModel,
    tree: &ScenarioTree,
    cc: &CCSolution,
    agents: usize,
    seed: u64,
) -> Result<PopulationRun, PopulationError> {
    Population::new(model, tree, cc)?.simulate(agents, seed, 0)
}
