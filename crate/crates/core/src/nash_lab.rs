//! Measurements on finite populations: mean-square gaps to the consistency
//! solution over a grid of population sizes, log-log rate fits, and the
//! empirical best-response gain of one deviating agent.
//!
//! The best-response gain is measured against a fixed family of candidate
//! deviations, so it is a lower bound on the true gain, never the gain
//! itself.

use crate::cc_solver::{limiting_cost, solve_auxiliary, CCSolution, SolveOptions};
use crate::linalg;
use crate::model::ValidatedModel;
use crate::noise_tree::{ScenarioTree, TreeProcess};
use crate::population::{agent_leaf, Population, PopulationError, Profile};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error(transparent)]
    Population(#[from] PopulationError),
    #[error("the population-size grid is empty")]
    EmptyGrid,
    #[error("replications must be positive")]
    NoReplications,
    #[error("population sizes must be at least 2, got {0}")]
    SmallPopulation(usize),
    #[error("the candidate family is empty")]
    EmptyFamily,
    #[error("rate fit needs at least 3 positive rows, got {0}")]
    TooFewRows(usize),
}

/// Least-squares line through `(log N, log value)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub used: usize,
    /// Population sizes whose value was zero or negative and left out.
    pub excluded: Vec<f64>,
}

/// Fits `log value = intercept + slope · log N`. Nonpositive values are
/// excluded and listed rather than floored.
pub fn rate_fit(rows: &[(f64, f64)]) -> Result<RateFit, LabError> {
    let (kept, dropped): (Vec<_>, Vec<_>) = rows.iter().partition(|(n, v)| *v > 0.0 && *n > 0.0);
    if kept.len() < 3 {
        return Err(LabError::TooFewRows(kept.len()));
    }
    let pts: Vec<(f64, f64)> = kept.iter().map(|(n, v)| (n.ln(), v.ln())).collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    // A perfectly flat series is fitted exactly.
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        used: kept.len(),
        excluded: dropped.iter().map(|(n, _)| *n).collect(),
    })
}

/// Mean and its standard error.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn of(samples: &[f64]) -> Self {
        let k = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / k;
        if samples.len() < 2 {
            return Estimate { mean, se: 0.0 };
        }
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (k - 1.0);
        Estimate { mean, se: (var / k).sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapRow {
    pub agents: usize,
    pub replications: usize,
    /// `E sup_k |x̆^(N) − m_x|²`.
    pub gap_x_avg: Estimate,
    /// `E sup_k |y̆^(N) − m_y|²`.
    pub gap_y_avg: Estimate,
    /// `max_i E sup_k |x̆ⁱ − xⁱ|²` against the generic agent on the same path.
    pub gap_x_indiv: f64,
    pub gap_y_indiv: f64,
    /// `E |avg_i 𝒥_i − J|`, one realized population average per replication.
    pub cost_gap: Estimate,
    /// `E[avg_i 𝒥_i] − J`.
    pub cost_bias: Estimate,
    /// `E |y̆ⁱ_0 − y̆^(N)_0|²` averaged over agents; the cost ignores it.
    pub y0_discrepancy: f64,
    /// `max_k E|x̆^(N)_k|²` and `max_k E|y̆^(N)_k|²`.
    pub second_moment_x: f64,
    pub second_moment_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapTable {
    pub limiting_cost: f64,
    pub rows: Vec<GapRow>,
}

impl GapTable {
    pub fn fit(&self, value: impl Fn(&GapRow) -> f64) -> Result<RateFit, LabError> {
        rate_fit(&self.rows.iter().map(|r| (r.agents as f64, value(r))).collect::<Vec<_>>())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "agents,replications,gap_x_avg,gap_x_avg_se,gap_y_avg,gap_y_avg_se,gap_x_indiv,gap_y_indiv,\
             cost_gap,cost_gap_se,cost_bias,cost_bias_se,y0_discrepancy,second_moment_x,second_moment_y\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.agents,
                r.replications,
                r.gap_x_avg.mean,
                r.gap_x_avg.se,
                r.gap_y_avg.mean,
                r.gap_y_avg.se,
                r.gap_x_indiv,
                r.gap_y_indiv,
                r.cost_gap.mean,
                r.cost_gap.se,
                r.cost_bias.mean,
                r.cost_bias.se,
                r.y0_discrepancy,
                r.second_moment_x,
                r.second_moment_y
            ));
        }
        out
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct ReplicationGaps {
    x_avg: f64,
    y_avg: f64,
    x_indiv: Vec<f64>,
    y_indiv: Vec<f64>,
    mean_cost: f64,
    y0: f64,
    agg_x_sq: Vec<f64>,
    agg_y_sq: Vec<f64>,
}

fn check_grid(grid: &[usize], replications: usize) -> Result<(), LabError> {
    if grid.is_empty() {
        return Err(LabError::EmptyGrid);
    }
    if replications == 0 {
        return Err(LabError::NoReplications);
    }
    if let Some(&n) = grid.iter().find(|&&n| n < 2) {
        return Err(LabError::SmallPopulation(n));
    }
    Ok(())
}

/// Gap statistics for each population size in `grid`. Replication `r`
/// uses leaf stream `r` of `seed` for every size.
pub fn gap_statistics(
    model: &ValidatedModel,
    tree: &ScenarioTree,
    cc: &CCSolution,
    grid: &[usize],
    replications: usize,
    seed: u64,
) -> Result<GapTable, LabError> {
    check_grid(grid, replications)?;
    let pop = Population::new(model, tree, cc)?;
    let j = limiting_cost(model, tree, &cc.x, &cc.y, &cc.u, &cc.mean_x, &cc.mean_y)
        .map_err(PopulationError::from)?;
    let mut sizes = grid.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    let depth = tree.depth();
    let mut rows = Vec::with_capacity(sizes.len());
    for &agents in &sizes {
        let reps: Vec<ReplicationGaps> = (0..replications as u64)
            .into_par_iter()
            .map(|rep| -> Result<ReplicationGaps, PopulationError> {
                let run = pop.simulate(agents, seed, rep)?;
                let back = pop.evaluate_backward(&run)?;
                let mut g = ReplicationGaps {
                    x_avg: 0.0,
                    y_avg: 0.0,
                    x_indiv: vec![0.0; agents],
                    y_indiv: vec![0.0; agents],
                    mean_cost: 0.0,
                    y0: 0.0,
                    agg_x_sq: Vec::with_capacity(depth + 1),
                    agg_y_sq: Vec::with_capacity(depth + 1),
                };
                for level in 0..=depth {
                    g.x_avg = g.x_avg.max(sq_dist(&run.aggregate_x[level], &pop.mean_x()[level]));
                    g.y_avg = g.y_avg.max(sq_dist(&back.aggregate_y[level], &pop.mean_y()[level]));
                    g.agg_x_sq.push(linalg::norm_sq(&run.aggregate_x[level]));
                    g.agg_y_sq.push(linalg::norm_sq(&back.aggregate_y[level]));
                }
                for (i, &leaf) in run.leaves.iter().enumerate() {
                    for level in 0..=depth {
                        let node = tree.ancestor(leaf, level);
                        g.x_indiv[i] =
                            g.x_indiv[i].max(sq_dist(run.state(i, level), pop.reference().x.get(level, node)));
                        g.y_indiv[i] = g.y_indiv[i]
                            .max(sq_dist(back.individual(i, level), pop.reference_y().get(level, node)));
                    }
                    g.mean_cost += pop.realized_cost(&run, &back, i).total;
                    g.y0 += sq_dist(back.individual(i, 0), &back.aggregate_y[0]);
                }
                g.mean_cost /= agents as f64;
                g.y0 /= agents as f64;
                Ok(g)
            })
            .collect::<Result<_, _>>()?;

        let col = |f: &dyn Fn(&ReplicationGaps) -> f64| -> Vec<f64> { reps.iter().map(f).collect() };
        let per_agent_max = |f: &dyn Fn(&ReplicationGaps) -> &Vec<f64>| -> f64 {
            (0..agents)
                .map(|i| reps.iter().map(|g| f(g)[i]).sum::<f64>() / replications as f64)
                .fold(0.0, f64::max)
        };
        let level_max = |f: &dyn Fn(&ReplicationGaps) -> &Vec<f64>| -> f64 {
            (0..=depth)
                .map(|l| reps.iter().map(|g| f(g)[l]).sum::<f64>() / replications as f64)
                .fold(0.0, f64::max)
        };
        rows.push(GapRow {
            agents,
            replications,
            gap_x_avg: Estimate::of(&col(&|g| g.x_avg)),
            gap_y_avg: Estimate::of(&col(&|g| g.y_avg)),
            gap_x_indiv: per_agent_max(&|g| &g.x_indiv),
            gap_y_indiv: per_agent_max(&|g| &g.y_indiv),
            cost_gap: Estimate::of(&col(&|g| (g.mean_cost - j).abs())),
            cost_bias: Estimate::of(&col(&|g| g.mean_cost - j)),
            y0_discrepancy: col(&|g| g.y0).iter().sum::<f64>() / replications as f64,
            second_moment_x: level_max(&|g| &g.agg_x_sq),
            second_moment_y: level_max(&|g| &g.agg_y_sq),
        });
    }
    Ok(GapTable { limiting_cost: j, rows })
}

/// Which deviations agent 0 tries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateSpec {
    /// Respond optimally to the means observed in pilot populations of the
    /// same size.
    pub empirical_response: bool,
    pub pilot_replications: usize,
    /// `P_U[c·ū]` for each factor `c`.
    pub scales: Vec<f64>,
    /// `P_U[ū + s·1]` for each shift `s`.
    pub shifts: Vec<f64>,
    /// Number of `P_U[ū + a·ξ]` candidates with independent standard
    /// normal `ξ` at every node.
    pub random: usize,
    pub random_amplitude: f64,
}

impl Default for CandidateSpec {
    fn default() -> Self {
        CandidateSpec {
            empirical_response: true,
            pilot_replications: 8,
            scales: vec![0.8, 0.9, 0.95, 0.98, 0.99, 1.01, 1.02, 1.05, 1.1, 1.2],
            shifts: vec![-0.05, -0.02, 0.02, 0.05],
            random: 4,
            random_amplitude: 0.05,
        }
    }
}

impl CandidateSpec {
    pub fn size(&self) -> usize {
        usize::from(self.empirical_response) + self.scales.len() + self.shifts.len() + self.random
    }

    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        if self.empirical_response {
            parts.push(format!("response to empirical means ({} pilots)", self.pilot_replications));
        }
        if !self.scales.is_empty() {
            parts.push(format!("scaled by {:?}", self.scales));
        }
        if !self.shifts.is_empty() {
            parts.push(format!("shifted by {:?}", self.shifts));
        }
        if self.random > 0 {
            parts.push(format!("{} random perturbations of size {}", self.random, self.random_amplitude));
        }
        parts.join("; ")
    }
}

/// Candidate controls with labels, all projected into the control set.
pub fn build_candidates(
    model: &ValidatedModel,
    tree: &ScenarioTree,
    cc: &CCSolution,
    agents: usize,
    spec: &CandidateSpec,
    seed: u64,
) -> Result<Vec<(String, TreeProcess)>, LabError> {
    if spec.size() == 0 {
        return Err(LabError::EmptyFamily);
    }
    let set = &model.spec().control_set;
    let mapped = |f: &dyn Fn(usize, usize, usize, f64) -> f64| {
        let mut u = cc.u.clone();
        for level in 0..=tree.depth() {
            for path in 0..tree.level_size(level) {
                let v = u.get_mut(level, path);
                for (i, x) in v.iter_mut().enumerate() {
                    *x = f(level, path, i, *x);
                }
                set.euclidean_project_in_place(v);
            }
        }
        u
    };
    let mut out = Vec::with_capacity(spec.size());
    if spec.empirical_response {
        let pop = Population::new(model, tree, cc)?;
        let n = model.spec().state_dim;
        let pilots = spec.pilot_replications.max(1);
        let mut mx = vec![vec![0.0; n]; tree.depth() + 1];
        let mut my = mx.clone();
        for rep in 0..pilots as u64 {
            // Pilot streams are disjoint from the measurement streams.
            let run = pop.simulate(agents, seed ^ 0x9e37_79b9_7f4a_7c15, rep)?;
            let back = pop.evaluate_backward(&run)?;
            for level in 0..=tree.depth() {
                for i in 0..n {
                    mx[level][i] += run.aggregate_x[level][i] / pilots as f64;
                    my[level][i] += back.aggregate_y[level][i] / pilots as f64;
                }
            }
        }
        let opts = SolveOptions { allow_permissive: true, ..Default::default() };
        let aux = solve_auxiliary(model, tree, &mx, &my, &opts).map_err(PopulationError::from)?;
        let mut u = aux.u;
        for level in 0..=tree.depth() {
            for path in 0..tree.level_size(level) {
                set.euclidean_project_in_place(u.get_mut(level, path));
            }
        }
        out.push(("empirical response".to_string(), u));
    }
    for &c in &spec.scales {
        out.push((format!("scale {c}"), mapped(&|_, _, _, x| c * x)));
    }
    for &s in &spec.shifts {
        out.push((format!("shift {s}"), mapped(&|_, _, _, x| x + s)));
    }
    for r in 0..spec.random {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5851_f42d_4c95_7f2d));
        rng.set_stream(r as u64);
        let noise = TreeProcess::from_fn(tree, cc.u.dim(), |_, _| {
            (0..cc.u.dim()).map(|_| StandardNormal.sample(&mut rng)).collect()
        });
        let a = spec.random_amplitude;
        out.push((format!("random {r}"), mapped(&|l, p, i, x| x + a * noise.get(l, p)[i])));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NashRow {
    pub agents: usize,
    pub replications: usize,
    /// Agent 0's expected cost when everyone plays the decentralized control.
    pub decentralized_cost: Estimate,
    pub best_candidate: String,
    pub best_cost: Estimate,
    /// `max(0, cost(ū) − min_c cost(c))`.
    pub epsilon: f64,
    /// Standard error of the paired difference for the best candidate.
    pub epsilon_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NashReport {
    pub rows: Vec<NashRow>,
    pub candidates: String,
    /// Fit of `ε̂` over population sizes; absent when fewer than three are
    /// positive.
    pub rate: Option<RateFit>,
}

impl NashReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "agents,replications,decentralized_cost,decentralized_cost_se,best_candidate,best_cost,best_cost_se,epsilon,epsilon_se\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},\"{}\",{},{},{},{}\n",
                r.agents,
                r.replications,
                r.decentralized_cost.mean,
                r.decentralized_cost.se,
                r.best_candidate.replace('"', "\"\""),
                r.best_cost.mean,
                r.best_cost.se,
                r.epsilon,
                r.epsilon_se
            ));
        }
        out
    }
}

/// Measured best-response gain of agent 0 among `agents` agents. Every
/// candidate sees the same replications, and agent 0's own noise is
/// averaged exactly over the tree.
pub fn best_response_gain(
    model: &ValidatedModel,
    tree: &ScenarioTree,
    cc: &CCSolution,
    agents: usize,
    spec: &CandidateSpec,
    replications: usize,
    seed: u64,
) -> Result<NashRow, LabError> {
    check_grid(&[agents], replications)?;
    let pop = Population::new(model, tree, cc)?;
    let candidates = build_candidates(model, tree, cc, agents, spec, seed)?;
    let mut profiles: Vec<Profile> = vec![pop.profile(&cc.u)?];
    for (_, u) in &candidates {
        profiles.push(pop.profile(u)?);
    }
    let refs: Vec<&Profile> = profiles.iter().collect();
    let per_rep: Vec<Vec<f64>> = (0..replications as u64)
        .into_par_iter()
        .map(|rep| {
            let others: Vec<usize> = (1..agents).map(|i| agent_leaf(tree, seed, rep, i)).collect();
            pop.deviation_costs(&others, &refs)
        })
        .collect::<Result<_, _>>()?;

    let base: Vec<f64> = per_rep.iter().map(|c| c[0]).collect();
    let mut best = 0;
    let mut best_gain = f64::NEG_INFINITY;
    for c in 1..profiles.len() {
        let gain = per_rep.iter().map(|r| r[0] - r[c]).sum::<f64>() / replications as f64;
        if gain > best_gain {
            best_gain = gain;
            best = c;
        }
    }
    let diffs: Vec<f64> = per_rep.iter().map(|r| r[0] - r[best]).collect();
    let cand: Vec<f64> = per_rep.iter().map(|r| r[best]).collect();
    Ok(NashRow {
        agents,
        replications,
        decentralized_cost: Estimate::of(&base),
        best_candidate: candidates[best - 1].0.clone(),
        best_cost: Estimate::of(&cand),
        epsilon: best_gain.max(0.0),
        epsilon_se: Estimate::of(&diffs).se,
    })
}

/// [`best_response_gain`] over a grid of population sizes.
pub fn nash_report(
    model: &ValidatedModel,
    tree: &ScenarioTree,
    cc: &CCSolution,
    grid: &[usize],
    spec: &CandidateSpec,
    replications: usize,
    seed: u64,
) -> Result<NashReport, LabError> {
    check_grid(grid, replications)?;
    let mut sizes = grid.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    let rows = sizes
        .iter()
        .map(|&n| best_response_gain(model, tree, cc, n, spec, replications, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let rate = rate_fit(&rows.iter().map(|r| (r.agents as f64, r.epsilon)).collect::<Vec<_>>()).ok();
    Ok(NashReport { rows, candidates: spec.describe(), rate })
}
