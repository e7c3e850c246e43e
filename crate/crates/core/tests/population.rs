use mfgcc::cc_solver::{solve_cc, CCSolution, SolveOptions};
use mfgcc::convexset::ConvexSet;
use mfgcc::fixtures;
use mfgcc::linalg::sup_diff;
use mfgcc::model::{ModelSpec, ScalarCoefficients, ValidatedModel, ValidationMode};
use mfgcc::noise_tree::{ScenarioTree, TreeProcess};
use mfgcc::population::Population;
use nalgebra::{DMatrix, DVector};
use std::collections::HashMap;

fn setup(spec: &ModelSpec, depth: usize) -> (ValidatedModel, ScenarioTree, CCSolution) {
    let model = ValidatedModel::new(spec, ValidationMode::Permissive).unwrap();
    let tree = ScenarioTree::build(depth, spec.horizon).unwrap();
    let opts = SolveOptions { allow_permissive: true, ..Default::default() };
    let cc = solve_cc(&model, &tree, &opts).unwrap();
    (model, tree, cc)
}

/// Backward induction over the joint tree of all agents, scalar models
/// only. Each joint node solves the agents' coupled one-step equations
/// as one linear system.
struct JointOracle<'a> {
    spec: &'a ModelSpec,
    tree: ScenarioTree,
    cc: &'a CCSolution,
    agents: usize,
    values: HashMap<(usize, Vec<usize>), Vec<f64>>,
}

impl JointOracle<'_> {
    fn coef(&self, f: &mfgcc::model::MatFn) -> f64 {
        f.at(0.0)[(0, 0)]
    }

    fn solve(&mut self, level: usize, paths: Vec<usize>, x: Vec<f64>) -> Vec<f64> {
        let s = self.spec;
        let (dt, depth, n) = (self.tree.dt(), self.tree.depth(), self.agents);
        let xbar = x.iter().sum::<f64>() / n as f64;
        let y: Vec<f64> = if level == depth {
            x.iter().map(|v| s.phi[(0, 0)] * v).collect()
        } else {
            let u: Vec<f64> = paths.iter().map(|&p| self.cc.u.get(level, p)[0]).collect();
            let mut expected = vec![0.0; n];
            for combo in 0..(1usize << n) {
                let mut child_paths = Vec::with_capacity(n);
                let mut child_x = Vec::with_capacity(n);
                for i in 0..n {
                    let branch = (combo >> i) & 1;
                    let dw = if branch == 0 { self.tree.sqrt_dt() } else { -self.tree.sqrt_dt() };
                    child_paths.push(2 * paths[i] + branch);
                    let drift = self.coef(&s.a) * x[i]
                        + self.coef(&s.b) * u[i]
                        + self.coef(&s.f) * xbar
                        + s.x_drift.at(0.0)[0];
                    let vol = self.coef(&s.d) * u[i] + s.sigma.at(0.0)[0];
                    child_x.push(x[i] + dt * drift + dw * vol);
                }
                let yc = self.solve(level + 1, child_paths, child_x);
                for i in 0..n {
                    expected[i] += yc[i] / (1usize << n) as f64;
                }
            }
            // y_i - dt(U y_i + V mean(y)) = E y_i' + dt(M x_i + H xbar + K u_i + f)
            let (uc, vc) = (self.coef(&s.u_coef), self.coef(&s.v));
            let mut a = DMatrix::<f64>::zeros(n, n);
            let mut rhs = DVector::<f64>::zeros(n);
            for i in 0..n {
                a[(i, i)] += 1.0 - dt * uc;
                for j in 0..n {
                    a[(i, j)] -= dt * vc / n as f64;
                }
                rhs[i] = expected[i]
                    + dt * (self.coef(&s.m) * x[i]
                        + self.coef(&s.h) * xbar
                        + self.coef(&s.k) * u[i]
                        + s.y_drift.at(0.0)[0]);
            }
            a.lu().solve(&rhs).unwrap().iter().copied().collect()
        };
        self.values.insert((level, paths), y.clone());
        y
    }
}

fn check_joint_oracle(agents: usize, depth: usize) {
    let spec = fixtures::coupled();
    let (model, tree, cc) = setup(&spec, depth);
    let pop = Population::new(&model, &tree, &cc).unwrap();
    let mut oracle =
        JointOracle { spec: model.spec(), tree, cc: &cc, agents, values: HashMap::new() };
    oracle.solve(0, vec![0; agents], vec![spec.x0[0]; agents]);
    let mut worst: f64 = 0.0;
    for code in 0..tree.leaf_count().pow(agents as u32) {
        let leaves: Vec<usize> =
            (0..agents).map(|i| (code / tree.leaf_count().pow(i as u32)) % tree.leaf_count()).collect();
        let run = pop.simulate_from_leaves(&leaves, None).unwrap();
        let back = pop.evaluate_backward(&run).unwrap();
        for level in 0..=depth {
            let key: Vec<usize> = leaves.iter().map(|&l| tree.ancestor(l, level)).collect();
            let expect = &oracle.values[&(level, key)];
            let mean = expect.iter().sum::<f64>() / agents as f64;
            worst = worst.max((back.aggregate_y[level][0] - mean).abs());
            for i in 0..agents {
                worst = worst.max((back.individual(i, level)[0] - expect[i]).abs());
            }
        }
    }
    assert!(worst < 1e-12, "joint-tree mismatch {worst:e}");
}

#[test]
fn backward_states_match_joint_tree_two_agents() {
    check_joint_oracle(2, 4);
}

#[test]
fn backward_states_match_joint_tree_three_agents() {
    check_joint_oracle(3, 3);
}

#[test]
fn deviation_costs_match_direct_simulation() {
    let (model, tree, cc) = setup(&fixtures::coupled(), 5);
    let pop = Population::new(&model, &tree, &cc).unwrap();
    let shifted = TreeProcess::from_fn(&tree, 1, |l, p| vec![(cc.u.get(l, p)[0] + 0.1).clamp(-0.4, 0.6)]);
    let candidate = pop.profile(&shifted).unwrap();
    let others = [3, 17, 17, 30, 8];
    let costs = pop.deviation_costs(&others, &[pop.reference(), &candidate]).unwrap();
    for (profile, fast) in [(None, costs[0]), (Some(&candidate), costs[1])] {
        let mut total = 0.0;
        for leaf in 0..tree.leaf_count() {
            let mut leaves = vec![leaf];
            leaves.extend_from_slice(&others);
            let run = pop.simulate_from_leaves(&leaves, profile).unwrap();
            let back = pop.evaluate_backward(&run).unwrap();
            total += pop.realized_cost(&run, &back, 0).total;
        }
        let direct = total / tree.leaf_count() as f64;
        assert!((direct - fast).abs() < 1e-12, "{direct} vs {fast}");
    }
}

#[test]
fn aggregate_is_the_exact_average_of_agent_states() {
    let (model, tree, cc) = setup(&fixtures::coupled(), 6);
    let pop = Population::new(&model, &tree, &cc).unwrap();
    let run = pop.simulate(37, 11, 2).unwrap();
    for level in 0..=tree.depth() {
        assert_eq!(run.recompute_aggregate(level), run.aggregate_x[level]);
    }
}

#[test]
fn runs_are_deterministic_in_the_seed() {
    let (model, tree, cc) = setup(&fixtures::coupled(), 6);
    let pop = Population::new(&model, &tree, &cc).unwrap();
    let a = pop.simulate(20, 5, 1).unwrap();
    let b = pop.simulate(20, 5, 1).unwrap();
    assert_eq!(a.states, b.states);
    assert_eq!(a.leaves, b.leaves);
    assert_ne!(a.leaves, pop.simulate(20, 6, 1).unwrap().leaves);
}

#[test]
fn permuting_agents_permutes_outputs() {
    let (model, tree, cc) = setup(&fixtures::coupled(), 6);
    let pop = Population::new(&model, &tree, &cc).unwrap();
    let base = pop.simulate(8, 99, 0).unwrap();
    let base_back = pop.evaluate_backward(&base).unwrap();
    let base_costs: Vec<f64> = (0..8).map(|i| pop.realized_cost(&base, &base_back, i).total).collect();
    for perm in [[7, 6, 5, 4, 3, 2, 1, 0], [2, 0, 1, 5, 3, 4, 7, 6]] {
        let leaves: Vec<usize> = perm.iter().map(|&i| base.leaves[i]).collect();
        let run = pop.simulate_from_leaves(&leaves, None).unwrap();
        let back = pop.evaluate_backward(&run).unwrap();
        for level in 0..=tree.depth() {
            assert!(sup_diff(&run.aggregate_x[level], &base.aggregate_x[level]) < 1e-14);
            assert!(sup_diff(&back.aggregate_y[level], &base_back.aggregate_y[level]) < 1e-14);
            for (i, &j) in perm.iter().enumerate() {
                assert!(sup_diff(run.state(i, level), base.state(j, level)) < 1e-14);
            }
        }
        for (i, &j) in perm.iter().enumerate() {
            let c = pop.realized_cost(&run, &back, i).total;
            assert!((c - base_costs[j]).abs() < 1e-13);
        }
    }
}

#[test]
fn zero_dynamics_stay_at_zero() {
    let spec = ModelSpec::scalar(
        1.0,
        &ScalarCoefficients { a: 0.4, f: 0.3, q: 1.0, l: 1.0, r: 1.0, g: 1.0, ..Default::default() },
    );
    let (model, tree, cc) = setup(&spec, 6);
    let pop = Population::new(&model, &tree, &cc).unwrap();
    let run = pop.simulate(16, 3, 0).unwrap();
    assert!(run.states.iter().all(|&v| v == 0.0));
    assert!(run.aggregate_x.iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn zero_terminal_and_driver_give_zero_aggregate() {
    let spec = ModelSpec::scalar(
        1.0,
        &ScalarCoefficients {
            a: 0.2,
            b: 1.0,
            f: 0.3,
            sigma: 0.4,
            u_coef: 0.2,
            v: 0.3,
            q: 1.0,
            l: 1.0,
            r: 1.0,
            g: 1.0,
            x0: 1.0,
            ..Default::default()
        },
    );
    let (model, tree, cc) = setup(&spec, 6);
    let pop = Population::new(&model, &tree, &cc).unwrap();
    let run = pop.simulate(16, 3, 0).unwrap();
    let agg = pop.evaluate_backward_aggregate(&run).unwrap();
    assert!(agg.iter().flatten().all(|&v| v.abs() < 1e-15));
}

#[test]
fn unit_control_with_weight_two_costs_one() {
    let mut spec = ModelSpec::scalar(1.0, &ScalarCoefficients { b: 1.0, r: 2.0, sigma: 0.3, ..Default::default() });
    spec.control_set = ConvexSet::new_box(vec![1.0], vec![2.0]).unwrap();
    let (model, tree, cc) = setup(&spec, 5);
    let pop = Population::new(&model, &tree, &cc).unwrap();
    let run = pop.simulate(4, 1, 0).unwrap();
    let back = pop.evaluate_backward(&run).unwrap();
    for i in 0..4 {
        let c = pop.realized_cost(&run, &back, i);
        assert!((c.total - 1.0).abs() < 1e-14);
        assert!((c.control_effort - 1.0).abs() < 1e-14);
    }
}

#[test]
fn single_agent_aggregate_equals_individual() {
    let (model, tree, cc) = setup(&fixtures::coupled(), 5);
    let pop = Population::new(&model, &tree, &cc).unwrap();
    let run = pop.simulate_from_leaves(&[9], None).unwrap();
    let agg = pop.evaluate_backward_aggregate(&run).unwrap();
    let ind = pop.evaluate_backward_individual(&run, 0).unwrap();
    for (a, b) in agg.iter().zip(&ind) {
        assert!(sup_diff(a, b) < 1e-13);
    }
}

#[test]
fn inadmissible_profile_is_refused() {
    let (model, tree, cc) = setup(&fixtures::coupled(), 4);
    let pop = Population::new(&model, &tree, &cc).unwrap();
    let bad = TreeProcess::from_fn(&tree, 1, |_, _| vec![0.7]);
    assert!(pop.profile(&bad).is_err());
}
