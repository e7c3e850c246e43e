use mfgcc::cc_solver::{solve_cc, CCSolution, SolveOptions};
use mfgcc::fixtures;
use mfgcc::model::{ModelSpec, ScalarCoefficients, ValidatedModel, ValidationMode};
use mfgcc::nash_lab::{best_response_gain, build_candidates, gap_statistics, CandidateSpec, LabError};
use mfgcc::noise_tree::ScenarioTree;

fn setup(spec: &ModelSpec, depth: usize) -> (ValidatedModel, ScenarioTree, CCSolution) {
    let model = ValidatedModel::new(spec, ValidationMode::Permissive).unwrap();
    let tree = ScenarioTree::build(depth, spec.horizon).unwrap();
    let opts = SolveOptions { allow_permissive: true, ..Default::default() };
    let cc = solve_cc(&model, &tree, &opts).unwrap();
    (model, tree, cc)
}

#[test]
fn deterministic_states_have_zero_state_gaps() {
    let spec = ModelSpec::scalar(
        1.0,
        &ScalarCoefficients { a: 0.3, f: 0.2, m: 0.4, q: 1.0, l: 1.0, r: 1.0, g: 1.0, x0: 0.7, ..Default::default() },
    );
    let (model, tree, cc) = setup(&spec, 5);
    let table = gap_statistics(&model, &tree, &cc, &[4, 16], 8, 1).unwrap();
    for row in &table.rows {
        assert!(row.gap_x_avg.mean < 1e-28, "{row:?}");
        assert!(row.gap_x_indiv < 1e-28);
        assert!(row.gap_y_avg.mean < 1e-28);
    }
}

#[test]
fn uncoupled_average_gap_shrinks_and_rows_are_sorted() {
    let (model, tree, cc) = setup(&fixtures::no_coupling(), 6);
    let table = gap_statistics(&model, &tree, &cc, &[256, 4, 32], 32, 9).unwrap();
    let sizes: Vec<usize> = table.rows.iter().map(|r| r.agents).collect();
    assert_eq!(sizes, vec![4, 32, 256]);
    assert!(table.rows.windows(2).all(|w| w[1].gap_x_avg.mean < w[0].gap_x_avg.mean));
    // Without coupling in the dynamics every agent's state is the generic
    // agent's state on its path.
    assert!(table.rows.iter().all(|r| r.gap_x_indiv == 0.0));
    for r in &table.rows {
        assert!(r.gap_x_avg.mean >= 0.0 && r.gap_y_avg.mean >= 0.0 && r.cost_gap.mean >= 0.0);
    }
}

#[test]
fn doubling_replications_is_consistent() {
    let (model, tree, cc) = setup(&fixtures::coupled(), 6);
    let a = gap_statistics(&model, &tree, &cc, &[16], 32, 4).unwrap();
    let b = gap_statistics(&model, &tree, &cc, &[16], 64, 4).unwrap();
    let (ra, rb) = (&a.rows[0], &b.rows[0]);
    for (x, y) in [(ra.gap_x_avg, rb.gap_x_avg), (ra.gap_y_avg, rb.gap_y_avg), (ra.cost_gap, rb.cost_gap)] {
        assert!((x.mean - y.mean).abs() <= 5.0 * x.se, "{x:?} vs {y:?}");
    }
}

#[test]
fn second_moments_do_not_grow_with_population() {
    let (model, tree, cc) = setup(&fixtures::coupled(), 6);
    let table = gap_statistics(&model, &tree, &cc, &[4, 16, 64, 256], 32, 3).unwrap();
    let xs: Vec<f64> = table.rows.iter().map(|r| r.second_moment_x).collect();
    let ys: Vec<f64> = table.rows.iter().map(|r| r.second_moment_y).collect();
    for v in [xs, ys] {
        let (lo, hi) = v.iter().fold((f64::INFINITY, 0.0f64), |(l, h), x| (l.min(*x), h.max(*x)));
        assert!(hi <= 1.25 * lo, "{v:?}");
        assert!(v.last().unwrap() <= &(1.05 * v[0]));
    }
}

#[test]
fn candidates_are_admissible() {
    let (model, tree, cc) = setup(&fixtures::coupled(), 5);
    let cands = build_candidates(&model, &tree, &cc, 8, &CandidateSpec::default(), 3).unwrap();
    assert_eq!(cands.len(), CandidateSpec::default().size());
    let set = &model.spec().control_set;
    for (label, u) in &cands {
        for level in 0..=tree.depth() {
            for path in 0..tree.level_size(level) {
                assert!(set.contains(u.get(level, path), 1e-12), "{label} at ({level}, {path})");
            }
        }
    }
}

#[test]
fn larger_family_never_measures_a_smaller_gain() {
    let (model, tree, cc) = setup(&fixtures::coupled(), 5);
    let small = CandidateSpec {
        empirical_response: false,
        scales: vec![0.8, 0.9],
        shifts: vec![],
        random: 0,
        ..Default::default()
    };
    let large = CandidateSpec { scales: vec![0.8, 0.9, 0.95], shifts: vec![0.02], ..small.clone() };
    for agents in [2, 4] {
        let a = best_response_gain(&model, &tree, &cc, agents, &small, 16, 8).unwrap();
        let b = best_response_gain(&model, &tree, &cc, agents, &large, 16, 8).unwrap();
        assert!(a.epsilon <= b.epsilon, "{a:?} vs {b:?}");
        assert!(a.epsilon >= 0.0);
    }
}

#[test]
fn zero_weight_model_has_no_gain() {
    let (model, tree, cc) = setup(&fixtures::zero_weight(), 5);
    let row = best_response_gain(&model, &tree, &cc, 8, &CandidateSpec::default(), 8, 1).unwrap();
    assert_eq!(row.decentralized_cost.mean, 0.0);
    assert_eq!(row.epsilon, 0.0);
}

#[test]
fn bad_arguments_are_rejected() {
    let (model, tree, cc) = setup(&fixtures::coupled(), 4);
    assert!(matches!(gap_statistics(&model, &tree, &cc, &[], 4, 0), Err(LabError::EmptyGrid)));
    assert!(matches!(gap_statistics(&model, &tree, &cc, &[8], 0, 0), Err(LabError::NoReplications)));
    let empty = CandidateSpec { empirical_response: false, scales: vec![], shifts: vec![], random: 0, ..Default::default() };
    assert!(matches!(
        best_response_gain(&model, &tree, &cc, 8, &empty, 4, 0),
        Err(LabError::EmptyFamily)
    ));
}
