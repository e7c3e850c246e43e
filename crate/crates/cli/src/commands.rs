use crate::artifacts::Artifacts;
use crate::config::ExperimentConfig;
use crate::Failure;
use anyhow::anyhow;
use mfgcc::cc_solver::{limiting_cost, solve_cc, solve_cc_direct_linear, CCSolution, SolveError};
use mfgcc::convexset::ConvexSet;
use mfgcc::model::{ModelError, ModelSpec, ValidatedModel, ValidationMode};
use mfgcc::nash_lab::{gap_statistics, nash_report, CandidateSpec, GapRow, GapTable, NashReport, RateFit};
use mfgcc::noise_tree::ScenarioTree;
use mfgcc::population::{Population, PopulationError, MAX_BACKWARD_DIM};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

/// Largest depth at which the dense direct solve is attempted.
const ORACLE_MAX_DEPTH: usize = 9;
const ORACLE_TOL: f64 = 1e-7;

pub fn run(name: &str, cfg: &ExperimentConfig) -> Result<u8, Failure> {
    if let Some(threads) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Failure::config(anyhow!("cannot size the thread pool: {e}")))?;
    }
    let (spec, model_json) = load_model(cfg)?;
    let mut arts = Artifacts::create(&cfg.out, cfg.hash(&model_json), cfg.seed)?;
    let result = match name {
        "validate" => validate(cfg, &spec, &mut arts),
        "solve-cc" => solve_cc_cmd(cfg, &spec, &mut arts),
        "oracle-check" => oracle_check(cfg, &spec, &mut arts),
        "simulate" => simulate(cfg, &spec, &mut arts),
        "nash-rates" => nash_rates(cfg, &spec, &mut arts),
        other => unreachable!("unknown command {other}"),
    };
    let code = match &result {
        Ok(code) => *code,
        Err(f) => f.code,
    };
    let mut config = serde_json::to_value(cfg).expect("config serializes");
    config["out"] = json!(cfg.out);
    config["threads"] = json!(cfg.threads);
    config["gate"] = json!(cfg.gate);
    arts.finish(name, config, code)?;
    result
}

fn load_model(cfg: &ExperimentConfig) -> Result<(ModelSpec, Value), Failure> {
    let text = std::fs::read_to_string(&cfg.model).map_err(|e| {
        Failure::config(anyhow!("cannot read model {}: {e}", cfg.model.display()))
    })?;
    let spec = ModelSpec::from_json_str(&text).map_err(|e| match e {
        ModelError::Parse(_) => Failure::config(anyhow!("{}: {e}", cfg.model.display())),
        _ => Failure::validation(anyhow!("{}: {e}", cfg.model.display())),
    })?;
    let json = spec.to_json();
    Ok((spec, json))
}

fn validated(cfg: &ExperimentConfig, spec: &ModelSpec) -> Result<ValidatedModel, Failure> {
    let mode =
        if cfg.solver.allow_permissive { ValidationMode::Permissive } else { ValidationMode::Strict };
    ValidatedModel::new(spec, mode).map_err(|e| Failure::validation(e.into()))
}

fn tree_for(cfg: &ExperimentConfig, spec: &ModelSpec) -> Result<ScenarioTree, Failure> {
    ScenarioTree::build(cfg.depth, spec.horizon).map_err(|e| Failure::config(e.into()))
}

fn solve_failure(e: SolveError) -> Failure {
    match e {
        SolveError::Diverged { .. } | SolveError::Singular(_) => Failure::divergence(e.into()),
        SolveError::Options(_) | SolveError::Unsupported(_) | SolveError::HorizonMismatch { .. } => {
            Failure::config(e.into())
        }
        _ => Failure::validation(e.into()),
    }
}

/// Solves and writes the diagnostics, including the residual history of a
/// divergent run.
fn solve(
    cfg: &ExperimentConfig,
    model: &ValidatedModel,
    tree: &ScenarioTree,
    arts: &mut Artifacts,
) -> Result<CCSolution, Failure> {
    match solve_cc(model, tree, &cfg.solver) {
        Ok(sol) => {
            arts.json("diagnostics.json", &json!({ "converged": true, "diagnostics": sol.diagnostics }))?;
            eprintln!(
                "solved in {} sweeps, residual {:.3e}",
                sol.diagnostics.iterations, sol.diagnostics.final_residual
            );
            Ok(sol)
        }
        Err(e) => {
            if let SolveError::Diverged { alpha, damping, residual_history } = &e {
                arts.json(
                    "diagnostics.json",
                    &json!({
                        "converged": false,
                        "alpha": alpha,
                        "damping": damping,
                        "residual_history": residual_history,
                    }),
                )?;
            }
            Err(solve_failure(e))
        }
    }
}

fn validate(cfg: &ExperimentConfig, spec: &ModelSpec, arts: &mut Artifacts) -> Result<u8, Failure> {
    let report = spec.validate().map_err(|e| Failure::validation(e.into()))?;
    arts.json("validation.json", &report)?;
    let pass = report.strict_pass || (cfg.solver.allow_permissive && report.permissive_pass);
    println!("{}", report.summary());
    if pass {
        Ok(0)
    } else {
        Err(Failure::validation(anyhow!("model fails validation")))
    }
}

#[derive(Serialize)]
struct OracleDiff {
    x: f64,
    y: f64,
    z: f64,
    p: f64,
    q: f64,
    k: f64,
    u: f64,
    max: f64,
    tolerance: f64,
    pass: bool,
}

fn oracle_diff(model: &ValidatedModel, tree: &ScenarioTree, sol: &CCSolution) -> Result<OracleDiff, Failure> {
    let direct = solve_cc_direct_linear(model, tree).map_err(solve_failure)?.solution;
    let d = |a: &mfgcc::noise_tree::TreeProcess, b| a.max_abs_diff(b);
    let parts = [
        d(&sol.x, &direct.x),
        d(&sol.y, &direct.y),
        d(&sol.z, &direct.z),
        d(&sol.p, &direct.p),
        d(&sol.q, &direct.q),
        d(&sol.k, &direct.k),
        d(&sol.u, &direct.u),
    ];
    let max = parts.iter().copied().fold(0.0, f64::max);
    let [x, y, z, p, q, k, u] = parts;
    Ok(OracleDiff { x, y, z, p, q, k, u, max, tolerance: ORACLE_TOL, pass: max < ORACLE_TOL })
}

fn solve_cc_cmd(cfg: &ExperimentConfig, spec: &ModelSpec, arts: &mut Artifacts) -> Result<u8, Failure> {
    let model = validated(cfg, spec)?;
    let tree = tree_for(cfg, spec)?;
    let sol = solve(cfg, &model, &tree, arts)?;
    arts.csv("means.csv", &sol.means_csv(&tree))?;
    arts.csv("strategy.csv", &sol.u.to_csv())?;
    let cost = limiting_cost(&model, &tree, &sol.x, &sol.y, &sol.u, &sol.mean_x, &sol.mean_y)
        .map_err(solve_failure)?;
    arts.json("cost.json", &json!({ "limiting_cost": cost }))?;
    // The unconstrained problem is linear, so a direct solve cross-checks
    // the iteration whenever it is affordable.
    if matches!(spec.control_set, ConvexSet::Whole { .. }) && cfg.depth < ORACLE_MAX_DEPTH {
        let diff = oracle_diff(&model, &tree, &sol)?;
        eprintln!("direct solve differs by at most {:.3e}", diff.max);
        arts.json("oracle_diff.json", &diff)?;
    }
    Ok(0)
}

fn oracle_check(cfg: &ExperimentConfig, spec: &ModelSpec, arts: &mut Artifacts) -> Result<u8, Failure> {
    if !matches!(spec.control_set, ConvexSet::Whole { .. }) {
        return Err(Failure::config(anyhow!("the direct solve needs an unconstrained control set")));
    }
    if cfg.depth > ORACLE_MAX_DEPTH {
        return Err(Failure::config(anyhow!("the direct solve is dense; use depth at most {ORACLE_MAX_DEPTH}")));
    }
    let model = validated(cfg, spec)?;
    let tree = tree_for(cfg, spec)?;
    let sol = solve(cfg, &model, &tree, arts)?;
    let diff = oracle_diff(&model, &tree, &sol)?;
    arts.json("oracle_diff.json", &diff)?;
    println!("max |iterative - direct| = {:.3e} (tolerance {ORACLE_TOL:e})", diff.max);
    gate(cfg, diff.pass)
}

fn gate(cfg: &ExperimentConfig, pass: bool) -> Result<u8, Failure> {
    if cfg.gate && !pass {
        Err(Failure { code: Failure::GATE, error: anyhow!("checked thresholds failed") })
    } else {
        Ok(0)
    }
}

fn population_failure(e: PopulationError) -> Failure {
    match e {
        PopulationError::Solve(s) => solve_failure(s),
        PopulationError::NotConverged => Failure::divergence(e.into()),
        PopulationError::Agents { .. } => Failure::config(e.into()),
        _ => Failure::validation(e.into()),
    }
}

fn simulate(cfg: &ExperimentConfig, spec: &ModelSpec, arts: &mut Artifacts) -> Result<u8, Failure> {
    let model = validated(cfg, spec)?;
    let tree = tree_for(cfg, spec)?;
    let sol = solve(cfg, &model, &tree, arts)?;
    let pop = Population::new(&model, &tree, &sol).map_err(population_failure)?;
    let backward = spec.state_dim <= MAX_BACKWARD_DIM && spec.control_dim <= MAX_BACKWARD_DIM;
    let n = spec.state_dim;

    let reps: Vec<(String, String)> = (0..cfg.replications as u64)
        .into_par_iter()
        .map(|r| -> Result<(String, String), PopulationError> {
            let run = pop.simulate(cfg.agents, cfg.seed, r)?;
            let back = if backward { Some(pop.evaluate_backward(&run)?) } else { None };
            let mut agg = String::new();
            for level in 0..=tree.depth() {
                agg.push_str(&format!("{r},{level},{}", tree.time(level)));
                run.aggregate_x[level].iter().for_each(|v| agg.push_str(&format!(",{v}")));
                if let Some(b) = &back {
                    b.aggregate_y[level].iter().for_each(|v| agg.push_str(&format!(",{v}")));
                }
                sol.mean_x[level].iter().chain(&sol.mean_y[level]).for_each(|v| agg.push_str(&format!(",{v}")));
                agg.push('\n');
            }
            let mut costs = String::new();
            if let Some(b) = &back {
                for agent in 0..cfg.agents {
                    let c = pop.realized_cost(&run, b, agent);
                    costs.push_str(&format!(
                        "{r},{agent},{},{},{},{},{},{}\n",
                        run.leaves[agent], c.tracking_x, c.tracking_y, c.control_effort, c.terminal, c.total
                    ));
                }
            }
            Ok((agg, costs))
        })
        .collect::<Result<_, _>>()
        .map_err(population_failure)?;

    let mut header = String::from("replication,level,t");
    (0..n).for_each(|i| header.push_str(&format!(",xbar{i}")));
    if backward {
        (0..n).for_each(|i| header.push_str(&format!(",ybar{i}")));
    }
    (0..n).for_each(|i| header.push_str(&format!(",m_x{i}")));
    (0..n).for_each(|i| header.push_str(&format!(",m_y{i}")));
    header.push('\n');
    let mut agg = header;
    reps.iter().for_each(|(a, _)| agg.push_str(a));
    arts.csv("aggregates.csv", &agg)?;

    let limiting = limiting_cost(&model, &tree, &sol.x, &sol.y, &sol.u, &sol.mean_x, &sol.mean_y)
        .map_err(solve_failure)?;
    let mut summary = json!({
        "agents": cfg.agents,
        "replications": cfg.replications,
        "limiting_cost": limiting,
        "backward_evaluated": backward,
    });
    if backward {
        let mut costs = String::from(
            "replication,agent,leaf,tracking_x,tracking_y,control_effort,terminal,total\n",
        );
        reps.iter().for_each(|(_, c)| costs.push_str(c));
        let totals: Vec<f64> = costs
            .lines()
            .skip(1)
            .filter_map(|l| l.rsplit(',').next()?.parse().ok())
            .collect();
        summary["mean_realized_cost"] = json!(totals.iter().sum::<f64>() / totals.len() as f64);
        arts.csv("agent_costs.csv", &costs)?;
    } else {
        eprintln!("backward components need n, m <= {MAX_BACKWARD_DIM}; wrote forward aggregates only");
    }
    arts.json("simulation_summary.json", &summary)?;
    println!(
        "{} replications of {} agents written to {}",
        cfg.replications,
        cfg.agents,
        cfg.out.display()
    );
    Ok(0)
}

/// A measured quantity against its acceptance range.
#[derive(Serialize)]
struct Check {
    name: &'static str,
    value: Option<f64>,
    r_squared: Option<f64>,
    range: [f64; 2],
    min_r_squared: f64,
    pass: bool,
    note: Option<String>,
}

fn slope_check(
    name: &'static str,
    table: &GapTable,
    value: fn(&GapRow) -> f64,
    range: [f64; 2],
    min_r_squared: f64,
) -> (Check, Option<RateFit>) {
    match table.fit(value) {
        Ok(fit) => {
            let pass = (range[0]..=range[1]).contains(&fit.slope) && fit.r_squared >= min_r_squared;
            let note = (!fit.excluded.is_empty())
                .then(|| format!("zero values excluded at N = {:?}", fit.excluded));
            let check = Check {
                name,
                value: Some(fit.slope),
                r_squared: Some(fit.r_squared),
                range,
                min_r_squared,
                pass,
                note,
            };
            (check, Some(fit))
        }
        Err(e) => (
            Check { name, value: None, r_squared: None, range, min_r_squared, pass: false, note: Some(e.to_string()) },
            None,
        ),
    }
}

/// Nonincreasing within two standard errors, and below `C/√N` with `C`
/// taken from the smallest population size.
fn epsilon_checks(report: &NashReport) -> Vec<Check> {
    let rows = &report.rows;
    let monotone = rows
        .windows(2)
        .all(|w| w[1].epsilon <= w[0].epsilon + 2.0 * w[0].epsilon_se.max(w[1].epsilon_se));
    let c = 2.0 * rows[0].epsilon * (rows[0].agents as f64).sqrt();
    let envelope = rows.iter().all(|r| r.epsilon <= c / (r.agents as f64).sqrt());
    vec![
        Check {
            name: "epsilon_nonincreasing",
            value: None,
            r_squared: None,
            range: [f64::NEG_INFINITY, 0.0],
            min_r_squared: 0.0,
            pass: monotone,
            note: Some("successive increases stay within 2 standard errors".into()),
        },
        Check {
            name: "epsilon_envelope",
            value: Some(c),
            r_squared: None,
            range: [0.0, f64::INFINITY],
            min_r_squared: 0.0,
            pass: envelope,
            note: Some(format!(
                "epsilon(N) <= C/sqrt(N) with C = 2 epsilon({}) sqrt({})",
                rows[0].agents, rows[0].agents
            )),
        },
    ]
}

fn print_table(table: &GapTable, report: &NashReport) {
    println!(
        "{:>6} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>10}",
        "N", "gap_x_avg", "gap_y_avg", "gap_x_ind", "gap_y_ind", "cost_gap", "epsilon", "eps_se"
    );
    for (g, e) in table.rows.iter().zip(&report.rows) {
        println!(
            "{:>6} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>10.2e}",
            g.agents,
            g.gap_x_avg.mean,
            g.gap_y_avg.mean,
            g.gap_x_indiv,
            g.gap_y_indiv,
            g.cost_gap.mean,
            e.epsilon,
            e.epsilon_se
        );
    }
}

fn nash_rates(cfg: &ExperimentConfig, spec: &ModelSpec, arts: &mut Artifacts) -> Result<u8, Failure> {
    let model = validated(cfg, spec)?;
    let tree = tree_for(cfg, spec)?;
    let sol = solve(cfg, &model, &tree, arts)?;
    let lab = |e: mfgcc::nash_lab::LabError| match e {
        mfgcc::nash_lab::LabError::Population(p) => population_failure(p),
        other => Failure::config(other.into()),
    };
    let table = gap_statistics(&model, &tree, &sol, &cfg.n_grid, cfg.replications, cfg.seed).map_err(lab)?;
    let family = CandidateSpec::default();
    let report =
        nash_report(&model, &tree, &sol, &cfg.n_grid, &family, cfg.replications, cfg.seed).map_err(lab)?;
    arts.csv("gap_table.csv", &table.to_csv())?;
    arts.csv("nash_report.csv", &report.to_csv())?;

    let mut checks = Vec::new();
    let mut fits = serde_json::Map::new();
    for (name, value, range, r2) in [
        ("gap_x_avg_slope", (|r| r.gap_x_avg.mean) as fn(&GapRow) -> f64, [-1.35, -0.65], 0.9),
        ("gap_y_avg_slope", |r| r.gap_y_avg.mean, [-1.35, -0.65], 0.9),
        ("gap_x_indiv_slope", |r| r.gap_x_indiv, [-1.35, -0.65], 0.0),
        ("gap_y_indiv_slope", |r| r.gap_y_indiv, [-1.35, -0.65], 0.0),
        ("cost_gap_slope", |r| r.cost_gap.mean, [-0.85, -0.25], 0.8),
    ] {
        let (check, fit) = slope_check(name, &table, value, range, r2);
        fits.insert(name.to_string(), json!(fit));
        checks.push(check);
    }
    checks.extend(epsilon_checks(&report));
    let pass = checks.iter().all(|c| c.pass);
    arts.json(
        "summary.json",
        &json!({
            "limiting_cost": table.limiting_cost,
            "n_grid": cfg.n_grid,
            "replications": cfg.replications,
            "candidate_family": report.candidates,
            "epsilon_rate": report.rate,
            "fits": fits,
            "checks": checks,
            "pass": pass,
        }),
    )?;
    print_table(&table, &report);
    for c in &checks {
        println!(
            "{:<24} {:>5}  {}",
            c.name,
            if c.pass { "PASS" } else { "FAIL" },
            c.value.map(|v| format!("{v:.4}")).unwrap_or_else(|| c.note.clone().unwrap_or_default())
        );
    }
    gate(cfg, pass)
}
