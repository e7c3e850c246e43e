//! Coefficient data of the game, its validation, and the JSON model format.
//!
//! Every coefficient is piecewise constant in time on its own mesh and is
//! evaluated right-continuously: on `[t_i, t_{i+1})` the value is
//! `values[i]`, and at the closed right end `T` it is the last value.

use crate::convexset::ConvexSet;
use crate::linalg::{self, Mat};
use serde_json::{json, Map, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("malformed model: {0}")]
    Parse(String),
    #[error("dimension mismatch in {field}: {detail}")]
    Dimension { field: String, detail: String },
    #[error("{field} is not symmetric (max asymmetry {asymmetry:e})")]
    Asymmetric { field: String, asymmetry: f64 },
    #[error("bad time mesh for {field}: {detail}")]
    Mesh { field: String, detail: String },
    #[error("horizon must be positive and finite, got {0}")]
    Horizon(f64),
    #[error("time {t} outside [0, {horizon}]")]
    TimeRange { t: f64, horizon: f64 },
    #[error("model fails {mode} validation: {summary}")]
    Invalid { mode: &'static str, summary: String },
}

/// A piecewise-constant function of time.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeFunction<T> {
    Constant(T),
    /// `mesh` runs from 0 to `T` and has one more entry than `values`.
    Piecewise { mesh: Vec<f64>, values: Vec<T> },
}

impl<T> TimeFunction<T> {
    pub fn constant(v: T) -> Self {
        TimeFunction::Constant(v)
    }

    /// Right-continuous evaluation; the caller guarantees `0 <= t <= T`.
    pub fn at(&self, t: f64) -> &T {
        match self {
            TimeFunction::Constant(v) => v,
            TimeFunction::Piecewise { mesh, values } => {
                let idx = mesh.partition_point(|&s| s <= t).saturating_sub(1);
                &values[idx.min(values.len() - 1)]
            }
        }
    }

    pub fn values(&self) -> Vec<&T> {
        match self {
            TimeFunction::Constant(v) => vec![v],
            TimeFunction::Piecewise { values, .. } => values.iter().collect(),
        }
    }

    pub fn mesh(&self) -> Option<&[f64]> {
        match self {
            TimeFunction::Constant(_) => None,
            TimeFunction::Piecewise { mesh, .. } => Some(mesh),
        }
    }

    fn map<S>(&self, f: impl Fn(&T) -> S) -> TimeFunction<S> {
        match self {
            TimeFunction::Constant(v) => TimeFunction::Constant(f(v)),
            TimeFunction::Piecewise { mesh, values } => TimeFunction::Piecewise {
                mesh: mesh.clone(),
                values: values.iter().map(f).collect(),
            },
        }
    }
}

pub type MatFn = TimeFunction<Mat>;
pub type VecFn = TimeFunction<Vec<f64>>;

/// All coefficient data. `u_coef` is the coefficient of `y` in the backward
/// drift; the constraint set is `control_set`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub state_dim: usize,
    pub control_dim: usize,
    pub horizon: f64,
    pub a: MatFn,
    pub b: MatFn,
    pub f: MatFn,
    pub x_drift: VecFn,
    pub d: MatFn,
    pub sigma: VecFn,
    pub m: MatFn,
    pub u_coef: MatFn,
    pub h: MatFn,
    pub v: MatFn,
    pub k: MatFn,
    pub y_drift: VecFn,
    pub phi: Mat,
    pub q: MatFn,
    pub l: MatFn,
    pub r: MatFn,
    pub g: Mat,
    pub x0: Vec<f64>,
    pub control_set: ConvexSet,
}

/// Every time-dependent coefficient evaluated at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSlice {
    pub a: Mat,
    pub b: Mat,
    pub f: Mat,
    pub x_drift: Vec<f64>,
    pub d: Mat,
    pub sigma: Vec<f64>,
    pub m: Mat,
    pub u_coef: Mat,
    pub h: Mat,
    pub v: Mat,
    pub k: Mat,
    pub y_drift: Vec<f64>,
    pub q: Mat,
    pub l: Mat,
    pub r: Mat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationMode {
    Strict,
    Permissive,
}

impl ValidationMode {
    pub fn name(self) -> &'static str {
        match self {
            ValidationMode::Strict => "strict",
            ValidationMode::Permissive => "permissive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
    pub detail: String,
    /// Whether permissive mode tolerates this violation.
    pub permissive_ok: bool,
}

/// Violations are always listed against the strict rules, so an empty list
/// is the same as `strict_pass`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ValidationReport {
    pub strict_pass: bool,
    pub permissive_pass: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passes(&self, mode: ValidationMode) -> bool {
        match mode {
            ValidationMode::Strict => self.strict_pass,
            ValidationMode::Permissive => self.permissive_pass,
        }
    }

    pub fn summary(&self) -> String {
        self.violations
            .iter()
            .map(|v| format!("{}: {} ({})", v.field, v.rule, v.detail))
            .collect::<Vec<_>>()
            .join("; ")
    }
}

const SYMMETRY_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-12;

fn scalar_mat(x: f64) -> Mat {
    Mat::from_element(1, 1, x)
}

impl ModelSpec {
    /// A model with every coefficient zero except `R = I`, the whole
    /// control space, and `x0 = 0`.
    pub fn zeros(state_dim: usize, control_dim: usize, horizon: f64) -> Self {
        let n = state_dim;
        let m = control_dim;
        let nn = || TimeFunction::constant(Mat::zeros(n, n));
        let nm = || TimeFunction::constant(Mat::zeros(n, m));
        let vecn = || TimeFunction::constant(vec![0.0; n]);
        ModelSpec {
            state_dim: n,
            control_dim: m,
            horizon,
            a: nn(),
            b: nm(),
            f: nn(),
            x_drift: vecn(),
            d: nm(),
            sigma: vecn(),
            m: nn(),
            u_coef: nn(),
            h: nn(),
            v: nn(),
            k: nm(),
            y_drift: vecn(),
            phi: Mat::zeros(n, n),
            q: nn(),
            l: nn(),
            r: TimeFunction::constant(Mat::identity(m, m)),
            g: Mat::zeros(n, n),
            x0: vec![0.0; n],
            control_set: ConvexSet::whole(m),
        }
    }

    /// One-dimensional model from constant scalars, mainly for fixtures.
    pub fn scalar(horizon: f64, c: &ScalarCoefficients) -> Self {
        let k = |x: f64| TimeFunction::constant(scalar_mat(x));
        let v = |x: f64| TimeFunction::constant(vec![x]);
        ModelSpec {
            state_dim: 1,
            control_dim: 1,
            horizon,
            a: k(c.a),
            b: k(c.b),
            f: k(c.f),
            x_drift: v(c.x_drift),
            d: k(c.d),
            sigma: v(c.sigma),
            m: k(c.m),
            u_coef: k(c.u_coef),
            h: k(c.h),
            v: k(c.v),
            k: k(c.k),
            y_drift: v(c.y_drift),
            phi: scalar_mat(c.phi),
            q: k(c.q),
            l: k(c.l),
            r: k(c.r),
            g: scalar_mat(c.g),
            x0: vec![c.x0],
            control_set: ConvexSet::whole(1),
        }
    }

    fn mat_fields(&self) -> [(&'static str, &MatFn, usize, usize); 12] {
        let (n, m) = (self.state_dim, self.control_dim);
        [
            ("A", &self.a, n, n),
            ("B", &self.b, n, m),
            ("F", &self.f, n, n),
            ("D", &self.d, n, m),
            ("M", &self.m, n, n),
            ("U_coef", &self.u_coef, n, n),
            ("H", &self.h, n, n),
            ("V", &self.v, n, n),
            ("K", &self.k, n, m),
            ("Q", &self.q, n, n),
            ("L", &self.l, n, n),
            ("R", &self.r, m, m),
        ]
    }

    fn vec_fields(&self) -> [(&'static str, &VecFn); 3] {
        [("b", &self.x_drift), ("sigma", &self.sigma), ("f", &self.y_drift)]
    }

    /// Hard structural checks: dimensions, meshes, symmetry of weights.
    pub fn check_structure(&self) -> Result<(), ModelError> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(ModelError::Horizon(self.horizon));
        }
        let (n, m) = (self.state_dim, self.control_dim);
        if n == 0 || m == 0 {
            return Err(ModelError::Dimension {
                field: "n/m".into(),
                detail: "dimensions must be positive".into(),
            });
        }
        for (name, func, r, c) in self.mat_fields() {
            self.check_mesh(name, func.mesh(), func.values().len())?;
            for val in func.values() {
                if val.nrows() != r || val.ncols() != c {
                    return Err(ModelError::Dimension {
                        field: name.into(),
                        detail: format!("expected {r}x{c}, got {}x{}", val.nrows(), val.ncols()),
                    });
                }
            }
        }
        for (name, func) in self.vec_fields() {
            self.check_mesh(name, func.mesh(), func.values().len())?;
            for val in func.values() {
                if val.len() != n {
                    return Err(ModelError::Dimension {
                        field: name.into(),
                        detail: format!("expected length {n}, got {}", val.len()),
                    });
                }
            }
        }
        for (name, mat) in [("Phi", &self.phi), ("G", &self.g)] {
            if mat.nrows() != n || mat.ncols() != n {
                return Err(ModelError::Dimension {
                    field: name.into(),
                    detail: format!("expected {n}x{n}, got {}x{}", mat.nrows(), mat.ncols()),
                });
            }
        }
        if self.x0.len() != n {
            return Err(ModelError::Dimension {
                field: "x0".into(),
                detail: format!("expected length {n}, got {}", self.x0.len()),
            });
        }
        if self.control_set.dim() != m {
            return Err(ModelError::Dimension {
                field: "control_set".into(),
                detail: format!("expected dimension {m}, got {}", self.control_set.dim()),
            });
        }
        let sym_fields: Vec<(&str, &Mat)> = [("Q", &self.q), ("L", &self.l), ("R", &self.r)]
            .into_iter()
            .flat_map(|(name, f)| f.values().into_iter().map(move |v| (name, v)))
            .chain([("G", &self.g)])
            .collect();
        for (name, mat) in sym_fields {
            let asym = linalg::asymmetry(mat);
            if asym > SYMMETRY_TOL * linalg::max_abs(mat).max(1.0) {
                return Err(ModelError::Asymmetric { field: name.into(), asymmetry: asym });
            }
        }
        Ok(())
    }

    fn check_mesh(&self, field: &str, mesh: Option<&[f64]>, nvalues: usize) -> Result<(), ModelError> {
        let Some(mesh) = mesh else { return Ok(()) };
        let err = |detail: String| ModelError::Mesh { field: field.into(), detail };
        if mesh.len() < 2 {
            return Err(err("mesh needs at least two points".into()));
        }
        if nvalues + 1 != mesh.len() {
            return Err(err(format!(
                "{} mesh points need {} values, got {nvalues}",
                mesh.len(),
                mesh.len() - 1
            )));
        }
        if mesh[0] != 0.0 {
            return Err(err(format!("mesh must start at 0, starts at {}", mesh[0])));
        }
        let last = mesh[mesh.len() - 1];
        if (last - self.horizon).abs() > 1e-12 * self.horizon {
            return Err(err(format!("mesh must end at T = {}, ends at {last}", self.horizon)));
        }
        if mesh.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(err("mesh must be strictly increasing".into()));
        }
        Ok(())
    }

    /// All interior breakpoints of every coefficient mesh.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut pts: Vec<f64> = self
            .mat_fields()
            .iter()
            .filter_map(|(_, f, _, _)| f.mesh())
            .chain(self.vec_fields().iter().filter_map(|(_, f)| f.mesh()))
            .flat_map(|m| m[1..m.len() - 1].to_vec())
            .collect();
        pts.sort_by(|a, b| a.total_cmp(b));
        pts.dedup();
        pts
    }

    /// Coefficients at time `t`, right-continuous at mesh points.
    pub fn coeff_at(&self, t: f64) -> Result<CoefficientSlice, ModelError> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(ModelError::TimeRange { t, horizon: self.horizon });
        }
        Ok(CoefficientSlice {
            a: self.a.at(t).clone(),
            b: self.b.at(t).clone(),
            f: self.f.at(t).clone(),
            x_drift: self.x_drift.at(t).clone(),
            d: self.d.at(t).clone(),
            sigma: self.sigma.at(t).clone(),
            m: self.m.at(t).clone(),
            u_coef: self.u_coef.at(t).clone(),
            h: self.h.at(t).clone(),
            v: self.v.at(t).clone(),
            k: self.k.at(t).clone(),
            y_drift: self.y_drift.at(t).clone(),
            q: self.q.at(t).clone(),
            l: self.l.at(t).clone(),
            r: self.r.at(t).clone(),
        })
    }

    /// Per-level coefficients for a uniform grid of `steps` steps: entry `k`
    /// holds the value on `[t_k, t_{k+1})`, entry `steps` the value at `T`.
    /// Fails unless every mesh breakpoint is a grid point.
    pub fn slices_on_grid(&self, steps: usize) -> Result<Vec<CoefficientSlice>, ModelError> {
        let dt = self.horizon / steps as f64;
        for t in self.breakpoints() {
            let j = (t / dt).round();
            if (t - j * dt).abs() > 1e-9 * dt {
                return Err(ModelError::Mesh {
                    field: "coefficients".into(),
                    detail: format!(
                        "breakpoint {t} is not on the time grid of {steps} steps (dt = {dt})"
                    ),
                });
            }
        }
        (0..=steps)
            .map(|k| {
                let t = if k == steps { self.horizon } else { (k as f64 + 0.5) * dt };
                self.coeff_at(t)
            })
            .collect()
    }

    /// Validation against the standing assumptions. Structural problems are
    /// returned as hard errors; everything else is reported as violations.
    pub fn validate(&self) -> Result<ValidationReport, ModelError> {
        self.check_structure()?;
        let mut violations = Vec::new();
        let push = |violations: &mut Vec<Violation>,
                    field: &str,
                    rule: &str,
                    detail: String,
                    permissive_ok: bool| {
            violations.push(Violation {
                field: field.into(),
                rule: rule.into(),
                detail,
                permissive_ok,
            })
        };
        for (name, func, _, _) in self.mat_fields() {
            if func.values().iter().any(|v| v.iter().any(|x| !x.is_finite())) {
                push(&mut violations, name, "finite", "non-finite entry".into(), false);
            }
        }
        for (name, func) in self.vec_fields() {
            if func.values().iter().any(|v| v.iter().any(|x| !x.is_finite())) {
                push(&mut violations, name, "finite", "non-finite entry".into(), false);
            }
        }
        for (name, mat) in [("Phi", &self.phi), ("G", &self.g)] {
            if mat.iter().any(|x| !x.is_finite()) {
                push(&mut violations, name, "finite", "non-finite entry".into(), false);
            }
        }
        if self.x0.iter().any(|x| !x.is_finite()) {
            push(&mut violations, "x0", "finite", "non-finite entry".into(), false);
        }
        if !violations.is_empty() {
            return Ok(finish(violations));
        }
        for (name, func) in [("Q", &self.q), ("L", &self.l)] {
            for val in func.values() {
                let lmin = min_eig(val);
                if lmin < -PSD_TOL * linalg::max_abs(val).max(1.0) {
                    push(&mut violations, name, "positive semidefinite", format!("smallest eigenvalue {lmin:e}"), false);
                }
            }
        }
        for val in self.r.values() {
            let lmin = min_eig(val);
            if !(lmin > PSD_TOL * linalg::max_abs(val).max(1.0)) {
                push(&mut violations, "R", "positive definite", format!("smallest eigenvalue {lmin:e}"), false);
            }
        }
        let gmin = min_eig(&self.g);
        let gscale = linalg::max_abs(&self.g).max(1.0);
        if gmin < -PSD_TOL * gscale {
            push(&mut violations, "G", "positive semidefinite", format!("smallest eigenvalue {gmin:e}"), false);
        } else if !(gmin > PSD_TOL * gscale) {
            push(&mut violations, "G", "positive definite", format!("smallest eigenvalue {gmin:e}"), true);
        }
        Ok(finish(violations))
    }

    /// Copy with every weight matrix replaced by its symmetric part.
    pub fn symmetrized(&self) -> ModelSpec {
        let mut out = self.clone();
        out.q = self.q.map(linalg::symmetrized);
        out.l = self.l.map(linalg::symmetrized);
        out.r = self.r.map(linalg::symmetrized);
        out.g = linalg::symmetrized(&self.g);
        out
    }

    pub fn from_json_str(text: &str) -> Result<ModelSpec, ModelError> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        ModelSpec::from_json(&value)
    }

    pub fn from_json(value: &Value) -> Result<ModelSpec, ModelError> {
        let obj = value
            .as_object()
            .ok_or_else(|| ModelError::Parse("model must be a JSON object".into()))?;
        const KEYS: [&str; 22] = [
            "n", "m", "T", "A", "B", "F", "b", "D", "sigma", "M", "U_coef", "H", "V", "K", "f",
            "Phi", "Q", "L", "R", "G", "x0", "control_set",
        ];
        if let Some(bad) = obj.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(ModelError::Parse(format!("unknown field `{bad}`")));
        }
        let dim = |key: &str| -> Result<usize, ModelError> {
            obj.get(key)
                .and_then(Value::as_u64)
                .map(|x| x as usize)
                .ok_or_else(|| ModelError::Parse(format!("`{key}` must be a positive integer")))
        };
        let n = dim("n")?;
        let m = dim("m")?;
        let horizon = obj
            .get("T")
            .and_then(Value::as_f64)
            .ok_or_else(|| ModelError::Parse("`T` must be a number".into()))?;
        let mut spec = ModelSpec::zeros(n, m, horizon);
        spec.r = TimeFunction::constant(Mat::zeros(m, m));
        let mat_fn = |key: &str, r: usize, c: usize, default: &MatFn| match obj.get(key) {
            None => Ok(default.clone()),
            Some(v) => parse_time_fn(key, v, |x| parse_matrix(key, x, r, c)),
        };
        spec.a = mat_fn("A", n, n, &spec.a)?;
        spec.b = mat_fn("B", n, m, &spec.b)?;
        spec.f = mat_fn("F", n, n, &spec.f)?;
        spec.d = mat_fn("D", n, m, &spec.d)?;
        spec.m = mat_fn("M", n, n, &spec.m)?;
        spec.u_coef = mat_fn("U_coef", n, n, &spec.u_coef)?;
        spec.h = mat_fn("H", n, n, &spec.h)?;
        spec.v = mat_fn("V", n, n, &spec.v)?;
        spec.k = mat_fn("K", n, m, &spec.k)?;
        spec.q = mat_fn("Q", n, n, &spec.q)?;
        spec.l = mat_fn("L", n, n, &spec.l)?;
        spec.r = mat_fn("R", m, m, &spec.r)?;
        let vec_fn = |key: &str, default: &VecFn| match obj.get(key) {
            None => Ok(default.clone()),
            Some(v) => parse_time_fn(key, v, |x| parse_vector(key, x, n)),
        };
        spec.x_drift = vec_fn("b", &spec.x_drift)?;
        spec.sigma = vec_fn("sigma", &spec.sigma)?;
        spec.y_drift = vec_fn("f", &spec.y_drift)?;
        if let Some(v) = obj.get("Phi") {
            spec.phi = parse_matrix("Phi", v, n, n)?;
        }
        if let Some(v) = obj.get("G") {
            spec.g = parse_matrix("G", v, n, n)?;
        }
        if let Some(v) = obj.get("x0") {
            spec.x0 = parse_vector("x0", v, n)?;
        }
        if let Some(v) = obj.get("control_set") {
            spec.control_set = parse_control_set(v, m)?;
        }
        spec.check_structure()?;
        Ok(spec)
    }

    /// The model in the same JSON format accepted by [`ModelSpec::from_json`].
    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("n".into(), json!(self.state_dim));
        obj.insert("m".into(), json!(self.control_dim));
        obj.insert("T".into(), json!(self.horizon));
        for (name, func, _, _) in self.mat_fields() {
            obj.insert(name.into(), time_fn_json(func, mat_json));
        }
        for (name, func) in self.vec_fields() {
            obj.insert(name.into(), time_fn_json(func, |v| json!(v)));
        }
        obj.insert("Phi".into(), mat_json(&self.phi));
        obj.insert("G".into(), mat_json(&self.g));
        obj.insert("x0".into(), json!(self.x0));
        obj.insert("control_set".into(), control_set_json(&self.control_set));
        Value::Object(obj)
    }
}

/// Constant scalar coefficients; see [`ModelSpec::scalar`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScalarCoefficients {
    pub a: f64,
    pub b: f64,
    pub f: f64,
    pub x_drift: f64,
    pub d: f64,
    pub sigma: f64,
    pub m: f64,
    pub u_coef: f64,
    pub h: f64,
    pub v: f64,
    pub k: f64,
    pub y_drift: f64,
    pub phi: f64,
    pub q: f64,
    pub l: f64,
    pub r: f64,
    pub g: f64,
    pub x0: f64,
}

fn finish(violations: Vec<Violation>) -> ValidationReport {
    ValidationReport {
        strict_pass: violations.is_empty(),
        permissive_pass: violations.iter().all(|v| v.permissive_ok),
        violations,
    }
}

fn min_eig(m: &Mat) -> f64 {
    linalg::sym_eigenvalues(&linalg::symmetrized(m))
        .first()
        .copied()
        .unwrap_or(0.0)
}

/// A model that passed validation, with weights stored in symmetrized form.
#[derive(Debug, Clone)]
pub struct ValidatedModel {
    spec: ModelSpec,
    report: ValidationReport,
}

impl ValidatedModel {
    /// Fails on hard errors or when the model does not pass `mode`.
    pub fn new(spec: &ModelSpec, mode: ValidationMode) -> Result<Self, ModelError> {
        let report = spec.validate()?;
        if !report.passes(mode) {
            return Err(ModelError::Invalid { mode: mode.name(), summary: report.summary() });
        }
        Ok(ValidatedModel { spec: spec.symmetrized(), report })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn report(&self) -> &ValidationReport {
        &self.report
    }

    pub fn is_strict(&self) -> bool {
        self.report.strict_pass
    }
}

fn parse_time_fn<T>(
    key: &str,
    v: &Value,
    parse: impl Fn(&Value) -> Result<T, ModelError>,
) -> Result<TimeFunction<T>, ModelError> {
    let Some(obj) = v.as_object() else {
        return Ok(TimeFunction::Constant(parse(v)?));
    };
    let mesh = obj
        .get("mesh")
        .and_then(Value::as_array)
        .ok_or_else(|| ModelError::Parse(format!("`{key}.mesh` must be an array")))?
        .iter()
        .map(|x| {
            x.as_f64()
                .ok_or_else(|| ModelError::Parse(format!("`{key}.mesh` entries must be numbers")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let values = obj
        .get("values")
        .and_then(Value::as_array)
        .ok_or_else(|| ModelError::Parse(format!("`{key}.values` must be an array")))?
        .iter()
        .map(parse)
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(extra) = obj.keys().find(|k| *k != "mesh" && *k != "values") {
        return Err(ModelError::Parse(format!("unknown field `{key}.{extra}`")));
    }
    Ok(TimeFunction::Piecewise { mesh, values })
}

fn number(key: &str, v: &Value) -> Result<f64, ModelError> {
    v.as_f64()
        .ok_or_else(|| ModelError::Parse(format!("`{key}` contains a non-number: {v}")))
}

fn parse_vector(key: &str, v: &Value, len: usize) -> Result<Vec<f64>, ModelError> {
    let out = match v {
        Value::Number(_) => vec![number(key, v)?],
        Value::Array(items) => items.iter().map(|x| number(key, x)).collect::<Result<_, _>>()?,
        _ => return Err(ModelError::Parse(format!("`{key}` must be a number or array"))),
    };
    if out.len() != len {
        return Err(ModelError::Dimension {
            field: key.into(),
            detail: format!("expected length {len}, got {}", out.len()),
        });
    }
    Ok(out)
}

/// Accepts a scalar (1x1 only), a flat array (single row or single column),
/// or nested row-major arrays.
fn parse_matrix(key: &str, v: &Value, rows: usize, cols: usize) -> Result<Mat, ModelError> {
    let dim_err = |detail: String| ModelError::Dimension { field: key.into(), detail };
    match v {
        Value::Number(_) => {
            if rows * cols != 1 {
                return Err(dim_err(format!("scalar given for a {rows}x{cols} matrix")));
            }
            Ok(scalar_mat(number(key, v)?))
        }
        Value::Array(items) if items.iter().all(Value::is_array) && !items.is_empty() => {
            if items.len() != rows {
                return Err(dim_err(format!("expected {rows} rows, got {}", items.len())));
            }
            let mut out = Mat::zeros(rows, cols);
            for (i, row) in items.iter().enumerate() {
                let row = row.as_array().expect("checked above");
                if row.len() != cols {
                    return Err(dim_err(format!(
                        "row {i}: expected {cols} entries, got {}",
                        row.len()
                    )));
                }
                for (j, x) in row.iter().enumerate() {
                    out[(i, j)] = number(key, x)?;
                }
            }
            Ok(out)
        }
        Value::Array(items) => {
            if rows != 1 && cols != 1 {
                return Err(dim_err(format!(
                    "flat array given for a {rows}x{cols} matrix; use nested rows"
                )));
            }
            if items.len() != rows * cols {
                return Err(dim_err(format!(
                    "expected {} entries, got {}",
                    rows * cols,
                    items.len()
                )));
            }
            let data = items.iter().map(|x| number(key, x)).collect::<Result<Vec<_>, _>>()?;
            Ok(Mat::from_row_slice(rows, cols, &data))
        }
        _ => Err(ModelError::Parse(format!("`{key}` must be a number or array"))),
    }
}

pub fn parse_control_set(v: &Value, m: usize) -> Result<ConvexSet, ModelError> {
    let obj = v
        .as_object()
        .ok_or_else(|| ModelError::Parse("`control_set` must be an object".into()))?;
    let kind = obj
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| ModelError::Parse("`control_set.kind` must be a string".into()))?;
    let bad = |e: crate::convexset::ProjectionError| ModelError::Parse(format!("control_set: {e}"));
    let allowed: &[&str] = match kind {
        "whole" | "orthant" => &["kind"],
        "box" => &["kind", "lo", "hi"],
        "ball" => &["kind", "center", "radius"],
        other => return Err(ModelError::Parse(format!("unknown control_set kind `{other}`"))),
    };
    if let Some(extra) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(ModelError::Parse(format!("unknown field `control_set.{extra}`")));
    }
    let field = |name: &str| {
        obj.get(name)
            .ok_or_else(|| ModelError::Parse(format!("`control_set.{name}` is required")))
    };
    match kind {
        "whole" => Ok(ConvexSet::whole(m)),
        "orthant" => Ok(ConvexSet::orthant(m)),
        "box" => {
            let lo = parse_vector("control_set.lo", field("lo")?, m)?;
            let hi = parse_vector("control_set.hi", field("hi")?, m)?;
            ConvexSet::new_box(lo, hi).map_err(bad)
        }
        _ => {
            let center = parse_vector("control_set.center", field("center")?, m)?;
            let radius = number("control_set.radius", field("radius")?)?;
            ConvexSet::new_ball(center, radius).map_err(bad)
        }
    }
}

pub fn control_set_json(set: &ConvexSet) -> Value {
    match set {
        ConvexSet::Whole { .. } => json!({"kind": "whole"}),
        ConvexSet::Orthant { .. } => json!({"kind": "orthant"}),
        ConvexSet::Box { lo, hi } => json!({"kind": "box", "lo": lo, "hi": hi}),
        ConvexSet::Ball { center, radius } => {
            json!({"kind": "ball", "center": center, "radius": radius})
        }
    }
}

fn mat_json(m: &Mat) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|i| json!((0..m.ncols()).map(|j| m[(i, j)]).collect::<Vec<_>>()))
            .collect(),
    )
}

fn time_fn_json<T>(f: &TimeFunction<T>, enc: impl Fn(&T) -> Value) -> Value {
    match f {
        TimeFunction::Constant(v) => enc(v),
        TimeFunction::Piecewise { mesh, values } => {
            json!({"mesh": mesh, "values": values.iter().map(enc).collect::<Vec<_>>()})
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ModelSpec {
        let mut s = ModelSpec::zeros(1, 1, 1.0);
        s.q = TimeFunction::constant(scalar_mat(1.0));
        s.l = TimeFunction::constant(scalar_mat(1.0));
        s.g = scalar_mat(1.0);
        s
    }

    #[test]
    fn scalar_unit_weights_pass_strict() {
        let r = base().validate().unwrap();
        assert!(r.strict_pass && r.permissive_pass && r.violations.is_empty());
    }

    #[test]
    fn zero_r_fails_both_modes() {
        let mut s = base();
        s.r = TimeFunction::constant(scalar_mat(0.0));
        let r = s.validate().unwrap();
        assert!(!r.strict_pass && !r.permissive_pass);
        assert_eq!(r.violations[0].field, "R");
    }

    #[test]
    fn zero_terminal_and_tracking_weights_are_permissive_only() {
        let s = ModelSpec::zeros(1, 1, 1.0);
        let r = s.validate().unwrap();
        assert!(!r.strict_pass);
        assert!(r.permissive_pass);
        assert!(ValidatedModel::new(&s, ValidationMode::Strict).is_err());
        assert!(ValidatedModel::new(&s, ValidationMode::Permissive).is_ok());
    }

    #[test]
    fn hard_errors() {
        let mut s = base();
        s.b = TimeFunction::constant(Mat::zeros(2, 1));
        assert!(matches!(s.validate(), Err(ModelError::Dimension { .. })));
        let mut s = ModelSpec::zeros(2, 1, 1.0);
        s.q = TimeFunction::constant(Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]));
        assert!(matches!(s.validate(), Err(ModelError::Asymmetric { .. })));
    }

    #[test]
    fn coefficient_evaluation_is_right_continuous() {
        let mut s = base();
        s.a = TimeFunction::Piecewise {
            mesh: vec![0.0, 0.5, 1.0],
            values: vec![scalar_mat(1.0), scalar_mat(3.0)],
        };
        assert_eq!(s.coeff_at(0.25).unwrap().a[(0, 0)], 1.0);
        assert_eq!(s.coeff_at(0.5).unwrap().a[(0, 0)], 3.0);
        assert_eq!(s.coeff_at(1.0).unwrap().a[(0, 0)], 3.0);
        assert!(matches!(s.coeff_at(1.5), Err(ModelError::TimeRange { .. })));
        s.a = TimeFunction::constant(scalar_mat(2.0));
        assert_eq!(s.coeff_at(0.77).unwrap().a[(0, 0)], 2.0);
    }

    #[test]
    fn grid_slices_require_breakpoints_on_grid() {
        let mut s = base();
        s.a = TimeFunction::Piecewise {
            mesh: vec![0.0, 0.5, 1.0],
            values: vec![scalar_mat(1.0), scalar_mat(3.0)],
        };
        let slices = s.slices_on_grid(4).unwrap();
        let vals: Vec<f64> = slices.iter().map(|c| c.a[(0, 0)]).collect();
        assert_eq!(vals, vec![1.0, 1.0, 3.0, 3.0, 3.0]);
        assert!(s.slices_on_grid(3).is_err());
    }

    #[test]
    fn json_round_trip() {
        let text = r#"{
            "n": 2, "m": 1, "T": 1.0,
            "A": {"mesh": [0, 0.5, 1], "values": [[[0, 1], [-1, 0]], [[1, 0], [0, 1]]]},
            "B": [[1], [0.5]],
            "sigma": [0.1, 0.2],
            "Q": [[1, 0], [0, 1]], "L": [[1, 0], [0, 1]], "R": 2, "G": [[1, 0], [0, 1]],
            "x0": [1, -1],
            "control_set": {"kind": "box", "lo": [-1], "hi": [1]}
        }"#;
        let spec = ModelSpec::from_json_str(text).unwrap();
        assert_eq!(spec.b.at(0.0), &Mat::from_row_slice(2, 1, &[1.0, 0.5]));
        assert_eq!(spec.coeff_at(0.7).unwrap().a, Mat::identity(2, 2));
        assert_eq!(spec.control_set.kind(), "box");
        let again = ModelSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(spec, again);
        assert!(spec.validate().unwrap().strict_pass);
    }

    #[test]
    fn json_rejects_bad_shapes() {
        let bad = r#"{"n": 2, "m": 1, "T": 1.0, "A": 3.0, "R": 1}"#;
        assert!(matches!(ModelSpec::from_json_str(bad), Err(ModelError::Dimension { .. })));
        let bad = r#"{"n": 1, "m": 1, "T": 1.0, "R": 1, "Z": 1}"#;
        assert!(matches!(ModelSpec::from_json_str(bad), Err(ModelError::Parse(_))));
        let bad = r#"{"n": 1, "m": 1, "T": 1.0, "R": 1, "A": {"mesh": [0, 2], "values": [1]}}"#;
        assert!(matches!(ModelSpec::from_json_str(bad), Err(ModelError::Mesh { .. })));
    }
}
