//! Problem data for the backward large-population game.
//!
//! Each agent `i` controls the backward state
//! `dxᵢ = (A xᵢ + B uᵢ) dt + Σⱼ zᵢⱼ dWⱼ`, `xᵢ(T) = ξᵢ`, and pays
//!
//! ```text
//! Jᵢ = ½ E[ ∫ ‖xᵢ − Γ₁x⁽ᴺ⁾ − η₁‖²_Q + ‖uᵢ‖²_R + Σⱼ ‖zᵢⱼ‖²_{Sⱼ} dt
//!          + ‖xᵢ(0) − Γ₀x⁽ᴺ⁾(0) − η₀‖²_G ]
//! ```
//!
//! with `x⁽ᴺ⁾` the population average. Time-varying coefficients are tables
//! on the simulation grid, constant on each grid interval.

use std::fmt;
use std::sync::Arc;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Scalar;

/// Eigenvalue floor below which `R` is rejected.
pub const PD_TOLERANCE: f64 = 1e-10;
/// Eigenvalue floor below which `Q`, `Sⱼ`, `G` are rejected.
pub const PSD_TOLERANCE: f64 = -1e-10;
/// Default number of grid steps on `[0, 1]`.
pub const DEFAULT_STEPS: usize = 200;

/// Uniform grid `0 = t₀ < … < t_steps = T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid<T> {
    horizon: T,
    steps: usize,
}

impl<T: Scalar> TimeGrid<T> {
    pub fn new(horizon: T, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig("time grid needs at least one step".into()));
        }
        if !(horizon > T::zero()) || !horizon.is_finite() {
            return Err(Error::InvalidConfig(format!("horizon must be positive and finite, got {horizon}")));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn h(&self) -> T {
        self.horizon / T::of_usize(self.steps)
    }

    pub fn t(&self, m: usize) -> T {
        if m == self.steps {
            self.horizon
        } else {
            self.h() * T::of_usize(m)
        }
    }

    pub fn times(&self) -> Vec<T> {
        (0..=self.steps).map(|m| self.t(m)).collect()
    }

    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        Self::new(self.horizon, steps)
    }

    /// Trapezoid rule over node values.
    pub fn trapezoid(&self, values: impl IntoIterator<Item = T>) -> T {
        let half = T::of(0.5);
        let mut acc = T::zero();
        for (m, v) in values.into_iter().enumerate() {
            let w = if m == 0 || m == self.steps { half } else { T::one() };
            acc += w * v;
        }
        acc * self.h()
    }
}

/// Coefficient table: one matrix for all time, or one per grid node.
///
/// On grid interval `[t_m, t_{m+1})` the value at node `m` is used.
#[derive(Clone, Debug, PartialEq)]
pub enum Table<T> {
    Constant(Mat<T>),
    PerNode(Vec<Mat<T>>),
}

impl<T: Scalar> Table<T> {
    pub fn constant(m: Mat<T>) -> Self {
        Table::Constant(m)
    }

    pub fn at(&self, node: usize) -> &Mat<T> {
        match self {
            Table::Constant(m) => m,
            Table::PerNode(v) => &v[node.min(v.len() - 1)],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Table::Constant(m) => m.shape(),
            Table::PerNode(v) => v.first().map(|m| m.shape()).unwrap_or((0, 0)),
        }
    }

    fn entries(&self) -> Box<dyn Iterator<Item = (usize, &Mat<T>)> + '_> {
        match self {
            Table::Constant(m) => Box::new(std::iter::once((0, m))),
            Table::PerNode(v) => Box::new(v.iter().enumerate()),
        }
    }

    fn check(&self, field: &str, shape: (usize, usize), steps: usize) -> Result<()> {
        if let Table::PerNode(v) = self {
            if v.len() != steps + 1 {
                return Err(Error::DimensionMismatch {
                    field: field.into(),
                    detail: format!("table has {} nodes, grid has {}", v.len(), steps + 1),
                });
            }
        }
        for (node, m) in self.entries() {
            if m.shape() != shape {
                return Err(Error::DimensionMismatch {
                    field: field.into(),
                    detail: format!("expected {}×{}, found {}×{} at node {node}", shape.0, shape.1, m.rows(), m.cols()),
                });
            }
            if !m.is_finite() {
                return Err(Error::NonfiniteEntry { field: field.into(), node });
            }
        }
        Ok(())
    }

    fn check_definite(&self, name: &str, floor: f64, requirement: &'static str) -> Result<()> {
        for (node, m) in self.entries() {
            let ev = m.min_sym_eigenvalue().as_f64();
            let ok = if floor > 0.0 { ev > floor } else { ev >= floor };
            if !ok {
                return Err(Error::IndefiniteWeight {
                    matrix: name.into(),
                    node,
                    requirement,
                    min_eigenvalue: ev,
                });
            }
        }
        Ok(())
    }
}

/// Evaluator applied to an agent's own discrete Brownian path `Wᵢ(t₀..t_steps)`.
pub type PathEvaluator<T> = Arc<dyn Fn(&[T]) -> Vec<T> + Send + Sync>;

/// Terminal datum `ξᵢ`. Every class reads only the agent's own driver `Wᵢ`.
#[derive(Clone)]
pub enum TerminalSpec<T> {
    Deterministic { c: Vec<T> },
    /// `ξᵢ = c + D·Wᵢ(T)` with `D` an n-vector loading.
    GaussianAffine { c: Vec<T>, d: Vec<T> },
    PathFunctional { name: String, eval: PathEvaluator<T> },
}

impl<T: fmt::Debug> fmt::Debug for TerminalSpec<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TerminalSpec::Deterministic { c } => f.debug_struct("Deterministic").field("c", c).finish(),
            TerminalSpec::GaussianAffine { c, d } => {
                f.debug_struct("GaussianAffine").field("c", c).field("d", d).finish()
            }
            TerminalSpec::PathFunctional { name, .. } => f.debug_struct("PathFunctional").field("name", name).finish(),
        }
    }
}

impl<T: Scalar> TerminalSpec<T> {
    pub fn class_name(&self) -> &'static str {
        match self {
            TerminalSpec::Deterministic { .. } => "deterministic",
            TerminalSpec::GaussianAffine { .. } => "gaussian_affine",
            TerminalSpec::PathFunctional { .. } => "path_functional",
        }
    }

    /// Evaluates `ξ` on one discrete Brownian path (node values, `W(0) = 0`).
    pub fn evaluate(&self, path: &[T]) -> Vec<T> {
        match self {
            TerminalSpec::Deterministic { c } => c.clone(),
            TerminalSpec::GaussianAffine { c, d } => {
                let w = *path.last().expect("nonempty path");
                c.iter().zip(d).map(|(&ci, &di)| ci + di * w).collect()
            }
            TerminalSpec::PathFunctional { eval, .. } => eval(path),
        }
    }

    /// `(c, D)` when the datum is affine in `Wᵢ(T)`.
    pub fn affine_parts(&self, n: usize) -> Option<(Vec<T>, Vec<T>)> {
        match self {
            TerminalSpec::Deterministic { c } => Some((c.clone(), vec![T::zero(); n])),
            TerminalSpec::GaussianAffine { c, d } => Some((c.clone(), d.clone())),
            TerminalSpec::PathFunctional { .. } => None,
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        let bad = |what: &str, len: usize| Error::DimensionMismatch {
            field: format!("terminal.{what}"),
            detail: format!("expected length {n}, found {len}"),
        };
        match self {
            TerminalSpec::Deterministic { c } => {
                if c.len() != n {
                    return Err(bad("c", c.len()));
                }
            }
            TerminalSpec::GaussianAffine { c, d } => {
                if c.len() != n {
                    return Err(bad("c", c.len()));
                }
                if d.len() != n {
                    return Err(bad("D", d.len()));
                }
            }
            TerminalSpec::PathFunctional { .. } => {}
        }
        let finite = match self {
            TerminalSpec::Deterministic { c } => c.iter().all(|v| v.is_finite()),
            TerminalSpec::GaussianAffine { c, d } => c.iter().chain(d).all(|v| v.is_finite()),
            TerminalSpec::PathFunctional { .. } => true,
        };
        if !finite {
            return Err(Error::NonfiniteEntry { field: "terminal".into(), node: 0 });
        }
        Ok(())
    }
}

/// Per-driver running weights on `zᵢⱼ`.
#[derive(Clone, Debug, PartialEq)]
pub enum DriverWeights<T> {
    Shared(Table<T>),
    PerDriver(Vec<Table<T>>),
}

impl<T: Scalar> DriverWeights<T> {
    pub fn get(&self, j: usize) -> &Table<T> {
        match self {
            DriverWeights::Shared(t) => t,
            DriverWeights::PerDriver(v) => &v[j],
        }
    }

    pub fn is_shared(&self) -> bool {
        matches!(self, DriverWeights::Shared(_))
    }
}

#[derive(Clone, Debug)]
pub struct ModelSpec<T> {
    pub n: usize,
    pub k: usize,
    pub agents: usize,
    pub horizon: T,
    pub steps: usize,
    pub a: Table<T>,
    pub b: Table<T>,
    pub q: Table<T>,
    pub r: Table<T>,
    pub s: DriverWeights<T>,
    pub g: Mat<T>,
    pub gamma0: Mat<T>,
    pub gamma1: Table<T>,
    pub eta0: Vec<T>,
    /// n×1 per node.
    pub eta1: Table<T>,
    pub terminal: TerminalSpec<T>,
    pub seed: u64,
    pub replications: usize,
}

impl<T: Scalar> ModelSpec<T> {
    /// Scalar benchmark: `A=0.1, B=2, Q=1, R=5, G=2, Γ₁=0.5, η₁=1, Γ₀=1,
    /// η₀=1, Sⱼ=1, T=1, N=300, ξᵢ=Wᵢ(T)`.
    pub fn reference_scalar() -> Self {
        let s = |v: f64| Table::Constant(Mat::scalar(T::of(v)));
        ModelSpec {
            n: 1,
            k: 1,
            agents: 300,
            horizon: T::one(),
            steps: DEFAULT_STEPS,
            a: s(0.1),
            b: s(2.0),
            q: s(1.0),
            r: s(5.0),
            s: DriverWeights::Shared(s(1.0)),
            g: Mat::scalar(T::of(2.0)),
            gamma0: Mat::scalar(T::one()),
            gamma1: s(0.5),
            eta0: vec![T::one()],
            eta1: s(1.0),
            terminal: TerminalSpec::GaussianAffine { c: vec![T::zero()], d: vec![T::one()] },
            seed: 42,
            replications: 1,
        }
    }

    pub fn grid(&self) -> Result<TimeGrid<T>> {
        TimeGrid::new(self.horizon, self.steps)
    }

    pub fn with_agents(mut self, agents: usize) -> Self {
        self.agents = agents;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    /// Zeroes both coupling matrices.
    pub fn uncoupled(mut self) -> Self {
        self.gamma0 = Mat::zeros(self.n, self.n);
        self.gamma1 = Table::Constant(Mat::zeros(self.n, self.n));
        self
    }

    pub fn validate(self) -> Result<ValidatedModel<T>> {
        validate_model(self)
    }
}

/// A model that passed [`validate_model`].
#[derive(Clone, Debug)]
pub struct ValidatedModel<T> {
    spec: ModelSpec<T>,
    grid: TimeGrid<T>,
    gain: Table<T>,
}

impl<T: Scalar> ValidatedModel<T> {
    pub fn spec(&self) -> &ModelSpec<T> {
        &self.spec
    }

    pub fn grid(&self) -> TimeGrid<T> {
        self.grid
    }

    pub fn n(&self) -> usize {
        self.spec.n
    }

    pub fn agents(&self) -> usize {
        self.spec.agents
    }

    pub fn into_spec(self) -> ModelSpec<T> {
        self.spec
    }

    /// Re-validates with a different population size.
    pub fn with_agents(&self, agents: usize) -> Result<Self> {
        validate_model(self.spec.clone().with_agents(agents))
    }

    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        validate_model(self.spec.clone().with_steps(steps))
    }

    /// `B R⁻¹ Bᵀ` at a node.
    pub fn control_gain(&self, node: usize) -> &Mat<T> {
        self.gain.at(node)
    }

    /// `R⁻¹ Bᵀ` at a node, the feedback map from adjoint to control.
    pub fn feedback(&self, node: usize) -> Mat<T> {
        let rinv = self.spec.r.at(node).inverse().expect("validated R is invertible");
        &rinv * &self.spec.b.at(node).transpose()
    }
}

/// Checks dimensions, finiteness and the definiteness assumptions
/// (`R ≻ 0`, `Q, Sⱼ, G ⪰ 0`).
pub fn validate_model<T: Scalar>(spec: ModelSpec<T>) -> Result<ValidatedModel<T>> {
    let (n, k) = (spec.n, spec.k);
    if n == 0 || k == 0 {
        return Err(Error::DimensionMismatch { field: "n/k".into(), detail: "dimensions must be positive".into() });
    }
    if spec.agents == 0 {
        return Err(Error::InvalidConfig("population size N must be at least 1".into()));
    }
    let grid = TimeGrid::new(spec.horizon, spec.steps)?;
    let steps = spec.steps;
    spec.a.check("A", (n, n), steps)?;
    spec.b.check("B", (n, k), steps)?;
    spec.q.check("Q", (n, n), steps)?;
    spec.r.check("R", (k, k), steps)?;
    spec.gamma1.check("Gamma1", (n, n), steps)?;
    spec.eta1.check("eta1", (n, 1), steps)?;
    match &spec.s {
        DriverWeights::Shared(t) => t.check("S", (n, n), steps)?,
        DriverWeights::PerDriver(v) => {
            if v.len() != spec.agents {
                return Err(Error::DimensionMismatch {
                    field: "S".into(),
                    detail: format!("{} per-driver weights for N = {}", v.len(), spec.agents),
                });
            }
            for (j, t) in v.iter().enumerate() {
                t.check(&format!("S[{j}]"), (n, n), steps)?;
            }
        }
    }
    let fixed = [("G", &spec.g), ("Gamma0", &spec.gamma0)];
    for (name, m) in fixed {
        if m.shape() != (n, n) {
            return Err(Error::DimensionMismatch {
                field: name.into(),
                detail: format!("expected {n}×{n}, found {}×{}", m.rows(), m.cols()),
            });
        }
        if !m.is_finite() {
            return Err(Error::NonfiniteEntry { field: name.into(), node: 0 });
        }
    }
    if spec.eta0.len() != n {
        return Err(Error::DimensionMismatch {
            field: "eta0".into(),
            detail: format!("expected length {n}, found {}", spec.eta0.len()),
        });
    }
    if !spec.eta0.iter().all(|v| v.is_finite()) || !spec.horizon.is_finite() {
        return Err(Error::NonfiniteEntry { field: "eta0".into(), node: 0 });
    }
    spec.terminal.check(n)?;

    spec.r.check_definite("R", PD_TOLERANCE, "positive definite")?;
    spec.q.check_definite("Q", PSD_TOLERANCE, "positive semidefinite")?;
    match &spec.s {
        DriverWeights::Shared(t) => t.check_definite("S", PSD_TOLERANCE, "positive semidefinite")?,
        DriverWeights::PerDriver(v) => {
            for (j, t) in v.iter().enumerate() {
                t.check_definite(&format!("S[{j}]"), PSD_TOLERANCE, "positive semidefinite")?;
            }
        }
    }
    Table::Constant(spec.g.clone()).check_definite("G", PSD_TOLERANCE, "positive semidefinite")?;
    let gain_at = |node: usize| {
        let b = spec.b.at(node);
        let rinv = spec.r.at(node).inverse().expect("validated R is invertible");
        &(b * &rinv) * &b.transpose()
    };
    let gain = match (&spec.b, &spec.r) {
        (Table::Constant(_), Table::Constant(_)) => Table::Constant(gain_at(0)),
        _ => Table::PerNode((0..=steps).map(gain_at).collect()),
    };
    Ok(ValidatedModel { spec, grid, gain })
}

// ---------------------------------------------------------------------------
// JSON model files

fn depth(v: &Value) -> usize {
    match v {
        Value::Array(a) => 1 + a.first().map(depth).unwrap_or(0),
        _ => 0,
    }
}

fn number<T: Scalar>(v: &Value, field: &str) -> Result<T> {
    v.as_f64()
        .map(T::of)
        .ok_or_else(|| Error::DimensionMismatch { field: field.into(), detail: format!("expected a number, found {v}") })
}

fn vector<T: Scalar>(v: &Value, field: &str) -> Result<Vec<T>> {
    match v {
        Value::Number(_) => Ok(vec![number(v, field)?]),
        Value::Array(a) => a.iter().map(|x| number(x, field)).collect(),
        _ => Err(Error::DimensionMismatch { field: field.into(), detail: "expected a vector".into() }),
    }
}

fn matrix<T: Scalar>(v: &Value, field: &str) -> Result<Mat<T>> {
    match depth(v) {
        0 => Ok(Mat::scalar(number(v, field)?)),
        2 => {
            let rows = v.as_array().unwrap();
            let cols = rows[0].as_array().map(|r| r.len()).unwrap_or(0);
            let mut data = Vec::with_capacity(rows.len() * cols);
            for row in rows {
                let row = row.as_array().unwrap();
                if row.len() != cols {
                    return Err(Error::DimensionMismatch { field: field.into(), detail: "ragged matrix rows".into() });
                }
                for x in row {
                    data.push(number(x, field)?);
                }
            }
            Ok(Mat::from_row_major(rows.len(), cols, data))
        }
        d => Err(Error::DimensionMismatch { field: field.into(), detail: format!("expected a matrix, found nesting depth {d}") }),
    }
}

fn matrix_table<T: Scalar>(v: &Value, field: &str) -> Result<Table<T>> {
    match depth(v) {
        0 | 2 => Ok(Table::Constant(matrix(v, field)?)),
        3 => v.as_array().unwrap().iter().map(|m| matrix(m, field)).collect::<Result<_>>().map(Table::PerNode),
        d => Err(Error::DimensionMismatch { field: field.into(), detail: format!("unexpected nesting depth {d}") }),
    }
}

fn vector_table<T: Scalar>(v: &Value, field: &str) -> Result<Table<T>> {
    match depth(v) {
        0 | 1 => Ok(Table::Constant(Mat::col(&vector(v, field)?))),
        2 => v
            .as_array()
            .unwrap()
            .iter()
            .map(|x| vector(x, field).map(|c| Mat::col(&c)))
            .collect::<Result<_>>()
            .map(Table::PerNode),
        d => Err(Error::DimensionMismatch { field: field.into(), detail: format!("unexpected nesting depth {d}") }),
    }
}

fn field<'a>(doc: &'a Value, key: &str) -> Result<&'a Value> {
    doc.get(key).ok_or_else(|| Error::InvalidConfig(format!("model file is missing key `{key}`")))
}

fn usize_field(doc: &Value, key: &str) -> Result<usize> {
    field(doc, key)?
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| Error::InvalidConfig(format!("`{key}` must be a nonnegative integer")))
}

impl<T: Scalar> ModelSpec<T> {
    /// Parses the JSON model document. Matrices are row-major nested arrays;
    /// tables are either one matrix or `steps + 1` matrices; a bare number is
    /// a 1×1 matrix.
    pub fn from_json(doc: &Value) -> Result<Self> {
        let n = usize_field(doc, "n")?;
        let k = usize_field(doc, "k")?;
        let agents = usize_field(doc, "N")?;
        let horizon = number(field(doc, "T")?, "T")?;
        let steps = match doc.get("steps") {
            Some(v) => v.as_u64().map(|v| v as usize).ok_or_else(|| Error::InvalidConfig("`steps` must be an integer".into()))?,
            None => DEFAULT_STEPS,
        };
        let s_val = field(doc, "S")?;
        let s = match s_val.get("per_driver") {
            Some(list) => DriverWeights::PerDriver(
                list.as_array()
                    .ok_or_else(|| Error::InvalidConfig("`S.per_driver` must be an array".into()))?
                    .iter()
                    .enumerate()
                    .map(|(j, t)| matrix_table(t, &format!("S[{j}]")))
                    .collect::<Result<_>>()?,
            ),
            None => DriverWeights::Shared(matrix_table(s_val, "S")?),
        };
        let term = field(doc, "terminal")?;
        let kind = term.get("kind").and_then(Value::as_str).unwrap_or("");
        let terminal = match kind {
            "deterministic" => TerminalSpec::Deterministic { c: vector(field(term, "c")?, "terminal.c")? },
            "gaussian_affine" => TerminalSpec::GaussianAffine {
                c: vector(field(term, "c")?, "terminal.c")?,
                d: vector(field(term, "D")?, "terminal.D")?,
            },
            other => return Err(Error::InvalidConfig(format!("unknown terminal kind `{other}`"))),
        };
        Ok(ModelSpec {
            n,
            k,
            agents,
            horizon,
            steps,
            a: matrix_table(field(doc, "A")?, "A")?,
            b: matrix_table(field(doc, "B")?, "B")?,
            q: matrix_table(field(doc, "Q")?, "Q")?,
            r: matrix_table(field(doc, "R")?, "R")?,
            s,
            g: matrix(field(doc, "G")?, "G")?,
            gamma0: matrix(field(doc, "Gamma0")?, "Gamma0")?,
            gamma1: matrix_table(field(doc, "Gamma1")?, "Gamma1")?,
            eta0: vector(field(doc, "eta0")?, "eta0")?,
            eta1: vector_table(field(doc, "eta1")?, "eta1")?,
            terminal,
            seed: doc.get("seed").and_then(Value::as_u64).unwrap_or(0),
            replications: doc.get("replications").and_then(Value::as_u64).map(|v| v as usize).unwrap_or(1),
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("model JSON: {e}")))?;
        Self::from_json(&doc)
    }

    /// Serializes back to the model-file layout. Path-functional terminals
    /// have no file representation.
    pub fn to_json(&self) -> Result<Value> {
        fn mat<T: Scalar>(m: &Mat<T>) -> Value {
            Value::Array(
                (0..m.rows())
                    .map(|r| Value::Array((0..m.cols()).map(|c| json!(m[(r, c)].as_f64())).collect()))
                    .collect(),
            )
        }
        fn table<T: Scalar>(t: &Table<T>) -> Value {
            match t {
                Table::Constant(m) => mat(m),
                Table::PerNode(v) => Value::Array(v.iter().map(mat).collect()),
            }
        }
        fn vec_of<T: Scalar>(v: &[T]) -> Value {
            Value::Array(v.iter().map(|x| json!(x.as_f64())).collect())
        }
        fn vtable<T: Scalar>(t: &Table<T>) -> Value {
            match t {
                Table::Constant(m) => vec_of(m.as_slice()),
                Table::PerNode(v) => Value::Array(v.iter().map(|m| vec_of(m.as_slice())).collect()),
            }
        }
        let terminal = match &self.terminal {
            TerminalSpec::Deterministic { c } => json!({"kind": "deterministic", "c": vec_of(c)}),
            TerminalSpec::GaussianAffine { c, d } => json!({"kind": "gaussian_affine", "c": vec_of(c), "D": vec_of(d)}),
            TerminalSpec::PathFunctional { name, .. } => {
                return Err(Error::InvalidConfig(format!("path-functional terminal `{name}` cannot be serialized")))
            }
        };
        let s = match &self.s {
            DriverWeights::Shared(t) => table(t),
            DriverWeights::PerDriver(v) => json!({"per_driver": v.iter().map(table).collect::<Vec<_>>()}),
        };
        Ok(json!({
            "n": self.n, "k": self.k, "N": self.agents, "T": self.horizon.as_f64(), "steps": self.steps,
            "A": table(&self.a), "B": table(&self.b), "Q": table(&self.q), "R": table(&self.r),
            "S": s, "G": mat(&self.g), "Gamma0": mat(&self.gamma0), "Gamma1": table(&self.gamma1),
            "eta0": vec_of(&self.eta0), "eta1": vtable(&self.eta1), "terminal": terminal,
            "seed": self.seed, "replications": self.replications,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type M = ModelSpec<f64>;

    #[test]
    fn reference_model_is_valid() {
        let v = M::reference_scalar().validate().unwrap();
        assert_eq!(v.agents(), 300);
        assert_eq!(v.grid().steps(), 200);
        assert!((v.control_gain(0)[(0, 0)] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_control_weight_is_rejected() {
        let mut m = M::reference_scalar();
        m.r = Table::Constant(Mat::scalar(0.0));
        match m.validate() {
            Err(Error::IndefiniteWeight { matrix, node, .. }) => {
                assert_eq!(matrix, "R");
                assert_eq!(node, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wide_b_is_a_dimension_mismatch() {
        let mut m = M::reference_scalar();
        m.b = Table::Constant(Mat::from_row_major(1, 2, vec![2.0, 1.0]));
        match m.validate() {
            Err(Error::DimensionMismatch { field, .. }) => assert_eq!(field, "B"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn failing_node_is_reported() {
        let mut m = M::reference_scalar().with_steps(4);
        let mut q: Vec<_> = (0..5).map(|_| Mat::scalar(1.0)).collect();
        q[3] = Mat::scalar(-0.5);
        m.q = Table::PerNode(q);
        match m.validate() {
            Err(Error::IndefiniteWeight { matrix, node, .. }) => assert_eq!((matrix.as_str(), node), ("Q", 3)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nonfinite_entry() {
        let mut m = M::reference_scalar();
        m.a = Table::Constant(Mat::scalar(f64::NAN));
        assert!(matches!(m.validate(), Err(Error::NonfiniteEntry { .. })));
    }

    #[test]
    fn per_node_table_length_checked() {
        let mut m = M::reference_scalar().with_steps(4);
        m.a = Table::PerNode(vec![Mat::scalar(0.1); 3]);
        assert!(matches!(m.validate(), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn validation_is_idempotent() {
        let once = M::reference_scalar().validate().unwrap();
        let twice = once.clone().into_spec().validate().unwrap();
        assert_eq!(once.spec().to_json().unwrap(), twice.spec().to_json().unwrap());
    }

    #[test]
    fn json_roundtrip() {
        let m = M::reference_scalar();
        let doc = m.to_json().unwrap();
        let back = M::from_json(&doc).unwrap();
        assert_eq!(back.to_json().unwrap(), doc);
        back.validate().unwrap();
    }

    #[test]
    fn json_scalar_shorthand_and_tables() {
        let text = r#"{"n":1,"k":1,"N":3,"T":1.0,"steps":2,"A":[[[0.1]],[[0.2]],[[0.3]]],"B":2,"Q":1,
            "R":[[5]],"S":{"per_driver":[1,1,2]},"G":2,"Gamma0":1,"Gamma1":0.5,"eta0":[1],
            "eta1":[[1],[1],[0.5]],"terminal":{"kind":"deterministic","c":[5]},"seed":7,"replications":2}"#;
        let m = M::from_json_str(text).unwrap().validate().unwrap();
        assert_eq!(m.spec().a.at(2)[(0, 0)], 0.3);
        assert_eq!(m.spec().s.get(2).at(0)[(0, 0)], 2.0);
        assert_eq!(m.spec().eta1.at(2)[(0, 0)], 0.5);
        assert_eq!(m.spec().seed, 7);
    }

    #[test]
    fn terminal_sampling_definitions() {
        let t = TerminalSpec::GaussianAffine { c: vec![0.0], d: vec![1.0] };
        assert_eq!(t.evaluate(&[0.0, 0.2, 0.37]), vec![0.37]);
        let det = TerminalSpec::Deterministic { c: vec![5.0] };
        assert_eq!(det.evaluate(&[0.0, -3.0]), vec![5.0]);
    }

    #[test]
    fn trapezoid_integrates_linear_exactly() {
        let g = TimeGrid::new(2.0f64, 8).unwrap();
        let v = g.trapezoid(g.times().into_iter().map(|t| 3.0 * t + 1.0));
        assert!((v - 8.0).abs() < 1e-14);
    }
}
