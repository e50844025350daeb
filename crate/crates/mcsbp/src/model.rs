//! Branching-mechanism data for multi-type continuous-state branching
//! processes and the evaluations everything else is built on.
//!
//! A model pairs, for every type `i`, a local mechanism
//!
//! ```text
//! psi(i, z) = b(i) z + c(i) z^2 + sum_atoms m (e^{-z u} - 1 + z u)
//! ```
//!
//! with a non-local mechanism
//!
//! ```text
//! phi(i, f) = -beta(i) [ d(i) <f, pi_i> + sum_atoms m (1 - e^{-u <f, pi_i>}) ]
//! ```
//!
//! where `pi_i` is a placement row on the other types. Levy-type measures
//! are finite atomic measures, so every evaluation here is an exact closed
//! form. Type spaces are either finite or a countable homogeneous family
//! resolved lazily through a placement kernel.

use serde::Deserialize;
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("type index {0} cannot be resolved by this model")]
    InvalidType(usize),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("malformed model: {0}")]
    Malformed(String),
    #[error("model file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file parse: {0}")]
    Parse(#[from] serde_json::Error),
}

/// 1-based label of a population type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TypeIndex(usize);

impl TypeIndex {
    pub fn new(index: usize) -> Result<Self, ModelError> {
        if index == 0 {
            return Err(ModelError::Domain("type indices are 1-based".into()));
        }
        Ok(TypeIndex(index))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

impl fmt::Display for TypeIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Finite atomic measure on (0, infinity), kept in canonical form:
/// locations strictly increasing, duplicate locations merged at
/// construction, all weights positive.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AtomicMeasure {
    atoms: Vec<(f64, f64)>,
}

impl AtomicMeasure {
    pub fn empty() -> Self {
        Self { atoms: Vec::new() }
    }

    /// Build from (location, weight) pairs; sorts and merges duplicates.
    pub fn new(pairs: &[(f64, f64)]) -> Result<Self, ModelError> {
        let mut atoms: Vec<(f64, f64)> = Vec::with_capacity(pairs.len());
        for &(u, m) in pairs {
            if !(u > 0.0) || !u.is_finite() {
                return Err(ModelError::Malformed(format!(
                    "atom location {u} must be positive and finite"
                )));
            }
            if !(m > 0.0) || !m.is_finite() {
                return Err(ModelError::Malformed(format!(
                    "atom weight {m} must be positive and finite"
                )));
            }
            atoms.push((u, m));
        }
        atoms.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
        for (u, m) in atoms {
            match merged.last_mut() {
                Some(last) if last.0 == u => last.1 += m,
                _ => merged.push((u, m)),
            }
        }
        Ok(Self { atoms: merged })
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// `sum m * u`, the first moment.
    pub fn first_moment(&self) -> f64 {
        self.atoms.iter().map(|&(u, m)| u * m).sum::<f64>() + 0.0
    }

    /// `sum m * (u ∧ u^2)`, the boundedness functional of the kernel.
    pub fn min_u_u2_mass(&self) -> f64 {
        self.atoms.iter().map(|&(u, m)| m * u.min(u * u)).sum::<f64>() + 0.0
    }

    /// `sum_{u > 1} m * u * ln u`.
    pub fn xlogx_tail(&self) -> f64 {
        self.atoms
            .iter()
            .filter(|&&(u, _)| u > 1.0)
            .map(|&(u, m)| m * u * u.ln())
            .sum::<f64>()
            + 0.0
    }

    /// Scale all weights by `s` (used when merging `ell + beta * n`).
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            atoms: self.atoms.iter().map(|&(u, m)| (u, m * s)).collect(),
        }
    }

    /// Merge with another measure, adding weights at shared locations.
    pub fn merged(&self, other: &Self) -> Self {
        let mut pairs: Vec<(f64, f64)> = self.atoms.clone();
        pairs.extend_from_slice(&other.atoms);
        Self::new(&pairs).expect("merging canonical measures cannot fail")
    }
}

/// Local reproduction parameters of one type.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalParams {
    pub b: f64,
    pub c: f64,
    pub levy: AtomicMeasure,
}

/// Non-local seeding parameters of one type (placement kept separately).
#[derive(Debug, Clone, PartialEq)]
pub struct NonLocalParams {
    pub beta: f64,
    pub d: f64,
    pub njump: AtomicMeasure,
}

impl NonLocalParams {
    /// Effective non-local rate `a(i) = beta(i) (d(i) + sum u m)`.
    pub fn a(&self) -> f64 {
        self.beta * (self.d + self.njump.first_moment())
    }
}

/// Named placement rule for homogeneous families on a countable type space.
#[derive(Debug, Clone, PartialEq)]
pub enum PlacementKernel {
    /// Nearest-neighbour walk on the integers, jumping `+1` with
    /// probability `p` and `-1` with probability `1 - p`. Sites are
    /// enumerated into the 1-based type space by the zig-zag bijection
    /// `0, +1, -1, +2, -2, ...`, so truncations `[n]` are intervals and
    /// stay irreducible.
    PqWalk { p: f64 },
}

impl PlacementKernel {
    /// Placement row of type `i` (1-based), untruncated.
    pub fn row(&self, i: usize) -> Vec<(usize, f64)> {
        match *self {
            PlacementKernel::PqWalk { p } => {
                let site = zigzag_site(i);
                vec![
                    (zigzag_index(site + 1), p),
                    (zigzag_index(site - 1), 1.0 - p),
                ]
            }
        }
    }
}

/// Zig-zag enumeration: type 1 is site 0, even types are positive sites,
/// odd types (> 1) negative sites.
pub fn zigzag_site(index: usize) -> i64 {
    if index == 1 {
        0
    } else if index % 2 == 0 {
        (index / 2) as i64
    } else {
        -((index / 2) as i64)
    }
}

pub fn zigzag_index(site: i64) -> usize {
    if site == 0 {
        1
    } else if site > 0 {
        2 * site as usize
    } else {
        2 * (-site) as usize + 1
    }
}

/// Full mechanism specification. Immutable after construction; all
/// operations on it are pure.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    /// Explicit finite type space with per-type parameters and
    /// placement rows (1-based targets).
    Finite {
        local: Vec<LocalParams>,
        nonlocal: Vec<NonLocalParams>,
        pi: Vec<Vec<(usize, f64)>>,
    },
    /// Countable homogeneous family: identical parameters for every
    /// type, placement resolved by rule.
    Homogeneous {
        local: LocalParams,
        nonlocal: NonLocalParams,
        kernel: PlacementKernel,
    },
}

impl ModelSpec {
    /// Number of types for finite models, `None` for families.
    pub fn num_types(&self) -> Option<usize> {
        match self {
            ModelSpec::Finite { local, .. } => Some(local.len()),
            ModelSpec::Homogeneous { .. } => None,
        }
    }

    pub fn is_homogeneous(&self) -> bool {
        matches!(self, ModelSpec::Homogeneous { .. })
    }

    fn check_index(&self, i: usize) -> Result<(), ModelError> {
        if i == 0 {
            return Err(ModelError::InvalidType(i));
        }
        if let Some(m) = self.num_types() {
            if i > m {
                return Err(ModelError::InvalidType(i));
            }
        }
        Ok(())
    }

    pub fn local(&self, i: usize) -> Result<&LocalParams, ModelError> {
        self.check_index(i)?;
        Ok(match self {
            ModelSpec::Finite { local, .. } => &local[i - 1],
            ModelSpec::Homogeneous { local, .. } => local,
        })
    }

    pub fn nonlocal(&self, i: usize) -> Result<&NonLocalParams, ModelError> {
        self.check_index(i)?;
        Ok(match self {
            ModelSpec::Finite { nonlocal, .. } => &nonlocal[i - 1],
            ModelSpec::Homogeneous { nonlocal, .. } => nonlocal,
        })
    }

    /// Placement row of type `i`, untruncated, as 1-based (target, prob).
    pub fn pi_row(&self, i: usize) -> Result<Vec<(usize, f64)>, ModelError> {
        self.check_index(i)?;
        Ok(match self {
            ModelSpec::Finite { pi, .. } => pi[i - 1].clone(),
            ModelSpec::Homogeneous { kernel, .. } => kernel.row(i),
        })
    }

    /// Effective non-local rate `a(i)`.
    pub fn a(&self, i: usize) -> Result<f64, ModelError> {
        Ok(self.nonlocal(i)?.a())
    }

    /// Resolve a dense, killed view of the first `n` types. Placement
    /// mass aimed outside `[n]` is dropped without renormalisation.
    pub fn truncate(&self, n: usize) -> Result<TruncatedModel, ModelError> {
        if n == 0 {
            return Err(ModelError::Domain("truncation size must be >= 1".into()));
        }
        let n = match self.num_types() {
            Some(m) => n.min(m),
            None => n,
        };
        let mut tm = TruncatedModel {
            n,
            b: Vec::with_capacity(n),
            c: Vec::with_capacity(n),
            levy: Vec::with_capacity(n),
            beta: Vec::with_capacity(n),
            d: Vec::with_capacity(n),
            njump: Vec::with_capacity(n),
            a: Vec::with_capacity(n),
            rows: Vec::with_capacity(n),
            row_tail: Vec::with_capacity(n),
        };
        for i in 1..=n {
            let lp = self.local(i)?;
            let np = self.nonlocal(i)?;
            tm.b.push(lp.b);
            tm.c.push(lp.c);
            tm.levy.push(lp.levy.clone());
            tm.beta.push(np.beta);
            tm.d.push(np.d);
            tm.njump.push(np.njump.clone());
            tm.a.push(np.a());
            let mut row = Vec::new();
            let mut kept = 0.0;
            for (j, p) in self.pi_row(i)? {
                if j <= n {
                    row.push((j - 1, p));
                    kept += p;
                }
            }
            tm.rows.push(row);
            tm.row_tail.push((1.0 - kept).max(0.0));
        }
        Ok(tm)
    }
}

/// Vector over types with explicitly carried finite support
/// (1-based keys). Absent types evaluate to zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TypeVector {
    entries: BTreeMap<usize, f64>,
}

impl TypeVector {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: &[(usize, f64)]) -> Result<Self, ModelError> {
        let mut entries = BTreeMap::new();
        for &(i, v) in pairs {
            if i == 0 {
                return Err(ModelError::Domain("type indices are 1-based".into()));
            }
            if v != 0.0 {
                entries.insert(i, v);
            }
        }
        Ok(Self { entries })
    }

    /// `theta` on every type of `[n]`.
    pub fn constant(theta: f64, n: usize) -> Self {
        let mut entries = BTreeMap::new();
        if theta != 0.0 {
            for i in 1..=n {
                entries.insert(i, theta);
            }
        }
        Self { entries }
    }

    /// `theta * 1_A`.
    pub fn indicator(set: &[usize], theta: f64) -> Self {
        let mut entries = BTreeMap::new();
        if theta != 0.0 {
            for &i in set {
                entries.insert(i, theta);
            }
        }
        Self { entries }
    }

    pub fn get(&self, i: usize) -> f64 {
        self.entries.get(&i).copied().unwrap_or(0.0)
    }

    pub fn support(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries.iter().map(|(&i, &v)| (i, v))
    }

    pub fn max_support(&self) -> usize {
        self.entries.keys().next_back().copied().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    /// Dense values on `[n]` (0-based slot `i-1` holds type `i`).
    pub fn dense(&self, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        for (&i, &val) in &self.entries {
            if i <= n {
                v[i - 1] = val;
            }
        }
        v
    }

    pub fn from_dense(values: &[f64]) -> Self {
        let mut entries = BTreeMap::new();
        for (i0, &v) in values.iter().enumerate() {
            if v != 0.0 {
                entries.insert(i0 + 1, v);
            }
        }
        Self { entries }
    }

    /// `<f, mu> = sum_i f(i) mu(i)` against a dense vector on `[n]`.
    pub fn dot_dense(&self, dense: &[f64]) -> f64 {
        self.entries
            .iter()
            .filter(|(&i, _)| i <= dense.len())
            .map(|(&i, &v)| v * dense[i - 1])
            .sum()
    }
}

/// `psi(i, z)`; exact closed-form sum over the atoms of `ell(i)`.
pub fn eval_psi(model: &ModelSpec, i: usize, z: f64) -> Result<f64, ModelError> {
    if !(z >= 0.0) {
        return Err(ModelError::Domain(format!("psi requires z >= 0, got {z}")));
    }
    let lp = model.local(i)?;
    Ok(psi_params(lp, z))
}

pub(crate) fn psi_params(lp: &LocalParams, z: f64) -> f64 {
    let mut s = lp.b * z + lp.c * z * z;
    for &(u, m) in lp.levy.atoms() {
        s += m * ((-z * u).exp() - 1.0 + z * u);
    }
    s
}

/// `phi(i, f)`; requires `f >= 0` on the support of `pi_i`. Always `<= 0`.
pub fn eval_phi(model: &ModelSpec, i: usize, f: &TypeVector) -> Result<f64, ModelError> {
    let np = model.nonlocal(i)?;
    let mut y = 0.0;
    for (j, p) in model.pi_row(i)? {
        let fj = f.get(j);
        if fj < 0.0 {
            return Err(ModelError::Domain(format!(
                "phi requires f >= 0 on the placement support; f({j}) = {fj}"
            )));
        }
        y += p * fj;
    }
    Ok(phi_from_inner(np, y))
}

pub(crate) fn phi_from_inner(np: &NonLocalParams, y: f64) -> f64 {
    let mut s = np.d * y;
    for &(u, m) in np.njump.atoms() {
        s += m * (1.0 - (-u * y).exp());
    }
    -np.beta * s
}

/// `(sum_{u>1} m u ln u over ell(i), same over n(i))`.
pub fn xlogx_moment(model: &ModelSpec, i: usize) -> Result<(f64, f64), ModelError> {
    let lp = model.local(i)?;
    let np = model.nonlocal(i)?;
    Ok((lp.levy.xlogx_tail(), np.njump.xlogx_tail()))
}

/// One constraint violation found by [`validate_model`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// `pi_i(i)` must be zero.
    DiagonalNotZero { i: usize, value: f64 },
    /// Declared placement row must sum to one.
    RowSumNotOne { i: usize, sum: f64 },
    /// Negative placement probability.
    NegativeProbability { i: usize, j: usize, value: f64 },
    /// `d(i) + int u n(i, du) <= 1` fails.
    NonLocalMassTooLarge { i: usize, value: f64 },
    /// Non-finite or sign-violating scalar parameter.
    BadParameter { i: usize, what: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DiagonalNotZero { i, value } => {
                write!(f, "pi_{i}({i}) = {value}, must be 0")
            }
            Violation::RowSumNotOne { i, sum } => {
                write!(f, "row {i} of pi sums to {sum}, must be 1")
            }
            Violation::NegativeProbability { i, j, value } => {
                write!(f, "pi_{i}({j}) = {value} is negative")
            }
            Violation::NonLocalMassTooLarge { i, value } => {
                write!(f, "d({i}) + int u n({i}, du) = {value} exceeds 1")
            }
            Violation::BadParameter { i, what } => write!(f, "type {i}: {what}"),
        }
    }
}

/// Constraint report for the first `n` types. Collects violations
/// instead of aborting.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

const ROW_SUM_TOL: f64 = 1e-12;

/// Check the construction constraints on the truncation `[n]`:
/// zero placement diagonal, declared rows summing to one, the
/// non-local mass bound, and finiteness of `b`, `c`, `(u ∧ u^2) ell`.
pub fn validate_model(model: &ModelSpec, n: usize) -> Result<ValidationReport, ModelError> {
    if n == 0 {
        return Err(ModelError::Domain("truncation size must be >= 1".into()));
    }
    let upto = match model.num_types() {
        Some(m) => n.min(m),
        None => match model {
            // one representative type suffices for a homogeneous family,
            // but kernel rows are still checked across the truncation
            ModelSpec::Homogeneous { .. } => n,
            _ => unreachable!(),
        },
    };
    let mut report = ValidationReport::default();
    for i in 1..=upto {
        let lp = model.local(i)?;
        let np = model.nonlocal(i)?;
        if !lp.b.is_finite() {
            report.violations.push(Violation::BadParameter {
                i,
                what: format!("b = {} is not finite", lp.b),
            });
        }
        if !lp.c.is_finite() || lp.c < 0.0 {
            report.violations.push(Violation::BadParameter {
                i,
                what: format!("c = {} must be finite and >= 0", lp.c),
            });
        }
        if !lp.levy.min_u_u2_mass().is_finite() {
            report.violations.push(Violation::BadParameter {
                i,
                what: "(u ∧ u^2) ell mass is not finite".into(),
            });
        }
        if !np.beta.is_finite() || np.beta < 0.0 {
            report.violations.push(Violation::BadParameter {
                i,
                what: format!("beta = {} must be finite and >= 0", np.beta),
            });
        }
        if !np.d.is_finite() || np.d < 0.0 {
            report.violations.push(Violation::BadParameter {
                i,
                what: format!("d = {} must be finite and >= 0", np.d),
            });
        }
        let mass = np.d + np.njump.first_moment();
        if mass > 1.0 + ROW_SUM_TOL {
            report
                .violations
                .push(Violation::NonLocalMassTooLarge { i, value: mass });
        }
        let row = model.pi_row(i)?;
        let mut sum = 0.0;
        for &(j, p) in &row {
            if p < 0.0 {
                report
                    .violations
                    .push(Violation::NegativeProbability { i, j, value: p });
            }
            if j == i && p != 0.0 {
                report
                    .violations
                    .push(Violation::DiagonalNotZero { i, value: p });
            }
            sum += p;
        }
        // a type that never seeds non-locally may leave its row undeclared
        let row_unused = np.beta == 0.0 && row.is_empty();
        if !row_unused && (sum - 1.0).abs() > ROW_SUM_TOL {
            report.violations.push(Violation::RowSumNotOne { i, sum });
        }
    }
    Ok(report)
}

/// Dense, killed view of a model on `[n]`: parameters resolved per type,
/// placement rows restricted to `[n]` (0-based targets) with the dropped
/// tail mass recorded. This is the workhorse the integrators and the
/// generator assembly consume.
#[derive(Debug, Clone)]
pub struct TruncatedModel {
    pub n: usize,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub levy: Vec<AtomicMeasure>,
    pub beta: Vec<f64>,
    pub d: Vec<f64>,
    pub njump: Vec<AtomicMeasure>,
    /// `a(i) = beta(i) (d(i) + int u n(i, du))`.
    pub a: Vec<f64>,
    /// Killed placement rows: `(j0, p)` with `j0` 0-based, `j0 < n`.
    pub rows: Vec<Vec<(usize, f64)>>,
    /// Placement mass aimed outside `[n]` per type.
    pub row_tail: Vec<f64>,
}

impl TruncatedModel {
    pub fn psi(&self, i0: usize, z: f64) -> f64 {
        let mut s = self.b[i0] * z + self.c[i0] * z * z;
        for &(u, m) in self.levy[i0].atoms() {
            s += m * ((-z * u).exp() - 1.0 + z * u);
        }
        s
    }

    /// `<v, pi_i>` over the killed row.
    pub fn inner(&self, i0: usize, v: &[f64]) -> f64 {
        self.rows[i0].iter().map(|&(j0, p)| p * v[j0]).sum()
    }

    pub fn phi(&self, i0: usize, v: &[f64]) -> f64 {
        let y = self.inner(i0, v);
        let mut s = self.d[i0] * y;
        for &(u, m) in self.njump[i0].atoms() {
            s += m * (1.0 - (-u * y).exp());
        }
        -self.beta[i0] * s
    }

    /// Right-hand side of the cumulant evolution, `-(psi + phi)` per type.
    pub fn cumulant_rhs(&self, v: &[f64], out: &mut [f64]) {
        for i0 in 0..self.n {
            out[i0] = -(self.psi(i0, v[i0]) + self.phi(i0, v));
        }
    }
}

// ---------------------------------------------------------------------
// JSON model files
// ---------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    kind: String,
    #[serde(default)]
    types: Option<usize>,
    local: LocalFile,
    nonlocal: NonLocalFile,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LocalFile {
    b: serde_json::Value,
    c: serde_json::Value,
    levy: serde_json::Value,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NonLocalFile {
    beta: serde_json::Value,
    d: serde_json::Value,
    njump: serde_json::Value,
    pi: serde_json::Value,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelFile {
    kernel: String,
    p: f64,
}

fn scalar(v: &serde_json::Value, what: &str) -> Result<f64, ModelError> {
    v.as_f64()
        .ok_or_else(|| ModelError::Malformed(format!("{what}: expected a number")))
}

fn scalars(v: &serde_json::Value, m: usize, what: &str) -> Result<Vec<f64>, ModelError> {
    let arr = v
        .as_array()
        .ok_or_else(|| ModelError::Malformed(format!("{what}: expected an array")))?;
    if arr.len() != m {
        return Err(ModelError::Malformed(format!(
            "{what}: expected {m} entries, got {}",
            arr.len()
        )));
    }
    arr.iter().map(|x| scalar(x, what)).collect()
}

fn measure(v: &serde_json::Value, what: &str) -> Result<AtomicMeasure, ModelError> {
    let arr = v
        .as_array()
        .ok_or_else(|| ModelError::Malformed(format!("{what}: expected [[u, m], ...]")))?;
    let mut pairs = Vec::with_capacity(arr.len());
    for entry in arr {
        let pair = entry
            .as_array()
            .filter(|p| p.len() == 2)
            .ok_or_else(|| ModelError::Malformed(format!("{what}: atoms are [u, m] pairs")))?;
        pairs.push((scalar(&pair[0], what)?, scalar(&pair[1], what)?));
    }
    AtomicMeasure::new(&pairs)
}

fn measures(v: &serde_json::Value, m: usize, what: &str) -> Result<Vec<AtomicMeasure>, ModelError> {
    let arr = v
        .as_array()
        .ok_or_else(|| ModelError::Malformed(format!("{what}: expected per-type atom lists")))?;
    if arr.len() != m {
        return Err(ModelError::Malformed(format!(
            "{what}: expected {m} per-type lists, got {}",
            arr.len()
        )));
    }
    arr.iter().map(|x| measure(x, what)).collect()
}

fn pi_rows(v: &serde_json::Value, m: usize) -> Result<Vec<Vec<(usize, f64)>>, ModelError> {
    let arr = v
        .as_array()
        .ok_or_else(|| ModelError::Malformed("pi: expected per-type rows".into()))?;
    if arr.len() != m {
        return Err(ModelError::Malformed(format!(
            "pi: expected {m} rows, got {}",
            arr.len()
        )));
    }
    let mut rows = Vec::with_capacity(m);
    for row in arr {
        let entries = row
            .as_array()
            .ok_or_else(|| ModelError::Malformed("pi rows are [[j, p], ...]".into()))?;
        let mut out = Vec::with_capacity(entries.len());
        for e in entries {
            let pair = e
                .as_array()
                .filter(|p| p.len() == 2)
                .ok_or_else(|| ModelError::Malformed("pi entries are [j, p] pairs".into()))?;
            let j = pair[0]
                .as_u64()
                .ok_or_else(|| ModelError::Malformed("pi target must be a positive integer".into()))?;
            if j == 0 {
                return Err(ModelError::Malformed("pi targets are 1-based".into()));
            }
            out.push((j as usize, scalar(&pair[1], "pi")?));
        }
        rows.push(out);
    }
    Ok(rows)
}

/// Parse a model document. The schema is strict: unknown fields are
/// rejected at every level.
pub fn parse_model(text: &str) -> Result<ModelSpec, ModelError> {
    let file: ModelFile = serde_json::from_str(text)?;
    match file.kind.as_str() {
        "finite" => {
            let m = file.types.ok_or_else(|| {
                ModelError::Malformed("finite models need a \"types\" count".into())
            })?;
            if m == 0 {
                return Err(ModelError::Malformed("finite models need >= 1 type".into()));
            }
            let b = scalars(&file.local.b, m, "local.b")?;
            let c = scalars(&file.local.c, m, "local.c")?;
            let levy = measures(&file.local.levy, m, "local.levy")?;
            let beta = scalars(&file.nonlocal.beta, m, "nonlocal.beta")?;
            let d = scalars(&file.nonlocal.d, m, "nonlocal.d")?;
            let njump = measures(&file.nonlocal.njump, m, "nonlocal.njump")?;
            let pi = pi_rows(&file.nonlocal.pi, m)?;
            let local = (0..m)
                .map(|i| LocalParams {
                    b: b[i],
                    c: c[i],
                    levy: levy[i].clone(),
                })
                .collect();
            let nonlocal = (0..m)
                .map(|i| NonLocalParams {
                    beta: beta[i],
                    d: d[i],
                    njump: njump[i].clone(),
                })
                .collect();
            Ok(ModelSpec::Finite { local, nonlocal, pi })
        }
        "homogeneous" => {
            if file.types.is_some() {
                return Err(ModelError::Malformed(
                    "homogeneous models do not take a \"types\" count".into(),
                ));
            }
            let kf: KernelFile = serde_json::from_value(file.nonlocal.pi.clone())?;
            let kernel = match kf.kernel.as_str() {
                "pq-walk" => {
                    if !(kf.p > 0.0 && kf.p < 1.0) {
                        return Err(ModelError::Malformed(format!(
                            "pq-walk needs p in (0, 1), got {}",
                            kf.p
                        )));
                    }
                    PlacementKernel::PqWalk { p: kf.p }
                }
                other => {
                    return Err(ModelError::Malformed(format!(
                        "unknown placement kernel {other:?}"
                    )))
                }
            };
            Ok(ModelSpec::Homogeneous {
                local: LocalParams {
                    b: scalar(&file.local.b, "local.b")?,
                    c: scalar(&file.local.c, "local.c")?,
                    levy: measure(&file.local.levy, "local.levy")?,
                },
                nonlocal: NonLocalParams {
                    beta: scalar(&file.nonlocal.beta, "nonlocal.beta")?,
                    d: scalar(&file.nonlocal.d, "nonlocal.d")?,
                    njump: measure(&file.nonlocal.njump, "nonlocal.njump")?,
                },
                kernel,
            })
        }
        other => Err(ModelError::Malformed(format!("unknown kind {other:?}"))),
    }
}

pub fn load_model(path: &std::path::Path) -> Result<ModelSpec, ModelError> {
    parse_model(&std::fs::read_to_string(path)?)
}
