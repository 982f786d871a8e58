use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::expr::{Equality, LinExpr};
use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Sparse Hermitian affine matrix `F0 + Σ_k x_k F_k`.
///
/// Only entries with `i <= j` are stored; the lower triangle is implied by
/// conjugation, so every block is Hermitian by construction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HermitianBlock {
    pub dim: usize,
    /// Upper-triangle entries of `F0`.
    pub constant: BTreeMap<(usize, usize), C64>,
    /// Upper-triangle entries of each `F_k`.
    pub terms: BTreeMap<usize, BTreeMap<(usize, usize), C64>>,
}

impl HermitianBlock {
    pub fn new(dim: usize) -> Self {
        HermitianBlock {
            dim,
            ..Default::default()
        }
    }

    fn upper(i: usize, j: usize, coef: C64) -> ((usize, usize), C64) {
        if i <= j {
            ((i, j), coef)
        } else {
            ((j, i), coef.conj())
        }
    }

    /// Add `coef` at `(i,j)` (and its conjugate at `(j,i)`), scaled by
    /// `x[var]` or by one when `var` is `None`.
    pub fn add(&mut self, var: Option<usize>, i: usize, j: usize, coef: C64) {
        assert!(i < self.dim && j < self.dim, "entry outside block");
        let (key, c) = Self::upper(i, j, coef);
        let c = if key.0 == key.1 {
            C64::new(c.re, 0.0)
        } else {
            c
        };
        let map = match var {
            None => &mut self.constant,
            Some(v) => self.terms.entry(v).or_default(),
        };
        *map.entry(key).or_insert(C64::new(0.0, 0.0)) += c;
    }

    /// Place the affine expression `re + i·im` at entry `(i,j)`.
    pub fn add_entry(&mut self, i: usize, j: usize, re: &LinExpr, im: &LinExpr) {
        let one = C64::new(1.0, 0.0);
        let iu = C64::new(0.0, 1.0);
        self.add(None, i, j, one * re.constant + iu * im.constant);
        for &(v, c) in &re.terms {
            self.add(Some(v), i, j, one * c);
        }
        if i != j {
            for &(v, c) in &im.terms {
                self.add(Some(v), i, j, iu * c);
            }
        }
    }

    /// `self += scale · other` (dimensions must agree).
    pub fn add_block(&mut self, other: &HermitianBlock, scale: f64) {
        assert_eq!(self.dim, other.dim);
        for (&(i, j), &c) in &other.constant {
            self.add(None, i, j, c * scale);
        }
        for (&v, m) in &other.terms {
            for (&(i, j), &c) in m {
                self.add(Some(v), i, j, c * scale);
            }
        }
    }

    pub fn max_var(&self) -> Option<usize> {
        self.terms.keys().next_back().copied()
    }

    fn fill(out: &mut DMatrix<C64>, entries: &BTreeMap<(usize, usize), C64>, s: f64) {
        for (&(i, j), &c) in entries {
            out[(i, j)] += c * s;
            if i != j {
                out[(j, i)] += c.conj() * s;
            }
        }
    }

    pub fn constant_matrix(&self) -> DMatrix<C64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        Self::fill(&mut m, &self.constant, 1.0);
        m
    }

    pub fn coefficient_matrix(&self, var: usize) -> DMatrix<C64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        if let Some(e) = self.terms.get(&var) {
            Self::fill(&mut m, e, 1.0);
        }
        m
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<C64> {
        let mut m = self.constant_matrix();
        for (&v, e) in &self.terms {
            Self::fill(&mut m, e, x[v]);
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Minimize,
    Maximize,
}

/// Optimize `objective(x)` subject to every block being PSD and every
/// equality holding.
#[derive(Debug, Clone, PartialEq)]
pub struct SdpProblem {
    pub n_vars: usize,
    pub sense: Sense,
    pub objective: LinExpr,
    pub blocks: Vec<HermitianBlock>,
    pub equalities: Vec<Equality>,
}

impl SdpProblem {
    pub fn new(n_vars: usize, sense: Sense) -> Self {
        SdpProblem {
            n_vars,
            sense,
            objective: LinExpr::zero(),
            blocks: Vec::new(),
            equalities: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |v: usize, what: &str| -> Result<()> {
            if v >= self.n_vars {
                return Err(Error::invalid(format!(
                    "{what} references variable {v} but the problem has {}",
                    self.n_vars
                )));
            }
            Ok(())
        };
        for &(v, c) in &self.objective.terms {
            check(v, "objective")?;
            finite(c)?;
        }
        finite(self.objective.constant)?;
        for (b, blk) in self.blocks.iter().enumerate() {
            if blk.dim == 0 {
                return Err(Error::invalid(format!("block {b} has dimension 0")));
            }
            let entries = std::iter::once(&blk.constant).chain(blk.terms.values());
            for m in entries {
                for (&(i, j), c) in m {
                    if i > j || j >= blk.dim {
                        return Err(Error::invalid(format!("block {b}: bad entry ({i},{j})")));
                    }
                    finite(c.re)?;
                    finite(c.im)?;
                    if i == j && c.im.abs() > 1e-12 {
                        return Err(Error::NotHermitian(c.im.abs()));
                    }
                }
            }
            for &v in blk.terms.keys() {
                check(v, "block")?;
            }
        }
        for eq in &self.equalities {
            for &(v, c) in &eq.coeffs {
                check(v, "equality")?;
                finite(c)?;
            }
            finite(eq.rhs)?;
        }
        Ok(())
    }
}

fn finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("non-finite coefficient"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::NumericalFailure => "numerical-failure",
        }
    }
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpSolution {
    pub status: SolveStatus,
    /// Objective at `x`.
    pub value: f64,
    /// Bound from the dual iterate; on the safe side of `value` up to the
    /// residual of the dual iterate.
    pub dual_bound: f64,
    pub x: Vec<f64>,
    /// Relative duality gap.
    pub gap: f64,
    /// Largest of equality residual and negative block eigenvalue at `x`.
    pub max_violation: f64,
    pub iterations: usize,
}

impl SdpSolution {
    pub(crate) fn failed(status: SolveStatus, n: usize, iterations: usize) -> Self {
        SdpSolution {
            status,
            value: f64::NAN,
            dual_bound: f64::NAN,
            x: vec![0.0; n],
            gap: f64::INFINITY,
            max_violation: f64::INFINITY,
            iterations,
        }
    }

    pub fn into_result(self) -> Result<SdpSolution> {
        if self.status == SolveStatus::Optimal {
            Ok(self)
        } else {
            Err(Error::Solver {
                status: self.status.to_string(),
                detail: format!("gap {:.3e}, after {} iterations", self.gap, self.iterations),
            })
        }
    }
}

/// `[[Re H, −Im H], [Im H, Re H]]`.
pub fn embed_hermitian(h: &DMatrix<C64>) -> Result<DMatrix<f64>> {
    let n = h.nrows();
    if h.ncols() != n {
        return Err(Error::invalid("matrix is not square"));
    }
    let asym = (h - h.adjoint())
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max);
    if asym > 1e-12 {
        return Err(Error::NotHermitian(asym));
    }
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let c = h[(i, j)];
            out[(i, j)] = c.re;
            out[(i + n, j + n)] = c.re;
            out[(i, j + n)] = -c.im;
            out[(i + n, j)] = c.im;
        }
    }
    Ok(out)
}

/// Independent feasibility check of a point.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub min_eigenvalues: Vec<f64>,
    pub max_equality_residual: f64,
    pub objective: f64,
}

impl Certificate {
    pub fn max_violation(&self) -> f64 {
        let eig = self.min_eigenvalues.iter().fold(0.0_f64, |m, &e| m.max(-e));
        eig.max(self.max_equality_residual)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_violation() <= tol
    }
}

pub fn hermitian_min_eigenvalue(m: &DMatrix<C64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = (m + m.adjoint()) * C64::new(0.5, 0.0);
    sym.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn certify(p: &SdpProblem, x: &[f64]) -> Certificate {
    let min_eigenvalues = p
        .blocks
        .iter()
        .map(|b| hermitian_min_eigenvalue(&b.eval(x)))
        .collect();
    let max_equality_residual = p
        .equalities
        .iter()
        .map(|e| e.residual(x).abs())
        .fold(0.0, f64::max);
    Certificate {
        min_eigenvalues,
        max_equality_residual,
        objective: p.objective.eval(x),
    }
}
