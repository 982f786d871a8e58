//! Self-testing the 2→1 random access code states.
//!
//! The fidelity between the reference states and the states the device
//! actually prepares is written as a linear function of moments: for every
//! preparation `(x0, x1)` it uses `P(0|x0,x1,0)`, `E_{0|0}E_{0|1}`,
//! `E_{0|1}E_{0|0}` and `E_{0|0}E_{0|1}E_{0|0}`, which needs level 2.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::qrac::{qrac_coefficients, qrac_scenario, uniform_preparations};
use super::{solve_bound, Bound, ConstraintRegime};
use crate::algebra::{Generator, OperatorWord, Reduced};
use crate::error::{Error, Result};
use crate::moment::{bind_data, build_model, functional, CorrelationTable, MomentModel};
use crate::realizations::{CMatrix, Realization, SpanBasis};
use crate::sdp::{solve_lp, LinExpr, LpProblem, Sense, SolveStatus};

/// `coef · Re χ_{a|x}(word)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FidelityTerm {
    pub a: usize,
    pub x: usize,
    pub word: OperatorWord,
    pub coef: f64,
}

/// Average fidelity as `constant + Σ terms`.
#[derive(Debug, Clone, PartialEq)]
pub struct FidelityFunctional {
    pub c: f64,
    pub s: f64,
    pub constant: f64,
    pub terms: Vec<FidelityTerm>,
}

fn word(letters: &[Generator]) -> OperatorWord {
    match OperatorWord::reduce(letters.iter().copied()) {
        Reduced::Word(w) => w,
        Reduced::Zero => unreachable!("distinct settings never annihilate"),
    }
}

impl FidelityFunctional {
    /// Swap-operator decomposition for the states `ψ_{x0 x1}` measured in
    /// `Z` (`E_{0|0}`) and `X` (`E_{0|1}`):
    ///
    /// ```text
    /// F = ¼ [2 + Σ_{x0,x1} σ1 (c²−s²) p + σ2 4cs t3 − σ2 2cs t2]
    /// ```
    ///
    /// with `p = 2χ(E0)`, `t3 = 2χ(E0E1E0)`, `t2 = 2χ(E1E0) + 2χ(E0E1)`,
    /// `σ1 = (−1)^{x0}` and `σ2 = −(−1)^{x1}`, on block `(a', x') = (x0, x1)`.
    pub fn reference() -> Self {
        let (c, s) = ((PI / 8.0).cos(), (PI / 8.0).sin());
        let e0 = Generator::new(0, 0);
        let e1 = Generator::new(0, 1);
        let mut terms = Vec::new();
        for x1 in 0..2 {
            for x0 in 0..2 {
                let sg1 = if x0 == 0 { 1.0 } else { -1.0 };
                let sg2 = if x1 == 0 { -1.0 } else { 1.0 };
                let mut push = |w: OperatorWord, coef: f64| {
                    terms.push(FidelityTerm {
                        a: x0,
                        x: x1,
                        word: w,
                        coef: coef / 4.0,
                    })
                };
                push(word(&[e0]), 2.0 * sg1 * (c * c - s * s));
                push(word(&[e0, e1, e0]), 2.0 * sg2 * 4.0 * c * s);
                push(word(&[e1, e0]), -2.0 * sg2 * 2.0 * c * s);
                push(word(&[e0, e1]), -2.0 * sg2 * 2.0 * c * s);
            }
        }
        FidelityFunctional {
            c,
            s,
            constant: 0.5,
            terms,
        }
    }

    /// Longest word the functional refers to.
    pub fn max_word_len(&self) -> usize {
        self.terms.iter().map(|t| t.word.len()).max().unwrap_or(0)
    }

    pub fn expr(&self, model: &MomentModel) -> Result<LinExpr> {
        let mut out = LinExpr::constant(self.constant);
        for t in &self.terms {
            let (re, _) = model.word_expr(t.a, t.x, &t.word).ok_or_else(|| {
                Error::UnboundEntry(format!(
                    "word of length {} is not a moment at level {}",
                    t.word.len(),
                    model.level()
                ))
            })?;
            out.add_scaled(&re, t.coef);
        }
        Ok(out.normalized())
    }

    /// Value at an explicit realization, from operator products.
    pub fn evaluate(&self, r: &Realization) -> f64 {
        let mut v = self.constant;
        for t in &self.terms {
            let m = r.post_state(t.a, t.x) * r.word_operator(&t.word);
            v += t.coef * m.trace().re;
        }
        v
    }
}

/// What the device is observed to do.
#[derive(Debug, Clone, PartialEq)]
pub enum SelftestTarget {
    /// Only the average success probability `P_{2→1}`.
    Pobs(f64),
    /// A full table in the `(2, 2, 2, 2)` code scenario.
    Table(CorrelationTable),
}

fn check_span_regime(regime: &ConstraintRegime) -> Result<()> {
    match regime {
        ConstraintRegime::DiDimRank { dim: 2, rank: 1 } => Ok(()),
        other => Err(Error::invalid(format!(
            "self-testing needs the dim-rank:2:1 regime, got {other}"
        ))),
    }
}

/// Lower bound on the average fidelity with the reference states.
pub fn selftest_fidelity(
    target: &SelftestTarget,
    regime: &ConstraintRegime,
    level: usize,
    span: Option<&SpanBasis>,
    tol: f64,
) -> Result<Bound> {
    let f = FidelityFunctional::reference();
    if level < 2 {
        return Err(Error::invalid(format!(
            "self-testing needs level >= 2 for words of length {} (got {level})",
            f.max_word_len()
        )));
    }
    check_span_regime(regime)?;
    let model = build_model(qrac_scenario(2)?, level)?;
    let mut p = model.base_problem(Sense::Minimize);
    p.objective = f.expr(&model)?;
    p.equalities.extend(regime.constraints(&model, span)?);
    p.equalities.extend(model.real_constraints());
    match target {
        SelftestTarget::Pobs(v) => {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::invalid(format!(
                    "success probability {v} outside [0, 1]"
                )));
            }
            p.equalities.extend(uniform_preparations(&model));
            p.equalities
                .push(functional(&model, &qrac_coefficients(2)?)?.equals(*v));
        }
        SelftestTarget::Table(t) => p.equalities.extend(bind_data(&model, t)?),
    }
    solve_bound(&p, tol)
}

/// Smallest observed `P_{2→1}` in `[lo, hi]` whose fidelity bound still
/// reaches `threshold`, by bisection to `xtol`.
#[allow(clippy::too_many_arguments)]
pub fn fidelity_threshold(
    threshold: f64,
    regime: &ConstraintRegime,
    level: usize,
    span: Option<&SpanBasis>,
    lo: f64,
    hi: f64,
    xtol: f64,
    tol: f64,
) -> Result<f64> {
    let bound = |p: f64| -> Result<f64> {
        match selftest_fidelity(&SelftestTarget::Pobs(p), regime, level, span, tol) {
            Ok(b) => Ok(b.value),
            // Below the feasible range nothing is certified.
            Err(Error::Solver { status, .. }) if status == SolveStatus::Infeasible.as_str() => {
                Ok(f64::NEG_INFINITY)
            }
            Err(e) => Err(e),
        }
    };
    let (mut lo, mut hi) = (lo, hi);
    if bound(hi)? < threshold {
        return Err(Error::invalid(format!(
            "fidelity bound at {hi} is already below {threshold}"
        )));
    }
    if bound(lo)? >= threshold {
        return Ok(lo);
    }
    while hi - lo > xtol {
        let mid = 0.5 * (lo + hi);
        if bound(mid)? >= threshold {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Best average overlap reachable with states diagonal in the computational
/// basis, from the linear program and from the closed form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassicalFidelity {
    pub lp: f64,
    pub closed_form: f64,
}

/// `max (1/N) Σ_{x,i} α_{x,i} ⟨i|ρ_x|i⟩` with `Σ_i α_{x,i} = 1`, `α ≥ 0`.
pub fn classical_fidelity(states: &[CMatrix]) -> Result<ClassicalFidelity> {
    let Some(first) = states.first() else {
        return Err(Error::invalid("no reference states"));
    };
    let d = first.nrows();
    for (k, rho) in states.iter().enumerate() {
        if rho.nrows() != d || rho.ncols() != d {
            return Err(Error::invalid(format!("state {k} is not {d}×{d}")));
        }
        let herm = (rho - rho.adjoint())
            .iter()
            .fold(0.0_f64, |m, z| m.max(z.norm()));
        if herm > 1e-9 || (rho.trace().re - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("state {k} is not a density matrix")));
        }
    }
    let n = states.len();
    let mut objective = Vec::with_capacity(n * d);
    for rho in states {
        for i in 0..d {
            objective.push(rho[(i, i)].re / n as f64);
        }
    }
    let mut lp = LpProblem::new(Sense::Maximize, objective);
    for k in 0..n {
        let mut row = vec![0.0; n * d];
        row[k * d..(k + 1) * d].iter_mut().for_each(|v| *v = 1.0);
        lp.equalities.push((row, 1.0));
    }
    let sol = solve_lp(&lp)?;
    if sol.status != SolveStatus::Optimal {
        return Err(Error::Solver {
            status: sol.status.to_string(),
            detail: "classical fidelity LP".into(),
        });
    }
    let closed_form = states
        .iter()
        .map(|rho| {
            (0..d)
                .map(|i| rho[(i, i)].re)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / n as f64;
    Ok(ClassicalFidelity {
        lp: sol.value,
        closed_form,
    })
}
