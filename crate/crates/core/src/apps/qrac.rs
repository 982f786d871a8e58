//! `n → 1` random access codes read as temporal scenarios.
//!
//! The first bit `x0` is the first-time outcome `a'`, the remaining bits
//! form the setting `x' = x1 + 2 x2 + …`. Each preparation happens with
//! probability `2^{-n}`, so every block is pinned to `χ_{a'|x'}(1) = 1/2`.

use super::{solve_bound, Bound, ConstraintRegime};
use crate::error::{Error, Result};
use crate::moment::{build_model, functional, Coefficients, MomentModel, Scenario};
use crate::realizations::SpanBasis;
use crate::sdp::{Equality, Sense};

/// Best classical success probability for `n = 2` and `n = 3`.
pub const CLASSICAL_QRAC: f64 = 0.75;

fn check_n(n: usize) -> Result<()> {
    if n == 2 || n == 3 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "random access codes are supported for n = 2, 3 (got {n})"
        )))
    }
}

pub fn qrac_scenario(n: usize) -> Result<Scenario> {
    check_n(n)?;
    Scenario::new(2, 1 << (n - 1), 2, n)
}

/// Bit `i` of the input string encoded as `(a', x')`.
fn bit(a: usize, x: usize, i: usize) -> usize {
    if i == 0 {
        a
    } else {
        (x >> (i - 1)) & 1
    }
}

/// `P_{n→1} = 2^{-n} n^{-1} Σ_{x⃗,y} P(b = x_y | x⃗, y)` with
/// `P(b | x⃗, y) = 2 P(a', b | x', y)`.
pub fn qrac_coefficients(n: usize) -> Result<Coefficients> {
    let s = qrac_scenario(n)?;
    let w = 2.0 / ((1usize << n) * n) as f64;
    let mut c = Coefficients::new();
    for x in 0..s.n_x {
        for a in 0..s.n_a {
            for y in 0..n {
                c.insert((a, bit(a, x, y), x, y), w);
            }
        }
    }
    Ok(c)
}

/// `χ_{a|x}(1) = 1/|A|` for every block.
pub(crate) fn uniform_preparations(model: &MomentModel) -> Vec<Equality> {
    let s = model.scenario();
    let p = 1.0 / s.n_a as f64;
    (0..s.n_x)
        .flat_map(|x| (0..s.n_a).map(move |a| (a, x)))
        .map(|(a, x)| model.marginal_expr(a, x).equals(p))
        .collect()
}

/// Upper bound on the success probability of an `n → 1` code.
pub fn qrac_bound(
    n: usize,
    regime: &ConstraintRegime,
    level: usize,
    span: Option<&SpanBasis>,
    tol: f64,
) -> Result<Bound> {
    let model = build_model(qrac_scenario(n)?, level)?;
    let mut p = model.base_problem(Sense::Maximize);
    p.objective = functional(&model, &qrac_coefficients(n)?)?;
    p.equalities.extend(uniform_preparations(&model));
    p.equalities.extend(regime.constraints(&model, span)?);
    p.equalities.extend(model.real_constraints());
    solve_bound(&p, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apps::regime_span;
    use crate::realizations::{
        born_probabilities, qrac_reference, SamplingMode, DEFAULT_BATCH, DEFAULT_MAX_BATCHES,
    };
    use crate::sdp::DEFAULT_TOL;

    fn rank1() -> ConstraintRegime {
        ConstraintRegime::DiDimRank { dim: 2, rank: 1 }
    }

    fn bound(n: usize) -> f64 {
        let model = build_model(qrac_scenario(n).unwrap(), 1).unwrap();
        let span = regime_span(
            &rank1(),
            &model,
            SamplingMode::Prepare,
            11,
            DEFAULT_BATCH,
            DEFAULT_MAX_BATCHES,
        )
        .unwrap();
        qrac_bound(n, &rank1(), 1, span.as_ref(), DEFAULT_TOL)
            .unwrap()
            .value
    }

    #[test]
    fn coefficients_sum() {
        for n in [2, 3] {
            let total: f64 = qrac_coefficients(n).unwrap().values().sum();
            // 2^n n terms of weight 2/(2^n n) each, split over 2^{n-1} blocks.
            assert!((total - 2.0).abs() < 1e-12);
        }
        assert!(qrac_scenario(4).is_err());
    }

    #[test]
    fn reference_code_reaches_quantum_value() {
        let t = born_probabilities(&qrac_reference()).unwrap();
        let v = t.evaluate(&qrac_coefficients(2).unwrap());
        assert!((v - (1.0 + 0.5f64.sqrt()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn two_to_one() {
        let v = bound(2);
        assert!((v - (1.0 + 0.5f64.sqrt()) / 2.0).abs() < 1e-4, "{v}");
    }

    #[test]
    fn three_to_one() {
        let v = bound(3);
        assert!((v - (1.0 + 1.0 / 3f64.sqrt()) / 2.0).abs() < 1e-4, "{v}");
    }

    #[test]
    fn positivity_alone_is_trivial() {
        let v = qrac_bound(2, &ConstraintRegime::Di, 1, None, DEFAULT_TOL)
            .unwrap()
            .value;
        assert!((v - 1.0).abs() < 1e-6);
        assert!(v > CLASSICAL_QRAC);
    }
}
