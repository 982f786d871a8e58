//! Born-rule cross-checks of the bundled realizations, independent of any
//! SDP: the explicit values, positivity of the numeric moment matrices and
//! agreement of every probability binding with the Born-rule table.

use serde::{Deserialize, Serialize};

use super::qrac::{qrac_coefficients, qrac_scenario};
use crate::error::Result;
use crate::moment::{build_model, chsh_coefficients, Coefficients, Scenario};
use crate::realizations::{
    born_probabilities, chsh_reference, moment_vector, numeric_moments, qrac_reference, Realization,
};
use crate::sdp::hermitian_min_eigenvalue;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub realization: String,
    pub quantity: String,
    pub level: usize,
    pub value: f64,
    pub expected: f64,
    /// Smallest eigenvalue over all numeric moment matrices.
    pub min_eigenvalue: f64,
    /// Largest deviation between a bound moment and the Born-rule table.
    pub binding_residual: f64,
}

impl OracleCheck {
    pub fn error(&self) -> f64 {
        (self.value - self.expected).abs()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.error() <= tol && self.min_eigenvalue >= -tol && self.binding_residual <= tol
    }
}

fn check(
    name: &str,
    quantity: &str,
    r: &Realization,
    scenario: Scenario,
    coefficients: &Coefficients,
    expected: f64,
    level: usize,
) -> Result<OracleCheck> {
    r.validate()?;
    let table = born_probabilities(r)?;
    let model = build_model(scenario, level)?;
    let min_eigenvalue = numeric_moments(r, model.basis())?
        .iter()
        .map(hermitian_min_eigenvalue)
        .fold(f64::INFINITY, f64::min);
    let v = moment_vector(r, &model);
    let mut residual = 0.0_f64;
    for x in 0..scenario.n_x {
        for a in 0..scenario.n_a {
            residual =
                residual.max((model.marginal_expr(a, x).eval(&v) - table.marginal(a, x)).abs());
            for y in 0..scenario.n_y {
                for b in 0..scenario.n_b {
                    let p = model.prob_expr(a, b, x, y).eval(&v);
                    residual = residual.max((p - table.get(a, b, x, y)).abs());
                }
            }
        }
    }
    for eq in model.normalization_constraints() {
        residual = residual.max(eq.residual(&v).abs());
    }
    Ok(OracleCheck {
        realization: name.into(),
        quantity: quantity.into(),
        level,
        value: table.evaluate(coefficients),
        expected,
        min_eigenvalue,
        binding_residual: residual,
    })
}

/// Checks for the `2√2` temporal CHSH realization and the optimal 2→1
/// code at the given level.
pub fn oracle_checks(level: usize) -> Result<Vec<OracleCheck>> {
    Ok(vec![
        check(
            "chsh-reference",
            "K_CHSH",
            &chsh_reference(),
            Scenario::chsh(),
            &chsh_coefficients(),
            2.0 * std::f64::consts::SQRT_2,
            level,
        )?,
        check(
            "qrac-reference",
            "P_2to1",
            &qrac_reference(),
            qrac_scenario(2)?,
            &qrac_coefficients(2)?,
            (1.0 + std::f64::consts::FRAC_1_SQRT_2) / 2.0,
            level,
        )?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_realizations_pass() {
        for level in 1..=3 {
            for c in oracle_checks(level).unwrap() {
                assert!(c.passes(1e-10), "{c:?}");
            }
        }
    }
}
