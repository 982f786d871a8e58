//! Temporal steering robustness.
//!
//! ```text
//! minimize   Σ_λ σ̃_λ(1) − 1
//! subject to Σ_λ δ_{a,λ(x)} σ̃_λ − χ_{a|x} ⪰ 0,  σ̃_λ ⪰ 0,  χ_{a|x} ⪰ 0
//! ```
//!
//! where every `σ̃_λ` is an unnormalized moment matrix on the same basis as
//! `χ`, plus data (a full table or a CHSH value) and regime constraints on χ.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{chsh_model, solve_bound, Bound, ConstraintRegime};
use crate::algebra::OperatorWord;
use crate::error::{Error, Result};
use crate::moment::{bind_data, chsh_coefficients, functional, CorrelationTable, MomentModel};
use crate::realizations::SpanBasis;
use crate::sdp::{HermitianBlock, LinExpr, SdpProblem, Sense, SolveStatus};

/// All deterministic assignments `λ: x ↦ a`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeterministicStrategySet {
    n_a: usize,
    n_x: usize,
    strategies: Vec<Vec<usize>>,
}

impl DeterministicStrategySet {
    /// Strategies ordered lexicographically with setting 0 most significant.
    pub fn new(n_a: usize, n_x: usize) -> Self {
        let total = n_a.pow(n_x as u32);
        let strategies = (0..total)
            .map(|mut k| {
                let mut s = vec![0; n_x];
                for x in (0..n_x).rev() {
                    s[x] = k % n_a;
                    k /= n_a;
                }
                s
            })
            .collect();
        DeterministicStrategySet {
            n_a,
            n_x,
            strategies,
        }
    }

    pub fn len(&self) -> usize {
        self.strategies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strategies.is_empty()
    }

    pub fn strategies(&self) -> &[Vec<usize>] {
        &self.strategies
    }

    /// `δ_{a, λ(x)}`.
    pub fn indicator(&self, lambda: usize, a: usize, x: usize) -> f64 {
        if self.strategies[lambda][x] == a {
            1.0
        } else {
            0.0
        }
    }
}

/// Data the robustness problem is conditioned on.
enum Target<'a> {
    Table(&'a CorrelationTable),
    Chsh(f64),
}

fn tsr_problem(
    model: &MomentModel,
    regime: &ConstraintRegime,
    span: Option<&SpanBasis>,
    target: Target,
    real: bool,
) -> Result<SdpProblem> {
    let s = model.scenario();
    let layout = model.layout();
    let strategies = DeterministicStrategySet::new(s.n_a, s.n_x);
    let base = model.n_vars();
    let per = layout.n_vars();
    let offset = |lambda: usize| base + lambda * per;

    let mut p = model.base_problem(Sense::Minimize);
    p.n_vars = base + strategies.len() * per;
    let mut objective = LinExpr::constant(-1.0);
    for lambda in 0..strategies.len() {
        p.blocks.push(layout.block(offset(lambda)));
        let (re, _) = layout
            .word_expr(offset(lambda), &OperatorWord::identity())
            .expect("identity");
        objective.add_scaled(&re, 1.0);
    }
    for x in 0..s.n_x {
        for a in 0..s.n_a {
            let mut diff = HermitianBlock::new(layout.dim());
            diff.add_block(&model.block_matrix(a, x), -1.0);
            for lambda in 0..strategies.len() {
                let w = strategies.indicator(lambda, a, x);
                if w != 0.0 {
                    diff.add_block(&layout.block(offset(lambda)), w);
                }
            }
            p.blocks.push(diff);
        }
    }
    p.objective = objective;
    if real {
        // Same conjugation argument as for χ, applied to every σ̃_λ.
        p.equalities.extend(model.real_constraints());
        for lambda in 0..strategies.len() {
            p.equalities.extend(layout.real_constraints(offset(lambda)));
        }
    }
    p.equalities.extend(regime.constraints(model, span)?);
    match target {
        Target::Table(t) => p.equalities.extend(bind_data(model, t)?),
        Target::Chsh(k) => {
            if s != crate::moment::Scenario::chsh() {
                return Err(Error::invalid("a CHSH target needs the (2,2,2,2) scenario"));
            }
            p.equalities
                .push(functional(model, &chsh_coefficients())?.equals(k));
        }
    }
    Ok(p)
}

/// Lower bound on the temporal steering robustness of `data`.
pub fn tsr_bound(
    data: &CorrelationTable,
    regime: &ConstraintRegime,
    level: usize,
    span: Option<&SpanBasis>,
    tol: f64,
) -> Result<Bound> {
    let model = crate::moment::build_model(data.scenario(), level)?;
    let p = tsr_problem(&model, regime, span, Target::Table(data), true)?;
    solve_bound(&p, tol)
}

/// Minimal robustness over all CHSH-scenario data with `K_CHSH = k`.
pub fn tsr_point(
    k: f64,
    regime: &ConstraintRegime,
    level: usize,
    span: Option<&SpanBasis>,
    tol: f64,
) -> Result<Bound> {
    let model = chsh_model(level)?;
    let p = tsr_problem(&model, regime, span, Target::Chsh(k), true)?;
    solve_bound(&p, tol)
}

/// `(K − 2)(√2 − 1)/2`.
pub fn tsr_line(k: f64) -> f64 {
    (k - 2.0) * (std::f64::consts::SQRT_2 - 1.0) / 2.0
}

/// `n` evenly spaced points on `[lo, hi]`.
pub fn default_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub parameter: f64,
    pub value: f64,
    pub gap: f64,
    pub status: String,
}

/// Robustness bound at every grid point; failed points are reported with
/// their status and a NaN value.
pub fn tsr_curve(
    regime: &ConstraintRegime,
    level: usize,
    grid: &[f64],
    span: Option<&SpanBasis>,
    tol: f64,
) -> Result<Vec<CurvePoint>> {
    let model = chsh_model(level)?;
    // Validate the regime once so configuration errors are not per-point.
    regime.constraints(&model, span)?;
    let upper = match regime {
        ConstraintRegime::Di | ConstraintRegime::DiDim { .. } => 4.0,
        _ => 2.0 * std::f64::consts::SQRT_2,
    };
    if let Some(k) = grid
        .iter()
        .find(|&&k| !(2.0 - 1e-12..=upper + 1e-12).contains(&k))
    {
        return Err(Error::invalid(format!(
            "grid value {k} outside [2, {upper}] for regime {regime}"
        )));
    }
    Ok(grid
        .par_iter()
        .map(|&k| {
            let r = tsr_problem(&model, regime, span, Target::Chsh(k), true)
                .and_then(|p| solve_bound(&p, tol));
            match r {
                Ok(b) => CurvePoint {
                    parameter: k,
                    value: b.value,
                    gap: b.gap,
                    status: b.status.to_string(),
                },
                Err(Error::Solver { status, .. }) => CurvePoint {
                    parameter: k,
                    value: f64::NAN,
                    gap: f64::NAN,
                    status,
                },
                Err(e) => CurvePoint {
                    parameter: k,
                    value: f64::NAN,
                    gap: f64::NAN,
                    status: format!("{}: {e}", SolveStatus::NumericalFailure),
                },
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moment::Scenario;
    use crate::realizations::{born_probabilities, chsh_reference};
    use crate::sdp::DEFAULT_TOL;

    #[test]
    fn strategy_enumeration() {
        let s = DeterministicStrategySet::new(2, 2);
        assert_eq!(s.len(), 4);
        assert_eq!(
            s.strategies(),
            &[vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]
        );
        let t = DeterministicStrategySet::new(3, 2);
        assert_eq!(t.len(), 9);
        for l in 0..t.len() {
            for x in 0..2 {
                let total: f64 = (0..3).map(|a| t.indicator(l, a, x)).sum();
                assert_eq!(total, 1.0);
            }
        }
    }

    /// `I_{a|x}(ρ) = Σ_λ p_λ δ_{a,λ(x)} σ_λ` with fixed qubit states.
    fn hidden_state_table(seed: u64) -> CorrelationTable {
        use crate::realizations::{random_state, C64};
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let strategies = DeterministicStrategySet::new(2, 2);
        let mut p: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        let sigmas: Vec<_> = (0..4).map(|_| random_state(2, &mut rng)).collect();
        let r = crate::realizations::sample_realization(2, 1, &Scenario::chsh(), seed).unwrap();
        let mut t = CorrelationTable::zeros(Scenario::chsh());
        for x in 0..2 {
            for a in 0..2 {
                let mut post = nalgebra::DMatrix::zeros(2, 2);
                for l in 0..4 {
                    post += &sigmas[l] * C64::new(p[l] * strategies.indicator(l, a, x), 0.0);
                }
                for y in 0..2 {
                    for b in 0..2 {
                        let v = (&r.povms[y][b] * &post).trace().re;
                        t.set(a, b, x, y, v);
                    }
                }
            }
        }
        t
    }

    #[test]
    fn unsteerable_data_has_zero_robustness() {
        for seed in 0..3 {
            let t = hidden_state_table(seed);
            let b = tsr_bound(&t, &ConstraintRegime::Di, 1, None, DEFAULT_TOL).unwrap();
            assert!(b.value.abs() < 1e-6, "seed {seed}: {}", b.value);
        }
    }

    #[test]
    fn classical_point_and_tsirelson_point() {
        let b = tsr_point(2.0, &ConstraintRegime::Nsit, 1, None, DEFAULT_TOL).unwrap();
        assert!(b.value.abs() < 1e-6);
        let k = 2.0 * std::f64::consts::SQRT_2;
        let b = tsr_point(k, &ConstraintRegime::Nsit, 1, None, DEFAULT_TOL).unwrap();
        assert!((b.value - tsr_line(k)).abs() < 1e-3);
    }

    #[test]
    fn reference_table_is_steerable() {
        let t = born_probabilities(&chsh_reference()).unwrap();
        let b = tsr_bound(&t, &ConstraintRegime::Di, 1, None, DEFAULT_TOL).unwrap();
        assert!(b.value > 0.1);
    }

    #[test]
    fn grid_validation() {
        assert_eq!(default_grid(2.0, 3.0, 3), vec![2.0, 2.5, 3.0]);
        assert!(tsr_curve(&ConstraintRegime::Nsit, 1, &[3.5], None, DEFAULT_TOL).is_err());
    }

    #[test]
    fn problem_shape() {
        let model = chsh_model(1).unwrap();
        let p = tsr_problem(
            &model,
            &ConstraintRegime::Di,
            None,
            Target::Chsh(2.5),
            false,
        )
        .unwrap();
        assert_eq!(p.blocks.len(), 4 + 4 + 4);
        assert_eq!(p.n_vars, 8 * model.layout().n_vars());
        assert_eq!(p.equalities.len(), 2 + 1);
        // One imaginary part (of E_{0|0}E_{0|1}) per block.
        let p = tsr_problem(&model, &ConstraintRegime::Di, None, Target::Chsh(2.5), true).unwrap();
        assert_eq!(p.equalities.len(), 2 + 1 + 8);
    }

    #[test]
    fn real_restriction_keeps_the_optimum() {
        let model = chsh_model(2).unwrap();
        for regime in [ConstraintRegime::Di, ConstraintRegime::Nsit] {
            for k in [2.3, 2.7] {
                let v: Vec<f64> = [false, true]
                    .iter()
                    .map(|&real| {
                        let p = tsr_problem(&model, &regime, None, Target::Chsh(k), real).unwrap();
                        solve_bound(&p, DEFAULT_TOL).unwrap().value
                    })
                    .collect();
                assert!((v[0] - v[1]).abs() < 1e-6, "{regime} {k}: {v:?}");
            }
        }
    }
}
