//! Applications: temporal CHSH bounds, temporal steering robustness, random
//! access codes and self-testing fidelities.

mod oracle;
mod output;
mod qrac;
mod selftest;
mod tsr;

pub use oracle::{oracle_checks, OracleCheck};
pub use output::{sig9, write_csv, OutputRow, CSV_HEADER};
pub use qrac::{qrac_bound, qrac_coefficients, qrac_scenario, CLASSICAL_QRAC};
pub use selftest::{
    classical_fidelity, fidelity_threshold, selftest_fidelity, ClassicalFidelity,
    FidelityFunctional, FidelityTerm, SelftestTarget,
};
pub use tsr::{
    default_grid, tsr_bound, tsr_curve, tsr_line, tsr_point, CurvePoint, DeterministicStrategySet,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moment::{
    build_model, chsh_coefficients, functional, nsit_constraints, MomentModel, Scenario,
};
use crate::realizations::{
    build_span, span_constraints, RankSpec, SampleSpec, SamplingMode, SpanBasis, SATURATION_BATCHES,
};
use crate::sdp::{solve_sdp, Equality, SdpProblem, SdpSolution, Sense, SolveStatus};

/// Which characterization of the quantum set is imposed on the moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConstraintRegime {
    /// Positivity only.
    Di,
    /// Membership in the span of `d`-dimensional moment vectors.
    DiDim { dim: usize },
    /// As above with every measurement element of rank `k`.
    DiDimRank { dim: usize, rank: usize },
    /// No signalling in time: `Σ_a χ_{a|x}` independent of `x`.
    Nsit,
}

impl ConstraintRegime {
    pub fn new(tag: &str, dim: Option<usize>, rank: Option<usize>) -> Result<Self> {
        let r = match (tag, dim, rank) {
            ("di", None, None) => ConstraintRegime::Di,
            ("nsit", None, None) => ConstraintRegime::Nsit,
            ("dim", Some(dim), None) => ConstraintRegime::DiDim { dim },
            ("dim-rank", Some(dim), Some(rank)) => ConstraintRegime::DiDimRank { dim, rank },
            ("di" | "nsit", _, _) => {
                return Err(Error::invalid(format!(
                    "regime `{tag}` takes no dimension or rank"
                )))
            }
            ("dim", None, _) | ("dim-rank", None, _) => {
                return Err(Error::invalid(format!(
                    "regime `{tag}` requires a dimension"
                )))
            }
            ("dim", Some(_), Some(_)) => {
                return Err(Error::invalid("regime `dim` takes no rank; use `dim-rank`"))
            }
            ("dim-rank", Some(_), None) => {
                return Err(Error::invalid("regime `dim-rank` requires a rank"))
            }
            (other, _, _) => return Err(Error::invalid(format!("unknown regime `{other}`"))),
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ConstraintRegime::DiDim { dim: 0 } => Err(Error::invalid("dimension must be positive")),
            ConstraintRegime::DiDimRank { dim, rank } if rank == 0 || rank > dim => {
                Err(Error::invalid(format!("rank {rank} must lie in 1..={dim}")))
            }
            _ => Ok(()),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            ConstraintRegime::Di => "di",
            ConstraintRegime::DiDim { .. } => "dim",
            ConstraintRegime::DiDimRank { .. } => "dim-rank",
            ConstraintRegime::Nsit => "nsit",
        }
    }

    /// Sampling parameters of the span this regime needs, if any.
    pub fn sample_spec(&self, mode: SamplingMode) -> Option<SampleSpec> {
        match *self {
            ConstraintRegime::DiDim { dim } => {
                Some(SampleSpec::new(dim, RankSpec::Unconstrained, mode))
            }
            ConstraintRegime::DiDimRank { dim, rank } => {
                Some(SampleSpec::new(dim, RankSpec::Fixed(rank), mode))
            }
            _ => None,
        }
    }

    /// Equalities imposed on the χ variables of `model`.
    pub fn constraints(
        &self,
        model: &MomentModel,
        span: Option<&SpanBasis>,
    ) -> Result<Vec<Equality>> {
        match self {
            ConstraintRegime::Di => Ok(Vec::new()),
            ConstraintRegime::Nsit => Ok(nsit_constraints(model)),
            ConstraintRegime::DiDim { .. } | ConstraintRegime::DiDimRank { .. } => {
                let sb = span.ok_or_else(|| {
                    Error::invalid(format!("regime `{}` needs a sampled span", self.tag()))
                })?;
                let want = self.sample_spec(sb.meta.spec.mode).expect("span regime");
                if sb.meta.spec != want {
                    return Err(Error::SpanMismatch(format!(
                        "span sampled with {:?}, regime needs {:?}",
                        sb.meta.spec, want
                    )));
                }
                if !is_saturated(sb) {
                    return Err(Error::SpanMismatch("span is not saturated".into()));
                }
                span_constraints(sb, model)
            }
        }
    }
}

/// Prints the form `FromStr` accepts.
impl fmt::Display for ConstraintRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstraintRegime::DiDim { dim } => write!(f, "dim:{dim}"),
            ConstraintRegime::DiDimRank { dim, rank } => write!(f, "dim-rank:{dim}:{rank}"),
            other => f.write_str(other.tag()),
        }
    }
}

impl FromStr for ConstraintRegime {
    type Err = Error;

    /// Accepts `di`, `nsit`, `dim:<d>` and `dim-rank:<d>:<k>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| {
            p.parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad number `{p}` in regime `{s}`")))
        };
        match parts.as_slice() {
            [tag] => ConstraintRegime::new(tag, None, None),
            [tag, d] => ConstraintRegime::new(tag, Some(num(d)?), None),
            [tag, d, k] => ConstraintRegime::new(tag, Some(num(d)?), Some(num(k)?)),
            _ => Err(Error::invalid(format!("malformed regime `{s}`"))),
        }
    }
}

/// The last `SATURATION_BATCHES + 1` entries of the rank trace agree.
pub fn is_saturated(sb: &SpanBasis) -> bool {
    let t = &sb.meta.trace;
    t.len() > SATURATION_BATCHES
        && t[t.len() - SATURATION_BATCHES - 1..]
            .windows(2)
            .all(|w| w[0] == w[1])
}

/// Build the span a regime needs for `model` (none for DI and NSIT).
pub fn regime_span(
    regime: &ConstraintRegime,
    model: &MomentModel,
    mode: SamplingMode,
    seed: u64,
    batch: usize,
    max_batches: usize,
) -> Result<Option<SpanBasis>> {
    match regime.sample_spec(mode) {
        None => Ok(None),
        Some(spec) => build_span(spec, model, seed, batch, max_batches).map(Some),
    }
}

/// Solved bound with the solver's accuracy report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub value: f64,
    pub dual_bound: f64,
    pub gap: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    /// Tolerance the solver actually met.
    pub tol: f64,
}

impl Bound {
    fn from_solution(s: SdpSolution, tol: f64) -> Result<Self> {
        let s = s.into_result()?;
        Ok(Bound {
            value: s.value,
            dual_bound: s.dual_bound,
            gap: s.gap,
            status: s.status,
            iterations: s.iterations,
            tol,
        })
    }
}

/// Loosest tolerance a stalled solve is retried at.
pub const RETRY_TOL_LIMIT: f64 = 1e-6;

/// Solves at `tol`; a numerical failure is retried at 10× and 100× looser
/// tolerances as long as they stay within `RETRY_TOL_LIMIT`. Degenerate
/// problems at high levels can stall a little above `1e-8`.
pub(crate) fn solve_bound(p: &SdpProblem, tol: f64) -> Result<Bound> {
    let mut t = tol;
    loop {
        let s = solve_sdp(p, t)?;
        let next = t * 10.0;
        if s.status != SolveStatus::NumericalFailure
            || next > RETRY_TOL_LIMIT.max(tol) * (1.0 + 1e-9)
        {
            return Bound::from_solution(s, t);
        }
        t = next;
    }
}

pub fn chsh_model(level: usize) -> Result<MomentModel> {
    build_model(Scenario::chsh(), level)
}

/// Upper bound on the temporal CHSH value.
pub fn chsh_bound(
    regime: &ConstraintRegime,
    level: usize,
    span: Option<&SpanBasis>,
    tol: f64,
) -> Result<Bound> {
    let model = chsh_model(level)?;
    solve_bound(&chsh_problem(&model, regime, span, true)?, tol)
}

fn chsh_problem(
    model: &MomentModel,
    regime: &ConstraintRegime,
    span: Option<&SpanBasis>,
    real: bool,
) -> Result<SdpProblem> {
    let mut p = model.base_problem(Sense::Maximize);
    p.objective = functional(model, &chsh_coefficients())?;
    p.equalities.extend(regime.constraints(model, span)?);
    if real {
        p.equalities.extend(model.real_constraints());
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::realizations::{DEFAULT_BATCH, DEFAULT_MAX_BATCHES};
    use crate::sdp::DEFAULT_TOL;

    const TSIRELSON: f64 = 2.0 * std::f64::consts::SQRT_2;

    fn span(regime: &ConstraintRegime, level: usize) -> Option<SpanBasis> {
        let m = chsh_model(level).unwrap();
        regime_span(
            regime,
            &m,
            SamplingMode::Temporal,
            7,
            DEFAULT_BATCH,
            DEFAULT_MAX_BATCHES,
        )
        .unwrap()
    }

    #[test]
    fn regime_parsing() {
        assert_eq!(
            "di".parse::<ConstraintRegime>().unwrap(),
            ConstraintRegime::Di
        );
        assert_eq!(
            "dim:2".parse::<ConstraintRegime>().unwrap(),
            ConstraintRegime::DiDim { dim: 2 }
        );
        assert_eq!(
            "dim-rank:2:1".parse::<ConstraintRegime>().unwrap(),
            ConstraintRegime::DiDimRank { dim: 2, rank: 1 }
        );
        assert!("dim-rank:2:3".parse::<ConstraintRegime>().is_err());
        assert!("dim".parse::<ConstraintRegime>().is_err());
        assert!("nsit:2".parse::<ConstraintRegime>().is_err());
        assert!("npa".parse::<ConstraintRegime>().is_err());
        for r in [
            ConstraintRegime::Di,
            ConstraintRegime::Nsit,
            ConstraintRegime::DiDim { dim: 3 },
            ConstraintRegime::DiDimRank { dim: 4, rank: 2 },
        ] {
            assert_eq!(r.to_string().parse::<ConstraintRegime>().unwrap(), r);
        }
    }

    #[test]
    fn di_and_nsit_chsh() {
        let di = chsh_bound(&ConstraintRegime::Di, 1, None, DEFAULT_TOL).unwrap();
        assert!((di.value - 4.0).abs() < 1e-6);
        assert!(di.dual_bound >= di.value - 1e-6);
        let nsit = chsh_bound(&ConstraintRegime::Nsit, 1, None, DEFAULT_TOL).unwrap();
        assert!((nsit.value - TSIRELSON).abs() < 1e-4);
    }

    #[test]
    fn span_regimes_chsh() {
        let dim = ConstraintRegime::DiDim { dim: 2 };
        let b = chsh_bound(&dim, 1, span(&dim, 1).as_ref(), DEFAULT_TOL).unwrap();
        assert!((b.value - 4.0).abs() < 1e-3);
        let rank = ConstraintRegime::DiDimRank { dim: 2, rank: 1 };
        let b = chsh_bound(&rank, 1, span(&rank, 1).as_ref(), DEFAULT_TOL).unwrap();
        assert!((b.value - TSIRELSON).abs() < 1e-3);
    }

    #[test]
    fn real_restriction_keeps_the_optimum() {
        let regimes = [
            ConstraintRegime::Di,
            ConstraintRegime::DiDim { dim: 2 },
            ConstraintRegime::DiDimRank { dim: 2, rank: 1 },
            ConstraintRegime::Nsit,
        ];
        for level in 1..=2 {
            let model = chsh_model(level).unwrap();
            for r in &regimes {
                let sb = span(r, level);
                let v: Vec<f64> = [false, true]
                    .iter()
                    .map(|&real| {
                        let p = chsh_problem(&model, r, sb.as_ref(), real).unwrap();
                        solve_bound(&p, DEFAULT_TOL).unwrap().value
                    })
                    .collect();
                assert!((v[0] - v[1]).abs() < 1e-6, "{r} level {level}: {v:?}");
            }
        }
    }

    #[test]
    fn span_regime_requires_span() {
        let rank = ConstraintRegime::DiDimRank { dim: 2, rank: 1 };
        assert!(chsh_bound(&rank, 1, None, DEFAULT_TOL).is_err());
        let dim = ConstraintRegime::DiDim { dim: 2 };
        // A span sampled for a different regime is refused.
        assert!(matches!(
            chsh_bound(&rank, 1, span(&dim, 1).as_ref(), DEFAULT_TOL),
            Err(Error::SpanMismatch(_))
        ));
    }

    #[test]
    fn regime_ordering_and_level_monotonicity() {
        let regimes = [
            ConstraintRegime::Di,
            ConstraintRegime::DiDim { dim: 2 },
            ConstraintRegime::DiDimRank { dim: 2, rank: 1 },
            ConstraintRegime::Nsit,
        ];
        let mut by_level = Vec::new();
        for level in 1..=2 {
            let v: Vec<f64> = regimes
                .iter()
                .map(|r| {
                    chsh_bound(r, level, span(r, level).as_ref(), DEFAULT_TOL)
                        .unwrap()
                        .value
                })
                .collect();
            assert!(v[0] >= v[1] - 1e-6 && v[1] >= v[2] - 1e-6 && v[3] <= v[0] + 1e-6);
            // Sandwich: never below the explicit 2√2 realization.
            assert!(v.iter().all(|&x| x >= TSIRELSON - 1e-5));
            by_level.push(v);
        }
        for (l1, l2) in by_level[0].iter().zip(&by_level[1]) {
            assert!(l2 <= &(l1 + 1e-6));
        }
    }
}
