//! Small dense semidefinite and linear programming.

mod dump;
mod expr;
mod ipm;
mod lp;
mod problem;
mod reduce;

pub use dump::{dump_problem, load_problem};
pub use expr::{Equality, LinExpr};
pub use lp::{solve_lp, Bound, LpProblem, LpSolution};
pub use problem::{
    certify, embed_hermitian, hermitian_min_eigenvalue, Certificate, HermitianBlock, SdpProblem,
    SdpSolution, Sense, SolveStatus, C64,
};

use ipm::{solve_cone, ConeBlock, ConeProblem, ConeStatus};
use reduce::{reduce, Reduced};

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 200;

/// Box used by the phase-1 feasibility problem.
const PHASE1_BOX: f64 = 1e4;

pub fn solve_sdp(p: &SdpProblem, tol: f64) -> Result<SdpSolution> {
    solve_sdp_with(p, tol, DEFAULT_MAX_ITER)
}

pub fn solve_sdp_with(p: &SdpProblem, tol: f64, max_iter: usize) -> Result<SdpSolution> {
    if !(1e-10..=1e-4).contains(&tol) {
        return Err(Error::invalid(format!(
            "tolerance {tol:e} outside [1e-10, 1e-4]"
        )));
    }
    p.validate()?;
    let (cone, map, kept, constant_blocks) = match reduce(p) {
        Reduced::Inconsistent => {
            return Ok(SdpSolution::failed(SolveStatus::Infeasible, p.n_vars, 0))
        }
        Reduced::Unbounded => return Ok(SdpSolution::failed(SolveStatus::Unbounded, p.n_vars, 0)),
        Reduced::Cone {
            cone,
            map,
            kept,
            constant_blocks,
        } => (cone, map, kept, constant_blocks),
    };
    for c in &constant_blocks {
        let e = c
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if e < -tol {
            return Ok(SdpSolution::failed(SolveStatus::Infeasible, p.n_vars, 0));
        }
    }
    let constant = p.objective.eval(&map.x0);
    let finish = |z_kept: &[f64], pobj: f64, gap: f64, iterations: usize| {
        let mut z = vec![0.0; map.cols.len()];
        for (i, &j) in kept.iter().enumerate() {
            z[j] = z_kept[i];
        }
        let x = map.apply(&z);
        let value = p.objective.eval(&x);
        let dual_bound = match p.sense {
            Sense::Maximize => pobj + constant,
            Sense::Minimize => -pobj + constant,
        };
        let max_violation = certify(p, &x).max_violation();
        SdpSolution {
            status: SolveStatus::Optimal,
            value,
            dual_bound,
            x,
            gap,
            max_violation,
            iterations,
        }
    };
    if cone.m == 0 {
        return Ok(finish(&[], 0.0, 0.0, 0));
    }
    let r = solve_cone(&cone, tol, max_iter);
    match r.status {
        ConeStatus::Optimal => Ok(finish(&r.y, r.pobj, r.gap, r.iterations)),
        ConeStatus::Diverging => Ok(SdpSolution::failed(
            SolveStatus::Unbounded,
            p.n_vars,
            r.iterations,
        )),
        ConeStatus::Collapsing | ConeStatus::Stalled => {
            let status = if phase1_infeasible(&cone, tol, max_iter) {
                SolveStatus::Infeasible
            } else {
                SolveStatus::NumericalFailure
            };
            let mut s = finish(&r.y, r.pobj, r.gap, r.iterations);
            s.status = status;
            Ok(s)
        }
    }
}

/// `max t` s.t. every block `⪰ t·I`, `t ≤ 1`, `|y| ≤ PHASE1_BOX`.
/// The LMI is declared infeasible when the optimum is clearly negative.
fn phase1_infeasible(cone: &ConeProblem, tol: f64, max_iter: usize) -> bool {
    let t = cone.m;
    let mut blocks: Vec<ConeBlock> = cone
        .blocks
        .iter()
        .map(|b| {
            let mut b = b.clone();
            b.a.push((t, (0..b.n).map(|i| (i, i, -1.0)).collect()));
            b
        })
        .collect();
    let scalar = |c: f64, var: usize, coef: f64| ConeBlock {
        n: 1,
        c: nalgebra::DMatrix::from_element(1, 1, c),
        a: vec![(var, vec![(0, 0, coef)])],
    };
    blocks.push(scalar(1.0, t, -1.0));
    for j in 0..cone.m {
        blocks.push(scalar(PHASE1_BOX, j, 1.0));
        blocks.push(scalar(PHASE1_BOX, j, -1.0));
    }
    let mut b = vec![0.0; cone.m + 1];
    b[t] = 1.0;
    let p1 = ConeProblem {
        m: cone.m + 1,
        b,
        blocks,
    };
    let r = solve_cone(&p1, tol.max(1e-9), max_iter);
    let scale = 1.0 + cone.blocks.iter().map(|b| b.c.amax()).fold(0.0, f64::max);
    // pobj upper-bounds t up to the primal residual.
    let bound = if r.status == ConeStatus::Optimal {
        r.dobj
    } else {
        r.pobj
    };
    bound < -1e-6 * scale
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one() -> C64 {
        C64::new(1.0, 0.0)
    }

    /// max λ s.t. I − λ I ⪰ 0.
    fn scaled_identity(n: usize) -> SdpProblem {
        let mut p = SdpProblem::new(1, Sense::Maximize);
        p.objective = LinExpr::var(0);
        let mut b = HermitianBlock::new(n);
        for i in 0..n {
            b.add(None, i, i, one());
            b.add(Some(0), i, i, -one());
        }
        p.blocks.push(b);
        p
    }

    #[test]
    fn identity_lambda_max_is_one() {
        let s = solve_sdp(&scaled_identity(3), DEFAULT_TOL).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.value - 1.0).abs() < 1e-7);
        assert!(s.dual_bound >= s.value - 1e-7);
    }

    #[test]
    fn rejects_out_of_range_tolerance() {
        assert!(solve_sdp(&scaled_identity(2), 1e-2).is_err());
        assert!(solve_sdp(&scaled_identity(2), 1e-12).is_err());
    }

    #[test]
    fn equality_fixes_value() {
        let mut p = scaled_identity(2);
        p.equalities.push(LinExpr::var(0).equals(0.25));
        let s = solve_sdp(&p, DEFAULT_TOL).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.value - 0.25).abs() < 1e-12);
    }

    #[test]
    fn inconsistent_equalities_are_infeasible() {
        let mut p = scaled_identity(2);
        p.equalities.push(LinExpr::var(0).equals(0.25));
        p.equalities.push(LinExpr::var(0).equals(0.5));
        assert_eq!(
            solve_sdp(&p, DEFAULT_TOL).unwrap().status,
            SolveStatus::Infeasible
        );
    }

    #[test]
    fn lmi_infeasibility_detected() {
        // [[x, 1], [1, −x]] ⪰ 0 has no solution.
        let mut p = SdpProblem::new(1, Sense::Minimize);
        p.objective = LinExpr::var(0);
        let mut b = HermitianBlock::new(2);
        b.add(Some(0), 0, 0, one());
        b.add(Some(0), 1, 1, -one());
        b.add(None, 0, 1, one());
        p.blocks.push(b);
        assert_eq!(
            solve_sdp(&p, DEFAULT_TOL).unwrap().status,
            SolveStatus::Infeasible
        );
    }

    #[test]
    fn unbounded_detected() {
        // max x s.t. x ≥ 0.
        let mut p = SdpProblem::new(1, Sense::Maximize);
        p.objective = LinExpr::var(0);
        let mut b = HermitianBlock::new(1);
        b.add(Some(0), 0, 0, one());
        p.blocks.push(b);
        assert_eq!(
            solve_sdp(&p, DEFAULT_TOL).unwrap().status,
            SolveStatus::Unbounded
        );

        let mut q = SdpProblem::new(2, Sense::Maximize);
        q.objective = LinExpr::var(1);
        let mut b = HermitianBlock::new(1);
        b.add(Some(0), 0, 0, one());
        q.blocks.push(b);
        assert_eq!(
            solve_sdp(&q, DEFAULT_TOL).unwrap().status,
            SolveStatus::Unbounded
        );
    }

    #[test]
    fn complex_block_max_off_diagonal() {
        // max Im u s.t. [[1, u], [ū, 1]] ⪰ 0 with u = a + ib.
        let mut p = SdpProblem::new(2, Sense::Maximize);
        p.objective = LinExpr::var(1);
        let mut b = HermitianBlock::new(2);
        b.add(None, 0, 0, one());
        b.add(None, 1, 1, one());
        b.add_entry(0, 1, &LinExpr::var(0), &LinExpr::var(1));
        p.blocks.push(b);
        let s = solve_sdp(&p, DEFAULT_TOL).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.value - 1.0).abs() < 1e-6);
        assert!(s.x[0].abs() < 1e-5);
    }

    /// A random spectraplex problem: max ⟨W, ρ⟩ over Hermitian ρ ⪰ 0, tr ρ = 1
    /// has value λ_max(W).
    fn spectraplex(w: &nalgebra::DMatrix<C64>) -> SdpProblem {
        let n = w.nrows();
        let mut vars = 0;
        let mut p = SdpProblem::new(0, Sense::Maximize);
        let mut b = HermitianBlock::new(n);
        let mut trace = LinExpr::zero();
        for i in 0..n {
            for j in i..n {
                let re = LinExpr::var(vars);
                vars += 1;
                let im = if i == j {
                    LinExpr::zero()
                } else {
                    vars += 1;
                    LinExpr::var(vars - 1)
                };
                b.add_entry(i, j, &re, &im);
                let mult = if i == j { 1.0 } else { 2.0 };
                p.objective.add_scaled(&re, mult * w[(i, j)].re);
                p.objective.add_scaled(&im, mult * w[(i, j)].im);
                if i == j {
                    trace.add_scaled(&re, 1.0);
                }
            }
        }
        p.n_vars = vars;
        p.blocks.push(b);
        p.equalities.push(trace.equals(1.0));
        p
    }

    fn random_hermitian(n: usize, seed: u64) -> nalgebra::DMatrix<C64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = nalgebra::DMatrix::from_fn(n, n, |_, _| {
            C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        (&a + a.adjoint()) * C64::new(0.5, 0.0)
    }

    #[test]
    fn spectraplex_matches_eigenvalue_and_certifies() {
        for seed in 0..5 {
            let w = random_hermitian(4, seed);
            let want = w
                .symmetric_eigenvalues()
                .iter()
                .copied()
                .fold(f64::MIN, f64::max);
            let p = spectraplex(&w);
            let s = solve_sdp(&p, DEFAULT_TOL).unwrap();
            assert_eq!(s.status, SolveStatus::Optimal);
            assert!((s.value - want).abs() < 1e-6, "{} vs {want}", s.value);
            assert!(s.dual_bound >= s.value - 1e-6);
            assert!(certify(&p, &s.x).passes(10.0 * DEFAULT_TOL));
        }
    }

    #[test]
    fn objective_scaling_scales_value() {
        let w = random_hermitian(3, 42);
        let p = spectraplex(&w);
        let base = solve_sdp(&p, DEFAULT_TOL).unwrap();
        let mut q = p.clone();
        q.objective = q.objective.scaled(3.5);
        let scaled = solve_sdp(&q, DEFAULT_TOL).unwrap();
        assert!((scaled.value - 3.5 * base.value).abs() < 1e-6);
        let dx = base
            .x
            .iter()
            .zip(&scaled.x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dx < 1e-4);
    }

    #[test]
    fn deterministic() {
        let p = spectraplex(&random_hermitian(4, 7));
        let a = solve_sdp(&p, DEFAULT_TOL).unwrap();
        let b = solve_sdp(&p, DEFAULT_TOL).unwrap();
        assert_eq!(a, b);
    }
}
