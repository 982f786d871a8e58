//! Dense two-phase simplex with Bland's rule, for LPs with at most a few
//! dozen variables.

use serde::{Deserialize, Serialize};

use super::problem::{Sense, SolveStatus};
use crate::error::{Error, Result};

const EPS: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl Bound {
    pub const NONNEGATIVE: Bound = Bound {
        lower: Some(0.0),
        upper: None,
    };
    pub const FREE: Bound = Bound {
        lower: None,
        upper: None,
    };

    pub fn range(lower: f64, upper: f64) -> Bound {
        Bound {
            lower: Some(lower),
            upper: Some(upper),
        }
    }
}

/// Optimize `objective · x` subject to `a·x ≤ β` rows, `a·x = β` rows and
/// per-variable bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpProblem {
    pub sense: Sense,
    pub objective: Vec<f64>,
    pub inequalities: Vec<(Vec<f64>, f64)>,
    pub equalities: Vec<(Vec<f64>, f64)>,
    pub bounds: Vec<Bound>,
}

impl LpProblem {
    /// All variables nonnegative, no rows yet.
    pub fn new(sense: Sense, objective: Vec<f64>) -> Self {
        let n = objective.len();
        LpProblem {
            sense,
            objective,
            inequalities: Vec::new(),
            equalities: Vec::new(),
            bounds: vec![Bound::NONNEGATIVE; n],
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.objective.len();
        if self.bounds.len() != n {
            return Err(Error::invalid(
                "bounds length differs from objective length",
            ));
        }
        let rows = self.inequalities.iter().chain(&self.equalities);
        for (a, b) in rows {
            if a.len() != n {
                return Err(Error::invalid("constraint row has wrong length"));
            }
            if !b.is_finite() || a.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("non-finite LP data"));
            }
        }
        if self.objective.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite LP objective"));
        }
        for bd in &self.bounds {
            if let (Some(l), Some(u)) = (bd.lower, bd.upper) {
                if l > u {
                    return Err(Error::invalid("lower bound exceeds upper bound"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub status: SolveStatus,
    pub value: f64,
    pub x: Vec<f64>,
}

/// `x_i = offset + Σ sign · s_col`.
struct VarMap {
    offset: f64,
    cols: Vec<(usize, f64)>,
}

struct Tableau {
    rows: Vec<Vec<f64>>,
    basis: Vec<usize>,
    ncols: usize,
}

impl Tableau {
    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.rows[r][c];
        for v in self.rows[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.rows[r].clone();
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i != r {
                let f = row[c];
                if f != 0.0 {
                    for (v, pv) in row.iter_mut().zip(&pivot_row) {
                        *v -= f * pv;
                    }
                    row[c] = 0.0;
                }
            }
        }
        self.basis[r] = c;
    }

    /// Minimize `cost · s` over columns `< limit`. Returns false if unbounded.
    fn minimize(&mut self, cost: &[f64], limit: usize) -> bool {
        let rhs = self.ncols;
        loop {
            let mut entering = None;
            for c in 0..limit {
                if self.basis.contains(&c) {
                    continue;
                }
                let reduced = cost[c]
                    - self
                        .basis
                        .iter()
                        .zip(&self.rows)
                        .map(|(&b, row)| cost[b] * row[c])
                        .sum::<f64>();
                if reduced < -EPS {
                    entering = Some(c);
                    break;
                }
            }
            let Some(c) = entering else { return true };
            let mut leave: Option<(f64, usize, usize)> = None;
            for (r, row) in self.rows.iter().enumerate() {
                if row[c] > EPS {
                    let ratio = row[rhs] / row[c];
                    let better = match leave {
                        None => true,
                        Some((best, _, bvar)) => {
                            ratio < best - EPS || (ratio <= best + EPS && self.basis[r] < bvar)
                        }
                    };
                    if better {
                        leave = Some((ratio, r, self.basis[r]));
                    }
                }
            }
            let Some((_, r, _)) = leave else { return false };
            self.pivot(r, c);
        }
    }
}

pub fn solve_lp(p: &LpProblem) -> Result<LpSolution> {
    p.validate()?;
    let n = p.objective.len();

    let mut maps = Vec::with_capacity(n);
    let mut ncols = 0;
    let mut extra_rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    for bd in &p.bounds {
        match (bd.lower, bd.upper) {
            (Some(l), u) => {
                maps.push(VarMap {
                    offset: l,
                    cols: vec![(ncols, 1.0)],
                });
                if let Some(u) = u {
                    extra_rows.push((vec![(ncols, 1.0)], u - l));
                }
                ncols += 1;
            }
            (None, Some(u)) => {
                maps.push(VarMap {
                    offset: u,
                    cols: vec![(ncols, -1.0)],
                });
                ncols += 1;
            }
            (None, None) => {
                maps.push(VarMap {
                    offset: 0.0,
                    cols: vec![(ncols, 1.0), (ncols + 1, -1.0)],
                });
                ncols += 2;
            }
        }
    }
    let expand = |a: &[f64], b: f64| -> (Vec<(usize, f64)>, f64) {
        let mut row = Vec::new();
        let mut rhs = b;
        for (i, &ai) in a.iter().enumerate() {
            if ai != 0.0 {
                rhs -= ai * maps[i].offset;
                row.extend(maps[i].cols.iter().map(|&(c, s)| (c, s * ai)));
            }
        }
        (row, rhs)
    };
    let mut ineq: Vec<(Vec<(usize, f64)>, f64)> =
        p.inequalities.iter().map(|(a, b)| expand(a, *b)).collect();
    ineq.extend(extra_rows);
    let eqs: Vec<(Vec<(usize, f64)>, f64)> =
        p.equalities.iter().map(|(a, b)| expand(a, *b)).collect();

    let n_slack = ineq.len();
    let m = ineq.len() + eqs.len();
    let n_struct = ncols + n_slack;
    let total = n_struct + m;
    let mut rows = Vec::with_capacity(m);
    for (k, (row, rhs)) in ineq.iter().chain(&eqs).enumerate() {
        let mut t = vec![0.0; total + 1];
        for &(c, v) in row {
            t[c] += v;
        }
        if k < n_slack {
            t[ncols + k] = 1.0;
        }
        t[total] = *rhs;
        if *rhs < 0.0 {
            for v in t.iter_mut() {
                *v = -*v;
            }
        }
        t[n_struct + k] = 1.0;
        rows.push(t);
    }
    let mut tab = Tableau {
        rows,
        basis: (n_struct..total).collect(),
        ncols: total,
    };

    let mut phase1 = vec![0.0; total];
    for c in phase1.iter_mut().skip(n_struct) {
        *c = 1.0;
    }
    tab.minimize(&phase1, total);
    let infeas: f64 = tab
        .basis
        .iter()
        .zip(&tab.rows)
        .filter(|(&b, _)| b >= n_struct)
        .map(|(_, row)| row[total])
        .sum();
    let scale = 1.0 + tab.rows.iter().map(|r| r[total].abs()).fold(0.0, f64::max);
    if infeas > 1e-9 * scale {
        return Ok(LpSolution {
            status: SolveStatus::Infeasible,
            value: f64::NAN,
            x: vec![0.0; n],
        });
    }
    // Drive remaining artificials out of the basis; drop redundant rows.
    let mut r = 0;
    while r < tab.rows.len() {
        if tab.basis[r] >= n_struct {
            if let Some(c) = (0..n_struct).find(|&c| tab.rows[r][c].abs() > 1e-9) {
                tab.pivot(r, c);
            } else {
                tab.rows.remove(r);
                tab.basis.remove(r);
                continue;
            }
        }
        r += 1;
    }

    let sign = match p.sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    let mut cost = vec![0.0; total];
    for (i, &ci) in p.objective.iter().enumerate() {
        for &(c, s) in &maps[i].cols {
            cost[c] += sign * ci * s;
        }
    }
    if !tab.minimize(&cost, n_struct) {
        return Ok(LpSolution {
            status: SolveStatus::Unbounded,
            value: f64::NAN,
            x: vec![0.0; n],
        });
    }
    let mut s = vec![0.0; total];
    for (&b, row) in tab.basis.iter().zip(&tab.rows) {
        s[b] = row[total];
    }
    let x: Vec<f64> = maps
        .iter()
        .map(|m| m.offset + m.cols.iter().map(|&(c, sg)| sg * s[c]).sum::<f64>())
        .collect();
    let value = p.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
    Ok(LpSolution {
        status: SolveStatus::Optimal,
        value,
        x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn textbook_max() {
        // max 3x + 5y, x ≤ 4, 2y ≤ 12, 3x + 2y ≤ 18 → 36 at (2, 6).
        let mut p = LpProblem::new(Sense::Maximize, vec![3.0, 5.0]);
        p.inequalities = vec![
            (vec![1.0, 0.0], 4.0),
            (vec![0.0, 2.0], 12.0),
            (vec![3.0, 2.0], 18.0),
        ];
        let s = solve_lp(&p).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.value - 36.0).abs() < 1e-12);
        assert!((s.x[0] - 2.0).abs() < 1e-12 && (s.x[1] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn equality_fixes_variable() {
        let mut p = LpProblem::new(Sense::Minimize, vec![1.0]);
        p.bounds = vec![Bound::FREE];
        p.equalities.push((vec![1.0], -2.5));
        let s = solve_lp(&p).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.value + 2.5).abs() < 1e-12);
    }

    #[test]
    fn infeasible_and_unbounded() {
        let mut p = LpProblem::new(Sense::Maximize, vec![1.0]);
        p.inequalities.push((vec![1.0], -1.0));
        assert_eq!(solve_lp(&p).unwrap().status, SolveStatus::Infeasible);
        let q = LpProblem::new(Sense::Maximize, vec![1.0]);
        assert_eq!(solve_lp(&q).unwrap().status, SolveStatus::Unbounded);
    }

    #[test]
    fn bounds_are_respected() {
        let mut p = LpProblem::new(Sense::Maximize, vec![1.0, 1.0]);
        p.bounds = vec![
            Bound::range(-1.0, 2.0),
            Bound {
                lower: None,
                upper: Some(-3.0),
            },
        ];
        let s = solve_lp(&p).unwrap();
        assert!((s.value + 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_does_not_cycle() {
        // Beale's cycling example.
        let mut p = LpProblem::new(Sense::Minimize, vec![-0.75, 150.0, -0.02, 6.0]);
        p.inequalities = vec![
            (vec![0.25, -60.0, -0.04, 9.0], 0.0),
            (vec![0.5, -90.0, -0.02, 3.0], 0.0),
            (vec![0.0, 0.0, 1.0, 0.0], 1.0),
        ];
        let s = solve_lp(&p).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.value + 0.05).abs() < 1e-9);
    }

    /// Best objective over all vertices of `{x ≥ 0, A x ≤ b}` in two or three
    /// dimensions, found by solving every square subsystem of active rows.
    fn vertex_oracle(c: &[f64], rows: &[(Vec<f64>, f64)]) -> Option<f64> {
        let n = c.len();
        let mut all: Vec<(Vec<f64>, f64)> = rows.to_vec();
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = -1.0;
            all.push((e, 0.0));
        }
        let mut best: Option<f64> = None;
        let k = all.len();
        let mut idx: Vec<usize> = (0..n).collect();
        loop {
            let a = nalgebra::DMatrix::from_fn(n, n, |r, col| all[idx[r]].0[col]);
            let b = nalgebra::DVector::from_fn(n, |r, _| all[idx[r]].1);
            if let Some(x) = a.lu().solve(&b) {
                let feasible = all.iter().all(|(row, rhs)| {
                    row.iter().zip(x.iter()).map(|(p, q)| p * q).sum::<f64>() <= rhs + 1e-9
                });
                if feasible && x.iter().all(|v| v.is_finite()) {
                    let v: f64 = c.iter().zip(x.iter()).map(|(p, q)| p * q).sum();
                    best = Some(best.map_or(v, |b: f64| b.max(v)));
                }
            }
            // Next combination.
            let mut i = n;
            loop {
                if i == 0 {
                    return best;
                }
                i -= 1;
                if idx[i] < k - n + i {
                    idx[i] += 1;
                    for j in i + 1..n {
                        idx[j] = idx[j - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn matches_vertex_enumeration(
            c in proptest::collection::vec(-2.0f64..2.0, 3),
            a in proptest::collection::vec(0.1f64..2.0, 12),
            b in proptest::collection::vec(0.5f64..3.0, 4),
        ) {
            // Positive rows keep the polytope bounded and nonempty.
            let rows: Vec<(Vec<f64>, f64)> =
                (0..4).map(|r| (a[3 * r..3 * r + 3].to_vec(), b[r])).collect();
            let mut p = LpProblem::new(Sense::Maximize, c.clone());
            p.inequalities = rows.clone();
            let s = solve_lp(&p).unwrap();
            let want = vertex_oracle(&c, &rows).unwrap();
            prop_assert_eq!(s.status, SolveStatus::Optimal);
            prop_assert!((s.value - want).abs() < 1e-9 * (1.0 + want.abs()));
        }
    }
}
