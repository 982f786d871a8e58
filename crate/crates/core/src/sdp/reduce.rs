//! Equality elimination and conversion of an `SdpProblem` into the real
//! LMI form consumed by the interior-point loop.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::expr::Equality;
use super::ipm::{ConeBlock, ConeProblem};
use super::problem::{SdpProblem, Sense, C64};

/// `x = x0 + Σ_j z_j cols[j]`.
#[derive(Debug, Clone)]
pub(crate) struct AffineMap {
    pub x0: Vec<f64>,
    pub cols: Vec<Vec<(usize, f64)>>,
}

impl AffineMap {
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let mut x = self.x0.clone();
        for (col, &zj) in self.cols.iter().zip(z) {
            for &(k, c) in col {
                x[k] += c * zj;
            }
        }
        x
    }
}

#[derive(Debug)]
pub(crate) enum Elimination {
    Map(AffineMap),
    Inconsistent,
}

/// Gauss–Jordan elimination with full pivoting.
pub(crate) fn eliminate(n: usize, eqs: &[Equality]) -> Elimination {
    let k = eqs.len();
    let mut a = DMatrix::<f64>::zeros(k, n);
    let mut rhs = vec![0.0; k];
    for (r, eq) in eqs.iter().enumerate() {
        for &(v, c) in &eq.coeffs {
            a[(r, v)] += c;
        }
        rhs[r] = eq.rhs;
        let scale = a.row(r).amax();
        if scale > 0.0 {
            a.row_mut(r).scale_mut(1.0 / scale);
            rhs[r] /= scale;
        }
    }
    let tol = 1e-10;
    let mut row_done = vec![false; k];
    let mut col_pivot: Vec<Option<usize>> = vec![None; n];
    loop {
        let mut best = (0.0, 0, 0);
        for r in (0..k).filter(|&r| !row_done[r]) {
            for c in (0..n).filter(|&c| col_pivot[c].is_none()) {
                let v = a[(r, c)].abs();
                if v > best.0 {
                    best = (v, r, c);
                }
            }
        }
        let (v, pr, pc) = best;
        if v <= tol {
            break;
        }
        let piv = a[(pr, pc)];
        a.row_mut(pr).scale_mut(1.0 / piv);
        rhs[pr] /= piv;
        for r in 0..k {
            if r != pr {
                let f = a[(r, pc)];
                if f != 0.0 {
                    for c in 0..n {
                        let t = a[(pr, c)];
                        if t != 0.0 {
                            a[(r, c)] -= f * t;
                        }
                    }
                    a[(r, pc)] = 0.0;
                    rhs[r] -= f * rhs[pr];
                }
            }
        }
        row_done[pr] = true;
        col_pivot[pc] = Some(pr);
    }
    for r in (0..k).filter(|&r| !row_done[r]) {
        if rhs[r].abs() > 1e-8 {
            return Elimination::Inconsistent;
        }
    }
    let mut x0 = vec![0.0; n];
    for c in 0..n {
        if let Some(r) = col_pivot[c] {
            x0[c] = rhs[r];
        }
    }
    let mut cols = Vec::new();
    for f in (0..n).filter(|&c| col_pivot[c].is_none()) {
        let mut col = vec![(f, 1.0)];
        for c in 0..n {
            if let Some(r) = col_pivot[c] {
                let v = a[(r, f)];
                if v.abs() > 1e-14 {
                    col.push((c, -v));
                }
            }
        }
        col.sort_by_key(|t| t.0);
        cols.push(col);
    }
    Elimination::Map(AffineMap { x0, cols })
}

/// Real symmetric embedding of an upper-triangle Hermitian entry list as
/// full triplets. Uses the `n × n` real block when `real` is set.
fn embed_entries(
    n: usize,
    entries: &BTreeMap<(usize, usize), C64>,
    real: bool,
) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    let mut push = |i: usize, j: usize, v: f64| {
        if v != 0.0 {
            out.push((i, j, v));
        }
    };
    for (&(i, j), c) in entries {
        push(i, j, c.re);
        if i != j {
            push(j, i, c.re);
        }
        if !real {
            push(i + n, j + n, c.re);
            if i != j {
                push(j + n, i + n, c.re);
                push(i, j + n, -c.im);
                push(i + n, j, c.im);
                push(j, i + n, c.im);
                push(j + n, i, -c.im);
            }
        }
    }
    out
}

#[cfg(test)]
use super::problem::HermitianBlock;

fn dense(n: usize, t: &[(usize, usize, f64)]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for &(i, j, v) in t {
        m[(i, j)] += v;
    }
    m
}

fn combine(into: &mut BTreeMap<(usize, usize), C64>, from: &BTreeMap<(usize, usize), C64>, s: f64) {
    for (&key, &c) in from {
        *into.entry(key).or_insert(C64::new(0.0, 0.0)) += c * s;
    }
}

/// Outcome of reducing a problem to cone form.
pub(crate) enum Reduced {
    Cone {
        cone: ConeProblem,
        map: AffineMap,
        /// Original reduced-variable index for each cone variable.
        kept: Vec<usize>,
        /// Blocks that became constant after elimination.
        constant_blocks: Vec<DMatrix<f64>>,
    },
    Inconsistent,
    /// A free direction improves the objective without touching any block.
    Unbounded,
}

pub(crate) fn reduce(p: &SdpProblem) -> Reduced {
    let map = match eliminate(p.n_vars, &p.equalities) {
        Elimination::Map(m) => m,
        Elimination::Inconsistent => return Reduced::Inconsistent,
    };
    let obj = p.objective.normalized();
    let mut cdense = vec![0.0; p.n_vars];
    for &(v, c) in &obj.terms {
        cdense[v] += c;
    }
    let sign = match p.sense {
        Sense::Maximize => 1.0,
        Sense::Minimize => -1.0,
    };
    let nz = map.cols.len();
    let b_full: Vec<f64> = map
        .cols
        .iter()
        .map(|col| sign * col.iter().map(|&(k, c)| cdense[k] * c).sum::<f64>())
        .collect();

    struct Tmp {
        n: usize,
        real: bool,
        c: BTreeMap<(usize, usize), C64>,
        a: Vec<(usize, BTreeMap<(usize, usize), C64>)>,
    }
    let mut present = vec![false; nz];
    let mut tmps = Vec::new();
    for blk in &p.blocks {
        let mut c = blk.constant.clone();
        for (&k, f) in &blk.terms {
            if map.x0[k] != 0.0 {
                combine(&mut c, f, map.x0[k]);
            }
        }
        let mut a = Vec::new();
        for (j, col) in map.cols.iter().enumerate() {
            let mut acc = BTreeMap::new();
            for &(k, coef) in col {
                if let Some(f) = blk.terms.get(&k) {
                    combine(&mut acc, f, coef);
                }
            }
            acc.retain(|_, v: &mut C64| v.norm() > 1e-15);
            if !acc.is_empty() {
                present[j] = true;
                a.push((j, acc));
            }
        }
        let real = std::iter::once(&c)
            .chain(a.iter().map(|t| &t.1))
            .all(|m| m.values().all(|z| z.im == 0.0));
        tmps.push(Tmp {
            n: blk.dim,
            real,
            c,
            a,
        });
    }

    let scale = 1.0 + b_full.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut kept = Vec::new();
    let mut new_index = vec![usize::MAX; nz];
    for j in 0..nz {
        if present[j] {
            new_index[j] = kept.len();
            kept.push(j);
        } else if b_full[j].abs() > 1e-12 * scale {
            return Reduced::Unbounded;
        }
    }

    let mut blocks = Vec::new();
    let mut constant_blocks = Vec::new();
    for t in tmps {
        let rn = if t.real { t.n } else { 2 * t.n };
        let c = dense(rn, &embed_entries(t.n, &t.c, t.real));
        if t.a.is_empty() {
            constant_blocks.push(c);
            continue;
        }
        let a =
            t.a.iter()
                .map(|(j, m)| (new_index[*j], embed_entries(t.n, m, t.real)))
                .collect();
        blocks.push(ConeBlock { n: rn, c, a });
    }
    let b = kept.iter().map(|&j| b_full[j]).collect();
    let cone = ConeProblem {
        m: kept.len(),
        b,
        blocks,
    };
    Reduced::Cone {
        cone,
        map,
        kept,
        constant_blocks,
    }
}

/// Constant part of `HermitianBlock` as a real embedding (used by tests).
#[cfg(test)]
pub(crate) fn embed_block_constant(b: &HermitianBlock) -> DMatrix<f64> {
    dense(2 * b.dim, &embed_entries(b.dim, &b.constant, false))
}
