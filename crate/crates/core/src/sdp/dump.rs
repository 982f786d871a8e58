//! Plain-text problem format.
//!
//! ```text
//! imm-sdp 1
//! vars <n>
//! sense max|min
//! objective <constant> <count>
//! <var> <coef>                  (count lines)
//! blocks <count>
//! block <dim> <count>
//! <var|c> <i> <j> <re> <im>     (upper triangle, i <= j; `c` = constant)
//! equalities <count>
//! eq <rhs> <count>
//! <var> <coef>
//! ```
//!
//! Indices are zero-based. Floats use the shortest representation that
//! round-trips.

use std::fmt::Write;

use super::expr::{Equality, LinExpr};
use super::problem::{HermitianBlock, SdpProblem, Sense, C64};
use crate::error::{Error, Result};

pub fn dump_problem(p: &SdpProblem) -> String {
    let mut s = String::new();
    let obj = p.objective.normalized();
    let _ = writeln!(s, "imm-sdp 1");
    let _ = writeln!(s, "vars {}", p.n_vars);
    let sense = match p.sense {
        Sense::Maximize => "max",
        Sense::Minimize => "min",
    };
    let _ = writeln!(s, "sense {sense}");
    let _ = writeln!(s, "objective {:?} {}", obj.constant, obj.terms.len());
    for (v, c) in &obj.terms {
        let _ = writeln!(s, "{v} {c:?}");
    }
    let _ = writeln!(s, "blocks {}", p.blocks.len());
    for b in &p.blocks {
        let count = b.constant.len() + b.terms.values().map(|m| m.len()).sum::<usize>();
        let _ = writeln!(s, "block {} {count}", b.dim);
        for ((i, j), z) in &b.constant {
            let _ = writeln!(s, "c {i} {j} {:?} {:?}", z.re, z.im);
        }
        for (v, m) in &b.terms {
            for ((i, j), z) in m {
                let _ = writeln!(s, "{v} {i} {j} {:?} {:?}", z.re, z.im);
            }
        }
    }
    let _ = writeln!(s, "equalities {}", p.equalities.len());
    for e in &p.equalities {
        let _ = writeln!(s, "eq {:?} {}", e.rhs, e.coeffs.len());
        for (v, c) in &e.coeffs {
            let _ = writeln!(s, "{v} {c:?}");
        }
    }
    s
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next_fields(&mut self) -> Result<(usize, Vec<&'a str>)> {
        for (n, line) in self.inner.by_ref() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            return Ok((n + 1, line.split_whitespace().collect()));
        }
        Err(Error::Parse("unexpected end of input".into()))
    }

    fn keyword(&mut self, kw: &str, nargs: usize) -> Result<(usize, Vec<&'a str>)> {
        let (n, f) = self.next_fields()?;
        if f.first() != Some(&kw) || f.len() != nargs + 1 {
            return Err(Error::Parse(format!(
                "line {n}: expected `{kw}` with {nargs} fields"
            )));
        }
        Ok((n, f[1..].to_vec()))
    }
}

fn num<T: std::str::FromStr>(n: usize, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Parse(format!("line {n}: bad number `{s}`")))
}

fn terms(lines: &mut Lines, count: usize) -> Result<Vec<(usize, f64)>> {
    (0..count)
        .map(|_| {
            let (n, f) = lines.next_fields()?;
            if f.len() != 2 {
                return Err(Error::Parse(format!("line {n}: expected `<var> <coef>`")));
            }
            Ok((num(n, f[0])?, num(n, f[1])?))
        })
        .collect()
}

pub fn load_problem(text: &str) -> Result<SdpProblem> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (n, f) = lines.keyword("imm-sdp", 1)?;
    if f[0] != "1" {
        return Err(Error::Parse(format!(
            "line {n}: unsupported version {}",
            f[0]
        )));
    }
    let (n, f) = lines.keyword("vars", 1)?;
    let n_vars = num(n, f[0])?;
    let (n, f) = lines.keyword("sense", 1)?;
    let sense = match f[0] {
        "max" => Sense::Maximize,
        "min" => Sense::Minimize,
        other => return Err(Error::Parse(format!("line {n}: bad sense `{other}`"))),
    };
    let (n, f) = lines.keyword("objective", 2)?;
    let constant = num(n, f[0])?;
    let count = num(n, f[1])?;
    let objective = LinExpr {
        constant,
        terms: terms(&mut lines, count)?,
    };
    let (n, f) = lines.keyword("blocks", 1)?;
    let nblocks: usize = num(n, f[0])?;
    let mut blocks = Vec::with_capacity(nblocks);
    for _ in 0..nblocks {
        let (n, f) = lines.keyword("block", 2)?;
        let mut b = HermitianBlock::new(num(n, f[0])?);
        let count: usize = num(n, f[1])?;
        for _ in 0..count {
            let (n, f) = lines.next_fields()?;
            if f.len() != 5 {
                return Err(Error::Parse(format!("line {n}: expected 5 fields")));
            }
            let var = if f[0] == "c" {
                None
            } else {
                Some(num(n, f[0])?)
            };
            let i: usize = num(n, f[1])?;
            let j: usize = num(n, f[2])?;
            if i > j || j >= b.dim {
                return Err(Error::Parse(format!(
                    "line {n}: entry ({i},{j}) out of range"
                )));
            }
            b.add(var, i, j, C64::new(num(n, f[3])?, num(n, f[4])?));
        }
        blocks.push(b);
    }
    let (n, f) = lines.keyword("equalities", 1)?;
    let neq: usize = num(n, f[0])?;
    let mut equalities = Vec::with_capacity(neq);
    for _ in 0..neq {
        let (n, f) = lines.keyword("eq", 2)?;
        let rhs = num(n, f[0])?;
        let count = num(n, f[1])?;
        equalities.push(Equality {
            coeffs: terms(&mut lines, count)?,
            rhs,
        });
    }
    let p = SdpProblem {
        n_vars,
        sense,
        objective,
        blocks,
        equalities,
    };
    p.validate()?;
    Ok(p)
}
