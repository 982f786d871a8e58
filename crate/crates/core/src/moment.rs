//! Symbolic instrument moment matrices `χ_{a|x}`.
//!
//! Block `(a,x)` has entry `(i,j) = tr[I_{a|x}(ρ) S_j† S_i]` over a monomial
//! basis `{S_i}`. Entries are affine expressions in a real variable vector;
//! entries with the same reduced word share variables, and an entry whose
//! word is the adjoint of another's uses the conjugate.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::algebra::{adjoint, build_basis, multiply, Generator, MonomialBasis, OperatorWord};
use crate::error::{Error, Result};
use crate::sdp::{Equality, HermitianBlock, LinExpr, SdpProblem, Sense};

/// Absolute tolerance for correlation-table validation.
pub const TABLE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scenario {
    pub n_a: usize,
    pub n_x: usize,
    pub n_b: usize,
    pub n_y: usize,
}

impl Scenario {
    pub fn new(n_a: usize, n_x: usize, n_b: usize, n_y: usize) -> Result<Self> {
        if n_a == 0 || n_x == 0 || n_y == 0 || n_b < 2 {
            return Err(Error::invalid(format!(
                "scenario ({n_a},{n_x},{n_b},{n_y}) needs nA, nX, nY ≥ 1 and nB ≥ 2"
            )));
        }
        Ok(Scenario { n_a, n_x, n_b, n_y })
    }

    /// Two settings and two outcomes at both times.
    pub fn chsh() -> Self {
        Scenario {
            n_a: 2,
            n_x: 2,
            n_b: 2,
            n_y: 2,
        }
    }

    pub fn generators(&self) -> Vec<Generator> {
        Generator::all(self.n_b, self.n_y)
    }

    pub fn n_blocks(&self) -> usize {
        self.n_a * self.n_x
    }

    /// Position of block `(a,x)`; blocks are ordered by `x`, then `a`.
    pub fn block_index(&self, a: usize, x: usize) -> usize {
        x * self.n_a + a
    }

    pub fn block_label(&self, index: usize) -> (usize, usize) {
        (index % self.n_a, index / self.n_a)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n_a, self.n_x, self.n_b, self.n_y)
    }
}

/// Entry `(row, col)` of block `(a, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EntryRef {
    pub a: usize,
    pub x: usize,
    pub row: usize,
    pub col: usize,
}

/// What a word class of a block stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    /// `P(a|x)`.
    Marginal,
    /// `P(a,b|x,y)`.
    Joint {
        b: usize,
        y: usize,
    },
    Unknown,
}

/// A word together with its adjoint, and the variables carrying its moment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordClass {
    pub word: OperatorWord,
    pub binding: Binding,
    /// Offset of the real part within the block's variables.
    pub re: usize,
    /// Offset of the imaginary part; `None` for self-adjoint words.
    pub im: Option<usize>,
}

/// Variable layout shared by every block built on one basis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    basis: MonomialBasis,
    classes: Vec<WordClass>,
    /// For each entry: class index and whether the entry is the adjoint of
    /// the class word. `None` when the entry's word is zero.
    entries: Vec<Vec<Option<(usize, bool)>>>,
    lookup: HashMap<OperatorWord, usize>,
    n_vars: usize,
}

impl BlockLayout {
    pub fn new(basis: MonomialBasis) -> Self {
        let n = basis.len();
        let words = basis.words();
        let mut reps = Vec::new();
        let mut raw = vec![vec![None; n]; n];
        for i in 0..n {
            for j in 0..n {
                if let Some(w) = multiply(&adjoint(&words[j]), &words[i]).into_word() {
                    reps.push(w.class_representative());
                    raw[i][j] = Some(w);
                }
            }
        }
        reps.sort();
        reps.dedup();
        let mut classes = Vec::with_capacity(reps.len());
        let mut lookup = HashMap::new();
        let mut n_vars = 0;
        for (k, w) in reps.into_iter().enumerate() {
            let binding = match w.letters() {
                [] => Binding::Marginal,
                [g] => Binding::Joint {
                    b: g.outcome,
                    y: g.setting,
                },
                _ => Binding::Unknown,
            };
            let re = n_vars;
            n_vars += 1;
            let im = if w.is_self_adjoint() {
                None
            } else {
                n_vars += 1;
                Some(n_vars - 1)
            };
            lookup.insert(w.clone(), k);
            classes.push(WordClass {
                word: w,
                binding,
                re,
                im,
            });
        }
        let entries = raw
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|w| {
                        w.map(|w| {
                            let rep = w.class_representative();
                            (lookup[&rep], rep != w)
                        })
                    })
                    .collect()
            })
            .collect();
        BlockLayout {
            basis,
            classes,
            entries,
            lookup,
            n_vars,
        }
    }

    pub fn basis(&self) -> &MonomialBasis {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn classes(&self) -> &[WordClass] {
        &self.classes
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    /// Class index and conjugation flag of entry `(i,j)`.
    pub fn entry_class(&self, i: usize, j: usize) -> Option<(usize, bool)> {
        self.entries[i][j]
    }

    /// Class index of `w` and whether `w` is the adjoint of its class word.
    pub fn word_class(&self, w: &OperatorWord) -> Option<(usize, bool)> {
        let rep = w.class_representative();
        self.lookup.get(&rep).map(|&k| (k, rep != *w))
    }

    /// `(Re, Im)` of the moment of class `k` for the block at `offset`,
    /// conjugated when `adj` is set.
    pub fn class_expr(&self, offset: usize, k: usize, adj: bool) -> (LinExpr, LinExpr) {
        let c = &self.classes[k];
        let re = LinExpr::var(offset + c.re);
        let im = match c.im {
            None => LinExpr::zero(),
            Some(v) => LinExpr::var(offset + v).scaled(if adj { -1.0 } else { 1.0 }),
        };
        (re, im)
    }

    /// `(Re, Im)` of the moment of `w`, or `None` if `w` does not occur in
    /// the block.
    pub fn word_expr(&self, offset: usize, w: &OperatorWord) -> Option<(LinExpr, LinExpr)> {
        self.word_class(w)
            .map(|(k, adj)| self.class_expr(offset, k, adj))
    }

    /// `Im = 0` for every non-self-adjoint class of the block at `offset`.
    pub fn real_constraints(&self, offset: usize) -> Vec<Equality> {
        self.classes
            .iter()
            .filter_map(|c| c.im)
            .map(|v| LinExpr::var(offset + v).equals(0.0))
            .collect()
    }

    /// The symbolic Hermitian matrix for a block whose variables start at
    /// `offset`.
    pub fn block(&self, offset: usize) -> HermitianBlock {
        let n = self.dim();
        let mut b = HermitianBlock::new(n);
        for i in 0..n {
            for j in i..n {
                if let Some((k, adj)) = self.entries[i][j] {
                    let (re, im) = self.class_expr(offset, k, adj);
                    b.add_entry(i, j, &re, &im);
                }
            }
        }
        b
    }
}

/// Variable range of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockVars {
    pub a: usize,
    pub x: usize,
    pub offset: usize,
}

/// The family `{χ_{a|x}}` over one basis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MomentModel {
    scenario: Scenario,
    layout: BlockLayout,
    blocks: Vec<BlockVars>,
}

pub fn build_model(scenario: Scenario, level: usize) -> Result<MomentModel> {
    let scenario = Scenario::new(scenario.n_a, scenario.n_x, scenario.n_b, scenario.n_y)?;
    let basis = build_basis(&scenario.generators(), level)?;
    let layout = BlockLayout::new(basis);
    let blocks = (0..scenario.n_blocks())
        .map(|idx| {
            let (a, x) = scenario.block_label(idx);
            BlockVars {
                a,
                x,
                offset: idx * layout.n_vars(),
            }
        })
        .collect();
    Ok(MomentModel {
        scenario,
        layout,
        blocks,
    })
}

impl MomentModel {
    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn basis(&self) -> &MonomialBasis {
        self.layout.basis()
    }

    pub fn level(&self) -> usize {
        self.basis().level()
    }

    pub fn blocks(&self) -> &[BlockVars] {
        &self.blocks
    }

    /// Variables used by the χ blocks; extra variables (e.g. hidden-state
    /// blocks) may be appended after this.
    pub fn n_vars(&self) -> usize {
        self.blocks.len() * self.layout.n_vars()
    }

    pub fn offset(&self, a: usize, x: usize) -> usize {
        self.blocks[self.scenario.block_index(a, x)].offset
    }

    pub fn block_matrix(&self, a: usize, x: usize) -> HermitianBlock {
        self.layout.block(self.offset(a, x))
    }

    pub fn block_matrices(&self) -> Vec<HermitianBlock> {
        self.blocks
            .iter()
            .map(|b| self.layout.block(b.offset))
            .collect()
    }

    pub fn binding(&self, e: EntryRef) -> Option<Binding> {
        self.layout
            .entry_class(e.row, e.col)
            .map(|(k, _)| self.layout.classes[k].binding)
    }

    /// `(Re, Im)` of entry `e`.
    pub fn entry_expr(&self, e: EntryRef) -> (LinExpr, LinExpr) {
        match self.layout.entry_class(e.row, e.col) {
            None => (LinExpr::zero(), LinExpr::zero()),
            Some((k, adj)) => self.layout.class_expr(self.offset(e.a, e.x), k, adj),
        }
    }

    /// `(Re, Im)` of `tr[I_{a|x}(ρ) w]`.
    pub fn word_expr(&self, a: usize, x: usize, w: &OperatorWord) -> Option<(LinExpr, LinExpr)> {
        self.layout.word_expr(self.offset(a, x), w)
    }

    /// `P(a|x)`.
    pub fn marginal_expr(&self, a: usize, x: usize) -> LinExpr {
        self.word_expr(a, x, &OperatorWord::identity())
            .expect("identity is in every basis")
            .0
    }

    /// `P(a,b|x,y)`; the last outcome is `P(a|x) − Σ_{b'} P(a,b'|x,y)`.
    pub fn prob_expr(&self, a: usize, b: usize, x: usize, y: usize) -> LinExpr {
        let s = self.scenario;
        if b + 1 < s.n_b {
            let w = OperatorWord::single(Generator::new(b, y));
            self.word_expr(a, x, &w)
                .expect("generators are in every basis")
                .0
        } else {
            let mut e = self.marginal_expr(a, x);
            for b2 in 0..s.n_b - 1 {
                e.add_scaled(&self.prob_expr(a, b2, x, y), -1.0);
            }
            e
        }
    }

    /// `Σ_a χ_{a|x}(1) = 1` for every `x`.
    pub fn normalization_constraints(&self) -> Vec<Equality> {
        (0..self.scenario.n_x)
            .map(|x| {
                let mut e = LinExpr::zero();
                for a in 0..self.scenario.n_a {
                    e.add_scaled(&self.marginal_expr(a, x), 1.0);
                }
                e.equals(1.0)
            })
            .collect()
    }

    /// Imaginary parts of every χ block fixed to zero.
    ///
    /// Conjugating every moment maps feasible points to feasible points
    /// whenever the objective and the constraints only involve real parts
    /// or come in conjugate pairs (data, no-signalling in time, spans of
    /// realizations, which are closed under complex conjugation). The
    /// average of a point and its conjugate is then real with the same
    /// objective, so the restriction loses nothing and halves the size of
    /// every block the solver sees.
    pub fn real_constraints(&self) -> Vec<Equality> {
        self.blocks
            .iter()
            .flat_map(|b| self.layout.real_constraints(b.offset))
            .collect()
    }

    /// PSD blocks and normalization; no objective yet.
    pub fn base_problem(&self, sense: Sense) -> SdpProblem {
        let mut p = SdpProblem::new(self.n_vars(), sense);
        p.blocks = self.block_matrices();
        p.equalities = self.normalization_constraints();
        p
    }
}

/// Fix every bound entry to the observed value.
pub fn bind_data(model: &MomentModel, data: &CorrelationTable) -> Result<Vec<Equality>> {
    let s = model.scenario();
    if data.scenario() != s {
        return Err(Error::InvalidTable(format!(
            "table shape {} does not match scenario {s}",
            data.scenario()
        )));
    }
    data.validate(TABLE_TOL)?;
    let mut out = Vec::new();
    for x in 0..s.n_x {
        for a in 0..s.n_a {
            out.push(model.marginal_expr(a, x).equals(data.marginal(a, x)));
            for y in 0..s.n_y {
                for b in 0..s.n_b - 1 {
                    out.push(model.prob_expr(a, b, x, y).equals(data.get(a, b, x, y)));
                }
            }
        }
    }
    Ok(out)
}

/// `Σ_a χ_{a|x} = Σ_a χ_{a|x'}` entrywise, for every pair `x < x'`.
///
/// One equality per variable of a word class (real part, and imaginary part
/// when the word is not self-adjoint), which already removes the duplicates
/// among the matrix entries.
pub fn nsit_constraints(model: &MomentModel) -> Vec<Equality> {
    let s = model.scenario();
    let per_block = model.layout().n_vars();
    let mut out = Vec::new();
    for x in 0..s.n_x {
        for x2 in x + 1..s.n_x {
            for v in 0..per_block {
                let mut e = LinExpr::zero();
                for a in 0..s.n_a {
                    e.add_term(model.offset(a, x) + v, 1.0);
                    e.add_term(model.offset(a, x2) + v, -1.0);
                }
                out.push(e.equals(0.0));
            }
        }
    }
    out
}

/// Coefficients on `P(a,b|x,y)`, keyed by `(a,b,x,y)`.
pub type Coefficients = BTreeMap<(usize, usize, usize, usize), f64>;

/// `Σ coef · P(a,b|x,y)` as an affine expression over the model.
pub fn functional(model: &MomentModel, coefficients: &Coefficients) -> Result<LinExpr> {
    let s = model.scenario();
    let mut out = LinExpr::zero();
    for (&(a, b, x, y), &c) in coefficients {
        if a >= s.n_a || b >= s.n_b || x >= s.n_x || y >= s.n_y {
            return Err(Error::invalid(format!(
                "coefficient index ({a},{b},{x},{y}) out of range"
            )));
        }
        out.add_scaled(&model.prob_expr(a, b, x, y), c);
    }
    Ok(out.normalized())
}

/// `Σ coef · Re χ_{a|x}[i,j]` over entries bound to probabilities.
pub fn entry_functional(model: &MomentModel, coefficients: &[(EntryRef, f64)]) -> Result<LinExpr> {
    let s = model.scenario();
    let n = model.basis().len();
    let mut out = LinExpr::zero();
    for &(e, c) in coefficients {
        if e.a >= s.n_a || e.x >= s.n_x || e.row >= n || e.col >= n {
            return Err(Error::invalid(format!("entry {e:?} out of range")));
        }
        match model.binding(e) {
            Some(Binding::Marginal) | Some(Binding::Joint { .. }) => {
                out.add_scaled(&model.entry_expr(e).0, c);
            }
            _ => {
                return Err(Error::UnboundEntry(format!(
                    "block ({},{}) entry ({},{})",
                    e.a, e.x, e.row, e.col
                )))
            }
        }
    }
    Ok(out.normalized())
}

/// Temporal CHSH: `Σ_{x,y} (−1)^{xy} ⟨A_x B_y⟩` with
/// `⟨A_x B_y⟩ = P(a=b|x,y) − P(a≠b|x,y)`.
pub fn chsh_coefficients() -> Coefficients {
    let mut c = Coefficients::new();
    for x in 0..2 {
        for y in 0..2 {
            let sign = if x * y == 1 { -1.0 } else { 1.0 };
            for a in 0..2 {
                for b in 0..2 {
                    c.insert((a, b, x, y), if a == b { sign } else { -sign });
                }
            }
        }
    }
    c
}

/// Probabilities `P(a,b|x,y)` of a temporal scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTable {
    scenario: Scenario,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TableDoc {
    #[serde(rename = "nA")]
    n_a: usize,
    #[serde(rename = "nX")]
    n_x: usize,
    #[serde(rename = "nB")]
    n_b: usize,
    #[serde(rename = "nY")]
    n_y: usize,
    entries: Vec<(usize, usize, usize, usize, f64)>,
}

impl CorrelationTable {
    pub fn zeros(scenario: Scenario) -> Self {
        let n = scenario.n_a * scenario.n_b * scenario.n_x * scenario.n_y;
        CorrelationTable {
            scenario,
            values: vec![0.0; n],
        }
    }

    pub fn from_fn(scenario: Scenario, f: impl Fn(usize, usize, usize, usize) -> f64) -> Self {
        let mut t = CorrelationTable::zeros(scenario);
        for a in 0..scenario.n_a {
            for b in 0..scenario.n_b {
                for x in 0..scenario.n_x {
                    for y in 0..scenario.n_y {
                        t.set(a, b, x, y, f(a, b, x, y));
                    }
                }
            }
        }
        t
    }

    fn index(&self, a: usize, b: usize, x: usize, y: usize) -> usize {
        let s = self.scenario;
        ((a * s.n_b + b) * s.n_x + x) * s.n_y + y
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    pub fn get(&self, a: usize, b: usize, x: usize, y: usize) -> f64 {
        self.values[self.index(a, b, x, y)]
    }

    pub fn set(&mut self, a: usize, b: usize, x: usize, y: usize, p: f64) {
        let i = self.index(a, b, x, y);
        self.values[i] = p;
    }

    /// `P(a|x)` read from `y = 0`.
    pub fn marginal(&self, a: usize, x: usize) -> f64 {
        (0..self.scenario.n_b).map(|b| self.get(a, b, x, 0)).sum()
    }

    /// `Σ coef · P(a,b|x,y)`.
    pub fn evaluate(&self, coefficients: &Coefficients) -> f64 {
        coefficients
            .iter()
            .map(|(&(a, b, x, y), c)| c * self.get(a, b, x, y))
            .sum()
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        let s = self.scenario;
        for (i, &p) in self.values.iter().enumerate() {
            if !p.is_finite() || p < -tol || p > 1.0 + tol {
                return Err(Error::InvalidTable(format!(
                    "value {p} at position {i} outside [0,1]"
                )));
            }
        }
        for x in 0..s.n_x {
            for y in 0..s.n_y {
                let mut total = 0.0;
                for a in 0..s.n_a {
                    for b in 0..s.n_b {
                        total += self.get(a, b, x, y);
                    }
                }
                if (total - 1.0).abs() > tol {
                    return Err(Error::InvalidTable(format!(
                        "Σ P(a,b|{x},{y}) = {total}, expected 1"
                    )));
                }
            }
            for a in 0..s.n_a {
                let m0 = self.marginal(a, x);
                for y in 1..s.n_y {
                    let m: f64 = (0..s.n_b).map(|b| self.get(a, b, x, y)).sum();
                    if (m - m0).abs() > tol {
                        return Err(Error::InvalidTable(format!(
                            "arrow of time violated: Σ_b P({a},b|{x},{y}) = {m} but {m0} for y=0"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let s = self.scenario;
        let mut entries = Vec::with_capacity(self.values.len());
        for a in 0..s.n_a {
            for b in 0..s.n_b {
                for x in 0..s.n_x {
                    for y in 0..s.n_y {
                        entries.push((a, b, x, y, self.get(a, b, x, y)));
                    }
                }
            }
        }
        let doc = TableDoc {
            n_a: s.n_a,
            n_x: s.n_x,
            n_b: s.n_b,
            n_y: s.n_y,
            entries,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Parse and validate. Entries not listed are zero; duplicates are an
    /// error.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TableDoc = serde_json::from_str(text)?;
        let scenario = Scenario::new(doc.n_a, doc.n_x, doc.n_b, doc.n_y)?;
        let mut t = CorrelationTable::zeros(scenario);
        let mut seen = vec![false; t.values.len()];
        for (a, b, x, y, p) in doc.entries {
            if a >= doc.n_a || b >= doc.n_b || x >= doc.n_x || y >= doc.n_y {
                return Err(Error::InvalidTable(format!(
                    "entry ({a},{b},{x},{y}) out of range"
                )));
            }
            let i = t.index(a, b, x, y);
            if seen[i] {
                return Err(Error::InvalidTable(format!(
                    "duplicate entry ({a},{b},{x},{y})"
                )));
            }
            seen[i] = true;
            t.values[i] = p;
        }
        t.validate(TABLE_TOL)?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdp::{solve_sdp, DEFAULT_TOL};

    fn gen(b: usize, y: usize) -> OperatorWord {
        OperatorWord::single(Generator::new(b, y))
    }

    fn uniform() -> CorrelationTable {
        CorrelationTable::from_fn(Scenario::chsh(), |_, _, _, _| 0.25)
    }

    #[test]
    fn chsh_level_one_layout() {
        let m = build_model(Scenario::chsh(), 1).unwrap();
        assert_eq!(m.blocks().len(), 4);
        assert_eq!(m.basis().len(), 3);
        // Words 1, E0|0, E0|1, E0|0 E0|1 (complex).
        assert_eq!(m.layout().n_vars(), 5);
        for a in 0..2 {
            for x in 0..2 {
                let e = |row, col| m.binding(EntryRef { a, x, row, col });
                assert_eq!(e(0, 0), Some(Binding::Marginal));
                assert_eq!(e(0, 1), Some(Binding::Joint { b: 0, y: 0 }));
                assert_eq!(e(1, 1), Some(Binding::Joint { b: 0, y: 0 }));
                assert_eq!(e(0, 2), Some(Binding::Joint { b: 0, y: 1 }));
                assert_eq!(e(2, 2), Some(Binding::Joint { b: 0, y: 1 }));
                assert_eq!(e(1, 2), Some(Binding::Unknown));
                // The unknown pair is conjugate.
                let (re12, im12) = m.entry_expr(EntryRef {
                    a,
                    x,
                    row: 1,
                    col: 2,
                });
                let (re21, im21) = m.entry_expr(EntryRef {
                    a,
                    x,
                    row: 2,
                    col: 1,
                });
                assert_eq!(re12, re21);
                assert_eq!(im12, im21.scaled(-1.0));
            }
        }
    }

    #[test]
    fn level_five_blocks_are_eleven_wide() {
        let m = build_model(Scenario::chsh(), 5).unwrap();
        assert_eq!(m.blocks().len(), 4);
        assert!(m.block_matrices().iter().all(|b| b.dim == 11));
    }

    #[test]
    fn qrac_mapping_shape() {
        // a' = x0 and x' = x1: two blocks per preparation bit.
        let m = build_model(Scenario::new(2, 2, 2, 2).unwrap(), 1).unwrap();
        let labels: Vec<_> = m.blocks().iter().map(|b| (b.a, b.x)).collect();
        assert_eq!(labels, vec![(0, 0), (1, 0), (0, 1), (1, 1)]);
        let m3 = build_model(Scenario::new(2, 4, 2, 3).unwrap(), 1).unwrap();
        assert_eq!(m3.blocks().len(), 8);
        assert_eq!(m3.basis().len(), 4);
    }

    /// Variables are shared exactly when reduced words coincide.
    #[test]
    fn sharing_is_word_equality() {
        let m = build_model(Scenario::new(2, 2, 3, 2).unwrap(), 2).unwrap();
        let words = m.basis().words();
        let n = words.len();
        let entry_word = |i: usize, j: usize| multiply(&adjoint(&words[j]), &words[i]).into_word();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let same_expr = m.entry_expr(EntryRef {
                            a: 0,
                            x: 0,
                            row: i,
                            col: j,
                        }) == m.entry_expr(EntryRef {
                            a: 0,
                            x: 0,
                            row: k,
                            col: l,
                        });
                        let (w1, w2) = (entry_word(i, j), entry_word(k, l));
                        match (&w1, &w2) {
                            (Some(u), Some(v)) => assert_eq!(same_expr, u == v, "{u} vs {v}"),
                            (None, None) => assert!(same_expr),
                            _ => assert!(!same_expr),
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn last_outcome_is_eliminated() {
        let m = build_model(Scenario::chsh(), 1).unwrap();
        let mut e = m.prob_expr(1, 0, 0, 1);
        e.add_scaled(&m.prob_expr(1, 1, 0, 1), 1.0);
        assert_eq!(e.normalized(), m.marginal_expr(1, 0).normalized());
    }

    #[test]
    fn uniform_binding() {
        let m = build_model(Scenario::chsh(), 1).unwrap();
        let eqs = bind_data(&m, &uniform()).unwrap();
        // Per block: P(a|x) and one P(a,0|x,y) per y.
        assert_eq!(eqs.len(), 4 * 3);
        for a in 0..2 {
            for x in 0..2 {
                let marg = m.marginal_expr(a, x).equals(0.5);
                assert!(eqs.contains(&marg));
                for y in 0..2 {
                    assert!(eqs.contains(&m.prob_expr(a, 0, x, y).equals(0.25)));
                }
            }
        }
    }

    #[test]
    fn rejects_arrow_of_time_violation() {
        let mut t = uniform();
        t.set(0, 0, 0, 0, 0.3);
        t.set(1, 0, 0, 0, 0.2);
        let m = build_model(Scenario::chsh(), 1).unwrap();
        assert!(matches!(bind_data(&m, &t), Err(Error::InvalidTable(_))));
    }

    #[test]
    fn rejects_shape_mismatch_and_bad_normalization() {
        let m = build_model(Scenario::chsh(), 1).unwrap();
        let other =
            CorrelationTable::from_fn(Scenario::new(2, 3, 2, 2).unwrap(), |_, _, _, _| 0.25);
        assert!(bind_data(&m, &other).is_err());
        let bad = CorrelationTable::from_fn(Scenario::chsh(), |_, _, _, _| 0.3);
        assert!(bind_data(&m, &bad).is_err());
    }

    #[test]
    fn nsit_counts() {
        let m = build_model(Scenario::chsh(), 1).unwrap();
        assert_eq!(nsit_constraints(&m).len(), 5);
        let single = build_model(Scenario::new(2, 1, 2, 2).unwrap(), 1).unwrap();
        assert!(nsit_constraints(&single).is_empty());
    }

    #[test]
    fn functional_forms() {
        let m = build_model(Scenario::chsh(), 1).unwrap();
        assert_eq!(
            functional(&m, &Coefficients::new()).unwrap(),
            LinExpr::zero()
        );
        // CHSH on the uniform table is 0; on the all-equal deterministic table 2.
        let k = functional(&m, &chsh_coefficients()).unwrap();
        let det =
            CorrelationTable::from_fn(
                Scenario::chsh(),
                |a, b, _, _| {
                    if a == 0 && b == 0 {
                        1.0
                    } else {
                        0.0
                    }
                },
            );
        assert!((det.evaluate(&chsh_coefficients()) - 2.0).abs() < 1e-15);
        assert!(uniform().evaluate(&chsh_coefficients()).abs() < 1e-15);
        // Evaluate the symbolic functional at the variables of `det`.
        let mut x = vec![0.0; m.n_vars()];
        for a in 0..2 {
            for xx in 0..2 {
                let off = m.offset(a, xx);
                let marg = det.marginal(a, xx);
                x[off] = marg;
                for y in 0..2 {
                    let (k0, _) = m.layout().word_class(&gen(0, y)).unwrap();
                    x[off + m.layout().classes()[k0].re] = det.get(a, 0, xx, y);
                }
            }
        }
        assert!((k.eval(&x) - 2.0).abs() < 1e-15);
        let bad: Coefficients = [((0, 0, 2, 0), 1.0)].into_iter().collect();
        assert!(functional(&m, &bad).is_err());
    }

    #[test]
    fn entry_functional_rejects_unknowns() {
        let m = build_model(Scenario::chsh(), 1).unwrap();
        let ok = entry_functional(
            &m,
            &[(
                EntryRef {
                    a: 0,
                    x: 0,
                    row: 1,
                    col: 1,
                },
                1.0,
            )],
        );
        assert!(ok.is_ok());
        let bad = entry_functional(
            &m,
            &[(
                EntryRef {
                    a: 0,
                    x: 0,
                    row: 1,
                    col: 2,
                },
                1.0,
            )],
        );
        assert!(matches!(bad, Err(Error::UnboundEntry(_))));
    }

    #[test]
    fn table_json_round_trip() {
        let t = CorrelationTable::from_fn(Scenario::chsh(), |a, b, x, y| {
            let v = 0.1 + 0.01 * (x + y) as f64 / 3.0;
            if a == b {
                0.5 - v
            } else {
                v
            }
        });
        t.validate(TABLE_TOL).unwrap();
        let back = CorrelationTable::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(t, back);
        let dup = r#"{"nA":2,"nX":1,"nB":2,"nY":1,"entries":[[0,0,0,0,0.5],[0,0,0,0,0.5]]}"#;
        assert!(CorrelationTable::from_json(dup).is_err());
    }

    #[test]
    fn di_chsh_monotone_in_level() {
        let mut values = Vec::new();
        for level in 1..=2 {
            let m = build_model(Scenario::chsh(), level).unwrap();
            let mut p = m.base_problem(Sense::Maximize);
            p.objective = functional(&m, &chsh_coefficients()).unwrap();
            let s = solve_sdp(&p, DEFAULT_TOL).unwrap();
            values.push(s.value);
        }
        assert!((values[0] - 4.0).abs() < 1e-6);
        assert!(values[1] <= values[0] + 1e-6);
    }
}
