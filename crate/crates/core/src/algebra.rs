//! Words over projector generators `E_{b|y}` and the monomial bases that
//! index moment-matrix rows.
//!
//! Generators are orthogonal projectors: `E² = E`, and two projectors of the
//! same setting with different outcomes multiply to zero. Words are kept in
//! canonical form under these two rules. The last outcome of each setting is
//! never a generator; it is recovered from `Σ_b E_{b|y} = 1`.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Projector `E_{outcome|setting}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Generator {
    pub outcome: usize,
    pub setting: usize,
}

impl Generator {
    pub fn new(outcome: usize, setting: usize) -> Self {
        Generator { outcome, setting }
    }

    /// All admissible generators for `n_settings` measurements with
    /// `n_outcomes` outcomes each, ordered by `(setting, outcome)`.
    pub fn all(n_outcomes: usize, n_settings: usize) -> Vec<Generator> {
        let mut out = Vec::new();
        for y in 0..n_settings {
            for b in 0..n_outcomes.saturating_sub(1) {
                out.push(Generator::new(b, y));
            }
        }
        out
    }
}

impl Ord for Generator {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.setting, self.outcome).cmp(&(other.setting, other.outcome))
    }
}

impl PartialOrd for Generator {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "E{}|{}", self.outcome, self.setting)
    }
}

/// A canonical product of generators. The empty word is the identity.
///
/// Ordering is graded: shorter words first, then lexicographic by
/// `(setting, outcome)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct OperatorWord {
    letters: Vec<Generator>,
}

/// Result of reducing a product: either a canonical word or zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Reduced {
    Zero,
    Word(OperatorWord),
}

impl Reduced {
    pub fn is_zero(&self) -> bool {
        matches!(self, Reduced::Zero)
    }

    pub fn word(&self) -> Option<&OperatorWord> {
        match self {
            Reduced::Zero => None,
            Reduced::Word(w) => Some(w),
        }
    }

    pub fn into_word(self) -> Option<OperatorWord> {
        match self {
            Reduced::Zero => None,
            Reduced::Word(w) => Some(w),
        }
    }

    /// Product with zero absorption.
    pub fn times(&self, other: &Reduced) -> Reduced {
        match (self, other) {
            (Reduced::Word(u), Reduced::Word(v)) => multiply(u, v),
            _ => Reduced::Zero,
        }
    }
}

impl OperatorWord {
    pub fn identity() -> Self {
        OperatorWord {
            letters: Vec::new(),
        }
    }

    pub fn single(g: Generator) -> Self {
        OperatorWord { letters: vec![g] }
    }

    /// Canonical reduction of an arbitrary letter sequence.
    pub fn reduce<I: IntoIterator<Item = Generator>>(letters: I) -> Reduced {
        let mut out: Vec<Generator> = Vec::new();
        for g in letters {
            if let Some(top) = out.last() {
                if top.setting == g.setting {
                    if top.outcome == g.outcome {
                        continue;
                    }
                    return Reduced::Zero;
                }
            }
            out.push(g);
        }
        Reduced::Word(OperatorWord { letters: out })
    }

    pub fn letters(&self) -> &[Generator] {
        &self.letters
    }

    pub fn len(&self) -> usize {
        self.letters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.letters.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.letters.is_empty()
    }

    /// `true` when the word equals its own adjoint.
    pub fn is_self_adjoint(&self) -> bool {
        self.letters.iter().eq(self.letters.iter().rev())
    }

    /// The smaller of `self` and its adjoint; used to name a conjugate pair.
    pub fn class_representative(&self) -> OperatorWord {
        let adj = adjoint(self);
        if adj < *self {
            adj
        } else {
            self.clone()
        }
    }
}

impl Ord for OperatorWord {
    fn cmp(&self, other: &Self) -> Ordering {
        self.letters
            .len()
            .cmp(&other.letters.len())
            .then_with(|| self.letters.cmp(&other.letters))
    }
}

impl PartialOrd for OperatorWord {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for OperatorWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.letters.is_empty() {
            return write!(f, "1");
        }
        for (i, g) in self.letters.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{g}")?;
        }
        Ok(())
    }
}

/// Canonical product `left · right`.
pub fn multiply(left: &OperatorWord, right: &OperatorWord) -> Reduced {
    // Both inputs are canonical, so only the junction can reduce.
    let mut letters = left.letters.clone();
    let mut rest = right.letters.iter();
    if let (Some(last), Some(first)) = (letters.last(), right.letters.first()) {
        if last.setting == first.setting {
            if last.outcome != first.outcome {
                return Reduced::Zero;
            }
            rest.next();
        }
    }
    letters.extend(rest.copied());
    Reduced::Word(OperatorWord { letters })
}

/// Adjoint of a word of self-adjoint projectors: the reversed word.
pub fn adjoint(w: &OperatorWord) -> OperatorWord {
    let mut letters = w.letters.clone();
    letters.reverse();
    // Reversal of a canonical word is canonical.
    OperatorWord { letters }
}

/// `1 ∪ S⁽¹⁾ ∪ … ∪ S⁽ℓ⁾`: every canonical nonzero word of length at most
/// `level`, identity first, graded-lexicographic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonomialBasis {
    level: usize,
    words: Vec<OperatorWord>,
}

impl MonomialBasis {
    pub fn level(&self) -> usize {
        self.level
    }

    pub fn words(&self) -> &[OperatorWord] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn index_of(&self, w: &OperatorWord) -> Option<usize> {
        self.words.iter().position(|u| u == w)
    }
}

pub fn build_basis(generators: &[Generator], level: usize) -> Result<MonomialBasis> {
    if level == 0 {
        return Err(Error::invalid("basis level must be at least 1"));
    }
    if generators.is_empty() {
        return Err(Error::invalid("generator set is empty"));
    }
    let mut gens = generators.to_vec();
    gens.sort();
    gens.dedup();

    let mut words = vec![OperatorWord::identity()];
    let mut frontier = vec![OperatorWord::identity()];
    for _ in 0..level {
        let mut next = Vec::new();
        for w in &frontier {
            for g in &gens {
                // Extending a canonical word by a letter of a different
                // setting keeps it canonical and strictly longer.
                if w.letters.last().is_some_and(|l| l.setting == g.setting) {
                    continue;
                }
                let mut letters = w.letters.clone();
                letters.push(*g);
                next.push(OperatorWord { letters });
            }
        }
        next.sort();
        next.dedup();
        words.extend(next.iter().cloned());
        frontier = next;
    }
    Ok(MonomialBasis { level, words })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(b: usize, y: usize) -> Generator {
        Generator::new(b, y)
    }

    fn word(gs: &[(usize, usize)]) -> OperatorWord {
        OperatorWord::reduce(gs.iter().map(|&(b, y)| g(b, y)))
            .into_word()
            .expect("nonzero")
    }

    #[test]
    fn multiply_identity_idempotence_orthogonality() {
        let e00 = OperatorWord::single(g(0, 0));
        let e10 = OperatorWord::single(g(1, 0));
        assert_eq!(
            multiply(&OperatorWord::identity(), &e00),
            Reduced::Word(e00.clone())
        );
        assert_eq!(multiply(&e00, &e00), Reduced::Word(e00.clone()));
        assert_eq!(multiply(&e00, &e10), Reduced::Zero);
    }

    #[test]
    fn adjoint_examples() {
        let w = word(&[(0, 0), (0, 1)]);
        assert_eq!(adjoint(&w), word(&[(0, 1), (0, 0)]));
        assert_eq!(adjoint(&OperatorWord::identity()), OperatorWord::identity());
        let e = OperatorWord::single(g(0, 0));
        assert_eq!(adjoint(&e), e);
    }

    #[test]
    fn basis_sizes() {
        let two = Generator::all(2, 2);
        let b1 = build_basis(&two, 1).unwrap();
        assert_eq!(
            b1.words(),
            &[
                OperatorWord::identity(),
                OperatorWord::single(g(0, 0)),
                OperatorWord::single(g(0, 1))
            ]
        );
        assert_eq!(build_basis(&two, 5).unwrap().len(), 11);
        for level in 1..=7 {
            assert_eq!(build_basis(&two, level).unwrap().len(), 1 + 2 * level);
        }
        let three = Generator::all(2, 3);
        assert_eq!(build_basis(&three, 1).unwrap().len(), 4);
    }

    #[test]
    fn basis_rejects_degenerate_input() {
        assert!(build_basis(&Generator::all(2, 2), 0).is_err());
        assert!(build_basis(&[], 2).is_err());
    }

    #[test]
    fn basis_matches_brute_force_enumeration() {
        // every letter sequence up to length ℓ, reduced and deduplicated
        let gens = Generator::all(3, 2);
        let level = 3;
        let mut expected: Vec<OperatorWord> = vec![OperatorWord::identity()];
        let mut seqs: Vec<Vec<Generator>> = vec![vec![]];
        for _ in 0..level {
            let mut next = Vec::new();
            for s in &seqs {
                for g in &gens {
                    let mut t = s.clone();
                    t.push(*g);
                    if let Reduced::Word(w) = OperatorWord::reduce(t.clone()) {
                        expected.push(w);
                    }
                    next.push(t);
                }
            }
            seqs = next;
        }
        expected.sort();
        expected.dedup();
        let basis = build_basis(&gens, level).unwrap();
        assert_eq!(basis.words(), expected.as_slice());
    }

    fn arb_letters(max_len: usize) -> impl Strategy<Value = Vec<Generator>> {
        prop::collection::vec((0usize..2, 0usize..3), 0..=max_len)
            .prop_map(|v| v.into_iter().map(|(b, y)| g(b, y)).collect())
    }

    fn arb_word() -> impl Strategy<Value = OperatorWord> {
        arb_letters(6).prop_filter_map("nonzero", |l| OperatorWord::reduce(l).into_word())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn reduction_is_confluent(letters in arb_letters(12), split in 0usize..13) {
            let whole = OperatorWord::reduce(letters.clone());
            let k = split.min(letters.len());
            let left = OperatorWord::reduce(letters[..k].iter().copied());
            let right = OperatorWord::reduce(letters[k..].iter().copied());
            prop_assert_eq!(whole, left.times(&right));
        }

        #[test]
        fn multiply_is_associative(u in arb_word(), v in arb_word(), w in arb_word()) {
            let uv = Reduced::Word(u.clone()).times(&Reduced::Word(v.clone()));
            let vw = Reduced::Word(v).times(&Reduced::Word(w.clone()));
            prop_assert_eq!(uv.times(&Reduced::Word(w)), Reduced::Word(u).times(&vw));
        }

        #[test]
        fn adjoint_laws(u in arb_word(), v in arb_word()) {
            prop_assert_eq!(adjoint(&adjoint(&u)), u.clone());
            let lhs = multiply(&u, &v).into_word().map(|w| adjoint(&w));
            let rhs = multiply(&adjoint(&v), &adjoint(&u)).into_word();
            prop_assert_eq!(lhs, rhs);
        }
    }
}
