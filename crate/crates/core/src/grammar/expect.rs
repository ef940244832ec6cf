//! Expected symbol occurrences per derivation.
//!
//! With `E[start] = 1` and `E[B] = [B = start] + sum over rules A -> .. B ..
//! of E[A] * p(rule) * count(B in rhs)`, the vector `E` is the least fixed
//! point of an affine map. It is finite iff the mean matrix has spectral
//! radius below one, which is what "subcritical" means here.

use std::collections::BTreeMap;

use super::{GrammarError, Pcfg, SymbolId, SymbolKind};

pub const RELATIVE_TOLERANCE: f64 = 1e-12;
pub const MAX_ITERATIONS: usize = 10_000;
/// Any expectation above this bound is treated as divergence.
pub const DIVERGENCE_BOUND: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum ExpectationFailure {
    Diverged { symbol: SymbolId, value: f64 },
    NotConverged { iterations: usize },
}

/// Expected number of occurrences of every symbol in one derivation from the
/// start symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedCounts {
    names: Vec<(String, SymbolKind)>,
    values: Vec<f64>,
    pub iterations: usize,
}

impl ExpectedCounts {
    pub fn get(&self, id: SymbolId) -> f64 {
        self.values[id.0 as usize]
    }

    /// Expected occurrences of an unquoted symbol (nonterminal or placeholder).
    pub fn of(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|(n, k)| n == name && *k != SymbolKind::Terminal).map(|i| self.values[i])
    }

    /// Expected occurrences of every emitted token (quoted terminals and
    /// placeholders), keyed by surface form.
    pub fn terminal_frequencies(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for ((name, kind), &v) in self.names.iter().zip(&self.values) {
            if kind.is_terminal_like() {
                *out.entry(name.clone()).or_insert(0.0) += v;
            }
        }
        out
    }
}

pub(crate) fn solve_expectations(pcfg: &Pcfg) -> Result<ExpectedCounts, ExpectationFailure> {
    let n = pcfg.symbols().len();
    // (parent, child, weight) with one entry per rhs occurrence.
    let edges: Vec<(usize, usize, f64)> = pcfg
        .rules()
        .iter()
        .flat_map(|r| r.rhs.iter().map(move |c| (r.lhs.0 as usize, c.0 as usize, r.probability)))
        .collect();
    let start = pcfg.start().0 as usize;

    let mut current = vec![0.0f64; n];
    let mut next = vec![0.0f64; n];
    for iteration in 1..=MAX_ITERATIONS {
        next.iter_mut().for_each(|v| *v = 0.0);
        next[start] = 1.0;
        for &(parent, child, w) in &edges {
            next[child] += current[parent] * w;
        }
        let mut converged = true;
        for (i, (&new, &old)) in next.iter().zip(&current).enumerate() {
            if !new.is_finite() || new > DIVERGENCE_BOUND {
                return Err(ExpectationFailure::Diverged { symbol: SymbolId(i as u32), value: new });
            }
            if (new - old).abs() > RELATIVE_TOLERANCE * new.abs().max(f64::MIN_POSITIVE) {
                converged = false;
            }
        }
        std::mem::swap(&mut current, &mut next);
        if converged {
            return Ok(ExpectedCounts {
                names: pcfg.symbols().iter().map(|s| (s.name.clone(), s.kind)).collect(),
                values: current,
                iterations: iteration,
            });
        }
    }
    Err(ExpectationFailure::NotConverged { iterations: MAX_ITERATIONS })
}

impl Pcfg {
    /// Solves the expectation system. Fails on grammars that are not
    /// subcritical.
    pub fn expected_counts(&self) -> Result<ExpectedCounts, GrammarError> {
        solve_expectations(self).map_err(|f| match f {
            ExpectationFailure::Diverged { symbol, value } => {
                GrammarError::Supercritical(format!("expected occurrences of {} exceed {value:e}", self.name(symbol)))
            }
            ExpectationFailure::NotConverged { iterations } => {
                GrammarError::Supercritical(format!("expectation system did not converge in {iterations} iterations"))
            }
        })
    }

    /// Expected occurrences per sentence of every emitted token.
    pub fn expected_terminal_frequency(&self) -> Result<BTreeMap<String, f64>, GrammarError> {
        Ok(self.expected_counts()?.terminal_frequencies())
    }
}

#[cfg(test)]
mod tests {
    use crate::grammar::parse_grammar;

    #[test]
    fn single_terminal() {
        let g = parse_grammar("S -> \"a\" [1.0]").unwrap();
        let f = g.expected_terminal_frequency().unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f["a"], 1.0);
    }

    #[test]
    fn geometric_recursion_matches_closed_form() {
        // E[a] = 1 / (1 - 0.25) for S -> "a" S [0.25] | "a" [0.75].
        let g = parse_grammar("S -> \"a\" S [0.25] | \"a\" [0.75]").unwrap();
        let f = g.expected_terminal_frequency().unwrap();
        assert!((f["a"] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn supercritical_grammar_errors() {
        let g = crate::grammar::parse_unvalidated("S -> S S [0.6] | \"a\" [0.4]").unwrap();
        assert_eq!(g.expected_terminal_frequency().unwrap_err().code(), "supercritical");
    }
}
