//! Probabilistic context-free grammars in `LHS -> RHS [p] | ...` notation.
//!
//! A grammar is parsed into a [`Pcfg`], checked by [`validate`], sampled
//! top-down with an explicit random source, and analysed through its
//! expectation system ([`Pcfg::expected_terminal_frequency`]).
//!
//! Unquoted right-hand-side names that never appear as a left-hand side are
//! *placeholders*: they behave as terminals until lexical rules are attached
//! with [`Pcfg::attach_lexical`], at which point they become nonterminals.

mod expect;
mod parse;
mod sample;
mod validate;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use expect::{ExpectedCounts, DIVERGENCE_BOUND, MAX_ITERATIONS, RELATIVE_TOLERANCE};
pub use parse::{parse_grammar, parse_unvalidated};
pub use sample::{DerivNode, Derivation};
pub use validate::{validate, ValidationReport, Violation};

/// Per-lhs probability sum tolerance.
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrammarError {
    #[error("line {line}: syntax error: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: probability {probability} of rule for `{lhs}` is outside (0, 1]")]
    ProbabilityOutOfRange { line: usize, lhs: String, probability: f64 },
    #[error("probabilities of rules for `{lhs}` sum to {sum}, expected 1")]
    SumMismatch { lhs: String, sum: f64 },
    #[error("nonterminal `{0}` is unreachable from the start symbol")]
    Unreachable(String),
    #[error("nonterminal `{0}` is unproductive")]
    Unproductive(String),
    #[error("duplicate rule `{0}`")]
    DuplicateRule(String),
    #[error("grammar is not subcritical: {0}")]
    Supercritical(String),
    #[error("empty grammar")]
    Empty,
    #[error("invalid symbol `{0}`")]
    InvalidSymbol(String),
    #[error("unknown nonterminal `{0}`")]
    UnknownNonterminal(String),
}

impl GrammarError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            GrammarError::Syntax { .. } => "syntax",
            GrammarError::ProbabilityOutOfRange { .. } => "probability_range",
            GrammarError::SumMismatch { .. } => "probability_sum",
            GrammarError::Unreachable(_) => "unreachable",
            GrammarError::Unproductive(_) => "unproductive",
            GrammarError::DuplicateRule(_) => "duplicate_rule",
            GrammarError::Supercritical(_) => "supercritical",
            GrammarError::Empty => "empty",
            GrammarError::InvalidSymbol(_) => "invalid_symbol",
            GrammarError::UnknownNonterminal(_) => "unknown_nonterminal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SymbolId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RuleId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SymbolKind {
    Nonterminal,
    /// Quoted surface form.
    Terminal,
    /// Unquoted name with no rules of its own; emitted verbatim when sampled.
    Placeholder,
}

impl SymbolKind {
    pub fn is_terminal_like(self) -> bool {
        !matches!(self, SymbolKind::Nonterminal)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Symbol {
    pub name: String,
    pub kind: SymbolKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub lhs: SymbolId,
    pub rhs: Vec<SymbolId>,
    pub probability: f64,
}

/// Right-hand-side item before symbol resolution.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RawSymbol {
    pub name: String,
    pub quoted: bool,
}

impl RawSymbol {
    pub fn quoted(name: impl Into<String>) -> Self {
        Self { name: name.into(), quoted: true }
    }

    pub fn bare(name: impl Into<String>) -> Self {
        Self { name: name.into(), quoted: false }
    }
}

/// A rule in name form, as written in grammar notation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRule {
    pub lhs: String,
    pub rhs: Vec<RawSymbol>,
    pub probability: f64,
    /// Source line, 0 when built programmatically.
    pub line: usize,
}

/// A weighted context-free grammar. Construction only checks syntax-level
/// constraints; call [`validate`] (or use [`parse_grammar`]) for the full
/// set of invariants.
#[derive(Debug, Clone)]
pub struct Pcfg {
    symbols: Vec<Symbol>,
    start: SymbolId,
    rules: Vec<Rule>,
    by_lhs: Vec<Vec<RuleId>>,
    /// Cumulative probabilities aligned with `by_lhs`.
    cumulative: Vec<Vec<f64>>,
}

fn check_surface(name: &str) -> Result<(), GrammarError> {
    if name.is_empty() || name.chars().any(|c| c.is_whitespace() || c == '"') {
        return Err(GrammarError::InvalidSymbol(name.to_string()));
    }
    Ok(())
}

impl Pcfg {
    /// Builds a grammar from rules in name form. The first rule's lhs is the
    /// start symbol.
    pub fn from_raw_rules(raw: &[RawRule]) -> Result<Self, GrammarError> {
        let first = raw.first().ok_or(GrammarError::Empty)?;
        let lhs_names: HashMap<&str, ()> = raw.iter().map(|r| (r.lhs.as_str(), ())).collect();

        let mut symbols: Vec<Symbol> = Vec::new();
        // Unquoted names (nonterminals and placeholders) and quoted terminals
        // live in separate namespaces.
        let mut bare_index: HashMap<String, SymbolId> = HashMap::new();
        let mut quoted_index: HashMap<String, SymbolId> = HashMap::new();

        let mut intern = |name: &str, quoted: bool, symbols: &mut Vec<Symbol>| -> SymbolId {
            let index = if quoted { &mut quoted_index } else { &mut bare_index };
            if let Some(&id) = index.get(name) {
                return id;
            }
            let kind = if quoted {
                SymbolKind::Terminal
            } else if lhs_names.contains_key(name) {
                SymbolKind::Nonterminal
            } else {
                SymbolKind::Placeholder
            };
            let id = SymbolId(symbols.len() as u32);
            symbols.push(Symbol { name: name.to_string(), kind });
            index.insert(name.to_string(), id);
            id
        };

        let mut rules = Vec::with_capacity(raw.len());
        for r in raw {
            check_surface(&r.lhs)?;
            if r.rhs.is_empty() {
                return Err(GrammarError::Syntax {
                    line: r.line,
                    message: format!("empty right-hand side for `{}`", r.lhs),
                });
            }
            if !(r.probability > 0.0 && r.probability <= 1.0) {
                return Err(GrammarError::ProbabilityOutOfRange {
                    line: r.line,
                    lhs: r.lhs.clone(),
                    probability: r.probability,
                });
            }
            let lhs = intern(&r.lhs, false, &mut symbols);
            let mut rhs = Vec::with_capacity(r.rhs.len());
            for s in &r.rhs {
                check_surface(&s.name)?;
                rhs.push(intern(&s.name, s.quoted, &mut symbols));
            }
            rules.push(Rule { lhs, rhs, probability: r.probability });
        }
        let start = bare_index[first.lhs.as_str()];

        let mut by_lhs = vec![Vec::new(); symbols.len()];
        for (i, r) in rules.iter().enumerate() {
            by_lhs[r.lhs.0 as usize].push(RuleId(i as u32));
        }
        let cumulative = by_lhs
            .iter()
            .map(|ids| {
                let mut acc = 0.0;
                ids.iter()
                    .map(|id| {
                        acc += rules[id.0 as usize].probability;
                        acc
                    })
                    .collect()
            })
            .collect();

        Ok(Self { symbols, start, rules, by_lhs, cumulative })
    }

    pub fn start(&self) -> SymbolId {
        self.start
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }

    pub fn symbol(&self, id: SymbolId) -> &Symbol {
        &self.symbols[id.0 as usize]
    }

    pub fn name(&self, id: SymbolId) -> &str {
        &self.symbols[id.0 as usize].name
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn rule(&self, id: RuleId) -> &Rule {
        &self.rules[id.0 as usize]
    }

    pub fn rules_for(&self, lhs: SymbolId) -> &[RuleId] {
        &self.by_lhs[lhs.0 as usize]
    }

    /// Looks up an unquoted symbol (nonterminal or placeholder) by name.
    pub fn bare_symbol(&self, name: &str) -> Option<SymbolId> {
        self.symbols.iter().position(|s| s.name == name && s.kind != SymbolKind::Terminal).map(|i| SymbolId(i as u32))
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.symbols.iter().filter(|s| s.kind == SymbolKind::Placeholder).map(|s| s.name.as_str())
    }

    pub fn nonterminals(&self) -> impl Iterator<Item = SymbolId> + '_ {
        self.symbols
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind == SymbolKind::Nonterminal)
            .map(|(i, _)| SymbolId(i as u32))
    }

    /// The grammar in name form, rules in stored order.
    pub fn to_raw_rules(&self) -> Vec<RawRule> {
        self.rules
            .iter()
            .map(|r| RawRule {
                lhs: self.name(r.lhs).to_string(),
                rhs: r
                    .rhs
                    .iter()
                    .map(|&s| {
                        let sym = self.symbol(s);
                        RawSymbol { name: sym.name.clone(), quoted: sym.kind == SymbolKind::Terminal }
                    })
                    .collect(),
                probability: r.probability,
                line: 0,
            })
            .collect()
    }

    /// Renders the grammar back into notation, one rule per line.
    pub fn to_notation(&self) -> String {
        let mut out = String::new();
        for r in &self.rules {
            out.push_str(&self.format_rule(r));
            out.push('\n');
        }
        out
    }

    pub fn format_rule(&self, r: &Rule) -> String {
        let mut s = format!("{} ->", self.name(r.lhs));
        for &sym in &r.rhs {
            let sym = self.symbol(sym);
            if sym.kind == SymbolKind::Terminal {
                s.push_str(&format!(" \"{}\"", sym.name));
            } else {
                s.push(' ');
                s.push_str(&sym.name);
            }
        }
        s.push_str(&format!(" [{}]", r.probability));
        s
    }

    /// Replaces each placeholder named in `lexical` by a nonterminal whose
    /// rules emit the listed quoted words with the given probabilities.
    pub fn attach_lexical<'a, I>(&self, lexical: I) -> Result<Pcfg, GrammarError>
    where
        I: IntoIterator<Item = (&'a str, &'a [(String, f64)])>,
    {
        let mut raw = self.to_raw_rules();
        for (category, words) in lexical {
            if self.bare_symbol(category).map(|id| self.symbol(id).kind) != Some(SymbolKind::Placeholder) {
                continue;
            }
            for (word, p) in words {
                raw.push(RawRule {
                    lhs: category.to_string(),
                    rhs: vec![RawSymbol::quoted(word.clone())],
                    probability: *p,
                    line: 0,
                });
            }
        }
        Pcfg::from_raw_rules(&raw)
    }

    /// Sets the probabilities of the rules of `lhs`, in listing order.
    pub fn with_probabilities(&self, lhs: &str, probabilities: &[f64]) -> Result<Pcfg, GrammarError> {
        let id = self
            .bare_symbol(lhs)
            .filter(|&id| self.symbol(id).kind == SymbolKind::Nonterminal)
            .ok_or_else(|| GrammarError::UnknownNonterminal(lhs.to_string()))?;
        let ids = self.rules_for(id);
        if ids.len() != probabilities.len() {
            return Err(GrammarError::Syntax {
                line: 0,
                message: format!(
                    "`{lhs}` has {} rules but {} probabilities were given",
                    ids.len(),
                    probabilities.len()
                ),
            });
        }
        let mut raw = self.to_raw_rules();
        for (rid, &p) in ids.iter().zip(probabilities) {
            raw[rid.0 as usize].probability = p;
        }
        Pcfg::from_raw_rules(&raw)
    }

    pub(crate) fn cumulative(&self, lhs: SymbolId) -> &[f64] {
        &self.cumulative[lhs.0 as usize]
    }
}

/// Rule-for-rule equality in name form; symbol interning order is ignored.
impl PartialEq for Pcfg {
    fn eq(&self, other: &Self) -> bool {
        if self.name(self.start) != other.name(other.start) || self.rules.len() != other.rules.len() {
            return false;
        }
        self.rules.iter().zip(&other.rules).all(|(a, b)| {
            a.probability == b.probability
                && self.symbol(a.lhs) == other.symbol(b.lhs)
                && a.rhs.len() == b.rhs.len()
                && a.rhs.iter().zip(&b.rhs).all(|(&x, &y)| self.symbol(x) == other.symbol(y))
        })
    }
}

impl fmt::Display for Pcfg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_notation())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attach_lexical_turns_placeholders_into_nonterminals() {
        let g = parse_grammar("S -> \"le\" N [1.0]").unwrap();
        assert_eq!(g.placeholders().collect::<Vec<_>>(), vec!["N"]);
        let words = vec![("chat".to_string(), 0.75), ("chien".to_string(), 0.25)];
        let g2 = g.attach_lexical([("N", words.as_slice())]).unwrap();
        assert_eq!(g2.placeholders().count(), 0);
        assert_eq!(g2.rules().len(), 3);
        assert!(validate(&g2).is_valid());
    }

    #[test]
    fn with_probabilities_reweights_in_listing_order() {
        let g = parse_grammar("S -> A [0.5] | B [0.5]\nA -> \"a\" [1]\nB -> \"b\" [1]").unwrap();
        let g2 = g.with_probabilities("S", &[0.1, 0.9]).unwrap();
        assert_eq!(g2.rules()[0].probability, 0.1);
        assert_eq!(g2.rules()[1].probability, 0.9);
        assert!(g.with_probabilities("S", &[1.0]).is_err());
        assert!(matches!(g.with_probabilities("Z", &[1.0]), Err(GrammarError::UnknownNonterminal(_))));
    }

    #[test]
    fn terminals_and_nonterminals_have_separate_namespaces() {
        let g = parse_grammar("S -> \"S\" S2 [1.0]\nS2 -> \"x\" [1.0]").unwrap();
        assert_eq!(g.symbols().len(), 4);
    }
}
