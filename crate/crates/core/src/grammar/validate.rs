use std::collections::{HashMap, VecDeque};
use std::fmt;

use super::expect::{solve_expectations, ExpectationFailure};
use super::{GrammarError, Pcfg, SUM_TOLERANCE};

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicateRule { rule: String },
    SumMismatch { lhs: String, sum: f64 },
    Unreachable { symbol: String },
    Unproductive { symbol: String },
    Supercritical { symbol: String, expectation: f64 },
    NotConverged { iterations: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateRule { rule } => write!(f, "duplicate rule: {rule}"),
            Violation::SumMismatch { lhs, sum } => {
                write!(f, "probability sum: rules for {lhs} sum to {sum}")
            }
            Violation::Unreachable { symbol } => write!(f, "unreachable: {symbol}"),
            Violation::Unproductive { symbol } => write!(f, "unproductive: {symbol}"),
            Violation::Supercritical { symbol, expectation } => {
                write!(f, "subcriticality: expected occurrences of {symbol} exceed {expectation:e}")
            }
            Violation::NotConverged { iterations } => {
                write!(f, "subcriticality: expectation system did not converge in {iterations} iterations")
            }
        }
    }
}

impl From<Violation> for GrammarError {
    fn from(v: Violation) -> Self {
        match v {
            Violation::DuplicateRule { rule } => GrammarError::DuplicateRule(rule),
            Violation::SumMismatch { lhs, sum } => GrammarError::SumMismatch { lhs, sum },
            Violation::Unreachable { symbol } => GrammarError::Unreachable(symbol),
            Violation::Unproductive { symbol } => GrammarError::Unproductive(symbol),
            other @ (Violation::Supercritical { .. } | Violation::NotConverged { .. }) => {
                GrammarError::Supercritical(other.to_string())
            }
        }
    }
}

/// Violations found by [`validate`]; empty means the grammar is valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    /// The first violation as an error.
    pub fn into_result(self) -> Result<(), GrammarError> {
        match self.violations.into_iter().next() {
            None => Ok(()),
            Some(v) => Err(v.into()),
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks every grammar invariant: unique rules, per-lhs sums, reachability,
/// productivity and subcriticality. Violations are returned as data.
pub fn validate(pcfg: &Pcfg) -> ValidationReport {
    let mut violations = Vec::new();

    let mut seen: HashMap<String, ()> = HashMap::new();
    for r in pcfg.rules() {
        let mut key = pcfg.format_rule(r);
        // Probability is not part of rule identity.
        if let Some(pos) = key.rfind(" [") {
            key.truncate(pos);
        }
        if seen.insert(key.clone(), ()).is_some() {
            violations.push(Violation::DuplicateRule { rule: key });
        }
    }

    for nt in pcfg.nonterminals() {
        let sum: f64 = pcfg.rules_for(nt).iter().map(|&r| pcfg.rule(r).probability).sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            violations.push(Violation::SumMismatch { lhs: pcfg.name(nt).to_string(), sum });
        }
    }

    let n = pcfg.symbols().len();
    let mut reachable = vec![false; n];
    let mut queue = VecDeque::from([pcfg.start()]);
    reachable[pcfg.start().0 as usize] = true;
    while let Some(sym) = queue.pop_front() {
        for &rid in pcfg.rules_for(sym) {
            for &child in &pcfg.rule(rid).rhs {
                if !reachable[child.0 as usize] {
                    reachable[child.0 as usize] = true;
                    queue.push_back(child);
                }
            }
        }
    }
    for nt in pcfg.nonterminals() {
        if !reachable[nt.0 as usize] {
            violations.push(Violation::Unreachable { symbol: pcfg.name(nt).to_string() });
        }
    }

    let mut productive: Vec<bool> = pcfg.symbols().iter().map(|s| s.kind.is_terminal_like()).collect();
    loop {
        let mut changed = false;
        for r in pcfg.rules() {
            if !productive[r.lhs.0 as usize] && r.rhs.iter().all(|s| productive[s.0 as usize]) {
                productive[r.lhs.0 as usize] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut all_productive = true;
    for nt in pcfg.nonterminals() {
        if !productive[nt.0 as usize] {
            all_productive = false;
            violations.push(Violation::Unproductive { symbol: pcfg.name(nt).to_string() });
        }
    }

    // Expectations are only meaningful once every nonterminal can terminate.
    if all_productive {
        match solve_expectations(pcfg) {
            Ok(_) => {}
            Err(ExpectationFailure::Diverged { symbol, value }) => {
                violations.push(Violation::Supercritical { symbol: pcfg.name(symbol).to_string(), expectation: value })
            }
            Err(ExpectationFailure::NotConverged { iterations }) => {
                violations.push(Violation::NotConverged { iterations })
            }
        }
    }

    ValidationReport { violations }
}
