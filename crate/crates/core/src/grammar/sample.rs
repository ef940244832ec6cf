use std::ops::Range;

use rand::Rng;

use super::{Pcfg, RuleId, SymbolId, SymbolKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DerivNode {
    pub symbol: SymbolId,
    /// Rule applied at this node; `None` for leaves.
    pub rule: Option<RuleId>,
    pub parent: Option<u32>,
    pub children: Range<u32>,
}

/// A sampled derivation tree stored as an arena. Node 0 is the root; the
/// children of a node are contiguous.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Derivation {
    pub nodes: Vec<DerivNode>,
    /// Leaf node indices, left to right.
    pub leaves: Vec<u32>,
}

impl Derivation {
    pub fn node(&self, i: u32) -> &DerivNode {
        &self.nodes[i as usize]
    }

    pub fn children(&self, i: u32) -> impl Iterator<Item = u32> {
        self.nodes[i as usize].children.clone()
    }

    /// Ancestors of `i`, nearest first, excluding `i`.
    pub fn ancestors(&self, i: u32) -> impl Iterator<Item = u32> + '_ {
        std::iter::successors(self.nodes[i as usize].parent, move |&p| self.nodes[p as usize].parent)
    }

    /// Leaf indices under `i`, left to right.
    pub fn leaves_under(&self, i: u32) -> Vec<u32> {
        let mut out = Vec::new();
        let mut stack = vec![i];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n as usize];
            if node.children.is_empty() {
                out.push(n);
            } else {
                stack.extend(node.children.clone().rev());
            }
        }
        out
    }

    /// Surface tokens of the yield.
    pub fn tokens<'g>(&self, pcfg: &'g Pcfg) -> Vec<&'g str> {
        self.leaves.iter().map(|&l| pcfg.name(self.nodes[l as usize].symbol)).collect()
    }

    pub fn rules(&self) -> impl Iterator<Item = RuleId> + '_ {
        self.nodes.iter().filter_map(|n| n.rule)
    }
}

impl Pcfg {
    /// Leftmost top-down expansion. At each nonterminal one rule is drawn by
    /// inverse CDF over its alternatives in listing order. The grammar must
    /// be valid; supercritical grammars may not terminate.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Derivation {
        let mut nodes = vec![DerivNode { symbol: self.start(), rule: None, parent: None, children: 0..0 }];
        let mut leaves = Vec::new();
        let mut stack = vec![0u32];
        while let Some(id) = stack.pop() {
            let symbol = nodes[id as usize].symbol;
            if self.symbol(symbol).kind != SymbolKind::Nonterminal {
                leaves.push(id);
                continue;
            }
            let rule = self.choose_rule(symbol, rng);
            let rhs = &self.rule(rule).rhs;
            let first = nodes.len() as u32;
            for &child in rhs {
                nodes.push(DerivNode { symbol: child, rule: None, parent: Some(id), children: 0..0 });
            }
            let end = nodes.len() as u32;
            let node = &mut nodes[id as usize];
            node.rule = Some(rule);
            node.children = first..end;
            stack.extend((first..end).rev());
        }
        Derivation { nodes, leaves }
    }

    fn choose_rule<R: Rng + ?Sized>(&self, lhs: SymbolId, rng: &mut R) -> RuleId {
        let ids = self.rules_for(lhs);
        let cumulative = self.cumulative(lhs);
        let total = *cumulative.last().expect("nonterminal without rules");
        let u: f64 = rng.random::<f64>() * total;
        let idx = cumulative.iter().position(|&c| u < c).unwrap_or(ids.len() - 1);
        ids[idx]
    }
}
