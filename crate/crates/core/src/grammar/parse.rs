use super::{validate, GrammarError, Pcfg, RawRule, RawSymbol};

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Arrow,
    Bar,
    Bare(String),
    Quoted(String),
    Prob(f64),
}

fn strip_comment(line: &str) -> &str {
    let mut in_quote = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quote = !in_quote,
            '#' if !in_quote => return &line[..i],
            _ => {}
        }
    }
    line
}

fn tokenize(text: &str, line: usize) -> Result<Vec<Token>, GrammarError> {
    let syntax = |message: String| GrammarError::Syntax { line, message };
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '|' {
            tokens.push(Token::Bar);
            i += 1;
        } else if c == '-' && chars.get(i + 1) == Some(&'>') {
            tokens.push(Token::Arrow);
            i += 2;
        } else if c == '"' {
            let end = chars[i + 1..]
                .iter()
                .position(|&c| c == '"')
                .ok_or_else(|| syntax("unterminated quoted terminal".into()))?;
            let s: String = chars[i + 1..i + 1 + end].iter().collect();
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(syntax(format!("terminal \"{s}\" is empty or contains whitespace")));
            }
            tokens.push(Token::Quoted(s));
            i += end + 2;
        } else if c == '[' {
            let end = chars[i + 1..]
                .iter()
                .position(|&c| c == ']')
                .ok_or_else(|| syntax("unterminated probability".into()))?;
            let s: String = chars[i + 1..i + 1 + end].iter().collect();
            let p: f64 = s.trim().parse().map_err(|_| syntax(format!("invalid probability `{}`", s.trim())))?;
            tokens.push(Token::Prob(p));
            i += end + 2;
        } else if c == ']' {
            return Err(syntax("unexpected `]`".into()));
        } else {
            let start = i;
            while i < chars.len() {
                let c = chars[i];
                if c.is_whitespace() || matches!(c, '"' | '[' | ']' | '|') {
                    break;
                }
                if c == '-' && chars.get(i + 1) == Some(&'>') {
                    break;
                }
                i += 1;
            }
            tokens.push(Token::Bare(chars[start..i].iter().collect()));
        }
    }
    Ok(tokens)
}

fn parse_rule_tokens(tokens: Vec<Token>, line: usize, out: &mut Vec<RawRule>) -> Result<(), GrammarError> {
    let syntax = |message: &str| GrammarError::Syntax { line, message: message.to_string() };
    let mut it = tokens.into_iter().peekable();
    let lhs = match it.next() {
        Some(Token::Bare(name)) => name,
        _ => return Err(syntax("expected a nonterminal name at start of rule")),
    };
    if it.next() != Some(Token::Arrow) {
        return Err(syntax("expected `->` after left-hand side"));
    }
    loop {
        let mut rhs = Vec::new();
        let probability = loop {
            match it.next() {
                Some(Token::Bare(name)) => rhs.push(RawSymbol::bare(name)),
                Some(Token::Quoted(name)) => rhs.push(RawSymbol::quoted(name)),
                Some(Token::Prob(p)) => break p,
                Some(Token::Arrow) => return Err(syntax("unexpected `->` in right-hand side")),
                Some(Token::Bar) | None => return Err(syntax("alternative is missing its bracketed probability")),
            }
        };
        if rhs.is_empty() {
            return Err(syntax("empty alternative"));
        }
        if !(probability > 0.0 && probability <= 1.0) {
            return Err(GrammarError::ProbabilityOutOfRange { line, lhs, probability });
        }
        out.push(RawRule { lhs: lhs.clone(), rhs, probability, line });
        match it.next() {
            None => return Ok(()),
            Some(Token::Bar) => continue,
            Some(_) => return Err(syntax("expected `|` or end of rule after probability")),
        }
    }
}

/// Parses grammar notation without checking grammar-level invariants
/// (sums, reachability, productivity, subcriticality).
pub fn parse_unvalidated(text: &str) -> Result<Pcfg, GrammarError> {
    // Logical rules: a line starting with `|` continues the previous rule.
    let mut logical: Vec<(usize, String)> = Vec::new();
    for (n, raw_line) in text.lines().enumerate() {
        let line = strip_comment(raw_line).trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('|') {
            match logical.last_mut() {
                Some((_, acc)) => {
                    acc.push(' ');
                    acc.push_str(line);
                }
                None => {
                    return Err(GrammarError::Syntax {
                        line: n + 1,
                        message: "continuation line without a preceding rule".into(),
                    })
                }
            }
        } else {
            logical.push((n + 1, line.to_string()));
        }
    }
    let mut raw = Vec::new();
    for (line, text) in logical {
        parse_rule_tokens(tokenize(&text, line)?, line, &mut raw)?;
    }
    Pcfg::from_raw_rules(&raw)
}

/// Parses and validates a grammar. The first rule's lhs is the start symbol.
pub fn parse_grammar(text: &str) -> Result<Pcfg, GrammarError> {
    let pcfg = parse_unvalidated(text)?;
    validate(&pcfg).into_result()?;
    Ok(pcfg)
}
