//! Nonterminal grammar templates. Lexical categories (DETFem, NOUNFemGG, ...)
//! are left as placeholders and receive word rules at scenario build time.

use std::sync::Once;

/// Exp1 language-model grammar.
pub const EXP1_LM_TRAIN: &str = r#"S -> NP VP "."[1.0]

PP -> PREP NP [1.0]
VP -> VERB [0.5] | VERB NP [0.5]

NP -> NPGend [0.4] | NPAmb [0.4]
NP -> NP PP [0.2]

NPGend -> DETFem npGendFem [0.5]
NPGend -> DETMasc npGendMasc [0.5]
npGendFem -> NOUNFemGend [0.4]
npGendFem -> ADJFem NOUNFemGend [0.3]
npGendFem -> NOUNFemGend ADJFem [0.3]
npGendMasc -> NOUNMascGend [0.4]
npGendMasc -> ADJMasc NOUNMascGend [0.3]
npGendMasc -> NOUNMascGend ADJMasc [0.3]

NPAmb -> DETEpic npAmbFem [0.5]
NPAmb -> DETEpic npAmbMasc [0.5]
npAmbFem -> NOUNFemAmb [0.4]
npAmbFem -> ADJEpic NOUNFemAmb [0.3]
npAmbFem -> NOUNFemAmb ADJEpic [0.3]
npAmbMasc -> NOUNMascAmb [0.4]
npAmbMasc -> ADJEpic NOUNMascAmb [0.3]
npAmbMasc -> NOUNMascAmb ADJEpic [0.3]

NOUNFemAmb -> NOUNFemAG [0.5]
NOUNFemAmb -> NOUNFemAU [0.5]
NOUNMascAmb -> NOUNMascAG [0.5]
NOUNMascAmb -> NOUNMascAU [0.5]
NOUNFemGend -> NOUNFemGG [0.5]
NOUNFemGend -> NOUNFemGU [0.5]
NOUNMascGend -> NOUNMascGG [0.5]
NOUNMascGend -> NOUNMascGU [0.5]
"#;

/// Exp1 probe-training grammar: only the probe-seen groups, gendered.
pub const EXP1_PROBE_TRAIN: &str = r#"S -> NP VP "."[1.0]

PP -> PREP NP [1.0]
VP -> VERB [0.5] | VERB NP [0.5]

NP -> NPGend [0.8] | NP PP [0.20]

NPGend -> DETFem npGendFem [0.5]
NPGend -> DETMasc npGendMasc [0.5]
npGendFem -> NOUNFemGend [0.4]
npGendFem -> ADJFem NOUNFemGend [0.3]
npGendFem -> NOUNFemGend ADJFem [0.3]
npGendMasc -> NOUNMascGend [0.4]
npGendMasc -> ADJMasc NOUNMascGend [0.3]
npGendMasc -> NOUNMascGend ADJMasc [0.3]

NOUNFemGend -> NOUNFemGG [0.5]
NOUNFemGend -> NOUNFemAG [0.5]
NOUNMascGend -> NOUNMascGG [0.5]
NOUNMascGend -> NOUNMascAG [0.5]
"#;

/// Exp1 probe-test frame. `XY` is the noun group suffix.
pub const EXP1_PROBE_TEST_BASE: &str = r#"S -> NP VP "."[1.0]

PP -> PREP NP [1.0]
VP -> VERB [0.5] | VERB NP [0.5]

NOUNFem -> NOUNFemXY [1.0]
NOUNMasc -> NOUNMascXY [1.0]
"#;

pub const EXP1_PROBE_TEST_GENDERED: &str = r#"NP -> NPGend [0.8] | NP PP [0.20]

NPGend -> DETFem npGendFem [0.5]
NPGend -> DETMasc npGendMasc [0.5]
npGendFem -> NOUNFem [0.4]
npGendFem -> ADJFem NOUNFem [0.3]
npGendFem -> NOUNFem ADJFem [0.3]
npGendMasc -> NOUNMasc [0.4]
npGendMasc -> ADJMasc NOUNMasc [0.3]
npGendMasc -> NOUNMasc ADJMasc [0.3]
"#;

pub const EXP1_PROBE_TEST_AMBIGUOUS: &str = r#"NP -> NPAmb [0.8] | NP PP [0.20]

NPAmb -> DETEpic npAmbFem [0.5]
NPAmb -> DETEpic npAmbMasc [0.5]
npAmbFem -> NOUNFem [0.4]
npAmbFem -> ADJEpic NOUNFem [0.3]
npAmbFem -> NOUNFem ADJEpic [0.3]
npAmbMasc -> NOUNMasc [0.4]
npAmbMasc -> ADJEpic NOUNMasc [0.3]
npAmbMasc -> NOUNMasc ADJEpic [0.3]
"#;

/// Exp2 language-model grammar.
pub const EXP2_LM_TRAIN: &str = r#"S -> NP VP "."[1.0]

PP -> PREP NP [1.0]
VP -> VERB [0.5] | VERB NP [0.5]

NP -> NPGend [0.4] | NPAmb [0.4]
NP -> NP PP [0.20]

NPAmb -> DETEpic NOUN [0.4]
NPAmb -> DETEpic ADJEpic NOUN [0.3]
NPAmb -> DETEpic NOUN ADJEpic [0.3]
NOUN -> NOUNMasc [0.35] | NOUNFem [0.35]
NOUN -> NOUN25 [0.1] | NOUN50 [0.1]
NOUN -> NOUN75 [0.1]

NPGend -> NPFem [0.35] | NPMasc [0.35]
NPGend -> NP25 [0.1] | NP50 [0.1]
NPGend -> NP75 [0.1]

NPFem -> DETFem NOUNFem [0.4]
NPFem -> DETFem ADJFem NOUNFem [0.3]
NPFem -> DETFem NOUNFem ADJFem [0.3]
NPMasc -> DETMasc NOUNMasc [0.4]
NPMasc -> DETMasc ADJMasc NOUNMasc [0.3]
NPMasc -> DETMasc NOUNMasc ADJMasc [0.3]

NP25 -> DETFem np25Fem [0.25]
NP25 -> DETMasc np25Masc [0.75]
np25Fem -> NOUN25 [0.4]
np25Fem -> ADJFem NOUN25 [0.3]
np25Fem -> NOUN25 ADJFem [0.3]
np25Masc -> NOUN25 [0.4]
np25Masc -> ADJMasc NOUN25 [0.3]
np25Masc -> NOUN25 ADJMasc [0.3]

NP50 -> DETFem np50Fem [0.50]
NP50 -> DETMasc np50Masc [0.50]
np50Fem -> NOUN50 [0.4]
np50Fem -> ADJFem NOUN50 [0.3]
np50Fem -> NOUN50 ADJFem [0.3]
np50Masc -> NOUN50 [0.4]
np50Masc -> ADJMasc NOUN50 [0.3]
np50Masc -> NOUN50 ADJMasc [0.3]

NP75 -> DETFem np75Fem [0.75]
NP75 -> DETMasc np75Masc [0.25]
np75Fem -> NOUN75 [0.4]
np75Fem -> ADJFem NOUN75 [0.3]
np75Fem -> NOUN75 ADJFem [0.3]
np75Masc -> NOUN75 [0.4]
np75Masc -> ADJMasc NOUN75 [0.3]
np75Masc -> NOUN75 ADJMasc [0.3]
"#;

/// Exp2 probe-training grammar as listed, including its sum slip in
/// `np25Fem`. Use [`exp2_probe_train`] for the corrected text.
pub const EXP2_PROBE_TRAIN_AS_LISTED: &str = r#"S -> NP VP "."[1.0]

PP -> PREP NP [1.0]
VP -> VERB [0.5] | VERB NP [0.5]

NP -> NPGend [0.8] | NP PP [0.20]

NPGend -> NPFem [0.35] | NPMasc [0.35]
NPGend -> NP25 [0.1] | NP50 [0.1]
NPGend -> NP75 [0.1]

NPFem -> DETFem NOUNFem [0.4]
NPFem -> DETFem ADJFem NOUNFem [0.3]
NPFem -> DETFem NOUNFem ADJFem [0.3]
NPMasc -> DETMasc NOUNMasc [0.4]
NPMasc -> DETMasc ADJMasc NOUNMasc [0.3]
NPMasc -> DETMasc NOUNMasc ADJMasc [0.3]

NP25 -> DETFem np25Fem [0.25]
NP25 -> DETMasc np25Masc [0.75]
np25Fem -> NOUN25 [0.4]
np25Fem -> ADJFem NOUN25 [0.3]
np25Fem -> NOUN25 ADJFem [0.4]
np25Masc -> NOUN25 [0.4]
np25Masc -> ADJMasc NOUN25 [0.3]
np25Masc -> NOUN25 ADJMasc [0.3]

NP50 -> DETFem np50Fem [0.50]
NP50 -> DETMasc np50Masc [0.50]
np50Fem -> NOUN50 [0.4]
np50Fem -> ADJFem NOUN50 [0.3]
np50Fem -> NOUN50 ADJFem [0.3]
np50Masc -> NOUN50 [0.4]
np50Masc -> ADJMasc NOUN50 [0.3]
np50Masc -> NOUN50 ADJMasc [0.3]

NP75 -> DETFem np75Fem [0.75]
NP75 -> DETMasc np75Masc [0.25]
np75Fem -> NOUN75 [0.4]
np75Fem -> ADJFem NOUN75 [0.3]
np75Fem -> NOUN75 ADJFem [0.3]
np75Masc -> NOUN75 [0.4]
np75Masc -> ADJMasc NOUN75 [0.3]
np75Masc -> NOUN75 ADJMasc [0.3]
"#;

/// Exp2 probe-test grammar as listed, with `NPFem -> DETFem NOUN` given
/// twice. `X` selects the context block and `Y` the noun group.
pub const EXP2_PROBE_TEST_AS_LISTED: &str = r#"S -> NP VP "."[1.0]

PP -> PREP NP [1.0]
VP -> VERB [0.5] | VERB NP [0.5]

NP -> NPX [0.80] | NP PP [0.20]

NPAmb -> DETEpic NOUN [0.4]
NPAmb -> DETEpic ADJEpic NOUN [0.3]
NPAmb -> DETEpic NOUN ADJEpic [0.3]
NPFem -> DETFem NOUN [0.4]
NPFem -> DETFem ADJFem NOUN [0.3]
NPFem -> DETFem NOUN [0.4]
NPMasc -> DETMasc NOUN [0.4]
NPMasc -> DETMasc ADJMasc NOUN [0.3]
NPMasc -> DETMasc NOUN ADJMasc [0.3]

NOUN -> NOUNY [1.0]
"#;

const NP25_FEM_SLIP: &str = "np25Fem -> NOUN25 ADJFem [0.4]";
const NP25_FEM_FIX: &str = "np25Fem -> NOUN25 ADJFem [0.3]";
const NPFEM_DUPLICATE: &str = "NPFem -> DETFem NOUN [0.4]";
const NPFEM_FIX: &str = "NPFem -> DETFem NOUN ADJFem [0.3]";

/// Exp2 probe-training grammar with `np25Fem` summing to one.
pub fn exp2_probe_train() -> String {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| log::warn!("correcting exp2 probe_train rule `{NP25_FEM_SLIP}` to `{NP25_FEM_FIX}`"));
    EXP2_PROBE_TRAIN_AS_LISTED.replacen(NP25_FEM_SLIP, NP25_FEM_FIX, 1)
}

/// Exp2 probe-test grammar with the duplicated `NPFem` rule replaced by its
/// post-nominal adjective sibling.
pub fn exp2_probe_test_template() -> String {
    let text = EXP2_PROBE_TEST_AS_LISTED;
    let last = text.rfind(NPFEM_DUPLICATE).expect("duplicate rule present");
    static ONCE: Once = Once::new();
    ONCE.call_once(|| log::warn!("correcting duplicated exp2 probe_test rule `{NPFEM_DUPLICATE}` to `{NPFEM_FIX}`"));
    format!("{}{}{}", &text[..last], NPFEM_FIX, &text[last + NPFEM_DUPLICATE.len()..])
}

/// Keeps the header (everything before the first `NP` rule), the `NP` rule
/// and the rules of the selected context block, dropping the other blocks
/// so that the grammar has no unreachable nonterminals.
fn keep_blocks(text: &str, keep: &[&str]) -> String {
    text.lines()
        .filter(|line| {
            let lhs = line.split("->").next().unwrap_or("").trim();
            !matches!(lhs, "NPAmb" | "NPFem" | "NPMasc") || keep.contains(&lhs)
        })
        .map(|l| format!("{l}\n"))
        .collect()
}

/// Exp2 probe-test grammar for context `x` ∈ {Fem, Masc, Amb} and noun
/// group `y` ∈ {Fem, Masc, 25, 50, 75}.
pub fn exp2_probe_test(x: &str, y: &str) -> String {
    let text = exp2_probe_test_template().replace("NPX", &format!("NP{x}")).replace("NOUNY", &format!("NOUN{y}"));
    keep_blocks(&text, &[&format!("NP{x}")])
}

/// Exp1 probe-test grammar for noun group suffix `xy` (GU, AU, GG, AG),
/// one lexical gender and one context. Only the branch of the selected
/// gender is kept so that each file holds one noun group.
pub fn exp1_probe_test(xy: &str, feminine: bool, gendered: bool) -> String {
    let base = EXP1_PROBE_TEST_BASE.replace("XY", xy);
    let block = if gendered { EXP1_PROBE_TEST_GENDERED } else { EXP1_PROBE_TEST_AMBIGUOUS };
    let (keep, drop) = if feminine { ("Fem", "Masc") } else { ("Masc", "Fem") };
    let mut out = String::new();
    for line in base.lines().chain(block.lines()) {
        let lhs = line.split("->").next().unwrap_or("").trim();
        if lhs.contains(drop) {
            continue;
        }
        // The selected gender branch becomes certain.
        if (lhs == "NPGend" || lhs == "NPAmb")
            && line.contains(&format!("np{}{keep}", if gendered { "Gend" } else { "Amb" }))
        {
            let rule = line.rsplit_once('[').map(|(r, _)| r.trim_end()).unwrap_or(line);
            out.push_str(&format!("{rule} [1.0]\n"));
            continue;
        }
        if lhs == "NPGend" || lhs == "NPAmb" {
            continue;
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{parse_grammar, parse_unvalidated, validate, Violation};

    fn placeholders(text: &str) -> Vec<String> {
        parse_grammar(text).unwrap().placeholders().map(str::to_string).collect()
    }

    #[test]
    fn templates_validate() {
        for text in [EXP1_LM_TRAIN, EXP1_PROBE_TRAIN, EXP2_LM_TRAIN] {
            parse_grammar(text).unwrap();
        }
        parse_grammar(&exp2_probe_train()).unwrap();
        for xy in ["GU", "AU", "GG", "AG"] {
            for fem in [true, false] {
                for gendered in [true, false] {
                    parse_grammar(&exp1_probe_test(xy, fem, gendered)).unwrap();
                }
            }
        }
        for x in ["Fem", "Masc", "Amb"] {
            for y in ["Fem", "Masc", "25", "50", "75"] {
                parse_grammar(&exp2_probe_test(x, y)).unwrap();
            }
        }
    }

    #[test]
    fn listed_slips_fail_validation() {
        let g = parse_unvalidated(EXP2_PROBE_TRAIN_AS_LISTED).unwrap();
        let report = validate(&g);
        assert!(matches!(&report.violations[..], [Violation::SumMismatch { lhs, .. }] if lhs == "np25Fem"));

        let raw = EXP2_PROBE_TEST_AS_LISTED.replace("NPX", "NPFem").replace("NOUNY", "NOUNFem");
        let report = validate(&parse_unvalidated(&keep_blocks(&raw, &["NPFem"])).unwrap());
        assert!(report.violations.iter().any(|v| matches!(v, Violation::DuplicateRule { .. })));
    }

    #[test]
    fn placeholder_substitution() {
        let text = exp1_probe_test("AU", true, false);
        assert!(text.contains("NOUNFem -> NOUNFemAU [1.0]"));
        assert!(text.contains("NPAmb -> DETEpic npAmbFem [1.0]"));
        assert!(!text.contains("Masc"));
        let mut p = placeholders(&text);
        p.sort();
        assert_eq!(p, ["ADJEpic", "DETEpic", "NOUNFemAU", "PREP", "VERB"]);

        let text = exp2_probe_test("Masc", "75");
        assert!(text.contains("NP -> NPMasc [0.80] | NP PP [0.20]"));
        assert!(text.contains("NOUN -> NOUN75 [1.0]"));
        assert!(!text.contains("NPAmb") && !text.contains("NPFem"));
    }
}
