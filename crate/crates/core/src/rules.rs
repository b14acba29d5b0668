//! Contradicting-scenario rules: ternary context patterns attached to
//! maneuver classes, a line-oriented text format, and context matching.
//!
//! A rule file looks like
//!
//! ```text
//! # comment
//! left_lane_change : 1**
//! left_turn        : 01*
//! ```
//!
//! where each pattern symbol is `0`, `1` or the wildcard `*`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Rule file shipped with the crate.
pub const BRAIN4CARS_RULES: &str = include_str!("../assets/brain4cars_rules.txt");

/// Maneuver classes in label order.
pub const DEFAULT_CLASSES: [&str; 5] = [
    "go_straight",
    "left_lane_change",
    "left_turn",
    "right_lane_change",
    "right_turn",
];

/// Context bits: `(leftmost_lane, rightmost_lane, near_intersection)`.
pub const DEFAULT_CONTEXT_DIM: usize = 3;

pub fn default_classes() -> Vec<String> {
    DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect()
}

/// The shipped rule set resolved against [`DEFAULT_CLASSES`].
pub fn brain4cars_rules() -> ScenarioSet {
    parse_rules(BRAIN4CARS_RULES, &default_classes(), DEFAULT_CONTEXT_DIM)
        .expect("shipped rule file parses")
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContextVector {
    bits: Vec<bool>,
}

impl ContextVector {
    pub fn new(bits: Vec<bool>) -> Self {
        ContextVector { bits }
    }

    /// Parses a string of `0`/`1` characters.
    pub fn from_bits_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|ch| match ch {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::contract(format!("context bit must be 0 or 1, got {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(ContextVector::new)
    }

    /// Context number `index` of dimension `d`, bit 0 being the leftmost symbol.
    pub fn from_index(index: usize, d: usize) -> Self {
        ContextVector {
            bits: (0..d).map(|i| (index >> (d - 1 - i)) & 1 == 1).collect(),
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn dim(&self) -> usize {
        self.bits.len()
    }

    pub fn bit(&self, i: usize) -> bool {
        self.bits[i]
    }

    /// All `2^d` contexts in lexicographic order.
    pub fn enumerate(d: usize) -> impl Iterator<Item = ContextVector> {
        (0..1usize << d).map(move |i| ContextVector::from_index(i, d))
    }
}

impl fmt::Display for ContextVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PatternSymbol {
    Zero,
    One,
    Any,
}

impl PatternSymbol {
    fn from_char(ch: char) -> Option<Self> {
        match ch {
            '0' => Some(PatternSymbol::Zero),
            '1' => Some(PatternSymbol::One),
            '*' => Some(PatternSymbol::Any),
            _ => None,
        }
    }

    fn as_char(self) -> char {
        match self {
            PatternSymbol::Zero => '0',
            PatternSymbol::One => '1',
            PatternSymbol::Any => '*',
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContextPattern {
    symbols: Vec<PatternSymbol>,
}

impl ContextPattern {
    pub fn new(symbols: Vec<PatternSymbol>) -> Self {
        ContextPattern { symbols }
    }

    pub fn symbols(&self) -> &[PatternSymbol] {
        &self.symbols
    }

    pub fn dim(&self) -> usize {
        self.symbols.len()
    }
}

impl FromStr for ContextPattern {
    type Err = char;

    /// Fails with the first illegal symbol.
    fn from_str(s: &str) -> std::result::Result<Self, char> {
        s.chars()
            .map(|ch| PatternSymbol::from_char(ch).ok_or(ch))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(ContextPattern::new)
    }
}

impl fmt::Display for ContextPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.symbols {
            write!(f, "{}", s.as_char())?;
        }
        Ok(())
    }
}

/// True iff every non-wildcard symbol equals the corresponding bit.
pub fn matches(pattern: &ContextPattern, c: &ContextVector) -> Result<bool> {
    if pattern.dim() != c.dim() {
        return Err(Error::contract(format!(
            "pattern {pattern} has length {} but context {c} has length {}",
            pattern.dim(),
            c.dim()
        )));
    }
    Ok(pattern.symbols.iter().zip(&c.bits).all(|(s, &b)| match s {
        PatternSymbol::Zero => !b,
        PatternSymbol::One => b,
        PatternSymbol::Any => true,
    }))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScenarioRule {
    /// Class index of the contradicted maneuver.
    pub maneuver: usize,
    pub pattern: ContextPattern,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScenarioSet {
    classes: Vec<String>,
    dim: usize,
    rules: Vec<ScenarioRule>,
}

impl ScenarioSet {
    pub fn new(classes: Vec<String>, dim: usize, rules: Vec<ScenarioRule>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &rules {
            if r.maneuver >= classes.len() {
                return Err(Error::contract(format!("rule class index {} out of range", r.maneuver)));
            }
            if r.pattern.dim() != dim {
                return Err(Error::contract(format!(
                    "pattern {} does not have length {dim}",
                    r.pattern
                )));
            }
            if !seen.insert((r.maneuver, r.pattern.clone())) {
                return Err(Error::contract(format!(
                    "duplicate rule {} : {}",
                    classes[r.maneuver], r.pattern
                )));
            }
        }
        Ok(ScenarioSet { classes, dim, rules })
    }

    /// A set with no rules; every context is consistent with every class.
    pub fn empty(classes: Vec<String>, dim: usize) -> Self {
        ScenarioSet {
            classes,
            dim,
            rules: Vec::new(),
        }
    }

    pub fn rules(&self) -> &[ScenarioRule] {
        &self.rules
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Rules whose pattern matches `c`, in file order.
    pub fn matching<'a>(&'a self, c: &'a ContextVector) -> impl Iterator<Item = Result<&'a ScenarioRule>> + 'a {
        self.rules.iter().filter_map(move |r| match matches(&r.pattern, c) {
            Ok(true) => Some(Ok(r)),
            Ok(false) => None,
            Err(e) => Some(Err(e)),
        })
    }

    /// Whether predicting `class` under `c` forms a contradicting scenario.
    pub fn contradicts(&self, class: usize, c: &ContextVector) -> Result<bool> {
        for r in self.matching(c) {
            if r?.maneuver == class {
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// Serializes in the same format [`parse_rules`] reads.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.rules {
            out.push_str(&format!("{} : {}\n", self.classes[r.maneuver], r.pattern));
        }
        out
    }
}

/// Parses a rule file against `classes` with context dimension `dim`.
pub fn parse_rules(text: &str, classes: &[String], dim: usize) -> Result<ScenarioSet> {
    let mut rules = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (name, pattern) = line
            .split_once(':')
            .ok_or_else(|| err(format!("expected `<maneuver> : <pattern>`, got {line:?}")))?;
        let (name, pattern) = (name.trim(), pattern.trim());
        let maneuver = classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| err(format!("unknown maneuver {name:?}")))?;
        let pattern: ContextPattern = pattern
            .parse()
            .map_err(|ch| err(format!("illegal pattern symbol {ch:?}")))?;
        if pattern.dim() != dim {
            return Err(err(format!(
                "pattern {pattern} has length {}, expected {dim}",
                pattern.dim()
            )));
        }
        if !seen.insert((maneuver, pattern.clone())) {
            return Err(err(format!("duplicate rule {name} : {pattern}")));
        }
        rules.push(ScenarioRule { maneuver, pattern });
    }
    Ok(ScenarioSet {
        classes: classes.to_vec(),
        dim,
        rules,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RulesetReport {
    /// Rule-level problems (unknown class, wrong pattern length).
    pub problems: Vec<String>,
    /// Per class index, the contexts in which the class is contradicted;
    /// classes never contradicted are omitted.
    pub contradicted: Vec<(usize, Vec<ContextVector>)>,
    /// Classes contradicted in every one of the `2^d` contexts.
    pub unsatisfiable: Vec<usize>,
}

impl RulesetReport {
    pub fn is_empty(&self) -> bool {
        self.problems.is_empty() && self.contradicted.is_empty() && self.unsatisfiable.is_empty()
    }
}

/// Enumerates all contexts to describe where each class is contradicted.
pub fn validate_ruleset(set: &ScenarioSet, classes: &[String], dim: usize) -> RulesetReport {
    let mut report = RulesetReport::default();
    let mut valid = Vec::new();
    for r in set.rules() {
        if r.maneuver >= classes.len() {
            report.problems.push(format!("rule refers to unknown class index {}", r.maneuver));
        } else if r.pattern.dim() != dim {
            report.problems.push(format!(
                "{} : {} has length {}, expected {dim}",
                classes[r.maneuver],
                r.pattern,
                r.pattern.dim()
            ));
        } else {
            valid.push(r);
        }
    }
    let total = 1usize << dim;
    for class in 0..classes.len() {
        let hits: Vec<ContextVector> = ContextVector::enumerate(dim)
            .filter(|c| {
                valid
                    .iter()
                    .any(|r| r.maneuver == class && matches(&r.pattern, c).unwrap_or(false))
            })
            .collect();
        if hits.len() == total {
            report.unsatisfiable.push(class);
        }
        if !hits.is_empty() {
            report.contradicted.push((class, hits));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ctx(s: &str) -> ContextVector {
        ContextVector::from_bits_str(s).unwrap()
    }

    fn pat(s: &str) -> ContextPattern {
        s.parse().unwrap()
    }

    fn class(name: &str) -> usize {
        DEFAULT_CLASSES.iter().position(|c| *c == name).unwrap()
    }

    #[test]
    fn shipped_file_has_six_rules() {
        let set = brain4cars_rules();
        assert_eq!(set.len(), 6);
        let listing: Vec<(usize, String)> = set
            .rules()
            .iter()
            .map(|r| (r.maneuver, r.pattern.to_string()))
            .collect();
        assert_eq!(
            listing,
            vec![
                (class("left_lane_change"), "1**".to_string()),
                (class("right_lane_change"), "*1*".to_string()),
                (class("left_turn"), "01*".to_string()),
                (class("right_turn"), "10*".to_string()),
                (class("left_turn"), "**0".to_string()),
                (class("right_turn"), "**0".to_string()),
            ]
        );
    }

    #[test]
    fn empty_text_is_empty_set() {
        let set = parse_rules("", &default_classes(), 3).unwrap();
        assert!(set.is_empty());
        let set = parse_rules("# only a comment\n\n   \n", &default_classes(), 3).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn parse_errors_report_line() {
        let classes = default_classes();
        let cases = [
            ("left_turn : 01*\nleft_turn : 0*\n", 2),
            ("\n\nflying : 1**", 3),
            ("left_turn : 0x1", 1),
            ("left_turn 01*", 1),
            ("left_turn : 01*\n# c\nleft_turn : 01*", 3),
        ];
        for (text, line) in cases {
            match parse_rules(text, &classes, 3) {
                Err(Error::Parse { line: got, .. }) => assert_eq!(got, line, "{text:?}"),
                other => panic!("expected parse error for {text:?}, got {other:?}"),
            }
        }
    }

    #[test]
    fn trailing_comments_and_spacing() {
        let set = parse_rules("  left_turn:01*   # inline\n", &default_classes(), 3).unwrap();
        assert_eq!(set.rules()[0].pattern, pat("01*"));
    }

    #[test]
    fn match_examples() {
        let all = ContextVector::enumerate(3).collect::<Vec<_>>();
        assert!(all.iter().all(|c| matches(&pat("***"), c).unwrap()));
        assert!(matches(&pat("1**"), &ctx("100")).unwrap());
        assert!(!matches(&pat("1**"), &ctx("010")).unwrap());
        let hits: Vec<_> = all.iter().filter(|c| matches(&pat("01*"), c).unwrap()).cloned().collect();
        assert_eq!(hits, vec![ctx("010"), ctx("011")]);
        assert!(matches!(matches(&pat("01"), &ctx("010")), Err(Error::Contract(_))));
    }

    #[test]
    fn left_turn_contradictions_follow_listing() {
        let set = brain4cars_rules();
        for c in ContextVector::enumerate(3) {
            let expected = (!c.bit(0) && c.bit(1)) || !c.bit(2);
            assert_eq!(set.contradicts(class("left_turn"), &c).unwrap(), expected, "{c}");
        }
    }

    #[test]
    fn validate_examples() {
        let classes = default_classes();
        let report = validate_ruleset(&brain4cars_rules(), &classes, 3);
        assert!(report.unsatisfiable.is_empty());
        assert!(report.problems.is_empty());
        let lt = report
            .contradicted
            .iter()
            .find(|(c, _)| *c == class("left_turn"))
            .unwrap();
        // 4 contexts with c3 = 0, plus (0,1,1).
        assert_eq!(lt.1.len(), 5);
        assert!(!report.contradicted.iter().any(|(c, _)| *c == class("go_straight")));

        let set = parse_rules("go_straight : ***", &classes, 3).unwrap();
        assert_eq!(validate_ruleset(&set, &classes, 3).unsatisfiable, vec![0]);

        let empty = ScenarioSet::empty(classes.clone(), 3);
        assert!(validate_ruleset(&empty, &classes, 3).is_empty());
    }

    #[test]
    fn validate_flags_bad_rules() {
        let classes = default_classes();
        let set = ScenarioSet {
            classes: classes.clone(),
            dim: 3,
            rules: vec![
                ScenarioRule { maneuver: 9, pattern: pat("***") },
                ScenarioRule { maneuver: 0, pattern: pat("**") },
            ],
        };
        assert_eq!(validate_ruleset(&set, &classes, 3).problems.len(), 2);
    }

    #[test]
    fn set_constructor_rejects_duplicates() {
        let rule = ScenarioRule { maneuver: 1, pattern: pat("1**") };
        assert!(ScenarioSet::new(default_classes(), 3, vec![rule.clone(), rule]).is_err());
    }

    fn pattern_strategy(d: usize) -> impl Strategy<Value = ContextPattern> {
        prop::collection::vec(prop_oneof![Just('0'), Just('1'), Just('*')], d)
            .prop_map(|v| v.into_iter().collect::<String>().parse().unwrap())
    }

    proptest! {
        #[test]
        fn matches_equals_enumeration(p in (1usize..6).prop_flat_map(pattern_strategy)) {
            for c in ContextVector::enumerate(p.dim()) {
                let brute = p.symbols().iter().zip(c.bits()).all(|(s, &b)| {
                    s.as_char() == '*' || (s.as_char() == '1') == b
                });
                prop_assert_eq!(matches(&p, &c).unwrap(), brute);
            }
        }

        #[test]
        fn serialize_parse_round_trip(
            picks in prop::collection::btree_set((0usize..5, prop::collection::vec(0u8..3, 3)), 0..12)
        ) {
            let rules = picks
                .into_iter()
                .map(|(m, syms)| ScenarioRule {
                    maneuver: m,
                    pattern: ContextPattern::new(syms.into_iter().map(|s| match s {
                        0 => PatternSymbol::Zero,
                        1 => PatternSymbol::One,
                        _ => PatternSymbol::Any,
                    }).collect()),
                })
                .collect();
            let set = ScenarioSet::new(default_classes(), 3, rules).unwrap();
            let back = parse_rules(&set.to_text(), &default_classes(), 3).unwrap();
            prop_assert_eq!(back, set);
        }
    }
}
