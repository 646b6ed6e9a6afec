//! The nine demographic axes, the label-set algebra over them, and the
//! rule-driven harmonization of upstream dataset labels.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("unknown policy code `{0}`")]
    UnknownCode(String),
    #[error("unknown axis code `{0}`")]
    UnknownAxis(String),
    #[error("no harmonization rule for label `{0}`")]
    UnmappedLabel(String),
    #[error("label `{0}` lies outside the taxonomy and is excluded")]
    ExcludedLabel(String),
    #[error("duplicate harmonization rule for `{0}`")]
    DuplicateRule(String),
    #[error("harmonization rule with empty source label")]
    EmptyRuleLabel,
    #[error("rule file line {line}: {message}")]
    RuleFile { line: usize, message: String },
}

/// A demographic axis a biased text may target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Axis {
    Gen,
    So,
    Dis,
    Age,
    Rac,
    Nat,
    Rel,
    Ses,
    Phy,
}

impl Axis {
    pub const COUNT: usize = 9;

    /// All axes in canonical (policy code) order.
    pub const ALL: [Axis; 9] = [
        Axis::Gen,
        Axis::So,
        Axis::Dis,
        Axis::Age,
        Axis::Rac,
        Axis::Nat,
        Axis::Rel,
        Axis::Ses,
        Axis::Phy,
    ];

    /// Bit position inside a [`LabelSet`]; also the zero-based policy index.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Axis> {
        Self::ALL.get(index).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            Axis::Gen => "GEN",
            Axis::So => "SO",
            Axis::Dis => "DIS",
            Axis::Age => "AGE",
            Axis::Rac => "RAC",
            Axis::Nat => "NAT",
            Axis::Rel => "REL",
            Axis::Ses => "SES",
            Axis::Phy => "PHY",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Axis::Gen => "Gender identity",
            Axis::So => "Sexual orientation",
            Axis::Dis => "Disability",
            Axis::Age => "Age",
            Axis::Rac => "Race/ethnicity",
            Axis::Nat => "Nationality",
            Axis::Rel => "Religion",
            Axis::Ses => "Socioeconomic status",
            Axis::Phy => "Physical appearance",
        }
    }

    /// Policy category identifier, `S1` through `S9`.
    pub fn policy_code(self) -> String {
        format!("S{}", self.index() + 1)
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Axis {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let code = s.trim();
        Axis::ALL
            .into_iter()
            .find(|a| a.code().eq_ignore_ascii_case(code))
            .ok_or_else(|| TaxonomyError::UnknownAxis(s.to_string()))
    }
}

impl Serialize for Axis {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for Axis {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Outcome of looking up a policy category code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyVerdict {
    Axis(Axis),
    /// `S10`: safe and unbiased text.
    Unbiased,
}

impl PolicyVerdict {
    pub fn labels(self) -> LabelSet {
        match self {
            PolicyVerdict::Axis(a) => LabelSet::single(a),
            PolicyVerdict::Unbiased => LabelSet::EMPTY,
        }
    }
}

/// Maps `S1`..`S10` (case-insensitive, surrounding whitespace allowed) to a verdict.
pub fn axis_from_policy_code(code: &str) -> Result<PolicyVerdict, TaxonomyError> {
    let unknown = || TaxonomyError::UnknownCode(code.to_string());
    let trimmed = code.trim();
    let digits = trimmed
        .strip_prefix('S')
        .or_else(|| trimmed.strip_prefix('s'))
        .ok_or_else(unknown)?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
        return Err(unknown());
    }
    match digits.parse::<usize>().map_err(|_| unknown())? {
        n @ 1..=9 => Ok(PolicyVerdict::Axis(Axis::ALL[n - 1])),
        10 => Ok(PolicyVerdict::Unbiased),
        _ => Err(unknown()),
    }
}

/// A set of targeted axes. The empty set is UNB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct LabelSet(u16);

impl LabelSet {
    pub const EMPTY: LabelSet = LabelSet(0);
    const MASK: u16 = (1 << Axis::COUNT) - 1;

    /// Builds a set from the low nine bits; higher bits are rejected.
    pub fn from_bits(bits: u16) -> Option<LabelSet> {
        (bits & !Self::MASK == 0).then_some(LabelSet(bits))
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn single(axis: Axis) -> LabelSet {
        LabelSet(1 << axis.index())
    }

    pub fn contains(self, axis: Axis) -> bool {
        self.0 & (1 << axis.index()) != 0
    }

    pub fn insert(&mut self, axis: Axis) {
        self.0 |= 1 << axis.index();
    }

    pub fn with(mut self, axis: Axis) -> LabelSet {
        self.insert(axis);
        self
    }

    pub fn union(self, other: LabelSet) -> LabelSet {
        LabelSet(self.0 | other.0)
    }

    pub fn intersection(self, other: LabelSet) -> LabelSet {
        LabelSet(self.0 & other.0)
    }

    pub fn is_superset(self, other: LabelSet) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn is_disjoint(self, other: LabelSet) -> bool {
        self.0 & other.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Bitwise complement within the nine positions.
    pub fn complement(self) -> LabelSet {
        LabelSet(!self.0 & Self::MASK)
    }

    pub fn axes(self) -> impl Iterator<Item = Axis> {
        Axis::ALL.into_iter().filter(move |a| self.contains(*a))
    }

    /// Every one of the 512 possible label sets.
    pub fn all() -> impl Iterator<Item = LabelSet> {
        (0..=Self::MASK).map(LabelSet)
    }

    /// Policy codes for this set, e.g. `S1, S5`; `S10` for the empty set.
    pub fn policy_codes(self) -> String {
        if self.is_empty() {
            return "S10".to_string();
        }
        self.axes().map(Axis::policy_code).collect::<Vec<_>>().join(", ")
    }

    pub fn codes(self) -> Vec<&'static str> {
        self.axes().map(Axis::code).collect()
    }
}

impl FromIterator<Axis> for LabelSet {
    fn from_iter<I: IntoIterator<Item = Axis>>(iter: I) -> Self {
        iter.into_iter().fold(LabelSet::EMPTY, LabelSet::with)
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("UNB");
        }
        f.write_str(&self.codes().join(","))
    }
}

/// Serialized as an array of axis codes; `[]` is UNB.
impl Serialize for LabelSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(self.axes())
    }
}

impl<'de> Deserialize<'de> for LabelSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let axes = Vec::<Axis>::deserialize(deserializer)?;
        Ok(axes.into_iter().collect())
    }
}

/// True iff any axis is targeted.
pub fn is_biased(labels: LabelSet) -> bool {
    !labels.is_empty()
}

/// One mapping from an upstream raw label to the taxonomy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarmonizationRule {
    pub source_label: String,
    #[serde(default)]
    pub axes: LabelSet,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
    /// Marks a label known to fall outside the taxonomy.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub exclude: bool,
}

fn normalize_label(raw: &str) -> String {
    raw.trim().to_lowercase()
}

/// A validated rule table keyed by normalized source label.
#[derive(Debug, Clone, Default)]
pub struct RuleSet {
    rules: HashMap<String, HarmonizationRule>,
}

impl RuleSet {
    pub fn new(rules: impl IntoIterator<Item = HarmonizationRule>) -> Result<Self, TaxonomyError> {
        let mut table = HashMap::new();
        for rule in rules {
            let key = normalize_label(&rule.source_label);
            if key.is_empty() {
                return Err(TaxonomyError::EmptyRuleLabel);
            }
            if table.contains_key(&key) {
                return Err(TaxonomyError::DuplicateRule(key));
            }
            table.insert(key, rule);
        }
        Ok(Self { rules: table })
    }

    /// Parses a JSON-lines rule file. Blank lines and lines starting with `#` are skipped.
    pub fn parse(reader: impl BufRead) -> Result<Self, TaxonomyError> {
        let mut rules = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| TaxonomyError::RuleFile {
                line: i + 1,
                message: e.to_string(),
            })?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let rule: HarmonizationRule =
                serde_json::from_str(trimmed).map_err(|e| TaxonomyError::RuleFile {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            rules.push(rule);
        }
        Self::new(rules)
    }

    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        let file = std::fs::File::open(path).map_err(|e| TaxonomyError::RuleFile {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        Self::parse(std::io::BufReader::new(file))
    }

    /// The rule table shipped with the toolkit.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_RULES.as_bytes()).expect("builtin rule file is valid")
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn harmonize(&self, raw_label: &str) -> Result<LabelSet, TaxonomyError> {
        let key = normalize_label(raw_label);
        match self.rules.get(&key) {
            Some(rule) if rule.exclude => Err(TaxonomyError::ExcludedLabel(key)),
            Some(rule) => Ok(rule.axes),
            None => Err(TaxonomyError::UnmappedLabel(raw_label.trim().to_string())),
        }
    }
}

pub const BUILTIN_RULES: &str = include_str!("../data/harmonization_rules.jsonl");

/// Looks up `raw_label` in `rules` after lowercasing and trimming.
pub fn harmonize(raw_label: &str, rules: &RuleSet) -> Result<LabelSet, TaxonomyError> {
    rules.harmonize(raw_label)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_codes_map_to_axes() {
        assert_eq!(axis_from_policy_code("S5"), Ok(PolicyVerdict::Axis(Axis::Rac)));
        assert_eq!(axis_from_policy_code(" s1 "), Ok(PolicyVerdict::Axis(Axis::Gen)));
        assert_eq!(axis_from_policy_code("S10"), Ok(PolicyVerdict::Unbiased));
        assert_eq!(PolicyVerdict::Unbiased.labels(), LabelSet::EMPTY);
        for bad in ["S11", "S0", "S01", "", "S", "X5", "S-1", "S5a"] {
            assert_eq!(
                axis_from_policy_code(bad),
                Err(TaxonomyError::UnknownCode(bad.to_string())),
                "{bad}"
            );
        }
    }

    #[test]
    fn policy_code_roundtrip() {
        for axis in Axis::ALL {
            assert_eq!(
                axis_from_policy_code(&axis.policy_code()),
                Ok(PolicyVerdict::Axis(axis))
            );
            assert_eq!(axis.code().parse::<Axis>(), Ok(axis));
        }
        let codes: std::collections::HashSet<_> = Axis::ALL.iter().map(|a| a.code()).collect();
        assert_eq!(codes.len(), 9);
    }

    #[test]
    fn is_biased_matches_popcount_exhaustively() {
        let mut n = 0;
        for labels in LabelSet::all() {
            assert_eq!(is_biased(labels), labels.bits().count_ones() > 0);
            n += 1;
        }
        assert_eq!(n, 512);
        assert!(!is_biased(LabelSet::EMPTY));
        assert!(is_biased(LabelSet::single(Axis::Rac)));
        assert!(is_biased(LabelSet::single(Axis::Gen).with(Axis::Rac)));
    }

    #[test]
    fn set_algebra() {
        let a: LabelSet = [Axis::Gen, Axis::Rac].into_iter().collect();
        let b: LabelSet = [Axis::Rac, Axis::Rel].into_iter().collect();
        assert_eq!(a.union(b).codes(), vec!["GEN", "RAC", "REL"]);
        assert_eq!(a.intersection(b), LabelSet::single(Axis::Rac));
        assert!(a.is_superset(LabelSet::single(Axis::Gen)));
        assert!(!a.is_disjoint(b));
        assert_eq!(a.complement().len(), 7);
        assert_eq!(a.policy_codes(), "S1, S5");
        assert_eq!(LabelSet::EMPTY.policy_codes(), "S10");
        assert_eq!(LabelSet::from_bits(1 << 9), None);
    }

    #[test]
    fn labelset_serializes_as_codes() {
        let a: LabelSet = [Axis::Rel, Axis::Gen].into_iter().collect();
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(json, r#"["GEN","REL"]"#);
        let back: LabelSet = serde_json::from_str(r#"["rel","GEN"]"#).unwrap();
        assert_eq!(back, a);
        assert!(serde_json::from_str::<LabelSet>(r#"["XYZ"]"#).is_err());
    }

    #[test]
    fn builtin_rules_follow_harmonization_policy() {
        let rules = RuleSet::builtin();
        let rac_rel: LabelSet = [Axis::Rac, Axis::Rel].into_iter().collect();
        assert_eq!(harmonize("jewish", &rules), Ok(rac_rel));
        assert_eq!(harmonize("  Jewish ", &rules), Ok(rac_rel));
        assert_eq!(harmonize("pregnancy", &rules), Ok(LabelSet::single(Axis::Gen)));
        assert_eq!(harmonize("middle eastern", &rules), Ok(LabelSet::single(Axis::Rac)));
        assert_eq!(harmonize("arab", &rules), Ok(LabelSet::single(Axis::Rac)));
        assert_eq!(harmonize("transgender", &rules), Ok(LabelSet::single(Axis::Gen)));
        assert_eq!(harmonize("mexican", &rules), Ok(LabelSet::single(Axis::Nat)));
        assert_eq!(
            harmonize("victim", &rules),
            Err(TaxonomyError::ExcludedLabel("victim".into()))
        );
        assert_eq!(
            harmonize("martian", &rules),
            Err(TaxonomyError::UnmappedLabel("martian".into()))
        );
    }

    #[test]
    fn duplicate_rules_are_rejected() {
        let text = "{\"source_label\":\"a\",\"axes\":[\"GEN\"]}\n{\"source_label\":\" A \",\"axes\":[\"SO\"]}\n";
        assert_eq!(
            RuleSet::parse(text.as_bytes()).unwrap_err(),
            TaxonomyError::DuplicateRule("a".into())
        );
        let bad = "\n\n{\"source_label\":\"a\",\"axes\":[\"NOPE\"]}\n";
        assert!(matches!(
            RuleSet::parse(bad.as_bytes()),
            Err(TaxonomyError::RuleFile { line: 3, .. })
        ));
        let empty = "{\"source_label\":\"  \",\"axes\":[]}";
        assert_eq!(RuleSet::parse(empty.as_bytes()).unwrap_err(), TaxonomyError::EmptyRuleLabel);
    }
}
