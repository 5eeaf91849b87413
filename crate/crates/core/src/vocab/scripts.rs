use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScriptName {
    Han,
    Hiragana,
    Katakana,
    Cyrillic,
    Hangul,
    Latin,
    Digit,
    Other,
}

impl ScriptName {
    pub const ALL: [ScriptName; 8] = [
        ScriptName::Han,
        ScriptName::Hiragana,
        ScriptName::Katakana,
        ScriptName::Cyrillic,
        ScriptName::Hangul,
        ScriptName::Latin,
        ScriptName::Digit,
        ScriptName::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScriptName::Han => "han",
            ScriptName::Hiragana => "hiragana",
            ScriptName::Katakana => "katakana",
            ScriptName::Cyrillic => "cyrillic",
            ScriptName::Hangul => "hangul",
            ScriptName::Latin => "latin",
            ScriptName::Digit => "digit",
            ScriptName::Other => "other",
        }
    }
}

impl fmt::Display for ScriptName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScriptName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        ScriptName::ALL
            .into_iter()
            .find(|n| n.as_str() == lower)
            .ok_or_else(|| Error::Config(format!("unknown script class {s:?}")))
    }
}

/// A named set of inclusive code-point intervals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptClass {
    name: ScriptName,
    ranges: Vec<(u32, u32)>,
}

impl ScriptClass {
    /// Sorts the intervals and rejects inverted or overlapping ones.
    pub fn new(name: ScriptName, mut ranges: Vec<(u32, u32)>) -> Result<Self> {
        if let Some(&(lo, hi)) = ranges.iter().find(|(lo, hi)| lo > hi) {
            return Err(Error::Config(format!(
                "{name}: inverted range {lo:04X}..{hi:04X}"
            )));
        }
        ranges.sort_unstable();
        if let Some(w) = ranges.windows(2).find(|w| w[0].1 >= w[1].0) {
            return Err(Error::Config(format!(
                "{name}: overlapping ranges {:04X}..{:04X} and {:04X}..{:04X}",
                w[0].0, w[0].1, w[1].0, w[1].1
            )));
        }
        Ok(Self { name, ranges })
    }

    pub fn name(&self) -> ScriptName {
        self.name
    }

    pub fn ranges(&self) -> &[(u32, u32)] {
        &self.ranges
    }

    pub fn contains(&self, c: char) -> bool {
        let cp = c as u32;
        // ranges are sorted and disjoint
        let idx = self.ranges.partition_point(|&(_, hi)| hi < cp);
        self.ranges.get(idx).is_some_and(|&(lo, _)| lo <= cp)
    }
}

#[derive(Deserialize)]
struct ScriptTable {
    classes: Vec<ScriptEntry>,
}

#[derive(Deserialize)]
struct ScriptEntry {
    name: ScriptName,
    ranges: Vec<(String, String, String)>,
}

fn parse_table(json: &str) -> Result<Vec<ScriptClass>> {
    let table: ScriptTable =
        serde_json::from_str(json).map_err(|e| Error::json("script table", e))?;
    table
        .classes
        .into_iter()
        .map(|entry| {
            let ranges = entry
                .ranges
                .iter()
                .map(|(lo, hi, _)| Ok((parse_hex(lo)?, parse_hex(hi)?)))
                .collect::<Result<Vec<_>>>()?;
            ScriptClass::new(entry.name, ranges)
        })
        .collect()
}

fn parse_hex(s: &str) -> Result<u32> {
    u32::from_str_radix(s, 16).map_err(|_| Error::Config(format!("bad code point {s:?}")))
}

static BUILTIN: LazyLock<Vec<ScriptClass>> = LazyLock::new(|| {
    parse_table(include_str!("../../data/scripts.json")).expect("bundled script table is valid")
});

/// The eight bundled classes, in [`ScriptName::ALL`] order.
pub fn builtin_classes() -> &'static [ScriptClass] {
    &BUILTIN
}

pub fn builtin_class(name: ScriptName) -> &'static ScriptClass {
    BUILTIN
        .iter()
        .find(|c| c.name == name)
        .expect("every script name has a bundled class")
}

/// Every class with at least one code point of `token` inside its ranges.
pub fn classify_token(token: &str, classes: &[ScriptClass]) -> BTreeSet<ScriptName> {
    let mut found = BTreeSet::new();
    for c in token.chars() {
        for class in classes {
            if class.contains(c) {
                found.insert(class.name);
            }
        }
    }
    found
}

/// Classes containing a single code point, against the bundled table.
pub fn classify_char(c: char) -> impl Iterator<Item = ScriptName> {
    builtin_classes()
        .iter()
        .filter(move |class| class.contains(c))
        .map(|class| class.name)
}
