//! Condition split files: `{"day": [...], "rain": [...], "night": [...]}`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{load_err, DataError, Result};
use crate::scene::Condition;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFile {
    pub day: Vec<String>,
    pub rain: Vec<String>,
    pub night: Vec<String>,
}

/// Validated token to condition mapping.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConditionSplit {
    conditions: BTreeMap<String, Condition>,
}

impl ConditionSplit {
    pub fn from_file(file: SplitFile) -> Result<Self> {
        let mut conditions = BTreeMap::new();
        for (cond, tokens) in [(Condition::Day, file.day), (Condition::Rain, file.rain), (Condition::Night, file.night)] {
            for t in tokens {
                if let Some(prev) = conditions.insert(t.clone(), cond) {
                    return Err(DataError::Split(format!("token `{t}` listed under both {prev} and {cond}")));
                }
            }
        }
        Ok(Self { conditions })
    }

    pub fn from_pairs<I: IntoIterator<Item = (String, Condition)>>(pairs: I) -> Result<Self> {
        let mut file = SplitFile::default();
        for (t, c) in pairs {
            match c {
                Condition::Day => file.day.push(t),
                Condition::Rain => file.rain.push(t),
                Condition::Night => file.night.push(t),
            }
        }
        Self::from_file(file)
    }

    pub fn condition(&self, token: &str) -> Option<Condition> {
        self.conditions.get(token).copied()
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    pub fn counts(&self) -> BTreeMap<Condition, usize> {
        let mut c: BTreeMap<Condition, usize> = Condition::ALL.iter().map(|&k| (k, 0)).collect();
        for v in self.conditions.values() {
            *c.get_mut(v).expect("all conditions present") += 1;
        }
        c
    }

    pub fn tokens(&self, condition: Condition) -> Vec<&str> {
        self.conditions.iter().filter(|(_, &c)| c == condition).map(|(t, _)| t.as_str()).collect()
    }

    /// Tokens from `tokens` that the split does not cover.
    pub fn missing<'a>(&self, tokens: &'a [String]) -> Vec<&'a str> {
        tokens.iter().filter(|t| !self.conditions.contains_key(*t)).map(String::as_str).collect()
    }

    pub fn to_file(&self) -> SplitFile {
        let own = |c| self.tokens(c).into_iter().map(String::from).collect();
        SplitFile {
            day: own(Condition::Day),
            rain: own(Condition::Rain),
            night: own(Condition::Night),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file()).expect("split serializes");
        std::fs::write(path, text)?;
        Ok(())
    }
}

pub fn parse_split(text: &str) -> Result<ConditionSplit> {
    let file: SplitFile = serde_json::from_str(text).map_err(|e| DataError::Split(e.to_string()))?;
    ConditionSplit::from_file(file)
}

pub fn load_split(path: &Path) -> Result<ConditionSplit> {
    let text = std::fs::read_to_string(path).map_err(|e| load_err(path, e))?;
    let file: SplitFile = serde_json::from_str(&text).map_err(|e| DataError::Schema {
        file: path.to_path_buf(),
        message: e.to_string(),
    })?;
    ConditionSplit::from_file(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token() {
        let s = parse_split(r#"{"day":["a"],"rain":[],"night":[]}"#).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.condition("a"), Some(Condition::Day));
    }

    #[test]
    fn duplicate_rejected() {
        let e = parse_split(r#"{"day":["a"],"rain":["b"],"night":["a"]}"#).unwrap_err();
        assert!(e.to_string().contains("`a`"));
        assert!(parse_split(r#"{"day":["a","a"],"rain":[],"night":[]}"#).is_err());
    }

    #[test]
    fn missing_key_rejected() {
        assert!(parse_split(r#"{"day":["a"]}"#).is_err());
    }
}
