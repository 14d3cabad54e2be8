//! Flat `key = value` configuration files shared by scene specs and
//! training configs. `#` starts a comment; blank lines are ignored.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed key-value pairs, in file order, with duplicate keys rejected.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let content = line.split('#').next().unwrap_or("").trim();
            if !content.is_empty() {
                let (k, v) = content
                    .split_once('=')
                    .ok_or_else(|| Error::parse(offset, format!("expected `key = value`, got `{content}`")))?;
                let (k, v) = (k.trim(), v.trim());
                if k.is_empty() {
                    return Err(Error::parse(offset, "empty key"));
                }
                if entries.iter().any(|(e, _)| e == k) {
                    return Err(Error::BadValue {
                        key: k.to_string(),
                        message: "key given more than once".into(),
                    });
                }
                entries.push((k.to_string(), v.to_string()));
            }
            offset += line.len() as u64;
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Fail with [`Error::UnknownKey`] on the first key outside `known`.
    pub fn check_keys(&self, known: &[&str]) -> Result<()> {
        match self.entries.iter().find(|(k, _)| !known.contains(&k.as_str())) {
            Some((k, _)) => Err(Error::UnknownKey(k.clone())),
            None => Ok(()),
        }
    }
}

/// Parse a single value, naming the key on failure.
pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| Error::BadValue {
        key: key.to_string(),
        message: format!("`{value}`: {e}"),
    })
}

/// Parse a comma-separated list.
pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

/// Render ordered pairs back into the file format.
pub fn render(pairs: &BTreeMap<&str, String>) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn bad_value(key: &str, message: impl Into<String>) -> Error {
    Error::BadValue {
        key: key.to_string(),
        message: message.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let kv = KeyValues::parse("# header\n\nseed = 4 # inline\n name=street \n").unwrap();
        assert_eq!(kv.get("seed"), Some("4"));
        assert_eq!(kv.get("name"), Some("street"));
        assert_eq!(kv.iter().count(), 2);
    }

    #[test]
    fn reports_malformed_lines_with_offsets() {
        match KeyValues::parse("a = 1\nbroken\n").unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 6),
            e => panic!("{e}"),
        }
        assert!(KeyValues::parse("a = 1\na = 2\n").is_err());
    }

    #[test]
    fn unknown_and_bad_values_name_the_key() {
        let kv = KeyValues::parse("alpha = 1\nbeta = x\n").unwrap();
        assert!(matches!(kv.check_keys(&["alpha"]), Err(Error::UnknownKey(k)) if k == "beta"));
        let err = parse_value::<f64>("beta", "x").unwrap_err();
        assert!(matches!(err, Error::BadValue { ref key, .. } if key == "beta"));
        assert_eq!(parse_list::<f64>("l", "1, 2,3").unwrap(), vec![1.0, 2.0, 3.0]);
    }
}
