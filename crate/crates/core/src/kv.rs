//! Plain-text `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique; a
//! repeated key is a parse error. Values are kept as raw strings and decoded
//! by the consumer through the typed getters.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| Error::Parse {
                line,
                message: format!("expected `key = value`, got `{trimmed}`"),
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse {
                    line,
                    message: "empty key".into(),
                });
            }
            if entries
                .insert(key.clone(), (line, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::Parse {
                    line,
                    message: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(KvFile { entries })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map(|(l, _)| *l).unwrap_or(0)
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|e| Error::Parse {
                line: self.line_of(key),
                message: format!("`{key}`: {e}"),
            }),
        }
    }

    /// Comma-separated list of scalars.
    pub fn get_list<T>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => parse_list(v)
                .map(Some)
                .map_err(|message| Error::Parse {
                    line: self.line_of(key),
                    message: format!("`{key}`: {message}"),
                }),
        }
    }

    /// Semicolon-separated list of `x,y` points.
    pub fn get_points(&self, key: &str) -> Result<Option<Vec<[f64; 2]>>> {
        let Some(v) = self.raw(key) else {
            return Ok(None);
        };
        let mut points = Vec::new();
        for chunk in v.split(';').map(str::trim).filter(|c| !c.is_empty()) {
            let xy: Vec<f64> = parse_list(chunk).map_err(|message| Error::Parse {
                line: self.line_of(key),
                message: format!("`{key}`: {message}"),
            })?;
            if xy.len() != 2 {
                return Err(Error::Parse {
                    line: self.line_of(key),
                    message: format!("`{key}`: point `{chunk}` needs exactly two coordinates"),
                });
            }
            points.push([xy[0], xy[1]]);
        }
        Ok(Some(points))
    }
}

pub fn parse_list<T>(text: &str) -> std::result::Result<Vec<T>, String>
where
    T: FromStr,
    T::Err: Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("`{s}`: {e}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_lists_and_points() {
        let kv = KvFile::parse(
            "# header\n\nk = 4\nseeds = 1, 2,3\nris = 50,0; 20,0\nname = desk\n",
        )
        .unwrap();
        assert_eq!(kv.get::<usize>("k").unwrap(), Some(4));
        assert_eq!(kv.get_list::<u64>("seeds").unwrap(), Some(vec![1, 2, 3]));
        assert_eq!(
            kv.get_points("ris").unwrap(),
            Some(vec![[50.0, 0.0], [20.0, 0.0]])
        );
        assert_eq!(kv.raw("name"), Some("desk"));
        assert_eq!(kv.get::<f64>("missing").unwrap(), None);
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(matches!(
            KvFile::parse("a = 1\na = 2"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            KvFile::parse("just words"),
            Err(Error::Parse { line: 1, .. })
        ));
        let kv = KvFile::parse("k = four").unwrap();
        assert!(kv.get::<usize>("k").is_err());
    }
}
