//! Plain-text `key=value` documents.
//!
//! One entry per line, `#` starts a comment line, blank lines are ignored.
//! Key order is preserved so that written files are byte-stable.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDoc {
    entries: Vec<(String, String)>,
    source: Option<std::path::PathBuf>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut doc = KvDoc {
            entries: Vec::new(),
            source: Some(source.to_path_buf()),
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(source, lineno + 1, format!("expected key=value, got `{line}`")))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::parse(source, lineno + 1, "empty key"));
            }
            if doc.get(key).is_some() {
                return Err(Error::parse(source, lineno + 1, format!("duplicate key `{key}`")));
            }
            doc.entries.push((key.to_string(), v.trim().to_string()));
        }
        Ok(doc)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }

    /// Sets `key`, replacing an existing value in place.
    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    fn source(&self) -> std::path::PathBuf {
        self.source.clone().unwrap_or_else(|| "<memory>".into())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::parse(self.source(), 0, format!("missing key `{key}`")))
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::parse(self.source(), 0, format!("bad value for `{key}`: `{raw}`")))
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            Some(_) => self.parse_value(key),
            None => Ok(default),
        }
    }

    /// Comma-separated list value; an empty string yields an empty list.
    pub fn parse_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.require(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| {
                    Error::parse(self.source(), 0, format!("bad list item for `{key}`: `{s}`"))
                })
            })
            .collect()
    }
}

impl Display for KvDoc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

pub(crate) fn join<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_skips_comments_and_rejects_duplicates() {
        let doc = KvDoc::parse("# hi\na = 1\n\nb=x,y\n", Path::new("t")).unwrap();
        assert_eq!(doc.get("a"), Some("1"));
        assert_eq!(doc.parse_list::<String>("b").unwrap(), vec!["x", "y"]);
        assert!(KvDoc::parse("a=1\na=2\n", Path::new("t")).is_err());
        assert!(KvDoc::parse("novalue\n", Path::new("t")).is_err());
    }

    #[test]
    fn set_preserves_order() {
        let mut doc = KvDoc::new();
        doc.set("z", 1);
        doc.set("a", 2);
        doc.set("z", 3);
        assert_eq!(doc.to_string(), "z=3\na=2\n");
    }
}
