//! Layered `key=value` settings: config file first, then command-line flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use drift_core::kv::KvDoc;

pub const SEED_ENV: &str = "DRIFT_SEED";

/// Merges `file` (if any) with `overrides`; flags win. Every key must be in
/// `allowed`.
pub fn merge(file: Option<&Path>, overrides: &[(String, String)], allowed: &[&str]) -> Result<KvDoc> {
    let mut doc = match file {
        Some(p) => KvDoc::read(p)?,
        None => KvDoc::new(),
    };
    for (k, v) in overrides {
        doc.set(k, v);
    }
    if let Some(k) = doc.keys().find(|k| !allowed.contains(k)) {
        bail!(drift_core::Error::InvalidArgument(format!("unknown config key `{k}`")));
    }
    Ok(doc)
}

/// Fills `seed` from the environment when neither file nor flags set it.
pub fn seed_fallback(doc: &mut KvDoc, key: &str) -> Result<()> {
    if doc.get(key).is_none() {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed: u64 = v
                .trim()
                .parse()
                .map_err(|_| drift_core::Error::InvalidArgument(format!("{SEED_ENV}=`{v}` is not an integer")))?;
            doc.set(key, seed);
        }
    }
    Ok(())
}

/// Parses a `KEY=VALUE` flag argument.
pub fn parse_assignment(s: &str) -> std::result::Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(format!("expected KEY=VALUE, got `{s}`")),
    }
}

/// Collects the named optional flags and generic `--set` pairs.
pub struct Overrides(pub Vec<(String, String)>);

impl Overrides {
    pub fn new(set: &[(String, String)]) -> Self {
        Self(set.to_vec())
    }

    pub fn add(&mut self, key: &str, value: Option<impl ToString>) -> &mut Self {
        if let Some(v) = value {
            self.0.push((key.to_string(), v.to_string()));
        }
        self
    }
}

pub fn require_path(doc: &KvDoc, key: &str) -> Result<std::path::PathBuf> {
    doc.get(key)
        .map(Into::into)
        .with_context(|| format!("missing required setting `{key}`"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_and_unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "seed=1\ntubers=3\n").unwrap();
        let doc = merge(Some(&p), &[("seed".into(), "9".into())], &["seed", "tubers"]).unwrap();
        assert_eq!(doc.get("seed"), Some("9"));
        assert_eq!(doc.get("tubers"), Some("3"));
        assert!(merge(Some(&p), &[], &["seed"]).is_err());
    }

    #[test]
    fn assignments() {
        assert_eq!(parse_assignment("a = b").unwrap(), ("a".into(), "b".into()));
        assert_eq!(parse_assignment("t=E1->E2").unwrap().1, "E1->E2");
        assert!(parse_assignment("novalue").is_err());
        assert!(parse_assignment("=x").is_err());
    }
}
