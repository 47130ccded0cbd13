//! Merges `--config` file values with command-line flags; flags win.

use std::path::Path;
use std::str::FromStr;

use cdgmae::config::KeyValues;
use cdgmae::{Error, Result};

pub struct Settings {
    kv: KeyValues,
}

impl Settings {
    /// Reads `config` if given and rejects keys outside `allowed`.
    pub fn load(config: Option<&Path>, allowed: &[&str]) -> Result<Self> {
        let kv = match config {
            Some(path) => KeyValues::load(path)?,
            None => KeyValues::new(),
        };
        kv.reject_unknown(allowed)?;
        Ok(Self { kv })
    }

    pub fn flag<T: ToString>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.kv.set(key, v.to_string());
        }
        self
    }

    pub fn switch(&mut self, key: &str, on: bool) -> &mut Self {
        if on {
            self.kv.set(key, "true");
        }
        self
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.kv.get(key)
    }

    pub fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.kv.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.kv.get(key)?.ok_or_else(|| Error::Config(format!("missing required setting `--{}`", key.replace('_', "-"))))
    }

    /// Comma-separated list, or `default` when the key is absent.
    pub fn list<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.kv.get_str(key) {
            None => Ok(default),
            Some(s) => s
                .split(',')
                .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse list item {p:?}"))))
                .collect(),
        }
    }

    /// Everything except `skip`, for handing on to a typed config parser.
    pub fn without(&self, skip: &[&str]) -> KeyValues {
        let mut out = KeyValues::new();
        for (k, v) in self.kv.iter().filter(|(k, _)| !skip.contains(k)) {
            out.set(k, v);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "anchors = 2\nseed = 5\n").unwrap();
        let mut s = Settings::load(Some(&p), &["anchors", "seed"]).unwrap();
        s.flag("anchors", Some(3)).flag("seed", None::<u64>);
        assert_eq!(s.require::<usize>("anchors").unwrap(), 3);
        assert_eq!(s.require::<u64>("seed").unwrap(), 5);
    }

    #[test]
    fn unknown_file_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "bogus = 1\n").unwrap();
        assert!(Settings::load(Some(&p), &["seed"]).is_err());
    }

    #[test]
    fn lists_parse() {
        let mut s = Settings::load(None, &[]).unwrap();
        s.flag("n", Some("1, 2,3"));
        assert_eq!(s.list::<usize>("n", vec![]).unwrap(), vec![1, 2, 3]);
        assert_eq!(s.list::<usize>("absent", vec![7]).unwrap(), vec![7]);
    }
}
