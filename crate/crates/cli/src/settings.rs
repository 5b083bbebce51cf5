//! Flat `key = value` settings from an optional file plus `--key value`
//! command-line overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use m2m_core::trainer::parse_pairs;
use m2m_core::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
    used: std::cell::RefCell<Vec<String>>,
}

fn normalize(key: &str) -> String {
    key.trim_start_matches("--").replace('-', "_")
}

/// Splits `--key value` and `--key=value` tokens into pairs.
pub fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = tokens.iter();
    while let Some(tok) = it.next() {
        if !tok.starts_with("--") || tok.len() == 2 {
            return Err(Error::validation(format!("expected --key value, found {tok:?}")));
        }
        match tok.split_once('=') {
            Some((k, v)) => out.push((normalize(k), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::validation(format!("{tok} needs a value")))?;
                out.push((normalize(tok), v.clone()));
            }
        }
    }
    Ok(out)
}

impl Settings {
    pub fn load(config: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = config {
            let text = fs::read_to_string(path).map_err(|e| Error::file(path, e.to_string()))?;
            for (k, v) in parse_pairs(&text)? {
                values.insert(normalize(&k), v);
            }
        }
        for (k, v) in parse_overrides(overrides)? {
            values.insert(k, v);
        }
        Ok(Settings {
            values,
            used: Default::default(),
        })
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> Self {
        Settings {
            values: pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            used: Default::default(),
        }
    }

    /// A copy without `key`.
    pub fn without(&self, key: &str) -> Settings {
        let mut values = self.values.clone();
        values.remove(key);
        Settings {
            values,
            used: Default::default(),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().push(key.to_string());
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::validation(format!("{key}: cannot parse {v:?}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Pairs under `prefix.`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> Vec<(String, String)> {
        let p = format!("{prefix}.");
        self.values
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(&p).map(|rest| {
                    self.used.borrow_mut().push(k.clone());
                    (rest.to_string(), v.clone())
                })
            })
            .collect()
    }

    /// Fails on keys nothing asked for.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .values
            .keys()
            .filter(|k| !used.contains(k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::validation(format!("unknown setting(s): {}", unknown.join(", "))))
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.values
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                .collect(),
        )
    }

    /// `key = value` lines in key order.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_accept_both_spellings() {
        let toks: Vec<String> = ["--total-iters", "5", "--seed=3"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let p = parse_overrides(&toks).unwrap();
        assert_eq!(p, vec![("total_iters".into(), "5".into()), ("seed".into(), "3".into())]);
    }

    #[test]
    fn dangling_key_is_rejected() {
        assert!(parse_overrides(&["--seed".to_string()]).is_err());
        assert!(parse_overrides(&["seed".to_string()]).is_err());
    }

    #[test]
    fn unread_keys_are_reported() {
        let s = Settings::from_pairs([("seed", "1".to_string()), ("bogus", "2".to_string())]);
        assert_eq!(s.get_or("seed", 0u64).unwrap(), 1);
        let e = s.finish().unwrap_err().to_string();
        assert!(e.contains("bogus") && !e.contains("seed"));
    }
}
