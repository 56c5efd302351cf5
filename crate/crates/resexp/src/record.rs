//! Flat `key = value` text records.
//!
//! Floats are written with the shortest representation that parses back to
//! the same bits, so a record round-trips exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Record {
    entries: Vec<(String, String)>,
}

impl Record {
    pub fn new() -> Self {
        Record::default()
    }

    fn push_raw(&mut self, key: &str, value: String) {
        debug_assert!(!key.contains('=') && !key.contains(char::is_whitespace));
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn float(&mut self, key: &str, v: f64) -> &mut Self {
        self.push_raw(key, format!("{v:?}"));
        self
    }

    pub fn uint(&mut self, key: &str, v: u64) -> &mut Self {
        self.push_raw(key, v.to_string());
        self
    }

    pub fn flag(&mut self, key: &str, v: bool) -> &mut Self {
        self.push_raw(key, v.to_string());
        self
    }

    pub fn text(&mut self, key: &str, v: &str) -> &mut Self {
        assert!(!v.contains('\n'), "record values are single-line");
        self.push_raw(key, v.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    pub fn get_u64(&self, key: &str) -> Option<u64> {
        self.get(key)?.parse().ok()
    }

    pub fn get_bool(&self, key: &str) -> Option<bool> {
        self.get(key)?.parse().ok()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> std::result::Result<Record, String> {
        let mut rec = Record::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(format!("line {}: empty key", i + 1));
            }
            rec.push_raw(k, v.trim().to_string());
        }
        Ok(rec)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())
            .map_err(|e| CliError::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<Record> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        Record::parse(&text).map_err(|message| CliError::Format {
            what: "record",
            path: path.to_path_buf(),
            message,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_exactly() {
        let vals = [0.1, 1e-300, -2.5e17, f64::MIN_POSITIVE, 1.0 / 3.0, f64::INFINITY];
        let mut r = Record::new();
        for (i, v) in vals.iter().enumerate() {
            r.float(&format!("v{i}"), *v);
        }
        let back = Record::parse(&r.render()).unwrap();
        for (i, v) in vals.iter().enumerate() {
            assert_eq!(back.get_f64(&format!("v{i}")).unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn later_keys_overwrite() {
        let mut r = Record::new();
        r.uint("a", 1).uint("a", 2);
        assert_eq!(r.render(), "a = 2\n");
    }

    #[test]
    fn parse_reports_line() {
        let err = Record::parse("a = 1\nbroken\n").unwrap_err();
        assert!(err.starts_with("line 2"), "{err}");
    }
}
