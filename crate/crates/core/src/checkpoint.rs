//! Line-oriented text checkpoints.
//!
//! Each line is a key followed by whitespace-separated values; reals are
//! written with 17 significant digits so they read back bit-identically.
//! A section starts with a `<tag> v<version>` header and ends with `end`.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fmt::g17;

#[derive(Debug, Default, Clone)]
pub struct CheckpointWriter {
    out: String,
}

impl CheckpointWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn header(&mut self, tag: &str, version: u32) {
        self.out.push_str(&format!("{tag} v{version}\n"));
    }

    pub fn value(&mut self, key: &str, value: impl Display) {
        self.out.push_str(&format!("{key} {value}\n"));
    }

    pub fn real(&mut self, key: &str, value: f64) {
        self.reals(key, &[value]);
    }

    pub fn reals(&mut self, key: &str, values: &[f64]) {
        self.out.push_str(key);
        for &v in values {
            self.out.push(' ');
            self.out.push_str(&g17(v));
        }
        self.out.push('\n');
    }

    pub fn end(&mut self) {
        self.out.push_str("end\n");
    }

    pub fn finish(self) -> String {
        self.out
    }
}

pub struct CheckpointReader<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
}

impl<'a> CheckpointReader<'a> {
    pub fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate().peekable(),
        }
    }

    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        loop {
            match self.lines.next() {
                Some((_, l)) if l.trim().is_empty() || l.trim_start().starts_with('#') => continue,
                Some((i, l)) => return Ok((i + 1, l.trim())),
                None => return Err(Error::Format("unexpected end of checkpoint".into())),
            }
        }
    }

    /// Key of the next non-blank line without consuming it.
    pub fn peek_key(&mut self) -> Option<&'a str> {
        while let Some(&(_, l)) = self.lines.peek() {
            let t = l.trim();
            if t.is_empty() || t.starts_with('#') {
                self.lines.next();
                continue;
            }
            return t.split_whitespace().next();
        }
        None
    }

    /// Consumes `<tag> v<version>` and returns the version.
    pub fn header(&mut self, tag: &str) -> Result<u32> {
        let (no, line) = self.next_line()?;
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next()) {
            (Some(t), Some(v)) if t == tag && v.starts_with('v') => v[1..]
                .parse()
                .map_err(|_| Error::Format(format!("line {no}: bad version {v:?}"))),
            _ => Err(Error::Format(format!("line {no}: expected header `{tag} v<N>`, found {line:?}"))),
        }
    }

    fn line_for(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (no, line) = self.next_line()?;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some(k) if k == key => Ok((no, parts.collect())),
            other => Err(Error::Format(format!("line {no}: expected key {key:?}, found {other:?}"))),
        }
    }

    pub fn value<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let (no, vals) = self.line_for(key)?;
        match vals.as_slice() {
            [v] => v
                .parse()
                .map_err(|_| Error::Format(format!("line {no}: cannot parse {key} value {v:?}"))),
            _ => Err(Error::Format(format!("line {no}: {key} expects one value, found {}", vals.len()))),
        }
    }

    /// Raw whitespace-separated tokens following `key`.
    pub fn tokens(&mut self, key: &str) -> Result<Vec<&'a str>> {
        Ok(self.line_for(key)?.1)
    }

    pub fn reals(&mut self, key: &str, expected: usize) -> Result<Vec<f64>> {
        let (no, vals) = self.line_for(key)?;
        if vals.len() != expected {
            return Err(Error::Format(format!(
                "line {no}: {key} expects {expected} values, found {}",
                vals.len()
            )));
        }
        vals.iter()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {no}: bad number {v:?} in {key}")))
            })
            .collect()
    }

    pub fn end(&mut self) -> Result<()> {
        let (no, line) = self.next_line()?;
        if line == "end" {
            Ok(())
        } else {
            Err(Error::Format(format!("line {no}: expected `end`, found {line:?}")))
        }
    }
}
