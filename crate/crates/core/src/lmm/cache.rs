//! On-disk response cache: one file per cache key.
//!
//! File layout: a few `name: value` header lines, one blank line, then the
//! response text verbatim.

use std::fs;
use std::path::{Path, PathBuf};

use super::Usage;
use crate::dataset::write_atomic;

const MAGIC: &str = "tsr-cache v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CachedResponse {
    pub model: String,
    pub created_at: String,
    pub usage: Usage,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ResponseCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.txt"))
    }

    /// `None` on a miss or an unreadable/corrupt entry.
    pub fn get(&self, key: &str) -> Option<CachedResponse> {
        let raw = fs::read_to_string(self.path_for(key)).ok()?;
        parse_entry(&raw)
    }

    pub fn put(&self, key: &str, entry: &CachedResponse) -> std::io::Result<()> {
        let body = format!(
            "{MAGIC}\ncreated_at: {}\nmodel: {}\ninput_tokens: {}\noutput_tokens: {}\n\n{}",
            entry.created_at, entry.model, entry.usage.input_tokens, entry.usage.output_tokens, entry.text
        );
        write_atomic(&self.path_for(key), body.as_bytes())
    }
}

fn parse_entry(raw: &str) -> Option<CachedResponse> {
    let (header, text) = raw.split_once("\n\n")?;
    let mut lines = header.lines();
    if lines.next()? != MAGIC {
        return None;
    }
    let mut entry = CachedResponse {
        model: String::new(),
        created_at: String::new(),
        usage: Usage::default(),
        text: text.to_string(),
    };
    for line in lines {
        let (k, v) = line.split_once(": ")?;
        match k {
            "created_at" => entry.created_at = v.to_string(),
            "model" => entry.model = v.to_string(),
            "input_tokens" => entry.usage.input_tokens = v.parse().ok()?,
            "output_tokens" => entry.usage.output_tokens = v.parse().ok()?,
            _ => {}
        }
    }
    Some(entry)
}
