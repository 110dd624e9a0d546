//! Append-only transcript cache.
//!
//! One record per line:
//!
//! ```text
//! C1 <digest> <len> <payload>
//! ```
//!
//! `digest` is the hex SHA-256 (truncated to 32 chars) of the structured key
//! `client \0 class \0 epoch \0 step \0 sha256(prompt)`. `payload` is the
//! response with `\\`, `\n`, and `\r` escaped so a record never spans lines,
//! and `len` is the byte length of the escaped payload, which localizes
//! truncation or corruption to a single line.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Structured cache key for one completion call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheKey<'a> {
    pub client: &'a str,
    pub class: &'a str,
    pub epoch: usize,
    pub step: usize,
    pub prompt: &'a str,
}

impl CacheKey<'_> {
    pub fn digest(&self) -> String {
        let prompt_digest = hex_digest(self.prompt.as_bytes());
        let canonical = format!(
            "{}\0{}\0{}\0{}\0{}",
            self.client, self.class, self.epoch, self.step, prompt_digest
        );
        let mut d = hex_digest(canonical.as_bytes());
        d.truncate(32);
        d
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    let mut s = String::with_capacity(out.len() * 2);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            other => out.push(other),
        }
    }
    out
}

fn unescape(text: &str, line: usize) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => {
                return Err(Error::Cache {
                    line,
                    message: format!("bad escape sequence `\\{}`", other.map(String::from).unwrap_or_default()),
                })
            }
        }
    }
    Ok(out)
}

/// Disk-backed response cache, append-only within a run.
#[derive(Debug)]
pub struct TranscriptCache {
    path: PathBuf,
    map: BTreeMap<String, String>,
    writer: File,
}

impl TranscriptCache {
    /// Opens (or creates) the cache file and loads every existing record.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut map = BTreeMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (idx, line) in reader.lines().enumerate() {
                let lineno = idx + 1;
                let line = line?;
                if line.is_empty() {
                    continue;
                }
                let mut parts = line.splitn(4, ' ');
                let tag = parts.next().unwrap_or_default();
                if tag != "C1" {
                    return Err(Error::Cache {
                        line: lineno,
                        message: format!("unknown record tag `{tag}`"),
                    });
                }
                let digest = parts
                    .next()
                    .ok_or(Error::Cache {
                        line: lineno,
                        message: "missing digest".into(),
                    })?
                    .to_string();
                let len: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or(Error::Cache {
                        line: lineno,
                        message: "missing or invalid length".into(),
                    })?;
                let payload = parts.next().unwrap_or_default();
                if payload.len() != len {
                    return Err(Error::Cache {
                        line: lineno,
                        message: format!("payload is {} bytes, header says {len}", payload.len()),
                    });
                }
                let response = unescape(payload, lineno)?;
                map.insert(digest, response);
            }
        }
        let writer = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            map,
            writer,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn lookup(&self, key: &CacheKey) -> Option<&str> {
        self.map.get(&key.digest()).map(|s| s.as_str())
    }

    /// Appends a record; storing an already-present key is a no-op.
    pub fn store(&mut self, key: &CacheKey, response: &str) -> Result<()> {
        let digest = key.digest();
        if self.map.contains_key(&digest) {
            return Ok(());
        }
        let payload = escape(response);
        writeln!(self.writer, "C1 {digest} {} {payload}", payload.len())?;
        self.writer.flush()?;
        self.map.insert(digest, response.to_string());
        Ok(())
    }
}

/// Cache-through completion: replay a stored response or call the client and
/// persist its answer.
pub fn complete_cached(
    cache: &mut TranscriptCache,
    client: &dyn super::CompletionClient,
    history: &super::DialogueTranscript,
    prompt: &str,
) -> Result<String> {
    let key = CacheKey {
        client: client.identity(),
        class: &history.class_name,
        epoch: history.epoch,
        step: history.next_step(),
        prompt,
    };
    if let Some(hit) = cache.lookup(&key) {
        return Ok(hit.to_string());
    }
    let response = client.complete(history, prompt)?;
    cache.store(&key, &response)?;
    Ok(response)
}
