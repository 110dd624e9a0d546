//! Pluggable text-generation and embedding clients with a disk-backed
//! transcript cache. CI only ever exercises the scripted client and the
//! deterministic hash embedder; the live HTTP client sits behind the
//! `live-llm` feature and is driven manually.

pub mod cache;
#[cfg(feature = "live-llm")]
pub mod live;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::fnv1a64;

/// One conversation with the completion client about a single class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTranscript {
    pub class_index: usize,
    pub class_name: String,
    pub epoch: usize,
    pub client: String,
    /// Ordered (prompt, response) pairs.
    pub turns: Vec<(String, String)>,
}

impl DialogueTranscript {
    pub fn new(class_index: usize, class_name: &str, epoch: usize, client: &str) -> Self {
        Self {
            class_index,
            class_name: class_name.to_string(),
            epoch,
            client: client.to_string(),
            turns: Vec::new(),
        }
    }

    pub fn push_turn(&mut self, prompt: &str, response: &str) {
        self.turns.push((prompt.to_string(), response.to_string()));
    }

    /// 1-based index of the next prompt in this conversation.
    pub fn next_step(&self) -> usize {
        self.turns.len() + 1
    }
}

/// Text-generation client. Deterministic implementations must return
/// identical responses for identical (history, prompt) inputs.
pub trait CompletionClient {
    fn identity(&self) -> &str;
    fn supports_history(&self) -> bool;
    fn complete(&self, history: &DialogueTranscript, prompt: &str) -> Result<String>;
}

/// Text-embedding client. Outputs are unit-normalized with a fixed dimension.
pub trait TextEmbedder {
    fn identity(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Array1<f64>>;
}

/// Fixture script backing the scripted client: `(class, step) -> response`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureScript {
    pub version: u32,
    pub entries: Vec<FixtureEntry>,
    #[serde(skip)]
    index: BTreeMap<(String, usize), usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub class: String,
    pub step: usize,
    pub response: String,
}

impl FixtureScript {
    pub fn new(entries: Vec<FixtureEntry>) -> Self {
        let mut script = Self {
            version: 1,
            entries,
            index: BTreeMap::new(),
        };
        script.rebuild_index();
        script
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| ((e.class.clone(), e.step), i))
            .collect();
    }

    pub fn insert(&mut self, class: &str, step: usize, response: &str) {
        self.entries.push(FixtureEntry {
            class: class.to_string(),
            step,
            response: response.to_string(),
        });
        self.index
            .insert((class.to_string(), step), self.entries.len() - 1);
    }

    /// Fails loudly on a miss, naming the missing key.
    pub fn lookup(&self, class: &str, step: usize) -> Result<&str> {
        self.index
            .get(&(class.to_string(), step))
            .map(|&i| self.entries[i].response.as_str())
            .ok_or_else(|| Error::FixtureMiss(format!("(class `{class}`, step {step})")))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut script: FixtureScript =
            toml::from_str(text).map_err(|e| Error::Serialization(e.to_string()))?;
        script.rebuild_index();
        Ok(script)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// Deterministic completion client that replays committed fixtures.
/// The lookup key is the transcript's class name and the 1-based step.
pub struct ScriptedClient {
    script: FixtureScript,
    identity: String,
}

impl ScriptedClient {
    pub fn new(script: FixtureScript) -> Self {
        Self {
            script,
            identity: "scripted:v1".to_string(),
        }
    }

    pub fn script(&self) -> &FixtureScript {
        &self.script
    }
}

impl CompletionClient for ScriptedClient {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn supports_history(&self) -> bool {
        true
    }

    fn complete(&self, history: &DialogueTranscript, prompt: &str) -> Result<String> {
        if prompt.trim().is_empty() {
            return Err(Error::Argument("prompt must be nonempty".into()));
        }
        self.script
            .lookup(&history.class_name, history.next_step())
            .map(|s| s.to_string())
    }
}

/// Deterministic bag-of-tokens embedder: tokens are hashed into `dim` signed
/// buckets and the histogram is L2-normalized. Order-invariant by design.
pub struct HashEmbedder {
    dim: usize,
    identity: String,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            identity: format!("hash-embed:v1:d{dim}"),
        }
    }
}

impl TextEmbedder for HashEmbedder {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Array1<f64>> {
        if text.trim().is_empty() {
            return Err(Error::Argument("cannot embed empty text".into()));
        }
        let lower = text.to_lowercase();
        let mut tokens: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            // no alphanumeric content: treat the trimmed text as one token
            tokens.push(lower.trim());
        }
        let mut v = Array1::<f64>::zeros(self.dim);
        for token in tokens {
            let h = fnv1a64(token.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
            v[bucket] += sign;
        }
        let norm = v.dot(&v).sqrt();
        if norm == 0.0 {
            // signed counts cancelled exactly; fall back to a deterministic axis
            let h = fnv1a64(lower.as_bytes());
            v[(h % self.dim as u64) as usize] = 1.0;
            return Ok(v);
        }
        Ok(v.mapv(|e| e / norm))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn script() -> FixtureScript {
        let mut s = FixtureScript::new(vec![]);
        s.insert("writing", 1, "a small, controlled hand motion");
        s.insert("writing", 3, "wrist and fingers of the dominant hand");
        s
    }

    #[test]
    fn scripted_client_replays_fixture_text() {
        let client = ScriptedClient::new(script());
        let mut t = DialogueTranscript::new(0, "writing", 0, client.identity());
        let r1 = client.complete(&t, "describe writing").unwrap();
        assert_eq!(r1, "a small, controlled hand motion");
        t.push_turn("describe writing", &r1);
        t.push_turn("which body parts", "arms");
        let r3 = client.complete(&t, "which joints").unwrap();
        assert_eq!(r3, "wrist and fingers of the dominant hand");
    }

    #[test]
    fn scripted_client_is_deterministic() {
        let client = ScriptedClient::new(script());
        let t = DialogueTranscript::new(0, "writing", 0, client.identity());
        let a = client.complete(&t, "x").unwrap();
        let b = client.complete(&t, "x").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scripted_miss_fails_loudly() {
        let client = ScriptedClient::new(script());
        let t = DialogueTranscript::new(1, "jumping", 0, client.identity());
        let err = client.complete(&t, "x").unwrap_err();
        assert!(matches!(err, Error::FixtureMiss(_)));
        assert!(err.to_string().contains("jumping"));
        assert!(err.to_string().contains('1'));
    }

    #[test]
    fn empty_prompt_rejected() {
        let client = ScriptedClient::new(script());
        let t = DialogueTranscript::new(0, "writing", 0, client.identity());
        assert!(matches!(
            client.complete(&t, "  "),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn fixture_script_toml_round_trip() {
        let s = script();
        let text = s.to_toml_string().unwrap();
        let back = FixtureScript::from_toml_str(&text).unwrap();
        assert_eq!(back.lookup("writing", 3).unwrap(), s.lookup("writing", 3).unwrap());
    }

    #[test]
    fn embedder_is_unit_norm_and_deterministic() {
        let e = HashEmbedder::new(16);
        let a = e.embed("the wrist rises quickly").unwrap();
        let b = e.embed("the wrist rises quickly").unwrap();
        assert_eq!(a, b);
        assert_abs_diff_eq!(a.dot(&a).sqrt(), 1.0, epsilon = 1e-6);
        assert_eq!(a.len(), 16);
    }

    #[test]
    fn embedder_is_order_invariant() {
        let e = HashEmbedder::new(32);
        let a = e.embed("aa bb").unwrap();
        let b = e.embed("bb aa").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn embedder_rejects_empty_and_survives_symbols() {
        let e = HashEmbedder::new(8);
        assert!(matches!(e.embed("   "), Err(Error::Argument(_))));
        let v = e.embed("!!!").unwrap();
        assert_abs_diff_eq!(v.dot(&v).sqrt(), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn distinct_texts_usually_differ() {
        let e = HashEmbedder::new(64);
        let a = e.embed("raise the right arm overhead").unwrap();
        let b = e.embed("bend the left knee deeply").unwrap();
        assert!((a.dot(&b)).abs() < 0.99);
    }
}
