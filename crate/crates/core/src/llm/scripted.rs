//! Deterministic scripted backend.
//!
//! Scripts live in a directory of JSON files. Each file holds one script or
//! an array of scripts:
//!
//! ```json
//! { "key": "filter/verdict",
//!   "entries": [
//!     { "contains": ["horror"], "replies": ["{\"filter\": true}"] },
//!     { "replies": ["{\"filter\": false}"] } ] }
//! ```
//!
//! The first entry whose `contains` substrings all occur (case-insensitively)
//! in the user turns of the transcript wins. When an entry has several replies, one is
//! picked from the message digest and the request seed, so resolution is a
//! pure function of (script key, digest, seed). An optional `embeddings.json`
//! configures the [`HashEmbedder`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatRequest, GatewayError, HashEmbedder, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default)]
    pub contains: Vec<String>,
    pub replies: Vec<String>,
}

impl ScriptEntry {
    pub fn always(reply: impl Into<String>) -> Self {
        Self { contains: Vec::new(), replies: vec![reply.into()] }
    }

    pub fn one_of<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { contains: Vec::new(), replies: replies.into_iter().map(Into::into).collect() }
    }

    pub fn when<C, R, S1, S2>(contains: C, replies: R) -> Self
    where
        C: IntoIterator<Item = S1>,
        R: IntoIterator<Item = S2>,
        S1: Into<String>,
        S2: Into<String>,
    {
        Self {
            contains: contains.into_iter().map(Into::into).collect(),
            replies: replies.into_iter().map(Into::into).collect(),
        }
    }

    fn matches(&self, haystack_lower: &str) -> bool {
        self.contains.iter().all(|needle| haystack_lower.contains(&needle.to_lowercase()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptFile {
    pub key: String,
    pub entries: Vec<ScriptEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ScriptFileContents {
    One(ScriptFile),
    Many(Vec<ScriptFile>),
}

#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    id: String,
    seed: u64,
    scripts: BTreeMap<String, Vec<ScriptEntry>>,
    embedder: HashEmbedder,
}

impl ScriptedBackend {
    pub fn new(seed: u64) -> Self {
        Self { id: "stub".to_string(), seed, scripts: BTreeMap::new(), embedder: HashEmbedder::default() }
    }

    /// Appends entries to the script for `key`.
    pub fn with_script(mut self, key: impl Into<String>, entries: Vec<ScriptEntry>) -> Self {
        self.scripts.entry(key.into()).or_default().extend(entries);
        self
    }

    /// Replaces the script for `key`.
    pub fn replace_script(mut self, key: impl Into<String>, entries: Vec<ScriptEntry>) -> Self {
        self.scripts.insert(key.into(), entries);
        self
    }

    pub fn with_embedder(mut self, embedder: HashEmbedder) -> Self {
        self.embedder = embedder;
        self
    }

    pub fn load_dir(dir: &Path, seed: u64) -> Result<Self, GatewayError> {
        let io_err = |e: std::io::Error| GatewayError::InvalidRequest(format!("{}: {e}", dir.display()));
        let mut backend = Self::new(seed);
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(io_err)?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let text = fs::read_to_string(&path).map_err(io_err)?;
            let bad = |e: serde_json::Error| GatewayError::InvalidRequest(format!("{}: {e}", path.display()));
            if path.file_name().is_some_and(|n| n == "embeddings.json") {
                backend.embedder = serde_json::from_str(&text).map_err(bad)?;
                continue;
            }
            match serde_json::from_str(&text).map_err(bad)? {
                ScriptFileContents::One(file) => {
                    backend = backend.with_script(file.key, file.entries);
                }
                ScriptFileContents::Many(files) => {
                    for file in files {
                        backend = backend.with_script(file.key, file.entries);
                    }
                }
            }
        }
        Ok(backend)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.scripts.keys().map(String::as_str)
    }

    fn resolve(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let key = request.script_key.clone().unwrap_or_default();
        let no_script = || GatewayError::NoScript { key: key.clone() };
        let entries = self.scripts.get(&key).ok_or_else(no_script)?;
        let haystack = request
            .messages
            .iter()
            .filter(|m| m.role == Role::User)
            .map(|m| m.content.to_lowercase())
            .collect::<Vec<_>>()
            .join("\n");
        let entry = entries.iter().find(|e| e.matches(&haystack) && !e.replies.is_empty()).ok_or_else(no_script)?;
        let digest = request.message_digest();
        let mut prefix = [0u8; 8];
        prefix.copy_from_slice(&digest[..8]);
        let pick = (u64::from_le_bytes(prefix) ^ request.seed ^ self.seed) % entry.replies.len() as u64;
        Ok(entry.replies[pick as usize].clone())
    }
}

impl ChatBackend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        self.resolve(request)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        Ok(self.embedder.embed(text))
    }
}
