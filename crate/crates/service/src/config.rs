//! Service configuration, read from TOML with environment overrides.
//!
//! ```toml
//! data_dir = "/var/lib/veil"
//! bind = "127.0.0.1:7878"
//! clock = "system"
//!
//! [engine]
//! platform = "Zhihu"
//! master_seed = 0
//!
//! [gateway]
//! backend = "http"
//! rate_limit = 4.0
//!
//! [gateway.http]
//! base_url = "http://localhost:8000/v1"
//! model = "qwen2-72b-instruct"
//! api_key_env = "VEIL_API_KEY"
//! ```
//!
//! `VEIL_DATA_DIR`, `VEIL_BIND` and `VEIL_TOKEN` override the file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use veil_core::clock::{Clock, LogicalClock, SystemClock};
use veil_core::engine::EngineConfig;
use veil_core::llm::{
    Gateway, GatewayError, HashEmbedder, HttpBackend, HttpBackendConfig, ScriptFile, ScriptedBackend,
};
use veil_core::profile::PerceiveMode;

pub const DEFAULT_BIND: &str = "127.0.0.1:7878";

/// Scripts compiled into the binary; used when no stub directory is given.
const BUNDLED_STUB: &[(&str, &str)] = &[
    ("conversation.json", include_str!("../stub/conversation.json")),
    ("embeddings.json", include_str!("../stub/embeddings.json")),
    ("filter.json", include_str!("../stub/filter.json")),
    ("perceive.json", include_str!("../stub/perceive.json")),
    ("reflect.json", include_str!("../stub/reflect.json")),
    ("summary.json", include_str!("../stub/summary.json")),
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
    #[error("bundled script {name}: {source}")]
    BundledScript { name: &'static str, source: serde_json::Error },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockKind {
    #[default]
    System,
    /// Deterministic one-second ticks from 2024-01-01, for demos and replays.
    Logical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Stub,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    pub platform: String,
    pub master_seed: u64,
    pub user_id: Option<String>,
    pub perceive_mode: PerceiveMode,
    pub filter_workers: usize,
    pub record_window: usize,
    pub snapshot_every: u64,
}

impl Default for EngineSection {
    fn default() -> Self {
        let d = EngineConfig::default();
        Self {
            platform: d.platform,
            master_seed: d.master_seed,
            user_id: d.user_id,
            perceive_mode: d.perceive_mode,
            filter_workers: d.filter_workers,
            record_window: d.record_window,
            snapshot_every: d.snapshot_every,
        }
    }
}

impl From<&EngineSection> for EngineConfig {
    fn from(s: &EngineSection) -> Self {
        EngineConfig {
            platform: s.platform.clone(),
            master_seed: s.master_seed,
            user_id: s.user_id.clone(),
            perceive_mode: s.perceive_mode,
            filter_workers: s.filter_workers,
            record_window: s.record_window,
            snapshot_every: s.snapshot_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub backend: BackendKind,
    /// Directory of script files; the bundled scripts are used when unset.
    pub stub_dir: Option<PathBuf>,
    pub stub_seed: u64,
    /// Requests per second; unlimited when unset.
    pub rate_limit: Option<f64>,
    pub http: HttpBackendConfig,
}

impl GatewaySection {
    pub fn build(&self) -> Result<Gateway, ConfigError> {
        let gateway = match self.backend {
            BackendKind::Stub => Gateway::new(match &self.stub_dir {
                Some(dir) => ScriptedBackend::load_dir(dir, self.stub_seed)?,
                None => bundled_stub(self.stub_seed)?,
            }),
            BackendKind::Http => Gateway::new(HttpBackend::new(self.http.clone())?),
        };
        Ok(match self.rate_limit {
            Some(rps) => gateway.with_rate_limit(rps),
            None => gateway,
        })
    }
}

/// The scripted backend built from the scripts shipped with the binary.
pub fn bundled_stub(seed: u64) -> Result<ScriptedBackend, ConfigError> {
    let mut backend = ScriptedBackend::new(seed);
    for &(name, text) in BUNDLED_STUB {
        let bad = |source| ConfigError::BundledScript { name, source };
        if name == "embeddings.json" {
            let embedder: HashEmbedder = serde_json::from_str(text).map_err(bad)?;
            backend = backend.with_embedder(embedder);
            continue;
        }
        let files: Vec<ScriptFile> = match serde_json::from_str::<ScriptFile>(text) {
            Ok(one) => vec![one],
            Err(_) => serde_json::from_str(text).map_err(bad)?,
        };
        for file in files {
            backend = backend.with_script(file.key, file.entries);
        }
    }
    Ok(backend)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data_dir: Option<PathBuf>,
    pub bind: String,
    /// Bearer token required on every request when set.
    pub token: Option<String>,
    pub clock: ClockKind,
    pub engine: EngineSection,
    pub gateway: GatewaySection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            data_dir: None,
            bind: DEFAULT_BIND.to_string(),
            token: None,
            clock: ClockKind::default(),
            engine: EngineSection::default(),
            gateway: GatewaySection::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Toml { path: path.to_path_buf(), source })
    }

    /// Reads `path` if given, then applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config = match path {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.to_path_buf(), source })?;
                Self::from_toml(&text, p)?
            }
            None => Self::default(),
        };
        config.apply_env(|k| std::env::var(k).ok());
        Ok(config)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) {
        if let Some(dir) = var("VEIL_DATA_DIR") {
            self.data_dir = Some(dir.into());
        }
        if let Some(bind) = var("VEIL_BIND") {
            self.bind = bind;
        }
        if let Some(token) = var("VEIL_TOKEN") {
            self.token = Some(token);
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        (&self.engine).into()
    }

    pub fn clock(&self) -> Arc<dyn Clock> {
        match self.clock {
            ClockKind::System => Arc::new(SystemClock),
            ClockKind::Logical => Arc::new(LogicalClock::starting_2024()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::from_toml("", Path::new("x.toml")).unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.engine_config(), EngineConfig::default());
    }

    #[test]
    fn sections_and_env_overrides() {
        let text = r#"
            bind = "0.0.0.0:9000"
            clock = "logical"
            [engine]
            platform = "Weibo"
            perceive_mode = "generic"
            [gateway]
            backend = "http"
            rate_limit = 2.5
            [gateway.http]
            model = "local-model"
        "#;
        let mut c = Config::from_toml(text, Path::new("x.toml")).unwrap();
        assert_eq!(c.engine.platform, "Weibo");
        assert_eq!(c.engine.perceive_mode, PerceiveMode::Generic);
        assert_eq!(c.gateway.backend, BackendKind::Http);
        assert_eq!(c.gateway.http.model, "local-model");
        assert_eq!(c.gateway.http.api_key_env, "VEIL_API_KEY");
        c.apply_env(|k| (k == "VEIL_BIND").then(|| "127.0.0.1:1".to_string()));
        assert_eq!(c.bind, "127.0.0.1:1");
        assert_eq!(c.token, None);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(Config::from_toml("colour = 1", Path::new("x.toml")), Err(ConfigError::Toml { .. })));
    }

    #[test]
    fn bundled_scripts_cover_every_engine_key() {
        let backend = bundled_stub(0).unwrap();
        let keys: Vec<&str> = backend.keys().collect();
        for key in [
            "perceive.v1",
            "perceive_generic.v1",
            "summary.v1",
            "reflect_merge.v1",
            "filter_item_topics.v1",
            "filter_rule_topics.v1",
            "filter_verdict.v1",
            "needs_reply.v1",
            "need_detection.v1",
            "rule_relevance.v1",
        ] {
            assert!(keys.contains(&key), "{key}");
        }
    }

    #[test]
    fn bundled_scripts_match_the_shipped_directory() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("stub");
        let from_dir = ScriptedBackend::load_dir(&dir, 0).unwrap();
        let a: Vec<&str> = from_dir.keys().collect();
        let bundled = bundled_stub(0).unwrap();
        let b: Vec<&str> = bundled.keys().collect();
        assert_eq!(a, b);
    }
}
