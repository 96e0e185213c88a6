//! The offline proxy task: predict which of K displayed items a user clicks,
//! then observe the click and update the profile.
//!
//! Five profile methods are compared:
//!
//! | method | profile shown to the predictor                                |
//! |--------|---------------------------------------------------------------|
//! | full   | five-band graph profile built with personalized perception    |
//! | A      | nothing                                                       |
//! | B      | raw titles of previously clicked items                        |
//! | C      | flat feature list extracted from clicked items only           |
//! | D      | five-band graph profile built with impersonal perception      |

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use veil_core::llm::templates::PROXY_PREDICT;
use veil_core::llm::{normalize_text, ChatRequest, Gateway, SchemaRef, ScriptEntry, ScriptedBackend};
use veil_core::profile::{extract_item_features, Impression, PerceiveMode, PipelineConfig, ProfileError, ProfileState};

use crate::cohort::{Bucket, Cohort};
use crate::metrics::mean_correct;
use crate::mind::MindDataset;
use crate::trial::{make_trial, TrialSlate};

pub const PROFILE_HEADER: &str = "Preference profile of the user:";
pub const HISTORY_HEADER: &str = "Items the user clicked before:";
pub const FEATURES_HEADER: &str = "Features of items the user clicked:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "full")]
    Full,
    A,
    B,
    C,
    D,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Full, Method::A, Method::B, Method::C, Method::D];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::A => "A",
            Method::B => "B",
            Method::C => "C",
            Method::D => "D",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown method {0:?}; expected full, A, B, C or D")]
pub struct UnknownMethod(pub String);

impl FromStr for Method {
    type Err = UnknownMethod;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" | "Full" | "FULL" => Ok(Method::Full),
            "A" | "a" => Ok(Method::A),
            "B" | "b" => Ok(Method::B),
            "C" | "c" => Ok(Method::C),
            "D" | "d" => Ok(Method::D),
            other => Err(UnknownMethod(other.to_string())),
        }
    }
}

/// What a method remembers about the user between trials.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodProfile {
    Empty,
    History(Vec<String>),
    Features(Vec<String>),
    Graph(Box<ProfileState>),
}

impl MethodProfile {
    pub fn new(method: Method) -> Self {
        match method {
            Method::A => MethodProfile::Empty,
            Method::B => MethodProfile::History(Vec::new()),
            Method::C => MethodProfile::Features(Vec::new()),
            Method::Full | Method::D => MethodProfile::Graph(Box::new(ProfileState::new(None))),
        }
    }

    /// The profile section of the prediction prompt; empty for method A,
    /// otherwise terminated by a blank line.
    pub fn render(&self) -> String {
        let section = |header: &str, body: String| format!("{header}\n{body}\n\n");
        let bullets = |lines: &[String]| lines.iter().map(|l| format!("- {l}")).collect::<Vec<_>>().join("\n");
        match self {
            MethodProfile::Empty => String::new(),
            MethodProfile::History(titles) => section(HISTORY_HEADER, bullets(titles)),
            MethodProfile::Features(features) => section(FEATURES_HEADER, features.join(", ")),
            MethodProfile::Graph(state) => section(PROFILE_HEADER, state.profile.render_lines()),
        }
    }

    /// Learns from an observed impression.
    fn observe(
        &mut self,
        impression: &Impression,
        gateway: &Gateway,
        rng: &mut ChaCha8Rng,
        pipeline: &PipelineConfig,
    ) -> Result<(), ProfileError> {
        match self {
            MethodProfile::Empty => {}
            MethodProfile::History(titles) => titles.extend(impression.clicked().map(|i| i.title.clone())),
            MethodProfile::Features(features) => {
                for item in impression.clicked() {
                    for f in extract_item_features(item, gateway, pipeline)? {
                        if !features.iter().any(|g| normalize_text(g) == normalize_text(&f)) {
                            features.push(f);
                        }
                    }
                }
            }
            MethodProfile::Graph(state) => {
                state.ingest(impression, gateway, rng, pipeline, impression.timestamp)?;
            }
        }
        Ok(())
    }
}

/// Renders the profile section `method` would show after observing
/// `history`, in order.
pub fn ablation_renderer(
    method: Method,
    history: &[Impression],
    gateway: &Gateway,
    config: &ProxyConfig,
) -> Result<String, ProfileError> {
    let mut profile = MethodProfile::new(method);
    let mut rng = derive_rng(config.seed, &["update", method.as_str()]);
    let pipeline = config.pipeline(method);
    for imp in history {
        profile.observe(imp, gateway, &mut rng, &pipeline)?;
    }
    Ok(profile.render())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyConfig {
    pub k: usize,
    pub seed: u64,
    pub platform: String,
    /// Parallel user runs in [`run_cohorts`].
    pub workers: usize,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self { k: 4, seed: 0, platform: PipelineConfig::default().platform, workers: 4 }
    }
}

impl ProxyConfig {
    pub fn pipeline(&self, method: Method) -> PipelineConfig {
        PipelineConfig {
            platform: self.platform.clone(),
            perceive_mode: if method == Method::D { PerceiveMode::Generic } else { PerceiveMode::Personalized },
            seed: self.seed,
            ..PipelineConfig::default()
        }
    }
}

/// ChaCha stream keyed by a master seed and labels.
pub fn derive_rng(seed: u64, labels: &[&str]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for label in labels {
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
    }
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

pub fn prediction_prompt(profile_section: &str, slate: &TrialSlate) -> String {
    let candidates =
        slate.candidates.iter().enumerate().map(|(i, c)| format!("{i}. {}", c.title)).collect::<Vec<_>>().join("\n");
    let k = slate.k().to_string();
    let last = (slate.k() - 1).to_string();
    PROXY_PREDICT
        .render(&[("profile", profile_section), ("k", &k), ("candidates", &candidates), ("last_index", &last)])
        .expect("prediction template placeholders are fixed")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProxyStep {
    pub slate: TrialSlate,
    /// Absent when the model gave no usable answer.
    pub predicted_index: Option<usize>,
    pub correct: bool,
    /// Why the step was scored incorrect without a usable prediction.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
    /// Profile version the prediction was made with.
    pub profile_version: u64,
    /// Profile version after observing this impression.
    pub updated_version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProxyTrace {
    pub user_id: String,
    pub method: Method,
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bucket: Option<Bucket>,
    pub steps: Vec<ProxyStep>,
    /// Impressions observed without a trial because they were too small.
    pub skipped_impressions: Vec<String>,
    /// Impressions whose profile update failed.
    pub update_failures: Vec<String>,
    /// Mean of `steps[].correct`; zero when there are no steps.
    pub accuracy: f64,
}

impl ProxyTrace {
    pub fn correct(&self) -> usize {
        self.steps.iter().filter(|s| s.correct).count()
    }

    pub fn recomputed_accuracy(&self) -> f64 {
        mean_correct(self.steps.iter().map(|s| s.correct)).unwrap_or(0.0)
    }
}

fn predict(gateway: &Gateway, prompt: String, k: usize, seed: u64) -> Result<usize, String> {
    let req = ChatRequest::new(prompt).with_script_key(PROXY_PREDICT.id).with_seed(seed);
    let resp = gateway.complete_structured(&req, SchemaRef::PREDICTION).map_err(|e| e.to_string())?;
    let index = resp.parsed.as_ref().and_then(|v| v.get("index")).and_then(Value::as_i64);
    match index {
        Some(i) if (0..k as i64).contains(&i) => Ok(i as usize),
        Some(i) => Err(format!("index {i} outside [0, {k})")),
        None => Err("prediction carried no index".into()),
    }
}

/// Runs one user's impressions in order: for each, build a slate, predict
/// with the current profile, score, then update the profile with the whole
/// impression. Impressions too small for a slate still update the profile.
pub fn run_proxy(
    user_id: &str,
    impressions: &[&Impression],
    method: Method,
    gateway: &Gateway,
    config: &ProxyConfig,
) -> ProxyTrace {
    let mut slate_rng = derive_rng(config.seed, &["slate", user_id]);
    let mut update_rng = derive_rng(config.seed, &["update", user_id]);
    let pipeline = config.pipeline(method);
    let mut profile = MethodProfile::new(method);
    let mut version = 0u64;
    let mut trace = ProxyTrace {
        user_id: user_id.to_string(),
        method,
        k: config.k,
        bucket: None,
        steps: Vec::new(),
        skipped_impressions: Vec::new(),
        update_failures: Vec::new(),
        accuracy: 0.0,
    };

    for imp in impressions {
        let slate = make_trial(imp, config.k, &mut slate_rng);
        let step = slate.map(|slate| {
            let prompt = prediction_prompt(&profile.render(), &slate);
            let (predicted_index, flag) = match predict(gateway, prompt, config.k, config.seed) {
                Ok(i) => (Some(i), None),
                Err(reason) => {
                    log::warn!("user {user_id} impression {}: {reason}", imp.impression_id);
                    (None, Some(reason))
                }
            };
            ProxyStep {
                correct: predicted_index == Some(slate.pos_index),
                slate,
                predicted_index,
                flag,
                profile_version: version,
                updated_version: version,
            }
        });

        match profile.observe(imp, gateway, &mut update_rng, &pipeline) {
            Ok(()) => version += 1,
            Err(e) => {
                log::warn!("user {user_id} impression {}: profile update failed: {e}", imp.impression_id);
                trace.update_failures.push(imp.impression_id.clone());
            }
        }
        match step {
            Some(mut step) => {
                step.updated_version = version;
                trace.steps.push(step);
            }
            None => trace.skipped_impressions.push(imp.impression_id.clone()),
        }
    }
    trace.accuracy = trace.recomputed_accuracy();
    trace
}

/// Runs every method for every cohort user, `config.workers` users at a time.
/// Traces come back ordered by (method, bucket, user) whatever the schedule.
pub fn run_cohorts(
    dataset: &MindDataset,
    cohorts: &[Cohort],
    methods: &[Method],
    gateway: &Gateway,
    config: &ProxyConfig,
) -> Vec<ProxyTrace> {
    let by_user = dataset.by_user();
    let jobs: Vec<(Method, Bucket, &str)> = methods
        .iter()
        .flat_map(|m| cohorts.iter().flat_map(move |c| c.users.iter().map(move |u| (*m, c.bucket, u.as_str()))))
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, ProxyTrace)>> = Mutex::new(Vec::with_capacity(jobs.len()));
    std::thread::scope(|scope| {
        for _ in 0..config.workers.max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(method, bucket, user)) = jobs.get(i) else { break };
                let impressions = by_user.get(user).map(Vec::as_slice).unwrap_or_default();
                let mut trace = run_proxy(user, impressions, method, gateway, config);
                trace.bucket = Some(bucket);
                results.lock().unwrap_or_else(|e| e.into_inner()).push((i, trace));
            });
        }
    });
    let mut results = results.into_inner().unwrap_or_else(|e| e.into_inner());
    results.sort_by(|a, b| {
        let key = |t: &ProxyTrace| (t.method, t.bucket, t.user_id.clone());
        key(&a.1).cmp(&key(&b.1)).then(a.0.cmp(&b.0))
    });
    results.into_iter().map(|(_, t)| t).collect()
}

/// A stub whose predictions are uniform over `[0, k)`, keyed on the prompt.
pub fn uniform_prediction_stub(k: usize, seed: u64) -> ScriptedBackend {
    ScriptedBackend::new(seed)
        .with_script(PROXY_PREDICT.id, vec![ScriptEntry::one_of((0..k).map(|i| format!("{{\"index\": {i}}}")))])
}
