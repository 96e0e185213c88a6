//! Preference profile construction from click/ignore behavior.
//!
//! Each impression is turned into `<pos, neg>` item pairs, and every pair runs
//! through three model-backed stages:
//!
//! 1. **perceive** explains, from the user's point of view and given the
//!    current profile, why `pos` was clicked and `neg` was not;
//! 2. **summarize** distills those reasons into `m` pos features and `n` neg
//!    features, yielding `m × n` ordered feature pairs;
//! 3. **reflect** resolves every feature to a graph node (merging near
//!    duplicates after a similarity shortlist and a model check) and records
//!    one `neg -> pos` edge per ordered pair.
//!
//! After the whole impression the graph is re-ranked and re-banded. The
//! pipeline itself never mutates state: [`ProfileState::prepare_ingest`]
//! returns an [`IngestOutcome`] holding the exact graph operations, and
//! [`ProfileState::apply_ingest`] commits it. The event log stores outcomes,
//! so replay never calls the model again.

use std::collections::{BTreeSet, HashSet};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clock::Timestamp;
use crate::graph::{
    band, normalize_label, FeatureId, GraphError, GraphOp, PreferenceGraph, PreferenceProfile, RankParams,
    RankedFeatures,
};
use crate::llm::templates::{self, Template};
use crate::llm::{ChatRequest, Gateway, GatewayError, SchemaRef};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    /// The source record, untouched.
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub raw: Value,
}

impl Item {
    pub fn new(id: impl Into<String>, title: impl Into<String>) -> Self {
        Self { id: id.into(), title: title.into(), summary: String::new(), category: None, raw: Value::Null }
    }

    pub fn with_summary(mut self, summary: impl Into<String>) -> Self {
        self.summary = summary.into();
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("item id must not be empty".into());
        }
        if self.title.trim().is_empty() {
            return Err(format!("item {} has an empty title", self.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisplayedItem {
    pub item: Item,
    pub clicked: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Impression {
    pub impression_id: String,
    pub user_id: String,
    pub timestamp: Timestamp,
    pub displayed: Vec<DisplayedItem>,
}

impl Impression {
    pub fn validate(&self) -> Result<(), String> {
        if self.impression_id.trim().is_empty() {
            return Err("impressionId must not be empty".into());
        }
        if self.displayed.is_empty() {
            return Err(format!("impression {} displays no items", self.impression_id));
        }
        self.displayed.iter().try_for_each(|d| d.item.validate())
    }

    pub fn clicked(&self) -> impl Iterator<Item = &Item> {
        self.displayed.iter().filter(|d| d.clicked).map(|d| &d.item)
    }

    pub fn unclicked(&self) -> impl Iterator<Item = &Item> {
        self.displayed.iter().filter(|d| !d.clicked).map(|d| &d.item)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InteractionPair {
    pub pos: Item,
    pub neg: Item,
    pub impression_id: String,
    pub timestamp: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PerceptionReport {
    pub pos_reasons: String,
    pub neg_reasons: String,
    pub profile_snapshot_version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FeatureExtraction {
    pub pos_features: Vec<String>,
    pub neg_features: Vec<String>,
    /// `(pos feature, neg feature)`, the Cartesian product in order.
    pub ordered_pairs: Vec<(String, String)>,
}

impl FeatureExtraction {
    pub fn new(pos_features: Vec<String>, neg_features: Vec<String>) -> Self {
        let ordered_pairs =
            pos_features.iter().flat_map(|p| neg_features.iter().map(move |n| (p.clone(), n.clone()))).collect();
        Self { pos_features, neg_features, ordered_pairs }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProfileError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("summary produced no {side} features")]
    ExtractionEmpty { side: &'static str },
    #[error("perceive returned empty reasons")]
    EmptyReasons,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("impression {0} was already ingested")]
    DuplicateImpression(String),
    #[error("profile belongs to user {expected}, got an event for {got}")]
    ForeignUser { expected: String, got: String },
    #[error("invalid impression: {0}")]
    InvalidImpression(String),
}

/// Whether perceive sees the user's current profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerceiveMode {
    #[default]
    Personalized,
    /// Impersonal perception; used by the ablation that keeps graph ranking
    /// but drops personalized perception.
    Generic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub platform: String,
    pub perceive_mode: PerceiveMode,
    pub similarity_threshold: f64,
    pub shortlist_cap: usize,
    pub seed: u64,
    pub rank: RankParams<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            platform: "Zhihu".to_string(),
            perceive_mode: PerceiveMode::Personalized,
            similarity_threshold: 0.85,
            shortlist_cap: 8,
            seed: 0,
            rank: RankParams::default(),
        }
    }
}

/// One pair per clicked item, with its negative drawn uniformly from the
/// unclicked items of the same impression.
pub fn sample_pairs<R: Rng + ?Sized>(impression: &Impression, rng: &mut R) -> Vec<InteractionPair> {
    let unclicked: Vec<&Item> = impression.unclicked().collect();
    impression
        .clicked()
        .filter_map(|pos| {
            let candidates: Vec<&Item> = unclicked.iter().copied().filter(|n| n.id != pos.id).collect();
            candidates.choose(rng).map(|neg| InteractionPair {
                pos: pos.clone(),
                neg: (*neg).clone(),
                impression_id: impression.impression_id.clone(),
                timestamp: impression.timestamp,
            })
        })
        .collect()
}

fn chat(gateway: &Gateway, template: Template, prompt: String, seed: u64) -> Result<String, GatewayError> {
    let req = ChatRequest::new(prompt).with_script_key(template.id).with_seed(seed);
    Ok(gateway.complete(&req)?.text)
}

fn structured(
    gateway: &Gateway,
    template: Template,
    prompt: String,
    schema: SchemaRef,
    seed: u64,
) -> Result<serde_json::Map<String, Value>, GatewayError> {
    let req = ChatRequest::new(prompt).with_script_key(template.id).with_seed(seed);
    let resp = gateway.complete_structured(&req, schema)?;
    match resp.parsed {
        Some(Value::Object(map)) => Ok(map),
        _ => unreachable!("structured completions always carry an object"),
    }
}

fn render(template: Template, values: &[(&str, &str)]) -> String {
    template.render(values).unwrap_or_else(|e| panic!("built-in template is incomplete: {e}"))
}

/// Renders the perceive prompt for one side of a pair.
pub fn perceive_prompt(
    title: &str,
    clicked: bool,
    profile: &PreferenceProfile,
    config: &PipelineConfig,
) -> (Template, String) {
    let interaction = if clicked { "have" } else { "have not" };
    match config.perceive_mode {
        PerceiveMode::Personalized => {
            let bands: Vec<(String, &str)> =
                profile.bands().map(|(b, labels)| (labels.join(", "), b.placeholder())).collect();
            let mut values: Vec<(&str, &str)> =
                vec![("platform", config.platform.as_str()), ("title", title), ("interaction", interaction)];
            values.extend(bands.iter().map(|(text, name)| (*name, text.as_str())));
            (templates::PERCEIVE, render(templates::PERCEIVE, &values))
        }
        PerceiveMode::Generic => {
            let values = [("platform", config.platform.as_str()), ("title", title), ("interaction", interaction)];
            (templates::PERCEIVE_GENERIC, render(templates::PERCEIVE_GENERIC, &values))
        }
    }
}

pub fn perceive(
    pair: &InteractionPair,
    profile: &PreferenceProfile,
    profile_version: u64,
    gateway: &Gateway,
    config: &PipelineConfig,
) -> Result<PerceptionReport, ProfileError> {
    let (template, prompt) = perceive_prompt(&pair.pos.title, true, profile, config);
    let pos_reasons = chat(gateway, template, prompt, config.seed)?;
    let (template, prompt) = perceive_prompt(&pair.neg.title, false, profile, config);
    let neg_reasons = chat(gateway, template, prompt, config.seed)?;
    if pos_reasons.trim().is_empty() || neg_reasons.trim().is_empty() {
        return Err(ProfileError::EmptyReasons);
    }
    Ok(PerceptionReport {
        pos_reasons: pos_reasons.trim().to_string(),
        neg_reasons: neg_reasons.trim().to_string(),
        profile_snapshot_version: profile_version,
    })
}

fn dedup_labels(labels: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    labels.into_iter().filter(|l| !normalize_label(l).is_empty() && seen.insert(normalize_label(l))).collect()
}

fn extract_features(
    item: &Item,
    clicked: bool,
    reasons: &str,
    gateway: &Gateway,
    config: &PipelineConfig,
) -> Result<Vec<String>, GatewayError> {
    let prompt = render(
        templates::SUMMARY,
        &[
            ("platform", config.platform.as_str()),
            ("interaction", if clicked { "has" } else { "has not" }),
            ("title", item.title.as_str()),
            ("reasons", reasons),
        ],
    );
    let obj = structured(gateway, templates::SUMMARY, prompt, SchemaRef::FEATURES, config.seed)?;
    Ok(dedup_labels(crate::llm::string_list(&obj, "features")))
}

pub fn summarize(
    pair: &InteractionPair,
    report: &PerceptionReport,
    gateway: &Gateway,
    config: &PipelineConfig,
) -> Result<FeatureExtraction, ProfileError> {
    let pos = extract_features(&pair.pos, true, &report.pos_reasons, gateway, config)?;
    if pos.is_empty() {
        return Err(ProfileError::ExtractionEmpty { side: "pos" });
    }
    let neg = extract_features(&pair.neg, false, &report.neg_reasons, gateway, config)?;
    if neg.is_empty() {
        return Err(ProfileError::ExtractionEmpty { side: "neg" });
    }
    Ok(FeatureExtraction::new(pos, neg))
}

/// Features extracted from an item's own content, without perception.
pub fn extract_item_features(
    item: &Item,
    gateway: &Gateway,
    config: &PipelineConfig,
) -> Result<Vec<String>, GatewayError> {
    let content = if item.summary.is_empty() { item.title.as_str() } else { item.summary.as_str() };
    extract_features(item, true, content, gateway, config)
}

/// Resolves the extraction's features against `graph` and returns the graph
/// operations that integrate it. `graph` is left untouched.
pub fn reflect(
    graph: &PreferenceGraph<f64>,
    extraction: &FeatureExtraction,
    gateway: &Gateway,
    config: &PipelineConfig,
    now: Timestamp,
) -> Result<Vec<GraphOp<f64>>, ProfileError> {
    let mut scratch = graph.clone();
    let mut ops = Vec::new();
    let mut push = |scratch: &mut PreferenceGraph<f64>, op: GraphOp<f64>| -> Result<(), GraphError> {
        scratch.apply(&op)?;
        ops.push(op);
        Ok(())
    };

    let labels = dedup_labels(extraction.pos_features.iter().chain(&extraction.neg_features).cloned().collect());
    for label in &labels {
        if scratch.find_label(label).is_some() {
            continue;
        }
        let embedding = gateway.embed(label)?;
        let shortlist = scratch.similar(&embedding, config.similarity_threshold, config.shortlist_cap);
        if !shortlist.is_empty() {
            if let Some(decision) = ask_merge(&scratch, label, &shortlist, gateway, config)? {
                let survivor = decision.targets[0];
                if decision.targets.len() > 1 {
                    push(&mut scratch, GraphOp::Merge { survivor, absorbed: decision.targets[1..].to_vec() })?;
                }
                push(&mut scratch, GraphOp::Alias { id: survivor, label: label.clone() })?;
                if let Some(merged) = decision.merged_label {
                    let free = scratch.find_label(&merged).is_none_or(|owner| owner == survivor);
                    if free {
                        push(&mut scratch, GraphOp::Relabel { id: survivor, label: merged })?;
                    }
                }
                continue;
            }
        }
        let id = scratch.next_id();
        push(&mut scratch, GraphOp::Insert { id, label: label.clone(), embedding, created_at: now })?;
    }

    for (pos, neg) in &extraction.ordered_pairs {
        let resolve = |l: &str| scratch.find_label(l).ok_or(GraphError::EmptyLabel);
        let (pos, neg) = (resolve(pos)?, resolve(neg)?);
        push(&mut scratch, GraphOp::Prefer { neg, pos })?;
    }
    Ok(ops)
}

struct MergeDecision {
    /// Shortlisted nodes to merge with, most similar first. Never empty.
    targets: Vec<FeatureId>,
    merged_label: Option<String>,
}

fn ask_merge(
    graph: &PreferenceGraph<f64>,
    label: &str,
    shortlist: &[(FeatureId, f64)],
    gateway: &Gateway,
    config: &PipelineConfig,
) -> Result<Option<MergeDecision>, GatewayError> {
    let listed: Vec<(FeatureId, &str)> =
        shortlist.iter().filter_map(|(id, _)| graph.node(*id).map(|n| (*id, n.label.as_str()))).collect();
    let feature_list = listed.iter().map(|(_, l)| format!("- {l}")).collect::<Vec<_>>().join("\n");
    let prompt = render(templates::REFLECT_MERGE, &[("feature", label), ("feature_list", feature_list.as_str())]);
    let obj = structured(gateway, templates::REFLECT_MERGE, prompt, SchemaRef::MERGE_DECISION, config.seed)?;
    if obj.get("merge").and_then(Value::as_bool) != Some(true) {
        return Ok(None);
    }
    let named: HashSet<String> = crate::llm::string_list(&obj, "targets").iter().map(|t| normalize_label(t)).collect();
    let mut targets: Vec<FeatureId> =
        listed.iter().filter(|(_, l)| named.contains(&normalize_label(l))).map(|(id, _)| *id).collect();
    if targets.is_empty() {
        targets.push(listed[0].0);
    }
    let merged_label =
        obj.get("merged_feature").and_then(Value::as_str).map(str::trim).filter(|s| !s.is_empty()).map(str::to_string);
    Ok(Some(MergeDecision { targets, merged_label }))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SkippedPair {
    pub impression_id: String,
    pub pos_id: String,
    pub neg_id: String,
    pub reason: String,
}

/// Everything an ingest changes; the payload of the processing event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IngestOutcome {
    pub impression_id: String,
    pub user_id: String,
    pub impression_time: Timestamp,
    /// Profile version every perceive call of this impression saw.
    pub perceived_version: u64,
    pub pairs_sampled: usize,
    pub pairs_applied: usize,
    pub ops: Vec<GraphOp<f64>>,
    pub skipped: Vec<SkippedPair>,
}

/// Per-user profile state: the graph plus its current ranking and bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProfileState {
    pub user_id: Option<String>,
    pub graph: PreferenceGraph<f64>,
    pub ranked: RankedFeatures<f64>,
    pub profile: PreferenceProfile,
    pub version: u64,
    pub ingested: BTreeSet<String>,
    pub watermark: Option<Timestamp>,
    pub skipped: Vec<SkippedPair>,
}

impl Default for ProfileState {
    fn default() -> Self {
        Self::new(None)
    }
}

impl ProfileState {
    /// `user_id = None` binds the state to the first user it ingests.
    pub fn new(user_id: Option<String>) -> Self {
        Self {
            user_id,
            graph: PreferenceGraph::new(),
            ranked: RankedFeatures::default(),
            profile: PreferenceProfile::default(),
            version: 0,
            ingested: BTreeSet::new(),
            watermark: None,
            skipped: Vec::new(),
        }
    }

    pub fn check_impression(&self, impression: &Impression) -> Result<(), ProfileError> {
        impression.validate().map_err(ProfileError::InvalidImpression)?;
        if let Some(expected) = &self.user_id {
            if *expected != impression.user_id {
                return Err(ProfileError::ForeignUser { expected: expected.clone(), got: impression.user_id.clone() });
            }
        }
        if self.ingested.contains(&impression.impression_id) {
            return Err(ProfileError::DuplicateImpression(impression.impression_id.clone()));
        }
        Ok(())
    }

    /// Runs the pipeline for `impression` without changing `self`.
    ///
    /// Pairs whose model calls fail are skipped and listed in the outcome.
    pub fn prepare_ingest<R: Rng + ?Sized>(
        &self,
        impression: &Impression,
        gateway: &Gateway,
        rng: &mut R,
        config: &PipelineConfig,
        now: Timestamp,
    ) -> Result<IngestOutcome, ProfileError> {
        self.check_impression(impression)?;
        let pairs = sample_pairs(impression, rng);
        let mut scratch = self.graph.clone();
        let mut ops = Vec::new();
        let mut skipped = Vec::new();
        for pair in &pairs {
            let result = perceive(pair, &self.profile, self.version, gateway, config)
                .and_then(|report| summarize(pair, &report, gateway, config))
                .and_then(|extraction| reflect(&scratch, &extraction, gateway, config, now));
            match result {
                Ok(pair_ops) => {
                    for op in &pair_ops {
                        scratch.apply(op)?;
                    }
                    ops.extend(pair_ops);
                }
                Err(e) => {
                    log::warn!(
                        "skipping pair ({}, {}) of impression {}: {e}",
                        pair.pos.id,
                        pair.neg.id,
                        impression.impression_id
                    );
                    skipped.push(SkippedPair {
                        impression_id: impression.impression_id.clone(),
                        pos_id: pair.pos.id.clone(),
                        neg_id: pair.neg.id.clone(),
                        reason: e.to_string(),
                    });
                }
            }
        }
        Ok(IngestOutcome {
            impression_id: impression.impression_id.clone(),
            user_id: impression.user_id.clone(),
            impression_time: impression.timestamp,
            perceived_version: self.version,
            pairs_sampled: pairs.len(),
            pairs_applied: pairs.len() - skipped.len(),
            ops,
            skipped,
        })
    }

    /// Commits an outcome: applies its graph operations, re-ranks, re-bands
    /// and bumps the profile version.
    pub fn apply_ingest(&mut self, outcome: &IngestOutcome, rank: RankParams<f64>) -> Result<(), ProfileError> {
        if self.ingested.contains(&outcome.impression_id) {
            return Err(ProfileError::DuplicateImpression(outcome.impression_id.clone()));
        }
        let mut graph = self.graph.clone();
        for op in &outcome.ops {
            graph.apply(op)?;
        }
        self.graph = graph;
        self.user_id.get_or_insert_with(|| outcome.user_id.clone());
        self.rerank(rank);
        self.version += 1;
        self.ingested.insert(outcome.impression_id.clone());
        self.watermark = Some(match self.watermark {
            Some(w) if w > outcome.impression_time => w,
            _ => outcome.impression_time,
        });
        self.skipped.extend(outcome.skipped.iter().cloned());
        Ok(())
    }

    fn rerank(&mut self, params: RankParams<f64>) {
        self.ranked = match self.graph.rank(params) {
            Ok(ranked) => ranked,
            Err(not_converged) => {
                log::warn!("{not_converged}; using the partial ranking");
                not_converged.partial
            }
        };
        self.profile = band(&self.ranked);
    }

    /// `prepare_ingest` followed by `apply_ingest`.
    pub fn ingest<R: Rng + ?Sized>(
        &mut self,
        impression: &Impression,
        gateway: &Gateway,
        rng: &mut R,
        config: &PipelineConfig,
        now: Timestamp,
    ) -> Result<IngestOutcome, ProfileError> {
        let outcome = self.prepare_ingest(impression, gateway, rng, config, now)?;
        self.apply_ingest(&outcome, config.rank)?;
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::t;
    use crate::llm::{FnBackend, HashEmbedder, ScriptEntry, ScriptedBackend};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::{Arc, Mutex};

    fn impression(id: &str, clicks: &[&str], ignored: &[&str]) -> Impression {
        let mut displayed: Vec<DisplayedItem> =
            clicks.iter().map(|c| DisplayedItem { item: Item::new(*c, format!("title {c}")), clicked: true }).collect();
        displayed.extend(
            ignored.iter().map(|c| DisplayedItem { item: Item::new(*c, format!("title {c}")), clicked: false }),
        );
        Impression { impression_id: id.to_string(), user_id: "u1".to_string(), timestamp: t(0), displayed }
    }

    fn features(json: &str) -> ScriptEntry {
        ScriptEntry::always(json)
    }

    fn stub(pos: &str, neg: &str) -> Gateway {
        Gateway::new(
            ScriptedBackend::new(0)
                .with_script(templates::PERCEIVE.id, vec![ScriptEntry::always("I enjoy suspense and dislike gossip.")])
                .with_script(templates::PERCEIVE_GENERIC.id, vec![ScriptEntry::always("generic reasons")])
                .with_script(
                    templates::SUMMARY.id,
                    vec![ScriptEntry::when(["has not interacted"], [neg]), features(pos)],
                )
                .with_script(templates::REFLECT_MERGE.id, vec![ScriptEntry::always(r#"{"merge": true}"#)]),
        )
    }

    #[test]
    fn sampling_is_seeded_and_one_pair_per_click() {
        let imp = impression("i1", &["N1"], &["N2", "N3"]);
        let a = sample_pairs(&imp, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_pairs(&imp, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!(a.len(), 1);
        assert!(["N2", "N3"].contains(&a[0].neg.id.as_str()));

        let none = impression("i2", &["N1"], &[]);
        assert!(sample_pairs(&none, &mut ChaCha8Rng::seed_from_u64(1)).is_empty());

        let two = impression("i3", &["N1", "N4"], &["N2"]);
        let pairs = sample_pairs(&two, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(pairs.len(), 2);
        assert!(pairs.iter().all(|p| p.neg.id == "N2"));
    }

    #[test]
    fn sampling_covers_all_negatives() {
        let imp = impression("i1", &["N1"], &["N2", "N3", "N4"]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seen: HashSet<String> = (0..200).map(|_| sample_pairs(&imp, &mut rng)[0].neg.id.clone()).collect();
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn perceive_uses_profile_and_script() {
        let gw = stub(r#"{"features":["a"]}"#, r#"{"features":["b"]}"#);
        let pair = &sample_pairs(&impression("i", &["N1"], &["N2"]), &mut ChaCha8Rng::seed_from_u64(0))[0];
        let report = perceive(pair, &PreferenceProfile::default(), 4, &gw, &PipelineConfig::default()).unwrap();
        assert!(report.pos_reasons.contains("suspense"));
        assert_eq!(report.profile_snapshot_version, 4);
    }

    #[test]
    fn cold_start_prompt_lists_five_empty_bands() {
        let (template, prompt) =
            perceive_prompt("A title", true, &PreferenceProfile::default(), &PipelineConfig::default());
        assert_eq!(template, templates::PERCEIVE);
        for band in ["Very liked: \n", "Fairly liked: \n", "Neutral: \n", "Fairly disliked: \n", "Very disliked: \n"] {
            assert!(prompt.contains(band), "{band}");
        }
        assert!(prompt.ends_with("assuming you have interacted with it, please explain your reasons."));
    }

    #[test]
    fn perceive_propagates_gateway_failures() {
        let gw = Gateway::new(FnBackend::new("down", |_r: &ChatRequest| {
            Err(GatewayError::Transport { attempts: 4, message: "down".into() })
        }));
        let pair = &sample_pairs(&impression("i", &["N1"], &["N2"]), &mut ChaCha8Rng::seed_from_u64(0))[0];
        let err = perceive(pair, &PreferenceProfile::default(), 0, &gw, &PipelineConfig::default()).unwrap_err();
        assert!(matches!(err, ProfileError::Gateway(GatewayError::Transport { .. })));
    }

    #[test]
    fn summarize_builds_cartesian_product() {
        let gw = stub(r#"{"features":["p1","p2"]}"#, r#"{"features":["n1","n2","n3"]}"#);
        let pair = &sample_pairs(&impression("i", &["N1"], &["N2"]), &mut ChaCha8Rng::seed_from_u64(0))[0];
        let report = PerceptionReport { pos_reasons: "r".into(), neg_reasons: "r".into(), profile_snapshot_version: 0 };
        let ex = summarize(pair, &report, &gw, &PipelineConfig::default()).unwrap();
        assert_eq!(ex.ordered_pairs.len(), 6);
        assert_eq!(ex.ordered_pairs[0], ("p1".to_string(), "n1".to_string()));
        assert_eq!(ex.ordered_pairs[5], ("p2".to_string(), "n3".to_string()));

        let gw = stub(r#"{"features":["p1"]}"#, r#"{"features":["n1"]}"#);
        assert_eq!(summarize(pair, &report, &gw, &PipelineConfig::default()).unwrap().ordered_pairs.len(), 1);

        let gw = stub(r#"{"features":[]}"#, r#"{"features":["n1"]}"#);
        assert_eq!(
            summarize(pair, &report, &gw, &PipelineConfig::default()),
            Err(ProfileError::ExtractionEmpty { side: "pos" })
        );
    }

    #[test]
    fn reflect_without_similar_nodes_inserts_everything() {
        let gw = stub("{}", "{}");
        let mut graph = PreferenceGraph::new();
        let ex = FeatureExtraction::new(vec!["p1".into(), "p2".into()], vec!["n1".into(), "n2".into(), "n3".into()]);
        let ops = reflect(&graph, &ex, &gw, &PipelineConfig::default(), t(0)).unwrap();
        for op in &ops {
            graph.apply(op).unwrap();
        }
        assert_eq!(graph.node_count(), 5);
        assert_eq!(graph.total_edge_weight(), 6);
        assert_eq!(gw.chat_calls(), 0, "no merge queries below threshold");
    }

    #[test]
    fn reflect_merges_confirmed_near_duplicates() {
        let embedder = HashEmbedder::default().with_alias("horror films", "horror movies");
        let gw = Gateway::new(ScriptedBackend::new(0).with_embedder(embedder).with_script(
            templates::REFLECT_MERGE.id,
            vec![ScriptEntry::when(
                ["horror films", "- horror movies"],
                [r#"{"merge": true, "targets": ["horror movies"], "merged_feature": null}"#],
            )],
        ));
        let mut graph = PreferenceGraph::new();
        let seed = FeatureExtraction::new(vec!["horror movies".into()], vec!["cooking".into()]);
        for op in reflect(&graph, &seed, &gw, &PipelineConfig::default(), t(0)).unwrap() {
            graph.apply(&op).unwrap();
        }
        let ex = FeatureExtraction::new(vec!["horror films".into()], vec!["cooking".into()]);
        for op in reflect(&graph, &ex, &gw, &PipelineConfig::default(), t(1)).unwrap() {
            graph.apply(&op).unwrap();
        }
        assert_eq!(graph.node_count(), 2);
        let horror = graph.find_label("horror films").unwrap();
        assert_eq!(graph.node(horror).unwrap().label, "horror movies");
        assert_eq!(graph.weight(graph.find_label("cooking").unwrap(), horror), 2);
        assert_eq!(gw.chat_calls(), 1);
    }

    #[test]
    fn reflect_can_rename_and_fold_several_targets() {
        let embedder = HashEmbedder::default()
            .with_alias("scary films", "horror movies")
            .with_alias("horror flicks", "horror movies");
        let gw = Gateway::new(ScriptedBackend::new(0).with_embedder(embedder).with_script(
            templates::REFLECT_MERGE.id,
            vec![ScriptEntry::always(
                r#"{"merge": true, "targets": ["horror movies", "horror flicks"], "merged_feature": "horror"}"#,
            )],
        ));
        let mut graph = PreferenceGraph::new();
        let a = graph.upsert_feature("horror movies", gw.embed("horror movies").unwrap(), t(0)).unwrap();
        let b = graph.upsert_feature("horror flicks", gw.embed("horror flicks").unwrap(), t(1)).unwrap();
        let c = graph.upsert_feature("comedy", gw.embed("comedy").unwrap(), t(2)).unwrap();
        graph.add_preference_edge(b, c).unwrap();
        graph.add_preference_edge(a, b).unwrap();
        let ex = FeatureExtraction::new(vec!["scary films".into()], vec!["comedy".into()]);
        for op in reflect(&graph, &ex, &gw, &PipelineConfig::default(), t(3)).unwrap() {
            graph.apply(&op).unwrap();
        }
        assert_eq!(graph.node_count(), 2);
        let node = graph.node(a).unwrap();
        assert_eq!(node.label, "horror");
        for alias in ["horror movies", "horror flicks", "scary films"] {
            assert_eq!(graph.find_label(alias), Some(a), "{alias}");
        }
        assert_eq!(graph.discarded_self_loop_weight(), 1);
        assert_eq!(graph.weight(a, c), 1);
        assert_eq!(graph.weight(c, a), 1);
    }

    #[test]
    fn ingest_zero_clicks_only_advances_watermark() {
        let gw = stub("{}", "{}");
        let mut state = ProfileState::new(Some("u1".into()));
        let imp = impression("i0", &[], &["N1", "N2"]);
        let out = state.ingest(&imp, &gw, &mut ChaCha8Rng::seed_from_u64(0), &PipelineConfig::default(), t(5)).unwrap();
        assert_eq!(out.pairs_sampled, 0);
        assert!(state.graph.is_empty());
        assert_eq!(state.watermark, Some(imp.timestamp));
        assert_eq!(state.version, 1);
        assert_eq!(gw.chat_calls(), 0);
    }

    #[test]
    fn duplicate_and_foreign_impressions_leave_state_unchanged() {
        let gw = stub(r#"{"features":["p"]}"#, r#"{"features":["n"]}"#);
        let mut state = ProfileState::new(Some("u1".into()));
        let imp = impression("i1", &["N1"], &["N2"]);
        let cfg = PipelineConfig::default();
        state.ingest(&imp, &gw, &mut ChaCha8Rng::seed_from_u64(0), &cfg, t(1)).unwrap();
        let before = state.clone();
        let err = state.ingest(&imp, &gw, &mut ChaCha8Rng::seed_from_u64(0), &cfg, t(2)).unwrap_err();
        assert_eq!(err, ProfileError::DuplicateImpression("i1".into()));
        assert_eq!(state, before);

        let mut foreign = impression("i9", &["N1"], &["N2"]);
        foreign.user_id = "someone-else".into();
        let err = state.ingest(&foreign, &gw, &mut ChaCha8Rng::seed_from_u64(0), &cfg, t(2)).unwrap_err();
        assert!(matches!(err, ProfileError::ForeignUser { .. }));
        assert_eq!(state, before);
    }

    #[test]
    fn gateway_failure_skips_only_that_pair() {
        let calls = Arc::new(Mutex::new(0u32));
        let counter = calls.clone();
        let gw = Gateway::new(FnBackend::new("flaky", move |req: &ChatRequest| {
            *counter.lock().unwrap() += 1;
            let prompt = req.last_user_message().unwrap();
            if prompt.contains("title N4") {
                return Err(GatewayError::Transport { attempts: 4, message: "boom".into() });
            }
            Ok(match req.script_key.as_deref() {
                Some(k) if k == templates::SUMMARY.id => {
                    if prompt.contains("has not") {
                        r#"{"features":["n"]}"#
                    } else {
                        r#"{"features":["p"]}"#
                    }
                }
                _ => "reasons",
            }
            .to_string())
        }));
        let mut state = ProfileState::new(None);
        let imp = impression("i1", &["N1", "N4"], &["N2"]);
        let out = state.ingest(&imp, &gw, &mut ChaCha8Rng::seed_from_u64(0), &PipelineConfig::default(), t(1)).unwrap();
        assert_eq!(out.pairs_sampled, 2);
        assert_eq!(out.pairs_applied, 1);
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.skipped[0].pos_id, "N4");
        assert_eq!(state.graph.total_edge_weight(), 1);
        assert_eq!(state.user_id.as_deref(), Some("u1"));
    }

    #[test]
    fn perceive_sees_version_before_the_impression() {
        let versions = Arc::new(Mutex::new(Vec::new()));
        let gw = stub(r#"{"features":["p"]}"#, r#"{"features":["n"]}"#);
        let mut state = ProfileState::new(None);
        let cfg = PipelineConfig::default();
        for i in 0..3 {
            let imp = impression(&format!("i{i}"), &["N1", "N3"], &["N2"]);
            let out = state.ingest(&imp, &gw, &mut ChaCha8Rng::seed_from_u64(i), &cfg, t(i as i64)).unwrap();
            versions.lock().unwrap().push((out.perceived_version, state.version));
        }
        assert_eq!(*versions.lock().unwrap(), vec![(0, 1), (1, 2), (2, 3)]);
    }
}
