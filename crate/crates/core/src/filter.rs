//! Natural-language filtering rules and their application to feeds.
//!
//! Deciding whether one item violates one rule takes three structured calls
//! that share a transcript: the item's topics, the rule's topics, then a
//! verdict grounded in both. Decisions are cached per
//! `(item id, rule id, rule version)`, so editing a rule invalidates exactly
//! its own entries.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clock::Timestamp;
use crate::llm::templates::{self, Template};
use crate::llm::{string_list, ChatRequest, Gateway, GatewayError, Message, SchemaRef, SYSTEM_INSTRUCTION};
use crate::profile::Item;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RuleId(pub u64);

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RuleRevision {
    pub version: u32,
    pub text: String,
    pub replaced_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FilterRule {
    pub id: RuleId,
    pub text: String,
    pub active: bool,
    pub version: u32,
    pub created_at: Timestamp,
    pub updated_at: Timestamp,
    /// Earlier texts, oldest first.
    pub history: Vec<RuleRevision>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RuleError {
    #[error("rule text must not be empty")]
    EmptyText,
    #[error("no rule with id {0}")]
    UnknownRule(RuleId),
    #[error("rule id {0} is already taken")]
    DuplicateId(RuleId),
}

/// A change to the rule set, as recorded in the event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "camelCase")]
pub enum RuleOp {
    Create {
        id: RuleId,
        text: String,
        at: Timestamp,
    },
    /// Replaces the text and bumps the version.
    Edit {
        id: RuleId,
        text: String,
        at: Timestamp,
    },
    SetActive {
        id: RuleId,
        active: bool,
        at: Timestamp,
    },
    Delete {
        id: RuleId,
    },
}

impl RuleOp {
    pub fn rule_id(&self) -> RuleId {
        match self {
            Self::Create { id, .. } | Self::Edit { id, .. } | Self::SetActive { id, .. } | Self::Delete { id } => *id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RuleSet {
    rules: BTreeMap<RuleId, FilterRule>,
    next_id: u64,
}

impl Default for RuleSet {
    fn default() -> Self {
        Self { rules: BTreeMap::new(), next_id: 1 }
    }
}

fn clean_text(text: &str) -> Result<String, RuleError> {
    let text = text.trim();
    if text.is_empty() {
        Err(RuleError::EmptyText)
    } else {
        Ok(text.to_string())
    }
}

impl RuleSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_id(&self) -> RuleId {
        RuleId(self.next_id)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn get(&self, id: RuleId) -> Option<&FilterRule> {
        self.rules.get(&id)
    }

    pub fn all(&self) -> impl Iterator<Item = &FilterRule> {
        self.rules.values()
    }

    /// Active rules in creation order.
    pub fn active(&self) -> Vec<&FilterRule> {
        let mut active: Vec<&FilterRule> = self.rules.values().filter(|r| r.active).collect();
        active.sort_by_key(|r| (r.created_at, r.id));
        active
    }

    /// Validates `op` against the current set without applying it.
    pub fn check(&self, op: &RuleOp) -> Result<(), RuleError> {
        match op {
            RuleOp::Create { id, text, .. } => {
                clean_text(text)?;
                if self.rules.contains_key(id) {
                    return Err(RuleError::DuplicateId(*id));
                }
            }
            RuleOp::Edit { id, text, .. } => {
                clean_text(text)?;
                self.rules.get(id).ok_or(RuleError::UnknownRule(*id))?;
            }
            RuleOp::SetActive { id, .. } | RuleOp::Delete { id } => {
                self.rules.get(id).ok_or(RuleError::UnknownRule(*id))?;
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, op: &RuleOp) -> Result<(), RuleError> {
        self.check(op)?;
        match op {
            RuleOp::Create { id, text, at } => {
                self.rules.insert(
                    *id,
                    FilterRule {
                        id: *id,
                        text: clean_text(text)?,
                        active: true,
                        version: 1,
                        created_at: *at,
                        updated_at: *at,
                        history: Vec::new(),
                    },
                );
                self.next_id = self.next_id.max(id.0 + 1);
            }
            RuleOp::Edit { id, text, at } => {
                let rule = self.rules.get_mut(id).expect("checked");
                let old = std::mem::replace(&mut rule.text, clean_text(text)?);
                rule.history.push(RuleRevision { version: rule.version, text: old, replaced_at: *at });
                rule.version += 1;
                rule.updated_at = *at;
            }
            RuleOp::SetActive { id, active, at } => {
                let rule = self.rules.get_mut(id).expect("checked");
                rule.active = *active;
                rule.updated_at = *at;
            }
            RuleOp::Delete { id } => {
                self.rules.remove(id);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FilterDecision {
    pub item_id: String,
    pub rule_id: RuleId,
    pub rule_version: u32,
    pub matched: bool,
    pub item_topics: Vec<String>,
    pub rule_topics: Vec<String>,
    pub rationale: String,
    pub timestamp: Timestamp,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FilterError {
    #[error("no decision for item {item_id} under rule {rule_id}: {cause}")]
    DecisionUnavailable { item_id: String, rule_id: RuleId, cause: GatewayError },
    #[error("invalid item: {0}")]
    InvalidItem(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub platform: String,
    pub seed: u64,
    /// Worker threads used by [`filter_feed`].
    pub workers: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { platform: "Zhihu".to_string(), seed: 0, workers: 4 }
    }
}

type CacheKey = (String, RuleId, u32);

/// Decisions keyed by `(item id, rule id, rule version)`.
#[derive(Debug, Default)]
pub struct DecisionCache {
    entries: Mutex<HashMap<CacheKey, FilterDecision>>,
    hits: AtomicU64,
}

impl DecisionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }

    fn get(&self, key: &CacheKey) -> Option<FilterDecision> {
        let hit = self.entries.lock().expect("cache lock").get(key).cloned();
        if hit.is_some() {
            self.hits.fetch_add(1, Ordering::SeqCst);
        }
        hit
    }

    fn put(&self, key: CacheKey, decision: FilterDecision) {
        self.entries.lock().expect("cache lock").insert(key, decision);
    }
}

fn ask(
    gateway: &Gateway,
    transcript: &mut Vec<Message>,
    template: Template,
    prompt: String,
    schema: SchemaRef,
    seed: u64,
) -> Result<serde_json::Map<String, Value>, GatewayError> {
    transcript.push(Message::user(prompt));
    let req = ChatRequest::from_messages(transcript.clone()).with_script_key(template.id).with_seed(seed);
    let resp = gateway.complete_structured(&req, schema)?;
    transcript.push(Message::assistant(resp.text));
    match resp.parsed {
        Some(Value::Object(map)) => Ok(map),
        _ => unreachable!("structured completions always carry an object"),
    }
}

fn render(template: Template, values: &[(&str, &str)]) -> String {
    template.render(values).unwrap_or_else(|e| panic!("built-in template is incomplete: {e}"))
}

/// Decides whether `item` violates `rule`, consulting `cache` first.
pub fn match_rule(
    item: &Item,
    rule: &FilterRule,
    gateway: &Gateway,
    cache: &DecisionCache,
    config: &FilterConfig,
    now: Timestamp,
) -> Result<FilterDecision, FilterError> {
    let key = (item.id.clone(), rule.id, rule.version);
    if let Some(hit) = cache.get(&key) {
        return Ok(hit);
    }
    let unavailable = |cause| FilterError::DecisionUnavailable { item_id: item.id.clone(), rule_id: rule.id, cause };
    let summary = if item.summary.is_empty() { item.title.as_str() } else { item.summary.as_str() };
    let mut transcript = vec![Message::system(SYSTEM_INSTRUCTION)];
    let item_topics = ask(
        gateway,
        &mut transcript,
        templates::FILTER_ITEM_TOPICS,
        render(
            templates::FILTER_ITEM_TOPICS,
            &[("platform", &config.platform), ("title", &item.title), ("summary", summary)],
        ),
        SchemaRef::TOPICS,
        config.seed,
    )
    .map_err(unavailable)?;
    let rule_topics = ask(
        gateway,
        &mut transcript,
        templates::FILTER_RULE_TOPICS,
        render(templates::FILTER_RULE_TOPICS, &[("platform", &config.platform), ("rule", &rule.text)]),
        SchemaRef::TOPICS,
        config.seed,
    )
    .map_err(unavailable)?;
    let verdict = ask(
        gateway,
        &mut transcript,
        templates::FILTER_VERDICT,
        render(templates::FILTER_VERDICT, &[]),
        SchemaRef::FILTER_VERDICT,
        config.seed,
    )
    .map_err(unavailable)?;

    let decision = FilterDecision {
        item_id: item.id.clone(),
        rule_id: rule.id,
        rule_version: rule.version,
        matched: verdict.get("filter").and_then(Value::as_bool).unwrap_or(false),
        item_topics: string_list(&item_topics, "topics"),
        rule_topics: string_list(&rule_topics, "topics"),
        rationale: verdict.get("reason").and_then(Value::as_str).unwrap_or_default().to_string(),
        timestamp: now,
    };
    cache.put(key, decision.clone());
    Ok(decision)
}

/// An item removed from a feed, with the rule that removed it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FilterRecord {
    pub item_id: String,
    pub matched_rule_id: RuleId,
    pub decision: FilterDecision,
    /// UTC date of the feed pass.
    pub day: NaiveDate,
    pub item: Item,
    pub rule_text: String,
}

/// One rule evaluated against one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RuleApplication {
    pub item_id: String,
    pub rule_id: RuleId,
    pub rule_version: u32,
    pub filtered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct UnavailableDecision {
    pub item_id: String,
    pub rule_id: RuleId,
    pub reason: String,
}

/// Everything one feed pass changes; the payload of its event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FeedOutcome {
    pub at: Timestamp,
    /// Ids of kept items, in input order.
    pub kept: Vec<String>,
    pub records: Vec<FilterRecord>,
    pub applications: Vec<RuleApplication>,
    pub unavailable: Vec<UnavailableDecision>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedResult {
    pub kept: Vec<Item>,
    pub outcome: FeedOutcome,
}

struct ItemResult {
    record: Option<FilterRecord>,
    applications: Vec<RuleApplication>,
    unavailable: Vec<UnavailableDecision>,
}

fn filter_item(
    item: &Item,
    rules: &[&FilterRule],
    gateway: &Gateway,
    cache: &DecisionCache,
    config: &FilterConfig,
    now: Timestamp,
) -> ItemResult {
    let mut result = ItemResult { record: None, applications: Vec::new(), unavailable: Vec::new() };
    for rule in rules {
        match match_rule(item, rule, gateway, cache, config, now) {
            Ok(decision) => {
                result.applications.push(RuleApplication {
                    item_id: item.id.clone(),
                    rule_id: rule.id,
                    rule_version: rule.version,
                    filtered: decision.matched,
                });
                if decision.matched {
                    result.record = Some(FilterRecord {
                        item_id: item.id.clone(),
                        matched_rule_id: rule.id,
                        decision,
                        day: now.date_naive(),
                        item: item.clone(),
                        rule_text: rule.text.clone(),
                    });
                    break;
                }
            }
            Err(e) => {
                log::warn!("{e}; keeping the item");
                result.unavailable.push(UnavailableDecision {
                    item_id: item.id.clone(),
                    rule_id: rule.id,
                    reason: e.to_string(),
                });
            }
        }
    }
    result
}

/// Applies the active rules of `rules` to `items`.
///
/// Rules are tried in creation order and the first match removes the item.
/// Items are processed in parallel; the result is independent of scheduling.
pub fn filter_feed(
    items: &[Item],
    rules: &RuleSet,
    gateway: &Gateway,
    cache: &DecisionCache,
    config: &FilterConfig,
    now: Timestamp,
) -> Result<FeedResult, FilterError> {
    for item in items {
        item.validate().map_err(FilterError::InvalidItem)?;
    }
    let active = rules.active();
    let workers = config.workers.clamp(1, items.len().max(1));
    let chunk = items.len().div_ceil(workers).max(1);
    let per_item: Vec<ItemResult> = std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|slice| {
                let active = &active;
                scope.spawn(move || {
                    slice.iter().map(|item| filter_item(item, active, gateway, cache, config, now)).collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("filter worker panicked")).collect()
    });

    let mut kept = Vec::new();
    let mut outcome = FeedOutcome {
        at: now,
        kept: Vec::new(),
        records: Vec::new(),
        applications: Vec::new(),
        unavailable: Vec::new(),
    };
    for (item, result) in items.iter().zip(per_item) {
        match result.record {
            Some(record) => outcome.records.push(record),
            None => {
                outcome.kept.push(item.id.clone());
                kept.push(item.clone());
            }
        }
        outcome.applications.extend(result.applications);
        outcome.unavailable.extend(result.unavailable);
    }
    Ok(FeedResult { kept, outcome })
}

/// `N` counts items a rule was applied to, `n` those it filtered.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FilterStats {
    pub applied: u64,
    pub filtered: u64,
}

impl FilterStats {
    pub fn efficiency<T: Scalar>(&self) -> Option<T> {
        filtering_efficiency(self.filtered, self.applied)
    }

    fn add(&mut self, other: FilterStats) {
        self.applied += other.applied;
        self.filtered += other.filtered;
    }
}

/// `n / N`, or `None` when the rule was never applied.
pub fn filtering_efficiency<T: Scalar>(filtered: u64, applied: u64) -> Option<T> {
    (applied > 0).then(|| T::of(filtered as f64) / T::of(applied as f64))
}

pub type StatsTable = BTreeMap<RuleId, BTreeMap<NaiveDate, FilterStats>>;

/// Per-(rule, day) counters derived from rule applications.
pub fn compute_stats<'a>(outcomes: impl IntoIterator<Item = &'a FeedOutcome>) -> StatsTable {
    let mut table = StatsTable::new();
    for outcome in outcomes {
        accumulate(&mut table, outcome);
    }
    table
}

fn accumulate(table: &mut StatsTable, outcome: &FeedOutcome) {
    let day = outcome.at.date_naive();
    for app in &outcome.applications {
        let stats = table.entry(app.rule_id).or_default().entry(day).or_default();
        stats.applied += 1;
        stats.filtered += u64::from(app.filtered);
    }
}

/// Sums a rule's counters over `[from, to]` (inclusive; open ends allowed).
pub fn stats_in_range(table: &StatsTable, rule: RuleId, from: Option<NaiveDate>, to: Option<NaiveDate>) -> FilterStats {
    let mut total = FilterStats::default();
    if let Some(days) = table.get(&rule) {
        days.iter()
            .filter(|(d, _)| from.is_none_or(|f| **d >= f) && to.is_none_or(|t| **d <= t))
            .for_each(|(_, s)| total.add(*s));
    }
    total
}

/// Filter records and live statistics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FilterLog {
    pub records: Vec<FilterRecord>,
    pub stats: StatsTable,
}

impl FilterLog {
    pub fn apply(&mut self, outcome: &FeedOutcome) {
        self.records.extend(outcome.records.iter().cloned());
        accumulate(&mut self.stats, outcome);
    }

    /// The most recent `limit` records, newest first.
    pub fn recent(&self, limit: usize) -> impl Iterator<Item = &FilterRecord> {
        self.records.iter().rev().take(limit)
    }
}
