//! Transport-independent request routing.
//!
//! [`Service::route`] maps an [`ApiRequest`] to an [`ApiResponse`]; the HTTP
//! server and the tests both go through it. Every failure is a single
//! [`ApiError`] under an `error` key.
//!
//! | endpoint                              | body / query                           | success |
//! |---------------------------------------|----------------------------------------|---------|
//! | `POST /events/impression`             | `Impression`                           | 200 `{duplicate, impressionId, profileVersion, outcome?}` |
//! | `POST /feed/filter`                   | `{items: [Item]}` or `[Item]`          | 200 `{kept, filtered, unavailable}` |
//! | `GET /rules`                          |                                        | 200 `[FilterRule]` |
//! | `POST /rules`                         | `{text}`                               | 201 `FilterRule` |
//! | `GET /rules/{id}`                     |                                        | 200 `FilterRule` |
//! | `PATCH /rules/{id}`                   | `{text?, active?}`                     | 200 `FilterRule` |
//! | `DELETE /rules/{id}`                  |                                        | 200 deleted `FilterRule` |
//! | `POST /rules/{id}/activate`           |                                        | 200 `FilterRule` |
//! | `POST /rules/{id}/deactivate`         |                                        | 200 `FilterRule` |
//! | `GET /profile`                        |                                        | 200 `{userId, version, watermark, profile, skippedPairs}` |
//! | `GET /profile/graph`                  |                                        | 200 `{nodes, edges}` |
//! | `GET /filter-records`                 | `?from&to&ruleId&cursor&limit`         | 200 `{records, nextCursor}` |
//! | `GET /filter-stats`                   | `?from&to&ruleId`                      | 200 `{rows, totals}` |
//! | `POST /conversations`                 | `{strategy}`                           | 201 `ConversationSession` |
//! | `GET /conversations/{id}`             |                                        | 200 `ConversationSession` |
//! | `POST /conversations/{id}/messages`   | `{text}`                               | 200 `{session, reply, need, action}` |
//! | `POST /conversations/{id}/close`      |                                        | 200 `ConversationSession` |
//! | `GET /actions/pending`                |                                        | 200 `[ManagementAction]` |
//! | `POST /actions/{id}/confirm`          | `{editedText?, confirmed}`             | 200 `ManagementAction` |
//! | `GET /health`                         |                                        | 200 `{status, lastSeq}` |
//!
//! Mutating requests that carry a request id are executed at most once; a
//! retry with the same id replays the stored response.

use std::collections::{HashMap, VecDeque};
use std::sync::{Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use veil_core::actions::{ActionError, ActionId};
use veil_core::conversation::{ConversationError, SessionId, Strategy};
use veil_core::engine::{Engine, EngineError};
use veil_core::filter::{FilterError, RuleError, RuleId};
use veil_core::profile::{Impression, Item, ProfileError};
use veil_core::state::StateError;
use veil_core::store::{query_records, query_stats, rule_totals, RecordQuery, StoreError};

pub const IDEMPOTENCY_CAPACITY: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HttpMethod {
    Get,
    Post,
    Patch,
    Delete,
}

impl HttpMethod {
    pub fn parse(method: &str) -> Option<Self> {
        match method.to_ascii_uppercase().as_str() {
            "GET" => Some(Self::Get),
            "POST" => Some(Self::Post),
            "PATCH" => Some(Self::Patch),
            "DELETE" => Some(Self::Delete),
            _ => None,
        }
    }

    fn mutates(self) -> bool {
        self != Self::Get
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiRequest {
    pub method: HttpMethod,
    /// Path with optional query string, e.g. `/filter-records?limit=5`.
    pub path: String,
    /// Raw JSON body; empty when absent.
    pub body: String,
    pub request_id: Option<String>,
    /// Bearer token presented by the client.
    pub token: Option<String>,
}

impl ApiRequest {
    pub fn new(method: HttpMethod, path: impl Into<String>) -> Self {
        Self { method, path: path.into(), body: String::new(), request_id: None, token: None }
    }

    pub fn get(path: impl Into<String>) -> Self {
        Self::new(HttpMethod::Get, path)
    }

    pub fn post(path: impl Into<String>, body: Value) -> Self {
        Self::new(HttpMethod::Post, path).with_body(body)
    }

    pub fn patch(path: impl Into<String>, body: Value) -> Self {
        Self::new(HttpMethod::Patch, path).with_body(body)
    }

    pub fn delete(path: impl Into<String>) -> Self {
        Self::new(HttpMethod::Delete, path)
    }

    pub fn with_body(mut self, body: Value) -> Self {
        self.body = body.to_string();
        self
    }

    pub fn with_request_id(mut self, id: impl Into<String>) -> Self {
        self.request_id = Some(id.into());
        self
    }

    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiResponse {
    pub status: u16,
    pub body: Value,
}

impl ApiResponse {
    fn ok(body: impl Serialize) -> Self {
        Self { status: 200, body: serde_json::to_value(body).expect("responses serialize") }
    }

    fn created(body: impl Serialize) -> Self {
        Self { status: 201, ..Self::ok(body) }
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    /// The `error` object of a failed response.
    pub fn error(&self) -> Option<ApiError> {
        serde_json::from_value(self.body.get("error")?.clone()).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(default)]
    pub details: Value,
}

impl ApiError {
    pub fn new(status: u16, code: &str, message: impl Into<String>) -> Self {
        Self { status, code: code.to_string(), message: message.into(), details: Value::Null }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = details;
        self
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(400, "invalid_request", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(404, "not_found", message)
    }

    pub fn into_response(self) -> ApiResponse {
        ApiResponse { status: self.status, body: json!({ "error": self }) }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let message = e.to_string();
        match e {
            EngineError::Profile(p) => profile_error(p, message),
            EngineError::Rule(r) => rule_error(&r, message),
            EngineError::Filter(FilterError::DecisionUnavailable { .. }) => {
                ApiError::new(503, "gateway_unavailable", message)
            }
            EngineError::Filter(FilterError::InvalidItem(_)) => ApiError::new(400, "invalid_item", message),
            EngineError::Conversation(c) => conversation_error(&c, message),
            EngineError::Action(a) => action_error(&a, message),
            EngineError::Store(StoreError::StorageFull) => ApiError::new(507, "storage_full", message),
            EngineError::Store(_) => ApiError::new(500, "storage_error", message),
            EngineError::State(s) => state_error(s, message),
        }
    }
}

fn profile_error(e: ProfileError, message: String) -> ApiError {
    match e {
        ProfileError::Gateway(_) => ApiError::new(503, "gateway_unavailable", message),
        ProfileError::InvalidImpression(_) => ApiError::new(400, "invalid_impression", message),
        ProfileError::ForeignUser { expected, got } => {
            ApiError::new(400, "foreign_user", message).with_details(json!({ "expected": expected, "got": got }))
        }
        ProfileError::DuplicateImpression(_) => ApiError::new(409, "duplicate_impression", message),
        _ => ApiError::new(500, "profile_error", message),
    }
}

fn rule_error(e: &RuleError, message: String) -> ApiError {
    match e {
        RuleError::EmptyText => ApiError::new(400, "empty_text", message),
        RuleError::UnknownRule(id) => ApiError::new(404, "unknown_rule", message).with_details(json!({ "ruleId": id })),
        RuleError::DuplicateId(_) => ApiError::new(409, "duplicate_rule", message),
    }
}

fn conversation_error(e: &ConversationError, message: String) -> ApiError {
    match e {
        ConversationError::UnknownSession(id) => {
            ApiError::new(404, "unknown_session", message).with_details(json!({ "sessionId": id }))
        }
        ConversationError::SessionClosed(_) => ApiError::new(409, "session_closed", message),
        ConversationError::EmptyMessage => ApiError::new(400, "empty_message", message),
    }
}

fn action_error(e: &ActionError, message: String) -> ApiError {
    match e {
        ActionError::UnknownAction(id) => {
            ApiError::new(404, "unknown_action", message).with_details(json!({ "actionId": id }))
        }
        ActionError::NotPending(_) => ApiError::new(409, "action_not_pending", message),
        ActionError::EmptyText => ApiError::new(400, "empty_text", message),
        ActionError::StaleAction { action, rule } => {
            ApiError::new(409, "stale_action", message).with_details(json!({ "actionId": action, "ruleId": rule }))
        }
    }
}

fn state_error(e: StateError, message: String) -> ApiError {
    match e {
        StateError::Profile(p) => profile_error(p, message),
        StateError::Rule(r) => rule_error(&r, message),
        StateError::Action(a) => action_error(&a, message),
        StateError::Conversation(c) => conversation_error(&c, message),
        StateError::OutOfOrder { .. } | StateError::DuplicateSession(_) => ApiError::new(500, "state_error", message),
    }
}

type ApiResult = Result<ApiResponse, ApiError>;

#[derive(Debug, Default)]
struct IdempotencyCache {
    order: VecDeque<String>,
    entries: HashMap<String, (String, ApiResponse)>,
}

impl IdempotencyCache {
    fn insert(&mut self, key: String, fingerprint: String, response: ApiResponse) {
        if self.entries.insert(key.clone(), (fingerprint, response)).is_none() {
            self.order.push_back(key);
        }
        while self.order.len() > IDEMPOTENCY_CAPACITY {
            if let Some(old) = self.order.pop_front() {
                self.entries.remove(&old);
            }
        }
    }
}

pub struct Service {
    engine: RwLock<Engine>,
    replays: Mutex<IdempotencyCache>,
    token: Option<String>,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service").field("engine", &self.engine).finish()
    }
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct TextBody {
    text: String,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct RulePatch {
    text: Option<String>,
    active: Option<bool>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct OpenBody {
    strategy: Strategy,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ConfirmBody {
    #[serde(default)]
    edited_text: Option<String>,
    confirmed: bool,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FeedBody {
    Wrapped { items: Vec<Item> },
    Bare(Vec<Item>),
}

fn parse_body<T: DeserializeOwned>(body: &str) -> Result<T, ApiError> {
    let text = if body.trim().is_empty() { "null" } else { body };
    serde_json::from_str(text).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

fn parse_id(segment: &str, what: &str) -> Result<u64, ApiError> {
    segment.parse().map_err(|_| ApiError::not_found(format!("{what} id {segment:?} is not a number")))
}

fn parse_query(query: &str) -> Result<RecordQuery, ApiError> {
    let mut q = RecordQuery::default();
    for (key, value) in form_urlencoded::parse(query.as_bytes()) {
        let bad = |e: &dyn std::fmt::Display| ApiError::bad_request(format!("invalid {key} {value:?}: {e}"));
        match key.as_ref() {
            "from" => q.from = Some(value.parse().map_err(|e| bad(&e))?),
            "to" => q.to = Some(value.parse().map_err(|e| bad(&e))?),
            "ruleId" => q.rule_id = Some(RuleId(value.parse().map_err(|e| bad(&e))?)),
            "cursor" => q.cursor = Some(value.parse().map_err(|e| bad(&e))?),
            "limit" => q.limit = Some(value.parse().map_err(|e| bad(&e))?),
            _ => return Err(ApiError::bad_request(format!("unknown query parameter {key:?}"))),
        }
    }
    if let (Some(from), Some(to)) = (q.from, q.to) {
        if from > to {
            return Err(ApiError::bad_request("from must not be after to"));
        }
    }
    Ok(q)
}

impl Service {
    pub fn new(engine: Engine) -> Self {
        Self { engine: RwLock::new(engine), replays: Mutex::new(IdempotencyCache::default()), token: None }
    }

    /// Requires `Authorization: Bearer <token>` on every request.
    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token.filter(|t| !t.is_empty());
        self
    }

    pub fn engine(&self) -> RwLockReadGuard<'_, Engine> {
        self.engine.read().unwrap_or_else(|e| e.into_inner())
    }

    fn engine_mut(&self) -> RwLockWriteGuard<'_, Engine> {
        self.engine.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn route(&self, req: &ApiRequest) -> ApiResponse {
        if let Some(expected) = &self.token {
            if req.token.as_deref() != Some(expected.as_str()) {
                return ApiError::new(401, "unauthorized", "missing or wrong bearer token").into_response();
            }
        }
        let Some(request_id) = req.request_id.as_ref().filter(|_| req.method.mutates()) else {
            return self.dispatch(req).unwrap_or_else(ApiError::into_response);
        };
        let key = request_id.clone();
        let fingerprint = format!("{:?} {} {}", req.method, req.path, req.body);
        let mut replays = self.replays.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((seen, response)) = replays.entries.get(&key) {
            if *seen == fingerprint {
                return response.clone();
            }
            return ApiError::new(409, "request_id_reused", "request id was already used for a different request")
                .with_details(json!({ "requestId": request_id }))
                .into_response();
        }
        let response = self.dispatch(req).unwrap_or_else(ApiError::into_response);
        if response.status < 500 {
            replays.insert(key, fingerprint, response.clone());
        }
        response
    }

    fn dispatch(&self, req: &ApiRequest) -> ApiResult {
        use HttpMethod::*;
        let (path, query) = req.path.split_once('?').unwrap_or((req.path.as_str(), ""));
        let segments: Vec<&str> = path.split('/').filter(|s| !s.is_empty()).collect();
        let body = req.body.as_str();
        match (req.method, segments.as_slice()) {
            (Get, ["health"]) => {
                Ok(ApiResponse::ok(json!({ "status": "ok", "lastSeq": self.engine().state().last_seq })))
            }
            (Post, ["events", "impression"]) => self.ingest(body),
            (Post, ["feed", "filter"]) => self.filter(body),
            (Get, ["rules"]) => Ok(ApiResponse::ok(self.engine().state().rules.all().collect::<Vec<_>>())),
            (Post, ["rules"]) => {
                let TextBody { text } = parse_body(body)?;
                Ok(ApiResponse::created(self.engine_mut().create_rule(&text)?))
            }
            (Get, ["rules", id]) => {
                let id = RuleId(parse_id(id, "rule")?);
                let engine = self.engine();
                let rule = engine.state().rules.get(id).ok_or(EngineError::Rule(RuleError::UnknownRule(id)))?;
                Ok(ApiResponse::ok(rule))
            }
            (Patch, ["rules", id]) => self.patch_rule(RuleId(parse_id(id, "rule")?), body),
            (Delete, ["rules", id]) => {
                Ok(ApiResponse::ok(self.engine_mut().delete_rule(RuleId(parse_id(id, "rule")?))?))
            }
            (Post, ["rules", id, toggle @ ("activate" | "deactivate")]) => {
                let id = RuleId(parse_id(id, "rule")?);
                Ok(ApiResponse::ok(self.engine_mut().set_rule_active(id, *toggle == "activate")?))
            }
            (Get, ["profile"]) => {
                let engine = self.engine();
                let p = &engine.state().profile;
                Ok(ApiResponse::ok(json!({
                    "userId": p.user_id,
                    "version": p.version,
                    "watermark": p.watermark,
                    "profile": p.profile,
                    "skippedPairs": p.skipped.len(),
                })))
            }
            (Get, ["profile", "graph"]) => Ok(ApiResponse::ok(self.graph())),
            (Get, ["filter-records"]) => {
                let q = parse_query(query)?;
                Ok(ApiResponse::ok(query_records(&self.engine().state().filter_log.records, &q)))
            }
            (Get, ["filter-stats"]) => self.stats(query),
            (Post, ["conversations"]) => {
                let OpenBody { strategy } = parse_body(body)?;
                Ok(ApiResponse::created(self.engine_mut().open_session(strategy)?))
            }
            (Get, ["conversations", id]) => {
                let id = SessionId(parse_id(id, "session")?);
                let engine = self.engine();
                Ok(ApiResponse::ok(engine.state().session(id).map_err(EngineError::from)?))
            }
            (Post, ["conversations", id, "messages"]) => {
                let id = SessionId(parse_id(id, "session")?);
                let TextBody { text } = parse_body(body)?;
                let result = self.engine_mut().send_message(id, &text)?;
                let reply = result.session.messages.last().cloned();
                Ok(ApiResponse::ok(json!({
                    "session": result.session,
                    "reply": reply,
                    "replyFailure": result.round.reply_failure,
                    "need": result.round.need,
                    "action": result.round.action,
                })))
            }
            (Post, ["conversations", id, "close"]) => {
                let id = SessionId(parse_id(id, "session")?);
                Ok(ApiResponse::ok(self.engine_mut().close_session(id)?))
            }
            (Get, ["actions", "pending"]) => Ok(ApiResponse::ok(self.engine().pending_actions())),
            (Post, ["actions", id, "confirm"]) => {
                let id = ActionId(parse_id(id, "action")?);
                let ConfirmBody { edited_text, confirmed } = parse_body(body)?;
                Ok(ApiResponse::ok(self.engine_mut().resolve_action(id, edited_text.as_deref(), confirmed)?))
            }
            (_, segs) if KNOWN_PATHS.iter().any(|p| same_shape(p, segs)) => {
                Err(ApiError::new(405, "method_not_allowed", format!("{:?} is not supported on {path}", req.method)))
            }
            _ => Err(ApiError::not_found(format!("no route for {path}"))),
        }
    }

    fn ingest(&self, body: &str) -> ApiResult {
        let impression: Impression = parse_body(body)?;
        let mut engine = self.engine_mut();
        match engine.ingest_impression(&impression) {
            Ok(outcome) => Ok(ApiResponse::ok(json!({
                "duplicate": false,
                "impressionId": impression.impression_id,
                "profileVersion": engine.state().profile.version,
                "outcome": outcome,
            }))),
            Err(EngineError::Profile(ProfileError::DuplicateImpression(id))) => Ok(ApiResponse::ok(json!({
                "duplicate": true,
                "impressionId": id,
                "profileVersion": engine.state().profile.version,
            }))),
            Err(e) => Err(e.into()),
        }
    }

    fn filter(&self, body: &str) -> ApiResult {
        let items = match parse_body(body)? {
            FeedBody::Wrapped { items } | FeedBody::Bare(items) => items,
        };
        let result = self.engine_mut().filter_feed(&items)?;
        Ok(ApiResponse::ok(json!({
            "kept": result.kept,
            "filtered": result.outcome.records,
            "unavailable": result.outcome.unavailable,
        })))
    }

    fn patch_rule(&self, id: RuleId, body: &str) -> ApiResult {
        let RulePatch { text, active } = parse_body(body)?;
        if text.is_none() && active.is_none() {
            return Err(ApiError::bad_request("expected text or active"));
        }
        let mut engine = self.engine_mut();
        if engine.state().rules.get(id).is_none() {
            return Err(EngineError::Rule(RuleError::UnknownRule(id)).into());
        }
        if text.as_deref().is_some_and(|t| t.trim().is_empty()) {
            return Err(EngineError::Rule(RuleError::EmptyText).into());
        }
        let mut rule = engine.state().rules.get(id).cloned().expect("checked above");
        if let Some(text) = text.filter(|t| t.trim() != rule.text) {
            rule = engine.edit_rule(id, &text)?;
        }
        if let Some(active) = active.filter(|a| *a != rule.active) {
            rule = engine.set_rule_active(id, active)?;
        }
        Ok(ApiResponse::ok(rule))
    }

    fn graph(&self) -> Value {
        let engine = self.engine();
        let profile = &engine.state().profile;
        let nodes: Vec<Value> = profile
            .graph
            .nodes()
            .map(|n| {
                json!({
                    "id": n.id,
                    "label": n.label,
                    "absorbedLabels": n.absorbed_labels,
                    "createdAt": n.created_at,
                    "score": profile.ranked.score_of(n.id),
                })
            })
            .collect();
        let edges: Vec<Value> = profile
            .graph
            .edges()
            .map(|(from, to, weight)| json!({ "from": from, "to": to, "weight": weight }))
            .collect();
        json!({ "version": profile.version, "nodes": nodes, "edges": edges })
    }

    fn stats(&self, query: &str) -> ApiResult {
        let q = parse_query(query)?;
        let engine = self.engine();
        let table = &engine.state().filter_log.stats;
        let totals: Vec<Value> = table
            .keys()
            .filter(|r| q.rule_id.is_none_or(|id| id == **r))
            .map(|&rule| {
                let (total, efficiency) = rule_totals(table, rule, &q);
                json!({ "ruleId": rule, "N": total.applied, "n": total.filtered, "efficiency": efficiency })
            })
            .collect();
        Ok(ApiResponse::ok(json!({ "rows": query_stats(table, &q), "totals": totals })))
    }
}

const KNOWN_PATHS: &[&[&str]] = &[
    &["health"],
    &["events", "impression"],
    &["feed", "filter"],
    &["rules"],
    &["rules", "*"],
    &["rules", "*", "activate"],
    &["rules", "*", "deactivate"],
    &["profile"],
    &["profile", "graph"],
    &["filter-records"],
    &["filter-stats"],
    &["conversations"],
    &["conversations", "*"],
    &["conversations", "*", "messages"],
    &["conversations", "*", "close"],
    &["actions", "pending"],
    &["actions", "*", "confirm"],
];

fn same_shape(pattern: &[&str], segments: &[&str]) -> bool {
    pattern.len() == segments.len() && pattern.iter().zip(segments).all(|(p, s)| *p == "*" || p == s)
}
