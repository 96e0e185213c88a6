//! Turning filtering needs voiced in conversation into rule changes.
//!
//! Each completed round is checked for a need. A need becomes a proposed
//! action: a new rule, or an update of a related existing rule. Nothing
//! changes until the user confirms the (possibly edited) proposal.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clock::Timestamp;
use crate::conversation::SessionId;
use crate::filter::{RuleId, RuleOp, RuleSet};
use crate::graph::normalize_label;
use crate::llm::templates;
use crate::llm::{ChatRequest, Gateway, GatewayError, SchemaRef};

/// Upper bound on rules listed in one relevance query.
pub const RELEVANCE_RULE_CAP: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub u64);

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FilteringNeed {
    pub text: String,
    pub source_session_id: SessionId,
    /// 1-based round within the session.
    pub source_round: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase")]
pub enum ActionKind {
    Add,
    /// `target_version` is the rule's version when the action was proposed.
    #[serde(rename_all = "camelCase")]
    Update {
        target_rule_id: RuleId,
        target_version: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ActionStatus {
    Proposed,
    Confirmed,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ManagementAction {
    pub id: ActionId,
    pub kind: ActionKind,
    pub proposed_text: String,
    pub status: ActionStatus,
    pub source_need: FilteringNeed,
    pub duplicate_of: Option<RuleId>,
    pub proposed_at: Timestamp,
    pub resolved_at: Option<Timestamp>,
    pub final_text: Option<String>,
    /// Rule created or updated by a confirmation.
    pub rule_id: Option<RuleId>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ActionError {
    #[error("no action with id {0}")]
    UnknownAction(ActionId),
    #[error("action {0} is no longer pending")]
    NotPending(ActionId),
    #[error("confirmed text must not be empty")]
    EmptyText,
    #[error("rule {rule} changed or was deleted since action {action} was proposed")]
    StaleAction { action: ActionId, rule: RuleId },
}

fn structured(
    gateway: &Gateway,
    template: templates::Template,
    values: &[(&str, &str)],
    schema: SchemaRef,
    seed: u64,
) -> Result<serde_json::Map<String, Value>, GatewayError> {
    let prompt = template.render(values).unwrap_or_else(|e| panic!("built-in template is incomplete: {e}"));
    let req = ChatRequest::new(prompt).with_script_key(template.id).with_seed(seed);
    match gateway.complete_structured(&req, schema)?.parsed {
        Some(Value::Object(map)) => Ok(map),
        _ => unreachable!("structured completions always carry an object"),
    }
}

/// Extracts a filtering need from one round, if the user voiced one.
/// Gateway failures count as "no need".
pub fn detect_need(
    user_message: &str,
    agent_message: &str,
    session: SessionId,
    round: u32,
    gateway: &Gateway,
    seed: u64,
) -> Option<FilteringNeed> {
    let result = structured(
        gateway,
        templates::NEED_DETECTION,
        &[("user_message", user_message), ("agent_message", agent_message)],
        SchemaRef::FILTERING_NEED,
        seed,
    );
    match result {
        Ok(obj) => obj
            .get("need")
            .and_then(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|text| FilteringNeed { text: text.to_string(), source_session_id: session, source_round: round }),
        Err(e) => {
            log::warn!("need detection failed for session {session} round {round}: {e}");
            None
        }
    }
}

/// Decides whether `need` adds a rule or updates an existing one.
pub fn propose_action(
    id: ActionId,
    need: FilteringNeed,
    rules: &RuleSet,
    gateway: &Gateway,
    seed: u64,
    now: Timestamp,
) -> Result<ManagementAction, GatewayError> {
    let action = |kind, text: String, duplicate_of| ManagementAction {
        id,
        kind,
        proposed_text: text,
        status: ActionStatus::Proposed,
        source_need: need.clone(),
        duplicate_of,
        proposed_at: now,
        resolved_at: None,
        final_text: None,
        rule_id: None,
    };
    if rules.is_empty() {
        return Ok(action(ActionKind::Add, need.text.clone(), None));
    }
    let key = normalize_label(&need.text);
    if let Some(dup) = rules.active().into_iter().find(|r| normalize_label(&r.text) == key) {
        let kind = ActionKind::Update { target_rule_id: dup.id, target_version: dup.version };
        return Ok(action(kind, dup.text.clone(), Some(dup.id)));
    }

    let listed: Vec<_> = rules.all().take(RELEVANCE_RULE_CAP).collect();
    let rule_lines = listed.iter().map(|r| format!("[{}] {}", r.id, r.text)).collect::<Vec<_>>().join("\n");
    let obj = structured(
        gateway,
        templates::RULE_RELEVANCE,
        &[("need", &need.text), ("rules", &rule_lines)],
        SchemaRef::RULE_RELEVANCE,
        seed,
    )?;
    let related =
        obj.get("related_rule_id").and_then(Value::as_u64).and_then(|id| listed.iter().find(|r| r.id == RuleId(id)));
    Ok(match related {
        Some(rule) => {
            let merged = obj
                .get("merged_text")
                .and_then(Value::as_str)
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .unwrap_or(&need.text)
                .to_string();
            action(ActionKind::Update { target_rule_id: rule.id, target_version: rule.version }, merged, None)
        }
        None => action(ActionKind::Add, need.text.clone(), None),
    })
}

/// The outcome of a confirm/reject decision; the payload of its event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ActionResolution {
    pub action_id: ActionId,
    pub confirmed: bool,
    pub final_text: Option<String>,
    pub rule_ops: Vec<RuleOp>,
    pub at: Timestamp,
}

/// Validates a decision on `action` and computes the rule changes it causes.
pub fn resolve_action(
    rules: &RuleSet,
    action: &ManagementAction,
    edited_text: Option<&str>,
    confirmed: bool,
    now: Timestamp,
) -> Result<ActionResolution, ActionError> {
    if action.status != ActionStatus::Proposed {
        return Err(ActionError::NotPending(action.id));
    }
    if !confirmed {
        return Ok(ActionResolution { action_id: action.id, confirmed, final_text: None, rule_ops: vec![], at: now });
    }
    let text = edited_text.unwrap_or(&action.proposed_text).trim().to_string();
    if text.is_empty() {
        return Err(ActionError::EmptyText);
    }
    let op = match action.kind {
        ActionKind::Add => RuleOp::Create { id: rules.next_id(), text: text.clone(), at: now },
        ActionKind::Update { target_rule_id, target_version } => {
            match rules.get(target_rule_id) {
                Some(rule) if rule.version == target_version => {}
                _ => return Err(ActionError::StaleAction { action: action.id, rule: target_rule_id }),
            }
            RuleOp::Edit { id: target_rule_id, text: text.clone(), at: now }
        }
    };
    Ok(ActionResolution { action_id: action.id, confirmed, final_text: Some(text), rule_ops: vec![op], at: now })
}

/// All actions ever proposed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ActionLog {
    actions: BTreeMap<ActionId, ManagementAction>,
    next_id: u64,
}

impl Default for ActionLog {
    fn default() -> Self {
        Self { actions: BTreeMap::new(), next_id: 1 }
    }
}

impl ActionLog {
    pub fn next_id(&self) -> ActionId {
        ActionId(self.next_id)
    }

    pub fn get(&self, id: ActionId) -> Option<&ManagementAction> {
        self.actions.get(&id)
    }

    pub fn all(&self) -> impl Iterator<Item = &ManagementAction> {
        self.actions.values()
    }

    pub fn pending(&self) -> impl Iterator<Item = &ManagementAction> {
        self.actions.values().filter(|a| a.status == ActionStatus::Proposed)
    }

    pub fn propose(&mut self, action: ManagementAction) {
        self.next_id = self.next_id.max(action.id.0 + 1);
        self.actions.insert(action.id, action);
    }

    /// Records a resolution and applies its rule ops to `rules`.
    pub fn resolve(&mut self, resolution: &ActionResolution, rules: &mut RuleSet) -> Result<(), ActionError> {
        let action =
            self.actions.get_mut(&resolution.action_id).ok_or(ActionError::UnknownAction(resolution.action_id))?;
        if action.status != ActionStatus::Proposed {
            return Err(ActionError::NotPending(action.id));
        }
        for op in &resolution.rule_ops {
            rules.apply(op).map_err(|_| ActionError::StaleAction { action: action.id, rule: op.rule_id() })?;
        }
        action.status = if resolution.confirmed { ActionStatus::Confirmed } else { ActionStatus::Rejected };
        action.resolved_at = Some(resolution.at);
        action.final_text = resolution.final_text.clone();
        action.rule_id = resolution.rule_ops.first().map(RuleOp::rule_id);
        Ok(())
    }

    /// Confirmed actions over all proposed ones; `None` before any proposal.
    pub fn acceptance_rate(&self) -> Option<f64> {
        let proposed = self.actions.len();
        let confirmed = self.actions.values().filter(|a| a.status == ActionStatus::Confirmed).count();
        (proposed > 0).then(|| confirmed as f64 / proposed as f64)
    }
}
