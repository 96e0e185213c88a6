//! Engine state and the events that change it.
//!
//! Every mutation is first computed (model calls included) into an
//! [`EventPayload`], persisted, and only then applied. [`EngineState::apply`]
//! is pure, so replaying a log reproduces the live state exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::actions::{ActionError, ActionLog, ActionResolution, FilteringNeed, ManagementAction};
use crate::clock::Timestamp;
use crate::conversation::{ConversationError, ConversationSession, SessionId, SessionStatus};
use crate::filter::{FeedOutcome, FilterLog, RuleError, RuleOp, RuleSet};
use crate::graph::RankParams;
use crate::profile::{IngestOutcome, ProfileError, ProfileState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RoundRecorded {
    pub session_id: SessionId,
    pub user_text: String,
    pub user_at: Timestamp,
    pub agent_text: String,
    pub agent_at: Timestamp,
    /// Why the agent fell back to an apology, if it did.
    pub reply_failure: Option<String>,
    pub need: Option<FilteringNeed>,
    pub action: Option<ManagementAction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "camelCase")]
pub enum EventPayload {
    ImpressionIngested(IngestOutcome),
    FeedFiltered(FeedOutcome),
    RuleChanged(RuleOp),
    SessionOpened(ConversationSession),
    RoundRecorded(RoundRecorded),
    #[serde(rename_all = "camelCase")]
    SessionClosed {
        session_id: SessionId,
    },
    ActionResolved(ActionResolution),
}

impl EventPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::ImpressionIngested(_) => "impressionIngested",
            Self::FeedFiltered(_) => "feedFiltered",
            Self::RuleChanged(_) => "ruleChanged",
            Self::SessionOpened(_) => "sessionOpened",
            Self::RoundRecorded(_) => "roundRecorded",
            Self::SessionClosed { .. } => "sessionClosed",
            Self::ActionResolved(_) => "actionResolved",
        }
    }

    /// Splits into the `(kind, payload)` pair stored on disk.
    pub fn to_parts(&self) -> (String, Value) {
        let mut value = serde_json::to_value(self).expect("events serialize");
        let payload = value.get_mut("payload").map(Value::take).unwrap_or(Value::Null);
        (self.kind().to_string(), payload)
    }

    /// Reassembles a payload from its stored parts, checking its shape.
    pub fn from_parts(kind: &str, payload: &Value) -> Result<Self, serde_json::Error> {
        serde_json::from_value(serde_json::json!({ "kind": kind, "payload": payload }))
    }
}

/// One line of `events.log`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub kind: String,
    pub at: Timestamp,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub seq: u64,
    pub at: Timestamp,
    pub payload: EventPayload,
}

impl Event {
    pub fn to_record(&self) -> EventRecord {
        let (kind, payload) = self.payload.to_parts();
        EventRecord { seq: self.seq, kind, at: self.at, payload }
    }

    pub fn from_record(record: &EventRecord) -> Result<Self, serde_json::Error> {
        Ok(Self { seq: record.seq, at: record.at, payload: EventPayload::from_parts(&record.kind, &record.payload)? })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StateError {
    #[error("expected event seq {expected}, got {got}")]
    OutOfOrder { expected: u64, got: u64 },
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error(transparent)]
    Conversation(#[from] ConversationError),
    #[error("session {0} already exists")]
    DuplicateSession(SessionId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EngineState {
    pub last_seq: u64,
    pub profile: ProfileState,
    pub rules: RuleSet,
    pub filter_log: FilterLog,
    pub sessions: BTreeMap<SessionId, ConversationSession>,
    pub actions: ActionLog,
    /// Conversation rounds handed to need detection.
    pub rounds_forwarded: u64,
}

impl Default for EngineState {
    fn default() -> Self {
        Self::new(None)
    }
}

impl EngineState {
    pub fn new(user_id: Option<String>) -> Self {
        Self {
            last_seq: 0,
            profile: ProfileState::new(user_id),
            rules: RuleSet::new(),
            filter_log: FilterLog::default(),
            sessions: BTreeMap::new(),
            actions: ActionLog::default(),
            rounds_forwarded: 0,
        }
    }

    pub fn next_session_id(&self) -> SessionId {
        SessionId(self.sessions.keys().next_back().map_or(1, |id| id.0 + 1))
    }

    pub fn session(&self, id: SessionId) -> Result<&ConversationSession, ConversationError> {
        self.sessions.get(&id).ok_or(ConversationError::UnknownSession(id))
    }

    pub fn apply(&mut self, event: &Event) -> Result<(), StateError> {
        let expected = self.last_seq + 1;
        if event.seq != expected {
            return Err(StateError::OutOfOrder { expected, got: event.seq });
        }
        match &event.payload {
            EventPayload::ImpressionIngested(outcome) => {
                self.profile.apply_ingest(outcome, RankParams::default())?;
            }
            EventPayload::FeedFiltered(outcome) => self.filter_log.apply(outcome),
            EventPayload::RuleChanged(op) => self.rules.apply(op)?,
            EventPayload::SessionOpened(session) => {
                if self.sessions.contains_key(&session.id) {
                    return Err(StateError::DuplicateSession(session.id));
                }
                self.sessions.insert(session.id, session.clone());
            }
            EventPayload::RoundRecorded(round) => {
                let session = self
                    .sessions
                    .get_mut(&round.session_id)
                    .ok_or(ConversationError::UnknownSession(round.session_id))?;
                session.check_message(&round.user_text)?;
                session.push_round(&round.user_text, round.user_at, &round.agent_text, round.agent_at);
                self.rounds_forwarded += 1;
                if let Some(action) = &round.action {
                    self.actions.propose(action.clone());
                }
            }
            EventPayload::SessionClosed { session_id } => {
                let session =
                    self.sessions.get_mut(session_id).ok_or(ConversationError::UnknownSession(*session_id))?;
                if session.status == SessionStatus::Closed {
                    return Err(ConversationError::SessionClosed(*session_id).into());
                }
                session.close();
            }
            EventPayload::ActionResolved(resolution) => self.actions.resolve(resolution, &mut self.rules)?,
        }
        self.last_seq = event.seq;
        Ok(())
    }
}
