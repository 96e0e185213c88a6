//! Conversations that help the user notice what they would rather not see.
//!
//! A session opens with an agent message explaining either the preference
//! profile or the recent filter records. Every later round is one user
//! message followed by one agent reply.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::filter::FilterRecord;
use crate::graph::PreferenceProfile;
use crate::llm::templates::{self, NEEDS_REPLY_KEY};
use crate::llm::{ChatRequest, Gateway, GatewayError, Message};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub u64);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Strategy {
    /// Strategy 1: walk the user through their preference profile.
    ProfileExplanation,
    /// Strategy 2: walk the user through what was filtered recently.
    RecordExplanation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Speaker {
    Agent,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChatMessage {
    pub speaker: Speaker,
    pub text: String,
    pub timestamp: Timestamp,
}

/// One filtered item as shown to the user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RecordSummary {
    pub item_id: String,
    pub title: String,
    pub rule_text: String,
    pub rationale: String,
}

impl From<&FilterRecord> for RecordSummary {
    fn from(record: &FilterRecord) -> Self {
        Self {
            item_id: record.item_id.clone(),
            title: record.item.title.clone(),
            rule_text: record.rule_text.clone(),
            rationale: record.decision.rationale.clone(),
        }
    }
}

/// What a session is about, frozen when it opens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum ContextSnapshot {
    Profile { version: u64, profile: PreferenceProfile },
    Records { records: Vec<RecordSummary> },
}

impl ContextSnapshot {
    /// The records window: the `window` most recent records, newest first.
    pub fn records<'a>(records: impl DoubleEndedIterator<Item = &'a FilterRecord>, window: usize) -> Self {
        Self::Records { records: records.rev().take(window).map(RecordSummary::from).collect() }
    }

    pub fn strategy(&self) -> Strategy {
        match self {
            Self::Profile { .. } => Strategy::ProfileExplanation,
            Self::Records { .. } => Strategy::RecordExplanation,
        }
    }

    /// Text block describing the snapshot, shared by the opening message and
    /// the agent's prompt.
    pub fn describe(&self) -> String {
        match self {
            Self::Profile { profile, .. } if profile.is_empty() => {
                "No preference profile has been built yet because no browsing behavior has been recorded.".into()
            }
            Self::Profile { profile, .. } => {
                format!("Your preference profile, inferred from your browsing behavior:\n{}", profile.render_lines())
            }
            Self::Records { records } if records.is_empty() => "Nothing has been filtered yet.".into(),
            Self::Records { records } => {
                let lines: Vec<String> = records
                    .iter()
                    .enumerate()
                    .map(|(i, r)| {
                        format!(
                            "{}. \"{}\" was filtered by the rule \"{}\": {}",
                            i + 1,
                            r.title,
                            r.rule_text,
                            r.rationale
                        )
                    })
                    .collect();
                format!("Recently filtered content:\n{}", lines.join("\n"))
            }
        }
    }
}

pub fn opening_message(snapshot: &ContextSnapshot) -> String {
    let question = match snapshot {
        ContextSnapshot::Profile { .. } => {
            "Is there anything here, or anything else, that you would rather not see in your recommendations?"
        }
        ContextSnapshot::Records { .. } => {
            "Were any of these filtered by mistake, or is there anything else you would rather not see?"
        }
    };
    format!("{}\n\n{question}", snapshot.describe())
}

/// Agent reply used when the gateway cannot produce one.
pub const APOLOGY: &str = "Sorry, I could not come up with a reply just now. Could you say that again?";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum SessionStatus {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConversationError {
    #[error("session {0} is closed")]
    SessionClosed(SessionId),
    #[error("no session with id {0}")]
    UnknownSession(SessionId),
    #[error("message must not be empty")]
    EmptyMessage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConversationSession {
    pub id: SessionId,
    pub strategy: Strategy,
    pub messages: Vec<ChatMessage>,
    pub context_snapshot: ContextSnapshot,
    pub status: SessionStatus,
}

impl ConversationSession {
    pub fn open(id: SessionId, snapshot: ContextSnapshot, now: Timestamp) -> Self {
        Self {
            id,
            strategy: snapshot.strategy(),
            messages: vec![ChatMessage { speaker: Speaker::Agent, text: opening_message(&snapshot), timestamp: now }],
            context_snapshot: snapshot,
            status: SessionStatus::Open,
        }
    }

    /// Completed user rounds so far.
    pub fn rounds(&self) -> usize {
        (self.messages.len() - 1) / 2
    }

    pub fn last_timestamp(&self) -> Timestamp {
        self.messages.last().expect("sessions start with an opening message").timestamp
    }

    pub fn check_message(&self, text: &str) -> Result<(), ConversationError> {
        if self.status == SessionStatus::Closed {
            return Err(ConversationError::SessionClosed(self.id));
        }
        if text.trim().is_empty() {
            return Err(ConversationError::EmptyMessage);
        }
        Ok(())
    }

    /// Appends a completed round. Timestamps are clamped so they never go
    /// backwards.
    pub fn push_round(&mut self, user: &str, user_at: Timestamp, agent: &str, agent_at: Timestamp) {
        let user_at = user_at.max(self.last_timestamp());
        let agent_at = agent_at.max(user_at);
        self.messages.push(ChatMessage { speaker: Speaker::User, text: user.to_string(), timestamp: user_at });
        self.messages.push(ChatMessage { speaker: Speaker::Agent, text: agent.to_string(), timestamp: agent_at });
    }

    pub fn close(&mut self) {
        self.status = SessionStatus::Closed;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConversationConfig {
    pub platform: String,
    pub seed: u64,
    /// Records shown by Strategy 2.
    pub record_window: usize,
}

impl Default for ConversationConfig {
    fn default() -> Self {
        Self { platform: "Zhihu".to_string(), seed: 0, record_window: 50 }
    }
}

/// Builds the chat request for the agent's next reply.
pub fn reply_request(
    session: &ConversationSession,
    user_message: &str,
    current_profile: &PreferenceProfile,
    config: &ConversationConfig,
) -> ChatRequest {
    let profile = if current_profile.is_empty() { "(empty)".to_string() } else { current_profile.render_lines() };
    let context = session.context_snapshot.describe();
    let system = templates::NEEDS_CONTEXT
        .render(&[("platform", &config.platform), ("profile", &profile), ("context", &context)])
        .unwrap_or_else(|e| panic!("built-in template is incomplete: {e}"));
    let mut messages = vec![Message::system(system)];
    messages.extend(session.messages.iter().map(|m| match m.speaker {
        Speaker::Agent => Message::assistant(m.text.clone()),
        Speaker::User => Message::user(m.text.clone()),
    }));
    messages.push(Message::user(user_message));
    ChatRequest::from_messages(messages).with_script_key(NEEDS_REPLY_KEY).with_seed(config.seed)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentReply {
    pub text: String,
    /// Set when the gateway failed and [`APOLOGY`] was used.
    pub failure: Option<String>,
}

/// The agent's reply to `user_message`; gateway failures yield [`APOLOGY`].
pub fn respond(
    session: &ConversationSession,
    user_message: &str,
    current_profile: &PreferenceProfile,
    gateway: &Gateway,
    config: &ConversationConfig,
) -> Result<AgentReply, ConversationError> {
    session.check_message(user_message)?;
    let req = reply_request(session, user_message.trim(), current_profile, config);
    let result: Result<String, GatewayError> = gateway.complete(&req).map(|r| r.text.trim().to_string());
    Ok(match result {
        Ok(text) if !text.is_empty() => AgentReply { text, failure: None },
        Ok(_) => AgentReply { text: APOLOGY.to_string(), failure: Some("empty reply".into()) },
        Err(e) => {
            log::warn!("session {}: agent reply failed: {e}", session.id);
            AgentReply { text: APOLOGY.to_string(), failure: Some(e.to_string()) }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::t;
    use crate::llm::{FnBackend, GatewayError, ScriptEntry, ScriptedBackend};

    fn profile() -> PreferenceProfile {
        PreferenceProfile {
            very_liked: vec!["suspense".into(), "history".into()],
            fairly_liked: vec!["travel".into()],
            neutral: vec![],
            fairly_disliked: vec![],
            very_disliked: vec!["celebrity gossip".into()],
        }
    }

    #[test]
    fn profile_opening_lists_every_band_label() {
        let snap = ContextSnapshot::Profile { version: 3, profile: profile() };
        let s = ConversationSession::open(SessionId(1), snap, t(0));
        let text = &s.messages[0].text;
        for label in profile().labels() {
            assert!(text.contains(label), "{label}");
        }
        assert!(text.contains("Very liked: suspense, history"));
        assert!(text.contains("Neutral: \n"));
        assert_eq!(s.messages[0].speaker, Speaker::Agent);
        assert_eq!(s.strategy, Strategy::ProfileExplanation);
    }

    #[test]
    fn empty_snapshots_say_so() {
        let s = ConversationSession::open(
            SessionId(1),
            ContextSnapshot::Profile { version: 0, profile: PreferenceProfile::default() },
            t(0),
        );
        assert!(s.messages[0].text.starts_with("No preference profile has been built yet"));
        let s = ConversationSession::open(SessionId(2), ContextSnapshot::Records { records: vec![] }, t(0));
        assert!(s.messages[0].text.starts_with("Nothing has been filtered yet."));
    }

    #[test]
    fn record_opening_lists_items_and_rationales() {
        let records = vec![
            RecordSummary {
                item_id: "a".into(),
                title: "Ghost town".into(),
                rule_text: "no horror".into(),
                rationale: "it is scary".into(),
            },
            RecordSummary {
                item_id: "b".into(),
                title: "Star wed".into(),
                rule_text: "no gossip".into(),
                rationale: "celebrity news".into(),
            },
        ];
        let s = ConversationSession::open(SessionId(1), ContextSnapshot::Records { records }, t(0));
        let text = &s.messages[0].text;
        for needle in ["Ghost town", "it is scary", "Star wed", "celebrity news"] {
            assert!(text.contains(needle), "{needle}");
        }
    }

    #[test]
    fn respond_uses_script_and_transcript() {
        let gw = Gateway::new(ScriptedBackend::new(0).with_script(
            NEEDS_REPLY_KEY,
            vec![
                ScriptEntry::when(["horror"], ["Understood, you want to avoid horror."]),
                ScriptEntry::always("Tell me more."),
            ],
        ));
        let mut s =
            ConversationSession::open(SessionId(1), ContextSnapshot::Profile { version: 1, profile: profile() }, t(0));
        let cfg = ConversationConfig::default();
        let r = respond(&s, "hello", &profile(), &gw, &cfg).unwrap();
        assert_eq!(r.text, "Tell me more.");
        s.push_round("hello", t(1), &r.text, t(2));
        let r = respond(&s, "I hate horror stories", &profile(), &gw, &cfg).unwrap();
        assert_eq!(r.text, "Understood, you want to avoid horror.");
        s.push_round("I hate horror stories", t(3), &r.text, t(4));
        assert_eq!(s.messages.len(), 5);
        assert_eq!(s.rounds(), 2);

        let req = reply_request(&s, "next", &profile(), &cfg);
        assert_eq!(req.messages.len(), 7);
        assert!(req.messages[0].content.contains("Very disliked: celebrity gossip"));
    }

    #[test]
    fn gateway_failure_yields_apology() {
        let gw = Gateway::new(FnBackend::new("down", |_r: &ChatRequest| {
            Err(GatewayError::Transport { attempts: 4, message: "down".into() })
        }));
        let s = ConversationSession::open(SessionId(1), ContextSnapshot::Records { records: vec![] }, t(0));
        let r = respond(&s, "hi", &PreferenceProfile::default(), &gw, &ConversationConfig::default()).unwrap();
        assert_eq!(r.text, APOLOGY);
        assert!(r.failure.is_some());
    }

    #[test]
    fn closed_sessions_and_empty_messages_are_rejected() {
        let gw = Gateway::new(ScriptedBackend::new(0));
        let mut s = ConversationSession::open(SessionId(4), ContextSnapshot::Records { records: vec![] }, t(0));
        let cfg = ConversationConfig::default();
        assert_eq!(respond(&s, "  ", &PreferenceProfile::default(), &gw, &cfg), Err(ConversationError::EmptyMessage));
        s.close();
        assert_eq!(
            respond(&s, "hi", &PreferenceProfile::default(), &gw, &cfg),
            Err(ConversationError::SessionClosed(SessionId(4)))
        );
    }

    #[test]
    fn timestamps_never_go_backwards() {
        let mut s = ConversationSession::open(SessionId(1), ContextSnapshot::Records { records: vec![] }, t(10));
        s.push_round("a", t(5), "b", t(4));
        let times: Vec<_> = s.messages.iter().map(|m| m.timestamp).collect();
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
    }
}
