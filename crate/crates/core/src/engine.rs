//! The single-user engine: owns the state, the gateway and the event store,
//! and exposes one method per user-visible capability.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::actions::{self, ActionError, ActionId, ManagementAction};
use crate::clock::{Clock, Timestamp};
use crate::conversation::{
    self, ContextSnapshot, ConversationConfig, ConversationError, ConversationSession, SessionId, Strategy,
};
use crate::filter::{
    self, DecisionCache, FeedResult, FilterConfig, FilterError, FilterRule, RuleError, RuleId, RuleOp,
};
use crate::llm::Gateway;
use crate::profile::{Impression, IngestOutcome, Item, PerceiveMode, PipelineConfig, ProfileError};
use crate::state::{EngineState, Event, EventPayload, RoundRecorded, StateError};
use crate::store::{EventStore, StoreError, DEFAULT_SNAPSHOT_EVERY};

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub platform: String,
    pub master_seed: u64,
    /// Fixes the profile's owner up front; otherwise the first impression does.
    pub user_id: Option<String>,
    pub perceive_mode: PerceiveMode,
    pub filter_workers: usize,
    pub record_window: usize,
    pub snapshot_every: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            platform: "Zhihu".to_string(),
            master_seed: 0,
            user_id: None,
            perceive_mode: PerceiveMode::Personalized,
            filter_workers: 4,
            record_window: 50,
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
        }
    }
}

impl EngineConfig {
    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            platform: self.platform.clone(),
            perceive_mode: self.perceive_mode,
            seed: self.master_seed,
            ..PipelineConfig::default()
        }
    }

    pub fn filter(&self) -> FilterConfig {
        FilterConfig { platform: self.platform.clone(), seed: self.master_seed, workers: self.filter_workers }
    }

    pub fn conversation(&self) -> ConversationConfig {
        ConversationConfig {
            platform: self.platform.clone(),
            seed: self.master_seed,
            record_window: self.record_window,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Conversation(#[from] ConversationError),
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    State(#[from] StateError),
}

/// Result of one user message.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundResult {
    pub session: ConversationSession,
    pub round: RoundRecorded,
}

pub struct Engine {
    state: EngineState,
    store: Option<EventStore>,
    gateway: Gateway,
    clock: Arc<dyn Clock>,
    config: EngineConfig,
    cache: DecisionCache,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("last_seq", &self.state.last_seq)
            .field("gateway", &self.gateway)
            .field("config", &self.config)
            .finish()
    }
}

impl Engine {
    /// Opens a persistent engine over `dir`, replaying its log.
    pub fn open(
        dir: &Path,
        gateway: Gateway,
        clock: Arc<dyn Clock>,
        config: EngineConfig,
    ) -> Result<Self, EngineError> {
        let fresh = EngineState::new(config.user_id.clone());
        let (store, state) = EventStore::open(dir, fresh, config.snapshot_every)?;
        Ok(Self { state, store: Some(store), gateway, clock, config, cache: DecisionCache::new() })
    }

    /// An engine without persistence; events are applied but not written.
    pub fn in_memory(gateway: Gateway, clock: Arc<dyn Clock>, config: EngineConfig) -> Self {
        Self {
            state: EngineState::new(config.user_id.clone()),
            store: None,
            gateway,
            clock,
            config,
            cache: DecisionCache::new(),
        }
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn store(&self) -> Option<&EventStore> {
        self.store.as_ref()
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    fn commit(&mut self, at: Timestamp, payload: EventPayload) -> Result<Event, EngineError> {
        let event = match &mut self.store {
            Some(store) => store.append(at, payload)?,
            None => Event { seq: self.state.last_seq + 1, at, payload },
        };
        self.state.apply(&event)?;
        if let Some(store) = &self.store {
            store.maybe_snapshot(&self.state)?;
        }
        Ok(event)
    }

    /// Seeded RNG for one impression, derived from the master seed and its id.
    fn impression_rng(&self, impression_id: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.config.master_seed.to_le_bytes());
        hasher.update(impression_id.as_bytes());
        ChaCha8Rng::from_seed(hasher.finalize().into())
    }

    pub fn ingest_impression(&mut self, impression: &Impression) -> Result<IngestOutcome, EngineError> {
        let now = self.now();
        let mut rng = self.impression_rng(&impression.impression_id);
        let outcome =
            self.state.profile.prepare_ingest(impression, &self.gateway, &mut rng, &self.config.pipeline(), now)?;
        self.commit(now, EventPayload::ImpressionIngested(outcome.clone()))?;
        Ok(outcome)
    }

    pub fn filter_feed(&mut self, items: &[Item]) -> Result<FeedResult, EngineError> {
        let now = self.now();
        let result =
            filter::filter_feed(items, &self.state.rules, &self.gateway, &self.cache, &self.config.filter(), now)?;
        self.commit(now, EventPayload::FeedFiltered(result.outcome.clone()))?;
        Ok(result)
    }

    fn rule_op(&mut self, op: RuleOp, at: Timestamp) -> Result<FilterRule, EngineError> {
        self.state.rules.check(&op)?;
        let id = op.rule_id();
        let before = self.state.rules.get(id).cloned();
        self.commit(at, EventPayload::RuleChanged(op))?;
        Ok(self.state.rules.get(id).cloned().or(before).expect("rule existed or was created"))
    }

    pub fn create_rule(&mut self, text: &str) -> Result<FilterRule, EngineError> {
        let at = self.now();
        self.rule_op(RuleOp::Create { id: self.state.rules.next_id(), text: text.to_string(), at }, at)
    }

    pub fn edit_rule(&mut self, id: RuleId, text: &str) -> Result<FilterRule, EngineError> {
        let at = self.now();
        self.rule_op(RuleOp::Edit { id, text: text.to_string(), at }, at)
    }

    pub fn set_rule_active(&mut self, id: RuleId, active: bool) -> Result<FilterRule, EngineError> {
        let at = self.now();
        self.rule_op(RuleOp::SetActive { id, active, at }, at)
    }

    /// Returns the deleted rule.
    pub fn delete_rule(&mut self, id: RuleId) -> Result<FilterRule, EngineError> {
        let at = self.now();
        self.rule_op(RuleOp::Delete { id }, at)
    }

    /// Snapshot a new session of `strategy` would open with.
    pub fn snapshot_for(&self, strategy: Strategy) -> ContextSnapshot {
        match strategy {
            Strategy::ProfileExplanation => ContextSnapshot::Profile {
                version: self.state.profile.version,
                profile: self.state.profile.profile.clone(),
            },
            Strategy::RecordExplanation => {
                ContextSnapshot::records(self.state.filter_log.records.iter(), self.config.record_window)
            }
        }
    }

    pub fn open_session(&mut self, strategy: Strategy) -> Result<ConversationSession, EngineError> {
        let now = self.now();
        let session = ConversationSession::open(self.state.next_session_id(), self.snapshot_for(strategy), now);
        let id = session.id;
        self.commit(now, EventPayload::SessionOpened(session))?;
        Ok(self.state.sessions[&id].clone())
    }

    /// Runs one conversation round: agent reply, need detection and, when a
    /// need is found, an action proposal.
    pub fn send_message(&mut self, session_id: SessionId, text: &str) -> Result<RoundResult, EngineError> {
        let user_at = self.now();
        let session = self.state.session(session_id)?;
        let conv = self.config.conversation();
        let reply = conversation::respond(session, text, &self.state.profile.profile, &self.gateway, &conv)?;
        let agent_at = self.now();
        let round_no = session.rounds() as u32 + 1;
        let user_text = text.trim().to_string();
        let need = actions::detect_need(&user_text, &reply.text, session_id, round_no, &self.gateway, conv.seed);
        let action = match &need {
            Some(need) => {
                let id = self.state.actions.next_id();
                match actions::propose_action(id, need.clone(), &self.state.rules, &self.gateway, conv.seed, agent_at) {
                    Ok(action) => Some(action),
                    Err(e) => {
                        log::warn!("could not propose an action for session {session_id}: {e}");
                        None
                    }
                }
            }
            None => None,
        };
        let round = RoundRecorded {
            session_id,
            user_text,
            user_at,
            agent_text: reply.text,
            agent_at,
            reply_failure: reply.failure,
            need,
            action,
        };
        self.commit(agent_at, EventPayload::RoundRecorded(round.clone()))?;
        Ok(RoundResult { session: self.state.sessions[&session_id].clone(), round })
    }

    pub fn close_session(&mut self, session_id: SessionId) -> Result<ConversationSession, EngineError> {
        let session = self.state.session(session_id)?;
        session.check_message("close")?;
        let now = self.now();
        self.commit(now, EventPayload::SessionClosed { session_id })?;
        Ok(self.state.sessions[&session_id].clone())
    }

    pub fn pending_actions(&self) -> Vec<ManagementAction> {
        self.state.actions.pending().cloned().collect()
    }

    pub fn resolve_action(
        &mut self,
        id: ActionId,
        edited_text: Option<&str>,
        confirmed: bool,
    ) -> Result<ManagementAction, EngineError> {
        let action = self.state.actions.get(id).ok_or(ActionError::UnknownAction(id))?;
        let now = self.now();
        let resolution = actions::resolve_action(&self.state.rules, action, edited_text, confirmed, now)?;
        self.commit(now, EventPayload::ActionResolved(resolution))?;
        Ok(self.state.actions.get(id).cloned().expect("action exists"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::LogicalClock;
    use crate::llm::templates::{self, NEEDS_REPLY_KEY};
    use crate::llm::{ScriptEntry, ScriptedBackend};
    use crate::profile::DisplayedItem;

    fn gateway() -> Gateway {
        Gateway::new(
            ScriptedBackend::new(1)
                .with_script(templates::PERCEIVE.id, vec![ScriptEntry::always("reasons")])
                .with_script(
                    templates::SUMMARY.id,
                    vec![
                        ScriptEntry::when(["has not interacted"], [r#"{"features":["gossip"]}"#]),
                        ScriptEntry::always(r#"{"features":["history"]}"#),
                    ],
                )
                .with_script(templates::REFLECT_MERGE.id, vec![ScriptEntry::always(r#"{"merge": false}"#)])
                .with_script(NEEDS_REPLY_KEY, vec![ScriptEntry::always("Noted.")])
                .with_script(
                    templates::NEED_DETECTION.id,
                    vec![
                        ScriptEntry::when(["gossip"], [r#"{"need": "I do not want to see celebrity gossip"}"#]),
                        ScriptEntry::always(r#"{"need": null}"#),
                    ],
                )
                .with_script(templates::FILTER_ITEM_TOPICS.id, vec![ScriptEntry::always(r#"{"topics":["x"]}"#)])
                .with_script(templates::FILTER_RULE_TOPICS.id, vec![ScriptEntry::always(r#"{"topics":["y"]}"#)])
                .with_script(
                    templates::FILTER_VERDICT.id,
                    vec![
                        ScriptEntry::when(["star", "gossip"], [r#"{"filter": true, "reason": "gossip"}"#]),
                        ScriptEntry::always(r#"{"filter": false}"#),
                    ],
                ),
        )
    }

    fn engine() -> Engine {
        Engine::in_memory(gateway(), Arc::new(LogicalClock::starting_2024()), EngineConfig::default())
    }

    fn impression(id: &str) -> Impression {
        Impression {
            impression_id: id.into(),
            user_id: "u".into(),
            timestamp: LogicalClock::starting_2024().now(),
            displayed: vec![
                DisplayedItem { item: Item::new("a", "Ming dynasty"), clicked: true },
                DisplayedItem { item: Item::new("b", "Star wedding"), clicked: false },
            ],
        }
    }

    #[test]
    fn conversation_to_confirmed_rule_to_filtering() {
        let mut e = engine();
        e.ingest_impression(&impression("i1")).unwrap();
        assert_eq!(e.state().profile.profile.len(), 2);

        let s = e.open_session(Strategy::ProfileExplanation).unwrap();
        assert!(s.messages[0].text.contains("history"));
        let r = e.send_message(s.id, "the weather is nice").unwrap();
        assert!(r.round.need.is_none());
        let r = e.send_message(s.id, "I am tired of celebrity gossip").unwrap();
        let action = r.round.action.unwrap();
        assert_eq!(r.session.messages.len(), 5);
        assert_eq!(e.state().rounds_forwarded, 2);
        assert_eq!(e.pending_actions().len(), 1);

        let done = e.resolve_action(action.id, None, true).unwrap();
        assert_eq!(done.rule_id, Some(RuleId(1)));
        assert!(e.pending_actions().is_empty());

        let feed = vec![Item::new("1", "Star gossip"), Item::new("2", "Ming dynasty")];
        let res = e.filter_feed(&feed).unwrap();
        assert_eq!(res.outcome.kept, vec!["2"]);
        let s2 = e.open_session(Strategy::RecordExplanation).unwrap();
        assert!(s2.messages[0].text.contains("Star gossip"));
    }

    #[test]
    fn rule_crud_goes_through_events() {
        let mut e = engine();
        let r = e.create_rule("no ads").unwrap();
        e.edit_rule(r.id, "no ads at all").unwrap();
        e.set_rule_active(r.id, false).unwrap();
        let deleted = e.delete_rule(r.id).unwrap();
        assert_eq!(deleted.version, 2);
        assert!(matches!(e.delete_rule(r.id), Err(EngineError::Rule(RuleError::UnknownRule(_)))));
        assert_eq!(e.state().last_seq, 4);
        assert!(matches!(e.create_rule(" "), Err(EngineError::Rule(RuleError::EmptyText))));
        assert_eq!(e.state().last_seq, 4);
    }

    #[test]
    fn persistent_engine_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let open = || {
            Engine::open(dir.path(), gateway(), Arc::new(LogicalClock::starting_2024()), EngineConfig::default())
                .unwrap()
        };
        let mut e = open();
        e.ingest_impression(&impression("i1")).unwrap();
        e.create_rule("no celebrity gossip").unwrap();
        e.filter_feed(&[Item::new("1", "Star gossip")]).unwrap();
        let live = e.state().clone();
        drop(e);
        assert_eq!(open().state(), &live);
    }

    #[test]
    fn duplicate_impression_writes_no_event() {
        let mut e = engine();
        e.ingest_impression(&impression("i1")).unwrap();
        let before = e.state().clone();
        assert!(matches!(
            e.ingest_impression(&impression("i1")),
            Err(EngineError::Profile(ProfileError::DuplicateImpression(_)))
        ));
        assert_eq!(e.state(), &before);
    }
}
