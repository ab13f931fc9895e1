//! Conversation relay: builds the upstream message list, enforces the
//! per-participant message cap and records each exchange.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::gateway::{
    resolve_api_key, ApiKey, CompletionProvider, CompletionRequest, MissingKey, ProviderError,
    UpstreamMessage,
};
use crate::model::{
    InterfaceConfig, InterfaceId, InterfaceSettings, MessageExchange, ParticipantSession,
    SessionId,
};
use crate::store::{NewExchange, Store, StoreError};

/// Shown to participants once their quota is used up.
pub const CAP_REACHED_MESSAGE: &str = "You have sent the maximum allowed messages";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown interface")]
    UnknownInterface,
    #[error("unknown session")]
    UnknownSession,
    #[error("participant id must not be empty")]
    EmptyParticipantId,
    #[error("message text must not be empty")]
    EmptyMessage,
    #[error("{CAP_REACHED_MESSAGE}")]
    CapReached,
    #[error("upstream failure: {0}")]
    Upstream(#[from] ProviderError),
    #[error(transparent)]
    MissingKey(#[from] MissingKey),
    #[error(transparent)]
    Store(StoreError),
}

impl EngineError {
    /// Failures after which the participant may simply try again; their
    /// quota was not touched.
    pub fn is_upstream(&self) -> bool {
        matches!(self, EngineError::Upstream(_) | EngineError::MissingKey(_))
    }
}

/// Prepend and append text around a participant message, one newline apart.
/// Absent parts contribute neither text nor separator.
pub fn wrap(settings: &InterfaceSettings, text: &str) -> String {
    let mut parts = Vec::with_capacity(3);
    if let Some(pre) = settings.prepend_text.as_deref() {
        parts.push(pre);
    }
    parts.push(text);
    if let Some(post) = settings.append_text.as_deref() {
        parts.push(post);
    }
    parts.join("\n")
}

/// The full upstream conversation for the next participant turn.
///
/// `[System]? [Assistant(first)]? (User, Assistant)* User`, with every user
/// turn wrapped.
pub fn compose_upstream(
    settings: &InterfaceSettings,
    history: &[MessageExchange],
    new_text: &str,
) -> Vec<UpstreamMessage> {
    let mut messages = Vec::with_capacity(history.len() * 2 + 3);
    if let Some(system) = &settings.system_prompt {
        messages.push(UpstreamMessage::system(system.clone()));
    }
    if let Some(first) = &settings.first_message {
        messages.push(UpstreamMessage::assistant(first.clone()));
    }
    for x in history {
        messages.push(UpstreamMessage::user(wrap(settings, &x.participant_message)));
        messages.push(UpstreamMessage::assistant(x.gpt_message.clone()));
    }
    messages.push(UpstreamMessage::user(wrap(settings, new_text)));
    messages
}

pub const REDACTION_MARKER: &str = "[redacted]";

/// Removes verbatim copies of the interface's hidden configuration (system
/// prompt, prepend/append text, API key) from a model reply, so that a model
/// repeating its instructions cannot reveal them to the participant.
pub fn redact_reply(settings: &InterfaceSettings, reply: &str) -> String {
    let mut secrets: Vec<&str> = [
        settings.system_prompt.as_deref(),
        settings.prepend_text.as_deref(),
        settings.append_text.as_deref(),
        settings.api_key.as_deref(),
    ]
    .into_iter()
    .flatten()
    .filter(|s| !s.trim().is_empty())
    .collect();
    // longest first so a secret containing another is removed whole
    secrets.sort_by_key(|s| std::cmp::Reverse(s.len()));
    let mut out = reply.to_owned();
    for secret in secrets {
        if out.contains(secret) {
            out = out.replace(secret, REDACTION_MARKER);
        }
    }
    out
}

pub fn remaining_quota(session: &ParticipantSession, settings: &InterfaceSettings) -> u32 {
    settings.message_cap().saturating_sub(session.messages_sent)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub exchange: MessageExchange,
    pub remaining: u32,
}

pub struct EngineSettings {
    pub model_id: String,
    pub default_api_key: Option<ApiKey>,
    /// Apply [`redact_reply`] before a reply is shown or stored. The
    /// unredacted reply is kept in the store's audit column either way.
    pub redact_replies: bool,
}

impl EngineSettings {
    pub fn new(model_id: impl Into<String>, default_api_key: Option<ApiKey>) -> Self {
        Self {
            model_id: model_id.into(),
            default_api_key,
            redact_replies: true,
        }
    }
}

pub struct ChatEngine {
    store: Arc<Store>,
    provider: Arc<dyn CompletionProvider>,
    settings: EngineSettings,
    // one in-flight send per session; other sends queue behind it
    session_locks: Mutex<HashMap<SessionId, Arc<tokio::sync::Mutex<()>>>>,
}

fn store_err(e: StoreError, not_found: EngineError) -> EngineError {
    match e {
        StoreError::NotFound => not_found,
        StoreError::EmptyParticipantId => EngineError::EmptyParticipantId,
        StoreError::CapReached(_) => EngineError::CapReached,
        other => EngineError::Store(other),
    }
}

impl ChatEngine {
    pub fn new(
        store: Arc<Store>,
        provider: Arc<dyn CompletionProvider>,
        settings: EngineSettings,
    ) -> Self {
        Self {
            store,
            provider,
            settings,
            session_locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn interface(&self, id: &InterfaceId) -> Result<InterfaceConfig, EngineError> {
        self.store
            .get_interface(id)
            .map_err(|e| store_err(e, EngineError::UnknownInterface))
    }

    /// Opens (or reopens) the session for one participant.
    pub fn start_session(
        &self,
        interface: &InterfaceId,
        participant_id: &str,
    ) -> Result<ParticipantSession, EngineError> {
        if participant_id.trim().is_empty() {
            return Err(EngineError::EmptyParticipantId);
        }
        self.store
            .open_session(interface, participant_id)
            .map_err(|e| store_err(e, EngineError::UnknownInterface))
    }

    pub fn session(
        &self,
        id: &SessionId,
    ) -> Result<(ParticipantSession, InterfaceConfig), EngineError> {
        let session = self
            .store
            .get_session(id)
            .map_err(|e| store_err(e, EngineError::UnknownSession))?;
        let cfg = self.interface(&session.interface_id)?;
        Ok((session, cfg))
    }

    fn lock_for(&self, id: &SessionId) -> Arc<tokio::sync::Mutex<()>> {
        self.session_locks
            .lock()
            .unwrap()
            .entry(id.clone())
            .or_default()
            .clone()
    }

    fn release(&self, id: &SessionId, lock: Arc<tokio::sync::Mutex<()>>) {
        let mut locks = self.session_locks.lock().unwrap();
        // the map and this caller are the only holders
        if Arc::strong_count(&lock) == 2 {
            locks.remove(id);
        }
    }

    /// Relays one participant message. On success the exchange is persisted
    /// with the raw participant text; on upstream failure nothing is stored
    /// and the quota is unchanged.
    pub async fn handle_participant_message(
        &self,
        session_id: &SessionId,
        text: &str,
    ) -> Result<Reply, EngineError> {
        if text.is_empty() {
            return Err(EngineError::EmptyMessage);
        }
        let lock = self.lock_for(session_id);
        let result = {
            let _guard = lock.lock().await;
            self.send_locked(session_id, text).await
        };
        self.release(session_id, lock);
        result
    }

    async fn send_locked(&self, session_id: &SessionId, text: &str) -> Result<Reply, EngineError> {
        let (session, cfg) = self.session(session_id)?;
        let settings = &cfg.settings;
        let cap = settings.message_cap();
        if session.messages_sent >= cap {
            return Err(EngineError::CapReached);
        }

        let history = self
            .store
            .session_history(session_id)
            .map_err(|e| store_err(e, EngineError::UnknownSession))?;
        let messages = compose_upstream(settings, &history, text);
        let upstream_text = messages
            .last()
            .map(|m| m.content.clone())
            .unwrap_or_default();
        let request = CompletionRequest {
            model_id: self.settings.model_id.clone(),
            messages,
            temperature: settings.temperature.value(),
            api_key: resolve_api_key(settings, self.settings.default_api_key.as_ref())?,
        };

        let raw_reply = self.provider.complete(&request).await.map_err(|e| {
            tracing::warn!(session = %session_id, kind = ?e.kind, "completion failed");
            e
        })?;
        let reply = if self.settings.redact_replies {
            redact_reply(settings, &raw_reply)
        } else {
            raw_reply.clone()
        };

        let exchange = self
            .store
            .record_exchange(
                session_id,
                NewExchange {
                    participant_message: text,
                    gpt_message: &reply,
                    upstream_text: Some(&upstream_text),
                    upstream_reply: Some(&raw_reply),
                },
                cap,
            )
            .map_err(|e| store_err(e, EngineError::UnknownSession))?;
        Ok(Reply {
            remaining: cap.saturating_sub(exchange.seq),
            exchange,
        })
    }
}
