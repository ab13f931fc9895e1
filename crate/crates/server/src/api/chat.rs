use std::sync::Arc;

use axum::extract::{Path, State};
use axum::Json;
use chrono::{DateTime, Utc};
use g4r_core::engine::remaining_quota;
use g4r_core::{AccessMode, InterfaceConfig, InterfaceId, SessionId};
use serde::{Deserialize, Serialize};

use super::error::ApiError;
use super::extract::ApiJson;
use super::AppState;

pub const WINDOW_TITLE: &str = "ChatGPT Interface for Prolific Studies";

/// Everything the chat widget needs, and nothing a participant should not
/// see: no prompts, injections, key, study name or owner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WidgetBootstrap {
    pub interface_id: InterfaceId,
    pub participant_label: String,
    pub gpt_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_message: Option<String>,
    pub max_messages: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_html: Option<String>,
    pub window_title: String,
}

impl WidgetBootstrap {
    pub fn of(cfg: &InterfaceConfig) -> Self {
        let s = &cfg.settings;
        Self {
            interface_id: cfg.interface_id.clone(),
            participant_label: s.participant_label.clone(),
            gpt_label: s.gpt_label.clone(),
            first_message: s.first_message.clone(),
            max_messages: s.message_cap(),
            top_html: match s.access_mode {
                AccessMode::NewTab => s.top_html.clone(),
                AccessMode::Embedded => None,
            },
            window_title: WINDOW_TITLE.to_owned(),
        }
    }
}

pub async fn bootstrap(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<WidgetBootstrap>, ApiError> {
    let cfg = state.engine.interface(&InterfaceId::from(id))?;
    Ok(Json(WidgetBootstrap::of(&cfg)))
}

#[derive(Debug, Deserialize)]
pub struct OpenSession {
    pub participant_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: u32,
    pub participant_message: String,
    pub gpt_message: String,
    pub exchanged_at: DateTime<Utc>,
}

/// A participant's session, including what they already exchanged so a
/// reloaded page can redraw the conversation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: SessionId,
    pub participant_id: String,
    pub messages_sent: u32,
    pub remaining_quota: u32,
    pub transcript: Vec<TranscriptEntry>,
}

pub async fn open_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    ApiJson(req): ApiJson<OpenSession>,
) -> Result<Json<SessionView>, ApiError> {
    let interface = InterfaceId::from(id);
    let cfg = state.engine.interface(&interface)?;
    let session = state.engine.start_session(&interface, &req.participant_id)?;
    let transcript = state
        .store()
        .session_history(&session.session_id)?
        .into_iter()
        .map(|x| TranscriptEntry {
            seq: x.seq,
            participant_message: x.participant_message,
            gpt_message: x.gpt_message,
            exchanged_at: x.exchanged_at,
        })
        .collect();
    Ok(Json(SessionView {
        remaining_quota: remaining_quota(&session, &cfg.settings),
        session_id: session.session_id,
        participant_id: session.participant_id,
        messages_sent: session.messages_sent,
        transcript,
    }))
}

#[derive(Debug, Deserialize)]
pub struct SendMessage {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageReply {
    pub seq: u32,
    pub gpt_message: String,
    pub remaining_quota: u32,
}

pub async fn send_message(
    State(state): State<Arc<AppState>>,
    Path(sid): Path<String>,
    ApiJson(req): ApiJson<SendMessage>,
) -> Result<Json<MessageReply>, ApiError> {
    let reply = state
        .engine
        .handle_participant_message(&SessionId::from(sid), &req.text)
        .await?;
    Ok(Json(MessageReply {
        seq: reply.exchange.seq,
        gpt_message: reply.exchange.gpt_message,
        remaining_quota: reply.remaining,
    }))
}
