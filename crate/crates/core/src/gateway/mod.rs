//! Upstream chat-completion providers.
//!
//! [`OpenAiClient`] speaks the OpenAI-compatible `/chat/completions` contract.
//! The [`mock`] module holds deterministic providers for tests and demos.

use std::fmt;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::InterfaceSettings;

pub mod mock;
mod openai;

pub use openai::{OpenAiClient, DEFAULT_BASE_URL};

pub const DEFAULT_MODEL_ID: &str = "gpt-4o-mini";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    Assistant,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpstreamMessage {
    pub role: Role,
    pub content: String,
}

impl UpstreamMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

/// Upstream credential. Never printed, never serialized.
#[derive(Clone, PartialEq, Eq)]
pub struct ApiKey(String);

impl ApiKey {
    pub fn new(key: impl Into<String>) -> Option<Self> {
        let key = key.into();
        (!key.trim().is_empty()).then_some(Self(key))
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiKey(***)")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no API key configured for this interface and no server default")]
pub struct MissingKey;

/// The interface's own key wins; otherwise the server default.
pub fn resolve_api_key(
    settings: &InterfaceSettings,
    server_default: Option<&ApiKey>,
) -> Result<ApiKey, MissingKey> {
    settings
        .api_key
        .as_deref()
        .and_then(ApiKey::new)
        .or_else(|| server_default.cloned())
        .ok_or(MissingKey)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub model_id: String,
    pub messages: Vec<UpstreamMessage>,
    pub temperature: f64,
    pub api_key: ApiKey,
}

/// JSON body sent to `/chat/completions`. The key travels only in the
/// `Authorization` header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub model: String,
    pub messages: Vec<UpstreamMessage>,
    pub temperature: f64,
}

impl CompletionRequest {
    pub fn wire(&self) -> WireRequest {
        WireRequest {
            model: self.model_id.clone(),
            messages: self.messages.clone(),
            temperature: self.temperature,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderErrorKind {
    Auth,
    RateLimited,
    Timeout,
    Malformed,
    /// Connection failures and 5xx responses.
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("upstream provider error ({kind:?}): {detail}")]
pub struct ProviderError {
    pub kind: ProviderErrorKind,
    pub detail: String,
}

impl ProviderError {
    pub fn new(kind: ProviderErrorKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
        }
    }
}

#[async_trait]
pub trait CompletionProvider: Send + Sync {
    /// Returns the content of the first choice's assistant message.
    async fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError>;
}

#[async_trait]
impl<P: CompletionProvider + ?Sized> CompletionProvider for std::sync::Arc<P> {
    async fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        (**self).complete(request).await
    }
}
