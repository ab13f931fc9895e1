use std::path::PathBuf;

use chrono::Duration;

/// Guest interface creations allowed per client address in a rolling day.
pub const DEFAULT_GUEST_CREATE_LIMIT: u32 = 20;

/// Runtime settings for the HTTP layer. Storage and upstream settings live
/// with the engine.
#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Externally visible base URL used in snippets and preview links. When
    /// unset it is derived from the request's `Host` header.
    pub public_url: Option<String>,
    /// 0 disables the limit.
    pub guest_create_limit: u32,
    /// Honour `X-Forwarded-For` / `X-Forwarded-Proto` from a reverse proxy.
    pub trust_proxy: bool,
    pub token_ttl: Duration,
    /// Static files for the participant widget and researcher console.
    pub web_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            public_url: None,
            guest_create_limit: DEFAULT_GUEST_CREATE_LIMIT,
            trust_proxy: false,
            token_ttl: Duration::hours(24),
            web_dir: None,
        }
    }
}
