//! Deterministic providers for tests, simulations and offline demos.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use async_trait::async_trait;

use super::{
    CompletionProvider, CompletionRequest, ProviderError, ProviderErrorKind, Role, WireRequest,
};

pub const ECHO_PREFIX: &str = "echo: ";

/// Replies with `"echo: "` followed by the content of the last user message.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoProvider;

impl EchoProvider {
    pub fn reply_for(request: &CompletionRequest) -> String {
        let last_user = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or_default();
        format!("{ECHO_PREFIX}{last_user}")
    }
}

#[async_trait]
impl CompletionProvider for EchoProvider {
    async fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        Ok(Self::reply_for(request))
    }
}

/// Records the wire payload of every request before delegating.
#[derive(Debug, Default)]
pub struct Capturing<P> {
    inner: P,
    captured: Mutex<Vec<WireRequest>>,
}

impl<P> Capturing<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            captured: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<WireRequest> {
        self.captured.lock().unwrap().clone()
    }
}

#[async_trait]
impl<P: CompletionProvider> CompletionProvider for Capturing<P> {
    async fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        self.captured.lock().unwrap().push(request.wire());
        self.inner.complete(request).await
    }
}

/// Fails the first `failures` calls with the given kind, then delegates.
#[derive(Debug)]
pub struct FailFirst<P> {
    inner: P,
    remaining: AtomicUsize,
    kind: ProviderErrorKind,
}

impl<P> FailFirst<P> {
    pub fn new(inner: P, failures: usize, kind: ProviderErrorKind) -> Self {
        Self {
            inner,
            remaining: AtomicUsize::new(failures),
            kind,
        }
    }
}

#[async_trait]
impl<P: CompletionProvider> CompletionProvider for FailFirst<P> {
    async fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        let failed = self
            .remaining
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if failed {
            return Err(ProviderError::new(self.kind, "injected failure"));
        }
        self.inner.complete(request).await
    }
}
