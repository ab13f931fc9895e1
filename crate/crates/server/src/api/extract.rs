use std::net::{IpAddr, SocketAddr};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{ConnectInfo, FromRequest, FromRequestParts, Request};
use axum::http::header::{AUTHORIZATION, HOST};
use axum::http::request::Parts;
use axum::Json;
use g4r_core::ResearcherAccount;
use serde::de::DeserializeOwned;

use super::error::ApiError;
use super::AppState;

/// A signed-in researcher. Absent or bad credentials are rejected with 401.
pub struct Researcher(pub ResearcherAccount);

/// Optional sign-in: no `Authorization` header means guest, but a header
/// that is present and wrong is still a 401.
pub struct MaybeResearcher(pub Option<ResearcherAccount>);

fn bearer_token(parts: &Parts) -> Option<Result<&str, ApiError>> {
    let value = parts.headers.get(AUTHORIZATION)?;
    let token = value
        .to_str()
        .ok()
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim)
        .filter(|t| !t.is_empty());
    Some(token.ok_or(ApiError::Unauthorized))
}

fn resolve(state: &AppState, token: &str) -> Result<ResearcherAccount, ApiError> {
    state
        .store()
        .resolve_token(token)?
        .ok_or(ApiError::Unauthorized)
}

impl FromRequestParts<Arc<AppState>> for MaybeResearcher {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Arc<AppState>) -> Result<Self, ApiError> {
        match bearer_token(parts) {
            None => Ok(MaybeResearcher(None)),
            Some(token) => Ok(MaybeResearcher(Some(resolve(state, token?)?))),
        }
    }
}

impl FromRequestParts<Arc<AppState>> for Researcher {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Arc<AppState>) -> Result<Self, ApiError> {
        let token = bearer_token(parts).ok_or(ApiError::Unauthorized)??;
        Ok(Researcher(resolve(state, token)?))
    }
}

/// Address of the client, when known.
pub struct ClientIp(pub Option<IpAddr>);

impl FromRequestParts<Arc<AppState>> for ClientIp {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Arc<AppState>) -> Result<Self, ApiError> {
        if state.config.trust_proxy {
            let forwarded = parts
                .headers
                .get("x-forwarded-for")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.split(',').next())
                .and_then(|v| v.trim().parse().ok());
            if forwarded.is_some() {
                return Ok(ClientIp(forwarded));
            }
        }
        let peer = parts
            .extensions
            .get::<ConnectInfo<SocketAddr>>()
            .map(|ConnectInfo(addr)| addr.ip());
        Ok(ClientIp(peer))
    }
}

/// Base URL participants and survey pages should use to reach this service.
pub struct BaseUrl(pub String);

impl FromRequestParts<Arc<AppState>> for BaseUrl {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Arc<AppState>) -> Result<Self, ApiError> {
        if let Some(url) = &state.config.public_url {
            return Ok(BaseUrl(url.trim_end_matches('/').to_owned()));
        }
        let header = |name| parts.headers.get(name).and_then(|v| v.to_str().ok());
        let host = header(HOST.as_str())
            .or_else(|| parts.uri.authority().map(|a| a.as_str()))
            .ok_or_else(|| ApiError::Rejected {
                status: axum::http::StatusCode::BAD_REQUEST,
                message: "missing Host header".into(),
            })?;
        let scheme = state
            .config
            .trust_proxy
            .then(|| header("x-forwarded-proto"))
            .flatten()
            .filter(|s| *s == "https" || *s == "http")
            .unwrap_or("http");
        Ok(BaseUrl(format!("{scheme}://{host}")))
    }
}

/// `Json` whose rejections use the service's error body.
pub struct ApiJson<T>(pub T);

impl<T: DeserializeOwned, S: Send + Sync> FromRequest<S> for ApiJson<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(value)) => Ok(ApiJson(value)),
            Err(rejection) => Err(json_rejection(rejection)),
        }
    }
}

fn json_rejection(rejection: JsonRejection) -> ApiError {
    ApiError::Rejected {
        status: rejection.status(),
        message: rejection.body_text(),
    }
}
