use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use chrono::{DateTime, Utc};
use g4r_core::export::{export_csv, export_rows};
use g4r_core::model::{
    guest_study_name, LABEL_MAX_CHARS, MAX_MESSAGES_LIMIT, STUDY_NAME_MAX_CHARS, TEMPERATURE_MAX,
    TEMPERATURE_MIN,
};
use g4r_core::snippet::{embed_url, generate_participant_id, generate_snippet, SnippetTemplate};
use g4r_core::{
    apply_defaults, AccessMode, InterfaceConfig, InterfaceId, InterfaceSettings, PartialSettings,
    ResearcherAccount,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::error::ApiError;
use super::extract::{ApiJson, BaseUrl, ClientIp, MaybeResearcher, Researcher};
use super::AppState;

/// Shown in place of a stored API key.
pub const API_KEY_MASK: &str = "********";

/// Every effective setting of an interface, for the researcher who made it.
/// The API key is never echoed back, only whether one is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterfaceDetails {
    pub interface_id: InterfaceId,
    pub created_at: DateTime<Utc>,
    pub study_name: String,
    pub access_mode: AccessMode,
    pub max_messages: i64,
    pub participant_label: String,
    pub gpt_label: String,
    pub system_prompt: Option<String>,
    pub first_message: Option<String>,
    pub temperature: f64,
    /// Temperature exactly as entered, e.g. `"1.0"`.
    pub temperature_text: String,
    pub prepend_text: Option<String>,
    pub append_text: Option<String>,
    pub api_key: Option<String>,
    pub top_html: Option<String>,
}

impl InterfaceDetails {
    pub fn of(cfg: &InterfaceConfig) -> Self {
        let s = &cfg.settings;
        Self {
            interface_id: cfg.interface_id.clone(),
            created_at: cfg.created_at,
            study_name: s.study_name.clone(),
            access_mode: s.access_mode,
            max_messages: s.max_messages,
            participant_label: s.participant_label.clone(),
            gpt_label: s.gpt_label.clone(),
            system_prompt: s.system_prompt.clone(),
            first_message: s.first_message.clone(),
            temperature: s.temperature.value(),
            temperature_text: s.temperature.as_entered().to_owned(),
            prepend_text: s.prepend_text.clone(),
            append_text: s.append_text.clone(),
            api_key: s.api_key.as_ref().map(|_| API_KEY_MASK.to_owned()),
            top_html: s.top_html.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreatedInterface {
    pub interface_id: InterfaceId,
    /// Chat page with a fresh participant id, for the researcher to try.
    pub preview_url: String,
    pub snippet_text: String,
    /// Present for interfaces owned by an account.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub download_url: Option<String>,
    pub details: InterfaceDetails,
}

fn download_path(id: &InterfaceId) -> String {
    format!("/api/interfaces/{id}/messages.csv")
}

fn describe(cfg: &InterfaceConfig, base_url: &str) -> Result<CreatedInterface, ApiError> {
    let template = SnippetTemplate::new(cfg.interface_id.clone(), cfg.settings.access_mode, base_url)
        .map_err(|e| ApiError::Rejected {
            status: StatusCode::BAD_REQUEST,
            message: e.to_string(),
        })?;
    Ok(CreatedInterface {
        interface_id: cfg.interface_id.clone(),
        preview_url: embed_url(base_url, &cfg.interface_id, &generate_participant_id()),
        snippet_text: generate_snippet(&template),
        download_url: cfg.owner_id.as_ref().map(|_| download_path(&cfg.interface_id)),
        details: InterfaceDetails::of(cfg),
    })
}

pub async fn defaults() -> Json<Value> {
    Json(json!({
        "defaults": InterfaceSettings::default(),
        "limits": {
            "study_name_max_chars": STUDY_NAME_MAX_CHARS,
            "label_max_chars": LABEL_MAX_CHARS,
            "max_messages_min": 0,
            "max_messages_max": MAX_MESSAGES_LIMIT,
            "temperature_min": TEMPERATURE_MIN,
            "temperature_max": TEMPERATURE_MAX,
        },
    }))
}

#[derive(Debug, Deserialize)]
pub struct NewAccount {
    #[serde(alias = "name")]
    pub display_name: String,
    pub email: String,
    pub password: String,
}

pub async fn create_account(
    State(state): State<Arc<AppState>>,
    ApiJson(req): ApiJson<NewAccount>,
) -> Result<(StatusCode, Json<ResearcherAccount>), ApiError> {
    let store = state.store().clone();
    // password hashing is deliberately slow; keep it off the async workers
    let account = tokio::task::spawn_blocking(move || {
        store.create_account(&req.display_name, &req.email, &req.password)
    })
    .await
    .map_err(ApiError::internal)??;
    Ok((StatusCode::CREATED, Json(account)))
}

#[derive(Debug, Deserialize)]
pub struct SignIn {
    pub email: String,
    pub password: String,
}

#[derive(Debug, Serialize)]
pub struct SignedIn {
    pub token: String,
    pub expires_at: DateTime<Utc>,
    pub researcher: ResearcherAccount,
}

pub async fn sign_in(
    State(state): State<Arc<AppState>>,
    ApiJson(req): ApiJson<SignIn>,
) -> Result<Json<SignedIn>, ApiError> {
    let store = state.store().clone();
    let ttl = state.config.token_ttl;
    let signed_in = tokio::task::spawn_blocking(move || {
        let researcher = store.verify_credentials(&req.email, &req.password)?;
        let (token, expires_at) = store.issue_token(&researcher.researcher_id, ttl)?;
        Ok::<_, ApiError>(SignedIn {
            token,
            expires_at,
            researcher,
        })
    })
    .await
    .map_err(ApiError::internal)??;
    Ok(Json(signed_in))
}

#[derive(Debug, Serialize)]
pub struct InterfaceListing {
    pub interface_id: InterfaceId,
    pub study_name: String,
    pub created_at: DateTime<Utc>,
    pub download_url: String,
}

pub async fn list_interfaces(
    State(state): State<Arc<AppState>>,
    Researcher(me): Researcher,
) -> Result<Json<Vec<InterfaceListing>>, ApiError> {
    let listing = state
        .store()
        .list_interfaces(&me.researcher_id)?
        .into_iter()
        .map(|s| InterfaceListing {
            download_url: download_path(&s.interface_id),
            interface_id: s.interface_id,
            study_name: s.study_name,
            created_at: s.created_at,
        })
        .collect();
    Ok(Json(listing))
}

fn parse_settings(body: &[u8]) -> Result<PartialSettings, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(PartialSettings::default());
    }
    serde_json::from_slice(body).map_err(|e| {
        if e.is_data() {
            ApiError::unprocessable("invalid_field", e.to_string())
        } else {
            ApiError::Rejected {
                status: StatusCode::BAD_REQUEST,
                message: format!("request body is not valid JSON: {e}"),
            }
        }
    })
}

pub async fn create_interface(
    State(state): State<Arc<AppState>>,
    MaybeResearcher(me): MaybeResearcher,
    ClientIp(ip): ClientIp,
    BaseUrl(base_url): BaseUrl,
    body: Bytes,
) -> Result<(StatusCode, Json<CreatedInterface>), ApiError> {
    let partial = parse_settings(&body)?;
    let owner = me.map(|m| m.researcher_id);
    let mut cfg = InterfaceConfig::new(apply_defaults(partial), owner);
    if cfg.owner_id.is_none() {
        // guests never see the study name question
        if cfg.settings.study_name.is_empty() {
            cfg.settings.study_name = guest_study_name(cfg.created_at);
        }
    }
    cfg.settings = cfg.settings.validate().map_err(ApiError::Validation)?;
    if cfg.owner_id.is_none() && !state.guest_limiter.allow(ip) {
        return Err(ApiError::TooManyRequests);
    }
    state.store().save_interface(&cfg)?;
    tracing::info!(interface = %cfg.interface_id, guest = cfg.owner_id.is_none(), "interface created");
    Ok((StatusCode::CREATED, Json(describe(&cfg, &base_url)?)))
}

fn owned_interface(state: &AppState, me: &ResearcherAccount, id: &str) -> Result<InterfaceConfig, ApiError> {
    let cfg = state.store().get_interface(&InterfaceId::from(id))?;
    if cfg.owner_id.as_ref() != Some(&me.researcher_id) {
        return Err(ApiError::Forbidden);
    }
    Ok(cfg)
}

pub async fn get_interface(
    State(state): State<Arc<AppState>>,
    Researcher(me): Researcher,
    BaseUrl(base_url): BaseUrl,
    Path(id): Path<String>,
) -> Result<Json<CreatedInterface>, ApiError> {
    let cfg = owned_interface(&state, &me, &id)?;
    Ok(Json(describe(&cfg, &base_url)?))
}

pub async fn snippet(
    State(state): State<Arc<AppState>>,
    BaseUrl(base_url): BaseUrl,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let cfg = state.store().get_interface(&InterfaceId::from(id))?;
    let text = describe(&cfg, &base_url)?.snippet_text;
    Ok((
        [(header::CONTENT_TYPE, "text/plain; charset=utf-8")],
        text,
    )
        .into_response())
}

/// Lower-case ASCII letters and digits joined by single hyphens.
pub fn slug(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.is_empty() && !out.ends_with('-') {
            out.push('-');
        }
    }
    let trimmed = out.trim_end_matches('-');
    let mut slug: String = trimmed.chars().take(60).collect();
    while slug.ends_with('-') {
        slug.pop();
    }
    if slug.is_empty() {
        slug.push_str("study");
    }
    slug
}

pub async fn download(
    State(state): State<Arc<AppState>>,
    Researcher(me): Researcher,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let cfg = owned_interface(&state, &me, &id)?;
    let exchanges = state.store().fetch_exchanges(&cfg.interface_id)?;
    let csv = export_csv(&export_rows(&exchanges));
    let filename = format!("g4r-messages-{}.csv", slug(&cfg.settings.study_name));
    let disposition = HeaderValue::from_str(&format!("attachment; filename=\"{filename}\""))
        .map_err(ApiError::internal)?;
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("text/csv; charset=utf-8")),
            (header::CONTENT_DISPOSITION, disposition),
        ],
        csv,
    )
        .into_response())
}
