use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use g4r_core::snippet::generate_participant_id;
use g4r_core::{AccessMode, EngineError, InterfaceId};
use serde::Deserialize;

use super::chat::{WidgetBootstrap, WINDOW_TITLE};
use super::AppState;

pub const WIDGET_SCRIPT: &str = "/assets/chat-widget.js";
pub const WIDGET_STYLESHEET: &str = "/assets/chat-widget.css";

#[derive(Debug, Deserialize)]
pub struct EmbedQuery {
    pub pid: Option<String>,
}

pub fn escape_html(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

/// JSON that is safe inside a `<script>` element.
fn script_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value)
        .expect("bootstrap always serializes")
        .replace('<', "\\u003c")
}

/// The participant chat page. `top_html` is researcher markup and is
/// inserted as-is, and only for new-tab interfaces.
pub fn render_chat_page(bootstrap: &WidgetBootstrap, access_mode: AccessMode, participant_id: &str) -> String {
    let top = match (&bootstrap.top_html, access_mode) {
        (Some(html), AccessMode::NewTab) => format!("<header id=\"g4r-top\">{html}</header>\n"),
        _ => String::new(),
    };
    format!(
        r#"<!DOCTYPE html>
<html lang="en">
<head>
<meta charset="utf-8">
<meta name="viewport" content="width=device-width, initial-scale=1">
<title>{title}</title>
<link rel="stylesheet" href="{css}">
</head>
<body class="g4r-{mode}">
{top}<main id="g4r-chat" data-interface-id="{id}" data-participant-id="{pid}" data-access-mode="{mode}" data-participant-label="{plabel}" data-gpt-label="{glabel}"></main>
<noscript>This conversation needs JavaScript to be enabled.</noscript>
<script type="application/json" id="g4r-bootstrap">{json}</script>
<script src="{js}" defer></script>
</body>
</html>
"#,
        title = escape_html(&bootstrap.window_title),
        css = WIDGET_STYLESHEET,
        js = WIDGET_SCRIPT,
        mode = access_mode.as_str(),
        id = escape_html(bootstrap.interface_id.as_str()),
        pid = escape_html(participant_id),
        plabel = escape_html(&bootstrap.participant_label),
        glabel = escape_html(&bootstrap.gpt_label),
        json = script_json(bootstrap),
    )
}

fn not_found_page() -> Response {
    let body = format!(
        "<!DOCTYPE html>\n<html lang=\"en\"><head><meta charset=\"utf-8\"><title>{}</title></head>\
         <body><p>This conversation link is not valid.</p></body></html>\n",
        escape_html(WINDOW_TITLE)
    );
    (StatusCode::NOT_FOUND, Html(body)).into_response()
}

pub async fn chat_page(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(query): Query<EmbedQuery>,
) -> Response {
    let cfg = match state.engine.interface(&InterfaceId::from(id)) {
        Ok(cfg) => cfg,
        Err(EngineError::UnknownInterface) => return not_found_page(),
        Err(e) => return super::error::ApiError::from(e).into_response(),
    };
    let pid = query
        .pid
        .filter(|p| !p.trim().is_empty())
        .unwrap_or_else(generate_participant_id);
    let page = render_chat_page(&WidgetBootstrap::of(&cfg), cfg.settings.access_mode, &pid);
    (
        [(header::CACHE_CONTROL, "no-store")],
        Html(page),
    )
        .into_response()
}
