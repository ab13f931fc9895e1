//! HTTP surface: researcher endpoints, participant chat endpoints, the
//! participant chat page and static assets.

mod chat;
mod embed;
mod error;
mod extract;
mod researcher;

use std::collections::{HashMap, VecDeque};
use std::net::IpAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{DefaultBodyLimit, Path};
use axum::http::header;
use axum::response::{IntoResponse, Response};
use axum::routing::{any, get, post};
use axum::Router;
use g4r_core::{ChatEngine, Store};
use tower_http::services::{ServeDir, ServeFile};

use crate::config::ServerConfig;

pub use chat::{SessionView, TranscriptEntry, WidgetBootstrap, WINDOW_TITLE};
pub use error::ApiError;
pub use researcher::{CreatedInterface, InterfaceDetails, API_KEY_MASK};

/// Request bodies larger than this are refused with 413.
pub const BODY_LIMIT_BYTES: usize = 32 * 1024;

pub struct AppState {
    pub engine: Arc<ChatEngine>,
    pub config: ServerConfig,
    guest_limiter: GuestLimiter,
}

impl AppState {
    pub fn new(engine: Arc<ChatEngine>, config: ServerConfig) -> Self {
        let guest_limiter = GuestLimiter::new(config.guest_create_limit, Duration::from_secs(86_400));
        Self {
            engine,
            config,
            guest_limiter,
        }
    }

    pub fn store(&self) -> &Arc<Store> {
        self.engine.store()
    }
}

/// Sliding-window count of guest creations per client address.
struct GuestLimiter {
    limit: u32,
    window: Duration,
    hits: Mutex<HashMap<IpAddr, VecDeque<Instant>>>,
}

impl GuestLimiter {
    fn new(limit: u32, window: Duration) -> Self {
        Self {
            limit,
            window,
            hits: Mutex::new(HashMap::new()),
        }
    }

    fn allow(&self, ip: Option<IpAddr>) -> bool {
        let Some(ip) = ip else { return true };
        if self.limit == 0 {
            return true;
        }
        let now = Instant::now();
        let mut hits = self.hits.lock().unwrap();
        hits.retain(|_, q| {
            while q.front().is_some_and(|t| now.duration_since(*t) >= self.window) {
                q.pop_front();
            }
            !q.is_empty()
        });
        let q = hits.entry(ip).or_default();
        if q.len() as u32 >= self.limit {
            return false;
        }
        q.push_back(now);
        true
    }
}

/// Example downloads linked from the researcher home page.
const SAMPLES: [(&str, &str); 3] = [
    ("sample_messages.csv", include_str!("../../../../samples/sample_messages.csv")),
    ("sample_survey.csv", include_str!("../../../../samples/sample_survey.csv")),
    ("sample_merged.csv", include_str!("../../../../samples/sample_merged.csv")),
];

async fn sample_file(Path(name): Path<String>) -> Result<Response, ApiError> {
    let (_, text) = SAMPLES
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or(ApiError::NotFound)?;
    let disposition = format!("attachment; filename=\"{name}\"");
    Ok((
        [
            (header::CONTENT_TYPE, "text/csv; charset=utf-8".to_owned()),
            (header::CONTENT_DISPOSITION, disposition),
        ],
        *text,
    )
        .into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/api/defaults", get(researcher::defaults))
        .route("/api/accounts", post(researcher::create_account))
        .route("/api/signin", post(researcher::sign_in))
        .route("/api/researcher/interfaces", get(researcher::list_interfaces))
        .route("/api/interfaces", post(researcher::create_interface))
        .route("/api/interfaces/{id}", get(researcher::get_interface))
        .route("/api/interfaces/{id}/snippet", get(researcher::snippet))
        .route("/api/interfaces/{id}/messages.csv", get(researcher::download))
        .route("/api/interfaces/{id}/bootstrap", get(chat::bootstrap))
        .route("/api/interfaces/{id}/sessions", post(chat::open_session))
        .route("/api/sessions/{sid}/messages", post(chat::send_message))
        .route("/api/{*rest}", any(|| async { ApiError::NotFound }))
        .route("/embed/{id}", get(embed::chat_page))
        .route("/samples/{name}", get(sample_file));

    let mut app = api;
    if let Some(dir) = &state.config.web_dir {
        app = app.nest_service("/assets", ServeDir::new(dir.join("assets"))).fallback_service(
            ServeDir::new(dir).not_found_service(ServeFile::new(dir.join("index.html"))),
        );
    }
    app.layer(DefaultBodyLimit::max(BODY_LIMIT_BYTES))
        .with_state(state)
}
