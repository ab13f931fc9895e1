#![allow(dead_code)]

pub mod oracle;

use std::net::SocketAddr;
use std::sync::Arc;

use g4r_core::gateway::mock::EchoProvider;
use g4r_core::gateway::{ApiKey, CompletionProvider};
use g4r_core::{ChatEngine, EngineSettings, Store};
use g4r_server::{serve, AppState, ServerConfig};
use reqwest::StatusCode;
use serde_json::{json, Value};
use tokio::sync::oneshot;

pub struct TestServer {
    pub base: String,
    pub addr: SocketAddr,
    pub store: Arc<Store>,
    pub http: reqwest::Client,
    _shutdown: oneshot::Sender<()>,
}

pub struct Options {
    pub provider: Arc<dyn CompletionProvider>,
    pub default_api_key: Option<&'static str>,
    pub store: Option<Arc<Store>>,
    pub config: ServerConfig,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            provider: Arc::new(EchoProvider),
            default_api_key: Some("server-default-key"),
            store: None,
            config: ServerConfig {
                guest_create_limit: 0,
                ..ServerConfig::default()
            },
        }
    }
}

pub async fn start() -> TestServer {
    start_with(Options::default()).await
}

pub async fn start_with(opts: Options) -> TestServer {
    let store = opts
        .store
        .unwrap_or_else(|| Arc::new(Store::open_in_memory().unwrap()));
    let engine = Arc::new(ChatEngine::new(
        store.clone(),
        opts.provider,
        EngineSettings::new("gpt-test", opts.default_api_key.and_then(ApiKey::new)),
    ));
    let state = Arc::new(AppState::new(engine, opts.config));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = oneshot::channel::<()>();
    tokio::spawn(serve(listener, state, async move {
        let _ = rx.await;
    }));
    TestServer {
        base: format!("http://{addr}"),
        addr,
        store,
        http: reqwest::Client::new(),
        _shutdown: tx,
    }
}

pub struct Resp {
    pub status: StatusCode,
    pub headers: reqwest::header::HeaderMap,
    pub text: String,
}

impl Resp {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.text)
            .unwrap_or_else(|e| panic!("not JSON ({e}): {}", self.text))
    }
}

impl TestServer {
    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    async fn finish(req: reqwest::RequestBuilder) -> Resp {
        let r = req.send().await.unwrap();
        Resp {
            status: r.status(),
            headers: r.headers().clone(),
            text: r.text().await.unwrap(),
        }
    }

    pub async fn get(&self, path: &str, token: Option<&str>) -> Resp {
        let mut req = self.http.get(self.url(path));
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        Self::finish(req).await
    }

    pub async fn post(&self, path: &str, token: Option<&str>, body: Value) -> Resp {
        let mut req = self.http.post(self.url(path)).json(&body);
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        Self::finish(req).await
    }

    pub async fn post_raw(&self, path: &str, headers: &[(&str, &str)], body: impl Into<reqwest::Body>) -> Resp {
        let mut req = self.http.post(self.url(path)).body(body);
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        Self::finish(req).await
    }

    /// Creates an account and returns a bearer token for it.
    pub async fn researcher(&self, email: &str) -> String {
        let password = "correct horse battery";
        let r = self
            .post(
                "/api/accounts",
                None,
                json!({"display_name": "Researcher", "email": email, "password": password}),
            )
            .await;
        assert_eq!(r.status, StatusCode::CREATED, "{}", r.text);
        let r = self
            .post("/api/signin", None, json!({"email": email, "password": password}))
            .await;
        assert_eq!(r.status, StatusCode::OK, "{}", r.text);
        r.json()["token"].as_str().unwrap().to_owned()
    }

    /// Creates an interface and returns `(interface_id, response body)`.
    pub async fn interface(&self, token: Option<&str>, body: Value) -> (String, Value) {
        let r = self.post("/api/interfaces", token, body).await;
        assert_eq!(r.status, StatusCode::CREATED, "{}", r.text);
        let v = r.json();
        (v["interface_id"].as_str().unwrap().to_owned(), v)
    }

    pub async fn session(&self, interface_id: &str, pid: &str) -> String {
        let r = self
            .post(
                &format!("/api/interfaces/{interface_id}/sessions"),
                None,
                json!({ "participant_id": pid }),
            )
            .await;
        assert_eq!(r.status, StatusCode::OK, "{}", r.text);
        r.json()["session_id"].as_str().unwrap().to_owned()
    }

    pub async fn send(&self, session_id: &str, text: &str) -> Resp {
        self.post(
            &format!("/api/sessions/{session_id}/messages"),
            None,
            json!({ "text": text }),
        )
        .await
    }
}
