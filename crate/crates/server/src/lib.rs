//! HTTP service around `g4r-core`, plus the merge tooling and the
//! simulation harness used to check capture end to end.

pub mod api;
pub mod config;
pub mod sim;
pub mod tools;

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use g4r_core::store::GUEST_RETENTION_DAYS;

pub use api::{router, AppState};
pub use config::ServerConfig;

/// Serves until `shutdown` resolves. Also purges expired guest interfaces
/// in the background.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let store = state.store().clone();
    let purge = tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(6 * 3600));
        loop {
            tick.tick().await;
            let cutoff = chrono::Utc::now() - chrono::Duration::days(GUEST_RETENTION_DAYS);
            match store.purge_guest_interfaces(cutoff) {
                Ok(0) => {}
                Ok(n) => tracing::info!(purged = n, "removed expired guest interfaces"),
                Err(e) => tracing::warn!(error = %e, "guest purge failed"),
            }
        }
    });
    let app = router(state).into_make_service_with_connect_info::<SocketAddr>();
    let result = axum::serve(listener, app).with_graceful_shutdown(shutdown).await;
    purge.abort();
    result
}
