//! HTTP service over voxprompt sessions.
//!
//! Each session sits behind its own async read/write lock: mutations are
//! applied one at a time in arrival order, reads share the lock. Heavy work
//! runs on the blocking pool so other sessions stay responsive.

pub mod config;
pub mod error;
pub mod render;
pub mod routes;
pub mod state;

use std::net::SocketAddr;
use std::time::{Duration, Instant};

pub use config::{ConfigError, ExternalBackendConfig, ServiceConfig};
pub use error::{ApiError, ErrorBody};
pub use routes::router;
pub use state::AppState;

/// Build the state for `config`, loading every configured backend.
pub fn app_state(config: ServiceConfig) -> Result<AppState, ConfigError> {
    let registry = config.build_registry()?;
    Ok(AppState::new(config, registry))
}

/// Serve until ctrl-c.
pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let state = app_state(config).map_err(std::io::Error::other)?;
    let sweeper = state.clone();
    let period = Duration::from_secs(sweeper.config().idle_timeout_secs.clamp(1, 60));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            sweeper.evict_idle(Instant::now());
        }
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
