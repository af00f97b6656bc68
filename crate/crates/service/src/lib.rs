//! HTTP service behind the interactive model builder.

pub mod api;
pub mod error;
pub mod state;

use std::net::SocketAddr;

pub use api::router;
pub use state::AppState;

/// Serves the API on `listener` until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    let addr: SocketAddr = listener.local_addr()?;
    log::info!("listening on http://{addr}/api/v1");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
