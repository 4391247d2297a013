//! HTTP service of the peer-testing platform: authentication, persistence,
//! the permission-checked operations, and the run queue feeding the
//! sandboxed execution harness.

pub mod api;
pub mod auth;
pub mod blobs;
pub mod config;
pub mod error;
pub mod platform;
pub mod queue;
pub mod store;

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use anyhow::Context;
use tokio::sync::oneshot;

pub use config::ServerConfig;
pub use platform::Platform;

/// A running service. Dropping it without [`Server::shutdown`] leaves the
/// threads running until the process exits.
pub struct Server {
    addr: SocketAddr,
    platform: Arc<Platform>,
    stop: Option<oneshot::Sender<()>>,
    http: Option<JoinHandle<anyhow::Result<()>>>,
    workers: Option<queue::Workers>,
}

impl Server {
    /// Opens storage, recovers the run queue, starts workers and binds the
    /// listener. Every startup problem is reported here.
    pub fn start(config: ServerConfig) -> anyhow::Result<Self> {
        let platform = Arc::new(Platform::new(config.clone())?);
        let listener = std::net::TcpListener::bind(config.bind)
            .with_context(|| format!("cannot bind {}", config.bind))?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let workers = queue::Workers::start(platform.clone())?;

        let (stop, stopped) = oneshot::channel::<()>();
        let app = api::router(platform.clone());
        let http = std::thread::Builder::new()
            .name("http".into())
            .spawn(move || {
                let runtime = tokio::runtime::Builder::new_multi_thread()
                    .enable_all()
                    .thread_name("http-worker")
                    .build()?;
                runtime.block_on(async move {
                    let listener = tokio::net::TcpListener::from_std(listener)?;
                    axum::serve(listener, app)
                        .with_graceful_shutdown(async {
                            let _ = stopped.await;
                        })
                        .await?;
                    Ok(())
                })
            })?;
        tracing::info!("listening on {addr}");
        Ok(Self {
            addr,
            platform,
            stop: Some(stop),
            http: Some(http),
            workers: Some(workers),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn platform(&self) -> &Arc<Platform> {
        &self.platform
    }

    /// Stops accepting requests, lets in-flight requests and runs finish,
    /// and leaves queued runs for the next start.
    pub fn shutdown(mut self) -> anyhow::Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        let result = match self.http.take() {
            Some(h) => h
                .join()
                .map_err(|_| anyhow::anyhow!("http thread panicked"))?,
            None => Ok(()),
        };
        if let Some(w) = self.workers.take() {
            w.shutdown(&self.platform);
        }
        result
    }
}
