//! Runs an EdgePier node as a service: the registry gateway on one socket,
//! the peer protocol on another, and a disk-backed block store.

pub mod client;
pub mod config;
mod gateway;
mod runtime;
mod transport;

use std::net::SocketAddr;
use std::sync::Arc;

use edgepier_core::cas::{Backend, DiskBackend, Store, StoreConfig};
use edgepier_core::node::{Node, NodeConfig};
use edgepier_core::CasError;
use log::info;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;

pub use client::{ClientError, PulledImage, RegistryClient};
pub use config::DaemonConfig;
pub use runtime::Status;

use runtime::{Actor, Cmd};
use transport::Outbound;

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error("config: {0}")]
    Config(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("store: {0}")]
    Store(#[from] CasError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("the node has stopped")]
    Stopped,
}

const PINSET_FILE: &str = "pinset";

/// A running node. Dropping it stops every task without saving state, as a
/// crash would; [`Daemon::shutdown`] stops it cleanly.
pub struct Daemon {
    http: SocketAddr,
    p2p: SocketAddr,
    cmds: mpsc::UnboundedSender<Cmd>,
    tasks: Vec<JoinHandle<()>>,
}

async fn bind(addr: SocketAddr) -> Result<TcpListener, DaemonError> {
    TcpListener::bind(addr)
        .await
        .map_err(|source| DaemonError::Bind { addr, source })
}

impl Daemon {
    pub async fn start(cfg: DaemonConfig) -> Result<Daemon, DaemonError> {
        let p2p = bind(cfg.p2p).await?;
        let http = bind(cfg.http).await?;
        let backend: Arc<dyn Backend> = Arc::new(DiskBackend::open(&cfg.store)?);
        let store = Arc::new(Store::open(
            backend,
            StoreConfig {
                chunk_size: cfg.chunk_size,
                capacity: cfg.cache_bytes,
            },
        )?);

        let me = cfg.addr();
        let mut ncfg = NodeConfig::new(me.clone());
        ncfg.origin = cfg.origin.clone();
        ncfg.members = cfg.members.clone();
        ncfg.replication = cfg.replication;
        ncfg.factor = cfg.factor;
        let mut node = Node::new(ncfg, store.clone());
        let pinset_path = cfg.store.join(PINSET_FILE);
        if let Some(saved) = runtime::load_pinset(&pinset_path)? {
            node.restore_pinset(&saved);
        }

        let (tx, rx) = mpsc::unbounded_channel();
        let out = Outbound::new(&me, tx.clone());
        let actor = Actor {
            node,
            me: me.clone(),
            out,
            cmds: tx.clone(),
            pinset_path,
        };
        let http_addr = http.local_addr()?;
        let p2p_addr = p2p.local_addr()?;
        let router = gateway::router(tx.clone(), store);
        let tasks = vec![
            tokio::spawn(actor.run(rx)),
            tokio::spawn(transport::accept_loop(p2p, tx.clone())),
            tokio::spawn(async move {
                if let Err(e) = axum::serve(http, router).await {
                    log::error!("gateway stopped: {e}");
                }
            }),
        ];
        info!("node {me} serving the registry on {http_addr}");
        Ok(Daemon {
            http: http_addr,
            p2p: p2p_addr,
            cmds: tx,
            tasks,
        })
    }

    pub fn http_addr(&self) -> SocketAddr {
        self.http
    }

    pub fn p2p_addr(&self) -> SocketAddr {
        self.p2p
    }

    pub fn client(&self) -> RegistryClient {
        RegistryClient::new(&self.http.to_string())
    }

    pub async fn status(&self) -> Result<Status, DaemonError> {
        let (tx, rx) = oneshot::channel();
        self.cmds.send(Cmd::Status(tx)).map_err(|_| DaemonError::Stopped)?;
        rx.await.map_err(|_| DaemonError::Stopped)
    }

    /// Saves the pinset and stops serving.
    pub async fn shutdown(mut self) {
        let (tx, rx) = oneshot::channel();
        if self.cmds.send(Cmd::Shutdown(tx)).is_ok() {
            let _ = rx.await;
        }
        self.release().await;
    }

    /// Stops every task without saving state, as a crash would, and waits
    /// until the sockets are released.
    pub async fn kill(mut self) {
        self.release().await;
    }

    async fn release(&mut self) {
        for t in self.tasks.drain(..) {
            t.abort();
            let _ = t.await;
        }
    }

    /// Serves until SIGINT or SIGTERM, then shuts down cleanly.
    pub async fn run_until_signal(self) -> Result<(), DaemonError> {
        wait_for_signal().await?;
        info!("signal received, shutting down");
        self.shutdown().await;
        Ok(())
    }

    fn abort(&mut self) {
        for t in self.tasks.drain(..) {
            t.abort();
        }
    }
}

impl Drop for Daemon {
    fn drop(&mut self) {
        self.abort();
    }
}

#[cfg(unix)]
async fn wait_for_signal() -> std::io::Result<()> {
    use tokio::signal::unix::{signal, SignalKind};
    let mut term = signal(SignalKind::terminate())?;
    tokio::select! {
        r = tokio::signal::ctrl_c() => r,
        _ = term.recv() => Ok(()),
    }
}

#[cfg(not(unix))]
async fn wait_for_signal() -> std::io::Result<()> {
    tokio::signal::ctrl_c().await
}
