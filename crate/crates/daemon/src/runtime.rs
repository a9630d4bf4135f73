//! The task that owns a [`Node`] and feeds it wall-clock events.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use edgepier_core::gateway::{HttpRequest, HttpResponse};
use edgepier_core::node::{Env, Node, NodeMetrics, RequestId, Timer};
use edgepier_core::replication::PinsetState;
use edgepier_core::time::{Micros, Timestamp};
use edgepier_core::wire::Message;
use edgepier_core::ContentId;
use log::{info, warn};
use rand::RngCore;
use tokio::sync::mpsc::{UnboundedReceiver, UnboundedSender};
use tokio::sync::oneshot;

use crate::transport::Outbound;

pub(crate) enum Cmd {
    Peer { from: String, msg: Message },
    SendFailed { to: String, msg: Message },
    Timer(Timer),
    Http { req: HttpRequest, reply: oneshot::Sender<HttpResponse> },
    Status(oneshot::Sender<Status>),
    Shutdown(oneshot::Sender<()>),
}

/// A snapshot of what a running node holds.
#[derive(Debug, Clone)]
pub struct Status {
    pub pinned_images: Vec<ContentId>,
    pub metrics: NodeMetrics,
    pub stored_bytes: u64,
}

struct DaemonEnv<'a> {
    started: Instant,
    me: &'a str,
    out: &'a Outbound,
    cmds: &'a UnboundedSender<Cmd>,
    pending: &'a mut HashMap<RequestId, oneshot::Sender<HttpResponse>>,
}

impl Env for DaemonEnv<'_> {
    fn now(&self) -> Timestamp {
        self.started.elapsed().as_micros() as Timestamp
    }

    fn send(&mut self, to: &str, msg: Message) {
        if to == self.me {
            let _ = self.cmds.send(Cmd::Peer { from: to.to_string(), msg });
        } else {
            self.out.send(to, msg);
        }
    }

    fn set_timer(&mut self, delay: Micros, timer: Timer) {
        let cmds = self.cmds.clone();
        tokio::spawn(async move {
            tokio::time::sleep(Duration::from_micros(delay)).await;
            let _ = cmds.send(Cmd::Timer(timer));
        });
    }

    fn respond(&mut self, req: RequestId, resp: HttpResponse) {
        if let Some(tx) = self.pending.remove(&req) {
            let _ = tx.send(resp);
        }
    }

    fn random(&mut self) -> u64 {
        rand::rng().next_u64()
    }
}

pub(crate) struct Actor {
    pub node: Node,
    pub me: String,
    pub out: Outbound,
    pub cmds: UnboundedSender<Cmd>,
    pub pinset_path: PathBuf,
}

impl Actor {
    pub async fn run(mut self, mut rx: UnboundedReceiver<Cmd>) {
        let started = Instant::now();
        let mut pending = HashMap::new();
        let mut next_req: RequestId = 1;
        let mut saved = self.node.pinset().clone();
        macro_rules! env {
            () => {
                &mut DaemonEnv {
                    started,
                    me: &self.me,
                    out: &self.out,
                    cmds: &self.cmds,
                    pending: &mut pending,
                }
            };
        }
        self.node.start(env!());
        while let Some(cmd) = rx.recv().await {
            match cmd {
                Cmd::Peer { from, msg } => self.node.on_message(env!(), &from, msg),
                Cmd::SendFailed { to, msg } => self.node.on_send_failed(env!(), &to, &msg),
                Cmd::Timer(t) => self.node.on_timer(env!(), t),
                Cmd::Http { req, reply } => {
                    let id = next_req;
                    next_req += 1;
                    pending.insert(id, reply);
                    self.node.on_http(env!(), id, req);
                }
                Cmd::Status(tx) => {
                    let _ = tx.send(Status {
                        pinned_images: self.node.pinned_images(),
                        metrics: self.node.metrics(),
                        stored_bytes: self.node.store().stats().physical_bytes,
                    });
                }
                Cmd::Shutdown(done) => {
                    self.save(&mut saved);
                    self.out.close();
                    info!("{} stopped", self.me);
                    let _ = done.send(());
                    return;
                }
            }
            if self.node.pinset() != &saved {
                self.save(&mut saved);
            }
        }
    }

    fn save(&self, saved: &mut PinsetState) {
        let state = self.node.pinset().clone();
        match write_atomic(&self.pinset_path, &state.encode()) {
            Ok(()) => *saved = state,
            Err(e) => warn!("cannot save pinset to {}: {e}", self.pinset_path.display()),
        }
    }
}

fn write_atomic(path: &Path, data: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(data)?;
        f.sync_data()?;
    }
    fs::rename(tmp, path)
}

/// The pinset saved by a previous run, if any.
pub(crate) fn load_pinset(path: &Path) -> std::io::Result<Option<PinsetState>> {
    match fs::read(path) {
        Ok(b) => PinsetState::decode(&b)
            .map(Some)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}
