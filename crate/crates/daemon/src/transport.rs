//! Peer connections over TCP.
//!
//! Each destination gets one outbound connection, opened lazily and greeted
//! with HELLO. Inbound connections are read-only: the first frame must be a
//! HELLO whose id matches its address, and everything after it is attributed
//! to that address. Replies travel over the receiver's own outbound
//! connection, so a pair of nodes talks over two sockets.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use edgepier_core::peer::PeerId;
use edgepier_core::wire::{FrameDecoder, Message};
use log::{debug, warn};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc::{self, UnboundedReceiver, UnboundedSender};

use crate::runtime::Cmd;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);
const READ_BUF: usize = 64 * 1024;

#[derive(Clone)]
pub(crate) struct Outbound {
    hello: Message,
    events: UnboundedSender<Cmd>,
    writers: Arc<Mutex<HashMap<String, UnboundedSender<Message>>>>,
}

impl Outbound {
    pub fn new(me: &str, events: UnboundedSender<Cmd>) -> Self {
        Outbound {
            hello: Message::Hello {
                peer: PeerId::from_addr(me),
                addr: me.to_string(),
            },
            events,
            writers: Arc::default(),
        }
    }

    pub fn send(&self, to: &str, msg: Message) {
        let mut writers = self.writers.lock().unwrap();
        let tx = writers.entry(to.to_string()).or_insert_with(|| {
            let (tx, rx) = mpsc::unbounded_channel();
            tokio::spawn(write_loop(
                to.to_string(),
                self.hello.clone(),
                rx,
                self.events.clone(),
            ));
            tx
        });
        if let Err(e) = tx.send(msg) {
            let _ = self.events.send(Cmd::SendFailed { to: to.to_string(), msg: e.0 });
        }
    }

    /// Closes every outbound connection.
    pub fn close(&self) {
        self.writers.lock().unwrap().clear();
    }
}

async fn connect(addr: &str, hello: &Message) -> std::io::Result<TcpStream> {
    let mut s = tokio::time::timeout(CONNECT_TIMEOUT, TcpStream::connect(addr))
        .await
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::TimedOut, "connect timed out"))??;
    s.set_nodelay(true)?;
    s.write_all(&hello.encode().map_err(std::io::Error::other)?).await?;
    Ok(s)
}

async fn write_loop(
    addr: String,
    hello: Message,
    mut rx: UnboundedReceiver<Message>,
    events: UnboundedSender<Cmd>,
) {
    let mut conn: Option<TcpStream> = None;
    while let Some(msg) = rx.recv().await {
        if conn.is_none() {
            match connect(&addr, &hello).await {
                Ok(s) => conn = Some(s),
                Err(e) => {
                    debug!("cannot reach {addr}: {e}");
                    let _ = events.send(Cmd::SendFailed { to: addr.clone(), msg });
                    while let Ok(m) = rx.try_recv() {
                        let _ = events.send(Cmd::SendFailed { to: addr.clone(), msg: m });
                    }
                    continue;
                }
            }
        }
        let frame = match msg.encode() {
            Ok(f) => f,
            Err(e) => {
                warn!("dropping unencodable message to {addr}: {e}");
                continue;
            }
        };
        let s = conn.as_mut().expect("connected above");
        if let Err(e) = s.write_all(&frame).await {
            debug!("write to {addr} failed: {e}");
            conn = None;
            let _ = events.send(Cmd::SendFailed { to: addr.clone(), msg });
        }
    }
}

pub(crate) async fn accept_loop(listener: TcpListener, events: UnboundedSender<Cmd>) {
    loop {
        match listener.accept().await {
            Ok((s, remote)) => {
                let events = events.clone();
                tokio::spawn(async move {
                    if let Err(why) = read_loop(s, events).await {
                        debug!("peer connection from {remote} closed: {why}");
                    }
                });
            }
            Err(e) => warn!("accept failed: {e}"),
        }
    }
}

async fn read_loop(mut s: TcpStream, events: UnboundedSender<Cmd>) -> Result<(), String> {
    let mut dec = FrameDecoder::new();
    let mut buf = vec![0u8; READ_BUF];
    let mut peer: Option<String> = None;
    loop {
        let n = s.read(&mut buf).await.map_err(|e| e.to_string())?;
        if n == 0 {
            return Ok(());
        }
        dec.extend(&buf[..n]);
        while let Some(msg) = dec.next_message().map_err(|e| e.to_string())? {
            let from = match (&peer, &msg) {
                (Some(p), _) => p.clone(),
                (None, Message::Hello { peer: id, addr }) => {
                    if *id != PeerId::from_addr(addr) {
                        return Err(format!("HELLO id does not match {addr}"));
                    }
                    peer = Some(addr.clone());
                    addr.clone()
                }
                (None, _) => return Err("first frame was not HELLO".into()),
            };
            if events.send(Cmd::Peer { from, msg }).is_err() {
                return Ok(());
            }
        }
    }
}
