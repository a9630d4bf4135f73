//! Peer wire protocol.
//!
//! Every frame is `u32 payload length | u8 type | payload`, integers
//! big-endian. The length counts the payload only, not the type byte.

use bytes::{Buf, BufMut, Bytes, BytesMut};
use thiserror::Error;

use crate::cid::ContentId;
use crate::peer::PeerId;
use crate::replication::PinsetState;

pub const MAX_FRAME: usize = 2 * 1024 * 1024;
pub const FRAME_HEADER: usize = 5;

pub const T_HELLO: u8 = 0x01;
pub const T_WANT: u8 = 0x02;
pub const T_BLOCK: u8 = 0x03;
pub const T_DONT_HAVE: u8 = 0x04;
pub const T_PROVIDE: u8 = 0x05;
pub const T_FIND_PROVIDERS: u8 = 0x06;
pub const T_PROVIDERS: u8 = 0x07;
pub const T_PINSET_SYNC: u8 = 0x08;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME}-byte limit")]
    Oversize(usize),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("payload truncated")]
    Truncated,
    #[error("trailing bytes after payload")]
    Trailing,
    #[error("malformed payload: {0}")]
    Malformed(&'static str),
}

/// A provider advertisement as carried in PROVIDE and PROVIDERS.
///
/// In PROVIDERS a zero TTL marks a contact hint: a peer close to the queried
/// identifier that is not itself a provider. Responders always include
/// themselves as a hint, so every answer names the identifier it is for.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ProviderEntry {
    pub cid: ContentId,
    pub addr: String,
    pub ttl_secs: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Hello { peer: PeerId, addr: String },
    Want { cids: Vec<ContentId> },
    Block { cid: ContentId, data: Bytes },
    DontHave { cid: ContentId },
    Provide { records: Vec<ProviderEntry> },
    FindProviders { cid: ContentId },
    Providers { records: Vec<ProviderEntry> },
    PinsetSync(PinsetState),
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Message::Hello { .. } => T_HELLO,
            Message::Want { .. } => T_WANT,
            Message::Block { .. } => T_BLOCK,
            Message::DontHave { .. } => T_DONT_HAVE,
            Message::Provide { .. } => T_PROVIDE,
            Message::FindProviders { .. } => T_FIND_PROVIDERS,
            Message::Providers { .. } => T_PROVIDERS,
            Message::PinsetSync(_) => T_PINSET_SYNC,
        }
    }

    /// Size of the encoded frame, header included, without encoding it.
    pub fn frame_len(&self) -> usize {
        let records = |r: &[ProviderEntry]| -> usize {
            2 + r.iter().map(|e| 32 + 2 + e.addr.len() + 4).sum::<usize>()
        };
        FRAME_HEADER
            + match self {
                Message::Hello { addr, .. } => 32 + 2 + addr.len(),
                Message::Want { cids } => 2 + 32 * cids.len(),
                Message::Block { data, .. } => 32 + 4 + data.len(),
                Message::DontHave { .. } | Message::FindProviders { .. } => 32,
                Message::Provide { records: r } | Message::Providers { records: r } => records(r),
                Message::PinsetSync(s) => s.encode().len(),
            }
    }

    pub fn encode(&self) -> Result<Bytes, WireError> {
        let mut body = BytesMut::new();
        match self {
            Message::Hello { peer, addr } => {
                body.put_slice(peer.as_bytes());
                put_str(&mut body, addr)?;
            }
            Message::Want { cids } => {
                let n: u16 = cids
                    .len()
                    .try_into()
                    .map_err(|_| WireError::Malformed("too many cids in WANT"))?;
                body.put_u16(n);
                for c in cids {
                    body.put_slice(c.as_bytes());
                }
            }
            Message::Block { cid, data } => {
                body.put_slice(cid.as_bytes());
                body.put_u32(data.len() as u32);
                body.put_slice(data);
            }
            Message::DontHave { cid } | Message::FindProviders { cid } => {
                body.put_slice(cid.as_bytes());
            }
            Message::Provide { records } | Message::Providers { records } => {
                let n: u16 = records
                    .len()
                    .try_into()
                    .map_err(|_| WireError::Malformed("too many provider records"))?;
                body.put_u16(n);
                for r in records {
                    body.put_slice(r.cid.as_bytes());
                    put_str(&mut body, &r.addr)?;
                    body.put_u32(r.ttl_secs);
                }
            }
            Message::PinsetSync(state) => body.put_slice(&state.encode()),
        }
        if body.len() > MAX_FRAME {
            return Err(WireError::Oversize(body.len()));
        }
        let mut frame = BytesMut::with_capacity(FRAME_HEADER + body.len());
        frame.put_u32(body.len() as u32);
        frame.put_u8(self.type_byte());
        frame.put_slice(&body);
        Ok(frame.freeze())
    }

    pub fn decode(kind: u8, payload: Bytes) -> Result<Message, WireError> {
        let mut buf = payload.clone();
        let msg = match kind {
            T_HELLO => {
                let peer = PeerId::from_bytes(take_32(&mut buf)?);
                let addr = take_str(&mut buf)?;
                Message::Hello { peer, addr }
            }
            T_WANT => {
                let n = take_u16(&mut buf)? as usize;
                let mut cids = Vec::with_capacity(n);
                for _ in 0..n {
                    cids.push(ContentId::from_bytes(take_32(&mut buf)?));
                }
                Message::Want { cids }
            }
            T_BLOCK => {
                let cid = ContentId::from_bytes(take_32(&mut buf)?);
                need(&buf, 4)?;
                let len = buf.get_u32() as usize;
                need(&buf, len)?;
                let data = buf.split_to(len);
                Message::Block { cid, data }
            }
            T_DONT_HAVE => Message::DontHave {
                cid: ContentId::from_bytes(take_32(&mut buf)?),
            },
            T_FIND_PROVIDERS => Message::FindProviders {
                cid: ContentId::from_bytes(take_32(&mut buf)?),
            },
            T_PROVIDE | T_PROVIDERS => {
                let n = take_u16(&mut buf)? as usize;
                let mut records = Vec::with_capacity(n);
                for _ in 0..n {
                    let cid = ContentId::from_bytes(take_32(&mut buf)?);
                    let addr = take_str(&mut buf)?;
                    need(&buf, 4)?;
                    let ttl_secs = buf.get_u32();
                    records.push(ProviderEntry { cid, addr, ttl_secs });
                }
                if kind == T_PROVIDE {
                    Message::Provide { records }
                } else {
                    Message::Providers { records }
                }
            }
            T_PINSET_SYNC => {
                let state = PinsetState::decode(&buf)?;
                buf.clear();
                Message::PinsetSync(state)
            }
            other => return Err(WireError::UnknownType(other)),
        };
        if buf.has_remaining() {
            return Err(WireError::Trailing);
        }
        Ok(msg)
    }
}

fn need(buf: &Bytes, n: usize) -> Result<(), WireError> {
    if buf.remaining() < n {
        Err(WireError::Truncated)
    } else {
        Ok(())
    }
}

fn take_u16(buf: &mut Bytes) -> Result<u16, WireError> {
    need(buf, 2)?;
    Ok(buf.get_u16())
}

fn take_32(buf: &mut Bytes) -> Result<[u8; 32], WireError> {
    need(buf, 32)?;
    let mut out = [0u8; 32];
    buf.copy_to_slice(&mut out);
    Ok(out)
}

fn take_str(buf: &mut Bytes) -> Result<String, WireError> {
    let len = take_u16(buf)? as usize;
    need(buf, len)?;
    let raw = buf.split_to(len);
    String::from_utf8(raw.to_vec()).map_err(|_| WireError::Malformed("address is not UTF-8"))
}

fn put_str(buf: &mut BytesMut, s: &str) -> Result<(), WireError> {
    let n: u16 = s
        .len()
        .try_into()
        .map_err(|_| WireError::Malformed("address longer than 65535 bytes"))?;
    buf.put_u16(n);
    buf.put_slice(s.as_bytes());
    Ok(())
}

/// Incremental frame decoder for a byte stream.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: BytesMut,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, data: &[u8]) {
        self.buf.extend_from_slice(data);
    }

    /// Next complete message, `Ok(None)` when more bytes are needed. An
    /// error leaves the stream unusable; the connection should be closed.
    pub fn next_message(&mut self) -> Result<Option<Message>, WireError> {
        if self.buf.len() < FRAME_HEADER {
            return Ok(None);
        }
        let len = u32::from_be_bytes(self.buf[..4].try_into().unwrap()) as usize;
        if len > MAX_FRAME {
            return Err(WireError::Oversize(len));
        }
        if self.buf.len() < FRAME_HEADER + len {
            return Ok(None);
        }
        let mut frame = self.buf.split_to(FRAME_HEADER + len);
        let kind = frame[4];
        frame.advance(FRAME_HEADER);
        Message::decode(kind, frame.freeze()).map(Some)
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}
