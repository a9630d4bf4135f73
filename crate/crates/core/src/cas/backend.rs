//! Raw block persistence.
//!
//! Backends store bytes under a digest and never verify them; verification is
//! the [`Store`](super::Store)'s job.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use bytes::Bytes;

use crate::cid::ContentId;

pub trait Backend: Send + Sync {
    fn get(&self, cid: &ContentId) -> io::Result<Option<Bytes>>;
    /// Must be atomic: readers see either nothing or the whole block.
    fn put(&self, cid: &ContentId, data: &[u8]) -> io::Result<()>;
    fn delete(&self, cid: &ContentId) -> io::Result<()>;
    /// Moves a corrupt block out of the live set.
    fn quarantine(&self, cid: &ContentId) -> io::Result<()>;
    /// Every live block with its size.
    fn scan(&self) -> io::Result<Vec<(ContentId, u64)>>;
    fn append_pin_log(&self, line: &str) -> io::Result<()>;
    fn read_pin_log(&self) -> io::Result<Vec<String>>;
    fn rewrite_pin_log(&self, lines: &[String]) -> io::Result<()>;
}

#[derive(Default)]
pub struct MemoryBackend {
    blocks: Mutex<HashMap<ContentId, Bytes>>,
    quarantined: Mutex<HashSet<ContentId>>,
    pin_log: Mutex<Vec<String>>,
}

impl MemoryBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Overwrites stored bytes without touching the index. Fault injection only.
    pub fn tamper(&self, cid: &ContentId, f: impl FnOnce(&mut Vec<u8>)) -> bool {
        let mut blocks = self.blocks.lock().unwrap();
        match blocks.get_mut(cid) {
            Some(b) => {
                let mut v = b.to_vec();
                f(&mut v);
                *b = Bytes::from(v);
                true
            }
            None => false,
        }
    }

    /// Drops stored bytes without touching the index. Fault injection only.
    pub fn vanish(&self, cid: &ContentId) -> bool {
        self.blocks.lock().unwrap().remove(cid).is_some()
    }

    pub fn quarantined(&self) -> Vec<ContentId> {
        let mut v: Vec<_> = self.quarantined.lock().unwrap().iter().copied().collect();
        v.sort();
        v
    }

    /// Shallow copy sharing block buffers.
    pub fn snapshot(&self) -> MemoryBackend {
        MemoryBackend {
            blocks: Mutex::new(self.blocks.lock().unwrap().clone()),
            quarantined: Mutex::new(self.quarantined.lock().unwrap().clone()),
            pin_log: Mutex::new(self.pin_log.lock().unwrap().clone()),
        }
    }
}

impl Backend for MemoryBackend {
    fn get(&self, cid: &ContentId) -> io::Result<Option<Bytes>> {
        Ok(self.blocks.lock().unwrap().get(cid).cloned())
    }

    fn put(&self, cid: &ContentId, data: &[u8]) -> io::Result<()> {
        self.blocks
            .lock()
            .unwrap()
            .insert(*cid, Bytes::copy_from_slice(data));
        Ok(())
    }

    fn delete(&self, cid: &ContentId) -> io::Result<()> {
        self.blocks.lock().unwrap().remove(cid);
        Ok(())
    }

    fn quarantine(&self, cid: &ContentId) -> io::Result<()> {
        self.blocks.lock().unwrap().remove(cid);
        self.quarantined.lock().unwrap().insert(*cid);
        Ok(())
    }

    fn scan(&self) -> io::Result<Vec<(ContentId, u64)>> {
        let mut v: Vec<_> = self
            .blocks
            .lock()
            .unwrap()
            .iter()
            .map(|(c, b)| (*c, b.len() as u64))
            .collect();
        v.sort();
        Ok(v)
    }

    fn append_pin_log(&self, line: &str) -> io::Result<()> {
        self.pin_log.lock().unwrap().push(line.to_string());
        Ok(())
    }

    fn read_pin_log(&self) -> io::Result<Vec<String>> {
        Ok(self.pin_log.lock().unwrap().clone())
    }

    fn rewrite_pin_log(&self, lines: &[String]) -> io::Result<()> {
        *self.pin_log.lock().unwrap() = lines.to_vec();
        Ok(())
    }
}

/// One file per block under `blocks/<first two hex>/<hex>`.
pub struct DiskBackend {
    root: PathBuf,
    log_lock: Mutex<()>,
}

impl DiskBackend {
    pub fn open(root: impl AsRef<Path>) -> io::Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("blocks"))?;
        fs::create_dir_all(root.join("quarantine"))?;
        fs::create_dir_all(root.join("tmp"))?;
        // Half-written temporaries from a previous crash.
        for entry in fs::read_dir(root.join("tmp"))? {
            let _ = fs::remove_file(entry?.path());
        }
        Ok(DiskBackend {
            root,
            log_lock: Mutex::new(()),
        })
    }

    pub fn block_path(&self, cid: &ContentId) -> PathBuf {
        let hex = cid.to_hex();
        self.root.join("blocks").join(&hex[..2]).join(hex)
    }

    fn pin_log_path(&self) -> PathBuf {
        self.root.join("pins.log")
    }
}

impl Backend for DiskBackend {
    fn get(&self, cid: &ContentId) -> io::Result<Option<Bytes>> {
        match fs::read(self.block_path(cid)) {
            Ok(v) => Ok(Some(Bytes::from(v))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn put(&self, cid: &ContentId, data: &[u8]) -> io::Result<()> {
        let path = self.block_path(cid);
        if path.exists() {
            return Ok(());
        }
        fs::create_dir_all(path.parent().unwrap())?;
        let tmp = self
            .root
            .join("tmp")
            .join(format!("{}.{}", cid.to_hex(), std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(data)?;
            f.sync_data()?;
        }
        fs::rename(&tmp, &path)
    }

    fn delete(&self, cid: &ContentId) -> io::Result<()> {
        match fs::remove_file(self.block_path(cid)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }

    fn quarantine(&self, cid: &ContentId) -> io::Result<()> {
        let dest = self.root.join("quarantine").join(cid.to_hex());
        match fs::rename(self.block_path(cid), dest) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }

    fn scan(&self) -> io::Result<Vec<(ContentId, u64)>> {
        let mut out = Vec::new();
        for fan in fs::read_dir(self.root.join("blocks"))? {
            let fan = fan?;
            if !fan.file_type()?.is_dir() {
                continue;
            }
            for entry in fs::read_dir(fan.path())? {
                let entry = entry?;
                let name = entry.file_name();
                let Some(cid) = name.to_str().and_then(|n| ContentId::from_hex(n).ok()) else {
                    continue;
                };
                out.push((cid, entry.metadata()?.len()));
            }
        }
        out.sort();
        Ok(out)
    }

    fn append_pin_log(&self, line: &str) -> io::Result<()> {
        let _g = self.log_lock.lock().unwrap();
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.pin_log_path())?;
        writeln!(f, "{line}")?;
        f.sync_data()
    }

    fn read_pin_log(&self) -> io::Result<Vec<String>> {
        match fs::read_to_string(self.pin_log_path()) {
            Ok(s) => Ok(s.lines().map(str::to_string).collect()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e),
        }
    }

    fn rewrite_pin_log(&self, lines: &[String]) -> io::Result<()> {
        let _g = self.log_lock.lock().unwrap();
        let tmp = self.root.join("tmp").join("pins.log.new");
        {
            let mut f = fs::File::create(&tmp)?;
            for l in lines {
                writeln!(f, "{l}")?;
            }
            f.sync_data()?;
        }
        fs::rename(tmp, self.pin_log_path())
    }
}
