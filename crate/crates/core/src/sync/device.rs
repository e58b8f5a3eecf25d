//! Handheld side of the link: a compact store in a device directory and the
//! request handler that serves it.
//!
//! Directory layout:
//!
//! ```text
//! <dir>/device.json        identity and file quota
//! <dir>/tables/<name>.ctb  one compact table body per file
//! <dir>/files/             user files reachable through file operations
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Component, Path, PathBuf};
use std::time::UNIX_EPOCH;

use serde::{Deserialize, Serialize};

use super::compact::{CompactStore, CompactTable};
use super::wire::{self, Ack, AckCode, FileHeader, FileStat, Kind, Message, SessionDigest};
use super::SyncError;
use crate::store::crypto::write_atomic;
use crate::store::table::Row;

pub const DEFAULT_QUOTA_BYTES: u64 = 16 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub device_id: String,
    pub quota_bytes: u64,
}

#[derive(Debug)]
pub struct DeviceAgent {
    dir: PathBuf,
    config: DeviceConfig,
    store: CompactStore,
    digest: SessionDigest,
}

impl DeviceAgent {
    /// Opens the device directory, creating it on first use.
    pub fn open_or_create(dir: &Path, device_id: &str, quota_bytes: u64) -> Result<Self, SyncError> {
        if dir.join("device.json").exists() {
            return Self::open(dir);
        }
        fs::create_dir_all(dir.join("tables"))?;
        fs::create_dir_all(dir.join("files"))?;
        let config = DeviceConfig { device_id: device_id.to_string(), quota_bytes };
        write_atomic(&dir.join("device.json"), &serde_json::to_vec_pretty(&config).expect("config serializes"))?;
        Self::open(dir)
    }

    pub fn open(dir: &Path) -> Result<Self, SyncError> {
        let config: DeviceConfig = serde_json::from_slice(&fs::read(dir.join("device.json"))?)
            .map_err(|e| SyncError::Protocol(format!("device.json: {e}")))?;
        fs::create_dir_all(dir.join("tables"))?;
        fs::create_dir_all(dir.join("files"))?;
        let mut store = CompactStore::default();
        for entry in fs::read_dir(dir.join("tables"))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "ctb") {
                let table = CompactTable::decode(&fs::read(&path)?)?;
                store.tables.insert(table.name().to_string(), table);
            }
        }
        Ok(DeviceAgent { dir: dir.to_path_buf(), config, store, digest: SessionDigest::default() })
    }

    pub fn device_id(&self) -> &str {
        &self.config.device_id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn store(&self) -> &CompactStore {
        &self.store
    }

    fn save_table(&mut self, table: CompactTable) -> Result<(), SyncError> {
        write_atomic(&self.dir.join("tables").join(format!("{}.ctb", table.name())), &table.encode())?;
        self.store.tables.insert(table.name().to_string(), table);
        Ok(())
    }

    /// A local edit made on the handheld: replaces the rows of a table the
    /// device already holds and bumps its revision.
    pub fn edit_table(&mut self, name: &str, rows: Vec<Row>, stamp: u64) -> Result<(), SyncError> {
        let mut table =
            self.store.tables.get(name).cloned().ok_or_else(|| SyncError::NotFound(format!("table {name}")))?;
        table.set_rows(rows, stamp)?;
        self.save_table(table)
    }

    fn files_root(&self) -> PathBuf {
        self.dir.join("files")
    }

    /// Maps a device-relative path into the files root, refusing escapes.
    fn resolve(&self, path: &str) -> Result<PathBuf, String> {
        let rel = Path::new(path);
        if path.is_empty() || rel.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Err(format!("invalid device path `{path}`"));
        }
        Ok(self.files_root().join(rel))
    }

    fn used_bytes(&self) -> u64 {
        fn walk(p: &Path) -> u64 {
            let Ok(entries) = fs::read_dir(p) else {
                return 0;
            };
            entries
                .filter_map(Result::ok)
                .map(|e| match e.metadata() {
                    Ok(m) if m.is_dir() => walk(&e.path()),
                    Ok(m) => m.len(),
                    Err(_) => 0,
                })
                .sum()
        }
        walk(&self.files_root())
    }

    /// Handles one request and returns the reply.
    pub fn handle(&mut self, msg: &Message) -> Message {
        if msg.kind == Kind::GetManifest {
            self.digest = SessionDigest::default();
        }
        let done = msg.kind == Kind::Done;
        if !done {
            self.digest.update(msg);
        }
        let reply = match self.dispatch(msg) {
            Ok(m) => m,
            Err(e) => Message::new(Kind::Ack, &Ack::fail(AckCode::BadRequest, e.to_string())),
        };
        if !done {
            self.digest.update(&reply);
        }
        reply
    }

    fn dispatch(&mut self, msg: &Message) -> Result<Message, SyncError> {
        let ack = |a: Ack| Message::new(Kind::Ack, &a);
        Ok(match msg.kind {
            Kind::GetManifest => {
                let req: wire::GetManifest = msg.header()?;
                let tables = req
                    .tables
                    .into_iter()
                    .map(|name| match self.store.table(&name) {
                        Some(t) => wire::DeviceTableState {
                            present: true,
                            revision: t.revision,
                            base_revision: t.base_revision,
                            modified_at: t.modified_at,
                            name,
                        },
                        None => wire::DeviceTableState {
                            name,
                            present: false,
                            revision: 0,
                            base_revision: 0,
                            modified_at: 0,
                        },
                    })
                    .collect();
                Message::new(Kind::Manifest, &wire::ManifestReply { device_id: self.config.device_id.clone(), tables })
            }
            Kind::PutTable => {
                let req: wire::TableName = msg.header()?;
                let table = CompactTable::decode(&msg.data)?;
                if table.name() != req.name {
                    return Err(SyncError::Protocol("table name mismatch".into()));
                }
                self.save_table(table)?;
                ack(Ack::ok())
            }
            Kind::GetTable => {
                let req: wire::TableName = msg.header()?;
                match self.store.table(&req.name) {
                    Some(t) => Message::new(Kind::Table, &req).with_data(t.encode()),
                    None => ack(Ack::code(AckCode::NotFound)),
                }
            }
            Kind::SetRevision => {
                let req: wire::SetRevision = msg.header()?;
                let Some(mut table) = self.store.table(&req.name).cloned() else {
                    return Ok(ack(Ack::code(AckCode::NotFound)));
                };
                table.revision = req.revision;
                table.base_revision = req.base_revision;
                self.save_table(table)?;
                ack(Ack::ok())
            }
            Kind::Done => {
                let req: wire::Done = msg.header()?;
                if req.digest == self.digest.hex() {
                    ack(Ack::ok())
                } else {
                    ack(Ack::code(AckCode::DigestMismatch))
                }
            }
            Kind::FilePut => {
                let req: FileHeader = msg.header()?;
                let path = match self.resolve(&req.path) {
                    Ok(p) => p,
                    Err(e) => return Ok(ack(Ack::fail(AckCode::BadRequest, e))),
                };
                if req.sha256.as_deref().is_some_and(|d| d != wire::sha256_hex(&msg.data)) {
                    return Ok(ack(Ack::code(AckCode::DigestMismatch)));
                }
                let existing = fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
                let after = self.used_bytes() - existing + msg.data.len() as u64;
                if after > self.config.quota_bytes {
                    return Ok(ack(Ack::fail(
                        AckCode::QuotaExceeded,
                        format!("{after} bytes needed, quota {}", self.config.quota_bytes),
                    )));
                }
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent)?;
                }
                write_atomic(&path, &msg.data)?;
                ack(Ack::ok())
            }
            Kind::FileGet => {
                let req: FileHeader = msg.header()?;
                match self.resolve(&req.path).map(fs::read) {
                    Ok(Ok(data)) => {
                        let header = FileHeader { path: req.path, sha256: Some(wire::sha256_hex(&data)) };
                        Message::new(Kind::FileData, &header).with_data(data)
                    }
                    _ => ack(Ack::code(AckCode::NotFound)),
                }
            }
            Kind::FileDelete => {
                let req: FileHeader = msg.header()?;
                match self.resolve(&req.path) {
                    Ok(p) if p.is_file() => {
                        fs::remove_file(p)?;
                        ack(Ack::ok())
                    }
                    _ => ack(Ack::code(AckCode::NotFound)),
                }
            }
            Kind::MakeDir => {
                let req: FileHeader = msg.header()?;
                match self.resolve(&req.path) {
                    Ok(p) if p.is_dir() => ack(Ack::code(AckCode::AlreadyExists)),
                    Ok(p) => {
                        fs::create_dir_all(p)?;
                        ack(Ack::code(AckCode::Created))
                    }
                    Err(e) => ack(Ack::fail(AckCode::BadRequest, e)),
                }
            }
            Kind::RemoveDir => {
                let req: FileHeader = msg.header()?;
                match self.resolve(&req.path) {
                    Ok(p) if p.is_dir() => {
                        fs::remove_dir_all(p)?;
                        ack(Ack::code(AckCode::Removed))
                    }
                    Ok(_) => ack(Ack::code(AckCode::Absent)),
                    Err(e) => ack(Ack::fail(AckCode::BadRequest, e)),
                }
            }
            Kind::Stat => {
                let req: FileHeader = msg.header()?;
                let meta = self.resolve(&req.path).ok().and_then(|p| fs::metadata(p).ok());
                let stat = match meta {
                    Some(m) => FileStat {
                        path: req.path,
                        exists: true,
                        is_dir: m.is_dir(),
                        size: if m.is_dir() { 0 } else { m.len() },
                        modified: m
                            .modified()
                            .ok()
                            .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
                            .map_or(0, |d| d.as_secs()),
                    },
                    None => FileStat { path: req.path, exists: false, is_dir: false, size: 0, modified: 0 },
                };
                Message::new(Kind::StatReply, &stat)
            }
            Kind::Manifest | Kind::Table | Kind::Ack | Kind::FileData | Kind::StatReply => {
                return Err(SyncError::Protocol(format!("{:?} is not a request", msg.kind)))
            }
        })
    }
}

/// Serves requests from a byte stream until the peer closes it.
pub fn serve_device<S: Read + Write>(mut stream: S, agent: &mut DeviceAgent) -> io::Result<()> {
    loop {
        let msg = match wire::read_message(&mut stream) {
            Ok(m) => m,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        };
        let reply = agent.handle(&msg);
        wire::write_message(&mut stream, &reply)?;
    }
}
