//! Table-level differential sync between the central store and a device.
//!
//! Session flow, central side driving:
//!
//! 1. `GetManifest` with the subscribed table names; the device answers
//!    with revision, base revision and stamp per table.
//! 2. Per table, a direction is decided from the three revisions.
//!    SKIP sends nothing. PUSH sends `PutTable`. PULL fetches with
//!    `GetTable`, replaces the central table, then `SetRevision` stamps the
//!    device copy with the new central revision. CONFLICT fetches the device
//!    copy, archives the loser, and continues as PUSH or PULL.
//! 3. `Done` carries the SHA-256 of every earlier message in the session;
//!    the device acknowledges if its own digest agrees.
//!
//! Each table commits on its own, so a cut link leaves any table either as
//! it was or fully transferred.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::compact::CompactTable;
use super::link::DeviceLink;
use super::wire::{self, Ack, AckCode, Kind, Message, SessionDigest};
use super::SyncError;
use crate::store::crypto::write_atomic;
use crate::store::{Change, Datastore, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SyncDirection {
    Push,
    Pull,
    Skip,
    Conflict,
}

/// `base` is the central revision both sides held after their last sync.
pub fn decide(central_revision: u64, device_revision: u64, base: u64) -> SyncDirection {
    match (central_revision != base, device_revision != base) {
        (false, false) => SyncDirection::Skip,
        (true, false) => SyncDirection::Push,
        (false, true) => SyncDirection::Pull,
        (true, true) => SyncDirection::Conflict,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub device_revision: u64,
    pub central_revision: u64,
    pub base_revision: u64,
    pub direction: SyncDirection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncManifest {
    pub device_id: String,
    pub tables: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum TableOutcome {
    Skipped,
    Pushed,
    Pulled,
    CentralWon { archived: Option<PathBuf> },
    DeviceWon { archived: Option<PathBuf> },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub manifest: SyncManifest,
    pub outcomes: BTreeMap<String, TableOutcome>,
    /// Bytes of table-carrying messages (`PutTable`, `Table`) per table.
    pub table_body_bytes: BTreeMap<String, u64>,
    /// Every byte that crossed the link during the session.
    pub total_bytes: u64,
    pub digest: String,
}

impl SyncReport {
    pub fn total_table_bytes(&self) -> u64 {
        self.table_body_bytes.values().sum()
    }
}

#[derive(Debug, Clone, Default)]
pub struct SyncOptions {
    pub subscriptions: Vec<String>,
    /// Losing copies of conflicted tables are written here, under the
    /// device id. Not archived to disk when unset.
    pub archive_dir: Option<PathBuf>,
}

fn expect_ack(reply: Message) -> Result<Ack, SyncError> {
    if reply.kind != Kind::Ack {
        return Err(SyncError::Protocol(format!("expected Ack, got {:?}", reply.kind)));
    }
    reply.header()
}

fn expect_ok(reply: Message) -> Result<(), SyncError> {
    let ack = expect_ack(reply)?;
    match ack.code {
        AckCode::Ok => Ok(()),
        code => Err(SyncError::Protocol(ack.detail.unwrap_or_else(|| format!("device answered {code:?}")))),
    }
}

pub fn sync_session(link: &mut DeviceLink, store: &mut Datastore, opts: &SyncOptions) -> Result<SyncReport, SyncError> {
    for name in &opts.subscriptions {
        store.tables().table(name)?;
    }
    let start_bytes = link.bytes_transferred();
    link.digest = Some(SessionDigest::default());
    let result = run(link, store, opts, start_bytes);
    link.digest = None;
    result
}

/// Exchanges revisions and reports what a session would do, without
/// transferring any table.
pub fn fetch_manifest(link: &mut DeviceLink, store: &Datastore, opts: &SyncOptions) -> Result<SyncManifest, SyncError> {
    for name in &opts.subscriptions {
        store.tables().table(name)?;
    }
    link.digest = Some(SessionDigest::default());
    let result = handshake(link, store, opts).and_then(|(_, manifest)| {
        finish(link)?;
        Ok(manifest)
    });
    link.digest = None;
    result
}

fn handshake(
    link: &mut DeviceLink,
    store: &Datastore,
    opts: &SyncOptions,
) -> Result<(wire::ManifestReply, SyncManifest), SyncError> {
    let reply =
        link.request(&Message::new(Kind::GetManifest, &wire::GetManifest { tables: opts.subscriptions.clone() }))?;
    if reply.kind != Kind::Manifest {
        return Err(SyncError::Protocol(format!("expected Manifest, got {:?}", reply.kind)));
    }
    let device: wire::ManifestReply = reply.header()?;
    if device.tables.len() != opts.subscriptions.len()
        || device.tables.iter().zip(&opts.subscriptions).any(|(d, s)| &d.name != s)
    {
        return Err(SyncError::Protocol("manifest does not match the request".into()));
    }

    let mut manifest = SyncManifest { device_id: device.device_id.clone(), tables: Vec::new() };
    for d in &device.tables {
        let central = store.tables().table(&d.name)?.revision;
        manifest.tables.push(ManifestEntry {
            name: d.name.clone(),
            device_revision: d.revision,
            central_revision: central,
            base_revision: d.base_revision,
            direction: decide(central, d.revision, d.base_revision),
        });
    }
    Ok((device, manifest))
}

fn finish(link: &mut DeviceLink) -> Result<String, SyncError> {
    let digest = link.digest.as_ref().expect("session digest").hex();
    let ack = expect_ack(link.request(&Message::new(Kind::Done, &wire::Done { digest: digest.clone() }))?)?;
    if ack.code != AckCode::Ok {
        return Err(SyncError::DigestMismatch);
    }
    Ok(digest)
}

fn run(
    link: &mut DeviceLink,
    store: &mut Datastore,
    opts: &SyncOptions,
    start_bytes: u64,
) -> Result<SyncReport, SyncError> {
    let (device, manifest) = handshake(link, store, opts)?;

    let mut outcomes = BTreeMap::new();
    let mut table_body_bytes = BTreeMap::new();
    for (entry, dev) in manifest.tables.iter().zip(&device.tables) {
        let mut body = 0u64;
        let outcome = match entry.direction {
            SyncDirection::Skip => Ok(TableOutcome::Skipped),
            SyncDirection::Push => push(link, store, &entry.name, &mut body).map(|_| TableOutcome::Pushed),
            SyncDirection::Pull => pull(link, store, &entry.name, &mut body).map(|_| TableOutcome::Pulled),
            SyncDirection::Conflict => {
                resolve_conflict(link, store, &entry.name, dev, &device.device_id, opts, &mut body)
            }
        };
        table_body_bytes.insert(entry.name.clone(), body);
        let outcome = match outcome {
            Ok(o) => o,
            // Conversion problems fail only their table; link loss ends the session.
            Err(e @ (SyncError::ConversionLoss(_) | SyncError::Store(_))) => {
                TableOutcome::Failed { error: e.to_string() }
            }
            Err(e) => return Err(e),
        };
        outcomes.insert(entry.name.clone(), outcome);
    }

    let digest = finish(link)?;
    Ok(SyncReport { manifest, outcomes, table_body_bytes, total_bytes: link.bytes_transferred() - start_bytes, digest })
}

fn push(link: &mut DeviceLink, store: &Datastore, name: &str, body: &mut u64) -> Result<(), SyncError> {
    let table = store.tables().table(name)?;
    let compact = CompactTable::from_table(table).map_err(SyncError::ConversionLoss)?;
    let msg = Message::new(Kind::PutTable, &wire::TableName { name: name.to_string() }).with_data(compact.encode());
    *body += msg.encoded_len() as u64;
    expect_ok(link.request(&msg)?)
}

fn fetch(link: &mut DeviceLink, name: &str, body: &mut u64) -> Result<CompactTable, SyncError> {
    let reply = link.request(&Message::new(Kind::GetTable, &wire::TableName { name: name.to_string() }))?;
    if reply.kind != Kind::Table {
        return Err(SyncError::Protocol(format!("device has no table `{name}`")));
    }
    *body += reply.encoded_len() as u64;
    let table = CompactTable::decode(&reply.data)?;
    if table.name() != name {
        return Err(SyncError::Protocol("table name mismatch".into()));
    }
    Ok(table)
}

fn apply_pulled(link: &mut DeviceLink, store: &mut Datastore, device: &CompactTable) -> Result<(), SyncError> {
    let name = device.name().to_string();
    if device.schema != store.tables().table(&name)?.schema {
        return Err(SyncError::Protocol(format!("schema of `{name}` differs on the device")));
    }
    let revision = store.apply(Role::Admin, &name, Change::Replace { rows: device.to_rows() }, device.modified_at)?;
    let msg = Message::new(Kind::SetRevision, &wire::SetRevision { name, revision, base_revision: revision });
    expect_ok(link.request(&msg)?)
}

fn pull(link: &mut DeviceLink, store: &mut Datastore, name: &str, body: &mut u64) -> Result<(), SyncError> {
    let device = fetch(link, name, body)?;
    apply_pulled(link, store, &device)
}

fn archive(opts: &SyncOptions, device_id: &str, file: String, bytes: &[u8]) -> Result<Option<PathBuf>, SyncError> {
    let Some(dir) = &opts.archive_dir else {
        return Ok(None);
    };
    let dir = dir.join(device_id);
    fs::create_dir_all(&dir)?;
    let path = dir.join(file);
    write_atomic(&path, bytes)?;
    Ok(Some(path))
}

/// Last writer wins on the modification stamp; the central copy wins ties.
fn resolve_conflict(
    link: &mut DeviceLink,
    store: &mut Datastore,
    name: &str,
    dev: &wire::DeviceTableState,
    device_id: &str,
    opts: &SyncOptions,
    body: &mut u64,
) -> Result<TableOutcome, SyncError> {
    let central = store.tables().table(name)?.clone();
    if !dev.present {
        push(link, store, name, body)?;
        return Ok(TableOutcome::CentralWon { archived: None });
    }
    let device = fetch(link, name, body)?;
    if central.modified_at >= device.modified_at {
        // Convert first so a conversion failure leaves both sides untouched.
        CompactTable::from_table(&central).map_err(SyncError::ConversionLoss)?;
        let archived = archive(opts, device_id, format!("{name}.r{}.device.ctb", device.revision), &device.encode())?;
        push(link, store, name, body)?;
        Ok(TableOutcome::CentralWon { archived })
    } else {
        let json = serde_json::to_vec_pretty(&central).expect("table serializes");
        let archived = archive(opts, device_id, format!("{name}.r{}.central.json", central.revision), &json)?;
        apply_pulled(link, store, &device)?;
        Ok(TableOutcome::DeviceWon { archived })
    }
}
