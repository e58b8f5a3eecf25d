//! Central datastore: typed tables, role checks, a change journal, and
//! plain or encrypted persistence.

pub mod alarm;
pub mod auth;
pub mod crypto;
pub mod report;
pub mod table;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use alarm::{evaluate_event, Alarm, AlarmEngine, AlarmRule, AlarmTrigger};
pub use auth::{authorize, hash_password, verify_password, Access, Role};
pub use crypto::CryptoError;
pub use report::{render, ReportFormat, ReportPattern, SortKey};
pub use table::{Column, ColumnType, Key, Row, Schema, Table, TableSet, Value};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("unknown column `{column}` in `{table}`")]
    UnknownColumn { table: String, column: String },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("duplicate key {key} in `{table}`")]
    DuplicateKey { table: String, key: String },
    #[error("no record {key} in `{table}`")]
    NotFound { table: String, key: String },
    #[error("{role} may not {access:?} `{table}`")]
    Forbidden { role: Role, table: String, access: Access },
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("invalid report pattern: {0}")]
    InvalidPattern(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("bad credentials")]
    BadCredentials,
    #[error("account disabled")]
    Disabled,
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Change {
    /// Fails with `DuplicateKey` if the key exists.
    Insert {
        row: Row,
    },
    Upsert {
        row: Row,
    },
    /// Fails with `NotFound` if the key is absent.
    Delete {
        key: Key,
    },
    /// Replaces every row of the table.
    Replace {
        rows: Vec<Row>,
    },
}

impl Change {
    pub fn access(&self) -> Access {
        match self {
            Change::Insert { .. } => Access::Insert,
            Change::Upsert { .. } | Change::Replace { .. } => Access::Upsert,
            Change::Delete { .. } => Access::Delete,
        }
    }
}

/// One committed mutation. `revision` is the table's revision after it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeEntry {
    pub table: String,
    pub revision: u64,
    pub stamp: u64,
    pub change: Change,
}

/// Applies `change` to `tables`, bumping the revision. Nothing changes on error.
fn apply_change(tables: &mut TableSet, table: &str, change: &Change, stamp: u64) -> Result<u64, StoreError> {
    let t = tables.table_mut(table)?;
    match change {
        Change::Insert { row } => {
            t.schema.validate(row)?;
            let key = t.schema.key_of(row);
            if t.contains(&key) {
                return Err(StoreError::DuplicateKey { table: table.to_string(), key: key.to_string() });
            }
            t.put(row.clone());
        }
        Change::Upsert { row } => {
            t.schema.validate(row)?;
            t.put(row.clone());
        }
        Change::Delete { key } => {
            if t.take(key).is_none() {
                return Err(StoreError::NotFound { table: table.to_string(), key: key.to_string() });
            }
        }
        Change::Replace { rows } => {
            let mut fresh = Table::new(t.schema.clone());
            for row in rows {
                fresh.schema.validate(row)?;
                if fresh.put(row.clone()).is_some() {
                    let key = fresh.schema.key_of(row);
                    return Err(StoreError::DuplicateKey { table: table.to_string(), key: key.to_string() });
                }
            }
            t.clear_rows();
            for row in rows {
                t.put(row.clone());
            }
        }
    }
    t.revision += 1;
    t.modified_at = stamp;
    Ok(t.revision)
}

/// Rebuilds a table set by applying `entries` on top of `base`.
pub fn replay(mut base: TableSet, entries: &[ChangeEntry]) -> Result<TableSet, StoreError> {
    for entry in entries {
        let current = base.table(&entry.table)?.revision;
        if entry.revision != current + 1 {
            return Err(StoreError::Corrupt(format!(
                "journal revision {} for `{}` does not follow {current}",
                entry.revision, entry.table
            )));
        }
        apply_change(&mut base, &entry.table, &entry.change, entry.stamp)?;
    }
    Ok(base)
}

#[derive(Debug)]
enum Backend {
    Memory,
    Plain { dir: PathBuf, journal: File, journal_lines: usize },
    Encrypted { path: PathBuf, key: crypto::SealKey },
}

pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const ENCRYPTED_FILE: &str = "store.enc";
const CHECKPOINT_EVERY: usize = 10_000;

#[derive(Debug)]
pub struct Datastore {
    tables: TableSet,
    journal: Vec<ChangeEntry>,
    backend: Backend,
    batch_depth: usize,
    dirty: bool,
}

impl Datastore {
    pub fn in_memory() -> Self {
        Datastore {
            tables: TableSet::standard(),
            journal: Vec::new(),
            backend: Backend::Memory,
            batch_depth: 0,
            dirty: false,
        }
    }

    /// Opens or creates a plain store: a JSON snapshot plus an append-only,
    /// fsynced journal. A torn final journal line is discarded.
    pub fn open_plain(dir: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(dir)?;
        let snap_path = dir.join(SNAPSHOT_FILE);
        let mut tables = if snap_path.exists() {
            serde_json::from_slice(&fs::read(&snap_path)?)
                .map_err(|e| StoreError::Corrupt(format!("{}: {e}", snap_path.display())))?
        } else {
            TableSet::standard()
        };
        for schema in table::standard_schemas() {
            if tables.table(&schema.name).is_err() {
                tables.insert_table(Table::new(schema));
            }
        }

        let journal_path = dir.join(JOURNAL_FILE);
        let mut journal = Vec::new();
        let mut good_len = 0u64;
        if journal_path.exists() {
            let reader = BufReader::new(File::open(&journal_path)?);
            let mut lines = reader.split(b'\n').peekable();
            let total = fs::metadata(&journal_path)?.len();
            while let Some(line) = lines.next() {
                let line = line?;
                let complete = good_len + (line.len() as u64) < total;
                let parsed = serde_json::from_slice::<ChangeEntry>(&line);
                match parsed {
                    Ok(entry) if complete => {
                        good_len += line.len() as u64 + 1;
                        // Entries already folded into the snapshot are skipped.
                        if entry.revision > tables.table(&entry.table)?.revision {
                            tables = replay(tables, std::slice::from_ref(&entry))?;
                            journal.push(entry);
                        }
                    }
                    _ if lines.peek().is_none() => break,
                    Err(e) => return Err(StoreError::Corrupt(format!("journal: {e}"))),
                    Ok(_) => unreachable!("only the last line can be incomplete"),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).read(true).open(&journal_path)?;
        if file.metadata()?.len() != good_len {
            file.set_len(good_len)?;
            file.sync_all()?;
        }
        let journal_lines = journal.len();
        Ok(Datastore {
            tables,
            journal,
            backend: Backend::Plain { dir: dir.to_path_buf(), journal: file, journal_lines },
            batch_depth: 0,
            dirty: false,
        })
    }

    /// Opens or creates an encrypted store file.
    pub fn open_encrypted(path: &Path, passphrase: &str, iterations: u32) -> Result<Self, StoreError> {
        let (tables, key) = if path.exists() {
            let (plain, key) = crypto::open_with_key(&fs::read(path)?, passphrase)?;
            let tables: TableSet =
                serde_json::from_slice(&plain).map_err(|e| StoreError::Corrupt(format!("decrypted store: {e}")))?;
            (tables, key)
        } else {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            (TableSet::standard(), crypto::SealKey::derive(passphrase, iterations))
        };
        let mut store = Datastore {
            tables,
            journal: Vec::new(),
            backend: Backend::Encrypted { path: path.to_path_buf(), key },
            batch_depth: 0,
            dirty: !path.exists(),
        };
        store.flush()?;
        Ok(store)
    }

    pub fn tables(&self) -> &TableSet {
        &self.tables
    }

    /// Reads a table after checking the role may.
    pub fn table(&self, role: Role, name: &str) -> Result<&Table, StoreError> {
        if !authorize(role, name, Access::Read) {
            return Err(StoreError::Forbidden { role, table: name.to_string(), access: Access::Read });
        }
        self.tables.table(name)
    }

    /// Mutations since open (or since the last checkpoint).
    pub fn journal(&self) -> &[ChangeEntry] {
        &self.journal
    }

    pub fn apply(&mut self, role: Role, table: &str, change: Change, stamp: u64) -> Result<u64, StoreError> {
        let access = change.access();
        if !authorize(role, table, access) {
            return Err(StoreError::Forbidden { role, table: table.to_string(), access });
        }
        let revision = apply_change(&mut self.tables, table, &change, stamp)?;
        let entry = ChangeEntry { table: table.to_string(), revision, stamp, change };
        if let Backend::Plain { journal, journal_lines, .. } = &mut self.backend {
            let mut line = serde_json::to_vec(&entry).expect("entry serializes");
            line.push(b'\n');
            journal.write_all(&line)?;
            journal.sync_data()?;
            *journal_lines += 1;
        }
        self.journal.push(entry);
        self.dirty = true;
        if self.batch_depth == 0 {
            self.flush()?;
        }
        Ok(revision)
    }

    /// Runs `f` with persistence deferred to the end. Encrypted stores write
    /// the container once instead of once per mutation.
    pub fn batch<R>(&mut self, f: impl FnOnce(&mut Self) -> Result<R, StoreError>) -> Result<R, StoreError> {
        self.batch_depth += 1;
        let result = f(self);
        self.batch_depth -= 1;
        if self.batch_depth == 0 {
            self.flush()?;
        }
        result
    }

    fn flush(&mut self) -> Result<(), StoreError> {
        if !self.dirty {
            return Ok(());
        }
        match &mut self.backend {
            Backend::Memory => {}
            Backend::Plain { journal_lines, .. } => {
                if *journal_lines >= CHECKPOINT_EVERY {
                    self.checkpoint()?;
                }
            }
            Backend::Encrypted { path, key } => {
                let sealed = key.seal(&self.tables.to_canonical_json());
                crypto::write_atomic(path, &sealed)?;
            }
        }
        self.dirty = false;
        Ok(())
    }

    /// Folds the journal into a fresh snapshot (plain stores only).
    pub fn checkpoint(&mut self) -> Result<(), StoreError> {
        if let Backend::Plain { dir, journal, journal_lines } = &mut self.backend {
            crypto::write_atomic(&dir.join(SNAPSHOT_FILE), &self.tables.to_canonical_json())?;
            journal.set_len(0)?;
            journal.sync_all()?;
            *journal_lines = 0;
            self.journal.clear();
        }
        Ok(())
    }

    /// Checks credentials against the users table. Unknown users cost the
    /// same hash work as known ones.
    pub fn authenticate(&self, username: &str, password: &str) -> Result<Role, StoreError> {
        static DUMMY: OnceLock<String> = OnceLock::new();
        let users = self.tables.table(table::USERS)?;
        let Some(row) = users.get(&Key(vec![Value::text(username)])) else {
            verify_password(password, DUMMY.get_or_init(|| hash_password("")));
            return Err(StoreError::BadCredentials);
        };
        let hash = row[2].as_text().unwrap_or_default();
        if !verify_password(password, hash) {
            return Err(StoreError::BadCredentials);
        }
        if row[3].as_bool() != Some(true) {
            return Err(StoreError::Disabled);
        }
        row[1].as_text().unwrap_or_default().parse().map_err(StoreError::InvalidRecord)
    }

    /// Seals an auxiliary file under the store key; `None` for plain stores.
    pub fn seal_blob(&self, plaintext: &[u8]) -> Option<Vec<u8>> {
        match &self.backend {
            Backend::Encrypted { key, .. } => Some(key.seal(plaintext)),
            _ => None,
        }
    }

    pub fn open_blob(&self, container: &[u8]) -> Result<Vec<u8>, StoreError> {
        match &self.backend {
            Backend::Encrypted { key, .. } => Ok(key.open(container)?),
            _ => Ok(container.to_vec()),
        }
    }

    pub fn is_encrypted(&self) -> bool {
        matches!(self.backend, Backend::Encrypted { .. })
    }
}

/// A users-table row.
pub fn user_row(username: &str, role: Role, password_hash: &str, enabled: bool) -> Row {
    vec![Value::text(username), Value::text(role.as_str()), Value::text(password_hash), Value::Bool(enabled)]
}

#[cfg(test)]
mod tests {
    use super::table::{STATIONS, USERS};
    use super::*;

    #[test]
    fn authenticate_users() {
        let mut s = Datastore::in_memory();
        let h = auth::hash_password_with("pw", 100);
        s.apply(Role::Admin, USERS, Change::Insert { row: user_row("ann", Role::Operator, &h, true) }, 0).unwrap();
        s.apply(Role::Admin, USERS, Change::Insert { row: user_row("bob", Role::Viewer, &h, false) }, 0).unwrap();
        assert_eq!(s.authenticate("ann", "pw"), Ok(Role::Operator));
        assert_eq!(s.authenticate("ann", "px"), Err(StoreError::BadCredentials));
        assert_eq!(s.authenticate("bob", "pw"), Err(StoreError::Disabled));
        assert_eq!(s.authenticate("cat", "pw"), Err(StoreError::BadCredentials));
    }

    fn station_row(addr: i64, name: &str) -> Row {
        vec![Value::Int(addr), Value::text(name), Value::Int(19200), Value::text("UNKNOWN"), Value::Null]
    }

    #[test]
    fn revisions_and_errors() {
        let mut s = Datastore::in_memory();
        assert_eq!(s.apply(Role::Operator, STATIONS, Change::Insert { row: station_row(1, "a") }, 10).unwrap(), 1);
        assert!(matches!(
            s.apply(Role::Operator, STATIONS, Change::Insert { row: station_row(1, "b") }, 11),
            Err(StoreError::DuplicateKey { .. })
        ));
        assert_eq!(s.apply(Role::Operator, STATIONS, Change::Upsert { row: station_row(1, "b") }, 12).unwrap(), 2);
        let key = Key(vec![Value::Int(9)]);
        assert!(matches!(s.apply(Role::Admin, STATIONS, Change::Delete { key }, 13), Err(StoreError::NotFound { .. })));
        let t = s.tables().table(STATIONS).unwrap();
        assert_eq!((t.revision, t.modified_at, t.len()), (2, 12, 1));
    }

    #[test]
    fn role_checks() {
        let mut s = Datastore::in_memory();
        let err = s.apply(Role::Viewer, STATIONS, Change::Upsert { row: station_row(1, "a") }, 0).unwrap_err();
        assert!(matches!(err, StoreError::Forbidden { .. }));
        assert!(s.table(Role::Operator, USERS).is_err());
        assert!(s.table(Role::Viewer, STATIONS).is_ok());
        assert_eq!(s.tables().table(STATIONS).unwrap().revision, 0);
    }

    #[test]
    fn replay_matches_live_state() {
        let mut s = Datastore::in_memory();
        for i in 0..20 {
            s.apply(Role::Admin, STATIONS, Change::Upsert { row: station_row(i % 7, &format!("s{i}")) }, i as u64)
                .unwrap();
        }
        s.apply(Role::Admin, STATIONS, Change::Delete { key: Key(vec![Value::Int(3)]) }, 99).unwrap();
        let rebuilt = replay(TableSet::standard(), s.journal()).unwrap();
        assert_eq!(rebuilt.to_canonical_json(), s.tables().to_canonical_json());
    }

    #[test]
    fn plain_store_survives_torn_journal() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = Datastore::open_plain(dir.path()).unwrap();
            s.apply(Role::Admin, STATIONS, Change::Upsert { row: station_row(1, "a") }, 1).unwrap();
            s.apply(Role::Admin, STATIONS, Change::Upsert { row: station_row(2, "b") }, 2).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(dir.path().join(JOURNAL_FILE)).unwrap();
        f.write_all(b"{\"table\":\"stations\",\"revi").unwrap();
        drop(f);

        let mut s = Datastore::open_plain(dir.path()).unwrap();
        assert_eq!(s.tables().table(STATIONS).unwrap().len(), 2);
        s.apply(Role::Admin, STATIONS, Change::Upsert { row: station_row(3, "c") }, 3).unwrap();
        s.checkpoint().unwrap();
        s.apply(Role::Admin, STATIONS, Change::Upsert { row: station_row(4, "d") }, 4).unwrap();
        let expected = s.tables().to_canonical_json();
        drop(s);
        let s = Datastore::open_plain(dir.path()).unwrap();
        assert_eq!(s.tables().to_canonical_json(), expected);
    }

    #[test]
    fn encrypted_store_reopens() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(ENCRYPTED_FILE);
        let expected = {
            let mut s = Datastore::open_encrypted(&path, "pw", 100).unwrap();
            s.batch(|s| {
                s.apply(Role::Admin, STATIONS, Change::Upsert { row: station_row(1, "a") }, 1)?;
                s.apply(Role::Admin, STATIONS, Change::Upsert { row: station_row(2, "b") }, 2)
            })
            .unwrap();
            s.tables().to_canonical_json()
        };
        let s = Datastore::open_encrypted(&path, "pw", 100).unwrap();
        assert_eq!(s.tables().to_canonical_json(), expected);
        assert!(matches!(
            Datastore::open_encrypted(&path, "nope", 100),
            Err(StoreError::Crypto(CryptoError::WrongPassphrase))
        ));
        let raw = fs::read(&path).unwrap();
        assert!(!raw.windows(8).any(|w| w == b"stations"));
    }
}
