//! Compact store format for handheld replicas.
//!
//! Strings and byte fields are limited to 255 bytes and reals are narrowed
//! to binary32. A compact table body is encoded as (integers little-endian):
//!
//! ```text
//! u8 len, name
//! u64 revision, u64 base_revision, u64 modified_at
//! u8 column count, then per column: u8 len, name, u8 type, u8 nullable
//! u8 key count, then u8 column index per key part
//! u32 row count, then per row per column: u8 tag, value
//!     tag 0 null | 1 bool (u8) | 2 int (i64) | 3 real (f32)
//!         4 text (u8 len, utf-8) | 5 bytes (u8 len, raw)
//! u32 flag count, then per flag: u32 row index, u8 column index
//! ```
//!
//! Flags mark reals that lost precision when narrowed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::SyncError;
use crate::store::table::{Column, ColumnType, Key, Row, Schema, Table, Value};

pub const COMPACT_MAX_LEN: usize = 255;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CompactValue {
    Null,
    Bool(bool),
    Int(i64),
    Real(f32),
    Text(CompactStr),
    Bytes(CompactBytes),
}

/// Index into the owning table's byte pool.
pub type CompactStr = u32;
pub type CompactBytes = u32;

/// A table in compact form. Text and byte values live in `pool`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactTable {
    pub schema: Schema,
    pub revision: u64,
    /// Central revision both sides agreed on at the last sync.
    pub base_revision: u64,
    pub modified_at: u64,
    rows: Vec<Vec<CompactValue>>,
    pool: Vec<Vec<u8>>,
    /// (row index, column index) of reals narrowed inexactly.
    pub precision_flags: BTreeSet<(u32, u8)>,
}

/// Records that cannot be represented in compact form, by key, with the
/// offending columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionLoss {
    pub table: String,
    pub records: Vec<(String, Vec<String>)>,
}

impl fmt::Display for ConversionLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "`{}`:", self.table)?;
        for (key, fields) in &self.records {
            write!(f, " [{key}: {}]", fields.join(","))?;
        }
        Ok(())
    }
}

fn type_code(ty: ColumnType) -> u8 {
    match ty {
        ColumnType::Bool => 1,
        ColumnType::Int => 2,
        ColumnType::Real => 3,
        ColumnType::Text => 4,
        ColumnType::Bytes => 5,
    }
}

fn type_from_code(code: u8) -> Option<ColumnType> {
    Some(match code {
        1 => ColumnType::Bool,
        2 => ColumnType::Int,
        3 => ColumnType::Real,
        4 => ColumnType::Text,
        5 => ColumnType::Bytes,
        _ => return None,
    })
}

impl CompactTable {
    pub fn empty(schema: Schema) -> Self {
        CompactTable {
            schema,
            revision: 0,
            base_revision: 0,
            modified_at: 0,
            rows: Vec::new(),
            pool: Vec::new(),
            precision_flags: BTreeSet::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.schema.name
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Converts a central table. Fails listing every record over the limits;
    /// nothing is truncated.
    pub fn from_table(table: &Table) -> Result<Self, ConversionLoss> {
        let name = table.name().to_string();
        let mut loss = ConversionLoss { table: name.clone(), records: Vec::new() };
        if name.len() > COMPACT_MAX_LEN
            || table.schema.columns.len() > COMPACT_MAX_LEN
            || table.schema.columns.iter().any(|c| c.name.len() > COMPACT_MAX_LEN)
        {
            loss.records.push((String::new(), vec!["<schema>".into()]));
            return Err(loss);
        }
        let mut out = CompactTable::empty(table.schema.clone());
        out.revision = table.revision;
        out.base_revision = table.revision;
        out.modified_at = table.modified_at;
        for (ri, (key, row)) in table.entries().enumerate() {
            let mut bad = Vec::new();
            let mut crow = Vec::with_capacity(row.len());
            for (ci, (col, v)) in table.schema.columns.iter().zip(row).enumerate() {
                let cv = match v {
                    Value::Null => CompactValue::Null,
                    Value::Bool(b) => CompactValue::Bool(*b),
                    Value::Int(i) => CompactValue::Int(*i),
                    Value::Real(r) => {
                        let n = *r as f32;
                        if !n.is_finite() {
                            bad.push(col.name.clone());
                            CompactValue::Null
                        } else {
                            if f64::from(n) != *r {
                                out.precision_flags.insert((ri as u32, ci as u8));
                            }
                            CompactValue::Real(n)
                        }
                    }
                    Value::Text(s) if s.len() <= COMPACT_MAX_LEN => {
                        out.pool.push(s.as_bytes().to_vec());
                        CompactValue::Text(out.pool.len() as u32 - 1)
                    }
                    Value::Bytes(b) if b.len() <= COMPACT_MAX_LEN => {
                        out.pool.push(b.clone());
                        CompactValue::Bytes(out.pool.len() as u32 - 1)
                    }
                    Value::Text(_) | Value::Bytes(_) => {
                        bad.push(col.name.clone());
                        CompactValue::Null
                    }
                };
                crow.push(cv);
            }
            if !bad.is_empty() {
                loss.records.push((key.to_string(), bad));
            }
            out.rows.push(crow);
        }
        if loss.records.is_empty() {
            Ok(out)
        } else {
            Err(loss)
        }
    }

    fn widen(&self, v: &CompactValue) -> Value {
        match *v {
            CompactValue::Null => Value::Null,
            CompactValue::Bool(b) => Value::Bool(b),
            CompactValue::Int(i) => Value::Int(i),
            CompactValue::Real(r) => Value::Real(f64::from(r)),
            CompactValue::Text(i) => Value::Text(String::from_utf8_lossy(&self.pool[i as usize]).into_owned()),
            CompactValue::Bytes(i) => Value::Bytes(self.pool[i as usize].clone()),
        }
    }

    /// Central rows, in key order. Reals widen exactly.
    pub fn to_rows(&self) -> Vec<Row> {
        self.rows.iter().map(|r| r.iter().map(|v| self.widen(v)).collect()).collect()
    }

    /// Inverse conversion to a central table carrying this revision.
    pub fn to_table(&self) -> Result<Table, SyncError> {
        let mut table = rows_to_table(&self.schema, self.to_rows())?;
        table.revision = self.revision;
        table.modified_at = self.modified_at;
        Ok(table)
    }

    /// Replaces the rows as a local (device-side) edit.
    pub fn set_rows(&mut self, rows: Vec<Row>, stamp: u64) -> Result<(), SyncError> {
        let table = rows_to_table(&self.schema, rows)?;
        let converted = CompactTable::from_table(&table).map_err(SyncError::ConversionLoss)?;
        self.rows = converted.rows;
        self.pool = converted.pool;
        self.precision_flags = converted.precision_flags;
        self.revision += 1;
        self.modified_at = stamp;
        Ok(())
    }

    /// True when both hold the same rows.
    pub fn same_rows(&self, other: &CompactTable) -> bool {
        self.schema == other.schema && self.to_rows() == other.to_rows()
    }

    pub fn key_of(&self, row: usize) -> Key {
        let widened: Row = self.rows[row].iter().map(|v| self.widen(v)).collect();
        self.schema.key_of(&widened)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_str(&mut out, self.name().as_bytes());
        out.extend_from_slice(&self.revision.to_le_bytes());
        out.extend_from_slice(&self.base_revision.to_le_bytes());
        out.extend_from_slice(&self.modified_at.to_le_bytes());
        out.push(self.schema.columns.len() as u8);
        for c in &self.schema.columns {
            put_str(&mut out, c.name.as_bytes());
            out.push(type_code(c.ty));
            out.push(c.nullable as u8);
        }
        out.push(self.schema.key.len() as u8);
        for &k in &self.schema.key {
            out.push(k as u8);
        }
        out.extend_from_slice(&(self.rows.len() as u32).to_le_bytes());
        for row in &self.rows {
            for v in row {
                match *v {
                    CompactValue::Null => out.push(0),
                    CompactValue::Bool(b) => out.extend_from_slice(&[1, b as u8]),
                    CompactValue::Int(i) => {
                        out.push(2);
                        out.extend_from_slice(&i.to_le_bytes());
                    }
                    CompactValue::Real(r) => {
                        out.push(3);
                        out.extend_from_slice(&r.to_le_bytes());
                    }
                    CompactValue::Text(i) => {
                        out.push(4);
                        put_str(&mut out, &self.pool[i as usize]);
                    }
                    CompactValue::Bytes(i) => {
                        out.push(5);
                        put_str(&mut out, &self.pool[i as usize]);
                    }
                }
            }
        }
        out.extend_from_slice(&(self.precision_flags.len() as u32).to_le_bytes());
        for &(r, c) in &self.precision_flags {
            out.extend_from_slice(&r.to_le_bytes());
            out.push(c);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, SyncError> {
        let mut r = Reader { bytes, pos: 0 };
        let name = r.string()?;
        let revision = r.u64()?;
        let base_revision = r.u64()?;
        let modified_at = r.u64()?;
        let ncols = r.u8()? as usize;
        let mut columns = Vec::with_capacity(ncols);
        for _ in 0..ncols {
            let cname = r.string()?;
            let ty = type_from_code(r.u8()?).ok_or_else(|| malformed("column type"))?;
            let nullable = r.u8()? != 0;
            columns.push(Column { name: cname, ty, nullable });
        }
        let nkey = r.u8()? as usize;
        let mut key = Vec::with_capacity(nkey);
        for _ in 0..nkey {
            let k = r.u8()? as usize;
            if k >= ncols {
                return Err(malformed("key column"));
            }
            key.push(k);
        }
        let schema = Schema { name, columns, key };
        let mut table = CompactTable::empty(schema);
        table.revision = revision;
        table.base_revision = base_revision;
        table.modified_at = modified_at;
        let nrows = r.u32()? as usize;
        for _ in 0..nrows {
            let mut row = Vec::with_capacity(ncols);
            for _ in 0..ncols {
                let v = match r.u8()? {
                    0 => CompactValue::Null,
                    1 => CompactValue::Bool(r.u8()? != 0),
                    2 => CompactValue::Int(i64::from_le_bytes(r.take(8)?.try_into().unwrap())),
                    3 => CompactValue::Real(f32::from_le_bytes(r.take(4)?.try_into().unwrap())),
                    4 => {
                        let s = r.short()?;
                        std::str::from_utf8(s).map_err(|_| malformed("text"))?;
                        table.pool.push(s.to_vec());
                        CompactValue::Text(table.pool.len() as u32 - 1)
                    }
                    5 => {
                        table.pool.push(r.short()?.to_vec());
                        CompactValue::Bytes(table.pool.len() as u32 - 1)
                    }
                    _ => return Err(malformed("value tag")),
                };
                row.push(v);
            }
            table.rows.push(row);
        }
        let nflags = r.u32()? as usize;
        for _ in 0..nflags {
            let row = r.u32()?;
            let col = r.u8()?;
            table.precision_flags.insert((row, col));
        }
        if r.pos != bytes.len() {
            return Err(malformed("trailing bytes"));
        }
        // Schema and key order must hold, as the central side would enforce.
        let rows = table.to_rows();
        let mut seen = BTreeSet::new();
        let mut prev: Option<Key> = None;
        for row in &rows {
            table.schema.validate(row).map_err(|e| SyncError::Protocol(e.to_string()))?;
            let k = table.schema.key_of(row);
            if prev.as_ref().is_some_and(|p| p >= &k) || !seen.insert(k.clone()) {
                return Err(malformed("row order"));
            }
            prev = Some(k);
        }
        Ok(table)
    }
}

fn rows_to_table(schema: &Schema, rows: Vec<Row>) -> Result<Table, SyncError> {
    let mut table = Table::new(schema.clone());
    for row in rows {
        schema.validate(&row).map_err(|e| SyncError::Protocol(e.to_string()))?;
        if let Some(old) = table.put(row) {
            return Err(SyncError::Protocol(format!("duplicate key {}", schema.key_of(&old))));
        }
    }
    Ok(table)
}

fn malformed(what: &str) -> SyncError {
    SyncError::Protocol(format!("malformed compact table: {what}"))
}

fn put_str(out: &mut Vec<u8>, s: &[u8]) {
    debug_assert!(s.len() <= COMPACT_MAX_LEN);
    out.push(s.len() as u8);
    out.extend_from_slice(s);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SyncError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| malformed("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, SyncError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, SyncError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, SyncError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn short(&mut self) -> Result<&'a [u8], SyncError> {
        let n = self.u8()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String, SyncError> {
        String::from_utf8(self.short()?.to_vec()).map_err(|_| malformed("name"))
    }
}

/// The device-side replica: compact tables by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompactStore {
    pub tables: BTreeMap<String, CompactTable>,
}

impl CompactStore {
    pub fn table(&self, name: &str) -> Option<&CompactTable> {
        self.tables.get(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::table::TableSet;

    fn sample() -> Table {
        let set = TableSet::standard();
        let mut t = set.table("transponders").unwrap().clone();
        t.put(vec![
            Value::text("E000000000000001"),
            Value::Int(7),
            Value::Int(1),
            Value::Bytes(vec![0x54, 7, 0]),
            Value::Int(3),
            Value::Null,
        ]);
        t.put(vec![
            Value::text("E000000000000002"),
            Value::Null,
            Value::Null,
            Value::Null,
            Value::Null,
            Value::Int(-1),
        ]);
        t.revision = 6;
        t.modified_at = 1234;
        t
    }

    #[test]
    fn roundtrip_within_limits() {
        let t = sample();
        let c = CompactTable::from_table(&t).unwrap();
        assert!(c.precision_flags.is_empty());
        let bytes = c.encode();
        let d = CompactTable::decode(&bytes).unwrap();
        assert_eq!(d, c);
        let back = d.to_table().unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn oversize_text_is_reported() {
        let mut t = sample();
        t.put(vec![Value::text("X".repeat(300)), Value::Null, Value::Null, Value::Null, Value::Null, Value::Null]);
        let loss = CompactTable::from_table(&t).unwrap_err();
        assert_eq!(loss.records, vec![("X".repeat(300), vec!["uid".to_string()])]);
    }

    #[test]
    fn narrowing_flags_inexact_reals() {
        let schema =
            Schema::new("r", vec![Column::new("k", ColumnType::Int), Column::new("x", ColumnType::Real)], &["k"]);
        let mut t = Table::new(schema);
        t.put(vec![Value::Int(1), Value::Real(0.1)]);
        t.put(vec![Value::Int(2), Value::Real(0.5)]);
        let c = CompactTable::from_table(&t).unwrap();
        assert_eq!(c.precision_flags, BTreeSet::from([(0, 1)]));
        let rows = c.to_rows();
        assert_eq!(rows[0][1], Value::Real(f64::from(0.1f32)));
        assert_eq!(rows[1][1], Value::Real(0.5));

        t.put(vec![Value::Int(3), Value::Real(1e300)]);
        assert!(CompactTable::from_table(&t).is_err());
    }

    #[test]
    fn decode_rejects_garbage() {
        let bytes = CompactTable::from_table(&sample()).unwrap().encode();
        for cut in 0..bytes.len() {
            assert!(CompactTable::decode(&bytes[..cut]).is_err());
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(CompactTable::decode(&extra).is_err());
    }
}
