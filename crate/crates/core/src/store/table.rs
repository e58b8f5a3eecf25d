//! Typed tables with per-table revision counters.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::StoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Bool,
    Int,
    Real,
    Text,
    Bytes,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ColumnType,
    #[serde(default)]
    pub nullable: bool,
}

impl Column {
    pub fn new(name: &str, ty: ColumnType) -> Self {
        Column { name: name.to_string(), ty, nullable: false }
    }

    pub fn nullable(name: &str, ty: ColumnType) -> Self {
        Column { name: name.to_string(), ty, nullable: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub name: String,
    pub columns: Vec<Column>,
    /// Indices of the primary-key columns, in key order.
    pub key: Vec<usize>,
}

impl Schema {
    pub fn new(name: &str, columns: Vec<Column>, key: &[&str]) -> Self {
        let key = key.iter().map(|k| columns.iter().position(|c| c.name == *k).expect("key column exists")).collect();
        Schema { name: name.to_string(), columns, key }
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column(&self, name: &str) -> Result<(usize, &Column), StoreError> {
        self.columns
            .iter()
            .enumerate()
            .find(|(_, c)| c.name == name)
            .ok_or_else(|| StoreError::UnknownColumn { table: self.name.clone(), column: name.to_string() })
    }

    pub fn validate(&self, row: &Row) -> Result<(), StoreError> {
        if row.len() != self.columns.len() {
            return Err(StoreError::InvalidRecord(format!(
                "{}: expected {} columns, got {}",
                self.name,
                self.columns.len(),
                row.len()
            )));
        }
        for (col, value) in self.columns.iter().zip(row) {
            let ok = match value {
                Value::Null => col.nullable && !self.key.contains(&self.column_index(&col.name).unwrap()),
                Value::Real(r) => col.ty == ColumnType::Real && r.is_finite(),
                v => v.column_type() == Some(col.ty),
            };
            if !ok {
                return Err(StoreError::InvalidRecord(format!(
                    "{}.{}: {value:?} is not a valid {:?}",
                    self.name, col.name, col.ty
                )));
            }
        }
        Ok(())
    }

    pub fn key_of(&self, row: &Row) -> Key {
        Key(self.key.iter().map(|&i| row[i].clone()).collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Real(f64),
    Text(String),
    Bytes(#[serde(with = "hex_bytes")] Vec<u8>),
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode_upper(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

impl Value {
    pub fn column_type(&self) -> Option<ColumnType> {
        match self {
            Value::Null => None,
            Value::Bool(_) => Some(ColumnType::Bool),
            Value::Int(_) => Some(ColumnType::Int),
            Value::Real(_) => Some(ColumnType::Real),
            Value::Text(_) => Some(ColumnType::Text),
            Value::Bytes(_) => Some(ColumnType::Bytes),
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Value::Null => 0,
            Value::Bool(_) => 1,
            Value::Int(_) => 2,
            Value::Real(_) => 3,
            Value::Text(_) => 4,
            Value::Bytes(_) => 5,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            Value::Bytes(b) => Some(b),
            _ => None,
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn text(s: impl Into<String>) -> Value {
        Value::Text(s.into())
    }

    pub fn opt_int(v: Option<i64>) -> Value {
        v.map_or(Value::Null, Value::Int)
    }

    pub fn opt_text(v: Option<impl Into<String>>) -> Value {
        v.map_or(Value::Null, |s| Value::Text(s.into()))
    }
}

// Total order: by variant, then by content; reals by `total_cmp`.
impl Ord for Value {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Value::Bool(a), Value::Bool(b)) => a.cmp(b),
            (Value::Int(a), Value::Int(b)) => a.cmp(b),
            (Value::Real(a), Value::Real(b)) => a.total_cmp(b),
            (Value::Text(a), Value::Text(b)) => a.cmp(b),
            (Value::Bytes(a), Value::Bytes(b)) => a.cmp(b),
            (a, b) => a.rank().cmp(&b.rank()),
        }
    }
}

impl PartialOrd for Value {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Value {}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => Ok(()),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Real(r) => write!(f, "{r}"),
            Value::Text(t) => f.write_str(t),
            Value::Bytes(b) => f.write_str(&hex::encode_upper(b)),
        }
    }
}

pub type Row = Vec<Value>;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Key(pub Vec<Value>);

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(Value::to_string).collect();
        f.write_str(&parts.join("/"))
    }
}

/// One table: schema, rows by primary key, revision, and the stamp of the
/// last mutation (milliseconds, caller supplied).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "TableRepr", try_from = "TableRepr")]
pub struct Table {
    pub schema: Schema,
    pub revision: u64,
    pub modified_at: u64,
    rows: BTreeMap<Key, Row>,
}

#[derive(Serialize, Deserialize)]
struct TableRepr {
    schema: Schema,
    revision: u64,
    modified_at: u64,
    rows: Vec<Row>,
}

impl From<Table> for TableRepr {
    fn from(t: Table) -> Self {
        TableRepr {
            schema: t.schema,
            revision: t.revision,
            modified_at: t.modified_at,
            rows: t.rows.into_values().collect(),
        }
    }
}

impl TryFrom<TableRepr> for Table {
    type Error = StoreError;

    fn try_from(r: TableRepr) -> Result<Self, StoreError> {
        let mut table = Table::new(r.schema);
        table.revision = r.revision;
        table.modified_at = r.modified_at;
        for row in r.rows {
            table.schema.validate(&row)?;
            let key = table.schema.key_of(&row);
            if table.rows.insert(key.clone(), row).is_some() {
                return Err(StoreError::DuplicateKey { table: table.schema.name.clone(), key: key.to_string() });
            }
        }
        Ok(table)
    }
}

impl Table {
    pub fn new(schema: Schema) -> Self {
        Table { schema, revision: 0, modified_at: 0, rows: BTreeMap::new() }
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

    pub fn get(&self, key: &Key) -> Option<&Row> {
        self.rows.get(key)
    }

    /// Rows in primary-key order.
    pub fn rows(&self) -> impl Iterator<Item = &Row> {
        self.rows.values()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Key, &Row)> {
        self.rows.iter()
    }

    pub fn contains(&self, key: &Key) -> bool {
        self.rows.contains_key(key)
    }

    /// Raw row replacement without revision bookkeeping.
    pub(crate) fn put(&mut self, row: Row) -> Option<Row> {
        let key = self.schema.key_of(&row);
        self.rows.insert(key, row)
    }

    pub(crate) fn take(&mut self, key: &Key) -> Option<Row> {
        self.rows.remove(key)
    }

    pub(crate) fn clear_rows(&mut self) {
        self.rows.clear();
    }

    /// Same rows, ignoring revision and stamp.
    pub fn same_content(&self, other: &Table) -> bool {
        self.schema == other.schema && self.rows == other.rows
    }
}

pub const TRANSPONDERS: &str = "transponders";
pub const STATIONS: &str = "stations";
pub const EVENTS: &str = "events";
pub const USERS: &str = "users";
pub const TEMPLATES: &str = "templates";
pub const REPORT_PATTERNS: &str = "report_patterns";
pub const ALARM_RULES: &str = "alarm_rules";

pub fn standard_schemas() -> Vec<Schema> {
    use ColumnType::*;
    vec![
        Schema::new(
            TRANSPONDERS,
            vec![
                Column::new("uid", Text),
                Column::nullable("template_id", Int),
                Column::nullable("version", Int),
                Column::nullable("last_payload", Bytes),
                Column::nullable("last_station", Int),
                Column::nullable("last_seen", Int),
            ],
            &["uid"],
        ),
        Schema::new(
            STATIONS,
            vec![
                Column::new("addr", Int),
                Column::new("name", Text),
                Column::new("baud_class", Int),
                Column::new("status", Text),
                Column::nullable("last_contact", Int),
            ],
            &["addr"],
        ),
        Schema::new(
            EVENTS,
            vec![
                Column::new("station", Int),
                Column::new("seq", Int),
                Column::new("kind", Text),
                Column::nullable("uid", Text),
                Column::new("sim_timestamp", Int),
                Column::new("ingest_time", Int),
                Column::nullable("subject_station", Int),
                Column::nullable("detail", Text),
            ],
            &["station", "seq"],
        ),
        Schema::new(
            USERS,
            vec![
                Column::new("username", Text),
                Column::new("role", Text),
                Column::new("password_hash", Text),
                Column::new("enabled", Bool),
            ],
            &["username"],
        ),
        Schema::new(
            TEMPLATES,
            vec![
                Column::new("template_id", Int),
                Column::new("version", Int),
                Column::new("name", Text),
                Column::new("document", Text),
            ],
            &["template_id", "version"],
        ),
        Schema::new(
            REPORT_PATTERNS,
            vec![
                Column::new("name", Text),
                Column::new("source", Text),
                Column::new("filter", Text),
                Column::new("columns", Text),
                Column::nullable("sort", Text),
                Column::new("format", Text),
            ],
            &["name"],
        ),
        Schema::new(
            ALARM_RULES,
            vec![Column::new("name", Text), Column::new("trigger", Text), Column::new("enabled", Bool)],
            &["name"],
        ),
    ]
}

/// All tables of one store, keyed by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSet {
    tables: BTreeMap<String, Table>,
}

impl Default for TableSet {
    fn default() -> Self {
        Self::standard()
    }
}

impl TableSet {
    pub fn empty() -> Self {
        TableSet { tables: BTreeMap::new() }
    }

    pub fn standard() -> Self {
        TableSet { tables: standard_schemas().into_iter().map(|s| (s.name.clone(), Table::new(s))).collect() }
    }

    pub fn table(&self, name: &str) -> Result<&Table, StoreError> {
        self.tables.get(name).ok_or_else(|| StoreError::UnknownTable(name.to_string()))
    }

    pub(crate) fn table_mut(&mut self, name: &str) -> Result<&mut Table, StoreError> {
        self.tables.get_mut(name).ok_or_else(|| StoreError::UnknownTable(name.to_string()))
    }

    pub fn tables(&self) -> impl Iterator<Item = &Table> {
        self.tables.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tables.keys().map(String::as_str)
    }

    pub(crate) fn insert_table(&mut self, table: Table) {
        self.tables.insert(table.schema.name.clone(), table);
    }

    pub fn revisions(&self) -> BTreeMap<String, u64> {
        self.tables.iter().map(|(n, t)| (n.clone(), t.revision)).collect()
    }

    /// Canonical serialization; equal bytes means equal stores.
    pub fn to_canonical_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("table set serializes")
    }
}
