//! Event journal queries over the central events table.

use serde::{Deserialize, Serialize};

use super::ApiError;
use crate::net::EventKind;
use crate::rf::Uid;
use crate::store::{Row, Table, Value};

pub const MAX_PAGE: usize = 1000;
pub const DEFAULT_PAGE: usize = 100;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SortOrder {
    #[default]
    Asc,
    Desc,
}

/// Conjunctive filters plus a page window. Results are ordered by
/// simulated time, then station, then seq; `Desc` is the exact reverse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JournalQuery {
    #[serde(default)]
    pub station: Option<u8>,
    #[serde(default)]
    pub kind: Option<EventKind>,
    #[serde(default)]
    pub uid: Option<Uid>,
    /// Inclusive lower bound on simulated time, microseconds.
    #[serde(default)]
    pub from_us: Option<u64>,
    /// Inclusive upper bound on simulated time, microseconds.
    #[serde(default)]
    pub to_us: Option<u64>,
    #[serde(default)]
    pub offset: usize,
    #[serde(default = "default_limit")]
    pub limit: usize,
    #[serde(default)]
    pub order: SortOrder,
}

fn default_limit() -> usize {
    DEFAULT_PAGE
}

impl Default for JournalQuery {
    fn default() -> Self {
        JournalQuery {
            station: None,
            kind: None,
            uid: None,
            from_us: None,
            to_us: None,
            offset: 0,
            limit: DEFAULT_PAGE,
            order: SortOrder::Asc,
        }
    }
}

impl JournalQuery {
    pub fn validate(&self) -> Result<(), ApiError> {
        if !(1..=MAX_PAGE).contains(&self.limit) {
            return Err(ApiError::BadRequest(format!("limit must be within 1..={MAX_PAGE}")));
        }
        if let (Some(a), Some(b)) = (self.from_us, self.to_us) {
            if a > b {
                return Err(ApiError::BadRequest("time range start after end".into()));
            }
        }
        Ok(())
    }

    pub fn matches(&self, e: &EventView) -> bool {
        self.station.is_none_or(|s| e.station == s)
            && self.kind.is_none_or(|k| e.kind == k.as_str())
            && self.uid.is_none_or(|u| e.uid.as_deref() == Some(u.to_string().as_str()))
            && self.from_us.is_none_or(|t| e.sim_timestamp >= t)
            && self.to_us.is_none_or(|t| e.sim_timestamp <= t)
    }
}

/// One row of the events table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventView {
    pub station: u8,
    pub seq: u64,
    pub kind: String,
    pub uid: Option<String>,
    pub sim_timestamp: u64,
    pub ingest_time: u64,
    pub subject_station: Option<u8>,
    pub detail: Option<String>,
}

impl EventView {
    pub fn from_row(row: &Row) -> Self {
        let int = |i: usize| row[i].as_int().unwrap_or_default();
        EventView {
            station: int(0) as u8,
            seq: int(1) as u64,
            kind: row[2].as_text().unwrap_or_default().to_string(),
            uid: row[3].as_text().map(String::from),
            sim_timestamp: int(4) as u64,
            ingest_time: int(5) as u64,
            subject_station: row[6].as_int().map(|v| v as u8),
            detail: row[7].as_text().map(String::from),
        }
    }

    pub fn to_row(&self) -> Row {
        vec![
            Value::Int(self.station as i64),
            Value::Int(self.seq as i64),
            Value::text(&self.kind),
            Value::opt_text(self.uid.clone()),
            Value::Int(self.sim_timestamp as i64),
            Value::Int(self.ingest_time as i64),
            Value::opt_int(self.subject_station.map(i64::from)),
            Value::opt_text(self.detail.clone()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalPage {
    /// Size of the filtered set, independent of the window.
    pub total: usize,
    pub offset: usize,
    pub events: Vec<EventView>,
}

pub fn journal_query(query: &JournalQuery, events: &Table) -> Result<JournalPage, ApiError> {
    query.validate()?;
    let mut hits: Vec<EventView> = events.rows().map(EventView::from_row).filter(|e| query.matches(e)).collect();
    hits.sort_by_key(|e| (e.sim_timestamp, e.station, e.seq));
    if query.order == SortOrder::Desc {
        hits.reverse();
    }
    let total = hits.len();
    let events = hits.into_iter().skip(query.offset).take(query.limit).collect();
    Ok(JournalPage { total, offset: query.offset, events })
}
