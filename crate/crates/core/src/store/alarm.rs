//! Alarm rules evaluated against ingested events and station liveness.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::table::{Row, Value};
use super::StoreError;
use crate::net::{EventKind, EventRecord};
use crate::rf::Uid;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlarmTrigger {
    /// A listed tag enters the field of a listed station (any station when
    /// `stations` is empty).
    Watchlist {
        uids: Vec<Uid>,
        #[serde(default)]
        stations: Vec<u8>,
    },
    /// No contact with the station for longer than `silent_for_us` of
    /// simulated time. Fires once per silence.
    StationSilent {
        #[serde(default)]
        station: Option<u8>,
        silent_for_us: u64,
    },
    BufferOverrun {
        #[serde(default)]
        stations: Vec<u8>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlarmRule {
    pub name: String,
    pub trigger: AlarmTrigger,
    #[serde(default = "yes")]
    pub enabled: bool,
}

fn yes() -> bool {
    true
}

impl AlarmRule {
    pub fn to_row(&self) -> Row {
        vec![
            Value::text(&self.name),
            Value::text(serde_json::to_string(&self.trigger).expect("trigger serializes")),
            Value::Bool(self.enabled),
        ]
    }

    pub fn from_row(row: &Row) -> Result<Self, StoreError> {
        let name = row.first().and_then(Value::as_text).unwrap_or_default().to_string();
        let trigger = row.get(1).and_then(Value::as_text).unwrap_or_default();
        let trigger = serde_json::from_str(trigger)
            .map_err(|e| StoreError::InvalidRecord(format!("alarm rule `{name}`: {e}")))?;
        let enabled = row.get(2).and_then(Value::as_bool).unwrap_or(true);
        Ok(AlarmRule { name, trigger, enabled })
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.name.is_empty() {
            return Err(StoreError::InvalidRecord("empty alarm rule name".into()));
        }
        match &self.trigger {
            AlarmTrigger::Watchlist { uids, .. } if uids.is_empty() => {
                Err(StoreError::InvalidRecord("watchlist needs at least one uid".into()))
            }
            AlarmTrigger::StationSilent { silent_for_us: 0, .. } => {
                Err(StoreError::InvalidRecord("silence threshold must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alarm {
    pub rule: String,
    pub station: u8,
    pub uid: Option<Uid>,
    pub at_us: u64,
    pub detail: String,
}

fn station_listed(stations: &[u8], st: u8) -> bool {
    stations.is_empty() || stations.contains(&st)
}

/// Rules that fire on a single event. ALARM events never trigger rules.
pub fn evaluate_event(rules: &[AlarmRule], event: &EventRecord) -> Vec<Alarm> {
    let mut out = Vec::new();
    for rule in rules.iter().filter(|r| r.enabled) {
        let hit = match (&rule.trigger, event.kind) {
            (AlarmTrigger::Watchlist { uids, stations }, EventKind::TagEnter) => {
                event.uid.is_some_and(|u| uids.contains(&u)) && station_listed(stations, event.station)
            }
            (AlarmTrigger::BufferOverrun { stations }, EventKind::BufferOverrunWarning) => {
                station_listed(stations, event.station)
            }
            _ => false,
        };
        if hit {
            let detail = match event.uid {
                Some(uid) => format!("{}: {} {uid} at station {}", rule.name, event.kind, event.station),
                None => format!("{}: {} at station {}", rule.name, event.kind, event.station),
            };
            out.push(Alarm {
                rule: rule.name.clone(),
                station: event.station,
                uid: event.uid,
                at_us: event.sim_timestamp_us,
                detail,
            });
        }
    }
    out
}

/// Per-silence latch for station-silent rules.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlarmEngine {
    fired: BTreeSet<(String, u8)>,
}

impl AlarmEngine {
    /// `contacts` holds each known station with its last contact time
    /// (`None` = never, measured from time zero).
    pub fn tick(&mut self, rules: &[AlarmRule], contacts: &[(u8, Option<u64>)], now_us: u64) -> Vec<Alarm> {
        let mut out = Vec::new();
        for rule in rules.iter().filter(|r| r.enabled) {
            let AlarmTrigger::StationSilent { station, silent_for_us } = &rule.trigger else {
                continue;
            };
            for &(addr, last) in contacts {
                if station.is_some_and(|s| s != addr) {
                    continue;
                }
                let silence = now_us.saturating_sub(last.unwrap_or(0));
                let key = (rule.name.clone(), addr);
                if silence > *silent_for_us {
                    if self.fired.insert(key) {
                        out.push(Alarm {
                            rule: rule.name.clone(),
                            station: addr,
                            uid: None,
                            at_us: now_us,
                            detail: format!("{}: station {addr} silent for {silence} us", rule.name),
                        });
                    }
                } else {
                    self.fired.remove(&key);
                }
            }
        }
        // Drop latches of rules that no longer exist.
        self.fired.retain(|(name, _)| rules.iter().any(|r| &r.name == name));
        out
    }

    pub fn is_latched(&self, rule: &str, station: u8) -> bool {
        self.fired.contains(&(rule.to_string(), station))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(kind: EventKind, station: u8, uid: Option<u64>) -> EventRecord {
        EventRecord { seq: 1, station, kind, uid: uid.map(Uid::from_serial), sim_timestamp_us: 42 }
    }

    #[test]
    fn watchlist_fires_on_enter_only() {
        let rules = vec![AlarmRule {
            name: "w".into(),
            trigger: AlarmTrigger::Watchlist { uids: vec![Uid::from_serial(9)], stations: vec![3] },
            enabled: true,
        }];
        assert_eq!(evaluate_event(&rules, &ev(EventKind::TagEnter, 3, Some(9))).len(), 1);
        assert!(evaluate_event(&rules, &ev(EventKind::TagLeave, 3, Some(9))).is_empty());
        assert!(evaluate_event(&rules, &ev(EventKind::TagEnter, 4, Some(9))).is_empty());
        assert!(evaluate_event(&rules, &ev(EventKind::TagEnter, 3, Some(8))).is_empty());
        assert!(evaluate_event(&rules, &ev(EventKind::Alarm, 3, Some(9))).is_empty());
    }

    #[test]
    fn buffer_overrun_rule() {
        let rules = vec![AlarmRule {
            name: "b".into(),
            trigger: AlarmTrigger::BufferOverrun { stations: vec![] },
            enabled: true,
        }];
        let alarms = evaluate_event(&rules, &ev(EventKind::BufferOverrunWarning, 7, None));
        assert_eq!(alarms.len(), 1);
        assert_eq!(alarms[0].station, 7);
    }

    #[test]
    fn silence_fires_once_then_rearms() {
        let rules = vec![AlarmRule {
            name: "s".into(),
            trigger: AlarmTrigger::StationSilent { station: Some(3), silent_for_us: 60_000_000 },
            enabled: true,
        }];
        let mut engine = AlarmEngine::default();
        let contacts = [(3, Some(0)), (4, Some(0))];
        assert!(engine.tick(&rules, &contacts, 60_000_000).is_empty());
        assert_eq!(engine.tick(&rules, &contacts, 61_000_000).len(), 1);
        assert!(engine.tick(&rules, &contacts, 62_000_000).is_empty());
        // contact resumes, then silence again
        assert!(engine.tick(&rules, &[(3, Some(62_000_000))], 62_000_001).is_empty());
        assert!(!engine.is_latched("s", 3));
        assert_eq!(engine.tick(&rules, &[(3, Some(62_000_000))], 123_000_000).len(), 1);
    }

    #[test]
    fn disabled_rules_ignored_and_rows_roundtrip() {
        let rule = AlarmRule {
            name: "w".into(),
            trigger: AlarmTrigger::Watchlist { uids: vec![Uid::from_serial(1)], stations: vec![] },
            enabled: false,
        };
        assert!(evaluate_event(std::slice::from_ref(&rule), &ev(EventKind::TagEnter, 1, Some(1))).is_empty());
        assert_eq!(AlarmRule::from_row(&rule.to_row()).unwrap(), rule);
    }
}
