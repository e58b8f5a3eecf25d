//! Control plane: the authenticated request/response API over the central
//! store, the simulated station network and handheld sync.
//!
//! Requests and responses are JSON. A request is an object whose `op`
//! field names the operation; see [`Request`].

pub mod config;
pub mod journal;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::net::TcpStream;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use thiserror::Error;

pub use config::{parse_password, DeviceSpec, ServiceConfig, StationDoc, TagDoc, WorldFile};
pub use journal::{journal_query, EventView, JournalPage, JournalQuery, SortOrder, MAX_PAGE};

use crate::codec::{self, CodecError, FieldValue, TagPayload, Template, TemplateDoc, TemplateRegistry};
use crate::net::{BaudClass, EventKind, EventRecord, Master, NetError, SimBus};
use crate::rf::{RfError, TagEmulation, Uid, DEFAULT_BLOCK_COUNT, DEFAULT_BLOCK_SIZE};
use crate::store::crypto::write_atomic;
use crate::store::table::{ALARM_RULES, EVENTS, REPORT_PATTERNS, STATIONS, TEMPLATES, TRANSPONDERS, USERS};
use crate::store::{
    evaluate_event, hash_password, render, user_row, Access, Alarm, AlarmEngine, AlarmRule, Change, Datastore, Key,
    ReportPattern, Role, Row, StoreError, Value, ENCRYPTED_FILE,
};
use crate::sync::{self, DeviceAgent, DeviceLink, SyncError, SyncOptions, Transport};

/// Station address carried by alarms raised centrally.
pub const CENTRAL_STATION: u8 = 255;
pub const SIM_STATE_FILE: &str = "sim_state.json";
pub const SIM_STATE_SEALED: &str = "sim_state.enc";
pub const ARCHIVE_DIR: &str = "archive";

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("unauthenticated: unknown or expired session")]
    Unauthenticated,
    #[error("{0}")]
    Forbidden(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Store(StoreError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Rf(#[from] RfError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Forbidden { .. } => ApiError::Forbidden(e.to_string()),
            StoreError::NotFound { .. } => ApiError::NotFound(e.to_string()),
            e => ApiError::Store(e),
        }
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        ApiError::Io(e.to_string())
    }
}

impl ApiError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::Unauthenticated => "unauthenticated",
            ApiError::Forbidden(_) => "forbidden",
            ApiError::BadRequest(_) => "bad_request",
            ApiError::NotFound(_) => "not_found",
            ApiError::Config(_) => "config",
            ApiError::Store(StoreError::BadCredentials) => "bad_credentials",
            ApiError::Store(StoreError::Disabled) => "disabled",
            ApiError::Store(_) => "store",
            ApiError::Codec(_) => "codec",
            ApiError::Net(_) => "network",
            ApiError::Rf(_) => "rf",
            ApiError::Sync(_) => "sync",
            ApiError::Io(_) => "io",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PasswordChange {
    /// 8 hex digits each.
    pub current: String,
    pub new: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Health,
    Login {
        username: String,
        password: String,
    },
    Logout,
    /// `document` is a template definition in TOML.
    TemplateDefine {
        document: String,
    },
    TemplateList,
    TemplateDelete {
        template_id: u16,
        version: u8,
    },
    /// Encodes `values` (field name to JSON scalar) and writes the payload
    /// from block 0 through `station`.
    TagWrite {
        station: u8,
        uid: Uid,
        template_id: u16,
        version: u8,
        values: BTreeMap<String, Json>,
    },
    TagRead {
        station: u8,
        uid: Uid,
    },
    StationList,
    StationSet {
        addr: u8,
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        baud: Option<u32>,
        #[serde(default)]
        password: Option<PasswordChange>,
        #[serde(default)]
        new_addr: Option<u8>,
    },
    Inventory {
        station: u8,
    },
    /// One master poll cycle: collect station events, journal them, run alarms.
    Poll,
    EventsQuery {
        #[serde(default)]
        query: JournalQuery,
    },
    AlarmRuleList,
    AlarmRuleUpsert {
        rule: AlarmRule,
    },
    AlarmRuleDelete {
        name: String,
    },
    ReportList,
    ReportUpsert {
        pattern: ReportPattern,
    },
    ReportDelete {
        name: String,
    },
    ReportRender {
        name: String,
    },
    SimAddTag {
        uid: Uid,
        #[serde(default)]
        station: Option<u8>,
        #[serde(default)]
        position_cm: f64,
        #[serde(default)]
        blocks: Option<usize>,
        #[serde(default)]
        block_size: Option<usize>,
    },
    /// Places a tag near `station` (or in no field) at `position_cm`.
    SimMoveTag {
        uid: Uid,
        #[serde(default)]
        station: Option<u8>,
        position_cm: f64,
    },
    SimRemoveTag {
        uid: Uid,
    },
    SimAdvance {
        us: u64,
    },
    SimDetach {
        station: u8,
    },
    SimAttach {
        station: u8,
    },
    /// Replaces the simulation with a world file (TOML).
    WorldLoad {
        document: String,
    },
    SyncDevices,
    SyncManifest {
        device: String,
    },
    SyncRun {
        device: String,
    },
    UserList,
    UserAdd {
        username: String,
        password: String,
        role: Role,
    },
    UserSet {
        username: String,
        #[serde(default)]
        role: Option<Role>,
        #[serde(default)]
        password: Option<String>,
        #[serde(default)]
        enabled: Option<bool>,
    },
    UserDelete {
        username: String,
    },
}

impl Request {
    pub fn op(&self) -> String {
        match serde_json::to_value(self) {
            Ok(Json::Object(m)) => m.get("op").and_then(Json::as_str).unwrap_or("?").to_string(),
            _ => "?".into(),
        }
    }

    /// Table accesses the request needs. `None`: no session required.
    pub fn requires(&self, subscriptions: &[String]) -> Option<Vec<(String, Access)>> {
        use Access::*;
        let one = |t: &str, a: Access| Some(vec![(t.to_string(), a)]);
        match self {
            Request::Health | Request::Login { .. } => None,
            Request::Logout | Request::SyncDevices => Some(Vec::new()),
            Request::TemplateDefine { .. } => one(TEMPLATES, Insert),
            Request::TemplateList => one(TEMPLATES, Read),
            Request::TemplateDelete { .. } => one(TEMPLATES, Delete),
            Request::TagWrite { .. } | Request::Inventory { .. } => one(TRANSPONDERS, Upsert),
            Request::TagRead { .. } => one(TRANSPONDERS, Read),
            Request::StationList => one(STATIONS, Read),
            Request::StationSet { .. } | Request::WorldLoad { .. } => one(STATIONS, Upsert),
            Request::Poll => {
                Some(vec![(EVENTS.into(), Upsert), (TRANSPONDERS.into(), Upsert), (STATIONS.into(), Upsert)])
            }
            Request::EventsQuery { .. } => one(EVENTS, Read),
            Request::AlarmRuleList => one(ALARM_RULES, Read),
            Request::AlarmRuleUpsert { .. } => one(ALARM_RULES, Upsert),
            Request::AlarmRuleDelete { .. } => one(ALARM_RULES, Delete),
            Request::ReportList | Request::ReportRender { .. } => one(REPORT_PATTERNS, Read),
            Request::ReportUpsert { .. } => one(REPORT_PATTERNS, Upsert),
            Request::ReportDelete { .. } => one(REPORT_PATTERNS, Delete),
            Request::SimAddTag { .. }
            | Request::SimMoveTag { .. }
            | Request::SimRemoveTag { .. }
            | Request::SimAdvance { .. }
            | Request::SimDetach { .. }
            | Request::SimAttach { .. } => one(EVENTS, Upsert),
            Request::SyncManifest { .. } => Some(subscriptions.iter().map(|t| (t.clone(), Read)).collect()),
            Request::SyncRun { .. } => Some(subscriptions.iter().map(|t| (t.clone(), Upsert)).collect()),
            Request::UserList => one(USERS, Read),
            Request::UserAdd { .. } => one(USERS, Insert),
            Request::UserSet { .. } => one(USERS, Upsert),
            Request::UserDelete { .. } => one(USERS, Delete),
        }
    }

    fn touches_sim(&self) -> bool {
        matches!(
            self,
            Request::TagWrite { .. }
                | Request::TagRead { .. }
                | Request::StationSet { .. }
                | Request::Inventory { .. }
                | Request::Poll
                | Request::SimAddTag { .. }
                | Request::SimMoveTag { .. }
                | Request::SimRemoveTag { .. }
                | Request::SimAdvance { .. }
                | Request::SimDetach { .. }
                | Request::SimAttach { .. }
                | Request::WorldLoad { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiSession {
    pub token: String,
    pub username: String,
    pub role: Role,
    pub expires: Instant,
}

/// Everything the simulated field side needs to survive a restart.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SimState {
    pub bus: SimBus,
    pub master: Master,
    pub alarms: AlarmEngine,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn bad(msg: impl Into<String>) -> ApiError {
    ApiError::BadRequest(msg.into())
}

fn station_row(addr: u8, name: &str, baud: BaudClass, status: &str, last_contact: Option<u64>) -> Row {
    vec![
        Value::Int(addr as i64),
        Value::text(name),
        Value::Int(baud.rate() as i64),
        Value::text(status),
        Value::opt_int(last_contact.map(|v| v as i64)),
    ]
}

pub struct Service {
    config: ServiceConfig,
    store: Datastore,
    sim: SimState,
    sessions: HashMap<String, ApiSession>,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service").field("store_dir", &self.config.store_dir).finish()
    }
}

impl Service {
    /// Opens the store and the simulation. The persisted simulation state
    /// wins over the configured world file, which only seeds a fresh store.
    pub fn open(config: ServiceConfig) -> Result<Self, ApiError> {
        config.validate()?;
        let dir = &config.store_dir;
        let diag = |e: StoreError| ApiError::Config(format!("store {}: {e}", dir.display()));
        let store = match config.passphrase()? {
            Some(p) => Datastore::open_encrypted(&dir.join(ENCRYPTED_FILE), &p, config.kdf_iterations).map_err(diag)?,
            None => {
                if dir.join(ENCRYPTED_FILE).exists() {
                    return Err(ApiError::Config(format!(
                        "store {} is encrypted but no passphrase source is configured",
                        dir.display()
                    )));
                }
                Datastore::open_plain(dir).map_err(diag)?
            }
        };
        let mut service = Service { config, store, sim: SimState::default(), sessions: HashMap::new() };
        if let Some(sim) = service.load_sim()? {
            service.sim = sim;
        } else if let Some(path) = service.config.world.clone() {
            let world = WorldFile::load(&path)?;
            service.install_world(&world)?;
        }
        Ok(service)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn store(&self) -> &Datastore {
        &self.store
    }

    pub fn sim(&self) -> &SimState {
        &self.sim
    }

    fn sim_path(&self) -> PathBuf {
        let name = if self.store.is_encrypted() { SIM_STATE_SEALED } else { SIM_STATE_FILE };
        self.config.store_dir.join(name)
    }

    fn load_sim(&self) -> Result<Option<SimState>, ApiError> {
        let path = self.sim_path();
        if !path.exists() {
            return Ok(None);
        }
        let bytes = self.store.open_blob(&fs::read(&path)?)?;
        serde_json::from_slice(&bytes).map(Some).map_err(|e| ApiError::Config(format!("{}: {e}", path.display())))
    }

    fn save_sim(&self) -> Result<(), ApiError> {
        let plain = serde_json::to_vec(&self.sim).expect("sim state serializes");
        let bytes = self.store.seal_blob(&plain).unwrap_or(plain);
        fs::create_dir_all(&self.config.store_dir)?;
        write_atomic(&self.sim_path(), &bytes)?;
        Ok(())
    }

    /// Creates the first administrator. Refused once any user exists.
    pub fn init_admin(&mut self, username: &str, password: &str) -> Result<(), ApiError> {
        if !self.store.tables().table(USERS)?.is_empty() {
            return Err(bad("users already exist"));
        }
        check_credentials(username, password)?;
        let row = user_row(username, Role::Admin, &hash_password(password), true);
        self.store.apply(Role::Admin, USERS, Change::Insert { row }, now_ms())?;
        Ok(())
    }

    pub fn login(&mut self, username: &str, password: &str) -> Result<ApiSession, ApiError> {
        let role = self.store.authenticate(username, password)?;
        let mut raw = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut raw);
        let session = ApiSession {
            token: hex::encode(raw),
            username: username.to_string(),
            role,
            expires: Instant::now() + Duration::from_secs(self.config.session_hours * 3600),
        };
        let now = Instant::now();
        self.sessions.retain(|_, s| s.expires > now);
        self.sessions.insert(session.token.clone(), session.clone());
        Ok(session)
    }

    /// Unknown, expired, and revoked tokens all fail the same way. The role
    /// is re-read so user edits take effect immediately.
    pub fn session(&mut self, token: &str) -> Result<ApiSession, ApiError> {
        let Some(s) = self.sessions.get(token) else {
            return Err(ApiError::Unauthenticated);
        };
        if s.expires <= Instant::now() {
            self.sessions.remove(token);
            return Err(ApiError::Unauthenticated);
        }
        let users = self.store.tables().table(USERS)?;
        let live = users.get(&Key(vec![Value::text(&s.username)])).and_then(|row| {
            let enabled = row[3].as_bool() == Some(true);
            let role = row[1].as_text()?.parse::<Role>().ok()?;
            enabled.then_some(role)
        });
        match live {
            Some(role) => {
                let s = self.sessions.get_mut(token).unwrap();
                s.role = role;
                Ok(s.clone())
            }
            None => {
                self.sessions.remove(token);
                Err(ApiError::Unauthenticated)
            }
        }
    }

    #[cfg(test)]
    fn expire_all(&mut self) {
        for s in self.sessions.values_mut() {
            s.expires = Instant::now() - Duration::from_secs(1);
        }
    }

    /// Runs one request. `token` is ignored by `health` and `login`.
    pub fn handle(&mut self, token: Option<&str>, req: Request) -> Result<Json, ApiError> {
        let needs = req.requires(&self.config.subscriptions);
        let role = match needs {
            None => None,
            Some(needs) => {
                let session = self.session(token.ok_or(ApiError::Unauthenticated)?)?;
                for (table, access) in &needs {
                    if !crate::store::authorize(session.role, table, *access) {
                        return Err(ApiError::Forbidden(format!(
                            "{} may not {} ({access:?} on `{table}`)",
                            session.role,
                            req.op(),
                        )));
                    }
                }
                Some(session.role)
            }
        };
        let touches_sim = req.touches_sim();
        let result = self.dispatch(token, role.unwrap_or(Role::Viewer), req);
        if touches_sim {
            self.save_sim()?;
        }
        result
    }

    fn dispatch(&mut self, token: Option<&str>, role: Role, req: Request) -> Result<Json, ApiError> {
        match req {
            Request::Health => Ok(self.health()),
            Request::Login { username, password } => {
                let s = self.login(&username, &password)?;
                Ok(json!({
                    "token": s.token,
                    "username": s.username,
                    "role": s.role,
                    "expires_in_s": self.config.session_hours * 3600,
                }))
            }
            Request::Logout => {
                if let Some(t) = token {
                    self.sessions.remove(t);
                }
                Ok(json!({ "logged_out": true }))
            }
            Request::TemplateDefine { document } => self.template_define(role, &document),
            Request::TemplateList => self.template_list(),
            Request::TemplateDelete { template_id, version } => {
                let key = Key(vec![Value::Int(template_id as i64), Value::Int(version as i64)]);
                let revision = self.store.apply(role, TEMPLATES, Change::Delete { key }, now_ms())?;
                Ok(json!({ "revision": revision }))
            }
            Request::TagWrite { station, uid, template_id, version, values } => {
                self.tag_write(role, station, uid, template_id, version, &values)
            }
            Request::TagRead { station, uid } => self.tag_read(station, uid),
            Request::StationList => Ok(self.station_list()),
            Request::StationSet { addr, name, baud, password, new_addr } => {
                self.station_set(role, addr, name, baud, password, new_addr)
            }
            Request::Inventory { station } => self.inventory(role, station),
            Request::Poll => self.poll(role),
            Request::EventsQuery { query } => {
                let page = journal_query(&query, self.store.table(role, EVENTS)?)?;
                Ok(serde_json::to_value(page).expect("page serializes"))
            }
            Request::AlarmRuleList => {
                let rules = self.alarm_rules()?;
                Ok(serde_json::to_value(rules).expect("rules serialize"))
            }
            Request::AlarmRuleUpsert { rule } => {
                rule.validate()?;
                let revision = self.store.apply(role, ALARM_RULES, Change::Upsert { row: rule.to_row() }, now_ms())?;
                Ok(json!({ "revision": revision }))
            }
            Request::AlarmRuleDelete { name } => {
                let key = Key(vec![Value::text(name)]);
                let revision = self.store.apply(role, ALARM_RULES, Change::Delete { key }, now_ms())?;
                Ok(json!({ "revision": revision }))
            }
            Request::ReportList => {
                let patterns = self
                    .store
                    .table(role, REPORT_PATTERNS)?
                    .rows()
                    .map(ReportPattern::from_row)
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(serde_json::to_value(patterns).expect("patterns serialize"))
            }
            Request::ReportUpsert { pattern } => {
                pattern.validate(&self.store.tables().table(&pattern.source)?.schema)?;
                let revision =
                    self.store.apply(role, REPORT_PATTERNS, Change::Upsert { row: pattern.to_row() }, now_ms())?;
                Ok(json!({ "revision": revision }))
            }
            Request::ReportDelete { name } => {
                let key = Key(vec![Value::text(name)]);
                let revision = self.store.apply(role, REPORT_PATTERNS, Change::Delete { key }, now_ms())?;
                Ok(json!({ "revision": revision }))
            }
            Request::ReportRender { name } => {
                let (pattern, content) = self.render_report(role, &name)?;
                Ok(json!({ "name": pattern.name, "format": pattern.format, "content": content }))
            }
            Request::SimAddTag { uid, station, position_cm, blocks, block_size } => {
                let tag = TagEmulation::with_memory(
                    uid,
                    blocks.unwrap_or(DEFAULT_BLOCK_COUNT),
                    block_size.unwrap_or(DEFAULT_BLOCK_SIZE),
                );
                if tag.blocks.is_empty() || tag.block_size == 0 {
                    return Err(bad("tag memory must have at least one non-empty block"));
                }
                self.sim.bus.add_tag(tag)?;
                let changes = match self.sim.bus.place_tag(uid, station, position_cm) {
                    Ok(c) => c,
                    Err(e) => {
                        self.sim.bus.remove_tag(uid)?;
                        return Err(e.into());
                    }
                };
                Ok(json!({ "uid": uid, "changes": changes }))
            }
            Request::SimMoveTag { uid, station, position_cm } => {
                let changes = self.sim.bus.place_tag(uid, station, position_cm)?;
                Ok(json!({ "uid": uid, "changes": changes }))
            }
            Request::SimRemoveTag { uid } => {
                let changes = self.sim.bus.remove_tag(uid)?;
                Ok(json!({ "uid": uid, "changes": changes }))
            }
            Request::SimAdvance { us } => {
                self.sim.bus.advance_clock(us);
                Ok(json!({ "clock_us": self.sim.bus.world().clock_us() }))
            }
            Request::SimDetach { station } | Request::SimAttach { station }
                if self.sim.bus.station(station).is_none() =>
            {
                Err(ApiError::NotFound(format!("station {station}")))
            }
            Request::SimDetach { station } => {
                self.sim.bus.detach(station);
                Ok(json!({ "station": station, "attached": false }))
            }
            Request::SimAttach { station } => {
                self.sim.bus.attach(station);
                Ok(json!({ "station": station, "attached": true }))
            }
            Request::WorldLoad { document } => {
                let world = WorldFile::parse(&document)?;
                self.install_world(&world)?;
                Ok(json!({ "stations": world.stations.len(), "tags": world.tags.len() }))
            }
            Request::SyncDevices => Ok(json!(self.config.devices)),
            Request::SyncManifest { device } => {
                let mut link = self.device_link(&device)?;
                link.connect()?;
                let manifest = sync::fetch_manifest(&mut link, &self.store, &self.sync_options())?;
                link.disconnect();
                Ok(serde_json::to_value(manifest).expect("manifest serializes"))
            }
            Request::SyncRun { device } => {
                let mut link = self.device_link(&device)?;
                link.connect()?;
                let opts = self.sync_options();
                let report = sync::sync_session(&mut link, &mut self.store, &opts)?;
                link.disconnect();
                Ok(serde_json::to_value(report).expect("report serializes"))
            }
            Request::UserList => {
                let users: Vec<Json> = self
                    .store
                    .table(role, USERS)?
                    .rows()
                    .map(|r| json!({ "username": r[0].as_text(), "role": r[1].as_text(), "enabled": r[3].as_bool() }))
                    .collect();
                Ok(Json::Array(users))
            }
            Request::UserAdd { username, password, role: new_role } => {
                check_credentials(&username, &password)?;
                let row = user_row(&username, new_role, &hash_password(&password), true);
                let revision = self.store.apply(role, USERS, Change::Insert { row }, now_ms())?;
                Ok(json!({ "revision": revision }))
            }
            Request::UserSet { username, role: new_role, password, enabled } => {
                self.user_set(role, &username, new_role, password, enabled)
            }
            Request::UserDelete { username } => {
                self.keeps_an_admin(&username, None)?;
                let key = Key(vec![Value::text(&username)]);
                let revision = self.store.apply(role, USERS, Change::Delete { key }, now_ms())?;
                Ok(json!({ "revision": revision }))
            }
        }
    }

    fn health(&self) -> Json {
        let bus = &self.sim.bus;
        json!({
            "status": "OK",
            "stations": self.sim.master.roster().len(),
            "attached": bus.stations().filter(|s| bus.is_attached(s.addr)).count(),
            "tags": bus.world().tags().count(),
            "sim_clock_us": bus.world().clock_us(),
            "encrypted": self.store.is_encrypted(),
            "revisions": self.store.tables().revisions(),
        })
    }

    fn registry(&self) -> Result<TemplateRegistry, ApiError> {
        let mut registry = TemplateRegistry::new();
        for row in self.store.tables().table(TEMPLATES)?.rows() {
            registry.register(Template::from_toml(row[3].as_text().unwrap_or_default())?)?;
        }
        Ok(registry)
    }

    fn template_define(&mut self, role: Role, document: &str) -> Result<Json, ApiError> {
        let t = Template::from_toml(document)?;
        let row = vec![
            Value::Int(t.id() as i64),
            Value::Int(t.version() as i64),
            Value::text(t.name()),
            Value::text(t.to_toml()),
        ];
        let revision = self.store.apply(role, TEMPLATES, Change::Insert { row }, now_ms())?;
        Ok(json!({
            "template_id": t.id(),
            "version": t.version(),
            "name": t.name(),
            "encoded_size": t.encoded_size(),
            "revision": revision,
        }))
    }

    fn template_list(&self) -> Result<Json, ApiError> {
        let list: Vec<Json> = self
            .registry()?
            .iter()
            .map(|t| {
                let mut doc = serde_json::to_value(TemplateDoc::from(t)).expect("template serializes");
                doc["encoded_size"] = json!(t.encoded_size());
                doc
            })
            .collect();
        Ok(Json::Array(list))
    }

    fn tag_write(
        &mut self,
        role: Role,
        station: u8,
        uid: Uid,
        template_id: u16,
        version: u8,
        values: &BTreeMap<String, Json>,
    ) -> Result<Json, ApiError> {
        let registry = self.registry()?;
        let template = registry
            .get(template_id, version)
            .ok_or(ApiError::Codec(CodecError::UnknownTemplate(template_id, version)))?;
        if let Some(extra) = values.keys().find(|k| template.field_index(k).is_none()) {
            return Err(bad(format!("template {template_id}/{version} has no field `{extra}`")));
        }
        let mut fields = Vec::with_capacity(template.fields().len());
        for f in template.fields() {
            let v = values.get(&f.name).ok_or_else(|| bad(format!("missing value for field `{}`", f.name)))?;
            fields.push(FieldValue::from_json(&f.ty, v).map_err(|e| bad(format!("field `{}`: {e}", f.name)))?);
        }
        let bytes = codec::encode(template, &TagPayload::new(template, fields))?;

        let SimState { bus, master, .. } = &mut self.sim;
        let block_size = master.read_blocks(bus, station, uid, 0, 1)?[0].len();
        let images = codec::blocks_for(&bytes, block_size, u8::MAX as usize)?;
        master.write_blocks(bus, station, uid, 0, &images)?;
        let at = bus.world().clock_us();
        master.touch(station, at);

        let row = vec![
            Value::text(uid.to_string()),
            Value::Int(template_id as i64),
            Value::Int(version as i64),
            Value::Bytes(bytes.clone()),
            Value::Int(station as i64),
            Value::Int(at as i64),
        ];
        self.store.apply(role, TRANSPONDERS, Change::Upsert { row }, now_ms())?;
        Ok(json!({ "uid": uid, "bytes": bytes.len(), "blocks": images.len(), "payload_hex": hex::encode(&bytes) }))
    }

    fn tag_read(&mut self, station: u8, uid: Uid) -> Result<Json, ApiError> {
        let registry = self.registry()?;
        let SimState { bus, master, .. } = &mut self.sim;
        let bytes = master.read_payload(bus, station, uid)?;
        let at = bus.world().clock_us();
        master.touch(station, at);
        let payload = codec::decode(&bytes, &registry)?;
        let template = registry.get(payload.template_id, payload.version).expect("decode found the template");
        let values: serde_json::Map<String, Json> =
            template.fields().iter().zip(&payload.values).map(|(f, v)| (f.name.clone(), v.to_json())).collect();
        Ok(json!({
            "uid": uid,
            "template_id": payload.template_id,
            "version": payload.version,
            "values": values,
            "payload_hex": hex::encode(&bytes),
        }))
    }

    fn station_list(&self) -> Json {
        let table = self.store.tables().table(STATIONS).ok();
        let list: Vec<Json> = self
            .sim
            .master
            .roster()
            .iter()
            .map(|(&addr, entry)| {
                let st = self.sim.bus.station(addr);
                let status = table
                    .and_then(|t| t.get(&Key(vec![Value::Int(addr as i64)])))
                    .and_then(|r| r[3].as_text().map(String::from));
                json!({
                    "addr": addr,
                    "name": entry.name,
                    "baud": st.map(|s| s.baud.rate()),
                    "attached": self.sim.bus.is_attached(addr),
                    "events_buffered": st.map(|s| s.ring().len()),
                    "acked_seq": entry.acked_seq,
                    "last_contact_us": entry.last_contact_us,
                    "status": status,
                })
            })
            .collect();
        Json::Array(list)
    }

    fn station_set(
        &mut self,
        role: Role,
        addr: u8,
        name: Option<String>,
        baud: Option<u32>,
        password: Option<PasswordChange>,
        new_addr: Option<u8>,
    ) -> Result<Json, ApiError> {
        let baud = baud
            .map(|rate| BaudClass::from_rate(rate).ok_or_else(|| bad(format!("unsupported baud rate {rate}"))))
            .transpose()?;
        let password = password
            .map(|p| {
                Ok::<_, ApiError>((parse_password(&p.current).map_err(bad)?, parse_password(&p.new).map_err(bad)?))
            })
            .transpose()?;
        let SimState { bus, master, .. } = &mut self.sim;
        if let Some(b) = baud {
            master.set_baud(bus, addr, b)?;
        }
        if let Some((current, new)) = password {
            master.set_password(bus, addr, current, new)?;
        }
        let mut addr_now = addr;
        if let Some(n) = new_addr {
            master.set_addr(bus, addr, n)?;
            addr_now = n;
        }
        let at = bus.world().clock_us();
        master.touch(addr_now, at);

        let old_key = Key(vec![Value::Int(addr as i64)]);
        let old = self.store.tables().table(STATIONS)?.get(&old_key).cloned();
        let name = name
            .or_else(|| old.as_ref().and_then(|r| r[1].as_text().map(String::from)))
            .unwrap_or_else(|| self.sim.master.roster()[&addr_now].name.clone());
        let baud_now = self.sim.bus.station(addr_now).map(|s| s.baud).unwrap_or_default();
        let row = station_row(addr_now, &name, baud_now, "ONLINE", Some(at));
        self.store.batch(|s| {
            if addr_now != addr && old.is_some() {
                s.apply(role, STATIONS, Change::Delete { key: old_key }, now_ms())?;
            }
            s.apply(role, STATIONS, Change::Upsert { row }, now_ms())
        })?;
        Ok(json!({ "addr": addr_now, "name": name, "baud": baud_now.rate() }))
    }

    fn inventory(&mut self, role: Role, station: u8) -> Result<Json, ApiError> {
        let SimState { bus, master, .. } = &mut self.sim;
        let result = master.inventory(bus, station)?;
        let at = bus.world().clock_us();
        master.touch(station, at);
        self.store.batch(|s| {
            for uid in &result.uids {
                seen(s, role, *uid, station, at)?;
            }
            Ok(())
        })?;
        Ok(serde_json::to_value(result).expect("inventory serializes"))
    }

    fn alarm_rules(&self) -> Result<Vec<AlarmRule>, ApiError> {
        Ok(self.store.tables().table(ALARM_RULES)?.rows().map(AlarmRule::from_row).collect::<Result<_, _>>()?)
    }

    fn poll(&mut self, role: Role) -> Result<Json, ApiError> {
        let rules = self.alarm_rules()?;
        let SimState { bus, master, alarms } = &mut self.sim;
        let report = master.poll_cycle(bus);
        let now = bus.world().clock_us();
        for &addr in &report.contacted {
            master.touch(addr, now);
        }
        let contacts: Vec<(u8, Option<u64>)> = master.roster().iter().map(|(a, e)| (*a, e.last_contact_us)).collect();
        let mut raised: Vec<Alarm> = Vec::new();
        for ev in &report.events {
            raised.extend(evaluate_event(&rules, ev));
        }
        raised.extend(alarms.tick(&rules, &contacts, now));

        let stations: Vec<(u8, String, BaudClass, &str)> = master
            .roster()
            .iter()
            .filter_map(|(&a, e)| {
                let status = if report.contacted.contains(&a) {
                    "ONLINE"
                } else if report.timeouts.contains(&a) {
                    "TIMEOUT"
                } else {
                    return None;
                };
                Some((a, e.name.clone(), bus.station(a).map(|s| s.baud).unwrap_or_default(), status))
            })
            .collect();
        let ingest = now_ms();
        self.store.batch(|s| {
            for ev in &report.events {
                ingest_event(s, role, ev, ingest)?;
            }
            for (seq, alarm) in (next_alarm_seq(s)?..).zip(&raised) {
                let view = EventView {
                    station: CENTRAL_STATION,
                    seq,
                    kind: EventKind::Alarm.as_str().into(),
                    uid: alarm.uid.map(|u| u.to_string()),
                    sim_timestamp: alarm.at_us,
                    ingest_time: ingest,
                    subject_station: Some(alarm.station),
                    detail: Some(alarm.detail.clone()),
                };
                s.apply(role, EVENTS, Change::Upsert { row: view.to_row() }, ingest)?;
            }
            for (addr, name, baud, status) in &stations {
                let key = Key(vec![Value::Int(*addr as i64)]);
                let current = s.tables().table(STATIONS)?.get(&key).cloned();
                let name = current.as_ref().and_then(|r| r[1].as_text().map(String::from)).unwrap_or(name.clone());
                let last = if *status == "ONLINE" {
                    Some(now)
                } else {
                    current.as_ref().and_then(|r| r[4].as_int()).map(|v| v as u64)
                };
                let row = station_row(*addr, &name, *baud, status, last);
                if current.as_ref() != Some(&row) {
                    s.apply(role, STATIONS, Change::Upsert { row }, ingest)?;
                }
            }
            Ok(())
        })?;
        Ok(json!({
            "events": report.events.len(),
            "alarms": raised.len(),
            "contacted": report.contacted,
            "timeouts": report.timeouts,
            "gaps": report.gaps,
        }))
    }

    /// Renders a stored pattern; the caller must be able to read its source.
    pub fn render_report(&self, role: Role, name: &str) -> Result<(ReportPattern, String), ApiError> {
        let row = self
            .store
            .table(role, REPORT_PATTERNS)?
            .get(&Key(vec![Value::text(name)]))
            .ok_or_else(|| ApiError::NotFound(format!("report pattern `{name}`")))?;
        let pattern = ReportPattern::from_row(row)?;
        let content = render(&pattern, self.store.table(role, &pattern.source)?)?;
        Ok((pattern, content))
    }

    fn install_world(&mut self, world: &WorldFile) -> Result<(), ApiError> {
        let (bus, master) = world.build()?;
        let rows: Vec<Row> = master
            .roster()
            .iter()
            .map(|(&a, e)| station_row(a, &e.name, bus.station(a).map(|s| s.baud).unwrap_or_default(), "UNKNOWN", None))
            .collect();
        self.store.apply(Role::Admin, STATIONS, Change::Replace { rows }, now_ms())?;
        self.sim = SimState { bus, master, alarms: AlarmEngine::default() };
        self.save_sim()
    }

    fn sync_options(&self) -> SyncOptions {
        SyncOptions {
            subscriptions: self.config.subscriptions.clone(),
            archive_dir: Some(self.config.store_dir.join(ARCHIVE_DIR)),
        }
    }

    fn device_link(&self, id: &str) -> Result<DeviceLink, ApiError> {
        let spec = self
            .config
            .devices
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| ApiError::NotFound(format!("device `{id}`")))?;
        if let Some(dir) = &spec.dir {
            let agent = DeviceAgent::open_or_create(dir, &spec.id, spec.quota_bytes)?;
            return Ok(DeviceLink::in_process(Arc::new(Mutex::new(agent))));
        }
        let address = spec.address.clone().expect("validated device spec");
        Ok(DeviceLink::new(
            id,
            Box::new(move || {
                let stream = TcpStream::connect(&address)?;
                stream.set_read_timeout(Some(Duration::from_secs(30)))?;
                Ok(Box::new(stream) as Box<dyn Transport>)
            }),
        ))
    }

    fn user_set(
        &mut self,
        role: Role,
        username: &str,
        new_role: Option<Role>,
        password: Option<String>,
        enabled: Option<bool>,
    ) -> Result<Json, ApiError> {
        let key = Key(vec![Value::text(username)]);
        let mut row = self
            .store
            .table(role, USERS)?
            .get(&key)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("user `{username}`")))?;
        if let Some(r) = new_role {
            row[1] = Value::text(r.as_str());
        }
        if let Some(p) = password {
            check_credentials(username, &p)?;
            row[2] = Value::text(hash_password(&p));
        }
        if let Some(e) = enabled {
            row[3] = Value::Bool(e);
        }
        self.keeps_an_admin(username, Some(&row))?;
        let revision = self.store.apply(role, USERS, Change::Upsert { row }, now_ms())?;
        Ok(json!({ "revision": revision }))
    }

    /// Refuses a change to `username` (`None` = deletion) that would leave
    /// no enabled administrator.
    fn keeps_an_admin(&self, username: &str, replacement: Option<&Row>) -> Result<(), ApiError> {
        let is_admin = |r: &Row| r[1].as_text() == Some(Role::Admin.as_str()) && r[3].as_bool() == Some(true);
        let users = self.store.tables().table(USERS)?;
        let others = users.rows().filter(|r| r[0].as_text() != Some(username)).any(is_admin);
        let had = users.get(&Key(vec![Value::text(username)])).is_some_and(is_admin);
        if had && !others && !replacement.is_some_and(is_admin) {
            return Err(bad("the last enabled ADMIN cannot be removed, demoted or disabled"));
        }
        Ok(())
    }
}

fn check_credentials(username: &str, password: &str) -> Result<(), ApiError> {
    if username.is_empty() || username.len() > 64 || username.chars().any(|c| c.is_whitespace() || c.is_control()) {
        return Err(bad("username must be 1..=64 characters without spaces"));
    }
    if password.is_empty() {
        return Err(bad("empty password"));
    }
    Ok(())
}

/// Records a sighting of `uid` at `station`, keeping its template fields.
fn seen(store: &mut Datastore, role: Role, uid: Uid, station: u8, at_us: u64) -> Result<u64, StoreError> {
    let key = Key(vec![Value::text(uid.to_string())]);
    let mut row = store.tables().table(TRANSPONDERS)?.get(&key).cloned().unwrap_or_else(|| {
        vec![Value::text(uid.to_string()), Value::Null, Value::Null, Value::Null, Value::Null, Value::Null]
    });
    row[4] = Value::Int(station as i64);
    row[5] = Value::Int(at_us as i64);
    store.apply(role, TRANSPONDERS, Change::Upsert { row }, now_ms())
}

fn ingest_event(store: &mut Datastore, role: Role, ev: &EventRecord, ingest: u64) -> Result<(), StoreError> {
    let view = EventView {
        station: ev.station,
        seq: ev.seq as u64,
        kind: ev.kind.as_str().into(),
        uid: ev.uid.map(|u| u.to_string()),
        sim_timestamp: ev.sim_timestamp_us,
        ingest_time: ingest,
        subject_station: None,
        detail: None,
    };
    store.apply(role, EVENTS, Change::Upsert { row: view.to_row() }, ingest)?;
    if let (EventKind::TagEnter | EventKind::TagLeave, Some(uid)) = (ev.kind, ev.uid) {
        seen(store, role, uid, ev.station, ev.sim_timestamp_us)?;
    }
    Ok(())
}

fn next_alarm_seq(store: &Datastore) -> Result<u64, StoreError> {
    let max = store
        .tables()
        .table(EVENTS)?
        .rows()
        .filter(|r| r[0].as_int() == Some(CENTRAL_STATION as i64))
        .filter_map(|r| r[1].as_int())
        .max()
        .unwrap_or(0);
    Ok(max as u64 + 1)
}

#[cfg(test)]
mod tests;
