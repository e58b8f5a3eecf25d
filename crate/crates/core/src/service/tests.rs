use serde_json::json;

use super::*;
use crate::store::authorize;

const WORLD: &str = r#"
[[station]]
addr = 3
name = "dock 3"
profile = "long"
password = "01020304"

[[station]]
addr = 4
name = "gate"
profile = "short"

[[tag]]
uid = "E000000000000001"
position_cm = 100
"#;

const TEMPLATE: &str = r#"
template_id = 7
version = 1
name = "asset"
fields = [
  { name = "loc", type = "string", max_len = 8 },
  { name = "qty", type = "integer" },
  { name = "price", type = "real" },
]
"#;

struct Fixture {
    _dir: tempfile::TempDir,
    svc: Service,
    admin: String,
}

fn config(dir: &std::path::Path) -> ServiceConfig {
    let world = dir.join("world.toml");
    fs::write(&world, WORLD).unwrap();
    let mut cfg = ServiceConfig::new(dir.join("store"));
    cfg.world = Some(world);
    cfg.devices.push(DeviceSpec { id: "pda".into(), dir: Some(dir.join("pda")), address: None, quota_bytes: 1 << 20 });
    cfg
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut svc = Service::open(config(dir.path())).unwrap();
    svc.init_admin("root", "pw").unwrap();
    let admin = svc.login("root", "pw").unwrap().token;
    Fixture { _dir: dir, svc, admin }
}

impl Fixture {
    fn call(&mut self, req: Request) -> Result<Json, ApiError> {
        let token = self.admin.clone();
        self.svc.handle(Some(&token), req)
    }

    fn ok(&mut self, req: Request) -> Json {
        self.call(req).unwrap()
    }
}

fn asset_values() -> BTreeMap<String, Json> {
    serde_json::from_value(json!({ "loc": "A3", "qty": 12, "price": 4.5 })).unwrap()
}

#[test]
fn health_on_fresh_start() {
    let mut f = fixture();
    let h = f.svc.handle(None, Request::Health).unwrap();
    assert_eq!(h["status"], "OK");
    assert_eq!(h["stations"], 2);
    assert_eq!(h["revisions"]["events"], 0);
    assert_eq!(h["revisions"]["stations"], 1);
}

#[test]
fn empty_journal_query() {
    let mut f = fixture();
    let q = JournalQuery { kind: Some(EventKind::Alarm), limit: 10, ..Default::default() };
    let page = f.ok(Request::EventsQuery { query: q });
    assert_eq!(page, json!({ "total": 0, "offset": 0, "events": [] }));
}

#[test]
fn login_failures_and_token_rejection() {
    let mut f = fixture();
    f.ok(Request::UserAdd { username: "vic".into(), password: "v".into(), role: Role::Viewer });
    assert_eq!(f.svc.login("root", "nope").unwrap_err().code(), "bad_credentials");
    assert_eq!(f.svc.login("ghost", "pw").unwrap_err().code(), "bad_credentials");
    f.ok(Request::UserSet { username: "vic".into(), role: None, password: None, enabled: Some(false) });
    assert_eq!(f.svc.login("vic", "v").unwrap_err().code(), "disabled");

    let health_needs_nothing = f.svc.handle(Some("garbage"), Request::Health);
    assert!(health_needs_nothing.is_ok());
    for token in [None, Some("garbage")] {
        let err = f.svc.handle(token, Request::StationList).unwrap_err();
        assert!(matches!(err, ApiError::Unauthenticated));
    }
    f.svc.expire_all();
    let admin = f.admin.clone();
    assert!(matches!(f.svc.handle(Some(&admin), Request::StationList), Err(ApiError::Unauthenticated)));
}

#[test]
fn disabling_a_user_revokes_their_session() {
    let mut f = fixture();
    f.ok(Request::UserAdd { username: "op".into(), password: "o".into(), role: Role::Operator });
    let op = f.svc.login("op", "o").unwrap().token;
    assert!(f.svc.handle(Some(&op), Request::StationList).is_ok());
    f.ok(Request::UserSet { username: "op".into(), role: Some(Role::Viewer), password: None, enabled: None });
    let err = f.svc.handle(Some(&op), Request::Poll).unwrap_err();
    assert_eq!(err.code(), "forbidden");
    f.ok(Request::UserDelete { username: "op".into() });
    assert!(matches!(f.svc.handle(Some(&op), Request::StationList), Err(ApiError::Unauthenticated)));
}

#[test]
fn last_admin_is_protected() {
    let mut f = fixture();
    let demote =
        Request::UserSet { username: "root".into(), role: Some(Role::Operator), password: None, enabled: None };
    assert_eq!(f.call(demote.clone()).unwrap_err().code(), "bad_request");
    assert_eq!(f.call(Request::UserDelete { username: "root".into() }).unwrap_err().code(), "bad_request");
    f.ok(Request::UserAdd { username: "second".into(), password: "s".into(), role: Role::Admin });
    f.ok(demote);
    assert!(f.svc.init_admin("again", "x").is_err());
}

#[test]
fn tag_write_inventory_and_read_back() {
    let mut f = fixture();
    f.ok(Request::TemplateDefine { document: TEMPLATE.into() });
    let uid: Uid = "E000000000000001".parse().unwrap();
    f.ok(Request::SimMoveTag { uid, station: Some(3), position_cm: 5.0 });
    let w = f.ok(Request::TagWrite { station: 3, uid, template_id: 7, version: 1, values: asset_values() });
    let golden = concat!("540700011600", "02004133000000000000", "0c000000", "0000000000001240", "1b74");
    assert_eq!(w["payload_hex"], golden);
    assert_eq!(w["blocks"], 8);

    let inv = f.ok(Request::Inventory { station: 3 });
    assert_eq!(inv["uids"], json!([uid]));
    let back = f.ok(Request::TagRead { station: 3, uid });
    assert_eq!(back["values"], json!({ "loc": "A3", "qty": 12, "price": 4.5 }));

    let row =
        f.svc.store().tables().table(TRANSPONDERS).unwrap().get(&Key(vec![Value::text(uid.to_string())])).cloned();
    let row = row.unwrap();
    assert_eq!(row[1], Value::Int(7));
    assert_eq!(row[4], Value::Int(3));
}

#[test]
fn tag_write_rejects_bad_values() {
    let mut f = fixture();
    f.ok(Request::TemplateDefine { document: TEMPLATE.into() });
    let uid: Uid = "E000000000000001".parse().unwrap();
    f.ok(Request::SimMoveTag { uid, station: Some(3), position_cm: 5.0 });
    let mut v = asset_values();
    v.remove("qty");
    let err = f.call(Request::TagWrite { station: 3, uid, template_id: 7, version: 1, values: v }).unwrap_err();
    assert!(err.to_string().contains("qty"), "{err}");
    let mut v = asset_values();
    v.insert("colour".into(), json!("red"));
    assert!(f.call(Request::TagWrite { station: 3, uid, template_id: 7, version: 1, values: v }).is_err());
    let err = f.call(Request::TagWrite { station: 3, uid, template_id: 9, version: 1, values: asset_values() });
    assert_eq!(err.unwrap_err().code(), "codec");
    // Out of the write range of the long profile (20 cm) but readable.
    f.ok(Request::SimMoveTag { uid, station: Some(3), position_cm: 30.0 });
    let err = f.call(Request::TagWrite { station: 3, uid, template_id: 7, version: 1, values: asset_values() });
    assert_eq!(err.unwrap_err().code(), "network");
}

#[test]
fn poll_ingests_events_and_raises_alarms() {
    let mut f = fixture();
    let uid: Uid = "E000000000000001".parse().unwrap();
    let rule = AlarmRule {
        name: "watch".into(),
        trigger: crate::store::AlarmTrigger::Watchlist { uids: vec![uid], stations: vec![3] },
        enabled: true,
    };
    f.ok(Request::AlarmRuleUpsert { rule });
    f.ok(Request::SimMoveTag { uid, station: Some(3), position_cm: 10.0 });
    let p = f.ok(Request::Poll);
    assert_eq!(p["events"], 1);
    assert_eq!(p["alarms"], 1);
    assert_eq!(p["contacted"], json!([3, 4]));

    let q = JournalQuery { kind: Some(EventKind::Alarm), ..Default::default() };
    let page: JournalPage = serde_json::from_value(f.ok(Request::EventsQuery { query: q })).unwrap();
    assert_eq!(page.total, 1);
    let alarm = &page.events[0];
    assert_eq!((alarm.station, alarm.seq, alarm.subject_station), (CENTRAL_STATION, 1, Some(3)));
    assert_eq!(alarm.uid.as_deref(), Some("E000000000000001"));

    // Idempotent: nothing new, nothing raised.
    let p = f.ok(Request::Poll);
    assert_eq!((p["events"].clone(), p["alarms"].clone()), (json!(0), json!(0)));

    let t = f.svc.store().tables().table(TRANSPONDERS).unwrap();
    assert_eq!(t.get(&Key(vec![Value::text(uid.to_string())])).unwrap()[4], Value::Int(3));
    let stations = f.svc.store().tables().table(STATIONS).unwrap();
    assert_eq!(stations.get(&Key(vec![Value::Int(3)])).unwrap()[3], Value::text("ONLINE"));
}

#[test]
fn silent_station_alarm_and_timeout() {
    let mut f = fixture();
    let rule = AlarmRule {
        name: "quiet".into(),
        trigger: crate::store::AlarmTrigger::StationSilent { station: Some(4), silent_for_us: 60_000_000 },
        enabled: true,
    };
    f.ok(Request::AlarmRuleUpsert { rule });
    f.ok(Request::Poll);
    f.ok(Request::SimDetach { station: 4 });
    f.ok(Request::SimAdvance { us: 61_000_000 });
    let p = f.ok(Request::Poll);
    assert_eq!(p["timeouts"], json!([4]));
    assert_eq!(p["alarms"], 1);
    assert_eq!(f.ok(Request::Poll)["alarms"], 0);
    let stations = f.svc.store().tables().table(STATIONS).unwrap();
    assert_eq!(stations.get(&Key(vec![Value::Int(4)])).unwrap()[3], Value::text("TIMEOUT"));
}

#[test]
fn report_render_matches_datastore_render() {
    let mut f = fixture();
    let pattern = ReportPattern {
        name: "st".into(),
        source: STATIONS.into(),
        filter: "addr >= 3".into(),
        columns: vec!["addr".into(), "name".into()],
        sort: Some("addr desc".parse().unwrap()),
        format: crate::store::ReportFormat::Csv,
    };
    f.ok(Request::ReportUpsert { pattern: pattern.clone() });
    let out = f.ok(Request::ReportRender { name: "st".into() });
    let direct = render(&pattern, f.svc.store().tables().table(STATIONS).unwrap()).unwrap();
    assert_eq!(out["content"], direct);
    assert_eq!(direct, "addr,name\n4,gate\n3,dock 3\n");
    let bad = ReportPattern { columns: vec!["nope".into()], ..pattern };
    assert!(f.call(Request::ReportUpsert { pattern: bad }).is_err());
    assert_eq!(f.call(Request::ReportRender { name: "zz".into() }).unwrap_err().code(), "not_found");
}

#[test]
fn station_settings_and_sim_state_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let uid: Uid = "E000000000000001".parse().unwrap();
    {
        let mut svc = Service::open(cfg.clone()).unwrap();
        svc.init_admin("root", "pw").unwrap();
        let t = svc.login("root", "pw").unwrap().token;
        svc.handle(Some(&t), Request::SimMoveTag { uid, station: Some(4), position_cm: 3.0 }).unwrap();
        let change = PasswordChange { current: "01020304".into(), new: "0a0b0c0d".into() };
        let bad = PasswordChange { current: "ffffffff".into(), new: "00000000".into() };
        assert!(svc
            .handle(
                Some(&t),
                Request::StationSet { addr: 3, name: None, baud: None, password: Some(bad), new_addr: None }
            )
            .is_err());
        svc.handle(
            Some(&t),
            Request::StationSet {
                addr: 3,
                name: Some("dock".into()),
                baud: Some(9600),
                password: Some(change),
                new_addr: Some(5),
            },
        )
        .unwrap();
    }
    let mut svc = Service::open(cfg).unwrap();
    let t = svc.login("root", "pw").unwrap().token;
    assert_eq!(svc.sim().master.roster()[&5].password, [0x0a, 0x0b, 0x0c, 0x0d]);
    assert_eq!(svc.sim().bus.world().field(4).count(), 1);
    let list = svc.handle(Some(&t), Request::StationList).unwrap();
    assert_eq!(list[1]["addr"], 5);
    assert_eq!(list[1]["baud"], 9600);
    let stations = svc.store().tables().table(STATIONS).unwrap();
    assert!(stations.get(&Key(vec![Value::Int(3)])).is_none());
    assert_eq!(stations.get(&Key(vec![Value::Int(5)])).unwrap()[1], Value::text("dock"));
}

#[test]
fn encrypted_store_seals_sim_state() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    fs::write(dir.path().join("pass"), "secret words\n").unwrap();
    cfg.passphrase_file = Some(dir.path().join("pass"));
    cfg.kdf_iterations = 1000;
    {
        let mut svc = Service::open(cfg.clone()).unwrap();
        svc.init_admin("root", "pw").unwrap();
    }
    assert!(dir.path().join("store").join(SIM_STATE_SEALED).exists());
    assert!(!dir.path().join("store").join(SIM_STATE_FILE).exists());
    let sealed = fs::read(dir.path().join("store").join(SIM_STATE_SEALED)).unwrap();
    assert!(!sealed.windows(6).any(|w| w == b"dock 3"));
    let mut svc = Service::open(cfg.clone()).unwrap();
    assert!(svc.login("root", "pw").is_ok());

    fs::write(dir.path().join("pass"), "other\n").unwrap();
    let err = Service::open(cfg.clone()).unwrap_err();
    assert!(err.to_string().contains("passphrase"), "{err}");
    cfg.passphrase_file = None;
    assert_eq!(Service::open(cfg).unwrap_err().code(), "config");
}

#[test]
fn malformed_world_fails_startup() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    fs::write(dir.path().join("bad.toml"), "[[station]]\naddr = 40\nname = \"x\"\n").unwrap();
    cfg.world = Some(dir.path().join("bad.toml"));
    let err = Service::open(cfg).unwrap_err();
    assert!(err.to_string().contains("station 40"), "{err}");
}

#[test]
fn sync_through_the_api() {
    let mut f = fixture();
    let m = f.ok(Request::SyncManifest { device: "pda".into() });
    let dirs: Vec<_> = m["tables"].as_array().unwrap().iter().map(|t| t["direction"].as_str().unwrap()).collect();
    // Tables never written since creation sit at revision 0 on both sides.
    assert_eq!(dirs, vec!["SKIP", "PUSH", "SKIP", "SKIP"]);
    let r = f.ok(Request::SyncRun { device: "pda".into() });
    assert_eq!(r["outcomes"]["stations"]["result"], "pushed");
    let r = f.ok(Request::SyncRun { device: "pda".into() });
    assert!(r["table_body_bytes"].as_object().unwrap().values().all(|v| v == 0));
    assert_eq!(f.call(Request::SyncRun { device: "nope".into() }).unwrap_err().code(), "not_found");
}

/// One instance of every request, valid for the fixture world.
fn every_request() -> Vec<Request> {
    let uid: Uid = "E000000000000001".parse().unwrap();
    let rule = AlarmRule {
        name: "r".into(),
        trigger: crate::store::AlarmTrigger::BufferOverrun { stations: vec![] },
        enabled: true,
    };
    let pattern = ReportPattern {
        name: "p".into(),
        source: EVENTS.into(),
        filter: String::new(),
        columns: vec!["seq".into()],
        sort: None,
        format: crate::store::ReportFormat::Csv,
    };
    vec![
        Request::Health,
        Request::TemplateList,
        Request::TemplateDefine { document: TEMPLATE.replace("template_id = 7", "template_id = 8") },
        Request::TemplateDelete { template_id: 7, version: 1 },
        Request::TagWrite { station: 3, uid, template_id: 7, version: 1, values: asset_values() },
        Request::TagRead { station: 3, uid },
        Request::StationList,
        Request::StationSet { addr: 4, name: Some("g".into()), baud: None, password: None, new_addr: None },
        Request::Inventory { station: 3 },
        Request::Poll,
        Request::EventsQuery { query: JournalQuery::default() },
        Request::AlarmRuleList,
        Request::AlarmRuleUpsert { rule },
        Request::AlarmRuleDelete { name: "r".into() },
        Request::ReportList,
        Request::ReportUpsert { pattern },
        Request::ReportRender { name: "p".into() },
        Request::ReportDelete { name: "p".into() },
        Request::SimAddTag {
            uid: "E000000000000009".parse().unwrap(),
            station: None,
            position_cm: 0.0,
            blocks: None,
            block_size: None,
        },
        Request::SimMoveTag { uid, station: Some(3), position_cm: 5.0 },
        Request::SimAdvance { us: 1 },
        Request::SimDetach { station: 4 },
        Request::SimAttach { station: 4 },
        Request::SimRemoveTag { uid: "E000000000000009".parse().unwrap() },
        Request::WorldLoad { document: WORLD.into() },
        Request::SyncDevices,
        Request::SyncManifest { device: "pda".into() },
        Request::SyncRun { device: "pda".into() },
        Request::UserList,
        Request::UserAdd { username: "extra".into(), password: "e".into(), role: Role::Viewer },
        Request::UserSet { username: "extra".into(), role: None, password: None, enabled: Some(true) },
        Request::UserDelete { username: "extra".into() },
        Request::Logout,
    ]
}

#[test]
fn endpoint_authorization_matches_the_table_matrix() {
    let subs = ServiceConfig::new("x").subscriptions;
    let requests = every_request();
    let mut ops: Vec<String> = requests.iter().map(Request::op).collect();
    ops.sort();
    ops.dedup();
    // Every variant except login is listed.
    assert_eq!(ops.len() + 1, 34);

    for role in [Role::Admin, Role::Operator, Role::Viewer] {
        let mut f = fixture();
        if role != Role::Admin {
            f.ok(Request::UserAdd { username: "u".into(), password: "u".into(), role });
        }
        let token = if role == Role::Admin { f.admin.clone() } else { f.svc.login("u", "u").unwrap().token };
        // Admin pre-stages what the later requests act on.
        f.ok(Request::TemplateDefine { document: TEMPLATE.into() });
        f.ok(Request::SimMoveTag { uid: "E000000000000001".parse().unwrap(), station: Some(3), position_cm: 5.0 });
        f.ok(every_request().into_iter().find(|r| r.op() == "tag_write").unwrap());

        for req in every_request() {
            let op = req.op();
            let allowed = req.requires(&subs).is_none_or(|needs| needs.iter().all(|(t, a)| authorize(role, t, *a)));
            if role != Role::Admin && matches!(req, Request::UserSet { .. } | Request::UserDelete { .. }) {
                let _ = f.call(Request::UserAdd { username: "extra".into(), password: "e".into(), role: Role::Viewer });
            }
            if role != Role::Admin && matches!(req, Request::ReportRender { .. } | Request::ReportDelete { .. }) {
                let _ = f.call(every_request().into_iter().find(|r| r.op() == "report_upsert").unwrap());
            }
            if role != Role::Admin && matches!(req, Request::AlarmRuleDelete { .. }) {
                let _ = f.call(every_request().into_iter().find(|r| r.op() == "alarm_rule_upsert").unwrap());
            }
            if matches!(req, Request::TemplateDelete { .. } | Request::Logout) {
                continue;
            }
            let result = f.svc.handle(Some(&token), req);
            match (&result, allowed) {
                (Err(ApiError::Forbidden(_)), false) => {}
                (Ok(_), true) => {}
                _ => panic!("{role} {op}: allowed={allowed}, got {result:?}"),
            }
        }
        // Template deletion and logout last: earlier requests need both.
        let result = f.svc.handle(Some(&token), Request::TemplateDelete { template_id: 7, version: 1 });
        assert_eq!(result.is_ok(), role != Role::Viewer, "{role} template_delete: {result:?}");
        f.svc.handle(Some(&token), Request::Logout).unwrap();
        assert!(matches!(f.svc.handle(Some(&token), Request::StationList), Err(ApiError::Unauthenticated)));
    }
}
