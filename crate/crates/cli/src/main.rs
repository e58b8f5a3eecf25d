//! `rfidtrace`: command-line front end for the traceability service.

mod backend;
mod output;
mod server;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rfidtrace_core::net::EventKind;
use rfidtrace_core::rf::Uid;
use rfidtrace_core::service::{PasswordChange, SortOrder};
use rfidtrace_core::store::alarm::AlarmRule;
use rfidtrace_core::{JournalQuery, ReportPattern, Request, Role, Service, ServiceConfig};
use serde_json::Value as Json;

use backend::{Backend, Credentials};

#[derive(Parser, Debug)]
#[command(name = "rfidtrace", version, about = "RFID traceability: tags, stations, events, reports and handheld sync")]
struct Cli {
    /// Service configuration file; requests run in-process against its store.
    #[arg(long, global = true, env = "RFIDTRACE_CONFIG")]
    config: Option<PathBuf>,
    /// Base URL of a running server, e.g. http://127.0.0.1:7450.
    #[arg(long, global = true, env = "RFIDTRACE_SERVER", conflicts_with = "config")]
    server: Option<String>,
    #[arg(long, global = true, env = "RFIDTRACE_USER")]
    user: Option<String>,
    #[arg(long, global = true, env = "RFIDTRACE_PASSWORD", hide_env_values = true)]
    password: Option<String>,
    /// Session token from `login`, used instead of user and password.
    #[arg(long, global = true, env = "RFIDTRACE_TOKEN", hide_env_values = true)]
    token: Option<String>,
    /// Print the raw JSON reply.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create the store and its first administrator from --user/--password.
    Init,
    /// Run the HTTP API.
    Serve {
        /// Overrides `listen` from the config file.
        #[arg(long)]
        listen: Option<String>,
    },
    Health,
    /// Print a session token for --token.
    Login,
    Logout,
    #[command(subcommand)]
    Template(TemplateCmd),
    #[command(subcommand)]
    Tag(TagCmd),
    #[command(subcommand)]
    Station(StationCmd),
    /// Run one anti-collision inventory at a station.
    Inventory {
        station: u8,
    },
    /// One poll cycle over all stations: collect events and run alarms.
    Poll,
    Events(EventsArgs),
    #[command(subcommand)]
    Alarm(AlarmCmd),
    #[command(subcommand)]
    Report(ReportCmd),
    #[command(subcommand)]
    Sim(SimCmd),
    #[command(subcommand)]
    World(WorldCmd),
    #[command(subcommand)]
    Sync(SyncCmd),
    #[command(subcommand)]
    User(UserCmd),
    #[command(subcommand)]
    Device(DeviceCmd),
}

#[derive(Subcommand, Debug)]
enum TemplateCmd {
    /// Register a template from a TOML file.
    Define {
        file: PathBuf,
    },
    List,
    Delete {
        template_id: u16,
        version: u8,
    },
}

#[derive(Subcommand, Debug)]
enum TagCmd {
    /// Encode field values with a template and write them to a tag.
    Write {
        #[arg(long)]
        station: u8,
        #[arg(long)]
        uid: Uid,
        #[arg(long)]
        template: u16,
        #[arg(long, default_value_t = 1)]
        version: u8,
        /// Field value as NAME=VALUE; repeat for each field.
        #[arg(long = "set", value_name = "NAME=VALUE", value_parser = parse_assignment)]
        values: Vec<(String, String)>,
    },
    Read {
        #[arg(long)]
        station: u8,
        #[arg(long)]
        uid: Uid,
    },
}

#[derive(Subcommand, Debug)]
enum StationCmd {
    List,
    Set {
        addr: u8,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        baud: Option<u32>,
        /// Current station password, 8 hex digits.
        #[arg(long, requires = "new_password")]
        current_password: Option<String>,
        #[arg(long, requires = "current_password")]
        new_password: Option<String>,
        #[arg(long)]
        new_addr: Option<u8>,
    },
}

#[derive(Args, Debug)]
struct EventsArgs {
    #[arg(long)]
    station: Option<u8>,
    #[arg(long)]
    kind: Option<EventKind>,
    #[arg(long)]
    uid: Option<Uid>,
    /// Inclusive lower bound, simulated microseconds.
    #[arg(long)]
    from: Option<u64>,
    #[arg(long)]
    to: Option<u64>,
    #[arg(long, default_value_t = 0)]
    offset: usize,
    #[arg(long, default_value_t = 100)]
    limit: usize,
    #[arg(long)]
    desc: bool,
}

#[derive(Subcommand, Debug)]
enum AlarmCmd {
    List,
    /// Create or replace a rule from a TOML file.
    Set {
        file: PathBuf,
    },
    Delete {
        name: String,
    },
}

#[derive(Subcommand, Debug)]
enum ReportCmd {
    List,
    /// Create or replace a report pattern from a TOML file.
    Define {
        file: PathBuf,
    },
    Delete {
        name: String,
    },
    Render {
        name: String,
        /// Write the rendered document here instead of stdout.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum SimCmd {
    AddTag {
        uid: Uid,
        #[arg(long)]
        station: Option<u8>,
        #[arg(long, default_value_t = 0.0)]
        position: f64,
        #[arg(long)]
        blocks: Option<usize>,
        #[arg(long)]
        block_size: Option<usize>,
    },
    /// Place a tag near a station, or outside every field without --station.
    Move {
        uid: Uid,
        #[arg(long)]
        station: Option<u8>,
        #[arg(long)]
        position: f64,
    },
    RemoveTag {
        uid: Uid,
    },
    /// Advance the simulated clock.
    Advance {
        us: u64,
    },
    Detach {
        station: u8,
    },
    Attach {
        station: u8,
    },
}

#[derive(Subcommand, Debug)]
enum WorldCmd {
    /// Replace the simulated stations and tags with a world file.
    Load { file: PathBuf },
}

#[derive(Subcommand, Debug)]
enum SyncCmd {
    Devices,
    Manifest { device: String },
    Run { device: String },
}

#[derive(Subcommand, Debug)]
enum UserCmd {
    List,
    Add {
        username: String,
        #[arg(long)]
        role: Role,
        #[arg(long = "new-password")]
        new_password: String,
    },
    Set {
        username: String,
        #[arg(long)]
        role: Option<Role>,
        #[arg(long = "new-password")]
        new_password: Option<String>,
        #[arg(long)]
        enabled: Option<bool>,
    },
    Delete {
        username: String,
    },
}

#[derive(Subcommand, Debug)]
enum DeviceCmd {
    /// Serve a handheld's side of the sync protocol over TCP.
    Serve {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, default_value = "127.0.0.1:7460")]
        listen: String,
        #[arg(long, default_value_t = rfidtrace_core::sync::device::DEFAULT_QUOTA_BYTES)]
        quota_bytes: u64,
    },
}

fn parse_assignment(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.to_string()))
        .ok_or_else(|| format!("expected NAME=VALUE, got `{s}`"))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    toml::from_str(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn request_for(command: Command) -> Result<Request> {
    Ok(match command {
        Command::Health => Request::Health,
        Command::Login | Command::Logout => Request::Logout,
        Command::Template(TemplateCmd::Define { file }) => Request::TemplateDefine { document: read_text(&file)? },
        Command::Template(TemplateCmd::List) => Request::TemplateList,
        Command::Template(TemplateCmd::Delete { template_id, version }) => {
            Request::TemplateDelete { template_id, version }
        }
        Command::Tag(TagCmd::Write { station, uid, template, version, values }) => {
            let mut map = BTreeMap::new();
            for (k, v) in values {
                if map.insert(k.clone(), Json::String(v)).is_some() {
                    bail!("field `{k}` given twice");
                }
            }
            Request::TagWrite { station, uid, template_id: template, version, values: map }
        }
        Command::Tag(TagCmd::Read { station, uid }) => Request::TagRead { station, uid },
        Command::Station(StationCmd::List) => Request::StationList,
        Command::Station(StationCmd::Set { addr, name, baud, current_password, new_password, new_addr }) => {
            let password = match (current_password, new_password) {
                (Some(current), Some(new)) => Some(PasswordChange { current, new }),
                _ => None,
            };
            Request::StationSet { addr, name, baud, password, new_addr }
        }
        Command::Inventory { station } => Request::Inventory { station },
        Command::Poll => Request::Poll,
        Command::Events(a) => Request::EventsQuery {
            query: JournalQuery {
                station: a.station,
                kind: a.kind,
                uid: a.uid,
                from_us: a.from,
                to_us: a.to,
                offset: a.offset,
                limit: a.limit,
                order: if a.desc { SortOrder::Desc } else { SortOrder::Asc },
            },
        },
        Command::Alarm(AlarmCmd::List) => Request::AlarmRuleList,
        Command::Alarm(AlarmCmd::Set { file }) => Request::AlarmRuleUpsert { rule: read_toml::<AlarmRule>(&file)? },
        Command::Alarm(AlarmCmd::Delete { name }) => Request::AlarmRuleDelete { name },
        Command::Report(ReportCmd::List) => Request::ReportList,
        Command::Report(ReportCmd::Define { file }) => {
            Request::ReportUpsert { pattern: read_toml::<ReportPattern>(&file)? }
        }
        Command::Report(ReportCmd::Delete { name }) => Request::ReportDelete { name },
        Command::Report(ReportCmd::Render { name, .. }) => Request::ReportRender { name },
        Command::Sim(SimCmd::AddTag { uid, station, position, blocks, block_size }) => {
            Request::SimAddTag { uid, station, position_cm: position, blocks, block_size }
        }
        Command::Sim(SimCmd::Move { uid, station, position }) => {
            Request::SimMoveTag { uid, station, position_cm: position }
        }
        Command::Sim(SimCmd::RemoveTag { uid }) => Request::SimRemoveTag { uid },
        Command::Sim(SimCmd::Advance { us }) => Request::SimAdvance { us },
        Command::Sim(SimCmd::Detach { station }) => Request::SimDetach { station },
        Command::Sim(SimCmd::Attach { station }) => Request::SimAttach { station },
        Command::World(WorldCmd::Load { file }) => Request::WorldLoad { document: read_text(&file)? },
        Command::Sync(SyncCmd::Devices) => Request::SyncDevices,
        Command::Sync(SyncCmd::Manifest { device }) => Request::SyncManifest { device },
        Command::Sync(SyncCmd::Run { device }) => Request::SyncRun { device },
        Command::User(UserCmd::List) => Request::UserList,
        Command::User(UserCmd::Add { username, role, new_password }) => {
            Request::UserAdd { username, password: new_password, role }
        }
        Command::User(UserCmd::Set { username, role, new_password, enabled }) => {
            Request::UserSet { username, role, password: new_password, enabled }
        }
        Command::User(UserCmd::Delete { username }) => Request::UserDelete { username },
        Command::Init | Command::Serve { .. } | Command::Device(_) => {
            unreachable!("handled before dispatch")
        }
    })
}

fn config_path(cli: &Cli) -> Result<&Path> {
    cli.config.as_deref().context("this command needs --config (or RFIDTRACE_CONFIG)")
}

fn init(cli: &Cli) -> Result<()> {
    let cfg = ServiceConfig::load(config_path(cli)?)?;
    let (Some(user), Some(password)) = (&cli.user, &cli.password) else {
        bail!("init needs --user and --password for the first administrator");
    };
    let mut service = Service::open(cfg)?;
    service.init_admin(user, password)?;
    println!("initialized store with administrator `{user}`");
    Ok(())
}

fn serve(cli: &Cli, listen: Option<&str>) -> Result<()> {
    let cfg = ServiceConfig::load(config_path(cli)?)?;
    let addr = listen.unwrap_or(&cfg.listen).to_string();
    let service = Service::open(cfg)?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        server::serve(listener, service).await.context("server")
    })
}

fn device_serve(dir: &Path, id: &str, listen: &str, quota: u64) -> Result<()> {
    use rfidtrace_core::sync::{serve_device, DeviceAgent};
    let mut agent = DeviceAgent::open_or_create(dir, id, quota)?;
    let listener = std::net::TcpListener::bind(listen).with_context(|| format!("binding {listen}"))?;
    println!("device `{id}` listening on {}", listener.local_addr()?);
    for stream in listener.incoming() {
        let stream = stream?;
        if let Err(e) = serve_device(stream, &mut agent) {
            eprintln!("device session ended: {e}");
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Init => return init(&cli),
        Command::Serve { listen } => return serve(&cli, listen.as_deref()),
        Command::Device(DeviceCmd::Serve { dir, id, listen, quota_bytes }) => {
            return device_serve(dir, id, listen, *quota_bytes)
        }
        _ => {}
    }
    let mut backend = match (&cli.server, &cli.config) {
        (Some(url), _) => Backend::remote(url)?,
        (None, Some(path)) => Backend::local(path)?,
        (None, None) => bail!("pass --config for local use or --server for a running service"),
    };
    let creds = Credentials { user: cli.user.clone(), password: cli.password.clone(), token: cli.token.clone() };
    let output_file = match &cli.command {
        Command::Report(ReportCmd::Render { output, .. }) => output.clone(),
        _ => None,
    };
    if matches!(cli.command, Command::Login) {
        let (Some(user), Some(password)) = (&creds.user, &creds.password) else {
            bail!("login needs --user and --password");
        };
        if backend.service_mut().is_some() {
            bail!("login tokens only outlive the process with --server");
        }
        let reply = backend.call(Request::Login { username: user.clone(), password: password.clone() })?;
        return output::print("login", &reply, cli.json, None);
    }
    let req = request_for(cli.command)?;
    backend.authenticate(&creds, &req)?;
    let op = req.op();
    let reply = backend.call(req)?;
    output::print(&op, &reply, cli.json, output_file.as_deref())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<backend::ApiFailure>() {
                Some(f) => eprintln!("error: {f}"),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::from(1)
        }
    }
}
