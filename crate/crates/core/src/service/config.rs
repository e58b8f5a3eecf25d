//! Service configuration and simulation world files (both TOML).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ApiError;
use crate::net::{BaudClass, Master, NetworkConfig, SimBus, Station};
use crate::rf::{FieldGeometry, SlotTiming, TagEmulation, Uid, World, DEFAULT_BLOCK_COUNT, DEFAULT_BLOCK_SIZE};
use crate::store::crypto::DEFAULT_ITERATIONS;
use crate::store::table::{EVENTS, STATIONS, TEMPLATES, TRANSPONDERS};

pub const DEFAULT_LISTEN: &str = "127.0.0.1:7450";
pub const DEFAULT_SESSION_HOURS: u64 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    pub store_dir: PathBuf,
    /// Environment variable holding the store passphrase.
    #[serde(default)]
    pub passphrase_env: Option<String>,
    /// File whose first line is the store passphrase.
    #[serde(default)]
    pub passphrase_file: Option<PathBuf>,
    #[serde(default = "default_iterations")]
    pub kdf_iterations: u32,
    /// Seeds the simulation on first start.
    #[serde(default)]
    pub world: Option<PathBuf>,
    #[serde(default = "default_session_hours")]
    pub session_hours: u64,
    #[serde(default = "default_subscriptions")]
    pub subscriptions: Vec<String>,
    #[serde(default, rename = "device")]
    pub devices: Vec<DeviceSpec>,
}

/// A handheld reachable for sync: an in-process device directory or a
/// socket address of a process serving the device side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub id: String,
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub address: Option<String>,
    #[serde(default = "default_quota")]
    pub quota_bytes: u64,
}

fn default_listen() -> String {
    DEFAULT_LISTEN.to_string()
}

fn default_iterations() -> u32 {
    DEFAULT_ITERATIONS
}

fn default_session_hours() -> u64 {
    DEFAULT_SESSION_HOURS
}

fn default_quota() -> u64 {
    crate::sync::device::DEFAULT_QUOTA_BYTES
}

fn default_subscriptions() -> Vec<String> {
    [TRANSPONDERS, STATIONS, EVENTS, TEMPLATES].iter().map(|s| s.to_string()).collect()
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ServiceConfig {
    /// A plain-store configuration rooted at `store_dir`.
    pub fn new(store_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            listen: default_listen(),
            store_dir: store_dir.into(),
            passphrase_env: None,
            passphrase_file: None,
            kdf_iterations: default_iterations(),
            world: None,
            session_hours: default_session_hours(),
            subscriptions: default_subscriptions(),
            devices: Vec::new(),
        }
    }

    /// Reads a config file; relative paths are taken from its directory.
    pub fn load(path: &Path) -> Result<Self, ApiError> {
        let text = fs::read_to_string(path).map_err(|e| ApiError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: ServiceConfig =
            toml::from_str(&text).map_err(|e| ApiError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.store_dir = resolve(base, &cfg.store_dir);
        cfg.passphrase_file = cfg.passphrase_file.map(|p| resolve(base, &p));
        cfg.world = cfg.world.map(|p| resolve(base, &p));
        for d in &mut cfg.devices {
            d.dir = d.dir.as_ref().map(|p| resolve(base, p));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ApiError> {
        if self.session_hours == 0 {
            return Err(ApiError::Config("session_hours must be at least 1".into()));
        }
        for d in &self.devices {
            if d.dir.is_some() == d.address.is_some() {
                return Err(ApiError::Config(format!("device `{}`: set exactly one of dir, address", d.id)));
            }
        }
        Ok(())
    }

    /// `None` means the store is kept in plain form.
    pub fn passphrase(&self) -> Result<Option<String>, ApiError> {
        if let Some(var) = &self.passphrase_env {
            return std::env::var(var)
                .map(Some)
                .map_err(|_| ApiError::Config(format!("passphrase variable `{var}` is not set")));
        }
        if let Some(file) = &self.passphrase_file {
            let text = fs::read_to_string(file)
                .map_err(|e| ApiError::Config(format!("passphrase file {}: {e}", file.display())))?;
            let line = text.lines().next().unwrap_or_default().to_string();
            if line.is_empty() {
                return Err(ApiError::Config(format!("passphrase file {} is empty", file.display())));
            }
            return Ok(Some(line));
        }
        Ok(None)
    }
}

/// Declarative simulation world: stations with their reader profiles and
/// password, and the tags placed in it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldFile {
    #[serde(default)]
    pub network: Option<NetworkConfig>,
    #[serde(default)]
    pub timing: Option<SlotTiming>,
    #[serde(default, rename = "station")]
    pub stations: Vec<StationDoc>,
    #[serde(default, rename = "tag")]
    pub tags: Vec<TagDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationDoc {
    pub addr: u8,
    pub name: String,
    /// `short`, `medium` or `long`.
    #[serde(default = "default_profile")]
    pub profile: String,
    /// 8 hex digits.
    #[serde(default = "default_password")]
    pub password: String,
    #[serde(default)]
    pub baud: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagDoc {
    pub uid: Uid,
    /// Station whose antenna the tag is near; absent = in no field.
    #[serde(default)]
    pub station: Option<u8>,
    #[serde(default)]
    pub position_cm: f64,
    /// Initial memory contents from block 0.
    #[serde(default)]
    pub payload_hex: Option<String>,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
}

fn default_profile() -> String {
    "long".into()
}

fn default_password() -> String {
    "00000000".into()
}

fn default_blocks() -> usize {
    DEFAULT_BLOCK_COUNT
}

fn default_block_size() -> usize {
    DEFAULT_BLOCK_SIZE
}

pub fn parse_password(hex_text: &str) -> Result<[u8; 4], String> {
    let bytes = hex::decode(hex_text.trim()).map_err(|e| format!("password `{hex_text}`: {e}"))?;
    bytes.try_into().map_err(|_| format!("password `{hex_text}` must be 8 hex digits"))
}

impl WorldFile {
    pub fn parse(text: &str) -> Result<Self, ApiError> {
        toml::from_str(text).map_err(|e| ApiError::Config(format!("world file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, ApiError> {
        let text =
            fs::read_to_string(path).map_err(|e| ApiError::Config(format!("world file {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| ApiError::Config(format!("world file {}: {e}", path.display())))
    }

    /// Builds the bus and a master with every station on its roster. Each
    /// station drives the reader numbered like its address.
    pub fn build(&self) -> Result<(SimBus, Master), ApiError> {
        let bad = |what: String| ApiError::Config(format!("world file: {what}"));
        let mut bus = SimBus::new(World::new(self.timing.unwrap_or_default()));
        let mut master = Master::new(self.network.clone().unwrap_or_default());
        for s in &self.stations {
            let geometry = FieldGeometry::profile(&s.profile)
                .ok_or_else(|| bad(format!("station {}: unknown profile `{}`", s.addr, s.profile)))?;
            let password = parse_password(&s.password).map_err(|e| bad(format!("station {}: {e}", s.addr)))?;
            let mut station = Station::new(s.addr, &s.name, s.addr).with_password(password);
            if let Some(rate) = s.baud {
                station.baud = BaudClass::from_rate(rate)
                    .ok_or_else(|| bad(format!("station {}: unsupported baud rate {rate}", s.addr)))?;
            }
            master.register(s.addr, &s.name, password).map_err(|e| bad(format!("station {}: {e}", s.addr)))?;
            bus.add_station(station, geometry).map_err(|e| bad(format!("station {}: {e}", s.addr)))?;
        }
        for t in &self.tags {
            if t.blocks == 0 || t.block_size == 0 {
                return Err(bad(format!("tag {}: empty memory", t.uid)));
            }
            let mut tag = TagEmulation::with_memory(t.uid, t.blocks, t.block_size);
            if let Some(text) = &t.payload_hex {
                let bytes = hex::decode(text.trim()).map_err(|e| bad(format!("tag {}: payload_hex: {e}", t.uid)))?;
                if bytes.len() > t.blocks * t.block_size {
                    return Err(bad(format!("tag {}: payload larger than tag memory", t.uid)));
                }
                for (block, chunk) in tag.blocks.iter_mut().zip(bytes.chunks(t.block_size)) {
                    block[..chunk.len()].copy_from_slice(chunk);
                }
            }
            bus.add_tag(tag).map_err(|e| bad(format!("tag {}: {e}", t.uid)))?;
            bus.place_tag(t.uid, t.station, t.position_cm).map_err(|e| bad(format!("tag {}: {e}", t.uid)))?;
        }
        Ok((bus, master))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const WORLD: &str = r#"
[[station]]
addr = 3
name = "dock 3"
profile = "medium"
password = "0a0b0c0d"

[[station]]
addr = 4
name = "gate"

[[tag]]
uid = "E000000000000001"
station = 3
position_cm = 5
payload_hex = "5401000000"

[[tag]]
uid = "E000000000000002"
position_cm = 100
"#;

    #[test]
    fn world_builds_bus_and_roster() {
        let (bus, master) = WorldFile::parse(WORLD).unwrap().build().unwrap();
        assert_eq!(master.roster().keys().copied().collect::<Vec<_>>(), vec![3, 4]);
        assert_eq!(master.roster()[&3].password, [0x0a, 0x0b, 0x0c, 0x0d]);
        let tag = bus.world().tag(Uid::from_serial(1)).unwrap();
        assert_eq!(tag.blocks[0], vec![0x54, 1, 0, 0]);
        assert_eq!(tag.blocks[1], vec![0, 0, 0, 0]);
        assert_eq!(bus.world().field(3).count(), 1);
    }

    #[test]
    fn world_errors_name_the_culprit() {
        let err =
            WorldFile::parse("[[station]]\naddr = 3\nname = \"x\"\nprofile = \"huge\"\n").unwrap().build().unwrap_err();
        assert!(err.to_string().contains("unknown profile `huge`"), "{err}");
        let err =
            WorldFile::parse("[[station]]\naddr = 3\nname = \"x\"\npassword = \"123\"\n").unwrap().build().unwrap_err();
        assert!(err.to_string().contains("station 3"), "{err}");
        assert!(WorldFile::parse("[[tag]]\nuid = \"0100000000000001\"\n").is_err());
        assert!(WorldFile::parse("[[stations]]\n").is_err());
    }

    #[test]
    fn config_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("svc.toml");
        fs::write(&path, "store_dir = \"data\"\nworld = \"w.toml\"\n[[device]]\nid = \"pda\"\ndir = \"pda\"\n")
            .unwrap();
        let cfg = ServiceConfig::load(&path).unwrap();
        assert_eq!(cfg.store_dir, dir.path().join("data"));
        assert_eq!(cfg.world, Some(dir.path().join("w.toml")));
        assert_eq!(cfg.session_hours, 8);
        assert_eq!(cfg.passphrase().unwrap(), None);

        fs::write(&path, "store_dir = \"d\"\n[[device]]\nid = \"pda\"\n").unwrap();
        assert!(ServiceConfig::load(&path).is_err());
        fs::write(&path, "store_dir = \"d\"\nbogus = 1\n").unwrap();
        assert!(ServiceConfig::load(&path).is_err());
    }
}
