//! Fixed-reader network: framing, station state machines, event rings, the
//! simulated multi-drop bus and its master.

pub mod bus;
pub mod frame;
pub mod master;
pub mod ring;
pub mod station;

use thiserror::Error;

use crate::rf::RfError;

pub use bus::{serve_stream, Bus, SimBus, StreamBus, Transcript, TranscriptEntry};
pub use frame::{frame_decode, frame_encode, Frame, FrameDecoder, FrameError, BROADCAST};
pub use master::{Master, NetworkConfig, PingInfo, PollReport, SeqGap, MAX_STATIONS};
pub use ring::{EventKind, EventRecord, EventRing, EVENT_RING_CAPACITY};
pub use station::{BaudClass, Command, Station, Status};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("station {0} did not answer")]
    Timeout(u8),
    #[error("station {addr} answered {status:?}")]
    Station { addr: u8, status: Status },
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Rf(#[from] RfError),
    #[error("invalid station address {0}")]
    BadAddress(u8),
    #[error("station address {0} already in use")]
    DuplicateAddress(u8),
    #[error("station {0} is not on the roster")]
    UnknownStation(u8),
    #[error("master roster is full ({MAX_STATIONS} stations)")]
    RosterFull,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("bus i/o: {0}")]
    Io(String),
}
