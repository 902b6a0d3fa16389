//! Per-packet flow features (TS-NFM).
//!
//! Every packet of a flow becomes one 13-wide row: direction, inter-arrival
//! time, IP-layer size and the ten TCP flag bits.

use std::net::Ipv6Addr;

use crate::flow::{Flow, BENIGN};
use crate::pcap::{TcpFlags, Transport};

pub const NUM_FEATURES: usize = 13;

pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "direction",
    "iat_seconds",
    "bytes",
    TcpFlags::NAMES[0],
    TcpFlags::NAMES[1],
    TcpFlags::NAMES[2],
    TcpFlags::NAMES[3],
    TcpFlags::NAMES[4],
    TcpFlags::NAMES[5],
    TcpFlags::NAMES[6],
    TcpFlags::NAMES[7],
    TcpFlags::NAMES[8],
    TcpFlags::NAMES[9],
];

pub const DIRECTION: usize = 0;
pub const IAT: usize = 1;
pub const BYTES: usize = 2;
pub const FIRST_FLAG: usize = 3;

/// Addressing of the flow a sample came from, oriented from the initiator.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionInfo {
    pub src_ip: Ipv6Addr,
    pub src_port: u16,
    pub dst_ip: Ipv6Addr,
    pub dst_port: u16,
    pub transport: Transport,
}

/// An `L x d` multivariate time series with absolute per-row timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct MtsSample {
    pub flow_id: String,
    /// Row-major, `len() * d` values.
    pub values: Vec<f64>,
    pub d: usize,
    pub timestamps: Vec<f64>,
    pub label: String,
    pub session: Option<SessionInfo>,
}

impl MtsSample {
    /// Builds a sample without session information.
    ///
    /// Panics if `values.len() != timestamps.len() * d`.
    pub fn new(
        flow_id: impl Into<String>,
        d: usize,
        values: Vec<f64>,
        timestamps: Vec<f64>,
        label: impl Into<String>,
    ) -> Self {
        assert!(
            d > 0 && values.len() == timestamps.len() * d,
            "sample shape mismatch"
        );
        MtsSample {
            flow_id: flow_id.into(),
            values,
            d,
            timestamps,
            label: label.into(),
            session: None,
        }
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.d)
    }

    pub fn start_ts(&self) -> f64 {
        self.timestamps[0]
    }

    pub fn end_ts(&self) -> f64 {
        self.timestamps[self.len() - 1]
    }

    /// `Dur(MTS)`: last timestamp minus first.
    pub fn duration(&self) -> f64 {
        self.end_ts() - self.start_ts()
    }

    /// Offset of row `i` from the first row, in seconds.
    pub fn rel_ts(&self, i: usize) -> f64 {
        self.timestamps[i] - self.timestamps[0]
    }

    /// First `n` rows as a new sample.
    pub fn truncated(&self, n: usize) -> MtsSample {
        let n = n.min(self.len());
        MtsSample {
            flow_id: self.flow_id.clone(),
            values: self.values[..n * self.d].to_vec(),
            d: self.d,
            timestamps: self.timestamps[..n].to_vec(),
            label: self.label.clone(),
            session: self.session.clone(),
        }
    }
}

/// Converts a finalized flow into its feature matrix.
pub fn extract_mts(flow: &Flow) -> MtsSample {
    let n = flow.packets.len();
    let mut values = Vec::with_capacity(n * NUM_FEATURES);
    let mut timestamps = Vec::with_capacity(n);
    let mut prev_ts = flow.packets.first().map_or(0.0, |p| p.timestamp);
    for p in &flow.packets {
        values.push(flow.direction(p) as f64);
        values.push(p.timestamp - prev_ts);
        values.push(p.total_bytes as f64);
        for bit in 0..TcpFlags::COUNT {
            values.push(if p.tcp_flags.get(bit) { 1.0 } else { 0.0 });
        }
        timestamps.push(p.timestamp);
        prev_ts = p.timestamp;
    }
    let responder = flow.responder();
    MtsSample {
        flow_id: flow.flow_id(),
        values,
        d: NUM_FEATURES,
        timestamps,
        label: flow.label.clone().unwrap_or_else(|| BENIGN.to_string()),
        session: Some(SessionInfo {
            src_ip: flow.initiator.ip,
            src_port: flow.initiator.port,
            dst_ip: responder.ip,
            dst_port: responder.port,
            transport: flow.key.session.transport,
        }),
    }
}
