//! Grouping packets into bidirectional flows.
//!
//! A flow is the set of packets sharing a canonical 5-tuple inside one time
//! window. Windows are anchored at the first packet of the flow (active
//! timeout); FIN/RST do not close a flow early.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::net::{IpAddr, Ipv6Addr};
use std::path::Path;

use thiserror::Error;

use crate::pcap::{to_display_ip, to_mapped, PacketRecord, Transport};

/// Window length used for CICIDS2017-style flows, in seconds.
pub const DEFAULT_WINDOW_SECS: f64 = 120.0;

/// Packets may arrive this much earlier than the latest seen timestamp
/// before the table reports an ordering error.
pub const REORDER_TOLERANCE_SECS: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("packet {capture_index} is neither TCP nor UDP")]
    NoKey { capture_index: u64 },
    #[error(
        "packet {capture_index} at {timestamp} precedes the latest timestamp {latest} by more than 1 ms"
    )]
    OutOfOrder {
        capture_index: u64,
        timestamp: f64,
        latest: f64,
    },
    #[error("window length must be positive and finite, got {0}")]
    BadWindow(f64),
    #[error("label rules: {0}")]
    Rules(String),
    #[error("label rules: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Endpoint {
    pub ip: Ipv6Addr,
    pub port: u16,
}

impl Endpoint {
    pub fn new(ip: Ipv6Addr, port: u16) -> Self {
        Endpoint { ip, port }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match to_display_ip(self.ip) {
            IpAddr::V4(v4) => write!(f, "{v4}:{}", self.port),
            IpAddr::V6(v6) => write!(f, "[{v6}]:{}", self.port),
        }
    }
}

/// Direction-independent 5-tuple: `a <= b` under (ip, port) ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SessionKey {
    pub endpoint_a: Endpoint,
    pub endpoint_b: Endpoint,
    pub transport: Transport,
}

/// A session key plus the index of its time window (0 for the first flow
/// of that 5-tuple, 1 for the next, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowKey {
    pub session: SessionKey,
    pub window_index: u32,
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}-{}#{}",
            self.session.transport,
            self.session.endpoint_a,
            self.session.endpoint_b,
            self.window_index
        )
    }
}

pub fn canonical_key(record: &PacketRecord) -> Result<SessionKey, FlowError> {
    if record.transport == Transport::Other {
        return Err(FlowError::NoKey {
            capture_index: record.capture_index,
        });
    }
    let src = Endpoint::new(record.src_ip, record.src_port);
    let dst = Endpoint::new(record.dst_ip, record.dst_port);
    let (endpoint_a, endpoint_b) = if src <= dst { (src, dst) } else { (dst, src) };
    Ok(SessionKey {
        endpoint_a,
        endpoint_b,
        transport: record.transport,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub key: FlowKey,
    /// Sender of the first packet.
    pub initiator: Endpoint,
    pub packets: Vec<PacketRecord>,
    pub start_ts: f64,
    pub end_ts: f64,
    pub label: Option<String>,
    /// Creation order within the table that produced the flow.
    pub seq: u64,
}

impl Flow {
    pub fn flow_id(&self) -> String {
        self.key.to_string()
    }

    pub fn duration(&self) -> f64 {
        self.end_ts - self.start_ts
    }

    /// The endpoint that did not initiate the flow.
    pub fn responder(&self) -> Endpoint {
        let s = self.key.session;
        if s.endpoint_a == self.initiator {
            s.endpoint_b
        } else {
            s.endpoint_a
        }
    }

    /// +1 when `packet` was sent by the initiator, −1 otherwise.
    pub fn direction(&self, packet: &PacketRecord) -> i8 {
        if Endpoint::new(packet.src_ip, packet.src_port) == self.initiator {
            1
        } else {
            -1
        }
    }
}

/// Identifies the flow a packet was assigned to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FlowHandle {
    pub key: FlowKey,
    pub seq: u64,
}

/// Open-flow table for a single capture stream.
#[derive(Debug)]
pub struct FlowTable {
    window_secs: f64,
    open: HashMap<SessionKey, Flow>,
    closed: Vec<Flow>,
    windows_seen: HashMap<SessionKey, u32>,
    latest_ts: f64,
    next_seq: u64,
    accepted: u64,
}

impl FlowTable {
    pub fn new(window_secs: f64) -> Result<Self, FlowError> {
        if !(window_secs.is_finite() && window_secs > 0.0) {
            return Err(FlowError::BadWindow(window_secs));
        }
        Ok(FlowTable {
            window_secs,
            open: HashMap::new(),
            closed: Vec::new(),
            windows_seen: HashMap::new(),
            latest_ts: f64::NEG_INFINITY,
            next_seq: 0,
            accepted: 0,
        })
    }

    pub fn window_secs(&self) -> f64 {
        self.window_secs
    }

    /// Packets accepted so far.
    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    pub fn open_flows(&self) -> usize {
        self.open.len()
    }

    pub fn assign_packet(&mut self, mut record: PacketRecord) -> Result<FlowHandle, FlowError> {
        let session = canonical_key(&record)?;
        if record.timestamp < self.latest_ts {
            if record.timestamp < self.latest_ts - REORDER_TOLERANCE_SECS {
                return Err(FlowError::OutOfOrder {
                    capture_index: record.capture_index,
                    timestamp: record.timestamp,
                    latest: self.latest_ts,
                });
            }
            // Within tolerance: pin to the latest timestamp so IATs stay >= 0.
            record.timestamp = self.latest_ts;
        }
        self.latest_ts = record.timestamp;

        if let Some(flow) = self.open.get_mut(&session) {
            if record.timestamp - flow.start_ts <= self.window_secs {
                flow.end_ts = record.timestamp;
                flow.packets.push(record);
                self.accepted += 1;
                return Ok(FlowHandle {
                    key: flow.key,
                    seq: flow.seq,
                });
            }
            let expired = self.open.remove(&session).expect("flow present");
            self.closed.push(expired);
        }

        let window = self.windows_seen.entry(session).or_insert(0);
        let key = FlowKey {
            session,
            window_index: *window,
        };
        *window += 1;
        let seq = self.next_seq;
        self.next_seq += 1;
        let flow = Flow {
            key,
            initiator: Endpoint::new(record.src_ip, record.src_port),
            start_ts: record.timestamp,
            end_ts: record.timestamp,
            packets: vec![record],
            label: None,
            seq,
        };
        self.open.insert(session, flow);
        self.accepted += 1;
        Ok(FlowHandle { key, seq })
    }

    /// Removes and returns every flow whose window closed before
    /// `horizon_ts`, ordered by start time. Pass `f64::INFINITY` to drain.
    pub fn flush(&mut self, horizon_ts: f64) -> Vec<Flow> {
        let window = self.window_secs;
        let due = |f: &Flow| horizon_ts == f64::INFINITY || f.start_ts + window < horizon_ts;

        let mut out: Vec<Flow> = Vec::new();
        let mut keep = Vec::with_capacity(self.closed.len());
        for f in self.closed.drain(..) {
            if due(&f) {
                out.push(f);
            } else {
                keep.push(f);
            }
        }
        self.closed = keep;

        let expired: Vec<SessionKey> = self
            .open
            .iter()
            .filter(|(_, f)| due(f))
            .map(|(k, _)| *k)
            .collect();
        for k in expired {
            out.extend(self.open.remove(&k));
        }
        out.sort_by(|a, b| a.start_ts.total_cmp(&b.start_ts).then(a.seq.cmp(&b.seq)));
        out
    }
}

/// Result of assembling one capture into flows.
#[derive(Debug, Default)]
pub struct Assembly {
    pub flows: Vec<Flow>,
    /// Records that carried neither TCP nor UDP.
    pub ignored: u64,
}

/// Feeds `records` through a fresh table and drains it.
pub fn assemble<I>(records: I, window_secs: f64) -> Result<Assembly, FlowError>
where
    I: IntoIterator<Item = PacketRecord>,
{
    let mut table = FlowTable::new(window_secs)?;
    let mut ignored = 0;
    for r in records {
        if r.transport == Transport::Other {
            ignored += 1;
            continue;
        }
        table.assign_packet(r)?;
    }
    Ok(Assembly {
        flows: table.flush(f64::INFINITY),
        ignored,
    })
}

/// Merges flows from independently assembled captures by start time.
/// Ties keep capture order, then table order.
pub fn merge_by_start(per_capture: Vec<Vec<Flow>>) -> Vec<(usize, Flow)> {
    let mut all: Vec<(usize, Flow)> = per_capture
        .into_iter()
        .enumerate()
        .flat_map(|(i, flows)| flows.into_iter().map(move |f| (i, f)))
        .collect();
    all.sort_by(|(ia, a), (ib, b)| {
        a.start_ts
            .total_cmp(&b.start_ts)
            .then(ia.cmp(ib))
            .then(a.seq.cmp(&b.seq))
    });
    all
}

pub const BENIGN: &str = "BENIGN";

/// One row of a label rule file. `None` fields are wildcards.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRule {
    pub src_ip: Option<Ipv6Addr>,
    pub src_port: Option<u16>,
    pub dst_ip: Option<Ipv6Addr>,
    pub dst_port: Option<u16>,
    pub start_ts: f64,
    pub end_ts: f64,
    pub label: String,
}

impl LabelRule {
    fn side_matches(ip: Option<Ipv6Addr>, port: Option<u16>, e: Endpoint) -> bool {
        ip.is_none_or(|ip| ip == e.ip) && port.is_none_or(|p| p == e.port)
    }

    /// True when the address pattern matches the flow in either orientation
    /// and the rule interval overlaps the flow's span.
    pub fn matches(&self, flow: &Flow) -> bool {
        let a = flow.key.session.endpoint_a;
        let b = flow.key.session.endpoint_b;
        let forward = Self::side_matches(self.src_ip, self.src_port, a)
            && Self::side_matches(self.dst_ip, self.dst_port, b);
        let reverse = Self::side_matches(self.src_ip, self.src_port, b)
            && Self::side_matches(self.dst_ip, self.dst_port, a);
        (forward || reverse) && self.start_ts <= flow.end_ts && flow.start_ts <= self.end_ts
    }
}

pub const LABEL_RULE_HEADER: [&str; 7] = [
    "src_ip", "src_port", "dst_ip", "dst_port", "start_ts", "end_ts", "label",
];

fn parse_ip_field(s: &str, line: u64) -> Result<Option<Ipv6Addr>, FlowError> {
    let s = s.trim();
    if s == "*" {
        return Ok(None);
    }
    s.parse::<IpAddr>()
        .map(|ip| Some(to_mapped(ip)))
        .map_err(|_| FlowError::Rules(format!("line {line}: bad address `{s}`")))
}

fn parse_port_field(s: &str, line: u64) -> Result<Option<u16>, FlowError> {
    let s = s.trim();
    if s == "*" {
        return Ok(None);
    }
    s.parse::<u16>()
        .map(Some)
        .map_err(|_| FlowError::Rules(format!("line {line}: bad port `{s}`")))
}

fn parse_ts_field(s: &str, line: u64) -> Result<f64, FlowError> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| FlowError::Rules(format!("line {line}: bad timestamp `{s}`")))
}

pub fn parse_label_rules<R: Read>(reader: R) -> Result<Vec<LabelRule>, FlowError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().map(str::trim).ne(LABEL_RULE_HEADER) {
        return Err(FlowError::Rules(format!(
            "expected header `{}`, found `{}`",
            LABEL_RULE_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rules = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != LABEL_RULE_HEADER.len() {
            return Err(FlowError::Rules(format!("line {line}: expected 7 fields")));
        }
        let rule = LabelRule {
            src_ip: parse_ip_field(&row[0], line)?,
            src_port: parse_port_field(&row[1], line)?,
            dst_ip: parse_ip_field(&row[2], line)?,
            dst_port: parse_port_field(&row[3], line)?,
            start_ts: parse_ts_field(&row[4], line)?,
            end_ts: parse_ts_field(&row[5], line)?,
            label: row[6].trim().to_string(),
        };
        if rule.label.is_empty() {
            return Err(FlowError::Rules(format!("line {line}: empty label")));
        }
        if rule.end_ts < rule.start_ts {
            return Err(FlowError::Rules(format!(
                "line {line}: interval ends before it starts"
            )));
        }
        rules.push(rule);
    }
    Ok(rules)
}

pub fn read_label_rules(path: impl AsRef<Path>) -> Result<Vec<LabelRule>, FlowError> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| FlowError::Rules(format!("cannot open {}: {e}", path.as_ref().display())))?;
    parse_label_rules(file)
}

/// Labels every flow with the first matching rule, or [`BENIGN`].
pub fn join_labels(mut flows: Vec<Flow>, rules: &[LabelRule]) -> Vec<Flow> {
    for flow in &mut flows {
        let label = rules
            .iter()
            .find(|r| r.matches(flow))
            .map_or(BENIGN, |r| r.label.as_str());
        flow.label = Some(label.to_string());
    }
    flows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcap::TcpFlags;
    use std::net::Ipv4Addr;

    fn pkt(ts: f64, src: [u8; 4], sport: u16, dst: [u8; 4], dport: u16) -> PacketRecord {
        PacketRecord {
            timestamp: ts,
            src_ip: Ipv4Addr::from(src).to_ipv6_mapped(),
            dst_ip: Ipv4Addr::from(dst).to_ipv6_mapped(),
            src_port: sport,
            dst_port: dport,
            transport: Transport::Tcp,
            total_bytes: 40,
            tcp_flags: TcpFlags::ACK,
            capture_index: 0,
        }
    }

    const A: [u8; 4] = [10, 0, 0, 1];
    const B: [u8; 4] = [10, 0, 0, 2];

    #[test]
    fn key_is_direction_independent() {
        let fwd = canonical_key(&pkt(0.0, A, 5000, B, 80)).unwrap();
        let rev = canonical_key(&pkt(0.0, B, 80, A, 5000)).unwrap();
        assert_eq!(fwd, rev);
        assert!(fwd.endpoint_a <= fwd.endpoint_b);
    }

    #[test]
    fn other_transport_has_no_key() {
        let mut p = pkt(0.0, A, 0, B, 0);
        p.transport = Transport::Other;
        assert!(matches!(canonical_key(&p), Err(FlowError::NoKey { .. })));
        let mut t = FlowTable::new(120.0).unwrap();
        assert!(t.assign_packet(p).is_err());
    }

    #[test]
    fn far_apart_packets_get_distinct_windows() {
        let mut t = FlowTable::new(120.0).unwrap();
        let h1 = t.assign_packet(pkt(0.0, A, 5000, B, 80)).unwrap();
        let h2 = t.assign_packet(pkt(200.0, B, 80, A, 5000)).unwrap();
        assert_ne!(h1.key, h2.key);
        assert_eq!(h1.key.session, h2.key.session);
        assert_eq!(h2.key.window_index, 1);
    }

    #[test]
    fn window_boundary_is_inclusive() {
        let a = assemble(vec![pkt(0.0, A, 1, B, 2), pkt(120.0, A, 1, B, 2)], 120.0).unwrap();
        assert_eq!(a.flows.len(), 1);
        let b = assemble(vec![pkt(0.0, A, 1, B, 2), pkt(121.0, A, 1, B, 2)], 120.0).unwrap();
        assert_eq!(b.flows.len(), 2);
    }

    #[test]
    fn ten_packet_shell_session_is_one_flow() {
        let packets: Vec<_> = (0..10)
            .map(|i| {
                let ts = 0.1 * i as f64 / 9.0;
                if i % 2 == 0 {
                    pkt(ts, A, 4444, B, 49_200)
                } else {
                    pkt(ts, B, 49_200, A, 4444)
                }
            })
            .collect();
        let a = assemble(packets, 120.0).unwrap();
        assert_eq!(a.flows.len(), 1);
        assert_eq!(a.flows[0].packets.len(), 10);
        assert!((a.flows[0].duration() - 0.10).abs() < 1e-12);
    }

    #[test]
    fn out_of_order_beyond_tolerance_fails() {
        let mut t = FlowTable::new(120.0).unwrap();
        t.assign_packet(pkt(10.0, A, 1, B, 2)).unwrap();
        t.assign_packet(pkt(9.9995, A, 1, B, 2)).unwrap();
        assert!(matches!(
            t.assign_packet(pkt(9.99, A, 1, B, 2)),
            Err(FlowError::OutOfOrder { .. })
        ));
        let flows = t.flush(f64::INFINITY);
        assert_eq!(flows[0].packets[1].timestamp, 10.0);
    }

    #[test]
    fn flush_respects_horizon() {
        let mut t = FlowTable::new(120.0).unwrap();
        assert!(t.flush(f64::INFINITY).is_empty());
        t.assign_packet(pkt(0.0, A, 1, B, 2)).unwrap();
        t.assign_packet(pkt(50.0, A, 3, B, 2)).unwrap();
        assert!(t.flush(120.0).is_empty());
        let due = t.flush(121.0);
        assert_eq!(due.len(), 1);
        assert_eq!(due[0].start_ts, 0.0);
        assert_eq!(t.open_flows(), 1);
        assert_eq!(t.flush(f64::INFINITY).len(), 1);
    }

    #[test]
    fn first_packet_is_initiator() {
        let a = assemble(
            vec![pkt(0.0, B, 80, A, 5000), pkt(0.1, A, 5000, B, 80)],
            120.0,
        )
        .unwrap();
        let f = &a.flows[0];
        assert_eq!(f.direction(&f.packets[0]), 1);
        assert_eq!(f.direction(&f.packets[1]), -1);
        assert_eq!(f.responder(), Endpoint::new(f.packets[1].src_ip, 5000));
    }

    fn rules(text: &str) -> Vec<LabelRule> {
        parse_label_rules(text.as_bytes()).unwrap()
    }

    #[test]
    fn labels_default_to_benign() {
        let a = assemble(vec![pkt(0.0, A, 1, B, 2)], 120.0).unwrap();
        let flows = join_labels(a.flows, &[]);
        assert_eq!(flows[0].label.as_deref(), Some(BENIGN));
    }

    #[test]
    fn reversed_rule_still_matches() {
        let a = assemble(vec![pkt(5.0, A, 5000, B, 80)], 120.0).unwrap();
        let r = rules("src_ip,src_port,dst_ip,dst_port,start_ts,end_ts,label\n10.0.0.2,80,10.0.0.1,*,0,10,DoS\n");
        let flows = join_labels(a.flows, &r);
        assert_eq!(flows[0].label.as_deref(), Some("DoS"));
    }

    #[test]
    fn first_matching_rule_wins() {
        let a = assemble(vec![pkt(5.0, A, 5000, B, 80)], 120.0).unwrap();
        let r = rules(
            "src_ip,src_port,dst_ip,dst_port,start_ts,end_ts,label\n\
             *,*,*,80,0,100,PortScan\n\
             10.0.0.1,*,*,*,0,100,Bot\n",
        );
        let flows = join_labels(a.flows, &r);
        assert_eq!(flows[0].label.as_deref(), Some("PortScan"));
    }

    #[test]
    fn rule_interval_must_overlap() {
        let a = assemble(vec![pkt(5.0, A, 5000, B, 80)], 120.0).unwrap();
        let r = rules("src_ip,src_port,dst_ip,dst_port,start_ts,end_ts,label\n*,*,*,*,6,10,Late\n");
        assert_eq!(join_labels(a.flows, &r)[0].label.as_deref(), Some(BENIGN));
    }

    #[test]
    fn malformed_rules_are_rejected() {
        assert!(parse_label_rules("a,b\n1,2\n".as_bytes()).is_err());
        assert!(parse_label_rules(
            "src_ip,src_port,dst_ip,dst_port,start_ts,end_ts,label\nnot-an-ip,*,*,*,0,1,X\n"
                .as_bytes()
        )
        .is_err());
        assert!(parse_label_rules(
            "src_ip,src_port,dst_ip,dst_port,start_ts,end_ts,label\n*,99999,*,*,0,1,X\n".as_bytes()
        )
        .is_err());
    }
}
