//! Random captures and a brute-force flow grouping.

use std::collections::BTreeMap;
use std::net::{Ipv4Addr, Ipv6Addr};

use earlyflow_core::flow::{assemble, Flow};
use earlyflow_core::pcap::{PacketRecord, TcpFlags, Transport};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Timestamps live on a 1/64 s grid so that window arithmetic is exact,
/// both in memory and after microsecond pcap quantisation.
pub const TICK: f64 = 1.0 / 64.0;

fn random_ip(rng: &mut ChaCha8Rng, pool: u8) -> Ipv6Addr {
    if rng.gen_bool(0.8) {
        Ipv4Addr::new(10, 0, rng.gen_range(0..2), rng.gen_range(1..=pool)).to_ipv6_mapped()
    } else {
        Ipv6Addr::new(0xfd00, 0, 0, 0, 0, 0, 0, rng.gen_range(1..=pool as u16))
    }
}

/// Up to `max_packets` TCP/UDP packets from interleaved conversations,
/// ordered by time. Some conversations place packets exactly one window
/// after their first packet, and just past it.
pub fn random_capture(rng: &mut ChaCha8Rng, max_packets: usize, window: f64) -> Vec<PacketRecord> {
    let n_conv = rng.gen_range(1..=40);
    let target = rng.gen_range(1..=max_packets);
    let mut packets: Vec<PacketRecord> = Vec::new();
    let window_ticks = (window / TICK) as i64;
    for _ in 0..n_conv {
        // Small address and port pools make distinct conversations reuse
        // the same 5-tuple.
        let a = (random_ip(rng, 4), rng.gen_range(1000..1004u16));
        let b = (random_ip(rng, 4), [80u16, 443, 53][rng.gen_range(0..3)]);
        let transport = if rng.gen_bool(0.7) {
            Transport::Tcp
        } else {
            Transport::Udp
        };
        let start = rng.gen_range(0..(4 * window_ticks));
        let count = (target / n_conv).max(1);
        let mut times: Vec<i64> = (0..count)
            .map(|_| start + rng.gen_range(0..(3 * window_ticks)))
            .collect();
        if rng.gen_bool(0.5) {
            times.push(start);
            times.push(start + window_ticks);
            times.push(start + window_ticks + 1);
            times.push(start + 2 * window_ticks + 1);
        }
        for t in times {
            let forward = rng.gen_bool(0.6);
            let (src, dst) = if forward { (a, b) } else { (b, a) };
            packets.push(PacketRecord {
                timestamp: t as f64 * TICK + 1_600_000_000.0,
                src_ip: src.0,
                dst_ip: dst.0,
                src_port: src.1,
                dst_port: dst.1,
                transport,
                total_bytes: rng.gen_range(64..1500),
                tcp_flags: if transport == Transport::Tcp {
                    TcpFlags::from_bits(rng.gen_range(0..0x200))
                } else {
                    TcpFlags::default()
                },
                capture_index: 0,
            });
        }
    }
    packets.sort_by(|x, y| x.timestamp.total_cmp(&y.timestamp));
    packets.truncate(max_packets);
    for (i, p) in packets.iter_mut().enumerate() {
        p.capture_index = i as u64;
    }
    packets
}

type Side = (Ipv6Addr, u16);

#[derive(Debug, Clone, PartialEq)]
pub struct OracleFlow {
    pub low: Side,
    pub high: Side,
    pub transport: Transport,
    pub window_index: u32,
    pub initiator: Side,
    pub start: f64,
    pub end: f64,
    pub members: Vec<u64>,
}

/// Groups by unordered endpoint pair, then cuts each group into windows
/// by comparing every packet against the first packet of the open window.
pub fn oracle_flows(packets: &[PacketRecord], window: f64) -> Vec<OracleFlow> {
    let mut groups: BTreeMap<(Side, Side, u8), Vec<&PacketRecord>> = BTreeMap::new();
    for p in packets {
        let s = (p.src_ip, p.src_port);
        let d = (p.dst_ip, p.dst_port);
        let (low, high) = if s <= d { (s, d) } else { (d, s) };
        let t = match p.transport {
            Transport::Tcp => 0,
            Transport::Udp => 1,
            Transport::Other => continue,
        };
        groups.entry((low, high, t)).or_default().push(p);
    }
    let mut out = Vec::new();
    for ((low, high, _), members) in groups {
        let mut current: Option<OracleFlow> = None;
        let mut index = 0;
        for p in members {
            let fits = current
                .as_ref()
                .is_some_and(|f| p.timestamp - f.start <= window);
            if !fits {
                if let Some(f) = current.take() {
                    out.push(f);
                    index += 1;
                }
                current = Some(OracleFlow {
                    low,
                    high,
                    transport: p.transport,
                    window_index: index,
                    initiator: (p.src_ip, p.src_port),
                    start: p.timestamp,
                    end: p.timestamp,
                    members: Vec::new(),
                });
            }
            let f = current.as_mut().unwrap();
            f.end = p.timestamp;
            f.members.push(p.capture_index);
        }
        out.extend(current);
    }
    out.sort_by(|a, b| {
        a.start
            .total_cmp(&b.start)
            .then(a.members[0].cmp(&b.members[0]))
    });
    out
}

fn same_flow(got: &Flow, want: &OracleFlow) -> bool {
    let s = got.key.session;
    let members: Vec<u64> = got.packets.iter().map(|p| p.capture_index).collect();
    (s.endpoint_a.ip, s.endpoint_a.port) == want.low
        && (s.endpoint_b.ip, s.endpoint_b.port) == want.high
        && s.transport == want.transport
        && got.key.window_index == want.window_index
        && (got.initiator.ip, got.initiator.port) == want.initiator
        && got.start_ts == want.start
        && got.end_ts == want.end
        && members == want.members
}

/// Describes the first difference between the assembler and the oracle.
pub fn assembly_mismatch(packets: &[PacketRecord], window: f64) -> Option<String> {
    let got = match assemble(packets.iter().cloned(), window) {
        Ok(a) => a.flows,
        Err(e) => return Some(format!("assembly failed: {e}")),
    };
    let want = oracle_flows(packets, window);
    if got.len() != want.len() {
        return Some(format!(
            "{} flows assembled, oracle has {}",
            got.len(),
            want.len()
        ));
    }
    got.iter()
        .zip(&want)
        .find(|(g, w)| !same_flow(g, w))
        .map(|(g, w)| format!("flow mismatch:\n{g:?}\nvs\n{w:?}"))
}
