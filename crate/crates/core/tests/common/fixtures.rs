//! Earliness fixtures: a ten-packet reverse shell flow lasting 0.10 s built
//! from raw pcap bytes, and random series for the prefix properties.

use std::net::Ipv4Addr;

use earlyflow_core::earliness::{take_prefix, PrefixSpec};
use earlyflow_core::features::{extract_mts, MtsSample};
use earlyflow_core::flow::{assemble, DEFAULT_WINDOW_SECS};
use earlyflow_core::pcap::{
    PacketRecord, PcapReader, PcapWriter, TcpFlags, Transport, WriterFormat,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const REVERSE_SHELL_PACKETS: usize = 10;
pub const REVERSE_SHELL_DURATION: f64 = 0.10;

const OFFSETS_MS: [u32; REVERSE_SHELL_PACKETS] = [0, 10, 20, 30, 40, 50, 60, 70, 80, 100];

pub fn reverse_shell_packets() -> Vec<PacketRecord> {
    let attacker = Ipv4Addr::new(10, 0, 0, 5).to_ipv6_mapped();
    let victim = Ipv4Addr::new(10, 0, 0, 9).to_ipv6_mapped();
    OFFSETS_MS
        .iter()
        .enumerate()
        .map(|(i, &ms)| {
            let outbound = i % 2 == 0;
            let (src, dst) = if outbound {
                ((victim, 49152), (attacker, 4444))
            } else {
                ((attacker, 4444), (victim, 49152))
            };
            PacketRecord {
                timestamp: 1_650_000_000.0 + ms as f64 / 1000.0,
                src_ip: src.0,
                dst_ip: dst.0,
                src_port: src.1,
                dst_port: dst.1,
                transport: Transport::Tcp,
                total_bytes: 60 + 40 * i as u32,
                tcp_flags: TcpFlags::from_bits(0x18),
                capture_index: i as u64,
            }
        })
        .collect()
}

/// The fixture flow after a microsecond pcap round trip, assembly and
/// feature extraction.
pub fn reverse_shell_sample() -> MtsSample {
    let mut w = PcapWriter::new(
        Vec::new(),
        WriterFormat {
            big_endian: false,
            nanosecond: false,
        },
    )
    .unwrap();
    for p in reverse_shell_packets() {
        w.write_record(&p).unwrap();
    }
    let bytes = w.into_inner();
    let records = PcapReader::new(bytes.as_slice())
        .unwrap()
        .map(Result::unwrap);
    let mut flows = assemble(records, DEFAULT_WINDOW_SECS).unwrap().flows;
    assert_eq!(flows.len(), 1);
    let mut flow = flows.remove(0);
    flow.label = Some("reverse_tcp".into());
    extract_mts(&flow)
}

/// Ragged series with bursts of equal timestamps, sometimes at epoch scale.
pub fn random_series(rng: &mut ChaCha8Rng) -> MtsSample {
    let len = rng.gen_range(1..=120);
    let d = rng.gen_range(1..=4);
    let mut t = if rng.gen_bool(0.5) {
        rng.gen_range(1.4e9..1.7e9)
    } else {
        0.0
    };
    let timestamps = (0..len)
        .map(|_| {
            let now = t;
            // Bursts of identical timestamps happen in real captures.
            if !rng.gen_bool(0.2) {
                t += rng.gen_range(0.0..2.0);
            }
            now
        })
        .collect();
    let values = (0..len * d).map(|_| rng.gen_range(-5.0..5.0)).collect();
    MtsSample::new("r", d, values, timestamps, "x")
}

/// Checks that E grows with `l` and DE with `t` on `s`.
pub fn monotonicity_violation(s: &MtsSample, rng: &mut ChaCha8Rng) -> Option<String> {
    let mut last = 0.0;
    for l in 1..=s.len() + 2 {
        let (_, r) = take_prefix(s, PrefixSpec::ByCount(l));
        if r.e < last || r.e != r.l_used as f64 / s.len() as f64 {
            return Some(format!("E = {} at l = {l} after {last}", r.e));
        }
        last = r.e;
    }
    if last != 1.0 {
        return Some(format!("E of the whole series is {last}"));
    }
    let mut grid: Vec<f64> = (0..12)
        .map(|_| rng.gen_range(0.0..1.2 * s.duration().max(0.5)))
        .collect();
    grid.sort_by(f64::total_cmp);
    let (mut last_de, mut last_len) = (0.0, 0);
    for t in grid {
        let (p, r) = take_prefix(s, PrefixSpec::ByDuration(t));
        if r.de < last_de || p.len() < last_len || !(0.0..=1.0).contains(&r.de) {
            return Some(format!("DE = {} with {} rows at t = {t}", r.de, p.len()));
        }
        (last_de, last_len) = (r.de, p.len());
    }
    None
}

/// Checks that cutting a prefix of a prefix with the same spec is a no-op.
pub fn idempotence_violation(s: &MtsSample, rng: &mut ChaCha8Rng) -> Option<String> {
    let spec = if rng.gen_bool(0.5) {
        PrefixSpec::ByCount(rng.gen_range(1..=s.len() + 3))
    } else {
        PrefixSpec::ByDuration(rng.gen_range(0.0..s.duration() + 1.0))
    };
    let (once, _) = take_prefix(s, spec);
    let (twice, _) = take_prefix(&once, spec);
    if once != twice || once != s.truncated(once.len()) {
        return Some(format!(
            "{spec} is not idempotent on a {}-row series",
            s.len()
        ));
    }
    None
}
