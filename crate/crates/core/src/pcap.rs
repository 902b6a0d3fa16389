//! Classic libpcap capture reading (and writing, for synthetic captures).
//!
//! Only Ethernet link-layer captures are accepted. Frames are decoded down to
//! the TCP/UDP header; anything that is not IP, or whose layer lengths do not
//! add up, is skipped and counted rather than treated as fatal.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::path::Path;

use thiserror::Error;

const MAGIC_MICROS: u32 = 0xA1B2_C3D4;
const MAGIC_NANOS: u32 = 0xA1B2_3C4D;
const LINKTYPE_ETHERNET: u32 = 1;
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86DD;
const ETHERTYPE_VLAN: u16 = 0x8100;
const ETHERTYPE_QINQ: u16 = 0x88A8;

const IPPROTO_TCP: u8 = 6;
const IPPROTO_UDP: u8 = 17;

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("cannot read capture: {0}")]
    Io(#[from] io::Error),
    #[error("unknown pcap magic number {0:#010x}")]
    UnknownMagic(u32),
    #[error("capture ends inside the 24-byte global header")]
    TruncatedGlobalHeader,
    #[error("unsupported link type {0} (only Ethernet is accepted)")]
    UnsupportedLinkType(u32),
    #[error("record {index}: capture ends inside the record header")]
    TruncatedRecordHeader { index: u64 },
    #[error("record {index}: capture ends inside the packet data")]
    TruncatedRecordData { index: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Transport {
    Tcp,
    Udp,
    Other,
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transport::Tcp => "tcp",
            Transport::Udp => "udp",
            Transport::Other => "other",
        })
    }
}

impl std::str::FromStr for Transport {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tcp" => Ok(Transport::Tcp),
            "udp" => Ok(Transport::Udp),
            "other" => Ok(Transport::Other),
            _ => Err(format!("unknown transport `{s}`")),
        }
    }
}

/// The ten TCP flag features, in feature order.
///
/// Bit `i` of the inner value is feature `i`: NS, CWR, ECE, URG, ACK, PSH,
/// RST, SYN, FIN, RESERVED.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct TcpFlags(u16);

impl TcpFlags {
    pub const COUNT: usize = 10;
    pub const NAMES: [&'static str; 10] = [
        "flag_NS",
        "flag_CWR",
        "flag_ECE",
        "flag_URG",
        "flag_ACK",
        "flag_PSH",
        "flag_RST",
        "flag_SYN",
        "flag_FIN",
        "flag_RESERVED",
    ];

    pub const NS: TcpFlags = TcpFlags(1 << 0);
    pub const CWR: TcpFlags = TcpFlags(1 << 1);
    pub const ECE: TcpFlags = TcpFlags(1 << 2);
    pub const URG: TcpFlags = TcpFlags(1 << 3);
    pub const ACK: TcpFlags = TcpFlags(1 << 4);
    pub const PSH: TcpFlags = TcpFlags(1 << 5);
    pub const RST: TcpFlags = TcpFlags(1 << 6);
    pub const SYN: TcpFlags = TcpFlags(1 << 7);
    pub const FIN: TcpFlags = TcpFlags(1 << 8);
    pub const RESERVED: TcpFlags = TcpFlags(1 << 9);

    pub const fn empty() -> Self {
        TcpFlags(0)
    }

    pub fn from_bits(bits: u16) -> Self {
        TcpFlags(bits & 0x3FF)
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn contains(self, other: TcpFlags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn get(self, index: usize) -> bool {
        index < Self::COUNT && self.0 & (1 << index) != 0
    }

    /// Decodes header bytes 12 and 13 of a TCP header. Any of the three
    /// reserved bits maps onto the single RESERVED feature.
    pub fn from_header(byte12: u8, byte13: u8) -> Self {
        let mut bits = 0u16;
        if byte12 & 0x01 != 0 {
            bits |= Self::NS.0;
        }
        if byte12 & 0x0E != 0 {
            bits |= Self::RESERVED.0;
        }
        // CWR..FIN occupy byte 13 from the high bit down.
        for i in 0..8 {
            if byte13 & (0x80 >> i) != 0 {
                bits |= 1 << (i + 1);
            }
        }
        TcpFlags(bits)
    }

    /// Inverse of [`TcpFlags::from_header`]; RESERVED is written to the
    /// reserved bit adjacent to NS.
    pub fn to_header(self) -> (u8, u8) {
        let mut byte12 = 0u8;
        if self.contains(Self::NS) {
            byte12 |= 0x01;
        }
        if self.contains(Self::RESERVED) {
            byte12 |= 0x02;
        }
        let mut byte13 = 0u8;
        for i in 0..8 {
            if self.0 & (1 << (i + 1)) != 0 {
                byte13 |= 0x80 >> i;
            }
        }
        (byte12, byte13)
    }
}

impl std::ops::BitOr for TcpFlags {
    type Output = TcpFlags;

    fn bitor(self, rhs: TcpFlags) -> TcpFlags {
        TcpFlags(self.0 | rhs.0)
    }
}

/// One decoded packet.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketRecord {
    /// Seconds since the epoch.
    pub timestamp: f64,
    /// IPv4 addresses are stored IPv4-mapped.
    pub src_ip: Ipv6Addr,
    pub dst_ip: Ipv6Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub transport: Transport,
    /// Size at the IP layer (IPv4 total length, or IPv6 payload length + 40).
    pub total_bytes: u32,
    /// Always empty unless `transport` is TCP.
    pub tcp_flags: TcpFlags,
    /// Frame index within the capture file, counting skipped frames.
    pub capture_index: u64,
}

/// Maps an address into the 128-bit space used by [`PacketRecord`].
pub fn to_mapped(ip: IpAddr) -> Ipv6Addr {
    match ip {
        IpAddr::V4(v4) => v4.to_ipv6_mapped(),
        IpAddr::V6(v6) => v6,
    }
}

/// Undoes IPv4 mapping for display.
pub fn to_display_ip(ip: Ipv6Addr) -> IpAddr {
    ip.to_canonical()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ByteOrder {
    Little,
    Big,
}

impl ByteOrder {
    fn u32(self, b: [u8; 4]) -> u32 {
        match self {
            ByteOrder::Little => u32::from_le_bytes(b),
            ByteOrder::Big => u32::from_be_bytes(b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CaptureStats {
    pub frames: u64,
    pub records: u64,
    pub skipped: u64,
}

/// Streaming reader over one capture file.
pub struct PcapReader<R> {
    inner: R,
    order: ByteOrder,
    nanos: bool,
    snaplen: u32,
    stats: CaptureStats,
    finished: bool,
    buf: Vec<u8>,
}

pub fn open_capture(path: impl AsRef<Path>) -> Result<PcapReader<BufReader<File>>, PcapError> {
    let file = File::open(path)?;
    PcapReader::new(BufReader::new(file))
}

/// Reads until `buf` is full or EOF; returns the number of bytes read.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut inner: R) -> Result<Self, PcapError> {
        let mut header = [0u8; GLOBAL_HEADER_LEN];
        let n = read_full(&mut inner, &mut header)?;
        if n < 4 {
            return Err(PcapError::TruncatedGlobalHeader);
        }
        let raw = [header[0], header[1], header[2], header[3]];
        let (order, nanos) = match (u32::from_le_bytes(raw), u32::from_be_bytes(raw)) {
            (MAGIC_MICROS, _) => (ByteOrder::Little, false),
            (MAGIC_NANOS, _) => (ByteOrder::Little, true),
            (_, MAGIC_MICROS) => (ByteOrder::Big, false),
            (_, MAGIC_NANOS) => (ByteOrder::Big, true),
            _ => return Err(PcapError::UnknownMagic(u32::from_be_bytes(raw))),
        };
        if n < GLOBAL_HEADER_LEN {
            return Err(PcapError::TruncatedGlobalHeader);
        }
        let snaplen = order.u32([header[16], header[17], header[18], header[19]]);
        let link = order.u32([header[20], header[21], header[22], header[23]]);
        if link != LINKTYPE_ETHERNET {
            return Err(PcapError::UnsupportedLinkType(link));
        }
        Ok(PcapReader {
            inner,
            order,
            nanos,
            snaplen,
            stats: CaptureStats::default(),
            finished: false,
            buf: Vec::new(),
        })
    }

    pub fn is_nanosecond(&self) -> bool {
        self.nanos
    }

    pub fn snaplen(&self) -> u32 {
        self.snaplen
    }

    pub fn stats(&self) -> CaptureStats {
        self.stats
    }

    /// Returns the next decodable packet, `Ok(None)` at end of file.
    pub fn next_packet(&mut self) -> Result<Option<PacketRecord>, PcapError> {
        while !self.finished {
            let index = self.stats.frames;
            let mut rh = [0u8; RECORD_HEADER_LEN];
            let n = read_full(&mut self.inner, &mut rh)?;
            if n == 0 {
                self.finished = true;
                return Ok(None);
            }
            if n < RECORD_HEADER_LEN {
                self.finished = true;
                return Err(PcapError::TruncatedRecordHeader { index });
            }
            let o = self.order;
            let ts_sec = o.u32([rh[0], rh[1], rh[2], rh[3]]) as u64;
            let ts_frac = o.u32([rh[4], rh[5], rh[6], rh[7]]) as u64;
            let incl_len = o.u32([rh[8], rh[9], rh[10], rh[11]]) as usize;

            self.buf.resize(incl_len, 0);
            let got = read_full(&mut self.inner, &mut self.buf)?;
            if got < incl_len {
                self.finished = true;
                return Err(PcapError::TruncatedRecordData { index });
            }
            self.stats.frames += 1;

            // Adding the fraction separately keeps microsecond stamps exact
            // whenever the sum is representable.
            let scale = if self.nanos { 1e9 } else { 1e6 };
            let timestamp = ts_sec as f64 + ts_frac as f64 / scale;
            match decode_ethernet(&self.buf) {
                Some(mut record) => {
                    record.timestamp = timestamp;
                    record.capture_index = index;
                    self.stats.records += 1;
                    return Ok(Some(record));
                }
                None => self.stats.skipped += 1,
            }
        }
        Ok(None)
    }
}

impl<R: Read> Iterator for PcapReader<R> {
    type Item = Result<PacketRecord, PcapError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_packet().transpose()
    }
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

/// Decodes one Ethernet frame. `None` means the frame is skipped.
fn decode_ethernet(frame: &[u8]) -> Option<PacketRecord> {
    if frame.len() < 14 {
        return None;
    }
    let mut ethertype = be16(frame, 12);
    let mut offset = 14;
    if ethertype == ETHERTYPE_VLAN {
        if frame.len() < 18 {
            return None;
        }
        ethertype = be16(frame, 16);
        offset = 18;
        if ethertype == ETHERTYPE_VLAN || ethertype == ETHERTYPE_QINQ {
            return None;
        }
    }
    let l3 = &frame[offset..];
    match ethertype {
        ETHERTYPE_IPV4 => decode_ipv4(l3),
        ETHERTYPE_IPV6 => decode_ipv6(l3),
        _ => None,
    }
}

fn decode_ipv4(p: &[u8]) -> Option<PacketRecord> {
    if p.len() < 20 || p[0] >> 4 != 4 {
        return None;
    }
    let ihl = (p[0] & 0x0F) as usize * 4;
    let total_len = be16(p, 2) as usize;
    if ihl < 20 || p.len() < ihl || total_len < ihl {
        return None;
    }
    let frag_offset = be16(p, 6) & 0x1FFF;
    if frag_offset != 0 {
        return None;
    }
    let protocol = p[9];
    let src = Ipv4Addr::new(p[12], p[13], p[14], p[15]);
    let dst = Ipv4Addr::new(p[16], p[17], p[18], p[19]);
    // The transport header must fit inside both the datagram and the capture.
    let l4_end = total_len.min(p.len());
    decode_transport(
        protocol,
        &p[ihl..l4_end],
        src.to_ipv6_mapped(),
        dst.to_ipv6_mapped(),
        total_len as u32,
    )
}

fn decode_ipv6(p: &[u8]) -> Option<PacketRecord> {
    if p.len() < 40 || p[0] >> 4 != 6 {
        return None;
    }
    let payload_len = be16(p, 4) as usize;
    let mut next = p[6];
    let src = Ipv6Addr::from(<[u8; 16]>::try_from(&p[8..24]).ok()?);
    let dst = Ipv6Addr::from(<[u8; 16]>::try_from(&p[24..40]).ok()?);
    let end = (40 + payload_len).min(p.len());
    let mut offset = 40;
    // Walk the common extension headers.
    loop {
        match next {
            0 | 43 | 60 => {
                if offset + 8 > end {
                    return None;
                }
                let len = (p[offset + 1] as usize + 1) * 8;
                next = p[offset];
                offset += len;
            }
            44 => {
                if offset + 8 > end {
                    return None;
                }
                if be16(p, offset + 2) >> 3 != 0 {
                    return None;
                }
                next = p[offset];
                offset += 8;
            }
            _ => break,
        }
        if offset > end {
            return None;
        }
    }
    decode_transport(next, &p[offset..end], src, dst, payload_len as u32 + 40)
}

fn decode_transport(
    protocol: u8,
    l4: &[u8],
    src_ip: Ipv6Addr,
    dst_ip: Ipv6Addr,
    total_bytes: u32,
) -> Option<PacketRecord> {
    let mut record = PacketRecord {
        timestamp: 0.0,
        src_ip,
        dst_ip,
        src_port: 0,
        dst_port: 0,
        transport: Transport::Other,
        total_bytes,
        tcp_flags: TcpFlags::empty(),
        capture_index: 0,
    };
    match protocol {
        IPPROTO_TCP => {
            if l4.len() < 20 {
                return None;
            }
            let data_offset = (l4[12] >> 4) as usize * 4;
            if data_offset < 20 {
                return None;
            }
            record.src_port = be16(l4, 0);
            record.dst_port = be16(l4, 2);
            record.transport = Transport::Tcp;
            record.tcp_flags = TcpFlags::from_header(l4[12], l4[13]);
        }
        IPPROTO_UDP => {
            if l4.len() < 8 {
                return None;
            }
            record.src_port = be16(l4, 0);
            record.dst_port = be16(l4, 2);
            record.transport = Transport::Udp;
        }
        _ => {}
    }
    Some(record)
}

/// Byte order and timestamp resolution of a capture written by [`PcapWriter`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriterFormat {
    pub big_endian: bool,
    pub nanosecond: bool,
}

impl Default for WriterFormat {
    fn default() -> Self {
        WriterFormat {
            big_endian: false,
            nanosecond: false,
        }
    }
}

/// Writes classic pcap files from [`PacketRecord`]s, synthesising minimal
/// Ethernet/IP/TCP/UDP frames. Used for test fixtures and synthetic captures.
pub struct PcapWriter<W: Write> {
    inner: W,
    format: WriterFormat,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut inner: W, format: WriterFormat) -> io::Result<Self> {
        let magic = if format.nanosecond {
            MAGIC_NANOS
        } else {
            MAGIC_MICROS
        };
        let mut header = Vec::with_capacity(GLOBAL_HEADER_LEN);
        let put32 = |h: &mut Vec<u8>, v: u32| {
            if format.big_endian {
                h.extend_from_slice(&v.to_be_bytes())
            } else {
                h.extend_from_slice(&v.to_le_bytes())
            }
        };
        put32(&mut header, magic);
        let (major, minor) = (2u16, 4u16);
        if format.big_endian {
            header.extend_from_slice(&major.to_be_bytes());
            header.extend_from_slice(&minor.to_be_bytes());
        } else {
            header.extend_from_slice(&major.to_le_bytes());
            header.extend_from_slice(&minor.to_le_bytes());
        }
        put32(&mut header, 0); // thiszone
        put32(&mut header, 0); // sigfigs
        put32(&mut header, 65_535);
        put32(&mut header, LINKTYPE_ETHERNET);
        inner.write_all(&header)?;
        Ok(PcapWriter { inner, format })
    }

    fn put32(&mut self, v: u32) -> io::Result<()> {
        if self.format.big_endian {
            self.inner.write_all(&v.to_be_bytes())
        } else {
            self.inner.write_all(&v.to_le_bytes())
        }
    }

    /// Writes an arbitrary link-layer frame.
    pub fn write_frame(&mut self, timestamp: f64, frame: &[u8]) -> io::Result<()> {
        let units = if self.format.nanosecond {
            1_000_000_000u64
        } else {
            1_000_000
        };
        let whole = timestamp.floor();
        let mut sec = whole as u64;
        let mut frac = ((timestamp - whole) * units as f64).round() as u64;
        if frac >= units {
            sec += 1;
            frac -= units;
        }
        self.put32(sec as u32)?;
        self.put32(frac as u32)?;
        self.put32(frame.len() as u32)?;
        self.put32(frame.len() as u32)?;
        self.inner.write_all(frame)
    }

    /// Writes `record` as a synthetic frame. `capture_index` is ignored.
    pub fn write_record(&mut self, record: &PacketRecord) -> io::Result<()> {
        let frame = build_frame(record)?;
        self.write_frame(record.timestamp, &frame)
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

fn invalid(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidInput, msg.to_string())
}

/// Builds an Ethernet frame carrying the headers described by `record`.
pub fn build_frame(record: &PacketRecord) -> io::Result<Vec<u8>> {
    let l4 = match record.transport {
        Transport::Tcp => {
            let mut h = vec![0u8; 20];
            h[0..2].copy_from_slice(&record.src_port.to_be_bytes());
            h[2..4].copy_from_slice(&record.dst_port.to_be_bytes());
            let (b12, b13) = record.tcp_flags.to_header();
            h[12] = (5 << 4) | b12;
            h[13] = b13;
            h[14..16].copy_from_slice(&8192u16.to_be_bytes());
            h
        }
        Transport::Udp => {
            let mut h = vec![0u8; 8];
            h[0..2].copy_from_slice(&record.src_port.to_be_bytes());
            h[2..4].copy_from_slice(&record.dst_port.to_be_bytes());
            h
        }
        Transport::Other => Vec::new(),
    };
    let protocol = match record.transport {
        Transport::Tcp => IPPROTO_TCP,
        Transport::Udp => IPPROTO_UDP,
        // ICMP
        Transport::Other => 1,
    };
    let mut frame = vec![0u8; 12];
    frame[0..6].copy_from_slice(&[0x02, 0, 0, 0, 0, 0x02]);
    frame[6..12].copy_from_slice(&[0x02, 0, 0, 0, 0, 0x01]);
    match (
        record.src_ip.to_ipv4_mapped(),
        record.dst_ip.to_ipv4_mapped(),
    ) {
        (Some(src), Some(dst)) => {
            let total = record.total_bytes as usize;
            if total < 20 + l4.len() || total > u16::MAX as usize {
                return Err(invalid("total_bytes does not fit the IPv4 headers"));
            }
            frame.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
            let mut ip = vec![0u8; 20];
            ip[0] = 0x45;
            ip[2..4].copy_from_slice(&(total as u16).to_be_bytes());
            ip[6] = 0x40; // DF
            ip[8] = 64;
            ip[9] = protocol;
            ip[12..16].copy_from_slice(&src.octets());
            ip[16..20].copy_from_slice(&dst.octets());
            frame.extend_from_slice(&ip);
            frame.extend_from_slice(&l4);
            frame.resize(14 + total, 0);
        }
        _ => {
            let total = record.total_bytes as usize;
            if total < 40 + l4.len() || total - 40 > u16::MAX as usize {
                return Err(invalid("total_bytes does not fit the IPv6 headers"));
            }
            frame.extend_from_slice(&ETHERTYPE_IPV6.to_be_bytes());
            let mut ip = vec![0u8; 40];
            ip[0] = 0x60;
            ip[4..6].copy_from_slice(&((total - 40) as u16).to_be_bytes());
            ip[6] = if record.transport == Transport::Other {
                58
            } else {
                protocol
            };
            ip[7] = 64;
            ip[8..24].copy_from_slice(&record.src_ip.octets());
            ip[24..40].copy_from_slice(&record.dst_ip.octets());
            frame.extend_from_slice(&ip);
            frame.extend_from_slice(&l4);
            frame.resize(14 + total, 0);
        }
    }
    Ok(frame)
}

/// A minimal ARP request frame, useful as a non-IP frame in fixtures.
pub fn arp_frame() -> Vec<u8> {
    let mut frame = vec![0xFF; 6];
    frame.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x01]);
    frame.extend_from_slice(&0x0806u16.to_be_bytes());
    frame.extend_from_slice(&[0, 1, 8, 0, 6, 4, 0, 1]);
    frame.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x01, 10, 0, 0, 1]);
    frame.extend_from_slice(&[0, 0, 0, 0, 0, 0, 10, 0, 0, 2]);
    frame
}
