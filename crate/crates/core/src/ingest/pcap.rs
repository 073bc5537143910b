//! Reader for the classic libpcap capture file format, walking
//! Ethernet/IPv4/TCP down to Modbus/TCP payloads.

use super::modbus::parse_modbus_payload;
use super::{Frame, IngestError, IngestStats, ParsedCapture};
use crate::types::Direction;

const MAGIC_US_LE: u32 = 0xa1b2_c3d4;
const MAGIC_US_BE: u32 = 0xd4c3_b2a1;
const MAGIC_NS_LE: u32 = 0xa1b2_3c4d;
const MAGIC_NS_BE: u32 = 0x4d3c_b2a1;

const LINKTYPE_ETHERNET: u32 = 1;
const LINKTYPE_RAW_IP: u32 = 101;

const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

struct PcapMeta {
    little_endian: bool,
    nanosecond: bool,
    linktype: u32,
}

fn read_u32(bytes: &[u8], le: bool) -> u32 {
    let arr = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if le {
        u32::from_le_bytes(arr)
    } else {
        u32::from_be_bytes(arr)
    }
}

fn parse_global_header(bytes: &[u8]) -> Result<PcapMeta, IngestError> {
    if bytes.len() < GLOBAL_HEADER_LEN {
        return Err(IngestError::PcapHeader(
            "file shorter than the 24-byte pcap global header".into(),
        ));
    }
    let magic = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let (little_endian, nanosecond) = match magic {
        MAGIC_US_LE => (true, false),
        MAGIC_NS_LE => (true, true),
        // A big-endian file read as little-endian shows the byte-swapped magic.
        MAGIC_US_BE => (false, false),
        MAGIC_NS_BE => (false, true),
        other => {
            return Err(IngestError::PcapHeader(format!(
                "unrecognized pcap magic 0x{other:08x}"
            )))
        }
    };
    let linktype = read_u32(&bytes[20..24], little_endian);
    Ok(PcapMeta {
        little_endian,
        nanosecond,
        linktype,
    })
}

/// Extract the IPv4 datagram from a link-layer frame, or `None` when the
/// packet is not IPv4.
fn ipv4_slice<'a>(data: &'a [u8], linktype: u32) -> Option<&'a [u8]> {
    match linktype {
        LINKTYPE_ETHERNET => {
            if data.len() < 14 {
                return None;
            }
            let mut ethertype = u16::from_be_bytes([data[12], data[13]]);
            let mut offset = 14;
            // Skip single or stacked VLAN tags.
            while (ethertype == 0x8100 || ethertype == 0x88a8) && data.len() >= offset + 4 {
                ethertype = u16::from_be_bytes([data[offset], data[offset + 1]]);
                offset += 4;
            }
            if ethertype != 0x0800 {
                return None;
            }
            Some(&data[offset..])
        }
        LINKTYPE_RAW_IP => Some(data),
        _ => None,
    }
}

struct TcpPayload<'a> {
    src_port: u16,
    dst_port: u16,
    payload: &'a [u8],
}

/// Walk IPv4 and TCP headers; returns `None` for non-TCP, fragmented, or
/// malformed datagrams and for segments without payload bytes.
fn tcp_payload<'a>(ip: &'a [u8]) -> Option<TcpPayload<'a>> {
    if ip.len() < 20 || ip[0] >> 4 != 4 {
        return None;
    }
    let ihl = ((ip[0] & 0x0f) as usize) * 4;
    if ihl < 20 || ip.len() < ihl {
        return None;
    }
    let total_len = u16::from_be_bytes([ip[2], ip[3]]) as usize;
    let frag = u16::from_be_bytes([ip[6], ip[7]]);
    if frag & 0x1fff != 0 {
        // Non-initial fragment; reassembly is out of scope.
        return None;
    }
    if ip[9] != 6 {
        return None;
    }
    // Bound by the IP total length so Ethernet padding never leaks into the
    // application payload; tolerate snaplen truncation.
    let ip_end = total_len.clamp(ihl, ip.len()).min(ip.len());
    let tcp = &ip[ihl..ip_end];
    if tcp.len() < 20 {
        return None;
    }
    let data_offset = ((tcp[12] >> 4) as usize) * 4;
    if data_offset < 20 || tcp.len() < data_offset {
        return None;
    }
    let payload = &tcp[data_offset..];
    if payload.is_empty() {
        return None;
    }
    Some(TcpPayload {
        src_port: u16::from_be_bytes([tcp[0], tcp[1]]),
        dst_port: u16::from_be_bytes([tcp[2], tcp[3]]),
        payload,
    })
}

/// Parse an in-memory pcap file into Modbus frames.
///
/// Packets that do not carry a Modbus/TCP payload on `modbus_port` are
/// skipped and counted. A truncated trailing record is skipped with a
/// warning.
pub(crate) fn parse_pcap(
    bytes: &[u8],
    source_file: &str,
    modbus_port: u16,
) -> Result<ParsedCapture, IngestError> {
    let meta = parse_global_header(bytes)?;
    if meta.linktype != LINKTYPE_ETHERNET && meta.linktype != LINKTYPE_RAW_IP {
        return Err(IngestError::UnsupportedLinkType(meta.linktype));
    }

    let mut frames = Vec::new();
    let mut stats = IngestStats::default();
    let mut seq_no = 0u64;
    let mut offset = GLOBAL_HEADER_LEN;

    while offset < bytes.len() {
        if bytes.len() - offset < RECORD_HEADER_LEN {
            log::warn!("{source_file}: truncated trailing record header; skipping");
            stats.truncated_records += 1;
            break;
        }
        let hdr = &bytes[offset..offset + RECORD_HEADER_LEN];
        let ts_sec = read_u32(&hdr[0..4], meta.little_endian) as i64;
        let ts_sub = read_u32(&hdr[4..8], meta.little_endian) as i64;
        let incl_len = read_u32(&hdr[8..12], meta.little_endian) as usize;
        offset += RECORD_HEADER_LEN;

        if bytes.len() - offset < incl_len {
            log::warn!("{source_file}: truncated trailing record body; skipping");
            stats.truncated_records += 1;
            break;
        }
        let data = &bytes[offset..offset + incl_len];
        offset += incl_len;

        let micros = if meta.nanosecond { ts_sub / 1000 } else { ts_sub };
        let timestamp_us = ts_sec * 1_000_000 + micros;

        let Some(ip) = ipv4_slice(data, meta.linktype) else {
            stats.non_modbus_skipped += 1;
            continue;
        };
        let Some(tcp) = tcp_payload(ip) else {
            stats.non_modbus_skipped += 1;
            continue;
        };
        let direction = if tcp.dst_port == modbus_port {
            Direction::C2S
        } else if tcp.src_port == modbus_port {
            Direction::S2C
        } else {
            stats.non_modbus_skipped += 1;
            continue;
        };

        for pdu in parse_modbus_payload(tcp.payload) {
            if pdu.parse_warning {
                stats.parse_warnings += 1;
            }
            frames.push(Frame {
                seq_no,
                timestamp_us,
                direction,
                function_code: pdu.function_code,
                unit_id: pdu.unit_id,
                payload_len_bytes: pdu.payload_len_bytes,
                iat_us: None,
                exception_code: pdu.exception_code,
                source_file: source_file.to_string(),
                parse_warning: pdu.parse_warning,
            });
            seq_no += 1;
        }
    }

    stats.frames_parsed = frames.len() as u64;
    Ok(ParsedCapture { frames, stats })
}

/// Minimal pcap writer used by fixtures and tests; microsecond timestamps,
/// little-endian, Ethernet link type.
pub mod writer {
    /// Start a pcap byte buffer with the global header.
    pub fn file_header() -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&super::MAGIC_US_LE.to_le_bytes());
        buf.extend_from_slice(&2u16.to_le_bytes()); // major
        buf.extend_from_slice(&4u16.to_le_bytes()); // minor
        buf.extend_from_slice(&0i32.to_le_bytes()); // thiszone
        buf.extend_from_slice(&0u32.to_le_bytes()); // sigfigs
        buf.extend_from_slice(&65535u32.to_le_bytes()); // snaplen
        buf.extend_from_slice(&super::LINKTYPE_ETHERNET.to_le_bytes());
        buf
    }

    /// Append one record wrapping `packet` at `timestamp_us`.
    pub fn append_record(buf: &mut Vec<u8>, timestamp_us: i64, packet: &[u8]) {
        let sec = (timestamp_us / 1_000_000) as u32;
        let usec = (timestamp_us % 1_000_000) as u32;
        buf.extend_from_slice(&sec.to_le_bytes());
        buf.extend_from_slice(&usec.to_le_bytes());
        buf.extend_from_slice(&(packet.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(packet.len() as u32).to_le_bytes());
        buf.extend_from_slice(packet);
    }

    /// Build an Ethernet/IPv4/TCP packet around `tcp_payload`.
    pub fn tcp_packet(
        src_ip: [u8; 4],
        dst_ip: [u8; 4],
        src_port: u16,
        dst_port: u16,
        tcp_payload: &[u8],
    ) -> Vec<u8> {
        let tcp_len = 20 + tcp_payload.len();
        let ip_len = 20 + tcp_len;

        let mut pkt = Vec::with_capacity(14 + ip_len);
        pkt.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x01]); // dst mac
        pkt.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x02]); // src mac
        pkt.extend_from_slice(&0x0800u16.to_be_bytes());

        pkt.push(0x45); // v4, ihl 5
        pkt.push(0);
        pkt.extend_from_slice(&(ip_len as u16).to_be_bytes());
        pkt.extend_from_slice(&[0, 0, 0x40, 0]); // id, flags DF
        pkt.push(64); // ttl
        pkt.push(6); // tcp
        pkt.extend_from_slice(&[0, 0]); // checksum (unchecked)
        pkt.extend_from_slice(&src_ip);
        pkt.extend_from_slice(&dst_ip);

        pkt.extend_from_slice(&src_port.to_be_bytes());
        pkt.extend_from_slice(&dst_port.to_be_bytes());
        pkt.extend_from_slice(&[0, 0, 0, 1]); // seq
        pkt.extend_from_slice(&[0, 0, 0, 0]); // ack
        pkt.push(0x50); // data offset 5
        pkt.push(0x18); // PSH|ACK
        pkt.extend_from_slice(&[0xff, 0xff]); // window
        pkt.extend_from_slice(&[0, 0, 0, 0]); // checksum, urgent
        pkt.extend_from_slice(tcp_payload);
        pkt
    }
}

#[cfg(test)]
mod tests {
    use super::super::modbus::build_mbap_frame;
    use super::*;

    fn one_packet_pcap(payload: &[u8], ts_us: i64, to_server: bool) -> Vec<u8> {
        let mut buf = writer::file_header();
        let pkt = if to_server {
            writer::tcp_packet([10, 0, 0, 2], [10, 0, 0, 1], 49152, 502, payload)
        } else {
            writer::tcp_packet([10, 0, 0, 1], [10, 0, 0, 2], 502, 49152, payload)
        };
        writer::append_record(&mut buf, ts_us, &pkt);
        buf
    }

    #[test]
    fn parses_request_direction_and_fields() {
        let mut pdu = vec![0x03];
        pdu.extend_from_slice(&[0u8; 13]);
        let bytes = one_packet_pcap(&build_mbap_frame(1, 1, &pdu), 1_000_000, true);
        let parsed = parse_pcap(&bytes, "cap", 502).unwrap();
        assert_eq!(parsed.frames.len(), 1);
        let f = &parsed.frames[0];
        assert_eq!(f.direction, Direction::C2S);
        assert_eq!(f.function_code, Some(3));
        assert_eq!(f.unit_id, Some(1));
        assert_eq!(f.payload_len_bytes, Some(14));
        assert_eq!(f.timestamp_us, 1_000_000);
    }

    #[test]
    fn response_direction_from_source_port() {
        let bytes = one_packet_pcap(&build_mbap_frame(1, 1, &[0x83, 0x02]), 5, false);
        let parsed = parse_pcap(&bytes, "cap", 502).unwrap();
        assert_eq!(parsed.frames[0].direction, Direction::S2C);
        assert_eq!(parsed.frames[0].exception_code, Some(2));
    }

    #[test]
    fn empty_capture_yields_empty_list() {
        let bytes = writer::file_header();
        let parsed = parse_pcap(&bytes, "cap", 502).unwrap();
        assert!(parsed.frames.is_empty());
        assert_eq!(parsed.stats.parse_warnings, 0);
        assert_eq!(parsed.stats.truncated_records, 0);
    }

    #[test]
    fn non_modbus_port_counted() {
        let mut buf = writer::file_header();
        let pkt = writer::tcp_packet([10, 0, 0, 2], [10, 0, 0, 1], 49152, 8080, b"hello");
        writer::append_record(&mut buf, 0, &pkt);
        let parsed = parse_pcap(&buf, "cap", 502).unwrap();
        assert!(parsed.frames.is_empty());
        assert_eq!(parsed.stats.non_modbus_skipped, 1);
    }

    #[test]
    fn truncated_trailing_record_skipped_with_warning() {
        let mut bytes = one_packet_pcap(&build_mbap_frame(1, 1, &[0x03, 0, 0, 0, 1]), 7, true);
        let full = one_packet_pcap(&build_mbap_frame(2, 1, &[0x03, 0, 0, 0, 1]), 9, true);
        bytes.extend_from_slice(&full[GLOBAL_HEADER_LEN..full.len() - 4]);
        let parsed = parse_pcap(&bytes, "cap", 502).unwrap();
        assert_eq!(parsed.frames.len(), 1);
        assert_eq!(parsed.stats.truncated_records, 1);
    }

    #[test]
    fn bad_magic_is_fatal() {
        let mut bytes = writer::file_header();
        bytes[0] = 0;
        assert!(parse_pcap(&bytes, "cap", 502).is_err());
    }

    #[test]
    fn ethernet_padding_not_parsed_as_payload() {
        // 1-byte payload padded by the link layer to the 60-byte minimum.
        let mut pkt = writer::tcp_packet([10, 0, 0, 2], [10, 0, 0, 1], 49152, 502, &[0x03]);
        while pkt.len() < 60 {
            pkt.push(0xaa);
        }
        let mut buf = writer::file_header();
        writer::append_record(&mut buf, 0, &pkt);
        let parsed = parse_pcap(&buf, "cap", 502).unwrap();
        assert_eq!(parsed.frames.len(), 1);
        assert_eq!(parsed.frames[0].payload_len_bytes, Some(1));
        assert!(parsed.frames[0].parse_warning);
    }
}
