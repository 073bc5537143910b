//! Modbus/TCP application-layer parsing (MBAP header + PDU).

/// Protocol fields extracted from one Modbus PDU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct PduFields {
    pub function_code: Option<u8>,
    pub unit_id: Option<u8>,
    pub payload_len_bytes: Option<u64>,
    pub exception_code: Option<u8>,
    pub parse_warning: bool,
}

const MBAP_HEADER_LEN: usize = 7;
/// Minimum bytes for MBAP header plus the one-byte function code.
const MIN_WELL_FORMED: usize = MBAP_HEADER_LEN + 1;

/// Parse a TCP payload carried on the Modbus port into one or more PDUs.
///
/// Multiple MBAP-framed PDUs stacked in one segment are split into separate
/// entries sharing the segment timestamp. Malformed payloads are salvaged
/// instead of dropped: whatever is parseable is kept and the entry is marked
/// with a parse warning.
///
/// Salvage rules, in order:
/// - payload shorter than an MBAP header + function code: treated as a bare
///   PDU (first byte = function code, recorded length = raw payload length);
/// - MBAP protocol id nonzero or length field below 2: protocol fields absent,
///   recorded length = remaining raw bytes;
/// - MBAP length field pointing past the available bytes (truncated segment):
///   unit id and function code kept, recorded length = available PDU bytes.
pub(crate) fn parse_modbus_payload(payload: &[u8]) -> Vec<PduFields> {
    let mut out = Vec::new();
    let mut offset = 0usize;

    while offset < payload.len() {
        let rem = &payload[offset..];

        if rem.len() < MIN_WELL_FORMED {
            out.push(PduFields {
                function_code: Some(rem[0]),
                unit_id: None,
                payload_len_bytes: Some(rem.len() as u64),
                exception_code: None,
                parse_warning: true,
            });
            break;
        }

        let protocol_id = u16::from_be_bytes([rem[2], rem[3]]);
        let length = u16::from_be_bytes([rem[4], rem[5]]) as usize;

        if protocol_id != 0 || length < 2 {
            out.push(PduFields {
                function_code: None,
                unit_id: None,
                payload_len_bytes: Some(rem.len() as u64),
                exception_code: None,
                parse_warning: true,
            });
            break;
        }

        let declared_end = 6 + length;
        let unit_id = rem[6];
        let function_code = rem[7];
        let is_exception = function_code & 0x80 != 0;

        if declared_end > rem.len() {
            // Truncated mid-PDU; keep what the header gives us.
            let available_pdu = (rem.len() - MBAP_HEADER_LEN) as u64;
            let exception_code = if is_exception && rem.len() >= 9 {
                Some(rem[8])
            } else {
                None
            };
            out.push(PduFields {
                function_code: Some(function_code),
                unit_id: Some(unit_id),
                payload_len_bytes: Some(available_pdu),
                exception_code,
                parse_warning: true,
            });
            break;
        }

        // PDU length = function code + data, i.e. the MBAP length minus the
        // unit identifier byte.
        let pdu_len = (length - 1) as u64;
        let (exception_code, warning) = if is_exception {
            if length >= 3 {
                (Some(rem[8]), false)
            } else {
                // Exception response with no exception byte.
                (None, true)
            }
        } else {
            (Some(0), false)
        };

        out.push(PduFields {
            function_code: Some(function_code),
            unit_id: Some(unit_id),
            payload_len_bytes: Some(pdu_len),
            exception_code,
            parse_warning: warning,
        });
        offset += declared_end;
    }

    out
}

/// Build a well-formed MBAP frame around a PDU. Test and fixture helper.
pub fn build_mbap_frame(txn_id: u16, unit_id: u8, pdu: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(MBAP_HEADER_LEN + pdu.len());
    buf.extend_from_slice(&txn_id.to_be_bytes());
    buf.extend_from_slice(&0u16.to_be_bytes()); // protocol id
    buf.extend_from_slice(&((pdu.len() as u16 + 1).to_be_bytes())); // unit + pdu
    buf.push(unit_id);
    buf.extend_from_slice(pdu);
    buf
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn well_formed_read_request() {
        // Function 0x03 with a 13-byte body: PDU length 14.
        let mut pdu = vec![0x03];
        pdu.extend_from_slice(&[0u8; 13]);
        let frame = build_mbap_frame(1, 0x01, &pdu);
        let parsed = parse_modbus_payload(&frame);
        assert_eq!(parsed.len(), 1);
        let p = &parsed[0];
        assert_eq!(p.function_code, Some(3));
        assert_eq!(p.unit_id, Some(1));
        assert_eq!(p.payload_len_bytes, Some(14));
        assert_eq!(p.exception_code, Some(0));
        assert!(!p.parse_warning);
    }

    #[test]
    fn exception_response_carries_code() {
        let frame = build_mbap_frame(7, 2, &[0x83, 0x02]);
        let parsed = parse_modbus_payload(&frame);
        assert_eq!(parsed[0].function_code, Some(0x83));
        assert_eq!(parsed[0].exception_code, Some(2));
        assert!(!parsed[0].parse_warning);
    }

    #[test]
    fn one_byte_payload_salvaged_as_bare_pdu() {
        let parsed = parse_modbus_payload(&[0x03]);
        assert_eq!(parsed.len(), 1);
        let p = &parsed[0];
        assert_eq!(p.function_code, Some(3));
        assert_eq!(p.payload_len_bytes, Some(1));
        assert_eq!(p.unit_id, None);
        assert_eq!(p.exception_code, None);
        assert!(p.parse_warning);
    }

    #[test]
    fn nonzero_protocol_id_flagged() {
        let mut frame = build_mbap_frame(1, 1, &[0x03, 0x00]);
        frame[2] = 0xff;
        let parsed = parse_modbus_payload(&frame);
        assert_eq!(parsed[0].function_code, None);
        assert!(parsed[0].parse_warning);
    }

    #[test]
    fn stacked_pdus_split() {
        let mut buf = build_mbap_frame(1, 1, &[0x03, 0x00, 0x01, 0x00, 0x02]);
        buf.extend_from_slice(&build_mbap_frame(2, 1, &[0x06, 0x00, 0x05, 0x00, 0x09]));
        let parsed = parse_modbus_payload(&buf);
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].function_code, Some(3));
        assert_eq!(parsed[1].function_code, Some(6));
        assert!(parsed.iter().all(|p| !p.parse_warning));
    }

    #[test]
    fn truncated_declared_length() {
        let mut frame = build_mbap_frame(1, 1, &[0x03, 0x00, 0x01, 0x00, 0x02]);
        frame.truncate(10);
        let parsed = parse_modbus_payload(&frame);
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].function_code, Some(3));
        assert_eq!(parsed[0].unit_id, Some(1));
        assert!(parsed[0].parse_warning);
    }
}
