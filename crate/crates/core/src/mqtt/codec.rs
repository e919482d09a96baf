//! MQTT 3.1.1 control packet encoding and incremental decoding.
//!
//! Supported subset: CONNECT, CONNACK, PUBLISH (QoS 0/1), PUBACK, SUBSCRIBE,
//! SUBACK, UNSUBSCRIBE, UNSUBACK, PINGREQ, PINGRESP, DISCONNECT. Will,
//! username and password fields on an incoming CONNECT are parsed and
//! discarded.

use bytes::{BufMut, Bytes, BytesMut};
use thiserror::Error;

/// Largest value the four-byte Remaining Length varint can carry.
pub const MAX_REMAINING_LENGTH: usize = 268_435_455;

const PROTOCOL_NAME: &str = "MQTT";
const PROTOCOL_LEVEL: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QoS {
    AtMostOnce = 0,
    AtLeastOnce = 1,
}

impl QoS {
    pub fn from_u8(v: u8) -> Option<QoS> {
        match v {
            0 => Some(QoS::AtMostOnce),
            1 => Some(QoS::AtLeastOnce),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectReturnCode {
    Accepted = 0,
    UnacceptableProtocol = 1,
    IdentifierRejected = 2,
    ServerUnavailable = 3,
    BadCredentials = 4,
    NotAuthorized = 5,
}

impl ConnectReturnCode {
    fn from_u8(v: u8) -> Option<Self> {
        use ConnectReturnCode::*;
        Some(match v {
            0 => Accepted,
            1 => UnacceptableProtocol,
            2 => IdentifierRejected,
            3 => ServerUnavailable,
            4 => BadCredentials,
            5 => NotAuthorized,
            _ => return None,
        })
    }
}

/// Per-filter result in a SUBACK.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubAckCode {
    Granted(QoS),
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub topic: String,
    pub payload: Bytes,
    pub qos: QoS,
    pub packet_id: Option<u16>,
    pub dup: bool,
    pub retain: bool,
}

impl Publish {
    pub fn qos0(topic: impl Into<String>, payload: impl Into<Bytes>) -> Self {
        Publish {
            topic: topic.into(),
            payload: payload.into(),
            qos: QoS::AtMostOnce,
            packet_id: None,
            dup: false,
            retain: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect {
        client_id: String,
        keep_alive_s: u16,
        clean_session: bool,
    },
    ConnAck {
        session_present: bool,
        return_code: ConnectReturnCode,
    },
    Publish(Publish),
    PubAck {
        packet_id: u16,
    },
    Subscribe {
        packet_id: u16,
        filters: Vec<(String, QoS)>,
    },
    SubAck {
        packet_id: u16,
        return_codes: Vec<SubAckCode>,
    },
    Unsubscribe {
        packet_id: u16,
        filters: Vec<String>,
    },
    UnsubAck {
        packet_id: u16,
    },
    PingReq,
    PingResp,
    Disconnect,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("remaining length {0} exceeds {MAX_REMAINING_LENGTH}")]
    PacketTooLarge(usize),
    #[error("string of {0} bytes exceeds 65535")]
    StringTooLong(usize),
    #[error("invalid packet: {0}")]
    Invalid(&'static str),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("remaining length uses more than four bytes")]
    MalformedRemainingLength,
    #[error("reserved packet type {0}")]
    ReservedPacketType(u8),
    #[error("packet type {0} is not supported")]
    UnsupportedPacketType(u8),
    #[error("invalid fixed header flags {flags:#06b} for packet type {packet_type}")]
    InvalidFlags { packet_type: u8, flags: u8 },
    #[error("invalid QoS bits {0}")]
    InvalidQos(u8),
    #[error("QoS 2 is not supported")]
    UnsupportedQos,
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
    #[error("string is not valid UTF-8")]
    InvalidUtf8,
    #[error("packet of {0} bytes exceeds the configured limit")]
    PacketTooLarge(usize),
}

/// Outcome of feeding a buffer to [`decode`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    /// A complete packet and the number of bytes it occupied.
    Packet(Packet, usize),
    /// The buffer holds a valid prefix; nothing was consumed.
    NeedMoreBytes,
}

/// Encodes a Remaining Length varint.
pub fn encode_remaining_length(mut len: usize, out: &mut BytesMut) -> Result<(), EncodeError> {
    if len > MAX_REMAINING_LENGTH {
        return Err(EncodeError::PacketTooLarge(len));
    }
    loop {
        let mut byte = (len % 128) as u8;
        len /= 128;
        if len > 0 {
            byte |= 0x80;
        }
        out.put_u8(byte);
        if len == 0 {
            return Ok(());
        }
    }
}

/// Decodes a Remaining Length varint from the start of `buf`. Returns the
/// value and the number of bytes it occupied, or `None` when more bytes are
/// needed.
pub fn decode_remaining_length(buf: &[u8]) -> Result<Option<(usize, usize)>, DecodeError> {
    let mut value = 0usize;
    let mut multiplier = 1usize;
    for i in 0..4 {
        let Some(&byte) = buf.get(i) else {
            return Ok(None);
        };
        value += (byte & 0x7F) as usize * multiplier;
        if byte & 0x80 == 0 {
            return Ok(Some((value, i + 1)));
        }
        multiplier *= 128;
    }
    Err(DecodeError::MalformedRemainingLength)
}

fn put_string(out: &mut BytesMut, s: &str) -> Result<(), EncodeError> {
    put_binary(out, s.as_bytes())
}

fn put_binary(out: &mut BytesMut, b: &[u8]) -> Result<(), EncodeError> {
    if b.len() > u16::MAX as usize {
        return Err(EncodeError::StringTooLong(b.len()));
    }
    out.put_u16(b.len() as u16);
    out.put_slice(b);
    Ok(())
}

fn has_wildcard(topic: &str) -> bool {
    topic.contains(['+', '#'])
}

pub fn encode(packet: &Packet) -> Result<Bytes, EncodeError> {
    let mut out = BytesMut::new();
    encode_into(packet, &mut out)?;
    Ok(out.freeze())
}

pub fn encode_into(packet: &Packet, out: &mut BytesMut) -> Result<(), EncodeError> {
    let mut body = BytesMut::new();
    let header: u8 = match packet {
        Packet::Connect {
            client_id,
            keep_alive_s,
            clean_session,
        } => {
            put_string(&mut body, PROTOCOL_NAME)?;
            body.put_u8(PROTOCOL_LEVEL);
            body.put_u8(if *clean_session { 0x02 } else { 0x00 });
            body.put_u16(*keep_alive_s);
            put_string(&mut body, client_id)?;
            0x10
        }
        Packet::ConnAck {
            session_present,
            return_code,
        } => {
            body.put_u8(*session_present as u8);
            body.put_u8(*return_code as u8);
            0x20
        }
        Packet::Publish(p) => {
            if p.topic.is_empty() || has_wildcard(&p.topic) {
                return Err(EncodeError::Invalid(
                    "publish topic must be non-empty without wildcards",
                ));
            }
            put_string(&mut body, &p.topic)?;
            match (p.qos, p.packet_id) {
                (QoS::AtMostOnce, None) => {}
                (QoS::AtLeastOnce, Some(id)) if id != 0 => body.put_u16(id),
                _ => {
                    return Err(EncodeError::Invalid(
                        "packet id must be present and non-zero iff qos > 0",
                    ))
                }
            }
            if p.qos == QoS::AtMostOnce && p.dup {
                return Err(EncodeError::Invalid("dup must be 0 for qos 0"));
            }
            body.put_slice(&p.payload);
            0x30 | ((p.dup as u8) << 3) | ((p.qos as u8) << 1) | p.retain as u8
        }
        Packet::PubAck { packet_id } => {
            body.put_u16(*packet_id);
            0x40
        }
        Packet::Subscribe { packet_id, filters } => {
            if filters.is_empty() {
                return Err(EncodeError::Invalid("subscribe needs at least one filter"));
            }
            body.put_u16(*packet_id);
            for (filter, qos) in filters {
                put_string(&mut body, filter)?;
                body.put_u8(*qos as u8);
            }
            0x82
        }
        Packet::SubAck {
            packet_id,
            return_codes,
        } => {
            body.put_u16(*packet_id);
            for code in return_codes {
                body.put_u8(match code {
                    SubAckCode::Granted(q) => *q as u8,
                    SubAckCode::Failure => 0x80,
                });
            }
            0x90
        }
        Packet::Unsubscribe { packet_id, filters } => {
            if filters.is_empty() {
                return Err(EncodeError::Invalid(
                    "unsubscribe needs at least one filter",
                ));
            }
            body.put_u16(*packet_id);
            for filter in filters {
                put_string(&mut body, filter)?;
            }
            0xA2
        }
        Packet::UnsubAck { packet_id } => {
            body.put_u16(*packet_id);
            0xB0
        }
        Packet::PingReq => 0xC0,
        Packet::PingResp => 0xD0,
        Packet::Disconnect => 0xE0,
    };
    out.reserve(body.len() + 5);
    out.put_u8(header);
    encode_remaining_length(body.len(), out)?;
    out.put_slice(&body);
    Ok(())
}

/// Decodes one packet from the front of `buf`.
pub fn decode(buf: &[u8]) -> Result<Decoded, DecodeError> {
    decode_limited(buf, MAX_REMAINING_LENGTH)
}

/// Like [`decode`], rejecting packets whose Remaining Length exceeds
/// `max_remaining` as soon as the header is readable.
pub fn decode_limited(buf: &[u8], max_remaining: usize) -> Result<Decoded, DecodeError> {
    let Some(&first) = buf.first() else {
        return Ok(Decoded::NeedMoreBytes);
    };
    let packet_type = first >> 4;
    let flags = first & 0x0F;
    check_flags(packet_type, flags)?;

    let Some((remaining, len_bytes)) = decode_remaining_length(&buf[1..])? else {
        return Ok(Decoded::NeedMoreBytes);
    };
    if remaining > max_remaining {
        return Err(DecodeError::PacketTooLarge(remaining));
    }
    let start = 1 + len_bytes;
    let total = start + remaining;
    if buf.len() < total {
        return Ok(Decoded::NeedMoreBytes);
    }
    let mut r = Reader::new(&buf[start..total]);
    let packet = decode_body(packet_type, flags, &mut r)?;
    if !r.is_empty() {
        return Err(DecodeError::Malformed("trailing bytes after packet body"));
    }
    Ok(Decoded::Packet(packet, total))
}

fn check_flags(packet_type: u8, flags: u8) -> Result<(), DecodeError> {
    let expected = match packet_type {
        0 | 15 => return Err(DecodeError::ReservedPacketType(packet_type)),
        3 => {
            let qos = (flags >> 1) & 0x03;
            return match qos {
                0 | 1 => Ok(()),
                2 => Err(DecodeError::UnsupportedQos),
                _ => Err(DecodeError::InvalidQos(qos)),
            };
        }
        5..=7 => return Err(DecodeError::UnsupportedPacketType(packet_type)),
        8 | 10 => 0x02,
        _ => 0x00,
    };
    if flags != expected {
        return Err(DecodeError::InvalidFlags { packet_type, flags });
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn rest(&mut self) -> &'a [u8] {
        let rest = &self.buf[self.pos..];
        self.pos = self.buf.len();
        rest
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        let b = *self
            .buf
            .get(self.pos)
            .ok_or(DecodeError::Malformed("body shorter than declared fields"))?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_be_bytes([self.u8()?, self.u8()?]))
    }

    fn binary(&mut self) -> Result<&'a [u8], DecodeError> {
        let len = self.u16()? as usize;
        let end = self.pos + len;
        if end > self.buf.len() {
            return Err(DecodeError::Malformed(
                "length-prefixed field overruns body",
            ));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn string(&mut self) -> Result<String, DecodeError> {
        let b = self.binary()?;
        let s = std::str::from_utf8(b).map_err(|_| DecodeError::InvalidUtf8)?;
        if s.contains('\0') {
            return Err(DecodeError::Malformed("null character in string"));
        }
        Ok(s.to_owned())
    }

    fn packet_id(&mut self) -> Result<u16, DecodeError> {
        match self.u16()? {
            0 => Err(DecodeError::Malformed("packet id 0")),
            id => Ok(id),
        }
    }
}

fn decode_body(packet_type: u8, flags: u8, r: &mut Reader<'_>) -> Result<Packet, DecodeError> {
    Ok(match packet_type {
        1 => {
            if r.string()? != PROTOCOL_NAME {
                return Err(DecodeError::Malformed("protocol name"));
            }
            if r.u8()? != PROTOCOL_LEVEL {
                return Err(DecodeError::Malformed("protocol level"));
            }
            let connect_flags = r.u8()?;
            if connect_flags & 0x01 != 0 {
                return Err(DecodeError::Malformed("reserved connect flag set"));
            }
            let keep_alive_s = r.u16()?;
            let client_id = r.string()?;
            if connect_flags & 0x04 != 0 {
                r.string()?;
                r.binary()?;
            }
            if connect_flags & 0x80 != 0 {
                r.string()?;
            }
            if connect_flags & 0x40 != 0 {
                r.binary()?;
            }
            Packet::Connect {
                client_id,
                keep_alive_s,
                clean_session: connect_flags & 0x02 != 0,
            }
        }
        2 => {
            let ack_flags = r.u8()?;
            if ack_flags & 0xFE != 0 {
                return Err(DecodeError::Malformed("reserved connack flags"));
            }
            let code = r.u8()?;
            Packet::ConnAck {
                session_present: ack_flags & 0x01 != 0,
                return_code: ConnectReturnCode::from_u8(code)
                    .ok_or(DecodeError::Malformed("connack return code"))?,
            }
        }
        3 => {
            let qos = QoS::from_u8((flags >> 1) & 0x03).ok_or(DecodeError::UnsupportedQos)?;
            let dup = flags & 0x08 != 0;
            if qos == QoS::AtMostOnce && dup {
                return Err(DecodeError::Malformed("dup set on qos 0 publish"));
            }
            let topic = r.string()?;
            if topic.is_empty() || has_wildcard(&topic) {
                return Err(DecodeError::Malformed("publish topic"));
            }
            let packet_id = match qos {
                QoS::AtMostOnce => None,
                QoS::AtLeastOnce => Some(r.packet_id()?),
            };
            Packet::Publish(Publish {
                topic,
                payload: Bytes::copy_from_slice(r.rest()),
                qos,
                packet_id,
                dup,
                retain: flags & 0x01 != 0,
            })
        }
        4 => Packet::PubAck {
            packet_id: r.packet_id()?,
        },
        8 => {
            let packet_id = r.packet_id()?;
            let mut filters = Vec::new();
            while !r.is_empty() {
                let filter = r.string()?;
                let requested = r.u8()?;
                // QoS 2 requests are downgraded to the highest supported level.
                let qos = match requested {
                    0 => QoS::AtMostOnce,
                    1 | 2 => QoS::AtLeastOnce,
                    _ => return Err(DecodeError::InvalidQos(requested)),
                };
                filters.push((filter, qos));
            }
            if filters.is_empty() {
                return Err(DecodeError::Malformed("subscribe without filters"));
            }
            Packet::Subscribe { packet_id, filters }
        }
        9 => {
            let packet_id = r.packet_id()?;
            let mut return_codes = Vec::new();
            while !r.is_empty() {
                return_codes.push(match r.u8()? {
                    0 => SubAckCode::Granted(QoS::AtMostOnce),
                    1 => SubAckCode::Granted(QoS::AtLeastOnce),
                    0x80 => SubAckCode::Failure,
                    2 => return Err(DecodeError::UnsupportedQos),
                    _ => return Err(DecodeError::Malformed("suback return code")),
                });
            }
            Packet::SubAck {
                packet_id,
                return_codes,
            }
        }
        10 => {
            let packet_id = r.packet_id()?;
            let mut filters = Vec::new();
            while !r.is_empty() {
                filters.push(r.string()?);
            }
            if filters.is_empty() {
                return Err(DecodeError::Malformed("unsubscribe without filters"));
            }
            Packet::Unsubscribe { packet_id, filters }
        }
        11 => Packet::UnsubAck {
            packet_id: r.packet_id()?,
        },
        12 => Packet::PingReq,
        13 => Packet::PingResp,
        14 => Packet::Disconnect,
        other => return Err(DecodeError::ReservedPacketType(other)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn varint(n: usize) -> Vec<u8> {
        let mut b = BytesMut::new();
        encode_remaining_length(n, &mut b).unwrap();
        b.to_vec()
    }

    #[test]
    fn pingreq_bytes() {
        assert_eq!(&encode(&Packet::PingReq).unwrap()[..], &[0xC0, 0x00]);
        assert_eq!(&encode(&Packet::Disconnect).unwrap()[..], &[0xE0, 0x00]);
    }

    #[test]
    fn remaining_length_boundaries() {
        assert_eq!(varint(0), vec![0x00]);
        assert_eq!(varint(127), vec![0x7F]);
        assert_eq!(varint(128), vec![0x80, 0x01]);
        assert_eq!(varint(16_383), vec![0xFF, 0x7F]);
        assert_eq!(varint(16_384), vec![0x80, 0x80, 0x01]);
        assert_eq!(varint(MAX_REMAINING_LENGTH), vec![0xFF, 0xFF, 0xFF, 0x7F]);
        let mut b = BytesMut::new();
        assert_eq!(
            encode_remaining_length(MAX_REMAINING_LENGTH + 1, &mut b),
            Err(EncodeError::PacketTooLarge(MAX_REMAINING_LENGTH + 1))
        );
        for n in [0, 127, 128, 16_383, 16_384, 2_097_151, 2_097_152] {
            let v = varint(n);
            assert_eq!(decode_remaining_length(&v).unwrap(), Some((n, v.len())));
        }
    }

    #[test]
    fn truncated_input_needs_more() {
        assert_eq!(decode(&[]).unwrap(), Decoded::NeedMoreBytes);
        assert_eq!(decode(&[0xC0]).unwrap(), Decoded::NeedMoreBytes);
        assert_eq!(decode(&[0x30, 0x80]).unwrap(), Decoded::NeedMoreBytes);
        let full = encode(&Packet::Publish(Publish::qos0("a/b", &b"hello"[..]))).unwrap();
        for cut in 0..full.len() {
            assert_eq!(
                decode(&full[..cut]).unwrap(),
                Decoded::NeedMoreBytes,
                "cut {cut}"
            );
        }
    }

    #[test]
    fn five_byte_remaining_length_is_malformed() {
        assert_eq!(
            decode(&[0x30, 0x80, 0x80, 0x80, 0x80, 0x80]),
            Err(DecodeError::MalformedRemainingLength)
        );
    }

    #[test]
    fn header_errors() {
        assert_eq!(
            decode(&[0x00, 0x00]),
            Err(DecodeError::ReservedPacketType(0))
        );
        assert_eq!(
            decode(&[0xF0, 0x00]),
            Err(DecodeError::ReservedPacketType(15))
        );
        assert_eq!(decode(&[0x36, 0x00]), Err(DecodeError::InvalidQos(3)));
        assert_eq!(decode(&[0x34, 0x00]), Err(DecodeError::UnsupportedQos));
        assert!(matches!(
            decode(&[0x80, 0x00]),
            Err(DecodeError::InvalidFlags { .. })
        ));
        assert!(matches!(
            decode(&[0xC1, 0x00]),
            Err(DecodeError::InvalidFlags { .. })
        ));
        assert_eq!(
            decode(&[0x50, 0x02, 0, 1]),
            Err(DecodeError::UnsupportedPacketType(5))
        );
        assert!(matches!(
            decode(&[0xC0, 0x01, 0x00]),
            Err(DecodeError::Malformed(_))
        ));
    }

    #[test]
    fn consumed_count_allows_streaming() {
        let mut buf = BytesMut::new();
        encode_into(&Packet::PingReq, &mut buf).unwrap();
        encode_into(&Packet::PubAck { packet_id: 7 }, &mut buf).unwrap();
        let Decoded::Packet(p, n) = decode(&buf).unwrap() else {
            panic!()
        };
        assert_eq!((p, n), (Packet::PingReq, 2));
        let Decoded::Packet(p, n) = decode(&buf[2..]).unwrap() else {
            panic!()
        };
        assert_eq!((p, n), (Packet::PubAck { packet_id: 7 }, 4));
    }

    #[test]
    fn publish_invariants_checked_on_encode() {
        let mut p = Publish::qos0("a", Bytes::new());
        p.qos = QoS::AtLeastOnce;
        assert!(encode(&Packet::Publish(p.clone())).is_err());
        p.packet_id = Some(0);
        assert!(encode(&Packet::Publish(p.clone())).is_err());
        p.packet_id = Some(9);
        assert!(encode(&Packet::Publish(p.clone())).is_ok());
        p.topic = "a/+".into();
        assert!(encode(&Packet::Publish(p)).is_err());
    }

    #[test]
    fn connect_with_credentials_is_accepted() {
        // CONNECT, clean session + username + password, client id "c".
        let mut body = BytesMut::new();
        put_string(&mut body, "MQTT").unwrap();
        body.put_u8(4);
        body.put_u8(0xC2);
        body.put_u16(30);
        put_string(&mut body, "c").unwrap();
        put_string(&mut body, "user").unwrap();
        put_binary(&mut body, b"pw").unwrap();
        let mut bytes = BytesMut::new();
        bytes.put_u8(0x10);
        encode_remaining_length(body.len(), &mut bytes).unwrap();
        bytes.put_slice(&body);
        let Decoded::Packet(p, _) = decode(&bytes).unwrap() else {
            panic!()
        };
        assert_eq!(
            p,
            Packet::Connect {
                client_id: "c".into(),
                keep_alive_s: 30,
                clean_session: true
            }
        );
    }

    #[test]
    fn limit_rejects_oversized_header() {
        assert_eq!(
            decode_limited(&[0x30, 0xFF, 0x7F], 1024),
            Err(DecodeError::PacketTooLarge(16_383))
        );
    }
}
