//! MQTT 3.1.1 control packets, QoS 0 subset.
//!
//! The decoder is strict: anything outside the subset (QoS > 0, DUP, WILL,
//! credentials, session-present, non-minimal length encodings) is rejected, which
//! makes every accepted frame canonical and re-encodable byte for byte.

use bytes::{BufMut, Bytes, BytesMut};

use super::{TopicName, WireError, MAX_FRAME_LEN, MAX_REMAINING_LEN, MAX_STRING_LEN};

const PROTOCOL_NAME: &str = "MQTT";
const PROTOCOL_LEVEL: u8 = 4;

pub const SUBACK_GRANTED_QOS0: u8 = 0x00;
pub const SUBACK_FAILURE: u8 = 0x80;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connect {
    pub client_id: String,
    pub keep_alive_s: u16,
    pub clean_session: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Connack {
    pub return_code: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub topic: TopicName,
    pub payload: Bytes,
    pub retain: bool,
}

impl Publish {
    pub fn new(topic: TopicName, payload: impl Into<Bytes>) -> Self {
        Self {
            topic,
            payload: payload.into(),
            retain: false,
        }
    }
}

/// Filters are kept as raw strings so a broker can reject entries individually.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscribe {
    pub packet_id: u16,
    pub filters: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Suback {
    pub packet_id: u16,
    pub granted: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unsubscribe {
    pub packet_id: u16,
    pub filters: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect(Connect),
    Connack(Connack),
    Publish(Publish),
    Subscribe(Subscribe),
    Suback(Suback),
    Unsubscribe(Unsubscribe),
    Unsuback { packet_id: u16 },
    Pingreq,
    Pingresp,
    Disconnect,
}

impl Packet {
    pub fn kind(&self) -> &'static str {
        match self {
            Packet::Connect(_) => "CONNECT",
            Packet::Connack(_) => "CONNACK",
            Packet::Publish(_) => "PUBLISH",
            Packet::Subscribe(_) => "SUBSCRIBE",
            Packet::Suback(_) => "SUBACK",
            Packet::Unsubscribe(_) => "UNSUBSCRIBE",
            Packet::Unsuback { .. } => "UNSUBACK",
            Packet::Pingreq => "PINGREQ",
            Packet::Pingresp => "PINGRESP",
            Packet::Disconnect => "DISCONNECT",
        }
    }
}

/// 7 bits per byte, least significant group first, high bit = continuation.
pub fn encode_remaining_length(n: u32) -> Result<Vec<u8>, WireError> {
    if n > MAX_REMAINING_LEN {
        return Err(WireError::RemainingLengthOutOfRange(n));
    }
    let mut out = Vec::with_capacity(4);
    let mut value = n;
    loop {
        let mut byte = (value % 128) as u8;
        value /= 128;
        if value > 0 {
            byte |= 0x80;
        }
        out.push(byte);
        if value == 0 {
            return Ok(out);
        }
    }
}

/// Decodes the varint at the start of `buf`. `Ok(None)` means more bytes are needed.
pub fn decode_remaining_length(buf: &[u8]) -> Result<Option<(u32, usize)>, WireError> {
    let mut value: u32 = 0;
    let mut multiplier: u32 = 1;
    for (i, &byte) in buf.iter().enumerate() {
        if i == 4 {
            return Err(malformed("remaining length longer than 4 bytes"));
        }
        value += u32::from(byte & 0x7F) * multiplier;
        if byte & 0x80 == 0 {
            if i > 0 && byte == 0 {
                return Err(malformed("non-minimal remaining length encoding"));
            }
            return Ok(Some((value, i + 1)));
        }
        multiplier *= 128;
    }
    if buf.len() >= 4 {
        return Err(malformed("remaining length longer than 4 bytes"));
    }
    Ok(None)
}

fn malformed(reason: impl Into<String>) -> WireError {
    WireError::Malformed(reason.into())
}

/// Decodes one frame from the front of `buf`.
///
/// Returns `Ok(None)` when `buf` holds only a prefix of a frame; the caller should
/// read more and retry with the grown buffer.
pub fn decode_packet(buf: &[u8]) -> Result<Option<(Packet, usize)>, WireError> {
    let Some(&first) = buf.first() else {
        return Ok(None);
    };
    let packet_type = first >> 4;
    let flags = first & 0x0F;
    check_type_and_flags(packet_type, flags)?;

    let Some((remaining, len_bytes)) = decode_remaining_length(&buf[1..])? else {
        return Ok(None);
    };
    if remaining as usize > MAX_FRAME_LEN {
        return Err(malformed(format!(
            "remaining length {remaining} exceeds {MAX_FRAME_LEN}"
        )));
    }
    let header_len = 1 + len_bytes;
    let total = header_len + remaining as usize;
    if buf.len() < total {
        return Ok(None);
    }

    let mut body = Reader::new(&buf[header_len..total]);
    let packet = match packet_type {
        1 => decode_connect(&mut body)?,
        2 => {
            let ack_flags = body.u8()?;
            if ack_flags != 0 {
                return Err(malformed("session-present flag is outside the subset"));
            }
            let return_code = body.u8()?;
            if return_code > 5 {
                return Err(malformed(format!("reserved CONNACK return code {return_code}")));
            }
            Packet::Connack(Connack { return_code })
        }
        3 => {
            let topic = body.string()?;
            let topic = TopicName::new(topic)
                .map_err(|e| malformed(format!("bad PUBLISH topic: {e}")))?;
            let payload = Bytes::copy_from_slice(body.rest());
            Packet::Publish(Publish {
                topic,
                payload,
                retain: flags & 0x01 != 0,
            })
        }
        8 => {
            let packet_id = body.packet_id()?;
            let mut filters = Vec::new();
            while !body.is_empty() {
                filters.push(body.string()?.to_owned());
                let requested = body.u8()?;
                if requested != 0 {
                    return Err(malformed(format!("requested QoS {requested} unsupported")));
                }
            }
            if filters.is_empty() {
                return Err(malformed("SUBSCRIBE without filters"));
            }
            Packet::Subscribe(Subscribe { packet_id, filters })
        }
        9 => {
            let packet_id = body.packet_id()?;
            let granted = body.rest().to_vec();
            if granted.is_empty() {
                return Err(malformed("SUBACK without return codes"));
            }
            if let Some(code) = granted.iter().find(|c| !matches!(c, 0x00..=0x02 | 0x80)) {
                return Err(malformed(format!("invalid SUBACK return code {code:#04x}")));
            }
            Packet::Suback(Suback { packet_id, granted })
        }
        10 => {
            let packet_id = body.packet_id()?;
            let mut filters = Vec::new();
            while !body.is_empty() {
                filters.push(body.string()?.to_owned());
            }
            if filters.is_empty() {
                return Err(malformed("UNSUBSCRIBE without filters"));
            }
            Packet::Unsubscribe(Unsubscribe { packet_id, filters })
        }
        11 => Packet::Unsuback {
            packet_id: body.packet_id()?,
        },
        12 => Packet::Pingreq,
        13 => Packet::Pingresp,
        14 => Packet::Disconnect,
        _ => unreachable!("filtered by check_type_and_flags"),
    };
    if !body.is_empty() {
        return Err(malformed(format!(
            "{} has {} trailing bytes",
            packet.kind(),
            body.remaining()
        )));
    }
    Ok(Some((packet, total)))
}

fn check_type_and_flags(packet_type: u8, flags: u8) -> Result<(), WireError> {
    match packet_type {
        0 | 15 => Err(malformed(format!("reserved packet type {packet_type}"))),
        4..=7 => Err(malformed(format!(
            "packet type {packet_type} belongs to QoS > 0 flows"
        ))),
        3 => {
            if flags & 0x08 != 0 {
                return Err(malformed("DUP flag set"));
            }
            let qos = (flags >> 1) & 0x03;
            if qos != 0 {
                return Err(malformed(format!("QoS {qos} unsupported")));
            }
            Ok(())
        }
        8 | 10 if flags == 0x02 => Ok(()),
        8 | 10 => Err(malformed(format!(
            "fixed-header flags {flags:#06b} invalid for type {packet_type}"
        ))),
        _ if flags == 0 => Ok(()),
        _ => Err(malformed(format!(
            "fixed-header flags {flags:#06b} invalid for type {packet_type}"
        ))),
    }
}

fn decode_connect(body: &mut Reader<'_>) -> Result<Packet, WireError> {
    let protocol = body.string()?;
    if protocol != PROTOCOL_NAME {
        return Err(malformed(format!("unsupported protocol name {protocol:?}")));
    }
    let level = body.u8()?;
    if level != PROTOCOL_LEVEL {
        return Err(malformed(format!("unsupported protocol level {level}")));
    }
    let connect_flags = body.u8()?;
    if connect_flags & 0x01 != 0 {
        return Err(malformed("reserved CONNECT flag set"));
    }
    if connect_flags & 0xFC != 0 {
        return Err(malformed("WILL and credentials are outside the subset"));
    }
    let keep_alive_s = body.u16()?;
    let client_id = body.string()?.to_owned();
    Ok(Packet::Connect(Connect {
        client_id,
        keep_alive_s,
        clean_session: connect_flags & 0x02 != 0,
    }))
}

/// Encodes a packet into a new buffer.
pub fn encode_packet(packet: &Packet) -> Result<Bytes, WireError> {
    let mut out = BytesMut::new();
    encode_packet_into(packet, &mut out)?;
    Ok(out.freeze())
}

pub fn encode_packet_into(packet: &Packet, out: &mut BytesMut) -> Result<(), WireError> {
    let mut body = BytesMut::new();
    let first = match packet {
        Packet::Connect(c) => {
            put_string(&mut body, PROTOCOL_NAME)?;
            body.put_u8(PROTOCOL_LEVEL);
            body.put_u8(if c.clean_session { 0x02 } else { 0x00 });
            body.put_u16(c.keep_alive_s);
            put_string(&mut body, &c.client_id)?;
            0x10
        }
        Packet::Connack(c) => {
            if c.return_code > 5 {
                return Err(encode_err(format!("reserved return code {}", c.return_code)));
            }
            body.put_u8(0);
            body.put_u8(c.return_code);
            0x20
        }
        Packet::Publish(p) => {
            put_string(&mut body, p.topic.as_str())?;
            body.put_slice(&p.payload);
            0x30 | u8::from(p.retain)
        }
        Packet::Subscribe(s) => {
            put_packet_id(&mut body, s.packet_id)?;
            if s.filters.is_empty() {
                return Err(encode_err("SUBSCRIBE needs at least one filter"));
            }
            for filter in &s.filters {
                put_string(&mut body, filter)?;
                body.put_u8(0);
            }
            0x82
        }
        Packet::Suback(s) => {
            put_packet_id(&mut body, s.packet_id)?;
            if s.granted.is_empty() {
                return Err(encode_err("SUBACK needs at least one return code"));
            }
            if let Some(code) = s.granted.iter().find(|c| !matches!(c, 0x00..=0x02 | 0x80)) {
                return Err(encode_err(format!("invalid SUBACK return code {code:#04x}")));
            }
            body.put_slice(&s.granted);
            0x90
        }
        Packet::Unsubscribe(u) => {
            put_packet_id(&mut body, u.packet_id)?;
            if u.filters.is_empty() {
                return Err(encode_err("UNSUBSCRIBE needs at least one filter"));
            }
            for filter in &u.filters {
                put_string(&mut body, filter)?;
            }
            0xA2
        }
        Packet::Unsuback { packet_id } => {
            put_packet_id(&mut body, *packet_id)?;
            0xB0
        }
        Packet::Pingreq => 0xC0,
        Packet::Pingresp => 0xD0,
        Packet::Disconnect => 0xE0,
    };
    if body.len() > MAX_FRAME_LEN {
        return Err(encode_err(format!(
            "body of {} bytes exceeds the {MAX_FRAME_LEN}-byte frame limit",
            body.len()
        )));
    }
    out.reserve(body.len() + 5);
    out.put_u8(first);
    out.put_slice(&encode_remaining_length(body.len() as u32)?);
    out.put_slice(&body);
    Ok(())
}

fn encode_err(reason: impl Into<String>) -> WireError {
    WireError::Encode(reason.into())
}

fn put_string(out: &mut BytesMut, s: &str) -> Result<(), WireError> {
    if s.len() > MAX_STRING_LEN {
        return Err(encode_err(format!("string of {} bytes too long", s.len())));
    }
    if s.contains('\0') {
        return Err(encode_err("NUL in string"));
    }
    out.put_u16(s.len() as u16);
    out.put_slice(s.as_bytes());
    Ok(())
}

fn put_packet_id(out: &mut BytesMut, id: u16) -> Result<(), WireError> {
    if id == 0 {
        return Err(encode_err("packet identifier must be non-zero"));
    }
    out.put_u16(id);
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(malformed("frame body truncated"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn packet_id(&mut self) -> Result<u16, WireError> {
        match self.u16()? {
            0 => Err(malformed("packet identifier is zero")),
            id => Ok(id),
        }
    }

    fn string(&mut self) -> Result<&'a str, WireError> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        let s = std::str::from_utf8(bytes).map_err(|_| malformed("invalid UTF-8 string"))?;
        if s.contains('\0') {
            return Err(malformed("NUL in string"));
        }
        Ok(s)
    }

    fn rest(&mut self) -> &'a [u8] {
        let out = &self.buf[self.pos..];
        self.pos = self.buf.len();
        out
    }
}
