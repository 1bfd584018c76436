//! Codec for the MQTT 3.1.1 subset spoken by every transport in the stack.

mod packet;
mod topic;

use thiserror::Error;

pub use packet::{
    decode_packet, decode_remaining_length, encode_packet, encode_packet_into,
    encode_remaining_length, Connack, Connect, Packet, Publish, Suback, Subscribe, Unsubscribe,
    SUBACK_FAILURE, SUBACK_GRANTED_QOS0,
};
pub use topic::{topic_matches, validate_filter, FilterLevel, TopicFilter, TopicName};

/// Largest value the 4-byte remaining-length varint can carry.
pub const MAX_REMAINING_LEN: u32 = 268_435_455;
/// Frames with a larger body are rejected; sensor payloads are small.
pub const MAX_FRAME_LEN: usize = 1024 * 1024;
pub const MAX_STRING_LEN: usize = u16::MAX as usize;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("malformed packet: {0}")]
    Malformed(String),
    #[error("cannot encode packet: {0}")]
    Encode(String),
    #[error("remaining length {0} out of range")]
    RemainingLengthOutOfRange(u32),
    #[error("invalid topic name {topic:?}: {reason}")]
    InvalidTopic { topic: String, reason: &'static str },
    #[error("invalid topic filter {filter:?} at byte {position}: {reason}")]
    InvalidFilter {
        filter: String,
        position: usize,
        reason: &'static str,
    },
}
