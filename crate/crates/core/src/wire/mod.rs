//! Byte-exact message encodings, transports, and bandwidth accounting.
//!
//! Frame layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MPFL"
//! 4       1     version (1)
//! 5       1     tag: low nibble = message kind, bit 7 = delta/sparse body
//! 6       4     round (u32)
//! 10      4     payload length (u32)
//! 14      n     payload: [node id u32 for uploads] + body
//! ```
//!
//! Mask bodies pack each layer 8 groups per byte, least-significant bit
//! first, zero-padding the layer's final byte; layers follow in
//! architecture order. Weight bodies are the dense layers in order, each as
//! row-major weights followed by biases, at the session's wire precision.

pub mod bits;
mod codec;
mod frame;
pub mod fuzz;
mod ledger;
mod transport;

pub use codec::{decode_mask, decode_weights, encode_mask, encode_weights, MaskBody, WeightsBody};
pub use frame::{
    decode_frame, encode_frame, read_frame_bytes, Frame, MessageKind, RoundMessage, HEADER_LEN, MAGIC, MAX_PAYLOAD,
    VERSION,
};
pub use ledger::{BandwidthLedger, Direction, Traffic};
pub use transport::{Channel, Link, LoopbackTransport, TcpTransport, Transport};
