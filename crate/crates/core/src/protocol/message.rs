//! Wire messages exchanged between neighbors. Every message is tagged with
//! the sender's shared key.

use std::sync::Arc;

use crate::code_image::{
    AppId, Certificate, Digest, KeyedHasher, SecretKey, StreamChunk, StreamHead, Version,
};
use crate::topology::DeviceId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Hello,
    Req,
    Warn,
    ChunkFirst,
    ChunkAck,
    ChunkRest,
    Done,
    CorrectedAnnounce,
    UpdateAnnounce,
}

/// Code request: `⟨ttl, q, |N|, z, b, Π⟩`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Request {
    pub ttl: u32,
    /// Requester's sequence number; equal to the envelope sequence number.
    pub q: u64,
    pub degree: u32,
    pub version: Version,
    pub app: AppId,
    pub pi: Arc<[u32]>,
}

/// Certified description of the image a responder is about to stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Offer {
    pub app: AppId,
    pub version: Version,
    pub version_cert: Certificate,
    pub head: StreamHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Announcement {
    pub app: AppId,
    pub version: Version,
    pub cert: Certificate,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Payload {
    Hello { public: Digest, cert: Certificate },
    Req(Request),
    Warn { ttl: u32, origin: DeviceId, origin_seq: u64 },
    ChunkFirst { req_seq: u64, offer: Offer, chunk: StreamChunk },
    ChunkAck { req_seq: u64 },
    ChunkRest { req_seq: u64, chunks: Vec<StreamChunk> },
    Done { req_seq: u64 },
    CorrectedAnnounce(Announcement),
    UpdateAnnounce(Announcement),
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::Hello { .. } => MessageKind::Hello,
            Payload::Req(_) => MessageKind::Req,
            Payload::Warn { .. } => MessageKind::Warn,
            Payload::ChunkFirst { .. } => MessageKind::ChunkFirst,
            Payload::ChunkAck { .. } => MessageKind::ChunkAck,
            Payload::ChunkRest { .. } => MessageKind::ChunkRest,
            Payload::Done { .. } => MessageKind::Done,
            Payload::CorrectedAnnounce(_) => MessageKind::CorrectedAnnounce,
            Payload::UpdateAnnounce(_) => MessageKind::UpdateAnnounce,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub sender: DeviceId,
    pub seq: u64,
    pub payload: Payload,
    pub tag: Digest,
}

impl Message {
    pub fn sign(sender: DeviceId, seq: u64, payload: Payload, key: &SecretKey) -> Self {
        let tag = KeyedHasher::new(key).digest_parts([&encode(sender, seq, &payload)[..]]);
        Message { sender, seq, payload, tag }
    }

    pub fn verify(&self, key: &SecretKey) -> bool {
        KeyedHasher::new(key).digest_parts([&encode(self.sender, self.seq, &self.payload)[..]]) == self.tag
    }

    pub fn kind(&self) -> MessageKind {
        self.payload.kind()
    }
}

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn digest(&mut self, d: &Digest) {
        self.0.extend_from_slice(&d.0);
    }
    fn cert(&mut self, c: &Certificate) {
        self.digest(&c.payload_digest);
        self.u32(c.signer);
        self.digest(&c.tag);
    }
    fn chunk(&mut self, c: &StreamChunk) {
        self.u64(c.index as u64);
        self.u32(c.bytes.len() as u32);
        self.0.extend_from_slice(&c.bytes);
        match &c.link {
            Some(d) => {
                self.u8(1);
                self.digest(d);
            }
            None => self.u8(0),
        }
    }
}

/// Canonical byte layout covered by the authenticity tag.
pub fn encode(sender: DeviceId, seq: u64, payload: &Payload) -> Vec<u8> {
    let mut e = Enc(Vec::with_capacity(64));
    e.u32(sender.0);
    e.u64(seq);
    e.u8(payload.kind() as u8);
    match payload {
        Payload::Hello { public, cert } => {
            e.digest(public);
            e.cert(cert);
        }
        Payload::Req(r) => {
            e.u32(r.ttl);
            e.u64(r.q);
            e.u32(r.degree);
            e.u32(r.version);
            e.u32(r.app);
            e.u32(r.pi.len() as u32);
            for &i in r.pi.iter() {
                e.u32(i);
            }
        }
        Payload::Warn { ttl, origin, origin_seq } => {
            e.u32(*ttl);
            e.u32(origin.0);
            e.u64(*origin_seq);
        }
        Payload::ChunkFirst { req_seq, offer, chunk } => {
            e.u64(*req_seq);
            e.u32(offer.app);
            e.u32(offer.version);
            e.cert(&offer.version_cert);
            e.u64(offer.head.chunk_count as u64);
            e.cert(&offer.head.signature);
            e.chunk(chunk);
        }
        Payload::ChunkAck { req_seq } | Payload::Done { req_seq } => e.u64(*req_seq),
        Payload::ChunkRest { req_seq, chunks } => {
            e.u64(*req_seq);
            e.u32(chunks.len() as u32);
            for c in chunks {
                e.chunk(c);
            }
        }
        Payload::CorrectedAnnounce(a) | Payload::UpdateAnnounce(a) => {
            e.u32(a.app);
            e.u32(a.version);
            e.cert(&a.cert);
        }
    }
    e.0
}

/// Sliding replay window over a sender's sequence numbers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReplayWindow {
    highest: u64,
    seen: u64,
}

impl ReplayWindow {
    pub const WIDTH: u64 = 64;

    /// Window that accepts anything newer than `last_seen`.
    pub fn new(last_seen: u64) -> Self {
        ReplayWindow { highest: last_seen, seen: 1 }
    }

    pub fn highest(&self) -> u64 {
        self.highest
    }

    /// Records `seq`, returning false for duplicates and for sequence
    /// numbers that fell out of the window.
    pub fn accept(&mut self, seq: u64) -> bool {
        if seq > self.highest {
            let shift = seq - self.highest;
            self.seen = if shift >= Self::WIDTH { 0 } else { self.seen << shift };
            self.seen |= 1;
            self.highest = seq;
            return true;
        }
        let back = self.highest - seq;
        if back >= Self::WIDTH {
            return false;
        }
        let bit = 1u64 << back;
        if self.seen & bit != 0 {
            return false;
        }
        self.seen |= bit;
        true
    }
}
