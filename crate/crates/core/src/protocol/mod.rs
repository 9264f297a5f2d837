//! Per-device self-healing state machine.
//!
//! A device periodically attests its code. On a mismatch it disables the code,
//! localizes the tampered chunks and asks its neighbors for them. Neighbors
//! answer after a version-prioritized random backoff, and chunks travel as a
//! hash-chained stream so that bogus data is rejected on arrival.
//!
//! The state machine is pure: handlers return [`Action`]s and the caller (the
//! simulation engine) performs delivery and timer scheduling.

mod device;
mod message;

use rand::Rng;
use thiserror::Error;

pub use device::{rendezvous, Ctx, DeviceState, Identity};
pub use message::{
    encode, Announcement, Message, MessageKind, Offer, Payload, ReplayWindow, Request,
};

use crate::code_image::Version;
use crate::topology::DeviceId;
use std::sync::Arc;

pub const DEFAULT_LAMBDA_MAX: f64 = 1.0 / 100.0;
pub const DEFAULT_LAMBDA_MIN: f64 = 1.0 / 400.0;
pub const DEFAULT_THRESHOLD_CAP: f64 = 50.0;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("identity certificate of {0} does not verify")]
    BadIdentity(DeviceId),
    #[error("invalid protocol parameter {0}")]
    InvalidParam(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Status {
    Honest,
    Corrupt,
    Blank,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolParams {
    /// Self-check rate every device starts with.
    pub lambda_init: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Warning radius carried by broadcast requests.
    pub ttl: u32,
    /// Assumed maximum version gap.
    pub delta_cap: u32,
    /// Backoff slot width in seconds.
    pub theta: f64,
    pub ack_timeout: f64,
    /// Upper bound on the self-check interval, if any.
    pub selfcheck_cap: Option<f64>,
    /// Corrupt devices answer requests with bogus streams.
    pub bogus_responders: bool,
    pub bloom_keys: usize,
    /// Filter bits per chunk.
    pub bloom_mu: usize,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            lambda_init: DEFAULT_LAMBDA_MAX,
            lambda_min: DEFAULT_LAMBDA_MIN,
            lambda_max: DEFAULT_LAMBDA_MAX,
            ttl: 1,
            delta_cap: 1,
            theta: 1.0,
            ack_timeout: 0.5,
            selfcheck_cap: None,
            bogus_responders: false,
            bloom_keys: crate::bloom::DEFAULT_NUM_KEYS,
            bloom_mu: crate::bloom::DEFAULT_MU,
        }
    }
}

impl ProtocolParams {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.lambda_min) || !pos(self.lambda_max) || self.lambda_min > self.lambda_max {
            return Err(ProtocolError::InvalidParam("lambda_min/lambda_max"));
        }
        if !(self.lambda_min..=self.lambda_max).contains(&self.lambda_init) {
            return Err(ProtocolError::InvalidParam("lambda"));
        }
        if !pos(self.theta) {
            return Err(ProtocolError::InvalidParam("theta"));
        }
        if !pos(self.ack_timeout) || self.ack_timeout >= self.theta {
            return Err(ProtocolError::InvalidParam("ack_timeout"));
        }
        if self.selfcheck_cap.is_some_and(|c| !pos(c)) {
            return Err(ProtocolError::InvalidParam("threshold_selfcheck"));
        }
        if self.bloom_keys == 0 || self.bloom_mu == 0 {
            return Err(ProtocolError::InvalidParam("bloom"));
        }
        Ok(())
    }
}

/// Timers a device asks its host to arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Timer {
    SelfCheck { token: u64 },
    Backoff { requester: DeviceId, req_seq: u64 },
    AckTimeout { requester: DeviceId, req_seq: u64 },
    RequestTimeout { token: u64 },
    Rerequest { token: u64 },
}

/// Side effects requested by a handler.
#[derive(Clone, Debug)]
pub enum Action {
    Broadcast(Arc<Message>),
    Unicast { to: DeviceId, msg: Arc<Message> },
    SetTimer { delay: f64, timer: Timer },
    /// A `ChunkFirst` went out in answer to this request.
    Transmitted { requester: DeviceId, req_seq: u64 },
    /// Chunk `index` of `version` was written to the code region.
    Installed { version: Version, index: usize },
    StatusChanged { from: Status, to: Status },
    /// A chunk from `sender` failed verification.
    Rejected { sender: DeviceId },
}

/// Rate after a clean self-check: the expected wait grows by one second.
pub fn relaxed_rate(lambda: f64, lambda_min: f64) -> f64 {
    (lambda / (lambda + 1.0)).max(lambda_min)
}

/// Rate after a warning with the given ttl.
pub fn warned_rate(lambda: f64, ttl: u32, lambda_max: f64) -> f64 {
    if ttl > 0 {
        (2.0 * lambda).min(lambda_max)
    } else {
        lambda
    }
}

/// Backoff before answering a request, or `None` if the local version is
/// older than the requester's:
/// `max(Δ - (z_local - z_req), 0)·|N|·θ + ⌊U·|N|⌋·θ`.
pub fn compute_backoff<R: Rng + ?Sized>(
    delta_cap: u32,
    theta: f64,
    requester_degree: u32,
    z_local: Version,
    z_request: Version,
    rng: &mut R,
) -> Option<f64> {
    if z_local < z_request {
        return None;
    }
    let n = requester_degree.max(1) as u64;
    let epoch = (delta_cap as u64).saturating_sub((z_local - z_request) as u64);
    let slot = ((rng.gen::<f64>() * n as f64) as u64).min(n - 1);
    Some((epoch * n + slot) as f64 * theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rate_updates() {
        assert!((relaxed_rate(1.0 / 100.0, 1.0 / 400.0) - 1.0 / 101.0).abs() < 1e-15);
        assert_eq!(relaxed_rate(1.0 / 400.0, 1.0 / 400.0), 1.0 / 400.0);
        assert!((warned_rate(1.0 / 400.0, 1, 0.01) - 1.0 / 200.0).abs() < 1e-15);
        assert_eq!(warned_rate(1.0 / 150.0, 4, 0.01), 0.01);
        assert_eq!(warned_rate(1.0 / 150.0, 0, 0.01), 1.0 / 150.0);
    }

    #[test]
    fn backoff_epochs() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut newer = std::collections::BTreeSet::new();
        let mut same = std::collections::BTreeSet::new();
        for _ in 0..400 {
            newer.insert(compute_backoff(1, 1.0, 4, 3, 2, &mut r).unwrap() as u32);
            same.insert(compute_backoff(1, 1.0, 4, 2, 2, &mut r).unwrap() as u32);
            let far = compute_backoff(1, 1.0, 4, 9, 2, &mut r).unwrap();
            assert!(far < 4.0);
        }
        assert_eq!(newer, [0, 1, 2, 3].into());
        assert_eq!(same, [4, 5, 6, 7].into());
        assert_eq!(compute_backoff(1, 1.0, 4, 1, 2, &mut r), None);
    }

    #[test]
    fn default_params_validate() {
        ProtocolParams::default().validate().unwrap();
        let bad = ProtocolParams { ack_timeout: 2.0, ..Default::default() };
        assert_eq!(bad.validate(), Err(ProtocolError::InvalidParam("ack_timeout")));
    }
}
