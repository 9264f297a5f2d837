//! Adversary processes: malware spreading between neighbors (internal) or
//! an outside attacker hitting random devices (external), and the initial
//! placement of corrupt devices.

use rand::seq::index::sample;
use rand::Rng;
use thiserror::Error;

use crate::engine::sample_exponential;
use crate::topology::{DeviceId, Topology};

#[derive(Debug, Error, PartialEq)]
pub enum AdversaryError {
    #[error("initial corrupt fraction {0} outside [0, 1]")]
    Fraction(f64),
    #[error("island of {wanted} devices requested but the largest component has {largest}")]
    IslandTooLarge { wanted: usize, largest: usize },
    #[error("adversary rate {0} must be positive")]
    Rate(f64),
    #[error("disconnect time {0} must be non-negative")]
    Disconnect(f64),
    #[error("island configuration requires the internal adversary")]
    IslandNeedsInternal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdversaryMode {
    None,
    Internal,
    External,
}

/// Placement of the initially corrupt devices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Configuration {
    /// Uniformly random devices.
    C0,
    /// One connected island grown by breadth-first search.
    C1,
}

/// How `lambda_ext` is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExternalRate {
    /// Each device is hit at rate `lambda_ext`, so the attacker's overall
    /// attempt rate is `N · lambda_ext`.
    PerDevice,
    /// The attacker makes attempts at overall rate `lambda_ext`.
    Network,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversaryConfig {
    pub mode: AdversaryMode,
    /// Initially corrupt fraction (internal mode).
    pub f: f64,
    /// Spread rate of each corrupt device.
    pub lambda_int: f64,
    pub lambda_ext: f64,
    pub external_rate: ExternalRate,
    pub disconnect_at: f64,
    pub configuration: Configuration,
    /// Chunks modified per corruption.
    pub kappa_adv: usize,
    /// No corruption succeeds at or after this time.
    pub halt_after: Option<f64>,
    /// Overrides the random initial placement.
    pub initial: Option<Vec<DeviceId>>,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        AdversaryConfig {
            mode: AdversaryMode::None,
            f: 0.0,
            lambda_int: crate::protocol::DEFAULT_LAMBDA_MAX,
            lambda_ext: crate::protocol::DEFAULT_LAMBDA_MAX,
            external_rate: ExternalRate::PerDevice,
            disconnect_at: 300.0,
            configuration: Configuration::C0,
            kappa_adv: crate::bloom::DEFAULT_KAPPA,
            halt_after: None,
            initial: None,
        }
    }
}

impl AdversaryConfig {
    pub fn internal(f: f64) -> Self {
        AdversaryConfig { mode: AdversaryMode::Internal, f, ..Default::default() }
    }

    pub fn external(disconnect_at: f64) -> Self {
        AdversaryConfig { mode: AdversaryMode::External, disconnect_at, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), AdversaryError> {
        if !(0.0..=1.0).contains(&self.f) {
            return Err(AdversaryError::Fraction(self.f));
        }
        for r in [self.lambda_int, self.lambda_ext] {
            if !(r.is_finite() && r > 0.0) {
                return Err(AdversaryError::Rate(r));
            }
        }
        if !(self.disconnect_at >= 0.0) {
            return Err(AdversaryError::Disconnect(self.disconnect_at));
        }
        if self.configuration == Configuration::C1 && self.mode == AdversaryMode::External {
            return Err(AdversaryError::IslandNeedsInternal);
        }
        Ok(())
    }

    /// Whether a corruption attempt firing at `now` may succeed.
    pub fn corruption_allowed(&self, now: f64) -> bool {
        self.halt_after.is_none_or(|h| now < h)
    }

    /// Overall external attempt rate for a network of `n` devices.
    pub fn external_attempt_rate(&self, n: usize) -> f64 {
        match self.external_rate {
            ExternalRate::PerDevice => self.lambda_ext * n as f64,
            ExternalRate::Network => self.lambda_ext,
        }
    }
}

/// `⌊f·N⌋` devices chosen per the configuration.
pub fn initial_corrupt_set<R: Rng + ?Sized>(
    topology: &Topology,
    f: f64,
    configuration: Configuration,
    rng: &mut R,
) -> Result<Vec<DeviceId>, AdversaryError> {
    if !(0.0..=1.0).contains(&f) {
        return Err(AdversaryError::Fraction(f));
    }
    let n = topology.len();
    let k = (f * n as f64 + 1e-9).floor() as usize;
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut set: Vec<DeviceId> = match configuration {
        Configuration::C0 => sample(rng, n, k).into_iter().map(|i| DeviceId(i as u32)).collect(),
        Configuration::C1 => {
            let largest = topology.components().first().map_or(0, Vec::len);
            if largest < k {
                return Err(AdversaryError::IslandTooLarge { wanted: k, largest });
            }
            // reseed until the seed's component is big enough
            loop {
                let seed = DeviceId(rng.gen_range(0..n as u32));
                let island = topology.bfs(seed, k);
                if island.len() == k {
                    break island;
                }
            }
        }
    };
    set.sort();
    Ok(set)
}

/// A pending corruption attempt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Attempt {
    pub target: DeviceId,
    pub delay: f64,
}

/// Next attack of a corrupt device on a uniformly chosen neighbor.
pub fn internal_step<R: Rng + ?Sized>(
    topology: &Topology,
    attacker: DeviceId,
    lambda_int: f64,
    rng: &mut R,
) -> Option<Attempt> {
    let nbrs = topology.neighbors(attacker);
    if nbrs.is_empty() {
        return None;
    }
    let target = nbrs[rng.gen_range(0..nbrs.len())];
    let delay = sample_exponential(lambda_int, rng).ok()?;
    Some(Attempt { target, delay })
}

/// Next attack of the outside attacker, or `None` once it is disconnected.
pub fn external_step<R: Rng + ?Sized>(
    n: usize,
    rate: f64,
    now: f64,
    disconnect_at: f64,
    rng: &mut R,
) -> Option<Attempt> {
    if now >= disconnect_at || n == 0 {
        return None;
    }
    let target = DeviceId(rng.gen_range(0..n as u32));
    let delay = sample_exponential(rate, rng).ok()?;
    Some(Attempt { target, delay })
}
