//! Deterministic discrete-event simulation of a device population running the
//! self-healing protocol under attack.
//!
//! Randomness is split into independent ChaCha streams derived from
//! `SHA-256(run_seed ‖ tag ‖ entity id)`: one per device, one for the
//! adversary, one for link delays, one for the operator and one for the
//! topology. Metric sampling draws no randomness.

mod metrics;
mod queue;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub use metrics::{Convergence, MetricsTimeline, Sample, CSV_HEADER};
pub use queue::EventQueue;

use crate::adversary::{
    external_step, initial_corrupt_set, internal_step, AdversaryConfig, AdversaryError, AdversaryMode,
};
use crate::code_image::{
    build_stream_chain, AppId, ApplicationImage, ImageError, Operator, OperatorVerifier, StreamSignedImage, Version,
    DEFAULT_CHUNK_SIZE, DEFAULT_CODE_SIZE,
};
use crate::protocol::{rendezvous, Action, Ctx, DeviceState, Message, Payload, ProtocolError, ProtocolParams, Status, Timer};
use crate::topology::{
    gen_mesh, gen_tree, holder_overlay, DeviceId, Topology, TopologyError, DEFAULT_AREA_SIDE_M, DEFAULT_RANGE_M,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("rate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("seed {0} appears more than once")]
    DuplicateSeed(u64),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Inverse-transform exponential sample with the given rate.
pub fn sample_exponential<R: RngCore + ?Sized>(rate: f64, rng: &mut R) -> Result<f64, EngineError> {
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(EngineError::NonPositiveRate(rate));
    }
    let u: f64 = rng.gen();
    Ok(-(1.0 - u).ln() / rate)
}

/// Independent generator for one entity of one run.
pub fn derive_rng(run_seed: u64, tag: &str, id: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update([0u8]);
    h.update(id.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Clone, Debug, PartialEq)]
pub enum TopologySpec {
    Mesh { n: usize, side_m: f64, range_m: f64 },
    Tree { n: usize, arity: usize },
    Fixed(Arc<Topology>),
}

impl TopologySpec {
    pub fn mesh(n: usize) -> Self {
        TopologySpec::Mesh { n, side_m: DEFAULT_AREA_SIDE_M, range_m: DEFAULT_RANGE_M }
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Topology, TopologyError> {
        match self {
            TopologySpec::Mesh { n, side_m, range_m } => gen_mesh(*n, *side_m, *range_m, rng),
            TopologySpec::Tree { n, arity } => gen_tree(*n, *arity),
            TopologySpec::Fixed(t) => Ok((**t).clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageSpec {
    pub app_id: AppId,
    pub code_size: usize,
    pub chunk_size: usize,
}

impl Default for ImageSpec {
    fn default() -> Self {
        ImageSpec { app_id: 1, code_size: DEFAULT_CODE_SIZE, chunk_size: DEFAULT_CHUNK_SIZE }
    }
}

/// Operator pushes a new release at `at` to a random device, retrying every
/// `retry_interval` while it hits corrupt devices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateSchedule {
    pub at: f64,
    pub retry_interval: f64,
    /// Fixed first contact instead of a uniform choice.
    pub target: Option<DeviceId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub topology: TopologySpec,
    /// Devices holding the application. When set, the simulation runs over
    /// these devices only, with HR-only relay paths collapsed into links.
    pub holders: Option<BTreeSet<DeviceId>>,
    pub protocol: ProtocolParams,
    pub adversary: AdversaryConfig,
    pub image: ImageSpec,
    pub duration: f64,
    pub update: Option<UpdateSchedule>,
    /// End the run once every device is correct (and updated, if an update
    /// was released) and no adversary can act again. Remaining samples repeat
    /// the final state, which is exact because nothing can change anymore.
    pub stop_when_settled: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            topology: TopologySpec::mesh(1024),
            holders: None,
            protocol: ProtocolParams::default(),
            adversary: AdversaryConfig::default(),
            image: ImageSpec::default(),
            duration: 1000.0,
            update: None,
            stop_when_settled: true,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), EngineError> {
        self.protocol.validate()?;
        self.adversary.validate()?;
        let bad = |m: &str| Err(EngineError::InvalidScenario(m.to_string()));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be positive");
        }
        if self.image.chunk_size == 0 || self.image.code_size == 0 || self.image.code_size % self.image.chunk_size != 0 {
            return bad("code size must be a positive multiple of the chunk size");
        }
        if let Some(u) = &self.update {
            if !(0.0..=self.duration).contains(&u.at) {
                return bad("update_at must lie within the duration");
            }
            if !(u.retry_interval > 0.0) {
                return bad("retry_interval must be positive");
            }
        }
        if self.holders.as_ref().is_some_and(BTreeSet::is_empty) {
            return bad("holder set is empty");
        }
        Ok(())
    }
}

/// One request and how many responders answered it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RequestRecord {
    pub time: f64,
    pub requester: DeviceId,
    pub req_seq: u64,
    pub broadcast: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunStats {
    pub events: u64,
    pub requests: Vec<RequestRecord>,
    /// Responders that sent a first chunk, per `(requester, request seq)`.
    pub transmissions: BTreeMap<(DeviceId, u64), u32>,
    pub corruptions: Vec<(f64, DeviceId)>,
    pub detections: Vec<(f64, DeviceId)>,
    pub recoveries: Vec<(f64, DeviceId)>,
    pub version_changes: Vec<(f64, DeviceId, Version)>,
    pub installs: u64,
    /// Installed chunks that differ from the certified release.
    pub bad_installs: u64,
    pub rejections: u64,
    pub internal_attempts: u64,
    pub external_attempts: u64,
    pub operator_attempts: u64,
    /// Time at which the run stopped early, if it did.
    pub settled_at: Option<f64>,
}

impl RunStats {
    /// Number of responders that answered the first request of `device`.
    pub fn first_request_transmitters(&self, device: DeviceId) -> Option<u32> {
        let r = self.requests.iter().find(|r| r.requester == device)?;
        Some(self.transmissions.get(&(device, r.req_seq)).copied().unwrap_or(0))
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub seed: u64,
    pub timeline: MetricsTimeline,
    pub stats: RunStats,
    pub topology: Topology,
}

#[derive(Clone, Debug)]
enum Event {
    Protocol { device: usize, timer: Timer },
    Deliver { to: usize, msg: Arc<Message> },
    AdversaryAttempt { attacker: Option<(usize, u64)>, target: usize },
    OperatorUpdate { version: Version },
    AdversaryDisconnect,
}

struct Sim<'a> {
    sc: &'a Scenario,
    graph: Topology,
    hops: Option<Vec<Vec<u32>>>,
    devices: Vec<DeviceState>,
    rngs: Vec<ChaCha8Rng>,
    adv_rng: ChaCha8Rng,
    net_rng: ChaCha8Rng,
    op_rng: ChaCha8Rng,
    operator: Operator,
    verifier: OperatorVerifier,
    catalogue: BTreeMap<Version, StreamSignedImage>,
    latest_release: Option<Version>,
    update_pending: bool,
    queue: EventQueue<Event>,
    now: f64,
    attack_epoch: Vec<u64>,
    disconnected: bool,
    last_version: Vec<Version>,
    stats: RunStats,
}

/// Runs one scenario with one seed.
pub fn run(sc: &Scenario, seed: u64) -> Result<RunOutput, EngineError> {
    sc.validate()?;
    let mut sim = Sim::new(sc, seed)?;
    let timeline = sim.run_loop();
    Ok(RunOutput { seed, timeline, stats: sim.stats, topology: sim.graph })
}

impl<'a> Sim<'a> {
    fn new(sc: &'a Scenario, seed: u64) -> Result<Self, EngineError> {
        let full = sc.topology.build(&mut derive_rng(seed, "topology", 0))?;
        let (graph, hops) = match &sc.holders {
            None => (full, None),
            Some(h) => {
                if let Some(bad) = h.iter().find(|d| d.index() >= full.len()) {
                    return Err(EngineError::InvalidScenario(format!("holder {bad} not in topology")));
                }
                let o = holder_overlay(&full, h);
                (o.graph, Some(o.hops))
            }
        };
        let n = graph.len();
        let mut op_rng = derive_rng(seed, "operator", 0);
        let operator = Operator::random(1, &mut op_rng);
        let verifier = operator.verifier();
        let img = ApplicationImage::random(sc.image.app_id, 1, sc.image.code_size, sc.image.chunk_size, &mut op_rng)?;
        let release = build_stream_chain(img, &operator)?;
        let mut rngs: Vec<ChaCha8Rng> = (0..n as u64).map(|i| derive_rng(seed, "device", i)).collect();
        let mut devices: Vec<DeviceState> = graph
            .ids()
            .map(|id| {
                DeviceState::provision(id, graph.node(id).class, &release, &operator, &sc.protocol, &mut rngs[id.index()])
            })
            .collect();
        for (a, b) in graph.edges() {
            let (lo, hi) = devices.split_at_mut(b.index());
            rendezvous(&mut lo[a.index()], &mut hi[0], &verifier)?;
        }
        let mut catalogue = BTreeMap::new();
        catalogue.insert(release.version(), release);
        Ok(Sim {
            sc,
            hops,
            devices,
            rngs,
            adv_rng: derive_rng(seed, "adversary", 0),
            net_rng: derive_rng(seed, "network", 0),
            op_rng,
            operator,
            verifier,
            catalogue,
            latest_release: None,
            update_pending: sc.update.is_some(),
            queue: EventQueue::new(),
            now: 0.0,
            attack_epoch: vec![0; n],
            disconnected: false,
            last_version: vec![1; n],
            stats: RunStats::default(),
            graph,
        })
    }

    fn setup(&mut self) -> Result<(), EngineError> {
        let adv = &self.sc.adversary;
        let initial = match (&adv.initial, adv.mode) {
            (Some(list), _) => list.clone(),
            (None, AdversaryMode::Internal) => {
                initial_corrupt_set(&self.graph, adv.f, adv.configuration, &mut self.adv_rng)?
            }
            (None, _) => Vec::new(),
        };
        for d in initial {
            if d.index() >= self.devices.len() {
                return Err(EngineError::InvalidScenario(format!("initial corrupt device {d} not in topology")));
            }
            self.corrupt_device(d.index());
        }
        for i in 0..self.devices.len() {
            let mut ctx = Ctx { now: 0.0, params: &self.sc.protocol, verifier: &self.verifier, rng: &mut self.rngs[i] };
            let actions = self.devices[i].start(&mut ctx);
            self.apply(i, actions);
        }
        if adv.mode == AdversaryMode::External {
            self.schedule_external();
            self.queue.push(adv.disconnect_at, Event::AdversaryDisconnect);
        }
        if let Some(u) = &self.sc.update {
            self.queue.push(u.at, Event::OperatorUpdate { version: 2 });
        }
        Ok(())
    }

    fn run_loop(&mut self) -> MetricsTimeline {
        self.setup().expect("scenario validated");
        let n_samples = self.sc.duration.floor() as usize + 1;
        let mut samples = Vec::with_capacity(n_samples);
        while samples.len() < n_samples {
            let t_sample = samples.len() as f64;
            if self.queue.peek_time().is_some_and(|t| t <= t_sample) {
                let (t, _, ev) = self.queue.pop().expect("peeked");
                debug_assert!(t >= self.now, "causality");
                self.now = t;
                self.stats.events += 1;
                self.handle(ev);
                continue;
            }
            let s = self.sample(t_sample);
            samples.push(s);
            if self.sc.stop_when_settled && self.settled(&s) {
                self.stats.settled_at = Some(t_sample);
                while samples.len() < n_samples {
                    samples.push(Sample { time: samples.len() as f64, ..s });
                }
            }
        }
        MetricsTimeline::new(samples)
    }

    fn sample(&self, time: f64) -> Sample {
        let n = self.devices.len() as f64;
        let (mut c, mut b, mut h, mut u) = (0usize, 0usize, 0usize, 0usize);
        for d in &self.devices {
            match d.status() {
                Status::Corrupt => c += 1,
                Status::Blank => b += 1,
                Status::Honest => {
                    h += 1;
                    if self.latest_release.is_some_and(|v| d.version() >= v) {
                        u += 1;
                    }
                }
            }
        }
        Sample {
            time,
            frac_corrupt_undetected: c as f64 / n,
            frac_blank: b as f64 / n,
            frac_correct: h as f64 / n,
            frac_updated: u as f64 / n,
        }
    }

    fn settled(&self, s: &Sample) -> bool {
        let adversary_done = self.sc.adversary.mode != AdversaryMode::External || self.disconnected;
        s.frac_correct == 1.0
            && !self.update_pending
            && (self.latest_release.is_none() || s.frac_updated == 1.0)
            && adversary_done
    }

    fn handle(&mut self, ev: Event) {
        match ev {
            Event::Protocol { device, timer } => {
                let mut ctx =
                    Ctx { now: self.now, params: &self.sc.protocol, verifier: &self.verifier, rng: &mut self.rngs[device] };
                let actions = self.devices[device].on_timer(timer, &mut ctx);
                self.apply(device, actions);
            }
            Event::Deliver { to, msg } => {
                let mut ctx =
                    Ctx { now: self.now, params: &self.sc.protocol, verifier: &self.verifier, rng: &mut self.rngs[to] };
                let actions = self.devices[to].on_message(&msg, &mut ctx);
                self.apply(to, actions);
            }
            Event::AdversaryAttempt { attacker: Some((a, epoch)), target } => {
                if epoch != self.attack_epoch[a] || self.devices[a].status() != Status::Corrupt {
                    return;
                }
                self.stats.internal_attempts += 1;
                if !self.sc.adversary.corruption_allowed(self.now) {
                    return;
                }
                self.corrupt_device(target);
                self.schedule_internal(a);
            }
            Event::AdversaryAttempt { attacker: None, target } => {
                if self.disconnected || self.now >= self.sc.adversary.disconnect_at {
                    return;
                }
                self.stats.external_attempts += 1;
                if self.sc.adversary.corruption_allowed(self.now) {
                    self.corrupt_device(target);
                }
                self.schedule_external();
            }
            Event::AdversaryDisconnect => self.disconnected = true,
            Event::OperatorUpdate { version } => self.operator_update(version),
        }
    }

    fn corrupt_device(&mut self, i: usize) {
        if self.devices[i].corrupt(self.sc.adversary.kappa_adv, &mut self.adv_rng).is_some() {
            self.stats.corruptions.push((self.now, DeviceId(i as u32)));
            self.attack_epoch[i] += 1;
            if self.sc.adversary.mode == AdversaryMode::Internal {
                self.schedule_internal(i);
            }
        }
    }

    fn schedule_internal(&mut self, i: usize) {
        if let Some(a) = internal_step(&self.graph, DeviceId(i as u32), self.sc.adversary.lambda_int, &mut self.adv_rng) {
            self.queue.push(
                self.now + a.delay,
                Event::AdversaryAttempt { attacker: Some((i, self.attack_epoch[i])), target: a.target.index() },
            );
        }
    }

    fn schedule_external(&mut self) {
        let adv = &self.sc.adversary;
        let rate = adv.external_attempt_rate(self.devices.len());
        if let Some(a) = external_step(self.devices.len(), rate, self.now, adv.disconnect_at, &mut self.adv_rng) {
            self.queue.push(self.now + a.delay, Event::AdversaryAttempt { attacker: None, target: a.target.index() });
        }
    }

    fn operator_update(&mut self, version: Version) {
        if !self.catalogue.contains_key(&version) {
            let spec = self.sc.image;
            let img = ApplicationImage::random(spec.app_id, version, spec.code_size, spec.chunk_size, &mut self.op_rng)
                .expect("validated geometry");
            let release = build_stream_chain(img, &self.operator).expect("non-empty image");
            self.catalogue.insert(version, release);
            self.latest_release = Some(version);
        }
        self.stats.operator_attempts += 1;
        let target = match self.sc.update.and_then(|u| u.target) {
            Some(t) => t.index(),
            None => self.op_rng.gen_range(0..self.devices.len()),
        };
        let release = self.catalogue[&version].clone();
        let mut ctx = Ctx { now: self.now, params: &self.sc.protocol, verifier: &self.verifier, rng: &mut self.rngs[target] };
        match self.devices[target].install_from_operator(&release, &mut ctx) {
            Some(actions) => {
                self.update_pending = false;
                self.apply(target, actions);
            }
            None => {
                let retry = self.sc.update.map_or(1.0, |u| u.retry_interval);
                self.queue.push(self.now + retry, Event::OperatorUpdate { version });
            }
        }
    }

    fn link_delay(&mut self) -> f64 {
        let mean = self.graph.mean_link_delay();
        if mean > 0.0 {
            sample_exponential(1.0 / mean, &mut self.net_rng).expect("positive rate")
        } else {
            0.0
        }
    }

    fn hop_count(&self, from: usize, slot: usize) -> f64 {
        self.hops.as_ref().map_or(1.0, |h| h[from][slot] as f64)
    }

    fn record_request(&mut self, from: usize, msg: &Message, broadcast: bool) {
        if let Payload::Req(r) = &msg.payload {
            self.stats.requests.push(RequestRecord {
                time: self.now,
                requester: DeviceId(from as u32),
                req_seq: r.q,
                broadcast,
            });
        }
    }

    fn apply(&mut self, i: usize, actions: Vec<Action>) {
        for a in actions {
            match a {
                Action::Broadcast(msg) => {
                    self.record_request(i, &msg, true);
                    // one radio transmission reaches every neighbor at once
                    let d = self.link_delay();
                    for slot in 0..self.graph.neighbors(DeviceId(i as u32)).len() {
                        let to = self.graph.neighbors(DeviceId(i as u32))[slot].index();
                        let t = self.now + d * self.hop_count(i, slot);
                        self.queue.push(t, Event::Deliver { to, msg: msg.clone() });
                    }
                }
                Action::Unicast { to, msg } => {
                    self.record_request(i, &msg, false);
                    let nbrs = self.graph.neighbors(DeviceId(i as u32));
                    if let Ok(slot) = nbrs.binary_search(&to) {
                        let d = self.link_delay() * self.hop_count(i, slot);
                        self.queue.push(self.now + d, Event::Deliver { to: to.index(), msg });
                    }
                }
                Action::SetTimer { delay, timer } => {
                    self.queue.push(self.now + delay, Event::Protocol { device: i, timer });
                }
                Action::Transmitted { requester, req_seq } => {
                    *self.stats.transmissions.entry((requester, req_seq)).or_insert(0) += 1;
                }
                Action::Installed { version, index } => {
                    self.stats.installs += 1;
                    let ok = self
                        .catalogue
                        .get(&version)
                        .is_some_and(|r| r.image().chunk(index) == self.devices[i].image().chunk(index));
                    if !ok {
                        self.stats.bad_installs += 1;
                    }
                }
                Action::StatusChanged { from, to } => {
                    let id = DeviceId(i as u32);
                    if from == Status::Corrupt {
                        self.attack_epoch[i] += 1;
                    }
                    match (from, to) {
                        (_, Status::Blank) => self.stats.detections.push((self.now, id)),
                        (Status::Blank, Status::Honest) => self.stats.recoveries.push((self.now, id)),
                        _ => {}
                    }
                }
                Action::Rejected { .. } => self.stats.rejections += 1,
            }
        }
        let v = self.devices[i].version();
        if v != self.last_version[i] {
            self.last_version[i] = v;
            self.stats.version_changes.push((self.now, DeviceId(i as u32), v));
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchOutput {
    /// Per-seed results in the order the seeds were given.
    pub runs: Vec<RunOutput>,
    pub mean: MetricsTimeline,
}

/// Runs every seed independently, spreading work over the available cores,
/// and averages the timelines pointwise in ascending seed order.
pub fn run_batch(sc: &Scenario, seeds: &[u64]) -> Result<BatchOutput, EngineError> {
    sc.validate()?;
    let mut seen = BTreeSet::new();
    if let Some(&dup) = seeds.iter().find(|s| !seen.insert(**s)) {
        return Err(EngineError::DuplicateSeed(dup));
    }
    if seeds.is_empty() {
        return Err(EngineError::InvalidScenario("no seeds".into()));
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len());
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<Result<RunOutput, EngineError>>>> = Mutex::new((0..seeds.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = {
                    let mut g = next.lock().expect("no poisoning");
                    let k = *g;
                    *g += 1;
                    k
                };
                if k >= seeds.len() {
                    break;
                }
                let r = run(sc, seeds[k]);
                results.lock().expect("no poisoning")[k] = Some(r);
            });
        }
    });
    let runs = results
        .into_inner()
        .expect("no poisoning")
        .into_iter()
        .map(|r| r.expect("every seed ran"))
        .collect::<Result<Vec<_>, _>>()?;
    let mut order: Vec<&RunOutput> = runs.iter().collect();
    order.sort_by_key(|r| r.seed);
    let tls: Vec<&MetricsTimeline> = order.iter().map(|r| &r.timeline).collect();
    let mean = MetricsTimeline::mean(&tls).expect("equal-length timelines");
    Ok(BatchOutput { runs, mean })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_mean_and_errors() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let n = 1_000_000;
        let mean: f64 = (0..n).map(|_| sample_exponential(0.01, &mut r).unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 100.0).abs() < 1.0, "{mean}");
        assert!(matches!(sample_exponential(0.0, &mut r), Err(EngineError::NonPositiveRate(_))));
        assert!(matches!(sample_exponential(-1.0, &mut r), Err(EngineError::NonPositiveRate(_))));
    }

    #[test]
    fn derived_streams_differ() {
        let a: u64 = derive_rng(1, "device", 0).gen();
        let b: u64 = derive_rng(1, "device", 1).gen();
        let c: u64 = derive_rng(2, "device", 0).gen();
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_rng(1, "device", 0).gen::<u64>());
    }
}
