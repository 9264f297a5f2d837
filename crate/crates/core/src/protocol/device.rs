use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, RngCore};

use super::message::{Announcement, Message, Offer, Payload, ReplayWindow, Request};
use super::{
    compute_backoff, relaxed_rate, warned_rate, Action, ProtocolError, ProtocolParams, Status, Timer,
};
use crate::bloom::{build_filter, localize, KeyedBloomFilter};
use crate::code_image::{
    build_stream_chain, corrupt_chunks, random_indices, version_payload, verify_stream_prefix,
    ApplicationImage, AttestKey, Certificate, Digest, Operator, OperatorVerifier, SecretKey, StreamChunk,
    StreamSignedImage, Version,
};
use crate::engine::sample_exponential;
use crate::topology::{DeviceClass, DeviceId};

/// Everything a handler needs from its host.
pub struct Ctx<'a> {
    pub now: f64,
    pub params: &'a ProtocolParams,
    pub verifier: &'a OperatorVerifier,
    pub rng: &'a mut dyn RngCore,
}

impl Ctx<'_> {
    fn exp(&mut self, rate: f64) -> f64 {
        sample_exponential(rate, self.rng).expect("rates are validated positive")
    }
}

/// Certified public identity exchanged at rendezvous.
#[derive(Clone, Debug)]
pub struct Identity {
    pub public: Digest,
    pub cert: Certificate,
}

fn identity_payload(id: DeviceId, public: &Digest) -> Vec<u8> {
    let mut p = b"id".to_vec();
    p.extend_from_slice(&id.0.to_le_bytes());
    p.extend_from_slice(&public.0);
    p
}

#[derive(Clone, Debug)]
struct NeighborEntry {
    key: SecretKey,
    window: ReplayWindow,
}

#[derive(Clone, Debug)]
struct PendingResponse {
    req_seq: u64,
    z_req: Version,
    pi: Arc<[u32]>,
    bogus: bool,
}

#[derive(Clone, Debug)]
struct Outbound {
    req_seq: u64,
    rest: Vec<StreamChunk>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum InboundKind {
    /// Blank device repairing its code.
    Recovery,
    /// Honest device fetching a newer version.
    Pull,
}

#[derive(Clone, Debug)]
struct Staging {
    offer: Offer,
    chunks: Vec<StreamChunk>,
}

#[derive(Clone, Debug)]
struct Inbound {
    kind: InboundKind,
    /// Suspect indices still to be repaired in place.
    pi: BTreeSet<usize>,
    /// Next request asks for the whole image.
    escalate: bool,
    req_seq: u64,
    /// Responder that was acknowledged, with the request it answered.
    source: Option<(DeviceId, u64)>,
    last_activity: f64,
    /// Last accepted chunk index and its successor digest.
    last: Option<(usize, Option<Digest>)>,
    staging: Option<Staging>,
    tried: BTreeSet<DeviceId>,
}

impl Inbound {
    fn new(kind: InboundKind, pi: BTreeSet<usize>, now: f64) -> Self {
        Inbound {
            kind,
            pi,
            escalate: false,
            req_seq: 0,
            source: None,
            last_activity: now,
            last: None,
            staging: None,
            tried: BTreeSet::new(),
        }
    }

    fn busy(&self, now: f64, theta: f64) -> bool {
        self.source.is_some() && now - self.last_activity < theta
    }
}

/// One device's protocol state.
#[derive(Clone, Debug)]
pub struct DeviceState {
    id: DeviceId,
    class: DeviceClass,
    status: Status,
    signed: StreamSignedImage,
    attest: AttestKey,
    bloom_keys: Vec<SecretKey>,
    filter: KeyedBloomFilter,
    lambda: f64,
    seq: u64,
    shared: SecretKey,
    identity: Identity,
    neighbors: BTreeMap<DeviceId, NeighborEntry>,
    inbound: Option<Inbound>,
    responses: BTreeMap<DeviceId, PendingResponse>,
    outbound: BTreeMap<DeviceId, Outbound>,
    version_known: Version,
    update_sources: BTreeMap<DeviceId, Version>,
    seen_warnings: BTreeSet<(DeviceId, u64)>,
    misbehavior: BTreeMap<DeviceId, u32>,
    check_token: u64,
    req_token: u64,
}

type Out = Vec<Action>;

impl DeviceState {
    /// Initializes a device with fresh secrets and the given release
    /// installed.
    pub fn provision<R: RngCore + ?Sized>(
        id: DeviceId,
        class: DeviceClass,
        release: &StreamSignedImage,
        operator: &Operator,
        params: &ProtocolParams,
        rng: &mut R,
    ) -> Self {
        let attest = AttestKey::new(SecretKey::random(rng), release.image());
        let bloom_keys: Vec<SecretKey> = (0..params.bloom_keys).map(|_| SecretKey::random(rng)).collect();
        let filter = build_filter(release.image(), &bloom_keys, params.bloom_mu).expect("validated bloom params");
        let shared = SecretKey::random(rng);
        let mut pk = [0u8; 16];
        rng.fill_bytes(&mut pk);
        let public = Digest(pk);
        let cert = operator.sign(&identity_payload(id, &public));
        DeviceState {
            id,
            class,
            status: Status::Honest,
            signed: release.clone(),
            attest,
            bloom_keys,
            filter,
            lambda: params.lambda_init,
            seq: 0,
            shared,
            identity: Identity { public, cert },
            neighbors: BTreeMap::new(),
            inbound: None,
            responses: BTreeMap::new(),
            outbound: BTreeMap::new(),
            version_known: release.version(),
            update_sources: BTreeMap::new(),
            seen_warnings: BTreeSet::new(),
            misbehavior: BTreeMap::new(),
            check_token: 0,
            req_token: 0,
        }
    }

    pub fn id(&self) -> DeviceId {
        self.id
    }

    pub fn class(&self) -> DeviceClass {
        self.class
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn version(&self) -> Version {
        self.signed.version()
    }

    pub fn version_known(&self) -> Version {
        self.version_known
    }

    pub fn image(&self) -> &ApplicationImage {
        self.signed.image()
    }

    pub fn signed_image(&self) -> &StreamSignedImage {
        &self.signed
    }

    pub fn identity(&self) -> &Identity {
        &self.identity
    }

    pub fn filter(&self) -> &KeyedBloomFilter {
        &self.filter
    }

    pub fn reference_value(&self) -> Digest {
        self.attest.reference_value()
    }

    pub fn neighbor_ids(&self) -> impl Iterator<Item = DeviceId> + '_ {
        self.neighbors.keys().copied()
    }

    pub fn is_neighbor(&self, id: DeviceId) -> bool {
        self.neighbors.contains_key(&id)
    }

    /// Outstanding suspect set; defined exactly while the device is blank.
    pub fn pending_pi(&self) -> Option<&BTreeSet<usize>> {
        match &self.inbound {
            Some(i) if i.kind == InboundKind::Recovery => Some(&i.pi),
            _ => None,
        }
    }

    pub fn is_pulling(&self) -> bool {
        matches!(&self.inbound, Some(i) if i.kind == InboundKind::Pull)
    }

    pub fn misbehavior(&self, sender: DeviceId) -> u32 {
        self.misbehavior.get(&sender).copied().unwrap_or(0)
    }

    /// Number of pending backoff timers.
    pub fn pending_responses(&self) -> usize {
        self.responses.len()
    }

    fn send(&mut self, payload: Payload) -> Arc<Message> {
        self.seq += 1;
        Arc::new(Message::sign(self.id, self.seq, payload, &self.shared))
    }

    fn offer(&self) -> Offer {
        Offer {
            app: self.signed.head().app_id,
            version: self.version(),
            version_cert: *self.signed.version_cert(),
            head: *self.signed.head(),
        }
    }

    fn announcement(&self) -> Announcement {
        Announcement { app: self.signed.head().app_id, version: self.version(), cert: *self.signed.version_cert() }
    }

    fn set_status(&mut self, to: Status, out: &mut Out) {
        if self.status != to {
            out.push(Action::StatusChanged { from: self.status, to });
            self.status = to;
        }
    }

    fn schedule_selfcheck(&mut self, ctx: &mut Ctx, out: &mut Out) {
        self.check_token += 1;
        let mut delay = ctx.exp(self.lambda);
        if let Some(cap) = ctx.params.selfcheck_cap {
            delay = delay.min(cap);
        }
        out.push(Action::SetTimer { delay, timer: Timer::SelfCheck { token: self.check_token } });
    }

    /// Arms the first self-check.
    pub fn start(&mut self, ctx: &mut Ctx) -> Out {
        let mut out = Vec::new();
        if self.status != Status::Blank {
            self.schedule_selfcheck(ctx, &mut out);
        }
        out
    }

    /// Adversary primitive: tampers with `kappa` random chunks of an honest
    /// device. Returns the modified indices, or `None` if the device is not
    /// honest (blank devices are immune, corrupt ones unchanged).
    pub fn corrupt<R: Rng + ?Sized>(&mut self, kappa: usize, rng: &mut R) -> Option<BTreeSet<usize>> {
        if self.status != Status::Honest {
            return None;
        }
        let idx = random_indices(self.signed.chunk_count(), kappa, rng);
        let bad = corrupt_chunks(self.signed.image(), &idx, rng).expect("indices in range");
        *self.signed.image_mut() = bad;
        self.status = Status::Corrupt;
        self.inbound = None;
        self.responses.clear();
        self.outbound.clear();
        self.req_token += 1;
        Some(idx)
    }

    /// Hardware-triggered attestation of the code region.
    pub fn on_selfcheck(&mut self, ctx: &mut Ctx) -> Out {
        let mut out = Vec::new();
        if self.status == Status::Blank {
            return out;
        }
        if self.attest.check(self.signed.image()) {
            match self.status {
                Status::Honest => self.lambda = relaxed_rate(self.lambda, ctx.params.lambda_min),
                _ => self.set_status(Status::Honest, &mut out),
            }
            self.schedule_selfcheck(ctx, &mut out);
        } else {
            self.go_blank(ctx, &mut out);
        }
        out
    }

    fn go_blank(&mut self, ctx: &mut Ctx, out: &mut Out) {
        self.set_status(Status::Blank, out);
        self.lambda = ctx.params.lambda_max;
        self.check_token += 1;
        self.responses.clear();
        self.outbound.clear();
        let pi = localize(&self.filter, self.signed.image()).expect("filter matches image geometry");
        let mut inb = Inbound::new(InboundKind::Recovery, pi, ctx.now);
        inb.escalate = inb.pi.is_empty();
        self.inbound = Some(inb);
        self.send_request(None, ctx, out);
    }

    fn all_indices(&self) -> BTreeSet<usize> {
        (0..self.signed.chunk_count()).collect()
    }

    /// Sends a request, broadcast or unicast, and arms its timeout.
    fn send_request(&mut self, to: Option<DeviceId>, ctx: &mut Ctx, out: &mut Out) {
        let all = self.all_indices();
        let Some(inb) = self.inbound.as_mut() else { return };
        if inb.escalate || inb.kind == InboundKind::Pull {
            inb.pi = all;
            inb.escalate = false;
        }
        let pi: Arc<[u32]> = inb.pi.iter().map(|&i| i as u32).collect();
        let (degree, ttl) = match to {
            Some(_) => (1, 0),
            None => (self.neighbors.len().max(1) as u32, ctx.params.ttl),
        };
        let q = self.seq + 1;
        inb.req_seq = q;
        inb.source = None;
        let req = Request { ttl, q, degree, version: self.version(), app: self.signed.head().app_id, pi };
        let msg = self.send(Payload::Req(req));
        debug_assert_eq!(msg.seq, q);
        out.push(match to {
            Some(to) => Action::Unicast { to, msg },
            None => Action::Broadcast(msg),
        });
        self.req_token += 1;
        let p = ctx.params;
        let timeout = (p.delta_cap as f64 + 1.0) * degree as f64 * p.theta;
        out.push(Action::SetTimer { delay: timeout, timer: Timer::RequestTimeout { token: self.req_token } });
    }

    pub fn on_timer(&mut self, timer: Timer, ctx: &mut Ctx) -> Out {
        let mut out = Vec::new();
        match timer {
            Timer::SelfCheck { token } => {
                if token == self.check_token {
                    out = self.on_selfcheck(ctx);
                }
            }
            Timer::Backoff { requester, req_seq } => self.fire_response(requester, req_seq, ctx, &mut out),
            Timer::AckTimeout { requester, req_seq } => {
                if self.outbound.get(&requester).is_some_and(|o| o.req_seq == req_seq) {
                    self.outbound.remove(&requester);
                }
            }
            Timer::RequestTimeout { token } => {
                if token != self.req_token {
                    return out;
                }
                let theta = ctx.params.theta;
                let Some(inb) = self.inbound.as_mut() else { return out };
                if inb.busy(ctx.now, theta) {
                    out.push(Action::SetTimer { delay: theta, timer: Timer::RequestTimeout { token } });
                    return out;
                }
                inb.source = None;
                match inb.kind {
                    InboundKind::Recovery => {
                        let delay = ctx.exp(self.lambda);
                        out.push(Action::SetTimer { delay, timer: Timer::Rerequest { token } });
                    }
                    InboundKind::Pull => self.retry_pull(ctx, &mut out),
                }
            }
            Timer::Rerequest { token } => {
                if token == self.req_token && self.status == Status::Blank {
                    self.send_request(None, ctx, &mut out);
                }
            }
        }
        out
    }

    pub fn on_message(&mut self, msg: &Message, ctx: &mut Ctx) -> Out {
        let mut out = Vec::new();
        let Some(entry) = self.neighbors.get_mut(&msg.sender) else { return out };
        if !msg.verify(&entry.key) {
            return out;
        }
        if self.status == Status::Corrupt {
            if ctx.params.bogus_responders {
                match &msg.payload {
                    Payload::Req(r) => self.schedule_bogus(msg.sender, r, ctx, &mut out),
                    Payload::ChunkAck { req_seq } => self.on_ack(msg.sender, *req_seq, &mut out),
                    _ => {}
                }
            }
            return out;
        }
        if !entry.window.accept(msg.seq) {
            return out;
        }
        let from = msg.sender;
        match &msg.payload {
            Payload::Hello { .. } => {}
            Payload::Req(r) => self.on_request(from, r, ctx, &mut out),
            Payload::Warn { ttl, origin, origin_seq } => {
                if self.status == Status::Honest {
                    self.on_warning(*origin, *origin_seq, *ttl, ctx, &mut out);
                }
            }
            Payload::ChunkFirst { req_seq, offer, chunk } => {
                self.on_chunk_first(from, *req_seq, offer, chunk, ctx, &mut out)
            }
            Payload::ChunkAck { req_seq } => {
                if self.status == Status::Honest {
                    self.on_ack(from, *req_seq, &mut out);
                }
            }
            Payload::ChunkRest { req_seq, chunks } => self.on_chunk_rest(from, *req_seq, chunks, ctx, &mut out),
            Payload::Done { .. } => {
                self.responses.remove(&from);
                self.outbound.remove(&from);
            }
            Payload::CorrectedAnnounce(a) | Payload::UpdateAnnounce(a) => self.on_announce(from, a, ctx, &mut out),
        }
        out
    }

    fn on_warning(&mut self, origin: DeviceId, origin_seq: u64, ttl: u32, ctx: &mut Ctx, out: &mut Out) {
        if origin == self.id || ttl == 0 || !self.seen_warnings.insert((origin, origin_seq)) {
            return;
        }
        self.lambda = warned_rate(self.lambda, ttl, ctx.params.lambda_max);
        if ttl > 1 {
            let msg = self.send(Payload::Warn { ttl: ttl - 1, origin, origin_seq });
            out.push(Action::Broadcast(msg));
        }
    }

    fn on_request(&mut self, from: DeviceId, req: &Request, ctx: &mut Ctx, out: &mut Out) {
        if self.status != Status::Honest {
            return;
        }
        self.on_warning(from, req.q, req.ttl, ctx, out);
        if req.app != self.signed.head().app_id {
            return;
        }
        let p = ctx.params;
        let Some(delay) = compute_backoff(p.delta_cap, p.theta, req.degree, self.version(), req.version, ctx.rng)
        else {
            return;
        };
        self.responses.insert(
            from,
            PendingResponse { req_seq: req.q, z_req: req.version, pi: req.pi.clone(), bogus: false },
        );
        out.push(Action::SetTimer { delay, timer: Timer::Backoff { requester: from, req_seq: req.q } });
    }

    fn schedule_bogus(&mut self, from: DeviceId, req: &Request, ctx: &mut Ctx, out: &mut Out) {
        // claims a newer version, so it lands in the first epoch
        let n = req.degree.max(1);
        let slot = ctx.rng.gen_range(0..n);
        self.responses.insert(
            from,
            PendingResponse { req_seq: req.q, z_req: req.version, pi: req.pi.clone(), bogus: true },
        );
        out.push(Action::SetTimer {
            delay: slot as f64 * ctx.params.theta,
            timer: Timer::Backoff { requester: from, req_seq: req.q },
        });
    }

    fn fire_response(&mut self, requester: DeviceId, req_seq: u64, ctx: &mut Ctx, out: &mut Out) {
        if !self.responses.get(&requester).is_some_and(|p| p.req_seq == req_seq) {
            return;
        }
        let p = self.responses.remove(&requester).expect("checked above");
        let (offer, chunks) = if p.bogus {
            if self.status != Status::Corrupt {
                return;
            }
            self.bogus_stream(&p, ctx)
        } else {
            if self.status != Status::Honest || self.version() < p.z_req {
                return;
            }
            let n = self.signed.chunk_count();
            let plan: Vec<usize> = if self.version() == p.z_req {
                p.pi.iter().map(|&i| i as usize).filter(|&i| i < n).collect()
            } else {
                (0..n).collect()
            };
            (self.offer(), plan.into_iter().filter_map(|i| self.signed.stream_chunk(i)).collect())
        };
        let mut chunks = chunks.into_iter();
        let Some(first) = chunks.next() else { return };
        let msg = self.send(Payload::ChunkFirst { req_seq, offer, chunk: first });
        out.push(Action::Unicast { to: requester, msg });
        out.push(Action::Transmitted { requester, req_seq });
        self.outbound.insert(requester, Outbound { req_seq, rest: chunks.collect() });
        out.push(Action::SetTimer { delay: ctx.params.ack_timeout, timer: Timer::AckTimeout { requester, req_seq } });
    }

    /// Stream a misbehaving device sends in place of real code.
    fn bogus_stream(&self, p: &PendingResponse, ctx: &mut Ctx) -> (Offer, Vec<StreamChunk>) {
        let n = self.signed.chunk_count();
        let junk = |len: usize, rng: &mut dyn RngCore| {
            let mut b = vec![0u8; len];
            rng.fill_bytes(&mut b);
            crate::code_image::Chunk::from(b)
        };
        let strategy = ctx.rng.gen_range(0..3);
        if strategy == 0 {
            // a self-consistent stream under a key the verifier does not know
            let forger = Operator::random(ctx.verifier.operator_id(), ctx.rng);
            let head = self.signed.head();
            let img = ApplicationImage::random(head.app_id, p.z_req + 1, self.image().code_size(), self.image().chunk_size(), ctx.rng)
                .expect("same geometry");
            let fake = build_stream_chain(img, &forger).expect("non-empty");
            let offer = Offer {
                app: head.app_id,
                version: fake.version(),
                version_cert: *fake.version_cert(),
                head: *fake.head(),
            };
            return (offer, fake.stream());
        }
        let mut plan: Vec<usize> = p.pi.iter().map(|&i| i as usize).filter(|&i| i < n).collect();
        if plan.is_empty() {
            plan = (0..n).collect();
        }
        let mut chunks: Vec<StreamChunk> = plan.iter().filter_map(|&i| self.signed.stream_chunk(i)).collect();
        let victim = if strategy == 1 || chunks.len() == 1 { 0 } else { ctx.rng.gen_range(1..chunks.len()) };
        let len = chunks[victim].bytes.len();
        chunks[victim].bytes = junk(len, ctx.rng);
        (self.offer(), chunks)
    }

    fn on_ack(&mut self, from: DeviceId, req_seq: u64, out: &mut Out) {
        if !self.outbound.get(&from).is_some_and(|o| o.req_seq == req_seq) {
            return;
        }
        let o = self.outbound.remove(&from).expect("checked above");
        if !o.rest.is_empty() {
            let msg = self.send(Payload::ChunkRest { req_seq, chunks: o.rest });
            out.push(Action::Unicast { to: from, msg });
        }
    }

    fn offer_acceptable(&self, offer: &Offer, verifier: &OperatorVerifier) -> bool {
        let app = self.signed.head().app_id;
        offer.app == app
            && offer.head.app_id == app
            && offer.head.version == offer.version
            && offer.head.chunk_count == self.signed.chunk_count()
            && verifier.verify(&offer.version_cert, &version_payload(app, offer.version))
    }

    fn reject(&mut self, from: DeviceId, local_anchor: bool, out: &mut Out) {
        *self.misbehavior.entry(from).or_insert(0) += 1;
        if let Some(inb) = self.inbound.as_mut() {
            inb.source = None;
            inb.escalate |= local_anchor;
        }
        out.push(Action::Rejected { sender: from });
    }

    /// Checks one chunk of an in-place repair. Returns whether it verified
    /// and whether a locally stored link served as anchor.
    fn verify_repair_chunk(
        &self,
        chunk: &StreamChunk,
        stream_anchor: Option<Option<Digest>>,
        verifier: &OperatorVerifier,
    ) -> (bool, bool) {
        let head = self.signed.head();
        let one = std::slice::from_ref(chunk);
        match stream_anchor {
            Some(anchor) => (anchor.is_some() && verify_stream_prefix(one, Some(head), anchor, verifier).is_accepted(), false),
            None if chunk.index == 0 => (verify_stream_prefix(one, Some(head), None, verifier).is_accepted(), false),
            None => {
                let local = self.signed.link(chunk.index - 1);
                (local.is_some() && verify_stream_prefix(one, Some(head), local, verifier).is_accepted(), true)
            }
        }
    }

    fn install_chunk(&mut self, chunk: &StreamChunk, out: &mut Out) {
        self.signed.image_mut().replace_chunk(chunk.index, chunk.bytes.clone());
        out.push(Action::Installed { version: self.version(), index: chunk.index });
    }

    fn on_chunk_first(
        &mut self,
        from: DeviceId,
        req_seq: u64,
        offer: &Offer,
        chunk: &StreamChunk,
        ctx: &mut Ctx,
        out: &mut Out,
    ) {
        let theta = ctx.params.theta;
        let Some(inb) = self.inbound.as_ref() else { return };
        if inb.busy(ctx.now, theta) {
            return;
        }
        let kind = inb.kind;
        if !self.offer_acceptable(offer, ctx.verifier) {
            self.reject(from, false, out);
            return;
        }
        let mine = self.version();
        if offer.version < mine || (kind == InboundKind::Pull && offer.version == mine) {
            return;
        }
        if offer.version == mine {
            if !inb.pi.contains(&chunk.index) {
                return;
            }
            let (ok, local) = self.verify_repair_chunk(chunk, None, ctx.verifier);
            if !ok {
                self.reject(from, local, out);
                return;
            }
            self.acknowledge(from, req_seq, ctx.now, out);
            self.install_chunk(chunk, out);
            let inb = self.inbound.as_mut().expect("present");
            inb.pi.remove(&chunk.index);
            inb.last = Some((chunk.index, chunk.link));
            inb.staging = None;
        } else {
            let ok = chunk.index == 0
                && verify_stream_prefix(std::slice::from_ref(chunk), Some(&offer.head), None, ctx.verifier)
                    .is_accepted();
            if !ok {
                self.reject(from, false, out);
                return;
            }
            self.acknowledge(from, req_seq, ctx.now, out);
            self.version_known = self.version_known.max(offer.version);
            let inb = self.inbound.as_mut().expect("present");
            inb.staging = Some(Staging { offer: *offer, chunks: vec![chunk.clone()] });
            inb.last = Some((0, chunk.link));
        }
        self.maybe_finalize(ctx, out);
    }

    fn acknowledge(&mut self, to: DeviceId, req_seq: u64, now: f64, out: &mut Out) {
        let msg = self.send(Payload::ChunkAck { req_seq });
        out.push(Action::Unicast { to, msg });
        let inb = self.inbound.as_mut().expect("acknowledging requires a session");
        inb.source = Some((to, req_seq));
        inb.last_activity = now;
    }

    fn on_chunk_rest(&mut self, from: DeviceId, req_seq: u64, chunks: &[StreamChunk], ctx: &mut Ctx, out: &mut Out) {
        let Some(inb) = self.inbound.as_mut() else { return };
        if inb.source != Some((from, req_seq)) {
            return;
        }
        inb.last_activity = ctx.now;
        let staged = inb.staging.is_some();
        for c in chunks {
            let inb = self.inbound.as_ref().expect("present");
            let (last_idx, last_link) = inb.last.expect("set by the first chunk");
            if staged {
                let head = inb.staging.as_ref().expect("staged").offer.head;
                let ok = c.index == last_idx + 1
                    && last_link.is_some()
                    && verify_stream_prefix(std::slice::from_ref(c), Some(&head), last_link, ctx.verifier)
                        .is_accepted();
                if !ok {
                    self.reject(from, false, out);
                    break;
                }
                let inb = self.inbound.as_mut().expect("present");
                inb.staging.as_mut().expect("staged").chunks.push(c.clone());
                inb.last = Some((c.index, c.link));
            } else {
                if !inb.pi.contains(&c.index) {
                    self.reject(from, false, out);
                    break;
                }
                let anchor = (c.index == last_idx + 1).then_some(last_link);
                let (ok, local) = self.verify_repair_chunk(c, anchor, ctx.verifier);
                if !ok {
                    self.reject(from, local, out);
                    break;
                }
                self.install_chunk(c, out);
                let inb = self.inbound.as_mut().expect("present");
                inb.pi.remove(&c.index);
                inb.last = Some((c.index, c.link));
            }
        }
        if let Some(inb) = self.inbound.as_mut() {
            inb.source = None;
        }
        self.maybe_finalize(ctx, out);
    }

    fn maybe_finalize(&mut self, ctx: &mut Ctx, out: &mut Out) {
        let Some(inb) = self.inbound.as_ref() else { return };
        let kind = inb.kind;
        if let Some(st) = &inb.staging {
            if st.chunks.len() < st.offer.head.chunk_count {
                return;
            }
            let st = self.inbound.as_mut().expect("present").staging.take().expect("staged");
            let signed = StreamSignedImage::from_verified_parts(st.offer.head, st.offer.version_cert, st.chunks)
                .expect("verified stream has consistent geometry");
            self.install_release(signed, out);
        } else {
            if kind == InboundKind::Pull || !inb.pi.is_empty() {
                return;
            }
            if !self.attest.check(self.signed.image()) {
                // a tampered chunk escaped localization
                self.inbound.as_mut().expect("present").escalate = true;
                self.send_request(None, ctx, out);
                return;
            }
        }
        self.finish_inbound(kind, ctx, out);
    }

    fn install_release(&mut self, signed: StreamSignedImage, out: &mut Out) {
        self.attest.rebase(signed.image());
        self.filter = build_filter(signed.image(), &self.bloom_keys, self.filter.len_bits() / self.filter.chunk_count())
            .expect("same geometry");
        self.version_known = self.version_known.max(signed.version());
        let v = signed.version();
        let n = signed.chunk_count();
        self.signed = signed;
        out.extend((0..n).map(|index| Action::Installed { version: v, index }));
    }

    fn finish_inbound(&mut self, kind: InboundKind, ctx: &mut Ctx, out: &mut Out) {
        let inb = self.inbound.take().expect("present");
        self.req_token += 1;
        match kind {
            InboundKind::Recovery => {
                self.on_recovered(inb.req_seq, ctx, out);
            }
            InboundKind::Pull => {
                let msg = self.send(Payload::UpdateAnnounce(self.announcement()));
                out.push(Action::Broadcast(msg));
            }
        }
        self.maybe_pull(ctx, out);
    }

    fn on_recovered(&mut self, req_seq: u64, ctx: &mut Ctx, out: &mut Out) {
        self.set_status(Status::Honest, out);
        self.lambda = ctx.params.lambda_max;
        let done = self.send(Payload::Done { req_seq });
        out.push(Action::Broadcast(done));
        let ann = self.send(Payload::CorrectedAnnounce(self.announcement()));
        out.push(Action::Broadcast(ann));
        self.schedule_selfcheck(ctx, out);
    }

    fn on_announce(&mut self, from: DeviceId, ann: &Announcement, ctx: &mut Ctx, out: &mut Out) {
        let app = self.signed.head().app_id;
        if ann.app != app || !ctx.verifier.verify(&ann.cert, &version_payload(app, ann.version)) {
            return;
        }
        self.version_known = self.version_known.max(ann.version);
        match self.status {
            Status::Honest => {
                if ann.version > self.version() {
                    self.update_sources.insert(from, ann.version);
                    self.maybe_pull(ctx, out);
                }
            }
            Status::Blank => {
                if ann.version > self.version() {
                    self.update_sources.insert(from, ann.version);
                }
                let theta = ctx.params.theta;
                let busy = self.inbound.as_ref().is_some_and(|i| i.busy(ctx.now, theta));
                if ann.version >= self.version() && !busy {
                    self.send_request(Some(from), ctx, out);
                }
            }
            Status::Corrupt => {}
        }
    }

    fn maybe_pull(&mut self, ctx: &mut Ctx, out: &mut Out) {
        if self.status != Status::Honest || self.inbound.is_some() {
            return;
        }
        let mine = self.version();
        self.update_sources.retain(|_, v| *v > mine);
        let Some(best) = self.update_sources.values().copied().max() else { return };
        let candidates: Vec<DeviceId> =
            self.update_sources.iter().filter(|(_, v)| **v == best).map(|(d, _)| *d).collect();
        let source = candidates[ctx.rng.gen_range(0..candidates.len())];
        let mut inb = Inbound::new(InboundKind::Pull, BTreeSet::new(), ctx.now);
        inb.tried.insert(source);
        self.inbound = Some(inb);
        self.send_request(Some(source), ctx, out);
    }

    fn retry_pull(&mut self, ctx: &mut Ctx, out: &mut Out) {
        let mine = self.version();
        let tried = &self.inbound.as_ref().expect("pull session").tried;
        let candidates: Vec<DeviceId> =
            self.update_sources.iter().filter(|(d, v)| **v > mine && !tried.contains(d)).map(|(d, _)| *d).collect();
        if candidates.is_empty() {
            // give up until someone announces again
            for d in tried.clone() {
                self.update_sources.remove(&d);
            }
            self.inbound = None;
            self.req_token += 1;
            return;
        }
        let source = candidates[ctx.rng.gen_range(0..candidates.len())];
        self.inbound.as_mut().expect("pull session").tried.insert(source);
        self.send_request(Some(source), ctx, out);
    }

    /// Operator installs a newer certified release directly on this device.
    /// Returns `None` if the device is corrupt and refuses the update.
    pub fn install_from_operator(&mut self, release: &StreamSignedImage, ctx: &mut Ctx) -> Option<Out> {
        let mut out = Vec::new();
        match self.status {
            Status::Corrupt => return None,
            _ if release.version() <= self.version() => return Some(out),
            Status::Honest => {
                self.inbound = None;
                self.req_token += 1;
                self.install_release(release.clone(), &mut out);
                let msg = self.send(Payload::UpdateAnnounce(self.announcement()));
                out.push(Action::Broadcast(msg));
            }
            Status::Blank => {
                let req_seq = self.inbound.as_ref().map_or(0, |i| i.req_seq);
                self.inbound = None;
                self.req_token += 1;
                self.install_release(release.clone(), &mut out);
                self.on_recovered(req_seq, ctx, &mut out);
            }
        }
        Some(out)
    }
}

/// Trusted one-time exchange of shared keys between two devices in range.
pub fn rendezvous(a: &mut DeviceState, b: &mut DeviceState, verifier: &OperatorVerifier) -> Result<(), ProtocolError> {
    for d in [&*a, &*b] {
        if !verifier.verify(&d.identity.cert, &identity_payload(d.id, &d.identity.public)) {
            return Err(ProtocolError::BadIdentity(d.id));
        }
    }
    a.neighbors
        .entry(b.id)
        .or_insert_with(|| NeighborEntry { key: b.shared.clone(), window: ReplayWindow::new(b.seq) });
    b.neighbors
        .entry(a.id)
        .or_insert_with(|| NeighborEntry { key: a.shared.clone(), window: ReplayWindow::new(a.seq) });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::code_image::ApplicationImage;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        op: Operator,
        release: StreamSignedImage,
        params: ProtocolParams,
        rng: ChaCha8Rng,
    }

    fn fixture() -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let op = Operator::random(1, &mut rng);
        let img = ApplicationImage::random(5, 1, 16 * 64, 64, &mut rng).unwrap();
        let release = build_stream_chain(img, &op).unwrap();
        Fixture { op, release, params: ProtocolParams::default(), rng }
    }

    impl Fixture {
        fn device(&mut self, id: u32) -> DeviceState {
            DeviceState::provision(DeviceId(id), DeviceClass::Lr, &self.release, &self.op, &self.params, &mut self.rng)
        }
    }

    fn ctx<'a>(f: &'a mut Fixture, v: &'a OperatorVerifier, now: f64) -> Ctx<'a> {
        Ctx { now, params: &f.params, verifier: v, rng: &mut f.rng }
    }

    fn msgs(out: &[Action]) -> Vec<Arc<Message>> {
        out.iter()
            .filter_map(|a| match a {
                Action::Broadcast(m) | Action::Unicast { msg: m, .. } => Some(m.clone()),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn clean_selfcheck_relaxes_rate() {
        let mut f = fixture();
        let v = f.op.verifier();
        let mut d = f.device(0);
        d.on_selfcheck(&mut ctx(&mut f, &v, 0.0));
        assert!((d.lambda() - 1.0 / 101.0).abs() < 1e-15);
        d.lambda = f.params.lambda_min;
        d.on_selfcheck(&mut ctx(&mut f, &v, 0.0));
        assert_eq!(d.lambda(), f.params.lambda_min);
    }

    #[test]
    fn tampered_selfcheck_goes_blank_and_requests() {
        let mut f = fixture();
        let v = f.op.verifier();
        let mut d = f.device(0);
        let mut n = f.device(1);
        rendezvous(&mut d, &mut n, &v).unwrap();
        d.lambda = 1.0 / 300.0;
        let bad = corrupt_chunks(d.image(), &[2, 7].into(), &mut f.rng).unwrap();
        *d.signed.image_mut() = bad;
        d.status = Status::Corrupt;
        let out = d.on_selfcheck(&mut ctx(&mut f, &v, 0.0));
        assert_eq!(d.status(), Status::Blank);
        assert_eq!(d.lambda(), f.params.lambda_max);
        let pi = d.pending_pi().unwrap();
        assert!(pi.is_subset(&[2, 7].into()) && !pi.is_empty());
        let m = msgs(&out);
        assert!(matches!(&m[0].payload, Payload::Req(r) if r.ttl == 1 && r.degree == 1 && r.q == m[0].seq));
        // blank devices ignore their own self-check timer
        assert!(d.on_selfcheck(&mut ctx(&mut f, &v, 1.0)).is_empty());
    }

    #[test]
    fn warnings_are_deduplicated_and_forwarded() {
        let mut f = fixture();
        f.params.ttl = 4;
        let v = f.op.verifier();
        let mut a = f.device(0);
        let mut b = f.device(1);
        rendezvous(&mut a, &mut b, &v).unwrap();
        b.lambda = 1.0 / 150.0;
        let warn = a.send(Payload::Warn { ttl: 4, origin: DeviceId(9), origin_seq: 3 });
        let out = b.on_message(&warn, &mut ctx(&mut f, &v, 0.0));
        assert_eq!(b.lambda(), f.params.lambda_max);
        assert!(matches!(&msgs(&out)[0].payload, Payload::Warn { ttl: 3, .. }));
        b.lambda = 1.0 / 400.0;
        let again = a.send(Payload::Warn { ttl: 4, origin: DeviceId(9), origin_seq: 3 });
        assert!(b.on_message(&again, &mut ctx(&mut f, &v, 0.0)).is_empty());
        assert_eq!(b.lambda(), 1.0 / 400.0);
        // replaying the original envelope changes nothing either
        assert!(b.on_message(&warn, &mut ctx(&mut f, &v, 0.0)).is_empty());
    }

    #[test]
    fn rendezvous_is_idempotent_and_checks_identity() {
        let mut f = fixture();
        let v = f.op.verifier();
        let mut a = f.device(0);
        let mut b = f.device(1);
        rendezvous(&mut a, &mut b, &v).unwrap();
        rendezvous(&mut a, &mut b, &v).unwrap();
        assert_eq!(a.neighbor_ids().collect::<Vec<_>>(), vec![DeviceId(1)]);
        assert!(b.is_neighbor(DeviceId(0)));
        let mut c = f.device(2);
        c.identity.public = Digest([1; 16]);
        assert_eq!(rendezvous(&mut a, &mut c, &v), Err(ProtocolError::BadIdentity(DeviceId(2))));
        assert!(!a.is_neighbor(DeviceId(2)));
    }

    #[test]
    fn missed_localization_escalates_to_full_image() {
        let mut f = fixture();
        let v = f.op.verifier();
        let mut d = f.device(0);
        let mut n = f.device(1);
        rendezvous(&mut d, &mut n, &v).unwrap();
        let bad = corrupt_chunks(d.image(), &[3].into(), &mut f.rng).unwrap();
        *d.signed.image_mut() = bad;
        // rig the filter so the tampered chunk tests present
        d.filter = build_filter(d.image(), &d.bloom_keys, f.params.bloom_mu).unwrap();
        d.status = Status::Corrupt;
        let out = d.on_selfcheck(&mut ctx(&mut f, &v, 0.0));
        let m = msgs(&out);
        match &m[0].payload {
            Payload::Req(r) => assert_eq!(r.pi.len(), 16),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_devices_drop_requests() {
        let mut f = fixture();
        let v = f.op.verifier();
        let mut a = f.device(0);
        let mut b = f.device(1);
        rendezvous(&mut a, &mut b, &v).unwrap();
        assert!(b.corrupt(4, &mut f.rng).is_some());
        assert!(b.corrupt(4, &mut f.rng).is_none());
        let req = a.send(Payload::Req(Request { ttl: 1, q: 1, degree: 1, version: 1, app: 5, pi: Arc::from([0u32]) }));
        assert!(b.on_message(&req, &mut ctx(&mut f, &v, 0.0)).is_empty());
        assert_eq!(b.pending_responses(), 0);
    }

    #[test]
    fn forged_announcement_ignored() {
        let mut f = fixture();
        let v = f.op.verifier();
        let mut a = f.device(0);
        let mut b = f.device(1);
        rendezvous(&mut a, &mut b, &v).unwrap();
        let forger = Operator::random(1, &mut f.rng);
        let ann = Announcement { app: 5, version: 9, cert: forger.sign(&version_payload(5, 9)) };
        let m = a.send(Payload::UpdateAnnounce(ann));
        assert!(b.on_message(&m, &mut ctx(&mut f, &v, 0.0)).is_empty());
        assert_eq!(b.version_known(), 1);
        assert!(!b.is_pulling());
    }
}
