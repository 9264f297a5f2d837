use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use selfheal::adversary::AdversaryConfig;
use selfheal::code_image::{build_stream_chain, ApplicationImage, Operator, OperatorVerifier, SecretKey, StreamSignedImage};
use selfheal::engine::{run, Scenario, TopologySpec, UpdateSchedule};
use selfheal::protocol::*;
use selfheal::topology::{DeviceClass, DeviceId, Topology};

struct Bench {
    params: ProtocolParams,
    verifier: OperatorVerifier,
    rng: ChaCha8Rng,
    devices: Vec<DeviceState>,
}

impl Bench {
    /// Device 0 linked to each of `leaves` others.
    fn star(leaves: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let op = Operator::random(1, &mut rng);
        let img = ApplicationImage::random(1, 1, 8 * 64, 64, &mut rng).unwrap();
        let release: StreamSignedImage = build_stream_chain(img, &op).unwrap();
        let params = ProtocolParams::default();
        let verifier = op.verifier();
        let mut devices: Vec<DeviceState> = (0..=leaves as u32)
            .map(|i| DeviceState::provision(DeviceId(i), DeviceClass::Lr, &release, &op, &params, &mut rng))
            .collect();
        for i in 1..=leaves {
            let (lo, hi) = devices.split_at_mut(i);
            rendezvous(&mut lo[0], &mut hi[0], &verifier).unwrap();
        }
        Bench { params, verifier, rng, devices }
    }

    fn ctx_run<T>(&mut self, i: usize, f: impl FnOnce(&mut DeviceState, &mut Ctx) -> T) -> T {
        let mut ctx = Ctx { now: 0.0, params: &self.params, verifier: &self.verifier, rng: &mut self.rng };
        f(&mut self.devices[i], &mut ctx)
    }

    fn deliver(&mut self, to: usize, msg: &Message) -> Vec<Action> {
        self.ctx_run(to, |d, c| d.on_message(msg, c))
    }

    fn timer(&mut self, at: usize, t: Timer) -> Vec<Action> {
        self.ctx_run(at, |d, c| d.on_timer(t, c))
    }
}

fn broadcasts(actions: &[Action]) -> Vec<Arc<Message>> {
    actions.iter().filter_map(|a| if let Action::Broadcast(m) = a { Some(m.clone()) } else { None }).collect()
}

fn unicasts(actions: &[Action]) -> Vec<(DeviceId, Arc<Message>)> {
    actions
        .iter()
        .filter_map(|a| if let Action::Unicast { to, msg } = a { Some((*to, msg.clone())) } else { None })
        .collect()
}

fn backoff_timer(actions: &[Action]) -> Option<Timer> {
    actions.iter().find_map(|a| match a {
        Action::SetTimer { timer: t @ Timer::Backoff { .. }, .. } => Some(*t),
        _ => None,
    })
}

/// Corrupts device 0 and returns its request.
fn blank_center(b: &mut Bench) -> Arc<Message> {
    b.ctx_run(0, |d, _| d.corrupt(2, &mut ChaCha8Rng::seed_from_u64(5))).unwrap();
    let out = b.ctx_run(0, |d, c| d.on_selfcheck(c));
    assert_eq!(b.devices[0].status(), Status::Blank);
    broadcasts(&out).into_iter().find(|m| m.kind() == MessageKind::Req).expect("request broadcast")
}

#[test]
fn same_slot_responders_get_one_ack() {
    let mut b = Bench::star(2, 1);
    let req = blank_center(&mut b);
    let t1 = backoff_timer(&b.deliver(1, &req)).unwrap();
    let t2 = backoff_timer(&b.deliver(2, &req)).unwrap();
    let f1 = unicasts(&b.timer(1, t1));
    let f2 = unicasts(&b.timer(2, t2));
    assert_eq!(f1[0].1.kind(), MessageKind::ChunkFirst);
    assert_eq!(f2[0].1.kind(), MessageKind::ChunkFirst);
    let mut acks = 0;
    for m in [&f1[0].1, &f2[0].1] {
        acks += unicasts(&b.deliver(0, m)).iter().filter(|(_, m)| m.kind() == MessageKind::ChunkAck).count();
    }
    assert_eq!(acks, 1);
}

#[test]
fn done_cancels_pending_backoff() {
    let mut b = Bench::star(2, 2);
    let req = blank_center(&mut b);
    let t1 = backoff_timer(&b.deliver(1, &req)).unwrap();
    let t2 = backoff_timer(&b.deliver(2, &req)).unwrap();
    let first = unicasts(&b.timer(1, t1)).remove(0).1;
    let ack = unicasts(&b.deliver(0, &first)).remove(0).1;
    let mut to_center = unicasts(&b.deliver(1, &ack));
    let mut done = None;
    while let Some((_, m)) = to_center.pop() {
        let out = b.deliver(0, &m);
        done = done.or_else(|| broadcasts(&out).into_iter().find(|m| m.kind() == MessageKind::Done));
    }
    assert_eq!(b.devices[0].status(), Status::Honest);
    b.deliver(2, &done.expect("done broadcast"));
    assert!(unicasts(&b.timer(2, t2)).is_empty());
}

#[test]
fn replayed_request_changes_nothing() {
    let mut b = Bench::star(1, 3);
    let req = blank_center(&mut b);
    assert!(backoff_timer(&b.deliver(1, &req)).is_some());
    let before = (b.devices[1].lambda(), b.devices[1].pending_responses());
    assert!(b.deliver(1, &req).iter().all(|a| !matches!(a, Action::SetTimer { .. })));
    assert_eq!((b.devices[1].lambda(), b.devices[1].pending_responses()), before);
}

#[test]
fn forged_tag_is_dropped() {
    let mut b = Bench::star(1, 4);
    let req = blank_center(&mut b);
    let forged = Message::sign(req.sender, req.seq, req.payload.clone(), &SecretKey::from_bytes([7; 16]));
    assert!(backoff_timer(&b.deliver(1, &forged)).is_none());
}

#[test]
fn corrupt_neighbor_ignores_requests() {
    let mut b = Bench::star(1, 5);
    b.ctx_run(1, |d, _| d.corrupt(2, &mut ChaCha8Rng::seed_from_u64(1))).unwrap();
    let req = blank_center(&mut b);
    assert!(b.deliver(1, &req).is_empty());
}

proptest! {
    #[test]
    fn lambda_stays_in_bounds(ops in proptest::collection::vec((any::<bool>(), 0u32..5), 0..200)) {
        let (lo, hi) = (DEFAULT_LAMBDA_MIN, DEFAULT_LAMBDA_MAX);
        let mut l = hi;
        for (relax, ttl) in ops {
            l = if relax { relaxed_rate(l, lo) } else { warned_rate(l, ttl, hi) };
            prop_assert!(l >= lo && l <= hi);
        }
    }

    #[test]
    fn replay_window_never_accepts_twice(seqs in proptest::collection::vec(1u64..300, 1..200)) {
        let mut w = ReplayWindow::new(0);
        let mut accepted = std::collections::BTreeSet::new();
        for s in seqs {
            if w.accept(s) {
                prop_assert!(accepted.insert(s));
            }
        }
    }

    #[test]
    fn backoff_lands_in_its_epoch(delta in 0u32..4, degree in 1u32..20, gap in 0u32..6, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let t = compute_backoff(delta, 1.0, degree, 10 + gap, 10, &mut r).unwrap();
        let epoch = delta.saturating_sub(gap) as f64;
        prop_assert!(t >= epoch * degree as f64 && t < (epoch + 1.0) * degree as f64);
        prop_assert_eq!(t.fract(), 0.0);
    }
}

#[test]
fn backoff_slots_are_uniform() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let mut counts = [0u32; 5];
    let n = 50_000;
    for _ in 0..n {
        counts[compute_backoff(1, 1.0, 5, 2, 2, &mut r).unwrap() as usize - 5] += 1;
    }
    let e = n as f64 / 5.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    // 4 degrees of freedom, 99.9% quantile
    assert!(chi2 < 18.47, "{chi2}");
}

fn fixed(t: Topology) -> TopologySpec {
    TopologySpec::Fixed(Arc::new(t))
}

#[test]
fn update_walks_down_a_chain() {
    let sc = Scenario {
        topology: fixed(Topology::path(5).unwrap()),
        update: Some(UpdateSchedule { at: 1.0, retry_interval: 5.0, target: Some(DeviceId(0)) }),
        duration: 200.0,
        ..Default::default()
    };
    let r = run(&sc, 1).unwrap();
    assert_eq!(r.timeline.samples.last().unwrap().frac_updated, 1.0);
    let times: Vec<f64> = (0..5u32)
        .map(|i| r.stats.version_changes.iter().find(|v| v.1 == DeviceId(i) && v.2 == 2).unwrap().0)
        .collect();
    assert!(times.windows(2).all(|w| w[0] < w[1]), "{times:?}");
}

#[test]
fn blank_waits_for_corrupt_neighbor_then_corrects_fast() {
    // 0 - 1 - 2 with 0 and 1 corrupt: 0 can only heal through 1
    let sc = Scenario {
        topology: fixed(Topology::path(3).unwrap()),
        adversary: AdversaryConfig { initial: Some(vec![DeviceId(0), DeviceId(1)]), ..Default::default() },
        duration: 3000.0,
        ..Default::default()
    };
    let mut fast = 0;
    for seed in 0..40 {
        let r = run(&sc, seed).unwrap();
        let at = |d: u32, list: &[(f64, DeviceId)]| list.iter().find(|x| x.1 == DeviceId(d)).map(|x| x.0);
        let (rec0, rec1) = (at(0, &r.stats.recoveries).unwrap(), at(1, &r.stats.recoveries).unwrap());
        assert!(rec0 >= rec1);
        if at(0, &r.stats.detections).unwrap() < rec1 {
            // announcement lets the waiting device ask at once
            assert!(rec0 - rec1 < 5.0, "seed {seed}: {rec1} -> {rec0}");
            fast += 1;
        }
    }
    assert!(fast > 0);
}

#[test]
fn forged_announcement_changes_nothing() {
    let mut b = Bench::star(1, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let forger = Operator::random(1, &mut rng);
    let payload = selfheal::code_image::version_payload(1, 9);
    let ann = Announcement { app: 1, version: 9, cert: forger.sign(&payload) };
    // signed with a key device 1 does not share with device 0
    let msg = Message::sign(DeviceId(0), 1_000, Payload::UpdateAnnounce(ann), &SecretKey::from_bytes([1; 16]));
    assert!(b.deliver(1, &msg).is_empty());
    assert_eq!(b.devices[1].version_known(), 1);
    assert!(!b.devices[1].is_pulling());
}
