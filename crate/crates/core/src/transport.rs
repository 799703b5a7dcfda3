//! In-process message passing between simulated nodes and devices.
//!
//! Every component that talks to another one (device tables, device workers,
//! memory tiers) owns an [`Endpoint`] with a mailbox. Sends never block the
//! sender; delivery is exactly-once and FIFO per `(src, dst, kind)` channel.
//! An optional [`LatencyModel`] holds a message back until its delivery time.
//! Each endpoint keeps a Lamport clock that is stamped on outgoing envelopes
//! and merged on receipt.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};
use serde::Serialize;
use thiserror::Error;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize)]
pub struct Endpoint {
    pub node: u32,
    pub device: Option<u32>,
}

impl Endpoint {
    pub fn device(node: u32, device: u32) -> Self {
        Endpoint { node, device: Some(device) }
    }

    pub fn mem(node: u32) -> Self {
        Endpoint { node, device: None }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.device {
            Some(d) => write!(f, "n{}d{}", self.node, d),
            None => write!(f, "n{}mem", self.node),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize)]
pub enum MessageKind {
    ParamPullReq,
    ParamPullResp,
    Accum,
    SyncExchange,
    MemPullReq,
    MemPullResp,
}

impl MessageKind {
    pub const ALL: [MessageKind; 6] = [
        MessageKind::ParamPullReq,
        MessageKind::ParamPullResp,
        MessageKind::Accum,
        MessageKind::SyncExchange,
        MessageKind::MemPullReq,
        MessageKind::MemPullResp,
    ];
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("endpoint {0} is not registered")]
    Unregistered(Endpoint),
    #[error("timed out waiting for {kind:?} at {at}")]
    Timeout { at: Endpoint, kind: MessageKind },
    #[error("transport is shut down")]
    Closed,
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, TransportError::Timeout { .. })
    }
}

/// Delivery delay: `constant + bytes * per_byte`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LatencyModel {
    pub constant: Duration,
    pub per_byte_nanos: f64,
}

impl LatencyModel {
    pub fn constant(d: Duration) -> Self {
        LatencyModel { constant: d, per_byte_nanos: 0.0 }
    }

    pub fn delay_for(&self, bytes: usize) -> Duration {
        self.constant + Duration::from_nanos((self.per_byte_nanos * bytes as f64) as u64)
    }

    fn is_zero(&self) -> bool {
        self.constant.is_zero() && self.per_byte_nanos == 0.0
    }
}

#[derive(Debug)]
struct CompletionState {
    done: Mutex<bool>,
    cv: Condvar,
}

/// Completes once the receiver has consumed (dropped) the envelope.
#[derive(Clone, Debug)]
pub struct DeliveryHandle {
    state: Arc<CompletionState>,
}

impl DeliveryHandle {
    pub fn wait(&self) {
        let mut done = self.state.done.lock();
        while !*done {
            self.state.cv.wait(&mut done);
        }
    }

    pub fn is_complete(&self) -> bool {
        *self.state.done.lock()
    }
}

pub struct Envelope {
    pub src: Endpoint,
    pub dst: Endpoint,
    pub kind: MessageKind,
    /// Correlation id or collective round tag.
    pub tag: u64,
    pub payload: Vec<u8>,
    /// Sender's Lamport clock at send.
    pub timestamp: u64,
    pub sent_at: Instant,
    pub received_at: Option<Instant>,
    seq: u64,
    deliver_at: Instant,
    completion: Arc<CompletionState>,
}

impl fmt::Debug for Envelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Envelope")
            .field("src", &self.src)
            .field("dst", &self.dst)
            .field("kind", &self.kind)
            .field("tag", &self.tag)
            .field("bytes", &self.payload.len())
            .field("timestamp", &self.timestamp)
            .finish()
    }
}

impl Drop for Envelope {
    fn drop(&mut self) {
        *self.completion.done.lock() = true;
        self.completion.cv.notify_all();
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ChannelStats {
    pub messages: u64,
    pub bytes: u64,
}

/// One step of a collective: all `SyncExchange` messages sharing a tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RoundRecord {
    pub tag: u64,
    pub messages: u64,
    pub bytes: u64,
    pub inter_node: bool,
    pub intra_node: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Counters {
    pub sent: u64,
    pub received: u64,
    pub by_kind: BTreeMap<MessageKind, ChannelStats>,
    pub channels: BTreeMap<(Endpoint, Endpoint, MessageKind), ChannelStats>,
    pub sync_rounds: Vec<RoundRecord>,
}

impl Counters {
    pub fn in_flight(&self) -> u64 {
        self.sent - self.received
    }

    pub fn kind(&self, kind: MessageKind) -> ChannelStats {
        self.by_kind.get(&kind).copied().unwrap_or_default()
    }

    pub fn inter_node_rounds(&self) -> usize {
        self.sync_rounds.iter().filter(|r| r.inter_node).count()
    }

    pub fn intra_node_rounds(&self) -> usize {
        self.sync_rounds.iter().filter(|r| r.intra_node).count()
    }
}

#[derive(Default)]
struct CounterState {
    sent: u64,
    received: u64,
    by_kind: BTreeMap<MessageKind, ChannelStats>,
    channels: BTreeMap<(Endpoint, Endpoint, MessageKind), ChannelStats>,
    rounds: BTreeMap<u64, RoundRecord>,
}

#[derive(Default)]
struct MailboxState {
    queues: HashMap<(Endpoint, MessageKind), VecDeque<Envelope>>,
    last_delivery: HashMap<(Endpoint, MessageKind), Instant>,
}

struct Mailbox {
    state: Mutex<MailboxState>,
    cv: Condvar,
    clock: AtomicU64,
}

/// Which messages a receive accepts.
#[derive(Clone, Copy, Debug)]
pub struct RecvFilter {
    pub kind: MessageKind,
    pub src: Option<Endpoint>,
    pub tag: Option<u64>,
}

impl RecvFilter {
    pub fn kind(kind: MessageKind) -> Self {
        RecvFilter { kind, src: None, tag: None }
    }

    pub fn from(mut self, src: Endpoint) -> Self {
        self.src = Some(src);
        self
    }

    pub fn tagged(mut self, tag: u64) -> Self {
        self.tag = Some(tag);
        self
    }
}

/// Timeout and retry schedule for request/response exchanges.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetryPolicy {
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            timeout: Duration::from_secs(30),
            max_retries: 3,
            backoff: Duration::from_millis(10),
        }
    }
}

pub struct Transport {
    latency: LatencyModel,
    next_tag: AtomicU64,
    mailboxes: RwLock<HashMap<Endpoint, Arc<Mailbox>>>,
    counters: Mutex<CounterState>,
    seq: AtomicU64,
    closed: AtomicBool,
}

impl Transport {
    pub fn new(latency: LatencyModel) -> Arc<Self> {
        Arc::new(Transport {
            latency,
            mailboxes: RwLock::new(HashMap::new()),
            counters: Mutex::new(CounterState::default()),
            seq: AtomicU64::new(0),
            next_tag: AtomicU64::new(1),
            closed: AtomicBool::new(false),
        })
    }

    pub fn register(&self, ep: Endpoint) {
        self.mailboxes.write().entry(ep).or_insert_with(|| {
            Arc::new(Mailbox {
                state: Mutex::new(MailboxState::default()),
                cv: Condvar::new(),
                clock: AtomicU64::new(0),
            })
        });
    }

    fn mailbox(&self, ep: Endpoint) -> Result<Arc<Mailbox>, TransportError> {
        self.mailboxes
            .read()
            .get(&ep)
            .cloned()
            .ok_or(TransportError::Unregistered(ep))
    }

    /// Lamport clock of an endpoint.
    pub fn clock(&self, ep: Endpoint) -> Result<u64, TransportError> {
        Ok(self.mailbox(ep)?.clock.load(Ordering::SeqCst))
    }

    pub fn send(
        &self,
        src: Endpoint,
        dst: Endpoint,
        kind: MessageKind,
        tag: u64,
        payload: Vec<u8>,
    ) -> Result<DeliveryHandle, TransportError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(TransportError::Closed);
        }
        let src_box = self.mailbox(src)?;
        let dst_box = self.mailbox(dst)?;
        let timestamp = src_box.clock.fetch_add(1, Ordering::SeqCst) + 1;
        let bytes = payload.len() as u64;
        let now = Instant::now();
        let completion = Arc::new(CompletionState {
            done: Mutex::new(false),
            cv: Condvar::new(),
        });
        let handle = DeliveryHandle { state: completion.clone() };

        {
            let mut c = self.counters.lock();
            c.sent += 1;
            let k = c.by_kind.entry(kind).or_default();
            k.messages += 1;
            k.bytes += bytes;
            let ch = c.channels.entry((src, dst, kind)).or_default();
            ch.messages += 1;
            ch.bytes += bytes;
            if kind == MessageKind::SyncExchange {
                let r = c.rounds.entry(tag).or_insert(RoundRecord {
                    tag,
                    messages: 0,
                    bytes: 0,
                    inter_node: false,
                    intra_node: false,
                });
                r.messages += 1;
                r.bytes += bytes;
                if src.node == dst.node {
                    r.intra_node = true;
                } else {
                    r.inter_node = true;
                }
            }
        }

        let mut st = dst_box.state.lock();
        let mut deliver_at = now + self.latency.delay_for(payload.len());
        if !self.latency.is_zero() {
            // Keep the channel FIFO even when a later, smaller message would
            // otherwise overtake a larger one.
            let last = st.last_delivery.entry((src, kind)).or_insert(deliver_at);
            if *last > deliver_at {
                deliver_at = *last;
            }
            *last = deliver_at;
        }
        let env = Envelope {
            src,
            dst,
            kind,
            tag,
            payload,
            timestamp,
            sent_at: now,
            received_at: None,
            seq: self.seq.fetch_add(1, Ordering::SeqCst),
            deliver_at,
            completion,
        };
        st.queues.entry((src, kind)).or_default().push_back(env);
        drop(st);
        dst_box.cv.notify_all();
        Ok(handle)
    }

    pub fn recv(
        &self,
        at: Endpoint,
        filter: RecvFilter,
        timeout: Option<Duration>,
    ) -> Result<Envelope, TransportError> {
        let mbox = self.mailbox(at)?;
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut st = mbox.state.lock();
        loop {
            if self.closed.load(Ordering::SeqCst) {
                return Err(TransportError::Closed);
            }
            // Earliest-sent matching message over all channels.
            let mut best: Option<((Endpoint, MessageKind), usize, u64, Instant)> = None;
            for (&(src, kind), q) in st.queues.iter() {
                if kind != filter.kind || filter.src.is_some_and(|s| s != src) {
                    continue;
                }
                let pos = match filter.tag {
                    None => (!q.is_empty()).then_some(0),
                    Some(t) => q.iter().position(|e| e.tag == t),
                };
                if let Some(pos) = pos {
                    let e = &q[pos];
                    if best.as_ref().is_none_or(|b| e.seq < b.2) {
                        best = Some(((src, kind), pos, e.seq, e.deliver_at));
                    }
                }
            }
            let now = Instant::now();
            match best {
                Some((chan, pos, _, deliver_at)) if deliver_at <= now => {
                    let mut env = st.queues.get_mut(&chan).unwrap().remove(pos).unwrap();
                    drop(st);
                    env.received_at = Some(Instant::now());
                    let ts = env.timestamp;
                    let _ = mbox
                        .clock
                        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |c| Some(c.max(ts) + 1));
                    self.counters.lock().received += 1;
                    return Ok(env);
                }
                Some((_, _, _, deliver_at)) => {
                    let until = deadline.map_or(deliver_at, |d| d.min(deliver_at));
                    if deadline.is_some_and(|d| d <= now) {
                        return Err(TransportError::Timeout { at, kind: filter.kind });
                    }
                    mbox.cv.wait_until(&mut st, until);
                }
                None => match deadline {
                    Some(d) => {
                        if d <= now {
                            return Err(TransportError::Timeout { at, kind: filter.kind });
                        }
                        mbox.cv.wait_until(&mut st, d);
                    }
                    None => mbox.cv.wait(&mut st),
                },
            }
        }
    }

    /// A tag no other caller of this method will receive.
    pub fn fresh_tag(&self) -> u64 {
        self.next_tag.fetch_add(1, Ordering::Relaxed)
    }

    /// Send a request and wait for the response carrying the same tag,
    /// re-sending with a fresh tag after each timeout.
    pub fn call(
        &self,
        src: Endpoint,
        dst: Endpoint,
        kinds: (MessageKind, MessageKind),
        payload: Vec<u8>,
        policy: RetryPolicy,
    ) -> Result<Envelope, TransportError> {
        let (req, resp) = kinds;
        let mut backoff = policy.backoff;
        let mut attempt = 0;
        loop {
            let tag = self.fresh_tag();
            self.send(src, dst, req, tag, payload.clone())?;
            match self.recv(src, RecvFilter::kind(resp).from(dst).tagged(tag), Some(policy.timeout)) {
                Err(e) if e.is_retryable() && attempt < policy.max_retries => {
                    attempt += 1;
                    log::warn!("{req:?} {src} -> {dst} timed out, retry {attempt}/{}", policy.max_retries);
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
                other => return other,
            }
        }
    }

    pub fn counters(&self) -> Counters {
        let c = self.counters.lock();
        Counters {
            sent: c.sent,
            received: c.received,
            by_kind: c.by_kind.clone(),
            channels: c.channels.clone(),
            sync_rounds: c.rounds.values().copied().collect(),
        }
    }

    /// Wakes every blocked receiver with [`TransportError::Closed`] and drops
    /// undelivered messages.
    pub fn shutdown(&self) {
        self.closed.store(true, Ordering::SeqCst);
        let boxes: Vec<Arc<Mailbox>> = self.mailboxes.read().values().cloned().collect();
        for b in boxes {
            let drained: Vec<Envelope> = {
                let mut st = b.state.lock();
                st.queues.drain().flat_map(|(_, q)| q).collect()
            };
            drop(drained);
            b.cv.notify_all();
        }
    }

    pub fn is_shut_down(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair() -> (Arc<Transport>, Endpoint, Endpoint) {
        let t = Transport::new(LatencyModel::default());
        let (a, b) = (Endpoint::device(0, 0), Endpoint::device(0, 1));
        t.register(a);
        t.register(b);
        (t, a, b)
    }

    #[test]
    fn payload_round_trips() {
        let (t, a, b) = pair();
        t.send(a, b, MessageKind::Accum, 9, vec![1, 2, 3, 255]).unwrap();
        let env = t.recv(b, RecvFilter::kind(MessageKind::Accum), None).unwrap();
        assert_eq!(env.payload, vec![1, 2, 3, 255]);
        assert_eq!((env.src, env.tag), (a, 9));
    }

    #[test]
    fn channel_is_fifo() {
        let (t, a, b) = pair();
        for i in 0..10u8 {
            t.send(a, b, MessageKind::Accum, 0, vec![i]).unwrap();
        }
        for i in 0..10u8 {
            let env = t.recv(b, RecvFilter::kind(MessageKind::Accum), None).unwrap();
            assert_eq!(env.payload, vec![i]);
        }
    }

    #[test]
    fn delay_is_applied() {
        let t = Transport::new(LatencyModel::constant(Duration::from_millis(5)));
        let (a, b) = (Endpoint::mem(0), Endpoint::mem(1));
        t.register(a);
        t.register(b);
        t.send(a, b, MessageKind::MemPullReq, 0, vec![]).unwrap();
        let env = t.recv(b, RecvFilter::kind(MessageKind::MemPullReq), None).unwrap();
        assert!(env.received_at.unwrap() >= env.sent_at + Duration::from_millis(5));
    }

    #[test]
    fn per_byte_delay_keeps_fifo() {
        let t = Transport::new(LatencyModel {
            constant: Duration::ZERO,
            per_byte_nanos: 20_000.0,
        });
        let (a, b) = (Endpoint::mem(0), Endpoint::mem(1));
        t.register(a);
        t.register(b);
        t.send(a, b, MessageKind::MemPullResp, 0, vec![0; 200]).unwrap();
        t.send(a, b, MessageKind::MemPullResp, 1, vec![]).unwrap();
        let first = t.recv(b, RecvFilter::kind(MessageKind::MemPullResp), None).unwrap();
        assert_eq!(first.tag, 0);
    }

    #[test]
    fn fresh_counters_are_zero_and_monotone() {
        let (t, a, b) = pair();
        let c0 = t.counters();
        assert_eq!((c0.sent, c0.received, c0.channels.len()), (0, 0, 0));
        let mut last = 0;
        for _ in 0..5 {
            t.send(a, b, MessageKind::ParamPullReq, 0, vec![0; 8]).unwrap();
            let c = t.counters();
            assert!(c.sent > last);
            last = c.sent;
        }
        assert_eq!(t.counters().kind(MessageKind::ParamPullReq).bytes, 40);
    }

    #[test]
    fn unregistered_endpoint_is_an_error() {
        let (t, a, _) = pair();
        let ghost = Endpoint::device(7, 7);
        assert_eq!(
            t.send(a, ghost, MessageKind::Accum, 0, vec![]).unwrap_err(),
            TransportError::Unregistered(ghost)
        );
    }

    #[test]
    fn timeout_is_retryable() {
        let (t, a, _) = pair();
        let err = t
            .recv(a, RecvFilter::kind(MessageKind::Accum), Some(Duration::from_millis(5)))
            .unwrap_err();
        assert!(err.is_retryable());
    }

    #[test]
    fn delivery_handle_completes_after_consumption() {
        let (t, a, b) = pair();
        let h = t.send(a, b, MessageKind::Accum, 0, vec![]).unwrap();
        assert!(!h.is_complete());
        let env = t.recv(b, RecvFilter::kind(MessageKind::Accum), None).unwrap();
        assert!(!h.is_complete());
        drop(env);
        h.wait();
    }

    #[test]
    fn lamport_clock_advances_past_sender() {
        let (t, a, b) = pair();
        for _ in 0..4 {
            t.send(a, a, MessageKind::Accum, 0, vec![]).unwrap();
        }
        t.send(a, b, MessageKind::Accum, 0, vec![]).unwrap();
        let env = t.recv(b, RecvFilter::kind(MessageKind::Accum), None).unwrap();
        assert_eq!(env.timestamp, 5);
        assert!(t.clock(b).unwrap() > env.timestamp);
    }

    #[test]
    fn call_retries_after_timeout() {
        let (t, a, b) = pair();
        let policy = RetryPolicy {
            timeout: Duration::from_millis(20),
            max_retries: 2,
            backoff: Duration::from_millis(1),
        };
        std::thread::scope(|s| {
            s.spawn(|| {
                // Ignore the first request so the caller has to retry.
                let first = t.recv(b, RecvFilter::kind(MessageKind::MemPullReq), None).unwrap();
                drop(first);
                let req = t.recv(b, RecvFilter::kind(MessageKind::MemPullReq), None).unwrap();
                t.send(b, a, MessageKind::MemPullResp, req.tag, vec![42]).unwrap();
            });
            let resp = t
                .call(a, b, (MessageKind::MemPullReq, MessageKind::MemPullResp), vec![], policy)
                .unwrap();
            assert_eq!(resp.payload, vec![42]);
        });
        let err = t
            .call(a, b, (MessageKind::MemPullReq, MessageKind::MemPullResp), vec![], policy)
            .unwrap_err();
        assert!(err.is_retryable());
    }

    #[test]
    fn shutdown_wakes_receivers() {
        let (t, a, _) = pair();
        let t2 = t.clone();
        let h = std::thread::spawn(move || t2.recv(a, RecvFilter::kind(MessageKind::Accum), None));
        std::thread::sleep(Duration::from_millis(20));
        t.shutdown();
        assert_eq!(h.join().unwrap().unwrap_err(), TransportError::Closed);
    }

    #[test]
    fn stress_exactly_once_fifo_and_conservation() {
        let t = Transport::new(LatencyModel::default());
        let n = 6u32;
        let eps: Vec<Endpoint> = (0..n).map(|i| Endpoint::device(i / 2, i % 2)).collect();
        for &e in &eps {
            t.register(e);
        }
        let per_sender = 300u64;
        std::thread::scope(|s| {
            for (i, &src) in eps.iter().enumerate() {
                let t = &t;
                let eps = &eps;
                s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                    let mut seqs = vec![0u64; eps.len()];
                    for _ in 0..per_sender {
                        let d = rng.random_range(0..eps.len());
                        t.send(src, eps[d], MessageKind::Accum, seqs[d], vec![i as u8]).unwrap();
                        seqs[d] += 1;
                        if rng.random_bool(0.1) {
                            std::thread::yield_now();
                        }
                    }
                });
            }
        });
        let c = t.counters();
        assert_eq!(c.sent, n as u64 * per_sender);
        assert_eq!(c.in_flight(), c.sent);
        let mut total = 0;
        for &dst in &eps {
            let mut next: HashMap<Endpoint, u64> = HashMap::new();
            while let Ok(env) = t.recv(
                dst,
                RecvFilter::kind(MessageKind::Accum),
                Some(Duration::from_millis(1)),
            ) {
                let expect = next.entry(env.src).or_insert(0);
                assert_eq!(env.tag, *expect, "FIFO violated on {} -> {}", env.src, dst);
                *expect += 1;
                total += 1;
                let c = t.counters();
                assert_eq!(c.sent, c.received + c.in_flight());
            }
        }
        assert_eq!(total, n as u64 * per_sender);
        assert_eq!(t.counters().in_flight(), 0);
    }
}
