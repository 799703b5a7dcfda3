//! Device tier: per-device hash tables, key partitioning, accumulate, and the
//! hierarchical exchange that keeps replicas in step after every mini-batch.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};

use parking_lot::Mutex;
use thiserror::Error;

use crate::model::{DenseParams, ParamKey};
use crate::transport::{Endpoint, MessageKind, RecvFilter, RetryPolicy, Transport, TransportError};
use crate::wire::{Decoder, Encoder, WireError};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum HbmError {
    #[error("table of capacity {capacity} cannot hold {wanted} keys at load factor {LOAD_FACTOR}")]
    CapacityOverflow { capacity: usize, wanted: usize },
    #[error("key {0} inserted twice")]
    DuplicateKey(ParamKey),
    #[error("key {0} is not in any device table")]
    MissingKey(ParamKey),
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("value for {key} has width {got}, expected {want}")]
    Width { key: ParamKey, got: usize, want: usize },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("malformed message: {0}")]
    Wire(#[from] WireError),
}

pub type Result<T, E = HbmError> = std::result::Result<T, E>;

pub const LOAD_FACTOR: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Topology {
    pub num_nodes: u32,
    pub devices_per_node: u32,
}

impl Topology {
    pub fn new(num_nodes: u32, devices_per_node: u32) -> Result<Self> {
        for (what, n) in [("node count", num_nodes), ("devices per node", devices_per_node)] {
            if n == 0 || !n.is_power_of_two() {
                return Err(HbmError::Topology(format!("{what} must be a power of two, got {n}")));
            }
        }
        Ok(Topology { num_nodes, devices_per_node })
    }

    pub fn replicas(&self) -> u32 {
        self.num_nodes * self.devices_per_node
    }

    /// Node-major replica index.
    pub fn replica(&self, node: u32, device: u32) -> u32 {
        node * self.devices_per_node + device
    }

    pub fn inter_rounds(&self) -> u32 {
        self.num_nodes.trailing_zeros()
    }

    pub fn intra_rounds(&self) -> u32 {
        self.devices_per_node.trailing_zeros()
    }

    pub fn register(&self, transport: &Transport) {
        for n in 0..self.num_nodes {
            transport.register(Endpoint::mem(n));
            for d in 0..self.devices_per_node {
                transport.register(Endpoint::device(n, d));
            }
        }
    }
}

/// Maps a key to the device slot that holds it on every node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PartitionPolicy {
    /// Global device `key mod (nodes × devices)`; its node component is
    /// `key mod nodes` and the local device is the quotient by `nodes`.
    Modulo,
    /// Global device `i` takes keys up to and including `upper[i]`; keys
    /// above the last bound go to the last device.
    Range { upper: Vec<u64> },
}

impl PartitionPolicy {
    pub fn global_device(&self, key: ParamKey, topo: Topology) -> u32 {
        match self {
            PartitionPolicy::Modulo => (key.0 % u64::from(topo.replicas())) as u32,
            PartitionPolicy::Range { upper } => {
                let i = upper.partition_point(|&u| u < key.0);
                (i.min(topo.replicas() as usize - 1)) as u32
            }
        }
    }

    pub fn node_of(&self, key: ParamKey, topo: Topology) -> u32 {
        self.global_device(key, topo) % topo.num_nodes
    }

    pub fn device_of(&self, key: ParamKey, topo: Topology) -> u32 {
        self.global_device(key, topo) / topo.num_nodes
    }
}

fn mix(key: u64) -> u64 {
    let mut z = key.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One replica's additive change to one key.
#[derive(Clone, Debug, PartialEq)]
pub struct Contribution {
    pub key: ParamKey,
    pub replica: u32,
    pub delta: Vec<f32>,
}

/// Fixed-capacity open-addressing table. Keys are inserted while the table
/// is exclusively owned; afterwards values are read and accumulated through
/// shared references with a lock per slot.
pub struct DeviceTable {
    width: usize,
    slots: Box<[Option<(ParamKey, Mutex<Vec<f32>>)>]>,
    len: usize,
    journal: Mutex<Vec<Contribution>>,
}

impl DeviceTable {
    pub fn capacity_for(n: usize) -> usize {
        ((n as f64 / LOAD_FACTOR).ceil() as usize).max(1).next_power_of_two()
    }

    pub fn with_capacity(capacity: usize, width: usize) -> Self {
        let capacity = capacity.max(1).next_power_of_two();
        DeviceTable {
            width,
            slots: (0..capacity).map(|_| None).collect(),
            len: 0,
            journal: Mutex::new(Vec::new()),
        }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn probe(&self, key: ParamKey) -> std::result::Result<usize, usize> {
        let mask = self.slots.len() - 1;
        let mut i = mix(key.0) as usize & mask;
        for _ in 0..self.slots.len() {
            match &self.slots[i] {
                None => return Err(i),
                Some((k, _)) if *k == key => return Ok(i),
                Some(_) => i = (i + 1) & mask,
            }
        }
        Err(usize::MAX)
    }

    pub fn insert(&mut self, key: ParamKey, value: Vec<f32>) -> Result<()> {
        if value.len() != self.width {
            return Err(HbmError::Width { key, got: value.len(), want: self.width });
        }
        if (self.len + 1) as f64 > LOAD_FACTOR * self.slots.len() as f64 {
            return Err(HbmError::CapacityOverflow { capacity: self.slots.len(), wanted: self.len + 1 });
        }
        match self.probe(key) {
            Ok(_) => Err(HbmError::DuplicateKey(key)),
            Err(i) => {
                self.slots[i] = Some((key, Mutex::new(value)));
                self.len += 1;
                Ok(())
            }
        }
    }

    pub fn contains(&self, key: ParamKey) -> bool {
        self.probe(key).is_ok()
    }

    pub fn get(&self, key: ParamKey) -> Option<Vec<f32>> {
        let i = self.probe(key).ok()?;
        Some(self.slots[i].as_ref().unwrap().1.lock().clone())
    }

    /// `value += delta`, atomically per key.
    pub fn accumulate(&self, key: ParamKey, delta: &[f32]) -> Result<()> {
        let i = self.probe(key).map_err(|_| HbmError::MissingKey(key))?;
        if delta.len() != self.width {
            return Err(HbmError::Width { key, got: delta.len(), want: self.width });
        }
        let mut v = self.slots[i].as_ref().unwrap().1.lock();
        for (a, d) in v.iter_mut().zip(delta) {
            *a += d;
        }
        Ok(())
    }

    /// All entries sorted by key.
    pub fn entries(&self) -> Vec<(ParamKey, Vec<f32>)> {
        let mut out: Vec<(ParamKey, Vec<f32>)> = self
            .slots
            .iter()
            .flatten()
            .map(|(k, v)| (*k, v.lock().clone()))
            .collect();
        out.sort_unstable_by_key(|e| e.0);
        out
    }

    pub fn keys(&self) -> Vec<ParamKey> {
        let mut out: Vec<ParamKey> = self.slots.iter().flatten().map(|(k, _)| *k).collect();
        out.sort_unstable();
        out
    }

    /// Record a contribution. In deterministic mode it is only staged and
    /// applied later in replica order; otherwise it is applied right away.
    pub fn record(&self, c: Contribution, deterministic: bool) -> Result<()> {
        if !deterministic {
            self.accumulate(c.key, &c.delta)?;
        } else if !self.contains(c.key) {
            return Err(HbmError::MissingKey(c.key));
        }
        self.journal.lock().push(c);
        Ok(())
    }

    pub fn take_journal(&self) -> Vec<Contribution> {
        std::mem::take(&mut *self.journal.lock())
    }

    /// Fold in contributions from other nodes and, in deterministic mode,
    /// the staged local ones. Contributions for keys this table does not
    /// hold are dropped.
    pub fn apply_synced(&self, local: Vec<Contribution>, remote: Vec<Contribution>, deterministic: bool) -> Result<()> {
        if deterministic {
            let mut all: Vec<Contribution> = local.into_iter().chain(remote).filter(|c| self.contains(c.key)).collect();
            all.sort_by_key(|c| (c.key, c.replica));
            for c in all {
                self.accumulate(c.key, &c.delta)?;
            }
        } else {
            for c in remote {
                if self.contains(c.key) {
                    self.accumulate(c.key, &c.delta)?;
                }
            }
        }
        Ok(())
    }
}

/// Build one table per device from a node's working parameters, each sized
/// exactly for its partition.
pub fn build_tables(
    entries: Vec<(ParamKey, Vec<f32>)>,
    topo: Topology,
    policy: &PartitionPolicy,
    width: usize,
) -> Result<Vec<DeviceTable>> {
    let d = topo.devices_per_node as usize;
    let mut parts: Vec<Vec<(ParamKey, Vec<f32>)>> = vec![Vec::new(); d];
    for (k, v) in entries {
        parts[policy.device_of(k, topo) as usize].push((k, v));
    }
    parts
        .into_iter()
        .map(|part| {
            let mut t = DeviceTable::with_capacity(DeviceTable::capacity_for(part.len()), width);
            for (k, v) in part {
                t.insert(k, v)?;
            }
            Ok(t)
        })
        .collect()
}

/// Every device of one node plus the message handling that lets a device
/// worker read from and accumulate into its peers' tables.
pub struct NodeTables {
    pub node: u32,
    pub topo: Topology,
    pub policy: PartitionPolicy,
    pub deterministic: bool,
    pub tables: Vec<DeviceTable>,
    pub retry: RetryPolicy,
    stopping: AtomicBool,
}

const STOP_TAG: u64 = u64::MAX;

impl NodeTables {
    pub fn new(
        node: u32,
        topo: Topology,
        policy: PartitionPolicy,
        deterministic: bool,
        tables: Vec<DeviceTable>,
        retry: RetryPolicy,
    ) -> Self {
        NodeTables { node, topo, policy, deterministic, tables, retry, stopping: AtomicBool::new(false) }
    }

    fn ep(&self, device: u32) -> Endpoint {
        Endpoint::device(self.node, device)
    }

    fn width(&self) -> usize {
        self.tables.first().map_or(0, |t| t.width())
    }

    /// Answer `ParamPullReq` for `device` until [`stop`](Self::stop).
    pub fn serve_pulls(&self, transport: &Transport, device: u32) -> Result<()> {
        let me = self.ep(device);
        let table = &self.tables[device as usize];
        loop {
            let req = transport.recv(me, RecvFilter::kind(MessageKind::ParamPullReq), None)?;
            if req.tag == STOP_TAG {
                return Ok(());
            }
            let mut dec = Decoder::new(&req.payload);
            let n = dec.u32()? as usize;
            let mut enc = Encoder::new();
            enc.u32(n as u32);
            for _ in 0..n {
                let key = ParamKey(dec.u64()?);
                let v = table.get(key).ok_or(HbmError::MissingKey(key))?;
                enc.u64(key.0).f32s(&v);
            }
            transport.send(me, req.src, MessageKind::ParamPullResp, req.tag, enc.finish())?;
        }
    }

    /// Apply `Accum` messages for `device` until [`stop`](Self::stop).
    pub fn serve_accum(&self, transport: &Transport, device: u32) -> Result<()> {
        let me = self.ep(device);
        let table = &self.tables[device as usize];
        let width = self.width();
        loop {
            let msg = transport.recv(me, RecvFilter::kind(MessageKind::Accum), None)?;
            if msg.tag == STOP_TAG {
                return Ok(());
            }
            for c in decode_contributions(&mut Decoder::new(&msg.payload), width)? {
                table.record(c, self.deterministic)?;
            }
        }
    }

    pub fn stop(&self, transport: &Transport) -> Result<()> {
        if self.stopping.swap(true, Ordering::SeqCst) {
            return Ok(());
        }
        for d in 0..self.topo.devices_per_node {
            let ep = self.ep(d);
            transport.send(ep, ep, MessageKind::ParamPullReq, STOP_TAG, Vec::new())?;
            transport.send(ep, ep, MessageKind::Accum, STOP_TAG, Vec::new())?;
        }
        Ok(())
    }

    /// Gather values for `keys` on behalf of `device`, pulling from peer
    /// devices through the transport.
    pub fn get(&self, transport: &Transport, device: u32, keys: &[ParamKey]) -> Result<HashMap<ParamKey, Vec<f32>>> {
        let mut out = HashMap::with_capacity(keys.len());
        let mut remote: BTreeMap<u32, Vec<ParamKey>> = BTreeMap::new();
        for &k in keys {
            let owner = self.policy.device_of(k, self.topo);
            if owner == device {
                out.insert(k, self.tables[device as usize].get(k).ok_or(HbmError::MissingKey(k))?);
            } else {
                remote.entry(owner).or_default().push(k);
            }
        }
        let width = self.width();
        for (owner, ks) in remote {
            let mut enc = Encoder::new();
            enc.u32(ks.len() as u32);
            for k in &ks {
                enc.u64(k.0);
            }
            let resp = transport.call(
                self.ep(device),
                self.ep(owner),
                (MessageKind::ParamPullReq, MessageKind::ParamPullResp),
                enc.finish(),
                self.retry,
            )?;
            let mut dec = Decoder::new(&resp.payload);
            let n = dec.u32()? as usize;
            for _ in 0..n {
                let k = ParamKey(dec.u64()?);
                out.insert(k, dec.f32s(width)?);
            }
        }
        Ok(out)
    }

    /// Route contributions to their owner devices. Returns once every
    /// remote owner has taken delivery.
    pub fn accumulate(&self, transport: &Transport, device: u32, contributions: Vec<Contribution>) -> Result<()> {
        let mut remote: BTreeMap<u32, Vec<Contribution>> = BTreeMap::new();
        for c in contributions {
            let owner = self.policy.device_of(c.key, self.topo);
            if owner == device {
                self.tables[device as usize].record(c, self.deterministic)?;
            } else {
                remote.entry(owner).or_default().push(c);
            }
        }
        let mut handles = Vec::new();
        for (owner, cs) in remote {
            let mut enc = Encoder::new();
            encode_contributions(&mut enc, &cs);
            handles.push(transport.send(self.ep(device), self.ep(owner), MessageKind::Accum, 0, enc.finish())?);
        }
        for h in handles {
            h.wait();
        }
        Ok(())
    }

    /// Every key held by any table of this node, with its value.
    pub fn entries(&self) -> Vec<(ParamKey, Vec<f32>)> {
        let mut all: Vec<(ParamKey, Vec<f32>)> = self.tables.iter().flat_map(|t| t.entries()).collect();
        all.sort_unstable_by_key(|e| e.0);
        all
    }
}

fn encode_contributions(enc: &mut Encoder, cs: &[Contribution]) {
    enc.u32(cs.len() as u32);
    for c in cs {
        enc.u64(c.key.0).u32(c.replica).f32s(&c.delta);
    }
}

fn decode_contributions(dec: &mut Decoder<'_>, width: usize) -> Result<Vec<Contribution>> {
    let n = dec.u32()? as usize;
    (0..n)
        .map(|_| {
            Ok(Contribution {
                key: ParamKey(dec.u64()?),
                replica: dec.u32()?,
                delta: dec.f32s(width)?,
            })
        })
        .collect()
}

/// Where a replica sits and how it reduces.
#[derive(Clone, Copy, Debug)]
pub struct SyncSpec {
    pub topo: Topology,
    pub node: u32,
    pub device: u32,
    pub deterministic: bool,
    pub dense_len: usize,
    pub width: usize,
}

/// Result of one replica's part in a synchronize.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncOutcome {
    /// Elementwise sum of every replica's dense buffer.
    pub dense_sum: Vec<f64>,
    /// Sparse contributions that originated on other nodes.
    pub remote: Vec<Contribution>,
}

enum DenseState {
    /// Every buffer seen so far, keyed by replica.
    Gathered(BTreeMap<u32, Vec<f32>>),
    /// Partial sum plus the lowest replica index folded into it.
    Partial(u32, Vec<f64>),
}

/// One replica's side of the hierarchical exchange: `log2(nodes)` pairwise
/// rounds between same-index devices of partner nodes, then `log2(devices)`
/// butterfly rounds inside the node. Sparse contributions travel only in the
/// inter-node rounds, since within a node they were already routed to their
/// owner devices.
///
/// Deterministic mode gathers every replica's dense buffer and sums them in
/// replica order, so each replica matches a sequential single-site sum bit
/// for bit. Otherwise partial sums are combined as they arrive.
pub fn sync_replica(
    transport: &Transport,
    spec: SyncSpec,
    collective: u64,
    dense: Vec<f32>,
    journal: Vec<Contribution>,
) -> Result<SyncOutcome> {
    let me = Endpoint::device(spec.node, spec.device);
    let my_replica = spec.topo.replica(spec.node, spec.device);
    let mut state = if spec.deterministic {
        DenseState::Gathered(BTreeMap::from([(my_replica, dense)]))
    } else {
        DenseState::Partial(my_replica, dense.iter().map(|&v| f64::from(v)).collect())
    };
    let own = journal.len();
    let mut known = journal;

    let inter = spec.topo.inter_rounds();
    let rounds = (0..inter)
        .map(|s| (true, Endpoint::device(spec.node ^ (1 << s), spec.device)))
        .chain((0..spec.topo.intra_rounds()).map(|s| (false, Endpoint::device(spec.node, spec.device ^ (1 << s)))));
    for (round, (inter_node, partner)) in rounds.enumerate() {
        let tag = (collective << 8) | round as u64;
        let mut enc = Encoder::new();
        match &state {
            DenseState::Gathered(m) => {
                enc.u32(m.len() as u32);
                for (r, v) in m {
                    enc.u32(*r).f32s(v);
                }
            }
            DenseState::Partial(lo, v) => {
                enc.u32(*lo).f64s(v);
            }
        }
        if inter_node {
            encode_contributions(&mut enc, &known);
        }
        transport.send(me, partner, MessageKind::SyncExchange, tag, enc.finish())?;
        let msg = transport.recv(me, RecvFilter::kind(MessageKind::SyncExchange).from(partner).tagged(tag), None)?;
        let mut dec = Decoder::new(&msg.payload);
        match &mut state {
            DenseState::Gathered(m) => {
                let n = dec.u32()?;
                for _ in 0..n {
                    let r = dec.u32()?;
                    m.insert(r, dec.f32s(spec.dense_len)?);
                }
            }
            DenseState::Partial(lo, v) => {
                let their_lo = dec.u32()?;
                let theirs = dec.f64s(spec.dense_len)?;
                // Both partners add in the same order so they stay identical.
                if their_lo < *lo {
                    for (a, b) in v.iter_mut().zip(&theirs) {
                        *a = b + *a;
                    }
                    *lo = their_lo;
                } else {
                    for (a, b) in v.iter_mut().zip(&theirs) {
                        *a += b;
                    }
                }
            }
        }
        if inter_node {
            known.extend(decode_contributions(&mut dec, spec.width)?);
        }
    }

    let dense_sum = match state {
        DenseState::Gathered(m) => {
            let mut sum = vec![0.0f64; spec.dense_len];
            for v in m.values() {
                for (a, &b) in sum.iter_mut().zip(v) {
                    *a += f64::from(b);
                }
            }
            sum
        }
        DenseState::Partial(_, v) => v,
    };
    Ok(SyncOutcome { dense_sum, remote: known.split_off(own) })
}

/// Sum `buffers` (one per replica, node-major) across the topology and
/// return what every replica ends up holding.
pub fn synchronize(
    transport: &Transport,
    topo: Topology,
    buffers: Vec<Vec<f32>>,
    deterministic: bool,
    collective: u64,
) -> Result<Vec<Vec<f64>>> {
    if buffers.len() != topo.replicas() as usize {
        return Err(HbmError::Topology(format!("{} buffers for {} replicas", buffers.len(), topo.replicas())));
    }
    let dense_len = buffers.first().map_or(0, Vec::len);
    topo.register(transport);
    std::thread::scope(|s| {
        let handles: Vec<_> = buffers
            .into_iter()
            .enumerate()
            .map(|(r, buf)| {
                let spec = SyncSpec {
                    topo,
                    node: r as u32 / topo.devices_per_node,
                    device: r as u32 % topo.devices_per_node,
                    deterministic,
                    dense_len,
                    width: 0,
                };
                s.spawn(move || sync_replica(transport, spec, collective, buf, Vec::new()).map(|o| o.dense_sum))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sync worker panicked")).collect()
    })
}

/// One copy of the dense parameters per device, node-major.
pub fn replicate_dense(dense: &DenseParams, topo: Topology) -> Vec<DenseParams> {
    vec![dense.clone(); topo.replicas() as usize]
}

/// Whether all replicas hold bit-identical weights.
pub fn replicas_identical(replicas: &[DenseParams]) -> bool {
    replicas.windows(2).all(|w| {
        w[0].weights.len() == w[1].weights.len()
            && w[0].weights.iter().zip(&w[1].weights).all(|(a, b)| a.to_bits() == b.to_bits())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::LatencyModel;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn keys(ids: &[u64]) -> Vec<ParamKey> {
        ids.iter().map(|&k| ParamKey(k)).collect()
    }

    #[test]
    fn topology_must_be_powers_of_two() {
        assert!(Topology::new(4, 8).is_ok());
        assert!(Topology::new(3, 8).is_err());
        assert!(Topology::new(1, 0).is_err());
        let t = Topology::new(4, 8).unwrap();
        assert_eq!((t.inter_rounds(), t.intra_rounds()), (2, 3));
    }

    #[test]
    fn range_policy_matches_worked_example() {
        let topo = Topology::new(1, 2).unwrap();
        let policy = PartitionPolicy::Range { upper: vec![50] };
        let entries = keys(&[4, 5, 11, 50, 53, 56, 61, 87, 98]).into_iter().map(|k| (k, vec![0.0])).collect();
        let tables = build_tables(entries, topo, &policy, 1).unwrap();
        assert_eq!(tables[0].keys(), keys(&[4, 5, 11, 50]));
        assert_eq!(tables[1].keys(), keys(&[53, 56, 61, 87, 98]));
    }

    #[test]
    fn empty_tables_miss_everything() {
        let topo = Topology::new(1, 2).unwrap();
        let tables = build_tables(Vec::new(), topo, &PartitionPolicy::Modulo, 2).unwrap();
        assert!(tables.iter().all(|t| t.is_empty() && t.get(ParamKey(1)).is_none()));
    }

    #[test]
    fn modulo_partition_is_balanced() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let ks: HashSet<u64> = (0..20_000).map(|_| rng.random_range(0..u64::MAX / 2)).take(10_000).collect();
        let entries: Vec<_> = ks.iter().take(10_000).map(|&k| (ParamKey(k), vec![0.0])).collect();
        let n = entries.len();
        let topo = Topology::new(1, 4).unwrap();
        let tables = build_tables(entries, topo, &PartitionPolicy::Modulo, 1).unwrap();
        for t in &tables {
            let expect = n as f64 / 4.0;
            assert!((t.len() as f64 - expect).abs() <= 0.1 * expect, "{} keys", t.len());
            assert!(t.len() as f64 <= LOAD_FACTOR * t.capacity() as f64);
        }
        assert_eq!(tables.iter().map(|t| t.len()).sum::<usize>(), n);
    }

    #[test]
    fn node_and_device_assignment() {
        let topo = Topology::new(2, 4).unwrap();
        let p = PartitionPolicy::Modulo;
        for k in 0..100u64 {
            assert_eq!(p.node_of(ParamKey(k), topo) as u64, k % 2);
            assert!(p.device_of(ParamKey(k), topo) < 4);
        }
    }

    #[test]
    fn insert_get_round_trip_and_overflow() {
        let mut t = DeviceTable::with_capacity(DeviceTable::capacity_for(3), 2);
        assert_eq!(t.capacity(), 4);
        t.insert(ParamKey(7), vec![1.0, 1.0]).unwrap();
        assert_eq!(t.get(ParamKey(7)), Some(vec![1.0, 1.0]));
        assert_eq!(t.get(ParamKey(7)), t.get(ParamKey(7)));
        assert_eq!(t.insert(ParamKey(7), vec![0.0, 0.0]), Err(HbmError::DuplicateKey(ParamKey(7))));
        t.insert(ParamKey(8), vec![0.0, 0.0]).unwrap();
        t.insert(ParamKey(9), vec![0.0, 0.0]).unwrap();
        assert!(matches!(t.insert(ParamKey(10), vec![0.0, 0.0]), Err(HbmError::CapacityOverflow { .. })));
        assert_eq!(t.capacity(), 4);
    }

    #[test]
    fn accumulate_adds_elementwise() {
        let mut t = DeviceTable::with_capacity(4, 2);
        t.insert(ParamKey(1), vec![1.0, 1.0]).unwrap();
        t.accumulate(ParamKey(1), &[0.5, -0.5]).unwrap();
        assert_eq!(t.get(ParamKey(1)), Some(vec![1.5, 0.5]));
        t.accumulate(ParamKey(1), &[0.0, 0.0]).unwrap();
        assert_eq!(t.get(ParamKey(1)), Some(vec![1.5, 0.5]));
        assert_eq!(t.accumulate(ParamKey(2), &[0.0, 0.0]), Err(HbmError::MissingKey(ParamKey(2))));
    }

    #[test]
    fn concurrent_accumulates_are_all_applied() {
        let mut t = DeviceTable::with_capacity(4, 1);
        t.insert(ParamKey(1), vec![0.0]).unwrap();
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    for _ in 0..8 {
                        t.accumulate(ParamKey(1), &[1.0]).unwrap();
                    }
                });
            }
        });
        assert_eq!(t.get(ParamKey(1)), Some(vec![64.0]));
    }

    #[test]
    fn cross_device_get_and_accumulate_via_transport() {
        let transport = Transport::new(LatencyModel::default());
        let topo = Topology::new(1, 2).unwrap();
        topo.register(&transport);
        let entries: Vec<_> = (0..10u64).map(|k| (ParamKey(k), vec![k as f32])).collect();
        let tables = build_tables(entries, topo, &PartitionPolicy::Modulo, 1).unwrap();
        let node = NodeTables::new(0, topo, PartitionPolicy::Modulo, false, tables, RetryPolicy::default());
        std::thread::scope(|s| {
            for d in 0..2 {
                let (node, transport) = (&node, &transport);
                s.spawn(move || node.serve_pulls(transport, d).unwrap());
                s.spawn(move || node.serve_accum(transport, d).unwrap());
            }
            let all = keys(&[0, 1, 2, 3]);
            let got = node.get(&transport, 0, &all).unwrap();
            assert_eq!(got.len(), 4);
            assert_eq!(got[&ParamKey(3)], vec![3.0]);
            let cs = all.iter().map(|&k| Contribution { key: k, replica: 0, delta: vec![10.0] }).collect();
            node.accumulate(&transport, 0, cs).unwrap();
            let got = node.get(&transport, 1, &all).unwrap();
            assert_eq!(got[&ParamKey(3)], vec![13.0]);
            assert_eq!(got[&ParamKey(0)], vec![10.0]);
            node.stop(&transport).unwrap();
        });
        let c = transport.counters();
        assert!(c.kind(MessageKind::ParamPullReq).messages >= 2);
        assert!(c.kind(MessageKind::Accum).messages >= 1);
    }

    #[test]
    fn four_replicas_sum_to_ten() {
        let transport = Transport::new(LatencyModel::default());
        let topo = Topology::new(2, 2).unwrap();
        for det in [true, false] {
            let out = synchronize(&transport, topo, vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]], det, det as u64).unwrap();
            assert!(out.iter().all(|v| v == &vec![10.0]));
        }
    }

    #[test]
    fn single_replica_is_identity() {
        let transport = Transport::new(LatencyModel::default());
        let topo = Topology::new(1, 1).unwrap();
        let out = synchronize(&transport, topo, vec![vec![0.1, -2.5]], true, 1).unwrap();
        assert_eq!(out, vec![vec![f64::from(0.1f32), -2.5]]);
        assert_eq!(transport.counters().sent, 0);
    }

    #[test]
    fn sparse_contributions_reach_every_node() {
        let transport = Transport::new(LatencyModel::default());
        let topo = Topology::new(4, 2).unwrap();
        topo.register(&transport);
        let outcomes: Vec<SyncOutcome> = std::thread::scope(|s| {
            let hs: Vec<_> = (0..8u32)
                .map(|r| {
                    let transport = &transport;
                    s.spawn(move || {
                        let spec = SyncSpec {
                            topo,
                            node: r / 2,
                            device: r % 2,
                            deterministic: true,
                            dense_len: 1,
                            width: 1,
                        };
                        let journal = vec![Contribution { key: ParamKey(u64::from(r % 2)), replica: r, delta: vec![r as f32] }];
                        sync_replica(transport, spec, 7, vec![1.0], journal).unwrap()
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for (r, o) in outcomes.iter().enumerate() {
            assert_eq!(o.dense_sum, vec![8.0]);
            let mut from: Vec<u32> = o.remote.iter().map(|c| c.replica).collect();
            from.sort_unstable();
            // Same device index on the other three nodes.
            let want: Vec<u32> = (0..8).filter(|&x| x % 2 == r as u32 % 2 && x / 2 != r as u32 / 2).collect();
            assert_eq!(from, want);
        }
        let c = transport.counters();
        assert_eq!((c.inter_node_rounds(), c.intra_node_rounds()), (2, 1));
    }

    #[test]
    fn deterministic_apply_uses_replica_order() {
        let mut t = DeviceTable::with_capacity(4, 1);
        t.insert(ParamKey(1), vec![1.0]).unwrap();
        let c = |r: u32, d: f32| Contribution { key: ParamKey(1), replica: r, delta: vec![d] };
        t.record(c(2, 1e-8), true).unwrap();
        t.record(c(0, 1.0), true).unwrap();
        assert_eq!(t.get(ParamKey(1)), Some(vec![1.0]));
        let local = t.take_journal();
        t.apply_synced(local, vec![c(1, -1.0), c(9, 5.0)], true).unwrap();
        let want = ((1.0f32 + 1.0) + -1.0) + 1e-8;
        assert_eq!(t.get(ParamKey(1)), Some(vec![want + 5.0]));
    }

    #[test]
    fn replica_divergence_is_detected() {
        let topo = Topology::new(2, 2).unwrap();
        let dense = DenseParams::init(&[2, 1], 1, 0.05).unwrap();
        let mut reps = replicate_dense(&dense, topo);
        assert!(replicas_identical(&reps));
        reps[3].weights[0] += 1e-3;
        assert!(!replicas_identical(&reps));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn interleaved_accumulates_sum_exactly(deltas in prop::collection::vec((0u64..4, -50i32..50), 1..200)) {
            let mut t = DeviceTable::with_capacity(8, 1);
            for k in 0..4 {
                t.insert(ParamKey(k), vec![0.0]).unwrap();
            }
            let chunks: Vec<_> = deltas.chunks(deltas.len().div_ceil(4)).collect();
            std::thread::scope(|s| {
                for ch in &chunks {
                    let t = &t;
                    s.spawn(move || {
                        for &(k, d) in ch.iter() {
                            t.accumulate(ParamKey(k), &[d as f32]).unwrap();
                        }
                    });
                }
            });
            for k in 0..4 {
                let want: i32 = deltas.iter().filter(|d| d.0 == k).map(|d| d.1).sum();
                prop_assert_eq!(t.get(ParamKey(k)), Some(vec![want as f32]));
            }
        }

        #[test]
        fn single_ownership(ks in prop::collection::btree_set(0u64..100_000, 0..500), devices in 0u32..4) {
            let topo = Topology::new(1, 1 << devices).unwrap();
            let entries: Vec<_> = ks.iter().map(|&k| (ParamKey(k), vec![0.0])).collect();
            let tables = build_tables(entries, topo, &PartitionPolicy::Modulo, 1).unwrap();
            for &k in &ks {
                prop_assert_eq!(tables.iter().filter(|t| t.contains(ParamKey(k))).count(), 1);
            }
        }
    }
}
