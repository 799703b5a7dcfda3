//! Memory tier: the LRU→LFU parameter cache of one node and the logic that
//! prepares a batch's parameters and writes trained values back.
//!
//! A node owns the keys with `key mod nodes == node`. For owned keys it is
//! authoritative: reads go to the cache, then to parameters evicted but not
//! yet flushed, then to the disk tier, and finally fall back to a zero
//! vector. Peers obtain owned keys only through this node.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use parking_lot::Mutex;
use serde::Serialize;
use thiserror::Error;

use crate::model::{Batch, ParamKey, SparseParam};
use crate::ssd::{SsdError, SsdStore};

#[derive(Error, Debug)]
pub enum MemError {
    #[error("node {node} received an update for key {key} owned by node {owner}")]
    NotOwned { node: u32, key: ParamKey, owner: u32 },
    #[error("key {0} was written back without being pinned")]
    NotPinned(ParamKey),
    #[error(transparent)]
    Ssd(#[from] SsdError),
}

pub type Result<T, E = MemError> = std::result::Result<T, E>;

/// Sorted union of the features referenced by a batch.
pub fn extract_working_set(batch: &Batch) -> Vec<ParamKey> {
    let set: BTreeSet<ParamKey> = batch.examples.iter().flat_map(|e| e.features.iter().copied()).collect();
    set.into_iter().collect()
}

pub fn owner_of(key: ParamKey, num_nodes: u32) -> u32 {
    (key.0 % u64::from(num_nodes)) as u32
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub lru_demotions: u64,
    pub lfu_evictions: u64,
    /// Times an eviction path selected a pinned key. Must stay zero.
    pub pinned_evictions: u64,
}

#[derive(Clone, Debug)]
struct Entry {
    value: SparseParam,
    freq: u64,
    /// Recency tick in the LRU, insertion sequence in the LFU.
    order: u64,
}

/// LRU cache whose overflow cascades into an LFU cache whose overflow is
/// returned to the caller for flushing. Pinned keys are never demoted.
pub struct ParamCache {
    lru_cap: usize,
    lfu_cap: usize,
    lru: HashMap<ParamKey, Entry>,
    lru_order: BTreeMap<u64, ParamKey>,
    /// The unpinned part of `lru_order`: demotion candidates.
    evictable: BTreeMap<u64, ParamKey>,
    lfu: HashMap<ParamKey, Entry>,
    lfu_order: BTreeSet<(u64, u64, ParamKey)>,
    pins: HashMap<ParamKey, u32>,
    clock: u64,
    stats: CacheStats,
}

impl ParamCache {
    pub fn new(lru_cap: usize, lfu_cap: usize) -> Self {
        ParamCache {
            lru_cap,
            lfu_cap,
            lru: HashMap::new(),
            lru_order: BTreeMap::new(),
            evictable: BTreeMap::new(),
            lfu: HashMap::new(),
            lfu_order: BTreeSet::new(),
            pins: HashMap::new(),
            clock: 0,
            stats: CacheStats::default(),
        }
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    pub fn capacities(&self) -> (usize, usize) {
        (self.lru_cap, self.lfu_cap)
    }

    pub fn set_capacities(&mut self, lru_cap: usize, lfu_cap: usize) -> Vec<(ParamKey, SparseParam)> {
        self.lru_cap = lru_cap;
        self.lfu_cap = lfu_cap;
        self.rebalance()
    }

    pub fn len(&self) -> (usize, usize) {
        (self.lru.len(), self.lfu.len())
    }

    pub fn is_empty(&self) -> bool {
        self.lru.is_empty() && self.lfu.is_empty()
    }

    pub fn contains(&self, key: ParamKey) -> bool {
        self.lru.contains_key(&key) || self.lfu.contains_key(&key)
    }

    pub fn in_lru(&self, key: ParamKey) -> bool {
        self.lru.contains_key(&key)
    }

    pub fn in_lfu(&self, key: ParamKey) -> bool {
        self.lfu.contains_key(&key)
    }

    pub fn frequency(&self, key: ParamKey) -> Option<u64> {
        self.lru.get(&key).or_else(|| self.lfu.get(&key)).map(|e| e.freq)
    }

    /// Read without changing recency or frequency.
    pub fn peek(&self, key: ParamKey) -> Option<&SparseParam> {
        self.lru.get(&key).or_else(|| self.lfu.get(&key)).map(|e| &e.value)
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    /// LRU keys from most to least recent.
    pub fn lru_keys(&self) -> Vec<ParamKey> {
        self.lru_order.values().rev().copied().collect()
    }

    pub fn lfu_keys(&self) -> Vec<ParamKey> {
        self.lfu_order.iter().map(|e| e.2).collect()
    }

    pub fn is_pinned(&self, key: ParamKey) -> bool {
        self.pins.contains_key(&key)
    }

    pub fn pin(&mut self, key: ParamKey) {
        let n = self.pins.entry(key).or_insert(0);
        *n += 1;
        if *n == 1 {
            if let Some(e) = self.lru.get(&key) {
                self.evictable.remove(&e.order);
            }
        }
    }

    fn release_pin(&mut self, key: ParamKey) {
        if let Some(n) = self.pins.get_mut(&key) {
            *n -= 1;
            if *n == 0 {
                self.pins.remove(&key);
                if let Some(e) = self.lru.get(&key) {
                    self.evictable.insert(e.order, key);
                }
            }
        }
    }

    /// Drop one pin. Returns any parameters pushed out because the LRU had
    /// been held over capacity by pins.
    pub fn unpin(&mut self, key: ParamKey) -> Vec<(ParamKey, SparseParam)> {
        self.release_pin(key);
        self.rebalance()
    }

    pub fn unpin_all(&mut self, keys: impl IntoIterator<Item = ParamKey>) -> Vec<(ParamKey, SparseParam)> {
        for key in keys {
            self.release_pin(key);
        }
        self.rebalance()
    }

    /// Visit `key` with `value`: it moves to the LRU front and its frequency
    /// goes up by one. Returns the LFU overflow, which the caller must flush.
    pub fn touch(&mut self, key: ParamKey, value: SparseParam) -> Vec<(ParamKey, SparseParam)> {
        let freq = match self.lru.remove(&key) {
            Some(e) => {
                self.lru_order.remove(&e.order);
                self.evictable.remove(&e.order);
                e.freq
            }
            None => match self.lfu.remove(&key) {
                Some(e) => {
                    self.lfu_order.remove(&(e.freq, e.order, key));
                    e.freq
                }
                None => 0,
            },
        };
        let t = self.tick();
        self.lru.insert(key, Entry { value, freq: freq + 1, order: t });
        self.lru_order.insert(t, key);
        if !self.pins.contains_key(&key) {
            self.evictable.insert(t, key);
        }
        self.rebalance()
    }

    /// Overwrite a cached value in place. Returns false if the key is not
    /// cached.
    pub fn update(&mut self, key: ParamKey, value: SparseParam) -> bool {
        match self.lru.get_mut(&key).or_else(|| self.lfu.get_mut(&key)) {
            Some(e) => {
                e.value = value;
                true
            }
            None => false,
        }
    }

    fn rebalance(&mut self) -> Vec<(ParamKey, SparseParam)> {
        while self.lru.len() > self.lru_cap {
            // Least recent unpinned entry; if everything is pinned the LRU
            // stays over capacity until pins are released.
            let Some((t, key)) = self.evictable.pop_first() else { break };
            if self.pins.contains_key(&key) {
                self.stats.pinned_evictions += 1;
            }
            self.lru_order.remove(&t);
            let mut e = self.lru.remove(&key).unwrap();
            e.order = self.tick();
            self.lfu_order.insert((e.freq, e.order, key));
            self.lfu.insert(key, e);
            self.stats.lru_demotions += 1;
        }
        let mut out = Vec::new();
        while self.lfu.len() > self.lfu_cap {
            // Lowest frequency, oldest insertion first.
            let (freq, order, key) = self.lfu_order.pop_first().unwrap();
            debug_assert!(freq >= 1 && order > 0);
            if self.pins.contains_key(&key) {
                self.stats.pinned_evictions += 1;
            }
            let e = self.lfu.remove(&key).unwrap();
            out.push((key, e.value));
            self.stats.lfu_evictions += 1;
        }
        out
    }

    /// Drain everything, LRU then LFU.
    pub fn drain_all(&mut self) -> Vec<(ParamKey, SparseParam)> {
        self.lru_order.clear();
        self.evictable.clear();
        self.lfu_order.clear();
        let mut out: Vec<_> = self.lru.drain().map(|(k, e)| (k, e.value)).collect();
        out.extend(self.lfu.drain().map(|(k, e)| (k, e.value)));
        out
    }

    /// Structural invariants; returns a description of the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        if let Some(k) = self.lru.keys().find(|k| self.lfu.contains_key(k)) {
            return Err(format!("{k} is in both lru and lfu"));
        }
        if self.lfu.len() > self.lfu_cap {
            return Err(format!("lfu holds {} > {}", self.lfu.len(), self.lfu_cap));
        }
        if self.lru.len() > self.lru_cap {
            let unpinned = self.lru.keys().filter(|k| !self.pins.contains_key(k)).count();
            if unpinned > 0 {
                return Err(format!("lru over capacity with {unpinned} unpinned entries"));
            }
        }
        if self.lru.len() != self.lru_order.len() || self.lfu.len() != self.lfu_order.len() {
            return Err("order index out of sync".into());
        }
        let unpinned = self.lru.keys().filter(|k| !self.pins.contains_key(k)).count();
        if unpinned != self.evictable.len() || self.evictable.values().any(|k| self.pins.contains_key(k)) {
            return Err("eviction index out of sync".into());
        }
        if self.stats.pinned_evictions > 0 {
            return Err(format!("{} pinned evictions", self.stats.pinned_evictions));
        }
        Ok(())
    }
}

/// Owned parameter as served to a requester.
#[derive(Clone, Debug, PartialEq)]
pub struct Fetched {
    pub key: ParamKey,
    pub value: SparseParam,
    /// Round + 1 of the last write-back, 0 if never written back.
    pub version: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RoundCounts {
    pub hits: u64,
    pub misses: u64,
}

impl RoundCounts {
    pub fn hit_rate(&self) -> Option<f64> {
        let total = self.hits + self.misses;
        (total > 0).then(|| self.hits as f64 / total as f64)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MemStats {
    pub hits: u64,
    pub misses: u64,
    pub ssd_loads: u64,
    pub zero_inits: u64,
    pub remote_keys_served: u64,
    pub flushed: u64,
    pub cache: CacheStats,
}

struct MemState {
    cache: ParamCache,
    /// Evicted parameters not yet on disk: key → (eviction seq, value).
    pending: HashMap<ParamKey, (u64, SparseParam)>,
    pending_seq: u64,
    outbox: Vec<(ParamKey, u64)>,
    versions: HashMap<ParamKey, u64>,
    round_pins: BTreeMap<u64, HashSet<ParamKey>>,
    /// Owned keys peers asked for, per round.
    requested: BTreeMap<u64, BTreeSet<ParamKey>>,
    rounds: BTreeMap<u64, RoundCounts>,
    stats: MemStats,
}

impl MemState {
    fn stash(&mut self, victims: Vec<(ParamKey, SparseParam)>) {
        for (k, v) in victims {
            self.pending_seq += 1;
            let seq = self.pending_seq;
            self.pending.insert(k, (seq, v));
            self.outbox.push((k, seq));
        }
    }

    fn pin_for(&mut self, round: u64, key: ParamKey) {
        if self.round_pins.entry(round).or_default().insert(key) {
            self.cache.pin(key);
        }
    }
}

/// Memory tier of one node.
pub struct MemPs {
    pub node: u32,
    pub num_nodes: u32,
    width: usize,
    state: Mutex<MemState>,
    store: SsdStore,
}

impl MemPs {
    pub fn new(node: u32, num_nodes: u32, width: usize, lru_cap: usize, lfu_cap: usize, store: SsdStore) -> Self {
        MemPs {
            node,
            num_nodes,
            width,
            state: Mutex::new(MemState {
                cache: ParamCache::new(lru_cap, lfu_cap),
                pending: HashMap::new(),
                pending_seq: 0,
                outbox: Vec::new(),
                versions: HashMap::new(),
                round_pins: BTreeMap::new(),
                requested: BTreeMap::new(),
                rounds: BTreeMap::new(),
                stats: MemStats::default(),
            }),
            store,
        }
    }

    pub fn store(&self) -> &SsdStore {
        &self.store
    }

    pub fn owns(&self, key: ParamKey) -> bool {
        owner_of(key, self.num_nodes) == self.node
    }

    pub fn set_capacities(&self, lru_cap: usize, lfu_cap: usize) {
        let mut st = self.state.lock();
        let victims = st.cache.set_capacities(lru_cap, lfu_cap);
        st.stash(victims);
    }

    pub fn capacities(&self) -> (usize, usize) {
        self.state.lock().cache.capacities()
    }

    /// Split a working set into (owned here, owned elsewhere).
    pub fn split_local(&self, keys: &[ParamKey]) -> (Vec<ParamKey>, Vec<ParamKey>) {
        keys.iter().partition(|&&k| self.owns(k))
    }

    /// Serve owned keys for `round`: cache, then pending flushes, then disk,
    /// then zero. Every key ends up cached and pinned for the round. When
    /// `remote` is set the keys are also recorded as requested by a peer.
    pub fn fetch_owned(&self, round: u64, keys: &[ParamKey], remote: bool) -> Result<Vec<Fetched>> {
        let mut out = Vec::with_capacity(keys.len());
        let mut need = Vec::new();
        {
            let mut st = self.state.lock();
            let mut hits = 0;
            for &k in keys {
                if !self.owns(k) {
                    return Err(MemError::NotOwned { node: self.node, key: k, owner: owner_of(k, self.num_nodes) });
                }
                st.pin_for(round, k);
                if remote {
                    st.requested.entry(round).or_default().insert(k);
                }
                let version = st.versions.get(&k).copied().unwrap_or(0);
                let cached = st.cache.peek(k).cloned();
                let value = match cached {
                    Some(v) => Some(v),
                    None => st.pending.remove(&k).map(|(_, v)| v),
                };
                match value {
                    Some(v) => {
                        hits += 1;
                        let victims = st.cache.touch(k, v.clone());
                        st.stash(victims);
                        out.push(Fetched { key: k, value: v, version });
                    }
                    None => need.push((k, version)),
                }
            }
            let misses = need.len() as u64;
            let c = st.rounds.entry(round).or_default();
            c.hits += hits;
            c.misses += misses;
            st.stats.hits += hits;
            st.stats.misses += misses;
            if remote {
                st.stats.remote_keys_served += keys.len() as u64;
            }
        }
        if need.is_empty() {
            return Ok(out);
        }

        let ks: Vec<ParamKey> = need.iter().map(|n| n.0).collect();
        let loaded = self.store.load(&ks)?;
        let mut st = self.state.lock();
        st.stats.ssd_loads += loaded.found.len() as u64;
        st.stats.zero_inits += loaded.missing.len() as u64;
        for (k, version) in need {
            // Another request may have brought the key in meanwhile; the
            // cached copy is at least as new as what we read.
            let value = match st.cache.peek(k).cloned() {
                Some(v) => v,
                None => loaded.found.get(&k).cloned().unwrap_or_else(|| SparseParam::zeros(self.width)),
            };
            let victims = st.cache.touch(k, value.clone());
            st.stash(victims);
            out.push(Fetched { key: k, value, version });
        }
        Ok(out)
    }

    /// Of `keys` (with the version the caller holds), return those written
    /// back since. Does not count as a cache visit.
    pub fn refresh(&self, keys: &[(ParamKey, u64)]) -> Result<Vec<Fetched>> {
        let st = self.state.lock();
        let mut out = Vec::new();
        for &(k, have) in keys {
            if !self.owns(k) {
                return Err(MemError::NotOwned { node: self.node, key: k, owner: owner_of(k, self.num_nodes) });
            }
            let version = st.versions.get(&k).copied().unwrap_or(0);
            if version > have {
                let value = st.cache.peek(k).cloned().ok_or(MemError::NotPinned(k))?;
                out.push(Fetched { key: k, value, version });
            }
        }
        Ok(out)
    }

    /// Current value of pinned owned keys.
    pub fn read_pinned(&self, keys: &[ParamKey]) -> Result<Vec<(ParamKey, SparseParam)>> {
        let st = self.state.lock();
        keys.iter()
            .map(|&k| {
                st.cache
                    .peek(k)
                    .filter(|_| st.cache.is_pinned(k))
                    .map(|v| (k, v.clone()))
                    .ok_or(MemError::NotPinned(k))
            })
            .collect()
    }

    /// Owned keys peers asked for in `round`.
    pub fn requested(&self, round: u64) -> Vec<ParamKey> {
        self.state.lock().requested.get(&round).map(|s| s.iter().copied().collect()).unwrap_or_default()
    }

    /// Install trained values for owned keys and release the round's pins.
    pub fn write_back(&self, round: u64, updates: Vec<(ParamKey, Vec<f32>)>) -> Result<()> {
        let mut st = self.state.lock();
        for (k, embedding) in updates {
            if !self.owns(k) {
                return Err(MemError::NotOwned { node: self.node, key: k, owner: owner_of(k, self.num_nodes) });
            }
            if !st.cache.is_pinned(k) {
                return Err(MemError::NotPinned(k));
            }
            let mut v = st.cache.peek(k).cloned().ok_or(MemError::NotPinned(k))?;
            v.embedding = embedding;
            st.cache.update(k, v);
            st.versions.insert(k, round + 1);
        }
        self.release_locked(&mut st, round);
        Ok(())
    }

    fn release_locked(&self, st: &mut MemState, round: u64) {
        let keys = st.round_pins.remove(&round).unwrap_or_default();
        st.requested.remove(&round);
        let victims = st.cache.unpin_all(keys);
        st.stash(victims);
    }

    /// Release pins of a round without updates (e.g. after an abort).
    pub fn release(&self, round: u64) {
        let mut st = self.state.lock();
        self.release_locked(&mut st, round);
    }

    /// Hit/miss counts of `round`, removing them.
    pub fn take_round_counts(&self, round: u64) -> RoundCounts {
        self.state.lock().rounds.remove(&round).unwrap_or_default()
    }

    /// Write every evicted-but-unflushed parameter to disk. Returns the
    /// number of parameters written.
    pub fn flush_pending(&self) -> Result<usize> {
        let batch: BTreeMap<ParamKey, SparseParam>;
        let taken: Vec<(ParamKey, u64)>;
        {
            let mut st = self.state.lock();
            let outbox = std::mem::take(&mut st.outbox);
            let mut b = BTreeMap::new();
            let mut t = Vec::new();
            for (k, seq) in outbox {
                if let Some((s, v)) = st.pending.get(&k) {
                    if *s == seq {
                        b.insert(k, v.clone());
                        t.push((k, seq));
                    }
                }
            }
            batch = b;
            taken = t;
        }
        if batch.is_empty() {
            return Ok(0);
        }
        self.store.dump(&batch)?;
        let mut st = self.state.lock();
        for (k, seq) in taken {
            if st.pending.get(&k).is_some_and(|(s, _)| *s == seq) {
                st.pending.remove(&k);
            }
        }
        st.stats.flushed += batch.len() as u64;
        Ok(batch.len())
    }

    /// Move everything held in memory to disk; used for model export.
    pub fn flush_all(&self) -> Result<usize> {
        {
            let mut st = self.state.lock();
            let all = st.cache.drain_all();
            st.stash(all);
        }
        self.flush_pending()
    }

    /// Owned value as a reader would see it, without touching the cache.
    pub fn lookup(&self, key: ParamKey) -> Result<SparseParam> {
        {
            let st = self.state.lock();
            if let Some(v) = st.cache.peek(key) {
                return Ok(v.clone());
            }
            if let Some((_, v)) = st.pending.get(&key) {
                return Ok(v.clone());
            }
        }
        let got = self.store.load(&[key])?;
        Ok(got.found.get(&key).cloned().unwrap_or_else(|| SparseParam::zeros(self.width)))
    }

    pub fn stats(&self) -> MemStats {
        let st = self.state.lock();
        MemStats { cache: st.cache.stats(), ..st.stats }
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        let st = self.state.lock();
        st.cache.check_invariants()?;
        for keys in st.round_pins.values() {
            if let Some(k) = keys.iter().find(|k| !st.cache.in_lru(**k)) {
                return Err(format!("pinned key {k} not in lru"));
            }
        }
        if let Some(k) = st.pending.keys().find(|k| st.cache.contains(**k)) {
            return Err(format!("{k} is both cached and pending flush"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Example;
    use crate::ssd::StoreConfig;

    fn k(v: u64) -> ParamKey {
        ParamKey(v)
    }

    fn val(x: f32) -> SparseParam {
        SparseParam::from_embedding(vec![x])
    }

    #[test]
    fn worked_example_working_set_and_split() {
        let ex = |ids: &[u64]| Example::new(1, ids.iter().map(|&i| k(i)).collect()).unwrap();
        let batch = Batch {
            batch_id: 0,
            examples: vec![ex(&[4, 11, 53]), ex(&[5, 50, 87]), ex(&[56, 61, 98]), ex(&[4, 98])],
        };
        let ws = extract_working_set(&batch);
        assert_eq!(ws, [4, 5, 11, 50, 53, 56, 61, 87, 98].map(k).to_vec());
        let dir = tempfile::tempdir().unwrap();
        let store = SsdStore::open(StoreConfig::new(dir.path(), 1)).unwrap();
        let mem = MemPs::new(1, 2, 1, 10, 10, store);
        let (local, remote) = mem.split_local(&ws);
        assert_eq!(local, [5, 11, 53, 61, 87].map(k).to_vec());
        assert_eq!(remote, [4, 50, 56, 98].map(k).to_vec());
    }

    #[test]
    fn lru_demotes_least_recent() {
        let mut c = ParamCache::new(2, 10);
        c.touch(k(1), val(1.0));
        c.touch(k(2), val(2.0));
        c.touch(k(1), val(1.0));
        c.touch(k(3), val(3.0));
        assert_eq!(c.lru_keys(), vec![k(3), k(1)]);
        assert_eq!(c.lfu_keys(), vec![k(2)]);
        c.check_invariants().unwrap();
    }

    #[test]
    fn pinned_tail_is_skipped() {
        let mut c = ParamCache::new(2, 10);
        c.touch(k(1), val(1.0));
        c.pin(k(1));
        c.touch(k(2), val(2.0));
        c.touch(k(3), val(3.0));
        assert!(c.in_lru(k(1)));
        assert_eq!(c.lfu_keys(), vec![k(2)]);
        c.check_invariants().unwrap();
    }

    #[test]
    fn all_pinned_lru_grows_then_shrinks_on_unpin() {
        let mut c = ParamCache::new(1, 10);
        for i in 0..3 {
            c.pin(k(i));
            c.touch(k(i), val(0.0));
        }
        assert_eq!(c.len(), (3, 0));
        c.check_invariants().unwrap();
        c.unpin_all([k(0), k(1), k(2)]);
        assert_eq!(c.len(), (1, 2));
        assert_eq!(c.lru_keys(), vec![k(2)]);
    }

    #[test]
    fn lfu_tie_evicts_oldest_insertion() {
        let mut c = ParamCache::new(0, 1);
        let first = c.touch(k(1), val(1.0));
        assert!(first.is_empty());
        let evicted = c.touch(k(2), val(2.0));
        assert_eq!(evicted, vec![(k(1), val(1.0))]);
    }

    #[test]
    fn lfu_evicts_lowest_frequency() {
        let mut c = ParamCache::new(0, 2);
        c.touch(k(1), val(1.0));
        c.touch(k(1), val(1.0));
        c.touch(k(1), val(1.0));
        c.touch(k(2), val(2.0));
        let evicted = c.touch(k(3), val(3.0));
        assert_eq!(evicted[0].0, k(2));
        assert_eq!(c.frequency(k(1)), Some(3));
    }

    #[test]
    fn touching_lfu_entry_promotes_it() {
        let mut c = ParamCache::new(1, 5);
        c.touch(k(1), val(1.0));
        c.touch(k(2), val(2.0));
        assert!(c.in_lfu(k(1)));
        c.touch(k(1), val(1.5));
        assert!(c.in_lru(k(1)) && c.in_lfu(k(2)));
        assert_eq!(c.frequency(k(1)), Some(2));
        c.check_invariants().unwrap();
    }

    fn mem(dir: &std::path::Path, lru: usize, lfu: usize) -> MemPs {
        let mut cfg = StoreConfig::new(dir, 1);
        cfg.durable = false;
        MemPs::new(0, 1, 1, lru, lfu, SsdStore::open(cfg).unwrap())
    }

    #[test]
    fn cold_key_is_zero_and_then_cached() {
        let dir = tempfile::tempdir().unwrap();
        let m = mem(dir.path(), 4, 4);
        let got = m.fetch_owned(0, &[k(9)], false).unwrap();
        assert_eq!(got[0].value, SparseParam::zeros(1));
        assert_eq!(got[0].version, 0);
        let st = m.stats();
        assert_eq!((st.misses, st.zero_inits), (1, 1));
        m.fetch_owned(1, &[k(9)], false).unwrap();
        assert_eq!(m.stats().hits, 1);
        assert_eq!(m.store().stats().file_reads, 0);
    }

    #[test]
    fn write_back_updates_versions_and_releases_pins() {
        let dir = tempfile::tempdir().unwrap();
        let m = mem(dir.path(), 4, 4);
        m.fetch_owned(3, &[k(1), k(2)], false).unwrap();
        m.write_back(3, vec![(k(1), vec![7.0])]).unwrap();
        assert_eq!(m.lookup(k(1)).unwrap(), val(7.0));
        m.fetch_owned(4, &[k(1), k(2)], false).unwrap();
        let newer = m.refresh(&[(k(1), 0), (k(2), 0)]).unwrap();
        assert_eq!(newer.len(), 1);
        assert_eq!((newer[0].key, newer[0].version), (k(1), 4));
        assert!(matches!(m.write_back(9, vec![(k(5), vec![0.0])]), Err(MemError::NotPinned(_))));
        m.check_invariants().unwrap();
    }

    #[test]
    fn non_owned_update_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = StoreConfig::new(dir.path(), 1);
        cfg.durable = false;
        let m = MemPs::new(0, 2, 1, 4, 4, SsdStore::open(cfg).unwrap());
        assert!(matches!(m.write_back(0, vec![(k(3), vec![0.0])]), Err(MemError::NotOwned { .. })));
        assert!(matches!(m.fetch_owned(0, &[k(3)], false), Err(MemError::NotOwned { .. })));
    }

    #[test]
    fn empty_write_back_releases_pins_without_flush() {
        let dir = tempfile::tempdir().unwrap();
        let m = mem(dir.path(), 4, 4);
        m.fetch_owned(0, &[k(1)], false).unwrap();
        m.write_back(0, Vec::new()).unwrap();
        assert_eq!(m.flush_pending().unwrap(), 0);
        assert_eq!(m.store().stats().files_written, 0);
        m.check_invariants().unwrap();
    }

    #[test]
    fn overflow_flushes_and_reads_back_updated_values() {
        let dir = tempfile::tempdir().unwrap();
        let m = mem(dir.path(), 2, 2);
        let mut oracle = HashMap::new();
        for (round, keys) in [(0u64, [1u64, 2, 3]), (1, [4, 5, 6])] {
            let ks: Vec<ParamKey> = keys.iter().map(|&i| k(i)).collect();
            m.fetch_owned(round, &ks, false).unwrap();
            let updates: Vec<_> = ks.iter().map(|&key| (key, vec![key.0 as f32 * 10.0 + round as f32])).collect();
            for (key, v) in &updates {
                oracle.insert(*key, v.clone());
            }
            m.write_back(round, updates).unwrap();
            m.flush_pending().unwrap();
            m.check_invariants().unwrap();
        }
        assert!(m.stats().flushed >= 2);
        for (key, v) in oracle {
            assert_eq!(m.lookup(key).unwrap().embedding, v, "key {key}");
        }
        let on_disk = m.store().live_keys();
        assert!(on_disk.len() >= 2);
        for key in on_disk {
            assert_eq!(m.store().load(&[key]).unwrap().found[&key], m.lookup(key).unwrap());
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn cache_is_transparent(
                rounds in prop::collection::vec(prop::collection::btree_set(0u64..24, 1..8), 1..12),
                lru in 0usize..4,
                lfu in 0usize..4,
            ) {
                let dir = tempfile::tempdir().unwrap();
                let m = mem(dir.path(), lru, lfu);
                let mut flat: HashMap<ParamKey, f32> = HashMap::new();
                for (round, keys) in rounds.iter().enumerate() {
                    let round = round as u64;
                    let ks: Vec<ParamKey> = keys.iter().map(|&i| k(i)).collect();
                    let got = m.fetch_owned(round, &ks, false).unwrap();
                    for f in &got {
                        let want = flat.get(&f.key).copied().unwrap_or(0.0);
                        prop_assert_eq!(f.value.embedding[0], want);
                    }
                    m.check_invariants().map_err(TestCaseError::fail)?;
                    let updates: Vec<_> = ks.iter().map(|&key| (key, vec![(round * 100 + key.0) as f32])).collect();
                    for (key, v) in &updates {
                        flat.insert(*key, v[0]);
                    }
                    m.write_back(round, updates).unwrap();
                    if round % 2 == 0 {
                        m.flush_pending().unwrap();
                    }
                    let (l, f) = m.state.lock().cache.len();
                    prop_assert!(l <= lru.max(0) || l <= ks.len());
                    prop_assert!(f <= lfu);
                    m.check_invariants().map_err(TestCaseError::fail)?;
                }
                m.flush_all().unwrap();
                for (key, v) in flat {
                    prop_assert_eq!(m.store().load(&[key]).unwrap().found[&key].embedding[0], v);
                }
            }
        }
    }
}
