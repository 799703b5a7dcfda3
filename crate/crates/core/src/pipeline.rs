//! Four-stage training pipeline, one per node:
//!
//! 1. ingest: take the node's next batch.
//! 2. prepare: extract the working set, pull owned keys from the local memory
//!    tier and the rest from their owners.
//! 3. train: build device tables, run the mini-batches on every device with
//!    a synchronization after each, write owned results back.
//! 4. collect: flush cache victims to disk, record metrics.
//!
//! Stages talk through bounded queues, so batch `t + 1` is prepared while
//! batch `t` trains. To keep training lossless, values pulled early are
//! re-validated right before training: the train stage of round `t` waits
//! until every node has written back round `t - 1`, then re-reads owned keys
//! from the cache and asks owners only for keys written since the pull.
//!
//! In round `t` node `n` trains batch `t * nodes + n`; nodes without a batch
//! in the last round still join every synchronization with empty shards.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::AssertUnwindSafe;
use std::sync::atomic::{AtomicI64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender};
use parking_lot::Mutex;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::hbm::{self, build_tables, Contribution, HbmError, NodeTables, PartitionPolicy, SyncSpec, Topology};
use crate::mem::{extract_working_set, owner_of, Fetched, MemError, MemPs, MemStats};
use crate::metrics::{BatchRecord, MetricsReport, Summary};
use crate::model::{
    apply_update, backward, forward, log_loss, sgd_delta, Batch, DenseParams, Example, ModelError, ParamKey,
    SparseParam, TrainedModel,
};
use crate::ssd::{SsdError, SsdStats, SsdStore};
use crate::sync_util::{AbortFlag, Aborted, Barrier, RoundGate};
use crate::transport::{Counters, Endpoint, MessageKind, RecvFilter, Transport, TransportError};
use crate::wire::{Decoder, Encoder, WireError};

#[derive(Error, Debug)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Hbm(#[from] HbmError),
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error(transparent)]
    Ssd(#[from] SsdError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Aborted(#[from] Aborted),
    #[error("worker panicked: {0}")]
    Panic(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Errors that only report that some other worker failed first.
    fn is_secondary(&self) -> bool {
        matches!(
            self,
            PipelineError::Aborted(_)
                | PipelineError::Transport(TransportError::Closed)
                | PipelineError::Hbm(HbmError::Transport(TransportError::Closed))
        )
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Split a batch round-robin: example `i` goes to slot `i mod (D * M)`,
/// which is device `slot mod D`, mini-batch `slot / D`. Indexed
/// `[device][minibatch]`.
pub fn shard_batch(examples: &[Example], devices: usize, minibatches: usize) -> Result<Vec<Vec<Vec<Example>>>> {
    if devices == 0 || minibatches == 0 {
        return Err(ConfigError::Invalid("devices and minibatches must be positive".into()).into());
    }
    let mut out = vec![vec![Vec::new(); minibatches]; devices];
    for (i, ex) in examples.iter().enumerate() {
        let slot = i % (devices * minibatches);
        out[slot % devices][slot / devices].push(ex.clone());
    }
    Ok(out)
}

/// Sorted unique features of a set of examples.
pub fn keys_of(examples: &[Example]) -> Vec<ParamKey> {
    let set: BTreeSet<ParamKey> = examples.iter().flat_map(|e| e.features.iter().copied()).collect();
    set.into_iter().collect()
}

#[derive(Default)]
struct Gauge {
    in_flight: AtomicI64,
    high: AtomicUsize,
}

/// Sending half of a bounded stage queue.
pub struct QueueTx<T> {
    tx: Sender<T>,
    gauge: Arc<Gauge>,
}

/// Receiving half. Call [`done`](QueueRx::done) once a job has been fully
/// handled so the high-water mark counts jobs in the queue plus the one in
/// progress.
pub struct QueueRx<T> {
    rx: Receiver<T>,
    gauge: Arc<Gauge>,
    capacity: usize,
}

pub fn stage_queue<T>(capacity: usize) -> (QueueTx<T>, QueueRx<T>) {
    let (tx, rx) = bounded(capacity);
    let gauge = Arc::new(Gauge::default());
    (QueueTx { tx, gauge: gauge.clone() }, QueueRx { rx, gauge, capacity })
}

impl<T> QueueTx<T> {
    /// Blocks while the queue is full. Fails if the consumer is gone.
    pub fn send(&self, item: T) -> Result<(), Aborted> {
        self.tx.send(item).map_err(|_| Aborted)?;
        let now = self.gauge.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.gauge.high.fetch_max(now.max(0) as usize, Ordering::SeqCst);
        Ok(())
    }
}

impl<T> QueueRx<T> {
    pub fn recv(&self) -> Option<T> {
        self.rx.recv().ok()
    }

    pub fn done(&self) {
        self.gauge.in_flight.fetch_sub(1, Ordering::SeqCst);
    }

    pub fn len(&self) -> usize {
        self.rx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rx.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Most jobs ever past this boundary at once.
    pub fn high_water(&self) -> usize {
        self.gauge.high.load(Ordering::SeqCst)
    }
}

/// Logical clock of one device around one synchronization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ClockStamp {
    pub round: u64,
    pub minibatch: u64,
    pub node: u32,
    pub device: u32,
    /// Clock when the device started the mini-batch.
    pub start: u64,
    /// Clock right before the device sent its first sync message.
    pub sync_entry: u64,
    /// Clock once the device held the synchronized result.
    pub sync_exit: u64,
}

pub struct RunOutput {
    pub model: TrainedModel,
    pub metrics: MetricsReport,
    pub counters: Counters,
    pub clock_trace: Vec<ClockStamp>,
    pub mem_stats: Vec<MemStats>,
    pub ssd_stats: Vec<SsdStats>,
    /// Whether every device ended with bit-identical dense weights.
    pub replicas_identical: bool,
}

struct IngestJob {
    round: u64,
    batch: Option<Batch>,
    ingest_ms: f64,
}

struct PreparedJob {
    round: u64,
    batch: Option<Batch>,
    working_set: usize,
    local: Vec<ParamKey>,
    /// Keys owned elsewhere, grouped by owner, with the version pulled.
    remote: BTreeMap<u32, Vec<(ParamKey, u64)>>,
    values: HashMap<ParamKey, Vec<f32>>,
    ingest_ms: f64,
    prepare_ms: f64,
}

struct TrainedJob {
    round: u64,
    batch_id: Option<u64>,
    examples: usize,
    working_set: usize,
    remote_keys: usize,
    loss: f64,
    ingest_ms: f64,
    prepare_ms: f64,
    train_ms: f64,
}

const MEM_STOP: u64 = u64::MAX;
const MODE_PREPARE: u32 = 0;
const MODE_REFRESH: u32 = 1;

struct Shared<'a> {
    cfg: &'a RunConfig,
    topo: Topology,
    batches: &'a [Batch],
    rounds: u64,
    transport: Arc<Transport>,
    mems: Vec<MemPs>,
    abort: AbortFlag,
    prepared: RoundGate,
    written: RoundGate,
    start: Instant,
    trace: Mutex<Vec<ClockStamp>>,
    records: Mutex<Vec<BatchRecord>>,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn delay(ms: u64) {
    if ms > 0 {
        std::thread::sleep(Duration::from_millis(ms));
    }
}

fn encode_fetched(fetched: &[Fetched]) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.u32(fetched.len() as u32);
    for f in fetched {
        enc.u64(f.key.0).u64(f.version).f32s(&f.value.embedding);
    }
    enc.finish()
}

fn decode_fetched(payload: &[u8], width: usize) -> Result<Vec<(ParamKey, u64, Vec<f32>)>> {
    let mut dec = Decoder::new(payload);
    let n = dec.u32()? as usize;
    (0..n).map(|_| Ok((ParamKey(dec.u64()?), dec.u64()?, dec.f32s(width)?))).collect()
}

impl Shared<'_> {
    fn width(&self) -> usize {
        self.cfg.model.embedding_width
    }

    /// Answer peers' pulls for keys owned by `node`.
    fn serve_mem(&self, node: u32) -> Result<()> {
        let me = Endpoint::mem(node);
        let mem = &self.mems[node as usize];
        loop {
            let req = self.transport.recv(me, RecvFilter::kind(MessageKind::MemPullReq), None)?;
            if req.tag == MEM_STOP {
                return Ok(());
            }
            let mut dec = Decoder::new(&req.payload);
            let mode = dec.u32()?;
            let round = dec.u64()?;
            let n = dec.u32()? as usize;
            let fetched = if mode == MODE_PREPARE {
                let keys: Vec<ParamKey> = (0..n).map(|_| dec.u64().map(ParamKey)).collect::<Result<_, _>>()?;
                mem.fetch_owned(round, &keys, true)?
            } else {
                let pairs: Vec<(ParamKey, u64)> =
                    (0..n).map(|_| Ok((ParamKey(dec.u64()?), dec.u64()?))).collect::<Result<_, WireError>>()?;
                mem.refresh(&pairs)?
            };
            self.transport.send(me, req.src, MessageKind::MemPullResp, req.tag, encode_fetched(&fetched))?;
        }
    }

    fn mem_call(&self, node: u32, owner: u32, payload: Vec<u8>) -> Result<Vec<(ParamKey, u64, Vec<f32>)>> {
        let resp = self.transport.call(
            Endpoint::mem(node),
            Endpoint::mem(owner),
            (MessageKind::MemPullReq, MessageKind::MemPullResp),
            payload,
            self.cfg.retry(),
        )?;
        decode_fetched(&resp.payload, self.width())
    }

    fn ingest(&self, node: u32, out: QueueTx<IngestJob>) -> Result<()> {
        for round in 0..self.rounds {
            self.abort.check()?;
            let t0 = Instant::now();
            delay(self.cfg.stage_delays_ms[0]);
            let idx = round * u64::from(self.topo.num_nodes) + u64::from(node);
            let batch = self.batches.get(idx as usize).cloned();
            out.send(IngestJob { round, batch, ingest_ms: ms(t0.elapsed()) })?;
        }
        Ok(())
    }

    fn prepare(&self, node: u32, input: QueueRx<IngestJob>, out: QueueTx<PreparedJob>) -> Result<()> {
        let mem = &self.mems[node as usize];
        while let Some(job) = input.recv() {
            self.abort.check()?;
            let t0 = Instant::now();
            delay(self.cfg.stage_delays_ms[1]);
            let ws = job.batch.as_ref().map(extract_working_set).unwrap_or_default();
            let (local, remote_keys) = mem.split_local(&ws);
            let mut by_owner: BTreeMap<u32, Vec<ParamKey>> = BTreeMap::new();
            for k in remote_keys {
                by_owner.entry(owner_of(k, self.topo.num_nodes)).or_default().push(k);
            }

            // Remote pulls run while the local tier is read.
            let (local_fetched, remote_fetched) = std::thread::scope(|s| {
                let handles: Vec<_> = by_owner
                    .iter()
                    .map(|(&owner, keys)| {
                        let mut enc = Encoder::new();
                        enc.u32(MODE_PREPARE).u64(job.round).u32(keys.len() as u32);
                        for k in keys {
                            enc.u64(k.0);
                        }
                        let payload = enc.finish();
                        s.spawn(move || self.mem_call(node, owner, payload).map(|r| (owner, r)))
                    })
                    .collect();
                let local = mem.fetch_owned(job.round, &local, false);
                let remote: Vec<_> = handles.into_iter().map(|h| h.join().expect("pull thread panicked")).collect();
                (local, remote)
            });

            let mut values = HashMap::with_capacity(ws.len());
            for f in local_fetched? {
                values.insert(f.key, f.value.embedding);
            }
            let mut remote = BTreeMap::new();
            for r in remote_fetched {
                let (owner, fetched) = r?;
                let mut versions = Vec::with_capacity(fetched.len());
                for (k, version, v) in fetched {
                    values.insert(k, v);
                    versions.push((k, version));
                }
                remote.insert(owner, versions);
            }
            self.prepared.mark(node as usize, job.round);
            out.send(PreparedJob {
                round: job.round,
                batch: job.batch,
                working_set: ws.len(),
                local,
                remote,
                values,
                ingest_ms: job.ingest_ms,
                prepare_ms: ms(t0.elapsed()),
            })?;
            input.done();
        }
        Ok(())
    }

    fn train(&self, node: u32, input: QueueRx<PreparedJob>, out: QueueTx<TrainedJob>) -> Result<Vec<DenseParams>> {
        let mem = &self.mems[node as usize];
        let dense0 = self.cfg.model.init_dense()?;
        let mut dense = vec![dense0; self.topo.devices_per_node as usize];
        while let Some(mut job) = input.recv() {
            self.abort.check()?;
            let t0 = Instant::now();
            delay(self.cfg.stage_delays_ms[2]);
            let round = job.round;
            self.prepared.wait_all(round)?;
            if round > 0 {
                self.written.wait_all(round - 1)?;
            }

            // Bring early pulls up to date.
            let mut remote_keys = 0;
            for (&owner, pairs) in &job.remote {
                remote_keys += pairs.len();
                let mut enc = Encoder::new();
                enc.u32(MODE_REFRESH).u64(round).u32(pairs.len() as u32);
                for (k, v) in pairs {
                    enc.u64(k.0).u64(*v);
                }
                for (k, _, v) in self.mem_call(node, owner, enc.finish())? {
                    job.values.insert(k, v);
                }
            }
            for (k, v) in mem.read_pinned(&job.local)? {
                job.values.insert(k, v.embedding);
            }
            // Owned keys peers train on this round; their updates are
            // gathered here so the owner can write them back.
            let extra: Vec<ParamKey> =
                mem.requested(round).into_iter().filter(|k| !job.values.contains_key(k)).collect();
            for (k, v) in mem.read_pinned(&extra)? {
                job.values.insert(k, v.embedding);
            }

            let examples = job.batch.as_ref().map_or(&[][..], |b| b.examples.as_slice());
            let loss = self.run_minibatches(node, round, examples, job.values, &mut dense)?;

            self.written.mark(node as usize, round);
            out.send(TrainedJob {
                round,
                batch_id: job.batch.as_ref().map(|b| b.batch_id),
                examples: examples.len(),
                working_set: job.working_set,
                remote_keys,
                loss,
                ingest_ms: job.ingest_ms,
                prepare_ms: job.prepare_ms,
                train_ms: ms(t0.elapsed()),
            })?;
            input.done();
        }
        Ok(dense)
    }

    /// Train one batch on the node's devices and write owned results back.
    /// Returns the mean training loss before each mini-batch's update.
    fn run_minibatches(
        &self,
        node: u32,
        round: u64,
        examples: &[Example],
        values: HashMap<ParamKey, Vec<f32>>,
        dense: &mut [DenseParams],
    ) -> Result<f64> {
        let cfg = self.cfg;
        let topo = self.topo;
        let d_count = topo.devices_per_node as usize;
        let tables = build_tables(values.into_iter().collect(), topo, &PartitionPolicy::Modulo, self.width())?;
        let nt = NodeTables::new(node, topo, PartitionPolicy::Modulo, cfg.deterministic, tables, cfg.retry());
        let shards = shard_batch(examples, d_count, cfg.minibatches)?;
        let barrier = Barrier::new(d_count, self.abort.clone());
        let transport = &*self.transport;

        let results: Vec<Result<f64>> = std::thread::scope(|s| {
            let servers: Vec<_> = (0..topo.devices_per_node)
                .flat_map(|d| {
                    let nt = &nt;
                    [
                        s.spawn(move || nt.serve_pulls(transport, d)),
                        s.spawn(move || nt.serve_accum(transport, d)),
                    ]
                })
                .collect();
            let workers: Vec<_> = dense
                .iter_mut()
                .enumerate()
                .map(|(d, dense)| {
                    let (nt, shards, barrier) = (&nt, &shards[d], &barrier);
                    s.spawn(move || {
                        let r = self.device_worker(node, d as u32, round, nt, shards, dense, barrier);
                        if r.is_err() {
                            self.fail();
                        }
                        r
                    })
                })
                .collect();
            let results: Vec<Result<f64>> = workers
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|p| Err(PipelineError::Panic(panic_message(p)))))
                .collect();
            if results.iter().any(Result::is_err) {
                self.fail();
            }
            let _ = nt.stop(transport);
            for h in servers {
                if let Ok(Err(e)) = h.join() {
                    if !self.abort.is_raised() {
                        return vec![Err(e.into())];
                    }
                }
            }
            results
        });
        let mut loss = 0.0;
        let mut errors = Vec::new();
        for r in results {
            match r {
                Ok(l) => loss += l,
                Err(e) => errors.push(e),
            }
        }
        if let Some(e) = first_error(errors) {
            return Err(e);
        }

        let mem = &self.mems[node as usize];
        let owned: Vec<(ParamKey, Vec<f32>)> = nt.entries().into_iter().filter(|(k, _)| mem.owns(*k)).collect();
        mem.write_back(round, owned)?;
        Ok(if examples.is_empty() { 0.0 } else { loss / examples.len() as f64 })
    }

    /// One replica's mini-batches. Returns the summed example loss.
    #[allow(clippy::too_many_arguments)]
    fn device_worker(
        &self,
        node: u32,
        device: u32,
        round: u64,
        nt: &NodeTables,
        shards: &[Vec<Example>],
        dense: &mut DenseParams,
        barrier: &Barrier,
    ) -> Result<f64> {
        let cfg = self.cfg;
        let topo = self.topo;
        let transport = &*self.transport;
        let me = Endpoint::device(node, device);
        let replica = topo.replica(node, device);
        let spec = SyncSpec {
            topo,
            node,
            device,
            deterministic: cfg.deterministic,
            dense_len: dense.weights.len(),
            width: self.width(),
        };
        let lr = cfg.model.lr;
        let mut loss = 0.0;
        for (j, shard) in shards.iter().enumerate() {
            let start = transport.clock(me)?;
            let values = nt.get(transport, device, &keys_of(shard))?;
            let preds = forward(shard, &values, dense)?;
            if !shard.is_empty() {
                loss += log_loss(shard, &preds) * shard.len() as f64;
            }
            let grads = backward(shard, &values, dense, &preds)?;
            let contributions: Vec<Contribution> = grads
                .sparse
                .iter()
                .map(|(&key, g)| Contribution { key, replica, delta: sgd_delta(g, lr) })
                .collect();
            nt.accumulate(transport, device, contributions)?;
            barrier.wait()?;

            let journal = nt.tables[device as usize].take_journal();
            let collective = round * cfg.minibatches as u64 + j as u64;
            let outgoing = if topo.num_nodes > 1 { journal.clone() } else { Vec::new() };
            let sync_entry = transport.clock(me)?;
            let outcome = hbm::sync_replica(transport, spec, collective, grads.dense, outgoing)?;
            let sync_exit = transport.clock(me)?;
            nt.tables[device as usize].apply_synced(journal, outcome.remote, cfg.deterministic)?;
            if !(replica == 0 && cfg.skip_sync_at == Some(collective)) {
                let r = f64::from(topo.replicas());
                let avg: Vec<f32> = outcome.dense_sum.iter().map(|s| (s / r) as f32).collect();
                apply_update(dense, &avg, lr)?;
            }
            self.trace.lock().push(ClockStamp {
                round,
                minibatch: j as u64,
                node,
                device,
                start,
                sync_entry,
                sync_exit,
            });
            barrier.wait()?;
        }
        Ok(loss)
    }

    fn collect(&self, node: u32, input: QueueRx<TrainedJob>) -> Result<()> {
        let mem = &self.mems[node as usize];
        let sync_rounds = u64::from(self.topo.inter_rounds() + self.topo.intra_rounds()) * self.cfg.minibatches as u64;
        let mut prev = mem.store().stats();
        while let Some(job) = input.recv() {
            self.abort.check()?;
            let t0 = Instant::now();
            delay(self.cfg.stage_delays_ms[3]);
            mem.flush_pending()?;
            let counts = mem.take_round_counts(job.round);
            let now = mem.store().stats();
            if let Some(batch_id) = job.batch_id {
                self.records.lock().push(BatchRecord {
                    batch_id,
                    node,
                    round: job.round,
                    examples: job.examples,
                    working_set: job.working_set,
                    ingest_ms: job.ingest_ms,
                    prepare_ms: job.prepare_ms,
                    train_ms: job.train_ms,
                    collect_ms: ms(t0.elapsed()),
                    finished_ms: ms(self.start.elapsed()),
                    train_loss: job.loss,
                    cache_hits: counts.hits,
                    cache_misses: counts.misses,
                    hit_rate: counts.hit_rate(),
                    remote_keys: job.remote_keys,
                    ssd_file_reads: now.file_reads - prev.file_reads,
                    ssd_bytes_read: now.bytes_read - prev.bytes_read,
                    ssd_files_written: now.files_written - prev.files_written,
                    ssd_bytes_written: now.bytes_written - prev.bytes_written,
                    compactions: now.compactions - prev.compactions,
                    sync_rounds,
                });
            }
            prev = now;
            input.done();
        }
        Ok(())
    }

    fn fail(&self) {
        self.abort.raise();
        self.transport.shutdown();
    }

    /// Run `f`, turning a panic into an error and tearing the run down on
    /// failure so no other worker blocks forever.
    fn guarded<T>(&self, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let r = std::panic::catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|p| Err(PipelineError::Panic(panic_message(p))));
        if r.is_err() {
            self.fail();
        }
        r
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

fn first_error(errors: Vec<PipelineError>) -> Option<PipelineError> {
    let mut secondary = None;
    for e in errors {
        if !e.is_secondary() {
            return Some(e);
        }
        secondary.get_or_insert(e);
    }
    secondary
}

/// Working-set size of the first batch, the basis of automatic cache sizing.
fn first_working_set(batches: &[Batch]) -> usize {
    batches.first().map_or(1, |b| extract_working_set(b).len()).max(1)
}

/// Remove what a previous run left in the store directory.
fn clear_store(cfg: &RunConfig) -> Result<()> {
    for n in 0..cfg.nodes {
        let dir = cfg.node_dir(n);
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
    }
    for f in ["manifest.json", "dense.bin"] {
        let p = cfg.store_dir.join(f);
        if p.exists() {
            std::fs::remove_file(p)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    nodes: u32,
    devices: u32,
    embedding_width: usize,
    layer_dims: &'a [usize],
    dense_params: usize,
    sparse_keys: Vec<usize>,
    batches: usize,
    examples: usize,
}

/// Write the trained model: sparse parameters into each node's store,
/// dense weights to `dense.bin` (little-endian f32) and a manifest.
fn export(cfg: &RunConfig, mems: &[MemPs], dense: &DenseParams, batches: &[Batch]) -> Result<TrainedModel> {
    let mut sparse = BTreeMap::new();
    let mut counts = Vec::new();
    for mem in mems {
        mem.flush_all()?;
        mem.store().quiesce()?;
        let keys = mem.store().live_keys();
        counts.push(keys.len());
        sparse.extend(mem.store().load(&keys)?.found);
    }
    let bytes: Vec<u8> = dense.weights.iter().flat_map(|w| w.to_le_bytes()).collect();
    std::fs::write(cfg.store_dir.join("dense.bin"), bytes)?;
    let manifest = Manifest {
        nodes: cfg.nodes,
        devices: cfg.devices,
        embedding_width: cfg.model.embedding_width,
        layer_dims: &cfg.model.layer_dims,
        dense_params: dense.weights.len(),
        sparse_keys: counts,
        batches: batches.len(),
        examples: batches.iter().map(Batch::len).sum(),
    };
    std::fs::write(cfg.store_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap())?;
    Ok(TrainedModel::new(dense.clone(), sparse))
}

/// Load a model written by a training run.
pub fn load_model(cfg: &RunConfig) -> Result<TrainedModel> {
    let bytes = std::fs::read(cfg.store_dir.join("dense.bin"))?;
    let mut dense = DenseParams::zeros(&cfg.model.layer_dims)?;
    if bytes.len() != dense.weights.len() * 4 {
        return Err(ModelError::Shape(format!(
            "dense.bin holds {} bytes, expected {}",
            bytes.len(),
            dense.weights.len() * 4
        ))
        .into());
    }
    for (w, c) in dense.weights.iter_mut().zip(bytes.chunks_exact(4)) {
        *w = f32::from_le_bytes(c.try_into().unwrap());
    }
    let mut sparse: BTreeMap<ParamKey, SparseParam> = BTreeMap::new();
    for n in 0..cfg.nodes {
        let store = SsdStore::open(cfg.store_config(n))?;
        sparse.extend(store.load(&store.live_keys())?.found);
    }
    Ok(TrainedModel::new(dense, sparse))
}

/// Train over `batches` with the distributed engine and export the model to
/// the configured store directory, replacing what a previous run left there.
pub fn run_training(cfg: &RunConfig, batches: &[Batch]) -> Result<RunOutput> {
    cfg.validate()?;
    let topo = cfg.topology();
    clear_store(cfg)?;
    std::fs::create_dir_all(&cfg.store_dir)?;
    let ws = first_working_set(batches);
    let lru = cfg.lru_capacity.resolve(ws, 2);
    let lfu = cfg.lfu_capacity.resolve(ws, 8);
    let mems = (0..topo.num_nodes)
        .map(|n| {
            let store = SsdStore::open(cfg.store_config(n))?;
            Ok(MemPs::new(n, topo.num_nodes, cfg.model.embedding_width, lru, lfu, store))
        })
        .collect::<Result<Vec<_>>>()?;

    let transport = Transport::new(cfg.latency());
    topo.register(&transport);
    let abort = AbortFlag::new();
    let rounds = (batches.len() as u64).div_ceil(u64::from(topo.num_nodes));
    let sh = Shared {
        cfg,
        topo,
        batches,
        rounds,
        transport: transport.clone(),
        mems,
        abort: abort.clone(),
        prepared: RoundGate::new(topo.num_nodes as usize, abort.clone()),
        written: RoundGate::new(topo.num_nodes as usize, abort.clone()),
        start: Instant::now(),
        trace: Mutex::new(Vec::new()),
        records: Mutex::new(Vec::new()),
    };
    log::info!("training {} batches in {rounds} rounds on {}x{}", batches.len(), topo.num_nodes, topo.devices_per_node);

    let mut errors = Vec::new();
    let mut replicas: Vec<Vec<DenseParams>> = Vec::new();
    let mut high_water = [0usize; 3];
    std::thread::scope(|s| {
        let sh = &sh;
        let servers: Vec<_> =
            (0..topo.num_nodes).map(|n| s.spawn(move || sh.guarded(|| sh.serve_mem(n)))).collect();
        let mut stage_handles = Vec::new();
        let mut train_handles = Vec::new();
        let mut gauges = Vec::new();
        for n in 0..topo.num_nodes {
            let (tx1, rx1) = stage_queue(cfg.queue_depths[0]);
            let (tx2, rx2) = stage_queue(cfg.queue_depths[1]);
            let (tx3, rx3) = stage_queue(cfg.queue_depths[2]);
            gauges.push([rx1.gauge.clone(), rx2.gauge.clone(), rx3.gauge.clone()]);
            stage_handles.push(s.spawn(move || sh.guarded(|| sh.ingest(n, tx1))));
            stage_handles.push(s.spawn(move || sh.guarded(|| sh.prepare(n, rx1, tx2))));
            train_handles.push(s.spawn(move || sh.guarded(|| sh.train(n, rx2, tx3))));
            stage_handles.push(s.spawn(move || sh.guarded(|| sh.collect(n, rx3))));
        }
        for h in stage_handles {
            if let Err(e) = h.join().expect("guarded stage") {
                errors.push(e);
            }
        }
        for h in train_handles {
            match h.join().expect("guarded stage") {
                Ok(d) => replicas.push(d),
                Err(e) => errors.push(e),
            }
        }
        for g in gauges {
            for (hw, g) in high_water.iter_mut().zip(g) {
                *hw = (*hw).max(g.high.load(Ordering::SeqCst));
            }
        }
        for n in 0..topo.num_nodes {
            let ep = Endpoint::mem(n);
            let _ = transport.send(ep, ep, MessageKind::MemPullReq, MEM_STOP, Vec::new());
        }
        for h in servers {
            if let Err(e) = h.join().expect("guarded server") {
                errors.push(e);
            }
        }
    });
    if let Some(e) = first_error(errors) {
        return Err(e);
    }
    let wall = sh.start.elapsed();

    let all: Vec<DenseParams> = replicas.into_iter().flatten().collect();
    let replicas_identical = hbm::replicas_identical(&all);
    let dense = all.into_iter().next().map_or_else(|| cfg.model.init_dense(), Ok)?;
    let model = export(cfg, &sh.mems, &dense, batches)?;
    for m in &sh.mems {
        m.check_invariants().map_err(|e| PipelineError::Panic(format!("memory tier invariant: {e}")))?;
    }

    let mut records = sh.records.into_inner();
    records.sort_by_key(|r| r.batch_id);
    let counters = transport.counters();
    let mem_stats: Vec<MemStats> = sh.mems.iter().map(MemPs::stats).collect();
    let ssd_stats: Vec<SsdStats> = sh.mems.iter().map(|m| m.store().stats()).collect();
    let examples: usize = records.iter().map(|r| r.examples).sum();
    let sum = |f: fn(&MemStats) -> u64| mem_stats.iter().map(f).sum::<u64>();
    let summary = Summary {
        nodes: topo.num_nodes,
        devices: topo.devices_per_node,
        batches: records.len(),
        examples,
        wall_secs: wall.as_secs_f64(),
        throughput_eps: if wall.is_zero() { 0.0 } else { examples as f64 / wall.as_secs_f64() },
        sync_collectives: rounds * cfg.minibatches as u64,
        inter_node_rounds: counters.inter_node_rounds(),
        intra_node_rounds: counters.intra_node_rounds(),
        messages: counters.sent,
        message_bytes: counters.by_kind.values().map(|c| c.bytes).sum(),
        cache_hits: sum(|m| m.hits),
        cache_misses: sum(|m| m.misses),
        lru_demotions: sum(|m| m.cache.lru_demotions),
        lfu_evictions: sum(|m| m.cache.lfu_evictions),
        pinned_evictions: sum(|m| m.cache.pinned_evictions),
        ssd_file_reads: ssd_stats.iter().map(|s| s.file_reads).sum(),
        ssd_bytes_read: ssd_stats.iter().map(|s| s.bytes_read).sum(),
        ssd_files_written: ssd_stats.iter().map(|s| s.files_written).sum(),
        ssd_bytes_written: ssd_stats.iter().map(|s| s.bytes_written).sum(),
        compactions: ssd_stats.iter().map(|s| s.compactions).sum(),
        queue_high_water: high_water,
        queue_depths: cfg.queue_depths,
        final_auc: None,
    };
    Ok(RunOutput {
        model,
        metrics: MetricsReport { batches: records, summary },
        counters,
        clock_trace: sh.trace.into_inner(),
        mem_stats,
        ssd_stats,
        replicas_identical,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn examples(n: usize) -> Vec<Example> {
        (0..n).map(|i| Example::new((i % 2) as u8, vec![ParamKey(i as u64)]).unwrap()).collect()
    }

    fn ids(shard: &[Example]) -> Vec<u64> {
        shard.iter().map(|e| e.features[0].0).collect()
    }

    #[test]
    fn shards_cover_the_batch_round_robin() {
        let s = shard_batch(&examples(8), 2, 2).unwrap();
        assert_eq!(ids(&s[0][0]), vec![0, 4]);
        assert_eq!(ids(&s[1][0]), vec![1, 5]);
        assert_eq!(ids(&s[0][1]), vec![2, 6]);
        assert_eq!(ids(&s[1][1]), vec![3, 7]);
        assert_eq!(shard_batch(&examples(8), 2, 2).unwrap(), s);
    }

    #[test]
    fn short_batches_leave_a_short_shard() {
        let s = shard_batch(&examples(5), 2, 2).unwrap();
        let sizes: Vec<usize> = s.iter().flatten().map(Vec::len).collect();
        assert_eq!(sizes, vec![2, 1, 1, 1]);
        let mut all: Vec<u64> = s.iter().flatten().flat_map(|sh| ids(sh)).collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert!(shard_batch(&examples(5), 0, 2).is_err());
    }

    #[test]
    fn stage_queue_is_fifo_and_bounded() {
        let (tx, rx) = stage_queue::<u32>(2);
        std::thread::scope(|s| {
            s.spawn(move || {
                for i in 0..50 {
                    tx.send(i).unwrap();
                }
            });
            for i in 0..50 {
                assert!(rx.len() <= rx.capacity());
                assert_eq!(rx.recv(), Some(i));
                rx.done();
            }
            assert_eq!(rx.recv(), None);
            assert!(rx.high_water() <= rx.capacity() + 1);
        });
    }
}
