//! Disk tier: immutable parameter files plus an in-memory key→file map.
//!
//! Updated parameters are never rewritten in place. A dump chunks them into
//! new files of at most `F` records and repoints the map; the records they
//! supersede become stale. Files with more than half of their records stale
//! are merged into fresh files once total usage crosses the configured
//! threshold, which keeps disk usage within twice the live data.
//!
//! File layout, little-endian:
//!
//! ```text
//! "HPSF" | version u16 | record_count u16 | embedding_width u16 | reserved u16
//! record_count × (key u64 | E × f32 embedding | E × f32 opt_state)   sorted by key
//! crc32 u32 over everything above
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{Receiver, Sender};
use parking_lot::{Mutex, RwLock};
use serde::Serialize;
use thiserror::Error;

use crate::model::{ParamKey, SparseParam};

pub const MAGIC: &[u8; 4] = b"HPSF";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 12;
pub const FOOTER_BYTES: usize = 4;

#[derive(Error, Debug)]
pub enum SsdError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt parameter file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("parameter file {0} is mapped but missing")]
    MissingFile(u64),
    #[error("store is unusable after a simulated crash")]
    Crashed,
    #[error("invalid store config: {0}")]
    InvalidConfig(String),
    #[error("parameter {key} has width {got}, store width is {want}")]
    Width { key: ParamKey, got: usize, want: usize },
}

impl SsdError {
    fn io(path: &Path, source: io::Error) -> Self {
        SsdError::Io { path: path.to_path_buf(), source }
    }
}

pub type Result<T, E = SsdError> = std::result::Result<T, E>;

pub fn file_name(id: u64) -> String {
    format!("pf_{id}.bin")
}

fn parse_file_name(name: &str) -> Option<u64> {
    name.strip_prefix("pf_")?.strip_suffix(".bin")?.parse().ok()
}

pub fn record_bytes(width: usize) -> usize {
    8 + 8 * width
}

pub fn file_bytes(records: usize, width: usize) -> u64 {
    (HEADER_BYTES + records * record_bytes(width) + FOOTER_BYTES) as u64
}

/// Serialize sorted records into the on-disk layout.
pub fn encode_file(width: usize, records: &[(ParamKey, &SparseParam)]) -> Vec<u8> {
    debug_assert!(records.windows(2).all(|w| w[0].0 < w[1].0));
    let mut buf = Vec::with_capacity(file_bytes(records.len(), width) as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u16).to_le_bytes());
    buf.extend_from_slice(&(width as u16).to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    for (key, p) in records {
        buf.extend_from_slice(&key.0.to_le_bytes());
        for v in p.embedding.iter().chain(&p.opt_state) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// A validated file image. Records are decoded on demand.
#[derive(Debug)]
pub struct ParsedFile {
    bytes: Vec<u8>,
    pub width: usize,
    pub record_count: usize,
}

impl ParsedFile {
    pub fn parse(bytes: Vec<u8>) -> std::result::Result<Self, String> {
        if bytes.len() < HEADER_BYTES + FOOTER_BYTES {
            return Err(format!("file is {} bytes, shorter than header+footer", bytes.len()));
        }
        if &bytes[0..4] != MAGIC {
            return Err("bad magic".into());
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let version = u16_at(4);
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let record_count = u16_at(6) as usize;
        let width = u16_at(8) as usize;
        let expect = file_bytes(record_count, width) as usize;
        if bytes.len() != expect {
            return Err(format!("length {} does not match header ({expect})", bytes.len()));
        }
        let body = bytes.len() - FOOTER_BYTES;
        let stored = u32::from_le_bytes(bytes[body..].try_into().unwrap());
        if crc32fast::hash(&bytes[..body]) != stored {
            return Err("checksum mismatch".into());
        }
        let parsed = ParsedFile { bytes, width, record_count };
        if (1..record_count).any(|i| parsed.key_at(i - 1) >= parsed.key_at(i)) {
            return Err("records are not sorted by key".into());
        }
        Ok(parsed)
    }

    fn offset(&self, i: usize) -> usize {
        HEADER_BYTES + i * record_bytes(self.width)
    }

    pub fn key_at(&self, i: usize) -> ParamKey {
        let o = self.offset(i);
        ParamKey(u64::from_le_bytes(self.bytes[o..o + 8].try_into().unwrap()))
    }

    pub fn param_at(&self, i: usize) -> SparseParam {
        let o = self.offset(i) + 8;
        let floats: Vec<f32> = self.bytes[o..o + 8 * self.width]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (emb, opt) = floats.split_at(self.width);
        SparseParam { embedding: emb.to_vec(), opt_state: opt.to_vec() }
    }

    pub fn find(&self, key: ParamKey) -> Option<SparseParam> {
        let (mut lo, mut hi) = (0, self.record_count);
        while lo < hi {
            let mid = (lo + hi) / 2;
            match self.key_at(mid).cmp(&key) {
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
                std::cmp::Ordering::Equal => return Some(self.param_at(mid)),
            }
        }
        None
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> + '_ {
        (0..self.record_count).map(|i| self.key_at(i))
    }

    pub fn records(&self) -> impl Iterator<Item = (ParamKey, SparseParam)> + '_ {
        (0..self.record_count).map(|i| (self.key_at(i), self.param_at(i)))
    }
}

/// Write-path faults for crash and disk-full testing. Budgets count bytes
/// written by the store since the fault was armed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Stop after this many bytes as if the process died: the partial file
    /// stays on disk and the store refuses further work.
    CrashAfter(u64),
    /// Fail with an I/O error after this many bytes; the partial file is
    /// removed and the store stays usable.
    IoErrorAfter(u64),
}

/// Appends through a byte budget and checks the position never moves back.
struct SequentialWriter<'a> {
    file: File,
    path: &'a Path,
    pos: u64,
    budget: Option<(Fault, &'a mut u64)>,
}

enum WriteOutcome {
    Crash,
    Failed(io::Error),
}

impl SequentialWriter<'_> {
    fn append(&mut self, mut data: &[u8], violations: &AtomicU64) -> std::result::Result<(), WriteOutcome> {
        if let Some((fault, left)) = self.budget.as_mut() {
            if (data.len() as u64) > **left {
                let n = **left as usize;
                **left = 0;
                self.file.write_all(&data[..n]).map_err(WriteOutcome::Failed)?;
                return Err(match fault {
                    Fault::CrashAfter(_) => WriteOutcome::Crash,
                    Fault::IoErrorAfter(_) => WriteOutcome::Failed(io::Error::other("injected write failure")),
                });
            }
            **left -= data.len() as u64;
        }
        while !data.is_empty() {
            let chunk = data.len().min(64 * 1024);
            self.file.write_all(&data[..chunk]).map_err(WriteOutcome::Failed)?;
            let new_pos = io::Seek::stream_position(&mut self.file).map_err(WriteOutcome::Failed)?;
            if new_pos < self.pos + chunk as u64 {
                violations.fetch_add(1, Ordering::Relaxed);
            }
            self.pos = new_pos;
            data = &data[chunk..];
        }
        Ok(())
    }
}

/// Deletes its file when the last reference is dropped after being retired.
#[derive(Debug)]
struct FileHandle {
    id: u64,
    path: PathBuf,
    retired: AtomicBool,
}

impl Drop for FileHandle {
    fn drop(&mut self) {
        if self.retired.load(Ordering::SeqCst) {
            if let Err(e) = fs::remove_file(&self.path) {
                log::warn!("could not delete retired file {}: {e}", self.path.display());
            }
        }
    }
}

#[derive(Debug)]
struct FileMeta {
    handle: Arc<FileHandle>,
    records: usize,
    stale: usize,
}

#[derive(Default, Debug)]
struct MapState {
    keys: HashMap<ParamKey, u64>,
    files: BTreeMap<u64, FileMeta>,
    /// Total records over `files`.
    records: usize,
}

impl MapState {
    fn add_file(&mut self, id: u64, meta: FileMeta) {
        self.records += meta.records;
        self.files.insert(id, meta);
    }

    fn remove_file(&mut self, id: u64) -> Option<FileMeta> {
        let meta = self.files.remove(&id)?;
        self.records -= meta.records;
        Some(meta)
    }

    fn disk_bytes(&self, width: usize) -> u64 {
        (self.files.len() * (HEADER_BYTES + FOOTER_BYTES) + self.records * record_bytes(width)) as u64
    }
}

#[derive(Clone, Debug)]
pub struct StoreConfig {
    pub dir: PathBuf,
    pub embedding_width: usize,
    /// Records per file (F).
    pub file_capacity: usize,
    /// Compaction runs when disk bytes reach this multiple of live bytes.
    pub usage_threshold: f64,
    /// Run compaction on a worker thread; otherwise it runs at the end of
    /// each dump.
    pub background_compaction: bool,
    /// fsync each file and the directory after writing.
    pub durable: bool,
}

impl StoreConfig {
    pub fn new(dir: impl Into<PathBuf>, embedding_width: usize) -> Self {
        StoreConfig {
            dir: dir.into(),
            embedding_width,
            file_capacity: 4096,
            usage_threshold: 1.5,
            background_compaction: false,
            durable: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_width == 0 || self.embedding_width > u16::MAX as usize {
            return Err(SsdError::InvalidConfig("embedding width must be in 1..=65535".into()));
        }
        if self.file_capacity == 0 || self.file_capacity > u16::MAX as usize {
            return Err(SsdError::InvalidConfig("file capacity must be in 1..=65535".into()));
        }
        if !(self.usage_threshold.is_finite() && self.usage_threshold >= 1.0) {
            return Err(SsdError::InvalidConfig("usage threshold must be at least 1.0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SsdStats {
    pub files: usize,
    pub records: usize,
    pub live_records: usize,
    pub stale_records: usize,
    pub disk_bytes: u64,
    pub live_bytes: u64,
    pub file_reads: u64,
    pub bytes_read: u64,
    pub files_written: u64,
    pub bytes_written: u64,
    pub compactions: u64,
    pub files_merged: u64,
    pub write_violations: u64,
    pub recovered_files: u64,
    pub discarded_files: u64,
}

#[derive(Default)]
struct Counters {
    file_reads: AtomicU64,
    bytes_read: AtomicU64,
    files_written: AtomicU64,
    bytes_written: AtomicU64,
    compactions: AtomicU64,
    files_merged: AtomicU64,
    write_violations: AtomicU64,
    recovered_files: AtomicU64,
    discarded_files: AtomicU64,
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct LoadResult {
    pub found: BTreeMap<ParamKey, SparseParam>,
    pub missing: Vec<ParamKey>,
}

struct Inner {
    cfg: StoreConfig,
    state: RwLock<MapState>,
    /// Held by whoever is writing files (dump or compaction merge).
    writer: Mutex<WriterState>,
    counters: Counters,
    crashed: AtomicBool,
}

struct WriterState {
    next_id: u64,
    fault: Option<(Fault, u64)>,
}

pub struct SsdStore {
    inner: Arc<Inner>,
    compactor: Option<(Sender<()>, JoinHandle<()>)>,
}

impl SsdStore {
    /// Open a store directory, rebuilding the key→file map from the files
    /// present. Files that fail validation are deleted.
    pub fn open(cfg: StoreConfig) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(&cfg.dir).map_err(|e| SsdError::io(&cfg.dir, e))?;
        let counters = Counters::default();
        let mut ids = Vec::new();
        for entry in fs::read_dir(&cfg.dir).map_err(|e| SsdError::io(&cfg.dir, e))? {
            let entry = entry.map_err(|e| SsdError::io(&cfg.dir, e))?;
            if let Some(id) = entry.file_name().to_str().and_then(parse_file_name) {
                ids.push(id);
            }
        }
        ids.sort_unstable_by(|a, b| b.cmp(a));
        let next_id = ids.first().map_or(0, |m| m + 1);

        let mut state = MapState::default();
        for id in ids {
            let path = cfg.dir.join(file_name(id));
            let bytes = fs::read(&path).map_err(|e| SsdError::io(&path, e))?;
            let parsed = match ParsedFile::parse(bytes) {
                Ok(p) if p.width == cfg.embedding_width => p,
                Ok(p) => {
                    return Err(SsdError::Corrupt {
                        path,
                        reason: format!("width {} differs from store width {}", p.width, cfg.embedding_width),
                    })
                }
                Err(reason) => {
                    log::warn!("discarding invalid parameter file {}: {reason}", path.display());
                    fs::remove_file(&path).map_err(|e| SsdError::io(&path, e))?;
                    counters.discarded_files.fetch_add(1, Ordering::Relaxed);
                    continue;
                }
            };
            // Newest file first, so the first sighting of a key wins.
            let mut stale = 0;
            for key in parsed.keys() {
                if state.keys.contains_key(&key) {
                    stale += 1;
                } else {
                    state.keys.insert(key, id);
                }
            }
            state.add_file(
                id,
                FileMeta {
                    handle: Arc::new(FileHandle { id, path, retired: AtomicBool::new(false) }),
                    records: parsed.record_count,
                    stale,
                },
            );
            counters.recovered_files.fetch_add(1, Ordering::Relaxed);
        }

        let inner = Arc::new(Inner {
            cfg: cfg.clone(),
            state: RwLock::new(state),
            writer: Mutex::new(WriterState { next_id, fault: None }),
            counters,
            crashed: AtomicBool::new(false),
        });
        let compactor = cfg.background_compaction.then(|| {
            let (tx, rx) = crossbeam_channel::unbounded();
            let worker = inner.clone();
            let handle = std::thread::Builder::new()
                .name("ssd-compactor".into())
                .spawn(move || compactor_loop(worker, rx))
                .expect("spawn compactor");
            (tx, handle)
        });
        Ok(SsdStore { inner, compactor })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.inner.cfg
    }

    pub fn inject_fault(&self, fault: Option<Fault>) {
        self.inner.writer.lock().fault = fault.map(|f| match f {
            Fault::CrashAfter(n) | Fault::IoErrorAfter(n) => (f, n),
        });
    }

    pub fn is_crashed(&self) -> bool {
        self.inner.crashed.load(Ordering::SeqCst)
    }

    pub fn load(&self, keys: &[ParamKey]) -> Result<LoadResult> {
        self.inner.load(keys)
    }

    /// Write `params` as new files and repoint the map. Returns the new file
    /// ids; an empty input writes nothing.
    pub fn dump(&self, params: &BTreeMap<ParamKey, SparseParam>) -> Result<Vec<u64>> {
        let ids = self.inner.dump(params)?;
        match &self.compactor {
            Some((tx, _)) => {
                let _ = tx.send(());
            }
            None => {
                self.inner.maybe_compact(false)?;
            }
        }
        Ok(ids)
    }

    /// Merge every eligible file now if usage is at or above the threshold,
    /// or unconditionally when `force` is set. Returns the number of files
    /// merged.
    pub fn compact_now(&self, force: bool) -> Result<usize> {
        self.inner.maybe_compact(force)
    }

    /// Blocks until the background compactor has caught up, then runs one
    /// more pass in the caller.
    pub fn quiesce(&self) -> Result<()> {
        // The writer lock serializes with any in-progress merge.
        drop(self.inner.writer.lock());
        self.inner.maybe_compact(false)?;
        Ok(())
    }

    pub fn contains(&self, key: ParamKey) -> bool {
        self.inner.state.read().keys.contains_key(&key)
    }

    pub fn live_keys(&self) -> Vec<ParamKey> {
        let mut v: Vec<ParamKey> = self.inner.state.read().keys.keys().copied().collect();
        v.sort_unstable();
        v
    }

    pub fn file_of(&self, key: ParamKey) -> Option<u64> {
        self.inner.state.read().keys.get(&key).copied()
    }

    /// Per-file `(records, stale)` as tracked in memory.
    pub fn file_counters(&self) -> BTreeMap<u64, (usize, usize)> {
        self.inner
            .state
            .read()
            .files
            .iter()
            .map(|(&id, m)| (id, (m.records, m.stale)))
            .collect()
    }

    pub fn stats(&self) -> SsdStats {
        let st = self.inner.state.read();
        let width = self.inner.cfg.embedding_width;
        let records = st.records;
        let stale: usize = st.files.values().map(|m| m.stale).sum();
        let c = &self.inner.counters;
        SsdStats {
            files: st.files.len(),
            records,
            live_records: st.keys.len(),
            stale_records: stale,
            disk_bytes: st.disk_bytes(width),
            live_bytes: (st.keys.len() * record_bytes(width)) as u64,
            file_reads: c.file_reads.load(Ordering::Relaxed),
            bytes_read: c.bytes_read.load(Ordering::Relaxed),
            files_written: c.files_written.load(Ordering::Relaxed),
            bytes_written: c.bytes_written.load(Ordering::Relaxed),
            compactions: c.compactions.load(Ordering::Relaxed),
            files_merged: c.files_merged.load(Ordering::Relaxed),
            write_violations: c.write_violations.load(Ordering::Relaxed),
            recovered_files: c.recovered_files.load(Ordering::Relaxed),
            discarded_files: c.discarded_files.load(Ordering::Relaxed),
        }
    }

    /// Bytes of all parameter files currently in the directory, including
    /// retired files a reader still holds open.
    pub fn disk_usage(&self) -> Result<u64> {
        dir_usage(&self.inner.cfg.dir)
    }

    /// Rescan every mapped file and compare the in-memory map and stale
    /// counters against what is on disk.
    pub fn check_consistency(&self) -> Result<Vec<String>> {
        let st = self.inner.state.read();
        let mut problems = Vec::new();
        let mut newest: HashMap<ParamKey, u64> = HashMap::new();
        let mut per_file_keys: BTreeMap<u64, Vec<ParamKey>> = BTreeMap::new();
        for (&id, meta) in st.files.iter() {
            let bytes = fs::read(&meta.handle.path).map_err(|e| SsdError::io(&meta.handle.path, e))?;
            match ParsedFile::parse(bytes) {
                Ok(p) => {
                    if p.record_count != meta.records {
                        problems.push(format!("file {id}: {} records on disk, {} tracked", p.record_count, meta.records));
                    }
                    let keys: Vec<ParamKey> = p.keys().collect();
                    for &k in &keys {
                        let e = newest.entry(k).or_insert(id);
                        *e = (*e).max(id);
                    }
                    per_file_keys.insert(id, keys);
                }
                Err(reason) => problems.push(format!("file {id}: {reason}")),
            }
        }
        if newest.len() != st.keys.len() {
            problems.push(format!("{} keys on disk, {} mapped", newest.len(), st.keys.len()));
        }
        for (k, &id) in &st.keys {
            if newest.get(k) != Some(&id) {
                problems.push(format!("key {k} mapped to file {id}, newest copy in {:?}", newest.get(k)));
            }
        }
        for (id, keys) in &per_file_keys {
            let stale = keys.iter().filter(|k| st.keys.get(k) != Some(id)).count();
            let tracked = st.files[id].stale;
            if stale != tracked {
                problems.push(format!("file {id}: {stale} stale records, counter says {tracked}"));
            }
        }
        Ok(problems)
    }
}

impl Drop for SsdStore {
    fn drop(&mut self) {
        if let Some((tx, handle)) = self.compactor.take() {
            drop(tx);
            let _ = handle.join();
        }
    }
}

fn compactor_loop(inner: Arc<Inner>, rx: Receiver<()>) {
    while rx.recv().is_ok() {
        // Coalesce bursts of dumps into one check.
        while rx.try_recv().is_ok() {}
        if let Err(e) = inner.maybe_compact(false) {
            if !matches!(e, SsdError::Crashed) {
                log::error!("background compaction failed: {e}");
            }
        }
    }
}

fn dir_usage(dir: &Path) -> Result<u64> {
    let mut total = 0;
    for entry in fs::read_dir(dir).map_err(|e| SsdError::io(dir, e))? {
        let entry = entry.map_err(|e| SsdError::io(dir, e))?;
        if entry.file_name().to_str().and_then(parse_file_name).is_some() {
            total += entry.metadata().map_err(|e| SsdError::io(&entry.path(), e))?.len();
        }
    }
    Ok(total)
}

impl Inner {
    fn check_alive(&self) -> Result<()> {
        if self.crashed.load(Ordering::SeqCst) {
            Err(SsdError::Crashed)
        } else {
            Ok(())
        }
    }

    fn read_file(&self, handle: &FileHandle) -> Result<ParsedFile> {
        let bytes = fs::read(&handle.path).map_err(|e| {
            if e.kind() == io::ErrorKind::NotFound {
                SsdError::MissingFile(handle.id)
            } else {
                SsdError::io(&handle.path, e)
            }
        })?;
        self.counters.file_reads.fetch_add(1, Ordering::Relaxed);
        self.counters.bytes_read.fetch_add(bytes.len() as u64, Ordering::Relaxed);
        ParsedFile::parse(bytes).map_err(|reason| SsdError::Corrupt { path: handle.path.clone(), reason })
    }

    fn load(&self, keys: &[ParamKey]) -> Result<LoadResult> {
        self.check_alive()?;
        let mut by_file: BTreeMap<u64, (Arc<FileHandle>, Vec<ParamKey>)> = BTreeMap::new();
        let mut out = LoadResult::default();
        {
            let st = self.state.read();
            for &k in keys {
                match st.keys.get(&k) {
                    Some(id) => by_file
                        .entry(*id)
                        .or_insert_with(|| (st.files[id].handle.clone(), Vec::new()))
                        .1
                        .push(k),
                    None => out.missing.push(k),
                }
            }
        }
        // Holding the handles keeps retired files on disk until we are done.
        for (_, (handle, wanted)) in by_file {
            let file = self.read_file(&handle)?;
            for k in wanted {
                let p = file.find(k).ok_or_else(|| SsdError::Corrupt {
                    path: handle.path.clone(),
                    reason: format!("mapped key {k} not present"),
                })?;
                out.found.insert(k, p);
            }
        }
        out.missing.sort_unstable();
        out.missing.dedup();
        Ok(out)
    }

    /// Write one file. On a simulated crash the store is poisoned; on an I/O
    /// failure the partial file is removed.
    fn write_file(&self, w: &mut WriterState, records: &[(ParamKey, &SparseParam)]) -> Result<Arc<FileHandle>> {
        let id = w.next_id;
        w.next_id += 1;
        let path = self.cfg.dir.join(file_name(id));
        let bytes = encode_file(self.cfg.embedding_width, records);
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| SsdError::io(&path, e))?;
        let mut writer = SequentialWriter {
            file,
            path: &path,
            pos: 0,
            budget: w.fault.as_mut().map(|(f, left)| (*f, left)),
        };
        let durable = self.cfg.durable;
        let result = writer.append(&bytes, &self.counters.write_violations).and_then(|_| {
            if durable {
                writer.file.sync_all().map_err(WriteOutcome::Failed)
            } else {
                Ok(())
            }
        });
        match result {
            Ok(()) => {}
            Err(WriteOutcome::Crash) => {
                self.crashed.store(true, Ordering::SeqCst);
                return Err(SsdError::Crashed);
            }
            Err(WriteOutcome::Failed(e)) => {
                let _ = fs::remove_file(writer.path);
                return Err(SsdError::io(writer.path, e));
            }
        }
        if durable {
            if let Ok(d) = File::open(&self.cfg.dir) {
                let _ = d.sync_all();
            }
        }
        self.counters.files_written.fetch_add(1, Ordering::Relaxed);
        self.counters.bytes_written.fetch_add(bytes.len() as u64, Ordering::Relaxed);
        Ok(Arc::new(FileHandle { id, path, retired: AtomicBool::new(false) }))
    }

    fn dump(&self, params: &BTreeMap<ParamKey, SparseParam>) -> Result<Vec<u64>> {
        self.check_alive()?;
        let width = self.cfg.embedding_width;
        for (&key, p) in params {
            if p.embedding.len() != width || p.opt_state.len() != width {
                return Err(SsdError::Width { key, got: p.embedding.len(), want: width });
            }
        }
        let records: Vec<(ParamKey, &SparseParam)> = params.iter().map(|(k, v)| (*k, v)).collect();
        let mut w = self.writer.lock();
        let mut written = Vec::new();
        for chunk in records.chunks(self.cfg.file_capacity) {
            let handle = self.write_file(&mut w, chunk)?;
            written.push((handle, chunk));
        }
        let mut st = self.state.write();
        let mut ids = Vec::with_capacity(written.len());
        for (handle, chunk) in written {
            let id = handle.id;
            for (k, _) in chunk {
                if let Some(old) = st.keys.insert(*k, id) {
                    st.files.get_mut(&old).expect("mapped file has metadata").stale += 1;
                }
            }
            st.add_file(id, FileMeta { handle, records: chunk.len(), stale: 0 });
            ids.push(id);
        }
        Ok(ids)
    }

    fn maybe_compact(&self, force: bool) -> Result<usize> {
        self.check_alive()?;
        let mut w = self.writer.lock();
        let width = self.cfg.embedding_width;
        let victims: Vec<(u64, Arc<FileHandle>)> = {
            let st = self.state.read();
            let disk = st.disk_bytes(width);
            let live = (st.keys.len() * record_bytes(width)) as u64;
            if !force && (disk as f64) < self.cfg.usage_threshold * live as f64 && live > 0 {
                return Ok(0);
            }
            st.files
                .iter()
                .filter(|(_, m)| 2 * m.stale > m.records)
                .map(|(&id, m)| (id, m.handle.clone()))
                .collect()
        };
        if victims.is_empty() {
            return Ok(0);
        }

        // Only this writer remaps keys, so the live set read here stays valid.
        let mut live: BTreeMap<ParamKey, SparseParam> = BTreeMap::new();
        for (id, handle) in &victims {
            let file = self.read_file(handle)?;
            let st = self.state.read();
            for (k, p) in file.records() {
                if st.keys.get(&k) == Some(id) {
                    live.insert(k, p);
                }
            }
        }
        let records: Vec<(ParamKey, &SparseParam)> = live.iter().map(|(k, v)| (*k, v)).collect();
        let mut written = Vec::new();
        for chunk in records.chunks(self.cfg.file_capacity) {
            let handle = self.write_file(&mut w, chunk)?;
            written.push((handle, chunk));
        }

        let mut st = self.state.write();
        for (handle, chunk) in written {
            for (k, _) in chunk {
                st.keys.insert(*k, handle.id);
            }
            st.add_file(handle.id, FileMeta { handle, records: chunk.len(), stale: 0 });
        }
        for (id, _) in &victims {
            if let Some(meta) = st.remove_file(*id) {
                meta.handle.retired.store(true, Ordering::SeqCst);
            }
        }
        drop(st);
        drop(w);
        self.counters.compactions.fetch_add(1, Ordering::Relaxed);
        self.counters.files_merged.fetch_add(victims.len() as u64, Ordering::Relaxed);
        log::debug!("compacted {} files ({} live records)", victims.len(), live.len());
        Ok(victims.len())
    }
}

#[derive(Debug, Default, Clone, Serialize)]
pub struct FsckReport {
    pub files: usize,
    pub corrupt: Vec<String>,
    pub live_keys: usize,
    pub records: usize,
    pub stale_records: usize,
    pub disk_bytes: u64,
    pub live_bytes: u64,
    pub width: Option<usize>,
}

impl FsckReport {
    pub fn is_consistent(&self) -> bool {
        self.corrupt.is_empty()
    }
}

/// Read-only scan of a store directory: validates every file, rebuilds the
/// key map newest-first, and recounts stale records.
pub fn fsck(dir: &Path) -> Result<FsckReport> {
    let mut report = FsckReport::default();
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| SsdError::io(dir, e))? {
        let entry = entry.map_err(|e| SsdError::io(dir, e))?;
        if let Some(id) = entry.file_name().to_str().and_then(parse_file_name) {
            ids.push(id);
        }
    }
    ids.sort_unstable_by(|a, b| b.cmp(a));
    let mut seen: HashMap<ParamKey, u64> = HashMap::new();
    for id in ids {
        let path = dir.join(file_name(id));
        let bytes = fs::read(&path).map_err(|e| SsdError::io(&path, e))?;
        report.disk_bytes += bytes.len() as u64;
        report.files += 1;
        match ParsedFile::parse(bytes) {
            Ok(p) => {
                match report.width {
                    None => report.width = Some(p.width),
                    Some(w) if w != p.width => {
                        report.corrupt.push(format!("{}: width {} differs from {w}", file_name(id), p.width));
                        continue;
                    }
                    _ => {}
                }
                report.records += p.record_count;
                for k in p.keys() {
                    if seen.contains_key(&k) {
                        report.stale_records += 1;
                    } else {
                        seen.insert(k, id);
                    }
                }
            }
            Err(reason) => report.corrupt.push(format!("{}: {reason}", file_name(id))),
        }
    }
    report.live_keys = seen.len();
    report.live_bytes = (seen.len() * record_bytes(report.width.unwrap_or(0))) as u64;
    Ok(report)
}
