//! Disk-resident tuple files with sequential-only access.
//!
//! A tuple file is a flat sequence of fixed-size little-endian records:
//! `n_dims` × `u32` attribute ids followed by one `f64` measure. Files are
//! immutable once written; filtering produces a new file. The only way to
//! read tuples back is [`TupleFile::scan`], which walks the file front to
//! back in small batches.
//!
//! A [`Storage`] owns the scratch directory, I/O counters and an optional
//! in-memory cache that keeps the leading tuples of files resident.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument::IoStats;

/// Records held by each open reader or writer buffer.
pub const DEFAULT_IO_BATCH: usize = 8;

/// Slots the write-through cache reserves at a time.
const CACHE_RESERVE_CHUNK: usize = 4096;

pub fn record_size(n_dims: usize) -> usize {
    4 * n_dims + 8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tuple {
    pub attrs: Vec<u32>,
    pub measure: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheBudget {
    pub max_resident_tuples: usize,
}

impl CacheBudget {
    pub const DISABLED: CacheBudget = CacheBudget {
        max_resident_tuples: 0,
    };

    pub const UNLIMITED: CacheBudget = CacheBudget {
        max_resident_tuples: usize::MAX,
    };

    pub fn tuples(n: usize) -> Self {
        CacheBudget {
            max_resident_tuples: n,
        }
    }
}

impl Default for CacheBudget {
    fn default() -> Self {
        Self::DISABLED
    }
}

/// Which cached prefixes may be evicted to make room for another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CachePriority {
    Low,
    /// Peeling working files; may evict idle `Low` entries.
    High,
}

#[derive(Debug, Default)]
struct Prefix {
    attrs: Vec<u32>,
    measures: Vec<f64>,
}

impl Prefix {
    fn len(&self) -> usize {
        self.measures.len()
    }
}

#[derive(Debug)]
struct CacheEntry {
    prefix: Arc<Prefix>,
    priority: CachePriority,
}

#[derive(Debug)]
struct CacheState {
    budget: usize,
    /// Slots in committed entries plus outstanding reservations.
    resident: usize,
    entries: HashMap<u64, CacheEntry>,
}

impl CacheState {
    fn reserve(&mut self, want: usize, priority: CachePriority) -> usize {
        if want == 0 || self.budget == 0 {
            return 0;
        }
        if self.budget - self.resident < want && priority == CachePriority::High {
            let mut idle: Vec<u64> = self
                .entries
                .iter()
                .filter(|(_, e)| e.priority < priority && Arc::strong_count(&e.prefix) == 1)
                .map(|(&id, _)| id)
                .collect();
            idle.sort_unstable();
            for id in idle {
                if self.budget - self.resident >= want {
                    break;
                }
                if let Some(e) = self.entries.remove(&id) {
                    self.resident -= e.prefix.len();
                }
            }
        }
        let grant = want.min(self.budget - self.resident);
        self.resident += grant;
        grant
    }

    fn release(&mut self, n: usize) {
        self.resident -= n;
    }

    /// Commits `prefix` under `id`, returning unused reserved slots.
    fn commit(&mut self, id: u64, prefix: Prefix, reserved: usize, priority: CachePriority) {
        debug_assert!(prefix.len() <= reserved);
        if self.entries.contains_key(&id) {
            self.release(reserved);
            return;
        }
        self.release(reserved - prefix.len());
        if prefix.len() > 0 {
            self.entries.insert(
                id,
                CacheEntry {
                    prefix: Arc::new(prefix),
                    priority,
                },
            );
        }
    }

    fn remove(&mut self, id: u64) {
        if let Some(e) = self.entries.remove(&id) {
            self.resident -= e.prefix.len();
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StorageOptions {
    /// Records buffered per open reader or writer.
    pub io_batch: usize,
    pub cache: CacheBudget,
}

impl Default for StorageOptions {
    fn default() -> Self {
        Self {
            io_batch: DEFAULT_IO_BATCH,
            cache: CacheBudget::DISABLED,
        }
    }
}

#[derive(Debug)]
struct StorageInner {
    dir: PathBuf,
    stats: IoStats,
    cache: Mutex<CacheState>,
    next_id: AtomicU64,
    io_batch: usize,
}

/// Scratch directory, I/O counters and tuple cache shared by all files of a run.
#[derive(Debug, Clone)]
pub struct Storage {
    inner: Arc<StorageInner>,
}

impl Storage {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        Self::with_options(dir, StorageOptions::default())
    }

    pub fn with_options(dir: impl Into<PathBuf>, options: StorageOptions) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        if options.io_batch == 0 {
            return Err(Error::Config("io batch must be at least one record".into()));
        }
        Ok(Self {
            inner: Arc::new(StorageInner {
                dir,
                stats: IoStats::default(),
                cache: Mutex::new(CacheState {
                    budget: options.cache.max_resident_tuples,
                    resident: 0,
                    entries: HashMap::new(),
                }),
                next_id: AtomicU64::new(0),
                io_batch: options.io_batch,
            }),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.inner.dir
    }

    pub fn stats(&self) -> &IoStats {
        &self.inner.stats
    }

    pub fn cache_budget(&self) -> CacheBudget {
        CacheBudget::tuples(self.cache().budget)
    }

    /// Changes the cache budget. Idle cached prefixes are discarded; call
    /// this between runs, when no scan is open.
    pub fn set_cache_budget(&self, budget: CacheBudget) {
        let mut cache = self.cache();
        let idle: Vec<u64> = cache
            .entries
            .iter()
            .filter(|(_, e)| Arc::strong_count(&e.prefix) == 1)
            .map(|(&id, _)| id)
            .collect();
        for id in idle {
            cache.remove(id);
        }
        cache.budget = budget.max_resident_tuples;
    }

    /// Tuples currently held (or reserved) by the cache.
    pub fn cache_resident(&self) -> usize {
        self.cache().resident
    }

    fn cache(&self) -> MutexGuard<'_, CacheState> {
        self.inner.cache.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Opens a new temporary tuple file for writing.
    pub fn create(&self, n_dims: usize, priority: CachePriority) -> Result<TupleWriter> {
        let id = self.inner.next_id.fetch_add(1, Ordering::Relaxed);
        let path = self.inner.dir.join(format!("tuples-{id:06}.bin"));
        TupleWriter::new(self.clone(), id, path, n_dims, priority)
    }
}

#[derive(Debug)]
struct FileInner {
    id: u64,
    path: PathBuf,
    n_dims: usize,
    len: u64,
    mass: f64,
    priority: CachePriority,
    storage: Storage,
}

impl Drop for FileInner {
    fn drop(&mut self) {
        self.storage.cache().remove(self.id);
        let _ = fs::remove_file(&self.path);
    }
}

/// An immutable, fully written tuple file. Cloning shares the file; it is
/// deleted when the last clone is dropped.
#[derive(Debug, Clone)]
pub struct TupleFile {
    inner: Arc<FileInner>,
}

impl TupleFile {
    pub fn n_dims(&self) -> usize {
        self.inner.n_dims
    }

    pub fn len(&self) -> u64 {
        self.inner.len
    }

    pub fn is_empty(&self) -> bool {
        self.inner.len == 0
    }

    /// Sum of measures, accumulated in file order while the file was written.
    pub fn mass(&self) -> f64 {
        self.inner.mass
    }

    pub fn path(&self) -> &Path {
        &self.inner.path
    }

    pub fn storage(&self) -> &Storage {
        &self.inner.storage
    }

    /// Sequential scan from the first record. Served from the storage cache
    /// where a prefix is resident; populates the cache when room allows.
    pub fn scan(&self) -> Result<TupleReader> {
        TupleReader::open(self.clone())
    }

    /// Visits every tuple in file order.
    pub fn for_each(&self, mut f: impl FnMut(&[u32], f64)) -> Result<()> {
        let mut reader = self.scan()?;
        while let Some((attrs, measure)) = reader.next_record()? {
            f(attrs, measure);
        }
        Ok(())
    }

    /// Tuples in this file, decoded. Intended for small files and tests.
    pub fn read_all(&self) -> Result<Vec<Tuple>> {
        self.scan()?.collect()
    }
}

/// Sequential cursor over a [`TupleFile`]. There is no seek or indexed access.
#[derive(Debug)]
pub struct TupleReader {
    file: TupleFile,
    cached: Option<Arc<Prefix>>,
    populate: Option<(Prefix, usize)>,
    pos: u64,
    disk: Option<File>,
    offset: u64,
    buf: Vec<u8>,
    buf_pos: usize,
    buf_len: usize,
    attrs: Vec<u32>,
    batch: usize,
}

impl TupleReader {
    fn open(file: TupleFile) -> Result<Self> {
        let storage = file.storage().clone();
        let batch = storage.inner.io_batch;
        let n_dims = file.n_dims();
        let (cached, populate) = {
            let mut cache = storage.cache();
            match cache.entries.get(&file.inner.id) {
                Some(e) => (Some(Arc::clone(&e.prefix)), None),
                None => {
                    let want = usize::try_from(file.len()).unwrap_or(usize::MAX);
                    let grant = cache.reserve(want, file.inner.priority);
                    let populate = (grant > 0).then(|| {
                        (
                            Prefix {
                                attrs: Vec::with_capacity(grant * n_dims),
                                measures: Vec::with_capacity(grant),
                            },
                            grant,
                        )
                    });
                    (None, populate)
                }
            }
        };
        storage.stats().scan_started();
        storage.stats().acquire_in_flight(batch);
        Ok(Self {
            file,
            cached,
            populate,
            pos: 0,
            disk: None,
            offset: 0,
            buf: vec![0; batch * record_size(n_dims)],
            buf_pos: 0,
            buf_len: 0,
            attrs: vec![0; n_dims],
            batch,
        })
    }

    /// Index of the next tuple to be returned.
    pub fn position(&self) -> u64 {
        self.pos
    }

    /// Advances to the next tuple. The returned slice is valid until the next call.
    pub fn next_record(&mut self) -> Result<Option<(&[u32], f64)>> {
        if self.pos >= self.file.len() {
            self.finish_populate();
            return Ok(None);
        }
        let n_dims = self.file.n_dims();
        if let Some(prefix) = &self.cached {
            let i = self.pos as usize;
            if i < prefix.len() {
                self.pos += 1;
                self.file.storage().stats().cache_hits(1);
                let prefix = self.cached.as_ref().expect("checked above");
                return Ok(Some((
                    &prefix.attrs[i * n_dims..(i + 1) * n_dims],
                    prefix.measures[i],
                )));
            }
        }
        if self.buf_pos == self.buf_len {
            self.refill()?;
        }
        let rec = record_size(n_dims);
        let bytes = &self.buf[self.buf_pos..self.buf_pos + rec];
        for (d, chunk) in self.attrs.iter_mut().zip(bytes.chunks_exact(4)) {
            *d = u32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
        let measure = f64::from_le_bytes(bytes[4 * n_dims..].try_into().expect("8-byte measure"));
        self.buf_pos += rec;
        self.pos += 1;
        if let Some((prefix, reserved)) = &mut self.populate {
            if prefix.len() < *reserved {
                prefix.attrs.extend_from_slice(&self.attrs);
                prefix.measures.push(measure);
            }
            if prefix.len() == *reserved {
                self.finish_populate();
            }
        }
        Ok(Some((&self.attrs, measure)))
    }

    fn refill(&mut self) -> Result<()> {
        let rec = record_size(self.file.n_dims());
        if self.disk.is_none() {
            let path = self.file.path();
            let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
            self.offset = self.pos * rec as u64;
            if self.offset > 0 {
                f.seek(SeekFrom::Start(self.offset)).map_err(|e| Error::Read {
                    path: path.to_path_buf(),
                    offset: self.offset,
                    source: e,
                })?;
            }
            self.disk = Some(f);
        }
        let remaining = (self.file.len() - self.pos) as usize;
        let records = remaining.min(self.batch);
        let want = records * rec;
        let start = self.offset;
        let disk = self.disk.as_mut().expect("opened above");
        disk.read_exact(&mut self.buf[..want]).map_err(|e| Error::Read {
            path: self.file.path().to_path_buf(),
            offset: start,
            source: e,
        })?;
        let stats = self.file.storage().stats();
        if self.offset < start {
            stats.offset_regression();
        }
        self.offset = start + want as u64;
        stats.disk_read(records as u64);
        self.buf_pos = 0;
        self.buf_len = want;
        Ok(())
    }

    fn finish_populate(&mut self) {
        if let Some((prefix, reserved)) = self.populate.take() {
            let f = &self.file.inner;
            f.storage.cache().commit(f.id, prefix, reserved, f.priority);
        }
    }
}

impl Iterator for TupleReader {
    type Item = Result<Tuple>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.next_record() {
            Ok(Some((attrs, measure))) => Some(Ok(Tuple {
                attrs: attrs.to_vec(),
                measure,
            })),
            Ok(None) => None,
            Err(e) => Some(Err(e)),
        }
    }
}

impl Drop for TupleReader {
    fn drop(&mut self) {
        let storage = self.file.storage();
        storage.stats().release_in_flight(self.batch);
        if let Some((_, reserved)) = self.populate.take() {
            storage.cache().release(reserved);
        }
    }
}

/// Appends records to a new tuple file. Dropping an unfinished writer
/// removes the partial file.
#[derive(Debug)]
pub struct TupleWriter {
    storage: Storage,
    id: u64,
    path: PathBuf,
    n_dims: usize,
    file: Option<File>,
    buf: Vec<u8>,
    batch: usize,
    len: u64,
    mass: f64,
    priority: CachePriority,
    cache: Option<(Prefix, usize)>,
    cache_open: bool,
}

impl TupleWriter {
    fn new(
        storage: Storage,
        id: u64,
        path: PathBuf,
        n_dims: usize,
        priority: CachePriority,
    ) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let batch = storage.inner.io_batch;
        storage.stats().acquire_in_flight(batch);
        // Only peeling working files are cached as they are written.
        let cache_open = priority == CachePriority::High && storage.cache().budget > 0;
        Ok(Self {
            storage,
            id,
            path,
            n_dims,
            file: Some(file),
            buf: Vec::with_capacity(batch * record_size(n_dims)),
            batch,
            len: 0,
            mass: 0.0,
            priority,
            cache: None,
            cache_open,
        })
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, attrs: &[u32], measure: f64) -> Result<()> {
        assert_eq!(attrs.len(), self.n_dims, "tuple arity mismatch");
        for &a in attrs {
            self.buf.extend_from_slice(&a.to_le_bytes());
        }
        self.buf.extend_from_slice(&measure.to_le_bytes());
        self.len += 1;
        self.mass += measure;
        if self.cache_open {
            self.cache_record(attrs, measure);
        }
        if self.buf.len() >= self.batch * record_size(self.n_dims) {
            self.flush()?;
        }
        Ok(())
    }

    fn cache_record(&mut self, attrs: &[u32], measure: f64) {
        let (prefix, reserved) = self.cache.get_or_insert_with(|| (Prefix::default(), 0));
        if prefix.len() == *reserved {
            let grant = self
                .storage
                .cache()
                .reserve(CACHE_RESERVE_CHUNK, self.priority);
            if grant == 0 {
                self.cache_open = false;
                return;
            }
            *reserved += grant;
        }
        prefix.attrs.extend_from_slice(attrs);
        prefix.measures.push(measure);
    }

    fn flush(&mut self) -> Result<()> {
        if self.buf.is_empty() {
            return Ok(());
        }
        let records = self.buf.len() / record_size(self.n_dims);
        let file = self.file.as_mut().expect("writer already finished");
        file.write_all(&self.buf)
            .map_err(|e| Error::io(&self.path, e))?;
        self.storage.stats().written(records as u64);
        self.buf.clear();
        Ok(())
    }

    pub fn finish(mut self) -> Result<TupleFile> {
        self.flush()?;
        let file = self.file.take().expect("writer already finished");
        file.sync_data().ok();
        drop(file);
        let inner = FileInner {
            id: self.id,
            path: self.path.clone(),
            n_dims: self.n_dims,
            len: self.len,
            mass: self.mass,
            priority: self.priority,
            storage: self.storage.clone(),
        };
        if let Some((prefix, reserved)) = self.cache.take() {
            self.storage
                .cache()
                .commit(self.id, prefix, reserved, self.priority);
        }
        Ok(TupleFile {
            inner: Arc::new(inner),
        })
    }
}

impl Drop for TupleWriter {
    fn drop(&mut self) {
        self.storage.stats().release_in_flight(self.batch);
        if let Some((_, reserved)) = self.cache.take() {
            self.storage.cache().release(reserved);
        }
        if self.file.take().is_some() {
            let _ = fs::remove_file(&self.path);
        }
    }
}

/// Writes the tuples of `source` accepted by `keep` to a new file, in input
/// order, and returns it with the retained mass.
pub fn filtered_rewrite(
    source: &TupleFile,
    keep: impl FnMut(&[u32]) -> bool,
) -> Result<(TupleFile, f64)> {
    filtered_rewrite_with(source, CachePriority::Low, keep, |_, _| {})
}

/// [`filtered_rewrite`] that also hands every retained tuple to `visit`, so
/// an aggregate for the next pass can be computed without rescanning.
pub fn filtered_rewrite_with(
    source: &TupleFile,
    priority: CachePriority,
    mut keep: impl FnMut(&[u32]) -> bool,
    mut visit: impl FnMut(&[u32], f64),
) -> Result<(TupleFile, f64)> {
    let mut writer = source.storage().create(source.n_dims(), priority)?;
    let mut reader = source.scan()?;
    while let Some((attrs, measure)) = reader.next_record()? {
        if keep(attrs) {
            writer.push(attrs, measure)?;
            visit(attrs, measure);
        }
    }
    drop(reader);
    let out = writer.finish()?;
    let mass = out.mass();
    Ok((out, mass))
}

/// Per-dimension mapping between raw attribute strings and dense ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dictionary {
    values: Vec<String>,
    index: HashMap<String, u32>,
}

impl Dictionary {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Returns the id for `raw`, assigning the next id on first sight.
    pub fn encode(&mut self, raw: &str) -> u32 {
        if let Some(&id) = self.index.get(raw) {
            return id;
        }
        let id = self.values.len() as u32;
        self.values.push(raw.to_owned());
        self.index.insert(raw.to_owned(), id);
        id
    }

    pub fn id(&self, raw: &str) -> Option<u32> {
        self.index.get(raw).copied()
    }

    pub fn value(&self, id: u32) -> &str {
        &self.values[id as usize]
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Delimiter {
    #[default]
    Tab,
    Comma,
}

impl Delimiter {
    pub fn as_char(self) -> char {
        match self {
            Delimiter::Tab => '\t',
            Delimiter::Comma => ',',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestOptions {
    pub n_dims: usize,
    pub delimiter: Delimiter,
    pub header: bool,
}

impl IngestOptions {
    pub fn tsv(n_dims: usize) -> Self {
        Self {
            n_dims,
            delimiter: Delimiter::Tab,
            header: false,
        }
    }
}

/// An ingested N-way relation. Immutable; cloning shares the tuple file.
#[derive(Debug, Clone)]
pub struct Relation {
    dictionaries: Vec<Dictionary>,
    cardinalities: Vec<usize>,
    file: TupleFile,
    total_mass: f64,
}

impl Relation {
    pub fn n_dims(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn dictionaries(&self) -> &[Dictionary] {
        &self.dictionaries
    }

    pub fn dictionary(&self, dim: usize) -> &Dictionary {
        &self.dictionaries[dim]
    }

    pub fn tuple_count(&self) -> u64 {
        self.file.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn file(&self) -> &TupleFile {
        &self.file
    }

    pub fn scan(&self) -> Result<TupleReader> {
        self.file.scan()
    }

    /// Builds a relation from id-encoded tuples, stored as given without
    /// aggregation. Raw values are the decimal ids. Every id below each
    /// cardinality must occur at least once.
    pub fn from_ids<I>(storage: &Storage, cardinalities: Vec<usize>, tuples: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<u32>, f64)>,
    {
        let n_dims = cardinalities.len();
        if n_dims == 0 {
            return Err(Error::Config("relation needs at least one dimension".into()));
        }
        let mut seen: Vec<Vec<bool>> = cardinalities.iter().map(|&c| vec![false; c]).collect();
        let mut writer = storage.create(n_dims, CachePriority::Low)?;
        for (i, (attrs, measure)) in tuples.into_iter().enumerate() {
            if attrs.len() != n_dims {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected {n_dims} attributes, found {}", attrs.len()),
                });
            }
            check_measure(measure, i + 1)?;
            for (n, &a) in attrs.iter().enumerate() {
                let slot = seen[n].get_mut(a as usize).ok_or_else(|| Error::Parse {
                    line: i + 1,
                    message: format!("id {a} out of range for dimension {n}"),
                })?;
                *slot = true;
            }
            writer.push(&attrs, measure)?;
        }
        for (n, s) in seen.iter().enumerate() {
            if let Some(id) = s.iter().position(|&b| !b) {
                return Err(Error::Consistency(format!(
                    "dimension {n}: id {id} never occurs"
                )));
            }
        }
        let file = writer.finish()?;
        let dictionaries = cardinalities
            .iter()
            .map(|&c| {
                let mut d = Dictionary::default();
                for id in 0..c {
                    d.encode(&id.to_string());
                }
                d
            })
            .collect();
        Ok(Self {
            dictionaries,
            cardinalities,
            total_mass: file.mass(),
            file,
        })
    }
}

fn check_measure(measure: f64, line: usize) -> Result<()> {
    if !measure.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("measure {measure} is not finite"),
        });
    }
    if measure < 0.0 {
        return Err(Error::Parse {
            line,
            message: format!("measure {measure} is negative"),
        });
    }
    Ok(())
}

/// Reads a delimited text file into a [`Relation`].
///
/// Each line holds `n_dims` attribute columns followed by one measure column.
/// Blank lines are skipped. Ids are assigned per dimension in first-appearance
/// order, and lines sharing all attribute values are merged by summing their
/// measures; the stored tuple takes the position of the first occurrence.
///
/// Merging keeps one hash entry per distinct tuple in memory while reading.
pub fn ingest(storage: &Storage, path: &Path, options: &IngestOptions) -> Result<Relation> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(storage, BufReader::new(file), options)
}

pub fn ingest_reader(
    storage: &Storage,
    input: impl BufRead,
    options: &IngestOptions,
) -> Result<Relation> {
    let n_dims = options.n_dims;
    if n_dims == 0 {
        return Err(Error::Config("relation needs at least one dimension".into()));
    }
    let delim = options.delimiter.as_char();
    let mut dictionaries = vec![Dictionary::default(); n_dims];
    let mut slots: HashMap<Box<[u32]>, usize> = HashMap::new();
    let mut order: Vec<Box<[u32]>> = Vec::new();
    let mut measures: Vec<f64> = Vec::new();
    let mut key = vec![0u32; n_dims];

    for (i, line) in input.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if i == 0 && options.header {
            continue;
        }
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(delim).collect();
        if fields.len() != n_dims + 1 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {} columns, found {}", n_dims + 1, fields.len()),
            });
        }
        let raw_measure = fields[n_dims].trim();
        let measure: f64 = raw_measure.parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("measure {raw_measure:?} is not a number"),
        })?;
        check_measure(measure, lineno)?;
        for (n, field) in fields[..n_dims].iter().enumerate() {
            key[n] = dictionaries[n].encode(field);
        }
        match slots.get(key.as_slice()) {
            Some(&slot) => measures[slot] += measure,
            None => {
                let k: Box<[u32]> = key.clone().into_boxed_slice();
                slots.insert(k.clone(), order.len());
                order.push(k);
                measures.push(measure);
            }
        }
    }
    drop(slots);

    let mut writer = storage.create(n_dims, CachePriority::Low)?;
    for (attrs, &m) in order.iter().zip(&measures) {
        writer.push(attrs, m)?;
    }
    let file = writer.finish()?;
    let cardinalities = dictionaries.iter().map(Dictionary::len).collect();
    Ok(Relation {
        dictionaries,
        cardinalities,
        total_mass: file.mass(),
        file,
    })
}
