//! Partitioned execution of the scan primitives.
//!
//! A relation is split into contiguous shard files. Each primitive maps over
//! the shards on a pool of worker threads, combines results per shard, then
//! merges the partials on the calling thread in shard-index order. Because the
//! merge order never depends on which worker finishes first, results are
//! reproducible for a given shard count, and exact across shard counts when
//! measures are integers.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use crate::error::{Error, Result};
use crate::store::{filtered_rewrite_with, CachePriority, TupleFile};

/// Tuple data stored as an ordered list of shard files.
#[derive(Debug, Clone)]
pub struct Partitioning {
    shards: Vec<TupleFile>,
}

impl Partitioning {
    /// Wraps one file as a single shard without copying it.
    pub fn single(file: TupleFile) -> Self {
        Self { shards: vec![file] }
    }

    pub fn shards(&self) -> &[TupleFile] {
        &self.shards
    }

    pub fn shard_counts(&self) -> Vec<u64> {
        self.shards.iter().map(TupleFile::len).collect()
    }

    pub fn n_dims(&self) -> usize {
        self.shards[0].n_dims()
    }

    pub fn len(&self) -> u64 {
        self.shards.iter().map(TupleFile::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits `source` into `parts` contiguous shards whose sizes differ by at
/// most one, larger shards first. One part shares the source file.
pub fn partition(source: &TupleFile, parts: usize) -> Result<Partitioning> {
    if parts == 0 {
        return Err(Error::Config("partition count must be at least 1".into()));
    }
    if parts == 1 {
        return Ok(Partitioning::single(source.clone()));
    }
    let total = source.len();
    let base = total / parts as u64;
    let extra = (total % parts as u64) as usize;
    let storage = source.storage();
    let mut shards = Vec::with_capacity(parts);
    let mut reader = source.scan()?;
    for p in 0..parts {
        let size = base + u64::from(p < extra);
        let mut writer = storage.create(source.n_dims(), CachePriority::Low)?;
        for _ in 0..size {
            let (attrs, measure) = reader
                .next_record()?
                .ok_or_else(|| Error::Consistency("source ended before its length".into()))?;
            writer.push(attrs, measure)?;
        }
        shards.push(writer.finish()?);
    }
    Ok(Partitioning { shards })
}

/// Worker pool configuration. Workers pull shard indices from a shared queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Executor {
    workers: usize,
}

impl Default for Executor {
    fn default() -> Self {
        Self::serial()
    }
}

impl Executor {
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        Ok(Self { workers })
    }

    pub fn serial() -> Self {
        Self { workers: 1 }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Runs `task` once per shard and returns results in shard order. If any
    /// shard fails, the first failure by shard index is returned and every
    /// other result is dropped.
    pub fn map_shards<T, F>(&self, shards: &[TupleFile], task: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize, &TupleFile) -> Result<T> + Sync,
    {
        let workers = self.workers.min(shards.len());
        if workers <= 1 {
            return shards.iter().enumerate().map(|(i, s)| task(i, s)).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<T>>>> =
            Mutex::new((0..shards.len()).map(|_| None).collect());
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= shards.len() {
                        break;
                    }
                    let out = task(i, &shards[i]);
                    slots.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(out);
                });
            }
        });
        let slots = slots.into_inner().unwrap_or_else(|p| p.into_inner());
        let mut results = Vec::with_capacity(slots.len());
        for (i, slot) in slots.into_iter().enumerate() {
            match slot {
                Some(r) => results.push(r?),
                None => return Err(Error::Worker(format!("shard {i} produced no result"))),
            }
        }
        Ok(results)
    }
}

/// Flat layout of per-dimension, per-id arrays: dimension `n` occupies
/// `offsets[n]..offsets[n + 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValueIndex {
    offsets: Vec<usize>,
}

impl ValueIndex {
    pub fn new(cardinalities: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(cardinalities.len() + 1);
        offsets.push(0);
        for &c in cardinalities {
            offsets.push(offsets.last().expect("nonempty") + c);
        }
        Self { offsets }
    }

    pub fn n_dims(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Total number of attribute values over all dimensions.
    pub fn total(&self) -> usize {
        *self.offsets.last().expect("nonempty")
    }

    pub fn card(&self, dim: usize) -> usize {
        self.offsets[dim + 1] - self.offsets[dim]
    }

    #[inline]
    pub fn slot(&self, dim: usize, id: u32) -> usize {
        self.offsets[dim] + id as usize
    }

    pub fn range(&self, dim: usize) -> std::ops::Range<usize> {
        self.offsets[dim]..self.offsets[dim + 1]
    }

    #[inline]
    fn add_tuple(&self, acc: &mut [f64], attrs: &[u32], measure: f64) {
        for (n, &a) in attrs.iter().enumerate() {
            acc[self.offsets[n] + a as usize] += measure;
        }
    }
}

fn merge_into(target: &mut [f64], partials: &[Vec<f64>]) {
    for partial in partials {
        for (t, p) in target.iter_mut().zip(partial) {
            *t += p;
        }
    }
}

fn check_ids(index: &ValueIndex, attrs: &[u32]) -> Result<()> {
    for (n, &a) in attrs.iter().enumerate() {
        if a as usize >= index.card(n) {
            return Err(Error::Consistency(format!(
                "dimension {n}: id {a} outside 0..{}",
                index.card(n)
            )));
        }
    }
    Ok(())
}

/// Filters every shard independently, keeping shard order. Returns the new
/// partitioning and the retained mass summed in shard order.
pub fn dist_filter<P>(exec: &Executor, data: &Partitioning, keep: P) -> Result<(Partitioning, f64)>
where
    P: Fn(&[u32]) -> bool + Sync,
{
    let outs = exec.map_shards(data.shards(), |_, shard| {
        filtered_rewrite_with(shard, CachePriority::Low, &keep, |_, _| {})
    })?;
    Ok(collect_filtered(outs))
}

/// [`dist_filter`] fused with attribute-value mass computation over the
/// retained tuples. `masses` is overwritten with the merged per-value masses.
pub fn dist_filter_with_masses<P>(
    exec: &Executor,
    data: &Partitioning,
    priority: CachePriority,
    keep: P,
    index: &ValueIndex,
    masses: &mut [f64],
) -> Result<(Partitioning, f64)>
where
    P: Fn(&[u32]) -> bool + Sync,
{
    masses.fill(0.0);
    if data.shards().len() == 1 {
        let (out, mass) =
            filtered_rewrite_with(&data.shards()[0], priority, &keep, |attrs, m| {
                index.add_tuple(masses, attrs, m)
            })?;
        return Ok((Partitioning::single(out), mass));
    }
    let outs = exec.map_shards(data.shards(), |_, shard| {
        let mut local = vec![0.0; index.total()];
        let (out, mass) = filtered_rewrite_with(shard, priority, &keep, |attrs, m| {
            index.add_tuple(&mut local, attrs, m)
        })?;
        Ok((out, mass, local))
    })?;
    let mut files = Vec::with_capacity(outs.len());
    let mut partials = Vec::with_capacity(outs.len());
    for (file, mass, local) in outs {
        files.push((file, mass));
        partials.push(local);
    }
    merge_into(masses, &partials);
    Ok(collect_filtered(files))
}

fn collect_filtered(outs: Vec<(TupleFile, f64)>) -> (Partitioning, f64) {
    let mut mass = 0.0;
    let mut shards = Vec::with_capacity(outs.len());
    for (file, m) in outs {
        mass += m;
        shards.push(file);
    }
    (Partitioning { shards }, mass)
}

/// Per-value masses of all tuples, written into `masses` (laid out by `index`).
pub fn dist_attr_masses_into(
    exec: &Executor,
    data: &Partitioning,
    index: &ValueIndex,
    masses: &mut [f64],
) -> Result<()> {
    masses.fill(0.0);
    if data.shards().len() == 1 {
        let mut bad = None;
        data.shards()[0].for_each(|attrs, m| {
            if bad.is_none() {
                if let Err(e) = check_ids(index, attrs) {
                    bad = Some(e);
                    return;
                }
                index.add_tuple(masses, attrs, m);
            }
        })?;
        return bad.map_or(Ok(()), Err);
    }
    let partials = exec.map_shards(data.shards(), |_, shard| {
        let mut local = vec![0.0; index.total()];
        let mut reader = shard.scan()?;
        while let Some((attrs, m)) = reader.next_record()? {
            check_ids(index, attrs)?;
            index.add_tuple(&mut local, attrs, m);
        }
        Ok(local)
    })?;
    merge_into(masses, &partials);
    Ok(())
}

/// Per-dimension, per-id masses of all tuples.
pub fn dist_attr_masses(
    exec: &Executor,
    data: &Partitioning,
    cardinalities: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let index = ValueIndex::new(cardinalities);
    let mut flat = vec![0.0; index.total()];
    dist_attr_masses_into(exec, data, &index, &mut flat)?;
    Ok((0..index.n_dims())
        .map(|n| flat[index.range(n)].to_vec())
        .collect())
}

/// Total mass of the tuples accepted by `keep`, merged in shard order.
pub fn dist_mass_where<P>(exec: &Executor, data: &Partitioning, keep: P) -> Result<f64>
where
    P: Fn(&[u32]) -> bool + Sync,
{
    let partials = exec.map_shards(data.shards(), |_, shard| {
        let mut sum = 0.0;
        shard.for_each(|attrs, m| {
            if keep(attrs) {
                sum += m;
            }
        })?;
        Ok(sum)
    })?;
    Ok(partials.into_iter().fold(0.0, |acc, s| acc + s))
}

pub fn dist_mass(exec: &Executor, data: &Partitioning) -> Result<f64> {
    dist_mass_where(exec, data, |_| true)
}

/// Which ids occur in each dimension. `cardinalities` bounds the id range.
pub fn dist_attr_sets(
    exec: &Executor,
    data: &Partitioning,
    cardinalities: &[usize],
) -> Result<Vec<Vec<bool>>> {
    let index = ValueIndex::new(cardinalities);
    let partials = exec.map_shards(data.shards(), |_, shard| {
        let mut local = vec![false; index.total()];
        let mut reader = shard.scan()?;
        while let Some((attrs, _)) = reader.next_record()? {
            check_ids(&index, attrs)?;
            for (n, &a) in attrs.iter().enumerate() {
                local[index.slot(n, a)] = true;
            }
        }
        Ok(local)
    })?;
    let mut merged = vec![false; index.total()];
    for p in &partials {
        for (m, &x) in merged.iter_mut().zip(p) {
            *m |= x;
        }
    }
    Ok((0..index.n_dims())
        .map(|n| merged[index.range(n)].to_vec())
        .collect())
}
