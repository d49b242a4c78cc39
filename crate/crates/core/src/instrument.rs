//! Counters used to observe I/O behaviour and memory residency of a run.
//!
//! Everything here is cheap atomics so instrumented and uninstrumented runs
//! take the same code path.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use serde::Serialize;

/// Shared I/O counters for one [`Storage`](crate::store::Storage).
#[derive(Debug, Default)]
pub struct IoStats {
    scans: AtomicU64,
    disk_read_calls: AtomicU64,
    records_from_disk: AtomicU64,
    records_from_cache: AtomicU64,
    records_written: AtomicU64,
    offset_regressions: AtomicU64,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

/// Point-in-time copy of [`IoStats`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IoSnapshot {
    pub scans: u64,
    pub disk_read_calls: u64,
    pub records_from_disk: u64,
    pub records_from_cache: u64,
    pub records_written: u64,
    pub offset_regressions: u64,
    pub peak_in_flight: usize,
}

impl IoStats {
    pub fn snapshot(&self) -> IoSnapshot {
        IoSnapshot {
            scans: self.scans.load(Ordering::Relaxed),
            disk_read_calls: self.disk_read_calls.load(Ordering::Relaxed),
            records_from_disk: self.records_from_disk.load(Ordering::Relaxed),
            records_from_cache: self.records_from_cache.load(Ordering::Relaxed),
            records_written: self.records_written.load(Ordering::Relaxed),
            offset_regressions: self.offset_regressions.load(Ordering::Relaxed),
            peak_in_flight: self.peak_in_flight.load(Ordering::Relaxed),
        }
    }

    /// Resets the peak in-flight gauge to the current level.
    pub fn reset_peak(&self) {
        self.peak_in_flight
            .store(self.in_flight.load(Ordering::Relaxed), Ordering::Relaxed);
    }

    pub(crate) fn scan_started(&self) {
        self.scans.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn disk_read(&self, records: u64) {
        self.disk_read_calls.fetch_add(1, Ordering::Relaxed);
        self.records_from_disk.fetch_add(records, Ordering::Relaxed);
    }

    pub(crate) fn cache_hits(&self, records: u64) {
        self.records_from_cache.fetch_add(records, Ordering::Relaxed);
    }

    pub(crate) fn written(&self, records: u64) {
        self.records_written.fetch_add(records, Ordering::Relaxed);
    }

    pub(crate) fn offset_regression(&self) {
        self.offset_regressions.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn acquire_in_flight(&self, records: usize) {
        let now = self.in_flight.fetch_add(records, Ordering::Relaxed) + records;
        self.peak_in_flight.fetch_max(now, Ordering::Relaxed);
    }

    pub(crate) fn release_in_flight(&self, records: usize) {
        self.in_flight.fetch_sub(records, Ordering::Relaxed);
    }
}

/// Tracks how many per-attribute-value entries the detector holds at once.
#[derive(Debug, Default)]
pub struct ValueMeter {
    resident: AtomicUsize,
    peak: AtomicUsize,
}

impl ValueMeter {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn resident(&self) -> usize {
        self.resident.load(Ordering::Relaxed)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::Relaxed)
    }

    fn add(&self, n: usize) {
        let now = self.resident.fetch_add(n, Ordering::Relaxed) + n;
        self.peak.fetch_max(now, Ordering::Relaxed);
    }

    fn sub(&self, n: usize) {
        self.resident.fetch_sub(n, Ordering::Relaxed);
    }
}

/// A per-value array whose length is charged to a [`ValueMeter`] for as long
/// as it is alive. The length is fixed at construction.
#[derive(Debug)]
pub struct Metered<T> {
    values: Vec<T>,
    charged: usize,
    meter: Arc<ValueMeter>,
}

impl<T: Clone> Metered<T> {
    pub fn filled(meter: &Arc<ValueMeter>, len: usize, value: T) -> Self {
        meter.add(len);
        Self {
            values: vec![value; len],
            charged: len,
            meter: Arc::clone(meter),
        }
    }
}

impl<T> Metered<T> {
    /// Charges `capacity` entries up front; pushing beyond it panics.
    pub fn with_capacity(meter: &Arc<ValueMeter>, capacity: usize) -> Self {
        meter.add(capacity);
        Self {
            values: Vec::with_capacity(capacity),
            charged: capacity,
            meter: Arc::clone(meter),
        }
    }

    pub fn push(&mut self, value: T) {
        assert!(
            self.values.len() < self.charged,
            "metered buffer grew past its charged capacity"
        );
        self.values.push(value);
    }

    pub fn charged(&self) -> usize {
        self.charged
    }
}

impl<T> std::ops::Deref for Metered<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.values
    }
}

impl<T> std::ops::DerefMut for Metered<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.values
    }
}

impl<T> Drop for Metered<T> {
    fn drop(&mut self) {
        self.meter.sub(self.charged);
    }
}
