//! Top-k dense subtensor detection by bulk peeling.
//!
//! [`find_one`] starts from the whole working relation and repeatedly picks
//! a dimension, removes every value of that dimension whose mass is at most
//! `theta` times the dimension average, and records the density the block
//! would have had after each single removal. The best prefix of the removal
//! order is the returned block. Tuples are only touched by sequential scans:
//! one mass scan up front, then one fused filter-and-aggregate pass per
//! iteration.
//!
//! [`detect_topk`] calls [`find_one`] `k` times, removing each found block
//! from the working relation and re-evaluating it against the original.

use std::cmp::Ordering as CmpOrdering;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::density::{self, DensityMeasure, SubtensorShape};
use crate::distributed::{
    dist_attr_masses_into, dist_attr_sets, dist_filter, dist_filter_with_masses, dist_mass,
    dist_mass_where, partition, Executor, Partitioning, ValueIndex,
};
use crate::error::{Error, Result};
use crate::instrument::{Metered, ValueMeter};
use crate::store::{CacheBudget, CachePriority, Relation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    /// Peel the dimension with the most surviving values.
    MaxCardinality,
    /// Peel the dimension whose bulk removal leaves the densest block.
    MaxDensity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub k: usize,
    pub theta: f64,
    pub policy: SelectionPolicy,
    pub measure: DensityMeasure,
    pub cache_budget: CacheBudget,
    pub partitions: usize,
    pub workers: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            k: 3,
            theta: 1.0,
            policy: SelectionPolicy::MaxDensity,
            measure: DensityMeasure::Ari,
            cache_budget: CacheBudget::DISABLED,
            partitions: 1,
            workers: 1,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.theta.is_finite() && self.theta >= 1.0) {
            return Err(Error::Config(format!("theta must be >= 1, got {}", self.theta)));
        }
        if let DensityMeasure::Es { alpha } = self.measure {
            DensityMeasure::entry_surplus(alpha)?;
        }
        if self.partitions < 1 || self.workers < 1 {
            return Err(Error::Config("partitions and workers must be at least 1".into()));
        }
        if self.workers > self.partitions {
            return Err(Error::Config(format!(
                "workers ({}) must not exceed partitions ({})",
                self.workers, self.partitions
            )));
        }
        Ok(())
    }
}

/// Removal order of every attribute value plus the best prefix seen so far.
#[derive(Debug)]
pub struct RemovalLog {
    /// 0 while the value survives, otherwise its 1-based removal order.
    order: Metered<u32>,
    next_index: u32,
    best_density: f64,
    best_cut: u32,
}

impl RemovalLog {
    pub fn order(&self, slot: usize) -> Option<u32> {
        match self.order[slot] {
            0 => None,
            r => Some(r),
        }
    }

    pub fn next_index(&self) -> u32 {
        self.next_index
    }

    pub fn best_density(&self) -> f64 {
        self.best_density
    }

    pub fn best_cut(&self) -> u32 {
        self.best_cut
    }
}

/// In-memory state of one peeling run: surviving values, their masses, the
/// block mass and the removal log. Values are addressed through a
/// [`ValueIndex`] over the relation cardinalities.
#[derive(Debug)]
pub struct PeelState {
    index: ValueIndex,
    masses: Metered<f64>,
    cards: Vec<usize>,
    block_mass: f64,
    log: RemovalLog,
}

impl PeelState {
    fn new(meter: &Arc<ValueMeter>, index: ValueIndex, block_mass: f64) -> Self {
        let cards = (0..index.n_dims()).map(|n| index.card(n)).collect();
        let total = index.total();
        Self {
            masses: Metered::filled(meter, total, 0.0),
            log: RemovalLog {
                order: Metered::filled(meter, total, 0),
                next_index: 1,
                best_density: f64::NEG_INFINITY,
                best_cut: 1,
            },
            index,
            cards,
            block_mass,
        }
    }

    /// State with every value alive and the given per-dimension masses; the
    /// block mass is taken from dimension 0.
    pub fn from_masses(meter: &Arc<ValueMeter>, masses: &[Vec<f64>]) -> Self {
        let cards: Vec<usize> = masses.iter().map(Vec::len).collect();
        let block_mass = masses.first().map_or(0.0, |m| m.iter().sum());
        let mut state = Self::new(meter, ValueIndex::new(&cards), block_mass);
        for (n, dim) in masses.iter().enumerate() {
            let r = state.index.range(n);
            state.masses[r].copy_from_slice(dim);
        }
        state
    }

    pub fn index(&self) -> &ValueIndex {
        &self.index
    }

    /// Surviving cardinality per dimension.
    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    pub fn block_mass(&self) -> f64 {
        self.block_mass
    }

    pub fn log(&self) -> &RemovalLog {
        &self.log
    }

    pub fn mass(&self, dim: usize, id: u32) -> f64 {
        self.masses[self.index.slot(dim, id)]
    }

    pub fn is_alive(&self, dim: usize, id: u32) -> bool {
        self.log.order[self.index.slot(dim, id)] == 0
    }

    pub fn any_alive(&self) -> bool {
        self.cards.iter().any(|&c| c > 0)
    }

    /// Surviving ids of `dim` whose mass is at most `theta` times the
    /// average over the dimension.
    fn removal_candidates(&self, dim: usize, theta: f64) -> impl Iterator<Item = u32> + '_ {
        let threshold = theta * self.block_mass / self.cards[dim] as f64;
        self.alive_ids(dim)
            .filter(move |&a| self.masses[self.index.slot(dim, a)] <= threshold)
    }

    fn alive_ids(&self, dim: usize) -> impl Iterator<Item = u32> + '_ {
        let start = self.index.range(dim).start;
        self.index
            .range(dim)
            .filter(|&s| self.log.order[s] == 0)
            .map(move |s| (s - start) as u32)
    }

    /// Lightest surviving value of `dim`, ties to the smaller id.
    fn lightest(&self, dim: usize) -> Option<u32> {
        self.alive_ids(dim).min_by(|&a, &b| self.cmp_mass(dim, a, b))
    }

    fn cmp_mass(&self, dim: usize, a: u32, b: u32) -> CmpOrdering {
        self.mass(dim, a)
            .total_cmp(&self.mass(dim, b))
            .then(a.cmp(&b))
    }

    /// Count and mass of the values a bulk removal from `dim` would drop.
    fn removal_summary(&self, dim: usize, theta: f64) -> (usize, f64) {
        let (mut count, mut mass) = (0, 0.0);
        for a in self.removal_candidates(dim, theta) {
            count += 1;
            mass += self.mass(dim, a);
        }
        if count == 0 {
            // Only reachable through rounding in the running block mass.
            if let Some(a) = self.lightest(dim) {
                return (1, self.mass(dim, a));
            }
        }
        (count, mass)
    }

    /// Values to remove from `dim`, in removal order: ascending mass, then id.
    fn removal_set(&self, meter: &Arc<ValueMeter>, dim: usize, theta: f64) -> Metered<u32> {
        let mut doomed = Metered::with_capacity(meter, self.cards[dim]);
        for a in self.removal_candidates(dim, theta) {
            doomed.push(a);
        }
        if doomed.is_empty() {
            if let Some(a) = self.lightest(dim) {
                doomed.push(a);
            }
        }
        doomed.sort_unstable_by(|&a, &b| self.cmp_mass(dim, a, b));
        doomed
    }
}

/// Relation-level inputs to the density measure.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationShape {
    pub mass: f64,
    pub cards: Vec<usize>,
}

impl RelationShape {
    fn density(&self, measure: DensityMeasure, block_mass: f64, cards: &[usize]) -> Result<f64> {
        density::evaluate(measure, block_mass, self.mass, &self.cards, |n| cards[n])
    }
}

/// The surviving dimension with the most values; ties go to the lowest index.
pub fn select_dimension_cardinality(cards: &[usize]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (n, &c) in cards.iter().enumerate() {
        if c > 0 && best.is_none_or(|b| c > cards[b]) {
            best = Some(n);
        }
    }
    best.ok_or_else(|| Error::Consistency("dimension selection on an empty block".into()))
}

/// The surviving dimension whose bulk removal yields the highest density;
/// ties go to the lowest index. Reads only in-memory state.
pub fn select_dimension_density(
    state: &PeelState,
    relation: &RelationShape,
    measure: DensityMeasure,
    theta: f64,
) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    let mut cards = state.cards.clone();
    for dim in 0..cards.len() {
        if state.cards[dim] == 0 {
            continue;
        }
        let (count, mass) = state.removal_summary(dim, theta);
        cards[dim] = state.cards[dim] - count;
        let rho = relation.density(measure, state.block_mass - mass, &cards)?;
        cards[dim] = state.cards[dim];
        if best.is_none_or(|(_, b)| rho > b) {
            best = Some((dim, rho));
        }
    }
    best.map(|(d, _)| d)
        .ok_or_else(|| Error::Consistency("dimension selection on an empty block".into()))
}

/// Per-dimension membership of a detected block.
#[derive(Debug)]
pub struct BlockSets {
    index: ValueIndex,
    member: Metered<bool>,
}

impl BlockSets {
    pub fn n_dims(&self) -> usize {
        self.index.n_dims()
    }

    pub fn contains(&self, dim: usize, id: u32) -> bool {
        self.member[self.index.slot(dim, id)]
    }

    /// True when every attribute of the tuple lies in the block.
    pub fn contains_tuple(&self, attrs: &[u32]) -> bool {
        attrs.iter().enumerate().all(|(n, &a)| self.contains(n, a))
    }

    pub fn ids(&self, dim: usize) -> Vec<u32> {
        let start = self.index.range(dim).start;
        self.index
            .range(dim)
            .filter(|&s| self.member[s])
            .map(|s| (s - start) as u32)
            .collect()
    }

    pub fn cards(&self) -> Vec<usize> {
        (0..self.n_dims())
            .map(|n| self.member[self.index.range(n)].iter().filter(|&&m| m).count())
            .collect()
    }
}

/// Result of one [`find_one`] call.
#[derive(Debug)]
pub struct FoundBlock {
    pub sets: BlockSets,
    /// Best density seen while peeling, against the working relation.
    pub density: f64,
    pub iterations: usize,
}

/// Phase at which a [`PeelObserver`] is notified within one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeelPhase {
    /// Values of `dim` were removed from the state; tuples not yet rewritten.
    Selected,
    /// The working relation was rewritten and masses recomputed.
    Rewritten,
}

#[derive(Debug)]
pub struct PeelStep<'a> {
    pub iteration: usize,
    pub dim: usize,
    pub removed: &'a [u32],
    pub state: &'a PeelState,
    pub working: &'a Partitioning,
}

pub trait PeelObserver {
    fn observe(&mut self, phase: PeelPhase, step: &PeelStep<'_>);
}

impl<F: FnMut(PeelPhase, &PeelStep<'_>)> PeelObserver for F {
    fn observe(&mut self, phase: PeelPhase, step: &PeelStep<'_>) {
        self(phase, step)
    }
}

struct NoObserver;

impl PeelObserver for NoObserver {
    fn observe(&mut self, _: PeelPhase, _: &PeelStep<'_>) {}
}

fn mass_tolerance(reference: f64) -> f64 {
    1e-6 * reference.abs().max(1e-300)
}

/// Finds one dense block in `working`.
///
/// `relation` gives the mass of `working` and the full attribute-value
/// cardinalities; values absent from `working` start with zero mass and are
/// dropped the first time their dimension is peeled.
pub fn find_one(
    exec: &Executor,
    working: &Partitioning,
    relation: &RelationShape,
    config: &DetectorConfig,
    meter: &Arc<ValueMeter>,
) -> Result<FoundBlock> {
    find_one_observed(exec, working, relation, config, meter, &mut NoObserver)
}

pub fn find_one_observed(
    exec: &Executor,
    working: &Partitioning,
    relation: &RelationShape,
    config: &DetectorConfig,
    meter: &Arc<ValueMeter>,
    observer: &mut dyn PeelObserver,
) -> Result<FoundBlock> {
    let index = ValueIndex::new(&relation.cards);
    let measure = config.measure;
    let theta = config.theta;
    let tol = mass_tolerance(relation.mass);

    let mut state = PeelState::new(meter, index.clone(), relation.mass);
    dist_attr_masses_into(exec, working, &index, &mut state.masses)?;
    if let Some(dim) = (0..index.n_dims()).find(|&n| index.card(n) > 0) {
        let scanned: f64 = state.masses[index.range(dim)].iter().sum();
        if (scanned - relation.mass).abs() > tol {
            return Err(Error::Consistency(format!(
                "working relation holds mass {scanned}, expected {}",
                relation.mass
            )));
        }
    }
    state.log.best_density = relation.density(measure, state.block_mass, &state.cards)?;

    let mut current = working.clone();
    let mut iterations = 0;
    while state.any_alive() {
        iterations += 1;
        let dim = match config.policy {
            SelectionPolicy::MaxCardinality => select_dimension_cardinality(&state.cards)?,
            SelectionPolicy::MaxDensity => {
                select_dimension_density(&state, relation, measure, theta)?
            }
        };
        let doomed = state.removal_set(meter, dim, theta);
        for &a in doomed.iter() {
            let slot = index.slot(dim, a);
            state.cards[dim] -= 1;
            state.block_mass -= state.masses[slot];
            let rho = relation.density(measure, state.block_mass, &state.cards)?;
            let log = &mut state.log;
            log.order[slot] = log.next_index;
            log.next_index += 1;
            if rho > log.best_density {
                log.best_density = rho;
                log.best_cut = log.next_index;
            }
        }
        let step = PeelStep {
            iteration: iterations,
            dim,
            removed: &doomed,
            state: &state,
            working: &current,
        };
        observer.observe(PeelPhase::Selected, &step);
        drop(doomed);

        if !state.any_alive() {
            break;
        }
        let order = &state.log.order;
        let (next, kept_mass) = dist_filter_with_masses(
            exec,
            &current,
            CachePriority::High,
            |t: &[u32]| order[index.slot(dim, t[dim])] == 0,
            &index,
            &mut state.masses,
        )?;
        if (kept_mass - state.block_mass).abs() > tol {
            return Err(Error::Consistency(format!(
                "block mass drifted: tracked {}, scanned {kept_mass}",
                state.block_mass
            )));
        }
        current = next;
        let step = PeelStep {
            iteration: iterations,
            dim,
            removed: &[],
            state: &state,
            working: &current,
        };
        observer.observe(PeelPhase::Rewritten, &step);
    }
    drop(current);

    let PeelState { masses, log, .. } = state;
    drop(masses);
    let mut member = Metered::filled(meter, index.total(), false);
    for (m, &r) in member.iter_mut().zip(log.order.iter()) {
        *m = r >= log.best_cut;
    }
    Ok(FoundBlock {
        sets: BlockSets { index, member },
        density: log.best_density,
        iterations,
    })
}

/// A detected block, evaluated against the original relation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subtensor {
    /// Detection order, starting at 1.
    pub rank: usize,
    /// Raw attribute values per dimension, in id order.
    pub attr_values: Vec<Vec<String>>,
    pub cardinalities: Vec<usize>,
    pub volume: u128,
    pub mass: f64,
    pub density: f64,
}

impl Subtensor {
    pub fn shape(&self, relation: &Relation) -> SubtensorShape {
        SubtensorShape {
            block_mass: self.mass,
            block_cards: self.cardinalities.clone(),
            rel_mass: relation.total_mass(),
            rel_cards: relation.cardinalities().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorStats {
    pub iterations_per_block: Vec<usize>,
    /// Largest relation cardinality.
    pub max_cardinality: usize,
    pub scans_performed: u64,
    #[serde(with = "duration_secs")]
    pub wall_time: Duration,
    /// Peak number of per-attribute-value entries held by the detector.
    pub peak_value_entries: usize,
    /// Peak number of tuples buffered by open readers and writers.
    pub peak_in_flight_tuples: usize,
}

mod duration_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs_f64(f64::deserialize(d)?))
    }
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub blocks: Vec<Subtensor>,
    pub stats: DetectorStats,
}

pub fn detect_topk(relation: &Relation, config: &DetectorConfig) -> Result<Detection> {
    detect_topk_metered(relation, config, &ValueMeter::new())
}

/// [`detect_topk`] charging per-value state to a caller-supplied meter.
pub fn detect_topk_metered(
    relation: &Relation,
    config: &DetectorConfig,
    meter: &Arc<ValueMeter>,
) -> Result<Detection> {
    config.validate()?;
    let started = Instant::now();
    let storage = relation.file().storage();
    storage.set_cache_budget(config.cache_budget);
    storage.stats().reset_peak();
    let scans_before = storage.stats().snapshot().scans;
    let exec = Executor::new(config.workers)?;

    let original = partition(relation.file(), config.partitions)?;
    let rel_cards = {
        let _charge = Metered::<bool>::with_capacity(meter, ValueIndex::new(relation.cardinalities()).total());
        let sets = dist_attr_sets(&exec, &original, relation.cardinalities())?;
        let counts: Vec<usize> = sets.iter().map(|s| s.iter().filter(|&&b| b).count()).collect();
        if counts != relation.cardinalities() {
            return Err(Error::Consistency(format!(
                "relation reports cardinalities {:?} but holds {counts:?}",
                relation.cardinalities()
            )));
        }
        counts
    };
    let original_shape = RelationShape {
        mass: relation.total_mass(),
        cards: rel_cards.clone(),
    };

    let mut working = original.clone();
    let mut working_mass = dist_mass(&exec, &working)?;
    let mut blocks = Vec::new();
    let mut iterations_per_block = Vec::new();
    for rank in 1..=config.k {
        if working.is_empty() {
            break;
        }
        let shape = RelationShape {
            mass: working_mass,
            cards: rel_cards.clone(),
        };
        let found = find_one(&exec, &working, &shape, config, meter)?;
        let sets = &found.sets;
        let before = working.len();
        let (rest, rest_mass) = dist_filter(&exec, &working, |t| !sets.contains_tuple(t))?;
        if rest.len() == before {
            // The block holds no remaining tuple; later rounds would repeat it.
            break;
        }
        let block_mass = dist_mass_where(&exec, &original, |t| sets.contains_tuple(t))?;
        let cardinalities = sets.cards();
        let volume = cardinalities
            .iter()
            .fold(1u128, |v, &c| v.saturating_mul(c as u128));
        let density = original_shape.density(config.measure, block_mass, &cardinalities)?;
        let attr_values = (0..sets.n_dims())
            .map(|n| {
                let dict = relation.dictionary(n);
                sets.ids(n).into_iter().map(|id| dict.value(id).to_owned()).collect()
            })
            .collect();
        blocks.push(Subtensor {
            rank,
            attr_values,
            cardinalities,
            volume,
            mass: block_mass,
            density,
        });
        iterations_per_block.push(found.iterations);
        working = rest;
        working_mass = rest_mass;
    }

    let io = storage.stats().snapshot();
    Ok(Detection {
        blocks,
        stats: DetectorStats {
            iterations_per_block,
            max_cardinality: rel_cards.iter().copied().max().unwrap_or(0),
            scans_performed: io.scans - scans_before,
            wall_time: started.elapsed(),
            peak_value_entries: meter.peak(),
            peak_in_flight_tuples: io.peak_in_flight,
        },
    })
}

/// Serializes blocks the way `blocks.json` is written.
pub fn blocks_json(blocks: &[Subtensor]) -> String {
    let mut s = serde_json::to_string_pretty(blocks).expect("blocks serialize");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{ingest_reader, IngestOptions, Storage};

    const MATRIX: &str = "a1\tb1\t10\na1\tb2\t1\na2\tb1\t1\n";

    fn card_config(theta: f64) -> DetectorConfig {
        DetectorConfig {
            k: 1,
            theta,
            policy: SelectionPolicy::MaxCardinality,
            measure: DensityMeasure::Ari,
            ..Default::default()
        }
    }

    fn load(text: &str, n_dims: usize) -> (tempfile::TempDir, Relation) {
        let dir = tempfile::tempdir().unwrap();
        let s = Storage::new(dir.path()).unwrap();
        let rel = ingest_reader(&s, text.as_bytes(), &IngestOptions::tsv(n_dims)).unwrap();
        (dir, rel)
    }

    fn shape_of(rel: &Relation) -> RelationShape {
        RelationShape {
            mass: rel.total_mass(),
            cards: rel.cardinalities().to_vec(),
        }
    }

    #[test]
    fn cardinality_policy() {
        assert_eq!(select_dimension_cardinality(&[1, 2]).unwrap(), 1);
        assert_eq!(select_dimension_cardinality(&[3, 3, 2]).unwrap(), 0);
        assert_eq!(select_dimension_cardinality(&[0, 4]).unwrap(), 1);
        assert!(select_dimension_cardinality(&[0, 0]).is_err());
    }

    #[test]
    fn density_policy_on_worked_matrix() {
        let meter = ValueMeter::new();
        let state = PeelState::from_masses(&meter, &[vec![11.0, 1.0], vec![11.0, 1.0]]);
        let rel = RelationShape {
            mass: 12.0,
            cards: vec![2, 2],
        };
        // both dimensions drop one value of mass 1: 11 / 1.5 either way
        assert_eq!(
            select_dimension_density(&state, &rel, DensityMeasure::Ari, 1.0).unwrap(),
            0
        );
        assert_eq!(state.removal_summary(0, 1.0), (1, 1.0));
        assert_eq!(state.removal_summary(1, 1.0), (1, 1.0));
    }

    #[test]
    fn density_policy_skips_empty_dimensions() {
        let meter = ValueMeter::new();
        let state = PeelState::from_masses(&meter, &[vec![], vec![3.0, 1.0, 2.0]]);
        let rel = RelationShape {
            mass: 6.0,
            cards: vec![0, 3],
        };
        assert_eq!(
            select_dimension_density(&state, &rel, DensityMeasure::Ari, 1.0).unwrap(),
            1
        );
    }

    #[test]
    fn density_policy_prefers_denser_removal() {
        let meter = ValueMeter::new();
        // removing the light value of dim 1 helps more than peeling dim 0
        let state = PeelState::from_masses(&meter, &[vec![5.0, 5.0], vec![9.0, 1.0]]);
        let rel = RelationShape {
            mass: 10.0,
            cards: vec![2, 2],
        };
        assert_eq!(
            select_dimension_density(&state, &rel, DensityMeasure::Ari, 1.0).unwrap(),
            1
        );
    }

    #[test]
    fn worked_matrix_trace() {
        let (_d, rel) = load(MATRIX, 2);
        let meter = ValueMeter::new();
        let mut trace = Vec::new();
        let mut observe = |phase: PeelPhase, step: &PeelStep<'_>| {
            if phase == PeelPhase::Selected {
                trace.push((
                    step.dim,
                    step.removed.to_vec(),
                    step.state.block_mass(),
                    step.state.log().best_cut(),
                ));
            }
        };
        let found = find_one_observed(
            &Executor::serial(),
            &Partitioning::single(rel.file().clone()),
            &shape_of(&rel),
            &card_config(1.0),
            &meter,
            &mut observe,
        )
        .unwrap();
        // ids: a1=0 a2=1, b1=0 b2=1
        assert_eq!(
            trace,
            vec![
                (0, vec![1], 11.0, 2),
                (1, vec![1], 10.0, 3),
                (0, vec![0], 0.0, 3),
                (1, vec![0], 0.0, 3),
            ]
        );
        assert_eq!(found.iterations, 4);
        assert_eq!(found.density, 10.0);
        assert_eq!(found.sets.ids(0), vec![0]);
        assert_eq!(found.sets.ids(1), vec![0]);
    }

    #[test]
    fn detect_worked_matrix() {
        let (_d, rel) = load(MATRIX, 2);
        let det = detect_topk(&rel, &card_config(1.0)).unwrap();
        assert_eq!(det.blocks.len(), 1);
        let b = &det.blocks[0];
        assert_eq!(b.attr_values, vec![vec!["a1".to_string()], vec!["b1".to_string()]]);
        assert_eq!(b.mass, 10.0);
        assert_eq!(b.density, 10.0);
        assert_eq!(b.volume, 1);
        assert_eq!(b.rank, 1);
        assert_eq!(det.stats.iterations_per_block, vec![4]);
        assert_eq!(det.stats.max_cardinality, 2);
    }

    #[test]
    fn singleton_relation() {
        let (_d, rel) = load("x\ty\t5\n", 2);
        let det = detect_topk(&rel, &card_config(1.0)).unwrap();
        assert_eq!(det.blocks.len(), 1);
        assert_eq!(det.blocks[0].density, 5.0);
        assert_eq!(det.blocks[0].mass, 5.0);
    }

    #[test]
    fn uniform_block_is_exhausted_after_one_round() {
        let mut text = String::new();
        for u in 0..3 {
            for i in 0..4 {
                text.push_str(&format!("u{u}\ti{i}\t2\n"));
            }
        }
        let (_d, rel) = load(&text, 2);
        let config = DetectorConfig {
            k: 2,
            ..card_config(1.0)
        };
        let det = detect_topk(&rel, &config).unwrap();
        assert_eq!(det.blocks.len(), 1);
        assert_eq!(det.blocks[0].cardinalities, vec![3, 4]);
        assert_eq!(det.blocks[0].mass, 24.0);
    }

    #[test]
    fn equal_masses_are_removed_together() {
        let mut text = String::new();
        for u in 0..3 {
            for i in 0..3 {
                text.push_str(&format!("u{u}\ti{i}\t1\n"));
            }
        }
        let (_d, rel) = load(&text, 2);
        let meter = ValueMeter::new();
        let mut removed = Vec::new();
        let mut observe = |phase: PeelPhase, step: &PeelStep<'_>| {
            if phase == PeelPhase::Selected {
                removed.push((step.dim, step.removed.len()));
            }
        };
        find_one_observed(
            &Executor::serial(),
            &Partitioning::single(rel.file().clone()),
            &shape_of(&rel),
            &card_config(1.0),
            &meter,
            &mut observe,
        )
        .unwrap();
        assert_eq!(removed[0], (0, 3));
    }

    #[test]
    fn empty_relation_yields_nothing() {
        let (_d, rel) = load("", 3);
        let det = detect_topk(&rel, &DetectorConfig::default()).unwrap();
        assert!(det.blocks.is_empty());
    }

    #[test]
    fn config_validation() {
        let (_d, rel) = load(MATRIX, 2);
        for bad in [
            DetectorConfig { k: 0, ..Default::default() },
            DetectorConfig { theta: 0.5, ..Default::default() },
            DetectorConfig { theta: f64::NAN, ..Default::default() },
            DetectorConfig { partitions: 2, workers: 3, ..Default::default() },
            DetectorConfig { measure: DensityMeasure::Es { alpha: -1.0 }, ..Default::default() },
        ] {
            assert!(matches!(detect_topk(&rel, &bad), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn survivors_keep_their_masses_after_rewrite() {
        let mut text = String::new();
        let mut x: u64 = 7;
        for _ in 0..400 {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let (u, i, d, m) = ((x >> 33) % 13, (x >> 40) % 11, (x >> 50) % 5, (x >> 20) % 7 + 1);
            text.push_str(&format!("u{u}\ti{i}\td{d}\t{m}\n"));
        }
        let (_d, rel) = load(&text, 3);
        let meter = ValueMeter::new();
        let mut snapshot: Vec<(u32, f64)> = Vec::new();
        let mut checked = 0;
        let mut observe = |phase: PeelPhase, step: &PeelStep<'_>| {
            let st = step.state;
            match phase {
                PeelPhase::Selected => {
                    snapshot = (0..st.index().card(step.dim) as u32)
                        .filter(|&a| st.is_alive(step.dim, a))
                        .map(|a| (a, st.mass(step.dim, a)))
                        .collect();
                }
                PeelPhase::Rewritten => {
                    for &(a, m) in &snapshot {
                        assert_eq!(st.mass(step.dim, a), m);
                    }
                    let mut scanned = 0.0;
                    for shard in step.working.shards() {
                        shard.for_each(|_, m| scanned += m).unwrap();
                    }
                    assert!((scanned - st.block_mass()).abs() <= 1e-6 * rel.total_mass());
                    checked += 1;
                }
            }
        };
        for policy in [SelectionPolicy::MaxCardinality, SelectionPolicy::MaxDensity] {
            let config = DetectorConfig {
                policy,
                ..card_config(1.0)
            };
            find_one_observed(
                &Executor::serial(),
                &Partitioning::single(rel.file().clone()),
                &shape_of(&rel),
                &config,
                &meter,
                &mut observe,
            )
            .unwrap();
        }
        assert!(checked > 4);
    }

    #[test]
    fn removal_log_is_a_contiguous_order() {
        let (_d, rel) = load("a\tx\t3\na\ty\t1\nb\tx\t2\nc\tz\t4\n", 2);
        let meter = ValueMeter::new();
        let mut orders = Vec::new();
        let mut observe = |phase: PeelPhase, step: &PeelStep<'_>| {
            if phase == PeelPhase::Selected && !step.state.any_alive() {
                let log = step.state.log();
                orders = (0..step.state.index().total())
                    .map(|s| log.order(s).unwrap())
                    .collect();
                assert!(log.best_cut() <= log.next_index());
            }
        };
        find_one_observed(
            &Executor::serial(),
            &Partitioning::single(rel.file().clone()),
            &shape_of(&rel),
            &card_config(1.0),
            &meter,
            &mut observe,
        )
        .unwrap();
        orders.sort_unstable();
        assert_eq!(orders, (1..=6).collect::<Vec<u32>>());
    }

    #[test]
    fn overlapping_blocks_are_measured_on_the_original() {
        // a dense 2x2 core plus a heavy row sharing one column with it
        let text = "a\tx\t5\na\ty\t5\nb\tx\t5\nb\ty\t5\nc\tx\t4\nc\tz\t4\nc\tw\t4\n";
        let (_d, rel) = load(text, 2);
        let config = DetectorConfig {
            k: 2,
            ..card_config(1.0)
        };
        let det = detect_topk(&rel, &config).unwrap();
        assert_eq!(det.blocks.len(), 2);
        for b in &det.blocks {
            let d = density::density(DensityMeasure::Ari, &b.shape(&rel)).unwrap();
            assert_eq!(d, b.density);
        }
    }
}
