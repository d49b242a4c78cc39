//! Synthetic tensors with planted dense blocks, an exhaustive oracle for
//! tiny relations, and the recall and AUC metrics used to score detections.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{self, DensityMeasure};
use crate::detector::Subtensor;
use crate::error::{Error, Result};
use crate::store::{ingest_reader, IngestOptions, Relation, Storage};

pub const DEFAULT_MAX_CELL_MEASURE: f64 = 100.0;

/// Largest block volume the generator will fill.
const MAX_BLOCK_VOLUME: u64 = 1 << 26;

/// Attempts at placing a block so it shares no cell with earlier blocks.
const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    /// Per-dimension sizes of each injected block.
    pub block_cards: Vec<Vec<usize>>,
    /// Block density as a multiple of the background density, drawn uniformly.
    pub density_multiplier_range: (f64, f64),
    pub seed: u64,
    /// No cell may exceed this measure after injection.
    pub max_cell_measure: f64,
}

impl InjectionSpec {
    /// `n_blocks` blocks of identical shape.
    pub fn uniform(n_blocks: usize, cards: &[usize], range: (f64, f64), seed: u64) -> Self {
        Self {
            block_cards: vec![cards.to_vec(); n_blocks],
            density_multiplier_range: range,
            seed,
            max_cell_measure: DEFAULT_MAX_CELL_MEASURE,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.block_cards.len()
    }

    fn validate(&self, rel_cards: &[usize]) -> Result<()> {
        let (low, high) = self.density_multiplier_range;
        if !(low.is_finite() && high.is_finite() && 1.0 <= low && low <= high) {
            return Err(Error::Config(format!(
                "density multipliers must satisfy 1 <= low <= high, got ({low}, {high})"
            )));
        }
        if !(self.max_cell_measure.is_finite() && self.max_cell_measure >= 1.0) {
            return Err(Error::Config("max cell measure must be at least 1".into()));
        }
        for (b, cards) in self.block_cards.iter().enumerate() {
            if cards.len() != rel_cards.len() {
                return Err(Error::Config(format!(
                    "block {b} has {} dimensions, relation has {}",
                    cards.len(),
                    rel_cards.len()
                )));
            }
            for (n, (&c, &r)) in cards.iter().zip(rel_cards).enumerate() {
                if c == 0 || c > r {
                    return Err(Error::Config(format!(
                        "block {b} dimension {n}: size {c} not in 1..={r}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// An injected block, identified by raw attribute values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBlock {
    pub attr_values: Vec<Vec<String>>,
    pub mass: f64,
    pub volume: u128,
    /// Target multiplier drawn for this block.
    pub multiplier: f64,
    /// Achieved block density over the background density, both arithmetic.
    pub density_ratio: f64,
}

impl GroundTruthBlock {
    pub fn n_dims(&self) -> usize {
        self.attr_values.len()
    }
}

/// Output of [`generate`]. Cells are aggregated and unique; labels mark
/// cells inside an injected block.
#[derive(Debug, Clone)]
pub struct SyntheticTensor {
    pub cards: Vec<usize>,
    pub cells: Vec<(Vec<u32>, f64)>,
    pub labels: Vec<bool>,
    pub truth: Vec<GroundTruthBlock>,
    /// Arithmetic density of the background before injection.
    pub background_density: f64,
}

impl SyntheticTensor {
    pub fn write_tsv(&self, mut out: impl Write) -> std::io::Result<()> {
        for (attrs, m) in &self.cells {
            for a in attrs {
                write!(out, "{a}\t")?;
            }
            writeln!(out, "{m}")?;
        }
        out.flush()
    }

    pub fn write_labels(&self, mut out: impl Write) -> std::io::Result<()> {
        for &l in &self.labels {
            writeln!(out, "{}", u8::from(l))?;
        }
        out.flush()
    }

    /// Ingests the tensor exactly as its TSV rendering would be ingested.
    pub fn ingest(&self, storage: &Storage) -> Result<Relation> {
        let mut text = Vec::new();
        self.write_tsv(&mut text)
            .map_err(|e| Error::Input(e.to_string()))?;
        ingest_reader(storage, text.as_slice(), &IngestOptions::tsv(self.cards.len()))
    }
}

fn mean_card(cards: &[usize]) -> f64 {
    cards.iter().sum::<usize>() as f64 / cards.len() as f64
}

fn volume(cards: &[usize]) -> Result<u64> {
    cards
        .iter()
        .try_fold(1u64, |v, &c| v.checked_mul(c as u64))
        .ok_or_else(|| Error::TooLarge(format!("volume of {cards:?} overflows")))
}

/// Generates `n_tuples` distinct uniform background cells of measure 1 and
/// plants the blocks of `spec` on top.
///
/// Each block's target mass is its multiplier times the background density
/// times its mean cardinality; unit increments land on uniformly drawn block
/// cells below the cap until the target is met. Blocks are placed so no cell
/// belongs to two blocks.
pub fn generate(rel_cards: &[usize], n_tuples: usize, spec: &InjectionSpec) -> Result<SyntheticTensor> {
    if rel_cards.is_empty() || rel_cards.contains(&0) {
        return Err(Error::Config(format!("invalid relation cardinalities {rel_cards:?}")));
    }
    spec.validate(rel_cards)?;
    let rel_volume = volume(rel_cards)?;
    if n_tuples as u64 > rel_volume {
        return Err(Error::Config(format!(
            "{n_tuples} tuples do not fit in volume {rel_volume}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_dims = rel_cards.len();

    let mut cells: Vec<(Vec<u32>, f64)> = Vec::with_capacity(n_tuples);
    let mut position: HashMap<Vec<u32>, usize> = HashMap::with_capacity(n_tuples);
    while cells.len() < n_tuples {
        let cell: Vec<u32> = rel_cards.iter().map(|&c| rng.gen_range(0..c as u32)).collect();
        if !position.contains_key(&cell) {
            position.insert(cell.clone(), cells.len());
            cells.push((cell, 1.0));
        }
    }
    let background_density = n_tuples as f64 / mean_card(rel_cards);
    let mut labels = vec![false; n_tuples];

    let (low, high) = spec.density_multiplier_range;
    let cap = spec.max_cell_measure;
    let mut placed: Vec<Vec<Vec<u32>>> = Vec::new();
    let mut truth = Vec::with_capacity(spec.n_blocks());
    for (b, bcards) in spec.block_cards.iter().enumerate() {
        let block_volume = volume(bcards)?;
        if block_volume > MAX_BLOCK_VOLUME {
            return Err(Error::TooLarge(format!("block {b} volume {block_volume}")));
        }
        let sets = place_block(&mut rng, rel_cards, bcards, &placed)
            .ok_or_else(|| Error::Infeasible(format!("no disjoint placement for block {b}")))?;

        let multiplier = if low == high { low } else { rng.gen_range(low..=high) };
        let scale = background_density * mean_card(bcards);
        let exact = multiplier * scale;
        let mut target = exact.ceil();
        if target > high * scale {
            target = exact.floor();
        }

        // block-local cell grid, row-major over the chosen ids
        let mut grid = vec![0.0f64; block_volume as usize];
        let mut existing = 0.0;
        for (g, cell) in block_cells(&sets).enumerate() {
            if let Some(&p) = position.get(&cell) {
                grid[g] = cells[p].1;
                existing += cells[p].1;
            }
        }
        if target < existing {
            target = existing;
        }
        let ratio = target / scale;
        if ratio < low || ratio > high {
            return Err(Error::Infeasible(format!(
                "block {b}: achievable density ratio {ratio} outside [{low}, {high}]"
            )));
        }
        if target > block_volume as f64 * cap {
            return Err(Error::Infeasible(format!(
                "block {b}: mass {target} exceeds {block_volume} cells at cap {cap}"
            )));
        }

        let mut open: Vec<u32> = (0..block_volume as u32)
            .filter(|&g| grid[g as usize] + 1.0 <= cap)
            .collect();
        let mut mass = existing;
        while mass < target {
            if open.is_empty() {
                return Err(Error::Infeasible(format!("block {b}: every cell is at cap {cap}")));
            }
            let pick = rng.gen_range(0..open.len());
            let g = open[pick] as usize;
            grid[g] += 1.0;
            mass += 1.0;
            if grid[g] + 1.0 > cap {
                open.swap_remove(pick);
            }
        }

        for (g, cell) in block_cells(&sets).enumerate() {
            if grid[g] == 0.0 {
                continue;
            }
            let p = match position.get(&cell) {
                Some(&p) => p,
                None => {
                    position.insert(cell.clone(), cells.len());
                    cells.push((cell, 0.0));
                    labels.push(false);
                    cells.len() - 1
                }
            };
            cells[p].1 = grid[g];
            labels[p] = true;
        }

        truth.push(GroundTruthBlock {
            attr_values: sets
                .iter()
                .map(|ids| ids.iter().map(u32::to_string).collect())
                .collect(),
            mass,
            volume: block_volume as u128,
            multiplier,
            density_ratio: mass / scale,
        });
        placed.push(sets);
    }
    debug_assert_eq!(cells.len(), labels.len());
    debug_assert!(cells.iter().all(|(a, _)| a.len() == n_dims));
    Ok(SyntheticTensor {
        cards: rel_cards.to_vec(),
        cells,
        labels,
        truth,
        background_density,
    })
}

/// Sorted random id subsets, redrawn until disjoint from every placed block
/// in at least one dimension.
fn place_block(
    rng: &mut ChaCha8Rng,
    rel_cards: &[usize],
    bcards: &[usize],
    placed: &[Vec<Vec<u32>>],
) -> Option<Vec<Vec<u32>>> {
    for _ in 0..PLACEMENT_ATTEMPTS {
        let sets: Vec<Vec<u32>> = rel_cards
            .iter()
            .zip(bcards)
            .map(|(&r, &c)| {
                let mut ids: Vec<u32> = sample(rng, r, c).into_iter().map(|i| i as u32).collect();
                ids.sort_unstable();
                ids
            })
            .collect();
        let disjoint = placed.iter().all(|other| {
            sets.iter()
                .zip(other)
                .any(|(a, b)| a.iter().all(|x| b.binary_search(x).is_err()))
        });
        if disjoint {
            return Some(sets);
        }
    }
    None
}

/// Cells of the box spanned by `sets`, last dimension varying fastest.
fn block_cells(sets: &[Vec<u32>]) -> impl Iterator<Item = Vec<u32>> + '_ {
    let total: usize = sets.iter().map(Vec::len).product();
    let mut pos = vec![0usize; sets.len()];
    (0..total).map(move |_| {
        let cell = pos.iter().zip(sets).map(|(&i, s)| s[i]).collect();
        for n in (0..sets.len()).rev() {
            pos[n] += 1;
            if pos[n] < sets[n].len() {
                break;
            }
            pos[n] = 0;
        }
        cell
    })
}

/// Exact densest block of a tiny relation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// Per-dimension ids, ascending.
    pub best_sets: Vec<Vec<u32>>,
    pub best_mass: f64,
    pub best_density: f64,
}

impl OracleResult {
    pub fn attr_values(&self, relation: &Relation) -> Vec<Vec<String>> {
        self.best_sets
            .iter()
            .enumerate()
            .map(|(n, ids)| {
                ids.iter()
                    .map(|&id| relation.dictionary(n).value(id).to_owned())
                    .collect()
            })
            .collect()
    }
}

pub const ORACLE_MAX_VALUES: usize = 15;

/// Enumerates every combination of nonempty per-dimension subsets.
///
/// Candidates are visited in lexicographic order of their per-dimension
/// bitmasks (bit `i` is id `i`) and only strict improvements replace the
/// incumbent, so ties go to the smallest signature.
pub fn brute_force_densest(relation: &Relation, measure: DensityMeasure) -> Result<OracleResult> {
    let cards = relation.cardinalities();
    let total: usize = cards.iter().sum();
    if total > ORACLE_MAX_VALUES {
        return Err(Error::TooLarge(format!(
            "{total} attribute values exceed the oracle limit of {ORACLE_MAX_VALUES}"
        )));
    }
    if cards.contains(&0) {
        return Err(Error::Input("oracle needs a nonempty relation".into()));
    }
    let tuples = relation.file().read_all()?;
    let rel_mass = relation.total_mass();
    let limits: Vec<u32> = cards.iter().map(|&c| 1u32 << c).collect();
    let mut masks: Vec<u32> = vec![1; cards.len()];
    let mut best: Option<(Vec<u32>, f64, f64)> = None;
    loop {
        let mass: f64 = tuples
            .iter()
            .filter(|t| t.attrs.iter().zip(&masks).all(|(&a, &m)| m >> a & 1 == 1))
            .map(|t| t.measure)
            .sum();
        let rho = density::evaluate(measure, mass, rel_mass, cards, |n| {
            masks[n].count_ones() as usize
        })?;
        if best.as_ref().is_none_or(|(_, _, b)| rho > *b) {
            best = Some((masks.clone(), mass, rho));
        }
        // odometer, last dimension fastest
        let mut n = cards.len();
        loop {
            if n == 0 {
                let (masks, best_mass, best_density) = best.expect("at least one candidate");
                return Ok(OracleResult {
                    best_sets: masks
                        .iter()
                        .map(|&m| (0..32).filter(|&i| m >> i & 1 == 1).collect())
                        .collect(),
                    best_mass,
                    best_density,
                });
            }
            n -= 1;
            masks[n] += 1;
            if masks[n] < limits[n] {
                break;
            }
            masks[n] = 1;
        }
    }
}

/// Per injected block, whether some detection covers it: the detection
/// contains every value of the block in every dimension and its volume is
/// at most ten times the block's.
pub fn match_blocks(detected: &[Subtensor], truth: &[GroundTruthBlock]) -> Result<Vec<bool>> {
    let detected_sets: Vec<Vec<HashSet<&str>>> = detected
        .iter()
        .map(|d| {
            d.attr_values
                .iter()
                .map(|vals| vals.iter().map(String::as_str).collect())
                .collect()
        })
        .collect();
    truth
        .iter()
        .map(|t| {
            let mut found = false;
            for (d, sets) in detected.iter().zip(&detected_sets) {
                if sets.len() != t.n_dims() {
                    return Err(Error::Input(format!(
                        "detected block has {} dimensions, ground truth has {}",
                        sets.len(),
                        t.n_dims()
                    )));
                }
                let covers = t
                    .attr_values
                    .iter()
                    .zip(sets)
                    .all(|(vals, set)| vals.iter().all(|v| set.contains(v.as_str())));
                if covers && d.volume <= t.volume.saturating_mul(10) {
                    found = true;
                }
            }
            Ok(found)
        })
        .collect()
}

/// Fraction of injected blocks found under [`match_blocks`].
pub fn recall(detected: &[Subtensor], truth: &[GroundTruthBlock]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::Input("recall needs at least one ground-truth block".into()));
    }
    let found = match_blocks(detected, truth)?;
    Ok(found.iter().filter(|&&f| f).count() as f64 / truth.len() as f64)
}

/// Score of every tuple in relation order: the highest density among the
/// detected blocks containing it, or 0 when none does.
pub fn tuple_scores(relation: &Relation, detected: &[Subtensor]) -> Result<Vec<f64>> {
    let n_dims = relation.n_dims();
    let mut blocks: Vec<(Vec<Vec<bool>>, f64)> = Vec::with_capacity(detected.len());
    for d in detected {
        if d.attr_values.len() != n_dims {
            return Err(Error::Input(format!(
                "detected block has {} dimensions, relation has {n_dims}",
                d.attr_values.len()
            )));
        }
        let member = d
            .attr_values
            .iter()
            .enumerate()
            .map(|(n, vals)| {
                let dict = relation.dictionary(n);
                let mut bits = vec![false; dict.len()];
                for v in vals {
                    if let Some(id) = dict.id(v) {
                        bits[id as usize] = true;
                    }
                }
                bits
            })
            .collect();
        blocks.push((member, d.density));
    }
    let mut scores = Vec::with_capacity(relation.tuple_count() as usize);
    relation.file().for_each(|attrs, _| {
        let mut score: Option<f64> = None;
        for (member, rho) in &blocks {
            if attrs.iter().enumerate().all(|(n, &a)| member[n][a as usize]) {
                score = Some(score.map_or(*rho, |s: f64| s.max(*rho)));
            }
        }
        scores.push(score.unwrap_or(0.0));
    })?;
    Ok(scores)
}

/// Rank-based area under the ROC curve; tied scores share their mean rank.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::AucUndefined("all labels are identical"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1
        let mean_rank = (i + j + 2) as f64 / 2.0;
        for &o in &order[i..=j] {
            if labels[o] {
                rank_sum += mean_rank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

pub fn score_and_auc(relation: &Relation, detected: &[Subtensor], labels: &[bool]) -> Result<f64> {
    auc(&tuple_scores(relation, detected)?, labels)
}

/// Parses a labels file: one 0 or 1 per line, blank lines skipped.
pub fn read_labels(input: impl BufRead) -> Result<Vec<bool>> {
    let mut labels = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        match line.trim() {
            "" => {}
            "0" => labels.push(false),
            "1" => labels.push(true),
            other => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("label {other:?} is not 0 or 1"),
                })
            }
        }
    }
    Ok(labels)
}

/// Folds per-line labels of a text input onto its aggregated tuples, which
/// ingest orders by first occurrence. Duplicate lines must agree.
pub fn align_labels(input: impl BufRead, options: &IngestOptions, labels: &[bool]) -> Result<Vec<bool>> {
    let delim = options.delimiter.as_char();
    let mut slots: HashMap<Vec<String>, usize> = HashMap::new();
    let mut aligned = Vec::new();
    let mut next = 0;
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if i == 0 && options.header {
            continue;
        }
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let key: Vec<String> = line
            .split(delim)
            .take(options.n_dims)
            .map(str::to_owned)
            .collect();
        let label = *labels.get(next).ok_or_else(|| {
            Error::Input(format!("labels end before input line {}", i + 1))
        })?;
        next += 1;
        match slots.get(&key) {
            Some(&s) if aligned[s] != label => {
                return Err(Error::Input(format!(
                    "line {}: label disagrees with an earlier duplicate",
                    i + 1
                )))
            }
            Some(_) => {}
            None => {
                slots.insert(key, aligned.len());
                aligned.push(label);
            }
        }
    }
    if next != labels.len() {
        return Err(Error::Input(format!(
            "{} labels for {next} input lines",
            labels.len()
        )));
    }
    Ok(aligned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::ingest_reader;

    fn storage() -> (tempfile::TempDir, Storage) {
        let dir = tempfile::tempdir().unwrap();
        let s = Storage::new(dir.path()).unwrap();
        (dir, s)
    }

    fn load(s: &Storage, text: &str, n: usize) -> Relation {
        ingest_reader(s, text.as_bytes(), &IngestOptions::tsv(n)).unwrap()
    }

    fn subtensor(values: &[&[&str]], density: f64) -> Subtensor {
        let attr_values: Vec<Vec<String>> = values
            .iter()
            .map(|v| v.iter().map(|s| s.to_string()).collect())
            .collect();
        let cardinalities: Vec<usize> = attr_values.iter().map(Vec::len).collect();
        Subtensor {
            rank: 1,
            volume: cardinalities.iter().map(|&c| c as u128).product(),
            cardinalities,
            attr_values,
            mass: 0.0,
            density,
        }
    }

    fn truth(values: &[&[&str]]) -> GroundTruthBlock {
        let attr_values: Vec<Vec<String>> = values
            .iter()
            .map(|v| v.iter().map(|s| s.to_string()).collect())
            .collect();
        GroundTruthBlock {
            volume: attr_values.iter().map(|v| v.len() as u128).product(),
            attr_values,
            mass: 0.0,
            multiplier: 1.0,
            density_ratio: 1.0,
        }
    }

    #[test]
    fn oracle_worked_matrix() {
        let (_d, s) = storage();
        let rel = load(&s, "a1\tb1\t10\na1\tb2\t1\na2\tb1\t1\n", 2);
        let best = brute_force_densest(&rel, DensityMeasure::Ari).unwrap();
        assert_eq!(best.best_density, 10.0);
        assert_eq!(best.attr_values(&rel), vec![vec!["a1"], vec!["b1"]]);
    }

    #[test]
    fn oracle_singleton_and_uniform() {
        let (_d, s) = storage();
        let rel = load(&s, "x\ty\t5\n", 2);
        assert_eq!(brute_force_densest(&rel, DensityMeasure::Ari).unwrap().best_density, 5.0);
        let rel = load(&s, "a\tx\t1\na\ty\t1\nb\tx\t1\nb\ty\t1\n", 2);
        let best = brute_force_densest(&rel, DensityMeasure::Ari).unwrap();
        assert_eq!(best.best_density, 2.0);
        assert_eq!(best.best_sets, vec![vec![0, 1], vec![0, 1]]);
    }

    #[test]
    fn oracle_ties_go_to_smallest_signature() {
        let (_d, s) = storage();
        // two isolated unit cells with identical density
        let rel = load(&s, "a\tx\t1\nb\ty\t1\n", 2);
        let best = brute_force_densest(&rel, DensityMeasure::Ari).unwrap();
        assert_eq!(best.best_sets, vec![vec![0], vec![0]]);
    }

    #[test]
    fn oracle_size_guard() {
        let (_d, s) = storage();
        let text: String = (0..8).map(|i| format!("a{i}\tb{i}\t1\n")).collect();
        let rel = load(&s, &text, 2);
        assert!(matches!(
            brute_force_densest(&rel, DensityMeasure::Ari),
            Err(Error::TooLarge(_))
        ));
    }

    #[test]
    fn matching_rules() {
        let t = truth(&[&["1", "2"], &["3"]]);
        assert_eq!(recall(&[subtensor(&[&["1", "2"], &["3"]], 1.0)], std::slice::from_ref(&t)).unwrap(), 1.0);
        // superset of volume 9x the injected 2
        let wide: Vec<String> = (0..9).map(|i| i.to_string()).collect();
        let wide: Vec<&str> = wide.iter().map(String::as_str).collect();
        let nine = subtensor(&[&["1", "2"], &wide[..]], 1.0);
        assert_eq!(nine.volume, 18);
        let t3 = truth(&[&["1", "2"], &["3"]]);
        assert_eq!(match_blocks(&[nine], &[t3]).unwrap(), vec![true]);
        let mut huge = wide.clone();
        huge.push("99");
        huge.push("98");
        let big = subtensor(&[&["1", "2"], &huge[..]], 1.0);
        assert_eq!(big.volume, 22);
        assert_eq!(match_blocks(&[big], std::slice::from_ref(&t)).unwrap(), vec![false]);
        assert_eq!(
            match_blocks(&[subtensor(&[&["1"], &["3"]], 1.0)], std::slice::from_ref(&t)).unwrap(),
            vec![false]
        );
        assert!(match_blocks(&[subtensor(&[&["1"]], 1.0)], &[t]).is_err());
    }

    #[test]
    fn auc_rules() {
        assert_eq!(auc(&[3.0, 3.0, 0.0, 0.0], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.0; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(auc(&[1.0, 2.0], &[true, false]).unwrap(), 0.0);
        assert!(matches!(auc(&[1.0, 2.0], &[true, true]), Err(Error::AucUndefined(_))));
    }

    #[test]
    fn auc_of_random_labels_is_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let scores: Vec<f64> = (0..20_000).map(|_| rng.gen_range(0..50) as f64).collect();
            let labels: Vec<bool> = (0..20_000).map(|_| rng.gen_bool(0.3)).collect();
            let a = auc(&scores, &labels).unwrap();
            assert!((a - 0.5).abs() < 0.05, "{a}");
        }
    }

    #[test]
    fn scores_follow_the_densest_containing_block() {
        let (_d, s) = storage();
        let rel = load(&s, "a\tx\t5\na\ty\t1\nb\tx\t1\nc\tz\t1\n", 2);
        let blocks = [
            subtensor(&[&["a"], &["x"]], 5.0),
            subtensor(&[&["a", "b"], &["x", "y"]], 2.0),
        ];
        assert_eq!(tuple_scores(&rel, &blocks).unwrap(), vec![5.0, 2.0, 2.0, 0.0]);
        let a = score_and_auc(&rel, &blocks[..1], &[true, false, false, false]).unwrap();
        assert_eq!(a, 1.0);
        assert_eq!(score_and_auc(&rel, &[], &[true, false, false, true]).unwrap(), 0.5);
    }

    #[test]
    fn labels_are_aligned_to_aggregated_tuples() {
        let text = "a\tx\t1\nb\ty\t2\na\tx\t3\n";
        let opts = IngestOptions::tsv(2);
        assert_eq!(
            align_labels(text.as_bytes(), &opts, &[true, false, true]).unwrap(),
            vec![true, false]
        );
        assert!(align_labels(text.as_bytes(), &opts, &[true, false, false]).is_err());
        assert!(align_labels(text.as_bytes(), &opts, &[true, false]).is_err());
        assert_eq!(read_labels("1\n0\n\n1\n".as_bytes()).unwrap(), vec![true, false, true]);
        assert!(read_labels("2\n".as_bytes()).is_err());
    }

    #[test]
    fn plain_random_tensor() {
        let spec = InjectionSpec::uniform(0, &[2, 2, 2], (10.0, 100.0), 3);
        let t = generate(&[10, 10, 10], 200, &spec).unwrap();
        assert!(t.truth.is_empty());
        assert_eq!(t.cells.len(), 200);
        assert!(t.labels.iter().all(|&l| !l));
        let distinct: HashSet<&Vec<u32>> = t.cells.iter().map(|(a, _)| a).collect();
        assert_eq!(distinct.len(), 200);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = InjectionSpec::uniform(3, &[4, 4, 2], (2.0, 5.0), 99);
        let render = || {
            let t = generate(&[40, 40, 10], 1000, &spec).unwrap();
            let mut out = Vec::new();
            t.write_tsv(&mut out).unwrap();
            t.write_labels(&mut out).unwrap();
            out
        };
        assert_eq!(render(), render());
    }

    #[test]
    fn injected_block_density_is_verified_from_the_emitted_file() {
        let spec = InjectionSpec::uniform(1, &[10, 10, 10], (10.0, 10.0), 5);
        let t = generate(&[100, 100, 100], 10_000, &spec).unwrap();
        let (_d, s) = storage();
        let rel = t.ingest(&s).unwrap();
        let block = &t.truth[0];
        let member: Vec<Vec<bool>> = (0..3)
            .map(|n| {
                let dict = rel.dictionary(n);
                let mut bits = vec![false; dict.len()];
                for v in &block.attr_values[n] {
                    bits[dict.id(v).unwrap() as usize] = true;
                }
                bits
            })
            .collect();
        let mut mass = 0.0;
        let mut max_cell: f64 = 0.0;
        rel.file()
            .for_each(|a, m| {
                max_cell = max_cell.max(m);
                if a.iter().enumerate().all(|(n, &x)| member[n][x as usize]) {
                    mass += m;
                }
            })
            .unwrap();
        assert_eq!(mass, block.mass);
        let background = 10_000.0 / 100.0;
        let rho = mass / 10.0;
        assert!(rho >= 10.0 * background, "{rho}");
        assert!(max_cell <= DEFAULT_MAX_CELL_MEASURE);
        assert!((block.density_ratio - 10.0).abs() < 1e-9 || block.density_ratio >= 10.0);
    }

    #[test]
    fn ratios_stay_in_range_and_blocks_do_not_share_cells() {
        let mut spec = InjectionSpec::uniform(10, &[10, 10, 10, 5], (10.0, 100.0), 17);
        spec.max_cell_measure = 1000.0;
        let t = generate(&[100, 100, 100, 5], 100_000, &spec).unwrap();
        assert_eq!(t.truth.len(), 10);
        for b in &t.truth {
            assert!((10.0..=100.0).contains(&b.density_ratio), "{}", b.density_ratio);
        }
        let sets: Vec<Vec<HashSet<&String>>> = t
            .truth
            .iter()
            .map(|b| b.attr_values.iter().map(|v| v.iter().collect()).collect())
            .collect();
        for i in 0..sets.len() {
            for j in 0..i {
                assert!(sets[i].iter().zip(&sets[j]).any(|(a, b)| a.is_disjoint(b)));
            }
        }
    }

    #[test]
    fn infeasible_density_is_rejected() {
        // background density 64 / 8 = 8, so a 2x2 block at 100x needs mass 1600 > 4 x 100
        let spec = InjectionSpec::uniform(1, &[2, 2], (100.0, 100.0), 1);
        let err = generate(&[8, 8], 64, &spec).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)), "{err:?}");
        let spec = InjectionSpec::uniform(1, &[5, 1], (10.0, 20.0), 1);
        assert!(matches!(generate(&[4, 4], 4, &spec), Err(Error::Config(_))));
        let spec = InjectionSpec::uniform(0, &[1, 1], (10.0, 20.0), 1);
        assert!(matches!(generate(&[2, 2], 5, &spec), Err(Error::Config(_))));
    }
}
