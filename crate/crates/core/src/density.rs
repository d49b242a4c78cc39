//! Block density measures.
//!
//! Every measure is a function of the block mass, the block cardinalities,
//! the relation mass and the relation cardinalities only, so the peeling loop
//! can evaluate candidate removals without touching tuples.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DensityMeasure {
    /// Mass over the arithmetic mean of the block cardinalities.
    Ari,
    /// Mass over the geometric mean of the block cardinalities.
    Geo,
    /// Negative Poisson log-likelihood of the block mass.
    Susp,
    /// Observed mass minus `alpha` times the expected mass.
    Es { alpha: f64 },
}

impl DensityMeasure {
    pub fn entry_surplus(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::Config(format!(
                "alpha must be a finite number >= 0, got {alpha}"
            )));
        }
        Ok(DensityMeasure::Es { alpha })
    }

    /// Parses a measure name, using `alpha` for `es`.
    pub fn from_name(name: &str, alpha: f64) -> Result<Self> {
        match name {
            "ari" => Ok(DensityMeasure::Ari),
            "geo" => Ok(DensityMeasure::Geo),
            "susp" => Ok(DensityMeasure::Susp),
            "es" => Self::entry_surplus(alpha),
            other => Err(Error::Config(format!("unknown density measure {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DensityMeasure::Ari => "ari",
            DensityMeasure::Geo => "geo",
            DensityMeasure::Susp => "susp",
            DensityMeasure::Es { .. } => "es",
        }
    }
}

impl fmt::Display for DensityMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DensityMeasure::Es { alpha } => write!(f, "es({alpha})"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for DensityMeasure {
    type Err = Error;

    /// Accepts `ari`, `geo`, `susp`, `es` (alpha 1) or `es(<alpha>)`.
    fn from_str(s: &str) -> Result<Self> {
        if let Some(inner) = s.strip_prefix("es(").and_then(|r| r.strip_suffix(')')) {
            let alpha = inner
                .parse()
                .map_err(|_| Error::Config(format!("bad alpha in {s:?}")))?;
            return Self::entry_surplus(alpha);
        }
        Self::from_name(s, 1.0)
    }
}

/// Mass and cardinalities of a block and of its enclosing relation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtensorShape {
    pub block_mass: f64,
    pub block_cards: Vec<usize>,
    pub rel_mass: f64,
    pub rel_cards: Vec<usize>,
}

impl SubtensorShape {
    pub fn validate(&self) -> Result<()> {
        if self.block_cards.len() != self.rel_cards.len() {
            return Err(Error::Config(format!(
                "block has {} dimensions, relation has {}",
                self.block_cards.len(),
                self.rel_cards.len()
            )));
        }
        if let Some(n) = (0..self.block_cards.len()).find(|&n| self.block_cards[n] > self.rel_cards[n]) {
            return Err(Error::Config(format!(
                "dimension {n}: block cardinality {} exceeds relation cardinality {}",
                self.block_cards[n], self.rel_cards[n]
            )));
        }
        if self.block_mass < 0.0 || self.block_mass > self.rel_mass * (1.0 + 1e-9) + 1e-12 {
            return Err(Error::Config(format!(
                "block mass {} outside [0, {}]",
                self.block_mass, self.rel_mass
            )));
        }
        Ok(())
    }
}

/// Density of `shape` under `measure`. Empty blocks (every cardinality zero)
/// score negative infinity under every measure.
pub fn density(measure: DensityMeasure, shape: &SubtensorShape) -> Result<f64> {
    shape.validate()?;
    evaluate(
        measure,
        shape.block_mass,
        shape.rel_mass,
        &shape.rel_cards,
        |n| shape.block_cards[n],
    )
}

/// Density of `shape` after dropping `removed_count` values carrying
/// `removed_mass` from dimension `dim`. `shape` is not modified.
pub fn density_after_removal(
    measure: DensityMeasure,
    shape: &SubtensorShape,
    dim: usize,
    removed_count: usize,
    removed_mass: f64,
) -> Result<f64> {
    shape.validate()?;
    if dim >= shape.block_cards.len() || removed_count > shape.block_cards[dim] {
        return Err(Error::Config(format!(
            "cannot remove {removed_count} values from dimension {dim}"
        )));
    }
    let tol = 1e-9 * shape.block_mass.abs().max(1.0);
    if removed_mass < 0.0 || removed_mass > shape.block_mass + tol {
        return Err(Error::Config(format!(
            "removed mass {removed_mass} outside [0, {}]",
            shape.block_mass
        )));
    }
    evaluate(
        measure,
        shape.block_mass - removed_mass,
        shape.rel_mass,
        &shape.rel_cards,
        |n| {
            if n == dim {
                shape.block_cards[dim] - removed_count
            } else {
                shape.block_cards[n]
            }
        },
    )
}

/// Shared arithmetic for all entry points; `card(n)` yields the block
/// cardinality of dimension `n`.
pub(crate) fn evaluate(
    measure: DensityMeasure,
    block_mass: f64,
    rel_mass: f64,
    rel_cards: &[usize],
    card: impl Fn(usize) -> usize,
) -> Result<f64> {
    let n_dims = rel_cards.len();
    if (0..n_dims).all(|n| card(n) == 0) {
        return Ok(f64::NEG_INFINITY);
    }
    let value = match measure {
        DensityMeasure::Ari => {
            let sum: usize = (0..n_dims).map(&card).sum();
            block_mass / (sum as f64 / n_dims as f64)
        }
        DensityMeasure::Geo => {
            let product = (0..n_dims).fold(1.0f64, |p, n| p * card(n) as f64);
            if product == 0.0 {
                // a block with an empty dimension holds no tuples
                if block_mass == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                block_mass / product.powf(1.0 / n_dims as f64)
            }
        }
        DensityMeasure::Susp => {
            if rel_mass == 0.0 {
                return Err(Error::UndefinedDensity(
                    "suspiciousness needs a relation with positive mass",
                ));
            }
            let (ratio, ln_ratio) = volume_ratio(rel_cards, &card);
            let surprise = if block_mass == 0.0 {
                0.0
            } else {
                block_mass * ln_ratio
            };
            xlogy(block_mass, block_mass / rel_mass) - block_mass + rel_mass * ratio - surprise
        }
        DensityMeasure::Es { alpha } => {
            let (ratio, _) = volume_ratio(rel_cards, &card);
            block_mass - alpha * rel_mass * ratio
        }
    };
    Ok(value)
}

/// `Π |B_n|/|R_n|` and its natural log, accumulated dimension by dimension.
fn volume_ratio(rel_cards: &[usize], card: &impl Fn(usize) -> usize) -> (f64, f64) {
    let mut ratio = 1.0;
    let mut ln_ratio = 0.0;
    for (n, &r) in rel_cards.iter().enumerate() {
        let b = card(n);
        if b == 0 {
            ratio = 0.0;
            ln_ratio = f64::NEG_INFINITY;
        } else {
            let q = b as f64 / r as f64;
            ratio *= q;
            ln_ratio += q.ln();
        }
    }
    (ratio, ln_ratio)
}

/// `x·ln(y)` with `0·ln(anything) = 0`.
fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}
