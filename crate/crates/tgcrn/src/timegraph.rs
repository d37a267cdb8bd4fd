//! Time-aware graph structure learning.
//!
//! Spatial correlations are decomposed into learnable node and time
//! embeddings. Per time step, the adjacency combines a static node
//! affinity, a scalar trend factor from consecutive time embeddings, and a
//! periodic discriminant on the current node state. An auxiliary
//! time-discrepancy loss regularizes the time table so that embedding
//! distances grow in proportion to slot distances, using anchor /
//! adjacent / mid / distant samples drawn per batch.

use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, GraphRef};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Tensor, TensorError};

/// Within-day discretized timestamp: an index in `[0, slots_per_day)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeIndex(pub usize);

impl TimeIndex {
    pub fn slot(self) -> usize {
        self.0
    }

    /// Plain L1 distance between two slots.
    pub fn distance(self, other: TimeIndex) -> usize {
        self.0.abs_diff(other.0)
    }
}

/// Errors from time discretization and time-distance sampling.
#[derive(Clone, Debug, PartialEq)]
pub enum TimegraphError {
    /// Timestamp falls outside the declared service span.
    TimestampOutOfRange { minutes: u32, day_start_minutes: u32, slots_per_day: usize, interval_minutes: u32 },
    /// Time-distance sampling needs at least two batch rows.
    BatchTooSmall { rows: usize },
    /// Time-distance sampling needs at least two columns per row.
    WindowTooShort { cols: usize },
    /// The adjacent range must be at least one slot.
    AdjacentRangeZero,
    /// No column qualifies as an adjacent sample for any anchor choice.
    NoAdjacentCandidate { row: usize },
    /// No column qualifies as a mid-distance sample (window too short
    /// relative to the gamma ranges).
    NoMidCandidate { row: usize, anchor_col: usize },
}

impl fmt::Display for TimegraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimegraphError::TimestampOutOfRange { minutes, day_start_minutes, slots_per_day, interval_minutes } => {
                write!(
                    f,
                    "timestamp {minutes} min is outside the service span [{day_start_minutes}, {}) min",
                    *day_start_minutes as usize + slots_per_day * *interval_minutes as usize
                )
            }
            TimegraphError::BatchTooSmall { rows } => {
                write!(f, "time-distance sampling needs B >= 2 rows, got {rows}")
            }
            TimegraphError::WindowTooShort { cols } => {
                write!(f, "time-distance sampling needs T >= 2 columns, got {cols}")
            }
            TimegraphError::AdjacentRangeZero => write!(f, "adjacent range must be >= 1"),
            TimegraphError::NoAdjacentCandidate { row } => {
                write!(f, "row {row}: no valid adjacent candidate for any anchor")
            }
            TimegraphError::NoMidCandidate { row, anchor_col } => {
                write!(f, "row {row}: no mid-distance candidate for anchor column {anchor_col}")
            }
        }
    }
}

impl std::error::Error for TimegraphError {}

/// Map minutes since day start onto a [`TimeIndex`] under half-open
/// `interval_minutes` buckets starting at `day_start_minutes`.
pub fn discretize_time(
    minutes: u32,
    day_start_minutes: u32,
    interval_minutes: u32,
    slots_per_day: usize,
) -> Result<TimeIndex, TimegraphError> {
    let out_of_range = TimegraphError::TimestampOutOfRange {
        minutes,
        day_start_minutes,
        slots_per_day,
        interval_minutes,
    };
    if minutes >= 1440 || minutes < day_start_minutes {
        return Err(out_of_range);
    }
    let slot = ((minutes - day_start_minutes) / interval_minutes) as usize;
    if slot >= slots_per_day {
        return Err(out_of_range);
    }
    Ok(TimeIndex(slot))
}

/// Learnable node embeddings (`N×d_N`) and daily time embeddings
/// (`slots_per_day×d_T`).
#[derive(Clone, Debug)]
pub struct EmbeddingTables<S> {
    pub node_table: Tensor<S>,
    pub time_table: Tensor<S>,
}

impl<S: Scalar> EmbeddingTables<S> {
    /// Seeded uniform initialization on `[-1/sqrt(dim), +1/sqrt(dim)]`.
    pub fn init(
        num_nodes: usize,
        node_dim: usize,
        num_slots: usize,
        time_dim: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let node_table = uniform_table(&mut rng, num_nodes, node_dim);
        let time_table = uniform_table(&mut rng, num_slots, time_dim);
        EmbeddingTables { node_table, time_table }
    }
}

pub(crate) fn uniform_table<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<S> {
    let bound = 1.0 / (cols as f64).sqrt();
    let data: Vec<S> = (0..rows * cols).map(|_| lit(rng.gen_range(-bound..=bound))).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// One drawn sample with its batch provenance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sampled {
    pub slot: TimeIndex,
    /// Batch row the sample was read from.
    pub row: usize,
    /// Column within that row.
    pub col: usize,
}

/// Anchor / adjacent / mid-distance / distant slot samples for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeDistanceSamples {
    pub anchors: Vec<Sampled>,
    pub adjacents: Vec<Sampled>,
    pub mids: Vec<Sampled>,
    pub distants: Vec<Sampled>,
}

impl TimeDistanceSamples {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Columns usable as adjacent samples for `anchor_col`: within
/// `gamma_adjacent` columns and with slot L1 distance in
/// `[1, gamma_adjacent]`.
pub(crate) fn adjacent_candidates(
    row: &[TimeIndex],
    anchor_col: usize,
    gamma_adjacent: usize,
) -> Vec<usize> {
    let lo = anchor_col.saturating_sub(gamma_adjacent);
    let hi = (anchor_col + gamma_adjacent).min(row.len() - 1);
    (lo..=hi)
        .filter(|&j| {
            let d = row[j].distance(row[anchor_col]);
            j != anchor_col && d >= 1 && d <= gamma_adjacent
        })
        .collect()
}

/// Columns usable as mid-distance samples: within `gamma_mid` columns of
/// the anchor but outside the adjacent band in slot distance.
pub(crate) fn mid_candidates(
    row: &[TimeIndex],
    anchor_col: usize,
    gamma_adjacent: usize,
    gamma_mid: usize,
) -> Vec<usize> {
    let lo = anchor_col.saturating_sub(gamma_mid);
    let hi = (anchor_col + gamma_mid).min(row.len() - 1);
    (lo..=hi)
        .filter(|&j| j != anchor_col && row[j].distance(row[anchor_col]) > gamma_adjacent)
        .collect()
}

/// Draw anchor, adjacent, mid-distance, and distant samples for every
/// batch row. Deterministic for a fixed seed.
///
/// Per row: the anchor column is uniform over the columns that admit at
/// least one adjacent candidate; the adjacent sample is uniform over
/// columns within `gamma_adjacent` of the anchor (slot distance in
/// `[1, gamma_adjacent]`); the mid sample is uniform over columns within
/// `gamma_mid` but outside the adjacent band; the distant sample comes
/// from a uniformly chosen other row and column, resampled up to 16 times
/// until its slot distance to the anchor exceeds `2·gamma_mid`, keeping
/// the farthest candidate otherwise.
pub fn sample_time_distances(
    batch_slots: &[Vec<TimeIndex>],
    gamma_adjacent: usize,
    gamma_mid: usize,
    seed: u64,
) -> Result<TimeDistanceSamples, TimegraphError> {
    let b = batch_slots.len();
    if b < 2 {
        return Err(TimegraphError::BatchTooSmall { rows: b });
    }
    let t = batch_slots[0].len();
    if t < 2 || batch_slots.iter().any(|r| r.len() != t) {
        return Err(TimegraphError::WindowTooShort {
            cols: batch_slots.iter().map(Vec::len).min().unwrap_or(0),
        });
    }
    if gamma_adjacent == 0 {
        return Err(TimegraphError::AdjacentRangeZero);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = TimeDistanceSamples {
        anchors: Vec::with_capacity(b),
        adjacents: Vec::with_capacity(b),
        mids: Vec::with_capacity(b),
        distants: Vec::with_capacity(b),
    };

    for (i, row) in batch_slots.iter().enumerate() {
        let with_adjacent: Vec<usize> = (0..t)
            .filter(|&c| !adjacent_candidates(row, c, gamma_adjacent).is_empty())
            .collect();
        if with_adjacent.is_empty() {
            return Err(TimegraphError::NoAdjacentCandidate { row: i });
        }
        let valid_anchors: Vec<usize> = with_adjacent
            .iter()
            .copied()
            .filter(|&c| !mid_candidates(row, c, gamma_adjacent, gamma_mid).is_empty())
            .collect();
        if valid_anchors.is_empty() {
            return Err(TimegraphError::NoMidCandidate { row: i, anchor_col: with_adjacent[0] });
        }
        let anchor_col = valid_anchors[rng.gen_range(0..valid_anchors.len())];
        let anchor = Sampled { slot: row[anchor_col], row: i, col: anchor_col };

        let adj_cands = adjacent_candidates(row, anchor_col, gamma_adjacent);
        let adj_col = adj_cands[rng.gen_range(0..adj_cands.len())];

        let mid_cands = mid_candidates(row, anchor_col, gamma_adjacent, gamma_mid);
        let mid_col = mid_cands[rng.gen_range(0..mid_cands.len())];

        let threshold = 2 * gamma_mid;
        let mut best: Option<(usize, Sampled)> = None;
        for _ in 0..16 {
            let mut other = rng.gen_range(0..b - 1);
            if other >= i {
                other += 1;
            }
            let col = rng.gen_range(0..t);
            let cand = Sampled { slot: batch_slots[other][col], row: other, col };
            let dist = cand.slot.distance(anchor.slot);
            if best.as_ref().map_or(true, |(bd, _)| dist > *bd) {
                best = Some((dist, cand));
            }
            if dist > threshold {
                break;
            }
        }
        let (_, distant) = best.expect("at least one distant draw");

        out.anchors.push(anchor);
        out.adjacents.push(Sampled { slot: row[adj_col], row: i, col: adj_col });
        out.mids.push(Sampled { slot: row[mid_col], row: i, col: mid_col });
        out.distants.push(distant);
    }
    Ok(out)
}

/// Distance-based proportion regularizer over the time table.
///
/// For each batch element, the Euclidean embedding distance of the
/// adjacent, mid, and distant samples to the anchor is divided by the
/// corresponding slot L1 distance (clamped to at least one for distant
/// pairs) and the three ratios are pulled together under an L1 penalty.
pub fn time_discrepancy_loss<S: Scalar>(
    g: &mut Graph<S>,
    time_table: GraphRef,
    samples: &TimeDistanceSamples,
) -> Result<GraphRef, TensorError> {
    let b = samples.len();
    let anchor_rows: Vec<usize> = samples.anchors.iter().map(|s| s.slot.0).collect();
    let anchors = g.gather_rows(time_table, &anchor_rows)?;

    let mut ratios = Vec::with_capacity(3);
    for (group, exclusion_checked) in
        [(&samples.adjacents, true), (&samples.mids, true), (&samples.distants, false)]
    {
        let rows: Vec<usize> = group.iter().map(|s| s.slot.0).collect();
        let inv_d: Vec<S> = group
            .iter()
            .zip(&samples.anchors)
            .map(|(s, a)| {
                let d = s.slot.distance(a.slot);
                if exclusion_checked {
                    assert!(d >= 1, "sampler invariant violated: zero slot distance after exclusion");
                }
                lit(1.0 / d.max(1) as f64)
            })
            .collect();
        let gathered = g.gather_rows(time_table, &rows)?;
        let diff = g.sub(gathered, anchors)?;
        let sq = g.hadamard(diff, diff)?;
        let sums = g.sum_rows(sq)?;
        let zeta = g.sqrt(sums)?;
        let inv = g.constant(Tensor::from_parts(vec![b], inv_d));
        ratios.push(g.hadamard(zeta, inv)?);
    }

    let (ri, rj, rk) = (ratios[0], ratios[1], ratios[2]);
    let mut terms = Vec::with_capacity(3);
    for (x, y) in [(ri, rj), (ri, rk), (rj, rk)] {
        let d = g.sub(x, y)?;
        terms.push(g.abs(d)?);
    }
    let s1 = g.add(terms[0], terms[1])?;
    let per_element = g.add(s1, terms[2])?;
    g.mean(per_element)
}

/// Static node affinity `E_ν · E_νᵀ` (the self-learning matrix).
pub fn static_affinity<S: Scalar>(
    g: &mut Graph<S>,
    node_table: GraphRef,
) -> Result<GraphRef, TensorError> {
    let t = g.transpose(node_table)?;
    g.matmul(node_table, t)
}

/// Scalar trend factor `⟨E_τ[slot], E_τ[slot-1]⟩`.
///
/// The predecessor of slot 0 wraps to the last slot of the day when
/// `wrap_predecessor` is set, and clamps to slot 0 otherwise.
pub fn trend_factor<S: Scalar>(
    g: &mut Graph<S>,
    time_table: GraphRef,
    slot: TimeIndex,
    num_slots: usize,
    wrap_predecessor: bool,
) -> Result<GraphRef, TensorError> {
    let prev = if slot.0 == 0 {
        if wrap_predecessor {
            num_slots - 1
        } else {
            0
        }
    } else {
        slot.0 - 1
    };
    let cur = g.gather_rows(time_table, &[slot.0])?;
    let prv = g.gather_rows(time_table, &[prev])?;
    let prod = g.hadamard(cur, prv)?;
    g.sum(prod)
}

/// Periodic discriminant `tanh(X · Xᵀ)` on the current node state.
pub fn periodic_discriminant<S: Scalar>(
    g: &mut Graph<S>,
    node_state: GraphRef,
) -> Result<GraphRef, TensorError> {
    let t = g.transpose(node_state)?;
    let xxt = g.matmul(node_state, t)?;
    g.tanh(xxt)
}

/// Per-time-step adjacency: the raw matrix and its row-stochastic
/// propagation form, tagged with the slot it was built for.
#[derive(Clone, Copy, Debug)]
pub struct TimeAwareGraph {
    pub raw: GraphRef,
    pub propagation: GraphRef,
    pub slot: TimeIndex,
}

/// Blend affinity, trend, and the optional periodic discriminant into a
/// time-aware adjacency: `raw = (1 + α·σ(A_ρ)) ⊙ (A_ν + η)`, normalized
/// by row softmax.
pub fn time_aware_adjacency<S: Scalar>(
    g: &mut Graph<S>,
    affinity: GraphRef,
    trend: Option<GraphRef>,
    discriminant: Option<GraphRef>,
    alpha: f64,
    slot: TimeIndex,
) -> Result<TimeAwareGraph, TensorError> {
    let base = match trend {
        Some(eta) => g.add(affinity, eta)?,
        None => affinity,
    };
    let raw = match discriminant {
        Some(rho) => {
            let sig = g.sigmoid(rho)?;
            let scaled = g.scale(sig, lit(alpha))?;
            let mult = g.add_scalar(scaled, S::one())?;
            g.hadamard(mult, base)?
        }
        None => base,
    };
    let propagation = g.row_softmax(raw)?;
    Ok(TimeAwareGraph { raw, propagation, slot })
}
