//! Shapley values of neurons inside winning coalitions, the dynamic keep
//! threshold, and strong-coalition mask extraction.
//!
//! The characteristic function of a coalition's sub-games is the payoff of
//! the induced sub-configuration, evaluated against the partition value
//! frozen from the full-layer scoring; subsets with fewer than two members
//! are worth zero, since singletons do not form coalitions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coalition::{ConfigurationState, NeighborhoodSystem};
use crate::error::{Error, Result};
use crate::statmech::{payoff, subset_energy, EnergyMap, EnergyParams};

/// Upper bound on players for the exact subset-sum evaluation unless
/// explicitly overridden; 2^n subset values are enumerated.
pub const EXACT_SHAPLEY_GUARD: usize = 12;

/// Hard ceiling for any exact enumeration: factorial weights and bitmasks.
const EXACT_SHAPLEY_CEILING: usize = 20;

/// A deterministic map from player subsets (bitmask, bit `k` = player `k`)
/// to a real worth.
pub trait CharacteristicFn {
    fn player_count(&self) -> usize;
    fn value(&self, subset: u64) -> f64;
}

/// Characteristic function backed by an explicit table of 2^n values.
#[derive(Clone, Debug)]
pub struct TableGame {
    n: usize,
    values: Vec<f64>,
}

impl TableGame {
    /// `values[mask]` is the worth of `mask`; `values[0]` must be 0.
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != 1 << n {
            return Err(Error::invalid(
                "TableGame::new",
                format!("{} players want {} values, got {}", n, 1usize << n, values.len()),
            ));
        }
        if values[0] != 0.0 {
            return Err(Error::invalid("TableGame::new", "empty coalition must be worth 0"));
        }
        Ok(TableGame { n, values })
    }

    /// Pointwise sum of two games over the same player set.
    pub fn sum(&self, other: &TableGame) -> Result<TableGame> {
        if self.n != other.n {
            return Err(Error::invalid("TableGame::sum", "player counts differ"));
        }
        TableGame::new(
            self.n,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }
}

impl CharacteristicFn for TableGame {
    fn player_count(&self) -> usize {
        self.n
    }

    fn value(&self, subset: u64) -> f64 {
        self.values[subset as usize]
    }
}

/// Payoff of sub-configurations of one scored coalition: subset energies are
/// converted to Gibbs probabilities against the layer's frozen partition
/// value, then passed through the payoff function. Subsets of size < 2 are
/// worth zero.
pub struct SubsetPayoff<'a> {
    state: &'a ConfigurationState,
    pairs: &'a NeighborhoodSystem,
    map: &'a EnergyMap,
    params: &'a EnergyParams,
}

impl<'a> SubsetPayoff<'a> {
    pub fn new(
        state: &'a ConfigurationState,
        pairs: &'a NeighborhoodSystem,
        map: &'a EnergyMap,
        params: &'a EnergyParams,
    ) -> Self {
        SubsetPayoff {
            state,
            pairs,
            map,
            params,
        }
    }
}

impl CharacteristicFn for SubsetPayoff<'_> {
    fn player_count(&self) -> usize {
        self.state.len()
    }

    fn value(&self, subset: u64) -> f64 {
        if subset.count_ones() < 2 {
            return 0.0;
        }
        let e = subset_energy(self.state, self.pairs, subset, self.params);
        payoff(self.map.gibbs_of_energy(e), self.params)
    }
}

/// Payoff of the sub-coalition given by `members` (indices into the state's
/// row-major member order).
pub fn subset_payoff(
    state: &ConfigurationState,
    members: &[usize],
    pairs: &NeighborhoodSystem,
    map: &EnergyMap,
    params: &EnergyParams,
) -> Result<f64> {
    let mut mask = 0u64;
    for &m in members {
        if m >= state.len() {
            return Err(Error::MemberRange {
                index: m,
                n: state.len(),
            });
        }
        mask |= 1 << m;
    }
    Ok(SubsetPayoff::new(state, pairs, map, params).value(mask))
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut acc = 1.0;
    for j in 0..k {
        acc = acc * (n - j) as f64 / (j + 1) as f64;
    }
    acc
}

/// Exact Shapley values by subset enumeration:
/// `phi_i = sum_{C not containing i} |C|!(n-|C|-1)!/n! * (v(C+i) - v(C))`.
/// Weights are accumulated multiplicatively, never as raw factorials.
pub fn shapley_exact(v: &impl CharacteristicFn) -> Result<Vec<f64>> {
    shapley_exact_with_limit(v, EXACT_SHAPLEY_GUARD)
}

/// Exact Shapley with an explicit player guard (hard ceiling at 20).
pub fn shapley_exact_with_limit(v: &impl CharacteristicFn, limit: usize) -> Result<Vec<f64>> {
    let n = v.player_count();
    if n == 0 {
        return Err(Error::EmptyInput("shapley_exact"));
    }
    let guard = limit.min(EXACT_SHAPLEY_CEILING);
    if n > guard {
        return Err(Error::ShapleyGuard { n, guard });
    }
    let table: Vec<f64> = (0..1u64 << n).map(|m| v.value(m)).collect();
    // w(k) = k!(n-1-k)!/n! = 1 / (n * C(n-1, k))
    let weights: Vec<f64> = (0..n).map(|k| 1.0 / (n as f64 * binomial(n - 1, k))).collect();
    let mut phi = vec![0.0; n];
    for (i, phi_i) in phi.iter_mut().enumerate() {
        let bit = 1u64 << i;
        for mask in 0..1u64 << n {
            if mask & bit != 0 {
                continue;
            }
            let k = mask.count_ones() as usize;
            *phi_i += weights[k] * (table[(mask | bit) as usize] - table[mask as usize]);
        }
    }
    Ok(phi)
}

/// Unbiased permutation-sampling estimate of the Shapley values,
/// deterministic for a given seed.
pub fn shapley_monte_carlo(v: &impl CharacteristicFn, samples: usize, seed: u64) -> Result<Vec<f64>> {
    let n = v.player_count();
    if n == 0 {
        return Err(Error::EmptyInput("shapley_monte_carlo"));
    }
    if samples == 0 {
        return Err(Error::invalid("shapley_monte_carlo", "samples must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut phi = vec![0.0; n];
    for _ in 0..samples {
        order.shuffle(&mut rng);
        accumulate_marginals(v, &order, &mut phi);
    }
    for p in &mut phi {
        *p /= samples as f64;
    }
    Ok(phi)
}

/// Average marginal contribution over *all* n! orderings. Alternate exact
/// route to the subset formula; also the exhaustive mode of the permutation
/// estimator.
pub fn shapley_permutation_exhaustive(v: &impl CharacteristicFn) -> Result<Vec<f64>> {
    let n = v.player_count();
    if n == 0 {
        return Err(Error::EmptyInput("shapley_permutation_exhaustive"));
    }
    if n > 9 {
        return Err(Error::ShapleyGuard { n, guard: 9 });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut phi = vec![0.0; n];
    let mut count = 0u64;
    permute(&mut order, 0, &mut |perm| {
        accumulate_marginals(v, perm, &mut phi);
        count += 1;
    });
    for p in &mut phi {
        *p /= count as f64;
    }
    Ok(phi)
}

fn accumulate_marginals(v: &impl CharacteristicFn, order: &[usize], phi: &mut [f64]) {
    let mut mask = 0u64;
    let mut prev = v.value(0);
    for &p in order {
        mask |= 1 << p;
        let cur = v.value(mask);
        phi[p] += cur - prev;
        prev = cur;
    }
}

fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

/// First quartile at 1-indexed position `(n+1)/4` with linear interpolation,
/// clamped to the data range.
pub fn quartile_q1(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("quartile_q1"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite shapley values"));
    let n = sorted.len();
    let pos = ((n + 1) as f64 / 4.0).clamp(1.0, n as f64);
    let lo = pos.floor() as usize - 1;
    let hi = pos.ceil() as usize - 1;
    let frac = pos - pos.floor();
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Dynamic keep threshold: first quartile of the coalition's Shapley values
/// scaled by `ln(1+i)`. Grows with the iteration count whenever the quartile
/// is nonnegative.
pub fn threshold_rho(shapley_values: &[f64], iteration: f64) -> Result<f64> {
    if !(iteration >= 1.0) {
        return Err(Error::IterationRange(iteration));
    }
    Ok(quartile_q1(shapley_values)? * (1.0 + iteration).ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapleyMethod {
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
}

/// Per-neuron Shapley values of one winning coalition with the applied
/// threshold. `keep` holds the raw `phi > rho` flags; when none pass,
/// `fallback` names the member retained anyway (maximum phi, first in
/// row-major order on ties).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShapleyReport {
    pub coalition_id: usize,
    pub shapley: Vec<f64>,
    pub rho: f64,
    pub keep: Vec<bool>,
    pub fallback: Option<usize>,
    pub method: ShapleyMethod,
}

impl ShapleyReport {
    pub fn new(coalition_id: usize, shapley: Vec<f64>, rho: f64, method: ShapleyMethod) -> Self {
        let keep: Vec<bool> = shapley.iter().map(|&phi| phi > rho).collect();
        let fallback = if keep.iter().any(|&k| k) {
            None
        } else {
            let mut best = 0;
            for (i, &phi) in shapley.iter().enumerate() {
                if phi > shapley[best] {
                    best = i;
                }
            }
            Some(best)
        };
        ShapleyReport {
            coalition_id,
            shapley,
            rho,
            keep,
            fallback,
            method,
        }
    }

    /// Effective keep decision for member `k` (threshold pass or fallback).
    pub fn kept(&self, k: usize) -> bool {
        self.keep[k] || self.fallback == Some(k)
    }

    pub fn kept_count(&self) -> usize {
        (0..self.keep.len()).filter(|&k| self.kept(k)).count()
    }
}

/// Binary keep/drop mask over one activation map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapMask {
    pub rows: usize,
    pub cols: usize,
    /// Row-major 0/1 entries.
    pub keep: Vec<u8>,
    /// Ids of the winning coalitions this mask was extracted from.
    pub winning_ids: Vec<usize>,
}

impl MapMask {
    pub fn ones(rows: usize, cols: usize) -> Self {
        MapMask {
            rows,
            cols,
            keep: vec![1; rows * cols],
            winning_ids: Vec::new(),
        }
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k == 1).count()
    }
}

/// Build the strong-coalition mask of one map: a neuron is kept exactly when
/// its Shapley value passes its coalition's threshold, except that a winning
/// coalition whose members all fall below the threshold retains its maximum
/// contributor. Everything outside winning coalitions is dropped.
pub fn extract_strong(
    map_shape: (usize, usize),
    winning: &[(&ConfigurationState, &ShapleyReport)],
) -> Result<MapMask> {
    let (rows, cols) = map_shape;
    let mut mask = MapMask {
        rows,
        cols,
        keep: vec![0; rows * cols],
        winning_ids: winning.iter().map(|(s, _)| s.coalition_id).collect(),
    };
    for (state, report) in winning {
        if report.shapley.len() != state.len() {
            return Err(Error::shape(
                "extract_strong",
                format!(
                    "report of {} values for a coalition of {}",
                    report.shapley.len(),
                    state.len()
                ),
            ));
        }
        for (k, coord) in state.coords.iter().enumerate() {
            if coord.row >= rows || coord.col >= cols {
                return Err(Error::shape(
                    "extract_strong",
                    format!("coord {coord:?} outside {rows}x{cols}"),
                ));
            }
            if report.kept(k) {
                mask.keep[coord.row * cols + coord.col] = 1;
            }
        }
    }
    Ok(mask)
}
