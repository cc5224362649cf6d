//! Ising-style coalition energies, the cooling schedule, the Gibbs
//! distribution over a layer's configuration states, and the payoff that
//! turns probabilities into coalition worth.
//!
//! Conventions that matter:
//! - the interaction sum runs over *unordered* neighbor pairs, each counted
//!   once;
//! - probabilities are computed against a log-space partition value so the
//!   same `exp(-E/kT - log_q)` expression serves both full coalitions and
//!   the sub-coalitions used by Shapley evaluation;
//! - the iteration index starts at 1 (the schedule divides by `ln(1+i)`).

use serde::{Deserialize, Serialize};

use crate::coalition::{ConfigurationState, NeighborhoodSystem, ACTIVATION_FLOOR};
use crate::error::{Error, Result};

/// Boltzmann constant.
pub const BOLTZMANN_K: f64 = 1.38e-23;

/// Coefficients of the energy, temperature and payoff functions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyParams {
    /// External-field coefficient (per-site `1/a` term).
    pub alpha: f64,
    /// Bonding coefficient (pairwise `1/(a_p a_q)` term).
    pub beta: f64,
    /// Temperature scale constant.
    pub temp_c: f64,
    /// Payoff control constant.
    pub payoff_k: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        // The tuned configuration: field off, unit bonding, unit scales.
        EnergyParams {
            alpha: 0.0,
            beta: 1.0,
            temp_c: 1.0,
            payoff_k: 1.0,
        }
    }
}

/// Score of one coalition inside an [`EnergyMap`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoalitionScore {
    pub coalition_id: usize,
    pub energy: f64,
    pub gibbs: f64,
    pub payoff: f64,
}

/// Per-coalition energies, Gibbs probabilities and payoffs of one activation
/// map, plus the scoring context (log partition value, temperature) that
/// sub-coalition payoffs are evaluated against.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnergyMap {
    pub scores: Vec<CoalitionScore>,
    /// Natural log of the partition value.
    pub log_q: f64,
    pub temperature: f64,
    /// `BOLTZMANN_K * temperature`, kept so every probability in this map's
    /// scope is derived from the identical product.
    pub kbt: f64,
    pub iteration: f64,
}

impl EnergyMap {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Probability of a configuration with the given energy under this map's
    /// frozen partition value.
    pub fn gibbs_of_energy(&self, energy: f64) -> f64 {
        (-energy / self.kbt - self.log_q).exp()
    }
}

/// Energy of a full configuration state over the given neighbor pairs:
/// `alpha * sum_p 1/a_p + beta * sum_<p,q> 1/(a_p a_q)`.
pub fn energy(state: &ConfigurationState, pairs: &NeighborhoodSystem, params: &EnergyParams) -> Result<f64> {
    for &a in &state.activations {
        if a < ACTIVATION_FLOOR {
            return Err(Error::ActivationFloor {
                value: a,
                floor: ACTIVATION_FLOOR,
            });
        }
    }
    let full = (1u64 << state.len()) - 1;
    let e = subset_energy(state, pairs, full, params);
    if e.is_finite() {
        Ok(e)
    } else {
        Err(Error::NonFinite { op: "energy" })
    }
}

/// Energy of the sub-configuration induced by `member_mask` (bit `k` set
/// means member `k` participates): field terms over present members, bond
/// terms over pairs whose endpoints are both present.
pub(crate) fn subset_energy(
    state: &ConfigurationState,
    pairs: &NeighborhoodSystem,
    member_mask: u64,
    params: &EnergyParams,
) -> f64 {
    let acts = &state.activations;
    let mut field = 0.0;
    if params.alpha != 0.0 {
        for (k, &a) in acts.iter().enumerate() {
            if member_mask & (1 << k) != 0 {
                field += 1.0 / a;
            }
        }
    }
    let mut bond = 0.0;
    if params.beta != 0.0 {
        for &(p, q) in &pairs.pairs {
            if member_mask & (1 << p) != 0 && member_mask & (1 << q) != 0 {
                bond += 1.0 / (acts[p] * acts[q]);
            }
        }
    }
    params.alpha * field + params.beta * bond
}

/// Cooling schedule `T(i) = temp_c * 10^23 / ln(1+i)`, defined for `i >= 1`.
pub fn temperature(iteration: f64, params: &EnergyParams) -> Result<f64> {
    if !(iteration >= 1.0) {
        return Err(Error::IterationRange(iteration));
    }
    Ok(params.temp_c * 1e23 / (1.0 + iteration).ln())
}

/// `BOLTZMANN_K * T(i)` in one product.
pub fn thermal_energy(iteration: f64, params: &EnergyParams) -> Result<f64> {
    Ok(BOLTZMANN_K * temperature(iteration, params)?)
}

/// Gibbs probabilities of the given energies at iteration `i`, together with
/// the log partition value. Computed with a max-shift so arbitrarily large
/// energy spans stay stable; the probabilities sum to one.
pub fn gibbs_layer(energies: &[f64], iteration: f64, params: &EnergyParams) -> Result<(Vec<f64>, f64)> {
    if energies.is_empty() {
        return Err(Error::EmptyInput("gibbs_layer"));
    }
    if energies.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite { op: "gibbs_layer" });
    }
    let kbt = thermal_energy(iteration, params)?;
    let log_q = log_partition(energies, kbt);
    let probs = energies.iter().map(|&e| (-e / kbt - log_q).exp()).collect();
    Ok((probs, log_q))
}

fn log_partition(energies: &[f64], kbt: f64) -> f64 {
    let min_e = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let shifted: f64 = energies.iter().map(|&e| (-(e - min_e) / kbt).exp()).sum();
    -min_e / kbt + shifted.ln()
}

/// Payoff of a coalition with Gibbs probability `p`:
/// `ln(payoff_k / (1 - p))`, with `p` clamped below 1 so the logarithm stays
/// finite even for a single-coalition layer where `p` is exactly one.
pub fn payoff(p: f64, params: &EnergyParams) -> f64 {
    let p = p.clamp(0.0, 1.0 - 1e-12);
    (params.payoff_k / (1.0 - p)).ln()
}

/// Score every coalition of a layer: energies, Gibbs probabilities and
/// payoffs, with one shared partition value and temperature.
pub fn score_layer(
    states: &[ConfigurationState],
    pairs: &NeighborhoodSystem,
    iteration: f64,
    params: &EnergyParams,
) -> Result<EnergyMap> {
    if states.is_empty() {
        return Err(Error::EmptyInput("score_layer"));
    }
    let energies = states
        .iter()
        .map(|s| energy(s, pairs, params))
        .collect::<Result<Vec<_>>>()?;
    let (probs, log_q) = gibbs_layer(&energies, iteration, params)?;
    let scores = states
        .iter()
        .zip(energies.iter().zip(&probs))
        .map(|(s, (&e, &p))| CoalitionScore {
            coalition_id: s.coalition_id,
            energy: e,
            gibbs: p,
            payoff: payoff(p, params),
        })
        .collect();
    Ok(EnergyMap {
        scores,
        log_q,
        temperature: temperature(iteration, params)?,
        kbt: thermal_energy(iteration, params)?,
        iteration,
    })
}

/// Score several maps' coalitions against one joint partition value, so
/// probabilities are normalized across all of them instead of per map.
pub fn score_layers_joint(
    per_map_states: &[Vec<ConfigurationState>],
    pairs: &NeighborhoodSystem,
    iteration: f64,
    params: &EnergyParams,
) -> Result<Vec<EnergyMap>> {
    if per_map_states.iter().all(|s| s.is_empty()) {
        return Err(Error::EmptyInput("score_layers_joint"));
    }
    let kbt = thermal_energy(iteration, params)?;
    let temperature = temperature(iteration, params)?;
    let mut all_energies = Vec::new();
    let mut per_map_energies = Vec::with_capacity(per_map_states.len());
    for states in per_map_states {
        let energies = states
            .iter()
            .map(|s| energy(s, pairs, params))
            .collect::<Result<Vec<_>>>()?;
        all_energies.extend_from_slice(&energies);
        per_map_energies.push(energies);
    }
    let log_q = log_partition(&all_energies, kbt);
    Ok(per_map_states
        .iter()
        .zip(per_map_energies)
        .map(|(states, energies)| {
            let scores = states
                .iter()
                .zip(energies)
                .map(|(s, e)| {
                    let p = (-e / kbt - log_q).exp();
                    CoalitionScore {
                        coalition_id: s.coalition_id,
                        energy: e,
                        gibbs: p,
                        payoff: payoff(p, params),
                    }
                })
                .collect();
            EnergyMap {
                scores,
                log_q,
                temperature,
                kbt,
                iteration,
            }
        })
        .collect())
}
