//! The coalition-gated layer: activation maps are tiled into coalitions,
//! scored, the top-payoff fraction selected as winning, their neurons
//! filtered by Shapley value against the dynamic threshold, and the
//! surviving activations forwarded unchanged (everything else transmits
//! zero). The selection is a deterministic function of the activations, so
//! inference recomputes it rather than disabling it; gradients treat the
//! selection as a constant and flow only through kept positions.

use serde::{Deserialize, Serialize};

use crate::coalition::{partition, ConfigurationState, NeighborhoodKind, NeighborhoodSystem};
use crate::error::{Error, Result};
use crate::shapley::{
    extract_strong, shapley_exact_with_limit, shapley_monte_carlo, threshold_rho, MapMask,
    ShapleyMethod, ShapleyReport, SubsetPayoff, EXACT_SHAPLEY_GUARD,
};
use crate::statmech::{score_layer, score_layers_joint, EnergyMap, EnergyParams};
use crate::tensor::{Scalar, Tensor};
use crate::util::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Winning-coalition budget: either an explicit count of top coalitions or a
/// fraction of the layer's coalition total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopP {
    Count(usize),
    Fraction(f64),
}

impl TopP {
    /// Number of winning coalitions among `m`; at least one, at most all.
    pub fn winning_count(&self, m: usize) -> usize {
        match *self {
            TopP::Count(k) => k.clamp(1, m),
            // Guard against representation noise like 0.85 * 100 = 85.0000...01.
            TopP::Fraction(f) => (((f * m as f64) - 1e-9).ceil() as usize).clamp(1, m),
        }
    }
}

/// Shapley evaluation budget for winning coalitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapleyBudget {
    /// Exact subset enumeration up to `limit` players.
    Exact { limit: usize },
    /// Permutation sampling with a per-coalition derived seed.
    MonteCarlo { samples: usize },
}

impl Default for ShapleyBudget {
    fn default() -> Self {
        ShapleyBudget::Exact {
            limit: EXACT_SHAPLEY_GUARD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeurogameLayerConfig {
    /// Coalition tile shape (rows, cols).
    pub block: (usize, usize),
    pub top_p: TopP,
    pub neighborhood: NeighborhoodKind,
    pub energy: EnergyParams,
    pub shapley: ShapleyBudget,
    /// Base seed for Monte Carlo Shapley streams.
    pub shapley_seed: u64,
    /// Scale kept activations by total/kept per channel (off by default:
    /// kept neurons transmit unscaled values).
    pub rescale_kept: bool,
    /// Make inference a pass-through instead of recomputing the mask.
    pub infer_identity: bool,
    /// Skip the gate entirely (test hook for identity reductions).
    pub pass_through: bool,
    /// Fixed threshold override (test hook; `-inf` keeps every winning
    /// neuron).
    pub rho_override: Option<f64>,
    /// Normalize Gibbs probabilities jointly across channels instead of per
    /// channel map.
    pub joint_partition: bool,
}

impl Default for NeurogameLayerConfig {
    fn default() -> Self {
        NeurogameLayerConfig {
            block: (2, 2),
            top_p: TopP::Fraction(0.85),
            neighborhood: NeighborhoodKind::Plus4,
            energy: EnergyParams::default(),
            shapley: ShapleyBudget::default(),
            shapley_seed: 0,
            rescale_kept: false,
            infer_identity: false,
            pass_through: false,
            rho_override: None,
            joint_partition: false,
        }
    }
}

impl NeurogameLayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block.0 == 0 || self.block.1 == 0 {
            return Err(Error::invalid("NeurogameLayerConfig", "block dims must be >= 1"));
        }
        if let TopP::Fraction(f) = self.top_p {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::invalid(
                    "NeurogameLayerConfig",
                    format!("top_p fraction {f} outside (0, 1]"),
                ));
            }
        }
        if let ShapleyBudget::MonteCarlo { samples } = self.shapley {
            if samples == 0 {
                return Err(Error::invalid("NeurogameLayerConfig", "samples must be >= 1"));
            }
        }
        Ok(())
    }
}

/// Keep/drop mask over a whole activation-map stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMask {
    pub channels: Vec<MapMask>,
    pub iteration: u64,
}

impl LayerMask {
    pub fn all_ones(h: usize, w: usize, c: usize, iteration: u64) -> Self {
        LayerMask {
            channels: (0..c).map(|_| MapMask::ones(h, w)).collect(),
            iteration,
        }
    }

    pub fn kept_count(&self) -> usize {
        self.channels.iter().map(|m| m.kept_count()).sum()
    }

    pub fn total(&self) -> usize {
        self.channels.iter().map(|m| m.rows * m.cols).sum()
    }
}

/// One serializable diagnostics record per (gated layer, channel).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NgDiagnostics {
    pub layer: usize,
    pub channel: usize,
    pub iteration: u64,
    /// Payoff of every coalition, in coalition-id order.
    pub payoffs: Vec<f64>,
    /// Shapley detail for the winning coalitions.
    pub coalitions: Vec<CoalitionReport>,
    pub kept_count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoalitionReport {
    pub coalition_id: usize,
    pub shapley: Vec<f64>,
    pub rho: f64,
    /// Effective keep flags (threshold pass or argmax fallback).
    pub kept: Vec<bool>,
}

/// Ids of the winning coalitions: payoff descending, ties to the lower id.
pub fn select_winning(map: &EnergyMap, top_p: TopP) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..map.len()).collect();
    ids.sort_by(|&a, &b| {
        map.scores[b]
            .payoff
            .partial_cmp(&map.scores[a].payoff)
            .expect("finite payoffs")
            .then(map.scores[a].coalition_id.cmp(&map.scores[b].coalition_id))
    });
    ids.truncate(top_p.winning_count(map.len()));
    ids.into_iter().map(|i| map.scores[i].coalition_id).collect()
}

/// Split an `[H,W,C]` stack into per-channel `[H,W]` maps at 64-bit.
pub fn channel_maps<T: Scalar>(x: &Tensor<T>) -> Result<Vec<Tensor<f64>>> {
    if x.rank() != 3 {
        return Err(Error::shape("channel_maps", format!("expected [H,W,C], got {:?}", x.shape())));
    }
    let (h, w, c) = (x.dim(0), x.dim(1), x.dim(2));
    let mut maps = vec![Tensor::zeros(vec![h, w]); c];
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                *maps[ch].at_mut(&[r, col]) = x.at(&[r, col, ch]).as_f64();
            }
        }
    }
    Ok(maps)
}

/// Compute the keep/drop mask of one activation-map stack. `layer_tag` and
/// `sample_tag` only label diagnostics and derive Monte Carlo streams.
pub fn compute_layer_mask(
    channels: &[Tensor<f64>],
    cfg: &NeurogameLayerConfig,
    iteration: u64,
    layer_tag: usize,
    sample_tag: u64,
    mut diag: Option<&mut Vec<NgDiagnostics>>,
) -> Result<LayerMask> {
    cfg.validate()?;
    if iteration < 1 {
        return Err(Error::IterationRange(iteration as f64));
    }
    if channels.is_empty() {
        return Err(Error::EmptyInput("compute_layer_mask"));
    }
    let iter_f = iteration as f64;
    let pairs = NeighborhoodSystem::for_block(cfg.block, cfg.neighborhood);
    let per_channel_states: Vec<Vec<ConfigurationState>> = channels
        .iter()
        .map(|m| partition(m, cfg.block))
        .collect::<Result<_>>()?;
    let emaps: Vec<EnergyMap> = if cfg.joint_partition {
        score_layers_joint(&per_channel_states, &pairs, iter_f, &cfg.energy)?
    } else {
        per_channel_states
            .iter()
            .map(|s| score_layer(s, &pairs, iter_f, &cfg.energy))
            .collect::<Result<_>>()?
    };
    let mut masks = Vec::with_capacity(channels.len());
    for (ch, (states, emap)) in per_channel_states.iter().zip(&emaps).enumerate() {
        let winning = select_winning(emap, cfg.top_p);
        let mut reports = Vec::with_capacity(winning.len());
        for &cid in &winning {
            let value_fn = SubsetPayoff::new(&states[cid], &pairs, emap, &cfg.energy);
            let (phi, method) = match cfg.shapley {
                ShapleyBudget::Exact { limit } => {
                    (shapley_exact_with_limit(&value_fn, limit)?, ShapleyMethod::Exact)
                }
                ShapleyBudget::MonteCarlo { samples } => {
                    let seed = derive_seed(
                        cfg.shapley_seed,
                        &[layer_tag as u64, sample_tag, ch as u64, cid as u64, iteration],
                    );
                    (
                        shapley_monte_carlo(&value_fn, samples, seed)?,
                        ShapleyMethod::MonteCarlo { samples, seed },
                    )
                }
            };
            let rho = match cfg.rho_override {
                Some(r) => r,
                None => threshold_rho(&phi, iter_f)?,
            };
            reports.push(ShapleyReport::new(cid, phi, rho, method));
        }
        let entries: Vec<(&ConfigurationState, &ShapleyReport)> =
            reports.iter().map(|r| (&states[r.coalition_id], r)).collect();
        let (h, w) = (channels[ch].dim(0), channels[ch].dim(1));
        let mask = extract_strong((h, w), &entries)?;
        if let Some(sink) = diag.as_deref_mut() {
            sink.push(NgDiagnostics {
                layer: layer_tag,
                channel: ch,
                iteration,
                payoffs: emap.scores.iter().map(|s| s.payoff).collect(),
                coalitions: reports
                    .iter()
                    .map(|r| CoalitionReport {
                        coalition_id: r.coalition_id,
                        shapley: r.shapley.clone(),
                        rho: r.rho,
                        kept: (0..r.keep.len()).map(|k| r.kept(k)).collect(),
                    })
                    .collect(),
                kept_count: mask.kept_count(),
            });
        }
        masks.push(mask);
    }
    Ok(LayerMask {
        channels: masks,
        iteration,
    })
}

/// Multiply a stack by a mask. With `rescale` every kept activation in a
/// channel is scaled by total/kept, inverted-dropout style.
pub fn apply_mask<T: Scalar>(x: &Tensor<T>, mask: &LayerMask, rescale: bool) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::shape("apply_mask", format!("expected [H,W,C], got {:?}", x.shape())));
    }
    let (h, w, c) = (x.dim(0), x.dim(1), x.dim(2));
    if mask.channels.len() != c || mask.channels.iter().any(|m| m.rows != h || m.cols != w) {
        return Err(Error::shape(
            "apply_mask",
            format!("mask does not cover a [{h},{w},{c}] stack"),
        ));
    }
    let scales: Vec<T> = mask
        .channels
        .iter()
        .map(|m| {
            if rescale {
                let kept = m.kept_count().max(1);
                T::from_f64((m.rows * m.cols) as f64 / kept as f64)
            } else {
                T::one()
            }
        })
        .collect();
    let mut out = Tensor::zeros(vec![h, w, c]);
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                if mask.channels[ch].keep[r * w + col] == 1 {
                    *out.at_mut(&[r, col, ch]) = x.at(&[r, col, ch]) * scales[ch];
                }
            }
        }
    }
    Ok(out)
}

/// Forward pass over one `[H,W,C]` stack: returns the gated output, the mask
/// and per-channel diagnostics. Inference recomputes the mask from the live
/// input unless `infer_identity` is set.
pub fn forward<T: Scalar>(
    x: &Tensor<T>,
    cfg: &NeurogameLayerConfig,
    iteration: u64,
    mode: Mode,
) -> Result<(Tensor<T>, LayerMask, Vec<NgDiagnostics>)> {
    if x.rank() != 3 {
        return Err(Error::shape("neurogame::forward", format!("{:?}", x.shape())));
    }
    let (h, w, c) = (x.dim(0), x.dim(1), x.dim(2));
    if cfg.pass_through || (mode == Mode::Infer && cfg.infer_identity) {
        let mask = LayerMask::all_ones(h, w, c, iteration);
        return Ok((x.clone(), mask, Vec::new()));
    }
    let maps = channel_maps(x)?;
    let mut diagnostics = Vec::new();
    let mask = compute_layer_mask(&maps, cfg, iteration, 0, 0, Some(&mut diagnostics))?;
    let out = apply_mask(x, &mask, cfg.rescale_kept)?;
    Ok((out, mask, diagnostics))
}

/// Backward pass: the selection is a constant, so the gradient is simply
/// gated by the same mask (and the same rescale factors).
pub fn backward<T: Scalar>(upstream: &Tensor<T>, mask: &LayerMask, rescale: bool) -> Result<Tensor<T>> {
    apply_mask(upstream, mask, rescale)
}

/// Fixed-length feature vector of a masked stack: channel-major, then
/// row-major; dropped neurons contribute zeros, so the length is always
/// `H*W*C`.
pub fn feature_vector<T: Scalar>(maps: &Tensor<T>) -> Result<Tensor<T>> {
    if maps.rank() != 3 {
        return Err(Error::shape("feature_vector", format!("{:?}", maps.shape())));
    }
    let (h, w, c) = (maps.dim(0), maps.dim(1), maps.dim(2));
    let mut out = Vec::with_capacity(h * w * c);
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                out.push(maps.at(&[r, col, ch]));
            }
        }
    }
    Tensor::new(vec![h * w * c], out)
}

/// Scatter a feature-vector gradient back into `[H,W,C]` layout.
pub fn feature_vector_backward<T: Scalar>(upstream: &Tensor<T>, h: usize, w: usize, c: usize) -> Result<Tensor<T>> {
    if upstream.len() != h * w * c {
        return Err(Error::shape(
            "feature_vector_backward",
            format!("{} values for [{h},{w},{c}]", upstream.len()),
        ));
    }
    let mut out = Tensor::zeros(vec![h, w, c]);
    let mut k = 0;
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                *out.at_mut(&[r, col, ch]) = upstream.data()[k];
                k += 1;
            }
        }
    }
    Ok(out)
}
