//! Tiling of an activation map into simple coalitions and the neighborhood
//! systems their energy terms run over.
//!
//! A coalition is one rectangular tile of the map in row-major order; maps
//! whose sides are not multiples of the block are truncated rather than
//! padded so no artificial activations enter the energy sums.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Activations are floored here before any energy evaluation; the energy
/// divides by activation values, so exact zeros (ubiquitous after relu) must
/// be lifted to a small positive floor.
pub const ACTIVATION_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridCoord {
    pub row: usize,
    pub col: usize,
}

/// The ordered activations of one coalition's neurons plus their positions in
/// the parent map.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigurationState {
    pub coalition_id: usize,
    pub coords: Vec<GridCoord>,
    pub activations: Vec<f64>,
    pub block_shape: (usize, usize),
}

impl ConfigurationState {
    pub fn new(
        coalition_id: usize,
        coords: Vec<GridCoord>,
        activations: Vec<f64>,
        block_shape: (usize, usize),
    ) -> Result<Self> {
        let (rows, cols) = block_shape;
        if coords.len() != activations.len() || coords.len() != rows * cols {
            return Err(Error::invalid(
                "ConfigurationState::new",
                format!(
                    "{} coords, {} activations for a {rows}x{cols} block",
                    coords.len(),
                    activations.len()
                ),
            ));
        }
        let origin = coords[0];
        for (k, c) in coords.iter().enumerate() {
            let want = GridCoord {
                row: origin.row + k / cols,
                col: origin.col + k % cols,
            };
            if *c != want {
                return Err(Error::invalid(
                    "ConfigurationState::new",
                    "coords must form a contiguous row-major block".to_string(),
                ));
            }
        }
        let activations = activations.into_iter().map(|a| a.max(ACTIVATION_FLOOR)).collect();
        Ok(ConfigurationState {
            coalition_id,
            coords,
            activations,
            block_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.activations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.activations.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborhoodKind {
    /// All eight surrounding sites (diagonals included).
    Full8,
    /// The four axis-aligned sites.
    Plus4,
}

/// Unordered neighbor pairs inside one block, stored as member indices into
/// the block's row-major order. Each pair appears exactly once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborhoodSystem {
    pub kind: NeighborhoodKind,
    pub block_shape: (usize, usize),
    pub pairs: Vec<(usize, usize)>,
}

impl NeighborhoodSystem {
    /// Enumerate the in-block neighbor pairs for a block of the given shape.
    pub fn for_block(block_shape: (usize, usize), kind: NeighborhoodKind) -> Self {
        let (rows, cols) = block_shape;
        let mut pairs = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let here = r * cols + c;
                // Emit only "forward" neighbors so each unordered pair
                // appears once.
                if c + 1 < cols {
                    pairs.push((here, r * cols + c + 1));
                }
                if r + 1 < rows {
                    pairs.push((here, (r + 1) * cols + c));
                }
                if kind == NeighborhoodKind::Full8 && r + 1 < rows {
                    if c + 1 < cols {
                        pairs.push((here, (r + 1) * cols + c + 1));
                    }
                    if c > 0 {
                        pairs.push((here, (r + 1) * cols + c - 1));
                    }
                }
            }
        }
        NeighborhoodSystem {
            kind,
            block_shape,
            pairs,
        }
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }
}

/// In-block neighbor pairs of a configuration state.
pub fn neighbor_pairs(state: &ConfigurationState, kind: NeighborhoodKind) -> NeighborhoodSystem {
    NeighborhoodSystem::for_block(state.block_shape, kind)
}

/// Tile a 2-D map into non-overlapping row-major blocks. Trailing rows and
/// columns that do not fill a block are dropped.
pub fn partition(map: &Tensor<f64>, block: (usize, usize)) -> Result<Vec<ConfigurationState>> {
    if map.rank() != 2 {
        return Err(Error::shape("partition", format!("expected [H,W], got {:?}", map.shape())));
    }
    let (h, w) = (map.dim(0), map.dim(1));
    let (br, bc) = block;
    if br == 0 || bc == 0 {
        return Err(Error::invalid("partition", "block dimensions must be >= 1"));
    }
    if br > h || bc > w {
        return Err(Error::BlockTooLarge {
            block_rows: br,
            block_cols: bc,
            rows: h,
            cols: w,
        });
    }
    let tiles_down = h / br;
    let tiles_across = w / bc;
    let mut states = Vec::with_capacity(tiles_down * tiles_across);
    for tr in 0..tiles_down {
        for tc in 0..tiles_across {
            let id = tr * tiles_across + tc;
            let mut coords = Vec::with_capacity(br * bc);
            let mut acts = Vec::with_capacity(br * bc);
            for r in 0..br {
                for c in 0..bc {
                    let coord = GridCoord {
                        row: tr * br + r,
                        col: tc * bc + c,
                    };
                    coords.push(coord);
                    acts.push(map.at(&[coord.row, coord.col]));
                }
            }
            states.push(ConfigurationState::new(id, coords, acts, block)?);
        }
    }
    Ok(states)
}
