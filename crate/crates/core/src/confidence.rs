//! The confidence estimator: a point convnet scoring each matched pair in
//! (0, 1), and the hard-threshold filter applied before transformation
//! estimation.

use rand::Rng;

use crate::autodiff::{ParamStore, Tape, TensorId};
use crate::geometry::PointCloud;
use crate::matching::encoder::{conv_sublayer, residual_block, BlockParams, ConvParams, Neighborhood};
use crate::matching::MatchingError;

#[derive(Debug, Clone)]
pub struct ConfidenceConfig {
    /// Channel width shared by all residual blocks.
    pub width: usize,
    /// Neighborhood size on the source cloud.
    pub k: usize,
}

impl Default for ConfidenceConfig {
    fn default() -> Self {
        Self { width: 16, k: 16 }
    }
}

/// Nine residual blocks over the 6-channel pair features, then a raw
/// aggregator projecting to one channel and a sigmoid. Neighborhoods come
/// from the source cloud's coordinates, so each score sees the local
/// consistency of nearby pairs.
#[derive(Debug, Clone)]
pub struct ConfidenceModel {
    pub config: ConfidenceConfig,
    blocks: Vec<BlockParams>,
    head: ConvParams,
}

impl ConfidenceModel {
    pub const BLOCK_COUNT: usize = 9;

    pub fn init(config: ConfidenceConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let blocks = (0..Self::BLOCK_COUNT)
            .map(|b| {
                let c_in = if b == 0 { 6 } else { config.width };
                BlockParams::init(store, &format!("conf.b{b}"), c_in, config.width, rng)
            })
            .collect();
        // Zero output projection: untrained scores sit exactly at sigmoid(0).
        let head = ConvParams::init(store, "conf.head", config.width, config.width, 1, false, rng)
            .zero_output(store);
        Self { config, blocks, head }
    }

    /// Scores each pair row; output is a length-n tensor strictly in (0, 1).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        source: &PointCloud,
        pairs: TensorId,
    ) -> Result<TensorId, MatchingError> {
        let n = source.len();
        if n < self.config.k {
            return Err(MatchingError::TooFewPoints { n, k: self.config.k });
        }
        if tape.shape(pairs) != [n, 6] {
            return Err(MatchingError::InvalidConfig(format!(
                "pair features have shape {:?}, expected [{n}, 6]",
                tape.shape(pairs)
            )));
        }
        let hood = Neighborhood::build(tape, source, self.config.k)?;
        let mut x = pairs;
        for block in &self.blocks {
            x = residual_block(tape, store, x, &hood, block)?;
        }
        let logits = conv_sublayer(tape, store, x, &hood, &self.head)?;
        let scores = tape.sigmoid(logits)?;
        Ok(tape.reshape(scores, &[n])?)
    }
}

/// Concatenates each source point with its mapped target: row i is
/// `[p_i, mapped_i]`, shape `(n, 6)`.
pub fn pair_features(
    tape: &mut Tape,
    source: &PointCloud,
    mapped: TensorId,
) -> Result<TensorId, MatchingError> {
    if tape.shape(mapped) != [source.len(), 3] {
        return Err(MatchingError::InvalidConfig(format!(
            "mapped points have shape {:?} for {} source points",
            tape.shape(mapped),
            source.len()
        )));
    }
    let coords = tape.constant(&[source.len(), 3], source.flat_coords())?;
    Ok(tape.concat_cols(coords, mapped)?)
}

/// Zeroes scores below `tau`, leaving the rest untouched; `tau = 0` is the
/// identity.
pub fn hard_threshold(scores: &[f64], tau: f64) -> Vec<f64> {
    scores.iter().map(|&w| if w >= tau { w } else { 0.0 }).collect()
}
