//! Point-convolution building blocks: a neighborhood MLP aggregator in place
//! of a learned-kernel point convolution, arranged into residual blocks of
//! two sub-layers with instance normalization and ReLU.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, ReduceMode, Tape, TensorId};
use crate::geometry::IndexMatrix;

use super::MatchingError;

pub(crate) const INSTANCE_NORM_EPS: f64 = 1e-5;

/// One aggregator sub-layer: gather k neighbors, run relative coordinates
/// concatenated with neighbor features through a shared two-layer MLP, mean
/// over the neighborhood, then instance norm and ReLU unless `raw` output
/// was requested at construction.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    /// Instance-norm affine parameters; absent for the raw final projection
    /// of the confidence head.
    pub norm: Option<(ParamId, ParamId)>,
    pub in_channels: usize,
    pub hidden: usize,
    pub out_channels: usize,
}

impl ConvParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        hidden: usize,
        out_channels: usize,
        normed: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w1 = store.register(
            &format!("{prefix}.w1"),
            &[3 + in_channels, hidden],
            he_uniform(rng, 3 + in_channels, (3 + in_channels) * hidden),
        );
        let b1 = store.register(&format!("{prefix}.b1"), &[hidden], vec![0.0; hidden]);
        let w2 = store.register(
            &format!("{prefix}.w2"),
            &[hidden, out_channels],
            he_uniform(rng, hidden, hidden * out_channels),
        );
        let b2 = store.register(&format!("{prefix}.b2"), &[out_channels], vec![0.0; out_channels]);
        let norm = normed.then(|| {
            (
                store.register(&format!("{prefix}.gamma"), &[out_channels], vec![1.0; out_channels]),
                store.register(&format!("{prefix}.beta"), &[out_channels], vec![0.0; out_channels]),
            )
        });
        Self { w1, b1, w2, b2, norm, in_channels, hidden, out_channels }
    }

    /// Zeroes the output projection so the sub-layer starts as a constant
    /// map; used by the confidence head so untrained scores sit at 0.5.
    pub fn zero_output(self, store: &mut ParamStore) -> Self {
        let n = store.entry(self.w2).values.len();
        store.set_values(self.w2, vec![0.0; n]);
        let n = store.entry(self.b2).values.len();
        store.set_values(self.b2, vec![0.0; n]);
        self
    }
}

pub(crate) fn he_uniform(rng: &mut impl Rng, fan_in: usize, count: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..count).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Neighborhood structure of one cloud: the k-NN index matrix and the
/// relative coordinates of each neighbor, flattened to `(n k, 3)`.
pub struct Neighborhood {
    pub indices: IndexMatrix,
    pub rel_coords: TensorId,
    pub n: usize,
    pub k: usize,
}

impl Neighborhood {
    pub fn build(
        tape: &mut Tape,
        cloud: &crate::geometry::PointCloud,
        k: usize,
    ) -> Result<Self, MatchingError> {
        let indices = crate::geometry::knn(cloud, cloud, k)?;
        let n = cloud.len();
        let mut rel = Vec::with_capacity(n * k * 3);
        for i in 0..n {
            let center = cloud.point(i);
            for &j in indices.row(i) {
                let d = cloud.point(j) - center;
                rel.extend_from_slice(&[d.x, d.y, d.z]);
            }
        }
        let rel_coords = tape.constant(&[n * k, 3], rel)?;
        Ok(Self { indices, rel_coords, n, k })
    }
}

/// Applies one aggregator sub-layer to `(n, c_in)` features.
pub fn conv_sublayer(
    tape: &mut Tape,
    store: &ParamStore,
    features: TensorId,
    hood: &Neighborhood,
    params: &ConvParams,
) -> Result<TensorId, MatchingError> {
    let (n, k) = (hood.n, hood.k);
    let gathered = tape.gather_rows(features, hood.indices.data(), n, k)?;
    let flat = tape.reshape(gathered, &[n * k, params.in_channels])?;
    let joined = tape.concat_cols(hood.rel_coords, flat)?;

    let w1 = tape.param(store, params.w1)?;
    let b1 = tape.param(store, params.b1)?;
    let h = tape.matmul(joined, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h)?;
    let w2 = tape.param(store, params.w2)?;
    let b2 = tape.param(store, params.b2)?;
    let z = tape.matmul(h, w2)?;
    let z = tape.add_bias(z, b2)?;

    let stacked = tape.reshape(z, &[n, k, params.out_channels])?;
    let agg = tape.reduce_neighborhood(stacked, ReduceMode::Mean)?;

    match params.norm {
        Some((gamma, beta)) => {
            let g = tape.param(store, gamma)?;
            let b = tape.param(store, beta)?;
            let normed = tape.instance_norm_rows(agg, g, b, INSTANCE_NORM_EPS)?;
            Ok(tape.relu(normed)?)
        }
        None => Ok(agg),
    }
}

/// Residual block: two aggregator sub-layers plus a shortcut, linearly
/// projected when the channel counts differ.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub convs: [ConvParams; 2],
    pub proj: Option<(ParamId, ParamId)>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl BlockParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let convs = [
            ConvParams::init(store, &format!("{prefix}.c0"), in_channels, width, width, true, rng),
            ConvParams::init(store, &format!("{prefix}.c1"), width, width, width, true, rng),
        ];
        let proj = (in_channels != width).then(|| {
            (
                store.register(
                    &format!("{prefix}.proj.w"),
                    &[in_channels, width],
                    he_uniform(rng, in_channels, in_channels * width),
                ),
                store.register(&format!("{prefix}.proj.b"), &[width], vec![0.0; width]),
            )
        });
        Self { convs, proj, in_channels, out_channels: width }
    }
}

pub fn residual_block(
    tape: &mut Tape,
    store: &ParamStore,
    features: TensorId,
    hood: &Neighborhood,
    params: &BlockParams,
) -> Result<TensorId, MatchingError> {
    let mid = conv_sublayer(tape, store, features, hood, &params.convs[0])?;
    let out = conv_sublayer(tape, store, mid, hood, &params.convs[1])?;
    let shortcut = match params.proj {
        Some((w, b)) => {
            let w = tape.param(store, w)?;
            let b = tape.param(store, b)?;
            let p = tape.matmul(features, w)?;
            tape.add_bias(p, b)?
        }
        None => features,
    };
    Ok(tape.add(out, shortcut)?)
}

/// Per-layer encoder of the matching network: three residual blocks mapping
/// `(n, c_in)` features to `(n, c_out/2)`, growing the receptive field by one
/// neighborhood hop per sub-layer.
#[derive(Debug, Clone)]
pub struct EncoderLayerParams {
    pub blocks: Vec<BlockParams>,
    pub in_channels: usize,
    pub width: usize,
    pub k: usize,
}

impl EncoderLayerParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        width: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let blocks = (0..3)
            .map(|b| {
                let c_in = if b == 0 { in_channels } else { width };
                BlockParams::init(store, &format!("{prefix}.b{b}"), c_in, width, rng)
            })
            .collect();
        Self { blocks, in_channels, width, k }
    }
}

/// Runs one encoder layer over a cloud's features.
pub fn encoder_layer(
    tape: &mut Tape,
    store: &ParamStore,
    features: TensorId,
    hood: &Neighborhood,
    params: &EncoderLayerParams,
) -> Result<TensorId, MatchingError> {
    if hood.k > hood.n {
        return Err(MatchingError::TooFewPoints { n: hood.n, k: hood.k });
    }
    let mut x = features;
    for block in &params.blocks {
        x = residual_block(tape, store, x, hood, block)?;
    }
    Ok(x)
}
