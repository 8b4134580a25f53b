//! The point-matching network: per-layer encoders, cross-attention matrix
//! pairs with inter-cloud feature exchange, the global attention product,
//! and soft/sparse correspondence maps.

pub mod encoder;

use nalgebra::Vector3;
use rand::Rng;
use thiserror::Error;

use crate::autodiff::{ParamStore, Tape, TensorError, TensorId};
use crate::geometry::{GeometryError, PointCloud};

pub use encoder::{encoder_layer, EncoderLayerParams, Neighborhood};

/// Channel counts of the reference architecture, indexed by layer;
/// `CHANNEL_TABLE[0] = 3` is the xyz input.
pub const CHANNEL_TABLE: [usize; 7] = [3, 32, 32, 64, 64, 128, 128];

#[derive(Debug, Error)]
pub enum MatchingError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("cloud of {n} points is smaller than neighborhood size k = {k}")]
    TooFewPoints { n: usize, k: usize },
    #[error("attention stack is empty")]
    EmptyStack,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

/// How the per-layer attention matrices combine into the global one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineMode {
    /// Entrywise product over all layers.
    Product,
    /// The deepest layer's attention alone; intermediate attentions still
    /// drive the feature exchange.
    LastLayer,
    /// A single attention computed at the deepest layer with the exchange
    /// disabled in earlier layers.
    NoIntermediate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapMode {
    Soft,
    Sparse,
}

#[derive(Debug, Clone)]
pub struct MatchingModelConfig {
    pub layers: usize,
    /// Channel schedule `c[0..=layers]` with `c[0] = 3`.
    pub channels: Vec<usize>,
    pub k: usize,
    pub temperature: f64,
    pub combine_mode: CombineMode,
    pub map_mode: MapMode,
}

impl MatchingModelConfig {
    /// Config with the reference channel schedule truncated to `layers`.
    pub fn with_layers(layers: usize) -> Self {
        assert!(layers >= 1 && layers < CHANNEL_TABLE.len(), "1 <= layers <= 6");
        Self {
            layers,
            channels: CHANNEL_TABLE[..=layers].to_vec(),
            k: 16,
            temperature: 0.03,
            combine_mode: CombineMode::Product,
            map_mode: MapMode::Soft,
        }
    }

    pub fn validate(&self) -> Result<(), MatchingError> {
        if self.layers < 1 {
            return Err(MatchingError::InvalidConfig("need at least one layer".into()));
        }
        if self.channels.len() != self.layers + 1 {
            return Err(MatchingError::InvalidConfig(format!(
                "channel schedule holds {} entries for {} layers",
                self.channels.len(),
                self.layers
            )));
        }
        if self.channels[0] != 3 {
            return Err(MatchingError::InvalidConfig("c(0) must be 3 (xyz input)".into()));
        }
        if self.channels[1..].iter().any(|c| c % 2 != 0 || *c == 0) {
            return Err(MatchingError::InvalidConfig(
                "channel counts must be positive and even".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(MatchingError::InvalidConfig("temperature must be positive".into()));
        }
        if self.k == 0 {
            return Err(MatchingError::InvalidConfig("k must be positive".into()));
        }
        Ok(())
    }
}

/// Dense row-major matrix of plain values, used for attention snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Value snapshot of the per-layer attention pairs and their global
/// combination.
#[derive(Debug, Clone)]
pub struct AttentionStack {
    pub layer_pq: Vec<Matrix>,
    pub layer_qp: Vec<Matrix>,
    pub global_pq: Matrix,
    pub global_qp: Matrix,
}

/// Tape-bound output of the matching network for one cloud pair.
pub struct MatchForward {
    pub layer_attn_pq: Vec<TensorId>,
    pub layer_attn_qp: Vec<TensorId>,
    pub global_pq: TensorId,
    pub global_qp: TensorId,
    /// Mapped target positions for each source point, `(n, 3)`.
    pub mapped_pq: TensorId,
    pub mapped_qp: TensorId,
    /// Row-argmax indices, present in sparse map mode.
    pub sparse_indices_pq: Option<Vec<usize>>,
    pub sparse_indices_qp: Option<Vec<usize>>,
    pub map_mode: MapMode,
}

/// Plain-value registration output of the matching network.
#[derive(Debug, Clone)]
pub struct MatchResult {
    pub attention: AttentionStack,
    pub mapped_pq: Vec<Vector3<f64>>,
    pub mapped_qp: Vec<Vector3<f64>>,
    pub map_mode: MapMode,
    pub sparse_indices_pq: Option<Vec<usize>>,
    pub sparse_indices_qp: Option<Vec<usize>>,
}

// ---- attention operations ----------------------------------------------

/// Cosine similarities between all feature pairs: `(n, d) x (m, d) -> (n, m)`
/// with entries in [-1, 1].
pub fn cosine_similarity_matrix(
    tape: &mut Tape,
    e_p: TensorId,
    e_q: TensorId,
) -> Result<TensorId, MatchingError> {
    let np = tape.l2_normalize_rows(e_p, 1e-12)?;
    let nq = tape.l2_normalize_rows(e_q, 1e-12)?;
    let nq_t = tape.transpose(nq)?;
    Ok(tape.matmul(np, nq_t)?)
}

/// The cross-attention pair from one similarity matrix: rows normalized for
/// the P-to-Q direction, columns for Q-to-P.
pub fn cross_attention(
    tape: &mut Tape,
    similarity: TensorId,
    temperature: f64,
) -> Result<(TensorId, TensorId), MatchingError> {
    let a_pq = tape.softmax_rows(similarity, temperature)?;
    let a_qp = tape.softmax_cols(similarity, temperature)?;
    Ok((a_pq, a_qp))
}

/// Transfers features across clouds: `E_P = [e_P, A_PQ e_Q]`,
/// `E_Q = [e_Q, A_QP^T e_P]`, doubling the channel count.
pub fn exchange_features(
    tape: &mut Tape,
    e_p: TensorId,
    e_q: TensorId,
    a_pq: TensorId,
    a_qp: TensorId,
) -> Result<(TensorId, TensorId), MatchingError> {
    let from_q = tape.matmul(a_pq, e_q)?;
    let e_p_out = tape.concat_cols(e_p, from_q)?;
    let a_qp_t = tape.transpose(a_qp)?;
    let from_p = tape.matmul(a_qp_t, e_p)?;
    let e_q_out = tape.concat_cols(e_q, from_p)?;
    Ok((e_p_out, e_q_out))
}

/// Entrywise product of the per-layer attention matrices.
pub fn attention_product(tape: &mut Tape, stack: &[TensorId]) -> Result<TensorId, MatchingError> {
    let (&first, rest) = stack.split_first().ok_or(MatchingError::EmptyStack)?;
    let mut acc = first;
    for &next in rest {
        acc = tape.mul(acc, next)?;
    }
    Ok(acc)
}

/// Soft correspondence: each source point maps to the row-renormalized
/// barycenter of the target cloud, `(n, 3)`, differentiable.
pub fn soft_map(
    tape: &mut Tape,
    a_star: TensorId,
    target: &PointCloud,
) -> Result<TensorId, MatchingError> {
    if tape.shape(a_star)[1] != target.len() {
        return Err(MatchingError::InvalidConfig(format!(
            "attention has {} columns for a target of {} points",
            tape.shape(a_star)[1],
            target.len()
        )));
    }
    let stochastic = tape.div_row_sums(a_star)?;
    let coords = tape.constant(&[target.len(), 3], target.flat_coords())?;
    Ok(tape.matmul(stochastic, coords)?)
}

/// Sparse correspondence: each row maps to the target point at the row
/// argmax, ties broken by lowest index. Not differentiable; returns plain
/// values.
pub fn sparse_map(
    a_star: &[f64],
    rows: usize,
    cols: usize,
    target: &PointCloud,
) -> (Vec<Vector3<f64>>, Vec<usize>) {
    assert_eq!(cols, target.len());
    assert_eq!(a_star.len(), rows * cols);
    let mut points = Vec::with_capacity(rows);
    let mut indices = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = &a_star[i * cols..(i + 1) * cols];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        indices.push(best);
        points.push(target.point(best));
    }
    (points, indices)
}

// ---- the model -----------------------------------------------------------

/// Trainable state of the matching network; parameters live in the shared
/// [`ParamStore`].
#[derive(Debug, Clone)]
pub struct MatchingModel {
    pub config: MatchingModelConfig,
    pub layers: Vec<EncoderLayerParams>,
}

impl MatchingModel {
    pub fn init(
        config: MatchingModelConfig,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self, MatchingError> {
        config.validate()?;
        let layers = (0..config.layers)
            .map(|l| {
                EncoderLayerParams::init(
                    store,
                    &format!("match.l{l}"),
                    config.channels[l],
                    config.channels[l + 1] / 2,
                    config.k,
                    rng,
                )
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// Full forward pass: L rounds of encode, attend, exchange; the global
    /// attention pair per the combine mode; and the configured maps.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        p: &PointCloud,
        q: &PointCloud,
    ) -> Result<MatchForward, MatchingError> {
        let k = self.config.k;
        if p.len() < k {
            return Err(MatchingError::TooFewPoints { n: p.len(), k });
        }
        if q.len() < k {
            return Err(MatchingError::TooFewPoints { n: q.len(), k });
        }
        let hood_p = Neighborhood::build(tape, p, k)?;
        let hood_q = Neighborhood::build(tape, q, k)?;
        let mut f_p = tape.constant(&[p.len(), 3], p.flat_coords())?;
        let mut f_q = tape.constant(&[q.len(), 3], q.flat_coords())?;

        let mut attn_pq = Vec::with_capacity(self.config.layers);
        let mut attn_qp = Vec::with_capacity(self.config.layers);
        for (l, layer) in self.layers.iter().enumerate() {
            let e_p = encoder_layer(tape, store, f_p, &hood_p, layer)?;
            let e_q = encoder_layer(tape, store, f_q, &hood_q, layer)?;
            let last = l + 1 == self.config.layers;
            let attend = match self.config.combine_mode {
                CombineMode::NoIntermediate => last,
                _ => true,
            };
            if attend {
                let sim = cosine_similarity_matrix(tape, e_p, e_q)?;
                let (a_pq, a_qp) = cross_attention(tape, sim, self.config.temperature)?;
                attn_pq.push(a_pq);
                attn_qp.push(a_qp);
                if !last {
                    let (np, nq) = exchange_features(tape, e_p, e_q, a_pq, a_qp)?;
                    f_p = np;
                    f_q = nq;
                }
            } else {
                // Exchange disabled: self-concatenation keeps the channel
                // schedule (and parameter shapes) identical across modes.
                f_p = tape.concat_cols(e_p, e_p)?;
                f_q = tape.concat_cols(e_q, e_q)?;
            }
        }

        let (global_pq, global_qp) = match self.config.combine_mode {
            CombineMode::Product => {
                (attention_product(tape, &attn_pq)?, attention_product(tape, &attn_qp)?)
            }
            CombineMode::LastLayer | CombineMode::NoIntermediate => (
                *attn_pq.last().ok_or(MatchingError::EmptyStack)?,
                *attn_qp.last().ok_or(MatchingError::EmptyStack)?,
            ),
        };

        let (mapped_pq, mapped_qp, idx_pq, idx_qp) = match self.config.map_mode {
            MapMode::Soft => {
                let m_pq = soft_map(tape, global_pq, q)?;
                let g_qp_t = tape.transpose(global_qp)?;
                let m_qp = soft_map(tape, g_qp_t, p)?;
                (m_pq, m_qp, None, None)
            }
            MapMode::Sparse => {
                let (n, m) = (p.len(), q.len());
                let (pts_pq, idx_pq) = sparse_map(tape.value(global_pq), n, m, q);
                let mut transposed = vec![0.0; n * m];
                let gv = tape.value(global_qp);
                for i in 0..n {
                    for j in 0..m {
                        transposed[j * n + i] = gv[i * m + j];
                    }
                }
                let (pts_qp, idx_qp) = sparse_map(&transposed, m, n, p);
                let flat = |pts: &[Vector3<f64>]| {
                    pts.iter().flat_map(|v| [v.x, v.y, v.z]).collect::<Vec<f64>>()
                };
                let m_pq = tape.constant(&[n, 3], flat(&pts_pq))?;
                let m_qp = tape.constant(&[m, 3], flat(&pts_qp))?;
                (m_pq, m_qp, Some(idx_pq), Some(idx_qp))
            }
        };

        Ok(MatchForward {
            layer_attn_pq: attn_pq,
            layer_attn_qp: attn_qp,
            global_pq,
            global_qp,
            mapped_pq,
            mapped_qp,
            sparse_indices_pq: idx_pq,
            sparse_indices_qp: idx_qp,
            map_mode: self.config.map_mode,
        })
    }

    /// Forward pass on a private tape, extracting plain values.
    pub fn match_clouds(
        &self,
        store: &ParamStore,
        p: &PointCloud,
        q: &PointCloud,
    ) -> Result<MatchResult, MatchingError> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, store, p, q)?;
        Ok(extract_result(&tape, &fwd))
    }
}

/// Copies the attention matrices and maps out of the tape.
pub fn extract_result(tape: &Tape, fwd: &MatchForward) -> MatchResult {
    let to_matrix = |t: TensorId| {
        let shape = tape.shape(t);
        Matrix { rows: shape[0], cols: shape[1], data: tape.value(t).to_vec() }
    };
    let to_points = |t: TensorId| {
        tape.value(t).chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect::<Vec<_>>()
    };
    MatchResult {
        attention: AttentionStack {
            layer_pq: fwd.layer_attn_pq.iter().map(|&t| to_matrix(t)).collect(),
            layer_qp: fwd.layer_attn_qp.iter().map(|&t| to_matrix(t)).collect(),
            global_pq: to_matrix(fwd.global_pq),
            global_qp: to_matrix(fwd.global_qp),
        },
        mapped_pq: to_points(fwd.mapped_pq),
        mapped_qp: to_points(fwd.mapped_qp),
        map_mode: fwd.map_mode,
        sparse_indices_pq: fwd.sparse_indices_pq.clone(),
        sparse_indices_qp: fwd.sparse_indices_qp.clone(),
    }
}
