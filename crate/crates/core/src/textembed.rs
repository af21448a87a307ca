//! Token embedding table, pooling of token vectors into node features, and
//! the backward passes (gradient and relevance) from node features to tokens.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphdata::PropagationEvent;
use crate::numkernel::{Epsilon, LinearGrad, Matrix, RelevanceRule, Tape, ValueId};
use crate::scalar::Scalar;

/// Trainable `vocab_size × embed_dim` lookup table.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T = f64> {
    weights: Matrix<T>,
}

impl<T: Scalar> EmbeddingTable<T> {
    /// Uniform init in `±0.5/√embed_dim`.
    pub fn random(vocab_size: usize, embed_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 0.5 / (embed_dim as f64).sqrt();
        Self {
            weights: Matrix::from_fn(vocab_size, embed_dim, |_, _| {
                T::of(rng.gen_range(-bound..bound))
            }),
        }
    }

    pub fn from_matrix(weights: Matrix<T>) -> Self {
        Self { weights }
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn vector(&self, token: usize) -> &[T] {
        self.weights.row(token)
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.weights
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix<T> {
        &mut self.weights
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingKind {
    Mean,
    Max,
    Mlp,
}

impl fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingKind::Mean => "mean",
            PoolingKind::Max => "max",
            PoolingKind::Mlp => "mlp",
        })
    }
}

impl FromStr for PoolingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            "mlp" => Ok(Self::Mlp),
            other => Err(Error::Config(format!(
                "unknown pooling {other:?} (expected mean|max|mlp)"
            ))),
        }
    }
}

/// Pooling function with its parameters. The MLP variant applies one
/// `D → D` linear + ReLU layer per token and then takes the mean.
#[derive(Clone, Debug, PartialEq)]
pub enum Pooling<T = f64> {
    Mean,
    Max,
    Mlp {
        weights: Arc<Matrix<T>>,
        bias: Option<Arc<Matrix<T>>>,
    },
}

impl<T: Scalar> Pooling<T> {
    pub fn kind(&self) -> PoolingKind {
        match self {
            Pooling::Mean => PoolingKind::Mean,
            Pooling::Max => PoolingKind::Max,
            Pooling::Mlp { .. } => PoolingKind::Mlp,
        }
    }

    pub fn new(kind: PoolingKind, dim: usize, with_bias: bool, rng: &mut impl Rng) -> Self {
        match kind {
            PoolingKind::Mean => Pooling::Mean,
            PoolingKind::Max => Pooling::Max,
            PoolingKind::Mlp => {
                let bound = (6.0 / (2 * dim) as f64).sqrt();
                Pooling::Mlp {
                    weights: Arc::new(Matrix::from_fn(dim, dim, |_, _| {
                        T::of(rng.gen_range(-bound..bound))
                    })),
                    bias: with_bias.then(|| Arc::new(Matrix::zeros(1, dim))),
                }
            }
        }
    }
}

/// How relevance crosses the pooling step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackwardMode {
    /// Token shares sum to the node relevance (mean: `x_t/|T_v|` numerator;
    /// max: winner takes `r_v` unchanged).
    #[default]
    Conserving,
    /// Mean uses `x_t/(ε + x_v)·r_v` without the
    /// `1/|T_v|` factor; max gives the winner `x_t·r_v`.
    Unnormalized,
}

impl FromStr for BackwardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conserving" => Ok(Self::Conserving),
            "unnormalized" => Ok(Self::Unnormalized),
            other => Err(Error::Config(format!(
                "unknown backward mode {other:?} (expected conserving|unnormalized)"
            ))),
        }
    }
}

/// Token vectors and pooled node features of one event.
///
/// Tokens of all nodes are stacked row-wise; `segments[v]` is node `v`'s
/// row range and `positions[v]` the original in-post positions of those
/// rows (dropped tokens are absent).
#[derive(Clone, Debug)]
pub struct EmbeddedEvent<T = f64> {
    pub node_features: Matrix<T>,
    pub tokens: Matrix<T>,
    pub token_ids: Vec<usize>,
    pub segments: Vec<Range<usize>>,
    pub positions: Vec<Vec<usize>>,
    kind: PoolingKind,
    /// Rows actually pooled: raw tokens for mean/max, MLP outputs for mlp.
    pooled_rows: Matrix<T>,
    mlp: Option<MlpTrace<T>>,
    /// Max pooling winner row (absolute) per node and dim.
    winners: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
struct MlpTrace<T> {
    tape: Tape<T>,
    input: ValueId,
    output: ValueId,
}

const MLP_SLOT: usize = 0;

pub fn embed_event<T: Scalar>(
    event: &PropagationEvent,
    table: &EmbeddingTable<T>,
    pooling: &Pooling<T>,
) -> Result<EmbeddedEvent<T>> {
    embed_event_masked(event, table, pooling, |_, _| true)
}

/// Embeds `event` keeping only tokens for which `keep(node, position)`
/// holds. A node left without tokens gets the zero feature vector.
pub fn embed_event_masked<T: Scalar>(
    event: &PropagationEvent,
    table: &EmbeddingTable<T>,
    pooling: &Pooling<T>,
    keep: impl Fn(usize, usize) -> bool,
) -> Result<EmbeddedEvent<T>> {
    let dim = table.dim();
    let n = event.num_nodes();
    let mut data = Vec::new();
    let mut token_ids = Vec::new();
    let mut segments = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    for v in 0..n {
        let start = token_ids.len();
        let mut pos = Vec::new();
        for (t, &tok) in event.tokens(v).iter().enumerate() {
            if tok >= table.vocab_size() {
                return Err(Error::Input(format!(
                    "event {}: token {tok} at node {v} is outside the vocabulary of {}",
                    event.event_id(),
                    table.vocab_size()
                )));
            }
            if keep(v, t) {
                data.extend_from_slice(table.vector(tok));
                token_ids.push(tok);
                pos.push(t);
            }
        }
        segments.push(start..token_ids.len());
        positions.push(pos);
    }
    let tokens = Matrix::new(token_ids.len(), dim, data)?;

    let (pooled_rows, mlp) = match pooling {
        Pooling::Mean | Pooling::Max => (tokens.clone(), None),
        Pooling::Mlp { weights, bias } => {
            let mut tape = Tape::new();
            let input = tape.input(tokens.clone())?;
            let lin = tape.linear(input, weights, bias.as_ref(), MLP_SLOT)?;
            let output = tape.relu(lin)?;
            (
                tape.value(output).clone(),
                Some(MlpTrace {
                    tape,
                    input,
                    output,
                }),
            )
        }
    };

    let out_dim = pooled_rows.cols();
    let mut node_features = Matrix::zeros(n, out_dim);
    let mut winners = Vec::new();
    match pooling.kind() {
        PoolingKind::Mean | PoolingKind::Mlp => {
            for (v, seg) in segments.iter().enumerate() {
                if seg.is_empty() {
                    continue;
                }
                let count = T::of(seg.len() as f64);
                for d in 0..out_dim {
                    let s: T = seg.clone().map(|r| pooled_rows.get(r, d)).sum();
                    node_features.set(v, d, s / count);
                }
            }
        }
        PoolingKind::Max => {
            for (v, seg) in segments.iter().enumerate() {
                let mut node_winners = Vec::with_capacity(out_dim);
                if !seg.is_empty() {
                    for d in 0..out_dim {
                        let best = max_row(&pooled_rows, seg.clone(), d);
                        node_features.set(v, d, pooled_rows.get(best, d));
                        node_winners.push(best);
                    }
                }
                winners.push(node_winners);
            }
        }
    }

    Ok(EmbeddedEvent {
        node_features,
        tokens,
        token_ids,
        segments,
        positions,
        kind: pooling.kind(),
        pooled_rows,
        mlp,
        winners,
    })
}

/// First row attaining the maximum in column `d`; ties go to the lowest row.
fn max_row<T: Scalar>(m: &Matrix<T>, rows: Range<usize>, d: usize) -> usize {
    let mut best = rows.start;
    for r in rows {
        if m.get(r, d) > m.get(best, d) {
            best = r;
        }
    }
    best
}

/// Relevance of each token of one node, per dimension, given the node's
/// relevance `node_relevance` (length `D`) and its token vectors
/// (`|T_v| × D`). Only the mean and max kinds are handled here; MLP pooling
/// goes through [`EmbeddedEvent::lrp_backward`].
pub fn lrp_pool_backward<T: Scalar>(
    node_relevance: &[T],
    token_vectors: &Matrix<T>,
    kind: PoolingKind,
    eps: Epsilon<T>,
    mode: BackwardMode,
) -> Result<Matrix<T>> {
    let dim = token_vectors.cols();
    if node_relevance.len() != dim {
        return Err(Error::Dimension {
            op: "lrp_pool_backward",
            left: (1, dim),
            right: (1, node_relevance.len()),
        });
    }
    let count = token_vectors.rows();
    let mut out = Matrix::zeros(count, dim);
    if count == 0 {
        return Ok(out);
    }
    match kind {
        PoolingKind::Mean => {
            let n = T::of(count as f64);
            for d in 0..dim {
                let mean = (0..count).map(|t| token_vectors.get(t, d)).sum::<T>() / n;
                let denom = eps.stabilize(mean);
                for t in 0..count {
                    let x = token_vectors.get(t, d);
                    let share = match mode {
                        BackwardMode::Conserving => x / n,
                        BackwardMode::Unnormalized => x,
                    };
                    out.set(t, d, share / denom * node_relevance[d]);
                }
            }
        }
        PoolingKind::Max => {
            for d in 0..dim {
                let w = max_row(token_vectors, 0..count, d);
                let r = match mode {
                    BackwardMode::Conserving => node_relevance[d],
                    BackwardMode::Unnormalized => token_vectors.get(w, d) * node_relevance[d],
                };
                out.set(w, d, r);
            }
        }
        PoolingKind::Mlp => return Err(Error::Usage(
            "MLP pooling relevance requires the per-token trace; use EmbeddedEvent::lrp_backward"
                .into(),
        )),
    }
    Ok(out)
}

/// `z_t = Σ_d r_{t,d}` for each row.
pub fn token_attribution<T: Scalar>(per_dim: &Matrix<T>) -> Vec<T> {
    per_dim.row_sums()
}

/// Per-class token scores for one event, laid out like its posts.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenRelevance<T = f64> {
    pub class: usize,
    /// `scores[v][t]` for node `v`, position `t`.
    pub scores: Vec<Vec<T>>,
    /// Keep bits, defined after contrastive masking.
    pub mask: Option<Vec<Vec<bool>>>,
}

impl<T: Scalar> TokenRelevance<T> {
    pub fn total(&self) -> T {
        self.scores.iter().flatten().copied().sum()
    }
}

impl<T: Scalar> EmbeddedEvent<T> {
    pub fn kind(&self) -> PoolingKind {
        self.kind
    }

    pub fn num_nodes(&self) -> usize {
        self.segments.len()
    }

    /// Token vectors of node `v` as they enter the pooling step.
    pub fn pooled_inputs(&self, v: usize) -> Matrix<T> {
        let seg = self.segments[v].clone();
        Matrix::from_fn(seg.len(), self.pooled_rows.cols(), |r, d| {
            self.pooled_rows.get(seg.start + r, d)
        })
    }

    /// Per-token per-dim relevance over the raw token embeddings, stacked
    /// like `tokens`, for node relevance `node_relevance` (`|V| × D`).
    pub fn lrp_backward(
        &self,
        node_relevance: &Matrix<T>,
        eps: Epsilon<T>,
        mode: BackwardMode,
    ) -> Result<Matrix<T>> {
        if node_relevance.shape() != self.node_features.shape() {
            return Err(Error::Dimension {
                op: "EmbeddedEvent::lrp_backward",
                left: self.node_features.shape(),
                right: node_relevance.shape(),
            });
        }
        let pool_kind = match self.kind {
            PoolingKind::Mlp => PoolingKind::Mean,
            k => k,
        };
        let mut pooled_rel = Matrix::zeros(self.pooled_rows.rows(), self.pooled_rows.cols());
        for (v, seg) in self.segments.iter().enumerate() {
            let r = lrp_pool_backward(
                node_relevance.row(v),
                &self.pooled_inputs(v),
                pool_kind,
                eps,
                mode,
            )?;
            for (i, row) in seg.clone().enumerate() {
                pooled_rel.row_mut(row).copy_from_slice(r.row(i));
            }
        }
        match &self.mlp {
            None => Ok(pooled_rel),
            Some(trace) => {
                let rel = trace.tape.backward_relevance(
                    trace.output,
                    pooled_rel,
                    RelevanceRule::Epsilon(eps),
                )?;
                Ok(rel[trace.input.index()]
                    .clone()
                    .unwrap_or_else(|| Matrix::zeros(self.tokens.rows(), self.tokens.cols())))
            }
        }
    }

    /// Collapses stacked per-dim token relevance into a [`TokenRelevance`]
    /// with one score per original token position. Dropped tokens score 0.
    pub fn token_relevance(
        &self,
        per_dim: &Matrix<T>,
        class: usize,
        event: &PropagationEvent,
    ) -> TokenRelevance<T> {
        let z = token_attribution(per_dim);
        let scores = (0..self.num_nodes())
            .map(|v| {
                let mut row = vec![T::zero(); event.tokens(v).len()];
                for (i, &pos) in self.positions[v].iter().enumerate() {
                    row[pos] = z[self.segments[v].start + i];
                }
                row
            })
            .collect();
        TokenRelevance {
            class,
            scores,
            mask: None,
        }
    }

    /// Backpropagates `node_grad` (`∂L/∂X`) to the embedding table (dense,
    /// `vocab × D`) and, for MLP pooling, to the pooling layer.
    pub fn grad_backward(
        &self,
        node_grad: &Matrix<T>,
        vocab_size: usize,
    ) -> Result<(Matrix<T>, Option<LinearGrad<T>>)> {
        if node_grad.shape() != self.node_features.shape() {
            return Err(Error::Dimension {
                op: "EmbeddedEvent::grad_backward",
                left: self.node_features.shape(),
                right: node_grad.shape(),
            });
        }
        let mut pooled_grad = Matrix::zeros(self.pooled_rows.rows(), self.pooled_rows.cols());
        for (v, seg) in self.segments.iter().enumerate() {
            if seg.is_empty() {
                continue;
            }
            match self.kind {
                PoolingKind::Mean | PoolingKind::Mlp => {
                    let n = T::of(seg.len() as f64);
                    for r in seg.clone() {
                        for d in 0..pooled_grad.cols() {
                            pooled_grad.set(r, d, node_grad.get(v, d) / n);
                        }
                    }
                }
                PoolingKind::Max => {
                    for (d, &w) in self.winners[v].iter().enumerate() {
                        pooled_grad.set(w, d, node_grad.get(v, d));
                    }
                }
            }
        }
        let (token_grad, mlp_grad) = match &self.mlp {
            None => (pooled_grad, None),
            Some(trace) => {
                let g = trace.tape.backward_grad(trace.output, pooled_grad)?;
                let tg = g
                    .wrt(trace.input)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(self.tokens.rows(), self.tokens.cols()));
                (tg, g.param(MLP_SLOT).cloned())
            }
        };
        let mut table_grad = Matrix::zeros(vocab_size, self.tokens.cols());
        for (row, &tok) in self.token_ids.iter().enumerate() {
            for (acc, &g) in table_grad.row_mut(tok).iter_mut().zip(token_grad.row(row)) {
                *acc += g;
            }
        }
        Ok((table_grad, mlp_grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphdata::Post;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn event(tokens: Vec<Vec<usize>>) -> PropagationEvent {
        let posts = tokens
            .into_iter()
            .enumerate()
            .map(|(v, toks)| {
                let parent = (v > 0).then(|| "p0".to_string());
                Post::new(format!("p{v}"), parent.as_deref(), toks)
            })
            .collect();
        PropagationEvent::new("e", 0, posts).unwrap()
    }

    fn table(seed: u64) -> EmbeddingTable {
        EmbeddingTable::random(10, 4, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn tiny() -> Epsilon {
        Epsilon::new(1e-9).unwrap()
    }

    #[test]
    fn init_bounds() {
        let t = table(1);
        let bound = 0.5 / 2.0;
        assert!(t.matrix().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn single_token_nodes_equal_token_vectors() {
        let t = table(2);
        let ev = event(vec![vec![3], vec![7]]);
        for pooling in [Pooling::Mean, Pooling::Max] {
            let emb = embed_event(&ev, &t, &pooling).unwrap();
            assert_eq!(emb.node_features.row(0), t.vector(3));
            assert_eq!(emb.node_features.row(1), t.vector(7));
        }
    }

    #[test]
    fn duplicate_tokens_mean() {
        let t = table(3);
        let emb = embed_event(&event(vec![vec![5, 5]]), &t, &Pooling::Mean).unwrap();
        for (a, b) in emb.node_features.row(0).iter().zip(t.vector(5)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn max_is_elementwise_max() {
        let t = table(4);
        let emb = embed_event(&event(vec![vec![1, 2, 3]]), &t, &Pooling::Max).unwrap();
        for d in 0..4 {
            let m = [1, 2, 3]
                .iter()
                .map(|&k| t.vector(k)[d])
                .fold(f64::MIN, f64::max);
            assert_eq!(emb.node_features.get(0, d), m);
        }
    }

    #[test]
    fn out_of_vocab_rejected() {
        let err = embed_event(&event(vec![vec![10]]), &table(1), &Pooling::Mean);
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn masked_node_is_zero() {
        let emb = embed_event_masked(
            &event(vec![vec![1], vec![2, 3]]),
            &table(1),
            &Pooling::Mean,
            |v, _| v != 0,
        )
        .unwrap();
        assert!(emb.node_features.row(0).iter().all(|&x| x == 0.0));
        assert!(emb.segments[0].is_empty());
        assert_eq!(emb.positions[1], vec![0, 1]);
    }

    #[test]
    fn mean_split_identical_tokens() {
        let x = Matrix::from_rows(&[vec![0.5, -1.0], vec![0.5, -1.0]]).unwrap();
        let r = lrp_pool_backward(
            &[2.0, 4.0],
            &x,
            PoolingKind::Mean,
            tiny(),
            BackwardMode::Conserving,
        )
        .unwrap();
        for t in 0..2 {
            assert!((r.get(t, 0) - 1.0).abs() < 1e-6);
            assert!((r.get(t, 1) - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn max_winner_takes_all() {
        let x = Matrix::from_rows(&[vec![0.1, 0.9], vec![0.7, 0.2], vec![0.3, 0.4]]).unwrap();
        let r = lrp_pool_backward(
            &[1.5, -2.0],
            &x,
            PoolingKind::Max,
            tiny(),
            BackwardMode::Conserving,
        )
        .unwrap();
        assert_eq!(r.data(), &[0.0, -2.0, 1.5, 0.0, 0.0, 0.0]);
        let lit = lrp_pool_backward(
            &[1.5, -2.0],
            &x,
            PoolingKind::Max,
            tiny(),
            BackwardMode::Unnormalized,
        )
        .unwrap();
        assert!((lit.get(1, 0) - 0.7 * 1.5).abs() < 1e-15);
        assert!((lit.get(0, 1) + 0.9 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn max_ties_go_to_first_position() {
        let x = Matrix::from_rows(&[vec![0.3], vec![0.3]]).unwrap();
        let r = lrp_pool_backward(
            &[1.0],
            &x,
            PoolingKind::Max,
            tiny(),
            BackwardMode::Conserving,
        )
        .unwrap();
        assert_eq!(r.data(), &[1.0, 0.0]);
    }

    #[test]
    fn mean_conserves_per_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let x = Matrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
            let rv = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let r = lrp_pool_backward(&rv, &x, PoolingKind::Mean, tiny(), BackwardMode::Conserving)
                .unwrap();
            for d in 0..3 {
                let direct: f64 = (0..4).map(|t| r.get(t, d)).sum();
                let mean: f64 = (0..4).map(|t| x.get(t, d)).sum::<f64>() / 4.0;
                // Loss per dim is r_v·ε/|x_v + ε|.
                let tol = 1e-6 * rv[d].abs() + rv[d].abs() * 1e-9 / mean.abs();
                assert!(
                    (direct - rv[d]).abs() <= tol,
                    "dim {d}: {direct} vs {}",
                    rv[d]
                );
            }
        }
    }

    #[test]
    fn literal_mean_overcounts_by_token_count() {
        let x: Matrix = Matrix::from_rows(&[vec![0.2], vec![0.4], vec![0.9]]).unwrap();
        let eps = Epsilon::new(1e-300).unwrap();
        let lit = lrp_pool_backward(
            &[1.7],
            &x,
            PoolingKind::Mean,
            eps,
            BackwardMode::Unnormalized,
        )
        .unwrap();
        let cons = lrp_pool_backward(&[1.7], &x, PoolingKind::Mean, eps, BackwardMode::Conserving)
            .unwrap();
        assert!((lit.sum() - 3.0 * 1.7).abs() < 1e-12);
        assert!((lit.sum() - 3.0 * cons.sum()).abs() < 1e-12);
    }

    #[test]
    fn relevance_shape_checked() {
        let x = Matrix::<f64>::zeros(2, 3);
        assert!(lrp_pool_backward(
            &[1.0],
            &x,
            PoolingKind::Mean,
            tiny(),
            BackwardMode::Conserving
        )
        .is_err());
        assert!(matches!(
            "sideways".parse::<BackwardMode>(),
            Err(Error::Config(_))
        ));
        assert_eq!(
            "unnormalized".parse::<BackwardMode>().unwrap(),
            BackwardMode::Unnormalized
        );
    }

    #[test]
    fn token_attribution_sums_dims() {
        let r = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, -3.0]]).unwrap();
        assert_eq!(token_attribution(&r), vec![3.0, -3.0]);
        assert_eq!(token_attribution(&Matrix::<f64>::zeros(3, 2)), vec![0.0; 3]);
        let single = Matrix::from_rows(&[vec![0.25], vec![-1.5]]).unwrap();
        assert_eq!(token_attribution(&single), vec![0.25, -1.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = Matrix::from_fn(5, 7, |_, _| rng.gen_range(-1.0..1.0));
        let z = token_attribution(&r);
        for t in 0..5 {
            let mut acc = 0.0;
            for d in 0..7 {
                acc += r.get(t, d);
            }
            assert_eq!(z[t], acc);
        }
    }

    #[test]
    fn mlp_relevance_conserves_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = table(6);
        let pooling = Pooling::Mlp {
            weights: Arc::new(Matrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0))),
            bias: None,
        };
        let ev = event(vec![vec![1, 2, 3], vec![4]]);
        let emb = embed_event(&ev, &t, &pooling).unwrap();
        let rv = Matrix::from_fn(2, 4, |v, d| emb.node_features.get(v, d));
        let r = emb
            .lrp_backward(&rv, tiny(), BackwardMode::Conserving)
            .unwrap();
        assert!((r.sum() - rv.sum()).abs() < 1e-6 * rv.l1_norm());
    }
}
