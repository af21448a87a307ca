use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numkernel::rules::{self, Epsilon};
use crate::numkernel::Matrix;
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Input,
    Linear,
    Relu,
    GraphAggregate,
    MeanReadout,
    Concat,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Linear {
        input: ValueId,
        weights: Arc<Matrix<T>>,
        bias: Option<Arc<Matrix<T>>>,
        slot: usize,
    },
    Relu {
        input: ValueId,
    },
    GraphAggregate {
        adjacency: Arc<Matrix<T>>,
        input: ValueId,
    },
    MeanReadout {
        input: ValueId,
    },
    Concat {
        parts: Vec<ValueId>,
    },
}

/// One recorded layer: what ran, on which values, and what it produced.
#[derive(Clone, Debug)]
pub struct LayerTrace<T = f64> {
    op: Op<T>,
    output: Matrix<T>,
}

impl<T: Scalar> LayerTrace<T> {
    pub fn kind(&self) -> LayerKind {
        match self.op {
            Op::Input => LayerKind::Input,
            Op::Linear { .. } => LayerKind::Linear,
            Op::Relu { .. } => LayerKind::Relu,
            Op::GraphAggregate { .. } => LayerKind::GraphAggregate,
            Op::MeanReadout { .. } => LayerKind::MeanReadout,
            Op::Concat { .. } => LayerKind::Concat,
        }
    }

    pub fn inputs(&self) -> Vec<ValueId> {
        match &self.op {
            Op::Input => Vec::new(),
            Op::Linear { input, .. }
            | Op::Relu { input }
            | Op::GraphAggregate { input, .. }
            | Op::MeanReadout { input } => vec![*input],
            Op::Concat { parts } => parts.clone(),
        }
    }

    pub fn output(&self) -> &Matrix<T> {
        &self.output
    }

    /// Parameter slot of a linear layer.
    pub fn slot(&self) -> Option<usize> {
        match self.op {
            Op::Linear { slot, .. } => Some(slot),
            _ => None,
        }
    }
}

/// Relevance redistribution rule used by [`Tape::backward_relevance`].
#[derive(Clone, Copy, Debug)]
pub enum RelevanceRule<T = f64> {
    /// Epsilon-stabilised LRP.
    Epsilon(Epsilon<T>),
    /// Excitation backprop: positive weights, rectified activations.
    Excitation,
}

#[derive(Clone, Debug)]
pub struct LinearGrad<T = f64> {
    pub weights: Matrix<T>,
    pub bias: Option<Matrix<T>>,
}

/// Result of a reverse-mode pass.
#[derive(Clone, Debug)]
pub struct Gradients<T = f64> {
    values: Vec<Option<Matrix<T>>>,
    params: BTreeMap<usize, LinearGrad<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, id: ValueId) -> Option<&Matrix<T>> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    /// Gradients of the linear layer registered under `slot`.
    pub fn param(&self, slot: usize) -> Option<&LinearGrad<T>> {
        self.params.get(&slot)
    }

    pub fn params(&self) -> &BTreeMap<usize, LinearGrad<T>> {
        &self.params
    }
}

/// Append-only record of a forward computation.
///
/// Values are immutable once pushed; backward passes only read.
#[derive(Clone, Debug, Default)]
pub struct Tape<T = f64> {
    layers: Vec<LayerTrace<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[LayerTrace<T>] {
        &self.layers
    }

    pub fn value(&self, id: ValueId) -> &Matrix<T> {
        &self.layers[id.0].output
    }

    fn push(&mut self, op: Op<T>, output: Matrix<T>) -> Result<ValueId> {
        if !output.is_finite() {
            return Err(Error::NonFinite("tape"));
        }
        self.layers.push(LayerTrace { op, output });
        Ok(ValueId(self.layers.len() - 1))
    }

    fn check(&self, id: ValueId) -> Result<()> {
        if id.0 < self.layers.len() {
            Ok(())
        } else {
            Err(Error::Usage(format!("value {} is not on this tape", id.0)))
        }
    }

    pub fn input(&mut self, value: Matrix<T>) -> Result<ValueId> {
        self.push(Op::Input, value)
    }

    pub fn linear(
        &mut self,
        input: ValueId,
        weights: &Arc<Matrix<T>>,
        bias: Option<&Arc<Matrix<T>>>,
        slot: usize,
    ) -> Result<ValueId> {
        self.check(input)?;
        let out = rules::linear_forward(self.value(input), weights, bias.map(|b| b.as_ref()))?;
        self.push(
            Op::Linear {
                input,
                weights: Arc::clone(weights),
                bias: bias.cloned(),
                slot,
            },
            out,
        )
    }

    pub fn relu(&mut self, input: ValueId) -> Result<ValueId> {
        self.check(input)?;
        let out = rules::relu_forward(self.value(input));
        self.push(Op::Relu { input }, out)
    }

    pub fn aggregate(&mut self, adjacency: &Arc<Matrix<T>>, input: ValueId) -> Result<ValueId> {
        self.check(input)?;
        let out = rules::aggregate_forward(adjacency, self.value(input))?;
        self.push(
            Op::GraphAggregate {
                adjacency: Arc::clone(adjacency),
                input,
            },
            out,
        )
    }

    pub fn mean_readout(&mut self, input: ValueId) -> Result<ValueId> {
        self.check(input)?;
        let out = rules::mean_readout_forward(self.value(input))?;
        self.push(Op::MeanReadout { input }, out)
    }

    pub fn concat(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        for &p in parts {
            self.check(p)?;
        }
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::hconcat(&mats)?;
        self.push(
            Op::Concat {
                parts: parts.to_vec(),
            },
            out,
        )
    }

    /// Recomputes every layer from the recorded inputs and parameters.
    pub fn replay(&self) -> Result<Vec<Matrix<T>>> {
        let mut values: Vec<Matrix<T>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = match &layer.op {
                Op::Input => layer.output.clone(),
                Op::Linear {
                    input,
                    weights,
                    bias,
                    ..
                } => rules::linear_forward(&values[input.0], weights, bias.as_deref())?,
                Op::Relu { input } => rules::relu_forward(&values[input.0]),
                Op::GraphAggregate { adjacency, input } => {
                    rules::aggregate_forward(adjacency, &values[input.0])?
                }
                Op::MeanReadout { input } => rules::mean_readout_forward(&values[input.0])?,
                Op::Concat { parts } => {
                    let mats: Vec<&Matrix<T>> = parts.iter().map(|p| &values[p.0]).collect();
                    Matrix::hconcat(&mats)?
                }
            };
            values.push(out);
        }
        Ok(values)
    }

    fn seed_slots(&self, output: ValueId, seed: Matrix<T>) -> Result<Vec<Option<Matrix<T>>>> {
        if self.layers.is_empty() {
            return Err(Error::Usage("backward pass over an empty tape".into()));
        }
        self.check(output)?;
        if seed.shape() != self.value(output).shape() {
            return Err(Error::Dimension {
                op: "backward seed",
                left: self.value(output).shape(),
                right: seed.shape(),
            });
        }
        let mut slots = vec![None; output.0 + 1];
        slots[output.0] = Some(seed);
        Ok(slots)
    }

    /// Exact reverse-mode gradients of `output` seeded with `seed`
    /// (the adjoint of `output`).
    pub fn backward_grad(&self, output: ValueId, seed: Matrix<T>) -> Result<Gradients<T>> {
        let mut adj = self.seed_slots(output, seed)?;
        let mut params: BTreeMap<usize, LinearGrad<T>> = BTreeMap::new();
        for idx in (0..=output.0).rev() {
            let Some(upstream) = adj[idx].take() else {
                continue;
            };
            let layer = &self.layers[idx];
            match &layer.op {
                Op::Input => {}
                Op::Linear {
                    input,
                    weights,
                    bias,
                    slot,
                } => {
                    let x = self.value(*input);
                    let dw = x.t_matmul(&upstream)?;
                    let db = bias.as_ref().map(|_| upstream.col_sums());
                    match params.get_mut(slot) {
                        Some(g) => {
                            g.weights.add_assign(&dw)?;
                            if let (Some(acc), Some(db)) = (g.bias.as_mut(), db.as_ref()) {
                                acc.add_assign(db)?;
                            }
                        }
                        None => {
                            params.insert(
                                *slot,
                                LinearGrad {
                                    weights: dw,
                                    bias: db,
                                },
                            );
                        }
                    }
                    accumulate(&mut adj, *input, upstream.matmul_t(weights)?)?;
                }
                Op::Relu { input } => {
                    let x = self.value(*input);
                    let dx = upstream.zip_map(x, "relu grad", |g, v| {
                        if v > T::zero() {
                            g
                        } else {
                            T::zero()
                        }
                    })?;
                    accumulate(&mut adj, *input, dx)?;
                }
                Op::GraphAggregate { adjacency, input } => {
                    accumulate(&mut adj, *input, adjacency.t_matmul(&upstream)?)?;
                }
                Op::MeanReadout { input } => {
                    let x = self.value(*input);
                    let n = T::of(x.rows() as f64);
                    let dx = Matrix::from_fn(x.rows(), x.cols(), |_, d| upstream.get(0, d) / n);
                    accumulate(&mut adj, *input, dx)?;
                }
                Op::Concat { parts } => {
                    self.split_concat(parts, &upstream, &mut adj)?;
                }
            }
            adj[idx] = Some(upstream);
        }
        Ok(Gradients {
            values: adj,
            params,
        })
    }

    /// Relevance of every value on the path to `output`, seeded with `seed`.
    pub fn backward_relevance(
        &self,
        output: ValueId,
        seed: Matrix<T>,
        rule: RelevanceRule<T>,
    ) -> Result<Vec<Option<Matrix<T>>>> {
        let mut rel = self.seed_slots(output, seed)?;
        for idx in (0..=output.0).rev() {
            let Some(upstream) = rel[idx].take() else {
                continue;
            };
            let layer = &self.layers[idx];
            match (&layer.op, rule) {
                (Op::Input, _) => {}
                (Op::Relu { input }, _) => {
                    accumulate(&mut rel, *input, rules::lrp_relu_backward(&upstream))?;
                }
                (Op::Concat { parts }, _) => {
                    self.split_concat(parts, &upstream, &mut rel)?;
                }
                (
                    Op::Linear {
                        input,
                        weights,
                        bias,
                        ..
                    },
                    RelevanceRule::Epsilon(eps),
                ) => {
                    let r = rules::lrp_linear_backward(
                        self.value(*input),
                        weights,
                        bias.as_deref(),
                        &upstream,
                        eps,
                    )?;
                    accumulate(&mut rel, *input, r)?;
                }
                (Op::Linear { input, weights, .. }, RelevanceRule::Excitation) => {
                    let r =
                        rules::excitation_linear_backward(self.value(*input), weights, &upstream)?;
                    accumulate(&mut rel, *input, r)?;
                }
                (Op::GraphAggregate { adjacency, input }, RelevanceRule::Epsilon(eps)) => {
                    let r = rules::lrp_aggregate_backward(
                        adjacency,
                        self.value(*input),
                        &upstream,
                        eps,
                    )?;
                    accumulate(&mut rel, *input, r)?;
                }
                (Op::GraphAggregate { adjacency, input }, RelevanceRule::Excitation) => {
                    let r = rules::excitation_aggregate_backward(
                        adjacency,
                        self.value(*input),
                        &upstream,
                    )?;
                    accumulate(&mut rel, *input, r)?;
                }
                (Op::MeanReadout { input }, RelevanceRule::Epsilon(eps)) => {
                    let r = rules::lrp_mean_readout_backward(self.value(*input), &upstream, eps)?;
                    accumulate(&mut rel, *input, r)?;
                }
                (Op::MeanReadout { input }, RelevanceRule::Excitation) => {
                    let r = rules::excitation_mean_readout_backward(self.value(*input), &upstream)?;
                    accumulate(&mut rel, *input, r)?;
                }
            }
            rel[idx] = Some(upstream);
        }
        Ok(rel)
    }

    fn split_concat(
        &self,
        parts: &[ValueId],
        upstream: &Matrix<T>,
        slots: &mut [Option<Matrix<T>>],
    ) -> Result<()> {
        let mut offset = 0;
        for &p in parts {
            let width = self.value(p).cols();
            accumulate(slots, p, upstream.col_slice(offset, width)?)?;
            offset += width;
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(
    slots: &mut [Option<Matrix<T>>],
    id: ValueId,
    value: Matrix<T>,
) -> Result<()> {
    match &mut slots[id.0] {
        Some(acc) => acc.add_assign(&value),
        slot @ None => {
            *slot = Some(value);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    struct TwoLayer {
        w1: Arc<Matrix>,
        b1: Arc<Matrix>,
        w2: Arc<Matrix>,
    }

    impl TwoLayer {
        fn run(&self, x: &Matrix) -> (Tape, ValueId, ValueId) {
            let mut tape = Tape::new();
            let xi = tape.input(x.clone()).unwrap();
            let h = tape.linear(xi, &self.w1, Some(&self.b1), 0).unwrap();
            let h = tape.relu(h).unwrap();
            let y = tape.linear(h, &self.w2, None, 1).unwrap();
            (tape, xi, y)
        }
    }

    #[test]
    fn scalar_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Matrix::row_vector(vec![2.0]).unwrap()).unwrap();
        let w = Arc::new(Matrix::row_vector(vec![3.0]).unwrap());
        let y = tape.linear(x, &w, None, 0).unwrap();
        let g = tape
            .backward_grad(y, Matrix::row_vector(vec![1.0]).unwrap())
            .unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[3.0]);
        assert_eq!(g.param(0).unwrap().weights.data(), &[2.0]);
    }

    #[test]
    fn empty_tape_is_usage_error() {
        let tape = Tape::<f64>::new();
        let err = tape.backward_grad(ValueId(0), Matrix::zeros(1, 1));
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let net = TwoLayer {
            w1: Arc::new(Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap()),
            b1: Arc::new(Matrix::from_rows(&[vec![-10.0, -10.0]]).unwrap()),
            w2: Arc::new(Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap()),
        };
        let (tape, xi, y) = net.run(&Matrix::row_vector(vec![1.0]).unwrap());
        let g = tape
            .backward_grad(y, Matrix::row_vector(vec![1.0]).unwrap())
            .unwrap();
        assert_eq!(g.wrt(xi).unwrap().data(), &[0.0]);
        assert!(g.param(0).unwrap().weights.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_layer_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-4;
        for _ in 0..20 {
            let net = TwoLayer {
                w1: Arc::new(random(&mut rng, 3, 4)),
                b1: Arc::new(random(&mut rng, 1, 4)),
                w2: Arc::new(random(&mut rng, 4, 1)),
            };
            let x = random(&mut rng, 2, 3);
            let (tape, xi, y) = net.run(&x);
            let g = tape
                .backward_grad(y, Matrix::from_fn(2, 1, |_, _| 1.0))
                .unwrap();
            let f = |x: &Matrix| net.run(x).0.value(y).sum();
            for i in 0..x.data().len() {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let an = g.wrt(xi).unwrap().data()[i];
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let adj = Arc::new(Matrix::from_fn(3, 3, |_, _| rng.gen_range(0.0..1.0)));
        let w = Arc::new(random(&mut rng, 2, 2));
        let mut tape = Tape::new();
        let x = tape.input(random(&mut rng, 3, 2)).unwrap();
        let a = tape.aggregate(&adj, x).unwrap();
        let l = tape.linear(a, &w, None, 0).unwrap();
        let r = tape.relu(l).unwrap();
        let m = tape.mean_readout(r).unwrap();
        tape.concat(&[m, m]).unwrap();
        let replayed = tape.replay().unwrap();
        for (layer, out) in tape.layers().iter().zip(&replayed) {
            assert_eq!(layer.output(), out);
        }
        assert_eq!(tape.layers()[5].kind(), LayerKind::Concat);
        assert_eq!(tape.layers()[5].inputs(), vec![m, m]);
    }

    #[test]
    fn relevance_sums_at_shared_input() {
        let mut tape = Tape::new();
        let x = tape
            .input(Matrix::row_vector(vec![1.0, 2.0]).unwrap())
            .unwrap();
        let w = Arc::new(Matrix::identity(2));
        let a = tape.linear(x, &w, None, 0).unwrap();
        let b = tape.linear(x, &w, None, 1).unwrap();
        let c = tape.concat(&[a, b]).unwrap();
        let rel = tape
            .backward_relevance(
                c,
                Matrix::row_vector(vec![1.0, 1.0, 1.0, 1.0]).unwrap(),
                RelevanceRule::Epsilon(Epsilon::new(1e-12).unwrap()),
            )
            .unwrap();
        let rx: &Matrix = rel[x.index()].as_ref().unwrap();
        assert!((rx.get(0, 0) - 2.0).abs() < 1e-9 && (rx.get(0, 1) - 2.0).abs() < 1e-9);
    }
}
