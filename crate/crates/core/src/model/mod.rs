//! Two-branch (top-down / bottom-up) graph convolutional classifier over
//! propagation trees, its trainer and its checkpoint format.

mod checkpoint;
mod train;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphdata::{build_adjacency, PropagationEvent};
use crate::numkernel::{LinearGrad, Matrix, Tape, ValueId};
use crate::scalar::Scalar;
use crate::textembed::{embed_event_masked, EmbeddedEvent, EmbeddingTable, Pooling, PoolingKind};

pub use checkpoint::{CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use train::{kfold_splits, split_train_validation, train, EpochLog, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub pooling: PoolingKind,
    /// When false, every linear layer is bias-free.
    pub use_bias: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            num_classes: 4,
            embed_dim: 32,
            hidden_dim: 64,
            pooling: PoolingKind::Mean,
            use_bias: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Model(
                "vocab_size, embed_dim and hidden_dim must be positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::Model(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Weights (and optional bias) of one linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T = f64> {
    pub weights: Arc<Matrix<T>>,
    pub bias: Option<Arc<Matrix<T>>>,
}

impl<T: Scalar> LinearParams<T> {
    fn xavier(fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            weights: Arc::new(Matrix::from_fn(fan_in, fan_out, |_, _| {
                T::of(rng.gen_range(-bound..bound))
            })),
            bias: bias.then(|| Arc::new(Matrix::zeros(1, fan_out))),
        }
    }
}

/// Two stacked graph convolutions, each `ReLU(Â·H·W + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch<T = f64> {
    pub conv1: LinearParams<T>,
    pub conv2: LinearParams<T>,
}

/// Parameter slots used on the forward tape.
pub mod slots {
    pub const TD_CONV1: usize = 1;
    pub const TD_CONV2: usize = 2;
    pub const BU_CONV1: usize = 3;
    pub const BU_CONV2: usize = 4;
    pub const CLASSIFIER: usize = 5;
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiGcnModel<T = f64> {
    config: ModelConfig,
    pub embedding: EmbeddingTable<T>,
    pub pooling: Pooling<T>,
    pub top_down: Branch<T>,
    pub bottom_up: Branch<T>,
    pub classifier: LinearParams<T>,
}

/// Everything recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass<T = f64> {
    pub embedded: EmbeddedEvent<T>,
    pub tape: Tape<T>,
    /// Node feature matrix `X` (tape input).
    pub features: ValueId,
    /// Final convolution output (after ReLU) per branch.
    pub top_down_conv: ValueId,
    pub bottom_up_conv: ValueId,
    pub top_down_readout: ValueId,
    pub bottom_up_readout: ValueId,
    pub logits_id: ValueId,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn logits(&self) -> Vec<T> {
        self.tape.value(self.logits_id).data().to_vec()
    }

    pub fn predicted(&self) -> usize {
        argmax(self.tape.value(self.logits_id).data())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Gradients for every trainable tensor, in [`BiGcnModel::tensor_names`] order.
#[derive(Clone, Debug)]
pub struct ModelGrads<T = f64> {
    pub tensors: Vec<Matrix<T>>,
}

impl<T: Scalar> ModelGrads<T> {
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: T) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v *= k;
            }
        }
    }
}

/// Softmax cross-entropy and its gradient wrt the logits.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let loss = total.ln() - (logits[label] - max);
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, &e)| e / total - if i == label { T::one() } else { T::zero() })
        .collect();
    (loss, grad)
}

impl<T: Scalar> BiGcnModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embedding = EmbeddingTable::random(config.vocab_size, config.embed_dim, &mut rng);
        let pooling = Pooling::new(config.pooling, config.embed_dim, config.use_bias, &mut rng);
        let (d, h, b) = (config.embed_dim, config.hidden_dim, config.use_bias);
        let branch = |rng: &mut ChaCha8Rng| Branch {
            conv1: LinearParams::xavier(d, h, b, rng),
            conv2: LinearParams::xavier(h, h, b, rng),
        };
        let top_down = branch(&mut rng);
        let bottom_up = branch(&mut rng);
        let classifier = LinearParams::xavier(2 * h, config.num_classes, b, &mut rng);
        Ok(Self {
            config,
            embedding,
            pooling,
            top_down,
            bottom_up,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Names of all trainable tensors, in a fixed order.
    pub fn tensor_names(&self) -> Vec<&'static str> {
        let mut names = vec!["embedding"];
        let with_bias = self.config.use_bias;
        if matches!(self.pooling, Pooling::Mlp { .. }) {
            names.push("pool.weights");
            if with_bias {
                names.push("pool.bias");
            }
        }
        for (w, b) in [
            ("top_down.conv1.weights", "top_down.conv1.bias"),
            ("top_down.conv2.weights", "top_down.conv2.bias"),
            ("bottom_up.conv1.weights", "bottom_up.conv1.bias"),
            ("bottom_up.conv2.weights", "bottom_up.conv2.bias"),
            ("classifier.weights", "classifier.bias"),
        ] {
            names.push(w);
            if with_bias {
                names.push(b);
            }
        }
        names
    }

    fn linear_by_prefix(&self, prefix: &str) -> Option<&LinearParams<T>> {
        match prefix {
            "top_down.conv1" => Some(&self.top_down.conv1),
            "top_down.conv2" => Some(&self.top_down.conv2),
            "bottom_up.conv1" => Some(&self.bottom_up.conv1),
            "bottom_up.conv2" => Some(&self.bottom_up.conv2),
            "classifier" => Some(&self.classifier),
            _ => None,
        }
    }

    fn linear_by_prefix_mut(&mut self, prefix: &str) -> Option<&mut LinearParams<T>> {
        match prefix {
            "top_down.conv1" => Some(&mut self.top_down.conv1),
            "top_down.conv2" => Some(&mut self.top_down.conv2),
            "bottom_up.conv1" => Some(&mut self.bottom_up.conv1),
            "bottom_up.conv2" => Some(&mut self.bottom_up.conv2),
            "classifier" => Some(&mut self.classifier),
            _ => None,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix<T>> {
        match name {
            "embedding" => Some(self.embedding.matrix()),
            "pool.weights" | "pool.bias" => match &self.pooling {
                Pooling::Mlp { weights, bias } => {
                    if name == "pool.weights" {
                        Some(weights)
                    } else {
                        bias.as_deref()
                    }
                }
                _ => None,
            },
            _ => {
                let (prefix, field) = name.rsplit_once('.')?;
                let lin = self.linear_by_prefix(prefix)?;
                match field {
                    "weights" => Some(&lin.weights),
                    "bias" => lin.bias.as_deref(),
                    _ => None,
                }
            }
        }
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        match name {
            "embedding" => Some(self.embedding.matrix_mut()),
            "pool.weights" | "pool.bias" => match &mut self.pooling {
                Pooling::Mlp { weights, bias } => {
                    if name == "pool.weights" {
                        Some(Arc::make_mut(weights))
                    } else {
                        bias.as_mut().map(Arc::make_mut)
                    }
                }
                _ => None,
            },
            _ => {
                let (prefix, field) = name.rsplit_once('.')?;
                let lin = self.linear_by_prefix_mut(prefix)?;
                match field {
                    "weights" => Some(Arc::make_mut(&mut lin.weights)),
                    "bias" => lin.bias.as_mut().map(Arc::make_mut),
                    _ => None,
                }
            }
        }
    }

    pub fn forward(&self, event: &PropagationEvent) -> Result<ForwardPass<T>> {
        self.forward_masked(event, |_, _| true)
    }

    /// Forward pass with only the tokens `keep(node, position)` pooled.
    pub fn forward_masked(
        &self,
        event: &PropagationEvent,
        keep: impl Fn(usize, usize) -> bool,
    ) -> Result<ForwardPass<T>> {
        let embedded = embed_event_masked(event, &self.embedding, &self.pooling, keep)?;
        if embedded.node_features.cols() != self.config.embed_dim {
            return Err(Error::Model(format!(
                "pooled feature width {} does not match embed_dim {}",
                embedded.node_features.cols(),
                self.config.embed_dim
            )));
        }
        let adj = build_adjacency::<T>(event)?;
        let mut tape = Tape::new();
        let features = tape.input(embedded.node_features.clone())?;
        let run_branch =
            |tape: &mut Tape<T>, op: &Arc<Matrix<T>>, br: &Branch<T>, s1: usize, s2: usize| {
                let a = tape.aggregate(op, features)?;
                let l = tape.linear(a, &br.conv1.weights, br.conv1.bias.as_ref(), s1)?;
                let h = tape.relu(l)?;
                let a = tape.aggregate(op, h)?;
                let l = tape.linear(a, &br.conv2.weights, br.conv2.bias.as_ref(), s2)?;
                let h = tape.relu(l)?;
                let r = tape.mean_readout(h)?;
                Ok::<_, Error>((h, r))
            };
        let (top_down_conv, top_down_readout) = run_branch(
            &mut tape,
            &adj.top_down_propagation,
            &self.top_down,
            slots::TD_CONV1,
            slots::TD_CONV2,
        )?;
        let (bottom_up_conv, bottom_up_readout) = run_branch(
            &mut tape,
            &adj.bottom_up_propagation,
            &self.bottom_up,
            slots::BU_CONV1,
            slots::BU_CONV2,
        )?;
        let cat = tape.concat(&[top_down_readout, bottom_up_readout])?;
        let logits_id = tape.linear(
            cat,
            &self.classifier.weights,
            self.classifier.bias.as_ref(),
            slots::CLASSIFIER,
        )?;
        Ok(ForwardPass {
            embedded,
            tape,
            features,
            top_down_conv,
            bottom_up_conv,
            top_down_readout,
            bottom_up_readout,
            logits_id,
        })
    }

    pub fn logits(&self, event: &PropagationEvent) -> Result<Vec<T>> {
        Ok(self.forward(event)?.logits())
    }

    pub fn predict(&self, event: &PropagationEvent) -> Result<usize> {
        Ok(self.forward(event)?.predicted())
    }

    /// Logits with token `position` of node `node` removed before pooling.
    pub fn perturbed_forward(
        &self,
        event: &PropagationEvent,
        node: usize,
        position: usize,
    ) -> Result<Vec<T>> {
        if node >= event.num_nodes() || position >= event.tokens(node).len() {
            return Err(Error::Input(format!(
                "no token at node {node}, position {position} in event {}",
                event.event_id()
            )));
        }
        Ok(self
            .forward_masked(event, |v, t| !(v == node && t == position))?
            .logits())
    }

    /// Cross-entropy loss and gradients of every trainable tensor.
    pub fn loss_and_grads(&self, event: &PropagationEvent) -> Result<(T, ModelGrads<T>)> {
        if event.label() >= self.config.num_classes {
            return Err(Error::Input(format!(
                "label {} out of range for {} classes",
                event.label(),
                self.config.num_classes
            )));
        }
        let pass = self.forward(event)?;
        let (loss, dlogits) = cross_entropy(&pass.logits(), event.label());
        let seed = Matrix::row_vector(dlogits)?;
        let grads = pass.tape.backward_grad(pass.logits_id, seed)?;
        let dx = grads
            .wrt(pass.features)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(event.num_nodes(), self.config.embed_dim));
        let (table_grad, pool_grad) = pass.embedded.grad_backward(&dx, self.config.vocab_size)?;

        let zero_linear = |lin: &LinearParams<T>| LinearGrad {
            weights: Matrix::zeros(lin.weights.rows(), lin.weights.cols()),
            bias: lin.bias.as_ref().map(|b| Matrix::zeros(1, b.cols())),
        };
        let mut tensors = vec![table_grad];
        if let Pooling::Mlp { weights, bias } = &self.pooling {
            let g = pool_grad.unwrap_or_else(|| LinearGrad {
                weights: Matrix::zeros(weights.rows(), weights.cols()),
                bias: None,
            });
            tensors.push(g.weights);
            if bias.is_some() {
                tensors.push(g.bias.unwrap_or_else(|| Matrix::zeros(1, weights.cols())));
            }
        }
        for (slot, lin) in [
            (slots::TD_CONV1, &self.top_down.conv1),
            (slots::TD_CONV2, &self.top_down.conv2),
            (slots::BU_CONV1, &self.bottom_up.conv1),
            (slots::BU_CONV2, &self.bottom_up.conv2),
            (slots::CLASSIFIER, &self.classifier),
        ] {
            let g = grads
                .param(slot)
                .cloned()
                .unwrap_or_else(|| zero_linear(lin));
            tensors.push(g.weights);
            if lin.bias.is_some() {
                tensors.push(
                    g.bias
                        .unwrap_or_else(|| Matrix::zeros(1, lin.weights.cols())),
                );
            }
        }
        Ok((loss, ModelGrads { tensors }))
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> BiGcnModel<U> {
        let lin = |l: &LinearParams<T>| LinearParams {
            weights: Arc::new(l.weights.cast()),
            bias: l.bias.as_ref().map(|b| Arc::new(b.cast())),
        };
        let branch = |b: &Branch<T>| Branch {
            conv1: lin(&b.conv1),
            conv2: lin(&b.conv2),
        };
        BiGcnModel {
            config: self.config.clone(),
            embedding: EmbeddingTable::from_matrix(self.embedding.matrix().cast()),
            pooling: match &self.pooling {
                Pooling::Mean => Pooling::Mean,
                Pooling::Max => Pooling::Max,
                Pooling::Mlp { weights, bias } => Pooling::Mlp {
                    weights: Arc::new(weights.cast()),
                    bias: bias.as_ref().map(|b| Arc::new(b.cast())),
                },
            },
            top_down: branch(&self.top_down),
            bottom_up: branch(&self.bottom_up),
            classifier: lin(&self.classifier),
        }
    }
}
