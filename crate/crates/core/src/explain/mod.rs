//! Attribution methods over a trained [`BiGcnModel`]: GNN relevance per
//! class, token relevance through pooling, contrastive token masking, and
//! the node-level baselines (LRP, Grad-CAM, contrastive excitation backprop).

mod html;
mod record;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphdata::PropagationEvent;
use crate::model::{argmax, BiGcnModel, ForwardPass};
use crate::numkernel::{Epsilon, Matrix, RelevanceRule};
use crate::scalar::Scalar;
use crate::textembed::{BackwardMode, TokenRelevance};

pub use html::render_html;
pub use record::{ExplanationRecord, TokenRecord};

pub const DEFAULT_THRESHOLD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    CtLrp,
    TokenLrp,
    NodeLrp,
    GradCam,
    #[serde(rename = "c-eb")]
    ContrastiveEb,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::CtLrp,
        Method::TokenLrp,
        Method::NodeLrp,
        Method::GradCam,
        Method::ContrastiveEb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::CtLrp => "ct-lrp",
            Method::TokenLrp => "token-lrp",
            Method::NodeLrp => "node-lrp",
            Method::GradCam => "grad-cam",
            Method::ContrastiveEb => "c-eb",
        }
    }

    pub fn is_token_level(self) -> bool {
        matches!(self, Method::CtLrp | Method::TokenLrp)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!(
                    "unknown method {s:?}; valid methods: {}",
                    valid.join(", ")
                ))
            })
    }
}

/// Per-class relevance over the node feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeRelevance<T = f64> {
    pub class: usize,
    pub relevance: Matrix<T>,
}

/// Output of any attribution method for one event.
#[derive(Clone, Debug, PartialEq)]
pub struct Explanation<T = f64> {
    pub event_id: String,
    pub method: Method,
    pub predicted: usize,
    /// Class being explained (the prediction unless requested otherwise).
    pub target: usize,
    pub logits: Vec<T>,
    /// Token scores per computed class; empty for node-level methods.
    pub token_relevance: Vec<TokenRelevance<T>>,
    /// Keep bits laid out like the event's tokens; empty for node-level methods.
    pub mask: Vec<Vec<bool>>,
    /// One score per node for node-level methods.
    pub node_scores: Option<Vec<T>>,
    /// Set when all logits coincide, so the prediction carries no signal.
    pub low_confidence: bool,
    /// Attribution above which an element counts as identified.
    pub threshold: T,
}

impl<T: Scalar> Explanation<T> {
    /// Token scores for `class`, if computed.
    pub fn scores_for(&self, class: usize) -> Option<&TokenRelevance<T>> {
        self.token_relevance.iter().find(|z| z.class == class)
    }

    /// Kept tokens as `(node, position, z^(target))`, in node/position order.
    pub fn kept_tokens(&self) -> Vec<(usize, usize, T)> {
        let Some(z) = self.scores_for(self.target) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for (v, row) in self.mask.iter().enumerate() {
            for (t, &keep) in row.iter().enumerate() {
                if keep {
                    out.push((v, t, z.scores[v][t]));
                }
            }
        }
        out
    }
}

fn low_confidence<T: Scalar>(logits: &[T]) -> bool {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let min = logits.iter().fold(T::infinity(), |m, &v| m.min(v));
    (max - min).abs() <= T::of(1e-12) * (T::one() + max.abs())
}

/// Runs attribution methods against one model. Counts GNN relevance passes
/// and perturbed forwards so callers can audit the work done.
pub struct Explainer<'m, T = f64> {
    model: &'m BiGcnModel<T>,
    eps: Epsilon<T>,
    mode: BackwardMode,
    threshold: T,
    lrp_passes: AtomicUsize,
    perturbed_forwards: AtomicUsize,
}

impl<'m, T: Scalar> Explainer<'m, T> {
    pub fn new(model: &'m BiGcnModel<T>, eps: Epsilon<T>, mode: BackwardMode) -> Self {
        Self {
            model,
            eps,
            mode,
            threshold: T::of(DEFAULT_THRESHOLD),
            lrp_passes: AtomicUsize::new(0),
            perturbed_forwards: AtomicUsize::new(0),
        }
    }

    /// Sets the identification threshold recorded on each explanation.
    pub fn with_threshold(mut self, threshold: T) -> Result<Self> {
        if !(threshold > T::zero() && threshold.is_finite()) {
            return Err(Error::Config(format!(
                "threshold must be positive, got {threshold}"
            )));
        }
        self.threshold = threshold;
        Ok(self)
    }

    pub fn threshold(&self) -> T {
        self.threshold
    }

    pub fn model(&self) -> &BiGcnModel<T> {
        self.model
    }

    pub fn lrp_passes(&self) -> usize {
        self.lrp_passes.load(Ordering::Relaxed)
    }

    pub fn perturbed_forwards(&self) -> usize {
        self.perturbed_forwards.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.lrp_passes.store(0, Ordering::Relaxed);
        self.perturbed_forwards.store(0, Ordering::Relaxed);
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.model.num_classes() {
            return Err(Error::Input(format!(
                "class {class} out of range for {} classes",
                self.model.num_classes()
            )));
        }
        Ok(())
    }

    fn one_hot(&self, class: usize, value: T) -> Result<Matrix<T>> {
        let mut seed = vec![T::zero(); self.model.num_classes()];
        seed[class] = value;
        Matrix::row_vector(seed)
    }

    /// `R^(c)`: epsilon-LRP from logit `c` (all other logits masked) back
    /// to the node feature matrix, with the graph structure held fixed.
    pub fn lrp_gnn(&self, event: &PropagationEvent, class: usize) -> Result<NodeRelevance<T>> {
        self.check_class(class)?;
        let pass = self.model.forward(event)?;
        self.lrp_gnn_from(&pass, class)
    }

    pub fn lrp_gnn_from(&self, pass: &ForwardPass<T>, class: usize) -> Result<NodeRelevance<T>> {
        self.check_class(class)?;
        self.lrp_passes.fetch_add(1, Ordering::Relaxed);
        let logits = pass.tape.value(pass.logits_id);
        let seed = self.one_hot(class, logits.get(0, class))?;
        let rel =
            pass.tape
                .backward_relevance(pass.logits_id, seed, RelevanceRule::Epsilon(self.eps))?;
        let relevance = rel[pass.features.index()].clone().unwrap_or_else(|| {
            Matrix::zeros(
                pass.embedded.node_features.rows(),
                pass.embedded.node_features.cols(),
            )
        });
        Ok(NodeRelevance { class, relevance })
    }

    /// `Z^(c)` from `R^(c)` through the pooling step.
    pub fn token_relevance(
        &self,
        event: &PropagationEvent,
        pass: &ForwardPass<T>,
        node_relevance: &NodeRelevance<T>,
    ) -> Result<TokenRelevance<T>> {
        let per_dim = pass
            .embedded
            .lrp_backward(&node_relevance.relevance, self.eps, self.mode)?;
        Ok(pass
            .embedded
            .token_relevance(&per_dim, node_relevance.class, event))
    }

    /// Logits with one token removed before pooling.
    pub fn perturbed_forward(
        &self,
        event: &PropagationEvent,
        node: usize,
        position: usize,
    ) -> Result<Vec<T>> {
        self.perturbed_forwards.fetch_add(1, Ordering::Relaxed);
        self.model.perturbed_forward(event, node, position)
    }

    /// Contrastive token-level LRP for the predicted class.
    ///
    /// A token is kept when its predicted-class score is positive and, for
    /// every other class where it also scores positive, removing it lowers
    /// the predicted logit strictly more than that class's logit.
    pub fn ct_lrp(&self, event: &PropagationEvent) -> Result<Explanation<T>> {
        let classes = self.model.num_classes();
        let pass = self.model.forward(event)?;
        let logits = pass.logits();
        let predicted = argmax(&logits);

        let mut per_class = Vec::with_capacity(classes);
        for c in 0..classes {
            let r = self.lrp_gnn_from(&pass, c)?;
            per_class.push(self.token_relevance(event, &pass, &r)?);
        }

        let z_hat = &per_class[predicted];
        let mut mask = Vec::with_capacity(event.num_nodes());
        let mut perturbed: HashMap<(usize, usize), Vec<T>> = HashMap::new();
        for v in 0..event.num_nodes() {
            let mut row = Vec::with_capacity(event.tokens(v).len());
            for t in 0..event.tokens(v).len() {
                if z_hat.scores[v][t] <= T::zero() {
                    row.push(false);
                    continue;
                }
                let contested: Vec<usize> = (0..classes)
                    .filter(|&c| c != predicted && per_class[c].scores[v][t] > T::zero())
                    .collect();
                if contested.is_empty() {
                    row.push(true);
                    continue;
                }
                let y_prime = match perturbed.get(&(v, t)) {
                    Some(y) => y.clone(),
                    None => {
                        let y = self.perturbed_forward(event, v, t)?;
                        perturbed.insert((v, t), y.clone());
                        y
                    }
                };
                let own_drop = logits[predicted] - y_prime[predicted];
                let keep = contested.iter().all(|&c| own_drop > logits[c] - y_prime[c]);
                row.push(keep);
            }
            mask.push(row);
        }

        let mut target_scores = per_class[predicted].clone();
        target_scores.mask = Some(mask.clone());
        per_class[predicted] = target_scores;

        Ok(Explanation {
            event_id: event.event_id().to_owned(),
            method: Method::CtLrp,
            predicted,
            target: predicted,
            low_confidence: low_confidence(&logits),
            logits,
            token_relevance: per_class,
            mask,
            node_scores: None,
            threshold: self.threshold,
        })
    }

    /// Plain token-level LRP for `class`; keeps every positively scored token.
    pub fn lrp_token(&self, event: &PropagationEvent, class: usize) -> Result<Explanation<T>> {
        self.check_class(class)?;
        let pass = self.model.forward(event)?;
        let logits = pass.logits();
        let r = self.lrp_gnn_from(&pass, class)?;
        let mut z = self.token_relevance(event, &pass, &r)?;
        let mask: Vec<Vec<bool>> = z
            .scores
            .iter()
            .map(|row| row.iter().map(|&s| s > T::zero()).collect())
            .collect();
        z.mask = Some(mask.clone());
        Ok(Explanation {
            event_id: event.event_id().to_owned(),
            method: Method::TokenLrp,
            predicted: argmax(&logits),
            target: class,
            low_confidence: low_confidence(&logits),
            logits,
            token_relevance: vec![z],
            mask,
            node_scores: None,
            threshold: self.threshold,
        })
    }

    /// Node scores `Σ_d R^(c)_{v,d}`.
    pub fn lrp_node(&self, event: &PropagationEvent, class: usize) -> Result<Vec<T>> {
        Ok(self.lrp_gnn(event, class)?.relevance.row_sums())
    }

    /// Grad-CAM over each branch's final convolution output:
    /// `α_d = mean_v ∂y_c/∂h_{v,d}`, score `ReLU(Σ_d α_d h_{v,d})`, summed
    /// over the two branches.
    pub fn grad_cam(&self, event: &PropagationEvent, class: usize) -> Result<Vec<T>> {
        self.check_class(class)?;
        let pass = self.model.forward(event)?;
        let grads = pass
            .tape
            .backward_grad(pass.logits_id, self.one_hot(class, T::one())?)?;
        let n = event.num_nodes();
        let mut scores = vec![T::zero(); n];
        for conv in [pass.top_down_conv, pass.bottom_up_conv] {
            let h = pass.tape.value(conv);
            let Some(g) = grads.wrt(conv) else { continue };
            let nf = T::of(n as f64);
            let alpha: Vec<T> = (0..h.cols())
                .map(|d| (0..n).map(|v| g.get(v, d)).sum::<T>() / nf)
                .collect();
            for (v, s) in scores.iter_mut().enumerate() {
                let cam: T = h.row(v).iter().zip(&alpha).map(|(&x, &a)| x * a).sum();
                *s += cam.max(T::zero());
            }
        }
        Ok(scores)
    }

    /// Contrastive excitation backprop: positive-weight propagation from
    /// the target class minus the same propagation from a uniform mixture
    /// of the other classes, summed per node and clipped at zero.
    pub fn c_eb(&self, event: &PropagationEvent, class: usize) -> Result<Vec<T>> {
        self.check_class(class)?;
        let classes = self.model.num_classes();
        let pass = self.model.forward(event)?;
        let target = self.one_hot(class, T::one())?;
        let share = T::one() / T::of((classes - 1) as f64);
        let mut others = vec![share; classes];
        others[class] = T::zero();
        let others = Matrix::row_vector(others)?;
        let features = |seed: Matrix<T>| -> Result<Vec<T>> {
            let rel =
                pass.tape
                    .backward_relevance(pass.logits_id, seed, RelevanceRule::Excitation)?;
            Ok(rel[pass.features.index()]
                .as_ref()
                .map(Matrix::row_sums)
                .unwrap_or_else(|| vec![T::zero(); event.num_nodes()]))
        };
        let pos = features(target)?;
        let neg = features(others)?;
        Ok(pos
            .iter()
            .zip(&neg)
            .map(|(&p, &q)| (p - q).max(T::zero()))
            .collect())
    }

    fn node_explanation(
        &self,
        event: &PropagationEvent,
        method: Method,
        class: usize,
    ) -> Result<Explanation<T>> {
        let logits = self.model.logits(event)?;
        let scores = match method {
            Method::NodeLrp => self.lrp_node(event, class)?,
            Method::GradCam => self.grad_cam(event, class)?,
            Method::ContrastiveEb => self.c_eb(event, class)?,
            _ => unreachable!("token-level method"),
        };
        Ok(Explanation {
            event_id: event.event_id().to_owned(),
            method,
            predicted: argmax(&logits),
            target: class,
            low_confidence: low_confidence(&logits),
            logits,
            token_relevance: Vec::new(),
            mask: Vec::new(),
            node_scores: Some(scores),
            threshold: self.threshold,
        })
    }

    /// Explains `event` with `method`; the target class defaults to the
    /// model's prediction. CT-LRP always explains the prediction.
    pub fn explain(
        &self,
        event: &PropagationEvent,
        method: Method,
        class: Option<usize>,
    ) -> Result<Explanation<T>> {
        let class = match class {
            Some(c) => c,
            None => self.model.predict(event)?,
        };
        match method {
            Method::CtLrp => self.ct_lrp(event),
            Method::TokenLrp => self.lrp_token(event, class),
            m => self.node_explanation(event, m, class),
        }
    }
}
