use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Explanation, Method};
use crate::error::Result;
use crate::graphdata::{PropagationEvent, Vocabulary};
use crate::scalar::Scalar;

/// One token in a serialized explanation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenRecord {
    pub node: usize,
    pub position: usize,
    pub token: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Relevance per computed class, keyed by class index.
    pub z: BTreeMap<usize, f64>,
    pub kept: bool,
}

/// Serializable form of an [`Explanation`], in `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplanationRecord {
    pub event_id: String,
    pub method: Method,
    pub predicted: usize,
    pub target: usize,
    pub logits: Vec<f64>,
    pub low_confidence: bool,
    pub threshold: f64,
    pub tokens: Vec<TokenRecord>,
    pub node_scores: Option<Vec<f64>>,
}

impl ExplanationRecord {
    pub fn new<T: Scalar>(
        explanation: &Explanation<T>,
        event: &PropagationEvent,
        vocabulary: Option<&Vocabulary>,
    ) -> Self {
        let mut tokens = Vec::new();
        if explanation.method.is_token_level() {
            for v in 0..event.num_nodes() {
                for (t, &token) in event.tokens(v).iter().enumerate() {
                    tokens.push(TokenRecord {
                        node: v,
                        position: t,
                        token,
                        text: vocabulary
                            .and_then(|voc| voc.token(token))
                            .map(str::to_owned),
                        z: explanation
                            .token_relevance
                            .iter()
                            .map(|z| (z.class, z.scores[v][t].to_f64_lossy()))
                            .collect(),
                        kept: explanation.mask[v][t],
                    });
                }
            }
        }
        Self {
            event_id: explanation.event_id.clone(),
            method: explanation.method,
            predicted: explanation.predicted,
            target: explanation.target,
            logits: explanation
                .logits
                .iter()
                .map(|v| v.to_f64_lossy())
                .collect(),
            low_confidence: explanation.low_confidence,
            threshold: explanation.threshold.to_f64_lossy(),
            tokens,
            node_scores: explanation
                .node_scores
                .as_ref()
                .map(|s| s.iter().map(|v| v.to_f64_lossy()).collect()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
