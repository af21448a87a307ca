//! Fidelity, sparsity and fidelity-at-sparsity metrics, the fixed-sparsity
//! removal protocol, and sweeps aggregated over splits.
//!
//! Removal always goes through token dropping before pooling: removing a
//! node drops all of its tokens, so the graph structure never changes.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{Explainer, Explanation, Method, DEFAULT_THRESHOLD};
use crate::graphdata::PropagationEvent;
use crate::model::{argmax, BiGcnModel};
use crate::numkernel::Epsilon;
use crate::scalar::Scalar;
use crate::textembed::BackwardMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub sparsity_levels: Vec<f64>,
    /// Attribution above which an element counts as identified.
    pub threshold: f64,
    pub methods: Vec<Method>,
    pub folds: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub backward_mode: BackwardMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sparsity_levels: default_grid(),
            threshold: DEFAULT_THRESHOLD,
            methods: Method::ALL.to_vec(),
            folds: 5,
            seed: 0,
            epsilon: 1e-6,
            backward_mode: BackwardMode::Conserving,
        }
    }
}

/// 0.0, 0.1, ..., 0.9.
pub fn default_grid() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

fn check_level(level: f64) -> Result<()> {
    if !(0.0..1.0).contains(&level) {
        return Err(Error::Config(format!(
            "sparsity level must lie in [0, 1), got {level}"
        )));
    }
    Ok(())
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sparsity_levels.is_empty() {
            return Err(Error::Config("sparsity grid is empty".into()));
        }
        for &l in &self.sparsity_levels {
            check_level(l)?;
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::Config(format!(
                "threshold must be positive, got {}",
                self.threshold
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods requested".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!(
                "folds must be at least 2, got {}",
                self.folds
            )));
        }
        Epsilon::new(self.epsilon)?;
        Ok(())
    }
}

/// A removable unit: one token, or a whole node when `position` is `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Element {
    pub node: usize,
    pub position: Option<usize>,
    pub score: f64,
}

/// Elements scoring above `threshold`, in descending score order; ties
/// keep (node, position) order. Token methods only offer kept tokens.
pub fn identified_elements<T: Scalar>(
    explanation: &Explanation<T>,
    threshold: f64,
) -> Vec<Element> {
    let mut out: Vec<Element> = match &explanation.node_scores {
        Some(scores) => scores
            .iter()
            .enumerate()
            .map(|(v, s)| Element {
                node: v,
                position: None,
                score: s.to_f64_lossy(),
            })
            .collect(),
        None => explanation
            .kept_tokens()
            .into_iter()
            .map(|(v, t, z)| Element {
                node: v,
                position: Some(t),
                score: z.to_f64_lossy(),
            })
            .collect(),
    };
    out.retain(|e| e.score > threshold);
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Number of elements the sparsity is measured against.
pub fn element_count<T: Scalar>(explanation: &Explanation<T>, event: &PropagationEvent) -> usize {
    if explanation.method.is_token_level() {
        event.total_tokens()
    } else {
        event.num_nodes()
    }
}

/// `1 - identified / total`.
pub fn sparsity<T: Scalar>(
    explanation: &Explanation<T>,
    event: &PropagationEvent,
    threshold: f64,
) -> f64 {
    let total = element_count(explanation, event);
    1.0 - identified_elements(explanation, threshold).len() as f64 / total as f64
}

/// Whether the predicted class changes once `removed` is dropped.
pub fn prediction_changes<T: Scalar>(
    model: &BiGcnModel<T>,
    event: &PropagationEvent,
    removed: &[Element],
) -> Result<bool> {
    let before = model.predict(event)?;
    if removed.is_empty() {
        return Ok(false);
    }
    let nodes: HashSet<usize> = removed
        .iter()
        .filter(|e| e.position.is_none())
        .map(|e| e.node)
        .collect();
    let tokens: HashSet<(usize, usize)> = removed
        .iter()
        .filter_map(|e| e.position.map(|t| (e.node, t)))
        .collect();
    let pass = model.forward_masked(event, |v, t| {
        !nodes.contains(&v) && !tokens.contains(&(v, t))
    })?;
    Ok(argmax(&pass.logits()) != before)
}

fn check_pairs<T: Scalar>(
    events: &[PropagationEvent],
    explanations: &[Explanation<T>],
) -> Result<()> {
    if events.is_empty() {
        return Err(Error::Input(
            "fidelity is undefined for an empty event list".into(),
        ));
    }
    if events.len() != explanations.len() {
        return Err(Error::Input(format!(
            "{} events but {} explanations",
            events.len(),
            explanations.len()
        )));
    }
    let method = explanations[0].method;
    if explanations.iter().any(|e| e.method != method) {
        return Err(Error::Input("explanations mix methods".into()));
    }
    Ok(())
}

/// Fraction of events whose prediction changes when every identified
/// element is removed.
pub fn fidelity<T: Scalar>(
    model: &BiGcnModel<T>,
    events: &[PropagationEvent],
    explanations: &[Explanation<T>],
    threshold: f64,
) -> Result<f64> {
    check_pairs(events, explanations)?;
    let mut changed = 0usize;
    for (event, ex) in events.iter().zip(explanations) {
        changed += usize::from(prediction_changes(
            model,
            event,
            &identified_elements(ex, threshold),
        )?);
    }
    Ok(changed as f64 / events.len() as f64)
}

/// Most elements removable at `level`: `⌈(1 - level) · total⌉`. A small
/// slack absorbs rounding in `1 - level`.
pub fn removal_budget(level: f64, total: usize) -> usize {
    let exact = (1.0 - level) * total as f64;
    (exact - 1e-9).ceil().max(0.0) as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelResult {
    pub fidelity: f64,
    /// Mean over events of `1 - removed / total`.
    pub sparsity: f64,
}

/// Fidelity when each event loses at most [`removal_budget`] identified
/// elements, taken in descending attribution order.
pub fn fidelity_at_sparsity<T: Scalar>(
    model: &BiGcnModel<T>,
    events: &[PropagationEvent],
    explanations: &[Explanation<T>],
    threshold: f64,
    level: f64,
) -> Result<LevelResult> {
    check_level(level)?;
    check_pairs(events, explanations)?;
    let mut changed = 0usize;
    let mut sparsity_sum = 0.0;
    for (event, ex) in events.iter().zip(explanations) {
        let total = element_count(ex, event);
        let mut removed = identified_elements(ex, threshold);
        removed.truncate(removal_budget(level, total));
        sparsity_sum += 1.0 - removed.len() as f64 / total as f64;
        changed += usize::from(prediction_changes(model, event, &removed)?);
    }
    let n = events.len() as f64;
    Ok(LevelResult {
        fidelity: changed as f64 / n,
        sparsity: sparsity_sum / n,
    })
}

/// Explains every event for its predicted class, in input order, on
/// `jobs` worker threads.
pub fn explain_all<T: Scalar>(
    explainer: &Explainer<'_, T>,
    events: &[PropagationEvent],
    method: Method,
    jobs: usize,
) -> Result<Vec<Explanation<T>>> {
    with_jobs(jobs, || {
        events
            .par_iter()
            .map(|e| explainer.explain(e, method, None))
            .collect::<Result<Vec<_>>>()
    })?
}

/// Runs `f` on a dedicated pool of `jobs` threads (the global pool for 0).
pub fn with_jobs<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    Ok(pool.install(f))
}

/// A trained model with the events it is evaluated on.
pub struct Split<'a, T = f64> {
    pub model: &'a BiGcnModel<T>,
    pub events: &'a [PropagationEvent],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub level: f64,
    pub fidelity_mean: f64,
    pub fidelity_std: f64,
    /// Achieved sparsity, averaged over splits.
    pub sparsity: f64,
    /// `fidelity_mean * sparsity`.
    pub fid_sparsity: f64,
    pub per_split: Vec<f64>,
}

/// Metrics with every identified element removed (no sparsity cap).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unconstrained {
    pub fidelity_mean: f64,
    pub fidelity_std: f64,
    pub sparsity: f64,
    pub fid_sparsity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodCurve {
    pub method: Method,
    pub dataset: String,
    pub unconstrained: Unconstrained,
    pub points: Vec<CurvePoint>,
}

/// Wall-clock cost of explanation, kept apart from the deterministic report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub method: Method,
    pub events: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub splits: usize,
    pub curves: Vec<MethodCurve>,
    #[serde(skip)]
    pub runtime: Vec<RuntimeStats>,
}

pub const CSV_HEADER: &str =
    "method,dataset,sparsity,fidelity_mean,fidelity_std,fid_sparsity,level";

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn curve(&self, method: Method) -> Option<&MethodCurve> {
        self.curves.iter().find(|c| c.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for c in &self.curves {
            for p in &c.points {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    c.method,
                    c.dataset,
                    p.sparsity,
                    p.fidelity_mean,
                    p.fidelity_std,
                    p.fid_sparsity,
                    p.level
                );
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Evaluates every method at every grid level on every split, then
/// averages over splits (population standard deviation).
pub fn sweep<T: Scalar>(
    splits: &[Split<'_, T>],
    dataset: &str,
    config: &EvalConfig,
    jobs: usize,
) -> Result<EvalReport> {
    config.validate()?;
    if splits.is_empty() {
        return Err(Error::Input("sweep needs at least one split".into()));
    }
    let eps = Epsilon::new(T::of(config.epsilon))?;
    let mut curves = Vec::new();
    let mut runtime = Vec::new();
    for &method in &config.methods {
        let mut per_level: Vec<Vec<LevelResult>> = vec![Vec::new(); config.sparsity_levels.len()];
        let mut full_fid = Vec::new();
        let mut full_sparsity = Vec::new();
        let mut seconds = 0.0;
        let mut n_events = 0;
        for split in splits {
            let explainer = Explainer::new(split.model, eps, config.backward_mode);
            let start = Instant::now();
            let explanations = explain_all(&explainer, split.events, method, jobs)?;
            seconds += start.elapsed().as_secs_f64();
            n_events += split.events.len();

            full_fid.push(fidelity(
                split.model,
                split.events,
                &explanations,
                config.threshold,
            )?);
            let s: f64 = split
                .events
                .iter()
                .zip(&explanations)
                .map(|(e, x)| sparsity(x, e, config.threshold))
                .sum();
            full_sparsity.push(s / split.events.len() as f64);

            let results: Vec<Result<LevelResult>> = with_jobs(jobs, || {
                config
                    .sparsity_levels
                    .par_iter()
                    .map(|&level| {
                        fidelity_at_sparsity(
                            split.model,
                            split.events,
                            &explanations,
                            config.threshold,
                            level,
                        )
                    })
                    .collect()
            })?;
            for (slot, r) in per_level.iter_mut().zip(results) {
                slot.push(r?);
            }
        }
        let points = config
            .sparsity_levels
            .iter()
            .zip(&per_level)
            .map(|(&level, rs)| {
                let per_split: Vec<f64> = rs.iter().map(|r| r.fidelity).collect();
                let (fidelity_mean, fidelity_std) = mean_std(&per_split);
                let sparsity = rs.iter().map(|r| r.sparsity).sum::<f64>() / rs.len() as f64;
                CurvePoint {
                    level,
                    fidelity_mean,
                    fidelity_std,
                    sparsity,
                    fid_sparsity: fidelity_mean * sparsity,
                    per_split,
                }
            })
            .collect();
        let (fidelity_mean, fidelity_std) = mean_std(&full_fid);
        let sparsity_mean = full_sparsity.iter().sum::<f64>() / full_sparsity.len() as f64;
        curves.push(MethodCurve {
            method,
            dataset: dataset.to_owned(),
            unconstrained: Unconstrained {
                fidelity_mean,
                fidelity_std,
                sparsity: sparsity_mean,
                fid_sparsity: fidelity_mean * sparsity_mean,
            },
            points,
        });
        runtime.push(RuntimeStats {
            method,
            events: n_events,
            seconds,
        });
    }
    Ok(EvalReport {
        threshold: config.threshold,
        splits: splits.len(),
        curves,
        runtime,
    })
}
