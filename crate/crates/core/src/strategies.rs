//! Confidence-driven demonstration manipulation applied before prompt
//! rendering.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confidence::{label_confidence, ConfidenceEstimate, ConfidenceEstimator};
use crate::corpus::{Example, TaskTemplate};
use crate::error::{Error, Result};

pub const DEFAULT_TAG_FORMAT: &str = " (confidence: {tag})";
pub const DEFAULT_HIGH_THRESHOLD: f64 = 0.5;
pub const DEFAULT_THETA: f64 = 0.3;
pub const HIGH_TAG: &str = "high";
pub const LOW_TAG: &str = "low";

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedDemo {
    pub example: Example,
    /// Confidence in the demo's current label, once a strategy has asked.
    pub confidence: Option<f64>,
    pub verbal_tag: Option<String>,
}

impl AnnotatedDemo {
    pub fn new(example: Example) -> Self {
        Self {
            example,
            confidence: None,
            verbal_tag: None,
        }
    }
}

pub fn annotate(demos: Vec<Example>) -> Vec<AnnotatedDemo> {
    demos.into_iter().map(AnnotatedDemo::new).collect()
}

/// One manipulation step, as written in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Strategy {
    None,
    Correction,
    Weighting {
        #[serde(default = "default_threshold")]
        threshold: f64,
        #[serde(default = "default_tag_format")]
        tag_format: String,
    },
    Reordering,
    Selection {
        #[serde(default = "default_theta")]
        theta: f64,
        /// Refill dropped slots from deeper retrieval ranks.
        #[serde(default)]
        backfill: bool,
    },
    Rectification {
        #[serde(default = "default_chunk_size")]
        chunk_size: usize,
        #[serde(default)]
        strict: bool,
    },
}

fn default_threshold() -> f64 {
    DEFAULT_HIGH_THRESHOLD
}
fn default_tag_format() -> String {
    DEFAULT_TAG_FORMAT.into()
}
fn default_theta() -> f64 {
    DEFAULT_THETA
}
fn default_chunk_size() -> usize {
    10
}

impl Default for Strategy {
    fn default() -> Self {
        Strategy::None
    }
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Correction => "correction",
            Strategy::Weighting { .. } => "weighting",
            Strategy::Reordering => "reordering",
            Strategy::Selection { .. } => "selection",
            Strategy::Rectification { .. } => "rectification",
        }
    }

    /// Parses a bare name with default parameters.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "none" => Strategy::None,
            "correction" => Strategy::Correction,
            "weighting" => Strategy::Weighting {
                threshold: default_threshold(),
                tag_format: default_tag_format(),
            },
            "reordering" => Strategy::Reordering,
            "selection" => Strategy::Selection {
                theta: default_theta(),
                backfill: false,
            },
            "rectification" => Strategy::Rectification {
                chunk_size: default_chunk_size(),
                strict: false,
            },
            other => return Err(Error::Config(format!("unknown strategy `{other}`"))),
        })
    }

    pub fn needs_estimator(&self) -> bool {
        matches!(
            self,
            Strategy::Correction
                | Strategy::Weighting { .. }
                | Strategy::Reordering
                | Strategy::Selection { .. }
        )
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Strategy::Weighting {
                threshold,
                tag_format,
            } => {
                if !(*threshold > 0.0 && *threshold < 1.0) {
                    return Err(Error::OutOfRange {
                        name: "weighting threshold",
                        value: *threshold,
                        range: "(0, 1)",
                    });
                }
                if !tag_format.contains("{tag}") {
                    return Err(Error::Config("tag_format must contain `{tag}`".into()));
                }
            }
            Strategy::Selection { theta, .. } if !(0.0..=1.0).contains(theta) => {
                return Err(Error::OutOfRange {
                    name: "selection theta",
                    value: *theta,
                    range: "[0, 1]",
                });
            }
            Strategy::Rectification { chunk_size, .. } if *chunk_size == 0 => {
                return Err(Error::Config("chunk_size must be at least 1".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

fn estimate_all(
    demos: &[AnnotatedDemo],
    estimator: &dyn ConfidenceEstimator,
) -> Result<Vec<ConfidenceEstimate>> {
    demos
        .par_iter()
        .map(|d| {
            estimator.estimate(&d.example).map_err(|e| Error::Estimator {
                id: d.example.id.clone(),
                source: Box::new(e),
            })
        })
        .collect()
}

/// Fills `confidence` with the probability of each demo's current label.
pub fn score_demos(
    mut demos: Vec<AnnotatedDemo>,
    estimator: &dyn ConfidenceEstimator,
) -> Result<Vec<AnnotatedDemo>> {
    let estimates = estimate_all(&demos, estimator)?;
    for (demo, est) in demos.iter_mut().zip(&estimates) {
        demo.confidence = Some(label_confidence(est, demo.example.label_index));
    }
    Ok(demos)
}

pub fn apply_none(demos: Vec<AnnotatedDemo>) -> Vec<AnnotatedDemo> {
    demos
}

/// Overwrites every label with the estimator's argmax.
pub fn apply_correction(
    mut demos: Vec<AnnotatedDemo>,
    estimator: &dyn ConfidenceEstimator,
) -> Result<Vec<AnnotatedDemo>> {
    let estimates = estimate_all(&demos, estimator)?;
    for (demo, est) in demos.iter_mut().zip(&estimates) {
        let label = est.argmax();
        demo.example.label_index = label;
        demo.confidence = Some(label_confidence(est, label));
    }
    Ok(demos)
}

pub fn apply_weighting(
    demos: Vec<AnnotatedDemo>,
    estimator: &dyn ConfidenceEstimator,
    threshold: f64,
) -> Result<Vec<AnnotatedDemo>> {
    let mut demos = score_demos(demos, estimator)?;
    for demo in &mut demos {
        let c = demo.confidence.expect("scored");
        demo.verbal_tag = Some(if c >= threshold { HIGH_TAG } else { LOW_TAG }.to_string());
    }
    Ok(demos)
}

/// Stable ascending sort by confidence: least trusted first, most trusted
/// next to the query.
pub fn apply_reordering(
    demos: Vec<AnnotatedDemo>,
    estimator: &dyn ConfidenceEstimator,
) -> Result<Vec<AnnotatedDemo>> {
    let mut demos = score_demos(demos, estimator)?;
    demos.sort_by(|a, b| {
        a.confidence
            .expect("scored")
            .total_cmp(&b.confidence.expect("scored"))
    });
    Ok(demos)
}

/// Keeps demos whose label confidence is at least `theta`, in order.
pub fn apply_selection(
    demos: Vec<AnnotatedDemo>,
    estimator: &dyn ConfidenceEstimator,
    theta: f64,
) -> Result<Vec<AnnotatedDemo>> {
    let total = demos.len();
    let kept: Vec<AnnotatedDemo> = score_demos(demos, estimator)?
        .into_iter()
        .filter(|d| d.confidence.expect("scored") >= theta)
        .collect();
    if kept.is_empty() && total > 0 {
        log::warn!("selection dropped all {total} demonstrations; prompt is zero-shot");
    }
    Ok(kept)
}

/// Selection over a deeper candidate pool (ascending relevance): keeps the
/// `n` most relevant survivors, returned in ascending relevance.
pub fn apply_selection_backfill(
    pool: Vec<AnnotatedDemo>,
    estimator: &dyn ConfidenceEstimator,
    theta: f64,
    n: usize,
) -> Result<Vec<AnnotatedDemo>> {
    let survivors = apply_selection(pool, estimator, theta)?;
    let skip = survivors.len().saturating_sub(n);
    Ok(survivors.into_iter().skip(skip).collect())
}

/// Applies one non-generative strategy. Rectification needs a backend and is
/// handled by the rectifier module.
pub fn apply_strategy(
    strategy: &Strategy,
    demos: Vec<AnnotatedDemo>,
    estimator: Option<&dyn ConfidenceEstimator>,
) -> Result<Vec<AnnotatedDemo>> {
    let need = |s: &Strategy| {
        estimator.ok_or_else(|| Error::Config(format!("strategy `{}` needs an estimator", s.name())))
    };
    match strategy {
        Strategy::None => Ok(apply_none(demos)),
        Strategy::Correction => apply_correction(demos, need(strategy)?),
        Strategy::Weighting { threshold, .. } => apply_weighting(demos, need(strategy)?, *threshold),
        Strategy::Reordering => apply_reordering(demos, need(strategy)?),
        Strategy::Selection { theta, .. } => apply_selection(demos, need(strategy)?, *theta),
        Strategy::Rectification { .. } => Err(Error::Config(
            "rectification is applied through the rectifier".into(),
        )),
    }
}

/// Applies strategies left to right.
pub fn apply_pipeline(
    strategies: &[Strategy],
    mut demos: Vec<AnnotatedDemo>,
    estimator: Option<&dyn ConfidenceEstimator>,
) -> Result<Vec<AnnotatedDemo>> {
    for s in strategies {
        demos = apply_strategy(s, demos, estimator)?;
    }
    Ok(demos)
}

/// Labeled render plus the verbal tag, if any.
pub fn render_demo(template: &TaskTemplate, demo: &AnnotatedDemo, tag_format: &str) -> String {
    let mut out = template.render_labeled(&demo.example);
    if let Some(tag) = &demo.verbal_tag {
        out.push_str(&tag_format.replace("{tag}", tag));
    }
    out
}

/// Removes a trailing tag rendered with `tag_format`, returning the bare
/// render and the tag.
pub fn strip_tag<'a>(rendered: &'a str, tag_format: &str) -> Option<(&'a str, &'a str)> {
    let (before, after) = tag_format.split_once("{tag}")?;
    let body = rendered.strip_suffix(after)?;
    let start = body.rfind(before)?;
    Some((&rendered[..start], &body[start + before.len()..]))
}
