//! Generative label rectification: prompt grammar, completion parsing,
//! chunked inference, and training-corpus construction.
//!
//! Grammar (`rect-v1`):
//!
//! ```text
//! Demonstration 1: <labeled render>
//! Demonstration 2: <labeled render>
//! Corrected labels:
//! ```
//!
//! The completion is ` l1, l2, ..., lK` followed by a newline.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::ModelBackend;
use crate::corpus::{Dataset, Example, TaskTemplate};
use crate::error::{Error, Result};
use crate::noise::{check_rate, corrupt_examples};
use crate::retrieval::Retriever;
use crate::seed;

pub const GRAMMAR_VERSION: &str = "rect-v1";
pub const TRAILER: &str = "Corrected labels:";
pub const DEFAULT_CHUNK_SIZE: usize = 10;
pub const DEFAULT_CORPUS_RATES: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

fn demo_header() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^Demonstration (\d+): ").expect("valid regex"))
}

/// Labels joined with `", "` cannot be parsed back if a label holds a comma.
pub fn check_label_space(template: &TaskTemplate) -> Result<()> {
    if let Some(bad) = template
        .label_space()
        .labels()
        .iter()
        .find(|l| l.contains(',') || l.contains('\n') || l.trim() != l.as_str())
    {
        return Err(Error::Config(format!(
            "label `{bad}` cannot be used in rectifier completions"
        )));
    }
    Ok(())
}

/// Prompt from label-free inputs and the labels to display next to them.
pub fn prompt_from_parts(template: &TaskTemplate, inputs: &[String], labels: &[usize]) -> String {
    assert_eq!(inputs.len(), labels.len(), "one label per input");
    let mut out = String::new();
    for (k, (input, &label)) in inputs.iter().zip(labels).enumerate() {
        out.push_str(&format!(
            "Demonstration {}: {}{}\n",
            k + 1,
            input,
            template.candidate(label)
        ));
    }
    out.push_str(TRAILER);
    out
}

pub fn build_rectifier_prompt(template: &TaskTemplate, demos: &[Example]) -> String {
    let inputs: Vec<String> = demos.iter().map(|d| template.render_label_free(d)).collect();
    let labels: Vec<usize> = demos.iter().map(|d| d.label_index).collect();
    prompt_from_parts(template, &inputs, &labels)
}

/// Labeled demonstration blocks of a rectifier prompt, in order.
pub fn parse_rectifier_prompt(prompt: &str) -> Result<Vec<&str>> {
    let body = prompt
        .strip_suffix(TRAILER)
        .ok_or_else(|| Error::PromptParse(format!("rectifier prompt must end with `{TRAILER}`")))?;
    let headers: Vec<_> = demo_header().captures_iter(body).collect();
    if headers.is_empty() {
        return if body.is_empty() {
            Ok(Vec::new())
        } else {
            Err(Error::PromptParse("no `Demonstration k:` lines".into()))
        };
    }
    let mut blocks = Vec::with_capacity(headers.len());
    for (i, cap) in headers.iter().enumerate() {
        let whole = cap.get(0).expect("match");
        if i == 0 && whole.start() != 0 {
            return Err(Error::PromptParse("text before the first demonstration".into()));
        }
        if cap[1].parse::<usize>().ok() != Some(i + 1) {
            return Err(Error::PromptParse(format!(
                "demonstration {} is numbered {}",
                i + 1,
                &cap[1]
            )));
        }
        let end = headers
            .get(i + 1)
            .map(|next| next.get(0).expect("match").start())
            .unwrap_or(body.len());
        let block = body[whole.end()..end]
            .strip_suffix('\n')
            .ok_or_else(|| Error::PromptParse(format!("demonstration {} is not newline-terminated", i + 1)))?;
        blocks.push(block);
    }
    Ok(blocks)
}

pub fn canonical_completion(template: &TaskTemplate, labels: &[usize]) -> String {
    let names: Vec<&str> = labels.iter().map(|&l| template.label_space().label(l)).collect();
    format!(" {}\n", names.join(", "))
}

/// Per-position parse of a completion; `None` where the text is not a label.
/// Only the first non-empty line is read.
pub fn parse_completion(template: &TaskTemplate, text: &str, k: usize) -> Vec<Option<usize>> {
    let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let items: Vec<&str> = line.split(',').map(str::trim).collect();
    (0..k)
        .map(|i| items.get(i).and_then(|s| template.label_space().index_of(s).ok()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectificationResult {
    pub corrected: Vec<usize>,
    /// Positions where the completion was unusable and the input label was kept.
    pub parse_fallbacks: BTreeSet<usize>,
}

impl RectificationResult {
    /// Copies of `demos` carrying the corrected labels.
    pub fn apply(&self, demos: &[Example]) -> Vec<Example> {
        demos
            .iter()
            .zip(&self.corrected)
            .map(|(d, &l)| d.with_label(l))
            .collect()
    }
}

/// Upper bound on generated tokens for `k` labels.
fn token_budget(template: &TaskTemplate, k: usize) -> usize {
    let longest = template
        .label_space()
        .labels()
        .iter()
        .map(|l| l.chars().count())
        .max()
        .unwrap_or(1);
    k * (longest + 2) + 8
}

/// Rectifies demo labels in chunks of `chunk_size`, one generation per chunk.
pub fn rectify(
    backend: &dyn ModelBackend,
    template: &TaskTemplate,
    demos: &[Example],
    chunk_size: usize,
    strict: bool,
) -> Result<RectificationResult> {
    if chunk_size == 0 {
        return Err(Error::Config("rectifier chunk size must be at least 1".into()));
    }
    check_label_space(template)?;
    let stop = vec!["\n".to_string()];
    let mut corrected = Vec::with_capacity(demos.len());
    let mut parse_fallbacks = BTreeSet::new();
    for (c, chunk) in demos.chunks(chunk_size).enumerate() {
        let prompt = build_rectifier_prompt(template, chunk);
        let text = backend
            .generate(&prompt, token_budget(template, chunk.len()), &stop)
            .map_err(|e| Error::RectifierChunk {
                chunk: c,
                source: Box::new(e),
            })?;
        for (i, (parsed, demo)) in parse_completion(template, &text, chunk.len())
            .into_iter()
            .zip(chunk)
            .enumerate()
        {
            let position = c * chunk_size + i;
            match parsed {
                Some(label) => corrected.push(label),
                None if strict => {
                    return Err(Error::StrictParse {
                        position,
                        completion: text,
                    })
                }
                None => {
                    corrected.push(demo.label_index);
                    parse_fallbacks.insert(position);
                }
            }
        }
    }
    if parse_fallbacks.len() * 2 > demos.len() {
        return Err(Error::SystematicParseFailure {
            fallbacks: parse_fallbacks.len(),
            total: demos.len(),
        });
    }
    if !parse_fallbacks.is_empty() {
        log::warn!(
            "rectifier kept input labels at {} of {} positions",
            parse_fallbacks.len(),
            demos.len()
        );
    }
    Ok(RectificationResult {
        corrected,
        parse_fallbacks,
    })
}

/// One training example for the rectifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectifierRecord {
    pub query_id: String,
    /// Label-free renders of the retrieved demonstrations.
    pub inputs: Vec<String>,
    pub noisy_labels: Vec<usize>,
    pub clean_labels: Vec<usize>,
    pub noise_rate_used: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub prompt: String,
    pub completion: String,
}

impl RectifierRecord {
    pub fn to_pair(&self, template: &TaskTemplate) -> TrainingPair {
        TrainingPair {
            prompt: prompt_from_parts(template, &self.inputs, &self.noisy_labels),
            completion: canonical_completion(template, &self.clean_labels),
        }
    }
}

/// For each clean example: retrieve `n` other clean demos, corrupt them at a
/// rate drawn from `rates`, and pair the noisy prompt with the clean labels.
pub fn build_training_corpus(
    clean: &Dataset,
    retriever: &dyn Retriever,
    n: usize,
    rates: &[f64],
    seed: u64,
) -> Result<Vec<RectifierRecord>> {
    if rates.is_empty() {
        return Err(Error::Config("rectifier corpus needs at least one noise rate".into()));
    }
    for &r in rates {
        check_rate(r)?;
    }
    let available = clean.len().saturating_sub(1);
    if available < n {
        return Err(Error::NotEnoughCandidates {
            requested: n,
            available,
        });
    }
    let template = clean.template();
    let m = template.label_space().len();
    clean
        .examples()
        .par_iter()
        .map(|query| {
            let exclude: HashSet<String> = [query.id.clone()].into_iter().collect();
            let ids = retriever.retrieve(&template.render_label_free(query), n, &exclude)?;
            let demos = ids
                .iter()
                .map(|id| clean.get(id).cloned().ok_or_else(|| Error::UnknownId(id.clone())))
                .collect::<Result<Vec<_>>>()?;
            let mut rng = seed::stream(seed, &format!("rect-corpus/{}", query.id));
            let rate = rates[rand::Rng::gen_range(&mut rng, 0..rates.len())];
            let (noisy, _) = corrupt_examples(&demos, m, rate, &mut rng)?;
            Ok(RectifierRecord {
                query_id: query.id.clone(),
                inputs: demos.iter().map(|d| template.render_label_free(d)).collect(),
                noisy_labels: noisy.iter().map(|d| d.label_index).collect(),
                clean_labels: demos.iter().map(|d| d.label_index).collect(),
                noise_rate_used: rate,
            })
        })
        .collect()
}

/// Writes `{prompt, completion}` JSONL.
pub fn write_training_corpus(path: &Path, template: &TaskTemplate, records: &[RectifierRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(&r.to_pair(template))
            .map_err(|e| Error::json("serializing training pair", e))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// `(1 / NK) * sum 1(y == y_hat)` over N prompts of K demonstrations.
pub fn rectification_accuracy<T: PartialEq>(gold: &[Vec<T>], predicted: &[Vec<T>]) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::Shape("no prompts to score".into()));
    }
    if gold.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "{} gold rows but {} predicted rows",
            gold.len(),
            predicted.len()
        )));
    }
    let k = gold[0].len();
    if k == 0 {
        return Err(Error::Shape("prompts have no demonstrations".into()));
    }
    let mut hits = 0usize;
    for (i, (g, p)) in gold.iter().zip(predicted).enumerate() {
        if g.len() != k || p.len() != k {
            return Err(Error::Shape(format!(
                "row {i} has {} gold and {} predicted labels, expected {k}",
                g.len(),
                p.len()
            )));
        }
        hits += g.iter().zip(p).filter(|(a, b)| a == b).count();
    }
    Ok(hits as f64 / (gold.len() * k) as f64)
}
