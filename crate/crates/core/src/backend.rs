//! Model backends: continuation scoring and text generation.
//!
//! `score` returns a log-likelihood (higher is more likely); decoding picks
//! the candidate with the largest score, i.e. the smallest NLL.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{Dataset, TaskTemplate};
use crate::error::{Error, Result};
use crate::http::{HttpSettings, JsonClient};
use crate::rectifier;
use crate::seed::{stable_hash64, unit_interval};

pub trait ModelBackend: Send + Sync {
    /// Log-likelihood of `continuation` following `prompt`.
    fn score(&self, prompt: &str, continuation: &str) -> Result<f64>;

    /// Deterministic completion of `prompt`.
    fn generate(&self, prompt: &str, max_tokens: usize, stop: &[String]) -> Result<String>;
}

/// Backend selection as written in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackendSpec {
    HashMock,
    OracleMock {
        #[serde(default = "default_base")]
        base: f64,
        #[serde(default = "default_slope")]
        slope: f64,
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default = "default_zero_shot_s")]
        zero_shot_s: f64,
    },
    Http(HttpBackendSettings),
}

fn default_base() -> f64 {
    0.5
}
fn default_slope() -> f64 {
    0.5
}
fn default_rho() -> f64 {
    1.0
}
fn default_zero_shot_s() -> f64 {
    0.5
}

impl BackendSpec {
    pub fn oracle_default() -> Self {
        BackendSpec::OracleMock {
            base: default_base(),
            slope: default_slope(),
            rho: default_rho(),
            zero_shot_s: default_zero_shot_s(),
        }
    }
}

/// Pseudo-random scores from a hash of `(prompt, continuation)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashMock;

pub const HASH_MOCK_GENERATION: &str = "hash-mock";

pub fn hash_mock() -> HashMock {
    HashMock
}

impl ModelBackend for HashMock {
    fn score(&self, prompt: &str, continuation: &str) -> Result<f64> {
        let h = stable_hash64(&[b"hash-mock", prompt.as_bytes(), continuation.as_bytes()]);
        Ok(-10.0 + 10.0 * unit_interval(h))
    }

    fn generate(&self, _prompt: &str, _max_tokens: usize, _stop: &[String]) -> Result<String> {
        Ok(HASH_MOCK_GENERATION.to_string())
    }
}

/// `g(s) = base + slope * s`: probability that the model answers a query
/// correctly when a fraction `s` of its demonstrations is correct.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fidelity {
    base: f64,
    slope: f64,
}

impl Fidelity {
    pub fn linear(base: f64, slope: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&base) || slope < 0.0 || base + slope > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "fidelity g(s) = {base} + {slope}*s must be nondecreasing and stay in [0, 1]"
            )));
        }
        Ok(Self { base, slope })
    }

    pub fn at(&self, s: f64) -> f64 {
        (self.base + self.slope * s).clamp(0.0, 1.0)
    }
}

impl Default for Fidelity {
    fn default() -> Self {
        Self {
            base: 0.5,
            slope: 0.5,
        }
    }
}

/// Ground truth for the oracle mock, keyed by label-free render.
#[derive(Debug, Clone)]
pub struct OracleWorld {
    template: Arc<TaskTemplate>,
    truth: HashMap<String, usize>,
    fidelity: Fidelity,
    /// Per-demonstration probability that the rectifier emits the truth.
    rho: f64,
    /// Demonstration-correctness fraction assumed for zero-shot prompts.
    zero_shot_s: f64,
}

impl OracleWorld {
    pub fn new(template: Arc<TaskTemplate>, truth: HashMap<String, usize>) -> Self {
        Self {
            template,
            truth,
            fidelity: Fidelity::default(),
            rho: 1.0,
            zero_shot_s: default_zero_shot_s(),
        }
    }

    /// Truth from the (clean) labels of every example in `datasets`.
    pub fn from_datasets(template: Arc<TaskTemplate>, datasets: &[&Dataset]) -> Result<Self> {
        let mut truth = HashMap::new();
        for ds in datasets {
            for ex in ds.examples() {
                let key = template.render_label_free(ex);
                if let Some(prev) = truth.insert(key.clone(), ex.label_index) {
                    if prev != ex.label_index {
                        return Err(Error::Config(format!(
                            "oracle world: text `{key}` appears with conflicting labels"
                        )));
                    }
                }
            }
        }
        Ok(Self::new(template, truth))
    }

    pub fn with_fidelity(mut self, fidelity: Fidelity) -> Self {
        self.fidelity = fidelity;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::OutOfRange {
                name: "rectifier fidelity rho",
                value: rho,
                range: "[0, 1]",
            });
        }
        self.rho = rho;
        Ok(self)
    }

    pub fn with_zero_shot_s(mut self, s: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::OutOfRange {
                name: "zero-shot s",
                value: s,
                range: "[0, 1]",
            });
        }
        self.zero_shot_s = s;
        Ok(self)
    }

    pub fn fidelity(&self) -> Fidelity {
        self.fidelity
    }

    pub fn truth_of(&self, label_free: &str) -> Result<usize> {
        self.truth
            .get(label_free)
            .copied()
            .ok_or_else(|| Error::OracleUnknown(label_free.to_string()))
    }

    /// Splits a labeled demonstration block (possibly followed by a tag)
    /// into its known label-free render and the label shown.
    pub fn parse_demo<'a>(&self, block: &'a str) -> Result<(&'a str, usize)> {
        for idx in 0..self.template.label_space().len() {
            let candidate = self.template.candidate(idx);
            for (pos, _) in block.match_indices(&candidate) {
                let head = &block[..pos];
                if self.truth.contains_key(head) {
                    return Ok((head, idx));
                }
            }
        }
        Err(Error::PromptParse(format!(
            "no known demonstration in block `{block}`"
        )))
    }

    /// A fixed wrong label for `key`, chosen uniformly among the others.
    fn wrong_label(&self, key: &str, salt: &[u8], truth: usize) -> usize {
        let m = self.template.label_space().len();
        let k = (stable_hash64(&[salt, key.as_bytes()]) % (m as u64 - 1)) as usize;
        if k >= truth {
            k + 1
        } else {
            k
        }
    }

    /// The label the mock model commits to for `query` given demo
    /// correctness fraction `s`.
    pub fn intended_answer(&self, query: &str, s: f64) -> Result<usize> {
        let truth = self.truth_of(query)?;
        let u = unit_interval(stable_hash64(&[b"oracle-u", query.as_bytes()]));
        Ok(if u < self.fidelity.at(s) {
            truth
        } else {
            self.wrong_label(query, b"oracle-wrong", truth)
        })
    }

    /// What the mock rectifier emits for one demonstration.
    pub fn rectified_label(&self, label_free: &str) -> Result<usize> {
        let truth = self.truth_of(label_free)?;
        let v = unit_interval(stable_hash64(&[b"oracle-rho", label_free.as_bytes()]));
        Ok(if v < self.rho {
            truth
        } else {
            self.wrong_label(label_free, b"oracle-rect-wrong", truth)
        })
    }
}

type DemoJudge = dyn Fn(&str, usize) -> Result<bool> + Send + Sync;

/// Deterministic stand-in for an LLM whose accuracy depends on how many of
/// its demonstrations carry correct labels.
#[derive(Clone)]
pub struct OracleMock {
    world: Arc<OracleWorld>,
    judge: Arc<DemoJudge>,
}

/// Oracle mock judging demonstrations against the world's truth.
pub fn oracle_mock(world: Arc<OracleWorld>) -> OracleMock {
    let w = Arc::clone(&world);
    OracleMock {
        world,
        judge: Arc::new(move |label_free, label| Ok(w.truth_of(label_free)? == label)),
    }
}

impl OracleMock {
    /// Replaces the correctness judge; it receives each demo's label-free
    /// render and displayed label.
    pub fn with_judge<F>(mut self, judge: F) -> Self
    where
        F: Fn(&str, usize) -> Result<bool> + Send + Sync + 'static,
    {
        self.judge = Arc::new(judge);
        self
    }

    pub fn world(&self) -> &OracleWorld {
        &self.world
    }

    /// Fraction of demonstrations in a classification prompt judged correct,
    /// and the label-free query.
    pub fn analyze<'a>(&self, prompt: &'a str) -> Result<(f64, &'a str)> {
        let sep = self.world.template.demo_separator();
        let blocks: Vec<&str> = prompt.split(sep).collect();
        let (query, demos) = blocks.split_last().expect("split yields at least one block");
        if demos.is_empty() {
            return Ok((self.world.zero_shot_s, query));
        }
        let mut correct = 0usize;
        for block in demos {
            let (label_free, label) = self.world.parse_demo(block)?;
            if (self.judge)(label_free, label)? {
                correct += 1;
            }
        }
        Ok((correct as f64 / demos.len() as f64, query))
    }
}

impl ModelBackend for OracleMock {
    fn score(&self, prompt: &str, continuation: &str) -> Result<f64> {
        let (s, query) = self.analyze(prompt)?;
        let intended = self.world.intended_answer(query, s)?;
        Ok(if continuation == self.world.template.candidate(intended) {
            0.0
        } else {
            -1.0
        })
    }

    fn generate(&self, prompt: &str, _max_tokens: usize, _stop: &[String]) -> Result<String> {
        let blocks = rectifier::parse_rectifier_prompt(prompt)?;
        let labels = blocks
            .iter()
            .map(|block| {
                let (label_free, _) = self.world.parse_demo(block)?;
                self.world.rectified_label(label_free)
            })
            .collect::<Result<Vec<_>>>()?;
        let completion = rectifier::canonical_completion(&self.world.template, &labels);
        Ok(completion.trim_end_matches('\n').to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpBackendSettings {
    pub model: String,
    #[serde(default)]
    pub max_prompt_chars: Option<usize>,
    #[serde(default = "default_logprobs")]
    pub logprobs: u32,
    #[serde(flatten)]
    pub http: HttpSettings,
}

fn default_logprobs() -> u32 {
    1
}

impl HttpBackendSettings {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            max_prompt_chars: None,
            logprobs: default_logprobs(),
            http: HttpSettings::new(endpoint),
        }
    }
}

/// OpenAI-style completions endpoint. Scoring echoes `prompt + continuation`
/// with token log-probabilities and sums the continuation's span.
pub struct HttpBackend {
    client: JsonClient,
    model: String,
    max_prompt_chars: Option<usize>,
    logprobs: u32,
}

const COMPLETIONS: &str = "/v1/completions";

pub fn http_backend(settings: &HttpBackendSettings) -> Result<HttpBackend> {
    Ok(HttpBackend {
        client: JsonClient::new(&settings.http)?,
        model: settings.model.clone(),
        max_prompt_chars: settings.max_prompt_chars,
        logprobs: settings.logprobs.max(1),
    })
}

impl HttpBackend {
    fn check_length(&self, text: &str) -> Result<()> {
        if let Some(limit) = self.max_prompt_chars {
            let chars = text.chars().count();
            if chars > limit {
                return Err(Error::PromptTooLong { chars, limit });
            }
        }
        Ok(())
    }

    fn protocol(&self, reason: impl Into<String>) -> Error {
        Error::Protocol {
            endpoint: self.client.url(COMPLETIONS),
            reason: reason.into(),
        }
    }
}

/// Sums echoed token log-probabilities over the characters
/// `[start, end)` of the echoed text. Offsets are character offsets.
pub fn sum_span_logprobs(logprobs: &Value, start: usize, end: usize) -> std::result::Result<f64, SpanError> {
    let offsets = logprobs
        .get("text_offset")
        .and_then(Value::as_array)
        .ok_or(SpanError::Missing("text_offset"))?;
    let values = logprobs
        .get("token_logprobs")
        .and_then(Value::as_array)
        .ok_or(SpanError::Missing("token_logprobs"))?;
    if offsets.len() != values.len() {
        return Err(SpanError::Missing("aligned text_offset/token_logprobs"));
    }
    let offsets: Vec<usize> = offsets
        .iter()
        .map(|v| v.as_u64().map(|o| o as usize))
        .collect::<Option<_>>()
        .ok_or(SpanError::Missing("integer text_offset"))?;
    if !offsets.contains(&start) {
        return Err(SpanError::Misaligned(start));
    }
    let mut total = 0.0;
    for (offset, value) in offsets.iter().zip(values) {
        if *offset >= start && *offset < end {
            total += value.as_f64().ok_or(SpanError::Missing("continuation log-probability"))?;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpanError {
    Missing(&'static str),
    Misaligned(usize),
}

impl ModelBackend for HttpBackend {
    fn score(&self, prompt: &str, continuation: &str) -> Result<f64> {
        if continuation.is_empty() {
            return Ok(0.0);
        }
        let full = format!("{prompt}{continuation}");
        self.check_length(&full)?;
        let body = json!({
            "model": self.model,
            "prompt": full,
            "max_tokens": 1,
            "temperature": 0,
            "logprobs": self.logprobs,
            "echo": true,
        });
        let response = self.client.post(COMPLETIONS, &body)?;
        let logprobs = response
            .pointer("/choices/0/logprobs")
            .filter(|v| !v.is_null())
            .ok_or_else(|| self.protocol("response has no choices[0].logprobs"))?;
        let start = prompt.chars().count();
        let end = start + continuation.chars().count();
        match sum_span_logprobs(logprobs, start, end) {
            Ok(total) if total.is_finite() => Ok(total),
            Ok(total) => Err(self.protocol(format!("non-finite log-likelihood {total}"))),
            Err(SpanError::Missing(what)) => Err(self.protocol(format!("missing {what}"))),
            Err(SpanError::Misaligned(offset)) => Err(Error::TokenAlignment { offset }),
        }
    }

    fn generate(&self, prompt: &str, max_tokens: usize, stop: &[String]) -> Result<String> {
        self.check_length(prompt)?;
        let body = json!({
            "model": self.model,
            "prompt": prompt,
            "max_tokens": max_tokens,
            "temperature": 0,
            "stop": stop,
        });
        let response = self.client.post(COMPLETIONS, &body)?;
        response
            .pointer("/choices/0/text")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| self.protocol("response has no choices[0].text"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{render_prompt, Example};
    use std::collections::HashSet;

    #[test]
    fn hash_mock_is_pure_and_bounded() {
        let m = hash_mock();
        let a = m.score("prompt", " Yes").unwrap();
        assert_eq!(a, m.score("prompt", " Yes").unwrap());
        let mut seen = HashSet::new();
        for i in 0..1000 {
            let s = m.score("fixed prompt", &format!(" candidate {i}")).unwrap();
            assert!((-10.0..0.0).contains(&s));
            assert!(seen.insert(s.to_bits()), "collision at {i}");
        }
        assert_eq!(m.generate("x", 5, &[]).unwrap(), HASH_MOCK_GENERATION);
    }

    #[test]
    fn fidelity_validation() {
        assert!(Fidelity::linear(0.5, 0.5).is_ok());
        assert!(Fidelity::linear(0.5, 0.6).is_err());
        assert!(Fidelity::linear(0.5, -0.1).is_err());
        assert_eq!(Fidelity::default().at(1.0), 1.0);
        assert_eq!(Fidelity::default().at(0.0), 0.5);
    }

    fn world() -> (Arc<TaskTemplate>, Vec<Example>, Arc<OracleWorld>) {
        let t = Arc::new(TaskTemplate::tweet());
        let examples: Vec<Example> = (0..50)
            .map(|i| Example::new(format!("{i:03}"), [("question", format!("text number {i}"))], i % 2))
            .collect();
        let ds = Dataset::new(t.clone(), examples.clone()).unwrap();
        let w = Arc::new(OracleWorld::from_datasets(t.clone(), &[&ds]).unwrap());
        (t, examples, w)
    }

    #[test]
    fn oracle_prefers_truth_when_demos_are_correct() {
        let (t, ex, w) = world();
        let mock = oracle_mock(w);
        let demos = &ex[..4];
        for q in &ex[10..30] {
            let prompt = render_prompt(&t, demos, q);
            let yes = mock.score(&prompt, &t.candidate(q.label_index)).unwrap();
            let no = mock.score(&prompt, &t.candidate(1 - q.label_index)).unwrap();
            assert_eq!((yes, no), (0.0, -1.0));
        }
    }

    #[test]
    fn oracle_analysis_counts_correct_demos() {
        let (t, ex, w) = world();
        let mock = oracle_mock(w);
        let mut demos = ex[..4].to_vec();
        demos[0].label_index = 1 - demos[0].label_index;
        let prompt = render_prompt(&t, &demos, &ex[20]);
        let (s, query) = mock.analyze(&prompt).unwrap();
        assert_eq!(s, 0.75);
        assert_eq!(query, t.render_label_free(&ex[20]));

        let tagged = format!(
            "{} (confidence: low){}{}",
            t.render_labeled(&demos[0]),
            t.demo_separator(),
            t.render_label_free(&ex[20])
        );
        assert_eq!(mock.analyze(&tagged).unwrap().0, 0.0);
    }

    #[test]
    fn oracle_unknown_query_errors() {
        let (t, ex, w) = world();
        let mock = oracle_mock(w);
        let stranger = Example::new("zz", [("question", "never seen")], 0);
        let prompt = render_prompt(&t, &ex[..2], &stranger);
        assert!(matches!(mock.score(&prompt, " No"), Err(Error::OracleUnknown(_))));
    }

    #[test]
    fn oracle_accuracy_is_monotone_in_s() {
        let (t, ex, w) = world();
        let queries = &ex[10..50];
        let mut last = -1.0;
        for wrong in (0..=4).rev() {
            let mut demos = ex[..4].to_vec();
            for d in demos.iter_mut().take(wrong) {
                d.label_index = 1 - d.label_index;
            }
            let mock = oracle_mock(w.clone());
            let correct = queries
                .iter()
                .filter(|q| {
                    let prompt = render_prompt(&t, &demos, q);
                    mock.score(&prompt, &t.candidate(q.label_index)).unwrap() == 0.0
                })
                .count();
            let acc = correct as f64 / queries.len() as f64;
            assert!(acc >= last, "accuracy dropped to {acc} from {last}");
            last = acc;
        }
        assert_eq!(last, 1.0);
    }

    #[test]
    fn custom_judge_overrides_truth() {
        let (t, ex, w) = world();
        let mock = oracle_mock(w).with_judge(|_, _| Ok(false));
        let prompt = render_prompt(&t, &ex[..3], &ex[30]);
        assert_eq!(mock.analyze(&prompt).unwrap().0, 0.0);
    }

    #[test]
    fn span_logprob_summation() {
        let lp = json!({
            "tokens": ["Hello", " world", " Yes", "!"],
            "token_logprobs": [null, -1.0, -0.5, -3.0],
            "text_offset": [0, 5, 11, 15]
        });
        assert_eq!(sum_span_logprobs(&lp, 11, 15), Ok(-0.5));
        assert_eq!(sum_span_logprobs(&lp, 5, 15), Ok(-1.5));
        assert_eq!(sum_span_logprobs(&lp, 12, 15), Err(SpanError::Misaligned(12)));
        assert!(matches!(sum_span_logprobs(&lp, 0, 5), Err(SpanError::Missing(_))));
        assert!(matches!(sum_span_logprobs(&json!({}), 0, 1), Err(SpanError::Missing(_))));
    }

    #[test]
    fn backend_spec_parsing() {
        let spec: BackendSpec = toml::from_str("kind = \"oracle-mock\"").unwrap();
        assert_eq!(spec, BackendSpec::oracle_default());
        let spec: BackendSpec =
            toml::from_str("kind = \"http\"\nendpoint = \"http://x\"\nmodel = \"m\"").unwrap();
        match spec {
            BackendSpec::Http(s) => {
                assert_eq!(s.model, "m");
                assert_eq!(s.http.max_retries, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
