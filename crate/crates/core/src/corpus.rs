//! Datasets, label spaces and prompt templates.
//!
//! A [`TaskTemplate`] owns a pattern such as `{sentence} It is {label}`. The
//! label placeholder must close the pattern, so every rendered demonstration
//! splits into a label-free prefix, a candidate separator (the whitespace the
//! pattern puts before the label) and the verbalized label. Decoding scores
//! `separator + label` as a continuation of the label-free prompt.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Joiner between consecutive demonstration blocks in a prompt.
pub const DEFAULT_DEMO_SEPARATOR: &str = "\n\n";

/// Ordered candidate labels. Index `i` is the label's ordinal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSpace {
    labels: Vec<String>,
}

impl LabelSpace {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(Error::LabelSpace(format!(
                "need at least 2 labels, got {}",
                labels.len()
            )));
        }
        let mut seen = HashSet::new();
        for label in &labels {
            if label.is_empty() {
                return Err(Error::LabelSpace("empty label string".into()));
            }
            if !seen.insert(label.as_str()) {
                return Err(Error::LabelSpace(format!("duplicate label `{label}`")));
            }
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Panics on an out-of-range index; indices are validated at construction
    /// of every [`Example`] that reaches a template.
    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    /// Exact, case-sensitive lookup.
    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel {
                label: label.to_string(),
                expected: self.labels.clone(),
            })
    }
}

impl TryFrom<Vec<String>> for LabelSpace {
    type Error = Error;

    fn try_from(labels: Vec<String>) -> Result<Self> {
        LabelSpace::new(labels)
    }
}

impl From<LabelSpace> for Vec<String> {
    fn from(space: LabelSpace) -> Self {
        space.labels
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Field(String),
    Label,
}

fn parse_pattern(name: &str, pattern: &str) -> Result<Vec<Segment>> {
    let bad = |reason: String| Error::Template {
        template: name.to_string(),
        reason,
    };
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut chars = pattern.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                literal.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                literal.push('}');
            }
            '{' => {
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some(c) => name.push(c),
                        None => return Err(bad("unterminated placeholder".into())),
                    }
                }
                if name.is_empty() {
                    return Err(bad("empty placeholder `{}`".into()));
                }
                if !literal.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                segments.push(if name == "label" {
                    Segment::Label
                } else {
                    Segment::Field(name)
                });
            }
            '}' => return Err(bad("unmatched `}`".into())),
            c => literal.push(c),
        }
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    Ok(segments)
}

/// On-disk template definition (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub task_name: String,
    pub input_fields: Vec<String>,
    pub pattern: String,
    #[serde(default = "default_separator")]
    pub demo_separator: String,
    pub labels: Vec<String>,
}

fn default_separator() -> String {
    DEFAULT_DEMO_SEPARATOR.to_string()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskTemplate {
    task_name: String,
    input_fields: Vec<String>,
    pattern: String,
    demo_separator: String,
    label_space: LabelSpace,
    /// Everything before `{label}`, minus the trailing whitespace that moves
    /// into `candidate_prefix`.
    body: Vec<Segment>,
    candidate_prefix: String,
}

impl TaskTemplate {
    pub fn new(spec: TemplateSpec) -> Result<Self> {
        let TemplateSpec {
            task_name,
            input_fields,
            pattern,
            demo_separator,
            labels,
        } = spec;
        let bad = |reason: String| Error::Template {
            template: task_name.clone(),
            reason,
        };
        let label_space = LabelSpace::new(labels)?;
        let mut segments = parse_pattern(&task_name, &pattern)?;

        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seg in &segments {
            match seg {
                Segment::Field(f) => {
                    if !input_fields.contains(f) {
                        return Err(bad(format!("placeholder `{{{f}}}` is not an input field")));
                    }
                    *counts.entry(f.as_str()).or_default() += 1;
                }
                Segment::Label => *counts.entry("label").or_default() += 1,
                Segment::Literal(_) => {}
            }
        }
        if input_fields.iter().any(|f| f == "label" || f == "id") {
            return Err(bad("`label` and `id` are reserved field names".into()));
        }
        let unique: HashSet<&String> = input_fields.iter().collect();
        if unique.len() != input_fields.len() {
            return Err(bad("duplicate input field".into()));
        }
        for field in input_fields.iter().map(String::as_str).chain(["label"]) {
            match counts.get(field).copied().unwrap_or(0) {
                1 => {}
                n => return Err(bad(format!("`{{{field}}}` must appear exactly once, found {n}"))),
            }
        }
        if segments.last() != Some(&Segment::Label) {
            return Err(bad("`{label}` must end the pattern".into()));
        }
        segments.pop();

        let mut candidate_prefix = String::new();
        if let Some(Segment::Literal(last)) = segments.last_mut() {
            let trimmed = last.trim_end().len();
            candidate_prefix = last.split_off(trimmed);
            if last.is_empty() {
                segments.pop();
            }
        }

        Ok(Self {
            task_name,
            input_fields,
            pattern,
            demo_separator,
            label_space,
            body: segments,
            candidate_prefix,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: TemplateSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("template file: {e}")))?;
        Self::new(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Resolves a built-in name (`mrpc`, `sst5`, `tweet`) or a template file path.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match name_or_path.to_ascii_lowercase().as_str() {
            "mrpc" => Ok(Self::mrpc()),
            "sst5" | "sst-5" => Ok(Self::sst5()),
            "tweet" | "tweet-hate" => Ok(Self::tweet()),
            _ => {
                let path = Path::new(name_or_path);
                if path.exists() {
                    Self::from_file(path)
                } else {
                    Err(Error::Config(format!(
                        "unknown template `{name_or_path}` (built-ins: mrpc, sst5, tweet)"
                    )))
                }
            }
        }
    }

    fn builtin(name: &str, fields: &[&str], pattern: &str, labels: &[&str]) -> Self {
        Self::new(TemplateSpec {
            task_name: name.into(),
            input_fields: fields.iter().map(|s| s.to_string()).collect(),
            pattern: pattern.into(),
            demo_separator: default_separator(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
        })
        .expect("built-in template is valid")
    }

    /// Paraphrase detection: `{sentence1} Can we say "{sentence2}"? {No, Yes}`.
    pub fn mrpc() -> Self {
        Self::builtin(
            "mrpc",
            &["sentence1", "sentence2"],
            "{sentence1} Can we say \"{sentence2}\"? {label}",
            &["No", "Yes"],
        )
    }

    /// Five-way sentiment with single-word verbalizers.
    pub fn sst5() -> Self {
        Self::builtin(
            "sst5",
            &["sentence"],
            "{sentence} It is {label}",
            &["terrible", "bad", "OK", "good", "great"],
        )
    }

    /// Hate speech detection, two lines per example.
    pub fn tweet() -> Self {
        Self::builtin(
            "tweet",
            &["question"],
            "Tweet: {question}\nHate: {label}",
            &["No", "Yes"],
        )
    }

    pub fn spec(&self) -> TemplateSpec {
        TemplateSpec {
            task_name: self.task_name.clone(),
            input_fields: self.input_fields.clone(),
            pattern: self.pattern.clone(),
            demo_separator: self.demo_separator.clone(),
            labels: self.label_space.labels().to_vec(),
        }
    }

    pub fn task_name(&self) -> &str {
        &self.task_name
    }

    pub fn input_fields(&self) -> &[String] {
        &self.input_fields
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn demo_separator(&self) -> &str {
        &self.demo_separator
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    /// Whitespace that separates the label-free render from the label.
    pub fn candidate_prefix(&self) -> &str {
        &self.candidate_prefix
    }

    /// The continuation scored for a candidate label.
    pub fn candidate(&self, label_index: usize) -> String {
        format!(
            "{}{}",
            self.candidate_prefix,
            self.label_space.label(label_index)
        )
    }

    pub fn render_label_free(&self, example: &Example) -> String {
        let mut out = String::new();
        for seg in &self.body {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Field(f) => out.push_str(example.field(f).unwrap_or_default()),
                Segment::Label => unreachable!("label segment removed at construction"),
            }
        }
        out
    }

    pub fn render_labeled(&self, example: &Example) -> String {
        let mut out = self.render_label_free(example);
        out.push_str(&self.candidate(example.label_index));
        out
    }

    /// Splits a labeled render back into its label-free prefix and label.
    /// When several labels match (one label a suffix of another), the
    /// longest wins.
    pub fn split_labeled<'a>(&self, rendered: &'a str) -> Option<(&'a str, usize)> {
        let mut best: Option<(&'a str, usize, usize)> = None;
        for (idx, label) in self.label_space.labels().iter().enumerate() {
            let candidate_len = self.candidate_prefix.len() + label.len();
            if rendered.len() < candidate_len {
                continue;
            }
            let cut = rendered.len() - candidate_len;
            if !rendered.is_char_boundary(cut) {
                continue;
            }
            let (head, tail) = rendered.split_at(cut);
            if tail.starts_with(&self.candidate_prefix) && &tail[self.candidate_prefix.len()..] == label
            {
                if best.map_or(true, |(_, _, len)| label.len() > len) {
                    best = Some((head, idx, label.len()));
                }
            }
        }
        best.map(|(head, idx, _)| (head, idx))
    }
}

/// A labeled instance. Fields are kept by name; the template decides order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub fields: BTreeMap<String, String>,
    pub label_index: usize,
}

impl Example {
    pub fn new<I, K, V>(id: impl Into<String>, fields: I, label_index: usize) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        Self {
            id: id.into(),
            fields: fields
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
            label_index,
        }
    }

    pub fn field(&self, name: &str) -> Option<&str> {
        self.fields.get(name).map(String::as_str)
    }

    pub fn with_label(&self, label_index: usize) -> Self {
        Self {
            label_index,
            ..self.clone()
        }
    }
}

/// Renders one example, with or without its verbalized label.
pub fn render_example(template: &TaskTemplate, example: &Example, include_label: bool) -> String {
    if include_label {
        template.render_labeled(example)
    } else {
        template.render_label_free(example)
    }
}

/// Joins pre-rendered demonstration blocks and the label-free query.
pub fn assemble_prompt<I>(template: &TaskTemplate, demo_blocks: I, query: &Example) -> String
where
    I: IntoIterator<Item = String>,
{
    let mut prompt = String::new();
    for block in demo_blocks {
        prompt.push_str(&block);
        prompt.push_str(template.demo_separator());
    }
    prompt.push_str(&template.render_label_free(query));
    prompt
}

pub fn render_prompt(template: &TaskTemplate, demos: &[Example], query: &Example) -> String {
    assemble_prompt(
        template,
        demos.iter().map(|d| template.render_labeled(d)),
        query,
    )
}

/// An ordered, id-unique collection of examples sharing a template.
#[derive(Debug, Clone)]
pub struct Dataset {
    template: Arc<TaskTemplate>,
    examples: Vec<Example>,
    positions: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(template: Arc<TaskTemplate>, examples: Vec<Example>) -> Result<Self> {
        let mut positions = HashMap::with_capacity(examples.len());
        for (pos, ex) in examples.iter().enumerate() {
            validate_example(&template, ex)?;
            if positions.insert(ex.id.clone(), pos).is_some() {
                return Err(Error::DuplicateId(ex.id.clone()));
            }
        }
        Ok(Self {
            template,
            examples,
            positions,
        })
    }

    pub fn template(&self) -> &TaskTemplate {
        &self.template
    }

    pub fn shared_template(&self) -> Arc<TaskTemplate> {
        Arc::clone(&self.template)
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.positions.get(id).map(|&p| &self.examples[p])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    /// Same template, different examples (validated).
    pub fn derive(&self, examples: Vec<Example>) -> Result<Self> {
        Dataset::new(self.shared_template(), examples)
    }

    /// Per-class example counts in label order.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.template.label_space().len()];
        for ex in &self.examples {
            hist[ex.label_index] += 1;
        }
        hist
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for ex in &self.examples {
            let mut obj = serde_json::Map::new();
            obj.insert("id".into(), Value::String(ex.id.clone()));
            for (k, v) in &ex.fields {
                obj.insert(k.clone(), Value::String(v.clone()));
            }
            obj.insert(
                "label".into(),
                Value::String(self.template.label_space().label(ex.label_index).into()),
            );
            let line = serde_json::to_string(&Value::Object(obj))
                .map_err(|e| Error::json("serializing example", e))?;
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

fn validate_example(template: &TaskTemplate, ex: &Example) -> Result<()> {
    for field in template.input_fields() {
        if !ex.fields.contains_key(field) {
            return Err(Error::MissingField {
                id: ex.id.clone(),
                field: field.clone(),
            });
        }
    }
    if ex.fields.len() != template.input_fields().len() {
        let extra = ex
            .fields
            .keys()
            .find(|k| !template.input_fields().contains(k))
            .cloned()
            .unwrap_or_default();
        return Err(Error::Shape(format!(
            "example `{}` has unexpected field `{extra}`",
            ex.id
        )));
    }
    if ex.label_index >= template.label_space().len() {
        return Err(Error::OutOfRange {
            name: "label_index",
            value: ex.label_index as f64,
            range: "the label space",
        });
    }
    Ok(())
}

/// Default id for records that carry none: zero-padded record ordinal.
fn default_id(ordinal: usize) -> String {
    format!("{ordinal:08}")
}

/// Reads line-delimited JSON records. Each record holds the template's input
/// fields as strings, a `label` string and optionally an `id`; extra keys are
/// ignored. Blank lines are skipped.
pub fn read_dataset<R: BufRead>(
    reader: R,
    source: &Path,
    template: Arc<TaskTemplate>,
) -> Result<Dataset> {
    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedRecord {
            path: source.to_path_buf(),
            line: line_no,
            reason,
        };
        let at = |err: Error| Error::AtRecord {
            path: source.to_path_buf(),
            line: line_no,
            source: Box::new(err),
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let Value::Object(obj) = value else {
            return Err(malformed("record is not a JSON object".into()));
        };
        let id = match obj.get("id") {
            None | Some(Value::Null) => default_id(examples.len()),
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            Some(other) => return Err(malformed(format!("`id` must be a string, got {other}"))),
        };
        let mut fields = BTreeMap::new();
        for name in template.input_fields() {
            match obj.get(name) {
                Some(Value::String(s)) => {
                    fields.insert(name.clone(), s.clone());
                }
                Some(other) => {
                    return Err(malformed(format!("field `{name}` must be a string, got {other}")))
                }
                None => {
                    return Err(at(Error::MissingField {
                        id,
                        field: name.clone(),
                    }))
                }
            }
        }
        let label = match obj.get("label") {
            Some(Value::String(s)) => s,
            Some(other) => return Err(malformed(format!("`label` must be a string, got {other}"))),
            None => {
                return Err(at(Error::MissingField {
                    id,
                    field: "label".into(),
                }))
            }
        };
        let label_index = template.label_space().index_of(label).map_err(at)?;
        if !seen.insert(id.clone()) {
            return Err(at(Error::DuplicateId(id)));
        }
        examples.push(Example {
            id,
            fields,
            label_index,
        });
    }
    Dataset::new(template, examples)
}

pub fn load_dataset(path: &Path, template: Arc<TaskTemplate>) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file), path, template)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str, template: TaskTemplate) -> Result<Dataset> {
        read_dataset(text.as_bytes(), Path::new("mem.jsonl"), Arc::new(template))
    }

    fn mrpc_example(s1: &str, s2: &str, label: usize) -> Example {
        Example::new("m1", [("sentence1", s1), ("sentence2", s2)], label)
    }

    #[test]
    fn sst5_great_maps_to_last_index() {
        let ds = load(r#"{"sentence":"great movie","label":"great"}"#, TaskTemplate::sst5()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.examples()[0].label_index, 4);
        assert_eq!(ds.examples()[0].id, "00000000");
    }

    #[test]
    fn empty_file_gives_empty_dataset() {
        let ds = load("", TaskTemplate::sst5()).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn label_match_is_case_sensitive() {
        let err = load(r#"{"sentence":"x","label":"Great"}"#, TaskTemplate::sst5()).unwrap_err();
        match err {
            Error::AtRecord { line, source, .. } => {
                assert_eq!(line, 1);
                assert!(matches!(*source, Error::UnknownLabel { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"sentence\":\"a\",\"label\":\"bad\"}\n\n{not json";
        match load(text, TaskTemplate::sst5()).unwrap_err() {
            Error::MalformedRecord { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_and_missing_fields_rejected() {
        let dup = "{\"id\":\"a\",\"sentence\":\"x\",\"label\":\"OK\"}\n{\"id\":\"a\",\"sentence\":\"y\",\"label\":\"OK\"}";
        match load(dup, TaskTemplate::sst5()).unwrap_err() {
            Error::AtRecord { line, source, .. } => {
                assert_eq!(line, 2);
                assert!(matches!(*source, Error::DuplicateId(ref id) if id == "a"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let missing = r#"{"sentence1":"x","label":"No"}"#;
        match load(missing, TaskTemplate::mrpc()).unwrap_err() {
            Error::AtRecord { source, .. } => {
                assert!(matches!(*source, Error::MissingField { ref field, .. } if field == "sentence2"))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mrpc_render_with_label() {
        let t = TaskTemplate::mrpc();
        let ex = mrpc_example("A b.", "C d.", 0);
        assert_eq!(render_example(&t, &ex, true), "A b. Can we say \"C d.\"? No");
        assert_eq!(render_example(&t, &ex, false), "A b. Can we say \"C d.\"?");
    }

    #[test]
    fn tweet_render_with_label() {
        let t = TaskTemplate::tweet();
        let ex = Example::new("t", [("question", "some text")], 1);
        assert_eq!(render_example(&t, &ex, true), "Tweet: some text\nHate: Yes");
        assert_eq!(render_example(&t, &ex, false), "Tweet: some text\nHate:");
    }

    #[test]
    fn label_free_render_is_prefix_and_round_trips() {
        for t in [TaskTemplate::mrpc(), TaskTemplate::sst5(), TaskTemplate::tweet()] {
            for idx in 0..t.label_space().len() {
                let fields: Vec<(String, String)> = t
                    .input_fields()
                    .iter()
                    .map(|f| (f.clone(), format!("text of {f}")))
                    .collect();
                let ex = Example::new("x", fields, idx);
                let full = render_example(&t, &ex, true);
                let free = render_example(&t, &ex, false);
                assert!(full.starts_with(&free));
                assert_eq!(full.trim_end(), full);
                assert_eq!(free.trim_end(), free);
                let remainder = full[free.len()..].trim_start();
                assert_eq!(t.label_space().index_of(remainder).unwrap(), idx);
                assert_eq!(t.split_labeled(&full), Some((free.as_str(), idx)));
            }
        }
    }

    #[test]
    fn prompt_layout() {
        let t = TaskTemplate::mrpc();
        let q = mrpc_example("Q1.", "Q2.", 1);
        assert_eq!(render_prompt(&t, &[], &q), render_example(&t, &q, false));

        let demos = vec![mrpc_example("A.", "B.", 0), mrpc_example("C.", "D.", 1)];
        let prompt = render_prompt(&t, &demos, &q);
        let blocks: Vec<&str> = prompt.split(t.demo_separator()).collect();
        assert_eq!(
            blocks,
            vec![
                "A. Can we say \"B.\"? No",
                "C. Can we say \"D.\"? Yes",
                "Q1. Can we say \"Q2.\"?"
            ]
        );
        assert!(prompt.ends_with(&render_example(&t, &q, false)));
    }

    #[test]
    fn ten_demos_give_ten_labeled_blocks() {
        let t = TaskTemplate::sst5();
        let demos: Vec<Example> = (0..10)
            .map(|i| Example::new(format!("d{i}"), [("sentence", format!("s{i}"))], i % 5))
            .collect();
        let q = Example::new("q", [("sentence", "query")], 0);
        let prompt = render_prompt(&t, &demos, &q);
        let blocks: Vec<&str> = prompt.split("\n\n").collect();
        assert_eq!(blocks.len(), 11);
        assert!(blocks[..10].iter().all(|b| t.split_labeled(b).is_some()));
        assert_eq!(blocks[10], "query It is");
    }

    #[test]
    fn template_validation() {
        let spec = |pattern: &str| TemplateSpec {
            task_name: "t".into(),
            input_fields: vec!["a".into()],
            pattern: pattern.into(),
            demo_separator: "\n".into(),
            labels: vec!["x".into(), "y".into()],
        };
        assert!(TaskTemplate::new(spec("{a} -> {label}")).is_ok());
        assert!(TaskTemplate::new(spec("{label} {a}")).is_err());
        assert!(TaskTemplate::new(spec("{a} {a} {label}")).is_err());
        assert!(TaskTemplate::new(spec("{b} {label}")).is_err());
        assert!(TaskTemplate::new(spec("no fields {label}")).is_err());
        assert!(TaskTemplate::new(spec("{a} {label")).is_err());
        let braces = TaskTemplate::new(spec("{{{a}}}: {label}")).unwrap();
        let ex = Example::new("i", [("a", "v")], 1);
        assert_eq!(braces.render_labeled(&ex), "{v}: y");
        assert!(LabelSpace::new(["only"]).is_err());
        assert!(LabelSpace::new(["a", "a"]).is_err());
    }

    #[test]
    fn template_toml_round_trip() {
        let text = r#"
task_name = "custom"
input_fields = ["text"]
pattern = "Review: {text}\nVerdict: {label}"
labels = ["neg", "pos"]
"#;
        let t = TaskTemplate::from_toml_str(text).unwrap();
        assert_eq!(t.demo_separator(), "\n\n");
        assert_eq!(t.candidate_prefix(), " ");
        assert_eq!(TaskTemplate::new(t.spec()).unwrap(), t);
    }

    #[test]
    fn jsonl_write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = load(
            "{\"id\":\"7\",\"sentence1\":\"a \\\"q\\\"\",\"sentence2\":\"b\",\"label\":\"Yes\"}",
            TaskTemplate::mrpc(),
        )
        .unwrap();
        ds.write_jsonl(&path).unwrap();
        let back = load_dataset(&path, ds.shared_template()).unwrap();
        assert_eq!(back.examples(), ds.examples());
    }
}
