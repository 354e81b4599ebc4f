//! Fixtures shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::path::PathBuf;

use noisy_icl::corpus::{render_prompt, Example, TaskTemplate};
use noisy_icl::rectifier::{build_rectifier_prompt, canonical_completion};
use noisy_icl::strategies::{render_demo, AnnotatedDemo, DEFAULT_TAG_FORMAT};
use noisy_icl::corpus::assemble_prompt;

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn mrpc_prompt() -> String {
    let t = TaskTemplate::mrpc();
    let demos = [
        Example::new("m1", [("sentence1", "The cat sat on the mat."), ("sentence2", "A cat was sitting on a mat.")], 1),
        Example::new("m2", [("sentence1", "Stocks fell sharply on Monday."), ("sentence2", "The weather was sunny.")], 0),
    ];
    let query = Example::new("m3", [("sentence1", "He bought a new car."), ("sentence2", "He purchased a new vehicle.")], 1);
    render_prompt(&t, &demos, &query)
}

fn sst5_prompt() -> String {
    let t = TaskTemplate::sst5();
    let demos = [
        Example::new("s1", [("sentence", "A gripping, beautifully acted film.")], 4),
        Example::new("s2", [("sentence", "Dull and far too long.")], 1),
    ];
    let query = Example::new("s3", [("sentence", "An uneven but watchable comedy.")], 2);
    render_prompt(&t, &demos, &query)
}

pub fn tweet_examples() -> [Example; 3] {
    [
        Example::new("t1", [("question", "Have a lovely day everyone")], 0),
        Example::new("t2", [("question", "Go back where you came from")], 1),
        Example::new("t3", [("question", "Traffic is awful this morning")], 0),
    ]
}

fn tweet_prompt() -> String {
    let [a, b, q] = tweet_examples();
    render_prompt(&TaskTemplate::tweet(), &[a, b], &q)
}

fn tweet_weighted() -> String {
    let t = TaskTemplate::tweet();
    let [a, b, q] = tweet_examples();
    let demos = [
        AnnotatedDemo {
            example: a,
            confidence: Some(0.9),
            verbal_tag: Some("high".into()),
        },
        AnnotatedDemo {
            example: b.with_label(0),
            confidence: Some(0.1),
            verbal_tag: Some("low".into()),
        },
    ];
    assemble_prompt(&t, demos.iter().map(|d| render_demo(&t, d, DEFAULT_TAG_FORMAT)), &q)
}

fn rect_prompt() -> String {
    let [a, b, c] = tweet_examples();
    build_rectifier_prompt(&TaskTemplate::tweet(), &[a.with_label(1), b, c])
}

fn rect_completion() -> String {
    canonical_completion(&TaskTemplate::tweet(), &[0, 1, 0])
}

/// `(golden file, rendered text)` for every checked-in golden.
pub fn golden_renders() -> Vec<(&'static str, String)> {
    vec![
        ("mrpc.txt", mrpc_prompt()),
        ("sst5.txt", sst5_prompt()),
        ("tweet.txt", tweet_prompt()),
        ("tweet-weighted.txt", tweet_weighted()),
        ("rect-v1-prompt.txt", rect_prompt()),
        ("rect-v1-completion.txt", rect_completion()),
    ]
}

/// Names of goldens whose bytes differ from the render.
pub fn golden_mismatches() -> Vec<String> {
    golden_renders()
        .into_iter()
        .filter(|(name, text)| std::fs::read(golden_dir().join(name)).ok().as_deref() != Some(text.as_bytes()))
        .map(|(name, _)| name.to_string())
        .collect()
}
