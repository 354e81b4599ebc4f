//! Seeded synthetic tasks for tests, benchmarks, and demos.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{Dataset, Example, TaskTemplate};
use crate::seed;

const VOCAB: [&str; 40] = [
    "river", "stone", "cloud", "lamp", "garden", "window", "engine", "paper", "coffee", "winter", "signal",
    "market", "forest", "bridge", "letter", "pocket", "silver", "candle", "harbor", "meadow", "rocket", "velvet",
    "thunder", "pepper", "castle", "violin", "planet", "mirror", "ladder", "orange", "basket", "falcon", "pillow",
    "marble", "tunnel", "anchor", "jacket", "lemon", "saddle", "wagon",
];

/// Text with a unique trailing marker so every render is distinct.
fn sentence<R: Rng>(rng: &mut R, marker: &str) -> String {
    let mut words: Vec<&str> = VOCAB.choose_multiple(rng, 6).copied().collect();
    words.shuffle(rng);
    format!("{} {marker}", words.join(" "))
}

/// Retrieval and validation sets for `template` with uniformly drawn labels.
/// Retrieval ids are `d00000…`, validation ids `q00000…`.
pub fn task(template: TaskTemplate, n_retrieval: usize, n_validation: usize, seed: u64) -> (Dataset, Dataset) {
    let template = Arc::new(template);
    let m = template.label_space().len();
    let mut rng = seed::stream(seed, "synthetic");
    let mut make = |prefix: &str, n: usize| -> Vec<Example> {
        (0..n)
            .map(|i| {
                let id = format!("{prefix}{i:05}");
                let fields: Vec<(String, String)> = template
                    .input_fields()
                    .iter()
                    .map(|f| (f.clone(), sentence(&mut rng, &format!("{f}-{id}"))))
                    .collect();
                Example::new(id, fields, rng.gen_range(0..m))
            })
            .collect()
    };
    let retrieval = make("d", n_retrieval);
    let validation = make("q", n_validation);
    (
        Dataset::new(template.clone(), retrieval).expect("synthetic retrieval set is valid"),
        Dataset::new(template, validation).expect("synthetic validation set is valid"),
    )
}

/// Binary task on the tweet template.
pub fn binary_task(n_retrieval: usize, n_validation: usize, seed: u64) -> (Dataset, Dataset) {
    task(TaskTemplate::tweet(), n_retrieval, n_validation, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn renders_are_unique_and_seeded() {
        let (a, b) = binary_task(200, 50, 1);
        let t = a.template();
        let texts: HashSet<String> = a.examples().iter().chain(b.examples()).map(|e| t.render_label_free(e)).collect();
        assert_eq!(texts.len(), 250);
        assert_eq!(binary_task(200, 50, 1).0.examples(), a.examples());
        assert_ne!(binary_task(200, 50, 2).0.examples(), a.examples());
        let (mrpc, _) = task(TaskTemplate::mrpc(), 10, 1, 0);
        assert!(mrpc.examples()[0].field("sentence2").is_some());
    }
}
