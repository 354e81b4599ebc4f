//! Uniform (symmetric) label noise and clean-subset sampling.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Example, LabelSpace};
use crate::error::{Error, Result};
use crate::seed;

/// Number of items a rate selects: `floor(rate * n)`. The epsilon absorbs
/// representation error such as `0.29 * 100 = 28.999…`.
pub fn flip_count(rate: f64, n: usize) -> usize {
    (rate * n as f64 + 1e-9).floor() as usize
}

pub fn check_rate(rate: f64) -> Result<()> {
    if rate.is_finite() && (0.0..=1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name: "noise rate",
            value: rate,
            range: "[0, 1]",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flip {
    pub original: usize,
    pub corrupted: usize,
}

/// Flips `floor(rate * len)` labels chosen uniformly without replacement,
/// each to a uniformly drawn different class. Untouched examples are cloned
/// verbatim. Returns the new list and the flips keyed by position.
pub fn corrupt_examples<R: Rng + ?Sized>(
    examples: &[Example],
    num_labels: usize,
    rate: f64,
    rng: &mut R,
) -> Result<(Vec<Example>, BTreeMap<usize, Flip>)> {
    check_rate(rate)?;
    let k = flip_count(rate, examples.len());
    let mut chosen = index::sample(rng, examples.len(), k).into_vec();
    chosen.sort_unstable();

    let mut out = examples.to_vec();
    let mut flips = BTreeMap::new();
    for pos in chosen {
        let original = out[pos].label_index;
        let draw = rng.gen_range(0..num_labels - 1);
        let corrupted = if draw >= original { draw + 1 } else { draw };
        out[pos].label_index = corrupted;
        flips.insert(
            pos,
            Flip {
                original,
                corrupted,
            },
        );
    }
    Ok((out, flips))
}

/// Seeded record of a dataset corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionPlan {
    pub seed: u64,
    pub rate: f64,
    /// example id -> (original, corrupted) label index.
    pub flips: BTreeMap<String, Flip>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub id: String,
    pub original: String,
    pub corrupted: String,
}

/// Audit sidecar written next to a corrupted dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSidecar {
    pub seed: u64,
    pub rate: f64,
    pub flips: Vec<PlanEntry>,
}

impl CorruptionPlan {
    pub fn is_flipped(&self, id: &str) -> bool {
        self.flips.contains_key(id)
    }

    pub fn to_sidecar(&self, labels: &LabelSpace) -> PlanSidecar {
        PlanSidecar {
            seed: self.seed,
            rate: self.rate,
            flips: self
                .flips
                .iter()
                .map(|(id, f)| PlanEntry {
                    id: id.clone(),
                    original: labels.label(f.original).to_string(),
                    corrupted: labels.label(f.corrupted).to_string(),
                })
                .collect(),
        }
    }

    pub fn from_sidecar(sidecar: &PlanSidecar, labels: &LabelSpace) -> Result<Self> {
        let mut flips = BTreeMap::new();
        for entry in &sidecar.flips {
            flips.insert(
                entry.id.clone(),
                Flip {
                    original: labels.index_of(&entry.original)?,
                    corrupted: labels.index_of(&entry.corrupted)?,
                },
            );
        }
        Ok(Self {
            seed: sidecar.seed,
            rate: sidecar.rate,
            flips,
        })
    }

    pub fn write_sidecar(&self, path: &Path, labels: &LabelSpace) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_sidecar(labels))
            .map_err(|e| Error::json("serializing corruption plan", e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_sidecar(path: &Path, labels: &LabelSpace) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let sidecar: PlanSidecar = serde_json::from_str(&text)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        Self::from_sidecar(&sidecar, labels)
    }
}

pub fn corrupt_labels(dataset: &Dataset, rate: f64, seed: u64) -> Result<(Dataset, CorruptionPlan)> {
    let mut rng = seed::stream(seed, "corrupt-labels");
    let m = dataset.template().label_space().len();
    let (examples, by_pos) = corrupt_examples(dataset.examples(), m, rate, &mut rng)?;
    let flips = by_pos
        .into_iter()
        .map(|(pos, flip)| (examples[pos].id.clone(), flip))
        .collect();
    Ok((
        dataset.derive(examples)?,
        CorruptionPlan { seed, rate, flips },
    ))
}

/// Samples `floor(fraction * |D|)` examples as the trusted clean subset.
/// Both halves keep the dataset's order.
pub fn split_clean_subset(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction.is_finite() && fraction > 0.0 && fraction < 1.0) {
        return Err(Error::OutOfRange {
            name: "clean fraction",
            value: fraction,
            range: "(0, 1)",
        });
    }
    let k = flip_count(fraction, dataset.len());
    if k == 0 {
        return Err(Error::EmptySubset {
            size: dataset.len(),
            fraction,
        });
    }
    let mut rng = seed::stream(seed, "clean-subset");
    let mut in_clean = vec![false; dataset.len()];
    for pos in index::sample(&mut rng, dataset.len(), k) {
        in_clean[pos] = true;
    }
    let (clean, rest): (Vec<_>, Vec<_>) = dataset
        .examples()
        .iter()
        .cloned()
        .zip(in_clean)
        .partition(|(_, c)| *c);
    Ok((
        dataset.derive(clean.into_iter().map(|(e, _)| e).collect())?,
        dataset.derive(rest.into_iter().map(|(e, _)| e).collect())?,
    ))
}
