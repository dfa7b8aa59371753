//! Train/test split protocols.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    /// Each class is shuffled and cut in half, anew every round.
    HalfRandom,
    /// One round per sample id: that sample is tested, the others train.
    SampleHoldout,
    /// Splits read from `train{r}.txt` / `test{r}.txt` (and `val{r}.txt`,
    /// merged into training).
    Predefined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitProtocol {
    pub kind: SplitKind,
    pub rounds: usize,
    pub seed: u64,
    pub split_dir: Option<PathBuf>,
}

impl Default for SplitProtocol {
    fn default() -> Self {
        SplitProtocol { kind: SplitKind::HalfRandom, rounds: 10, seed: 0, split_dir: None }
    }
}

/// Sorted, disjoint index lists of one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn make_splits(dataset: &Dataset, protocol: &SplitProtocol) -> Result<Vec<Split>> {
    let splits = match protocol.kind {
        SplitKind::HalfRandom => half_random(dataset, protocol.rounds, protocol.seed),
        SplitKind::SampleHoldout => sample_holdout(dataset)?,
        SplitKind::Predefined => {
            let dir = protocol
                .split_dir
                .as_deref()
                .ok_or_else(|| Error::invalid("predefined protocol needs a split directory"))?;
            predefined(dataset, dir, protocol.rounds)?
        }
    };
    for (r, s) in splits.iter().enumerate() {
        if s.train.is_empty() || s.test.is_empty() {
            return Err(Error::invalid(format!("round {} has an empty side", r + 1)));
        }
    }
    Ok(splits)
}

fn half_random(dataset: &Dataset, rounds: usize, seed: u64) -> Vec<Split> {
    let labels = dataset.labels();
    (0..rounds)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut train = Vec::new();
            let mut test = Vec::new();
            for c in 0..dataset.class_names.len() as u32 {
                let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
                idx.shuffle(&mut rng);
                let half = idx.len() / 2;
                train.extend_from_slice(&idx[..half]);
                test.extend_from_slice(&idx[half..]);
            }
            train.sort_unstable();
            test.sort_unstable();
            Split { train, test }
        })
        .collect()
}

fn sample_holdout(dataset: &Dataset) -> Result<Vec<Split>> {
    let groups: Vec<&str> = dataset
        .records
        .iter()
        .map(|r| r.group.as_deref().ok_or_else(|| Error::invalid(format!("{} has no sample id", r.path))))
        .collect::<Result<_>>()?;
    let unique: BTreeSet<&str> = groups.iter().copied().collect();
    if unique.len() < 2 {
        return Err(Error::invalid(format!("sample holdout needs at least 2 sample ids, found {}", unique.len())));
    }
    Ok(unique
        .into_iter()
        .map(|g| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..groups.len()).partition(|&i| groups[i] == g);
            Split { train, test }
        })
        .collect())
}

fn read_split_file(dataset: &Dataset, path: &Path, required: bool) -> Result<Vec<usize>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if !required && e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(_) => return Err(Error::invalid(format!("cannot read split file {}", path.display()))),
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (rel, label) = line.split_once('\t').ok_or_else(|| {
            Error::invalid(format!("{}:{}: expected 'path<TAB>label'", path.display(), n + 1))
        })?;
        let idx = dataset
            .index_of(rel)
            .ok_or_else(|| Error::invalid(format!("{}:{}: unknown image {rel}", path.display(), n + 1)))?;
        let class = &dataset.class_names[dataset.records[idx].label as usize];
        if class != label.trim() {
            return Err(Error::invalid(format!(
                "{}:{}: {rel} is labelled '{}' but lives in class '{class}'",
                path.display(),
                n + 1,
                label.trim()
            )));
        }
        out.push(idx);
    }
    Ok(out)
}

fn predefined(dataset: &Dataset, dir: &Path, rounds: usize) -> Result<Vec<Split>> {
    (1..=rounds)
        .map(|r| {
            let mut train = read_split_file(dataset, &dir.join(format!("train{r}.txt")), true)?;
            train.extend(read_split_file(dataset, &dir.join(format!("val{r}.txt")), false)?);
            let mut test = read_split_file(dataset, &dir.join(format!("test{r}.txt")), true)?;
            train.sort_unstable();
            train.dedup();
            test.sort_unstable();
            test.dedup();
            if let Some(i) = test.iter().find(|i| train.binary_search(i).is_ok()) {
                return Err(Error::invalid(format!(
                    "round {r}: {} is on both sides",
                    dataset.records[*i].path
                )));
            }
            Ok(Split { train, test })
        })
        .collect()
}
