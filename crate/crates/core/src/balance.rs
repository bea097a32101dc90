//! Class rebalancing by random duplication, random deletion, or loss weights.
//!
//! The imbalance ratio is minority count / majority count over all
//! `num_classes` classes, so an absent class drives it to 0.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledExample;
use crate::error::{Error, Result};

/// Anything carrying a class index.
pub trait Labeled {
    fn class_index(&self) -> usize;
}

impl Labeled for LabeledExample {
    fn class_index(&self) -> usize {
        self.label.index()
    }
}

impl Labeled for usize {
    fn class_index(&self) -> usize {
        *self
    }
}

impl<A, L: Labeled> Labeled for (A, L) {
    fn class_index(&self) -> usize {
        self.1.class_index()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceStrategy {
    #[default]
    None,
    Oversample,
    Undersample,
    ClassWeights,
}

impl std::str::FromStr for BalanceStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "oversample" => Ok(Self::Oversample),
            "undersample" => Ok(Self::Undersample),
            "class_weights" => Ok(Self::ClassWeights),
            other => Err(format!("unknown balance strategy {other:?}")),
        }
    }
}

impl std::fmt::Display for BalanceStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Oversample => "oversample",
            Self::Undersample => "undersample",
            Self::ClassWeights => "class_weights",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub counts: Vec<usize>,
    pub total: usize,
}

impl ClassHistogram {
    pub fn of<L: Labeled>(data: &[L], num_classes: usize) -> Result<Self> {
        let mut counts = vec![0; num_classes];
        for x in data {
            let c = x.class_index();
            *counts
                .get_mut(c)
                .ok_or_else(|| Error::Index(format!("class {c} out of range for {num_classes} classes")))? += 1;
        }
        Ok(Self { total: data.len(), counts })
    }

    pub fn missing_classes(&self) -> Vec<usize> {
        self.counts.iter().enumerate().filter(|(_, &n)| n == 0).map(|(c, _)| c).collect()
    }

    pub fn is_balanced(&self) -> bool {
        self.counts.windows(2).all(|w| w[0] == w[1])
    }
}

pub fn imbalance_ratio<L: Labeled>(data: &[L], num_classes: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("imbalance ratio of an empty dataset".into()));
    }
    let h = ClassHistogram::of(data, num_classes)?;
    let max = *h.counts.iter().max().unwrap();
    let min = *h.counts.iter().min().unwrap();
    Ok(min as f64 / max as f64)
}

fn by_class<L: Labeled + Clone>(data: &[L], num_classes: usize) -> Result<Vec<Vec<L>>> {
    let mut groups = vec![Vec::new(); num_classes];
    for x in data {
        let c = x.class_index();
        groups
            .get_mut(c)
            .ok_or_else(|| Error::Index(format!("class {c} out of range for {num_classes} classes")))?
            .push(x.clone());
    }
    Ok(groups)
}

fn require_all_present(h: &ClassHistogram) -> Result<()> {
    let missing = h.missing_classes();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("classes {missing:?} have no examples")))
    }
}

/// Tops up every present class by sampling its own examples with
/// replacement until it matches the majority count. Absent classes stay
/// absent.
pub fn oversample<L: Labeled + Clone, R: Rng + ?Sized>(data: &[L], num_classes: usize, rng: &mut R) -> Result<Vec<L>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("cannot oversample an empty dataset".into()));
    }
    let groups = by_class(data, num_classes)?;
    let target = groups.iter().map(Vec::len).max().unwrap();
    let mut out = data.to_vec();
    for g in groups.iter().filter(|g| !g.is_empty()) {
        for _ in g.len()..target {
            out.push(g[rng.random_range(0..g.len())].clone());
        }
    }
    out.shuffle(rng);
    Ok(out)
}

/// Cuts every class down to the minority count by sampling without
/// replacement.
pub fn undersample<L: Labeled + Clone, R: Rng + ?Sized>(data: &[L], num_classes: usize, rng: &mut R) -> Result<Vec<L>> {
    require_all_present(&ClassHistogram::of(data, num_classes)?)?;
    let groups = by_class(data, num_classes)?;
    let target = groups.iter().map(Vec::len).min().unwrap();
    let mut out = Vec::with_capacity(target * num_classes);
    for g in &groups {
        let mut keep = index::sample(rng, g.len(), target).into_vec();
        keep.sort_unstable();
        out.extend(keep.into_iter().map(|i| g[i].clone()));
    }
    out.shuffle(rng);
    Ok(out)
}

/// `total / (num_classes · count_c)` for each class.
pub fn class_weights<L: Labeled>(data: &[L], num_classes: usize) -> Result<Vec<f64>> {
    let h = ClassHistogram::of(data, num_classes)?;
    require_all_present(&h)?;
    Ok(h.counts.iter().map(|&n| h.total as f64 / (num_classes * n) as f64).collect())
}
