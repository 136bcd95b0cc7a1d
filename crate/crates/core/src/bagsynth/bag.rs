use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{InstancePool, ScenarioSpec};
use crate::{Error, Result};

/// One bag: its instances, the majority label, and the per-instance labels and
/// class counts that are only used for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagRecord {
    pub bag_id: usize,
    #[serde(rename = "features")]
    pub instances: Vec<Vec<f64>>,
    #[serde(rename = "majority_label_index")]
    pub majority_class: usize,
    pub hidden_labels: Vec<usize>,
    pub count_vector: Vec<usize>,
}

impl BagRecord {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.count_vector.len()
    }

    pub fn majority_one_hot(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.num_classes()];
        y[self.majority_class] = 1.0;
        y
    }

    pub fn majority_proportion(&self) -> f64 {
        self.count_vector[self.majority_class] as f64 / self.len() as f64
    }

    /// Checks that the counts agree with the hidden labels and that the stored
    /// majority is their unique argmax.
    pub fn validate(&self) -> Result<()> {
        if self.instances.is_empty() {
            return Err(Error::EmptyBag);
        }
        if self.hidden_labels.len() != self.instances.len() {
            return Err(Error::ShapeMismatch {
                context: format!("hidden labels of bag {}", self.bag_id),
                expected: vec![self.instances.len()],
                actual: vec![self.hidden_labels.len()],
            });
        }
        let mut recount = vec![0usize; self.num_classes()];
        for &label in &self.hidden_labels {
            *recount.get_mut(label).ok_or_else(|| Error::InvalidCounts {
                counts: self.count_vector.clone(),
                reason: format!("hidden label {label} out of range in bag {}", self.bag_id),
            })? += 1;
        }
        if recount != self.count_vector {
            return Err(Error::InvalidCounts {
                counts: self.count_vector.clone(),
                reason: format!("hidden labels of bag {} count to {recount:?}", self.bag_id),
            });
        }
        if majority_of_counts(&self.count_vector) != Some(self.majority_class) {
            return Err(Error::InvalidCounts {
                counts: self.count_vector.clone(),
                reason: format!(
                    "stored majority {} is not the unique argmax",
                    self.majority_class
                ),
            });
        }
        Ok(())
    }
}

/// The class with the strictly largest count, or `None` on a tie.
pub fn majority_of_counts(counts: &[usize]) -> Option<usize> {
    let max = *counts.iter().max()?;
    let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == max);
    let (k, _) = winners.next()?;
    winners.next().is_none().then_some(k)
}

/// Draws a per-class count vector for one bag.
///
/// The majority proportion `p` is uniform over the scenario interval and the
/// majority count is `round(p * n)`; draws below the smallest count that admits
/// a strict majority are redrawn. The remainder is split over the other classes
/// by integer stick-breaking, each capped at `majority - 1` with any overflow
/// handed one unit at a time to classes that still have room. The majority
/// class is uniform over all classes.
pub fn draw_class_counts<R: Rng + ?Sized>(
    spec: &ScenarioSpec,
    bag_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    spec.check_bag_size(bag_size)?;
    let c = spec.num_classes;
    let (lo, hi) = spec.interval();
    let m_min = spec.min_majority_count(bag_size);

    let majority = loop {
        let p = rng.random_range(lo..=hi);
        let m = (p * bag_size as f64).round() as usize;
        if m >= m_min {
            break m.min(bag_size);
        }
    };
    let minority = stick_break(bag_size - majority, c - 1, majority - 1, rng);

    let majority_class = rng.random_range(0..c);
    let mut counts = Vec::with_capacity(c);
    let mut rest = minority.into_iter();
    for k in 0..c {
        counts.push(if k == majority_class {
            majority
        } else {
            rest.next().expect("one share per minority class")
        });
    }
    Ok(counts)
}

fn stick_break<R: Rng + ?Sized>(total: usize, parts: usize, cap: usize, rng: &mut R) -> Vec<usize> {
    let mut cuts: Vec<usize> = (0..parts - 1)
        .map(|_| rng.random_range(0..=total))
        .collect();
    cuts.sort_unstable();
    let mut shares = Vec::with_capacity(parts);
    let mut prev = 0;
    for &cut in &cuts {
        shares.push(cut - prev);
        prev = cut;
    }
    shares.push(total - prev);

    let mut overflow = 0;
    for s in &mut shares {
        if *s > cap {
            overflow += *s - cap;
            *s = cap;
        }
    }
    while overflow > 0 {
        let open: Vec<usize> = (0..parts).filter(|&i| shares[i] < cap).collect();
        let i = open[rng.random_range(0..open.len())];
        shares[i] += 1;
        overflow -= 1;
    }
    shares
}

/// Samples `counts[k]` instances of class `k` with replacement, then shuffles.
pub fn assemble_bag<R: Rng + ?Sized>(
    pool: &InstancePool,
    counts: &[usize],
    bag_id: usize,
    rng: &mut R,
) -> Result<BagRecord> {
    if counts.len() != pool.num_classes() {
        return Err(Error::InvalidCounts {
            counts: counts.to_vec(),
            reason: format!("pool has {} classes", pool.num_classes()),
        });
    }
    let majority_class = majority_of_counts(counts).ok_or_else(|| Error::InvalidCounts {
        counts: counts.to_vec(),
        reason: "no unique majority class".into(),
    })?;
    let mut items: Vec<(usize, &Vec<f64>)> = Vec::with_capacity(counts.iter().sum());
    for (k, &n) in counts.iter().enumerate() {
        let members = pool.class(k);
        if n > 0 && members.is_empty() {
            return Err(Error::InvalidCounts {
                counts: counts.to_vec(),
                reason: format!("class {k} has no instances in the pool"),
            });
        }
        for _ in 0..n {
            items.push((k, &members[rng.random_range(0..members.len())]));
        }
    }
    items.shuffle(rng);
    Ok(BagRecord {
        bag_id,
        instances: items.iter().map(|(_, v)| (*v).clone()).collect(),
        majority_class,
        hidden_labels: items.iter().map(|(k, _)| *k).collect(),
        count_vector: counts.to_vec(),
    })
}
