use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Majority-proportion regime a bag is drawn under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Majority proportion in `[1/C, 0.4]`.
    Small,
    /// Majority proportion in `[1/C, 1]`.
    Various,
    /// Majority proportion in `[0.6, 1]`.
    Large,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Small, Scenario::Various, Scenario::Large];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Small => "small",
            Scenario::Various => "various",
            Scenario::Large => "large",
        }
    }

    pub fn interval(self, num_classes: usize) -> (f64, f64) {
        let floor = 1.0 / num_classes as f64;
        match self {
            Scenario::Small => (floor, 0.4),
            Scenario::Various => (floor, 1.0),
            Scenario::Large => (0.6, 1.0),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "small" => Ok(Scenario::Small),
            "various" => Ok(Scenario::Various),
            "large" => Ok(Scenario::Large),
            other => Err(Error::InvalidConfig(format!(
                "unknown scenario {other:?} (expected small, various or large)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BagSize {
    Fixed(usize),
    /// Uniform over `min..=max`.
    Range {
        min: usize,
        max: usize,
    },
}

impl BagSize {
    pub fn min(self) -> usize {
        match self {
            BagSize::Fixed(n) => n,
            BagSize::Range { min, .. } => min,
        }
    }

    pub fn max(self) -> usize {
        match self {
            BagSize::Fixed(n) => n,
            BagSize::Range { max, .. } => max,
        }
    }
}

impl Default for BagSize {
    fn default() -> Self {
        BagSize::Fixed(10)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub num_classes: usize,
    pub bag_size: BagSize,
}

impl ScenarioSpec {
    /// Validates the class count, bag sizes and that every allowed bag size can
    /// realise a strict majority inside the scenario interval.
    pub fn new(scenario: Scenario, num_classes: usize, bag_size: BagSize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least two classes, got {num_classes}"
            )));
        }
        if bag_size.min() < 2 || bag_size.min() > bag_size.max() {
            return Err(Error::InvalidConfig(format!(
                "bag size must be at least 2 with min <= max, got {bag_size:?}"
            )));
        }
        let spec = Self {
            scenario,
            num_classes,
            bag_size,
        };
        let (lo, hi) = spec.interval();
        if lo > hi {
            return Err(Error::InfeasibleScenario(format!(
                "{scenario} with {num_classes} classes has empty majority interval [{lo}, {hi}]"
            )));
        }
        for n in bag_size.min()..=bag_size.max() {
            spec.check_bag_size(n)?;
        }
        Ok(spec)
    }

    pub fn interval(&self) -> (f64, f64) {
        self.scenario.interval(self.num_classes)
    }

    /// Smallest majority count that leaves room for a strict maximum:
    /// `m + (C - 1)(m - 1) >= n`.
    pub fn min_majority_count(&self, bag_size: usize) -> usize {
        (bag_size - 1).div_ceil(self.num_classes) + 1
    }

    pub(crate) fn check_bag_size(&self, bag_size: usize) -> Result<()> {
        if bag_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "bag size must be at least 2, got {bag_size}"
            )));
        }
        let (_, hi) = self.interval();
        let m_min = self.min_majority_count(bag_size);
        // round(p * n) must reach m_min for a set of p with positive length
        if hi * bag_size as f64 <= m_min as f64 - 0.5 {
            return Err(Error::InfeasibleScenario(format!(
                "{} with {} classes and bag size {bag_size}: a strict majority needs at least {m_min} instances, \
                 above the interval maximum {hi}",
                self.scenario, self.num_classes
            )));
        }
        Ok(())
    }
}
