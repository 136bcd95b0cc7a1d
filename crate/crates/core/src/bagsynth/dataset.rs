use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{assemble_bag, draw_class_counts, BagRecord, BagSize, InstancePool, ScenarioSpec};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 5.0 / 7.0,
            val: 1.0 / 7.0,
            test: 1.0 / 7.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "split fractions must be positive, got {parts:?}"
            )));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "split fractions must sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }

    /// Validation and test sizes are rounded down; train takes the remainder.
    pub fn sizes(&self, n_bags: usize) -> SplitSizes {
        let floor = |f: f64| (f * n_bags as f64 + 1e-9).floor() as usize;
        let (val, test) = (floor(self.val), floor(self.test));
        SplitSizes {
            train: n_bags - val - test,
            val,
            test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<BagRecord>,
    pub val: Vec<BagRecord>,
    pub test: Vec<BagRecord>,
}

impl Dataset {
    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.train.len(),
            val: self.val.len(),
            test: self.test.len(),
        }
    }

    pub fn splits(&self) -> [(&'static str, &[BagRecord]); 3] {
        [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ]
    }
}

/// Bag `i` is generated from its own ChaCha stream `i` under `seed`, so the
/// result does not depend on generation order or thread count. Bags are
/// assigned to train, validation and test in id order.
pub fn make_dataset(
    pool: &InstancePool,
    spec: &ScenarioSpec,
    n_bags: usize,
    seed: u64,
    split: SplitFractions,
) -> Result<Dataset> {
    if n_bags < 3 {
        return Err(Error::InvalidConfig(format!(
            "need at least 3 bags, got {n_bags}"
        )));
    }
    split.validate()?;
    if pool.num_classes() != spec.num_classes {
        return Err(Error::InvalidConfig(format!(
            "pool has {} classes but the scenario expects {}",
            pool.num_classes(),
            spec.num_classes
        )));
    }
    let sizes = split.sizes(n_bags);
    if sizes.val == 0 || sizes.test == 0 {
        return Err(Error::InvalidConfig(format!(
            "{n_bags} bags leave an empty split with fractions {split:?}"
        )));
    }

    let bags = (0..n_bags)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let bag_size = match spec.bag_size {
                BagSize::Fixed(n) => n,
                BagSize::Range { min, max } => rng.random_range(min..=max),
            };
            let counts = draw_class_counts(spec, bag_size, &mut rng)?;
            assemble_bag(pool, &counts, i, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut it = bags.into_iter();
    let train = it.by_ref().take(sizes.train).collect();
    let val = it.by_ref().take(sizes.val).collect();
    let test = it.collect();
    Ok(Dataset { train, val, test })
}

/// Sidecar written next to the split files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub source: String,
    pub scenario: ScenarioSpec,
    pub majority_interval: (f64, f64),
    pub seed: u64,
    pub n_bags: usize,
    pub splits: SplitSizes,
    pub feature_dim: usize,
}

pub fn write_bags_jsonl(path: &Path, bags: &[BagRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for bag in bags {
        serde_json::to_writer(&mut w, bag)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bags_jsonl(path: &Path) -> Result<Vec<BagRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut bags = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bag: BagRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row: i + 1,
            message: e.to_string(),
        })?;
        bags.push(bag);
    }
    Ok(bags)
}

/// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` and `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset, manifest: &DatasetManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, bags) in dataset.splits() {
        write_bags_jsonl(&dir.join(format!("{name}.jsonl")), bags)?;
    }
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(Dataset, DatasetManifest)> {
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format_version != crate::FORMAT_VERSION {
        return Err(Error::Format(format!(
            "dataset format version {} is not supported",
            manifest.format_version
        )));
    }
    let dataset = Dataset {
        train: read_bags_jsonl(&dir.join("train.jsonl"))?,
        val: read_bags_jsonl(&dir.join("val.jsonl"))?,
        test: read_bags_jsonl(&dir.join("test.jsonl"))?,
    };
    Ok((dataset, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagsynth::{generate_gaussian_pool, Scenario};

    fn small_setup() -> (InstancePool, ScenarioSpec) {
        let pool = generate_gaussian_pool(3, 50, 2, 3.0, 1).unwrap();
        let spec = ScenarioSpec::new(Scenario::Various, 3, BagSize::Fixed(10)).unwrap();
        (pool, spec)
    }

    #[test]
    fn split_sizes() {
        let f = SplitFractions {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        };
        assert_eq!(
            f.sizes(10),
            SplitSizes {
                train: 6,
                val: 2,
                test: 2
            }
        );
        assert_eq!(
            f.sizes(11),
            SplitSizes {
                train: 7,
                val: 2,
                test: 2
            }
        );
        assert_eq!(
            SplitFractions::default().sizes(700),
            SplitSizes {
                train: 500,
                val: 100,
                test: 100
            }
        );
        assert!(SplitFractions {
            train: 0.5,
            val: 0.5,
            test: 0.0
        }
        .validate()
        .is_err());
        assert!(SplitFractions {
            train: 0.5,
            val: 0.3,
            test: 0.3
        }
        .validate()
        .is_err());
    }

    #[test]
    fn dataset_is_deterministic_and_valid() {
        let (pool, spec) = small_setup();
        let f = SplitFractions {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        };
        let a = make_dataset(&pool, &spec, 10, 42, f).unwrap();
        assert_eq!(
            a.sizes(),
            SplitSizes {
                train: 6,
                val: 2,
                test: 2
            }
        );
        assert_eq!(a, make_dataset(&pool, &spec, 10, 42, f).unwrap());
        assert_ne!(a, make_dataset(&pool, &spec, 10, 43, f).unwrap());
        for (_, bags) in a.splits() {
            for bag in bags {
                bag.validate().unwrap();
            }
        }
        assert!(make_dataset(&pool, &spec, 2, 42, f).is_err());
    }

    #[test]
    fn variable_bag_sizes() {
        let (pool, _) = small_setup();
        let spec =
            ScenarioSpec::new(Scenario::Large, 3, BagSize::Range { min: 3, max: 9 }).unwrap();
        let d = make_dataset(&pool, &spec, 300, 7, SplitFractions::default()).unwrap();
        let sizes: std::collections::BTreeSet<usize> = d.train.iter().map(BagRecord::len).collect();
        assert_eq!(sizes.first(), Some(&3));
        assert_eq!(sizes.last(), Some(&9));
    }

    #[test]
    fn files_round_trip() {
        let (pool, spec) = small_setup();
        let d = make_dataset(&pool, &spec, 20, 3, SplitFractions::default()).unwrap();
        let manifest = DatasetManifest {
            format_version: crate::FORMAT_VERSION,
            config_hash: "abc".into(),
            source: "gaussian".into(),
            scenario: spec,
            majority_interval: spec.interval(),
            seed: 3,
            n_bags: 20,
            splits: d.sizes(),
            feature_dim: 2,
        };
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d, &manifest).unwrap();
        let (back, m) = read_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
        assert_eq!(m, manifest);
        let first = fs::read(dir.path().join("train.jsonl")).unwrap();
        write_dataset(dir.path(), &back, &m).unwrap();
        assert_eq!(first, fs::read(dir.path().join("train.jsonl")).unwrap());
    }
}
