//! Experiment configuration: TOML file, flag overrides and hashing.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lml_core::bagsynth::{BagSize, Scenario, ScenarioSpec, SplitFractions};
use lml_core::countnet::Variant;
use lml_core::diffcore::{Activation, Architecture};
use lml_core::trainkit::TrainConfig;

/// Where instances come from. The only setting without a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Source {
    Gaussian {
        num_classes: usize,
        dim: usize,
        per_class: usize,
        separation: f64,
    },
    Csv {
        path: PathBuf,
        /// Defaults to the largest label plus one.
        num_classes: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BagSizeSetting {
    Fixed(usize),
    Range { min: usize, max: usize },
}

impl From<BagSizeSetting> for BagSize {
    fn from(b: BagSizeSetting) -> Self {
        match b {
            BagSizeSetting::Fixed(n) => BagSize::Fixed(n),
            BagSizeSetting::Range { min, max } => BagSize::Range { min, max },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: Option<Source>,
    pub scenario: Scenario,
    pub bag_size: BagSizeSetting,
    pub n_bags: usize,
    pub split: SplitFractions,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: None,
            scenario: Scenario::Various,
            bag_size: BagSizeSetting::Fixed(10),
            n_bags: 700,
            split: SplitFractions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub methods: Vec<Variant>,
    pub instance_temperature: f64,
    pub bag_temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Relu,
            methods: vec![Variant::CountingNet],
            instance_temperature: 0.1,
            bag_temperature: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Split scored by `evaluate` and `ablation`.
    pub eval_split: EvalSplit,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            out: PathBuf::from("out"),
            eval_split: EvalSplit::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Val,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    /// `seed` is ignored here; each run uses its entry from `run.seeds`.
    pub train: TrainConfig,
    pub run: RunConfig,
}

/// Values from command-line flags; `None` and empty lists leave the file value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seeds: Vec<u64>,
    pub scenario: Option<Scenario>,
    pub methods: Vec<Variant>,
    pub bag_size: Option<usize>,
    pub temperature: Option<f64>,
    pub bag_temperature: Option<f64>,
    pub max_epochs: Option<usize>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Defaults, then the file (if any), then the flags.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                let mut c: ExperimentConfig = toml::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?;
                // Relative pool paths are relative to the config file.
                if let Some(Source::Csv { path: pool, .. }) = &mut c.data.source {
                    if pool.is_relative() {
                        if let Some(dir) = p.parent() {
                            *pool = dir.join(&*pool);
                        }
                    }
                }
                c
            }
            None => ExperimentConfig::default(),
        };
        config.apply(overrides);
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if !o.seeds.is_empty() {
            self.run.seeds = o.seeds.clone();
        }
        if let Some(s) = o.scenario {
            self.data.scenario = s;
        }
        if !o.methods.is_empty() {
            self.model.methods = o.methods.clone();
        }
        if let Some(n) = o.bag_size {
            self.data.bag_size = BagSizeSetting::Fixed(n);
        }
        if let Some(t) = o.temperature {
            self.model.instance_temperature = t;
        }
        if let Some(t) = o.bag_temperature {
            self.model.bag_temperature = t;
        }
        if let Some(e) = o.max_epochs {
            self.train.max_epochs = e;
        }
        if let Some(out) = &o.out {
            self.run.out = out.clone();
        }
    }

    /// Checks everything that can be checked without touching the data.
    pub fn validate(&self) -> anyhow::Result<()> {
        let Some(source) = &self.data.source else {
            bail!("no dataset source: add a [data.source] table (kind = \"gaussian\" or \"csv\")");
        };
        match source {
            Source::Gaussian {
                per_class,
                separation,
                ..
            } => {
                if *per_class < 1 {
                    bail!("data.source.per_class must be at least 1");
                }
                if !(*separation >= 0.0 && separation.is_finite()) {
                    bail!("data.source.separation must be a non-negative number");
                }
            }
            Source::Csv { path, .. } => {
                if !path.is_file() {
                    bail!("pool file {} does not exist", path.display());
                }
            }
        }
        if self.run.seeds.is_empty() {
            bail!("run.seeds must not be empty");
        }
        if self.model.methods.is_empty() {
            bail!("model.methods must not be empty");
        }
        self.data.split.validate()?;
        self.train.validate()?;
        lml_core::diffcore::validate_temperature(self.model.instance_temperature)?;
        lml_core::diffcore::validate_temperature(self.model.bag_temperature)?;
        if let Source::Gaussian {
            num_classes, dim, ..
        } = source
        {
            ScenarioSpec::new(self.data.scenario, *num_classes, self.data.bag_size.into())?;
            self.architecture(*dim, *num_classes)?;
        }
        Ok(())
    }

    pub fn source(&self) -> &Source {
        self.data.source.as_ref().expect("validated")
    }

    pub fn architecture(&self, dim: usize, num_classes: usize) -> anyhow::Result<Architecture> {
        Ok(Architecture::with_hidden(
            dim,
            &self.model.hidden,
            num_classes,
            self.model.activation,
        )?)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    /// Same configuration with a different scenario.
    pub fn with_scenario(&self, scenario: Scenario) -> Self {
        let mut c = self.clone();
        c.data.scenario = scenario;
        c
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of everything that determines a dataset.
    pub fn data_hash(&self, seed: u64) -> String {
        hash_json(&serde_json::json!({ "data": self.data, "seed": seed }))
    }

    /// Hash of everything that determines a trained model and its metrics.
    /// The output directory and the seed list are excluded.
    pub fn run_hash(&self) -> String {
        hash_json(&serde_json::json!({
            "data": self.data,
            "model": self.model,
            "train": self.train,
            "eval_split": self.run.eval_split,
        }))
    }
}

fn hash_json(value: &serde_json::Value) -> String {
    let digest = Sha256::digest(value.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Default configuration rendered for `show-config`, with a commented
/// example for the required source table.
pub fn annotated_defaults(config: &ExperimentConfig) -> String {
    let mut text = config.to_toml();
    if config.data.source.is_none() {
        text.push_str(
            "\n# Required. One of:\n\
             # [data.source]\n\
             # kind = \"gaussian\"\n\
             # num_classes = 3\n\
             # dim = 2\n\
             # per_class = 1000\n\
             # separation = 8.0\n\
             #\n\
             # [data.source]\n\
             # kind = \"csv\"\n\
             # path = \"pool.csv\"\n",
        );
    }
    text
}
