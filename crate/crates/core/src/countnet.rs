//! The counting network and its ablation variants.
//!
//! Every variant shares the same backbone and differs only in three knobs,
//! collected in a [`ForwardPlan`]:
//!
//! | variant       | instance softmax | aggregation | bag head                 |
//! |---------------|------------------|-------------|--------------------------|
//! | `CountingNet` | temperature `T`  | sum         | temperature softmax      |
//! | `NoCount`     | standard (`T=1`) | sum         | temperature softmax      |
//! | `OutputMean`  | standard (`T=1`) | mean        | identity (floored log)   |
//!
//! With a low instance temperature each instance output is nearly one-hot, so
//! the summed vector is an instance count and its temperature softmax selects
//! the counted majority.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bagsynth::BagRecord;
use crate::diffcore::{
    argmax, cross_entropy, log_softmax_with_temperature, mlp_on_tape, softmax_with_temperature,
    validate_temperature, Architecture, ParameterSet, Tape, Tensor, Var,
};
use crate::{Error, Result};

/// Floor applied before the log of a mean confidence.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "counting")]
    CountingNet,
    #[serde(rename = "nocount")]
    NoCount,
    #[serde(rename = "outputmean")]
    OutputMean,
}

impl Variant {
    /// Table order: baseline first, full method last.
    pub const ALL: [Variant; 3] = [Variant::OutputMean, Variant::NoCount, Variant::CountingNet];

    pub fn name(self) -> &'static str {
        match self {
            Variant::CountingNet => "counting",
            Variant::NoCount => "nocount",
            Variant::OutputMean => "outputmean",
        }
    }

    /// Row label for ablation tables.
    pub fn table_label(self) -> &'static str {
        match self {
            Variant::CountingNet => "CountingNet (Count + Max class)",
            Variant::NoCount => "NoCount (Max class only)",
            Variant::OutputMean => "OutputMean",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "counting" | "countingnet" => Ok(Variant::CountingNet),
            "nocount" => Ok(Variant::NoCount),
            "outputmean" => Ok(Variant::OutputMean),
            other => Err(Error::InvalidConfig(format!(
                "unknown method {other:?} (expected counting, nocount or outputmean)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Aggregation {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BagHead {
    /// `softmax(aggregate / T)`.
    TemperatureSoftmax { temperature: f64 },
    /// The aggregate itself is the bag distribution; its log is floored at
    /// [`PROBABILITY_FLOOR`].
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardPlan {
    pub instance_temperature: f64,
    pub aggregation: Aggregation,
    pub head: BagHead,
}

/// Nodes produced by [`record_bag`].
#[derive(Clone, Copy, Debug)]
pub struct BagGraph {
    pub logits: Var,
    pub instance_probs: Var,
    pub aggregate: Var,
    pub bag_probs: Var,
    pub bag_log_probs: Var,
}

/// Records the full bag computation for `instances` on `tape`.
pub fn record_bag(
    tape: &mut Tape,
    params: &ParameterSet,
    arch: &Architecture,
    plan: &ForwardPlan,
    instances: &[Vec<f64>],
) -> Result<BagGraph> {
    if instances.is_empty() {
        return Err(Error::EmptyBag);
    }
    let x = tape.constant(Tensor::from_rows(instances)?);
    let logits = mlp_on_tape(tape, params, arch, x)?;
    let instance_probs = tape.softmax(logits, plan.instance_temperature)?;
    let aggregate = match plan.aggregation {
        Aggregation::Sum => tape.sum_rows(instance_probs),
        Aggregation::Mean => tape.mean_rows(instance_probs),
    };
    let (bag_probs, bag_log_probs) = match plan.head {
        BagHead::TemperatureSoftmax { temperature } => (
            tape.softmax(aggregate, temperature)?,
            tape.log_softmax(aggregate, temperature)?,
        ),
        BagHead::Identity => (aggregate, tape.floored_log(aggregate, PROBABILITY_FLOOR)),
    };
    Ok(BagGraph {
        logits,
        instance_probs,
        aggregate,
        bag_probs,
        bag_log_probs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BagForwardResult {
    /// `|B| x C`, one distribution per instance.
    pub instance_distributions: Tensor,
    /// Summed (or averaged, for `OutputMean`) instance distributions.
    pub aggregate: Vec<f64>,
    pub bag_distribution: Vec<f64>,
    pub bag_log_distribution: Vec<f64>,
}

impl BagForwardResult {
    pub fn instance_labels(&self) -> Vec<usize> {
        (0..self.instance_distributions.rows())
            .map(|i| argmax(self.instance_distributions.row_slice(i)))
            .collect()
    }

    pub fn aggregate_argmax(&self) -> usize {
        argmax(&self.aggregate)
    }

    pub fn bag_argmax(&self) -> usize {
        argmax(&self.bag_distribution)
    }
}

/// Anything that maps a bag to instance and bag distributions. Implemented by
/// [`CountingNetwork`] and by [`LabelOracle`].
pub trait BagPredictor: Sync {
    fn num_classes(&self) -> usize;

    fn forward_bag(&self, bag: &BagRecord) -> Result<BagForwardResult>;

    /// Cross-entropy of the bag distribution against the majority label.
    fn bag_loss_value(&self, bag: &BagRecord) -> Result<f64> {
        let out = self.forward_bag(bag)?;
        cross_entropy(&bag.majority_one_hot(), &out.bag_log_distribution)
    }
}

#[derive(Clone, Debug)]
pub struct CountingNetwork {
    arch: Architecture,
    params: ParameterSet,
    instance_temperature: f64,
    bag_temperature: f64,
    variant: Variant,
}

impl CountingNetwork {
    /// Fresh network with seeded uniform weights.
    pub fn new(
        arch: Architecture,
        variant: Variant,
        instance_temperature: f64,
        bag_temperature: f64,
        seed: u64,
    ) -> Result<Self> {
        let params = arch.init_params(seed);
        Self::from_parts(arch, params, variant, instance_temperature, bag_temperature)
    }

    pub fn from_parts(
        arch: Architecture,
        params: ParameterSet,
        variant: Variant,
        instance_temperature: f64,
        bag_temperature: f64,
    ) -> Result<Self> {
        validate_temperature(instance_temperature)?;
        validate_temperature(bag_temperature)?;
        if arch.output_dim() < 2 {
            return Err(Error::InvalidConfig(
                "the network needs at least two output classes".into(),
            ));
        }
        arch.check_params(&params)?;
        Ok(Self {
            arch,
            params,
            instance_temperature,
            bag_temperature,
            variant,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn instance_temperature(&self) -> f64 {
        self.instance_temperature
    }

    pub fn bag_temperature(&self) -> f64 {
        self.bag_temperature
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.input_dim()
    }

    pub fn plan(&self) -> ForwardPlan {
        let head = BagHead::TemperatureSoftmax {
            temperature: self.bag_temperature,
        };
        match self.variant {
            Variant::CountingNet => ForwardPlan {
                instance_temperature: self.instance_temperature,
                aggregation: Aggregation::Sum,
                head,
            },
            Variant::NoCount => ForwardPlan {
                instance_temperature: 1.0,
                aggregation: Aggregation::Sum,
                head,
            },
            Variant::OutputMean => ForwardPlan {
                instance_temperature: 1.0,
                aggregation: Aggregation::Mean,
                head: BagHead::Identity,
            },
        }
    }

    fn instance_temperature_used(&self) -> f64 {
        self.plan().instance_temperature
    }

    /// Backbone outputs for each instance, `|B| x C`.
    pub fn logits(&self, instances: &[Vec<f64>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(instances)?);
        let out = mlp_on_tape(&mut tape, &self.params, &self.arch, x)?;
        Ok(tape.value(out).clone())
    }

    /// Class distribution of one instance under this variant's instance softmax.
    pub fn instance_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let logits = self.logits(&[x.to_vec()])?;
        softmax_with_temperature(logits.data(), self.instance_temperature_used())
    }

    pub fn forward_instances(&self, instances: &[Vec<f64>]) -> Result<BagForwardResult> {
        self.forward_with_plan(&self.plan(), instances)
    }

    /// Forward pass under an arbitrary plan over this network's backbone.
    pub fn forward_with_plan(
        &self,
        plan: &ForwardPlan,
        instances: &[Vec<f64>],
    ) -> Result<BagForwardResult> {
        let mut tape = Tape::new();
        let g = record_bag(&mut tape, &self.params, &self.arch, plan, instances)?;
        Ok(BagForwardResult {
            instance_distributions: tape.value(g.instance_probs).clone(),
            aggregate: tape.value(g.aggregate).data().to_vec(),
            bag_distribution: tape.value(g.bag_probs).data().to_vec(),
            bag_log_distribution: tape.value(g.bag_log_probs).data().to_vec(),
        })
    }

    /// Per-instance argmax; the lowest class index wins exact ties.
    pub fn predict_instance_labels(&self, instances: &[Vec<f64>]) -> Result<Vec<usize>> {
        if instances.is_empty() {
            return Err(Error::EmptyBag);
        }
        Ok(self.forward_instances(instances)?.instance_labels())
    }

    /// Records the bag loss on `tape` and returns the scalar node.
    pub fn bag_loss(&self, tape: &mut Tape, bag: &BagRecord) -> Result<Var> {
        let g = record_bag(tape, &self.params, &self.arch, &self.plan(), &bag.instances)?;
        tape.cross_entropy(g.bag_log_probs, &bag.majority_one_hot())
    }

    pub fn metadata(&self) -> CheckpointMeta {
        CheckpointMeta {
            format_version: crate::FORMAT_VERSION,
            variant: self.variant,
            instance_temperature: self.instance_temperature,
            bag_temperature: self.bag_temperature,
            architecture: self.arch.clone(),
            num_classes: self.arch.output_dim(),
            feature_dim: self.arch.input_dim(),
            extra: serde_json::Value::Null,
        }
    }

    /// Checkpoint layout:
    ///
    /// ```text
    /// b"LMLCKPT\0" | u32 LE format version | u32 LE metadata length | metadata JSON | parameter block
    /// ```
    ///
    /// The parameter block is [`ParameterSet::write_to`]. `extra` lands in the
    /// metadata verbatim.
    pub fn write_checkpoint(&self, mut w: impl Write, extra: serde_json::Value) -> Result<()> {
        let meta = CheckpointMeta {
            extra,
            ..self.metadata()
        };
        let meta = serde_json::to_vec(&meta)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&crate::FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        self.params.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<(Self, CheckpointMeta)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != crate::FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        r.read_exact(&mut word)?;
        let mut meta = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut meta)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta)?;
        let params = ParameterSet::read_from(&mut r)?;
        let net = Self::from_parts(
            meta.architecture.clone(),
            params,
            meta.variant,
            meta.instance_temperature,
            meta.bag_temperature,
        )?;
        Ok((net, meta))
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf, extra)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        Self::read_checkpoint(fs::read(path)?.as_slice())
    }
}

impl BagPredictor for CountingNetwork {
    fn num_classes(&self) -> usize {
        self.arch.output_dim()
    }

    fn forward_bag(&self, bag: &BagRecord) -> Result<BagForwardResult> {
        self.forward_instances(&bag.instances)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"LMLCKPT\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub variant: Variant,
    pub instance_temperature: f64,
    pub bag_temperature: f64,
    pub architecture: Architecture,
    pub num_classes: usize,
    pub feature_dim: usize,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Emits the true one-hot label for every instance and the temperature
/// argmax of the true counts for the bag.
#[derive(Clone, Copy, Debug)]
pub struct LabelOracle {
    pub num_classes: usize,
    pub bag_temperature: f64,
}

impl BagPredictor for LabelOracle {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn forward_bag(&self, bag: &BagRecord) -> Result<BagForwardResult> {
        if bag.is_empty() {
            return Err(Error::EmptyBag);
        }
        let c = self.num_classes;
        let mut dists = vec![0.0; bag.len() * c];
        for (i, &label) in bag.hidden_labels.iter().enumerate() {
            dists[i * c + label] = 1.0;
        }
        let aggregate: Vec<f64> = bag.count_vector.iter().map(|&n| n as f64).collect();
        Ok(BagForwardResult {
            instance_distributions: Tensor::new(vec![bag.len(), c], dists)?,
            bag_distribution: softmax_with_temperature(&aggregate, self.bag_temperature)?,
            bag_log_distribution: log_softmax_with_temperature(&aggregate, self.bag_temperature)?,
            aggregate,
        })
    }
}
