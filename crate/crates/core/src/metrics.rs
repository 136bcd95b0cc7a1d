//! Instance accuracy, consistency rate, overestimation and run summaries.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bagsynth::BagRecord;
use crate::countnet::BagPredictor;
use crate::diffcore::argmax;
use crate::{Error, Result};

/// Marker written in place of an undefined consistency rate.
pub const UNDEFINED: &str = "NA";

pub const METRICS_HEADER: [&str; 12] = [
    "dataset",
    "scenario",
    "method",
    "seed",
    "instance_acc",
    "bag_acc",
    "consistency_rate",
    "over_min",
    "over_q1",
    "over_med",
    "over_q3",
    "over_max",
];

/// Hard predictions for one bag.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BagPrediction {
    pub bag_id: usize,
    /// Per-instance argmax.
    pub instance_labels: Vec<usize>,
    /// Argmax of the method's aggregated bag output.
    pub aggregated_class: usize,
}

impl BagPrediction {
    /// Predicted count vector over `num_classes`.
    pub fn predicted_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &l in &self.instance_labels {
            counts[l] += 1;
        }
        counts
    }

    /// Majority of the predicted counts; ties go to the lowest class index.
    pub fn counted_majority(&self, num_classes: usize) -> usize {
        let counts: Vec<f64> = self
            .predicted_counts(num_classes)
            .into_iter()
            .map(|n| n as f64)
            .collect();
        argmax(&counts)
    }
}

/// Runs the model over every bag; parallel, returned in bag order.
pub fn predict_bags<M: BagPredictor>(model: &M, bags: &[BagRecord]) -> Result<Vec<BagPrediction>> {
    bags.par_iter()
        .map(|bag| {
            let out = model.forward_bag(bag)?;
            Ok(BagPrediction {
                bag_id: bag.bag_id,
                instance_labels: out.instance_labels(),
                aggregated_class: out.aggregate_argmax(),
            })
        })
        .collect()
}

fn check_aligned(preds: &[BagPrediction], bags: &[BagRecord]) -> Result<()> {
    if preds.len() != bags.len() {
        return Err(Error::ShapeMismatch {
            context: "predictions vs bags".into(),
            expected: vec![bags.len()],
            actual: vec![preds.len()],
        });
    }
    for (p, b) in preds.iter().zip(bags) {
        if p.instance_labels.len() != b.len() {
            return Err(Error::ShapeMismatch {
                context: format!("predicted labels of bag {}", b.bag_id),
                expected: vec![b.len()],
                actual: vec![p.instance_labels.len()],
            });
        }
        if p.instance_labels
            .iter()
            .chain([&p.aggregated_class])
            .any(|&l| l >= b.num_classes())
        {
            return Err(Error::InvalidConfig(format!(
                "bag {}: predicted class out of range",
                b.bag_id
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Consistency {
    /// Bags with a correct aggregated class that also matches the counted majority.
    pub numerator: usize,
    /// Bags with a correct aggregated class.
    pub denominator: usize,
}

impl Consistency {
    /// `None` when no bag has a correct aggregated class.
    pub fn rate(&self) -> Option<f64> {
        (self.denominator > 0).then(|| self.numerator as f64 / self.denominator as f64)
    }
}

pub fn consistency_from_predictions(
    preds: &[BagPrediction],
    bags: &[BagRecord],
) -> Result<Consistency> {
    check_aligned(preds, bags)?;
    let mut c = Consistency::default();
    for (p, b) in preds.iter().zip(bags) {
        if p.aggregated_class == b.majority_class {
            c.denominator += 1;
            if p.counted_majority(b.num_classes()) == p.aggregated_class {
                c.numerator += 1;
            }
        }
    }
    Ok(c)
}

pub fn consistency_rate<M: BagPredictor>(model: &M, bags: &[BagRecord]) -> Result<Option<f64>> {
    Ok(consistency_from_predictions(&predict_bags(model, bags)?, bags)?.rate())
}

/// Predicted minus true number of instances of each bag's true majority class.
pub fn overestimation_from_predictions(
    preds: &[BagPrediction],
    bags: &[BagRecord],
) -> Result<Vec<i64>> {
    check_aligned(preds, bags)?;
    Ok(preds
        .iter()
        .zip(bags)
        .map(|(p, b)| {
            let k = b.majority_class;
            let predicted = p.instance_labels.iter().filter(|&&l| l == k).count();
            predicted as i64 - b.count_vector[k] as i64
        })
        .collect())
}

pub fn overestimation_values<M: BagPredictor>(model: &M, bags: &[BagRecord]) -> Result<Vec<i64>> {
    overestimation_from_predictions(&predict_bags(model, bags)?, bags)
}

/// Micro-averaged accuracy over all instances of all bags.
pub fn instance_accuracy(predictions: &[Vec<usize>], hidden: &[Vec<usize>]) -> Result<f64> {
    let lens = |v: &[Vec<usize>]| v.iter().map(Vec::len).collect::<Vec<_>>();
    if lens(predictions) != lens(hidden) {
        return Err(Error::ShapeMismatch {
            context: "instance predictions vs hidden labels".into(),
            expected: lens(hidden),
            actual: lens(predictions),
        });
    }
    let total: usize = hidden.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::EmptyBag);
    }
    let correct = predictions
        .iter()
        .flatten()
        .zip(hidden.iter().flatten())
        .filter(|(p, h)| p == h)
        .count();
    Ok(correct as f64 / total as f64)
}

/// Minimum, quartiles and maximum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile by linear interpolation between closest ranks: position
/// `q * (n - 1)` in the sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn five_number(values: &[i64]) -> Option<FiveNumber> {
    if values.is_empty() {
        return None;
    }
    let mut sorted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    Some(FiveNumber {
        min: sorted[0],
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub scenario: String,
    pub method: String,
    pub seed: u64,
    pub instance_accuracy: f64,
    pub bag_accuracy: f64,
    /// `None` when undefined.
    pub consistency_rate: Option<f64>,
    pub overestimation_values: Vec<i64>,
}

impl MetricsReport {
    /// Builds a report from hard predictions.
    pub fn from_predictions(
        dataset: &str,
        scenario: &str,
        method: &str,
        seed: u64,
        preds: &[BagPrediction],
        bags: &[BagRecord],
    ) -> Result<Self> {
        check_aligned(preds, bags)?;
        if bags.is_empty() {
            return Err(Error::InvalidConfig(
                "cannot report on an empty split".into(),
            ));
        }
        let predicted: Vec<Vec<usize>> = preds.iter().map(|p| p.instance_labels.clone()).collect();
        let hidden: Vec<Vec<usize>> = bags.iter().map(|b| b.hidden_labels.clone()).collect();
        let bag_hits = preds
            .iter()
            .zip(bags)
            .filter(|(p, b)| p.aggregated_class == b.majority_class)
            .count();
        Ok(Self {
            dataset: dataset.to_owned(),
            scenario: scenario.to_owned(),
            method: method.to_owned(),
            seed,
            instance_accuracy: instance_accuracy(&predicted, &hidden)?,
            bag_accuracy: bag_hits as f64 / bags.len() as f64,
            consistency_rate: consistency_from_predictions(preds, bags)?.rate(),
            overestimation_values: overestimation_from_predictions(preds, bags)?,
        })
    }

    pub fn evaluate<M: BagPredictor>(
        model: &M,
        bags: &[BagRecord],
        dataset: &str,
        scenario: &str,
        method: &str,
        seed: u64,
    ) -> Result<Self> {
        let preds = predict_bags(model, bags)?;
        Self::from_predictions(dataset, scenario, method, seed, &preds, bags)
    }

    pub fn overestimation_summary(&self) -> Option<FiveNumber> {
        five_number(&self.overestimation_values)
    }
}

/// One metrics CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub scenario: String,
    pub method: String,
    pub seed: u64,
    pub instance_acc: f64,
    pub bag_acc: f64,
    pub consistency_rate: Option<f64>,
    pub overestimation: FiveNumber,
}

/// Overestimation values pooled over the seeds of one (dataset, scenario, method).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSummary {
    pub dataset: String,
    pub scenario: String,
    pub method: String,
    pub runs: usize,
    pub bags: usize,
    pub overestimation: FiveNumber,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub boxes: Vec<BoxSummary>,
}

/// Rows sorted by (dataset, scenario, method, seed), plus pooled box-plot
/// summaries in the same order.
pub fn summarize(reports: &[MetricsReport]) -> Result<Summary> {
    if reports.is_empty() {
        return Err(Error::InvalidConfig("nothing to summarize".into()));
    }
    let mut sorted: Vec<&MetricsReport> = reports.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.dataset, &a.scenario, &a.method, a.seed).cmp(&(
            &b.dataset,
            &b.scenario,
            &b.method,
            b.seed,
        ))
    });

    let mut rows = Vec::with_capacity(sorted.len());
    let mut pooled: BTreeMap<(&str, &str, &str), (usize, Vec<i64>)> = BTreeMap::new();
    for r in sorted {
        let overestimation = r.overestimation_summary().ok_or_else(|| {
            Error::InvalidConfig(format!(
                "run {}/{}/{} seed {} has no bags",
                r.dataset, r.scenario, r.method, r.seed
            ))
        })?;
        rows.push(SummaryRow {
            dataset: r.dataset.clone(),
            scenario: r.scenario.clone(),
            method: r.method.clone(),
            seed: r.seed,
            instance_acc: r.instance_accuracy,
            bag_acc: r.bag_accuracy,
            consistency_rate: r.consistency_rate,
            overestimation,
        });
        let entry = pooled
            .entry((&r.dataset, &r.scenario, &r.method))
            .or_default();
        entry.0 += 1;
        entry.1.extend(&r.overestimation_values);
    }
    let boxes = pooled
        .into_iter()
        .map(|((dataset, scenario, method), (runs, values))| BoxSummary {
            dataset: dataset.to_owned(),
            scenario: scenario.to_owned(),
            method: method.to_owned(),
            runs,
            bags: values.len(),
            overestimation: five_number(&values).expect("non-empty by construction"),
        })
        .collect();
    Ok(Summary { rows, boxes })
}

fn fmt_rate(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_owned(), |x| x.to_string())
}

pub fn write_metrics_csv<W: Write>(w: W, rows: &[SummaryRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_HEADER)?;
    for r in rows {
        let o = &r.overestimation;
        out.write_record([
            r.dataset.clone(),
            r.scenario.clone(),
            r.method.clone(),
            r.seed.to_string(),
            r.instance_acc.to_string(),
            r.bag_acc.to_string(),
            fmt_rate(r.consistency_rate),
            o.min.to_string(),
            o.q1.to_string(),
            o.median.to_string(),
            o.q3.to_string(),
            o.max.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub const BOX_HEADER: [&str; 10] = [
    "dataset", "scenario", "method", "runs", "bags", "min", "q1", "median", "q3", "max",
];

/// Pooled overestimation quartiles, one row per (dataset, scenario, method).
pub fn write_box_csv<W: Write>(w: W, boxes: &[BoxSummary]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(BOX_HEADER)?;
    for b in boxes {
        let o = &b.overestimation;
        out.write_record([
            b.dataset.clone(),
            b.scenario.clone(),
            b.method.clone(),
            b.runs.to_string(),
            b.bags.to_string(),
            o.min.to_string(),
            o.q1.to_string(),
            o.median.to_string(),
            o.q3.to_string(),
            o.max.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
