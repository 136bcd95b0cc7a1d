//! Subcommand implementations. Each returns `anyhow::Result`; configuration
//! problems are caught earlier by `ExperimentConfig::validate`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use lml_core::bagsynth::{
    generate_gaussian_pool, load_pool_csv, make_dataset, read_dataset, write_dataset, BagRecord,
    Dataset, DatasetManifest, InstancePool, Scenario, ScenarioSpec,
};
use lml_core::countnet::{CountingNetwork, Variant};
use lml_core::metrics::{
    predict_bags, summarize, write_box_csv, write_metrics_csv, BagPrediction, MetricsReport,
    Summary,
};
use lml_core::trainkit::train_with_observer;
use lml_core::FORMAT_VERSION;

use crate::config::{EvalSplit, ExperimentConfig, Source};

pub fn data_dir(out: &Path, scenario: Scenario, seed: u64) -> PathBuf {
    out.join("data")
        .join(scenario.name())
        .join(format!("seed-{seed}"))
}

pub fn run_dir(out: &Path, scenario: Scenario, method: Variant, seed: u64) -> PathBuf {
    out.join("runs")
        .join(scenario.name())
        .join(format!("{}-seed{seed}", method.name()))
}

pub fn eval_dir(out: &Path, scenario: Scenario) -> PathBuf {
    out.join("eval").join(scenario.name())
}

/// Dataset label used in metrics rows.
fn dataset_name(source: &Source) -> String {
    match source {
        Source::Gaussian { .. } => "gaussian".to_owned(),
        Source::Csv { path, .. } => path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "csv".to_owned()),
    }
}

fn load_pool(config: &ExperimentConfig, seed: u64) -> anyhow::Result<InstancePool> {
    Ok(match config.source() {
        Source::Gaussian {
            num_classes,
            dim,
            per_class,
            separation,
        } => generate_gaussian_pool(*num_classes, *per_class, *dim, *separation, seed)?,
        Source::Csv { path, num_classes } => load_pool_csv(path, *num_classes)?,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_data(config: &ExperimentConfig) -> anyhow::Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for &seed in &config.run.seeds {
        let pool = load_pool(config, seed)?;
        let spec = ScenarioSpec::new(
            config.data.scenario,
            pool.num_classes(),
            config.data.bag_size.into(),
        )?;
        let dataset = make_dataset(&pool, &spec, config.data.n_bags, seed, config.data.split)?;
        let manifest = DatasetManifest {
            format_version: FORMAT_VERSION,
            config_hash: config.data_hash(seed),
            source: serde_json::to_string(config.source())?,
            majority_interval: spec.interval(),
            scenario: spec,
            seed,
            n_bags: config.data.n_bags,
            splits: dataset.sizes(),
            feature_dim: pool.dim(),
        };
        let dir = data_dir(&config.run.out, config.data.scenario, seed);
        write_dataset(&dir, &dataset, &manifest)
            .with_context(|| format!("writing dataset to {}", dir.display()))?;
        eprintln!(
            "wrote {} ({} / {} / {} bags, majority interval [{:.3}, {:.3}])",
            dir.display(),
            manifest.splits.train,
            manifest.splits.val,
            manifest.splits.test,
            manifest.majority_interval.0,
            manifest.majority_interval.1
        );
        written.push(dir);
    }
    Ok(written)
}

fn load_dataset(
    config: &ExperimentConfig,
    seed: u64,
) -> anyhow::Result<(Dataset, DatasetManifest)> {
    let dir = data_dir(&config.run.out, config.data.scenario, seed);
    if !dir.join("manifest.json").is_file() {
        bail!("no dataset at {} (run gen-data first)", dir.display());
    }
    let (dataset, manifest) =
        read_dataset(&dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    if manifest.config_hash != config.data_hash(seed) {
        bail!(
            "dataset at {} was generated from a different data configuration (rerun gen-data)",
            dir.display()
        );
    }
    Ok((dataset, manifest))
}

#[derive(Serialize)]
struct RunMeta<'a> {
    format_version: u32,
    config_hash: String,
    data_hash: &'a str,
    scenario: Scenario,
    method: Variant,
    seed: u64,
    best_epoch: usize,
    best_val_loss: f64,
    epochs_run: usize,
    optimizer_steps: u64,
}

fn train_one(config: &ExperimentConfig, method: Variant, seed: u64) -> anyhow::Result<PathBuf> {
    let (dataset, manifest) = load_dataset(config, seed)?;
    let arch = config.architecture(manifest.feature_dim, manifest.scenario.num_classes)?;
    let net = CountingNetwork::new(
        arch,
        method,
        config.model.instance_temperature,
        config.model.bag_temperature,
        seed,
    )?;
    let dir = run_dir(&config.run.out, config.data.scenario, method, seed);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let mut log = BufWriter::new(File::create(dir.join("train_log.jsonl"))?);
    let (model, history) = train_with_observer(
        net,
        &dataset.train,
        &dataset.val,
        &config.train_config(seed),
        |record| {
            serde_json::to_writer(&mut log, record)?;
            log.write_all(b"\n")?;
            Ok(())
        },
    )?;
    log.flush()?;

    let best = history.best().expect("at least one epoch");
    let config_hash = config.run_hash();
    model.save(
        &dir.join("checkpoint.bin"),
        json!({
            "config_hash": config_hash,
            "data_hash": manifest.config_hash,
            "seed": seed,
            "best_epoch": history.best_epoch,
            "best_val_loss": best.val_loss,
        }),
    )?;
    write_json(
        &dir.join("run.json"),
        &RunMeta {
            format_version: FORMAT_VERSION,
            config_hash,
            data_hash: &manifest.config_hash,
            scenario: config.data.scenario,
            method,
            seed,
            best_epoch: history.best_epoch,
            best_val_loss: best.val_loss,
            epochs_run: history.epochs.len(),
            optimizer_steps: history.optimizer_steps,
        },
    )?;
    eprintln!(
        "trained {}: best epoch {} of {}, val loss {:.6}, val instance acc {:.4}",
        dir.display(),
        history.best_epoch,
        history.epochs.len(),
        best.val_loss,
        best.val_instance_acc
    );
    Ok(dir)
}

fn jobs(config: &ExperimentConfig) -> Vec<(Variant, u64)> {
    config
        .model
        .methods
        .iter()
        .flat_map(|&m| config.run.seeds.iter().map(move |&s| (m, s)))
        .collect()
}

/// One checkpoint and log per (method, seed); runs train in parallel.
pub fn train(config: &ExperimentConfig) -> anyhow::Result<Vec<PathBuf>> {
    jobs(config)
        .into_par_iter()
        .map(|(method, seed)| {
            train_one(config, method, seed).with_context(|| {
                format!("run {}/{} seed {seed} failed", config.data.scenario, method)
            })
        })
        .collect()
}

/// Predictions of one run, exported for external recomputation.
#[derive(Serialize)]
struct PredictionLine<'a> {
    scenario: Scenario,
    method: Variant,
    seed: u64,
    bag_id: usize,
    instance_labels: &'a [usize],
    aggregated_class: usize,
    majority_class: usize,
    count_vector: &'a [usize],
}

struct Evaluated {
    method: Variant,
    seed: u64,
    predictions: Vec<BagPrediction>,
    bags: Vec<BagRecord>,
    report: MetricsReport,
    data_hash: String,
}

fn evaluate_one(
    config: &ExperimentConfig,
    method: Variant,
    seed: u64,
) -> anyhow::Result<Evaluated> {
    let path = run_dir(&config.run.out, config.data.scenario, method, seed).join("checkpoint.bin");
    if !path.is_file() {
        bail!("missing checkpoint {} (run train first)", path.display());
    }
    let (model, meta) =
        CountingNetwork::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if model.variant() != method {
        bail!(
            "checkpoint {} holds a {} model",
            path.display(),
            model.variant()
        );
    }
    let (dataset, manifest) = load_dataset(config, seed)?;
    if meta.extra.get("data_hash").and_then(|h| h.as_str()) != Some(manifest.config_hash.as_str()) {
        bail!(
            "checkpoint {} was trained on a different dataset",
            path.display()
        );
    }
    let bags = match config.run.eval_split {
        EvalSplit::Val => dataset.val,
        EvalSplit::Test => dataset.test,
    };
    let predictions = predict_bags(&model, &bags)?;
    let report = MetricsReport::from_predictions(
        &dataset_name(config.source()),
        config.data.scenario.name(),
        method.name(),
        seed,
        &predictions,
        &bags,
    )?;
    Ok(Evaluated {
        method,
        seed,
        predictions,
        bags,
        report,
        data_hash: manifest.config_hash,
    })
}

fn evaluate_all(config: &ExperimentConfig) -> anyhow::Result<Vec<Evaluated>> {
    jobs(config)
        .into_par_iter()
        .map(|(m, s)| evaluate_one(config, m, s))
        .collect()
}

fn write_summary(dir: &Path, summary: &Summary) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    write_metrics_csv(File::create(dir.join("metrics.csv"))?, &summary.rows)?;
    write_box_csv(
        File::create(dir.join("overestimation.csv"))?,
        &summary.boxes,
    )?;
    Ok(())
}

fn write_predictions(path: &Path, scenario: Scenario, runs: &[Evaluated]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for run in runs {
        for (p, bag) in run.predictions.iter().zip(&run.bags) {
            serde_json::to_writer(
                &mut w,
                &PredictionLine {
                    scenario,
                    method: run.method,
                    seed: run.seed,
                    bag_id: p.bag_id,
                    instance_labels: &p.instance_labels,
                    aggregated_class: p.aggregated_class,
                    majority_class: bag.majority_class,
                    count_vector: &bag.count_vector,
                },
            )?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `metrics.csv`, `overestimation.csv`, `predictions.jsonl` and the
/// `eval.json` sidecar for the configured scenario.
pub fn evaluate(config: &ExperimentConfig) -> anyhow::Result<Vec<MetricsReport>> {
    let runs = evaluate_all(config)?;
    let reports: Vec<MetricsReport> = runs.iter().map(|r| r.report.clone()).collect();
    let summary = summarize(&reports)?;
    let dir = eval_dir(&config.run.out, config.data.scenario);
    write_summary(&dir, &summary)?;
    write_predictions(&dir.join("predictions.jsonl"), config.data.scenario, &runs)?;
    let data_hashes: std::collections::BTreeMap<String, &str> = runs
        .iter()
        .map(|r| (format!("seed-{}", r.seed), r.data_hash.as_str()))
        .collect();
    write_json(
        &dir.join("eval.json"),
        &json!({
            "format_version": FORMAT_VERSION,
            "config_hash": config.run_hash(),
            "data_hashes": data_hashes,
            "split": config.run.eval_split,
            "files": ["metrics.csv", "overestimation.csv", "predictions.jsonl"],
        }),
    )?;
    for row in &summary.rows {
        eprintln!(
            "{} {} seed {}: instance acc {:.4}, bag acc {:.4}, consistency {}, median overestimation {}",
            row.scenario,
            row.method,
            row.seed,
            row.instance_acc,
            row.bag_acc,
            row.consistency_rate.map_or("NA".to_owned(), |r| format!("{r:.4}")),
            row.overestimation.median
        );
    }
    eprintln!("wrote {}", dir.display());
    Ok(reports)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Rows = methods, columns = scenarios, cells = mean over seeds.
fn ablation_tables(reports: &[MetricsReport], scenarios: &[Scenario]) -> (String, String) {
    let cell =
        |m: Variant, s: Scenario, f: &dyn Fn(&MetricsReport) -> Option<f64>| -> Option<f64> {
            let values: Vec<Option<f64>> = reports
                .iter()
                .filter(|r| r.method == m.name() && r.scenario == s.name())
                .map(f)
                .collect();
            if values.is_empty() || values.iter().any(Option::is_none) {
                return None;
            }
            Some(mean(&values.into_iter().flatten().collect::<Vec<_>>()))
        };
    let fmt = |v: Option<f64>| v.map_or("NA".to_owned(), |x| format!("{x:.4}"));

    let mut csv_text = String::from("metric,method");
    let mut md = String::new();
    for s in scenarios {
        csv_text.push_str(&format!(",{s}"));
    }
    csv_text.push('\n');

    type Column<'a> = (&'a str, &'a dyn Fn(&MetricsReport) -> Option<f64>);
    let metrics: [Column; 2] = [
        ("instance_acc", &|r| Some(r.instance_accuracy)),
        ("consistency_rate", &|r| r.consistency_rate),
    ];
    for (name, f) in metrics {
        md.push_str(&format!("{name} (mean over seeds)\n\n| Method |"));
        for s in scenarios {
            md.push_str(&format!(" {s} |"));
        }
        md.push_str("\n|---|");
        md.push_str(&"---|".repeat(scenarios.len()));
        md.push('\n');
        for m in Variant::ALL {
            md.push_str(&format!("| {} |", m.table_label()));
            csv_text.push_str(&format!("{name},{}", m.table_label()));
            for &s in scenarios {
                let v = fmt(cell(m, s, f));
                md.push_str(&format!(" {v} |"));
                csv_text.push_str(&format!(",{v}"));
            }
            md.push('\n');
            csv_text.push('\n');
        }
        md.push('\n');
    }
    (csv_text, md)
}

/// All three variants on identical data and seeds, for each requested
/// scenario, then a combined report under `out/ablation`.
pub fn ablation(
    config: &ExperimentConfig,
    scenarios: &[Scenario],
    skip_train: bool,
) -> anyhow::Result<PathBuf> {
    let mut config = config.clone();
    config.model.methods = Variant::ALL.to_vec();
    let mut reports = Vec::new();
    for &s in scenarios {
        let c = config.with_scenario(s);
        c.validate()?;
        if !skip_train {
            gen_data(&c)?;
            train(&c)?;
        }
        reports.extend(evaluate(&c)?);
    }
    let summary = summarize(&reports)?;
    let dir = config.run.out.join("ablation");
    write_summary(&dir, &summary)?;
    let (csv_text, md) = ablation_tables(&reports, scenarios);
    fs::write(dir.join("table.csv"), csv_text)?;
    fs::write(dir.join("table.md"), &md)?;
    write_json(
        &dir.join("ablation.json"),
        &json!({
            "format_version": FORMAT_VERSION,
            "config_hash": config.run_hash(),
            "scenarios": scenarios,
            "seeds": config.run.seeds,
            "files": ["table.csv", "table.md", "metrics.csv", "overestimation.csv"],
        }),
    )?;
    print!("{md}");
    eprintln!("wrote {}", dir.display());
    Ok(dir)
}
