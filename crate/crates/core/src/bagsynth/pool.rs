use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// Labeled feature vectors grouped by class.
#[derive(Clone, Debug, PartialEq)]
pub struct InstancePool {
    dim: usize,
    classes: Vec<Vec<Vec<f64>>>,
}

impl InstancePool {
    /// `classes[k]` holds the instances of class `k`; every vector must have
    /// length `dim`. Classes may be empty until something samples from them.
    pub fn new(dim: usize, classes: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig(
                "feature dimension must be at least 1".into(),
            ));
        }
        if classes.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "a pool needs at least two classes, got {}",
                classes.len()
            )));
        }
        for (k, class) in classes.iter().enumerate() {
            if let Some(bad) = class.iter().find(|v| v.len() != dim) {
                return Err(Error::ShapeMismatch {
                    context: format!("instance of class {k}"),
                    expected: vec![dim],
                    actual: vec![bad.len()],
                });
            }
        }
        Ok(Self { dim, classes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, k: usize) -> &[Vec<f64>] {
        &self.classes[k]
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One row per instance: features, then the integer label. Rows are grouped
    /// by class in class order.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (k, class) in self.classes.iter().enumerate() {
            for v in class {
                for x in v {
                    write!(w, "{x},")?;
                }
                writeln!(w, "{k}")?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Unit-norm class directions with pairwise distance at least 1: `+e_k` for
/// the first `dim` classes, then `-e_k`.
pub fn class_centers(num_classes: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    if dim < 1 || num_classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "need dim >= 1 and at least two classes, got dim={dim}, classes={num_classes}"
        )));
    }
    if num_classes > 2 * dim {
        return Err(Error::InvalidConfig(format!(
            "cannot place {num_classes} separated class centers in {dim} dimensions (max {})",
            2 * dim
        )));
    }
    Ok((0..num_classes)
        .map(|k| {
            let mut u = vec![0.0; dim];
            u[k % dim] = if k < dim { 1.0 } else { -1.0 };
            u
        })
        .collect())
}

/// Class `k` is an isotropic unit-variance Gaussian centered at
/// `separation * u_k`, with `u_k` from [`class_centers`].
pub fn generate_gaussian_pool(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<InstancePool> {
    if per_class < 1 {
        return Err(Error::InvalidConfig("per_class must be at least 1".into()));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "separation must be a non-negative finite number, got {separation}"
        )));
    }
    let centers = class_centers(num_classes, dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = centers
        .iter()
        .map(|u| {
            (0..per_class)
                .map(|_| {
                    u.iter()
                        .map(|c| {
                            let noise: f64 = StandardNormal.sample(&mut rng);
                            separation * c + noise
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    InstancePool::new(dim, classes)
}

fn parse_error(path: &Path, row: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        row,
        message: message.into(),
    }
}

/// Reads a pool CSV: `d` numeric feature columns then one integer label.
///
/// A first row with no numeric field is treated as a header. Row numbers in
/// errors are 1-based file lines. With `num_classes = None` the class count is
/// `max label + 1`.
pub fn load_pool_csv(path: &Path, num_classes: Option<usize>) -> Result<InstancePool> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;

    let mut width: Option<usize> = None;
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(i + 1, |p| p.line() as usize);
        if i == 0 && record.iter().all(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        if record.len() < 2 {
            return Err(parse_error(
                path,
                line,
                "need at least one feature column and a label",
            ));
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(parse_error(
                    path,
                    line,
                    format!("expected {w} columns, found {}", record.len()),
                ))
            }
            _ => {}
        }
        let mut features = Vec::with_capacity(record.len() - 1);
        for (col, field) in record.iter().take(record.len() - 1).enumerate() {
            let value: f64 = field.parse().map_err(|_| {
                parse_error(
                    path,
                    line,
                    format!("column {}: {field:?} is not a number", col + 1),
                )
            })?;
            if !value.is_finite() {
                return Err(parse_error(
                    path,
                    line,
                    format!("column {}: non-finite value", col + 1),
                ));
            }
            features.push(value);
        }
        let raw_label = &record[record.len() - 1];
        let label: usize = raw_label.parse().map_err(|_| {
            parse_error(
                path,
                line,
                format!("label {raw_label:?} is not a non-negative integer"),
            )
        })?;
        if let Some(c) = num_classes {
            if label >= c {
                return Err(parse_error(
                    path,
                    line,
                    format!("label {label} outside [0, {c})"),
                ));
            }
        }
        rows.push((features, label));
    }

    let dim = width.ok_or_else(|| parse_error(path, 1, "no data rows"))? - 1;
    let c = num_classes.unwrap_or_else(|| rows.iter().map(|r| r.1).max().unwrap_or(0) + 1);
    let mut classes = vec![Vec::new(); c.max(2)];
    for (features, label) in rows {
        classes[label].push(features);
    }
    InstancePool::new(dim, classes)
}
