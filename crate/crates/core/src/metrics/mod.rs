//! GAP@k, PERR and Hit@1 over prediction matrices.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no positive labels in the evaluation set; average precision is undefined")]
    NoPositives,
    #[error("example has no ground-truth labels; skip it")]
    NoLabels,
    #[error("{0}")]
    Shape(String),
    #[error("confidence {value} at ({row}, {label}) outside [0, 1]")]
    OutOfRange { row: usize, label: usize, value: f64 },
}

/// `N × L` confidences in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMatrix {
    rows: usize,
    labels: usize,
    values: Vec<f64>,
}

impl PredictionMatrix {
    pub fn new(rows: usize, labels: usize, values: Vec<f64>) -> Result<Self, MetricsError> {
        if values.len() != rows * labels {
            return Err(MetricsError::Shape(format!("{} values for a {rows}x{labels} matrix", values.len())));
        }
        if labels == 0 {
            return Err(MetricsError::Shape("prediction matrix needs at least one label".into()));
        }
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(MetricsError::OutOfRange { row: i / labels, label: i % labels, value: values[i] });
        }
        Ok(Self { rows, labels, values })
    }

    pub fn zeros(rows: usize, labels: usize) -> Self {
        Self { rows, labels, values: vec![0.0; rows * labels] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn num_labels(&self) -> usize {
        self.labels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.labels..(i + 1) * self.labels]
    }

    pub fn set_row(&mut self, i: usize, row: &[f64]) -> Result<(), MetricsError> {
        if row.len() != self.labels {
            return Err(MetricsError::Shape(format!("row of {} for {} labels", row.len(), self.labels)));
        }
        if let Some(l) = row.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(MetricsError::OutOfRange { row: i, label: l, value: row[l] });
        }
        self.values[i * self.labels..(i + 1) * self.labels].copy_from_slice(row);
        Ok(())
    }

    /// Selects rows by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.labels);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self { rows: indices.len(), labels: self.labels, values }
    }
}

/// Label indices ordered by confidence descending, lowest index first on ties.
pub fn ranked_labels(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

fn check_labels(pred: &PredictionMatrix, labels: &[Vec<usize>]) -> Result<(), MetricsError> {
    if labels.len() != pred.rows() {
        return Err(MetricsError::Shape(format!("{} label rows for {} prediction rows", labels.len(), pred.rows())));
    }
    for (i, ls) in labels.iter().enumerate() {
        if let Some(&l) = ls.iter().find(|&&l| l >= pred.num_labels()) {
            return Err(MetricsError::Shape(format!("row {i} has label {l} outside {} labels", pred.num_labels())));
        }
    }
    Ok(())
}

/// Global average precision over each video's `top_k` predictions.
///
/// Tuples are pooled and sorted by (confidence desc, video asc, label asc).
/// Recall is measured against each video's positives capped at `top_k`.
pub fn global_average_precision(pred: &PredictionMatrix, labels: &[Vec<usize>], top_k: usize) -> Result<f64, MetricsError> {
    check_labels(pred, labels)?;
    let positives: usize = labels.iter().map(|ls| ls.len().min(top_k)).sum();
    if positives == 0 {
        return Err(MetricsError::NoPositives);
    }
    let mut tuples: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (v, ls) in labels.iter().enumerate() {
        let row = pred.row(v);
        for l in ranked_labels(row).into_iter().take(top_k) {
            tuples.push((row[l], v, l, ls.contains(&l)));
        }
    }
    tuples.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (i, &(_, _, _, pos)) in tuples.iter().enumerate() {
        if pos {
            hits += 1;
            ap += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(ap / positives as f64)
}

/// Precision at rank `g = |labels|`.
pub fn perr(row: &[f64], labels: &[usize]) -> Result<f64, MetricsError> {
    let g = labels.len();
    if g == 0 {
        return Err(MetricsError::NoLabels);
    }
    let hit = ranked_labels(row).into_iter().take(g).filter(|l| labels.contains(l)).count();
    Ok(hit as f64 / g as f64)
}

/// 1 if the arg-max label (lowest index on ties) is a ground-truth label.
pub fn hit_at_one(row: &[f64], labels: &[usize]) -> f64 {
    let best = row
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.total_cmp(b).then(j.cmp(i)))
        .map(|(i, _)| i);
    match best {
        Some(b) if labels.contains(&b) => 1.0,
        _ => 0.0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub gap: f64,
    /// Mean over examples with at least one label.
    pub perr: f64,
    pub hit_at_one: f64,
    pub n_examples: usize,
    pub n_positives: usize,
}

impl EvalReport {
    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        format!(
            "gap={}\nperr={}\nhit_at_one={}\nn_examples={}\nn_positives={}\n",
            self.gap, self.perr, self.hit_at_one, self.n_examples, self.n_positives
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "GAP@20 {:.6}  PERR {:.6}  Hit@1 {:.6}  ({} examples, {} positives)",
            self.gap, self.perr, self.hit_at_one, self.n_examples, self.n_positives
        )
    }
}

pub fn evaluate(pred: &PredictionMatrix, labels: &[Vec<usize>], top_k: usize) -> Result<EvalReport, MetricsError> {
    let gap = global_average_precision(pred, labels, top_k)?;
    let (mut perr_sum, mut hit_sum, mut labeled) = (0.0, 0.0, 0usize);
    for (i, ls) in labels.iter().enumerate() {
        if ls.is_empty() {
            continue;
        }
        perr_sum += perr(pred.row(i), ls)?;
        hit_sum += hit_at_one(pred.row(i), ls);
        labeled += 1;
    }
    let d = labeled.max(1) as f64;
    Ok(EvalReport {
        gap,
        perr: perr_sum / d,
        hit_at_one: hit_sum / d,
        n_examples: labels.len(),
        n_positives: labels.iter().map(Vec::len).sum(),
    })
}

/// Per-example error `1 - PERR`; examples without labels get `None`.
pub fn perr_errors(pred: &PredictionMatrix, labels: &[Vec<usize>]) -> Result<Vec<Option<f64>>, MetricsError> {
    check_labels(pred, labels)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, ls)| perr(pred.row(i), ls).ok().map(|p| 1.0 - p))
        .collect())
}
