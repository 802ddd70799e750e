//! Evaluation metrics and the metrics CSV row format.

use crate::error::{Error, Result};

/// Per-class F1 scores weighted by class support.
///
/// A class with an undefined precision or recall (zero denominator)
/// contributes an F1 of zero rather than NaN, so degenerate predictors
/// still produce comparable numbers.
pub fn weighted_f1(
    preds: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<(f32, Vec<f32>)> {
    if preds.is_empty() || labels.is_empty() {
        return Err(Error::contract("cannot score an empty prediction set"));
    }
    if preds.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions against {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if num_classes == 0 {
        return Err(Error::contract("num_classes must be positive"));
    }
    for &v in preds.iter().chain(labels) {
        if v >= num_classes {
            return Err(Error::contract(format!(
                "class index {v} out of range for {num_classes} classes"
            )));
        }
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        support[l] += 1;
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    let mut per_class = vec![0f32; num_classes];
    let mut weighted = 0f64;
    let total = labels.len() as f64;
    for c in 0..num_classes {
        let p_den = tp[c] + fp[c];
        let r_den = tp[c] + fn_[c];
        let precision = if p_den == 0 { 0.0 } else { tp[c] as f64 / p_den as f64 };
        let recall = if r_den == 0 { 0.0 } else { tp[c] as f64 / r_den as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class[c] = f1 as f32;
        weighted += f1 * support[c] as f64 / total;
    }
    Ok((weighted as f32, per_class))
}

/// Euclidean k-nearest-neighbor classification of `test_feats`, scored as
/// weighted F1 against `test_labels`. Votes are majority with ties broken
/// by the class of the nearest neighbor among the tied classes; distance
/// ties fall back to the lower training index, so results are fully
/// deterministic.
pub fn knn_probe(
    train_feats: &[Vec<f32>],
    train_labels: &[usize],
    test_feats: &[Vec<f32>],
    test_labels: &[usize],
    k: usize,
) -> Result<f32> {
    if train_feats.len() != train_labels.len() || test_feats.len() != test_labels.len() {
        return Err(Error::contract("feature and label counts differ"));
    }
    if train_feats.is_empty() || test_feats.is_empty() {
        return Err(Error::contract("probe needs non-empty train and test sets"));
    }
    if k == 0 || k > train_feats.len() {
        return Err(Error::config(format!(
            "k={k} invalid for {} training points",
            train_feats.len()
        )));
    }
    let dim = train_feats[0].len();
    for f in train_feats.iter().chain(test_feats) {
        if f.len() != dim {
            return Err(Error::shape(format!(
                "feature length {} does not match {dim}",
                f.len()
            )));
        }
    }
    let num_classes = train_labels
        .iter()
        .chain(test_labels)
        .max()
        .map_or(0, |&m| m + 1);

    let mut preds = Vec::with_capacity(test_feats.len());
    let mut order: Vec<usize> = Vec::new();
    for query in test_feats {
        let dists: Vec<f64> = train_feats
            .iter()
            .map(|f| {
                f.iter()
                    .zip(query)
                    .map(|(&a, &b)| {
                        let d = a as f64 - b as f64;
                        d * d
                    })
                    .sum()
            })
            .collect();
        order.clear();
        order.extend(0..train_feats.len());
        order.sort_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap().then(a.cmp(&b)));

        let mut votes = vec![0usize; num_classes];
        for &i in order.iter().take(k) {
            votes[train_labels[i]] += 1;
        }
        let top = *votes.iter().max().unwrap();
        let pred = order
            .iter()
            .take(k)
            .map(|&i| train_labels[i])
            .find(|&c| votes[c] == top)
            .unwrap();
        preds.push(pred);
    }
    Ok(weighted_f1(&preds, test_labels, num_classes)?.0)
}

/// One evaluation record, serialized as a CSV line.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f32,
    pub weighted_f1: f32,
    pub per_class: Vec<f32>,
    pub seconds: f64,
}

impl MetricsRow {
    pub fn csv_header(num_classes: usize) -> String {
        let mut out = String::from("epoch,split,loss,weighted_f1");
        for c in 0..num_classes {
            out.push_str(&format!(",f1_c{c}"));
        }
        out.push_str(",seconds");
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "{},{},{:.6},{:.6}",
            self.epoch, self.split, self.loss, self.weighted_f1
        );
        for f in &self.per_class {
            out.push_str(&format!(",{f:.6}"));
        }
        out.push_str(&format!(",{:.6}", self.seconds));
        out
    }
}

/// Renders a complete metrics CSV, header included.
pub fn metrics_csv(rows: &[MetricsRow], num_classes: usize) -> String {
    let mut out = MetricsRow::csv_header(num_classes);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv());
        out.push('\n');
    }
    out
}
