use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MetricKind {
    Accuracy,
    F1Binary,
    Spearman,
    Matthews,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::F1Binary => "f1",
            MetricKind::Spearman => "spearman",
            MetricKind::Matthews => "matthews",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" | "acc" => Ok(MetricKind::Accuracy),
            "f1" | "f1_binary" => Ok(MetricKind::F1Binary),
            "spearman" => Ok(MetricKind::Spearman),
            "matthews" | "mcc" => Ok(MetricKind::Matthews),
            _ => Err(Error::invalid(format!("unknown metric {s:?}"))),
        }
    }
}

/// Scores `predictions` against `golds`. Class labels are passed as whole
/// numbers; the binary metrics treat 1 as the positive class.
pub fn compute_metric(kind: MetricKind, predictions: &[f64], golds: &[f64]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} golds",
            predictions.len(),
            golds.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("metrics need at least one example"));
    }
    Ok(match kind {
        MetricKind::Accuracy => accuracy(predictions, golds),
        MetricKind::F1Binary => f1_binary(predictions, golds),
        MetricKind::Spearman => spearman(predictions, golds),
        MetricKind::Matthews => matthews(predictions, golds),
    })
}

fn accuracy(p: &[f64], g: &[f64]) -> f64 {
    p.iter().zip(g).filter(|(a, b)| a == b).count() as f64 / p.len() as f64
}

/// (tp, fp, fn, tn) with 1 as positive.
fn confusion(p: &[f64], g: &[f64]) -> (f64, f64, f64, f64) {
    let mut c = (0.0, 0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(g) {
        match (a == 1.0, b == 1.0) {
            (true, true) => c.0 += 1.0,
            (true, false) => c.1 += 1.0,
            (false, true) => c.2 += 1.0,
            (false, false) => c.3 += 1.0,
        }
    }
    c
}

fn f1_binary(p: &[f64], g: &[f64]) -> f64 {
    let (tp, fp, fnn, _) = confusion(p, g);
    if tp == 0.0 {
        return 0.0;
    }
    2.0 * tp / (2.0 * tp + fp + fnn)
}

fn matthews(p: &[f64], g: &[f64]) -> f64 {
    let (tp, fp, fnn, tn) = confusion(p, g);
    let denom = (tp + fp) * (tp + fnn) * (tn + fp) * (tn + fnn);
    if denom == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fnn) / denom.sqrt()
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Pearson correlation of average ranks; 0 when either side is constant.
fn spearman(p: &[f64], g: &[f64]) -> f64 {
    pearson(&average_ranks(p), &average_ranks(g))
}
