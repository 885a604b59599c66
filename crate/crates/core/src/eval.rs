//! Confusion matrices, micro and per-class metrics, permutation importance
//! and the per-slot time-series export.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::Category;
use crate::error::{Error, Result};

/// Rows are true labels, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    /// CSV with a header row of predicted labels and one row per true label.
    pub fn to_csv(&self, names: &[&str]) -> String {
        let mut s = String::from("true\\pred");
        for n in names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (name, row) in names.iter().zip(&self.counts) {
            s.push_str(name);
            for c in row {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion(truth: &[usize], predicted: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::shape("confusion", &[truth.len()], &[predicted.len()]));
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= k || p >= k {
            return Err(Error::contract(format!("label pair ({t}, {p}) out of range for {k} classes")));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision_micro: f64,
    pub recall_micro: f64,
    pub f1_micro: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub per_class: Vec<ClassMetrics>,
    pub total: u64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Micro metrics pool true positives, false positives and false negatives
/// over classes; per-class values use 0 for 0/0.
pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("cannot compute metrics on an empty confusion matrix".into()));
    }
    let k = cm.k();
    let mut per_class = Vec::with_capacity(k);
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    for c in 0..k {
        let tp = cm.counts[c][c];
        let predicted: u64 = (0..k).map(|r| cm.counts[r][c]).sum();
        let support: u64 = cm.counts[c].iter().sum();
        tp_all += tp;
        fp_all += predicted - tp;
        fn_all += support - tp;
        let (p, r) = (ratio(tp, predicted), ratio(tp, support));
        per_class.push(ClassMetrics {
            precision: p,
            recall: r,
            f1: f1(p, r),
            support,
        });
    }
    let precision_micro = ratio(tp_all, tp_all + fp_all);
    let recall_micro = ratio(tp_all, tp_all + fn_all);
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    Ok(Metrics {
        accuracy: ratio(cm.trace(), total),
        precision_micro,
        recall_micro,
        f1_micro: f1(precision_micro, recall_micro),
        precision_macro: mean(|m| m.precision),
        recall_macro: mean(|m| m.recall),
        f1_macro: mean(|m| m.f1),
        per_class,
        total,
    })
}

impl Metrics {
    /// One row per class, then `macro` and `micro`; the micro row's
    /// precision, recall and f1 all equal accuracy.
    pub fn to_csv(&self, names: &[&str]) -> String {
        let mut s = String::from("scope,precision,recall,f1,support\n");
        for (n, m) in names.iter().zip(&self.per_class) {
            let _ = writeln!(s, "{n},{},{},{},{}", m.precision, m.recall, m.f1, m.support);
        }
        let _ = writeln!(
            s,
            "macro,{},{},{},{}",
            self.precision_macro, self.recall_macro, self.f1_macro, self.total
        );
        let _ = writeln!(
            s,
            "micro,{},{},{},{}",
            self.precision_micro, self.recall_micro, self.f1_micro, self.total
        );
        s
    }
}

pub fn category_names() -> Vec<&'static str> {
    Category::ALL.iter().map(|c| c.name()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub feature: usize,
    /// Micro F1 with the column intact.
    pub baseline: f64,
    pub mean: f64,
    pub std: f64,
    pub drops: Vec<f64>,
}

/// Mean drop in micro F1 when column `feature` of `rows` is shuffled,
/// over `repeats` seeded shuffles. `predict` maps rows to class indices.
pub fn permutation_importance<R, F>(
    rows: &[Vec<f64>],
    labels: &[usize],
    k: usize,
    feature: usize,
    repeats: usize,
    rng: &mut R,
    predict: F,
) -> Result<Importance>
where
    R: Rng,
    F: Fn(&[Vec<f64>]) -> Result<Vec<usize>>,
{
    if repeats < 1 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let width = rows.first().map_or(0, Vec::len);
    if feature >= width {
        return Err(Error::contract(format!("feature {feature} out of range for {width} columns")));
    }
    let score = |rows: &[Vec<f64>]| -> Result<f64> { Ok(metrics(&confusion(labels, &predict(rows)?, k)?)?.f1_micro) };
    let baseline = score(rows)?;
    let mut column: Vec<f64> = rows.iter().map(|r| r[feature]).collect();
    let mut work = rows.to_vec();
    let mut drops = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        column.shuffle(rng);
        for (r, v) in work.iter_mut().zip(&column) {
            r[feature] = *v;
        }
        drops.push(baseline - score(&work)?);
    }
    let mean = drops.iter().sum::<f64>() / repeats as f64;
    let var = drops.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / repeats as f64;
    Ok(Importance {
        feature,
        baseline,
        mean,
        std: var.sqrt(),
        drops,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeseriesRow {
    pub storm_id: String,
    pub timestamp: String,
    pub split: String,
    pub true_label: Category,
    pub predicted_label: Category,
    pub c: usize,
    pub v_neg: f64,
    pub v_pos: f64,
    /// Mean positive-sentiment score of the slot's tweets; 0 when empty.
    pub mean_sentiment: f64,
}

pub fn export_timeseries(path: &Path, rows: &[TimeseriesRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_timeseries(path: &Path) -> Result<Vec<TimeseriesRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn confusion_examples() {
        let cm = confusion(&[0, 1, 2, 3], &[0, 1, 2, 3], 4).unwrap();
        assert_eq!(cm.trace(), 4);
        let cm = confusion(&[0], &[1], 4).unwrap();
        assert_eq!(cm.counts[0][1], 1);
        assert_eq!(cm.total(), 1);
        assert_eq!(confusion(&[], &[], 4).unwrap(), ConfusionMatrix::zeros(4));
        assert!(confusion(&[0], &[], 4).is_err());
        assert!(confusion(&[0], &[4], 4).is_err());
    }

    #[test]
    fn metrics_hand_case() {
        let cm = ConfusionMatrix {
            counts: vec![vec![1, 1], vec![0, 2]],
        };
        let m = metrics(&cm).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.f1_micro, 0.75);
        assert_eq!(m.per_class[0].precision, 1.0);
        assert!((m.per_class[1].precision - 2.0 / 3.0).abs() < 1e-15);
        assert!(metrics(&ConfusionMatrix::zeros(4)).is_err());
    }

    #[test]
    fn perfect_predictions_score_one() {
        let y = [0, 1, 1, 3, 2];
        let m = metrics(&confusion(&y, &y, 4).unwrap()).unwrap();
        assert_eq!((m.accuracy, m.precision_micro, m.recall_micro, m.f1_micro), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn importance_of_constant_and_defining_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rows: Vec<Vec<f64>> = (0..200).map(|i| vec![(i % 2) as f64, 7.0]).collect();
        let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let predict = |rows: &[Vec<f64>]| Ok(rows.iter().map(|r| usize::from(r[0] > 0.5)).collect());
        let c = permutation_importance(&rows, &labels, 2, 1, 5, &mut rng, predict).unwrap();
        assert_eq!(c.mean, 0.0);
        let d = permutation_importance(&rows, &labels, 2, 0, 5, &mut rng, predict).unwrap();
        assert!(d.mean > 0.2, "{}", d.mean);
        assert!(permutation_importance(&rows, &labels, 2, 2, 5, &mut rng, predict).is_err());
    }

    #[test]
    fn timeseries_round_trip() {
        let rows = vec![
            TimeseriesRow {
                storm_id: "A".into(),
                timestamp: "2015-01-01T00:00:00Z".into(),
                split: "test".into(),
                true_label: Category::TS,
                predicted_label: Category::TD,
                c: 0,
                v_neg: 0.0,
                v_pos: 0.0,
                mean_sentiment: 0.0,
            },
            TimeseriesRow {
                storm_id: "A".into(),
                timestamp: "2015-01-01T06:00:00Z".into(),
                split: "train".into(),
                true_label: Category::ST,
                predicted_label: Category::ST,
                c: 3,
                v_neg: 0.1234567890123,
                v_pos: 1.0 / 3.0,
                mean_sentiment: 0.2,
            },
        ];
        let f = tempfile::NamedTempFile::new().unwrap();
        export_timeseries(f.path(), &rows).unwrap();
        assert_eq!(read_timeseries(f.path()).unwrap(), rows);
    }
}
