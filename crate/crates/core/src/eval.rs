//! Confusion matrices, one-vs-rest metrics, grouped reporting and ROC/AUC.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ClassLabel, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("{truth} true labels but {pred} predictions")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("class {0} needs both positive and negative samples")]
    DegenerateClass(usize),
    #[error("probability row {row} has {got} entries, expected {expected}")]
    ProbabilityShape { row: usize, got: usize, expected: usize },
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Merges classes: `group_of[c]` is the new index of class `c`.
    pub fn collapse(&self, group_of: &[usize]) -> Self {
        let k = group_of.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![vec![0; k]; k];
        for (t, row) in self.counts.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                counts[group_of[t]][group_of[p]] += c;
            }
        }
        Self { counts }
    }

    pub fn to_csv(&self, names: &[String]) -> String {
        let mut s = String::from("true\\pred");
        for n in names {
            let _ = write!(s, ",{n}");
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

pub fn confusion(truth: &[usize], pred: &[usize], classes: usize) -> Result<ConfusionMatrix, EvalError> {
    if truth.len() != pred.len() {
        return Err(EvalError::LengthMismatch { truth: truth.len(), pred: pred.len() });
    }
    let mut counts = vec![vec![0; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        for label in [t, p] {
            if label >= classes {
                return Err(EvalError::LabelRange { label, classes });
            }
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// One-vs-rest accuracy.
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted means of the per-class values; support is the total.
    pub macro_avg: ClassMetrics,
    /// Share of all windows on the diagonal.
    pub accuracy: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn metrics(cm: &ConfusionMatrix, names: &[String]) -> MetricsReport {
    let k = cm.classes();
    let total = cm.total();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = cm.counts[c][c];
            let row: u64 = cm.counts[c].iter().sum();
            let col: u64 = cm.counts.iter().map(|r| r[c]).sum();
            let (fn_, fp) = (row - tp, col - tp);
            let tn = total - tp - fn_ - fp;
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            ClassMetrics { accuracy: ratio(tp + tn, total), precision, recall, f1: f1_score(precision, recall), support: row }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| if k == 0 { 0.0 } else { per_class.iter().map(f).sum::<f64>() / k as f64 };
    let macro_avg = ClassMetrics {
        accuracy: mean(|m| m.accuracy),
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        support: total,
    };
    let diag: u64 = (0..k).map(|c| cm.counts[c][c]).sum();
    MetricsReport { classes: names.to_vec(), per_class, macro_avg, accuracy: ratio(diag, total) }
}

pub fn class_names() -> Vec<String> {
    ClassLabel::ALL.iter().map(|c| c.name().to_string()).collect()
}

/// Normal, the five attacks merged, and hardware failure.
pub const ATTACK_GROUPING: [usize; NUM_CLASSES] = [0, 1, 1, 1, 1, 1, 2];

pub fn group_names() -> Vec<String> {
    ["Normal", "Attack", "Failure"].map(String::from).to_vec()
}

/// Metrics on the Normal | Attack | Failure collapsed matrix.
pub fn grouped_metrics(cm: &ConfusionMatrix) -> MetricsReport {
    metrics(&cm.collapse(&ATTACK_GROUPING), &group_names())
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,accuracy,precision,recall,f1,support\n");
        let rows = self.classes.iter().map(String::as_str).zip(&self.per_class).chain([("macro", &self.macro_avg)]);
        for (name, m) in rows {
            let _ = writeln!(s, "{name},{},{},{},{},{}", m.accuracy, m.precision, m.recall, m.f1, m.support);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub class: usize,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// One-vs-rest ROC for `class`, sweeping thresholds over the distinct
/// scores. Equal scores form one step, so the trapezoid area equals the
/// probability that a positive outscores a negative, ties counting half.
pub fn roc_auc(truth: &[usize], probs: &[Vec<f64>], class: usize) -> Result<RocCurve, EvalError> {
    if truth.len() != probs.len() {
        return Err(EvalError::LengthMismatch { truth: truth.len(), pred: probs.len() });
    }
    let k = probs.first().map_or(0, Vec::len);
    if class >= k.max(1) {
        return Err(EvalError::LabelRange { label: class, classes: k });
    }
    for (row, p) in probs.iter().enumerate() {
        if p.len() != k {
            return Err(EvalError::ProbabilityShape { row, got: p.len(), expected: k });
        }
    }
    let mut scored: Vec<(f64, bool)> = truth.iter().zip(probs).map(|(&t, p)| (p[class], t == class)).collect();
    let pos = scored.iter().filter(|s| s.1).count() as u64;
    let neg = scored.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::DegenerateClass(class));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    // twice the area in units of 1/(pos*neg)
    let mut area2: u128 = 0;
    let mut i = 0;
    while i < scored.len() {
        let (prev_tp, prev_fp) = (tp, fp);
        let s = scored[i].0;
        while i < scored.len() && scored[i].0 == s {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - prev_fp) as u128 * (tp + prev_tp) as u128;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = area2 as f64 / (2 * pos as u128 * neg as u128) as f64;
    Ok(RocCurve { class, points, auc })
}

pub fn roc_csv(curves: &[RocCurve]) -> String {
    let mut s = String::from("class,fpr,tpr\n");
    for c in curves {
        for (f, t) in &c.points {
            let _ = writeln!(s, "{},{f},{t}", c.class);
        }
    }
    s
}

/// A gnuplot script plotting every curve of `roc_csv_name`.
pub fn roc_gnuplot(curves: &[RocCurve], names: &[String], roc_csv_name: &str) -> String {
    let mut s = String::from(
        "set datafile separator ','\nset xlabel 'False positive rate'\nset ylabel 'True positive rate'\n\
         set xrange [0:1]\nset yrange [0:1]\nset key bottom right\nset terminal pngcairo size 800,600\n\
         set output 'roc.png'\nplot ",
    );
    let parts: Vec<String> = curves
        .iter()
        .map(|c| {
            let name = names.get(c.class).map_or("class", String::as_str);
            format!(
                "'{roc_csv_name}' using 2:($1=={} ? $3 : 1/0) with lines title '{name} (AUC {:.4})'",
                c.class, c.auc
            )
        })
        .collect();
    s.push_str(&parts.join(", \\\n     "));
    s.push('\n');
    s
}

/// Everything `eval` reports for one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub windows: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grouped: Option<MetricsReport>,
    pub auc: Vec<Option<f64>>,
}

/// Confusion, metrics and per-class ROC from predictions.
pub fn evaluate_predictions(
    variant: &str,
    truth: &[usize],
    pred: &[usize],
    probs: &[Vec<f64>],
    grouped: bool,
) -> Result<(EvalReport, Vec<RocCurve>), EvalError> {
    let cm = confusion(truth, pred, NUM_CLASSES)?;
    let m = metrics(&cm, &class_names());
    let mut curves = Vec::new();
    let mut auc = Vec::new();
    for c in 0..NUM_CLASSES {
        match roc_auc(truth, probs, c) {
            Ok(r) => {
                auc.push(Some(r.auc));
                curves.push(r);
            }
            Err(EvalError::DegenerateClass(_)) => auc.push(None),
            Err(e) => return Err(e),
        }
    }
    let report = EvalReport {
        variant: variant.to_string(),
        windows: truth.len(),
        grouped: grouped.then(|| grouped_metrics(&cm)),
        confusion: cm,
        metrics: m,
        auc,
    };
    Ok((report, curves))
}
