//! Confusion-matrix evaluation: per-class accuracy, precision, recall, F1
//! and IoU, aggregate reports, and metric-history CSV emission.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `C×C` pixel counts; rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Builds a matrix from row-major counts.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Shape("confusion matrix rows must form a square".into()));
        }
        Ok(Self {
            classes: c,
            counts: rows.concat(),
        })
    }

    /// Confusion of one prediction/truth pair.
    pub fn from_pair(pred: &[usize], truth: &[usize], classes: usize) -> Result<Self> {
        let mut cm = Self::new(classes);
        cm.accumulate(pred, truth)?;
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    /// Adds one pixel per (prediction, truth) pair.
    pub fn accumulate(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!(
                "confusion: {} predictions vs {} labels",
                pred.len(),
                truth.len()
            )));
        }
        let c = self.classes;
        if let Some(i) = pred.iter().zip(truth).position(|(&p, &t)| p >= c || t >= c) {
            return Err(Error::Data(format!(
                "confusion: pixel {i} has prediction {} / truth {} outside {c} classes",
                pred[i], truth[i]
            )));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!(
                "cannot merge {}-class and {}-class confusion matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }

    /// `(TP, FP, FN, TN)` for class `c`.
    pub fn outcomes(&self, c: usize) -> (u64, u64, u64, u64) {
        let tp = self.get(c, c);
        let fp = self.col_sum(c) - tp;
        let fn_ = self.row_sum(c) - tp;
        let tn = self.total() - tp - fp - fn_;
        (tp, fp, fn_, tn)
    }
}

/// `num / den`, or `None` (undefined) when `den == 0`.
pub fn ratio(num: u64, den: u64) -> Option<f64> {
    (den != 0).then(|| num as f64 / den as f64)
}

mod undefined_marker {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub const MARKER: &str = "undefined";

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Value(f64),
        Marker(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str(MARKER),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Value(x) => Ok(Some(x)),
            Repr::Marker(m) if m == MARKER => Ok(None),
            Repr::Marker(m) => Err(serde::de::Error::custom(format!("unexpected marker `{m}`"))),
        }
    }
}

/// Per-class scores; `None` marks an undefined 0/0 ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    #[serde(with = "undefined_marker")]
    pub accuracy: Option<f64>,
    #[serde(with = "undefined_marker")]
    pub precision: Option<f64>,
    #[serde(with = "undefined_marker")]
    pub recall: Option<f64>,
    #[serde(with = "undefined_marker")]
    pub f1: Option<f64>,
    #[serde(with = "undefined_marker")]
    pub iou: Option<f64>,
}

pub const METRIC_NAMES: [&str; 5] = ["accuracy", "precision", "recall", "f1", "iou"];

impl ClassMetrics {
    pub fn values(&self) -> [Option<f64>; 5] {
        [self.accuracy, self.precision, self.recall, self.f1, self.iou]
    }
}

/// Scores of class `c`. F1 is the harmonic mean of precision and recall;
/// it is undefined when either is, and 0 when both are 0.
pub fn class_metrics(cm: &ConfusionMatrix, c: usize) -> Result<ClassMetrics> {
    if c >= cm.classes() {
        return Err(Error::Param(format!(
            "class {c} out of range for {} classes",
            cm.classes()
        )));
    }
    let (tp, fp, fn_, tn) = cm.outcomes(c);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok(ClassMetrics {
        accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
        precision,
        recall,
        f1,
        iou: ratio(tp, tp + fp + fn_),
    })
}

/// Mean over classes with a defined value, plus how many were excluded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroValue {
    #[serde(with = "undefined_marker")]
    pub mean: Option<f64>,
    pub excluded: usize,
}

fn macro_mean(values: impl Iterator<Item = Option<f64>>) -> MacroValue {
    let (mut sum, mut n, mut excluded) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                n += 1;
            }
            None => excluded += 1,
        }
    }
    MacroValue {
        mean: (n > 0).then(|| sum / n as f64),
        excluded,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub accuracy: MacroValue,
    pub precision: MacroValue,
    pub recall: MacroValue,
    pub f1: MacroValue,
    pub iou: MacroValue,
}

impl MacroMetrics {
    pub fn values(&self) -> [MacroValue; 5] {
        [self.accuracy, self.precision, self.recall, self.f1, self.iou]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Overall pixel accuracy, `trace / total`.
    pub pixel_accuracy: f64,
    /// Mean IoU over classes where IoU is defined.
    pub mean_iou: MacroValue,
    pub macro_avg: MacroMetrics,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

/// Full report for a non-empty confusion matrix.
pub fn aggregate(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("cannot aggregate an empty confusion matrix".into()));
    }
    let per_class = (0..cm.classes())
        .map(|c| class_metrics(cm, c))
        .collect::<Result<Vec<_>>>()?;
    let pick = |i: usize| macro_mean(per_class.iter().map(|m| m.values()[i]));
    let macro_avg = MacroMetrics {
        accuracy: pick(0),
        precision: pick(1),
        recall: pick(2),
        f1: pick(3),
        iou: pick(4),
    };
    Ok(MetricsReport {
        pixel_accuracy: cm.trace() as f64 / total as f64,
        mean_iou: macro_avg.iou,
        macro_avg,
        per_class,
        confusion: cm.clone(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undef".to_string(), |x| format!("{x:.4}"))
}

fn class_label(names: &[String], c: usize) -> String {
    names.get(c).cloned().unwrap_or_else(|| format!("class {c}"))
}

impl MetricsReport {
    pub fn classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Data(format!("metrics report: {e}")))
    }

    /// Aligned-column plain-text table.
    pub fn to_text(&self, class_names: &[String]) -> String {
        let width = (0..self.classes())
            .map(|c| class_label(class_names, c).len())
            .chain([13])
            .max()
            .unwrap_or(13);
        let mut out = String::new();
        let _ = write!(out, "{:<width$}", "class");
        for m in METRIC_NAMES {
            let _ = write!(out, " {m:>10}");
        }
        out.push('\n');
        for (c, cm) in self.per_class.iter().enumerate() {
            let _ = write!(out, "{:<width$}", class_label(class_names, c));
            for v in cm.values() {
                let _ = write!(out, " {:>10}", fmt_opt(v));
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<width$}", "macro average");
        for v in self.macro_avg.values() {
            let _ = write!(out, " {:>10}", fmt_opt(v.mean));
        }
        out.push('\n');
        let _ = writeln!(out, "pixel accuracy {:.4}", self.pixel_accuracy);
        let _ = writeln!(
            out,
            "mean IoU       {} ({} classes excluded)",
            fmt_opt(self.mean_iou.mean),
            self.mean_iou.excluded
        );
        out
    }

    /// `(metric, class, value)` rows; class `"all"` marks aggregates and
    /// undefined values are written as the `undefined` marker.
    pub fn long_rows(&self, class_names: &[String]) -> Vec<(String, String, String)> {
        let val = |v: Option<f64>| v.map_or_else(|| undefined_marker::MARKER.to_string(), |x| x.to_string());
        let mut rows = vec![
            ("pixel_accuracy".into(), "all".into(), self.pixel_accuracy.to_string()),
            ("mean_iou".into(), "all".into(), val(self.mean_iou.mean)),
        ];
        for (name, m) in METRIC_NAMES.iter().zip(self.macro_avg.values()) {
            rows.push((format!("macro_{name}"), "all".into(), val(m.mean)));
        }
        for (c, cm) in self.per_class.iter().enumerate() {
            for (name, v) in METRIC_NAMES.iter().zip(cm.values()) {
                rows.push((name.to_string(), class_label(class_names, c), val(v)));
            }
        }
        rows
    }
}

/// Side-by-side table of two reports with an after − before column.
pub fn compare_table(before: &MetricsReport, after: &MetricsReport, class_names: &[String]) -> Result<String> {
    if before.classes() != after.classes() {
        return Err(Error::Data(format!(
            "reports cover {} and {} classes",
            before.classes(),
            after.classes()
        )));
    }
    let mut rows: Vec<(String, String, Option<f64>, Option<f64>)> = Vec::new();
    rows.push((
        "all".into(),
        "pixel_accuracy".into(),
        Some(before.pixel_accuracy),
        Some(after.pixel_accuracy),
    ));
    for (i, name) in METRIC_NAMES.iter().enumerate() {
        rows.push((
            "all".into(),
            format!("macro_{name}"),
            before.macro_avg.values()[i].mean,
            after.macro_avg.values()[i].mean,
        ));
    }
    for c in 0..before.classes() {
        for (i, name) in METRIC_NAMES.iter().enumerate() {
            rows.push((
                class_label(class_names, c),
                name.to_string(),
                before.per_class[c].values()[i],
                after.per_class[c].values()[i],
            ));
        }
    }
    let cw = rows.iter().map(|r| r.0.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<cw$} {:<16} {:>10} {:>10} {:>10}",
        "class", "metric", "before", "after", "delta"
    );
    for (class, metric, b, a) in rows {
        let delta = match (b, a) {
            (Some(b), Some(a)) => format!("{:+.4}", a - b),
            _ => "undef".into(),
        };
        let _ = writeln!(
            out,
            "{class:<cw$} {metric:<16} {:>10} {:>10} {delta:>10}",
            fmt_opt(b),
            fmt_opt(a)
        );
    }
    Ok(out)
}

/// One `(epoch, metric, class, value)` record of a training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub metric: String,
    pub class: String,
    pub value: String,
}

/// Ordered metric history, appended epoch by epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricHistory {
    rows: Vec<HistoryRow>,
}

impl MetricHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[HistoryRow] {
        &self.rows
    }

    pub fn push_scalar(&mut self, epoch: usize, metric: &str, value: f64) {
        self.rows.push(HistoryRow {
            epoch,
            metric: metric.into(),
            class: "all".into(),
            value: value.to_string(),
        });
    }

    pub fn push_report(&mut self, epoch: usize, prefix: &str, report: &MetricsReport, class_names: &[String]) {
        for (metric, class, value) in report.long_rows(class_names) {
            self.rows.push(HistoryRow {
                epoch,
                metric: format!("{prefix}{metric}"),
                class,
                value,
            });
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r)
                .map_err(|e| Error::Data(format!("writing metric history: {e}")))?;
        }
        wr.flush()
            .map_err(|e| Error::Data(format!("writing metric history: {e}")))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory csv");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_example() {
        let cm = ConfusionMatrix::from_pair(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(cm.rows(), vec![vec![1, 1], vec![0, 2]]);
        let m = class_metrics(&cm, 0).unwrap();
        assert_eq!(m.precision, Some(1.0));
        assert_eq!(m.recall, Some(0.5));
        assert!((m.f1.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.iou, Some(0.5));
        assert_eq!(m.accuracy, Some(0.75));
    }

    #[test]
    fn absent_class_is_undefined() {
        let cm = ConfusionMatrix::from_pair(&[0, 1], &[0, 1], 3).unwrap();
        let m = class_metrics(&cm, 2).unwrap();
        assert_eq!((m.precision, m.recall, m.iou, m.f1), (None, None, None, None));
        let r = aggregate(&cm).unwrap();
        assert_eq!(r.mean_iou.excluded, 1);
        assert_eq!(r.mean_iou.mean, Some(1.0));
        assert_eq!(r.pixel_accuracy, 1.0);
    }

    #[test]
    fn diagonal_is_perfect() {
        let truth = [0, 1, 2, 2, 1, 0];
        let cm = ConfusionMatrix::from_pair(&truth, &truth, 3).unwrap();
        for c in 0..3 {
            assert!(class_metrics(&cm, c).unwrap().values().iter().all(|v| *v == Some(1.0)));
        }
    }

    #[test]
    fn accumulation_is_additive() {
        let mut a = ConfusionMatrix::from_pair(&[0, 1], &[1, 1], 2).unwrap();
        let b = ConfusionMatrix::from_pair(&[1, 0, 0], &[0, 0, 1], 2).unwrap();
        a.merge(&b).unwrap();
        let joint = ConfusionMatrix::from_pair(&[0, 1, 1, 0, 0], &[1, 1, 0, 0, 1], 2).unwrap();
        assert_eq!(a, joint);
    }

    #[test]
    fn errors() {
        assert!(ConfusionMatrix::from_pair(&[2], &[0], 2).is_err());
        assert!(ConfusionMatrix::from_pair(&[0, 0], &[0], 2).is_err());
        assert!(aggregate(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn json_round_trip_keeps_undefined_marker() {
        let cm = ConfusionMatrix::from_pair(&[0, 0], &[0, 0], 2).unwrap();
        let r = aggregate(&cm).unwrap();
        let js = r.to_json();
        assert!(js.contains("\"undefined\""));
        assert_eq!(MetricsReport::from_json(&js).unwrap(), r);
    }

    #[test]
    fn identical_reports_have_zero_delta() {
        let cm = ConfusionMatrix::from_pair(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
        let r = aggregate(&cm).unwrap();
        let table = compare_table(&r, &r, &[]).unwrap();
        for line in table.lines().skip(1) {
            assert!(line.ends_with("+0.0000"), "{line}");
        }
    }

    #[test]
    fn history_csv_has_header_and_rows() {
        let mut h = MetricHistory::new();
        h.push_scalar(1, "train_loss", 0.5);
        let csv = h.to_csv_string();
        assert_eq!(csv, "epoch,metric,class,value\n1,train_loss,all,0.5\n");
    }
}
