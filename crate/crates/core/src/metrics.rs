//! Confusion-matrix metrics and ROC AUC for the fertile/infertile task.
//!
//! Every count-based metric is a ratio of integer counts. A ratio whose
//! denominator is zero is *undefined* rather than NaN-valued, so it can be
//! serialised explicitly (`{"value": null, "defined": false}`) and rendered as
//! the literal `NaN` in tables.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::label::Label;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("input mismatch: {0}")]
    InputMismatch(String),
    #[error("empty input")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// The same predictions scored with infertile as the positive class.
    pub fn swap_positive(&self) -> Self {
        Self { tp: self.tn, tn: self.tp, fp: self.fn_, fn_: self.fp }
    }
}

/// An exact, unreduced ratio of two counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fraction {
    pub numerator: u64,
    pub denominator: u64,
}

impl Fraction {
    fn of(numerator: u64, denominator: u64) -> Option<Self> {
        (denominator > 0).then_some(Self { numerator, denominator })
    }

    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

/// A metric value in `[0, 1]`, or undefined when its denominator vanishes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricValue {
    Defined(f64),
    Undefined,
}

impl MetricValue {
    pub fn value(&self) -> Option<f64> {
        match *self {
            MetricValue::Defined(v) => Some(v),
            MetricValue::Undefined => None,
        }
    }

    pub fn is_defined(&self) -> bool {
        matches!(self, MetricValue::Defined(_))
    }

    /// Rounds to `decimals` places and prints without trailing zeros, or
    /// `NaN` when undefined.
    pub fn render(&self, decimals: i32) -> String {
        match *self {
            MetricValue::Undefined => "NaN".to_string(),
            MetricValue::Defined(v) => {
                let scale = 10f64.powi(decimals);
                let r = (v * scale).round() / scale;
                format!("{}", if r == 0.0 { 0.0 } else { r })
            }
        }
    }
}

impl From<Option<Fraction>> for MetricValue {
    fn from(f: Option<Fraction>) -> Self {
        f.map_or(MetricValue::Undefined, |f| MetricValue::Defined(f.value()))
    }
}

impl fmt::Display for MetricValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricValue::Defined(v) => write!(f, "{v}"),
            MetricValue::Undefined => f.write_str("NaN"),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MetricValueRepr {
    value: Option<f64>,
    defined: bool,
}

impl Serialize for MetricValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        MetricValueRepr { value: self.value(), defined: self.is_defined() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for MetricValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = MetricValueRepr::deserialize(d)?;
        match (repr.defined, repr.value) {
            (true, Some(v)) => Ok(MetricValue::Defined(v)),
            (false, None) => Ok(MetricValue::Undefined),
            _ => Err(serde::de::Error::custom("metric `defined` flag disagrees with `value`")),
        }
    }
}

/// How aggregation treats undefined entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UndefinedPolicy {
    #[default]
    Propagate,
    Skip,
}

/// Arithmetic mean; undefined entries poison the result unless skipped.
pub fn mean_metric(values: &[MetricValue], policy: UndefinedPolicy) -> MetricValue {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        match (v, policy) {
            (MetricValue::Defined(x), _) => {
                sum += x;
                n += 1;
            }
            (MetricValue::Undefined, UndefinedPolicy::Propagate) => return MetricValue::Undefined,
            (MetricValue::Undefined, UndefinedPolicy::Skip) => {}
        }
    }
    if n == 0 {
        MetricValue::Undefined
    } else {
        MetricValue::Defined(sum / n as f64)
    }
}

/// Population standard deviation with the same undefined handling as
/// [`mean_metric`].
pub fn std_metric(values: &[MetricValue], policy: UndefinedPolicy) -> MetricValue {
    let MetricValue::Defined(mean) = mean_metric(values, policy) else {
        return MetricValue::Undefined;
    };
    let defined: Vec<f64> = values.iter().filter_map(MetricValue::value).collect();
    let var = defined.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / defined.len() as f64;
    MetricValue::Defined(var.sqrt())
}

pub fn confusion(labels: &[Label], predictions: &[Label]) -> Result<ConfusionMatrix, MetricsError> {
    if labels.len() != predictions.len() {
        return Err(MetricsError::InputMismatch(format!(
            "{} labels vs {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    if labels.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut cm = ConfusionMatrix::default();
    for (&truth, &pred) in labels.iter().zip(predictions) {
        match (truth.is_positive(), pred.is_positive()) {
            (true, true) => cm.tp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fp += 1,
            (true, false) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

pub fn accuracy_fraction(cm: &ConfusionMatrix) -> Option<Fraction> {
    Fraction::of(cm.tp + cm.tn, cm.total())
}

pub fn sensitivity_fraction(cm: &ConfusionMatrix) -> Option<Fraction> {
    Fraction::of(cm.tp, cm.tp + cm.fn_)
}

pub fn specificity_fraction(cm: &ConfusionMatrix) -> Option<Fraction> {
    Fraction::of(cm.tn, cm.tn + cm.fp)
}

pub fn precision_fraction(cm: &ConfusionMatrix) -> Option<Fraction> {
    Fraction::of(cm.tp, cm.tp + cm.fp)
}

pub fn negative_predictive_fraction(cm: &ConfusionMatrix) -> Option<Fraction> {
    Fraction::of(cm.tn, cm.tn + cm.fn_)
}

pub fn accuracy(cm: &ConfusionMatrix) -> MetricValue {
    accuracy_fraction(cm).into()
}

pub fn sensitivity(cm: &ConfusionMatrix) -> MetricValue {
    sensitivity_fraction(cm).into()
}

pub fn recall(cm: &ConfusionMatrix) -> MetricValue {
    sensitivity(cm)
}

pub fn specificity(cm: &ConfusionMatrix) -> MetricValue {
    specificity_fraction(cm).into()
}

pub fn precision(cm: &ConfusionMatrix) -> MetricValue {
    precision_fraction(cm).into()
}

pub fn negative_predictive_value(cm: &ConfusionMatrix) -> MetricValue {
    negative_predictive_fraction(cm).into()
}

/// Area under the ROC curve by trapezoidal integration over every distinct
/// score threshold. Tied scores form a single diagonal step, which makes the
/// area equal to the concordance probability with ties counted one half.
pub fn auc(labels: &[Label], scores: &[f64]) -> Result<MetricValue, MetricsError> {
    if labels.len() != scores.len() {
        return Err(MetricsError::InputMismatch(format!(
            "{} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(MetricsError::InputMismatch(format!("score {bad} outside [0, 1]")));
    }
    let positives = labels.iter().filter(|l| l.is_positive()).count() as f64;
    let negatives = labels.len() as f64 - positives;
    if positives == 0.0 || negatives == 0.0 {
        return Ok(MetricValue::Undefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));

    // Work in raw counts so the trapezoids are exact half-integers.
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]].is_positive() {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        area += (fp - fp0) * (tp + tp0) / 2.0;
    }
    Ok(MetricValue::Defined(area / (positives * negatives)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: u64,
    pub cm: ConfusionMatrix,
    pub auc: MetricValue,
    pub accuracy: MetricValue,
    pub recall: MetricValue,
    pub specificity: MetricValue,
    pub precision: MetricValue,
}

pub fn evaluate(labels: &[Label], predictions: &[Label], scores: &[f64]) -> Result<MetricsReport, MetricsError> {
    let cm = confusion(labels, predictions)?;
    let auc = auc(labels, scores)?;
    Ok(MetricsReport {
        n: cm.total(),
        cm,
        auc,
        accuracy: accuracy(&cm),
        recall: recall(&cm),
        specificity: specificity(&cm),
        precision: precision(&cm),
    })
}

/// On-disk `metrics.json` document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub backbone: String,
    pub split: String,
    #[serde(flatten)]
    pub report: MetricsReport,
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Fertile as F, Infertile as I};

    #[test]
    fn perfect_and_inverted_classifiers() {
        assert_eq!(confusion(&[F, F, I, I], &[F, F, I, I]).unwrap(), ConfusionMatrix::new(2, 2, 0, 0));
        assert_eq!(confusion(&[F, I], &[I, F]).unwrap(), ConfusionMatrix::new(0, 0, 1, 1));
    }

    #[test]
    fn confusion_rejects_bad_shapes() {
        assert!(matches!(confusion(&[F], &[]), Err(MetricsError::InputMismatch(_))));
        assert_eq!(confusion(&[], &[]), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn hand_computed_ratios() {
        assert_eq!(accuracy(&ConfusionMatrix::new(20, 19, 1, 0)), MetricValue::Defined(0.975));
        assert_eq!(accuracy(&ConfusionMatrix::default()), MetricValue::Undefined);
        assert_eq!(sensitivity(&ConfusionMatrix::new(20, 0, 0, 0)), MetricValue::Defined(1.0));
        assert_eq!(sensitivity(&ConfusionMatrix::new(0, 7, 3, 0)), MetricValue::Undefined);
        assert_eq!(sensitivity(&ConfusionMatrix::new(3, 0, 0, 1)), MetricValue::Defined(0.75));
        assert_eq!(specificity(&ConfusionMatrix::new(0, 24, 1, 0)), MetricValue::Defined(0.96));
        assert_eq!(specificity(&ConfusionMatrix::new(5, 0, 0, 2)), MetricValue::Undefined);
        assert_eq!(specificity(&ConfusionMatrix::new(0, 1, 1, 0)), MetricValue::Defined(0.5));
        assert_eq!(precision(&ConfusionMatrix::new(0, 30, 4, 6)), MetricValue::Defined(0.0));
        assert_eq!(precision(&ConfusionMatrix::new(0, 30, 0, 6)), MetricValue::Undefined);
        assert_eq!(precision(&ConfusionMatrix::new(24, 0, 1, 0)), MetricValue::Defined(0.96));
    }

    #[test]
    fn consistent_matrix_for_the_best_testing_row() {
        // 20 fertile all found, 25 infertile with one false alarm.
        let cm = ConfusionMatrix::new(20, 24, 1, 0);
        assert_eq!(sensitivity(&cm).render(2), "1");
        assert_eq!(specificity(&cm).render(2), "0.96");
        assert_eq!(accuracy(&cm).render(2), "0.98");
    }

    #[test]
    fn auc_simple_cases() {
        assert_eq!(auc(&[F, I], &[0.9, 0.1]).unwrap(), MetricValue::Defined(1.0));
        assert_eq!(auc(&[I, F], &[0.9, 0.1]).unwrap(), MetricValue::Defined(0.0));
        assert_eq!(auc(&[F, I, F, I], &[0.3; 4]).unwrap(), MetricValue::Defined(0.5));
        assert_eq!(auc(&[F, F], &[0.3, 0.2]).unwrap(), MetricValue::Undefined);
        assert!(matches!(auc(&[F, I], &[0.3, 1.2]), Err(MetricsError::InputMismatch(_))));
        assert!(matches!(auc(&[F, I], &[f64::NAN, 0.2]), Err(MetricsError::InputMismatch(_))));
    }

    #[test]
    fn evaluate_perfect_and_all_negative() {
        let r = evaluate(&[F, F, I, I], &[F, F, I, I], &[0.9, 0.8, 0.2, 0.1]).unwrap();
        for m in [r.auc, r.accuracy, r.recall, r.specificity, r.precision] {
            assert_eq!(m, MetricValue::Defined(1.0));
        }
        let r = evaluate(&[F, F, I, I], &[I; 4], &[0.4, 0.3, 0.2, 0.1]).unwrap();
        assert_eq!(r.recall, MetricValue::Defined(0.0));
        assert_eq!(r.specificity, MetricValue::Defined(1.0));
        assert_eq!(r.precision, MetricValue::Undefined);
        let r = evaluate(&[I, I], &[I, F], &[0.4, 0.6]).unwrap();
        assert_eq!(r.auc, MetricValue::Undefined);
        assert_eq!(r.accuracy, MetricValue::Defined(0.5));
    }

    #[test]
    fn undefined_serialises_as_null_with_flag() {
        let json = serde_json::to_string(&MetricValue::Undefined).unwrap();
        assert_eq!(json, r#"{"value":null,"defined":false}"#);
        let json = serde_json::to_string(&MetricValue::Defined(0.5)).unwrap();
        assert_eq!(json, r#"{"value":0.5,"defined":true}"#);
        let back: MetricValue = serde_json::from_str(r#"{"value":null,"defined":false}"#).unwrap();
        assert_eq!(back, MetricValue::Undefined);
        assert!(serde_json::from_str::<MetricValue>(r#"{"value":null,"defined":true}"#).is_err());
    }

    #[test]
    fn mean_propagates_undefined_unless_skipping() {
        let vals = [MetricValue::Defined(0.5), MetricValue::Undefined, MetricValue::Defined(1.0)];
        assert_eq!(mean_metric(&vals, UndefinedPolicy::Propagate), MetricValue::Undefined);
        assert_eq!(mean_metric(&vals, UndefinedPolicy::Skip), MetricValue::Defined(0.75));
    }

    #[test]
    fn rendering_matches_table_convention() {
        assert_eq!(MetricValue::Defined(1.0).render(2), "1");
        assert_eq!(MetricValue::Defined(0.8).render(2), "0.8");
        assert_eq!(MetricValue::Defined(0.9615).render(2), "0.96");
        assert_eq!(MetricValue::Defined(0.0).render(2), "0");
        assert_eq!(MetricValue::Undefined.render(2), "NaN");
    }
}
