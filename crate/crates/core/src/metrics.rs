//! One-vs-rest segmentation metrics from confusion counts.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    /// Predicted volume `TP + FP`.
    pub fn predicted(&self) -> u64 {
        self.tp + self.fp
    }

    /// Ground-truth volume `TP + FN`.
    pub fn truth(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub classes: Vec<ClassCounts>,
}

impl ConfusionCounts {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn class(&self, class: usize) -> Result<&ClassCounts> {
        self.classes.get(class).ok_or(Error::ClassOutOfRange {
            label: class,
            num_classes: self.classes.len(),
        })
    }
}

pub fn confusion(pred: &LabelVolume, truth: &LabelVolume) -> Result<ConfusionCounts> {
    if pred.dims() != truth.dims() || pred.num_classes() != truth.num_classes() {
        return Err(Error::shape(format!(
            "prediction {:?}/{} vs truth {:?}/{}",
            pred.dims(),
            pred.num_classes(),
            truth.dims(),
            truth.num_classes()
        )));
    }
    let n = truth.num_classes();
    let mut pairs = vec![0u64; n * n];
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        pairs[p as usize * n + t as usize] += 1;
    }
    let total = pred.labels().len() as u64;
    let classes = (0..n)
        .map(|c| {
            let tp = pairs[c * n + c];
            let predicted: u64 = pairs[c * n..(c + 1) * n].iter().sum();
            let actual: u64 = (0..n).map(|p| pairs[p * n + c]).sum();
            let (fp, fn_) = (predicted - tp, actual - tp);
            ClassCounts {
                tp,
                fp,
                fn_,
                tn: total - tp - fp - fn_,
            }
        })
        .collect();
    Ok(ConfusionCounts { classes })
}

fn ratio(num: f64, den: f64, metric: &'static str, class: usize) -> Result<f64> {
    if den == 0.0 {
        Err(Error::UndefinedMetric { metric, class })
    } else {
        Ok(num / den)
    }
}

/// `2TP / (2TP + FN + FP)`.
pub fn dice(counts: &ConfusionCounts, class: usize) -> Result<f64> {
    f_beta(counts, class, 1.0).map_err(|_| Error::UndefinedMetric {
        metric: "dice",
        class,
    })
}

pub fn precision(counts: &ConfusionCounts, class: usize) -> Result<f64> {
    let c = counts.class(class)?;
    ratio(c.tp as f64, (c.tp + c.fp) as f64, "precision", class)
}

pub fn recall(counts: &ConfusionCounts, class: usize) -> Result<f64> {
    let c = counts.class(class)?;
    ratio(c.tp as f64, (c.tp + c.fn_) as f64, "recall", class)
}

/// F-beta in count form, `(1+b^2)TP / ((1+b^2)TP + b^2 FN + FP)`, which equals
/// the precision/recall form whenever that is defined.
pub fn f_beta(counts: &ConfusionCounts, class: usize, beta: f64) -> Result<f64> {
    let c = counts.class(class)?;
    let b2 = beta * beta;
    let tp = c.tp as f64;
    ratio(
        (1.0 + b2) * tp,
        (1.0 + b2) * tp + b2 * c.fn_ as f64 + c.fp as f64,
        "f_beta",
        class,
    )
}

/// F-beta from precision and recall directly.
pub fn f_beta_from_rates(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    (b2 + 1.0) * precision * recall / (b2 * precision + recall)
}

/// Average volume difference in percent, `100 |V_p - V_g| / V_g`.
pub fn avd(counts: &ConfusionCounts, class: usize) -> Result<f64> {
    let c = counts.class(class)?;
    let (vp, vg) = (c.predicted() as f64, c.truth() as f64);
    ratio(100.0 * (vp - vg).abs(), vg, "avd", class)
}

/// The intersection reading `100 |V_p ∩ V_g| / V_g`, kept for comparison.
pub fn avd_intersection(counts: &ConfusionCounts, class: usize) -> Result<f64> {
    let c = counts.class(class)?;
    ratio(100.0 * c.tp as f64, c.truth() as f64, "avd", class)
}

/// Volumes given directly as voxel counts.
pub fn avd_from_volumes(predicted: u64, truth: u64) -> Option<f64> {
    (truth > 0).then(|| 100.0 * (predicted as f64 - truth as f64).abs() / truth as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub class: usize,
    pub name: String,
    pub dice: Option<f64>,
    pub avd: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub predicted_volume: u64,
    pub truth_volume: u64,
    pub counts: ClassCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentationReport {
    pub classes: Vec<ClassReport>,
}

/// Default names for the three-class tissue problem; others are numbered.
pub fn class_name(class: usize, num_classes: usize) -> String {
    match (num_classes, class) {
        (3, 0) => "background".into(),
        (3, 1) => "gray".into(),
        (3, 2) => "white".into(),
        _ => format!("class{class}"),
    }
}

impl SegmentationReport {
    pub fn new(pred: &LabelVolume, truth: &LabelVolume) -> Result<Self> {
        Ok(Self::from_counts(&confusion(pred, truth)?))
    }

    pub fn from_counts(counts: &ConfusionCounts) -> Self {
        let n = counts.num_classes();
        let classes = (0..n)
            .map(|c| {
                let k = counts.classes[c];
                ClassReport {
                    class: c,
                    name: class_name(c, n),
                    dice: dice(counts, c).ok(),
                    avd: avd(counts, c).ok(),
                    precision: precision(counts, c).ok(),
                    recall: recall(counts, c).ok(),
                    predicted_volume: k.predicted(),
                    truth_volume: k.truth(),
                    counts: k,
                }
            })
            .collect();
        Self { classes }
    }

    pub fn dice(&self, class: usize) -> Option<f64> {
        self.classes.get(class).and_then(|c| c.dice)
    }

    pub fn avd(&self, class: usize) -> Option<f64> {
        self.classes.get(class).and_then(|c| c.avd)
    }

    /// Mean DICE over the listed classes; `None` if any is undefined.
    pub fn mean_dice(&self, classes: &[usize]) -> Option<f64> {
        let vals: Option<Vec<f64>> = classes.iter().map(|&c| self.dice(c)).collect();
        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// One line per class: name, dice, avd%, precision, recall.
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>, scale: f64| match v {
            Some(x) => format!("{:.4}", x * scale),
            None => "absent".to_string(),
        };
        let mut out = String::new();
        for c in &self.classes {
            let _ = writeln!(
                out,
                "{:<12} dice {:>8}  avd% {:>8}  precision {:>8}  recall {:>8}",
                c.name,
                fmt(c.dice, 1.0),
                match c.avd {
                    Some(v) => format!("{v:.2}"),
                    None => "absent".into(),
                },
                fmt(c.precision, 1.0),
                fmt(c.recall, 1.0)
            );
        }
        out
    }

    /// Tab-separated table with a header row.
    pub fn to_tsv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x}"));
        let mut out = String::from(
            "class\tname\tdice\tavd_percent\tprecision\trecall\tpredicted_volume\ttruth_volume\ttp\tfp\tfn\ttn\n",
        );
        for c in &self.classes {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                c.class,
                c.name,
                cell(c.dice),
                cell(c.avd),
                cell(c.precision),
                cell(c.recall),
                c.predicted_volume,
                c.truth_volume,
                c.counts.tp,
                c.counts.fp,
                c.counts.fn_,
                c.counts.tn
            );
        }
        out
    }
}
