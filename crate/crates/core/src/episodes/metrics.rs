use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rules::{ContextVector, ScenarioSet};

fn check_lengths(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::contract("metrics need at least one prediction"));
    }
    if preds.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `m[true][pred]` counts.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    check_lengths(preds, labels)?;
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= n_classes || l >= n_classes {
            return Err(Error::contract(format!("class index out of range for {n_classes} classes")));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision and recall are 0 when their denominator is; F1 is 0 when
/// `P + R = 0`.
pub fn per_class_scores(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<ClassScores>> {
    let m = confusion_matrix(preds, labels, n_classes)?;
    Ok((0..n_classes)
        .map(|k| {
            let tp = m[k][k] as f64;
            let predicted: usize = (0..n_classes).map(|l| m[l][k]).sum();
            let actual: usize = m[k].iter().sum();
            let ratio = |num: f64, den: usize| if den == 0 { 0.0 } else { num / den as f64 };
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores { precision, recall, f1 }
        })
        .collect())
}

pub fn macro_f1(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    let scores = per_class_scores(preds, labels, n_classes)?;
    Ok(scores.iter().map(|s| s.f1).sum::<f64>() / n_classes as f64)
}

/// Fraction of predictions that the rule set contradicts under each
/// sample's context.
pub fn contradiction_rate(preds: &[usize], contexts: &[ContextVector], rules: &ScenarioSet) -> Result<f64> {
    if preds.len() != contexts.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} contexts",
            preds.len(),
            contexts.len()
        )));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (&p, c) in preds.iter().zip(contexts) {
        if rules.contradicts(p, c)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / preds.len() as f64)
}

/// Steps before the end from which every prediction equals `label`; `None`
/// when the final prediction is wrong.
pub fn anticipation_time(per_step: &[usize], label: usize) -> Option<usize> {
    if per_step.last() != Some(&label) {
        return None;
    }
    let correct_tail = per_step.iter().rev().take_while(|&&p| p == label).count();
    Some(correct_tail - 1)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return MeanSd::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanSd { mean, sd }
    }
}

impl std::fmt::Display for MeanSd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.sd)
    }
}

/// Metrics of one evaluated set, based on the final-step prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub contradiction_rate: f64,
    /// Mean over episodes whose final prediction is correct.
    pub anticipation: Option<f64>,
    /// Episodes whose final prediction is wrong.
    pub anticipation_undefined: usize,
    pub per_class: Vec<ClassScores>,
}

impl FoldMetrics {
    /// `per_step[i]` are the step-wise predicted classes of episode `i`.
    pub fn evaluate(
        per_step: &[Vec<usize>],
        labels: &[usize],
        contexts: &[ContextVector],
        rules: &ScenarioSet,
    ) -> Result<Self> {
        let n_classes = rules.classes().len();
        let finals = per_step
            .iter()
            .map(|s| s.last().copied().ok_or_else(|| Error::contract("episode without predictions")))
            .collect::<Result<Vec<_>>>()?;
        let times: Vec<Option<usize>> = per_step
            .iter()
            .zip(labels)
            .map(|(s, &l)| anticipation_time(s, l))
            .collect();
        let defined: Vec<f64> = times.iter().flatten().map(|&t| t as f64).collect();
        Ok(FoldMetrics {
            accuracy: accuracy(&finals, labels)?,
            macro_f1: macro_f1(&finals, labels, n_classes)?,
            contradiction_rate: contradiction_rate(&finals, contexts, rules)?,
            anticipation: (!defined.is_empty()).then(|| MeanSd::of(&defined).mean),
            anticipation_undefined: times.len() - defined.len(),
            per_class: per_class_scores(&finals, labels, n_classes)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub folds: Vec<FoldMetrics>,
    pub accuracy: MeanSd,
    pub macro_f1: MeanSd,
    pub contradiction_rate: MeanSd,
    pub anticipation: MeanSd,
}

impl MetricsReport {
    pub fn from_folds(folds: Vec<FoldMetrics>) -> Self {
        let col = |f: fn(&FoldMetrics) -> f64| MeanSd::of(&folds.iter().map(f).collect::<Vec<_>>());
        let ant: Vec<f64> = folds.iter().filter_map(|f| f.anticipation).collect();
        MetricsReport {
            accuracy: col(|f| f.accuracy),
            macro_f1: col(|f| f.macro_f1),
            contradiction_rate: col(|f| f.contradiction_rate),
            anticipation: MeanSd::of(&ant),
            folds,
        }
    }

    /// One row per fold plus an `AVG ± SD` row.
    pub fn to_table(&self) -> String {
        let mut s = String::from("fold\taccuracy\tmacro_f1\tcontradiction_rate\tanticipation\n");
        for (i, f) in self.folds.iter().enumerate() {
            let ant = f.anticipation.map_or("-".to_string(), |a| format!("{a:.4}"));
            s += &format!(
                "{i}\t{:.4}\t{:.4}\t{:.4}\t{ant}\n",
                f.accuracy, f.macro_f1, f.contradiction_rate
            );
        }
        s += &format!(
            "AVG ± SD\t{}\t{}\t{}\t{}\n",
            self.accuracy, self.macro_f1, self.contradiction_rate, self.anticipation
        );
        s
    }
}
