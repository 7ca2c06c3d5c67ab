//! Macro-F1, accuracy, mean IoU and consistency rate.

use serde::{Deserialize, Serialize};

use crate::car::Labeling;
use crate::error::{Error, Result};
use crate::oracle::{CompatTable, ConsistencyReport};

struct Confusion {
    tp: Vec<usize>,
    fp: Vec<usize>,
    fn_: Vec<usize>,
}

fn confusion(preds: &[usize], truths: &[usize], classes: usize) -> Result<Confusion> {
    if preds.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no labels to score".into()));
    }
    let mut c = Confusion {
        tp: vec![0; classes],
        fp: vec![0; classes],
        fn_: vec![0; classes],
    };
    for (&p, &t) in preds.iter().zip(truths) {
        if p >= classes || t >= classes {
            return Err(Error::InvalidArgument(format!(
                "label outside {classes} classes"
            )));
        }
        if p == t {
            c.tp[p] += 1;
        } else {
            c.fp[p] += 1;
            c.fn_[t] += 1;
        }
    }
    Ok(c)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class F1, zero for classes with no predictions and no truths.
pub fn per_class_f1(preds: &[usize], truths: &[usize], classes: usize) -> Result<Vec<f64>> {
    let c = confusion(preds, truths, classes)?;
    Ok((0..classes)
        .map(|k| ratio(2 * c.tp[k], 2 * c.tp[k] + c.fp[k] + c.fn_[k]))
        .collect())
}

pub fn macro_f1(preds: &[usize], truths: &[usize], classes: usize) -> Result<f64> {
    let f = per_class_f1(preds, truths, classes)?;
    Ok(f.iter().sum::<f64>() / classes as f64)
}

/// `TP / (TP + FP + FN)` per class, zero for classes that never occur.
pub fn per_class_iou(preds: &[usize], truths: &[usize], classes: usize) -> Result<Vec<f64>> {
    let c = confusion(preds, truths, classes)?;
    Ok((0..classes)
        .map(|k| ratio(c.tp[k], c.tp[k] + c.fp[k] + c.fn_[k]))
        .collect())
}

pub fn mean_iou(preds: &[usize], truths: &[usize], classes: usize) -> Result<f64> {
    let iou = per_class_iou(preds, truths, classes)?;
    Ok(iou.iter().sum::<f64>() / classes as f64)
}

pub fn accuracy(preds: &[usize], truths: &[usize]) -> Result<f64> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "cannot score {} predictions against {} labels",
            preds.len(),
            truths.len()
        )));
    }
    let hits = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean of action accuracy and relation accuracy.
pub fn overall_accuracy(
    y_preds: &[usize],
    y_truths: &[usize],
    z_preds: &[usize],
    z_truths: &[usize],
) -> Result<f64> {
    Ok(0.5 * (accuracy(y_preds, y_truths)? + accuracy(z_preds, z_truths)?))
}

/// Fraction of labelings with no compatibility or transitivity violation.
pub fn consistency_rate(preds: &[Labeling], table: &CompatTable) -> Result<f64> {
    if preds.is_empty() {
        return Ok(1.0);
    }
    let mut ok = 0;
    for p in preds {
        if ConsistencyReport::new(p, table)?.is_consistent() {
            ok += 1;
        }
    }
    Ok(ok as f64 / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean of action and relation macro-F1.
    pub f1: f64,
    pub f1_actions: f64,
    pub f1_relations: f64,
    /// Mean of action and relation accuracy.
    pub accuracy: f64,
    pub accuracy_actions: f64,
    pub accuracy_relations: f64,
    /// IoU averaged over all action classes and both relation classes.
    pub mean_iou: f64,
    pub consistency_rate: f64,
    pub scenes: usize,
}

impl MetricReport {
    pub fn compute(preds: &[Labeling], truths: &[Labeling], table: &CompatTable) -> Result<Self> {
        if preds.len() != truths.len() || preds.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} predicted scenes for {} reference scenes",
                preds.len(),
                truths.len()
            )));
        }
        let classes = table.classes();
        let (mut yp, mut yt, mut zp, mut zt) = (vec![], vec![], vec![], vec![]);
        for (p, t) in preds.iter().zip(truths) {
            if p.y.len() != t.y.len() || p.z.len() != t.z.len() {
                return Err(Error::InvalidArgument(
                    "prediction and reference differ in participant count".into(),
                ));
            }
            yp.extend(&p.y);
            yt.extend(&t.y);
            zp.extend(p.z.iter().map(|&b| b as usize));
            zt.extend(t.z.iter().map(|&b| b as usize));
        }
        let f1_actions = macro_f1(&yp, &yt, classes)?;
        let f1_relations = macro_f1(&zp, &zt, 2)?;
        let accuracy_actions = accuracy(&yp, &yt)?;
        let accuracy_relations = accuracy(&zp, &zt)?;
        let mut iou = per_class_iou(&yp, &yt, classes)?;
        iou.extend(per_class_iou(&zp, &zt, 2)?);
        Ok(Self {
            f1: 0.5 * (f1_actions + f1_relations),
            f1_actions,
            f1_relations,
            accuracy: 0.5 * (accuracy_actions + accuracy_relations),
            accuracy_actions,
            accuracy_relations,
            mean_iou: iou.iter().sum::<f64>() / iou.len() as f64,
            consistency_rate: consistency_rate(preds, table)?,
            scenes: preds.len(),
        })
    }
}
