//! Confusion-matrix segmentation metrics.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::synth::LabelMap;

/// K×K pixel counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { k: num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::shape(format!("{} counts for {num_classes} classes", counts.len())));
        }
        Ok(ConfusionMatrix { k: num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::shape(format!(
                "prediction is {}×{}, ground truth {}×{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            let (p, g) = (p as usize, g as usize);
            if p >= self.k || g >= self.k {
                return Err(Error::invalid(format!("class id {} out of range for {} classes", p.max(g), self.k)));
            }
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        let k = self.k;
        let mut iou = vec![None; k];
        let mut acc = vec![None; k];
        let mut trace = 0;
        for c in 0..k {
            let tp = self.get(c, c);
            let gt_total: u64 = (0..k).map(|p| self.get(c, p)).sum();
            let pred_total: u64 = (0..k).map(|g| self.get(g, c)).sum();
            let union = gt_total + pred_total - tp;
            if union > 0 {
                iou[c] = Some(tp as f64 / union as f64);
            }
            if gt_total > 0 {
                acc[c] = Some(tp as f64 / gt_total as f64);
            }
            trace += tp;
        }
        let mean = |v: &[Option<f64>]| {
            let defined: Vec<f64> = v.iter().flatten().copied().collect();
            if defined.is_empty() {
                0.0
            } else {
                defined.iter().sum::<f64>() / defined.len() as f64
            }
        };
        let total = self.total();
        MetricsReport {
            miou: mean(&iou),
            mean_class_accuracy: mean(&acc),
            global_accuracy: if total == 0 { 0.0 } else { trace as f64 / total as f64 },
            class_iou: iou,
            class_accuracy: acc,
        }
    }
}

/// `None` marks a class that occurs in neither map (IoU) or not in the ground
/// truth (accuracy); such classes are left out of the means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub class_iou: Vec<Option<f64>>,
    pub class_accuracy: Vec<Option<f64>>,
    pub miou: f64,
    pub mean_class_accuracy: f64,
    pub global_accuracy: f64,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| x.to_string());
        let mut s = String::from("class,iou,acc\n");
        for (c, (iou, acc)) in self.class_iou.iter().zip(&self.class_accuracy).enumerate() {
            writeln!(s, "{c},{},{}", cell(*iou), cell(*acc)).unwrap();
        }
        writeln!(s, "miou,{}", self.miou).unwrap();
        writeln!(s, "mean_class_acc,{}", self.mean_class_accuracy).unwrap();
        writeln!(s, "global_acc,{}", self.global_accuracy).unwrap();
        s
    }
}

pub fn evaluate(predictions: &[LabelMap], ground_truth: &[LabelMap], num_classes: usize) -> Result<MetricsReport> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} ground-truth maps",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, g) in predictions.iter().zip(ground_truth) {
        cm.add(p, g)?;
    }
    Ok(cm.report())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_class_example() {
        let r = ConfusionMatrix::from_counts(2, vec![3, 1, 1, 3]).unwrap().report();
        assert_eq!(r.class_iou, vec![Some(0.6), Some(0.6)]);
        assert_eq!(r.miou, 0.6);
        assert_eq!(r.global_accuracy, 0.75);
        assert_eq!(r.mean_class_accuracy, 0.75);
    }

    #[test]
    fn absent_class_excluded() {
        let m = LabelMap { height: 1, width: 2, labels: vec![0, 1] };
        let r = evaluate(&[m.clone()], &[m], 3).unwrap();
        assert_eq!(r.class_iou[2], None);
        assert_eq!(r.miou, 1.0);
        assert!(r.to_csv().contains("2,nan,nan\n"));
        assert!(r.to_csv().ends_with("miou,1\nmean_class_acc,1\nglobal_acc,1\n"));
    }

    #[test]
    fn out_of_range_rejected() {
        let m = LabelMap { height: 1, width: 1, labels: vec![2] };
        assert!(evaluate(&[m.clone()], &[m], 2).is_err());
    }
}
