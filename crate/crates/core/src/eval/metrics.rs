//! Confusion matrices and the mIoU / PA / CA family.

use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{Error, Result};

/// `counts[g * C + p]` = pixels with ground truth g predicted as p.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::Shape(format!(
                "{num_classes} classes need {} counts",
                num_classes * num_classes
            )));
        }
        Ok(ConfusionMatrix { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    #[inline]
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row(&self, c: usize) -> u64 {
        self.counts[c * self.num_classes..(c + 1) * self.num_classes].iter().sum()
    }

    pub fn col(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|g| self.get(g, c)).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape("merging confusion matrices of different class counts".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn ensure_nonempty(&self) -> Result<u64> {
        match self.total() {
            0 => Err(Error::InvalidArgument("confusion matrix holds no pixels".into())),
            t => Ok(t),
        }
    }

    /// IoU per class; `None` for classes absent from both ground truth and prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let tp = self.get(c, c);
                let union = self.row(c) + self.col(c) - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Accuracy per class; `None` for classes absent from both ground truth and
    /// prediction, 0 for classes that are predicted but never present.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let row = self.row(c);
                if row > 0 {
                    Some(self.get(c, c) as f64 / row as f64)
                } else if self.col(c) > 0 {
                    Some(0.0)
                } else {
                    None
                }
            })
            .collect()
    }
}

/// Add per-pixel counts, skipping pixels whose ground truth is the ignore index.
pub fn accumulate_confusion(cm: &mut ConfusionMatrix, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs truth {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    if pred.num_classes() != cm.num_classes || truth.num_classes() != cm.num_classes {
        return Err(Error::InvalidArgument(format!(
            "class counts differ: matrix {}, prediction {}, truth {}",
            cm.num_classes,
            pred.num_classes(),
            truth.num_classes()
        )));
    }
    let c = cm.num_classes;
    for (&p, &g) in pred.labels().iter().zip(truth.labels()) {
        if truth.is_ignored(g) {
            continue;
        }
        if pred.is_ignored(p) {
            return Err(Error::InvalidArgument("prediction contains the ignore index".into()));
        }
        cm.counts[g as usize * c + p as usize] += 1;
    }
    Ok(())
}

fn mean_defined(v: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = v.iter().flatten().copied().collect();
    defined.iter().sum::<f64>() / defined.len() as f64
}

pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    cm.ensure_nonempty()?;
    Ok(mean_defined(&cm.per_class_iou()))
}

pub fn pixel_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.ensure_nonempty()?;
    let trace: u64 = (0..cm.num_classes).map(|c| cm.get(c, c)).sum();
    Ok(trace as f64 / total as f64)
}

pub fn class_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    cm.ensure_nonempty()?;
    Ok(mean_defined(&cm.per_class_accuracy()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_example() {
        let truth = LabelMap::new(2, 2, 2, vec![0, 0, 1, 1]).unwrap();
        let pred = LabelMap::new(2, 2, 2, vec![0, 1, 1, 1]).unwrap();
        let mut cm = ConfusionMatrix::new(2);
        accumulate_confusion(&mut cm, &pred, &truth).unwrap();
        assert_eq!(cm.counts(), &[1, 1, 0, 2]);
        assert!((miou(&cm).unwrap() - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(pixel_accuracy(&cm).unwrap(), 0.75);
        assert_eq!(class_accuracy(&cm).unwrap(), 0.75);
    }

    #[test]
    fn identity_and_ignore() {
        let truth = LabelMap::new(1, 4, 3, vec![0, 1, 2, 255]).unwrap();
        let pred = LabelMap::new(1, 4, 3, vec![0, 1, 2, 0]).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        accumulate_confusion(&mut cm, &pred, &truth).unwrap();
        assert_eq!(cm.total(), 3);
        assert_eq!(miou(&cm).unwrap(), 1.0);
        assert_eq!(pixel_accuracy(&cm).unwrap(), 1.0);
        assert_eq!(class_accuracy(&cm).unwrap(), 1.0);
        let ign = LabelMap::filled(1, 4, 3, 255).unwrap();
        let before = cm.clone();
        accumulate_confusion(&mut cm, &pred, &ign).unwrap();
        assert_eq!(cm, before);
        assert!(miou(&ConfusionMatrix::new(3)).is_err());
    }

    proptest! {
        #[test]
        fn permuting_classes_permutes_iou(labels in proptest::collection::vec((0u8..4, 0u8..4), 1..64), perm in Just([2u8, 0, 3, 1])) {
            let n = labels.len();
            let truth = LabelMap::new(1, n, 4, labels.iter().map(|l| l.0).collect()).unwrap();
            let pred = LabelMap::new(1, n, 4, labels.iter().map(|l| l.1).collect()).unwrap();
            let pt = LabelMap::new(1, n, 4, labels.iter().map(|l| perm[l.0 as usize]).collect()).unwrap();
            let pp = LabelMap::new(1, n, 4, labels.iter().map(|l| perm[l.1 as usize]).collect()).unwrap();
            let mut a = ConfusionMatrix::new(4);
            let mut b = ConfusionMatrix::new(4);
            accumulate_confusion(&mut a, &pred, &truth).unwrap();
            accumulate_confusion(&mut b, &pp, &pt).unwrap();
            let (ia, ib) = (a.per_class_iou(), b.per_class_iou());
            for c in 0..4 {
                prop_assert_eq!(ia[c], ib[perm[c] as usize]);
            }
            prop_assert!((miou(&a).unwrap() - miou(&b).unwrap()).abs() < 1e-12);
            prop_assert_eq!(pixel_accuracy(&a).unwrap(), pixel_accuracy(&b).unwrap());
            prop_assert!((class_accuracy(&a).unwrap() - class_accuracy(&b).unwrap()).abs() < 1e-12);
            let defined: Vec<f64> = ia.iter().flatten().copied().collect();
            let m = miou(&a).unwrap();
            prop_assert!(defined.iter().cloned().fold(f64::INFINITY, f64::min) <= m + 1e-12);
            prop_assert!(m <= defined.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-12);
        }

        #[test]
        fn streaming_equals_single_pass(a in proptest::collection::vec((0u8..3, 0u8..3), 1..40), b in proptest::collection::vec((0u8..3, 0u8..3), 1..40)) {
            let mk = |v: &[(u8, u8)], f: fn(&(u8, u8)) -> u8| LabelMap::new(1, v.len(), 3, v.iter().map(f).collect()).unwrap();
            let mut s = ConfusionMatrix::new(3);
            accumulate_confusion(&mut s, &mk(&a, |x| x.1), &mk(&a, |x| x.0)).unwrap();
            accumulate_confusion(&mut s, &mk(&b, |x| x.1), &mk(&b, |x| x.0)).unwrap();
            let all: Vec<(u8, u8)> = a.iter().chain(&b).copied().collect();
            let mut one = ConfusionMatrix::new(3);
            accumulate_confusion(&mut one, &mk(&all, |x| x.1), &mk(&all, |x| x.0)).unwrap();
            prop_assert_eq!(s, one);
        }
    }
}
