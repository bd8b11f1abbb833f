//! Confusion-matrix based intersection over union.

use serde::Serialize;

use crate::error::{Error, Result};

/// `counts[gt * k + pred]`, ignore pixels excluded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8], ignore_index: u8) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        for (&p, &t) in pred.iter().zip(gt) {
            if t == ignore_index {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= self.k || t >= self.k {
                return Err(Error::invalid(format!(
                    "class index {} out of range for {} classes",
                    p.max(t),
                    self.k
                )));
            }
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    /// `IoU_k = TP / (TP + FP + FN)`; the mean runs over classes that occur
    /// in either map.
    pub fn iou(&self) -> IouReport {
        let k = self.k;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|t| self.get(t, c)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        IouReport { per_class, mean }
    }
}

/// Per-class IoU and their mean for a single pair of maps.
pub fn miou(pred: &[u8], gt: &[u8], k: usize, ignore_index: u8) -> Result<IouReport> {
    let mut cm = ConfusionMatrix::new(k);
    cm.add(pred, gt, ignore_index)?;
    Ok(cm.iou())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn perfect_prediction() {
        let gt = [0u8, 1, 2, 2, 255];
        let r = miou(&gt, &gt, 4, 255).unwrap();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.per_class[3], None);
    }

    #[test]
    fn complement_is_zero() {
        let gt = [0u8, 1, 1, 0];
        let pred = [1u8, 0, 0, 1];
        assert_eq!(miou(&pred, &gt, 2, 255).unwrap().mean, 0.0);
    }

    #[test]
    fn hand_confusion_matrix() {
        // gt rows, pred columns: [[6, 2], [1, 7]]
        let mut gt = Vec::new();
        let mut pred = Vec::new();
        for (t, p, n) in [(0u8, 0u8, 6), (0, 1, 2), (1, 0, 1), (1, 1, 7)] {
            for _ in 0..n {
                gt.push(t);
                pred.push(p);
            }
        }
        let r = miou(&pred, &gt, 2, 255).unwrap();
        assert!((r.per_class[0].unwrap() - 6.0 / 9.0).abs() < 1e-12);
        assert!((r.per_class[1].unwrap() - 7.0 / 10.0).abs() < 1e-12);
        assert!((r.mean - 0.683_333_333).abs() < 1e-6);
    }

    #[test]
    fn prediction_only_class_counts_as_zero() {
        let r = miou(&[1, 1], &[0, 0], 3, 255).unwrap();
        assert_eq!(r.per_class, vec![Some(0.0), Some(0.0), None]);
    }

    proptest! {
        #[test]
        fn relabeling_is_equivariant(
            pairs in prop::collection::vec((0u8..4, 0u8..4), 1..64),
            perm in Just([0u8, 1, 2, 3]).prop_shuffle(),
        ) {
            let (pred, gt): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let a = miou(&pred, &gt, 4, 255).unwrap();
            let pp: Vec<u8> = pred.iter().map(|&v| perm[v as usize]).collect();
            let pg: Vec<u8> = gt.iter().map(|&v| perm[v as usize]).collect();
            let b = miou(&pp, &pg, 4, 255).unwrap();
            prop_assert!((a.mean - b.mean).abs() < 1e-12);
            for (c, &to) in perm.iter().enumerate() {
                prop_assert_eq!(a.per_class[c], b.per_class[to as usize]);
            }
        }
    }
}
