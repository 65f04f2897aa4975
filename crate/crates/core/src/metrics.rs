//! Confusion-matrix metrics.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};

/// `K×K` counts, rows are the true class and columns the prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            k: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    /// Row-major counts.
    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(invalid(
                "confusion_matrix",
                alloc::format!("{} counts for {num_classes} classes", counts.len()),
            ));
        }
        Ok(Self { k: num_classes, counts })
    }

    pub fn from_predictions(num_classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(invalid(
                "predictions",
                alloc::format!("{} labels but {} predictions", truth.len(), predicted.len()),
            ));
        }
        let mut cm = Self::new(num_classes);
        for (i, (&t, &p)) in truth.iter().zip(predicted).enumerate() {
            for label in [t, p] {
                if label >= num_classes {
                    return Err(Error::LabelOutOfRange {
                        index: i,
                        label,
                        num_classes,
                    });
                }
            }
            cm.counts[t * num_classes + p] += 1;
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.k).map(|j| self.get(truth, j)).sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, predicted)).sum()
    }

    fn nonempty_total(&self) -> Result<u64> {
        match self.total() {
            0 => Err(Error::EmptyConfusionMatrix),
            n => Ok(n),
        }
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.nonempty_total()?;
    Ok(cm.trace() as f64 / n as f64)
}

/// Unweighted mean of per-class F1, with F1 = 0 for a class that is neither
/// present nor predicted.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    cm.nonempty_total()?;
    let k = cm.num_classes();
    let sum: f64 = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let denom = cm.row_sum(c) + cm.col_sum(c);
            if denom == 0 {
                0.0
            } else {
                (2 * tp) as f64 / denom as f64
            }
        })
        .sum();
    Ok(sum / k as f64)
}

/// Cohen's kappa; 0 when chance agreement is already perfect.
pub fn cohens_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.nonempty_total()? as u128;
    let k = cm.num_classes();
    // Integer form of (p_o - p_e) / (1 - p_e) scaled by n².
    let marg: u128 = (0..k).map(|c| cm.row_sum(c) as u128 * cm.col_sum(c) as u128).sum();
    let agree = n * cm.trace() as u128;
    let denom = n * n - marg;
    if denom == 0 {
        return Ok(0.0);
    }
    Ok((agree as f64 - marg as f64) / denom as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub kappa: f64,
}

impl Metrics {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            accuracy: accuracy(cm)?,
            macro_f1: macro_f1(cm)?,
            kappa: cohens_kappa(cm)?,
        })
    }

    pub fn from_predictions(num_classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        Self::from_confusion(&ConfusionMatrix::from_predictions(num_classes, truth, predicted)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_kappa() {
        let cm = ConfusionMatrix::from_counts(2, vec![45, 5, 15, 35]).unwrap();
        assert_eq!(cohens_kappa(&cm).unwrap(), 0.6);
        assert_eq!(accuracy(&cm).unwrap(), 0.8);
    }

    #[test]
    fn accuracy_arithmetic() {
        let cm = ConfusionMatrix::from_counts(2, vec![1, 1, 0, 2]).unwrap();
        assert_eq!(accuracy(&cm).unwrap(), 0.75);
        let zero = ConfusionMatrix::from_counts(2, vec![0, 3, 4, 0]).unwrap();
        assert_eq!(accuracy(&zero).unwrap(), 0.0);
    }

    #[test]
    fn all_predicted_class_zero() {
        let cm = ConfusionMatrix::from_predictions(2, &[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap();
        let f1 = macro_f1(&cm).unwrap();
        assert!((f1 - 1.0 / 3.0).abs() < 1e-15);
        // p_e = 1 is impossible here, but predictions carry no information.
        assert_eq!(cohens_kappa(&cm).unwrap(), 0.0);
    }

    #[test]
    fn diagonal_is_perfect() {
        let cm = ConfusionMatrix::from_counts(3, vec![4, 0, 0, 0, 7, 0, 0, 0, 1]).unwrap();
        let m = Metrics::from_confusion(&cm).unwrap();
        assert_eq!((m.accuracy, m.macro_f1, m.kappa), (1.0, 1.0, 1.0));
    }

    #[test]
    fn degenerate_chance_agreement() {
        let cm = ConfusionMatrix::from_counts(2, vec![5, 0, 0, 0]).unwrap();
        assert_eq!(cohens_kappa(&cm).unwrap(), 0.0);
    }

    #[test]
    fn empty_rejected() {
        let cm = ConfusionMatrix::new(3);
        assert_eq!(accuracy(&cm), Err(Error::EmptyConfusionMatrix));
        assert_eq!(macro_f1(&cm), Err(Error::EmptyConfusionMatrix));
        assert_eq!(cohens_kappa(&cm), Err(Error::EmptyConfusionMatrix));
    }

    #[test]
    fn out_of_range_prediction() {
        assert!(matches!(
            ConfusionMatrix::from_predictions(2, &[0, 1], &[0, 2]),
            Err(Error::LabelOutOfRange { index: 1, label: 2, .. })
        ));
    }
}
