//! Unweighted average recall and its confusion-matrix backing.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// `matrix[true][pred]` counts over `0..n_classes`.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        m[l][p] += 1;
    }
    m
}

/// Mean of per-class recalls over the classes present in `labels`.
///
/// Every class that occurs in `predictions` must occur in `labels`,
/// otherwise its recall is undefined and the metric errors out.
pub fn evaluate_uar(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Metric(format!(
            "got {} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Metric("cannot evaluate an empty label set".into()));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if let Some(&stray) = predictions.iter().find(|p| !classes.contains(p)) {
        return Err(Error::Metric(format!(
            "class {stray} predicted but absent from the labels; recall undefined"
        )));
    }
    let n_classes = classes.iter().max().unwrap() + 1;
    let cm = confusion_matrix(predictions, labels, n_classes);
    let recall_sum: f64 = classes
        .iter()
        .map(|&c| {
            let support: usize = cm[c].iter().sum();
            cm[c][c] as f64 / support as f64
        })
        .sum();
    Ok(recall_sum / classes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let labels = vec![0, 1, 0, 1, 1];
        assert_eq!(evaluate_uar(&labels, &labels).unwrap(), 1.0);
    }

    #[test]
    fn known_recalls_average() {
        // Class 0: 8/10 correct; class 1: 6/10 correct -> UAR 0.7.
        let mut labels = vec![0; 10];
        labels.extend(vec![1; 10]);
        let mut preds = vec![0; 8];
        preds.extend(vec![1; 2]);
        preds.extend(vec![1; 6]);
        preds.extend(vec![0; 4]);
        assert!((evaluate_uar(&preds, &labels).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn constant_predictor_scores_chance_on_balanced_labels() {
        let labels = vec![0, 0, 1, 1];
        let preds = vec![0, 0, 0, 0];
        assert_eq!(evaluate_uar(&preds, &labels).unwrap(), 0.5);
    }

    #[test]
    fn stray_prediction_class_is_metric_error() {
        let labels = vec![0, 0, 0, 0];
        let preds = vec![0, 1, 0, 0];
        assert!(matches!(evaluate_uar(&preds, &labels), Err(Error::Metric(_))));
    }

    #[test]
    fn invariant_under_consistent_relabeling() {
        let labels = vec![0, 1, 1, 0, 1, 0, 0, 1];
        let preds = vec![0, 1, 0, 0, 1, 1, 0, 1];
        let base = evaluate_uar(&preds, &labels).unwrap();
        // Swap the two class ids everywhere.
        let swap = |v: &[usize]| v.iter().map(|&c| 1 - c).collect::<Vec<_>>();
        let swapped = evaluate_uar(&swap(&preds), &swap(&labels)).unwrap();
        assert!((base - swapped).abs() < 1e-15);
    }

    #[test]
    fn confusion_counts() {
        let labels = vec![0, 0, 1, 1, 1];
        let preds = vec![0, 1, 1, 1, 0];
        let cm = confusion_matrix(&preds, &labels, 2);
        assert_eq!(cm, vec![vec![1, 1], vec![1, 2]]);
    }
}
