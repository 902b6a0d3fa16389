use serde::Serialize;

use super::TrainError;

/// Classification quality of a set of predictions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    /// Unweighted mean of `f1` over every class, including absent ones.
    pub macro_f1: f64,
    /// Recall averaged with class-support weights.
    pub detection_rate: f64,
    /// `confusion[actual][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub support: Vec<usize>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(
    predictions: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<Metrics, TrainError> {
    if predictions.len() != labels.len() {
        return Err(TrainError::Invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(TrainError::Invalid(
            "cannot score an empty prediction set".into(),
        ));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= n_classes || y >= n_classes {
            return Err(TrainError::Invalid(format!(
                "class index outside 0..{n_classes}"
            )));
        }
        confusion[y][p] += 1;
    }
    let total = labels.len();
    let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
    let predicted: Vec<usize> = (0..n_classes)
        .map(|c| confusion.iter().map(|r| r[c]).sum())
        .collect();
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();

    let precision: Vec<f64> = (0..n_classes)
        .map(|c| ratio(confusion[c][c], predicted[c]))
        .collect();
    let recall: Vec<f64> = (0..n_classes)
        .map(|c| ratio(confusion[c][c], support[c]))
        .collect();
    let f1: Vec<f64> = precision
        .iter()
        .zip(&recall)
        .map(|(&p, &r)| {
            if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            }
        })
        .collect();
    let macro_f1 = f1.iter().sum::<f64>() / n_classes as f64;
    let detection_rate = recall
        .iter()
        .zip(&support)
        .map(|(&r, &s)| r * s as f64)
        .sum::<f64>()
        / total as f64;
    Ok(Metrics {
        accuracy: ratio(correct, total),
        precision,
        recall,
        f1,
        macro_f1,
        detection_rate,
        confusion,
        support,
    })
}
