use super::trainer::Adam;
use super::TrainError;
use crate::autodiff::Graph;
use crate::model::{argmax, glorot};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Softmax regression on standardised feature vectors, e.g. exported latents.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    weight: Tensor,
    bias: Tensor,
}

impl LinearClassifier {
    /// Full-batch Adam on unweighted cross-entropy.
    pub fn fit(
        features: &[Vec<f64>],
        labels: &[usize],
        n_classes: usize,
        epochs: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Self, TrainError> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(TrainError::Invalid(
                "need one label per feature vector".into(),
            ));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(TrainError::Invalid(
                "feature vectors must share a non-zero width".into(),
            ));
        }
        let n = features.len() as f64;
        let mean: Vec<f64> = (0..d)
            .map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n)
            .collect();
        let inv_std: Vec<f64> = (0..d)
            .map(|j| {
                let var = features
                    .iter()
                    .map(|f| (f[j] - mean[j]).powi(2))
                    .sum::<f64>()
                    / n;
                if var > 1e-24 {
                    1.0 / var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut model = LinearClassifier {
            mean,
            inv_std,
            weight: glorot(d, n_classes, &mut ChaCha8Rng::seed_from_u64(seed)),
            bias: Tensor::zeros(&[1, n_classes]),
        };
        let rows: Vec<f64> = features.iter().flat_map(|f| model.standardise(f)).collect();
        let x = Tensor::matrix(features.len(), d, rows);
        let class_w = vec![1.0; n_classes];
        let mut params = vec![model.weight.clone(), model.bias.clone()];
        let mut adam = Adam::new(&params, lr, 0.9, 0.999, 1e-8);
        for _ in 0..epochs {
            let mut g = Graph::new();
            let xv = g.constant(x.clone())?;
            let w = g.param(params[0].clone())?;
            let b = g.param(params[1].clone())?;
            let logits = g.linear(xv, w, b)?;
            let loss = g.cross_entropy(logits, labels, &class_w)?;
            let mut grads = g.backward(loss)?;
            let gw = grads.take(w).expect("weight gradient");
            let gb = grads.take(b).expect("bias gradient");
            adam.step(&mut params, &[gw, gb]);
        }
        model.bias = params.pop().expect("bias");
        model.weight = params.pop().expect("weight");
        Ok(model)
    }

    fn standardise(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((x, m), s)| (x - m) * s)
            .collect()
    }

    pub fn predict(&self, features: &[f64]) -> usize {
        let x = self.standardise(features);
        let c = self.weight.cols();
        let scores: Vec<f64> = (0..c)
            .map(|k| {
                self.bias.data()[k]
                    + x.iter()
                        .enumerate()
                        .map(|(j, v)| v * self.weight.get(j, k))
                        .sum::<f64>()
            })
            .collect();
        argmax(&scores)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_two_blobs() {
        let features: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                vec![
                    if i % 2 == 0 { -3.0 } else { 3.0 } + (i as f64 * 0.1).sin(),
                    1.0,
                ]
            })
            .collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let clf = LinearClassifier::fit(&features, &labels, 2, 200, 0.05, 0).unwrap();
        for (f, &y) in features.iter().zip(&labels) {
            assert_eq!(clf.predict(f), y);
        }
    }
}
