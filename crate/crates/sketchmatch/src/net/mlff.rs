//! Multilayer feed-forward classifier over feature vectors.
//!
//! Signal travels in one direction: each hidden layer is a weighted sum of
//! its input pushed through a sigmoid, the output layer is linear, and
//! classification applies a row-wise softmax.

use super::init_linear;
use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::params::ParamSet;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlffConfig {
    /// Layer widths from input to class count; needs at least one hidden layer.
    pub layer_dims: Vec<usize>,
}

impl MlffConfig {
    pub fn new(layer_dims: Vec<usize>) -> Result<Self> {
        if layer_dims.len() < 3 {
            return Err(Error::Argument(
                "mlff needs [input, hidden.., classes]: at least 3 widths".into(),
            ));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::Argument("mlff layer widths must be positive".into()));
        }
        Ok(MlffConfig { layer_dims })
    }
}

#[derive(Debug, Clone)]
pub struct Mlff {
    config: MlffConfig,
}

impl Mlff {
    pub fn new(config: MlffConfig) -> Self {
        Mlff { config }
    }

    pub fn input_dim(&self) -> usize {
        self.config.layer_dims[0]
    }

    pub fn class_count(&self) -> usize {
        *self.config.layer_dims.last().unwrap()
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamSet {
        let mut params = ParamSet::new();
        for (i, pair) in self.config.layer_dims.windows(2).enumerate() {
            init_linear(&mut params, &format!("mlff.l{i}"), pair[0], pair[1], rng);
        }
        params
    }

    /// Raw logits before the softmax.
    pub fn logits(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        features: Var,
        track: bool,
    ) -> Result<Var> {
        let shape = tape.value(features).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(Error::Shape {
                op: "mlff_classify",
                detail: format!(
                    "feature width {} does not match network input {}",
                    shape.get(1).copied().unwrap_or(0),
                    self.input_dim()
                ),
            });
        }
        let layers = self.config.layer_dims.len() - 1;
        let mut x = features;
        for i in 0..layers {
            let w = tape.param(params, &format!("mlff.l{i}.w"), track)?;
            let b = tape.param(params, &format!("mlff.l{i}.b"), track)?;
            x = tape.matmul(x, w)?;
            x = tape.add_row_bias(x, b)?;
            if i + 1 < layers {
                x = tape.sigmoid(x);
            }
        }
        Ok(x)
    }

    /// Class probabilities: softmax rows summing to one.
    pub fn classify(&self, tape: &mut Tape, params: &ParamSet, features: Var) -> Result<Var> {
        let logits = self.logits(tape, params, features, false)?;
        tape.softmax_rows(logits)
    }

    /// Predicted class per row.
    pub fn predict(&self, params: &ParamSet, features: &Tensor) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let probs = self.classify(&mut tape, params, f)?;
        let v = tape.value(probs);
        let k = self.class_count();
        Ok((0..v.shape()[0])
            .map(|r| {
                let row = &v.data()[r * k..(r + 1) * k];
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect())
    }

    /// Full-batch gradient descent on softmax cross-entropy. Returns the
    /// final loss.
    pub fn fit(
        &self,
        params: &mut ParamSet,
        features: &Tensor,
        labels: &[usize],
        epochs: usize,
        lr: f64,
    ) -> Result<f64> {
        let sgd = Sgd::new(lr);
        let mut last = f64::INFINITY;
        for _ in 0..epochs {
            let mut tape = Tape::new();
            let f = tape.constant(features.clone());
            let logits = self.logits(&mut tape, params, f, true)?;
            let loss = tape.softmax_cross_entropy(logits, labels)?;
            last = tape.value(loss).item()?;
            let grads = tape.backward(loss)?;
            tape.apply_grads(&grads, params)?;
            sgd.step(params)?;
        }
        Ok(last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rows_sum_to_one() {
        let mlff = Mlff::new(MlffConfig::new(vec![6, 8, 4]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = mlff.init_params(&mut rng);
        let features = Tensor::from_vec(
            &[5, 6],
            (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(features);
        let probs = mlff.classify(&mut tape, &params, f).unwrap();
        let v = tape.value(probs).data();
        for r in 0..5 {
            let s: f64 = v[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_class_probability_is_one() {
        let mlff = Mlff::new(MlffConfig::new(vec![3, 4, 1]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = mlff.init_params(&mut rng);
        let features = Tensor::from_vec(&[2, 3], vec![0.5; 6]).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(features);
        let probs = mlff.classify(&mut tape, &params, f).unwrap();
        assert!(tape.value(probs).data().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn feature_width_mismatch_names_dimensions() {
        let mlff = Mlff::new(MlffConfig::new(vec![4, 4, 2]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = mlff.init_params(&mut rng);
        let features = Tensor::from_vec(&[1, 3], vec![0.0; 3]).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(features);
        assert!(matches!(
            mlff.classify(&mut tape, &params, f),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn separable_clusters_reach_perfect_training_accuracy() {
        // Three well-separated Gaussian-ish blobs in 2D.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let centers = [(-3.0, 0.0), (3.0, 0.0), (0.0, 4.0)];
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (class, &(cx, cy)) in centers.iter().enumerate() {
            for _ in 0..10 {
                rows.push(cx + rng.gen_range(-0.4..0.4));
                rows.push(cy + rng.gen_range(-0.4..0.4));
                labels.push(class);
            }
        }
        let features = Tensor::from_vec(&[30, 2], rows).unwrap();
        let mlff = Mlff::new(MlffConfig::new(vec![2, 16, 3]).unwrap());
        let mut params = mlff.init_params(&mut rng);
        mlff.fit(&mut params, &features, &labels, 400, 0.5).unwrap();
        let preds = mlff.predict(&params, &features).unwrap();
        let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        assert_eq!(correct, 30, "training accuracy {correct}/30");
    }
}
