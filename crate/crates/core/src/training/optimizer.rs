use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderWeights;
use crate::error::Result;
use crate::math::Matrix;

/// Linear warmup to `peak` followed by linear decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(peak: f64, warmup_fraction: f64, total_steps: usize) -> Self {
        Schedule {
            peak,
            warmup_steps: (warmup_fraction * total_steps as f64).round() as usize,
            total_steps,
        }
    }

    /// Learning rate of step `step` (0-based).
    pub fn rate(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let rest = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let done = step - self.warmup_steps;
        self.peak * (1.0 - done as f64 / rest as f64).max(0.0)
    }
}

/// Adam with decoupled weight decay on tensors flagged for decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    first: HashMap<usize, Matrix>,
    second: HashMap<usize, Matrix>,
    steps: i32,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            first: HashMap::new(),
            second: HashMap::new(),
            steps: 0,
        }
    }

    /// One update with learning rate `lr`. Tensors without a gradient are
    /// left untouched, including their decay.
    pub fn step(&mut self, weights: &mut EncoderWeights, grads: &HashMap<usize, Matrix>, lr: f64) -> Result<()> {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        let mut ids: Vec<&usize> = grads.keys().collect();
        ids.sort();
        for &id in ids {
            let g = &grads[&id];
            let tensor = &mut weights.tensors_mut()[id];
            let (r, c) = tensor.value.shape();
            let m = self.first.entry(id).or_insert_with(|| Matrix::zeros(r, c));
            let v = self.second.entry(id).or_insert_with(|| Matrix::zeros(r, c));
            let decay = if tensor.decay { self.weight_decay } else { 0.0 };
            let param = tensor.value.data_mut();
            for i in 0..param.len() {
                let gi = g.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (m.data()[i] / c1) / ((v.data()[i] / c2).sqrt() + self.eps);
                param[i] -= lr * (update + decay * param[i]);
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut HashMap<usize, Matrix>, max_norm: f64) -> f64 {
    // fixed summation order keeps training bit-reproducible
    let mut ids: Vec<&usize> = grads.keys().collect();
    ids.sort();
    let norm = ids
        .into_iter()
        .flat_map(|id| grads[id].data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = Schedule::new(1.0, 0.25, 8);
        let rates: Vec<f64> = (0..8).map(|i| s.rate(i)).collect();
        assert_eq!(rates[..2], [0.5, 1.0]);
        assert_eq!(rates[2], 1.0);
        assert!(rates.windows(2).skip(2).all(|w| w[1] < w[0]));
        assert!(rates[7] > 0.0);
        assert_eq!(Schedule::new(2.0, 0.0, 4).rate(0), 2.0);
    }

    #[test]
    fn clip_scales_to_max() {
        let mut g = HashMap::from([(0, Matrix::row_vector(vec![3.0, 4.0]))]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[&0].data()[0] - 0.6).abs() < 1e-15);
        let mut g = HashMap::from([(0, Matrix::row_vector(vec![0.3, 0.4]))]);
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g[&0].data(), &[0.3, 0.4]);
    }
}
