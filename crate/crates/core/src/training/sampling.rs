use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{forward_full, EncoderWeights};
use crate::error::{Error, Result};
use crate::exit_policy::{simulate_exits, ExitPolicy, WindowSize};

/// The layer (1-based) at which each token of one sequence halts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitAssignment(Vec<usize>);

impl ExitAssignment {
    pub fn new(layers: Vec<usize>, num_layers: usize) -> Result<Self> {
        let a = ExitAssignment(layers);
        a.check(a.0.len(), num_layers)?;
        Ok(a)
    }

    /// Every one of `n` tokens halts at `layer`.
    pub fn uniform(n: usize, layer: usize) -> Self {
        ExitAssignment(vec![layer; n])
    }

    pub fn layers(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn check(&self, n: usize, num_layers: usize) -> Result<()> {
        if self.0.len() != n {
            return Err(Error::Input(format!(
                "assignment covers {} tokens, sequence has {n}",
                self.0.len()
            )));
        }
        if let Some(&bad) = self.0.iter().find(|&&l| l == 0 || l > num_layers) {
            return Err(Error::Input(format!(
                "assigned layer {bad} outside 1..={num_layers}"
            )));
        }
        Ok(())
    }
}

/// Ranges from which self-sampling draws its window size and threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingRanges {
    /// Radii `0..=k_max` are candidates.
    pub k_max: usize,
    /// Whether the unbounded window is a candidate as well.
    pub k_infinite: bool,
    pub delta_min: f64,
    pub delta_max: f64,
}

impl Default for SamplingRanges {
    fn default() -> Self {
        SamplingRanges {
            k_max: 4,
            k_infinite: true,
            delta_min: 0.05,
            delta_max: 0.5,
        }
    }
}

impl SamplingRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.delta_min)
            && (0.0..=1.0).contains(&self.delta_max)
            && self.delta_min <= self.delta_max;
        if !ok {
            return Err(Error::Config(format!(
                "threshold range [{}, {}] must be an interval inside [0, 1]",
                self.delta_min, self.delta_max
            )));
        }
        Ok(())
    }

    /// Draws a token-level policy with uniform `k` and uniform `δ`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> ExitPolicy {
        let choices = self.k_max + 1 + usize::from(self.k_infinite);
        let pick = rng.gen_range(0..choices);
        let k = if pick > self.k_max {
            WindowSize::Infinite
        } else {
            WindowSize::Radius(pick)
        };
        let delta = if self.delta_max > self.delta_min {
            rng.gen_range(self.delta_min..=self.delta_max)
        } else {
            self.delta_min
        };
        ExitPolicy::tokee(k, delta)
    }
}

/// Exit layers the model itself would choose under `policy`, read off a
/// full forward pass without copying.
pub fn exit_assignment_for(
    weights: &EncoderWeights,
    ids: &[usize],
    policy: &ExitPolicy,
) -> Result<ExitAssignment> {
    let trace = forward_full(weights, ids)?;
    Ok(ExitAssignment(simulate_exits(&trace.uncertainty, policy)?))
}

/// Self-sampling: a random token-level policy applied to the model's own
/// uncertainties.
pub fn sample_exit_assignment_self<R: Rng>(
    weights: &EncoderWeights,
    ids: &[usize],
    ranges: &SamplingRanges,
    rng: &mut R,
) -> Result<ExitAssignment> {
    let policy = ranges.sample(rng);
    exit_assignment_for(weights, ids, &policy)
}

/// Independent uniform halting layers.
pub fn sample_exit_assignment_random<R: Rng>(n: usize, num_layers: usize, rng: &mut R) -> ExitAssignment {
    ExitAssignment((0..n).map(|_| rng.gen_range(1..=num_layers)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weights() -> EncoderWeights {
        let cfg = ModelConfig {
            num_layers: 4,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 8,
            num_labels: 3,
            vocab_size: 10,
            max_len: 12,
        };
        EncoderWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
    }

    #[test]
    fn threshold_boundaries() {
        let w = weights();
        let ids = [1, 2, 3, 4, 5];
        let zero = exit_assignment_for(&w, &ids, &ExitPolicy::tokee(WindowSize::Radius(1), 0.0)).unwrap();
        assert_eq!(zero.layers(), &[4; 5]);
        let high = exit_assignment_for(&w, &ids, &ExitPolicy::tokee(WindowSize::Infinite, 1.01)).unwrap();
        assert_eq!(high.layers(), &[1; 5]);
        let ranges = SamplingRanges {
            delta_min: 0.0,
            delta_max: 0.0,
            ..SamplingRanges::default()
        };
        let a = sample_exit_assignment_self(&w, &ids, &ranges, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(a.layers(), &[4; 5]);
    }

    #[test]
    fn self_sampling_is_deterministic() {
        let w = weights();
        let ids = [9, 2, 3, 7, 5, 1];
        let r = SamplingRanges::default();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| sample_exit_assignment_self(&w, &ids, &r, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(4), run(4));
    }

    #[test]
    fn sampled_policies_cover_ranges() {
        let r = SamplingRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..600 {
            match r.sample(&mut rng) {
                ExitPolicy::Tokee { k, delta } => {
                    assert!((0.05..=0.9).contains(&delta));
                    seen.insert(k);
                }
                other => panic!("unexpected {other:?}"),
            }
        }
        assert_eq!(seen.len(), 6);
        assert!(seen.contains(&WindowSize::Infinite));
    }

    #[test]
    fn random_assignment_single_layer() {
        let a = sample_exit_assignment_random(7, 1, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(a.layers(), &[1; 7]);
    }

    #[test]
    fn random_assignment_is_uniform() {
        let layers = 6;
        let draws = 100_000;
        let a = sample_exit_assignment_random(draws, layers, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_exit_assignment_random(draws, layers, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let mut counts = vec![0f64; layers];
        for &l in a.layers() {
            counts[l - 1] += 1.0;
        }
        let expected = draws as f64 / layers as f64;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // upper 1% point of chi-squared with 5 degrees of freedom
        assert!(chi2 < 15.086, "chi2 = {chi2}");
    }

    #[test]
    fn invalid_ranges() {
        let r = SamplingRanges {
            delta_min: 0.5,
            delta_max: 0.2,
            ..SamplingRanges::default()
        };
        assert!(r.validate().is_err());
        let r = SamplingRanges {
            delta_max: 1.5,
            ..SamplingRanges::default()
        };
        assert!(r.validate().is_err());
    }
}
