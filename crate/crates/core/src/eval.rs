//! Dataset-level evaluation of exit policies.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{span_f1, token_accuracy, Example, LabelVocab};
use crate::encoder::{forward_full, EncoderWeights};
use crate::error::{Error, Result};
use crate::exit_policy::{calibrate_threshold, Calibration, ExitPolicy};
use crate::flops::{average_speedup, FlopsLedger};
use crate::halt_copy::forward_early_exit;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Token accuracy.
    #[default]
    Accuracy,
    /// Exact-match span F1 under the BIO schema.
    F1,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" | "acc" => Ok(Metric::Accuracy),
            "f1" | "span-f1" => Ok(Metric::F1),
            _ => Err(Error::Usage(format!("unknown metric {s:?}; use accuracy or f1"))),
        }
    }
}

/// Outcome of running one policy over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PolicyEval {
    pub policy: ExitPolicy,
    /// Backbone speedup as a ratio of summed costs.
    pub speedup: f64,
    pub speedup_with_overhead: f64,
    pub accuracy: f64,
    pub f1: Option<f64>,
    pub mean_exit_layer: f64,
    /// Token count per exit layer, index 0 is layer 1.
    pub exit_histogram: Vec<usize>,
    pub predictions: Vec<Vec<usize>>,
}

impl PolicyEval {
    pub fn metric(&self, metric: Metric) -> Result<f64> {
        match metric {
            Metric::Accuracy => Ok(self.accuracy),
            Metric::F1 => self
                .f1
                .ok_or_else(|| Error::Usage("span F1 needs a BIO label vocabulary".into())),
        }
    }
}

/// Runs `policy` over `examples`. Word groups are honoured when
/// `use_groups` is set and the example has them.
pub fn evaluate_policy(
    weights: &EncoderWeights,
    examples: &[Example],
    policy: &ExitPolicy,
    labels: Option<&LabelVocab>,
    use_groups: bool,
) -> Result<PolicyEval> {
    if examples.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let outs: Vec<(Vec<usize>, Vec<usize>, FlopsLedger)> = examples
        .par_iter()
        .map(|ex| {
            let groups = if use_groups { ex.groups.as_ref() } else { None };
            let out = forward_early_exit(weights, &ex.ids, policy, groups)?;
            Ok((out.labels, out.trace.exit_layer, out.ledger))
        })
        .collect::<Result<_>>()?;
    let layers = weights.config().num_layers;
    let mut histogram = vec![0usize; layers];
    let mut exit_sum = 0usize;
    for (_, exits, _) in &outs {
        for &e in exits {
            histogram[e - 1] += 1;
            exit_sum += e;
        }
    }
    let tokens: usize = histogram.iter().sum();
    let speedup = average_speedup(outs.iter().map(|o| &o.2))?;
    let base: u64 = outs.iter().map(|o| o.2.baseline_total).sum();
    let total: u64 = outs.iter().map(|o| o.2.total()).sum();
    let predictions: Vec<Vec<usize>> = outs.into_iter().map(|o| o.0).collect();
    let gold: Vec<Vec<usize>> = examples.iter().map(|e| e.labels.clone()).collect();
    let accuracy = token_accuracy(&predictions, &gold)?;
    let f1 = match labels {
        Some(v) if v.schema() == crate::data::Schema::Bio => {
            Some(span_f1(&predictions, &gold, v)?.f1)
        }
        _ => None,
    };
    Ok(PolicyEval {
        policy: policy.clone(),
        speedup,
        speedup_with_overhead: base as f64 / total as f64,
        accuracy,
        f1,
        mean_exit_layer: exit_sum as f64 / tokens as f64,
        exit_histogram: histogram,
        predictions,
    })
}

/// Token accuracy of every ramp under a full forward pass.
pub fn ramp_accuracies(weights: &EncoderWeights, examples: &[Example]) -> Result<Vec<f64>> {
    let layers = weights.config().num_layers;
    let per: Vec<Vec<usize>> = examples
        .par_iter()
        .map(|ex| {
            let trace = forward_full(weights, &ex.ids)?;
            Ok((0..layers)
                .map(|l| {
                    trace.probs[l]
                        .argmax_rows()
                        .iter()
                        .zip(&ex.labels)
                        .filter(|(a, b)| a == b)
                        .count()
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let total: usize = examples.iter().map(Example::len).sum();
    Ok((0..layers)
        .map(|l| per.iter().map(|p| p[l]).sum::<usize>() as f64 / total as f64)
        .collect())
}

/// Finds the threshold at which `template` reaches `target` speedup and
/// evaluates the policy there.
pub fn calibrate_policy(
    weights: &EncoderWeights,
    examples: &[Example],
    template: &ExitPolicy,
    target: f64,
    tolerance: f64,
    labels: Option<&LabelVocab>,
) -> Result<(Calibration, PolicyEval)> {
    let cal = calibrate_threshold(target, tolerance, |delta| {
        let p = template.clone().with_threshold(delta);
        Ok(evaluate_policy(weights, examples, &p, None, false)?.speedup)
    })?;
    let eval = evaluate_policy(
        weights,
        examples,
        &template.clone().with_threshold(cal.delta),
        labels,
        false,
    )?;
    Ok((cal, eval))
}
