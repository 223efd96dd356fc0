use serde::{Deserialize, Serialize};

use super::ExitAssignment;
use crate::encoder::{self, EncoderTrace, EncoderWeights};
use crate::error::{Error, Result};
use crate::math::{Tape, Var};

/// How per-token cross-entropies of one ramp are reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    /// Mean over tokens, so the loss scale does not grow with length.
    #[default]
    Mean,
    Sum,
}

impl LossReduction {
    fn token_weight(self, n: usize) -> f64 {
        match self {
            LossReduction::Mean => 1.0 / n as f64,
            LossReduction::Sum => 1.0,
        }
    }
}

/// Weight `l / Σ l` of ramp `l` (1-based) among `num_layers` ramps.
pub fn ramp_weight(layer: usize, num_layers: usize) -> f64 {
    let total = (num_layers * (num_layers + 1)) as f64 / 2.0;
    layer as f64 / total
}

fn check_gold(n: usize, gold: &[usize]) -> Result<()> {
    if gold.len() != n {
        return Err(Error::Input(format!(
            "{} gold labels for {n} tokens",
            gold.len()
        )));
    }
    Ok(())
}

/// Depth-weighted mean of per-ramp cross-entropies evaluated on the ramp
/// distributions stored in `trace`.
pub fn joint_loss(trace: &EncoderTrace, gold: &[usize], reduction: LossReduction) -> Result<f64> {
    check_gold(trace.len(), gold)?;
    let layers = trace.num_layers();
    if layers == 0 || trace.probs.len() != layers {
        return Err(Error::Input("trace has no off-ramp outputs".into()));
    }
    let w = reduction.token_weight(gold.len());
    let mut total = 0.0;
    for (l, probs) in trace.probs.iter().enumerate() {
        let mut ce = 0.0;
        for (t, &y) in gold.iter().enumerate() {
            let p = *probs
                .row(t)
                .get(y)
                .ok_or_else(|| Error::Input(format!("label {y} out of {} classes", probs.cols())))?;
            ce -= p.ln();
        }
        total += ramp_weight(l + 1, layers) * w * ce;
    }
    Ok(total)
}

/// Taped joint loss of the full forward pass (every token through every
/// layer, a cross-entropy at every ramp).
pub fn joint_loss_taped(
    tape: &mut Tape,
    weights: &EncoderWeights,
    ids: &[usize],
    gold: &[usize],
    reduction: LossReduction,
) -> Result<Var> {
    check_gold(ids.len(), gold)?;
    let n = ids.len();
    let layers = weights.config().num_layers;
    let all: Vec<usize> = (0..n).collect();
    let tw = vec![reduction.token_weight(n); n];
    let mut h = encoder::embed(tape, weights, ids)?;
    let mut terms = Vec::with_capacity(layers);
    for l in 0..layers {
        h = encoder::layer_step(tape, weights, l, h, &all)?;
        let logits = encoder::ramp_logits(tape, weights, l, h, &all)?;
        let ce = tape.cross_entropy(logits, gold, &tw)?;
        terms.push((ce, ramp_weight(l + 1, layers)));
    }
    tape.combine(&terms)
}

/// Halt-and-copy forward pass where token `t` is updated by layers
/// `1..=assignment[t]` and then copied upward. Each token's loss is taken
/// at the ramp of its assigned layer. Returns the reduced loss.
pub fn forward_with_assignment(
    tape: &mut Tape,
    weights: &EncoderWeights,
    ids: &[usize],
    gold: &[usize],
    assignment: &ExitAssignment,
    reduction: LossReduction,
) -> Result<Var> {
    check_gold(ids.len(), gold)?;
    let n = ids.len();
    let layers = weights.config().num_layers;
    assignment.check(n, layers)?;
    let exit = assignment.layers();
    let w = reduction.token_weight(n);
    let mut h = encoder::embed(tape, weights, ids)?;
    let mut terms = Vec::new();
    for l in 0..layers {
        let active: Vec<usize> = (0..n).filter(|&t| exit[t] > l).collect();
        if active.is_empty() {
            break;
        }
        h = encoder::layer_step(tape, weights, l, h, &active)?;
        let leaving: Vec<usize> = active.iter().copied().filter(|&t| exit[t] == l + 1).collect();
        if leaving.is_empty() {
            continue;
        }
        let logits = encoder::ramp_logits(tape, weights, l, h, &leaving)?;
        let targets: Vec<usize> = leaving.iter().map(|&t| gold[t]).collect();
        let ce = tape.cross_entropy(logits, &targets, &vec![w; leaving.len()])?;
        terms.push((ce, 1.0));
    }
    tape.combine(&terms)
}

/// Flooding `|raw − b| + b` and its derivative with respect to `raw`
/// (0 at the kink).
pub fn flooded_step_loss(raw: f64, level: f64) -> Result<(f64, f64)> {
    if !(level >= 0.0) {
        return Err(Error::Config(format!("flooding level must be >= 0, got {level}")));
    }
    let diff = raw - level;
    let slope = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    Ok((diff.abs() + level, slope))
}

/// The three depth paths of one sandwich step: the sampled assignment,
/// every token at the top layer, every token at the first layer.
pub struct SandwichTerms {
    pub sampled: Var,
    pub deepest: Var,
    pub shallowest: Var,
}

impl SandwichTerms {
    pub fn total(&self, tape: &mut Tape) -> Result<Var> {
        tape.combine(&[(self.sampled, 1.0), (self.deepest, 1.0), (self.shallowest, 1.0)])
    }
}

pub fn sandwich_step(
    tape: &mut Tape,
    weights: &EncoderWeights,
    ids: &[usize],
    gold: &[usize],
    sampled: &ExitAssignment,
    reduction: LossReduction,
) -> Result<SandwichTerms> {
    let n = ids.len();
    let layers = weights.config().num_layers;
    let sampled = forward_with_assignment(tape, weights, ids, gold, sampled, reduction)?;
    let top = ExitAssignment::uniform(n, layers);
    let deepest = forward_with_assignment(tape, weights, ids, gold, &top, reduction)?;
    let bottom = ExitAssignment::uniform(n, 1);
    let shallowest = forward_with_assignment(tape, weights, ids, gold, &bottom, reduction)?;
    Ok(SandwichTerms {
        sampled,
        deepest,
        shallowest,
    })
}
