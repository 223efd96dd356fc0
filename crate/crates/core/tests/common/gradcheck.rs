// Finite-difference gradient check of the training loss, including the
// halt-and-copy path taken by forward_with_assignment.

use seqexit::encoder::EncoderWeights;
use seqexit::math::Tape;
use seqexit::training::{forward_with_assignment, joint_loss_taped, ExitAssignment, LossReduction};

pub struct MicroBatch {
    pub ids: Vec<Vec<usize>>,
    pub gold: Vec<Vec<usize>>,
    pub exits: Vec<ExitAssignment>,
}

/// Joint loss plus assignment loss summed over the batch. Returns the
/// value and, when `grads` is set, the analytic gradient of every tensor.
pub fn batch_loss(w: &EncoderWeights, batch: &MicroBatch, grads: bool) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let mut terms = Vec::new();
    for ((ids, gold), exits) in batch.ids.iter().zip(&batch.gold).zip(&batch.exits) {
        terms.push((joint_loss_taped(&mut tape, w, ids, gold, LossReduction::Mean).unwrap(), 1.0));
        let assigned = forward_with_assignment(&mut tape, w, ids, gold, exits, LossReduction::Mean).unwrap();
        terms.push((assigned, 1.0));
    }
    let loss = tape.combine(&terms).unwrap();
    let value = tape.value(loss).data()[0];
    if !grads {
        return (value, Vec::new());
    }
    let g = tape.backward(loss).unwrap();
    let per_tensor = w
        .tensors()
        .iter()
        .enumerate()
        .map(|(id, t)| match g.param(id) {
            Some(m) => m.data().to_vec(),
            None => vec![0.0; t.value.data().len()],
        })
        .collect();
    (value, per_tensor)
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
    /// Entries whose analytic and numeric gradients are both below `ZERO`.
    pub zero_entries: usize,
}

/// Both gradients below this magnitude count as an exact zero.
pub const ZERO: f64 = 1e-10;

/// Compares analytic gradients with a fourth-order central difference.
/// `entries` picks which flat indices of a tensor of the given length to check.
pub fn check(
    weights: &EncoderWeights,
    batch: &MicroBatch,
    step: f64,
    entries: impl Fn(usize, usize) -> Vec<usize>,
) -> GradReport {
    let (_, analytic) = batch_loss(weights, batch, true);
    let mut w = weights.clone();
    let mut report = GradReport::default();
    for id in 0..w.tensors().len() {
        let len = w.tensors()[id].value.data().len();
        for i in entries(id, len) {
            let x = w.tensors()[id].value.data()[i];
            let mut at = |v: f64| {
                w.tensors_mut()[id].value.data_mut()[i] = v;
                batch_loss(&w, batch, false).0
            };
            let numeric = (-at(x + 2.0 * step) + 8.0 * at(x + step) - 8.0 * at(x - step) + at(x - 2.0 * step))
                / (12.0 * step);
            w.tensors_mut()[id].value.data_mut()[i] = x;
            let a = analytic[id][i];
            report.checked += 1;
            if a.abs() < ZERO && numeric.abs() < ZERO {
                report.zero_entries += 1;
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!("{}[{i}]: analytic {a:e}, numeric {numeric:e}", w.tensors()[id].name);
            }
        }
    }
    report
}
