//! Compares backpropagated gradients of the training loss with central
//! finite differences on a small encoder, through both the full forward
//! pass and a halt-and-copy forward with mixed exit layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqexit::encoder::{EncoderWeights, ModelConfig};
use seqexit::math::Tape;
use seqexit::training::{forward_with_assignment, joint_loss_taped, ExitAssignment, LossReduction};

fn loss(w: &EncoderWeights, ids: &[usize], gold: &[usize], exits: &ExitAssignment) -> seqexit::Result<(Tape, seqexit::math::Var)> {
    let mut tape = Tape::new();
    let joint = joint_loss_taped(&mut tape, w, ids, gold, LossReduction::Mean)?;
    let assigned = forward_with_assignment(&mut tape, w, ids, gold, exits, LossReduction::Mean)?;
    let total = tape.combine(&[(joint, 1.0), (assigned, 1.0)])?;
    Ok((tape, total))
}

fn main() -> seqexit::Result<()> {
    let config = ModelConfig {
        num_layers: 3,
        hidden_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        num_labels: 5,
        vocab_size: 12,
        max_len: 16,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut w = EncoderWeights::init(&config, &mut rng)?;
    let ids = [4, 7, 1, 9, 2, 2];
    let gold = [0, 1, 2, 0, 3, 4];
    let exits = ExitAssignment::new(vec![1, 3, 2, 3, 1, 2], 3)?;

    let (tape, total) = loss(&w, &ids, &gold, &exits)?;
    let grads = tape.backward(total)?;
    let h = 1e-5;
    println!("{:<28}{:>14}{:>14}{:>11}", "parameter", "analytic", "numeric", "rel err");
    let mut worst: f64 = 0.0;
    for id in 0..w.tensors().len() {
        let len = w.tensors()[id].value.data().len();
        let i = rng.gen_range(0..len);
        let analytic = grads.param(id).map_or(0.0, |g| g.data()[i]);
        let x = w.tensors()[id].value.data()[i];
        let mut at = |v: f64| -> seqexit::Result<f64> {
            w.tensors_mut()[id].value.data_mut()[i] = v;
            let (tape, total) = loss(&w, &ids, &gold, &exits)?;
            Ok(tape.value(total).data()[0])
        };
        let numeric = (at(x + h)? - at(x - h)?) / (2.0 * h);
        w.tensors_mut()[id].value.data_mut()[i] = x;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max(rel);
        let name = format!("{}[{i}]", w.tensors()[id].name);
        println!("{name:<28}{analytic:>14.6e}{numeric:>14.6e}{rel:>11.2e}");
    }
    println!("largest relative error {worst:.2e}");
    Ok(())
}
