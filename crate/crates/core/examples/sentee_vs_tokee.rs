//! Calibrates sentence-level and token-level exit to the same speedups on
//! a synthetic dev set and compares their accuracy.
//!
//! Usage: `cargo run --release --example sentee_vs_tokee [CHECKPOINT]`

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqexit::data::encode_corpus;
use seqexit::data::synth::{SynthSpec, SynthTask};
use seqexit::eval::{calibrate_policy, evaluate_policy};
use seqexit::exit_policy::{ExitPolicy, WindowSize};

fn main() -> seqexit::Result<()> {
    let task = SynthTask::new(SynthSpec::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let train = encode_corpus(&task.generate(1500, &mut rng), task.token_vocab());
    let dev = encode_corpus(&task.generate(300, &mut rng), task.token_vocab());
    let weights = common::model_for(
        common::checkpoint_arg().as_deref(),
        &train,
        task.token_vocab().len(),
        task.label_vocab().len(),
    )?;

    let full = evaluate_policy(&weights, &dev, &ExitPolicy::sentee(0.0), None, false)?;
    println!("full model: accuracy {:.4}", full.accuracy);
    println!("{:>7} {:>22} {:>22}", "target", "sentee", "tokee k=2");
    for target in [1.5, 2.0, 2.5, 3.0, 4.0] {
        let mut cells = Vec::new();
        for template in [ExitPolicy::sentee(0.0), ExitPolicy::tokee(WindowSize::Radius(2), 0.0)] {
            let (cal, eval) = calibrate_policy(&weights, &dev, &template, target, 0.05, None)?;
            cells.push(if cal.converged {
                format!("{:.2}x acc {:.4}", eval.speedup, eval.accuracy)
            } else {
                format!("unreached ({:.2}x)", cal.speedup)
            });
        }
        println!("{target:>6}x {:>22} {:>22}", cells[0], cells[1]);
    }
    Ok(())
}
