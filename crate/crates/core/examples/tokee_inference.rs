//! Token-level early exit on a few synthetic sentences: per-token exit
//! layers for several window sizes and the resulting speedup.
//!
//! Usage: `cargo run --release --example tokee_inference [CHECKPOINT]`

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqexit::data::encode_corpus;
use seqexit::data::synth::{SynthSpec, SynthTask};
use seqexit::exit_policy::{ExitPolicy, WindowSize};
use seqexit::halt_copy::forward_token_ee;

fn main() -> seqexit::Result<()> {
    let task = SynthTask::new(SynthSpec::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let train = encode_corpus(&task.generate(1500, &mut rng), task.token_vocab());
    let weights = common::model_for(
        common::checkpoint_arg().as_deref(),
        &train,
        task.token_vocab().len(),
        task.label_vocab().len(),
    )?;

    let labels = task.label_vocab();
    for seq in task.generate(3, &mut rng) {
        let ids = task.token_vocab().encode(&seq.tokens);
        let gold = labels.decode(&seq.labels)?;
        let widths: Vec<usize> = seq.tokens.iter().zip(&gold).map(|(t, g)| t.len().max(g.len()) + 2).collect();
        let row = |cells: Vec<String>| -> String {
            cells.iter().zip(&widths).map(|(c, &w)| format!("{c:>w$}")).collect()
        };
        println!();
        println!("{:<8}{}", "token", row(seq.tokens.clone()));
        println!("{:<8}{}", "gold", row(gold.iter().map(|g| g.to_string()).collect()));
        for k in [WindowSize::Radius(0), WindowSize::Radius(2), WindowSize::Infinite] {
            let out = forward_token_ee(&weights, &ids, &ExitPolicy::tokee(k, 0.3), None)?;
            let exits = row(out.trace.exit_layer.iter().map(|e| e.to_string()).collect());
            println!("{:<8}{exits}   speedup {:.2}", format!("k={k}"), out.ledger.speedup());
        }
    }
    Ok(())
}
