//! Splits synthetic words into wordpieces and runs token-level exit with
//! word groups, so all pieces of a word leave at the same layer and the
//! decision is read from the first piece.
//!
//! Usage: `cargo run --release --example wordpiece_groups`

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqexit::data::synth::{split_wordpieces, SynthSpec, SynthTask};
use seqexit::data::{encode_corpus, LabeledSequence, TokenVocab};
use seqexit::eval::evaluate_policy;
use seqexit::exit_policy::{ExitPolicy, WindowSize};
use seqexit::halt_copy::forward_token_ee;

fn main() -> seqexit::Result<()> {
    let task = SynthTask::new(SynthSpec::default())?;
    let labels = task.label_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let split = |seqs: Vec<LabeledSequence>| -> Vec<LabeledSequence> {
        seqs.iter().map(|s| split_wordpieces(s, labels, 4)).collect()
    };
    let train = split(task.generate(1500, &mut rng));
    let dev = split(task.generate(300, &mut rng));
    let vocab = TokenVocab::new(train.iter().chain(&dev).flat_map(|s| s.tokens.iter()));
    let train_ex = encode_corpus(&train, &vocab);
    let dev_ex = encode_corpus(&dev, &vocab);
    let weights = common::model_for(None, &train_ex, vocab.len(), labels.len())?;

    let policy = ExitPolicy::tokee(WindowSize::Radius(2), 0.3);
    let sample = &dev[0];
    let ids = vocab.encode(&sample.tokens);
    let free = forward_token_ee(&weights, &ids, &policy, None)?;
    let grouped = forward_token_ee(&weights, &ids, &policy, sample.groups.as_ref())?;
    println!("{:<14}{:>8}{:>8}", "piece", "free", "grouped");
    for (t, tok) in sample.tokens.iter().enumerate() {
        println!("{tok:<14}{:>8}{:>8}", free.trace.exit_layer[t], grouped.trace.exit_layer[t]);
    }

    for (name, use_groups) in [("per piece", false), ("per word", true)] {
        let e = evaluate_policy(&weights, &dev_ex, &policy, Some(labels), use_groups)?;
        println!(
            "{name:<10} speedup {:.2} accuracy {:.4} span F1 {:.4}",
            e.speedup,
            e.accuracy,
            e.f1.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
