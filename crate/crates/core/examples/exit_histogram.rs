//! Distribution of exit layers under token-level exit, next to
//! sentence-level exit calibrated to the same speedup.
//!
//! Usage: `cargo run --release --example exit_histogram [CHECKPOINT]`

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqexit::cli::{exit_histogram, HistogramSide};
use seqexit::data::encode_corpus;
use seqexit::data::synth::{SynthSpec, SynthTask};
use seqexit::exit_policy::{ExitPolicy, WindowSize};

fn show(name: &str, side: &HistogramSide) {
    let total: usize = side.histogram.iter().sum();
    println!(
        "{name}: speedup {:.2}, accuracy {:.4}, mean exit layer {:.2}",
        side.speedup, side.metric, side.mean_exit_layer
    );
    for (l, &count) in side.histogram.iter().enumerate() {
        let share = count as f64 / total as f64;
        println!("  layer {:>2} {:>6.1}% {}", l + 1, 100.0 * share, "#".repeat((share * 60.0).round() as usize));
    }
}

fn main() -> seqexit::Result<()> {
    let task = SynthTask::new(SynthSpec::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let train = encode_corpus(&task.generate(1500, &mut rng), task.token_vocab());
    let dev = encode_corpus(&task.generate(300, &mut rng), task.token_vocab());
    let weights = common::model_for(
        common::checkpoint_arg().as_deref(),
        &train,
        task.token_vocab().len(),
        task.label_vocab().len(),
    )?;
    let report = exit_histogram(&weights, &dev, &ExitPolicy::tokee(WindowSize::Radius(2), 0.2), false)?;
    show("tokee k=2 delta=0.2", &report.main);
    if let Some(s) = &report.sentence_match {
        show(&format!("sentee delta={:.3}", s.policy.threshold()), s);
    }
    Ok(())
}
