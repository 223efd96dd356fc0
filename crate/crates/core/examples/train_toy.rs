//! Trains the toy encoder on the synthetic task (joint stage, then
//! self-sampling stage) and reports per-ramp dev accuracy plus a few exit
//! operating points.
//!
//! Usage: `cargo run --release --example train_toy [TRAIN_SENTENCES] [CHECKPOINT_OUT]`
//! The defaults (16000 sentences) take several minutes on one core.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqexit::data::encode_corpus;
use seqexit::data::synth::{SynthSpec, SynthTask};
use seqexit::encoder::{checkpoint, EncoderWeights, ModelConfig};
use seqexit::eval::{evaluate_policy, ramp_accuracies};
use seqexit::exit_policy::{ExitPolicy, WindowSize};
use seqexit::training::{Stage2Mode, TrainConfig, Trainer};

fn main() -> seqexit::Result<()> {
    let mut args = std::env::args().skip(1);
    let train_size: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(16_000);
    let out = args.next();

    let task = SynthTask::new(SynthSpec::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let train = encode_corpus(&task.generate(train_size, &mut rng), task.token_vocab());
    let dev = encode_corpus(&task.generate(300, &mut rng), task.token_vocab());

    let model = ModelConfig::toy(task.token_vocab().len(), task.label_vocab().len());
    let mut weights = EncoderWeights::init(&model, &mut ChaCha8Rng::seed_from_u64(0))?;
    let start = Instant::now();
    let mut trainer = Trainer::new(TrainConfig::default())?.with_dev(&dev).with_log(std::io::stdout());
    let level = trainer.run_stage1(&mut weights, &train)?.final_loss;
    println!("joint stage done in {:.1}s, flood level {level:.4}", start.elapsed().as_secs_f64());
    trainer.run_stage2(&mut weights, &train, Stage2Mode::SelfSampling, level)?;
    println!("self-sampling stage done in {:.1}s", start.elapsed().as_secs_f64());
    if let Some(path) = out {
        checkpoint::save(&weights, &path)?;
        println!("saved {path}");
    }

    let ramps = ramp_accuracies(&weights, &dev)?;
    println!("dev accuracy per ramp: {ramps:.4?}");
    for delta in [0.05, 0.1, 0.2, 0.3, 0.4, 0.6] {
        for policy in [ExitPolicy::tokee(WindowSize::Radius(2), delta), ExitPolicy::sentee(delta)] {
            let e = evaluate_policy(&weights, &dev, &policy, None, false)?;
            println!(
                "{:>6} delta={delta:<5} speedup={:.3} acc={:.4} mean_exit={:.2}",
                policy.name(),
                e.speedup,
                e.accuracy,
                e.mean_exit_layer
            );
        }
    }
    Ok(())
}
