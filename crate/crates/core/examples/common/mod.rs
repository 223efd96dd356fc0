#![allow(dead_code)]

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqexit::data::Example;
use seqexit::encoder::{checkpoint, EncoderWeights, ModelConfig};
use seqexit::training::{Stage2Mode, TrainConfig, Trainer};

/// Loads a checkpoint when a path is given, otherwise trains a small model
/// in well under a minute. The quick model is far from converged but shows
/// the mechanics.
pub fn model_for(
    path: Option<&Path>,
    train: &[Example],
    vocab_size: usize,
    num_labels: usize,
) -> seqexit::Result<EncoderWeights> {
    if let Some(p) = path {
        return checkpoint::load(p);
    }
    eprintln!("no checkpoint given, training a quick model on {} sentences", train.len());
    let config = ModelConfig::toy(vocab_size, num_labels);
    let mut weights = EncoderWeights::init(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let cfg = TrainConfig { stage1_epochs: 3, stage2_epochs: 1, ..TrainConfig::default() };
    let mut trainer = Trainer::new(cfg)?;
    let level = trainer.run_stage1(&mut weights, train)?.final_loss;
    trainer.run_stage2(&mut weights, train, Stage2Mode::SelfSampling, level)?;
    Ok(weights)
}

pub fn checkpoint_arg() -> Option<std::path::PathBuf> {
    std::env::args_os().nth(1).map(Into::into)
}
