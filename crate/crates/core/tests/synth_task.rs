use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqexit::data::encode_corpus;
use seqexit::data::synth::{SynthSpec, SynthTask};
use seqexit::encoder::{EncoderWeights, ModelConfig};
use seqexit::eval::ramp_accuracies;
use seqexit::training::{TrainConfig, Trainer};

#[test]
fn easy_task_is_solved_by_one_layer() {
    let task = SynthTask::new(SynthSpec {
        difficulty: 0.0,
        reference_rate: 0.0,
        ..SynthSpec::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let train = encode_corpus(&task.generate(2000, &mut rng), task.token_vocab());
    let dev = encode_corpus(&task.generate(300, &mut rng), task.token_vocab());
    let model = ModelConfig {
        num_layers: 1,
        ..ModelConfig::toy(task.token_vocab().len(), task.label_vocab().len())
    };
    let mut w = EncoderWeights::init(&model, &mut rng).unwrap();
    let mut trainer = Trainer::new(TrainConfig { stage1_epochs: 2, ..TrainConfig::default() }).unwrap();
    trainer.run_stage1(&mut w, &train).unwrap();
    let acc = ramp_accuracies(&w, &dev).unwrap()[0];
    assert!(acc >= 0.99, "one-layer accuracy {acc}");
}
