use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{flooded_step_loss, joint_loss_taped, sandwich_step, LossReduction};
use super::optimizer::{clip_global_norm, AdamW, Schedule};
use super::sampling::{
    sample_exit_assignment_random, sample_exit_assignment_self, SamplingRanges,
};
use crate::data::Example;
use crate::encoder::{checkpoint, EncoderWeights};
use crate::error::{Error, Result};
use crate::eval::ramp_accuracies;
use crate::math::{Matrix, Tape};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage2Mode {
    /// Assignments from the model's own token-level exits.
    #[default]
    #[serde(rename = "self")]
    SelfSampling,
    /// Uniform random assignments.
    Random,
    /// Skip the second stage.
    None,
}

/// Which part of the stage-2 loss is flooded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FloodTarget {
    /// The sum of the three sandwich paths.
    #[default]
    Combined,
    /// Only the sampled path.
    Sampled,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub stage2_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    /// Gradient clipping by global norm; `None` disables it.
    pub grad_clip: Option<f64>,
    /// Flooding level; `None` uses the final stage-1 training loss.
    pub flood_level: Option<f64>,
    pub flood: FloodTarget,
    pub sampling: SamplingRanges,
    pub stage2: Stage2Mode,
    pub loss_reduction: LossReduction,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_epochs: 4,
            stage2_epochs: 1,
            batch_size: 16,
            lr: 3e-3,
            stage2_lr: 1e-3,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            grad_clip: Some(1.0),
            flood_level: None,
            flood: FloodTarget::Combined,
            sampling: SamplingRanges::default(),
            stage2: Stage2Mode::SelfSampling,
            loss_reduction: LossReduction::Mean,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.stage2_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1)");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        if matches!(self.flood_level, Some(b) if !(b >= 0.0)) {
            return bad("flood_level must be non-negative");
        }
        self.sampling.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Joint,
    #[serde(rename = "self")]
    SelfSampling,
    Random,
}

/// One line of the JSONL training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    /// Mean per-sequence training loss before flooding.
    pub loss: f64,
    /// Dev token accuracy of each ramp under a full forward pass.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_accuracy: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub epochs: Vec<EpochRecord>,
    pub final_loss: f64,
    pub flood_level: Option<f64>,
}

/// Runs the training stages, with optional dev evaluation, JSONL logging
/// and per-stage checkpoints.
pub struct Trainer<'a> {
    config: TrainConfig,
    dev: Option<&'a [Example]>,
    log: Option<Box<dyn Write + 'a>>,
    checkpoint_dir: Option<PathBuf>,
}

type Grads = HashMap<usize, Matrix>;

fn accumulate(total: &mut Grads, part: Grads, scale: f64) {
    for (id, g) in part {
        match total.get_mut(&id) {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
            None => {
                total.insert(id, g.scale(scale));
            }
        }
    }
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            config,
            dev: None,
            log: None,
            checkpoint_dir: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn with_dev(mut self, dev: &'a [Example]) -> Self {
        self.dev = Some(dev);
        self
    }

    pub fn with_log(mut self, log: impl Write + 'a) -> Self {
        self.log = Some(Box::new(log));
        self
    }

    pub fn with_checkpoints(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    /// Stage 1 followed by the configured stage 2.
    pub fn run(&mut self, weights: &mut EncoderWeights, train: &[Example]) -> Result<Vec<StageReport>> {
        let first = self.run_stage1(weights, train)?;
        let mut reports = vec![first];
        if self.config.stage2 != Stage2Mode::None {
            let level = self.config.flood_level.unwrap_or(reports[0].final_loss);
            let mode = self.config.stage2;
            reports.push(self.run_stage2(weights, train, mode, level)?);
        }
        Ok(reports)
    }

    fn emit(&mut self, weights: &EncoderWeights, stage: Stage, epoch: usize, loss: f64) -> Result<EpochRecord> {
        let dev_accuracy = match self.dev {
            Some(dev) if !dev.is_empty() => Some(ramp_accuracies(weights, dev)?),
            _ => None,
        };
        let record = EpochRecord {
            stage,
            epoch,
            loss,
            dev_accuracy,
        };
        if let Some(log) = self.log.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(log, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        Ok(record)
    }

    fn save(&self, weights: &EncoderWeights, name: &str) -> Result<()> {
        if let Some(dir) = &self.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            checkpoint::save(weights, dir.join(name))?;
        }
        Ok(())
    }

    fn stage_rng(&self, stage: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(stage);
        rng
    }

    /// Joint training of all ramps on full forward passes.
    pub fn run_stage1(&mut self, weights: &mut EncoderWeights, train: &[Example]) -> Result<StageReport> {
        let cfg = self.config.clone();
        let mut rng = self.stage_rng(1);
        let reduction = cfg.loss_reduction;
        let loop_report = self.train_loop(
            weights,
            train,
            cfg.stage1_epochs,
            cfg.lr,
            Stage::Joint,
            &mut rng,
            |w, ex, _seed| {
                let mut tape = Tape::new();
                let loss = joint_loss_taped(&mut tape, w, &ex.ids, &ex.labels, reduction)?;
                let value = tape.value(loss).data()[0];
                Ok(StepOut {
                    flooded_part: value,
                    other_part: 0.0,
                    flooded_grads: tape.backward(loss)?.into_params(),
                    other_grads: HashMap::new(),
                })
            },
            None,
        )?;
        self.save(weights, "stage1.ckpt")?;
        Ok(loop_report)
    }

    /// Sandwich training under sampled exit assignments with halt-and-copy.
    pub fn run_stage2(
        &mut self,
        weights: &mut EncoderWeights,
        train: &[Example],
        mode: Stage2Mode,
        flood_level: f64,
    ) -> Result<StageReport> {
        let stage = match mode {
            Stage2Mode::SelfSampling => Stage::SelfSampling,
            Stage2Mode::Random => Stage::Random,
            Stage2Mode::None => {
                return Err(Error::Usage("stage 2 requested with mode none".into()))
            }
        };
        let cfg = self.config.clone();
        let mut rng = self.stage_rng(2);
        let reduction = cfg.loss_reduction;
        let ranges = cfg.sampling.clone();
        let layers = weights.config().num_layers;
        let flood = cfg.flood;
        let level = (flood != FloodTarget::Off).then_some(flood_level);
        let report = self.train_loop(
            weights,
            train,
            cfg.stage2_epochs,
            cfg.stage2_lr,
            stage,
            &mut rng,
            |w, ex, seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let assignment = match mode {
                    Stage2Mode::SelfSampling => {
                        sample_exit_assignment_self(w, &ex.ids, &ranges, &mut rng)?
                    }
                    _ => sample_exit_assignment_random(ex.len(), layers, &mut rng),
                };
                let mut tape = Tape::new();
                let terms = sandwich_step(&mut tape, w, &ex.ids, &ex.labels, &assignment, reduction)?;
                if flood == FloodTarget::Sampled {
                    let rest = tape.combine(&[(terms.deepest, 1.0), (terms.shallowest, 1.0)])?;
                    Ok(StepOut {
                        flooded_part: tape.value(terms.sampled).data()[0],
                        other_part: tape.value(rest).data()[0],
                        flooded_grads: tape.backward(terms.sampled)?.into_params(),
                        other_grads: tape.backward(rest)?.into_params(),
                    })
                } else {
                    let total = terms.total(&mut tape)?;
                    Ok(StepOut {
                        flooded_part: tape.value(total).data()[0],
                        other_part: 0.0,
                        flooded_grads: tape.backward(total)?.into_params(),
                        other_grads: HashMap::new(),
                    })
                }
            },
            level,
        )?;
        let name = match mode {
            Stage2Mode::Random => "stage2-random.ckpt",
            _ => "stage2-self.ckpt",
        };
        self.save(weights, name)?;
        Ok(report)
    }

    #[allow(clippy::too_many_arguments)]
    fn train_loop<F>(
        &mut self,
        weights: &mut EncoderWeights,
        train: &[Example],
        epochs: usize,
        peak_lr: f64,
        stage: Stage,
        rng: &mut ChaCha8Rng,
        step_fn: F,
        flood_level: Option<f64>,
    ) -> Result<StageReport>
    where
        F: Fn(&EncoderWeights, &Example, u64) -> Result<StepOut> + Sync,
    {
        if train.is_empty() {
            return Err(Error::Input("empty training set".into()));
        }
        let batch = self.config.batch_size;
        let steps_per_epoch = train.len().div_ceil(batch);
        let schedule = Schedule::new(peak_lr, self.config.warmup_fraction, epochs * steps_per_epoch);
        let mut opt = AdamW::new(self.config.weight_decay);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut records = Vec::with_capacity(epochs);
        let mut final_loss = f64::NAN;
        let mut step = 0;
        for epoch in 1..=epochs {
            order.shuffle(rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(batch) {
                let seeds: Vec<u64> = chunk.iter().map(|_| rng.gen()).collect();
                let w: &EncoderWeights = weights;
                let outs: Vec<StepOut> = chunk
                    .par_iter()
                    .zip(seeds.par_iter())
                    .map(|(&i, &seed)| step_fn(w, &train[i], seed))
                    .collect::<Result<_>>()?;
                let scale = 1.0 / chunk.len() as f64;
                let mut flooded = 0.0;
                let mut other = 0.0;
                let mut g_flood = HashMap::new();
                let mut g_other = HashMap::new();
                for out in outs {
                    flooded += scale * out.flooded_part;
                    other += scale * out.other_part;
                    accumulate(&mut g_flood, out.flooded_grads, scale);
                    accumulate(&mut g_other, out.other_grads, scale);
                }
                epoch_loss += (flooded + other) * chunk.len() as f64;
                let slope = match flood_level {
                    Some(b) => flooded_step_loss(flooded, b)?.1,
                    None => 1.0,
                };
                let mut grads = HashMap::new();
                accumulate(&mut grads, g_flood, slope);
                accumulate(&mut grads, g_other, 1.0);
                if let Some(c) = self.config.grad_clip {
                    clip_global_norm(&mut grads, c);
                }
                opt.step(weights, &grads, schedule.rate(step))?;
                step += 1;
            }
            final_loss = epoch_loss / train.len() as f64;
            if !final_loss.is_finite() {
                return Err(Error::Input(format!(
                    "training diverged in epoch {epoch}: loss {final_loss}"
                )));
            }
            records.push(self.emit(weights, stage, epoch, final_loss)?);
        }
        Ok(StageReport {
            epochs: records,
            final_loss,
            flood_level,
        })
    }
}

struct StepOut {
    flooded_part: f64,
    other_part: f64,
    flooded_grads: Grads,
    other_grads: Grads,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;

    fn setup() -> (EncoderWeights, Vec<Example>) {
        let cfg = ModelConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 8,
            num_labels: 3,
            vocab_size: 6,
            max_len: 8,
        };
        let w = EncoderWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        // label = token id mod 3
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = (0..24)
            .map(|_| {
                let n = rng.gen_range(2..6);
                let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..6)).collect();
                let labels = ids.iter().map(|i| i % 3).collect();
                Example {
                    ids,
                    labels,
                    groups: None,
                }
            })
            .collect();
        (w, data)
    }

    fn config() -> TrainConfig {
        TrainConfig {
            stage1_epochs: 8,
            stage2_epochs: 2,
            batch_size: 4,
            lr: 1e-2,
            stage2_lr: 5e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stage1_reduces_loss_and_logs() {
        let (mut w, data) = setup();
        let mut log = Vec::new();
        let report = {
            let mut t = Trainer::new(config()).unwrap().with_dev(&data).with_log(&mut log);
            t.run_stage1(&mut w, &data).unwrap()
        };
        assert_eq!(report.epochs.len(), 8);
        assert!(report.epochs[7].loss < 0.5 * report.epochs[0].loss);
        let lines: Vec<EpochRecord> = String::from_utf8(log)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines, report.epochs);
        assert_eq!(lines[0].dev_accuracy.as_ref().unwrap().len(), 2);
    }

    #[test]
    fn two_stage_pipeline_is_reproducible() {
        let (w0, data) = setup();
        let run = |mode| {
            let mut w = w0.clone();
            let cfg = TrainConfig {
                stage2: mode,
                ..config()
            };
            let reports = Trainer::new(cfg).unwrap().run(&mut w, &data).unwrap();
            (w, reports)
        };
        let (a, ra) = run(Stage2Mode::SelfSampling);
        let (b, rb) = run(Stage2Mode::SelfSampling);
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.len(), 2);
        assert_eq!(ra[1].flood_level, Some(ra[0].final_loss));
        let (c, _) = run(Stage2Mode::Random);
        assert_ne!(a, c);
        let (_, rn) = run(Stage2Mode::None);
        assert_eq!(rn.len(), 1);
    }

    #[test]
    fn checkpoints_per_stage() {
        let (mut w, data) = setup();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            stage1_epochs: 1,
            stage2_epochs: 1,
            ..config()
        };
        Trainer::new(cfg)
            .unwrap()
            .with_checkpoints(dir.path())
            .run(&mut w, &data)
            .unwrap();
        let back = checkpoint::load(dir.path().join("stage2-self.ckpt")).unwrap();
        assert_eq!(back, w);
        assert!(dir.path().join("stage1.ckpt").exists());
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
            TrainConfig { warmup_fraction: 1.0, ..TrainConfig::default() },
            TrainConfig { flood_level: Some(-1.0), ..TrainConfig::default() },
        ] {
            assert!(matches!(Trainer::new(cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = TrainConfig {
            stage2: Stage2Mode::Random,
            flood: FloodTarget::Sampled,
            ..TrainConfig::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), cfg);
        assert!(toml::from_str::<TrainConfig>("bogus = 1").is_err());
    }
}
