//! The `seqexit` command-line tool.
//!
//! Exit codes: 0 success, 1 invalid input, 2 usage, 3 configuration,
//! 4 I/O, 5 parse or checkpoint format.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::synth::{split_wordpieces, SynthSpec, SynthTask};
use crate::data::{
    encode_corpus, read_conll, write_conll, ConllColumns, Example, LabelVocab, LabeledSequence,
    TokenVocab,
};
use crate::encoder::{checkpoint, EncoderWeights, ModelConfig};
use crate::error::{Error, Result};
use crate::eval::{calibrate_policy, evaluate_policy, Metric, PolicyEval};
use crate::exit_policy::{ExitPolicy, WindowSize};
use crate::flops::{layer_flops, ramp_flops, sentence_exit_ledger, LayerCost};
use crate::training::{Stage2Mode, StageReport, TrainConfig, Trainer};

/// Version of the sweep and histogram output layouts.
pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable that fixes the number of worker threads.
pub const WORKERS_ENV: &str = "SEQEXIT_WORKERS";

#[derive(Parser, Debug)]
#[command(name = "seqexit", version, about = "Token- and sentence-level early exit for sequence labeling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the encoder in two stages and write checkpoints.
    Train(TrainArgs),
    /// Evaluate exit policies over a threshold grid.
    Sweep(SweepArgs),
    /// Print the analytic cost table for a geometry.
    Flops(FlopsArgs),
    /// Per-layer distribution of exit layers under one policy.
    ExitHistogram(HistogramArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the default configuration and exit.
    #[arg(long)]
    pub dump_config: bool,
    /// CoNLL training corpus; a synthetic corpus is generated otherwise.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// CoNLL development corpus.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Output directory for checkpoints, vocabularies and the metrics log.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also train the random-sampling control from the stage-1 weights.
    #[arg(long)]
    pub controls: bool,
    /// Skip stage 1 and continue from `DIR/stage1.ckpt`.
    #[arg(long, value_name = "DIR")]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ModelInput {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Vocabulary file written by `train`; defaults to `vocab.json` next
    /// to the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// CoNLL corpus to evaluate on.
    #[arg(long)]
    pub corpus: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: ModelInput,
    /// Comma-separated policies among `tokee` and `sentee`.
    #[arg(long, default_value = "tokee,sentee", value_delimiter = ',')]
    pub policies: Vec<String>,
    /// Window radii for the token-level policy; `inf` is the sentence-wide window.
    #[arg(long, default_value = "0,1,2,4,inf", value_delimiter = ',')]
    pub k: Vec<WindowSize>,
    #[arg(
        long,
        default_value = "0,0.05,0.1,0.15,0.2,0.3,0.4,0.5,0.6,0.8",
        value_delimiter = ','
    )]
    pub deltas: Vec<f64>,
    /// Target speedups for per-policy slices with bisected thresholds.
    #[arg(long, default_value = "2,3", value_delimiter = ',')]
    pub matched: Vec<f64>,
    #[arg(long, default_value_t = 0.05)]
    pub tolerance: f64,
    #[arg(long, default_value = "accuracy")]
    pub metric: Metric,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Recorded in every row to identify the trained model.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    /// BERT-base geometry (12 × 768, FFN 3072) with a comparison block.
    #[arg(long)]
    pub bert_base: bool,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn: Option<usize>,
    #[arg(long)]
    pub labels: Option<usize>,
    /// Sequence length `N`.
    #[arg(long, default_value_t = 256)]
    pub tokens: usize,
    /// Active tokens `M` for the per-layer table; defaults to `N`.
    #[arg(long)]
    pub active: Option<usize>,
    /// Whole-sentence exit layer for a speedup line.
    #[arg(long)]
    pub exit_layer: Option<usize>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct HistogramArgs {
    #[command(flatten)]
    pub input: ModelInput,
    #[arg(long, default_value = "tokee")]
    pub policy: String,
    #[arg(long, default_value = "2")]
    pub k: WindowSize,
    #[arg(long)]
    pub delta: f64,
    /// Exit whole words together when the corpus has wordpieces.
    #[arg(long)]
    pub groups: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Named architecture presets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// 6 layers, width 64, 4 heads, FFN 256.
    #[default]
    Toy,
    /// 2 layers, width 16, 2 heads, FFN 32.
    Tiny,
    BertBase,
}

/// Per-field overrides of the preset geometry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOverrides {
    pub num_layers: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub num_heads: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub max_len: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    /// Whitespace column of the token in CoNLL files.
    pub token_column: usize,
    /// Column of the label; the last column when absent.
    pub label_column: Option<usize>,
    pub synth: SynthSpec,
    pub synth_train: usize,
    pub synth_dev: usize,
    /// Split synthetic words longer than this into two wordpieces.
    pub wordpiece_min_chars: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            dev: None,
            token_column: 0,
            label_column: None,
            synth: SynthSpec::default(),
            synth_train: 16000,
            synth_dev: 500,
            wordpiece_min_chars: None,
        }
    }
}

/// Contents of a `train --config` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelOverrides,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Geometry of the preset with overrides, for the given vocabularies.
    pub fn model_config(&self, vocab_size: usize, num_labels: usize) -> Result<ModelConfig> {
        let mut cfg = match self.preset {
            Preset::Toy => ModelConfig::toy(vocab_size, num_labels),
            Preset::Tiny => ModelConfig {
                num_layers: 2,
                hidden_dim: 16,
                num_heads: 2,
                ffn_dim: 32,
                num_labels,
                vocab_size,
                max_len: 128,
            },
            Preset::BertBase => ModelConfig {
                vocab_size,
                ..ModelConfig::bert_base(num_labels, 512)
            },
        };
        let o = &self.model;
        cfg.num_layers = o.num_layers.unwrap_or(cfg.num_layers);
        cfg.hidden_dim = o.hidden_dim.unwrap_or(cfg.hidden_dim);
        cfg.num_heads = o.num_heads.unwrap_or(cfg.num_heads);
        cfg.ffn_dim = o.ffn_dim.unwrap_or(cfg.ffn_dim);
        cfg.max_len = o.max_len.unwrap_or(cfg.max_len);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Token and label vocabularies saved next to checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub tokens: TokenVocab,
    pub labels: LabelVocab,
}

impl Vocabularies {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Errors are reported on `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = write!(err, "{e}");
            return code;
        }
    };
    configure_workers();
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Sweep(a) => cmd_sweep(&a, out),
        Command::Flops(a) => cmd_flops(&a, out),
        Command::ExitHistogram(a) => cmd_exit_histogram(&a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn configure_workers() {
    if let Some(n) = std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        // the global pool can only be set once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

struct Datasets {
    vocab: Vocabularies,
    train: Vec<Example>,
    dev: Vec<Example>,
    dev_sequences: Vec<LabeledSequence>,
}

fn load_datasets(cfg: &DataConfig, seed: u64) -> Result<Datasets> {
    let columns = ConllColumns {
        token: cfg.token_column,
        label: cfg.label_column,
    };
    let (train, dev, labels) = match &cfg.train {
        Some(path) => {
            let train = read_conll(path, columns, None)?;
            let dev = match &cfg.dev {
                Some(d) => read_conll(d, columns, Some(&train.labels))?.sequences,
                None => Vec::new(),
            };
            (train.sequences, dev, train.labels)
        }
        None => {
            let task = SynthTask::new(cfg.synth.clone())?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut train = task.generate(cfg.synth_train, &mut rng);
            let mut dev = task.generate(cfg.synth_dev, &mut rng);
            if let Some(min) = cfg.wordpiece_min_chars {
                let v = task.label_vocab();
                train = train.iter().map(|s| split_wordpieces(s, v, min)).collect();
                dev = dev.iter().map(|s| split_wordpieces(s, v, min)).collect();
            }
            (train, dev, task.label_vocab().clone())
        }
    };
    let tokens = TokenVocab::new(train.iter().flat_map(|s| s.tokens.iter()));
    Ok(Datasets {
        train: encode_corpus(&train, &tokens),
        dev: encode_corpus(&dev, &tokens),
        dev_sequences: dev,
        vocab: Vocabularies { tokens, labels },
    })
}

#[derive(Serialize, Deserialize)]
struct Stage1Summary {
    final_loss: f64,
}

/// Trains stage 1 and the configured stage 2 (plus controls) and writes
/// `stage1.ckpt`, `stage2-self.ckpt`, `stage2-random.ckpt`, `metrics.jsonl`,
/// `vocab.json`, `config.toml` and, for synthetic data, `dev.conll`.
pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut config = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if args.dump_config {
        return write_out(out, &config.to_toml()?);
    }
    if let Some(t) = &args.train {
        config.data.train = Some(t.clone());
    }
    if let Some(d) = &args.dev {
        config.data.dev = Some(d.clone());
    }
    if let Some(s) = args.seed {
        config.train.seed = s;
    }
    config.train.validate()?;
    let dir = args
        .out
        .clone()
        .ok_or_else(|| Error::Usage("--out is required for training".into()))?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let data = load_datasets(&config.data, config.train.seed)?;
    if data.train.is_empty() {
        return Err(Error::Input("training corpus has no sentences".into()));
    }
    let max_len = data.train.iter().chain(&data.dev).map(Example::len).max().unwrap_or(1);
    let mut model = config.model_config(data.vocab.tokens.len(), data.vocab.labels.len())?;
    model.max_len = model.max_len.max(max_len);
    data.vocab.save(&dir.join("vocab.json"))?;
    let toml_path = dir.join("config.toml");
    fs::write(&toml_path, config.to_toml()?).map_err(|e| Error::io(&toml_path, e))?;
    if config.data.train.is_none() {
        write_conll(dir.join("dev.conll"), &data.dev_sequences, &data.vocab.labels)?;
    }

    let log_path = dir.join("metrics.jsonl");
    let log_file = fs::OpenOptions::new()
        .create(true)
        .append(args.resume.is_some())
        .write(true)
        .truncate(args.resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let dev = (!data.dev.is_empty()).then_some(data.dev.as_slice());
    let mut trainer = Trainer::new(config.train.clone())?
        .with_log(BufWriter::new(log_file))
        .with_checkpoints(&dir);
    if let Some(d) = dev {
        trainer = trainer.with_dev(d);
    }

    let (mut weights, level) = match &args.resume {
        Some(from) => {
            let w = checkpoint::load(from.join("stage1.ckpt"))?;
            let summary_path = from.join("stage1.json");
            let text = fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
            let s: Stage1Summary = serde_json::from_str(&text)?;
            (w, s.final_loss)
        }
        None => {
            let mut init_rng = ChaCha8Rng::seed_from_u64(config.train.seed);
            let mut w = EncoderWeights::init(&model, &mut init_rng)?;
            let report = trainer.run_stage1(&mut w, &data.train)?;
            let summary = Stage1Summary {
                final_loss: report.final_loss,
            };
            let p = dir.join("stage1.json");
            fs::write(&p, serde_json::to_string(&summary)?).map_err(|e| Error::io(&p, e))?;
            report_line(out, "stage 1", &report)?;
            (w, report.final_loss)
        }
    };
    let level = config.train.flood_level.unwrap_or(level);
    let stage1 = weights.clone();
    if config.train.stage2 != Stage2Mode::None {
        let r = trainer.run_stage2(&mut weights, &data.train, config.train.stage2, level)?;
        report_line(out, "stage 2", &r)?;
    }
    if args.controls && config.train.stage2 != Stage2Mode::Random {
        let mut control = stage1;
        let r = trainer.run_stage2(&mut control, &data.train, Stage2Mode::Random, level)?;
        report_line(out, "random-sampling control", &r)?;
    }
    write_out(out, &format!("wrote {}\n", dir.display()))
}

fn report_line(out: &mut dyn Write, what: &str, r: &StageReport) -> Result<()> {
    let acc = r
        .epochs
        .last()
        .and_then(|e| e.dev_accuracy.as_ref())
        .and_then(|a| a.last())
        .map(|a| format!(", dev accuracy (last ramp) {a:.4}"))
        .unwrap_or_default();
    write_out(out, &format!("{what}: final loss {:.5}{acc}\n", r.final_loss))
}

struct Loaded {
    weights: EncoderWeights,
    vocab: Vocabularies,
    examples: Vec<Example>,
}

fn load_model_input(input: &ModelInput) -> Result<Loaded> {
    let weights = checkpoint::load(&input.checkpoint)?;
    let vocab_path = match &input.vocab {
        Some(v) => v.clone(),
        None => input
            .checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("vocab.json"),
    };
    let vocab = Vocabularies::load(&vocab_path)?;
    if vocab.labels.len() != weights.config().num_labels {
        return Err(Error::Config(format!(
            "vocabulary has {} labels, checkpoint expects {}",
            vocab.labels.len(),
            weights.config().num_labels
        )));
    }
    let corpus = read_conll(&input.corpus, ConllColumns::default(), Some(&vocab.labels))?;
    if corpus.sequences.is_empty() {
        return Err(Error::Input(format!("{} has no sentences", input.corpus.display())));
    }
    let examples = encode_corpus(&corpus.sequences, &vocab.tokens);
    Ok(Loaded {
        weights,
        vocab,
        examples,
    })
}

/// One row of a threshold sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub policy: String,
    /// Window radius, empty for sentence-level rows.
    pub k: String,
    pub delta: f64,
    pub speedup: f64,
    pub metric: f64,
    /// Metric minus the full model's metric.
    pub delta_metric: f64,
    pub seed: u64,
}

/// A policy calibrated to a target speedup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPoint {
    pub target: f64,
    pub converged: bool,
    #[serde(flatten)]
    pub row: SweepRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub schema_version: u32,
    pub checkpoint: String,
    pub corpus: String,
    pub seed: u64,
    pub metric: Metric,
    /// Metric of the full model, the `δ = 0` anchor.
    pub full_metric: f64,
    pub rows: Vec<SweepRow>,
    pub matched: Vec<MatchedPoint>,
}

fn policy_templates(policies: &[String], ks: &[WindowSize]) -> Result<Vec<ExitPolicy>> {
    let mut out = Vec::new();
    for p in policies {
        match p.trim() {
            "tokee" => out.extend(ks.iter().map(|&k| ExitPolicy::tokee(k, 0.0))),
            "sentee" => out.push(ExitPolicy::sentee(0.0)),
            other => {
                return Err(Error::Usage(format!(
                    "unknown policy {other:?}; use tokee or sentee"
                )))
            }
        }
    }
    Ok(out)
}

fn row_for(e: &PolicyEval, metric: Metric, full: f64, seed: u64) -> Result<SweepRow> {
    let m = e.metric(metric)?;
    let k = match &e.policy {
        ExitPolicy::Tokee { k, .. } => k.to_string(),
        ExitPolicy::Sentee { .. } => String::new(),
    };
    Ok(SweepRow {
        policy: e.policy.name().to_string(),
        k,
        delta: e.policy.threshold(),
        speedup: e.speedup,
        metric: m,
        delta_metric: m - full,
        seed,
    })
}

/// Evaluates every `(policy, k, δ)` of the grid plus calibrated slices.
pub fn sweep(
    weights: &EncoderWeights,
    examples: &[Example],
    labels: &LabelVocab,
    args: &SweepArgs,
) -> Result<SweepResult> {
    let templates = policy_templates(&args.policies, &args.k)?;
    let full = evaluate_policy(weights, examples, &ExitPolicy::sentee(0.0), Some(labels), false)?
        .metric(args.metric)?;
    let mut rows = Vec::new();
    for t in &templates {
        for &delta in &args.deltas {
            let policy = t.clone().with_threshold(delta);
            policy.validate()?;
            let e = evaluate_policy(weights, examples, &policy, Some(labels), false)?;
            rows.push(row_for(&e, args.metric, full, args.seed)?);
        }
    }
    let mut matched = Vec::new();
    for &target in &args.matched {
        for t in &templates {
            let (cal, e) = calibrate_policy(weights, examples, t, target, args.tolerance, Some(labels))?;
            matched.push(MatchedPoint {
                target,
                converged: cal.converged,
                row: row_for(&e, args.metric, full, args.seed)?,
            });
        }
    }
    Ok(SweepResult {
        schema_version: SCHEMA_VERSION,
        checkpoint: args.input.checkpoint.display().to_string(),
        corpus: args.input.corpus.display().to_string(),
        seed: args.seed,
        metric: args.metric,
        full_metric: full,
        rows,
        matched,
    })
}

/// CSV rendering: a schema comment line, a header, one line per grid row.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Input(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    let body = String::from_utf8(body).map_err(|e| Error::Input(e.to_string()))?;
    let header = "policy,k,delta,speedup,metric,delta_metric,seed\n";
    let body = if rows.is_empty() { header.to_string() } else { body };
    Ok(format!("# schema: sweep/v{SCHEMA_VERSION}\n{body}"))
}

pub fn cmd_sweep(args: &SweepArgs, out: &mut dyn Write) -> Result<()> {
    let loaded = load_model_input(&args.input)?;
    let result = sweep(&loaded.weights, &loaded.examples, &loaded.vocab.labels, args)?;
    let csv = sweep_csv(&result.rows)?;
    if let Some(p) = &args.csv {
        fs::write(p, &csv).map_err(|e| Error::io(p, e))?;
    }
    let json = serde_json::to_string_pretty(&result)?;
    if let Some(p) = &args.json {
        fs::write(p, &json).map_err(|e| Error::io(p, e))?;
    }
    if args.csv.is_none() && args.json.is_none() {
        write_out(out, &csv)?;
    }
    write_out(out, &format!("full model {:?}: {:.4}\n", result.metric, result.full_metric))?;
    for m in &result.matched {
        write_out(
            out,
            &format!(
                "{:>5.2}x {:>6} k={:<3} delta={:.4} speedup={:.3} metric={:.4} ({:+.4})\n",
                m.target, m.row.policy, m.row.k, m.row.delta, m.row.speedup, m.row.metric, m.row.delta_metric
            ),
        )?;
    }
    Ok(())
}

/// Cost report of one geometry.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub config: ModelConfig,
    pub tokens: usize,
    pub active: usize,
    pub layer: LayerCost,
    pub ramp: u64,
    pub full_backbone: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exit_layer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exit_speedup: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exit_speedup_with_overhead: Option<f64>,
}

pub fn flops_report(args: &FlopsArgs) -> Result<FlopsReport> {
    let base = if args.bert_base {
        ModelConfig::bert_base(50, args.tokens.max(1))
    } else {
        ModelConfig {
            max_len: args.tokens.max(1),
            ..ModelConfig::toy(100, 9)
        }
    };
    let config = ModelConfig {
        num_layers: args.layers.unwrap_or(base.num_layers),
        hidden_dim: args.hidden.unwrap_or(base.hidden_dim),
        num_heads: args.heads.unwrap_or(base.num_heads),
        ffn_dim: args.ffn.unwrap_or(base.ffn_dim),
        num_labels: args.labels.unwrap_or(base.num_labels),
        ..base
    };
    config.validate()?;
    let n = args.tokens;
    let m = args.active.unwrap_or(n);
    let mut layer = layer_flops(n, m, &config)?;
    let (ramp, unc) = ramp_flops(m, &config);
    layer.off_ramp = ramp;
    layer.uncertainty = unc;
    let full_backbone = layer_flops(n, n, &config)?.backbone() * config.num_layers as u64;
    let (exit_speedup, exit_speedup_with_overhead) = match args.exit_layer {
        Some(e) => {
            let l = sentence_exit_ledger(n, e, &config)?;
            (Some(l.speedup()), Some(l.speedup_with_overhead()))
        }
        None => (None, None),
    };
    Ok(FlopsReport {
        config,
        tokens: n,
        active: m,
        layer,
        ramp,
        full_backbone,
        exit_layer: args.exit_layer,
        exit_speedup,
        exit_speedup_with_overhead,
    })
}

fn millions(x: u64) -> String {
    format!("{:.1}M", x as f64 / 1e6)
}

pub fn cmd_flops(args: &FlopsArgs, out: &mut dyn Write) -> Result<()> {
    let r = flops_report(args)?;
    if args.json {
        return write_out(out, &(serde_json::to_string_pretty(&r)? + "\n"));
    }
    let c = &r.config;
    let l = &r.layer;
    let mut s = format!(
        "geometry: L={} d={} heads={} ffn={} C={} N={} M={}\n",
        c.num_layers, c.hidden_dim, c.num_heads, c.ffn_dim, c.num_labels, r.tokens, r.active
    );
    for (name, v) in [
        ("q_proj", l.q_proj),
        ("kv_proj", l.kv_proj),
        ("o_proj", l.o_proj),
        ("attn_scores", l.attn_scores),
        ("attn_apply", l.attn_apply),
        ("self-attention", l.self_attention()),
        ("feed-forward", l.ffn),
        ("layer total", l.backbone()),
        ("off-ramp", l.off_ramp),
        ("uncertainty", l.uncertainty),
    ] {
        s.push_str(&format!("{name:<16}{v:>16} MACs  {:>10}\n", millions(v)));
    }
    s.push_str(&format!(
        "{:<16}{:>16} MACs  {:>10}\n",
        "full backbone",
        r.full_backbone,
        millions(r.full_backbone)
    ));
    if args.bert_base {
        let share = 100.0 * r.ramp as f64 / l.backbone() as f64;
        s.push_str(&format!(
            "reference: feed-forward 1207.9M, self-attention 703.6M, linear 9.8M, layer 1911.5M\n\
             measured:  feed-forward {}, self-attention {}, linear {}, layer {}; off-ramp is {share:.2}% of a layer\n",
            millions(l.ffn),
            millions(l.self_attention()),
            millions(r.ramp),
            millions(l.backbone())
        ));
    }
    if let (Some(e), Some(sp), Some(so)) = (r.exit_layer, r.exit_speedup, r.exit_speedup_with_overhead) {
        s.push_str(&format!(
            "sentence exit at layer {e}: speedup {sp:.4} (with ramp overhead {so:.4})\n"
        ));
    }
    write_out(out, &s)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramSide {
    pub policy: ExitPolicy,
    pub speedup: f64,
    pub metric: f64,
    pub mean_exit_layer: f64,
    pub histogram: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramReport {
    pub schema_version: u32,
    #[serde(flatten)]
    pub main: HistogramSide,
    /// Sentence-level exit calibrated to the same speedup, when the main
    /// policy is token-level.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sentence_match: Option<HistogramSide>,
}

fn side(e: &PolicyEval) -> HistogramSide {
    HistogramSide {
        policy: e.policy.clone(),
        speedup: e.speedup,
        metric: e.accuracy,
        mean_exit_layer: e.mean_exit_layer,
        histogram: e.exit_histogram.clone(),
    }
}

pub fn exit_histogram(
    weights: &EncoderWeights,
    examples: &[Example],
    policy: &ExitPolicy,
    groups: bool,
) -> Result<HistogramReport> {
    policy.validate()?;
    let main = evaluate_policy(weights, examples, policy, None, groups)?;
    let sentence_match = match policy {
        ExitPolicy::Tokee { .. } => {
            let (_, e) = calibrate_policy(
                weights,
                examples,
                &ExitPolicy::sentee(0.0),
                main.speedup,
                0.05,
                None,
            )?;
            Some(side(&e))
        }
        ExitPolicy::Sentee { .. } => None,
    };
    Ok(HistogramReport {
        schema_version: SCHEMA_VERSION,
        main: side(&main),
        sentence_match,
    })
}

pub fn cmd_exit_histogram(args: &HistogramArgs, out: &mut dyn Write) -> Result<()> {
    let loaded = load_model_input(&args.input)?;
    let policy = match args.policy.as_str() {
        "tokee" => ExitPolicy::tokee(args.k, args.delta),
        "sentee" => ExitPolicy::sentee(args.delta),
        other => return Err(Error::Usage(format!("unknown policy {other:?}"))),
    };
    let report = exit_histogram(&loaded.weights, &loaded.examples, &policy, args.groups)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    match &args.out {
        Some(p) => fs::write(p, &json).map_err(|e| Error::io(p, e)),
        None => write_out(out, &json),
    }
}
