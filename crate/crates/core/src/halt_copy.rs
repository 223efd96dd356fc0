//! Early-exit inference engines.
//!
//! [`forward_token_ee`] runs the encoder layer by layer over a shrinking
//! set of active tokens. A token that exits keeps its hidden state, which
//! is copied unchanged to every upper layer: it no longer issues queries
//! but its keys and values are still attended to. [`forward_sentence_ee`]
//! stops the whole sequence at once.

use std::ops::Range;

use crate::encoder::{self, row_uncertainties, EncoderTrace, EncoderWeights};
use crate::error::{Error, Result};
use crate::exit_policy::{decide_exits, ExitPolicy};
use crate::flops::FlopsLedger;
use crate::math::{Matrix, Tape};

/// Contiguous wordpiece ranges of each word. The first piece of a word
/// represents it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordGroups {
    ranges: Vec<Range<usize>>,
}

impl WordGroups {
    /// Validates that `ranges` partition `0..len` in order.
    pub fn new(ranges: Vec<Range<usize>>, len: usize) -> Result<Self> {
        let mut next = 0;
        for r in &ranges {
            if r.start != next || r.end <= r.start {
                return Err(Error::Input(format!(
                    "word ranges must tile the sequence; got {r:?} at position {next}"
                )));
            }
            next = r.end;
        }
        if next != len {
            return Err(Error::Input(format!(
                "word ranges cover {next} of {len} tokens"
            )));
        }
        Ok(WordGroups { ranges })
    }

    /// Groups from continuation flags: a piece with `true` joins the
    /// previous word. A leading continuation starts a word of its own.
    pub fn from_continuations(continuation: &[bool]) -> Self {
        let mut ranges: Vec<Range<usize>> = Vec::new();
        for (i, &cont) in continuation.iter().enumerate() {
            match ranges.last_mut() {
                Some(last) if cont => last.end = i + 1,
                _ => ranges.push(i..i + 1),
            }
        }
        WordGroups { ranges }
    }

    /// One word per token.
    pub fn singletons(len: usize) -> Self {
        WordGroups {
            ranges: (0..len).map(|i| i..i + 1).collect(),
        }
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn num_words(&self) -> usize {
        self.ranges.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }

    pub fn first_pieces(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.start).collect()
    }

    /// Picks the value of each word's first piece.
    pub fn first_pooled<T: Copy>(&self, per_token: &[T]) -> Vec<T> {
        self.ranges.iter().map(|r| per_token[r.start]).collect()
    }
}

/// Tokens that have not exited yet, plus the exit layer of the rest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActiveSet {
    active: Vec<usize>,
    exit_layer: Vec<Option<usize>>,
}

impl ActiveSet {
    pub fn all(len: usize) -> Self {
        ActiveSet {
            active: (0..len).collect(),
            exit_layer: vec![None; len],
        }
    }

    /// Builds a set from a mask; masked-out tokens are recorded as exited
    /// at `exited_at`.
    pub fn from_mask(mask: &[bool], exited_at: usize) -> Self {
        ActiveSet {
            active: (0..mask.len()).filter(|&i| mask[i]).collect(),
            exit_layer: mask
                .iter()
                .map(|&a| (!a).then_some(exited_at))
                .collect(),
        }
    }

    /// Active token indices in sequence order.
    pub fn indices(&self) -> &[usize] {
        &self.active
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.exit_layer.len()
    }

    pub fn is_active(&self, token: usize) -> bool {
        self.exit_layer[token].is_none()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.exit_layer.iter().map(Option::is_none).collect()
    }

    /// Marks every active token with `exits[t]` as exited at `layer`.
    pub fn retire(&mut self, exits: &[bool], layer: usize) {
        for (t, slot) in self.exit_layer.iter_mut().enumerate() {
            if slot.is_none() && exits[t] {
                *slot = Some(layer);
            }
        }
        let exit_layer = &self.exit_layer;
        self.active.retain(|&t| exit_layer[t].is_none());
    }

    pub fn exit_layer(&self, token: usize) -> Option<usize> {
        self.exit_layer[token]
    }
}

/// Result of an early-exit forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyExitOutput {
    /// Predicted label of every token, from the off-ramp at its exit layer.
    pub labels: Vec<usize>,
    pub trace: EncoderTrace,
    pub ledger: FlopsLedger,
}

/// Updates the active rows of `hidden` through layer `layer` (1-based).
/// Exited rows are returned unchanged but still serve as keys and values.
pub fn active_attention(
    weights: &EncoderWeights,
    layer: usize,
    hidden: &Matrix,
    active: &ActiveSet,
) -> Result<Matrix> {
    let cfg = weights.config();
    if layer == 0 || layer > cfg.num_layers {
        return Err(Error::Usage(format!("layer {layer} outside 1..={}", cfg.num_layers)));
    }
    if hidden.rows() != active.num_tokens() {
        return Err(Error::shape(
            "active_attention",
            format!("{} rows for {} tokens", hidden.rows(), active.num_tokens()),
        ));
    }
    if active.is_empty() {
        return Ok(hidden.clone());
    }
    let mut tape = Tape::new();
    let h = tape.constant(hidden.clone());
    let out = encoder::layer_step(&mut tape, weights, layer - 1, h, active.indices())?;
    Ok(tape.value(out).clone())
}

struct TraceBuilder {
    trace: EncoderTrace,
}

impl TraceBuilder {
    fn new(embeddings: Matrix, layers: usize) -> Self {
        let n = embeddings.rows();
        TraceBuilder {
            trace: EncoderTrace {
                embeddings,
                hidden: Vec::with_capacity(layers),
                probs: Vec::with_capacity(layers),
                uncertainty: Vec::with_capacity(layers),
                active: Vec::with_capacity(layers),
                exit_layer: vec![0; n],
            },
        }
    }

    fn push(&mut self, hidden: Matrix, probs: Matrix, u: Vec<f64>, active: Vec<bool>) {
        let t = &mut self.trace;
        t.hidden.push(hidden);
        t.probs.push(probs);
        t.uncertainty.push(u);
        t.active.push(active);
    }

    /// Repeats the last layer for layers that were never computed.
    fn pad_to(&mut self, layers: usize) {
        while self.trace.hidden.len() < layers {
            let t = &mut self.trace;
            let n = t.exit_layer.len();
            let hidden = t.hidden.last().cloned().unwrap_or_else(|| t.embeddings.clone());
            let probs = t.probs.last().cloned().expect("at least one layer computed");
            let u = t.uncertainty.last().cloned().expect("at least one layer computed");
            self.push(hidden, probs, u, vec![false; n]);
        }
    }

    fn finish(self) -> EncoderTrace {
        self.trace
    }
}

/// Token-level early exit with halt-and-copy.
///
/// With `groups`, exit decisions are taken per word from the window
/// uncertainty over first-piece uncertainties (window radius in words),
/// and all pieces of a word exit together.
pub fn forward_token_ee(
    weights: &EncoderWeights,
    token_ids: &[usize],
    policy: &ExitPolicy,
    groups: Option<&WordGroups>,
) -> Result<EarlyExitOutput> {
    if !matches!(policy, ExitPolicy::Tokee { .. }) {
        return Err(Error::Usage(
            "forward_token_ee needs a token-level policy; use forward_sentence_ee".into(),
        ));
    }
    policy.validate()?;
    let cfg = weights.config();
    let n = token_ids.len();
    if let Some(g) = groups {
        if g.num_tokens() != n {
            return Err(Error::Input(format!(
                "word groups cover {} tokens, sequence has {n}",
                g.num_tokens()
            )));
        }
    }
    let num_layers = cfg.num_layers;
    let mut tape = Tape::new();
    let mut h = encoder::embed(&mut tape, weights, token_ids)?;
    let mut trace = TraceBuilder::new(tape.value(h).clone(), num_layers);
    let mut ledger = FlopsLedger::new(n, cfg)?;

    let mut active = ActiveSet::all(n);
    let mut u = vec![1.0; n];
    let mut probs = Matrix::filled(n, cfg.num_labels, 1.0 / cfg.num_labels as f64);

    for l in 0..num_layers {
        if active.is_empty() {
            break;
        }
        let rows = active.indices().to_vec();
        let mask = active.mask();
        h = encoder::layer_step(&mut tape, weights, l, h, &rows)?;
        let logits = encoder::ramp_logits(&mut tape, weights, l, h, &rows)?;
        let p_active = tape.value(logits).softmax_rows();
        let u_active = row_uncertainties(&p_active)?;
        for (i, &t) in rows.iter().enumerate() {
            u[t] = u_active[i];
            probs.row_mut(t).copy_from_slice(p_active.row(i));
        }
        ledger.record(n, rows.len(), rows.len(), cfg)?;

        let exits = match groups {
            None => decide_exits(&u, policy, &mask, l + 1, num_layers).exits,
            Some(g) => {
                let word_u = g.first_pooled(&u);
                let word_active = g.first_pooled(&mask);
                let d = decide_exits(&word_u, policy, &word_active, l + 1, num_layers);
                let mut exits = vec![false; n];
                for (r, &e) in g.ranges().iter().zip(&d.exits) {
                    exits[r.clone()].fill(e);
                }
                exits
            }
        };
        active.retire(&exits, l + 1);
        trace.push(tape.value(h).clone(), probs.clone(), u.clone(), mask);
    }
    trace.pad_to(num_layers);
    let mut trace = trace.finish();
    trace.exit_layer = (0..n)
        .map(|t| active.exit_layer(t).expect("every token exits by the last layer"))
        .collect();
    Ok(EarlyExitOutput {
        labels: trace.labels(),
        trace,
        ledger,
    })
}

/// Sentence-level early exit: every token leaves at the first layer whose
/// pooled uncertainty is below the threshold.
pub fn forward_sentence_ee(
    weights: &EncoderWeights,
    token_ids: &[usize],
    policy: &ExitPolicy,
) -> Result<EarlyExitOutput> {
    if !matches!(policy, ExitPolicy::Sentee { .. }) {
        return Err(Error::Usage(
            "forward_sentence_ee needs a sentence-level policy; use forward_token_ee".into(),
        ));
    }
    policy.validate()?;
    let cfg = weights.config();
    let n = token_ids.len();
    let num_layers = cfg.num_layers;
    let all: Vec<usize> = (0..n).collect();
    let mut tape = Tape::new();
    let mut h = encoder::embed(&mut tape, weights, token_ids)?;
    let mut trace = TraceBuilder::new(tape.value(h).clone(), num_layers);
    let mut ledger = FlopsLedger::new(n, cfg)?;
    let mut exit_at = num_layers;

    for l in 0..num_layers {
        h = encoder::layer_step(&mut tape, weights, l, h, &all)?;
        let logits = encoder::ramp_logits(&mut tape, weights, l, h, &all)?;
        let p = tape.value(logits).softmax_rows();
        let u = row_uncertainties(&p)?;
        ledger.record(n, n, n, cfg)?;
        let decision = decide_exits(&u, policy, &vec![true; n], l + 1, num_layers);
        trace.push(tape.value(h).clone(), p, u, vec![true; n]);
        if decision.all() {
            exit_at = l + 1;
            break;
        }
    }
    trace.pad_to(num_layers);
    let mut trace = trace.finish();
    trace.exit_layer = vec![exit_at; n];
    Ok(EarlyExitOutput {
        labels: trace.labels(),
        trace,
        ledger,
    })
}

/// Dispatches on the policy variant. Word groups only affect token-level exit.
pub fn forward_early_exit(
    weights: &EncoderWeights,
    token_ids: &[usize],
    policy: &ExitPolicy,
    groups: Option<&WordGroups>,
) -> Result<EarlyExitOutput> {
    match policy {
        ExitPolicy::Sentee { .. } => forward_sentence_ee(weights, token_ids, policy),
        ExitPolicy::Tokee { .. } => forward_token_ee(weights, token_ids, policy, groups),
    }
}
