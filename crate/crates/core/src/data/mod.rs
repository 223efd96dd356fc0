//! Corpora, vocabularies and evaluation metrics.

mod conll;
mod labels;
mod metrics;
pub mod synth;

pub use conll::{parse_conll, read_conll, render_conll, write_conll, ConllColumns};
pub use labels::{LabelVocab, Schema, Tag, TokenVocab, UNKNOWN_TOKEN};
pub use metrics::{decode_spans, span_f1, token_accuracy, Span, SpanScores};

use crate::error::{Error, Result};
use crate::halt_copy::WordGroups;

/// Marker prefix of a wordpiece that continues the previous word.
pub const CONTINUATION_PREFIX: &str = "##";

/// Surface tokens with label ids under some [`LabelVocab`].
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    pub tokens: Vec<String>,
    pub labels: Vec<usize>,
    /// Wordpiece grouping, present when any token carries the
    /// continuation prefix.
    pub groups: Option<WordGroups>,
}

impl LabeledSequence {
    pub fn new(tokens: Vec<String>, labels: Vec<usize>) -> Result<Self> {
        if tokens.len() != labels.len() {
            return Err(Error::Input(format!(
                "{} tokens but {} labels",
                tokens.len(),
                labels.len()
            )));
        }
        let cont: Vec<bool> = tokens
            .iter()
            .map(|t| t.starts_with(CONTINUATION_PREFIX))
            .collect();
        let groups = cont
            .iter()
            .any(|&c| c)
            .then(|| WordGroups::from_continuations(&cont));
        Ok(LabeledSequence {
            tokens,
            labels,
            groups,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A corpus together with the label vocabulary its ids refer to.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub sequences: Vec<LabeledSequence>,
    pub labels: LabelVocab,
}

/// Model-ready sequence: token ids, gold label ids and optional word groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub groups: Option<WordGroups>,
}

impl Example {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Encodes every sequence of `corpus` with `vocab`.
pub fn encode_corpus(corpus: &[LabeledSequence], vocab: &TokenVocab) -> Vec<Example> {
    corpus
        .iter()
        .map(|s| Example {
            ids: vocab.encode(&s.tokens),
            labels: s.labels.clone(),
            groups: s.groups.clone(),
        })
        .collect()
}
