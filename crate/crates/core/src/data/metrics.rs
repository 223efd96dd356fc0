use std::collections::HashSet;

use serde::Serialize;

use super::{LabelVocab, Tag};
use crate::error::{Error, Result};

/// A labelled chunk `[start, end)` of entity type `kind`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpanScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

/// Decodes BIO label ids into spans. A stray `I-t` that does not continue
/// a `t` chunk opens a new chunk, as if it were `B-t`. Under a plain schema
/// every label other than `O` is a one-token span of its own label.
pub fn decode_spans(labels: &[usize], vocab: &LabelVocab) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (i, &id) in labels.iter().enumerate() {
        let tag = vocab
            .tag(id)
            .ok_or_else(|| Error::Input(format!("label id {id} outside vocabulary")))?;
        match tag {
            Tag::Inside(t) if open.is_some_and(|s| s.kind == t) => {
                if let Some(s) = open.as_mut() {
                    s.end = i + 1;
                }
            }
            Tag::Begin(t) | Tag::Inside(t) => {
                spans.extend(open.take());
                open = Some(Span {
                    start: i,
                    end: i + 1,
                    kind: t,
                });
            }
            Tag::Outside => spans.extend(open.take()),
            Tag::Other(l) => {
                spans.extend(open.take());
                if vocab.name(l) != Some("O") {
                    spans.push(Span {
                        start: i,
                        end: i + 1,
                        kind: l,
                    });
                }
            }
        }
    }
    spans.extend(open);
    Ok(spans)
}

fn check_aligned(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::Input(format!(
            "{} predicted sequences for {} gold sequences",
            pred.len(),
            gold.len()
        )));
    }
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Input(format!(
                "sequence {i}: {} predicted labels for {} gold labels",
                p.len(),
                g.len()
            )));
        }
    }
    Ok(())
}

/// Exact-match span precision, recall and F1, micro-averaged over the corpus.
pub fn span_f1(pred: &[Vec<usize>], gold: &[Vec<usize>], vocab: &LabelVocab) -> Result<SpanScores> {
    check_aligned(pred, gold)?;
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let ps: HashSet<Span> = decode_spans(p, vocab)?.into_iter().collect();
        let gs: HashSet<Span> = decode_spans(g, vocab)?.into_iter().collect();
        tp += ps.intersection(&gs).count();
        np += ps.len();
        ng += gs.len();
    }
    Ok(scores(tp, np, ng))
}

pub(crate) fn scores(tp: usize, predicted: usize, gold: usize) -> SpanScores {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, predicted);
    let recall = ratio(tp, gold);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    SpanScores {
        precision,
        recall,
        f1,
        true_positives: tp,
        predicted,
        gold,
    }
}

/// Fraction of tokens whose predicted label equals the gold label.
pub fn token_accuracy(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<f64> {
    check_aligned(pred, gold)?;
    let total: usize = gold.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Input("token accuracy of an empty corpus".into()));
    }
    let hits: usize = pred
        .iter()
        .zip(gold)
        .map(|(p, g)| p.iter().zip(g).filter(|(a, b)| a == b).count())
        .sum();
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> LabelVocab {
        LabelVocab::bio(&["PER", "LOC"]).unwrap()
    }

    fn ids(v: &LabelVocab, names: &[&str]) -> Vec<usize> {
        v.encode(names).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let v = vocab();
        let g = vec![ids(&v, &["O", "B-PER", "I-PER", "O"])];
        let s = span_f1(&g, &g, &v).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn no_predicted_spans() {
        let v = vocab();
        let g = vec![ids(&v, &["B-PER", "O"])];
        let p = vec![ids(&v, &["O", "O"])];
        let s = span_f1(&p, &g, &v).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn half_recall() {
        let v = vocab();
        let g = vec![ids(&v, &["O", "B-PER", "I-PER", "O", "B-LOC", "I-LOC"])];
        let p = vec![ids(&v, &["O", "B-PER", "I-PER", "O", "O", "O"])];
        let s = span_f1(&p, &g, &v).unwrap();
        assert_eq!(s.precision, 1.0);
        assert_eq!(s.recall, 0.5);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn stray_inside_opens_a_span() {
        let v = vocab();
        let spans = decode_spans(&ids(&v, &["I-PER", "I-PER", "I-LOC", "O", "I-LOC"]), &v).unwrap();
        assert_eq!(
            spans,
            vec![
                Span { start: 0, end: 2, kind: 0 },
                Span { start: 2, end: 3, kind: 1 },
                Span { start: 4, end: 5, kind: 1 },
            ]
        );
    }

    #[test]
    fn misaligned_is_input_error() {
        let v = vocab();
        assert!(span_f1(&[vec![0]], &[vec![0, 0]], &v).is_err());
        assert!(token_accuracy(&[vec![0]], &[]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(token_accuracy(&[vec![1, 2]], &[vec![1, 2]]).unwrap(), 1.0);
        assert_eq!(token_accuracy(&[vec![1, 2]], &[vec![0, 0]]).unwrap(), 0.0);
        assert_eq!(token_accuracy(&[vec![1, 2, 3, 4]], &[vec![1, 2, 3, 0]]).unwrap(), 0.75);
    }

    #[test]
    fn plain_schema_spans() {
        let v = LabelVocab::new(["NOUN", "VERB"]).unwrap();
        assert_eq!(decode_spans(&[0, 1, 1], &v).unwrap().len(), 3);
    }

    proptest! {
        #[test]
        fn relabeling_types_preserves_scores(
            pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..20)
        ) {
            let v = vocab();
            let swap = |id: usize| match id { 0 => 0, 1 => 3, 2 => 4, 3 => 1, _ => 2 };
            let p: Vec<usize> = pairs.iter().map(|x| x.0).collect();
            let g: Vec<usize> = pairs.iter().map(|x| x.1).collect();
            let a = span_f1(&[p.clone()], &[g.clone()], &v).unwrap();
            let ps: Vec<usize> = p.iter().map(|&i| swap(i)).collect();
            let gs: Vec<usize> = g.iter().map(|&i| swap(i)).collect();
            let b = span_f1(&[ps], &[gs], &v).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
