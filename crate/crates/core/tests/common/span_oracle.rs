// Brute-force span enumeration used as an oracle for the metrics module.
// Every (start, end, type) interval is tested against the span definition
// directly, without any left-to-right state machine.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use seqexit::data::{LabelVocab, Tag};

fn is_type(tag: Tag, kind: usize) -> bool {
    matches!(tag, Tag::Begin(t) | Tag::Inside(t) if t == kind)
}

pub fn enumerate_spans(labels: &[usize], vocab: &LabelVocab) -> BTreeSet<(usize, usize, usize)> {
    let tags: Vec<Tag> = labels.iter().map(|&l| vocab.tag(l).unwrap()).collect();
    let n = tags.len();
    let mut spans = BTreeSet::new();
    for kind in 0..vocab.types().len() {
        for start in 0..n {
            let opens = match tags[start] {
                Tag::Begin(t) => t == kind,
                Tag::Inside(t) => t == kind && (start == 0 || !is_type(tags[start - 1], kind)),
                _ => false,
            };
            if !opens {
                continue;
            }
            for end in start + 1..=n {
                let body = tags[start + 1..end].iter().all(|&t| t == Tag::Inside(kind));
                let closed = end == n || tags[end] != Tag::Inside(kind);
                if body && closed {
                    spans.insert((start, end, kind));
                }
            }
        }
    }
    spans
}

pub fn oracle_f1(pred: &[Vec<usize>], gold: &[Vec<usize>], vocab: &LabelVocab) -> (usize, usize, usize, f64) {
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (s, (p, g)) in pred.iter().zip(gold).enumerate() {
        let ps: BTreeSet<_> = enumerate_spans(p, vocab).into_iter().map(|x| (s, x)).collect();
        let gs: BTreeSet<_> = enumerate_spans(g, vocab).into_iter().map(|x| (s, x)).collect();
        tp += ps.intersection(&gs).count();
        np += ps.len();
        ng += gs.len();
    }
    let precision = if np == 0 { 0.0 } else { tp as f64 / np as f64 };
    let recall = if ng == 0 { 0.0 } else { tp as f64 / ng as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    (tp, np, ng, f1)
}

pub fn vocab_with_types(count: usize) -> LabelVocab {
    let types: Vec<String> = (0..count).map(|t| format!("T{t}")).collect();
    LabelVocab::bio(&types).unwrap()
}

/// Calls `visit` on every label sequence of exactly `len` over `classes` ids.
pub fn for_each_sequence(len: usize, classes: usize, mut visit: impl FnMut(&[usize])) {
    let mut seq = vec![0usize; len];
    loop {
        visit(&seq);
        let mut i = 0;
        loop {
            if i == len {
                return;
            }
            seq[i] += 1;
            if seq[i] < classes {
                break;
            }
            seq[i] = 0;
            i += 1;
        }
    }
}

pub fn random_labels(rng: &mut ChaCha8Rng, len: usize, classes: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(0..classes)).collect()
}

#[derive(Debug, Default)]
pub struct OracleReport {
    pub sequences: usize,
    pub pairs: usize,
    pub mismatches: usize,
}

/// Full comparison run: span sets exhaustively where enumerable, F1 on exhaustive
/// short pairs and on seeded random corpora up to length 12 with 4 types.
pub fn run_oracle_suite(seed: u64) -> OracleReport {
    use rand::SeedableRng;
    use seqexit::data::decode_spans;

    let mut report = OracleReport::default();
    // (types, max length) for exhaustive single-sequence decoding
    for &(types, max_len) in &[(1usize, 12usize), (2, 8), (4, 5)] {
        let vocab = vocab_with_types(types);
        for len in 0..=max_len {
            for_each_sequence(len, vocab.len(), |seq| {
                report.sequences += 1;
                let got: BTreeSet<_> =
                    decode_spans(seq, &vocab).unwrap().into_iter().map(|s| (s.start, s.end, s.kind)).collect();
                if got != enumerate_spans(seq, &vocab) {
                    report.mismatches += 1;
                }
            });
        }
    }
    // exhaustive prediction/gold pairs
    for &(types, max_len) in &[(1usize, 5usize), (2, 4), (4, 3)] {
        let vocab = vocab_with_types(types);
        for len in 1..=max_len {
            for_each_sequence(2 * len, vocab.len(), |both| {
                report.pairs += 1;
                let pred = vec![both[..len].to_vec()];
                let gold = vec![both[len..].to_vec()];
                if !f1_agrees(&pred, &gold, &vocab) {
                    report.mismatches += 1;
                }
            });
        }
    }
    // seeded corpora of random pairs, each corpus mixing lengths 1..=12
    let vocab = vocab_with_types(4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..20_000 {
        let count = rng.gen_range(1..=4);
        let mut pred = Vec::new();
        let mut gold = Vec::new();
        for _ in 0..count {
            let len = rng.gen_range(1..=12);
            gold.push(random_labels(&mut rng, len, vocab.len()));
            // mostly-correct predictions exercise partial overlaps
            let mut p = gold.last().unwrap().clone();
            for l in p.iter_mut() {
                if rng.gen_bool(0.3) {
                    *l = rng.gen_range(0..vocab.len());
                }
            }
            pred.push(p);
        }
        report.pairs += 1;
        if !f1_agrees(&pred, &gold, &vocab) {
            report.mismatches += 1;
        }
    }
    report
}

fn f1_agrees(pred: &[Vec<usize>], gold: &[Vec<usize>], vocab: &LabelVocab) -> bool {
    let got = seqexit::data::span_f1(pred, gold, vocab).unwrap();
    let (tp, np, ng, f1) = oracle_f1(pred, gold, vocab);
    got.true_positives == tp && got.predicted == np && got.gold == ng && (got.f1 - f1).abs() < 1e-12
}
