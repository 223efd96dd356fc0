//! Parses CoNLL text, scores a prediction with span F1 and token accuracy,
//! and writes the corpus back in canonical form.

use seqexit::data::{decode_spans, parse_conll, render_conll, span_f1, token_accuracy, ConllColumns};

const GOLD: &str = "\
-DOCSTART- -X- O

# sentence 1
EU NNP B-ORG
rejects VBZ O
German JJ B-MISC
call NN O

Peter NNP B-PER
Blackburn NNP I-PER
";

fn main() -> seqexit::Result<()> {
    let gold = parse_conll(GOLD, ConllColumns::default(), None, "inline")?;
    let vocab = &gold.labels;
    println!("labels: {:?}", vocab.names());

    let gold_ids: Vec<Vec<usize>> = gold.sequences.iter().map(|s| s.labels.clone()).collect();
    // the prediction misses MISC and cuts the person name short
    let pred_ids = vec![
        vocab.encode(&["B-ORG", "O", "O", "O"])?,
        vocab.encode(&["B-PER", "O"])?,
    ];
    for (seq, ids) in gold.sequences.iter().zip(&gold_ids) {
        let spans = decode_spans(ids, vocab)?;
        let shown: Vec<String> = spans
            .iter()
            .map(|s| format!("{}[{}]", vocab.types()[s.kind], seq.tokens[s.start..s.end].join(" ")))
            .collect();
        println!("gold spans: {}", shown.join(", "));
    }
    let scores = span_f1(&pred_ids, &gold_ids, vocab)?;
    println!(
        "span P {:.3} R {:.3} F1 {:.3} ({} of {} predicted, {} gold)",
        scores.precision, scores.recall, scores.f1, scores.true_positives, scores.predicted, scores.gold
    );
    println!("token accuracy {:.3}", token_accuracy(&pred_ids, &gold_ids)?);
    print!("\ncanonical form:\n{}", render_conll(&gold.sequences, vocab)?);
    Ok(())
}
