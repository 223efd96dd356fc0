use std::fs;
use std::path::Path;

use super::{Corpus, LabelVocab, LabeledSequence};
use crate::error::{Error, Result};

/// Which whitespace-separated columns hold the token and the label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConllColumns {
    pub token: usize,
    /// `None` selects the last column.
    pub label: Option<usize>,
}

impl Default for ConllColumns {
    fn default() -> Self {
        ConllColumns {
            token: 0,
            label: None,
        }
    }
}

const DOCSTART: &str = "-DOCSTART-";

struct Row<'a> {
    line: usize,
    token: &'a str,
    label: &'a str,
}

/// Parses CoNLL column text. Sentences are separated by blank lines; lines
/// starting with `#` between sentences are comments and `-DOCSTART-`
/// sentences are dropped. With `vocab`, labels must already be known;
/// otherwise the vocabulary is built from the file.
pub fn parse_conll(
    text: &str,
    columns: ConllColumns,
    vocab: Option<&LabelVocab>,
    path: &str,
) -> Result<Corpus> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_string(),
        line,
        msg,
    };
    let mut sentences: Vec<Vec<Row>> = Vec::new();
    let mut current: Vec<Row> = Vec::new();
    let mut width: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !current.is_empty() {
                sentences.push(std::mem::take(&mut current));
            }
            width = None;
            continue;
        }
        if current.is_empty() && line.trim_start().starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        match width {
            None => width = Some(cols.len()),
            Some(w) if w != cols.len() => {
                return Err(parse_err(
                    line_no,
                    format!("expected {w} columns, found {}", cols.len()),
                ))
            }
            Some(_) => {}
        }
        let label_col = columns.label.unwrap_or(cols.len() - 1);
        let need = columns.token.max(label_col) + 1;
        if cols.len() < need {
            return Err(parse_err(
                line_no,
                format!("expected at least {need} columns, found {}", cols.len()),
            ));
        }
        current.push(Row {
            line: line_no,
            token: cols[columns.token],
            label: cols[label_col],
        });
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    sentences.retain(|s| !(s.len() == 1 && s[0].token == DOCSTART));

    let vocab = match vocab {
        Some(v) => v.clone(),
        None => {
            let names = sentences.iter().flatten().map(|r| r.label);
            match LabelVocab::new(names) {
                Ok(v) => v,
                // an empty or single-label file still parses
                Err(_) if sentences.is_empty() => LabelVocab::new(["O", "X"])?,
                Err(e) => return Err(e),
            }
        }
    };
    let mut sequences = Vec::with_capacity(sentences.len());
    for s in &sentences {
        let mut labels = Vec::with_capacity(s.len());
        for r in s {
            labels.push(
                vocab
                    .id(r.label)
                    .ok_or_else(|| parse_err(r.line, format!("unknown label {:?}", r.label)))?,
            );
        }
        let tokens = s.iter().map(|r| r.token.to_string()).collect();
        sequences.push(LabeledSequence::new(tokens, labels)?);
    }
    Ok(Corpus {
        sequences,
        labels: vocab,
    })
}

pub fn read_conll(
    path: impl AsRef<Path>,
    columns: ConllColumns,
    vocab: Option<&LabelVocab>,
) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_conll(&text, columns, vocab, &path.display().to_string())
}

/// Canonical two-column rendering: `token label`, LF line endings, one
/// blank line after every sentence.
pub fn render_conll(sequences: &[LabeledSequence], vocab: &LabelVocab) -> Result<String> {
    let mut out = String::new();
    for s in sequences {
        for (tok, &label) in s.tokens.iter().zip(&s.labels) {
            let name = vocab
                .name(label)
                .ok_or_else(|| Error::Input(format!("label id {label} outside vocabulary")))?;
            out.push_str(tok);
            out.push(' ');
            out.push_str(name);
            out.push('\n');
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_conll(
    path: impl AsRef<Path>,
    sequences: &[LabeledSequence],
    vocab: &LabelVocab,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_conll(sequences, vocab)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Corpus> {
        parse_conll(text, ConllColumns::default(), None, "<test>")
    }

    #[test]
    fn two_token_sentence() {
        let c = parse("EU B-ORG\nrejects O\n").unwrap();
        assert_eq!(c.sequences.len(), 1);
        assert_eq!(c.sequences[0].tokens, vec!["EU", "rejects"]);
        assert_eq!(c.labels.decode(&c.sequences[0].labels).unwrap(), vec!["B-ORG", "O"]);
    }

    #[test]
    fn trailing_blank_lines_and_crlf() {
        let a = parse("EU B-ORG\nrejects O\n\nok O\n").unwrap();
        let b = parse("EU B-ORG\r\nrejects O\r\n\r\n\r\nok O\r\n\r\n\r\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sequences.len(), 2);
    }

    #[test]
    fn comments_docstart_and_multi_column() {
        let text = "# newdoc\n-DOCSTART- -X- -X- O\n\n# sent 1\nEU NNP B-NP B-ORG\n# NN I-NP O\n\n";
        let c = parse(text).unwrap();
        assert_eq!(c.sequences.len(), 1);
        // '#' inside a sentence is a token, not a comment
        assert_eq!(c.sequences[0].tokens, vec!["EU", "#"]);
        let c = parse_conll(
            text,
            ConllColumns {
                token: 0,
                label: Some(2),
            },
            None,
            "<test>",
        )
        .unwrap();
        assert_eq!(c.labels.decode(&c.sequences[0].labels).unwrap(), vec!["B-NP", "I-NP"]);
    }

    #[test]
    fn ragged_line_reports_line_number() {
        let err = parse("a O\nb\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(parse("").unwrap().sequences.is_empty());
        assert!(parse("\n\n# only a comment\n").unwrap().sequences.is_empty());
    }

    #[test]
    fn unknown_label_with_fixed_vocab() {
        let v = LabelVocab::bio(&["PER"]).unwrap();
        let err = parse_conll("x B-LOC\n", ConllColumns::default(), Some(&v), "f").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn wordpiece_groups() {
        let c = parse("Jim B-PER\n##my I-PER\nate O\n").unwrap();
        let g = c.sequences[0].groups.as_ref().unwrap();
        assert_eq!(g.ranges(), &[0..2, 2..3]);
        assert!(parse("a O\nb B-X\n").unwrap().sequences[0].groups.is_none());
    }

    #[test]
    fn write_read_is_canonical() {
        let text = "# c\r\nEU  B-ORG\r\nrejects\tO\r\n\r\n\r\nGerman B-MISC\ncall O\n\n\n";
        let c = parse(text).unwrap();
        let canon = render_conll(&c.sequences, &c.labels).unwrap();
        assert_eq!(canon, "EU B-ORG\nrejects O\n\nGerman B-MISC\ncall O\n\n");
        let again = parse(&canon).unwrap();
        assert_eq!(again, c);
        assert_eq!(render_conll(&again.sequences, &again.labels).unwrap(), canon);
    }
}
