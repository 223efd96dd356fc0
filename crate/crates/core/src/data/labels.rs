use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved token for surface forms missing from a [`TokenVocab`].
pub const UNKNOWN_TOKEN: &str = "[UNK]";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    /// `O`, `B-type` and `I-type` labels.
    Bio,
    /// Opaque tags such as part-of-speech.
    Plain,
}

/// Structural reading of a label id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tag {
    Outside,
    Begin(usize),
    Inside(usize),
    /// A label of a plain schema; `usize` is the label id.
    Other(usize),
}

/// Dense bidirectional label map. Ids follow first appearance except that
/// `O` is always id 0 under the BIO schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelVocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
    schema: Schema,
    types: Vec<String>,
    tags: Vec<Tag>,
}

impl LabelVocab {
    /// Builds a vocabulary from label names, deduplicating in order.
    pub fn new<S: AsRef<str>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut ordered: Vec<String> = Vec::new();
        for n in names {
            let n = n.as_ref();
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                return Err(Error::Input(format!("invalid label {n:?}")));
            }
            if !ordered.iter().any(|o| o == n) {
                ordered.push(n.to_string());
            }
        }
        let bio = ordered
            .iter()
            .all(|n| n == "O" || n.starts_with("B-") || n.starts_with("I-"));
        if bio {
            if let Some(pos) = ordered.iter().position(|n| n == "O") {
                let o = ordered.remove(pos);
                ordered.insert(0, o);
            }
        }
        if ordered.len() < 2 {
            return Err(Error::Input(format!(
                "a label vocabulary needs at least 2 labels, got {}",
                ordered.len()
            )));
        }
        let schema = if bio { Schema::Bio } else { Schema::Plain };
        let mut types: Vec<String> = Vec::new();
        let mut tags = Vec::with_capacity(ordered.len());
        for (id, n) in ordered.iter().enumerate() {
            let tag = match schema {
                Schema::Plain => Tag::Other(id),
                Schema::Bio if n == "O" => Tag::Outside,
                Schema::Bio => {
                    let ty = &n[2..];
                    let t = match types.iter().position(|x| x == ty) {
                        Some(t) => t,
                        None => {
                            types.push(ty.to_string());
                            types.len() - 1
                        }
                    };
                    if n.starts_with("B-") {
                        Tag::Begin(t)
                    } else {
                        Tag::Inside(t)
                    }
                }
            };
            tags.push(tag);
        }
        let index = ordered
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(LabelVocab {
            names: ordered,
            index,
            schema,
            types,
            tags,
        })
    }

    /// `O` followed by `B-t`, `I-t` for each type.
    pub fn bio<S: AsRef<str>>(types: &[S]) -> Result<Self> {
        let mut names = vec!["O".to_string()];
        for t in types {
            names.push(format!("B-{}", t.as_ref()));
            names.push(format!("I-{}", t.as_ref()));
        }
        Self::new(names)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn schema(&self) -> Schema {
        self.schema
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Entity types in order of first appearance (BIO only).
    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn tag(&self, id: usize) -> Option<Tag> {
        self.tags.get(id).copied()
    }

    pub fn encode<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                self.id(n.as_ref())
                    .ok_or_else(|| Error::Input(format!("unknown label {:?}", n.as_ref())))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<&str>> {
        ids.iter()
            .map(|&i| {
                self.name(i)
                    .ok_or_else(|| Error::Input(format!("label id {i} outside vocabulary")))
            })
            .collect()
    }

    /// The id of `I-t` for the type of `B-t` or `I-t`, otherwise `id` itself.
    pub fn continuation_of(&self, id: usize) -> usize {
        match self.tag(id) {
            Some(Tag::Begin(t)) => self
                .id(&format!("I-{}", self.types[t]))
                .unwrap_or(id),
            _ => id,
        }
    }
}

impl TryFrom<Vec<String>> for LabelVocab {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        LabelVocab::new(names)
    }
}

impl From<LabelVocab> for Vec<String> {
    fn from(v: LabelVocab) -> Self {
        v.names
    }
}

/// Surface-token vocabulary. Id 0 is [`UNKNOWN_TOKEN`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TokenVocab {
    pub fn new<S: AsRef<str>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut v = TokenVocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.insert(UNKNOWN_TOKEN);
        for t in tokens {
            v.insert(t.as_ref());
        }
        v
    }

    fn insert(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index.insert(token.to_string(), self.tokens.len());
            self.tokens.push(token.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }
}

impl From<Vec<String>> for TokenVocab {
    fn from(tokens: Vec<String>) -> Self {
        TokenVocab::new(tokens.into_iter().filter(|t| t != UNKNOWN_TOKEN))
    }
}

impl From<TokenVocab> for Vec<String> {
    fn from(v: TokenVocab) -> Self {
        v.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bio_vocab_puts_outside_first() {
        let v = LabelVocab::new(["B-PER", "I-PER", "O", "B-LOC"]).unwrap();
        assert_eq!(v.schema(), Schema::Bio);
        assert_eq!(v.id("O"), Some(0));
        assert_eq!(v.len(), 4);
        assert_eq!(v.tag(v.id("I-PER").unwrap()), Some(Tag::Inside(0)));
        assert_eq!(v.tag(v.id("B-LOC").unwrap()), Some(Tag::Begin(1)));
        assert_eq!(v.types(), &["PER".to_string(), "LOC".to_string()]);
    }

    #[test]
    fn plain_vocab() {
        let v = LabelVocab::new(["NOUN", "VERB", "NOUN"]).unwrap();
        assert_eq!(v.schema(), Schema::Plain);
        assert_eq!(v.len(), 2);
        assert_eq!(v.encode(&["VERB", "NOUN"]).unwrap(), vec![1, 0]);
        assert!(v.encode(&["ADJ"]).is_err());
    }

    #[test]
    fn too_few_labels() {
        assert!(LabelVocab::new(["O"]).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let v = LabelVocab::bio(&["A", "B"]).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<LabelVocab>(&s).unwrap(), v);
        let t = TokenVocab::new(["x", "y"]);
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<TokenVocab>(&s).unwrap(), t);
        assert_eq!(t.id("zzz"), 0);
        assert_eq!(t.id("y"), 2);
    }
}
