//! Synthetic BIO tagging task with bounded-context label dependencies.
//!
//! Most tokens carry their label in their surface form. Ambiguous entity
//! heads take the type of the nearest trigger word at most `window` tokens
//! to their left, unless that trigger is directly preceded by a negator,
//! and ambiguous tails continue whatever the previous token resolved to.
//!
//! Reference words are resolved by content rather than by position. A
//! definition word binds a marker to an entity type (`@a.per`), to nothing
//! (`@a.nil`) or to another marker (`@a=b`). A word `ref@a` is a
//! single-word mention of the type that `@a` finally resolves to, or `O`
//! when it resolves to nothing. Each hop of an alias chain is one more
//! lookup by the reference word, while definitions are fixed by the word
//! alone.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LabelVocab, LabeledSequence, Tag, TokenVocab, CONTINUATION_PREFIX};
use crate::error::{Error, Result};

const TYPE_NAMES: [&str; 4] = ["PER", "LOC", "ORG", "MISC"];
const FILLERS: usize = 24;
const HEADS: usize = 3;
const TAILS: usize = 2;
const TRIGGERS: usize = 2;
const AMBIGUOUS_HEADS: usize = 2;
const NEGATOR: &str = "not";
const AMBIGUOUS_TAIL: &str = "amb.t";
const MARKERS: [char; 4] = ['a', 'b', 'c', 'd'];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    /// Entity types `T`; the task has `2T + 1` labels.
    pub num_types: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// How far to the left a trigger can resolve an ambiguous head.
    pub window: usize,
    /// Fraction of entity mentions that use ambiguous words, in `[0, 1]`.
    pub difficulty: f64,
    /// Probability that a mention starts a new segment.
    pub entity_rate: f64,
    /// Probability that a trigger is preceded by the negator.
    pub negation_rate: f64,
    /// Probability that a sentence carries a reference structure.
    pub reference_rate: f64,
    /// Longest alias chain behind a reference, counted in markers.
    pub max_hops: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_types: 4,
            min_len: 8,
            max_len: 24,
            window: 3,
            difficulty: 0.5,
            entity_rate: 0.35,
            negation_rate: 0.25,
            reference_rate: 0.6,
            max_hops: 3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_types == 0 {
            return bad("synthetic task needs at least one entity type".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            ));
        }
        if self.window == 0 {
            return bad("trigger window must be at least 1".into());
        }
        if self.max_hops > MARKERS.len() {
            return bad(format!("max_hops is at most {}", MARKERS.len()));
        }
        for (name, p) in [
            ("difficulty", self.difficulty),
            ("entity_rate", self.entity_rate),
            ("negation_rate", self.negation_rate),
            ("reference_rate", self.reference_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        Ok(())
    }

    pub fn num_labels(&self) -> usize {
        2 * self.num_types + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Word {
    Filler,
    Head(usize),
    Tail(usize),
    Trigger(usize),
    AmbiguousHead,
    AmbiguousTail,
    Negator,
    /// Marker bound to an entity type, or to nothing.
    Bind(usize, Option<usize>),
    /// Marker bound to whatever the second marker is bound to.
    Alias(usize, usize),
    Reference(usize),
}

/// Generator and labelling rule of one synthetic task.
#[derive(Clone, Debug)]
pub struct SynthTask {
    spec: SynthSpec,
    tokens: TokenVocab,
    labels: LabelVocab,
    kinds: HashMap<String, Word>,
    fillers: Vec<String>,
    heads: Vec<Vec<String>>,
    tails: Vec<Vec<String>>,
    triggers: Vec<Vec<String>>,
    ambiguous_heads: Vec<String>,
}

fn type_name(t: usize) -> String {
    TYPE_NAMES
        .get(t)
        .map_or_else(|| format!("T{t}"), |s| s.to_string())
}

impl SynthTask {
    pub fn new(spec: SynthSpec) -> Result<Self> {
        spec.validate()?;
        let types: Vec<String> = (0..spec.num_types).map(type_name).collect();
        let labels = LabelVocab::bio(&types)?;
        let mut kinds = HashMap::new();
        let mut add = |s: String, w: Word| {
            kinds.insert(s.clone(), w);
            s
        };
        let fillers: Vec<String> = (0..FILLERS).map(|i| add(format!("w{i}"), Word::Filler)).collect();
        let mut heads = Vec::new();
        let mut tails = Vec::new();
        let mut triggers = Vec::new();
        for (t, name) in types.iter().enumerate() {
            let name = name.to_lowercase();
            heads.push((0..HEADS).map(|i| add(format!("{name}.h{i}"), Word::Head(t))).collect());
            tails.push((0..TAILS).map(|i| add(format!("{name}.t{i}"), Word::Tail(t))).collect());
            triggers.push(
                (0..TRIGGERS)
                    .map(|i| add(format!("{name}.cue{i}"), Word::Trigger(t)))
                    .collect(),
            );
        }
        let ambiguous_heads: Vec<String> = (0..AMBIGUOUS_HEADS)
            .map(|i| add(format!("amb.h{i}"), Word::AmbiguousHead))
            .collect();
        add(AMBIGUOUS_TAIL.to_string(), Word::AmbiguousTail);
        add(NEGATOR.to_string(), Word::Negator);
        for (m, c) in MARKERS.iter().enumerate() {
            for (t, name) in types.iter().enumerate() {
                add(format!("@{c}.{}", name.to_lowercase()), Word::Bind(m, Some(t)));
            }
            add(format!("@{c}.nil"), Word::Bind(m, None));
            for (n, d) in MARKERS.iter().enumerate() {
                if n != m {
                    add(format!("@{c}={d}"), Word::Alias(m, n));
                }
            }
            add(format!("ref@{c}"), Word::Reference(m));
        }

        let mut surface: Vec<&String> = kinds.keys().collect();
        surface.sort();
        let tokens = TokenVocab::new(surface);
        Ok(SynthTask {
            spec,
            tokens,
            labels,
            kinds,
            fillers,
            heads,
            tails,
            triggers,
            ambiguous_heads,
        })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    /// Vocabulary of every surface form the generator can emit.
    pub fn token_vocab(&self) -> &TokenVocab {
        &self.tokens
    }

    pub fn label_vocab(&self) -> &LabelVocab {
        &self.labels
    }

    fn pick<'a, R: Rng>(rng: &mut R, words: &'a [String]) -> &'a String {
        &words[rng.gen_range(0..words.len())]
    }

    fn mention<R: Rng>(&self, rng: &mut R, out: &mut Vec<String>) {
        let s = &self.spec;
        let tails = rng.gen_range(0..=2);
        if rng.gen_bool(s.difficulty) {
            if rng.gen_bool(0.8) {
                if rng.gen_bool(s.negation_rate) {
                    out.push(NEGATOR.to_string());
                }
                let t = rng.gen_range(0..s.num_types);
                out.push(Self::pick(rng, &self.triggers[t]).clone());
                let gap = rng.gen_range(0..s.window);
                for _ in 0..gap {
                    out.push(Self::pick(rng, &self.fillers).clone());
                }
            }
            out.push(Self::pick(rng, &self.ambiguous_heads).clone());
            for _ in 0..tails {
                out.push(AMBIGUOUS_TAIL.to_string());
            }
        } else {
            let t = rng.gen_range(0..s.num_types);
            out.push(Self::pick(rng, &self.heads[t]).clone());
            for _ in 0..tails {
                out.push(Self::pick(rng, &self.tails[t]).clone());
            }
        }
    }

    /// Words of a reference structure: the definitions along one alias
    /// chain, possibly a spare definition, and one to three references.
    fn references<R: Rng>(&self, rng: &mut R) -> Vec<String> {
        let s = &self.spec;
        let mut order: Vec<usize> = (0..MARKERS.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let hops = rng.gen_range(1..=s.max_hops);
        let bind = |rng: &mut R, m: usize| {
            let target = if rng.gen_bool(0.8) {
                type_name(rng.gen_range(0..s.num_types)).to_lowercase()
            } else {
                "nil".to_string()
            };
            format!("@{}.{target}", MARKERS[m])
        };
        let mut words = Vec::new();
        for h in 0..hops {
            if h + 1 < hops {
                words.push(format!("@{}={}", MARKERS[order[h]], MARKERS[order[h + 1]]));
            } else {
                words.push(bind(rng, order[h]));
            }
        }
        let spare = order.get(hops).copied();
        if let Some(m) = spare {
            if rng.gen_bool(0.5) {
                words.push(bind(rng, m));
            }
        }
        words.push(format!("ref@{}", MARKERS[order[0]]));
        for _ in 0..rng.gen_range(0..=2) {
            // further references, into the chain or to the spare marker
            let m = match spare {
                Some(m) if rng.gen_bool(0.2) => m,
                _ => order[rng.gen_range(0..hops)],
            };
            words.push(format!("ref@{}", MARKERS[m]));
        }
        words
    }

    /// Draws one sentence and labels it with [`SynthTask::label`].
    pub fn sample<R: Rng>(&self, rng: &mut R) -> LabeledSequence {
        let s = &self.spec;
        let target = rng.gen_range(s.min_len..=s.max_len);
        let units = if s.max_hops > 0 && rng.gen_bool(s.reference_rate) {
            self.references(rng)
        } else {
            Vec::new()
        };
        let extra = units.len();
        let target = target.saturating_sub(extra).max(1);
        let mut words = Vec::with_capacity(target + 8);
        while words.len() < target {
            let r: f64 = rng.gen();
            if r < s.entity_rate {
                self.mention(rng, &mut words);
            } else if r < s.entity_rate + 0.06 {
                // a trigger with nothing to resolve
                let t = rng.gen_range(0..s.num_types);
                words.push(Self::pick(rng, &self.triggers[t]).clone());
            } else if r < s.entity_rate + 0.09 {
                words.push(NEGATOR.to_string());
            } else {
                words.push(Self::pick(rng, &self.fillers).clone());
            }
        }
        words.truncate(target);
        for word in units {
            // only in front of words that do not continue what is on their left
            let slots: Vec<usize> = (0..=words.len())
                .filter(|&i| i == words.len() || matches!(self.kinds[&words[i]], Word::Filler | Word::Head(_)))
                .collect();
            let at = slots[rng.gen_range(0..slots.len())];
            words.insert(at, word);
        }
        let labels = self.label(&words).expect("generated words are known");
        LabeledSequence::new(words, labels).expect("one label per word")
    }

    pub fn generate<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<LabeledSequence> {
        (0..count).map(|_| self.sample(rng)).collect()
    }

    /// The labelling rule. Errors on words outside the task vocabulary.
    pub fn label<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        let kinds: Vec<Word> = words
            .iter()
            .map(|w| {
                self.kinds
                    .get(w.as_ref())
                    .copied()
                    .ok_or_else(|| Error::Input(format!("{:?} is not a task word", w.as_ref())))
            })
            .collect::<Result<_>>()?;
        let markers: HashMap<usize, usize> = kinds
            .iter()
            .enumerate()
            .rev()
            .filter_map(|(i, k)| match k {
                Word::Bind(m, _) | Word::Alias(m, _) => Some((*m, i)),
                _ => None,
            })
            .collect();
        let begin = |t: usize| 1 + 2 * t;
        let inside = |t: usize| 2 + 2 * t;
        let mut labels: Vec<usize> = Vec::with_capacity(kinds.len());
        for (i, &k) in kinds.iter().enumerate() {
            let label = match k {
                Word::Filler | Word::Trigger(_) | Word::Negator | Word::Bind(..) | Word::Alias(..) => 0,
                Word::Head(t) => begin(t),
                Word::Tail(t) => inside(t),
                Word::AmbiguousHead => {
                    let lo = i.saturating_sub(self.spec.window);
                    match (lo..i).rev().find(|&j| matches!(kinds[j], Word::Trigger(_))) {
                        Some(j) if j > 0 && kinds[j - 1] == Word::Negator => 0,
                        Some(j) => match kinds[j] {
                            Word::Trigger(t) => begin(t),
                            _ => unreachable!(),
                        },
                        None => 0,
                    }
                }
                Word::AmbiguousTail => match labels.last().and_then(|&p| self.labels.tag(p)) {
                    Some(Tag::Begin(t) | Tag::Inside(t)) => inside(t),
                    _ => 0,
                },
                Word::Reference(m) => resolve(&kinds, &markers, m).0.map_or(0, begin),
            };
            labels.push(label);
        }
        Ok(labels)
    }

    /// Whether the label of each token needs context beyond the token itself.
    pub fn is_contextual<S: AsRef<str>>(&self, words: &[S]) -> Vec<bool> {
        words
            .iter()
            .map(|w| {
                matches!(
                    self.kinds.get(w.as_ref()),
                    Some(Word::AmbiguousHead | Word::AmbiguousTail | Word::Reference(_))
                )
            })
            .collect()
    }

    /// Number of dependent lookups needed to label each token: 0 when the
    /// word alone decides, 1 for a head resolved by a trigger (2 when the
    /// trigger may be negated), and one more than the referenced token for
    /// tails. A reference needs one lookup per definition on its chain, and
    /// one to see that its marker is undefined. Unknown words count as 0.
    pub fn reasoning_depth<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        let kinds: Vec<Option<Word>> = words.iter().map(|w| self.kinds.get(w.as_ref()).copied()).collect();
        let known: Vec<Word> = kinds.iter().map(|k| k.unwrap_or(Word::Filler)).collect();
        let markers: HashMap<usize, usize> = known
            .iter()
            .enumerate()
            .rev()
            .filter_map(|(i, k)| match k {
                Word::Bind(m, _) | Word::Alias(m, _) => Some((*m, i)),
                _ => None,
            })
            .collect();
        let mut depth: Vec<usize> = Vec::with_capacity(kinds.len());
        for k in &kinds {
            let d = match k {
                Some(Word::AmbiguousHead) => 2,
                Some(Word::AmbiguousTail) => depth.last().map_or(1, |d| d + 1),
                Some(Word::Reference(m)) => resolve(&known, &markers, *m).1.max(1),
                _ => 0,
            };
            depth.push(d);
        }
        depth
    }
}

/// Follows marker `m` through aliases to an entity type. Also returns how
/// many definitions were visited. The first definition of a marker counts.
fn resolve(kinds: &[Word], definitions: &HashMap<usize, usize>, mut m: usize) -> (Option<usize>, usize) {
    let mut seen = Vec::new();
    loop {
        let Some(&p) = definitions.get(&m) else {
            return (None, seen.len());
        };
        seen.push(m);
        match kinds[p] {
            Word::Bind(_, t) => return (t, seen.len()),
            Word::Alias(_, next) if !seen.contains(&next) => m = next,
            _ => return (None, seen.len()),
        }
    }
}

/// Splits every word longer than `min_chars` characters into two
/// wordpieces at its midpoint. The second piece carries the continuation
/// prefix and the `I-` form of the word's label, so the result stays
/// well-formed BIO.
pub fn split_wordpieces(seq: &LabeledSequence, vocab: &LabelVocab, min_chars: usize) -> LabeledSequence {
    let mut tokens = Vec::with_capacity(seq.len() * 2);
    let mut labels = Vec::with_capacity(seq.len() * 2);
    for (tok, &label) in seq.tokens.iter().zip(&seq.labels) {
        let chars: Vec<char> = tok.chars().collect();
        if chars.len() > min_chars {
            let mid = chars.len().div_ceil(2);
            tokens.push(chars[..mid].iter().collect());
            tokens.push(format!("{CONTINUATION_PREFIX}{}", chars[mid..].iter().collect::<String>()));
            labels.push(label);
            labels.push(vocab.continuation_of(label));
        } else {
            tokens.push(tok.clone());
            labels.push(label);
        }
    }
    LabeledSequence::new(tokens, labels).expect("one label per piece")
}

/// Empirical conditional entropy (nats) of a token's label given the
/// `left` preceding tokens, the token itself and the `right` following
/// tokens; positions outside the sentence are a boundary symbol.
pub fn conditional_entropy(corpus: &[LabeledSequence], left: usize, right: usize) -> f64 {
    let mut joint: HashMap<(Vec<&str>, usize), usize> = HashMap::new();
    let mut context: HashMap<Vec<&str>, usize> = HashMap::new();
    let mut total = 0usize;
    for s in corpus {
        for i in 0..s.len() {
            let ctx: Vec<&str> = (i as isize - left as isize..=i as isize + right as isize)
                .map(|j| {
                    if j < 0 || j as usize >= s.len() {
                        "<s>"
                    } else {
                        s.tokens[j as usize].as_str()
                    }
                })
                .collect();
            *context.entry(ctx.clone()).or_default() += 1;
            *joint.entry((ctx, s.labels[i])).or_default() += 1;
            total += 1;
        }
    }
    joint
        .iter()
        .map(|((ctx, _), &n)| {
            let p_joint = n as f64 / total as f64;
            let p_cond = n as f64 / context[ctx] as f64;
            -p_joint * p_cond.ln()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn task(difficulty: f64) -> SynthTask {
        SynthTask::new(SynthSpec {
            difficulty,
            reference_rate: difficulty,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn same_seed_same_corpus() {
        let t = task(0.5);
        let a = t.generate(50, &mut ChaCha8Rng::seed_from_u64(3));
        let b = t.generate(50, &mut ChaCha8Rng::seed_from_u64(3));
        let c = t.generate(50, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sentences_respect_spec() {
        let t = task(0.5);
        let v = t.label_vocab();
        assert_eq!(v.len(), 9);
        for s in t.generate(200, &mut ChaCha8Rng::seed_from_u64(1)) {
            assert!((8..=24).contains(&s.len()));
            assert!(s.labels.iter().all(|&l| l < 9));
            assert!(s.tokens.iter().all(|w| t.token_vocab().id(w) != 0));
        }
    }

    #[test]
    fn hand_labelled_examples() {
        let t = task(0.5);
        let v = t.label_vocab();
        let names = |words: &[&str]| -> Vec<String> {
            v.decode(&t.label(words).unwrap())
                .unwrap()
                .into_iter()
                .map(String::from)
                .collect()
        };
        assert_eq!(
            names(&["loc.cue0", "w1", "amb.h0", "amb.t", "w2"]),
            ["O", "O", "B-LOC", "I-LOC", "O"]
        );
        assert_eq!(names(&["not", "loc.cue0", "amb.h1", "amb.t"]), ["O", "O", "O", "O"]);
        // trigger outside the window of 3
        assert_eq!(names(&["per.cue1", "w0", "w1", "w2", "amb.h0"]), ["O", "O", "O", "O", "O"]);
        // the reference may come before its definition
        assert_eq!(names(&["ref@a", "w1", "@a.org", "w2"]), ["B-ORG", "O", "O", "O"]);
        let chain = ["ref@c", "@c=a", "w0", "@a=b", "@b.per", "ref@a", "ref@d", "@b.loc", "ref@b"];
        assert_eq!(
            names(&chain),
            ["B-PER", "O", "O", "O", "O", "B-PER", "O", "O", "B-PER"]
        );
        assert_eq!(t.reasoning_depth(&chain), vec![3, 0, 0, 0, 0, 2, 1, 0, 1]);
        // bound to nothing, and an alias cycle
        assert_eq!(names(&["@b.nil", "ref@b"]), ["O", "O"]);
        assert_eq!(names(&["@b=a", "@a=b", "ref@a"]), ["O", "O", "O"]);
        // the nearest trigger wins
        assert_eq!(names(&["per.cue1", "org.cue0", "amb.h0"]), ["O", "O", "B-ORG"]);
        assert_eq!(names(&["per.h2", "per.t0", "amb.t"]), ["B-PER", "I-PER", "I-PER"]);
        assert!(t.label(&["nope"]).is_err());
    }

    #[test]
    fn labels_are_determined_by_bounded_context() {
        let t = task(0.6);
        let corpus = t.generate(3000, &mut ChaCha8Rng::seed_from_u64(9));
        // the whole sentence decides
        assert!(conditional_entropy(&corpus, 32, 32) < 1e-12);
        // the token alone leaves ambiguous words uncertain
        assert!(conditional_entropy(&corpus, 0, 0) > 0.05);
    }

    #[test]
    fn no_ambiguity_without_difficulty() {
        let t = task(0.0);
        let corpus = t.generate(2000, &mut ChaCha8Rng::seed_from_u64(2));
        assert!(conditional_entropy(&corpus, 0, 0) < 1e-12);
        assert!(corpus
            .iter()
            .all(|s| t.is_contextual(&s.tokens).iter().all(|&c| !c)));
    }

    #[test]
    fn difficulty_controls_contextual_share() {
        let share = |d: f64| {
            let t = task(d);
            let corpus = t.generate(500, &mut ChaCha8Rng::seed_from_u64(5));
            let (mut ctx, mut all) = (0, 0);
            for s in &corpus {
                ctx += t.is_contextual(&s.tokens).iter().filter(|&&c| c).count();
                all += s.len();
            }
            ctx as f64 / all as f64
        };
        let (a, b) = (share(0.2), share(0.8));
        assert!(a > 0.0 && b > 2.0 * a, "{a} {b}");
    }

    #[test]
    fn wordpieces_stay_well_formed() {
        let t = task(0.5);
        let v = t.label_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for s in t.generate(100, &mut rng) {
            let w = split_wordpieces(&s, v, 5);
            let g = w.groups.clone().unwrap_or_else(|| crate::halt_copy::WordGroups::singletons(w.len()));
            assert_eq!(g.num_words(), s.len());
            assert_eq!(g.first_pooled(&w.labels), s.labels);
            for r in g.ranges() {
                for i in r.start + 1..r.end {
                    assert!(matches!(v.tag(w.labels[i]), Some(Tag::Outside | Tag::Inside(_))));
                }
            }
            let spans = super::super::decode_spans(&w.labels, v).unwrap();
            assert_eq!(spans.len(), super::super::decode_spans(&s.labels, v).unwrap().len());
        }
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SynthSpec { num_types: 0, ..SynthSpec::default() },
            SynthSpec { min_len: 5, max_len: 4, ..SynthSpec::default() },
            SynthSpec { difficulty: 1.5, ..SynthSpec::default() },
            SynthSpec { window: 0, ..SynthSpec::default() },
            SynthSpec { max_hops: 5, ..SynthSpec::default() },
            SynthSpec { reference_rate: -0.1, ..SynthSpec::default() },
        ] {
            assert!(matches!(SynthTask::new(spec), Err(Error::Config(_))));
        }
    }
}
