//! Tagged-corpus ingestion, vocabulary/POS-partition construction, a
//! synthetic grammar generator, and a most-frequent-tag lexicon tagger.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("line {line}, column {column}: {reason}")]
    Malformed {
        line: usize,
        column: usize,
        reason: String,
    },
    #[error("corpus contains no sequences")]
    Empty,
    #[error("no tokens survive vocabulary filtering")]
    EmptyAfterFiltering,
    #[error("invalid token {surface:?}: {reason}")]
    InvalidToken { surface: String, reason: String },
    #[error("invalid grammar: {0}")]
    Grammar(String),
    #[error("sequence {sequence}, position {position}: tag {tag:?} is not in the POS inventory")]
    UnknownTag {
        sequence: usize,
        position: usize,
        tag: String,
    },
    #[error("sequence {sequence}, position {position}: token {token:?} was never observed as {tag:?}")]
    GoldInconsistent {
        sequence: usize,
        position: usize,
        token: String,
        tag: String,
    },
    #[error("invalid lexicon: {0}")]
    Lexicon(String),
}

/// One token of a tagged corpus.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaggedToken {
    surface: String,
    tag: String,
}

fn check_field(value: &str, what: &str) -> Result<(), String> {
    if value.is_empty() {
        return Err(format!("empty {what}"));
    }
    if value.chars().any(char::is_whitespace) {
        return Err(format!("{what} contains whitespace"));
    }
    Ok(())
}

impl TaggedToken {
    /// Surfaces may not begin with `#`, which the file format reserves for comments.
    pub fn new(surface: impl Into<String>, tag: impl Into<String>) -> Result<Self, CorpusError> {
        let surface = surface.into();
        let tag = tag.into();
        let invalid = |reason: String| CorpusError::InvalidToken {
            surface: surface.clone(),
            reason,
        };
        check_field(&surface, "surface").map_err(invalid)?;
        check_field(&tag, "tag").map_err(invalid)?;
        if surface.starts_with('#') {
            return Err(invalid("surface begins with the comment marker '#'".into()));
        }
        Ok(Self { surface, tag })
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }
}

/// An ordered list of non-empty tagged sequences.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TaggedCorpus {
    sequences: Vec<Vec<TaggedToken>>,
}

impl TaggedCorpus {
    pub fn new(sequences: Vec<Vec<TaggedToken>>) -> Result<Self, CorpusError> {
        if sequences.is_empty() {
            return Err(CorpusError::Empty);
        }
        if let Some(i) = sequences.iter().position(Vec::is_empty) {
            return Err(CorpusError::Malformed {
                line: 0,
                column: 0,
                reason: format!("sequence {i} is empty"),
            });
        }
        Ok(Self { sequences })
    }

    pub fn sequences(&self) -> &[Vec<TaggedToken>] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Splits off the trailing `fraction` of sequences (at least one stays on each side
    /// when there are two or more sequences).
    pub fn split_tail(&self, fraction: f64) -> (TaggedCorpus, Option<TaggedCorpus>) {
        let n = self.sequences.len();
        let tail = ((n as f64) * fraction).round() as usize;
        let tail = tail.min(n.saturating_sub(1));
        if tail == 0 {
            return (self.clone(), None);
        }
        let head = TaggedCorpus {
            sequences: self.sequences[..n - tail].to_vec(),
        };
        let rest = TaggedCorpus {
            sequences: self.sequences[n - tail..].to_vec(),
        };
        (head, Some(rest))
    }

    /// Serializes into the `surface<TAB>tag` line format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for seq in &self.sequences {
            for tok in seq {
                let _ = writeln!(out, "{}\t{}", tok.surface, tok.tag);
            }
            out.push('\n');
        }
        out
    }
}

/// Parses the `surface<TAB>tag` line format. Blank lines end sequences and
/// lines starting with `#` are skipped.
pub fn parse_tagged_corpus(input: &str) -> Result<TaggedCorpus, CorpusError> {
    let mut sequences = Vec::new();
    let mut current = Vec::new();
    for (idx, line) in input.split('\n').enumerate() {
        let line_no = idx + 1;
        if line.is_empty() {
            if !current.is_empty() {
                sequences.push(std::mem::take(&mut current));
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let malformed = |column: usize, reason: &str| CorpusError::Malformed {
            line: line_no,
            column,
            reason: reason.to_string(),
        };
        let Some(tab) = line.find('\t') else {
            return Err(malformed(1, "missing tab separator"));
        };
        let (surface, tag) = (&line[..tab], &line[tab + 1..]);
        if surface.is_empty() {
            return Err(malformed(1, "empty surface"));
        }
        if tag.is_empty() {
            return Err(malformed(tab + 2, "empty tag"));
        }
        if let Some(off) = surface.find(char::is_whitespace) {
            return Err(malformed(surface[..off].chars().count() + 1, "whitespace in surface"));
        }
        if let Some(off) = tag.find(char::is_whitespace) {
            let col = surface.chars().count() + 1 + tag[..off].chars().count() + 1;
            return Err(malformed(col, "whitespace in tag"));
        }
        current.push(TaggedToken {
            surface: surface.to_string(),
            tag: tag.to_string(),
        });
    }
    if !current.is_empty() {
        sequences.push(current);
    }
    if sequences.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(TaggedCorpus { sequences })
}

pub fn read_tagged_corpus(path: &Path) -> Result<TaggedCorpus, crate::Error> {
    let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
    parse_tagged_corpus(&text).map_err(|e| crate::Error::data(path, e))
}

/// Dense token ids with four reserved specials at ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const UNK: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const PAD: usize = 3;
    pub const SPECIALS: [&'static str; 4] = ["<unk>", "<s>", "</s>", "<pad>"];

    fn from_tokens(tokens: Vec<String>) -> Result<Self, CorpusError> {
        if tokens.len() < 4 || tokens[..4] != Self::SPECIALS {
            return Err(CorpusError::Lexicon("vocabulary must start with the four specials".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(CorpusError::Lexicon(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, falling back to UNK.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: usize) -> bool {
        id < 4
    }
}

/// Dense POS ids; id 0 is the reserved tag carried by the special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PosInventory {
    tags: Vec<String>,
    index: HashMap<String, usize>,
}

impl PosInventory {
    pub const SPECIAL: usize = 0;
    pub const SPECIAL_TAG: &'static str = "<special>";

    fn from_tags(tags: Vec<String>) -> Result<Self, CorpusError> {
        if tags.first().map(String::as_str) != Some(Self::SPECIAL_TAG) {
            return Err(CorpusError::Lexicon("POS inventory must start with the special tag".into()));
        }
        let mut index = HashMap::with_capacity(tags.len());
        for (i, t) in tags.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(CorpusError::Lexicon(format!("duplicate tag {t:?}")));
            }
        }
        Ok(Self { tags, index })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn get(&self, tag: &str) -> Option<usize> {
        self.index.get(tag).copied()
    }

    pub fn tag(&self, id: usize) -> &str {
        &self.tags[id]
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }
}

/// The cells `V_rho` of the vocabulary and, per token, the tags it was seen under.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PosPartition {
    members: Vec<Vec<usize>>,
    tag_sets: Vec<Vec<usize>>,
}

impl PosPartition {
    /// Builds the partition from per-token tag sets, checking that every token has
    /// at least one tag and every tag at least one token.
    pub fn from_tag_sets(tag_sets: Vec<Vec<usize>>, pos_count: usize) -> Result<Self, CorpusError> {
        let mut members = vec![Vec::new(); pos_count];
        let mut normalized = Vec::with_capacity(tag_sets.len());
        for (x, set) in tag_sets.into_iter().enumerate() {
            let set: Vec<usize> = set.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
            if set.is_empty() {
                return Err(CorpusError::Lexicon(format!("token {x} has no POS")));
            }
            for &p in &set {
                if p >= pos_count {
                    return Err(CorpusError::Lexicon(format!("token {x} has out-of-range POS {p}")));
                }
                members[p].push(x);
            }
            normalized.push(set);
        }
        if let Some(p) = members.iter().position(Vec::is_empty) {
            return Err(CorpusError::Lexicon(format!("POS {p} has an empty cell")));
        }
        Ok(Self {
            members,
            tag_sets: normalized,
        })
    }

    /// Sorted token ids in cell `pos`.
    pub fn members(&self, pos: usize) -> &[usize] {
        &self.members[pos]
    }

    /// Sorted POS ids observed for `token`.
    pub fn tags_of(&self, token: usize) -> &[usize] {
        &self.tag_sets[token]
    }

    pub fn contains(&self, pos: usize, token: usize) -> bool {
        self.tag_sets[token].binary_search(&pos).is_ok()
    }

    pub fn pos_count(&self) -> usize {
        self.members.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.tag_sets.len()
    }

    /// Sum of cell sizes; exceeds the vocabulary size by the multi-POS overlap.
    pub fn total_cell_size(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }
}

/// Per-token training-set tag frequencies, sorted by POS id.
pub type TagCounts = Vec<Vec<(usize, u64)>>;

/// Everything derived from a training corpus: vocabulary, tag inventory,
/// partition, and tag frequencies for the lexicon tagger.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub vocab: Vocabulary,
    pub inventory: PosInventory,
    pub partition: PosPartition,
    pub tag_counts: TagCounts,
}

#[derive(Serialize, Deserialize)]
struct LexiconFile {
    format: String,
    tokens: Vec<String>,
    tags: Vec<String>,
    tag_counts: Vec<Vec<(usize, u64)>>,
}

const LEXICON_FORMAT: &str = "posg-lexicon-v1";

/// How [`Lexicon::encode`] treats pairs whose tag was never seen with the token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagPolicy {
    Strict,
    /// Replace the tag with the token's most frequent training tag.
    Coerce,
}

/// A corpus mapped onto token and POS ids (no BOS/EOS added).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EncodedSequence {
    pub tokens: Vec<usize>,
    pub pos: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EncodedCorpus {
    pub sequences: Vec<EncodedSequence>,
    /// Pairs rewritten under [`TagPolicy::Coerce`].
    pub coerced: usize,
}

impl EncodedCorpus {
    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(|s| s.tokens.len()).sum()
    }
}

impl Lexicon {
    pub fn from_parts(tokens: Vec<String>, tags: Vec<String>, tag_counts: TagCounts) -> Result<Self, CorpusError> {
        let vocab = Vocabulary::from_tokens(tokens)?;
        let inventory = PosInventory::from_tags(tags)?;
        if tag_counts.len() != vocab.len() {
            return Err(CorpusError::Lexicon("tag counts do not cover the vocabulary".into()));
        }
        let tag_sets = tag_counts.iter().map(|c| c.iter().map(|&(p, _)| p).collect()).collect();
        let partition = PosPartition::from_tag_sets(tag_sets, inventory.len())?;
        Ok(Self {
            vocab,
            inventory,
            partition,
            tag_counts,
        })
    }

    pub fn to_json(&self) -> String {
        let file = LexiconFile {
            format: LEXICON_FORMAT.into(),
            tokens: self.vocab.tokens.clone(),
            tags: self.inventory.tags.clone(),
            tag_counts: self.tag_counts.clone(),
        };
        serde_json::to_string(&file).expect("lexicon serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let file: LexiconFile = serde_json::from_str(text).map_err(|e| CorpusError::Lexicon(e.to_string()))?;
        if file.format != LEXICON_FORMAT {
            return Err(CorpusError::Lexicon(format!("unsupported format {:?}", file.format)));
        }
        Self::from_parts(file.tokens, file.tags, file.tag_counts)
    }

    /// Most frequent training tag of each token in `tokens`.
    pub fn tag(&self, tokens: &[usize]) -> Vec<usize> {
        tag_with_lexicon(&self.partition, &self.tag_counts, tokens)
    }

    /// Maps a tagged corpus onto ids. Out-of-vocabulary tokens become UNK with the
    /// special tag.
    pub fn encode(&self, corpus: &TaggedCorpus, policy: TagPolicy) -> Result<EncodedCorpus, CorpusError> {
        let mut out = EncodedCorpus::default();
        for (s, seq) in corpus.sequences().iter().enumerate() {
            let mut enc = EncodedSequence::default();
            for (t, tok) in seq.iter().enumerate() {
                let x = self.vocab.id(tok.surface());
                let rho = if Vocabulary::is_special(x) {
                    PosInventory::SPECIAL
                } else {
                    match self.inventory.get(tok.tag()) {
                        Some(p) if self.partition.contains(p, x) => p,
                        found => match policy {
                            TagPolicy::Coerce => {
                                out.coerced += 1;
                                self.tag(&[x])[0]
                            }
                            TagPolicy::Strict if found.is_none() => {
                                return Err(CorpusError::UnknownTag {
                                    sequence: s,
                                    position: t,
                                    tag: tok.tag().to_string(),
                                })
                            }
                            TagPolicy::Strict => {
                                return Err(CorpusError::GoldInconsistent {
                                    sequence: s,
                                    position: t,
                                    token: tok.surface().to_string(),
                                    tag: tok.tag().to_string(),
                                })
                            }
                        },
                    }
                };
                enc.tokens.push(x);
                enc.pos.push(rho);
            }
            out.sequences.push(enc);
        }
        Ok(out)
    }
}

/// Builds the vocabulary (frequency rank, lexicographic tie-break, at most
/// `max_vocab` entries including the four specials, tokens below `min_freq`
/// dropped to UNK), the POS inventory, and the partition.
pub fn build_lexicon(corpus: &TaggedCorpus, max_vocab: usize, min_freq: u64) -> Result<Lexicon, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    if max_vocab < 4 {
        return Err(CorpusError::Lexicon("max_vocab must be at least 4".into()));
    }
    let mut freq: HashMap<&str, u64> = HashMap::new();
    let mut pair_counts: HashMap<&str, BTreeMap<&str, u64>> = HashMap::new();
    for tok in corpus.sequences().iter().flatten() {
        if Vocabulary::SPECIALS.contains(&tok.surface()) {
            continue;
        }
        *freq.entry(tok.surface()).or_default() += 1;
        *pair_counts.entry(tok.surface()).or_default().entry(tok.tag()).or_default() += 1;
    }
    let mut ranked: Vec<(&str, u64)> = freq.into_iter().filter(|&(_, c)| c >= min_freq).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_vocab - 4);
    if ranked.is_empty() {
        return Err(CorpusError::EmptyAfterFiltering);
    }

    let observed: BTreeSet<&str> = ranked
        .iter()
        .flat_map(|(t, _)| pair_counts[t].keys().copied())
        .filter(|&tag| tag != PosInventory::SPECIAL_TAG)
        .collect();
    let mut tags = vec![PosInventory::SPECIAL_TAG.to_string()];
    tags.extend(observed.into_iter().map(str::to_string));
    let tag_id: HashMap<&str, usize> = tags.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();

    let mut tokens: Vec<String> = Vocabulary::SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut tag_counts: TagCounts = vec![vec![(PosInventory::SPECIAL, 0)]; 4];
    for (tok, _) in &ranked {
        tokens.push(tok.to_string());
        let mut counts: Vec<(usize, u64)> = pair_counts[tok].iter().map(|(tag, &c)| (tag_id[tag], c)).collect();
        counts.sort_unstable();
        tag_counts.push(counts);
    }
    Lexicon::from_parts(tokens, tags, tag_counts)
}

/// Tags each token with its most frequent training tag, ties toward the lower
/// POS id. Specials (including UNK) get the special tag.
pub fn tag_with_lexicon(partition: &PosPartition, tag_counts: &TagCounts, tokens: &[usize]) -> Vec<usize> {
    tokens
        .iter()
        .map(|&x| {
            if Vocabulary::is_special(x) || x >= partition.vocab_size() {
                return PosInventory::SPECIAL;
            }
            tag_counts[x]
                .iter()
                .fold(None, |best: Option<(usize, u64)>, &(p, c)| match best {
                    Some((_, bc)) if bc >= c => best,
                    _ => Some((p, c)),
                })
                .map_or(PosInventory::SPECIAL, |(p, _)| p)
        })
        .collect()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct GrammarFile {
    #[serde(default = "one_one")]
    sentences_per_sequence: (usize, usize),
    template: Vec<TemplateFile>,
    lexicon: BTreeMap<String, LexiconEntryFile>,
}

fn one_one() -> (usize, usize) {
    (1, 1)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    weight: f64,
    tags: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct LexiconEntryFile {
    #[serde(default)]
    tokens: Vec<(String, f64)>,
    generate: Option<GeneratedTokens>,
}

/// `count` tokens named `{prefix}{i}` with Zipfian weights `1 / (i + 1)^zipf`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratedTokens {
    prefix: String,
    count: usize,
    #[serde(default = "unit")]
    zipf: f64,
}

fn unit() -> f64 {
    1.0
}

/// Weighted tag templates plus per-tag weighted lexicons.
#[derive(Debug, Clone)]
pub struct SyntheticGrammar {
    templates: Vec<(Vec<String>, f64)>,
    lexicon: BTreeMap<String, Vec<(String, f64)>>,
    sentences_per_sequence: (usize, usize),
}

impl SyntheticGrammar {
    pub fn new(
        templates: Vec<(Vec<String>, f64)>,
        lexicon: BTreeMap<String, Vec<(String, f64)>>,
    ) -> Result<Self, CorpusError> {
        Self::with_sentences(templates, lexicon, (1, 1))
    }

    /// Each generated sequence concatenates a uniformly drawn number of
    /// sentences in `sentences_per_sequence` (inclusive bounds).
    pub fn with_sentences(
        templates: Vec<(Vec<String>, f64)>,
        lexicon: BTreeMap<String, Vec<(String, f64)>>,
        sentences_per_sequence: (usize, usize),
    ) -> Result<Self, CorpusError> {
        let bad = |m: String| Err(CorpusError::Grammar(m));
        if templates.is_empty() {
            return bad("no templates".into());
        }
        let (lo, hi) = sentences_per_sequence;
        if lo == 0 || hi < lo {
            return bad(format!("bad sentences_per_sequence range ({lo}, {hi})"));
        }
        for (tags, w) in &templates {
            if !(*w > 0.0 && w.is_finite()) {
                return bad(format!("template weight {w} is not positive"));
            }
            if tags.is_empty() {
                return bad("empty template".into());
            }
            for tag in tags {
                match lexicon.get(tag) {
                    Some(entries) if !entries.is_empty() => {}
                    _ => return bad(format!("tag {tag:?} has no lexicon entry")),
                }
            }
        }
        for (tag, entries) in &lexicon {
            for (tok, w) in entries {
                if !(*w > 0.0 && w.is_finite()) {
                    return bad(format!("weight {w} for {tok:?} under {tag:?} is not positive"));
                }
                TaggedToken::new(tok.clone(), tag.clone())?;
            }
        }
        Ok(Self {
            templates,
            lexicon,
            sentences_per_sequence,
        })
    }

    /// Parses the TOML grammar format.
    pub fn from_toml(text: &str) -> Result<Self, CorpusError> {
        let file: GrammarFile = toml::from_str(text).map_err(|e| CorpusError::Grammar(e.to_string()))?;
        let templates = file.template.into_iter().map(|t| (t.tags, t.weight)).collect();
        let mut lexicon = BTreeMap::new();
        for (tag, entry) in file.lexicon {
            let mut tokens = entry.tokens;
            if let Some(g) = entry.generate {
                tokens.extend((0..g.count).map(|i| (format!("{}{}", g.prefix, i), 1.0 / ((i + 1) as f64).powf(g.zipf))));
            }
            lexicon.insert(tag, tokens);
        }
        Self::with_sentences(templates, lexicon, file.sentences_per_sequence)
    }

    pub fn templates(&self) -> &[(Vec<String>, f64)] {
        &self.templates
    }

    pub fn lexicon(&self) -> &BTreeMap<String, Vec<(String, f64)>> {
        &self.lexicon
    }
}

/// The grammar shipped with the crate: twelve tags, roughly 1500 word types,
/// a handful of words ambiguous between tags, and optional adjectives.
pub const BUNDLED_GRAMMAR: &str = include_str!("../data/grammar.toml");

/// Deterministic in `seed`.
pub fn generate_synthetic_corpus(grammar: &SyntheticGrammar, n_sequences: usize, seed: u64) -> TaggedCorpus {
    assert!(n_sequences >= 1, "n_sequences must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template_pick =
        WeightedIndex::new(grammar.templates.iter().map(|(_, w)| *w)).expect("template weights validated");
    let pickers: BTreeMap<&str, WeightedIndex<f64>> = grammar
        .lexicon
        .iter()
        .map(|(tag, entries)| {
            let w = WeightedIndex::new(entries.iter().map(|(_, w)| *w)).expect("lexicon weights validated");
            (tag.as_str(), w)
        })
        .collect();
    let (lo, hi) = grammar.sentences_per_sequence;
    let mut sequences = Vec::with_capacity(n_sequences);
    for _ in 0..n_sequences {
        let sentences = if lo == hi {
            lo
        } else {
            rand::Rng::random_range(&mut rng, lo..=hi)
        };
        let mut seq = Vec::new();
        for _ in 0..sentences {
            let (tags, _) = &grammar.templates[template_pick.sample(&mut rng)];
            for tag in tags {
                let entries = &grammar.lexicon[tag];
                let (tok, _) = &entries[pickers[tag.as_str()].sample(&mut rng)];
                seq.push(TaggedToken {
                    surface: tok.clone(),
                    tag: tag.clone(),
                });
            }
        }
        sequences.push(seq);
    }
    TaggedCorpus { sequences }
}
