//! IOB2 dataset ingestion, validation, character-chunk tokenization with
//! word-start tracking, and the two synthetic labeling tasks (lookahead and
//! left-context) used by the experiments.
//!
//! Tag grammar: `O` or `[BI]-TYPE` with TYPE over `[A-Za-z0-9_]+`. Files use
//! the CoNLL column format, one `word<TAB or space>tag` pair per line with
//! blank-line sentence separators, so real corpora can be dropped in place
//! of the generators.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::MAX_LEN;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}:{col}: {msg}")]
    Parse {
        path: String,
        line: usize,
        col: usize,
        msg: String,
    },
    #[error("IOB2 violation at index {index}: {msg}")]
    Iob2 { index: usize, msg: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

// ── Tags ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tag {
    O,
    B(String),
    I(String),
}

fn valid_type_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl Tag {
    /// Parses against the grammar `^(O|[BI]-[A-Za-z0-9_]+)$`.
    pub fn parse(s: &str) -> Result<Tag, String> {
        if s == "O" {
            return Ok(Tag::O);
        }
        let (head, ty) = match (s.strip_prefix("B-"), s.strip_prefix("I-")) {
            (Some(ty), _) => ('B', ty),
            (_, Some(ty)) => ('I', ty),
            _ => return Err(format!("tag '{s}' does not match O or [BI]-TYPE")),
        };
        if !valid_type_name(ty) {
            return Err(format!("tag '{s}' has invalid type name '{ty}'"));
        }
        Ok(match head {
            'B' => Tag::B(ty.to_string()),
            _ => Tag::I(ty.to_string()),
        })
    }

    /// Span type for B-/I- tags, None for O.
    pub fn span_type(&self) -> Option<&str> {
        match self {
            Tag::O => None,
            Tag::B(t) | Tag::I(t) => Some(t),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::O => write!(f, "O"),
            Tag::B(t) => write!(f, "B-{t}"),
            Tag::I(t) => write!(f, "I-{t}"),
        }
    }
}

// ── Sequences and splits ───────────────────────────────────────────────

/// One sentence. `token_ids`, `word_start`, and `pad_flags` are empty until
/// a [`Tokenizer`] fills them; afterwards the word-start count equals the
/// word count and all three token-aligned vectors share one length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub words: Vec<String>,
    pub labels: Vec<Tag>,
    pub token_ids: Vec<usize>,
    pub word_start: Vec<bool>,
    pub pad_flags: Vec<bool>,
}

impl LabeledSequence {
    /// Validates alignment and strict IOB2; token fields start empty.
    pub fn new(words: Vec<String>, labels: Vec<Tag>) -> Result<LabeledSequence, DataError> {
        if words.len() != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} words but {} labels",
                words.len(),
                labels.len()
            )));
        }
        validate_iob2(&labels, ValidationMode::Strict)?;
        Ok(LabeledSequence {
            words,
            labels,
            token_ids: Vec::new(),
            word_start: Vec::new(),
            pad_flags: Vec::new(),
        })
    }

    /// Token-only sequence (no words or labels), e.g. for language-model
    /// corpora or timing batches. Every token counts as a word start.
    pub fn from_token_ids(token_ids: Vec<usize>) -> LabeledSequence {
        let n = token_ids.len();
        LabeledSequence {
            words: Vec::new(),
            labels: Vec::new(),
            token_ids,
            word_start: vec![true; n],
            pad_flags: vec![false; n],
        }
    }
}

/// Train/valid/test partition plus the ordered label vocabulary ("O" always
/// first) covering every tag that occurs in any split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<LabeledSequence>,
    pub valid: Vec<LabeledSequence>,
    pub test: Vec<LabeledSequence>,
    pub label_vocabulary: Vec<String>,
}

impl DatasetSplit {
    pub fn n_labels(&self) -> usize {
        self.label_vocabulary.len()
    }

    pub fn label_id(&self, tag: &Tag) -> Option<usize> {
        let s = tag.to_string();
        self.label_vocabulary.iter().position(|t| *t == s)
    }

    pub fn label_of(&self, id: usize) -> Result<Tag, DataError> {
        let s = self
            .label_vocabulary
            .get(id)
            .ok_or_else(|| DataError::Invalid(format!("label id {id} out of range")))?;
        Tag::parse(s).map_err(DataError::Invalid)
    }

    /// Longest tokenized sentence across all three parts (0 when empty or
    /// untokenized). Batches are padded to this length so position offsets
    /// stay comparable between batches.
    pub fn max_tokens(&self) -> usize {
        [&self.train, &self.valid, &self.test]
            .iter()
            .flat_map(|part| part.iter().map(|s| s.token_ids.len()))
            .max()
            .unwrap_or(0)
    }
}

fn collect_label_vocabulary(splits: [&[LabeledSequence]; 3]) -> Vec<String> {
    let mut set: BTreeSet<String> = BTreeSet::new();
    for split in splits {
        for seq in split {
            for tag in &seq.labels {
                set.insert(tag.to_string());
            }
        }
    }
    set.remove("O");
    let mut vocab = vec!["O".to_string()];
    vocab.extend(set);
    vocab
}

/// Companion JSON record for a materialized dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub sizes: SplitSizes,
    pub label_vocabulary: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl DatasetManifest {
    pub fn for_split(name: &str, split: &DatasetSplit, seed: u64) -> DatasetManifest {
        DatasetManifest {
            name: name.to_string(),
            sizes: SplitSizes {
                train: split.train.len(),
                valid: split.valid.len(),
                test: split.test.len(),
            },
            label_vocabulary: split.label_vocabulary.clone(),
            seed,
        }
    }
}

// ── CoNLL column format ────────────────────────────────────────────────

/// Parses CoNLL column text. `path` only labels error messages. Blank lines
/// separate sentences; runs of blank lines collapse to one separator.
pub fn parse_conll_str(text: &str, path: &str) -> Result<Vec<LabeledSequence>, DataError> {
    let mut sentences = Vec::new();
    let mut words: Vec<String> = Vec::new();
    let mut labels: Vec<Tag> = Vec::new();
    let mut flush = |words: &mut Vec<String>, labels: &mut Vec<Tag>| {
        if !words.is_empty() {
            sentences.push(LabeledSequence {
                words: std::mem::take(words),
                labels: std::mem::take(labels),
                token_ids: Vec::new(),
                word_start: Vec::new(),
                pad_flags: Vec::new(),
            });
        }
    };
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            flush(&mut words, &mut labels);
            continue;
        }
        let sep = line.find([' ', '\t']).ok_or_else(|| DataError::Parse {
            path: path.to_string(),
            line: line_no,
            col: line.len() + 1,
            msg: "expected 'word<TAB or space>tag'".to_string(),
        })?;
        if sep == 0 {
            return Err(DataError::Parse {
                path: path.to_string(),
                line: line_no,
                col: 1,
                msg: "empty word".to_string(),
            });
        }
        let word = &line[..sep];
        let tag_col = sep + 2; // 1-indexed first character after the separator
        let tag_str = &line[sep + 1..];
        if tag_str.is_empty() || tag_str.contains([' ', '\t']) {
            return Err(DataError::Parse {
                path: path.to_string(),
                line: line_no,
                col: tag_col,
                msg: format!("expected exactly one tag, got '{tag_str}'"),
            });
        }
        let tag = Tag::parse(tag_str).map_err(|msg| DataError::Parse {
            path: path.to_string(),
            line: line_no,
            col: tag_col,
            msg,
        })?;
        words.push(word.to_string());
        labels.push(tag);
    }
    flush(&mut words, &mut labels);
    Ok(sentences)
}

pub fn read_conll(path: &Path) -> Result<Vec<LabeledSequence>, DataError> {
    let text = std::fs::read_to_string(path)?;
    parse_conll_str(&text, &path.display().to_string())
}

pub fn write_conll_string(sentences: &[LabeledSequence]) -> String {
    let mut out = String::new();
    for (i, seq) in sentences.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (word, tag) in seq.words.iter().zip(&seq.labels) {
            out.push_str(word);
            out.push(' ');
            out.push_str(&tag.to_string());
            out.push('\n');
        }
    }
    out
}

pub fn write_conll(path: &Path, sentences: &[LabeledSequence]) -> Result<(), DataError> {
    std::fs::write(path, write_conll_string(sentences))?;
    Ok(())
}

// ── IOB2 validation and spans ──────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationMode {
    Strict,
    Repair,
}

/// Strict mode errors at the first I-X not preceded by B-X or I-X of the
/// same type; repair mode rewrites each such I-X to B-X (checking later
/// positions against the repaired prefix, so output is always strict-valid).
pub fn validate_iob2(tags: &[Tag], mode: ValidationMode) -> Result<Vec<Tag>, DataError> {
    let mut out: Vec<Tag> = Vec::with_capacity(tags.len());
    for (i, tag) in tags.iter().enumerate() {
        let fixed = match tag {
            Tag::I(ty) => {
                let ok = i > 0
                    && match &out[i - 1] {
                        Tag::B(p) | Tag::I(p) => p == ty,
                        Tag::O => false,
                    };
                if ok {
                    tag.clone()
                } else {
                    match mode {
                        ValidationMode::Strict => {
                            return Err(DataError::Iob2 {
                                index: i,
                                msg: format!("I-{ty} without preceding B-{ty} or I-{ty}"),
                            })
                        }
                        ValidationMode::Repair => Tag::B(ty.clone()),
                    }
                }
            }
            other => other.clone(),
        };
        out.push(fixed);
    }
    Ok(out)
}

/// Inclusive word-index span: (start, end, type).
pub type Span = (usize, usize, String);

/// Maximal `B-X (I-X)*` runs. Panics on invalid IOB2 (repair first when the
/// tags come from model predictions).
pub fn extract_spans(tags: &[Tag]) -> BTreeSet<Span> {
    validate_iob2(tags, ValidationMode::Strict)
        .unwrap_or_else(|e| panic!("extract_spans: {e} (run validate_iob2 first)"));
    let mut spans = BTreeSet::new();
    let mut i = 0;
    while i < tags.len() {
        if let Tag::B(ty) = &tags[i] {
            let mut end = i;
            while end + 1 < tags.len() && tags[end + 1] == Tag::I(ty.clone()) {
                end += 1;
            }
            spans.insert((i, end, ty.clone()));
            i = end + 1;
        } else {
            i += 1;
        }
    }
    spans
}

/// Inverse of [`extract_spans`] for non-overlapping spans on a sequence of
/// `len` words.
pub fn tags_from_spans(spans: &BTreeSet<Span>, len: usize) -> Result<Vec<Tag>, DataError> {
    let mut tags = vec![Tag::O; len];
    let mut used = vec![false; len];
    for (start, end, ty) in spans {
        if start > end || *end >= len {
            return Err(DataError::Invalid(format!(
                "span ({start}, {end}, {ty}) out of range for length {len}"
            )));
        }
        for (offset, slot) in used[*start..=*end].iter_mut().enumerate() {
            if *slot {
                return Err(DataError::Invalid(format!(
                    "span ({start}, {end}, {ty}) overlaps at {}",
                    start + offset
                )));
            }
            *slot = true;
        }
        tags[*start] = Tag::B(ty.clone());
        for t in tags[*start + 1..=*end].iter_mut() {
            *t = Tag::I(ty.clone());
        }
    }
    Ok(tags)
}

// ── Tokenizer ──────────────────────────────────────────────────────────

/// Subword vocabulary over fixed-length character chunks. Id 0 is PAD,
/// id 1 is UNK; both are reserved and never produced by chunking.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: BTreeMap<String, usize>,
}

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

fn chunk_word(word: &str, chunk: usize) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .chunks(chunk)
        .map(|c| c.iter().collect::<String>())
        .collect()
}

impl Vocab {
    /// Builds from a training corpus: every chunk that occurs, sorted, after
    /// the two reserved ids.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>, chunk: usize) -> Vocab {
        assert!(chunk >= 1, "Vocab::build: chunk must be >= 1");
        let mut set = BTreeSet::new();
        for word in words {
            for piece in chunk_word(word, chunk) {
                set.insert(piece);
            }
        }
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(set);
        Vocab::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, ids }
    }

    /// Rebuilds the id map after deserialization (the map is not stored).
    pub fn rehydrate(&mut self) {
        self.ids = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Tokenizer {
    pub vocab: Vocab,
    pub chunk: usize,
}

impl Tokenizer {
    pub fn new(vocab: Vocab, chunk: usize) -> Tokenizer {
        assert!(chunk >= 1, "Tokenizer: chunk must be >= 1");
        Tokenizer { vocab, chunk }
    }

    /// Splits each word into character chunks (last chunk may be shorter),
    /// maps chunks to ids (unknown → UNK), and flags each word's first
    /// chunk. Errors on an empty word list or when the token budget of
    /// [`MAX_LEN`] is exceeded.
    pub fn tokenize(&self, words: &[String]) -> Result<(Vec<usize>, Vec<bool>), DataError> {
        if words.is_empty() {
            return Err(DataError::Invalid("tokenize: empty word list".to_string()));
        }
        let mut ids = Vec::new();
        let mut starts = Vec::new();
        for word in words {
            if word.is_empty() {
                return Err(DataError::Invalid("tokenize: empty word".to_string()));
            }
            for (i, piece) in chunk_word(word, self.chunk).into_iter().enumerate() {
                ids.push(self.vocab.id(&piece));
                starts.push(i == 0);
            }
        }
        if ids.len() > MAX_LEN {
            return Err(DataError::Invalid(format!(
                "tokenize: {} tokens exceed the maximum of {MAX_LEN}",
                ids.len()
            )));
        }
        Ok((ids, starts))
    }

    /// Fills the token fields of a sequence in place.
    pub fn apply(&self, seq: &mut LabeledSequence) -> Result<(), DataError> {
        let (ids, starts) = self.tokenize(&seq.words)?;
        seq.pad_flags = vec![false; ids.len()];
        seq.token_ids = ids;
        seq.word_start = starts;
        Ok(())
    }
}

// ── Synthetic tasks ────────────────────────────────────────────────────

/// Generative process shared by the task generators and the chance oracle:
/// sentence length uniform in `min_words..=max_words`; each position is the
/// trigger word "!" with probability `trigger_prob`, otherwise a uniform
/// content word of 2 or 3 lowercase letters drawn from the 20-letter
/// alphabet 'a'..='t'.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub trigger_prob: f64,
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for TaskParams {
    fn default() -> TaskParams {
        TaskParams {
            trigger_prob: 0.15,
            min_words: 8,
            max_words: 24,
        }
    }
}

pub const TRIGGER_WORD: &str = "!";
const ALPHABET: [char; 20] = [
    'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j', 'k', 'l', 'm', 'n', 'o', 'p', 'q', 'r',
    's', 't',
];

fn sample_content_word(rng: &mut impl Rng) -> String {
    let len = if rng.gen_bool(0.5) { 2 } else { 3 };
    (0..len).map(|_| ALPHABET[rng.gen_range(0..20)]).collect()
}

/// One sentence of words from the shared generative process.
pub fn sample_words(params: &TaskParams, rng: &mut impl Rng) -> Vec<String> {
    let len = rng.gen_range(params.min_words..=params.max_words);
    (0..len)
        .map(|_| {
            if rng.gen_bool(params.trigger_prob) {
                TRIGGER_WORD.to_string()
            } else {
                sample_content_word(rng)
            }
        })
        .collect()
}

/// Lookahead rule: a word is B-NXT iff the immediately following word is
/// the trigger. The final word has no follower and is always O.
pub fn lookahead_labels(words: &[String]) -> Vec<Tag> {
    (0..words.len())
        .map(|i| {
            if i + 1 < words.len() && words[i + 1] == TRIGGER_WORD {
                Tag::B("NXT".to_string())
            } else {
                Tag::O
            }
        })
        .collect()
}

/// Left-context rule: a word is B-PRV iff the immediately preceding word is
/// the trigger. The first word has no predecessor and is always O.
pub fn leftcontext_labels(words: &[String]) -> Vec<Tag> {
    (0..words.len())
        .map(|i| {
            if i > 0 && words[i - 1] == TRIGGER_WORD {
                Tag::B("PRV".to_string())
            } else {
                Tag::O
            }
        })
        .collect()
}

/// A generated dataset plus the tokenizer built from its training split.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub split: DatasetSplit,
    pub tokenizer: Tokenizer,
}

pub const DEFAULT_CHUNK: usize = 2;

fn gen_task(
    n_sentences: usize,
    seed: u64,
    params: &TaskParams,
    label_rule: fn(&[String]) -> Vec<Tag>,
) -> Result<TaskData, DataError> {
    if n_sentences < 100 {
        return Err(DataError::Invalid(format!(
            "need at least 100 sentences, got {n_sentences}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<String> = HashSet::new();
    let mut sentences: Vec<LabeledSequence> = Vec::with_capacity(n_sentences);
    let max_attempts = n_sentences.saturating_mul(100);
    let mut attempts = 0usize;
    while sentences.len() < n_sentences {
        attempts += 1;
        if attempts > max_attempts {
            return Err(DataError::Invalid(
                "could not generate enough distinct sentences".to_string(),
            ));
        }
        let words = sample_words(params, &mut rng);
        let key = words.join(" ");
        if !seen.insert(key) {
            continue; // duplicates would break split disjointness
        }
        let labels = label_rule(&words);
        sentences.push(LabeledSequence {
            words,
            labels,
            token_ids: Vec::new(),
            word_start: Vec::new(),
            pad_flags: Vec::new(),
        });
    }
    let n_train = n_sentences * 7 / 10;
    let n_valid = n_sentences / 10;
    let test = sentences.split_off(n_train + n_valid);
    let valid = sentences.split_off(n_train);
    let train = sentences;
    let tokenizer = Tokenizer::new(
        Vocab::build(
            train.iter().flat_map(|s| s.words.iter().map(String::as_str)),
            DEFAULT_CHUNK,
        ),
        DEFAULT_CHUNK,
    );
    let label_vocabulary = collect_label_vocabulary([&train, &valid, &test]);
    let mut split = DatasetSplit {
        train,
        valid,
        test,
        label_vocabulary,
    };
    for seq in split
        .train
        .iter_mut()
        .chain(split.valid.iter_mut())
        .chain(split.test.iter_mut())
    {
        tokenizer.apply(seq)?;
    }
    Ok(TaskData { split, tokenizer })
}

/// Synthetic task whose labels depend on the NEXT word; unsolvable for a
/// purely causal decoder beyond the base-rate ceiling.
pub fn gen_lookahead_task(n_sentences: usize, seed: u64) -> Result<TaskData, DataError> {
    gen_task(n_sentences, seed, &TaskParams::default(), lookahead_labels)
}

/// Control task whose labels depend on the PREVIOUS word; fully solvable
/// under causal masking.
pub fn gen_leftcontext_task(n_sentences: usize, seed: u64) -> Result<TaskData, DataError> {
    gen_task(
        n_sentences,
        seed,
        &TaskParams::default(),
        leftcontext_labels,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tag(s: &str) -> Tag {
        Tag::parse(s).unwrap()
    }

    fn tags(list: &[&str]) -> Vec<Tag> {
        list.iter().map(|s| tag(s)).collect()
    }

    #[test]
    fn parse_single_word_sentence() {
        let got = parse_conll_str("John B-PER\n\n", "mem").unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].words, vec!["John"]);
        assert_eq!(got[0].labels, vec![Tag::B("PER".to_string())]);
    }

    #[test]
    fn blank_lines_collapse_to_one_separator() {
        let text = "a O\n\n\n\nb O\n";
        let got = parse_conll_str(text, "mem").unwrap();
        assert_eq!(got.len(), 2);
        // round trip: writer emits the canonical single separator, and
        // re-reading reproduces the same sentences
        let canonical = write_conll_string(&got);
        assert_eq!(canonical, "a O\n\nb O\n");
        let again = parse_conll_str(&canonical, "mem").unwrap();
        assert_eq!(got, again);
    }

    #[test]
    fn bad_tag_reports_line_and_column() {
        let text = "a O\nb X-PER\n";
        match parse_conll_str(text, "f.conll") {
            Err(DataError::Parse { line, col, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(col, 3);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_tag_and_extra_field_rejected() {
        assert!(matches!(
            parse_conll_str("loneword\n", "m"),
            Err(DataError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_conll_str("a B-PER extra\n", "m"),
            Err(DataError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn empty_file_is_empty_list() {
        assert!(parse_conll_str("", "m").unwrap().is_empty());
        assert!(parse_conll_str("\n\n\n", "m").unwrap().is_empty());
    }

    #[test]
    fn tab_separator_accepted() {
        let got = parse_conll_str("a\tB-X\n", "m").unwrap();
        assert_eq!(got[0].labels, vec![Tag::B("X".to_string())]);
    }

    #[test]
    fn strict_validation_examples() {
        let ok = tags(&["B-PER", "I-PER", "O"]);
        assert_eq!(validate_iob2(&ok, ValidationMode::Strict).unwrap(), ok);
        match validate_iob2(&tags(&["O", "I-PER"]), ValidationMode::Strict) {
            Err(DataError::Iob2 { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected violation at index 1, got {other:?}"),
        }
        // type switch without a fresh B is also a violation
        assert!(validate_iob2(&tags(&["B-A", "I-B"]), ValidationMode::Strict).is_err());
    }

    #[test]
    fn repair_examples() {
        assert_eq!(
            validate_iob2(&tags(&["O", "I-PER"]), ValidationMode::Repair).unwrap(),
            tags(&["O", "B-PER"])
        );
        // repaired prefix keeps the run alive for later I tags
        assert_eq!(
            validate_iob2(&tags(&["I-A", "I-A", "I-A"]), ValidationMode::Repair).unwrap(),
            tags(&["B-A", "I-A", "I-A"])
        );
        assert_eq!(
            validate_iob2(&tags(&["B-A", "I-B"]), ValidationMode::Repair).unwrap(),
            tags(&["B-A", "B-B"])
        );
    }

    #[test]
    fn span_extraction_examples() {
        let got = extract_spans(&tags(&["B-PER", "I-PER", "O", "B-LOC"]));
        let want: BTreeSet<Span> = [(0, 1, "PER".to_string()), (3, 3, "LOC".to_string())]
            .into_iter()
            .collect();
        assert_eq!(got, want);
        assert!(extract_spans(&tags(&["O", "O", "O"])).is_empty());
        let adjacent = extract_spans(&tags(&["B-A", "B-A"]));
        let want: BTreeSet<Span> = [(0, 0, "A".to_string()), (1, 1, "A".to_string())]
            .into_iter()
            .collect();
        assert_eq!(adjacent, want);
    }

    #[test]
    #[should_panic(expected = "extract_spans")]
    fn span_extraction_rejects_invalid_iob2() {
        extract_spans(&tags(&["O", "I-PER"]));
    }

    /// Independent oracle: (s, e, ty) is a span iff tags[s] == B-ty, all of
    /// tags[s+1..=e] are I-ty, and the run is maximal on both sides.
    fn brute_force_spans(tags: &[Tag]) -> BTreeSet<Span> {
        let n = tags.len();
        let mut out = BTreeSet::new();
        for s in 0..n {
            let Tag::B(ty) = &tags[s] else { continue };
            for e in s..n {
                let body_ok = (s + 1..=e).all(|j| tags[j] == Tag::I(ty.clone()));
                let maximal = e + 1 >= n || tags[e + 1] != Tag::I(ty.clone());
                if body_ok && maximal {
                    out.insert((s, e, ty.clone()));
                    break;
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn spans_match_brute_force(cmds in proptest::collection::vec((0..4u8, 0..3usize, 0..3usize), 0..30)) {
            // build a valid IOB2 sequence from span commands
            let types = ["PER", "LOC", "X_1"];
            let mut t: Vec<Tag> = Vec::new();
            for (op, ty, ilen) in cmds {
                if op == 0 {
                    t.push(Tag::O);
                } else {
                    t.push(Tag::B(types[ty].to_string()));
                    for _ in 0..ilen {
                        t.push(Tag::I(types[ty].to_string()));
                    }
                }
            }
            prop_assert_eq!(extract_spans(&t), brute_force_spans(&t));
        }

        #[test]
        fn repair_output_is_strict_valid(raw in proptest::collection::vec(0..5u8, 0..40)) {
            let pool = ["O", "B-A", "I-A", "B-B", "I-B"];
            let t: Vec<Tag> = raw.iter().map(|i| tag(pool[*i as usize])).collect();
            let repaired = validate_iob2(&t, ValidationMode::Repair).unwrap();
            prop_assert!(validate_iob2(&repaired, ValidationMode::Strict).is_ok());
            // repair never touches O or B tags and never changes span types
            for (a, b) in t.iter().zip(&repaired) {
                match a {
                    Tag::I(ty) => prop_assert!(b == a || *b == Tag::B(ty.clone())),
                    other => prop_assert_eq!(other, b),
                }
            }
        }

        #[test]
        fn spans_tags_roundtrip(gaps in proptest::collection::vec((0..4usize, 0..3usize, 0..3usize), 0..10), tail in 0..3usize) {
            let types = ["A", "B", "C"];
            let mut spans: BTreeSet<Span> = BTreeSet::new();
            let mut pos = 0usize;
            for (gap, len, ty) in gaps {
                pos += gap;
                spans.insert((pos, pos + len, types[ty].to_string()));
                // +1 keeps a following same-type span from merging into this run
                pos += len + 1;
            }
            let len = pos + tail;
            if len == 0 { return Ok(()); }
            let t = tags_from_spans(&spans, len).unwrap();
            prop_assert_eq!(extract_spans(&t), spans);
        }

        #[test]
        fn conll_roundtrip(n in 1..4usize, seed in 0..5000u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut sentences = Vec::new();
            for _ in 0..n {
                let words = sample_words(&TaskParams::default(), &mut rng);
                let labels = lookahead_labels(&words);
                sentences.push(LabeledSequence::new(words, labels).unwrap());
            }
            let text = write_conll_string(&sentences);
            let back = parse_conll_str(&text, "m").unwrap();
            prop_assert_eq!(&sentences, &back);
            // byte-exact second pass: write(read(write(x))) == write(x)
            prop_assert_eq!(write_conll_string(&back), text);
        }
    }

    #[test]
    fn tags_from_spans_rejects_overlap_and_oob() {
        let mut spans: BTreeSet<Span> = BTreeSet::new();
        spans.insert((0, 2, "A".to_string()));
        spans.insert((2, 3, "B".to_string()));
        assert!(tags_from_spans(&spans, 6).is_err());
        let mut oob: BTreeSet<Span> = BTreeSet::new();
        oob.insert((4, 9, "A".to_string()));
        assert!(tags_from_spans(&oob, 6).is_err());
    }

    #[test]
    fn tokenizer_chunking_and_word_start() {
        let vocab = Vocab::build(["abcd", "ef", "g"], 2);
        let tok = Tokenizer::new(vocab, 2);
        let (ids, starts) = tok.tokenize(&["abcd".to_string()]).unwrap();
        assert_eq!(ids.len(), 2);
        assert_eq!(starts, vec![true, false]);
        // odd length: last chunk is the single trailing character
        let (ids, starts) = tok
            .tokenize(&["abcd".to_string(), "efg".to_string()])
            .unwrap();
        assert_eq!(starts, vec![true, false, true, false]);
        assert!(ids.iter().all(|&i| i >= 2), "reserved ids leaked: {ids:?}");
    }

    #[test]
    fn tokenizer_degenerate_large_chunk() {
        let vocab = Vocab::build(["abcd", "ef"], 64);
        let tok = Tokenizer::new(vocab, 64);
        let words = vec!["abcd".to_string(), "ef".to_string()];
        let (ids, starts) = tok.tokenize(&words).unwrap();
        assert_eq!(ids.len(), words.len());
        assert!(starts.iter().all(|&s| s));
    }

    #[test]
    fn tokenizer_unknown_maps_to_unk() {
        let vocab = Vocab::build(["aa"], 2);
        let tok = Tokenizer::new(vocab, 2);
        let (ids, _) = tok.tokenize(&["zz".to_string()]).unwrap();
        assert_eq!(ids, vec![UNK_ID]);
    }

    #[test]
    fn tokenizer_rejects_empty_and_oversize() {
        let vocab = Vocab::build(["aa"], 1);
        let tok = Tokenizer::new(vocab, 1);
        assert!(tok.tokenize(&[]).is_err());
        let long = "a".repeat(MAX_LEN + 1);
        assert!(tok.tokenize(&[long]).is_err());
    }

    #[test]
    fn word_start_count_invariant_after_apply() {
        let td = gen_lookahead_task(100, 7).unwrap();
        for seq in td.split.train.iter().chain(&td.split.valid).chain(&td.split.test) {
            let starts = seq.word_start.iter().filter(|&&b| b).count();
            assert_eq!(starts, seq.words.len());
            assert_eq!(seq.token_ids.len(), seq.word_start.len());
            assert_eq!(seq.token_ids.len(), seq.pad_flags.len());
            assert!(seq.pad_flags.iter().all(|&b| !b));
        }
    }

    #[test]
    fn lookahead_rule_examples() {
        let words: Vec<String> = ["a", "!", "b"].iter().map(|s| s.to_string()).collect();
        assert_eq!(lookahead_labels(&words), tags(&["B-NXT", "O", "O"]));
        let quiet: Vec<String> = ["aa", "bb", "cc"].iter().map(|s| s.to_string()).collect();
        assert!(lookahead_labels(&quiet).iter().all(|t| *t == Tag::O));
        // final word is O even when a trigger sits elsewhere
        let tail: Vec<String> = ["!", "aa"].iter().map(|s| s.to_string()).collect();
        assert_eq!(lookahead_labels(&tail), tags(&["O", "O"]));
    }

    #[test]
    fn leftcontext_rule_examples() {
        let words: Vec<String> = ["!", "a"].iter().map(|s| s.to_string()).collect();
        assert_eq!(leftcontext_labels(&words), tags(&["O", "B-PRV"]));
        let quiet: Vec<String> = ["aa", "bb"].iter().map(|s| s.to_string()).collect();
        assert!(leftcontext_labels(&quiet).iter().all(|t| *t == Tag::O));
    }

    #[test]
    fn generator_sizes_and_vocabulary() {
        let td = gen_lookahead_task(1000, 42).unwrap();
        assert_eq!(td.split.train.len(), 700);
        assert_eq!(td.split.valid.len(), 100);
        assert_eq!(td.split.test.len(), 200);
        assert_eq!(td.split.label_vocabulary, vec!["O", "B-NXT"]);
        assert_eq!(td.split.label_id(&Tag::O), Some(0));
        let lc = gen_leftcontext_task(100, 42).unwrap();
        assert_eq!(lc.split.label_vocabulary, vec!["O", "B-PRV"]);
    }

    #[test]
    fn generator_rejects_small_n() {
        assert!(gen_lookahead_task(99, 1).is_err());
    }

    #[test]
    fn generator_deterministic_and_disjoint() {
        let a = gen_lookahead_task(300, 11).unwrap();
        let b = gen_lookahead_task(300, 11).unwrap();
        assert_eq!(a.split.train, b.split.train);
        assert_eq!(a.split.valid, b.split.valid);
        assert_eq!(a.split.test, b.split.test);
        assert_eq!(a.tokenizer, b.tokenizer);
        let c = gen_lookahead_task(300, 12).unwrap();
        assert_ne!(a.split.train, c.split.train, "seed must matter");
        let key = |s: &LabeledSequence| s.words.join(" ");
        let train: HashSet<String> = a.split.train.iter().map(key).collect();
        let valid: HashSet<String> = a.split.valid.iter().map(key).collect();
        let test: HashSet<String> = a.split.test.iter().map(key).collect();
        assert!(train.is_disjoint(&valid));
        assert!(train.is_disjoint(&test));
        assert!(valid.is_disjoint(&test));
    }

    #[test]
    fn generated_labels_follow_rule_and_lengths_in_range() {
        let td = gen_lookahead_task(200, 3).unwrap();
        let p = TaskParams::default();
        for seq in td.split.train.iter().chain(&td.split.valid).chain(&td.split.test) {
            assert!(seq.words.len() >= p.min_words && seq.words.len() <= p.max_words);
            assert_eq!(seq.labels, lookahead_labels(&seq.words));
            assert_eq!(*seq.labels.last().unwrap(), Tag::O);
        }
        let lc = gen_leftcontext_task(200, 3).unwrap();
        for seq in &lc.split.train {
            assert_eq!(seq.labels, leftcontext_labels(&seq.words));
            assert_eq!(seq.labels[0], Tag::O);
        }
    }

    #[test]
    fn trigger_rate_near_nominal() {
        let td = gen_lookahead_task(2000, 5).unwrap();
        let mut triggers = 0usize;
        let mut total = 0usize;
        for seq in &td.split.train {
            triggers += seq.words.iter().filter(|w| *w == TRIGGER_WORD).count();
            total += seq.words.len();
        }
        let rate = triggers as f64 / total as f64;
        assert!((rate - 0.15).abs() < 0.01, "trigger rate {rate}");
    }

    #[test]
    fn vocab_rehydrates_after_json() {
        let vocab = Vocab::build(["abc", "de"], 2);
        let json = serde_json::to_string(&vocab).unwrap();
        let mut back: Vocab = serde_json::from_str(&json).unwrap();
        back.rehydrate();
        assert_eq!(vocab, back);
        assert_eq!(back.id("ab"), vocab.id("ab"));
        assert_eq!(back.id("zz"), UNK_ID);
    }

    #[test]
    fn manifest_roundtrip() {
        let td = gen_lookahead_task(100, 9).unwrap();
        let m = DatasetManifest::for_split("lookahead", &td.split, 9);
        let json = serde_json::to_string(&m).unwrap();
        let back: DatasetManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(m, back);
        assert_eq!(back.sizes.train, 70);
    }
}
