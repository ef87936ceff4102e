//! Byte-level byte-pair encoding.
//!
//! The base alphabet is the 256 single bytes, so encoding is total over any
//! UTF-8 input. Learned tokens follow in merge order and the four prompt
//! markers occupy the highest ids:
//!
//! ```text
//! [0, 256)            single bytes
//! [256, 256 + M)      merge results, in rank order
//! 256 + M .. + 4      <|endoftext|> <|question|> <|text|> <|answer|>
//! ```
//!
//! Text is first cut into chunks by [`pre_split`] (a leading space binds to
//! the following run of letters, digits or punctuation), and merges never
//! cross a chunk boundary. A quote character is punctuation, so `" Business "`
//! always tokenizes with the quotes isolated from the word.
//!
//! Merges are applied lowest rank first. A pair of adjacent symbols merges
//! when their concatenation is a learned token; because learned tokens are
//! unique strings this is the usual rank-ordered merge loop, and it means the
//! merge list and the token table each determine encoding on their own.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const ENDOFTEXT: &str = "<|endoftext|>";
pub const QUESTION: &str = "<|question|>";
pub const TEXT: &str = "<|text|>";
pub const ANSWER: &str = "<|answer|>";

pub const BYTE_TOKENS: usize = 256;
pub const SPECIAL_TOKENS: usize = 4;
/// Smallest legal vocabulary: the byte alphabet plus the prompt markers.
pub const MIN_VOCAB_SIZE: usize = BYTE_TOKENS + SPECIAL_TOKENS;
pub const DEFAULT_VOCAB_SIZE: usize = 8192;

pub const MERGES_FILE: &str = "merges.txt";
pub const VOCAB_FILE: &str = "vocab.json";

/// The reserved prompt tokens, in id order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Special {
    EndOfText,
    Question,
    Text,
    Answer,
}

impl Special {
    pub const ALL: [Special; 4] = [
        Special::EndOfText,
        Special::Question,
        Special::Text,
        Special::Answer,
    ];

    pub fn marker(self) -> &'static str {
        match self {
            Special::EndOfText => ENDOFTEXT,
            Special::Question => QUESTION,
            Special::Text => TEXT,
            Special::Answer => ANSWER,
        }
    }

    fn offset(self) -> u32 {
        match self {
            Special::EndOfText => 0,
            Special::Question => 1,
            Special::Text => 2,
            Special::Answer => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    /// Byte strings of all non-special tokens, indexed by id.
    tokens: Vec<Vec<u8>>,
    ids: HashMap<Vec<u8>, u32>,
    merges: Vec<(u32, u32)>,
}

impl Vocabulary {
    /// The zero-merge vocabulary: 256 bytes plus the four markers.
    pub fn byte_level() -> Self {
        let tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            tokens,
            ids,
            merges: Vec::new(),
        }
    }

    /// Rebuilds a vocabulary from an ordered merge list.
    pub fn from_merges(merges: &[(u32, u32)]) -> Result<Self> {
        let mut vocab = Vocabulary::byte_level();
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let next = vocab.tokens.len() as u32;
            if a >= next || b >= next {
                return Err(Error::VocabFormat(format!(
                    "merge {rank} references an id not yet defined"
                )));
            }
            let mut joined = vocab.tokens[a as usize].clone();
            joined.extend_from_slice(&vocab.tokens[b as usize]);
            if vocab.ids.contains_key(&joined) {
                return Err(Error::VocabFormat(format!(
                    "merge {rank} produces a duplicate token"
                )));
            }
            vocab.push_merge(a, b, joined);
        }
        Ok(vocab)
    }

    fn push_merge(&mut self, a: u32, b: u32, joined: Vec<u8>) -> u32 {
        let id = self.tokens.len() as u32;
        self.ids.insert(joined.clone(), id);
        self.tokens.push(joined);
        self.merges.push((a, b));
        id
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len() + SPECIAL_TOKENS
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn special_id(&self, special: Special) -> u32 {
        self.tokens.len() as u32 + special.offset()
    }

    pub fn eot_id(&self) -> u32 {
        self.special_id(Special::EndOfText)
    }

    pub fn is_special(&self, id: u32) -> bool {
        let first = self.tokens.len() as u32;
        id >= first && id < first + SPECIAL_TOKENS as u32
    }

    pub fn special_of(&self, id: u32) -> Option<Special> {
        let first = self.tokens.len() as u32;
        Special::ALL
            .into_iter()
            .find(|s| first + s.offset() == id)
    }

    /// Raw bytes of a non-special token.
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn token_id(&self, bytes: &[u8]) -> Option<u32> {
        self.ids.get(bytes).copied()
    }

    /// Printable form of a token: the marker for specials, otherwise the
    /// byte-to-unicode rendering used in the vocabulary files.
    pub fn token_display(&self, id: u32) -> Option<String> {
        if let Some(s) = self.special_of(id) {
            return Some(s.marker().to_string());
        }
        self.token_bytes(id).map(bytes_to_printable)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        let mut scratch = Vec::new();
        for chunk in pre_split(text) {
            self.encode_chunk(chunk.as_bytes(), &mut scratch, &mut out);
        }
        out
    }

    fn encode_chunk(&self, bytes: &[u8], scratch: &mut Vec<u8>, out: &mut Vec<u32>) {
        let mut symbols: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
        if self.merges.is_empty() {
            out.extend(symbols);
            return;
        }
        loop {
            let mut best: Option<(usize, u32)> = None;
            for i in 0..symbols.len().saturating_sub(1) {
                scratch.clear();
                scratch.extend_from_slice(&self.tokens[symbols[i] as usize]);
                scratch.extend_from_slice(&self.tokens[symbols[i + 1] as usize]);
                if let Some(&id) = self.ids.get(scratch.as_slice()) {
                    if best.map_or(true, |(_, b)| id < b) {
                        best = Some((i, id));
                    }
                }
            }
            match best {
                Some((i, id)) => {
                    symbols[i] = id;
                    symbols.remove(i + 1);
                }
                None => break,
            }
        }
        out.extend(symbols);
    }

    /// Concatenated bytes of a token sequence. Specials are dropped unless
    /// `render_specials` is set, in which case their marker text is emitted.
    pub fn decode_bytes(&self, ids: &[u32], render_specials: bool) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for (position, &id) in ids.iter().enumerate() {
            if let Some(bytes) = self.token_bytes(id) {
                out.extend_from_slice(bytes);
            } else if let Some(s) = self.special_of(id) {
                if render_specials {
                    out.extend_from_slice(s.marker().as_bytes());
                }
            } else {
                return Err(Error::TokenOutOfRange {
                    id,
                    position,
                    vocab_size: self.vocab_size(),
                });
            }
        }
        Ok(out)
    }

    /// Invalid UTF-8 (possible in sampled output) is replaced lossily.
    pub fn decode(&self, ids: &[u32], render_specials: bool) -> Result<String> {
        let bytes = self.decode_bytes(ids, render_specials)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    pub fn merges_text(&self) -> String {
        let mut out = String::new();
        for &(a, b) in &self.merges {
            out.push_str(&bytes_to_printable(&self.tokens[a as usize]));
            out.push(' ');
            out.push_str(&bytes_to_printable(&self.tokens[b as usize]));
            out.push('\n');
        }
        out
    }

    pub fn from_merges_text(text: &str) -> Result<Self> {
        let mut vocab = Vocabulary::byte_level();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (left, right) = line.split_once(' ').ok_or_else(|| {
                Error::VocabFormat(format!("merges line {} has no separator", lineno + 1))
            })?;
            let lookup = |s: &str| -> Result<u32> {
                let bytes = printable_to_bytes(s).ok_or_else(|| {
                    Error::VocabFormat(format!("merges line {}: bad symbol {s:?}", lineno + 1))
                })?;
                vocab.token_id(&bytes).ok_or_else(|| {
                    Error::VocabFormat(format!("merges line {}: unknown symbol {s:?}", lineno + 1))
                })
            };
            let (a, b) = (lookup(left)?, lookup(right)?);
            let mut joined = vocab.tokens[a as usize].clone();
            joined.extend_from_slice(&vocab.tokens[b as usize]);
            if vocab.ids.contains_key(&joined) {
                return Err(Error::VocabFormat(format!(
                    "merges line {} produces a duplicate token",
                    lineno + 1
                )));
            }
            vocab.push_merge(a, b, joined);
        }
        Ok(vocab)
    }

    pub fn vocab_json(&self) -> Value {
        let mut map = Map::new();
        for (id, bytes) in self.tokens.iter().enumerate() {
            map.insert(bytes_to_printable(bytes), Value::from(id as u64));
        }
        for s in Special::ALL {
            map.insert(s.marker().to_string(), Value::from(self.special_id(s) as u64));
        }
        Value::Object(map)
    }

    /// Rebuilds the vocabulary from a token→id table alone. Each learned
    /// token is split into two earlier tokens to recover a merge rule; the
    /// split chosen does not affect encoding.
    pub fn from_vocab_json(value: &Value) -> Result<Self> {
        let map = value
            .as_object()
            .ok_or_else(|| Error::VocabFormat("expected a JSON object".into()))?;
        let total = map.len();
        if total < MIN_VOCAB_SIZE {
            return Err(Error::VocabFormat(format!("only {total} entries")));
        }
        let mut by_id: Vec<Option<&str>> = vec![None; total];
        for (token, id) in map {
            let id = id
                .as_u64()
                .filter(|&i| (i as usize) < total)
                .ok_or_else(|| Error::VocabFormat(format!("bad id for {token:?}")))?;
            if by_id[id as usize].replace(token.as_str()).is_some() {
                return Err(Error::VocabFormat(format!("id {id} assigned twice")));
            }
        }
        let learned_end = total - SPECIAL_TOKENS;
        for (k, s) in Special::ALL.iter().enumerate() {
            if by_id[learned_end + k] != Some(s.marker()) {
                return Err(Error::VocabFormat(format!(
                    "expected {} at id {}",
                    s.marker(),
                    learned_end + k
                )));
            }
        }
        let mut vocab = Vocabulary::byte_level();
        for (id, token) in by_id.iter().enumerate().take(learned_end) {
            let token = token.ok_or_else(|| Error::VocabFormat(format!("id {id} missing")))?;
            let bytes = printable_to_bytes(token)
                .ok_or_else(|| Error::VocabFormat(format!("bad token {token:?}")))?;
            if id < BYTE_TOKENS {
                if bytes != [id as u8] {
                    return Err(Error::VocabFormat(format!("id {id} is not byte {id}")));
                }
                continue;
            }
            if vocab.ids.contains_key(&bytes) {
                return Err(Error::VocabFormat(format!("duplicate token {token:?}")));
            }
            let split = (1..bytes.len()).find_map(|j| {
                let a = vocab.token_id(&bytes[..j])?;
                let b = vocab.token_id(&bytes[j..])?;
                Some((a, b))
            });
            let (a, b) = split.ok_or_else(|| {
                Error::VocabFormat(format!("token {token:?} is not a pair of earlier tokens"))
            })?;
            vocab.push_merge(a, b, bytes);
        }
        Ok(vocab)
    }

    /// Writes `merges.txt` and `vocab.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let merges = dir.join(MERGES_FILE);
        fs::write(&merges, self.merges_text()).map_err(|e| Error::io(&merges, e))?;
        let vocab = dir.join(VOCAB_FILE);
        let json = serde_json::to_string_pretty(&self.vocab_json())?;
        fs::write(&vocab, json + "\n").map_err(|e| Error::io(&vocab, e))?;
        Ok(())
    }

    /// Loads from a directory (preferring `merges.txt`) or from a single
    /// merges or vocab file.
    pub fn load(path: &Path) -> Result<Self> {
        if path.is_dir() {
            let merges = path.join(MERGES_FILE);
            if merges.exists() {
                return Self::load(&merges);
            }
            return Self::load(&path.join(VOCAB_FILE));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_vocab_json(&serde_json::from_str(&text)?)
        } else {
            Self::from_merges_text(&text)
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Letter,
    Number,
    Space,
    Other,
}

fn classify(c: char) -> CharClass {
    if c.is_whitespace() {
        CharClass::Space
    } else if c.is_alphabetic() {
        CharClass::Letter
    } else if c.is_numeric() {
        CharClass::Number
    } else {
        CharClass::Other
    }
}

/// Splits text into merge-isolated chunks: runs of letters, digits, other
/// symbols or whitespace, where a single space directly before a non-space
/// run is attached to that run.
pub fn pre_split(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let byte_at = |i: usize| chars.get(i).map_or(text.len(), |&(b, _)| b);
    let mut chunks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let class = classify(chars[i].1);
        let mut j = i + 1;
        while j < chars.len() && classify(chars[j].1) == class {
            j += 1;
        }
        if class == CharClass::Space {
            if j < chars.len() && chars[j - 1].1 == ' ' {
                // The last space joins the following run.
                if j - 1 > i {
                    chunks.push(&text[byte_at(i)..byte_at(j - 1)]);
                }
                let next = classify(chars[j].1);
                let mut k = j + 1;
                while k < chars.len() && classify(chars[k].1) == next {
                    k += 1;
                }
                chunks.push(&text[byte_at(j - 1)..byte_at(k)]);
                i = k;
            } else {
                chunks.push(&text[byte_at(i)..byte_at(j)]);
                i = j;
            }
        } else {
            chunks.push(&text[byte_at(i)..byte_at(j)]);
            i = j;
        }
    }
    chunks
}

#[derive(Clone, Debug)]
pub struct BpeTrainer {
    pub target_vocab_size: usize,
    /// Return a smaller vocabulary instead of failing when the corpus runs
    /// out of pairs before the target is reached.
    pub allow_undersized: bool,
}

impl Default for BpeTrainer {
    fn default() -> Self {
        BpeTrainer {
            target_vocab_size: DEFAULT_VOCAB_SIZE,
            allow_undersized: false,
        }
    }
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    key: (Vec<u8>, Vec<u8>),
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // Max-heap: higher count first, then the lexicographically smaller pair.
        self.count
            .cmp(&other.count)
            .then_with(|| other.key.cmp(&self.key))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl BpeTrainer {
    pub fn new(target_vocab_size: usize) -> Self {
        BpeTrainer {
            target_vocab_size,
            ..Default::default()
        }
    }

    pub fn allow_undersized(mut self, allow: bool) -> Self {
        self.allow_undersized = allow;
        self
    }

    pub fn train<I, S>(&self, corpus: I) -> Result<Vocabulary>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if self.target_vocab_size < MIN_VOCAB_SIZE {
            return Err(Error::VocabTooSmall {
                requested: self.target_vocab_size,
                minimum: MIN_VOCAB_SIZE,
            });
        }
        let mut chunk_counts: HashMap<String, u64> = HashMap::new();
        let mut any_text = false;
        for text in corpus {
            let text = text.as_ref();
            any_text |= !text.is_empty();
            for chunk in pre_split(text) {
                *chunk_counts.entry(chunk.to_string()).or_default() += 1;
            }
        }
        if !any_text {
            return Err(Error::EmptyCorpus);
        }
        let mut chunks: Vec<(String, u64)> = chunk_counts.into_iter().collect();
        chunks.sort();
        let counts: Vec<u64> = chunks.iter().map(|(_, c)| *c).collect();
        let mut words: Vec<Vec<u32>> = chunks
            .iter()
            .map(|(s, _)| s.bytes().map(u32::from).collect())
            .collect();

        let mut vocab = Vocabulary::byte_level();
        let merge_budget = self.target_vocab_size - MIN_VOCAB_SIZE;

        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
        for (w, symbols) in words.iter().enumerate() {
            for pair in symbols.windows(2) {
                let pair = (pair[0], pair[1]);
                *pair_counts.entry(pair).or_default() += counts[w];
                pair_words.entry(pair).or_default().insert(w);
            }
        }
        let candidate = |vocab: &Vocabulary, pair: (u32, u32), count: u64| Candidate {
            count,
            key: (
                vocab.tokens[pair.0 as usize].clone(),
                vocab.tokens[pair.1 as usize].clone(),
            ),
            pair,
        };
        let mut heap: BinaryHeap<Candidate> = pair_counts
            .iter()
            .map(|(&pair, &count)| candidate(&vocab, pair, count))
            .collect();

        while vocab.merges.len() < merge_budget {
            let Some(top) = heap.pop() else { break };
            let current = pair_counts.get(&top.pair).copied().unwrap_or(0);
            if current != top.count {
                if current > 0 {
                    heap.push(Candidate { count: current, ..top });
                }
                continue;
            }
            if current == 0 {
                break;
            }
            let mut joined = top.key.0.clone();
            joined.extend_from_slice(&top.key.1);
            if vocab.ids.contains_key(&joined) {
                // Already a token; cannot become a new one.
                continue;
            }
            let (a, b) = top.pair;
            let new_id = vocab.push_merge(a, b, joined);

            let mut affected: Vec<usize> = pair_words
                .remove(&top.pair)
                .map(|s| s.into_iter().collect())
                .unwrap_or_default();
            affected.sort_unstable();
            let mut touched: HashSet<(u32, u32)> = HashSet::new();
            for w in affected {
                let symbols = &mut words[w];
                for p in symbols.windows(2) {
                    let p = (p[0], p[1]);
                    if let Some(c) = pair_counts.get_mut(&p) {
                        *c -= counts[w];
                    }
                    touched.insert(p);
                }
                let mut merged = Vec::with_capacity(symbols.len());
                let mut i = 0;
                while i < symbols.len() {
                    if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
                        merged.push(new_id);
                        i += 2;
                    } else {
                        merged.push(symbols[i]);
                        i += 1;
                    }
                }
                *symbols = merged;
                for p in symbols.windows(2) {
                    let p = (p[0], p[1]);
                    *pair_counts.entry(p).or_default() += counts[w];
                    pair_words.entry(p).or_default().insert(w);
                    touched.insert(p);
                }
            }
            pair_counts.retain(|_, c| *c > 0);
            let mut touched: Vec<(u32, u32)> = touched.into_iter().collect();
            touched.sort_unstable();
            for p in touched {
                if let Some(&c) = pair_counts.get(&p) {
                    heap.push(candidate(&vocab, p, c));
                }
            }
        }

        let achieved = vocab.vocab_size();
        if achieved < self.target_vocab_size {
            if !self.allow_undersized {
                return Err(Error::CorpusTooSmall {
                    achieved,
                    target: self.target_vocab_size,
                });
            }
            log::warn!(
                "corpus exhausted at vocabulary size {achieved} (target {})",
                self.target_vocab_size
            );
        }
        Ok(vocab)
    }
}

/// GPT-2's reversible byte → printable character table.
fn byte_table() -> &'static [char; 256] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[char; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = ['\0'; 256];
        let printable = |b: u32| {
            (b'!' as u32..=b'~' as u32).contains(&b)
                || (0xA1..=0xAC).contains(&b)
                || (0xAE..=0xFF).contains(&b)
        };
        let mut extra = 0;
        for b in 0..256u32 {
            table[b as usize] = if printable(b) {
                char::from_u32(b).unwrap()
            } else {
                extra += 1;
                char::from_u32(255 + extra).unwrap()
            };
        }
        table
    })
}

pub fn bytes_to_printable(bytes: &[u8]) -> String {
    let table = byte_table();
    bytes.iter().map(|&b| table[b as usize]).collect()
}

pub fn printable_to_bytes(s: &str) -> Option<Vec<u8>> {
    let table = byte_table();
    s.chars()
        .map(|c| table.iter().position(|&t| t == c).map(|b| b as u8))
        .collect()
}
