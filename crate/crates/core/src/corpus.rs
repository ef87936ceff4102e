//! Annotated document corpora.
//!
//! Corpora are JSON-lines files, one document per line:
//!
//! ```json
//! {"id":"d1","text":"...","annotations":[{"title":"...","label":"r/science"}]}
//! ```
//!
//! `id` is optional and defaults to `line-N`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{NONE_OF_THE_ABOVE, TEMPLATES};
use crate::rng::{stream_rng, Stream};
use crate::sampler::{LabeledRecord, TaskSpec};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub title: String,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedDocument {
    #[serde(rename = "id", default)]
    pub doc_id: String,
    pub text: String,
    pub annotations: Vec<Annotation>,
}

impl AnnotatedDocument {
    pub fn titles(&self) -> impl Iterator<Item = &str> {
        self.annotations.iter().map(|a| a.title.as_str())
    }

    /// Drops repeated titles, keeping the first annotation of each. Returns
    /// how many were removed.
    pub fn dedup_titles(&mut self) -> usize {
        let before = self.annotations.len();
        let mut seen = HashSet::new();
        self.annotations.retain(|a| seen.insert(a.title.clone()));
        before - self.annotations.len()
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.text.is_empty() {
            return Err("empty text".into());
        }
        if self.annotations.is_empty() {
            return Err("empty annotation list".into());
        }
        Ok(())
    }
}

/// Streams documents from a JSON-lines corpus, one record at a time.
pub struct CorpusReader<R> {
    lines: std::io::Lines<R>,
    path: PathBuf,
    line: usize,
}

impl<R: BufRead> CorpusReader<R> {
    pub fn new(reader: R, path: impl Into<PathBuf>) -> Self {
        CorpusReader {
            lines: reader.lines(),
            path: path.into(),
            line: 0,
        }
    }

    fn record_error(&self, message: impl Into<String>) -> Error {
        Error::Record {
            path: self.path.clone(),
            line: self.line,
            message: message.into(),
        }
    }
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = Result<AnnotatedDocument>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            self.line += 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut doc: AnnotatedDocument = match serde_json::from_str(&line) {
                Ok(doc) => doc,
                Err(e) => return Some(Err(self.record_error(e.to_string()))),
            };
            if let Err(message) = doc.check() {
                return Some(Err(self.record_error(message)));
            }
            if doc.doc_id.is_empty() {
                doc.doc_id = format!("line-{}", self.line);
            }
            let removed = doc.dedup_titles();
            if removed > 0 {
                log::warn!(
                    "{}:{}: removed {removed} duplicate title(s) from {:?}",
                    self.path.display(),
                    self.line,
                    doc.doc_id
                );
            }
            return Some(Ok(doc));
        }
    }
}

pub fn load_corpus(path: &Path) -> Result<CorpusReader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(CorpusReader::new(BufReader::new(file), path))
}

/// Loads a whole corpus, failing on the first malformed record.
pub fn read_corpus(path: &Path) -> Result<Vec<AnnotatedDocument>> {
    load_corpus(path)?.collect()
}

pub fn write_corpus(path: &Path, docs: &[AnnotatedDocument]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for doc in docs {
        serde_json::to_writer(&mut out, doc)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Seeded shuffle of document indices: the first `size` are validation.
pub fn validation_split(n: usize, size: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Split, 0));
    let size = size.min(n);
    let train = order.split_off(size);
    (order, train)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: u64,
    pub annotations: u64,
    pub label_frequency: BTreeMap<String, u64>,
    /// count → number of labels seen exactly that many times
    pub frequency_histogram: BTreeMap<u64, u64>,
    pub top_k: Vec<(String, u64)>,
    /// threshold → number of labels seen at least that many times
    pub labels_at_least: BTreeMap<u64, u64>,
}

/// Mergeable partial statistics; `merge` is associative and commutative.
#[derive(Clone, Debug, Default)]
pub struct StatsAccumulator {
    documents: u64,
    annotations: u64,
    label_frequency: HashMap<String, u64>,
}

impl StatsAccumulator {
    pub fn add(&mut self, doc: &AnnotatedDocument) {
        self.documents += 1;
        for a in &doc.annotations {
            self.annotations += 1;
            *self.label_frequency.entry(a.label.clone()).or_default() += 1;
        }
    }

    pub fn merge(mut self, other: StatsAccumulator) -> StatsAccumulator {
        self.documents += other.documents;
        self.annotations += other.annotations;
        for (label, count) in other.label_frequency {
            *self.label_frequency.entry(label).or_default() += count;
        }
        self
    }

    pub fn finish(self, top_k: usize, thresholds: &[u64]) -> CorpusStats {
        let label_frequency: BTreeMap<String, u64> = self.label_frequency.into_iter().collect();
        let mut frequency_histogram = BTreeMap::new();
        for &count in label_frequency.values() {
            *frequency_histogram.entry(count).or_default() += 1;
        }
        let mut ranked: Vec<(String, u64)> = label_frequency
            .iter()
            .map(|(l, &c)| (l.clone(), c))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(top_k);
        let labels_at_least = thresholds
            .iter()
            .map(|&t| (t, label_frequency.values().filter(|&&c| c >= t).count() as u64))
            .collect();
        CorpusStats {
            documents: self.documents,
            annotations: self.annotations,
            label_frequency,
            frequency_histogram,
            top_k: ranked,
            labels_at_least,
        }
    }
}

pub fn compute_stats<'a, I>(docs: I, top_k: usize, thresholds: &[u64]) -> CorpusStats
where
    I: IntoIterator<Item = &'a AnnotatedDocument>,
{
    let mut acc = StatsAccumulator::default();
    for doc in docs {
        acc.add(doc);
    }
    acc.finish(top_k, thresholds)
}

/// Text a tokenizer should be fitted on: every document body, every title,
/// and the fixed question and answer vocabulary of the pretraining format.
pub fn tokenizer_texts(docs: &[AnnotatedDocument]) -> Vec<String> {
    let mut out: Vec<String> = TEMPLATES.iter().map(|t| t.display()).collect();
    out.push(format!(" {NONE_OF_THE_ABOVE}"));
    for doc in docs {
        out.push(doc.text.clone());
        // Titles appear as answers with a leading space and as choices.
        out.extend(doc.titles().map(|t| format!(" {t}")));
        out.extend(doc.titles().map(str::to_string));
    }
    out
}

/// Sharded statistics; shards are merged in index order.
pub fn compute_stats_sharded(
    docs: &[AnnotatedDocument],
    shards: usize,
    top_k: usize,
    thresholds: &[u64],
) -> CorpusStats {
    use rayon::prelude::*;
    let chunk = docs.len().div_ceil(shards.max(1)).max(1);
    let parts: Vec<StatsAccumulator> = docs
        .par_chunks(chunk)
        .map(|c| {
            let mut acc = StatsAccumulator::default();
            c.iter().for_each(|d| acc.add(d));
            acc
        })
        .collect();
    parts
        .into_iter()
        .fold(StatsAccumulator::default(), StatsAccumulator::merge)
        .finish(top_k, thresholds)
}

/// Label frequencies of a full-scale web-link corpus with source-community
/// labels, shown alongside a report for orientation only.
pub const REFERENCE_TOP_LABELS: [(&str, u64); 15] = [
    ("r/politics", 245_308),
    ("r/worldnews", 122_884),
    ("r/The_Donald", 80_042),
    ("r/todayilearned", 59_892),
    ("r/news", 59_166),
    ("r/technology", 54_860),
    ("r/science", 46_452),
    ("r/Conservative", 30_823),
    ("r/POLITIC", 28_310),
    ("r/conspiracy", 28_293),
    ("r/india", 27_892),
    ("r/environment", 26_816),
    ("r/atheism", 25_999),
    ("r/programming", 24_020),
    ("r/Libertarian", 23_711),
];
/// Distinct labels in that corpus.
pub const REFERENCE_LABEL_COUNT: u64 = 50_700;

impl CorpusStats {
    pub fn render_table(&self, with_reference: bool) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "documents: {}\nannotations: {}\ndistinct labels: {}\n\n",
            self.documents,
            self.annotations,
            self.label_frequency.len()
        ));
        let width = self
            .top_k
            .iter()
            .map(|(l, _)| l.len())
            .max()
            .unwrap_or(5)
            .max(5);
        out.push_str(&format!("{:<width$}  {:>10}\n", "label", "count"));
        for (label, count) in &self.top_k {
            out.push_str(&format!("{label:<width$}  {count:>10}\n"));
        }
        if !self.labels_at_least.is_empty() {
            out.push('\n');
            for (t, n) in &self.labels_at_least {
                out.push_str(&format!("labels with >= {t} annotations: {n}\n"));
            }
        }
        out.push_str("\nfrequency histogram (count: labels)\n");
        for (count, labels) in &self.frequency_histogram {
            out.push_str(&format!("{count:>10}: {labels}\n"));
        }
        if with_reference {
            out.push_str(&format!(
                "\nreference: full-scale corpus, {REFERENCE_LABEL_COUNT} labels\n"
            ));
            for (label, count) in REFERENCE_TOP_LABELS {
                out.push_str(&format!("{label:<20}  {count:>10}\n"));
            }
        }
        out
    }
}

const THEMES: [(&str, [&str; 4]); 12] = [
    ("astronomy", ["Astronomy", "Space", "Planets", "Stars"]),
    ("cooking", ["Cooking", "Recipes", "Kitchen", "Food"]),
    ("finance", ["Finance", "Money", "Markets", "Banking"]),
    ("football", ["Football", "Soccer", "Goals", "League"]),
    ("medicine", ["Medicine", "Health", "Doctors", "Hospitals"]),
    ("music", ["Music", "Songs", "Concerts", "Bands"]),
    ("politics", ["Politics", "Elections", "Government", "Voters"]),
    ("weather", ["Weather", "Storms", "Rain", "Forecasts"]),
    ("gaming", ["Gaming", "Games", "Consoles", "Players"]),
    ("travel", ["Travel", "Tourism", "Flights", "Hotels"]),
    ("gardening", ["Gardening", "Plants", "Flowers", "Gardens"]),
    ("history", ["History", "Ancient", "Empires", "Wars"]),
];

pub const DEFAULT_TITLE_PATTERNS: [&str; 10] = [
    "{} news",
    "latest {} report",
    "notes on {}",
    "all about {}",
    "{} today",
    "the {} digest",
    "{} and more",
    "inside {}",
    "{} update",
    "what is new in {}",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub topics: usize,
    pub docs_per_topic: usize,
    /// Distinct content words per topic.
    pub words_per_topic: usize,
    /// Title templates with one `{}` slot for a topic name.
    pub title_patterns: Vec<String>,
    pub titles_per_doc: (usize, usize),
    pub text_words: (usize, usize),
    /// Probability that a text word comes from a pool shared by all topics.
    pub overlap: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            topics: 8,
            docs_per_topic: 500,
            words_per_topic: 40,
            title_patterns: DEFAULT_TITLE_PATTERNS.iter().map(|s| s.to_string()).collect(),
            titles_per_doc: (1, 3),
            text_words: (12, 24),
            overlap: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topic {
    pub key: String,
    pub label: String,
    /// Capitalized names used in titles and descriptors.
    pub names: Vec<String>,
    pub words: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub topics: Vec<Topic>,
    pub shared_words: Vec<String>,
    pub documents: Vec<AnnotatedDocument>,
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr",
];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "y"];

fn pseudo_word<R: Rng>(rng: &mut R) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
        w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
    }
    w
}

fn zipf_weights(n: usize) -> Vec<f64> {
    (1..=n).map(|r| 1.0 / r as f64).collect()
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.topics < 2 {
            return Err(Error::Config("synthetic corpus needs at least 2 topics".into()));
        }
        if self.docs_per_topic == 0 || self.words_per_topic == 0 {
            return Err(Error::Config("synthetic corpus would be empty".into()));
        }
        if self.title_patterns.is_empty()
            || self.title_patterns.iter().any(|p| p.matches("{}").count() != 1)
        {
            return Err(Error::Config(
                "title patterns must each contain exactly one {}".into(),
            ));
        }
        let (lo, hi) = self.titles_per_doc;
        if lo == 0 || lo > hi {
            return Err(Error::Config("titles_per_doc must satisfy 1 <= min <= max".into()));
        }
        let (lo, hi) = self.text_words;
        if lo == 0 || lo > hi {
            return Err(Error::Config("text_words must satisfy 1 <= min <= max".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::Config("overlap must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Builds topics with disjoint content vocabularies and documents drawn
/// from them. Identical specs give identical corpora.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, Stream::Corpus, 0);
    let mut used: HashSet<String> = HashSet::new();
    let mut fresh_words = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<String> {
        let mut words = Vec::with_capacity(n);
        while words.len() < n {
            let w = pseudo_word(rng);
            if used.insert(w.clone()) {
                words.push(w);
            }
        }
        words
    };

    let mut topics = Vec::with_capacity(spec.topics);
    for t in 0..spec.topics {
        let (key, names) = match THEMES.get(t) {
            Some((key, names)) => (
                key.to_string(),
                names.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            ),
            None => {
                let names: Vec<String> = fresh_words(&mut rng, 4)
                    .into_iter()
                    .map(|w| capitalize(&w))
                    .collect();
                (names[0].to_lowercase(), names)
            }
        };
        let words = fresh_words(&mut rng, spec.words_per_topic);
        topics.push(Topic {
            label: format!("r/{key}"),
            key,
            names,
            words,
        });
    }
    let shared_words = if spec.overlap > 0.0 {
        fresh_words(&mut rng, spec.words_per_topic)
    } else {
        Vec::new()
    };

    let mut documents = Vec::with_capacity(spec.topics * spec.docs_per_topic);
    for (t, topic) in topics.iter().enumerate() {
        let mut rng = stream_rng(spec.seed, Stream::Corpus, 1 + t as u64);
        for k in 0..spec.docs_per_topic {
            let text = topic_text(topic, &shared_words, spec, &mut rng);
            let n_titles = rng.gen_range(spec.titles_per_doc.0..=spec.titles_per_doc.1);
            let mut annotations: Vec<Annotation> = Vec::with_capacity(n_titles);
            let mut attempts = 0;
            while annotations.len() < n_titles && attempts < 100 {
                attempts += 1;
                let pattern = &spec.title_patterns[rng.gen_range(0..spec.title_patterns.len())];
                let name = &topic.names[rng.gen_range(0..topic.names.len())];
                let title = pattern.replacen("{}", name, 1);
                if annotations.iter().all(|a| a.title != title) {
                    annotations.push(Annotation {
                        title,
                        label: topic.label.clone(),
                    });
                }
            }
            documents.push(AnnotatedDocument {
                doc_id: format!("{}-{k}", topic.key),
                text,
                annotations,
            });
        }
    }
    documents.shuffle(&mut stream_rng(spec.seed, Stream::Corpus, u64::MAX));
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        topics,
        shared_words,
        documents,
    })
}

fn topic_text<R: Rng>(
    topic: &Topic,
    shared: &[String],
    spec: &SyntheticSpec,
    rng: &mut R,
) -> String {
    let n = rng.gen_range(spec.text_words.0..=spec.text_words.1);
    let topic_dist = WeightedIndex::new(zipf_weights(topic.words.len())).expect("non-empty");
    let shared_dist = (!shared.is_empty())
        .then(|| WeightedIndex::new(zipf_weights(shared.len())).expect("non-empty"));
    let mut words = Vec::with_capacity(n);
    for _ in 0..n {
        let word = match &shared_dist {
            Some(d) if rng.gen_bool(spec.overlap) => &shared[d.sample(rng)],
            _ => &topic.words[topic_dist.sample(rng)],
        };
        words.push(word.as_str());
    }
    let mut text = words.join(" ");
    text.push('.');
    text
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// A held-out classification task over a subset of topics.
#[derive(Clone, Debug)]
pub struct HeldoutTask {
    /// Descriptors are paraphrases never used as a title: two topic names
    /// joined by "and".
    pub spec: TaskSpec,
    /// Same classes with whitespace removed from every descriptor.
    pub stripped: TaskSpec,
    /// Same classes with every descriptor cut to its shortest distinct
    /// prefix of at least three characters.
    pub truncated: TaskSpec,
    pub records: Vec<LabeledRecord>,
}

impl SyntheticCorpus {
    /// Fresh documents from the given topics, `per_class` each, with
    /// labels set to the topic keys. Drawn from a stream disjoint from the
    /// pretraining documents.
    pub fn heldout_task(&self, topic_ids: &[usize], per_class: usize, seed: u64) -> Result<HeldoutTask> {
        if topic_ids.len() < 2 {
            return Err(Error::Config("a task needs at least 2 classes".into()));
        }
        let mut rng = stream_rng(seed, Stream::Heldout, 0);
        let mut descriptors = Vec::new();
        let mut label_map = BTreeMap::new();
        for &t in topic_ids {
            let topic = self
                .topics
                .get(t)
                .ok_or_else(|| Error::Config(format!("no topic {t}")))?;
            let mut names = topic.names.clone();
            names.shuffle(&mut rng);
            let descriptor = format!("{} and {}", names[0], names[1]);
            label_map.insert(topic.key.clone(), descriptor.clone());
            descriptors.push(descriptor);
        }
        let spec = TaskSpec::new("synthetic-heldout", descriptors, label_map)?;
        let stripped = spec.map_descriptors("synthetic-heldout-stripped", |d| {
            d.chars().filter(|c| !c.is_whitespace()).collect()
        })?;
        let keep = (3..)
            .find(|&k| {
                let cut: HashSet<String> = spec
                    .descriptors
                    .iter()
                    .map(|d| d.chars().take(k).collect())
                    .collect();
                cut.len() == spec.descriptors.len()
            })
            .expect("descriptors are distinct");
        let truncated = spec.map_descriptors("synthetic-heldout-truncated", |d| {
            d.chars().take(keep).collect()
        })?;

        let mut records = Vec::with_capacity(per_class * topic_ids.len());
        for &t in topic_ids {
            let topic = &self.topics[t];
            let mut rng = stream_rng(seed, Stream::Heldout, 1 + t as u64);
            for _ in 0..per_class {
                records.push(LabeledRecord {
                    label: topic.key.clone(),
                    text: topic_text(topic, &self.shared_words, &self.spec, &mut rng),
                });
            }
        }
        records.shuffle(&mut rng);
        Ok(HeldoutTask {
            spec,
            stripped,
            truncated,
            records,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn doc(labels: &[&str]) -> AnnotatedDocument {
        AnnotatedDocument {
            doc_id: String::new(),
            text: "body".into(),
            annotations: labels
                .iter()
                .enumerate()
                .map(|(i, l)| Annotation {
                    title: format!("t{i}"),
                    label: l.to_string(),
                })
                .collect(),
        }
    }

    fn read(text: &str) -> Vec<Result<AnnotatedDocument>> {
        CorpusReader::new(Cursor::new(text.to_string()), "mem.jsonl").collect()
    }

    #[test]
    fn reads_records_in_order() {
        let text = r#"{"id":"a","text":"one","annotations":[{"title":"A","label":"x"}]}
{"id":"b","text":"two","annotations":[{"title":"B","label":"y"}]}
{"text":"three","annotations":[{"title":"C","label":"x"}]}
"#;
        let docs: Vec<AnnotatedDocument> = read(text).into_iter().map(|d| d.unwrap()).collect();
        let ids: Vec<&str> = docs.iter().map(|d| d.doc_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "line-3"]);
    }

    #[test]
    fn empty_annotations_name_the_line() {
        let text = r#"{"text":"ok","annotations":[{"title":"A","label":"x"}]}
{"text":"bad","annotations":[]}
"#;
        let results = read(text);
        assert!(results[0].is_ok());
        match &results[1] {
            Err(Error::Record { line, message, .. }) => {
                assert_eq!(*line, 2);
                assert!(message.contains("annotation"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_text_rejected() {
        let results = read(r#"{"text":"","annotations":[{"title":"A","label":"x"}]}"#);
        assert!(matches!(results[0], Err(Error::Record { line: 1, .. })));
    }

    #[test]
    fn duplicate_titles_removed() {
        let text = r#"{"text":"t","annotations":[{"title":"A","label":"x"},{"title":"B","label":"y"},{"title":"A","label":"z"},{"title":"B","label":"y"}]}"#;
        let docs: Vec<_> = read(text).into_iter().map(|d| d.unwrap()).collect();
        let titles: Vec<&str> = docs[0].titles().collect();
        assert_eq!(titles, vec!["A", "B"]);
        assert_eq!(docs[0].annotations[0].label, "x");
    }

    #[test]
    fn hand_counted_stats() {
        let docs = vec![doc(&["a", "b"]), doc(&["a"]), doc(&["a"])];
        let stats = compute_stats(&docs, 15, &[2]);
        assert_eq!(stats.label_frequency, BTreeMap::from([("a".into(), 3), ("b".into(), 1)]));
        assert_eq!(stats.frequency_histogram, BTreeMap::from([(3, 1), (1, 1)]));
        assert_eq!(stats.labels_at_least, BTreeMap::from([(2, 1)]));
        assert_eq!(stats.top_k, vec![("a".into(), 3), ("b".into(), 1)]);
        assert_eq!(stats.annotations, 4);
    }

    #[test]
    fn empty_stream_stats() {
        let stats = compute_stats(std::iter::empty(), 15, &[]);
        assert!(stats.label_frequency.is_empty());
        assert!(stats.frequency_histogram.is_empty());
        assert!(stats.top_k.is_empty());
    }

    #[test]
    fn top_k_ties_are_lexicographic() {
        let docs = vec![doc(&["zeta", "alpha", "mid", "mid"])];
        let stats = compute_stats(&docs, 2, &[]);
        assert_eq!(stats.top_k, vec![("mid".into(), 2), ("alpha".into(), 1)]);
    }

    #[test]
    fn generator_counts_and_determinism() {
        let spec = SyntheticSpec {
            seed: 5,
            ..Default::default()
        };
        let a = generate_synthetic_corpus(&spec).unwrap();
        assert_eq!(a.documents.len(), 4000);
        let labels: HashSet<&str> = a
            .documents
            .iter()
            .flat_map(|d| d.annotations.iter().map(|x| x.label.as_str()))
            .collect();
        assert_eq!(labels.len(), 8);
        let b = generate_synthetic_corpus(&spec).unwrap();
        assert_eq!(a, b);
        for d in &a.documents {
            assert!(!d.annotations.is_empty());
            let topic = a.topics.iter().find(|t| t.label == d.annotations[0].label).unwrap();
            for title in d.titles() {
                assert!(topic.names.iter().any(|n| title.contains(n.as_str())), "{title}");
            }
        }
    }

    #[test]
    fn generator_vocabularies_are_disjoint() {
        let corpus = generate_synthetic_corpus(&SyntheticSpec::default()).unwrap();
        let mut seen = HashSet::new();
        for t in &corpus.topics {
            for w in &t.words {
                assert!(seen.insert(w.clone()), "{w} shared");
            }
        }
    }

    #[test]
    fn degenerate_specs_rejected() {
        for spec in [
            SyntheticSpec {
                docs_per_topic: 0,
                ..Default::default()
            },
            SyntheticSpec {
                topics: 1,
                ..Default::default()
            },
            SyntheticSpec {
                title_patterns: vec!["no slot".into()],
                ..Default::default()
            },
        ] {
            assert!(generate_synthetic_corpus(&spec).is_err());
        }
    }

    #[test]
    fn heldout_descriptors_are_unseen_titles() {
        let corpus = generate_synthetic_corpus(&SyntheticSpec {
            docs_per_topic: 50,
            ..Default::default()
        })
        .unwrap();
        let task = corpus.heldout_task(&[0, 2, 4, 6], 10, 3).unwrap();
        let titles: HashSet<&str> = corpus.documents.iter().flat_map(|d| d.titles()).collect();
        for d in &task.spec.descriptors {
            assert!(!titles.contains(d.as_str()));
        }
        assert_eq!(task.records.len(), 40);
        assert!(task.stripped.descriptors.iter().all(|d| !d.contains(' ')));
        assert!(task.truncated.descriptors.iter().all(|d| d.chars().count() >= 3));
    }

    #[test]
    fn split_is_seeded_partition() {
        let (val, train) = validation_split(100, 20, 1);
        assert_eq!(val.len(), 20);
        assert_eq!(train.len(), 80);
        let mut all: Vec<usize> = val.iter().chain(&train).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(validation_split(100, 20, 1), (val, train));
    }
}
