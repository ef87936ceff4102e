//! Multiple-choice example construction.
//!
//! Pretraining examples ask for a document's title among `t` candidates,
//! where the distractors are titles of other documents. Half of the time
//! one uniformly chosen slot is overwritten with "none of the above"; when
//! that slot held the true title (probability `1/t`), the answer becomes
//! "none of the above".
//!
//! Downstream examples list every class descriptor of a [`TaskSpec`] in
//! spec order and never offer "none of the above".

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::AnnotatedDocument;
use crate::error::{Error, Result};
use crate::grammar::{
    render_choices, sample_template, validate_descriptor, QuestionTemplate, MAX_CHOICES,
    MIN_CHOICES, NONE_OF_THE_ABOVE,
};
use crate::rng::{stream_rng, Stream};

/// A rendered multiple-choice instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceExample {
    pub question: String,
    pub choices: Vec<String>,
    pub answer: String,
    pub text: String,
    #[serde(default)]
    pub template_id: usize,
}

impl ChoiceExample {
    pub fn contains_nota(&self) -> bool {
        self.choices.iter().any(|c| c == NONE_OF_THE_ABOVE)
    }
}

pub fn write_examples(path: &Path, examples: &[ChoiceExample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_examples(path: &Path) -> Result<Vec<ChoiceExample>> {
    read_json_lines(path)
}

fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub t_min: usize,
    pub t_max: usize,
    pub nota_probability: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            t_min: MIN_CHOICES,
            t_max: MAX_CHOICES,
            nota_probability: 0.5,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_min < MIN_CHOICES || self.t_min > self.t_max || self.t_max > MAX_CHOICES {
            return Err(Error::Config(format!(
                "choice range {}..={} must lie within {MIN_CHOICES}..={MAX_CHOICES}",
                self.t_min, self.t_max
            )));
        }
        if !(0.0..=1.0).contains(&self.nota_probability) {
            return Err(Error::Config("nota_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Every (title, document) pair of a corpus, for distractor draws.
#[derive(Clone, Debug)]
pub struct TitlePool {
    titles: Vec<String>,
    owners: Vec<usize>,
    owned: Vec<usize>,
}

pub fn distractor_pool_build(docs: &[AnnotatedDocument]) -> TitlePool {
    let mut titles = Vec::new();
    let mut owners = Vec::new();
    let mut owned = vec![0; docs.len()];
    for (i, doc) in docs.iter().enumerate() {
        for title in doc.titles().filter(|t| *t != NONE_OF_THE_ABOVE) {
            titles.push(title.to_string());
            owners.push(i);
            owned[i] += 1;
        }
    }
    TitlePool {
        titles,
        owners,
        owned,
    }
}

impl TitlePool {
    pub fn len(&self) -> usize {
        self.titles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.titles.is_empty()
    }

    /// Pool entries not owned by `owner`.
    pub fn eligible(&self, owner: Option<usize>) -> usize {
        self.titles.len() - owner.and_then(|o| self.owned.get(o).copied()).unwrap_or(0)
    }

    /// Draws `n` distinct titles uniformly (with replacement, then
    /// deduplicated), skipping entries owned by `owner` and any title equal
    /// to one in `exclude`.
    pub fn draw<R: Rng + ?Sized>(
        &self,
        owner: Option<usize>,
        exclude: &[&str],
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<String>> {
        let available = self.eligible(owner);
        if available < n {
            return Err(Error::PoolExhausted {
                needed: n,
                available,
            });
        }
        let mut picked: Vec<String> = Vec::with_capacity(n);
        let mut attempts = 0usize;
        let limit = 1000 * n.max(1) + 10_000;
        while picked.len() < n {
            attempts += 1;
            if attempts > limit {
                return Err(Error::PoolExhausted {
                    needed: n,
                    available: picked.len(),
                });
            }
            let i = rng.gen_range(0..self.titles.len());
            if Some(self.owners[i]) == owner {
                continue;
            }
            let title = &self.titles[i];
            if exclude.contains(&title.as_str()) || picked.contains(title) {
                continue;
            }
            picked.push(title.clone());
        }
        Ok(picked)
    }
}

/// Forces individual sampling branches; `None` leaves a branch random.
#[derive(Clone, Copy, Debug, Default)]
pub struct SampleOverrides {
    pub t: Option<usize>,
    pub nota: Option<bool>,
    /// When the NOTA branch fires: `Some(true)` overwrites the true title,
    /// `Some(false)` overwrites a distractor.
    pub nota_replaces_correct: Option<bool>,
    pub template_id: Option<usize>,
}

/// Builds one title-prediction example for `doc`. `owner` is the document's
/// index in `pool` when it belongs to it.
pub fn sample_pretraining_example<R: Rng + ?Sized>(
    doc: &AnnotatedDocument,
    owner: Option<usize>,
    pool: &TitlePool,
    cfg: &SamplerConfig,
    rng: &mut R,
    overrides: SampleOverrides,
) -> Result<ChoiceExample> {
    let titles: Vec<&str> = doc.titles().filter(|t| *t != NONE_OF_THE_ABOVE).collect();
    if titles.is_empty() {
        return Err(Error::NoTitles {
            doc_id: doc.doc_id.clone(),
        });
    }
    let t = match overrides.t {
        Some(t) => t,
        None => rng.gen_range(cfg.t_min..=cfg.t_max),
    };
    if !(MIN_CHOICES..=MAX_CHOICES).contains(&t) {
        return Err(Error::Config(format!("{t} choices requested")));
    }
    let correct = titles[rng.gen_range(0..titles.len())].to_string();
    let mut choices = pool.draw(owner, &titles, t - 1, rng)?;
    choices.push(correct.clone());
    choices.shuffle(rng);
    let correct_slot = choices
        .iter()
        .position(|c| *c == correct)
        .expect("correct title present");

    let nota = match overrides.nota {
        Some(b) => b,
        None => rng.gen_bool(cfg.nota_probability),
    };
    let mut answer = correct;
    if nota {
        let slot = match overrides.nota_replaces_correct {
            Some(true) => correct_slot,
            Some(false) => {
                let k = rng.gen_range(0..t - 1);
                if k >= correct_slot {
                    k + 1
                } else {
                    k
                }
            }
            None => rng.gen_range(0..t),
        };
        choices[slot] = NONE_OF_THE_ABOVE.to_string();
        if slot == correct_slot {
            answer = NONE_OF_THE_ABOVE.to_string();
        }
    }

    let template = match overrides.template_id {
        Some(id) => QuestionTemplate::by_id(id)?,
        None => sample_template(rng),
    };
    Ok(ChoiceExample {
        question: render_choices(template, &choices)?,
        choices,
        answer,
        text: doc.text.clone(),
        template_id: template.id,
    })
}

/// A downstream classification task described only by its class names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    /// Class descriptors in presentation order.
    pub descriptors: Vec<String>,
    /// Dataset label → descriptor.
    pub label_map: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<PathBuf>,
}

impl TaskSpec {
    pub fn new(
        name: impl Into<String>,
        descriptors: Vec<String>,
        label_map: BTreeMap<String, String>,
    ) -> Result<Self> {
        let spec = TaskSpec {
            name: name.into(),
            descriptors,
            label_map,
            source: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.descriptors.len();
        if !(MIN_CHOICES..=MAX_CHOICES).contains(&n) {
            return Err(Error::TaskSpec(format!(
                "{}: {n} descriptors, expected {MIN_CHOICES}..={MAX_CHOICES}",
                self.name
            )));
        }
        let mut seen = HashSet::new();
        for d in &self.descriptors {
            validate_descriptor(d).map_err(|e| Error::TaskSpec(format!("{}: {e}", self.name)))?;
            if d == NONE_OF_THE_ABOVE {
                return Err(Error::TaskSpec(format!(
                    "{}: \"{NONE_OF_THE_ABOVE}\" is not a valid class",
                    self.name
                )));
            }
            if !seen.insert(d.as_str()) {
                return Err(Error::TaskSpec(format!("{}: duplicate descriptor {d:?}", self.name)));
            }
        }
        for (label, d) in &self.label_map {
            if !seen.contains(d.as_str()) {
                return Err(Error::TaskSpec(format!(
                    "{}: label {label:?} maps to unknown descriptor {d:?}",
                    self.name
                )));
            }
        }
        let mapped: HashSet<&str> = self.label_map.values().map(String::as_str).collect();
        if let Some(d) = self.descriptors.iter().find(|d| !mapped.contains(d.as_str())) {
            return Err(Error::TaskSpec(format!(
                "{}: descriptor {d:?} has no dataset label",
                self.name
            )));
        }
        Ok(())
    }

    pub fn descriptor_for(&self, label: &str) -> Result<&str> {
        self.label_map
            .get(label.trim())
            .map(String::as_str)
            .ok_or_else(|| Error::UnmappedLabel {
                task: self.name.clone(),
                label: label.to_string(),
            })
    }

    pub fn class_index(&self, descriptor: &str) -> Option<usize> {
        self.descriptors.iter().position(|d| d == descriptor)
    }

    /// The same classes under renamed descriptors.
    pub fn map_descriptors(
        &self,
        name: impl Into<String>,
        f: impl Fn(&str) -> String,
    ) -> Result<TaskSpec> {
        let spec = TaskSpec {
            name: name.into(),
            descriptors: self.descriptors.iter().map(|d| f(d)).collect(),
            label_map: self
                .label_map
                .iter()
                .map(|(l, d)| (l.clone(), f(d)))
                .collect(),
            source: self.source.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: TaskSpec =
            toml::from_str(text).map_err(|e| Error::TaskSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("task specs serialize")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: TaskSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Reads a `.toml` or `.json` spec. A relative `source` is resolved
    /// against the spec file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)?
        } else {
            Self::from_toml_str(&text)?
        };
        if let (Some(src), Some(dir)) = (&spec.source, path.parent()) {
            if src.is_relative() {
                spec.source = Some(dir.join(src));
            }
        }
        Ok(spec)
    }

    /// One of the shipped specs, by name (see [`BUILTIN_TASKS`]).
    pub fn builtin(name: &str) -> Result<Self> {
        BUILTIN_TASKS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::from_toml_str(text))
            .unwrap_or_else(|| Err(Error::TaskSpec(format!("no built-in task {name:?}"))))
    }
}

pub const BUILTIN_TASKS: [(&str, &str); 11] = [
    ("sst2", include_str!("../tasks/sst2.toml")),
    ("agnews", include_str!("../tasks/agnews.toml")),
    ("dbpedia", include_str!("../tasks/dbpedia.toml")),
    ("yahoo", include_str!("../tasks/yahoo.toml")),
    ("yelp2", include_str!("../tasks/yelp2.toml")),
    ("amazon2", include_str!("../tasks/amazon2.toml")),
    ("sst2-bad", include_str!("../tasks/sst2-bad.toml")),
    ("agnews-bad", include_str!("../tasks/agnews-bad.toml")),
    ("dbpedia-bad", include_str!("../tasks/dbpedia-bad.toml")),
    ("yelp2-bad", include_str!("../tasks/yelp2-bad.toml")),
    ("amazon2-bad", include_str!("../tasks/amazon2-bad.toml")),
];

/// One labeled example of a downstream dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub label: String,
    pub text: String,
}

/// Reads labeled records. JSON-lines files hold `{"label","text"}` objects;
/// CSV files (no header) hold the label in the first column and text fields
/// after it, joined with newlines.
pub fn load_records(path: &Path) -> Result<Vec<LabeledRecord>> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if !is_csv {
        return read_json_lines(path);
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Record {
                path: path.to_path_buf(),
                line: 0,
                message: format!("{other:?}"),
            },
        })?;
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let mut fields = row.iter();
        let label = fields.next().unwrap_or_default().trim().to_string();
        let text = fields.collect::<Vec<_>>().join("\n");
        if label.is_empty() {
            return Err(Error::Record {
                path: path.to_path_buf(),
                line: i + 1,
                message: "missing label".into(),
            });
        }
        out.push(LabeledRecord { label, text });
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[LabeledRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplateChoice {
    Fixed(usize),
    /// Sampled per example.
    Random,
}

/// One example per record: all descriptors in spec order, answer is the
/// record's mapped descriptor. Record `i` draws from its own stream, so the
/// output does not depend on processing order.
pub fn build_task_examples(
    spec: &TaskSpec,
    records: &[LabeledRecord],
    template: TemplateChoice,
    seed: u64,
) -> Result<Vec<ChoiceExample>> {
    let fixed = match template {
        TemplateChoice::Fixed(id) => Some(QuestionTemplate::by_id(id)?),
        TemplateChoice::Random => None,
    };
    records
        .iter()
        .enumerate()
        .map(|(i, record)| {
            let answer = spec.descriptor_for(&record.label)?.to_string();
            let template = match fixed {
                Some(t) => t,
                None => sample_template(&mut stream_rng(seed, Stream::Task, i as u64)),
            };
            Ok(ChoiceExample {
                question: render_choices(template, &spec.descriptors)?,
                choices: spec.descriptors.clone(),
                answer,
                text: record.text.clone(),
                template_id: template.id,
            })
        })
        .collect()
}
