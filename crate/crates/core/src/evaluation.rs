//! Zero-shot evaluation: decoding, answer matching, accuracy and
//! confusion reporting, baselines, and descriptor comparisons.
//!
//! A generated answer counts for a class only if, after trimming outer
//! whitespace, it equals that class's descriptor exactly. Anything else is
//! out of vocabulary (OOV) and is classified as the first that applies of
//! empty, rearrangement (same words, different order), blend (words taken
//! from two or more descriptors), or other.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{answer_rendering, encode_context, EncoderConfig, Segment, SequenceView};
use crate::error::{Error, Result};
use crate::model::{Mode, ModelState, Real};
use crate::rng::{stream_rng, Stream};
use crate::sampler::{build_task_examples, ChoiceExample, LabeledRecord, TaskSpec, TemplateChoice};
use crate::tokenizer::Vocabulary;

pub const DEFAULT_MAX_ANSWER_TOKENS: usize = 20;
/// OOV strings kept per kind in a report.
const OOV_SAMPLES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    TopK(usize),
    TopP(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Decoder {
    Greedy,
    Sample { strategy: Sampling, temperature: f64 },
}

impl FromStr for Decoder {
    type Err = Error;

    /// `greedy`, `topk:K`, or `topp:P`, optionally followed by
    /// `@TEMPERATURE`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("decoder {s:?}: expected greedy, topk:K or topp:P"));
        let (body, temperature) = match s.split_once('@') {
            Some((b, t)) => (b, t.parse::<f64>().map_err(|_| bad())?),
            None => (s, 1.0),
        };
        let decoder = match body.split_once(':') {
            None if s == "greedy" => return Ok(Decoder::Greedy),
            Some(("topk", k)) => Decoder::Sample {
                strategy: Sampling::TopK(k.parse().map_err(|_| bad())?),
                temperature,
            },
            Some(("topp", p)) => Decoder::Sample {
                strategy: Sampling::TopP(p.parse().map_err(|_| bad())?),
                temperature,
            },
            _ => return Err(bad()),
        };
        if let Decoder::Sample { strategy, temperature } = decoder {
            validate_sampling(strategy, temperature)?;
        }
        Ok(decoder)
    }
}

fn validate_sampling(strategy: Sampling, temperature: f64) -> Result<()> {
    match strategy {
        Sampling::TopK(0) => return Err(Error::Config("top-k needs k >= 1".into())),
        Sampling::TopP(p) if !(p > 0.0 && p <= 1.0) => {
            return Err(Error::Config(format!("top-p {p} outside (0, 1]")))
        }
        _ => {}
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    Ok(())
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax<F: Real>(logits: &[F]) -> u32 {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best as u32
}

fn softmax_f64<F: Real>(logits: &[F], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits
        .iter()
        .map(|v| v.to_f64().unwrap_or(f64::NEG_INFINITY) / temperature)
        .collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Token ids by descending probability; equal probabilities keep id order.
fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

/// The smallest set of most probable tokens whose mass reaches `p`.
pub fn nucleus(probs: &[f64], p: f64) -> Vec<usize> {
    let order = ranked(probs);
    let mut mass = 0.0;
    for (n, &i) in order.iter().enumerate() {
        mass += probs[i];
        if mass >= p {
            return order[..=n].to_vec();
        }
    }
    order
}

/// The candidate tokens a strategy samples from, with their probabilities
/// before renormalization.
pub fn sampling_support<F: Real>(
    logits: &[F],
    strategy: Sampling,
    temperature: f64,
) -> Result<Vec<(usize, f64)>> {
    validate_sampling(strategy, temperature)?;
    let probs = softmax_f64(logits, temperature);
    let keep = match strategy {
        Sampling::TopK(k) => {
            let mut order = ranked(&probs);
            order.truncate(k);
            order
        }
        Sampling::TopP(p) => nucleus(&probs, p),
    };
    Ok(keep.into_iter().map(|i| (i, probs[i])).collect())
}

pub fn sample_from_logits<F: Real, R: Rng + ?Sized>(
    logits: &[F],
    strategy: Sampling,
    temperature: f64,
    rng: &mut R,
) -> Result<u32> {
    let support = sampling_support(logits, strategy, temperature)?;
    let dist = WeightedIndex::new(support.iter().map(|(_, p)| *p))
        .map_err(|e| Error::Config(format!("degenerate distribution: {e}")))?;
    Ok(support[dist.sample(rng)].0 as u32)
}

/// Appends answer tokens after `context`, which must end with the answer
/// prompt, until the end token or `max_tokens`. Answer tokens carry the
/// answer type and positions 0, 1, 2, ….
pub fn greedy_decode<F: Real>(
    model: &ModelState<F>,
    context: SequenceView<'_>,
    stop: u32,
    max_tokens: usize,
) -> Result<Vec<u32>> {
    decode_with(model, context, stop, max_tokens, |logits| Ok(argmax(logits)))
}

pub fn sample_decode<F: Real, R: Rng + ?Sized>(
    model: &ModelState<F>,
    context: SequenceView<'_>,
    stop: u32,
    max_tokens: usize,
    strategy: Sampling,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<u32>> {
    validate_sampling(strategy, temperature)?;
    decode_with(model, context, stop, max_tokens, |logits| {
        sample_from_logits(logits, strategy, temperature, rng)
    })
}

fn decode_with<F: Real>(
    model: &ModelState<F>,
    context: SequenceView<'_>,
    stop: u32,
    max_tokens: usize,
    mut pick: impl FnMut(&[F]) -> Result<u32>,
) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    if max_tokens == 0 {
        return Ok(out);
    }
    let (mut cache, mut logits) = model.prefill(context)?;
    loop {
        let token = pick(&logits)?;
        if token == stop {
            break;
        }
        out.push(token);
        if out.len() == max_tokens {
            break;
        }
        logits = model.decode_step(&mut cache, token, Segment::Answer, out.len() as u32 - 1)?;
    }
    Ok(out)
}

/// Greedy decoding that re-runs the whole sequence at every step instead
/// of using the key/value cache.
pub fn greedy_decode_uncached<F: Real>(
    model: &ModelState<F>,
    context: SequenceView<'_>,
    stop: u32,
    max_tokens: usize,
) -> Result<Vec<u32>> {
    let mut tokens = context.token_ids.to_vec();
    let mut types = context.type_ids.to_vec();
    let mut positions = context.position_ids.to_vec();
    let v = model.config().vocab_size;
    let mut out = Vec::new();
    while out.len() < max_tokens {
        let mask = vec![0u8; tokens.len()];
        let seq = SequenceView {
            token_ids: &tokens,
            type_ids: &types,
            position_ids: &positions,
            loss_mask: &mask,
            answer_start: context.answer_start,
        };
        let logits = model.sequence_logits(seq, Mode::Eval)?;
        let last = &logits[(tokens.len() - 1) * v..];
        let token = argmax(last);
        if token == stop {
            break;
        }
        positions.push(out.len() as u32);
        out.push(token);
        tokens.push(token);
        types.push(Segment::Answer);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OovKind {
    None,
    Empty,
    Rearrangement,
    Blend,
    Other,
}

impl OovKind {
    pub const OOV: [OovKind; 4] = [OovKind::Empty, OovKind::Rearrangement, OovKind::Blend, OovKind::Other];

    pub fn name(self) -> &'static str {
        match self {
            OovKind::None => "none",
            OovKind::Empty => "empty",
            OovKind::Rearrangement => "rearrangement",
            OovKind::Blend => "blend",
            OovKind::Other => "other",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub generated_text: String,
    /// Set exactly when `oov_kind` is `None`.
    pub matched_class: Option<String>,
    pub class_index: Option<usize>,
    pub oov_kind: OovKind,
}

fn sorted_words(s: &str) -> Vec<&str> {
    let mut w: Vec<&str> = s.split_whitespace().collect();
    w.sort_unstable();
    w
}

pub fn match_answer(generated: &str, spec: &TaskSpec) -> Prediction {
    let trimmed = generated.trim();
    if let Some(i) = spec.class_index(trimmed) {
        return Prediction {
            generated_text: generated.to_string(),
            matched_class: Some(spec.descriptors[i].clone()),
            class_index: Some(i),
            oov_kind: OovKind::None,
        };
    }
    Prediction {
        generated_text: generated.to_string(),
        matched_class: None,
        class_index: None,
        oov_kind: classify_oov(trimmed, spec),
    }
}

fn classify_oov(trimmed: &str, spec: &TaskSpec) -> OovKind {
    if trimmed.is_empty() {
        return OovKind::Empty;
    }
    let words: Vec<&str> = trimmed.split_whitespace().collect();
    let bag = sorted_words(trimmed);
    let in_order = |d: &str| d.split_whitespace().eq(words.iter().copied());
    if spec
        .descriptors
        .iter()
        .any(|d| sorted_words(d) == bag && !in_order(d))
    {
        return OovKind::Rearrangement;
    }
    let sets: Vec<HashSet<&str>> = spec
        .descriptors
        .iter()
        .map(|d| d.split_whitespace().collect())
        .collect();
    let covered = words.iter().all(|w| sets.iter().any(|s| s.contains(w)));
    let single = sets.iter().any(|s| words.iter().all(|w| s.contains(w)));
    if covered && !single {
        return OovKind::Blend;
    }
    OovKind::Other
}

/// Produces an answer string for an example.
pub trait AnswerGenerator: Sync {
    /// `index` identifies the example within its evaluation set, for
    /// generators that sample.
    fn generate(&self, example: &ChoiceExample, index: usize) -> Result<String>;
}

/// Decodes answers from a trained model.
pub struct ModelGenerator<'a, F> {
    pub model: &'a ModelState<F>,
    pub vocab: &'a Vocabulary,
    pub encoder: EncoderConfig,
    pub decoder: Decoder,
    pub max_answer_tokens: usize,
    pub seed: u64,
}

impl<'a, F: Real> ModelGenerator<'a, F> {
    pub fn greedy(model: &'a ModelState<F>, vocab: &'a Vocabulary, encoder: EncoderConfig) -> Self {
        ModelGenerator {
            model,
            vocab,
            max_answer_tokens: encoder.max_answer_tokens,
            encoder,
            decoder: Decoder::Greedy,
            seed: 0,
        }
    }

    pub fn answer_tokens(&self, example: &ChoiceExample, index: usize) -> Result<Vec<u32>> {
        let ctx = encode_context(&example.question, &example.text, self.vocab, &self.encoder)?;
        let seq = SequenceView::of(&ctx);
        let stop = self.vocab.eot_id();
        match self.decoder {
            Decoder::Greedy => greedy_decode(self.model, seq, stop, self.max_answer_tokens),
            Decoder::Sample { strategy, temperature } => {
                let mut rng = stream_rng(self.seed, Stream::Decode, index as u64);
                sample_decode(self.model, seq, stop, self.max_answer_tokens, strategy, temperature, &mut rng)
            }
        }
    }
}

impl<F: Real> AnswerGenerator for ModelGenerator<'_, F> {
    fn generate(&self, example: &ChoiceExample, index: usize) -> Result<String> {
        let tokens = self.answer_tokens(example, index)?;
        self.vocab.decode(&tokens, false)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub descriptor: String,
    pub support: usize,
    pub predicted: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub random: f64,
    pub majority: f64,
    /// Where the majority class came from: "train" labels or, without
    /// them, the evaluation labels themselves.
    pub majority_source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub index: usize,
    pub gold: usize,
    pub prediction: Prediction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub descriptors: Vec<String>,
    pub examples: usize,
    pub accuracy: f64,
    pub oov_rate: f64,
    /// Gold class rows; one column per class, then one for OOV answers.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
    pub baselines: Baselines,
    pub oov_counts: BTreeMap<OovKind, usize>,
    pub oov_examples: BTreeMap<OovKind, Vec<String>>,
    pub predictions: Vec<PredictionRecord>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Gold class indices of the training split, for the majority baseline.
    pub train_labels: Option<Vec<usize>>,
    pub seed: u64,
}

/// Uniformly random class per example.
pub fn random_baseline<R: Rng + ?Sized>(num_classes: usize, gold: &[usize], rng: &mut R) -> Result<f64> {
    if num_classes < 2 {
        return Err(Error::Config("random baseline needs at least 2 classes".into()));
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let hits = gold.iter().filter(|&&g| rng.gen_range(0..num_classes) == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// The most frequent training class; ties go to the class listed first.
pub fn majority_class(num_classes: usize, train_labels: &[usize]) -> Result<usize> {
    if train_labels.is_empty() {
        return Err(Error::Config("majority baseline needs training labels".into()));
    }
    let mut counts = vec![0usize; num_classes];
    for &l in train_labels {
        *counts
            .get_mut(l)
            .ok_or_else(|| Error::Config(format!("label index {l} out of range")))? += 1;
    }
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn majority_baseline(num_classes: usize, train_labels: &[usize], gold: &[usize]) -> Result<f64> {
    let mode = majority_class(num_classes, train_labels)?;
    if gold.is_empty() {
        return Ok(0.0);
    }
    Ok(gold.iter().filter(|&&g| g == mode).count() as f64 / gold.len() as f64)
}

/// Gold class index of every example, from its answer.
pub fn gold_indices(spec: &TaskSpec, examples: &[ChoiceExample]) -> Result<Vec<usize>> {
    examples
        .iter()
        .map(|ex| {
            spec.class_index(&ex.answer).ok_or_else(|| {
                Error::TaskSpec(format!("answer {:?} is not a descriptor of {}", ex.answer, spec.name))
            })
        })
        .collect()
}

pub fn evaluate(
    generator: &dyn AnswerGenerator,
    spec: &TaskSpec,
    examples: &[ChoiceExample],
    options: &EvalOptions,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let gold = gold_indices(spec, examples)?;
    let predictions: Vec<Prediction> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| generator.generate(ex, i).map(|text| match_answer(&text, spec)))
        .collect::<Result<_>>()?;
    let records = gold
        .iter()
        .zip(predictions)
        .enumerate()
        .map(|(index, (&gold, prediction))| PredictionRecord {
            index,
            gold,
            prediction,
        })
        .collect();
    summarize(spec, records, options)
}

/// Aggregates per-example predictions into a report.
pub fn summarize(spec: &TaskSpec, predictions: Vec<PredictionRecord>, options: &EvalOptions) -> Result<EvalReport> {
    let k = spec.descriptors.len();
    let n = predictions.len();
    let mut confusion = vec![vec![0usize; k + 1]; k];
    let mut oov_counts: BTreeMap<OovKind, usize> = OovKind::OOV.iter().map(|&o| (o, 0)).collect();
    let mut oov_examples: BTreeMap<OovKind, Vec<String>> = BTreeMap::new();
    let mut correct = 0;
    for p in &predictions {
        let col = p.prediction.class_index.unwrap_or(k);
        confusion[p.gold][col] += 1;
        if col == p.gold {
            correct += 1;
        }
        if p.prediction.oov_kind != OovKind::None {
            *oov_counts.entry(p.prediction.oov_kind).or_default() += 1;
            let samples = oov_examples.entry(p.prediction.oov_kind).or_default();
            let text = p.prediction.generated_text.clone();
            if samples.len() < OOV_SAMPLES && !samples.contains(&text) {
                samples.push(text);
            }
        }
    }
    let oov: usize = confusion.iter().map(|row| row[k]).sum();
    let per_class = (0..k)
        .map(|c| {
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let tp = confusion[c][c];
            ClassMetrics {
                descriptor: spec.descriptors[c].clone(),
                support,
                predicted,
                precision: (predicted > 0).then(|| tp as f64 / predicted as f64),
                recall: (support > 0).then(|| tp as f64 / support as f64),
            }
        })
        .collect();
    let gold: Vec<usize> = predictions.iter().map(|p| p.gold).collect();
    let random = random_baseline(k, &gold, &mut stream_rng(options.seed, Stream::Baseline, 0))?;
    let (majority, majority_source) = match &options.train_labels {
        Some(train) => (majority_baseline(k, train, &gold)?, "train"),
        None => (majority_baseline(k, &gold, &gold)?, "eval"),
    };
    let denom = n.max(1) as f64;
    Ok(EvalReport {
        task: spec.name.clone(),
        descriptors: spec.descriptors.clone(),
        examples: n,
        accuracy: correct as f64 / denom,
        oov_rate: oov as f64 / denom,
        confusion,
        per_class,
        baselines: Baselines {
            random,
            majority,
            majority_source: majority_source.into(),
        },
        oov_counts,
        oov_examples,
        predictions,
    })
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn opt_pct(v: Option<f64>) -> String {
    v.map_or("-".into(), pct)
}

impl EvalReport {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task: {} ({} examples)", self.task, self.examples);
        let _ = writeln!(s, "accuracy: {}%", pct(self.accuracy));
        let _ = writeln!(s, "oov rate: {}%", pct(self.oov_rate));
        let _ = writeln!(s, "random baseline: {}%", pct(self.baselines.random));
        let _ = writeln!(
            s,
            "majority baseline: {}% (mode of {} labels)",
            pct(self.baselines.majority),
            self.baselines.majority_source
        );
        let kinds: Vec<String> = self
            .oov_counts
            .iter()
            .map(|(k, c)| format!("{} {c}", k.name()))
            .collect();
        let _ = writeln!(s, "oov kinds: {}", kinds.join(", "));
        for (kind, samples) in &self.oov_examples {
            let quoted: Vec<String> = samples.iter().map(|t| format!("{t:?}")).collect();
            let _ = writeln!(s, "  {}: {}", kind.name(), quoted.join(", "));
        }
        s.push('\n');

        let width = self
            .descriptors
            .iter()
            .map(|d| d.chars().count())
            .max()
            .unwrap_or(0)
            .max(10);
        let _ = writeln!(s, "{:<width$}  {:>7}  {:>9}  {:>6}", "class", "support", "precision", "recall");
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{:<width$}  {:>7}  {:>9}  {:>6}",
                c.descriptor,
                c.support,
                opt_pct(c.precision),
                opt_pct(c.recall)
            );
        }
        s.push('\n');
        s.push_str("confusion (rows gold, columns predicted):\n");
        let _ = write!(s, "{:<width$}", "");
        for i in 0..self.descriptors.len() {
            let _ = write!(s, " {:>6}", format!("[{i}]"));
        }
        let _ = writeln!(s, " {:>6}", "OOV");
        for (i, row) in self.confusion.iter().enumerate() {
            let _ = write!(s, "{:<width$}", format!("[{i}] {}", self.descriptors[i]));
            for v in row {
                let _ = write!(s, " {v:>6}");
            }
            s.push('\n');
        }
        s
    }

    pub fn confusion_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["gold".to_string()];
        header.extend(self.descriptors.iter().cloned());
        header.push("OOV".into());
        w.write_record(&header)?;
        for (d, row) in self.descriptors.iter().zip(&self.confusion) {
            let mut rec = vec![d.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Row-normalized confusion heatmap as SVG: green for high shares,
    /// yellow for middling, red for low.
    pub fn heatmap_svg(&self) -> String {
        heatmap_svg(&self.task, &self.descriptors, &self.confusion)
    }
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Red → yellow → green.
pub fn heat_color(value: f64) -> String {
    const RED: (f64, f64, f64) = (215.0, 48.0, 39.0);
    const YELLOW: (f64, f64, f64) = (254.0, 224.0, 139.0);
    const GREEN: (f64, f64, f64) = (26.0, 152.0, 80.0);
    let v = value.clamp(0.0, 1.0);
    let (a, b, t) = if v < 0.5 { (RED, YELLOW, v * 2.0) } else { (YELLOW, GREEN, (v - 0.5) * 2.0) };
    let mix = |x: f64, y: f64| (x + (y - x) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

pub fn heatmap_svg(title: &str, descriptors: &[String], confusion: &[Vec<usize>]) -> String {
    let cell = 56.0;
    let label_w = 8.0 * descriptors.iter().map(|d| d.chars().count()).max().unwrap_or(4) as f64 + 16.0;
    let cols = descriptors.len() + 1;
    let top = 40.0 + label_w;
    let width = label_w + cell * cols as f64 + 20.0;
    let height = top + cell * descriptors.len() as f64 + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<text x="10" y="20" font-size="14">{}</text>"#, escape_xml(title));
    let mut headers: Vec<String> = descriptors.to_vec();
    headers.push("OOV".into());
    for (j, h) in headers.iter().enumerate() {
        let x = label_w + cell * (j as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" transform="rotate(-60 {x} {})">{}</text>"#,
            top - 6.0,
            top - 6.0,
            escape_xml(h)
        );
    }
    for (i, row) in confusion.iter().enumerate() {
        let y = top + cell * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="8" y="{}">{}</text>"#,
            y + cell / 2.0 + 4.0,
            escape_xml(&descriptors[i])
        );
        let total: usize = row.iter().sum();
        for (j, &v) in row.iter().enumerate() {
            let share = if total > 0 { v as f64 / total as f64 } else { 0.0 };
            let x = label_w + cell * j as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{}" stroke="white"/>"#,
                heat_color(share)
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{v}</text>"#,
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// How one class's descriptor tokenizes under each variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorTokens {
    pub label: String,
    /// Per variant: descriptor and its answer-segment tokens.
    pub variants: Vec<(String, Vec<String>)>,
    pub differs: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub variants: Vec<EvalReport>,
    pub tokenization: Vec<DescriptorTokens>,
}

/// Evaluates the same records under several descriptor sets.
pub fn descriptor_study(
    generator: &dyn AnswerGenerator,
    vocab: &Vocabulary,
    variants: &[TaskSpec],
    records: &[LabeledRecord],
    template: TemplateChoice,
    options: &EvalOptions,
) -> Result<StudyReport> {
    let base = variants
        .first()
        .ok_or_else(|| Error::Config("a study needs at least one task spec".into()))?;
    for v in &variants[1..] {
        if v.label_map.keys().ne(base.label_map.keys()) {
            return Err(Error::TaskSpec(format!(
                "{} and {} cover different labels",
                base.name, v.name
            )));
        }
    }
    let reports = variants
        .iter()
        .map(|spec| {
            let examples = build_task_examples(spec, records, template, options.seed)?;
            evaluate(generator, spec, &examples, options)
        })
        .collect::<Result<Vec<_>>>()?;
    let tokenization = base
        .label_map
        .keys()
        .map(|label| {
            let per: Vec<(String, Vec<String>)> = variants
                .iter()
                .map(|spec| {
                    let d = spec.descriptor_for(label).expect("labels checked").to_string();
                    let tokens = vocab
                        .encode(&answer_rendering(&d))
                        .into_iter()
                        .map(|id| vocab.token_display(id).unwrap_or_default())
                        .collect();
                    (d, tokens)
                })
                .collect();
            let differs = per.windows(2).any(|w| w[0].1 != w[1].1);
            DescriptorTokens {
                label: label.clone(),
                variants: per,
                differs,
            }
        })
        .collect();
    Ok(StudyReport {
        variants: reports,
        tokenization,
    })
}

impl StudyReport {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let name_w = self.variants.iter().map(|r| r.task.len()).max().unwrap_or(7).max(7);
        let _ = writeln!(s, "{:<name_w$}  {:>8}  {:>7}  {:>7}", "variant", "accuracy", "oov", "random");
        for r in &self.variants {
            let _ = writeln!(
                s,
                "{:<name_w$}  {:>8}  {:>7}  {:>7}",
                r.task,
                pct(r.accuracy),
                pct(r.oov_rate),
                pct(r.baselines.random)
            );
        }
        if let (Some(first), Some(last)) = (self.variants.first(), self.variants.last()) {
            if self.variants.len() > 1 {
                let _ = writeln!(
                    s,
                    "accuracy change {} -> {}: {:+.2} points",
                    first.task,
                    last.task,
                    100.0 * (last.accuracy - first.accuracy)
                );
            }
        }
        s.push_str("\ntokenization per class (answer segment):\n");
        for t in &self.tokenization {
            let _ = writeln!(s, "label {}{}", t.label, if t.differs { "  [differs]" } else { "" });
            for (d, toks) in &t.variants {
                let shown: Vec<String> = toks.iter().map(|x| format!("{x:?}")).collect();
                let _ = writeln!(s, "  {:<30} {:>2} tokens: {}", format!("{d:?}"), toks.len(), shown.join(" "));
            }
        }
        for r in &self.variants {
            s.push('\n');
            s.push_str(&r.render_text());
        }
        s
    }
}
