//! Pretraining loop: decoupled-weight-decay Adam, linear warmup into a
//! single cosine cycle, global gradient-norm clipping, checkpoints, and a
//! JSON-lines metric stream.
//!
//! Every batch is a pure function of `(seed, step)`: the epoch permutation,
//! each example's sampling, and each dropout mask come from their own
//! counter-based streams. Resuming from a checkpoint at step `k` therefore
//! replays steps `k+1…` exactly as an uninterrupted run would.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::corpus::{validation_split, AnnotatedDocument};
use crate::encoding::{encode_example, pad_batch, EncodedExample, EncoderConfig};
use crate::error::{Error, Result};
use crate::grammar::NONE_OF_THE_ABOVE;
use crate::model::{Mode, ModelConfig, ModelState, ParamLayout, Real};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::sampler::{
    distractor_pool_build, sample_pretraining_example, ChoiceExample, SampleOverrides,
    SamplerConfig, TitlePool,
};
use crate::tokenizer::Vocabulary;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LATEST_CHECKPOINT: &str = "latest.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps instead of `epochs` passes.
    pub max_steps: Option<usize>,
    /// Documents held out for validation loss.
    pub validation_size: usize,
    /// Also validate every this many steps, besides each epoch end.
    pub validate_every: Option<usize>,
    /// Write a resumable checkpoint every this many steps.
    pub checkpoint_every: Option<usize>,
    /// Keep one checkpoint file per epoch instead of overwriting
    /// `latest.safetensors`.
    pub keep_epoch_checkpoints: bool,
    /// Abort when more than this fraction of sampled examples cannot be
    /// encoded.
    pub max_unencodable_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::full()
    }
}

impl TrainConfig {
    /// Full-data profile.
    pub fn full() -> Self {
        TrainConfig {
            learning_rate: 4e-5,
            batch_size: 128,
            epochs: 10,
            warmup_fraction: 0.01,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            max_steps: None,
            validation_size: 2000,
            validate_every: None,
            checkpoint_every: None,
            keep_epoch_checkpoints: false,
            max_unencodable_rate: 0.5,
        }
    }

    /// Quarter-data profile.
    pub fn quarter() -> Self {
        TrainConfig {
            learning_rate: 3e-5,
            batch_size: 32,
            ..TrainConfig::full()
        }
    }

    /// Settings for a from-scratch model of a few million parameters on a
    /// synthetic corpus, which needs a far larger step size than
    /// fine-tuning a pretrained one.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            warmup_fraction: 0.05,
            validation_size: 200,
            ..TrainConfig::full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "quarter" => Ok(Self::quarter()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected full, quarter, or desk)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return fail("warmup_fraction must lie in (0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return fail("clip_norm must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return fail("adam_epsilon must be positive");
        }
        if self.max_steps == Some(0) || (self.max_steps.is_none() && self.epochs == 0) {
            return fail("training needs at least one step");
        }
        if !(0.0..=1.0).contains(&self.max_unencodable_rate) {
            return fail("max_unencodable_rate must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Everything a training run is configured by.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub encoder: EncoderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            encoder: EncoderConfig {
                max_seq_len: model.max_seq_len,
                ..EncoderConfig::default()
            },
            model,
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        self.encoder.validate()?;
        if self.encoder.max_seq_len > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "encoder max_seq_len {} exceeds the model's position table {}",
                self.encoder.max_seq_len, self.model.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

/// Number of warmup steps for a run of `total_steps`.
pub fn warmup_steps(total_steps: usize, cfg: &TrainConfig) -> usize {
    let w = (total_steps as f64 * cfg.warmup_fraction).ceil() as usize;
    w.clamp(1, total_steps.max(1))
}

/// Learning rate after `step` of `total_steps` updates: a linear ramp to
/// the peak over the warmup, then half a cosine period down to zero.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!("step {step} beyond total {total_steps}")));
    }
    let peak = cfg.learning_rate;
    let warmup = warmup_steps(total_steps, cfg);
    if step <= warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(peak * 0.5 * (1.0 + (PI * progress).cos()))
}

/// First and second moment estimates, same layout as the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    /// Completed updates.
    pub step: usize,
}

impl<F: Real> AdamState<F> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![F::zero(); len],
            v: vec![F::zero(); len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay: entries
/// flagged in `decay` are first multiplied by `1 - lr·λ`. Rejects the step
/// without touching any state if a gradient is not finite.
pub fn optimizer_step<F: Real>(
    params: &mut [F],
    grads: &[F],
    state: &mut AdamState<F>,
    decay: &[bool],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n || decay.len() != n {
        return Err(Error::Shape("optimizer buffers differ in length".into()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("parameter index {i}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let shrink = 1.0 - lr * cfg.weight_decay;
    for i in 0..n {
        let g = grads[i].to_f64().unwrap_or(0.0);
        let m = b1 * state.m[i].to_f64().unwrap_or(0.0) + (1.0 - b1) * g;
        let v = b2 * state.v[i].to_f64().unwrap_or(0.0) + (1.0 - b2) * g * g;
        state.m[i] = F::lit(m);
        state.v[i] = F::lit(v);
        let mut w = params[i].to_f64().unwrap_or(0.0);
        if decay[i] {
            w *= shrink;
        }
        w -= lr * (m / c1) / ((v / c2).sqrt() + cfg.adam_epsilon);
        params[i] = F::lit(w);
    }
    Ok(())
}

/// Euclidean norm of the whole gradient, accumulated in f64.
pub fn global_norm<F: Real>(grads: &[F]) -> f64 {
    grads
        .iter()
        .map(|g| {
            let g = g.to_f64().unwrap_or(f64::NAN);
            g * g
        })
        .sum::<f64>()
        .sqrt()
}

/// Scales `grads` to norm `clip_norm` if it is larger; returns the norm
/// before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut [F], clip_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip_norm {
        let scale = F::lit(clip_norm / norm);
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// `None` when every example of the batch was unencodable.
    pub loss: Option<f64>,
    pub answer_loss: Option<f64>,
    pub grad_norm: Option<f64>,
    /// The update was skipped because of a non-finite gradient.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub rejected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub answer_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainReport {
    pub steps: Vec<StepMetrics>,
    pub validation: Vec<ValidationMetrics>,
    pub wall_clock_secs: f64,
    pub final_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub skipped_examples: usize,
    pub seen_examples: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format: u32,
    step: usize,
    optimizer_updates: usize,
    best_validation: Option<f64>,
    skipped_examples: usize,
    seen_examples: usize,
    config: RunConfig,
    merges: String,
}

const CHECKPOINT_FORMAT: u32 = 1;
const META_KEY: &str = "zeroshot";

/// Model, optimizer moments, and run position.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub best_validation: Option<f64>,
    pub skipped_examples: usize,
    pub seen_examples: usize,
    /// Tokenizer merges, so a checkpoint is usable on its own.
    pub merges: String,
    pub model: ModelState<f32>,
    pub adam: AdamState<f32>,
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn bytes_f32(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let layout = self.model.layout();
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (prefix, buf) in [
            ("model", &self.model.params),
            ("adam_m", &self.adam.m),
            ("adam_v", &self.adam.v),
        ] {
            for t in layout.tensors() {
                owned.push((format!("{prefix}/{}", t.name), t.shape.clone(), f32_bytes(&buf[t.range()])));
            }
        }
        let views = owned
            .iter()
            .map(|(name, shape, data)| {
                TensorView::new(Dtype::F32, shape.clone(), data)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT,
            step: self.step,
            optimizer_updates: self.adam.step,
            best_validation: self.best_validation,
            skipped_examples: self.skipped_examples,
            seen_examples: self.seen_examples,
            config: self.config.clone(),
            merges: self.merges.clone(),
        };
        // A single metadata entry keeps the header byte-stable.
        let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta)?)]);
        safetensors::serialize(views, Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = |e: safetensors::SafeTensorError| Error::Checkpoint(e.to_string());
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(ck)?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint("missing run metadata".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(raw)?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format {}", meta.format)));
        }
        let tensors = SafeTensors::deserialize(bytes).map_err(ck)?;
        let layout = ParamLayout::new(&meta.config.model);
        let mut bufs = [vec![0f32; layout.len()], vec![0f32; layout.len()], vec![0f32; layout.len()]];
        for (prefix, buf) in ["model", "adam_m", "adam_v"].iter().zip(bufs.iter_mut()) {
            for t in layout.tensors() {
                let name = format!("{prefix}/{}", t.name);
                let view = tensors.tensor(&name).map_err(ck)?;
                if view.dtype() != Dtype::F32 || view.shape() != t.shape.as_slice() {
                    return Err(Error::Checkpoint(format!("tensor {name} has wrong dtype or shape")));
                }
                buf[t.range()].copy_from_slice(&bytes_f32(view.data()));
            }
        }
        let [params, m, v] = bufs;
        Ok(Checkpoint {
            model: ModelState::from_params(meta.config.model.clone(), params)?,
            adam: AdamState {
                m,
                v,
                step: meta.optimizer_updates,
            },
            config: meta.config,
            step: meta.step,
            best_validation: meta.best_validation,
            skipped_examples: meta.skipped_examples,
            seen_examples: meta.seen_examples,
            merges: meta.merges,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_merges_text(&self.merges)
    }
}

/// Drives pretraining over a fixed document set.
pub struct Trainer<'a> {
    config: RunConfig,
    vocab: &'a Vocabulary,
    train_docs: Vec<AnnotatedDocument>,
    pool: TitlePool,
    validation: Vec<EncodedExample>,
    decay: Vec<bool>,
    pub model: ModelState<f32>,
    pub adam: AdamState<f32>,
    step: usize,
    best_validation: Option<f64>,
    skipped: usize,
    seen: usize,
}

fn has_title(doc: &AnnotatedDocument) -> bool {
    doc.titles().any(|t| t != NONE_OF_THE_ABOVE)
}

impl<'a> Trainer<'a> {
    /// Splits off the validation documents and initializes a fresh model.
    pub fn new(config: RunConfig, vocab: &'a Vocabulary, docs: Vec<AnnotatedDocument>) -> Result<Self> {
        let model = ModelState::init(config.model.clone(), derive_seed(config.train.seed, Stream::Init, 0))?;
        Self::assemble(config, vocab, docs, model, None, 0, None, 0, 0)
    }

    /// Continues the run stored in `checkpoint` on the same documents.
    pub fn resume(checkpoint: Checkpoint, vocab: &'a Vocabulary, docs: Vec<AnnotatedDocument>) -> Result<Self> {
        let Checkpoint {
            config,
            step,
            best_validation,
            skipped_examples,
            seen_examples,
            model,
            adam,
            ..
        } = checkpoint;
        Self::assemble(
            config,
            vocab,
            docs,
            model,
            Some(adam),
            step,
            best_validation,
            skipped_examples,
            seen_examples,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: RunConfig,
        vocab: &'a Vocabulary,
        docs: Vec<AnnotatedDocument>,
        model: ModelState<f32>,
        adam: Option<AdamState<f32>>,
        step: usize,
        best_validation: Option<f64>,
        skipped: usize,
        seen: usize,
    ) -> Result<Self> {
        config.validate()?;
        if config.model.vocab_size != vocab.vocab_size() {
            return Err(Error::Config(format!(
                "model vocab_size {} differs from tokenizer size {}",
                config.model.vocab_size,
                vocab.vocab_size()
            )));
        }
        let before = docs.len();
        let docs: Vec<AnnotatedDocument> = docs.into_iter().filter(has_title).collect();
        if docs.len() < before {
            log::warn!("{} documents without titles skipped", before - docs.len());
        }
        let val_size = config.train.validation_size.min(docs.len() / 2);
        let (val_idx, train_idx) = validation_split(docs.len(), val_size, config.train.seed);
        let mut slots: Vec<Option<AnnotatedDocument>> = docs.into_iter().map(Some).collect();
        let val_docs: Vec<AnnotatedDocument> = val_idx.iter().map(|&i| slots[i].take().expect("unique")).collect();
        let train_docs: Vec<AnnotatedDocument> =
            train_idx.iter().map(|&i| slots[i].take().expect("unique")).collect();
        if train_docs.len() < 2 {
            return Err(Error::EmptyCorpus);
        }
        let pool = distractor_pool_build(&train_docs);

        let mut validation = Vec::with_capacity(val_docs.len());
        for (i, doc) in val_docs.iter().enumerate() {
            let mut rng = stream_rng(config.train.seed, Stream::Validation, i as u64);
            let ex = sample_pretraining_example(doc, None, &pool, &config.sampler, &mut rng, SampleOverrides::default())?;
            match encode_example(&ex, vocab, &config.encoder) {
                Ok(e) => validation.push(e),
                Err(Error::Unencodable(_)) => {}
                Err(e) => return Err(e),
            }
        }
        let decay = model.layout().decay_mask();
        let adam = adam.unwrap_or_else(|| AdamState::new(model.params.len()));
        Ok(Trainer {
            config,
            vocab,
            train_docs,
            pool,
            validation,
            decay,
            model,
            adam,
            step,
            best_validation,
            skipped,
            seen,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Completed steps, including any whose update was skipped.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn train_documents(&self) -> usize {
        self.train_docs.len()
    }

    pub fn validation_examples(&self) -> usize {
        self.validation.len()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_docs.len().div_ceil(self.config.train.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.config
            .train
            .max_steps
            .unwrap_or(self.config.train.epochs * self.steps_per_epoch())
    }

    /// The examples of 0-based step `step`.
    pub fn batch_examples(&self, step: usize) -> Result<Vec<ChoiceExample>> {
        let spe = self.steps_per_epoch();
        let (epoch, k) = (step / spe, step % spe);
        let mut order: Vec<usize> = (0..self.train_docs.len()).collect();
        order.shuffle(&mut stream_rng(self.config.train.seed, Stream::EpochOrder, epoch as u64));
        let b = self.config.train.batch_size;
        let chosen = &order[k * b..((k + 1) * b).min(order.len())];
        chosen
            .iter()
            .map(|&d| {
                let index = (epoch * self.train_docs.len() + d) as u64;
                let mut rng = stream_rng(self.config.train.seed, Stream::Example, index);
                sample_pretraining_example(
                    &self.train_docs[d],
                    Some(d),
                    &self.pool,
                    &self.config.sampler,
                    &mut rng,
                    SampleOverrides::default(),
                )
            })
            .collect()
    }

    /// Runs the next optimizer step.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let step = self.step();
        let total = self.total_steps();
        if step >= total {
            return Err(Error::Config(format!("run already finished at step {total}")));
        }
        let epoch = step / self.steps_per_epoch();
        let examples = self.batch_examples(step)?;
        let mut encoded = Vec::with_capacity(examples.len());
        for ex in &examples {
            self.seen += 1;
            match encode_example(ex, self.vocab, &self.config.encoder) {
                Ok(e) => encoded.push(e),
                Err(Error::Unencodable(reason)) => {
                    self.skipped += 1;
                    log::debug!("skipping unencodable example: {reason}");
                }
                Err(e) => return Err(e),
            }
        }
        if self.skipped as f64 > self.config.train.max_unencodable_rate * self.seen as f64
            && self.seen >= self.config.train.batch_size
        {
            return Err(Error::UnencodableRate {
                skipped: self.skipped,
                seen: self.seen,
            });
        }
        let lr = lr_at(step + 1, total, &self.config.train)?;
        let mut metrics = StepMetrics {
            step: step + 1,
            epoch,
            lr,
            loss: None,
            answer_loss: None,
            grad_norm: None,
            rejected: false,
        };
        if encoded.is_empty() {
            log::warn!("step {} has no encodable examples", step + 1);
            self.step += 1;
            return Ok(metrics);
        }
        let batch = pad_batch(&encoded, self.vocab.eot_id())?;
        let dropout_seed = derive_seed(self.config.train.seed, Stream::Dropout, step as u64);
        let mut out = self.model.loss_and_grads(&batch, Mode::Train { dropout_seed })?;
        let norm = clip_global_norm(&mut out.grads, self.config.train.clip_norm);
        metrics.loss = Some(out.loss);
        metrics.answer_loss = out.answer_loss;
        metrics.grad_norm = norm.is_finite().then_some(norm);
        match optimizer_step(
            &mut self.model.params,
            &out.grads,
            &mut self.adam,
            &self.decay,
            &self.config.train,
            lr,
        ) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient(at)) => {
                let index: usize = at.rsplit(' ').next().and_then(|s| s.parse().ok()).unwrap_or(0);
                let name = self
                    .model
                    .layout()
                    .tensors()
                    .iter()
                    .find(|t| t.range().contains(&index))
                    .map_or("?", |t| t.name.as_str());
                log::warn!("step {} rejected: non-finite gradient in {name}", step + 1);
                metrics.rejected = true;
            }
            Err(e) => return Err(e),
        }
        self.step += 1;
        Ok(metrics)
    }

    /// Eval-mode loss over the fixed validation examples.
    pub fn validate(&self) -> Result<Option<ValidationMetrics>> {
        if self.validation.is_empty() {
            return Ok(None);
        }
        let mut nll = 0.0;
        let mut tokens = 0usize;
        let mut answer_nll = 0.0;
        let mut answer_tokens = 0usize;
        for chunk in self.validation.chunks(self.config.train.batch_size.max(1)) {
            let out = self.model.loss(&pad_batch(chunk, self.vocab.eot_id())?, Mode::Eval)?;
            nll += out.loss * out.loss_tokens as f64;
            tokens += out.loss_tokens;
            if let Some(a) = out.answer_loss {
                answer_nll += a * out.answer_tokens as f64;
                answer_tokens += out.answer_tokens;
            }
        }
        let step = self.step();
        Ok(Some(ValidationMetrics {
            step,
            epoch: step.saturating_sub(1) / self.steps_per_epoch(),
            loss: nll / tokens as f64,
            answer_loss: (answer_tokens > 0).then(|| answer_nll / answer_tokens as f64),
        }))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step(),
            best_validation: self.best_validation,
            skipped_examples: self.skipped,
            seen_examples: self.seen,
            merges: self.vocab.merges_text(),
            model: self.model.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Trains until `stop_at` (or the end of the run), streaming metrics
    /// to `out/metrics.jsonl` and writing checkpoints there when `out` is
    /// given.
    pub fn run(&mut self, out: Option<&Path>, stop_at: Option<usize>) -> Result<TrainReport> {
        let started = Instant::now();
        let total = self.total_steps();
        let stop = stop_at.unwrap_or(total).min(total);
        let spe = self.steps_per_epoch();
        let mut metrics_out = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(METRICS_FILE);
                let file = File::options()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((BufWriter::new(file), path))
            }
            None => None,
        };
        let mut report = TrainReport::default();
        let log_every = (total / 20).max(1);
        while self.step() < stop {
            let m = self.train_step()?;
            if let Some((w, path)) = metrics_out.as_mut() {
                serde_json::to_writer(&mut *w, &m)?;
                writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            if m.step % log_every == 0 || m.step == total {
                log::info!(
                    "step {}/{} lr {:.3e} loss {}",
                    m.step,
                    total,
                    m.lr,
                    m.loss.map_or("-".into(), |l| format!("{l:.4}"))
                );
            }
            let s = m.step;
            report.steps.push(m);

            let epoch_end = s % spe == 0 || s == total;
            let periodic = self.config.train.validate_every.is_some_and(|k| s % k == 0);
            if epoch_end || periodic {
                if let Some(v) = self.validate()? {
                    log::info!("step {s} validation loss {:.4}", v.loss);
                    let improved = self.best_validation.is_none_or(|b| v.loss < b);
                    if improved {
                        self.best_validation = Some(v.loss);
                        if let Some(dir) = out {
                            let path = dir.join(BEST_CHECKPOINT);
                            self.checkpoint().save(&path)?;
                            report.best_checkpoint = Some(path);
                        }
                    }
                    report.validation.push(v);
                }
            }
            if let Some(dir) = out {
                if epoch_end {
                    let name = if self.config.train.keep_epoch_checkpoints {
                        format!("epoch-{}.safetensors", (s - 1) / spe + 1)
                    } else {
                        LATEST_CHECKPOINT.to_string()
                    };
                    self.checkpoint().save(&dir.join(name))?;
                }
                if self.config.train.checkpoint_every.is_some_and(|k| s % k == 0) {
                    self.checkpoint().save(&dir.join(format!("step-{s}.safetensors")))?;
                }
            }
        }
        if let Some(dir) = out {
            if self.step() == total {
                let path = dir.join(FINAL_CHECKPOINT);
                self.checkpoint().save(&path)?;
                report.final_checkpoint = Some(path);
            }
        }
        report.wall_clock_secs = started.elapsed().as_secs_f64();
        report.skipped_examples = self.skipped;
        report.seen_examples = self.seen;
        Ok(report)
    }
}

/// Drops metric lines past `step` from a run's metrics file, so a run
/// resumed from a checkpoint at `step` continues the stream exactly.
pub fn truncate_metrics(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::with_capacity(text.len());
    for (i, line) in text.lines().enumerate() {
        let m: StepMetrics = serde_json::from_str(line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if m.step <= step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Trains a fresh model on one example repeated, without dropout. Used as
/// a memorization probe: a working model and decoder must reproduce the
/// answer afterwards.
pub fn overfit_single_example(
    example: &EncodedExample,
    model_config: ModelConfig,
    steps: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<ModelState<f32>> {
    let model_config = ModelConfig {
        dropout_attn: 0.0,
        dropout_hidden: 0.0,
        ..model_config
    };
    let cfg = TrainConfig {
        learning_rate,
        warmup_fraction: 0.05,
        weight_decay: 0.0,
        ..TrainConfig::full()
    };
    let mut model = ModelState::<f32>::init(model_config, seed)?;
    let decay = model.layout().decay_mask();
    let mut adam = AdamState::new(model.params.len());
    let batch = pad_batch(std::slice::from_ref(example), 0)?;
    for step in 1..=steps {
        let mut out = model.loss_and_grads(&batch, Mode::Eval)?;
        clip_global_norm(&mut out.grads, cfg.clip_norm);
        let lr = lr_at(step, steps, &cfg)?;
        optimizer_step(&mut model.params, &out.grads, &mut adam, &decay, &cfg, lr)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_at_least_one_step() {
        let cfg = TrainConfig::full();
        assert_eq!(warmup_steps(10, &cfg), 1);
        assert_eq!(warmup_steps(1000, &cfg), 10);
        assert_eq!(warmup_steps(1001, &cfg), 11);
    }

    #[test]
    fn lr_errors() {
        let cfg = TrainConfig::full();
        assert!(lr_at(0, 0, &cfg).is_err());
        assert!(lr_at(11, 10, &cfg).is_err());
        assert_eq!(lr_at(0, 10, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn presets_validate() {
        for name in ["full", "quarter", "desk"] {
            TrainConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(TrainConfig::preset("huge").is_err());
        let q = TrainConfig::quarter();
        assert_eq!((q.learning_rate, q.batch_size), (3e-5, 32));
        let bad = TrainConfig {
            warmup_fraction: 0.0,
            ..TrainConfig::full()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn run_config_toml_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string();
        assert!(text.contains("learning_rate = 4e-5") || text.contains("learning_rate = 0.00004"));
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        let partial = RunConfig::from_toml_str("[train]\nbatch_size = 8\n").unwrap();
        assert_eq!(partial.train.batch_size, 8);
        assert_eq!(partial.train.epochs, 10);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_side_effects() {
        let cfg = TrainConfig::full();
        let mut params = vec![1.0f32, 2.0];
        let mut state = AdamState::new(2);
        let r = optimizer_step(&mut params, &[0.1, f32::NAN], &mut state, &[true, true], &cfg, 0.1);
        assert!(matches!(r, Err(Error::NonFiniteGradient(_))));
        assert_eq!(params, vec![1.0, 2.0]);
        assert_eq!(state, AdamState::new(2));
    }
}
