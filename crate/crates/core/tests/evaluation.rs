use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zeroshot::encoding::{encode_context, EncoderConfig, SequenceView};
use zeroshot::evaluation::{
    descriptor_study, evaluate, greedy_decode, greedy_decode_uncached, majority_baseline, match_answer,
    nucleus, random_baseline, sample_decode, sampling_support, AnswerGenerator, Decoder, EvalOptions,
    ModelGenerator, OovKind, Sampling,
};
use zeroshot::model::{ModelConfig, ModelState};
use zeroshot::sampler::{build_task_examples, ChoiceExample, LabeledRecord, TaskSpec, TemplateChoice};
use zeroshot::tokenizer::Vocabulary;
use zeroshot::Result;

struct Echo;

impl AnswerGenerator for Echo {
    fn generate(&self, example: &ChoiceExample, _index: usize) -> Result<String> {
        Ok(example.answer.clone())
    }
}

struct Silent;

impl AnswerGenerator for Silent {
    fn generate(&self, _example: &ChoiceExample, _index: usize) -> Result<String> {
        Ok(String::new())
    }
}

/// Always answers with the first descriptor.
struct Constant(String);

impl AnswerGenerator for Constant {
    fn generate(&self, _example: &ChoiceExample, _index: usize) -> Result<String> {
        Ok(self.0.clone())
    }
}

fn small_spec() -> TaskSpec {
    let descriptors = vec!["Red Fox".to_string(), "Blue Whale".to_string(), "Green Frog".to_string()];
    let label_map: BTreeMap<String, String> = [("a", "Red Fox"), ("b", "Blue Whale"), ("c", "Green Frog")]
        .into_iter()
        .map(|(l, d)| (l.to_string(), d.to_string()))
        .collect();
    TaskSpec::new("small", descriptors, label_map).unwrap()
}

fn records(labels: &[&str]) -> Vec<LabeledRecord> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| LabeledRecord {
            label: l.to_string(),
            text: format!("document number {i}"),
        })
        .collect()
}

fn tiny_model(vocab: usize, seed: u64) -> ModelState<f64> {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: vocab,
        max_seq_len: 128,
        dropout_attn: 0.0,
        dropout_hidden: 0.0,
        init_scale: 0.5,
        tie_lm_head: false,
    };
    ModelState::init(cfg, seed).unwrap()
}

fn encoder() -> EncoderConfig {
    EncoderConfig {
        max_seq_len: 128,
        max_answer_tokens: 6,
    }
}

#[test]
fn echo_and_silent_generators() {
    let spec = small_spec();
    let recs = records(&["a", "b", "c", "a", "b", "c", "a"]);
    let examples = build_task_examples(&spec, &recs, TemplateChoice::Random, 3).unwrap();
    let opts = EvalOptions::default();
    let echo = evaluate(&Echo, &spec, &examples, &opts).unwrap();
    assert_eq!(echo.accuracy, 1.0);
    assert_eq!(echo.oov_rate, 0.0);
    let silent = evaluate(&Silent, &spec, &examples, &opts).unwrap();
    assert_eq!(silent.accuracy, 0.0);
    assert_eq!(silent.oov_rate, 1.0);
    assert_eq!(silent.oov_counts[&OovKind::Empty], 7);
    assert!(silent.confusion.iter().all(|row| row[3] == row.iter().sum::<usize>()));
}

#[test]
fn confusion_and_per_class_metrics() {
    let spec = small_spec();
    let recs = records(&["a", "a", "b", "c"]);
    let examples = build_task_examples(&spec, &recs, TemplateChoice::Fixed(1), 0).unwrap();
    let report = evaluate(&Constant("Red Fox".into()), &spec, &examples, &EvalOptions::default()).unwrap();
    assert_eq!(report.confusion, vec![vec![2, 0, 0, 0], vec![1, 0, 0, 0], vec![1, 0, 0, 0]]);
    assert_eq!(report.accuracy, 0.5);
    assert_eq!(report.per_class[0].precision, Some(0.5));
    assert_eq!(report.per_class[0].recall, Some(1.0));
    assert_eq!(report.per_class[1].precision, None);
    assert_eq!(report.per_class[1].recall, Some(0.0));
    assert_eq!(report.baselines.majority, 0.5);
    assert_eq!(report.baselines.majority_source, "eval");

    let csv = report.confusion_csv().unwrap();
    assert_eq!(csv.lines().next().unwrap(), "gold,Red Fox,Blue Whale,Green Frog,OOV");
    assert_eq!(csv.lines().nth(1).unwrap(), "Red Fox,2,0,0,0");
    let svg = report.heatmap_svg();
    assert!(svg.starts_with("<svg") && svg.contains("#1a9850"));
    assert!(report.render_text().contains("accuracy: 50.00%"));
}

#[test]
fn predictions_keep_example_order() {
    let spec = small_spec();
    let recs = records(&["c", "b", "a", "c", "b"]);
    let examples = build_task_examples(&spec, &recs, TemplateChoice::Random, 9).unwrap();
    let report = evaluate(&Echo, &spec, &examples, &EvalOptions::default()).unwrap();
    let gold: Vec<usize> = report.predictions.iter().map(|p| p.gold).collect();
    assert_eq!(gold, vec![2, 1, 0, 2, 1]);
}

#[test]
fn oov_taxonomy() {
    let yahoo = TaskSpec::builtin("yahoo").unwrap();
    assert_eq!(match_answer("", &yahoo).oov_kind, OovKind::Empty);
    assert_eq!(match_answer("   ", &yahoo).oov_kind, OovKind::Empty);
    assert_eq!(match_answer("Education & Mathematics", &yahoo).oov_kind, OovKind::Blend);
    assert_eq!(match_answer("Mathematics & Science", &yahoo).oov_kind, OovKind::Rearrangement);
    assert_eq!(match_answer("Cooking", &yahoo).oov_kind, OovKind::Other);
    // A strict subset of one descriptor is not a blend.
    assert_eq!(match_answer("Science", &yahoo).oov_kind, OovKind::Other);
    let hit = match_answer(" Sports ", &yahoo);
    assert_eq!(hit.oov_kind, OovKind::None);
    assert_eq!(hit.matched_class.as_deref(), Some("Sports"));
    // Matching is case sensitive.
    assert_eq!(match_answer("sports", &yahoo).oov_kind, OovKind::Other);
}

#[test]
fn random_baseline_is_near_one_over_k() {
    let gold: Vec<usize> = (0..100_000).map(|i| i % 14).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let acc = random_baseline(14, &gold, &mut rng).unwrap();
    assert!((acc - 1.0 / 14.0).abs() <= 0.01, "{acc}");
}

#[test]
fn majority_ties_break_in_spec_order() {
    let train = [2, 1, 2, 1, 0];
    let gold = [1, 1, 2];
    assert_eq!(majority_baseline(3, &train, &gold).unwrap(), 2.0 / 3.0);
    assert!(majority_baseline(3, &[], &gold).is_err());
}

#[test]
fn majority_uses_train_labels_when_given() {
    let spec = small_spec();
    let recs = records(&["a", "b", "b"]);
    let examples = build_task_examples(&spec, &recs, TemplateChoice::Fixed(2), 0).unwrap();
    let opts = EvalOptions {
        train_labels: Some(vec![0, 0, 0]),
        seed: 0,
    };
    let report = evaluate(&Echo, &spec, &examples, &opts).unwrap();
    assert!((report.baselines.majority - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(report.baselines.majority_source, "train");
}

#[test]
fn nucleus_is_smallest_prefix() {
    let probs = [0.1, 0.4, 0.2, 0.3];
    assert_eq!(nucleus(&probs, 0.4), vec![1]);
    assert_eq!(nucleus(&probs, 0.5), vec![1, 3]);
    assert_eq!(nucleus(&probs, 0.85), vec![1, 3, 2]);
    assert_eq!(nucleus(&probs, 1.0), vec![1, 3, 2, 0]);
}

#[test]
fn top_k_of_one_is_greedy() {
    let logits = [0.3f32, -1.0, 2.5, 2.4];
    let s = sampling_support(&logits, Sampling::TopK(1), 0.7).unwrap();
    assert_eq!(s.len(), 1);
    assert_eq!(s[0].0, 2);
}

#[test]
fn zero_answer_budget_generates_nothing() {
    let vocab = Vocabulary::byte_level();
    let model = tiny_model(vocab.vocab_size(), 1);
    let ctx = encode_context("Is it A or B?", "some text", &vocab, &encoder()).unwrap();
    assert!(greedy_decode(&model, SequenceView::of(&ctx), vocab.eot_id(), 0).unwrap().is_empty());
}

#[test]
fn sampling_is_seeded() {
    let vocab = Vocabulary::byte_level();
    let model = tiny_model(vocab.vocab_size(), 2);
    let ctx = encode_context("Is it A or B?", "text", &vocab, &encoder()).unwrap();
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_decode(&model, SequenceView::of(&ctx), vocab.eot_id(), 6, Sampling::TopP(0.9), 1.0, &mut rng).unwrap()
    };
    assert_eq!(run(4), run(4));
}

#[test]
fn model_generator_reports_every_example() {
    let vocab = Vocabulary::byte_level();
    let model = tiny_model(vocab.vocab_size(), 3);
    let spec = small_spec();
    let recs = records(&["a", "b", "c"]);
    let examples = build_task_examples(&spec, &recs, TemplateChoice::Fixed(1), 0).unwrap();
    let mut generator = ModelGenerator::greedy(&model, &vocab, encoder());
    let greedy = evaluate(&generator, &spec, &examples, &EvalOptions::default()).unwrap();
    assert_eq!(greedy.predictions.len(), 3);
    generator.decoder = "topk:5".parse::<Decoder>().unwrap();
    generator.seed = 11;
    let a = evaluate(&generator, &spec, &examples, &EvalOptions::default()).unwrap();
    let b = evaluate(&generator, &spec, &examples, &EvalOptions::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn study_reports_tokenization_differences() {
    let vocab = Vocabulary::byte_level();
    let spec = small_spec();
    let stripped = spec
        .map_descriptors("small-stripped", |d| d.replace(' ', ""))
        .unwrap();
    let recs = records(&["a", "b", "c", "a"]);
    let study = descriptor_study(
        &Echo,
        &vocab,
        &[spec, stripped],
        &recs,
        TemplateChoice::Fixed(1),
        &EvalOptions::default(),
    )
    .unwrap();
    assert_eq!(study.variants.len(), 2);
    assert!(study.tokenization.iter().all(|t| t.differs));
    let text = study.render_text();
    assert!(text.contains("small-stripped") && text.contains("\"RedFox\""));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cached_decoding_matches_recompute(seed in 0u64..1000, question in "[a-z ]{1,20}", text in "[a-z ]{0,30}") {
        let vocab = Vocabulary::byte_level();
        let model = tiny_model(vocab.vocab_size(), seed);
        let ctx = encode_context(&format!("{question}?"), &text, &vocab, &encoder()).unwrap();
        let seq = SequenceView::of(&ctx);
        let cached = greedy_decode(&model, seq, vocab.eot_id(), 6).unwrap();
        let full = greedy_decode_uncached(&model, seq, vocab.eot_id(), 6).unwrap();
        prop_assert_eq!(cached, full);
    }

    #[test]
    fn nucleus_reaches_mass(weights in prop::collection::vec(0.01f64..1.0, 1..20), p in 0.05f64..1.0) {
        let z: f64 = weights.iter().sum();
        let probs: Vec<f64> = weights.iter().map(|w| w / z).collect();
        let kept = nucleus(&probs, p);
        let mass: f64 = kept.iter().map(|&i| probs[i]).sum();
        let all_kept = kept.len() == probs.len();
        prop_assert!(mass >= p - 1e-12 || all_kept);
        if kept.len() > 1 {
            let without_last: f64 = kept[..kept.len() - 1].iter().map(|&i| probs[i]).sum();
            prop_assert!(without_last < p);
        }
    }
}
