use std::sync::OnceLock;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use zeroshot::corpus::{generate_synthetic_corpus, tokenizer_texts, AnnotatedDocument, SyntheticSpec};
use zeroshot::encoding::{answer_rendering, encode_context, encode_example, EncoderConfig, Segment};
use zeroshot::grammar::{format_choices, parse_choices, sample_template, NONE_OF_THE_ABOVE, TEMPLATES};
use zeroshot::sampler::{distractor_pool_build, sample_pretraining_example, ChoiceExample, SampleOverrides, SamplerConfig};
use zeroshot::tokenizer::{BpeTrainer, Vocabulary};

fn docs() -> &'static [AnnotatedDocument] {
    static DOCS: OnceLock<Vec<AnnotatedDocument>> = OnceLock::new();
    DOCS.get_or_init(|| {
        generate_synthetic_corpus(&SyntheticSpec {
            docs_per_topic: 40,
            seed: 12,
            ..SyntheticSpec::default()
        })
        .unwrap()
        .documents
    })
}

fn vocab() -> &'static Vocabulary {
    static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
    VOCAB.get_or_init(|| {
        BpeTrainer::new(900)
            .allow_undersized(true)
            .train(tokenizer_texts(docs()))
            .unwrap()
    })
}

/// Upper critical value of the chi-squared distribution at level 0.001.
fn chi2_critical(df: usize) -> f64 {
    ChiSquared::new(df as f64).unwrap().inverse_cdf(0.999)
}

fn chi2(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let expected = n as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

#[test]
fn critical_values_match_tables() {
    for (df, table) in [(3, 16.266), (9, 27.877), (13, 34.528), (25, 52.620)] {
        assert!((chi2_critical(df) - table).abs() < 1e-3, "df {df}");
    }
}

#[test]
fn templates_are_drawn_uniformly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut counts = vec![0; TEMPLATES.len()];
    for _ in 0..52_000 {
        counts[sample_template(&mut rng).id - 1] += 1;
    }
    assert!(chi2(&counts) < chi2_critical(TEMPLATES.len() - 1), "{counts:?}");
}

#[test]
fn nota_slot_and_answer_slot_are_uniform() {
    let docs = docs();
    let pool = distractor_pool_build(docs);
    let cfg = SamplerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = 4;
    let mut nota_slot = vec![0; t];
    let mut answer_slot = vec![0; t];
    for i in 0..40_000 {
        let d = i % docs.len();
        let overrides = SampleOverrides {
            t: Some(t),
            ..SampleOverrides::default()
        };
        let ex = sample_pretraining_example(&docs[d], Some(d), &pool, &cfg, &mut rng, overrides).unwrap();
        if let Some(slot) = ex.choices.iter().position(|c| c == NONE_OF_THE_ABOVE) {
            nota_slot[slot] += 1;
        }
        answer_slot[ex.choices.iter().position(|c| *c == ex.answer).unwrap()] += 1;
    }
    assert!(chi2(&nota_slot) < chi2_critical(t - 1), "{nota_slot:?}");
    assert!(chi2(&answer_slot) < chi2_critical(t - 1), "{answer_slot:?}");
}

#[test]
fn choice_count_is_uniform() {
    let docs = docs();
    let pool = distractor_pool_build(docs);
    let cfg = SamplerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut counts = vec![0; 14];
    for i in 0..28_000 {
        let d = i % docs.len();
        let ex = sample_pretraining_example(&docs[d], Some(d), &pool, &cfg, &mut rng, SampleOverrides::default()).unwrap();
        counts[ex.choices.len() - 2] += 1;
    }
    assert!(chi2(&counts) < chi2_critical(13), "{counts:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn tokenizer_round_trips(s in any::<String>()) {
        let v = vocab();
        prop_assert_eq!(v.decode_bytes(&v.encode(&s), false).unwrap(), s.as_bytes());
    }

    #[test]
    fn tokenizer_round_trips_corpus_like_text(s in "[a-zA-Z \"',.!?&\\n-]{0,60}") {
        let v = vocab();
        prop_assert_eq!(v.decode(&v.encode(&s), false).unwrap(), s);
    }
}

fn choice_strategy() -> impl Strategy<Value = ChoiceExample> {
    let phrase = "[A-Za-z][a-z]{0,7}( [A-Za-z&][a-z]{0,7}){0,2}";
    (prop::collection::btree_set(phrase, 2..=15), any::<prop::sample::Index>(), "[a-z ,.]{0,1200}").prop_map(
        |(set, pick, text)| {
            let choices: Vec<String> = set.into_iter().collect();
            let answer = pick.get(&choices).clone();
            ChoiceExample {
                question: format!("The text is _ ? : {}", format_choices(&choices).unwrap()),
                choices,
                answer,
                text,
                template_id: 14,
            }
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn encoding_contract(ex in choice_strategy()) {
        let v = vocab();
        let cfg = EncoderConfig { max_seq_len: 256, max_answer_tokens: 24 };
        let question = v.encode(&ex.question);
        let fixed = question.len() + 5 + cfg.max_answer_tokens + 1;
        let enc = match encode_example(&ex, v, &cfg) {
            Ok(enc) => enc,
            Err(_) => {
                prop_assert!(fixed > cfg.max_seq_len);
                return Ok(());
            }
        };
        prop_assert!(fixed <= cfg.max_seq_len);
        let a = enc.answer_start;
        prop_assert!(enc.len() <= cfg.max_seq_len);
        for i in 0..enc.len() {
            let want = if i < a { i } else { i - a };
            prop_assert_eq!(enc.position_ids[i] as usize, want);
        }
        // Segments appear once each, in order.
        let mut order = enc.type_ids.clone();
        order.dedup();
        prop_assert_eq!(order, vec![Segment::Question, Segment::Text, Segment::Answer]);
        let answer = v.encode(&answer_rendering(&ex.answer));
        prop_assert_eq!(&enc.token_ids[a..enc.len() - 1], &answer[..]);
        prop_assert_eq!(&enc.token_ids[1..1 + question.len()], &question[..]);
        let text = v.encode(&ex.text);
        prop_assert_eq!(enc.truncated, text.len() - (a - question.len() - 5));
        // The generation prompt is exactly the training prefix.
        let ctx = encode_context(&ex.question, &ex.text, v, &cfg).unwrap();
        prop_assert_eq!(&ctx.token_ids[..], &enc.token_ids[..a]);
        prop_assert_eq!(&ctx.position_ids[..], &enc.position_ids[..a]);
        prop_assert_eq!(&ctx.type_ids[..], &enc.type_ids[..a]);
        prop_assert_eq!(enc.loss_mask.iter().filter(|&&m| m == 0).count(), 1);
    }

    #[test]
    fn rendered_choices_parse_back(ex in choice_strategy()) {
        prop_assert_eq!(parse_choices(&ex.question), ex.choices);
    }

    #[test]
    fn pretraining_examples_are_well_formed(seed in any::<u64>(), d in 0usize..320) {
        let docs = docs();
        let pool = distractor_pool_build(docs);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let doc = &docs[d % docs.len()];
        let ex = sample_pretraining_example(doc, Some(d % docs.len()), &pool, &SamplerConfig::default(), &mut rng, SampleOverrides::default()).unwrap();
        prop_assert!((2..=15).contains(&ex.choices.len()));
        prop_assert!(ex.choices.contains(&ex.answer));
        prop_assert!(ex.choices.iter().filter(|c| *c == NONE_OF_THE_ABOVE).count() <= 1);
        let titles: Vec<&str> = doc.titles().collect();
        for c in &ex.choices {
            if *c != ex.answer && c != NONE_OF_THE_ABOVE {
                prop_assert!(!titles.contains(&c.as_str()), "distractor {} is a title of the document", c);
            }
        }
        if ex.answer != NONE_OF_THE_ABOVE {
            prop_assert!(titles.contains(&ex.answer.as_str()));
        }
        let mut unique = ex.choices.clone();
        unique.sort();
        unique.dedup();
        prop_assert_eq!(unique.len(), ex.choices.len());
        prop_assert_eq!(parse_choices(&ex.question), ex.choices);
    }
}
