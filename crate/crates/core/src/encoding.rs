//! Model input layout for a multiple-choice example.
//!
//! ```text
//! <|question|> q… <|endoftext|> <|text|> x… <|endoftext|> <|answer|> a… <|endoftext|>
//! type:   Q ...................  T ...............  A ...................
//! pos:    0 1 2 ...................................  k | 0 1 2 ...
//! ```
//!
//! Positions count up through the `<|answer|>` marker and restart at zero
//! on the first answer token. Every prompt marker and trailing end token
//! carries the type of its own segment.
//!
//! The answer is encoded with one leading space, so its tokens match the
//! way the same descriptor is tokenized inside the quoted choice list.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::ChoiceExample;
use crate::tokenizer::{Special, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Segment {
    Question = 0,
    Text = 1,
    Answer = 2,
}

impl Segment {
    pub const COUNT: usize = 3;

    pub fn id(self) -> usize {
        self as usize
    }

    fn letter(self) -> char {
        match self {
            Segment::Question => 'Q',
            Segment::Text => 'T',
            Segment::Answer => 'A',
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub max_seq_len: usize,
    /// Room kept for answer tokens (excluding the final end token) when the
    /// reference text is truncated; longer answers are unencodable.
    pub max_answer_tokens: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            max_seq_len: 512,
            max_answer_tokens: 20,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        // Four markers, three end tokens, at least one answer slot.
        if self.max_answer_tokens == 0 || self.max_seq_len < self.max_answer_tokens + 8 {
            return Err(Error::Config(format!(
                "max_seq_len {} too small for max_answer_tokens {}",
                self.max_seq_len, self.max_answer_tokens
            )));
        }
        Ok(())
    }
}

/// How an answer string appears in the answer segment.
pub fn answer_rendering(answer: &str) -> String {
    format!(" {answer}")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub token_ids: Vec<u32>,
    pub type_ids: Vec<Segment>,
    pub position_ids: Vec<u32>,
    /// 1 where the token has a successor to predict.
    pub loss_mask: Vec<u8>,
    /// Index of the first answer token (one past `<|answer|>`).
    pub answer_start: usize,
    /// Reference-text tokens dropped to fit `max_seq_len`.
    pub truncated: usize,
}

impl EncodedExample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// The context prefix, ending at `<|answer|>`.
    pub fn context(&self) -> EncodedExample {
        let n = self.answer_start;
        let mut loss_mask = self.loss_mask[..n].to_vec();
        if let Some(last) = loss_mask.last_mut() {
            *last = 0;
        }
        EncodedExample {
            token_ids: self.token_ids[..n].to_vec(),
            type_ids: self.type_ids[..n].to_vec(),
            position_ids: self.position_ids[..n].to_vec(),
            loss_mask,
            answer_start: n,
            truncated: self.truncated,
        }
    }

    /// Aligned token / type / position rows for inspection.
    pub fn render_table(&self, vocab: &Vocabulary) -> String {
        let cells: Vec<(String, char, u32)> = (0..self.len())
            .map(|i| {
                let tok = vocab
                    .token_display(self.token_ids[i])
                    .unwrap_or_else(|| format!("#{}", self.token_ids[i]));
                (tok, self.type_ids[i].letter(), self.position_ids[i])
            })
            .collect();
        let mut rows = [String::from("tok "), String::from("type"), String::from("pos ")];
        for (tok, ty, pos) in &cells {
            let w = tok.chars().count().max(pos.to_string().len());
            rows[0].push_str(&format!(" {tok:<w$}"));
            rows[1].push_str(&format!(" {ty:<w$}"));
            rows[2].push_str(&format!(" {pos:<w$}"));
        }
        rows.join("\n")
    }
}

fn assemble(
    question: &[u32],
    text: &[u32],
    answer: Option<&[u32]>,
    vocab: &Vocabulary,
    cfg: &EncoderConfig,
) -> Result<EncodedExample> {
    cfg.validate()?;
    let eot = vocab.special_id(Special::EndOfText);
    if let Some(a) = answer {
        if a.len() > cfg.max_answer_tokens {
            return Err(Error::Unencodable(format!(
                "answer has {} tokens, limit {}",
                a.len(),
                cfg.max_answer_tokens
            )));
        }
    }
    let answer_budget = cfg.max_answer_tokens + 1;
    let fixed = question.len() + 2 + 2 + 1 + answer_budget;
    if fixed > cfg.max_seq_len {
        return Err(Error::Unencodable(format!(
            "question of {} tokens leaves no room within {}",
            question.len(),
            cfg.max_seq_len
        )));
    }
    let keep = text.len().min(cfg.max_seq_len - fixed);
    let truncated = text.len() - keep;
    let text = &text[..keep];

    let context_len = question.len() + text.len() + 5;
    let total = context_len + answer.map_or(0, |a| a.len() + 1);
    let mut token_ids = Vec::with_capacity(total);
    let mut type_ids = Vec::with_capacity(total);

    let push = |ids: &mut Vec<u32>, types: &mut Vec<Segment>, id: u32, seg: Segment| {
        ids.push(id);
        types.push(seg);
    };
    push(&mut token_ids, &mut type_ids, vocab.special_id(Special::Question), Segment::Question);
    for &id in question {
        push(&mut token_ids, &mut type_ids, id, Segment::Question);
    }
    push(&mut token_ids, &mut type_ids, eot, Segment::Question);
    push(&mut token_ids, &mut type_ids, vocab.special_id(Special::Text), Segment::Text);
    for &id in text {
        push(&mut token_ids, &mut type_ids, id, Segment::Text);
    }
    push(&mut token_ids, &mut type_ids, eot, Segment::Text);
    push(&mut token_ids, &mut type_ids, vocab.special_id(Special::Answer), Segment::Answer);
    let answer_start = token_ids.len();
    if let Some(a) = answer {
        for &id in a {
            push(&mut token_ids, &mut type_ids, id, Segment::Answer);
        }
        push(&mut token_ids, &mut type_ids, eot, Segment::Answer);
    }

    let mut position_ids: Vec<u32> = (0..answer_start as u32).collect();
    position_ids.extend(0..(token_ids.len() - answer_start) as u32);
    let mut loss_mask = vec![1u8; token_ids.len()];
    if let Some(last) = loss_mask.last_mut() {
        *last = 0;
    }
    Ok(EncodedExample {
        token_ids,
        type_ids,
        position_ids,
        loss_mask,
        answer_start,
        truncated,
    })
}

/// Full training sequence for an example. The reference text loses tokens
/// from its end when the sequence would exceed `max_seq_len`; question and
/// answer are never cut.
pub fn encode_example(
    ex: &ChoiceExample,
    vocab: &Vocabulary,
    cfg: &EncoderConfig,
) -> Result<EncodedExample> {
    let question = vocab.encode(&ex.question);
    let text = vocab.encode(&ex.text);
    let answer = vocab.encode(&answer_rendering(&ex.answer));
    assemble(&question, &text, Some(&answer), vocab, cfg)
}

/// The generation prompt: identical to the prefix of [`encode_example`] up
/// to and including `<|answer|>`.
pub fn encode_context(
    question: &str,
    text: &str,
    vocab: &Vocabulary,
    cfg: &EncoderConfig,
) -> Result<EncodedExample> {
    let question = vocab.encode(question);
    let text = vocab.encode(text);
    assemble(&question, &text, None, vocab, cfg)
}

/// A right-padded rectangular batch, row-major `rows × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub rows: usize,
    pub width: usize,
    pub token_ids: Vec<u32>,
    pub type_ids: Vec<Segment>,
    pub position_ids: Vec<u32>,
    pub loss_mask: Vec<u8>,
    /// 1 on real tokens, 0 on padding.
    pub attention_mask: Vec<u8>,
    pub lengths: Vec<usize>,
    pub answer_starts: Vec<usize>,
}

/// One unpadded row of a batch.
#[derive(Clone, Copy, Debug)]
pub struct SequenceView<'a> {
    pub token_ids: &'a [u32],
    pub type_ids: &'a [Segment],
    pub position_ids: &'a [u32],
    pub loss_mask: &'a [u8],
    pub answer_start: usize,
}

impl<'a> SequenceView<'a> {
    pub fn of(ex: &'a EncodedExample) -> Self {
        SequenceView {
            token_ids: &ex.token_ids,
            type_ids: &ex.type_ids,
            position_ids: &ex.position_ids,
            loss_mask: &ex.loss_mask,
            answer_start: ex.answer_start,
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

impl Batch {
    pub fn row(&self, r: usize) -> SequenceView<'_> {
        let start = r * self.width;
        let end = start + self.lengths[r];
        SequenceView {
            token_ids: &self.token_ids[start..end],
            type_ids: &self.type_ids[start..end],
            position_ids: &self.position_ids[start..end],
            loss_mask: &self.loss_mask[start..end],
            answer_start: self.answer_starts[r],
        }
    }
}

/// Pads every example on the right to the longest length with `pad_id`.
pub fn pad_batch(examples: &[EncodedExample], pad_id: u32) -> Result<Batch> {
    if examples.is_empty() {
        return Err(Error::Shape("cannot batch zero examples".into()));
    }
    let rows = examples.len();
    let width = examples.iter().map(EncodedExample::len).max().unwrap_or(0);
    let mut batch = Batch {
        rows,
        width,
        token_ids: vec![pad_id; rows * width],
        type_ids: vec![Segment::Answer; rows * width],
        position_ids: vec![0; rows * width],
        loss_mask: vec![0; rows * width],
        attention_mask: vec![0; rows * width],
        lengths: examples.iter().map(EncodedExample::len).collect(),
        answer_starts: examples.iter().map(|e| e.answer_start).collect(),
    };
    for (r, ex) in examples.iter().enumerate() {
        let s = r * width;
        let n = ex.len();
        batch.token_ids[s..s + n].copy_from_slice(&ex.token_ids);
        batch.type_ids[s..s + n].copy_from_slice(&ex.type_ids);
        batch.position_ids[s..s + n].copy_from_slice(&ex.position_ids);
        batch.loss_mask[s..s + n].copy_from_slice(&ex.loss_mask);
        batch.attention_mask[s..s + n].fill(1);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::BpeTrainer;

    fn vocab() -> Vocabulary {
        BpeTrainer::new(300)
            .allow_undersized(true)
            .train(["alpha beta gamma delta", "alpha beta"])
            .unwrap()
    }

    fn manual(q: usize, x: usize, a: usize) -> EncodedExample {
        let v = Vocabulary::byte_level();
        let cfg = EncoderConfig {
            max_seq_len: 64,
            max_answer_tokens: 5,
        };
        assemble(
            &vec![b'q' as u32; q],
            &vec![b'x' as u32; x],
            Some(&vec![b'a' as u32; a]),
            &v,
            &cfg,
        )
        .unwrap()
    }

    #[test]
    fn layout_of_small_example() {
        let e = manual(2, 3, 2);
        assert_eq!(e.len(), 13);
        assert_eq!(e.position_ids, vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 1, 2]);
        use Segment::*;
        assert_eq!(
            e.type_ids,
            vec![Question, Question, Question, Question, Text, Text, Text, Text, Text, Answer, Answer, Answer, Answer]
        );
        assert_eq!(e.answer_start, 10);
        assert_eq!(e.loss_mask.iter().filter(|&&m| m == 1).count(), 12);
        assert_eq!(*e.loss_mask.last().unwrap(), 0);
    }

    #[test]
    fn empty_text_segment() {
        let e = manual(1, 0, 1);
        let v = Vocabulary::byte_level();
        let text_segment: Vec<u32> = e
            .token_ids
            .iter()
            .zip(&e.type_ids)
            .filter(|(_, t)| **t == Segment::Text)
            .map(|(id, _)| *id)
            .collect();
        assert_eq!(
            text_segment,
            vec![v.special_id(Special::Text), v.special_id(Special::EndOfText)]
        );
    }

    #[test]
    fn context_is_prefix() {
        let v = vocab();
        let cfg = EncoderConfig::default();
        let ex = ChoiceExample {
            question: "Which? : \" alpha \" or \" beta \"".into(),
            choices: vec!["alpha".into(), "beta".into()],
            answer: "beta".into(),
            text: "gamma delta gamma".into(),
            template_id: 1,
        };
        let full = encode_example(&ex, &v, &cfg).unwrap();
        let ctx = encode_context(&ex.question, &ex.text, &v, &cfg).unwrap();
        assert_eq!(ctx.token_ids, full.token_ids[..full.answer_start]);
        assert_eq!(ctx.position_ids, full.position_ids[..full.answer_start]);
        assert_eq!(ctx.type_ids, full.type_ids[..full.answer_start]);
        let answer_tokens = v.encode(" beta").len();
        assert_eq!(ctx.len(), full.len() - (answer_tokens + 1));
        assert_eq!(ctx, full.context());
    }

    #[test]
    fn oversize_question_is_unencodable() {
        let v = Vocabulary::byte_level();
        let cfg = EncoderConfig {
            max_seq_len: 32,
            max_answer_tokens: 4,
        };
        let r = assemble(&[1; 30], &[], Some(&[2]), &v, &cfg);
        assert!(matches!(r, Err(Error::Unencodable(_))));
        let r = assemble(&[1; 2], &[], Some(&[2; 5]), &v, &cfg);
        assert!(matches!(r, Err(Error::Unencodable(_))));
    }

    #[test]
    fn padding() {
        let a = manual(0, 0, 0); // 6 tokens
        let b = manual(1, 1, 1); // 9 tokens
        assert_eq!((a.len(), b.len()), (6, 9));
        let batch = pad_batch(&[a.clone(), b.clone()], 7).unwrap();
        assert_eq!(batch.width, 9);
        assert_eq!(&batch.attention_mask[..9], &[1, 1, 1, 1, 1, 1, 0, 0, 0]);
        assert_eq!(&batch.loss_mask[6..9], &[0, 0, 0]);
        assert!(batch.token_ids[6..9].iter().all(|&t| t == 7));
        assert_eq!(batch.row(0).token_ids, &a.token_ids[..]);

        let single = pad_batch(std::slice::from_ref(&b), 7).unwrap();
        assert_eq!(single.token_ids, b.token_ids);
        assert_eq!(single.loss_mask, b.loss_mask);
        assert!(pad_batch(&[], 0).is_err());
    }
}
