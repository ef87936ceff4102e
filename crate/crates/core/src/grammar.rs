//! Multiple-choice question grammar.
//!
//! A question is one of 26 fixed templates with its single `{}` placeholder
//! replaced by the quoted choice list:
//!
//! ```text
//! How is the text best described? : " Science & Technology " , " Business " , or " Sports "
//! ```
//!
//! Each choice sits between ASCII double quotes with one space on either
//! side, so the tokenizer never merges a quote into a descriptor.

use rand::Rng;

use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "{}";
pub const NONE_OF_THE_ABOVE: &str = "none of the above";
pub const MIN_CHOICES: usize = 2;
pub const MAX_CHOICES: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuestionTemplate {
    /// 1-based position in the template list.
    pub id: usize,
    pub text: &'static str,
    /// Inserts "as " in front of the choice list.
    pub suffix_mode: bool,
}

macro_rules! templates {
    ($(($text:literal, $suffix:literal)),* $(,)?) => {{
        let mut id = 0;
        [$({
            id += 1;
            QuestionTemplate { id, text: $text, suffix_mode: $suffix }
        }),*]
    }};
}

pub static TEMPLATES: [QuestionTemplate; 26] = templates![
    ("To which category does the following document belong? : {}", false),
    ("To which category does the following text belong? : {}", false),
    ("To which category does the text belong? : {}", false),
    ("To which category does the article belong? : {}", false),
    ("How would you describe the following document? : {}", true),
    ("How would you describe the text? : {}", true),
    ("How would you describe the following text? : {}", true),
    ("Which best describes the text? : {}", false),
    ("Which best describes the document? : {}", false),
    ("Which best describes the following document? : {}", false),
    ("Which best describes the following text? : {}", false),
    ("The following document is _ ? : {}", false),
    ("The following text is _ ? : {}", false),
    ("The text is _ ? : {}", false),
    ("The document is _ ? : {}", false),
    ("How is the text best described? : {}", false),
    ("How is the document best described? : {}", false),
    ("How is the following text best described? : {}", false),
    ("How is the following document best described? : {}", false),
    ("Which of these choices best describes the text? : {}", false),
    ("Which of these options best describes the text? : {}", false),
    ("Which of these choices best describes the document? : {}", false),
    ("Which of these options best describes the document? : {}", false),
    ("Which of these categories best describes the following document? : {}", false),
    ("Which of these choices best describes the following document? : {}", false),
    ("Which of these options best describes the following text? : {}", false),
];

impl QuestionTemplate {
    pub fn by_id(id: usize) -> Result<&'static QuestionTemplate> {
        id.checked_sub(1)
            .and_then(|i| TEMPLATES.get(i))
            .ok_or(Error::UnknownTemplate(id))
    }

    /// The template as listed for audit, with "as" shown before the slot.
    pub fn display(&self) -> String {
        if self.suffix_mode {
            self.text.replace(PLACEHOLDER, "as {}")
        } else {
            self.text.to_string()
        }
    }
}

/// Uniform over all templates.
pub fn sample_template<R: Rng + ?Sized>(rng: &mut R) -> &'static QuestionTemplate {
    &TEMPLATES[rng.gen_range(0..TEMPLATES.len())]
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChoiceSet {
    pub choices: Vec<String>,
    pub correct_index: usize,
}

impl ChoiceSet {
    pub fn new(choices: Vec<String>, correct_index: usize) -> Result<Self> {
        let set = ChoiceSet {
            choices,
            correct_index,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.choices.len();
        if !(MIN_CHOICES..=MAX_CHOICES).contains(&n) {
            return Err(Error::Choices(format!(
                "{n} choices, expected {MIN_CHOICES}..={MAX_CHOICES}"
            )));
        }
        if self.correct_index >= n {
            return Err(Error::Choices(format!(
                "correct index {} out of range",
                self.correct_index
            )));
        }
        for (i, c) in self.choices.iter().enumerate() {
            validate_descriptor(c)?;
            if self.choices[..i].contains(c) {
                return Err(Error::Choices(format!("duplicate choice {c:?}")));
            }
        }
        Ok(())
    }

    pub fn contains_nota(&self) -> bool {
        self.choices.iter().any(|c| c == NONE_OF_THE_ABOVE)
    }

    pub fn answer(&self) -> &str {
        &self.choices[self.correct_index]
    }
}

/// A descriptor must be non-blank and free of `"`, so quoted spans in a
/// rendered question can be parsed back unambiguously.
pub fn validate_descriptor(descriptor: &str) -> Result<()> {
    if descriptor.trim().is_empty() {
        return Err(Error::Choices("blank choice".into()));
    }
    if descriptor.contains('"') {
        return Err(Error::Choices(format!(
            "choice {descriptor:?} contains a double quote"
        )));
    }
    Ok(())
}

/// `" a " , " b " , or " c "`; two choices render as `" a " or " b "`.
pub fn format_choices<S: AsRef<str>>(choices: &[S]) -> Result<String> {
    if choices.len() < MIN_CHOICES {
        return Err(Error::Choices(format!(
            "{} choices, need at least {MIN_CHOICES}",
            choices.len()
        )));
    }
    let quoted: Vec<String> = choices
        .iter()
        .map(|c| format!("\" {} \"", c.as_ref()))
        .collect();
    let (last, rest) = quoted.split_last().expect("at least two choices");
    let head = rest.join(" , ");
    Ok(if rest.len() == 1 {
        format!("{head} or {last}")
    } else {
        format!("{head} , or {last}")
    })
}

pub fn render_question(template: &QuestionTemplate, choices: &ChoiceSet) -> Result<String> {
    choices.validate()?;
    render_choices(template, &choices.choices)
}

pub(crate) fn render_choices<S: AsRef<str>>(
    template: &QuestionTemplate,
    choices: &[S],
) -> Result<String> {
    let list = format_choices(choices)?;
    let slot = if template.suffix_mode {
        format!("as {list}")
    } else {
        list
    };
    Ok(template.text.replacen(PLACEHOLDER, &slot, 1))
}

/// Recovers the quoted choices of a rendered question, in order.
pub fn parse_choices(question: &str) -> Vec<String> {
    question
        .split('"')
        .skip(1)
        .step_by(2)
        .map(|span| {
            span.strip_prefix(' ')
                .and_then(|s| s.strip_suffix(' '))
                .unwrap_or(span)
                .to_string()
        })
        .collect()
}
