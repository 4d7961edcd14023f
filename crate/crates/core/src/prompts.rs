//! Prompt rendering for word judgments, moral choices and debate turns.
//!
//! Templates and few-shot exemplars are data files under `assets/prompts/<lang>/`
//! (`templates.toml`, `exemplars.json`). The built-in bundles are compiled in;
//! [`PromptBundle::from_dir`] loads an edited copy.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{MoralScenario, MoralWord, OptionLabel, Variant};

pub const DEFAULT_MAX_PROMPT_CHARS: usize = 24_000;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("scenario {scenario} has no {variant} variant")]
    MissingVariant { scenario: String, variant: Variant },
    #[error("{stage:?} expects {expected} prior turns, got {got}")]
    HistoryMismatch {
        stage: DebateStage,
        expected: usize,
        got: usize,
    },
    #[error("template `{template}` uses unknown placeholder `{name}`")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template `{template}` is missing required placeholder `{name}`")]
    MissingPlaceholder { template: String, name: String },
    #[error("{protocol} needs exactly 2 exemplars, found {found}")]
    ExemplarCount { protocol: &'static str, found: usize },
    #[error("rendered prompt is {len} characters, over the {budget} budget")]
    TooLong { len: usize, budget: usize },
    #[error("word text is empty")]
    EmptyWord,
    #[error("failed to read prompt bundle: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed templates: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("malformed exemplars: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    #[default]
    Zh,
    En,
}

impl Language {
    pub fn as_str(self) -> &'static str {
        match self {
            Language::Zh => "zh",
            Language::En => "en",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    WordJudgment,
    MoralChoice,
    DebateRound1Opponent,
    DebateRound2,
    DebateFinal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptionOrder {
    #[default]
    Original,
    Swapped,
}

impl OptionOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            OptionOrder::Original => "original",
            OptionOrder::Swapped => "swapped",
        }
    }
}

impl fmt::Display for OptionOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for OptionOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "original" => Ok(OptionOrder::Original),
            "swapped" => Ok(OptionOrder::Swapped),
            other => Err(format!("unknown option order `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionForm {
    Affirmative,
    Negated,
}

impl QuestionForm {
    pub fn as_str(self) -> &'static str {
        match self {
            QuestionForm::Affirmative => "affirmative",
            QuestionForm::Negated => "negated",
        }
    }
}

/// Point in the two-round debate a prompt is rendered for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DebateStage {
    Round1Evaluated,
    Round1Opponent,
    Round2Evaluated,
    Round2Opponent,
    Final,
}

impl DebateStage {
    pub const SEQUENCE: [DebateStage; 5] = [
        DebateStage::Round1Evaluated,
        DebateStage::Round1Opponent,
        DebateStage::Round2Evaluated,
        DebateStage::Round2Opponent,
        DebateStage::Final,
    ];

    /// Number of earlier turns the stage requires.
    pub fn history_len(self) -> usize {
        match self {
            DebateStage::Round1Evaluated => 0,
            DebateStage::Round1Opponent => 1,
            DebateStage::Round2Evaluated => 2,
            DebateStage::Round2Opponent => 3,
            DebateStage::Final => 4,
        }
    }

    pub fn protocol(self) -> Protocol {
        match self {
            DebateStage::Round1Evaluated => Protocol::MoralChoice,
            DebateStage::Round1Opponent => Protocol::DebateRound1Opponent,
            DebateStage::Round2Evaluated | DebateStage::Round2Opponent => Protocol::DebateRound2,
            DebateStage::Final => Protocol::DebateFinal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Templates {
    pub negation_prefix: String,
    pub word_question: String,
    pub word_judgment: String,
    pub word_exemplar: String,
    pub moral_choice: String,
    pub choice_exemplar: String,
    pub debate_round1_opponent: String,
    pub debate_round2_evaluated: String,
    pub debate_round2_opponent: String,
    pub debate_final: String,
    pub opponent_reminder: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordExemplar {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceExemplar {
    pub context: String,
    pub option_a: String,
    pub option_b: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplars {
    pub word_judgment: Vec<WordExemplar>,
    pub moral_choice: Vec<ChoiceExemplar>,
}

/// Templates plus fixed exemplars for one language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub language: Language,
    pub templates: Templates,
    pub exemplars: Exemplars,
    pub max_chars: usize,
}

const REQUIRED: &[(&str, &[&str])] = &[
    ("word_question", &["word"]),
    ("word_judgment", &["question", "exemplars"]),
    ("word_exemplar", &["index", "input", "output"]),
    ("moral_choice", &["context", "option_a", "option_b", "exemplars"]),
    ("choice_exemplar", &["index", "context", "option_a", "option_b", "answer"]),
    (
        "debate_round1_opponent",
        &["context", "option_a", "option_b", "opponent_output"],
    ),
    ("debate_round2_evaluated", &["opponent_output"]),
    ("debate_round2_opponent", &["opponent_output"]),
    ("debate_final", &["opponent_output"]),
    ("opponent_reminder", &["opponent_option", "assigned_option"]),
];

impl PromptBundle {
    pub fn builtin(language: Language) -> PromptBundle {
        let (templates, exemplars) = match language {
            Language::En => (
                include_str!("../assets/prompts/en/templates.toml"),
                include_str!("../assets/prompts/en/exemplars.json"),
            ),
            Language::Zh => (
                include_str!("../assets/prompts/zh/templates.toml"),
                include_str!("../assets/prompts/zh/exemplars.json"),
            ),
        };
        PromptBundle::parse(language, templates, exemplars).expect("built-in prompt bundle is valid")
    }

    /// Loads `<dir>/templates.toml` and `<dir>/exemplars.json`.
    pub fn from_dir(dir: &Path, language: Language) -> Result<PromptBundle, PromptError> {
        let templates = std::fs::read_to_string(dir.join("templates.toml"))?;
        let exemplars = std::fs::read_to_string(dir.join("exemplars.json"))?;
        PromptBundle::parse(language, &templates, &exemplars)
    }

    pub fn parse(language: Language, templates: &str, exemplars: &str) -> Result<PromptBundle, PromptError> {
        let bundle = PromptBundle {
            language,
            templates: toml::from_str(templates)?,
            exemplars: serde_json::from_str(exemplars)?,
            max_chars: DEFAULT_MAX_PROMPT_CHARS,
        };
        bundle.check()?;
        Ok(bundle)
    }

    pub fn with_max_chars(mut self, max_chars: usize) -> Self {
        self.max_chars = max_chars;
        self
    }

    fn template(&self, name: &str) -> &str {
        let t = &self.templates;
        match name {
            "word_question" => &t.word_question,
            "word_judgment" => &t.word_judgment,
            "word_exemplar" => &t.word_exemplar,
            "moral_choice" => &t.moral_choice,
            "choice_exemplar" => &t.choice_exemplar,
            "debate_round1_opponent" => &t.debate_round1_opponent,
            "debate_round2_evaluated" => &t.debate_round2_evaluated,
            "debate_round2_opponent" => &t.debate_round2_opponent,
            "debate_final" => &t.debate_final,
            "opponent_reminder" => &t.opponent_reminder,
            _ => unreachable!("unknown template {name}"),
        }
    }

    fn check(&self) -> Result<(), PromptError> {
        if self.exemplars.word_judgment.len() != 2 {
            return Err(PromptError::ExemplarCount {
                protocol: "word_judgment",
                found: self.exemplars.word_judgment.len(),
            });
        }
        if self.exemplars.moral_choice.len() != 2 {
            return Err(PromptError::ExemplarCount {
                protocol: "moral_choice",
                found: self.exemplars.moral_choice.len(),
            });
        }
        for (name, required) in REQUIRED {
            let found = placeholders(self.template(name));
            for r in *required {
                if !found.iter().any(|f| f == r) {
                    return Err(PromptError::MissingPlaceholder {
                        template: name.to_string(),
                        name: r.to_string(),
                    });
                }
            }
            if let Some(extra) = found.iter().find(|f| !required.contains(&f.as_str())) {
                return Err(PromptError::UnknownPlaceholder {
                    template: name.to_string(),
                    name: extra.clone(),
                });
            }
        }
        Ok(())
    }

    fn fill(&self, name: &str, values: &[(&str, &str)]) -> Result<String, PromptError> {
        substitute(name, self.template(name), values)
    }

    fn budget(&self, prompt: String) -> Result<String, PromptError> {
        let len = prompt.chars().count();
        if len > self.max_chars {
            return Err(PromptError::TooLong {
                len,
                budget: self.max_chars,
            });
        }
        Ok(prompt)
    }

    /// The phrase a word is asked about in the given form.
    pub fn word_phrase(&self, w: &MoralWord, form: QuestionForm) -> String {
        match form {
            QuestionForm::Affirmative => w.text.clone(),
            QuestionForm::Negated => w
                .negated
                .clone()
                .unwrap_or_else(|| format!("{}{}", self.templates.negation_prefix, w.text)),
        }
    }

    fn word_exemplars(&self) -> Result<String, PromptError> {
        let mut parts = Vec::new();
        for (i, e) in self.exemplars.word_judgment.iter().enumerate() {
            let index = (i + 1).to_string();
            parts.push(self.fill(
                "word_exemplar",
                &[("index", &index), ("input", &e.input), ("output", &e.output)],
            )?);
        }
        Ok(parts.join("\n\n"))
    }

    fn choice_exemplars(&self) -> Result<String, PromptError> {
        let mut parts = Vec::new();
        for (i, e) in self.exemplars.moral_choice.iter().enumerate() {
            let index = (i + 1).to_string();
            parts.push(self.fill(
                "choice_exemplar",
                &[
                    ("index", &index),
                    ("context", &e.context),
                    ("option_a", &e.option_a),
                    ("option_b", &e.option_b),
                    ("answer", &e.answer),
                ],
            )?);
        }
        Ok(parts.join("\n\n"))
    }

    /// Reminder appended when an opponent argues for the same option as the
    /// evaluated model. Labels are as displayed.
    pub fn opponent_reminder(&self, opponent_option: OptionLabel) -> Result<String, PromptError> {
        self.fill(
            "opponent_reminder",
            &[
                ("opponent_option", opponent_option.as_str()),
                ("assigned_option", opponent_option.other().as_str()),
            ],
        )
    }
}

/// Names of the `{ident}` placeholders in a template, in order.
fn placeholders(template: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        let after = &rest[start + 1..];
        match after.find('}') {
            Some(end) if is_ident(&after[..end]) => {
                out.push(after[..end].to_string());
                rest = &after[end + 1..];
            }
            _ => rest = after,
        }
    }
    out
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Single-pass placeholder substitution; inserted values are never rescanned.
fn substitute(name: &str, template: &str, values: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        match after.find('}') {
            Some(end) if is_ident(&after[..end]) => {
                let key = &after[..end];
                let value = values
                    .iter()
                    .find(|(k, _)| *k == key)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| PromptError::UnknownPlaceholder {
                        template: name.to_string(),
                        name: key.to_string(),
                    })?;
                out.push_str(value);
                rest = &after[end + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out.trim_end().to_string())
}

pub fn render_word_judgment(
    w: &MoralWord,
    form: QuestionForm,
    b: &PromptBundle,
) -> Result<String, PromptError> {
    if w.text.trim().is_empty() {
        return Err(PromptError::EmptyWord);
    }
    let phrase = b.word_phrase(w, form);
    let question = b.fill("word_question", &[("word", &phrase)])?;
    let exemplars = b.word_exemplars()?;
    let prompt = b.fill(
        "word_judgment",
        &[("question", &question), ("exemplars", &exemplars)],
    )?;
    b.budget(prompt)
}

/// Context and options as displayed under the given order.
fn displayed(
    s: &MoralScenario,
    variant: Variant,
    order: OptionOrder,
) -> Result<(&str, &str, &str), PromptError> {
    let text = s.variant(variant).ok_or_else(|| PromptError::MissingVariant {
        scenario: s.id.clone(),
        variant,
    })?;
    let shown_a = text.option(OptionLabel::A.through(order));
    let shown_b = text.option(OptionLabel::B.through(order));
    Ok((&text.context, shown_a, shown_b))
}

pub fn render_choice(
    s: &MoralScenario,
    variant: Variant,
    order: OptionOrder,
    b: &PromptBundle,
) -> Result<String, PromptError> {
    let (context, a, bb) = displayed(s, variant, order)?;
    let exemplars = b.choice_exemplars()?;
    let prompt = b.fill(
        "moral_choice",
        &[
            ("context", context),
            ("option_a", a),
            ("option_b", bb),
            ("exemplars", &exemplars),
        ],
    )?;
    b.budget(prompt)
}

/// Renders the prompt for one debate turn.
///
/// `history` holds the response texts of the earlier turns in protocol order:
/// evaluated round 1, opponent round 1, evaluated round 2, opponent round 2.
/// Each stage embeds the most recent response of the other side; the final
/// prompt embeds the opponent's round-2 rebuttal.
pub fn render_debate_turn(
    stage: DebateStage,
    history: &[String],
    s: &MoralScenario,
    variant: Variant,
    order: OptionOrder,
    b: &PromptBundle,
) -> Result<String, PromptError> {
    if history.len() != stage.history_len() {
        return Err(PromptError::HistoryMismatch {
            stage,
            expected: stage.history_len(),
            got: history.len(),
        });
    }
    let prompt = match stage {
        DebateStage::Round1Evaluated => return render_choice(s, variant, order, b),
        DebateStage::Round1Opponent => {
            let (context, a, bb) = displayed(s, variant, order)?;
            b.fill(
                "debate_round1_opponent",
                &[
                    ("context", context),
                    ("option_a", a),
                    ("option_b", bb),
                    ("opponent_output", &history[0]),
                ],
            )?
        }
        DebateStage::Round2Evaluated => {
            b.fill("debate_round2_evaluated", &[("opponent_output", &history[1])])?
        }
        DebateStage::Round2Opponent => {
            b.fill("debate_round2_opponent", &[("opponent_output", &history[2])])?
        }
        DebateStage::Final => b.fill("debate_final", &[("opponent_output", &history[3])])?,
    };
    b.budget(prompt)
}

/// The protocols present in a bundle, with their exemplar counts.
pub fn exemplar_counts(b: &PromptBundle) -> BTreeMap<Protocol, usize> {
    [
        (Protocol::WordJudgment, b.exemplars.word_judgment.len()),
        (Protocol::MoralChoice, b.exemplars.moral_choice.len()),
        (Protocol::DebateRound1Opponent, 0),
        (Protocol::DebateRound2, 0),
        (Protocol::DebateFinal, 0),
    ]
    .into_iter()
    .collect()
}
