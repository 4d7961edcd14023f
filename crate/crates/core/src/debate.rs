//! Two-round debates between an evaluated model and an opponent that must
//! argue for the other option.
//!
//! Turn order is fixed: evaluated, opponent, evaluated, opponent, evaluated.
//! Each side sees its own conversation as chat history; the other side's
//! latest response is embedded in the next prompt. Only the evaluated
//! model's first and last answers are scored.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, MoralScenario, OptionLabel, Variant};
use crate::elicitation::Session;
use crate::exec;
use crate::gateway::{ChatMessage, ChatProvider, ChatRequest};
use crate::parsing::{detect_option, parse_choice, ParsedChoice};
use crate::prompts::{render_debate_turn, DebateStage, OptionOrder, PromptError};
use crate::runstore::{StoreError, TranscriptRecord};

#[derive(Debug, Error)]
pub enum DebateError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{scenario}: initial choice unparseable ({tag})")]
    InitialUnparseable { scenario: String, tag: String },
    #[error("{scenario}: opponent {opponent} did not take the opposite option")]
    ProtocolViolation { scenario: String, opponent: String },
    #[error("evaluated and opponent are both `{0}`")]
    SameRoles(String),
}

impl DebateError {
    pub fn kind(&self) -> &'static str {
        match self {
            DebateError::Prompt(_) => "prompt",
            DebateError::Store(StoreError::Provider(_)) => "provider",
            DebateError::Store(_) => "store",
            DebateError::InitialUnparseable { .. } => "initial_unparseable",
            DebateError::ProtocolViolation { .. } => "protocol_violation",
            DebateError::SameRoles(_) => "same_roles",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Evaluated,
    Opponent,
}

impl Speaker {
    pub const ORDER: [Speaker; 5] = [
        Speaker::Evaluated,
        Speaker::Opponent,
        Speaker::Evaluated,
        Speaker::Opponent,
        Speaker::Evaluated,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub prompt: String,
    pub response: String,
    /// True when the opponent needed the reminder to take its side.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub retried: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DebateTranscript {
    pub scenario_id: String,
    pub variant: Variant,
    pub order: OptionOrder,
    pub evaluated: String,
    pub opponent: String,
    pub initial: ParsedChoice,
    pub turns: Vec<Turn>,
    /// Absent when the last answer could not be parsed.
    #[serde(rename = "final")]
    pub final_choice: Option<ParsedChoice>,
    /// Absent exactly when `final_choice` is.
    pub changed: Option<bool>,
    pub final_firmness: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_error: Option<String>,
}

impl TranscriptRecord for DebateTranscript {
    const KIND: &'static str = "debate";
}

pub fn changed(initial: OptionLabel, final_option: OptionLabel) -> bool {
    initial != final_option
}

/// A debate that did not produce a transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DebateFailure {
    pub scenario_id: String,
    pub evaluated: String,
    pub opponent: String,
    pub kind: String,
    pub message: String,
}

impl TranscriptRecord for DebateFailure {
    const KIND: &'static str = "debate_failure";
}

struct Side<'p> {
    provider: &'p dyn ChatProvider,
    messages: Vec<ChatMessage>,
}

impl Side<'_> {
    fn ask(&mut self, s: &Session<'_>, prompt: String, tag: &str) -> Result<String, DebateError> {
        let mut req = ChatRequest {
            messages: self.messages.clone(),
            temperature_override: None,
            tag: tag.to_string(),
        };
        req.messages.push(ChatMessage::user(prompt));
        let (response, _) = s.store.complete_cached(self.provider, &req, 1)?;
        self.messages = req.messages;
        self.messages.push(ChatMessage::assistant(response.clone()));
        Ok(response)
    }
}

/// Runs one debate without persisting it.
fn debate_inner(
    s: &Session<'_>,
    scenario: &MoralScenario,
    variant: Variant,
    order: OptionOrder,
    evaluated: &dyn ChatProvider,
    opponent: &dyn ChatProvider,
) -> Result<DebateTranscript, DebateError> {
    if evaluated.name() == opponent.name() {
        return Err(DebateError::SameRoles(evaluated.name().to_string()));
    }
    let mut eval_side = Side {
        provider: evaluated,
        messages: Vec::new(),
    };
    let mut opp_side = Side {
        provider: opponent,
        messages: Vec::new(),
    };
    let mut history: Vec<String> = Vec::with_capacity(4);
    let mut turns: Vec<Turn> = Vec::with_capacity(5);
    let mut initial: Option<ParsedChoice> = None;

    for (stage, speaker) in DebateStage::SEQUENCE.into_iter().zip(Speaker::ORDER) {
        let prompt = render_debate_turn(stage, &history, scenario, variant, order, s.prompts)?;
        let tag = format!("debate/{}/{:?}", scenario.id, stage);
        let turn = match speaker {
            Speaker::Evaluated => {
                let response = eval_side.ask(s, prompt.clone(), &tag)?;
                Turn {
                    speaker,
                    prompt,
                    response,
                    retried: false,
                }
            }
            Speaker::Opponent => {
                // evaluated's choice as the opponent sees it on screen
                let shown = initial.as_ref().expect("set at round 1").option.through(order);
                let saved = opp_side.messages.clone();
                let response = opp_side.ask(s, prompt.clone(), &tag)?;
                if detect_option(&response) != Some(shown) {
                    Turn {
                        speaker,
                        prompt,
                        response,
                        retried: false,
                    }
                } else {
                    log::warn!("{}: opponent {} agreed; retrying", scenario.id, opponent.name());
                    opp_side.messages = saved;
                    let prompt = format!("{prompt}\n{}", s.prompts.opponent_reminder(shown)?);
                    let response = opp_side.ask(s, prompt.clone(), &format!("{tag}/retry"))?;
                    if detect_option(&response) == Some(shown) {
                        return Err(DebateError::ProtocolViolation {
                            scenario: scenario.id.clone(),
                            opponent: opponent.name().to_string(),
                        });
                    }
                    Turn {
                        speaker,
                        prompt,
                        response,
                        retried: true,
                    }
                }
            }
        };
        if stage == DebateStage::Round1Evaluated {
            initial = Some(parse_choice(&turn.response, order).map_err(|e| DebateError::InitialUnparseable {
                scenario: scenario.id.clone(),
                tag: e.tag().to_string(),
            })?);
        }
        history.push(turn.response.clone());
        turns.push(turn);
    }

    let initial = initial.expect("round 1 ran");
    let last = &turns[4].response;
    let (final_choice, final_error) = match parse_choice(last, order) {
        Ok(p) => (Some(p), None),
        Err(e) => (None, Some(e.tag().to_string())),
    };
    Ok(DebateTranscript {
        scenario_id: scenario.id.clone(),
        variant,
        order,
        evaluated: evaluated.name().to_string(),
        opponent: opponent.name().to_string(),
        changed: final_choice.as_ref().map(|f| changed(initial.option, f.option)),
        final_firmness: final_choice.as_ref().map(|f| f.firmness),
        initial,
        turns,
        final_choice,
        final_error,
    })
}

fn failure(scenario: &str, evaluated: &str, opponent: &str, e: &DebateError) -> DebateFailure {
    DebateFailure {
        scenario_id: scenario.to_string(),
        evaluated: evaluated.to_string(),
        opponent: opponent.to_string(),
        kind: e.kind().to_string(),
        message: e.to_string(),
    }
}

/// Runs and persists one debate. A failure is persisted as a
/// [`DebateFailure`] before it is returned.
pub fn run_debate(
    s: &Session<'_>,
    scenario: &MoralScenario,
    variant: Variant,
    order: OptionOrder,
    evaluated: &dyn ChatProvider,
    opponent: &dyn ChatProvider,
) -> Result<DebateTranscript, DebateError> {
    match debate_inner(s, scenario, variant, order, evaluated, opponent) {
        Ok(t) => {
            s.store.append_transcript(s.run_id, &t)?;
            Ok(t)
        }
        Err(e) => {
            if !matches!(e, DebateError::Store(StoreError::Io { .. })) {
                s.store
                    .append_transcript(s.run_id, &failure(&scenario.id, evaluated.name(), opponent.name(), &e))?;
            }
            Err(e)
        }
    }
}

pub type ProviderPair = (Arc<dyn ChatProvider>, Arc<dyn ChatProvider>);

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DebateBatch {
    /// In (pair, scenario) order.
    pub transcripts: Vec<DebateTranscript>,
    pub failures: Vec<DebateFailure>,
}

/// Debates every scenario for every (evaluated, opponent) pair. Per-scenario
/// failures are tallied and do not stop the batch.
pub fn run_debate_batch(
    s: &Session<'_>,
    c: &Corpus,
    pairs: &[ProviderPair],
    variant: Variant,
    order: OptionOrder,
) -> Result<DebateBatch, DebateError> {
    for (e, o) in pairs {
        if e.name() == o.name() {
            return Err(DebateError::SameRoles(e.name().to_string()));
        }
    }
    let mut jobs = Vec::new();
    for (pi, _) in pairs.iter().enumerate() {
        for sc in c.scenarios() {
            jobs.push((pi, sc));
        }
    }
    let cap = pairs
        .iter()
        .map(|(e, o)| e.config().max_in_flight.min(o.config().max_in_flight))
        .min()
        .unwrap_or(1)
        .max(1);
    let results = exec::map_bounded(s.exec, cap, &jobs, |&(pi, sc)| {
        let (e, o) = &pairs[pi];
        debate_inner(s, sc, variant, order, e.as_ref(), o.as_ref())
    });
    let mut batch = DebateBatch::default();
    for (&(pi, sc), r) in jobs.iter().zip(results) {
        let (e, o) = &pairs[pi];
        match r {
            Ok(t) => {
                s.store.append_transcript(s.run_id, &t)?;
                batch.transcripts.push(t);
            }
            Err(DebateError::Store(err @ StoreError::Io { .. })) => return Err(err.into()),
            Err(err) => {
                log::warn!("debate failed: {err}");
                let f = failure(&sc.id, e.name(), o.name(), &err);
                s.store.append_transcript(s.run_id, &f)?;
                batch.failures.push(f);
            }
        }
    }
    Ok(batch)
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum JsonlLine<'a> {
    Turn {
        scenario_id: &'a str,
        evaluated: &'a str,
        opponent: &'a str,
        index: usize,
        speaker: Speaker,
        prompt: &'a str,
        response: &'a str,
        retried: bool,
    },
    Summary {
        scenario_id: &'a str,
        variant: Variant,
        order: OptionOrder,
        evaluated: &'a str,
        opponent: &'a str,
        initial: OptionLabel,
        initial_firmness: u8,
        #[serde(rename = "final")]
        final_option: Option<OptionLabel>,
        final_firmness: Option<u8>,
        changed: Option<bool>,
    },
}

/// One line per turn followed by a summary line, per transcript.
pub fn write_jsonl<W: Write>(transcripts: &[DebateTranscript], mut w: W) -> std::io::Result<()> {
    for t in transcripts {
        for (i, turn) in t.turns.iter().enumerate() {
            let line = JsonlLine::Turn {
                scenario_id: &t.scenario_id,
                evaluated: &t.evaluated,
                opponent: &t.opponent,
                index: i + 1,
                speaker: turn.speaker,
                prompt: &turn.prompt,
                response: &turn.response,
                retried: turn.retried,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        let line = JsonlLine::Summary {
            scenario_id: &t.scenario_id,
            variant: t.variant,
            order: t.order,
            evaluated: &t.evaluated,
            opponent: &t.opponent,
            initial: t.initial.option,
            initial_firmness: t.initial.firmness,
            final_option: t.final_choice.as_ref().map(|f| f.option),
            final_firmness: t.final_firmness,
            changed: t.changed,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Columns: scenario, pair, initial, final, changed, final_firmness. Blank
/// cells mark an unparseable final answer.
pub fn write_summary_csv<W: Write>(transcripts: &[DebateTranscript], w: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["scenario", "pair", "initial", "final", "changed", "final_firmness"])?;
    for t in transcripts {
        w.write_record([
            t.scenario_id.clone(),
            format!("{}>{}", t.evaluated, t.opponent),
            t.initial.option.to_string(),
            opt(t.final_choice.as_ref().map(|f| f.option)),
            opt(t.changed),
            opt(t.final_firmness),
        ])?;
    }
    w.flush()?;
    Ok(())
}
