//! Word-judgment, moral-choice and stability experiments.
//!
//! Each run expands a request grid into jobs, sends them through the cache
//! with a bounded number in flight, and returns records in grid order. The
//! records are appended to the run transcript before they are returned. If
//! any job fails hard nothing is appended; the responses already cached make
//! the rerun cheap.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, OptionLabel, Variant, HUMAN_PANEL};
use crate::exec::{self, Execution};
use crate::gateway::{ChatProvider, ChatRequest};
use crate::parsing::{parse_choice, parse_judgment, JudgmentVerdict, Lexicon, ReviewItem, VerdictKind};
use crate::prompts::{render_choice, render_word_judgment, OptionOrder, PromptBundle, PromptError, QuestionForm};
use crate::runstore::{RunStore, StoreError, TranscriptRecord};

#[derive(Debug, Error)]
pub enum ElicitError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("replicates must be >= 1")]
    NoReplicates,
    #[error("empty {0} grid")]
    EmptyGrid(&'static str),
    #[error("temperature {0} outside [0, 2]")]
    Temperature(f64),
    #[error("review item `{0}` matches no record")]
    UnknownReviewItem(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentRecord {
    pub model: String,
    pub word_id: String,
    pub form: QuestionForm,
    pub verdict: JudgmentVerdict,
    pub raw: String,
    pub replicate: u32,
    /// Set when the verdict came from a manual review.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub reviewed: bool,
}

impl JudgmentRecord {
    /// Identifier used in review sheets.
    pub fn item_id(&self) -> String {
        format!("{}/{}/{}/{}", self.model, self.word_id, self.form.as_str(), self.replicate)
    }
}

impl TranscriptRecord for JudgmentRecord {
    const KIND: &'static str = "judgment";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceRecord {
    pub model: String,
    pub scenario_id: String,
    pub variant: Variant,
    pub order: OptionOrder,
    /// Canonical option; present iff `parse_error` is absent.
    pub option: Option<OptionLabel>,
    pub firmness: Option<u8>,
    #[serde(default)]
    pub reason: String,
    #[serde(default)]
    pub raw: String,
    pub replicate: u32,
    /// Effective sampling temperature, absent for human records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
}

impl ChoiceRecord {
    /// Aggregated human-panel answer for one scenario.
    pub fn human(scenario_id: &str, option: OptionLabel, firmness: u8) -> ChoiceRecord {
        ChoiceRecord {
            model: HUMAN_PANEL.to_string(),
            scenario_id: scenario_id.to_string(),
            variant: Variant::Default,
            order: OptionOrder::Original,
            option: Some(option),
            firmness: Some(firmness),
            reason: String::new(),
            raw: String::new(),
            replicate: 1,
            temperature: None,
            parse_error: None,
        }
    }

    /// Parses `raw` as an answer given under `order`.
    pub fn from_answer(
        model: &str,
        scenario_id: &str,
        variant: Variant,
        order: OptionOrder,
        replicate: u32,
        temperature: Option<f64>,
        raw: String,
    ) -> ChoiceRecord {
        let (option, firmness, reason, parse_error) = match parse_choice(&raw, order) {
            Ok(p) => (Some(p.option), Some(p.firmness), p.reason, None),
            Err(e) => (None, None, String::new(), Some(e.tag().to_string())),
        };
        ChoiceRecord {
            model: model.to_string(),
            scenario_id: scenario_id.to_string(),
            variant,
            order,
            option,
            firmness,
            reason,
            raw,
            replicate,
            temperature,
            parse_error,
        }
    }

    pub fn parsed(&self) -> Option<(OptionLabel, u8)> {
        match (self.option, self.firmness, &self.parse_error) {
            (Some(o), Some(f), None) => Some((o, f)),
            _ => None,
        }
    }
}

impl TranscriptRecord for ChoiceRecord {
    const KIND: &'static str = "choice";
}

/// A choice record produced by the temperature sweep. Kept under its own
/// transcript kind so sweeps never mix with the main choice grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SweepRecord(pub ChoiceRecord);

impl TranscriptRecord for SweepRecord {
    const KIND: &'static str = "sweep_choice";
}

/// Everything an experiment needs besides the provider.
#[derive(Clone, Copy)]
pub struct Session<'a> {
    pub corpus: &'a Corpus,
    pub prompts: &'a PromptBundle,
    pub lexicon: &'a Lexicon,
    pub store: &'a RunStore,
    pub run_id: &'a str,
    pub exec: Execution,
}

fn dedup<T: Ord + Copy>(xs: &[T]) -> Vec<T> {
    let mut v = xs.to_vec();
    v.sort();
    v.dedup();
    v
}

fn check_replicates(n: u32) -> Result<(), ElicitError> {
    if n == 0 {
        Err(ElicitError::NoReplicates)
    } else {
        Ok(())
    }
}

/// Runs `jobs` through the cache with the provider's concurrency cap and
/// returns results in job order, or the first error in job order.
fn run_jobs<J, R, F>(s: &Session<'_>, provider: &dyn ChatProvider, jobs: &[J], f: F) -> Result<Vec<R>, ElicitError>
where
    J: Sync,
    R: Send,
    F: Fn(&J) -> Result<R, ElicitError> + Send + Sync,
{
    let cap = provider.config().max_in_flight.max(1);
    exec::map_bounded(s.exec, cap, jobs, f).into_iter().collect()
}

pub fn run_word_judgments(
    s: &Session<'_>,
    provider: &dyn ChatProvider,
    forms: &[QuestionForm],
    replicates: u32,
) -> Result<Vec<JudgmentRecord>, ElicitError> {
    check_replicates(replicates)?;
    let forms = dedup(forms);
    if forms.is_empty() {
        return Err(ElicitError::EmptyGrid("form"));
    }
    let mut jobs = Vec::new();
    for w in s.corpus.words() {
        for &form in &forms {
            for rep in 1..=replicates {
                jobs.push((w, form, rep));
            }
        }
    }
    let model = provider.name().to_string();
    let records = run_jobs(s, provider, &jobs, |&(w, form, rep)| {
        let prompt = render_word_judgment(w, form, s.prompts)?;
        let req = ChatRequest::single(prompt).with_tag(format!("judge/{}/{}", w.id, form.as_str()));
        let (raw, _) = s.store.complete_cached(provider, &req, rep)?;
        Ok(JudgmentRecord {
            model: model.clone(),
            word_id: w.id.clone(),
            form,
            verdict: parse_judgment(&raw, s.lexicon),
            raw,
            replicate: rep,
            reviewed: false,
        })
    })?;
    s.store.append_all(s.run_id, &records)?;
    Ok(records)
}

fn check_variants(c: &Corpus, variants: &[Variant]) -> Result<(), ElicitError> {
    for sc in c.scenarios() {
        for &v in variants {
            if sc.variant(v).is_none() {
                return Err(PromptError::MissingVariant {
                    scenario: sc.id.clone(),
                    variant: v,
                }
                .into());
            }
        }
    }
    Ok(())
}

fn choose_one(
    s: &Session<'_>,
    provider: &dyn ChatProvider,
    scenario_index: usize,
    variant: Variant,
    order: OptionOrder,
    rep: u32,
    temperature: Option<f64>,
) -> Result<ChoiceRecord, ElicitError> {
    let sc = &s.corpus.scenarios()[scenario_index];
    let prompt = render_choice(sc, variant, order, s.prompts)?;
    let req = ChatRequest::single(prompt)
        .with_temperature(temperature)
        .with_tag(format!("choose/{}/{}/{}", sc.id, variant, order));
    let effective = temperature.unwrap_or(provider.config().temperature);
    let (raw, _) = s.store.complete_cached(provider, &req, rep)?;
    Ok(ChoiceRecord::from_answer(
        provider.name(),
        &sc.id,
        variant,
        order,
        rep,
        Some(effective),
        raw,
    ))
}

pub fn run_choices(
    s: &Session<'_>,
    provider: &dyn ChatProvider,
    variants: &[Variant],
    orders: &[OptionOrder],
    replicates: u32,
) -> Result<Vec<ChoiceRecord>, ElicitError> {
    check_replicates(replicates)?;
    let variants = dedup(variants);
    let orders = dedup(orders);
    if variants.is_empty() {
        return Err(ElicitError::EmptyGrid("variant"));
    }
    if orders.is_empty() {
        return Err(ElicitError::EmptyGrid("order"));
    }
    check_variants(s.corpus, &variants)?;
    let mut jobs = Vec::new();
    for i in 0..s.corpus.scenarios().len() {
        for &v in &variants {
            for &o in &orders {
                for rep in 1..=replicates {
                    jobs.push((i, v, o, rep));
                }
            }
        }
    }
    let records = run_jobs(s, provider, &jobs, |&(i, v, o, rep)| choose_one(s, provider, i, v, o, rep, None))?;
    s.store.append_all(s.run_id, &records)?;
    Ok(records)
}

/// Choice records of one temperature setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureGroup {
    pub temperature: f64,
    pub records: Vec<ChoiceRecord>,
}

/// Repeats the default-variant, original-order choice grid at each
/// temperature. Groups come back in the order the temperatures were given.
pub fn run_stability_sweep(
    s: &Session<'_>,
    provider: &dyn ChatProvider,
    temperatures: &[f64],
    replicates: u32,
) -> Result<Vec<TemperatureGroup>, ElicitError> {
    check_replicates(replicates)?;
    if temperatures.is_empty() {
        return Err(ElicitError::EmptyGrid("temperature"));
    }
    if let Some(&t) = temperatures.iter().find(|t| !(0.0..=2.0).contains(*t)) {
        return Err(ElicitError::Temperature(t));
    }
    check_variants(s.corpus, &[Variant::Default])?;
    let mut jobs = Vec::new();
    for (ti, &t) in temperatures.iter().enumerate() {
        for i in 0..s.corpus.scenarios().len() {
            for rep in 1..=replicates {
                jobs.push((ti, t, i, rep));
            }
        }
    }
    let records = run_jobs(s, provider, &jobs, |&(_, t, i, rep)| {
        choose_one(s, provider, i, Variant::Default, OptionOrder::Original, rep, Some(t)).map(SweepRecord)
    })?;
    s.store.append_all(s.run_id, &records)?;
    let mut groups: Vec<TemperatureGroup> = temperatures
        .iter()
        .map(|&t| TemperatureGroup {
            temperature: t,
            records: Vec::new(),
        })
        .collect();
    for ((ti, ..), r) in jobs.iter().zip(records) {
        groups[*ti].records.push(r.0);
    }
    Ok(groups)
}

/// Review sheet rows for every judgment the lexicon could not classify.
pub fn review_items(records: &[JudgmentRecord]) -> Vec<ReviewItem> {
    records
        .iter()
        .filter(|r| r.verdict.kind == VerdictKind::Undetermined)
        .map(|r| ReviewItem {
            item_id: r.item_id(),
            text: r.raw.clone(),
            verdict: String::new(),
        })
        .collect()
}

/// Overrides verdicts with reviewer labels. Every label must name a record.
pub fn apply_review(records: &mut [JudgmentRecord], labels: &[(String, VerdictKind)]) -> Result<usize, ElicitError> {
    let index: BTreeMap<String, usize> = records.iter().enumerate().map(|(i, r)| (r.item_id(), i)).collect();
    for (id, kind) in labels {
        let i = *index.get(id).ok_or_else(|| ElicitError::UnknownReviewItem(id.clone()))?;
        records[i].verdict = JudgmentVerdict {
            kind: *kind,
            evidence: None,
        };
        records[i].reviewed = true;
    }
    Ok(labels.len())
}
