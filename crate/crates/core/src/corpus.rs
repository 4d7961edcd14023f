//! Moral corpus: words, principles, scenarios and human survey responses.
//!
//! The corpus is a single JSON document with top-level `words`,
//! `principles` and `scenarios` arrays. Gender variants are stored inline
//! on each scenario under `variants`. See `docs/corpus-schema.md` for the
//! full layout.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::elicitation::ChoiceRecord;
use crate::prompts::{Language, OptionOrder};

/// Schema version understood by [`load_corpus`].
pub const SCHEMA_VERSION: u32 = 1;

/// Rater name used for aggregated human survey answers.
pub const HUMAN_PANEL: &str = "human-panel";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed corpus: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("corpus schema version {found} does not match expected {expected}")]
    SchemaVersion { expected: u32, found: u32 },
    #[error("dangling reference: {entity} refers to unknown {kind} `{target}`")]
    Reference {
        entity: String,
        kind: &'static str,
        target: String,
    },
    #[error("malformed survey file: {0}")]
    Survey(#[from] csv::Error),
    #[error("survey response refers to unknown scenario `{0}`")]
    UnknownSurveyScenario(String),
    #[error("no survey respondents remain after quality-control exclusion")]
    EmptySurvey,
    #[error("survey firmness {0} outside 1..=3")]
    SurveyFirmness(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordCategory {
    Social,
    Occupation,
    Family,
    Individual,
}

impl WordCategory {
    pub const ALL: [WordCategory; 4] = [
        WordCategory::Social,
        WordCategory::Occupation,
        WordCategory::Family,
        WordCategory::Individual,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WordCategory::Social => "social",
            WordCategory::Occupation => "occupation",
            WordCategory::Family => "family",
            WordCategory::Individual => "individual",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoralWord {
    pub id: String,
    pub text: String,
    pub polarity: Polarity,
    pub category: WordCategory,
    pub intensity: u32,
    /// Phrase used for the negated question form. When absent the prompt
    /// bundle's negation prefix is prepended to `text`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negated: Option<String>,
}

/// Kohlberg level, derived from the stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MoralLevel {
    Preconventional,
    Conventional,
    Postconventional,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoralPrinciple {
    pub id: u32,
    pub name: String,
    pub stage: u8,
}

impl MoralPrinciple {
    pub fn level(&self) -> Option<MoralLevel> {
        match self.stage {
            1 | 2 => Some(MoralLevel::Preconventional),
            3 | 4 => Some(MoralLevel::Conventional),
            5 | 6 => Some(MoralLevel::Postconventional),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Default,
    Man,
    Woman,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Default, Variant::Man, Variant::Woman];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Default => "default",
            Variant::Man => "man",
            Variant::Woman => "woman",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "default" => Ok(Variant::Default),
            "man" => Ok(Variant::Man),
            "woman" => Ok(Variant::Woman),
            other => Err(format!("unknown variant `{other}`")),
        }
    }
}

/// Option label in canonical scenario coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OptionLabel {
    A,
    B,
}

impl OptionLabel {
    pub fn other(self) -> OptionLabel {
        match self {
            OptionLabel::A => OptionLabel::B,
            OptionLabel::B => OptionLabel::A,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OptionLabel::A => "A",
            OptionLabel::B => "B",
        }
    }

    /// Maps between displayed and canonical labels. The mapping is its own
    /// inverse.
    pub fn through(self, order: OptionOrder) -> OptionLabel {
        match order {
            OptionOrder::Original => self,
            OptionOrder::Swapped => self.other(),
        }
    }
}

impl fmt::Display for OptionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioText {
    pub context: String,
    pub option_a: String,
    pub option_b: String,
}

impl ScenarioText {
    pub fn option(&self, label: OptionLabel) -> &str {
        match label {
            OptionLabel::A => &self.option_a,
            OptionLabel::B => &self.option_b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoralScenario {
    pub id: String,
    pub word_id: String,
    pub variants: BTreeMap<Variant, ScenarioText>,
    pub principles_a: Vec<u32>,
    pub principles_b: Vec<u32>,
    pub immoral_option: OptionLabel,
    #[serde(default)]
    pub ambiguous: bool,
}

impl MoralScenario {
    pub fn variant(&self, variant: Variant) -> Option<&ScenarioText> {
        self.variants.get(&variant)
    }

    pub fn principles(&self, label: OptionLabel) -> &[u32] {
        match label {
            OptionLabel::A => &self.principles_a,
            OptionLabel::B => &self.principles_b,
        }
    }
}

/// The on-disk corpus document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDocument {
    pub schema_version: u32,
    #[serde(default)]
    pub language: Language,
    #[serde(default)]
    pub words: Vec<MoralWord>,
    #[serde(default)]
    pub principles: Vec<MoralPrinciple>,
    #[serde(default)]
    pub scenarios: Vec<MoralScenario>,
}

/// A loaded corpus with resolved cross-references. Immutable after
/// construction.
#[derive(Debug, Clone)]
pub struct Corpus {
    doc: CorpusDocument,
    word_index: HashMap<String, usize>,
    principle_index: HashMap<u32, usize>,
    scenario_index: HashMap<String, usize>,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.doc == other.doc
    }
}

impl Corpus {
    /// Resolves every word and principle reference of `doc`.
    pub fn from_document(doc: CorpusDocument) -> Result<Self, CorpusError> {
        let word_index: HashMap<_, _> = doc
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.id.clone(), i))
            .collect();
        let principle_index: HashMap<_, _> = doc
            .principles
            .iter()
            .enumerate()
            .map(|(i, p)| (p.id, i))
            .collect();
        let scenario_index: HashMap<_, _> = doc
            .scenarios
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect();

        for s in &doc.scenarios {
            if !word_index.contains_key(&s.word_id) {
                return Err(CorpusError::Reference {
                    entity: format!("scenario {}", s.id),
                    kind: "word",
                    target: s.word_id.clone(),
                });
            }
            for p in s.principles_a.iter().chain(&s.principles_b) {
                if !principle_index.contains_key(p) {
                    return Err(CorpusError::Reference {
                        entity: format!("scenario {}", s.id),
                        kind: "principle",
                        target: p.to_string(),
                    });
                }
            }
        }

        Ok(Corpus {
            doc,
            word_index,
            principle_index,
            scenario_index,
        })
    }

    pub fn from_json(text: &str, expected_version: u32) -> Result<Self, CorpusError> {
        let doc: CorpusDocument = serde_json::from_str(text)?;
        if doc.schema_version != expected_version {
            return Err(CorpusError::SchemaVersion {
                expected: expected_version,
                found: doc.schema_version,
            });
        }
        Corpus::from_document(doc)
    }

    pub fn document(&self) -> &CorpusDocument {
        &self.doc
    }

    pub fn language(&self) -> Language {
        self.doc.language
    }

    pub fn words(&self) -> &[MoralWord] {
        &self.doc.words
    }

    pub fn principles(&self) -> &[MoralPrinciple] {
        &self.doc.principles
    }

    pub fn scenarios(&self) -> &[MoralScenario] {
        &self.doc.scenarios
    }

    pub fn word(&self, id: &str) -> Option<&MoralWord> {
        self.word_index.get(id).map(|&i| &self.doc.words[i])
    }

    pub fn principle(&self, id: u32) -> Option<&MoralPrinciple> {
        self.principle_index.get(&id).map(|&i| &self.doc.principles[i])
    }

    pub fn scenario(&self, id: &str) -> Option<&MoralScenario> {
        self.scenario_index.get(id).map(|&i| &self.doc.scenarios[i])
    }

    /// Position of a scenario in corpus order.
    pub fn scenario_position(&self, id: &str) -> Option<usize> {
        self.scenario_index.get(id).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.doc).expect("corpus document serializes")
    }

    /// Hex SHA-256 over the canonical serialization.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(&self.doc).expect("corpus document serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

pub fn load_corpus(path: &Path, expected_version: u32) -> Result<Corpus, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Corpus::from_json(&text, expected_version)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    UniqueId,
    NonEmptyText,
    Polarity,
    StageRange,
    DefaultVariant,
    Reference,
    Disjointness,
    Cardinality,
    NonEmptyOption,
    DistinctOptions,
}

impl Rule {
    pub fn as_str(self) -> &'static str {
        match self {
            Rule::UniqueId => "unique id",
            Rule::NonEmptyText => "non-empty text",
            Rule::Polarity => "negative polarity",
            Rule::StageRange => "stage 1-6",
            Rule::DefaultVariant => "default variant",
            Rule::Reference => "reference",
            Rule::Disjointness => "disjointness",
            Rule::Cardinality => "cardinality 1-2",
            Rule::NonEmptyOption => "non-empty option",
            Rule::DistinctOptions => "distinct options",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub entity: String,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}, {}: {}", self.rule.as_str(), self.entity, self.detail)
    }
}

/// Checks every corpus invariant. An empty result means the corpus is valid.
pub fn validate_corpus(c: &Corpus) -> Vec<Violation> {
    let doc = &c.doc;
    let mut out = Vec::new();
    let mut push = |entity: String, rule: Rule, detail: String| {
        out.push(Violation {
            entity,
            rule,
            detail,
        })
    };

    let mut seen = HashSet::new();
    for w in &doc.words {
        let entity = format!("word {}", w.id);
        if !seen.insert(w.id.as_str()) {
            push(entity.clone(), Rule::UniqueId, "duplicate word id".into());
        }
        if w.text.trim().is_empty() {
            push(entity.clone(), Rule::NonEmptyText, "word text is empty".into());
        }
        if w.polarity != Polarity::Negative {
            push(entity.clone(), Rule::Polarity, "word is not negative".into());
        }
        if w.intensity < 1 {
            push(entity, Rule::StageRange, "intensity must be >= 1".into());
        }
    }

    let mut seen = HashSet::new();
    for p in &doc.principles {
        let entity = format!("principle {}", p.id);
        if !seen.insert(p.id) {
            push(entity.clone(), Rule::UniqueId, "duplicate principle id".into());
        }
        if !(1..=6).contains(&p.stage) {
            push(entity, Rule::StageRange, format!("stage {} outside 1..=6", p.stage));
        }
    }

    let mut seen = HashSet::new();
    for s in &doc.scenarios {
        let entity = format!("scenario {}", s.id);
        if !seen.insert(s.id.as_str()) {
            push(entity.clone(), Rule::UniqueId, "duplicate scenario id".into());
        }
        if c.word(&s.word_id).is_none() {
            push(entity.clone(), Rule::Reference, format!("unknown word {}", s.word_id));
        }
        if !s.variants.contains_key(&Variant::Default) {
            push(entity.clone(), Rule::DefaultVariant, "default variant missing".into());
        }
        for (side, list) in [("A", &s.principles_a), ("B", &s.principles_b)] {
            if !(1..=2).contains(&list.len()) {
                push(
                    entity.clone(),
                    Rule::Cardinality,
                    format!("option {side} has {} principles", list.len()),
                );
            }
            for p in list {
                if c.principle(*p).is_none() {
                    push(entity.clone(), Rule::Reference, format!("unknown principle {p}"));
                }
            }
        }
        let a: BTreeSet<_> = s.principles_a.iter().collect();
        let shared: Vec<_> = s.principles_b.iter().filter(|p| a.contains(p)).collect();
        if !shared.is_empty() {
            push(
                entity.clone(),
                Rule::Disjointness,
                format!("principles {shared:?} on both sides"),
            );
        }
        for (variant, text) in &s.variants {
            if text.option_a.trim().is_empty() || text.option_b.trim().is_empty() {
                push(
                    entity.clone(),
                    Rule::NonEmptyOption,
                    format!("{variant} variant has an empty option"),
                );
            } else if text.option_a == text.option_b {
                push(
                    entity.clone(),
                    Rule::DistinctOptions,
                    format!("{variant} variant repeats the same option text"),
                );
            }
            if text.context.trim().is_empty() {
                push(
                    entity.clone(),
                    Rule::NonEmptyText,
                    format!("{variant} variant has an empty context"),
                );
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyResponse {
    pub respondent_id: String,
    pub scenario_id: String,
    pub option: OptionLabel,
    pub firmness: u8,
    pub qc_pass: bool,
}

pub fn read_survey_csv<R: Read>(reader: R) -> Result<Vec<SurveyResponse>, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let row: SurveyResponse = row?;
        if !(1..=3).contains(&row.firmness) {
            return Err(CorpusError::SurveyFirmness(row.firmness));
        }
        out.push(row);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyAggregate {
    /// One record per scenario with a strict majority, in corpus order.
    pub records: Vec<ChoiceRecord>,
    /// Scenarios whose vote tied; they produce no record.
    pub tied: Vec<String>,
}

/// Majority vote and mean firmness per scenario over respondents who passed
/// every quality-control check.
pub fn aggregate_survey(
    responses: &[SurveyResponse],
    c: &Corpus,
) -> Result<SurveyAggregate, CorpusError> {
    for r in responses {
        if c.scenario(&r.scenario_id).is_none() {
            return Err(CorpusError::UnknownSurveyScenario(r.scenario_id.clone()));
        }
        if !(1..=3).contains(&r.firmness) {
            return Err(CorpusError::SurveyFirmness(r.firmness));
        }
    }
    let failed: HashSet<&str> = responses
        .iter()
        .filter(|r| !r.qc_pass)
        .map(|r| r.respondent_id.as_str())
        .collect();
    let kept: Vec<&SurveyResponse> = responses
        .iter()
        .filter(|r| !failed.contains(r.respondent_id.as_str()))
        .collect();
    if kept.is_empty() {
        return Err(CorpusError::EmptySurvey);
    }

    #[derive(Default)]
    struct Tally {
        a: u32,
        b: u32,
        firmness_sum: u32,
        n: u32,
    }
    let mut tallies: BTreeMap<usize, Tally> = BTreeMap::new();
    for r in kept {
        let pos = c.scenario_position(&r.scenario_id).expect("checked above");
        let t = tallies.entry(pos).or_default();
        match r.option {
            OptionLabel::A => t.a += 1,
            OptionLabel::B => t.b += 1,
        }
        t.firmness_sum += u32::from(r.firmness);
        t.n += 1;
    }

    let mut agg = SurveyAggregate {
        records: Vec::new(),
        tied: Vec::new(),
    };
    for (pos, t) in tallies {
        let scenario = &c.scenarios()[pos];
        let option = match t.a.cmp(&t.b) {
            std::cmp::Ordering::Greater => OptionLabel::A,
            std::cmp::Ordering::Less => OptionLabel::B,
            std::cmp::Ordering::Equal => {
                agg.tied.push(scenario.id.clone());
                continue;
            }
        };
        // half-up rounding of sum / n in integers: floor((2 * sum + n) / (2n))
        let firmness = ((2 * t.firmness_sum + t.n) / (2 * t.n)).clamp(1, 3) as u8;
        agg.records.push(ChoiceRecord::human(&scenario.id, option, firmness));
    }
    Ok(agg)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub words: usize,
    pub principles: usize,
    pub scenarios: usize,
    pub words_by_category: BTreeMap<WordCategory, usize>,
    /// Scenarios counted by the category of the word they expand.
    pub scenarios_by_category: BTreeMap<WordCategory, usize>,
    /// Principles per Kohlberg stage; index 0 is stage 1.
    pub stage_histogram: [usize; 6],
    pub variant_coverage: BTreeMap<Variant, usize>,
    pub ambiguous: usize,
    /// Sum over scenarios of |principles_a| * |principles_b|.
    pub max_pairs: usize,
}

pub fn corpus_stats(c: &Corpus) -> CorpusStats {
    let zeroed = || -> BTreeMap<WordCategory, usize> {
        WordCategory::ALL.iter().map(|&k| (k, 0)).collect()
    };
    let mut words_by_category = zeroed();
    for w in c.words() {
        *words_by_category.entry(w.category).or_default() += 1;
    }
    let mut scenarios_by_category = zeroed();
    let mut variant_coverage: BTreeMap<Variant, usize> =
        Variant::ALL.iter().map(|&v| (v, 0)).collect();
    let mut ambiguous = 0;
    let mut max_pairs = 0;
    for s in c.scenarios() {
        if let Some(w) = c.word(&s.word_id) {
            *scenarios_by_category.entry(w.category).or_default() += 1;
        }
        for v in s.variants.keys() {
            *variant_coverage.entry(*v).or_default() += 1;
        }
        ambiguous += usize::from(s.ambiguous);
        max_pairs += s.principles_a.len() * s.principles_b.len();
    }
    let mut stage_histogram = [0usize; 6];
    for p in c.principles() {
        if (1..=6).contains(&p.stage) {
            stage_histogram[usize::from(p.stage) - 1] += 1;
        }
    }
    CorpusStats {
        words: c.words().len(),
        principles: c.principles().len(),
        scenarios: c.scenarios().len(),
        words_by_category,
        scenarios_by_category,
        stage_histogram,
        variant_coverage,
        ambiguous,
        max_pairs,
    }
}
