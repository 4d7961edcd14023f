//! Command-line driver.
//!
//! Every command reads a TOML run config, writes its artifacts under
//! `<out>/<run_id>/` and records itself in the run manifest. Exit status is
//! 0 on success, 2 for configuration errors, 3 for provider errors, 4 for
//! data errors and 1 for anything else (I/O).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::Utc;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{
    aggregate_survey, corpus_stats, load_corpus, read_survey_csv, validate_corpus, Corpus, CorpusError, Variant,
    HUMAN_PANEL, SCHEMA_VERSION,
};
use crate::debate::{run_debate_batch, write_jsonl, write_summary_csv, DebateError, DebateTranscript, ProviderPair};
use crate::elicitation::{
    review_items, run_choices, run_stability_sweep, run_word_judgments, ChoiceRecord, ElicitError, JudgmentRecord,
    Session, SweepRecord,
};
use crate::exec::Execution;
use crate::gateway::{connect, ChatProvider, GatewayError, ProviderConfig, ProviderKind};
use crate::metrics::{self, fmt_num, ConsistencyReport, FirmnessChange, ImmoralProportion, MatrixReport, MetricsError};
use crate::parsing::{write_review_csv, Lexicon};
use crate::prompts::{Language, OptionOrder, PromptBundle, PromptError, QuestionForm};
use crate::rank::{
    extract_pairs, infer_stages, rank_cells, resolve_contradictions, weight_table, write_weights_csv, CellKey,
    ComparisonPair, Exclusions, IlsrOptions, PairFilter, RankError, RankingResult,
};
use crate::runstore::{CommandEntry, RunManifest, RunStore, StoreError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("provider error: {0}")]
    Provider(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Provider(_) => 3,
            CliError::Data(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Config(_) | GatewayError::Fixture(_) => CliError::Config(e.to_string()),
            _ => CliError::Provider(e.to_string()),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Provider(g) => g.into(),
            StoreError::CorpusMismatch { .. } => CliError::Data(e.to_string()),
            StoreError::InvalidRunId(_) => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<ElicitError> for CliError {
    fn from(e: ElicitError) -> Self {
        match e {
            ElicitError::Store(s) => s.into(),
            ElicitError::Prompt(PromptError::MissingVariant { .. }) => CliError::Data(e.to_string()),
            ElicitError::Prompt(_) => CliError::Config(e.to_string()),
            ElicitError::UnknownReviewItem(_) => CliError::Data(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<DebateError> for CliError {
    fn from(e: DebateError) -> Self {
        match e {
            DebateError::Store(s) => s.into(),
            DebateError::SameRoles(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<RankError> for CliError {
    fn from(e: RankError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn io<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "moral-harness", version, about = "Moral-belief evaluation harness for chat models")]
pub struct Cli {
    /// Run config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run id; defaults to a hash of the config and corpus.
    #[arg(long, global = true)]
    pub run_id: Option<String>,
    /// Restrict to these providers (repeatable).
    #[arg(long = "provider", global = true)]
    pub providers: Vec<String>,
    #[arg(long = "variant", global = true)]
    pub variants: Vec<Variant>,
    #[arg(long = "order", global = true)]
    pub orders: Vec<OptionOrder>,
    #[arg(long, global = true)]
    pub replicates: Option<u32>,
    /// Comma-separated temperatures for the stability sweep.
    #[arg(long, global = true, value_delimiter = ',')]
    pub temperatures: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub min_firmness: Option<u8>,
    /// Output root; the run directory is created under it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Disable data-parallel execution.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Check the corpus and write a violation report.
    Validate,
    /// Ask every selected model whether each moral word is moral.
    JudgeWords,
    /// Elicit scenario choices (and the temperature sweep, if configured).
    Choose,
    /// Rank moral principles per (model, variant).
    Rank,
    /// Run two-round debates between model pairs.
    Debate,
    /// Compute every metric from the stored records.
    Metrics,
    /// Collate metrics and rankings into one summary.
    Report,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::JudgeWords => "judge-words",
            Command::Choose => "choose",
            Command::Rank => "rank",
            Command::Debate => "debate",
            Command::Metrics => "metrics",
            Command::Report => "report",
        }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_forms() -> Vec<QuestionForm> {
    vec![QuestionForm::Affirmative, QuestionForm::Negated]
}
fn default_variants() -> Vec<Variant> {
    vec![Variant::Default]
}
fn default_orders() -> Vec<OptionOrder> {
    vec![OptionOrder::Original, OptionOrder::Swapped]
}
fn one() -> u32 {
    1
}
fn default_min_firmness() -> u8 {
    2
}
fn yes() -> bool {
    true
}
fn ten() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiments {
    /// Providers to elicit; all configured providers when empty.
    #[serde(default)]
    pub models: Vec<String>,
    #[serde(default = "default_forms")]
    pub forms: Vec<QuestionForm>,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "default_orders")]
    pub orders: Vec<OptionOrder>,
    #[serde(default = "one")]
    pub replicates: u32,
    /// Stability sweep temperatures; no sweep when empty.
    #[serde(default)]
    pub temperatures: Vec<f64>,
    #[serde(default = "one")]
    pub sweep_replicates: u32,
}

impl Default for Experiments {
    fn default() -> Self {
        Experiments {
            models: Vec::new(),
            forms: default_forms(),
            variants: default_variants(),
            orders: default_orders(),
            replicates: 1,
            temperatures: Vec::new(),
            sweep_replicates: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankingConfig {
    #[serde(default = "default_min_firmness")]
    pub min_firmness: u8,
    #[serde(default = "yes")]
    pub require_order_stable: bool,
    #[serde(default = "ten")]
    pub top_k: usize,
}

impl Default for RankingConfig {
    fn default() -> Self {
        RankingConfig {
            min_firmness: 2,
            require_order_stable: true,
            top_k: 10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DebateConfig {
    /// (evaluated, opponent) names; every ordered pair of models when empty.
    #[serde(default)]
    pub pairs: Vec<[String; 2]>,
    #[serde(default)]
    pub variant: Option<Variant>,
    #[serde(default)]
    pub order: Option<OptionOrder>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    #[serde(default)]
    pub language: Option<Language>,
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    #[serde(default)]
    pub max_prompt_chars: Option<usize>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub run_id: Option<String>,
    /// Recorded in the manifest; the pipeline itself draws no random numbers.
    #[serde(default)]
    pub seed: u64,
    /// Human-panel survey CSV, aggregated into choice records by `choose`.
    #[serde(default)]
    pub human_survey: Option<PathBuf>,
    #[serde(default)]
    pub execution: Execution,
    #[serde(default)]
    pub providers: Vec<ProviderConfig>,
    #[serde(default)]
    pub experiments: Experiments,
    #[serde(default)]
    pub ranking: RankingConfig,
    #[serde(default)]
    pub debate: DebateConfig,
}

fn check_no_interpolation(v: &toml::Value, at: &str) -> Result<(), CliError> {
    match v {
        toml::Value::String(s) if s.contains("${") => Err(CliError::Config(format!(
            "{at}: environment interpolation is only allowed for credentials (use auth_env)"
        ))),
        toml::Value::Array(xs) => xs.iter().try_for_each(|x| check_no_interpolation(x, at)),
        toml::Value::Table(t) => t
            .iter()
            .try_for_each(|(k, x)| check_no_interpolation(x, &format!("{at}.{k}"))),
        _ => Ok(()),
    }
}

fn safe_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<RunConfig, CliError> {
        let raw: toml::Value = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        check_no_interpolation(&raw, "config")?;
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.corpus);
        resolve(&mut cfg.output);
        for p in [&mut cfg.prompts_dir, &mut cfg.lexicon, &mut cfg.human_survey].into_iter().flatten() {
            resolve(p);
        }
        for p in &mut cfg.providers {
            if let Some(f) = &mut p.fixture {
                resolve(f);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let mut names = BTreeSet::new();
        for p in &self.providers {
            p.validate()?;
            if !safe_name(&p.name) || p.name == HUMAN_PANEL {
                return Err(CliError::Config(format!("provider name `{}` not allowed", p.name)));
            }
            if !names.insert(p.name.as_str()) {
                return Err(CliError::Config(format!("provider `{}` defined twice", p.name)));
            }
            if p.kind == ProviderKind::Mock && p.fixture.is_none() {
                return Err(CliError::Config(format!("mock provider `{}` needs a fixture", p.name)));
            }
        }
        let known = |n: &str| -> Result<(), CliError> {
            if names.contains(n) {
                Ok(())
            } else {
                Err(CliError::Config(format!("provider `{n}` is not defined")))
            }
        };
        for m in &self.experiments.models {
            known(m)?;
        }
        for [e, o] in &self.debate.pairs {
            known(e)?;
            known(o)?;
            if e == o {
                return Err(CliError::Config(format!("debate pair `{e}` against itself")));
            }
        }
        check_min_firmness(self.ranking.min_firmness)?;
        if let Some(id) = &self.run_id {
            if !crate::runstore::valid_run_id(id) {
                return Err(CliError::Config(format!("invalid run id `{id}`")));
            }
        }
        Ok(())
    }

    /// Content hash of the config together with the corpus digest.
    pub fn default_run_id(&self, corpus_digest: &str) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        h.update(corpus_digest.as_bytes());
        format!("run-{}", &hex::encode(h.finalize())[..16])
    }
}

fn check_min_firmness(m: u8) -> Result<(), CliError> {
    if (1..=3).contains(&m) {
        Ok(())
    } else {
        Err(CliError::Config(format!("min_firmness {m} not in 1..=3")))
    }
}

/// Everything loaded for one command.
struct Context {
    cfg: RunConfig,
    cli_models: Vec<String>,
    variants: Vec<Variant>,
    orders: Vec<OptionOrder>,
    replicates: u32,
    temperatures: Vec<f64>,
    min_firmness: u8,
    exec: Execution,
    corpus: Corpus,
    prompts: PromptBundle,
    lexicon: Lexicon,
    store: RunStore,
    run_id: String,
}

impl Context {
    fn session(&self) -> Session<'_> {
        Session {
            corpus: &self.corpus,
            prompts: &self.prompts,
            lexicon: &self.lexicon,
            store: &self.store,
            run_id: &self.run_id,
            exec: self.exec,
        }
    }

    fn dir(&self) -> PathBuf {
        self.store.run_dir(&self.run_id)
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.dir().join(name)
    }

    /// Selected model names in config order.
    fn models(&self) -> Result<Vec<String>, CliError> {
        let all: Vec<String> = self.cfg.providers.iter().map(|p| p.name.clone()).collect();
        if !self.cli_models.is_empty() {
            for m in &self.cli_models {
                if !all.contains(m) {
                    return Err(CliError::Config(format!("provider `{m}` is not defined")));
                }
            }
            return Ok(all.into_iter().filter(|n| self.cli_models.contains(n)).collect());
        }
        if !self.cfg.experiments.models.is_empty() {
            return Ok(self.cfg.experiments.models.clone());
        }
        Ok(all)
    }

    fn provider(&self, name: &str) -> Result<Arc<dyn ChatProvider>, CliError> {
        let cfg = self
            .cfg
            .providers
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| CliError::Config(format!("provider `{name}` is not defined")))?;
        Ok(connect(cfg)?)
    }
}

fn load_context(cli: &Cli) -> Result<Context, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let cfg = RunConfig::load(path)?;
    if let Some(m) = cli.min_firmness {
        check_min_firmness(m)?;
    }
    if let Some(0) = cli.replicates {
        return Err(CliError::Config("--replicates must be >= 1".into()));
    }
    let corpus = load_corpus(&cfg.corpus, SCHEMA_VERSION)?;
    let language = cfg.language.unwrap_or(corpus.language());
    let mut prompts = match &cfg.prompts_dir {
        Some(dir) => PromptBundle::from_dir(dir, language).map_err(|e| CliError::Config(e.to_string()))?,
        None => PromptBundle::builtin(language),
    };
    if let Some(n) = cfg.max_prompt_chars {
        prompts = prompts.with_max_chars(n);
    }
    let lexicon = match &cfg.lexicon {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            Lexicon::from_json(&text).map_err(|e| CliError::Config(e.to_string()))?
        }
        None => Lexicon::builtin(language),
    };
    let out = cli.out.clone().unwrap_or_else(|| cfg.output.clone());
    let run_id = match cli.run_id.clone().or_else(|| cfg.run_id.clone()) {
        Some(id) => id,
        None => cfg.default_run_id(&corpus.digest()),
    };
    if !crate::runstore::valid_run_id(&run_id) {
        return Err(CliError::Config(format!("invalid run id `{run_id}`")));
    }
    let store = RunStore::open(&out)?;
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        cfg.execution
    };
    Ok(Context {
        variants: if cli.variants.is_empty() {
            cfg.experiments.variants.clone()
        } else {
            cli.variants.clone()
        },
        orders: if cli.orders.is_empty() {
            cfg.experiments.orders.clone()
        } else {
            cli.orders.clone()
        },
        replicates: cli.replicates.unwrap_or(cfg.experiments.replicates),
        temperatures: cli.temperatures.clone().unwrap_or_else(|| cfg.experiments.temperatures.clone()),
        min_firmness: cli.min_firmness.unwrap_or(cfg.ranking.min_firmness),
        cli_models: cli.providers.clone(),
        exec,
        corpus,
        prompts,
        lexicon,
        store,
        run_id,
        cfg,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(io(path))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|_| CliError::Data(format!("missing upstream artifact {}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn csv_file(path: &Path) -> Result<fs::File, CliError> {
    fs::File::create(path).map_err(io(path))
}

/// Last occurrence per key, returned in key order.
fn latest<T, K: Ord>(records: Vec<T>, key: impl Fn(&T) -> K) -> Vec<T> {
    let mut m = BTreeMap::new();
    for r in records {
        m.insert(key(&r), r);
    }
    m.into_values().collect()
}

fn choice_key(r: &ChoiceRecord) -> (String, String, Variant, OptionOrder, u32, u64) {
    (
        r.model.clone(),
        r.scenario_id.clone(),
        r.variant,
        r.order,
        r.replicate,
        r.temperature.map_or(0, f64::to_bits),
    )
}

struct Records {
    judgments: Vec<JudgmentRecord>,
    choices: Vec<ChoiceRecord>,
    sweeps: Vec<ChoiceRecord>,
    debates: Vec<DebateTranscript>,
}

fn load_records(ctx: &Context) -> Result<Records, CliError> {
    let s = &ctx.store;
    let id = &ctx.run_id;
    Ok(Records {
        judgments: latest(s.read_records::<JudgmentRecord>(id)?, |j| {
            (j.model.clone(), j.word_id.clone(), j.form, j.replicate)
        }),
        choices: latest(s.read_records::<ChoiceRecord>(id)?, choice_key),
        sweeps: latest(
            s.read_records::<SweepRecord>(id)?.into_iter().map(|r| r.0).collect(),
            choice_key,
        ),
        debates: latest(s.read_records::<DebateTranscript>(id)?, |t| {
            (
                t.evaluated.clone(),
                t.opponent.clone(),
                t.scenario_id.clone(),
                t.variant,
                t.order,
            )
        }),
    })
}

fn group_by_model<T: Clone>(records: &[T], model: impl Fn(&T) -> &str) -> BTreeMap<String, Vec<T>> {
    let mut m: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for r in records {
        m.entry(model(r).to_string()).or_default().push(r.clone());
    }
    m
}

/// Outcome of a successful command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
}

pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let ctx = load_context(cli)?;
    let providers = ctx.cfg.providers.clone();
    ctx.store.ensure_run(RunManifest::new(&ctx.run_id, &ctx.corpus.digest(), providers))?;
    let params = serde_json::json!({
        "providers": ctx.cli_models,
        "variants": ctx.variants,
        "orders": ctx.orders,
        "replicates": ctx.replicates,
        "temperatures": ctx.temperatures,
        "min_firmness": ctx.min_firmness,
        "execution": ctx.exec,
        "seed": ctx.cfg.seed,
    });
    let started = Utc::now();
    let artifacts = match cli.command {
        Command::Validate => cmd_validate(&ctx),
        Command::JudgeWords => cmd_judge(&ctx),
        Command::Choose => cmd_choose(&ctx),
        Command::Rank => cmd_rank(&ctx),
        Command::Debate => cmd_debate(&ctx),
        Command::Metrics => cmd_metrics(&ctx),
        Command::Report => cmd_report(&ctx),
    }?;
    ctx.store.update_manifest(&ctx.run_id, |m| {
        m.commands.push(CommandEntry {
            command: cli.command.as_str().to_string(),
            parameters: params,
            started_at: started,
            finished_at: Some(Utc::now()),
        });
        m.finished_at = Some(Utc::now());
    })?;
    Ok(Outcome {
        run_id: ctx.run_id.clone(),
        run_dir: ctx.dir(),
        artifacts,
    })
}

/// Parses arguments, runs the command and returns the process exit status.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(out) => {
            log::info!("{} finished: {}", cli.command.as_str(), out.run_dir.display());
            println!("{}", out.run_dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[derive(Serialize)]
struct ValidationReport<'a> {
    violations: Vec<String>,
    stats: &'a crate::corpus::CorpusStats,
}

fn cmd_validate(ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    let violations = validate_corpus(&ctx.corpus);
    let stats = corpus_stats(&ctx.corpus);
    let path = ctx.artifact("validation.json");
    write_json(
        &path,
        &ValidationReport {
            violations: violations.iter().map(|v| v.to_string()).collect(),
            stats: &stats,
        },
    )?;
    if !violations.is_empty() {
        return Err(CliError::Data(format!(
            "{} corpus violations, see {}",
            violations.len(),
            path.display()
        )));
    }
    Ok(vec![path])
}

fn cmd_judge(ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    let mut all = Vec::new();
    let mut artifacts = Vec::new();
    for name in ctx.models()? {
        let p = ctx.provider(&name)?;
        let recs = run_word_judgments(&ctx.session(), p.as_ref(), &ctx.cfg.experiments.forms, ctx.replicates)?;
        let items = review_items(&recs);
        if !items.is_empty() {
            let path = ctx.artifact(&format!("review_{name}.csv"));
            write_review_csv(&items, csv_file(&path)?).map_err(io(&path))?;
            artifacts.push(path);
        }
        all.extend(recs);
    }
    let path = ctx.artifact("judgments.csv");
    let mut w = csv::Writer::from_writer(csv_file(&path)?);
    w.write_record(["model", "word_id", "form", "replicate", "verdict"]).map_err(io(&path))?;
    for r in &all {
        w.write_record([
            r.model.as_str(),
            &r.word_id,
            r.form.as_str(),
            &r.replicate.to_string(),
            r.verdict.kind.as_str(),
        ])
        .map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))?;
    artifacts.push(path);
    Ok(artifacts)
}

fn write_choices_csv(path: &Path, records: &[ChoiceRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(csv_file(path)?);
    w.write_record([
        "model",
        "scenario_id",
        "variant",
        "order",
        "replicate",
        "temperature",
        "option",
        "firmness",
        "parse_error",
    ])
    .map_err(io(path))?;
    for r in records {
        w.write_record([
            r.model.clone(),
            r.scenario_id.clone(),
            r.variant.to_string(),
            r.order.to_string(),
            r.replicate.to_string(),
            r.temperature.map(|t| t.to_string()).unwrap_or_default(),
            r.option.map(|o| o.to_string()).unwrap_or_default(),
            r.firmness.map(|f| f.to_string()).unwrap_or_default(),
            r.parse_error.clone().unwrap_or_default(),
        ])
        .map_err(io(path))?;
    }
    w.flush().map_err(io(path))
}

fn cmd_choose(ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    let mut all = Vec::new();
    let mut sweeps = Vec::new();
    for name in ctx.models()? {
        let p = ctx.provider(&name)?;
        all.extend(run_choices(&ctx.session(), p.as_ref(), &ctx.variants, &ctx.orders, ctx.replicates)?);
        if !ctx.temperatures.is_empty() {
            let groups = run_stability_sweep(
                &ctx.session(),
                p.as_ref(),
                &ctx.temperatures,
                ctx.cfg.experiments.sweep_replicates,
            )?;
            sweeps.extend(groups.into_iter().flat_map(|g| g.records));
        }
    }
    if let Some(path) = &ctx.cfg.human_survey {
        let file = fs::File::open(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let agg = aggregate_survey(&read_survey_csv(file)?, &ctx.corpus)?;
        if !agg.tied.is_empty() {
            log::warn!("{} survey scenarios tied and were dropped", agg.tied.len());
        }
        ctx.store.append_all(&ctx.run_id, &agg.records)?;
        all.extend(agg.records);
    }
    let path = ctx.artifact("choices.csv");
    write_choices_csv(&path, &all)?;
    let mut artifacts = vec![path];
    if !sweeps.is_empty() {
        let path = ctx.artifact("sweep_choices.csv");
        write_choices_csv(&path, &sweeps)?;
        artifacts.push(path);
    }
    Ok(artifacts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCell {
    pub model: String,
    pub variant: Variant,
    pub filter: PairFilter,
    pub scenarios_used: usize,
    pub excluded: Exclusions,
    pub raw_pairs: usize,
    pub pairs: Vec<ComparisonPair>,
    pub result: Option<RankingResult>,
    pub error: Option<String>,
    pub stages: Option<BTreeSet<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rankings {
    pub top_k: usize,
    pub cells: Vec<RankedCell>,
}

fn cmd_rank(ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    let records = load_records(ctx)?;
    if records.choices.is_empty() {
        return Err(CliError::Data("no choice records in this run; run `choose` first".into()));
    }
    // one record per (model, variant, scenario, order): lowest replicate
    let mut cells: BTreeMap<CellKey, BTreeMap<(String, OptionOrder), ChoiceRecord>> = BTreeMap::new();
    for r in records.choices {
        let key = CellKey {
            model: r.model.clone(),
            variant: r.variant,
        };
        let slot = cells.entry(key).or_default();
        let k = (r.scenario_id.clone(), r.order);
        match slot.get(&k) {
            Some(old) if old.replicate <= r.replicate => {}
            _ => {
                slot.insert(k, r);
            }
        }
    }
    let mut prepared = Vec::new();
    let mut meta = Vec::new();
    for (key, recs) in cells {
        let recs: Vec<ChoiceRecord> = recs.into_values().collect();
        // the human panel answered each scenario once, in original order
        let filter = PairFilter {
            min_firmness: ctx.min_firmness,
            require_order_stable: ctx.cfg.ranking.require_order_stable && key.model != HUMAN_PANEL,
        };
        let ex = extract_pairs(&recs, &ctx.corpus, &filter)?;
        let net = resolve_contradictions(&ex.pairs);
        meta.push((filter, ex.scenarios_used, ex.excluded, ex.pairs.len()));
        prepared.push((key, net));
    }
    let opts = IlsrOptions {
        exec: ctx.exec,
        ..IlsrOptions::default()
    };
    let ranked = rank_cells(&prepared, &opts);
    let k = ctx.cfg.ranking.top_k;
    let mut out = Rankings {
        top_k: k,
        cells: Vec::new(),
    };
    let mut artifacts = Vec::new();
    for (((key, result), (_, pairs)), (filter, used, excluded, raw)) in ranked.into_iter().zip(prepared).zip(meta) {
        let (result, error) = match result {
            Ok(r) => (Some(r), None),
            Err(e) => {
                log::warn!("{}/{}: {e}", key.model, key.variant);
                (None, Some(e.to_string()))
            }
        };
        let stages = result.as_ref().and_then(|r| infer_stages(r, &ctx.corpus, k).ok());
        if let Some(r) = &result {
            let path = ctx.artifact(&format!("weights_{}_{}.csv", key.model, key.variant));
            write_weights_csv(&weight_table(r, &ctx.corpus, k), csv_file(&path)?).map_err(io(&path))?;
            artifacts.push(path);
        }
        out.cells.push(RankedCell {
            model: key.model,
            variant: key.variant,
            filter,
            scenarios_used: used,
            excluded,
            raw_pairs: raw,
            pairs,
            result,
            error,
            stages,
        });
    }
    let path = ctx.artifact("rankings.json");
    write_json(&path, &out)?;
    artifacts.insert(0, path);
    Ok(artifacts)
}

fn cmd_debate(ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    let names: Vec<[String; 2]> = if ctx.cfg.debate.pairs.is_empty() {
        let models = ctx.models()?;
        let mut v = Vec::new();
        for e in &models {
            for o in &models {
                if e != o {
                    v.push([e.clone(), o.clone()]);
                }
            }
        }
        v
    } else {
        ctx.cfg.debate.pairs.clone()
    };
    if names.is_empty() {
        return Err(CliError::Config("debate needs at least two models".into()));
    }
    let mut cache: BTreeMap<String, Arc<dyn ChatProvider>> = BTreeMap::new();
    let mut get = |n: &str| -> Result<Arc<dyn ChatProvider>, CliError> {
        if let Some(p) = cache.get(n) {
            return Ok(p.clone());
        }
        let p = ctx.provider(n)?;
        cache.insert(n.to_string(), p.clone());
        Ok(p)
    };
    let mut pairs: Vec<ProviderPair> = Vec::new();
    for [e, o] in &names {
        pairs.push((get(e)?, get(o)?));
    }
    let variant = ctx
        .cfg
        .debate
        .variant
        .or_else(|| ctx.variants.first().copied())
        .unwrap_or(Variant::Default);
    let order = ctx.cfg.debate.order.unwrap_or_default();
    let batch = run_debate_batch(&ctx.session(), &ctx.corpus, &pairs, variant, order)?;
    if let Some(f) = batch.failures.iter().find(|f| f.kind == "provider") {
        return Err(CliError::Provider(f.message.clone()));
    }
    let jsonl = ctx.artifact("debates.jsonl");
    write_jsonl(&batch.transcripts, csv_file(&jsonl)?).map_err(io(&jsonl))?;
    let summary = ctx.artifact("debate_summary.csv");
    write_summary_csv(&batch.transcripts, csv_file(&summary)?).map_err(io(&summary))?;
    let failures = ctx.artifact("debate_failures.json");
    write_json(&failures, &batch.failures)?;
    Ok(vec![jsonl, summary, failures])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub immoral_proportion: Option<ImmoralProportion>,
    pub dq: Option<ConsistencyReport>,
    pub dl: Option<ConsistencyReport>,
    pub dg: Option<ConsistencyReport>,
    /// Shares of firmness 1, 2, 3 over default-variant, original-order choices.
    pub firmness: Option<[f64; 3]>,
    pub change_by_firmness: Option<[FirmnessChange; 3]>,
    pub temperature_consistency: Option<MatrixReport>,
    pub temperature_firmness_consistency: Option<MatrixReport>,
    pub replicate_consistency: Option<metrics::ReplicateConsistency>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub run_id: String,
    pub models: BTreeMap<String, ModelMetrics>,
    pub agreement: Option<MatrixReport>,
    /// Per variant, over every ranked model.
    pub srocc: BTreeMap<Variant, MatrixReport>,
    pub debate_change: Option<MatrixReport>,
}

fn temp_label(t: f64) -> String {
    format!("t={t}")
}

fn cmd_metrics(ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    let recs = load_records(ctx)?;
    let judgments = group_by_model(&recs.judgments, |j| j.model.as_str());
    let choices = group_by_model(&recs.choices, |r| r.model.as_str());
    let sweeps = group_by_model(&recs.sweeps, |r| r.model.as_str());
    let debates = group_by_model(&recs.debates, |t| t.evaluated.as_str());
    let names: BTreeSet<String> = judgments
        .keys()
        .chain(choices.keys())
        .chain(sweeps.keys())
        .chain(debates.keys())
        .cloned()
        .collect();
    if names.is_empty() {
        return Err(CliError::Data("no records in this run".into()));
    }
    let empty_j = Vec::new();
    let empty_c = Vec::new();
    let mut models = BTreeMap::new();
    for name in &names {
        let js = judgments.get(name).unwrap_or(&empty_j);
        let cs = choices.get(name).unwrap_or(&empty_c);
        let default_orig: Vec<ChoiceRecord> = cs
            .iter()
            .filter(|r| r.variant == Variant::Default && r.order == OptionOrder::Original)
            .cloned()
            .collect();
        let man: Vec<ChoiceRecord> = cs.iter().filter(|r| r.variant == Variant::Man).cloned().collect();
        let woman: Vec<ChoiceRecord> = cs.iter().filter(|r| r.variant == Variant::Woman).cloned().collect();
        let has_forms = |f| js.iter().any(|j| j.form == f);
        let (temp, temp_firm, reps) = match sweeps.get(name) {
            Some(sw) => {
                let mut by_t: BTreeMap<u64, Vec<ChoiceRecord>> = BTreeMap::new();
                for r in sw {
                    by_t.entry(r.temperature.unwrap_or(0.0).to_bits()).or_default().push(r.clone());
                }
                let mut groups: Vec<(f64, Vec<ChoiceRecord>)> =
                    by_t.into_iter().map(|(b, v)| (f64::from_bits(b), v)).collect();
                groups.sort_by(|a, b| a.0.total_cmp(&b.0));
                let labelled: Vec<(String, Vec<ChoiceRecord>)> =
                    groups.iter().map(|(t, v)| (temp_label(*t), v.clone())).collect();
                let pair = metrics::stability_consistency(&labelled).ok();
                let reps = groups.first().and_then(|(_, v)| metrics::replicate_consistency(v).ok());
                match pair {
                    Some((a, b)) => (Some(a), Some(b), reps),
                    None => (None, None, reps),
                }
            }
            None => (None, None, None),
        };
        let m = ModelMetrics {
            immoral_proportion: if has_forms(QuestionForm::Affirmative) {
                Some(metrics::immoral_proportion(js, &ctx.corpus)?)
            } else {
                None
            },
            dq: if has_forms(QuestionForm::Affirmative) && has_forms(QuestionForm::Negated) {
                Some(metrics::dq_consistency(js)?)
            } else {
                None
            },
            dl: if has_forms(QuestionForm::Affirmative) && !default_orig.is_empty() {
                Some(metrics::dl_consistency(js, &default_orig, &ctx.corpus)?)
            } else {
                None
            },
            dg: if !man.is_empty() && !woman.is_empty() {
                Some(metrics::dg_consistency(&man, &woman)?)
            } else {
                None
            },
            firmness: metrics::firmness_distribution(&default_orig).ok(),
            change_by_firmness: debates.get(name).map(|d| metrics::change_by_firmness(d)),
            temperature_consistency: temp,
            temperature_firmness_consistency: temp_firm,
            replicate_consistency: reps,
        };
        models.insert(name.clone(), m);
    }

    let raters: Vec<(String, Vec<ChoiceRecord>)> = choices
        .iter()
        .map(|(n, v)| (n.clone(), v.clone()))
        .filter(|(_, v)| {
            v.iter()
                .any(|r| r.variant == Variant::Default && r.order == OptionOrder::Original)
        })
        .collect();
    let agreement = if raters.is_empty() {
        None
    } else {
        Some(metrics::agreement_matrix(&raters)?)
    };

    let mut srocc = BTreeMap::new();
    let rankings_path = ctx.artifact("rankings.json");
    if rankings_path.exists() {
        let rankings: Rankings = read_json(&rankings_path)?;
        let mut by_variant: BTreeMap<Variant, Vec<(String, Vec<u32>)>> = BTreeMap::new();
        for c in rankings.cells {
            if let Some(r) = c.result {
                by_variant.entry(c.variant).or_default().push((c.model, r.rank));
            }
        }
        for (v, list) in by_variant {
            srocc.insert(v, metrics::srocc_matrix(&list)?);
        }
    } else {
        log::warn!("no rankings.json; skipping rank correlations");
    }

    let debate_change = if recs.debates.is_empty() {
        None
    } else {
        Some(metrics::debate_change_matrix(&recs.debates)?)
    };

    let summary = MetricsSummary {
        run_id: ctx.run_id.clone(),
        models,
        agreement,
        srocc,
        debate_change,
    };
    write_metric_files(ctx, &summary)
}

fn rate_cells(r: &Option<ConsistencyReport>) -> [String; 4] {
    match r {
        Some(r) => [
            r.rate.map(fmt_num).unwrap_or_default(),
            r.numerator.to_string(),
            r.denominator.to_string(),
            r.excluded.to_string(),
        ],
        None => Default::default(),
    }
}

fn write_metric_files(ctx: &Context, s: &MetricsSummary) -> Result<Vec<PathBuf>, CliError> {
    let id = &ctx.run_id;
    let mut out = Vec::new();
    let json = ctx.artifact(&format!("{id}_metrics.json"));
    write_json(&json, s)?;
    out.push(json);

    let mut matrix = |name: String, m: &MatrixReport| -> Result<(), CliError> {
        let path = ctx.artifact(&format!("{id}_{name}.csv"));
        m.write_csv(csv_file(&path)?).map_err(io(&path))?;
        out.push(path);
        Ok(())
    };
    if let Some(m) = &s.agreement {
        matrix(m.kind.as_str().to_string(), m)?;
    }
    for (v, m) in &s.srocc {
        matrix(format!("srocc_{v}"), m)?;
    }
    if let Some(m) = &s.debate_change {
        matrix(m.kind.as_str().to_string(), m)?;
    }
    for (name, mm) in &s.models {
        for m in [&mm.temperature_consistency, &mm.temperature_firmness_consistency]
            .into_iter()
            .flatten()
        {
            matrix(format!("{}_{name}", m.kind.as_str()), m)?;
        }
    }

    let path = ctx.artifact(&format!("{id}_consistency.csv"));
    let mut w = csv::Writer::from_writer(csv_file(&path)?);
    let mut header = vec!["model".to_string()];
    for k in ["dq", "dl", "dg"] {
        for f in ["rate", "numerator", "denominator", "excluded"] {
            header.push(format!("{k}_{f}"));
        }
    }
    w.write_record(&header).map_err(io(&path))?;
    for (name, m) in &s.models {
        let mut row = vec![name.clone()];
        for r in [&m.dq, &m.dl, &m.dg] {
            row.extend(rate_cells(r));
        }
        w.write_record(&row).map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))?;
    out.push(path);

    let path = ctx.artifact(&format!("{id}_immoral_proportion.csv"));
    let mut w = csv::Writer::from_writer(csv_file(&path)?);
    let cats = crate::corpus::WordCategory::ALL;
    let mut header = vec!["model".to_string()];
    header.extend(cats.iter().map(|c| c.as_str().to_string()));
    header.push("overall".into());
    w.write_record(&header).map_err(io(&path))?;
    for (name, m) in &s.models {
        if let Some(p) = &m.immoral_proportion {
            let mut row = vec![name.clone()];
            for c in cats {
                row.push(p.per_category.get(&c).and_then(|r| r.rate).map(fmt_num).unwrap_or_default());
            }
            row.push(p.overall.rate.map(fmt_num).unwrap_or_default());
            w.write_record(&row).map_err(io(&path))?;
        }
    }
    w.flush().map_err(io(&path))?;
    out.push(path);

    let path = ctx.artifact(&format!("{id}_firmness.csv"));
    let mut w = csv::Writer::from_writer(csv_file(&path)?);
    w.write_record(["model", "score_1", "score_2", "score_3"]).map_err(io(&path))?;
    for (name, m) in &s.models {
        if let Some(f) = m.firmness {
            w.write_record([name.clone(), fmt_num(f[0]), fmt_num(f[1]), fmt_num(f[2])])
                .map_err(io(&path))?;
        }
    }
    w.flush().map_err(io(&path))?;
    out.push(path);

    let path = ctx.artifact(&format!("{id}_change_by_firmness.csv"));
    let mut w = csv::Writer::from_writer(csv_file(&path)?);
    w.write_record(["model", "score_1", "score_2", "score_3"]).map_err(io(&path))?;
    for (name, m) in &s.models {
        if let Some(c) = &m.change_by_firmness {
            let cell = |x: &FirmnessChange| x.rate.map(fmt_num).unwrap_or_default();
            w.write_record([name.clone(), cell(&c[0]), cell(&c[1]), cell(&c[2])])
                .map_err(io(&path))?;
        }
    }
    w.flush().map_err(io(&path))?;
    out.push(path);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub model: String,
    pub variant: Variant,
    pub ranked: usize,
    pub unranked: usize,
    pub iterations: u32,
    pub converged: bool,
    pub stages: Option<BTreeSet<u8>>,
    pub top: Vec<crate::rank::WeightRow>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run_id: String,
    pub corpus_digest: String,
    pub metrics: MetricsSummary,
    pub rankings: Vec<ReportCell>,
}

fn cmd_report(ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    let id = &ctx.run_id;
    let metrics: MetricsSummary = read_json(&ctx.artifact(&format!("{id}_metrics.json")))?;
    let rankings: Rankings = read_json(&ctx.artifact("rankings.json"))?;
    let mut out = Vec::new();
    let mut cells = Vec::new();
    for c in &rankings.cells {
        let rows = c
            .result
            .as_ref()
            .map(|r| weight_table(r, &ctx.corpus, rankings.top_k))
            .unwrap_or_default();
        if c.result.is_some() {
            let path = ctx.artifact(&format!("{id}_weights_{}_{}.csv", c.model, c.variant));
            write_weights_csv(&rows, csv_file(&path)?).map_err(io(&path))?;
            out.push(path);
        }
        cells.push(ReportCell {
            model: c.model.clone(),
            variant: c.variant,
            ranked: c.result.as_ref().map_or(0, |r| r.rank.len()),
            unranked: c.result.as_ref().map_or(0, |r| r.unranked.len()),
            iterations: c.result.as_ref().map_or(0, |r| r.iterations),
            converged: c.result.as_ref().is_some_and(|r| r.converged),
            stages: c.stages.clone(),
            top: rows,
            error: c.error.clone(),
        });
    }
    let report = Report {
        run_id: id.clone(),
        corpus_digest: ctx.corpus.digest(),
        metrics,
        rankings: cells,
    };
    let path = ctx.artifact("report.json");
    write_json(&path, &report)?;
    out.insert(0, path);
    Ok(out)
}
