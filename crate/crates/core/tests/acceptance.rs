//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::Parser;
use moral_harness::cli::{self, Cli, MetricsSummary};
use moral_harness::corpus::OptionLabel::{self, A, B};
use moral_harness::debate::{run_debate_batch, ProviderPair};
use moral_harness::elicitation::{run_choices, run_stability_sweep, run_word_judgments, ChoiceRecord, Session};
use moral_harness::exec::Execution;
use moral_harness::gateway::{ChatProvider, Counting, MockProvider};
use moral_harness::metrics::{self, MatrixReport};
use moral_harness::parsing::{parse_choice, ChoiceParseError, Lexicon};
use moral_harness::prompts::{Language, OptionOrder, PromptBundle, QuestionForm};
use moral_harness::rank::{extract_pairs, ilsr, resolve_contradictions, ComparisonPair, PairFilter};
use moral_harness::runstore::{RunManifest, RunStore};
use moral_harness::Variant;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !bool::from($cond) {
            return Err(format!($($msg)+));
        }
    };
}

fn max_diff(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn pairs_from(counts: &BTreeMap<(u32, u32), u64>) -> Vec<ComparisonPair> {
    counts
        .iter()
        .map(|(&(w, l), &c)| ComparisonPair::new(w + 1, l + 1, c))
        .collect()
}

fn c1_ilsr_mle() -> Check {
    let (mut worst, mut slowest) = (0.0f64, Duration::ZERO);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let truth: Vec<f64> = (0..5).map(|_| rng.random_range(0.2..5.0)).collect();
        let counts = common::sample_bt(&mut rng, &truth, 200);
        let t = Instant::now();
        let r = ilsr(&pairs_from(&counts)).map_err(|e| format!("seed {seed}: {e}"))?;
        slowest = slowest.max(t.elapsed());
        ensure!(r.rank.len() == 5 && r.converged, "seed {seed}: ranked {} converged {}", r.rank.len(), r.converged);
        let mle = common::bt_mle(5, &counts);
        worst = worst.max(max_diff((1..=5).map(|id| r.strengths[&id]), mle));
    }
    ensure!(worst <= 1e-4, "max-norm gap {worst:.3e}");
    ensure!(slowest < Duration::from_secs(1), "slowest instance {slowest:?}");
    Ok(format!("max-norm gap {worst:.2e}, slowest {slowest:.2?}"))
}

fn c2_recovery() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let truth: Vec<f64> = (0..20).map(|i| 100f64.powf(i as f64 / 19.0)).collect();
    let counts = common::sample_bt(&mut rng, &truth, 5000);
    let t = Instant::now();
    let r = ilsr(&pairs_from(&counts)).map_err(|e| e.to_string())?;
    let took = t.elapsed();
    ensure!(r.rank.len() == 20, "only {} items ranked", r.rank.len());
    let est: Vec<f64> = (1..=20).map(|id| r.strengths[&id]).collect();
    let tau = metrics::kendall_tau(&est, &truth).map_err(|e| e.to_string())?;
    ensure!(tau >= 0.9, "kendall tau {tau:.4}");
    ensure!(took < Duration::from_secs(5), "took {took:?}");
    Ok(format!("kendall tau {tau:.4}, {took:.2?}"))
}

/// Random strongly connected instance: a Hamiltonian cycle plus random
/// distinct pairs, oriented by random Bradley-Terry strengths.
fn envelope_instance(seed: u64, n: u32, pairs: usize) -> Vec<ComparisonPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0f64..2.0).exp()).collect();
    let mut order: Vec<u32> = (1..=n).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for i in 0..order.len() {
        let (w, l) = (order[(i + 1) % order.len()], order[i]);
        seen.insert((w.min(l), w.max(l)));
        out.push(ComparisonPair::new(w, l, rng.random_range(1..=5)));
    }
    while out.len() < pairs {
        let a = rng.random_range(1..=n);
        let b = rng.random_range(1..=n);
        if a == b || !seen.insert((a.min(b), a.max(b))) {
            continue;
        }
        let p = s[a as usize - 1] / (s[a as usize - 1] + s[b as usize - 1]);
        let (w, l) = if rng.random::<f64>() < p { (a, b) } else { (b, a) };
        out.push(ComparisonPair::new(w, l, rng.random_range(1..=5)));
    }
    out
}

fn c3_envelope() -> Check {
    let (mut converged, mut max_iter) = (0, 0);
    for seed in 0..100u64 {
        let r = ilsr(&envelope_instance(3000 + seed, 184, 2000)).map_err(|e| format!("seed {seed} errored: {e}"))?;
        ensure!(r.rank.len() == 184, "seed {seed}: {} ranked", r.rank.len());
        ensure!(r.iterations <= 150, "seed {seed}: {} iterations", r.iterations);
        ensure!(r.converged || r.iterations == 150, "seed {seed}: stopped early unconverged");
        converged += usize::from(r.converged);
        max_iter = max_iter.max(r.iterations);
    }
    ensure!(converged >= 95, "{converged}/100 converged");
    Ok(format!("{converged}/100 converged, max {max_iter} iterations"))
}

fn c4_symmetry() -> Check {
    let two = ilsr(&[ComparisonPair::new(1, 2, 7), ComparisonPair::new(2, 1, 7)]).map_err(|e| e.to_string())?;
    let cycle = ilsr(&[
        ComparisonPair::new(1, 2, 1),
        ComparisonPair::new(2, 3, 1),
        ComparisonPair::new(3, 1, 1),
    ])
    .map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (r, n) in [(&two, 2.0), (&cycle, 3.0)] {
        worst = worst.max(max_diff(r.strengths.values().copied(), std::iter::repeat(1.0 / n)));
        worst = worst.max(max_diff(r.weights.values().copied(), std::iter::repeat(0.0)));
    }
    ensure!(two.strengths.len() == 2 && cycle.strengths.len() == 3, "wrong item count");
    ensure!(worst <= 1e-10, "deviation {worst:.3e}");
    Ok(format!("max deviation {worst:.1e}"))
}

fn answer(canon: OptionLabel, order: OptionOrder, firmness: u8) -> String {
    format!(
        "I choose Option {}: My firmness score is {firmness} points; My reason is scripted.",
        canon.through(order)
    )
}

fn c5_pairs() -> Check {
    let c = common::corpus(
        6,
        &[
            ("t1", vec![1], vec![2], B),
            ("t2", vec![2], vec![1, 5], B),
            ("t3", vec![3], vec![4, 5], A),
            ("t4", vec![3], vec![6], B),
            ("t5", vec![4], vec![6], B),
            ("t6", vec![6], vec![2], A),
        ],
    );
    let rec = |sid: &str, order, rep, raw: String| {
        ChoiceRecord::from_answer("m", sid, Variant::Default, order, rep, None, raw)
    };
    let filter = PairFilter::default();
    let mut pooled = Vec::new();
    for rep in 1..=5u32 {
        let mut records = Vec::new();
        for order in [OptionOrder::Original, OptionOrder::Swapped] {
            records.push(rec("t1", order, rep, answer(A, order, 3)));
            // firmness 2 in the first two replicates, 1 afterwards
            records.push(rec("t2", order, rep, answer(A, order, if rep <= 2 { 2 } else { 1 })));
            records.push(rec("t3", order, rep, answer(B, order, 2)));
            let flip = if order == OptionOrder::Original { A } else { B };
            records.push(rec("t4", order, rep, answer(flip, order, 3)));
            records.push(rec("t5", order, rep, answer(A, order, 3)));
            let raw = if order == OptionOrder::Original {
                "I cannot pick one.".to_string()
            } else {
                answer(A, order, 3)
            };
            records.push(rec("t6", order, rep, raw));
        }
        let ex = extract_pairs(&records, &c, &filter).map_err(|e| e.to_string())?;
        let mut got = ex.pairs.clone();
        got.sort();
        let mut want = vec![(1, 2), (4, 3), (4, 6), (5, 3)];
        if rep <= 2 {
            want.extend([(2, 1), (2, 5)]);
        }
        want.sort();
        ensure!(got == want, "replicate {rep}: pairs {got:?}, expected {want:?}");
        let e = &ex.excluded;
        let low = if rep <= 2 { 0 } else { 1 };
        ensure!(
            e.parse_error == 1 && e.order_unstable == 1 && e.low_firmness == low && e.missing_order == 0,
            "replicate {rep}: exclusions {e:?}"
        );
        pooled.extend(ex.pairs);
    }
    let net = resolve_contradictions(&pooled);
    let want = vec![
        ComparisonPair::new(1, 2, 3),
        ComparisonPair::new(2, 5, 2),
        ComparisonPair::new(4, 3, 5),
        ComparisonPair::new(4, 6, 5),
        ComparisonPair::new(5, 3, 5),
    ];
    ensure!(net == want, "net pairs {net:?}");
    Ok(format!("{} raw pairs over 5 replicates, net (1>2) = 3", pooled.len()))
}

fn c6_srocc() -> Check {
    for n in 2..=10u32 {
        let id: Vec<u32> = (1..=n).collect();
        let rev: Vec<u32> = id.iter().rev().copied().collect();
        let same = metrics::srocc(&id, &id).map_err(|e| e.to_string())?;
        let opposite = metrics::srocc(&id, &rev).map_err(|e| e.to_string())?;
        ensure!(same == 1.0 && opposite == -1.0, "n={n}: {same} / {opposite}");
    }
    let worked = metrics::srocc(&[1, 2, 3, 4, 5], &[2, 1, 3, 5, 4]).map_err(|e| e.to_string())?;
    ensure!((worked - 0.8).abs() < 1e-12, "worked example gave {worked}");
    let perms = common::permutations(4);
    let mut worst = 0.0f64;
    for a in &perms {
        for b in &perms {
            let got = metrics::srocc(a, b).map_err(|e| e.to_string())?;
            worst = worst.max((got - common::spearman_pearson(a, b)).abs());
        }
    }
    ensure!(worst < 1e-12, "brute-force gap {worst:.3e}");
    Ok(format!("exact at n=2..10, 0.8 worked example, {} permutation pairs", perms.len().pow(2)))
}

fn fullwidth(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_digit() {
                char::from_u32(c as u32 + 0xFEE0).unwrap()
            } else {
                c
            }
        })
        .collect()
}

fn surface(variant: usize, x: OptionLabel, f: u8) -> String {
    let lower = x.as_str().to_lowercase();
    match variant {
        0 => format!("I choose Option {x}: My firmness score is {f} points; My reason is clarity."),
        1 => format!("I choose Option {x}. My firmness score is {f} points. My reason is clarity."),
        2 => format!("i choose option {lower}, my firmness score is {f} points, my reason is clarity."),
        3 => format!(
            "I choose Option {x}. My firmness score is {} points. My reason is clarity.",
            fullwidth(&f.to_string())
        ),
        4 => format!(
            "I choose Option {}\u{FF1A}My firmness score is {}\u{FF1B}My reason is clarity.",
            char::from_u32(x.as_str().chars().next().unwrap() as u32 + 0xFEE0).unwrap(),
            fullwidth(&f.to_string())
        ),
        5 => format!("I choose **Option {x}**. My firmness score is **{f}** points. My reason is clarity."),
        6 => format!("I choose Option {x}.\n\n  My firmness score is {f} points.\nMy reason is clarity."),
        7 => format!("I would choose Option {x}. My firmness score: {f}. Reason: clarity."),
        8 => format!("Answer: I choose Option {x} - My firmness score is {f}/3 - My reason is clarity."),
        _ => format!("I choose Option {x}; my firmness level is {f} out of 3; my reason for supporting {x} is clarity."),
    }
}

fn c7_parser() -> Check {
    let mut n = 0;
    for canon in [A, B] {
        for f in 1..=3u8 {
            for order in [OptionOrder::Original, OptionOrder::Swapped] {
                for v in 0..10 {
                    let text = surface(v, canon.through(order), f);
                    let p = parse_choice(&text, order).map_err(|e| format!("{text:?}: {e}"))?;
                    ensure!(p.option == canon && p.firmness == f, "{text:?} under {order} gave {p:?}");
                    ensure!(p.reason.starts_with("clarity"), "{text:?}: reason {:?}", p.reason);
                    n += 1;
                }
            }
        }
    }
    use ChoiceParseError::*;
    let bad: [(&str, ChoiceParseError); 10] = [
        ("I cannot decide.", NoOption),
        ("", NoOption),
        ("I choose Option C. My firmness score is 2 points.", NoOption),
        ("If I choose Option A, people suffer. My firmness score is 2 points.", NoOption),
        ("I choose Option A. My reason is simple.", NoFirmness),
        ("I choose Option B. My firmness score is high.", NoFirmness),
        ("I choose both Option A and Option B. My firmness score is 2 points.", BothOptions),
        ("I choose Option A. On reflection I choose Option B. My firmness score is 3 points.", BothOptions),
        ("I choose Option B. My firmness score is 5 points.", FirmnessOutOfRange(5)),
        ("I choose Option A. My firmness score is \u{FF10} points.", FirmnessOutOfRange(0)),
    ];
    for (text, want) in bad {
        match parse_choice(text, OptionOrder::Original) {
            Err(e) if e == want => {}
            other => return Err(format!("{text:?}: expected {want:?}, got {other:?}")),
        }
    }
    Ok(format!("{n} answers round-trip, 10 malformed rejected"))
}

fn session<'a>(
    corpus: &'a moral_harness::Corpus,
    prompts: &'a PromptBundle,
    lexicon: &'a Lexicon,
    store: &'a RunStore,
) -> Session<'a> {
    Session {
        corpus,
        prompts,
        lexicon,
        store,
        run_id: "accept",
        exec: Execution::default(),
    }
}

fn c8_debate() -> Check {
    let corpus = common::e2e_corpus();
    let prompts = PromptBundle::builtin(Language::En);
    let lexicon = Lexicon::builtin(Language::En);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = RunStore::open(dir.path()).map_err(|e| e.to_string())?;
    store
        .create_run(&RunManifest::new("accept", &corpus.digest(), vec![]))
        .map_err(|e| e.to_string())?;
    let s = session(&corpus, &prompts, &lexicon, &store);
    let fin = "Opponent's Final Rebuttal";
    let r2e = "In the current debate, here is your opponent's latest rebuttal";
    let r1o = "Opponent's Choice and Reasoning";
    let r2o = "Here is your opponent's latest rebuttal";
    let ev = common::mock(
        "ev",
        &[
            (&format!("S01 default context.*{fin}"), "I choose Option B. My firmness level is 3 out of 3. My reason for supporting B is the rebuttal."),
            (&format!("S02 default context.*{fin}"), "I choose Option A. My firmness level is 3 out of 3. My reason for supporting A is unchanged."),
            (&format!("S03 default context.*{fin}"), "I would rather not say."),
            (&format!("S04 default context.*{fin}"), "I choose Option A. My firmness level is 1 out of 3. My reason is none."),
            (&format!("S01 default context.*{r2e}"), "Evaluated second round on S01."),
            (&format!("S02 default context.*{r2e}"), "Evaluated second round on S02."),
            (&format!("S03 default context.*{r2e}"), "Evaluated second round on S03."),
            ("S01 default context", "I choose Option A. My firmness score is 2 points. My reason is first."),
            ("S02 default context", "I choose Option A. My firmness score is 3 points. My reason is second."),
            ("S03 default context", "I choose Option B. My firmness score is 1 points. My reason is third."),
            ("S04 default context", "I choose Option A. My firmness score is 2 points. My reason is fourth."),
        ],
    );
    let op = common::mock(
        "op",
        &[
            (&format!("S01 default context.*{r1o}.*{r2o}"), "Opponent second round on S01: the other side stands."),
            (&format!("S02 default context.*{r1o}.*{r2o}"), "Opponent second round on S02: the other side stands."),
            (&format!("S03 default context.*{r1o}.*{r2o}"), "Opponent second round on S03: the other side stands."),
            (&format!("S02 default context.*{r1o}.*Reminder: your opponent chose"), "I choose Option B, the other side."),
            (&format!("S02 default context.*{r1o}"), "I choose Option A as well."),
            (&format!("S04 default context.*{r1o}"), "I choose Option A, same as you."),
            (&format!("S01 default context.*{r1o}"), "I choose Option B instead."),
            (&format!("S03 default context.*{r1o}"), "I choose Option A instead."),
        ],
    );
    let ev: Arc<dyn ChatProvider> = Arc::new(ev);
    let op: Arc<dyn ChatProvider> = Arc::new(op);
    let sub = moral_harness::corpus::CorpusDocument {
        scenarios: corpus.scenarios()[..4].to_vec(),
        ..corpus.document().clone()
    };
    let sub = moral_harness::Corpus::from_document(sub).map_err(|e| e.to_string())?;
    let pairs: Vec<ProviderPair> = vec![(ev, op)];
    let batch = run_debate_batch(&s, &sub, &pairs, Variant::Default, OptionOrder::Original).map_err(|e| e.to_string())?;
    ensure!(batch.transcripts.len() == 3, "{} transcripts", batch.transcripts.len());
    ensure!(
        batch.failures.len() == 1 && batch.failures[0].scenario_id == "s04" && batch.failures[0].kind == "protocol_violation",
        "failures {:?}",
        batch.failures
    );
    use moral_harness::debate::Speaker::{Evaluated as E, Opponent as O};
    for t in &batch.transcripts {
        let speakers: Vec<_> = t.turns.iter().map(|x| x.speaker).collect();
        ensure!(speakers == [E, O, E, O, E], "{}: speakers {speakers:?}", t.scenario_id);
        for k in 1..t.turns.len() {
            ensure!(
                t.turns[k].prompt.contains(&t.turns[k - 1].response),
                "{}: turn {k} prompt lacks the previous response",
                t.scenario_id
            );
        }
    }
    let by: BTreeMap<&str, _> = batch.transcripts.iter().map(|t| (t.scenario_id.as_str(), t)).collect();
    ensure!(by["s01"].initial.option == A, "s01 initial {:?}", by["s01"].initial);
    ensure!(by["s01"].final_choice.as_ref().map(|p| p.option) == Some(B), "s01 final");
    ensure!(by["s01"].changed == Some(true), "s01 changed {:?}", by["s01"].changed);
    ensure!(by["s02"].changed == Some(false), "s02 changed {:?}", by["s02"].changed);
    ensure!(by["s03"].changed.is_none(), "s03 changed {:?}", by["s03"].changed);
    ensure!(by["s02"].turns[1].retried && !by["s01"].turns[1].retried, "retry flags");
    Ok("3 transcripts x 5 turns, flip A->B changed, 1 protocol violation".into())
}

const COMMANDS: [&str; 7] = ["validate", "judge-words", "choose", "rank", "debate", "metrics", "report"];

fn pipeline(out: &Path) -> Result<String, String> {
    let config = common::fixture_dir().join("run.toml");
    let mut run_id = String::new();
    for cmd in COMMANDS {
        let args = ["moral-harness", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), cmd];
        let parsed = Cli::try_parse_from(args).map_err(|e| e.to_string())?;
        let o = cli::run(&parsed).map_err(|e| format!("{cmd}: {e} (exit {})", e.exit_code()))?;
        run_id = o.run_id;
    }
    Ok(run_id)
}

fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            let name = p.file_name().unwrap().to_string_lossy();
            name != "manifest.json" && (name.ends_with(".csv") || name.ends_with(".json") || name.ends_with(".jsonl"))
        })
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn rate(m: &MetricsSummary, model: &str, kind: &str) -> Option<(usize, usize, usize)> {
    let mm = &m.models[model];
    let r = match kind {
        "dq" => mm.dq.as_ref(),
        "dl" => mm.dl.as_ref(),
        _ => mm.dg.as_ref(),
    }?;
    Some((r.numerator, r.denominator, r.excluded))
}

fn cell(m: &MatrixReport, a: &str, b: &str) -> f64 {
    m.cell(a, b).unwrap_or(f64::NAN)
}

fn c9_end_to_end() -> Check {
    let t = Instant::now();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let id = pipeline(d1.path())?;
    let id2 = pipeline(d2.path())?;
    let took = t.elapsed();
    ensure!(id == id2, "run ids differ: {id} vs {id2}");
    let (a, b) = (artifacts(&d1.path().join(&id)), artifacts(&d2.path().join(&id)));
    ensure!(a.keys().eq(b.keys()), "artifact sets differ");
    for (name, bytes) in &a {
        ensure!(&b[name] == bytes, "{name} differs between runs");
    }
    ensure!(a.contains_key("report.json"), "no report.json");
    let m: MetricsSummary = serde_json::from_slice(&a[&format!("{id}_metrics.json")]).map_err(|e| e.to_string())?;

    // scripted answers, counted by hand (numerator, denominator, excluded)
    let truth = [
        ("alpha", "dq", (4, 5, 1)),
        ("alpha", "dl", (6, 10, 2)),
        ("alpha", "dg", (9, 11, 1)),
        ("beta", "dq", (4, 5, 1)),
        ("beta", "dl", (4, 9, 3)),
        ("beta", "dg", (8, 11, 1)),
    ];
    for (model, kind, want) in truth {
        let got = rate(&m, model, kind);
        ensure!(got == Some(want), "{model} {kind}: {got:?}, expected {want:?}");
    }
    let ag = m.agreement.as_ref().ok_or("no agreement matrix")?;
    for (x, y, want) in [
        ("alpha", "beta", 6.0 / 11.0),
        ("alpha", "human-panel", 8.0 / 11.0),
        ("beta", "human-panel", 6.0 / 10.0),
        ("alpha", "alpha", 1.0),
        ("beta", "beta", 1.0),
        ("human-panel", "human-panel", 1.0),
    ] {
        let got = cell(ag, x, y);
        ensure!((got - want).abs() < 1e-12 && cell(ag, y, x) == got, "agreement {x}/{y}: {got}");
    }
    let firm = [
        ("alpha", [2.0 / 12.0, 6.0 / 12.0, 4.0 / 12.0]),
        ("beta", [2.0 / 11.0, 1.0 / 11.0, 8.0 / 11.0]),
        ("human-panel", [0.0, 1.0, 0.0]),
    ];
    for (model, want) in firm {
        let got = m.models[model].firmness.ok_or(format!("{model}: no firmness"))?;
        ensure!(max_diff(got, want) < 1e-12, "{model} firmness {got:?}");
    }
    ensure!(took < Duration::from_secs(30), "two runs took {took:?}");
    Ok(format!("{} artifacts identical across runs, ground truth matched, {took:.2?}", a.len()))
}

fn c10_replay() -> Check {
    let corpus = common::e2e_corpus();
    let prompts = PromptBundle::builtin(Language::En);
    let lexicon = Lexicon::builtin(Language::En);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let load = |name: &str| {
        let mut cfg = moral_harness::ProviderConfig::mock(name, name, 0.7);
        cfg.fixture = Some(common::fixture_dir().join(format!("mock_{name}.json")));
        Arc::new(Counting::new(MockProvider::from_config(cfg).unwrap()))
    };
    let mut snapshots = Vec::new();
    let mut calls = Vec::new();
    for pass in 0..2 {
        // a fresh store handle each pass, as after a restart
        let store = RunStore::open(dir.path()).map_err(|e| e.to_string())?;
        store
            .ensure_run(RunManifest::new("accept", &corpus.digest(), vec![]))
            .map_err(|e| e.to_string())?;
        let s = session(&corpus, &prompts, &lexicon, &store);
        let (alpha, beta) = (load("alpha"), load("beta"));
        let forms = [QuestionForm::Affirmative, QuestionForm::Negated];
        let judgments = run_word_judgments(&s, alpha.as_ref(), &forms, 2).map_err(|e| e.to_string())?;
        let choices = run_choices(&s, alpha.as_ref(), &Variant::ALL, &[OptionOrder::Original, OptionOrder::Swapped], 1)
            .map_err(|e| e.to_string())?;
        let sweep = run_stability_sweep(&s, beta.as_ref(), &[0.0, 0.5, 1.0], 3).map_err(|e| e.to_string())?;
        let pairs: Vec<ProviderPair> = vec![(alpha.clone(), beta.clone()), (beta.clone(), alpha.clone())];
        let debates = run_debate_batch(&s, &corpus, &pairs, Variant::Default, OptionOrder::Original)
            .map_err(|e| e.to_string())?;
        snapshots.push(serde_json::to_string(&(judgments, choices, sweep, debates)).unwrap());
        calls.push(alpha.calls() + beta.calls());
        if pass == 0 {
            ensure!(calls[0] > 0, "cold pass made no calls");
        }
    }
    ensure!(calls[1] == 0, "warm pass made {} provider calls", calls[1]);
    ensure!(snapshots[0] == snapshots[1], "warm pass records differ");
    Ok(format!("cold {} calls, warm 0, records identical", calls[0]))
}

fn arb_choice(models: &'static [&'static str]) -> impl Strategy<Value = ChoiceRecord> {
    (
        0..models.len(),
        1..=8usize,
        prop_oneof![Just(Variant::Default), Just(Variant::Man), Just(Variant::Woman)],
        prop_oneof![Just(OptionOrder::Original), Just(OptionOrder::Swapped)],
        1..=2u32,
        proptest::option::weighted(0.85, (prop_oneof![Just(A), Just(B)], 1..=3u8)),
    )
        .prop_map(move |(m, s, variant, order, replicate, parsed)| {
            let raw = match parsed {
                Some((o, f)) => answer(o, order, f),
                None => "unclear".to_string(),
            };
            ChoiceRecord::from_answer(models[m], &format!("q{s}"), variant, order, replicate, Some(0.5), raw)
        })
}

fn in_unit(x: Option<f64>) -> bool {
    x.is_none_or(|v| (0.0..=1.0).contains(&v))
}

fn square_ok(m: &MatrixReport, diag_one: bool, lo: f64) -> bool {
    let n = m.rows.len();
    (0..n).all(|i| {
        (0..n).all(|j| {
            let (x, y) = (m.cells[i][j], m.cells[j][i]);
            x == y && x.is_none_or(|v| (lo..=1.0).contains(&v))
        }) && (!diag_one || m.cells[i][i].is_none_or(|v| v == 1.0))
    })
}

fn shuffled<T: Clone>(v: &[T], seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = v.to_vec();
    for i in (1..out.len()).rev() {
        out.swap(i, rng.random_range(0..=i));
    }
    out
}

fn c11_invariants() -> Check {
    static MODELS: [&str; 3] = ["m1", "m2", "m3"];
    let ids: Vec<String> = (1..=8).map(|i| format!("q{i}")).collect();
    let corpus = common::corpus(
        4,
        &ids.iter().map(|id| (id.as_str(), vec![1], vec![2], A)).collect::<Vec<_>>(),
    );
    let lexicon = Lexicon::builtin(Language::En);
    let strategy = (
        proptest::collection::vec(arb_choice(&MODELS), 0..60),
        proptest::collection::vec((0..4usize, 0..2usize, 1..=2u32, 0..5usize), 0..24),
        proptest::collection::vec(proptest::sample::subsequence((1..=6u32).collect::<Vec<_>>(), 2..=6).prop_shuffle(), 2..4),
        any::<u64>(),
    );
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    let verdicts = ["moral", "immoral", "depends on the case", "as an ai", "???"];
    let result = runner.run(&strategy, |(choices, judg, rankings, seed)| {
        let fail = |m: &str| TestCaseError::fail(m.to_string());
        let judgments: Vec<_> = judg
            .iter()
            .map(|&(w, f, rep, v)| {
                let form = if f == 0 { QuestionForm::Affirmative } else { QuestionForm::Negated };
                let raw = format!("It is {}.", verdicts[v]);
                moral_harness::elicitation::JudgmentRecord {
                    model: "m1".into(),
                    word_id: format!("w{w}"),
                    form,
                    verdict: moral_harness::parsing::parse_judgment(&raw, &lexicon),
                    raw,
                    replicate: rep,
                    reviewed: false,
                }
            })
            .collect();
        let m1: Vec<ChoiceRecord> = choices.iter().filter(|r| r.model == "m1").cloned().collect();
        let man: Vec<ChoiceRecord> = m1.iter().filter(|r| r.variant == Variant::Man).cloned().collect();
        let woman: Vec<ChoiceRecord> = m1.iter().filter(|r| r.variant == Variant::Woman).cloned().collect();
        let raters = |cs: &[ChoiceRecord]| -> Vec<(String, Vec<ChoiceRecord>)> {
            MODELS
                .iter()
                .map(|m| (m.to_string(), cs.iter().filter(|r| r.model == *m).cloned().collect()))
                .collect()
        };
        let named: Vec<(String, Vec<u32>)> =
            rankings.iter().enumerate().map(|(i, r)| (format!("r{i}"), r.clone())).collect();

        let compute = |j: &[moral_harness::elicitation::JudgmentRecord], c: &[ChoiceRecord]| {
            let c1: Vec<ChoiceRecord> = c.iter().filter(|r| r.model == "m1").cloned().collect();
            let cm: Vec<ChoiceRecord> = c1.iter().filter(|r| r.variant == Variant::Man).cloned().collect();
            let cw: Vec<ChoiceRecord> = c1.iter().filter(|r| r.variant == Variant::Woman).cloned().collect();
            let groups: Vec<(String, Vec<ChoiceRecord>)> =
                vec![("a".into(), c1.clone()), ("b".into(), c1.iter().rev().cloned().collect())];
            serde_json::to_string(&(
                metrics::immoral_proportion(j, &corpus).ok(),
                metrics::dq_consistency(j).ok(),
                metrics::dl_consistency(j, &c1, &corpus).ok(),
                metrics::dg_consistency(&cm, &cw).ok(),
                metrics::agreement_matrix(&raters(c)).ok(),
                metrics::firmness_distribution(&c1).ok(),
                metrics::stability_consistency(&groups).ok(),
                metrics::replicate_consistency(&c1).ok(),
            ))
            .unwrap()
        };

        if let Ok(p) = metrics::immoral_proportion(&judgments, &corpus) {
            prop_assert!(in_unit(p.overall.rate) && p.per_category.values().all(|r| in_unit(r.rate)));
        }
        for r in [
            metrics::dq_consistency(&judgments).ok(),
            metrics::dl_consistency(&judgments, &m1, &corpus).ok(),
            metrics::dg_consistency(&man, &woman).ok(),
        ]
        .into_iter()
        .flatten()
        {
            prop_assert!(in_unit(r.rate) && r.numerator <= r.denominator);
        }
        let ag = metrics::agreement_matrix(&raters(&choices)).map_err(|e| fail(&e.to_string()))?;
        prop_assert!(square_ok(&ag, true, 0.0), "agreement {:?}", ag);
        if let Ok(f) = metrics::firmness_distribution(&m1) {
            prop_assert!(f.iter().all(|x| (0.0..=1.0).contains(x)));
            prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let sr = metrics::srocc_matrix(&named).map_err(|e| fail(&e.to_string()))?;
        prop_assert!(square_ok(&sr, true, -1.0), "srocc {:?}", sr);
        for i in 0..named.len() {
            for j in 0..named.len() {
                if let Some(v) = sr.cells[i][j] {
                    prop_assert!((-1.0..=1.0).contains(&v));
                }
            }
        }
        if let Ok(r) = metrics::replicate_consistency(&m1) {
            prop_assert!(in_unit(r.rate));
        }

        let before = compute(&judgments, &choices);
        let after = compute(&shuffled(&judgments, seed), &shuffled(&choices, seed ^ 1));
        prop_assert_eq!(before, after);
        Ok(())
    });
    match result {
        Ok(()) => Ok("1000 randomized trials, no failures".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("ILSR-MLE equivalence", c1_ilsr_mle),
        ("ranking recovery", c2_recovery),
        ("convergence envelope", c3_envelope),
        ("symmetry exactness", c4_symmetry),
        ("pair pipeline", c5_pairs),
        ("SROCC correctness", c6_srocc),
        ("parser round-trip", c7_parser),
        ("debate protocol", c8_debate),
        ("end-to-end determinism", c9_end_to_end),
        ("replay economy", c10_replay),
        ("metric invariants", c11_invariants),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let (mark, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {:<24} {mark}  {detail} [{:.2?}]", i + 1, name, t.elapsed());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
