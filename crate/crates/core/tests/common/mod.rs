#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use moral_harness::corpus::{CorpusDocument, MoralPrinciple, MoralWord, Polarity, ScenarioText, WordCategory};
use moral_harness::gateway::{MockFixture, MockProvider, MockRule, ProviderConfig};
use moral_harness::prompts::Language;
use moral_harness::{Corpus, MoralScenario, OptionLabel, Variant};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/e2e")
}

pub fn e2e_corpus() -> Corpus {
    moral_harness::corpus::load_corpus(&fixture_dir().join("corpus.json"), 1).unwrap()
}

pub fn mock(name: &str, rules: &[(&str, &str)]) -> MockProvider {
    let fixture = MockFixture {
        rules: rules
            .iter()
            .map(|(p, r)| MockRule {
                pattern: p.to_string(),
                response: r.to_string(),
            })
            .collect(),
        ..MockFixture::default()
    };
    MockProvider::new(ProviderConfig::mock(name, name, 0.0), fixture).unwrap()
}

/// A corpus with `n_words` words, principles 1..=6 and the given scenarios
/// (id, principles A, principles B, immoral option). Scenario i expands word
/// i modulo the word count.
pub fn corpus(n_words: usize, scenarios: &[(&str, Vec<u32>, Vec<u32>, OptionLabel)]) -> Corpus {
    let cats = WordCategory::ALL;
    let words = (0..n_words)
        .map(|i| MoralWord {
            id: format!("w{i}"),
            text: format!("word {i}"),
            polarity: Polarity::Negative,
            category: cats[i % cats.len()],
            intensity: 1,
            negated: None,
        })
        .collect();
    let principles = (1..=6)
        .map(|id| MoralPrinciple {
            id,
            name: format!("p{id}"),
            stage: id as u8,
        })
        .collect();
    let scenarios = scenarios
        .iter()
        .enumerate()
        .map(|(i, (id, a, b, imm))| {
            let text = |v: &str| ScenarioText {
                context: format!("{id} {v} context"),
                option_a: format!("{id} first"),
                option_b: format!("{id} second"),
            };
            MoralScenario {
                id: id.to_string(),
                word_id: format!("w{}", i % n_words),
                variants: Variant::ALL.iter().map(|v| (*v, text(v.as_str()))).collect(),
                principles_a: a.clone(),
                principles_b: b.clone(),
                immoral_option: *imm,
                ambiguous: false,
            }
        })
        .collect();
    Corpus::from_document(CorpusDocument {
        schema_version: 1,
        language: Language::En,
        words,
        principles,
        scenarios,
    })
    .unwrap()
}

/// Bradley-Terry outcome counts: `n` comparisons between uniformly drawn
/// distinct items. Returns (winner, loser) -> count over ids 0..k.
pub fn sample_bt(rng: &mut ChaCha8Rng, strengths: &[f64], n: usize) -> BTreeMap<(u32, u32), u64> {
    let k = strengths.len();
    let mut counts = BTreeMap::new();
    for _ in 0..n {
        let i = rng.random_range(0..k);
        let mut j = rng.random_range(0..k - 1);
        if j >= i {
            j += 1;
        }
        let p = strengths[i] / (strengths[i] + strengths[j]);
        let (w, l) = if rng.random::<f64>() < p { (i, j) } else { (j, i) };
        *counts.entry((w as u32, l as u32)).or_insert(0) += 1;
    }
    counts
}

/// Bradley-Terry maximum likelihood by cyclic coordinate ascent on the
/// log-strengths, each coordinate solved by 1-D Newton. Returns strengths
/// normalized to sum to 1, indexed by id.
pub fn bt_mle(k: usize, counts: &BTreeMap<(u32, u32), u64>) -> Vec<f64> {
    let mut wins = vec![0.0; k];
    let mut n = vec![vec![0.0; k]; k];
    for (&(w, l), &c) in counts {
        let (w, l) = (w as usize, l as usize);
        wins[w] += c as f64;
        n[w][l] += c as f64;
        n[l][w] += c as f64;
    }
    let mut theta = vec![0.0f64; k];
    for _sweep in 0..10_000 {
        let mut delta: f64 = 0.0;
        for i in 0..k {
            for _ in 0..50 {
                let (mut grad, mut hess) = (wins[i], 0.0);
                for j in 0..k {
                    if n[i][j] > 0.0 {
                        let p = 1.0 / (1.0 + (theta[j] - theta[i]).exp());
                        grad -= n[i][j] * p;
                        hess += n[i][j] * p * (1.0 - p);
                    }
                }
                let step = grad / hess;
                theta[i] += step;
                delta = delta.max(step.abs());
                if step.abs() < 1e-14 {
                    break;
                }
            }
        }
        let mean = theta.iter().sum::<f64>() / k as f64;
        theta.iter_mut().for_each(|t| *t -= mean);
        if delta < 1e-13 {
            break;
        }
    }
    let e: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Spearman correlation as the Pearson correlation of position vectors.
pub fn spearman_pearson(a: &[u32], b: &[u32]) -> f64 {
    let pos = |r: &[u32], id: u32| r.iter().position(|&x| x == id).unwrap() as f64;
    let xs: Vec<f64> = a.iter().map(|&id| pos(a, id)).collect();
    let ys: Vec<f64> = a.iter().map(|&id| pos(b, id)).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

pub fn permutations(n: u32) -> Vec<Vec<u32>> {
    fn go(rest: Vec<u32>, acc: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if rest.is_empty() {
            out.push(acc.clone());
            return;
        }
        for i in 0..rest.len() {
            let mut r = rest.clone();
            let x = r.remove(i);
            acc.push(x);
            go(r, acc, out);
            acc.pop();
        }
    }
    let mut out = Vec::new();
    go((1..=n).collect(), &mut Vec::new(), &mut out);
    out
}
