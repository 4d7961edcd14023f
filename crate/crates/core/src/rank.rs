//! Moral-principle rankings from choice records.
//!
//! Choices become directed principle pairs (winner over loser), opposite
//! directions are netted, and the net pairs are ranked with iterative Luce
//! spectral ranking: strengths are the stationary distribution of a Markov
//! chain whose rate from loser to winner is `count / (σ_w + σ_l)`, recomputed
//! from the previous strengths until they stop moving. The fixed point is the
//! Bradley-Terry maximum-likelihood estimate.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, OptionLabel, Variant};
use crate::elicitation::ChoiceRecord;
use crate::exec::{self, Execution};
use crate::prompts::OptionOrder;

pub const DEFAULT_MAX_ITER: u32 = 150;
pub const DEFAULT_TOL: f64 = 1e-8;
/// Max-norm tolerance of the inner stationary solve.
pub const STATIONARY_TOL: f64 = 1e-12;
/// Largest item count the direct solver is used for under `Auto`.
pub const DIRECT_SOLVE_LIMIT: usize = 512;
const POWER_MAX_STEPS: usize = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum RankError {
    #[error("records mix cells: {0}")]
    MixedCell(String),
    #[error("duplicate record for scenario {scenario} ({order})")]
    DuplicateRecord { scenario: String, order: OptionOrder },
    #[error("record names unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("invalid pair {winner} > {loser} (count {count})")]
    InvalidPair { winner: u32, loser: u32, count: u64 },
    #[error("no comparison pairs")]
    NoPairs,
    #[error("comparison graph is not strongly connected")]
    Disconnected,
    #[error("no strongly connected component with two or more items")]
    EmptyComponent,
    #[error("strength for item {0} missing or not positive")]
    BadStrength(u32),
    #[error("need {need} ranked items, have {have}")]
    TooFewRanked { need: usize, have: usize },
    #[error("principle {0} not in corpus")]
    UnknownPrinciple(u32),
    #[error("stationary solve failed")]
    Singular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ComparisonPair {
    pub winner: u32,
    pub loser: u32,
    pub count: u64,
}

impl ComparisonPair {
    pub fn new(winner: u32, loser: u32, count: u64) -> Self {
        ComparisonPair { winner, loser, count }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairFilter {
    pub min_firmness: u8,
    pub require_order_stable: bool,
}

impl Default for PairFilter {
    fn default() -> Self {
        PairFilter {
            min_firmness: 2,
            require_order_stable: true,
        }
    }
}

/// Scenarios dropped during pair extraction, by reason. A scenario is
/// counted under the first reason that applies, in field order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusions {
    pub missing_order: usize,
    pub parse_error: usize,
    pub low_firmness: usize,
    pub order_unstable: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairExtraction {
    /// (winner, loser) in emission order: corpus scenario order, then
    /// chosen-side principle order, then other-side principle order.
    pub pairs: Vec<(u32, u32)>,
    pub scenarios_used: usize,
    pub excluded: Exclusions,
}

impl PairExtraction {
    pub fn counts(&self) -> BTreeMap<(u32, u32), u64> {
        let mut m = BTreeMap::new();
        for &p in &self.pairs {
            *m.entry(p).or_insert(0) += 1;
        }
        m
    }
}

/// Turns one (model, variant) cell of choice records into principle pairs.
///
/// Records are matched per scenario and order. When order stability is
/// required a scenario needs both orders with equal canonical options;
/// otherwise the original-order record is used, falling back to the swapped
/// one. Every record used must parse and meet the firmness threshold.
pub fn extract_pairs(
    records: &[ChoiceRecord],
    c: &Corpus,
    filter: &PairFilter,
) -> Result<PairExtraction, RankError> {
    if let Some(first) = records.first() {
        if let Some(r) = records
            .iter()
            .find(|r| r.model != first.model || r.variant != first.variant)
        {
            return Err(RankError::MixedCell(format!(
                "{}/{} and {}/{}",
                first.model, first.variant, r.model, r.variant
            )));
        }
    }
    let mut by_scenario: HashMap<usize, [Option<&ChoiceRecord>; 2]> = HashMap::new();
    for r in records {
        let pos = c
            .scenario_position(&r.scenario_id)
            .ok_or_else(|| RankError::UnknownScenario(r.scenario_id.clone()))?;
        let slot = &mut by_scenario.entry(pos).or_default()[r.order as usize];
        if slot.is_some() {
            return Err(RankError::DuplicateRecord {
                scenario: r.scenario_id.clone(),
                order: r.order,
            });
        }
        *slot = Some(r);
    }
    let mut positions: Vec<usize> = by_scenario.keys().copied().collect();
    positions.sort_unstable();

    let mut out = PairExtraction::default();
    for pos in positions {
        let [orig, swapped] = by_scenario[&pos];
        let used: Vec<&ChoiceRecord> = if filter.require_order_stable {
            match (orig, swapped) {
                (Some(a), Some(b)) => vec![a, b],
                _ => {
                    out.excluded.missing_order += 1;
                    continue;
                }
            }
        } else {
            orig.or(swapped).into_iter().collect()
        };
        let parsed: Option<Vec<(OptionLabel, u8)>> = used.iter().map(|r| r.parsed()).collect();
        let Some(parsed) = parsed else {
            out.excluded.parse_error += 1;
            continue;
        };
        if parsed.iter().any(|&(_, f)| f < filter.min_firmness) {
            out.excluded.low_firmness += 1;
            continue;
        }
        let chosen = parsed[0].0;
        if parsed.iter().any(|&(o, _)| o != chosen) {
            out.excluded.order_unstable += 1;
            continue;
        }
        let s = &c.scenarios()[pos];
        for &p in s.principles(chosen) {
            for &q in s.principles(chosen.other()) {
                out.pairs.push((p, q));
            }
        }
        out.scenarios_used += 1;
    }
    if out.pairs.is_empty() {
        log::warn!("pair extraction produced no pairs");
    }
    Ok(out)
}

/// Nets opposite directions: for each unordered pair the majority direction
/// survives with the count difference; exact ties vanish. Output is sorted.
pub fn resolve_contradictions(pairs: &[(u32, u32)]) -> Vec<ComparisonPair> {
    let mut counts: BTreeMap<(u32, u32), i64> = BTreeMap::new();
    for &(w, l) in pairs {
        if w == l {
            continue;
        }
        let (key, sign) = if w < l { ((w, l), 1) } else { ((l, w), -1) };
        *counts.entry(key).or_insert(0) += sign;
    }
    let mut out: Vec<ComparisonPair> = counts
        .into_iter()
        .filter(|&(_, net)| net != 0)
        .map(|((x, y), net)| {
            if net > 0 {
                ComparisonPair::new(x, y, net as u64)
            } else {
                ComparisonPair::new(y, x, (-net) as u64)
            }
        })
        .collect();
    out.sort();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StationarySolver {
    Power,
    Direct,
    /// Direct up to [`DIRECT_SOLVE_LIMIT`] items, power iteration beyond.
    #[default]
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IlsrOptions {
    pub max_iter: u32,
    pub tol: f64,
    pub solver: StationarySolver,
    pub exec: Execution,
}

impl Default for IlsrOptions {
    fn default() -> Self {
        IlsrOptions {
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            solver: StationarySolver::Auto,
            exec: Execution::default(),
        }
    }
}

/// Pairs over dense indices `0..n`, aggregated per (loser, winner) and
/// grouped by winner for the power step.
struct Chain {
    n: usize,
    /// (loser, winner, count)
    edges: Vec<(usize, usize, f64)>,
    /// Edge indices sorted by winner, with offsets.
    in_offsets: Vec<usize>,
    in_edges: Vec<usize>,
}

impl Chain {
    fn new(n: usize, edges: Vec<(usize, usize, f64)>) -> Chain {
        let mut in_edges: Vec<usize> = (0..edges.len()).collect();
        in_edges.sort_by_key(|&e| (edges[e].1, edges[e].0));
        let mut in_offsets = vec![0; n + 1];
        for &(_, w, _) in &edges {
            in_offsets[w + 1] += 1;
        }
        for i in 0..n {
            in_offsets[i + 1] += in_offsets[i];
        }
        Chain {
            n,
            edges,
            in_offsets,
            in_edges,
        }
    }

    /// Rates for the current strengths, and the total outflow per state.
    fn rates(&self, sigma: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut rate = Vec::with_capacity(self.edges.len());
        let mut out = vec![0.0; self.n];
        for &(l, w, c) in &self.edges {
            let r = c / (sigma[w] + sigma[l]);
            rate.push(r);
            out[l] += r;
        }
        (rate, out)
    }

    fn stationary(&self, sigma: &[f64], solver: StationarySolver, exec: Execution) -> Result<Vec<f64>, RankError> {
        let direct = match solver {
            StationarySolver::Direct => true,
            StationarySolver::Power => false,
            StationarySolver::Auto => self.n <= DIRECT_SOLVE_LIMIT,
        };
        if direct {
            match self.stationary_direct(sigma) {
                Ok(pi) => return Ok(pi),
                Err(e) if solver == StationarySolver::Direct => return Err(e),
                Err(_) => log::debug!("direct solve failed; using power iteration"),
            }
        }
        Ok(self.stationary_power(sigma, sigma, exec))
    }

    /// Lazy power iteration `x <- (x + xP) / 2` on the uniformized chain,
    /// started from `start`. Laziness removes periodicity.
    fn stationary_power(&self, sigma: &[f64], start: &[f64], exec: Execution) -> Vec<f64> {
        let (rate, out) = self.rates(sigma);
        let dmax = out.iter().copied().fold(0.0, f64::max);
        if dmax <= 0.0 {
            return start.to_vec();
        }
        let mut x = normalized(start.to_vec());
        let mut next = vec![0.0; self.n];
        for _ in 0..POWER_MAX_STEPS {
            exec::fill(exec, &mut next, |w| {
                let mut inflow = 0.0;
                for &e in &self.in_edges[self.in_offsets[w]..self.in_offsets[w + 1]] {
                    inflow += x[self.edges[e].0] * rate[e];
                }
                let stay = x[w] * (1.0 - out[w] / dmax);
                0.5 * x[w] + 0.5 * (stay + inflow / dmax)
            });
            let s: f64 = next.iter().sum();
            let mut change: f64 = 0.0;
            for (a, b) in next.iter_mut().zip(&x) {
                *a /= s;
                change = change.max((*a - b).abs());
            }
            std::mem::swap(&mut x, &mut next);
            if change < STATIONARY_TOL {
                return x;
            }
        }
        log::warn!("power iteration hit the step limit");
        x
    }

    /// Solves `π Q = 0, Σπ = 1` by LU decomposition of the generator.
    fn stationary_direct(&self, sigma: &[f64]) -> Result<Vec<f64>, RankError> {
        let n = self.n;
        let (rate, out) = self.rates(sigma);
        // A = Qᵀ with the last equation replaced by the normalization
        let mut a = DMatrix::<f64>::zeros(n, n);
        for (&(l, w, _), &r) in self.edges.iter().zip(&rate) {
            a[(w, l)] += r;
        }
        for i in 0..n {
            a[(i, i)] -= out[i];
        }
        for j in 0..n {
            a[(n - 1, j)] = 1.0;
        }
        let mut b = DVector::<f64>::zeros(n);
        b[n - 1] = 1.0;
        let pi = a.lu().solve(&b).ok_or(RankError::Singular)?;
        if pi.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(RankError::Singular);
        }
        Ok(normalized(pi.iter().copied().collect()))
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    for x in &mut v {
        *x /= s;
    }
    v
}

fn check_pairs(pairs: &[ComparisonPair]) -> Result<(), RankError> {
    if pairs.is_empty() {
        return Err(RankError::NoPairs);
    }
    if let Some(p) = pairs.iter().find(|p| p.winner == p.loser || p.count == 0) {
        return Err(RankError::InvalidPair {
            winner: p.winner,
            loser: p.loser,
            count: p.count,
        });
    }
    Ok(())
}

/// Strongly connected components of the comparison graph, each sorted,
/// largest first; equal sizes ordered by smallest id.
pub fn components(pairs: &[ComparisonPair]) -> Vec<Vec<u32>> {
    let ids: BTreeSet<u32> = pairs.iter().flat_map(|p| [p.winner, p.loser]).collect();
    let mut g: DiGraph<u32, ()> = DiGraph::with_capacity(ids.len(), pairs.len());
    let nodes: BTreeMap<u32, NodeIndex> = ids.iter().map(|&id| (id, g.add_node(id))).collect();
    for p in pairs {
        g.update_edge(nodes[&p.loser], nodes[&p.winner], ());
    }
    let mut comps: Vec<Vec<u32>> = tarjan_scc(&g)
        .into_iter()
        .map(|c| {
            let mut ids: Vec<u32> = c.into_iter().map(|n| g[n]).collect();
            ids.sort_unstable();
            ids
        })
        .collect();
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    comps
}

fn build_chain(pairs: &[ComparisonPair], ids: &[u32]) -> Chain {
    let index: HashMap<u32, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut agg: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for p in pairs {
        if let (Some(&w), Some(&l)) = (index.get(&p.winner), index.get(&p.loser)) {
            *agg.entry((l, w)).or_insert(0.0) += p.count as f64;
        }
    }
    Chain::new(ids.len(), agg.into_iter().map(|((l, w), c)| (l, w, c)).collect())
}

/// One spectral step: the stationary distribution of the chain induced by
/// `strengths`. Every item in a pair must carry a positive strength and the
/// comparison graph over the strength keys must be strongly connected.
pub fn lsr(pairs: &[ComparisonPair], strengths: &BTreeMap<u32, f64>) -> Result<BTreeMap<u32, f64>, RankError> {
    check_pairs(pairs)?;
    for p in pairs {
        for id in [p.winner, p.loser] {
            match strengths.get(&id) {
                Some(&s) if s > 0.0 && s.is_finite() => {}
                _ => return Err(RankError::BadStrength(id)),
            }
        }
    }
    let ids: Vec<u32> = strengths.keys().copied().collect();
    let comps = components(pairs);
    if comps.len() != 1 || comps[0] != ids {
        return Err(RankError::Disconnected);
    }
    let chain = build_chain(pairs, &ids);
    let sigma: Vec<f64> = ids.iter().map(|id| strengths[id]).collect();
    let pi = chain.stationary(&sigma, StationarySolver::Auto, Execution::Sequential)?;
    Ok(ids.into_iter().zip(pi).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub strengths: BTreeMap<u32, f64>,
    pub weights: BTreeMap<u32, f64>,
    /// Ranked ids, strongest first; equal strengths by ascending id.
    pub rank: Vec<u32>,
    pub iterations: u32,
    pub converged: bool,
    /// Max-norm change of the last iteration.
    pub last_change: f64,
    pub unranked: BTreeSet<u32>,
}

impl RankingResult {
    pub fn position(&self, id: u32) -> Option<usize> {
        self.rank.iter().position(|&x| x == id)
    }
}

pub fn ilsr(pairs: &[ComparisonPair]) -> Result<RankingResult, RankError> {
    ilsr_with(pairs, &IlsrOptions::default())
}

pub fn ilsr_with(pairs: &[ComparisonPair], opts: &IlsrOptions) -> Result<RankingResult, RankError> {
    check_pairs(pairs)?;
    let mut comps = components(pairs);
    let ids = comps.remove(0);
    if ids.len() < 2 {
        return Err(RankError::EmptyComponent);
    }
    let unranked: BTreeSet<u32> = comps.into_iter().flatten().collect();
    let chain = build_chain(pairs, &ids);
    let n = ids.len();

    let mut sigma = vec![1.0 / n as f64; n];
    let mut iterations = 0;
    let mut converged = false;
    let mut last_change = f64::INFINITY;
    while iterations < opts.max_iter {
        iterations += 1;
        let next = match opts.solver {
            StationarySolver::Power => chain.stationary_power(&sigma, &sigma, opts.exec),
            s => chain.stationary(&sigma, s, opts.exec)?,
        };
        last_change = next
            .iter()
            .zip(&sigma)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        sigma = next;
        if last_change < opts.tol {
            converged = true;
            break;
        }
    }

    let mean_log = sigma.iter().map(|s| s.ln()).sum::<f64>() / n as f64;
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(ids[a].cmp(&ids[b])));
    Ok(RankingResult {
        strengths: ids.iter().copied().zip(sigma.iter().copied()).collect(),
        weights: ids.iter().zip(&sigma).map(|(&id, s)| (id, s.ln() - mean_log)).collect(),
        rank: rank.into_iter().map(|i| ids[i]).collect(),
        iterations,
        converged,
        last_change,
        unranked,
    })
}

/// Ranking inputs of one (model, variant) cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub model: String,
    pub variant: Variant,
}

/// Ranks independent cells, in parallel when `opts.exec` allows. Each cell
/// itself runs sequentially.
pub fn rank_cells(
    cells: &[(CellKey, Vec<ComparisonPair>)],
    opts: &IlsrOptions,
) -> Vec<(CellKey, Result<RankingResult, RankError>)> {
    let inner = IlsrOptions {
        exec: Execution::Sequential,
        ..*opts
    };
    exec::map(opts.exec, cells, |(k, pairs)| (k.clone(), ilsr_with(pairs, &inner)))
}

/// Every Kohlberg stage that is most frequent among the top-`k` principles.
pub fn infer_stages(r: &RankingResult, c: &Corpus, k: usize) -> Result<BTreeSet<u8>, RankError> {
    if r.rank.len() < k || k == 0 {
        return Err(RankError::TooFewRanked {
            need: k.max(1),
            have: r.rank.len(),
        });
    }
    let mut freq: BTreeMap<u8, usize> = BTreeMap::new();
    for &id in &r.rank[..k] {
        let p = c.principle(id).ok_or(RankError::UnknownPrinciple(id))?;
        *freq.entry(p.stage).or_insert(0) += 1;
    }
    let best = freq.values().copied().max().unwrap_or(0);
    Ok(freq.into_iter().filter(|&(_, n)| n == best).map(|(s, _)| s).collect())
}

/// Top-`k` and bottom-`k` rows of a ranking, in rank order, without repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub rank: usize,
    pub principle_id: u32,
    pub name: String,
    pub weight: f64,
}

pub fn weight_table(r: &RankingResult, c: &Corpus, k: usize) -> Vec<WeightRow> {
    let n = r.rank.len();
    (0..n)
        .filter(|&i| i < k || i + k >= n)
        .map(|i| {
            let id = r.rank[i];
            WeightRow {
                rank: i + 1,
                principle_id: id,
                name: c.principle(id).map(|p| p.name.clone()).unwrap_or_default(),
                weight: r.weights[&id],
            }
        })
        .collect()
}

pub fn write_weights_csv<W: Write>(rows: &[WeightRow], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["rank", "principle_id", "name", "weight"])?;
    for row in rows {
        w.write_record([
            row.rank.to_string(),
            row.principle_id.to_string(),
            row.name.clone(),
            format!("{:.6}", row.weight),
        ])?;
    }
    w.flush()?;
    Ok(())
}
