//! Best-response dynamics of the placement game.
//!
//! Cache `m` minimizes its local miss by storing the `K` files with the
//! largest scores `a_j q_m(j)`. Because the local miss changes by exactly the
//! change in the global miss, every strict improvement lowers `f`, and the
//! dynamics stop at a Nash equilibrium after finitely many steps.

use std::io::Write;

use rand::Rng as _;

use crate::catalog::Popularity;
use crate::error::{Error, Result};
use crate::placement::{self, evaluate_miss, Exposure, Placement};
use crate::seed;
use crate::topology::CellTable;

/// Absolute tolerance below which a change in local miss is not an
/// improvement.
pub const IMPROVEMENT_TOL: f64 = 1e-12;

/// Default cap on the number of subsets a brute-force search may visit.
pub const ENUMERATION_CAP: u128 = 2_000_000;

/// Which files a best response considers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scope {
    /// Files stored by a neighbour plus the `K` most popular other files.
    /// This always contains an optimal set.
    #[default]
    Truncated,
    /// Every file in the catalog.
    FullCatalog,
}

/// Outcome of a best-response computation at one cache.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    /// The chosen row (the incumbent when it is already optimal).
    pub row: Vec<u32>,
    /// Decrease of the local miss when switching to `row`; never negative
    /// beyond rounding.
    pub gain: f64,
    pub changed: bool,
}

fn check_instance(b: &Placement, cells: &CellTable, pop: &Popularity) -> Result<()> {
    if cells.n_caches() != b.n_caches() {
        return Err(Error::DimensionMismatch(format!(
            "placement has {} caches, cell table {}",
            b.n_caches(),
            cells.n_caches()
        )));
    }
    if pop.len() != b.files() {
        return Err(Error::DimensionMismatch(format!(
            "placement has {} files, popularity {}",
            b.files(),
            pop.len()
        )));
    }
    Ok(())
}

/// Score-ordered top `k` of `(file, score)` candidates; ties go to the
/// lower file index.
fn top_k(mut scored: Vec<(u32, f64)>, k: usize) -> (Vec<u32>, f64) {
    scored.sort_unstable_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    scored.truncate(k);
    let sum = scored.iter().map(|&(_, s)| s).sum();
    let mut row: Vec<u32> = scored.into_iter().map(|(j, _)| j).collect();
    row.sort_unstable();
    (row, sum)
}

fn candidates(q: &Exposure, pop: &Popularity, k: usize, scope: Scope) -> Vec<(u32, f64)> {
    match scope {
        Scope::FullCatalog => q
            .to_dense(pop.len())
            .into_iter()
            .enumerate()
            .map(|(j, qj)| (j as u32, pop.prob(j) * qj))
            .collect(),
        Scope::Truncated => {
            let reduced = q.reduced();
            let mut out: Vec<(u32, f64)> = reduced
                .iter()
                .map(|&(j, qj)| (j, pop.prob(j as usize) * qj))
                .collect();
            let mut r = reduced.iter().peekable();
            let mut added = 0;
            for j in 0..pop.len() as u32 {
                if added == k {
                    break;
                }
                while r.next_if(|&&(rj, _)| rj < j).is_some() {}
                if r.peek().is_some_and(|&&(rj, _)| rj == j) {
                    continue;
                }
                out.push((j, pop.prob(j as usize) * q.base()));
                added += 1;
            }
            out
        }
    }
}

pub(crate) fn respond(
    b: &Placement,
    m: usize,
    cells: &CellTable,
    pop: &Popularity,
    scope: Scope,
    tol: f64,
) -> (Response, Exposure) {
    let q = placement::exposure_unchecked(b, m, cells);
    let (best, best_sum) = top_k(candidates(&q, pop, b.capacity(), scope), b.capacity());
    let incumbent = b.row(m);
    let incumbent_sum: f64 = incumbent
        .iter()
        .map(|&j| pop.prob(j as usize) * q.get(j as usize))
        .sum();
    let gain = best_sum - incumbent_sum;
    let response = if gain > tol && best != incumbent {
        Response {
            row: best,
            gain,
            changed: true,
        }
    } else {
        Response {
            row: incumbent.to_vec(),
            gain: 0.0,
            changed: false,
        }
    };
    (response, q)
}

/// Threshold-rule best response of cache `m` to the other rows of `b`.
pub fn best_response(b: &Placement, m: usize, cells: &CellTable, pop: &Popularity) -> Result<Vec<u32>> {
    Ok(best_response_detail(b, m, cells, pop, Scope::Truncated, IMPROVEMENT_TOL)?.row)
}

/// Best response with an explicit candidate scope and improvement
/// tolerance.
pub fn best_response_detail(
    b: &Placement,
    m: usize,
    cells: &CellTable,
    pop: &Popularity,
    scope: Scope,
    tol: f64,
) -> Result<Response> {
    check_instance(b, cells, pop)?;
    if m >= b.n_caches() {
        return Err(Error::UnknownCache(m));
    }
    Ok(respond(b, m, cells, pop, scope, tol).0)
}

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Exact minimizer of the local miss of `m` by enumerating every `K`-subset.
/// Near-ties (within [`IMPROVEMENT_TOL`]) resolve to the lexicographically
/// smallest set.
pub fn brute_force_best_response(
    b: &Placement,
    m: usize,
    cells: &CellTable,
    pop: &Popularity,
    cap: u128,
) -> Result<Vec<u32>> {
    check_instance(b, cells, pop)?;
    if m >= b.n_caches() {
        return Err(Error::UnknownCache(m));
    }
    let (j, k) = (b.files(), b.capacity());
    let count = binomial(j, k);
    if count > cap {
        return Err(Error::EnumerationCap { count, cap });
    }
    let mut scratch = b.clone();
    let mut idx: Vec<u32> = (0..k as u32).collect();
    let mut best: Option<(f64, Vec<u32>)> = None;
    loop {
        scratch.set_row(m, idx.clone())?;
        let f = placement::local_miss_unchecked(&scratch, m, cells, pop);
        if best.as_ref().is_none_or(|(bf, _)| f < bf - IMPROVEMENT_TOL) {
            best = Some((f, idx.clone()));
        }
        // next combination in lexicographic order
        let mut i = k;
        loop {
            if i == 0 {
                return Ok(best.map(|(_, row)| row).unwrap_or_default());
            }
            i -= 1;
            if (idx[i] as usize) < j - k + i {
                break;
            }
        }
        idx[i] += 1;
        for t in i + 1..k {
            idx[t] = idx[t - 1] + 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NashMethod {
    Threshold,
    BruteForce,
}

/// Largest local-miss decrease any single cache could obtain by deviating.
pub fn nash_gaps(b: &Placement, cells: &CellTable, pop: &Popularity) -> Result<Vec<f64>> {
    check_instance(b, cells, pop)?;
    Ok((0..b.n_caches())
        .map(|m| {
            let q = placement::exposure_unchecked(b, m, cells);
            let (_, best_sum) = top_k(candidates(&q, pop, b.capacity(), Scope::Truncated), b.capacity());
            let incumbent: f64 = b
                .row(m)
                .iter()
                .map(|&j| pop.prob(j as usize) * q.get(j as usize))
                .sum();
            (best_sum - incumbent).max(0.0)
        })
        .collect())
}

/// True when no cache can lower its local miss by more than `tol`.
pub fn is_nash(b: &Placement, cells: &CellTable, pop: &Popularity, method: NashMethod, tol: f64) -> Result<bool> {
    check_instance(b, cells, pop)?;
    match method {
        NashMethod::Threshold => Ok(nash_gaps(b, cells, pop)?.iter().all(|&g| g <= tol)),
        NashMethod::BruteForce => {
            for m in 0..b.n_caches() {
                let current = placement::local_miss_unchecked(b, m, cells, pop);
                let row = brute_force_best_response(b, m, cells, pop, ENUMERATION_CAP)?;
                let best = placement::local_miss_unchecked(&b.with_row(m, row)?, m, cells, pop);
                if current - best > tol {
                    return Ok(false);
                }
            }
            Ok(true)
        }
    }
}

/// Lower bound on the decrease of `f` produced by any strict improvement
/// from the given placement state.
#[derive(Debug, Clone, PartialEq)]
pub struct ImprovementBound {
    /// `min over m, i != j of |a_i q_m(i) - a_j q_m(j)|`.
    pub epsilon_lower: f64,
    /// Cache and file pair attaining the minimum.
    pub witness: Option<(usize, u32, u32)>,
    /// Set when the minimum is zero because scores tie.
    pub degenerate: bool,
    /// Smallest non-zero gap between two distinct cell masses. Meaningful
    /// for lattice networks, whose masses take few distinct values.
    pub min_mass_gap: f64,
    /// Smallest file popularity.
    pub min_popularity: f64,
}

pub fn min_improvement_bound(b: &Placement, cells: &CellTable, pop: &Popularity) -> Result<ImprovementBound> {
    check_instance(b, cells, pop)?;
    let mut eps = f64::INFINITY;
    let mut witness = None;
    for m in 0..b.n_caches() {
        let q = placement::exposure_unchecked(b, m, cells);
        let mut scored: Vec<(u32, f64)> = q
            .to_dense(pop.len())
            .into_iter()
            .enumerate()
            .map(|(j, qj)| (j as u32, pop.prob(j) * qj))
            .collect();
        scored.sort_unstable_by(|x, y| x.1.total_cmp(&y.1));
        for w in scored.windows(2) {
            let gap = w[1].1 - w[0].1;
            if gap < eps {
                eps = gap;
                witness = Some((m, w[0].0.min(w[1].0), w[0].0.max(w[1].0)));
            }
        }
    }
    if !eps.is_finite() {
        eps = 0.0;
    }
    let mut masses: Vec<f64> = cells.cells().iter().map(|c| c.mass).collect();
    masses.sort_unstable_by(f64::total_cmp);
    let min_mass_gap = masses
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|&g| g > 1e-15)
        .fold(f64::INFINITY, f64::min);
    Ok(ImprovementBound {
        epsilon_lower: eps,
        witness,
        degenerate: eps <= 1e-15,
        min_mass_gap,
        min_popularity: pop.probs().last().copied().unwrap_or(0.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Visit caches `1, 2, ..., N, 1, ...`.
    RoundRobin,
    /// Draw a cache uniformly and independently at every step.
    UniformRandom,
}

/// Stopping rule for random-order dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopRule {
    /// Stop once every cache is marked settled. A cache is marked unsettled
    /// when it or a neighbour improves, and settled after a non-improving
    /// visit.
    Flags,
    /// Stop after `N` consecutive non-improving steps.
    Consecutive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsOptions {
    pub schedule: ScheduleKind,
    pub seed: u64,
    pub stop: StopRule,
    pub step_cap: u64,
    /// Improvements not exceeding this do not reset the stopping rule.
    pub epsilon: Option<f64>,
}

impl DynamicsOptions {
    pub const DEFAULT_STEP_CAP: u64 = 1_000_000;

    pub fn rrbr() -> Self {
        DynamicsOptions {
            schedule: ScheduleKind::RoundRobin,
            seed: 0,
            stop: StopRule::Consecutive,
            step_cap: Self::DEFAULT_STEP_CAP,
            epsilon: None,
        }
    }

    pub fn robr(seed: u64) -> Self {
        DynamicsOptions {
            schedule: ScheduleKind::UniformRandom,
            seed,
            stop: StopRule::Flags,
            step_cap: Self::DEFAULT_STEP_CAP,
            epsilon: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// No cache could improve: a full round, `N` consecutive draws, or all
    /// flags settled, depending on the rule.
    Converged,
    /// The step cap was hit before convergence.
    StepCap,
    /// A fixed step budget ran out (annealing).
    Budget,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::StepCap => "step-cap",
            Termination::Budget => "budget",
        }
    }
}

/// How an annealing proposal was generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalKind {
    BestResponse,
    Random,
    Relaxed,
}

impl ProposalKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProposalKind::BestResponse => "best-response",
            ProposalKind::Random => "random",
            ProposalKind::Relaxed => "relaxed",
        }
    }
}

/// Extra per-step data recorded by the annealers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealInfo {
    pub temperature: Option<f64>,
    pub tau: Option<f64>,
    pub accepted: bool,
    pub proposal: ProposalKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    /// 1-based update attempt.
    pub step: u64,
    pub cache: usize,
    pub f_before: f64,
    pub f_after: f64,
    pub changed: bool,
    /// Files that entered / left the cache's row.
    pub added: Vec<u32>,
    pub removed: Vec<u32>,
    pub anneal: Option<AnnealInfo>,
}

/// Record of one run of any placement algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    /// Starting placement; absent for relaxed runs, which start from zeros.
    pub initial: Option<Placement>,
    pub initial_f: f64,
    pub steps: Vec<TraceStep>,
    pub placement: Placement,
    /// Exact miss of the final placement, recomputed from scratch.
    pub final_f: f64,
    pub termination: Termination,
}

impl Trace {
    /// Miss after each step, starting with the initial value.
    pub fn miss_series(&self) -> Vec<f64> {
        std::iter::once(self.initial_f)
            .chain(self.steps.iter().map(|s| s.f_after))
            .collect()
    }

    /// `step,cache,f_before,f_after,changed`, followed by
    /// `temperature,tau,accepted,proposal_kind` for annealing traces.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let annealing = self.steps.iter().any(|s| s.anneal.is_some());
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["step", "cache", "f_before", "f_after", "changed"];
        if annealing {
            header.extend(["temperature", "tau", "accepted", "proposal_kind"]);
        }
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for s in &self.steps {
            let mut rec = vec![
                s.step.to_string(),
                (s.cache + 1).to_string(),
                s.f_before.to_string(),
                s.f_after.to_string(),
                u8::from(s.changed).to_string(),
            ];
            if annealing {
                match &s.anneal {
                    Some(a) => rec.extend([
                        opt(a.temperature),
                        opt(a.tau),
                        u8::from(a.accepted).to_string(),
                        a.proposal.as_str().to_string(),
                    ]),
                    None => rec.extend([String::new(), String::new(), String::new(), String::new()]),
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn row_diff(old: &[u32], new: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let added = new.iter().copied().filter(|j| old.binary_search(j).is_err()).collect();
    let removed = old.iter().copied().filter(|j| new.binary_search(j).is_err()).collect();
    (added, removed)
}

/// Best-response dynamics from `b0` until convergence or the step cap.
pub fn run_dynamics(b0: Placement, cells: &CellTable, pop: &Popularity, opts: &DynamicsOptions) -> Result<Trace> {
    check_instance(&b0, cells, pop)?;
    let n = b0.n_caches();
    let initial_f = evaluate_miss(&b0, cells, pop)?;
    let threshold = opts.epsilon.unwrap_or(0.0).max(IMPROVEMENT_TOL);
    let mut rng = seed::rng(opts.seed);
    let mut b = b0.clone();
    let mut f = initial_f;
    let mut steps = Vec::new();
    let mut unsettled = vec![true; n];
    let mut n_unsettled = n;
    let mut quiet = 0usize;
    let mut termination = Termination::StepCap;

    for t in 0..opts.step_cap {
        let m = match opts.schedule {
            ScheduleKind::RoundRobin => (t % n as u64) as usize,
            ScheduleKind::UniformRandom => rng.random_range(0..n),
        };
        let (resp, _) = respond(&b, m, cells, pop, Scope::Truncated, IMPROVEMENT_TOL);
        let f_before = f;
        let (added, removed) = if resp.changed {
            let diff = row_diff(b.row(m), &resp.row);
            b.set_row(m, resp.row)?;
            f -= resp.gain;
            diff
        } else {
            (Vec::new(), Vec::new())
        };
        steps.push(TraceStep {
            step: t + 1,
            cache: m,
            f_before,
            f_after: f,
            changed: resp.changed,
            added,
            removed,
            anneal: None,
        });

        let improved = resp.changed && resp.gain > threshold;
        let uses_flags = opts.schedule == ScheduleKind::UniformRandom && opts.stop == StopRule::Flags;
        if uses_flags {
            let mut mark = |l: usize, v: bool| {
                if unsettled[l] != v {
                    unsettled[l] = v;
                    if v {
                        n_unsettled += 1;
                    } else {
                        n_unsettled -= 1;
                    }
                }
            };
            if improved {
                for &l in cells.neighbors(m)? {
                    mark(l, true);
                }
            } else {
                mark(m, false);
            }
            if n_unsettled == 0 {
                termination = Termination::Converged;
                break;
            }
        } else {
            quiet = if improved { 0 } else { quiet + 1 };
            if quiet >= n {
                termination = Termination::Converged;
                break;
            }
        }
    }
    let final_f = evaluate_miss(&b, cells, pop)?;
    Ok(Trace {
        initial: Some(b0),
        initial_f,
        steps,
        placement: b,
        final_f,
        termination,
    })
}

/// Step number after which no step lowered `f` by more than `epsilon`
/// (0 if none did).
pub fn epsilon_nash_stop(trace: &Trace, epsilon: f64) -> u64 {
    trace
        .steps
        .iter()
        .rev()
        .find(|s| s.f_before - s.f_after > epsilon)
        .map_or(0, |s| s.step)
}
