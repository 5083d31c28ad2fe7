//! Simulated annealing for escaping poor Nash equilibria.
//!
//! The stochastic annealer (SSA) is a Metropolis chain on binary placements
//! whose proposals are either a cache's best response or a uniformly random
//! `K`-subset, cooled as `T_t = d / ln(t + 1)`. The deterministic annealer
//! (DSA) plays best responses on the box-relaxed problem
//! `b in [tau, 1 - tau]`, whose optimum has a closed three-level form, and
//! drives `tau` to zero before rounding.

use rand::Rng as _;

use crate::catalog::Popularity;
use crate::error::{Error, Result};
use crate::game::{
    self, binomial, AnnealInfo, ProposalKind, Scope, Termination, Trace, TraceStep, IMPROVEMENT_TOL,
};
use crate::placement::{evaluate_miss, Placement, RelaxedPlacement};
use crate::seed;
use crate::topology::CellTable;

/// Logarithmic cooling `T_t = depth / ln(t + 1)` for `t >= 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cooling {
    pub depth: f64,
}

impl Cooling {
    pub fn new(depth: f64) -> Result<Self> {
        if !(depth > 0.0 && depth.is_finite()) {
            return Err(Error::param("d", format!("must be > 0, got {depth}")));
        }
        Ok(Cooling { depth })
    }

    pub fn temperature(&self, t: f64) -> f64 {
        self.depth / (t + 1.0).ln()
    }

    /// Depths of at least one are in the regime where convergence to a
    /// global optimum is guaranteed.
    pub fn guarantees_convergence(&self) -> bool {
        self.depth >= 1.0
    }
}

/// Metropolis acceptance `exp(-max(f_proposal - f_current, 0) / T_t)`.
pub fn acceptance_prob(f_proposal: f64, f_current: f64, t: f64, cooling: &Cooling) -> f64 {
    let delta = f_proposal - f_current;
    if delta <= 0.0 {
        return 1.0;
    }
    (-delta / cooling.temperature(t)).exp()
}

/// Uniform `k`-subset of `0..j` by a partial Durstenfeld shuffle, sorted.
pub fn random_k_subset<R: rand::Rng + ?Sized>(j: usize, k: usize, rng: &mut R) -> Result<Vec<u32>> {
    if k == 0 || k > j {
        return Err(Error::param("K", format!("need 1 <= K <= J, got K={k}, J={j}")));
    }
    let mut perm: Vec<u32> = (0..j as u32).collect();
    for i in 0..k {
        let r = rng.random_range(i..j);
        perm.swap(i, r);
    }
    perm.truncate(k);
    perm.sort_unstable();
    Ok(perm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsaConfig {
    /// Probability of proposing the best response.
    pub p_tilde: f64,
    pub cooling: Cooling,
    pub steps: u64,
    pub seed: u64,
}

impl SsaConfig {
    pub fn new(p_tilde: f64, depth: f64, steps: u64, seed: u64) -> Result<Self> {
        if !(p_tilde > 0.0 && p_tilde < 1.0) {
            return Err(Error::param("p_tilde", format!("must lie in (0, 1), got {p_tilde}")));
        }
        Ok(SsaConfig {
            p_tilde,
            cooling: Cooling::new(depth)?,
            steps,
            seed,
        })
    }
}

impl Default for SsaConfig {
    fn default() -> Self {
        SsaConfig {
            p_tilde: 0.9,
            cooling: Cooling { depth: 1.0 },
            steps: 100_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsaOutcome {
    /// The chain; `placement` / `final_f` describe the last incumbent.
    pub trace: Trace,
    /// Best placement visited and its exact miss.
    pub best: Placement,
    pub best_f: f64,
    /// Step at which `best` was first reached (0 for the start).
    pub best_step: u64,
}

/// Run the stochastic annealer from `b0` for a fixed number of steps.
pub fn run_ssa(b0: Placement, cells: &CellTable, pop: &Popularity, config: &SsaConfig) -> Result<SsaOutcome> {
    let initial_f = evaluate_miss(&b0, cells, pop)?;
    let n = b0.n_caches();
    let (j, k) = (b0.files(), b0.capacity());
    let single_subset = binomial(j, k) == 1;
    let mut rng = seed::rng(config.seed);
    let mut b = b0.clone();
    let mut f = initial_f;
    let mut best = (f, b.clone(), 0u64);
    let mut steps = Vec::with_capacity(config.steps as usize);

    for t in 1..=config.steps {
        let m = rng.random_range(0..n);
        let (resp, q) = game::respond(&b, m, cells, pop, Scope::Truncated, IMPROVEMENT_TOL);
        let (proposal, kind) = if single_subset || rng.random::<f64>() < config.p_tilde {
            (resp.row, ProposalKind::BestResponse)
        } else {
            loop {
                let y = random_k_subset(j, k, &mut rng)?;
                if y != resp.row {
                    break (y, ProposalKind::Random);
                }
            }
        };
        let score = |row: &[u32]| -> f64 { row.iter().map(|&x| pop.prob(x as usize) * q.get(x as usize)).sum() };
        let delta = score(b.row(m)) - score(&proposal);
        let temperature = config.cooling.temperature(t as f64);
        let p = acceptance_prob(f + delta, f, t as f64, &config.cooling);
        let accepted = p >= 1.0 || rng.random::<f64>() < p;
        let changed = accepted && proposal != b.row(m);
        let f_before = f;
        let (added, removed) = if changed {
            let diff = game::row_diff(b.row(m), &proposal);
            b.set_row(m, proposal)?;
            f += delta;
            diff
        } else {
            (Vec::new(), Vec::new())
        };
        if f < best.0 - IMPROVEMENT_TOL {
            best = (f, b.clone(), t);
        }
        steps.push(TraceStep {
            step: t,
            cache: m,
            f_before,
            f_after: f,
            changed,
            added,
            removed,
            anneal: Some(AnnealInfo {
                temperature: Some(temperature),
                tau: None,
                accepted,
                proposal: kind,
            }),
        });
    }
    let final_f = evaluate_miss(&b, cells, pop)?;
    let best_f = evaluate_miss(&best.1, cells, pop)?;
    Ok(SsaOutcome {
        trace: Trace {
            initial: Some(b0),
            initial_f,
            steps,
            placement: b,
            final_f,
            termination: Termination::Budget,
        },
        best: best.1,
        best_f,
        best_step: best.2,
    })
}

/// Exponential decay of the box floor:
/// `tau_t = tau0 * (tau_final / tau0)^(t / horizon)`. The decay continues
/// past the horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauSchedule {
    pub tau0: f64,
    pub tau_final: f64,
    pub horizon: f64,
}

impl TauSchedule {
    pub fn new(tau0: f64, tau_final: f64, horizon: f64) -> Result<Self> {
        if !(tau0 > 0.0 && tau0 < 0.5) {
            return Err(Error::param("tau0", format!("must lie in (0, 1/2), got {tau0}")));
        }
        if !(tau_final > 0.0 && tau_final < tau0) {
            return Err(Error::param("tau_final", format!("must lie in (0, tau0), got {tau_final}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::param("tau_horizon", format!("must be > 0, got {horizon}")));
        }
        Ok(TauSchedule {
            tau0,
            tau_final,
            horizon,
        })
    }

    pub fn tau(&self, t: f64) -> f64 {
        self.tau0 * (self.tau_final / self.tau0).powf(t / self.horizon)
    }

    /// The starting floor must leave room for a row summing to `K`.
    pub fn check_bounds(&self, files: usize, capacity: usize) -> Result<()> {
        let ratio = capacity as f64 / files as f64;
        let bound = ratio.min(1.0 - ratio);
        if self.tau0 >= bound {
            return Err(Error::param(
                "tau0",
                format!("must be below min(K/J, 1 - K/J) = {bound}, got {}", self.tau0),
            ));
        }
        Ok(())
    }
}

impl Default for TauSchedule {
    fn default() -> Self {
        TauSchedule {
            tau0: 1e-3,
            tau_final: 1e-6,
            horizon: 1500.0,
        }
    }
}

/// Optimal row of the box-relaxed local problem for files ranked by
/// decreasing score: `c` files at `1 - tau`, one pivot at `delta`, the rest
/// at `tau`, with `c = floor((K - tau J) / (1 - 2 tau))`.
pub fn three_level_row(ranking: &[u32], capacity: usize, tau: f64) -> Result<Vec<f64>> {
    let files = ranking.len();
    let (jf, kf) = (files as f64, capacity as f64);
    if capacity == 0 || capacity >= files {
        return Err(Error::param("K", format!("relaxed rows need 1 <= K < J, got K={capacity}, J={files}")));
    }
    if !(tau > 0.0 && tau < 0.5 && tau * jf <= kf) {
        return Err(Error::param("tau", format!("{tau} leaves no feasible row")));
    }
    let c = ((kf - tau * jf) / (1.0 - 2.0 * tau)).floor() as usize;
    let c = c.min(files - 1);
    let delta = kf - (c as f64) * (1.0 - tau) - ((files - c - 1) as f64) * tau;
    let slack = 1e-12;
    if !(delta >= tau - slack && delta <= 1.0 - tau + slack) {
        return Err(Error::PivotOutOfBox { delta, tau });
    }
    let mut row = vec![tau; files];
    for &j in &ranking[..c] {
        row[j as usize] = 1.0 - tau;
    }
    row[ranking[c] as usize] = delta.clamp(tau, 1.0 - tau);
    Ok(row)
}

/// Files sorted by decreasing `a_j q_j`, ties to the lower index.
fn rank_by_score(pop: &Popularity, q: &[f64]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..q.len() as u32).collect();
    let score = |j: u32| pop.prob(j as usize) * q[j as usize];
    order.sort_unstable_by(|&x, &y| score(y).total_cmp(&score(x)).then(x.cmp(&y)));
    order
}

/// Relaxed best response of cache `m` at floor `tau`.
pub fn dsa_best_response(
    r: &RelaxedPlacement,
    m: usize,
    cells: &CellTable,
    pop: &Popularity,
    tau: f64,
) -> Result<Vec<f64>> {
    let q = r.exposure(m, cells)?;
    three_level_row(&rank_by_score(pop, &q), r.capacity(), tau)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsaConfig {
    pub schedule: TauSchedule,
    pub seed: u64,
    pub step_cap: u64,
}

impl Default for DsaConfig {
    fn default() -> Self {
        DsaConfig {
            schedule: TauSchedule::default(),
            seed: 0,
            step_cap: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsaOutcome {
    /// Steps record the multilinear relaxed miss; `placement` and `final_f`
    /// describe the rounded binary placement.
    pub trace: Trace,
    pub relaxed: RelaxedPlacement,
}

/// Run the deterministic annealer from all-zero rows, then round.
pub fn run_dsa(caches: usize, cells: &CellTable, pop: &Popularity, capacity: usize, config: &DsaConfig) -> Result<DsaOutcome> {
    let files = pop.len();
    if cells.n_caches() != caches {
        return Err(Error::DimensionMismatch(format!(
            "{caches} caches requested, cell table has {}",
            cells.n_caches()
        )));
    }
    config.schedule.check_bounds(files, capacity)?;
    let mut r = RelaxedPlacement::zeros(caches, files, capacity)?;
    let initial_f = r.miss(cells, pop)?;
    let mut f = initial_f;
    let mut rng = seed::rng(config.seed);
    let mut unsettled = vec![true; caches];
    let mut n_unsettled = caches;
    let mut steps = Vec::new();
    let mut termination = Termination::StepCap;

    for t in 1..=config.step_cap {
        let m = rng.random_range(0..caches);
        let tau = config.schedule.tau(t as f64);
        let q = r.exposure(m, cells)?;
        let row = three_level_row(&rank_by_score(pop, &q), capacity, tau)?;
        let local = |b: &[f64]| -> f64 { (0..files).map(|j| pop.prob(j) * (1.0 - b[j]) * q[j]).sum() };
        let gain = local(r.row(m)) - local(&row);
        let improved = gain > IMPROVEMENT_TOL;
        let f_before = f;
        if improved {
            r.set_row(m, row)?;
            f -= gain;
        }
        steps.push(TraceStep {
            step: t,
            cache: m,
            f_before,
            f_after: f,
            changed: improved,
            added: Vec::new(),
            removed: Vec::new(),
            anneal: Some(AnnealInfo {
                temperature: None,
                tau: Some(tau),
                accepted: improved,
                proposal: ProposalKind::Relaxed,
            }),
        });
        if improved {
            for &l in cells.neighbors(m)? {
                if !unsettled[l] {
                    unsettled[l] = true;
                    n_unsettled += 1;
                }
            }
        } else if unsettled[m] {
            unsettled[m] = false;
            n_unsettled -= 1;
        }
        if n_unsettled == 0 {
            termination = Termination::Converged;
            break;
        }
    }
    let rounded = r.round()?;
    let final_f = evaluate_miss(&rounded, cells, pop)?;
    Ok(DsaOutcome {
        trace: Trace {
            initial: None,
            initial_f,
            steps,
            placement: rounded,
            final_f,
            termination,
        },
        relaxed: r,
    })
}
