//! Comparison policies: most-popular placement, probabilistic placement and
//! the request-driven Multi-LRU-One cache.

use std::collections::VecDeque;

use rand::Rng as _;

use crate::catalog::{compensated_sum, Popularity};
use crate::error::{Error, Result};
use crate::placement::Placement;
use crate::seed::{self, Rng};
use crate::topology::{CellKey, CellTable, Point, Topology};

/// Every cache stores files `1..=K`.
pub fn most_popular_placement(caches: usize, files: usize, capacity: usize) -> Result<Placement> {
    Placement::top_k(caches, files, capacity)
}

/// Per-file storage probabilities maximizing the hit probability of a
/// Poisson network of intensity `intensity` where each cache stores file `j`
/// independently with probability `b_j`:
///
/// ```text
/// maximize sum_j a_j (1 - exp(-b_j c)),  c = intensity * pi * radius^2
/// subject to sum_j b_j = K, 0 <= b_j <= 1
/// ```
///
/// The optimum is `b_j = clamp(ln(a_j c / nu) / c, 0, 1)` with the
/// multiplier `nu` found by bisection.
pub fn probabilistic_marginals(pop: &Popularity, intensity: f64, radius: f64, capacity: usize) -> Result<Vec<f64>> {
    let c = intensity * std::f64::consts::PI * radius * radius;
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::param(
            "intensity",
            format!("expected coverage intensity * pi * r^2 must be > 0, got {c}"),
        ));
    }
    let files = pop.len();
    if capacity == 0 {
        return Err(Error::param("K", "capacity must be at least one slot"));
    }
    if capacity >= files {
        return Ok(vec![1.0; files]);
    }
    let positive = pop.probs().iter().filter(|&&a| a > 0.0).count();
    if positive < capacity {
        return Err(Error::param(
            "K",
            format!("only {positive} files have positive popularity, cannot fill {capacity} slots"),
        ));
    }
    let marginals = |log_nu: f64| -> Vec<f64> {
        pop.probs()
            .iter()
            .map(|&a| {
                if a <= 0.0 {
                    0.0
                } else {
                    (((a * c).ln() - log_nu) / c).clamp(0.0, 1.0)
                }
            })
            .collect()
    };
    let total = |log_nu: f64| compensated_sum(marginals(log_nu));
    let a_max = pop.prob(0);
    let a_min = pop.probs()[..positive].last().copied().unwrap_or(a_max);
    // at hi every b_j is 0, at lo every positive file has b_j = 1
    let mut hi = (a_max * c).ln();
    let mut lo = (a_min * c).ln() - c - 1.0;
    let k = capacity as f64;
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        let s = total(mid);
        if (s - k).abs() <= 1e-12 {
            lo = mid;
            hi = mid;
            break;
        }
        if s > k {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
            break;
        }
    }
    let b = marginals(0.5 * (lo + hi));
    let s = compensated_sum(b.iter().copied());
    if (s - k).abs() > 1e-10 {
        return Err(Error::MarginalSum { sum: s, capacity });
    }
    Ok(b)
}

/// Miss probability when every cache draws its row independently with the
/// given per-file marginals: the multilinear objective with every row equal
/// to `marginals`.
pub fn expected_miss_independent(marginals: &[f64], cells: &CellTable, pop: &Popularity) -> Result<f64> {
    if marginals.len() != pop.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} marginals for {} files",
            marginals.len(),
            pop.len()
        )));
    }
    let max_size = cells.cells().iter().map(|c| c.members.len()).max().unwrap_or(0);
    // miss_by_size[n] = sum_j a_j (1 - b_j)^n
    let miss_by_size: Vec<f64> = (0..=max_size)
        .map(|n| {
            compensated_sum(
                pop.probs()
                    .iter()
                    .zip(marginals)
                    .map(|(a, b)| a * (1.0 - b).powi(n as i32)),
            )
        })
        .collect();
    Ok(compensated_sum(
        cells.cells().iter().map(|c| c.mass * miss_by_size[c.members.len()]),
    ))
}

/// Systematic sample of exactly `K` distinct files whose inclusion
/// probabilities are `marginals`.
pub fn systematic_sample<R: rand::Rng + ?Sized>(marginals: &[f64], capacity: usize, rng: &mut R) -> Vec<u32> {
    let total = compensated_sum(marginals.iter().copied());
    let scale = capacity as f64 / total;
    let u: f64 = rng.random();
    let mut row = Vec::with_capacity(capacity);
    let mut cum = 0.0;
    let mut next = 0usize;
    for (j, &b) in marginals.iter().enumerate() {
        cum += b * scale;
        while next < capacity && u + (next as f64) < cum {
            if row.last() != Some(&(j as u32)) {
                row.push(j as u32);
            }
            next += 1;
        }
    }
    if row.len() < capacity {
        // rounding left a slot empty; fill with the likeliest unused files
        let mut order: Vec<u32> = (0..marginals.len() as u32).collect();
        order.sort_by(|&x, &y| marginals[y as usize].total_cmp(&marginals[x as usize]).then(x.cmp(&y)));
        for j in order {
            if row.len() == capacity {
                break;
            }
            if !row.contains(&j) {
                row.push(j);
            }
        }
    }
    row.sort_unstable();
    row
}

/// Independent systematic samples for every cache.
pub fn sample_probabilistic_placement(marginals: &[f64], caches: usize, capacity: usize, seed: u64) -> Result<Placement> {
    let sum = compensated_sum(marginals.iter().copied());
    if (sum - capacity as f64).abs() > 1e-9 {
        return Err(Error::MarginalSum { sum, capacity });
    }
    if let Some(b) = marginals.iter().find(|b| !(0.0..=1.0 + 1e-12).contains(*b)) {
        return Err(Error::param("marginals", format!("value {b} outside [0, 1]")));
    }
    let rows = (0..caches)
        .map(|m| systematic_sample(marginals, capacity, &mut seed::stream(seed, "probabilistic/cache", m as u64)))
        .collect();
    Placement::new(marginals.len(), capacity, rows)
}

/// Uniform points on the covered part of the window, by rejection.
pub struct UserSampler<'a> {
    topology: &'a Topology,
    rng: Rng,
}

impl<'a> UserSampler<'a> {
    /// Consecutive rejections after which the window is deemed uncovered.
    const MAX_REJECTIONS: u32 = 1_000_000;

    pub fn new(topology: &'a Topology, seed: u64) -> Self {
        UserSampler {
            topology,
            rng: seed::rng(seed),
        }
    }

    /// Next covered point and the caches covering it.
    pub fn sample_into(&mut self, covering: &mut CellKey) -> Result<Point> {
        for _ in 0..Self::MAX_REJECTIONS {
            let p = self.topology.geometry().sample_point(&mut self.rng);
            self.topology.covering_into(p, covering);
            if !covering.is_empty() {
                return Ok(p);
            }
        }
        Err(Error::UncoveredWindow)
    }

    pub fn sample(&mut self) -> Result<(Point, CellKey)> {
        let mut key = CellKey::new();
        let p = self.sample_into(&mut key)?;
        Ok((p, key))
    }
}

/// Cumulative popularity for inverse-CDF file draws.
struct FileDraw {
    cdf: Vec<f64>,
}

impl FileDraw {
    fn new(pop: &Popularity) -> Self {
        let mut acc = 0.0;
        let cdf = pop
            .probs()
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        FileDraw { cdf }
    }

    fn draw(&self, rng: &mut Rng) -> usize {
        let u: f64 = rng.random::<f64>() * self.cdf.last().copied().unwrap_or(1.0);
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }
}

/// One point of a hit-ratio trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitPoint {
    /// 1-based request index.
    pub request: u64,
    /// Hits over requests `1..=request`.
    pub cumulative_hit_ratio: f64,
    pub post_warmup: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutcome {
    /// Hit ratio over the post-warmup requests.
    pub hit_ratio: f64,
    /// Batch-means standard error of `hit_ratio`.
    pub std_error: f64,
    pub measured_requests: u64,
    pub trace: Vec<HitPoint>,
}

/// Recency-ordered contents of one cache, most recent first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LruCache {
    entries: VecDeque<u32>,
}

impl LruCache {
    pub fn entries(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, file: u32) -> bool {
        self.entries.contains(&file)
    }

    fn touch(&mut self, file: u32) {
        if let Some(pos) = self.entries.iter().position(|&x| x == file) {
            self.entries.remove(pos);
            self.entries.push_front(file);
        }
    }

    fn insert(&mut self, file: u32, capacity: usize) {
        self.entries.push_front(file);
        if self.entries.len() > capacity {
            self.entries.pop_back();
        }
    }
}

const BATCHES: u64 = 50;
const TRACE_POINTS: u64 = 1000;

struct HitTally {
    warmup: u64,
    batch_len: u64,
    hits: u64,
    measured_hits: u64,
    batch_hits: u64,
    batch_means: Vec<f64>,
    stride: u64,
    trace: Vec<HitPoint>,
}

impl HitTally {
    fn new(n_requests: u64, warmup: u64) -> Self {
        let measured = n_requests - warmup;
        HitTally {
            warmup,
            batch_len: (measured / BATCHES).max(1),
            hits: 0,
            measured_hits: 0,
            batch_hits: 0,
            batch_means: Vec::new(),
            stride: (n_requests / TRACE_POINTS).max(1),
            trace: Vec::new(),
        }
    }

    fn record(&mut self, index: u64, hit: bool, n_requests: u64) {
        self.hits += u64::from(hit);
        let post = index > self.warmup;
        if post {
            self.measured_hits += u64::from(hit);
            self.batch_hits += u64::from(hit);
            if (index - self.warmup).is_multiple_of(self.batch_len) {
                self.batch_means.push(self.batch_hits as f64 / self.batch_len as f64);
                self.batch_hits = 0;
            }
        }
        if index.is_multiple_of(self.stride) || index == n_requests {
            self.trace.push(HitPoint {
                request: index,
                cumulative_hit_ratio: self.hits as f64 / index as f64,
                post_warmup: post,
            });
        }
    }

    fn finish(self, n_requests: u64) -> SimulationOutcome {
        let measured = n_requests - self.warmup;
        let hit_ratio = self.measured_hits as f64 / measured as f64;
        let k = self.batch_means.len() as f64;
        let std_error = if self.batch_means.len() >= 2 {
            let mean = self.batch_means.iter().sum::<f64>() / k;
            let var = self.batch_means.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
            (var / k).sqrt()
        } else {
            (hit_ratio * (1.0 - hit_ratio) / measured as f64).sqrt()
        };
        SimulationOutcome {
            hit_ratio,
            std_error,
            measured_requests: measured,
            trace: self.trace,
        }
    }
}

fn check_run(n_requests: u64, warmup_fraction: f64) -> Result<u64> {
    if n_requests == 0 {
        return Err(Error::param("requests", "need at least one request"));
    }
    if !(0.0..1.0).contains(&warmup_fraction) {
        return Err(Error::param("warmup", format!("fraction must lie in [0, 1), got {warmup_fraction}")));
    }
    Ok(((n_requests as f64 * warmup_fraction).floor() as u64).min(n_requests - 1))
}

/// Multi-LRU-One: a user checks every covering cache. On a hit one holder,
/// chosen uniformly, refreshes the file; on a miss one covering cache,
/// chosen uniformly, inserts it and evicts its least recent entry.
pub fn simulate_multi_lru_one(
    topology: &Topology,
    pop: &Popularity,
    capacity: usize,
    n_requests: u64,
    warmup_fraction: f64,
    seed: u64,
) -> Result<(SimulationOutcome, Vec<LruCache>)> {
    if capacity == 0 {
        return Err(Error::param("K", "capacity must be at least one slot"));
    }
    let warmup = check_run(n_requests, warmup_fraction)?;
    let mut users = UserSampler::new(topology, seed::derive(seed, "lru/users", 0));
    let mut rng = seed::stream(seed, "lru/choices", 0);
    let files = FileDraw::new(pop);
    let mut caches = vec![LruCache::default(); topology.len()];
    let mut covering = CellKey::new();
    let mut holders: Vec<u32> = Vec::new();
    let mut tally = HitTally::new(n_requests, warmup);

    for index in 1..=n_requests {
        users.sample_into(&mut covering)?;
        let file = files.draw(&mut rng) as u32;
        holders.clear();
        holders.extend(covering.iter().copied().filter(|&l| caches[l as usize].contains(file)));
        let hit = !holders.is_empty();
        if hit {
            let l = holders[rng.random_range(0..holders.len())];
            caches[l as usize].touch(file);
        } else {
            let l = covering[rng.random_range(0..covering.len())];
            caches[l as usize].insert(file, capacity);
        }
        tally.record(index, hit, n_requests);
    }
    Ok((tally.finish(n_requests), caches))
}

/// Hit ratio of a fixed placement estimated from simulated requests.
pub fn simulate_static(
    topology: &Topology,
    b: &Placement,
    pop: &Popularity,
    n_requests: u64,
    seed: u64,
) -> Result<SimulationOutcome> {
    if b.n_caches() != topology.len() || b.files() != pop.len() {
        return Err(Error::DimensionMismatch("placement does not match topology or catalog".into()));
    }
    check_run(n_requests, 0.0)?;
    let mut users = UserSampler::new(topology, seed::derive(seed, "static/users", 0));
    let mut rng = seed::stream(seed, "static/files", 0);
    let files = FileDraw::new(pop);
    let mut covering = CellKey::new();
    let mut tally = HitTally::new(n_requests, 0);
    for index in 1..=n_requests {
        users.sample_into(&mut covering)?;
        let file = files.draw(&mut rng);
        let hit = covering.iter().any(|&l| b.stores(l as usize, file));
        tally.record(index, hit, n_requests);
    }
    let mut out = tally.finish(n_requests);
    let h = out.hit_ratio;
    // requests are i.i.d. here, so the binomial error is exact
    out.std_error = (h * (1.0 - h) / n_requests as f64).sqrt();
    Ok(out)
}
