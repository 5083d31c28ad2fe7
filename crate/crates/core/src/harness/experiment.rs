use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Algorithm, ExperimentConfig, PopularitySpec, TopologySpec};
use crate::annealing::{run_dsa, run_ssa, DsaConfig, SsaConfig};
use crate::baselines;
use crate::catalog::{FileSizes, Popularity};
use crate::error::{Error, Result};
use crate::game::{run_dynamics, DynamicsOptions, Trace};
use crate::placement::{evaluate_miss, fill_by_size, Placement};
use crate::seed;
use crate::topology::{CellTable, Topology};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesPoint {
    /// Cache-update attempts so far (requests for request-driven policies).
    pub iteration: u64,
    pub hit: f64,
}

/// Outcome of one algorithm on one replica.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRecord {
    pub config_digest: String,
    pub topology_digest: String,
    pub replica: u32,
    /// Algorithm name, suffixed with `@sigma2=<v>` for size-filled results.
    pub algorithm: String,
    pub series: Vec<SeriesPoint>,
    pub terminal_f: f64,
    pub terminal_hit: f64,
    pub iterations: u64,
    pub termination: String,
    /// Standard error of `terminal_hit` from cell estimation or request
    /// simulation, when known.
    pub std_error: Option<f64>,
    pub caches: usize,
    pub covered_fraction: f64,
    /// Final placement for static policies.
    pub placement: Option<Placement>,
    pub trace: Option<Trace>,
    pub wall_time: Duration,
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config_digest: String,
    pub topology_digest: String,
    pub replica: u32,
    pub algorithm: String,
    pub terminal_f: f64,
    pub terminal_hit: f64,
    pub iterations: u64,
    pub termination: String,
    pub std_error: Option<f64>,
    pub caches: usize,
    pub covered_fraction: f64,
}

impl From<&ResultRecord> for SummaryRow {
    fn from(r: &ResultRecord) -> Self {
        SummaryRow {
            config_digest: r.config_digest.clone(),
            topology_digest: r.topology_digest.clone(),
            replica: r.replica,
            algorithm: r.algorithm.clone(),
            terminal_f: r.terminal_f,
            terminal_hit: r.terminal_hit,
            iterations: r.iterations,
            termination: r.termination.clone(),
            std_error: r.std_error,
            caches: r.caches,
            covered_fraction: r.covered_fraction,
        }
    }
}

/// Short hex digest of a topology's sites and geometry.
pub fn topology_digest(topology: &Topology) -> String {
    let mut bytes = Vec::new();
    topology.write_csv(&mut bytes).expect("writing to memory cannot fail");
    bytes.extend(format!("{:?}", topology.geometry()).as_bytes());
    Sha256::digest(&bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Per-cell miss probabilities `1 - a(U_s)` in cell order.
pub fn cell_misses(b: &Placement, cells: &CellTable, pop: &Popularity) -> Vec<f64> {
    cells
        .cells()
        .iter()
        .map(|cell| {
            let mut files: Vec<u32> = cell.members.iter().flat_map(|&l| b.row(l as usize).iter().copied()).collect();
            files.sort_unstable();
            files.dedup();
            1.0 - files.iter().map(|&j| pop.prob(j as usize)).sum::<f64>()
        })
        .collect()
}

/// Monte Carlo standard error of `sum_s p_s v_s` when the masses were
/// estimated from `cells.covered_samples()` points; `None` for exact
/// tables.
pub fn cell_std_error(values: &[f64], cells: &CellTable) -> Option<f64> {
    let n = cells.covered_samples();
    if n < 2 {
        return None;
    }
    let mean: f64 = cells.cells().iter().zip(values).map(|(c, v)| c.mass * v).sum();
    let second: f64 = cells.cells().iter().zip(values).map(|(c, v)| c.mass * v * v).sum();
    Some(((second - mean * mean).max(0.0) / n as f64).sqrt())
}

/// Standard error of `f(b1) - f(b2)` under cell estimation noise. Both
/// placements share the same sample points, so the error is that of the
/// per-point difference.
pub fn paired_std_error(b1: &Placement, b2: &Placement, cells: &CellTable, pop: &Popularity) -> Option<f64> {
    let d: Vec<f64> = cell_misses(b1, cells, pop)
        .into_iter()
        .zip(cell_misses(b2, cells, pop))
        .map(|(x, y)| x - y)
        .collect();
    cell_std_error(&d, cells)
}

pub fn load_popularity(spec: &PopularitySpec) -> Result<Popularity> {
    match spec {
        PopularitySpec::Zipf { files, gamma } => Popularity::zipf(*files, *gamma),
        PopularitySpec::Import { path } => {
            let file = std::fs::File::open(path).map_err(|source| Error::File {
                path: path.clone(),
                source,
            })?;
            Popularity::from_reader(file)
        }
    }
}

/// Build replica `replica`'s topology.
pub fn build_topology(config: &ExperimentConfig, replica: u32) -> Result<Topology> {
    match &config.topology {
        TopologySpec::Poisson {
            intensity,
            window,
            radius,
        } => Topology::poisson(*intensity, *window, *radius, seed::derive(config.seed, "topology", replica.into())),
        TopologySpec::GridTorus {
            rows,
            cols,
            spacing,
            radius,
        } => Topology::grid_torus(*rows, *cols, *spacing, *radius),
        TopologySpec::Import { path, geometry } => {
            let file = std::fs::File::open(path).map_err(|source| Error::File {
                path: path.clone(),
                source,
            })?;
            Topology::from_csv(file, *geometry)
        }
    }
}

pub fn build_cells(config: &ExperimentConfig, topology: &Topology, replica: u32) -> Result<CellTable> {
    topology.compute_cells(config.samples, seed::derive(config.seed, "cells", replica.into()))
}

/// Intensity and radius fed to the probabilistic baseline: the configured
/// values for Poisson networks, the empirical site density and mean radius
/// otherwise.
fn poisson_equivalent(config: &ExperimentConfig, topology: &Topology) -> (f64, f64) {
    match &config.topology {
        TopologySpec::Poisson { intensity, radius, .. } => (*intensity, *radius),
        _ => {
            let area = topology.geometry().window.area();
            let mean_r = topology.sites().iter().map(|s| s.radius).sum::<f64>() / topology.len() as f64;
            (topology.len() as f64 / area, mean_r)
        }
    }
}

fn trace_series(trace: &Trace) -> Vec<SeriesPoint> {
    let mut out = vec![SeriesPoint {
        iteration: 0,
        hit: 1.0 - trace.initial_f,
    }];
    out.extend(trace.steps.iter().map(|s| SeriesPoint {
        iteration: s.step,
        hit: 1.0 - s.f_after,
    }));
    out
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    digest: &'a str,
    topology: &'a Topology,
    topology_digest: String,
    cells: &'a CellTable,
    pop: &'a Popularity,
    replica: u32,
}

impl Context<'_> {
    fn seed(&self, label: &str) -> u64 {
        seed::derive(self.config.seed, label, self.replica.into())
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        algorithm: String,
        series: Vec<SeriesPoint>,
        terminal_f: f64,
        iterations: u64,
        termination: &str,
        std_error: Option<f64>,
        placement: Option<Placement>,
        trace: Option<Trace>,
        wall_time: Duration,
    ) -> ResultRecord {
        ResultRecord {
            config_digest: self.digest.to_string(),
            topology_digest: self.topology_digest.clone(),
            replica: self.replica,
            algorithm,
            series,
            terminal_f,
            terminal_hit: 1.0 - terminal_f,
            iterations,
            termination: termination.to_string(),
            std_error,
            caches: self.topology.len(),
            covered_fraction: self.cells.covered_fraction(),
            placement,
            trace: if self.config.traces { trace } else { None },
            wall_time,
        }
    }

    fn static_error(&self, b: &Placement) -> Option<f64> {
        cell_std_error(&cell_misses(b, self.cells, self.pop), self.cells)
    }

    fn run(&self, alg: Algorithm) -> Result<ResultRecord> {
        let start = Instant::now();
        let n = self.topology.len();
        let (files, k) = (self.pop.len(), self.config.capacity);
        let name = alg.name().to_string();
        match alg {
            Algorithm::Robr | Algorithm::Rrbr => {
                let opts = DynamicsOptions {
                    seed: self.seed(alg.name()),
                    ..if alg == Algorithm::Robr { self.config.robr } else { self.config.rrbr }
                };
                let trace = run_dynamics(Placement::top_k(n, files, k)?, self.cells, self.pop, &opts)?;
                let err = self.static_error(&trace.placement);
                Ok(self.record(
                    name,
                    trace_series(&trace),
                    trace.final_f,
                    trace.steps.len() as u64,
                    trace.termination.as_str(),
                    err,
                    Some(trace.placement.clone()),
                    Some(trace),
                    start.elapsed(),
                ))
            }
            Algorithm::Ssa => {
                let cfg = SsaConfig {
                    seed: self.seed("ssa"),
                    ..self.config.ssa
                };
                let out = run_ssa(Placement::top_k(n, files, k)?, self.cells, self.pop, &cfg)?;
                let err = self.static_error(&out.best);
                Ok(self.record(
                    name,
                    trace_series(&out.trace),
                    out.best_f,
                    out.trace.steps.len() as u64,
                    out.trace.termination.as_str(),
                    err,
                    Some(out.best),
                    Some(out.trace),
                    start.elapsed(),
                ))
            }
            Algorithm::Dsa => {
                let cfg = DsaConfig {
                    seed: self.seed("dsa"),
                    ..self.config.dsa
                };
                let out = run_dsa(n, self.cells, self.pop, k, &cfg)?;
                let err = self.static_error(&out.trace.placement);
                Ok(self.record(
                    name,
                    trace_series(&out.trace),
                    out.trace.final_f,
                    out.trace.steps.len() as u64,
                    out.trace.termination.as_str(),
                    err,
                    Some(out.trace.placement.clone()),
                    Some(out.trace),
                    start.elapsed(),
                ))
            }
            Algorithm::MostPopular => {
                let b = baselines::most_popular_placement(n, files, k)?;
                let f = evaluate_miss(&b, self.cells, self.pop)?;
                let err = self.static_error(&b);
                Ok(self.record(
                    name,
                    vec![SeriesPoint { iteration: 0, hit: 1.0 - f }],
                    f,
                    0,
                    "static",
                    err,
                    Some(b),
                    None,
                    start.elapsed(),
                ))
            }
            Algorithm::Probabilistic => {
                let (intensity, radius) = poisson_equivalent(self.config, self.topology);
                let marginals = baselines::probabilistic_marginals(self.pop, intensity, radius, k)?;
                let f = baselines::expected_miss_independent(&marginals, self.cells, self.pop)?;
                let sample = baselines::sample_probabilistic_placement(&marginals, n, k, self.seed("probabilistic"))?;
                let max_size = self.cells.cells().iter().map(|c| c.members.len()).max().unwrap_or(0);
                let per_size: Vec<f64> = (0..=max_size)
                    .map(|s| {
                        self.pop
                            .probs()
                            .iter()
                            .zip(&marginals)
                            .map(|(a, b)| a * (1.0 - b).powi(s as i32))
                            .sum()
                    })
                    .collect();
                let values: Vec<f64> = self.cells.cells().iter().map(|c| per_size[c.members.len()]).collect();
                Ok(self.record(
                    name,
                    vec![SeriesPoint { iteration: 0, hit: 1.0 - f }],
                    f,
                    0,
                    "static",
                    cell_std_error(&values, self.cells),
                    Some(sample),
                    None,
                    start.elapsed(),
                ))
            }
            Algorithm::MultiLruOne => {
                let (out, _) = baselines::simulate_multi_lru_one(
                    self.topology,
                    self.pop,
                    k,
                    self.config.lru.requests,
                    self.config.lru.warmup,
                    self.seed("multi-lru-one"),
                )?;
                let series = out
                    .trace
                    .iter()
                    .map(|p| SeriesPoint {
                        iteration: p.request,
                        hit: p.cumulative_hit_ratio,
                    })
                    .collect();
                Ok(self.record(
                    name,
                    series,
                    1.0 - out.hit_ratio,
                    self.config.lru.requests,
                    "budget",
                    Some(out.std_error),
                    None,
                    None,
                    start.elapsed(),
                ))
            }
        }
    }

    /// Size-model variants of a static record, one per configured variance.
    /// Each averages the filled placement's hit over `size_draws` size
    /// realizations; the reported error is the standard error across draws.
    fn fill(&self, base: &ResultRecord) -> Result<Vec<ResultRecord>> {
        let Some(b) = &base.placement else {
            return Ok(Vec::new());
        };
        let draws = self.config.size_draws;
        let mut out = Vec::new();
        for &sigma2 in &self.config.size_variances {
            let start = Instant::now();
            let mut misses = Vec::with_capacity(draws as usize);
            let mut first = None;
            for d in 0..draws {
                // the same seeds for every variance: common random numbers
                let seed = seed::derive(self.seed("sizes"), "draw", d.into());
                let sizes = FileSizes::lognormal(self.pop.len(), sigma2, seed)?;
                let filled = fill_by_size(b, &sizes)?;
                misses.push(evaluate_miss(&filled, self.cells, self.pop)?);
                first.get_or_insert(filled);
            }
            let filled = first.expect("at least one draw");
            let f = misses.iter().sum::<f64>() / draws as f64;
            let err = if draws > 1 {
                let var = misses.iter().map(|x| (x - f).powi(2)).sum::<f64>() / (draws as f64 - 1.0);
                Some((var / draws as f64).sqrt())
            } else {
                self.static_error(&filled)
            };
            out.push(self.record(
                format!("{}@sigma2={sigma2}", base.algorithm),
                vec![SeriesPoint {
                    iteration: base.iterations,
                    hit: 1.0 - f,
                }],
                f,
                base.iterations,
                &base.termination,
                err,
                Some(filled),
                None,
                base.wall_time + start.elapsed(),
            ));
        }
        Ok(out)
    }
}

fn run_replica(config: &ExperimentConfig, digest: &str, pop: &Popularity, replica: u32) -> Result<Vec<ResultRecord>> {
    let topology = build_topology(config, replica)?;
    let cells = build_cells(config, &topology, replica)?;
    let ctx = Context {
        config,
        digest,
        topology_digest: topology_digest(&topology),
        topology: &topology,
        cells: &cells,
        pop,
        replica,
    };
    let mut records = Vec::new();
    for &alg in &config.algorithms {
        let record = ctx.run(alg)?;
        let filled = if alg.is_static() { ctx.fill(&record)? } else { Vec::new() };
        records.push(record);
        records.extend(filled);
    }
    Ok(records)
}

/// Run every replica (in parallel) and return records ordered by replica,
/// then by the configured algorithm order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ResultRecord>> {
    let pop = load_popularity(&config.popularity)?;
    if config.capacity > pop.len() {
        return Err(Error::config(
            "capacity",
            format!("{} exceeds catalog size {}", config.capacity, pop.len()),
        ));
    }
    let digest = config.digest();
    let per_replica: Vec<Vec<ResultRecord>> = (0..config.replicas)
        .into_par_iter()
        .map(|r| run_replica(config, &digest, &pop, r))
        .collect::<Result<_>>()?;
    Ok(per_replica.into_iter().flatten().collect())
}

/// Mean hit per iteration across records; shorter series are padded with
/// their terminal value.
pub fn aggregate_series(records: &[&ResultRecord]) -> Vec<SeriesPoint> {
    let len = records.iter().map(|r| r.series.len()).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let iteration = records
                .iter()
                .filter_map(|r| r.series.get(i))
                .map(|p| p.iteration)
                .max()
                .unwrap_or(i as u64);
            let total: f64 = records
                .iter()
                .map(|r| r.series.get(i).or(r.series.last()).map_or(0.0, |p| p.hit))
                .sum();
            SeriesPoint {
                iteration,
                hit: total / records.len() as f64,
            }
        })
        .collect()
}

fn create(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Write `summary.csv`, one series CSV per record under `series/`, one
/// aggregate CSV per algorithm under `aggregate/`, and traces under
/// `traces/` when recorded.
pub fn emit_series(records: &[ResultRecord], dir: &Path) -> Result<()> {
    use std::io::Write as _;
    if records.is_empty() {
        return Err(Error::NoRecords);
    }
    create_dir(&dir.join("series"))?;
    create_dir(&dir.join("aggregate"))?;

    let mut summary = csv::Writer::from_writer(create(&dir.join("summary.csv"))?);
    for r in records {
        summary.serialize(SummaryRow::from(r))?;
    }
    summary.flush()?;

    for r in records {
        let mut file = create(&dir.join("series").join(format!("{}-r{}.csv", r.algorithm, r.replica)))?;
        writeln!(file, "# series: iteration = cache-update attempts (requests for multi-lru-one), hit = 1 - f")?;
        writeln!(file, "iteration,hit,f")?;
        for p in &r.series {
            writeln!(file, "{},{},{}", p.iteration, p.hit, 1.0 - p.hit)?;
        }
        if let Some(trace) = &r.trace {
            create_dir(&dir.join("traces"))?;
            trace.write_csv(create(&dir.join("traces").join(format!("{}-r{}.csv", r.algorithm, r.replica)))?)?;
        }
        if let Some(b) = &r.placement {
            create_dir(&dir.join("placements"))?;
            b.write_csv(create(&dir.join("placements").join(format!("{}-r{}.csv", r.algorithm, r.replica)))?)?;
        }
    }

    let mut names: Vec<&str> = Vec::new();
    for r in records {
        if !names.contains(&r.algorithm.as_str()) {
            names.push(&r.algorithm);
        }
    }
    for name in names {
        let group: Vec<&ResultRecord> = records.iter().filter(|r| r.algorithm == name).collect();
        let mut file = create(&dir.join("aggregate").join(format!("{name}.csv")))?;
        writeln!(
            file,
            "# aggregate over {} replicas: mean hit per iteration; shorter series padded with their terminal value",
            group.len()
        )?;
        writeln!(file, "iteration,mean_hit")?;
        for p in aggregate_series(&group) {
            writeln!(file, "{},{}", p.iteration, p.hit)?;
        }
    }
    Ok(())
}

/// Read a `summary.csv` written by [`emit_series`].
pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let file = std::fs::File::open(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rdr = csv::Reader::from_reader(file);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}
