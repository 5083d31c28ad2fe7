//! Acceptance suite. Each test prints one `PASS`/`FAIL` line, written
//! straight to stdout so it shows without `--nocapture`.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use coopcache::annealing::{run_dsa, run_ssa, DsaConfig, SsaConfig};
use coopcache::baselines;
use coopcache::game::{
    best_response_detail, brute_force_best_response, is_nash, NashMethod, Scope, Termination, Trace, ENUMERATION_CAP,
    IMPROVEMENT_TOL,
};
use coopcache::harness::{self, ExperimentConfig, ResultRecord, TopologySpec};
use coopcache::placement::potential_delta;
use coopcache::{evaluate_miss, exposure, local_miss, CellTable, Placement, Popularity, Topology};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, name: &str, pass: bool, elapsed: Duration, detail: &str) {
    let line = format!(
        "criterion {n:>2} {:<4} {name} ({:.1} s): {detail}\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {n} failed: {detail}");
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

const SHIPPED: [&str; 6] = [
    "quick",
    "poisson-baselines",
    "grid-torus",
    "clustered",
    "poisson-matched-density",
    "clustered-sizes",
];

fn shipped_config(name: &str) -> ExperimentConfig {
    let mut config = ExperimentConfig::load(&configs_dir().join(format!("{name}.toml"))).expect("shipped config");
    config.traces = true;
    config
}

type Shared = Arc<(ExperimentConfig, Vec<ResultRecord>)>;

/// Each shipped config runs once per test binary, whichever test asks first.
fn shipped(name: &str) -> Shared {
    static RUNS: OnceLock<Mutex<HashMap<String, Arc<OnceLock<Shared>>>>> = OnceLock::new();
    let slot = RUNS
        .get_or_init(Default::default)
        .lock()
        .unwrap()
        .entry(name.to_string())
        .or_default()
        .clone();
    slot.get_or_init(|| {
        let config = shipped_config(name);
        let records = harness::run_experiment(&config).expect("shipped config runs");
        Arc::new((config, records))
    })
    .clone()
}

fn random_cells(rng: &mut ChaCha8Rng, n: usize) -> CellTable {
    let mut cells: Vec<(Vec<usize>, f64)> = (0..n).map(|m| (vec![m], rng.random_range(0.05..1.0))).collect();
    for _ in 0..rng.random_range(0..2 * n) {
        let mut s: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
        if s.len() < 2 {
            continue;
        }
        s.sort_unstable();
        if cells.iter().any(|(t, _)| *t == s) {
            continue;
        }
        cells.push((s, rng.random_range(0.01..1.0)));
    }
    let total: f64 = cells.iter().map(|(_, p)| p).sum();
    CellTable::from_masses(n, cells.into_iter().map(|(s, p)| (s, p / total))).unwrap()
}

fn random_popularity(rng: &mut ChaCha8Rng, files: usize) -> Popularity {
    let gamma = rng.random_range(0.3..1.5);
    Popularity::zipf(files, gamma).unwrap()
}

fn random_row(rng: &mut ChaCha8Rng, files: usize, k: usize) -> Vec<u32> {
    let mut all: Vec<u32> = (0..files as u32).collect();
    all.shuffle(rng);
    all.truncate(k);
    all
}

fn random_placement(rng: &mut ChaCha8Rng, n: usize, files: usize, k: usize) -> Placement {
    Placement::new(files, k, (0..n).map(|_| random_row(rng, files, k)).collect()).unwrap()
}

#[test]
fn criterion_01_potential_identity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..400 {
        let n = rng.random_range(1..=6);
        let files = rng.random_range(2..=20);
        let k = rng.random_range(1..files);
        let cells = random_cells(&mut rng, n);
        let pop = random_popularity(&mut rng, files);
        let b = random_placement(&mut rng, n, files, k);
        let m = rng.random_range(0..n);
        let next = b.with_row(m, random_row(&mut rng, files, k)).unwrap();
        let d_local = local_miss(&next, m, &cells, &pop).unwrap() - local_miss(&b, m, &cells, &pop).unwrap();
        let d_global = evaluate_miss(&next, &cells, &pop).unwrap() - evaluate_miss(&b, &cells, &pop).unwrap();
        let (pl, pg) = potential_delta(&b, m, next.row(m).to_vec(), &cells, &pop).unwrap();
        worst = worst.max((d_local - d_global).abs()).max((pl - pg).abs());
    }
    let pass = worst <= 1e-12 && start.elapsed() < Duration::from_secs(10);
    verdict(
        1,
        "potential identity",
        pass,
        start.elapsed(),
        &format!("400 instances, max |df_m - df| = {worst:.2e}"),
    );
}

#[test]
fn criterion_02_best_response_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = rng.random_range(1..=5);
        let files = rng.random_range(2..=8);
        let k = rng.random_range(1..=3.min(files - 1));
        let cells = random_cells(&mut rng, n);
        let pop = random_popularity(&mut rng, files);
        let b = random_placement(&mut rng, n, files, k);
        let m = rng.random_range(0..n);
        let threshold = best_response_detail(&b, m, &cells, &pop, Scope::Truncated, IMPROVEMENT_TOL).unwrap();
        let brute = brute_force_best_response(&b, m, &cells, &pop, ENUMERATION_CAP).unwrap();
        let f_threshold = local_miss(&b.with_row(m, threshold.row).unwrap(), m, &cells, &pop).unwrap();
        let f_brute = local_miss(&b.with_row(m, brute).unwrap(), m, &cells, &pop).unwrap();
        worst = worst.max((f_threshold - f_brute).abs());
    }
    let pass = worst <= 1e-12 && start.elapsed() < Duration::from_secs(30);
    verdict(
        2,
        "best-response exactness",
        pass,
        start.elapsed(),
        &format!("500 instances, max |f_m(threshold) - f_m(enumeration)| = {worst:.2e}"),
    );
}

fn replay_monotone(trace: &Trace) -> bool {
    let mut f = trace.initial_f;
    trace.steps.iter().all(|s| {
        let ok = (s.f_before - f).abs() <= 1e-9 && s.f_after <= s.f_before + 1e-12;
        f = s.f_after;
        ok
    })
}

#[test]
fn criterion_03_convergence_and_nash() {
    let start = Instant::now();
    let mut runs = 0;
    let mut failures = Vec::new();
    for name in SHIPPED {
        let shared = shipped(name);
        let (config, records) = (&shared.0, &shared.1);
        let pop = harness::load_popularity(&config.popularity).unwrap();
        let small = coopcache::game::binomial(pop.len(), config.capacity) <= 10_000;
        for r in records.iter().filter(|r| r.algorithm == "robr" || r.algorithm == "rrbr") {
            runs += 1;
            let trace = r.trace.as_ref();
            let converged = r.termination == Termination::Converged.as_str();
            let monotone = trace.is_none_or(replay_monotone);
            let topology = harness::build_topology(config, r.replica).unwrap();
            let cells = harness::build_cells(config, &topology, r.replica).unwrap();
            let b = trace.map(|t| &t.placement).expect("dynamics record traces");
            let method = if small { NashMethod::BruteForce } else { NashMethod::Threshold };
            let nash = is_nash(b, &cells, &pop, method, IMPROVEMENT_TOL).unwrap();
            if !(converged && monotone && nash) {
                failures.push(format!(
                    "{name}/{}/r{}: converged={converged} monotone={monotone} nash={nash}",
                    r.algorithm, r.replica
                ));
            }
        }
    }
    let pass = failures.is_empty() && runs > 0;
    verdict(
        3,
        "convergence and Nash",
        pass,
        start.elapsed(),
        &if pass {
            format!("{runs} dynamics runs over {} shipped configs terminated at Nash with monotone f", SHIPPED.len())
        } else {
            failures.join("; ")
        },
    );
}

#[test]
fn criterion_04_truncation_soundness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let files = 10_000;
    let pops = [
        Popularity::zipf(files, 0.6).unwrap(),
        Popularity::zipf(files, 1.0).unwrap(),
        Popularity::zipf(files, 1.4).unwrap(),
    ];
    let mut worst = 0.0f64;
    for i in 0..200 {
        let n = rng.random_range(1..=6);
        let k = rng.random_range(1..=10);
        let cells = random_cells(&mut rng, n);
        let pop = &pops[i % pops.len()];
        // rows drawn from the head so neighbours overlap and compete
        let rows = (0..n).map(|_| random_row(&mut rng, 4 * k * n, k)).collect();
        let b = Placement::new(files, k, rows).unwrap();
        let m = rng.random_range(0..n);
        let t = best_response_detail(&b, m, &cells, pop, Scope::Truncated, IMPROVEMENT_TOL).unwrap();
        let full = best_response_detail(&b, m, &cells, pop, Scope::FullCatalog, IMPROVEMENT_TOL).unwrap();
        let ft = local_miss(&b.with_row(m, t.row).unwrap(), m, &cells, pop).unwrap();
        let ff = local_miss(&b.with_row(m, full.row).unwrap(), m, &cells, pop).unwrap();
        worst = worst.max((ft - ff).abs());
    }
    let pass = worst <= 1e-12 && start.elapsed() < Duration::from_secs(60);
    verdict(
        4,
        "truncation soundness",
        pass,
        start.elapsed(),
        &format!("200 instances with J = 10^4, max |f_m(truncated) - f_m(full)| = {worst:.2e}"),
    );
}

#[test]
fn criterion_05_tail_masses() {
    let start = Instant::now();
    let pop = Popularity::zipf(100_000, 1.0).unwrap();
    let t620 = pop.tail_mass(620).unwrap();
    let t1240 = pop.tail_mass(1240).unwrap();
    let pass =
        (t620 - 0.4204).abs() <= 5e-4 && (t1240 - 0.3631).abs() <= 5e-4 && start.elapsed() < Duration::from_secs(1);
    verdict(
        5,
        "tail masses",
        pass,
        start.elapsed(),
        &format!("tail(620) = {t620:.5} (0.4204), tail(1240) = {t1240:.5} (0.3631)"),
    );
}

/// Rows of the 4x4 torus placements on 0-based files; `(col, row)` are
/// 1-based grid coordinates.
fn grid_placement(files: usize, local_optimum: bool) -> Placement {
    let rows = (0..16)
        .map(|idx| {
            let (row, col) = (idx / 4 + 1, idx % 4 + 1);
            let red = [(1, 2), (2, 1), (2, 3), (3, 2)].contains(&(col, row));
            let set: [u32; 3] = if local_optimum && red {
                [1, 2, 3]
            } else if local_optimum && (col, row) == (2, 2) {
                [1, 4, 5]
            } else if (col + row) % 2 == 0 {
                [1, 2, 4]
            } else {
                [1, 3, 5]
            };
            set.iter().map(|j| j - 1).collect()
        })
        .collect();
    Placement::new(files, 3, rows).unwrap()
}

/// Swap the checkerboard phase of a symmetric placement.
fn other_phase(b: &Placement) -> Placement {
    let rows = (0..16).map(|idx| b.row(if idx % 4 == 3 { idx - 3 } else { idx + 1 }).to_vec()).collect();
    Placement::new(b.files(), b.capacity(), rows).unwrap()
}

#[test]
fn criterion_06_grid_counterexample() {
    let start = Instant::now();
    let spacing = 700.0 * 2f64.sqrt();
    let topology = Topology::grid_torus(4, 4, spacing, 700.0).unwrap();
    let cells = topology.compute_cells(10_000_000, 606).unwrap();
    let pop = Popularity::zipf(1000, 1.0).unwrap();

    let local = grid_placement(1000, true);
    let symmetric = grid_placement(1000, false);
    // a deviation only counts when it beats three standard errors of the
    // estimated gain
    let mut nash = true;
    let mut worst_z = 0.0f64;
    for m in 0..16 {
        let br = best_response_detail(&local, m, &cells, &pop, Scope::Truncated, IMPROVEMENT_TOL).unwrap();
        if br.changed {
            let dev = local.with_row(m, br.row).unwrap();
            let se = harness::paired_std_error(&local, &dev, &cells, &pop).unwrap();
            let z = br.gain / se;
            worst_z = worst_z.max(z);
            nash &= z <= 3.0;
        }
    }
    let f_local = evaluate_miss(&local, &cells, &pop).unwrap();
    let f_sym = evaluate_miss(&symmetric, &cells, &pop).unwrap();
    let gap = f_local - f_sym;

    let dsa = run_dsa(16, &cells, &pop, 3, &DsaConfig::default()).unwrap();
    let dsa_hit = 1.0 - dsa.trace.final_f;
    let sym_hit = [symmetric.clone(), other_phase(&symmetric)]
        .iter()
        .map(|b| 1.0 - evaluate_miss(b, &cells, &pop).unwrap())
        .min_by(|a, b| (a - dsa_hit).abs().total_cmp(&(b - dsa_hit).abs()))
        .unwrap();
    let dsa_ok = (dsa_hit - sym_hit).abs() <= 1e-9;

    let pass = nash && (2e-4..=5e-3).contains(&gap) && dsa_ok && start.elapsed() < Duration::from_secs(600);
    verdict(
        6,
        "grid counterexample",
        pass,
        start.elapsed(),
        &format!(
            "local-optimum placement Nash within noise = {nash} (max gain/se {worst_z:.2}); hit gap symmetric - local optimum = {gap:.5}; DSA hit {dsa_hit:.6} vs symmetric {sym_hit:.6}"
        ),
    );
}

/// Hit, and per-cell miss values, of each algorithm in the Poisson baseline run.
struct BaselineRun {
    hits: HashMap<String, f64>,
    errors: HashMap<String, f64>,
}

fn baseline_run() -> (Shared, BaselineRun) {
    let shared = shipped("poisson-baselines");
    let (config, records) = (&shared.0, &shared.1);
    let topology = harness::build_topology(config, 0).unwrap();
    let cells = harness::build_cells(config, &topology, 0).unwrap();
    let pop = harness::load_popularity(&config.popularity).unwrap();
    let get = |name: &str| records.iter().find(|r| r.algorithm == name).unwrap();
    let robr = get("robr");
    let robr_b = robr.placement.as_ref().unwrap();
    let robr_cells = harness::cell_misses(robr_b, &cells, &pop);

    let mut hits = HashMap::new();
    let mut errors = HashMap::new();
    for r in records {
        hits.insert(r.algorithm.clone(), r.terminal_hit);
    }
    // standard error of the hit difference between robr and each baseline
    let mp = get("most-popular").placement.clone().unwrap();
    errors.insert("most-popular".into(), harness::paired_std_error(robr_b, &mp, &cells, &pop).unwrap());
    let TopologySpec::Poisson { intensity, radius, .. } = config.topology else {
        panic!("poisson config expected")
    };
    let marginals = baselines::probabilistic_marginals(&pop, intensity, radius, config.capacity).unwrap();
    let diff: Vec<f64> = cells
        .cells()
        .iter()
        .zip(&robr_cells)
        .map(|(c, rm)| {
            let s = c.members.len() as i32;
            let miss: f64 = pop.probs().iter().zip(&marginals).map(|(a, b)| a * (1.0 - b).powi(s)).sum();
            rm - miss
        })
        .collect();
    errors.insert("probabilistic".into(), harness::cell_std_error(&diff, &cells).unwrap());
    let lru_se = get("multi-lru-one").std_error.unwrap();
    errors.insert("multi-lru-one".into(), lru_se.hypot(robr.std_error.unwrap()));
    (shared.clone(), BaselineRun { hits, errors })
}

#[test]
fn criterion_07_baseline_ordering() {
    let start = Instant::now();
    let (_, run) = baseline_run();
    let (robr, rrbr) = (run.hits["robr"], run.hits["rrbr"]);
    let baselines = ["most-popular", "probabilistic", "multi-lru-one"];
    let best_baseline = baselines.iter().map(|b| run.hits[*b]).fold(f64::MIN, f64::max);
    let margins: Vec<String> = baselines
        .iter()
        .map(|b| format!("{b} {:.4} ({:.0} se)", run.hits[*b], (robr - run.hits[*b]) / run.errors[*b]))
        .collect();
    let separated = baselines.iter().all(|b| robr - run.hits[*b] >= 3.0 * run.errors[*b]);
    let pass = robr >= rrbr && rrbr >= best_baseline && separated && start.elapsed() < Duration::from_secs(300);
    verdict(
        7,
        "baseline ordering",
        pass,
        start.elapsed(),
        &format!("robr {robr:.4}, rrbr {rrbr:.4}; {}", margins.join(", ")),
    );
}

fn two_cache_instance() -> (CellTable, Popularity) {
    let cells = CellTable::from_masses(2, [(vec![0], 0.3), (vec![0, 1], 0.4), (vec![1], 0.3)]).unwrap();
    (cells, Popularity::new(vec![2.0 / 3.0, 1.0 / 3.0]).unwrap())
}

#[test]
fn criterion_08_ssa_behaviour() {
    let start = Instant::now();
    let (cells, pop) = two_cache_instance();
    let optimum = [[0u32, 0], [0, 1], [1, 0], [1, 1]]
        .iter()
        .map(|r| evaluate_miss(&Placement::new(2, 1, vec![vec![r[0]], vec![r[1]]]).unwrap(), &cells, &pop).unwrap())
        .fold(f64::MAX, f64::min);
    let (mut visited, mut at_end) = (0, 0);
    for chain in 0..100u64 {
        let config = SsaConfig::new(0.9, 1.0, 100_000, coopcache::seed::derive(8, "ssa-chain", chain)).unwrap();
        let out = run_ssa(Placement::top_k(2, 2, 1).unwrap(), &cells, &pop, &config).unwrap();
        visited += usize::from((out.best_f - optimum).abs() <= 1e-12);
        at_end += usize::from((out.trace.final_f - optimum).abs() <= 1e-12);
    }

    let (shared, run) = baseline_run();
    let ssa_steps = shared.1.iter().find(|r| r.algorithm == "ssa").map_or(0, |r| r.iterations);
    let (robr, rrbr, ssa) = (run.hits["robr"], run.hits["rrbr"], run.hits["ssa"]);
    let agree = (robr - rrbr).abs() <= 1e-9 && (robr - ssa).abs() <= 1e-9;

    let pass = visited == 100 && at_end >= 95 && agree && start.elapsed() < Duration::from_secs(600);
    verdict(
        8,
        "SSA behaviour",
        pass,
        start.elapsed(),
        &format!(
            "two-cache optimum f = {optimum:.4}: visited in {visited}/100 chains, incumbent at step 1e5 in {at_end}/100; Poisson terminal hits robr {robr:.6}, rrbr {rrbr:.6}, ssa {ssa:.6} ({ssa_steps} steps)"
        ),
    );
}

#[test]
fn criterion_09_improvement_bound() {
    let start = Instant::now();
    let (mut steps, mut worst) = (0u64, f64::INFINITY);
    let mut violations = 0;
    for name in ["quick", "poisson-baselines", "grid-torus", "clustered"] {
        let shared = shipped(name);
        let (config, records) = (&shared.0, &shared.1);
        let pop = harness::load_popularity(&config.popularity).unwrap();
        for r in records.iter().filter(|r| r.algorithm == "robr" || r.algorithm == "rrbr") {
            let topology = harness::build_topology(config, r.replica).unwrap();
            let cells = harness::build_cells(config, &topology, r.replica).unwrap();
            let trace = r.trace.as_ref().unwrap();
            let mut b = trace.initial.clone().unwrap();
            for s in &trace.steps {
                if s.changed {
                    let q = exposure(&b, s.cache, &cells).unwrap();
                    let score = |j: u32| pop.prob(j as usize) * q.get(j as usize);
                    let bound = s
                        .added
                        .iter()
                        .flat_map(|&i| s.removed.iter().map(move |&j| (score(i) - score(j)).abs()))
                        .fold(f64::INFINITY, f64::min);
                    let gain = s.f_before - s.f_after;
                    if gain < bound - 1e-12 {
                        violations += 1;
                    }
                    worst = worst.min(gain - bound);
                    steps += 1;
                    let mut row: Vec<u32> = b.row(s.cache).iter().copied().filter(|j| !s.removed.contains(j)).collect();
                    row.extend(&s.added);
                    row.sort_unstable();
                    b.set_row(s.cache, row).unwrap();
                }
            }
            assert_eq!(&b, &trace.placement, "trace replays to its final placement");
        }
    }
    let pass = violations == 0 && steps > 0;
    verdict(
        9,
        "improvement bound",
        pass,
        start.elapsed(),
        &format!("{steps} strict improvements checked, {violations} below the pairwise bound (min slack {worst:.2e})"),
    );
}

#[test]
fn criterion_10_heterogeneous_sizes() {
    let start = Instant::now();
    let shared = shipped("clustered-sizes");
    let mut hits: Vec<(f64, f64)> = shared
        .1
        .iter()
        .filter_map(|r| {
            let sigma2: f64 = r.algorithm.strip_prefix("robr@sigma2=")?.parse().ok()?;
            Some((sigma2, r.terminal_hit))
        })
        .collect();
    hits.sort_by(|a, b| a.0.total_cmp(&b.0));
    let grid: Vec<f64> = hits.iter().map(|h| h.0).collect();
    let monotone = hits.windows(2).all(|w| w[1].1 <= w[0].1);
    let spread = hits.iter().map(|h| h.1).fold(f64::MIN, f64::max) - hits.iter().map(|h| h.1).fold(f64::MAX, f64::min);
    let pass = grid == [0.0, 0.25, 0.5, 1.0] && monotone && spread < 0.02 && start.elapsed() < Duration::from_secs(900);
    let shown: Vec<String> = hits.iter().map(|(s, h)| format!("{s}: {h:.5}")).collect();
    verdict(
        10,
        "heterogeneous sizes",
        pass,
        start.elapsed(),
        &format!("hit by sigma2 {{{}}}, spread {spread:.5}", shown.join(", ")),
    );
}

fn run_to_dir(config: &ExperimentConfig, threads: usize, dir: &Path) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let records = pool.install(|| harness::run_experiment(config)).unwrap();
    harness::emit_series(&records, dir).unwrap();
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_11_determinism() {
    let start = Instant::now();
    let mut config = shipped_config("quick");
    config.replicas = 4;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_to_dir(&config, 1, a.path());
    run_to_dir(&config, 4, b.path());
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    let pass = !ta.is_empty() && ta == tb;
    verdict(
        11,
        "determinism",
        pass,
        start.elapsed(),
        &format!("{} files byte-identical between 1-thread and 4-thread runs", ta.len()),
    );
}
