//! Experiment configuration files.
//!
//! Configs are TOML documents. Tables and dotted keys are interchangeable,
//! so `topology.kind = "poisson"` and a `[topology]` table with
//! `kind = "poisson"` mean the same thing. Unknown keys are rejected.
//!
//! ```toml
//! schema = 1
//! seed = 7
//! replicas = 4
//! capacity = 3
//! algorithms = ["robr", "rrbr", "most-popular"]
//!
//! topology.kind = "poisson"
//! topology.intensity = 8e-6
//! topology.window = [2000.0, 2000.0]
//! topology.radius = 1000.0
//! topology.samples = 1000000
//!
//! catalog.files = 100
//! catalog.gamma = 1.0
//! ```
//!
//! See the guide's configuration chapter for every key and its default.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::annealing::{Cooling, DsaConfig, SsaConfig, TauSchedule};
use crate::error::{Error, Result};
use crate::game::{DynamicsOptions, ScheduleKind, StopRule};
use crate::topology::{Geometry, GeometryMode, Point, Window};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Algorithm {
    Robr,
    Rrbr,
    Ssa,
    Dsa,
    MostPopular,
    Probabilistic,
    MultiLruOne,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::Robr,
        Algorithm::Rrbr,
        Algorithm::Ssa,
        Algorithm::Dsa,
        Algorithm::MostPopular,
        Algorithm::Probabilistic,
        Algorithm::MultiLruOne,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Robr => "robr",
            Algorithm::Rrbr => "rrbr",
            Algorithm::Ssa => "ssa",
            Algorithm::Dsa => "dsa",
            Algorithm::MostPopular => "most-popular",
            Algorithm::Probabilistic => "probabilistic",
            Algorithm::MultiLruOne => "multi-lru-one",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Algorithm::ALL.into_iter().find(|a| a.name() == name)
    }

    /// Algorithms producing a static slot-model placement.
    pub fn is_static(self) -> bool {
        self != Algorithm::MultiLruOne
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TopologySpec {
    Poisson {
        intensity: f64,
        window: Window,
        radius: f64,
    },
    GridTorus {
        rows: usize,
        cols: usize,
        spacing: f64,
        radius: f64,
    },
    Import {
        path: PathBuf,
        geometry: Geometry,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum PopularitySpec {
    Zipf { files: usize, gamma: f64 },
    Import { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LruSpec {
    pub requests: u64,
    pub warmup: f64,
}

/// A validated experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub replicas: u32,
    pub output: Option<PathBuf>,
    pub capacity: usize,
    pub algorithms: Vec<Algorithm>,
    pub topology: TopologySpec,
    /// Monte Carlo points per cell-table estimate.
    pub samples: u64,
    pub popularity: PopularitySpec,
    /// Log-normal size variances; empty for the plain slot model.
    pub size_variances: Vec<f64>,
    /// Size realizations averaged per variance.
    pub size_draws: u32,
    pub robr: DynamicsOptions,
    pub rrbr: DynamicsOptions,
    pub ssa: SsaConfig,
    pub dsa: DsaConfig,
    pub lru: LruSpec,
    /// Also write full per-step traces.
    pub traces: bool,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawTopology {
    kind: Option<String>,
    intensity: Option<f64>,
    window: Option<Vec<f64>>,
    origin: Option<Vec<f64>>,
    radius: Option<f64>,
    rows: Option<usize>,
    cols: Option<usize>,
    spacing: Option<f64>,
    path: Option<String>,
    geometry: Option<String>,
    samples: Option<u64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawCatalog {
    files: Option<usize>,
    gamma: Option<f64>,
    popularity: Option<String>,
    sizes: Option<String>,
    sigma2: Option<OneOrMany>,
    size_draws: Option<u32>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawDynamics {
    stop: Option<String>,
    step_cap: Option<u64>,
    epsilon: Option<f64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawSsa {
    d: Option<f64>,
    p_tilde: Option<f64>,
    steps: Option<u64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawDsa {
    tau0: Option<f64>,
    tau_final: Option<f64>,
    tau_horizon: Option<f64>,
    step_cap: Option<u64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawLru {
    requests: Option<u64>,
    warmup: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema: Option<u32>,
    seed: Option<u64>,
    replicas: Option<u32>,
    output: Option<String>,
    capacity: Option<usize>,
    algorithms: Option<Vec<String>>,
    traces: Option<bool>,
    topology: Option<RawTopology>,
    catalog: Option<RawCatalog>,
    robr: Option<RawDynamics>,
    rrbr: Option<RawDynamics>,
    ssa: Option<RawSsa>,
    dsa: Option<RawDsa>,
    lru: Option<RawLru>,
}

fn require<T>(value: Option<T>, field: &str) -> Result<T> {
    value.ok_or_else(|| Error::config(field, "missing"))
}

fn positive(value: f64, field: &str) -> Result<f64> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(Error::config(field, format!("must be > 0, got {value}")))
    }
}

fn pair(values: Vec<f64>, field: &str) -> Result<(f64, f64)> {
    match values.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::config(field, format!("expected two numbers, got {}", values.len()))),
    }
}

fn resolve(base: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn dynamics(raw: Option<RawDynamics>, mut opts: DynamicsOptions, field: &str) -> Result<DynamicsOptions> {
    let raw = raw.unwrap_or_default();
    if let Some(stop) = raw.stop {
        opts.stop = match stop.as_str() {
            "flags" => StopRule::Flags,
            "consecutive" => StopRule::Consecutive,
            other => {
                return Err(Error::config(
                    format!("{field}.stop"),
                    format!("unknown rule `{other}`, expected `flags` or `consecutive`"),
                ))
            }
        };
    }
    if let Some(cap) = raw.step_cap {
        if cap == 0 {
            return Err(Error::config(format!("{field}.step_cap"), "must be >= 1"));
        }
        opts.step_cap = cap;
    }
    if let Some(eps) = raw.epsilon {
        opts.epsilon = Some(positive(eps, &format!("{field}.epsilon"))?);
    }
    Ok(opts)
}

impl ExperimentConfig {
    /// Parse a config; relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let field = message
                .split('`')
                .nth(1)
                .filter(|_| message.starts_with("unknown field"))
                .unwrap_or("config")
                .to_string();
            Error::config(field, message)
        })?;
        Self::from_raw(raw, base_dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    fn from_raw(raw: RawConfig, base: &Path) -> Result<Self> {
        let schema = raw.schema.unwrap_or(SCHEMA_VERSION);
        if schema != SCHEMA_VERSION {
            return Err(Error::config("schema", format!("unsupported version {schema}, expected {SCHEMA_VERSION}")));
        }
        let replicas = raw.replicas.unwrap_or(1);
        if replicas == 0 {
            return Err(Error::config("replicas", "must be >= 1"));
        }
        let capacity = require(raw.capacity, "capacity")?;
        if capacity == 0 {
            return Err(Error::config("capacity", "must be >= 1"));
        }
        let names = require(raw.algorithms, "algorithms")?;
        if names.is_empty() {
            return Err(Error::config("algorithms", "list at least one algorithm"));
        }
        let mut algorithms = Vec::new();
        for name in names {
            let alg = Algorithm::parse(&name).ok_or_else(|| {
                let known: Vec<&str> = Algorithm::ALL.iter().map(|a| a.name()).collect();
                Error::config("algorithms", format!("unknown algorithm `{name}`, expected one of {}", known.join(", ")))
            })?;
            if algorithms.contains(&alg) {
                return Err(Error::config("algorithms", format!("`{name}` listed twice")));
            }
            algorithms.push(alg);
        }

        let t = raw.topology.unwrap_or_default();
        let samples = t.samples.unwrap_or(1_000_000);
        if samples == 0 {
            return Err(Error::config("topology.samples", "must be >= 1"));
        }
        let kind = require(t.kind, "topology.kind")?;
        let topology = match kind.as_str() {
            "poisson" => {
                let (w, h) = pair(t.window.unwrap_or_else(|| vec![2000.0, 2000.0]), "topology.window")?;
                let window = Window::new(w, h).map_err(|e| Error::config("topology.window", e.to_string()))?;
                TopologySpec::Poisson {
                    intensity: positive(require(t.intensity, "topology.intensity")?, "topology.intensity")?,
                    window,
                    radius: positive(require(t.radius, "topology.radius")?, "topology.radius")?,
                }
            }
            "grid-torus" => {
                let rows = require(t.rows, "topology.rows")?;
                let cols = require(t.cols, "topology.cols")?;
                if rows == 0 || cols == 0 {
                    return Err(Error::config("topology.rows", "rows and cols must be >= 1"));
                }
                TopologySpec::GridTorus {
                    rows,
                    cols,
                    spacing: positive(require(t.spacing, "topology.spacing")?, "topology.spacing")?,
                    radius: positive(require(t.radius, "topology.radius")?, "topology.radius")?,
                }
            }
            "import" => {
                let path = resolve(base, &require(t.path, "topology.path")?);
                if !path.is_file() {
                    return Err(Error::config("topology.path", format!("{} does not exist", path.display())));
                }
                let (w, h) = pair(require(t.window, "topology.window")?, "topology.window")?;
                let (ox, oy) = pair(t.origin.unwrap_or_else(|| vec![0.0, 0.0]), "topology.origin")?;
                let window = Window::with_origin(Point::new(ox, oy), w, h)
                    .map_err(|e| Error::config("topology.window", e.to_string()))?;
                let mode = match t.geometry.as_deref().unwrap_or("plane") {
                    "plane" => GeometryMode::Plane,
                    "torus" => GeometryMode::Torus,
                    other => {
                        return Err(Error::config(
                            "topology.geometry",
                            format!("unknown geometry `{other}`, expected `plane` or `torus`"),
                        ))
                    }
                };
                TopologySpec::Import {
                    path,
                    geometry: Geometry { mode, window },
                }
            }
            other => {
                return Err(Error::config(
                    "topology.kind",
                    format!("unknown kind `{other}`, expected `poisson`, `grid-torus` or `import`"),
                ))
            }
        };

        let c = raw.catalog.unwrap_or_default();
        let popularity = match c.popularity {
            Some(p) => {
                let path = resolve(base, &p);
                if !path.is_file() {
                    return Err(Error::config("catalog.popularity", format!("{} does not exist", path.display())));
                }
                PopularitySpec::Import { path }
            }
            None => {
                let files = require(c.files, "catalog.files")?;
                if files == 0 {
                    return Err(Error::config("catalog.files", "must be >= 1"));
                }
                let gamma = c.gamma.unwrap_or(1.0);
                if !(gamma >= 0.0 && gamma.is_finite()) {
                    return Err(Error::config("catalog.gamma", format!("must be >= 0, got {gamma}")));
                }
                if capacity > files {
                    return Err(Error::config("capacity", format!("{capacity} exceeds catalog.files = {files}")));
                }
                PopularitySpec::Zipf { files, gamma }
            }
        };
        let size_variances = match c.sizes.as_deref().unwrap_or("none") {
            "none" => {
                if c.sigma2.is_some() {
                    return Err(Error::config("catalog.sigma2", "set catalog.sizes = \"lognormal\" to use it"));
                }
                Vec::new()
            }
            "lognormal" => {
                let v = match require(c.sigma2, "catalog.sigma2")? {
                    OneOrMany::One(x) => vec![x],
                    OneOrMany::Many(v) => v,
                };
                if v.is_empty() || v.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                    return Err(Error::config("catalog.sigma2", "need one or more variances >= 0"));
                }
                v
            }
            other => {
                return Err(Error::config(
                    "catalog.sizes",
                    format!("unknown size model `{other}`, expected `none` or `lognormal`"),
                ))
            }
        };

        let size_draws = c.size_draws.unwrap_or(1);
        if size_draws == 0 {
            return Err(Error::config("catalog.size_draws", "must be >= 1"));
        }

        let robr = dynamics(raw.robr, DynamicsOptions::robr(0), "robr")?;
        let mut rrbr = dynamics(raw.rrbr, DynamicsOptions::rrbr(), "rrbr")?;
        rrbr.schedule = ScheduleKind::RoundRobin;

        let s = raw.ssa.unwrap_or_default();
        let defaults = SsaConfig::default();
        let p_tilde = s.p_tilde.unwrap_or(defaults.p_tilde);
        if !(p_tilde > 0.0 && p_tilde < 1.0) {
            return Err(Error::config("ssa.p_tilde", format!("must lie in (0, 1), got {p_tilde}")));
        }
        let depth = positive(s.d.unwrap_or(defaults.cooling.depth), "ssa.d")?;
        let ssa = SsaConfig {
            p_tilde,
            cooling: Cooling { depth },
            steps: s.steps.unwrap_or(defaults.steps),
            seed: 0,
        };

        let d = raw.dsa.unwrap_or_default();
        let dd = TauSchedule::default();
        let schedule = TauSchedule::new(
            d.tau0.unwrap_or(dd.tau0),
            d.tau_final.unwrap_or(dd.tau_final),
            d.tau_horizon.unwrap_or(dd.horizon),
        )
        .map_err(|e| Error::config("dsa", e.to_string()))?;
        let dsa = DsaConfig {
            schedule,
            seed: 0,
            step_cap: d.step_cap.unwrap_or(DsaConfig::default().step_cap),
        };

        let l = raw.lru.unwrap_or_default();
        let lru = LruSpec {
            requests: l.requests.unwrap_or(1_000_000),
            warmup: l.warmup.unwrap_or(0.5),
        };
        if lru.requests == 0 {
            return Err(Error::config("lru.requests", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&lru.warmup) {
            return Err(Error::config("lru.warmup", format!("must lie in [0, 1), got {}", lru.warmup)));
        }

        Ok(ExperimentConfig {
            seed: raw.seed.unwrap_or(0),
            replicas,
            output: raw.output.map(|o| resolve(base, &o)),
            capacity,
            algorithms,
            topology,
            samples,
            popularity,
            size_variances,
            size_draws,
            robr,
            rrbr,
            ssa,
            dsa,
            lru,
            traces: raw.traces.unwrap_or(false),
        })
    }

    /// Hex digest identifying everything that affects results. The output
    /// directory and replica count are excluded so that subsets of a run
    /// share a digest.
    pub fn digest(&self) -> String {
        let mut view = self.clone();
        view.output = None;
        view.replicas = 0;
        let hash = Sha256::digest(format!("{view:?}").as_bytes());
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
