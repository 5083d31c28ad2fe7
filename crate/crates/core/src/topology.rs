//! Cache networks and their coverage cells.
//!
//! A coverage cell is the region covered by exactly one subset `s` of the
//! caches. Everything downstream consumes only the cell masses `p_s`
//! (conditional on coverage), so the [`CellTable`] is the single source of
//! geometric truth. Masses are estimated by stratified Monte Carlo sampling
//! of the window.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::seed;

/// Sorted cache indices of a cell.
pub type CellKey = SmallVec<[u32; 8]>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// Axis-aligned rectangle in metres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub origin: Point,
    pub width: f64,
    pub height: f64,
}

impl Window {
    pub fn new(width: f64, height: f64) -> Result<Self> {
        Window::with_origin(Point::new(0.0, 0.0), width, height)
    }

    pub fn with_origin(origin: Point, width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
            return Err(Error::param(
                "window",
                format!("must be strictly positive, got {width} x {height}"),
            ));
        }
        Ok(Window {
            origin,
            width,
            height,
        })
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeometryMode {
    /// Coverage is clipped at the window boundary.
    Plane,
    /// The window wraps around in both axes.
    Torus,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub mode: GeometryMode,
    pub window: Window,
}

impl Geometry {
    pub fn plane(window: Window) -> Self {
        Geometry {
            mode: GeometryMode::Plane,
            window,
        }
    }

    pub fn torus(window: Window) -> Self {
        Geometry {
            mode: GeometryMode::Torus,
            window,
        }
    }

    /// Per-axis separation, wrapped to at most half the window on a torus.
    #[inline]
    pub fn offset(&self, a: Point, b: Point) -> (f64, f64) {
        let dx = (a.x - b.x).abs();
        let dy = (a.y - b.y).abs();
        match self.mode {
            GeometryMode::Plane => (dx, dy),
            GeometryMode::Torus => {
                let w = self.window.width;
                let h = self.window.height;
                let dx = dx % w;
                let dy = dy % h;
                (dx.min(w - dx), dy.min(h - dy))
            }
        }
    }

    #[inline]
    pub fn distance_sq(&self, a: Point, b: Point) -> f64 {
        let (dx, dy) = self.offset(a, b);
        dx * dx + dy * dy
    }

    pub fn distance(&self, a: Point, b: Point) -> f64 {
        self.distance_sq(a, b).sqrt()
    }

    /// Uniform point in the window.
    pub fn sample_point<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Point {
        let w = &self.window;
        Point::new(
            w.origin.x + rng.random::<f64>() * w.width,
            w.origin.y + rng.random::<f64>() * w.height,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheSite {
    /// External 1-based identifier.
    pub id: u32,
    pub position: Point,
    pub radius: f64,
}

/// Cache sites placed in a geometry. Caches are addressed internally by
/// their position in [`Topology::sites`].
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    sites: Vec<CacheSite>,
    geometry: Geometry,
}

impl Topology {
    pub fn new(sites: Vec<CacheSite>, geometry: Geometry) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::EmptyTopology);
        }
        let n = sites.len() as u32;
        let mut seen = vec![false; sites.len()];
        for (i, site) in sites.iter().enumerate() {
            if !(site.radius > 0.0 && site.radius.is_finite()) {
                return Err(Error::NonPositiveRadius {
                    line: i + 1,
                    id: site.id,
                    radius: site.radius,
                });
            }
            if site.id == 0 || site.id > n {
                return Err(Error::param(
                    "id",
                    format!("cache id {} outside 1..={n}", site.id),
                ));
            }
            let slot = &mut seen[(site.id - 1) as usize];
            if *slot {
                return Err(Error::DuplicateId {
                    line: i + 1,
                    id: site.id,
                });
            }
            *slot = true;
        }
        Ok(Topology { sites, geometry })
    }

    /// Homogeneous Poisson process of `intensity` points per square metre.
    pub fn poisson(intensity: f64, window: Window, radius: f64, seed: u64) -> Result<Self> {
        if !(intensity > 0.0 && intensity.is_finite()) {
            return Err(Error::param("intensity", format!("must be > 0, got {intensity}")));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::param("radius", format!("must be > 0, got {radius}")));
        }
        let mut rng = seed::rng(seed);
        let mean = intensity * window.area();
        let count = Poisson::new(mean)
            .map_err(|e| Error::param("intensity", e.to_string()))?
            .sample(&mut rng) as usize;
        if count == 0 {
            return Err(Error::EmptyTopology);
        }
        let geometry = Geometry::plane(window);
        let sites = (0..count)
            .map(|i| CacheSite {
                id: i as u32 + 1,
                position: geometry.sample_point(&mut rng),
                radius,
            })
            .collect();
        Topology::new(sites, geometry)
    }

    /// `rows x cols` lattice with pitch `spacing` on a torus of size
    /// `(cols * spacing) x (rows * spacing)`. Cache `i * cols + j + 1` sits at
    /// the centre of lattice cell `(i, j)`.
    pub fn grid_torus(rows: usize, cols: usize, spacing: f64, radius: f64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::param("rows/cols", "grid needs at least one row and column"));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::param("spacing", format!("must be > 0, got {spacing}")));
        }
        let window = Window::new(cols as f64 * spacing, rows as f64 * spacing)?;
        let mut sites = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                sites.push(CacheSite {
                    id: (i * cols + j + 1) as u32,
                    position: Point::new((j as f64 + 0.5) * spacing, (i as f64 + 0.5) * spacing),
                    radius,
                });
            }
        }
        Topology::new(sites, Geometry::torus(window))
    }

    /// Read sites from CSV with header `id,x,y,radius`. Input order is kept.
    pub fn from_csv<R: Read>(reader: R, geometry: Geometry) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["id", "x", "y", "radius"];
        if headers.len() != expected.len() || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `id,x,y,radius`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let mut sites = Vec::new();
        let mut lines = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            if record.len() != 4 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 4 fields, found {}", record.len()),
                });
            }
            let field = |k: usize| -> Result<f64> {
                record[k].parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    message: format!("field `{}` = `{}`: {e}", expected[k], &record[k]),
                })
            };
            let id: u32 = record[0].parse().map_err(|e| Error::Parse {
                line,
                message: format!("field `id` = `{}`: {e}", &record[0]),
            })?;
            let site = CacheSite {
                id,
                position: Point::new(field(1)?, field(2)?),
                radius: field(3)?,
            };
            if !(site.radius > 0.0 && site.radius.is_finite()) {
                return Err(Error::NonPositiveRadius {
                    line,
                    id,
                    radius: site.radius,
                });
            }
            if let Some(prev) = sites.iter().position(|s: &CacheSite| s.id == id) {
                let _ = prev;
                return Err(Error::DuplicateId { line, id });
            }
            sites.push(site);
            lines.push(line);
        }
        if sites.is_empty() {
            return Err(Error::EmptyTopology);
        }
        let n = sites.len() as u32;
        let mut present = vec![false; sites.len()];
        for (site, &line) in sites.iter().zip(&lines) {
            if site.id == 0 || site.id > n {
                return Err(Error::Parse {
                    line,
                    message: format!("cache id {} outside 1..={n}", site.id),
                });
            }
            present[(site.id - 1) as usize] = true;
        }
        if let Some(missing) = present.iter().position(|p| !p) {
            return Err(Error::NonContiguousIds {
                missing: missing as u32 + 1,
            });
        }
        Topology::new(sites, geometry)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id", "x", "y", "radius"])?;
        for s in &self.sites {
            w.write_record([
                s.id.to_string(),
                s.position.x.to_string(),
                s.position.y.to_string(),
                s.radius.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn sites(&self) -> &[CacheSite] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    /// Index of the site with external id `id`.
    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.sites.iter().position(|s| s.id == id)
    }

    /// Indices of the caches covering `p`, ascending, written into `out`.
    #[inline]
    pub fn covering_into(&self, p: Point, out: &mut CellKey) {
        out.clear();
        for (i, s) in self.sites.iter().enumerate() {
            if self.geometry.distance_sq(p, s.position) <= s.radius * s.radius {
                out.push(i as u32);
            }
        }
    }

    pub fn covering(&self, p: Point) -> CellKey {
        let mut out = CellKey::new();
        self.covering_into(p, &mut out);
        out
    }

    /// Monte Carlo estimate of the cell masses from `samples` points.
    ///
    /// The window is split into a `g x g` grid of strata with one jittered
    /// point each (`g = floor(sqrt(samples))`); the remaining
    /// `samples - g^2` points are uniform over the whole window. Each stratum
    /// row draws from its own stream, so the parallel evaluation reproduces
    /// the sequential one exactly.
    pub fn compute_cells(&self, samples: u64, seed: u64) -> Result<CellTable> {
        if samples == 0 {
            return Err(Error::param("samples", "need at least one sample"));
        }
        let g = (samples as f64).sqrt().floor() as u64;
        let g = if (g + 1) * (g + 1) <= samples { g + 1 } else { g };
        let rest = samples - g * g;
        let w = self.geometry.window;
        let sx = w.width / g as f64;
        let sy = w.height / g as f64;

        let rows: Vec<Tally> = (0..g)
            .into_par_iter()
            .map(|row| {
                let mut rng = seed::stream(seed, "cells/row", row);
                let mut tally = Tally::default();
                let mut key = CellKey::new();
                for col in 0..g {
                    let p = Point::new(
                        w.origin.x + (col as f64 + rng.random::<f64>()) * sx,
                        w.origin.y + (row as f64 + rng.random::<f64>()) * sy,
                    );
                    self.covering_into(p, &mut key);
                    tally.add(&key);
                }
                tally
            })
            .collect();

        let mut total = Tally::default();
        for t in rows {
            total.merge(t);
        }
        let mut rng = seed::stream(seed, "cells/rest", 0);
        let mut key = CellKey::new();
        for _ in 0..rest {
            let p = self.geometry.sample_point(&mut rng);
            self.covering_into(p, &mut key);
            total.add(&key);
        }

        let covered: u64 = total.counts.values().sum();
        if covered == 0 {
            return Err(Error::UncoveredWindow);
        }
        let counts: BTreeMap<CellKey, u64> = total.counts.into_iter().collect();
        let cells = counts
            .into_iter()
            .map(|(members, hits)| Cell {
                mass: hits as f64 / covered as f64,
                members,
                hits,
            })
            .collect();
        Ok(CellTable::build(
            self.sites.len(),
            cells,
            covered as f64 / samples as f64,
            covered,
        ))
    }
}

#[derive(Default)]
struct Tally {
    counts: HashMap<CellKey, u64>,
}

impl Tally {
    #[inline]
    fn add(&mut self, key: &CellKey) {
        if key.is_empty() {
            return;
        }
        if let Some(c) = self.counts.get_mut(key.as_slice()) {
            *c += 1;
        } else {
            self.counts.insert(key.clone(), 1);
        }
    }

    fn merge(&mut self, other: Tally) {
        for (k, v) in other.counts {
            *self.counts.entry(k).or_insert(0) += v;
        }
    }
}

/// One coverage cell: the caches covering it and its probability mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub members: CellKey,
    pub mass: f64,
    /// Sample points that landed in the cell (0 for hand-built tables).
    pub hits: u64,
}

/// Cell masses `p_s` conditional on coverage, plus per-cache indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTable {
    n_caches: usize,
    cells: Vec<Cell>,
    covered_fraction: f64,
    covered_samples: u64,
    by_cache: Vec<Vec<u32>>,
    neighbors: Vec<Vec<usize>>,
}

impl CellTable {
    /// Build a table from explicit `(members, mass)` pairs, e.g. an exact
    /// arrangement. Members are 0-based cache indices.
    pub fn from_masses<I, K>(n_caches: usize, cells: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, f64)>,
        K: AsRef<[usize]>,
    {
        let mut map: BTreeMap<CellKey, f64> = BTreeMap::new();
        for (members, mass) in cells {
            let mut key: CellKey = members.as_ref().iter().map(|&m| m as u32).collect();
            key.sort_unstable();
            key.dedup();
            if key.is_empty() {
                return Err(Error::param("cells", "cell key must be non-empty"));
            }
            if let Some(&bad) = key.iter().find(|&&m| m as usize >= n_caches) {
                return Err(Error::UnknownCache(bad as usize));
            }
            if !(mass >= 0.0 && mass.is_finite()) {
                return Err(Error::param("cells", format!("negative mass {mass}")));
            }
            if map.insert(key.clone(), mass).is_some() {
                return Err(Error::param("cells", format!("duplicate cell {key:?}")));
            }
        }
        let total: f64 = crate::catalog::compensated_sum(map.values().copied());
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::param("cells", format!("masses sum to {total}")));
        }
        let cells = map
            .into_iter()
            .filter(|(_, m)| *m > 0.0)
            .map(|(members, mass)| Cell {
                members,
                mass,
                hits: 0,
            })
            .collect();
        Ok(CellTable::build(n_caches, cells, 1.0, 0))
    }

    fn build(n_caches: usize, cells: Vec<Cell>, covered_fraction: f64, covered_samples: u64) -> Self {
        let mut by_cache = vec![Vec::new(); n_caches];
        let mut adj = vec![Vec::new(); n_caches];
        for (ci, cell) in cells.iter().enumerate() {
            for &m in &cell.members {
                by_cache[m as usize].push(ci as u32);
                adj[m as usize].extend(cell.members.iter().map(|&l| l as usize));
            }
        }
        let neighbors = adj
            .into_iter()
            .enumerate()
            .map(|(m, mut v)| {
                v.push(m);
                v.sort_unstable();
                v.dedup();
                v
            })
            .collect();
        CellTable {
            n_caches,
            cells,
            covered_fraction,
            covered_samples,
            by_cache,
            neighbors,
        }
    }

    pub fn n_caches(&self) -> usize {
        self.n_caches
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Fraction of the window covered by at least one cache.
    pub fn covered_fraction(&self) -> f64 {
        self.covered_fraction
    }

    /// Number of covered sample points behind the estimate (0 if exact).
    pub fn covered_samples(&self) -> u64 {
        self.covered_samples
    }

    /// Indices into [`CellTable::cells`] of the cells containing cache `m`.
    pub fn cells_of(&self, m: usize) -> impl Iterator<Item = &Cell> + '_ {
        self.by_cache[m].iter().map(move |&c| &self.cells[c as usize])
    }

    /// Mass `p` of the cell with exactly these members, 0 if absent.
    pub fn mass(&self, members: &[usize]) -> f64 {
        let mut key: CellKey = members.iter().map(|&m| m as u32).collect();
        key.sort_unstable();
        self.cells
            .binary_search_by(|c| c.members.as_slice().cmp(key.as_slice()))
            .map_or(0.0, |i| self.cells[i].mass)
    }

    /// Total mass of the region covered by cache `m`.
    pub fn cache_mass(&self, m: usize) -> f64 {
        self.cells_of(m).map(|c| c.mass).sum()
    }

    /// Caches sharing at least one cell with `m`, including `m` itself.
    pub fn neighbors(&self, m: usize) -> Result<&[usize]> {
        self.neighbors
            .get(m)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownCache(m))
    }

    /// Export as `subset;p` with subsets written as sorted, comma-joined
    /// external ids.
    pub fn write_csv<W: Write>(&self, topology: &Topology, mut w: W) -> Result<()> {
        writeln!(w, "subset;p")?;
        for cell in &self.cells {
            let mut ids: Vec<u32> = cell
                .members
                .iter()
                .map(|&m| topology.sites()[m as usize].id)
                .collect();
            ids.sort_unstable();
            let joined: Vec<String> = ids.iter().map(u32::to_string).collect();
            writeln!(w, "{};{}", joined.join(","), cell.mass)?;
        }
        Ok(())
    }
}
