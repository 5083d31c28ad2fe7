//! Placement matrices and the miss-probability objective.
//!
//! A binary placement is stored sparsely: row `m` is the sorted list of
//! 0-based file indices held by cache `m`. Relaxed placements (used by the
//! deterministic annealer) are dense `N x J` matrices with entries in
//! `[0, 1]`.
//!
//! With `U_s` the union of the rows of the caches in cell `s` and `a(U)` the
//! popularity mass of a file set,
//!
//! ```text
//! f(B)    = sum_s        p_s (1 - a(U_s))
//! f_m(B)  = sum_{s : m in s} p_s (1 - a(U_s))
//! q_m(j)  = sum_{s : m in s} p_s [j not stored by any other cache of s]
//! ```

use std::io::{Read, Write};

use crate::catalog::{compensated_sum, FileSizes, Popularity};
use crate::error::{Error, Result};
use crate::topology::CellTable;

/// How row capacity is enforced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapacityMode {
    /// Every row stores exactly `K` unit-size files.
    Slots,
    /// Rows store any files whose sizes sum to at most `K`.
    Sized,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    files: usize,
    capacity: usize,
    mode: CapacityMode,
    rows: Vec<Vec<u32>>,
}

fn check_capacity(files: usize, capacity: usize) -> Result<()> {
    if capacity == 0 {
        return Err(Error::param("K", "capacity must be at least one slot"));
    }
    if capacity > files {
        return Err(Error::param(
            "K",
            format!("capacity {capacity} exceeds catalog size {files}"),
        ));
    }
    Ok(())
}

fn normalize_row(cache: usize, files: usize, mut row: Vec<u32>) -> Result<Vec<u32>> {
    row.sort_unstable();
    if let Some(w) = row.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::InfeasiblePlacement {
            cache,
            reason: format!("file {} stored twice", w[0] + 1),
        });
    }
    if let Some(&j) = row.last() {
        if j as usize >= files {
            return Err(Error::InfeasiblePlacement {
                cache,
                reason: format!("file {} outside catalog of {files}", j + 1),
            });
        }
    }
    Ok(row)
}

impl Placement {
    /// Slot-model placement; every row must hold exactly `capacity` files.
    pub fn new(files: usize, capacity: usize, rows: Vec<Vec<u32>>) -> Result<Self> {
        check_capacity(files, capacity)?;
        let rows = rows
            .into_iter()
            .enumerate()
            .map(|(m, row)| {
                let row = normalize_row(m, files, row)?;
                if row.len() != capacity {
                    return Err(Error::InfeasiblePlacement {
                        cache: m,
                        reason: format!("stores {} files, capacity is {capacity}", row.len()),
                    });
                }
                Ok(row)
            })
            .collect::<Result<_>>()?;
        Ok(Placement {
            files,
            capacity,
            mode: CapacityMode::Slots,
            rows,
        })
    }

    /// Size-constrained placement; every row's total size must fit `capacity`.
    pub fn sized(files: usize, capacity: usize, sizes: &FileSizes, rows: Vec<Vec<u32>>) -> Result<Self> {
        if sizes.len() != files {
            return Err(Error::DimensionMismatch(format!(
                "{} sizes for {files} files",
                sizes.len()
            )));
        }
        let rows = rows
            .into_iter()
            .enumerate()
            .map(|(m, row)| {
                let row = normalize_row(m, files, row)?;
                let used: f64 = row.iter().map(|&j| sizes.size(j as usize)).sum();
                if used > capacity as f64 + 1e-9 {
                    return Err(Error::InfeasiblePlacement {
                        cache: m,
                        reason: format!("stored size {used} exceeds capacity {capacity}"),
                    });
                }
                Ok(row)
            })
            .collect::<Result<_>>()?;
        Ok(Placement {
            files,
            capacity,
            mode: CapacityMode::Sized,
            rows,
        })
    }

    /// Every cache stores the `capacity` most popular files.
    pub fn top_k(caches: usize, files: usize, capacity: usize) -> Result<Self> {
        check_capacity(files, capacity)?;
        let row: Vec<u32> = (0..capacity as u32).collect();
        Ok(Placement {
            files,
            capacity,
            mode: CapacityMode::Slots,
            rows: vec![row; caches],
        })
    }

    pub fn n_caches(&self) -> usize {
        self.rows.len()
    }

    pub fn files(&self) -> usize {
        self.files
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn mode(&self) -> CapacityMode {
        self.mode
    }

    pub fn row(&self, m: usize) -> &[u32] {
        &self.rows[m]
    }

    pub fn rows(&self) -> &[Vec<u32>] {
        &self.rows
    }

    pub fn stores(&self, m: usize, file: usize) -> bool {
        self.rows[m].binary_search(&(file as u32)).is_ok()
    }

    /// Replace row `m` with a slot-feasible row.
    pub fn set_row(&mut self, m: usize, row: Vec<u32>) -> Result<()> {
        if m >= self.rows.len() {
            return Err(Error::UnknownCache(m));
        }
        let row = normalize_row(m, self.files, row)?;
        if self.mode == CapacityMode::Slots && row.len() != self.capacity {
            return Err(Error::InfeasiblePlacement {
                cache: m,
                reason: format!("stores {} files, capacity is {}", row.len(), self.capacity),
            });
        }
        self.rows[m] = row;
        Ok(())
    }

    /// Copy with row `m` replaced.
    pub fn with_row(&self, m: usize, row: Vec<u32>) -> Result<Self> {
        let mut next = self.clone();
        next.set_row(m, row)?;
        Ok(next)
    }

    /// Largest stored file index over the given caches, if any stores one.
    pub fn max_stored(&self, caches: &[usize]) -> Option<u32> {
        caches.iter().filter_map(|&l| self.rows[l].last().copied()).max()
    }

    /// Stored pairs as CSV `cacheId,fileId` with 1-based ids.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["cacheId", "fileId"])?;
        for (m, row) in self.rows.iter().enumerate() {
            for &j in row {
                w.write_record([(m + 1).to_string(), (j + 1).to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Read a slot-model placement written by [`Placement::write_csv`].
    pub fn from_csv<R: Read>(reader: R, caches: usize, files: usize, capacity: usize) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut rows = vec![Vec::new(); caches];
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            let parse = |k: usize| -> Result<usize> {
                record
                    .get(k)
                    .and_then(|v| v.parse::<usize>().ok())
                    .filter(|&v| v >= 1)
                    .ok_or_else(|| Error::Parse {
                        line,
                        message: format!("expected positive integer pair, found `{}`", record.iter().collect::<Vec<_>>().join(",")),
                    })
            };
            let (m, j) = (parse(0)?, parse(1)?);
            if m > caches {
                return Err(Error::Parse {
                    line,
                    message: format!("cache {m} outside 1..={caches}"),
                });
            }
            rows[m - 1].push((j - 1) as u32);
        }
        Placement::new(files, capacity, rows)
    }
}

fn check_dims(b_caches: usize, b_files: usize, cells: &CellTable, pop: &Popularity) -> Result<()> {
    if cells.n_caches() != b_caches {
        return Err(Error::DimensionMismatch(format!(
            "placement has {b_caches} caches, cell table {}",
            cells.n_caches()
        )));
    }
    if pop.len() != b_files {
        return Err(Error::DimensionMismatch(format!(
            "placement has {b_files} files, popularity {}",
            pop.len()
        )));
    }
    Ok(())
}

/// Popularity mass of the union of the rows of `caches`.
pub(crate) fn union_mass(b: &Placement, caches: impl Iterator<Item = usize>, pop: &Popularity, buf: &mut Vec<u32>) -> f64 {
    buf.clear();
    for l in caches {
        buf.extend_from_slice(&b.rows[l]);
    }
    buf.sort_unstable();
    buf.dedup();
    buf.iter().map(|&j| pop.prob(j as usize)).sum()
}

/// Miss probability `f(B)`.
pub fn evaluate_miss(b: &Placement, cells: &CellTable, pop: &Popularity) -> Result<f64> {
    check_dims(b.n_caches(), b.files, cells, pop)?;
    let mut buf = Vec::new();
    let terms = cells.cells().iter().map(|cell| {
        let hit = union_mass(b, cell.members.iter().map(|&l| l as usize), pop, &mut buf);
        cell.mass * (1.0 - hit).max(0.0)
    });
    Ok(compensated_sum(terms.collect::<Vec<_>>()))
}

/// Local miss `f_m(B)`: miss mass inside the region of cache `m`,
/// not normalized by that region's mass.
pub fn local_miss(b: &Placement, m: usize, cells: &CellTable, pop: &Popularity) -> Result<f64> {
    check_dims(b.n_caches(), b.files, cells, pop)?;
    if m >= b.n_caches() {
        return Err(Error::UnknownCache(m));
    }
    Ok(local_miss_unchecked(b, m, cells, pop))
}

pub(crate) fn local_miss_unchecked(b: &Placement, m: usize, cells: &CellTable, pop: &Popularity) -> f64 {
    let mut buf = Vec::new();
    cells
        .cells_of(m)
        .map(|cell| {
            let hit = union_mass(b, cell.members.iter().map(|&l| l as usize), pop, &mut buf);
            cell.mass * (1.0 - hit).max(0.0)
        })
        .sum()
}

/// Exposure `q_m(j)` of one cache, stored sparsely: files no neighbour
/// stores all share the value [`Exposure::base`].
#[derive(Debug, Clone, PartialEq)]
pub struct Exposure {
    base: f64,
    reduced: Vec<(u32, f64)>,
}

impl Exposure {
    /// `sum_{s : m in s} p_s`, the exposure of a file no neighbour stores.
    pub fn base(&self) -> f64 {
        self.base
    }

    /// Files stored by some neighbour, ascending, with their exposure.
    pub fn reduced(&self) -> &[(u32, f64)] {
        &self.reduced
    }

    pub fn get(&self, file: usize) -> f64 {
        match self.reduced.binary_search_by_key(&(file as u32), |&(j, _)| j) {
            Ok(i) => self.reduced[i].1,
            Err(_) => self.base,
        }
    }

    pub fn to_dense(&self, files: usize) -> Vec<f64> {
        let mut q = vec![self.base; files];
        for &(j, v) in &self.reduced {
            q[j as usize] = v;
        }
        q
    }

    /// Exposure restricted to `files`, in the given order.
    pub fn restricted(&self, files: &[u32]) -> Vec<f64> {
        files.iter().map(|&j| self.get(j as usize)).collect()
    }
}

/// Exposure vector of cache `m` under a binary placement.
pub fn exposure(b: &Placement, m: usize, cells: &CellTable) -> Result<Exposure> {
    if cells.n_caches() != b.n_caches() {
        return Err(Error::DimensionMismatch(format!(
            "placement has {} caches, cell table {}",
            b.n_caches(),
            cells.n_caches()
        )));
    }
    if m >= b.n_caches() {
        return Err(Error::UnknownCache(m));
    }
    Ok(exposure_unchecked(b, m, cells))
}

pub(crate) fn exposure_unchecked(b: &Placement, m: usize, cells: &CellTable) -> Exposure {
    let mut base = 0.0;
    let mut deductions: Vec<(u32, f64)> = Vec::new();
    let mut buf = Vec::new();
    for cell in cells.cells_of(m) {
        base += cell.mass;
        buf.clear();
        for &l in &cell.members {
            if l as usize != m {
                buf.extend_from_slice(&b.rows[l as usize]);
            }
        }
        buf.sort_unstable();
        buf.dedup();
        deductions.extend(buf.iter().map(|&j| (j, cell.mass)));
    }
    deductions.sort_unstable_by_key(|&(j, _)| j);
    let mut reduced: Vec<(u32, f64)> = Vec::new();
    for (j, mass) in deductions {
        match reduced.last_mut() {
            Some((last, acc)) if *last == j => *acc += mass,
            _ => reduced.push((j, mass)),
        }
    }
    for (_, v) in &mut reduced {
        *v = (base - *v).max(0.0);
    }
    Exposure { base, reduced }
}

/// Change of the local miss of `m` and of the global miss when row `m` is
/// replaced by `new_row`, each evaluated from scratch.
pub fn potential_delta(
    b: &Placement,
    m: usize,
    new_row: Vec<u32>,
    cells: &CellTable,
    pop: &Popularity,
) -> Result<(f64, f64)> {
    let next = b.with_row(m, new_row)?;
    let local = local_miss(&next, m, cells, pop)? - local_miss(b, m, cells, pop)?;
    let global = evaluate_miss(&next, cells, pop)? - evaluate_miss(b, cells, pop)?;
    Ok((local, global))
}

/// Walk `ranking` in order and keep each file that still fits.
pub fn greedy_size_fill(ranking: &[u32], sizes: &FileSizes, capacity: f64) -> Vec<u32> {
    let mut used = 0.0;
    let mut row = Vec::new();
    for &j in ranking {
        let z = sizes.size(j as usize);
        if used + z <= capacity {
            used += z;
            row.push(j);
        }
    }
    row.sort_unstable();
    row
}

/// Convert a slot-model placement to the size model: each cache fills its
/// capacity from its stored files in ascending index order.
pub fn fill_by_size(b: &Placement, sizes: &FileSizes) -> Result<Placement> {
    let rows = b
        .rows
        .iter()
        .map(|row| greedy_size_fill(row, sizes, b.capacity as f64))
        .collect();
    Placement::sized(b.files, b.capacity, sizes, rows)
}

/// Dense fractional placement for the relaxed problem.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedPlacement {
    files: usize,
    capacity: usize,
    rows: Vec<Vec<f64>>,
}

impl RelaxedPlacement {
    /// All-zero rows: the starting point of the deterministic annealer. Such
    /// rows are outside the capacity constraint until first updated.
    pub fn zeros(caches: usize, files: usize, capacity: usize) -> Result<Self> {
        check_capacity(files, capacity)?;
        Ok(RelaxedPlacement {
            files,
            capacity,
            rows: vec![vec![0.0; files]; caches],
        })
    }

    pub fn from_binary(b: &Placement) -> Self {
        let rows = b
            .rows
            .iter()
            .map(|row| {
                let mut dense = vec![0.0; b.files];
                for &j in row {
                    dense[j as usize] = 1.0;
                }
                dense
            })
            .collect();
        RelaxedPlacement {
            files: b.files,
            capacity: b.capacity,
            rows,
        }
    }

    pub fn n_caches(&self) -> usize {
        self.rows.len()
    }

    pub fn files(&self) -> usize {
        self.files
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.rows[m]
    }

    /// Replace row `m`; entries must lie in `[0, 1]` and sum to `K`.
    pub fn set_row(&mut self, m: usize, row: Vec<f64>) -> Result<()> {
        if m >= self.rows.len() {
            return Err(Error::UnknownCache(m));
        }
        if row.len() != self.files {
            return Err(Error::DimensionMismatch(format!(
                "row of {} entries for {} files",
                row.len(),
                self.files
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InfeasiblePlacement {
                cache: m,
                reason: format!("entry {v} outside [0, 1]"),
            });
        }
        let sum = compensated_sum(row.iter().copied());
        if (sum - self.capacity as f64).abs() > 1e-9 {
            return Err(Error::InfeasiblePlacement {
                cache: m,
                reason: format!("row sums to {sum}, capacity is {}", self.capacity),
            });
        }
        self.rows[m] = row;
        Ok(())
    }

    /// Multilinear extension of `f` to fractional entries.
    pub fn miss(&self, cells: &CellTable, pop: &Popularity) -> Result<f64> {
        check_dims(self.rows.len(), self.files, cells, pop)?;
        let a = pop.probs();
        let terms = cells.cells().iter().map(|cell| {
            let per_file: f64 = (0..self.files)
                .map(|j| {
                    let keep: f64 = cell
                        .members
                        .iter()
                        .map(|&l| 1.0 - self.rows[l as usize][j])
                        .product();
                    a[j] * keep
                })
                .sum();
            cell.mass * per_file
        });
        Ok(compensated_sum(terms.collect::<Vec<_>>()))
    }

    /// Local miss of `m` under the multilinear extension.
    pub fn local_miss(&self, m: usize, cells: &CellTable, pop: &Popularity) -> Result<f64> {
        let q = self.exposure(m, cells)?;
        let row = &self.rows[m];
        Ok((0..self.files).map(|j| pop.prob(j) * (1.0 - row[j]) * q[j]).sum())
    }

    /// Dense exposure of cache `m` with fractional neighbour entries.
    pub fn exposure(&self, m: usize, cells: &CellTable) -> Result<Vec<f64>> {
        if cells.n_caches() != self.rows.len() {
            return Err(Error::DimensionMismatch(format!(
                "placement has {} caches, cell table {}",
                self.rows.len(),
                cells.n_caches()
            )));
        }
        if m >= self.rows.len() {
            return Err(Error::UnknownCache(m));
        }
        let mut q = vec![0.0; self.files];
        let mut keep = vec![0.0; self.files];
        for cell in cells.cells_of(m) {
            keep.iter_mut().for_each(|k| *k = cell.mass);
            for &l in &cell.members {
                if l as usize == m {
                    continue;
                }
                for (k, b) in keep.iter_mut().zip(&self.rows[l as usize]) {
                    *k *= 1.0 - b;
                }
            }
            for (acc, k) in q.iter_mut().zip(&keep) {
                *acc += k;
            }
        }
        Ok(q)
    }

    /// Round every entry to the nearest integer; each row must then hold
    /// exactly `K` ones.
    pub fn round(&self) -> Result<Placement> {
        let rows = self
            .rows
            .iter()
            .enumerate()
            .map(|(m, row)| {
                let ones: Vec<u32> = row
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v > 0.5)
                    .map(|(j, _)| j as u32)
                    .collect();
                if ones.len() != self.capacity {
                    return Err(Error::RoundingInfeasible {
                        cache: m,
                        stored: ones.len(),
                        capacity: self.capacity,
                    });
                }
                Ok(ones)
            })
            .collect::<Result<_>>()?;
        Placement::new(self.files, self.capacity, rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Dense evaluation straight from the product form, sharing no code with
    /// the sparse path.
    fn naive_miss(rows: &[Vec<f64>], cells: &[(Vec<usize>, f64)], a: &[f64]) -> f64 {
        let mut f = 0.0;
        for (members, p) in cells {
            for (j, aj) in a.iter().enumerate() {
                let mut keep = 1.0;
                for &l in members {
                    keep *= 1.0 - rows[l][j];
                }
                f += aj * p * keep;
            }
        }
        f
    }

    fn naive_local(rows: &[Vec<f64>], m: usize, cells: &[(Vec<usize>, f64)], a: &[f64]) -> f64 {
        let cells: Vec<_> = cells.iter().filter(|(s, _)| s.contains(&m)).cloned().collect();
        naive_miss(rows, &cells, a)
    }

    fn dense(b: &Placement) -> Vec<Vec<f64>> {
        RelaxedPlacement::from_binary(b).rows
    }

    fn two_cache_cells() -> CellTable {
        CellTable::from_masses(2, [(vec![0], 0.4), (vec![1], 0.4), (vec![0, 1], 0.2)]).unwrap()
    }

    #[test]
    fn single_cache_miss() {
        let cells = CellTable::from_masses(1, [(vec![0], 1.0)]).unwrap();
        let pop = Popularity::new(vec![0.5, 0.3, 0.2]).unwrap();
        let b = Placement::new(3, 1, vec![vec![0]]).unwrap();
        assert!((evaluate_miss(&b, &cells, &pop).unwrap() - 0.5).abs() < 1e-12);
        let q = exposure(&b, 0, &cells).unwrap();
        assert_eq!(q.to_dense(3), vec![1.0; 3]);
    }

    #[test]
    fn two_cache_hand_values() {
        let cells = two_cache_cells();
        let pop = Popularity::new(vec![0.7, 0.3]).unwrap();
        let b = Placement::new(2, 1, vec![vec![0], vec![1]]).unwrap();
        assert!((evaluate_miss(&b, &cells, &pop).unwrap() - 0.40).abs() < 1e-12);
        // only file 2 misses at cache 1, and cache 2 serves it in the shared cell
        assert!((local_miss(&b, 0, &cells, &pop).unwrap() - 0.3 * 0.4).abs() < 1e-12);
    }

    #[test]
    fn full_catalog_everywhere_never_misses() {
        let cells = two_cache_cells();
        let pop = Popularity::new(vec![0.7, 0.3]).unwrap();
        let b = Placement::top_k(2, 2, 2).unwrap();
        assert!(evaluate_miss(&b, &cells, &pop).unwrap().abs() < 1e-12);
        assert!(local_miss(&b, 1, &cells, &pop).unwrap().abs() < 1e-12);
    }

    #[test]
    fn exposure_hand_values() {
        let cells = CellTable::from_masses(2, [(vec![0], 0.3), (vec![0, 1], 0.4), (vec![1], 0.3)]).unwrap();
        let b = Placement::new(2, 1, vec![vec![1], vec![0]]).unwrap();
        let q = exposure(&b, 0, &cells).unwrap();
        assert!((q.get(0) - 0.3).abs() < 1e-12);
        assert!((q.get(1) - 0.7).abs() < 1e-12);
        assert_eq!(q.restricted(&[1, 0]), vec![q.get(1), q.get(0)]);
    }

    #[test]
    fn disjoint_exposure_ignores_neighbours() {
        let cells = CellTable::from_masses(2, [(vec![0], 0.6), (vec![1], 0.4)]).unwrap();
        let b = Placement::new(3, 1, vec![vec![2], vec![0]]).unwrap();
        let q = exposure(&b, 0, &cells).unwrap().to_dense(3);
        assert!(q.iter().all(|&v| (v - 0.6).abs() < 1e-15));
    }

    #[test]
    fn local_miss_of_lonely_top_k_is_tail() {
        let cells = CellTable::from_masses(1, [(vec![0], 1.0)]).unwrap();
        let pop = Popularity::zipf(20, 0.8).unwrap();
        let b = Placement::top_k(1, 20, 4).unwrap();
        let f = local_miss(&b, 0, &cells, &pop).unwrap();
        assert!((f - pop.tail_mass(4).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn potential_delta_identity_cases() {
        let cells = two_cache_cells();
        let pop = Popularity::new(vec![0.7, 0.3]).unwrap();
        let b = Placement::new(2, 1, vec![vec![0], vec![1]]).unwrap();
        assert_eq!(potential_delta(&b, 0, vec![0], &cells, &pop).unwrap(), (0.0, 0.0));

        let iso = CellTable::from_masses(2, [(vec![0], 0.25), (vec![1], 0.75)]).unwrap();
        let pop = Popularity::new(vec![0.5, 0.3, 0.2]).unwrap();
        let b = Placement::new(3, 1, vec![vec![0], vec![0]]).unwrap();
        // swap file 1 (a=0.5) out, file 3 (a=0.2) in
        let (dl, dg) = potential_delta(&b, 0, vec![2], &iso, &pop).unwrap();
        let expect = 0.5 * 0.25 - 0.2 * 0.25;
        assert!((dl - expect).abs() < 1e-12 && (dg - expect).abs() < 1e-12);
    }

    #[test]
    fn greedy_fill_examples() {
        let unit = FileSizes::uniform(5);
        assert_eq!(greedy_size_fill(&[4, 0, 2, 1], &unit, 2.0), vec![0, 4]);
        let sizes = FileSizes::new(vec![3.0, 1.0, 1.0]).unwrap();
        assert_eq!(greedy_size_fill(&[0, 1, 2], &sizes, 2.0), vec![1, 2]);
        let big = FileSizes::new(vec![5.0, 6.0]).unwrap();
        assert!(greedy_size_fill(&[0, 1], &big, 2.0).is_empty());
    }

    #[test]
    fn feasibility_checks() {
        assert!(Placement::new(3, 0, vec![vec![]]).is_err());
        assert!(Placement::new(3, 4, vec![vec![0, 1, 2]]).is_err());
        assert!(Placement::new(3, 2, vec![vec![0, 0]]).is_err());
        assert!(Placement::new(3, 2, vec![vec![0, 3]]).is_err());
        assert!(Placement::new(3, 2, vec![vec![0]]).is_err());
        let mut b = Placement::top_k(2, 3, 2).unwrap();
        assert!(b.set_row(0, vec![2, 1]).is_ok());
        assert_eq!(b.row(0), &[1, 2]);
        assert!(matches!(b.set_row(5, vec![0, 1]), Err(Error::UnknownCache(5))));
        let cells = CellTable::from_masses(1, [(vec![0], 1.0)]).unwrap();
        let pop = Popularity::zipf(3, 1.0).unwrap();
        assert!(matches!(evaluate_miss(&b, &cells, &pop), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn placement_csv_round_trip() {
        let b = Placement::new(6, 2, vec![vec![0, 5], vec![1, 3]]).unwrap();
        let mut out = Vec::new();
        b.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, "cacheId,fileId\n1,1\n1,6\n2,2\n2,4\n");
        let back = Placement::from_csv(text.as_bytes(), 2, 6, 2).unwrap();
        assert_eq!(back, b);
        assert!(Placement::from_csv("cacheId,fileId\n3,1\n".as_bytes(), 2, 6, 2).is_err());
    }

    #[test]
    fn rounding_detects_wrong_counts() {
        let mut r = RelaxedPlacement::zeros(1, 4, 2).unwrap();
        r.set_row(0, vec![0.9, 0.6, 0.4, 0.1]).unwrap();
        assert_eq!(r.round().unwrap().row(0), &[0, 1]);
        r.set_row(0, vec![0.9, 0.4, 0.4, 0.3]).unwrap();
        assert!(matches!(r.round(), Err(Error::RoundingInfeasible { stored: 1, .. })));
        assert!(r.set_row(0, vec![0.9, 0.9, 0.9, 0.9]).is_err());
    }

    #[test]
    fn relaxed_objective_agrees_with_binary_on_integral_rows() {
        let cells = two_cache_cells();
        let pop = Popularity::new(vec![0.7, 0.3]).unwrap();
        let b = Placement::new(2, 1, vec![vec![0], vec![1]]).unwrap();
        let r = RelaxedPlacement::from_binary(&b);
        assert!((r.miss(&cells, &pop).unwrap() - 0.40).abs() < 1e-12);
        assert!((r.local_miss(0, &cells, &pop).unwrap() - 0.12).abs() < 1e-12);
    }

    type Instance = (Vec<(Vec<usize>, f64)>, Vec<f64>, Placement, usize, Vec<u32>);

    fn instance() -> impl Strategy<Value = Instance> {
        (1usize..=6, 2usize..=20)
            .prop_flat_map(|(n, j)| {
                (
                    Just(n),
                    Just(j),
                    1usize..=j.min(5),
                    proptest::collection::vec((1u64..(1 << n), 1u32..100), 1..12),
                    proptest::collection::vec(1u32..1000, j),
                    any::<u64>(),
                )
            })
            .prop_map(|(n, j, k, raw_cells, raw_pop, seed)| {
                use rand::seq::index::sample;
                let mut map = std::collections::BTreeMap::new();
                for (mask, w) in raw_cells {
                    *map.entry(mask).or_insert(0u32) += w;
                }
                let total: u32 = map.values().sum();
                let cells: Vec<(Vec<usize>, f64)> = map
                    .into_iter()
                    .map(|(mask, w)| ((0..n).filter(|i| mask >> i & 1 == 1).collect(), w as f64 / total as f64))
                    .collect();
                let mut pop = raw_pop.iter().map(|&w| w as f64).collect::<Vec<_>>();
                pop.sort_by(|x, y| y.partial_cmp(x).unwrap());
                let s: f64 = pop.iter().sum();
                let mut pop: Vec<f64> = pop.iter().map(|w| w / s).collect();
                let drift = 1.0 - compensated_sum(pop.iter().copied());
                pop[0] += drift;
                let mut rng = crate::seed::rng(seed);
                let rows = (0..n)
                    .map(|_| sample(&mut rng, j, k).into_iter().map(|x| x as u32).collect())
                    .collect();
                let b = Placement::new(j, k, rows).unwrap();
                let m = (seed % n as u64) as usize;
                let dev: Vec<u32> = sample(&mut rng, j, k).into_iter().map(|x| x as u32).collect();
                (cells, pop, b, m, dev)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn potential_identity((cells, pop, b, m, dev) in instance()) {
            let table = CellTable::from_masses(b.n_caches(), cells.clone()).unwrap();
            let pop = Popularity::new(pop).unwrap();
            let (dl, dg) = potential_delta(&b, m, dev, &table, &pop).unwrap();
            prop_assert!((dl - dg).abs() <= 1e-12, "{dl} vs {dg}");
        }

        #[test]
        fn sparse_objective_matches_naive((cells, pop, b, m, _dev) in instance()) {
            let table = CellTable::from_masses(b.n_caches(), cells.clone()).unwrap();
            let popularity = Popularity::new(pop.clone()).unwrap();
            let f = evaluate_miss(&b, &table, &popularity).unwrap();
            prop_assert!((f - naive_miss(&dense(&b), &cells, &pop)).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&f));
            let fm = local_miss(&b, m, &table, &popularity).unwrap();
            prop_assert!((fm - naive_local(&dense(&b), m, &cells, &pop)).abs() <= 1e-12);
            let r = RelaxedPlacement::from_binary(&b);
            prop_assert!((r.miss(&table, &popularity).unwrap() - f).abs() <= 1e-12);
        }

        #[test]
        fn exposure_bounds_and_monotonicity((cells, _pop, b, m, _dev) in instance()) {
            let table = CellTable::from_masses(b.n_caches(), cells).unwrap();
            let q = exposure(&b, m, &table).unwrap();
            let upper = table.cache_mass(m);
            prop_assert!((q.base() - upper).abs() < 1e-12);
            for j in 0..b.files() {
                prop_assert!(q.get(j) >= 0.0 && q.get(j) <= upper + 1e-12);
            }
            // a neighbour adding a file never raises that file's exposure
            let nb: Vec<usize> = table.neighbors(m).unwrap().iter().copied().filter(|&l| l != m).collect();
            if let Some(&l) = nb.first() {
                let j_new = (0..b.files() as u32).find(|j| !b.row(l).contains(j));
                if let Some(j_new) = j_new {
                    let mut row = b.row(l).to_vec();
                    row[0] = j_new;
                    let next = b.with_row(l, row).unwrap();
                    let q2 = exposure(&next, m, &table).unwrap();
                    prop_assert!(q2.get(j_new as usize) <= q.get(j_new as usize) + 1e-15);
                }
            }
            let relaxed = RelaxedPlacement::from_binary(&b).exposure(m, &table).unwrap();
            for (j, v) in relaxed.iter().enumerate() {
                prop_assert!((v - q.get(j)).abs() < 1e-12);
            }
        }

        #[test]
        fn empty_cache_local_mass((cells, pop, b, m, _dev) in instance()) {
            let table = CellTable::from_masses(b.n_caches(), cells).unwrap();
            let popularity = Popularity::new(pop).unwrap();
            let q = exposure(&b, m, &table).unwrap();
            // with row m empty, f_m = sum_j a_j q_m(j) = P_m minus what neighbours serve
            let empty_local: f64 = (0..b.files()).map(|j| popularity.prob(j) * q.get(j)).sum();
            let mut r = RelaxedPlacement::from_binary(&b);
            r.rows[m] = vec![0.0; b.files()];
            let relaxed_local = r.local_miss(m, &table, &popularity).unwrap();
            prop_assert!((empty_local - relaxed_local).abs() < 1e-12);
            let all_empty = RelaxedPlacement::zeros(b.n_caches(), b.files(), b.capacity()).unwrap();
            let lone = all_empty.local_miss(m, &table, &popularity).unwrap();
            prop_assert!((lone - table.cache_mass(m)).abs() < 1e-12);
        }
    }
}
