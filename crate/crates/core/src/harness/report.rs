use std::collections::BTreeMap;
use std::fmt;

use super::experiment::SummaryRow;
use crate::error::{Error, Result};

/// Summary rows from one run, labelled for display.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordSet {
    pub label: String,
    pub rows: Vec<SummaryRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub set: String,
    pub algorithm: String,
    pub replicas: usize,
    pub hit_mean: f64,
    pub hit_stderr: f64,
    pub iterations_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub warnings: Vec<String>,
}

/// Per set and algorithm: terminal hit mean with its standard error across
/// replicas (the record's own error for a single replica) and mean
/// iterations. Needs at least two (set, algorithm) groups.
pub fn compare_report(sets: &[RecordSet]) -> Result<Report> {
    let mut rows = Vec::new();
    for set in sets {
        let mut groups: Vec<(&str, Vec<&SummaryRow>)> = Vec::new();
        for row in &set.rows {
            match groups.iter_mut().find(|(name, _)| *name == row.algorithm) {
                Some((_, g)) => g.push(row),
                None => groups.push((&row.algorithm, vec![row])),
            }
        }
        for (algorithm, group) in groups {
            let n = group.len();
            let mean = group.iter().map(|r| r.terminal_hit).sum::<f64>() / n as f64;
            let stderr = if n >= 2 {
                let var = group.iter().map(|r| (r.terminal_hit - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
                (var / n as f64).sqrt()
            } else {
                group[0].std_error.unwrap_or(0.0)
            };
            rows.push(ReportRow {
                set: set.label.clone(),
                algorithm: algorithm.to_string(),
                replicas: n,
                hit_mean: mean,
                hit_stderr: stderr,
                iterations_mean: group.iter().map(|r| r.iterations as f64).sum::<f64>() / n as f64,
            });
        }
    }
    if rows.len() < 2 {
        return Err(Error::param("sets", "a comparison needs at least two record sets"));
    }

    let mut warnings = Vec::new();
    let mut seen: BTreeMap<u32, (&str, &str)> = BTreeMap::new();
    for set in sets {
        for row in &set.rows {
            match seen.get(&row.replica) {
                Some((digest, label)) if *digest != row.topology_digest => {
                    warnings.push(format!(
                        "replica {} uses topology {} in `{}` but {} in `{}`",
                        row.replica, digest, label, row.topology_digest, set.label
                    ));
                }
                Some(_) => {}
                None => {
                    seen.insert(row.replica, (&row.topology_digest, &set.label));
                }
            }
        }
    }
    warnings.dedup();
    Ok(Report { rows, warnings })
}

impl fmt::Display for Report {
    /// CSV table followed by `# warning:` lines.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "set,algorithm,replicas,hit_mean,hit_stderr,iterations_mean")?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                r.set, r.algorithm, r.replicas, r.hit_mean, r.hit_stderr, r.iterations_mean
            )?;
        }
        for w in &self.warnings {
            writeln!(f, "# warning: {w}")?;
        }
        Ok(())
    }
}
