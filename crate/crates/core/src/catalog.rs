//! Content library: request popularities and optional file sizes.
//!
//! Files are indexed from 0 internally, in non-increasing popularity order;
//! file `j` here is file `j + 1` in every exported table.

use std::io::Read;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;

/// Sum with Neumaier compensation.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

const SUM_TOLERANCE: f64 = 1e-12;

/// Request probabilities `a_1 >= a_2 >= ... >= a_J` summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Popularity {
    probs: Vec<f64>,
}

impl Popularity {
    /// Validate an externally supplied vector. The vector must already be
    /// sorted; this type never reorders files.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidPopularity("empty catalog".into()));
        }
        if let Some((j, p)) = probs.iter().enumerate().find(|(_, p)| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidPopularity(format!(
                "file {} has probability {p}",
                j + 1
            )));
        }
        if let Some(j) = probs.windows(2).position(|w| w[1] > w[0]) {
            return Err(Error::InvalidPopularity(format!(
                "not non-increasing at file {}: {} < {}",
                j + 2,
                probs[j],
                probs[j + 1]
            )));
        }
        let total = compensated_sum(probs.iter().copied());
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidPopularity(format!(
                "probabilities sum to {total}"
            )));
        }
        Ok(Popularity { probs })
    }

    /// Zipf law `a_j = j^-gamma / sum_i i^-gamma`.
    pub fn zipf(files: usize, gamma: f64) -> Result<Self> {
        if files == 0 {
            return Err(Error::param("files", "catalog needs at least one file"));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::param("gamma", format!("must be >= 0, got {gamma}")));
        }
        let weights: Vec<f64> = (1..=files).map(|j| (j as f64).powf(-gamma)).collect();
        // smallest terms first
        let norm = compensated_sum(weights.iter().rev().copied());
        let probs = weights.into_iter().map(|w| w / norm).collect();
        Ok(Popularity { probs })
    }

    /// Read one probability per line. Blank lines and `#` comments are skipped.
    pub fn from_reader<R: Read>(mut reader: R) -> Result<Self> {
        let mut text = String::new();
        reader.read_to_string(&mut text)?;
        let mut probs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let value: f64 = line.parse().map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("not a probability `{line}`: {e}"),
            })?;
            probs.push(value);
        }
        Popularity::new(probs)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    pub fn prob(&self, file: usize) -> f64 {
        self.probs[file]
    }

    /// Probability mass of the files ranked below `n`, i.e. `sum_{j > n} a_j`
    /// in 1-based ranks.
    pub fn tail_mass(&self, n: usize) -> Result<f64> {
        if n > self.probs.len() {
            return Err(Error::param(
                "n",
                format!("{n} exceeds catalog size {}", self.probs.len()),
            ));
        }
        Ok(compensated_sum(self.probs[n..].iter().rev().copied()))
    }

    /// The same catalog with every probability multiplied by `factor`.
    /// Only used to probe scale invariance; the result is not a distribution.
    pub fn scaled_unchecked(&self, factor: f64) -> Popularity {
        Popularity {
            probs: self.probs.iter().map(|p| p * factor).collect(),
        }
    }
}

/// File sizes as multiples of the slot size.
#[derive(Debug, Clone, PartialEq)]
pub struct FileSizes {
    sizes: Vec<f64>,
}

impl FileSizes {
    pub fn new(sizes: Vec<f64>) -> Result<Self> {
        if let Some((j, z)) = sizes.iter().enumerate().find(|(_, z)| !(z.is_finite() && **z > 0.0)) {
            return Err(Error::param("sizes", format!("file {} has size {z}", j + 1)));
        }
        Ok(FileSizes { sizes })
    }

    /// Unit sizes: the plain slot model.
    pub fn uniform(files: usize) -> Self {
        FileSizes {
            sizes: vec![1.0; files],
        }
    }

    /// I.i.d. log-normal sizes whose mean is exactly one: the underlying
    /// normal has variance `sigma2` and mean `-sigma2 / 2`.
    ///
    /// Sizes for different `sigma2` under the same seed share their normal
    /// draws, so a sweep over variances uses common random numbers.
    pub fn lognormal(files: usize, sigma2: f64, seed: u64) -> Result<Self> {
        if files == 0 {
            return Err(Error::param("files", "catalog needs at least one file"));
        }
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err(Error::param("sigma2", format!("must be >= 0, got {sigma2}")));
        }
        let sigma = sigma2.sqrt();
        let mut rng = seed::rng(seed);
        let sizes = (0..files)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (sigma * z - 0.5 * sigma2).exp()
            })
            .collect();
        Ok(FileSizes { sizes })
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn sizes(&self) -> &[f64] {
        &self.sizes
    }

    pub fn size(&self, file: usize) -> f64 {
        self.sizes[file]
    }
}
