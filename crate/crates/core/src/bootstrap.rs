//! Nonparametric bootstrap engine.
//!
//! Every replicate owns a random stream derived from the master seed, the
//! replicate index and a cell index, so results do not depend on how the
//! work is scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the stream for one (replicate, cell) pair.
pub fn derive_seed(master: u64, replicate: u64, cell: u64) -> u64 {
    let h = splitmix64(master);
    let h = splitmix64(h ^ replicate.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    splitmix64(h ^ cell.wrapping_mul(0xA076_1D64_78BD_642F))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResamplePlan {
    pub b: usize,
    pub master_seed: u64,
    pub stratify_by_cell: bool,
}

impl ResamplePlan {
    pub fn new(b: usize, master_seed: u64, stratify_by_cell: bool) -> Result<Self> {
        if b == 0 {
            return Err(Error::Config("the bootstrap needs at least one replicate".into()));
        }
        Ok(ResamplePlan { b, master_seed, stratify_by_cell })
    }

    pub fn replicate_seed(&self, replicate: usize, cell: usize) -> u64 {
        derive_seed(self.master_seed, replicate as u64, cell as u64)
    }

    /// Runs `task(replicate, seed)` for every replicate in parallel and
    /// returns the outcomes in replicate order. `None` marks a failed
    /// replicate.
    pub fn run<T, F>(&self, task: F) -> Vec<Option<T>>
    where
        T: Send,
        F: Fn(usize, u64) -> Option<T> + Sync,
    {
        (0..self.b)
            .into_par_iter()
            .map(|b| task(b, self.replicate_seed(b, 0)))
            .collect()
    }
}

/// Draws `n` records with replacement. When stratified, each record is
/// replaced by a draw from its own covariate cell, so cell counts are
/// preserved exactly.
pub fn resample(data: &Dataset, seed: u64, stratified: bool) -> Dataset {
    let n = data.n();
    let mut rng = rng_from_seed(seed);
    if !stratified {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        return data.select(&idx);
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); data.n_cells()];
    for (i, &w) in data.w().iter().enumerate() {
        members[w as usize].push(i);
    }
    let idx: Vec<usize> = data
        .w()
        .iter()
        .map(|&w| {
            let pool = &members[w as usize];
            pool[rng.random_range(0..pool.len())]
        })
        .collect();
    data.select(&idx)
}

/// Order statistic at rank `ceil(level * B)` (one-based).
pub fn percentile(values: &[f64], level: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("percentile of an empty list".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("percentile level {level} is not in (0, 1)")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, level))
}

pub(crate) fn percentile_sorted(sorted: &[f64], level: f64) -> f64 {
    let b = sorted.len();
    // guard against level * B landing a hair above an integer
    let rank = ((level * b as f64) - 1e-9).ceil().max(1.0) as usize;
    sorted[rank.min(b) - 1]
}

/// Componentwise sample standard deviation across replicates.
pub fn boot_se(replicates: &[Vec<f64>]) -> Result<Vec<f64>> {
    if replicates.len() < 2 {
        return Err(Error::Domain("standard errors need at least two replicates".into()));
    }
    let dim = replicates[0].len();
    if replicates.iter().any(|r| r.len() != dim) {
        return Err(Error::Domain("replicates differ in length".into()));
    }
    let b = replicates.len() as f64;
    Ok((0..dim)
        .map(|k| {
            let mean = replicates.iter().map(|r| r[k]).sum::<f64>() / b;
            let ss = replicates.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>();
            (ss / (b - 1.0)).sqrt()
        })
        .collect())
}

/// One replicate's estimate and whether any parameter sat on a boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateEstimate {
    pub values: Vec<f64>,
    pub at_boundary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootSummary {
    pub std_errors: Vec<f64>,
    pub replicates_used: usize,
    pub replicates_dropped: usize,
    pub boundary_hits: usize,
}

/// Standard errors over the surviving replicates. Failed replicates are
/// dropped and counted; boundary hits trigger a warning since the
/// bootstrap is only valid for interior parameters.
pub fn summarize(outcomes: Vec<Option<ReplicateEstimate>>) -> Result<BootSummary> {
    let dropped = outcomes.iter().filter(|o| o.is_none()).count();
    let kept: Vec<ReplicateEstimate> = outcomes.into_iter().flatten().collect();
    let boundary_hits = kept.iter().filter(|r| r.at_boundary).count();
    let values: Vec<Vec<f64>> = kept.into_iter().map(|r| r.values).collect();
    let std_errors = boot_se(&values)?;
    if boundary_hits > 0 {
        log::warn!(
            "{boundary_hits} of {} bootstrap replicates have parameters at the boundary; \
             standard errors may be unreliable",
            values.len()
        );
    }
    if dropped > 0 {
        log::warn!("{dropped} bootstrap replicates failed and were dropped");
    }
    Ok(BootSummary { std_errors, replicates_used: values.len(), replicates_dropped: dropped, boundary_hits })
}
