//! Test for the presence of misclassification.
//!
//! Without measurement error, `Y` and `Z` are independent given the report
//! `X`. The statistic is the largest absolute discrepancy
//! `|f_YZ|X - f_Y|X f_Z|X|` over the grid, and its null distribution is
//! approximated by a centered nonparametric bootstrap.

use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{derive_seed, percentile_sorted, rng_from_seed};
use crate::dataset::{tabulate, Dataset, JointPmf, Support};
use crate::error::{Error, Result};

pub const DEFAULT_REPLICATES: usize = 999;
pub const MIN_REPLICATES: usize = 99;
pub const DEFAULT_MIN_CELL: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalValues {
    #[serde(rename = "0.90")]
    pub p90: f64,
    #[serde(rename = "0.95")]
    pub p95: f64,
    #[serde(rename = "0.99")]
    pub p99: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub statistic: f64,
    pub critical_values: CriticalValues,
    pub p_value: f64,
    pub n: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_cell: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_label: Option<String>,
    pub b_replicates: usize,
    /// `(x, y, z)` attaining the maximum, with one-based `x` and `z`.
    pub argmax_cell: (usize, usize, usize),
    /// Empty report strata skipped across all replicates.
    pub skipped_strata: usize,
}

impl TestReport {
    /// `***`, `**` or `*` when the statistic exceeds the 99%, 95% or 90%
    /// critical value.
    pub fn stars(&self) -> &'static str {
        let cv = &self.critical_values;
        if self.statistic > cv.p99 {
            "***"
        } else if self.statistic > cv.p95 {
            "**"
        } else if self.statistic > cv.p90 {
            "*"
        } else {
            ""
        }
    }

    pub fn rejects_at(&self, level: f64) -> bool {
        let cv = &self.critical_values;
        let c = if level <= 0.01 {
            cv.p99
        } else if level <= 0.05 {
            cv.p95
        } else {
            cv.p90
        };
        self.statistic > c
    }
}

/// Conditional discrepancies `f_YZ|X - f_Y|X f_Z|X` for every grid cell;
/// `None` where the report category has no mass.
pub fn discrepancy(weights: &[f64], support: Support) -> Vec<Option<f64>> {
    let (sx, sy, sz) = (support.s_x, support.s_y, support.s_z);
    let mut out = vec![None; support.cells()];
    for x in 0..sx {
        let block = &weights[x * sy * sz..(x + 1) * sy * sz];
        let mass: f64 = block.iter().sum();
        if mass <= 0.0 {
            continue;
        }
        let fy: Vec<f64> = (0..sy).map(|y| block[y * sz..(y + 1) * sz].iter().sum::<f64>() / mass).collect();
        let fz: Vec<f64> = (0..sz).map(|z| (0..sy).map(|y| block[y * sz + z]).sum::<f64>() / mass).collect();
        for y in 0..sy {
            for z in 0..sz {
                out[support.index(x, y, z)] = Some(block[y * sz + z] / mass - fy[y] * fz[z]);
            }
        }
    }
    out
}

/// Grid cells in the order used to break ties: by `x`, then `y` from the
/// top category down, then `z`.
fn tie_order(support: Support) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..support.s_x).flat_map(move |x| {
        (0..support.s_y).rev().flat_map(move |y| (0..support.s_z).map(move |z| (x, y, z)))
    })
}

fn max_abs(d: &[Option<f64>], support: Support) -> Result<(f64, (usize, usize, usize))> {
    let mut best: Option<(f64, (usize, usize, usize))> = None;
    for (x, y, z) in tie_order(support) {
        if let Some(v) = d[support.index(x, y, z)] {
            if best.is_none_or(|(b, _)| v.abs() > b) {
                best = Some((v.abs(), (x + 1, y, z + 1)));
            }
        }
    }
    best.ok_or_else(|| Error::Domain("the distribution has no mass".into()))
}

/// The statistic and the `(x, y, z)` cell attaining it.
pub fn ts_statistic(pmf: &JointPmf) -> Result<(f64, (usize, usize, usize))> {
    ts_from_weights(pmf.probs(), pmf.support())
}

/// Like [`ts_statistic`] on unnormalized nonnegative weights.
pub fn ts_from_weights(weights: &[f64], support: Support) -> Result<(f64, (usize, usize, usize))> {
    max_abs(&discrepancy(weights, support), support)
}

/// Multinomial resample of a table: the counts of `n` draws with
/// replacement from its records, by sequential conditional binomials.
fn resample_counts(counts: &[u64], n: u64, seed: u64) -> Vec<u64> {
    let mut rng = rng_from_seed(seed);
    let mut out = vec![0u64; counts.len()];
    let mut left = n;
    let mut mass_left = n;
    for (k, &c) in counts.iter().enumerate() {
        if left == 0 || mass_left == 0 {
            break;
        }
        if c == 0 {
            continue;
        }
        let draw = if c >= mass_left {
            left
        } else {
            Binomial::new(left, c as f64 / mass_left as f64)
                .expect("valid binomial")
                .sample(&mut rng)
        };
        out[k] = draw;
        left -= draw;
        mass_left -= c;
    }
    out
}

/// Bootstrap statistics for a table. Centered replicates subtract the
/// sample discrepancy cell by cell before the maximum; the number of empty
/// report strata skipped is returned alongside.
pub fn bootstrap_distribution(
    counts: &[u64],
    support: Support,
    b: usize,
    seed: u64,
    stream: u64,
    centered: bool,
) -> (Vec<f64>, usize) {
    let n: u64 = counts.iter().sum();
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let base = discrepancy(&weights, support);
    let results: Vec<(f64, usize)> = (0..b)
        .into_par_iter()
        .map(|r| {
            let rc = resample_counts(counts, n, derive_seed(seed, r as u64, stream));
            let rw: Vec<f64> = rc.iter().map(|&c| c as f64).collect();
            let d = discrepancy(&rw, support);
            let mut stat = 0.0f64;
            let mut skipped = 0;
            for x in 0..support.s_x {
                let first = support.index(x, 0, 0);
                if d[first].is_none() {
                    skipped += usize::from(base[first].is_some());
                    continue;
                }
                for idx in first..first + support.s_y * support.s_z {
                    if let (Some(v), Some(v0)) = (d[idx], base[idx]) {
                        stat = stat.max(if centered { (v - v0).abs() } else { v.abs() });
                    }
                }
            }
            (stat, skipped)
        })
        .collect();
    let skipped = results.iter().map(|r| r.1).sum();
    (results.into_iter().map(|r| r.0).collect(), skipped)
}

/// Bootstrap test on the pooled sample or one covariate cell.
pub fn bootstrap_test(data: &Dataset, w_cell: Option<usize>, b: usize, seed: u64) -> Result<TestReport> {
    if b < MIN_REPLICATES {
        return Err(Error::Config(format!("at least {MIN_REPLICATES} bootstrap replicates are required")));
    }
    let table = tabulate(data, w_cell)?;
    let support = table.support();
    let distinct = table.counts().iter().filter(|&&c| c > 0).count();
    if distinct <= 1 {
        return Err(Error::Test(format!(
            "the {} sample takes a single (x, y, z) value",
            w_cell.map_or("pooled".to_string(), |c| format!("cell {}", data.cell_label(c)))
        )));
    }
    let weights: Vec<f64> = table.counts().iter().map(|&c| c as f64).collect();
    let (statistic, argmax_cell) = ts_from_weights(&weights, support)?;
    let stream = w_cell.map_or(0, |c| c as u64 + 1);
    let (mut stats, skipped_strata) = bootstrap_distribution(table.counts(), support, b, seed, stream, true);
    let exceed = stats.iter().filter(|&&s| s >= statistic).count();
    stats.sort_by(f64::total_cmp);
    Ok(TestReport {
        statistic,
        critical_values: CriticalValues {
            p90: percentile_sorted(&stats, 0.90),
            p95: percentile_sorted(&stats, 0.95),
            p99: percentile_sorted(&stats, 0.99),
        },
        p_value: (1 + exceed) as f64 / (b + 1) as f64,
        n: table.n(),
        w_cell,
        w_label: w_cell.map(|c| data.cell_label(c)),
        b_replicates: b,
        argmax_cell,
        skipped_strata,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub w_cell: usize,
    pub w_label: String,
    pub n: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSuite {
    pub pooled: TestReport,
    pub cells: Vec<TestReport>,
    pub skipped: Vec<SkippedCell>,
    pub min_cell: usize,
}

impl TestSuite {
    /// Pooled report first, then the cells in index order.
    pub fn reports(&self) -> Vec<&TestReport> {
        std::iter::once(&self.pooled).chain(&self.cells).collect()
    }
}

/// Tests the pooled sample and every covariate cell with at least
/// `min_cell` records. Cells whose sample is degenerate are reported as
/// skipped.
pub fn conditional_test_suite(data: &Dataset, b: usize, seed: u64, min_cell: usize) -> Result<TestSuite> {
    let pooled = bootstrap_test(data, None, b, seed)?;
    let counts = data.cell_counts();
    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    for (cell, &n) in counts.iter().enumerate() {
        let skip = |reason: String| SkippedCell { w_cell: cell, w_label: data.cell_label(cell), n, reason };
        if n < min_cell.max(1) {
            skipped.push(skip(format!("{n} records, fewer than {min_cell}")));
            continue;
        }
        match bootstrap_test(data, Some(cell), b, seed) {
            Ok(r) => cells.push(r),
            Err(Error::Test(msg)) => skipped.push(skip(msg)),
            Err(e) => return Err(e),
        }
    }
    Ok(TestSuite { pooled, cells, skipped, min_cell })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{tabulate, Support};
    use crate::simulate::{draw, make_model, GeneratorSpec};

    #[test]
    fn product_distribution_has_zero_statistic() {
        let support = Support::new(2, 2, 3);
        let (fx, fy, fz) = ([0.4, 0.6], [[0.3, 0.7], [0.8, 0.2]], [[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]]);
        let probs = (0..12)
            .map(|i| {
                let (x, y, z) = support.triple(i);
                fx[x] * fy[x][y] * fz[x][z]
            })
            .collect();
        let pmf = JointPmf::from_weights(probs, support).unwrap();
        assert!(ts_statistic(&pmf).unwrap().0 < 1e-15);
    }

    #[test]
    fn hand_enumerated_example() {
        let support = Support::new(1, 2, 3);
        let mut probs = vec![0.0; 6];
        probs[support.index(0, 1, 0)] = 0.5;
        probs[support.index(0, 0, 2)] = 0.5;
        let pmf = JointPmf::new(probs, support).unwrap();
        let (ts, cell) = ts_statistic(&pmf).unwrap();
        assert!((ts - 0.25).abs() < 1e-15);
        assert_eq!(cell, (1, 1, 1));
    }

    #[test]
    fn zero_mass_strata_are_skipped_and_all_zero_errors() {
        let support = Support::new(2, 2, 2);
        let w = vec![1.0, 2.0, 2.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let (ts, cell) = ts_from_weights(&w, support).unwrap();
        assert_eq!(cell.0, 1);
        assert!((ts - (0.25 - 1.0 / 6.0)).abs() < 1e-15);
        assert!(matches!(ts_from_weights(&[0.0; 8], support), Err(Error::Domain(_))));
    }

    fn sample(strength: f64, n: usize, seed: u64) -> Dataset {
        let models = make_model(&GeneratorSpec::new(3, strength, 0.2, 11)).unwrap();
        draw(&models, &[1.0], &[], n, seed).unwrap().data
    }

    #[test]
    fn report_invariants() {
        let data = sample(0.5, 3000, 1);
        let r = bootstrap_test(&data, None, 199, 5).unwrap();
        let cv = r.critical_values;
        assert!(cv.p90 <= cv.p95 && cv.p95 <= cv.p99);
        assert!((0.0..=1.0).contains(&r.statistic));
        assert!(r.p_value > 0.0 && r.p_value <= 1.0);
        assert_eq!(r.n, 3000);
        assert_eq!(r, bootstrap_test(&data, None, 199, 5).unwrap());
    }

    #[test]
    fn p_value_follows_its_definition() {
        let data = sample(0.0, 800, 2);
        let table = tabulate(&data, None).unwrap();
        let r = bootstrap_test(&data, None, 99, 3).unwrap();
        let (stats, _) = bootstrap_distribution(table.counts(), table.support(), 99, 3, 0, true);
        let exceed = stats.iter().filter(|&&s| s >= r.statistic).count();
        assert_eq!(r.p_value, (1 + exceed) as f64 / 100.0);
    }

    #[test]
    fn record_order_does_not_matter() {
        let data = sample(0.3, 1000, 4);
        let rev: Vec<usize> = (0..data.n()).rev().collect();
        let shuffled = data.select(&rev);
        assert_eq!(bootstrap_test(&data, None, 99, 8).unwrap(), bootstrap_test(&shuffled, None, 99, 8).unwrap());
    }

    #[test]
    fn centering_lowers_the_bootstrap_mean() {
        let data = sample(0.6, 2000, 6);
        let table = tabulate(&data, None).unwrap();
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let (c, _) = bootstrap_distribution(table.counts(), table.support(), 199, 1, 0, true);
        let (u, _) = bootstrap_distribution(table.counts(), table.support(), 199, 1, 0, false);
        assert!(mean(c) < mean(u));
    }

    #[test]
    fn degenerate_sample_and_small_b_are_errors() {
        let data = Dataset::from_codes(vec![1; 5], vec![0; 5], vec![2; 5], vec![0; 5], 3, 3, vec![]).unwrap();
        assert!(matches!(bootstrap_test(&data, None, 99, 1), Err(Error::Test(_))));
        assert!(matches!(bootstrap_test(&sample(0.2, 100, 1), None, 50, 1), Err(Error::Config(_))));
    }

    #[test]
    fn stars_follow_critical_values() {
        let mut r = bootstrap_test(&sample(0.5, 500, 1), None, 99, 1).unwrap();
        r.critical_values = CriticalValues { p90: 0.01, p95: 0.02, p99: 0.03 };
        for (ts, want) in [(0.05, "***"), (0.025, "**"), (0.015, "*"), (0.005, "")] {
            r.statistic = ts;
            assert_eq!(r.stars(), want);
        }
    }

    #[test]
    fn suite_skips_empty_cells() {
        let spec = GeneratorSpec { n_w_cells: 4, ..GeneratorSpec::new(3, 0.3, 0.2, 3) };
        let models = make_model(&spec).unwrap();
        // the second covariate is always 0: cells 2 and 3 are empty
        let data = draw(&models, &[0.5, 0.5, 0.0, 0.0], &spec.w_names(), 1000, 2).unwrap().data;
        let suite = conditional_test_suite(&data, 99, 4, DEFAULT_MIN_CELL).unwrap();
        assert_eq!(suite.cells.len(), 2);
        assert_eq!(suite.skipped.iter().map(|s| s.w_cell).collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(suite.reports().len(), 3);
        let rev: Vec<usize> = (0..data.n()).rev().collect();
        assert_eq!(suite, conditional_test_suite(&data.select(&rev), 99, 4, DEFAULT_MIN_CELL).unwrap());
    }
}
