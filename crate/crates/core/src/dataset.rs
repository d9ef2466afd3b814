//! Survey ingestion, discretization and contingency tables.
//!
//! Records carry three measures of the same latent state, a reported
//! outcome `x`, a binary auxiliary `y` and a second measure `z`, plus a
//! vector of binary covariates packed into a single cell index `w`.
//! Codes are stored as they appear in reports: `x` in `1..=S_X`, `y` in
//! `{0, 1}`, `z` in `1..=S_Z`. Tables and pmfs are dense arrays and use
//! zero-based category indices.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest number of binary covariates; 2^8 cells is already far beyond
/// what survey subsamples can support.
pub const MAX_COVARIATES: usize = 8;

const DEFAULT_MISSING: [&str; 5] = ["", "NA", "NaN", "nan", "."];

/// How the binary auxiliary column is coded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum YBinning {
    /// `"median"`: 1 iff the value is strictly above the sample median.
    Named(String),
    /// `{ threshold = t }`: 1 iff the value is strictly above `t`.
    Threshold { threshold: f64 },
}

/// How the second-measure column is coded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ZBinning {
    /// `"tercile"`: nearest-rank 33rd and 66th percentiles, ties to the lower bin.
    Named(String),
    /// `{ cuts = [c1, c2, ...] }`: code is one plus the number of cuts the value exceeds.
    Cuts { cuts: Vec<f64> },
}

/// Column mapping and discretization rules, read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub x_column: String,
    pub y_column: String,
    pub z_column: String,
    #[serde(default)]
    pub w_columns: Vec<String>,
    /// Group `k` (zero-based) of raw codes maps to reported code `k + 1`.
    pub x_recode: Vec<Vec<i64>>,
    pub y_binning: YBinning,
    pub z_binning: ZBinning,
    /// Covariate columns that hold raw reals and are median split on ingest.
    #[serde(default)]
    pub w_median_split: Vec<String>,
    /// Cell contents treated as missing. Defaults to `"", NA, NaN, nan, .`.
    #[serde(default)]
    pub missing_values: Option<Vec<String>>,
}

impl Schema {
    pub fn from_toml_str(text: &str) -> Result<Schema> {
        let schema: Schema =
            toml::from_str(text).map_err(|e| Error::Schema(format!("cannot parse schema: {e}")))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_columns.len() > MAX_COVARIATES {
            return Err(Error::Schema(format!(
                "{} covariate columns given, at most {MAX_COVARIATES} are supported",
                self.w_columns.len()
            )));
        }
        if self.x_recode.len() < 2 {
            return Err(Error::Schema("x_recode needs at least two groups".into()));
        }
        let mut seen = BTreeMap::new();
        for (group, codes) in self.x_recode.iter().enumerate() {
            if codes.is_empty() {
                return Err(Error::Schema(format!("x_recode group {} is empty", group + 1)));
            }
            for &code in codes {
                if let Some(prev) = seen.insert(code, group) {
                    return Err(Error::Schema(format!(
                        "raw x code {code} appears in groups {} and {}",
                        prev + 1,
                        group + 1
                    )));
                }
            }
        }
        match &self.y_binning {
            YBinning::Named(name) if name != "median" => {
                return Err(Error::Schema(format!("unknown y_binning `{name}`")));
            }
            YBinning::Threshold { threshold } if !threshold.is_finite() => {
                return Err(Error::Schema("y_binning threshold must be finite".into()));
            }
            _ => {}
        }
        match &self.z_binning {
            ZBinning::Named(name) if name != "tercile" => {
                return Err(Error::Schema(format!("unknown z_binning `{name}`")));
            }
            ZBinning::Cuts { cuts } => {
                if cuts.is_empty() || cuts.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::Schema(
                        "z_binning cuts must be nonempty and strictly increasing".into(),
                    ));
                }
            }
            _ => {}
        }
        for name in &self.w_median_split {
            if !self.w_columns.contains(name) {
                return Err(Error::Schema(format!(
                    "w_median_split column `{name}` is not listed in w_columns"
                )));
            }
        }
        Ok(())
    }

    pub fn s_x(&self) -> usize {
        self.x_recode.len()
    }

    pub fn s_z(&self) -> usize {
        match &self.z_binning {
            ZBinning::Named(_) => 3,
            ZBinning::Cuts { cuts } => cuts.len() + 1,
        }
    }

    fn recode_x(&self, raw: i64) -> Option<u8> {
        self.x_recode
            .iter()
            .position(|group| group.contains(&raw))
            .map(|g| (g + 1) as u8)
    }

    fn is_missing(&self, field: &str) -> bool {
        let field = field.trim();
        match &self.missing_values {
            Some(list) => field.is_empty() || list.iter().any(|m| m == field),
            None => DEFAULT_MISSING.contains(&field),
        }
    }
}

/// Category counts of the three measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Support {
    pub s_x: usize,
    pub s_y: usize,
    pub s_z: usize,
}

impl Support {
    pub fn new(s_x: usize, s_y: usize, s_z: usize) -> Support {
        Support { s_x, s_y, s_z }
    }

    pub fn cells(&self) -> usize {
        self.s_x * self.s_y * self.s_z
    }

    /// Flat index of the zero-based category triple.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.s_y + y) * self.s_z + z
    }

    /// Inverse of [`Support::index`].
    pub fn triple(&self, idx: usize) -> (usize, usize, usize) {
        let z = idx % self.s_z;
        let rest = idx / self.s_z;
        (rest / self.s_y, rest % self.s_y, z)
    }
}

/// Discretized records. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Vec<u8>,
    y: Vec<u8>,
    z: Vec<u8>,
    w: Vec<u16>,
    support: Support,
    w_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from already coded columns, checking every code
    /// against the declared support.
    pub fn from_codes(
        x: Vec<u8>,
        y: Vec<u8>,
        z: Vec<u8>,
        w: Vec<u16>,
        s_x: usize,
        s_z: usize,
        w_names: Vec<String>,
    ) -> Result<Dataset> {
        let n = x.len();
        if n == 0 {
            return Err(Error::Data("dataset has no records".into()));
        }
        if y.len() != n || z.len() != n || w.len() != n {
            return Err(Error::Data("column lengths differ".into()));
        }
        if w_names.len() > MAX_COVARIATES {
            return Err(Error::Data(format!("at most {MAX_COVARIATES} covariates")));
        }
        let n_cells = 1usize << w_names.len();
        for i in 0..n {
            if x[i] == 0 || x[i] as usize > s_x {
                return Err(Error::Data(format!("record {i}: x code {} outside 1..={s_x}", x[i])));
            }
            if y[i] > 1 {
                return Err(Error::Data(format!("record {i}: y code {} is not binary", y[i])));
            }
            if z[i] == 0 || z[i] as usize > s_z {
                return Err(Error::Data(format!("record {i}: z code {} outside 1..={s_z}", z[i])));
            }
            if w[i] as usize >= n_cells {
                return Err(Error::Data(format!("record {i}: cell {} out of range", w[i])));
            }
        }
        Ok(Dataset { x, y, z, w, support: Support::new(s_x, 2, s_z), w_names })
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn support(&self) -> Support {
        self.support
    }

    pub fn x(&self) -> &[u8] {
        &self.x
    }

    pub fn y(&self) -> &[u8] {
        &self.y
    }

    pub fn z(&self) -> &[u8] {
        &self.z
    }

    pub fn w(&self) -> &[u16] {
        &self.w
    }

    pub fn w_names(&self) -> &[String] {
        &self.w_names
    }

    pub fn n_cells(&self) -> usize {
        1 << self.w_names.len()
    }

    /// Flat (x, y, z) table index of record `i`.
    #[inline]
    pub fn cell_of(&self, i: usize) -> usize {
        self.support.index(
            self.x[i] as usize - 1,
            self.y[i] as usize,
            self.z[i] as usize - 1,
        )
    }

    /// Record counts per covariate cell.
    pub fn cell_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_cells()];
        for &w in &self.w {
            counts[w as usize] += 1;
        }
        counts
    }

    /// Empirical covariate-cell distribution.
    pub fn cell_weights(&self) -> Vec<f64> {
        let n = self.n() as f64;
        self.cell_counts().into_iter().map(|c| c as f64 / n).collect()
    }

    /// Display label of a cell, `"0"` for the all-zero cell and otherwise
    /// the covariates that are switched on, joined with `+`.
    pub fn cell_label(&self, cell: usize) -> String {
        cell_label(&self.w_names, cell)
    }

    /// Records at the given positions, in that order; repeats allowed.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: indices.iter().map(|&i| self.x[i]).collect(),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            z: indices.iter().map(|&i| self.z[i]).collect(),
            w: indices.iter().map(|&i| self.w[i]).collect(),
            support: self.support,
            w_names: self.w_names.clone(),
        }
    }

    /// Records belonging to one covariate cell.
    pub fn subset(&self, cell: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..self.n()).filter(|&i| self.w[i] as usize == cell).collect();
        if idx.is_empty() {
            return Err(Error::Data(format!(
                "covariate cell {cell} ({}) has no records",
                self.cell_label(cell)
            )));
        }
        Ok(self.select(&idx))
    }

    /// Writes the coded records as CSV with columns `x,y,z` followed by
    /// the covariate names, each holding 0 or 1.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["x".to_string(), "y".to_string(), "z".to_string()];
        header.extend(self.w_names.iter().cloned());
        writer.write_record(&header)?;
        let k = self.w_names.len();
        for i in 0..self.n() {
            let mut row = vec![self.x[i].to_string(), self.y[i].to_string(), self.z[i].to_string()];
            for bit in 0..k {
                row.push(((self.w[i] >> bit) & 1).to_string());
            }
            writer.write_record(&row)?;
        }
        writer.flush()?;
        Ok(())
    }
}

pub fn cell_label(w_names: &[String], cell: usize) -> String {
    let on: Vec<&str> = w_names
        .iter()
        .enumerate()
        .filter(|(bit, _)| (cell >> bit) & 1 == 1)
        .map(|(_, name)| name.as_str())
        .collect();
    if on.is_empty() {
        "0".to_string()
    } else {
        on.join("+")
    }
}

/// Tally of rows dropped during ingestion, by reason.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub rows_read: usize,
    pub rows_kept: usize,
    pub missing_field: usize,
    pub unparsable: usize,
    pub unmapped_x: usize,
    pub invalid_w: usize,
}

impl ExclusionReport {
    pub fn excluded(&self) -> usize {
        self.rows_read - self.rows_kept
    }
}

fn parse_real(field: &str) -> Option<f64> {
    field.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn parse_code(field: &str) -> Option<i64> {
    let field = field.trim();
    field.parse::<i64>().ok().or_else(|| {
        let v = parse_real(field)?;
        (v.fract() == 0.0 && v.abs() < 1e15).then_some(v as i64)
    })
}

/// Reads comma-delimited records, applies the schema's recodes and
/// binning, and drops incomplete rows listwise.
///
/// Median and percentile cut points are computed on the rows that survive
/// the missing-data and recode checks.
pub fn ingest<R: Read>(source: R, schema: &Schema) -> Result<(Dataset, ExclusionReport)> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("input has no column `{name}`")))
    };
    let x_col = column(&schema.x_column)?;
    let y_col = column(&schema.y_column)?;
    let z_col = column(&schema.z_column)?;
    let w_cols = schema.w_columns.iter().map(|c| column(c)).collect::<Result<Vec<_>>>()?;
    let w_split: Vec<bool> =
        schema.w_columns.iter().map(|c| schema.w_median_split.contains(c)).collect();

    let mut report = ExclusionReport::default();
    let mut x = Vec::new();
    let mut y_raw = Vec::new();
    let mut z_raw = Vec::new();
    let mut w_raw: Vec<Vec<f64>> = Vec::new();

    for record in reader.records() {
        let record = record?;
        report.rows_read += 1;
        let mut needed = vec![x_col, y_col, z_col];
        needed.extend(&w_cols);
        if needed.iter().any(|&c| record.get(c).is_none_or(|f| schema.is_missing(f))) {
            report.missing_field += 1;
            continue;
        }
        let Some(x_code) = parse_code(&record[x_col]) else {
            report.unparsable += 1;
            continue;
        };
        let (Some(yv), Some(zv)) = (parse_real(&record[y_col]), parse_real(&record[z_col])) else {
            report.unparsable += 1;
            continue;
        };
        let Some(wv) = w_cols.iter().map(|&c| parse_real(&record[c])).collect::<Option<Vec<_>>>()
        else {
            report.unparsable += 1;
            continue;
        };
        let Some(xc) = schema.recode_x(x_code) else {
            report.unmapped_x += 1;
            continue;
        };
        if wv.iter().zip(&w_split).any(|(&v, &split)| !split && v != 0.0 && v != 1.0) {
            report.invalid_w += 1;
            continue;
        }
        x.push(xc);
        y_raw.push(yv);
        z_raw.push(zv);
        w_raw.push(wv);
    }

    report.rows_kept = x.len();
    if x.is_empty() {
        return Err(Error::Data(format!(
            "no usable records ({} read, all excluded)",
            report.rows_read
        )));
    }

    let y = match &schema.y_binning {
        YBinning::Named(_) => median_split(&y_raw)?,
        YBinning::Threshold { threshold } => {
            y_raw.iter().map(|&v| u8::from(v > *threshold)).collect()
        }
    };
    let z = match &schema.z_binning {
        ZBinning::Named(_) => tercile_bin(&z_raw)?,
        ZBinning::Cuts { cuts } => z_raw.iter().map(|&v| bin_by_cuts(v, cuts)).collect(),
    };

    let mut w = vec![0u16; x.len()];
    for (bit, &split) in w_split.iter().enumerate() {
        let column: Vec<f64> = w_raw.iter().map(|r| r[bit]).collect();
        let codes = if split {
            median_split(&column)?
        } else {
            column.iter().map(|&v| v as u8).collect()
        };
        for (cell, code) in w.iter_mut().zip(codes) {
            *cell |= u16::from(code) << bit;
        }
    }

    let data =
        Dataset::from_codes(x, y, z, w, schema.s_x(), schema.s_z(), schema.w_columns.clone())?;
    Ok((data, report))
}

fn bin_by_cuts(value: f64, cuts: &[f64]) -> u8 {
    1 + cuts.iter().filter(|&&c| value > c).count() as u8
}

/// Sample median, with the midpoint of the two central order statistics
/// for an even count.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Data("median of an empty list".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

/// Codes 1 for values strictly above the sample median, 0 otherwise.
pub fn median_split(values: &[f64]) -> Result<Vec<u8>> {
    let m = median(values)?;
    Ok(values.iter().map(|&v| u8::from(v > m)).collect())
}

/// Nearest-rank percentile: the order statistic at rank `ceil(p * n)`.
pub fn nearest_rank_percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Three-way split at the 33rd and 66th nearest-rank percentiles. A value
/// equal to a cut point falls in the lower bin.
pub fn tercile_bin(values: &[f64]) -> Result<Vec<u8>> {
    if values.is_empty() {
        return Err(Error::Data("tercile binning of an empty list".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cuts = [nearest_rank_percentile(&sorted, 0.33), nearest_rank_percentile(&sorted, 0.66)];
    Ok(values.iter().map(|&v| bin_by_cuts(v, &cuts)).collect())
}

/// Cell counts over the full (x, y, z) grid for one covariate cell or the
/// pooled sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    counts: Vec<u64>,
    n: u64,
    support: Support,
    w_cell: Option<usize>,
}

impl ContingencyTable {
    pub fn from_counts(counts: Vec<u64>, support: Support, w_cell: Option<usize>) -> Result<Self> {
        if counts.len() != support.cells() {
            return Err(Error::Data(format!(
                "{} counts given for a grid of {} cells",
                counts.len(),
                support.cells()
            )));
        }
        let n = counts.iter().sum();
        Ok(ContingencyTable { counts, n, support, w_cell })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn support(&self) -> Support {
        self.support
    }

    pub fn w_cell(&self) -> Option<usize> {
        self.w_cell
    }

    /// Count at zero-based category indices.
    pub fn get(&self, x: usize, y: usize, z: usize) -> u64 {
        self.counts[self.support.index(x, y, z)]
    }
}

/// Tabulates the pooled sample, or one covariate cell when given.
pub fn tabulate(data: &Dataset, w_cell: Option<usize>) -> Result<ContingencyTable> {
    let support = data.support();
    let mut counts = vec![0u64; support.cells()];
    for i in 0..data.n() {
        if w_cell.is_none_or(|c| data.w[i] as usize == c) {
            counts[data.cell_of(i)] += 1;
        }
    }
    let table = ContingencyTable::from_counts(counts, support, w_cell)?;
    if table.n == 0 {
        let cell = w_cell.unwrap_or_default();
        return Err(Error::Data(format!(
            "covariate cell {cell} ({}) has no records",
            data.cell_label(cell)
        )));
    }
    Ok(table)
}

/// A probability mass function over the (x, y, z) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPmf {
    probs: Vec<f64>,
    support: Support,
}

impl JointPmf {
    /// Accepts probabilities that are nonnegative and sum to one within 1e-12.
    pub fn new(probs: Vec<f64>, support: Support) -> Result<JointPmf> {
        if probs.len() != support.cells() {
            return Err(Error::Domain(format!(
                "{} probabilities for a grid of {} cells",
                probs.len(),
                support.cells()
            )));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Domain("probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("probabilities sum to {total}, not 1")));
        }
        Ok(JointPmf { probs, support })
    }

    /// Normalizes nonnegative weights into a pmf.
    pub fn from_weights(weights: Vec<f64>, support: Support) -> Result<JointPmf> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Domain("weights must be nonnegative with positive total".into()));
        }
        let probs = weights.into_iter().map(|w| w / total).collect();
        Ok(JointPmf { probs, support })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn support(&self) -> Support {
        self.support
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.probs[self.support.index(x, y, z)]
    }

    /// Marginal distribution of the reported outcome.
    pub fn marginal_x(&self) -> Vec<f64> {
        let s = self.support;
        (0..s.s_x)
            .map(|x| (0..s.s_y).flat_map(|y| (0..s.s_z).map(move |z| (y, z))).map(|(y, z)| self.get(x, y, z)).sum())
            .collect()
    }
}

/// Frequency estimator: counts divided by the sample size.
pub fn frequency_pmf(table: &ContingencyTable) -> JointPmf {
    let n = table.n as f64;
    JointPmf { probs: table.counts.iter().map(|&c| c as f64 / n).collect(), support: table.support }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema {
            x_column: "ls".into(),
            y_column: "neuro".into(),
            z_column: "ghq".into(),
            w_columns: vec!["fem".into()],
            x_recode: vec![vec![1, 2], vec![3, 4, 5], vec![6, 7]],
            y_binning: YBinning::Threshold { threshold: 3.5 },
            z_binning: ZBinning::Cuts { cuts: vec![10.0, 20.0] },
            w_median_split: vec![],
            missing_values: None,
        }
    }

    #[test]
    fn recodes_seven_point_scale() {
        let csv = "ls,neuro,ghq,fem\n6,4,5,0\n7,2,15,1\n2,5,30,0\n";
        let (data, report) = ingest(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(data.x(), &[3, 3, 1]);
        assert_eq!(data.y(), &[1, 0, 1]);
        assert_eq!(data.z(), &[1, 2, 3]);
        assert_eq!(data.w(), &[0, 1, 0]);
        assert_eq!(report.excluded(), 0);
    }

    #[test]
    fn header_only_is_a_data_error() {
        let err = ingest("ls,neuro,ghq,fem\n".as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn missing_column_is_a_schema_error() {
        let err = ingest("ls,neuro,fem\n1,2,0\n".as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn exclusion_tally_counts_each_reason() {
        // ten rows: rows 3 and 7 carry the unmapped code 9, row 5 a missing
        // z, row 9 a non-binary covariate
        let csv = "ls,neuro,ghq,fem\n\
                   1,2,3,0\n2,3,4,1\n9,1,1,0\n4,5,6,1\n5,5,,0\n\
                   6,1,2,1\n9,4,4,0\n7,7,7,1\n3,3,3,2\n1,1,1,0\n";
        let (data, report) = ingest(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(report.rows_read, 10);
        assert_eq!(report.unmapped_x, 2);
        assert_eq!(report.missing_field, 1);
        assert_eq!(report.invalid_w, 1);
        assert_eq!(report.rows_kept, 6);
        assert_eq!(data.n(), 6);
    }

    #[test]
    fn median_split_examples() {
        assert_eq!(median_split(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), vec![0, 0, 0, 1, 1]);
        assert_eq!(median_split(&[2.0; 4]).unwrap(), vec![0; 4]);
        assert_eq!(median_split(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0, 0, 1, 1]);
        assert!(median_split(&[]).is_err());
    }

    #[test]
    fn tercile_examples() {
        let scale: Vec<f64> = (0..36).map(f64::from).collect();
        let codes = tercile_bin(&scale).unwrap();
        for code in 1..=3u8 {
            assert_eq!(codes.iter().filter(|&&c| c == code).count(), 12);
        }
        assert_eq!(tercile_bin(&[4.0; 7]).unwrap(), vec![1; 7]);
        assert!(tercile_bin(&[]).is_err());
    }

    #[test]
    fn tercile_ties_go_to_lower_bin() {
        // nearest-rank 33rd percentile of ten values is the 4th order statistic
        let values = [1.0, 2.0, 3.0, 3.0, 3.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        let codes = tercile_bin(&values).unwrap();
        assert_eq!(codes, vec![1, 1, 1, 1, 1, 2, 2, 3, 3, 3]);
    }

    #[test]
    fn tabulate_two_identical_records() {
        let data =
            Dataset::from_codes(vec![1, 1], vec![0, 0], vec![1, 1], vec![0, 0], 3, 3, vec![])
                .unwrap();
        let table = tabulate(&data, None).unwrap();
        assert_eq!(table.get(0, 0, 0), 2);
        assert_eq!(table.counts().iter().sum::<u64>(), 2);
        let pmf = frequency_pmf(&table);
        assert_eq!(pmf.get(0, 0, 0), 1.0);
        assert_eq!(pmf.probs().iter().filter(|&&p| p == 0.0).count(), 17);
    }

    #[test]
    fn tabulate_matches_hand_tally() {
        // 12 records over S = 2x2x2 with one covariate
        let x = vec![1, 1, 2, 2, 1, 2, 1, 1, 2, 2, 2, 1];
        let y = vec![0, 1, 0, 1, 0, 0, 1, 1, 1, 0, 1, 0];
        let z = vec![1, 2, 2, 1, 1, 2, 2, 2, 1, 1, 2, 1];
        let w = vec![0, 0, 0, 0, 1, 1, 1, 1, 0, 1, 0, 0];
        let data = Dataset::from_codes(x, y, z, w, 2, 2, vec!["fem".into()]).unwrap();
        let pooled = tabulate(&data, None).unwrap();
        // hand tally (x,y,z): (1,0,1)=3 (1,1,2)=3 (2,0,2)=2 (2,1,1)=2 (2,0,1)=1 (2,1,2)=1
        let expect = [3, 0, 0, 3, 1, 2, 2, 1];
        assert_eq!(pooled.counts(), &expect);
        let men = tabulate(&data, Some(0)).unwrap();
        let women = tabulate(&data, Some(1)).unwrap();
        assert_eq!(men.n() + women.n(), 12);
        assert_eq!(men.counts(), &[2, 0, 0, 1, 0, 1, 2, 1]);
        assert_eq!(women.counts(), &[1, 0, 0, 2, 1, 1, 0, 0]);
    }

    #[test]
    fn empty_cell_is_a_data_error_naming_the_cell() {
        let data =
            Dataset::from_codes(vec![1], vec![0], vec![1], vec![0], 3, 3, vec!["fem".into()])
                .unwrap();
        let err = tabulate(&data, Some(1)).unwrap_err();
        assert!(err.to_string().contains("fem"));
    }

    #[test]
    fn uniform_counts_give_uniform_pmf() {
        let support = Support::new(3, 2, 3);
        let table = ContingencyTable::from_counts(vec![5; 18], support, None).unwrap();
        let pmf = frequency_pmf(&table);
        assert!(pmf.probs().iter().all(|&p| (p - 1.0 / 18.0).abs() < 1e-15));
    }

    #[test]
    fn schema_round_trips_through_toml() {
        let text = r#"
            x_column = "ls"
            y_column = "neuro"
            z_column = "ghq"
            w_columns = ["degree", "fem", "illness", "inc", "mrd"]
            w_median_split = ["inc"]
            x_recode = [[1, 2], [3, 4, 5], [6, 7]]
            y_binning = "median"
            z_binning = "tercile"
        "#;
        let schema = Schema::from_toml_str(text).unwrap();
        assert_eq!(schema.s_x(), 3);
        assert_eq!(schema.s_z(), 3);
        let again = Schema::from_toml_str(&schema.to_toml_string()).unwrap();
        assert_eq!(schema, again);
    }

    #[test]
    fn schema_rejects_bad_grammar() {
        let base = |extra: &str| {
            format!(
                "x_column = \"a\"\ny_column = \"b\"\nz_column = \"c\"\n{extra}\n\
                 y_binning = \"median\"\nz_binning = \"tercile\"\n"
            )
        };
        assert!(Schema::from_toml_str(&base("x_recode = [[1], [1, 2]]")).is_err());
        assert!(Schema::from_toml_str(&base("x_recode = [[1]]")).is_err());
        let nine = "w_columns = [\"a\",\"b\",\"c\",\"d\",\"e\",\"f\",\"g\",\"h\",\"i\"]\nx_recode = [[1],[2]]";
        assert!(Schema::from_toml_str(&base(nine)).is_err());
    }
}
