//! Models and synthetic data with known ground truth.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{derive_seed, rng_from_seed};
use crate::dataset::{Dataset, Schema, YBinning, ZBinning};
use crate::error::{Error, Result};
use crate::latent::LatentConditional;
use crate::linalg;
use crate::model::MisclassificationModel;
use crate::probit::norm_cdf;

pub const MAX_ATTEMPTS: usize = 1000;

/// Ordered-probit latent distribution per cell:
/// `P[X* <= i | q] = Phi((mu_i - q' beta) / sigma(q))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbitParams {
    /// Intercept first, then one slope per covariate.
    pub beta: Vec<f64>,
    /// One scale per covariate cell.
    pub sigma: Vec<f64>,
    /// `mu_1 = 0, mu_2 = 1, mu_3, ...`, strictly increasing.
    pub cutpoints: Vec<f64>,
}

impl ProbitParams {
    /// Scales from an exponential index `sigma(q) = exp(q' gamma)`.
    pub fn with_exponential_scale(beta: Vec<f64>, gamma: &[f64], cutpoints: Vec<f64>) -> Self {
        let k = beta.len() - 1;
        let sigma = (0..1usize << k)
            .map(|cell| {
                let idx: f64 =
                    gamma[0] + (0..k).map(|b| gamma[b + 1] * ((cell >> b) & 1) as f64).sum::<f64>();
                idx.exp()
            })
            .collect();
        ProbitParams { beta, sigma, cutpoints }
    }

    pub fn validate(&self, n_cells: usize) -> Result<()> {
        if self.beta.len() < 1 || 1usize << (self.beta.len() - 1) != n_cells {
            return Err(Error::Config(format!(
                "{} coefficients do not match {n_cells} covariate cells",
                self.beta.len()
            )));
        }
        if self.sigma.len() != n_cells || self.sigma.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("need one positive sigma per covariate cell".into()));
        }
        let c = &self.cutpoints;
        if c.len() < 2 || c[0] != 0.0 || c[1] != 1.0 || c.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config(
                "cutpoints must start 0, 1 and increase strictly".into(),
            ));
        }
        Ok(())
    }

    /// Latent distribution in one cell.
    pub fn cell_probs(&self, cell: usize) -> Vec<f64> {
        let xb = self.beta[0]
            + (1..self.beta.len()).map(|b| self.beta[b] * ((cell >> (b - 1)) & 1) as f64).sum::<f64>();
        let s = self.sigma[cell];
        let mut prev = 0.0;
        let mut probs: Vec<f64> = self
            .cutpoints
            .iter()
            .map(|m| {
                let c = norm_cdf((m - xb) / s);
                let p = c - prev;
                prev = c;
                p
            })
            .collect();
        probs.push(1.0 - prev);
        probs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub s_x: usize,
    pub s_z: usize,
    /// A power of two: the cells of `log2(n_w_cells)` binary covariates.
    #[serde(default = "one")]
    pub n_w_cells: usize,
    /// 0 gives an identity `M_X|X*`.
    pub misclassification_strength: f64,
    /// Minimum pairwise gap of `P(Y = 1 | x*)`.
    pub eigenvalue_separation: f64,
    pub seed: u64,
    /// Off-diagonal weight of `M_Z|X*`.
    #[serde(default = "default_z_noise")]
    pub z_noise: f64,
    /// Lower bound on every latent state's probability when drawn at random.
    #[serde(default = "default_min_latent_mass")]
    pub min_latent_mass: f64,
    /// Minimum step between adjacent entries of the last row of `M_X|X*`.
    #[serde(default = "default_ord_margin")]
    pub ord_margin: f64,
    /// Cell probabilities; uniform when absent.
    #[serde(default)]
    pub cell_weights: Option<Vec<f64>>,
    /// Latent distributions from an ordered probit instead of at random.
    #[serde(default)]
    pub probit: Option<ProbitParams>,
}

fn one() -> usize {
    1
}

fn default_z_noise() -> f64 {
    0.3
}

fn default_min_latent_mass() -> f64 {
    0.1
}

fn default_ord_margin() -> f64 {
    0.02
}

impl GeneratorSpec {
    pub fn new(s: usize, strength: f64, separation: f64, seed: u64) -> Self {
        GeneratorSpec {
            s_x: s,
            s_z: s,
            n_w_cells: 1,
            misclassification_strength: strength,
            eigenvalue_separation: separation,
            seed,
            z_noise: default_z_noise(),
            min_latent_mass: default_min_latent_mass(),
            ord_margin: default_ord_margin(),
            cell_weights: None,
            probit: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: GeneratorSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("cannot parse generator spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s_x < 2 || self.s_z < 2 {
            return Err(Error::Config("supports need at least two categories".into()));
        }
        if !self.n_w_cells.is_power_of_two() || self.n_w_cells > 1 << crate::dataset::MAX_COVARIATES {
            return Err(Error::Config("n_w_cells must be a power of two up to 256".into()));
        }
        if !(0.0..=1.0).contains(&self.misclassification_strength) || !(0.0..1.0).contains(&self.z_noise) {
            return Err(Error::Config("strength and z_noise must lie in [0, 1]".into()));
        }
        if !(self.eigenvalue_separation >= 0.0) || self.eigenvalue_separation * (self.s_x - 1) as f64 > 0.9 {
            return Err(Error::Config(format!(
                "eigenvalue separation {} cannot be met by {} states in [0.05, 0.95]",
                self.eigenvalue_separation, self.s_x
            )));
        }
        if !(self.min_latent_mass >= 0.0) || self.min_latent_mass * self.s_x as f64 >= 1.0 {
            return Err(Error::Config("min_latent_mass is too large".into()));
        }
        if !(self.ord_margin >= 0.0) || self.ord_margin * (self.s_x - 1) as f64 >= 1.0 {
            return Err(Error::Config("ord_margin is too large".into()));
        }
        if let Some(w) = &self.cell_weights {
            let total: f64 = w.iter().sum();
            if w.len() != self.n_w_cells || w.iter().any(|&v| v < 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::Config("cell_weights must be a distribution over the cells".into()));
            }
        }
        if let Some(p) = &self.probit {
            p.validate(self.n_w_cells)?;
            if p.cutpoints.len() + 1 != self.s_x {
                return Err(Error::Config("probit cutpoints do not match s_x".into()));
            }
        }
        Ok(())
    }

    pub fn n_covariates(&self) -> usize {
        self.n_w_cells.trailing_zeros() as usize
    }

    pub fn w_names(&self) -> Vec<String> {
        (1..=self.n_covariates()).map(|i| format!("w{i}")).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.cell_weights
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.n_w_cells as f64; self.n_w_cells])
    }

    /// The schema under which [`Dataset::write_csv`] output of a simulated
    /// sample reads back unchanged.
    pub fn schema(&self) -> Schema {
        Schema {
            x_column: "x".into(),
            y_column: "y".into(),
            z_column: "z".into(),
            w_columns: self.w_names(),
            x_recode: (1..=self.s_x as i64).map(|c| vec![c]).collect(),
            y_binning: YBinning::Threshold { threshold: 0.5 },
            z_binning: ZBinning::Cuts { cuts: (1..self.s_z).map(|c| c as f64 + 0.5).collect() },
            w_median_split: Vec::new(),
            missing_values: None,
        }
    }
}

fn flat_simplex<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

fn mix_with_identity<R: Rng>(rng: &mut R, rows: usize, cols: usize, s: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for j in 0..cols {
        let d = flat_simplex(rng, rows);
        for i in 0..rows {
            let id = if i == j.min(rows - 1) { 1.0 } else { 0.0 };
            m[(i, j)] = (1.0 - s) * id + s * d[i];
        }
    }
    m
}

fn min_gap(v: &[f64]) -> f64 {
    let mut gap = f64::INFINITY;
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            gap = gap.min((v[i] - v[j]).abs());
        }
    }
    gap
}

/// Uniform draw of `k` points in `[0.05, 0.95]` with pairwise gaps of at
/// least `gap`, in random order.
fn spaced<R: Rng>(rng: &mut R, k: usize, gap: f64) -> Vec<f64> {
    let slack = (0.9 - gap * (k - 1) as f64).max(0.0);
    let mut u: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..=slack)).collect();
    u.sort_by(f64::total_cmp);
    let mut v: Vec<f64> = u.iter().enumerate().map(|(i, x)| 0.05 + x + gap * i as f64).collect();
    v.shuffle(rng);
    v
}

/// One model per covariate cell, each satisfying the ordering, rank and
/// eigenvalue-separation conditions.
pub fn make_model(spec: &GeneratorSpec) -> Result<Vec<MisclassificationModel>> {
    spec.validate()?;
    (0..spec.n_w_cells).map(|cell| make_cell_model(spec, cell)).collect()
}

fn make_cell_model(spec: &GeneratorSpec, cell: usize) -> Result<MisclassificationModel> {
    let (s, sz) = (spec.s_x, spec.s_z);
    let strength = spec.misclassification_strength;
    let mut rng = rng_from_seed(derive_seed(spec.seed, 0, cell as u64));
    let fail = |what: &str| {
        Error::Generator(format!(
            "no valid {what} for cell {cell} after {MAX_ATTEMPTS} draws; relax the generator settings"
        ))
    };
    for _ in 0..MAX_ATTEMPTS {
        let last = s - 1;
        let mx = redraw(&mut rng, |rng| {
            let mx = mix_with_identity(rng, s, s, strength);
            // the identity ties at zero below its corner, so strength 0 is exempt
            let ordered = (1..s).all(|j| mx[(last, j)] - mx[(last, j - 1)] > spec.ord_margin);
            (strength == 0.0 || ordered).then_some(mx)
        })
        .ok_or_else(|| fail("M_X|X*"))?;
        let fy = redraw(&mut rng, |rng| {
            let fy: Vec<f64> = (0..s).map(|_| rng.random_range(0.05..0.95)).collect();
            (min_gap(&fy) >= spec.eigenvalue_separation).then_some(fy)
        })
        .unwrap_or_else(|| spaced(&mut rng, s, spec.eigenvalue_separation));
        let mz = mix_with_identity(&mut rng, sz, s, spec.z_noise);
        let fs = match &spec.probit {
            Some(p) => p.cell_probs(cell),
            None => redraw(&mut rng, |rng| {
                let f = flat_simplex(rng, s);
                f.iter().all(|&p| p >= spec.min_latent_mass).then_some(f)
            })
            .ok_or_else(|| fail("f_X*"))?,
        };
        let model = MisclassificationModel::new(mx, DVector::from_vec(fy), mz, DVector::from_vec(fs))?
            .with_cell(Some(cell));
        let m_xz = &model.m_x_given_xstar
            * DMatrix::from_diagonal(&model.f_xstar)
            * model.m_z_given_xstar.transpose();
        let sv = linalg::singular_values(&m_xz);
        if sv.last().copied().unwrap_or(0.0) > 1e-4 * sv[0] {
            return Ok(model);
        }
    }
    Err(fail("model"))
}

fn redraw<R: Rng, T>(rng: &mut R, mut draw: impl FnMut(&mut R) -> Option<T>) -> Option<T> {
    (0..MAX_ATTEMPTS).find_map(|_| draw(rng))
}

/// Exact latent distributions of an ordered probit over all covariate cells.
pub fn probit_population(params: &ProbitParams, w_names: &[String], cell_weights: &[f64]) -> Result<LatentConditional> {
    let n_cells = 1usize << w_names.len();
    params.validate(n_cells)?;
    if cell_weights.len() != n_cells {
        return Err(Error::Config("one weight per cell is required".into()));
    }
    let entries = (0..n_cells)
        .map(|c| (c, cell_weights[c], params.cell_probs(c)))
        .collect();
    LatentConditional::new(w_names, entries)
}

/// A synthetic sample and its hidden latent states.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSample {
    pub data: Dataset,
    /// One-based latent state per record; never part of [`Dataset`].
    pub xstar: Vec<u8>,
}

impl SimulatedSample {
    /// Share of records whose report differs from the latent state.
    pub fn misclassification_rate(&self) -> f64 {
        let wrong = self.data.x().iter().zip(&self.xstar).filter(|(a, b)| a != b).count();
        wrong as f64 / self.xstar.len() as f64
    }

    pub fn write_truth_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x_star"])?;
        for v in &self.xstar {
            w.write_record([v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draws `n` records: the cell from `cell_weights`, then `x*` and the three
/// measures independently given `x*`.
pub fn draw(
    models: &[MisclassificationModel],
    cell_weights: &[f64],
    w_names: &[String],
    n: usize,
    seed: u64,
) -> Result<SimulatedSample> {
    if n == 0 {
        return Err(Error::Config("sample size must be at least 1".into()));
    }
    let n_cells = 1usize << w_names.len();
    if models.len() != n_cells || cell_weights.len() != n_cells {
        return Err(Error::Config(format!(
            "{} models and {} weights for {n_cells} cells",
            models.len(),
            cell_weights.len()
        )));
    }
    let (s, sz) = (models[0].s_x(), models[0].s_z());
    if models.iter().any(|m| m.s_x() != s || m.s_z() != sz) {
        return Err(Error::Config("cell models differ in support".into()));
    }
    let cells = WeightedIndex::new(cell_weights)
        .map_err(|e| Error::Config(format!("invalid cell weights: {e}")))?;
    let mut rng = rng_from_seed(derive_seed(seed, 0, u64::MAX));
    let w: Vec<u16> = (0..n).map(|_| cells.sample(&mut rng) as u16).collect();

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_cells];
    for (i, &c) in w.iter().enumerate() {
        members[c as usize].push(i);
    }
    let drawn: Vec<Vec<[u8; 4]>> = models
        .par_iter()
        .enumerate()
        .map(|(cell, model)| draw_cell(model, members[cell].len(), derive_seed(seed, 1, cell as u64)))
        .collect::<Result<_>>()?;

    let mut x = vec![0u8; n];
    let mut y = vec![0u8; n];
    let mut z = vec![0u8; n];
    let mut xstar = vec![0u8; n];
    for (cell, records) in drawn.into_iter().enumerate() {
        for (&i, r) in members[cell].iter().zip(records) {
            xstar[i] = r[0];
            x[i] = r[1];
            y[i] = r[2];
            z[i] = r[3];
        }
    }
    let data = Dataset::from_codes(x, y, z, w, s, sz, w_names.to_vec())?;
    Ok(SimulatedSample { data, xstar })
}

fn column_sampler(m: &DMatrix<f64>, j: usize) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(m.column(j).iter().map(|v| v.max(0.0)))
        .map_err(|e| Error::Config(format!("invalid model column: {e}")))
}

fn draw_cell(model: &MisclassificationModel, count: usize, seed: u64) -> Result<Vec<[u8; 4]>> {
    let s = model.s_x();
    let latent = WeightedIndex::new(model.f_xstar.iter().map(|v| v.max(0.0)))
        .map_err(|e| Error::Config(format!("invalid latent distribution: {e}")))?;
    let xs = (0..s).map(|j| column_sampler(&model.m_x_given_xstar, j)).collect::<Result<Vec<_>>>()?;
    let zs = (0..s).map(|j| column_sampler(&model.m_z_given_xstar, j)).collect::<Result<Vec<_>>>()?;
    let mut rng = rng_from_seed(seed);
    Ok((0..count)
        .map(|_| {
            let k = latent.sample(&mut rng);
            let x = xs[k].sample(&mut rng);
            let y = u8::from(rng.random::<f64>() < model.f_y_given_xstar[k]);
            let z = zs[k].sample(&mut rng);
            [k as u8 + 1, x as u8 + 1, y, z as u8 + 1]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{frequency_pmf, tabulate};
    use crate::model::fixture;

    #[test]
    fn strength_zero_is_identity_and_truth_equals_report() {
        let spec = GeneratorSpec::new(3, 0.0, 0.1, 5);
        let models = make_model(&spec).unwrap();
        assert_eq!(models[0].m_x_given_xstar, DMatrix::identity(3, 3));
        let sample = draw(&models, &[1.0], &[], 2000, 1).unwrap();
        assert_eq!(sample.data.x(), &sample.xstar[..]);
        assert_eq!(sample.misclassification_rate(), 0.0);
    }

    #[test]
    fn accepted_models_meet_the_conditions() {
        for seed in 0..25 {
            let spec = GeneratorSpec { n_w_cells: 2, ..GeneratorSpec::new(3, 0.5, 0.15, seed) };
            for m in make_model(&spec).unwrap() {
                assert!(m.ord_satisfied(0.0));
                let fy: Vec<f64> = m.f_y_given_xstar.iter().copied().collect();
                assert!(min_gap(&fy) >= 0.15);
                let mats = crate::spectral::build_matrices(&m.population_pmf()).unwrap();
                assert!(linalg::singular_values(&mats.m_xz)[2] > 0.0);
            }
        }
    }

    #[test]
    fn separation_at_the_bound_is_still_drawn() {
        let mut rng = rng_from_seed(3);
        for _ in 0..100 {
            let v = spaced(&mut rng, 3, 0.45);
            assert!(min_gap(&v) >= 0.45 - 1e-12, "{v:?}");
            assert!(v.iter().all(|&p| (0.05 - 1e-12..=0.95 + 1e-12).contains(&p)));
        }
        assert!(make_model(&GeneratorSpec::new(3, 0.1, 0.42, 4)).is_ok());
    }

    #[test]
    fn impossible_separation_is_rejected() {
        assert!(make_model(&GeneratorSpec::new(3, 0.3, 0.5, 1)).is_err());
        let spec = GeneratorSpec { min_latent_mass: 0.33, ..GeneratorSpec::new(3, 0.3, 0.44, 1) };
        assert!(matches!(make_model(&spec), Err(Error::Generator(_))));
    }

    #[test]
    fn large_sample_matches_population_pmf() {
        let spec = GeneratorSpec::new(3, 0.4, 0.15, 8);
        let models = make_model(&spec).unwrap();
        let sample = draw(&models, &[1.0], &[], 1_000_000, 2).unwrap();
        let emp = frequency_pmf(&tabulate(&sample.data, None).unwrap());
        let pop = models[0].population_pmf();
        let diff = emp.probs().iter().zip(pop.probs()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 0.002, "{diff}");
        let rate = sample.misclassification_rate();
        assert!((rate - models[0].misclassification_rate()).abs() < 0.003);
    }

    #[test]
    fn published_baseline_reproduces_reported_marginal() {
        let model = MisclassificationModel::with_tolerance(
            fixture::baseline_m_x_given_xstar(),
            DVector::from_vec(vec![0.7, 0.5, 0.3]),
            DMatrix::from_row_slice(3, 3, &[0.6, 0.2, 0.1, 0.3, 0.6, 0.3, 0.1, 0.2, 0.6]),
            fixture::baseline_f_xstar(),
            1e-3,
        )
        .unwrap();
        let sample = draw(&[model], &[1.0], &[], 50_000, 3).unwrap();
        let fx = frequency_pmf(&tabulate(&sample.data, None).unwrap()).marginal_x();
        for (a, b) in fx.iter().zip(fixture::baseline_f_x().iter()) {
            assert!((a - b).abs() < 0.01, "{a} vs {b}");
        }
    }

    #[test]
    fn draws_are_reproducible_and_cells_follow_weights() {
        let spec = GeneratorSpec { n_w_cells: 4, ..GeneratorSpec::new(3, 0.3, 0.1, 2) };
        let models = make_model(&spec).unwrap();
        let weights = [0.1, 0.2, 0.3, 0.4];
        let a = draw(&models, &weights, &spec.w_names(), 40_000, 9).unwrap();
        assert_eq!(a, draw(&models, &weights, &spec.w_names(), 40_000, 9).unwrap());
        for (got, want) in a.data.cell_weights().iter().zip(weights) {
            assert!((got - want).abs() < 0.01);
        }
    }

    #[test]
    fn probit_population_properties() {
        let names: Vec<String> = (1..=3).map(|i| format!("w{i}")).collect();
        let flat = ProbitParams { beta: vec![0.0; 4], sigma: vec![1.0; 8], cutpoints: vec![0.0, 1.0, 2.0] };
        let lc = probit_population(&flat, &names, &[0.125; 8]).unwrap();
        assert!(lc.cells.iter().all(|c| c.probs == lc.cells[0].probs));
        let params = ProbitParams::with_exponential_scale(vec![0.3, -0.2, 0.5, 0.1], &[0.0, 0.2, -0.3, 0.1], vec![0.0, 1.0, 1.5]);
        let lc = probit_population(&params, &names, &[0.125; 8]).unwrap();
        for c in &lc.cells {
            assert!((c.probs.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        let bad = ProbitParams { cutpoints: vec![0.0, 0.5], ..flat };
        assert!(probit_population(&bad, &names, &[0.125; 8]).is_err());
    }

    #[test]
    fn simulated_csv_reads_back_through_its_schema() {
        let spec = GeneratorSpec { n_w_cells: 2, ..GeneratorSpec::new(3, 0.3, 0.1, 4) };
        let models = make_model(&spec).unwrap();
        let sample = draw(&models, &spec.weights(), &spec.w_names(), 500, 1).unwrap();
        let mut buf = Vec::new();
        sample.data.write_csv(&mut buf).unwrap();
        let (back, report) = crate::dataset::ingest(&buf[..], &spec.schema()).unwrap();
        assert_eq!(report.excluded(), 0);
        assert_eq!(back, sample.data);
    }
}
