//! Parametric summaries of latent (or reported) conditional distributions.
//!
//! Given `P(X* = i | Q = q)` for every covariate cell, the linear
//! projection, the nonparametric skedastic function and the heteroskedastic
//! ordered-probit coefficients all follow in closed form. The reported
//! baselines for the ordered probits are fitted by maximum likelihood on
//! grouped data instead.
//!
//! The ordered-probit coefficients describe the conditional median of the
//! latent index; they are not mean effects.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{cell_label, Dataset};
use crate::error::{Error, Result};
use crate::model::MisclassificationModel;
use crate::optim::{minimize, BfgsOptions};
use crate::probit::{norm_cdf, norm_pdf, norm_quantile};

pub const DEFAULT_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCell {
    pub w_cell: usize,
    pub label: String,
    /// Covariate vector with the intercept in slot 0.
    pub q: Vec<f64>,
    pub weight: f64,
    /// Distribution over categories `1..=I`.
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentConditional {
    pub coefficient_names: Vec<String>,
    pub cells: Vec<LatentCell>,
}

fn covariate_vector(cell: usize, k: usize) -> Vec<f64> {
    std::iter::once(1.0).chain((0..k).map(|b| ((cell >> b) & 1) as f64)).collect()
}

fn coefficient_names(w_names: &[String]) -> Vec<String> {
    std::iter::once("const".to_string()).chain(w_names.iter().cloned()).collect()
}

impl LatentConditional {
    /// Builds and validates a conditional from `(cell, weight, probs)`
    /// triples over binary covariates named `w_names`.
    pub fn new(w_names: &[String], entries: Vec<(usize, f64, Vec<f64>)>) -> Result<Self> {
        let k = w_names.len();
        let cells = entries
            .into_iter()
            .map(|(cell, weight, probs)| LatentCell {
                w_cell: cell,
                label: cell_label(w_names, cell),
                q: covariate_vector(cell, k),
                weight,
                probs,
            })
            .collect();
        let lc = LatentConditional { coefficient_names: coefficient_names(w_names), cells };
        lc.validate()?;
        Ok(lc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Config("no covariate cells".into()));
        }
        let categories = self.cells[0].probs.len();
        let total: f64 = self.cells.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("cell weights sum to {total}")));
        }
        for c in &self.cells {
            if c.probs.len() != categories || c.q.len() != self.coefficient_names.len() {
                return Err(Error::Domain(format!("cell {} has inconsistent dimensions", c.label)));
            }
            let s: f64 = c.probs.iter().sum();
            if (s - 1.0).abs() > 1e-9 || c.probs.iter().any(|&p| p < -1e-12) || c.weight < 0.0 {
                return Err(Error::Domain(format!("cell {} is not a distribution", c.label)));
            }
        }
        Ok(())
    }

    pub fn categories(&self) -> usize {
        self.cells[0].probs.len()
    }

    pub fn n_coefficients(&self) -> usize {
        self.coefficient_names.len()
    }

    /// Weight-averaged `E[X | Q]` per cell with categories numbered from 1.
    pub fn conditional_means(&self) -> Vec<f64> {
        self.cells
            .iter()
            .map(|c| c.probs.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum())
            .collect()
    }
}

/// Latent conditional from per-cell models: the probabilities of cell `w`
/// are that model's `f_X*`. Cells with zero weight are left out.
pub fn latent_conditional(
    models: &[MisclassificationModel],
    cell_weights: &[f64],
    w_names: &[String],
) -> Result<LatentConditional> {
    if cell_weights.len() != 1 << w_names.len() {
        return Err(Error::Config(format!(
            "{} cell weights for {} covariates",
            cell_weights.len(),
            w_names.len()
        )));
    }
    let mut entries = Vec::new();
    for (cell, &weight) in cell_weights.iter().enumerate() {
        if weight <= 0.0 {
            continue;
        }
        let model = models
            .iter()
            .find(|m| m.w_cell.unwrap_or(0) == cell)
            .ok_or_else(|| {
                Error::Config(format!("no model for covariate cell {}", cell_label(w_names, cell)))
            })?;
        entries.push((cell, weight, model.f_xstar.iter().copied().collect()));
    }
    LatentConditional::new(w_names, entries)
}

/// Empirical distribution of the reported outcome per covariate cell.
pub fn reported_conditional(data: &Dataset) -> Result<LatentConditional> {
    let s = data.support().s_x;
    let mut counts = vec![vec![0u64; s]; data.n_cells()];
    for (i, &w) in data.w().iter().enumerate() {
        counts[w as usize][data.x()[i] as usize - 1] += 1;
    }
    let n = data.n() as f64;
    let entries = counts
        .into_iter()
        .enumerate()
        .filter_map(|(cell, c)| {
            let total: u64 = c.iter().sum();
            (total > 0).then(|| {
                let t = total as f64;
                (cell, t / n, c.into_iter().map(|v| v as f64 / t).collect())
            })
        })
        .collect();
    LatentConditional::new(data.w_names(), entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitKind {
    Linear,
    OrderedProbitHomoskedastic,
    OrderedProbitHeteroskedastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Reported,
    Latent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSigma {
    pub label: String,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricFit {
    pub kind: FitKind,
    pub target: Target,
    pub coefficient_names: Vec<String>,
    pub beta: Vec<f64>,
    /// `mu_1, ..., mu_{I-1}`; empty for the linear projection.
    pub cutpoints: Vec<f64>,
    /// Weighted spread across cells of the per-cell cutpoint values, for
    /// cutpoints that are aggregated rather than fixed. Zero otherwise.
    pub cutpoint_spread: Vec<f64>,
    pub sigma_by_cell: Vec<CellSigma>,
    /// Exponential-index skedastic coefficients of the reported
    /// heteroskedastic fit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skedastic_coefficients: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_errors: Option<Vec<f64>>,
    pub clamp_events: usize,
    /// Worst per-cell deviation of the `(mu_1, mu_2) = (0, 1)` identity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization_deviation: Option<f64>,
    /// Mean log-likelihood per observation, for maximum-likelihood fits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_loglik: Option<f64>,
}

impl ParametricFit {
    fn closed(kind: FitKind, target: Target, lc: &LatentConditional, beta: Vec<f64>) -> Self {
        ParametricFit {
            kind,
            target,
            coefficient_names: lc.coefficient_names.clone(),
            beta,
            cutpoints: Vec::new(),
            cutpoint_spread: Vec::new(),
            sigma_by_cell: Vec::new(),
            skedastic_coefficients: None,
            std_errors: None,
            clamp_events: 0,
            normalization_deviation: None,
            mean_loglik: None,
        }
    }

    /// Estimates exported for bootstrap summaries: `beta` followed by the
    /// free cutpoints.
    pub fn estimates(&self) -> Vec<f64> {
        let fixed = match self.kind {
            FitKind::Linear => 0,
            FitKind::OrderedProbitHomoskedastic => 1,
            FitKind::OrderedProbitHeteroskedastic => 2,
        };
        let mut v = self.beta.clone();
        v.extend(self.cutpoints.iter().skip(fixed));
        v
    }
}

/// Solves the weighted least-squares problem `E[QQ'] b = E[Q v]`.
fn weighted_ls(lc: &LatentConditional, values: &[f64]) -> Result<Vec<f64>> {
    let k = lc.n_coefficients();
    let mut qq = DMatrix::<f64>::zeros(k, k);
    let mut qv = DVector::<f64>::zeros(k);
    for (c, &v) in lc.cells.iter().zip(values) {
        let q = DVector::from_column_slice(&c.q);
        qq += &q * q.transpose() * c.weight;
        qv += &q * (v * c.weight);
    }
    check_design_rank(&qq, &lc.coefficient_names)?;
    let sol = qq
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&qv))
        .or_else(|| qq.lu().solve(&qv))
        .ok_or_else(|| Error::Estimation("E[QQ'] is singular".into()))?;
    Ok(sol.iter().copied().collect())
}

fn check_design_rank(qq: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let scale = qq.diagonal().amax().max(f64::MIN_POSITIVE);
    let tol = 1e-10 * scale;
    if qq.rank(tol) == qq.nrows() {
        return Ok(());
    }
    // name the columns that add nothing to the span of the earlier ones
    let mut kept: Vec<usize> = Vec::new();
    let mut collinear = Vec::new();
    for j in 0..qq.ncols() {
        let mut trial = kept.clone();
        trial.push(j);
        let sub = DMatrix::from_fn(trial.len(), trial.len(), |a, b| qq[(trial[a], trial[b])]);
        if sub.rank(tol) == trial.len() {
            kept.push(j);
        } else {
            collinear.push(names[j].clone());
        }
    }
    Err(Error::Estimation(format!(
        "E[QQ'] is rank deficient; collinear columns: {}",
        collinear.join(", ")
    )))
}

/// Least-squares projection of `E[X | Q]` on `Q`.
pub fn linear_projection(lc: &LatentConditional, target: Target) -> Result<ParametricFit> {
    lc.validate()?;
    let beta = weighted_ls(lc, &lc.conditional_means())?;
    Ok(ParametricFit::closed(FitKind::Linear, target, lc, beta))
}

fn clamped_quantile(p: f64, clamp: f64, events: &mut usize) -> f64 {
    let c = p.clamp(clamp, 1.0 - clamp);
    if c != p {
        *events += 1;
    }
    norm_quantile(c)
}

fn cumulative(probs: &[f64], i: usize) -> f64 {
    probs[..i].iter().sum::<f64>().min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skedastic {
    pub sigma: Vec<CellSigma>,
    pub clamp_events: usize,
}

/// `sigma(q) = 1 / (Phi^-1(P[X <= 2 | q]) - Phi^-1(P[X <= 1 | q]))`.
pub fn skedastic(lc: &LatentConditional, clamp: f64) -> Result<Skedastic> {
    lc.validate()?;
    if lc.categories() < 3 {
        return Err(Error::Estimation("the skedastic function needs at least three categories".into()));
    }
    let mut events = 0;
    let mut sigma = Vec::with_capacity(lc.cells.len());
    for c in &lc.cells {
        let a = clamped_quantile(cumulative(&c.probs, 1), clamp, &mut events);
        let b = clamped_quantile(cumulative(&c.probs, 2), clamp, &mut events);
        let s = 1.0 / (b - a);
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Estimation(format!(
                "skedastic function is not positive in cell {}",
                c.label
            )));
        }
        sigma.push(CellSigma { label: c.label.clone(), sigma: s });
    }
    Ok(Skedastic { sigma, clamp_events: events })
}

/// Closed-form ordered probit with per-cell scale `sigma`; cutpoints from
/// the third on are weight-averaged across cells.
fn closed_form_probit(
    lc: &LatentConditional,
    sigma: &[f64],
    hetero: bool,
    clamp: f64,
    events: &mut usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut q1 = Vec::with_capacity(lc.cells.len());
    let mut quiet = 0;
    for (c, &s) in lc.cells.iter().zip(sigma) {
        // the skedastic step has already counted clamps of P[X <= 1]
        let counter = if hetero { &mut quiet } else { &mut *events };
        q1.push(-s * clamped_quantile(cumulative(&c.probs, 1), clamp, counter));
    }
    let beta = weighted_ls(lc, &q1)?;
    let index: Vec<f64> = lc
        .cells
        .iter()
        .map(|c| c.q.iter().zip(&beta).map(|(a, b)| a * b).sum())
        .collect();
    let first_free = if hetero { 3 } else { 2 };
    let categories = lc.categories();
    let mut cuts = vec![0.0];
    let mut spread = vec![0.0];
    if first_free == 3 {
        cuts.push(1.0);
        spread.push(0.0);
    }
    for i in first_free..categories {
        let per_cell: Vec<f64> = lc
            .cells
            .iter()
            .zip(sigma)
            .zip(&index)
            .map(|((c, &s), &xb)| xb + s * clamped_quantile(cumulative(&c.probs, i), clamp, events))
            .collect();
        let mean: f64 = per_cell.iter().zip(&lc.cells).map(|(v, c)| v * c.weight).sum();
        let var: f64 =
            per_cell.iter().zip(&lc.cells).map(|(v, c)| c.weight * (v - mean).powi(2)).sum();
        cuts.push(mean);
        spread.push(var.sqrt());
    }
    Ok((beta, cuts, spread))
}

fn check_increasing(cuts: &[f64]) -> Result<()> {
    if cuts.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Estimation(format!("cutpoints are not increasing: {cuts:?}")));
    }
    Ok(())
}

/// Closed-form heteroskedastic ordered probit given the skedastic function.
pub fn hetero_ordered_probit(
    lc: &LatentConditional,
    sked: &Skedastic,
    target: Target,
    clamp: f64,
) -> Result<ParametricFit> {
    lc.validate()?;
    if sked.sigma.len() != lc.cells.len() {
        return Err(Error::Config("skedastic function does not match the cells".into()));
    }
    let sigma: Vec<f64> = sked.sigma.iter().map(|s| s.sigma).collect();
    let mut events = sked.clamp_events;
    let (beta, cuts, spread) = closed_form_probit(lc, &sigma, true, clamp, &mut events)?;
    check_increasing(&cuts)?;
    let mut quiet = 0;
    let deviation = lc
        .cells
        .iter()
        .zip(&sigma)
        .map(|(c, &s)| {
            let a = s * clamped_quantile(cumulative(&c.probs, 1), clamp, &mut quiet);
            let b = s * clamped_quantile(cumulative(&c.probs, 2), clamp, &mut quiet) - 1.0;
            (a - b).abs()
        })
        .fold(0.0, f64::max);
    let mut fit = ParametricFit::closed(FitKind::OrderedProbitHeteroskedastic, target, lc, beta);
    fit.cutpoints = cuts;
    fit.cutpoint_spread = spread;
    fit.sigma_by_cell = sked.sigma.clone();
    fit.clamp_events = events;
    fit.normalization_deviation = Some(deviation);
    Ok(fit)
}

/// Homoskedastic ordered probit: the closed form with `sigma = 1` for the
/// latent target, maximum likelihood on grouped data for the reported one.
pub fn homo_ordered_probit(lc: &LatentConditional, target: Target, clamp: f64) -> Result<ParametricFit> {
    lc.validate()?;
    if lc.categories() < 2 {
        return Err(Error::Estimation("ordered probit needs at least two categories".into()));
    }
    let ones = vec![1.0; lc.cells.len()];
    let mut events = 0;
    let (beta, cuts, spread) = closed_form_probit(lc, &ones, false, clamp, &mut events)?;
    match target {
        Target::Latent => {
            check_increasing(&cuts)?;
            let mut fit = ParametricFit::closed(FitKind::OrderedProbitHomoskedastic, target, lc, beta);
            fit.cutpoints = cuts;
            fit.cutpoint_spread = spread;
            fit.clamp_events = events;
            Ok(fit)
        }
        Target::Reported => {
            let problem = Oprobit { lc, hetero: false };
            let mut start = beta;
            start.extend(increments(&cuts, 1));
            problem.fit(&start)
        }
    }
}

/// Reported heteroskedastic ordered probit with `sigma(q) = exp(q' gamma)`
/// and `(mu_1, mu_2) = (0, 1)`, by maximum likelihood on grouped data.
pub fn hetero_reported_mle(lc: &LatentConditional, clamp: f64) -> Result<ParametricFit> {
    lc.validate()?;
    if lc.categories() < 3 {
        return Err(Error::Estimation("the heteroskedastic probit needs at least three categories".into()));
    }
    let k = lc.n_coefficients();
    let problem = Oprobit { lc, hetero: true };
    let closed = skedastic(lc, clamp).and_then(|s| {
        let fit = hetero_ordered_probit(lc, &s, Target::Reported, clamp)?;
        let log_sigma: Vec<f64> = s.sigma.iter().map(|c| c.sigma.ln()).collect();
        Ok((fit, weighted_ls(lc, &log_sigma)?))
    });
    let start = match closed {
        Ok((fit, gamma)) => {
            let mut v = fit.beta;
            v.extend(gamma);
            v.extend(increments(&fit.cutpoints, 2));
            v
        }
        Err(e) => {
            log::debug!("closed-form start unavailable ({e}); starting from zero");
            let mut v = vec![0.0; 2 * k];
            v.extend(std::iter::repeat_n(0.0, lc.categories() - 3));
            v
        }
    };
    problem.fit(&start)
}

/// Dispatches on kind and target; `lc` must match the target.
pub fn estimate(lc: &LatentConditional, kind: FitKind, target: Target, clamp: f64) -> Result<ParametricFit> {
    match (kind, target) {
        (FitKind::Linear, _) => linear_projection(lc, target),
        (FitKind::OrderedProbitHomoskedastic, _) => homo_ordered_probit(lc, target, clamp),
        (FitKind::OrderedProbitHeteroskedastic, Target::Latent) => {
            let s = skedastic(lc, clamp)?;
            hetero_ordered_probit(lc, &s, target, clamp)
        }
        (FitKind::OrderedProbitHeteroskedastic, Target::Reported) => hetero_reported_mle(lc, clamp),
    }
}

/// Log increments of the cutpoints after the first `fixed` ones, with a
/// floor so a non-increasing start stays finite.
fn increments(cuts: &[f64], fixed: usize) -> Vec<f64> {
    (fixed..cuts.len()).map(|i| (cuts[i] - cuts[i - 1]).max(1e-3).ln()).collect()
}

struct Oprobit<'a> {
    lc: &'a LatentConditional,
    hetero: bool,
}

impl Oprobit<'_> {
    fn k(&self) -> usize {
        self.lc.n_coefficients()
    }

    fn fixed(&self) -> usize {
        if self.hetero {
            2
        } else {
            1
        }
    }

    fn cut_offset(&self) -> usize {
        if self.hetero {
            2 * self.k()
        } else {
            self.k()
        }
    }

    fn cutpoints(&self, theta: &[f64]) -> Vec<f64> {
        let mut cuts = vec![0.0];
        if self.hetero {
            cuts.push(1.0);
        }
        let mut last = *cuts.last().unwrap();
        for t in &theta[self.cut_offset()..] {
            last += t.exp();
            cuts.push(last);
        }
        cuts
    }

    /// Mean negative log-likelihood and gradient.
    fn objective(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let k = self.k();
        let cuts = self.cutpoints(theta);
        let categories = self.lc.categories();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut dmu = vec![0.0; cuts.len()];
        let mut ll = 0.0;
        for c in &self.lc.cells {
            let xb: f64 = c.q.iter().zip(&theta[..k]).map(|(a, b)| a * b).sum();
            let sigma = if self.hetero {
                c.q.iter().zip(&theta[k..2 * k]).map(|(a, b)| a * b).sum::<f64>().exp()
            } else {
                1.0
            };
            let z: Vec<f64> = cuts.iter().map(|m| (m - xb) / sigma).collect();
            let mut dz = vec![0.0; z.len()];
            for i in 0..categories {
                let wp = c.weight * c.probs[i];
                if wp <= 0.0 {
                    continue;
                }
                let upper = if i < categories - 1 { z[i] } else { f64::INFINITY };
                let lower = if i > 0 { z[i - 1] } else { f64::NEG_INFINITY };
                let p = if lower > 0.0 {
                    norm_cdf(-lower) - norm_cdf(-upper)
                } else {
                    norm_cdf(upper) - norm_cdf(lower)
                };
                if !(p > 0.0) {
                    return f64::INFINITY;
                }
                ll += wp * p.ln();
                if i < categories - 1 {
                    dz[i] += wp * norm_pdf(upper) / p;
                }
                if i > 0 {
                    dz[i - 1] -= wp * norm_pdf(lower) / p;
                }
            }
            for (j, &d) in dz.iter().enumerate() {
                for (b, &qb) in c.q.iter().enumerate() {
                    grad[b] -= d * qb / sigma;
                    if self.hetero {
                        grad[k + b] -= d * z[j] * qb;
                    }
                }
                dmu[j] += d / sigma;
            }
        }
        let off = self.cut_offset();
        let fixed = self.fixed();
        for (t, theta_t) in theta[off..].iter().enumerate() {
            let j = fixed + t;
            grad[off + t] = theta_t.exp() * dmu[j..].iter().sum::<f64>();
        }
        grad.iter_mut().for_each(|g| *g = -*g);
        -ll
    }

    fn fit(&self, start: &[f64]) -> Result<ParametricFit> {
        let opts = BfgsOptions { gradient_tolerance: 1e-9, ..BfgsOptions::default() };
        let out = minimize(|t, g| self.objective(t, g), start, &opts);
        if !out.converged || !out.f.is_finite() {
            return Err(Error::Estimation(format!(
                "ordered-probit likelihood did not converge after {} iterations (gradient {:.2e})",
                out.iterations, out.grad_norm
            )));
        }
        let k = self.k();
        let kind = if self.hetero {
            FitKind::OrderedProbitHeteroskedastic
        } else {
            FitKind::OrderedProbitHomoskedastic
        };
        let mut fit = ParametricFit::closed(kind, Target::Reported, self.lc, out.x[..k].to_vec());
        fit.cutpoints = self.cutpoints(&out.x);
        fit.cutpoint_spread = vec![0.0; fit.cutpoints.len()];
        fit.mean_loglik = Some(-out.f);
        if self.hetero {
            let gamma = out.x[k..2 * k].to_vec();
            fit.sigma_by_cell = self
                .lc
                .cells
                .iter()
                .map(|c| CellSigma {
                    label: c.label.clone(),
                    sigma: c.q.iter().zip(&gamma).map(|(a, b)| a * b).sum::<f64>().exp(),
                })
                .collect();
            fit.skedastic_coefficients = Some(gamma);
        }
        Ok(fit)
    }
}
