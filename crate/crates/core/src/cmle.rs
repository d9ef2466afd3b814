//! Constrained maximum likelihood for the misclassification model.
//!
//! Every probability column is mapped onto the open simplex through a
//! softmax with the last category as reference, so the search itself is
//! unconstrained. With the ordering restriction enforced, the last row of
//! `M_X|X*` is built from positive increments instead: `r_j` is the partial
//! sum of a simplex of size `S + 1`, and the remaining rows of column `j`
//! share the leftover mass `1 - r_j`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{derive_seed, rng_from_seed};
use crate::dataset::{frequency_pmf, ContingencyTable, JointPmf, Support};
use crate::error::{Error, Result};
use crate::model::{ord_order, MisclassificationModel, STOCHASTIC_TOL};
use crate::optim::{minimize, BfgsOptions};
use crate::spectral::{eigendecompose_identify, SpectralOptions};

/// Number of free parameters of the model on an `S_X x S_Y x S_Z` grid.
pub fn param_count(s_x: usize, s_y: usize, s_z: usize) -> usize {
    s_x * (s_x + s_y + s_z - 3) + s_x - 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrdConstraint {
    Enforce,
    CheckOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmleConfig {
    pub n_starts: usize,
    pub max_iterations: usize,
    /// On the mean negative log-likelihood.
    pub gradient_tolerance: f64,
    pub ord_constraint: OrdConstraint,
    pub seed: u64,
    /// Use the spectral solution as the first start when it exists.
    pub spectral_start: bool,
    /// Relative log-likelihood distance for a start to count as agreeing.
    pub agreement_tolerance: f64,
    /// Distance to 0, 1 or an ordering tie that raises a boundary flag.
    pub boundary_tolerance: f64,
}

impl Default for CmleConfig {
    fn default() -> Self {
        CmleConfig {
            n_starts: 10,
            max_iterations: 2000,
            gradient_tolerance: 1e-7,
            ord_constraint: OrdConstraint::CheckOnly,
            seed: 0,
            spectral_start: true,
            agreement_tolerance: 1e-6,
            boundary_tolerance: 1e-3,
        }
    }
}

impl CmleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_starts == 0 {
            return Err(Error::Config("n_starts must be at least 1".into()));
        }
        if self.max_iterations == 0 || !(self.gradient_tolerance > 0.0) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartOrigin {
    Spectral,
    Warm,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartDiagnostics {
    pub index: usize,
    pub origin: StartOrigin,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmleResult {
    pub model: MisclassificationModel,
    pub loglik: f64,
    pub n_starts: usize,
    pub n_starts_converged: usize,
    pub n_starts_agreeing: usize,
    pub boundary_flags: Vec<String>,
    /// Strict ordering check on the reported model.
    pub ord_satisfied: bool,
    /// Latent state `j` of the reported model is state `label_order[j]` of
    /// the raw optimum. Identity unless labels were sorted in check-only
    /// mode.
    pub label_order: Vec<usize>,
    pub starts: Vec<StartDiagnostics>,
}

impl CmleResult {
    pub fn at_boundary(&self) -> bool {
        !self.boundary_flags.is_empty()
    }
}

/// Log-likelihood `sum_j m_j ln P(x_j, y_j, z_j)` of a table under a model.
pub fn loglik(model: &MisclassificationModel, table: &ContingencyTable) -> Result<f64> {
    model.validate(STOCHASTIC_TOL)?;
    if model.support() != table.support() {
        return Err(Error::Domain("model and table supports differ".into()));
    }
    let support = table.support();
    let mut total = 0.0;
    for (idx, &m) in table.counts().iter().enumerate() {
        if m == 0 {
            continue;
        }
        let (x, y, z) = support.triple(idx);
        let p = model.cell_probability(x, y, z);
        if p <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        total += m as f64 * p.ln();
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    s: usize,
    sz: usize,
    ord: bool,
}

#[derive(Debug, Clone)]
struct Probs {
    /// Row-major `s x s`.
    mx: Vec<f64>,
    py: Vec<f64>,
    /// Row-major `sz x s`.
    mz: Vec<f64>,
    pi: Vec<f64>,
}

const LOG_FLOOR: f64 = 1e-12;

fn softmax_ref(free: &[f64], out: &mut [f64]) {
    let max = free.iter().fold(0.0f64, |m, &v| m.max(v));
    let mut total = (-max).exp();
    for (o, &a) in out.iter_mut().zip(free) {
        *o = (a - max).exp();
        total += *o;
    }
    out[free.len()] = (-max).exp();
    out.iter_mut().for_each(|o| *o /= total);
}

fn softmax_back(p: &[f64], g: &[f64], out: &mut [f64]) {
    let mean: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    for i in 0..out.len() {
        out[i] = p[i] * (g[i] - mean);
    }
}

fn logits(p: &[f64], out: &mut [f64]) {
    let last = p[p.len() - 1].max(LOG_FLOOR).ln();
    for (o, &v) in out.iter_mut().zip(p) {
        *o = v.max(LOG_FLOOR).ln() - last;
    }
}

fn logistic(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

impl Layout {
    fn dim(&self) -> usize {
        param_count(self.s, 2, self.sz)
    }

    fn mx_len(&self) -> usize {
        self.s * (self.s - 1)
    }

    fn decode(&self, theta: &[f64]) -> Probs {
        let (s, sz) = (self.s, self.sz);
        let mut mx = vec![0.0; s * s];
        let mut col = vec![0.0; s.max(sz) + 1];
        if self.ord {
            let mut delta = vec![0.0; s + 1];
            softmax_ref(&theta[..s], &mut delta);
            let mut r = 0.0;
            let mut off = s;
            for j in 0..s {
                r += delta[j];
                mx[(s - 1) * s + j] = r;
                softmax_ref(&theta[off..off + s - 2], &mut col[..s - 1]);
                for i in 0..s - 1 {
                    mx[i * s + j] = (1.0 - r) * col[i];
                }
                off += s - 2;
            }
        } else {
            for j in 0..s {
                softmax_ref(&theta[j * (s - 1)..(j + 1) * (s - 1)], &mut col[..s]);
                for i in 0..s {
                    mx[i * s + j] = col[i];
                }
            }
        }
        let mut off = self.mx_len();
        let py = theta[off..off + s].iter().map(|&a| logistic(a)).collect();
        off += s;
        let mut mz = vec![0.0; sz * s];
        for j in 0..s {
            softmax_ref(&theta[off..off + sz - 1], &mut col[..sz]);
            for i in 0..sz {
                mz[i * s + j] = col[i];
            }
            off += sz - 1;
        }
        let mut pi = vec![0.0; s];
        softmax_ref(&theta[off..off + s - 1], &mut pi);
        Probs { mx, py, mz, pi }
    }

    /// Inverse of `decode` up to flooring of zero probabilities. In ORD
    /// mode the last row is forced to increase.
    fn encode(&self, model: &MisclassificationModel) -> Vec<f64> {
        let (s, sz) = (self.s, self.sz);
        let mut theta = vec![0.0; self.dim()];
        let mx = &model.m_x_given_xstar;
        if self.ord {
            let mut delta = Vec::with_capacity(s + 1);
            let mut prev = 0.0;
            for j in 0..s {
                let r = mx[(s - 1, j)];
                delta.push((r - prev).max(1e-6));
                prev = r.max(prev);
            }
            delta.push((1.0 - prev).max(1e-6));
            logits(&delta, &mut theta[..s]);
            let mut off = s;
            for j in 0..s {
                let rest: Vec<f64> = (0..s - 1).map(|i| mx[(i, j)]).collect();
                logits(&rest, &mut theta[off..off + s - 2]);
                off += s - 2;
            }
        } else {
            for j in 0..s {
                let colv: Vec<f64> = mx.column(j).iter().copied().collect();
                logits(&colv, &mut theta[j * (s - 1)..(j + 1) * (s - 1)]);
            }
        }
        let mut off = self.mx_len();
        for j in 0..s {
            let p = model.f_y_given_xstar[j].clamp(LOG_FLOOR, 1.0 - LOG_FLOOR);
            theta[off + j] = (p / (1.0 - p)).ln();
        }
        off += s;
        for j in 0..s {
            let colv: Vec<f64> = model.m_z_given_xstar.column(j).iter().copied().collect();
            logits(&colv, &mut theta[off..off + sz - 1]);
            off += sz - 1;
        }
        let pi: Vec<f64> = model.f_xstar.iter().copied().collect();
        logits(&pi, &mut theta[off..off + s - 1]);
        theta
    }

    fn to_model(&self, p: &Probs) -> MisclassificationModel {
        let (s, sz) = (self.s, self.sz);
        MisclassificationModel {
            m_x_given_xstar: DMatrix::from_row_slice(s, s, &p.mx),
            f_y_given_xstar: DVector::from_vec(p.py.clone()),
            m_z_given_xstar: DMatrix::from_row_slice(sz, s, &p.mz),
            f_xstar: DVector::from_vec(p.pi.clone()),
            w_cell: None,
        }
    }

    /// Mean negative log-likelihood and its gradient in `theta`.
    fn objective(&self, cells: &[(usize, usize, usize, f64)], total: f64, theta: &[f64], grad: &mut [f64]) -> f64 {
        let (s, sz) = (self.s, self.sz);
        let p = self.decode(theta);
        let mut gmx = vec![0.0; s * s];
        let mut gpy = vec![0.0; s];
        let mut gmz = vec![0.0; sz * s];
        let mut gpi = vec![0.0; s];
        let mut ll = 0.0;
        let mut terms = vec![0.0; s];
        for &(x, y, z, m) in cells {
            let mut q = 0.0;
            for k in 0..s {
                let py = if y == 1 { p.py[k] } else { 1.0 - p.py[k] };
                terms[k] = py * p.mz[z * s + k] * p.pi[k];
                q += p.mx[x * s + k] * terms[k];
            }
            if !(q > 0.0) {
                return f64::INFINITY;
            }
            ll += m * q.ln();
            let w = m / q;
            let sign = if y == 1 { 1.0 } else { -1.0 };
            for k in 0..s {
                let py = if y == 1 { p.py[k] } else { 1.0 - p.py[k] };
                let mxk = p.mx[x * s + k];
                gmx[x * s + k] += w * terms[k];
                gpy[k] += w * sign * mxk * p.mz[z * s + k] * p.pi[k];
                gmz[z * s + k] += w * mxk * py * p.pi[k];
                gpi[k] += w * mxk * py * p.mz[z * s + k];
            }
        }

        let mut col = vec![0.0; s.max(sz) + 1];
        let mut gcol = vec![0.0; s.max(sz) + 1];
        if self.ord {
            let mut dr = vec![0.0; s];
            let mut off = s;
            for j in 0..s {
                let r = p.mx[(s - 1) * s + j];
                let shares: Vec<f64> = (0..s - 1).map(|i| p.mx[i * s + j] / (1.0 - r)).collect();
                dr[j] = gmx[(s - 1) * s + j]
                    - (0..s - 1).map(|i| gmx[i * s + j] * shares[i]).sum::<f64>();
                for i in 0..s - 1 {
                    gcol[i] = (1.0 - r) * gmx[i * s + j];
                }
                softmax_back(&shares, &gcol[..s - 1], &mut grad[off..off + s - 2]);
                off += s - 2;
            }
            // dL/d delta_k = sum_{j >= k} dL/dr_j, zero for the slack
            let mut delta = vec![0.0; s + 1];
            softmax_ref(&theta[..s], &mut delta);
            let mut gdelta = vec![0.0; s + 1];
            let mut acc = 0.0;
            for k in (0..s).rev() {
                acc += dr[k];
                gdelta[k] = acc;
            }
            softmax_back(&delta, &gdelta, &mut grad[..s]);
        } else {
            for j in 0..s {
                for i in 0..s {
                    col[i] = p.mx[i * s + j];
                    gcol[i] = gmx[i * s + j];
                }
                softmax_back(&col[..s], &gcol[..s], &mut grad[j * (s - 1)..(j + 1) * (s - 1)]);
            }
        }
        let mut off = self.mx_len();
        for k in 0..s {
            grad[off + k] = gpy[k] * p.py[k] * (1.0 - p.py[k]);
        }
        off += s;
        for j in 0..s {
            for i in 0..sz {
                col[i] = p.mz[i * s + j];
                gcol[i] = gmz[i * s + j];
            }
            softmax_back(&col[..sz], &gcol[..sz], &mut grad[off..off + sz - 1]);
            off += sz - 1;
        }
        softmax_back(&p.pi, &gpi, &mut grad[off..off + s - 1]);

        grad.iter_mut().for_each(|g| *g = -*g / total);
        -ll / total
    }
}

fn flat_simplex<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect::<Vec<f64>>();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

const SATURATION: f64 = 1e-5;
const ESCAPE_ROUNDS: usize = 5;
const ESCAPE_MIX: f64 = 0.2;

fn saturated(model: &MisclassificationModel) -> bool {
    model.flatten().iter().any(|&p| p < SATURATION || p > 1.0 - SATURATION)
}

fn pulled_inward(model: &MisclassificationModel) -> MisclassificationModel {
    let mix = |m: &DMatrix<f64>| m.map(|p| (1.0 - ESCAPE_MIX) * p + ESCAPE_MIX / m.nrows() as f64);
    let s = model.s_x() as f64;
    MisclassificationModel {
        m_x_given_xstar: mix(&model.m_x_given_xstar),
        f_y_given_xstar: model.f_y_given_xstar.map(|p| (1.0 - ESCAPE_MIX) * p + ESCAPE_MIX / 2.0),
        m_z_given_xstar: mix(&model.m_z_given_xstar),
        f_xstar: model.f_xstar.map(|p| (1.0 - ESCAPE_MIX) * p + ESCAPE_MIX / s),
        w_cell: None,
    }
}

fn random_model<R: Rng>(rng: &mut R, s: usize, sz: usize) -> MisclassificationModel {
    let mut mx = DMatrix::zeros(s, s);
    for j in 0..s {
        mx.set_column(j, &DVector::from_vec(flat_simplex(rng, s)));
    }
    let mut mz = DMatrix::zeros(sz, s);
    for j in 0..s {
        mz.set_column(j, &DVector::from_vec(flat_simplex(rng, sz)));
    }
    let model = MisclassificationModel {
        m_x_given_xstar: mx,
        f_y_given_xstar: DVector::from_fn(s, |_, _| rng.random::<f64>()),
        m_z_given_xstar: mz,
        f_xstar: DVector::from_vec(flat_simplex(rng, s)),
        w_cell: None,
    };
    let order = ord_order(&model.m_x_given_xstar, 0.0);
    model.permuted(&order)
}

fn boundary_flags(model: &MisclassificationModel, tol: f64) -> Vec<String> {
    let mut flags = Vec::new();
    for (name, value) in model.parameter_names().into_iter().zip(model.flatten()) {
        if value < tol {
            flags.push(format!("{name} = {value:.2e} is near 0"));
        } else if value > 1.0 - tol {
            flags.push(format!("{name} = {value:.6} is near 1"));
        }
    }
    let last = model.s_x() - 1;
    for j in 1..model.s_x() {
        let gap = model.m_x_given_xstar[(last, j)] - model.m_x_given_xstar[(last, j - 1)];
        if gap < tol {
            flags.push(format!(
                "ordering gap between latent states {} and {} is {gap:.2e}",
                j,
                j + 1
            ));
        }
    }
    flags
}

/// Fits the model to a contingency table.
pub fn fit(table: &ContingencyTable, config: &CmleConfig) -> Result<CmleResult> {
    fit_with_start(table, config, None)
}

/// Like [`fit`], with an optional warm start replacing the spectral start.
pub fn fit_with_start(
    table: &ContingencyTable,
    config: &CmleConfig,
    warm: Option<&MisclassificationModel>,
) -> Result<CmleResult> {
    if table.n() == 0 {
        return Err(Error::Data("cannot fit an empty table".into()));
    }
    let weights: Vec<f64> = table.counts().iter().map(|&c| c as f64).collect();
    let start = match warm {
        Some(m) => Some((m.clone(), StartOrigin::Warm)),
        None if config.spectral_start => spectral_start(&frequency_pmf(table)),
        None => None,
    };
    let mut result = fit_weights(&weights, table.support(), config, start)?;
    result.model.w_cell = table.w_cell();
    Ok(result)
}

/// Fits the model to a probability table, treating probabilities as
/// counts summing to one.
pub fn fit_pmf(pmf: &JointPmf, config: &CmleConfig) -> Result<CmleResult> {
    let start = if config.spectral_start { spectral_start(pmf) } else { None };
    fit_weights(pmf.probs(), pmf.support(), config, start)
}

fn spectral_start(pmf: &JointPmf) -> Option<(MisclassificationModel, StartOrigin)> {
    if pmf.support().s_x != pmf.support().s_z {
        return None;
    }
    eigendecompose_identify(pmf, &SpectralOptions::default())
        .ok()
        .map(|(m, _)| (m, StartOrigin::Spectral))
}

fn fit_weights(
    weights: &[f64],
    support: Support,
    config: &CmleConfig,
    start0: Option<(MisclassificationModel, StartOrigin)>,
) -> Result<CmleResult> {
    config.validate()?;
    if support.s_y != 2 {
        return Err(Error::Config("the auxiliary y must be binary".into()));
    }
    if support.s_x < 2 || support.s_z < 2 {
        return Err(Error::Config("supports must have at least two categories".into()));
    }
    let layout = Layout {
        s: support.s_x,
        sz: support.s_z,
        ord: config.ord_constraint == OrdConstraint::Enforce,
    };
    let cells: Vec<(usize, usize, usize, f64)> = weights
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(i, &w)| {
            let (x, y, z) = support.triple(i);
            (x, y, z, w)
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let opts = BfgsOptions {
        max_iterations: config.max_iterations,
        gradient_tolerance: config.gradient_tolerance,
        ..BfgsOptions::default()
    };

    let runs: Vec<(StartDiagnostics, Vec<f64>)> = (0..config.n_starts)
        .into_par_iter()
        .map(|index| {
            let (init, origin) = match (&start0, index) {
                (Some((m, origin)), 0) => (m.clone(), *origin),
                _ => {
                    let mut rng = rng_from_seed(derive_seed(config.seed, index as u64, 0));
                    (random_model(&mut rng, layout.s, layout.sz), StartOrigin::Random)
                }
            };
            let theta0 = layout.encode(&init);
            let mut out = minimize(|t, g| layout.objective(&cells, total, t, g), &theta0, &opts);
            for _ in 0..ESCAPE_ROUNDS {
                let current = layout.to_model(&layout.decode(&out.x));
                if !out.converged || !saturated(&current) {
                    break;
                }
                let retry = minimize(
                    |t, g| layout.objective(&cells, total, t, g),
                    &layout.encode(&pulled_inward(&current)),
                    &opts,
                );
                if !(retry.converged && retry.f < out.f) {
                    break;
                }
                out = retry;
            }
            let diag = StartDiagnostics {
                index,
                origin,
                loglik: -out.f * total,
                iterations: out.iterations,
                converged: out.converged && out.f.is_finite(),
                grad_norm: out.grad_norm,
            };
            (diag, out.x)
        })
        .collect();

    let mut best: Option<usize> = None;
    for (i, (d, _)) in runs.iter().enumerate() {
        if d.converged && best.is_none_or(|b| d.loglik > runs[b].0.loglik) {
            best = Some(i);
        }
    }
    let starts: Vec<StartDiagnostics> = runs.iter().map(|(d, _)| d.clone()).collect();
    let Some(best) = best else {
        let detail: Vec<String> = starts
            .iter()
            .map(|d| {
                format!(
                    "start {} ({:?}): loglik {:.6}, {} iterations, gradient {:.2e}",
                    d.index, d.origin, d.loglik, d.iterations, d.grad_norm
                )
            })
            .collect();
        return Err(Error::Optimization(format!(
            "no start converged; {}",
            detail.join("; ")
        )));
    };
    let best_ll = runs[best].0.loglik;
    let n_converged = starts.iter().filter(|d| d.converged).count();
    let n_agreeing = starts
        .iter()
        .filter(|d| d.converged && (d.loglik - best_ll).abs() <= config.agreement_tolerance * best_ll.abs().max(f64::MIN_POSITIVE))
        .count();

    let raw = layout.to_model(&layout.decode(&runs[best].1));
    let label_order = if layout.ord {
        (0..layout.s).collect()
    } else {
        ord_order(&raw.m_x_given_xstar, 0.0)
    };
    if label_order.iter().enumerate().any(|(j, &k)| j != k) {
        log::info!("latent states relabeled by the ordering restriction: {label_order:?}");
    }
    let model = raw.permuted(&label_order);
    let ord_satisfied = model.ord_satisfied(0.0);
    if !ord_satisfied {
        log::warn!("fitted model violates the ordering restriction");
    }
    Ok(CmleResult {
        boundary_flags: boundary_flags(&model, config.boundary_tolerance),
        model,
        loglik: best_ll,
        n_starts: config.n_starts,
        n_starts_converged: n_converged,
        n_starts_agreeing: n_agreeing,
        ord_satisfied,
        label_order,
        starts,
    })
}
